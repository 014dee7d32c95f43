//! 2-D convolution kernels (forward and backward) via im2col + GEMM.
//!
//! Layout is NCHW throughout. Each batch sample is lowered independently,
//! which lets the batch dimension parallelize across threads without changing
//! any accumulation order: per-sample results are written to disjoint output
//! slices and weight-gradient partials are reduced in a fixed sequential
//! order, so results are bit-identical regardless of thread count.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};
use rayon::prelude::*;

use super::Real;

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, input: usize, kernel: usize) -> usize {
        let eff = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.pad >= eff,
            "conv input {} too small for effective kernel {}",
            input,
            eff
        );
        (input + 2 * self.pad - eff) / self.stride + 1
    }
}

/// Output columns with an in-bounds input pixel for kernel column `kj`:
/// `iw = ow*stride + kj*dilation - pad` must land in `[0, w)`.
#[inline]
fn valid_ow_range(kj: usize, w: usize, wout: usize, g: ConvGeom) -> Option<(usize, usize)> {
    let off = kj * g.dilation; // iw = ow*stride + off - pad
    let lo = if g.pad > off { (g.pad - off).div_ceil(g.stride) } else { 0 };
    let hi_num = w - 1 + g.pad;
    if hi_num < off {
        return None;
    }
    let hi = ((hi_num - off) / g.stride).min(wout - 1);
    (lo <= hi).then_some((lo, hi))
}

/// Lower one sample into column-major patches: (Cin*kh*kw, Hout*Wout).
/// Inner loops run over contiguous slices; stride-1 rows are plain copies.
fn im2col<F: Real>(x: ArrayView3<F>, kh: usize, kw: usize, g: ConvGeom) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let hout = g.out_dim(h, kh);
    let wout = g.out_dim(w, kw);
    let xs = x.as_slice().expect("contiguous sample");
    let mut cols = Array2::<F>::zeros((cin * kh * kw, hout * wout));
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for c in 0..cin {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cs[((c * kh + ki) * kw + kj) * hout * wout..][..hout * wout];
                let Some((lo, hi)) = valid_ow_range(kj, w, wout, g) else { continue };
                for oh in 0..hout {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..][..w];
                    let dst = &mut row[oh * wout + lo..oh * wout + hi + 1];
                    let iw0 = lo * g.stride + kj * g.dilation - g.pad;
                    if g.stride == 1 {
                        dst.copy_from_slice(&src_row[iw0..iw0 + dst.len()]);
                    } else {
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = src_row[iw0 + t * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of `im2col`: columns back into an image.
fn col2im<F: Real>(
    cols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
) -> Array3<F> {
    let hout = g.out_dim(h, kh);
    let wout = g.out_dim(w, kw);
    let mut x = Array3::<F>::zeros((cin, h, w));
    let xs = x.as_slice_mut().expect("contiguous image");
    let cs = cols.as_slice().expect("contiguous cols");
    for c in 0..cin {
        let plane = &mut xs[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cs[((c * kh + ki) * kw + kj) * hout * wout..][..hout * wout];
                let Some((lo, hi)) = valid_ow_range(kj, w, wout, g) else { continue };
                for oh in 0..hout {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..][..w];
                    let src = &row[oh * wout + lo..oh * wout + hi + 1];
                    let iw0 = lo * g.stride + kj * g.dilation - g.pad;
                    if g.stride == 1 {
                        for (s, d) in src.iter().zip(dst_row[iw0..iw0 + src.len()].iter_mut()) {
                            *d += *s;
                        }
                    } else {
                        for (t, s) in src.iter().enumerate() {
                            dst_row[iw0 + t * g.stride] += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix<F: Real>(w: ArrayView4<F>) -> Array2<F> {
    let (cout, cin, kh, kw) = w.dim();
    w.to_shape(((cout, cin * kh * kw), ndarray::Order::RowMajor))
        .expect("contiguous weight")
        .to_owned()
}

/// Forward convolution. `bias`, when present, is added per output channel.
pub fn forward<F: Real>(
    x: &Array4<F>,
    w: &Array4<F>,
    bias: Option<&Array1<F>>,
    g: ConvGeom,
) -> Array4<F> {
    let (n, cin, h, width) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv channel mismatch");
    let hout = g.out_dim(h, kh);
    let wout = g.out_dim(width, kw);
    let wmat = weight_matrix(w.view());

    let mut out = Array4::<F>::zeros((n, cout, hout, wout));
    let sample_len = cout * hout * wout;
    let out_slice = out.as_slice_mut().expect("contiguous output");
    let run = |chunk: &mut [F], sample: ArrayView3<F>| {
        let cols = im2col(sample, kh, kw, g);
        let prod = wmat.dot(&cols);
        chunk.copy_from_slice(prod.as_slice().expect("contiguous gemm"));
    };
    if n > 1 {
        out_slice
            .par_chunks_mut(sample_len)
            .zip(x.outer_iter().into_par_iter())
            .for_each(|(chunk, sample)| run(chunk, sample));
    } else {
        for (chunk, sample) in out_slice.chunks_mut(sample_len).zip(x.outer_iter()) {
            run(chunk, sample);
        }
    }
    if let Some(b) = bias {
        assert_eq!(b.len(), cout, "bias length");
        for mut img in out.outer_iter_mut() {
            for (c, mut plane) in img.outer_iter_mut().enumerate() {
                plane += b[c];
            }
        }
    }
    out
}

/// Gradients of the convolution w.r.t. input, weights, and bias.
///
/// Recomputes im2col per sample instead of caching it; the extra lowering is
/// cheaper than holding the column matrices alive for the whole tape.
pub fn backward<F: Real>(
    x: &Array4<F>,
    w: &Array4<F>,
    grad_out: &Array4<F>,
    has_bias: bool,
    g: ConvGeom,
) -> (Array4<F>, Array4<F>, Option<Array1<F>>) {
    let (n, cin, h, width) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let hout = g.out_dim(h, kh);
    let wout = g.out_dim(width, kw);
    assert_eq!(grad_out.dim(), (n, cout, hout, wout), "grad_out shape");
    let wmat = weight_matrix(w.view());
    let wmat_t = wmat.t().to_owned();

    let mut grad_x = Array4::<F>::zeros((n, cin, h, width));
    let in_len = cin * h * width;
    let gx_slice = grad_x.as_slice_mut().expect("contiguous grad_x");

    let per_sample = |gx_chunk: &mut [F], sample: ArrayView3<F>, gout: ArrayView3<F>| -> Array2<F> {
        let gout_mat = gout
            .to_shape(((cout, hout * wout), ndarray::Order::RowMajor))
            .expect("contiguous grad_out")
            .to_owned();
        // d/dx: W^T * gout, scattered back to image layout.
        let gcols = wmat_t.dot(&gout_mat);
        let gx = col2im(&gcols, cin, h, width, kh, kw, g);
        gx_chunk.copy_from_slice(gx.as_slice().expect("contiguous"));
        // d/dW partial for this sample: gout * cols^T.
        let cols = im2col(sample, kh, kw, g);
        gout_mat.dot(&cols.t())
    };

    let partials: Vec<Array2<F>> = if n > 1 {
        gx_slice
            .par_chunks_mut(in_len)
            .zip(x.outer_iter().into_par_iter())
            .zip(grad_out.outer_iter().into_par_iter())
            .map(|((chunk, sample), gout)| per_sample(chunk, sample, gout))
            .collect()
    } else {
        gx_slice
            .chunks_mut(in_len)
            .zip(x.outer_iter())
            .zip(grad_out.outer_iter())
            .map(|((chunk, sample), gout)| per_sample(chunk, sample, gout))
            .collect()
    };

    let mut gw_mat = Array2::<F>::zeros((cout, cin * kh * kw));
    for p in partials {
        gw_mat += &p;
    }
    let grad_w = gw_mat
        .to_shape(((cout, cin, kh, kw), ndarray::Order::RowMajor))
        .expect("weight grad shape")
        .to_owned();

    let grad_b = has_bias.then(|| {
        let mut gb = Array1::<F>::zeros(cout);
        for img in grad_out.outer_iter() {
            for (c, plane) in img.outer_iter().enumerate() {
                let mut acc = 0.0f64;
                for v in plane.iter() {
                    acc += v.as_f64();
                }
                gb[c] += F::from_f64(acc);
            }
        }
        gb
    });

    (grad_x, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct O(everything) convolution used as the oracle.
    fn conv_naive(x: &Array4<f64>, w: &Array4<f64>, b: Option<&Array1<f64>>, g: ConvGeom) -> Array4<f64> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, kh, kw) = w.dim();
        let hout = g.out_dim(h, kh);
        let wout = g.out_dim(wd, kw);
        let mut out = Array4::<f64>::zeros((n, cout, hout, wout));
        for ni in 0..n {
            for co in 0..cout {
                for oh in 0..hout {
                    for ow in 0..wout {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x[(ni, ci, ih as usize, iw as usize)]
                                            * w[(co, ci, ki, kj)];
                                    }
                                }
                            }
                        }
                        out[(ni, co, oh, ow)] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_arr4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive_over_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases = [
            (1, 1, 1, 3), // stride, pad, dilation, kernel
            (1, 2, 2, 3),
            (2, 1, 1, 3),
            (2, 1, 1, 4),
            (1, 3, 3, 3),
            (1, 4, 4, 3),
        ];
        for &(stride, pad, dilation, k) in &cases {
            let g = ConvGeom { stride, pad, dilation };
            let x = rand_arr4(&mut rng, (2, 3, 12, 12));
            let w = rand_arr4(&mut rng, (4, 3, k, k));
            let b = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0));
            let got = forward(&x, &w, Some(&b), g);
            let want = conv_naive(&x, &w, Some(&b), g);
            let max = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "geom {:?} max err {}", g, max);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom { stride: 2, pad: 1, dilation: 1 };
        let x = rand_arr4(&mut rng, (2, 2, 6, 6));
        let w = rand_arr4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_simple_fn(3, || rng.gen_range(-1.0..1.0));
        // Scalar objective: weighted sum of outputs with fixed coefficients.
        let coef = rand_arr4(&mut rng, (2, 3, 3, 3));
        let objective = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            (forward(x, w, Some(b), g) * &coef).sum()
        };
        let base_out = forward(&x, &w, Some(&b), g);
        let (gx, gw, gb) = backward(&x, &w, &coef, true, g);
        assert_eq!(base_out.dim(), coef.dim());

        let h = 1e-6;
        for idx in [(0, 0, 1, 2), (1, 1, 4, 5), (0, 1, 0, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "gx at {:?}: fd {} ad {}", idx, fd, gx[idx]);
        }
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1), (1, 0, 1, 2)] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-6, "gw at {:?}: fd {} ad {}", idx, fd, gw[idx]);
        }
        let gb = gb.unwrap();
        for c in 0..3 {
            let mut bp = b.clone();
            bp[c] += h;
            let mut bm = b.clone();
            bm[c] -= h;
            let fd = (objective(&x, &w, &bp) - objective(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[c]).abs() < 1e-6, "gb at {}: fd {} ad {}", c, fd, gb[c]);
        }
    }
}
