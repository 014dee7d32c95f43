//! Binary square masks and the mask algebra used by every loss and pipeline.
//!
//! A mask is an H×W matrix of exact zeros and ones whose 1-region is a single
//! axis-aligned square kept at least one pixel away from every image border.
//! Ones mark pixels to synthesize; zeros mark pixels to keep. The algebra —
//! inside/outside masking, complementation, mask-channel concatenation and
//! known-pixel restoration — is defined on plain binary matrices so that a
//! mask's complement (whose ones are *not* a square) can flow through the
//! same operations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::rng;

/// Placement of the all-ones square inside the mask grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquareRegion {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Sampling policy for masks: the square's area as a fraction of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { min_fraction: 0.25, max_fraction: 0.35, seed: 0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_fraction > 0.0 && self.min_fraction <= self.max_fraction && self.max_fraction < 1.0) {
            return Err(Error::Config(format!(
                "mask fractions must satisfy 0 < min <= max < 1, got [{}, {}]",
                self.min_fraction, self.max_fraction
            )));
        }
        Ok(())
    }

    /// Fresh deterministic sampling stream for this spec.
    pub fn stream(&self) -> rand_chacha::ChaCha8Rng {
        rng::stream(self.seed, "mask-spec", 0)
    }
}

/// A binary mask with a single interior square of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Array2<f32>,
    region: SquareRegion,
}

impl Mask {
    /// Builds a mask from an explicit grid, checking every invariant:
    /// binary cells, exactly one axis-aligned square of ones, and a ≥1-pixel
    /// zero border on all four sides.
    pub fn from_grid(grid: Array2<f32>) -> Result<Mask> {
        let (h, w) = grid.dim();
        let mut top = usize::MAX;
        let mut left = usize::MAX;
        let mut bottom = 0usize;
        let mut right = 0usize;
        let mut ones = 0usize;
        for ((i, j), &v) in grid.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Geometry(format!("non-binary cell {v} at ({i}, {j})")));
            }
            if v == 1.0 {
                ones += 1;
                top = top.min(i);
                left = left.min(j);
                bottom = bottom.max(i);
                right = right.max(j);
            }
        }
        if ones == 0 {
            return Err(Error::Geometry("mask has no ones".into()));
        }
        let side = bottom - top + 1;
        if right - left + 1 != side {
            return Err(Error::Geometry("ones region is not square".into()));
        }
        if ones != side * side {
            return Err(Error::Geometry("ones region is not a filled square".into()));
        }
        if top == 0 || left == 0 || bottom + 1 >= h || right + 1 >= w {
            return Err(Error::Geometry("ones square touches the image boundary".into()));
        }
        Ok(Mask { grid, region: SquareRegion { top, left, side } })
    }

    fn from_region(height: usize, width: usize, region: SquareRegion) -> Mask {
        let mut grid = Array2::<f32>::zeros((height, width));
        grid.slice_mut(ndarray::s![
            region.top..region.top + region.side,
            region.left..region.left + region.side
        ])
        .fill(1.0);
        Mask { grid, region }
    }

    pub fn grid(&self) -> &Array2<f32> {
        &self.grid
    }

    pub fn region(&self) -> SquareRegion {
        self.region
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    /// Area of the ones square as a fraction of the full grid.
    pub fn fraction(&self) -> f64 {
        (self.region.side * self.region.side) as f64 / (self.height() * self.width()) as f64
    }

    /// Grid converted to the requested element type.
    pub fn grid_as<F: Real>(&self) -> Array2<F> {
        self.grid.mapv(|v| F::from_f64(f64::from(v)))
    }
}

/// Integer sides that satisfy both the area-fraction bounds and the interior
/// border requirement.
pub fn feasible_sides(spec: &MaskSpec, height: usize, width: usize) -> Vec<usize> {
    let area = (height * width) as f64;
    let max_side = height.min(width).saturating_sub(2);
    (1..=max_side)
        .filter(|s| {
            let f = (s * s) as f64 / area;
            f >= spec.min_fraction && f <= spec.max_fraction
        })
        .collect()
}

/// Samples a mask: the area fraction is drawn uniformly from the spec range,
/// the side is the rounded square root clamped to the feasible set, and the
/// placement is uniform over interior positions.
pub fn sample_mask<R: Rng + ?Sized>(
    spec: &MaskSpec,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Mask> {
    spec.validate()?;
    let feasible = feasible_sides(spec, height, width);
    if feasible.is_empty() {
        return Err(Error::Geometry(format!(
            "no integer side with a 1-px border satisfies area fraction [{}, {}] on a {}x{} grid",
            spec.min_fraction, spec.max_fraction, height, width
        )));
    }
    let fraction = rng.gen_range(spec.min_fraction..=spec.max_fraction);
    let target = (fraction * (height * width) as f64).sqrt().round() as usize;
    // Nearest feasible side; ties resolve to the smaller square.
    let side = *feasible
        .iter()
        .min_by_key(|s| (s.abs_diff(target), **s))
        .expect("non-empty feasible set");
    let top = rng.gen_range(1..=height - side - 1);
    let left = rng.gen_range(1..=width - side - 1);
    Ok(Mask::from_region(height, width, SquareRegion { top, left, side }))
}

fn check_spatial<F: Real>(x: &Array4<F>, m: &Array2<F>, what: &str) -> Result<()> {
    let (_, _, h, w) = x.dim();
    if m.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: image is {h}x{w} but mask is {}x{}",
            m.dim().0,
            m.dim().1
        )));
    }
    Ok(())
}

fn apply_mask<F: Real>(x: &Array4<F>, m: &Array2<F>) -> Array4<F> {
    let mut out = x.clone();
    for mut img in out.outer_iter_mut() {
        for mut plane in img.outer_iter_mut() {
            plane.zip_mut_with(m, |o, mv| *o = *o * *mv);
        }
    }
    out
}

/// `(1 - M) ⊙ x`: keeps the surroundings, zeroes the square to be filled.
pub fn inside_masked<F: Real>(x: &Array4<F>, m: &Array2<F>) -> Result<Array4<F>> {
    check_spatial(x, m, "inside_masked")?;
    let inv = complement(m);
    Ok(apply_mask(x, &inv))
}

/// `M ⊙ x`: keeps the square interior, zeroes the surroundings.
pub fn outside_masked<F: Real>(x: &Array4<F>, m: &Array2<F>) -> Result<Array4<F>> {
    check_spatial(x, m, "outside_masked")?;
    Ok(apply_mask(x, m))
}

/// `1 - M` elementwise.
pub fn complement<F: Real>(m: &Array2<F>) -> Array2<F> {
    m.mapv(|v| F::one() - v)
}

/// Appends the binary region as one extra channel: (N,C,H,W) -> (N,C+1,H,W).
pub fn concat_mask_channel<F: Real>(masked: &Array4<F>, region: &Array2<F>) -> Result<Array4<F>> {
    check_spatial(masked, region, "concat_mask_channel")?;
    let (n, c, h, w) = masked.dim();
    let mut out = Array4::<F>::zeros((n, c + 1, h, w));
    out.slice_mut(ndarray::s![.., ..c, .., ..]).assign(masked);
    for ni in 0..n {
        out.slice_mut(ndarray::s![ni, c, .., ..]).assign(region);
    }
    Ok(out)
}

/// `known ⊙ input + (1 - known) ⊙ output`: copies trusted pixels from the
/// original input over the network output.
pub fn restore_known<F: Real>(
    output: &Array4<F>,
    input: &Array4<F>,
    known: &Array2<F>,
) -> Result<Array4<F>> {
    if output.dim() != input.dim() {
        return Err(Error::ShapeMismatch(format!(
            "restore_known: output {:?} vs input {:?}",
            output.dim(),
            input.dim()
        )));
    }
    check_spatial(output, known, "restore_known")?;
    let mut out = output.clone();
    for (mut img, src) in out.outer_iter_mut().zip(input.outer_iter()) {
        for (mut plane, sp) in img.outer_iter_mut().zip(src.outer_iter()) {
            ndarray::Zip::from(&mut plane).and(&sp).and(known).for_each(|o, &s, &k| {
                if k == F::one() {
                    *o = s;
                }
            });
        }
    }
    Ok(out)
}

/// One line of the sidecar emitted next to each mask PNG.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MaskRecord {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Writes the mask as a 1-bit grayscale PNG (1 = white).
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.grid.dim();
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Data(format!("mask png encode: {e}")))?;
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0u8; row_bytes * h];
    for i in 0..h {
        for j in 0..w {
            if mask.grid[(i, j)] == 1.0 {
                data[i * row_bytes + j / 8] |= 0x80 >> (j % 8);
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Data(format!("mask png encode: {e}")))?;
    Ok(())
}

/// Reads a mask PNG written by [`write_mask_png`] (1-bit or strict-binary
/// 8-bit grayscale) and revalidates all mask invariants.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("mask png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("mask png decode: {e}")))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Data(format!("mask png must be grayscale, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut grid = Array2::<f32>::zeros((h, w));
    match info.bit_depth {
        png::BitDepth::One => {
            let row_bytes = w.div_ceil(8);
            for i in 0..h {
                for j in 0..w {
                    let bit = buf[i * row_bytes + j / 8] >> (7 - j % 8) & 1;
                    grid[(i, j)] = f32::from(bit);
                }
            }
        }
        png::BitDepth::Eight => {
            for i in 0..h {
                for j in 0..w {
                    grid[(i, j)] = match buf[i * w + j] {
                        0 => 0.0,
                        255 | 1 => 1.0,
                        v => {
                            return Err(Error::Data(format!(
                                "mask png has non-binary value {v} at ({i}, {j})"
                            )))
                        }
                    };
                }
            }
        }
        d => return Err(Error::Data(format!("unsupported mask bit depth {d:?}"))),
    }
    Mask::from_grid(grid)
}

/// Emits `count` masks plus a `masks.jsonl` sidecar into `dir`.
pub fn emit_masks(
    dir: &Path,
    spec: &MaskSpec,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let sidecar = File::create(dir.join("masks.jsonl"))?;
    let mut sidecar = BufWriter::new(sidecar);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let mut stream = rng::stream(spec.seed, "make-masks", i as u64);
        let mask = sample_mask(spec, height, width, &mut stream)?;
        let path = dir.join(format!("mask_{i:04}.png"));
        write_mask_png(&mask, &path)?;
        let rec = MaskRecord {
            index: i,
            top: mask.region.top,
            left: mask.region.left,
            side: mask.region.side,
            height,
            width,
            seed: spec.seed,
        };
        serde_json::to_writer(&mut sidecar, &rec).map_err(|e| Error::Data(e.to_string()))?;
        sidecar.write_all(b"\n")?;
        paths.push(path);
    }
    sidecar.flush()?;
    Ok(paths)
}
