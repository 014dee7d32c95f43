//! Shared helpers for integration tests: miniature network configs, seeded
//! random tensors, and independent scalar-loop oracles for every loss.

#![allow(dead_code)]

use cyclefill_core::autodiff::{NodeId, Real, Tape};
use cyclefill_core::networks::{DiscriminatorConfig, GeneratorConfig, GeneratorModel};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand4<F: Real>(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<F> {
    Array4::from_shape_simple_fn(dim, || F::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Arbitrary binary matrix (not necessarily a square region).
pub fn rand_region<F: Real>(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((h, w), || {
        if rng.gen_bool(0.5) {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Miniature generator: 8x8, one downsample stage, one dilated block.
pub fn mini_gen_cfg() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 3,
        downsample_stages: 1,
        dilated_blocks: vec![2],
        input_channels: 4,
        output_channels: 3,
        resolution: 8,
    }
}

/// Miniature discriminator for 8x8 inputs.
pub fn mini_disc_cfg() -> DiscriminatorConfig {
    DiscriminatorConfig {
        base_channels: 3,
        downsample_stages: 2,
        input_channels: 3,
        resolution: 8,
    }
}

/// Scalar-loop oracle for the masked mean-L1 losses (Eqs. 3 and 4 shape):
/// mean |out - target| over region=1 cells, all channels and batch entries.
pub fn oracle_masked_l1<F: Real>(out: &Array4<F>, target: &Array4<F>, region: &Array2<F>) -> f64 {
    let (n, c, h, w) = out.dim();
    let mut ones = 0usize;
    for i in 0..h {
        for j in 0..w {
            if region[(i, j)].as_f64() != 0.0 {
                ones += 1;
            }
        }
    }
    if ones == 0 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if region[(i, j)].as_f64() != 0.0 {
                        acc += (out[(ni, ci, i, j)].as_f64() - target[(ni, ci, i, j)].as_f64())
                            .abs();
                    }
                }
            }
        }
    }
    acc / (ones * n * c) as f64
}

/// Scalar-loop oracle for the discriminator loss (Eq. 2 shape, descent sign):
/// `-[mean ln p_real + mean ln(1 - p_fake)]`.
pub fn oracle_adv_disc(p_real: &[f64], p_fake: &[f64]) -> f64 {
    let mut real = 0.0;
    for &p in p_real {
        real += p.ln();
    }
    let mut fake = 0.0;
    for &p in p_fake {
        fake += (1.0 - p).ln();
    }
    -(real / p_real.len() as f64 + fake / p_fake.len() as f64)
}

/// Scalar-loop oracle for the non-saturating generator loss: `-mean ln p`.
pub fn oracle_adv_gen(p_fake: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &p in p_fake {
        acc += p.ln();
    }
    -acc / p_fake.len() as f64
}

/// Test stand-in generator that returns a fixed image regardless of input.
pub struct IdentityOracle<F: Real> {
    pub x: Array4<F>,
}

impl<F: Real> GeneratorModel<F> for IdentityOracle<F> {
    fn run(&self, tape: &mut Tape<F>, _input: NodeId) -> cyclefill_core::Result<NodeId> {
        Ok(tape.leaf(self.x.clone()))
    }
}
