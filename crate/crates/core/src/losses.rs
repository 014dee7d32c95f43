//! Loss terms and the two cycle objectives.
//!
//! Three ingredients, each separately inspectable:
//!
//! * adversarial — binary cross-entropy against the global discriminator.
//!   The discriminator descends `-mean[log D(real) + log(1 - D(fake))]`;
//!   generators descend the non-saturating `-mean log D(fake)`.
//! * contextual — mean absolute difference over the synthesized region.
//! * reconstruction — the same masked L1 between the cycle output and the
//!   original image, over the region the *second* network had to rebuild.
//!
//! A cycle (fill with one generator, rebuild the rest with the other) yields
//! `adv + alpha * ctx + beta * rec`. The forward cycle fills the mask with C
//! and rebuilds with E; the backward cycle is the same computation with the
//! generators swapped and the mask complemented, which keeps the two
//! directions exactly symmetric by construction.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Real, Tape};
use crate::error::{Error, Result};
use crate::masking;
use crate::networks::{DiscNet, GeneratorModel};

/// Relative weights of the contextual and reconstruction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 10.0, beta: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite()
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Every loss term of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_c: f64,
    pub ctx_c: f64,
    pub rec_forward: f64,
    pub adv_e: f64,
    pub ctx_e: f64,
    pub rec_backward: f64,
    pub disc_loss: f64,
    pub cyc_forward_total: f64,
    pub cyc_backward_total: f64,
    pub grand_total: f64,
}

impl LossReport {
    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("adv_c", self.adv_c),
            ("ctx_c", self.ctx_c),
            ("rec_forward", self.rec_forward),
            ("adv_e", self.adv_e),
            ("ctx_e", self.ctx_e),
            ("rec_backward", self.rec_backward),
            ("disc_loss", self.disc_loss),
            ("cyc_forward_total", self.cyc_forward_total),
            ("cyc_backward_total", self.cyc_backward_total),
            ("grand_total", self.grand_total),
        ]
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// `mean log p` over a (N,1,1,1) probability node.
fn mean_log<F: Real>(tape: &mut Tape<F>, p: NodeId) -> NodeId {
    let n = tape.value(p).len();
    let l = tape.ln(p);
    let s = tape.sum_all(l);
    tape.scale(s, F::from_f64(1.0 / n as f64))
}

/// Discriminator descent loss: `-[mean log p_real + mean log(1 - p_fake)]`,
/// the fake mean pooled over every fake batch supplied.
pub fn adv_disc_node<F: Real>(tape: &mut Tape<F>, p_real: NodeId, p_fakes: &[NodeId]) -> NodeId {
    assert!(!p_fakes.is_empty(), "at least one fake batch");
    let real_term = mean_log(tape, p_real);
    let total_fakes: usize = p_fakes.iter().map(|&p| tape.value(p).len()).sum();
    let mut fake_sum: Option<NodeId> = None;
    for &p in p_fakes {
        let one_minus = tape.rsub_scalar(p, F::one());
        let l = tape.ln(one_minus);
        let s = tape.sum_all(l);
        fake_sum = Some(match fake_sum {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let fake_term = tape.scale(fake_sum.expect("nonempty"), F::from_f64(1.0 / total_fakes as f64));
    let sum = tape.add(real_term, fake_term);
    tape.scale(sum, F::from_f64(-1.0))
}

/// Non-saturating generator loss: `-mean log p_fake`.
pub fn adv_gen_node<F: Real>(tape: &mut Tape<F>, p_fake: NodeId) -> NodeId {
    let m = mean_log(tape, p_fake);
    tape.scale(m, F::from_f64(-1.0))
}

/// Mean absolute difference over `region`, all channels and batch entries.
/// An empty region yields an exact 0 constant.
pub fn masked_l1_node<F: Real>(
    tape: &mut Tape<F>,
    output: NodeId,
    target: NodeId,
    region: &Array2<F>,
) -> NodeId {
    let ones = region.iter().filter(|&&v| v != F::zero()).count();
    if ones == 0 {
        return tape.scalar_leaf(F::zero());
    }
    let (n, c, _, _) = tape.value(output).dim();
    let diff = tape.sub(output, target);
    let adiff = tape.abs(diff);
    let masked = tape.mul_mask2(adiff, region);
    let s = tape.sum_all(masked);
    tape.scale(s, F::from_f64(1.0 / (ones * n * c) as f64))
}

fn check_same_shape<F: Real>(a: &Array4<F>, b: &Array4<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn finite<F: Real>(v: F, term: &str) -> Result<f64> {
    let x = v.as_f64();
    if !x.is_finite() {
        return Err(Error::NonFinite(term.to_string()));
    }
    Ok(x)
}

/// Discriminator loss on concrete batches. `fake` is detached by
/// construction: it enters as a value, not a graph node.
pub fn adversarial_loss_disc<F: Real>(
    disc: &DiscNet<F>,
    real: &Array4<F>,
    fake: &Array4<F>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.leaf(real.clone());
    let f = tape.leaf(fake.clone());
    let pr = disc.run(&mut tape, r)?;
    let pf = disc.run(&mut tape, f)?;
    let loss = adv_disc_node(&mut tape, pr, &[pf]);
    finite(tape.scalar(loss), "adversarial_loss_disc")
}

/// Generator-side adversarial loss on a concrete batch.
pub fn adversarial_loss_gen<F: Real>(disc: &DiscNet<F>, fake: &Array4<F>) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.leaf(fake.clone());
    let pf = disc.run(&mut tape, f)?;
    let loss = adv_gen_node(&mut tape, pf);
    finite(tape.scalar(loss), "adversarial_loss_gen")
}

/// Mean L1 between `output` and `target` over `region` (Eq. 3 shape).
pub fn contextual_loss<F: Real>(
    output: &Array4<F>,
    target: &Array4<F>,
    region: &Array2<F>,
) -> Result<f64> {
    check_same_shape(output, target, "contextual_loss")?;
    let (_, _, h, w) = output.dim();
    if region.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "contextual_loss: region {:?} vs image {h}x{w}",
            region.dim()
        )));
    }
    let mut tape = Tape::new();
    let o = tape.leaf(output.clone());
    let t = tape.leaf(target.clone());
    let l = masked_l1_node(&mut tape, o, t, region);
    finite(tape.scalar(l), "contextual_loss")
}

/// Cycle reconstruction loss (Eq. 4 shape): identical kernel to
/// [`contextual_loss`], applied to the cycle output against the original.
pub fn reconstruction_loss<F: Real>(
    cycle_out: &Array4<F>,
    x: &Array4<F>,
    region: &Array2<F>,
) -> Result<f64> {
    contextual_loss(cycle_out, x, region)
}

/// Options controlling which terms a cycle contributes.
#[derive(Debug, Clone, Copy)]
pub struct CycleOptions {
    /// Include the reconstruction term (the cycle-consistency ablation flag).
    pub use_reconstruction: bool,
    /// Also take an adversarial loss on the composited cycle output (the
    /// second generator's product).
    pub secondary_adversarial: bool,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions { use_reconstruction: true, secondary_adversarial: false }
    }
}

/// Tape nodes produced by one cycle's pipeline.
pub struct CycleNodes {
    /// Raw output of the filling generator.
    pub fill_raw: NodeId,
    /// Filling output with known pixels composited back; what D sees.
    pub fill_comp: NodeId,
    /// Raw output of the rebuilding generator (the cycle output).
    pub cycle_raw: NodeId,
    /// Composited cycle output; present when `secondary_adversarial` is set.
    pub cycle_comp: Option<NodeId>,
    /// Contextual term over the filled region.
    pub ctx: NodeId,
    /// Reconstruction term over the rebuilt region, if enabled.
    pub rec: Option<NodeId>,
}

/// Records one cycle's generator pipeline and its ctx/rec terms on `tape`.
///
/// `region` marks the pixels the `fill` generator must synthesize; `rebuild`
/// receives the composited fill re-masked to `region` plus the complement
/// channel and must restore the rest.
pub fn cycle_pipeline<F: Real>(
    tape: &mut Tape<F>,
    fill: &dyn GeneratorModel<F>,
    rebuild: &dyn GeneratorModel<F>,
    x: &Array4<F>,
    region: &Array2<F>,
    opts: CycleOptions,
) -> Result<CycleNodes> {
    let (n, _, h, w) = x.dim();
    if region.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "cycle: region {:?} vs image {h}x{w}",
            region.dim()
        )));
    }
    let kept = masking::complement(region);
    let x_leaf = tape.leaf(x.clone());

    // Fill pass: (1-R) ⊙ x, concatenated with R.
    let inp_img = tape.mul_mask2(x_leaf, &kept);
    let region_ch = mask_channel(tape, region, n);
    let inp = tape.concat_ch(inp_img, region_ch);
    let fill_raw = fill.run(tape, inp)?;

    // Composite the known pixels back for discrimination.
    let fill_on_region = tape.mul_mask2(fill_raw, region);
    let known = tape.mul_mask2(x_leaf, &kept);
    let fill_comp = tape.add(fill_on_region, known);

    let ctx = masked_l1_node(tape, fill_raw, x_leaf, region);

    // Rebuild pass: R ⊙ (composited fill), concatenated with 1-R.
    let back_img = tape.mul_mask2(fill_comp, region);
    let kept_ch = mask_channel(tape, &kept, n);
    let back_inp = tape.concat_ch(back_img, kept_ch);
    let cycle_raw = rebuild.run(tape, back_inp)?;

    let rec = opts
        .use_reconstruction
        .then(|| masked_l1_node(tape, cycle_raw, x_leaf, &kept));

    let cycle_comp = opts.secondary_adversarial.then(|| {
        let cyc_on_kept = tape.mul_mask2(cycle_raw, &kept);
        let known_region = tape.mul_mask2(x_leaf, region);
        tape.add(cyc_on_kept, known_region)
    });

    Ok(CycleNodes { fill_raw, fill_comp, cycle_raw, cycle_comp, ctx, rec })
}

fn mask_channel<F: Real>(tape: &mut Tape<F>, m: &Array2<F>, n: usize) -> NodeId {
    let (h, w) = m.dim();
    let mut arr = Array4::<F>::zeros((n, 1, h, w));
    for ni in 0..n {
        arr.slice_mut(ndarray::s![ni, 0, .., ..]).assign(m);
    }
    tape.leaf(arr)
}

/// Scalar values of one cycle loss, with the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleLossValues {
    pub adv: f64,
    pub ctx: f64,
    pub rec: f64,
    pub total: f64,
}

/// Loss nodes of one full cycle including the adversarial term(s).
pub struct CycleLossNodes {
    pub nodes: CycleNodes,
    pub adv: NodeId,
    pub total: NodeId,
}

/// Builds one cycle's complete loss on `tape`:
/// `adv + alpha * ctx + beta * rec`.
pub fn cycle_loss_nodes<F: Real>(
    tape: &mut Tape<F>,
    fill: &dyn GeneratorModel<F>,
    rebuild: &dyn GeneratorModel<F>,
    disc: &DiscNet<F>,
    x: &Array4<F>,
    region: &Array2<F>,
    weights: &LossWeights,
    opts: CycleOptions,
) -> Result<CycleLossNodes> {
    weights.validate()?;
    let nodes = cycle_pipeline(tape, fill, rebuild, x, region, opts)?;
    let p_fill = disc.run(tape, nodes.fill_comp)?;
    let mut adv = adv_gen_node(tape, p_fill);
    if let Some(comp) = nodes.cycle_comp {
        let p_cyc = disc.run(tape, comp)?;
        let extra = adv_gen_node(tape, p_cyc);
        adv = tape.add(adv, extra);
    }
    let wctx = tape.scale(nodes.ctx, F::from_f64(weights.alpha));
    let mut total = tape.add(adv, wctx);
    if let Some(rec) = nodes.rec {
        let wrec = tape.scale(rec, F::from_f64(weights.beta));
        total = tape.add(total, wrec);
    }
    Ok(CycleLossNodes { nodes, adv, total })
}

impl CycleLossNodes {
    /// Reported term values. The total is re-summed in f64 from the terms so
    /// the Eq. 5/6 weighted-sum identity holds to reporting precision; the
    /// tape's own total node is what gradients flow through.
    pub fn values<F: Real>(&self, tape: &Tape<F>, weights: &LossWeights) -> Result<CycleLossValues> {
        let adv = finite(tape.scalar(self.adv), "adversarial term")?;
        let ctx = finite(tape.scalar(self.nodes.ctx), "contextual term")?;
        let rec = match self.nodes.rec {
            Some(r) => finite(tape.scalar(r), "reconstruction term")?,
            None => 0.0,
        };
        Ok(CycleLossValues { adv, ctx, rec, total: adv + weights.alpha * ctx + weights.beta * rec })
    }
}

/// Forward cycle (Eq. 5 shape): C fills the mask, E rebuilds the complement.
pub fn forward_cycle_loss<F: Real>(
    c: &dyn GeneratorModel<F>,
    e: &dyn GeneratorModel<F>,
    disc: &DiscNet<F>,
    x: &Array4<F>,
    mask: &Array2<F>,
    weights: &LossWeights,
    opts: CycleOptions,
) -> Result<CycleLossValues> {
    let mut tape = Tape::new();
    let nodes = cycle_loss_nodes(&mut tape, c, e, disc, x, mask, weights, opts)?;
    nodes.values(&tape, weights)
}

/// Backward cycle (Eq. 6 shape): the forward cycle with the generators
/// swapped and the mask complemented.
pub fn backward_cycle_loss<F: Real>(
    c: &dyn GeneratorModel<F>,
    e: &dyn GeneratorModel<F>,
    disc: &DiscNet<F>,
    x: &Array4<F>,
    mask: &Array2<F>,
    weights: &LossWeights,
    opts: CycleOptions,
) -> Result<CycleLossValues> {
    forward_cycle_loss(e, c, disc, x, &masking::complement(mask), weights, opts)
}

/// Combined objective (Eq. 7 shape): the two cycle totals summed.
pub fn total_objective(forward: f64, backward: f64) -> f64 {
    forward + backward
}
