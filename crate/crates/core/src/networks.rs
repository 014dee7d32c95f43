//! The three networks: completion `C`, extrapolation `E`, discriminator `D`.
//!
//! C and E share one architecture: a strided encoder, a stack of residual
//! blocks with dilated convolutions in the middle (growing the receptive
//! field past the largest mask), a nearest-upsample decoder, and a tanh
//! output that pins values to [-1, 1]. Both take the masked image with the
//! binary mask appended as an extra channel. D is a single global
//! image-level classifier: strided convolutions down to a 1-channel map,
//! spatial average to one logit per image, sigmoid, and a clamp that keeps
//! probabilities strictly inside (0, 1) so the log losses stay finite.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, NodeId, Real, Tape};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;

/// Probabilities out of the discriminator are clamped to
/// `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Weight initialization scale (zero-mean Gaussian).
pub const INIT_STD: f64 = 0.02;

/// Generator architecture knobs shared by C and E.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub downsample_stages: usize,
    /// Dilation rate of each middle residual block.
    pub dilated_blocks: Vec<usize>,
    /// Image channels plus one mask channel.
    pub input_channels: usize,
    pub output_channels: usize,
    pub resolution: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            downsample_stages: 2,
            dilated_blocks: vec![2, 4, 8],
            input_channels: 4,
            output_channels: 3,
            resolution: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.input_channels < 2 || self.output_channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if self.dilated_blocks.is_empty() {
            return Err(Error::Config("at least one dilated middle block is required".into()));
        }
        let mut prev = 0;
        for &d in &self.dilated_blocks {
            if d < 1 || d < prev {
                return Err(Error::Config(format!(
                    "dilation rates must be >= 1 and nondecreasing, got {:?}",
                    self.dilated_blocks
                )));
            }
            prev = d;
        }
        let div = 1usize << self.downsample_stages;
        if self.resolution == 0 || self.resolution % div != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by 2^{} downsample stages",
                self.resolution, self.downsample_stages
            )));
        }
        Ok(())
    }

    /// Channel width of the middle blocks.
    pub fn middle_channels(&self) -> usize {
        self.base_channels << self.downsample_stages
    }

    /// Receptive field (in input pixels) of one middle-block output unit,
    /// computed statically from the encoder and dilated-block geometry.
    pub fn middle_receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        // stem conv 7x7 stride 1
        rf += 6 * jump;
        // encoder convs 3x3 stride 2
        for _ in 0..self.downsample_stages {
            rf += 2 * jump;
            jump *= 2;
        }
        // each block: two 3x3 convs at its dilation rate
        for &d in &self.dilated_blocks {
            rf += 2 * (2 * d) * jump;
        }
        rf
    }
}

/// Discriminator architecture knobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub downsample_stages: usize,
    pub input_channels: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 16,
            downsample_stages: 3,
            input_channels: 3,
            resolution: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.input_channels == 0 || self.downsample_stages == 0 {
            return Err(Error::Config("discriminator channels/stages must be positive".into()));
        }
        let div = 1usize << self.downsample_stages;
        if self.resolution == 0 || self.resolution % div != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by 2^{} discriminator stages",
                self.resolution, self.downsample_stages
            )));
        }
        Ok(())
    }
}

fn normal_tensor<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = Normal::new(0.0f64, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64(dist.sample(rng)))
}

fn add_conv<F: Real, R: Rng + ?Sized>(
    ps: &mut ParamSet<F>,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
) {
    ps.add(&format!("{name}.weight"), normal_tensor(rng, &[cout, cin, k, k], INIT_STD));
    if bias {
        ps.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
    }
}

fn add_norm<F: Real>(ps: &mut ParamSet<F>, name: &str, channels: usize) {
    ps.add(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), F::one()));
    ps.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
}

/// Initializes a generator parameter set for `cfg`.
pub fn build_generator<F: Real, R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<ParamSet<F>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let bc = cfg.base_channels;
    add_conv(&mut ps, rng, "stem", bc, cfg.input_channels, 7, false);
    add_norm(&mut ps, "stem.norm", bc);
    let mut ch = bc;
    for i in 0..cfg.downsample_stages {
        add_conv(&mut ps, rng, &format!("down{i}"), ch * 2, ch, 3, false);
        add_norm(&mut ps, &format!("down{i}.norm"), ch * 2);
        ch *= 2;
    }
    for (i, _) in cfg.dilated_blocks.iter().enumerate() {
        add_conv(&mut ps, rng, &format!("block{i}.conv1"), ch, ch, 3, false);
        add_norm(&mut ps, &format!("block{i}.norm1"), ch);
        add_conv(&mut ps, rng, &format!("block{i}.conv2"), ch, ch, 3, false);
        add_norm(&mut ps, &format!("block{i}.norm2"), ch);
    }
    for i in 0..cfg.downsample_stages {
        add_conv(&mut ps, rng, &format!("up{i}"), ch / 2, ch, 3, false);
        add_norm(&mut ps, &format!("up{i}.norm"), ch / 2);
        ch /= 2;
    }
    add_conv(&mut ps, rng, "head", cfg.output_channels, ch, 7, true);
    Ok(ps)
}

/// Initializes a discriminator parameter set for `cfg`.
pub fn build_discriminator<F: Real, R: Rng + ?Sized>(
    cfg: &DiscriminatorConfig,
    rng: &mut R,
) -> Result<ParamSet<F>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    add_conv(&mut ps, rng, "layer0", cfg.base_channels, cfg.input_channels, 4, true);
    let mut ch = cfg.base_channels;
    for i in 1..cfg.downsample_stages {
        add_conv(&mut ps, rng, &format!("layer{i}"), ch * 2, ch, 4, false);
        add_norm(&mut ps, &format!("layer{i}.norm"), ch * 2);
        ch *= 2;
    }
    add_conv(&mut ps, rng, "head", 1, ch, 3, true);
    Ok(ps)
}

fn conv_node<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    name: &str,
    input: NodeId,
    geom: ConvGeom,
) -> NodeId {
    let w = tape.param(ps, ps.key(&format!("{name}.weight")));
    let b = ps.try_key(&format!("{name}.bias")).map(|k| tape.param(ps, k));
    tape.conv2d(input, w, b, geom)
}

fn norm_node<F: Real>(tape: &mut Tape<F>, ps: &ParamSet<F>, name: &str, input: NodeId) -> NodeId {
    let g = tape.param(ps, ps.key(&format!("{name}.gamma")));
    let b = tape.param(ps, ps.key(&format!("{name}.beta")));
    tape.instance_norm(input, g, b)
}

/// Records a full generator forward pass on `tape`. Output has
/// `cfg.output_channels` channels, the input's spatial size, values in [-1,1].
pub fn generator_forward<F: Real>(
    tape: &mut Tape<F>,
    cfg: &GeneratorConfig,
    ps: &ParamSet<F>,
    input: NodeId,
) -> Result<NodeId> {
    let (_, c, h, w) = tape.value(input).dim();
    if c != cfg.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "generator expects {} input channels (image + mask), got {c}",
            cfg.input_channels
        )));
    }
    let div = 1usize << cfg.downsample_stages;
    if h % div != 0 || w % div != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input {h}x{w} not divisible by 2^{} downsampling",
            cfg.downsample_stages
        )));
    }
    let s1 = |pad: usize, dilation: usize| ConvGeom { stride: 1, pad, dilation };
    let mut hid = conv_node(tape, ps, "stem", input, s1(3, 1));
    hid = norm_node(tape, ps, "stem.norm", hid);
    hid = tape.relu(hid);
    for i in 0..cfg.downsample_stages {
        hid = conv_node(tape, ps, &format!("down{i}"), hid, ConvGeom { stride: 2, pad: 1, dilation: 1 });
        hid = norm_node(tape, ps, &format!("down{i}.norm"), hid);
        hid = tape.relu(hid);
    }
    for (i, &d) in cfg.dilated_blocks.iter().enumerate() {
        let mut r = conv_node(tape, ps, &format!("block{i}.conv1"), hid, s1(d, d));
        r = norm_node(tape, ps, &format!("block{i}.norm1"), r);
        r = tape.relu(r);
        r = conv_node(tape, ps, &format!("block{i}.conv2"), r, s1(d, d));
        r = norm_node(tape, ps, &format!("block{i}.norm2"), r);
        hid = tape.add(hid, r);
    }
    for i in 0..cfg.downsample_stages {
        hid = tape.upsample_nearest2(hid);
        hid = conv_node(tape, ps, &format!("up{i}"), hid, s1(1, 1));
        hid = norm_node(tape, ps, &format!("up{i}.norm"), hid);
        hid = tape.relu(hid);
    }
    let out = conv_node(tape, ps, "head", hid, s1(3, 1));
    Ok(tape.tanh(out))
}

/// Records a discriminator forward pass: one clamped probability per image,
/// shaped (N,1,1,1).
pub fn discriminator_forward<F: Real>(
    tape: &mut Tape<F>,
    cfg: &DiscriminatorConfig,
    ps: &ParamSet<F>,
    input: NodeId,
) -> Result<NodeId> {
    let (_, c, h, w) = tape.value(input).dim();
    if c != cfg.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects {} channels, got {c}",
            cfg.input_channels
        )));
    }
    if (h, w) != (cfg.resolution, cfg.resolution) {
        return Err(Error::ShapeMismatch(format!(
            "discriminator configured for {0}x{0} inputs, got {h}x{w}",
            cfg.resolution
        )));
    }
    let down = ConvGeom { stride: 2, pad: 1, dilation: 1 };
    let mut hid = conv_node(tape, ps, "layer0", input, down);
    hid = tape.leaky_relu(hid, F::from_f64(0.2));
    for i in 1..cfg.downsample_stages {
        hid = conv_node(tape, ps, &format!("layer{i}"), hid, down);
        hid = norm_node(tape, ps, &format!("layer{i}.norm"), hid);
        hid = tape.leaky_relu(hid, F::from_f64(0.2));
    }
    let logit_map = conv_node(tape, ps, "head", hid, ConvGeom { stride: 1, pad: 1, dilation: 1 });
    let logit = tape.global_avg_pool(logit_map);
    let prob = tape.sigmoid(logit);
    Ok(tape.clamp(prob, F::from_f64(PROB_EPS), F::from_f64(1.0 - PROB_EPS)))
}

/// Parameters and configs for C, E and D together.
#[derive(Debug, Clone)]
pub struct ModelBundle<F: Real> {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub c: ParamSet<F>,
    pub e: ParamSet<F>,
    pub d: ParamSet<F>,
}

impl<F: Real> ModelBundle<F> {
    /// Builds and initializes all three networks from one seed.
    pub fn build(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let c = build_generator(&gen_cfg, &mut rng::stream(seed, "init-c", 0))?;
        let e = build_generator(&gen_cfg, &mut rng::stream(seed, "init-e", 0))?;
        let d = build_discriminator(&disc_cfg, &mut rng::stream(seed, "init-d", 0))?;
        Ok(ModelBundle { gen_cfg, disc_cfg, c, e, d })
    }

    /// Completion network forward on a (masked image + mask channel) batch.
    pub fn complete(&self, input: &Array4<F>) -> Result<Array4<F>> {
        run_generator(&self.gen_cfg, &self.c, input)
    }

    /// Extrapolation network forward on a (masked image + mask channel) batch.
    pub fn extrapolate(&self, input: &Array4<F>) -> Result<Array4<F>> {
        run_generator(&self.gen_cfg, &self.e, input)
    }

    /// Discriminator probability per image.
    pub fn discriminate(&self, x: &Array4<F>) -> Result<Array1<F>> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let p = discriminator_forward(&mut tape, &self.disc_cfg, &self.d, input)?;
        Ok(Array1::from_iter(tape.value(p).iter().copied()))
    }
}

fn run_generator<F: Real>(
    cfg: &GeneratorConfig,
    ps: &ParamSet<F>,
    input: &Array4<F>,
) -> Result<Array4<F>> {
    let mut tape = Tape::new();
    let node = tape.leaf(input.clone());
    let out = generator_forward(&mut tape, cfg, ps, node)?;
    Ok(tape.value(out).clone())
}

/// Anything that maps a network input to an image on a tape. Real generators
/// implement it; tests substitute oracles (identity, constant output).
pub trait GeneratorModel<F: Real> {
    fn run(&self, tape: &mut Tape<F>, input: NodeId) -> Result<NodeId>;
}

/// A concrete generator: config plus parameters.
pub struct GenNet<'a, F: Real> {
    pub cfg: &'a GeneratorConfig,
    pub params: &'a ParamSet<F>,
}

impl<F: Real> GeneratorModel<F> for GenNet<'_, F> {
    fn run(&self, tape: &mut Tape<F>, input: NodeId) -> Result<NodeId> {
        generator_forward(tape, self.cfg, self.params, input)
    }
}

/// A concrete discriminator: config plus parameters.
pub struct DiscNet<'a, F: Real> {
    pub cfg: &'a DiscriminatorConfig,
    pub params: &'a ParamSet<F>,
}

impl<F: Real> DiscNet<'_, F> {
    pub fn run(&self, tape: &mut Tape<F>, input: NodeId) -> Result<NodeId> {
        discriminator_forward(tape, self.cfg, self.params, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_gen_cfg() -> GeneratorConfig {
        GeneratorConfig { base_channels: 4, ..GeneratorConfig::default() }
    }

    #[test]
    fn generator_shape_contract_at_64() {
        let cfg = small_gen_cfg();
        let ps = build_generator::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Array4::<f32>::from_shape_simple_fn((1, 4, 64, 64), || 0.3);
        let y = run_generator(&cfg, &ps, &x).unwrap();
        assert_eq!(y.dim(), (1, 3, 64, 64));
    }

    #[test]
    fn generator_output_is_bounded() {
        let cfg = small_gen_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = build_generator::<f32, _>(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((2, 4, 64, 64), || rng.gen_range(-1.0f32..1.0));
        let y = run_generator(&cfg, &ps, &x).unwrap();
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small_gen_cfg();
        let a = build_generator::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = build_generator::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = build_generator::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let cfg = GeneratorConfig { resolution: 66, ..small_gen_cfg() };
        let err = build_generator::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn nonmonotone_dilations_are_rejected() {
        let cfg = GeneratorConfig { dilated_blocks: vec![4, 2], ..small_gen_cfg() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let cfg = small_gen_cfg();
        let ps = build_generator::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Array4::<f32>::zeros((1, 3, 64, 64)); // missing the mask channel
        let err = run_generator(&cfg, &ps, &x).unwrap_err();
        assert_eq!(err.category(), "shape-mismatch");
    }

    #[test]
    fn generator_forward_is_deterministic() {
        let cfg = small_gen_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = build_generator::<f32, _>(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((1, 4, 64, 64), || rng.gen_range(-1.0f32..1.0));
        let y1 = run_generator(&cfg, &ps, &x).unwrap();
        let y2 = run_generator(&cfg, &ps, &x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn discriminator_probabilities_are_open_unit() {
        let disc_cfg = DiscriminatorConfig { base_channels: 4, ..DiscriminatorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = build_discriminator::<f32, _>(&disc_cfg, &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((5, 3, 64, 64), || rng.gen_range(-1.0f32..1.0));
        let bundle = ModelBundle {
            gen_cfg: small_gen_cfg(),
            disc_cfg: disc_cfg.clone(),
            c: ParamSet::new(),
            e: ParamSet::new(),
            d: ps,
        };
        let p = bundle.discriminate(&x).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let p2 = bundle.discriminate(&x).unwrap();
        assert_eq!(p, p2);

        let wrong = Array4::<f32>::zeros((1, 3, 32, 32));
        assert_eq!(bundle.discriminate(&wrong).unwrap_err().category(), "shape-mismatch");
    }

    #[test]
    fn receptive_field_covers_default_masks() {
        let cfg = GeneratorConfig::default();
        // stem 7 (+6), two stride-2 convs (+2, +4), blocks at 2/4/8:
        // +16+16, +32+32, +64+64 -> 237.
        assert_eq!(cfg.middle_receptive_field(), 237);
        // Largest feasible square side at 64x64 under a 0.35 cap.
        let spec = crate::masking::MaskSpec::default();
        let max_side = crate::masking::feasible_sides(&spec, 64, 64).into_iter().max().unwrap();
        assert!(cfg.middle_receptive_field() > max_side);
    }
}
