//! U-shaped restoration network of mask- and motion-aware blocks.
//!
//! Layout: a 3×3 in-projection, four encoder stages separated by stride-2
//! 2×2 convs, a middle stage, four decoder stages entered through a 1×1 conv
//! plus pixel shuffle with additive skips, and a 3×3 out-projection plus the
//! input image.
//!
//! Stages listed in [`NetworkConfig::predictor_stages`] run a mask predictor
//! and a motion analyzer on their input. Every other stage reuses the most
//! recent upstream mask (max-pooled or replicated) and displacements
//! (resampled and rescaled); before any producer, the mask is all ones and
//! the displacements are zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv_macs, ConvSpec};
use crate::deform::{deform_dwconv_with, deform_macs, record_deform, DeformDWSpec, DeformSampler};
use crate::error::{Error, Result};
use crate::ledger::FlopLedger;
use crate::mask::{
    gumbel_mask, predict_probs, predictor_macs, resample_mask, threshold_mask, BlurMask, MaskPredictorParams, DEFAULT_EPSILON,
    DEFAULT_TAU,
};
use crate::motion::{
    build_deform_offsets, interpolate, predict_endpoints, rescale_displacements, DisplacementPair, OffsetField, TrajectoryMode,
    DEFORM_STEPS,
};
use crate::ops::{layer_norm, resample_down, resample_up, simple_gate, simplified_channel_attention};
use crate::pruned::{record_pruned, support_sizes, MaskAwareConv};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Spatial dims must be divisible by this (four 2× downsamplings).
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Enc1,
    Enc2,
    Enc3,
    Enc4,
    Middle,
    Dec4,
    Dec3,
    Dec2,
    Dec1,
}

impl StageId {
    /// Evaluation order.
    pub const ALL: [StageId; 9] = [
        StageId::Enc1,
        StageId::Enc2,
        StageId::Enc3,
        StageId::Enc4,
        StageId::Middle,
        StageId::Dec4,
        StageId::Dec3,
        StageId::Dec2,
        StageId::Dec1,
    ];
    pub const ENCODERS: [StageId; 4] = [StageId::Enc1, StageId::Enc2, StageId::Enc3, StageId::Enc4];
    pub const DECODERS: [StageId; 4] = [StageId::Dec4, StageId::Dec3, StageId::Dec2, StageId::Dec1];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Enc1 => "enc1",
            StageId::Enc2 => "enc2",
            StageId::Enc3 => "enc3",
            StageId::Enc4 => "enc4",
            StageId::Middle => "middle",
            StageId::Dec4 => "dec4",
            StageId::Dec3 => "dec3",
            StageId::Dec2 => "dec2",
            StageId::Dec1 => "dec1",
        }
    }

    /// Number of 2× downsamplings above this stage.
    pub fn level(self) -> usize {
        match self {
            StageId::Enc1 | StageId::Dec1 => 0,
            StageId::Enc2 | StageId::Dec2 => 1,
            StageId::Enc3 | StageId::Dec3 => 2,
            StageId::Enc4 | StageId::Dec4 => 3,
            StageId::Middle => 4,
        }
    }

    pub fn width(self, base: usize) -> usize {
        base << self.level()
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every conv at every pixel; masks are computed but not applied.
    Dense,
    /// Mask-aware convs evaluated densely and blended by the mask.
    Masked,
    /// Mask-aware convs evaluated only at masked pixels.
    #[default]
    Pruned,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Masked => "masked",
            Mode::Pruned => "pruned",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "masked" => Ok(Mode::Masked),
            "pruned" => Ok(Mode::Pruned),
            _ => Err(Error::Config(format!("unknown mode `{s}` (dense, masked, pruned)"))),
        }
    }
}

/// How a producing stage turns blur probabilities into a hard mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampling {
    /// `p_blur > epsilon`.
    #[default]
    Threshold,
    /// Hard Gumbel-softmax sample at `gumbel_tau`, seeded per stage.
    Gumbel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_width: usize,
    pub encoder_blocks: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub decoder_blocks: Vec<usize>,
    pub predictor_stages: BTreeSet<StageId>,
    pub epsilon: f32,
    pub gumbel_tau: f32,
    pub mask_sampling: MaskSampling,
    /// Trajectory steps for the deformable conv; must be 9.
    pub n1: usize,
    /// Trajectory steps for the reblur synthesis.
    pub n2: usize,
    pub trajectory_mode: TrajectoryMode,
    /// Which block convs are mask-aware: 1 = expand + depthwise, 2 = the
    /// first-half 1×1 projection, 3 = the second-half 1×1 expansion.
    pub mask_conv_positions: BTreeSet<u8>,
    pub mode: Mode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            encoder_blocks: vec![1, 1, 1, 28],
            bottleneck_blocks: 1,
            decoder_blocks: vec![1, 1, 1, 1],
            predictor_stages: BTreeSet::from([StageId::Enc4]),
            epsilon: DEFAULT_EPSILON,
            gumbel_tau: DEFAULT_TAU,
            mask_sampling: MaskSampling::Threshold,
            n1: DEFORM_STEPS,
            n2: 9,
            trajectory_mode: TrajectoryMode::Quadratic,
            mask_conv_positions: BTreeSet::from([1]),
            mode: Mode::Pruned,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return bad(format!("base_width must be even and at least 2, got {}", self.base_width));
        }
        if self.encoder_blocks.len() != 4 || self.decoder_blocks.len() != 4 {
            return bad(format!(
                "need 4 encoder and 4 decoder stages, got {} and {}",
                self.encoder_blocks.len(),
                self.decoder_blocks.len()
            ));
        }
        if self.n1 != DEFORM_STEPS {
            return bad(format!("n1 must be {DEFORM_STEPS} (one step per deformable tap), got {}", self.n1));
        }
        if self.n2 < 2 {
            return bad(format!("n2 must be at least 2, got {}", self.n2));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.gumbel_tau > 0.0) {
            return bad(format!("gumbel_tau must be positive, got {}", self.gumbel_tau));
        }
        if let Some(p) = self.mask_conv_positions.iter().find(|p| !(1..=3).contains(*p)) {
            return bad(format!("mask_conv_positions must be within 1..=3, got {p}"));
        }
        Ok(())
    }

    pub fn blocks(&self, stage: StageId) -> usize {
        match stage {
            StageId::Middle => self.bottleneck_blocks,
            s if s.index() < 4 => self.encoder_blocks[s.index()],
            s => self.decoder_blocks[8 - s.index()],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::shape(format!("image {h}×{w} must be a non-empty multiple of {SIZE_MULTIPLE} in both dims")));
        }
        Ok(())
    }
}

/// Round `h` and `w` up to the next multiple of [`SIZE_MULTIPLE`].
pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    let up = |v: usize| v.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    (up(h), up(w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Ones,
    Zeros,
    /// Uniform in `±gain/√fan_in`.
    Uniform { fan_in: usize, gain: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Residual branches start small so deep stacks stay well-scaled.
const RESIDUAL_GAIN: f32 = 0.2;

fn push_conv(out: &mut Vec<WeightSpec>, name: &str, dims: [usize; 4], bias: bool, gain: f32) {
    let fan_in = dims[1] * dims[2] * dims[3];
    out.push(WeightSpec { name: format!("{name}.weight"), dims: dims.to_vec(), init: Init::Uniform { fan_in, gain } });
    if bias {
        out.push(WeightSpec { name: format!("{name}.bias"), dims: vec![dims[0]], init: Init::Uniform { fan_in, gain } });
    }
}

fn push_norm(out: &mut Vec<WeightSpec>, name: &str, c: usize) {
    out.push(WeightSpec { name: format!("{name}.weight"), dims: vec![c], init: Init::Ones });
    out.push(WeightSpec { name: format!("{name}.bias"), dims: vec![c], init: Init::Zeros });
}

fn push_block(out: &mut Vec<WeightSpec>, p: &str, c: usize) {
    push_norm(out, &format!("{p}.ln1"), c);
    push_conv(out, &format!("{p}.expand"), [2 * c, c, 1, 1], true, 1.0);
    push_conv(out, &format!("{p}.dw"), [2 * c, 1, 3, 3], true, 1.0);
    push_conv(out, &format!("{p}.sca"), [c, c, 1, 1], true, 1.0);
    push_conv(out, &format!("{p}.proj"), [c, c, 1, 1], true, RESIDUAL_GAIN);
    push_norm(out, &format!("{p}.ln2"), c);
    push_conv(out, &format!("{p}.mid"), [2 * c, c, 1, 1], true, 1.0);
    push_conv(out, &format!("{p}.deform"), [2 * c, 1, 3, 3], true, 1.0);
    push_conv(out, &format!("{p}.out"), [c, c, 1, 1], true, RESIDUAL_GAIN);
}

fn push_stage_heads(out: &mut Vec<WeightSpec>, s: StageId, c: usize) {
    push_norm(out, &format!("{s}.predictor.ln"), c);
    push_conv(out, &format!("{s}.predictor.fc1"), [c, c, 1, 1], true, 1.0);
    push_conv(out, &format!("{s}.predictor.fc2"), [c / 2, 2 * c, 1, 1], true, 1.0);
    push_conv(out, &format!("{s}.predictor.fc3"), [2, c / 2, 1, 1], true, 1.0);
    push_conv(out, &format!("{s}.analyzer"), [4, c, 3, 3], true, 1.0);
}

/// Every tensor the configuration needs, in evaluation order.
pub fn weight_manifest(cfg: &NetworkConfig) -> Vec<WeightSpec> {
    let base = cfg.base_width;
    let mut out = Vec::new();
    push_conv(&mut out, "intro", [base, 3, 3, 3], true, 1.0);
    for s in StageId::ALL {
        let c = s.width(base);
        if s.index() > 4 {
            let i = s.level() + 1;
            out.push(WeightSpec {
                name: format!("up{i}.weight"),
                dims: vec![4 * c, 2 * c, 1, 1],
                init: Init::Uniform { fan_in: 2 * c, gain: 1.0 },
            });
        }
        if cfg.predictor_stages.contains(&s) {
            push_stage_heads(&mut out, s, c);
        }
        for b in 0..cfg.blocks(s) {
            push_block(&mut out, &format!("{s}.block{b}"), c);
        }
        if s.index() < 4 {
            push_conv(&mut out, &format!("down{}", s.level() + 1), [2 * c, c, 2, 2], true, 1.0);
        }
    }
    push_conv(&mut out, "ending", [3, base, 3, 3], true, 1.0);
    out
}

/// Seeded fan-in uniform initialization of every manifest tensor.
pub fn init_weights(cfg: &NetworkConfig, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for spec in weight_manifest(cfg) {
        let t = match spec.init {
            Init::Ones => Tensor::full(spec.dims, 1.0),
            Init::Zeros => Tensor::zeros(spec.dims),
            Init::Uniform { fan_in, gain } => {
                let bound = gain / (fan_in as f32).sqrt();
                Tensor::from_fn(spec.dims, |_| rng.gen_range(-bound..=bound))
            }
        };
        store.insert(spec.name, t);
    }
    store
}

fn load_conv(store: &WeightStore, name: &str, spec: ConvShape) -> Result<ConvSpec> {
    let (cin, cout, k, pad, stride, groups, bias) = spec;
    let weight = store.require_dims(&format!("{name}.weight"), &[cout, cin / groups, k, k])?.clone();
    let bias = if bias { Some(store.require_dims(&format!("{name}.bias"), &[cout])?.clone()) } else { None };
    ConvSpec::new(cin, cout, k, pad, stride, groups, weight, bias)
}

/// `(in, out, kernel, padding, stride, groups, has_bias)`.
type ConvShape = (usize, usize, usize, usize, usize, usize, bool);

fn pw(cin: usize, cout: usize) -> ConvShape {
    (cin, cout, 1, 0, 1, 1, true)
}

fn load_norm(store: &WeightStore, name: &str, c: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        store.require_dims(&format!("{name}.weight"), &[c])?.clone(),
        store.require_dims(&format!("{name}.bias"), &[c])?.clone(),
    ))
}

/// Parameters of one mask- and motion-aware block at width `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: (Tensor, Tensor),
    /// 1×1 expand C→2C followed by the 3×3 depthwise conv.
    pub conv: MaskAwareConv,
    pub sca: ConvSpec,
    /// 1×1 C→C.
    pub proj: MaskAwareConv,
    pub ln2: (Tensor, Tensor),
    /// 1×1 C→2C.
    pub mid: MaskAwareConv,
    pub deform: DeformDWSpec,
    pub out: ConvSpec,
}

impl BlockParams {
    pub fn from_store(store: &WeightStore, prefix: &str, c: usize) -> Result<Self> {
        let name = |n: &str| format!("{prefix}.{n}");
        let expand = load_conv(store, &name("expand"), pw(c, 2 * c))?;
        let dw = load_conv(store, &name("dw"), (2 * c, 2 * c, 3, 1, 1, 2 * c, true))?;
        let deform = DeformDWSpec::new(
            store.require_dims(&name("deform.weight"), &[2 * c, 1, 3, 3])?.clone(),
            Some(store.require_dims(&name("deform.bias"), &[2 * c])?.clone()),
        )?;
        Ok(Self {
            ln1: load_norm(store, &name("ln1"), c)?,
            conv: MaskAwareConv::new(vec![("expand".into(), expand), ("dw".into(), dw)])?,
            sca: load_conv(store, &name("sca"), pw(c, c))?,
            proj: MaskAwareConv::new(vec![("proj".into(), load_conv(store, &name("proj"), pw(c, c))?)])?,
            ln2: load_norm(store, &name("ln2"), c)?,
            mid: MaskAwareConv::new(vec![("mid".into(), load_conv(store, &name("mid"), pw(c, 2 * c))?)])?,
            deform,
            out: load_conv(store, &name("out"), pw(c, c))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.sca.in_channels
    }
}

/// Per-block routing: the stage's hard mask, the deformable sampling
/// positions, the evaluation mode and which convs honour the mask.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext<'a> {
    pub mask: &'a Tensor,
    pub sampler: &'a DeformSampler,
    pub mode: Mode,
    pub positions: &'a BTreeSet<u8>,
}

impl BlockContext<'_> {
    fn apply(&self, conv: &MaskAwareConv, position: u8, x: &Tensor, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
        if !self.positions.contains(&position) {
            return conv.dense(x, ledger, label);
        }
        match self.mode {
            Mode::Dense => conv.dense(x, ledger, label),
            Mode::Masked => conv.masked(x, self.mask, ledger, label),
            Mode::Pruned => conv.pruned(x, self.mask, ledger, label),
        }
    }
}

/// One block: LN → mask-aware conv → gate → attention → 1×1 → residual,
/// then LN → 1×1 → trajectory-deformable depthwise conv → gate → 1×1 →
/// residual.
pub fn m2as_block(x: &Tensor, p: &BlockParams, ctx: &BlockContext<'_>, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c != p.channels() {
        return Err(Error::shape(format!("{label}: block expects {} channels, got {c}", p.channels())));
    }
    if ctx.mask.hw()? != (h, w) || ctx.sampler.hw() != (h, w) {
        return Err(Error::shape(format!("{label}: mask or offsets do not match {h}×{w} features")));
    }
    let hw = (h * w) as u64;
    let f1 = layer_norm(x, &p.ln1.0, &p.ln1.1)?;
    let f2 = ctx.apply(&p.conv, 1, &f1, ledger, label)?;
    let f3 = simplified_channel_attention(&simple_gate(&f2)?, &p.sca)?;
    ledger.dense(format!("{label}.sca"), p.sca.macs(1));
    let mut f_mid = ctx.apply(&p.proj, 2, &f3, ledger, label)?;
    f_mid.add_assign(x)?;

    let f4 = ctx.apply(&p.mid, 3, &layer_norm(&f_mid, &p.ln2.0, &p.ln2.1)?, ledger, label)?;
    let f5 = simple_gate(&deform_dwconv_with(&f4, ctx.sampler, &p.deform)?)?;
    record_deform(ledger, &format!("{label}.deform"), 2 * c, hw);
    let mut out = conv2d(&f5, &p.out)?;
    ledger.dense(format!("{label}.out"), p.out.macs(hw));
    out.add_assign(&f_mid)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct StageParams {
    id: StageId,
    heads: Option<(MaskPredictorParams, ConvSpec)>,
    blocks: Vec<BlockParams>,
}

/// A loaded network; immutable and shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    intro: ConvSpec,
    stages: Vec<StageParams>,
    /// Indexed by level: `down{level+1}`.
    downs: Vec<ConvSpec>,
    /// Indexed by level: `up{level+1}`.
    ups: Vec<ConvSpec>,
    ending: ConvSpec,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Overrides the configured mode when set.
    pub mode: Option<Mode>,
    /// Seed for Gumbel mask sampling.
    pub seed: u64,
    /// Hard masks replacing the produced or routed mask of a stage.
    pub mask_override: BTreeMap<StageId, Tensor>,
    /// Keep every block's input and output in [`ForwardOutput::trace`].
    pub trace_blocks: bool,
}

/// What a stage saw: its mask, its displacements, and whether it produced
/// them itself.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: StageId,
    pub mask: BlurMask,
    pub displacements: DisplacementPair,
    pub produced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub stage: StageId,
    pub block: usize,
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub image: Tensor,
    pub stages: Vec<StageReport>,
    pub ledger: FlopLedger,
    pub trace: Vec<BlockTrace>,
}

impl ForwardOutput {
    pub fn stage(&self, id: StageId) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == id)
    }
}

impl Network {
    pub fn from_store(store: &WeightStore, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_width;
        let mut stages = Vec::new();
        for s in StageId::ALL {
            let c = s.width(base);
            let heads = if cfg.predictor_stages.contains(&s) {
                let p = format!("{s}.predictor");
                let (ln_gamma, ln_beta) = load_norm(store, &format!("{p}.ln"), c)?;
                let params = MaskPredictorParams {
                    ln_gamma,
                    ln_beta,
                    fc1: load_conv(store, &format!("{p}.fc1"), pw(c, c))?,
                    fc2: load_conv(store, &format!("{p}.fc2"), pw(2 * c, c / 2))?,
                    fc3: load_conv(store, &format!("{p}.fc3"), pw(c / 2, 2))?,
                };
                params.validate()?;
                Some((params, load_conv(store, &format!("{s}.analyzer"), (c, 4, 3, 1, 1, 1, true))?))
            } else {
                None
            };
            let blocks = (0..cfg.blocks(s)).map(|b| BlockParams::from_store(store, &format!("{s}.block{b}"), c)).collect::<Result<_>>()?;
            stages.push(StageParams { id: s, heads, blocks });
        }
        let downs = StageId::ENCODERS
            .iter()
            .map(|s| {
                let c = s.width(base);
                load_conv(store, &format!("down{}", s.level() + 1), (c, 2 * c, 2, 0, 2, 1, true))
            })
            .collect::<Result<_>>()?;
        let ups = StageId::ENCODERS
            .iter()
            .map(|s| {
                let c = s.width(base);
                load_conv(store, &format!("up{}", s.level() + 1), (2 * c, 4 * c, 1, 0, 1, 1, false))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            intro: load_conv(store, "intro", (3, base, 3, 1, 1, 1, true))?,
            stages,
            downs,
            ups,
            ending: load_conv(store, "ending", (base, 3, 3, 1, 1, 1, true))?,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn block(&self, stage: StageId, b: usize) -> Option<&BlockParams> {
        self.stages[stage.index()].blocks.get(b)
    }

    /// Deformable offsets for a stage's displacements.
    pub fn offsets_for(&self, pair: &DisplacementPair) -> Result<OffsetField> {
        build_deform_offsets(&interpolate(pair, self.cfg.n1, self.cfg.trajectory_mode)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(image, &ForwardOptions::default())
    }

    pub fn forward_with(&self, image: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::shape(format!("network input must have 3 channels, got {c}")));
        }
        self.cfg.check_dims(h, w)?;
        let mode = opts.mode.unwrap_or(self.cfg.mode);
        let mut ledger = FlopLedger::new();
        let mut reports: Vec<StageReport> = Vec::new();
        let mut trace = Vec::new();
        let mut producer: Option<usize> = None;
        let mut skips: Vec<Tensor> = Vec::new();

        let mut x = conv2d(image, &self.intro)?;
        ledger.dense("intro", self.intro.macs((h * w) as u64));
        for stage in &self.stages {
            let id = stage.id;
            if id.index() > 4 {
                let level = id.level();
                let up = &self.ups[level];
                let (_, lh, lw) = x.chw()?;
                x = resample_up(&x, up)?;
                ledger.dense(format!("up{}", level + 1), up.macs((lh * lw) as u64));
                x.add_assign(&skips[level])?;
            }
            let (_, sh, sw) = x.chw()?;
            let hw = (sh * sw) as u64;
            let report = match &stage.heads {
                Some((pred, analyzer)) => {
                    let probs = predict_probs(&x, pred)?;
                    for (name, macs) in predictor_macs(pred.channels(), hw) {
                        ledger.dense(format!("{id}.predictor.{name}"), macs);
                    }
                    let mut mask = match self.cfg.mask_sampling {
                        MaskSampling::Threshold => threshold_mask(&probs, self.cfg.epsilon)?,
                        MaskSampling::Gumbel => gumbel_mask(&probs, self.cfg.gumbel_tau, opts.seed.wrapping_add(id.index() as u64))?,
                    };
                    mask.scale_id = id.level();
                    let displacements = predict_endpoints(&x, analyzer)?;
                    ledger.dense(format!("{id}.analyzer"), analyzer.macs(hw));
                    StageReport { stage: id, mask, displacements, produced: true }
                }
                None => match producer.map(|i| &reports[i]) {
                    Some(src) => {
                        let (ph, _) = src.mask.hw();
                        StageReport {
                            stage: id,
                            mask: BlurMask {
                                probs: resample_mask(&src.mask.probs, sh, sw)?,
                                hard: resample_mask(&src.mask.hard, sh, sw)?,
                                scale_id: id.level(),
                            },
                            displacements: rescale_displacements(&src.displacements, sh as f32 / ph as f32)?,
                            produced: false,
                        }
                    }
                    None => StageReport {
                        stage: id,
                        mask: BlurMask::ones(sh, sw, id.level()),
                        displacements: DisplacementPair::zeros(sh, sw),
                        produced: false,
                    },
                },
            };
            if report.produced {
                producer = Some(reports.len());
            }
            let mut report = report;
            if let Some(m) = opts.mask_override.get(&id) {
                if m.hw()? != (sh, sw) {
                    return Err(Error::shape(format!("{id}: override mask {:?} for {sh}×{sw} features", m.dims())));
                }
                report.mask.hard = m.clone();
            }
            let sampler = DeformSampler::new(&self.offsets_for(&report.displacements)?)?;
            let ctx = BlockContext { mask: &report.mask.hard, sampler: &sampler, mode, positions: &self.cfg.mask_conv_positions };
            for (b, block) in stage.blocks.iter().enumerate() {
                let y = m2as_block(&x, block, &ctx, &mut ledger, &format!("{id}.block{b}"))?;
                if opts.trace_blocks {
                    trace.push(BlockTrace { stage: id, block: b, input: x, output: y.clone() });
                }
                x = y;
            }
            reports.push(report);
            if id.index() < 4 {
                let down = &self.downs[id.level()];
                skips.push(x.clone());
                x = resample_down(&x, down)?;
                ledger.dense(format!("down{}", id.level() + 1), down.macs(hw / 4));
            }
        }
        let mut out = conv2d(&x, &self.ending)?;
        ledger.dense("ending", self.ending.macs((h * w) as u64));
        out.add_assign(image)?;
        Ok(ForwardOutput { image: out, stages: reports, ledger, trace })
    }
}

/// The ledger a forward pass would record, computed from shapes alone.
///
/// `masks` gives the hard mask each stage's pruned convs see; stages without
/// an entry count as fully selected. Only the mask geometry matters.
pub fn analytic_ledger(cfg: &NetworkConfig, h: usize, w: usize, mode: Mode, masks: &BTreeMap<StageId, Tensor>) -> Result<FlopLedger> {
    cfg.validate()?;
    cfg.check_dims(h, w)?;
    let base = cfg.base_width;
    let mut l = FlopLedger::new();
    l.dense("intro", conv_macs((h * w) as u64, 3, base, 3, 1));
    for s in StageId::ALL {
        let c = s.width(base);
        let (sh, sw) = (h >> s.level(), w >> s.level());
        let hw = (sh * sw) as u64;
        if s.index() > 4 {
            l.dense(format!("up{}", s.level() + 1), conv_macs(hw / 4, 2 * c, 4 * c, 1, 1));
        }
        if cfg.predictor_stages.contains(&s) {
            for (name, macs) in predictor_macs(c, hw) {
                l.dense(format!("{s}.predictor.{name}"), macs);
            }
            l.dense(format!("{s}.analyzer"), conv_macs(hw, c, 4, 3, 1));
        }
        let mask = match masks.get(&s) {
            Some(m) if m.hw()? != (sh, sw) => {
                return Err(Error::shape(format!("{s}: mask {:?} for {sh}×{sw} features", m.dims())));
            }
            Some(m) => m.clone(),
            None => Tensor::full([sh, sw], 1.0),
        };
        let q = mask.data().iter().filter(|&&v| v == 1.0).count() as u64;
        let stacks: [(u8, Vec<(String, u64, usize)>); 3] = [
            (1, vec![("expand".into(), (2 * c * c) as u64, 1), ("dw".into(), (2 * c * 9) as u64, 3)]),
            (2, vec![("proj".into(), (c * c) as u64, 1)]),
            (3, vec![("mid".into(), (2 * c * c) as u64, 1)]),
        ];
        let mut sizes = BTreeMap::new();
        for (pos, layers) in &stacks {
            let kernels: Vec<usize> = layers.iter().map(|l| l.2).collect();
            sizes.insert(*pos, support_sizes(&kernels, &mask)?);
        }
        for b in 0..cfg.blocks(s) {
            let label = format!("{s}.block{b}");
            let record = |l: &mut FlopLedger, pos: u8| {
                let layers = &stacks[pos as usize - 1].1;
                if mode == Mode::Pruned && cfg.mask_conv_positions.contains(&pos) {
                    let costs: Vec<(String, u64)> = layers.iter().map(|(n, m, _)| (n.clone(), *m)).collect();
                    record_pruned(l, &label, &costs, q, hw, &sizes[&pos]);
                } else {
                    for (n, m, _) in layers {
                        l.dense(format!("{label}.{n}"), m * hw);
                    }
                }
            };
            record(&mut l, 1);
            l.dense(format!("{label}.sca"), (c * c) as u64);
            record(&mut l, 2);
            record(&mut l, 3);
            let (taps, interp) = deform_macs(2 * c, hw);
            l.dense(format!("{label}.deform.taps"), taps);
            l.dense(format!("{label}.deform.bilinear"), interp);
            l.dense(format!("{label}.out"), (c * c) as u64 * hw);
        }
        if s.index() < 4 {
            l.dense(format!("down{}", s.level() + 1), conv_macs(hw / 4, c, 2 * c, 2, 1));
        }
    }
    l.dense("ending", conv_macs((h * w) as u64, base, 3, 3, 1));
    Ok(l)
}

/// A centred rectangle covering `round(ratio·H·W)` pixels: full rows from
/// the middle outward, then a partial row.
pub fn synthetic_mask(h: usize, w: usize, ratio: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::arg(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    let q = ((h * w) as f64 * ratio).round() as usize;
    let rows = q / w.max(1);
    let top = (h - rows.min(h)) / 2;
    let mut m = Tensor::zeros([h, w]);
    let d = m.data_mut();
    d[top * w..top * w + q].fill(1.0);
    Ok(m)
}

/// [`synthetic_mask`] at every stage's resolution.
pub fn synthetic_masks(h: usize, w: usize, ratio: f64) -> Result<BTreeMap<StageId, Tensor>> {
    StageId::ALL.iter().map(|&s| Ok((s, synthetic_mask(h >> s.level(), w >> s.level(), ratio)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_width: 4,
            encoder_blocks: vec![1, 1, 1, 2],
            decoder_blocks: vec![1, 1, 1, 1],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = NetworkConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(NetworkConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(NetworkConfig::from_json("{}").unwrap(), cfg);
        assert!(text.contains("\"enc4\""));
        let partial = NetworkConfig::from_json(r#"{"predictor_stages":["enc1","dec1"],"mode":"masked"}"#).unwrap();
        assert_eq!(partial.mode, Mode::Masked);
        assert!(matches!(NetworkConfig::from_json(r#"{"n1":5}"#), Err(Error::Config(_))));
        assert!(matches!(NetworkConfig::from_json(r#"{"bogus":1}"#), Err(Error::Config(_))));
        assert!(matches!(NetworkConfig::from_json(r#"{"mask_conv_positions":[4]}"#), Err(Error::Config(_))));
    }

    #[test]
    fn stage_geometry() {
        assert_eq!(StageId::Middle.width(32), 512);
        assert_eq!(StageId::Dec2.width(32), 64);
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.blocks(StageId::Enc4), 28);
        assert_eq!(cfg.blocks(StageId::Dec4), 1);
        assert_eq!("dec3".parse::<StageId>().unwrap(), StageId::Dec3);
        assert_eq!(padded_dims(1436, 2152), (1440, 2160));
    }

    #[test]
    fn manifest_names_are_unique_and_loadable() {
        let cfg = tiny();
        let m = weight_manifest(&cfg);
        let names: BTreeSet<_> = m.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), m.len());
        assert!(names.contains("enc4.predictor.fc2.weight"));
        assert!(names.contains("up1.weight") && !names.contains("up1.bias"));
        let store = init_weights(&cfg, 3);
        Network::from_store(&store, &cfg).unwrap();
    }

    #[test]
    fn missing_weight_is_named() {
        let cfg = tiny();
        let mut store = WeightStore::new();
        for (k, t) in init_weights(&cfg, 1).iter() {
            if k != "enc2.block0.dw.weight" {
                store.insert(k.clone(), t.clone());
            }
        }
        let e = Network::from_store(&store, &cfg).unwrap_err();
        assert!(matches!(&e, Error::MissingWeight(n) if n == "enc2.block0.dw.weight"));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let cfg = tiny();
        let net = Network::from_store(&init_weights(&cfg, 1), &cfg).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros([3, 24, 32])), Err(Error::Shape(_))));
    }

    #[test]
    fn synthetic_mask_counts() {
        let m = synthetic_mask(8, 8, 0.25).unwrap();
        assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 16);
        assert_eq!(m.data()[3 * 8], 1.0);
        assert!(synthetic_mask(4, 4, 1.5).is_err());
        assert_eq!(synthetic_mask(4, 4, 1.0).unwrap(), Tensor::full([4, 4], 1.0));
    }
}
