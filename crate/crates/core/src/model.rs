//! Shared domain types: sample metadata, sources, mixing schedules,
//! parallelism layouts and the analytic FLOP models used as balancing costs.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SampleId = u64;
pub type SourceId = u32;

/// Bits reserved for the per-source record index inside a [`SampleId`].
pub const RECORD_BITS: u32 = 40;

/// Lightweight per-sample metadata flowing through the control plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: SampleId,
    pub source_id: SourceId,
    pub text_len: u32,
    pub image_patches: u32,
    pub payload_bytes: u64,
    /// Training step the sample was mixed into, once selected.
    pub step_tag: Option<u64>,
}

impl SampleMeta {
    /// Globally unique id for record `index` of `source`.
    pub fn compose_id(source: SourceId, index: u64) -> SampleId {
        ((source as u64) << RECORD_BITS) | (index & ((1 << RECORD_BITS) - 1))
    }

    pub fn record_index(id: SampleId) -> u64 {
        id & ((1 << RECORD_BITS) - 1)
    }

    pub fn source_of(id: SampleId) -> SourceId {
        (id >> RECORD_BITS) as SourceId
    }

    /// Length of the fused backbone sequence (text tokens plus image patches).
    pub fn seq_len(&self) -> u32 {
        self.text_len + self.image_patches
    }

    /// Whether the sample may be admitted to a loading plan.
    pub fn is_admissible(&self) -> bool {
        self.seq_len() > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
    Audio,
}

/// Per-source file-access state footprint (M_d).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessStateSize {
    pub socket_bytes: u64,
    pub metadata_bytes: u64,
    pub rowgroup_buffer_bytes: u64,
}

impl AccessStateSize {
    pub fn total(&self) -> u64 {
        self.socket_bytes + self.metadata_bytes + self.rowgroup_buffer_bytes
    }
}

impl Default for AccessStateSize {
    fn default() -> Self {
        const MB: u64 = 1 << 20;
        Self {
            socket_bytes: MB,
            metadata_bytes: 4 * MB,
            rowgroup_buffer_bytes: 64 * MB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: SourceId,
    pub uri: String,
    pub record_count: u64,
    /// Seconds of transformation work per sample (P_k).
    pub transform_cost: f64,
    #[serde(default)]
    pub access_state: AccessStateSize,
    #[serde(default)]
    pub modalities: Vec<Modality>,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.transform_cost > 0.0) || !self.transform_cost.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "source {}: transform cost must be positive, got {}",
                self.source_id, self.transform_cost
            )));
        }
        if self.record_count == 0 {
            return Err(Error::InvalidConfig(format!(
                "source {}: record count must be positive",
                self.source_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Epoch,
    #[default]
    Step,
    Substep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPhase {
    pub start: u64,
    pub end: u64,
    pub weights: Vec<f64>,
}

impl MixPhase {
    pub fn range(&self) -> Range<u64> {
        self.start..self.end
    }
}

/// Piecewise-constant sampling weights over half-open step ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct MixSchedule {
    phases: Vec<MixPhase>,
    granularity: Granularity,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    phases: Vec<MixPhase>,
    #[serde(default)]
    granularity: Granularity,
}

impl TryFrom<RawSchedule> for MixSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        MixSchedule::new(raw.phases, raw.granularity)
    }
}

impl From<MixSchedule> for RawSchedule {
    fn from(s: MixSchedule) -> Self {
        RawSchedule {
            phases: s.phases,
            granularity: s.granularity,
        }
    }
}

const WEIGHT_TOLERANCE: f64 = 1e-9;

impl MixSchedule {
    pub fn new(phases: Vec<MixPhase>, granularity: Granularity) -> Result<Self> {
        let Some(first) = phases.first() else {
            return Err(Error::InvalidConfig("schedule has no phases".into()));
        };
        if first.start != 0 {
            return Err(Error::InvalidConfig("schedule must start at step 0".into()));
        }
        let width = first.weights.len();
        let mut expected_start = 0;
        for (i, phase) in phases.iter().enumerate() {
            if phase.start != expected_start || phase.end <= phase.start {
                return Err(Error::InvalidConfig(format!(
                    "phase {i} range {}..{} does not continue the partition at {expected_start}",
                    phase.start, phase.end
                )));
            }
            if phase.weights.len() != width {
                return Err(Error::InvalidConfig(format!(
                    "phase {i} has {} weights, expected {width}",
                    phase.weights.len()
                )));
            }
            if phase.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::InvalidConfig(format!("phase {i} has a negative weight")));
            }
            let sum: f64 = phase.weights.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(Error::InvalidConfig(format!("phase {i} weights sum to {sum}")));
            }
            expected_start = phase.end;
        }
        Ok(Self {
            phases,
            granularity,
        })
    }

    /// A single phase holding `weights` for `total_steps` steps.
    pub fn constant(weights: Vec<f64>, total_steps: u64) -> Result<Self> {
        Self::new(
            vec![MixPhase {
                start: 0,
                end: total_steps,
                weights,
            }],
            Granularity::Step,
        )
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.last().map_or(0, |p| p.end)
    }

    pub fn source_count(&self) -> usize {
        self.phases[0].weights.len()
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn phases(&self) -> &[MixPhase] {
        &self.phases
    }

    pub fn weights_at(&self, step: u64) -> Result<&[f64]> {
        let idx = self.phases.partition_point(|p| p.end <= step);
        match self.phases.get(idx) {
            Some(p) if p.start <= step => Ok(&p.weights),
            _ => Err(Error::OutOfRange {
                step,
                total: self.total_steps(),
            }),
        }
    }
}

/// Anything able to produce per-step source weights.
///
/// Static and curriculum schedules use [`MixSchedule`]; loss- or
/// entropy-driven mixtures plug in through [`FnSchedule`].
pub trait WeightSource: Send + Sync {
    fn source_count(&self) -> usize;
    fn weights(&self, step: u64) -> Result<Vec<f64>>;
}

impl WeightSource for MixSchedule {
    fn source_count(&self) -> usize {
        MixSchedule::source_count(self)
    }

    fn weights(&self, step: u64) -> Result<Vec<f64>> {
        self.weights_at(step).map(<[f64]>::to_vec)
    }
}

/// User-supplied weight callback.
pub struct FnSchedule<F> {
    sources: usize,
    f: F,
}

impl<F> FnSchedule<F>
where
    F: Fn(u64) -> Vec<f64> + Send + Sync,
{
    pub fn new(sources: usize, f: F) -> Self {
        Self { sources, f }
    }
}

impl<F> WeightSource for FnSchedule<F>
where
    F: Fn(u64) -> Vec<f64> + Send + Sync,
{
    fn source_count(&self) -> usize {
        self.sources
    }

    fn weights(&self, step: u64) -> Result<Vec<f64>> {
        let w = (self.f)(step);
        let sum: f64 = w.iter().sum();
        if w.len() != self.sources || w.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "schedule callback returned invalid weights {w:?} at step {step}"
            )));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelismConfig {
    pub pp: u32,
    pub dp: u32,
    pub cp: u32,
    pub tp: u32,
    /// Microbatches per step per data-parallel replica.
    #[serde(default = "one")]
    pub microbatches: u32,
}

fn one() -> u32 {
    1
}

impl ParallelismConfig {
    pub fn new(pp: u32, dp: u32, cp: u32, tp: u32, microbatches: u32) -> Self {
        Self {
            pp,
            dp,
            cp,
            tp,
            microbatches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pp", self.pp), ("dp", self.dp), ("cp", self.cp), ("tp", self.tp)] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("parallel axis {name} has size 0")));
            }
        }
        if self.microbatches == 0 {
            return Err(Error::InvalidConfig("microbatch count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn world_size(&self) -> u32 {
        self.pp * self.dp * self.cp * self.tp
    }

    /// Encoder data parallelism when the encoder spans the whole world.
    pub fn encoder_dp(&self) -> u32 {
        self.world_size()
    }
}

impl fmt::Display for ParallelismConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pp={} dp={} cp={} tp={} m={}",
            self.pp, self.dp, self.cp, self.tp, self.microbatches
        )
    }
}

/// Language backbone FLOP model:
/// `depth * sum_i (linear_coeff * l_i * h^2 + quad_coeff * l_i^2 * h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub depth: u32,
    pub hidden: u32,
    pub linear_coeff: f64,
    pub quad_coeff: f64,
    pub topk_experts: u32,
    pub vocab: u32,
}

impl BackboneParams {
    /// Dense transformer forward accounting (24 l h^2 + 4 l^2 h per layer).
    pub fn dense(depth: u32, hidden: u32) -> Self {
        Self::moe(depth, hidden, 1)
    }

    /// Mixture of experts: the MLP share of the linear term scales with top-k.
    pub fn moe(depth: u32, hidden: u32, topk: u32) -> Self {
        Self {
            depth,
            hidden,
            linear_coeff: 8.0 + 16.0 * topk as f64,
            quad_coeff: 4.0,
            topk_experts: topk,
            vocab: 32_000,
        }
    }
}

impl Default for BackboneParams {
    fn default() -> Self {
        Self::dense(32, 4096)
    }
}

/// Vision encoder FLOP model, image-local attention:
/// `depth * sum_s (linear_coeff * s * h^2 + 4 * s * h * mlp + quad_coeff * s^2 * h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub depth: u32,
    pub hidden: u32,
    pub mlp: u32,
    pub linear_coeff: f64,
    pub quad_coeff: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            depth: 39,
            hidden: 1408,
            mlp: 6144,
            linear_coeff: 8.0,
            quad_coeff: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostParams {
    #[serde(default)]
    pub backbone: BackboneParams,
    #[serde(default)]
    pub encoder: EncoderParams,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let e = &self.encoder;
        let positive = b.depth > 0
            && b.hidden > 0
            && b.linear_coeff > 0.0
            && b.quad_coeff >= 0.0
            && b.topk_experts > 0
            && b.vocab > 0
            && e.depth > 0
            && e.hidden > 0
            && e.mlp > 0
            && e.linear_coeff > 0.0
            && e.quad_coeff >= 0.0;
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("cost parameters must be positive: {self:?}")))
        }
    }
}

/// Backbone forward FLOPs of one packed sequence made of `lengths` segments.
///
/// Attention is segment-local, so the quadratic term is summed per segment.
pub fn backbone_cost(lengths: &[u32], params: &CostParams) -> f64 {
    let b = &params.backbone;
    let h = b.hidden as f64;
    let per_layer: f64 = lengths
        .iter()
        .map(|&l| {
            let l = l as f64;
            b.linear_coeff * l * h * h + b.quad_coeff * l * l * h
        })
        .fold(0.0, |a, c| a + c);
    b.depth as f64 * per_layer
}

/// Encoder forward FLOPs for a list of images given their patch counts.
pub fn encoder_cost(patch_counts: &[u32], params: &CostParams) -> f64 {
    let e = &params.encoder;
    let h = e.hidden as f64;
    let m = e.mlp as f64;
    let per_layer: f64 = patch_counts
        .iter()
        .map(|&s| {
            let s = s as f64;
            e.linear_coeff * s * h * h + 4.0 * s * h * m + e.quad_coeff * s * s * h
        })
        .fold(0.0, |a, c| a + c);
    e.depth as f64 * per_layer
}
