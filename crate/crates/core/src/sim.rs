//! Desk-scale simulation: synthetic sources, whole-service runs, metrics,
//! balancing benchmarks and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::loader::{naive_clone_ledger, write_records, LoaderConfig, LocalStorage, MemoryStorage, Record, Storage};
use crate::model::{backbone_cost, encoder_cost, AccessStateSize, CostParams, Modality, MixSchedule, ParallelismConfig, SourceId, SourceSpec};
use crate::orchestration::{Item, Method, Strategy};
use crate::place_tree::{Axis, ClientPlaceTree};
use crate::planner::{auto_partition, LoadingPlan, Planner, ResourceEnvelope, ScalingParams};
use crate::rng::keyed_u64;
use crate::runtime::{CheckpointStore, FaultScript, Phase, Runtime, RuntimeConfig, RuntimeEvent, StepReport, Tick};

/// Histogram bin `[lo, hi)` with relative weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

/// Continuous length distribution; draws are rounded up to integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LengthDist {
    Lognormal { mu: f64, sigma: f64 },
    Pareto { scale: f64, shape: f64 },
    Empirical { bins: Vec<HistBin> },
    Constant { value: f64 },
}

impl Default for LengthDist {
    fn default() -> Self {
        LengthDist::Constant { value: 0.0 }
    }
}

/// Share of caption-style texts no longer than 64 tokens.
pub const SHORT_TEXT_SHARE: f64 = 0.9823;

impl LengthDist {
    /// Caption-style text lengths: lognormal with `mu = 3` whose CDF at 64
    /// tokens equals [`SHORT_TEXT_SHARE`].
    pub fn caption_text() -> Self {
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(SHORT_TEXT_SHARE);
        let mu = 3.0;
        LengthDist::Lognormal {
            mu,
            sigma: (64f64.ln() - mu) / z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LengthDist::Lognormal { mu, sigma } => mu.is_finite() && *sigma > 0.0 && sigma.is_finite(),
            LengthDist::Pareto { scale, shape } => *scale > 0.0 && *shape > 0.0 && scale.is_finite() && shape.is_finite(),
            LengthDist::Empirical { bins } => {
                !bins.is_empty()
                    && bins.iter().all(|b| b.lo >= 0.0 && b.hi > b.lo && b.weight >= 0.0)
                    && bins.windows(2).all(|w| w[0].hi <= w[1].lo)
                    && bins.iter().map(|b| b.weight).sum::<f64>() > 0.0
            }
            LengthDist::Constant { value } => *value >= 0.0 && value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid length distribution {self:?}")))
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            LengthDist::Lognormal { mu, sigma } => rand_distr::LogNormal::new(*mu, *sigma).expect("validated").sample(rng),
            LengthDist::Pareto { scale, shape } => rand_distr::Pareto::new(*scale, *shape).expect("validated").sample(rng),
            LengthDist::Empirical { bins } => {
                let total: f64 = bins.iter().map(|b| b.weight).sum();
                let mut u = rng.random::<f64>() * total;
                let bin = bins
                    .iter()
                    .find(|b| {
                        u -= b.weight;
                        u < 0.0
                    })
                    .unwrap_or(bins.last().expect("validated"));
                bin.lo + rng.random::<f64>() * (bin.hi - bin.lo)
            }
            LengthDist::Constant { value } => *value,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            LengthDist::Lognormal { mu, sigma } => statrs::distribution::LogNormal::new(*mu, *sigma).expect("validated").cdf(x),
            LengthDist::Pareto { scale, shape } => statrs::distribution::Pareto::new(*scale, *shape).expect("validated").cdf(x),
            LengthDist::Empirical { bins } => {
                let total: f64 = bins.iter().map(|b| b.weight).sum();
                let mut acc = 0.0;
                for b in bins {
                    if x < b.lo {
                        break;
                    }
                    acc += b.weight * ((x - b.lo) / (b.hi - b.lo)).min(1.0);
                }
                acc / total
            }
            LengthDist::Constant { value } => f64::from(x >= *value),
        }
    }

    /// Analytic mean, if finite.
    pub fn mean(&self) -> Option<f64> {
        match self {
            LengthDist::Lognormal { mu, sigma } => Some((mu + sigma * sigma / 2.0).exp()),
            LengthDist::Pareto { scale, shape } => (*shape > 1.0).then(|| shape * scale / (shape - 1.0)),
            LengthDist::Empirical { bins } => {
                let total: f64 = bins.iter().map(|b| b.weight).sum();
                Some(bins.iter().map(|b| b.weight * (b.lo + b.hi) / 2.0).sum::<f64>() / total)
            }
            LengthDist::Constant { value } => Some(*value),
        }
    }

    fn continuous(&self) -> bool {
        !matches!(self, LengthDist::Constant { .. })
    }
}

/// Kolmogorov–Smirnov distance between `sorted` draws and `cdf`.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// One-sample KS critical value at significance 0.001.
pub fn ks_critical(n: usize) -> f64 {
    1.949 / (n as f64).sqrt()
}

fn default_max_text() -> u32 {
    8192
}

fn default_max_patches() -> u32 {
    4096
}

fn default_cost() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSourceSpec {
    pub source_id: SourceId,
    #[serde(default)]
    pub name: String,
    pub record_count: u64,
    pub text_len: LengthDist,
    #[serde(default = "default_max_text")]
    pub max_text: u32,
    /// Probability that a record carries an image.
    #[serde(default)]
    pub image_prob: f64,
    #[serde(default)]
    pub image_patches: LengthDist,
    #[serde(default = "default_max_patches")]
    pub max_patches: u32,
    /// Seconds of transformation per sample (P_k).
    #[serde(default = "default_cost")]
    pub transform_cost: f64,
    /// File-access state (M_d).
    #[serde(default)]
    pub access_state: AccessStateSize,
    /// Opaque payload bytes stored per token.
    #[serde(default)]
    pub payload_per_token: u32,
}

/// Goodness-of-fit of one generated field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsCheck {
    pub n: usize,
    pub statistic: f64,
    pub critical: f64,
}

impl SyntheticSourceSpec {
    pub fn text_only(source_id: SourceId, record_count: u64, text_len: LengthDist) -> Self {
        Self {
            source_id,
            name: format!("source-{source_id}"),
            record_count,
            text_len,
            max_text: default_max_text(),
            image_prob: 0.0,
            image_patches: LengthDist::default(),
            max_patches: default_max_patches(),
            transform_cost: default_cost(),
            access_state: AccessStateSize::default(),
            payload_per_token: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.text_len.validate()?;
        self.image_patches.validate()?;
        if self.record_count == 0 || !(0.0..=1.0).contains(&self.image_prob) || self.max_text == 0 {
            return Err(Error::InvalidConfig(format!("source {} has invalid generator settings", self.source_id)));
        }
        if !(self.transform_cost > 0.0) {
            return Err(Error::InvalidConfig(format!("source {} needs a positive transform cost", self.source_id)));
        }
        Ok(())
    }

    pub fn file_name(&self) -> String {
        format!("source-{:03}.bin", self.source_id)
    }

    pub fn source_spec(&self) -> SourceSpec {
        let mut modalities = vec![Modality::Text];
        if self.image_prob > 0.0 {
            modalities.push(Modality::Image);
        }
        SourceSpec {
            source_id: self.source_id,
            uri: self.file_name(),
            record_count: self.record_count,
            transform_cost: self.transform_cost,
            access_state: self.access_state,
            modalities,
        }
    }

    /// Deterministic records plus a KS check of the raw text-length draws.
    pub fn generate(&self, seed: u64) -> Result<(Vec<Record>, Option<KsCheck>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(keyed_u64(seed, &[u64::from(self.source_id)]));
        let mut raw = Vec::with_capacity(self.record_count as usize);
        let mut records = Vec::with_capacity(self.record_count as usize);
        for _ in 0..self.record_count {
            let x = self.text_len.draw(&mut rng);
            raw.push(x);
            let text_len = (x.ceil() as u32).clamp(1, self.max_text);
            let image_patches = if self.image_prob > 0.0 && rng.random_bool(self.image_prob) {
                (self.image_patches.draw(&mut rng).ceil() as u32).clamp(1, self.max_patches)
            } else {
                0
            };
            let n = (text_len + image_patches) as usize * self.payload_per_token as usize;
            let payload = (0..n).map(|i| (i as u8).wrapping_mul(31) ^ self.source_id as u8).collect();
            records.push(Record {
                text_len,
                image_patches,
                payload,
            });
        }
        let check = if self.text_len.continuous() && raw.len() >= 50 {
            raw.sort_by(f64::total_cmp);
            let check = KsCheck {
                n: raw.len(),
                statistic: ks_statistic(&raw, |x| self.text_len.cdf(x)),
                critical: ks_critical(raw.len()),
            };
            if check.statistic > check.critical {
                return Err(Error::Integrity(format!(
                    "source {} text lengths fail the KS bound: {:.4} > {:.4}",
                    self.source_id, check.statistic, check.critical
                )));
            }
            Some(check)
        } else {
            None
        };
        Ok((records, check))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: SourceId,
    pub file: String,
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
    pub ks: Option<KsCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub shards: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Write one shard file per source and a checksummed manifest.
pub fn gen_sources(specs: &[SyntheticSourceSpec], seed: u64, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut shards = Vec::with_capacity(specs.len());
    for s in specs {
        let (records, ks) = s.generate(seed)?;
        let path = out_dir.join(s.file_name());
        write_records(&path, &records)?;
        let bytes = fs::read(&path)?;
        shards.push(ManifestEntry {
            source_id: s.source_id,
            file: s.file_name(),
            records: records.len() as u64,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
            ks,
        });
    }
    let manifest = Manifest { seed, shards };
    fs::write(out_dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Check every file listed in the manifest of `dir`.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    for e in &manifest.shards {
        let bytes = fs::read(dir.join(&e.file))?;
        let sum = hex::encode(Sha256::digest(&bytes));
        if sum != e.sha256 {
            return Err(Error::Integrity(format!("{} checksum {sum} does not match the manifest", e.file)));
        }
    }
    Ok(manifest)
}

/// Generated sources held in memory.
pub fn memory_storage(specs: &[SyntheticSourceSpec], seed: u64) -> Result<MemoryStorage> {
    let mut storage = MemoryStorage::new();
    for s in specs {
        let (records, _) = s.generate(seed)?;
        storage.insert(s.file_name(), &records);
    }
    Ok(storage)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyChoice {
    Vanilla,
    LlmBalance,
    #[default]
    Hybrid,
    Custom {
        strategy: Strategy,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReshardAt {
    pub step: u64,
    pub parallelism: ParallelismConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    /// Samples per step across all data-parallel replicas.
    pub batch_size: usize,
    pub sources: Vec<SyntheticSourceSpec>,
    /// Read shard files written by `gen_sources` instead of generating.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub schedule: MixSchedule,
    pub parallelism: ParallelismConfig,
    #[serde(default)]
    pub strategy: StrategyChoice,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub cost: CostParams,
    /// Sizes loader actors; without it every source gets one actor.
    #[serde(default)]
    pub envelope: Option<ResourceEnvelope>,
    #[serde(default)]
    pub loader: LoaderConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default)]
    pub faults: FaultScript,
    /// Random mid-plan kills with this mean steps between failures.
    #[serde(default)]
    pub mtbf: Option<f64>,
    #[serde(default)]
    pub reshards: Vec<ReshardAt>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn strategy(&self) -> Strategy {
        match &self.strategy {
            StrategyChoice::Vanilla => Strategy::vanilla(self.batch_size),
            StrategyChoice::LlmBalance => Strategy::llm_balance(self.batch_size, self.cost, self.method),
            StrategyChoice::Hybrid => Strategy::hybrid(self.batch_size, self.cost, self.method),
            StrategyChoice::Custom { strategy } => strategy.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch size must be positive".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::InvalidConfig("at least one source is required".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if s.source_id as usize != i {
                return Err(Error::InvalidConfig(format!(
                    "source ids must be 0..{}, found {} at position {i}",
                    self.sources.len(),
                    s.source_id
                )));
            }
            s.validate()?;
        }
        if self.schedule.source_count() != self.sources.len() {
            return Err(Error::InvalidConfig(format!(
                "schedule has {} weights for {} sources",
                self.schedule.source_count(),
                self.sources.len()
            )));
        }
        if self.schedule.total_steps() < self.steps {
            return Err(Error::InvalidConfig(format!(
                "schedule covers {} steps but {} are requested",
                self.schedule.total_steps(),
                self.steps
            )));
        }
        ClientPlaceTree::build(self.parallelism)?;
        for r in &self.reshards {
            ClientPlaceTree::build(r.parallelism)?;
        }
        self.cost.validate()?;
        if let Some(env) = &self.envelope {
            env.validate()?;
        }
        self.runtime.validate()?;
        self.strategy().validate()
    }

    /// Stable digest of the configuration.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// OS threads per loader worker pool; results do not depend on it.
    pub threads: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Verify generated plans against a recorded log.
    pub expected_log: Option<Vec<LoadingPlan>>,
    pub keep_reports: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbMetrics {
    pub step: u64,
    pub dp: u32,
    pub mb: u32,
    pub samples: u32,
    pub tokens: u64,
    pub backbone_flops: f64,
    pub encoder_flops: f64,
    /// Stage-critical cost: backbone split across the replica's ranks plus
    /// the slowest rank's encoder share.
    pub critical: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTicks {
    pub request: Tick,
    pub fetch: Tick,
    pub consult: Tick,
    pub plan: Tick,
    pub ingest: Tick,
}

impl PhaseTicks {
    fn from_array(a: [Tick; 5]) -> Self {
        let [request, fetch, consult, plan, ingest] = a;
        Self {
            request,
            fetch,
            consult,
            plan,
            ingest,
        }
    }

    pub fn get(&self, p: Phase) -> Tick {
        match p {
            Phase::Request => self.request,
            Phase::Fetch => self.fetch,
            Phase::Consult => self.consult,
            Phase::Plan => self.plan,
            Phase::Ingest => self.ingest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub access_state: u64,
    pub worker_ctx: u64,
    pub buffer: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub plan_id: u64,
    pub t_iter: f64,
    /// Max over min backbone flops among non-empty microbatches.
    pub flops_max_min: f64,
    /// Max over mean backbone flops among all microbatches.
    pub flops_max_mean: f64,
    pub pad_tokens: u64,
    pub phases: PhaseTicks,
    pub memory: MemoryPoint,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub steps: u64,
    pub delivered_samples: u64,
    pub mean_t_iter: f64,
    pub mean_flops_max_min: f64,
    pub mean_flops_max_mean: f64,
    pub mean_phases: BTreeMap<String, f64>,
    pub failovers: u64,
    pub reshards: u64,
    pub payload_retries: u64,
    pub disaggregated_memory: u64,
    pub naive_clone_memory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub config_digest: String,
    pub seed: u64,
    pub strategy: String,
    pub microbatches: Vec<MbMetrics>,
    pub steps: Vec<StepMetrics>,
    pub summary: Summary,
}

impl MetricsFrame {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("metrics serialize");
        v.push(b'\n');
        v
    }
}

pub struct SimOutput {
    pub frame: MetricsFrame,
    pub events: Vec<RuntimeEvent>,
    pub plan_log: Vec<LoadingPlan>,
    /// Sample ids delivered per step, once per microbatch.
    pub delivered: Vec<Vec<u64>>,
    /// Hash of every payload in delivery order.
    pub payload_hashes: Vec<String>,
    pub reports: Vec<StepReport>,
}

/// Per-microbatch metrics recomputed from what ranks received.
pub fn microbatch_metrics(report: &StepReport, cost: &CostParams, encoder_layout: bool) -> Vec<MbMetrics> {
    let metas: BTreeMap<u64, _> = report.metas.iter().map(|m| (m.sample_id, *m)).collect();
    let mut group: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut first: BTreeMap<(u32, u32), &crate::runtime::Delivery> = BTreeMap::new();
    let mut enc_rank: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for d in &report.deliveries {
        group.entry(d.bucket).or_default().insert(d.rank);
        if d.kind == crate::constructor::PayloadKind::Full {
            first.entry((d.bucket, d.mb_index)).or_insert(d);
        }
        if encoder_layout {
            let patches: Vec<u32> = d.images.iter().map(|(_, n)| *n).collect();
            let e = encoder_cost(&patches, cost);
            let slot = enc_rank.entry((d.bucket, d.mb_index)).or_insert(0.0);
            *slot = slot.max(e);
        }
    }
    first
        .into_iter()
        .map(|((bucket, mb), d)| {
            let ranks = group[&bucket].len().max(1) as f64;
            let backbone = backbone_cost(&d.seq_lens, cost);
            let (encoder, encoder_time) = if encoder_layout {
                let e = enc_rank.get(&(bucket, mb)).copied().unwrap_or(0.0);
                (e, e)
            } else {
                let patches: Vec<u32> = d
                    .samples
                    .iter()
                    .filter_map(|id| metas.get(id))
                    .map(|m| m.image_patches)
                    .filter(|p| *p > 0)
                    .collect();
                let e = encoder_cost(&patches, cost);
                (e, e / ranks)
            };
            MbMetrics {
                step: report.step,
                dp: bucket,
                mb,
                samples: d.samples.len() as u32,
                tokens: d.seq_lens.iter().map(|l| u64::from(*l)).sum(),
                backbone_flops: backbone,
                encoder_flops: encoder,
                critical: backbone / ranks + encoder_time,
            }
        })
        .collect()
}

/// Straggler model: the slowest replica's summed microbatch cost.
pub fn t_iter(mbs: &[MbMetrics]) -> f64 {
    let mut per_dp: BTreeMap<u32, f64> = BTreeMap::new();
    for m in mbs {
        *per_dp.entry(m.dp).or_default() += m.critical;
    }
    per_dp.values().copied().fold(0.0, f64::max)
}

fn ratios(values: &[f64]) -> (f64, f64) {
    let max = values.iter().copied().fold(0.0, f64::max);
    let min_pos = values.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let max_min = if min_pos.is_finite() { max / min_pos } else { 1.0 };
    let max_mean = if mean > 0.0 { max / mean } else { 1.0 };
    (max_min, max_mean)
}

/// Build the whole service for `cfg` and run it for `cfg.steps` steps.
pub fn run_sim(cfg: &RunConfig, opts: &SimOptions) -> Result<SimOutput> {
    cfg.validate()?;
    let storage: Arc<dyn Storage> = match &cfg.data_dir {
        Some(dir) => {
            verify_manifest(dir)?;
            Arc::new(LocalStorage::new(dir))
        }
        None => Arc::new(memory_storage(&cfg.sources, cfg.seed)?),
    };
    let specs: Vec<SourceSpec> = cfg.sources.iter().map(SyntheticSourceSpec::source_spec).collect();
    let strategy = cfg.strategy();
    let encoder_layout = strategy.modules.iter().skip(1).any(|m| {
        m.pipeline
            .iter()
            .any(|p| matches!(p, crate::orchestration::Primitive::Distribute { axis: Axis::World, .. }))
    });
    let tree = ClientPlaceTree::build(cfg.parallelism)?;
    let mut planner = Planner::new(strategy.clone(), Box::new(cfg.schedule.clone()), tree, cfg.seed)?;
    let threads = opts.threads.unwrap_or(0) as u32;
    let mut loaders = Vec::new();
    match &cfg.envelope {
        Some(env) => {
            let alloc = auto_partition(&specs, env)?;
            for (spec, a) in specs.iter().zip(&alloc) {
                for shard in 0..a.actors {
                    let lc = LoaderConfig {
                        shard,
                        actors: a.actors,
                        workers: a.workers_per_actor,
                        threads,
                        ..cfg.loader
                    };
                    loaders.push((spec.clone(), lc));
                }
            }
            planner = planner.with_scaling(alloc, ScalingParams::default(), env.w_src);
        }
        None => {
            let actors = cfg.loader.actors.max(1);
            for spec in &specs {
                for shard in 0..actors {
                    let lc = LoaderConfig {
                        shard,
                        actors,
                        threads,
                        ..cfg.loader
                    };
                    loaders.push((spec.clone(), lc));
                }
            }
        }
    }
    let store = match &opts.checkpoint_dir {
        Some(dir) => CheckpointStore::create(dir)?,
        None => CheckpointStore::in_memory(),
    };
    let mut script = cfg.faults.clone();
    if let Some(mtbf) = cfg.mtbf {
        let ids: Vec<_> = loaders
            .iter()
            .map(|(s, l)| crate::planner::LoaderId {
                source: s.source_id,
                shard: l.shard,
            })
            .collect();
        script.faults.extend(FaultScript::random(cfg.seed, cfg.steps, &ids, mtbf).faults);
    }
    // A cloned per-rank dataloader must sustain one replica's share of the
    // disaggregated loaders' throughput.
    let dp = cfg.parallelism.dp.max(1);
    let workers_per_rank = loaders.iter().map(|(_, l)| l.workers).sum::<u32>().div_ceil(dp);
    let rt_cfg = RuntimeConfig {
        horizon: Some(cfg.steps),
        ..cfg.runtime
    };
    let mut rt = Runtime::new(planner, loaders, storage, rt_cfg, store, script)?;
    if let Some(log) = &opts.expected_log {
        rt.expect_plans(log.clone());
    }
    for r in &cfg.reshards {
        rt.schedule_reshard(r.step, r.parallelism);
    }

    let mut microbatches = Vec::new();
    let mut steps = Vec::new();
    let mut delivered = Vec::new();
    let mut payload_hashes = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..cfg.steps {
        let report = rt.pull_cycle()?;
        let mbs = microbatch_metrics(&report, &cfg.cost, encoder_layout);
        let backbone: Vec<f64> = mbs.iter().map(|m| m.backbone_flops).collect();
        let (max_min, max_mean) = ratios(&backbone);
        let ledger = rt.ledger();
        steps.push(StepMetrics {
            step: report.step,
            plan_id: report.plan_id,
            t_iter: t_iter(&mbs),
            flops_max_min: max_min,
            flops_max_mean: max_mean,
            pad_tokens: report.pad_tokens,
            phases: PhaseTicks::from_array(report.phases),
            memory: MemoryPoint {
                access_state: ledger.access_state(),
                worker_ctx: ledger.worker_ctx(),
                buffer: ledger.buffer(),
                total: ledger.total(),
            },
        });
        microbatches.extend(mbs);
        delivered.push(report.delivered_samples());
        payload_hashes.extend(report.deliveries.iter().map(|d| d.hash.clone()));
        if opts.keep_reports {
            reports.push(report);
        }
    }

    let n = steps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
    let mean_phases = Phase::ALL
        .iter()
        .map(|p| (p.name().to_string(), mean(&|s: &StepMetrics| s.phases.get(*p) as f64)))
        .collect();
    let last = steps.last().map(|s| s.memory).unwrap_or_default();
    let world = ClientPlaceTree::build(cfg.parallelism)?.world_size();
    let naive = naive_clone_ledger(
        &specs,
        world,
        workers_per_rank,
        cfg.loader.worker_ctx_bytes,
        last.buffer / u64::from(dp),
    );
    let events = rt.events().to_vec();
    let count = |f: fn(&RuntimeEvent) -> bool| events.iter().filter(|e| f(e)).count() as u64;
    let summary = Summary {
        steps: steps.len() as u64,
        delivered_samples: delivered.iter().map(|d| d.len() as u64).sum(),
        mean_t_iter: mean(&|s: &StepMetrics| s.t_iter),
        mean_flops_max_min: mean(&|s: &StepMetrics| s.flops_max_min),
        mean_flops_max_mean: mean(&|s: &StepMetrics| s.flops_max_mean),
        mean_phases,
        failovers: count(|e| matches!(e, RuntimeEvent::Failover { .. })),
        reshards: count(|e| matches!(e, RuntimeEvent::Reshard { .. })),
        payload_retries: count(|e| matches!(e, RuntimeEvent::PayloadRetry { .. })),
        disaggregated_memory: last.total,
        naive_clone_memory: naive.total(),
    };
    let strategy_name = match &cfg.strategy {
        StrategyChoice::Vanilla => "vanilla",
        StrategyChoice::LlmBalance => "llm_balance",
        StrategyChoice::Hybrid => "hybrid",
        StrategyChoice::Custom { .. } => "custom",
    };
    Ok(SimOutput {
        frame: MetricsFrame {
            config_digest: cfg.digest(),
            seed: cfg.seed,
            strategy: strategy_name.to_string(),
            microbatches,
            steps,
            summary,
        },
        events,
        plan_log: rt.store().plan_log().to_vec(),
        delivered,
        payload_hashes,
        reports,
    })
}

/// Two-source fixture: image captions, almost all of them short, mixed
/// with long text-only documents whose lengths follow `docs`.
pub fn skewed_fixture(strategy: StrategyChoice, docs: LengthDist, steps: u64, seed: u64) -> RunConfig {
    let mut captions = SyntheticSourceSpec::text_only(0, 8192, LengthDist::caption_text());
    captions.name = "captions".into();
    captions.image_prob = 1.0;
    captions.image_patches = LengthDist::Lognormal { mu: 6.0, sigma: 0.5 };
    let mut documents = SyntheticSourceSpec::text_only(1, 4096, docs);
    documents.name = "documents".into();
    RunConfig {
        seed,
        steps,
        batch_size: 512,
        sources: vec![captions, documents],
        data_dir: None,
        schedule: MixSchedule::constant(vec![0.75, 0.25], steps.max(1)).expect("valid weights"),
        parallelism: ParallelismConfig::new(1, 4, 1, 1, 4),
        strategy,
        method: Method::KarmarkarKarp,
        cost: CostParams::default(),
        envelope: None,
        loader: LoaderConfig {
            capacity: 1024,
            ..LoaderConfig::default()
        },
        runtime: RuntimeConfig::default(),
        faults: FaultScript::default(),
        mtbf: None,
        reshards: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelComponent {
    pub weight: f64,
    pub lengths: LengthDist,
}

/// A batch drawn from weighted components, emitted component by component
/// the way the quota mixer concatenates sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewLevel {
    pub name: String,
    pub components: Vec<LevelComponent>,
}

impl SkewLevel {
    pub fn single(name: impl Into<String>, lengths: LengthDist) -> Self {
        Self {
            name: name.into(),
            components: vec![LevelComponent { weight: 1.0, lengths }],
        }
    }

    /// Caption-style texts mixed with a quarter of documents drawn from `docs`.
    pub fn captions_with(name: impl Into<String>, docs: LengthDist) -> Self {
        Self {
            name: name.into(),
            components: vec![
                LevelComponent {
                    weight: 0.75,
                    lengths: LengthDist::caption_text(),
                },
                LevelComponent { weight: 0.25, lengths: docs },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dp: usize,
    pub microbatches: usize,
    pub per_microbatch: usize,
    pub trials: usize,
    pub seed: u64,
    pub max_len: u32,
    #[serde(default)]
    pub cost: CostParams,
    pub levels: Vec<SkewLevel>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let level = |name: &str, mu| SkewLevel::captions_with(name, LengthDist::Lognormal { mu, sigma: 1.0 });
        Self {
            dp: 4,
            microbatches: 4,
            per_microbatch: 8,
            trials: 200,
            seed: 0,
            max_len: 8192,
            cost: CostParams::default(),
            levels: vec![level("low", 3.0), level("mid", 5.0), level("high", 7.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub level: String,
    pub method: Method,
    pub trials: usize,
    pub vanilla_max_mean: f64,
    pub balanced_max_mean: f64,
    /// Mean of per-trial vanilla over balanced iteration time.
    pub speedup: f64,
    /// Share of trials where this method's max load is at most greedy's.
    pub le_greedy: f64,
}

fn max_over_mean(loads: &[f64]) -> f64 {
    let mean = loads.iter().sum::<f64>() / loads.len().max(1) as f64;
    if mean > 0.0 {
        loads.iter().copied().fold(0.0, f64::max) / mean
    } else {
        1.0
    }
}

/// Compare in-order microbatching with balanced bucketing on sampled
/// sequence lengths.
pub fn bench_balance(cfg: &BenchConfig, methods: &[Method]) -> Result<Vec<BenchRow>> {
    if cfg.dp == 0 || cfg.microbatches == 0 || cfg.per_microbatch == 0 || cfg.trials == 0 {
        return Err(Error::InvalidConfig("bench dimensions must be positive".into()));
    }
    let bins = cfg.dp * cfg.microbatches;
    let n = bins * cfg.per_microbatch;
    let mut rows = Vec::new();
    for (li, level) in cfg.levels.iter().enumerate() {
        if level.components.is_empty() || level.components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::InvalidConfig(format!("level {} needs non-negative component weights", level.name)));
        }
        for c in &level.components {
            c.lengths.validate()?;
        }
        let weights: Vec<f64> = level.components.iter().map(|c| c.weight).collect();
        let total: f64 = weights.iter().sum();
        let shares: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let counts = crate::orchestration::apportion(&shares, n, crate::orchestration::Rounding::LargestRemainder, 0.0);
        let mut sets = Vec::with_capacity(cfg.trials);
        for t in 0..cfg.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(keyed_u64(cfg.seed, &[li as u64, t as u64]));
            let mut items = Vec::with_capacity(n);
            for (c, count) in level.components.iter().zip(&counts) {
                for _ in 0..*count {
                    let len = (c.lengths.draw(&mut rng).ceil() as u32).clamp(1, cfg.max_len);
                    items.push(Item::new(items.len() as u64, backbone_cost(&[len], &cfg.cost)));
                }
            }
            sets.push(items);
        }
        for &method in methods {
            let p = method.partitioner();
            let (mut v_mm, mut b_mm, mut speedup, mut le) = (0.0, 0.0, 0.0, 0usize);
            for items in &sets {
                let chunk: Vec<f64> = items
                    .chunks(cfg.per_microbatch)
                    .map(|c| c.iter().map(|i| i.cost).sum())
                    .collect();
                let vanilla_t = chunk
                    .chunks(cfg.microbatches)
                    .map(|c| c.iter().sum::<f64>())
                    .fold(0.0, f64::max);
                let mut bal_bins = Vec::with_capacity(bins);
                let mut balanced_t: f64 = 0.0;
                for bucket in p.partition(items, cfg.dp)? {
                    balanced_t = balanced_t.max(bucket.iter().map(|i| i.cost).sum());
                    for b in p.partition(&bucket, cfg.microbatches)? {
                        bal_bins.push(b.iter().map(|i| i.cost).sum::<f64>());
                    }
                }
                v_mm += max_over_mean(&chunk);
                b_mm += max_over_mean(&bal_bins);
                speedup += if balanced_t > 0.0 { vanilla_t / balanced_t } else { 1.0 };
                let flat = |m: Method| -> Result<f64> {
                    Ok(m.partitioner()
                        .partition(items, bins)?
                        .iter()
                        .map(|b| b.iter().map(|i| i.cost).sum::<f64>())
                        .fold(0.0, f64::max))
                };
                if flat(method)? <= flat(Method::Greedy)? * (1.0 + 1e-12) {
                    le += 1;
                }
            }
            let t = cfg.trials as f64;
            rows.push(BenchRow {
                level: level.name.clone(),
                method,
                trials: cfg.trials,
                vanilla_max_mean: v_mm / t,
                balanced_max_mean: b_mm / t,
                speedup: speedup / t,
                le_greedy: le as f64 / t,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

pub const MB_COLUMNS: &str = "step,dp,mb,samples,tokens,backbone_flops,encoder_flops,critical";
pub const STEP_COLUMNS: &str =
    "step,plan_id,t_iter,flops_max_min,flops_max_mean,pad_tokens,request,fetch,consult,plan,ingest,access_state,worker_ctx,buffer,memory_total";
pub const BENCH_COLUMNS: &str = "level,method,trials,vanilla_max_mean,balanced_max_mean,speedup,le_greedy";

pub fn microbatches_csv(frame: &MetricsFrame) -> String {
    let mut s = format!("{MB_COLUMNS}\n");
    for m in &frame.microbatches {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.step, m.dp, m.mb, m.samples, m.tokens, m.backbone_flops, m.encoder_flops, m.critical
        );
    }
    s
}

pub fn steps_csv(frame: &MetricsFrame) -> String {
    let mut s = format!("{STEP_COLUMNS}\n");
    for m in &frame.steps {
        let p = &m.phases;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.plan_id,
            m.t_iter,
            m.flops_max_min,
            m.flops_max_mean,
            m.pad_tokens,
            p.request,
            p.fetch,
            p.consult,
            p.plan,
            p.ingest,
            m.memory.access_state,
            m.memory.worker_ctx,
            m.memory.buffer,
            m.memory.total
        );
    }
    s
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_COLUMNS}\n");
    for r in rows {
        let method = match r.method {
            Method::Greedy => "greedy",
            Method::KarmarkarKarp => "kk",
        };
        let _ = writeln!(
            s,
            "{},{method},{},{},{},{},{}",
            r.level, r.trials, r.vanilla_max_mean, r.balanced_max_mean, r.speedup, r.le_greedy
        );
    }
    s
}

/// Write report files for `frame` into `dir`; returns the written paths.
pub fn report(frame: &MetricsFrame, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        for (name, body) in [("microbatches.csv", microbatches_csv(frame)), ("steps.csv", steps_csv(frame))] {
            let p = dir.join(name);
            fs::write(&p, body)?;
            out.push(p);
        }
    }
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let p = dir.join("metrics.json");
        fs::write(&p, frame.to_json())?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_text_hits_short_share() {
        let d = LengthDist::caption_text();
        assert!((d.cdf(64.0) - SHORT_TEXT_SHARE).abs() < 1e-9);
        let LengthDist::Lognormal { sigma, .. } = d else { panic!() };
        assert!((sigma - 0.5508).abs() < 1e-3);
    }

    #[test]
    fn lognormal_mean_within_five_percent() {
        let spec = SyntheticSourceSpec::text_only(0, 100_000, LengthDist::Lognormal { mu: 3.0, sigma: 0.55 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| spec.text_len.draw(&mut rng)).sum::<f64>() / n as f64;
        let exact = spec.text_len.mean().unwrap();
        assert!((mean - exact).abs() / exact < 0.05);
        let (_, ks) = spec.generate(3).unwrap();
        let ks = ks.unwrap();
        assert!(ks.statistic <= ks.critical);
    }

    #[test]
    fn ks_flags_a_wrong_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wrong = LengthDist::Lognormal { mu: 3.5, sigma: 0.55 };
        let mut xs: Vec<f64> = (0..2000).map(|_| wrong.draw(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let d = LengthDist::caption_text();
        assert!(ks_statistic(&xs, |x| d.cdf(x)) > ks_critical(xs.len()));
    }

    #[test]
    fn empirical_and_pareto_cdfs() {
        let e = LengthDist::Empirical {
            bins: vec![
                HistBin {
                    lo: 0.0,
                    hi: 10.0,
                    weight: 1.0,
                },
                HistBin {
                    lo: 10.0,
                    hi: 20.0,
                    weight: 3.0,
                },
            ],
        };
        assert!((e.cdf(10.0) - 0.25).abs() < 1e-12);
        assert!((e.cdf(15.0) - 0.625).abs() < 1e-12);
        assert_eq!(e.mean(), Some(0.25 * 5.0 + 0.75 * 15.0));
        let p = LengthDist::Pareto { scale: 2.0, shape: 3.0 };
        assert!((p.cdf(4.0) - (1.0 - 0.125)).abs() < 1e-12);
        assert_eq!(LengthDist::Pareto { scale: 1.0, shape: 1.0 }.mean(), None);
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSourceSpec::text_only(0, 10, LengthDist::caption_text());
        let a = gen_sources(std::slice::from_ref(&spec), 9, &dir.path().join("a")).unwrap();
        let b = gen_sources(&[spec], 9, &dir.path().join("b")).unwrap();
        assert_eq!(a.shards[0].records, 10);
        assert_eq!(a.shards[0].sha256, b.shards[0].sha256);
        verify_manifest(&dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a").join("source-000.bin"), b"junk").unwrap();
        assert!(verify_manifest(&dir.path().join("a")).is_err());
    }

    #[test]
    fn uniform_costs_give_unit_speedup() {
        let cfg = BenchConfig {
            trials: 5,
            levels: vec![SkewLevel::single("flat", LengthDist::Constant { value: 100.0 })],
            ..BenchConfig::default()
        };
        let rows = bench_balance(&cfg, &[Method::KarmarkarKarp]).unwrap();
        assert!((rows[0].speedup - 1.0).abs() < 1e-9);
        assert!((rows[0].vanilla_max_mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn skewed_fixture_runs() {
        let docs = LengthDist::Lognormal { mu: 7.0, sigma: 1.0 };
        let run = |choice| {
            let cfg = skewed_fixture(choice, docs.clone(), 2, 1);
            let out = run_sim(&cfg, &SimOptions::default()).unwrap();
            assert_eq!(out.frame.summary.delivered_samples, 2 * 512);
            out.frame.summary
        };
        let vanilla = run(StrategyChoice::Vanilla);
        let hybrid = run(StrategyChoice::Hybrid);
        assert!(vanilla.mean_flops_max_min >= 3.0);
        assert!(hybrid.mean_flops_max_mean <= 1.3);
        assert!(hybrid.mean_t_iter < vanilla.mean_t_iter);
    }

    #[test]
    fn empty_frame_reports_headers_only() {
        let frame = MetricsFrame {
            config_digest: String::new(),
            seed: 0,
            strategy: "vanilla".into(),
            microbatches: vec![],
            steps: vec![],
            summary: Summary::default(),
        };
        assert_eq!(microbatches_csv(&frame), format!("{MB_COLUMNS}\n"));
        assert_eq!(steps_csv(&frame), format!("{STEP_COLUMNS}\n"));
    }
}
