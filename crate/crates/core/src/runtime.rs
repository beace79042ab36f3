//! Actor runtime: the pull workflow, failure detection, shadow failover,
//! checkpoints and reshard handling. Time is counted in logical ticks.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constructor::{decode_payload, encode_payload, ConstructorConfig, DataConstructor, PayloadKind, RankPayload, Served};
use crate::dgraph::{DGraph, EdgeKind, Producer, SampleState};
use crate::error::{Error, Result};
use crate::loader::{seal, transform_split, unseal, LoaderCheckpoint, LoaderConfig, MemoryLedger, PlanYield, PreparedSample, SourceLoader, Storage};
use crate::model::{ParallelismConfig, SampleId, SampleMeta, SourceId, SourceSpec};
use crate::orchestration::{Primitive, Strategy};
use crate::place_tree::{Axis, ClientPlaceTree, Coord, Rank};
use crate::planner::{gather_buffer_summaries, replan, summary_latency, LoaderId, LoadingPlan, Planner, PlannerCheckpoint, SummarySource};
use crate::rng::keyed_unit;

pub type Tick = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Request,
    Fetch,
    Consult,
    Plan,
    Ingest,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Request, Phase::Fetch, Phase::Consult, Phase::Plan, Phase::Ingest];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Request => "request",
            Phase::Fetch => "fetch",
            Phase::Consult => "consult",
            Phase::Plan => "plan",
            Phase::Ingest => "ingest",
        }
    }
}

/// Bounded FIFO task queue of one actor.
#[derive(Debug, Clone)]
pub struct Mailbox<T> {
    queue: VecDeque<T>,
    capacity: usize,
    threshold: usize,
}

impl<T> Mailbox<T> {
    /// Senders see backpressure once `threshold` messages are queued and are
    /// refused at `capacity`.
    pub fn new(capacity: usize, threshold: usize) -> Self {
        Self {
            queue: VecDeque::new(),
            capacity: capacity.max(1),
            threshold: threshold.min(capacity).max(1),
        }
    }

    pub fn send(&mut self, msg: T) -> Result<()> {
        if self.queue.len() >= self.capacity {
            return Err(Error::MailboxFull(self.capacity));
        }
        self.queue.push_back(msg);
        Ok(())
    }

    pub fn recv(&mut self) -> Option<T> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn backpressured(&self) -> bool {
        self.queue.len() >= self.threshold
    }
}

/// One scripted failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    /// The loader finishes the step's plan, snapshots, then dies.
    KillAfterSnapshot { source: SourceId, shard: u32, step: u64 },
    /// The loader dies while executing the step's plan.
    KillMidPlan { source: SourceId, shard: u32, step: u64 },
    /// The loader's yield for the step arrives without end-of-stream.
    DropEos { source: SourceId, shard: u32, step: u64 },
    /// The loader's yield for the step arrives `ticks` late.
    Delay {
        source: SourceId,
        shard: u32,
        step: u64,
        ticks: Tick,
    },
    /// The first payload sent to `rank` in the step has a damaged header.
    CorruptPayload { rank: Rank, step: u64 },
}

impl Fault {
    pub fn step(&self) -> u64 {
        match self {
            Fault::KillAfterSnapshot { step, .. }
            | Fault::KillMidPlan { step, .. }
            | Fault::DropEos { step, .. }
            | Fault::Delay { step, .. }
            | Fault::CorruptPayload { step, .. } => *step,
        }
    }

    pub fn loader(&self) -> Option<LoaderId> {
        match self {
            Fault::KillAfterSnapshot { source, shard, .. }
            | Fault::KillMidPlan { source, shard, .. }
            | Fault::DropEos { source, shard, .. }
            | Fault::Delay { source, shard, .. } => Some(LoaderId {
                source: *source,
                shard: *shard,
            }),
            Fault::CorruptPayload { .. } => None,
        }
    }
}

/// Fault script file: `{"faults": [{"fault": "kill_mid_plan", "source": 0,
/// "shard": 0, "step": 7}, ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScript {
    #[serde(default)]
    pub faults: Vec<Fault>,
}

impl FaultScript {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("fault script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Mid-plan kills drawn independently per loader and step with mean
    /// time between failures `mtbf` steps.
    pub fn random(seed: u64, steps: u64, loaders: &[LoaderId], mtbf: f64) -> Self {
        let p = if mtbf > 0.0 { 1.0 / mtbf } else { 0.0 };
        let mut faults = Vec::new();
        for step in 1..steps {
            for l in loaders {
                if keyed_unit(seed, &[0xFA17, step, u64::from(l.source), u64::from(l.shard)]) < p {
                    faults.push(Fault::KillMidPlan {
                        source: l.source,
                        shard: l.shard,
                        step,
                    });
                }
            }
        }
        Self { faults }
    }
}

/// Fires each scripted fault at most once.
#[derive(Debug, Clone, Default)]
pub struct FaultInjector {
    faults: Vec<(Fault, bool)>,
}

impl FaultInjector {
    pub fn new(script: FaultScript) -> Self {
        Self {
            faults: script.faults.into_iter().map(|f| (f, false)).collect(),
        }
    }

    pub fn take_loader(&mut self, loader: LoaderId, step: u64) -> Option<Fault> {
        let (f, fired) = self
            .faults
            .iter_mut()
            .find(|(f, fired)| !*fired && f.step() == step && f.loader() == Some(loader))?;
        *fired = true;
        Some(f.clone())
    }

    pub fn take_payload(&mut self, rank: Rank, step: u64) -> bool {
        match self
            .faults
            .iter_mut()
            .find(|(f, fired)| !*fired && matches!(f, Fault::CorruptPayload { rank: r, step: s } if *r == rank && *s == step))
        {
            Some((_, fired)) => {
                *fired = true;
                true
            }
            None => false,
        }
    }

    pub fn unfired(&self) -> usize {
        self.faults.iter().filter(|(_, fired)| !fired).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "evidence", rename_all = "snake_case")]
pub enum Evidence {
    Timeout { loader: LoaderId, plan_id: u64, waited: Tick },
    MissingEos { loader: LoaderId, plan_id: u64 },
    MalformedHeader { rank: Rank, plan_id: u64, reason: String },
}

/// What the runtime saw while waiting on a loader.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub loader: LoaderId,
    pub plan_id: u64,
    /// Ticks spent waiting for the reply beyond normal processing.
    pub waited: Tick,
    pub reply: Option<&'a PlanYield>,
}

pub fn detect_failure(obs: &Observation, timeout: Tick) -> Option<Evidence> {
    match obs.reply {
        _ if obs.waited > timeout => Some(Evidence::Timeout {
            loader: obs.loader,
            plan_id: obs.plan_id,
            waited: timeout,
        }),
        None => Some(Evidence::Timeout {
            loader: obs.loader,
            plan_id: obs.plan_id,
            waited: timeout,
        }),
        Some(y) if !y.end_of_stream || y.plan_id != obs.plan_id => Some(Evidence::MissingEos {
            loader: obs.loader,
            plan_id: obs.plan_id,
        }),
        Some(_) => None,
    }
}

/// Decode a payload received by `rank`, turning damage into evidence.
pub fn inspect_payload(rank: Rank, plan_id: u64, bytes: &[u8]) -> std::result::Result<RankPayload, Evidence> {
    decode_payload(bytes).map_err(|e| Evidence::MalformedHeader {
        rank,
        plan_id,
        reason: e.to_string(),
    })
}

/// Write-ahead checkpoint directory, optionally mirrored on disk:
/// `planner/NNN.ckpt`, `loader-S-H/NNN.ckpt` (source S, shard H) and the
/// append-only `plan-log` holding one canonical JSON plan per line.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    root: Option<PathBuf>,
    files: BTreeMap<String, Vec<u8>>,
    log: Vec<LoadingPlan>,
}

pub const PLAN_LOG: &str = "plan-log";

impl CheckpointStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Start an empty store under `root`.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if root.exists() {
            fs::remove_dir_all(&root)?;
        }
        fs::create_dir_all(&root)?;
        fs::write(root.join(PLAN_LOG), b"")?;
        Ok(Self {
            root: Some(root),
            ..Self::default()
        })
    }

    /// Load an existing store read-only.
    pub fn open(root: &Path) -> Result<Self> {
        let mut store = Self::default();
        for dir in fs::read_dir(root)? {
            let dir = dir?;
            if !dir.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(dir.path())? {
                let f = f?;
                let key = format!("{}/{}", dir.file_name().to_string_lossy(), f.file_name().to_string_lossy());
                store.files.insert(key, fs::read(f.path())?);
            }
        }
        let log = fs::read_to_string(root.join(PLAN_LOG))?;
        for (i, line) in log.lines().enumerate() {
            let plan: LoadingPlan = serde_json::from_str(line).map_err(|e| Error::CorruptCheckpoint {
                path: format!("{}:{}", root.join(PLAN_LOG).display(), i + 1),
                reason: e.to_string(),
            })?;
            store.log.push(plan);
        }
        Ok(store)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn planner_key(plan_id: u64) -> String {
        format!("planner/{plan_id:03}.ckpt")
    }

    pub fn loader_dir(id: LoaderId) -> String {
        format!("loader-{}-{}", id.source, id.shard)
    }

    pub fn loader_key(id: LoaderId, plan_id: u64) -> String {
        format!("{}/{plan_id:03}.ckpt", Self::loader_dir(id))
    }

    pub fn put(&mut self, key: &str, bytes: Vec<u8>) -> Result<()> {
        if let Some(root) = &self.root {
            let path = root.join(key);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, &bytes)?;
        }
        self.files.insert(key.to_string(), bytes);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.files.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    /// Highest-numbered checkpoint in `dir`.
    pub fn latest(&self, dir: &str) -> Option<(String, &[u8])> {
        let prefix = format!("{dir}/");
        self.files
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .filter_map(|(k, v)| {
                let n: u64 = k[prefix.len()..].strip_suffix(".ckpt")?.parse().ok()?;
                Some((n, k, v))
            })
            .max_by_key(|(n, _, _)| *n)
            .map(|(_, k, v)| (k.clone(), v.as_slice()))
    }

    pub fn append_plan(&mut self, plan: &LoadingPlan) -> Result<()> {
        if let Some(root) = &self.root {
            let mut f = fs::OpenOptions::new().append(true).open(root.join(PLAN_LOG))?;
            f.write_all(&plan.to_canonical_json())?;
            f.write_all(b"\n")?;
        }
        self.log.push(plan.clone());
        Ok(())
    }

    pub fn plan_log(&self) -> &[LoadingPlan] {
        &self.log
    }

    pub fn loader_checkpoint(&self, id: LoaderId) -> Result<LoaderCheckpoint> {
        let (key, bytes) = self
            .latest(&Self::loader_dir(id))
            .ok_or_else(|| Error::Integrity(format!("no checkpoint for loader {id:?}")))?;
        unseal(bytes, &key)
    }

    pub fn planner_checkpoint(&self) -> Result<Option<PlannerCheckpoint>> {
        self.latest("planner").map(|(_, b)| PlannerCheckpoint::from_bytes(b)).transpose()
    }
}

/// Hot-standby loader mirroring the primary's snapshots.
pub struct Shadow {
    loader: SourceLoader,
    mirrored: Option<LoaderCheckpoint>,
}

#[derive(Default)]
pub struct ShadowRegistry {
    shadows: BTreeMap<LoaderId, Vec<Shadow>>,
}

impl ShadowRegistry {
    pub fn add(&mut self, loader: SourceLoader) {
        self.shadows.entry(loader.id()).or_default().push(Shadow {
            loader,
            mirrored: None,
        });
    }

    pub fn mirror(&mut self, ckpt: &LoaderCheckpoint) {
        for s in self.shadows.get_mut(&ckpt.loader).into_iter().flatten() {
            s.mirrored = Some(ckpt.clone());
        }
    }

    pub fn count(&self, id: LoaderId) -> usize {
        self.shadows.get(&id).map_or(0, Vec::len)
    }

    /// Restore the first standby from its mirrored snapshot, replay `log`
    /// past it and hand it over. Returns the number of replayed plans.
    pub fn promote(&mut self, id: LoaderId, log: &[LoadingPlan]) -> Result<Option<(SourceLoader, usize)>> {
        let Some(list) = self.shadows.get_mut(&id) else {
            return Ok(None);
        };
        if list.is_empty() {
            return Ok(None);
        }
        let Shadow { mut loader, mirrored } = list.remove(0);
        let ckpt = mirrored.ok_or_else(|| Error::Integrity(format!("shadow of {id:?} has no snapshot")))?;
        let replayed = loader.restore(&ckpt, log)?.len();
        Ok(Some((loader, replayed)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TickModel {
    pub hop: Tick,
    pub per_entry: Tick,
    /// Summary coalescing fan-in.
    pub group_size: usize,
    pub ticks_per_sec: f64,
    pub bytes_per_tick: u64,
    /// Planned samples per tick.
    pub plan_rate: u64,
    pub cold_restart: Tick,
}

impl Default for TickModel {
    fn default() -> Self {
        Self {
            hop: 1,
            per_entry: 1,
            group_size: 4,
            ticks_per_sec: 1000.0,
            bytes_per_tick: 1 << 16,
            plan_rate: 256,
            cold_restart: 100,
        }
    }
}

impl TickModel {
    fn secs(&self, s: f64) -> Tick {
        (s * self.ticks_per_sec).ceil() as Tick
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    /// Plans between planner checkpoints (k_p).
    pub planner_interval: u64,
    /// Plans between loader checkpoints (k_l), a multiple of k_p.
    pub loader_interval: u64,
    pub timeout: Tick,
    /// Plans prepared ahead of the client.
    pub prefetch: usize,
    pub mailbox_capacity: usize,
    /// Hot standbys per loader.
    pub shadows: usize,
    pub constructor: ConstructorConfig,
    pub ticks: TickModel,
    /// Last step to plan for; prefetch stops there.
    pub horizon: Option<u64>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            planner_interval: 1,
            loader_interval: 5,
            timeout: 50,
            prefetch: 2,
            mailbox_capacity: 1024,
            shadows: 1,
            constructor: ConstructorConfig::default(),
            ticks: TickModel::default(),
            horizon: None,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planner_interval == 0 || self.loader_interval == 0 {
            return Err(Error::InvalidConfig("checkpoint intervals must be positive".into()));
        }
        if self.loader_interval % self.planner_interval != 0 {
            return Err(Error::InvalidConfig(format!(
                "loader interval {} is not a multiple of planner interval {}",
                self.loader_interval, self.planner_interval
            )));
        }
        if self.timeout == 0 || self.prefetch == 0 || self.mailbox_capacity == 0 {
            return Err(Error::InvalidConfig("timeout, prefetch and mailbox capacity must be positive".into()));
        }
        if self.ticks.ticks_per_sec <= 0.0 || self.ticks.bytes_per_tick == 0 || self.ticks.plan_rate == 0 {
            return Err(Error::InvalidConfig("tick model rates must be positive".into()));
        }
        Ok(())
    }
}

/// One payload as received by a rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub step: u64,
    pub plan_id: u64,
    pub rank: Rank,
    pub coord: Coord,
    pub bucket: u32,
    pub mb_index: u32,
    pub kind: PayloadKind,
    pub samples: Vec<SampleId>,
    pub seq_lens: Vec<u32>,
    pub images: Vec<(SampleId, u32)>,
    pub bytes: u64,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RuntimeEvent {
    Failover {
        step: u64,
        loader: LoaderId,
        evidence: Evidence,
        replayed: usize,
        cold: bool,
    },
    Reshard {
        step: u64,
        from: ParallelismConfig,
        to: ParallelismConfig,
        replanned: usize,
    },
    PayloadRetry { step: u64, evidence: Evidence },
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub plan_id: u64,
    /// Critical-path ticks per phase, in [`Phase::ALL`] order.
    pub phases: [Tick; 5],
    pub deliveries: Vec<Delivery>,
    pub graphs: Vec<DGraph>,
    /// Metadata of every sample planned for the step.
    pub metas: Vec<SampleMeta>,
    pub pad_tokens: u64,
}

impl StepReport {
    /// Sample ids of every microbatch, once per microbatch.
    pub fn delivered_samples(&self) -> Vec<SampleId> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for d in self.deliveries.iter().filter(|d| d.kind == PayloadKind::Full) {
            if seen.insert((d.bucket, d.mb_index)) {
                out.extend_from_slice(&d.samples);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshardAck {
    pub noop: bool,
    pub replanned: usize,
    pub released: usize,
}

/// Check that every sample either finished the whole lifecycle or was
/// never selected.
pub fn audit_lineage(g: &DGraph) -> Result<()> {
    g.verify()?;
    for &id in g.samples() {
        let lineage = g.lineage(id)?;
        let ok = lineage == SampleState::ALL || lineage == [SampleState::Buffered];
        if !ok {
            return Err(Error::Integrity(format!("sample {id} has lineage {lineage:?}")));
        }
    }
    Ok(())
}

struct Parcel {
    samples: Vec<PreparedSample>,
}

struct Ready {
    plan: LoadingPlan,
    graphs: Vec<DGraph>,
    prepared: HashMap<SampleId, PreparedSample>,
    ticks: [Tick; 3],
}

struct LoaderSlot {
    loader: SourceLoader,
    alive: bool,
}

/// Primary data path layout of `strategy`.
pub fn primary_layout(strategy: &Strategy) -> Result<(Axis, usize)> {
    strategy
        .modules
        .first()
        .and_then(|m| {
            m.pipeline.iter().find_map(|p| match p {
                Primitive::Distribute { axis, group_size } => Some((*axis, *group_size)),
                _ => None,
            })
        })
        .ok_or_else(|| Error::InvalidConfig("strategy has no distributed primary module".into()))
}

fn build_constructors(strategy: &Strategy, tree: &ClientPlaceTree, cfg: ConstructorConfig) -> Result<Vec<DataConstructor>> {
    let (axis, group) = primary_layout(strategy)?;
    let buckets = tree.pipeline_buckets(axis, group)?;
    buckets
        .buckets
        .into_iter()
        .enumerate()
        .map(|(i, ranks)| DataConstructor::new(i as u32, tree, ranks, cfg))
        .collect()
}

/// The deployed service: loaders, shadows, constructors and the planner.
pub struct Runtime {
    cfg: RuntimeConfig,
    planner: Planner,
    storage: Arc<dyn Storage>,
    specs: BTreeMap<LoaderId, (SourceSpec, LoaderConfig)>,
    loaders: BTreeMap<LoaderId, LoaderSlot>,
    shadows: ShadowRegistry,
    constructors: Vec<DataConstructor>,
    mailboxes: Vec<Mailbox<Parcel>>,
    store: CheckpointStore,
    injector: FaultInjector,
    ready: VecDeque<Ready>,
    next_step: u64,
    clock: Tick,
    events: Vec<RuntimeEvent>,
    reshards: BTreeMap<u64, ParallelismConfig>,
    expected: Option<Vec<LoadingPlan>>,
}

impl Runtime {
    pub fn new(
        planner: Planner,
        sources: Vec<(SourceSpec, LoaderConfig)>,
        storage: Arc<dyn Storage>,
        cfg: RuntimeConfig,
        store: CheckpointStore,
        script: FaultScript,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut specs = BTreeMap::new();
        let mut loaders = BTreeMap::new();
        let mut shadows = ShadowRegistry::default();
        for (spec, lc) in sources {
            let mut loader = SourceLoader::new(spec.clone(), lc, storage.as_ref())?;
            loader.refill()?;
            let id = loader.id();
            if specs.insert(id, (spec.clone(), lc)).is_some() {
                return Err(Error::InvalidConfig(format!("loader {id:?} is declared twice")));
            }
            for _ in 0..cfg.shadows {
                shadows.add(SourceLoader::new(spec.clone(), lc, storage.as_ref())?);
            }
            loaders.insert(id, LoaderSlot { loader, alive: true });
        }
        if loaders.is_empty() {
            return Err(Error::InvalidConfig("no sources configured".into()));
        }
        let constructors = build_constructors(planner.strategy(), planner.tree(), cfg.constructor)?;
        let mailboxes = constructors
            .iter()
            .map(|_| Mailbox::new(cfg.mailbox_capacity, cfg.mailbox_capacity * 3 / 4))
            .collect();
        let mut rt = Self {
            cfg,
            planner,
            storage,
            specs,
            loaders,
            shadows,
            constructors,
            mailboxes,
            store,
            injector: FaultInjector::default(),
            ready: VecDeque::new(),
            next_step: 0,
            clock: 0,
            events: Vec::new(),
            reshards: BTreeMap::new(),
            expected: None,
        };
        let ids: Vec<LoaderId> = rt.loaders.keys().copied().collect();
        for id in ids {
            rt.snapshot(id)?;
        }
        let ckpt = rt.planner.checkpoint();
        rt.store.put(&CheckpointStore::planner_key(0), ckpt.to_bytes())?;
        rt.injector = FaultInjector::new(script);
        Ok(rt)
    }

    /// Check every generated plan against a previously recorded log.
    pub fn expect_plans(&mut self, log: Vec<LoadingPlan>) {
        self.expected = Some(log);
    }

    pub fn tree(&self) -> &ClientPlaceTree {
        self.planner.tree()
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn store(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn events(&self) -> &[RuntimeEvent] {
        &self.events
    }

    pub fn clock(&self) -> Tick {
        self.clock
    }

    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    pub fn constructors(&self) -> &[DataConstructor] {
        &self.constructors
    }

    pub fn shadow_count(&self, id: LoaderId) -> usize {
        self.shadows.count(id)
    }

    pub fn loader_ids(&self) -> Vec<LoaderId> {
        self.loaders.keys().copied().collect()
    }

    pub fn loader(&self, id: LoaderId) -> Option<&SourceLoader> {
        self.loaders.get(&id).map(|s| &s.loader)
    }

    pub fn ledger(&self) -> MemoryLedger {
        MemoryLedger {
            entries: self.loaders.values().map(|s| s.loader.ledger_entry()).collect(),
        }
    }

    /// Queue a topology change to apply before step `step` is served.
    pub fn schedule_reshard(&mut self, step: u64, config: ParallelismConfig) {
        self.reshards.insert(step, config);
    }

    fn snapshot(&mut self, id: LoaderId) -> Result<()> {
        let ckpt = self.loaders[&id].loader.checkpoint();
        self.store.put(&CheckpointStore::loader_key(id, ckpt.last_plan_id), seal(&ckpt))?;
        self.shadows.mirror(&ckpt);
        Ok(())
    }

    fn failover(&mut self, id: LoaderId, evidence: Evidence, step: u64) -> Result<Tick> {
        tracing::warn!(?id, ?evidence, "loader failed");
        let log = self.store.plan_log().to_vec();
        let (loader, replayed, cold) = match self.shadows.promote(id, &log)? {
            Some((loader, replayed)) => (loader, replayed, false),
            None => {
                let (spec, lc) = self.specs[&id].clone();
                let mut loader = SourceLoader::new(spec, lc, self.storage.as_ref())?;
                let ckpt = self.store.loader_checkpoint(id)?;
                let replayed = loader.restore(&ckpt, &log)?.len();
                (loader, replayed, true)
            }
        };
        self.loaders.insert(id, LoaderSlot { loader, alive: true });
        self.events.push(RuntimeEvent::Failover {
            step,
            loader: id,
            evidence,
            replayed,
            cold,
        });
        let t = &self.cfg.ticks;
        Ok(if cold { t.cold_restart } else { t.hop } + replayed as Tick * t.hop)
    }

    /// Fail over every loader that stopped answering.
    fn heal(&mut self, step: u64) -> Result<Tick> {
        let dead: Vec<LoaderId> = self.loaders.iter().filter(|(_, s)| !s.alive).map(|(id, _)| *id).collect();
        let mut ticks = 0;
        for id in dead {
            let evidence = Evidence::Timeout {
                loader: id,
                plan_id: self.loaders[&id].loader.last_plan_id() + 1,
                waited: self.cfg.timeout,
            };
            ticks = ticks.max(self.cfg.timeout + self.failover(id, evidence, step)?);
        }
        Ok(ticks)
    }

    /// Run the plan for the loader under an optional scripted fault.
    /// Returns the reply, compute ticks and extra waiting ticks.
    fn execute(&mut self, id: LoaderId, plan: &LoadingPlan, fault: Option<Fault>) -> Result<(Option<PlanYield>, Tick, Tick)> {
        let ticks = self.cfg.ticks;
        let slot = self.loaders.get_mut(&id).expect("known loader");
        if !slot.alive {
            return Ok((None, 0, self.cfg.timeout + 1));
        }
        let before = slot.loader.busy_secs();
        let y = slot.loader.apply_plan(plan)?;
        let busy = ticks.secs(slot.loader.busy_secs() - before);
        Ok(match fault {
            None | Some(Fault::CorruptPayload { .. }) => (Some(y), busy, 0),
            Some(Fault::KillMidPlan { .. }) => {
                slot.alive = false;
                (None, busy, self.cfg.timeout + 1)
            }
            Some(Fault::KillAfterSnapshot { .. }) => {
                self.snapshot(id)?;
                self.loaders.get_mut(&id).expect("known loader").alive = false;
                (Some(y), busy, 0)
            }
            Some(Fault::DropEos { .. }) => {
                let mut y = y;
                y.end_of_stream = false;
                (Some(y), busy, 0)
            }
            Some(Fault::Delay { ticks, .. }) => (Some(y), busy, ticks),
        })
    }

    /// Steps ③–⑤ for the next step: consult loaders, synthesize a plan,
    /// ingest, and assemble at the constructors.
    fn produce(&mut self) -> Result<()> {
        let step = self.planner.step();
        let t = self.cfg.ticks;
        let mut consult = self.heal(step)?;
        let summaries = gather_buffer_summaries(self.loaders.values().map(|s| &s.loader as &dyn SummarySource))?;
        consult += summary_latency(summaries.len(), t.group_size, t.hop, t.per_entry);

        let out = self.planner.next_plan(&summaries)?;
        let plan = out.plan;
        if let Some(expected) = &self.expected {
            let idx = (plan.plan_id - 1) as usize;
            match expected.get(idx) {
                Some(e) if e.to_canonical_json() == plan.to_canonical_json() => {}
                _ => {
                    return Err(Error::Integrity(format!(
                        "plan {} differs from the recorded plan log",
                        plan.plan_id
                    )))
                }
            }
        }
        self.store.append_plan(&plan)?;
        if plan.plan_id % self.cfg.planner_interval == 0 {
            let ckpt = self.planner.checkpoint();
            self.store.put(&CheckpointStore::planner_key(plan.plan_id), ckpt.to_bytes())?;
        }
        let planning = t.hop + plan.metas.len() as Tick / t.plan_rate;

        let mut ingest = 0;
        let ids: Vec<LoaderId> = self.loaders.keys().copied().collect();
        for id in &ids {
            let fault = self.injector.take_loader(*id, step);
            let (reply, busy, waited) = self.execute(*id, &plan, fault)?;
            let obs = Observation {
                loader: *id,
                plan_id: plan.plan_id,
                waited,
                reply: reply.as_ref(),
            };
            let (y, ticks) = match detect_failure(&obs, self.cfg.timeout) {
                None => (reply.expect("healthy reply"), busy + waited),
                Some(evidence) => {
                    let wait = match evidence {
                        Evidence::Timeout { waited, .. } => waited,
                        _ => t.hop,
                    };
                    let recover = self.failover(*id, evidence, step)?;
                    let slot = self.loaders.get_mut(id).expect("promoted loader");
                    (slot.loader.execute_plan_slice(&plan)?, busy + wait + recover)
                }
            };
            ingest = ingest.max(ticks);
            let mut by_constructor: BTreeMap<u32, Vec<PreparedSample>> = BTreeMap::new();
            for s in y.staged {
                by_constructor.entry(s.constructor).or_default().push(s.sample);
            }
            for (c, samples) in by_constructor {
                let mb = self
                    .mailboxes
                    .get_mut(c as usize)
                    .ok_or_else(|| Error::Integrity(format!("yield routed to unknown constructor {c}")))?;
                mb.send(Parcel { samples })?;
            }
        }
        if plan.plan_id % self.cfg.loader_interval == 0 {
            for id in &ids {
                if self.loaders[id].alive {
                    self.snapshot(*id)?;
                }
            }
        }

        let mut per_constructor: Vec<HashMap<SampleId, PreparedSample>> = vec![HashMap::new(); self.constructors.len()];
        let mut prepared = HashMap::new();
        for (c, mb) in self.mailboxes.iter_mut().enumerate() {
            while let Some(parcel) = mb.recv() {
                for s in parcel.samples {
                    prepared.insert(s.meta.sample_id, s.clone());
                    per_constructor[c].insert(s.meta.sample_id, s);
                }
            }
        }
        let mut graphs = out.graphs;
        self.assemble(&plan, &mut graphs, &per_constructor, &prepared)?;
        self.ready.push_back(Ready {
            plan,
            graphs,
            prepared,
            ticks: [consult, planning, ingest],
        });
        Ok(())
    }

    fn assemble(
        &mut self,
        plan: &LoadingPlan,
        graphs: &mut [DGraph],
        per_constructor: &[HashMap<SampleId, PreparedSample>],
        prepared: &HashMap<SampleId, PreparedSample>,
    ) -> Result<()> {
        for (c, samples) in self.constructors.iter_mut().zip(per_constructor) {
            c.receive(plan, samples, prepared)?;
        }
        for g in graphs.iter_mut() {
            advance_all(g, SampleState::Binned, SampleState::Assembled, EdgeKind::Transformation)?;
        }
        Ok(())
    }

    /// Seconds of deferred image work charged to constructors for a plan.
    fn deferred_secs(&self, plan: &LoadingPlan) -> f64 {
        let mut per_c: BTreeMap<usize, f64> = BTreeMap::new();
        for bin in &plan.primary().bins {
            for id in &bin.samples {
                let Some(meta) = plan.metas.iter().find(|m| m.sample_id == *id) else { continue };
                let Some((_, (spec, lc))) = self.specs.iter().find(|(l, _)| l.source == meta.source_id) else {
                    continue;
                };
                *per_c.entry(bin.bucket).or_default() += transform_split(meta, spec.transform_cost, lc.defer_images).1;
            }
        }
        per_c.values().copied().fold(0.0, f64::max)
    }

    /// One client step: steps ①–⑤ of the pull workflow, then prefetch.
    pub fn pull_cycle(&mut self) -> Result<StepReport> {
        let step = self.next_step;
        let t = self.cfg.ticks;
        self.heal(step)?;
        if let Some(config) = self.reshards.remove(&step) {
            self.handle_reshard(config)?;
        }
        let mut phases = [t.hop, 0, 0, 0, 0];
        if self.ready.is_empty() {
            self.produce()?;
            let r = self.ready.back().expect("just produced");
            phases[2..].copy_from_slice(&r.ticks);
        }
        let mut ready = self.ready.pop_front().expect("a plan is ready");
        if ready.plan.step != step {
            return Err(Error::Integrity(format!(
                "plan {} is for step {} but step {step} was requested",
                ready.plan.plan_id, ready.plan.step
            )));
        }
        let pad_tokens = self
            .constructors
            .iter()
            .flat_map(|c| c.resident())
            .filter(|m| m.plan_id == ready.plan.plan_id)
            .map(|m| m.pad_tokens)
            .sum::<u64>();
        let (deliveries, max_bytes) = self.serve(step, &ready.plan)?;
        phases[1] = t.hop + max_bytes / t.bytes_per_tick + t.secs(self.deferred_secs(&ready.plan));
        for g in ready.graphs.iter_mut() {
            advance_all(g, SampleState::Assembled, SampleState::Delivered, EdgeKind::Null)?;
            audit_lineage(g)?;
        }
        self.clock += phases.iter().sum::<Tick>();
        self.next_step += 1;
        let horizon = self.cfg.horizon.unwrap_or(u64::MAX);
        while self.ready.len() < self.cfg.prefetch && self.planner.step() < horizon {
            self.produce()?;
        }
        Ok(StepReport {
            step,
            plan_id: ready.plan.plan_id,
            phases,
            deliveries,
            graphs: ready.graphs,
            metas: ready.plan.metas,
            pad_tokens,
        })
    }

    fn serve(&mut self, step: u64, plan: &LoadingPlan) -> Result<(Vec<Delivery>, u64)> {
        let m = self.tree().config().microbatches;
        let mut out = Vec::new();
        let mut max_bytes = 0;
        for c in self.constructors.iter_mut() {
            let mut bytes_c = 0;
            let ranks = c.ranks().to_vec();
            for _ in 0..m {
                for &r in &ranks {
                    let payload = match c.serve(r)? {
                        Served::Payload(p) => *p,
                        Served::Starved => {
                            return Err(Error::Integrity(format!("constructor {} starved rank {r} mid-step", c.id())))
                        }
                    };
                    if payload.plan_id != plan.plan_id {
                        return Err(Error::Integrity(format!(
                            "rank {r} received plan {} while serving plan {}",
                            payload.plan_id, plan.plan_id
                        )));
                    }
                    let mut bytes = encode_payload(&payload);
                    if self.injector.take_payload(r, step) {
                        bytes[0] ^= 0xFF;
                    }
                    let received = match inspect_payload(r, plan.plan_id, &bytes) {
                        Ok(p) => p,
                        Err(evidence) => {
                            self.events.push(RuntimeEvent::PayloadRetry { step, evidence });
                            bytes = encode_payload(&payload);
                            decode_payload(&bytes)?
                        }
                    };
                    bytes_c += bytes.len() as u64;
                    out.push(Delivery {
                        step,
                        plan_id: received.plan_id,
                        rank: r,
                        coord: received.coord,
                        bucket: received.bucket,
                        mb_index: received.mb_index,
                        kind: received.kind,
                        samples: received.sample_ids(),
                        seq_lens: received.seq_lens(),
                        images: received.images.clone(),
                        bytes: bytes.len() as u64,
                        hash: hex::encode(Sha256::digest(&bytes)),
                    });
                }
            }
            max_bytes = max_bytes.max(bytes_c);
        }
        Ok((out, max_bytes))
    }

    /// Apply a new trainer topology. Prepared but undelivered plans are
    /// re-binned on the new tree; loaders are unaffected.
    pub fn handle_reshard(&mut self, config: ParallelismConfig) -> Result<ReshardAck> {
        let from = *self.tree().config();
        if config == from {
            return Ok(ReshardAck {
                noop: true,
                replanned: 0,
                released: 0,
            });
        }
        let (tree, _remap) = self.tree().reshard(config)?;
        let strategy = self.planner.strategy().clone();
        let mut constructors = build_constructors(&strategy, &tree, self.cfg.constructor)?;
        let mut rebuilt = VecDeque::new();
        let mut released = 0;
        for r in &self.ready {
            let out = replan(&r.plan.metas, &strategy, &tree, r.plan.step, r.plan.plan_id)?;
            let mut per_constructor: Vec<HashMap<SampleId, PreparedSample>> = vec![HashMap::new(); constructors.len()];
            for bin in &out.plan.primary().bins {
                for id in &bin.samples {
                    let s = r
                        .prepared
                        .get(id)
                        .ok_or_else(|| Error::Integrity(format!("in-flight sample {id} has no prepared copy")))?;
                    per_constructor[bin.bucket].insert(*id, s.clone());
                    released += 1;
                }
            }
            for (c, samples) in constructors.iter_mut().zip(&per_constructor) {
                c.receive(&out.plan, samples, &r.prepared)?;
            }
            let mut graphs = out.graphs;
            for g in graphs.iter_mut() {
                advance_all(g, SampleState::Binned, SampleState::Assembled, EdgeKind::Transformation)?;
            }
            rebuilt.push_back(Ready {
                plan: out.plan,
                graphs,
                prepared: r.prepared.clone(),
                ticks: r.ticks,
            });
        }
        let replanned = rebuilt.len();
        self.mailboxes = constructors
            .iter()
            .map(|_| Mailbox::new(self.cfg.mailbox_capacity, self.cfg.mailbox_capacity * 3 / 4))
            .collect();
        self.constructors = constructors;
        self.ready = rebuilt;
        self.planner.set_tree(tree);
        self.events.push(RuntimeEvent::Reshard {
            step: self.next_step,
            from,
            to: config,
            replanned,
        });
        Ok(ReshardAck {
            noop: false,
            replanned,
            released,
        })
    }
}

fn advance_all(g: &mut DGraph, from: SampleState, to: SampleState, kind: EdgeKind) -> Result<()> {
    let ids: Vec<SampleId> = g
        .samples()
        .iter()
        .copied()
        .filter(|id| g.state(*id).map(|s| s == from).unwrap_or(false))
        .collect();
    for id in ids {
        let producer = g.binding(id).map(Producer::Constructor);
        g.advance(&[id], to, kind, producer)?;
    }
    g.verify()
}
