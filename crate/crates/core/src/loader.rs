//! Source Loader actors: storage access, read buffer, transformation pool,
//! checkpoints and the memory ledger.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{SampleId, SampleMeta, SourceSpec};
use crate::planner::{Allocation, BufferSummary, LoaderId, LoadingPlan, SummarySource};
use crate::rng::keyed_u64;

/// Token vocabulary used for synthetic token ids.
pub const VOCAB: u64 = 32_000;

/// One decoded storage record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text_len: u32,
    pub image_patches: u32,
    #[serde(default)]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    /// `u32` little-endian length prefix, then `text_len: u32`,
    /// `image_patches: u32` and the payload bytes.
    Binary,
    /// One JSON object per line.
    Jsonl,
}

impl RecordFormat {
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => RecordFormat::Jsonl,
            _ => RecordFormat::Binary,
        }
    }
}

impl Record {
    pub fn encode(&self, format: RecordFormat) -> Vec<u8> {
        match format {
            RecordFormat::Binary => {
                let mut b = Vec::with_capacity(8 + self.payload.len());
                b.extend_from_slice(&self.text_len.to_le_bytes());
                b.extend_from_slice(&self.image_patches.to_le_bytes());
                b.extend_from_slice(&self.payload);
                b
            }
            RecordFormat::Jsonl => serde_json::to_vec(self).expect("records always serialize"),
        }
    }

    pub fn decode(format: RecordFormat, bytes: &[u8]) -> Result<Self> {
        match format {
            RecordFormat::Binary => {
                if bytes.len() < 8 {
                    return Err(Error::InvalidInput(format!("record of {} bytes is too short", bytes.len())));
                }
                let text_len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
                let image_patches = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
                Ok(Record {
                    text_len,
                    image_patches,
                    payload: bytes[8..].to_vec(),
                })
            }
            RecordFormat::Jsonl => serde_json::from_slice(bytes)
                .map_err(|e| Error::InvalidInput(format!("malformed record: {e}"))),
        }
    }
}

/// Random-access reader over one source's records.
pub trait ShardReader: Send {
    fn len(&self) -> u64;
    fn format(&self) -> RecordFormat;
    fn read(&mut self, index: u64) -> Result<Vec<u8>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Storage: Send + Sync {
    fn open(&self, uri: &str) -> Result<Box<dyn ShardReader>>;
}

struct VecReader {
    records: Arc<Vec<Vec<u8>>>,
    format: RecordFormat,
}

impl ShardReader for VecReader {
    fn len(&self) -> u64 {
        self.records.len() as u64
    }

    fn format(&self) -> RecordFormat {
        self.format
    }

    fn read(&mut self, index: u64) -> Result<Vec<u8>> {
        self.records
            .get(index as usize)
            .cloned()
            .ok_or_else(|| Error::Storage(format!("record {index} out of range")))
    }
}

/// Records held in process memory, keyed by uri.
#[derive(Default)]
pub struct MemoryStorage {
    sources: HashMap<String, (RecordFormat, Arc<Vec<Vec<u8>>>)>,
}

impl MemoryStorage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, uri: impl Into<String>, records: &[Record]) {
        let raw = records.iter().map(|r| r.encode(RecordFormat::Binary)).collect();
        self.sources.insert(uri.into(), (RecordFormat::Binary, Arc::new(raw)));
    }

    /// Store pre-encoded bytes, including deliberately malformed ones.
    pub fn insert_raw(&mut self, uri: impl Into<String>, format: RecordFormat, raw: Vec<Vec<u8>>) {
        self.sources.insert(uri.into(), (format, Arc::new(raw)));
    }
}

impl Storage for MemoryStorage {
    fn open(&self, uri: &str) -> Result<Box<dyn ShardReader>> {
        let (format, records) = self
            .sources
            .get(uri)
            .ok_or_else(|| Error::Storage(format!("no such source {uri}")))?;
        Ok(Box::new(VecReader {
            records: Arc::clone(records),
            format: *format,
        }))
    }
}

/// Files under a root directory; `.jsonl` files are line-delimited JSON,
/// everything else length-prefixed binary.
pub struct LocalStorage {
    root: PathBuf,
}

impl LocalStorage {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn resolve(&self, uri: &str) -> PathBuf {
        let path = uri.strip_prefix("file://").unwrap_or(uri);
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let format = RecordFormat::for_path(path);
    let mut out = Vec::new();
    for r in records {
        let body = r.encode(format);
        match format {
            RecordFormat::Binary => {
                out.extend_from_slice(&(body.len() as u32).to_le_bytes());
                out.extend_from_slice(&body);
            }
            RecordFormat::Jsonl => {
                out.extend_from_slice(&body);
                out.push(b'\n');
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn split_records(format: RecordFormat, bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    match format {
        RecordFormat::Jsonl => Ok(bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(<[u8]>::to_vec)
            .collect()),
        RecordFormat::Binary => {
            let mut out = Vec::new();
            let mut at = 0;
            while at < bytes.len() {
                if at + 4 > bytes.len() {
                    return Err(Error::Storage("truncated length prefix".into()));
                }
                let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
                at += 4;
                if at + len > bytes.len() {
                    return Err(Error::Storage("truncated record body".into()));
                }
                out.push(bytes[at..at + len].to_vec());
                at += len;
            }
            Ok(out)
        }
    }
}

impl Storage for LocalStorage {
    fn open(&self, uri: &str) -> Result<Box<dyn ShardReader>> {
        let path = self.resolve(uri);
        let bytes = fs::read(&path).map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
        let format = RecordFormat::for_path(&path);
        Ok(Box::new(VecReader {
            records: Arc::new(split_records(format, &bytes)?),
            format,
        }))
    }
}

/// A transformed sample ready for assembly.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreparedSample {
    pub meta: SampleMeta,
    pub tokens: Vec<u32>,
    pub patches: Vec<u32>,
}

impl PreparedSample {
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.meta.sample_id.to_le_bytes());
        for t in &self.tokens {
            h.update(t.to_le_bytes());
        }
        for p in &self.patches {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn payload_key(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Deterministic stand-in for tokenization and image decoding.
pub fn transform_sample(meta: &SampleMeta, record: &Record) -> PreparedSample {
    let key = payload_key(&record.payload) ^ meta.sample_id;
    let tokens = (0..record.text_len)
        .map(|j| (keyed_u64(key, &[0, u64::from(j)]) % VOCAB) as u32)
        .collect();
    let patches = (0..record.image_patches)
        .map(|j| keyed_u64(key, &[1, u64::from(j)]) as u32)
        .collect();
    PreparedSample {
        meta: *meta,
        tokens,
        patches,
    }
}

/// How transformation time is spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurnMode {
    /// Only account simulated seconds.
    #[default]
    Simulated,
    /// Block each worker for the sample's cost in wall-clock time.
    Sleep,
}

/// Transformation seconds charged to the loader and to the constructor.
/// Deferring images moves the image share to the constructor.
pub fn transform_split(meta: &SampleMeta, cost: f64, defer_images: bool) -> (f64, f64) {
    let len = meta.seq_len();
    if !defer_images || len == 0 || meta.image_patches == 0 {
        return (cost, 0.0);
    }
    let image = cost * f64::from(meta.image_patches) / f64::from(len);
    (cost - image, image)
}

/// Work-stealing pool of transformation workers.
pub struct WorkerPool {
    pool: rayon::ThreadPool,
    workers: usize,
    mode: BurnMode,
}

impl WorkerPool {
    pub fn new(workers: usize, mode: BurnMode) -> Result<Self> {
        Self::with_threads(workers, workers, mode)
    }

    /// `workers` logical workers scheduled on `threads` OS threads. Outputs
    /// and the reported makespan depend only on `workers`.
    pub fn with_threads(workers: usize, threads: usize, mode: BurnMode) -> Result<Self> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool, workers, mode })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Transform `jobs`, each charged `cost` seconds; returns outputs in
    /// input order and the simulated makespan.
    pub fn run(&self, jobs: &[(SampleMeta, Record)], cost: &[f64]) -> (Vec<PreparedSample>, f64) {
        let mode = self.mode;
        let out = self.pool.install(|| {
            jobs.par_iter()
                .zip(cost.par_iter())
                .map(|((m, r), c)| {
                    if mode == BurnMode::Sleep && *c > 0.0 {
                        std::thread::sleep(Duration::from_secs_f64(*c));
                    }
                    transform_sample(m, r)
                })
                .collect()
        });
        (out, list_schedule(cost, self.workers))
    }
}

/// Makespan of assigning jobs in order to the earliest free worker.
pub fn list_schedule(costs: &[f64], workers: usize) -> f64 {
    let mut free = vec![0.0f64; workers.max(1)];
    for c in costs {
        let (i, _) = free
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("at least one worker");
        free[i] += c;
    }
    free.into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoaderConfig {
    pub shard: u32,
    /// Actors sharing the source; shard `s` owns records `s, s+a, s+2a, ...`.
    pub actors: u32,
    pub workers: u32,
    /// OS threads backing the workers; 0 uses one per worker.
    #[serde(default)]
    pub threads: u32,
    pub capacity: usize,
    /// Fail on malformed records instead of skipping them.
    pub strict: bool,
    /// Transform at ingest rather than at pop.
    pub eager: bool,
    pub defer_images: bool,
    pub burn: BurnMode,
    pub worker_ctx_bytes: u64,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            shard: 0,
            actors: 1,
            workers: 1,
            threads: 0,
            capacity: 64,
            strict: false,
            eager: false,
            defer_images: false,
            burn: BurnMode::Simulated,
            worker_ctx_bytes: 256 << 20,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    meta: SampleMeta,
    record: Record,
    prepared: Option<PreparedSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestDelta {
    pub added: Vec<SampleId>,
    pub skipped: u64,
    pub end_of_stream: bool,
}

/// One sample staged toward its constructor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staged {
    pub constructor: u32,
    pub sample: PreparedSample,
}

/// Output of one plan slice. A complete yield ends with `end_of_stream`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanYield {
    pub plan_id: u64,
    pub loader: LoaderId,
    pub staged: Vec<Staged>,
    pub end_of_stream: bool,
}

const YIELD_CACHE: usize = 16;

/// Per-shard loader actor state.
pub struct SourceLoader {
    spec: SourceSpec,
    cfg: LoaderConfig,
    reader: Box<dyn ShardReader>,
    pool: WorkerPool,
    /// Next local record position within the shard.
    cursor: u64,
    buffer: VecDeque<Slot>,
    skipped: u64,
    last_plan_id: u64,
    recent: VecDeque<PlanYield>,
    busy_secs: f64,
}

impl SourceLoader {
    pub fn new(spec: SourceSpec, cfg: LoaderConfig, storage: &dyn Storage) -> Result<Self> {
        spec.validate()?;
        if cfg.actors == 0 || cfg.shard >= cfg.actors {
            return Err(Error::InvalidConfig(format!(
                "shard {} of {} actors is invalid",
                cfg.shard, cfg.actors
            )));
        }
        let reader = storage.open(&spec.uri)?;
        let threads = if cfg.threads == 0 { cfg.workers } else { cfg.threads };
        let pool = WorkerPool::with_threads(cfg.workers as usize, threads as usize, cfg.burn)?;
        Ok(Self {
            spec,
            cfg,
            reader,
            pool,
            cursor: 0,
            buffer: VecDeque::new(),
            skipped: 0,
            last_plan_id: 0,
            recent: VecDeque::new(),
            busy_secs: 0.0,
        })
    }

    pub fn id(&self) -> LoaderId {
        LoaderId {
            source: self.spec.source_id,
            shard: self.cfg.shard,
        }
    }

    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.cfg
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn last_plan_id(&self) -> u64 {
        self.last_plan_id
    }

    pub fn busy_secs(&self) -> f64 {
        self.busy_secs
    }

    pub fn buffer_ids(&self) -> Vec<SampleId> {
        self.buffer.iter().map(|s| s.meta.sample_id).collect()
    }

    /// Records in this shard.
    fn shard_len(&self) -> u64 {
        let total = self.reader.len().min(self.spec.record_count);
        let a = u64::from(self.cfg.actors);
        let s = u64::from(self.cfg.shard);
        if total <= s {
            0
        } else {
            (total - s).div_ceil(a)
        }
    }

    fn global_index(&self, local: u64) -> u64 {
        u64::from(self.cfg.shard) + local * u64::from(self.cfg.actors)
    }

    pub fn exhausted(&self) -> bool {
        self.cursor >= self.shard_len()
    }

    fn load_slot(&mut self, index: u64) -> Result<Option<Slot>> {
        let raw = self.reader.read(index)?;
        let id = SampleMeta::compose_id(self.spec.source_id, index);
        let record = match Record::decode(self.reader.format(), &raw) {
            Ok(r) if r.text_len + r.image_patches > 0 => r,
            Ok(_) | Err(_) => {
                if self.cfg.strict {
                    return Err(Error::Integrity(format!("malformed record {index} in {}", self.spec.uri)));
                }
                tracing::debug!(source = self.spec.source_id, index, "skipping malformed record");
                return Ok(None);
            }
        };
        let meta = SampleMeta {
            sample_id: id,
            source_id: self.spec.source_id,
            text_len: record.text_len,
            image_patches: record.image_patches,
            payload_bytes: raw.len() as u64,
            step_tag: None,
        };
        Ok(Some(Slot {
            meta,
            record,
            prepared: None,
        }))
    }

    /// Append up to `n` records from the shard.
    pub fn ingest(&mut self, n: usize) -> Result<IngestDelta> {
        let mut delta = IngestDelta::default();
        let start = self.buffer.len();
        while delta.added.len() < n && !self.exhausted() {
            let index = self.global_index(self.cursor);
            self.cursor += 1;
            match self.load_slot(index)? {
                Some(slot) => {
                    delta.added.push(slot.meta.sample_id);
                    self.buffer.push_back(slot);
                }
                None => {
                    self.skipped += 1;
                    delta.skipped += 1;
                }
            }
        }
        if self.cfg.eager {
            let positions: Vec<usize> = (start..self.buffer.len()).collect();
            self.prepare(&positions);
        }
        delta.end_of_stream = self.exhausted();
        Ok(delta)
    }

    /// Top the buffer up to capacity.
    pub fn refill(&mut self) -> Result<IngestDelta> {
        let room = self.cfg.capacity.saturating_sub(self.buffer.len());
        self.ingest(room)
    }

    fn prepare(&mut self, positions: &[usize]) {
        let todo: Vec<usize> = positions
            .iter()
            .copied()
            .filter(|p| self.buffer[*p].prepared.is_none())
            .collect();
        if todo.is_empty() {
            return;
        }
        let jobs: Vec<(SampleMeta, Record)> = todo
            .iter()
            .map(|p| (self.buffer[*p].meta, self.buffer[*p].record.clone()))
            .collect();
        let costs: Vec<f64> = jobs
            .iter()
            .map(|(m, _)| transform_split(m, self.spec.transform_cost, self.cfg.defer_images).0)
            .collect();
        let (out, makespan) = self.pool.run(&jobs, &costs);
        self.busy_secs += makespan;
        for (p, prepared) in todo.into_iter().zip(out) {
            self.buffer[p].prepared = Some(prepared);
        }
    }

    pub fn summarize(&self) -> BufferSummary {
        BufferSummary {
            loader: self.id(),
            signature: format!("{}#{}/{}", self.spec.uri, self.cfg.shard, self.cfg.actors),
            metas: self.buffer.iter().map(|s| s.meta).collect(),
            end_of_stream: self.exhausted(),
        }
    }

    /// Ids from `plan` that this shard must pop, in plan order.
    pub fn pops_for(&self, plan: &LoadingPlan) -> Vec<SampleId> {
        let a = u64::from(self.cfg.actors);
        let s = u64::from(self.cfg.shard);
        plan.pops
            .get(&self.spec.source_id)
            .map(|ids| {
                ids.iter()
                    .copied()
                    .filter(|id| SampleMeta::record_index(*id) % a == s)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Transform, pop and stage this shard's part of `plan`. Re-running an
    /// already applied plan returns the cached yield.
    pub fn execute_plan_slice(&mut self, plan: &LoadingPlan) -> Result<PlanYield> {
        if plan.plan_id <= self.last_plan_id {
            return self
                .recent
                .iter()
                .find(|y| y.plan_id == plan.plan_id)
                .cloned()
                .ok_or_else(|| {
                    Error::Integrity(format!(
                        "plan {} is older than the yield cache of loader {:?}",
                        plan.plan_id,
                        self.id()
                    ))
                });
        }
        let pops = self.pops_for(plan);
        let owner = constructor_of(plan);
        let mut positions = Vec::with_capacity(pops.len());
        let index: HashMap<SampleId, usize> = self
            .buffer
            .iter()
            .enumerate()
            .map(|(i, s)| (s.meta.sample_id, i))
            .collect();
        for id in &pops {
            let p = *index
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("sample {id} is not in the buffer of {:?}", self.id())))?;
            positions.push(p);
        }
        self.prepare(&positions);
        let mut staged = Vec::with_capacity(pops.len());
        for (id, p) in pops.iter().zip(&positions) {
            let sample = self.buffer[*p].prepared.clone().expect("prepared above");
            let constructor = *owner
                .get(id)
                .ok_or_else(|| Error::IncompletePlan(format!("sample {id} has no constructor")))?;
            staged.push(Staged { constructor, sample });
        }
        let popped: std::collections::HashSet<usize> = positions.into_iter().collect();
        let mut i = 0;
        self.buffer.retain(|_| {
            let keep = !popped.contains(&i);
            i += 1;
            keep
        });
        self.last_plan_id = plan.plan_id;
        let y = PlanYield {
            plan_id: plan.plan_id,
            loader: self.id(),
            staged,
            end_of_stream: true,
        };
        self.recent.push_back(y.clone());
        if self.recent.len() > YIELD_CACHE {
            self.recent.pop_front();
        }
        Ok(y)
    }

    /// The unit of deterministic progress: execute a plan, then refill.
    pub fn apply_plan(&mut self, plan: &LoadingPlan) -> Result<PlanYield> {
        let fresh = plan.plan_id > self.last_plan_id;
        let y = self.execute_plan_slice(plan)?;
        if fresh {
            self.refill()?;
        }
        Ok(y)
    }

    pub fn checkpoint(&self) -> LoaderCheckpoint {
        LoaderCheckpoint {
            loader: self.id(),
            cursor: self.cursor,
            manifest: self.buffer_ids(),
            last_plan_id: self.last_plan_id,
            skipped: self.skipped,
        }
    }

    /// Load `ckpt` and replay every logged plan past it.
    pub fn restore(&mut self, ckpt: &LoaderCheckpoint, log: &[LoadingPlan]) -> Result<Vec<PlanYield>> {
        if ckpt.loader != self.id() {
            return Err(Error::Integrity(format!(
                "checkpoint for {:?} restored into {:?}",
                ckpt.loader,
                self.id()
            )));
        }
        self.buffer.clear();
        self.recent.clear();
        for id in &ckpt.manifest {
            let index = SampleMeta::record_index(*id);
            let slot = self
                .load_slot(index)?
                .ok_or_else(|| Error::Integrity(format!("manifest sample {id} is malformed")))?;
            self.buffer.push_back(slot);
        }
        if self.cfg.eager {
            let all: Vec<usize> = (0..self.buffer.len()).collect();
            self.prepare(&all);
        }
        self.cursor = ckpt.cursor;
        self.skipped = ckpt.skipped;
        self.last_plan_id = ckpt.last_plan_id;
        let mut replayed = Vec::new();
        for plan in log.iter().filter(|p| p.plan_id > ckpt.last_plan_id) {
            replayed.push(self.apply_plan(plan)?);
        }
        Ok(replayed)
    }

    /// Ledger entry for this actor.
    pub fn ledger_entry(&self) -> LedgerEntry {
        LedgerEntry {
            actor: format!("loader-{}-{}", self.spec.source_id, self.cfg.shard),
            access_state: self.spec.access_state.total().div_ceil(u64::from(self.cfg.actors)),
            worker_ctx: u64::from(self.cfg.workers) * self.cfg.worker_ctx_bytes,
            buffer: self.buffer.iter().map(|s| s.meta.payload_bytes).sum(),
        }
    }
}

impl SummarySource for SourceLoader {
    fn loader_id(&self) -> LoaderId {
        self.id()
    }

    fn summarize(&self) -> Result<BufferSummary> {
        Ok(SourceLoader::summarize(self))
    }
}

/// Constructor bound to every sample of the plan's primary module.
pub fn constructor_of(plan: &LoadingPlan) -> BTreeMap<SampleId, u32> {
    let mut out = BTreeMap::new();
    for bin in &plan.primary().bins {
        for s in &bin.samples {
            out.insert(*s, bin.bucket as u32);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderCheckpoint {
    pub loader: LoaderId,
    pub cursor: u64,
    /// Buffered sample ids in buffer order.
    pub manifest: Vec<SampleId>,
    pub last_plan_id: u64,
    pub skipped: u64,
}

#[derive(Serialize, Deserialize)]
struct Sealed<T> {
    checksum: String,
    body: T,
}

/// JSON body wrapped with a SHA-256 checksum of its canonical encoding.
pub fn seal<T: Serialize>(body: &T) -> Vec<u8> {
    let raw = serde_json::to_vec(body).expect("checkpoint bodies always serialize");
    let checksum = hex::encode(Sha256::digest(&raw));
    serde_json::to_vec(&Sealed { checksum, body }).expect("checkpoint bodies always serialize")
}

pub fn unseal<T: Serialize + for<'de> Deserialize<'de>>(bytes: &[u8], path: &str) -> Result<T> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_string(),
        reason,
    };
    let sealed: Sealed<T> = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
    let raw = serde_json::to_vec(&sealed.body).expect("decoded bodies serialize");
    if hex::encode(Sha256::digest(&raw)) != sealed.checksum {
        return Err(corrupt("checksum mismatch".into()));
    }
    Ok(sealed.body)
}

/// Memory held by one actor, split into the three ledger components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub actor: String,
    pub access_state: u64,
    pub worker_ctx: u64,
    pub buffer: u64,
}

impl LedgerEntry {
    pub fn total(&self) -> u64 {
        self.access_state + self.worker_ctx + self.buffer
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub entries: Vec<LedgerEntry>,
}

impl MemoryLedger {
    pub fn access_state(&self) -> u64 {
        self.entries.iter().map(|e| e.access_state).sum()
    }

    pub fn worker_ctx(&self) -> u64 {
        self.entries.iter().map(|e| e.worker_ctx).sum()
    }

    pub fn buffer(&self) -> u64 {
        self.entries.iter().map(|e| e.buffer).sum()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(LedgerEntry::total).sum()
    }
}

/// Ledger for disaggregated loaders: each source shard's access state lives
/// in exactly one actor, whatever its worker count.
pub fn disaggregated_ledger(sources: &[SourceSpec], alloc: &[Allocation], worker_ctx: u64, buffer_bytes: u64) -> MemoryLedger {
    let mut entries = Vec::new();
    for (s, a) in sources.iter().zip(alloc) {
        for shard in 0..a.actors {
            entries.push(LedgerEntry {
                actor: format!("loader-{}-{shard}", s.source_id),
                access_state: s.access_state.total().div_ceil(u64::from(a.actors)),
                worker_ctx: u64::from(a.workers_per_actor) * worker_ctx,
                buffer: buffer_bytes,
            });
        }
    }
    MemoryLedger { entries }
}

/// Ledger for the baseline where every rank runs its own dataloader whose
/// workers each open every source.
pub fn naive_clone_ledger(
    sources: &[SourceSpec],
    ranks: u32,
    workers_per_rank: u32,
    worker_ctx: u64,
    buffer_bytes: u64,
) -> MemoryLedger {
    let m_d: u64 = sources.iter().map(|s| s.access_state.total()).sum();
    let entries = (0..ranks)
        .map(|r| LedgerEntry {
            actor: format!("rank-{r}"),
            access_state: m_d * u64::from(workers_per_rank.max(1)),
            worker_ctx: u64::from(workers_per_rank) * worker_ctx,
            buffer: buffer_bytes,
        })
        .collect();
    MemoryLedger { entries }
}
