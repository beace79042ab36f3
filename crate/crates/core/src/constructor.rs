//! Data Constructors: microbatch assembly, parallelism transformations,
//! per-rank payloads and the payload wire format.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loader::PreparedSample;
use crate::model::SampleId;
use crate::orchestration::{BinAssignment, ParallelismTransform};
use crate::place_tree::{ClientPlaceTree, ConsumerSet, Coord, Rank};
use crate::planner::LoadingPlan;

pub const PAD: u32 = u32::MAX;
/// Backbone position occupied by one image patch.
pub const IMAGE_TOKEN: u32 = u32::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub sample_id: SampleId,
    pub start: u32,
    pub len: u32,
}

/// One packed (and padded) sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PackedSequence {
    pub fn real_len(&self) -> u32 {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn pads(&self) -> u32 {
        self.tokens.len() as u32 - self.real_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// First-fit-decreasing packing, then padding to the bin max.
    #[default]
    Pack,
    /// One sample per sequence, padded to the bin max.
    Pad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microbatch {
    pub plan_id: u64,
    pub bucket: usize,
    pub bin: usize,
    pub samples: Vec<SampleId>,
    pub sequences: Vec<PackedSequence>,
    pub pad_tokens: u64,
}

impl Microbatch {
    pub fn padded_len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.tokens.len())
    }

    pub fn real_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| u64::from(s.real_len())).sum()
    }

    pub fn bytes(&self) -> u64 {
        self.sequences.iter().map(|s| s.tokens.len() as u64 * 4).sum()
    }
}

fn backbone_tokens(s: &PreparedSample) -> Vec<u32> {
    let mut t = s.tokens.clone();
    t.extend(std::iter::repeat_n(IMAGE_TOKEN, s.patches.len()));
    t
}

/// Pack `samples` into sequences of at most `max_seq_len`, then pad every
/// sequence to the longest one rounded up to a multiple of `align`.
pub fn assemble(
    plan_id: u64,
    bin: &BinAssignment,
    samples: &[&PreparedSample],
    max_seq_len: u32,
    mode: AssemblyMode,
    align: u32,
) -> Result<Microbatch> {
    let expected: Vec<SampleId> = bin.samples.clone();
    let got: Vec<SampleId> = samples.iter().map(|s| s.meta.sample_id).collect();
    if expected != got {
        return Err(Error::Integrity(format!(
            "bin ({}, {}) expects samples {expected:?} but received {got:?}",
            bin.bucket, bin.bin
        )));
    }
    for s in samples {
        let len = s.meta.seq_len();
        if len > max_seq_len {
            return Err(Error::SequenceTooLong {
                sample: s.meta.sample_id,
                len: len as usize,
                max: max_seq_len as usize,
            });
        }
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if mode == AssemblyMode::Pack {
        order.sort_by(|a, b| samples[*b].meta.seq_len().cmp(&samples[*a].meta.seq_len()).then(a.cmp(b)));
    }
    let mut seqs: Vec<PackedSequence> = Vec::new();
    for i in order {
        let s = samples[i];
        let len = s.meta.seq_len();
        let slot = match mode {
            AssemblyMode::Pack => seqs.iter().position(|q| q.tokens.len() as u32 + len <= max_seq_len),
            AssemblyMode::Pad => None,
        };
        let q = match slot {
            Some(p) => &mut seqs[p],
            None => {
                seqs.push(PackedSequence {
                    tokens: Vec::new(),
                    segments: Vec::new(),
                });
                seqs.last_mut().expect("just pushed")
            }
        };
        q.segments.push(Segment {
            sample_id: s.meta.sample_id,
            start: q.tokens.len() as u32,
            len,
        });
        q.tokens.extend(backbone_tokens(s));
    }
    let longest = seqs.iter().map(|q| q.tokens.len()).max().unwrap_or(0);
    let align = align.max(1) as usize;
    let target = longest.div_ceil(align) * align;
    let mut pad_tokens = 0;
    for q in &mut seqs {
        pad_tokens += (target - q.tokens.len()) as u64;
        q.tokens.resize(target, PAD);
    }
    Ok(Microbatch {
        plan_id,
        bucket: bin.bucket,
        bin: bin.bin,
        samples: got,
        sequences: seqs,
        pad_tokens,
    })
}

/// Decides which positions of a padded sequence each CP rank receives.
pub trait CpSplitter: Send + Sync {
    fn ranges(&self, len: usize, cp: usize) -> Vec<Vec<Range<usize>>>;
}

/// Equal contiguous chunks, chunk `i` to CP rank `i`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Contiguous;

impl CpSplitter for Contiguous {
    fn ranges(&self, len: usize, cp: usize) -> Vec<Vec<Range<usize>>> {
        let chunk = len / cp.max(1);
        (0..cp).map(|i| vec![i * chunk..(i + 1) * chunk]).collect()
    }
}

/// View of one CP rank's part of a shared microbatch.
#[derive(Debug, Clone)]
pub struct CpShard {
    pub mb: Arc<Microbatch>,
    pub index: usize,
    pub ranges: Vec<Range<usize>>,
}

impl CpShard {
    /// Per-sequence token slices of this shard.
    pub fn tokens(&self) -> Vec<Vec<u32>> {
        self.mb
            .sequences
            .iter()
            .map(|q| self.ranges.iter().flat_map(|r| q.tokens[r.clone()].iter().copied()).collect())
            .collect()
    }
}

pub fn cp_partition(mb: &Arc<Microbatch>, cp: usize, splitter: &dyn CpSplitter) -> Result<Vec<CpShard>> {
    let len = mb.padded_len();
    if cp == 0 || len % cp != 0 {
        return Err(Error::BatchShape(format!("sequence length {len} is not divisible by cp={cp}")));
    }
    Ok(splitter
        .ranges(len, cp)
        .into_iter()
        .enumerate()
        .map(|(index, ranges)| CpShard {
            mb: Arc::clone(mb),
            index,
            ranges,
        })
        .collect())
}

/// Reassemble full sequences from CP shard token slices.
pub fn merge_shards(shards: &[Vec<Vec<u32>>], splitter: &dyn CpSplitter) -> Vec<Vec<u32>> {
    let cp = shards.len();
    if cp == 0 {
        return Vec::new();
    }
    let seqs = shards[0].len();
    (0..seqs)
        .map(|q| {
            let len: usize = shards.iter().map(|s| s[q].len()).sum();
            let mut out = vec![PAD; len];
            for (i, ranges) in splitter.ranges(len, cp).into_iter().enumerate() {
                let mut src = shards[i][q].iter();
                for r in ranges {
                    for pos in r {
                        out[pos] = *src.next().expect("shard covers its ranges");
                    }
                }
            }
            out
        })
        .collect()
}

/// What later pipeline stages receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubConfig {
    pub lengths: bool,
    pub masks: bool,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            lengths: true,
            masks: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum PayloadKind {
    Full = 0,
    Stub = 1,
    Redirect = 2,
}

/// Data handed to one trainer rank for one microbatch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPayload {
    pub kind: PayloadKind,
    pub plan_id: u64,
    pub rank: Rank,
    pub coord: Coord,
    pub mb_index: u32,
    pub bucket: u32,
    /// Broadcast root for redirected ranks.
    pub redirect: Option<Rank>,
    /// Padded length of every sequence in the full microbatch.
    pub padded_len: u32,
    /// Per-sequence segments of the full microbatch.
    pub segments: Vec<Vec<Segment>>,
    /// Per-sequence token slices for this rank, flattened.
    pub tokens: Vec<u32>,
    /// Images this rank encodes: `(sample id, patch count)`.
    pub images: Vec<(SampleId, u32)>,
    pub patches: Vec<u32>,
}

impl RankPayload {
    pub fn sample_ids(&self) -> Vec<SampleId> {
        self.segments.iter().flatten().map(|s| s.sample_id).collect()
    }

    pub fn seq_lens(&self) -> Vec<u32> {
        self.segments.iter().flatten().map(|s| s.len).collect()
    }
}

const MAGIC: &[u8; 4] = b"MXPL";
const VERSION: u16 = 1;

/// Little-endian layout:
///
/// ```text
/// magic "MXPL" | version u16 | kind u8 | reserved u8
/// plan_id u64 | rank u32 | pp dp cp tp u32 | mb_index u32 | bucket u32
/// redirect u32 (u32::MAX = none) | padded_len u32
/// n_seq u32 | per seq: n_seg u32, per seg: sample_id u64, start u32, len u32
/// n_tokens u32 | tokens u32*
/// n_images u32 | per image: sample_id u64, patches u32
/// n_patches u32 | patches u32*
/// ```
pub fn encode_payload(p: &RankPayload) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 4 * p.tokens.len() + 4 * p.patches.len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.push(p.kind as u8);
    b.push(0);
    b.extend_from_slice(&p.plan_id.to_le_bytes());
    for v in [p.rank, p.coord.pp, p.coord.dp, p.coord.cp, p.coord.tp, p.mb_index, p.bucket] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&p.redirect.unwrap_or(u32::MAX).to_le_bytes());
    b.extend_from_slice(&p.padded_len.to_le_bytes());
    b.extend_from_slice(&(p.segments.len() as u32).to_le_bytes());
    for seq in &p.segments {
        b.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for s in seq {
            b.extend_from_slice(&s.sample_id.to_le_bytes());
            b.extend_from_slice(&s.start.to_le_bytes());
            b.extend_from_slice(&s.len.to_le_bytes());
        }
    }
    b.extend_from_slice(&(p.tokens.len() as u32).to_le_bytes());
    for t in &p.tokens {
        b.extend_from_slice(&t.to_le_bytes());
    }
    b.extend_from_slice(&(p.images.len() as u32).to_le_bytes());
    for (id, n) in &p.images {
        b.extend_from_slice(&id.to_le_bytes());
        b.extend_from_slice(&n.to_le_bytes());
    }
    b.extend_from_slice(&(p.patches.len() as u32).to_le_bytes());
    for x in &p.patches {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.b.len() {
            return Err(Error::Integrity("payload is truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(unit) > self.b.len() - self.at {
            return Err(Error::Integrity("payload count exceeds its length".into()));
        }
        Ok(n)
    }
}

pub fn decode_payload(bytes: &[u8]) -> Result<RankPayload> {
    let mut c = Cursor { b: bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Integrity("payload header has a bad magic".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported payload version {version}")));
    }
    let kind = match c.take(2)?[0] {
        0 => PayloadKind::Full,
        1 => PayloadKind::Stub,
        2 => PayloadKind::Redirect,
        k => return Err(Error::Integrity(format!("unknown payload kind {k}"))),
    };
    let plan_id = c.u64()?;
    let rank = c.u32()?;
    let coord = Coord {
        pp: c.u32()?,
        dp: c.u32()?,
        cp: c.u32()?,
        tp: c.u32()?,
    };
    let mb_index = c.u32()?;
    let bucket = c.u32()?;
    let redirect = match c.u32()? {
        u32::MAX => None,
        r => Some(r),
    };
    let padded_len = c.u32()?;
    let n_seq = c.count(4)?;
    let mut segments = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let n = c.count(16)?;
        let mut seq = Vec::with_capacity(n);
        for _ in 0..n {
            seq.push(Segment {
                sample_id: c.u64()?,
                start: c.u32()?,
                len: c.u32()?,
            });
        }
        segments.push(seq);
    }
    let n = c.count(4)?;
    let tokens = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
    let n = c.count(12)?;
    let images = (0..n).map(|_| Ok((c.u64()?, c.u32()?))).collect::<Result<_>>()?;
    let n = c.count(4)?;
    let patches = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
    if c.at != bytes.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    Ok(RankPayload {
        kind,
        plan_id,
        rank,
        coord,
        mb_index,
        bucket,
        redirect,
        padded_len,
        segments,
        tokens,
        images,
        patches,
    })
}

/// Full payload for PP stage 0, a metadata stub for later stages. Encoder
/// inputs stay: every rank encodes its own images.
pub fn pp_filter(mut full: RankPayload, stage: u32, stub: StubConfig) -> RankPayload {
    if stage == 0 {
        return full;
    }
    full.kind = PayloadKind::Stub;
    full.tokens.clear();
    if !stub.masks {
        for seq in &mut full.segments {
            seq.clear();
        }
    }
    if !stub.lengths {
        full.segments.clear();
        full.padded_len = 0;
    }
    full
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructorConfig {
    pub max_seq_len: u32,
    pub mode: AssemblyMode,
    pub stub: StubConfig,
}

impl Default for ConstructorConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 8192,
            mode: AssemblyMode::Pack,
            stub: StubConfig::default(),
        }
    }
}

/// Outcome of a client request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Served {
    Payload(Box<RankPayload>),
    /// Nothing queued yet; the caller must run a plan cycle.
    Starved,
}

/// Samples handed back by a reshard that changed the data-parallel layout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Released {
    pub samples: Vec<PreparedSample>,
}

/// One constructor per primary bucket.
pub struct DataConstructor {
    id: u32,
    cfg: ConstructorConfig,
    splitter: Arc<dyn CpSplitter>,
    ranks: Vec<Rank>,
    coords: BTreeMap<Rank, Coord>,
    consumers: Option<ConsumerSet>,
    resident: VecDeque<(Arc<Microbatch>, ParallelismTransform, BTreeMap<Rank, (Vec<(SampleId, u32)>, Vec<u32>)>)>,
    queues: BTreeMap<Rank, VecDeque<RankPayload>>,
    materialized: u64,
    materialized_bytes: u64,
}

impl DataConstructor {
    pub fn new(id: u32, tree: &ClientPlaceTree, ranks: Vec<Rank>, cfg: ConstructorConfig) -> Result<Self> {
        Self::with_splitter(id, tree, ranks, cfg, Arc::new(Contiguous))
    }

    pub fn with_splitter(
        id: u32,
        tree: &ClientPlaceTree,
        ranks: Vec<Rank>,
        cfg: ConstructorConfig,
        splitter: Arc<dyn CpSplitter>,
    ) -> Result<Self> {
        let coords = ranks.iter().map(|r| Ok((*r, tree.coord(*r)?))).collect::<Result<_>>()?;
        let queues = ranks.iter().map(|r| (*r, VecDeque::new())).collect();
        Ok(Self {
            id,
            cfg,
            splitter,
            ranks,
            coords,
            consumers: None,
            resident: VecDeque::new(),
            queues,
            materialized: 0,
            materialized_bytes: 0,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn ranks(&self) -> &[Rank] {
        &self.ranks
    }

    /// Fully materialized microbatch copies so far.
    pub fn materialized(&self) -> (u64, u64) {
        (self.materialized, self.materialized_bytes)
    }

    pub fn queued(&self, rank: Rank) -> usize {
        self.queues.get(&rank).map_or(0, VecDeque::len)
    }

    /// Assemble this constructor's bins of `plan` and queue rank payloads.
    ///
    /// `samples` must hold every sample the plan routes here; `images` holds
    /// prepared samples of the whole plan for encoder assignments.
    pub fn receive(
        &mut self,
        plan: &LoadingPlan,
        samples: &HashMap<SampleId, PreparedSample>,
        images: &HashMap<SampleId, PreparedSample>,
    ) -> Result<Vec<Arc<Microbatch>>> {
        let primary = plan.primary();
        let transform = primary.transform;
        self.consumers = plan.consumers.clone();
        let encoder = plan.modules.iter().skip(1).find(|m| m.transform.axis == crate::place_tree::Axis::World);
        let mut out = Vec::new();
        let id = self.id;
        for bin in primary.bins.iter().filter(|b| b.bucket as u32 == id) {
            let members = bin
                .samples
                .iter()
                .map(|id| {
                    samples
                        .get(id)
                        .ok_or_else(|| Error::Integrity(format!("constructor {} never received sample {id}", self.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mb = Arc::new(assemble(
                plan.plan_id,
                bin,
                &members,
                self.cfg.max_seq_len,
                self.cfg.mode,
                transform.cp_split,
            )?);
            self.materialized += 1;
            self.materialized_bytes += mb.bytes();
            let mut enc: BTreeMap<Rank, (Vec<(SampleId, u32)>, Vec<u32>)> = BTreeMap::new();
            if let Some(e) = encoder {
                for eb in e.bins.iter().filter(|b| b.bin == bin.bin) {
                    for r in eb.ranks.iter().filter(|r| self.coords.contains_key(r)) {
                        let entry = enc.entry(*r).or_default();
                        for id in &eb.samples {
                            let s = images
                                .get(id)
                                .ok_or_else(|| Error::Integrity(format!("image sample {id} missing from the plan")))?;
                            entry.0.push((*id, s.patches.len() as u32));
                            entry.1.extend_from_slice(&s.patches);
                        }
                    }
                }
            }
            self.publish(&mb, transform, &enc)?;
            self.resident.push_back((Arc::clone(&mb), transform, enc));
            out.push(mb);
        }
        Ok(out)
    }

    fn publish(
        &mut self,
        mb: &Arc<Microbatch>,
        t: ParallelismTransform,
        enc: &BTreeMap<Rank, (Vec<(SampleId, u32)>, Vec<u32>)>,
    ) -> Result<()> {
        let shards = cp_partition(mb, t.cp_split.max(1) as usize, self.splitter.as_ref())?;
        let segments: Vec<Vec<Segment>> = mb.sequences.iter().map(|q| q.segments.clone()).collect();
        for (&rank, &coord) in &self.coords {
            let base = RankPayload {
                kind: PayloadKind::Full,
                plan_id: mb.plan_id,
                rank,
                coord,
                mb_index: mb.bin as u32,
                bucket: mb.bucket as u32,
                redirect: None,
                padded_len: mb.padded_len() as u32,
                segments: segments.clone(),
                tokens: Vec::new(),
                images: Vec::new(),
                patches: Vec::new(),
            };
            let mut base = base;
            if let Some((imgs, patches)) = enc.get(&rank) {
                base.images = imgs.clone();
                base.patches = patches.clone();
            }
            let payload = match self.consumers.as_ref().and_then(|c| c.root_of(rank)) {
                Some(root) if root != rank => RankPayload {
                    kind: PayloadKind::Redirect,
                    redirect: Some(root),
                    segments: Vec::new(),
                    padded_len: 0,
                    ..base
                },
                _ => {
                    let shard = if t.cp_split > 1 { coord.cp as usize } else { 0 };
                    let mut full = base;
                    full.tokens = shards[shard].tokens().concat();
                    pp_filter(full, coord.pp, self.cfg.stub)
                }
            };
            self.queues.get_mut(&rank).expect("queue per rank").push_back(payload);
        }
        Ok(())
    }

    pub fn serve(&mut self, rank: Rank) -> Result<Served> {
        let q = self.queues.get_mut(&rank).ok_or(Error::UnknownRank(rank))?;
        match q.pop_front() {
            Some(p) => {
                if self.queues.values().all(VecDeque::is_empty) {
                    self.resident.clear();
                }
                Ok(Served::Payload(Box::new(p)))
            }
            None => Ok(Served::Starved),
        }
    }

    /// Resident microbatches not yet fully served.
    pub fn resident(&self) -> Vec<Arc<Microbatch>> {
        self.resident.iter().map(|(m, _, _)| Arc::clone(m)).collect()
    }

    /// Align resident data with a new topology. When the data-parallel
    /// layout is unchanged, queued microbatches are re-split in place;
    /// otherwise every undelivered sample is released for replanning.
    pub fn reshard_resident(
        &mut self,
        new_tree: &ClientPlaceTree,
        new_ranks: Vec<Rank>,
        samples: &HashMap<SampleId, PreparedSample>,
        same_dp: bool,
    ) -> Result<Released> {
        let pending: Vec<_> = self.resident.drain(..).collect();
        let served: BTreeMap<(u64, u32), usize> = {
            let mut m = BTreeMap::new();
            for q in self.queues.values() {
                for p in q {
                    *m.entry((p.plan_id, p.mb_index)).or_insert(0) += 1;
                }
            }
            m
        };
        let undelivered: Vec<_> = pending
            .into_iter()
            .filter(|(mb, _, _)| served.contains_key(&(mb.plan_id, mb.bin as u32)))
            .collect();
        self.coords = new_ranks
            .iter()
            .map(|r| Ok((*r, new_tree.coord(*r)?)))
            .collect::<Result<_>>()?;
        self.ranks = new_ranks;
        self.queues = self.ranks.iter().map(|r| (*r, VecDeque::new())).collect();
        if !same_dp {
            let mut released = Released::default();
            for (mb, _, _) in undelivered {
                for id in &mb.samples {
                    let s = samples
                        .get(id)
                        .ok_or_else(|| Error::Integrity(format!("resident sample {id} has no prepared copy")))?;
                    released.samples.push(s.clone());
                }
            }
            return Ok(released);
        }
        let cfg = new_tree.config();
        for (mb, t, enc) in undelivered {
            let t = ParallelismTransform {
                cp_split: if t.cp_split > 1 || cfg.cp > 1 { cfg.cp } else { 1 },
                pp_stages: cfg.pp,
                tp_replicas: cfg.tp,
                ..t
            };
            let mb = realign(&mb, t.cp_split, self.splitter.as_ref());
            self.publish(&mb, t, &enc)?;
            self.resident.push_back((mb, t, enc));
        }
        Ok(Released::default())
    }
}

/// Strip padding and re-pad for a new CP degree.
fn realign(mb: &Arc<Microbatch>, cp: u32, _splitter: &dyn CpSplitter) -> Arc<Microbatch> {
    let longest = mb.sequences.iter().map(PackedSequence::real_len).max().unwrap_or(0) as usize;
    let target = longest.div_ceil(cp.max(1) as usize) * cp.max(1) as usize;
    if target == mb.padded_len() {
        return Arc::clone(mb);
    }
    let mut out = (**mb).clone();
    out.pad_tokens = 0;
    for q in &mut out.sequences {
        let real = q.real_len() as usize;
        q.tokens.truncate(real);
        q.tokens.resize(target, PAD);
        out.pad_tokens += (target - real) as u64;
    }
    Arc::new(out)
}
