//! Orchestration primitives and the partitioners they call.
//!
//! A strategy runs `mix` once on the shared graph, then a pipeline of
//! `distribute`, `cost`, `balance`, `broadcast_at` and finally `plan` per
//! module graph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dgraph::{DGraph, EdgeKind, SampleState, Selector};
use crate::error::{Error, Result};
use crate::model::{backbone_cost, encoder_cost, CostParams, SampleId, SampleMeta, SourceId, WeightSource};
use crate::place_tree::{Axis, BucketSet, ClientPlaceTree, Rank};
use crate::rng::keyed_unit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: SampleId,
    pub cost: f64,
}

impl Item {
    pub fn new(id: SampleId, cost: f64) -> Self {
        Self { id, cost }
    }
}

pub fn load(bin: &[Item]) -> f64 {
    bin.iter().map(|i| i.cost).sum()
}

/// Largest minus smallest bin load.
pub fn spread(bins: &[Vec<Item>]) -> f64 {
    let loads: Vec<f64> = bins.iter().map(|b| load(b)).collect();
    let max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = loads.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn max_load(bins: &[Vec<Item>]) -> f64 {
    bins.iter().map(|b| load(b)).fold(0.0, f64::max)
}

/// Splits `items` into `k` bins. Implementations must return exactly `k`
/// bins covering the input exactly once.
pub trait Partitioner: Send + Sync {
    fn name(&self) -> &str;
    fn partition(&self, items: &[Item], k: usize) -> Result<Vec<Vec<Item>>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

#[derive(Debug, Clone, Copy, Default)]
pub struct KarmarkarKarp;

impl Partitioner for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn partition(&self, items: &[Item], k: usize) -> Result<Vec<Vec<Item>>> {
        greedy_binpack(items, k)
    }
}

impl Partitioner for KarmarkarKarp {
    fn name(&self) -> &str {
        "karmarkar_karp"
    }

    fn partition(&self, items: &[Item], k: usize) -> Result<Vec<Vec<Item>>> {
        karmarkar_karp(items, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    #[default]
    KarmarkarKarp,
}

impl Method {
    pub fn partitioner(self) -> &'static dyn Partitioner {
        match self {
            Method::Greedy => &Greedy,
            Method::KarmarkarKarp => &KarmarkarKarp,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "greedy" => Ok(Method::Greedy),
            "kk" | "karmarkar_karp" => Ok(Method::KarmarkarKarp),
            _ => Err(Error::InvalidInput(format!("unknown balancing method {s:?}"))),
        }
    }
}

fn sorted_desc(items: &[Item]) -> Vec<Item> {
    let mut v = items.to_vec();
    v.sort_by(|a, b| b.cost.total_cmp(&a.cost));
    v
}

/// Longest-processing-time greedy: heaviest item first into the lightest
/// bin, lowest bin index on ties.
pub fn greedy_binpack(items: &[Item], k: usize) -> Result<Vec<Vec<Item>>> {
    if k == 0 {
        return Err(Error::InvalidInput("greedy_binpack needs at least one bin".into()));
    }
    let mut bins: Vec<Vec<Item>> = vec![Vec::new(); k];
    let mut loads = vec![0.0f64; k];
    for item in sorted_desc(items) {
        let mut best = 0;
        for j in 1..k {
            if loads[j] < loads[best] {
                best = j;
            }
        }
        loads[best] += item.cost;
        bins[best].push(item);
    }
    Ok(bins)
}

struct Tuple {
    /// Subsets ordered by descending load.
    parts: Vec<(f64, Vec<Item>)>,
    seq: usize,
}

impl Tuple {
    fn spread(&self) -> f64 {
        self.parts[0].0 - self.parts[self.parts.len() - 1].0
    }
}

impl PartialEq for Tuple {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Tuple {}

impl PartialOrd for Tuple {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Tuple {
    fn cmp(&self, other: &Self) -> Ordering {
        self.spread()
            .total_cmp(&other.spread())
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Largest differencing method generalized to `k` subsets: repeatedly merge
/// the two tuples with the largest spread, pairing heavy with light parts.
pub fn karmarkar_karp(items: &[Item], k: usize) -> Result<Vec<Vec<Item>>> {
    if k < 2 {
        return Err(Error::InvalidInput("karmarkar_karp needs at least two bins".into()));
    }
    if items.is_empty() {
        return Ok(vec![Vec::new(); k]);
    }
    let mut heap = BinaryHeap::with_capacity(items.len());
    for (seq, item) in sorted_desc(items).into_iter().enumerate() {
        let mut parts = vec![(item.cost, vec![item])];
        parts.extend((1..k).map(|_| (0.0, Vec::new())));
        heap.push(Tuple { parts, seq });
    }
    let mut seq = items.len();
    while heap.len() > 1 {
        let a = heap.pop().expect("heap has two entries");
        let mut b = heap.pop().expect("heap has two entries");
        b.parts.reverse();
        let mut parts: Vec<(f64, Vec<Item>)> = a
            .parts
            .into_iter()
            .zip(b.parts)
            .map(|((la, mut ma), (lb, mb))| {
                ma.extend(mb);
                (la + lb, ma)
            })
            .collect();
        parts.sort_by(|x, y| y.0.total_cmp(&x.0));
        heap.push(Tuple { parts, seq });
        seq += 1;
    }
    let last = heap.pop().expect("one tuple remains");
    Ok(last.parts.into_iter().map(|(_, m)| m).collect())
}

/// `parts` near-equal contiguous ranges over `0..n`, earlier ranges longer.
pub fn chunk_bounds(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// How `mix` turns weights into a per-step selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MixMode {
    /// Exact batch: per-source quotas from `w_i * batch_size`, FIFO within a
    /// source, shortfalls refilled from other sources.
    Quota {
        batch_size: usize,
        #[serde(default)]
        rounding: Rounding,
    },
    /// Independent keyed draw per sample with `p_i = min(1, w_i*B/n_i)`.
    Bernoulli { batch_size: usize },
}

impl MixMode {
    pub fn batch_size(&self) -> usize {
        match self {
            MixMode::Quota { batch_size, .. } | MixMode::Bernoulli { batch_size } => *batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Leftover seats go to the largest fractional parts.
    #[default]
    LargestRemainder,
    /// Leftover seats are drawn by keyed systematic sampling over the
    /// fractional parts, so small weights are not starved when `w_i*B < 1`.
    Systematic,
}

/// Integer apportionment of `total` seats by `weights`.
pub fn apportion(weights: &[f64], total: usize, rounding: Rounding, draw: f64) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut seats: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let given: usize = seats.iter().sum();
    let left = total.saturating_sub(given);
    if left == 0 {
        return seats;
    }
    let frac: Vec<f64> = exact.iter().zip(&seats).map(|(x, s)| x - *s as f64).collect();
    match rounding {
        Rounding::LargestRemainder => {
            let mut order: Vec<usize> = (0..weights.len()).collect();
            order.sort_by(|a, b| frac[*b].total_cmp(&frac[*a]).then(a.cmp(b)));
            for &i in order.iter().take(left) {
                seats[i] += 1;
            }
        }
        Rounding::Systematic => {
            let mut acc = 0.0;
            let mut next = draw;
            for (i, f) in frac.iter().enumerate() {
                acc += f;
                while next < acc && seats.iter().sum::<usize>() < total {
                    seats[i] += 1;
                    next += 1.0;
                }
            }
            // Rounding noise in the fractional sum can leave one seat over.
            let mut i = 0;
            while seats.iter().sum::<usize>() < total {
                if frac[i] > 0.0 {
                    seats[i] += 1;
                }
                i = (i + 1) % seats.len();
            }
        }
    }
    seats
}

/// Advance a weighted selection of buffered samples to `sampled`.
///
/// Returns the sampled ids in buffer order.
pub fn mix(g: &mut DGraph, schedule: &dyn WeightSource, step: u64, seed: u64, mode: MixMode) -> Result<Vec<SampleId>> {
    let weights = schedule.weights(step)?;
    if weights.len() != schedule.source_count() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} sources",
            weights.len(),
            schedule.source_count()
        )));
    }
    let mut by_source: BTreeMap<SourceId, Vec<SampleId>> = BTreeMap::new();
    for &id in g.samples() {
        if g.state(id)? != SampleState::Buffered {
            return Err(Error::InvalidInput(format!("sample {id} is no longer buffered")));
        }
        let meta = g.meta(id)?;
        if meta.source_id as usize >= weights.len() {
            return Err(Error::InvalidInput(format!(
                "sample {id} belongs to source {} but only {} weights are given",
                meta.source_id,
                weights.len()
            )));
        }
        by_source.entry(meta.source_id).or_default().push(id);
    }
    let batch = mode.batch_size();
    let mut chosen: Vec<SampleId> = Vec::new();
    match mode {
        MixMode::Quota { rounding, .. } => {
            let draw = keyed_unit(seed, &[step, u64::MAX]);
            let quotas = apportion(&weights, batch, rounding, draw);
            let avail = |s: usize| by_source.get(&(s as SourceId)).map_or(0, Vec::len);
            let mut take: Vec<usize> = quotas.iter().enumerate().map(|(s, q)| (*q).min(avail(s))).collect();
            let mut short = batch.saturating_sub(take.iter().sum());
            if short > 0 {
                let mut order: Vec<usize> = (0..weights.len()).collect();
                order.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)));
                for s in order {
                    let extra = (avail(s) - take[s]).min(short);
                    take[s] += extra;
                    short -= extra;
                }
                if short > 0 {
                    tracing::warn!(step, missing = short, "buffers hold fewer samples than the batch");
                }
            }
            for (s, ids) in &by_source {
                chosen.extend(ids.iter().take(take[*s as usize]));
            }
        }
        MixMode::Bernoulli { .. } => {
            for (s, ids) in &by_source {
                let p = (weights[*s as usize] * batch as f64 / ids.len() as f64).min(1.0);
                chosen.extend(
                    ids.iter()
                        .filter(|id| keyed_unit(seed, &[step, u64::from(*s), **id]) < p),
                );
            }
        }
    }
    let set: std::collections::HashSet<SampleId> = chosen.into_iter().collect();
    let ordered: Vec<SampleId> = g.samples().iter().copied().filter(|id| set.contains(id)).collect();
    g.advance(&ordered, SampleState::Sampled, EdgeKind::Null, None)?;
    Ok(ordered)
}

/// Data-path transformation implied by a distribution axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelismTransform {
    pub axis: Axis,
    /// Number of contiguous shards each assembled sequence is cut into.
    pub cp_split: u32,
    /// Pipeline stages sharing one bucket; stages past the first get stubs.
    pub pp_stages: u32,
    /// Tensor-parallel replicas receiving identical payloads.
    pub tp_replicas: u32,
}

impl ParallelismTransform {
    pub fn for_axis(tree: &ClientPlaceTree, axis: Axis) -> Self {
        let c = tree.config();
        let (cp_split, pp_stages, tp_replicas) = match axis {
            Axis::World => (1, 1, 1),
            Axis::Cp => (1, c.pp, c.tp),
            Axis::Dp | Axis::Pp => (c.cp, c.pp, c.tp),
            Axis::Tp => (1, 1, 1),
        };
        Self {
            axis,
            cp_split,
            pp_stages,
            tp_replicas,
        }
    }
}

/// Create buckets along `axis` and move sampled nodes to `bucketed`.
pub fn distribute(g: &mut DGraph, tree: &ClientPlaceTree, axis: Axis, group_size: usize) -> Result<ParallelismTransform> {
    let buckets = tree.pipeline_buckets(axis, group_size)?;
    let sampled = g.samples_in(SampleState::Sampled);
    g.advance(&sampled, SampleState::Bucketed, EdgeKind::Null, None)?;
    g.axis = Some(axis);
    g.buckets = Some(buckets);
    Ok(ParallelismTransform::for_axis(tree, axis))
}

/// Built-in cost functions over sample metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFn {
    TextLen,
    ImagePatches,
    SeqLen,
    Const { value: f64 },
    /// Backbone FLOPs over the combined text and image token sequence.
    Backbone { params: CostParams },
    /// Encoder FLOPs over the sample's image patches.
    Encoder { params: CostParams },
}

impl CostFn {
    pub fn eval(&self, m: &SampleMeta) -> f64 {
        match self {
            CostFn::TextLen => f64::from(m.text_len),
            CostFn::ImagePatches => f64::from(m.image_patches),
            CostFn::SeqLen => f64::from(m.seq_len()),
            CostFn::Const { value } => *value,
            CostFn::Backbone { params } => backbone_cost(&[m.seq_len()], params),
            CostFn::Encoder { params } => {
                if m.image_patches == 0 {
                    0.0
                } else {
                    encoder_cost(&[m.image_patches], params)
                }
            }
        }
    }
}

/// Annotate every tracked sample with `f(meta)`.
pub fn cost(g: &mut DGraph, f: impl Fn(&SampleMeta) -> f64) -> Result<()> {
    let ids = g.samples().to_vec();
    for id in ids {
        let c = f(g.meta(id)?);
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::InvalidInput(format!("cost function returned {c} for sample {id}")));
        }
        g.annotate(id, |a| a.cost = Some(c))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub microbatches: usize,
    /// Allow moving single samples between microbatches. When off, only
    /// whole in-order microbatches move between buckets.
    pub intra_reorder: bool,
    /// Require every bucket to receive the same number of samples.
    pub strict_shape: bool,
}

impl BalanceOptions {
    pub fn new(microbatches: usize) -> Self {
        Self {
            microbatches,
            intra_reorder: true,
            strict_shape: false,
        }
    }
}

fn bucketed_items(g: &DGraph) -> Result<Vec<Item>> {
    g.samples_in(SampleState::Bucketed)
        .into_iter()
        .map(|id| {
            g.cost(id)
                .map(|c| Item::new(id, c))
                .ok_or_else(|| Error::InvalidInput(format!("sample {id} has no cost; run cost() before balance()")))
        })
        .collect()
}

fn split(p: &dyn Partitioner, items: &[Item], k: usize) -> Result<Vec<Vec<Item>>> {
    let bins = if k == 1 { vec![items.to_vec()] } else { p.partition(items, k)? };
    if bins.len() != k || bins.iter().map(Vec::len).sum::<usize>() != items.len() {
        return Err(Error::InvalidInput(format!(
            "partitioner {} did not return {k} bins covering the input",
            p.name()
        )));
    }
    Ok(bins)
}

/// In-order split into `buckets * m` contiguous microbatches.
fn in_order(items: &[Item], buckets: usize, m: usize) -> Vec<Vec<Vec<Item>>> {
    chunk_bounds(items.len(), buckets)
        .into_iter()
        .map(|b| {
            let part = &items[b];
            chunk_bounds(part.len(), m).into_iter().map(|r| part[r].to_vec()).collect()
        })
        .collect()
}

fn commit_bins(g: &mut DGraph, layout: Vec<Vec<Vec<Item>>>) -> Result<()> {
    let mut order = Vec::new();
    for (b, bins) in layout.into_iter().enumerate() {
        for (j, bin) in bins.into_iter().enumerate() {
            let ids: Vec<SampleId> = bin.iter().map(|i| i.id).collect();
            for &id in &ids {
                g.annotate(id, |a| {
                    a.bucket = Some(b);
                    a.bin = Some(j);
                })?;
            }
            g.link_bin(b, j, &ids)?;
            order.extend(ids);
        }
    }
    g.advance(&order, SampleState::Binned, EdgeKind::Null, None)
}

/// Assign bucketed samples to `m` bins per bucket.
///
/// With intra-bin reordering, samples are first partitioned across buckets
/// and then each bucket into bins. Without it, the vanilla in-order
/// microbatches are kept intact and only moved between buckets.
pub fn balance(g: &mut DGraph, method: &dyn Partitioner, opts: BalanceOptions) -> Result<()> {
    let nb = g
        .buckets()
        .map(BucketSet::len)
        .ok_or_else(|| Error::InvalidInput("balance() requires distribute() first".into()))?;
    let m = opts.microbatches;
    if m == 0 {
        return Err(Error::InvalidInput("microbatch count must be at least 1".into()));
    }
    let items = bucketed_items(g)?;
    let layout = if opts.intra_reorder {
        let groups = split(method, &items, nb)?;
        if opts.strict_shape {
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            if sizes.iter().any(|s| *s != sizes[0]) {
                return Err(Error::BatchShape(format!("bucket cardinalities {sizes:?} are not equal")));
            }
        }
        groups
            .iter()
            .map(|grp| split(method, grp, m))
            .collect::<Result<Vec<_>>>()?
    } else {
        let units: Vec<Vec<Item>> = in_order(&items, nb, m).into_iter().flatten().collect();
        reassign_units(units, nb, m)
    };
    commit_bins(g, layout)
}

/// Cardinality-constrained LPT over whole microbatches: heaviest unit to
/// the lightest bucket that still has room, lowest index on ties.
fn reassign_units(units: Vec<Vec<Item>>, nb: usize, m: usize) -> Vec<Vec<Vec<Item>>> {
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|a, b| load(&units[*b]).total_cmp(&load(&units[*a])).then(a.cmp(b)));
    let mut layout: Vec<Vec<Vec<Item>>> = vec![Vec::new(); nb];
    let mut loads = vec![0.0f64; nb];
    for u in order {
        let target = (0..nb)
            .filter(|b| layout[*b].len() < m)
            .min_by(|a, b| loads[*a].total_cmp(&loads[*b]).then(a.cmp(b)))
            .expect("nb*m slots for nb*m units");
        loads[target] += load(&units[u]);
        layout[target].push(units[u].clone());
    }
    layout
}

/// The vanilla layout: buffer order, contiguous per bucket and microbatch.
pub fn bin_in_order(g: &mut DGraph, m: usize) -> Result<()> {
    let nb = g
        .buckets()
        .map(BucketSet::len)
        .ok_or_else(|| Error::InvalidInput("binning requires distribute() first".into()))?;
    let items: Vec<Item> = g
        .samples_in(SampleState::Bucketed)
        .into_iter()
        .map(|id| Item::new(id, g.cost(id).unwrap_or(0.0)))
        .collect();
    commit_bins(g, in_order(&items, nb, m.max(1)))
}

/// Attach the broadcast consumer set for `dims`.
pub fn broadcast_at(g: &mut DGraph, tree: &ClientPlaceTree, dims: &[Axis]) -> Result<()> {
    g.consumers = Some(tree.consumers_after_broadcast(dims)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub bucket: usize,
    pub bin: usize,
    pub ranks: Vec<Rank>,
    pub samples: Vec<SampleId>,
    pub cost: f64,
}

/// Per-module portion of a loading plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub name: String,
    pub transform: ParallelismTransform,
    pub bins: Vec<BinAssignment>,
}

impl ModulePlan {
    pub fn bin_costs(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.cost).collect()
    }

    pub fn bucket_costs(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for b in &self.bins {
            if out.len() <= b.bucket {
                out.resize(b.bucket + 1, 0.0);
            }
            out[b.bucket] += b.cost;
        }
        out
    }
}

/// Finalize a module graph: bin it in order if it was never balanced, bind
/// every binned sample to a constructor and emit the bin table.
///
/// `owner` maps a bucket to its constructor; `bound` overrides the owner for
/// samples already bound by another module.
pub fn plan(
    g: &mut DGraph,
    name: &str,
    transform: ParallelismTransform,
    microbatches: usize,
    owner: impl Fn(usize) -> u32,
    bound: Option<&BTreeMap<SampleId, u32>>,
) -> Result<ModulePlan> {
    if !g.samples_in(SampleState::Bucketed).is_empty() {
        bin_in_order(g, microbatches)?;
    }
    let buckets = g
        .buckets()
        .cloned()
        .ok_or_else(|| Error::IncompletePlan("plan() requires distribute() first".into()))?;
    let mut table: BTreeMap<(usize, usize), Vec<SampleId>> = BTreeMap::new();
    for b in 0..buckets.len() {
        for j in 0..microbatches {
            table.insert((b, j), Vec::new());
        }
    }
    let mut assignment = Vec::new();
    for id in g.samples_in(SampleState::Binned) {
        let a = g.annotations(id)?;
        let (b, j) = a
            .bucket
            .zip(a.bin)
            .ok_or_else(|| Error::IncompletePlan(format!("binned sample {id} lacks a bin")))?;
        table.entry((b, j)).or_default().push(id);
        let c = match bound {
            Some(map) => *map
                .get(&id)
                .ok_or_else(|| Error::IncompletePlan(format!("sample {id} has no constructor in the primary module")))?,
            None => owner(b),
        };
        assignment.push((id, c));
    }
    g.bind_consumers(&assignment)?;
    let bins = table
        .into_iter()
        .map(|((bucket, bin), samples)| {
            let cost = samples.iter().map(|s| g.cost(*s).unwrap_or(0.0)).sum();
            BinAssignment {
                bucket,
                bin,
                ranks: buckets.buckets[bucket].clone(),
                samples,
                cost,
            }
        })
        .collect();
    Ok(ModulePlan {
        name: name.to_string(),
        transform,
        bins,
    })
}

/// One step of a module pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Primitive {
    Distribute {
        axis: Axis,
        #[serde(default = "one")]
        group_size: usize,
    },
    Cost {
        #[serde(flatten)]
        f: CostFn,
    },
    Balance {
        #[serde(default)]
        method: Method,
        #[serde(default = "yes")]
        intra_reorder: bool,
        #[serde(default)]
        strict_shape: bool,
    },
    BroadcastAt {
        dims: Vec<Axis>,
    },
    Plan,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Distribute { axis, group_size } => write!(f, "distribute({axis}, {group_size})"),
            Primitive::Cost { f: c } => write!(f, "cost({c:?})"),
            Primitive::Balance { method, .. } => write!(f, "balance({method:?})"),
            Primitive::BroadcastAt { dims } => write!(f, "broadcast_at({dims:?})"),
            Primitive::Plan => f.write_str("plan()"),
        }
    }
}

/// Pipeline for one model module over its own graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleStrategy {
    pub name: String,
    #[serde(default)]
    pub selector: Selector,
    pub pipeline: Vec<Primitive>,
}

impl ModuleStrategy {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("module {}: {msg}", self.name)));
        if self.pipeline.last() != Some(&Primitive::Plan) {
            return bad("pipeline must end in plan()");
        }
        if self.pipeline.iter().filter(|p| **p == Primitive::Plan).count() != 1 {
            return bad("plan() must appear exactly once");
        }
        let pos = |pred: fn(&Primitive) -> bool| self.pipeline.iter().position(pred);
        let dist = pos(|p| matches!(p, Primitive::Distribute { .. }));
        let cost = pos(|p| matches!(p, Primitive::Cost { .. }));
        let bal = pos(|p| matches!(p, Primitive::Balance { .. }));
        if dist.is_none() {
            return bad("pipeline needs distribute()");
        }
        if let Some(b) = bal {
            if cost.is_none_or(|c| c > b) {
                return bad("cost() must precede balance()");
            }
            if dist.is_some_and(|d| d > b) {
                return bad("distribute() must precede balance()");
            }
        }
        if self.pipeline.iter().any(|p| matches!(p, Primitive::Distribute { axis: Axis::Tp, .. })) {
            return bad("TP is not a distribution axis");
        }
        Ok(())
    }
}

/// A full orchestration strategy: one shared mixing step and one pipeline
/// per module. The first module is the primary data path; later modules
/// (for example a vision encoder) reuse its sample-to-constructor binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub mix: MixMode,
    pub modules: Vec<ModuleStrategy>,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::InvalidConfig("strategy has no modules".into()));
        }
        if self.mix.batch_size() == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        for m in &self.modules {
            m.validate()?;
        }
        if self.modules[0].selector != Selector::All {
            return Err(Error::InvalidConfig("the primary module must select all samples".into()));
        }
        Ok(())
    }

    /// In-order DP distribution with no balancing.
    pub fn vanilla(batch_size: usize) -> Self {
        Self {
            mix: MixMode::Quota {
                batch_size,
                rounding: Rounding::LargestRemainder,
            },
            modules: vec![ModuleStrategy {
                name: "backbone".into(),
                selector: Selector::All,
                pipeline: vec![
                    Primitive::Distribute {
                        axis: Axis::Dp,
                        group_size: 1,
                    },
                    Primitive::Plan,
                ],
            }],
        }
    }

    /// Backbone cost model balanced across DP buckets and microbatches,
    /// with TP broadcast.
    pub fn llm_balance(batch_size: usize, params: CostParams, method: Method) -> Self {
        Self {
            mix: MixMode::Quota {
                batch_size,
                rounding: Rounding::LargestRemainder,
            },
            modules: vec![ModuleStrategy {
                name: "backbone".into(),
                selector: Selector::All,
                pipeline: vec![
                    Primitive::Distribute {
                        axis: Axis::Dp,
                        group_size: 1,
                    },
                    Primitive::Cost {
                        f: CostFn::Backbone { params },
                    },
                    Primitive::Balance {
                        method,
                        intra_reorder: true,
                        strict_shape: false,
                    },
                    Primitive::BroadcastAt { dims: vec![Axis::Tp] },
                    Primitive::Plan,
                ],
            }],
        }
    }

    /// `llm_balance` for the backbone composed with an encoder module
    /// balanced per rank over the whole world.
    pub fn hybrid(batch_size: usize, params: CostParams, method: Method) -> Self {
        let mut s = Self::llm_balance(batch_size, params, method);
        s.modules.push(ModuleStrategy {
            name: "encoder".into(),
            selector: Selector::Image,
            pipeline: vec![
                Primitive::Distribute {
                    axis: Axis::World,
                    group_size: 1,
                },
                Primitive::Cost {
                    f: CostFn::Encoder { params },
                },
                Primitive::Balance {
                    method,
                    intra_reorder: true,
                    strict_shape: false,
                },
                Primitive::Plan,
            ],
        });
        s
    }
}

/// Run one module pipeline on a graph whose samples are already mixed.
pub fn run_module(
    g: &mut DGraph,
    module: &ModuleStrategy,
    tree: &ClientPlaceTree,
    bound: Option<&BTreeMap<SampleId, u32>>,
) -> Result<ModulePlan> {
    let m = tree.config().microbatches as usize;
    let mut transform = None;
    for p in &module.pipeline {
        match p {
            Primitive::Distribute { axis, group_size } => {
                transform = Some(distribute(g, tree, *axis, *group_size)?);
            }
            Primitive::Cost { f } => cost(g, |meta| f.eval(meta))?,
            Primitive::Balance {
                method,
                intra_reorder,
                strict_shape,
            } => balance(
                g,
                method.partitioner(),
                BalanceOptions {
                    microbatches: m,
                    intra_reorder: *intra_reorder,
                    strict_shape: *strict_shape,
                },
            )?,
            Primitive::BroadcastAt { dims } => broadcast_at(g, tree, dims)?,
            Primitive::Plan => {
                let t = transform.ok_or_else(|| Error::IncompletePlan("plan() before distribute()".into()))?;
                return plan(g, &module.name, t, m, |b| b as u32, bound);
            }
        }
    }
    Err(Error::IncompletePlan(format!("module {} never reached plan()", module.name)))
}
