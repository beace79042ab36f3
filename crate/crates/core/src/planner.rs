//! Plan generation, source auto-partitioning and mixture-driven scaling.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dgraph::{DGraph, EdgeKind, Producer, SampleState, Selector};
use crate::error::{Error, Result};
use crate::model::{SampleId, SampleMeta, SourceId, SourceSpec, WeightSource};
use crate::orchestration::{self, apportion, mix, ModulePlan, Rounding, Strategy};
use crate::place_tree::{ClientPlaceTree, ConsumerSet};

/// Identity of one Source Loader actor: a shard of one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoaderId {
    pub source: SourceId,
    pub shard: u32,
}

/// Metadata snapshot of one loader's read buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSummary {
    pub loader: LoaderId,
    pub signature: String,
    pub metas: Vec<SampleMeta>,
    /// The shard has no records left to ingest.
    pub end_of_stream: bool,
}

/// Anything that can answer a summary request within a deadline.
pub trait SummarySource {
    fn loader_id(&self) -> LoaderId;
    fn summarize(&self) -> Result<BufferSummary>;
}

/// Collect one summary per loader. A loader that does not answer fails the
/// whole gather so the caller can run failure handling; partial summaries
/// are never planned on.
pub fn gather_buffer_summaries<'a>(loaders: impl IntoIterator<Item = &'a dyn SummarySource>) -> Result<Vec<BufferSummary>> {
    let mut out = Vec::new();
    for l in loaders {
        let s = l.summarize()?;
        if s.loader != l.loader_id() {
            return Err(Error::Integrity(format!(
                "summary from {:?} claims to come from {:?}",
                l.loader_id(),
                s.loader
            )));
        }
        out.push(s);
    }
    out.sort_by_key(|s| s.loader);
    Ok(out)
}

/// Ticks the planner spends collecting `loaders` summaries when requests are
/// coalesced in groups of `group_size` (1 disables coalescing). Every hop
/// costs `hop` ticks plus `per_entry` ticks per merged summary.
pub fn summary_latency(loaders: usize, group_size: usize, hop: u64, per_entry: u64) -> u64 {
    if loaders == 0 {
        return 0;
    }
    if group_size <= 1 {
        return hop + per_entry * loaders as u64;
    }
    let mut level = loaders;
    let mut total = 0;
    while level > 1 {
        let fan_in = group_size.min(level) as u64;
        total += hop + per_entry * fan_in;
        level = level.div_ceil(group_size);
    }
    total.max(hop + per_entry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum ScalingAction {
    Create { source: SourceId, actors: u32 },
    Reshard { source: SourceId },
    Reclaim { source: SourceId, actors: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub targets: Vec<Allocation>,
    pub actions: Vec<ScalingAction>,
}

/// Per-step instruction set shared by loaders and constructors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingPlan {
    pub plan_id: u64,
    pub step: u64,
    /// Ids to pop from each source, in buffer order.
    pub pops: BTreeMap<SourceId, Vec<SampleId>>,
    /// Metadata of every planned sample, in buffer order.
    pub metas: Vec<SampleMeta>,
    /// The first entry is the primary data path; bucket `b` of it is served
    /// by constructor `b`.
    pub modules: Vec<ModulePlan>,
    pub consumers: Option<ConsumerSet>,
    pub scaling: Option<ScalingPlan>,
}

impl LoadingPlan {
    pub fn primary(&self) -> &ModulePlan {
        &self.modules[0]
    }

    pub fn module(&self, name: &str) -> Option<&ModulePlan> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.pops.values().flatten().copied()
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plans always serialize")
    }
}

/// A plan together with the per-module graphs that produced it.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub plan: LoadingPlan,
    pub graphs: Vec<DGraph>,
}

/// Run `strategy` over the summarized buffers. Deterministic given
/// `(summaries, seed, step)`.
pub fn generate_plan(
    summaries: &[BufferSummary],
    strategy: &Strategy,
    schedule: &dyn WeightSource,
    tree: &ClientPlaceTree,
    step: u64,
    plan_id: u64,
    seed: u64,
) -> Result<PlanOutput> {
    strategy.validate()?;
    let buffer: Vec<SampleMeta> = summaries.iter().flat_map(|s| s.metas.iter().copied()).collect();
    if buffer.is_empty() {
        return Err(Error::InvalidInput(format!("no buffered samples available at step {step}")));
    }
    let mut primary = DGraph::init_from_buffer(&buffer, Selector::All)?;
    let sampled = mix(&mut primary, schedule, step, seed, strategy.mix)?;
    finish_plan(primary, &buffer, &sampled, strategy, tree, step, plan_id)
}

/// Re-bin already popped samples on `tree` without mixing again. The
/// resulting plan pops nothing.
pub fn replan(
    metas: &[SampleMeta],
    strategy: &Strategy,
    tree: &ClientPlaceTree,
    step: u64,
    plan_id: u64,
) -> Result<PlanOutput> {
    strategy.validate()?;
    let mut primary = DGraph::init_from_buffer(metas, Selector::All)?;
    let ids: Vec<SampleId> = primary.samples().to_vec();
    primary.advance(&ids, SampleState::Sampled, EdgeKind::Null, Some(Producer::Planner))?;
    let mut out = finish_plan(primary, metas, &ids, strategy, tree, step, plan_id)?;
    out.plan.pops.clear();
    Ok(out)
}

fn finish_plan(
    mut primary: DGraph,
    buffer: &[SampleMeta],
    sampled: &[SampleId],
    strategy: &Strategy,
    tree: &ClientPlaceTree,
    step: u64,
    plan_id: u64,
) -> Result<PlanOutput> {
    let sampled_set: HashSet<SampleId> = sampled.iter().copied().collect();

    let mut modules = Vec::with_capacity(strategy.modules.len());
    let first = orchestration::run_module(&mut primary, &strategy.modules[0], tree, None)?;
    modules.push(first);
    let bound = primary.bindings().clone();
    let consumers = primary.consumers().cloned();
    let mut graphs = vec![primary];
    for m in &strategy.modules[1..] {
        let mut g = DGraph::init_from_buffer(buffer, m.selector.clone())?;
        let ids: Vec<SampleId> = g.samples().iter().copied().filter(|id| sampled_set.contains(id)).collect();
        g.advance(&ids, SampleState::Sampled, EdgeKind::Null, None)?;
        modules.push(orchestration::run_module(&mut g, m, tree, Some(&bound))?);
        graphs.push(g);
    }

    let mut pops: BTreeMap<SourceId, Vec<SampleId>> = BTreeMap::new();
    let mut metas = Vec::with_capacity(sampled.len());
    for m in buffer.iter().filter(|m| sampled_set.contains(&m.sample_id)) {
        pops.entry(m.source_id).or_default().push(m.sample_id);
        let mut tagged = *m;
        tagged.step_tag = Some(step);
        metas.push(tagged);
    }
    Ok(PlanOutput {
        plan: LoadingPlan {
            plan_id,
            step,
            pops,
            metas,
            modules,
            consumers,
            scaling: None,
        },
        graphs,
    })
}

/// Resources available to Source Loaders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceEnvelope {
    /// Total CPU worker blocks in the cluster.
    pub total_blocks: u32,
    pub total_memory: u64,
    pub constructor_blocks: u32,
    pub planner_blocks: u32,
    pub reserved_memory: u64,
    /// Per-source worker cap.
    pub w_src: u32,
    /// Per-actor worker cap.
    pub w_actor: u32,
    /// Number of source clusters.
    pub clusters: usize,
    /// Memory one loader actor may use.
    pub actor_memory: u64,
    pub worker_ctx_bytes: u64,
    pub buffer_bytes: u64,
    /// Co-locate sources of one cluster in shared actors.
    pub grouping: bool,
}

impl Default for ResourceEnvelope {
    fn default() -> Self {
        Self {
            total_blocks: 64,
            total_memory: 256 << 30,
            constructor_blocks: 4,
            planner_blocks: 1,
            reserved_memory: 8 << 30,
            w_src: 16,
            w_actor: 8,
            clusters: 4,
            actor_memory: 8 << 30,
            worker_ctx_bytes: 256 << 20,
            buffer_bytes: 256 << 20,
            grouping: false,
        }
    }
}

impl ResourceEnvelope {
    pub fn validate(&self) -> Result<()> {
        let reserved = self.constructor_blocks + self.planner_blocks;
        if reserved > self.total_blocks || self.reserved_memory > self.total_memory {
            return Err(Error::InvalidConfig("reservations exceed the resource totals".into()));
        }
        if self.w_src == 0 || self.w_actor == 0 || self.clusters == 0 {
            return Err(Error::InvalidConfig("w_src, w_actor and cluster count must be positive".into()));
        }
        Ok(())
    }

    pub fn available_blocks(&self) -> u32 {
        self.total_blocks - self.constructor_blocks - self.planner_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub source_id: SourceId,
    pub actors: u32,
    pub workers_per_actor: u32,
    /// Sources sharing a group id share actors when grouping is enabled.
    pub group: u32,
}

impl Allocation {
    pub fn workers(&self) -> u32 {
        self.actors * self.workers_per_actor
    }
}

/// Memory of one actor holding `1/actors` of the access state of `m_d`.
fn actor_bytes(m_d: u64, actors: u32, workers: u32, env: &ResourceEnvelope) -> u64 {
    m_d.div_ceil(u64::from(actors)) + u64::from(workers) * env.worker_ctx_bytes + env.buffer_bytes
}

/// Quantile clusters of source indices sorted by descending cost, ties by
/// source id.
pub fn cluster_sources(sources: &[SourceSpec], g: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|a, b| {
        sources[*b]
            .transform_cost
            .total_cmp(&sources[*a].transform_cost)
            .then(sources[*a].source_id.cmp(&sources[*b].source_id))
    });
    let g = g.clamp(1, sources.len().max(1));
    orchestration::chunk_bounds(order.len(), g)
        .into_iter()
        .map(|r| order[r].to_vec())
        .collect()
}

/// Per-source fractional worker targets before caps.
fn worker_targets(sources: &[SourceSpec], clusters: &[Vec<usize>], blocks: f64) -> Vec<f64> {
    let mean = |c: &Vec<usize>| c.iter().map(|i| sources[*i].transform_cost).sum::<f64>() / c.len() as f64;
    let means: Vec<f64> = clusters.iter().map(mean).collect();
    let ratio = means[0] / means[means.len() - 1];
    let g = clusters.len();
    let mut raw = vec![0.0; sources.len()];
    for (c, members) in clusters.iter().enumerate() {
        let omega = if g == 1 {
            1.0
        } else {
            ratio - (ratio - 1.0) * c as f64 / (g - 1) as f64
        };
        for &i in members {
            raw[i] = omega * sources[i].transform_cost / means[c];
        }
    }
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total * blocks).collect()
}

/// Clamp targets at `cap` and hand the excess to uncapped sources in
/// proportion to their targets.
fn water_fill(mut t: Vec<f64>, cap: f64) -> Vec<f64> {
    loop {
        let excess: f64 = t.iter().map(|x| (x - cap).max(0.0)).sum();
        if excess <= 1e-9 {
            return t;
        }
        let free: f64 = t.iter().filter(|x| **x < cap).sum();
        for x in t.iter_mut() {
            if *x > cap {
                *x = cap;
            }
        }
        if free <= 0.0 {
            return t;
        }
        for x in t.iter_mut().filter(|x| **x < cap) {
            *x += excess * *x / free;
        }
    }
}

/// Stage one and two of [`auto_partition`]: integral worker blocks per
/// source after caps.
pub fn worker_shares(sources: &[SourceSpec], env: &ResourceEnvelope) -> Result<Vec<u32>> {
    let blocks = env.available_blocks();
    if (blocks as usize) < sources.len() {
        return Err(Error::Capacity {
            source_id: sources[blocks as usize].source_id,
            reason: format!("{blocks} worker blocks cannot give every one of {} sources a worker", sources.len()),
        });
    }
    let clusters = cluster_sources(sources, env.clusters);
    let cap = env.w_src as f64;
    let usable = blocks.min(env.w_src.saturating_mul(sources.len() as u32));
    let targets = water_fill(worker_targets(sources, &clusters, f64::from(usable)), cap);
    let sum: f64 = targets.iter().sum();
    let shares: Vec<f64> = targets.iter().map(|t| t / sum).collect();
    let mut workers: Vec<u32> = apportion(&shares, usable as usize, Rounding::LargestRemainder, 0.0)
        .into_iter()
        .map(|w| w as u32)
        .collect();
    // Rounding may overshoot a cap by one block or starve a tiny source.
    for i in 0..workers.len() {
        if workers[i] > env.w_src {
            workers[i] = env.w_src;
        }
    }
    for i in 0..workers.len() {
        if workers[i] == 0 {
            let donor = (0..workers.len())
                .max_by(|a, b| workers[*a].cmp(&workers[*b]).then(b.cmp(a)))
                .expect("non-empty");
            workers[donor] -= 1;
            workers[i] = 1;
        }
    }
    Ok(workers)
}

/// Split worker blocks across sources and derive actor layouts.
///
/// Stage one clusters sources by descending transformation cost, stage two
/// weighs clusters by their cost ratio and applies the worker caps, stage
/// three derives actor counts and raises them until every actor fits in
/// memory.
pub fn auto_partition(sources: &[SourceSpec], env: &ResourceEnvelope) -> Result<Vec<Allocation>> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("auto_partition needs at least one source".into()));
    }
    env.validate()?;
    for s in sources {
        s.validate()?;
    }
    let workers = worker_shares(sources, env)?;
    let clusters = cluster_sources(sources, env.clusters);
    let mut group_of = vec![0u32; sources.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            group_of[i] = if env.grouping { c as u32 } else { sources[i].source_id };
        }
    }

    let mut out = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let w = workers[i];
        let mut actors = w.div_ceil(env.w_actor).max(1);
        let m_d = if env.grouping {
            clusters
                .iter()
                .find(|c| c.contains(&i))
                .map(|c| c.iter().map(|j| sources[*j].access_state.total()).sum())
                .unwrap_or(0)
        } else {
            s.access_state.total()
        };
        loop {
            let wpa = (w / actors).max(1);
            if actor_bytes(m_d, actors, wpa, env) <= env.actor_memory {
                break;
            }
            if actors >= w.max(1) {
                return Err(Error::Capacity {
                    source_id: s.source_id,
                    reason: format!(
                        "needs {} bytes per actor even at {actors} actors, cap is {}",
                        actor_bytes(m_d, actors, wpa, env),
                        env.actor_memory
                    ),
                });
            }
            actors += 1;
        }
        out.push(Allocation {
            source_id: s.source_id,
            actors,
            workers_per_actor: (w / actors).max(1),
            group: group_of[i],
        });
    }
    let mem: u64 = out
        .iter()
        .zip(sources)
        .map(|(a, s)| u64::from(a.actors) * actor_bytes(s.access_state.total(), a.actors, a.workers_per_actor, env))
        .sum();
    let budget = env.total_memory - env.reserved_memory;
    if mem > budget {
        let worst = out
            .iter()
            .zip(sources)
            .max_by_key(|(_, s)| s.access_state.total())
            .map(|(a, _)| a.source_id)
            .unwrap_or(0);
        return Err(Error::Capacity {
            source_id: worst,
            reason: format!("loaders need {mem} bytes but only {budget} are available"),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    /// Scale up when the moving average stays above this weight.
    pub theta: f64,
    /// Reclaim when the moving average stays below this weight.
    pub theta_low: f64,
    /// Consecutive checks required before acting.
    pub window: u32,
    pub alpha: f64,
    /// Actors added per create action.
    pub step_actors: u32,
}

impl Default for ScalingParams {
    fn default() -> Self {
        Self {
            theta: 0.4,
            theta_low: 0.2,
            window: 3,
            alpha: 0.3,
            step_actors: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoScaler {
    pub params: ScalingParams,
    ema: Vec<f64>,
    above: Vec<u32>,
    below: Vec<u32>,
    extra: Vec<u32>,
}

impl AutoScaler {
    pub fn new(params: ScalingParams) -> Self {
        Self {
            params,
            ema: Vec::new(),
            above: Vec::new(),
            below: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    /// Fold one weight observation in and decide on scaling. `alloc` is the
    /// base allocation; returned targets include any live extra actors.
    pub fn observe(&mut self, weights: &[f64], alloc: &[Allocation], w_src: u32) -> Option<ScalingPlan> {
        let p = self.params;
        if self.ema.is_empty() {
            self.ema = weights.to_vec();
            self.above = vec![0; weights.len()];
            self.below = vec![0; weights.len()];
            self.extra = vec![0; weights.len()];
        } else {
            for (e, w) in self.ema.iter_mut().zip(weights) {
                *e = p.alpha * w + (1.0 - p.alpha) * *e;
            }
        }
        let mut actions = Vec::new();
        for (i, e) in self.ema.iter().enumerate() {
            self.above[i] = if *e > p.theta { self.above[i] + 1 } else { 0 };
            self.below[i] = if *e < p.theta_low { self.below[i] + 1 } else { 0 };
            let Some(base) = alloc.get(i) else { continue };
            let source = base.source_id;
            if self.above[i] >= p.window {
                let next = base.actors + self.extra[i] + p.step_actors;
                if next * base.workers_per_actor <= w_src {
                    self.extra[i] += p.step_actors;
                    actions.push(ScalingAction::Create {
                        source,
                        actors: p.step_actors,
                    });
                    actions.push(ScalingAction::Reshard { source });
                }
                self.above[i] = 0;
            } else if self.below[i] >= p.window && self.extra[i] > 0 {
                actions.push(ScalingAction::Reclaim {
                    source,
                    actors: self.extra[i],
                });
                actions.push(ScalingAction::Reshard { source });
                self.extra[i] = 0;
                self.below[i] = 0;
            }
        }
        if actions.is_empty() {
            return None;
        }
        let targets = alloc
            .iter()
            .enumerate()
            .map(|(i, a)| Allocation {
                actors: a.actors + self.extra.get(i).copied().unwrap_or(0),
                ..*a
            })
            .collect();
        Some(ScalingPlan { targets, actions })
    }
}

/// Planner state needed to resume plan generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerCheckpoint {
    pub plan_id: u64,
    pub step: u64,
    pub seed: u64,
    pub alloc: Vec<Allocation>,
    pub scaler: Option<AutoScaler>,
}

impl PlannerCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoints always serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Singleton coordinator producing one plan per step.
pub struct Planner {
    strategy: Strategy,
    schedule: Box<dyn WeightSource>,
    tree: ClientPlaceTree,
    seed: u64,
    next_plan_id: u64,
    step: u64,
    alloc: Vec<Allocation>,
    scaler: Option<AutoScaler>,
    w_src: u32,
    issued: HashSet<SampleId>,
    log: Vec<LoadingPlan>,
}

impl Planner {
    pub fn new(strategy: Strategy, schedule: Box<dyn WeightSource>, tree: ClientPlaceTree, seed: u64) -> Result<Self> {
        strategy.validate()?;
        Ok(Self {
            strategy,
            schedule,
            tree,
            seed,
            next_plan_id: 1,
            step: 0,
            alloc: Vec::new(),
            scaler: None,
            w_src: u32::MAX,
            issued: HashSet::new(),
            log: Vec::new(),
        })
    }

    pub fn with_scaling(mut self, alloc: Vec<Allocation>, params: ScalingParams, w_src: u32) -> Self {
        self.alloc = alloc;
        self.scaler = Some(AutoScaler::new(params));
        self.w_src = w_src;
        self
    }

    pub fn tree(&self) -> &ClientPlaceTree {
        &self.tree
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn log(&self) -> &[LoadingPlan] {
        &self.log
    }

    pub fn set_tree(&mut self, tree: ClientPlaceTree) {
        self.tree = tree;
    }

    /// Produce the plan for the current step and advance.
    pub fn next_plan(&mut self, summaries: &[BufferSummary]) -> Result<PlanOutput> {
        let mut out = generate_plan(
            summaries,
            &self.strategy,
            self.schedule.as_ref(),
            &self.tree,
            self.step,
            self.next_plan_id,
            self.seed,
        )?;
        if let Some(dup) = out.plan.sample_ids().find(|id| self.issued.contains(id)) {
            return Err(Error::Integrity(format!("sample {dup} was already planned this epoch")));
        }
        self.issued.extend(out.plan.sample_ids());
        if let Some(scaler) = self.scaler.as_mut() {
            let w = self.schedule.weights(self.step)?;
            out.plan.scaling = scaler.observe(&w, &self.alloc, self.w_src);
        }
        self.log.push(out.plan.clone());
        self.next_plan_id += 1;
        self.step += 1;
        Ok(out)
    }

    /// Start a new epoch: sample ids may be planned again.
    pub fn reset_epoch(&mut self) {
        self.issued.clear();
    }

    pub fn checkpoint(&self) -> PlannerCheckpoint {
        PlannerCheckpoint {
            plan_id: self.next_plan_id,
            step: self.step,
            seed: self.seed,
            alloc: self.alloc.clone(),
            scaler: self.scaler.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: &PlannerCheckpoint, log: &[LoadingPlan]) {
        self.next_plan_id = ckpt.plan_id;
        self.step = ckpt.step;
        self.seed = ckpt.seed;
        self.alloc = ckpt.alloc.clone();
        self.scaler = ckpt.scaler.clone();
        self.log = log.iter().filter(|p| p.plan_id < ckpt.plan_id).cloned().collect();
        self.issued = self.log.iter().flat_map(|p| p.sample_ids()).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AccessStateSize, CostParams, MixSchedule, ParallelismConfig};
    use crate::orchestration::{Method, MixMode, Strategy};
    use proptest::prelude::*;

    fn spec(id: u32, p: f64) -> SourceSpec {
        SourceSpec {
            source_id: id,
            uri: format!("mem://{id}"),
            record_count: 100,
            transform_cost: p,
            access_state: AccessStateSize::default(),
            modalities: vec![],
        }
    }

    fn fixture_env() -> ResourceEnvelope {
        ResourceEnvelope {
            total_blocks: 35,
            constructor_blocks: 4,
            planner_blocks: 1,
            w_src: 16,
            w_actor: 8,
            clusters: 2,
            ..ResourceEnvelope::default()
        }
    }

    struct Fixed(BufferSummary);

    impl SummarySource for Fixed {
        fn loader_id(&self) -> LoaderId {
            self.0.loader
        }
        fn summarize(&self) -> Result<BufferSummary> {
            Ok(self.0.clone())
        }
    }

    struct Dead(LoaderId);

    impl SummarySource for Dead {
        fn loader_id(&self) -> LoaderId {
            self.0
        }
        fn summarize(&self) -> Result<BufferSummary> {
            Err(Error::LoaderTimeout(self.0.source))
        }
    }

    fn meta(id: u64, source: u32, text: u32) -> SampleMeta {
        SampleMeta {
            sample_id: id,
            source_id: source,
            text_len: text,
            image_patches: 0,
            payload_bytes: 8,
            step_tag: None,
        }
    }

    fn summary(source: u32, metas: Vec<SampleMeta>) -> BufferSummary {
        BufferSummary {
            loader: LoaderId { source, shard: 0 },
            signature: format!("src{source}"),
            metas,
            end_of_stream: false,
        }
    }

    #[test]
    fn gather_collects_and_rejects_partial() {
        let a = Fixed(summary(0, (0..3).map(|i| meta(i, 0, 5)).collect()));
        let got = gather_buffer_summaries([&a as &dyn SummarySource]).unwrap();
        assert_eq!(got[0].metas.len(), 3);
        let d = Dead(LoaderId { source: 1, shard: 0 });
        let err = gather_buffer_summaries([&a as &dyn SummarySource, &d]).unwrap_err();
        assert!(matches!(err, Error::LoaderTimeout(1)));
    }

    #[test]
    fn coalescing_makes_latency_sublinear() {
        let flat: Vec<u64> = [16, 64, 306].iter().map(|n| summary_latency(*n, 1, 10, 2)).collect();
        let tree: Vec<u64> = [16, 64, 306].iter().map(|n| summary_latency(*n, 8, 10, 2)).collect();
        assert!(tree[2] < flat[2]);
        let growth = tree[2] as f64 / tree[0] as f64;
        assert!(growth < 306.0 / 16.0 / 2.0, "{tree:?}");
    }

    #[test]
    fn trivial_strategy_is_fifo() {
        let metas: Vec<_> = (0..5).map(|i| meta(i, 0, 3)).collect();
        let tree = ClientPlaceTree::build(ParallelismConfig::new(1, 1, 1, 1, 1)).unwrap();
        let sched = MixSchedule::constant(vec![1.0], 10).unwrap();
        let out = generate_plan(&[summary(0, metas)], &Strategy::vanilla(5), &sched, &tree, 0, 1, 9).unwrap();
        assert_eq!(out.plan.pops[&0], vec![0, 1, 2, 3, 4]);
        assert_eq!(out.plan.primary().bins[0].samples, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn plans_are_deterministic() {
        let metas: Vec<_> = (0..40).map(|i| meta(i, (i % 2) as u32, 1 + (i * 13 % 50) as u32)).collect();
        let sums = vec![
            summary(0, metas.iter().filter(|m| m.source_id == 0).copied().collect()),
            summary(1, metas.iter().filter(|m| m.source_id == 1).copied().collect()),
        ];
        let tree = ClientPlaceTree::build(ParallelismConfig::new(1, 2, 1, 2, 2)).unwrap();
        let sched = MixSchedule::constant(vec![0.5, 0.5], 10).unwrap();
        let s = Strategy::llm_balance(16, CostParams::default(), Method::KarmarkarKarp);
        let a = generate_plan(&sums, &s, &sched, &tree, 3, 4, 11).unwrap();
        let b = generate_plan(&sums, &s, &sched, &tree, 3, 4, 11).unwrap();
        assert_eq!(a.plan.to_canonical_json(), b.plan.to_canonical_json());
        let present: HashSet<u64> = metas.iter().map(|m| m.sample_id).collect();
        assert!(a.plan.sample_ids().all(|id| present.contains(&id)));
        assert_eq!(a.plan.sample_ids().count(), 16);
    }

    #[test]
    fn planner_ids_increase_and_never_repeat_samples() {
        let tree = ClientPlaceTree::build(ParallelismConfig::new(1, 1, 1, 1, 1)).unwrap();
        let sched = MixSchedule::constant(vec![1.0], 10).unwrap();
        let mut p = Planner::new(Strategy::vanilla(2), Box::new(sched), tree, 1).unwrap();
        let a = p.next_plan(&[summary(0, (0..4).map(|i| meta(i, 0, 2)).collect())]).unwrap();
        let b = p.next_plan(&[summary(0, (2..6).map(|i| meta(i, 0, 2)).collect())]).unwrap();
        assert_eq!((a.plan.plan_id, b.plan.plan_id), (1, 2));
        assert!(p.next_plan(&[summary(0, (0..4).map(|i| meta(i, 0, 2)).collect())]).is_err());
    }

    #[test]
    fn single_source_gets_capped_workers() {
        let env = ResourceEnvelope::default();
        let a = auto_partition(&[spec(0, 1.0)], &env).unwrap();
        assert_eq!(a[0].actors * a[0].workers_per_actor, env.w_src.min(env.available_blocks()));
        assert!(a[0].workers_per_actor <= env.w_actor);
        let env = ResourceEnvelope {
            w_src: 6,
            w_actor: 6,
            ..ResourceEnvelope::default()
        };
        let a = auto_partition(&[spec(0, 1.0)], &env).unwrap();
        assert_eq!((a[0].actors, a[0].workers_per_actor), (1, 6));
    }

    #[test]
    fn four_source_fixture() {
        let srcs: Vec<_> = [8.0, 4.0, 2.0, 1.0].iter().enumerate().map(|(i, p)| spec(i as u32, *p)).collect();
        let a = auto_partition(&srcs, &fixture_env()).unwrap();
        let w: Vec<u32> = a.iter().map(Allocation::workers).collect();
        assert_eq!(w, vec![16, 8, 4, 2]);
        assert_eq!(a[0].actors, 2);
        assert_eq!(w[0] + w[1], 4 * (w[2] + w[3]));
    }

    #[test]
    fn memory_pressure_raises_actor_count() {
        let mut s = spec(0, 1.0);
        s.access_state.rowgroup_buffer_bytes = 4 << 30;
        let env = ResourceEnvelope {
            actor_memory: 3 << 30,
            w_src: 8,
            w_actor: 8,
            ..ResourceEnvelope::default()
        };
        let a = auto_partition(&[s.clone()], &env).unwrap();
        assert!(a[0].actors >= 2);
        let tight = ResourceEnvelope {
            actor_memory: 600 << 20,
            ..env
        };
        match auto_partition(&[s], &tight) {
            Err(Error::Capacity { source_id, .. }) => assert_eq!(source_id, 0),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn grouping_labels_clusters() {
        let srcs: Vec<_> = [8.0, 4.0, 2.0, 1.0].iter().enumerate().map(|(i, p)| spec(i as u32, *p)).collect();
        let plain = auto_partition(&srcs, &fixture_env()).unwrap();
        assert_eq!(plain.iter().map(|a| a.group).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let env = ResourceEnvelope {
            grouping: true,
            ..fixture_env()
        };
        let grouped = auto_partition(&srcs, &env).unwrap();
        assert_eq!(grouped.iter().map(|a| a.group).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    }

    fn replay_ema(ws: &[f64], alpha: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut e = ws[0];
        out.push(e);
        for w in &ws[1..] {
            e = alpha * w + (1.0 - alpha) * e;
            out.push(e);
        }
        out
    }

    fn base() -> Vec<Allocation> {
        vec![
            Allocation {
                source_id: 0,
                actors: 1,
                workers_per_actor: 2,
                group: 0,
            },
            Allocation {
                source_id: 1,
                actors: 1,
                workers_per_actor: 2,
                group: 1,
            },
        ]
    }

    #[test]
    fn constant_low_weights_never_scale() {
        let mut s = AutoScaler::new(ScalingParams::default());
        for _ in 0..20 {
            assert!(s.observe(&[0.3, 0.7], &base()[..1], 16).is_none());
        }
    }

    #[test]
    fn ramp_up_then_down() {
        let up: Vec<f64> = (0..20).map(|i| 0.1 + 0.5 * i as f64 / 19.0).collect();
        let ema = replay_ema(&up, 0.3);
        let mut run = 0;
        let expected = ema
            .iter()
            .position(|e| {
                run = if *e > 0.4 { run + 1 } else { 0 };
                run == 3
            })
            .unwrap();
        let mut s = AutoScaler::new(ScalingParams::default());
        let mut fired = None;
        for (i, w) in up.iter().enumerate() {
            if let Some(p) = s.observe(&[*w, 1.0 - *w], &base(), 16) {
                if p.actions.iter().any(|a| matches!(a, ScalingAction::Create { source: 0, .. })) && fired.is_none() {
                    fired = Some(i);
                    assert_eq!(p.targets[0].actors, 2);
                }
            }
        }
        assert_eq!(fired, Some(expected));

        let down: Vec<f64> = (0..20).map(|i| 0.6 - 0.55 * i as f64 / 19.0).collect();
        let mut history = up.clone();
        history.extend(&down);
        let ema = replay_ema(&history, 0.3);
        let mut run = 0;
        let expected_reclaim = (20..40)
            .find(|i| {
                run = if ema[*i] < 0.2 { run + 1 } else { 0 };
                run == 3
            })
            .unwrap();
        let mut reclaimed = None;
        for (i, w) in down.iter().enumerate() {
            if let Some(p) = s.observe(&[*w, 1.0 - *w], &base(), 16) {
                if p.actions.iter().any(|a| matches!(a, ScalingAction::Reclaim { source: 0, .. })) {
                    reclaimed = Some(20 + i);
                    assert_eq!(p.targets[0].actors, 1);
                    break;
                }
            }
        }
        assert_eq!(reclaimed, Some(expected_reclaim));
    }

    #[test]
    fn checkpoint_round_trip() {
        let tree = ClientPlaceTree::build(ParallelismConfig::new(1, 1, 1, 1, 1)).unwrap();
        let sched = MixSchedule::constant(vec![1.0], 10).unwrap();
        let mut p = Planner::new(Strategy::vanilla(2), Box::new(sched), tree, 1).unwrap();
        p.next_plan(&[summary(0, (0..4).map(|i| meta(i, 0, 2)).collect())]).unwrap();
        let c = p.checkpoint();
        let back = PlannerCheckpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.plan_id, 2);
    }

    #[test]
    fn bernoulli_mode_plans_are_seeded() {
        let metas: Vec<_> = (0..100).map(|i| meta(i, 0, 3)).collect();
        let tree = ClientPlaceTree::build(ParallelismConfig::new(1, 1, 1, 1, 1)).unwrap();
        let sched = MixSchedule::constant(vec![1.0], 10).unwrap();
        let mut s = Strategy::vanilla(10);
        s.mix = MixMode::Bernoulli { batch_size: 10 };
        let a = generate_plan(&[summary(0, metas.clone())], &s, &sched, &tree, 0, 1, 5).unwrap();
        let b = generate_plan(&[summary(0, metas)], &s, &sched, &tree, 0, 1, 6).unwrap();
        assert_ne!(a.plan.pops, b.plan.pops);
    }

    proptest! {
        #[test]
        fn allocation_feasible(costs in prop::collection::vec(1u32..100, 1..12), blocks in 12u32..80, w_src in 1u32..20, w_actor in 1u32..10, g in 1usize..5) {
            let srcs: Vec<_> = costs.iter().enumerate().map(|(i, p)| spec(i as u32, f64::from(*p))).collect();
            let env = ResourceEnvelope { total_blocks: blocks + 5, w_src, w_actor, clusters: g, ..ResourceEnvelope::default() };
            let a = auto_partition(&srcs, &env).unwrap();
            let total: u32 = a.iter().map(Allocation::workers).sum();
            prop_assert!(total <= env.available_blocks());
            for x in &a {
                prop_assert!(x.actors >= 1 && x.workers_per_actor >= 1);
                prop_assert!(x.workers() <= w_src.max(1));
                prop_assert!(x.workers_per_actor <= w_actor);
            }
        }

        #[test]
        fn raising_cost_never_shrinks_share(costs in prop::collection::vec(1u32..50, 2..8), pick in 0usize..8, bump in 1u32..50) {
            let i = pick % costs.len();
            let env = ResourceEnvelope { total_blocks: 45, w_src: 40, w_actor: 8, clusters: 2, ..ResourceEnvelope::default() };
            let srcs: Vec<_> = costs.iter().enumerate().map(|(k, p)| spec(k as u32, f64::from(*p))).collect();
            let mut raised = srcs.clone();
            raised[i].transform_cost += f64::from(bump);
            let before = worker_shares(&srcs, &env).unwrap()[i];
            let after = worker_shares(&raised, &env).unwrap()[i];
            prop_assert!(after >= before, "before {} after {}", before, after);
        }
    }
}
