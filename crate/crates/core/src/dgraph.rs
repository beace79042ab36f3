//! Sample lineage graph.
//!
//! Each node is a sample in one processing state; successive states of the
//! same sample are linked by edges, bins and constructors appear as extra
//! nodes reached through dependency edges. The graph only holds metadata.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SampleId, SampleMeta, SourceId};
use crate::place_tree::{Axis, BucketSet, ConsumerSet};

pub type NodeId = usize;
pub type ConstructorId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleState {
    Buffered,
    Sampled,
    Bucketed,
    Binned,
    Assembled,
    Delivered,
}

impl SampleState {
    pub const ALL: [SampleState; 6] = [
        SampleState::Buffered,
        SampleState::Sampled,
        SampleState::Bucketed,
        SampleState::Binned,
        SampleState::Assembled,
        SampleState::Delivered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SampleState::Buffered => "buffered",
            SampleState::Sampled => "sampled",
            SampleState::Bucketed => "bucketed",
            SampleState::Binned => "binned",
            SampleState::Assembled => "assembled",
            SampleState::Delivered => "delivered",
        }
    }
}

impl fmt::Display for SampleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Producer {
    Source(SourceId),
    Planner,
    Constructor(ConstructorId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Sample { sample: SampleId, state: SampleState },
    Bin { bucket: usize, bin: usize },
    Constructor(ConstructorId),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    pub cost: Option<f64>,
    pub bucket: Option<usize>,
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DNode {
    pub kind: NodeKind,
    pub producer: Producer,
    pub annotations: Annotations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Transformation,
    Dependency,
    /// State advance without any mutation of the sample.
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
}

/// Which buffered samples a graph tracks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    All,
    /// Samples carrying at least one image patch.
    Image,
    /// Samples carrying text tokens.
    Text,
    Sources(Vec<SourceId>),
}

impl Selector {
    pub fn matches(&self, meta: &SampleMeta) -> bool {
        match self {
            Selector::All => true,
            Selector::Image => meta.image_patches > 0,
            Selector::Text => meta.text_len > 0,
            Selector::Sources(s) => s.contains(&meta.source_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DGraph {
    selector: Selector,
    order: Vec<SampleId>,
    metas: HashMap<SampleId, SampleMeta>,
    nodes: Vec<DNode>,
    edges: Vec<DEdge>,
    roots: HashMap<SampleId, NodeId>,
    heads: HashMap<SampleId, NodeId>,
    bins: BTreeMap<(usize, usize), NodeId>,
    constructors: BTreeMap<ConstructorId, NodeId>,
    bindings: BTreeMap<SampleId, ConstructorId>,
    pub(crate) axis: Option<Axis>,
    pub(crate) buckets: Option<BucketSet>,
    pub(crate) consumers: Option<ConsumerSet>,
}

impl DGraph {
    /// One `buffered` root node per buffered sample matching `selector`.
    pub fn init_from_buffer(buffer: &[SampleMeta], selector: Selector) -> Result<Self> {
        if buffer.is_empty() {
            return Err(Error::InvalidInput("buffer metadata is empty".into()));
        }
        let mut g = DGraph {
            selector,
            order: Vec::new(),
            metas: HashMap::new(),
            nodes: Vec::new(),
            edges: Vec::new(),
            roots: HashMap::new(),
            heads: HashMap::new(),
            bins: BTreeMap::new(),
            constructors: BTreeMap::new(),
            bindings: BTreeMap::new(),
            axis: None,
            buckets: None,
            consumers: None,
        };
        let selector = g.selector.clone();
        for meta in buffer.iter().filter(|m| selector.matches(m)) {
            if g.metas.insert(meta.sample_id, *meta).is_some() {
                return Err(Error::InvalidInput(format!(
                    "sample {} appears twice in the buffer",
                    meta.sample_id
                )));
            }
            let id = g.push_node(DNode {
                kind: NodeKind::Sample {
                    sample: meta.sample_id,
                    state: SampleState::Buffered,
                },
                producer: Producer::Source(meta.source_id),
                annotations: Annotations::default(),
            });
            g.order.push(meta.sample_id);
            g.roots.insert(meta.sample_id, id);
            g.heads.insert(meta.sample_id, id);
        }
        if g.order.is_empty() {
            tracing::warn!(selector = ?g.selector, "selector matched no buffered samples");
        }
        Ok(g)
    }

    fn push_node(&mut self, node: DNode) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn selector(&self) -> &Selector {
        &self.selector
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Tracked samples in buffer order.
    pub fn samples(&self) -> &[SampleId] {
        &self.order
    }

    pub fn nodes(&self) -> &[DNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[DEdge] {
        &self.edges
    }

    pub fn meta(&self, id: SampleId) -> Result<&SampleMeta> {
        self.metas.get(&id).ok_or(Error::NotFound(id))
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.metas.contains_key(&id)
    }

    pub fn state(&self, id: SampleId) -> Result<SampleState> {
        let head = *self.heads.get(&id).ok_or(Error::NotFound(id))?;
        match self.nodes[head].kind {
            NodeKind::Sample { state, .. } => Ok(state),
            _ => unreachable!("sample heads are sample nodes"),
        }
    }

    pub fn annotations(&self, id: SampleId) -> Result<Annotations> {
        let head = *self.heads.get(&id).ok_or(Error::NotFound(id))?;
        Ok(self.nodes[head].annotations)
    }

    pub fn cost(&self, id: SampleId) -> Option<f64> {
        self.heads.get(&id).and_then(|h| self.nodes[*h].annotations.cost)
    }

    /// Samples currently in `state`, in buffer order.
    pub fn samples_in(&self, state: SampleState) -> Vec<SampleId> {
        self.order
            .iter()
            .copied()
            .filter(|id| self.state(*id).ok() == Some(state))
            .collect()
    }

    /// Samples at or past `state`, in buffer order.
    pub fn samples_at_least(&self, state: SampleState) -> Vec<SampleId> {
        self.order
            .iter()
            .copied()
            .filter(|id| self.state(*id).is_ok_and(|s| s >= state))
            .collect()
    }

    pub fn binding(&self, id: SampleId) -> Option<ConstructorId> {
        self.bindings.get(&id).copied()
    }

    pub fn bindings(&self) -> &BTreeMap<SampleId, ConstructorId> {
        &self.bindings
    }

    pub fn axis(&self) -> Option<Axis> {
        self.axis
    }

    pub fn buckets(&self) -> Option<&BucketSet> {
        self.buckets.as_ref()
    }

    pub fn consumers(&self) -> Option<&ConsumerSet> {
        self.consumers.as_ref()
    }

    pub(crate) fn annotate(&mut self, id: SampleId, f: impl FnOnce(&mut Annotations)) -> Result<()> {
        let head = *self.heads.get(&id).ok_or(Error::NotFound(id))?;
        f(&mut self.nodes[head].annotations);
        Ok(())
    }

    /// Move every sample in `ids` to `to`, adding one node and edge each.
    pub fn advance(&mut self, ids: &[SampleId], to: SampleState, kind: EdgeKind, producer: Option<Producer>) -> Result<()> {
        for &id in ids {
            self.advance_one(id, to, kind, producer)?;
        }
        self.verify()
    }

    fn advance_one(&mut self, id: SampleId, to: SampleState, kind: EdgeKind, producer: Option<Producer>) -> Result<()> {
        let head = *self.heads.get(&id).ok_or(Error::NotFound(id))?;
        let from = self.state(id)?;
        if to <= from {
            return Err(Error::StateRegression {
                sample: id,
                from: from.name(),
                to: to.name(),
            });
        }
        let prev = &self.nodes[head];
        let node = DNode {
            kind: NodeKind::Sample { sample: id, state: to },
            producer: producer.unwrap_or(prev.producer),
            annotations: prev.annotations,
        };
        let new = self.push_node(node);
        self.edges.push(DEdge {
            from: head,
            to: new,
            kind,
        });
        self.heads.insert(id, new);
        Ok(())
    }

    /// Group `members` into the bin node `(bucket, bin)` via dependency edges.
    pub(crate) fn link_bin(&mut self, bucket: usize, bin: usize, members: &[SampleId]) -> Result<()> {
        let node = match self.bins.get(&(bucket, bin)) {
            Some(n) => *n,
            None => {
                let n = self.push_node(DNode {
                    kind: NodeKind::Bin { bucket, bin },
                    producer: Producer::Planner,
                    annotations: Annotations {
                        cost: None,
                        bucket: Some(bucket),
                        bin: Some(bin),
                    },
                });
                self.bins.insert((bucket, bin), n);
                n
            }
        };
        let mut total = 0.0;
        for &id in members {
            let head = *self.heads.get(&id).ok_or(Error::NotFound(id))?;
            total += self.nodes[head].annotations.cost.unwrap_or(0.0);
            self.edges.push(DEdge {
                from: head,
                to: node,
                kind: EdgeKind::Dependency,
            });
        }
        let agg = self.nodes[node].annotations.cost.get_or_insert(0.0);
        *agg += total;
        Ok(())
    }

    /// Aggregated cost recorded on each bin node.
    pub fn bin_costs(&self) -> BTreeMap<(usize, usize), f64> {
        self.bins
            .iter()
            .map(|(k, n)| (*k, self.nodes[*n].annotations.cost.unwrap_or(0.0)))
            .collect()
    }

    /// Bind samples to their consuming constructor.
    ///
    /// Every `binned` sample must be covered; a sample may be bound once.
    pub fn bind_consumers(&mut self, assignment: &[(SampleId, ConstructorId)]) -> Result<()> {
        let mut seen = BTreeMap::new();
        for &(id, c) in assignment {
            if seen.insert(id, c).is_some() || self.bindings.contains_key(&id) {
                return Err(Error::DuplicateBinding(id));
            }
            if self.state(id)? < SampleState::Sampled {
                return Err(Error::InvalidInput(format!("sample {id} was not sampled and cannot be bound")));
            }
        }
        if let Some(missing) = self
            .samples_in(SampleState::Binned)
            .into_iter()
            .find(|id| !seen.contains_key(id) && !self.bindings.contains_key(id))
        {
            return Err(Error::IncompletePlan(format!("binned sample {missing} has no consumer")));
        }
        for (id, c) in seen {
            let target = match self.constructors.get(&c) {
                Some(n) => *n,
                None => {
                    let n = self.push_node(DNode {
                        kind: NodeKind::Constructor(c),
                        producer: Producer::Constructor(c),
                        annotations: Annotations::default(),
                    });
                    self.constructors.insert(c, n);
                    n
                }
            };
            self.edges.push(DEdge {
                from: self.heads[&id],
                to: target,
                kind: EdgeKind::Dependency,
            });
            self.bindings.insert(id, c);
        }
        self.verify()
    }

    /// States visited by `id`, from its root to its current state.
    pub fn lineage(&self, id: SampleId) -> Result<Vec<SampleState>> {
        let mut node = *self.roots.get(&id).ok_or(Error::NotFound(id))?;
        let mut path = Vec::new();
        let mut successors: HashMap<NodeId, NodeId> = HashMap::new();
        for e in &self.edges {
            if matches!(self.nodes[e.to].kind, NodeKind::Sample { .. }) {
                successors.insert(e.from, e.to);
            }
        }
        loop {
            if let NodeKind::Sample { state, .. } = self.nodes[node].kind {
                path.push(state);
            }
            match successors.get(&node) {
                Some(next) => node = *next,
                None => break,
            }
        }
        Ok(path)
    }

    /// Topological-sort check.
    pub fn verify(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut out: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for e in &self.edges {
            indegree[e.to] += 1;
            out[e.from].push(e.to);
        }
        let mut stack: Vec<NodeId> = (0..n).filter(|i| indegree[*i] == 0).collect();
        let mut visited = 0;
        while let Some(v) = stack.pop() {
            visited += 1;
            for &w in &out[v] {
                indegree[w] -= 1;
                if indegree[w] == 0 {
                    stack.push(w);
                }
            }
        }
        if visited == n {
            Ok(())
        } else {
            Err(Error::Cycle)
        }
    }

    /// Graphviz rendering for debugging.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dgraph {\n  rankdir=LR;\n");
        for (i, node) in self.nodes.iter().enumerate() {
            let label = match node.kind {
                NodeKind::Sample { sample, state } => match node.annotations.cost {
                    Some(c) => format!("{sample}:{c}\\n{state}"),
                    None => format!("{sample}\\n{state}"),
                },
                NodeKind::Bin { bucket, bin } => format!("bucket {bucket} bin {bin}"),
                NodeKind::Constructor(c) => format!("constructor {c}"),
            };
            let shape = match node.kind {
                NodeKind::Sample { .. } => "ellipse",
                NodeKind::Bin { .. } => "box",
                NodeKind::Constructor(_) => "house",
            };
            let _ = writeln!(out, "  n{i} [label=\"{label}\", shape={shape}];");
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Transformation => "solid",
                EdgeKind::Dependency => "dashed",
                EdgeKind::Null => "dotted",
            };
            let _ = writeln!(out, "  n{} -> n{} [style={style}];", e.from, e.to);
        }
        out.push_str("}\n");
        out
    }
}
