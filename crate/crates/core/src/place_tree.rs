//! Logical model of the trainer device mesh.
//!
//! Leaves are global ranks with `(pp, dp, cp, tp)` coordinates; interior
//! levels follow the fixed order PP -> DP -> CP -> TP, and the default rank
//! numbering has TP varying fastest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParallelismConfig;

pub type Rank = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "PP")]
    Pp,
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "CP")]
    Cp,
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "WORLD")]
    World,
}

impl Axis {
    /// Depth of the level in the tree, root children at 0.
    fn depth(self) -> usize {
        match self {
            Axis::Pp => 0,
            Axis::Dp => 1,
            Axis::Cp => 2,
            Axis::Tp | Axis::World => 3,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PP" => Ok(Axis::Pp),
            "DP" => Ok(Axis::Dp),
            "CP" => Ok(Axis::Cp),
            "TP" => Ok(Axis::Tp),
            "WORLD" => Ok(Axis::World),
            _ => Err(Error::UnknownAxis(s.to_string())),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Pp => "PP",
            Axis::Dp => "DP",
            Axis::Cp => "CP",
            Axis::Tp => "TP",
            Axis::World => "WORLD",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub pp: u32,
    pub dp: u32,
    pub cp: u32,
    pub tp: u32,
}

impl Coord {
    pub fn get(&self, axis: Axis) -> Option<u32> {
        match axis {
            Axis::Pp => Some(self.pp),
            Axis::Dp => Some(self.dp),
            Axis::Cp => Some(self.cp),
            Axis::Tp => Some(self.tp),
            Axis::World => None,
        }
    }

    fn with_zero(mut self, axis: Axis) -> Self {
        match axis {
            Axis::Pp => self.pp = 0,
            Axis::Dp => self.dp = 0,
            Axis::Cp => self.cp = 0,
            Axis::Tp => self.tp = 0,
            Axis::World => {}
        }
        self
    }

    /// Coordinates from the root down to and including `depth`.
    fn prefix(&self, depth: usize) -> [u32; 4] {
        let full = [self.pp, self.dp, self.cp, self.tp];
        let mut out = [0; 4];
        out[..=depth].copy_from_slice(&full[..=depth]);
        out
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pp={} dp={} cp={} tp={}", self.pp, self.dp, self.cp, self.tp)
    }
}

/// Hook for overriding how leaves are numbered.
pub trait TreeBuilder {
    /// Coordinates of rank `0..world` in rank order.
    fn leaves(&self, config: &ParallelismConfig) -> Vec<Coord>;
}

/// Canonical numbering: PP slowest, TP fastest.
#[derive(Debug, Default, Clone, Copy)]
pub struct CanonicalBuilder;

impl TreeBuilder for CanonicalBuilder {
    fn leaves(&self, c: &ParallelismConfig) -> Vec<Coord> {
        let mut out = Vec::with_capacity(c.world_size() as usize);
        for pp in 0..c.pp {
            for dp in 0..c.dp {
                for cp in 0..c.cp {
                    for tp in 0..c.tp {
                        out.push(Coord { pp, dp, cp, tp });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSet {
    pub axis: Axis,
    pub group_size: usize,
    /// Leaf ranks of each bucket, in tree order.
    pub buckets: Vec<Vec<Rank>>,
}

impl BucketSet {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn bucket_of(&self, rank: Rank) -> Option<usize> {
        self.buckets.iter().position(|b| b.contains(&rank))
    }
}

/// Leaves that fetch data versus leaves served by a broadcast root.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsumerSet {
    pub dims: Vec<Axis>,
    pub fetchers: Vec<Rank>,
    /// Receiver rank -> the fetching rank broadcasting to it.
    pub receivers: BTreeMap<Rank, Rank>,
}

impl ConsumerSet {
    pub fn everyone(tree: &ClientPlaceTree) -> Self {
        Self {
            dims: Vec::new(),
            fetchers: (0..tree.world_size()).collect(),
            receivers: BTreeMap::new(),
        }
    }

    pub fn is_fetcher(&self, rank: Rank) -> bool {
        self.fetchers.binary_search(&rank).is_ok()
    }

    pub fn root_of(&self, rank: Rank) -> Option<Rank> {
        self.receivers.get(&rank).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapEntry {
    pub new_rank: Rank,
    /// Old rank holding the data for this slot; `None` marks a cold rank.
    pub from: Option<Rank>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RemapTable {
    pub entries: Vec<RemapEntry>,
    /// Old ranks without a successor.
    pub retired: Vec<Rank>,
}

impl RemapTable {
    pub fn is_identity(&self) -> bool {
        self.retired.is_empty() && self.entries.iter().all(|e| e.from == Some(e.new_rank))
    }

    pub fn cold(&self) -> impl Iterator<Item = Rank> + '_ {
        self.entries.iter().filter(|e| e.from.is_none()).map(|e| e.new_rank)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPlaceTree {
    config: ParallelismConfig,
    leaves: Vec<Coord>,
    index: HashMap<Coord, Rank>,
}

impl ClientPlaceTree {
    pub fn build(config: ParallelismConfig) -> Result<Self> {
        Self::build_with(config, &CanonicalBuilder)
    }

    pub fn build_with(config: ParallelismConfig, builder: &dyn TreeBuilder) -> Result<Self> {
        config.validate()?;
        let leaves = builder.leaves(&config);
        if leaves.len() != config.world_size() as usize {
            return Err(Error::InvalidConfig(format!(
                "tree builder produced {} leaves for a world of {}",
                leaves.len(),
                config.world_size()
            )));
        }
        let mut index = HashMap::with_capacity(leaves.len());
        for (rank, c) in leaves.iter().enumerate() {
            let inside = c.pp < config.pp && c.dp < config.dp && c.cp < config.cp && c.tp < config.tp;
            if !inside || index.insert(*c, rank as Rank).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "tree builder produced an invalid or repeated coordinate {c}"
                )));
            }
        }
        Ok(Self {
            config,
            leaves,
            index,
        })
    }

    pub fn config(&self) -> &ParallelismConfig {
        &self.config
    }

    pub fn world_size(&self) -> u32 {
        self.leaves.len() as u32
    }

    pub fn coord(&self, rank: Rank) -> Result<Coord> {
        self.leaves.get(rank as usize).copied().ok_or(Error::UnknownRank(rank))
    }

    pub fn rank_of(&self, coord: &Coord) -> Option<Rank> {
        self.index.get(coord).copied()
    }

    pub fn axis_size(&self, axis: Axis) -> u32 {
        match axis {
            Axis::Pp => self.config.pp,
            Axis::Dp => self.config.dp,
            Axis::Cp => self.config.cp,
            Axis::Tp => self.config.tp,
            Axis::World => self.world_size(),
        }
    }

    /// Leaf sets of every node at the `axis` level, in tree order.
    pub fn nodes_at(&self, axis: Axis) -> Vec<Vec<Rank>> {
        self.nodes_where(axis, |_| true)
    }

    fn nodes_where(&self, axis: Axis, keep: impl Fn(&Coord) -> bool) -> Vec<Vec<Rank>> {
        if axis == Axis::World {
            let mut ranks: Vec<(Coord, Rank)> =
                self.index.iter().filter(|(c, _)| keep(c)).map(|(c, r)| (*c, *r)).collect();
            ranks.sort();
            return ranks.into_iter().map(|(_, r)| vec![r]).collect();
        }
        let depth = axis.depth();
        let mut groups: BTreeMap<[u32; 4], Vec<(Coord, Rank)>> = BTreeMap::new();
        for (c, r) in &self.index {
            if keep(c) {
                groups.entry(c.prefix(depth)).or_default().push((*c, *r));
            }
        }
        groups
            .into_values()
            .map(|mut leaves| {
                leaves.sort();
                leaves.into_iter().map(|(_, r)| r).collect()
            })
            .collect()
    }

    /// One bucket per node at `axis`, merged into groups of `group_size`
    /// adjacent nodes. `WORLD` yields one bucket per leaf.
    pub fn buckets_at(&self, axis: Axis, group_size: usize) -> Result<BucketSet> {
        if axis == Axis::Tp {
            return Err(Error::UnknownAxis("TP is not a distribution axis".into()));
        }
        if group_size == 0 {
            return Err(Error::InvalidInput("group_size must be at least 1".into()));
        }
        Ok(group(axis, group_size, self.nodes_at(axis)))
    }

    /// Buckets for the data path of a pipeline: nodes are taken from the
    /// first pipeline stage and every bucket also lists the ranks holding the
    /// same `(dp, cp, tp)` position in later stages.
    pub fn pipeline_buckets(&self, axis: Axis, group_size: usize) -> Result<BucketSet> {
        if axis == Axis::World || self.config.pp == 1 {
            return self.buckets_at(axis, group_size);
        }
        if axis == Axis::Tp {
            return Err(Error::UnknownAxis("TP is not a distribution axis".into()));
        }
        if group_size == 0 {
            return Err(Error::InvalidInput("group_size must be at least 1".into()));
        }
        let stage0 = self.nodes_where(axis, |c| c.pp == 0);
        let extended = stage0
            .into_iter()
            .map(|ranks| {
                let mut all = Vec::with_capacity(ranks.len() * self.config.pp as usize);
                for stage in 0..self.config.pp {
                    for &r in &ranks {
                        let mut c = self.leaves[r as usize];
                        c.pp = stage;
                        all.push(self.index[&c]);
                    }
                }
                all
            })
            .collect();
        Ok(group(axis, group_size, extended))
    }

    /// Leaves with coordinate 0 along every dimension in `dims` fetch data;
    /// all others receive it by broadcast from that leaf.
    pub fn consumers_after_broadcast(&self, dims: &[Axis]) -> Result<ConsumerSet> {
        if let Some(bad) = dims.iter().find(|d| **d == Axis::World) {
            return Err(Error::UnknownAxis(format!("cannot broadcast along {bad}")));
        }
        let mut fetchers = Vec::new();
        let mut receivers = BTreeMap::new();
        for (rank, c) in self.leaves.iter().enumerate() {
            let root = dims.iter().fold(*c, |acc, d| acc.with_zero(*d));
            if root == *c {
                fetchers.push(rank as Rank);
            } else {
                receivers.insert(rank as Rank, self.index[&root]);
            }
        }
        fetchers.sort_unstable();
        Ok(ConsumerSet {
            dims: dims.to_vec(),
            fetchers,
            receivers,
        })
    }

    /// Build the tree for `new_config` plus a rank remapping table.
    ///
    /// Ranks keep their index: slot `r` in the new world inherits resident
    /// data from old rank `r` when it existed, otherwise it starts cold.
    pub fn reshard(&self, new_config: ParallelismConfig) -> Result<(ClientPlaceTree, RemapTable)> {
        let tree = ClientPlaceTree::build(new_config)?;
        let old = self.world_size();
        let new = tree.world_size();
        let entries = (0..new)
            .map(|r| RemapEntry {
                new_rank: r,
                from: (r < old).then_some(r),
            })
            .collect();
        let retired = (new..old).collect();
        Ok((tree, RemapTable { entries, retired }))
    }

    /// Indented text rendering used by `--dump-topology`.
    pub fn dump(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "tree pp={} dp={} cp={} tp={} world={}",
            c.pp,
            c.dp,
            c.cp,
            c.tp,
            self.world_size()
        );
        for pp in 0..c.pp {
            let _ = writeln!(out, "PP{pp}");
            for dp in 0..c.dp {
                let _ = writeln!(out, "  DP{dp}");
                for cp in 0..c.cp {
                    let _ = writeln!(out, "    CP{cp}");
                    for tp in 0..c.tp {
                        let coord = Coord { pp, dp, cp, tp };
                        let _ = writeln!(out, "      TP{tp} rank={}", self.index[&coord]);
                    }
                }
            }
        }
        out
    }
}

fn group(axis: Axis, group_size: usize, nodes: Vec<Vec<Rank>>) -> BucketSet {
    let buckets = nodes.chunks(group_size).map(|c| c.concat()).collect();
    BucketSet {
        axis,
        group_size,
        buckets,
    }
}
