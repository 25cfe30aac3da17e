//! Bottom-up hierarchical aggregation into a node tree.
//!
//! Leaves are client models. At each level `l` the surviving models are
//! grouped into connected components of the graph whose edges join pairs
//! with cosine similarity `>= tau_l`; each multi-member component is
//! averaged into a new node at level `l`, singletons are carried up
//! unchanged. When level `H` is reached with more than one survivor, all of
//! them are merged into the root.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::params::{cosine_similarity, weighted_average, FlatParams, ParamError};

pub type ClientId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("level {level} outside 0..={height}")]
    LevelOutOfRange { level: usize, height: usize },
    #[error("no leaves supplied")]
    EmptyInput,
    #[error("client {0} appears more than once")]
    DuplicateClient(ClientId),
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// `tau_l = tau0 + beta * l / H`, clamped to at most 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSchedule {
    pub tau0: f64,
    pub beta: f64,
    pub height: usize,
}

impl ThresholdSchedule {
    pub fn new(tau0: f64, beta: f64, height: usize) -> Result<Self, TreeError> {
        if height == 0 {
            return Err(TreeError::InvalidSchedule("height must be >= 1".into()));
        }
        if !tau0.is_finite() || !beta.is_finite() {
            return Err(TreeError::InvalidSchedule("tau0 and beta must be finite".into()));
        }
        Ok(Self { tau0, beta, height })
    }
}

pub fn threshold_at(schedule: &ThresholdSchedule, level: usize) -> Result<f64, TreeError> {
    if level > schedule.height {
        return Err(TreeError::LevelOutOfRange {
            level,
            height: schedule.height,
        });
    }
    let tau = schedule.tau0 + schedule.beta * (level as f64 / schedule.height as f64);
    Ok(tau.min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    /// Level at which the node was created (0 for leaves).
    pub level: usize,
    /// Highest level the node was carried to by promotion. Equal to `level`
    /// for nodes that were merged into a parent right away.
    pub top_level: usize,
    pub params: FlatParams,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub source_clients: BTreeSet<ClientId>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Clusters formed while building one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    pub level: usize,
    pub threshold: f64,
    pub clusters: Vec<Vec<NodeId>>,
    /// True when the level hit the height limit with several clusters and
    /// everything was merged into the root.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeTree {
    nodes: Vec<TreeNode>,
    root: NodeId,
    max_height: usize,
    levels: Vec<LevelRecord>,
}

impl NodeTree {
    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut TreeNode {
        &mut self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        self.node(self.root)
    }

    pub fn root_id(&self) -> NodeId {
        self.root
    }

    /// The configured height limit `H`.
    pub fn max_height(&self) -> usize {
        self.max_height
    }

    /// Level of the root, i.e. the realised height of the tree.
    pub fn depth(&self) -> usize {
        self.root().level
    }

    pub fn levels(&self) -> &[LevelRecord] {
        &self.levels
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn leaf_for(&self, client: ClientId) -> Option<&TreeNode> {
        self.leaves().find(|n| n.source_clients.contains(&client))
    }

    pub fn clients(&self) -> &BTreeSet<ClientId> {
        &self.root().source_clients
    }

    /// Nodes alive at `level`: created at or below it and not yet merged.
    pub fn nodes_at_level(&self, level: usize) -> Vec<&TreeNode> {
        self.nodes
            .iter()
            .filter(|n| n.level <= level && level <= n.top_level)
            .collect()
    }

    /// Node ids in breadth-first order from the root; children in stored order.
    pub fn breadth_first(&self) -> Vec<NodeId> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            order.extend(self.node(order[i]).children.iter().copied());
            i += 1;
        }
        order
    }

    /// Structured-text dump, one line per node in id order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "tree root={} depth={} max_height={} nodes={}",
            self.root,
            self.depth(),
            self.max_height,
            self.nodes.len()
        );
        for n in &self.nodes {
            let parent = n.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let children = join_or_dash(n.children.iter());
            let clients = join_or_dash(n.source_clients.iter());
            let _ = writeln!(
                out,
                "node id={} level={} top_level={} parent={} children={} clients={} samples={} checksum={}",
                n.id,
                n.level,
                n.top_level,
                parent,
                children,
                clients,
                n.params.sample_count(),
                n.params.checksum()
            );
        }
        for rec in &self.levels {
            let clusters: Vec<String> = rec
                .clusters
                .iter()
                .map(|c| join_or_dash(c.iter()))
                .collect();
            let _ = writeln!(
                out,
                "level l={} tau={:.6} forced={} clusters={}",
                rec.level,
                rec.threshold,
                rec.forced,
                clusters.join("|")
            );
        }
        out
    }

    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.dump().as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn join_or_dash<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    let parts: Vec<String> = items.map(|x| x.to_string()).collect();
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(",")
    }
}

/// Pairwise cosine similarity matrix, in input order.
pub fn similarity_matrix(models: &[&FlatParams]) -> Result<Vec<Vec<f64>>, ParamError> {
    let n = models.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        sim[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine_similarity(models[i], models[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

/// Connected components of the `similarity >= tau` graph. Clusters come
/// back sorted by their smallest id, members sorted by id.
pub fn cluster_level<Id>(models: &[(Id, &FlatParams)], tau: f64) -> Result<Vec<Vec<Id>>, ParamError>
where
    Id: Ord + Copy,
{
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by_key(|&i| models[i].0);
    let sorted: Vec<&FlatParams> = order.iter().map(|&i| models[i].1).collect();
    let sim = similarity_matrix(&sorted)?;

    let mut parent: Vec<usize> = (0..sorted.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if sim[i][j] >= tau {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                // smaller index stays representative
                if a != b {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut clusters: Vec<Vec<Id>> = Vec::new();
    let mut slot_of_root: Vec<Option<usize>> = vec![None; sorted.len()];
    for i in 0..sorted.len() {
        let r = find(&mut parent, i);
        let slot = *slot_of_root[r].get_or_insert_with(|| {
            clusters.push(Vec::new());
            clusters.len() - 1
        });
        clusters[slot].push(models[order[i]].0);
    }
    Ok(clusters)
}

/// Builds the node tree for one round.
pub fn build_tree(
    leaves: &[(ClientId, FlatParams)],
    schedule: &ThresholdSchedule,
) -> Result<NodeTree, TreeError> {
    let mut nodes = make_leaves(leaves)?;
    let mut levels = Vec::new();
    let mut current: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();

    if current.len() == 1 {
        let root = merge(&mut nodes, &current, 1)?;
        return Ok(NodeTree {
            nodes,
            root,
            max_height: schedule.height,
            levels: vec![LevelRecord {
                level: 1,
                threshold: threshold_at(schedule, 1)?,
                clusters: vec![current],
                forced: true,
            }],
        });
    }

    for level in 1..=schedule.height {
        let tau = threshold_at(schedule, level)?;
        let members: Vec<(NodeId, &FlatParams)> =
            current.iter().map(|&id| (id, &nodes[id.0].params)).collect();
        let mut clusters = cluster_level(&members, tau)?;
        let forced = level == schedule.height && clusters.len() > 1;
        levels.push(LevelRecord {
            level,
            threshold: tau,
            clusters: clusters.clone(),
            forced,
        });
        if forced {
            clusters = vec![current.clone()];
        }

        let mut next = Vec::with_capacity(clusters.len());
        for cluster in &clusters {
            if cluster.len() > 1 {
                next.push(merge(&mut nodes, cluster, level)?);
            } else {
                let id = cluster[0];
                nodes[id.0].top_level = level;
                next.push(id);
            }
        }
        current = next;
        if current.len() == 1 {
            break;
        }
    }

    Ok(NodeTree {
        nodes,
        root: current[0],
        max_height: schedule.height,
        levels,
    })
}

/// Single-level aggregation: every leaf is a direct child of the root.
pub fn build_star(leaves: &[(ClientId, FlatParams)], max_height: usize) -> Result<NodeTree, TreeError> {
    let mut nodes = make_leaves(leaves)?;
    let ids: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();
    let root = merge(&mut nodes, &ids, 1)?;
    Ok(NodeTree {
        nodes,
        root,
        max_height: max_height.max(1),
        levels: vec![LevelRecord {
            level: 1,
            threshold: f64::NEG_INFINITY,
            clusters: vec![ids],
            forced: false,
        }],
    })
}

fn make_leaves(leaves: &[(ClientId, FlatParams)]) -> Result<Vec<TreeNode>, TreeError> {
    if leaves.is_empty() {
        return Err(TreeError::EmptyInput);
    }
    let mut sorted: Vec<&(ClientId, FlatParams)> = leaves.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(TreeError::DuplicateClient(pair[0].0));
        }
    }
    let layout = sorted[0].1.layout();
    if sorted.iter().any(|(_, p)| p.layout() != layout) {
        return Err(ParamError::LayoutMismatch.into());
    }
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, (client, params))| TreeNode {
            id: NodeId(i),
            level: 0,
            top_level: 0,
            params: params.clone(),
            parent: None,
            children: Vec::new(),
            source_clients: BTreeSet::from([*client]),
        })
        .collect())
}

fn merge(nodes: &mut Vec<TreeNode>, children: &[NodeId], level: usize) -> Result<NodeId, TreeError> {
    let params = weighted_average(children.iter().map(|c| &nodes[c.0].params))?;
    let id = NodeId(nodes.len());
    let mut source_clients = BTreeSet::new();
    for c in children {
        source_clients.extend(nodes[c.0].source_clients.iter().copied());
        nodes[c.0].parent = Some(id);
        nodes[c.0].top_level = level - 1;
    }
    nodes.push(TreeNode {
        id,
        level,
        top_level: level,
        params,
        parent: None,
        children: children.to_vec(),
        source_clients,
    });
    Ok(id)
}

/// `[leaf, parent, ..., root]` for the leaf holding `client`.
pub fn chain_to_root(tree: &NodeTree, client: ClientId) -> Result<Vec<&TreeNode>, TreeError> {
    let mut node = tree.leaf_for(client).ok_or(TreeError::UnknownClient(client))?;
    let mut chain = vec![node];
    while let Some(p) = node.parent {
        node = tree.node(p);
        chain.push(node);
    }
    Ok(chain)
}
