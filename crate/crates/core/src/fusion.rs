//! Top-down dissemination of aggregated parameters.
//!
//! After a tree is built, each parent pushes its parameters into its
//! children, root first. In progressive mode only the variable layers are
//! blended, with a coefficient that shrinks towards the leaves; fixed layers
//! stay exactly as the child had them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::params::{FlatParams, LayerPartition, ParamError};
use crate::tree::{ClientId, NodeTree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// How parent parameters reach a child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// The child is overwritten by the parent, all layers.
    Direct,
    /// All layers are blended with the level coefficient.
    Full,
    /// Variable layers are blended, fixed layers are kept.
    #[default]
    Progressive,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Direct, FusionMode::Full, FusionMode::Progressive];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Direct => "direct",
            FusionMode::Full => "full",
            FusionMode::Progressive => "progressive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub epsilon0: f64,
    pub omega: f64,
    pub partition: LayerPartition,
}

impl FusionConfig {
    pub fn new(epsilon0: f64, omega: f64, partition: LayerPartition) -> Result<Self, FusionError> {
        if !(0.0..=1.0).contains(&epsilon0) {
            return Err(FusionError::InvalidConfig(format!(
                "epsilon0 must be in [0, 1], got {epsilon0}"
            )));
        }
        if !(omega > 0.0 && omega < 1.0) {
            return Err(FusionError::InvalidConfig(format!(
                "omega must be in (0, 1), got {omega}"
            )));
        }
        Ok(Self {
            epsilon0,
            omega,
            partition,
        })
    }
}

/// `min(1, epsilon0 * omega^(1 - level))` for a child at `child_level`.
pub fn fusion_coefficient(config: &FusionConfig, child_level: usize) -> f64 {
    let exponent = 1.0 - child_level as f64;
    (config.epsilon0 * config.omega.powf(exponent)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct Dissemination {
    /// The tree with every non-root node updated.
    pub tree: NodeTree,
    /// Updated leaf parameters keyed by client.
    pub leaves: BTreeMap<ClientId, FlatParams>,
}

/// Progressive dissemination.
pub fn disseminate(tree: &NodeTree, config: &FusionConfig) -> Result<Dissemination, FusionError> {
    disseminate_with(tree, config, FusionMode::Progressive)
}

/// Walks the tree breadth-first from the root. Each child is updated from
/// its parent's already-updated parameters.
pub fn disseminate_with(
    tree: &NodeTree,
    config: &FusionConfig,
    mode: FusionMode,
) -> Result<Dissemination, FusionError> {
    let layout = tree.root().params.layout().clone();
    config.partition.validate(&layout)?;
    // index ranges that are blended in this mode
    let blended: Vec<std::ops::Range<usize>> = layout
        .layers()
        .iter()
        .filter(|l| mode != FusionMode::Progressive || !config.partition.is_fixed(&l.name))
        .map(|l| l.range())
        .collect();

    let mut out = tree.clone();
    for id in tree.breadth_first() {
        let children = tree.node(id).children.clone();
        if children.is_empty() {
            continue;
        }
        let parent_values = out.node(id).params.values().to_vec();
        for child in children {
            let node = out.node_mut(child);
            let eps = match mode {
                FusionMode::Direct => 1.0,
                FusionMode::Full | FusionMode::Progressive => fusion_coefficient(config, node.level),
            };
            let values = node.params.values_mut();
            for r in &blended {
                for i in r.clone() {
                    values[i] = blend(eps, parent_values[i], values[i]);
                }
            }
        }
    }

    let leaves = out
        .leaves()
        .map(|n| {
            let client = *n.source_clients.iter().next().expect("leaf has one client");
            (client, n.params.clone())
        })
        .collect();
    Ok(Dissemination { tree: out, leaves })
}

#[inline]
fn blend(eps: f64, parent: f64, old: f64) -> f64 {
    if eps == 1.0 {
        parent
    } else if eps == 0.0 {
        old
    } else {
        eps * parent + (1.0 - eps) * old
    }
}
