//! Profiled model description: operators, layer templates, hardware and
//! pipeline settings.

mod expand;
mod load;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rational::{serde_exact, Rational};

pub use expand::{expand_graph, expand_stage_graph, OpOrigin, Part, StageGraph};
pub use load::{load_profile, to_json, ProfileError};
pub use validate::{validate_graph, validate_profile, Issue, ValidationReport};

pub type OpId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Compute,
    Comm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: OpId,
    pub name: String,
    pub kind: OpKind,
    #[serde(with = "serde_exact")]
    pub time_us: Rational,
    pub out_bytes: u64,
    #[serde(default)]
    pub deps: Vec<OpId>,
    /// Only meaningful for embedding/head operators; layer operators are
    /// always schedulable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedulable: Option<bool>,
}

impl OperatorSpec {
    pub fn is_comm(&self) -> bool {
        self.kind == OpKind::Comm
    }
}

/// One basic layer, forward operators first.
///
/// Operators up to and including `checkpoint_id` form the forward pass; the
/// rest are the layer's backward operators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTemplate {
    pub ops: Vec<OperatorSpec>,
    pub fwd_comm_ids: Vec<OpId>,
    pub bwd_comm_ids: Vec<OpId>,
    pub checkpoint_id: OpId,
}

impl LayerTemplate {
    pub fn index_of(&self, id: OpId) -> Option<usize> {
        self.ops.iter().position(|op| op.id == id)
    }

    /// Position of the checkpoint operator.
    ///
    /// # Panics
    /// On a template whose checkpoint id does not exist (rejected by
    /// validation).
    pub fn checkpoint_index(&self) -> usize {
        self.index_of(self.checkpoint_id).expect("checkpoint id validated at load")
    }

    pub fn n_forward(&self) -> usize {
        self.checkpoint_index() + 1
    }

    pub fn forward_ops(&self) -> &[OperatorSpec] {
        &self.ops[..self.n_forward()]
    }

    pub fn backward_ops(&self) -> &[OperatorSpec] {
        &self.ops[self.n_forward()..]
    }

    /// Template-local dependency positions for every operator.
    pub fn dep_indices(&self) -> Vec<Vec<usize>> {
        self.ops.iter().map(|op| op.deps.iter().filter_map(|&d| self.index_of(d)).collect()).collect()
    }

    /// Positions of the forward (`fwd = true`) or backward comm windows, in
    /// declaration order.
    pub fn comm_window_indices(&self, fwd: bool) -> Vec<usize> {
        let ids = if fwd { &self.fwd_comm_ids } else { &self.bwd_comm_ids };
        ids.iter().filter_map(|&id| self.index_of(id)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub n_layers: u32,
    /// Model-state bytes (parameters, gradients, optimizer state) per layer.
    pub static_bytes: u64,
    pub layer: LayerTemplate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embed_ops: Vec<OperatorSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_ops: Vec<OperatorSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub mem_budget_bytes: u64,
    #[serde(with = "serde_exact")]
    pub comm_scale: Rational,
}

impl HardwareProfile {
    /// Operator time on this hardware: comm operators are scaled.
    pub fn effective_time(&self, op: &OperatorSpec) -> Rational {
        match op.kind {
            OpKind::Compute => op.time_us.clone(),
            OpKind::Comm => &op.time_us * &self.comm_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[default]
    #[serde(rename = "1f1b")]
    OneFOneB,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_stages: u32,
    pub n_microbatches: u32,
    #[serde(default)]
    pub schedule_kind: ScheduleKind,
}

impl PipelineConfig {
    /// In-flight forward activations a stage holds before its first backward.
    pub fn n_batch(&self, stage: usize) -> usize {
        (self.n_stages as usize - stage).min(self.n_microbatches as usize)
    }

    pub fn is_last(&self, stage: usize) -> bool {
        stage + 1 == self.n_stages as usize
    }
}

/// A loaded profile document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub model: ModelProfile,
    pub hardware: HardwareProfile,
    pub pipeline: PipelineConfig,
}

/// Operators in topological order plus the derived inverse-dependency map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatorGraph {
    pub ops: Vec<OperatorSpec>,
    pub users: BTreeMap<OpId, Vec<OpId>>,
}

impl OperatorGraph {
    pub fn new(ops: Vec<OperatorSpec>) -> Self {
        let users = derive_users(&ops);
        OperatorGraph { ops, users }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, id: OpId) -> Option<usize> {
        self.ops.iter().position(|op| op.id == id)
    }

    /// Dependency positions per operator. Dangling ids are skipped; callers
    /// validate first.
    pub fn dep_indices(&self) -> Vec<Vec<usize>> {
        let pos: BTreeMap<OpId, usize> = self.ops.iter().enumerate().map(|(i, op)| (op.id, i)).collect();
        self.ops.iter().map(|op| op.deps.iter().filter_map(|d| pos.get(d).copied()).collect()).collect()
    }

    /// User positions per operator, ascending.
    pub fn user_indices(&self) -> Vec<Vec<usize>> {
        let mut users = vec![Vec::new(); self.ops.len()];
        for (i, deps) in self.dep_indices().into_iter().enumerate() {
            for d in deps {
                if !users[d].contains(&i) {
                    users[d].push(i);
                }
            }
        }
        for u in &mut users {
            u.sort_unstable();
        }
        users
    }

    pub fn comm_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_comm()).count()
    }
}

pub(crate) fn derive_users(ops: &[OperatorSpec]) -> BTreeMap<OpId, Vec<OpId>> {
    let mut users: BTreeMap<OpId, Vec<OpId>> = ops.iter().map(|op| (op.id, Vec::new())).collect();
    for op in ops {
        for &d in &op.deps {
            let entry = users.entry(d).or_default();
            if !entry.contains(&op.id) {
                entry.push(op.id);
            }
        }
    }
    for list in users.values_mut() {
        list.sort_unstable();
    }
    users
}
