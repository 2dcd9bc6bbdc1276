use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_traits::Signed;

use super::{derive_users, OpId, OperatorGraph, OperatorSpec, Profile};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Issue {
    DuplicateId { id: OpId },
    DanglingDep { op: OpId, dep: OpId },
    ForwardDep { op: OpId, dep: OpId },
    NegativeTime { op: OpId },
    UserMapMismatch { id: OpId },
    UnknownKey { path: String },
    CommIdNotFound { id: OpId },
    CommIdNotComm { id: OpId },
    CommIdWrongPass { id: OpId },
    TooManyCommIds { list: &'static str, count: usize },
    CheckpointMissing { id: OpId },
    CheckpointNotSink { op: OpId },
    InvalidCount { field: &'static str, reason: &'static str },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::DuplicateId { id } => write!(f, "duplicate operator id {id}"),
            Issue::DanglingDep { op, dep } => write!(f, "op {op} depends on unknown id {dep}"),
            Issue::ForwardDep { op, dep } => write!(f, "cycle or forward dep: op {op} -> {dep}"),
            Issue::NegativeTime { op } => write!(f, "op {op} has negative time"),
            Issue::UserMapMismatch { id } => write!(f, "users map disagrees with deps at id {id}"),
            Issue::UnknownKey { path } => write!(f, "unknown key {path}"),
            Issue::CommIdNotFound { id } => write!(f, "comm id {id} not in layer"),
            Issue::CommIdNotComm { id } => write!(f, "comm id {id} is not a comm operator"),
            Issue::CommIdWrongPass { id } => write!(f, "comm id {id} listed for the wrong pass"),
            Issue::TooManyCommIds { list, count } => write!(f, "{list} has {count} ids, at most 2 allowed"),
            Issue::CheckpointMissing { id } => write!(f, "checkpoint id {id} not in layer"),
            Issue::CheckpointNotSink { op } => write!(f, "forward op {op} does not reach the checkpoint"),
            Issue::InvalidCount { field, reason } => write!(f, "{field}: {reason}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Lists every structural problem of a graph. Empty iff well-formed.
pub fn validate_graph(graph: &OperatorGraph) -> ValidationReport {
    let mut issues = op_list_issues(&graph.ops);
    let expected = derive_users(&graph.ops);
    let keys: BTreeSet<OpId> = expected.keys().chain(graph.users.keys()).copied().collect();
    for id in keys {
        let want = expected.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        let mut have = graph.users.get(&id).cloned().unwrap_or_default();
        have.sort_unstable();
        if want != have.as_slice() {
            issues.push(Issue::UserMapMismatch { id });
        }
    }
    ValidationReport { issues }
}

fn op_list_issues(ops: &[OperatorSpec]) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut pos: BTreeMap<OpId, usize> = BTreeMap::new();
    for (i, op) in ops.iter().enumerate() {
        if pos.insert(op.id, i).is_some() {
            issues.push(Issue::DuplicateId { id: op.id });
        }
    }
    for (i, op) in ops.iter().enumerate() {
        if op.time_us.is_negative() {
            issues.push(Issue::NegativeTime { op: op.id });
        }
        for &dep in &op.deps {
            match pos.get(&dep) {
                None => issues.push(Issue::DanglingDep { op: op.id, dep }),
                Some(&j) if j >= i => issues.push(Issue::ForwardDep { op: op.id, dep }),
                _ => {}
            }
        }
    }
    issues
}

/// Checks a loaded profile: operator lists, the layer template's comm and
/// checkpoint declarations, and the numeric settings.
pub fn validate_profile(p: &Profile) -> Vec<Issue> {
    let layer = &p.model.layer;
    let mut issues = op_list_issues(&layer.ops);
    issues.extend(op_list_issues(&p.model.embed_ops));
    issues.extend(op_list_issues(&p.model.head_ops));

    let ckpt = layer.index_of(layer.checkpoint_id);
    if ckpt.is_none() {
        issues.push(Issue::CheckpointMissing { id: layer.checkpoint_id });
    }
    for (list, ids, fwd) in [("fwd_comm_ids", &layer.fwd_comm_ids, true), ("bwd_comm_ids", &layer.bwd_comm_ids, false)]
    {
        if ids.len() > 2 {
            issues.push(Issue::TooManyCommIds { list, count: ids.len() });
        }
        for &id in ids {
            match layer.index_of(id) {
                None => issues.push(Issue::CommIdNotFound { id }),
                Some(i) => {
                    if !layer.ops[i].is_comm() {
                        issues.push(Issue::CommIdNotComm { id });
                    }
                    if let Some(c) = ckpt {
                        if (i <= c) != fwd {
                            issues.push(Issue::CommIdWrongPass { id });
                        }
                    }
                }
            }
        }
    }

    // Every forward op must feed the checkpoint, which makes it the unique
    // sink of the forward subgraph.
    if let Some(c) = ckpt {
        if issues.is_empty() {
            let deps = layer.dep_indices();
            let mut reaches = vec![false; c + 1];
            reaches[c] = true;
            for i in (0..=c).rev() {
                if reaches[i] {
                    for &d in &deps[i] {
                        reaches[d] = true;
                    }
                }
            }
            for (i, r) in reaches.iter().enumerate() {
                if !r {
                    issues.push(Issue::CheckpointNotSink { op: layer.ops[i].id });
                }
            }
        }
    }

    let m = &p.model;
    let pl = &p.pipeline;
    if m.n_layers == 0 {
        issues.push(Issue::InvalidCount { field: "model.n_layers", reason: "must be at least 1" });
    }
    if pl.n_stages == 0 {
        issues.push(Issue::InvalidCount { field: "pipeline.n_stages", reason: "must be at least 1" });
    }
    if pl.n_microbatches < pl.n_stages.max(1) {
        issues.push(Issue::InvalidCount { field: "pipeline.n_microbatches", reason: "must be at least n_stages" });
    }
    if p.hardware.mem_budget_bytes == 0 {
        issues.push(Issue::InvalidCount { field: "hardware.mem_budget_bytes", reason: "must be positive" });
    }
    if !p.hardware.comm_scale.is_positive() {
        issues.push(Issue::InvalidCount { field: "hardware.comm_scale", reason: "must be positive" });
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::OpKind;
    use crate::rational::int;

    fn op(id: OpId, deps: &[OpId]) -> OperatorSpec {
        OperatorSpec {
            id,
            name: format!("op{id}"),
            kind: OpKind::Compute,
            time_us: int(1),
            out_bytes: 1,
            deps: deps.to_vec(),
            schedulable: None,
        }
    }

    #[test]
    fn chain_is_clean() {
        let g = OperatorGraph::new(vec![op(0, &[]), op(1, &[0]), op(2, &[1])]);
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn duplicate_and_forward() {
        let g = OperatorGraph::new(vec![op(0, &[1]), op(1, &[]), op(1, &[])]);
        let issues = validate_graph(&g).issues;
        assert!(issues.contains(&Issue::DuplicateId { id: 1 }));
        assert!(issues.contains(&Issue::ForwardDep { op: 0, dep: 1 }));
    }

    #[test]
    fn dangling_and_negative() {
        let mut bad = op(1, &[7]);
        bad.time_us = int(-1);
        let g = OperatorGraph::new(vec![op(0, &[]), bad]);
        let issues = validate_graph(&g).issues;
        assert!(issues.contains(&Issue::DanglingDep { op: 1, dep: 7 }));
        assert!(issues.contains(&Issue::NegativeTime { op: 1 }));
    }

    #[test]
    fn tampered_users() {
        let mut g = OperatorGraph::new(vec![op(0, &[]), op(1, &[0])]);
        g.users.insert(1, vec![0]);
        assert_eq!(validate_graph(&g).issues, vec![Issue::UserMapMismatch { id: 1 }]);
    }
}
