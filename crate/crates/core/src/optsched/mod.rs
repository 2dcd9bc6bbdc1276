//! Whole-stage recomputation MILP.
//!
//! Every operator instance of a stage (all microbatches, forward and
//! backward, in 1F1B order) is one phase. `R[t][i]` says operator `i` runs in
//! phase `t`, `S[t][i]` that its output is resident when phase `t` begins,
//! `U[t][k]` tracks memory inside a phase and `F[t][d][i]` marks that `d` is
//! released right after `i`. Recomputation inside a comm phase is free.

mod build;
mod check;
mod phase;
mod program;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::profile::{HardwareProfile, OperatorGraph, ValidationReport};
use crate::rational::{Fixed3, Rational};

pub use build::{build_opt_model, OptInstance};
pub use check::{check_schedule, CheckIssue};
pub use phase::{stage_phase_graph, PhaseGraph};
pub use program::schedule_to_program;

/// Numbers the MILP and every independent checker work from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptProblem {
    pub graph: OperatorGraph,
    /// Effective time per phase (comm operators already scaled).
    pub times: Vec<Rational>,
    pub mems: Vec<u64>,
    pub comm: Vec<bool>,
    /// Operators that may only run in their own phase.
    pub pinned: Vec<bool>,
    pub deps: Vec<Vec<usize>>,
    pub users: Vec<Vec<usize>>,
    pub budget_bytes: u64,
    pub static_bytes: u64,
}

impl OptProblem {
    pub fn new(graph: &OperatorGraph, hw: &HardwareProfile, static_bytes: u64) -> OptProblem {
        OptProblem {
            times: graph.ops.iter().map(|op| hw.effective_time(op)).collect(),
            mems: graph.ops.iter().map(|op| op.out_bytes).collect(),
            comm: graph.ops.iter().map(|op| op.is_comm()).collect(),
            pinned: graph.ops.iter().map(|op| op.schedulable == Some(false)).collect(),
            deps: graph.dep_indices(),
            users: graph.user_indices(),
            budget_bytes: hw.mem_budget_bytes,
            static_bytes,
            graph: graph.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Time of the mandatory executions: every phase runs its own operator.
    pub fn mandatory_us(&self) -> Rational {
        self.times.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OptError {
    #[error("static memory {static_bytes} B does not fit the {budget_bytes} B budget")]
    BudgetTooSmall { static_bytes: u64, budget_bytes: u64 },
    #[error("empty operator graph")]
    EmptyGraph,
    #[error("invalid operator graph: {0:?}")]
    InvalidGraph(ValidationReport),
    #[error("no schedule fits the memory budget")]
    Infeasible,
    #[error("search budget exhausted before any schedule was found")]
    TimedOut,
    #[error(transparent)]
    Ilp(#[from] crate::ilp::IlpError),
    #[error("solver schedule failed re-verification: {0:?}")]
    CheckFailed(Vec<CheckIssue>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScheduleStatus {
    Optimal,
    Feasible { gap_us: Rational },
}

/// Decoded solver output. Pairs are `(phase, operator)`, both 1-indexed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecomputationSchedule {
    pub stage: usize,
    pub status: ScheduleStatus,
    pub objective_us: Rational,
    pub keep: Vec<(usize, usize)>,
    pub recompute: Vec<(usize, usize)>,
    pub overlapped: Vec<(usize, usize)>,
    /// Highest memory reached inside each phase.
    pub peak_bytes: Vec<u64>,
}

impl RecomputationSchedule {
    /// Resident sets at the start of every phase plus one trailing empty
    /// set, 0-indexed.
    pub fn keep_sets(&self, n: usize) -> Vec<BTreeSet<usize>> {
        let mut out = vec![BTreeSet::new(); n + 1];
        for &(t, i) in &self.keep {
            if t >= 1 && t <= n {
                out[t - 1].insert(i.wrapping_sub(1));
            }
        }
        out
    }

    /// Operators run in every phase, own operator included, 0-indexed.
    pub fn run_sets(&self, n: usize) -> Vec<BTreeSet<usize>> {
        let mut out: Vec<BTreeSet<usize>> = (0..n).map(|t| BTreeSet::from([t])).collect();
        for &(t, i) in &self.recompute {
            if t >= 1 && t <= n {
                out[t - 1].insert(i.wrapping_sub(1));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            stage: usize,
            status: &'static str,
            #[serde(skip_serializing_if = "Option::is_none")]
            gap_us: Option<Fixed3>,
            objective_us: Fixed3,
            keep: &'a [(usize, usize)],
            recompute: &'a [(usize, usize)],
            overlapped: &'a [(usize, usize)],
            peak_bytes: &'a [u64],
        }
        let (status, gap_us) = match &self.status {
            ScheduleStatus::Optimal => ("optimal", None),
            ScheduleStatus::Feasible { gap_us } => ("feasible", Some(Fixed3(gap_us.clone()))),
        };
        serde_json::to_string_pretty(&Doc {
            stage: self.stage,
            status,
            gap_us,
            objective_us: Fixed3(self.objective_us.clone()),
            keep: &self.keep,
            recompute: &self.recompute,
            overlapped: &self.overlapped,
            peak_bytes: &self.peak_bytes,
        })
        .expect("schedule serializes")
    }
}

/// Solves a built instance with branch and bound and re-checks the result.
pub fn solve_opt(inst: &OptInstance, time_limit_ms: u64, stage: usize) -> Result<RecomputationSchedule, OptError> {
    let sol = crate::ilp::solve_bnb(&inst.model, time_limit_ms)?;
    let sched = inst.decode(&sol, stage)?;
    let issues = check_schedule(&sched, &inst.problem);
    if !issues.is_empty() {
        return Err(OptError::CheckFailed(issues));
    }
    Ok(sched)
}

#[cfg(test)]
mod tests;
