//! Replays a schedule phase by phase. Works only from the problem data, never
//! from the MILP.

use std::collections::BTreeSet;

use num_traits::Zero;

use super::{OptProblem, RecomputationSchedule};
use crate::rational::Rational;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckIssue {
    /// A pair names a phase or operator outside the graph, or an operator
    /// that cannot exist yet in that phase.
    OutOfRange {
        phase: usize,
        op: usize,
    },
    /// Operator `op` runs in `phase` but input `dep` is neither recomputed
    /// nor resident.
    DependencyViolation {
        phase: usize,
        op: usize,
        dep: usize,
    },
    /// `op` is kept into `phase` without existing in the previous phase.
    RetentionViolation {
        phase: usize,
        op: usize,
    },
    /// A pinned operator (embedding/head) is recomputed.
    PinnedRecompute {
        phase: usize,
        op: usize,
    },
    CommInCommPhase {
        phase: usize,
        op: usize,
    },
    /// An input of a comm operator is recomputed inside that operator's own
    /// window, after the transfer would have to start.
    CommInputRecomputed {
        phase: usize,
        op: usize,
    },
    OverlapBudgetViolation {
        phase: usize,
        load_us: Rational,
        capacity_us: Rational,
    },
    OverlapListMismatch,
    BudgetViolation {
        phase: usize,
        bytes: u64,
    },
    PeakMismatch {
        phase: usize,
        reported: u64,
        replayed: u64,
    },
    CostMismatch {
        reported: Rational,
        replayed: Rational,
    },
}

/// Lists every violated rule; empty for a valid schedule. Indices in the
/// issues are 1-indexed like the schedule.
pub fn check_schedule(sched: &RecomputationSchedule, p: &OptProblem) -> Vec<CheckIssue> {
    let n = p.len();
    let mut issues = Vec::new();
    let mut runs: Vec<BTreeSet<usize>> = (0..n).map(|t| BTreeSet::from([t])).collect();
    let mut keeps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n + 1];
    for &(t, i) in &sched.recompute {
        if t == 0 || i == 0 || t > n || i >= t {
            issues.push(CheckIssue::OutOfRange { phase: t, op: i });
        } else {
            runs[t - 1].insert(i - 1);
        }
    }
    for &(t, i) in &sched.keep {
        if t <= 1 || i == 0 || t > n || i >= t {
            issues.push(CheckIssue::OutOfRange { phase: t, op: i });
        } else {
            keeps[t - 1].insert(i - 1);
        }
    }
    let mut expected_overlap: Vec<(usize, usize)> =
        sched.recompute.iter().copied().filter(|&(t, _)| t >= 1 && t <= n && p.comm[t - 1]).collect();
    expected_overlap.sort_unstable();
    let mut overlap = sched.overlapped.clone();
    overlap.sort_unstable();
    if overlap != expected_overlap {
        issues.push(CheckIssue::OverlapListMismatch);
    }

    let mut cost = Rational::zero();
    for t in 0..n {
        let run = &runs[t];
        let have = &keeps[t];
        let next = &keeps[t + 1];
        for &i in run {
            for &d in &p.deps[i] {
                if !run.contains(&d) && !have.contains(&d) {
                    issues.push(CheckIssue::DependencyViolation { phase: t + 1, op: i + 1, dep: d + 1 });
                }
            }
            if i != t && p.pinned[i] {
                issues.push(CheckIssue::PinnedRecompute { phase: t + 1, op: i + 1 });
            }
            if i != t && p.comm[t] && p.comm[i] {
                issues.push(CheckIssue::CommInCommPhase { phase: t + 1, op: i + 1 });
            }
            if i != t && p.comm[t] && p.deps[t].contains(&i) {
                issues.push(CheckIssue::CommInputRecomputed { phase: t + 1, op: i + 1 });
            }
        }
        for &i in next {
            if i > t || !(run.contains(&i) || have.contains(&i)) {
                issues.push(CheckIssue::RetentionViolation { phase: t + 2, op: i + 1 });
            }
        }
        if p.comm[t] {
            let load: Rational = run.iter().filter(|&&i| i != t).map(|&i| &p.times[i]).sum();
            if load > p.times[t] {
                issues.push(CheckIssue::OverlapBudgetViolation {
                    phase: t + 1,
                    load_us: load,
                    capacity_us: p.times[t].clone(),
                });
            }
            cost += &p.times[t];
        } else {
            cost += run.iter().map(|&i| &p.times[i]).sum::<Rational>();
        }

        // Memory: resident set, then each operator in index order writes its
        // output; after it, inputs (and itself) with no later reader in the
        // phase and no retention into the next phase are released.
        let mut bytes = p.static_bytes + have.iter().map(|&i| p.mems[i]).sum::<u64>();
        let mut peak = bytes;
        let order: Vec<usize> = run.iter().copied().collect();
        for (pos, &i) in order.iter().enumerate() {
            bytes += p.mems[i];
            peak = peak.max(bytes);
            if i == t {
                break;
            }
            let mut released: BTreeSet<usize> = p.deps[i].iter().copied().collect();
            released.insert(i);
            for d in released {
                let read_later = p.users[d].iter().any(|j| order[pos + 1..].contains(j));
                if !read_later && !next.contains(&d) {
                    bytes -= p.mems[d];
                }
            }
        }
        if peak > p.budget_bytes {
            issues.push(CheckIssue::BudgetViolation { phase: t + 1, bytes: peak });
        }
        match sched.peak_bytes.get(t) {
            Some(&reported) if reported == peak => {}
            other => issues.push(CheckIssue::PeakMismatch {
                phase: t + 1,
                reported: other.copied().unwrap_or(0),
                replayed: peak,
            }),
        }
    }
    if cost != sched.objective_us {
        issues.push(CheckIssue::CostMismatch { reported: sched.objective_us.clone(), replayed: cost });
    }
    issues
}
