use std::collections::BTreeSet;

use super::{OptProblem, PhaseGraph, RecomputationSchedule};
use crate::pipesim::{Slot, StageProgram, Step, Task, TensorKey};

/// Turns a solved schedule into a simulator program. Recomputations in a
/// comm phase are hosted by that comm operator; elsewhere they run on demand
/// ahead of the phase's own operator. A tensor is released right after its
/// last reader in the phase unless it is kept for the next phase.
pub fn schedule_to_program(
    sched: &RecomputationSchedule,
    phase: &PhaseGraph,
    p: &OptProblem,
    stage: usize,
) -> StageProgram {
    let n = p.len();
    let keeps = sched.keep_sets(n);
    let runs = sched.run_sets(n);
    let key = |i: usize| {
        let (mb, op) = phase.instances[i];
        TensorKey { microbatch: mb, op }
    };
    let mut resident: BTreeSet<usize> = BTreeSet::new();
    let mut slots = Vec::new();

    for (mb, dir, range) in &phase.slots {
        let mut steps = Vec::new();
        for t in range.clone() {
            let next = &keeps[t + 1];
            // Already-resident tensors are not produced again.
            let order: Vec<usize> = runs[t].iter().copied().filter(|&i| i == t || !resident.contains(&i)).collect();
            let mut tasks = Vec::new();
            for (pos, &i) in order.iter().enumerate() {
                resident.insert(i);
                let mut frees = Vec::new();
                if i != t {
                    let mut cands: BTreeSet<usize> = p.deps[i].iter().copied().collect();
                    cands.insert(i);
                    for d in cands {
                        let read_later = p.users[d].iter().any(|j| order[pos + 1..].contains(j));
                        if resident.contains(&d) && !read_later && !next.contains(&d) {
                            resident.remove(&d);
                            frees.push(key(d));
                        }
                    }
                }
                tasks.push(Task {
                    key: key(i),
                    bytes: p.mems[i],
                    duration: p.times[i].clone(),
                    needs: p.deps[i].iter().map(|&d| key(d)).collect(),
                    frees,
                });
            }
            let own = tasks.pop().expect("phase runs its own operator");
            if p.comm[t] {
                steps.push(Step::Comm { task: own, hosted: tasks });
            } else {
                steps.extend(tasks.into_iter().map(Step::Recompute));
                steps.push(Step::Compute(own));
            }
            let dropped: Vec<usize> = resident.iter().copied().filter(|i| !next.contains(i)).collect();
            if !dropped.is_empty() {
                for i in &dropped {
                    resident.remove(i);
                }
                steps.push(Step::Free(dropped.into_iter().map(key).collect()));
            }
        }
        slots.push(Slot { microbatch: *mb, dir: *dir, steps });
    }
    StageProgram { stage, static_bytes: p.static_bytes, slots }
}
