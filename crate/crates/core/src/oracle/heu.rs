//! Exhaustive per-layer plan search.

use num_traits::Zero;

use crate::heusched::{HeuContext, StageRole};
use crate::profile::{HardwareProfile, LayerTemplate};
use crate::rational::Rational;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeuOracle {
    pub objective_us: Rational,
    pub keep: Vec<bool>,
    /// A witness placement; retained operators are reported in phase 5.
    pub phase: Vec<u8>,
}

pub const MAX_ORACLE_OPS: usize = 12;

/// Best plan by critical-path time, then most retained operators, then the
/// lexicographically smallest retention vector. `None` if even retaining
/// only the last operator breaks the budget.
pub fn solve_heu_oracle(layer: &LayerTemplate, hw: &HardwareProfile, ctx: &HeuContext) -> Option<HeuOracle> {
    let ops = layer.forward_ops();
    let n = ops.len();
    assert!(n <= MAX_ORACLE_OPS, "oracle is limited to {MAX_ORACLE_OPS} operators");
    let times: Vec<Rational> = ops.iter().map(|op| hw.effective_time(op)).collect();
    let deps = layer.dep_indices();
    let l = ctx.n_layers as u64;
    let total: u64 = ops.iter().map(|op| op.out_bytes).sum();

    let mut best: Option<HeuOracle> = None;
    for mask in 0u32..(1 << n) {
        let keep: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        if !keep[n - 1] {
            continue;
        }
        let kept: u64 = (0..n).filter(|&i| keep[i]).map(|i| ops[i].out_bytes).sum();
        let delta = match ctx.delta {
            crate::heusched::Delta::Fixed(b) => b,
            crate::heusched::Delta::AllDiscarded => total - kept,
        };
        let base = ctx.static_bytes + l * ctx.n_batch as u64 * kept + delta;
        if base > ctx.budget_bytes {
            continue;
        }
        let mut search = Search {
            ops_bytes: ops.iter().map(|op| op.out_bytes).collect(),
            comm: ops.iter().map(|op| op.is_comm()).collect(),
            times: &times,
            deps: &deps,
            keep: &keep,
            ctx,
            room: ctx.budget_bytes - base,
            phase: vec![5; n],
            load: vec![Rational::zero(); 4],
            fwd_bytes: 0,
            best: None,
        };
        search.go(0, Rational::zero());
        let Some((objective_us, phase)) = search.best else { continue };
        let better = match &best {
            None => true,
            Some(b) => {
                let (ka, kb) = (keep.iter().filter(|&&k| k).count(), b.keep.iter().filter(|&&k| k).count());
                objective_us < b.objective_us
                    || (objective_us == b.objective_us && (ka > kb || (ka == kb && keep < b.keep)))
            }
        };
        if better {
            best = Some(HeuOracle { objective_us, keep, phase });
        }
    }
    best
}

struct Search<'a> {
    ops_bytes: Vec<u64>,
    comm: Vec<bool>,
    times: &'a [Rational],
    deps: &'a [Vec<usize>],
    keep: &'a [bool],
    ctx: &'a HeuContext,
    room: u64,
    phase: Vec<u8>,
    load: Vec<Rational>,
    fwd_bytes: u64,
    best: Option<(Rational, Vec<u8>)>,
}

impl Search<'_> {
    fn go(&mut self, i: usize, cost: Rational) {
        if self.best.as_ref().is_some_and(|(b, _)| cost >= *b) {
            return;
        }
        if i == self.phase.len() {
            self.best = Some((cost, self.phase.clone()));
            return;
        }
        if self.keep[i] {
            self.phase[i] = 5;
            return self.go(i + 1, cost);
        }
        let l = self.ctx.n_layers as u64;
        for &t in self.ctx.role.phases() {
            if self.comm[i] && t != 5 {
                continue;
            }
            if self.deps[i].iter().any(|&j| !self.keep[j] && self.phase[j] > t) {
                continue;
            }
            if t == 5 {
                self.phase[i] = 5;
                self.go(i + 1, &cost + &self.times[i]);
                continue;
            }
            let w = t as usize - 1;
            let load = &self.load[w] + &self.times[i];
            if load > self.ctx.ctime_us[w] {
                continue;
            }
            let extra = if t <= 2 && self.ctx.role == StageRole::Interior { l * self.ops_bytes[i] } else { 0 };
            if self.fwd_bytes + extra > self.room {
                continue;
            }
            let saved = std::mem::replace(&mut self.load[w], load);
            self.fwd_bytes += extra;
            self.phase[i] = t;
            self.go(i + 1, cost.clone());
            self.fwd_bytes -= extra;
            self.load[w] = saved;
        }
        self.phase[i] = 5;
    }
}
