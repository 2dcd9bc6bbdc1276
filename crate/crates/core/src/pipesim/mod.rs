//! Discrete-event replay of 1F1B pipeline execution.
//!
//! Each stage runs a [`StageProgram`]: its forward and backward slots in 1F1B
//! order, each a list of steps on two resources (compute and the
//! tensor-parallel comm link). Recomputation either rides inside a comm step
//! (hosted), runs on demand on the critical path, or fills a synchronisation
//! stall at the start of a cool-down slot.

mod report;
mod sim;

use serde::Serialize;

use crate::rational::Rational;

pub use report::{emit_trace, memory_trace, report_json, TraceFormat};
pub use sim::{simulate, simulate_isolated, stage_period, SimError, SimOptions};

/// One activation of one microbatch, named by its stage-graph position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TensorKey {
    pub microbatch: u32,
    pub op: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    Fwd,
    Bwd,
}

/// An operator execution: reads `needs`, writes `key`, and releases
/// `frees` once it ends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub key: TensorKey,
    pub bytes: u64,
    pub duration: Rational,
    pub needs: Vec<TensorKey>,
    pub frees: Vec<TensorKey>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Compute(Task),
    /// A comm operator. `hosted` recomputations run on the idle compute
    /// units while it is in flight; the comm output is written when the step
    /// ends.
    Comm {
        task: Task,
        hosted: Vec<Task>,
    },
    Recompute(Task),
    /// Only allowed before any other step of a slot.
    StallRecompute(Task),
    Free(Vec<TensorKey>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub microbatch: u32,
    pub dir: Dir,
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageProgram {
    pub stage: usize,
    pub static_bytes: u64,
    pub slots: Vec<Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fwd,
    Bwd,
    CommFwd,
    CommBwd,
    Recompute,
    StallRecompute,
    #[serde(rename = "p2p_transfer")]
    P2PTransfer,
    Stall,
}

impl EventKind {
    pub fn on_comm(self) -> bool {
        matches!(self, EventKind::CommFwd | EventKind::CommBwd | EventKind::P2PTransfer)
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Fwd => "fwd",
            EventKind::Bwd => "bwd",
            EventKind::CommFwd => "comm_fwd",
            EventKind::CommBwd => "comm_bwd",
            EventKind::Recompute => "recompute",
            EventKind::StallRecompute => "stall_recompute",
            EventKind::P2PTransfer => "p2p_transfer",
            EventKind::Stall => "stall",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimEvent {
    pub stage: usize,
    pub microbatch: u32,
    pub kind: EventKind,
    pub op_id: Option<u32>,
    pub start_us: Rational,
    pub end_us: Rational,
    pub overlapped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageStats {
    /// Compute-resource time, recomputation included.
    pub busy_us: Rational,
    pub comm_us: Rational,
    pub stall_us: Rational,
    pub recompute_on_demand_us: Rational,
    pub recompute_overlapped_us: Rational,
}

/// How the forward activations read by backward slots were produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub no_recompute: u64,
    pub overlapped: u64,
    pub on_demand: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.no_recompute + self.overlapped + self.on_demand
    }

    /// Fractions `(no_recompute, overlapped, on_demand)`; all retained when
    /// nothing was read.
    pub fn fractions(&self) -> (Rational, Rational, Rational) {
        let total = self.total();
        if total == 0 {
            return (crate::rational::int(1), Rational::default(), Rational::default());
        }
        let f = |n: u64| crate::rational::ratio(n as i64, total as i64);
        (f(self.no_recompute), f(self.overlapped), f(self.on_demand))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotTiming {
    pub stage: usize,
    pub microbatch: u32,
    pub dir: Dir,
    pub start_us: Rational,
    pub end_us: Rational,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimReport {
    pub iteration_us: Rational,
    pub per_stage: Vec<StageStats>,
    pub breakdown: Vec<Breakdown>,
    pub memory_peaks: Vec<u64>,
    pub static_bytes: Vec<u64>,
    /// Resident bytes after every change, per stage, in time order.
    pub memory: Vec<Vec<(Rational, u64)>>,
    pub timeline: Vec<SimEvent>,
    pub slots: Vec<SlotTiming>,
}

/// Slot order of one stage under 1F1B: `w = min(p − s − 1, M)` warm-up
/// forwards, then alternating forward/backward pairs, then the remaining
/// backwards.
pub fn slot_order(n_stages: usize, stage: usize, n_microbatches: usize) -> Vec<(u32, Dir)> {
    let m = n_microbatches;
    let w = (n_stages - stage - 1).min(m);
    let mut order: Vec<(u32, Dir)> = (0..w).map(|i| (i as u32, Dir::Fwd)).collect();
    for i in 0..m - w {
        order.push(((i + w) as u32, Dir::Fwd));
        order.push((i as u32, Dir::Bwd));
    }
    order.extend((m - w..m).map(|i| (i as u32, Dir::Bwd)));
    order
}

#[cfg(test)]
mod tests;
