use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use num_traits::Zero;

use super::{
    Breakdown, Dir, EventKind, SimEvent, SimReport, SlotTiming, StageProgram, StageStats, Step, Task, TensorKey,
};
use crate::rational::Rational;

#[derive(Clone, Debug, Default)]
pub struct SimOptions {
    /// Latency of every inter-stage activation or gradient hand-off.
    pub p2p_us: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("stage {stage}, slot {slot}: {reason}")]
    InconsistentPlan { stage: usize, slot: usize, reason: String },
    #[error("stage {stage} finishes with {count} tensors still resident")]
    Leak { stage: usize, count: usize },
    #[error("pipeline cannot make progress: stage {stage} waits forever")]
    Deadlock { stage: usize },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Origin {
    Forward,
    Overlapped,
    OnDemand,
    Backward,
}

struct Run<'a> {
    prog: &'a StageProgram,
    next: usize,
    now: Rational,
    resident: BTreeMap<TensorKey, (u64, Origin)>,
    bytes: u64,
    peak: u64,
    trace: Vec<(Rational, u64)>,
    stats: StageStats,
    breakdown: Breakdown,
}

struct Ctx<'e> {
    events: &'e mut Vec<(SimEvent, u64)>,
    seq: u64,
}

impl Ctx<'_> {
    fn emit(
        &mut self,
        stage: usize,
        microbatch: u32,
        kind: EventKind,
        op: Option<u32>,
        start: &Rational,
        end: &Rational,
        overlapped: bool,
    ) {
        self.events.push((
            SimEvent { stage, microbatch, kind, op_id: op, start_us: start.clone(), end_us: end.clone(), overlapped },
            self.seq,
        ));
        self.seq += 1;
    }
}

impl<'a> Run<'a> {
    fn new(prog: &'a StageProgram) -> Self {
        Run {
            prog,
            next: 0,
            now: Rational::zero(),
            resident: BTreeMap::new(),
            bytes: prog.static_bytes,
            peak: prog.static_bytes,
            trace: vec![(Rational::zero(), prog.static_bytes)],
            stats: StageStats::default(),
            breakdown: Breakdown::default(),
        }
    }

    fn fail(&self, reason: String) -> SimError {
        SimError::InconsistentPlan { stage: self.prog.stage, slot: self.next, reason }
    }

    fn check_needs(&self, task: &Task, counted: &mut BTreeSet<TensorKey>, dir: Dir) -> Result<Vec<Origin>, SimError> {
        let mut origins = Vec::new();
        for k in &task.needs {
            match self.resident.get(k) {
                None => {
                    return Err(self.fail(format!(
                        "op {} of microbatch {} needs tensor {}/{} which is not resident",
                        task.key.op, task.key.microbatch, k.microbatch, k.op
                    )))
                }
                Some(&(_, origin)) => {
                    if dir == Dir::Bwd && origin != Origin::Backward && counted.insert(*k) {
                        origins.push(origin);
                    }
                }
            }
        }
        Ok(origins)
    }

    fn alloc(&mut self, key: TensorKey, bytes: u64, origin: Origin, at: &Rational) -> Result<(), SimError> {
        if self.resident.insert(key, (bytes, origin)).is_some() {
            return Err(self.fail(format!("tensor {}/{} produced while already resident", key.microbatch, key.op)));
        }
        self.bytes += bytes;
        self.peak = self.peak.max(self.bytes);
        self.trace.push((at.clone(), self.bytes));
        Ok(())
    }

    fn release(&mut self, keys: &[TensorKey], at: &Rational) -> Result<(), SimError> {
        for k in keys {
            let Some((b, _)) = self.resident.remove(k) else {
                return Err(self.fail(format!("free of tensor {}/{} which is not resident", k.microbatch, k.op)));
            };
            self.bytes -= b;
            self.trace.push((at.clone(), self.bytes));
        }
        Ok(())
    }

    fn count(&mut self, origins: Vec<Origin>) {
        for o in origins {
            match o {
                Origin::Forward => self.breakdown.no_recompute += 1,
                Origin::Overlapped => self.breakdown.overlapped += 1,
                Origin::OnDemand => self.breakdown.on_demand += 1,
                Origin::Backward => {}
            }
        }
    }

    /// Runs the next slot; `ready` is when its cross-stage input arrives.
    fn run_slot(&mut self, ready: Option<Rational>, ctx: &mut Ctx) -> Result<SlotTiming, SimError> {
        let stage = self.prog.stage;
        let slot = &self.prog.slots[self.next];
        let mb = slot.microbatch;
        let mut counted = BTreeSet::new();
        let ready = ready.map_or(self.now.clone(), |r| r.max(self.now.clone()));
        let (compute_kind, comm_kind) = match slot.dir {
            Dir::Fwd => (EventKind::Fwd, EventKind::CommFwd),
            Dir::Bwd => (EventKind::Bwd, EventKind::CommBwd),
        };

        // Stall-hidden recomputation starts as soon as the previous slot ends.
        let mut cursor = self.now.clone();
        let mut k = 0;
        while let Some(Step::StallRecompute(task)) = slot.steps.get(k) {
            let origins = self.check_needs(task, &mut counted, slot.dir)?;
            self.count(origins);
            let end = &cursor + &task.duration;
            let hidden = end <= ready;
            self.alloc(task.key, task.bytes, if hidden { Origin::Overlapped } else { Origin::OnDemand }, &cursor)?;
            split(ctx, stage, mb, EventKind::StallRecompute, task.key.op, &cursor, &end, &ready, &mut self.stats);
            self.stats.busy_us += &task.duration;
            self.release(&task.frees, &end)?;
            cursor = end;
            k += 1;
        }
        if ready > cursor {
            ctx.emit(stage, mb, EventKind::Stall, None, &cursor, &ready, false);
            self.stats.stall_us += &ready - &cursor;
            cursor = ready;
        }
        let start = cursor.clone();
        let mut t = cursor;

        for step in &slot.steps[k..] {
            match step {
                Step::Compute(task) | Step::Recompute(task) => {
                    let origins = self.check_needs(task, &mut counted, slot.dir)?;
                    self.count(origins);
                    let end = &t + &task.duration;
                    let recompute = matches!(step, Step::Recompute(_));
                    let origin = match (recompute, slot.dir) {
                        (true, _) => Origin::OnDemand,
                        (false, Dir::Fwd) => Origin::Forward,
                        (false, Dir::Bwd) => Origin::Backward,
                    };
                    self.alloc(task.key, task.bytes, origin, &t)?;
                    let kind = if recompute { EventKind::Recompute } else { compute_kind };
                    ctx.emit(stage, mb, kind, Some(task.key.op), &t, &end, false);
                    self.stats.busy_us += &task.duration;
                    if recompute {
                        self.stats.recompute_on_demand_us += &task.duration;
                    }
                    self.release(&task.frees, &end)?;
                    t = end;
                }
                Step::Comm { task, hosted } => {
                    let origins = self.check_needs(task, &mut counted, slot.dir)?;
                    self.count(origins);
                    let window_end = &t + &task.duration;
                    ctx.emit(stage, mb, comm_kind, Some(task.key.op), &t, &window_end, false);
                    self.stats.comm_us += &task.duration;
                    let mut c = t.clone();
                    for h in hosted {
                        let origins = self.check_needs(h, &mut counted, slot.dir)?;
                        self.count(origins);
                        let end = &c + &h.duration;
                        let fits = end <= window_end;
                        self.alloc(h.key, h.bytes, if fits { Origin::Overlapped } else { Origin::OnDemand }, &c)?;
                        split(ctx, stage, mb, EventKind::Recompute, h.key.op, &c, &end, &window_end, &mut self.stats);
                        self.stats.busy_us += &h.duration;
                        self.release(&h.frees, &end)?;
                        c = end;
                    }
                    let end = c.max(window_end);
                    let origin = if slot.dir == Dir::Fwd { Origin::Forward } else { Origin::Backward };
                    self.alloc(task.key, task.bytes, origin, &end)?;
                    self.release(&task.frees, &end)?;
                    t = end;
                }
                Step::StallRecompute(_) => {
                    return Err(self.fail("stall recomputation after the start of a slot".into()));
                }
                Step::Free(keys) => self.release(keys, &t)?,
            }
        }
        self.now = t.clone();
        self.next += 1;
        Ok(SlotTiming { stage, microbatch: mb, dir: slot.dir, start_us: start, end_us: t })
    }
}

/// Emits `[start, end)` as hidden up to `limit` and on-demand beyond it.
#[allow(clippy::too_many_arguments)]
fn split(
    ctx: &mut Ctx,
    stage: usize,
    mb: u32,
    kind: EventKind,
    op: u32,
    start: &Rational,
    end: &Rational,
    limit: &Rational,
    stats: &mut StageStats,
) {
    if end <= limit {
        ctx.emit(stage, mb, kind, Some(op), start, end, true);
        stats.recompute_overlapped_us += end - start;
    } else if start >= limit {
        ctx.emit(stage, mb, kind, Some(op), start, end, false);
        stats.recompute_on_demand_us += end - start;
    } else {
        ctx.emit(stage, mb, kind, Some(op), start, limit, true);
        ctx.emit(stage, mb, kind, Some(op), limit, end, false);
        stats.recompute_overlapped_us += limit - start;
        stats.recompute_on_demand_us += end - limit;
    }
}

/// Simulates all stages together. `programs[s]` is stage `s`.
pub fn simulate(programs: &[StageProgram], opts: &SimOptions) -> Result<SimReport, SimError> {
    run(programs, opts, false)
}

/// Simulates one stage as if every cross-stage input were already there.
pub fn simulate_isolated(program: &StageProgram) -> Result<SimReport, SimError> {
    run(std::slice::from_ref(program), &SimOptions::default(), true)
}

/// Steady-state 1F1B period of a stage run in isolation: the span of its
/// forward/backward pairs divided by their number.
pub fn stage_period(program: &StageProgram) -> Result<Rational, SimError> {
    let report = simulate_isolated(program)?;
    let slots = &report.slots;
    let n_fwd = slots.iter().filter(|s| s.dir == Dir::Fwd).count();
    let first_bwd = slots.iter().position(|s| s.dir == Dir::Bwd).unwrap_or(slots.len());
    let warmup = first_bwd.saturating_sub(1);
    let pairs = n_fwd.saturating_sub(warmup);
    if pairs == 0 {
        return Ok(report.iteration_us);
    }
    let first = &slots[warmup];
    let last = &slots[warmup + 2 * pairs - 1];
    Ok((&last.end_us - &first.start_us) / crate::rational::uint(pairs as u64))
}

fn run(programs: &[StageProgram], opts: &SimOptions, isolated: bool) -> Result<SimReport, SimError> {
    let p = programs.len();
    let mut runs: Vec<Run> = programs.iter().map(Run::new).collect();
    let mut events = Vec::new();
    let mut ctx = Ctx { events: &mut events, seq: 0 };
    let mut done: BTreeMap<(usize, u32, Dir), Rational> = BTreeMap::new();
    let mut slots = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut wake = 0u64;
    for s in 0..p {
        heap.push(Reverse((Rational::zero(), s, wake)));
        wake += 1;
    }

    while let Some(Reverse((_, s, _))) = heap.pop() {
        loop {
            let run = &runs[s];
            let Some(slot) = run.prog.slots.get(run.next) else { break };
            let (mb, dir) = (slot.microbatch, slot.dir);
            let upstream = match dir {
                _ if isolated => None,
                Dir::Fwd if s > 0 => Some(s - 1),
                Dir::Bwd if s + 1 < p => Some(s + 1),
                _ => None,
            };
            let ready = match upstream {
                None => None,
                Some(u) => match done.get(&(u, mb, dir)) {
                    None => break,
                    Some(sent) => {
                        let arrive = sent + &opts.p2p_us;
                        ctx.emit(runs[s].prog.stage, mb, EventKind::P2PTransfer, None, sent, &arrive, false);
                        Some(arrive)
                    }
                },
            };
            let timing = runs[s].run_slot(ready, &mut ctx)?;
            done.insert((s, mb, dir), timing.end_us.clone());
            let downstream = match dir {
                _ if isolated => None,
                Dir::Fwd if s + 1 < p => Some(s + 1),
                Dir::Bwd if s > 0 => Some(s - 1),
                _ => None,
            };
            if let Some(d) = downstream {
                heap.push(Reverse((timing.end_us.clone(), d, wake)));
                wake += 1;
            }
            slots.push(timing);
        }
    }

    for run in &runs {
        if run.next < run.prog.slots.len() {
            return Err(SimError::Deadlock { stage: run.prog.stage });
        }
        if !run.resident.is_empty() {
            return Err(SimError::Leak { stage: run.prog.stage, count: run.resident.len() });
        }
    }

    events.sort_by(|(a, sa), (b, sb)| (&a.start_us, a.stage, a.kind, sa).cmp(&(&b.start_us, b.stage, b.kind, sb)));
    slots.sort_by(|a, b| (a.stage, &a.start_us).cmp(&(b.stage, &b.start_us)));
    let iteration_us = runs.iter().map(|r| r.now.clone()).max().unwrap_or_default();
    Ok(SimReport {
        iteration_us,
        per_stage: runs.iter().map(|r| r.stats.clone()).collect(),
        breakdown: runs.iter().map(|r| r.breakdown).collect(),
        memory_peaks: runs.iter().map(|r| r.peak).collect(),
        static_bytes: runs.iter().map(|r| r.prog.static_bytes).collect(),
        memory: runs.into_iter().map(|r| r.trace).collect(),
        timeline: events.into_iter().map(|(e, _)| e).collect(),
        slots,
    })
}
