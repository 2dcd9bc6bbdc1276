use super::*;
use crate::rational::{int, Rational};

fn key(mb: u32, op: u32) -> TensorKey {
    TensorKey { microbatch: mb, op }
}

fn task(k: TensorKey, bytes: u64, dur: i64, needs: Vec<TensorKey>, frees: Vec<TensorKey>) -> Task {
    Task { key: k, bytes, duration: int(dur), needs, frees }
}

/// One forward op (activation of `act` bytes kept to the backward) and one
/// backward op per microbatch.
fn simple(p: usize, s: usize, m: usize, f: i64, b: i64, act: u64) -> StageProgram {
    let slots = slot_order(p, s, m)
        .into_iter()
        .map(|(mb, dir)| {
            let step = match dir {
                Dir::Fwd => Step::Compute(task(key(mb, 0), act, f, vec![], vec![])),
                Dir::Bwd => Step::Compute(task(key(mb, 1), 0, b, vec![key(mb, 0)], vec![key(mb, 0), key(mb, 1)])),
            };
            Slot { microbatch: mb, dir, steps: vec![step] }
        })
        .collect();
    StageProgram { stage: s, static_bytes: 100, slots }
}

#[test]
fn slot_order_shapes() {
    use Dir::*;
    assert_eq!(slot_order(2, 0, 3), vec![(0, Fwd), (1, Fwd), (0, Bwd), (2, Fwd), (1, Bwd), (2, Bwd)]);
    assert_eq!(slot_order(2, 1, 2), vec![(0, Fwd), (0, Bwd), (1, Fwd), (1, Bwd)]);
}

#[test]
fn single_stage_is_serial() {
    let r = simulate(&[simple(1, 0, 3, 2, 5, 10)], &SimOptions::default()).unwrap();
    assert_eq!(r.iteration_us, int(21));
    assert_eq!(r.memory_peaks, vec![110]);
    assert_eq!(r.memory[0].last().unwrap().1, 100);
}

#[test]
fn four_by_five_grid() {
    // Fill takes p-1 forward slots, then M forward+backward pairs, then the
    // drain mirrors the fill: (M + p - 1) * (f + b).
    let progs: Vec<_> = (0..4).map(|s| simple(4, s, 5, 1, 1, 1)).collect();
    let r = simulate(&progs, &SimOptions::default()).unwrap();
    assert_eq!(r.iteration_us, int(16));
    assert_eq!(r.memory_peaks, vec![104, 103, 102, 101]);
}

#[test]
fn p2p_latency_adds_per_hop() {
    let progs: Vec<_> = (0..2).map(|s| simple(2, s, 2, 1, 1, 1)).collect();
    let base = simulate(&progs, &SimOptions::default()).unwrap().iteration_us;
    let slow = simulate(&progs, &SimOptions { p2p_us: int(1) }).unwrap().iteration_us;
    assert!(slow > base);
    let p2p = simulate(&progs, &SimOptions::default())
        .unwrap()
        .timeline
        .iter()
        .filter(|e| e.kind == EventKind::P2PTransfer)
        .count();
    assert_eq!(p2p, 4);
}

fn comm_program(hosted_dur: i64, on_demand: bool) -> StageProgram {
    // Forward keeps a and drops b. The backward recomputes b either inside
    // a 4us comm step or after it.
    let fwd = vec![
        Step::Compute(task(key(0, 0), 8, 1, vec![], vec![])),
        Step::Compute(task(key(0, 1), 8, 1, vec![key(0, 0)], vec![key(0, 1)])),
    ];
    let r = task(key(0, 1), 8, hosted_dur, vec![key(0, 0)], vec![]);
    let comm = task(key(0, 2), 0, 4, vec![], vec![key(0, 2)]);
    let mut bwd = Vec::new();
    if on_demand {
        bwd.push(Step::Comm { task: comm, hosted: vec![] });
        bwd.push(Step::Recompute(r));
    } else {
        bwd.push(Step::Comm { task: comm, hosted: vec![r] });
    }
    bwd.push(Step::Compute(task(key(0, 3), 0, 2, vec![key(0, 1)], vec![key(0, 0), key(0, 1), key(0, 3)])));
    StageProgram {
        stage: 0,
        static_bytes: 0,
        slots: vec![
            Slot { microbatch: 0, dir: Dir::Fwd, steps: fwd },
            Slot { microbatch: 0, dir: Dir::Bwd, steps: bwd },
        ],
    }
}

#[test]
fn hosted_recompute_is_free_until_it_spills() {
    let opts = SimOptions::default();
    let hidden = simulate(&[comm_program(3, false)], &opts).unwrap();
    let exposed = simulate(&[comm_program(3, true)], &opts).unwrap();
    assert_eq!(hidden.iteration_us, int(8));
    assert_eq!(exposed.iteration_us, int(11));
    assert_eq!(hidden.per_stage[0].recompute_overlapped_us, int(3));
    assert_eq!(exposed.per_stage[0].recompute_on_demand_us, int(3));
    assert_eq!(hidden.breakdown[0], Breakdown { no_recompute: 1, overlapped: 1, on_demand: 0 });
    assert_eq!(exposed.breakdown[0], Breakdown { no_recompute: 1, overlapped: 0, on_demand: 1 });

    let spill = simulate(&[comm_program(6, false)], &opts).unwrap();
    assert_eq!(spill.iteration_us, int(10));
    assert_eq!(spill.per_stage[0].recompute_overlapped_us, int(4));
    assert_eq!(spill.per_stage[0].recompute_on_demand_us, int(2));
}

#[test]
fn missing_dependency_is_reported() {
    let mut prog = comm_program(3, true);
    if let Step::Recompute(t) = &mut prog.slots[1].steps[1] {
        t.needs.push(key(5, 5));
    }
    assert!(matches!(
        simulate(&[prog], &SimOptions::default()),
        Err(SimError::InconsistentPlan { stage: 0, slot: 1, .. })
    ));
}

#[test]
fn leaked_tensor_is_reported() {
    let mut prog = simple(1, 0, 1, 1, 1, 1);
    if let Step::Compute(t) = &mut prog.slots[1].steps[0] {
        t.frees.pop();
    }
    assert_eq!(simulate(&[prog], &SimOptions::default()), Err(SimError::Leak { stage: 0, count: 1 }));
}

#[test]
fn stall_recompute_hides_in_the_wait() {
    // Stage 0 of two: its last backward waits for stage 1. A stall
    // recomputation placed there costs nothing if it fits in the wait.
    let mut progs: Vec<_> = (0..2).map(|s| simple(2, s, 2, 1, 3, 1)).collect();
    let base = simulate(&progs, &SimOptions::default()).unwrap();
    let last = progs[0].slots.last_mut().unwrap();
    let mb = last.microbatch;
    last.steps.insert(0, Step::StallRecompute(task(key(mb, 9), 2, 1, vec![key(mb, 0)], vec![key(mb, 9)])));
    let r = simulate(&progs, &SimOptions::default()).unwrap();
    assert_eq!(r.iteration_us, base.iteration_us);
    assert_eq!(r.per_stage[0].recompute_overlapped_us, int(1));
    assert_eq!(r.per_stage[0].recompute_on_demand_us, Rational::default());
}

#[test]
fn isolated_period() {
    // f=2, b=5 with a 1-forward warm-up: every steady pair takes 7.
    assert_eq!(stage_period(&simple(2, 0, 4, 2, 5, 1)).unwrap(), int(7));
}

#[test]
fn traces() {
    let r = simulate(&[comm_program(3, false)], &SimOptions::default()).unwrap();
    let csv = emit_trace(&r, TraceFormat::Csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,microbatch,kind,op_id,start_us,end_us,overlapped"));
    assert_eq!(lines.count(), r.timeline.len());
    let chrome: serde_json::Value = serde_json::from_str(&emit_trace(&r, TraceFormat::ChromeTrace)).unwrap();
    let arr = chrome.as_array().unwrap();
    assert_eq!(arr.len(), r.timeline.len());
    assert!(arr.iter().all(|e| e["ph"] == "X"));
    let hosted = arr.iter().find(|e| e["cat"] == "recompute").unwrap();
    assert_eq!(hosted["tid"], "comm");

    let empty = SimReport {
        iteration_us: Rational::default(),
        per_stage: vec![],
        breakdown: vec![],
        memory_peaks: vec![],
        static_bytes: vec![],
        memory: vec![],
        timeline: vec![],
        slots: vec![],
    };
    assert_eq!(emit_trace(&empty, TraceFormat::ChromeTrace), "[]");
    assert_eq!(emit_trace(&empty, TraceFormat::Csv).lines().count(), 1);
}
