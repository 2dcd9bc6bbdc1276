use proptest::prelude::*;

use super::*;
use crate::oracle::opt::solve_opt_oracle;
use crate::pipesim::{simulate_isolated, StageProgram};
use crate::profile::{OpKind, OperatorSpec};
use crate::rational::{int, Rational};

fn op(id: u32, kind: OpKind, time: i64, bytes: u64, deps: &[u32]) -> OperatorSpec {
    OperatorSpec {
        id,
        name: format!("o{id}"),
        kind,
        time_us: int(time),
        out_bytes: bytes,
        deps: deps.to_vec(),
        schedulable: None,
    }
}

fn hw(budget: u64) -> HardwareProfile {
    HardwareProfile { mem_budget_bytes: budget, comm_scale: int(1) }
}

fn chain(times: &[i64], bytes: u64) -> OperatorGraph {
    OperatorGraph::new(
        times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let deps: Vec<u32> = if i == 0 { vec![] } else { vec![i as u32 - 1] };
                op(i as u32, OpKind::Compute, t, bytes, &deps)
            })
            .collect(),
    )
}

fn solve(g: &OperatorGraph, budget: u64, static_bytes: u64) -> Result<RecomputationSchedule, OptError> {
    let inst = build_opt_model(g, &hw(budget), static_bytes)?;
    solve_opt(&inst, 60_000, 0)
}

fn program(g: &OperatorGraph, s: &RecomputationSchedule, budget: u64, static_bytes: u64) -> StageProgram {
    let p = OptProblem::new(g, &hw(budget), static_bytes);
    schedule_to_program(s, &PhaseGraph::single(g), &p, 0)
}

#[test]
fn roomy_chain_needs_no_recompute() {
    let g = chain(&[1, 2, 3, 4], 10);
    let s = solve(&g, 1_000, 0).unwrap();
    assert_eq!(s.status, ScheduleStatus::Optimal);
    assert_eq!(s.objective_us, int(10));
    assert!(s.recompute.is_empty());
}

#[test]
fn tight_chain_matches_oracle_and_simulates() {
    // Only two 10-byte tensors fit next to the static 5 bytes.
    let g = chain(&[3, 1, 2, 5, 1], 10);
    let s = solve(&g, 25, 5).unwrap();
    let p = OptProblem::new(&g, &hw(25), 5);
    let o = solve_opt_oracle(&p).unwrap();
    assert_eq!(s.objective_us, o.cost);
    assert!(check_schedule(&s, &p).is_empty());
    let r = simulate_isolated(&program(&g, &s, 25, 5)).unwrap();
    assert!(r.memory_peaks[0] <= 25);
}

#[test]
fn comm_phase_hides_recompute() {
    // x -> a feeds d at the end; y -> z -> c(comm) -> d. Holding a through
    // y's phase breaks the budget, so a is rebuilt from x inside c's window.
    let mk = |comm_us| {
        OperatorGraph::new(vec![
            op(0, OpKind::Compute, 1, 1, &[]),
            op(1, OpKind::Compute, 2, 8, &[0]),
            op(2, OpKind::Compute, 1, 8, &[]),
            op(3, OpKind::Compute, 1, 1, &[2]),
            op(4, OpKind::Comm, comm_us, 1, &[3]),
            op(5, OpKind::Compute, 1, 0, &[1, 4]),
        ])
    };
    let g = mk(3);
    assert_eq!(solve(&g, 100, 0).unwrap().objective_us, int(9));
    let s = solve(&g, 12, 0).unwrap();
    assert_eq!(s.objective_us, int(9));
    assert!(s.overlapped.contains(&(5, 2)));

    // With a 1us window the same recomputation has to run on demand.
    let g = mk(1);
    let s = solve(&g, 12, 0).unwrap();
    assert_eq!(s.objective_us, int(9));
    assert!(!s.overlapped.contains(&(5, 2)));
    let p = OptProblem::new(&g, &hw(12), 0);
    assert_eq!(solve_opt_oracle(&p).unwrap().cost, s.objective_us);
}

#[test]
fn errors() {
    let g = chain(&[1, 1], 10);
    assert_eq!(solve(&g, 15, 0).unwrap_err(), OptError::Infeasible);
    assert!(matches!(solve(&g, 10, 10), Err(OptError::BudgetTooSmall { .. })));
    assert_eq!(solve(&OperatorGraph::new(vec![]), 10, 0).unwrap_err(), OptError::EmptyGraph);
}

#[test]
fn check_flags_tampering() {
    let g = chain(&[3, 1, 2, 5, 1], 10);
    let p = OptProblem::new(&g, &hw(25), 5);
    let s = solve(&g, 25, 5).unwrap();
    let mut bad = s.clone();
    bad.keep.clear();
    assert!(!check_schedule(&bad, &p).is_empty());
    let mut bad = s.clone();
    bad.objective_us += Rational::from_integer(1.into());
    assert!(check_schedule(&bad, &p).iter().any(|i| matches!(i, CheckIssue::CostMismatch { .. })));
}

#[test]
fn json_shape() {
    let s = solve(&chain(&[1, 2], 1), 100, 0).unwrap();
    let text = s.to_json();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["status"], "optimal");
    assert!(text.contains("\"objective_us\": 3.000"));
}

fn arb_graph() -> impl Strategy<Value = (OperatorGraph, u64)> {
    (2usize..=6)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((1i64..6, 1u64..5, any::<bool>(), prop::collection::vec(any::<bool>(), n)), n),
                0u64..12,
            )
        })
        .prop_map(|(spec, slack)| {
            let mut ops = Vec::new();
            for (i, (t, b, comm, edges)) in spec.iter().enumerate() {
                let deps: Vec<u32> = (0..i).filter(|&j| edges[j] || j + 1 == i).map(|j| j as u32).collect();
                let kind = if *comm && i > 0 { OpKind::Comm } else { OpKind::Compute };
                ops.push(op(i as u32, kind, *t, *b, &deps));
            }
            let max: u64 = spec.iter().map(|s| s.1).max().unwrap();
            (OperatorGraph::new(ops), 2 * max + slack)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn bnb_matches_oracle((g, budget) in arb_graph()) {
        let p = OptProblem::new(&g, &hw(budget), 0);
        let oracle = solve_opt_oracle(&p);
        match solve(&g, budget, 0) {
            Ok(s) => {
                prop_assert_eq!(Some(s.objective_us.clone()), oracle.map(|o| o.cost));
                let r = simulate_isolated(&program(&g, &s, budget, 0)).unwrap();
                prop_assert!(r.memory_peaks[0] <= budget);
            }
            Err(OptError::Infeasible) => prop_assert!(oracle.is_none()),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}
