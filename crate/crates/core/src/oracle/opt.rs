//! Exact whole-stage optimum by dynamic programming over resident sets.

use std::collections::HashMap;

use num_traits::Zero;

use crate::optsched::OptProblem;
use crate::rational::Rational;

/// Optimum plus one optimal witness as bitmasks: `keep[t]` is resident at
/// the start of phase `t`, `run[t]` is executed in it (own operator included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptOracle {
    pub cost: Rational,
    pub keep: Vec<u32>,
    pub run: Vec<u32>,
}

pub const MAX_ORACLE_OPS: usize = 12;

/// `None` when nothing fits the budget.
pub fn solve_opt_oracle(p: &OptProblem) -> Option<OptOracle> {
    let n = p.len();
    assert!(n <= MAX_ORACLE_OPS, "oracle is limited to {MAX_ORACLE_OPS} operators");
    if n == 0 || p.static_bytes > p.budget_bytes {
        return None;
    }
    let mut memo = HashMap::new();
    let cost = best(p, 0, 0, &mut memo)?.0;
    let (mut keep, mut run) = (vec![0u32], Vec::new());
    let mut s = 0u32;
    for t in 0..n {
        let (_, r, next) = memo[&(t, s)].clone().expect("optimal path is feasible");
        run.push(r);
        keep.push(next);
        s = next;
    }
    keep.pop();
    Some(OptOracle { cost, keep, run })
}

type Memo = HashMap<(usize, u32), Option<(Rational, u32, u32)>>;

fn best(p: &OptProblem, t: usize, s: u32, memo: &mut Memo) -> Option<(Rational, u32, u32)> {
    let n = p.len();
    if t == n {
        return Some((Rational::zero(), 0, 0));
    }
    if let Some(v) = memo.get(&(t, s)) {
        return v.clone();
    }
    let mut out: Option<(Rational, u32, u32)> = None;
    let below = (1u32 << t) - 1;
    let mut extra = 0u32;
    loop {
        let r = extra | (1 << t);
        if let Some(cost) = phase_cost(p, t, s, r) {
            let avail = (s | r) & ((1u32 << (t + 1)) - 1);
            let mut next = avail;
            loop {
                let next_ok = t + 1 < n || next == 0;
                if next_ok && fits(p, t, s, r, next) {
                    if let Some((rest, _, _)) = best(p, t + 1, next, memo) {
                        let total = &cost + rest;
                        if out.as_ref().is_none_or(|(c, _, _)| total < *c) {
                            out = Some((total, r, next));
                        }
                    }
                }
                if next == 0 {
                    break;
                }
                next = (next - 1) & avail;
            }
        }
        if extra == below {
            break;
        }
        extra = (extra.wrapping_sub(below)) & below;
    }
    memo.insert((t, s), out.clone());
    out
}

/// Cost of running `r` in phase `t` given resident `s`, or `None` when a
/// rule other than memory forbids it.
fn phase_cost(p: &OptProblem, t: usize, s: u32, r: u32) -> Option<Rational> {
    let mut overlap = Rational::zero();
    let mut sum = Rational::zero();
    for i in 0..=t {
        if r & (1 << i) == 0 {
            continue;
        }
        if p.deps[i].iter().any(|&d| (r | s) & (1 << d) == 0) {
            return None;
        }
        if i < t && (p.pinned[i] || (p.comm[t] && (p.comm[i] || p.deps[t].contains(&i)))) {
            return None;
        }
        if i < t {
            overlap += &p.times[i];
        }
        sum += &p.times[i];
    }
    if p.comm[t] {
        (overlap <= p.times[t]).then(|| p.times[t].clone())
    } else {
        Some(sum)
    }
}

fn fits(p: &OptProblem, t: usize, s: u32, r: u32, next: u32) -> bool {
    let bit = |m: u32, i: usize| m & (1 << i) != 0;
    let mut bytes = p.static_bytes + (0..t).filter(|&i| bit(s, i)).map(|i| p.mems[i]).sum::<u64>();
    if bytes > p.budget_bytes {
        return false;
    }
    for i in 0..=t {
        if !bit(r, i) {
            continue;
        }
        bytes += p.mems[i];
        if bytes > p.budget_bytes {
            return false;
        }
        if i == t {
            break;
        }
        let mut cands = p.deps[i].clone();
        cands.push(i);
        cands.sort_unstable();
        cands.dedup();
        for d in cands {
            let read_later = p.users[d].iter().any(|&j| j > i && j <= t && bit(r, j));
            if !read_later && !bit(next, d) {
                bytes -= p.mems[d];
            }
        }
    }
    true
}
