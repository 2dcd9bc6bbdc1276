use std::collections::BTreeMap;

use num_traits::{One, Zero};

use super::{OptError, OptProblem, RecomputationSchedule, ScheduleStatus};
use crate::ilp::{IlpModel, LinExpr, Lit, Rel, Solution, Status, VarId};
use crate::profile::{validate_graph, HardwareProfile, OperatorGraph};
use crate::rational::{uint, Rational};

/// The MILP for one stage plus the variable maps, all 0-indexed:
/// `r[(t, i)]`, `s[(t, i)]`, `u[(t, k)]` with `k = 0` before any operator of
/// phase `t` and `k = i + 1` after operator `i` is written, and
/// `f[(t, d, i)]`.
#[derive(Clone, Debug)]
pub struct OptInstance {
    pub problem: OptProblem,
    pub model: IlpModel,
    pub r: BTreeMap<(usize, usize), VarId>,
    pub s: BTreeMap<(usize, usize), VarId>,
    pub u: BTreeMap<(usize, usize), VarId>,
    pub f: BTreeMap<(usize, usize, usize), VarId>,
}

pub fn build_opt_model(
    graph: &OperatorGraph,
    hw: &HardwareProfile,
    static_bytes: u64,
) -> Result<OptInstance, OptError> {
    if graph.is_empty() {
        return Err(OptError::EmptyGraph);
    }
    let report = validate_graph(graph);
    if !report.is_empty() {
        return Err(OptError::InvalidGraph(report));
    }
    if static_bytes >= hw.mem_budget_bytes {
        return Err(OptError::BudgetTooSmall { static_bytes, budget_bytes: hw.mem_budget_bytes });
    }
    let p = OptProblem::new(graph, hw, static_bytes);
    let n = p.len();
    let one = Rational::one;
    let mut m = IlpModel::new();
    let mut r = BTreeMap::new();
    let mut s = BTreeMap::new();
    let mut u = BTreeMap::new();
    let mut f = BTreeMap::new();
    let budget = Some(uint(p.budget_bytes));

    // Phase by phase: this phase's R, the next phase's S, then the freeing
    // products and memory of this phase. Branch and bound walks variables in
    // this order.
    for t in 0..n {
        for i in 0..=t {
            r.insert((t, i), m.new_bool(format!("R_{}_{}", t + 1, i + 1)));
        }
        if t + 1 < n {
            for i in 0..=t {
                s.insert((t + 1, i), m.new_bool(format!("S_{}_{}", t + 2, i + 1)));
            }
        }

        // Frees after operator i < t (nothing follows the last one).
        for i in 0..t {
            let mut cands = p.deps[i].clone();
            cands.push(i);
            cands.sort_unstable();
            cands.dedup();
            for d in cands {
                if p.mems[d] == 0 {
                    continue;
                }
                let mut lits = vec![Lit::pos(r[&(t, i)])];
                if let Some(&sv) = s.get(&(t + 1, d)) {
                    lits.push(Lit::neg(sv));
                }
                for &j in &p.users[d] {
                    if j > i && j <= t {
                        lits.push(Lit::neg(r[&(t, j)]));
                    }
                }
                let mut z = lits[0].var;
                for (k, lit) in lits.iter().enumerate().skip(1) {
                    let name = if k + 1 == lits.len() {
                        format!("F_{}_{}_{}", t + 1, d + 1, i + 1)
                    } else {
                        format!("F_{}_{}_{}_p{k}", t + 1, d + 1, i + 1)
                    };
                    z = m.linearize_and(name, Lit::pos(z), *lit)?;
                }
                f.insert((t, d, i), z);
            }
        }

        for k in 0..=t + 1 {
            u.insert((t, k), m.new_cont(format!("U_{}_{}", t + 1, k), Some(Rational::zero()), budget.clone()));
        }
    }

    for t in 0..n {
        let tt = t + 1;
        m.fix_true(format!("own_{tt}"), Lit::pos(r[&(t, t)]))?;
        for i in 0..=t {
            // Every input of a running operator is recomputed or resident.
            for &j in &p.deps[i] {
                let mut e = LinExpr::new().term(r[&(t, i)], one());
                e.add_term(r[&(t, j)], -one());
                if let Some(&sv) = s.get(&(t, j)) {
                    e.add_term(sv, -one());
                }
                m.add_constraint(format!("dep_{tt}_{}_{}", i + 1, j + 1), e, Rel::Le, Rational::zero())?;
            }
            if i < t && p.pinned[i] {
                m.add_constraint(
                    format!("pinned_{tt}_{}", i + 1),
                    LinExpr::new().term(r[&(t, i)], one()),
                    Rel::Eq,
                    Rational::zero(),
                )?;
            }
            // A comm operator starts when its window opens, so its own inputs
            // cannot come from recomputation hosted in that window.
            if i < t && p.comm[t] && p.deps[t].contains(&i) {
                m.add_constraint(
                    format!("comminput_{tt}_{}", i + 1),
                    LinExpr::new().term(r[&(t, i)], one()),
                    Rel::Eq,
                    Rational::zero(),
                )?;
            }
            if i < t && p.comm[t] && p.comm[i] {
                m.add_constraint(
                    format!("commcomm_{tt}_{}", i + 1),
                    LinExpr::new().term(r[&(t, i)], one()),
                    Rel::Eq,
                    Rational::zero(),
                )?;
            }
        }
        // Retention only carries what the previous phase had.
        if t > 0 {
            for i in 0..t {
                let mut e = LinExpr::new().term(s[&(t, i)], one());
                e.add_term(r[&(t - 1, i)], -one());
                if let Some(&sv) = s.get(&(t - 1, i)) {
                    e.add_term(sv, -one());
                }
                m.add_constraint(format!("keep_{tt}_{}", i + 1), e, Rel::Le, Rational::zero())?;
            }
        }
        if p.comm[t] && t > 0 {
            let mut e = LinExpr::new();
            for i in 0..t {
                e.add_term(r[&(t, i)], p.times[i].clone());
            }
            if !e.is_empty() {
                m.add_constraint(format!("overlap_{tt}"), e, Rel::Le, p.times[t].clone())?;
            }
        }

        // Memory: resident set at phase start, then write/free per operator.
        let mut e = LinExpr::new().term(u[&(t, 0)], one());
        for i in 0..t {
            e.add_term(s[&(t, i)], -uint(p.mems[i]));
        }
        m.add_constraint(format!("mem_{tt}_0"), e, Rel::Eq, uint(p.static_bytes))?;
        for k in 0..=t {
            let mut e = LinExpr::new().term(u[&(t, k + 1)], one());
            e.add_term(u[&(t, k)], -one());
            e.add_term(r[&(t, k)], -uint(p.mems[k]));
            if k > 0 {
                for (&(ft, d, fi), &fv) in f.range((t, 0, 0)..(t + 1, 0, 0)) {
                    if ft == t && fi == k - 1 {
                        e.add_term(fv, uint(p.mems[d]));
                    }
                }
            }
            m.add_constraint(format!("mem_{tt}_{}", k + 1), e, Rel::Eq, Rational::zero())?;
        }
    }

    let mut obj = LinExpr::new();
    for t in 0..n {
        if p.comm[t] {
            obj.add_term(r[&(t, t)], p.times[t].clone());
        } else {
            for i in 0..=t {
                obj.add_term(r[&(t, i)], p.times[i].clone());
            }
        }
    }
    m.set_objective(obj)?;

    Ok(OptInstance { problem: p, model: m, r, s, u, f })
}

impl OptInstance {
    pub fn decode(&self, sol: &Solution, stage: usize) -> Result<RecomputationSchedule, OptError> {
        let status = match &sol.status {
            Status::Optimal => ScheduleStatus::Optimal,
            Status::Feasible { gap } => ScheduleStatus::Feasible { gap_us: gap.clone() },
            Status::Infeasible => return Err(OptError::Infeasible),
            Status::TimedOut => return Err(OptError::TimedOut),
        };
        let n = self.problem.len();
        let keep = self.s.iter().filter(|(_, &v)| sol.is_one(v)).map(|(&(t, i), _)| (t + 1, i + 1)).collect();
        let recompute: Vec<(usize, usize)> =
            self.r.iter().filter(|(&(t, i), &v)| t != i && sol.is_one(v)).map(|(&(t, i), _)| (t + 1, i + 1)).collect();
        let overlapped = recompute.iter().copied().filter(|&(t, _)| self.problem.comm[t - 1]).collect();
        let peak_bytes = (0..n)
            .map(|t| {
                (0..=t + 1)
                    .map(|k| {
                        let v = sol.value(self.u[&(t, k)]);
                        v.to_integer().try_into().expect("memory values are whole non-negative bytes")
                    })
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        Ok(RecomputationSchedule {
            stage,
            status,
            objective_us: sol.objective_value.clone().expect("solution carries an objective"),
            keep,
            recompute,
            overlapped,
            peak_bytes,
        })
    }
}
