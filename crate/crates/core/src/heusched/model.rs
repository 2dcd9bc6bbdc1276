use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use super::{HeuContext, HeuError, LayerPhasePlan, StageRole};
use crate::ilp::{IlpModel, LinExpr, Lit, Rel, Status, VarId};
use crate::profile::{HardwareProfile, LayerTemplate};
use crate::rational::{denom_lcm, uint, Rational};

/// The per-layer model and its variable maps. Phases are 1-based, operator
/// positions 0-based.
#[derive(Clone, Debug)]
pub struct HeuInstance {
    pub model: IlpModel,
    pub s: Vec<VarId>,
    pub r: BTreeMap<(u8, usize), VarId>,
    /// `(1 - S_i) · R_{t,i}`.
    pub p: BTreeMap<(u8, usize), VarId>,
    pub times: Vec<Rational>,
    pub ctx: HeuContext,
    pub layer: LayerTemplate,
}

pub fn build_heu_model(layer: &LayerTemplate, hw: &HardwareProfile, ctx: &HeuContext) -> Result<HeuInstance, HeuError> {
    let ops = layer.forward_ops();
    let n = ops.len();
    if let Some(t) = ctx.ctime_us.iter().position(|c| c.is_negative()) {
        return Err(HeuError::WindowConfigError(format!("capacity of phase {} is negative", t + 1)));
    }
    if ctx.n_batch == 0 || ctx.n_layers == 0 {
        return Err(HeuError::WindowConfigError("n_batch and n_layers must be at least 1".into()));
    }
    let total: u64 = ops.iter().map(|op| op.out_bytes).sum();
    if let super::Delta::Fixed(b) = ctx.delta {
        if b > total {
            return Err(HeuError::WindowConfigError(format!("delta {b} B exceeds the layer's {total} B")));
        }
    }
    let mut only_ckpt = vec![false; n];
    only_ckpt[n - 1] = true;
    let scale = uint(ctx.n_layers as u64 * ctx.n_batch as u64);
    let fixed = ctx.static_bytes + ctx.delta_bytes(layer, &only_ckpt);
    let needed = fixed + ctx.n_layers as u64 * ctx.n_batch as u64 * ops[n - 1].out_bytes;
    if needed > ctx.budget_bytes {
        return Err(HeuError::BudgetInfeasible { needed_bytes: needed, budget_bytes: ctx.budget_bytes });
    }

    let times: Vec<Rational> = ops.iter().map(|op| hw.effective_time(op)).collect();
    let deps = layer.dep_indices();
    let phases = ctx.role.phases();
    let one = Rational::one;
    let mut m = IlpModel::new();
    let s: Vec<VarId> = (0..n).map(|i| m.new_bool(format!("S_{}", i + 1))).collect();
    let mut r = BTreeMap::new();
    for &t in phases {
        for i in 0..n {
            r.insert((t, i), m.new_bool(format!("R_{t}_{}", i + 1)));
        }
    }
    let mut p = BTreeMap::new();
    for &t in phases {
        for i in 0..n {
            let v = m.linearize_and(format!("P_{t}_{}", i + 1), Lit::neg(s[i]), Lit::pos(r[&(t, i)]))?;
            p.insert((t, i), v);
        }
    }

    for i in 0..n {
        let mut e = LinExpr::new();
        for &t in phases {
            e.add_term(r[&(t, i)], one());
        }
        m.add_constraint(format!("once_{}", i + 1), e, Rel::Eq, one())?;
    }
    for i in 0..n {
        for &j in &deps[i] {
            for (k, &t) in phases.iter().enumerate() {
                let mut e = LinExpr::new().term(r[&(t, i)], one());
                for &earlier in &phases[..=k] {
                    e.add_term(r[&(earlier, j)], -one());
                }
                e.add_term(s[j], -one());
                m.add_constraint(format!("dep_{t}_{}_{}", i + 1, j + 1), e, Rel::Le, Rational::zero())?;
            }
        }
    }
    for &t in phases.iter().filter(|&&t| t <= 4) {
        let mut e = LinExpr::new();
        for i in 0..n {
            if !times[i].is_zero() {
                e.add_term(p[&(t, i)], times[i].clone());
            }
        }
        if !e.is_empty() {
            m.add_constraint(format!("window_{t}"), e, Rel::Le, ctx.ctime_us[t as usize - 1].clone())?;
        }
        for (i, op) in ops.iter().enumerate() {
            if op.is_comm() {
                m.add_constraint(
                    format!("comm_{t}_{}", i + 1),
                    LinExpr::new().term(r[&(t, i)], one()),
                    Rel::Eq,
                    Rational::zero(),
                )?;
            }
        }
    }
    m.fix_true("ckpt", Lit::pos(s[n - 1]))?;

    let mut mem = LinExpr::new();
    for i in 0..n {
        mem.add_term(s[i], &scale * uint(ops[i].out_bytes));
        if ctx.role == StageRole::Interior {
            for t in [1, 2] {
                mem.add_term(p[&(t, i)], uint(ctx.n_layers as u64 * ops[i].out_bytes));
            }
        }
        if ctx.delta == super::Delta::AllDiscarded {
            mem.add_term(s[i], -uint(ops[i].out_bytes));
        }
    }
    let base = match ctx.delta {
        super::Delta::Fixed(b) => ctx.static_bytes + b,
        super::Delta::AllDiscarded => ctx.static_bytes + total,
    };
    m.add_constraint("memory", mem, Rel::Le, uint(ctx.budget_bytes) - uint(base))?;

    // Critical-path time, then among equal times the most retained
    // operators, then the lexicographically smallest retention vector. The
    // tie-break weights sum to less than one unit of the time grid.
    let grid = denom_lcm(&times);
    let unit = Rational::new(BigInt::one(), grid * BigInt::from(n + 1) * (BigInt::one() << (n + 1)));
    let mut obj = LinExpr::new();
    for i in 0..n {
        if !times[i].is_zero() {
            obj.add_term(p[&(5, i)], times[i].clone());
        }
        let lex = BigInt::one() << (n - 1 - i);
        let count = BigInt::one() << n;
        obj.add_term(s[i], &unit * Rational::from_integer(lex - count));
    }
    m.set_objective(obj)?;

    Ok(HeuInstance { model: m, s, r, p, times, ctx: ctx.clone(), layer: layer.clone() })
}

pub fn solve_heu(inst: &HeuInstance, time_limit_ms: u64) -> Result<LayerPhasePlan, HeuError> {
    let sol = crate::ilp::solve_bnb(&inst.model, time_limit_ms)?;
    let optimal = match sol.status {
        Status::Optimal => true,
        Status::Feasible { .. } => false,
        Status::Infeasible => {
            return Err(HeuError::BudgetInfeasible {
                needed_bytes: inst.ctx.budget_bytes,
                budget_bytes: inst.ctx.budget_bytes,
            })
        }
        Status::TimedOut => return Err(HeuError::TimedOut),
    };
    let n = inst.s.len();
    let keep: Vec<bool> = inst.s.iter().map(|&v| sol.is_one(v)).collect();
    let phase: Vec<u8> = (0..n)
        .map(|i| {
            inst.ctx
                .role
                .phases()
                .iter()
                .copied()
                .find(|&t| sol.is_one(inst.r[&(t, i)]))
                .expect("every operator has a phase")
        })
        .collect();
    let objective_us = (0..n).filter(|&i| !keep[i] && phase[i] == 5).map(|i| inst.times[i].clone()).sum();
    let mut plan =
        LayerPhasePlan { role: inst.ctx.role, keep, phase, objective_us, peak_bytes: 0, delta_bytes: 0, optimal };
    plan.delta_bytes = inst.ctx.delta_bytes(&inst.layer, &plan.keep);
    plan.peak_bytes = plan_peak_bytes(&plan, &inst.ctx, &inst.layer);
    let issues = check_plan_times(&plan, &inst.layer, &inst.times, &inst.ctx);
    if !issues.is_empty() {
        return Err(HeuError::CheckFailed(issues));
    }
    Ok(plan)
}

/// Static memory, retained activations of every in-flight microbatch, the
/// forward-window recomputations of one microbatch (not on the last stage)
/// and the reserve.
pub fn plan_peak_bytes(plan: &LayerPhasePlan, ctx: &HeuContext, layer: &LayerTemplate) -> u64 {
    let ops = layer.forward_ops();
    let l = ctx.n_layers as u64;
    let kept: u64 = ops.iter().zip(&plan.keep).filter(|(_, &k)| k).map(|(op, _)| op.out_bytes).sum();
    let fwd_comm: u64 = if ctx.role == StageRole::Last {
        0
    } else {
        (0..ops.len()).filter(|&i| !plan.keep[i] && plan.phase[i] <= 2).map(|i| ops[i].out_bytes).sum()
    };
    ctx.static_bytes + l * ctx.n_batch as u64 * kept + l * fwd_comm + ctx.delta_bytes(layer, &plan.keep)
}

/// Every rule a plan must satisfy; empty when valid.
pub fn check_plan(plan: &LayerPhasePlan, layer: &LayerTemplate, hw: &HardwareProfile, ctx: &HeuContext) -> Vec<String> {
    let times: Vec<Rational> = layer.forward_ops().iter().map(|op| hw.effective_time(op)).collect();
    check_plan_times(plan, layer, &times, ctx)
}

fn check_plan_times(plan: &LayerPhasePlan, layer: &LayerTemplate, times: &[Rational], ctx: &HeuContext) -> Vec<String> {
    let ops = layer.forward_ops();
    let n = ops.len();
    let mut issues = Vec::new();
    if plan.keep.len() != n || plan.phase.len() != n {
        issues.push(format!("plan covers {} operators, layer has {n}", plan.phase.len()));
        return issues;
    }
    if plan.role != ctx.role {
        issues.push(format!("plan role {:?} differs from context role {:?}", plan.role, ctx.role));
    }
    if !plan.keep[n - 1] {
        issues.push("checkpoint operator is not retained".into());
    }
    let deps = layer.dep_indices();
    for i in 0..n {
        let t = plan.phase[i];
        if !ctx.role.phases().contains(&t) {
            issues.push(format!("op {} placed in unavailable phase {t}", ops[i].id));
        }
        if ops[i].is_comm() && t != 5 {
            issues.push(format!("comm op {} placed in window {t}", ops[i].id));
        }
        for &j in &deps[i] {
            if !plan.keep[j] && plan.phase[j] > t {
                issues
                    .push(format!("op {} in phase {t} needs op {} from phase {}", ops[i].id, ops[j].id, plan.phase[j]));
            }
        }
    }
    for t in 1..=4u8 {
        let load: Rational = (0..n).filter(|&i| !plan.keep[i] && plan.phase[i] == t).map(|i| times[i].clone()).sum();
        if load > ctx.ctime_us[t as usize - 1] {
            issues.push(format!("window {t} load {load} exceeds capacity {}", ctx.ctime_us[t as usize - 1]));
        }
    }
    let objective: Rational = (0..n).filter(|&i| !plan.keep[i] && plan.phase[i] == 5).map(|i| times[i].clone()).sum();
    if objective != plan.objective_us {
        issues.push(format!("objective {} differs from replayed {objective}", plan.objective_us));
    }
    let peak = plan_peak_bytes(plan, ctx, layer);
    if peak > ctx.budget_bytes {
        issues.push(format!("peak {peak} B exceeds budget {} B", ctx.budget_bytes));
    }
    issues
}
