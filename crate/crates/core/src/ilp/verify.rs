//! Exact re-check of an assignment against the raw constraint list. Kept
//! separate from the solvers' lowered form on purpose.

use num_traits::{One, Zero};

use super::{IlpModel, LinExpr, Rel, VarKind};
use crate::rational::Rational;

fn eval(expr: &LinExpr, values: &[Rational]) -> Rational {
    let mut acc = expr.constant().clone();
    for (v, c) in expr.terms() {
        acc += c * &values[v.index()];
    }
    acc
}

/// Names of every violated constraint, bound or integrality requirement.
pub fn verify(model: &IlpModel, values: &[Rational]) -> Vec<String> {
    let mut bad = Vec::new();
    if values.len() != model.vars().len() {
        bad.push(format!("assignment has {} values for {} variables", values.len(), model.vars().len()));
        return bad;
    }
    for (var, val) in model.vars().iter().zip(values) {
        match &var.kind {
            VarKind::Bool => {
                if !(val.is_zero() || val.is_one()) {
                    bad.push(format!("{} is not 0/1", var.name));
                }
            }
            VarKind::Cont { lo, hi } => {
                if lo.as_ref().is_some_and(|lo| val < lo) || hi.as_ref().is_some_and(|hi| val > hi) {
                    bad.push(format!("{} out of bounds", var.name));
                }
            }
        }
    }
    for c in model.constraints() {
        let lhs = eval(&c.expr, values);
        let ok = match c.rel {
            Rel::Le => lhs <= c.rhs,
            Rel::Eq => lhs == c.rhs,
            Rel::Ge => lhs >= c.rhs,
        };
        if !ok {
            bad.push(c.name.clone());
        }
    }
    bad
}

pub fn evaluate_objective(model: &IlpModel, values: &[Rational]) -> Rational {
    eval(model.objective(), values)
}
