//! CPLEX LP text export and solution import.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use super::compile::compile;
use super::{IlpError, IlpModel, LinExpr, VarKind};
use crate::rational::{denom_lcm, exact_decimal, parse, ratio, Rational};

const TERMS_PER_LINE: usize = 8;

/// Renders the model in CPLEX LP format, objective and rows in builder
/// order. Rows whose coefficients have no finite decimal form are scaled to
/// integers; a scaled objective is noted in a comment.
pub fn write_lp(model: &IlpModel) -> String {
    let mut out = String::new();
    let names: Vec<&str> = model.vars().iter().map(|v| v.name.as_str()).collect();

    let obj = model.objective();
    let obj_scale = scale_for(obj.terms().map(|t| t.1));
    if !obj_scale.is_one() {
        let _ = writeln!(out, "\\ objective scaled by {obj_scale}");
    }
    if !obj.constant().is_zero() {
        let _ = writeln!(out, "\\ objective constant {}", show(obj.constant()));
    }
    out.push_str("Minimize\n obj:");
    write_terms(&mut out, obj, &Rational::from_integer(obj_scale), &names);
    out.push_str("\nSubject To\n");

    let mut seen = BTreeSet::new();
    for (k, c) in model.constraints().iter().enumerate() {
        if c.expr.is_empty() && names.is_empty() {
            continue;
        }
        let mut name = c.name.clone();
        if !seen.insert(name.clone()) {
            name = format!("{}_{k}", c.name);
            seen.insert(name.clone());
        }
        let rhs = &c.rhs - c.expr.constant();
        let scale = Rational::from_integer(scale_for(c.expr.terms().map(|t| t.1).chain([&rhs])));
        let _ = write!(out, " {name}:");
        if c.expr.is_empty() {
            let _ = write!(out, " 0 {}", names[0]);
        } else {
            write_terms(&mut out, &c.expr, &scale, &names);
        }
        let _ = writeln!(out, " {} {}", c.rel, show(&(rhs * scale)));
    }

    let conts: Vec<_> = model.vars().iter().filter(|v| v.kind != VarKind::Bool).collect();
    if !conts.is_empty() {
        out.push_str("Bounds\n");
        for v in conts {
            if let VarKind::Cont { lo, hi } = &v.kind {
                let lo = lo.as_ref().map_or("-inf".to_string(), show);
                let hi = hi.as_ref().map_or("+inf".to_string(), show);
                let _ = writeln!(out, " {lo} <= {} <= {hi}", v.name);
            }
        }
    }
    let bools: Vec<&str> = model.vars().iter().filter(|v| v.kind == VarKind::Bool).map(|v| v.name.as_str()).collect();
    if !bools.is_empty() {
        out.push_str("Binaries\n");
        for chunk in bools.chunks(TERMS_PER_LINE) {
            let _ = writeln!(out, " {}", chunk.join(" "));
        }
    }
    out.push_str("End\n");
    out
}

fn scale_for<'a>(values: impl Iterator<Item = &'a Rational>) -> BigInt {
    let values: Vec<&Rational> = values.collect();
    if values.iter().all(|v| exact_decimal(v).is_some()) {
        BigInt::one()
    } else {
        denom_lcm(values)
    }
}

fn show(r: &Rational) -> String {
    exact_decimal(r).unwrap_or_else(|| format!("{}", crate::rational::to_f64(r)))
}

fn write_terms(out: &mut String, expr: &LinExpr, scale: &Rational, names: &[&str]) {
    for (k, (v, c)) in expr.terms().enumerate() {
        if k > 0 && k % TERMS_PER_LINE == 0 {
            out.push_str("\n   ");
        }
        let c = c * scale;
        let sign = if c.is_negative() { "-" } else { "+" };
        let mag = c.abs();
        if k == 0 && sign == "+" {
            out.push(' ');
        } else {
            let _ = write!(out, " {sign} ");
        }
        if !mag.is_one() {
            let _ = write!(out, "{} ", show(&mag));
        }
        out.push_str(names[v.index()]);
    }
}

/// Reads `name value` lines (the usual `.sol` layout; `#` lines are
/// comments). Booleans are rounded when within 1e-6 of 0 or 1; continuous
/// variables are recomputed from the booleans. Missing booleans read as 0.
pub fn import_solution(model: &IlpModel, text: &str) -> Result<Vec<Rational>, IlpError> {
    let index: BTreeMap<&str, usize> = model.vars().iter().enumerate().map(|(i, v)| (v.name.as_str(), i)).collect();
    let tol = ratio(1, 1_000_000);
    let mut values = vec![Rational::zero(); model.vars().len()];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('\\') {
            continue;
        }
        let bad = || IlpError::BadSolutionLine { line: ln + 1, text: line.to_string() };
        let mut parts = line.split_whitespace();
        let (Some(name), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let &i = index.get(name).ok_or_else(|| IlpError::UnknownVariable(name.to_string()))?;
        let value = parse(value).ok_or_else(bad)?;
        if model.vars()[i].kind == VarKind::Bool {
            values[i] = if (&value - Rational::one()).abs() <= tol {
                Rational::one()
            } else if value.abs() <= tol {
                Rational::zero()
            } else {
                return Err(bad());
            };
        }
    }
    let c = compile(model)?;
    let x: Vec<u8> = c.bools.iter().map(|&v| u8::from(values[v].is_one())).collect();
    Ok(c.assignment(&x))
}
