//! A small exact 0/1 integer-program engine.
//!
//! Models hold boolean variables, continuous variables that are fully
//! determined by the booleans through equality rows, linear constraints and a
//! minimisation objective. Coefficients are exact rationals. Two solvers are
//! provided: [`solve_exhaustive`] (plain enumeration, used as a reference) and
//! [`solve_bnb`] (best-first branch and bound with unit propagation).

mod bnb;
mod compile;
mod exhaustive;
mod lp;
mod verify;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

use num_traits::{One, Zero};

use crate::rational::Rational;

pub use bnb::{solve_bnb, WORK_PER_MS};
pub use exhaustive::{solve_exhaustive, DEFAULT_MAX_BOOL_VARS};
pub use lp::{import_solution, write_lp};
pub use verify::{evaluate_objective, verify};

static NEXT_MODEL: AtomicU32 = AtomicU32::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId {
    model: u32,
    index: u32,
}

impl VarId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// A boolean variable or its complement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lit {
    pub var: VarId,
    pub negated: bool,
}

impl Lit {
    pub fn pos(var: VarId) -> Lit {
        Lit { var, negated: false }
    }

    pub fn neg(var: VarId) -> Lit {
        Lit { var, negated: true }
    }
}

impl std::ops::Not for Lit {
    type Output = Lit;

    fn not(self) -> Lit {
        Lit { var: self.var, negated: !self.negated }
    }
}

impl From<VarId> for Lit {
    fn from(var: VarId) -> Lit {
        Lit::pos(var)
    }
}

/// Affine expression with at most one term per variable and no zero terms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinExpr {
    terms: BTreeMap<VarId, Rational>,
    constant: Rational,
}

impl LinExpr {
    pub fn new() -> LinExpr {
        LinExpr::default()
    }

    pub fn constant_term(c: Rational) -> LinExpr {
        LinExpr { terms: BTreeMap::new(), constant: c }
    }

    pub fn add_term(&mut self, var: VarId, coef: Rational) -> &mut Self {
        if coef.is_zero() {
            return self;
        }
        let entry = self.terms.entry(var).or_insert_with(Rational::zero);
        *entry += coef;
        if entry.is_zero() {
            self.terms.remove(&var);
        }
        self
    }

    /// Adds `coef · lit`, where a negated literal contributes `coef · (1 − v)`.
    pub fn add_lit(&mut self, lit: Lit, coef: Rational) -> &mut Self {
        if lit.negated {
            self.constant += &coef;
            self.add_term(lit.var, -coef)
        } else {
            self.add_term(lit.var, coef)
        }
    }

    pub fn add_constant(&mut self, c: Rational) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: &Rational) -> &mut Self {
        for (v, c) in &other.terms {
            self.add_term(*v, c * scale);
        }
        self.constant += &other.constant * scale;
        self
    }

    pub fn term(mut self, var: VarId, coef: Rational) -> Self {
        self.add_term(var, coef);
        self
    }

    pub fn terms(&self) -> impl Iterator<Item = (VarId, &Rational)> {
        self.terms.iter().map(|(v, c)| (*v, c))
    }

    pub fn coef(&self, var: VarId) -> Rational {
        self.terms.get(&var).cloned().unwrap_or_else(Rational::zero)
    }

    pub fn constant(&self) -> &Rational {
        &self.constant
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rel {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Rel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rel::Le => "<=",
            Rel::Eq => "=",
            Rel::Ge => ">=",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Constraint {
    pub name: String,
    pub expr: LinExpr,
    pub rel: Rel,
    pub rhs: Rational,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VarKind {
    Bool,
    Cont { lo: Option<Rational>, hi: Option<Rational> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Var {
    pub name: String,
    pub kind: VarKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IlpError {
    #[error("variable belongs to a different model")]
    ModelMismatch,
    #[error("{vars} boolean variables exceed the enumeration limit of {max}")]
    TooLarge { vars: usize, max: usize },
    #[error("continuous variable {0} is not determined by equality constraints")]
    Undetermined(String),
    #[error("coefficient scaling overflowed in constraint {0}")]
    Overflow(String),
    #[error("unknown variable {0} in solution file")]
    UnknownVariable(String),
    #[error("bad solution line {line}: {text}")]
    BadSolutionLine { line: usize, text: String },
}

/// A minimisation model.
#[derive(Clone, Debug)]
pub struct IlpModel {
    id: u32,
    vars: Vec<Var>,
    constraints: Vec<Constraint>,
    objective: LinExpr,
}

impl Default for IlpModel {
    fn default() -> Self {
        IlpModel::new()
    }
}

impl IlpModel {
    pub fn new() -> IlpModel {
        IlpModel {
            id: NEXT_MODEL.fetch_add(1, Ordering::Relaxed),
            vars: Vec::new(),
            constraints: Vec::new(),
            objective: LinExpr::new(),
        }
    }

    fn issue(&mut self, name: String, kind: VarKind) -> VarId {
        let v = VarId { model: self.id, index: self.vars.len() as u32 };
        self.vars.push(Var { name, kind });
        v
    }

    pub fn new_bool(&mut self, name: impl Into<String>) -> VarId {
        self.issue(name.into(), VarKind::Bool)
    }

    pub fn new_cont(&mut self, name: impl Into<String>, lo: Option<Rational>, hi: Option<Rational>) -> VarId {
        self.issue(name.into(), VarKind::Cont { lo, hi })
    }

    fn owns(&self, v: VarId) -> bool {
        v.model == self.id && v.index() < self.vars.len()
    }

    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        expr: LinExpr,
        rel: Rel,
        rhs: Rational,
    ) -> Result<(), IlpError> {
        if !expr.terms().all(|(v, _)| self.owns(v)) {
            return Err(IlpError::ModelMismatch);
        }
        self.constraints.push(Constraint { name: name.into(), expr, rel, rhs });
        Ok(())
    }

    pub fn set_objective(&mut self, expr: LinExpr) -> Result<(), IlpError> {
        if !expr.terms().all(|(v, _)| self.owns(v)) {
            return Err(IlpError::ModelMismatch);
        }
        self.objective = expr;
        Ok(())
    }

    /// Fixes a boolean literal to true.
    pub fn fix_true(&mut self, name: impl Into<String>, lit: Lit) -> Result<(), IlpError> {
        let mut e = LinExpr::new();
        e.add_lit(lit, Rational::one());
        let rhs = Rational::one() - e.constant();
        let e = LinExpr { constant: Rational::zero(), ..e };
        self.add_constraint(name, e, Rel::Eq, rhs)
    }

    /// New boolean `z = a ∧ b` via `z ≤ a`, `z ≤ b`, `z ≥ a + b − 1`.
    pub fn linearize_and(&mut self, name: impl Into<String>, a: Lit, b: Lit) -> Result<VarId, IlpError> {
        if !self.owns(a.var) || !self.owns(b.var) {
            return Err(IlpError::ModelMismatch);
        }
        let name = name.into();
        let z = self.new_bool(name.clone());
        let one = Rational::one();
        for (tag, lit) in [("a", a), ("b", b)] {
            // z - lit <= 0
            let mut e = LinExpr::new();
            e.add_term(z, one.clone()).add_lit(lit, -one.clone());
            let rhs = -e.constant().clone();
            self.push_raw(format!("{name}_le_{tag}"), e, Rel::Le, rhs);
        }
        // z - a - b >= -1
        let mut e = LinExpr::new();
        e.add_term(z, one.clone()).add_lit(a, -one.clone()).add_lit(b, -one.clone());
        let rhs = -one - e.constant();
        self.push_raw(format!("{name}_ge"), e, Rel::Ge, rhs);
        Ok(z)
    }

    fn push_raw(&mut self, name: String, mut expr: LinExpr, rel: Rel, rhs: Rational) {
        expr.constant = Rational::zero();
        self.constraints.push(Constraint { name, expr, rel, rhs });
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, v: VarId) -> &Var {
        &self.vars[v.index()]
    }

    pub fn var_id(&self, index: usize) -> VarId {
        assert!(index < self.vars.len());
        VarId { model: self.id, index: index as u32 }
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn n_bool(&self) -> usize {
        self.vars.iter().filter(|v| v.kind == VarKind::Bool).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    /// Best solution found when the search budget ran out; `gap` is the
    /// distance to the best open lower bound.
    Feasible {
        gap: Rational,
    },
    Infeasible,
    /// Budget exhausted without any feasible solution.
    TimedOut,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Solution {
    pub status: Status,
    /// Value per variable index; empty when no solution was found.
    pub assignment: Vec<Rational>,
    pub objective_value: Option<Rational>,
}

impl Solution {
    pub fn has_assignment(&self) -> bool {
        !self.assignment.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Rational {
        &self.assignment[v.index()]
    }

    pub fn is_one(&self, v: VarId) -> bool {
        self.assignment[v.index()].is_one()
    }

    fn none(status: Status) -> Solution {
        Solution { status, assignment: Vec::new(), objective_value: None }
    }
}
