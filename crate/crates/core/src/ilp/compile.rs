//! Lowers a model to integer rows over boolean variables only.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};

use super::{IlpError, IlpModel, Rel, VarKind};
use crate::rational::Rational;

/// Affine function of the booleans, keyed by boolean position, as integer
/// numerators over one positive denominator.
#[derive(Clone, Debug)]
pub(super) struct Affine {
    pub terms: BTreeMap<usize, i128>,
    pub constant: i128,
    pub den: i128,
}

impl Default for Affine {
    fn default() -> Self {
        Affine { terms: BTreeMap::new(), constant: 0, den: 1 }
    }
}

/// Numerator and positive denominator of `r`, if both fit.
fn parts(r: &Rational) -> Option<(i128, i128)> {
    Some((r.numer().to_i128()?, r.denom().to_i128()?))
}

impl Affine {
    fn constant_of(r: &Rational) -> Option<Affine> {
        let (n, d) = parts(r)?;
        Some(Affine { constant: n, den: d, ..Affine::default() })
    }

    /// Moves to a common denominator with `d` and returns the factor that
    /// lifts numerators over `d` to it.
    fn widen(&mut self, d: i128) -> Option<i128> {
        let g = self.den.gcd(&d);
        let lcm = (self.den / g).checked_mul(d)?;
        let up = lcm / self.den;
        if up != 1 {
            for c in self.terms.values_mut() {
                *c = c.checked_mul(up)?;
            }
            self.constant = self.constant.checked_mul(up)?;
            self.den = lcm;
        }
        Some(lcm / d)
    }

    fn add_term(&mut self, b: usize, k: &Rational) -> Option<()> {
        let (n, d) = parts(k)?;
        let f = self.widen(d)?;
        let e = self.terms.entry(b).or_insert(0);
        *e = e.checked_add(n.checked_mul(f)?)?;
        if *e == 0 {
            self.terms.remove(&b);
        }
        Some(())
    }

    fn add_scaled(&mut self, other: &Affine, k: &Rational) -> Option<()> {
        let (n, d) = parts(k)?;
        let f = self.widen(other.den.checked_mul(d)?)?.checked_mul(n)?;
        for (b, c) in &other.terms {
            let e = self.terms.entry(*b).or_insert(0);
            *e = e.checked_add(c.checked_mul(f)?)?;
            if *e == 0 {
                self.terms.remove(b);
            }
        }
        self.constant = self.constant.checked_add(other.constant.checked_mul(f)?)?;
        Some(())
    }

    fn reduce(&mut self) {
        let g = self.terms.values().fold(self.den.gcd(&self.constant), |g, c| g.gcd(c));
        if g > 1 {
            for c in self.terms.values_mut() {
                *c /= g;
            }
            self.constant /= g;
            self.den /= g;
        }
    }

    pub fn eval(&self, x: &[u8]) -> Rational {
        let mut v = self.constant;
        for (b, c) in &self.terms {
            if x[*b] == 1 {
                v += c;
            }
        }
        Rational::new(BigInt::from(v), BigInt::from(self.den))
    }
}

/// `Σ coef·x ≤ rhs`, or `= rhs` when `eq`.
#[derive(Clone, Debug)]
pub(super) struct Row {
    pub terms: Vec<(usize, i128)>,
    pub rhs: i128,
    pub eq: bool,
}

#[derive(Clone, Debug)]
pub(super) struct Compiled {
    /// Model variable index per boolean position.
    pub bools: Vec<usize>,
    /// Definition of every continuous variable (indexed by model variable).
    pub defs: Vec<Option<Affine>>,
    pub rows: Vec<Row>,
    pub cost: Vec<i128>,
    pub cost_scale: BigInt,
    pub cost_constant: Rational,
    /// A row without boolean terms is violated.
    pub trivially_infeasible: bool,
}

impl Compiled {
    pub fn n(&self) -> usize {
        self.bools.len()
    }

    pub fn objective(&self, scaled_cost: i128) -> Rational {
        Rational::new(BigInt::from(scaled_cost), self.cost_scale.clone()) + &self.cost_constant
    }

    /// Full variable assignment for a boolean vector.
    pub fn assignment(&self, x: &[u8]) -> Vec<Rational> {
        let mut out = vec![Rational::zero(); self.defs.len()];
        for (b, &v) in self.bools.iter().enumerate() {
            out[v] = Rational::from_integer(BigInt::from(x[b]));
        }
        for (v, def) in self.defs.iter().enumerate() {
            if let Some(def) = def {
                out[v] = def.eval(x);
            }
        }
        out
    }
}

pub(super) fn compile(model: &IlpModel) -> Result<Compiled, IlpError> {
    let vars = model.vars();
    let mut pos = vec![None; vars.len()];
    let mut bools = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        if v.kind == VarKind::Bool {
            pos[i] = Some(bools.len());
            bools.push(i);
        }
    }

    // Define continuous variables from equalities in which they are the only
    // unknown, repeating until nothing changes.
    let mut defs: Vec<Option<Affine>> = vec![None; vars.len()];
    let mut used = vec![false; model.constraints().len()];
    loop {
        let mut progress = false;
        for (ci, c) in model.constraints().iter().enumerate() {
            if used[ci] || c.rel != Rel::Eq {
                continue;
            }
            let unknown: Vec<_> =
                c.expr.terms().filter(|(v, _)| pos[v.index()].is_none() && defs[v.index()].is_none()).collect();
            if unknown.len() != 1 {
                continue;
            }
            let overflow = || IlpError::Overflow(c.name.clone());
            let (u, a) = (unknown[0].0, unknown[0].1.clone());
            // a·u + rest = 0  =>  u = −rest / a
            let inv = -a.recip();
            let mut def = Affine::constant_of(&((c.expr.constant().clone() - &c.rhs) * &inv)).ok_or_else(overflow)?;
            for (v, coef) in c.expr.terms() {
                if v == u {
                    continue;
                }
                add_var(&mut def, v.index(), &(coef * &inv), &pos, &defs).ok_or_else(overflow)?;
            }
            def.reduce();
            defs[u.index()] = Some(def);
            used[ci] = true;
            progress = true;
        }
        if !progress {
            break;
        }
    }
    for (i, v) in vars.iter().enumerate() {
        if pos[i].is_none() && defs[i].is_none() {
            return Err(IlpError::Undetermined(v.name.clone()));
        }
    }

    let mut rows = Vec::new();
    let mut trivially_infeasible = false;
    let mut emit = |name: &str, mut lhs: Affine, rel: Rel, rhs: &Rational| -> Result<(), IlpError> {
        let overflow = || IlpError::Overflow(name.to_string());
        lhs.reduce();
        // (Σ t·x + constant) / den  rel  n / d
        let (n, d) = parts(rhs).ok_or_else(overflow)?;
        let r =
            n.checked_mul(lhs.den).and_then(|v| v.checked_sub(lhs.constant.checked_mul(d)?)).ok_or_else(overflow)?;
        if lhs.terms.is_empty() {
            let ok = match rel {
                Rel::Le => r >= 0,
                Rel::Eq => r == 0,
                Rel::Ge => r <= 0,
            };
            trivially_infeasible |= !ok;
            return Ok(());
        }
        let sign = if rel == Rel::Ge { -1 } else { 1 };
        let mut terms = lhs
            .terms
            .iter()
            .map(|(&b, &t)| t.checked_mul(d * sign).map(|t| (b, t)).ok_or_else(overflow))
            .collect::<Result<Vec<_>, _>>()?;
        let mut r = r * sign;
        let g = terms.iter().fold(r.abs(), |g, (_, t)| g.gcd(t));
        if g > 1 {
            for (_, t) in &mut terms {
                *t /= g;
            }
            r /= g;
        }
        rows.push(Row { terms, rhs: r, eq: rel == Rel::Eq });
        Ok(())
    };

    for (ci, c) in model.constraints().iter().enumerate() {
        if used[ci] {
            continue;
        }
        let overflow = || IlpError::Overflow(c.name.clone());
        let mut lhs = Affine::constant_of(c.expr.constant()).ok_or_else(overflow)?;
        for (v, coef) in c.expr.terms() {
            add_var(&mut lhs, v.index(), coef, &pos, &defs).ok_or_else(overflow)?;
        }
        emit(&c.name, lhs, c.rel, &c.rhs)?;
    }
    for (i, v) in vars.iter().enumerate() {
        if let VarKind::Cont { lo, hi } = &v.kind {
            let def = defs[i].clone().expect("checked above");
            if let Some(lo) = lo {
                emit(&v.name, def.clone(), Rel::Ge, lo)?;
            }
            if let Some(hi) = hi {
                emit(&v.name, def, Rel::Le, hi)?;
            }
        }
    }

    let overflow = || IlpError::Overflow("objective".into());
    let mut obj = Affine::constant_of(model.objective().constant()).ok_or_else(overflow)?;
    for (v, coef) in model.objective().terms() {
        add_var(&mut obj, v.index(), coef, &pos, &defs).ok_or_else(overflow)?;
    }
    obj.reduce();
    let mut cost = vec![0i128; bools.len()];
    for (b, c) in &obj.terms {
        cost[*b] = *c;
    }

    Ok(Compiled {
        bools,
        defs,
        rows,
        cost,
        cost_scale: BigInt::from(obj.den),
        cost_constant: Rational::new(BigInt::from(obj.constant), BigInt::from(obj.den)),
        trivially_infeasible,
    })
}

fn add_var(
    into: &mut Affine,
    var: usize,
    coef: &Rational,
    pos: &[Option<usize>],
    defs: &[Option<Affine>],
) -> Option<()> {
    match pos[var] {
        Some(b) => into.add_term(b, coef),
        None => into.add_scaled(defs[var].as_ref().expect("continuous variable defined before use"), coef),
    }
}
