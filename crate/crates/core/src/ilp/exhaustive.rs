use super::compile::{compile, Compiled};
use super::{IlpError, IlpModel, Solution, Status};

pub const DEFAULT_MAX_BOOL_VARS: usize = 24;

/// Enumerates every boolean assignment in lexicographic order (variable
/// issue order, 0 before 1) and returns the first optimum found, which is the
/// lexicographically smallest one.
///
/// A row is checked as soon as its last variable is assigned; there is no
/// bounding and no propagation.
pub fn solve_exhaustive(model: &IlpModel, max_bool_vars: usize) -> Result<Solution, IlpError> {
    let n = model.n_bool();
    if n > max_bool_vars {
        return Err(IlpError::TooLarge { vars: n, max: max_bool_vars });
    }
    let c = compile(model)?;
    if c.trivially_infeasible {
        return Ok(Solution::none(Status::Infeasible));
    }
    let mut closing: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, row) in c.rows.iter().enumerate() {
        let last = row.terms.iter().map(|t| t.0).max().expect("rows have terms");
        closing[last].push(r);
    }
    let mut search = Search { c: &c, closing, x: vec![0; n], best: None };
    search.descend(0, 0);
    Ok(match search.best {
        None => Solution::none(Status::Infeasible),
        Some((cost, x)) => {
            Solution { status: Status::Optimal, assignment: c.assignment(&x), objective_value: Some(c.objective(cost)) }
        }
    })
}

struct Search<'a> {
    c: &'a Compiled,
    closing: Vec<Vec<usize>>,
    x: Vec<u8>,
    best: Option<(i128, Vec<u8>)>,
}

impl Search<'_> {
    fn descend(&mut self, k: usize, cost: i128) {
        if k == self.x.len() {
            if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
                self.best = Some((cost, self.x.clone()));
            }
            return;
        }
        for v in [0u8, 1] {
            self.x[k] = v;
            if self.closing[k].iter().all(|&r| self.row_holds(r)) {
                self.descend(k + 1, cost + if v == 1 { self.c.cost[k] } else { 0 });
            }
        }
        self.x[k] = 0;
    }

    fn row_holds(&self, r: usize) -> bool {
        let row = &self.c.rows[r];
        let act: i128 = row.terms.iter().map(|&(b, a)| if self.x[b] == 1 { a } else { 0 }).sum();
        if row.eq {
            act == row.rhs
        } else {
            act <= row.rhs
        }
    }
}
