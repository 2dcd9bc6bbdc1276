use std::collections::HashMap;
use std::rc::Rc;

use num_bigint::BigInt;

use super::compile::{compile, Compiled};
use super::{IlpError, IlpModel, Solution, Status};
use crate::rational::Rational;

/// Work units allowed per millisecond of `time_limit_ms`. A unit is one row
/// term or assignment entry touched. The limit is a work budget rather than
/// a clock so that results never depend on machine speed; an optimized
/// build gets through it well within the requested time.
pub const WORK_PER_MS: u64 = 200_000;

const FREE: u8 = 2;

/// Stack for the solver thread; search depth grows with the variable count.
const STACK_BYTES: usize = 256 << 20;

/// Depth-first branch and bound with a cache of solved subproblems.
///
/// Branches on the first free boolean in issue order, 0 before 1. Each node
/// runs bound propagation over the rows touching newly fixed variables; the
/// lower bound of a node is its fixed cost plus every negative free cost.
/// Two nodes with the same free variables and the same residual right-hand
/// sides on every unfinished row pose the same subproblem, so its answer
/// (exact, infeasible, or "no better than c") is reused.
pub fn solve_bnb(model: &IlpModel, time_limit_ms: u64) -> Result<Solution, IlpError> {
    let c = compile(model)?;
    if c.trivially_infeasible {
        return Ok(Solution::none(Status::Infeasible));
    }
    let budget = time_limit_ms.saturating_mul(WORK_PER_MS).max(1);
    let sol = std::thread::scope(|scope| {
        std::thread::Builder::new()
            .stack_size(STACK_BYTES)
            .spawn_scoped(scope, || Bnb::new(&c, budget).run())
            .expect("spawn solver thread")
            .join()
            .expect("solver thread panicked")
    });
    Ok(sol)
}

enum Cached {
    Exact(i128, Rc<Vec<u8>>),
    /// No completion costs less than this.
    AtLeast(i128),
}

enum Outcome {
    /// Cheapest completion cost of the free variables and a full assignment.
    Found(i128, Rc<Vec<u8>>),
    NoneBelow,
    Abort,
}

/// Partial assignment with row activities kept up to date.
#[derive(Clone)]
struct Node {
    x: Vec<u8>,
    /// Per row: sum of coefficients fixed to 1, and of the negative and
    /// positive coefficients still free.
    fixed: Vec<i128>,
    neg: Vec<i128>,
    pos: Vec<i128>,
    open: Vec<u32>,
    /// Cost of variables fixed to 1 and the sum of negative free costs.
    cost: i128,
    free_neg_cost: i128,
    /// No free variable sits before this position.
    first_free: usize,
}

impl Node {
    fn min_act(&self, r: usize) -> i128 {
        self.fixed[r] + self.neg[r]
    }

    fn max_act(&self, r: usize) -> i128 {
        self.fixed[r] + self.pos[r]
    }

    fn next_free(&mut self) -> Option<usize> {
        while self.first_free < self.x.len() && self.x[self.first_free] != FREE {
            self.first_free += 1;
        }
        (self.first_free < self.x.len()).then_some(self.first_free)
    }
}

struct Bnb<'a> {
    c: &'a Compiled,
    occurs: Vec<Vec<(usize, i128)>>,
    /// Largest coefficient magnitude per row.
    widest: Vec<i128>,
    queue: Vec<usize>,
    queued: Vec<bool>,
    cache: HashMap<Vec<i128>, Cached>,
    incumbent: Option<(i128, Vec<u8>)>,
    budget: u64,
    work: u64,
    expanded: u64,
}

impl<'a> Bnb<'a> {
    fn new(c: &'a Compiled, budget: u64) -> Self {
        let mut occurs = vec![Vec::new(); c.n()];
        for (r, row) in c.rows.iter().enumerate() {
            for &(b, a) in &row.terms {
                occurs[b].push((r, a));
            }
        }
        Bnb {
            c,
            occurs,
            widest: c.rows.iter().map(|row| row.terms.iter().map(|&(_, a)| a.abs()).max().unwrap_or(0)).collect(),
            queue: Vec::new(),
            queued: vec![false; c.rows.len()],
            cache: HashMap::new(),
            incumbent: None,
            budget,
            work: 0,
            expanded: 0,
        }
    }

    fn root(&self) -> Node {
        let rows = &self.c.rows;
        Node {
            x: vec![FREE; self.c.n()],
            fixed: vec![0; rows.len()],
            neg: rows.iter().map(|r| r.terms.iter().map(|&(_, a)| a.min(0)).sum()).collect(),
            pos: rows.iter().map(|r| r.terms.iter().map(|&(_, a)| a.max(0)).sum()).collect(),
            open: rows.iter().map(|r| r.terms.len() as u32).collect(),
            cost: 0,
            free_neg_cost: self.c.cost.iter().map(|&c| c.min(0)).sum(),
            first_free: 0,
        }
    }

    fn run(mut self) -> Solution {
        let n = self.c.n();
        let mut root = self.root();
        for r in 0..self.c.rows.len() {
            self.enqueue(r);
        }
        if !self.propagate(&mut root) {
            return Solution::none(Status::Infeasible);
        }
        let root_cost = root.cost;
        let root_bound = root_cost + root.free_neg_cost;
        let outcome = self.search(root, i128::MAX);
        log::debug!("bnb: {} nodes, {} work over {n} booleans, {} cached", self.expanded, self.work, self.cache.len());

        let (status, best) = match outcome {
            Outcome::Found(cost, x) => (Status::Optimal, Some((root_cost + cost, x.to_vec()))),
            Outcome::NoneBelow => (Status::Infeasible, None),
            Outcome::Abort => match self.incumbent.take() {
                None => (Status::TimedOut, None),
                Some((best, x)) => {
                    let gap = (best - root_bound).max(0);
                    let gap = Rational::new(BigInt::from(gap), self.c.cost_scale.clone());
                    (Status::Feasible { gap }, Some((best, x)))
                }
            },
        };
        match best {
            None => Solution::none(status),
            Some((cost, x)) => {
                Solution { status, assignment: self.c.assignment(&x), objective_value: Some(self.c.objective(cost)) }
            }
        }
    }

    fn key(&mut self, node: &Node) -> Vec<i128> {
        let mut key = Vec::new();
        let mut mask = 0i128;
        for (b, &v) in node.x.iter().enumerate() {
            if v == FREE {
                mask |= 1 << (b % 127);
            }
            if b % 127 == 126 {
                key.push(mask);
                mask = 0;
            }
        }
        key.push(mask);
        for (r, row) in self.c.rows.iter().enumerate() {
            if node.open[r] > 0 {
                key.push(row.rhs - node.fixed[r]);
            }
        }
        self.work += (node.x.len() + self.c.rows.len()) as u64;
        key
    }

    /// Cheapest completion of `node` costing less than `cutoff`, measured
    /// from the cost already fixed in it.
    fn search(&mut self, mut node: Node, cutoff: i128) -> Outcome {
        let path = node.cost;
        let cutoff = match &self.incumbent {
            Some((best, _)) => cutoff.min(best - path),
            None => cutoff,
        };
        if node.free_neg_cost >= cutoff {
            return Outcome::NoneBelow;
        }
        let Some(j) = node.next_free() else {
            let full = Rc::new(node.x);
            self.offer(path, &full);
            return Outcome::Found(0, full);
        };
        let key = self.key(&node);
        match self.cache.get(&key) {
            Some(Cached::Exact(v, sol)) => {
                if *v >= cutoff {
                    return Outcome::NoneBelow;
                }
                let (v, full) = (*v, Rc::new(merge(&node.x, sol)));
                self.offer(path + v, &full);
                return Outcome::Found(v, full);
            }
            Some(Cached::AtLeast(c)) if cutoff <= *c => return Outcome::NoneBelow,
            _ => {}
        }
        if self.work >= self.budget {
            return Outcome::Abort;
        }
        self.expanded += 1;

        let mut best: Option<(i128, Rc<Vec<u8>>)> = None;
        for v in [0u8, 1] {
            let mut child = if v == 0 { node.clone() } else { std::mem::replace(&mut node, self.root_stub()) };
            self.work += 2 * (child.x.len() + 4 * child.fixed.len()) as u64;
            self.assign(&mut child, j, v);
            if !self.propagate(&mut child) {
                continue;
            }
            let extra = child.cost - path;
            let limit = best.as_ref().map_or(cutoff, |(b, _)| cutoff.min(*b));
            match self.search(child, limit.saturating_sub(extra)) {
                Outcome::Found(c, sol) => best = Some((extra + c, sol)),
                Outcome::NoneBelow => {}
                Outcome::Abort => return Outcome::Abort,
            }
        }
        match best {
            Some((v, sol)) => {
                self.cache.insert(key, Cached::Exact(v, sol.clone()));
                Outcome::Found(v, sol)
            }
            None => {
                self.cache.insert(key, Cached::AtLeast(cutoff));
                Outcome::NoneBelow
            }
        }
    }

    /// Placeholder left behind when the last child takes over its parent.
    fn root_stub(&self) -> Node {
        Node {
            x: Vec::new(),
            fixed: Vec::new(),
            neg: Vec::new(),
            pos: Vec::new(),
            open: Vec::new(),
            cost: 0,
            free_neg_cost: 0,
            first_free: 0,
        }
    }

    fn offer(&mut self, cost: i128, x: &[u8]) {
        if self.incumbent.as_ref().is_none_or(|(best, _)| cost < *best) {
            self.incumbent = Some((cost, x.to_vec()));
        }
    }

    fn enqueue(&mut self, r: usize) {
        if !self.queued[r] {
            self.queued[r] = true;
            self.queue.push(r);
        }
    }

    /// Fixes a free variable and queues the rows it appears in.
    fn assign(&mut self, node: &mut Node, b: usize, v: u8) {
        node.x[b] = v;
        let c = self.c.cost[b];
        node.free_neg_cost -= c.min(0);
        if v == 1 {
            node.cost += c;
        }
        let occurs = std::mem::take(&mut self.occurs[b]);
        for &(r, a) in &occurs {
            node.open[r] -= 1;
            if a < 0 {
                node.neg[r] -= a;
            } else {
                node.pos[r] -= a;
            }
            if v == 1 {
                node.fixed[r] += a;
            }
            self.enqueue(r);
        }
        self.work += occurs.len() as u64;
        self.occurs[b] = occurs;
    }

    /// Unit propagation to a fixpoint. Returns false on conflict, leaving the
    /// queue empty either way.
    fn propagate(&mut self, node: &mut Node) -> bool {
        while let Some(r) = self.queue.pop() {
            self.queued[r] = false;
            if !self.tighten(r, node) {
                for q in self.queue.drain(..) {
                    self.queued[q] = false;
                }
                return false;
            }
        }
        true
    }

    fn tighten(&mut self, r: usize, node: &mut Node) -> bool {
        let c = self.c;
        let row = &c.rows[r];
        self.work += 1;
        let conflict = |node: &Node| node.min_act(r) > row.rhs || (row.eq && node.max_act(r) < row.rhs);
        if conflict(node) {
            return false;
        }
        // Nothing can be forced unless the widest free term could overshoot.
        let w = self.widest[r];
        if node.open[r] == 0 || (node.min_act(r) + w <= row.rhs && (!row.eq || node.max_act(r) - w >= row.rhs)) {
            return true;
        }
        self.work += row.terms.len() as u64;
        for &(b, a) in &row.terms {
            if node.x[b] != FREE {
                continue;
            }
            let (min_act, max_act) = (node.min_act(r), node.max_act(r));
            // Forced by the upper side: taking the costly value overshoots.
            let up = if a > 0 { (min_act + a > row.rhs).then_some(0) } else { (min_act - a > row.rhs).then_some(1) };
            // Forced by the lower side of an equality.
            let down = if !row.eq {
                None
            } else if a > 0 {
                (max_act - a < row.rhs).then_some(1)
            } else {
                (max_act + a < row.rhs).then_some(0)
            };
            let v = match (up, down) {
                (Some(u), Some(d)) if u != d => return false,
                (Some(u), _) => u,
                (None, Some(d)) => d,
                (None, None) => continue,
            };
            self.assign(node, b, v);
            if conflict(node) {
                return false;
            }
        }
        true
    }
}

/// `x` with its free positions taken from `sol`.
fn merge(x: &[u8], sol: &[u8]) -> Vec<u8> {
    x.iter().zip(sol).map(|(&v, &s)| if v == FREE { s } else { v }).collect()
}
