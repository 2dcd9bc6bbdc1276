//! Recomputation-aware layer-to-stage assignment.
//!
//! Starts from a near-even split that fits every stage and repeatedly moves
//! one layer off the stage with the longest steady-state period onto the
//! shortest stage that accepts it without running out of memory.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;

use crate::heusched::{plan_stage, Delta, ExpandOptions, HeuContext, HeuError, LayerPhasePlan, StageRole};
use crate::optsched::{
    build_opt_model, schedule_to_program, solve_opt, stage_phase_graph, OptError, RecomputationSchedule,
};
use crate::pipesim::{slot_order, stage_period, Dir, SimError, StageProgram};
use crate::profile::{expand_stage_graph, HardwareProfile, ModelProfile, PipelineConfig};
use crate::rational::{Fixed3, Rational};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Opt,
    Heu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionOptions {
    pub mode: Mode,
    pub time_limit_ms: u64,
    /// Worker threads for candidate evaluation; 1 runs inline.
    pub jobs: usize,
    /// Evaluate every target stage and take the best move instead of the
    /// first improving one.
    pub full_scan: bool,
    pub expand: ExpandOptions,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        PartitionOptions {
            mode: Mode::Heu,
            time_limit_ms: 10_000,
            jobs: 1,
            full_scan: false,
            expand: ExpandOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("no valid partition: {0}")]
    NoValidPartition(String),
    #[error(transparent)]
    Heu(#[from] HeuError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug)]
pub enum StageSchedule {
    Heu(LayerPhasePlan),
    Opt(RecomputationSchedule),
}

/// One stage's schedule, its simulator program and isolated period.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub layers: u32,
    pub schedule: StageSchedule,
    pub program: StageProgram,
    pub period_us: Rational,
}

/// True when the stage cannot fit even when everything but the checkpoint
/// of each layer is recomputed.
pub fn check_oom(
    model: &ModelProfile,
    stage_layers: u32,
    stage: usize,
    pipeline: &PipelineConfig,
    hw: &HardwareProfile,
) -> bool {
    min_peak_bytes(model, stage_layers, stage, pipeline, hw) > hw.mem_budget_bytes
}

fn min_peak_bytes(
    model: &ModelProfile,
    stage_layers: u32,
    stage: usize,
    pipeline: &PipelineConfig,
    hw: &HardwareProfile,
) -> u64 {
    let ctx = HeuContext::for_stage(model, hw, pipeline, stage, stage_layers, Delta::Fixed(0));
    let ckpt = model.layer.forward_ops().last().map_or(0, |op| op.out_bytes);
    ctx.static_bytes + stage_layers as u64 * ctx.n_batch as u64 * ckpt
}

/// Near-even split with the remainder on the later stages. A stage that
/// does not fit hands layers, one at a time, to the later stage with the
/// most headroom.
pub fn initial_partition(
    model: &ModelProfile,
    pipeline: &PipelineConfig,
    hw: &HardwareProfile,
) -> Result<Vec<u32>, PartitionError> {
    let p = pipeline.n_stages as usize;
    let n = model.n_layers;
    if p == 0 || (n as usize) < p {
        return Err(PartitionError::NoValidPartition(format!("{n} layers cannot fill {p} stages")));
    }
    let base = n / p as u32;
    let extra = n as usize % p;
    let mut layers: Vec<u32> = (0..p).map(|s| base + u32::from(s >= p - extra)).collect();
    let oom = |layers: &[u32], s: usize| check_oom(model, layers[s], s, pipeline, hw);
    // Each hand-off moves a layer strictly later, so this terminates.
    while let Some(s) = (0..p).find(|&s| oom(&layers, s)) {
        let target = (s + 1..p)
            .filter(|&t| !check_oom(model, layers[t] + 1, t, pipeline, hw))
            .min_by_key(|&t| min_peak_bytes(model, layers[t] + 1, t, pipeline, hw));
        match target {
            Some(t) if layers[s] > 1 => {
                layers[s] -= 1;
                layers[t] += 1;
            }
            _ => {
                return Err(PartitionError::NoValidPartition(format!(
                    "stage {s} needs {} B with {} layer(s) under full recomputation, budget is {} B",
                    min_peak_bytes(model, layers[s], s, pipeline, hw),
                    layers[s],
                    hw.mem_budget_bytes
                )))
            }
        }
    }
    Ok(layers)
}

/// Subproblems that produce the same schedule: layer count, role, whether
/// the stage holds the embedding, in-flight forwards and warm-up length.
type MemoKey = (u32, StageRole, bool, usize, usize);

/// Plans stages and caches the results across partitions.
pub struct Planner<'a> {
    pub model: &'a ModelProfile,
    pub hw: &'a HardwareProfile,
    pub pipeline: &'a PipelineConfig,
    pub opts: PartitionOptions,
    memo: Mutex<BTreeMap<MemoKey, Arc<StagePlan>>>,
    pool: rayon::ThreadPool,
}

impl<'a> Planner<'a> {
    pub fn new(
        model: &'a ModelProfile,
        hw: &'a HardwareProfile,
        pipeline: &'a PipelineConfig,
        opts: PartitionOptions,
    ) -> Self {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build().expect("thread pool");
        Planner { model, hw, pipeline, opts, memo: Mutex::new(BTreeMap::new()), pool }
    }

    fn key(&self, stage: usize, layers: u32) -> MemoKey {
        let p = self.pipeline.n_stages as usize;
        let m = self.pipeline.n_microbatches as usize;
        let warmup = slot_order(p, stage, m).iter().take_while(|(_, d)| *d == Dir::Fwd).count();
        (layers, StageRole::of(self.pipeline, stage), stage == 0, self.pipeline.n_batch(stage), warmup)
    }

    /// Schedule and program of `stage` holding `layers` layers.
    pub fn plan(&self, stage: usize, layers: u32) -> Result<StagePlan, PartitionError> {
        let key = self.key(stage, layers);
        let cached = self.memo.lock().expect("memo lock").get(&key).cloned();
        let plan = match cached {
            Some(plan) => plan,
            None => {
                let plan = Arc::new(self.solve(stage, layers)?);
                self.memo.lock().expect("memo lock").insert(key, plan.clone());
                plan
            }
        };
        let mut plan = (*plan).clone();
        plan.program.stage = stage;
        if let StageSchedule::Opt(s) = &mut plan.schedule {
            s.stage = stage;
        }
        Ok(plan)
    }

    fn solve(&self, stage: usize, layers: u32) -> Result<StagePlan, PartitionError> {
        log::debug!("planning stage {stage} with {layers} layer(s), {:?}", self.opts.mode);
        match self.opts.mode {
            Mode::Heu => {
                let planned = plan_stage(
                    self.model,
                    self.hw,
                    self.pipeline,
                    stage,
                    layers,
                    self.opts.time_limit_ms,
                    self.opts.expand,
                )?;
                Ok(StagePlan {
                    layers,
                    schedule: StageSchedule::Heu(planned.plan),
                    program: planned.program,
                    period_us: planned.period_us,
                })
            }
            Mode::Opt => {
                let first = stage == 0;
                let last = self.pipeline.is_last(stage);
                let sg = expand_stage_graph(self.model, layers, first, last);
                let p = self.pipeline.n_stages as usize;
                let phase = stage_phase_graph(&sg, p, stage, self.pipeline.n_microbatches as usize);
                let inst = build_opt_model(&phase.graph, self.hw, self.model.static_bytes * layers as u64)?;
                let sched = solve_opt(&inst, self.opts.time_limit_ms, stage)?;
                let program = schedule_to_program(&sched, &phase, &inst.problem, stage);
                let period_us = stage_period(&program)?;
                Ok(StagePlan { layers, schedule: StageSchedule::Opt(sched), program, period_us })
            }
        }
    }

    /// Plans of every stage of a split.
    pub fn plan_all(&self, layers: &[u32]) -> Result<Vec<StagePlan>, PartitionError> {
        self.run(|| layers.par_iter().enumerate().map(|(s, &l)| self.plan(s, l)).collect())
    }

    /// Steady-state period of every stage.
    pub fn stage_durations(&self, layers: &[u32]) -> Result<Vec<Rational>, PartitionError> {
        Ok(self.plan_all(layers)?.into_iter().map(|p| p.period_us).collect())
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        self.pool.install(f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Move {
    pub from: usize,
    pub to: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct PartitionResult {
    pub layers_per_stage: Vec<u32>,
    pub durations_us: Vec<Rational>,
    pub mode: Mode,
    /// Outer iterations, the last (non-improving) one included.
    pub iterations: usize,
    pub moves: Vec<Move>,
    /// Best stage maximum after each accepted move, starting with the
    /// initial split.
    pub history: Vec<Rational>,
}

impl PartitionResult {
    pub fn max_duration(&self) -> &Rational {
        self.durations_us.iter().max().expect("at least one stage")
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            layers_per_stage: &'a [u32],
            durations_us: Vec<Fixed3>,
            mode: Mode,
            iterations: usize,
            moves: &'a [Move],
        }
        serde_json::to_string_pretty(&Doc {
            layers_per_stage: &self.layers_per_stage,
            durations_us: self.durations_us.iter().cloned().map(Fixed3).collect(),
            mode: self.mode,
            iterations: self.iterations,
            moves: &self.moves,
        })
        .expect("partition serializes")
    }
}

fn longest(d: &[Rational]) -> usize {
    // First index among the maxima.
    (0..d.len()).fold(0, |best, s| if d[s] > d[best] { s } else { best })
}

/// Greedy search: take the longest stage, try moving one of its layers to
/// the shortest other stage, then the second shortest and so on, and
/// restart from the first move that fits in memory and strictly lowers the
/// longest period. Stops when no move is accepted.
pub fn search_partition(
    model: &ModelProfile,
    pipeline: &PipelineConfig,
    hw: &HardwareProfile,
    opts: &PartitionOptions,
) -> Result<PartitionResult, PartitionError> {
    let planner = Planner::new(model, hw, pipeline, opts.clone());
    search_with(&planner)
}

pub fn search_with(planner: &Planner) -> Result<PartitionResult, PartitionError> {
    let (model, pipeline, hw) = (planner.model, planner.pipeline, planner.hw);
    let p = pipeline.n_stages as usize;
    let mut best = initial_partition(model, pipeline, hw)?;
    let mut durations = planner.stage_durations(&best)?;
    let mut history = vec![durations[longest(&durations)].clone()];
    let mut moves = Vec::new();
    let mut iterations = 0;
    let cap = model.n_layers as usize * p + 1;
    loop {
        iterations += 1;
        let from = longest(&durations);
        let current = durations[from].clone();
        let mut targets: Vec<usize> = (0..p).filter(|&s| s != from).collect();
        targets.sort_by(|&a, &b| durations[a].cmp(&durations[b]).then(a.cmp(&b)));
        if best[from] <= 1 {
            targets.clear();
        }
        let candidates: Vec<Vec<u32>> = targets
            .iter()
            .map(|&to| {
                let mut next = best.clone();
                next[from] -= 1;
                next[to] += 1;
                next
            })
            .collect();
        let evaluate = |next: &Vec<u32>| -> Result<Option<Vec<Rational>>, PartitionError> {
            if (0..p).any(|s| check_oom(model, next[s], s, pipeline, hw)) {
                return Ok(None);
            }
            planner.stage_durations(next).map(Some)
        };
        let results: Vec<Result<Option<Vec<Rational>>, PartitionError>> =
            planner.run(|| candidates.par_iter().map(evaluate).collect());

        let mut chosen: Option<(usize, Vec<Rational>)> = None;
        for (k, r) in results.into_iter().enumerate() {
            let improved = match r? {
                Some(d) if d[longest(&d)] < current => Some(d),
                _ => None,
            };
            let better = match (&improved, &chosen) {
                (Some(d), Some((_, c))) => d[longest(d)] < c[longest(c)],
                (Some(_), None) => true,
                _ => false,
            };
            if !planner.opts.full_scan {
                moves.push(Move { from, to: targets[k], accepted: improved.is_some() });
                if let Some(d) = improved {
                    chosen = Some((k, d));
                    break;
                }
            } else if better {
                chosen = Some((k, improved.expect("improving")));
            }
        }
        if planner.opts.full_scan {
            for (k, &to) in targets.iter().enumerate() {
                moves.push(Move { from, to, accepted: chosen.as_ref().is_some_and(|(c, _)| *c == k) });
            }
        }
        let Some((k, d)) = chosen else { break };
        log::info!("moved a layer from stage {from} to stage {}", targets[k]);
        best = candidates[k].clone();
        durations = d;
        history.push(durations[longest(&durations)].clone());
        if iterations >= cap {
            break;
        }
    }
    Ok(PartitionResult {
        layers_per_stage: best,
        durations_us: durations,
        mode: planner.opts.mode,
        iterations,
        moves,
        history,
    })
}

/// Every split of `n_layers` into `n_stages` positive parts, in
/// lexicographic order.
pub fn compositions(n_layers: u32, n_stages: usize) -> Vec<Vec<u32>> {
    fn go(left: u32, parts: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 1..=left.saturating_sub(parts as u32 - 1) {
            cur.push(first);
            go(left - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n_stages >= 1 && n_layers as usize >= n_stages {
        go(n_layers, n_stages, &mut Vec::new(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests;
