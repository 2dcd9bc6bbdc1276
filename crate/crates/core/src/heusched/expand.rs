use std::collections::BTreeMap;

use super::{build_heu_model, solve_heu, Delta, HeuContext, HeuError, LayerPhasePlan, StageRole};
use crate::pipesim::{slot_order, stage_period, Dir, Slot, StageProgram, Step, Task, TensorKey};
use crate::profile::{expand_stage_graph, HardwareProfile, ModelProfile, Part, PipelineConfig};
use crate::rational::Rational;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpandOptions {
    /// Move cool-down on-demand recomputation into the wait before the slot.
    pub stall_recompute: bool,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions { stall_recompute: true }
    }
}

/// Where one recomputation of `(microbatch, layer, op)` runs. Variants are
/// in timeline order for the owning microbatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Place {
    /// Previous microbatch's layer-0 backward window.
    Early {
        window: usize,
    },
    /// Forward window of the forward slot just before this backward.
    Forward {
        window: usize,
    },
    /// Start of the backward slot, hidden in the wait for the next stage.
    Stall,
    /// Backward window of the next-higher layer.
    Backward {
        window: usize,
    },
    OnDemand,
}

/// Lays one layer plan over every layer and microbatch of a stage.
///
/// Phase 1/2 recomputation for backward `m` runs in the forward comm windows
/// of the forward slot right before it; phase 3/4 recomputation of layer `k`
/// runs in the backward comm windows of layer `k + 1`. The first backward
/// layer has no predecessor, so its phase 3/4 work moves to the previous
/// microbatch's last backward layer, within `plan.delta_bytes`. Work without
/// a window (warm-up, cool-down, missing comm operator) runs on demand, and
/// in cool-down on-demand work is moved into the stall before the slot when
/// its inputs are resident and memory allows.
#[allow(clippy::too_many_arguments)]
pub fn expand_plan_to_stage(
    plan: &LayerPhasePlan,
    ctx: &HeuContext,
    model: &ModelProfile,
    hw: &HardwareProfile,
    pipeline: &PipelineConfig,
    stage: usize,
    opts: ExpandOptions,
) -> Result<StageProgram, HeuError> {
    let role = StageRole::of(pipeline, stage);
    if plan.role != role {
        return Err(HeuError::RoleMismatch { plan: plan.role, stage: role });
    }
    let layers = ctx.n_layers as usize;
    let p = pipeline.n_stages as usize;
    let n_mb = pipeline.n_microbatches as usize;
    let t = &model.layer;
    let nf = t.n_forward();
    let sg = expand_stage_graph(model, ctx.n_layers, stage == 0, pipeline.is_last(stage));
    let g = &sg.graph;
    let n = g.len();
    let deps = g.dep_indices();
    let users = g.user_indices();
    let times: Vec<Rational> = g.ops.iter().map(|op| hw.effective_time(op)).collect();

    let mut fwd_pos = vec![vec![0usize; nf]; layers];
    let mut bwd_layer: Vec<Vec<usize>> = vec![Vec::new(); layers];
    let mut forward_part = Vec::new();
    let mut extras = Vec::new();
    for (i, o) in sg.origins.iter().enumerate() {
        match (o.part, o.layer) {
            (Part::Forward, Some(k)) => {
                fwd_pos[k as usize][o.index] = i;
                forward_part.push(i);
            }
            (Part::Backward, Some(k)) => bwd_layer[k as usize].push(i),
            _ => {
                forward_part.push(i);
                extras.push(i);
            }
        }
    }
    let retained = |i: usize| match (sg.origins[i].part, sg.origins[i].layer) {
        (Part::Forward, Some(_)) => plan.keep[sg.origins[i].index],
        (Part::Backward, _) => false,
        _ => true,
    };
    let fwd_window = |k: usize, w: usize| t.fwd_comm_ids.get(w).and_then(|&id| t.index_of(id)).map(|j| fwd_pos[k][j]);
    let bwd_window = |k: usize, w: usize| {
        t.bwd_comm_ids
            .get(w)
            .and_then(|&id| t.index_of(id))
            .and_then(|j| bwd_layer[k].iter().copied().find(|&i| sg.origins[i].index == j))
    };

    let order = slot_order(p, stage, n_mb);
    let mut host_fwd = vec![None; n_mb];
    let mut cool = vec![false; n_mb];
    for q in 0..order.len() {
        if let (m, Dir::Bwd) = order[q] {
            match q.checked_sub(1).map(|prev| order[prev]) {
                // A microbatch cannot host its own recomputation.
                Some((f, Dir::Fwd)) if f != m => host_fwd[m as usize] = Some(f as usize),
                Some((_, Dir::Fwd)) => {}
                Some((_, Dir::Bwd)) => cool[m as usize] = true,
                None => {}
            }
        }
    }

    // Early work for `m` needs its forward pass done before backward `m - 1`.
    let at = |slot: (u32, Dir)| order.iter().position(|&o| o == slot);
    let early_ok: Vec<bool> =
        (0..n_mb).map(|m| m >= 1 && at((m as u32, Dir::Fwd)) < at((m as u32 - 1, Dir::Bwd))).collect();

    let discarded: Vec<usize> = (0..nf).filter(|&j| !plan.keep[j]).collect();
    let template_deps = t.dep_indices();
    let kept_bytes: u64 = (0..nf).filter(|&j| plan.keep[j]).map(|j| t.ops[j].out_bytes).sum();
    // place[m][k][j] for discarded template positions j.
    let mut place: Vec<Vec<BTreeMap<usize, Place>>> = vec![vec![BTreeMap::new(); layers]; n_mb];
    for m in 0..n_mb {
        let mut early_bytes = 0u64;
        for k in (0..layers).rev() {
            for &j in &discarded {
                let ph = plan.phase[j];
                let mut at = match ph {
                    1 | 2 => match host_fwd[m] {
                        Some(_) if fwd_window(k, ph as usize - 1).is_some() => {
                            Place::Forward { window: ph as usize - 1 }
                        }
                        _ => Place::OnDemand,
                    },
                    3 | 4 if k + 1 < layers => match bwd_window(k + 1, ph as usize - 3) {
                        Some(_) => Place::Backward { window: ph as usize - 3 },
                        None => Place::OnDemand,
                    },
                    3 | 4 => {
                        let w = ph as usize - 3;
                        let bytes = t.ops[j].out_bytes;
                        let deps_early = template_deps[j]
                            .iter()
                            .all(|d| plan.keep[*d] || matches!(place[m][k].get(d), Some(Place::Early { .. })));
                        if early_ok[m]
                            && deps_early
                            && bwd_window(0, w).is_some()
                            && early_bytes + bytes <= plan.delta_bytes
                        {
                            early_bytes += bytes;
                            Place::Early { window: w }
                        } else {
                            Place::OnDemand
                        }
                    }
                    _ => Place::OnDemand,
                };
                // An input placed later in the timeline drags this one along.
                if let Some(latest) = template_deps[j].iter().filter_map(|d| place[m][k].get(d)).max() {
                    if *latest > at {
                        at = Place::OnDemand;
                    }
                }
                place[m][k].insert(j, at);
            }
        }
        if opts.stall_recompute && cool[m] {
            let resident = ctx.static_bytes + (n_mb - m) as u64 * layers as u64 * kept_bytes;
            let mut extra = 0u64;
            for k in (0..layers).rev() {
                for &j in &discarded {
                    if place[m][k][&j] != Place::OnDemand {
                        continue;
                    }
                    let ready = template_deps[j].iter().all(|d| {
                        plan.keep[*d] || matches!(place[m][k].get(d), Some(Place::Early { .. } | Place::Stall))
                    });
                    let bytes = t.ops[j].out_bytes;
                    if ready && resident + extra + bytes <= ctx.budget_bytes {
                        extra += bytes;
                        place[m][k].insert(j, Place::Stall);
                    }
                }
            }
        }
    }

    let key = |m: usize, i: usize| TensorKey { microbatch: m as u32, op: i as u32 };
    let recompute = |m: usize, k: usize, j: usize| {
        let i = fwd_pos[k][j];
        Task {
            key: key(m, i),
            bytes: g.ops[i].out_bytes,
            duration: times[i].clone(),
            needs: deps[i].iter().map(|&d| key(m, d)).collect(),
            frees: vec![],
        }
    };
    let hosted = |m: usize, want: Place, k: usize| -> Vec<Task> {
        discarded.iter().filter(|j| place[m][k][*j] == want).map(|&j| recompute(m, k, j)).collect()
    };

    let last_fwd_user = |i: usize| users[i].iter().copied().filter(|u| sg.origins[*u].part != Part::Backward).max();
    let mut slots = Vec::new();
    for &(mb, dir) in &order {
        let m = mb as usize;
        let mut steps = Vec::new();
        match dir {
            Dir::Fwd => {
                // Which backward (if any) this forward hosts.
                let guest = (0..n_mb).find(|&b| host_fwd[b] == Some(m));
                for &i in &forward_part {
                    let mut frees: Vec<TensorKey> = deps[i]
                        .iter()
                        .filter(|&&d| !retained(d) && last_fwd_user(d) == Some(i))
                        .map(|&d| key(m, d))
                        .collect();
                    if !retained(i) && last_fwd_user(i).is_none() {
                        frees.push(key(m, i));
                    }
                    let task = Task {
                        key: key(m, i),
                        bytes: g.ops[i].out_bytes,
                        duration: times[i].clone(),
                        needs: deps[i].iter().map(|&d| key(m, d)).collect(),
                        frees,
                    };
                    if !g.ops[i].is_comm() {
                        steps.push(Step::Compute(task));
                        continue;
                    }
                    let mut guests = Vec::new();
                    if let (Some(b), Some(k)) = (guest, sg.origins[i].layer) {
                        for w in 0..2 {
                            if fwd_window(k as usize, w) == Some(i) {
                                guests = hosted(b, Place::Forward { window: w }, k as usize);
                            }
                        }
                    }
                    steps.push(Step::Comm { task, hosted: guests });
                }
            }
            Dir::Bwd => {
                for k in (0..layers).rev() {
                    for &j in &discarded {
                        if place[m][k][&j] == Place::Stall {
                            steps.push(Step::StallRecompute(recompute(m, k, j)));
                        }
                    }
                }
                for k in (0..layers).rev() {
                    for &j in &discarded {
                        if place[m][k][&j] == Place::OnDemand {
                            steps.push(Step::Recompute(recompute(m, k, j)));
                        }
                    }
                    for &i in &bwd_layer[k] {
                        let last_user = |d: usize| users[d].iter().copied().max();
                        let mut frees: Vec<TensorKey> = deps[i]
                            .iter()
                            .filter(|&&d| sg.origins[d].part == Part::Backward && last_user(d) == Some(i))
                            .map(|&d| key(m, d))
                            .collect();
                        if users[i].is_empty() {
                            frees.push(key(m, i));
                        }
                        let task = Task {
                            key: key(m, i),
                            bytes: g.ops[i].out_bytes,
                            duration: times[i].clone(),
                            needs: deps[i].iter().map(|&d| key(m, d)).collect(),
                            frees,
                        };
                        if !g.ops[i].is_comm() {
                            steps.push(Step::Compute(task));
                            continue;
                        }
                        let mut guests = Vec::new();
                        for w in 0..2 {
                            if bwd_window(k, w) != Some(i) {
                                continue;
                            }
                            if k > 0 {
                                guests = hosted(m, Place::Backward { window: w }, k - 1);
                            }
                            if k == 0 && m + 1 < n_mb {
                                guests = hosted(m + 1, Place::Early { window: w }, layers - 1);
                            }
                        }
                        steps.push(Step::Comm { task, hosted: guests });
                    }
                    steps.push(Step::Free(fwd_pos[k].iter().map(|&i| key(m, i)).collect()));
                }
                if !extras.is_empty() {
                    steps.push(Step::Free(extras.iter().map(|&i| key(m, i)).collect()));
                }
            }
        }
        slots.push(Slot { microbatch: mb, dir, steps });
    }
    debug_assert_eq!(n, forward_part.len() + bwd_layer.iter().map(Vec::len).sum::<usize>());
    Ok(StageProgram { stage, static_bytes: model.static_bytes * layers as u64, slots })
}

/// A stage's chosen plan with its program and isolated steady-state period.
#[derive(Clone, Debug)]
pub struct PlannedStage {
    pub plan: LayerPhasePlan,
    pub ctx: HeuContext,
    pub program: StageProgram,
    pub period_us: Rational,
}

/// Solves the stage twice, reserving everything the plan discards for the
/// first backward layer and reserving nothing, and keeps the plan with the
/// shorter simulated period (no reserve on a tie).
#[allow(clippy::too_many_arguments)]
pub fn plan_stage(
    model: &ModelProfile,
    hw: &HardwareProfile,
    pipeline: &PipelineConfig,
    stage: usize,
    layers: u32,
    time_limit_ms: u64,
    opts: ExpandOptions,
) -> Result<PlannedStage, HeuError> {
    let attempt = |delta| -> Result<PlannedStage, HeuError> {
        let ctx = HeuContext::for_stage(model, hw, pipeline, stage, layers, delta);
        let inst = build_heu_model(&model.layer, hw, &ctx)?;
        let plan = solve_heu(&inst, time_limit_ms)?;
        let program = expand_plan_to_stage(&plan, &ctx, model, hw, pipeline, stage, opts)?;
        let period_us = stage_period(&program)?;
        Ok(PlannedStage { plan, ctx, program, period_us })
    };
    let none = attempt(Delta::Fixed(0));
    let all = attempt(Delta::AllDiscarded);
    match (none, all) {
        (Ok(a), Ok(b)) => Ok(if b.period_us < a.period_us { b } else { a }),
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), Ok(b)) => Ok(b),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Baseline program: only layer outputs are kept and every other tensor is
/// recomputed on the critical path.
pub fn full_recompute_stage(
    model: &ModelProfile,
    hw: &HardwareProfile,
    pipeline: &PipelineConfig,
    stage: usize,
    layers: u32,
) -> Result<StageProgram, HeuError> {
    let ctx = HeuContext::for_stage(model, hw, pipeline, stage, layers, Delta::Fixed(0));
    let plan = LayerPhasePlan::full_recompute(&model.layer, hw, &ctx);
    expand_plan_to_stage(&plan, &ctx, model, hw, pipeline, stage, ExpandOptions { stall_recompute: false })
}
