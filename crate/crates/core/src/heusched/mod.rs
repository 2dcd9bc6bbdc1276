//! Per-layer five-phase recomputation program.
//!
//! All layers of a stage share one plan. Each forward operator of the layer
//! template is either retained (`S_i`) or recomputed once in one of five
//! phases: the two forward comm windows of a later forward pass (1, 2), the
//! two backward comm windows (3, 4), or on demand on the critical path (5).

mod expand;
mod model;

use serde::Serialize;

use crate::profile::{HardwareProfile, LayerTemplate, ModelProfile, PipelineConfig};
use crate::rational::{Fixed3, Rational};

pub use expand::{expand_plan_to_stage, full_recompute_stage, plan_stage, ExpandOptions, PlannedStage};
pub use model::{build_heu_model, check_plan, plan_peak_bytes, solve_heu, HeuInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageRole {
    Interior,
    Last,
}

impl StageRole {
    pub fn of(pipeline: &PipelineConfig, stage: usize) -> StageRole {
        if pipeline.is_last(stage) {
            StageRole::Last
        } else {
            StageRole::Interior
        }
    }

    /// Phases an operator may be placed in.
    pub fn phases(self) -> &'static [u8] {
        match self {
            StageRole::Interior => &[1, 2, 3, 4, 5],
            StageRole::Last => &[3, 4, 5],
        }
    }
}

/// Memory reserved for recomputing the first backward layer early.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delta {
    Fixed(u64),
    /// Everything the plan discards: `Σ (1 - S_i) M_i`.
    AllDiscarded,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeuContext {
    pub n_layers: u32,
    pub n_batch: u32,
    /// Capacities of phases 1 to 4.
    pub ctime_us: [Rational; 4],
    pub static_bytes: u64,
    pub budget_bytes: u64,
    pub delta: Delta,
    pub role: StageRole,
}

impl HeuContext {
    /// Context of one stage holding `layers` layers. Window capacities are
    /// the scaled durations of the template's comm operators; a missing
    /// window has capacity 0. Embedding and head outputs of every in-flight
    /// microbatch count as static memory.
    pub fn for_stage(
        model: &ModelProfile,
        hw: &HardwareProfile,
        pipeline: &PipelineConfig,
        stage: usize,
        layers: u32,
        delta: Delta,
    ) -> HeuContext {
        let n_batch = pipeline.n_batch(stage) as u32;
        HeuContext {
            n_layers: layers,
            n_batch,
            ctime_us: window_times(&model.layer, hw),
            static_bytes: stage_static_bytes(model, pipeline, stage, layers),
            budget_bytes: hw.mem_budget_bytes,
            delta,
            role: StageRole::of(pipeline, stage),
        }
    }

    pub fn delta_bytes(&self, layer: &LayerTemplate, keep: &[bool]) -> u64 {
        match self.delta {
            Delta::Fixed(b) => b,
            Delta::AllDiscarded => {
                layer.forward_ops().iter().zip(keep).filter(|(_, &s)| !s).map(|(op, _)| op.out_bytes).sum()
            }
        }
    }
}

pub fn window_times(layer: &LayerTemplate, hw: &HardwareProfile) -> [Rational; 4] {
    let time = |ids: &[u32], k: usize| {
        ids.get(k)
            .and_then(|&id| layer.index_of(id))
            .map_or_else(Rational::default, |i| hw.effective_time(&layer.ops[i]))
    };
    [
        time(&layer.fwd_comm_ids, 0),
        time(&layer.fwd_comm_ids, 1),
        time(&layer.bwd_comm_ids, 0),
        time(&layer.bwd_comm_ids, 1),
    ]
}

/// Model state of the stage's layers plus the embedding/head outputs of
/// every in-flight microbatch.
pub fn stage_static_bytes(model: &ModelProfile, pipeline: &PipelineConfig, stage: usize, layers: u32) -> u64 {
    let mut extra = 0;
    if stage == 0 {
        extra += model.embed_ops.iter().map(|op| op.out_bytes).sum::<u64>();
    }
    if pipeline.is_last(stage) {
        extra += model.head_ops.iter().map(|op| op.out_bytes).sum::<u64>();
    }
    model.static_bytes * layers as u64 + pipeline.n_batch(stage) as u64 * extra
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HeuError {
    #[error("even retaining only the checkpoint needs {needed_bytes} B of a {budget_bytes} B budget")]
    BudgetInfeasible { needed_bytes: u64, budget_bytes: u64 },
    #[error("bad window configuration: {0}")]
    WindowConfigError(String),
    #[error("plan built for a {plan:?} stage used on a {stage:?} stage")]
    RoleMismatch { plan: StageRole, stage: StageRole },
    #[error("search budget exhausted before any plan was found")]
    TimedOut,
    #[error(transparent)]
    Ilp(#[from] crate::ilp::IlpError),
    #[error("solver plan failed re-verification: {0:?}")]
    CheckFailed(Vec<String>),
    #[error(transparent)]
    Sim(#[from] crate::pipesim::SimError),
}

/// One layer's plan, indexed by forward-operator position in the template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPhasePlan {
    pub role: StageRole,
    pub keep: Vec<bool>,
    /// Phase 1..=5 per operator.
    pub phase: Vec<u8>,
    /// Recomputation time left on the critical path.
    pub objective_us: Rational,
    pub peak_bytes: u64,
    pub delta_bytes: u64,
    pub optimal: bool,
}

impl LayerPhasePlan {
    /// Checkpoint-only plan that recomputes everything on demand.
    pub fn full_recompute(layer: &LayerTemplate, hw: &HardwareProfile, ctx: &HeuContext) -> LayerPhasePlan {
        let n = layer.n_forward();
        let mut keep = vec![false; n];
        keep[n - 1] = true;
        let mut plan = LayerPhasePlan {
            role: ctx.role,
            phase: vec![5; n],
            objective_us: layer.forward_ops()[..n - 1].iter().map(|op| hw.effective_time(op)).sum(),
            peak_bytes: 0,
            delta_bytes: 0,
            keep,
            optimal: false,
        };
        plan.delta_bytes = ctx.delta_bytes(layer, &plan.keep);
        plan.peak_bytes = plan_peak_bytes(&plan, ctx, layer);
        plan
    }

    pub fn to_json(&self, layer: &LayerTemplate, stage: usize) -> String {
        #[derive(Serialize)]
        struct Doc {
            stage: usize,
            role: StageRole,
            status: &'static str,
            #[serde(rename = "S")]
            s: Vec<u32>,
            phase_assignment: std::collections::BTreeMap<u32, u8>,
            objective_us: Fixed3,
            peak_bytes: u64,
            delta_bytes: u64,
        }
        let ops = layer.forward_ops();
        let doc = Doc {
            stage,
            role: self.role,
            status: if self.optimal { "optimal" } else { "feasible" },
            s: ops.iter().zip(&self.keep).filter(|(_, &k)| k).map(|(op, _)| op.id).collect(),
            phase_assignment: ops.iter().zip(&self.phase).map(|(op, &p)| (op.id, p)).collect(),
            objective_us: Fixed3(self.objective_us.clone()),
            peak_bytes: self.peak_bytes,
            delta_bytes: self.delta_bytes,
        };
        serde_json::to_string_pretty(&doc).expect("plan serializes")
    }
}
