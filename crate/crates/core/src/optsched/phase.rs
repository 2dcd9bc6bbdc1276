use std::ops::Range;

use crate::pipesim::{slot_order, Dir};
use crate::profile::{OpId, OperatorGraph, OperatorSpec, Part, StageGraph};

/// A stage's operator instances over all microbatches in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseGraph {
    pub graph: OperatorGraph,
    /// `(microbatch, stage-graph position)` per phase.
    pub instances: Vec<(u32, u32)>,
    /// Phases of each 1F1B slot, in order.
    pub slots: Vec<(u32, Dir, Range<usize>)>,
}

/// Lays out every microbatch's forward and backward operators following
/// the stage's 1F1B slot order. Dependencies stay within a microbatch.
pub fn stage_phase_graph(sg: &StageGraph, n_stages: usize, stage: usize, n_microbatches: usize) -> PhaseGraph {
    let n = sg.graph.len();
    let fwd: Vec<usize> = (0..n).filter(|&i| sg.origins[i].part != Part::Backward).collect();
    let bwd: Vec<usize> = (0..n).filter(|&i| sg.origins[i].part == Part::Backward).collect();
    let deps = sg.graph.dep_indices();

    let mut pos = vec![vec![usize::MAX; n]; n_microbatches];
    let mut ops = Vec::new();
    let mut instances = Vec::new();
    let mut slots = Vec::new();
    for (mb, dir) in slot_order(n_stages, stage, n_microbatches) {
        let start = ops.len();
        let members = if dir == Dir::Fwd { &fwd } else { &bwd };
        for &i in members {
            let id = ops.len();
            pos[mb as usize][i] = id;
            let src = &sg.graph.ops[i];
            ops.push(OperatorSpec {
                id: id as OpId,
                name: format!("mb{mb}.{}", src.name),
                deps: deps[i].iter().map(|&d| pos[mb as usize][d] as OpId).collect(),
                ..src.clone()
            });
            instances.push((mb, i as u32));
        }
        slots.push((mb, dir, start..ops.len()));
    }
    PhaseGraph { graph: OperatorGraph::new(ops), instances, slots }
}

impl PhaseGraph {
    /// Treats a bare graph as one microbatch run in a single slot.
    pub fn single(graph: &OperatorGraph) -> PhaseGraph {
        PhaseGraph {
            graph: graph.clone(),
            instances: (0..graph.len()).map(|i| (0, i as u32)).collect(),
            slots: vec![(0, Dir::Fwd, 0..graph.len())],
        }
    }
}
