use serde::Serialize;

use super::{ModelProfile, OpId, OperatorGraph, OperatorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Embed,
    Forward,
    Head,
    Backward,
}

/// Where an expanded operator came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OpOrigin {
    pub part: Part,
    /// Stage-local layer index, `None` for embedding/head operators.
    pub layer: Option<u32>,
    /// Position in the template (or in the embed/head list).
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageGraph {
    pub graph: OperatorGraph,
    pub origins: Vec<OpOrigin>,
}

/// Expands `stage_layers` copies of the layer template into one stage's
/// operator graph.
///
/// Order: embedding ops (first stage only), every layer's forward part,
/// head ops (last stage only), then the backward parts from the last layer
/// down to the first. Operator ids in the result are positions.
///
/// # Panics
/// If `stage_layers` is zero.
pub fn expand_stage_graph(model: &ModelProfile, stage_layers: u32, first: bool, last: bool) -> StageGraph {
    assert!(stage_layers >= 1, "a stage holds at least one layer");
    let t = &model.layer;
    let nf = t.n_forward();
    let tlen = t.ops.len();
    let tdeps = t.dep_indices();
    let l = stage_layers as usize;
    let embed: &[OperatorSpec] = if first { &model.embed_ops } else { &[] };
    let head: &[OperatorSpec] = if last { &model.head_ops } else { &[] };

    let fwd_pos = |k: usize, j: usize| embed.len() + k * nf + j;
    let head_base = embed.len() + l * nf;
    let bwd_base = head_base + head.len();
    let nb = tlen - nf;
    let bwd_pos = |k: usize, j: usize| bwd_base + (l - 1 - k) * nb + (j - nf);
    let tpos = |k: usize, j: usize| if j < nf { fwd_pos(k, j) } else { bwd_pos(k, j) };

    let mut ops = Vec::with_capacity(embed.len() + head.len() + l * tlen);
    let mut origins = Vec::with_capacity(ops.capacity());

    let push_extra = |ops: &mut Vec<OperatorSpec>,
                      origins: &mut Vec<OpOrigin>,
                      list: &[OperatorSpec],
                      part: Part,
                      base: usize,
                      entry: Option<usize>| {
        for (j, op) in list.iter().enumerate() {
            let mut deps: Vec<OpId> = Vec::new();
            if j == 0 {
                deps.extend(entry.map(|p| p as OpId));
            }
            for d in &op.deps {
                if let Some(pos) = list.iter().position(|o| o.id == *d) {
                    deps.push((base + pos) as OpId);
                }
            }
            dedup(&mut deps);
            ops.push(OperatorSpec {
                id: (base + j) as OpId,
                name: op.name.clone(),
                kind: op.kind,
                time_us: op.time_us.clone(),
                out_bytes: op.out_bytes,
                deps,
                schedulable: Some(op.schedulable.unwrap_or(false)),
            });
            origins.push(OpOrigin { part, layer: None, index: j });
        }
    };

    push_extra(&mut ops, &mut origins, embed, Part::Embed, 0, None);

    let layer_op = |k: usize, j: usize, extra: Option<usize>| {
        let op = &t.ops[j];
        let mut deps: Vec<OpId> = extra.map(|p| p as OpId).into_iter().collect();
        deps.extend(tdeps[j].iter().map(|&d| tpos(k, d) as OpId));
        dedup(&mut deps);
        OperatorSpec {
            id: tpos(k, j) as OpId,
            name: format!("L{k}.{}", op.name),
            kind: op.kind,
            time_us: op.time_us.clone(),
            out_bytes: op.out_bytes,
            deps,
            schedulable: None,
        }
    };

    let ckpt = t.checkpoint_index();
    for k in 0..l {
        for j in 0..nf {
            let extra = match (j, k) {
                (0, 0) if !embed.is_empty() => Some(embed.len() - 1),
                (0, k) if k > 0 => Some(fwd_pos(k - 1, ckpt)),
                _ => None,
            };
            ops.push(layer_op(k, j, extra));
            origins.push(OpOrigin { part: Part::Forward, layer: Some(k as u32), index: j });
        }
    }

    push_extra(&mut ops, &mut origins, head, Part::Head, head_base, Some(fwd_pos(l - 1, ckpt)));

    for k in (0..l).rev() {
        for j in nf..tlen {
            let extra = if j != nf {
                None
            } else if k + 1 < l {
                Some(bwd_pos(k + 1, tlen - 1))
            } else if !head.is_empty() {
                Some(bwd_base - 1)
            } else {
                None
            };
            ops.push(layer_op(k, j, extra));
            origins.push(OpOrigin { part: Part::Backward, layer: Some(k as u32), index: j });
        }
    }

    StageGraph { graph: OperatorGraph::new(ops), origins }
}

/// Layers-only expansion: `stage_layers` template copies, no embedding or
/// head operators.
pub fn expand_graph(model: &ModelProfile, stage_layers: u32) -> OperatorGraph {
    let bare = ModelProfile { embed_ops: Vec::new(), head_ops: Vec::new(), ..model.clone() };
    expand_stage_graph(&bare, stage_layers, false, false).graph
}

fn dedup(v: &mut Vec<OpId>) {
    let mut seen = Vec::with_capacity(v.len());
    v.retain(|x| {
        if seen.contains(x) {
            false
        } else {
            seen.push(*x);
            true
        }
    });
}
