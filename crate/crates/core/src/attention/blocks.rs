use std::rc::Rc;

use super::feast::{FeastVars, Neighbors};
use super::fps::fps;
use super::pca::{pca_1d, sort_order};
use super::{AttentionConfig, PillarBatch, Stage, GRAPH_LAYERS, PREFIX};
use crate::nn::{Ctx, LstmVars, Tensor, Var};
use crate::Result;

/// Multiplies every row by the weight of its pillar.
fn apply(ctx: &mut Ctx, rows: Var, weights: Var, batch: &PillarBatch) -> Result<Var> {
    let w = ctx.tape.index_rows(weights, batch.pillar_of_row.clone())?;
    ctx.tape.scale_rows(rows, w)
}

fn lstm_vars(ctx: &mut Ctx, dir: &str) -> Result<LstmVars> {
    Ok(LstmVars {
        w_ih: ctx.param(&format!("{PREFIX}.lstm.{dir}.w_ih"))?,
        w_hh: ctx.param(&format!("{PREFIX}.lstm.{dir}.w_hh"))?,
        b: ctx.param(&format!("{PREFIX}.lstm.{dir}.b"))?,
    })
}

/// Per-pillar weights `(P, 1)` from a bidirectional LSTM run over the
/// pillars sorted by their PCA score. Also returns the sort order.
pub fn dr_lstm_attention(ctx: &mut Ctx, pooled: Var, positions: &[[f64; 2]]) -> Result<(Var, Vec<usize>)> {
    let order = sort_order(&pca_1d(positions));
    let mut inverse = vec![0; order.len()];
    for (t, &p) in order.iter().enumerate() {
        inverse[p] = t;
    }
    let seq = ctx.tape.index_rows(pooled, Rc::new(order.clone()))?;
    let (fwd, bwd) = (lstm_vars(ctx, "fwd")?, lstm_vars(ctx, "bwd")?);
    let h = ctx.tape.bilstm(seq, fwd, bwd)?;
    let s = ctx.affine(h, &format!("{PREFIX}.lstm.head"))?;
    let w = ctx.tape.sigmoid(s);
    Ok((ctx.tape.index_rows(w, Rc::new(inverse))?, order))
}

/// Per-pillar weights `(P, 1)` from FeaSt layers in which every node
/// aggregates from the farthest-point key set. Also returns the keys.
pub fn graph_attention(ctx: &mut Ctx, pooled: Var, cfg: &AttentionConfig) -> Result<(Var, Vec<usize>)> {
    let v = ctx.tape.value(pooled);
    let keys = fps(v.data(), v.dim(1), cfg.fps_rate);
    ctx.tape.mark_branches(keys.iter().copied());
    let nbrs = Rc::new(Neighbors::Shared(keys.clone()));
    let mut h = pooled;
    for l in 0..GRAPH_LAYERS {
        let name = format!("{PREFIX}.graph.l{l}");
        let p = FeastVars {
            w: ctx.param(&format!("{name}.w"))?,
            u: ctx.param(&format!("{name}.u"))?,
            c: ctx.param(&format!("{name}.c"))?,
            b: ctx.param(&format!("{name}.b"))?,
        };
        h = ctx.tape.feast_conv(h, nbrs.clone(), p)?;
        if l + 1 < GRAPH_LAYERS {
            h = ctx.tape.relu(h);
        }
    }
    let s = ctx.affine(h, &format!("{PREFIX}.graph.head"))?;
    Ok((ctx.tape.sigmoid(s), keys))
}

/// Per-pillar weights `(P, 1)`: rows joined with their pillar center are
/// reduced to one value per point, then a per-slot linear map reduces the
/// points of each pillar. Parameters live under `prefix.point` and
/// `prefix.slot`.
pub fn pillar_attention(ctx: &mut Ctx, rows: Var, batch: &PillarBatch, prefix: &str) -> Result<Var> {
    let centers = ctx.tape.constant(batch.centers.clone());
    let centers = ctx.tape.index_rows(centers, batch.pillar_of_row.clone())?;
    let x = ctx.tape.concat_last(&[rows, centers])?;
    let a = ctx.affine(x, &format!("{prefix}.point"))?;
    let a = ctx.tape.relu(a);
    let slot_w = ctx.param(&format!("{prefix}.slot.w"))?;
    let slot_w = ctx.tape.index_rows(slot_w, batch.slot_of_row.clone())?;
    let t = ctx.tape.mul(a, slot_w)?;
    let s = ctx.tape.segment_sum(t, batch.offsets.clone())?;
    let one = ctx.tape.constant(Tensor::full(&[1, 1], 1.0));
    let b = ctx.param(&format!("{prefix}.slot.b"))?;
    let s = ctx.tape.affine(s, one, b)?;
    Ok(ctx.tape.sigmoid(s))
}

/// Result of [`ma_fuse`]: re-weighted rows and each block's `(P, 1)` weights.
#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub rows: Var,
    pub lstm: Option<Var>,
    pub graph: Option<Var>,
    pub pillar: Option<Var>,
    pub keys: Vec<usize>,
}

/// Applies the three attention blocks to the valid point rows `(R, C)`
/// in `cfg.order`. The pillar block sees the current rows joined with
/// the LSTM-weighted rows (the current rows when the LSTM block has not
/// run yet) after two affine + ReLU layers.
pub fn ma_fuse(ctx: &mut Ctx, rows: Var, batch: &PillarBatch, cfg: &AttentionConfig) -> Result<FuseOutput> {
    let mut out = FuseOutput {
        rows,
        lstm: None,
        graph: None,
        pillar: None,
        keys: Vec::new(),
    };
    if batch.pillars() == 0 {
        return Ok(out);
    }
    let mut lstm_rows = None;
    for stage in cfg.order {
        let cur = out.rows;
        match stage {
            Stage::Lstm => {
                let pooled = ctx.tape.segment_max(cur, batch.offsets.clone())?;
                let (w, _) = dr_lstm_attention(ctx, pooled, &batch.positions)?;
                out.rows = apply(ctx, cur, w, batch)?;
                out.lstm = Some(w);
                lstm_rows = Some(out.rows);
            }
            Stage::Graph => {
                let pooled = ctx.tape.segment_max(cur, batch.offsets.clone())?;
                let (w, keys) = graph_attention(ctx, pooled, cfg)?;
                out.rows = apply(ctx, cur, w, batch)?;
                out.graph = Some(w);
                out.keys = keys;
            }
            Stage::Pillar => {
                let side = lstm_rows.unwrap_or(cur);
                let z = ctx.tape.concat_last(&[cur, side])?;
                let z = ctx.affine(z, &format!("{PREFIX}.pillar.fc0"))?;
                let z = ctx.tape.relu(z);
                let z = ctx.affine(z, &format!("{PREFIX}.pillar.fc1"))?;
                let z = ctx.tape.relu(z);
                let w = pillar_attention(ctx, z, batch, &format!("{PREFIX}.pillar"))?;
                out.rows = apply(ctx, cur, w, batch)?;
                out.pillar = Some(w);
            }
        }
    }
    Ok(out)
}
