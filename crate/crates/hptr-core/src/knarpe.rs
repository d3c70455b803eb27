//! K-nearest-neighbor attention with relative pose encoding.
//!
//! Each source token attends to its K nearest targets. The relative pose of
//! every (source, neighbor) pair is sinusoidally encoded, projected, and
//! added to that pair's key and value. Queries never receive the encoding.
//!
//! The whole operator is expressed in basic tensor ops: projections are
//! matmuls, neighbor lookup is `gather_rows`, per-head logits come from an
//! elementwise product followed by a head-wise sum, invalid slots are masked
//! to `-inf` before the softmax, and the weighted sum of values reuses
//! matmul against a constant ones-row to spread attention weights across the
//! head dimension.

use std::sync::Arc;

use crate::encoding::{rpe, EncodingConfig};
use crate::geometry::{relative_pose, NeighborIndex, Pose2};
use crate::nn::{NetCtx, NetError};
use crate::scalar::Scalar;
use crate::tensor::{IndexMatrix, Tensor, TensorId};

/// Denominator of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `sqrt(D / heads)`, the per-head convention.
    #[default]
    PerHead,
    /// `sqrt(D)` taken literally over the full hidden dimension.
    FullDim,
}

#[derive(Debug, Clone, Copy)]
pub struct KnarpeConfig {
    pub dim_d: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout_p: f64,
    pub enc: EncodingConfig,
    pub scale: AttnScale,
}

impl KnarpeConfig {
    pub fn head_dim(&self) -> usize {
        debug_assert_eq!(self.dim_d % self.heads, 0);
        self.dim_d / self.heads
    }

    fn logit_scale(&self) -> f64 {
        let denom = match self.scale {
            AttnScale::PerHead => self.head_dim() as f64,
            AttnScale::FullDim => self.dim_d as f64,
        };
        1.0 / denom.sqrt()
    }
}

/// Attention output together with the post-softmax weights `[M, K, H]`;
/// the weights are exposed for tests and diagnostics.
pub struct KnarpeOutput {
    pub out: TensorId,
    pub alpha: TensorId,
}

/// Let every source token attend to its valid neighbors among the targets.
///
/// `src_attr: [M, D]`, `tgt_attr: [N, D]`, `neighbors` built over the
/// targets. Parameter names live under `{prefix}.{wq,bq,wk,bk,wv,bv}` for
/// the token projections and `{prefix}.{wkr,bkr,wvr,bvr}` for the RPE
/// projections (3D -> D).
#[allow(clippy::too_many_arguments)]
pub fn knarpe_attend<S: Scalar>(
    ctx: &mut NetCtx<S>,
    src_attr: TensorId,
    tgt_attr: TensorId,
    src_poses: &[Pose2],
    tgt_poses: &[Pose2],
    neighbors: &NeighborIndex,
    prefix: &str,
    cfg: &KnarpeConfig,
) -> Result<KnarpeOutput, NetError> {
    let m = src_poses.len();
    let k = neighbors.k;
    let (d, h) = (cfg.dim_d, cfg.heads);
    let dh = cfg.head_dim();
    if neighbors.queries != m {
        return Err(NetError::Contract(format!(
            "neighbor index covers {} queries, got {m} sources",
            neighbors.queries
        )));
    }
    for q in 0..m {
        if neighbors.valid_count(q) == 0 {
            return Err(NetError::Contract(format!(
                "source {q} has an empty neighborhood"
            )));
        }
    }

    // Token projections, then neighbor gathering.
    let wq = format!("{prefix}.wq");
    let q = proj(ctx, src_attr, &wq, &format!("{prefix}.bq"))?;
    let kb = proj(
        ctx,
        tgt_attr,
        &format!("{prefix}.wk"),
        &format!("{prefix}.bk"),
    )?;
    let vb = proj(
        ctx,
        tgt_attr,
        &format!("{prefix}.wv"),
        &format!("{prefix}.bv"),
    )?;
    let idx = Arc::new(IndexMatrix::new(m, k, neighbors.idx.clone()));
    let k_nb = ctx.graph.gather_rows(kb, idx.clone())?;
    let v_nb = ctx.graph.gather_rows(vb, idx.clone())?;

    // Relative pose encoding per (source, slot) pair, projected and added to
    // keys and values. Invalid slots carry a placeholder pose; the mask
    // removes them before the softmax.
    let mut rpe_rows = Vec::with_capacity(m * k * 3 * d);
    for (s, src_pose) in src_poses.iter().enumerate() {
        for slot in 0..k {
            let (j, _) = neighbors.at(s, slot);
            rpe_rows.extend(rpe(&relative_pose(src_pose, &tgt_poses[j]), &cfg.enc));
        }
    }
    let rpe_const = ctx
        .graph
        .constant(Tensor::from_f64(vec![m * k, 3 * d], &rpe_rows)?);
    let k_rpe = proj(
        ctx,
        rpe_const,
        &format!("{prefix}.wkr"),
        &format!("{prefix}.bkr"),
    )?;
    let v_rpe = proj(
        ctx,
        rpe_const,
        &format!("{prefix}.wvr"),
        &format!("{prefix}.bvr"),
    )?;
    let k_rpe = ctx.graph.reshape(k_rpe, vec![m, k, d])?;
    let v_rpe = ctx.graph.reshape(v_rpe, vec![m, k, d])?;
    let keys = ctx.graph.add(k_nb, k_rpe)?;
    let vals = ctx.graph.add(v_nb, v_rpe)?;

    // Per-head logits: repeat q across slots via a gather, multiply, reduce
    // over the head dimension.
    let src_ids: Vec<usize> = (0..m).flat_map(|s| std::iter::repeat_n(s, k)).collect();
    let idx_src = Arc::new(IndexMatrix::new(m, k, src_ids));
    let q_rep = ctx.graph.gather_rows(q, idx_src)?;
    let qk = ctx.graph.mul(q_rep, keys)?;
    let qk = ctx.graph.reshape(qk, vec![m, k, h, dh])?;
    let logits = ctx.graph.sum_axis(qk, 3)?;
    let logits = ctx.graph.scale(logits, cfg.logit_scale())?;

    // Mask invalid slots to -inf so attention normalizes over the valid set.
    let mut mask = Vec::with_capacity(m * k * h);
    for s in 0..m {
        for slot in 0..k {
            let (_, ok) = neighbors.at(s, slot);
            let v = if ok { 0.0 } else { f64::NEG_INFINITY };
            mask.extend(std::iter::repeat_n(v, h));
        }
    }
    let mask = ctx.graph.constant(Tensor::from_f64(vec![m, k, h], &mask)?);
    let logits = ctx.graph.add(logits, mask)?;
    let alpha = ctx.graph.softmax(logits, 1)?;

    // Weighted value sum: spread alpha over the head dim with a ones-row
    // matmul, multiply, reduce the slot axis, re-concatenate heads.
    let alpha_col = ctx.graph.reshape(alpha, vec![m * k * h, 1])?;
    let ones = ctx
        .graph
        .constant(Tensor::from_f64(vec![1, dh], &vec![1.0; dh])?);
    let alpha_exp = ctx.graph.matmul(alpha_col, ones)?;
    let alpha_exp = ctx.graph.reshape(alpha_exp, vec![m, k, h, dh])?;
    let v4 = ctx.graph.reshape(vals, vec![m, k, h, dh])?;
    let weighted = ctx.graph.mul(alpha_exp, v4)?;
    let z = ctx.graph.sum_axis(weighted, 1)?;
    let out = ctx.graph.reshape(z, vec![m, d])?;
    Ok(KnarpeOutput { out, alpha })
}

fn proj<S: Scalar>(
    ctx: &mut NetCtx<S>,
    x: TensorId,
    w_name: &str,
    b_name: &str,
) -> Result<TensorId, NetError> {
    let w = ctx.param(w_name)?;
    let b = ctx.param(b_name)?;
    let xw = ctx.graph.matmul(x, w)?;
    Ok(ctx.graph.add(xw, b)?)
}

/// Whether a block attends over itself or over a separate context.
pub enum BlockMode<'a> {
    SelfAttn,
    Cross {
        ctx_attr: TensorId,
        ctx_poses: &'a [Pose2],
    },
}

/// One pre-layer-norm transformer block built on KNARPE:
/// `x + drop(attend(LN(x), ...))`, then `x + drop(FFN(LN(x)))`.
/// In cross mode the context enters un-normalized.
pub fn knarpe_block<S: Scalar>(
    ctx: &mut NetCtx<S>,
    x: TensorId,
    poses: &[Pose2],
    neighbors: &NeighborIndex,
    mode: BlockMode,
    prefix: &str,
    cfg: &KnarpeConfig,
) -> Result<TensorId, NetError> {
    let normed = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
    let attn = match mode {
        BlockMode::SelfAttn => knarpe_attend(
            ctx,
            normed,
            normed,
            poses,
            poses,
            neighbors,
            &format!("{prefix}.attn"),
            cfg,
        )?,
        BlockMode::Cross {
            ctx_attr,
            ctx_poses,
        } => knarpe_attend(
            ctx,
            normed,
            ctx_attr,
            poses,
            ctx_poses,
            neighbors,
            &format!("{prefix}.attn"),
            cfg,
        )?,
    };
    let attn = ctx.dropout(attn.out)?;
    let x = ctx.graph.add(x, attn)?;

    let normed = ctx.layer_norm(x, &format!("{prefix}.ln2"))?;
    let h = ctx.linear(normed, &format!("{prefix}.ffn.l0"))?;
    let h = ctx.graph.relu(h)?;
    let h = ctx.dropout(h)?;
    let h = ctx.linear(h, &format!("{prefix}.ffn.l1"))?;
    let h = ctx.dropout(h)?;
    Ok(ctx.graph.add(x, h)?)
}

/// Register every parameter of one block under `prefix` into `names`,
/// shapes included. Used by the model when declaring its weight set.
pub fn block_param_shapes(prefix: &str, cfg: &KnarpeConfig, names: &mut Vec<(String, Vec<usize>)>) {
    let d = cfg.dim_d;
    let f = cfg.ff_dim;
    attend_param_shapes(&format!("{prefix}.attn"), cfg, names);
    for ln in ["ln1", "ln2"] {
        names.push((format!("{prefix}.{ln}.g"), vec![d]));
        names.push((format!("{prefix}.{ln}.b"), vec![d]));
    }
    names.push((format!("{prefix}.ffn.l0.w"), vec![d, f]));
    names.push((format!("{prefix}.ffn.l0.b"), vec![f]));
    names.push((format!("{prefix}.ffn.l1.w"), vec![f, d]));
    names.push((format!("{prefix}.ffn.l1.b"), vec![d]));
}

pub fn attend_param_shapes(
    prefix: &str,
    cfg: &KnarpeConfig,
    names: &mut Vec<(String, Vec<usize>)>,
) {
    let d = cfg.dim_d;
    for p in ["wq", "wk", "wv"] {
        names.push((format!("{prefix}.{p}"), vec![d, d]));
    }
    for p in ["bq", "bk", "bv"] {
        names.push((format!("{prefix}.{p}"), vec![d]));
    }
    for p in ["wkr", "wvr"] {
        names.push((format!("{prefix}.{p}"), vec![3 * d, d]));
    }
    for p in ["bkr", "bvr"] {
        names.push((format!("{prefix}.{p}"), vec![d]));
    }
}
