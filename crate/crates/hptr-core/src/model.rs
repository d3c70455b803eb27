//! The hierarchical polyline transformer: intra-class encoders, inter-class
//! decoders, anchor construction and the output heads.
//!
//! Stage order follows the attention-matrix topology. The lower-triangular
//! variant runs intra-map self-attention, then lets traffic lights attend to
//! the map, agents attend to map and lights, and finally per-agent anchor
//! tokens attend to everything. The diagonal, full and diagonal-plus-full
//! variants swap the middle stages for intra-class and/or all-to-all
//! attention; every variant ends with the anchor decoder.

use serde::{Deserialize, Serialize};

use crate::encoding::{EncodingConfig, PeExponentSign};
use crate::geometry::{knn_indices, wrap_angle, Pose2};
use crate::knarpe::{block_param_shapes, knarpe_block, AttnScale, BlockMode, KnarpeConfig};
use crate::nn::{clamp_sym, NetCtx, NetError};
use crate::polyline::{encode_agents, encode_map, encode_traffic_lights, encoder_param_shapes};
use crate::scalar::Scalar;
use crate::scenario::{Scenario, AGENT_TYPES};
use crate::tensor::{IndexMatrix, Tensor, TensorId};
use crate::weights::{xavier_uniform, WeightStore};

use std::sync::Arc;

/// Values each trajectory head step predicts.
pub const STEP_CHANNELS: usize = 9;
pub const LOG_SIGMA_BOUND: f64 = 5.0;
pub const RHO_BOUND: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    LowerTri,
    Diag,
    Full,
    DiagFull,
}

impl Topology {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lower_tri" => Some(Self::LowerTri),
            "diag" => Some(Self::Diag),
            "full" => Some(Self::Full),
            "diag_full" => Some(Self::DiagFull),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LowerTri => "lower_tri",
            Self::Diag => "diag",
            Self::Full => "full",
            Self::DiagFull => "diag_full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub intra_mp: usize,
    pub intra_tl: usize,
    pub intra_ag: usize,
    pub enhance_tl: usize,
    pub enhance_ag: usize,
    pub all2all: usize,
    pub ac2all: usize,
}

impl Default for LayerCounts {
    fn default() -> Self {
        Self {
            intra_mp: 6,
            intra_tl: 3,
            intra_ag: 3,
            enhance_tl: 2,
            enhance_ag: 2,
            all2all: 6,
            ac2all: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim_d: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout_p: f64,
    pub omega: f64,
    pub pe_exponent_sign: PeExponentSign,
    pub attn_scale: AttnScale,
    /// Base neighbor count; multiplied per stage by the gammas below.
    pub k: usize,
    pub gamma_tl: usize,
    pub gamma_ag: usize,
    pub gamma_ac: usize,
    /// Anchors (and therefore predicted futures) per target agent.
    pub n_ac: usize,
    pub layers: LayerCounts,
    pub topology: Topology,
    pub t_future: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim_d: 256,
            heads: 4,
            ff_dim: 1024,
            dropout_p: 0.1,
            omega: 1000.0,
            pe_exponent_sign: PeExponentSign::default(),
            attn_scale: AttnScale::default(),
            k: 36,
            gamma_tl: 2,
            gamma_ag: 4,
            gamma_ac: 10,
            n_ac: 6,
            layers: LayerCounts::default(),
            topology: Topology::LowerTri,
            t_future: 80,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough for desk-scale experiments while keeping
    /// the full stage structure.
    pub fn desk_scale() -> Self {
        Self {
            dim_d: 32,
            heads: 4,
            ff_dim: 64,
            t_future: 16,
            ..Self::default()
        }
    }

    /// The smallest sensible model: one layer per stage, used by gradient
    /// checks and unit tests.
    pub fn tiny(t_future: usize) -> Self {
        Self {
            dim_d: 16,
            heads: 2,
            ff_dim: 32,
            dropout_p: 0.0,
            k: 4,
            gamma_tl: 1,
            gamma_ag: 1,
            gamma_ac: 2,
            layers: LayerCounts {
                intra_mp: 1,
                intra_tl: 1,
                intra_ag: 1,
                enhance_tl: 1,
                enhance_ag: 1,
                all2all: 1,
                ac2all: 1,
            },
            t_future,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.dim_d == 0 || !self.dim_d.is_multiple_of(2) {
            return Err(NetError::Contract(format!(
                "hidden dimension must be even and positive, got {}",
                self.dim_d
            )));
        }
        if self.heads == 0 || !self.dim_d.is_multiple_of(self.heads) {
            return Err(NetError::Contract(format!(
                "heads ({}) must divide the hidden dimension ({})",
                self.heads, self.dim_d
            )));
        }
        if self.k == 0 || self.n_ac == 0 || self.t_future == 0 {
            return Err(NetError::Contract(
                "k, n_ac and t_future must be positive".into(),
            ));
        }
        if self.omega.is_nan() || self.omega <= 0.0 {
            return Err(NetError::Contract(format!(
                "omega must be positive, got {}",
                self.omega
            )));
        }
        Ok(())
    }

    pub fn knarpe(&self) -> KnarpeConfig {
        let mut enc = EncodingConfig::new(self.dim_d, self.omega).expect("validated config");
        enc.pe_exponent_sign = self.pe_exponent_sign;
        KnarpeConfig {
            dim_d: self.dim_d,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout_p: self.dropout_p,
            enc,
            scale: self.attn_scale,
        }
    }

    /// Stages used by the configured topology, with layer counts. The anchor
    /// decoder is part of every variant.
    pub fn active_stages(&self) -> Vec<(&'static str, usize)> {
        let l = &self.layers;
        let mut stages: Vec<(&'static str, usize)> = match self.topology {
            Topology::LowerTri => vec![
                ("intra_mp", l.intra_mp),
                ("enhance_tl", l.enhance_tl),
                ("enhance_ag", l.enhance_ag),
            ],
            Topology::Diag => vec![
                ("intra_mp", l.intra_mp),
                ("intra_tl", l.intra_tl),
                ("intra_ag", l.intra_ag),
            ],
            Topology::Full => vec![("all2all", l.all2all)],
            Topology::DiagFull => vec![
                ("intra_mp", l.intra_mp),
                ("intra_tl", l.intra_tl),
                ("intra_ag", l.intra_ag),
                ("all2all", l.all2all),
            ],
        };
        stages.push(("ac2all", l.ac2all));
        stages
    }

    /// Every weight tensor of this model, in `stage.layer.tensor` naming.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim_d;
        let kcfg = self.knarpe();
        let mut names = Vec::new();
        encoder_param_shapes(d, &mut names);
        for (stage, layers) in self.active_stages() {
            for i in 0..layers {
                block_param_shapes(&format!("{stage}.{i}"), &kcfg, &mut names);
            }
        }
        names.push(("anchors.emb".into(), vec![AGENT_TYPES, self.n_ac, d]));
        names.push(("anchors.proj.w".into(), vec![2 * d, d]));
        names.push(("anchors.proj.b".into(), vec![d]));
        for (head, out) in [("conf", 1), ("traj", self.t_future * STEP_CHANNELS)] {
            names.push((format!("heads.{head}.l0.w"), vec![d, d]));
            names.push((format!("heads.{head}.l0.b"), vec![d]));
            names.push((format!("heads.{head}.l1.w"), vec![d, d]));
            names.push((format!("heads.{head}.l1.b"), vec![d]));
            names.push((format!("heads.{head}.l2.w"), vec![d, out]));
            names.push((format!("heads.{head}.l2.b"), vec![out]));
        }
        names
    }
}

/// Fresh weights: Xavier-uniform matrices, zero biases, unit layer-norm
/// gains. Anchor embeddings are widened by a factor of 5.
pub fn init_weights<S: Scalar>(cfg: &ModelConfig, seed: u64) -> WeightStore<S> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (name, shape) in cfg.param_shapes() {
        let t: Tensor<S> = if name.ends_with(".b") && shape.len() == 1 {
            Tensor::zeros(shape)
        } else if name.ends_with(".g") {
            Tensor::from_f64(shape.clone(), &vec![1.0; shape.iter().product()]).unwrap()
        } else if name == "anchors.emb" {
            xavier_uniform(shape.clone(), cfg.dim_d, cfg.dim_d, 5.0, &mut rng)
        } else {
            let fi = shape[0];
            let fo = *shape.last().unwrap();
            xavier_uniform(shape.clone(), fi, fo, 1.0, &mut rng)
        };
        store.insert(name, t);
    }
    store
}

/// Final context tokens plus everything needed to decode predictions.
pub struct ForwardPass {
    /// `[n_targets * n_ac, D]` anchor features.
    pub z: TensorId,
    /// Scenario agent index per target row.
    pub targets: Vec<usize>,
    /// Final context token attributes `[n_ctx, D]` and their poses.
    pub ctx_attrs: TensorId,
    pub ctx_poses: Vec<Pose2>,
}

/// Decoded (still differentiable) head outputs.
pub struct HeadOutputs {
    /// `[n_targets, n_ac]` confidence logits.
    pub conf_logits: TensorId,
    /// `[n_targets * n_ac, t_future * 9]` clamped trajectory channels.
    pub traj: TensorId,
    pub targets: Vec<usize>,
}

/// Self-attention stage: `layers` blocks over one token set, KNN computed
/// once for the stage since poses never change inside a pass.
pub fn run_self_stage<S: Scalar>(
    ctx: &mut NetCtx<S>,
    stage: &str,
    layers: usize,
    mut attrs: TensorId,
    poses: &[Pose2],
    k: usize,
    cfg: &ModelConfig,
) -> Result<TensorId, NetError> {
    if poses.is_empty() || layers == 0 {
        return Ok(attrs);
    }
    let valid = vec![true; poses.len()];
    let nn = knn_indices(poses, poses, &valid, k.min(poses.len()))?;
    let kcfg = cfg.knarpe();
    for i in 0..layers {
        attrs = knarpe_block(
            ctx,
            attrs,
            poses,
            &nn,
            BlockMode::SelfAttn,
            &format!("{stage}.{i}"),
            &kcfg,
        )?;
    }
    Ok(attrs)
}

/// Cross-attention stage: queries keep their poses, the context is fixed.
#[allow(clippy::too_many_arguments)]
pub fn run_cross_stage<S: Scalar>(
    ctx: &mut NetCtx<S>,
    stage: &str,
    layers: usize,
    mut attrs: TensorId,
    poses: &[Pose2],
    ctx_attrs: TensorId,
    ctx_poses: &[Pose2],
    k: usize,
    cfg: &ModelConfig,
) -> Result<TensorId, NetError> {
    if poses.is_empty() || ctx_poses.is_empty() || layers == 0 {
        return Ok(attrs);
    }
    let valid = vec![true; ctx_poses.len()];
    let nn = knn_indices(poses, ctx_poses, &valid, k.min(ctx_poses.len()))?;
    let kcfg = cfg.knarpe();
    for i in 0..layers {
        attrs = knarpe_block(
            ctx,
            attrs,
            poses,
            &nn,
            BlockMode::Cross {
                ctx_attr: ctx_attrs,
                ctx_poses,
            },
            &format!("{stage}.{i}"),
            &kcfg,
        )?;
    }
    Ok(attrs)
}

/// Encoded-then-contextualized tokens of one scenario, before the anchor
/// decoder. Exposed separately so the streaming runtime can cache stages.
pub struct ContextTokens {
    pub attrs: TensorId,
    pub poses: Vec<Pose2>,
    /// Rows `agent_rows.0 .. agent_rows.1` of `attrs` are the agent tokens.
    pub agent_rows: (usize, usize),
}

/// Run encoders and the topology's context stages.
pub fn build_context<S: Scalar>(
    ctx: &mut NetCtx<S>,
    scenario: &Scenario,
    cfg: &ModelConfig,
) -> Result<ContextTokens, NetError> {
    let mp = encode_map(ctx, &scenario.map, "enc_mp.pointnet")?;
    let tl = (!scenario.lights.is_empty())
        .then(|| encode_traffic_lights(ctx, &scenario.lights, "enc_tl.mlp"))
        .transpose()?;
    let ag = encode_agents(ctx, &scenario.agents, scenario.meta.dt, "enc_ag.pointnet")?;
    let l = &cfg.layers;

    let (mp_attrs, tl_attrs, ag_attrs) = match cfg.topology {
        Topology::LowerTri => {
            let mp_attrs =
                run_self_stage(ctx, "intra_mp", l.intra_mp, mp.attrs, &mp.poses, cfg.k, cfg)?;
            let tl_attrs = match &tl {
                Some(t) => Some(run_cross_stage(
                    ctx,
                    "enhance_tl",
                    l.enhance_tl,
                    t.attrs,
                    &t.poses,
                    mp_attrs,
                    &mp.poses,
                    cfg.gamma_tl * cfg.k,
                    cfg,
                )?),
                None => None,
            };
            // agents attend to map and (possibly empty) lights
            let (uctx, uposes) = stack_context(ctx, mp_attrs, &mp.poses, tl_attrs, tl.as_ref())?;
            let ag_attrs = run_cross_stage(
                ctx,
                "enhance_ag",
                l.enhance_ag,
                ag.attrs,
                &ag.poses,
                uctx,
                &uposes,
                cfg.gamma_ag * cfg.k,
                cfg,
            )?;
            (mp_attrs, tl_attrs, ag_attrs)
        }
        Topology::Diag => {
            let mp_attrs =
                run_self_stage(ctx, "intra_mp", l.intra_mp, mp.attrs, &mp.poses, cfg.k, cfg)?;
            let tl_attrs = match &tl {
                Some(t) => Some(run_self_stage(
                    ctx, "intra_tl", l.intra_tl, t.attrs, &t.poses, cfg.k, cfg,
                )?),
                None => None,
            };
            let ag_attrs =
                run_self_stage(ctx, "intra_ag", l.intra_ag, ag.attrs, &ag.poses, cfg.k, cfg)?;
            (mp_attrs, tl_attrs, ag_attrs)
        }
        Topology::Full | Topology::DiagFull => {
            let (mut mp_attrs, mut tl_attrs, mut ag_attrs) =
                (mp.attrs, tl.as_ref().map(|t| t.attrs), ag.attrs);
            if cfg.topology == Topology::DiagFull {
                mp_attrs =
                    run_self_stage(ctx, "intra_mp", l.intra_mp, mp_attrs, &mp.poses, cfg.k, cfg)?;
                if let (Some(t), Some(ta)) = (&tl, tl_attrs) {
                    tl_attrs = Some(run_self_stage(
                        ctx, "intra_tl", l.intra_tl, ta, &t.poses, cfg.k, cfg,
                    )?);
                }
                ag_attrs =
                    run_self_stage(ctx, "intra_ag", l.intra_ag, ag_attrs, &ag.poses, cfg.k, cfg)?;
            }
            // all-to-all over the concatenated token set
            let (mut all_attrs, mut all_poses) =
                stack_context(ctx, mp_attrs, &mp.poses, tl_attrs, tl.as_ref())?;
            all_attrs = ctx.graph.concat_rows(all_attrs, ag_attrs)?;
            all_poses.extend_from_slice(&ag.poses);
            let out = run_self_stage(ctx, "all2all", l.all2all, all_attrs, &all_poses, cfg.k, cfg)?;
            // context and agent rows both live in the combined tensor
            let n_mp = mp.poses.len();
            let n_tl = tl.as_ref().map_or(0, |t| t.poses.len());
            let n_ag = ag.poses.len();
            return Ok(ContextTokens {
                attrs: out,
                poses: all_poses,
                agent_rows: (n_mp + n_tl, n_mp + n_tl + n_ag),
            });
        }
    };

    let (mut all_attrs, mut all_poses) =
        stack_context(ctx, mp_attrs, &mp.poses, tl_attrs, tl.as_ref())?;
    let n_before = all_poses.len();
    all_attrs = ctx.graph.concat_rows(all_attrs, ag_attrs)?;
    all_poses.extend_from_slice(&ag.poses);
    Ok(ContextTokens {
        attrs: all_attrs,
        poses: all_poses,
        agent_rows: (n_before, n_before + ag.poses.len()),
    })
}

fn stack_context<S: Scalar>(
    ctx: &mut NetCtx<S>,
    mp_attrs: TensorId,
    mp_poses: &[Pose2],
    tl_attrs: Option<TensorId>,
    tl: Option<&crate::polyline::TokenSet>,
) -> Result<(TensorId, Vec<Pose2>), NetError> {
    let mut poses = mp_poses.to_vec();
    match (tl_attrs, tl) {
        (Some(ta), Some(t)) => {
            let attrs = ctx.graph.concat_rows(mp_attrs, ta)?;
            poses.extend_from_slice(&t.poses);
            Ok((attrs, poses))
        }
        _ => Ok((mp_attrs, poses)),
    }
}

/// Build anchor tokens for the target agents and run the anchor decoder.
pub fn hptr_forward<S: Scalar>(
    ctx: &mut NetCtx<S>,
    scenario: &Scenario,
    cfg: &ModelConfig,
) -> Result<ForwardPass, NetError> {
    cfg.validate()?;
    let tokens = build_context(ctx, scenario, cfg)?;
    anchor_decode(ctx, &scenario.agents, cfg, tokens)
}

/// The anchor decoder over an already-built context (shared by the offline
/// forward and the streaming runtime).
pub fn anchor_decode<S: Scalar>(
    ctx: &mut NetCtx<S>,
    agents: &[crate::scenario::RawAgent],
    cfg: &ModelConfig,
    tokens: ContextTokens,
) -> Result<ForwardPass, NetError> {
    let targets: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].is_target).collect();
    if targets.is_empty() {
        return Err(NetError::Contract(
            "scenario has no target agents to predict".into(),
        ));
    }
    let n_t = targets.len();
    let n_ac = cfg.n_ac;
    let d = cfg.dim_d;

    // agent attribute rows, one per (target, anchor) pair
    let agent_idx: Vec<usize> = targets
        .iter()
        .flat_map(|&t| std::iter::repeat_n(tokens.agent_rows.0 + t, n_ac))
        .collect();
    let gather_agents = Arc::new(IndexMatrix::new(n_t, n_ac, agent_idx));
    let agent_rep = ctx.graph.gather_rows(tokens.attrs, gather_agents)?;
    let agent_rep = ctx.graph.reshape(agent_rep, vec![n_t * n_ac, d])?;

    // anchor embedding rows, shared per agent type
    let emb = ctx.param("anchors.emb")?;
    let emb2d = ctx.graph.reshape(emb, vec![AGENT_TYPES * n_ac, d])?;
    let emb_idx: Vec<usize> = targets
        .iter()
        .flat_map(|&t| {
            let ty = agents[t].agent_type;
            (0..n_ac).map(move |a| ty * n_ac + a)
        })
        .collect();
    let gather_emb = Arc::new(IndexMatrix::new(n_t, n_ac, emb_idx));
    let emb_rep = ctx.graph.gather_rows(emb2d, gather_emb)?;
    let emb_rep = ctx.graph.reshape(emb_rep, vec![n_t * n_ac, d])?;

    let merged = ctx.graph.concat_last(agent_rep, emb_rep)?;
    let anchors = ctx.linear(merged, "anchors.proj")?;

    let anchor_poses: Vec<Pose2> = targets
        .iter()
        .flat_map(|&t| std::iter::repeat_n(agents[t].current_pose(), n_ac))
        .collect();

    let z = run_cross_stage(
        ctx,
        "ac2all",
        cfg.layers.ac2all,
        anchors,
        &anchor_poses,
        tokens.attrs,
        &tokens.poses,
        cfg.gamma_ac * cfg.k,
        cfg,
    )?;
    Ok(ForwardPass {
        z,
        targets,
        ctx_attrs: tokens.attrs,
        ctx_poses: tokens.poses,
    })
}

/// Confidence and trajectory heads over anchor features, with the channel
/// clamps applied (log-sigmas into `[-5, 5]`, correlation via `0.99 tanh`).
pub fn decode_heads<S: Scalar>(
    ctx: &mut NetCtx<S>,
    pass: &ForwardPass,
    cfg: &ModelConfig,
) -> Result<HeadOutputs, NetError> {
    let n_t = pass.targets.len();
    let n_ac = cfg.n_ac;
    let conf = ctx.mlp3(pass.z, "heads.conf")?;
    let conf_logits = ctx.graph.reshape(conf, vec![n_t, n_ac])?;

    let traj = ctx.mlp3(pass.z, "heads.traj")?;
    let rows = n_t * n_ac * cfg.t_future;
    let steps = ctx.graph.reshape(traj, vec![rows, STEP_CHANNELS])?;
    let mu = ctx.graph.slice_last(steps, 0, 2)?;
    let log_sig = ctx.graph.slice_last(steps, 2, 2)?;
    let log_sig = clamp_sym(&mut ctx.graph, log_sig, LOG_SIGMA_BOUND)?;
    let rho_raw = ctx.graph.slice_last(steps, 4, 1)?;
    let rho = ctx.graph.tanh(rho_raw)?;
    let rho = ctx.graph.scale(rho, RHO_BOUND)?;
    let rest = ctx.graph.slice_last(steps, 5, 4)?;
    let a = ctx.graph.concat_last(mu, log_sig)?;
    let b = ctx.graph.concat_last(a, rho)?;
    let full = ctx.graph.concat_last(b, rest)?;
    let traj = ctx
        .graph
        .reshape(full, vec![n_t * n_ac, cfg.t_future * STEP_CHANNELS])?;
    Ok(HeadOutputs {
        conf_logits,
        traj,
        targets: pass.targets.clone(),
    })
}

// ---------------------------------------------------------------------------
// Plain-value predictions
// ---------------------------------------------------------------------------

/// One predicted step in the target agent's t = 0 frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredStep {
    pub mu_x: f64,
    pub mu_y: f64,
    pub log_sig_x: f64,
    pub log_sig_y: f64,
    pub rho: f64,
    pub vx: f64,
    pub vy: f64,
    pub theta: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub conf_logit: f64,
    pub confidence: f64,
    pub steps: Vec<PredStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub agent_index: usize,
    pub modes: Vec<ModePrediction>,
}

/// Multi-modal predictions for every target agent. Confidences are the
/// softmax of the logits and sum to one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub agents: Vec<AgentPrediction>,
    pub t_future: usize,
}

/// Read head outputs into plain values.
pub fn extract_predictions<S: Scalar>(
    ctx: &NetCtx<S>,
    heads: &HeadOutputs,
    cfg: &ModelConfig,
) -> PredictionSet {
    let conf = ctx.graph.value(heads.conf_logits);
    let traj = ctx.graph.value(heads.traj);
    let n_ac = cfg.n_ac;
    let tf = cfg.t_future;
    let mut agents = Vec::with_capacity(heads.targets.len());
    for (ti, &agent_index) in heads.targets.iter().enumerate() {
        let logits: Vec<f64> = (0..n_ac)
            .map(|a| conf.data()[ti * n_ac + a].as_f64())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let den: f64 = exps.iter().sum();
        let mut modes = Vec::with_capacity(n_ac);
        for a in 0..n_ac {
            let row = (ti * n_ac + a) * tf * STEP_CHANNELS;
            let steps = (0..tf)
                .map(|t| {
                    let at = |c: usize| traj.data()[row + t * STEP_CHANNELS + c].as_f64();
                    PredStep {
                        mu_x: at(0),
                        mu_y: at(1),
                        log_sig_x: at(2),
                        log_sig_y: at(3),
                        rho: at(4),
                        vx: at(5),
                        vy: at(6),
                        theta: at(7),
                        speed: at(8),
                    }
                })
                .collect();
            modes.push(ModePrediction {
                conf_logit: logits[a],
                confidence: exps[a] / den,
                steps,
            });
        }
        agents.push(AgentPrediction { agent_index, modes });
    }
    PredictionSet {
        agents,
        t_future: tf,
    }
}

/// Rotate and translate one agent's predictions from its t = 0 frame into
/// the global frame. Uncertainty channels stay in the local frame.
pub fn predictions_to_global(pred: &AgentPrediction, agent_pose: &Pose2) -> AgentPrediction {
    let modes = pred
        .modes
        .iter()
        .map(|m| ModePrediction {
            conf_logit: m.conf_logit,
            confidence: m.confidence,
            steps: m
                .steps
                .iter()
                .map(|s| {
                    let p = agent_pose.local_to_global([s.mu_x, s.mu_y]);
                    let v = agent_pose.rotate_to_global([s.vx, s.vy]);
                    PredStep {
                        mu_x: p[0],
                        mu_y: p[1],
                        vx: v[0],
                        vy: v[1],
                        theta: wrap_angle(s.theta + agent_pose.theta()).expect("finite"),
                        ..*s
                    }
                })
                .collect(),
        })
        .collect();
    AgentPrediction {
        agent_index: pred.agent_index,
        modes,
    }
}

/// Inverse of [`predictions_to_global`].
pub fn predictions_to_local(pred: &AgentPrediction, agent_pose: &Pose2) -> AgentPrediction {
    let modes = pred
        .modes
        .iter()
        .map(|m| ModePrediction {
            conf_logit: m.conf_logit,
            confidence: m.confidence,
            steps: m
                .steps
                .iter()
                .map(|s| {
                    let p = agent_pose.global_to_local([s.mu_x, s.mu_y]);
                    let v = agent_pose.rotate_to_local([s.vx, s.vy]);
                    PredStep {
                        mu_x: p[0],
                        mu_y: p[1],
                        vx: v[0],
                        vy: v[1],
                        theta: wrap_angle(s.theta - agent_pose.theta()).expect("finite"),
                        ..*s
                    }
                })
                .collect(),
        })
        .collect();
    AgentPrediction {
        agent_index: pred.agent_index,
        modes,
    }
}

/// End-to-end inference convenience: forward, heads, value extraction.
pub fn predict<S: Scalar>(
    weights: &WeightStore<S>,
    scenario: &Scenario,
    cfg: &ModelConfig,
) -> Result<PredictionSet, NetError> {
    let mut ctx = NetCtx::inference(weights);
    let pass = hptr_forward(&mut ctx, scenario, cfg)?;
    let heads = decode_heads(&mut ctx, &pass, cfg)?;
    Ok(extract_predictions(&ctx, &heads, cfg))
}

// ---------------------------------------------------------------------------
// Analytic FLOP counting
// ---------------------------------------------------------------------------

/// Multiply-accumulate count of one attention block given source count `m`,
/// target count `n` and neighbor count `k`.
fn block_flops(cfg: &ModelConfig, m: usize, n: usize, k: usize) -> u64 {
    let d = cfg.dim_d as u64;
    let ff = cfg.ff_dim as u64;
    let (m, n, k) = (m as u64, n as u64, k as u64);
    let proj = (m + 2 * n) * d * d; // q, k, v
    let rpe = 2 * m * k * 3 * d * d; // key and value encodings
    let logits = m * k * d;
    let weighted = 2 * m * k * d;
    let ffn = 2 * m * d * ff;
    proj + rpe + logits + weighted + ffn
}

/// Analytic forward multiply count for a scenario of the given token counts.
pub fn forward_flops(
    cfg: &ModelConfig,
    n_mp: usize,
    n_tl: usize,
    n_ag: usize,
    n_targets: usize,
) -> u64 {
    let mut total = 0u64;
    let all = n_mp + n_tl + n_ag;
    let kk = |k: usize, n: usize| k.min(n);
    for (stage, layers) in cfg.active_stages() {
        let per_layer = match stage {
            "intra_mp" => block_flops(cfg, n_mp, n_mp, kk(cfg.k, n_mp)),
            "intra_tl" => block_flops(cfg, n_tl, n_tl, kk(cfg.k, n_tl)),
            "intra_ag" => block_flops(cfg, n_ag, n_ag, kk(cfg.k, n_ag)),
            "enhance_tl" => block_flops(cfg, n_tl, n_mp, kk(cfg.gamma_tl * cfg.k, n_mp)),
            "enhance_ag" => block_flops(
                cfg,
                n_ag,
                n_mp + n_tl,
                kk(cfg.gamma_ag * cfg.k, n_mp + n_tl),
            ),
            "all2all" => block_flops(cfg, all, all, kk(cfg.k, all)),
            "ac2all" => block_flops(
                cfg,
                n_targets * cfg.n_ac,
                all,
                kk(cfg.gamma_ac * cfg.k, all),
            ),
            _ => 0,
        };
        total += per_layer * layers as u64;
    }
    total
}
