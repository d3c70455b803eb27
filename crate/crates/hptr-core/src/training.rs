//! Losses, hard assignment and a toy training loop.
//!
//! The trajectory loss combines a bivariate Gaussian negative log-likelihood
//! on positions, a negative cosine on headings and Huber terms on velocities
//! and speed, averaged over the future steps where ground truth exists. Only
//! the mode closest to ground truth (by average displacement error) is
//! optimized; the confidence head is trained with that mode's index as the
//! cross-entropy label. The total is the unweighted sum.

use std::collections::HashMap;
use std::f64::consts::TAU;

use thiserror::Error;

use crate::geometry::{wrap_angle, Pose2};
use crate::model::{
    extract_predictions, hptr_forward, HeadOutputs, ModePrediction, ModelConfig, PredictionSet,
    STEP_CHANNELS,
};
use crate::nn::{huber as huber_graph, recip_pos, NetCtx, NetError};
use crate::scenario::{FutureState, Scenario};
use crate::tensor::{IndexMatrix, Tensor, TensorId};
use crate::weights::WeightStore;

use std::sync::Arc;

pub const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("non-finite loss at epoch {epoch}: {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("training contract violation: {0}")]
    Contract(String),
}

/// Ground truth for one agent expressed in its t = 0 frame.
#[derive(Debug, Clone)]
pub struct LocalTrack {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub theta: Vec<f64>,
    pub speed: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Transform a global-frame future into the agent frame.
pub fn track_to_local(pose: &Pose2, future: &[FutureState]) -> LocalTrack {
    let n = future.len();
    let mut t = LocalTrack {
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        vx: Vec::with_capacity(n),
        vy: Vec::with_capacity(n),
        theta: Vec::with_capacity(n),
        speed: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for s in future {
        let p = pose.global_to_local([s.x, s.y]);
        let v = pose.rotate_to_local([s.vx, s.vy]);
        t.x.push(p[0]);
        t.y.push(p[1]);
        t.vx.push(v[0]);
        t.vy.push(v[1]);
        t.theta
            .push(wrap_angle(s.theta - pose.theta()).unwrap_or(0.0));
        t.speed.push(s.speed);
        t.valid.push(s.valid);
    }
    t
}

/// Exact bivariate normal negative log-density, the scalar reference used by
/// both the loss report and the tests.
pub fn nll_gaussian_2d(
    mu_x: f64,
    mu_y: f64,
    log_sig_x: f64,
    log_sig_y: f64,
    rho: f64,
    gt_x: f64,
    gt_y: f64,
) -> f64 {
    let inv_sx = (-log_sig_x).exp();
    let inv_sy = (-log_sig_y).exp();
    let zx = (gt_x - mu_x) * inv_sx;
    let zy = (gt_y - mu_y) * inv_sy;
    let om = 1.0 - rho * rho;
    // -log N = log(2 pi) + log sx + log sy + 0.5 log(1 - rho^2)
    //          + (zx^2 + zy^2 - 2 rho zx zy) / (2 (1 - rho^2))
    TAU.ln()
        + log_sig_x
        + log_sig_y
        + 0.5 * om.ln()
        + (zx * zx + zy * zy - 2.0 * rho * zx * zy) / (2.0 * om)
}

/// `-cos(gt - pred)`: minimized at equality, periodic by construction.
pub fn cos_loss(pred_theta: f64, gt_theta: f64) -> f64 {
    -(gt_theta - pred_theta).cos()
}

/// Scalar Huber curve with the configured delta.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Index of the mode with smallest average displacement error over valid
/// steps; ties resolve to the lowest index. When prediction and ground-truth
/// horizons differ, the overlap is scored.
pub fn hard_assign(modes: &[ModePrediction], gt: &LocalTrack) -> Result<usize, TrainError> {
    let horizon = modes
        .iter()
        .map(|m| m.steps.len())
        .min()
        .unwrap_or(0)
        .min(gt.valid.len());
    let n_valid = gt.valid[..horizon].iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Err(TrainError::Contract(
            "hard_assign requires at least one valid ground-truth step within the prediction horizon".into(),
        ));
    }
    let mut best = 0usize;
    let mut best_ade = f64::INFINITY;
    for (k, m) in modes.iter().enumerate() {
        let mut sum = 0.0;
        for (t, step) in m.steps.iter().take(horizon).enumerate() {
            if gt.valid[t] {
                sum += ((step.mu_x - gt.x[t]).powi(2) + (step.mu_y - gt.y[t]).powi(2)).sqrt();
            }
        }
        let ade = sum / n_valid as f64;
        if ade < best_ade {
            best_ade = ade;
            best = k;
        }
    }
    Ok(best)
}

/// Per-component loss values plus the selected mode per optimized agent.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_pos: f64,
    pub l_rot: f64,
    pub l_vel: f64,
    pub l_traj: f64,
    pub l_conf: f64,
    pub l_total: f64,
    /// `(agent_index, chosen_mode)` per optimized agent.
    pub chosen: Vec<(usize, usize)>,
}

/// Differentiable total loss over the optimized agents of one scenario.
pub struct TotalLoss {
    pub loss: TensorId,
    pub report: LossReport,
}

/// Build the training loss on top of decoded heads. Trajectory terms touch
/// only each agent's hard-assigned mode, so the other modes' trajectory
/// outputs receive exactly zero gradient.
pub fn total_loss<S: crate::scalar::Scalar>(
    ctx: &mut NetCtx<S>,
    heads: &HeadOutputs,
    scenario: &Scenario,
    cfg: &ModelConfig,
) -> Result<TotalLoss, TrainError> {
    let preds = extract_predictions(ctx, heads, cfg);
    let tf = cfg.t_future;
    let n_ac = cfg.n_ac;

    // optimized agents must be predicted targets with usable ground truth
    let mut rows: Vec<(usize, usize, LocalTrack)> = Vec::new(); // (target row, agent idx, gt)
    for (ti, &agent_index) in heads.targets.iter().enumerate() {
        let agent = &scenario.agents[agent_index];
        if !agent.optimize {
            continue;
        }
        let future = agent.future.as_ref().ok_or_else(|| {
            TrainError::Contract(format!("agent {agent_index} is optimized without a future"))
        })?;
        if future.len() < tf {
            return Err(TrainError::Contract(format!(
                "agent {agent_index}: ground truth covers {} steps but the model predicts {tf}",
                future.len()
            )));
        }
        // train on the model's horizon; any longer ground truth is unused
        rows.push((
            ti,
            agent_index,
            track_to_local(&agent.current_pose(), &future[..tf]),
        ));
    }
    for (i, a) in scenario.agents.iter().enumerate() {
        if a.optimize && !a.is_target {
            return Err(TrainError::Contract(format!(
                "agent {i} is optimized but not a prediction target"
            )));
        }
    }
    if rows.is_empty() {
        return Err(TrainError::Contract(
            "no optimized agents in this scenario".into(),
        ));
    }

    let inv_agents = 1.0 / rows.len() as f64;
    let mut chosen = Vec::with_capacity(rows.len());
    let mut l_pos_terms = Vec::new();
    let mut l_rot_terms = Vec::new();
    let mut l_vel_terms = Vec::new();
    let mut l_conf_terms = Vec::new();

    for (ti, agent_index, gt) in &rows {
        let pred_modes = &preds
            .agents
            .iter()
            .find(|a| a.agent_index == *agent_index)
            .expect("targets and predictions align")
            .modes;
        let k_hat = hard_assign(pred_modes, gt)?;
        chosen.push((*agent_index, k_hat));

        // slice the selected mode's trajectory rows: [tf, channels]
        let row = ti * n_ac + k_hat;
        let idx = Arc::new(IndexMatrix::new(1, 1, vec![row]));
        let mode_traj = ctx.graph.gather_rows(heads.traj, idx)?;
        let steps = ctx.graph.reshape(mode_traj, vec![tf, STEP_CHANNELS])?;

        let mu_x = ctx.graph.slice_last(steps, 0, 1)?;
        let mu_y = ctx.graph.slice_last(steps, 1, 1)?;
        let lsx = ctx.graph.slice_last(steps, 2, 1)?;
        let lsy = ctx.graph.slice_last(steps, 3, 1)?;
        let rho = ctx.graph.slice_last(steps, 4, 1)?;
        let vx = ctx.graph.slice_last(steps, 5, 1)?;
        let vy = ctx.graph.slice_last(steps, 6, 1)?;
        let theta = ctx.graph.slice_last(steps, 7, 1)?;
        let speed = ctx.graph.slice_last(steps, 8, 1)?;

        // step weights average over the valid steps only
        let n_valid = gt.valid.iter().filter(|v| **v).count() as f64;
        let w: Vec<f64> = gt
            .valid
            .iter()
            .map(|&v| if v { 1.0 / n_valid } else { 0.0 })
            .collect();
        let w = ctx.graph.constant(Tensor::from_f64(vec![tf, 1], &w)?);
        let col = |ctx: &mut NetCtx<S>, v: &[f64]| -> Result<TensorId, NetError> {
            Ok(ctx.graph.constant(Tensor::from_f64(vec![tf, 1], v)?))
        };
        let gx = col(ctx, &gt.x)?;
        let gy = col(ctx, &gt.y)?;
        let gvx = col(ctx, &gt.vx)?;
        let gvy = col(ctx, &gt.vy)?;
        let gth = col(ctx, &gt.theta)?;
        let gsp = col(ctx, &gt.speed)?;

        // position NLL
        let neg_lsx = ctx.graph.scale(lsx, -1.0)?;
        let inv_sx = ctx.graph.exp(neg_lsx)?;
        let neg_lsy = ctx.graph.scale(lsy, -1.0)?;
        let inv_sy = ctx.graph.exp(neg_lsy)?;
        let dx = ctx.graph.sub(gx, mu_x)?;
        let dy = ctx.graph.sub(gy, mu_y)?;
        let zx = ctx.graph.mul(dx, inv_sx)?;
        let zy = ctx.graph.mul(dy, inv_sy)?;
        let rho2 = ctx.graph.mul(rho, rho)?;
        let neg_rho2 = ctx.graph.scale(rho2, -1.0)?;
        let om = ctx.graph.add_const(neg_rho2, 1.0)?;
        let log_om = ctx.graph.log(om)?;
        let half_log_om = ctx.graph.scale(log_om, 0.5)?;
        let zx2 = ctx.graph.mul(zx, zx)?;
        let zy2 = ctx.graph.mul(zy, zy)?;
        let zxzy = ctx.graph.mul(zx, zy)?;
        let rho_zxzy = ctx.graph.mul(rho, zxzy)?;
        let cross = ctx.graph.scale(rho_zxzy, -2.0)?;
        let quad_sum = ctx.graph.add(zx2, zy2)?;
        let quad_sum = ctx.graph.add(quad_sum, cross)?;
        let inv_om = recip_pos(&mut ctx.graph, om)?;
        let quad = ctx.graph.mul(quad_sum, inv_om)?;
        let quad = ctx.graph.scale(quad, 0.5)?;
        let logs = ctx.graph.add(lsx, lsy)?;
        let logs = ctx.graph.add_const(logs, TAU.ln())?;
        let nll = ctx.graph.add(logs, half_log_om)?;
        let nll = ctx.graph.add(nll, quad)?;
        let nll_w = ctx.graph.mul(nll, w)?;
        l_pos_terms.push(ctx.graph.sum_all(nll_w)?);

        // heading: -cos(gt - pred)
        let dth = ctx.graph.sub(gth, theta)?;
        let cos_d = ctx.graph.cos(dth)?;
        let neg_cos = ctx.graph.scale(cos_d, -1.0)?;
        let rot_w = ctx.graph.mul(neg_cos, w)?;
        l_rot_terms.push(ctx.graph.sum_all(rot_w)?);

        // velocities and speed: Huber
        let rvx = ctx.graph.sub(gvx, vx)?;
        let rvy = ctx.graph.sub(gvy, vy)?;
        let rsp = ctx.graph.sub(gsp, speed)?;
        let hx = huber_graph(&mut ctx.graph, rvx, HUBER_DELTA)?;
        let hy = huber_graph(&mut ctx.graph, rvy, HUBER_DELTA)?;
        let hs = huber_graph(&mut ctx.graph, rsp, HUBER_DELTA)?;
        let hv = ctx.graph.add(hx, hy)?;
        let hv = ctx.graph.add(hv, hs)?;
        let hv_w = ctx.graph.mul(hv, w)?;
        l_vel_terms.push(ctx.graph.sum_all(hv_w)?);

        // confidence cross-entropy with the chosen mode as the label
        let row_idx = Arc::new(IndexMatrix::new(1, 1, vec![*ti]));
        let logits = ctx.graph.gather_rows(heads.conf_logits, row_idx)?;
        let logits = ctx.graph.reshape(logits, vec![1, n_ac])?;
        let sm = ctx.graph.softmax(logits, 1)?;
        let p_k = ctx.graph.slice_last(sm, k_hat, 1)?;
        let log_p = ctx.graph.log(p_k)?;
        let nll_conf = ctx.graph.scale(log_p, -1.0)?;
        l_conf_terms.push(ctx.graph.sum_all(nll_conf)?);
    }

    let mean = |ctx: &mut NetCtx<S>, terms: &[TensorId]| -> Result<TensorId, NetError> {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = ctx.graph.add(acc, *t)?;
        }
        Ok(ctx.graph.scale(acc, inv_agents)?)
    };
    let l_pos = mean(ctx, &l_pos_terms)?;
    let l_rot = mean(ctx, &l_rot_terms)?;
    let l_vel = mean(ctx, &l_vel_terms)?;
    let l_conf = mean(ctx, &l_conf_terms)?;
    let l_traj = ctx.graph.add(l_pos, l_rot)?;
    let l_traj = ctx.graph.add(l_traj, l_vel)?;
    let l_total = ctx.graph.add(l_traj, l_conf)?;

    let v = |id: TensorId| ctx.graph.value(id).item().as_f64();
    let report = LossReport {
        l_pos: v(l_pos),
        l_rot: v(l_rot),
        l_vel: v(l_vel),
        l_traj: v(l_traj),
        l_conf: v(l_conf),
        l_total: v(l_total),
        chosen,
    };
    Ok(TotalLoss {
        loss: l_total,
        report,
    })
}

// ---------------------------------------------------------------------------
// Optimizer and toy training loop
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, weights: &mut WeightStore<f64>, grads: &HashMap<String, Vec<f64>>) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, w) in weights.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let data = w.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                data[i] -= self.lr * self.weight_decay * data[i];
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Run one forward/backward over a scenario and return loss plus gradients.
pub fn scenario_grads(
    weights: &WeightStore<f64>,
    scenario: &Scenario,
    cfg: &ModelConfig,
    dropout_seed: u64,
) -> Result<(LossReport, HashMap<String, Vec<f64>>), TrainError> {
    let mut ctx = NetCtx::training(weights, cfg.dropout_p, dropout_seed);
    let pass = hptr_forward(&mut ctx, scenario, cfg)?;
    let heads = crate::model::decode_heads(&mut ctx, &pass, cfg)?;
    let total = total_loss(&mut ctx, &heads, scenario, cfg)?;
    ctx.graph.backward(total.loss).map_err(NetError::Tensor)?;
    Ok((total.report, ctx.grads()))
}

/// Full-batch training on a fixed scenario set with a constant learning
/// rate. Deterministic under a fixed seed.
pub fn toy_train(
    scenarios: &[Scenario],
    cfg: &ModelConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(WeightStore<f64>, Vec<LossReport>), TrainError> {
    if scenarios.is_empty() {
        return Err(TrainError::Contract("no scenarios to train on".into()));
    }
    let mut weights = crate::model::init_weights::<f64>(cfg, seed);
    let mut opt = AdamW::new(lr);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
        let mut report = LossReport {
            l_pos: 0.0,
            l_rot: 0.0,
            l_vel: 0.0,
            l_traj: 0.0,
            l_conf: 0.0,
            l_total: 0.0,
            chosen: Vec::new(),
        };
        let inv = 1.0 / scenarios.len() as f64;
        for (si, sc) in scenarios.iter().enumerate() {
            let dropout_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((epoch * scenarios.len() + si) as u64);
            let (r, grads) = scenario_grads(&weights, sc, cfg, dropout_seed)?;
            report.l_pos += r.l_pos * inv;
            report.l_rot += r.l_rot * inv;
            report.l_vel += r.l_vel * inv;
            report.l_traj += r.l_traj * inv;
            report.l_conf += r.l_conf * inv;
            report.l_total += r.l_total * inv;
            report.chosen.extend(r.chosen);
            for (name, g) in grads {
                let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b * inv;
                }
            }
        }
        if !report.l_total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: report.l_total,
            });
        }
        opt.step(&mut weights, &acc);
        curve.push(report);
    }
    Ok((weights, curve))
}

/// Loss curve as delimiter-separated text: epoch, components, total.
pub fn loss_curve_csv(curve: &[LossReport]) -> String {
    let mut out = String::from("epoch,l_pos,l_rot,l_vel,l_conf,l_total\n");
    for (e, r) in curve.iter().enumerate() {
        out.push_str(&format!(
            "{e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.l_pos, r.l_rot, r.l_vel, r.l_conf, r.l_total
        ));
    }
    out
}

/// Helper used by gradient checks: deterministic scalar loss of a scenario
/// under the given weights (no dropout).
pub fn deterministic_loss(
    weights: &WeightStore<f64>,
    scenario: &Scenario,
    cfg: &ModelConfig,
) -> Result<f64, TrainError> {
    let mut ctx = NetCtx::inference(weights);
    let pass = hptr_forward(&mut ctx, scenario, cfg)?;
    let heads = crate::model::decode_heads(&mut ctx, &pass, cfg)?;
    let total = total_loss(&mut ctx, &heads, scenario, cfg)?;
    Ok(total.report.l_total)
}

/// The same quantity through the training path (gradients enabled).
pub fn deterministic_loss_and_grads(
    weights: &WeightStore<f64>,
    scenario: &Scenario,
    cfg: &ModelConfig,
) -> Result<(f64, HashMap<String, Vec<f64>>), TrainError> {
    let mut cfg = *cfg;
    cfg.dropout_p = 0.0;
    scenario_grads(weights, scenario, &cfg, 0).map(|(r, g)| (r.l_total, g))
}

/// Full-model finite-difference gradient check on a tiny configuration:
/// one layer per stage, hidden dimension 16, four future steps, three
/// agents. Checks every parameter tensor of the model.
pub fn gradcheck_tiny(
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<crate::tensor::GradCheckReport, TrainError> {
    let cfg = ModelConfig::tiny(4);
    let scenario = crate::scenario::generate_synthetic(&crate::scenario::SynthConfig {
        seed,
        n_lanes: 4,
        n_agents: 3,
        n_lights: 2,
        t_history: 4,
        t_future: 4,
        target_fraction: 1.0,
        ..Default::default()
    });
    let weights = crate::model::init_weights::<f64>(&cfg, seed);
    let (_, analytic) = deterministic_loss_and_grads(&weights, &scenario, &cfg)?;
    let mut params: Vec<(String, Tensor<f64>)> = cfg
        .param_shapes()
        .iter()
        .map(|(n, _)| (n.clone(), weights.get(n).unwrap().clone()))
        .collect();
    let analytic_by_pos: Vec<Option<Vec<f64>>> = params
        .iter()
        .map(|(n, _)| analytic.get(n).cloned())
        .collect();
    let report = crate::tensor::finite_diff_check(
        |ps| {
            let mut store = WeightStore::new();
            for (n, t) in ps {
                store.insert(n.clone(), t.clone());
            }
            deterministic_loss(&store, &scenario, &cfg).expect("perturbed loss evaluates")
        },
        &mut params,
        &analytic_by_pos,
        h,
        tol,
    );
    Ok(report)
}

/// Minimum average displacement error of a prediction set against the
/// scenario's ground truth, in meters. Used by the overfit smoke test.
pub fn min_ade(preds: &PredictionSet, scenario: &Scenario) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ap in &preds.agents {
        let agent = &scenario.agents[ap.agent_index];
        let Some(future) = agent.future.as_ref() else {
            continue;
        };
        let gt = track_to_local(&agent.current_pose(), future);
        let horizon = ap
            .modes
            .iter()
            .map(|m| m.steps.len())
            .min()
            .unwrap_or(0)
            .min(gt.valid.len());
        let n_valid = gt.valid[..horizon].iter().filter(|v| **v).count();
        if n_valid == 0 {
            continue;
        }
        let best = ap
            .modes
            .iter()
            .map(|m| {
                m.steps
                    .iter()
                    .take(horizon)
                    .enumerate()
                    .filter(|(t, _)| gt.valid[*t])
                    .map(|(t, s)| ((s.mu_x - gt.x[t]).powi(2) + (s.mu_y - gt.y[t]).powi(2)).sqrt())
                    .sum::<f64>()
                    / n_valid as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += best;
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}
