//! Streaming inference sessions, confidence post-processing and metrics.
//!
//! A session caches whatever part of the forward pass cannot change between
//! queries: the encoded map tokens plus, for topologies that have one, the
//! intra-map stage output. Traffic-light features are cached behind a digest
//! of the observed (pose, state) tuples and recomputed only when that digest
//! changes. Agent stages and the anchor decoder always run.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use thiserror::Error;

use crate::geometry::Pose2;
use crate::model::{
    anchor_decode, decode_heads, extract_predictions, run_cross_stage, run_self_stage,
    AgentPrediction, ContextTokens, ModelConfig, PredictionSet, Topology,
};
use crate::nn::{NetCtx, NetError};
use crate::polyline::{encode_agents, encode_map, encode_traffic_lights};
use crate::scalar::Scalar;
use crate::scenario::{RawAgent, RawMapPolyline, RawTrafficLight, Scenario};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("runtime contract violation: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Cached values of a token class: poses plus attribute values.
#[derive(Debug, Clone)]
struct CachedTokens<S: Scalar> {
    poses: Vec<Pose2>,
    attrs: Tensor<S>,
}

/// Timing and stage bookkeeping of one streamed step.
#[derive(Debug, Clone)]
pub struct StepTiming {
    pub step: usize,
    pub micros: u128,
    pub tl_recomputed: bool,
    /// Comma-free stage tags, e.g. `"ag+ac"` or `"tl+ag+ac"`.
    pub stages: String,
}

/// Streaming inference over a fixed map.
pub struct Session<'w, S: Scalar> {
    weights: &'w WeightStore<S>,
    cfg: ModelConfig,
    dt: f64,
    map: CachedTokens<S>,
    tl_cache: Option<(u64, CachedTokens<S>)>,
    steps: usize,
    pub timing_log: Vec<StepTiming>,
}

fn tl_digest(lights: &[RawTrafficLight]) -> u64 {
    let mut h = DefaultHasher::new();
    for l in lights {
        l.x.to_bits().hash(&mut h);
        l.y.to_bits().hash(&mut h);
        l.theta.to_bits().hash(&mut h);
        l.state.hash(&mut h);
    }
    h.finish()
}

impl<'w, S: Scalar> Session<'w, S> {
    /// Encode the map and run the static part of the forward pass once.
    pub fn init(
        map: &[RawMapPolyline],
        dt: f64,
        weights: &'w WeightStore<S>,
        cfg: &ModelConfig,
    ) -> Result<Self, RuntimeError> {
        if map.is_empty() {
            return Err(RuntimeError::Contract(
                "session requires a non-empty map".into(),
            ));
        }
        cfg.validate()?;
        let mut ctx = NetCtx::inference(weights);
        let tokens = encode_map(&mut ctx, map, "enc_mp.pointnet")?;
        let attrs = if cfg.topology == Topology::Full {
            // no map-only stage exists in the full topology
            tokens.attrs
        } else {
            run_self_stage(
                &mut ctx,
                "intra_mp",
                cfg.layers.intra_mp,
                tokens.attrs,
                &tokens.poses,
                cfg.k,
                cfg,
            )?
        };
        Ok(Self {
            weights,
            cfg: *cfg,
            dt,
            map: CachedTokens {
                poses: tokens.poses,
                attrs: ctx.graph.value(attrs).clone(),
            },
            tl_cache: None,
            steps: 0,
            timing_log: Vec::new(),
        })
    }

    /// Cached map feature values (for tests and diagnostics).
    pub fn cached_map_features(&self) -> (&[Pose2], &Tensor<S>) {
        (&self.map.poses, &self.map.attrs)
    }

    /// The traffic-light stage output for the current observations, reusing
    /// the cache when the digest matches.
    fn tl_tokens(
        &mut self,
        lights: &[RawTrafficLight],
    ) -> Result<(Option<CachedTokens<S>>, bool), RuntimeError> {
        if lights.is_empty() {
            return Ok((None, false));
        }
        let digest = tl_digest(lights);
        if let Some((cached_digest, cached)) = &self.tl_cache {
            if *cached_digest == digest {
                return Ok((Some(cached.clone()), false));
            }
        }
        let mut ctx = NetCtx::inference(self.weights);
        let tl = encode_traffic_lights(&mut ctx, lights, "enc_tl.mlp")?;
        let attrs = match self.cfg.topology {
            Topology::LowerTri => {
                let mp_attrs = ctx.graph.constant(self.map.attrs.clone());
                run_cross_stage(
                    &mut ctx,
                    "enhance_tl",
                    self.cfg.layers.enhance_tl,
                    tl.attrs,
                    &tl.poses,
                    mp_attrs,
                    &self.map.poses,
                    self.cfg.gamma_tl * self.cfg.k,
                    &self.cfg,
                )?
            }
            Topology::Diag | Topology::DiagFull => run_self_stage(
                &mut ctx,
                "intra_tl",
                self.cfg.layers.intra_tl,
                tl.attrs,
                &tl.poses,
                self.cfg.k,
                &self.cfg,
            )?,
            Topology::Full => tl.attrs,
        };
        let cached = CachedTokens {
            poses: tl.poses,
            attrs: ctx.graph.value(attrs).clone(),
        };
        self.tl_cache = Some((digest, cached.clone()));
        Ok((Some(cached), true))
    }

    /// One streaming query: dynamic observations in, predictions out.
    pub fn step(
        &mut self,
        lights: &[RawTrafficLight],
        agents: &[RawAgent],
    ) -> Result<(PredictionSet, StepTiming), RuntimeError> {
        let start = Instant::now();
        let (tl, tl_recomputed) = self.tl_tokens(lights)?;

        let mut ctx = NetCtx::inference(self.weights);
        let mp_attrs = ctx.graph.constant(self.map.attrs.clone());
        let ag = encode_agents(&mut ctx, agents, self.dt, "enc_ag.pointnet")?;
        let cfg = self.cfg;

        // static + light context tokens
        let (static_attrs, mut static_poses) = match &tl {
            Some(t) => {
                let ta = ctx.graph.constant(t.attrs.clone());
                let attrs = ctx
                    .graph
                    .concat_rows(mp_attrs, ta)
                    .map_err(NetError::Tensor)?;
                let mut poses = self.map.poses.clone();
                poses.extend_from_slice(&t.poses);
                (attrs, poses)
            }
            None => (mp_attrs, self.map.poses.clone()),
        };

        let ag_attrs = match cfg.topology {
            Topology::LowerTri => run_cross_stage(
                &mut ctx,
                "enhance_ag",
                cfg.layers.enhance_ag,
                ag.attrs,
                &ag.poses,
                static_attrs,
                &static_poses,
                cfg.gamma_ag * cfg.k,
                &cfg,
            )?,
            Topology::Diag => run_self_stage(
                &mut ctx,
                "intra_ag",
                cfg.layers.intra_ag,
                ag.attrs,
                &ag.poses,
                cfg.k,
                &cfg,
            )?,
            Topology::Full | Topology::DiagFull => {
                if cfg.topology == Topology::DiagFull {
                    run_self_stage(
                        &mut ctx,
                        "intra_ag",
                        cfg.layers.intra_ag,
                        ag.attrs,
                        &ag.poses,
                        cfg.k,
                        &cfg,
                    )?
                } else {
                    ag.attrs
                }
            }
        };

        let n_static = static_poses.len();
        let all_attrs = ctx
            .graph
            .concat_rows(static_attrs, ag_attrs)
            .map_err(NetError::Tensor)?;
        static_poses.extend_from_slice(&ag.poses);
        let mut tokens = ContextTokens {
            attrs: all_attrs,
            poses: static_poses,
            agent_rows: (n_static, n_static + ag.poses.len()),
        };
        if matches!(cfg.topology, Topology::Full | Topology::DiagFull) {
            // the all-to-all stage mixes every class, so it must re-run
            let attrs = run_self_stage(
                &mut ctx,
                "all2all",
                cfg.layers.all2all,
                tokens.attrs,
                &tokens.poses,
                cfg.k,
                &cfg,
            )?;
            tokens.attrs = attrs;
        }

        let pass = anchor_decode(&mut ctx, agents, &cfg, tokens)?;
        let heads = decode_heads(&mut ctx, &pass, &cfg)?;
        let preds = extract_predictions(&ctx, &heads, &cfg);

        let timing = StepTiming {
            step: self.steps,
            micros: start.elapsed().as_micros(),
            tl_recomputed,
            stages: if tl_recomputed {
                "tl+ag+ac".to_string()
            } else {
                "ag+ac".to_string()
            },
        };
        self.steps += 1;
        self.timing_log.push(timing.clone());
        Ok((preds, timing))
    }
}

/// Latency log as delimiter-separated text.
pub fn timing_log_csv(log: &[StepTiming]) -> String {
    let mut out = String::from("step,micros,tl_recomputed,stages\n");
    for t in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            t.step, t.micros, t.tl_recomputed, t.stages
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Confidence post-processing
// ---------------------------------------------------------------------------

/// Suppression distance by agent type: vehicle, pedestrian, cyclist.
pub const NMS_THRESHOLDS: [f64; 3] = [2.5, 1.0, 1.5];

fn mode_ade(a: &crate::model::ModePrediction, b: &crate::model::ModePrediction) -> f64 {
    let n = a.steps.len().min(b.steps.len()).max(1);
    a.steps
        .iter()
        .zip(&b.steps)
        .map(|(x, y)| (x.mu_x - y.mu_x).hypot(x.mu_y - y.mu_y))
        .sum::<f64>()
        / n as f64
}

/// Greedy non-maximum suppression over one agent's modes: confidences of
/// near-duplicate trajectories are zeroed and the survivors renormalized.
/// Trajectories themselves are never touched.
pub fn nms_confidences(pred: &AgentPrediction, agent_type: usize) -> AgentPrediction {
    let threshold = NMS_THRESHOLDS[agent_type.min(NMS_THRESHOLDS.len() - 1)];
    let mut order: Vec<usize> = (0..pred.modes.len()).collect();
    order.sort_by(|&a, &b| {
        pred.modes[b]
            .confidence
            .total_cmp(&pred.modes[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; pred.modes.len()];
    for &k in &order {
        let near = kept
            .iter()
            .any(|&j| mode_ade(&pred.modes[k], &pred.modes[j]) < threshold);
        if near {
            suppressed[k] = true;
        } else {
            kept.push(k);
        }
    }
    let total: f64 = kept.iter().map(|&k| pred.modes[k].confidence).sum();
    let mut out = pred.clone();
    for (k, m) in out.modes.iter_mut().enumerate() {
        m.confidence = if suppressed[k] {
            0.0
        } else if total > 0.0 {
            m.confidence / total
        } else {
            1.0 / kept.len() as f64
        };
    }
    out
}

/// Apply NMS to every agent of a prediction set, with types taken from the
/// scenario record.
pub fn nms_prediction_set(preds: &PredictionSet, scenario: &Scenario) -> PredictionSet {
    PredictionSet {
        agents: preds
            .agents
            .iter()
            .map(|a| nms_confidences(a, scenario.agents[a.agent_index].agent_type))
            .collect(),
        t_future: preds.t_future,
    }
}

/// Temperature softmax over raw logits.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>, RuntimeError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(RuntimeError::Domain(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - mx) / tau).exp()).collect();
    let den: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / den).collect())
}

/// Replace confidences with a temperature-sharpened softmax of the logits.
pub fn apply_temperature(preds: &PredictionSet, tau: f64) -> Result<PredictionSet, RuntimeError> {
    let mut out = preds.clone();
    for a in &mut out.agents {
        let logits: Vec<f64> = a.modes.iter().map(|m| m.conf_logit).collect();
        let conf = softmax_temperature(&logits, tau)?;
        for (m, c) in a.modes.iter_mut().zip(conf) {
            m.confidence = c;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Fixed miss threshold in meters (stand-in for dataset-specific rules).
pub const MISS_THRESHOLD_M: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct AgentMetrics {
    pub agent_index: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub missed: bool,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub per_agent: Vec<AgentMetrics>,
}

/// Displacement metrics against the scenario's ground truth. `min_ade`
/// minimizes mean displacement over modes; `min_fde` independently minimizes
/// the displacement at the last valid step.
pub fn evaluate(preds: &PredictionSet, scenario: &Scenario) -> MetricReport {
    let mut per_agent = Vec::new();
    for ap in &preds.agents {
        let agent = &scenario.agents[ap.agent_index];
        let Some(future) = agent.future.as_ref() else {
            continue;
        };
        let gt = crate::training::track_to_local(&agent.current_pose(), future);
        // prediction and ground-truth horizons may differ; score the overlap
        let horizon = ap
            .modes
            .iter()
            .map(|m| m.steps.len())
            .min()
            .unwrap_or(0)
            .min(gt.valid.len());
        let valid_steps: Vec<usize> = (0..horizon).filter(|&t| gt.valid[t]).collect();
        if valid_steps.is_empty() {
            continue;
        }
        let last = *valid_steps.last().unwrap();
        let mut min_ade = f64::INFINITY;
        let mut min_fde = f64::INFINITY;
        for m in &ap.modes {
            let ade = valid_steps
                .iter()
                .map(|&t| (m.steps[t].mu_x - gt.x[t]).hypot(m.steps[t].mu_y - gt.y[t]))
                .sum::<f64>()
                / valid_steps.len() as f64;
            let fde = (m.steps[last].mu_x - gt.x[last]).hypot(m.steps[last].mu_y - gt.y[last]);
            min_ade = min_ade.min(ade);
            min_fde = min_fde.min(fde);
        }
        per_agent.push(AgentMetrics {
            agent_index: ap.agent_index,
            min_ade,
            min_fde,
            missed: min_fde > MISS_THRESHOLD_M,
        });
    }
    let n = per_agent.len().max(1) as f64;
    MetricReport {
        min_ade: per_agent.iter().map(|a| a.min_ade).sum::<f64>() / n,
        min_fde: per_agent.iter().map(|a| a.min_fde).sum::<f64>() / n,
        miss_rate: per_agent.iter().filter(|a| a.missed).count() as f64 / n,
        per_agent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, predict, ModePrediction, PredStep};
    use crate::scenario::{generate_synthetic, SynthConfig};

    fn small_scenario(seed: u64) -> Scenario {
        generate_synthetic(&SynthConfig {
            seed,
            n_lanes: 6,
            n_agents: 4,
            n_lights: 2,
            t_history: 5,
            t_future: 4,
            ..Default::default()
        })
    }

    #[test]
    fn session_init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::tiny(4);
        let weights = init_weights::<f64>(&cfg, 1);
        let sc = small_scenario(2);
        let s1 = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
        let s2 = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
        let (_, a1) = s1.cached_map_features();
        let (_, a2) = s2.cached_map_features();
        assert_eq!(a1, a2);
        assert_eq!(a1.shape(), &[sc.map.len(), cfg.dim_d]);
    }

    #[test]
    fn empty_map_is_a_contract_error() {
        let cfg = ModelConfig::tiny(4);
        let weights = init_weights::<f64>(&cfg, 1);
        assert!(matches!(
            Session::init(&[], 0.1, &weights, &cfg),
            Err(RuntimeError::Contract(_))
        ));
    }

    #[test]
    fn cached_steps_match_offline_forward() {
        let cfg = ModelConfig::tiny(4);
        let weights = init_weights::<f64>(&cfg, 3);
        let sc = small_scenario(4);
        let offline = predict(&weights, &sc, &cfg).unwrap();
        let mut session = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
        for step in 0..3 {
            let (preds, timing) = session.step(&sc.lights, &sc.agents).unwrap();
            assert_eq!(timing.tl_recomputed, step == 0);
            for (pa, oa) in preds.agents.iter().zip(&offline.agents) {
                for (pm, om) in pa.modes.iter().zip(&oa.modes) {
                    assert!((pm.confidence - om.confidence).abs() < 1e-5);
                    for (ps, os) in pm.steps.iter().zip(&om.steps) {
                        assert!((ps.mu_x - os.mu_x).abs() < 1e-5);
                        assert!((ps.mu_y - os.mu_y).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn tl_change_invalidates_the_cache_and_still_matches_offline() {
        let cfg = ModelConfig::tiny(4);
        let weights = init_weights::<f64>(&cfg, 5);
        let mut sc = small_scenario(6);
        let mut session = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
        let (_, t0) = session.step(&sc.lights, &sc.agents).unwrap();
        assert!(t0.tl_recomputed);
        let (_, t1) = session.step(&sc.lights, &sc.agents).unwrap();
        assert!(!t1.tl_recomputed);

        sc.lights[0].state = (sc.lights[0].state + 1) % crate::scenario::C_TL;
        let (preds, t2) = session.step(&sc.lights, &sc.agents).unwrap();
        assert!(t2.tl_recomputed);
        let offline = predict(&weights, &sc, &cfg).unwrap();
        for (pa, oa) in preds.agents.iter().zip(&offline.agents) {
            for (pm, om) in pa.modes.iter().zip(&oa.modes) {
                for (ps, os) in pm.steps.iter().zip(&om.steps) {
                    assert!((ps.mu_x - os.mu_x).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn streaming_matches_offline_for_every_topology() {
        let sc = small_scenario(7);
        for topology in [
            Topology::LowerTri,
            Topology::Diag,
            Topology::Full,
            Topology::DiagFull,
        ] {
            let cfg = ModelConfig {
                topology,
                ..ModelConfig::tiny(4)
            };
            let weights = init_weights::<f64>(&cfg, 8);
            let offline = predict(&weights, &sc, &cfg).unwrap();
            let mut session = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
            let (preds, _) = session.step(&sc.lights, &sc.agents).unwrap();
            for (pa, oa) in preds.agents.iter().zip(&offline.agents) {
                for (pm, om) in pa.modes.iter().zip(&oa.modes) {
                    for (ps, os) in pm.steps.iter().zip(&om.steps) {
                        assert!(
                            (ps.mu_x - os.mu_x).abs() < 1e-5,
                            "{topology:?}: {} vs {}",
                            ps.mu_x,
                            os.mu_x
                        );
                    }
                }
            }
        }
    }

    fn mode_at(conf: f64, x: f64) -> ModePrediction {
        ModePrediction {
            conf_logit: conf.ln(),
            confidence: conf,
            steps: (0..4)
                .map(|t| PredStep {
                    mu_x: x + t as f64,
                    mu_y: 0.0,
                    log_sig_x: 0.0,
                    log_sig_y: 0.0,
                    rho: 0.0,
                    vx: 0.0,
                    vy: 0.0,
                    theta: 0.0,
                    speed: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn nms_merges_identical_trajectories() {
        let pred = AgentPrediction {
            agent_index: 0,
            modes: vec![mode_at(0.6, 0.0), mode_at(0.4, 0.0)],
        };
        let out = nms_confidences(&pred, 0);
        assert_eq!(out.modes[0].confidence, 1.0);
        assert_eq!(out.modes[1].confidence, 0.0);
        // trajectories untouched
        assert_eq!(out.modes[1].steps, pred.modes[1].steps);
    }

    #[test]
    fn nms_leaves_distant_modes_alone() {
        let pred = AgentPrediction {
            agent_index: 0,
            modes: vec![mode_at(0.5, 0.0), mode_at(0.3, 10.0), mode_at(0.2, -10.0)],
        };
        let out = nms_confidences(&pred, 0);
        for (a, b) in out.modes.iter().zip(&pred.modes) {
            assert!((a.confidence - b.confidence).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_chain_keeps_the_ends() {
        // A at 0, B at 2 (near A), C at 4 (near B, far from A); vehicle
        // threshold 2.5: expect keep {A, C}, suppress B
        let pred = AgentPrediction {
            agent_index: 0,
            modes: vec![mode_at(0.5, 0.0), mode_at(0.3, 2.0), mode_at(0.2, 4.0)],
        };
        let out = nms_confidences(&pred, 0);
        assert!(out.modes[0].confidence > 0.0);
        assert_eq!(out.modes[1].confidence, 0.0);
        assert!(out.modes[2].confidence > 0.0);
        let total: f64 = out.modes.iter().map(|m| m.confidence).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_is_idempotent() {
        let pred = AgentPrediction {
            agent_index: 0,
            modes: vec![
                mode_at(0.4, 0.0),
                mode_at(0.3, 1.0),
                mode_at(0.2, 8.0),
                mode_at(0.1, 8.5),
            ],
        };
        let once = nms_confidences(&pred, 2);
        let twice = nms_confidences(&once, 2);
        assert_eq!(once, twice);
    }

    #[test]
    fn temperature_softmax_values() {
        let uniform = softmax_temperature(&[0.7, 0.7, 0.7], 0.25).unwrap();
        for c in &uniform {
            assert!((c - 1.0 / 3.0).abs() < 1e-12);
        }
        let sharp = softmax_temperature(&[1.0, 0.0], 0.5).unwrap();
        assert!((sharp[0] - 0.8808).abs() < 1e-4);
        assert!((sharp[1] - 0.1192).abs() < 1e-4);
        // smaller tau sharpens monotonically
        let mut last = 0.0;
        for tau in [2.0, 1.0, 0.5, 0.25, 0.1] {
            let c = softmax_temperature(&[1.0, 0.0], tau).unwrap();
            assert!(c[0] > last);
            last = c[0];
        }
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn evaluate_perfect_and_offset_modes() {
        let cfg = ModelConfig {
            n_ac: 2,
            ..ModelConfig::tiny(4)
        };
        let sc = small_scenario(9);
        let weights = init_weights::<f64>(&cfg, 10);
        let mut preds = predict(&weights, &sc, &cfg).unwrap();
        // overwrite mode 0 with the exact ground truth of each agent
        for ap in &mut preds.agents {
            let agent = &sc.agents[ap.agent_index];
            let gt = crate::training::track_to_local(
                &agent.current_pose(),
                agent.future.as_ref().unwrap(),
            );
            for (t, s) in ap.modes[0].steps.iter_mut().enumerate() {
                s.mu_x = gt.x[t];
                s.mu_y = gt.y[t];
            }
        }
        let report = evaluate(&preds, &sc);
        assert!(report.min_ade < 1e-9);
        assert!(report.min_fde < 1e-9);
        assert_eq!(report.miss_rate, 0.0);

        // constant 3 m offset on all modes: ade = fde = 3, everyone misses
        for ap in &mut preds.agents {
            let agent = &sc.agents[ap.agent_index];
            let gt = crate::training::track_to_local(
                &agent.current_pose(),
                agent.future.as_ref().unwrap(),
            );
            for m in &mut ap.modes {
                for (t, s) in m.steps.iter_mut().enumerate() {
                    s.mu_x = gt.x[t] + 3.0;
                    s.mu_y = gt.y[t];
                }
            }
        }
        let report = evaluate(&preds, &sc);
        assert!((report.min_ade - 3.0).abs() < 1e-9);
        assert!((report.min_fde - 3.0).abs() < 1e-9);
        assert_eq!(report.miss_rate, 1.0);
    }

    #[test]
    fn parallel_sessions_share_one_weight_store() {
        let cfg = ModelConfig::tiny(4);
        let weights = init_weights::<f64>(&cfg, 40);
        let sc = small_scenario(41);
        let baseline = {
            let mut s = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
            s.step(&sc.lights, &sc.agents).unwrap().0
        };
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..3)
                .map(|_| {
                    scope.spawn(|| {
                        let mut s = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
                        s.step(&sc.lights, &sc.agents).unwrap().0
                    })
                })
                .collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), baseline);
            }
        });
    }

    #[test]
    fn evaluate_scores_the_overlap_when_horizons_differ() {
        // model predicts 4 steps, ground truth runs 9: no panic, the first
        // four steps are scored
        let cfg = ModelConfig::tiny(4);
        let weights = init_weights::<f64>(&cfg, 30);
        let mut sc = generate_synthetic(&SynthConfig {
            seed: 31,
            n_lanes: 6,
            n_agents: 2,
            n_lights: 1,
            t_history: 5,
            t_future: 9,
            ..Default::default()
        });
        let preds = predict(&weights, &sc, &cfg).unwrap();
        let report = evaluate(&preds, &sc);
        assert!(!report.per_agent.is_empty());
        assert!(report.min_ade.is_finite());

        // shorter ground truth than predictions is also fine
        sc.meta.t_future = 2;
        for a in &mut sc.agents {
            if let Some(f) = &mut a.future {
                f.truncate(2);
            }
        }
        let report = evaluate(&preds, &sc);
        assert!(report.min_ade.is_finite());
    }

    #[test]
    fn evaluate_matches_per_mode_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig::tiny(4);
        let sc = small_scenario(12);
        let weights = init_weights::<f64>(&cfg, 13);
        let mut preds = predict(&weights, &sc, &cfg).unwrap();
        for ap in &mut preds.agents {
            for m in &mut ap.modes {
                for s in &mut m.steps {
                    s.mu_x = rng.gen::<f64>() * 20.0 - 10.0;
                    s.mu_y = rng.gen::<f64>() * 20.0 - 10.0;
                }
            }
        }
        let report = evaluate(&preds, &sc);
        // independent re-computation, mode by mode
        for am in &report.per_agent {
            let ap = preds
                .agents
                .iter()
                .find(|a| a.agent_index == am.agent_index)
                .unwrap();
            let agent = &sc.agents[am.agent_index];
            let gt = crate::training::track_to_local(
                &agent.current_pose(),
                agent.future.as_ref().unwrap(),
            );
            let mut ades = Vec::new();
            let mut fdes = Vec::new();
            for m in &ap.modes {
                let mut sum = 0.0;
                let mut count = 0;
                let mut fde = None;
                for t in 0..gt.valid.len() {
                    if gt.valid[t] {
                        let d = (m.steps[t].mu_x - gt.x[t]).hypot(m.steps[t].mu_y - gt.y[t]);
                        sum += d;
                        count += 1;
                        fde = Some(d);
                    }
                }
                ades.push(sum / count as f64);
                fdes.push(fde.unwrap());
            }
            let want_ade = ades.iter().cloned().fold(f64::INFINITY, f64::min);
            let want_fde = fdes.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((am.min_ade - want_ade).abs() < 1e-12);
            assert!((am.min_fde - want_fde).abs() < 1e-12);
            assert_eq!(am.missed, want_fde > MISS_THRESHOLD_M);
        }
    }
}
