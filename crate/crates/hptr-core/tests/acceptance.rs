//! Acceptance suite: one test per claim, each printing a pass line with the
//! measured quantity. Run with `cargo test --test acceptance -- --nocapture`
//! to see every line.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hptr_core::bench::{bench_scaling, BenchMode, BenchOptions};
use hptr_core::encoding::rpe;
use hptr_core::geometry::{knn_indices, relative_pose, NeighborIndex, Pose2};
use hptr_core::knarpe::{attend_param_shapes, knarpe_attend, KnarpeConfig};
use hptr_core::model::{
    forward_flops, init_weights, predict, predictions_to_global, LayerCounts, ModePrediction,
    ModelConfig, PredStep, Topology,
};
use hptr_core::nn::NetCtx;
use hptr_core::runtime::{nms_confidences, softmax_temperature, Session};
use hptr_core::scenario::{generate_synthetic, Scenario, SynthConfig};
use hptr_core::tensor::Tensor;
use hptr_core::training::{
    cos_loss, gradcheck_tiny, huber, min_ade, nll_gaussian_2d, total_loss, toy_train,
};
use hptr_core::weights::{xavier_uniform, WeightStore};
use hptr_core::Scalar;

fn rand_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose2 {
    Pose2::new(
        (rng.gen::<f64>() - 0.5) * scale,
        (rng.gen::<f64>() - 0.5) * scale,
        (rng.gen::<f64>() - 0.5) * TAU,
    )
}

/// A desk-scale configuration: full stage structure, small hidden size.
fn desk_cfg() -> ModelConfig {
    ModelConfig {
        dim_d: 16,
        heads: 2,
        ff_dim: 32,
        dropout_p: 0.0,
        k: 8,
        gamma_tl: 2,
        gamma_ag: 2,
        gamma_ac: 3,
        n_ac: 6,
        layers: LayerCounts {
            intra_mp: 2,
            intra_tl: 1,
            intra_ag: 1,
            enhance_tl: 1,
            enhance_ag: 1,
            all2all: 2,
            ac2all: 1,
        },
        topology: Topology::LowerTri,
        t_future: 8,
        ..ModelConfig::default()
    }
}

fn fixture(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    Scenario::load(&path).expect("fixture loads")
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence of KNARPE against dense RPE-augmented attention
// ---------------------------------------------------------------------------

/// Dense oracle over all pairs in f64, no gathers, no neighbor machinery.
#[allow(clippy::too_many_arguments)]
fn dense_rpe_attention(
    store: &WeightStore<f64>,
    cfg: &KnarpeConfig,
    src_attr: &[f64],
    tgt_attr: &[f64],
    src_poses: &[Pose2],
    tgt_poses: &[Pose2],
    tgt_valid: &[bool],
) -> Vec<f64> {
    let d = cfg.dim_d;
    let dh = d / cfg.heads;
    let w = |n: &str| store.get(&format!("a.{n}")).unwrap().data();
    let affine = |x: &[f64], wm: &[f64], b: &[f64], din: usize| -> Vec<f64> {
        let mut out = b.to_vec();
        for p in 0..din {
            for j in 0..d {
                out[j] += x[p] * wm[p * d + j];
            }
        }
        out
    };
    let mut out = vec![0.0; src_poses.len() * d];
    for i in 0..src_poses.len() {
        let q = affine(&src_attr[i * d..(i + 1) * d], w("wq"), w("bq"), d);
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for j in 0..tgt_poses.len() {
            let mut k = affine(&tgt_attr[j * d..(j + 1) * d], w("wk"), w("bk"), d);
            let mut v = affine(&tgt_attr[j * d..(j + 1) * d], w("wv"), w("bv"), d);
            let e = rpe(&relative_pose(&src_poses[i], &tgt_poses[j]), &cfg.enc);
            let kr = affine(&e, w("wkr"), w("bkr"), 3 * d);
            let vr = affine(&e, w("wvr"), w("bvr"), 3 * d);
            for c in 0..d {
                k[c] += kr[c];
                v[c] += vr[c];
            }
            keys.push(k);
            vals.push(v);
        }
        for head in 0..cfg.heads {
            let lo = head * dh;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| (0..dh).map(|c| q[lo + c] * k[lo + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = (0..logits.len())
                .filter(|&j| tgt_valid[j])
                .map(|j| logits[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            let mut alphas = vec![0.0; logits.len()];
            for j in 0..logits.len() {
                if tgt_valid[j] {
                    alphas[j] = (logits[j] - mx).exp();
                    den += alphas[j];
                }
            }
            for (j, v) in vals.iter().enumerate() {
                let a = alphas[j] / den;
                for c in 0..dh {
                    out[i * d + lo + c] += a * v[lo + c];
                }
            }
        }
    }
    out
}

#[test]
fn criterion_01_knarpe_matches_dense_oracle() {
    let start = Instant::now();
    let enc = hptr_core::encoding::EncodingConfig::new(32, 1000.0).unwrap();
    let cfg = KnarpeConfig {
        dim_d: 32,
        heads: 4,
        ff_dim: 64,
        dropout_p: 0.0,
        enc,
        scale: Default::default(),
    };
    let mut shapes = Vec::new();
    attend_param_shapes("a", &cfg, &mut shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut store = WeightStore::<f64>::new();
    for (name, shape) in &shapes {
        let (fi, fo) = (shape[0], *shape.last().unwrap());
        store.insert(
            name.clone(),
            xavier_uniform(shape.clone(), fi, fo, 1.0, &mut rng),
        );
    }
    let store32: WeightStore<f32> = store.cast();

    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let m = rng.gen_range(1..=64);
        let n = rng.gen_range(1..=64);
        let src_poses: Vec<Pose2> = (0..m).map(|_| rand_pose(&mut rng, 60.0)).collect();
        let tgt_poses: Vec<Pose2> = (0..n).map(|_| rand_pose(&mut rng, 60.0)).collect();
        let src: Vec<f64> = (0..m * 32).map(|_| rng.gen::<f64>() - 0.5).collect();
        let tgt: Vec<f64> = (0..n * 32).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.85)).collect();
        if valid.iter().all(|v| !v) {
            valid[0] = true;
        }
        // K = total token count: the neighborhood is the whole valid set
        let nn = knn_indices(&src_poses, &tgt_poses, &valid, n).unwrap();
        let mut ctx = NetCtx::inference(&store32);
        let s = ctx
            .graph
            .constant(Tensor::from_f64(vec![m, 32], &src).unwrap());
        let t = ctx
            .graph
            .constant(Tensor::from_f64(vec![n, 32], &tgt).unwrap());
        let got = knarpe_attend(&mut ctx, s, t, &src_poses, &tgt_poses, &nn, "a", &cfg).unwrap();
        let want = dense_rpe_attention(&store, &cfg, &src, &tgt, &src_poses, &tgt_poses, &valid);
        for (g, w) in ctx.graph.value(got.out).data().iter().zip(&want) {
            let err = (g.as_f64() - w).abs();
            worst = worst.max(err);
            assert!(err < 1e-5, "trial {trial}: {g} vs {w}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(
        secs < 60.0,
        "criterion 1 exceeded its runtime budget: {secs:.1} s"
    );
    println!("criterion 01 PASS: knarpe == dense oracle on 50 instances (worst |err| {worst:.2e} < 1e-5, {secs:.1} s)");
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness of the full model on a tiny configuration
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_full_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let report = gradcheck_tiny(7, 1e-5, 1e-4).unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.pass(),
        "worst parameter {} at rel err {:.3e}",
        worst.name,
        worst.max_rel_err
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(
        secs < 300.0,
        "criterion 2 exceeded its runtime budget: {secs:.1} s"
    );
    println!(
        "criterion 02 PASS: all {} parameter tensors match central differences (worst {} at {:.2e} < 1e-4, {secs:.1} s)",
        report.params.len(),
        worst.name,
        worst.max_rel_err
    );
}

// ---------------------------------------------------------------------------
// 3. Rigid equivariance of global-frame predictions
// ---------------------------------------------------------------------------

fn transform_scenario(sc: &Scenario, g: &Pose2) -> Scenario {
    let mut out = sc.clone();
    for p in &mut out.map {
        for n in p.nodes.iter_mut() {
            *n = g.local_to_global(*n);
        }
        for d in p.dirs.iter_mut() {
            *d = g.rotate_to_global(*d);
        }
    }
    for l in &mut out.lights {
        let q = g.local_to_global([l.x, l.y]);
        l.x = q[0];
        l.y = q[1];
        l.theta = hptr_core::geometry::wrap_angle(l.theta + g.theta()).unwrap();
    }
    for a in &mut out.agents {
        for s in &mut a.history {
            let p = g.local_to_global([s.x, s.y]);
            let v = g.rotate_to_global([s.vx, s.vy]);
            s.x = p[0];
            s.y = p[1];
            s.vx = v[0];
            s.vy = v[1];
            s.theta = hptr_core::geometry::wrap_angle(s.theta + g.theta()).unwrap();
        }
    }
    out
}

fn equivariance_deviation<S: hptr_core::scalar::Scalar>(seeds: u64) -> f64 {
    let cfg = ModelConfig {
        k: 6,
        ..ModelConfig::tiny(4)
    };
    let weights: WeightStore<S> = init_weights(&cfg, 77);
    let sc = fixture("intersection.json");
    let base = predict(&weights, &sc, &cfg).unwrap();
    let base_global: Vec<_> = base
        .agents
        .iter()
        .map(|a| predictions_to_global(a, &sc.agents[a.agent_index].current_pose()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seeds);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let g = rand_pose(&mut rng, 200.0);
        let moved = transform_scenario(&sc, &g);
        let preds = predict(&weights, &moved, &cfg).unwrap();
        for (pa, ba) in preds.agents.iter().zip(&base_global) {
            let pg = predictions_to_global(pa, &moved.agents[pa.agent_index].current_pose());
            for (pm, bm) in pg.modes.iter().zip(&ba.modes) {
                for (ps, bs) in pm.steps.iter().zip(&bm.steps) {
                    let want = g.local_to_global([bs.mu_x, bs.mu_y]);
                    let dev = (ps.mu_x - want[0]).hypot(ps.mu_y - want[1]);
                    worst = worst.max(dev);
                }
            }
        }
    }
    worst
}

#[test]
fn criterion_03_rigid_equivariance_in_both_precisions() {
    let dev32 = equivariance_deviation::<f32>(1003);
    assert!(dev32 < 1e-3, "f32 deviation {dev32:.3e} m");
    let dev64 = equivariance_deviation::<f64>(1003);
    assert!(dev64 < 1e-6, "f64 deviation {dev64:.3e} m");
    println!(
        "criterion 03 PASS: 20 rigid transforms, worst deviation {dev32:.2e} m (f32, < 1e-3) / {dev64:.2e} m (f64, < 1e-6)"
    );
}

// ---------------------------------------------------------------------------
// 4. KNN against a full-sort oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_knn_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    for _ in 0..1000 {
        let m = rng.gen_range(1..8);
        let n = rng.gen_range(1..30);
        let k = rng.gen_range(1..10);
        let queries: Vec<Pose2> = (0..m).map(|_| rand_pose(&mut rng, 40.0)).collect();
        let targets: Vec<Pose2> = (0..n).map(|_| rand_pose(&mut rng, 40.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
        if valid.iter().all(|v| !v) {
            valid[rng.gen_range(0..n)] = true;
        }
        let got = knn_indices(&queries, &targets, &valid, k).unwrap();

        // full-sort oracle with explicit (distance, index) ordering
        let mut idx = vec![0usize; m * k];
        let mut val = vec![false; m * k];
        for (q, qp) in queries.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| valid[j])
                .map(|j| (qp.planar_dist_sq(&targets[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (slot, &(_, j)) in all.iter().take(k).enumerate() {
                idx[q * k + slot] = j;
                val[q * k + slot] = true;
            }
        }
        let want = NeighborIndex {
            queries: m,
            k,
            idx,
            valid: val,
        };
        assert_eq!(got, want);
    }
    println!("criterion 04 PASS: 1000 random pose sets identical to the full-sort oracle");
}

// ---------------------------------------------------------------------------
// 5. Cache soundness and cached-step latency over a 100-step stream
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_stream_cache_soundness_and_latency() {
    let cfg = desk_cfg();
    let weights = init_weights::<f32>(&cfg, 55);
    let sc = hptr_core::bench::bench_scenario(1024, 64, 1005, cfg.t_future);
    assert_eq!(sc.map.len(), 1024);
    assert_eq!(sc.agents.len(), 64);

    // offline reference and its latency (median of 5)
    let mut offline_ms = Vec::new();
    let mut offline = None;
    for _ in 0..5 {
        let t0 = Instant::now();
        offline = Some(predict(&weights, &sc, &cfg).unwrap());
        offline_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    offline_ms.sort_by(f64::total_cmp);
    let offline_ms = offline_ms[2];
    let offline = offline.unwrap();

    let mut session = Session::init(&sc.map, sc.meta.dt, &weights, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for step in 0..100 {
        let (preds, _) = session.step(&sc.lights, &sc.agents).unwrap();
        for (pa, oa) in preds.agents.iter().zip(&offline.agents) {
            for (pm, om) in pa.modes.iter().zip(&oa.modes) {
                worst = worst.max((pm.confidence - om.confidence).abs());
                for (ps, os) in pm.steps.iter().zip(&om.steps) {
                    worst = worst.max((ps.mu_x - os.mu_x).abs());
                    worst = worst.max((ps.mu_y - os.mu_y).abs());
                }
            }
        }
        assert!(worst < 1e-5, "step {step} deviates from offline by {worst}");
    }
    let cached: Vec<f64> = session
        .timing_log
        .iter()
        .filter(|t| !t.tl_recomputed)
        .map(|t| t.micros as f64 / 1e3)
        .collect();
    let mean_cached = cached.iter().sum::<f64>() / cached.len() as f64;
    let ratio = mean_cached / offline_ms;
    assert!(
        ratio <= 0.7,
        "cached step {mean_cached:.1} ms vs offline {offline_ms:.1} ms = {ratio:.2}"
    );
    println!(
        "criterion 05 PASS: 100 streamed steps match offline (worst dev {worst:.2e} < 1e-5); cached {mean_cached:.1} ms / offline {offline_ms:.1} ms = {ratio:.2} <= 0.7"
    );
}

// ---------------------------------------------------------------------------
// 6. Context-memory scaling trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_context_memory_scaling_trend() {
    let cfg = desk_cfg();
    let counts = [8usize, 16, 32, 64];
    let opts = BenchOptions {
        repeats: 20,
        warmup: 1,
    };
    let weights_pr = init_weights::<f32>(&cfg, 66);
    let pr = bench_scaling(
        &weights_pr,
        &cfg,
        BenchMode::PairwiseRelative,
        &counts,
        1024,
        1006,
        &opts,
    )
    .unwrap();
    let cfg_ac = ModelConfig {
        topology: Topology::Full,
        ..cfg
    };
    let weights_ac = init_weights::<f32>(&cfg_ac, 66);
    let ac = bench_scaling(
        &weights_ac,
        &cfg,
        BenchMode::AgentCentricEmulation,
        &counts,
        1024,
        1006,
        &opts,
    )
    .unwrap();
    for w in ac.windows(2) {
        let ratio = w[1].context_bytes as f64 / w[0].context_bytes as f64;
        assert!(
            ratio >= 1.8,
            "agent-centric context grew only {ratio:.2}x from {} to {} agents",
            w[0].n_agents,
            w[1].n_agents
        );
    }
    for w in pr.windows(2) {
        let ratio = w[1].context_bytes as f64 / w[0].context_bytes as f64;
        assert!(
            ratio < 1.2,
            "pairwise-relative context grew {ratio:.2}x from {} to {} agents",
            w[0].n_agents,
            w[1].n_agents
        );
    }
    let ac_total = ac.last().unwrap().context_bytes as f64 / ac[0].context_bytes as f64;
    let pr_total = pr.last().unwrap().context_bytes as f64 / pr[0].context_bytes as f64;
    println!(
        "criterion 06 PASS: 8->64 agents grows agent-centric context {ac_total:.1}x (>= 1.8x per doubling) vs pairwise-relative {pr_total:.2}x (< 1.2x per doubling)"
    );
}

// ---------------------------------------------------------------------------
// 7. Loss unit values
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_loss_unit_values() {
    let lpos = nll_gaussian_2d(2.0, -1.0, 0.0, 0.0, 0.0, 2.0, -1.0);
    assert!((lpos - TAU.ln()).abs() < 1e-6, "{lpos}");
    assert_eq!(huber(0.5, 1.0), 0.125);
    assert_eq!(huber(2.0, 1.0), 1.5);
    assert_eq!(cos_loss(0.42, 0.42), -1.0);
    println!(
        "criterion 07 PASS: L_pos(exact mean, unit cov) = {lpos:.6} = log(2 pi); huber(0.5) = 0.125; huber(2) = 1.5; cos_loss at equality = -1"
    );
}

// ---------------------------------------------------------------------------
// 8. Hard-assignment gradient sparsity
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_hard_assignment_gradient_sparsity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    for instance in 0..20 {
        let tf = 4;
        let n_modes = 6;
        let mut sc = generate_synthetic(&SynthConfig {
            seed: 2000 + instance,
            n_lanes: 3,
            n_agents: 1,
            n_lights: 0,
            t_history: 3,
            t_future: tf,
            ..Default::default()
        });
        sc.agents[0].is_target = true;
        sc.agents[0].optimize = true;
        let cfg = ModelConfig {
            n_ac: n_modes,
            ..ModelConfig::tiny(tf)
        };
        // fabricated differentiable head outputs
        let dummy = WeightStore::<f64>::new();
        let mut ctx = NetCtx::training(&dummy, 0.0, 0);
        let rows: Vec<f64> = (0..n_modes * tf)
            .flat_map(|_| {
                vec![
                    rng.gen::<f64>() * 4.0,
                    rng.gen::<f64>() * 4.0,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    (rng.gen::<f64>() - 0.5) * 1.5,
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                ]
            })
            .collect();
        let traj = ctx.graph.leaf(
            Tensor::from_f64(vec![n_modes, tf * 9], &rows).unwrap(),
            true,
        );
        let logits: Vec<f64> = (0..n_modes).map(|_| rng.gen()).collect();
        let conf = ctx
            .graph
            .leaf(Tensor::from_f64(vec![1, n_modes], &logits).unwrap(), true);
        let heads = hptr_core::model::HeadOutputs {
            conf_logits: conf,
            traj,
            targets: vec![0],
        };
        let total = total_loss(&mut ctx, &heads, &sc, &cfg).unwrap();
        ctx.graph.backward(total.loss).unwrap();
        let grad = ctx.graph.grad(traj).unwrap();
        let chosen = total.report.chosen[0].1;
        for m in 0..n_modes {
            let g = &grad[m * tf * 9..(m + 1) * tf * 9];
            if m == chosen {
                assert!(g.iter().any(|v| *v != 0.0));
            } else {
                assert!(
                    g.iter().all(|v| *v == 0.0),
                    "instance {instance}: mode {m} has nonzero gradient"
                );
            }
        }
    }
    println!(
        "criterion 08 PASS: 20 instances, only the assigned mode carries trajectory gradients (others exactly zero)"
    );
}

// ---------------------------------------------------------------------------
// 9. Overfit smoke test
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_overfit_smoke_test() {
    let start = Instant::now();
    let scenarios: Vec<Scenario> = (0..8)
        .map(|i| {
            generate_synthetic(&SynthConfig {
                seed: 3000 + i,
                n_lanes: 6,
                n_agents: 2,
                n_lights: 2,
                t_history: 5,
                t_future: 8,
                speed_range: (2.0, 6.0),
                ..Default::default()
            })
        })
        .collect();
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..ModelConfig::tiny(8)
    };
    // epoch budget validated at 1500 epochs reaching ~0.34 m; 2000 for margin
    let (weights, curve) = toy_train(&scenarios, &cfg, 2000, 1e-4, 0).unwrap();

    let mut violations = 0;
    for w in curve[..10].windows(2) {
        if w[1].l_total > w[0].l_total {
            violations += 1;
        }
    }
    assert!(
        violations <= 1,
        "{violations} non-monotone steps in the first 10 epochs"
    );

    let mut ade = 0.0;
    for sc in &scenarios {
        let preds = predict(&weights, sc, &cfg).unwrap();
        ade += min_ade(&preds, sc) / scenarios.len() as f64;
    }
    assert!(
        ade < 0.5,
        "minADE {ade:.3} m after the validated epoch budget"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(
        secs < 900.0,
        "criterion 9 exceeded its runtime budget: {secs:.1} s"
    );
    println!(
        "criterion 09 PASS: overfit on 8 scenarios reaches minADE {ade:.3} m < 0.5 m in 2000 epochs ({secs:.0} s); first-10-epoch violations {violations} <= 1"
    );
}

// ---------------------------------------------------------------------------
// 10. Post-processing
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_post_processing() {
    // chain A~B, B~C, A!~C with confidences 0.5, 0.3, 0.2
    let mode = |conf: f64, x: f64| ModePrediction {
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
    };
    let pred = hptr_core::model::AgentPrediction {
        agent_index: 0,
        modes: vec![mode(0.5, 0.0), mode(0.3, 2.0), mode(0.2, 4.0)],
    };
    let out = nms_confidences(&pred, 0); // vehicle threshold 2.5 m
    assert!(out.modes[0].confidence > 0.0, "A survives");
    assert_eq!(out.modes[1].confidence, 0.0, "B suppressed");
    assert!(out.modes[2].confidence > 0.0, "C survives");
    assert_eq!(out.modes[1].steps, pred.modes[1].steps);

    let conf = softmax_temperature(&[1.0, 0.0], 0.5).unwrap();
    assert!((conf[0] - 0.8808).abs() < 1e-4);
    assert!((conf[1] - 0.1192).abs() < 1e-4);
    println!(
        "criterion 10 PASS: NMS chain keeps {{A, C}}; softmax_temperature(1, 0; tau=0.5) = ({:.4}, {:.4})",
        conf[0], conf[1]
    );
}

// ---------------------------------------------------------------------------
// 11. Topology ablations
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_topology_ablations() {
    let fixtures = ["intersection.json", "arterial.json", "no_lights.json"];
    for topology in [
        Topology::LowerTri,
        Topology::Diag,
        Topology::Full,
        Topology::DiagFull,
    ] {
        let cfg = ModelConfig {
            topology,
            ..ModelConfig::tiny(8)
        };
        let weights = init_weights::<f32>(&cfg, 11);
        for name in fixtures {
            let sc = fixture(name);
            let preds = predict(&weights, &sc, &cfg).unwrap();
            for a in &preds.agents {
                assert!(a.modes.iter().all(|m| {
                    m.confidence.is_finite()
                        && m.steps
                            .iter()
                            .all(|s| s.mu_x.is_finite() && s.mu_y.is_finite())
                }));
            }
        }
    }
    // analytic forward multiply counts at the full-scale default config
    let lower = forward_flops(&ModelConfig::default(), 1024, 40, 64, 8);
    let diag_full = forward_flops(
        &ModelConfig {
            topology: Topology::DiagFull,
            ..ModelConfig::default()
        },
        1024,
        40,
        64,
        8,
    );
    assert!(lower < diag_full, "{lower} !< {diag_full}");
    println!(
        "criterion 11 PASS: all four topologies finite on the fixture corpus; lower_tri forward FLOPs {lower} < diag_full {diag_full} at default config"
    );
}
