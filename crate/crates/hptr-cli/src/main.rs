//! Command-line front end: scenario generation, offline prediction,
//! streaming sessions, gradient checking, toy training, benchmarks and
//! metric evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hptr_core::bench::{bench_csv, bench_scaling, BenchMode, BenchOptions};
use hptr_core::model::{init_weights, predict, ModelConfig, PredictionSet, Topology};
use hptr_core::runtime::{
    apply_temperature, evaluate, nms_prediction_set, timing_log_csv, Session,
};
use hptr_core::scalar::Scalar;
use hptr_core::scenario::{generate_synthetic, Scenario, SynthConfig};
use hptr_core::training::{gradcheck_tiny, loss_curve_csv, min_ade, toy_train};
use hptr_core::weights::WeightStore;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hptr",
    about = "Pairwise-relative polyline transformer for trajectory prediction",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    #[value(name = "lower_tri")]
    LowerTri,
    Diag,
    Full,
    #[value(name = "diag_full")]
    DiagFull,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::LowerTri => Topology::LowerTri,
            TopologyArg::Diag => Topology::Diag,
            TopologyArg::Full => Topology::Full,
            TopologyArg::DiagFull => Topology::DiagFull,
        }
    }
}

/// Flags shared by every model-running subcommand.
#[derive(Args)]
struct ModelArgs {
    /// JSON model configuration; defaults to the desk-scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention-matrix topology override.
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
    /// Floating-point precision of the forward pass.
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Weight file; freshly initialized from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenario files.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        lanes: usize,
        #[arg(long, default_value_t = 8)]
        agents: usize,
        #[arg(long, default_value_t = 4)]
        lights: usize,
        #[arg(long = "t-history", default_value_t = 11)]
        t_history: usize,
        #[arg(long = "t-future", default_value_t = 80)]
        t_future: usize,
        /// Number of files; seeds increment from --seed.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output file (one scenario) or directory (with --count > 1).
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline forward pass with metrics and optional post-processing.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scenario: PathBuf,
        /// Apply confidence non-maximum suppression.
        #[arg(long, default_value_t = false)]
        nms: bool,
        /// Replace confidences with a temperature softmax.
        #[arg(long)]
        temperature: Option<f64>,
        /// Write the full prediction set as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Streaming session over repeated queries of one scenario.
    Stream {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Write the per-step latency log to this path instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Overfit a small model on synthetic scenarios.
    TrainToy {
        /// Directory of scenario files; generated synthetically when absent.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        synthetic: usize,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-weights")]
        out_weights: Option<PathBuf>,
        /// Loss-curve CSV output path (stdout when absent).
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Scaling benchmark across agent counts.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated agent counts.
        #[arg(long, default_value = "8,16,32,64")]
        agents: String,
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long, default_value_t = 1024)]
        lanes: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Displacement metrics of a model on a scenario with ground truth.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: msg.to_string(),
        }
    }
    fn numerical(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: msg.to_string(),
        }
    }
}

fn load_config(args: &ModelArgs) -> Result<ModelConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(CliError::validation)?;
            serde_json::from_str(&text).map_err(CliError::validation)?
        }
        None => ModelConfig::desk_scale(),
    };
    if let Some(t) = args.topology {
        cfg.topology = t.into();
    }
    cfg.validate().map_err(CliError::validation)?;
    Ok(cfg)
}

fn load_or_init_weights<S: Scalar>(
    args: &ModelArgs,
    cfg: &ModelConfig,
) -> Result<WeightStore<S>, CliError> {
    match &args.weights {
        Some(path) => WeightStore::load(Path::new(path)).map_err(CliError::validation),
        None => Ok(init_weights(cfg, args.seed)),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    Scenario::load(path).map_err(CliError::validation)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(CliError::validation),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_finite(preds: &PredictionSet) -> Result<(), CliError> {
    for a in &preds.agents {
        for m in &a.modes {
            if !m.confidence.is_finite()
                || m.steps
                    .iter()
                    .any(|s| !s.mu_x.is_finite() || !s.mu_y.is_finite())
            {
                return Err(CliError::numerical(format!(
                    "non-finite prediction for agent {}",
                    a.agent_index
                )));
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            seed,
            lanes,
            agents,
            lights,
            t_history,
            t_future,
            count,
            out,
        } => {
            for i in 0..count {
                let sc = generate_synthetic(&SynthConfig {
                    seed: seed + i as u64,
                    n_lanes: lanes,
                    n_agents: agents,
                    n_lights: lights,
                    t_history,
                    t_future,
                    ..Default::default()
                });
                sc.validate().map_err(CliError::validation)?;
                let path = if count == 1 {
                    out.clone()
                } else {
                    std::fs::create_dir_all(&out).map_err(CliError::validation)?;
                    out.join(format!("scenario_{:03}.json", i))
                };
                sc.save(&path).map_err(CliError::validation)?;
                println!(
                    "wrote {} ({} map polylines, {} lights, {} agents)",
                    path.display(),
                    sc.map.len(),
                    sc.lights.len(),
                    sc.agents.len()
                );
            }
            Ok(())
        }

        Command::Predict {
            model,
            scenario,
            nms,
            temperature,
            out,
        } => {
            let cfg = load_config(&model)?;
            let sc = load_scenario(&scenario)?;
            match model.precision {
                PrecisionArg::F32 => {
                    let w: WeightStore<f32> = load_or_init_weights(&model, &cfg)?;
                    run_predict(&w, &sc, &cfg, nms, temperature, &out)
                }
                PrecisionArg::F64 => {
                    let w: WeightStore<f64> = load_or_init_weights(&model, &cfg)?;
                    run_predict(&w, &sc, &cfg, nms, temperature, &out)
                }
            }
        }

        Command::Stream {
            model,
            scenario,
            steps,
            out,
        } => {
            let cfg = load_config(&model)?;
            let sc = load_scenario(&scenario)?;
            match model.precision {
                PrecisionArg::F32 => {
                    let w: WeightStore<f32> = load_or_init_weights(&model, &cfg)?;
                    run_stream(&w, &sc, &cfg, steps, &out)
                }
                PrecisionArg::F64 => {
                    let w: WeightStore<f64> = load_or_init_weights(&model, &cfg)?;
                    run_stream(&w, &sc, &cfg, steps, &out)
                }
            }
        }

        Command::Gradcheck { seed, tol } => {
            let report = gradcheck_tiny(seed, 1e-5, tol).map_err(CliError::numerical)?;
            for p in &report.params {
                println!(
                    "{}: max_rel_err {:.3e} ({} elements)",
                    p.name, p.max_rel_err, p.elements
                );
            }
            if report.pass() {
                println!("gradcheck PASS (tol {tol:.1e})");
                Ok(())
            } else {
                let worst = report.worst().unwrap();
                Err(CliError::numerical(format!(
                    "gradcheck FAIL: {} at {:.3e} (tol {tol:.1e})",
                    worst.name, worst.max_rel_err
                )))
            }
        }

        Command::TrainToy {
            scenarios,
            synthetic,
            epochs,
            lr,
            seed,
            out_weights,
            curve,
        } => {
            let scenario_set: Vec<Scenario> = match scenarios {
                Some(dir) => {
                    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                        .map_err(CliError::validation)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "json"))
                        .collect();
                    files.sort();
                    files
                        .iter()
                        .map(|p| load_scenario(p))
                        .collect::<Result<_, _>>()?
                }
                None => (0..synthetic)
                    .map(|i| {
                        generate_synthetic(&SynthConfig {
                            seed: seed + i as u64,
                            n_lanes: 6,
                            n_agents: 2,
                            n_lights: 2,
                            t_history: 5,
                            t_future: 8,
                            speed_range: (2.0, 6.0),
                            ..Default::default()
                        })
                    })
                    .collect(),
            };
            let cfg = ModelConfig {
                dropout_p: 0.0,
                ..ModelConfig::tiny(scenario_set[0].meta.t_future)
            };
            let (weights, reports) =
                toy_train(&scenario_set, &cfg, epochs, lr, seed).map_err(CliError::numerical)?;
            write_or_print(&curve, &loss_curve_csv(&reports))?;
            let mut ade = 0.0;
            for sc in &scenario_set {
                let preds = predict(&weights, sc, &cfg).map_err(CliError::numerical)?;
                ade += min_ade(&preds, sc) / scenario_set.len() as f64;
            }
            eprintln!(
                "final training minADE: {ade:.4} m over {} scenarios",
                scenario_set.len()
            );
            if let Some(path) = out_weights {
                weights.save(&path).map_err(CliError::validation)?;
                eprintln!("weights written to {}", path.display());
            }
            Ok(())
        }

        Command::Bench {
            model,
            agents,
            mode,
            lanes,
            repeats,
            out,
        } => {
            let mut cfg = load_config(&model)?;
            // benches default to a faster future horizon unless configured
            if model.config.is_none() {
                cfg.t_future = 8;
            }
            let counts: Vec<usize> = agents
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::validation(format!("--agents: {e}")))?;
            let modes: Vec<BenchMode> = match mode.as_str() {
                "both" => vec![
                    BenchMode::PairwiseRelative,
                    BenchMode::AgentCentricEmulation,
                ],
                "pairwise_relative" => vec![BenchMode::PairwiseRelative],
                "agent_centric_emulation" => vec![BenchMode::AgentCentricEmulation],
                other => {
                    return Err(CliError::validation(format!(
                        "unknown bench mode {other:?}"
                    )))
                }
            };
            let opts = BenchOptions {
                repeats,
                ..Default::default()
            };
            let mut rows = Vec::new();
            for m in modes {
                let run_cfg = match m {
                    BenchMode::PairwiseRelative => cfg,
                    BenchMode::AgentCentricEmulation => ModelConfig {
                        topology: Topology::Full,
                        ..cfg
                    },
                };
                match model.precision {
                    PrecisionArg::F32 => {
                        let w: WeightStore<f32> = init_weights(&run_cfg, model.seed);
                        rows.extend(
                            bench_scaling(&w, &cfg, m, &counts, lanes, model.seed, &opts)
                                .map_err(CliError::numerical)?,
                        );
                    }
                    PrecisionArg::F64 => {
                        let w: WeightStore<f64> = init_weights(&run_cfg, model.seed);
                        rows.extend(
                            bench_scaling(&w, &cfg, m, &counts, lanes, model.seed, &opts)
                                .map_err(CliError::numerical)?,
                        );
                    }
                }
            }
            write_or_print(&out, &bench_csv(&rows))
        }

        Command::Eval { model, scenario } => {
            let cfg = load_config(&model)?;
            let sc = load_scenario(&scenario)?;
            let report = match model.precision {
                PrecisionArg::F32 => {
                    let w: WeightStore<f32> = load_or_init_weights(&model, &cfg)?;
                    let preds = predict(&w, &sc, &cfg).map_err(CliError::numerical)?;
                    check_finite(&preds)?;
                    evaluate(&preds, &sc)
                }
                PrecisionArg::F64 => {
                    let w: WeightStore<f64> = load_or_init_weights(&model, &cfg)?;
                    let preds = predict(&w, &sc, &cfg).map_err(CliError::numerical)?;
                    check_finite(&preds)?;
                    evaluate(&preds, &sc)
                }
            };
            println!("agent_index,min_ade,min_fde,missed");
            for a in &report.per_agent {
                println!(
                    "{},{:.4},{:.4},{}",
                    a.agent_index, a.min_ade, a.min_fde, a.missed
                );
            }
            println!(
                "summary,min_ade={:.4},min_fde={:.4},miss_rate={:.4}",
                report.min_ade, report.min_fde, report.miss_rate
            );
            Ok(())
        }
    }
}

fn run_predict<S: Scalar>(
    weights: &WeightStore<S>,
    sc: &Scenario,
    cfg: &ModelConfig,
    nms: bool,
    temperature: Option<f64>,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let mut preds = predict(weights, sc, cfg).map_err(CliError::numerical)?;
    check_finite(&preds)?;
    if let Some(tau) = temperature {
        preds = apply_temperature(&preds, tau).map_err(CliError::validation)?;
    }
    if nms {
        preds = nms_prediction_set(&preds, sc);
    }
    println!("agent_index,mode,confidence,final_x,final_y");
    for a in &preds.agents {
        for (k, m) in a.modes.iter().enumerate() {
            let last = m.steps.last().expect("t_future > 0");
            println!(
                "{},{},{:.4},{:.3},{:.3}",
                a.agent_index, k, m.confidence, last.mu_x, last.mu_y
            );
        }
    }
    let report = evaluate(&preds, sc);
    if !report.per_agent.is_empty() {
        println!(
            "metrics,min_ade={:.4},min_fde={:.4},miss_rate={:.4}",
            report.min_ade, report.min_fde, report.miss_rate
        );
    }
    if let Some(path) = out {
        let json = serde_json::to_string(&preds).map_err(CliError::validation)?;
        std::fs::write(path, json).map_err(CliError::validation)?;
    }
    Ok(())
}

fn run_stream<S: Scalar>(
    weights: &WeightStore<S>,
    sc: &Scenario,
    cfg: &ModelConfig,
    steps: usize,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    use std::time::Instant;
    // offline reference latency: from-scratch forwards
    let t0 = Instant::now();
    let offline = predict(weights, sc, cfg).map_err(CliError::numerical)?;
    let offline_ms = t0.elapsed().as_secs_f64() * 1e3;
    check_finite(&offline)?;

    let mut session =
        Session::init(&sc.map, sc.meta.dt, weights, cfg).map_err(CliError::validation)?;
    for _ in 0..steps {
        let (preds, _) = session
            .step(&sc.lights, &sc.agents)
            .map_err(CliError::numerical)?;
        check_finite(&preds)?;
    }
    write_or_print(out, &timing_log_csv(&session.timing_log))?;
    let cached: Vec<f64> = session
        .timing_log
        .iter()
        .filter(|t| !t.tl_recomputed)
        .map(|t| t.micros as f64 / 1e3)
        .collect();
    if !cached.is_empty() {
        let mean = cached.iter().sum::<f64>() / cached.len() as f64;
        eprintln!(
            "offline forward {offline_ms:.2} ms; mean cached step {mean:.2} ms ({:.2}x)",
            mean / offline_ms
        );
    }
    Ok(())
}
