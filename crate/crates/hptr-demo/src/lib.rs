//! Browser demo bindings: generate a synthetic scene, run the predictor,
//! and inspect k-nearest-neighbor attention neighborhoods, all returned as
//! JSON strings for a canvas front end.
//!
//! Build for the web with `wasm-pack build --target web` (or cargo +
//! `wasm-bindgen-cli`); the same functions compile natively for tests.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use hptr_core::geometry::knn_indices;
use hptr_core::model::{init_weights, predict, predictions_to_global, ModelConfig, Topology};
use hptr_core::polyline::map_token_pose;
use hptr_core::scenario::{generate_synthetic, Scenario, SynthConfig};

fn demo_scenario(seed: u64, n_lanes: usize, n_agents: usize, arc_fraction: f64) -> Scenario {
    generate_synthetic(&SynthConfig {
        seed,
        n_lanes: n_lanes.clamp(2, 64),
        n_agents: n_agents.clamp(1, 16),
        arc_fraction: arc_fraction.clamp(0.0, 1.0),
        n_lights: (n_lanes / 3).clamp(1, 8),
        t_history: 8,
        t_future: 24,
        speed_range: (2.0, 9.0),
        ..Default::default()
    })
}

fn demo_config(topology: Topology) -> ModelConfig {
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
        layers: hptr_core::model::LayerCounts {
            intra_mp: 2,
            intra_tl: 1,
            intra_ag: 1,
            enhance_tl: 1,
            enhance_ag: 1,
            all2all: 2,
            ac2all: 1,
        },
        topology,
        t_future: 24,
        ..ModelConfig::default()
    }
}

#[derive(Serialize)]
struct SceneJson {
    lanes: Vec<LaneJson>,
    lights: Vec<LightJson>,
    agents: Vec<AgentJson>,
}

#[derive(Serialize)]
struct LaneJson {
    pts: Vec<[f64; 2]>,
    lane_type: usize,
}

#[derive(Serialize)]
struct LightJson {
    x: f64,
    y: f64,
    state: usize,
}

#[derive(Serialize)]
struct AgentJson {
    history: Vec<[f64; 2]>,
    x: f64,
    y: f64,
    heading: f64,
    agent_type: usize,
    is_target: bool,
    future: Vec<[f64; 2]>,
}

fn scene_to_json(sc: &Scenario) -> SceneJson {
    SceneJson {
        lanes: sc
            .map
            .iter()
            .map(|p| LaneJson {
                pts: p.nodes.clone(),
                lane_type: p.lane_type,
            })
            .collect(),
        lights: sc
            .lights
            .iter()
            .map(|l| LightJson {
                x: l.x,
                y: l.y,
                state: l.state,
            })
            .collect(),
        agents: sc
            .agents
            .iter()
            .map(|a| {
                let cur = a.current();
                AgentJson {
                    history: a
                        .history
                        .iter()
                        .filter(|s| s.valid)
                        .map(|s| [s.x, s.y])
                        .collect(),
                    x: cur.x,
                    y: cur.y,
                    heading: cur.theta,
                    agent_type: a.agent_type,
                    is_target: a.is_target,
                    future: a
                        .future
                        .iter()
                        .flatten()
                        .filter(|s| s.valid)
                        .map(|s| [s.x, s.y])
                        .collect(),
                }
            })
            .collect(),
    }
}

/// Synthetic scene geometry for rendering.
pub fn scene_json(seed: u64, n_lanes: usize, n_agents: usize, arc_fraction: f64) -> String {
    let sc = demo_scenario(seed, n_lanes, n_agents, arc_fraction);
    serde_json::to_string(&scene_to_json(&sc)).expect("serializable")
}

#[derive(Serialize)]
struct PredictionsJson {
    scene: SceneJson,
    predictions: Vec<AgentModesJson>,
}

#[derive(Serialize)]
struct AgentModesJson {
    agent_index: usize,
    modes: Vec<ModeJson>,
}

#[derive(Serialize)]
struct ModeJson {
    confidence: f64,
    points: Vec<[f64; 2]>,
}

/// Scene plus the model's multi-modal global-frame trajectories. Weights are
/// freshly initialized from `weight_seed`, so this explores the architecture
/// rather than a trained checkpoint.
pub fn predict_json(
    seed: u64,
    weight_seed: u64,
    topology: &str,
    n_lanes: usize,
    n_agents: usize,
) -> Result<String, String> {
    let topology =
        Topology::parse(topology).ok_or_else(|| format!("unknown topology {topology:?}"))?;
    let sc = demo_scenario(seed, n_lanes, n_agents, 0.4);
    let cfg = demo_config(topology);
    let weights = init_weights::<f32>(&cfg, weight_seed);
    let preds = predict(&weights, &sc, &cfg).map_err(|e| e.to_string())?;
    let predictions = preds
        .agents
        .iter()
        .map(|a| {
            let pose = sc.agents[a.agent_index].current_pose();
            let global = predictions_to_global(a, &pose);
            AgentModesJson {
                agent_index: a.agent_index,
                modes: global
                    .modes
                    .iter()
                    .map(|m| ModeJson {
                        confidence: m.confidence,
                        points: m.steps.iter().map(|s| [s.mu_x, s.mu_y]).collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    let out = PredictionsJson {
        scene: scene_to_json(&sc),
        predictions,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct KnnJson {
    tokens: Vec<TokenJson>,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct TokenJson {
    x: f64,
    y: f64,
    cls: &'static str,
}

/// Agent-token neighborhoods over every polyline token, for a given K.
pub fn knn_json(seed: u64, k: usize, n_lanes: usize, n_agents: usize) -> Result<String, String> {
    let sc = demo_scenario(seed, n_lanes, n_agents, 0.4);
    let mut tokens = Vec::new();
    let mut poses = Vec::new();
    for p in &sc.map {
        let pose = map_token_pose(p);
        tokens.push(TokenJson {
            x: pose.x,
            y: pose.y,
            cls: "map",
        });
        poses.push(pose);
    }
    for l in &sc.lights {
        tokens.push(TokenJson {
            x: l.x,
            y: l.y,
            cls: "light",
        });
        poses.push(l.stop_point());
    }
    let agent_start = poses.len();
    for a in &sc.agents {
        let pose = a.current_pose();
        tokens.push(TokenJson {
            x: pose.x,
            y: pose.y,
            cls: "agent",
        });
        poses.push(pose);
    }
    let queries = &poses[agent_start..];
    let valid = vec![true; poses.len()];
    let nn =
        knn_indices(queries, &poses, &valid, k.clamp(1, poses.len())).map_err(|e| e.to_string())?;
    let mut edges = Vec::new();
    for q in 0..queries.len() {
        for slot in 0..nn.k {
            let (j, ok) = nn.at(q, slot);
            if ok {
                edges.push([agent_start + q, j]);
            }
        }
    }
    serde_json::to_string(&KnnJson { tokens, edges }).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// wasm exports
// ---------------------------------------------------------------------------

#[wasm_bindgen(js_name = sceneJson)]
pub fn wasm_scene_json(seed: u32, n_lanes: u32, n_agents: u32, arc_fraction: f64) -> String {
    scene_json(
        seed as u64,
        n_lanes as usize,
        n_agents as usize,
        arc_fraction,
    )
}

#[wasm_bindgen(js_name = predictJson)]
pub fn wasm_predict_json(
    seed: u32,
    weight_seed: u32,
    topology: String,
    n_lanes: u32,
    n_agents: u32,
) -> Result<String, JsValue> {
    predict_json(
        seed as u64,
        weight_seed as u64,
        &topology,
        n_lanes as usize,
        n_agents as usize,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = knnJson)]
pub fn wasm_knn_json(seed: u32, k: u32, n_lanes: u32, n_agents: u32) -> Result<String, JsValue> {
    knn_json(seed as u64, k as usize, n_lanes as usize, n_agents as usize)
        .map_err(|e| JsValue::from_str(&e))
}
