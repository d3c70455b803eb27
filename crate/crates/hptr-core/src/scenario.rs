//! Scenario records, their JSON file format, and a synthetic generator.
//!
//! Scenarios are stored as human-inspectable JSON with an explicit schema
//! version. Polygonal map elements (crosswalks and the like) are expected to
//! be pre-split into parallel polylines by whoever authors the file; the
//! encoders only ever see polylines.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2;

/// Lane-type vocabulary size (one-hot width of map polylines).
pub const C_MP: usize = 11;
/// Traffic-light states: stop, caution, go, unknown, flashing.
pub const C_TL: usize = 5;
/// Agent types: vehicle, pedestrian, cyclist.
pub const AGENT_TYPES: usize = 3;
/// Maximum one-meter segments per map polyline.
pub const MAX_NODES: usize = 20;
/// Capacity limits per scenario.
pub const MAX_MAP: usize = 1024;
pub const MAX_TL: usize = 40;
pub const MAX_AG: usize = 64;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("{field}: {detail}")]
    Validation { field: String, detail: String },
    #[error("{field}: {count} exceeds capacity {max}")]
    Capacity {
        field: String,
        count: usize,
        max: usize,
    },
}

fn invalid(field: impl Into<String>, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioMeta {
    pub id: String,
    pub t_history: usize,
    pub t_future: usize,
    /// Sampling period in seconds.
    pub dt: f64,
}

/// A map polyline: up to [`MAX_NODES`] one-meter segments, each a global
/// start position plus unit direction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawMapPolyline {
    pub nodes: Vec<[f64; 2]>,
    pub dirs: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub lane_type: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawTrafficLight {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub state: usize,
}

impl RawTrafficLight {
    pub fn stop_point(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.theta)
    }
}

/// One observed history step of an agent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

/// One ground-truth future step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FutureState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub theta: f64,
    pub speed: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawAgent {
    /// Oldest first; the last entry is the current step (t = 0).
    pub history: Vec<AgentState>,
    /// Length, width, height in meters.
    pub size: [f64; 3],
    pub agent_type: usize,
    pub is_target: bool,
    pub optimize: bool,
    #[serde(default)]
    pub future: Option<Vec<FutureState>>,
}

impl RawAgent {
    pub fn current(&self) -> &AgentState {
        self.history.last().expect("validated non-empty history")
    }

    pub fn current_pose(&self) -> Pose2 {
        let s = self.current();
        Pose2::new(s.x, s.y, s.theta)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scenario {
    pub schema_version: u32,
    pub meta: ScenarioMeta,
    pub map: Vec<RawMapPolyline>,
    pub lights: Vec<RawTrafficLight>,
    pub agents: Vec<RawAgent>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.schema_version));
        }
        let cap = |field: &str, count: usize, max: usize| {
            if count > max {
                Err(ScenarioError::Capacity {
                    field: field.to_string(),
                    count,
                    max,
                })
            } else {
                Ok(())
            }
        };
        cap("map", self.map.len(), MAX_MAP)?;
        cap("lights", self.lights.len(), MAX_TL)?;
        cap("agents", self.agents.len(), MAX_AG)?;
        if self.map.is_empty() {
            return Err(invalid("map", "scenario has no map polylines"));
        }
        if !(self.meta.dt > 0.0 && self.meta.dt.is_finite()) {
            return Err(invalid(
                "meta.dt",
                format!("non-positive dt {}", self.meta.dt),
            ));
        }
        for (i, p) in self.map.iter().enumerate() {
            let f = |s: &str| format!("map[{i}].{s}");
            if p.nodes.len() > MAX_NODES {
                return Err(ScenarioError::Capacity {
                    field: f("nodes"),
                    count: p.nodes.len(),
                    max: MAX_NODES,
                });
            }
            if p.nodes.len() != p.dirs.len() || p.nodes.len() != p.valid.len() {
                return Err(invalid(f("nodes"), "nodes/dirs/valid lengths differ"));
            }
            if !p.valid.iter().any(|v| *v) {
                return Err(invalid(f("valid"), "polyline has no valid node"));
            }
            if p.lane_type >= C_MP {
                return Err(invalid(
                    f("lane_type"),
                    format!("{} out of range (C_MP = {C_MP})", p.lane_type),
                ));
            }
            for (j, (n, d)) in p.nodes.iter().zip(&p.dirs).enumerate() {
                if !(n[0].is_finite() && n[1].is_finite() && d[0].is_finite() && d[1].is_finite()) {
                    return Err(invalid(format!("map[{i}].nodes[{j}]"), "non-finite value"));
                }
            }
        }
        for (i, l) in self.lights.iter().enumerate() {
            if l.state >= C_TL {
                return Err(invalid(
                    format!("lights[{i}].state"),
                    format!("{} out of range (C_TL = {C_TL})", l.state),
                ));
            }
            if !(l.x.is_finite() && l.y.is_finite() && l.theta.is_finite()) {
                return Err(invalid(format!("lights[{i}]"), "non-finite pose"));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            let f = |s: &str| format!("agents[{i}].{s}");
            if a.agent_type >= AGENT_TYPES {
                return Err(invalid(
                    f("agent_type"),
                    format!("{} out of range", a.agent_type),
                ));
            }
            if a.history.len() != self.meta.t_history {
                return Err(invalid(
                    f("history"),
                    format!(
                        "{} steps, expected t_history = {}",
                        a.history.len(),
                        self.meta.t_history
                    ),
                ));
            }
            if !a.history.last().map(|s| s.valid).unwrap_or(false) {
                return Err(invalid(f("history"), "current step (t = 0) must be valid"));
            }
            for (t, s) in a.history.iter().enumerate() {
                if s.valid
                    && !(s.x.is_finite()
                        && s.y.is_finite()
                        && s.theta.is_finite()
                        && s.vx.is_finite()
                        && s.vy.is_finite())
                {
                    return Err(invalid(
                        format!("agents[{i}].history[{t}]"),
                        "non-finite state",
                    ));
                }
            }
            if let Some(fut) = &a.future {
                if fut.len() != self.meta.t_future {
                    return Err(invalid(
                        f("future"),
                        format!(
                            "{} steps, expected t_future = {}",
                            fut.len(),
                            self.meta.t_future
                        ),
                    ));
                }
                if a.optimize && !fut.iter().any(|s| s.valid) {
                    return Err(invalid(
                        f("future"),
                        "optimized agent has no valid future step",
                    ));
                }
            } else if a.optimize {
                return Err(invalid(
                    f("future"),
                    "optimized agent is missing its future",
                ));
            }
        }
        Ok(())
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| self.agents[i].is_target)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario =
            serde_json::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Deterministic synthetic scenario settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_lanes: usize,
    pub n_agents: usize,
    /// Fraction of lanes generated as circular arcs (the rest are straight).
    pub arc_fraction: f64,
    /// Agent speeds are drawn uniformly from this range, m/s.
    pub speed_range: (f64, f64),
    /// Leading fraction of agents marked as prediction targets.
    pub target_fraction: f64,
    pub n_lights: usize,
    pub t_history: usize,
    pub t_future: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_lanes: 12,
            n_agents: 8,
            arc_fraction: 0.4,
            speed_range: (2.0, 12.0),
            target_fraction: 0.5,
            n_lights: 4,
            t_history: 11,
            t_future: 80,
        }
    }
}

struct Lane {
    nodes: Vec<[f64; 2]>,
    /// Heading at each node.
    headings: Vec<f64>,
    /// Per-meter heading change (0 for straight lanes).
    turn_per_meter: f64,
}

/// Generate a scenario with lanes of one-meter segments, unicycle agents and
/// endpoint traffic lights. Identical configs produce byte-identical files.
pub fn generate_synthetic(cfg: &SynthConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = 0.1;

    let mut lanes = Vec::with_capacity(cfg.n_lanes);
    let mut map = Vec::with_capacity(cfg.n_lanes);
    for _ in 0..cfg.n_lanes.min(MAX_MAP) {
        let start = [
            (rng.gen::<f64>() - 0.5) * 120.0,
            (rng.gen::<f64>() - 0.5) * 120.0,
        ];
        let heading = (rng.gen::<f64>() - 0.5) * 2.0 * std::f64::consts::PI;
        let segments = rng.gen_range(6..=(MAX_NODES - 1));
        let is_arc = rng.gen::<f64>() < cfg.arc_fraction;
        let turn = if is_arc {
            // radius 15..60 m, either direction
            let r = rng.gen_range(15.0..60.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign / r
        } else {
            0.0
        };
        let mut nodes = Vec::with_capacity(segments);
        let mut headings = Vec::with_capacity(segments);
        let mut p = start;
        let mut th = heading;
        for _ in 0..segments {
            nodes.push(p);
            headings.push(th);
            p = [p[0] + th.cos(), p[1] + th.sin()];
            th += turn;
        }
        map.push(RawMapPolyline {
            nodes: nodes.clone(),
            dirs: headings.iter().map(|t| [t.cos(), t.sin()]).collect(),
            valid: vec![true; segments],
            lane_type: rng.gen_range(0..C_MP),
        });
        lanes.push(Lane {
            nodes,
            headings,
            turn_per_meter: turn,
        });
    }

    let mut lights = Vec::with_capacity(cfg.n_lights);
    for _ in 0..cfg.n_lights.min(MAX_TL).min(lanes.len()) {
        let lane = &lanes[rng.gen_range(0..lanes.len())];
        let last = lane.nodes.len() - 1;
        lights.push(RawTrafficLight {
            x: lane.nodes[last][0],
            y: lane.nodes[last][1],
            theta: crate::geometry::wrap_angle(lane.headings[last]).unwrap(),
            state: rng.gen_range(0..C_TL),
        });
    }

    let n_targets = ((cfg.n_agents as f64) * cfg.target_fraction).ceil() as usize;
    let mut agents = Vec::with_capacity(cfg.n_agents);
    for a in 0..cfg.n_agents.min(MAX_AG) {
        let lane = &lanes[rng.gen_range(0..lanes.len())];
        let node = rng.gen_range(0..lane.nodes.len());
        let (lo, hi) = cfg.speed_range;
        let speed = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let yaw_rate = lane.turn_per_meter * speed; // follow lane curvature
        let agent_type = match rng.gen::<f64>() {
            p if p < 0.6 => 0,
            p if p < 0.8 => 1,
            _ => 2,
        };
        let base_size: [f64; 3] = match agent_type {
            0 => [4.7, 2.1, 1.7],
            1 => [0.8, 0.8, 1.8],
            _ => [1.9, 0.7, 1.7],
        };
        let size = [
            base_size[0] * (0.9 + 0.2 * rng.gen::<f64>()),
            base_size[1] * (0.9 + 0.2 * rng.gen::<f64>()),
            base_size[2] * (0.9 + 0.2 * rng.gen::<f64>()),
        ];
        let (x0, y0) = (lane.nodes[node][0], lane.nodes[node][1]);
        let th0 = lane.headings[node];

        // Unicycle rollout: backwards for history, forwards for the future.
        let step = |x: f64, y: f64, th: f64, dir: f64| -> (f64, f64, f64) {
            let nx = x + dir * speed * dt * th.cos();
            let ny = y + dir * speed * dt * th.sin();
            (nx, ny, th + dir * yaw_rate * dt)
        };
        let mut history = vec![
            AgentState {
                x: x0,
                y: y0,
                theta: crate::geometry::wrap_angle(th0).unwrap(),
                vx: speed * th0.cos(),
                vy: speed * th0.sin(),
                valid: true,
            };
            cfg.t_history
        ];
        {
            let (mut x, mut y, mut th) = (x0, y0, th0);
            for t in (0..cfg.t_history - 1).rev() {
                // step backwards in time
                th -= yaw_rate * dt;
                let (nx, ny, _) = step(x, y, th, -1.0);
                x = nx;
                y = ny;
                history[t] = AgentState {
                    x,
                    y,
                    theta: crate::geometry::wrap_angle(th).unwrap(),
                    vx: speed * th.cos(),
                    vy: speed * th.sin(),
                    valid: true,
                };
            }
        }
        let mut future = Vec::with_capacity(cfg.t_future);
        {
            let (mut x, mut y, mut th) = (x0, y0, th0);
            for _ in 0..cfg.t_future {
                let (nx, ny, nth) = step(x, y, th, 1.0);
                x = nx;
                y = ny;
                th = nth;
                future.push(FutureState {
                    x,
                    y,
                    vx: speed * th.cos(),
                    vy: speed * th.sin(),
                    theta: crate::geometry::wrap_angle(th).unwrap(),
                    speed,
                    valid: true,
                });
            }
        }
        let is_target = a < n_targets;
        agents.push(RawAgent {
            history,
            size,
            agent_type,
            is_target,
            optimize: is_target,
            future: Some(future),
        });
    }

    Scenario {
        schema_version: SCHEMA_VERSION,
        meta: ScenarioMeta {
            id: format!("synth-{}", cfg.seed),
            t_history: cfg.t_history,
            t_future: cfg.t_future,
            dt,
        },
        map,
        lights,
        agents,
    }
}
