//! Polyline-level encoders: raw map, traffic-light and agent records become
//! (global pose, local attribute) token pairs.
//!
//! Map and agent polylines run through a shared PointNet: a per-node MLP
//! followed by masked max-pooling over the valid nodes. Everything feeding
//! the MLP is expressed in the token's own frame, which is what makes the
//! attributes invariant to rigid motions of the whole scene.

use crate::geometry::Pose2;
use crate::nn::{NetCtx, NetError};
use crate::scalar::Scalar;
use crate::scenario::{RawAgent, RawMapPolyline, RawTrafficLight, AGENT_TYPES, C_MP, C_TL};
use crate::tensor::{BoolMask, Tensor, TensorId};

/// Per-node map feature width: local position, local direction, lane one-hot.
pub const F_MP: usize = 4 + C_MP;
/// Per-step agent feature width: local position, direction, velocity,
/// speed, yaw rate, acceleration, then size and type one-hot.
pub const F_AG: usize = 9 + 3 + AGENT_TYPES;
/// Traffic-light feature width: the state one-hot.
pub const F_TL: usize = C_TL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Map,
    TrafficLight,
    Agent,
}

/// A batch of same-class tokens: one pose per token, attributes stacked as
/// an `[N, D]` graph tensor.
pub struct TokenSet {
    pub cls: TokenClass,
    pub poses: Vec<Pose2>,
    pub attrs: TensorId,
}

/// Per-node MLP followed by masked max-pooling: `[groups, nodes, f]`
/// features to `[groups, D]` attributes.
pub fn pointnet<S: Scalar>(
    ctx: &mut NetCtx<S>,
    features: Tensor<S>,
    mask: &BoolMask,
    prefix: &str,
) -> Result<TensorId, NetError> {
    let shape = features.shape().to_vec();
    let (groups, nodes, f) = (shape[0], shape[1], shape[2]);
    let flat = features.reshaped(vec![groups * nodes, f])?;
    let x = ctx.graph.constant(flat);
    let enc = ctx.mlp3(x, prefix)?;
    let d = *ctx.graph.shape(enc).last().unwrap();
    let grouped = ctx.graph.reshape(enc, vec![groups, nodes, d])?;
    Ok(ctx.graph.masked_max(grouped, mask)?)
}

/// Token pose of a map polyline: the first valid node's position and the
/// heading of its direction vector.
pub fn map_token_pose(p: &RawMapPolyline) -> Pose2 {
    let f = p
        .valid
        .iter()
        .position(|v| *v)
        .expect("validated polyline has a valid node");
    Pose2::new(
        p.nodes[f][0],
        p.nodes[f][1],
        p.dirs[f][1].atan2(p.dirs[f][0]),
    )
}

/// Encode all map polylines into one token set.
pub fn encode_map<S: Scalar>(
    ctx: &mut NetCtx<S>,
    polylines: &[RawMapPolyline],
    prefix: &str,
) -> Result<TokenSet, NetError> {
    let n = polylines.len();
    let width = polylines.iter().map(|p| p.nodes.len()).max().unwrap_or(1);
    let mut feats = vec![0.0f64; n * width * F_MP];
    let mut mask = vec![false; n * width];
    let mut poses = Vec::with_capacity(n);
    for (i, p) in polylines.iter().enumerate() {
        let pose = map_token_pose(p);
        for (j, (&node, &dir)) in p.nodes.iter().zip(&p.dirs).enumerate() {
            if !p.valid[j] {
                continue;
            }
            mask[i * width + j] = true;
            let local = pose.global_to_local(node);
            let ldir = pose.rotate_to_local(dir);
            let row = &mut feats[(i * width + j) * F_MP..(i * width + j + 1) * F_MP];
            row[0] = local[0];
            row[1] = local[1];
            row[2] = ldir[0];
            row[3] = ldir[1];
            row[4 + p.lane_type] = 1.0;
        }
        poses.push(pose);
    }
    let attrs = pointnet(
        ctx,
        Tensor::from_f64(vec![n, width, F_MP], &feats)?,
        &BoolMask::new(vec![n, width], mask),
        prefix,
    )?;
    Ok(TokenSet {
        cls: TokenClass::Map,
        poses,
        attrs,
    })
}

/// Encode traffic lights: pose is the stop point, attribute an MLP of the
/// state one-hot (so lights with equal state share their attribute).
pub fn encode_traffic_lights<S: Scalar>(
    ctx: &mut NetCtx<S>,
    lights: &[RawTrafficLight],
    prefix: &str,
) -> Result<TokenSet, NetError> {
    let n = lights.len();
    let mut feats = vec![0.0f64; n * F_TL];
    let mut poses = Vec::with_capacity(n);
    for (i, l) in lights.iter().enumerate() {
        feats[i * F_TL + l.state] = 1.0;
        poses.push(l.stop_point());
    }
    let x = ctx.graph.constant(Tensor::from_f64(vec![n, F_TL], &feats)?);
    let attrs = ctx.mlp3(x, prefix)?;
    Ok(TokenSet {
        cls: TokenClass::TrafficLight,
        poses,
        attrs,
    })
}

/// Finite-difference derivative over possibly-invalid samples: central where
/// both neighbors are valid, one-sided at boundaries, zero where undefined.
fn masked_derivative(values: &[f64], valid: &[bool], dt: f64, wrap: bool) -> Vec<f64> {
    let n = values.len();
    let diff = |a: f64, b: f64| {
        if wrap {
            crate::geometry::wrap_angle(a - b).unwrap_or(0.0)
        } else {
            a - b
        }
    };
    (0..n)
        .map(|t| {
            if !valid[t] {
                return 0.0;
            }
            let prev = t.checked_sub(1).filter(|&p| valid[p]);
            let next = (t + 1 < n && valid[t + 1]).then_some(t + 1);
            match (prev, next) {
                (Some(p), Some(q)) => diff(values[q], values[p]) / (2.0 * dt),
                (None, Some(q)) => diff(values[q], values[t]) / dt,
                (Some(p), None) => diff(values[t], values[p]) / dt,
                (None, None) => 0.0,
            }
        })
        .collect()
}

/// Encode agent histories into tokens anchored at the current (t = 0) pose.
pub fn encode_agents<S: Scalar>(
    ctx: &mut NetCtx<S>,
    agents: &[RawAgent],
    dt: f64,
    prefix: &str,
) -> Result<TokenSet, NetError> {
    let n = agents.len();
    let steps = agents.iter().map(|a| a.history.len()).max().unwrap_or(1);
    let mut feats = vec![0.0f64; n * steps * F_AG];
    let mut mask = vec![false; n * steps];
    let mut poses = Vec::with_capacity(n);
    for (i, a) in agents.iter().enumerate() {
        if !a.current().valid {
            return Err(NetError::Contract(format!(
                "agent {i}: current step must be valid"
            )));
        }
        let pose = a.current_pose();
        let valid: Vec<bool> = a.history.iter().map(|s| s.valid).collect();
        let thetas: Vec<f64> = a.history.iter().map(|s| s.theta).collect();
        let speeds: Vec<f64> = a.history.iter().map(|s| s.vx.hypot(s.vy)).collect();
        let yaw_rates = masked_derivative(&thetas, &valid, dt, true);
        let accels = masked_derivative(&speeds, &valid, dt, false);
        for (t, s) in a.history.iter().enumerate() {
            if !s.valid {
                continue;
            }
            mask[i * steps + t] = true;
            let local = pose.global_to_local([s.x, s.y]);
            let ldir = pose.rotate_to_local([s.theta.cos(), s.theta.sin()]);
            let lvel = pose.rotate_to_local([s.vx, s.vy]);
            let row = &mut feats[(i * steps + t) * F_AG..(i * steps + t + 1) * F_AG];
            row[0] = local[0];
            row[1] = local[1];
            row[2] = ldir[0];
            row[3] = ldir[1];
            row[4] = lvel[0];
            row[5] = lvel[1];
            row[6] = speeds[t];
            row[7] = yaw_rates[t];
            row[8] = accels[t];
            row[9] = a.size[0];
            row[10] = a.size[1];
            row[11] = a.size[2];
            row[12 + a.agent_type] = 1.0;
        }
        poses.push(pose);
    }
    let attrs = pointnet(
        ctx,
        Tensor::from_f64(vec![n, steps, F_AG], &feats)?,
        &BoolMask::new(vec![n, steps], mask),
        prefix,
    )?;
    Ok(TokenSet {
        cls: TokenClass::Agent,
        poses,
        attrs,
    })
}

/// Shapes of every encoder parameter, for weight initialization.
pub fn encoder_param_shapes(d: usize, names: &mut Vec<(String, Vec<usize>)>) {
    for (prefix, f_in) in [
        ("enc_mp.pointnet", F_MP),
        ("enc_ag.pointnet", F_AG),
        ("enc_tl.mlp", F_TL),
    ] {
        names.push((format!("{prefix}.l0.w"), vec![f_in, d]));
        names.push((format!("{prefix}.l0.b"), vec![d]));
        names.push((format!("{prefix}.l1.w"), vec![d, d]));
        names.push((format!("{prefix}.l1.b"), vec![d]));
        names.push((format!("{prefix}.l2.w"), vec![d, d]));
        names.push((format!("{prefix}.l2.b"), vec![d]));
    }
}
