//! SE(2) pose algebra, angle wrapping, coordinate transforms and
//! k-nearest-neighbor index construction.
//!
//! All functions here are pure and operate in `f64`; poses feed the encoders
//! only through relative quantities, so keeping them at full precision costs
//! nothing and removes one source of drift from the invariance checks.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("wrap_angle: non-finite input {0}")]
    NonFiniteAngle(f64),
    #[error("knn_indices: no valid targets")]
    EmptyNeighborhood,
    #[error("knn_indices: K must be at least 1")]
    ZeroK,
}

/// Wrap an angle into the half-open interval `(-pi, pi]`; `-pi` maps to `pi`
/// so every heading has exactly one representation.
pub fn wrap_angle(theta: f64) -> Result<f64, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFiniteAngle(theta));
    }
    let mut t = theta.rem_euclid(2.0 * PI); // [0, 2pi)
    if t > PI {
        t -= 2.0 * PI;
    }
    if t == -PI {
        t = PI;
    }
    Ok(t)
}

/// An SE(2) element: 2D position plus heading, with the heading always
/// wrapped into `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta).expect("finite heading"),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Compose `self * other` (apply `other` in `self`'s frame).
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Map a point from this pose's local frame into the global frame.
    pub fn local_to_global(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Map a global point into this pose's local frame.
    pub fn global_to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotate a direction vector from the global frame into the local frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// Rotate a direction vector from the local frame into the global frame.
    pub fn rotate_to_global(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn planar_dist_sq(&self, other: &Pose2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// The pose of token `j` expressed in the frame of token `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelPose {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

/// `inverse(p_i) * p_j`, with the relative heading wrapped.
pub fn relative_pose(p_i: &Pose2, p_j: &Pose2) -> RelPose {
    let (s, c) = p_i.theta.sin_cos();
    let dx = p_j.x - p_i.x;
    let dy = p_j.y - p_i.y;
    RelPose {
        dx: c * dx + s * dy,
        dy: -s * dx + c * dy,
        dtheta: wrap_angle(p_j.theta - p_i.theta).expect("finite headings"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformDirection {
    LocalToGlobal,
    GlobalToLocal,
}

/// Apply a rigid transform (or its inverse) to a batch of points.
pub fn transform_points(
    pose: &Pose2,
    pts: &[[f64; 2]],
    direction: TransformDirection,
) -> Vec<[f64; 2]> {
    pts.iter()
        .map(|&p| match direction {
            TransformDirection::LocalToGlobal => pose.local_to_global(p),
            TransformDirection::GlobalToLocal => pose.global_to_local(p),
        })
        .collect()
}

/// Per-query nearest-neighbor slots. Valid entries are sorted by ascending
/// planar L2 distance with ties broken by ascending target index; unused
/// slots are flagged invalid and index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub queries: usize,
    pub k: usize,
    pub idx: Vec<usize>,
    pub valid: Vec<bool>,
}

impl NeighborIndex {
    pub fn at(&self, q: usize, slot: usize) -> (usize, bool) {
        let i = q * self.k + slot;
        (self.idx[i], self.valid[i])
    }

    /// Valid neighbor count of query `q`.
    pub fn valid_count(&self, q: usize) -> usize {
        self.valid[q * self.k..(q + 1) * self.k]
            .iter()
            .filter(|v| **v)
            .count()
    }
}

/// Select the `min(K, #valid)` valid targets closest to each query by planar
/// L2 distance (heading ignored). A query that is also a valid target may
/// select itself.
pub fn knn_indices(
    query_poses: &[Pose2],
    target_poses: &[Pose2],
    target_valid: &[bool],
    k: usize,
) -> Result<NeighborIndex, GeometryError> {
    if k == 0 {
        return Err(GeometryError::ZeroK);
    }
    let valid_targets: Vec<usize> = (0..target_poses.len())
        .filter(|&j| target_valid[j])
        .collect();
    if valid_targets.is_empty() {
        return Err(GeometryError::EmptyNeighborhood);
    }
    let m = query_poses.len();
    let mut idx = vec![0usize; m * k];
    let mut valid = vec![false; m * k];
    // Bounded selection: keep the best K (dist, index) pairs per query.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (q, qp) in query_poses.iter().enumerate() {
        best.clear();
        for &j in &valid_targets {
            let d = qp.planar_dist_sq(&target_poses[j]);
            let cand = (d, j);
            if best.len() == k {
                let worst = *best.last().unwrap();
                if (cand.0, cand.1) >= (worst.0, worst.1) {
                    continue;
                }
                best.pop();
            }
            let pos = best.partition_point(|&(bd, bj)| (bd, bj) < (cand.0, cand.1));
            best.insert(pos, cand);
        }
        for (slot, &(_, j)) in best.iter().enumerate() {
            idx[q * k + slot] = j;
            valid[q * k + slot] = true;
        }
    }
    Ok(NeighborIndex {
        queries: m,
        k,
        idx,
        valid,
    })
}
