//! Network-building helpers: binding named weights into a graph, linear and
//! MLP layers, dropout, and a few composed scalar curves (clamp, huber).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, TensorId};
use crate::weights::{WeightStore, WeightsError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// One forward pass worth of graph plus weight bindings.
///
/// Weights are bound lazily by name; each name becomes a single graph leaf,
/// so gradients accumulate across every use site. In training mode the leaf
/// requires gradients and dropout masks are drawn from a seeded stream.
pub struct NetCtx<'w, S: Scalar> {
    pub graph: Graph<S>,
    weights: &'w WeightStore<S>,
    bound: HashMap<String, TensorId>,
    grads: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'w, S: Scalar> NetCtx<'w, S> {
    /// Inference context: no gradients, dropout off.
    pub fn inference(weights: &'w WeightStore<S>) -> Self {
        Self {
            graph: Graph::new(),
            weights,
            bound: HashMap::new(),
            grads: false,
            dropout: None,
        }
    }

    /// Training context: gradients on; dropout active when `dropout_p > 0`.
    pub fn training(weights: &'w WeightStore<S>, dropout_p: f64, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            weights,
            bound: HashMap::new(),
            grads: true,
            dropout: (dropout_p > 0.0).then(|| (dropout_p, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId, NetError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.weights.get(name)?.clone();
        let id = self.graph.leaf(t, self.grads);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Names bound so far with their accumulated gradients.
    pub fn grads(&self) -> HashMap<String, Vec<S>> {
        self.bound
            .iter()
            .filter_map(|(name, &id)| self.graph.grad(id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(|s| s.as_str())
    }

    pub fn bound_id(&self, name: &str) -> Option<TensorId> {
        self.bound.get(name).copied()
    }

    /// `x . W + b` with `W` at `{prefix}.w` and `b` at `{prefix}.b`.
    pub fn linear(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, NetError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let xw = self.graph.matmul(x, w)?;
        Ok(self.graph.add(xw, b)?)
    }

    /// Three stacked linear layers with relu after the first two.
    pub fn mlp3(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, NetError> {
        let h1 = self.linear(x, &format!("{prefix}.l0"))?;
        let h1 = self.graph.relu(h1)?;
        let h2 = self.linear(h1, &format!("{prefix}.l1"))?;
        let h2 = self.graph.relu(h2)?;
        self.linear(h2, &format!("{prefix}.l2"))
    }

    pub fn layer_norm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, NetError> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(self.graph.layer_norm(x, g, b, 1e-5)?)
    }

    /// Inverted dropout: identity in inference mode.
    pub fn dropout(&mut self, x: TensorId) -> Result<TensorId, NetError> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        let keep = 1.0 - p;
        let n = self.graph.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let shape = self.graph.shape(x).to_vec();
        let m = self.graph.constant(Tensor::from_f64(shape, &mask)?);
        Ok(self.graph.mul(x, m)?)
    }
}

/// `clamp(x, -bound, bound)` composed from relu so subgradients match the
/// hard clamp: `x - relu(x - b) + relu(-b - x)`.
pub fn clamp_sym<S: Scalar>(
    g: &mut Graph<S>,
    x: TensorId,
    bound: f64,
) -> Result<TensorId, TensorError> {
    let over = g.add_const(x, -bound)?;
    let over = g.relu(over)?;
    let neg_x = g.scale(x, -1.0)?;
    let under = g.add_const(neg_x, -bound)?;
    let under = g.relu(under)?;
    let t = g.sub(x, over)?;
    g.add(t, under)
}

/// `|r|` as `relu(r) + relu(-r)`.
pub fn abs_via_relu<S: Scalar>(g: &mut Graph<S>, r: TensorId) -> Result<TensorId, TensorError> {
    let pos = g.relu(r)?;
    let neg_r = g.scale(r, -1.0)?;
    let neg = g.relu(neg_r)?;
    g.add(pos, neg)
}

/// Elementwise Huber curve: `r^2/2` inside `|r| <= delta`, linear outside.
/// Uses `m = delta - relu(delta - |r|)` so that `huber = m*|r| - m^2/2`.
pub fn huber<S: Scalar>(
    g: &mut Graph<S>,
    r: TensorId,
    delta: f64,
) -> Result<TensorId, TensorError> {
    let a = abs_via_relu(g, r)?;
    let neg_a = g.scale(a, -1.0)?;
    let da = g.add_const(neg_a, delta)?; // delta - |r|
    let da = g.relu(da)?;
    let neg_da = g.scale(da, -1.0)?;
    let m = g.add_const(neg_da, delta)?; // min(|r|, delta)
    let ma = g.mul(m, a)?;
    let m2 = g.mul(m, m)?;
    let half_m2 = g.scale(m2, 0.5)?;
    g.sub(ma, half_m2)
}

/// `1/u` for strictly positive `u`, as `exp(-log u)`.
pub fn recip_pos<S: Scalar>(g: &mut Graph<S>, u: TensorId) -> Result<TensorId, TensorError> {
    let l = g.log(u)?;
    let nl = g.scale(l, -1.0)?;
    g.exp(nl)
}
