//! Deferred interaction: layer-0 group scores, the nested top-k mask
//! schedule derived from them, the masked attention layer, and the
//! residual / LayerNorm / per-token feed-forward block around it.
//!
//! Scores are raw `(XQ)(XK)ᵀ` products with no softmax and no `1/√d`
//! scaling unless [`ScoreNormalization::MaskedSoftmax`] is selected.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, Tape, Tensor, Var};

/// Slack added before flooring `ρ·m²` so ratios such as 0.29 with `m² = 100`
/// do not lose an entry to binary rounding.
const RATIO_FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// Masked raw scores multiply the values directly.
    #[default]
    None,
    /// Softmax over each row's surviving entries.
    MaskedSoftmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKScope {
    /// One ranking over the whole `m × m` matrix.
    #[default]
    Global,
    /// Each row keeps its own top `⌊ρ·m⌋` entries.
    PerRow,
}

/// `ρ_l = l / L` for `l = 1..=L`.
pub fn default_ratios(layers: usize) -> Vec<f64> {
    (1..=layers).map(|l| l as f64 / layers as f64).collect()
}

/// Ratios must have one entry per layer, lie in `(0, 1]`, never decrease,
/// and end at exactly 1.
pub fn validate_ratios(ratios: &[f64], layers: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::Config("number of layers must be at least 1".into()));
    }
    if ratios.len() != layers {
        return Err(Error::Config(format!("{} sparsity ratios for {layers} layers", ratios.len())));
    }
    for (l, &r) in ratios.iter().enumerate() {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("ratio {r} at layer {} is outside (0, 1]", l + 1)));
        }
        if l > 0 && r < ratios[l - 1] {
            return Err(Error::Config(format!(
                "ratios must be non-decreasing: {} then {r} at layer {}",
                ratios[l - 1],
                l + 1
            )));
        }
    }
    if *ratios.last().unwrap() != 1.0 {
        return Err(Error::Config(format!(
            "final ratio must be 1.0 so the last layer sees every pair, got {}",
            ratios.last().unwrap()
        )));
    }
    Ok(())
}

/// Number of active entries out of `total`: `⌊ρ·total⌋`, never below 1.
pub fn activation_count(ratio: f64, total: usize) -> usize {
    let k = (ratio * total as f64 + RATIO_FLOOR_SLACK).floor() as usize;
    k.clamp(1, total)
}

/// Active-entry counts `k_l` for an `m × m` score matrix under the global scope.
pub fn activation_counts(m: usize, ratios: &[f64]) -> Vec<usize> {
    ratios.iter().map(|&r| activation_count(r, m * m)).collect()
}

/// Raw layer-0 scores `A_0 = (X_0 Q_0)(X_0 K_0)ᵀ`, shape `[batch, m, m]`.
///
/// Computed outside any tape: nothing downstream differentiates through it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn example(&self, b: usize) -> &[T] {
        let mm = self.m() * self.m();
        &self.values.data()[b * mm..(b + 1) * mm]
    }
}

pub fn score_layer0<T: Scalar>(x0: &Tensor<T>, q0: &Tensor<T>, k0: &Tensor<T>) -> Result<ScoreMatrix<T>> {
    if x0.rank() != 3 {
        return Err(Error::shape("score_layer0", format!("expected [batch, m, d], got {:?}", x0.shape())));
    }
    let (batch, m, d) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    for w in [q0, k0] {
        if w.shape() != [d, d] {
            return Err(Error::shape("score_layer0", format!("projection {:?} vs width {d}", w.shape())));
        }
    }
    let mut q = vec![T::zero(); batch * m * d];
    let mut k = vec![T::zero(); batch * m * d];
    gemm_nn(x0.data(), q0.data(), &mut q, batch * m, d, d);
    gemm_nn(x0.data(), k0.data(), &mut k, batch * m, d, d);
    let mut a = vec![T::zero(); batch * m * m];
    for b in 0..batch {
        let rows = b * m * d..(b + 1) * m * d;
        gemm_nt(&q[rows.clone()], &k[rows], &mut a[b * m * m..(b + 1) * m * m], m, d, m);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "score_layer0" });
    }
    Ok(ScoreMatrix { values: Tensor::new(vec![batch, m, m], a)? })
}

/// Nested per-layer masks over each example's `m × m` score matrix.
///
/// Stored as one entry per matrix cell holding the first layer (1-based) at
/// which the cell becomes active, so masks for all layers cost `m²` entries
/// per example and nesting holds by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSchedule {
    batch: usize,
    m: usize,
    layers: usize,
    scope: TopKScope,
    /// Active entries per example at each layer.
    counts: Vec<usize>,
    activation: Vec<u16>,
}

impl MaskSchedule {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn scope(&self) -> TopKScope {
        self.scope
    }

    /// `k_l` for `l = 1..=L`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// First active layer of every cell, `[batch, m, m]` row-major;
    /// `layers + 1` marks a cell that never activates.
    pub fn activation_layers(&self) -> &[u16] {
        &self.activation
    }

    /// Mask storage per example.
    pub fn entries_per_example(&self) -> usize {
        self.m * self.m
    }

    pub fn is_active(&self, example: usize, layer: usize, i: usize, j: usize) -> bool {
        self.activation[(example * self.m + i) * self.m + j] as usize <= layer
    }

    pub fn ones(&self, example: usize, layer: usize) -> usize {
        let mm = self.m * self.m;
        self.activation[example * mm..(example + 1) * mm].iter().filter(|&&a| a as usize <= layer).count()
    }

    /// Dense 0/1 mask for `layer` (1-based), shape `[batch, m, m]`.
    pub fn mask<T: Scalar>(&self, layer: usize) -> Tensor<T> {
        Tensor::from_fn(vec![self.batch, self.m, self.m], |i| {
            if self.activation[i] as usize <= layer {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Ranks every example's layer-0 scores (descending, ties to the lower
/// row-major index) and activates the top `k_l` cells at layer `l`.
pub fn build_masks<T: Scalar>(a0: &ScoreMatrix<T>, ratios: &[f64], scope: TopKScope) -> Result<MaskSchedule> {
    validate_ratios(ratios, ratios.len().max(1))?;
    let (batch, m) = (a0.batch(), a0.m());
    let layers = ratios.len();
    if layers >= u16::MAX as usize {
        return Err(Error::Config(format!("{layers} layers exceed the mask encoding")));
    }
    let never = (layers + 1) as u16;
    let mut activation = vec![never; batch * m * m];
    let counts: Vec<usize>;
    match scope {
        TopKScope::Global => {
            counts = activation_counts(m, ratios);
            let mut order: Vec<usize> = Vec::with_capacity(m * m);
            for b in 0..batch {
                let scores = a0.example(b);
                order.clear();
                order.extend(0..m * m);
                order.sort_by(|&x, &y| rank_cmp(scores, x, y));
                let cells = &mut activation[b * m * m..(b + 1) * m * m];
                assign_layers(&order, &counts, cells);
            }
        }
        TopKScope::PerRow => {
            let per_row: Vec<usize> = ratios.iter().map(|&r| activation_count(r, m)).collect();
            counts = per_row.iter().map(|k| k * m).collect();
            let mut order: Vec<usize> = Vec::with_capacity(m);
            for b in 0..batch {
                let scores = a0.example(b);
                for i in 0..m {
                    let row = &scores[i * m..(i + 1) * m];
                    order.clear();
                    order.extend(0..m);
                    order.sort_by(|&x, &y| rank_cmp(row, x, y));
                    let start = (b * m + i) * m;
                    assign_layers(&order, &per_row, &mut activation[start..start + m]);
                }
            }
        }
    }
    Ok(MaskSchedule { batch, m, layers, scope, counts, activation })
}

fn rank_cmp<T: Scalar>(scores: &[T], x: usize, y: usize) -> Ordering {
    let (sx, sy) = (scores[x].to_f64_lossy(), scores[y].to_f64_lossy());
    sy.total_cmp(&sx).then(x.cmp(&y))
}

/// `cells[order[r]]` gets the first layer whose budget exceeds rank `r`.
fn assign_layers(order: &[usize], counts: &[usize], cells: &mut [u16]) {
    let mut layer = 0;
    for (rank, &cell) in order.iter().enumerate() {
        while layer < counts.len() && rank >= counts[layer] {
            layer += 1;
        }
        if layer == counts.len() {
            break;
        }
        cells[cell] = (layer + 1) as u16;
    }
}

/// Parameters of one interaction layer of one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

/// Uniform in `±1/√fan_in`.
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(rng.gen_range(-bound..bound)))
}

impl LayerParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, fan_in: usize, fan_out: usize, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), fan_in_uniform(rng, fan_in, fan_out), true)
        };
        let query = w("query", d_model, d_model, rng);
        let key = w("key", d_model, d_model, rng);
        let value = w("value", d_model, d_model, rng);
        let ffn_in = w("ffn_in", d_model, d_ff, rng);
        let ffn_out = w("ffn_out", d_ff, d_model, rng);
        let mut v = |name: &str, len: usize, fill: f64| {
            store.add(format!("{prefix}.{name}"), Tensor::full(vec![len], T::lit(fill)), true)
        };
        LayerParams {
            query,
            key,
            value,
            ffn_in,
            ffn_in_bias: v("ffn_in_bias", d_ff, 0.0),
            ffn_out,
            ffn_out_bias: v("ffn_out_bias", d_model, 0.0),
            norm1_gain: v("norm1_gain", d_model, 1.0),
            norm1_bias: v("norm1_bias", d_model, 0.0),
            norm2_gain: v("norm2_gain", d_model, 1.0),
            norm2_bias: v("norm2_bias", d_model, 0.0),
        }
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.query,
            self.key,
            self.value,
            self.ffn_in,
            self.ffn_in_bias,
            self.ffn_out,
            self.ffn_out_bias,
            self.norm1_gain,
            self.norm1_bias,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }
}

/// `Z_l = [((X Q_l)(X K_l)ᵀ) ⊙ mask] (X V_l)` for `x_prev: [batch, m, d]`.
///
/// The mask enters as a constant, so no gradient reaches the ranking.
pub fn masked_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x_prev: Var,
    params: &LayerParams,
    mask: &Tensor<T>,
    normalization: ScoreNormalization,
) -> Result<Var> {
    let shape = tape.shape(x_prev).to_vec();
    if shape.len() != 3 || mask.shape() != [shape[0], shape[1], shape[1]] {
        return Err(Error::Contract(format!("mask {:?} does not match tokens {shape:?}", mask.shape())));
    }
    let wq = tape.param(params.query)?;
    let wk = tape.param(params.key)?;
    let wv = tape.param(params.value)?;
    let q = tape.matmul(x_prev, wq)?;
    let k = tape.matmul(x_prev, wk)?;
    let v = tape.matmul(x_prev, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let weights = match normalization {
        ScoreNormalization::None => {
            let mask = tape.constant(mask.clone());
            tape.mul(scores, mask)?
        }
        ScoreNormalization::MaskedSoftmax => tape.masked_softmax(scores, mask)?,
    };
    tape.matmul(weights, v)
}

/// `Ẑ = LN(Z + X)`, then `LN(PFFN(Ẑ) + Ẑ)` with `PFFN(u) = relu(u W_1 + b_1) W_2 + b_2`
/// applied to each token independently.
pub fn block<T: Scalar>(tape: &mut Tape<'_, T>, x_prev: Var, z: Var, params: &LayerParams, eps: T) -> Result<Var> {
    if tape.shape(x_prev) != tape.shape(z) {
        return Err(Error::shape(
            "block",
            format!("residual {:?} vs attention output {:?}", tape.shape(x_prev), tape.shape(z)),
        ));
    }
    let g1 = tape.param(params.norm1_gain)?;
    let b1 = tape.param(params.norm1_bias)?;
    let g2 = tape.param(params.norm2_gain)?;
    let b2 = tape.param(params.norm2_bias)?;
    let w_in = tape.param(params.ffn_in)?;
    let w_in_b = tape.param(params.ffn_in_bias)?;
    let w_out = tape.param(params.ffn_out)?;
    let w_out_b = tape.param(params.ffn_out_bias)?;

    let r1 = tape.add(z, x_prev)?;
    let z_hat = tape.layer_norm(r1, g1, b1, eps)?;
    let h = tape.matmul(z_hat, w_in)?;
    let h = tape.add(h, w_in_b)?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, w_out)?;
    let f = tape.add(f, w_out_b)?;
    let r2 = tape.add(f, z_hat)?;
    tape.layer_norm(r2, g2, b2, eps)
}
