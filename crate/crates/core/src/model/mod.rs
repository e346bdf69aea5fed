//! Full network: embedding → K window branches (grouping, projection, L
//! deferred-interaction blocks) → pooling → MLP head → sigmoid.

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint_header, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Pooling};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{block, build_masks, fan_in_uniform, masked_attention, score_layer0, LayerParams, MaskSchedule};
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, FeatureBatch, FeatureSchema};
use crate::grouping::{group_count, input_project, partition_window};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Predictions are clamped to `[ε, 1 − ε]` with this ε (or the scalar type's
/// machine epsilon, whichever is larger).
pub const PROB_EPS: f64 = 1e-12;

pub fn prob_eps<T: Scalar>() -> T {
    T::lit(PROB_EPS).max(T::epsilon())
}

/// Parameters of one window branch.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowParams {
    pub granularity: usize,
    pub n_groups: usize,
    pub proj: ParamId,
    pub proj_bias: ParamId,
    /// Frozen layer-0 score projections; `None` when tied to layer 1.
    pub score_query: Option<ParamId>,
    pub score_key: Option<ParamId>,
    pub layers: Vec<LayerParams>,
}

impl WindowParams {
    pub fn score_projections(&self) -> (ParamId, ParamId) {
        match (self.score_query, self.score_key) {
            (Some(q), Some(k)) => (q, k),
            _ => (self.layers[0].query, self.layers[0].key),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Click probabilities, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub y_hat: Vec<T>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub prob: Var,
    pub logit: Var,
    /// One schedule per window.
    pub masks: Vec<MaskSchedule>,
    /// Final token sequence `X^h_L` per window.
    pub window_outputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    schema: FeatureSchema,
    seed: u64,
    ratios: Vec<f64>,
    params: ParamStore<T>,
    embedding: EmbeddingTable,
    windows: Vec<WindowParams>,
    head: Vec<DenseParams>,
}

impl<T: Scalar> Model<T> {
    /// Allocates and initializes every parameter; deterministic in `seed`.
    pub fn build(config: &ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<Self> {
        config.validate(schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = schema.n_features();
        let embedding = EmbeddingTable::init(&mut params, schema, config.d_embed, &mut rng)?;
        let d_model = config.d_model;
        let d_ff = config.d_ff();

        let mut windows = Vec::with_capacity(config.granularities.len());
        for (h, &g) in config.granularities.iter().enumerate() {
            let prefix = format!("window{h}");
            let width = match config.combine {
                crate::grouping::GroupCombine::Concat => g * config.d_embed,
                crate::grouping::GroupCombine::Sum => config.d_embed,
            };
            let proj = params.add(format!("{prefix}.proj"), fan_in_uniform(&mut rng, width, d_model), true);
            let proj_bias = params.add(format!("{prefix}.proj_bias"), Tensor::zeros(vec![d_model]), true);
            let (score_query, score_key) = if config.tie_q0 {
                (None, None)
            } else {
                let q = params.add(format!("{prefix}.score_query"), fan_in_uniform(&mut rng, d_model, d_model), false);
                let k = params.add(format!("{prefix}.score_key"), fan_in_uniform(&mut rng, d_model, d_model), false);
                (Some(q), Some(k))
            };
            let layers = (1..=config.layers)
                .map(|l| LayerParams::init(&mut params, &format!("{prefix}.layer{l}"), d_model, d_ff, &mut rng))
                .collect();
            windows.push(WindowParams {
                granularity: g,
                n_groups: group_count(n, g),
                proj,
                proj_bias,
                score_query,
                score_key,
                layers,
            });
        }

        let mut head = Vec::with_capacity(config.head_hidden.len() + 1);
        let mut fan_in = d_model * windows.len();
        for (i, &width) in config.head_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(DenseParams {
                weight: params.add(format!("head.{i}.weight"), fan_in_uniform(&mut rng, fan_in, width), true),
                bias: params.add(format!("head.{i}.bias"), Tensor::zeros(vec![width]), true),
            });
            fan_in = width;
        }

        Ok(Model {
            config: config.clone(),
            schema: schema.clone(),
            seed,
            ratios: config.effective_ratios(),
            params,
            embedding,
            windows,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sparsity ratios in use (all 1.0 under `without_di`).
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn windows(&self) -> &[WindowParams] {
        &self.windows
    }

    pub fn head(&self) -> &[DenseParams] {
        &self.head
    }

    /// Mask cells stored per example: `Σ_h m_h²`.
    pub fn mask_entries_per_example(&self) -> usize {
        self.windows.iter().map(|w| w.n_groups * w.n_groups).sum()
    }

    /// Records the forward pass on `tape`, which must borrow this model's
    /// parameter store.
    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &FeatureBatch) -> Result<ForwardPass> {
        batch.validate()?;
        let bsz = batch.batch_size();
        let eps = T::lit(self.config.layer_norm_eps);
        let embedded = self.embedding.embed_batch(tape, batch)?;
        let null = tape.param(self.embedding.null)?;
        let order = self.config.feature_order.as_deref();

        let mut pooled = Vec::with_capacity(self.windows.len());
        let mut masks = Vec::with_capacity(self.windows.len());
        let mut window_outputs = Vec::with_capacity(self.windows.len());
        for (h, w) in self.windows.iter().enumerate() {
            let grouped = partition_window(tape, embedded, null, h, w.granularity, order, self.config.combine)?;
            let proj = tape.param(w.proj)?;
            let proj_bias = tape.param(w.proj_bias)?;
            let x0 = input_project(tape, &grouped, proj, proj_bias)?;

            let (sq, sk) = w.score_projections();
            let a0 = score_layer0(tape.value(x0.tokens), self.params.value(sq), self.params.value(sk))?;
            let schedule = build_masks(&a0, &self.ratios, self.config.topk_scope)?;

            let mut x = x0.tokens;
            for (l, lp) in w.layers.iter().enumerate() {
                let mask = schedule.mask::<T>(l + 1);
                let z = masked_attention(tape, x, lp, &mask, self.config.score_normalization)?;
                x = block(tape, x, z, lp, eps)?;
            }
            window_outputs.push(x);
            pooled.push(match self.config.pooling {
                Pooling::Mean => tape.mean_axis(x, 1)?,
                Pooling::Sum => tape.sum_axis(x, 1)?,
                Pooling::Max => tape.max_axis(x, 1)?,
            });
            masks.push(schedule);
        }

        let mut hidden = if pooled.len() == 1 { pooled[0] } else { tape.concat_last(&pooled)? };
        for (i, layer) in self.head.iter().enumerate() {
            let w = tape.param(layer.weight)?;
            let b = tape.param(layer.bias)?;
            let y = tape.matmul(hidden, w)?;
            hidden = tape.add(y, b)?;
            if i + 1 < self.head.len() {
                hidden = tape.relu(hidden)?;
            }
        }
        let logit = tape.reshape(hidden, vec![bsz])?;
        let prob = tape.sigmoid(logit)?;
        Ok(ForwardPass { prob, logit, masks, window_outputs })
    }

    pub fn predict(&self, batch: &FeatureBatch) -> Result<Prediction<T>> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, batch)?;
        let eps = prob_eps::<T>();
        let hi = T::one() - eps;
        let y_hat = tape.value(out.prob).data().iter().map(|&p| p.max(eps).min(hi)).collect();
        Ok(Prediction { y_hat })
    }

    /// Mean cross-entropy of the batch and the gradient of every parameter.
    pub fn loss_and_grads(&self, batch: &FeatureBatch) -> Result<(T, Gradients<T>)> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, batch)?;
        let l = loss(&mut tape, out.prob, &batch.labels)?;
        tape.backward(l)?;
        Ok((tape.value(l).data()[0], tape.param_grads()))
    }

    /// Loss value only.
    pub fn loss_value(&self, batch: &FeatureBatch) -> Result<T> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, batch)?;
        let l = loss(&mut tape, out.prob, &batch.labels)?;
        Ok(tape.value(l).data()[0])
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name.clone(), p.value.cast(), p.trainable);
        }
        Model {
            config: self.config.clone(),
            schema: self.schema.clone(),
            seed: self.seed,
            ratios: self.ratios.clone(),
            params,
            embedding: self.embedding.clone(),
            windows: self.windows.clone(),
            head: self.head.clone(),
        }
    }
}

/// Mean binary cross-entropy of `prob` against 0/1 labels.
pub fn loss<T: Scalar>(tape: &mut Tape<'_, T>, prob: Var, labels: &[u8]) -> Result<Var> {
    if tape.value(prob).len() != labels.len() {
        return Err(Error::shape("loss", format!("{} predictions vs {} labels", tape.value(prob).len(), labels.len())));
    }
    let y: Vec<T> = labels.iter().map(|&v| T::lit(v as f64)).collect();
    tape.binary_cross_entropy(prob, &y, prob_eps::<T>())
}
