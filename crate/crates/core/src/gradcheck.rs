//! Finite-difference check of every model parameter's gradient.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{FeatureBatch, FeatureSchema};
use crate::model::{Model, ModelConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub trainable: bool,
    pub n_values: usize,
    /// Largest relative error over the tensor (trainable parameters only).
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude.
    pub max_abs_grad: f64,
}

impl ParamCheck {
    /// Group label: the parameter name without its window and layer prefix.
    pub fn group(&self) -> String {
        self.name
            .split('.')
            .filter(|s| !(s.starts_with("window") || s.starts_with("layer") || s.chars().all(|c| c.is_ascii_digit())))
            .collect::<Vec<_>>()
            .join(".")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Worst relative error over all trainable parameters.
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().filter(|p| p.trainable).map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// Worst relative error per parameter group.
    pub fn by_group(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            let e = out.entry(p.group()).or_insert(0.0f64);
            *e = e.max(p.max_rel_err);
        }
        out
    }

    /// Frozen parameters whose analytic gradient is not identically zero.
    pub fn nonzero_frozen(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.trainable && p.max_abs_grad != 0.0).map(|p| p.name.as_str()).collect()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).count()
    }
}

/// Compares the tape gradient of the mean loss on `batch` with central
/// differences of step `step`, coordinate by coordinate.
pub fn gradcheck(model: &Model<f64>, batch: &FeatureBatch, step: f64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut probe = model.clone();
    let mut params = Vec::with_capacity(model.params().len());
    for (id, p) in model.params().iter() {
        let analytic = grads.get_or_zeros(id, p.value.len());
        let max_abs_grad = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut max_rel_err = 0.0f64;
        if p.trainable {
            for k in 0..p.value.len() {
                let orig = p.value.data()[k];
                probe.params_mut().get_mut(id).value.data_mut()[k] = orig + step;
                let up = probe.loss_value(batch)?;
                probe.params_mut().get_mut(id).value.data_mut()[k] = orig - step;
                let down = probe.loss_value(batch)?;
                probe.params_mut().get_mut(id).value.data_mut()[k] = orig;
                max_rel_err = max_rel_err.max(relative_error(analytic[k], (up - down) / (2.0 * step)));
            }
        }
        params.push(ParamCheck {
            name: p.name.clone(),
            trainable: p.trainable,
            n_values: p.value.len(),
            max_rel_err,
            max_abs_grad,
        });
    }
    Ok(GradCheckReport { params })
}

/// Small mixed-cardinality setup: 8 features, windows {1, 2}, three layers
/// with ratios {0.33, 0.66, 1.0}, batch of 4.
pub fn reference_setup(seed: u64) -> Result<(ModelConfig, FeatureSchema, FeatureBatch)> {
    let schema = FeatureSchema::with_default_names(vec![1000, 1000, 10, 10, 4, 4, 2, 2])?;
    let config = ModelConfig {
        granularities: vec![1, 2],
        layers: 3,
        ratios: Some(vec![0.33, 0.66, 1.0]),
        d_embed: 4,
        d_model: 8,
        head_hidden: vec![8],
        ..ModelConfig::default()
    };
    let batch = random_batch(&schema, 4, seed)?;
    Ok((config, schema, batch))
}

/// Uniformly random ids and alternating labels.
pub fn random_batch(schema: &FeatureSchema, batch_size: usize, seed: u64) -> Result<FeatureBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = schema.n_features();
    let ids = (0..batch_size * n).map(|k| rng.gen_range(0..schema.cardinalities[k % n])).collect();
    let labels = (0..batch_size).map(|i| (i % 2) as u8).collect();
    FeatureBatch::new(n, ids, labels)
}
