//! Heterogeneous synthetic CTR data with a known ground-truth logit.
//!
//! Each feature's ids follow a Zipf-skewed categorical over its cardinality
//! (rank = id). The logit is `bias + Σ w_pair[id_a, id_b]` over the configured
//! interacting pairs, and labels are Bernoulli(sigmoid(logit / temperature)).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::data::{Dataset, FeatureSchema};

/// Largest pairwise weight table the generator will allocate.
const MAX_TABLE_ENTRIES: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionPair {
    pub a: usize,
    pub b: usize,
    /// Standard deviation of the table entries.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cardinalities: Vec<u32>,
    /// 0 gives uniform ids; larger values concentrate mass on low ids.
    pub zipf_exponent: f64,
    pub pairs: Vec<InteractionPair>,
    #[serde(default)]
    pub bias: f64,
    /// 0 makes labels the hard threshold `logit > 0`.
    pub temperature: f64,
    /// Feature whose id doubles as the user id for GAUC grouping.
    #[serde(default)]
    pub user_feature: Option<usize>,
}

impl SyntheticSpec {
    pub fn n_features(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::with_default_names(self.cardinalities.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_features();
        if n == 0 || self.cardinalities.contains(&0) {
            return Err(Error::Config("synthetic cardinalities must be non-empty and positive".into()));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config(format!("zipf exponent {} must be finite and >= 0", self.zipf_exponent)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if !self.bias.is_finite() {
            return Err(Error::Config("bias must be finite".into()));
        }
        for p in &self.pairs {
            if p.a >= n || p.b >= n || p.a == p.b {
                return Err(Error::Config(format!("pair ({}, {}) invalid for {n} features", p.a, p.b)));
            }
            if !(p.scale >= 0.0 && p.scale.is_finite()) {
                return Err(Error::Config(format!("pair ({}, {}) has invalid scale", p.a, p.b)));
            }
            let size = self.cardinalities[p.a] as usize * self.cardinalities[p.b] as usize;
            if size > MAX_TABLE_ENTRIES {
                return Err(Error::Config(format!(
                    "pair ({}, {}) needs a {size}-entry weight table (limit {MAX_TABLE_ENTRIES})",
                    p.a, p.b
                )));
            }
        }
        if let Some(u) = self.user_feature {
            if u >= n {
                return Err(Error::Config(format!("user_feature {u} out of range")));
            }
        }
        Ok(())
    }
}

/// Normalized cumulative Zipf weights `(rank + 1)^-s`.
fn zipf_cdf(cardinality: u32, exponent: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(cardinality as usize);
    let mut acc = 0.0;
    for r in 0..cardinality {
        acc += ((r + 1) as f64).powf(-exponent);
        cdf.push(acc);
    }
    for c in &mut cdf {
        *c /= acc;
    }
    cdf
}

fn sample_cdf(cdf: &[f64], u: f64) -> u32 {
    let i = cdf.partition_point(|&c| c <= u);
    i.min(cdf.len() - 1) as u32
}

/// Draws `n_rows` examples. Fully determined by `(spec, n_rows, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, n_rows: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n_rows == 0 {
        return Err(Error::Config("n_rows must be positive".into()));
    }
    let schema = spec.schema()?;
    let n = spec.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let tables: Vec<Vec<f64>> = spec
        .pairs
        .iter()
        .map(|p| {
            let size = spec.cardinalities[p.a] as usize * spec.cardinalities[p.b] as usize;
            if p.scale == 0.0 {
                return vec![0.0; size];
            }
            let normal = Normal::new(0.0, p.scale).expect("validated scale");
            (0..size).map(|_| normal.sample(&mut rng)).collect()
        })
        .collect();
    let cdfs: Vec<Vec<f64>> = spec.cardinalities.iter().map(|&c| zipf_cdf(c, spec.zipf_exponent)).collect();

    let mut ids = Vec::with_capacity(n_rows * n);
    let mut labels = Vec::with_capacity(n_rows);
    let mut logits = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let start = ids.len();
        for cdf in &cdfs {
            ids.push(sample_cdf(cdf, rng.gen::<f64>()));
        }
        let row = &ids[start..];
        let mut logit = spec.bias;
        for (p, table) in spec.pairs.iter().zip(&tables) {
            let cb = spec.cardinalities[p.b] as usize;
            logit += table[row[p.a] as usize * cb + row[p.b] as usize];
        }
        let label = if spec.temperature == 0.0 {
            logit > 0.0
        } else {
            let prob = 1.0 / (1.0 + (-logit / spec.temperature).exp());
            rng.gen::<f64>() < prob
        };
        labels.push(label as u8);
        logits.push(logit);
    }
    let user_ids = spec.user_feature.map(|u| (0..n_rows).map(|r| ids[r * n + u] as u64).collect());
    Ok(Dataset { schema, ids, labels, user_ids, true_logits: Some(logits) })
}
