use serde::{Deserialize, Serialize};

use crate::attention::{default_ratios, validate_ratios, ScoreNormalization, TopKScope};
use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::grouping::{validate_order, GroupCombine, WindowSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over each window's tokens.
    #[default]
    Mean,
    Sum,
    Max,
}

/// Architecture and ablation switches. Both ablation variants are plain
/// settings here: `without_mg` requires a single granularity and
/// `without_di` forces every sparsity ratio to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub granularities: Vec<usize>,
    pub layers: usize,
    /// Per-layer sparsity ratios ρ_l; `None` means `l / L`.
    pub ratios: Option<Vec<f64>>,
    pub d_embed: usize,
    pub d_model: usize,
    /// Feed-forward hidden width; `None` means `2 · d_model`.
    pub d_ff: Option<usize>,
    pub head_hidden: Vec<usize>,
    pub pooling: Pooling,
    pub combine: GroupCombine,
    pub without_mg: bool,
    pub without_di: bool,
    pub score_normalization: ScoreNormalization,
    pub topk_scope: TopKScope,
    /// Compute layer-0 scores with layer 1's query/key instead of separate frozen ones.
    pub tie_q0: bool,
    /// Fixed permutation of features applied before grouping.
    pub feature_order: Option<Vec<usize>>,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            granularities: vec![2, 4],
            layers: 3,
            ratios: None,
            d_embed: 8,
            d_model: 32,
            d_ff: None,
            head_hidden: vec![64, 32],
            pooling: Pooling::Mean,
            combine: GroupCombine::Concat,
            without_mg: false,
            without_di: false,
            score_normalization: ScoreNormalization::None,
            topk_scope: TopKScope::Global,
            tie_q0: false,
            feature_order: None,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d_model)
    }

    /// Ratios actually used to build masks.
    pub fn effective_ratios(&self) -> Vec<f64> {
        if self.without_di {
            vec![1.0; self.layers]
        } else {
            self.ratios.clone().unwrap_or_else(|| default_ratios(self.layers))
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec { granularities: self.granularities.clone(), d_model: self.d_model }
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        schema.validate()?;
        let n = schema.n_features();
        self.window_spec().validate(n)?;
        if self.without_mg && self.granularities.len() != 1 {
            return Err(Error::Config(format!(
                "without_mg uses a single window but {} granularities are configured",
                self.granularities.len()
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if let Some(r) = &self.ratios {
            validate_ratios(r, self.layers)?;
        }
        if self.d_embed == 0 || self.d_ff() == 0 {
            return Err(Error::Config("d_embed and d_ff must be positive".into()));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("head hidden widths must be positive".into()));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        if let Some(o) = &self.feature_order {
            validate_order(o, n)?;
        }
        Ok(())
    }
}
