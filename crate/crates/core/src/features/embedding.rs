use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::data::{FeatureBatch, FeatureSchema};

/// Per-feature embedding matrices stored back to back in one
/// `[Σ cardinality, d_embed]` parameter, plus a shared trainable null row
/// used to pad incomplete feature groups.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub d_embed: usize,
    pub table: ParamId,
    pub null: ParamId,
    offsets: Vec<usize>,
    cardinalities: Vec<u32>,
    names: Vec<String>,
}

impl EmbeddingTable {
    /// Allocates and initializes uniformly in `±1/√d_embed`.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        schema: &FeatureSchema,
        d_embed: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_embed == 0 {
            return Err(Error::Config("d_embed must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(schema.n_features());
        let mut total = 0usize;
        for &c in &schema.cardinalities {
            offsets.push(total);
            total += c as usize;
        }
        let bound = 1.0 / (d_embed as f64).sqrt();
        let table = Tensor::from_fn(vec![total, d_embed], |_| T::lit(rng.gen_range(-bound..bound)));
        let null = Tensor::from_fn(vec![d_embed], |_| T::lit(rng.gen_range(-bound..bound)));
        Ok(EmbeddingTable {
            d_embed,
            table: store.add("embedding.table", table, true),
            null: store.add("embedding.null", null, true),
            offsets,
            cardinalities: schema.cardinalities.clone(),
            names: schema.names.clone(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.offsets.len()
    }

    /// Row of `table` holding feature `feature`'s embedding for `id`.
    pub fn row_index(&self, feature: usize, id: u32) -> usize {
        self.offsets[feature] + id as usize
    }

    /// Looks up every id of the batch: output `[batch, n_features, d_embed]`.
    pub fn embed_batch<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &FeatureBatch) -> Result<Var> {
        let n = self.n_features();
        if batch.n_features != n {
            return Err(Error::data(None, format!("batch has {} features, schema has {n}", batch.n_features)));
        }
        let mut rows = Vec::with_capacity(batch.ids.len());
        for (k, &id) in batch.ids.iter().enumerate() {
            let j = k % n;
            if id >= self.cardinalities[j] {
                return Err(Error::data(
                    None,
                    format!(
                        "row {}: id {id} for feature {} is outside cardinality {}",
                        k / n,
                        self.names[j],
                        self.cardinalities[j]
                    ),
                ));
            }
            rows.push(self.offsets[j] + id as usize);
        }
        let table = tape.param(self.table)?;
        tape.embedding(table, rows, &[batch.batch_size(), n])
    }
}
