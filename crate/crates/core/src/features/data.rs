use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names and cardinalities of the `n` categorical input features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub cardinalities: Vec<u32>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>, cardinalities: Vec<u32>) -> Result<Self> {
        let s = FeatureSchema { names, cardinalities };
        s.validate()?;
        Ok(s)
    }

    /// Features named `f_0 .. f_{n-1}`.
    pub fn with_default_names(cardinalities: Vec<u32>) -> Result<Self> {
        let names = (0..cardinalities.len()).map(|i| format!("f_{i}")).collect();
        Self::new(names, cardinalities)
    }

    pub fn n_features(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(Error::Config("schema needs at least one feature".into()));
        }
        if self.names.len() != self.cardinalities.len() {
            return Err(Error::Config(format!(
                "{} feature names for {} cardinalities",
                self.names.len(),
                self.cardinalities.len()
            )));
        }
        if let Some(i) = self.cardinalities.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("feature {} has cardinality 0", self.names[i])));
        }
        for (i, name) in self.names.iter().enumerate() {
            if name == "label" || name == "user_id" || self.names[..i].contains(name) {
                return Err(Error::Config(format!("feature name {name:?} is reserved or repeated")));
            }
        }
        Ok(())
    }
}

/// Mini-batch of examples: `ids` is row-major `batch_size × n_features`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureBatch {
    pub n_features: usize,
    pub ids: Vec<u32>,
    pub labels: Vec<u8>,
    pub user_ids: Option<Vec<u64>>,
}

impl FeatureBatch {
    pub fn new(n_features: usize, ids: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        let b = FeatureBatch { n_features, ids, labels, user_ids: None };
        b.validate()?;
        Ok(b)
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.labels.is_empty() {
            return Err(Error::data(None, "empty batch"));
        }
        if self.ids.len() != self.labels.len() * self.n_features {
            return Err(Error::data(
                None,
                format!("{} ids for {} rows of {} features", self.ids.len(), self.labels.len(), self.n_features),
            ));
        }
        if let Some(i) = self.labels.iter().position(|&y| y > 1) {
            return Err(Error::data(None, format!("label {} in row {i} is not 0 or 1", self.labels[i])));
        }
        if let Some(u) = &self.user_ids {
            if u.len() != self.labels.len() {
                return Err(Error::data(None, "user id count differs from row count"));
            }
        }
        Ok(())
    }
}

/// In-memory dataset. `true_logits` is only present for generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub ids: Vec<u32>,
    pub labels: Vec<u8>,
    pub user_ids: Option<Vec<u64>>,
    pub true_logits: Option<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let n = self.schema.n_features();
        &self.ids[i * n..(i + 1) * n]
    }

    /// Batch made of the given row indices, in order.
    pub fn batch(&self, rows: &[usize]) -> FeatureBatch {
        let n = self.schema.n_features();
        let mut ids = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
        }
        FeatureBatch {
            n_features: n,
            ids,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            user_ids: self.user_ids.as_ref().map(|u| rows.iter().map(|&r| u[r]).collect()),
        }
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let n = self.schema.n_features();
        Dataset {
            schema: self.schema.clone(),
            ids: self.ids[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
            user_ids: self.user_ids.as_ref().map(|u| u[start..end].to_vec()),
            true_logits: self.true_logits.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    /// First `n_train` rows and the remainder.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n_train = n_train.min(self.len());
        (self.slice(0, n_train), self.slice(n_train, self.len()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let n = self.schema.n_features();
        if self.ids.len() != self.labels.len() * n {
            return Err(Error::data(None, "id matrix does not match row count"));
        }
        for (k, &id) in self.ids.iter().enumerate() {
            let j = k % n;
            if id >= self.schema.cardinalities[j] {
                return Err(Error::data(
                    None,
                    format!(
                        "row {}: id {id} of feature {} exceeds cardinality {}",
                        k / n,
                        self.schema.names[j],
                        self.schema.cardinalities[j]
                    ),
                ));
            }
        }
        if let Some(i) = self.labels.iter().position(|&y| y > 1) {
            return Err(Error::data(None, format!("row {i}: label {} not in {{0,1}}", self.labels[i])));
        }
        Ok(())
    }
}
