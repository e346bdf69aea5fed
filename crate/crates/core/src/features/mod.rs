//! Categorical feature inputs: schema, batches, embedding tables, the
//! synthetic heterogeneous-CTR generator and CSV ingestion.

mod csv_io;
mod data;
mod embedding;
mod synthetic;

pub use csv_io::{load_csv, oov_hash, write_csv};
pub use data::{Dataset, FeatureBatch, FeatureSchema};
pub use embedding::EmbeddingTable;
pub use synthetic::{generate_synthetic, InteractionPair, SyntheticSpec};
