//! CSV datasets: header `f_0,…,f_{n-1},label[,user_id]`, integer ids, one row per line.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::data::{Dataset, FeatureSchema};

/// 64-bit FNV-1a over the decimal ASCII digits of `id`, reduced mod `cardinality`.
///
/// Applied to ids at or above a feature's cardinality so unseen values land
/// on a stable in-range row without a vocabulary pass.
pub fn oov_hash(id: u64, cardinality: u32) -> u32 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in id.to_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    (h % cardinality as u64) as u32
}

/// Reads a dataset, checking the header against `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let path = path.as_ref();
    schema.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| Error::data(Some(1), format!("unreadable header: {e}")))?.clone();

    let n = schema.n_features();
    let find = |name: &str| header.iter().position(|h| h == name);
    let mut feature_cols = Vec::with_capacity(n);
    for name in &schema.names {
        feature_cols.push(find(name).ok_or_else(|| Error::data(Some(1), format!("missing column {name:?}")))?);
    }
    let label_col = find("label").ok_or_else(|| Error::data(Some(1), "missing column \"label\""))?;
    let user_col = find("user_id");
    let known = n + 1 + user_col.is_some() as usize;
    if header.len() != known {
        let extra: Vec<&str> = header
            .iter()
            .filter(|h| *h != "label" && *h != "user_id" && !schema.names.iter().any(|s| s == h))
            .collect();
        return Err(Error::data(Some(1), format!("unexpected columns {extra:?}")));
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut users = user_col.map(|_| Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line());
            Error::data(line, format!("malformed record: {e}"))
        })?;
        let line = record.position().map(|p| p.line());
        for (j, &col) in feature_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("");
            let id: u64 = raw.trim().parse().map_err(|_| {
                Error::data(line, format!("feature {}: {raw:?} is not a non-negative integer id", schema.names[j]))
            })?;
            let card = schema.cardinalities[j];
            ids.push(if id < card as u64 { id as u32 } else { oov_hash(id, card) });
        }
        let raw = record.get(label_col).unwrap_or("");
        let label = match raw.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::data(line, format!("label {other:?} is not 0 or 1"))),
        };
        labels.push(label);
        if let (Some(col), Some(us)) = (user_col, users.as_mut()) {
            let raw = record.get(col).unwrap_or("");
            us.push(raw.trim().parse().map_err(|_| Error::data(line, format!("user_id {raw:?} is not an integer")))?);
        }
    }
    if labels.is_empty() {
        return Err(Error::data(None, format!("{} has no data rows", path.display())));
    }
    Ok(Dataset { schema: schema.clone(), ids, labels, user_ids: users, true_logits: None })
}

/// Writes ids, labels and user ids (when present). True logits are not part
/// of the CSV format.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    let to_err = |e: csv::Error| Error::data(None, format!("writing {}: {e}", path.display()));
    let mut header: Vec<&str> = dataset.schema.names.iter().map(String::as_str).collect();
    header.push("label");
    if dataset.user_ids.is_some() {
        header.push("user_id");
    }
    w.write_record(&header).map_err(to_err)?;
    let mut fields = Vec::with_capacity(header.len());
    for r in 0..dataset.len() {
        fields.clear();
        fields.extend(dataset.row(r).iter().map(|id| id.to_string()));
        fields.push(dataset.labels[r].to_string());
        if let Some(u) = &dataset.user_ids {
            fields.push(u[r].to_string());
        }
        w.write_record(&fields).map_err(to_err)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::data(None, format!("flushing {}: {e}", path.display())))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
