//! Loop-based forward pass that never builds a mask: every pair of tokens
//! interacts. Reads parameters by name, so it shares nothing with the tape code.

use mgdin::features::FeatureBatch;
use mgdin::grouping::GroupCombine;
use mgdin::model::{Model, Pooling};

type Mat = Vec<Vec<f64>>;

fn param(model: &Model<f64>, name: &str) -> (Vec<usize>, Vec<f64>) {
    let id = model.params().by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = model.params().value(id);
    (t.shape().to_vec(), t.data().to_vec())
}

fn matrix(model: &Model<f64>, name: &str) -> Mat {
    let (shape, data) = param(model, name);
    data.chunks(shape[1]).map(|r| r.to_vec()).collect()
}

fn vector(model: &Model<f64>, name: &str) -> Vec<f64> {
    param(model, name).1
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter().map(|row| (0..w[0].len()).map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum()).collect()).collect()
}

fn add_bias(x: &mut Mat, b: &[f64]) {
    for row in x {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]).collect()
        })
        .collect()
}

fn elementwise_add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect()
}

/// Predicted probabilities for `batch` with unmasked attention in every layer.
pub fn dense_forward(model: &Model<f64>, batch: &FeatureBatch) -> Vec<f64> {
    let cfg = model.config();
    let n = batch.n_features;
    let table = matrix(model, "embedding.table");
    let null = vector(model, "embedding.null");
    let mut offsets = vec![0usize; n];
    for j in 1..n {
        offsets[j] = offsets[j - 1] + model.schema().cardinalities[j - 1] as usize;
    }

    let mut out = Vec::with_capacity(batch.batch_size());
    for b in 0..batch.batch_size() {
        let ids = batch.row(b);
        let emb: Mat = (0..n).map(|j| table[offsets[j] + ids[j] as usize].clone()).collect();
        let mut pooled = Vec::new();
        for (h, &g) in cfg.granularities.iter().enumerate() {
            let m = n.div_ceil(g);
            let slot = |s: usize| -> &Vec<f64> {
                if s < n {
                    &emb[cfg.feature_order.as_ref().map_or(s, |o| o[s])]
                } else {
                    &null
                }
            };
            let tokens: Mat = (0..m)
                .map(|i| match cfg.combine {
                    GroupCombine::Concat => (0..g).flat_map(|k| slot(i * g + k).clone()).collect(),
                    GroupCombine::Sum => {
                        let mut acc = vec![0.0; null.len()];
                        for k in 0..g {
                            for (a, v) in acc.iter_mut().zip(slot(i * g + k)) {
                                *a += v;
                            }
                        }
                        acc
                    }
                })
                .collect();
            let mut x = matmul(&tokens, &matrix(model, &format!("window{h}.proj")));
            add_bias(&mut x, &vector(model, &format!("window{h}.proj_bias")));

            for l in 1..=cfg.layers {
                let p = |s: &str| format!("window{h}.layer{l}.{s}");
                let q = matmul(&x, &matrix(model, &p("query")));
                let k = matmul(&x, &matrix(model, &p("key")));
                let v = matmul(&x, &matrix(model, &p("value")));
                let z: Mat = (0..m)
                    .map(|i| {
                        let mut row = vec![0.0; v[0].len()];
                        for j in 0..m {
                            let s: f64 = q[i].iter().zip(&k[j]).map(|(a, c)| a * c).sum();
                            for (r, vj) in row.iter_mut().zip(&v[j]) {
                                *r += s * vj;
                            }
                        }
                        row
                    })
                    .collect();
                let eps = cfg.layer_norm_eps;
                let z_hat = layer_norm(
                    &elementwise_add(&z, &x),
                    &vector(model, &p("norm1_gain")),
                    &vector(model, &p("norm1_bias")),
                    eps,
                );
                let mut hid = matmul(&z_hat, &matrix(model, &p("ffn_in")));
                add_bias(&mut hid, &vector(model, &p("ffn_in_bias")));
                for row in &mut hid {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                let mut f = matmul(&hid, &matrix(model, &p("ffn_out")));
                add_bias(&mut f, &vector(model, &p("ffn_out_bias")));
                x = layer_norm(
                    &elementwise_add(&f, &z_hat),
                    &vector(model, &p("norm2_gain")),
                    &vector(model, &p("norm2_bias")),
                    eps,
                );
            }

            let d = x[0].len();
            for c in 0..d {
                let col = x.iter().map(|r| r[c]);
                pooled.push(match cfg.pooling {
                    Pooling::Mean => col.sum::<f64>() / m as f64,
                    Pooling::Sum => col.sum::<f64>(),
                    Pooling::Max => col.fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }

        let mut hidden = vec![pooled];
        let n_head = cfg.head_hidden.len() + 1;
        for i in 0..n_head {
            hidden = matmul(&hidden, &matrix(model, &format!("head.{i}.weight")));
            add_bias(&mut hidden, &vector(model, &format!("head.{i}.bias")));
            if i + 1 < n_head {
                for v in hidden[0].iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        out.push(1.0 / (1.0 + (-hidden[0][0]).exp()));
    }
    out
}
