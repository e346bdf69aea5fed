//! Mini-batch training and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::metrics::EvalReport;
use crate::model::{loss, Model};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state; moment buffers mirror the parameter shapes.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let buffers = || -> Vec<Vec<T>> {
            match config.kind {
                OptimizerKind::Adam => params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        Optimizer { first: buffers(), second: buffers(), config, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let lr = T::lit(self.config.learning_rate);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let param = params.get_mut(id);
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let values = param.value.data_mut();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in values.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
                    let eps = T::lit(self.config.eps);
                    let t = self.step as i32;
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let m = &mut self.first[id.index()];
                    let v = &mut self.second[id.index()];
                    for k in 0..values.len() {
                        let gi = g[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gi;
                        v[k] = b2 * v[k] + (T::one() - b2) * gi * gi;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Stop once held-out AUC has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 256, optimizer: OptimizerConfig::default(), patience: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// `epoch,mean_loss,auc,gauc,logloss` with empty metric cells when no eval set.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,auc,gauc,logloss\n");
        for r in &self.epochs {
            match &r.eval {
                Some(e) => s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.mean_loss, e.auc, e.gauc, e.logloss)),
                None => s.push_str(&format!("{},{},,,\n", r.epoch, r.mean_loss)),
            }
        }
        s
    }
}

/// Trains in place. Shuffling is seeded, so `(model, data, config, seed)`
/// fixes the whole trace.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainTrace> {
    if train_set.is_empty() {
        return Err(Error::data(None, "training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    config.optimizer.validate()?;
    let mut optimizer = Optimizer::new(config.optimizer.clone(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED_5EED_5EED);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = TrainTrace::default();
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.batch(rows);
            let non_finite = |value: f64| Error::NonFiniteLoss { epoch, batch: bi, value };
            let (loss_value, grads) = {
                let mut tape = Tape::with_params(model.params());
                let out = model.forward(&mut tape, &batch).map_err(|e| match e {
                    Error::NonFinite { .. } => non_finite(f64::NAN),
                    other => other,
                })?;
                let l = loss(&mut tape, out.prob, &batch.labels).map_err(|e| match e {
                    Error::NonFinite { .. } => non_finite(f64::NAN),
                    other => other,
                })?;
                let lv = tape.value(l).data()[0].to_f64_lossy();
                if !lv.is_finite() {
                    return Err(non_finite(lv));
                }
                tape.backward(l)?;
                (lv, tape.param_grads())
            };
            optimizer.step(model.params_mut(), &grads);
            total += loss_value * rows.len() as f64;
            count += rows.len();
        }
        let eval = match eval_set {
            Some(ds) => Some(evaluate(model, ds, config.batch_size)?),
            None => None,
        };
        let auc = eval.as_ref().map(|e| e.auc);
        trace.epochs.push(EpochRecord { epoch, mean_loss: total / count as f64, eval });
        if let (Some(p), Some(auc)) = (config.patience, auc) {
            if auc > best_auc {
                best_auc = auc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }
    Ok(trace)
}

/// Click probabilities for every row, in row order.
pub fn predict_dataset<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dataset.len());
    let rows: Vec<usize> = (0..dataset.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let pred = model.predict(&dataset.batch(chunk))?;
        out.extend(pred.y_hat.iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let start = Instant::now();
    let scores = predict_dataset(model, dataset, batch_size)?;
    EvalReport::compute(&scores, &dataset.labels, dataset.user_ids.as_deref(), start.elapsed().as_secs_f64())
}
