//! AUC, GAUC and LogLoss.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PROB_EPS;

/// Twice the number of correctly ordered (positive, negative) pairs, with
/// ties counted once (i.e. as half a pair), plus the positive and negative counts.
///
/// Sorts once, so `O(N log N)`.
pub fn auc_pair_counts(scores: &[f64], labels: &[u8]) -> Result<(u128, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_correct: u128 = 0;
    let mut neg_below: u64 = 0;
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        twice_correct += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        neg_below += neg;
        n_pos += pos;
        n_neg += neg;
    }
    Ok((twice_correct, n_pos, n_neg))
}

/// Probability that a random positive outranks a random negative (ties ½).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (twice, p, n) = auc_pair_counts(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({p} positive, {n} negative)")));
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAuc {
    pub value: f64,
    /// Users with both classes present.
    pub n_users: usize,
}

/// Impression-weighted mean of per-user AUC over users having both classes,
/// weights renormalized over those users.
pub fn gauc(scores: &[f64], labels: &[u8], users: &[u64]) -> Result<GroupAuc> {
    if users.len() != scores.len() || labels.len() != scores.len() {
        return Err(Error::UndefinedMetric("scores, labels and users differ in length".into()));
    }
    let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &u) in users.iter().enumerate() {
        by_user.entry(u).or_default().push(i);
    }
    let mut scored: Vec<(f64, f64)> = Vec::new();
    for rows in by_user.values() {
        let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
        let y: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == y.len() {
            continue;
        }
        scored.push((rows.len() as f64, auc(&s, &y)?));
    }
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no user has both a positive and a negative".into()));
    }
    let total: f64 = scored.iter().map(|&(w, _)| w).sum();
    let value = scored.iter().map(|&(w, a)| (w / total) * a).sum();
    Ok(GroupAuc { value, n_users: scored.len() })
}

/// Mean negative log-likelihood with scores clamped to `[1e-12, 1 − 1e-12]`.
pub fn logloss(scores: &[f64], labels: &[u8]) -> f64 {
    let y: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    crate::tensor::bce_mean(scores, &y, PROB_EPS)
}

/// Metric triple for one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    /// NaN when no user grouping is available.
    pub gauc: f64,
    pub logloss: f64,
    pub n_examples: usize,
    pub n_users_scored: usize,
    pub wall_time_secs: f64,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[u8], users: Option<&[u64]>, wall_time_secs: f64) -> Result<Self> {
        let auc = auc(scores, labels)?;
        let (gauc, n_users_scored) = match users {
            Some(u) => match gauc(scores, labels, u) {
                Ok(g) => (g.value, g.n_users),
                Err(Error::UndefinedMetric(_)) => (f64::NAN, 0),
                Err(e) => return Err(e),
            },
            None => (f64::NAN, 0),
        };
        Ok(EvalReport {
            auc,
            gauc,
            logloss: logloss(scores, labels),
            n_examples: scores.len(),
            n_users_scored,
            wall_time_secs,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        self.to_string()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::data(None, format!("not a key=value line: {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get =
            |k: &str| -> Result<&String> { map.get(k).ok_or_else(|| Error::data(None, format!("missing key {k}"))) };
        let num =
            |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::data(None, format!("bad number for {k}"))) };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::data(None, format!("bad integer for {k}")))
        };
        Ok(EvalReport {
            auc: num("auc")?,
            gauc: num("gauc")?,
            logloss: num("logloss")?,
            n_examples: int("n_examples")?,
            n_users_scored: int("n_users_scored")?,
            wall_time_secs: num("wall_time_secs")?,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "auc={}", self.auc)?;
        writeln!(f, "gauc={}", self.gauc)?;
        writeln!(f, "logloss={}", self.logloss)?;
        writeln!(f, "n_examples={}", self.n_examples)?;
        writeln!(f, "n_users_scored={}", self.n_users_scored)?;
        writeln!(f, "wall_time_secs={}", self.wall_time_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn gauc_weights_by_impressions() {
        // user 1: 3 impressions, perfectly ordered; user 2: 1 impression... needs
        // both classes, so give it 2 rows inverted and check the weighting.
        let scores = [0.9, 0.1, 0.8, 0.2, 0.7];
        let labels = [1, 0, 1, 1, 0];
        let users = [1, 1, 1, 2, 2];
        let g = gauc(&scores, &labels, &users).unwrap();
        assert_eq!(g.n_users, 2);
        assert!((g.value - (3.0 * 1.0 + 2.0 * 0.0) / 5.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_users_are_skipped() {
        let g = gauc(&[0.2, 0.9, 0.5], &[0, 1, 1], &[7, 7, 8]).unwrap();
        assert_eq!(g.n_users, 1);
        assert_eq!(g.value, 1.0);
        assert!(gauc(&[0.2, 0.9], &[1, 1], &[1, 2]).is_err());
    }

    #[test]
    fn logloss_at_half_is_ln2() {
        let l = logloss(&[0.5; 4], &[0, 1, 1, 0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(logloss(&[0.0, 1.0], &[0, 1]) < 1e-10);
    }

    #[test]
    fn report_kv_round_trip() {
        let r = EvalReport::compute(&[0.2, 0.7, 0.6], &[0, 1, 0], Some(&[1, 1, 1]), 0.25).unwrap();
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
    }
}
