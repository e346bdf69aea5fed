//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

mod common;

use std::time::Instant;

use common::{brute_auc, random_ranking, reference::dense_forward, rng};
use mgdin::attention::{build_masks, ScoreMatrix, TopKScope};
use mgdin::experiment::{
    ablation_variants, jobs_for, prepare_data, run_jobs, run_variant, ExperimentConfig, RunOutcome, VARIANT_FULL,
    VARIANT_WITHOUT_DI, VARIANT_WITHOUT_MG,
};
use mgdin::features::FeatureSchema;
use mgdin::gradcheck::{gradcheck, random_batch, reference_setup, DEFAULT_STEP};
use mgdin::metrics::{auc, gauc, logloss};
use mgdin::model::{Model, ModelConfig};
use mgdin::{Tape, Tensor};
use rand::Rng;

const LEARNABILITY: &str = include_str!("../../../configs/learnability.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: u32, title: &str, start: Instant, o: Outcome) -> bool {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{verdict}] {title}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
    o.pass
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (config, schema, batch) = reference_setup(0).unwrap();
    let model = Model::<f64>::build(&config, &schema, 0).unwrap();
    let r = gradcheck(&model, &batch, DEFAULT_STEP).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = r.max_rel_err();
    let nonzero = r.nonzero_frozen();
    Outcome {
        pass: worst < 1e-4 && nonzero.is_empty() && r.frozen_count() > 0 && secs < 120.0,
        detail: format!(
            "max relative error {worst:.2e} over {} trainable tensors (< 1e-4); {} frozen tensors, {} with nonzero gradient",
            r.params.iter().filter(|p| p.trainable).count(),
            r.frozen_count(),
            nonzero.len()
        ),
    }
}

/// `⌊ρ·m²⌋`, at least one cell.
fn expected_count(ratio: f64, m: usize) -> usize {
    (((ratio * (m * m) as f64) + 1e-9).floor() as usize).clamp(1, m * m)
}

fn mask_invariants() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut failures = Vec::new();
    for config in 0..10 {
        let m = r.gen_range(1..=12);
        let layers = r.gen_range(1..=5);
        let mut ratios: Vec<f64> = (0..layers - 1).map(|_| r.gen_range(0.0..1.0)).collect();
        ratios.sort_by(f64::total_cmp);
        ratios.push(1.0);
        let values: Vec<f64> = (0..100 * m * m).map(|_| r.gen_range(-3.0..3.0)).collect();
        let a0 = ScoreMatrix { values: Tensor::new(vec![100, m, m], values).unwrap() };
        let s = build_masks(&a0, &ratios, TopKScope::Global).unwrap();
        for b in 0..100 {
            let scores = a0.example(b);
            for l in 1..=layers {
                let active: Vec<bool> = (0..m * m).map(|c| s.is_active(b, l, c / m, c % m)).collect();
                let ones = active.iter().filter(|&&a| a).count();
                if ones != expected_count(ratios[l - 1], m) {
                    failures.push(format!("config {config} example {b} layer {l}: {ones} ones"));
                }
                if l > 1 && (0..m * m).any(|c| s.is_active(b, l - 1, c / m, c % m) && !active[c]) {
                    failures.push(format!("config {config} example {b}: layer {} not inside layer {l}", l - 1));
                }
                let lowest_active = (0..m * m).filter(|&c| active[c]).map(|c| scores[c]).fold(f64::INFINITY, f64::min);
                if (0..m * m).any(|c| !active[c] && scores[c] > lowest_active) {
                    failures.push(format!("config {config} example {b} layer {l}: a stronger cell was left out"));
                }
            }
            if (0..m * m).any(|c| !s.is_active(b, layers, c / m, c % m)) {
                failures.push(format!("config {config} example {b}: final mask not full"));
            }
        }
    }
    let scores = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let ks = build_masks(&ScoreMatrix { values: scores }, &mgdin::attention::default_ratios(3), TopKScope::Global)
        .unwrap()
        .counts()
        .to_vec();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: failures.is_empty() && ks == [5, 10, 16] && secs < 10.0,
        detail: format!(
            "1000 examples over 10 configs, {} violations{}; k for L=3, m=4 is {ks:?} (expected [5, 10, 16])",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    }
}

fn dense_equivalence() -> Outcome {
    let start = Instant::now();
    let schema = FeatureSchema::with_default_names(vec![1000, 1000, 10, 10, 4, 4, 2, 2]).unwrap();
    let config = ModelConfig {
        granularities: vec![1, 2],
        layers: 3,
        ratios: Some(vec![1.0, 1.0, 1.0]),
        d_embed: 4,
        d_model: 8,
        head_hidden: vec![8],
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(&config, &schema, 3).unwrap();
    let mut worst: f64 = 0.0;
    for b in 0..50 {
        let batch = random_batch(&schema, 8, 100 + b).unwrap();
        let fast = model.predict(&batch).unwrap().y_hat;
        let reference = dense_forward(&model, &batch);
        for (x, y) in fast.iter().zip(&reference) {
            worst = worst.max((x - y).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-6 && secs < 30.0,
        detail: format!("max |ŷ − reference| over 50 batches {worst:.2e} (≤ 1e-6)"),
    }
}

fn mask_storage() -> Outcome {
    let schema = FeatureSchema::with_default_names(vec![3; 128]).unwrap();
    let config = ModelConfig {
        granularities: vec![32, 64, 96, 128],
        layers: 3,
        d_embed: 1,
        d_model: 4,
        head_hidden: vec![],
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(&config, &schema, 1).unwrap();
    let batch = random_batch(&schema, 2, 2).unwrap();
    let mut tape = Tape::with_params(model.params());
    let out = model.forward(&mut tape, &batch).unwrap();
    let measured: usize = out.masks.iter().map(|m| m.entries_per_example()).sum();
    Outcome {
        pass: measured == 25 && measured < 128 * 128,
        detail: format!("measured {measured} mask entries per example (expected 16+4+4+1 = 25, dense would be 16384)"),
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(55);
    let mismatches = (0..200)
        .filter(|_| {
            let (s, y) = random_ranking(&mut r, 50);
            auc(&s, &y).unwrap() != brute_auc(&s, &y)
        })
        .count();
    let g = gauc(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1, 0.2, 0.8], &[1, 1, 1, 0, 0, 0, 1, 0], &[1, 1, 1, 1, 1, 1, 2, 2])
        .unwrap()
        .value;
    let ll = logloss(&[0.5; 6], &[1, 0, 1, 1, 0, 0]);
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: mismatches == 0 && g == 0.75 && (ll - std::f64::consts::LN_2).abs() <= 1e-12 && secs < 10.0,
        detail: format!(
            "{mismatches}/200 AUC mismatches vs pair counting; GAUC 3:1 weighted example {g} (expected 0.75); logloss at 0.5 minus ln 2 = {:.1e}",
            ll - std::f64::consts::LN_2
        ),
    }
}

fn printed(o: &RunOutcome) -> String {
    format!("AUC {:.6} GAUC {:.6} LogLoss {:.6}", o.report.auc, o.report.gauc, o.report.logloss)
}

fn main() {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    all &= report(2, "mask schedule invariants", t, mask_invariants());
    let t = Instant::now();
    all &= report(3, "dense-ratio equivalence", t, dense_equivalence());
    let t = Instant::now();
    all &= report(4, "mask storage", t, mask_storage());
    let t = Instant::now();
    all &= report(5, "metric oracles", t, metric_oracles());

    let cfg = ExperimentConfig::from_toml_str(LEARNABILITY).unwrap();
    cfg.validate().unwrap();
    let data = prepare_data(&cfg.data).unwrap();
    let oracle = data.oracle_auc.unwrap();
    let variants = ablation_variants(&cfg.model);
    let seeds = cfg.training.seeds.clone();
    let t = Instant::now();
    let outcomes: Vec<RunOutcome> = run_jobs(&jobs_for(&variants, &seeds), &data, &cfg.training, 1, false, |_, r| {
        if let Ok(o) = r {
            eprintln!("  {} seed {}: {} ({:.1} s)", o.variant, o.seed, printed(o), o.wall_time_secs);
        }
    })
    .into_iter()
    .map(|r| r.unwrap())
    .collect();
    let runs_secs = t.elapsed().as_secs_f64();

    let first = outcomes.iter().find(|o| o.variant == VARIANT_FULL && o.seed == seeds[0]).unwrap();
    let ratio = first.report.auc / oracle;
    all &= report(
        6,
        "synthetic learnability",
        t,
        Outcome {
            pass: ratio >= 0.95 && first.wall_time_secs < 900.0,
            detail: format!(
                "seed {} test AUC {:.4} vs oracle {:.4}, ratio {ratio:.4} (≥ 0.95), training {:.1} s",
                seeds[0], first.report.auc, oracle, first.wall_time_secs
            ),
        },
    );

    let mean_auc = |name: &str| {
        let v: Vec<f64> = outcomes.iter().filter(|o| o.variant == name).map(|o| o.report.auc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (full, no_di, no_mg) = (mean_auc(VARIANT_FULL), mean_auc(VARIANT_WITHOUT_DI), mean_auc(VARIANT_WITHOUT_MG));
    all &= report(
        7,
        "directional ablation",
        t,
        Outcome {
            pass: full >= no_di && full >= no_mg,
            detail: format!(
                "mean AUC over {} seeds: {VARIANT_FULL} {full:.4}, {VARIANT_WITHOUT_DI} {no_di:.4} ({:+.4}), {VARIANT_WITHOUT_MG} {no_mg:.4} ({:+.4}); {runs_secs:.0} s for all runs",
                seeds.len(),
                full - no_di,
                full - no_mg
            ),
        },
    );

    let t = Instant::now();
    let again = run_variant(&variants[0], &data, &cfg.training, seeds[0], false).unwrap();
    let same_bits = again.report.auc == first.report.auc
        && again.report.gauc.to_bits() == first.report.gauc.to_bits()
        && again.report.logloss == first.report.logloss;
    all &= report(
        8,
        "determinism",
        t,
        Outcome {
            pass: printed(&again) == printed(first) && same_bits,
            detail: format!("first run {} / repeat {}", printed(first), printed(&again)),
        },
    );

    if !all {
        std::process::exit(1);
    }
}
