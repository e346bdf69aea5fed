use std::path::PathBuf;

use mgdin::experiment::{
    ablation_variants, jobs_for, prepare_data, run_jobs, ExperimentConfig, ResultRow, ResultsTable, VARIANT_FULL,
};
use mgdin::Error;

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(path).unwrap()
}

fn smoke() -> ExperimentConfig {
    let mut c = shipped("smoke.toml");
    c.data.n_train = 400;
    c.data.n_test = 200;
    c.training.train.epochs = 1;
    c
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    for name in ["learnability.toml", "smoke.toml"] {
        let c = shipped(name);
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
    }
}

#[test]
fn unknown_keys_and_versions_are_rejected() {
    let text = smoke().to_toml_string().unwrap();
    let typo = text.replace("[model]", "[model]\nlayer_count = 3");
    assert!(matches!(ExperimentConfig::from_toml_str(&typo), Err(Error::Config(_))));
    let mut c = smoke();
    c.version = 2;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn synthetic_data_split_carries_an_oracle() {
    let c = smoke();
    let d = prepare_data(&c.data).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (400, 200));
    let oracle = d.oracle_auc.unwrap();
    assert!(oracle > 0.5 && oracle <= 1.0);
}

#[test]
fn parallel_jobs_match_sequential_jobs() {
    let c = smoke();
    let data = prepare_data(&c.data).unwrap();
    let jobs = jobs_for(&ablation_variants(&c.model), &c.training.seeds);
    assert_eq!(jobs.len(), 6);
    assert_eq!(jobs[0].variant.name, VARIANT_FULL);
    let rows = |threads| {
        let mut seen = 0;
        let out = run_jobs(&jobs, &data, &c.training, threads, true, |_, _| seen += 1);
        assert_eq!(seen, jobs.len());
        out.into_iter()
            .map(|r| {
                let o = r.unwrap();
                (o.variant.clone(), o.seed, o.report.auc, o.report.logloss, o.checkpoint.unwrap())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(1), rows(3));
}

#[test]
fn results_table_lists_every_run_and_aggregate() {
    let c = smoke();
    let data = prepare_data(&c.data).unwrap();
    let jobs = jobs_for(&ablation_variants(&c.model), &c.training.seeds);
    let mut table = ResultsTable::default();
    for r in run_jobs(&jobs, &data, &c.training, 1, false, |_, _| {}) {
        table.push(ResultRow::from_outcome(&r.unwrap()));
    }
    let csv = table.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 3 * 2);
    let text = table.to_text();
    assert!(text.contains("w/o MG") && text.contains("w/o DI") && text.contains(" ± "));
}

#[test]
fn readme_config_example_parses_and_validates() {
    let readme = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
    let end = start + readme[start..].find("```").unwrap();
    let c = ExperimentConfig::from_toml_str(&readme[start..end]).unwrap();
    c.validate().unwrap();
    assert_eq!(c.training.train.patience, Some(2));
}
