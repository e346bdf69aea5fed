use std::path::PathBuf;

use mgdin::experiment::{
    ablation_variants, jobs_for, prepare_data, run_jobs, sweep_variants, ExperimentConfig, PreparedData, ResultRow,
    ResultsTable, RunOutcome, SweepAxis, TableFormat, Variant, VARIANT_FULL, VARIANT_WITHOUT_DI, VARIANT_WITHOUT_MG,
};
use mgdin::features::{generate_synthetic, write_csv, SyntheticSpec};
use mgdin::gradcheck::{gradcheck as run_gradcheck, reference_setup, DEFAULT_STEP};
use mgdin::metrics::{auc, EvalReport};
use mgdin::model::{read_checkpoint_header, Model};
use mgdin::train::evaluate;
use mgdin::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::run_dir::{io, slug, write_file, Manifest, RunDir};
use crate::{Common, EvalArgs, GradcheckArgs, SweepArgs, TrainArgs};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Loads the file and applies flag overrides (flags > file > defaults).
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if let Some(seed) = common.seed {
        cfg.training.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

/// Written next to a generated dataset.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub crate_version: String,
    pub seed: u64,
    pub n_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// AUC of the true logits over all rows.
    pub oracle_auc: f64,
    /// AUC of the true logits over the held-out rows.
    pub oracle_auc_test: f64,
    pub synthetic: SyntheticSpec,
}

pub fn generate(args: &Common, _argv: &[String]) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    cfg.data.validate()?;
    let spec =
        cfg.data.synthetic.clone().ok_or_else(|| Error::Config("generate needs a [data.synthetic] section".into()))?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    if out.exists() && !args.force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", out.display())));
    }
    std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;

    let n_rows = cfg.data.n_train + cfg.data.n_test;
    let data = generate_synthetic(&spec, n_rows, cfg.data.seed)?;
    let logits = data.true_logits.as_ref().expect("generated data keeps its logits");
    let (_, test) = data.split(cfg.data.n_train);
    let manifest = DatasetManifest {
        crate_version: mgdin::VERSION.to_string(),
        seed: cfg.data.seed,
        n_rows,
        n_train: cfg.data.n_train,
        n_test: cfg.data.n_test,
        oracle_auc: auc(logits, &data.labels)?,
        oracle_auc_test: auc(test.true_logits.as_ref().expect("split keeps logits"), &test.labels)?,
        synthetic: spec,
    };

    write_csv(&data, out.join("data.csv"))?;
    let mut text = String::from("logit\n");
    for l in logits {
        text.push_str(&format!("{l}\n"));
    }
    write_file(&out.join("true_logits.csv"), text)?;
    let manifest_text = toml::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out.join("manifest.toml"), manifest_text)?;
    println!("wrote {n_rows} rows to {}", out.display());
    println!("oracle AUC (all rows) {:.6}, held-out {:.6}", manifest.oracle_auc, manifest.oracle_auc_test);
    Ok(())
}

pub fn train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.training.train.epochs = e;
    }
    let variants = vec![Variant { name: VARIANT_FULL.to_string(), model: cfg.model.clone() }];
    let (_, table, data) = run_experiment("train", &cfg, &variants, args.common.jobs, argv, None)?;
    if let Some(oracle) = data.oracle_auc {
        for r in &table.rows {
            println!("seed {}: AUC / oracle AUC = {:.6} / {:.6} = {:.4}", r.seed, r.auc, oracle, r.auc / oracle);
        }
    }
    Ok(())
}

pub fn ablate(args: &Common, argv: &[String]) -> Result<()> {
    let cfg = load_config(args)?;
    let (_, table, _) = run_experiment("ablate", &cfg, &ablation_variants(&cfg.model), args.jobs, argv, None)?;
    let mean = |name: &str| table.aggregates().into_iter().find(|a| a.variant == name).map(|a| a.auc.mean);
    if let (Some(full), Some(no_di), Some(no_mg)) =
        (mean(VARIANT_FULL), mean(VARIANT_WITHOUT_DI), mean(VARIANT_WITHOUT_MG))
    {
        let mark = |ok: bool| if ok { "holds" } else { "does not hold" };
        println!("{VARIANT_FULL} >= {VARIANT_WITHOUT_DI} (mean AUC): {} ({:+.4})", mark(full >= no_di), full - no_di);
        println!("{VARIANT_FULL} >= {VARIANT_WITHOUT_MG} (mean AUC): {} ({:+.4})", mark(full >= no_mg), full - no_mg);
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let axis = SweepAxis::from(args.axis);
    let variants = sweep_variants(&cfg.model, &cfg.sweep, axis)?;
    run_experiment("sweep", &cfg, &variants, args.common.jobs, argv, Some(axis))?;
    Ok(())
}

pub fn eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| io(&args.checkpoint, e))?;
    let header = read_checkpoint_header(&bytes)?;
    let data = prepare_data(&cfg.data)?;
    if header.schema != data.test.schema {
        return Err(Error::Data {
            line: None,
            detail: "checkpoint feature schema differs from the configured data".into(),
        });
    }
    fn typed<T: Scalar>(bytes: &[u8], data: &PreparedData, batch: usize) -> Result<EvalReport> {
        evaluate(&Model::<T>::from_checkpoint_bytes(bytes)?, &data.test, batch)
    }
    let batch = cfg.training.train.batch_size;
    let report = match header.scalar.as_str() {
        "f64" => typed::<f64>(&bytes, &data, batch)?,
        _ => typed::<f32>(&bytes, &data, batch)?,
    };
    let dir = RunDir::create(&cfg.output.dir, "eval")?;
    dir.write_manifest(&Manifest::new("eval", argv, &cfg))?;
    dir.write("report.txt", report.to_kv())?;
    print_report(&report, data.oracle_auc);
    println!("results in {}", dir.path.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let (config, schema, batch) = reference_setup(args.seed)?;
    let model = Model::<f64>::build(&config, &schema, args.seed)?;
    let report = run_gradcheck(&model, &batch, DEFAULT_STEP)?;
    println!("{:<28} {:>14}", "parameter group", "max rel err");
    for (group, err) in report.by_group() {
        println!("{group:<28} {err:>14.3e}");
    }
    let worst = report.max_rel_err();
    let nonzero = report.nonzero_frozen();
    println!("overall max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    println!("frozen score projections: {} checked, {} with nonzero gradient", report.frozen_count(), nonzero.len());
    if worst >= GRADCHECK_TOLERANCE || !nonzero.is_empty() {
        return Err(Error::CheckFailed(format!(
            "max relative error {worst:.3e}; nonzero frozen gradients: {nonzero:?}"
        )));
    }
    println!("gradient check passed");
    Ok(())
}

fn print_report(r: &EvalReport, oracle: Option<f64>) {
    print!(
        "AUC {:.6}  GAUC {:.6}  LogLoss {:.6}  ({} examples, {} users)",
        r.auc, r.gauc, r.logloss, r.n_examples, r.n_users_scored
    );
    match oracle {
        Some(o) => println!("  oracle AUC {o:.6}"),
        None => println!(),
    }
}

/// Runs every variant × seed, writing per-run traces, reports and
/// checkpoints as they finish and rewriting the results tables after each
/// run, so a failure leaves everything completed so far on disk. Returns the
/// first error in job order after all jobs have finished.
fn run_experiment(
    command: &str,
    cfg: &ExperimentConfig,
    variants: &[Variant],
    threads: usize,
    argv: &[String],
    axis: Option<SweepAxis>,
) -> Result<(RunDir, ResultsTable, PreparedData)> {
    cfg.validate()?;
    for v in variants {
        v.model.validate(&cfg.data.schema()?)?;
    }
    let data = prepare_data(&cfg.data)?;
    let dir = RunDir::create(&cfg.output.dir, command)?;
    dir.write_manifest(&Manifest::new(command, argv, cfg))?;
    println!("results in {}", dir.path.display());
    if let Some(o) = data.oracle_auc {
        println!("oracle AUC on held-out rows {o:.6}");
    }

    let jobs = jobs_for(variants, &cfg.training.seeds);
    let mut partial = ResultsTable::default();
    let mut write_errors: Vec<Error> = Vec::new();
    let results = run_jobs(&jobs, &data, &cfg.training, threads, cfg.output.checkpoints, |i, r| {
        let job = &jobs[i];
        match r {
            Ok(o) => {
                println!("[{}/{}] {} seed {}", i + 1, jobs.len(), o.variant, o.seed);
                print!("    ");
                print_report(&o.report, None);
                partial.push(ResultRow::from_outcome(o));
                let written = record_run(&dir, o).and_then(|_| write_tables(&dir, &partial, cfg, axis));
                if let Err(e) = written {
                    write_errors.push(e);
                }
            }
            Err(e) => eprintln!("[{}/{}] {} seed {} failed: {e}", i + 1, jobs.len(), job.variant.name, job.seed),
        }
    });

    let mut table = ResultsTable::default();
    let mut first_error = write_errors.into_iter().next();
    for r in results {
        match r {
            Ok(o) => table.push(ResultRow::from_outcome(&o)),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    write_tables(&dir, &table, cfg, axis)?;
    if !table.rows.is_empty() {
        println!();
        print!("{}", table.to_text());
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok((dir, table, data)),
    }
}

fn run_stem(o: &RunOutcome) -> String {
    format!("{}_seed{}", slug(&o.variant), o.seed)
}

fn record_run(dir: &RunDir, o: &RunOutcome) -> Result<()> {
    let stem = run_stem(o);
    dir.write(&format!("trace_{stem}.csv"), o.trace.to_csv())?;
    dir.write(&format!("report_{stem}.txt"), o.report.to_kv())?;
    if let Some(bytes) = &o.checkpoint {
        dir.write(&format!("model_{stem}.ckpt"), bytes)?;
    }
    Ok(())
}

fn write_tables(dir: &RunDir, table: &ResultsTable, cfg: &ExperimentConfig, axis: Option<SweepAxis>) -> Result<()> {
    for f in &cfg.output.formats {
        match f {
            TableFormat::Csv => dir.write("results.csv", table.to_csv()?)?,
            TableFormat::Text => dir.write("results.txt", table.to_text())?,
        };
    }
    if let Some(axis) = axis {
        dir.write("sweep_long.csv", table.to_long_csv(axis.name())?)?;
    }
    Ok(())
}
