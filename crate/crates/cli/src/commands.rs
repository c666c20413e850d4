use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use domaug_core::config::{ConfigError, ExperimentConfig};
use domaug_core::data::{export_image_folder, DataError, Dataset};
use domaug_core::eval::{embed_dataset, ensemble_embed, save_embeddings, EvalError, RecallReport};
use domaug_core::trainer::{EvalConfig, TrainError, TrainRun};
use domaug_core::transforms::DomainSet;

use crate::{Cli, Command, ConfigArgs, DataArgs, Failure};

/// Name of the resolved config written into every run directory.
pub const RUN_CONFIG: &str = "config.toml";

type Result<T> = std::result::Result<T, Failure>;

/// Every config problem, including an unreadable config file, is the
/// user's to fix.
fn config_failure(e: ConfigError) -> Failure {
    Failure::config(e)
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Io { .. } | DataError::Image { .. } => Failure::runtime(e),
        other => Failure::config(other),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Data(d) => data_failure(d),
        e if e.is_config() => Failure::config(e),
        e => Failure::runtime(e),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::TooFewItems { .. } | EvalError::NoKs => Failure::config(e),
        e => Failure::runtime(e),
    }
}

fn io_failure(e: std::io::Error, path: &Path) -> Failure {
    Failure::runtime(anyhow!(e).context(path.display().to_string()))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(&args.config, &args.overrides).map_err(config_failure)
}

fn config_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

/// Makes sure `dir` is absent or empty; with `force`, clears it first.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.is_dir()
        && fs::read_dir(dir)
            .map_err(|e| io_failure(e, dir))?
            .next()
            .is_some();
    if non_empty {
        if !force {
            return Err(Failure::config(anyhow!(
                "{} exists and is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_failure(e, dir))?;
    } else if dir.exists() && !dir.is_dir() {
        return Err(Failure::config(anyhow!(
            "{} is not a directory",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| io_failure(e, dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_failure(e, path))
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::GenData { config, out, force } => gen_data(&root, &config, out, force),
        Command::Train {
            config,
            out,
            resume,
            force,
        } => train(&root, &config, out, resume, force),
        Command::Eval {
            run,
            data,
            domains,
            ks,
            out,
        } => eval(&run, &data, domains, ks, out),
        Command::Compare {
            config,
            mechanisms,
            seeds,
            out,
            force,
        } => compare(&root, &config, &mechanisms, &seeds, out, force),
        Command::Embed {
            run,
            data,
            domain,
            train_split,
            out,
        } => embed(&run, &data, domain, train_split, out),
    }
}

fn gen_data(root: &Path, args: &ConfigArgs, out: Option<PathBuf>, force: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let glyph = cfg.data.synthetic.clone().ok_or_else(|| {
        Failure::config(anyhow!(
            "config key `data.synthetic`: gen-data needs a synthetic dataset"
        ))
    })?;
    let dir = out.unwrap_or_else(|| root.join("data").join(config_name(&args.config)));
    let dataset = cfg.load_dataset().map_err(data_failure)?;
    prepare_dir(&dir, force)?;
    let source = serde_json::json!({ "synthetic": glyph });
    export_image_folder(&dataset, &dir, source).map_err(data_failure)?;
    log::info!(
        "wrote {} images in {} classes to {}",
        dataset.len(),
        dataset.class_names().len(),
        dir.display()
    );
    Ok(())
}

fn train(
    root: &Path,
    args: &ConfigArgs,
    out: Option<PathBuf>,
    resume: bool,
    force: bool,
) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| root.join(config_name(&args.config)));
    let (train_set, test_set) = cfg.load_splits().map_err(data_failure)?;
    let mut run = if resume {
        let mut run = TrainRun::load(&dir).map_err(train_failure)?;
        let mut expected = cfg.mechanism.clone();
        expected.epochs = run.config().epochs;
        if *run.config() != expected {
            return Err(Failure::config(anyhow!(
                "the config's [mechanism] differs from the checkpoint in {} (only epochs may change on resume)",
                dir.display()
            )));
        }
        run.set_epochs(cfg.mechanism.epochs);
        log::info!(
            "resuming {} after epoch {}",
            dir.display(),
            run.epochs_completed()
        );
        run
    } else {
        prepare_dir(&dir, force)?;
        TrainRun::new(
            cfg.mechanism.clone(),
            cfg.eval.clone(),
            &cfg.model_template(),
        )
        .map_err(train_failure)?
    };
    let cfg_path = dir.join(RUN_CONFIG);
    fs::create_dir_all(&dir).map_err(|e| io_failure(e, &dir))?;
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io_failure(e, &cfg_path))?;
    run.train(&train_set, Some(&test_set), Some(&dir))
        .map_err(train_failure)?;
    if let Some(e) = run.history().last().and_then(|r| r.eval.as_ref()) {
        log::info!(
            "done: per-domain R@1 {:?}, ensemble R@1 {:.4}",
            e.per_domain_r1,
            e.ensemble_r1().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// The run plus the dataset selected by `data` (default: the run's config).
fn load_run_and_data(
    run_dir: &Path,
    data: &DataArgs,
    train_split: bool,
) -> Result<(TrainRun, Dataset)> {
    let run = TrainRun::load(run_dir).map_err(train_failure)?;
    let cfg_path = data
        .config
        .clone()
        .unwrap_or_else(|| run_dir.join(RUN_CONFIG));
    let cfg = ExperimentConfig::from_file(&cfg_path, &data.overrides).map_err(config_failure)?;
    let (train_set, test_set) = cfg.load_splits().map_err(data_failure)?;
    Ok((run, if train_split { train_set } else { test_set }))
}

fn eval(
    run_dir: &Path,
    data: &DataArgs,
    domains: Option<Vec<u8>>,
    ks: Option<Vec<usize>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut run, test) = load_run_and_data(run_dir, data, false)?;
    let mut eval_cfg = run.eval_config().clone();
    if let Some(d) = domains {
        eval_cfg.domains =
            DomainSet::new(d).map_err(|e| Failure::config(anyhow!("--domains: {e}")))?;
    }
    if let Some(k) = ks {
        eval_cfg.ks = k;
    }
    run.set_eval(eval_cfg).map_err(train_failure)?;
    let reports = run.evaluate(&test).map_err(train_failure)?;
    let dir = out.unwrap_or_else(|| run_dir.join("eval"));
    fs::create_dir_all(&dir).map_err(|e| io_failure(e, &dir))?;
    for r in &reports {
        write_json(&dir.join(format!("{}.json", r.label)), r)?;
        let cells: Vec<String> = r
            .recall
            .iter()
            .map(|(k, v)| format!("R@{k} {v:.4}"))
            .collect();
        println!("{:>9}  {}", r.label, cells.join("  "));
    }
    write_json(&dir.join("reports.json"), &reports)
}

/// Applies a mechanism name used by `compare` to a config.
fn apply_mechanism(cfg: &mut ExperimentConfig, name: &str) -> Result<()> {
    cfg.mechanism = cfg.mechanism.variant(name).map_err(Failure::config)?;
    cfg.validate()
        .map_err(|e| Failure::config(anyhow!("mechanism {name}: {e}")))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mechanism: String,
    /// Seed, or `mean` / `stddev` for aggregate rows.
    pub seed: String,
    /// Aligned with [`CompareTable::columns`].
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub columns: Vec<String>,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("mechanism,seed,{}\n", self.columns.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
            out += &format!("{},{},{}\n", r.mechanism, r.seed, vals.join(","));
        }
        out
    }
}

fn columns(reports: &[RecallReport]) -> Vec<String> {
    let mut cols = Vec::new();
    for r in reports {
        if r.label == "ensemble" {
            cols.extend(r.recall.keys().map(|k| format!("ensemble_r{k}")));
        } else {
            cols.push(format!("{}_r1", r.label));
        }
    }
    cols
}

fn values(reports: &[RecallReport]) -> Vec<f64> {
    let mut vals = Vec::new();
    for r in reports {
        if r.label == "ensemble" {
            vals.extend(r.recall.values().copied());
        } else {
            vals.push(r.at(1).unwrap_or(f64::NAN));
        }
    }
    vals
}

/// Mean and sample standard deviation (0 for a single value) per column.
pub fn aggregate(rows: &[&CompareRow]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let width = rows[0].values.len();
    let mean: Vec<f64> = (0..width)
        .map(|c| rows.iter().map(|r| r.values[c]).sum::<f64>() / n)
        .collect();
    let std = (0..width)
        .map(|c| {
            if rows.len() < 2 {
                return 0.0;
            }
            let ss: f64 = rows.iter().map(|r| (r.values[c] - mean[c]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect();
    (mean, std)
}

fn compare(
    root: &Path,
    args: &ConfigArgs,
    mechanisms: &[String],
    seeds: &[u64],
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let base = load_config(args)?;
    if mechanisms.is_empty() || seeds.is_empty() {
        return Err(Failure::config(anyhow!(
            "--mechanisms and --seeds must not be empty"
        )));
    }
    let mut cells = Vec::new();
    for name in mechanisms {
        let mut cfg = base.clone();
        apply_mechanism(&mut cfg, name)?;
        cells.push((name.clone(), cfg));
    }
    let dir = out.unwrap_or_else(|| root.join("compare").join(config_name(&args.config)));
    prepare_dir(&dir, force)?;
    let (train_set, test_set) = base.load_splits().map_err(data_failure)?;
    let mut table = CompareTable {
        columns: Vec::new(),
        rows: Vec::new(),
    };
    for (name, cfg) in &cells {
        let mut seed_rows = Vec::new();
        for &seed in seeds {
            let mut mc = cfg.mechanism.clone();
            mc.seed = seed;
            let cell_dir = dir.join("cells").join(format!("{name}-seed{seed}"));
            let mut run = TrainRun::new(mc, cfg.eval.clone(), &cfg.model_template())
                .map_err(train_failure)?;
            run.train(&train_set, Some(&test_set), Some(&cell_dir))
                .map_err(train_failure)?;
            let reports = run.evaluate(&test_set).map_err(train_failure)?;
            if table.columns.is_empty() {
                table.columns = columns(&reports);
            }
            let row = CompareRow {
                mechanism: name.clone(),
                seed: seed.to_string(),
                values: values(&reports),
            };
            log::info!("{name} seed {seed}: {:?}", row.values);
            seed_rows.push(row);
        }
        let refs: Vec<&CompareRow> = seed_rows.iter().collect();
        let (mean, std) = aggregate(&refs);
        table.rows.extend(seed_rows.iter().cloned());
        table.rows.push(CompareRow {
            mechanism: name.clone(),
            seed: "mean".into(),
            values: mean,
        });
        table.rows.push(CompareRow {
            mechanism: name.clone(),
            seed: "stddev".into(),
            values: std,
        });
    }
    let csv = dir.join("compare.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| io_failure(e, &csv))?;
    write_json(&dir.join("compare.json"), &table)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn embed(
    run_dir: &Path,
    data: &DataArgs,
    domain: Option<u8>,
    train_split: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let (mut run, dataset) = load_run_and_data(run_dir, data, train_split)?;
    if let Some(rot) = domain {
        if rot > 3 {
            return Err(Failure::config(anyhow!(
                "--domain must be in 0..=3, got {rot}"
            )));
        }
        let domains = DomainSet::new(if rot == 0 { vec![0] } else { vec![0, rot] })
            .map_err(|e| Failure::config(anyhow!("--domain: {e}")))?;
        let eval_cfg = EvalConfig {
            domains,
            ..run.eval_config().clone()
        };
        run.set_eval(eval_cfg).map_err(train_failure)?;
    }
    let members = run.eval_members().map_err(train_failure)?;
    let matrix = match domain {
        Some(rot) => {
            let m = members
                .iter()
                .find(|m| m.rotation == rot)
                .expect("member for rotation");
            embed_dataset(m.model, m.model_id, &dataset, m.rotation, m.head)
                .map_err(eval_failure)?
        }
        None => ensemble_embed(&members, &dataset).map_err(eval_failure)?.1,
    };
    let dir = out.unwrap_or_else(|| run_dir.join("embeddings"));
    save_embeddings(&dir, "embeddings", &matrix).map_err(eval_failure)?;
    log::info!(
        "wrote {}x{} embeddings ({}) to {}",
        matrix.len(),
        matrix.width(),
        matrix.provenance().label(),
        dir.display()
    );
    Ok(())
}
