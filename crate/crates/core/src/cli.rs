//! `r2d2` command line.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::ablation::{self, Grid};
use crate::error::{Error, Result};
use crate::loss::LcVariant;
use crate::model::{forward, ModelParams};
use crate::pseudo_labels::PseudoTable;
use crate::theory::{
    self, check_flatness, check_link_residual, finite_diff_suite, CheckOutcome,
    FLATNESS_TOLERANCE, LINK_TOLERANCE, SUM_DRIFT_TOLERANCE,
};
use crate::trainer::{prepare_data, Prepared, Report, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "r2d2", version, about = "Pseudo-label optimisation for semi-supervised learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted-path config override, e.g. `loss.alpha=0.2`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured train and test sets as CSV.
    GenData(Common),
    /// Run all three stages.
    Train(Common),
    /// Check a trained run against the stationarity conditions.
    Verify(Common),
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Directory for gradcheck.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of strategy or hyper-parameter cells over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_enum, default_values_t = [Grid::Strategy])]
        grid: Vec<Grid>,
    },
    /// Write 2-D penultimate features before and after stage 2.
    ExportFeatures(Common),
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

fn config_failure(e: Error) -> Failure {
    match e {
        Error::Json(ref j) => Failure::usage(format!("config error at line {}, column {}: {j}", j.line(), j.column())),
        other => Failure::usage(other.to_string()),
    }
}

pub fn run() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn execute(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::GenData(c) => cmd_gen_data(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Verify(c) => cmd_verify(&c),
        Command::Gradcheck { seed, trials, out } => cmd_gradcheck(seed, trials, out.as_deref()),
        Command::Ablate { common, seeds, grid } => cmd_ablate(&common, seeds, &grid),
        Command::ExportFeatures(c) => cmd_export_features(&c),
    }
}

/// Reads the config (or defaults) and applies the overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => "{}".to_string(),
    };
    TrainConfig::from_json_with_overrides(&text, overrides)
}

fn common_config(c: &Common) -> std::result::Result<TrainConfig, Failure> {
    load_config(c.config.as_deref(), &c.overrides).map_err(config_failure)
}

fn ensure_dir(dir: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))
}

fn prepare(cfg: &TrainConfig) -> std::result::Result<Prepared, Failure> {
    prepare_data(cfg).map_err(|e| match e {
        Error::InvalidConfig(_) | Error::Io { .. } => Failure::usage(e.to_string()),
        other => Failure::runtime(other.to_string()),
    })
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::runtime(e.to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_gen_data(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = common_config(c)?;
    ensure_dir(&c.out)?;
    let (train, test) = cfg.data.source.load().map_err(runtime)?;
    train.write_csv(&c.out.join("train.csv")).map_err(runtime)?;
    test.write_csv(&c.out.join("test.csv")).map_err(runtime)?;
    log::info!("wrote {} train and {} test examples", train.len(), test.len());
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a TrainConfig,
    git_describe: String,
    seed: u64,
    warnings: Vec<String>,
    status: &'static str,
    failed_stage: Option<String>,
    error: Option<String>,
    artifacts: Vec<&'static str>,
}

const TRAIN_ARTIFACTS: [&str; 6] = [
    "report.csv",
    "stage1.json",
    "stage2.json",
    "stage3.json",
    "pseudo_table.csv",
    "pseudo_table.json",
];

fn cmd_train(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = common_config(c)?;
    ensure_dir(&c.out)?;
    let warnings: Vec<String> = cfg.loss.warning().into_iter().collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut manifest = Manifest {
        config: &cfg,
        git_describe: git_describe(),
        seed: cfg.seed,
        warnings,
        status: "failed",
        failed_stage: None,
        error: None,
        artifacts: Vec::new(),
    };
    let result = match prepare(&cfg) {
        Ok(data) => train_and_write(&cfg, &data, &c.out).map_err(|e| {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => "output".to_string(),
            };
            (stage, Failure::runtime(e.to_string()))
        }),
        Err(f) => Err(("data".to_string(), f)),
    };
    match &result {
        Ok(()) => {
            manifest.status = "ok";
            manifest.artifacts = TRAIN_ARTIFACTS.to_vec();
        }
        Err((stage, f)) => {
            manifest.failed_stage = Some(stage.clone());
            manifest.error = Some(f.message.clone());
        }
    }
    write_json(&c.out.join("manifest.json"), &manifest).map_err(runtime)?;
    result.map_err(|(_, f)| f)
}

fn train_and_write(cfg: &TrainConfig, data: &Prepared, out: &Path) -> Result<()> {
    log::info!(
        "training on {} examples ({} labeled)",
        data.split.len(),
        data.split.labeled_idx().len()
    );
    let run = Trainer::new(cfg, data).run()?;
    run.report.write_csv(&out.join("report.csv"))?;
    run.stage1.save(&out.join("stage1.json"))?;
    run.stage2.save(&out.join("stage2.json"))?;
    run.final_params.save(&out.join("stage3.json"))?;
    run.table.write_csv(&out.join("pseudo_table.csv"))?;
    run.table.save_json(&out.join("pseudo_table.json"))?;
    log::info!(
        "stage-1 test acc {:.4}, pseudo-label acc {:.4}, final test acc {:.4}",
        run.stage1_test_acc(),
        run.pseudo_acc(),
        run.final_test_acc()
    );
    Ok(())
}

/// Config from `--config`, else the one recorded in the run's manifest.
fn verify_config(c: &Common) -> std::result::Result<TrainConfig, Failure> {
    if c.config.is_some() {
        return common_config(c);
    }
    let path = c.out.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let stored = doc
        .get("config")
        .ok_or_else(|| Failure::usage(format!("{}: no config recorded", path.display())))?;
    TrainConfig::from_json_with_overrides(&stored.to_string(), &c.overrides).map_err(config_failure)
}

fn load_artifact<T>(path: PathBuf, load: impl FnOnce(&Path) -> Result<T>) -> std::result::Result<T, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("missing artifact {}", path.display())));
    }
    load(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Runs every check on a trained run and collects the outcomes.
pub fn verify_run(
    cfg: &TrainConfig,
    split: &crate::data::SplitDataset,
    params: &ModelParams,
    table: &PseudoTable,
    report: &Report,
) -> Result<std::collections::BTreeMap<String, CheckOutcome>> {
    let mut checks = std::collections::BTreeMap::new();
    let theorem_variant = cfg.loss.variant == LcVariant::KlPredPseudo;

    if theorem_variant {
        let stats = check_link_residual(params, table, split, &cfg.loss, LINK_TOLERANCE)?;
        checks.insert(
            "link_residual".to_string(),
            CheckOutcome::new(stats.passed(), LINK_TOLERANCE, &stats),
        );
        let flat = check_flatness(params, table, split, &cfg.loss, FLATNESS_TOLERANCE)?;
        checks.insert(
            "flatness".to_string(),
            CheckOutcome::new(flat.passed(), FLATNESS_TOLERANCE, &flat),
        );
    } else {
        let reason = json!({ "skipped": format!("theorem holds for kl_pred_pseudo, run uses {}", cfg.loss.variant.name()) });
        checks.insert(
            "link_residual".to_string(),
            CheckOutcome::new(true, LINK_TOLERANCE, &reason).informational(),
        );
        checks.insert(
            "flatness".to_string(),
            CheckOutcome::new(true, FLATNESS_TOLERANCE, &reason).informational(),
        );
    }

    let report_drift = report.stage_rows(2).map(|r| r.max_sum_drift).fold(0.0, f64::max);
    let drift = report_drift.max(table.max_sum_drift());
    let sum = CheckOutcome::new(
        drift < SUM_DRIFT_TOLERANCE,
        SUM_DRIFT_TOLERANCE,
        json!({ "max_drift": drift, "stage2_epochs": report.stage_rows(2).count() }),
    );
    checks.insert(
        "sum_invariance".to_string(),
        if theorem_variant { sum } else { sum.informational() },
    );

    let bound = theory::bound_check(100_000, cfg.seed)?;
    checks.insert("bound_algebraic".to_string(), CheckOutcome::new(bound.passed(), 1e-12, &bound));

    let grads = finite_diff_suite(cfg.seed, 20)?;
    let worst = grads.paths.iter().map(|(_, e, _)| *e).fold(0.0, f64::max);
    checks.insert("gradients".to_string(), CheckOutcome::new(grads.passed(), 1e-6, &grads).with_worst(worst));
    Ok(checks)
}

impl CheckOutcome {
    fn with_worst(mut self, worst: f64) -> Self {
        if let Value::Object(m) = &mut self.statistics {
            m.insert("worst_relative_error".into(), json!(worst));
        }
        self
    }
}

fn cmd_verify(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = verify_config(c)?;
    let params = load_artifact(c.out.join("stage2.json"), ModelParams::load)?;
    let table = load_artifact(c.out.join("pseudo_table.json"), PseudoTable::load_json)?;
    let report = load_artifact(c.out.join("report.csv"), Report::read_csv)?;
    let data = prepare(&cfg)?;
    let checks = verify_run(&cfg, &data.split, &params, &table, &report).map_err(runtime)?;
    write_json(&c.out.join("verification.json"), &checks).map_err(runtime)?;
    let mut failed = Vec::new();
    for (name, outcome) in &checks {
        let verdict = match (outcome.informational, outcome.passed) {
            (true, _) => "info",
            (false, true) => "pass",
            (false, false) => "FAIL",
        };
        println!("{verdict:4} {name}");
        if !outcome.informational && !outcome.passed {
            failed.push(name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_gradcheck(seed: u64, trials: usize, out: Option<&Path>) -> std::result::Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::usage("--trials must be >= 1"));
    }
    let rep = finite_diff_suite(seed, trials).map_err(runtime)?;
    for (path, err, tol) in &rep.paths {
        let verdict = if err < tol { "pass" } else { "FAIL" };
        println!("{verdict:4} {path:32} worst {err:.3e} (tol {tol:e})");
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &rep).map_err(runtime)?;
    }
    if rep.passed() {
        Ok(())
    } else {
        Err(Failure::runtime("gradient check failed"))
    }
}

fn cmd_ablate(c: &Common, seeds: usize, grids: &[Grid]) -> std::result::Result<(), Failure> {
    let base = common_config(c)?;
    if seeds == 0 {
        return Err(Failure::usage("--seeds must be >= 1"));
    }
    ensure_dir(&c.out)?;
    prepare(&base)?;
    let cells: Vec<_> = grids.iter().flat_map(|&g| ablation::cells(g, &base)).collect();
    let results = ablation::run_cells(&cells, seeds).map_err(runtime)?;
    ablation::write_summary_csv(&results, &c.out.join("ablation.csv")).map_err(runtime)?;
    ablation::write_runs_csv(&results, &c.out.join("ablation_runs.csv")).map_err(runtime)?;
    for r in &results {
        println!(
            "{:8} {:24} median error {:.4}  median pseudo acc {:.4}",
            r.grid.name(),
            r.name,
            r.median_error(),
            r.median_pseudo_acc()
        );
    }
    Ok(())
}

/// Penultimate features of every training example.
pub fn features(params: &ModelParams, split: &crate::data::SplitDataset) -> Result<Vec<Vec<f64>>> {
    (0..split.len())
        .map(|i| Ok(forward(params, split.example(i))?.feature().to_vec()))
        .collect()
}

fn write_features(path: &Path, feats: &[Vec<f64>], split: &crate::data::SplitDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["example_id", "f0", "f1", "label", "labeled"])?;
    for (i, f) in feats.iter().enumerate() {
        w.write_record([
            i.to_string(),
            f[0].to_string(),
            f[1].to_string(),
            split.hidden_truth(i).to_string(),
            u8::from(split.is_labeled(i)).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Spread of labeled and unlabeled features around their class centroids.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Compaction {
    pub labeled_before: f64,
    pub labeled_after: f64,
    pub labeled_ratio: f64,
    pub unlabeled_before: f64,
    pub unlabeled_after: f64,
    pub unlabeled_ratio: f64,
}

pub fn compaction(
    before: &[Vec<f64>],
    after: &[Vec<f64>],
    split: &crate::data::SplitDataset,
) -> Result<Compaction> {
    let spread = |feats: &[Vec<f64>], idx: &[usize]| {
        let pts: Vec<Vec<f64>> = idx.iter().map(|&i| feats[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| split.hidden_truth(i)).collect();
        theory::intra_class_spread(&pts, &labels)
    };
    let (lab, unl) = (split.labeled_idx(), split.unlabeled_idx());
    let labeled_before = spread(before, lab)?;
    let labeled_after = spread(after, lab)?;
    let unlabeled_before = spread(before, unl)?;
    let unlabeled_after = spread(after, unl)?;
    Ok(Compaction {
        labeled_before,
        labeled_after,
        labeled_ratio: labeled_after / labeled_before,
        unlabeled_before,
        unlabeled_after,
        unlabeled_ratio: unlabeled_after / unlabeled_before,
    })
}

fn cmd_export_features(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = common_config(c)?;
    if cfg.arch.feature_dim() != 2 {
        return Err(Failure::usage(format!(
            "export-features needs a 2-wide last hidden layer, config has feature dim {}",
            cfg.arch.feature_dim()
        )));
    }
    ensure_dir(&c.out)?;
    let data = prepare(&cfg)?;
    let mut trainer = Trainer::new(&cfg, &data);
    let stage1 = trainer.stage1_supervised().map_err(|e| runtime(e.in_stage("stage1")))?;
    let (stage2, _) = trainer.stage2_d2(stage1.clone()).map_err(|e| runtime(e.in_stage("stage2")))?;
    let before = features(&stage1, &data.split).map_err(runtime)?;
    let after = features(&stage2, &data.split).map_err(runtime)?;
    write_features(&c.out.join("features_before.csv"), &before, &data.split).map_err(runtime)?;
    write_features(&c.out.join("features_after.csv"), &after, &data.split).map_err(runtime)?;
    let comp = compaction(&before, &after, &data.split).map_err(runtime)?;
    write_json(&c.out.join("compaction.json"), &comp).map_err(runtime)?;
    println!(
        "intra-class spread ratio after/before: labeled {:.4}, unlabeled {:.4}",
        comp.labeled_ratio, comp.unlabeled_ratio
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_repeated_overrides_and_grids() {
        let cli = Cli::try_parse_from([
            "r2d2", "ablate", "--out", "x", "--override", "a.b=1", "--override", "c=2", "--grid", "lc", "--grid", "alpha",
            "--seeds", "3",
        ])
        .unwrap();
        match cli.command {
            Command::Ablate { common, seeds, grid } => {
                assert_eq!(common.overrides, ["a.b=1", "c=2"]);
                assert_eq!(seeds, 3);
                assert_eq!(grid, [Grid::Lc, Grid::Alpha]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_errors_are_usage_failures() {
        let f = config_failure(TrainConfig::from_json_str("{\n\"seed\": }").unwrap_err());
        assert_eq!(f.code, 2);
        assert!(f.message.contains("line 2"), "{}", f.message);
    }
}
