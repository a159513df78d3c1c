//! Strategy and hyper-parameter grids run over several seeds.
//!
//! Seed `k` of every cell trains with `base.seed + k`, so cells are paired:
//! the same labeled subset, the same initial weights and (since no grid
//! touches stage 1) the same stage-1 network, which is trained once per seed.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::LcVariant;
use crate::model::ModelParams;
use crate::numerics::median;
use crate::trainer::{prepare_data, EpochRow, Prepared, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    /// plain D2, repeated D2, + reprediction, + LR decay, + both.
    Strategy,
    Alpha,
    Beta,
    Lc,
}

impl Grid {
    pub fn name(self) -> &'static str {
        match self {
            Grid::Strategy => "strategy",
            Grid::Alpha => "alpha",
            Grid::Beta => "beta",
            Grid::Lc => "lc",
        }
    }
}

pub const ALPHA_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const BETA_SWEEP: [f64; 5] = [0.0, 0.01, 0.03, 0.05, 0.08];

#[derive(Debug, Clone)]
pub struct Cell {
    pub grid: Grid,
    pub name: String,
    pub cfg: TrainConfig,
}

fn strategy_cell(base: &TrainConfig, name: &str, rounds: usize, repredict: bool, decay: bool) -> Cell {
    let mut cfg = base.clone();
    cfg.stage2.rounds = rounds;
    cfg.stage2.repredict = repredict;
    cfg.stage2.decay_lr = decay;
    Cell {
        grid: Grid::Strategy,
        name: name.to_string(),
        cfg,
    }
}

pub fn cells(grid: Grid, base: &TrainConfig) -> Vec<Cell> {
    let with = |name: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Cell { grid, name, cfg }
    };
    match grid {
        Grid::Strategy => {
            let r = base.stage2.rounds.max(2);
            vec![
                strategy_cell(base, "plain", 1, false, false),
                strategy_cell(base, "repeat", r, false, false),
                strategy_cell(base, "repeat_repredict", r, true, false),
                strategy_cell(base, "repeat_decay", r, false, true),
                strategy_cell(base, "repeat_repredict_decay", r, true, true),
            ]
        }
        Grid::Alpha => ALPHA_SWEEP
            .iter()
            .map(|&a| with(format!("alpha={a}"), &|c| c.loss.alpha = a))
            .collect(),
        Grid::Beta => BETA_SWEEP
            .iter()
            .map(|&b| with(format!("beta={b}"), &|c| c.loss.beta = b))
            .collect(),
        Grid::Lc => LcVariant::ALL
            .iter()
            .map(|&v| with(v.name().to_string(), &|c| c.loss.variant = v))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub stage1_test_acc: f64,
    pub stage2_test_acc: f64,
    pub final_test_acc: f64,
    pub pseudo_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub grid: Grid,
    pub name: String,
    pub runs: Vec<SeedResult>,
}

impl CellResult {
    pub fn errors(&self) -> Vec<f64> {
        self.runs.iter().map(|r| 1.0 - r.final_test_acc).collect()
    }

    pub fn median_error(&self) -> f64 {
        median(&self.errors())
    }

    pub fn median_pseudo_acc(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.pseudo_acc).collect::<Vec<_>>())
    }

    pub fn median_stage1_acc(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.stage1_test_acc).collect::<Vec<_>>())
    }

    pub fn median_final_acc(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.final_test_acc).collect::<Vec<_>>())
    }
}

struct Stage1Entry {
    key: String,
    data: Prepared,
    params: ModelParams,
    rows: Vec<EpochRow>,
}

// Everything stage 1 and its report rows depend on. The loss only enters the
// residual columns.
fn stage1_key(cfg: &TrainConfig) -> Result<String> {
    Ok(serde_json::to_string(&(&cfg.arch, &cfg.stage1, &cfg.data, cfg.momentum, cfg.seed, &cfg.loss))?)
}

/// Trains every cell for seeds `base + 0 .. base + seeds`.
pub fn run_cells(cells: &[Cell], seeds: usize) -> Result<Vec<CellResult>> {
    if seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be >= 1".into()));
    }
    let mut cache: Vec<Stage1Entry> = Vec::new();
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut runs = Vec::with_capacity(seeds);
        for k in 0..seeds {
            let mut cfg = cell.cfg.clone();
            cfg.seed = cell.cfg.seed + k as u64;
            cfg.validate()?;
            let key = stage1_key(&cfg)?;
            let pos = match cache.iter().position(|e| e.key == key) {
                Some(p) => p,
                None => {
                    let data = prepare_data(&cfg)?;
                    let mut t = Trainer::new(&cfg, &data);
                    let params = t.stage1_supervised().map_err(|e| e.in_stage("stage1"))?;
                    let rows = t.report.rows;
                    cache.push(Stage1Entry { key, data, params, rows });
                    cache.len() - 1
                }
            };
            let entry = &cache[pos];
            let mut out = Trainer::new(&cfg, &entry.data).continue_from_stage1(entry.params.clone())?;
            out.report.rows.splice(0..0, entry.rows.iter().cloned());
            let stage2_test_acc = out.report.last_of_stage(2).map_or(0.0, |r| r.test_acc);
            log::info!(
                "{}/{} seed {}: final test acc {:.4}",
                cell.grid.name(),
                cell.name,
                cfg.seed,
                out.final_test_acc()
            );
            runs.push(SeedResult {
                seed: cfg.seed,
                stage1_test_acc: out.stage1_test_acc(),
                stage2_test_acc,
                final_test_acc: out.final_test_acc(),
                pseudo_acc: out.pseudo_acc(),
            });
        }
        results.push(CellResult {
            grid: cell.grid,
            name: cell.name.clone(),
            runs,
        });
    }
    Ok(results)
}

/// One row per cell: medians over seeds.
pub fn write_summary_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "grid",
        "cell",
        "seeds",
        "median_test_error",
        "median_test_acc",
        "median_stage1_test_acc",
        "median_pseudo_acc",
    ])?;
    for r in results {
        w.write_record([
            r.grid.name().to_string(),
            r.name.clone(),
            r.runs.len().to_string(),
            r.median_error().to_string(),
            r.median_final_acc().to_string(),
            r.median_stage1_acc().to_string(),
            r.median_pseudo_acc().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per (cell, seed).
pub fn write_runs_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "grid",
        "cell",
        "seed",
        "stage1_test_acc",
        "stage2_test_acc",
        "final_test_acc",
        "pseudo_acc",
    ])?;
    for r in results {
        for s in &r.runs {
            w.write_record([
                r.grid.name().to_string(),
                r.name.clone(),
                s.seed.to_string(),
                s.stage1_test_acc.to_string(),
                s.stage2_test_acc.to_string(),
                s.final_test_acc.to_string(),
                s.pseudo_acc.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = TrainConfig::default();
        let s = cells(Grid::Strategy, &base);
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].cfg.stage2.rounds, 1);
        assert!(!s[1].cfg.stage2.repredict && !s[1].cfg.stage2.decay_lr);
        assert!(s[4].cfg.stage2.repredict && s[4].cfg.stage2.decay_lr);
        assert_eq!(cells(Grid::Alpha, &base).len(), 5);
        assert!(cells(Grid::Beta, &base).iter().all(|c| c.cfg.loss.beta < c.cfg.loss.alpha));
        let lc: Vec<_> = cells(Grid::Lc, &base).into_iter().map(|c| c.name).collect();
        assert_eq!(lc, ["kl_pred_pseudo", "kl_pseudo_pred", "l2"]);
    }

    #[test]
    fn cells_are_paired_and_complete() {
        let mut base = TrainConfig::default();
        base.data.source = crate::data::DataSource::Blobs {
            n_classes: 3,
            n_per_class: 15,
            dim: 2,
            spread: 0.4,
            test_per_class: 10,
            seed: 1,
        };
        base.data.labeled_per_class = 2;
        base.arch.hidden_dims = vec![4];
        base.stage1.epochs = 3;
        base.stage2.epochs_per_round = 2;
        base.stage2.reprediction_period = 2;
        base.stage2.rounds = 2;
        base.stage3.epochs = 1;
        let res = run_cells(&cells(Grid::Lc, &base), 2).unwrap();
        assert_eq!(res.len(), 3);
        for r in &res {
            assert_eq!(r.runs.iter().map(|s| s.seed).collect::<Vec<_>>(), [0, 1]);
            assert_eq!(r.runs[0].stage1_test_acc, res[0].runs[0].stage1_test_acc);
        }
        assert!(run_cells(&cells(Grid::Lc, &base), 0).is_err());
    }
}
