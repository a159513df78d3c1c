use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated epoch. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_lc: f64,
    pub loss_le: f64,
    pub labeled_acc: f64,
    pub unlabeled_pseudo_acc: f64,
    pub test_acc: f64,
    pub mean_entropy_pred: f64,
    pub mean_entropy_pseudo: f64,
    pub max_sum_drift: f64,
    pub residual_q50: f64,
    pub residual_q90: f64,
    pub residual_q99: f64,
    /// Epoch mean of the batch head-weight gradient norm.
    #[serde(skip)]
    pub head_grad_norm: f64,
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "stage",
    "epoch",
    "lr",
    "loss_total",
    "loss_lc",
    "loss_le",
    "labeled_acc",
    "unlabeled_pseudo_acc",
    "test_acc",
    "mean_entropy_pred",
    "mean_entropy_pseudo",
    "max_sum_drift",
    "residual_q50",
    "residual_q90",
    "residual_q99",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<EpochRow>,
}

impl Report {
    pub fn push(&mut self, row: EpochRow) {
        self.rows.push(row);
    }

    pub fn stage_rows(&self, stage: u8) -> impl Iterator<Item = &EpochRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    pub fn last_of_stage(&self, stage: u8) -> Option<&EpochRow> {
        self.stage_rows(stage).last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record(REPORT_COLUMNS)?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != REPORT_COLUMNS {
            return Err(Error::InvalidInput(format!(
                "{}: unexpected report columns {header:?}",
                path.display()
            )));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>()?;
        Ok(Self { rows })
    }
}
