//! Trainable pseudo-logits `ỹ`, one row per training example.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{invalid_input, Error, Result};
use crate::model::{forward, ModelParams};
use crate::numerics::{argmax, entropy, softmax, DenseMatrix, ProbVector};

/// Scale applied to one-hot labels when initialising labeled rows.
pub const DEFAULT_K: f64 = 10.0;

/// Pseudo-logits with a freeze flag per row.
///
/// Labeled rows hold `K·onehot(y)` and never change. For the rest,
/// `init_sum` keeps `Σ_n ỹ_n` as of the last (re)prediction so drift of the
/// row sum can be checked at any time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTable {
    logits: DenseMatrix,
    frozen: Vec<bool>,
    init_sum: Vec<f64>,
}

impl PseudoTable {
    pub fn new(logits: DenseMatrix, frozen: Vec<bool>) -> Result<Self> {
        if frozen.len() != logits.rows() {
            return Err(invalid_input!(
                "{} freeze flags for {} rows",
                frozen.len(),
                logits.rows()
            ));
        }
        let init_sum = (0..logits.rows()).map(|i| logits.row(i).iter().sum()).collect();
        Ok(Self {
            logits,
            frozen,
            init_sum,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.logits
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.logits.row(i)
    }

    /// Mutable row access; refuses frozen rows.
    pub fn row_mut(&mut self, i: usize) -> Result<&mut [f64]> {
        if self.frozen[i] {
            return Err(Error::InvalidState(format!("row {i} is frozen")));
        }
        Ok(self.logits.row_mut(i))
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn init_sum(&self, i: usize) -> f64 {
        self.init_sum[i]
    }

    /// `|Σ_n ỹ_n − init_sum|` for row `i`.
    pub fn sum_drift(&self, i: usize) -> f64 {
        (self.logits.row(i).iter().sum::<f64>() - self.init_sum[i]).abs()
    }

    /// Largest [`Self::sum_drift`] over unfrozen rows.
    pub fn max_sum_drift(&self) -> f64 {
        (0..self.len())
            .filter(|&i| !self.frozen[i])
            .map(|i| self.sum_drift(i))
            .fold(0.0, f64::max)
    }

    /// Recomputes every unfrozen row from the model's head activation and
    /// records the new row sums. Frozen rows are untouched.
    pub fn repredict(&mut self, split: &SplitDataset, params: &ModelParams) -> Result<()> {
        check_shapes(split, params)?;
        if self.len() != split.len() {
            return Err(invalid_input!(
                "table has {} rows, dataset {}",
                self.len(),
                split.len()
            ));
        }
        for i in 0..self.len() {
            if self.frozen[i] {
                continue;
            }
            let y_hat = forward(params, split.example(i))?.y_hat;
            self.init_sum[i] = y_hat.iter().sum();
            self.logits.row_mut(i).copy_from_slice(&y_hat);
        }
        Ok(())
    }

    /// `p̃ = σ(ỹ)` for row `idx`.
    pub fn pseudo_probs(&self, idx: usize) -> Result<ProbVector> {
        if idx >= self.len() {
            return Err(invalid_input!("row {idx} out of range ({} rows)", self.len()));
        }
        softmax(self.logits.row(idx))
    }

    /// Argmax per row, lowest class index on ties.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.logits.row(i))).collect()
    }

    /// Mean `H(p̃)` over the given rows.
    pub fn mean_entropy(&self, rows: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &i in rows {
            total += entropy(&self.pseudo_probs(i)?);
        }
        Ok(total / rows.len() as f64)
    }

    /// Writes `example_id,frozen,y0..y{N-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["example_id".to_string(), "frozen".to_string()];
        header.extend((0..self.num_classes()).map(|n| format!("y{n}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), u8::from(self.frozen[i]).to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        if table.frozen.len() != table.len() || table.init_sum.len() != table.len() {
            return Err(invalid_input!("{}: inconsistent pseudo table", path.display()));
        }
        Ok(table)
    }
}

fn check_shapes(split: &SplitDataset, params: &ModelParams) -> Result<()> {
    if params.num_classes() != split.num_classes() {
        return Err(invalid_input!(
            "model predicts {} classes, dataset has {}",
            params.num_classes(),
            split.num_classes()
        ));
    }
    if params.arch().input_dim != split.input_dim() {
        return Err(invalid_input!(
            "model expects {} inputs, dataset has {}",
            params.arch().input_dim,
            split.input_dim()
        ));
    }
    Ok(())
}

/// Labeled rows get `k·onehot(y)` and are frozen; unlabeled rows start at the
/// model's head activation `ŷ`.
pub fn init_pseudo(split: &SplitDataset, params: &ModelParams, k: f64) -> Result<PseudoTable> {
    check_shapes(split, params)?;
    let n = split.num_classes();
    let mut logits = DenseMatrix::zeros(split.len(), n);
    let mut frozen = vec![false; split.len()];
    for i in 0..split.len() {
        match split.training_label(i) {
            Some(y) => {
                logits.set(i, y, k);
                frozen[i] = true;
            }
            None => {
                let y_hat = forward(params, split.example(i))?.y_hat;
                logits.row_mut(i).copy_from_slice(&y_hat);
            }
        }
    }
    PseudoTable::new(logits, frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_blobs, split_per_class};
    use crate::model::{init_params, Activation, Architecture};

    fn fixture() -> (SplitDataset, ModelParams) {
        let ds = gen_gaussian_blobs(3, 10, 2, 0.5, 1).unwrap();
        let split = split_per_class(ds, 2, 5).unwrap();
        let arch = Architecture {
            input_dim: 2,
            hidden_dims: vec![4],
            num_classes: 3,
            activation: Activation::Relu,
            head_bias: true,
        };
        (split, init_params(&arch, 0).unwrap())
    }

    #[test]
    fn labeled_rows_are_k_onehot() {
        let (split, params) = fixture();
        let table = init_pseudo(&split, &params, DEFAULT_K).unwrap();
        for &i in split.labeled_idx() {
            let y = split.training_label(i).unwrap();
            let mut expect = vec![0.0; 3];
            expect[y] = 10.0;
            assert_eq!(table.row(i), expect.as_slice());
            assert!(table.is_frozen(i));
        }
        for &i in split.unlabeled_idx() {
            assert_eq!(table.row(i), forward(&params, split.example(i)).unwrap().y_hat.as_slice());
            assert!(!table.is_frozen(i));
        }
    }

    #[test]
    fn class_one_of_three() {
        let ds = gen_gaussian_blobs(3, 1, 2, 0.5, 1).unwrap();
        let split = split_per_class(ds, 1, 0).unwrap();
        let (_, params) = fixture();
        let table = init_pseudo(&split, &params, 10.0).unwrap();
        assert_eq!(table.row(1), &[0.0, 10.0, 0.0]);
    }

    #[test]
    fn zero_model_gives_uniform_pseudo_labels() {
        let (split, params) = fixture();
        let zero = ModelParams::zeros(params.arch()).unwrap();
        let table = init_pseudo(&split, &zero, 10.0).unwrap();
        let i = split.unlabeled_idx()[0];
        assert!(table.row(i).iter().all(|&v| v == 0.0));
        assert_eq!(table.pseudo_probs(i).unwrap(), ProbVector::uniform(3));
    }

    #[test]
    fn class_mismatch_rejected() {
        let (split, _) = fixture();
        let arch = Architecture {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 4,
            activation: Activation::Relu,
            head_bias: true,
        };
        assert!(init_pseudo(&split, &init_params(&arch, 0).unwrap(), 10.0).is_err());
    }

    #[test]
    fn repredict_idempotent_and_respects_freeze() {
        let (split, params) = fixture();
        let mut table = init_pseudo(&split, &params, 10.0).unwrap();
        let other = init_params(params.arch(), 99).unwrap();
        let frozen_before: Vec<Vec<f64>> =
            split.labeled_idx().iter().map(|&i| table.row(i).to_vec()).collect();
        table.repredict(&split, &other).unwrap();
        let once = table.clone();
        table.repredict(&split, &other).unwrap();
        assert_eq!(table, once);
        for (k, &i) in split.labeled_idx().iter().enumerate() {
            assert_eq!(table.row(i), frozen_before[k].as_slice());
        }
        let i = split.unlabeled_idx()[0];
        assert_eq!(table.init_sum(i), table.row(i).iter().sum::<f64>());
        assert_eq!(table.max_sum_drift(), 0.0);
    }

    #[test]
    fn pseudo_probs_of_k_onehot() {
        let t = PseudoTable::new(
            DenseMatrix::from_rows(&[vec![0.0, 10.0, 0.0], vec![0.0; 3]]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        let p = t.pseudo_probs(0).unwrap();
        // 1/(2+e^10) and e^10/(2+e^10)
        assert!((p[0] - 4.539_580_782_951_091e-5).abs() < 1e-15);
        assert!((p[1] - 0.999_909_208_384_341).abs() < 1e-14);
        assert_eq!(t.pseudo_probs(1).unwrap(), ProbVector::uniform(3));
        assert!(t.pseudo_probs(2).is_err());
    }

    #[test]
    fn hard_labels_ties_and_shift() {
        let rows = vec![vec![1.0, 1.0], vec![0.0, 10.0], vec![3.0, -1.0]];
        let t = PseudoTable::new(DenseMatrix::from_rows(&rows).unwrap(), vec![false; 3]).unwrap();
        assert_eq!(t.hard_labels(), vec![0, 1, 0]);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| 2.5 * v - 7.0).collect())
            .collect();
        let t2 = PseudoTable::new(DenseMatrix::from_rows(&scaled).unwrap(), vec![false; 3]).unwrap();
        assert_eq!(t2.hard_labels(), t.hard_labels());
    }

    #[test]
    fn frozen_rows_refuse_mutation() {
        let mut t = PseudoTable::new(DenseMatrix::zeros(2, 2), vec![true, false]).unwrap();
        assert!(t.row_mut(0).is_err());
        t.row_mut(1).unwrap()[0] = 1.0;
        assert_eq!(t.sum_drift(1), 1.0);
    }

    #[test]
    fn csv_and_json_export() {
        let (split, params) = fixture();
        let table = init_pseudo(&split, &params, 10.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("t.csv");
        table.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("example_id,frozen,y0,y1,y2\n"));
        assert_eq!(text.lines().count(), split.len() + 1);
        let json_path = dir.path().join("t.json");
        table.save_json(&json_path).unwrap();
        assert_eq!(PseudoTable::load_json(&json_path).unwrap(), table);
    }
}
