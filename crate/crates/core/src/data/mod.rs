//! Datasets: synthetic generators, the IDX loader and labeled/unlabeled splits.

mod idx;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::numerics::DenseMatrix;

pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use split::{split_per_class, SplitDataset};
pub use synthetic::{blob_centers, gen_gaussian_blobs, gen_two_moons, BLOB_RADIUS};

/// Feature matrix (examples x input dim) with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid_input!("need at least 2 classes, got {num_classes}"));
        }
        if features.rows() != labels.len() {
            return Err(invalid_input!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid_input!("label {bad} outside [0, {num_classes})"));
        }
        if !features.is_finite() {
            return Err(invalid_input!("non-finite features"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn example(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// First `n` rows (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Self {
            features: self.features.select_rows(&idx),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `x0,...,x{D-1},label` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|d| format!("x{d}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.example(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Where the training and test examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        n_classes: usize,
        n_per_class: usize,
        dim: usize,
        spread: f64,
        test_per_class: usize,
        seed: u64,
    },
    Moons {
        n_per_class: usize,
        noise: f64,
        test_per_class: usize,
        seed: u64,
    },
    /// Directory holding the four standard MNIST IDX files.
    Mnist {
        dir: PathBuf,
        max_train: Option<usize>,
        max_test: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub labeled_per_class: usize,
    pub source: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            labeled_per_class: 4,
            source: DataSource::Blobs {
                n_classes: 3,
                n_per_class: 200,
                dim: 2,
                spread: 0.5,
                test_per_class: 200,
                seed: 7,
            },
        }
    }
}

// Test sets are drawn from the same generator on a different stream.
const TEST_STREAM: u64 = 0x7e57;

impl DataSource {
    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Blobs {
                n_classes,
                n_per_class,
                dim,
                spread,
                test_per_class,
                seed,
            } => Ok((
                gen_gaussian_blobs(*n_classes, *n_per_class, *dim, *spread, *seed)?,
                synthetic::blobs_on_stream(
                    *n_classes,
                    *test_per_class,
                    *dim,
                    *spread,
                    *seed,
                    TEST_STREAM,
                )?,
            )),
            DataSource::Moons {
                n_per_class,
                noise,
                test_per_class,
                seed,
            } => Ok((
                gen_two_moons(*n_per_class, *noise, *seed)?,
                synthetic::moons_on_stream(*test_per_class, *noise, *seed, TEST_STREAM)?,
            )),
            DataSource::Mnist {
                dir,
                max_train,
                max_test,
            } => {
                let train = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                Ok((
                    train.truncated(max_train.unwrap_or(usize::MAX)),
                    test.truncated(max_test.unwrap_or(usize::MAX)),
                ))
            }
        }
    }
}
