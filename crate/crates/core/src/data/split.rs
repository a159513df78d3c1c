use crate::error::{invalid_input, Result};
use crate::numerics::RandomStream;

use super::Dataset;

const SPLIT_STREAM: u64 = 3;

/// A dataset partitioned into labeled and unlabeled rows.
///
/// Training code reads targets through [`SplitDataset::training_label`], which
/// returns `None` for unlabeled rows. The true labels of unlabeled rows are
/// only reachable through [`SplitDataset::hidden_truth`], reserved for
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    base: Dataset,
    labeled_idx: Vec<usize>,
    unlabeled_idx: Vec<usize>,
    is_labeled: Vec<bool>,
}

impl SplitDataset {
    pub fn new(base: Dataset, labeled_idx: Vec<usize>) -> Result<Self> {
        let mut is_labeled = vec![false; base.len()];
        for &i in &labeled_idx {
            if i >= base.len() {
                return Err(invalid_input!("labeled index {i} out of range"));
            }
            if is_labeled[i] {
                return Err(invalid_input!("labeled index {i} listed twice"));
            }
            is_labeled[i] = true;
        }
        let unlabeled_idx = (0..base.len()).filter(|&i| !is_labeled[i]).collect();
        Ok(Self {
            base,
            labeled_idx,
            unlabeled_idx,
            is_labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        self.base.example(i)
    }

    pub fn labeled_idx(&self) -> &[usize] {
        &self.labeled_idx
    }

    pub fn unlabeled_idx(&self) -> &[usize] {
        &self.unlabeled_idx
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.is_labeled[i]
    }

    /// Ground truth for labeled rows, `None` for unlabeled ones.
    pub fn training_label(&self, i: usize) -> Option<usize> {
        self.is_labeled[i].then(|| self.base.label(i))
    }

    /// True label of any row. Evaluation only.
    pub fn hidden_truth(&self, i: usize) -> usize {
        self.base.label(i)
    }

    /// The underlying dataset, true labels included. Evaluation only.
    pub fn base(&self) -> &Dataset {
        &self.base
    }
}

/// Samples `labeled_per_class` rows of every class without replacement; the
/// remaining rows become unlabeled. Labeled indices are returned sorted.
pub fn split_per_class(ds: Dataset, labeled_per_class: usize, seed: u64) -> Result<SplitDataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((k, members)) = by_class
        .iter()
        .enumerate()
        .find(|(_, m)| m.len() < labeled_per_class)
    {
        return Err(invalid_input!(
            "class {k} has {} members, fewer than {labeled_per_class} requested labels",
            members.len()
        ));
    }
    let mut rng = RandomStream::new(seed, SPLIT_STREAM);
    let mut labeled = Vec::with_capacity(labeled_per_class * ds.num_classes());
    for members in &mut by_class {
        rng.shuffle(members);
        labeled.extend_from_slice(&members[..labeled_per_class]);
    }
    labeled.sort_unstable();
    SplitDataset::new(ds, labeled)
}
