//! The three-stage pipeline: supervised warm-up on labeled examples, joint
//! optimisation of network and pseudo-labels, and fine-tuning on hard labels.

mod config;
mod report;

use serde::Serialize;

pub use config::{apply_override, Stage1Config, Stage2Config, Stage3Config, TrainConfig};
pub use report::{EpochRow, Report, REPORT_COLUMNS};

use crate::data::{split_per_class, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, cross_entropy_grad, grad_wrt_logits, grad_wrt_pseudo_logits, loss_value, LossConfig};
use crate::model::{backward_into, forward, init_params, ModelParams, ParamGrads};
use crate::numerics::{argmax, entropy, quantile, RandomStream};
use crate::optimizer::{decay_lr, pseudo_step, sgd_nesterov_step, OptState};
use crate::pseudo_labels::{init_pseudo, PseudoTable};
use crate::theory::link_residual;

const STAGE1_STREAM: u64 = 5;
const STAGE2_STREAM: u64 = 6;
const STAGE3_STREAM: u64 = 7;

/// Training split plus held-out test set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitDataset,
    pub test: Dataset,
}

/// Loads the configured data and draws the labeled subset with `cfg.seed`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<Prepared> {
    let (train, test) = cfg.data.source.load()?;
    if train.num_classes() != cfg.arch.num_classes || train.input_dim() != cfg.arch.input_dim {
        return Err(Error::InvalidConfig(format!(
            "arch ({} inputs, {} classes) does not match data ({} inputs, {} classes)",
            cfg.arch.input_dim,
            cfg.arch.num_classes,
            train.input_dim(),
            train.num_classes()
        )));
    }
    let split = split_per_class(train, cfg.data.labeled_per_class, cfg.seed)?;
    Ok(Prepared { split, test })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepredictionEvent {
    /// Round that starts from the repredicted table.
    pub round: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

/// What stage 2 observed beyond the per-epoch report.
#[derive(Debug, Clone, Default)]
pub struct Stage2Trace {
    /// Largest row-sum change caused by a single pseudo-label step.
    pub max_step_sum_change: f64,
    /// Largest `|Σỹ − init_sum|` over unlabeled rows at the end of each round.
    pub round_max_drift: Vec<f64>,
    /// Whether each round met `stop_head_grad_norm`.
    pub converged: Vec<bool>,
    pub repredictions: Vec<RepredictionEvent>,
    /// Table after every stage-2 epoch, kept only when requested.
    pub snapshots: Vec<PseudoTable>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub stage1: ModelParams,
    pub stage2: ModelParams,
    pub final_params: ModelParams,
    pub table: PseudoTable,
    pub trace: Stage2Trace,
}

impl RunOutput {
    pub fn stage1_test_acc(&self) -> f64 {
        self.report.last_of_stage(1).map_or(0.0, |r| r.test_acc)
    }

    pub fn final_test_acc(&self) -> f64 {
        self.report.rows.last().map_or(0.0, |r| r.test_acc)
    }

    /// Pseudo-label accuracy on unlabeled examples at the end of stage 2.
    pub fn pseudo_acc(&self) -> f64 {
        self.report.last_of_stage(2).map_or(0.0, |r| r.unlabeled_pseudo_acc)
    }
}

/// Accuracy and label statistics of a model and (optionally) a pseudo table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub labeled_acc: f64,
    pub unlabeled_pseudo_acc: f64,
    pub test_acc: f64,
    pub mean_entropy_pred: f64,
    pub mean_entropy_pseudo: f64,
    pub max_sum_drift: f64,
    /// `|r|` of the link residual per unlabeled example.
    pub residuals: Vec<f64>,
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Without a table, pseudo-labels are taken as `p̃ = p̂`.
pub fn evaluate(
    params: &ModelParams,
    table: Option<&PseudoTable>,
    split: &SplitDataset,
    test: &Dataset,
    loss: &LossConfig,
) -> Result<EvalStats> {
    let mut labeled_hits = 0;
    for &i in split.labeled_idx() {
        let trace = forward(params, split.example(i))?;
        labeled_hits += usize::from(trace.p_hat.argmax() == split.hidden_truth(i));
    }
    let unlabeled = split.unlabeled_idx();
    let (mut pseudo_hits, mut h_pred, mut h_pseudo) = (0, 0.0, 0.0);
    let mut residuals = Vec::with_capacity(unlabeled.len());
    for &i in unlabeled {
        let p_hat = forward(params, split.example(i))?.p_hat;
        let p_tilde = match table {
            Some(t) => t.pseudo_probs(i)?,
            None => p_hat.clone(),
        };
        pseudo_hits += usize::from(p_tilde.argmax() == split.hidden_truth(i));
        h_pred += entropy(&p_hat);
        h_pseudo += entropy(&p_tilde);
        residuals.push(link_residual(&p_hat, &p_tilde, loss)?.abs());
    }
    let mut test_hits = 0;
    for i in 0..test.len() {
        let trace = forward(params, test.example(i))?;
        test_hits += usize::from(trace.p_hat.argmax() == test.label(i));
    }
    let n_unl = unlabeled.len().max(1) as f64;
    Ok(EvalStats {
        labeled_acc: ratio(labeled_hits, split.labeled_idx().len()),
        unlabeled_pseudo_acc: ratio(pseudo_hits, unlabeled.len()),
        test_acc: ratio(test_hits, test.len()),
        mean_entropy_pred: h_pred / n_unl,
        mean_entropy_pseudo: h_pseudo / n_unl,
        max_sum_drift: table.map_or(0.0, PseudoTable::max_sum_drift),
        residuals,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct EpochLoss {
    total: f64,
    lc: f64,
    le: f64,
    head_grad_norm: f64,
}

fn make_row(stage: u8, epoch: usize, lr: f64, loss: EpochLoss, eval: &EvalStats) -> EpochRow {
    let q = |p| {
        if eval.residuals.is_empty() {
            0.0
        } else {
            quantile(&eval.residuals, p)
        }
    };
    EpochRow {
        stage,
        epoch,
        lr,
        loss_total: loss.total,
        loss_lc: loss.lc,
        loss_le: loss.le,
        labeled_acc: eval.labeled_acc,
        unlabeled_pseudo_acc: eval.unlabeled_pseudo_acc,
        test_acc: eval.test_acc,
        mean_entropy_pred: eval.mean_entropy_pred,
        mean_entropy_pseudo: eval.mean_entropy_pseudo,
        max_sum_drift: eval.max_sum_drift,
        residual_q50: q(0.5),
        residual_q90: q(0.9),
        residual_q99: q(0.99),
        head_grad_norm: loss.head_grad_norm,
    }
}

fn check_finite(params: &ModelParams, table: Option<&PseudoTable>) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::InvalidState("network parameters became non-finite".into()));
    }
    if table.is_some_and(|t| !t.logits().is_finite()) {
        return Err(Error::InvalidState("pseudo-logits became non-finite".into()));
    }
    Ok(())
}

/// One epoch of mini-batch cross-entropy on `(example, target)` pairs.
/// Reports mean cross-entropy as both total and consistency term and the mean
/// prediction entropy as the entropy term.
fn cross_entropy_epoch(
    params: &mut ModelParams,
    opt: &mut OptState,
    targets: &mut [(usize, usize)],
    batch: usize,
    split: &SplitDataset,
    rng: &mut RandomStream,
) -> Result<EpochLoss> {
    rng.shuffle(targets);
    let mut acc = EpochLoss::default();
    let mut batches = 0;
    for chunk in targets.chunks(batch) {
        let mut grads = ParamGrads::zeros_like(params);
        let scale = 1.0 / chunk.len() as f64;
        for &(i, y) in chunk {
            let trace = forward(params, split.example(i))?;
            let ce = cross_entropy(&trace.p_hat, y);
            acc.total += ce;
            acc.le += entropy(&trace.p_hat);
            let g: Vec<f64> = cross_entropy_grad(&trace.p_hat, y).iter().map(|v| v * scale).collect();
            backward_into(&trace, &g, params, &mut grads)?;
        }
        acc.head_grad_norm += grads.head_weight_norm();
        batches += 1;
        sgd_nesterov_step(params, &grads, opt)?;
    }
    let n = targets.len().max(1) as f64;
    acc.total /= n;
    acc.le /= n;
    acc.lc = acc.total;
    acc.head_grad_norm /= batches.max(1) as f64;
    check_finite(params, None)?;
    Ok(acc)
}

/// Cycles through the labeled examples, reshuffling after each pass.
struct LabeledCycle {
    order: Vec<usize>,
    pos: usize,
}

impl LabeledCycle {
    fn new(idx: &[usize], rng: &mut RandomStream) -> Self {
        let mut order = idx.to_vec();
        rng.shuffle(&mut order);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut RandomStream) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Runs the stages and collects their report rows.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    split: &'a SplitDataset,
    test: &'a Dataset,
    keep_snapshots: bool,
    pub report: Report,
    pub trace: Stage2Trace,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a Prepared) -> Self {
        Self {
            cfg,
            split: &data.split,
            test: &data.test,
            keep_snapshots: false,
            report: Report::default(),
            trace: Stage2Trace::default(),
        }
    }

    /// Keep a copy of the pseudo table after every stage-2 epoch.
    pub fn keep_snapshots(mut self, keep: bool) -> Self {
        self.keep_snapshots = keep;
        self
    }

    /// Trains a freshly initialised network on the labeled examples only.
    pub fn stage1_supervised(&mut self) -> Result<ModelParams> {
        let s1 = &self.cfg.stage1;
        let mut params = init_params(&self.cfg.arch, self.cfg.seed)?;
        let mut opt = OptState::new(&params, s1.lr, self.cfg.momentum, s1.weight_decay)?;
        let mut rng = RandomStream::new(self.cfg.seed, STAGE1_STREAM);
        let mut targets: Vec<(usize, usize)> = self
            .split
            .labeled_idx()
            .iter()
            .map(|&i| (i, self.split.hidden_truth(i)))
            .collect();
        for epoch in 0..s1.epochs {
            let loss = cross_entropy_epoch(&mut params, &mut opt, &mut targets, s1.batch, self.split, &mut rng)?;
            let eval = evaluate(&params, None, self.split, self.test, &self.cfg.loss)?;
            self.report.push(make_row(1, epoch, opt.lr(), loss, &eval));
        }
        Ok(params)
    }

    /// Joint optimisation of the network and the unlabeled pseudo-logits,
    /// in `rounds` rounds of `epochs_per_round` epochs.
    pub fn stage2_d2(&mut self, mut params: ModelParams) -> Result<(ModelParams, PseudoTable)> {
        let s2 = &self.cfg.stage2;
        let mut opt = OptState::new(&params, s2.lr0, self.cfg.momentum, s2.weight_decay)?;
        let mut rng = RandomStream::new(self.cfg.seed, STAGE2_STREAM);
        let mut table = init_pseudo(self.split, &params, self.cfg.pseudo_k)?;
        let unlabeled = self.split.unlabeled_idx().to_vec();
        let mut cycle = LabeledCycle::new(self.split.labeled_idx(), &mut rng);
        let mut epoch = 0;
        for round in 0..s2.rounds {
            if round > 0 && s2.repredict {
                let before = table.mean_entropy(&unlabeled)?;
                table.repredict(self.split, &params)?;
                let after = table.mean_entropy(&unlabeled)?;
                self.trace.repredictions.push(RepredictionEvent {
                    round,
                    entropy_before: before,
                    entropy_after: after,
                });
            }
            let mut converged = false;
            for _ in 0..s2.epochs_per_round {
                let loss = self.d2_epoch(&mut params, &mut table, &mut opt, &mut cycle, &mut rng)?;
                let eval = evaluate(&params, Some(&table), self.split, self.test, &self.cfg.loss)?;
                self.report.push(make_row(2, epoch, opt.lr(), loss, &eval));
                if self.keep_snapshots {
                    self.trace.snapshots.push(table.clone());
                }
                epoch += 1;
                if s2.stop_head_grad_norm.is_some_and(|t| loss.head_grad_norm < t) {
                    converged = true;
                    break;
                }
            }
            self.trace.round_max_drift.push(table.max_sum_drift());
            self.trace.converged.push(converged);
            if s2.decay_lr && round + 1 < s2.rounds {
                decay_lr(&mut opt, s2.lr_decay_factor)?;
            }
        }
        Ok((params, table))
    }

    fn d2_epoch(
        &mut self,
        params: &mut ModelParams,
        table: &mut PseudoTable,
        opt: &mut OptState,
        cycle: &mut LabeledCycle,
        rng: &mut RandomStream,
    ) -> Result<EpochLoss> {
        let s2 = &self.cfg.stage2;
        let loss_cfg = &self.cfg.loss;
        let mut unlabeled = self.split.unlabeled_idx().to_vec();
        rng.shuffle(&mut unlabeled);
        let n_lab = self.split.labeled_idx().len();
        let (lab_per_batch, unl_per_batch) = if unlabeled.is_empty() {
            (s2.batch, 0)
        } else if n_lab == 0 {
            (0, s2.batch)
        } else {
            let l = ((s2.batch as f64 * s2.labeled_fraction_per_batch).round() as usize).clamp(1, s2.batch.max(2) - 1);
            (l, s2.batch.max(2) - l)
        };
        let n_batches = if unl_per_batch == 0 {
            n_lab.div_ceil(s2.batch)
        } else {
            unlabeled.len().div_ceil(unl_per_batch)
        };

        let mut acc = EpochLoss::default();
        let mut seen = 0usize;
        for b in 0..n_batches {
            let mut members: Vec<usize> = (0..lab_per_batch).map(|_| cycle.next(rng)).collect();
            if unl_per_batch > 0 {
                let lo = b * unl_per_batch;
                members.extend_from_slice(&unlabeled[lo..(lo + unl_per_batch).min(unlabeled.len())]);
            }
            let scale = 1.0 / members.len() as f64;
            let mut grads = ParamGrads::zeros_like(params);
            let mut pseudo_grads = Vec::with_capacity(unl_per_batch);
            for &i in &members {
                let trace = forward(params, self.split.example(i))?;
                let p_tilde = table.pseudo_probs(i)?;
                let l = loss_value(&trace.p_hat, &p_tilde, loss_cfg)?;
                acc.total += l.total;
                acc.lc += l.lc;
                acc.le += l.le;
                let mut g = grad_wrt_logits(&trace.p_hat, &p_tilde, loss_cfg)?;
                g.iter_mut().for_each(|v| *v *= scale);
                backward_into(&trace, &g, params, &mut grads)?;
                if !table.is_frozen(i) {
                    let mut gt = grad_wrt_pseudo_logits(&trace.p_hat, &p_tilde, loss_cfg)?;
                    gt.iter_mut().for_each(|v| *v *= scale);
                    pseudo_grads.push((i, gt));
                }
            }
            seen += members.len();
            acc.head_grad_norm += grads.head_weight_norm();
            sgd_nesterov_step(params, &grads, opt)?;
            let change = pseudo_step(table, &pseudo_grads, loss_cfg.lambda)?;
            self.trace.max_step_sum_change = self.trace.max_step_sum_change.max(change);
        }
        let n = seen.max(1) as f64;
        acc.total /= n;
        acc.lc /= n;
        acc.le /= n;
        acc.head_grad_norm /= n_batches.max(1) as f64;
        check_finite(params, Some(table))?;
        Ok(acc)
    }

    /// Cross-entropy on every training example: true labels where known,
    /// hard pseudo-labels elsewhere.
    pub fn stage3_finetune(&mut self, mut params: ModelParams, table: &PseudoTable) -> Result<ModelParams> {
        let s3 = &self.cfg.stage3;
        if table.len() != self.split.len() {
            return Err(Error::InvalidInput(format!(
                "table has {} rows, dataset {}",
                table.len(),
                self.split.len()
            )));
        }
        let mut opt = OptState::new(&params, s3.lr, self.cfg.momentum, s3.weight_decay)?;
        let mut rng = RandomStream::new(self.cfg.seed, STAGE3_STREAM);
        let hard = table.hard_labels();
        let mut targets: Vec<(usize, usize)> = (0..self.split.len())
            .map(|i| (i, self.split.training_label(i).unwrap_or(hard[i])))
            .collect();
        for epoch in 0..s3.epochs {
            let loss = cross_entropy_epoch(&mut params, &mut opt, &mut targets, s3.batch, self.split, &mut rng)?;
            let eval = evaluate(&params, Some(table), self.split, self.test, &self.cfg.loss)?;
            self.report.push(make_row(3, epoch, opt.lr(), loss, &eval));
        }
        Ok(params)
    }

    /// Stages 2 and 3 from an already trained stage-1 network.
    pub fn continue_from_stage1(mut self, stage1: ModelParams) -> Result<RunOutput> {
        let (stage2, table) = self
            .stage2_d2(stage1.clone())
            .map_err(|e| e.in_stage("stage2"))?;
        let final_params = self
            .stage3_finetune(stage2.clone(), &table)
            .map_err(|e| e.in_stage("stage3"))?;
        Ok(RunOutput {
            report: self.report,
            stage1,
            stage2,
            final_params,
            table,
            trace: self.trace,
        })
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let stage1 = self.stage1_supervised().map_err(|e| e.in_stage("stage1"))?;
        self.continue_from_stage1(stage1)
    }
}

pub fn run_pipeline(cfg: &TrainConfig, data: &Prepared) -> Result<RunOutput> {
    cfg.validate()?;
    Trainer::new(cfg, data).run()
}

/// Fraction of `labels` predicted correctly by `params` on `ds`.
pub fn accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let mut hits = 0;
    for i in 0..ds.len() {
        let y = forward(params, ds.example(i))?.y_hat;
        hits += usize::from(argmax(&y) == ds.label(i));
    }
    Ok(ratio(hits, ds.len()))
}
