//! Numerical checks of the stationarity conditions of the joint objective.
//!
//! At a stationary point of the head weights with `kl_pred_pseudo`, each
//! example satisfies the link
//!
//! ```text
//! ln p̃_n = −L/α + (1 − β/α)·ln p̂_n      n = argmax p̂
//! ```
//!
//! The residual of that link is what [`link_residual`] measures. Where the link
//! holds, `exp(−L/α)·p̂_n^(1−β/α) ≤ p̂_n`, so `p̃_n ≤ p̂_n`: pseudo-labels are
//! no sharper than the predictions on the predicted class.

use serde::Serialize;
use serde_json::{json, Value};

use crate::data::SplitDataset;
use crate::error::{invalid_input, Error, Result};
use crate::loss::{grad_wrt_logits, grad_wrt_pseudo_logits, loss_value, LcVariant, LossConfig};
use crate::model::{backward, forward, init_params, Activation, Architecture, ModelParams};
use crate::numerics::{clamped_ln, entropy, quantile, softmax, ProbVector, RandomStream};
use crate::pseudo_labels::PseudoTable;

/// `|r|` below which an example counts as satisfying the link.
pub const LINK_TOLERANCE: f64 = 1e-2;
/// Fraction of unlabeled examples that must satisfy the link.
pub const LINK_FRACTION: f64 = 0.9;
/// Slack allowed in `H(p̃) ≥ H(p̂)`-type comparisons.
pub const FLATNESS_TOLERANCE: f64 = 1e-6;
/// Bound on `|Σỹ − init_sum|` over a stage-2 round.
pub const SUM_DRIFT_TOLERANCE: f64 = 1e-6;
/// Bound on the row-sum change of a single pseudo-label step.
pub const SUM_STEP_TOLERANCE: f64 = 1e-12;

const THEORY_STREAM: u64 = 8;
const GRADCHECK_STREAM: u64 = 9;

/// `r = (α − β)·ln p̂_n − α·ln p̃_n − L` with `n = argmax p̂`.
pub fn link_residual(p_hat: &ProbVector, p_tilde: &ProbVector, cfg: &LossConfig) -> Result<f64> {
    let l = loss_value(p_hat, p_tilde, cfg)?.total;
    let n = p_hat.argmax();
    Ok((cfg.alpha - cfg.beta) * clamped_ln(p_hat[n]) - cfg.alpha * clamped_ln(p_tilde[n]) - l)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkResidualStats {
    pub count: usize,
    pub tolerance: f64,
    pub fraction_within: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub max: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl LinkResidualStats {
    pub fn from_residuals(residuals: Vec<f64>, tolerance: f64) -> Self {
        let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        let q = |p| if abs.is_empty() { 0.0 } else { quantile(&abs, p) };
        let within = abs.iter().filter(|&&r| r < tolerance).count();
        Self {
            count: abs.len(),
            tolerance,
            fraction_within: if abs.is_empty() { 0.0 } else { within as f64 / abs.len() as f64 },
            q50: q(0.5),
            q90: q(0.9),
            q99: q(0.99),
            max: abs.iter().copied().fold(0.0, f64::max),
            residuals,
        }
    }

    pub fn passed(&self) -> bool {
        self.count > 0 && self.fraction_within >= LINK_FRACTION
    }
}

fn unlabeled_pairs(
    params: &ModelParams,
    table: &PseudoTable,
    split: &SplitDataset,
) -> Result<Vec<(ProbVector, ProbVector)>> {
    if table.len() != split.len() || table.num_classes() != params.num_classes() {
        return Err(invalid_input!("pseudo table does not match model and data"));
    }
    split
        .unlabeled_idx()
        .iter()
        .map(|&i| Ok((forward(params, split.example(i))?.p_hat, table.pseudo_probs(i)?)))
        .collect()
}

fn require_kl_pred_pseudo(cfg: &LossConfig) -> Result<()> {
    if cfg.variant != LcVariant::KlPredPseudo {
        return Err(Error::InvalidConfig(format!(
            "link residual is only defined for kl_pred_pseudo, not {}",
            cfg.variant.name()
        )));
    }
    Ok(())
}

/// Link residual over every unlabeled example.
pub fn check_link_residual(
    params: &ModelParams,
    table: &PseudoTable,
    split: &SplitDataset,
    cfg: &LossConfig,
    tolerance: f64,
) -> Result<LinkResidualStats> {
    require_kl_pred_pseudo(cfg)?;
    let residuals = unlabeled_pairs(params, table, split)?
        .iter()
        .map(|(ph, pt)| link_residual(ph, pt, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LinkResidualStats::from_residuals(residuals, tolerance))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatnessStats {
    /// Unlabeled examples whose link residual is below [`LINK_TOLERANCE`].
    pub considered: usize,
    /// Of those, examples with `p̃_n > p̂_n + tolerance`.
    pub peak_violations: usize,
    /// Of those, examples with `H(p̃) < H(p̂) − tolerance`.
    pub entropy_violations: usize,
    pub tolerance: f64,
    pub max_peak_excess: f64,
    pub mean_entropy_pred: f64,
    pub mean_entropy_pseudo: f64,
}

impl FlatnessStats {
    pub fn passed(&self) -> bool {
        self.considered > 0 && self.peak_violations == 0
    }
}

/// Among examples satisfying the link, pseudo-labels must not be sharper than
/// predictions on the predicted class. The entropy comparison is reported but
/// does not follow from the link alone.
pub fn check_flatness(
    params: &ModelParams,
    table: &PseudoTable,
    split: &SplitDataset,
    cfg: &LossConfig,
    tolerance: f64,
) -> Result<FlatnessStats> {
    require_kl_pred_pseudo(cfg)?;
    let mut stats = FlatnessStats {
        considered: 0,
        peak_violations: 0,
        entropy_violations: 0,
        tolerance,
        max_peak_excess: f64::NEG_INFINITY,
        mean_entropy_pred: 0.0,
        mean_entropy_pseudo: 0.0,
    };
    for (ph, pt) in unlabeled_pairs(params, table, split)? {
        if link_residual(&ph, &pt, cfg)?.abs() >= LINK_TOLERANCE {
            continue;
        }
        stats.considered += 1;
        let n = ph.argmax();
        let excess = pt[n] - ph[n];
        stats.max_peak_excess = stats.max_peak_excess.max(excess);
        stats.peak_violations += usize::from(excess > tolerance);
        let (hp, ht) = (entropy(&ph), entropy(&pt));
        stats.entropy_violations += usize::from(ht < hp - tolerance);
        stats.mean_entropy_pred += hp;
        stats.mean_entropy_pseudo += ht;
    }
    if stats.considered > 0 {
        stats.mean_entropy_pred /= stats.considered as f64;
        stats.mean_entropy_pseudo /= stats.considered as f64;
    } else {
        stats.max_peak_excess = 0.0;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SumInvarianceStats {
    pub snapshots: usize,
    pub max_drift: f64,
    pub tolerance: f64,
}

impl SumInvarianceStats {
    pub fn passed(&self) -> bool {
        self.max_drift < self.tolerance
    }
}

/// Largest `|Σỹ − init_sum|` over unlabeled rows of all snapshots.
pub fn check_sum_invariance<'a>(snapshots: impl IntoIterator<Item = &'a PseudoTable>) -> SumInvarianceStats {
    let mut count = 0;
    let mut max_drift: f64 = 0.0;
    for t in snapshots {
        count += 1;
        max_drift = max_drift.max(t.max_sum_drift());
    }
    SumInvarianceStats {
        snapshots: count,
        max_drift,
        tolerance: SUM_DRIFT_TOLERANCE,
    }
}

/// Pseudo-label distribution that satisfies the link exactly for `p_hat`:
/// `p̃_n = t` with the remaining mass spread in proportion to `p̂`, and `t`
/// found by bisection.
pub fn solve_link_point(p_hat: &ProbVector, cfg: &LossConfig) -> Result<ProbVector> {
    let n = p_hat.argmax();
    let rest: f64 = p_hat.values().iter().enumerate().filter(|(j, _)| *j != n).map(|(_, p)| p).sum();
    if rest <= 0.0 {
        return Err(invalid_input!("prediction is one-hot; the link point is degenerate"));
    }
    let build = |t: f64| {
        let v: Vec<f64> = p_hat
            .values()
            .iter()
            .enumerate()
            .map(|(j, &p)| if j == n { t } else { ((1.0 - t) * p / rest).min(1.0) })
            .collect();
        ProbVector::new(v)
    };
    // ln t − (−L/α + (1 − β/α) ln p̂_n) increases from −∞ to +∞ on (0, 1).
    let f = |t: f64| -> Result<f64> { Ok(-link_residual(p_hat, &build(t)?, cfg)? / cfg.alpha) };
    let (mut lo, mut hi) = (f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    if f(lo)? > 0.0 || f(hi)? < 0.0 {
        return Err(invalid_input!("link point not bracketed"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    build(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckStats {
    pub samples: usize,
    pub violations: usize,
    /// Largest `exp(−L/α)·p̂_n^(1−β/α) / p̂_n` seen.
    pub max_ratio: f64,
    /// Link points where the bisection residual exceeded 1e-8.
    pub unsolved: usize,
}

impl BoundCheckStats {
    pub fn passed(&self) -> bool {
        self.samples > 0 && self.violations == 0 && self.unsolved == 0
    }
}

/// Random `(p̂, α, β)` with `0 ≤ β < α`. Half the samples use a random `p̃`,
/// half the link point; both must satisfy `exp(−L/α)·p̂_n^(1−β/α) ≤ p̂_n`.
pub fn bound_check(samples: usize, seed: u64) -> Result<BoundCheckStats> {
    let mut rng = RandomStream::new(seed, THEORY_STREAM);
    let mut stats = BoundCheckStats {
        samples,
        violations: 0,
        max_ratio: 0.0,
        unsolved: 0,
    };
    let random_probs = |rng: &mut RandomStream, n: usize| -> Result<ProbVector> {
        let scale = rng.uniform_range(0.1, 6.0);
        let logits: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
        softmax(&logits)
    };
    for s in 0..samples {
        let n = 2 + rng.index(9);
        let alpha = rng.uniform_range(0.01, 1.0);
        let cfg = LossConfig {
            alpha,
            beta: alpha * rng.uniform(),
            ..LossConfig::default()
        };
        let p_hat = random_probs(&mut rng, n)?;
        let p_tilde = if s % 2 == 0 {
            random_probs(&mut rng, n)?
        } else {
            match solve_link_point(&p_hat, &cfg) {
                Ok(p) => {
                    if link_residual(&p_hat, &p, &cfg)?.abs() > 1e-8 {
                        stats.unsolved += 1;
                    }
                    p
                }
                Err(_) => {
                    stats.unsolved += 1;
                    continue;
                }
            }
        };
        let l = loss_value(&p_hat, &p_tilde, &cfg)?.total;
        let pn = p_hat[p_hat.argmax()];
        let bound = (-l / cfg.alpha).exp() * pn.powf(1.0 - cfg.beta / cfg.alpha);
        let ratio = bound / pn;
        stats.max_ratio = stats.max_ratio.max(ratio);
        stats.violations += usize::from(bound > pn * (1.0 + 1e-12));
    }
    Ok(stats)
}

/// Worst relative error per gradient path, over all trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub step: f64,
    /// `(path, worst relative error, tolerance)`.
    pub paths: Vec<(String, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|(_, err, tol)| *err < *tol)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = crate::numerics::l2_norm(a).max(crate::numerics::l2_norm(b));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

const FD_STEP: f64 = 1e-5;

fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + FD_STEP;
        let up = f(&probe)?;
        probe[k] = x[k] - FD_STEP;
        let down = f(&probe)?;
        probe[k] = x[k];
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

fn random_logits(rng: &mut RandomStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| 1.5 * rng.normal()).collect()
}

/// Flattened parameters in `tensors()` order.
fn flatten(params: &ModelParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|(t, _)| t.iter().copied()).collect()
}

fn unflatten(params: &mut ModelParams, flat: &[f64]) {
    let mut pos = 0;
    for (t, _) in params.tensors_mut() {
        let len = t.len();
        t.copy_from_slice(&flat[pos..pos + len]);
        pos += len;
    }
}

/// Network gradient of `L(σ(ŷ(x)), p̃)` against central differences.
fn network_path_error(params: &ModelParams, x: &[f64], p_tilde: &ProbVector, cfg: &LossConfig) -> Result<f64> {
    let trace = forward(params, x)?;
    let g = grad_wrt_logits(&trace.p_hat, p_tilde, cfg)?;
    let grads = backward(&trace, &g, params)?;
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|(t, _)| t.iter().copied()).collect();
    let mut probe = params.clone();
    let numeric = central_diff(&flatten(params), |flat| {
        unflatten(&mut probe, flat);
        Ok(loss_value(&forward(&probe, x)?.p_hat, p_tilde, cfg)?.total)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

/// Finite-difference checks of every analytic gradient path:
/// pseudo-logits and prediction logits for each consistency variant, the
/// head weights of a linear model, and every parameter of a three-hidden-layer
/// network. Hidden layers use `tanh` so no probe straddles a kink.
pub fn finite_diff_suite(seed: u64, trials: usize) -> Result<GradCheckReport> {
    let mut rng = RandomStream::new(seed, GRADCHECK_STREAM);
    let mut worst: Vec<(String, f64, f64)> = Vec::new();
    let mut record = |path: String, err: f64, tol: f64| match worst.iter_mut().find(|(p, _, _)| *p == path) {
        Some(entry) => entry.1 = entry.1.max(err),
        None => worst.push((path, err, tol)),
    };
    for _ in 0..trials {
        let n = 2 + rng.index(5);
        for variant in LcVariant::ALL {
            let cfg = LossConfig {
                variant,
                ..LossConfig::default()
            };
            let y_hat = random_logits(&mut rng, n);
            let y_tilde = random_logits(&mut rng, n);
            let p_hat = softmax(&y_hat)?;
            let p_tilde = softmax(&y_tilde)?;

            let analytic = grad_wrt_pseudo_logits(&p_hat, &p_tilde, &cfg)?;
            let numeric = central_diff(&y_tilde, |y| Ok(loss_value(&p_hat, &softmax(y)?, &cfg)?.total))?;
            record(format!("pseudo_logits/{}", variant.name()), relative_error(&analytic, &numeric), 1e-6);

            let analytic = grad_wrt_logits(&p_hat, &p_tilde, &cfg)?;
            let numeric = central_diff(&y_hat, |y| Ok(loss_value(&softmax(y)?, &p_tilde, &cfg)?.total))?;
            record(format!("prediction_logits/{}", variant.name()), relative_error(&analytic, &numeric), 1e-6);

            let input_dim = 2 + rng.index(4);
            let x: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
            let linear = Architecture {
                input_dim,
                hidden_dims: vec![],
                num_classes: n,
                activation: Activation::Tanh,
                head_bias: true,
            };
            let params = init_params(&linear, rng.next_u64())?;
            record(
                format!("linear_head/{}", variant.name()),
                network_path_error(&params, &x, &p_tilde, &cfg)?,
                1e-6,
            );

            let deep = Architecture {
                hidden_dims: vec![3 + rng.index(4), 3 + rng.index(4), 3 + rng.index(4)],
                ..linear
            };
            let params = init_params(&deep, rng.next_u64())?;
            record(
                format!("deep_net/{}", variant.name()),
                network_path_error(&params, &x, &p_tilde, &cfg)?,
                1e-5,
            );
        }
    }
    Ok(GradCheckReport {
        trials,
        step: FD_STEP,
        paths: worst,
    })
}

/// One named verification outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub passed: bool,
    /// Reported but not counted toward the overall verdict.
    pub informational: bool,
    pub tolerance: f64,
    pub statistics: Value,
}

impl CheckOutcome {
    pub fn new(passed: bool, tolerance: f64, statistics: impl Serialize) -> Self {
        Self {
            passed,
            informational: false,
            tolerance,
            statistics: serde_json::to_value(statistics).unwrap_or_else(|e| json!({ "error": e.to_string() })),
        }
    }

    pub fn informational(mut self) -> Self {
        self.informational = true;
        self
    }
}

/// Mean Euclidean distance of each point to its class centroid, averaged over
/// the classes present.
pub fn intra_class_spread(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(invalid_input!("need one label per point and at least one point"));
    }
    let dim = points[0].len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut centroids = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (p, &y) in points.iter().zip(labels) {
        if p.len() != dim {
            return Err(invalid_input!("points have mixed dimensions"));
        }
        counts[y] += 1;
        centroids[y].iter_mut().zip(p).for_each(|(c, v)| *c += v);
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let mut sums = vec![0.0; n_classes];
    for (p, &y) in points.iter().zip(labels) {
        sums[y] += p
            .iter()
            .zip(&centroids[y])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    let present: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
