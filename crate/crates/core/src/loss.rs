//! The joint objective `L = α·Lc + β·Le` and its gradients.
//!
//! `Le` is the entropy of the prediction `p̂ = σ(ŷ)`. The consistency term
//! `Lc` between `p̂` and the pseudo-label `p̃ = σ(ỹ)` is pluggable: each
//! variant implements [`ConsistencyLoss`] and is registered by its config
//! name, see [`consistency_loss`].
//!
//! Gradients are returned in logit space. For `ŷ` this is the scalar factor
//! `g_n` such that `∂L/∂w_n = g_n · f` for head column `w_n`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::numerics::{clamped_ln, entropy, ProbVector};

/// One choice of the consistency term `Lc(p̂, p̃)`.
pub trait ConsistencyLoss: Sync {
    /// Name used in config files.
    fn name(&self) -> &'static str;

    fn value(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> f64;

    /// `∂Lc/∂ŷ`, differentiated through the softmax.
    fn grad_pred_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64>;

    /// `∂Lc/∂ỹ`, differentiated through the softmax.
    fn grad_pseudo_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64>;
}

/// `KL(p̂‖p̃)`, the default.
pub struct KlPredPseudo;

/// `KL(p̃‖p̂)`, the classic direction.
pub struct KlPseudoPred;

/// `‖p̃ − p̂‖²`.
pub struct SquaredError;

fn values<'a>(p: &'a ProbVector, q: &'a ProbVector) -> impl Iterator<Item = (f64, f64)> + 'a {
    p.values().iter().copied().zip(q.values().iter().copied())
}

impl ConsistencyLoss for KlPredPseudo {
    fn name(&self) -> &'static str {
        "kl_pred_pseudo"
    }

    fn value(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> f64 {
        values(p_hat, p_tilde)
            .map(|(ph, pt)| ph * (clamped_ln(ph) - clamped_ln(pt)))
            .sum()
    }

    // p̂_n [ln p̂_n − ln p̃_n − Lc]
    fn grad_pred_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64> {
        let lc = self.value(p_hat, p_tilde);
        values(p_hat, p_tilde)
            .map(|(ph, pt)| ph * (clamped_ln(ph) - clamped_ln(pt) - lc))
            .collect()
    }

    // p̃_n − p̂_n
    fn grad_pseudo_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64> {
        values(p_hat, p_tilde).map(|(ph, pt)| pt - ph).collect()
    }
}

impl ConsistencyLoss for KlPseudoPred {
    fn name(&self) -> &'static str {
        "kl_pseudo_pred"
    }

    fn value(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> f64 {
        values(p_hat, p_tilde)
            .map(|(ph, pt)| pt * (clamped_ln(pt) - clamped_ln(ph)))
            .sum()
    }

    // p̂_n − p̃_n
    fn grad_pred_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64> {
        values(p_hat, p_tilde).map(|(ph, pt)| ph - pt).collect()
    }

    // p̃_n [ln p̃_n − ln p̂_n − Lc]
    fn grad_pseudo_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64> {
        let lc = self.value(p_hat, p_tilde);
        values(p_hat, p_tilde)
            .map(|(ph, pt)| pt * (clamped_ln(pt) - clamped_ln(ph) - lc))
            .collect()
    }
}

impl SquaredError {
    /// `2 q_n [(q_n − r_n) − Σ_k q_k (q_k − r_k)]`, the gradient of `‖q − r‖²`
    /// with respect to the logits of `q`.
    fn grad_through(q: &ProbVector, r: &ProbVector) -> Vec<f64> {
        let mean: f64 = values(q, r).map(|(qk, rk)| qk * (qk - rk)).sum();
        values(q, r).map(|(qn, rn)| 2.0 * qn * ((qn - rn) - mean)).collect()
    }
}

impl ConsistencyLoss for SquaredError {
    fn name(&self) -> &'static str {
        "l2"
    }

    fn value(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> f64 {
        values(p_hat, p_tilde).map(|(ph, pt)| (pt - ph).powi(2)).sum()
    }

    fn grad_pred_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64> {
        Self::grad_through(p_hat, p_tilde)
    }

    fn grad_pseudo_logits(&self, p_hat: &ProbVector, p_tilde: &ProbVector) -> Vec<f64> {
        Self::grad_through(p_tilde, p_hat)
    }
}

static REGISTRY: [&dyn ConsistencyLoss; 3] = [&KlPredPseudo, &KlPseudoPred, &SquaredError];

/// Looks up a consistency term by config name.
pub fn consistency_loss(name: &str) -> Result<&'static dyn ConsistencyLoss> {
    REGISTRY
        .iter()
        .copied()
        .find(|l| l.name() == name)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown consistency loss {name:?}, expected one of {:?}",
                registered_losses()
            ))
        })
}

pub fn registered_losses() -> Vec<&'static str> {
    REGISTRY.iter().map(|l| l.name()).collect()
}

/// Config-level selector for the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcVariant {
    #[default]
    KlPredPseudo,
    KlPseudoPred,
    L2,
}

impl LcVariant {
    pub const ALL: [LcVariant; 3] = [LcVariant::KlPredPseudo, LcVariant::KlPseudoPred, LcVariant::L2];

    pub fn name(self) -> &'static str {
        match self {
            LcVariant::KlPredPseudo => "kl_pred_pseudo",
            LcVariant::KlPseudoPred => "kl_pseudo_pred",
            LcVariant::L2 => "l2",
        }
    }

    pub fn strategy(self) -> &'static dyn ConsistencyLoss {
        consistency_loss(self.name()).expect("every variant is registered")
    }
}

impl std::str::FromStr for LcVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LcVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown consistency loss {s:?}")))
    }
}

fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.03
}
fn default_lambda() -> f64 {
    4000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Learning rate of the pseudo-logits.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub variant: LcVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            lambda: default_lambda(),
            variant: LcVariant::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need alpha > 0, beta >= 0, lambda >= 0 (got {}, {}, {})",
                self.alpha, self.beta, self.lambda
            )));
        }
        Ok(())
    }

    /// Set when `alpha <= beta`: pseudo-labels and predictions are then no
    /// longer positively linked and training is expected to fail.
    pub fn warning(&self) -> Option<String> {
        (self.alpha <= self.beta).then(|| {
            format!(
                "alpha ({}) <= beta ({}): predictions and pseudo-labels are no longer consistent",
                self.alpha, self.beta
            )
        })
    }
}

/// Per-example objective split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub lc: f64,
    pub le: f64,
}

fn check_dims(p_hat: &ProbVector, p_tilde: &ProbVector) -> Result<()> {
    if p_hat.len() != p_tilde.len() {
        return Err(invalid_input!(
            "prediction has {} classes, pseudo-label {}",
            p_hat.len(),
            p_tilde.len()
        ));
    }
    Ok(())
}

pub fn loss_value(p_hat: &ProbVector, p_tilde: &ProbVector, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_dims(p_hat, p_tilde)?;
    let lc = cfg.variant.strategy().value(p_hat, p_tilde);
    let le = entropy(p_hat);
    Ok(LossBreakdown {
        total: cfg.alpha * lc + cfg.beta * le,
        lc,
        le,
    })
}

/// `∂L/∂ỹ`.
pub fn grad_wrt_pseudo_logits(
    p_hat: &ProbVector,
    p_tilde: &ProbVector,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    check_dims(p_hat, p_tilde)?;
    let mut g = cfg.variant.strategy().grad_pseudo_logits(p_hat, p_tilde);
    g.iter_mut().for_each(|v| *v *= cfg.alpha);
    Ok(g)
}

/// `∂L/∂ŷ`. For `kl_pred_pseudo` this is
/// `p̂_n [(α − β) ln p̂_n − α ln p̃_n − L]`.
pub fn grad_wrt_logits(p_hat: &ProbVector, p_tilde: &ProbVector, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_dims(p_hat, p_tilde)?;
    let lc = cfg.variant.strategy().grad_pred_logits(p_hat, p_tilde);
    let h = entropy(p_hat);
    Ok(lc
        .into_iter()
        .zip(p_hat.values())
        .map(|(g, &ph)| cfg.alpha * g - cfg.beta * ph * (clamped_ln(ph) + h))
        .collect())
}

/// Cross-entropy `−ln p̂_y` against a hard label.
pub fn cross_entropy(p_hat: &ProbVector, label: usize) -> f64 {
    -clamped_ln(p_hat[label])
}

/// `∂(−ln p̂_y)/∂ŷ = p̂ − e_y`.
pub fn cross_entropy_grad(p_hat: &ProbVector, label: usize) -> Vec<f64> {
    let mut g = p_hat.values().to_vec();
    g[label] -= 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, RandomStream};
    use proptest::prelude::*;

    fn cfg(variant: LcVariant) -> LossConfig {
        LossConfig {
            variant,
            ..LossConfig::default()
        }
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(registered_losses(), vec!["kl_pred_pseudo", "kl_pseudo_pred", "l2"]);
        for v in LcVariant::ALL {
            assert_eq!(v.strategy().name(), v.name());
            assert_eq!(v.name().parse::<LcVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!(consistency_loss("huber").is_err());
    }

    #[test]
    fn identical_distributions() {
        let p = pv(&[0.2, 0.5, 0.3]);
        for v in LcVariant::ALL {
            let c = cfg(v);
            let b = loss_value(&p, &p, &c).unwrap();
            assert!(b.lc.abs() < 1e-15);
            assert!((b.total - c.beta * entropy(&p)).abs() < 1e-15);
            assert!(grad_wrt_pseudo_logits(&p, &p, &c)
                .unwrap()
                .iter()
                .all(|g| g.abs() < 1e-15));
        }
    }

    #[test]
    fn uniform_two_class_total() {
        let u = ProbVector::uniform(2);
        let b = loss_value(&u, &u, &LossConfig::default()).unwrap();
        assert!((b.total - 0.03 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn antipodal_l2() {
        let b = loss_value(&pv(&[0.0, 1.0]), &pv(&[1.0, 0.0]), &cfg(LcVariant::L2)).unwrap();
        assert_eq!(b.lc, 2.0);
    }

    #[test]
    fn pseudo_grad_against_confident_prediction() {
        let p_hat = softmax(&[60.0, 0.0]).unwrap();
        let g = grad_wrt_pseudo_logits(&p_hat, &ProbVector::uniform(2), &LossConfig::default()).unwrap();
        assert!((g[0] + 0.05).abs() < 1e-15);
        assert!((g[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn head_factor_closed_form() {
        let c = LossConfig::default();
        let p_hat = pv(&[0.6, 0.3, 0.1]);
        let p_tilde = pv(&[0.5, 0.25, 0.25]);
        let l = loss_value(&p_hat, &p_tilde, &c).unwrap().total;
        let g = grad_wrt_logits(&p_hat, &p_tilde, &c).unwrap();
        for n in 0..3 {
            let expect = p_hat[n]
                * ((c.alpha - c.beta) * p_hat[n].ln() - c.alpha * p_tilde[n].ln() - l);
            assert!((g[n] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_pair_gives_equal_components() {
        for v in LcVariant::ALL {
            let u = ProbVector::uniform(5);
            let g = grad_wrt_logits(&u, &u, &cfg(v)).unwrap();
            for x in &g {
                assert!((x - g[0]).abs() < 1e-15);
            }
            let s: f64 = g.iter().sum();
            assert!((s - 5.0 * g[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = ProbVector::uniform(2);
        let b = ProbVector::uniform(3);
        let c = LossConfig::default();
        assert!(loss_value(&a, &b, &c).is_err());
        assert!(grad_wrt_logits(&a, &b, &c).is_err());
        assert!(grad_wrt_pseudo_logits(&a, &b, &c).is_err());
    }

    #[test]
    fn warning_when_alpha_not_above_beta() {
        assert!(LossConfig::default().warning().is_none());
        let c = LossConfig {
            alpha: 0.01,
            ..LossConfig::default()
        };
        assert!(c.warning().is_some());
        assert!(c.validate().is_ok());
        assert!(LossConfig { alpha: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_onehot() {
        let p = pv(&[0.7, 0.2, 0.1]);
        assert_eq!(cross_entropy_grad(&p, 1), vec![0.7, 0.2 - 1.0, 0.1]);
        assert!((cross_entropy(&p, 0) + 0.7f64.ln()).abs() < 1e-15);
    }

    // Central differences of the loss evaluated on logits, kept separate from
    // the closed forms above.
    fn loss_of_logits(y_hat: &[f64], y_tilde: &[f64], c: &LossConfig) -> f64 {
        let ph = softmax(y_hat).unwrap();
        let pt = softmax(y_tilde).unwrap();
        loss_value(&ph, &pt, c).unwrap().total
    }

    fn fd(f: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..at.len())
            .map(|i| {
                let mut a = at.to_vec();
                let mut b = at.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = crate::numerics::l2_norm(a).max(crate::numerics::l2_norm(b));
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn finite_differences_hundred_instances_each_variant() {
        let mut rng = RandomStream::new(2024, 0);
        for v in LcVariant::ALL {
            for _ in 0..100 {
                let n = 2 + rng.index(6);
                let c = LossConfig {
                    alpha: rng.uniform_range(0.05, 1.0),
                    beta: rng.uniform_range(0.0, 0.5),
                    lambda: 1.0,
                    variant: v,
                };
                let yh: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal()).collect();
                let yt: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal()).collect();
                let ph = softmax(&yh).unwrap();
                let pt = softmax(&yt).unwrap();
                let num_t = fd(|y| loss_of_logits(&yh, y, &c), &yt);
                let num_h = fd(|y| loss_of_logits(y, &yt, &c), &yh);
                let an_t = grad_wrt_pseudo_logits(&ph, &pt, &c).unwrap();
                let an_h = grad_wrt_logits(&ph, &pt, &c).unwrap();
                assert!(rel_err(&an_t, &num_t) < 1e-6, "{v:?} pseudo {an_t:?} {num_t:?}");
                assert!(rel_err(&an_h, &num_h) < 1e-6, "{v:?} pred {an_h:?} {num_h:?}");
            }
        }
    }

    #[test]
    fn equal_alpha_beta_on_diagonal() {
        // β = α and p̃ = p̂: g_n = p̂_n (−α ln p̂_n − L), L = α·H(p̂)
        let c = LossConfig {
            alpha: 0.1,
            beta: 0.1,
            ..LossConfig::default()
        };
        let y = [0.4, -1.1, 0.9];
        let p = softmax(&y).unwrap();
        let l = c.alpha * entropy(&p);
        let g = grad_wrt_logits(&p, &p, &c).unwrap();
        let num = fd(|yh| loss_of_logits(yh, &y, &c), &y);
        for n in 0..3 {
            let closed = p[n] * (-c.alpha * p[n].ln() - l);
            assert!((g[n] - closed).abs() < 1e-15);
        }
        assert!(rel_err(&g, &num) < 1e-6);
    }

    fn probs() -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(-8.0f64..8.0, 2..7).prop_map(|v| softmax(&v).unwrap())
    }

    proptest! {
        #[test]
        fn gradients_sum_to_zero(y in prop::collection::vec(-8.0f64..8.0, 2..7), seed in any::<u64>(),
                                 alpha in 0.01f64..1.0, beta in 0.0f64..1.0) {
            let mut rng = RandomStream::new(seed, 0);
            let other: Vec<f64> = (0..y.len()).map(|_| 3.0 * rng.normal()).collect();
            let ph = softmax(&y).unwrap();
            let pt = softmax(&other).unwrap();
            for v in LcVariant::ALL {
                let c = LossConfig { alpha, beta, lambda: 1.0, variant: v };
                let s1: f64 = grad_wrt_pseudo_logits(&ph, &pt, &c).unwrap().iter().sum();
                let s2: f64 = grad_wrt_logits(&ph, &pt, &c).unwrap().iter().sum();
                prop_assert!(s1.abs() < 1e-12);
                prop_assert!(s2.abs() < 1e-10);
            }
        }

        #[test]
        fn kl_pred_pseudo_bounded_below_by_entropy_term(ph in probs(), seed in any::<u64>(), beta in 0.0f64..1.0) {
            let mut rng = RandomStream::new(seed, 1);
            let pt = softmax(&(0..ph.len()).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>()).unwrap();
            let c = LossConfig { beta, ..LossConfig::default() };
            let b = loss_value(&ph, &pt, &c).unwrap();
            prop_assert!(b.total >= c.beta * entropy(&ph) - 1e-10);
            prop_assert!((b.total - (c.alpha * b.lc + c.beta * b.le)).abs() < 1e-12);
        }
    }
}
