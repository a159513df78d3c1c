//! Multi-layer perceptron backbone with a linear classification head.
//!
//! Every layer maps `x -> Wᵀx + b` with `W` stored as a `fan_in x fan_out`
//! matrix, so the head weights are `D x N` and column `n` is the class-`n`
//! weight vector. Hidden layers apply the configured activation; the head
//! output `ŷ` goes through softmax to give `p̂`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::numerics::{l2_norm, softmax, DenseMatrix, ProbVector, RandomStream};

const INIT_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Adds a bias to the classification head. Theorem checks run bias-free.
    #[serde(default = "default_true")]
    pub head_bias: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Width `D` of the feature fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }
}

/// Weights and bias of one affine layer. Also used as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    /// `out = Wᵀx + b`. Zero inputs are skipped, which pays off on sparse pixels.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.weights.row(i)) {
                *o += xi * w;
            }
        }
        out
    }

    /// `W δ`, the gradient flowing back to this layer's input.
    fn back_project(&self, delta: &[f64]) -> Vec<f64> {
        (0..self.fan_in())
            .map(|i| {
                self.weights
                    .row(i)
                    .iter()
                    .zip(delta)
                    .map(|(w, d)| w * d)
                    .sum()
            })
            .collect()
    }

    /// `W += x δᵀ`, `b += δ`.
    fn accumulate(&mut self, x: &[f64], delta: &[f64], with_bias: bool) {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (g, d) in self.weights.row_mut(i).iter_mut().zip(delta) {
                *g += xi * d;
            }
        }
        if with_bias {
            for (b, d) in self.bias.iter_mut().zip(delta) {
                *b += d;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

/// Whether a tensor is a weight matrix or a bias vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

fn tensors_of<'a>(hidden: &'a [Dense], head: &'a Dense) -> Vec<(&'a [f64], TensorKind)> {
    hidden
        .iter()
        .chain(std::iter::once(head))
        .flat_map(|l| {
            [
                (l.weights.values(), TensorKind::Weight),
                (l.bias.as_slice(), TensorKind::Bias),
            ]
        })
        .collect()
}

fn tensors_of_mut<'a>(
    hidden: &'a mut [Dense],
    head: &'a mut Dense,
) -> Vec<(&'a mut [f64], TensorKind)> {
    hidden
        .iter_mut()
        .chain(std::iter::once(head))
        .flat_map(|l| {
            [
                (l.weights.values_mut(), TensorKind::Weight),
                (l.bias.as_mut_slice(), TensorKind::Bias),
            ]
        })
        .collect()
}

impl ModelParams {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Flat views of every tensor, weights then bias per layer, head last.
    pub fn tensors(&self) -> Vec<(&[f64], TensorKind)> {
        tensors_of(&self.hidden, &self.head)
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], TensorKind)> {
        tensors_of_mut(&mut self.hidden, &mut self.head)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(t, _)| t.iter().all(|v| v.is_finite()))
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layers: Vec<Dense> = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        let head = layers.pop().expect("head layer");
        Ok(Self {
            arch: arch.clone(),
            hidden: layers,
            head,
        })
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            hidden: params
                .hidden
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            head: Dense::zeros(params.head.fan_in(), params.head.fan_out()),
        }
    }

    pub fn tensors(&self) -> Vec<(&[f64], TensorKind)> {
        tensors_of(&self.hidden, &self.head)
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], TensorKind)> {
        tensors_of_mut(&mut self.hidden, &mut self.head)
    }

    pub fn scale(&mut self, s: f64) {
        for (t, _) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Frobenius norm of the head weight gradient `∂L/∂W`.
    pub fn head_weight_norm(&self) -> f64 {
        l2_norm(self.head.weights.values())
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|(t, _)| t.iter().all(|&v| v == 0.0))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = RandomStream::new(seed, INIT_STREAM);
    for layer in params.hidden.iter_mut().chain(std::iter::once(&mut params.head)) {
        let limit = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
        for w in layer.weights.values_mut() {
            *w = rng.uniform_range(-limit, limit);
        }
    }
    Ok(params)
}

/// Activations cached by [`forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activation of each hidden layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation of each hidden layer.
    pub post: Vec<Vec<f64>>,
    pub y_hat: Vec<f64>,
    pub p_hat: ProbVector,
}

impl ForwardTrace {
    /// The feature `f` entering the head.
    pub fn feature(&self) -> &[f64] {
        self.post.last().unwrap_or(&self.input)
    }
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.arch.input_dim {
        return Err(invalid_input!(
            "input has {} dims, architecture expects {}",
            x.len(),
            params.arch.input_dim
        ));
    }
    let act = params.arch.activation;
    let mut pre = Vec::with_capacity(params.hidden.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(params.hidden.len());
    for layer in &params.hidden {
        let z = layer.affine(post.last().map_or(x, Vec::as_slice));
        let a = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
        post.push(a);
    }
    let y_hat = params.head.affine(post.last().map_or(x, Vec::as_slice));
    let p_hat = softmax(&y_hat)?;
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre,
        post,
        y_hat,
        p_hat,
    })
}

/// Head activation `ŷ` only.
pub fn predict_logits(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(params, x)?.y_hat)
}

fn check_trace(trace: &ForwardTrace, grad_y_hat: &[f64], params: &ModelParams) -> Result<()> {
    let stale = trace.pre.len() != params.hidden.len()
        || trace.input.len() != params.arch.input_dim
        || trace.y_hat.len() != params.arch.num_classes
        || trace
            .pre
            .iter()
            .zip(&params.hidden)
            .any(|(z, l)| z.len() != l.fan_out());
    if stale {
        return Err(Error::InvalidState(
            "forward trace does not match parameter shapes".into(),
        ));
    }
    if grad_y_hat.len() != params.arch.num_classes {
        return Err(invalid_input!(
            "grad_y_hat has {} entries, expected {}",
            grad_y_hat.len(),
            params.arch.num_classes
        ));
    }
    Ok(())
}

/// Adds the parameter gradient for upstream gradient `grad_y_hat` into `grads`.
pub fn backward_into(
    trace: &ForwardTrace,
    grad_y_hat: &[f64],
    params: &ModelParams,
    grads: &mut ParamGrads,
) -> Result<()> {
    check_trace(trace, grad_y_hat, params)?;
    grads
        .head
        .accumulate(trace.feature(), grad_y_hat, params.arch.head_bias);
    if params.hidden.is_empty() {
        return Ok(());
    }
    let act = params.arch.activation;
    let mut upstream = params.head.back_project(grad_y_hat);
    for l in (0..params.hidden.len()).rev() {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(trace.pre[l].iter().zip(&trace.post[l]))
            .map(|(g, (&z, &a))| g * act.derivative(z, a))
            .collect();
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.post[l - 1]
        };
        grads.hidden[l].accumulate(input, &delta, true);
        if l > 0 {
            upstream = params.hidden[l].back_project(&delta);
        }
    }
    Ok(())
}

pub fn backward(
    trace: &ForwardTrace,
    grad_y_hat: &[f64],
    params: &ModelParams,
) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros_like(params);
    backward_into(trace, grad_y_hat, params, &mut grads)?;
    Ok(grads)
}

const CHECKPOINT_FORMAT: &str = "r2d2-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    arch: Architecture,
    tensors: Vec<TensorRecord>,
}

impl ModelParams {
    fn to_doc(&self) -> CheckpointDoc {
        let mut tensors = Vec::new();
        let named = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("hidden.{i}"), l))
            .chain(std::iter::once(("head".to_string(), &self.head)));
        for (prefix, layer) in named {
            tensors.push(TensorRecord {
                name: format!("{prefix}.weight"),
                shape: vec![layer.fan_in(), layer.fan_out()],
                values: layer.weights.values().to_vec(),
            });
            tensors.push(TensorRecord {
                name: format!("{prefix}.bias"),
                shape: vec![layer.fan_out()],
                values: layer.bias.clone(),
            });
        }
        CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            tensors,
        }
    }

    fn from_doc(doc: CheckpointDoc) -> Result<Self> {
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(invalid_input!(
                "unsupported checkpoint {} v{}",
                doc.format,
                doc.version
            ));
        }
        let mut params = ModelParams::zeros(&doc.arch)?;
        let expected = params.tensors().len();
        if doc.tensors.len() != expected {
            return Err(invalid_input!(
                "checkpoint has {} tensors, architecture needs {expected}",
                doc.tensors.len()
            ));
        }
        for ((dst, _), rec) in params.tensors_mut().into_iter().zip(doc.tensors) {
            if dst.len() != rec.values.len() || rec.shape.iter().product::<usize>() != dst.len() {
                return Err(invalid_input!("tensor {} has the wrong shape", rec.name));
            }
            dst.copy_from_slice(&rec.values);
        }
        if !params.is_finite() {
            return Err(invalid_input!("checkpoint holds non-finite values"));
        }
        Ok(params)
    }

    /// Serialises to the versioned JSON checkpoint document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(hidden: Vec<usize>, activation: Activation) -> Architecture {
        Architecture {
            input_dim: 3,
            hidden_dims: hidden,
            num_classes: 4,
            activation,
            head_bias: true,
        }
    }

    #[test]
    fn no_hidden_layers_feeds_raw_input() {
        let a = arch(vec![], Activation::Relu);
        assert_eq!(a.feature_dim(), 3);
        let p = init_params(&a, 1).unwrap();
        assert!(p.hidden.is_empty());
        assert_eq!(p.head.weights.shape(), (3, 4));
        let t = forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(t.feature(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn init_is_deterministic_and_zero_bias() {
        let a = arch(vec![5, 6], Activation::Tanh);
        let p = init_params(&a, 9).unwrap();
        assert_eq!(p, init_params(&a, 9).unwrap());
        assert_ne!(p, init_params(&a, 10).unwrap());
        for (t, kind) in p.tensors() {
            if kind == TensorKind::Bias {
                assert!(t.iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn glorot_sample_mean_near_zero() {
        let a = Architecture {
            input_dim: 100,
            hidden_dims: vec![100],
            num_classes: 2,
            activation: Activation::Relu,
            head_bias: true,
        };
        let p = init_params(&a, 3).unwrap();
        let w = p.hidden[0].weights.values();
        assert_eq!(w.len(), 10_000);
        let limit = (6.0f64 / 200.0).sqrt();
        assert!(w.iter().all(|x| x.abs() <= limit));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        // uniform(-a, a) has sd a/sqrt(3)
        let se = limit / 3f64.sqrt() / (w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let p = ModelParams::zeros(&arch(vec![4], Activation::Relu)).unwrap();
        let t = forward(&p, &[0.5, 0.5, 0.5]).unwrap();
        for &v in t.p_hat.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn opposite_columns_give_logistic() {
        let a = Architecture {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
            head_bias: false,
        };
        let mut p = ModelParams::zeros(&a).unwrap();
        let w1 = [0.7, -1.3];
        for i in 0..2 {
            p.head.weights.set(i, 0, w1[i]);
            p.head.weights.set(i, 1, -w1[i]);
        }
        let f = [0.4, 0.9];
        let t = forward(&p, &f).unwrap();
        let s = 2.0 * (w1[0] * f[0] + w1[1] * f[1]);
        let logistic = 1.0 / (1.0 + (-s).exp());
        assert!((t.p_hat[0] - logistic).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let p = init_params(&arch(vec![2], Activation::Relu), 0).unwrap();
        assert!(forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init_params(&arch(vec![5, 3], Activation::Tanh), 0).unwrap();
        let t = forward(&p, &[0.3, -0.2, 0.9]).unwrap();
        assert!(backward(&t, &[0.0; 4], &p).unwrap().is_zero());
    }

    #[test]
    fn single_layer_head_grad_is_outer_product() {
        let p = init_params(&arch(vec![], Activation::Relu), 0).unwrap();
        let x = [0.3, -0.2, 0.9];
        let g = [0.1, -0.4, 0.25, 0.05];
        let t = forward(&p, &x).unwrap();
        let grads = backward(&t, &g, &p).unwrap();
        for i in 0..3 {
            for n in 0..4 {
                assert_eq!(grads.head.weights.get(i, n), g[n] * x[i]);
            }
        }
        assert_eq!(grads.head.bias, g.to_vec());
    }

    #[test]
    fn stale_trace_rejected() {
        let small = init_params(&arch(vec![2], Activation::Relu), 0).unwrap();
        let big = init_params(&arch(vec![3], Activation::Relu), 0).unwrap();
        let t = forward(&small, &[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(
            backward(&t, &[0.0; 4], &big),
            Err(Error::InvalidState(_))
        ));
        assert!(backward(&t, &[0.0; 3], &small).is_err());
    }

    #[test]
    fn bias_free_head_has_no_bias_grad() {
        let mut a = arch(vec![3], Activation::Relu);
        a.head_bias = false;
        let p = init_params(&a, 2).unwrap();
        let t = forward(&p, &[0.2, 0.4, 0.6]).unwrap();
        let g = backward(&t, &[1.0, -1.0, 0.5, -0.5], &p).unwrap();
        assert!(g.head.bias.iter().all(|&b| b == 0.0));
    }

    /// Central differences of the probe `Σ g·ŷ` against backward.
    #[test]
    fn backward_matches_finite_differences() {
        for activation in [Activation::Tanh, Activation::Relu] {
            let a = arch(vec![6, 5, 4], activation);
            let mut p = init_params(&a, 5).unwrap();
            for (t, _) in p.tensors_mut() {
                for (k, v) in t.iter_mut().enumerate() {
                    *v += 0.01 * (k as f64 + 1.0).sin();
                }
            }
            let x = [0.35, -0.7, 0.55];
            let g = [0.3, -0.2, 0.6, -0.1];
            let probe = |p: &ModelParams| -> f64 {
                let y = forward(p, &x).unwrap().y_hat;
                y.iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            let analytic = backward(&forward(&p, &x).unwrap(), &g, &p).unwrap();
            let h = 1e-5;
            let ntensors = p.tensors().len();
            for ti in 0..ntensors {
                let len = p.tensors()[ti].0.len();
                for k in 0..len {
                    let orig = p.tensors()[ti].0[k];
                    p.tensors_mut()[ti].0[k] = orig + h;
                    let fp = probe(&p);
                    p.tensors_mut()[ti].0[k] = orig - h;
                    let fm = probe(&p);
                    p.tensors_mut()[ti].0[k] = orig;
                    let numeric = (fp - fm) / (2.0 * h);
                    let an = analytic.tensors()[ti].0[k];
                    let denom = an.abs().max(numeric.abs()).max(1e-3);
                    assert!(
                        (an - numeric).abs() / denom < 1e-6,
                        "{activation:?} tensor {ti} entry {k}: {an} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_missing_tensors_rejected() {
        let p = init_params(&arch(vec![2], Activation::Relu), 0).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        doc["tensors"].as_array_mut().unwrap().pop();
        assert!(ModelParams::from_json(&doc.to_string()).is_err());
        doc["version"] = 99.into();
        assert!(ModelParams::from_json(&doc.to_string()).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), scale in 1e-300f64..1e300) {
            let mut p = init_params(&arch(vec![3, 2], Activation::Tanh), seed).unwrap();
            for (t, _) in p.tensors_mut() {
                for v in t.iter_mut() {
                    *v *= scale;
                }
            }
            let back = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
            for ((a, _), (b, _)) in p.tensors().iter().zip(back.tensors()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(back.arch(), p.arch());
        }
    }
}
