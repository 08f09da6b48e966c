//! A small feed-forward model with exact gradients.
//!
//! The model is a chain of linear layers (weight matrices, no biases), each
//! optionally followed by tanh, ending in a squared-error or softmax
//! cross-entropy loss. Forward and backward passes run entirely in f64
//! regardless of the stored element type. It exists to compute diagonal
//! Fisher values and input activations for Gram matrices, and to validate
//! both against finite differences.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::stats::ActivationBatch;
use crate::tensor::{Tensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// L = ½‖f(x) − y‖², the negative Gaussian log-likelihood up to a
    /// constant, so squared loss gradients are squared score values.
    SquaredError,
    /// L = −log softmax(f(x))[class].
    SoftmaxCrossEntropy,
}

/// Supervision for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Values(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone)]
pub struct LinearLayer<T> {
    pub name: String,
    /// Input-dim × output-dim, row-major.
    pub weight: Tensor<T>,
    pub tanh: bool,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(name: impl Into<String>, weight: Tensor<T>, tanh: bool) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "layer weight must be a matrix, got shape {:?}",
                weight.shape()
            )));
        }
        Ok(LinearLayer {
            name: name.into(),
            weight,
            tanh,
        })
    }

    fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel<T> {
    layers: Vec<LinearLayer<T>>,
    loss: Loss,
}

struct ForwardTrace {
    /// h_0 = x, h_1, ..., h_L (post-activation).
    activations: Vec<Vec<f64>>,
    /// z_1, ..., z_L (pre-activation).
    preactivations: Vec<Vec<f64>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(layers: Vec<LinearLayer<T>>, loss: Loss) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidScenario("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    pair[0].name,
                    pair[0].out_dim(),
                    pair[1].name,
                    pair[1].in_dim()
                )));
            }
        }
        let mut names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidScenario("duplicate layer names".into()));
        }
        Ok(ToyModel { layers, loss })
    }

    pub fn layers(&self) -> &[LinearLayer<T>] {
        &self.layers
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// Weights as a tensor map keyed by layer name.
    pub fn parameters(&self) -> TensorMap<T> {
        let mut map = TensorMap::new();
        for layer in &self.layers {
            map.insert(layer.name.clone(), layer.weight.clone());
        }
        map
    }

    /// Same architecture with weights replaced from `params` (matched by
    /// layer name and shape).
    pub fn with_parameters(&self, params: &TensorMap<T>) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let weight = params.get(&layer.name).ok_or_else(|| {
                Error::ManifestMismatch(format!("no weights for layer {}", layer.name))
            })?;
            if weight.shape() != layer.weight.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: weights {:?} vs expected {:?}",
                    layer.name,
                    weight.shape(),
                    layer.weight.shape()
                )));
            }
            layers.push(LinearLayer {
                name: layer.name.clone(),
                weight: weight.clone(),
                tanh: layer.tanh,
            });
        }
        ToyModel::new(layers, self.loss)
    }

    fn to_f64(&self) -> ToyModel<f64> {
        ToyModel {
            layers: self
                .layers
                .iter()
                .map(|l| LinearLayer {
                    name: l.name.clone(),
                    weight: l.weight.map(|v| v.acc()),
                    tanh: l.tanh,
                })
                .collect(),
            loss: self.loss,
        }
    }

    fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations = vec![x.to_vec()];
        let mut preactivations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = activations.last().expect("nonempty");
            let (din, dout) = (layer.in_dim(), layer.out_dim());
            let w = layer.weight.data();
            let mut z = vec![0.0f64; dout];
            for i in 0..din {
                let hi = h[i];
                let row = &w[i * dout..(i + 1) * dout];
                for (j, wij) in row.iter().enumerate() {
                    z[j] += hi * wij.acc();
                }
            }
            let a = if layer.tanh {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z.clone()
            };
            preactivations.push(z);
            activations.push(a);
        }
        Ok(ForwardTrace {
            activations,
            preactivations,
        })
    }

    /// Model output f(x).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(x)?;
        Ok(trace.activations.pop().expect("nonempty"))
    }

    fn loss_from_output(&self, f: &[f64], target: &Target) -> Result<f64> {
        match (self.loss, target) {
            (Loss::SquaredError, Target::Values(y)) => {
                if y.len() != f.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "target has {} values, output has {}",
                        y.len(),
                        f.len()
                    )));
                }
                Ok(0.5 * f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            }
            (Loss::SoftmaxCrossEntropy, Target::Class(c)) => {
                if *c >= f.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "class {c} out of range for {} outputs",
                        f.len()
                    )));
                }
                let p = softmax(f);
                Ok(-p[*c].ln())
            }
            _ => Err(Error::InvalidScenario(
                "target kind does not match the loss".into(),
            )),
        }
    }

    pub fn loss_value(&self, x: &[f64], target: &Target) -> Result<f64> {
        let f = self.forward(x)?;
        self.loss_from_output(&f, target)
    }

    /// Loss and exact per-layer gradient dL/dW via backpropagation. The
    /// gradient comes back as one flat f64 vector per layer, row-major.
    pub fn loss_gradient(&self, x: &[f64], target: &Target) -> Result<(f64, Vec<Vec<f64>>)> {
        let trace = self.forward_trace(x)?;
        let f = trace.activations.last().expect("nonempty");
        let loss = self.loss_from_output(f, target)?;

        // dL/df.
        let mut delta: Vec<f64> = match (self.loss, target) {
            (Loss::SquaredError, Target::Values(y)) => {
                f.iter().zip(y).map(|(a, b)| a - b).collect()
            }
            (Loss::SoftmaxCrossEntropy, Target::Class(c)) => {
                let mut p = softmax(f);
                p[*c] -= 1.0;
                p
            }
            _ => unreachable!("loss_from_output validated the pairing"),
        };

        let mut grads = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (din, dout) = (layer.in_dim(), layer.out_dim());
            // Through the activation: dL/dz = dL/dh · (1 - tanh²(z)).
            if layer.tanh {
                for (dv, z) in delta.iter_mut().zip(&trace.preactivations[l]) {
                    let t = z.tanh();
                    *dv *= 1.0 - t * t;
                }
            }
            // dL/dW = h_{l-1}ᵀ δ.
            let h_in = &trace.activations[l];
            let mut grad = vec![0.0f64; din * dout];
            for i in 0..din {
                for j in 0..dout {
                    grad[i * dout + j] = h_in[i] * delta[j];
                }
            }
            grads[l] = grad;
            // δ_{l-1} = W δ (matrix times column vector).
            if l > 0 {
                let w = layer.weight.data();
                let mut next = vec![0.0f64; din];
                for (i, nv) in next.iter_mut().enumerate() {
                    let row = &w[i * dout..(i + 1) * dout];
                    let mut acc = 0.0;
                    for (j, wij) in row.iter().enumerate() {
                        acc += wij.acc() * delta[j];
                    }
                    *nv = acc;
                }
                delta = next;
            }
        }
        Ok((loss, grads))
    }

    /// Input activations of every layer over a set of inputs, for Gram
    /// computation: layer l's batch holds h_{l-1} for each x.
    pub fn input_activations(&self, inputs: &[Vec<f64>]) -> Result<Vec<ActivationBatch>> {
        if inputs.is_empty() {
            return Err(Error::InvalidScenario("no inputs".into()));
        }
        let rows = inputs.len();
        let mut per_layer: Vec<Vec<f32>> =
            self.layers.iter().map(|l| Vec::with_capacity(rows * l.in_dim())).collect();
        for x in inputs {
            let trace = self.forward_trace(x)?;
            for (l, buf) in per_layer.iter_mut().enumerate() {
                buf.extend(trace.activations[l].iter().map(|&v| v as f32));
            }
        }
        self.layers
            .iter()
            .zip(per_layer)
            .map(|(layer, data)| ActivationBatch::new(layer.name.clone(), rows, layer.in_dim(), data))
            .collect()
    }
}

/// How Fisher targets are drawn.
#[derive(Debug, Clone)]
pub enum FisherMode<'a> {
    /// Targets sampled from the model's own predictive distribution:
    /// y = f(x) + standard normal noise for squared error, class ~
    /// softmax(f(x)) for cross entropy. `samples` draws per input.
    Sampled { samples: usize, seed: u64 },
    /// Observed targets, one per input (the empirical variant).
    Empirical { targets: &'a [Target] },
}

/// Diagonal Fisher values per layer: the average of squared loss gradients
/// over inputs (and sampled targets). Entries are nonnegative by
/// construction.
pub fn fisher_diagonal<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &[Vec<f64>],
    mode: FisherMode<'_>,
) -> Result<TensorMap<T>> {
    if inputs.is_empty() {
        return Err(Error::InvalidScenario("fisher needs at least one input".into()));
    }
    if let FisherMode::Sampled { samples, .. } = &mode {
        if *samples == 0 {
            return Err(Error::InvalidHyperparameter(
                "fisher needs at least one sample per input".into(),
            ));
        }
    }
    if let FisherMode::Empirical { targets } = &mode {
        if targets.len() != inputs.len() {
            return Err(Error::InvalidScenario(format!(
                "{} targets for {} inputs",
                targets.len(),
                inputs.len()
            )));
        }
    }

    let mut acc: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|l| vec![0.0f64; l.weight.numel()])
        .collect();
    let mut evaluations = 0usize;

    for (idx, x) in inputs.iter().enumerate() {
        match &mode {
            FisherMode::Sampled { samples, seed } => {
                let f = model.forward(x)?;
                let mut stream = rng::stream(*seed, "fisher-targets", idx as u64);
                for _ in 0..*samples {
                    let target = match model.loss() {
                        Loss::SquaredError => Target::Values(
                            f.iter().map(|&v| v + stream.next_normal()).collect(),
                        ),
                        Loss::SoftmaxCrossEntropy => {
                            let p = softmax(&f);
                            let u = stream.next_f64();
                            let mut cum = 0.0;
                            let mut class = p.len() - 1;
                            for (c, &pc) in p.iter().enumerate() {
                                cum += pc;
                                if u < cum {
                                    class = c;
                                    break;
                                }
                            }
                            Target::Class(class)
                        }
                    };
                    let (_, grads) = model.loss_gradient(x, &target)?;
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv * gv;
                        }
                    }
                    evaluations += 1;
                }
            }
            FisherMode::Empirical { targets } => {
                let (_, grads) = model.loss_gradient(x, &targets[idx])?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += gv * gv;
                    }
                }
                evaluations += 1;
            }
        }
    }

    let scale = 1.0 / evaluations as f64;
    let mut map = TensorMap::new();
    for (layer, a) in model.layers().iter().zip(acc) {
        let data: Vec<T> = a.into_iter().map(|v| T::from_acc(v * scale)).collect();
        map.insert(layer.name.clone(), layer.weight.with_data(data)?);
    }
    Ok(map)
}

/// Central-difference gradient of the loss with respect to every weight.
pub fn numeric_gradient<T: Scalar>(
    model: &ToyModel<T>,
    x: &[f64],
    target: &Target,
    epsilon: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let mut probe = model.to_f64();
    let mut grads = Vec::with_capacity(probe.layers.len());
    for l in 0..probe.layers.len() {
        let numel = probe.layers[l].weight.numel();
        let mut grad = vec![0.0f64; numel];
        for j in 0..numel {
            let original = probe.layers[l].weight.data()[j];
            probe.layers[l].weight.data_mut()[j] = original + epsilon;
            let plus = probe.loss_value(x, target)?;
            probe.layers[l].weight.data_mut()[j] = original - epsilon;
            let minus = probe.loss_value(x, target)?;
            probe.layers[l].weight.data_mut()[j] = original;
            grad[j] = (plus - minus) / (2.0 * epsilon);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Largest relative disagreement between the analytic and finite-difference
/// gradients: max_j |a_j − n_j| / max(|a_j|, |n_j|, 1e-8).
pub fn gradient_check<T: Scalar>(
    model: &ToyModel<T>,
    x: &[f64],
    target: &Target,
    epsilon: f64,
) -> Result<f64> {
    let (_, analytic) = model.loss_gradient(x, target)?;
    let numeric = numeric_gradient(model, x, target, epsilon)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// The comparison used by [`gradient_check`], exposed so corrupted
/// gradients can be checked against the same yardstick.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (ga, gb) in a.iter().zip(b) {
        for (&va, &vb) in ga.iter().zip(gb) {
            let denom = va.abs().max(vb.abs()).max(1e-8);
            worst = worst.max((va - vb).abs() / denom);
        }
    }
    worst
}
