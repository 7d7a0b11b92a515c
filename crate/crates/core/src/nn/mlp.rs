use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::{log_sum_exp, softmax, Matrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Layer widths (input first, output last). Hidden layers share one activation;
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec { widths, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least 2 widths, got {}",
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        MlpParams { layers }
    }

    /// Uniform fan-in/fan-out initialization, zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Self {
        let mut params = MlpParams::zeros(spec);
        for layer in &mut params.layers {
            let (fan_out, fan_in) = layer.weight.shape();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn check_shapes(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::dim("layer count", spec.num_layers(), self.layers.len()));
        }
        for (layer, w) in self.layers.iter().zip(spec.widths.windows(2)) {
            if layer.weight.shape() != (w[1], w[0]) {
                return Err(Error::dim("layer weight size", w[0] * w[1], layer.weight.data().len()));
            }
            if layer.bias.len() != w[1] {
                return Err(Error::dim("layer bias width", w[1], layer.bias.len()));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Visit every scalar parameter in layer order (weights, then biases).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        self.values().nth(index).expect("parameter index in range")
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        *self.values_mut().nth(index).expect("parameter index in range") = value;
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &MlpParams, s: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim("parameter count", self.num_params(), other.num_params()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Per-layer intermediate values needed for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    pub output: Matrix,
}

/// Gradients with respect to the parameters and to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: MlpParams,
    pub input: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        params.check_shapes(&spec)?;
        Ok(Mlp { spec, params })
    }

    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let params = MlpParams::init(&spec, rng);
        Ok(Mlp { spec, params })
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_width() {
            return Err(Error::dim("MLP input width", self.input_width(), x.cols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let last = self.params.layers.len() - 1;
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last + 1);
        let mut h = x.clone();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = h.matmul_t(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            if i < last {
                let act = self.spec.activation;
                a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagate `d_out = ∂L/∂output` through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Gradients> {
        if d_out.shape() != cache.output.shape() {
            return Err(Error::dim("output gradient size", cache.output.data().len(), d_out.data().len()));
        }
        let mut grads = MlpParams::zeros(&self.spec);
        let last = self.params.layers.len() - 1;
        let mut delta = d_out.clone();
        for i in (0..=last).rev() {
            if i < last {
                // delta currently holds ∂L/∂a for this layer's activation output
                let act = self.spec.activation;
                let pre = &cache.pre[i];
                let out = &cache.inputs[i + 1];
                for ((d, &p), &o) in delta.data_mut().iter_mut().zip(pre.data()).zip(out.data()) {
                    *d *= act.derivative(p, o);
                }
            }
            let g = &mut grads.layers[i];
            g.weight = delta.t_matmul(&cache.inputs[i])?;
            for r in 0..delta.rows() {
                for (b, d) in g.bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            delta = delta.matmul(&self.params.layers[i].weight)?;
        }
        Ok(Gradients {
            params: grads,
            input: delta,
        })
    }

    /// Mean loss over the batch with parameter and input gradients.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        labels: &[usize],
        head: &dyn LossHead,
    ) -> Result<(f64, Gradients)> {
        if x.rows() == 0 {
            return Err(Error::Empty("training batch"));
        }
        if labels.len() != x.rows() {
            return Err(Error::dim("label count", x.rows(), labels.len()));
        }
        let cache = self.forward_cached(x)?;
        let (loss, d_out) = head.loss_and_grad(&cache.output, labels)?;
        let grads = self.backward(&cache, &d_out)?;
        Ok((loss, grads))
    }
}

/// A loss applied to the network output: returns the batch-mean loss and
/// `∂loss/∂output`.
pub trait LossHead: Sync {
    fn loss_and_grad(&self, output: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)>;
}

/// Softmax cross-entropy over raw logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxCrossEntropy;

impl LossHead for SoftmaxCrossEntropy {
    fn loss_and_grad(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        softmax_ce(logits, labels)
    }
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Empty("loss batch"));
    }
    check_labels(labels, logits.cols())?;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        loss += log_sum_exp(row) - row[y];
        let p = softmax(row);
        let g = grad.row_mut(i);
        for (gj, pj) in g.iter_mut().zip(p) {
            *gj = pj / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}
