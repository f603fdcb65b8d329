//! Layers with explicit forward/backward passes: affine, batch
//! normalization, and ReLU, plus a `Sequential` container.
//!
//! Each layer keeps its own gradient buffers and caches the values its
//! backward pass needs during `forward_train`. `forward_infer` takes `&self`,
//! never caches, and always normalizes by running statistics, so frozen
//! models can be shared immutably and are trivially row-independent.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::{fill_uniform, SeededRng};
use crate::{Error, Result};

/// Batch-normalization behavior.
///
/// `Train` normalizes by batch statistics and updates the running averages.
/// `Eval` and `FrozenStats` both normalize by the stored running statistics;
/// the distinction is intent: `FrozenStats` marks a layer that still trains
/// its scale and shift while its statistics stay fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
    FrozenStats,
}

/// A mutable view of one trainable tensor and its gradient, in a stable
/// traversal order, for the optimizer.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Fully connected layer computing `y = x W + b` with `W` stored
/// input-major (`in_dim x out_dim`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineLayer {
    in_dim: usize,
    out_dim: usize,
    weight: Matrix,
    bias: Vec<f64>,
    #[serde(skip)]
    grad_weight: Matrix,
    #[serde(skip)]
    grad_bias: Vec<f64>,
    #[serde(skip)]
    cache: Option<Matrix>,
}

impl AffineLayer {
    /// Initializes weight and bias uniformly in `[-sqrt(1/in), sqrt(1/in))`,
    /// drawing weights row-major first, then the bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let mut weight = Matrix::zeros(in_dim, out_dim);
        fill_uniform(rng, weight.data_mut(), bound);
        let mut bias = vec![0.0; out_dim];
        fill_uniform(rng, &mut bias, bound);
        AffineLayer {
            in_dim,
            out_dim,
            weight,
            bias,
            grad_weight: Matrix::zeros(in_dim, out_dim),
            grad_bias: vec![0.0; out_dim],
            cache: None,
        }
    }

    /// Builds a layer from an explicit weight (`in_dim x out_dim`) and bias.
    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} does not match {} output columns",
                bias.len(),
                weight.cols()
            )));
        }
        let (in_dim, out_dim) = (weight.rows(), weight.cols());
        Ok(AffineLayer {
            in_dim,
            out_dim,
            weight,
            bias,
            grad_weight: Matrix::zeros(in_dim, out_dim),
            grad_bias: vec![0.0; out_dim],
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn mac_count(&self) -> usize {
        self.in_dim * self.out_dim
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "affine layer expects {} input columns, got {}",
                self.in_dim,
                input.cols()
            )));
        }
        Ok(())
    }

    fn apply(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = input.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Forward pass that caches the input for a later `backward`.
    pub fn forward_train(&mut self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        self.cache = Some(input.clone());
        self.apply(input)
    }

    /// Pure forward pass; usable on shared references to frozen models.
    pub fn forward_infer(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        self.apply(input)
    }

    /// Consumes the cached input, accumulates parameter gradients, and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::State("affine backward without forward".into()))?;
        if grad_out.rows() != input.rows() || grad_out.cols() != self.out_dim {
            return Err(Error::Shape(format!(
                "affine backward expects {}x{} gradient, got {}x{}",
                input.rows(),
                self.out_dim,
                grad_out.rows(),
                grad_out.cols()
            )));
        }
        self.ensure_grad_shapes();
        let gw = input.matmul_tn(grad_out)?;
        for (acc, &g) in self.grad_weight.data_mut().iter_mut().zip(gw.data()) {
            *acc += g;
        }
        for (acc, g) in self.grad_bias.iter_mut().zip(grad_out.col_sums()) {
            *acc += g;
        }
        grad_out.matmul_nt(&self.weight)
    }

    fn ensure_grad_shapes(&mut self) {
        if self.grad_weight.rows() != self.in_dim || self.grad_weight.cols() != self.out_dim {
            self.grad_weight = Matrix::zeros(self.in_dim, self.out_dim);
        }
        if self.grad_bias.len() != self.out_dim {
            self.grad_bias = vec![0.0; self.out_dim];
        }
    }

    pub fn zero_grads(&mut self) {
        self.ensure_grad_shapes();
        self.grad_weight.data_mut().fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        self.ensure_grad_shapes();
        vec![
            ParamSlot { value: self.weight.data_mut(), grad: self.grad_weight.data_mut() },
            ParamSlot { value: &mut self.bias, grad: &mut self.grad_bias },
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BnCache {
    /// Normalized activations used for the scale gradient.
    x_hat: Matrix,
    /// Reciprocal standard deviation per feature for the statistics used.
    inv_std: Vec<f64>,
    /// Whether batch statistics were used (full backward) or stored ones.
    batch_stats: bool,
}

/// Batch normalization with the usual affine reparameterization
/// `y = gamma * x_hat + beta`.
///
/// Batch variance is the biased estimate (divide by N), and the running
/// averages are updated with those same biased statistics:
/// `running = (1 - momentum) * running + momentum * batch`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNormLayer {
    features: usize,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
    mode: Mode,
    #[serde(skip)]
    grad_gamma: Vec<f64>,
    #[serde(skip)]
    grad_beta: Vec<f64>,
    #[serde(skip)]
    cache: Option<BnCache>,
}

impl BatchNormLayer {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(features: usize) -> Self {
        BatchNormLayer {
            features,
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            mode: Mode::Train,
            grad_gamma: vec![0.0; features],
            grad_beta: vec![0.0; features],
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn param_count(&self) -> usize {
        2 * self.features
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.features {
            return Err(Error::Shape(format!(
                "batch norm expects {} features, got {}",
                self.features,
                input.cols()
            )));
        }
        Ok(())
    }

    fn normalize(&self, input: &Matrix, mean: &[f64], inv_std: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(input.rows(), self.features);
        for r in 0..input.rows() {
            let x = input.row(r);
            let y = out.row_mut(r);
            for f in 0..self.features {
                y[f] = (x[f] - mean[f]) * inv_std[f];
            }
        }
        out
    }

    /// Forward pass honoring the layer's mode; caches what backward needs.
    pub fn forward_train(&mut self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let (x_hat, inv_std, batch_stats) = match self.mode {
            Mode::Train => {
                let n = input.rows();
                if n < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch normalization needs at least 2 rows in Train mode, got {n}"
                    )));
                }
                let inv_n = 1.0 / n as f64;
                let mut mean = input.col_sums();
                for m in &mut mean {
                    *m *= inv_n;
                }
                let mut var = vec![0.0; self.features];
                for r in 0..n {
                    let x = input.row(r);
                    for f in 0..self.features {
                        let d = x[f] - mean[f];
                        var[f] += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_n;
                }
                for f in 0..self.features {
                    self.running_mean[f] =
                        (1.0 - self.momentum) * self.running_mean[f] + self.momentum * mean[f];
                    self.running_var[f] =
                        (1.0 - self.momentum) * self.running_var[f] + self.momentum * var[f];
                }
                let inv_std: Vec<f64> =
                    var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
                (self.normalize(input, &mean, &inv_std), inv_std, true)
            }
            Mode::Eval | Mode::FrozenStats => {
                let inv_std: Vec<f64> = self
                    .running_var
                    .iter()
                    .map(|&v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                (self.normalize(input, &self.running_mean, &inv_std), inv_std, false)
            }
        };
        let mut out = Matrix::zeros(input.rows(), self.features);
        for r in 0..input.rows() {
            let xh = x_hat.row(r);
            let y = out.row_mut(r);
            for f in 0..self.features {
                y[f] = self.gamma[f] * xh[f] + self.beta[f];
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, batch_stats });
        Ok(out)
    }

    /// Pure forward pass using running statistics; a per-row function of the
    /// input, independent of batch composition.
    pub fn forward_infer(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut out = Matrix::zeros(input.rows(), self.features);
        for r in 0..input.rows() {
            let x = input.row(r);
            let y = out.row_mut(r);
            for f in 0..self.features {
                let inv_std = 1.0 / (self.running_var[f] + self.eps).sqrt();
                let x_hat = (x[f] - self.running_mean[f]) * inv_std;
                y[f] = self.gamma[f] * x_hat + self.beta[f];
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batch norm backward without forward".into()))?;
        let n = cache.x_hat.rows();
        if grad_out.rows() != n || grad_out.cols() != self.features {
            return Err(Error::Shape(format!(
                "batch norm backward expects {}x{} gradient, got {}x{}",
                n,
                self.features,
                grad_out.rows(),
                grad_out.cols()
            )));
        }
        self.ensure_grad_shapes();
        // Shared by both statistics sources.
        let mut sum_g = vec![0.0; self.features];
        let mut sum_g_xhat = vec![0.0; self.features];
        for r in 0..n {
            let g = grad_out.row(r);
            let xh = cache.x_hat.row(r);
            for f in 0..self.features {
                sum_g[f] += g[f];
                sum_g_xhat[f] += g[f] * xh[f];
            }
        }
        for f in 0..self.features {
            self.grad_gamma[f] += sum_g_xhat[f];
            self.grad_beta[f] += sum_g[f];
        }
        let mut grad_in = Matrix::zeros(n, self.features);
        if cache.batch_stats {
            // Full backward through the batch statistics:
            // dx = inv_std/N * (N*dxh - sum(dxh) - xh * sum(dxh*xh)),
            // where dxh = g * gamma.
            let inv_n = 1.0 / n as f64;
            for r in 0..n {
                let g = grad_out.row(r);
                let xh = cache.x_hat.row(r);
                let out = grad_in.row_mut(r);
                for f in 0..self.features {
                    let dxh = g[f] * self.gamma[f];
                    let sum_dxh = sum_g[f] * self.gamma[f];
                    let sum_dxh_xhat = sum_g_xhat[f] * self.gamma[f];
                    out[f] = cache.inv_std[f]
                        * inv_n
                        * (n as f64 * dxh - sum_dxh - xh[f] * sum_dxh_xhat);
                }
            }
        } else {
            // Running statistics are constants: dx = g * gamma * inv_std.
            for r in 0..n {
                let g = grad_out.row(r);
                let out = grad_in.row_mut(r);
                for f in 0..self.features {
                    out[f] = g[f] * self.gamma[f] * cache.inv_std[f];
                }
            }
        }
        Ok(grad_in)
    }

    fn ensure_grad_shapes(&mut self) {
        if self.grad_gamma.len() != self.features {
            self.grad_gamma = vec![0.0; self.features];
        }
        if self.grad_beta.len() != self.features {
            self.grad_beta = vec![0.0; self.features];
        }
    }

    pub fn zero_grads(&mut self) {
        self.ensure_grad_shapes();
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        self.ensure_grad_shapes();
        vec![
            ParamSlot { value: &mut self.gamma, grad: &mut self.grad_gamma },
            ParamSlot { value: &mut self.beta, grad: &mut self.grad_beta },
        ]
    }
}

/// Elementwise `max(0, x)`; backward masks positions where the forward
/// input was not strictly positive.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReluLayer {
    #[serde(skip)]
    cache: Option<Matrix>,
}

impl ReluLayer {
    pub fn new() -> Self {
        ReluLayer { cache: None }
    }

    pub fn forward_train(&mut self, input: &Matrix) -> Result<Matrix> {
        self.cache = Some(input.clone());
        Ok(input.map(|v| v.max(0.0)))
    }

    pub fn forward_infer(&self, input: &Matrix) -> Result<Matrix> {
        Ok(input.map(|v| v.max(0.0)))
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::State("relu backward without forward".into()))?;
        if grad_out.rows() != input.rows() || grad_out.cols() != input.cols() {
            return Err(Error::Shape("relu backward gradient shape mismatch".into()));
        }
        let mut out = grad_out.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(input.data()) {
            if x <= 0.0 {
                *o = 0.0;
            }
        }
        Ok(out)
    }
}

/// One element of a sequential stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Affine(AffineLayer),
    BatchNorm(BatchNormLayer),
    Relu(ReluLayer),
}

impl Layer {
    pub fn forward_train(&mut self, input: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Affine(l) => l.forward_train(input),
            Layer::BatchNorm(l) => l.forward_train(input),
            Layer::Relu(l) => l.forward_train(input),
        }
    }

    pub fn forward_infer(&self, input: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Affine(l) => l.forward_infer(input),
            Layer::BatchNorm(l) => l.forward_infer(input),
            Layer::Relu(l) => l.forward_infer(input),
        }
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Affine(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
        }
    }
}

/// A stack of layers applied in order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward_train(&mut self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward_train(&x)?;
        }
        Ok(x)
    }

    pub fn forward_infer(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward_infer(&x)?;
        }
        Ok(x)
    }

    /// Backward in reverse layer order; returns the input gradient.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Affine(l) => l.zero_grads(),
                Layer::BatchNorm(l) => l.zero_grads(),
                Layer::Relu(_) => {}
            }
        }
    }

    /// Sets the mode of every batch-normalization layer.
    pub fn set_mode(&mut self, mode: Mode) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(l) = layer {
                l.set_mode(mode);
            }
        }
    }

    /// Trainable tensors in declaration order (weights before biases,
    /// scales before shifts); the optimizer relies on this order being
    /// identical on every call.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Affine(l) => slots.extend(l.param_slots()),
                Layer::BatchNorm(l) => slots.extend(l.param_slots()),
                Layer::Relu(_) => {}
            }
        }
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => a.param_count(),
                Layer::BatchNorm(b) => b.param_count(),
                Layer::Relu(_) => 0,
            })
            .sum()
    }

    /// Multiply-accumulate operations per sample; affine layers only.
    pub fn mac_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => a.mac_count(),
                _ => 0,
            })
            .sum()
    }

    /// Snapshot of the running statistics of every batch-norm layer, used
    /// to verify that freezing actually freezes them.
    pub fn bn_running_stats(&self) -> Vec<(Vec<u64>, Vec<u64>)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(b) => {
                    let (m, v) = b.running_stats();
                    Some((
                        m.iter().map(|x| x.to_bits()).collect(),
                        v.iter().map(|x| x.to_bits()).collect(),
                    ))
                }
                _ => None,
            })
            .collect()
    }
}
