//! Dense tensors, a tanh MLP with hand-written reverse-mode gradients, Adam
//! and parameter EMA.
//!
//! Everything is `f64` and single-threaded so that gradient checks against
//! central finite differences hold at the `1e-6` level and repeated runs are
//! bitwise reproducible.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("tensor construction", &[n], &[values.len()]));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// A `[rows, cols]` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Leading (batch) dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing (feature) dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected network. Hidden layers use `activation`; the output layer
/// is linear. Parameters live in one flat buffer laid out layer by layer as
/// `weight[out, in]` followed by `bias[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    // acts[0] is the input; acts[l + 1] the output of layer l.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "network needs at least two positive layer widths, got {widths:?}"
            )));
        }
        let n = param_count(&widths);
        Ok(Self {
            widths,
            activation,
            params: vec![0.0; n],
        })
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: Vec<usize>, activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        let mut offset = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *w = scale * z;
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(widths: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::dim("mlp parameters", &[net.params.len()], &[params.len()]));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offsets of `(weight, bias)` for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = param_count(&self.widths[..=l]);
        (start, start + self.widths[l] * self.widths[l + 1])
    }

    /// Human-readable name of the parameter block containing flat index `i`.
    pub fn block_name(&self, i: usize) -> String {
        let mut offset = 0;
        for l in 0..self.layers() {
            let nw = self.widths[l] * self.widths[l + 1];
            if i < offset + nw {
                return format!("layer{l}.weight");
            }
            offset += nw;
            if i < offset + self.widths[l + 1] {
                return format!("layer{l}.bias");
            }
            offset += self.widths[l + 1];
        }
        format!("<index {i} out of range>")
    }

    /// `(name, range)` for every parameter block in layout order.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::with_capacity(2 * self.layers());
        for l in 0..self.layers() {
            let (w, b) = self.layer_offsets(l);
            let end = b + self.widths[l + 1];
            out.push((format!("layer{l}.weight"), w..b));
            out.push((format!("layer{l}.bias"), b..end));
        }
        out
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        if input.cols() != self.input_width() || input.shape().len() > 2 {
            return Err(Error::dim(
                "net_forward input",
                &[input.rows(), self.input_width()],
                input.shape(),
            ));
        }
        Ok(input.rows())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let cache = self.forward_cached(input)?;
        let batch = cache.batch;
        let out = cache.acts.into_iter().last().unwrap();
        Tensor::matrix(batch, self.output_width(), out)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<ForwardCache> {
        let batch = self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(input.values().to_vec());
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + n_out];
            let mut z = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            // z[B, out] += x[B, in] * w^T
            gemm(
                batch,
                n_in,
                n_out,
                acts[l].as_slice(),
                (n_in as isize, 1),
                w,
                (1, n_in as isize),
                &mut z,
                (n_out as isize, 1),
            );
            if l + 1 < self.layers() {
                let act = self.activation;
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            acts.push(z);
        }
        Ok(ForwardCache { batch, acts })
    }

    /// Gradients of `<cotangent, forward(input)>` with respect to every
    /// parameter (flat, same layout as [`Mlp::params`]) and to the input.
    pub fn backward(&self, cache: &ForwardCache, cotangent: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let batch = cache.batch;
        let expected = [batch, self.output_width()];
        if cotangent.values().len() != batch * self.output_width() || cotangent.cols() != self.output_width() {
            return Err(Error::dim("net_backward cotangent", &expected, cotangent.shape()));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = cotangent.values().to_vec();
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            if l + 1 < self.layers() {
                let act = self.activation;
                for (d, a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= act.derivative_from_output(*a);
                }
            }
            let x = &cache.acts[l];
            {
                let (gw, gb) = grads[wo..bo + n_out].split_at_mut(bo - wo);
                // gw[out, in] = delta^T[out, B] * x[B, in]
                gemm(n_out, batch, n_in, &delta, (1, n_out as isize), x, (n_in as isize, 1), gw, (n_in as isize, 1));
                for row in delta.chunks_exact(n_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            // dx[B, in] = delta[B, out] * w[out, in]
            let mut dx = vec![0.0; batch * n_in];
            gemm(
                batch,
                n_out,
                n_in,
                &delta,
                (n_out as isize, 1),
                &self.params[wo..bo],
                (n_in as isize, 1),
                &mut dx,
                (n_in as isize, 1),
            );
            delta = dx;
        }
        let input_grad = Tensor::matrix(batch, self.input_width(), delta)?;
        Ok((grads, input_grad))
    }

    /// Forward then backward in one call.
    pub fn net_backward(&self, input: &Tensor, cotangent: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let cache = self.forward_cached(input)?;
        self.backward(&cache, cotangent)
    }

    /// Applies one Adam update, translating a non-finite gradient into an
    /// error naming the offending parameter block.
    pub fn adam_step(&mut self, adam: &mut AdamState, grads: &[f64]) -> Result<()> {
        self.adam_step_scaled(adam, grads, 1.0)
    }

    /// [`Mlp::adam_step`] with the learning rate multiplied by `lr_scale`.
    pub fn adam_step_scaled(&mut self, adam: &mut AdamState, grads: &[f64], lr_scale: f64) -> Result<()> {
        match adam.step_scaled(&mut self.params, grads, lr_scale) {
            Err(AdamError::NonFinite(i)) => Err(Error::Divergence(format!(
                "non-finite gradient in parameter block {}",
                self.block_name(i)
            ))),
            Err(AdamError::Shape { expected, got }) => Err(Error::dim("adam step", &[expected], &[got])),
            Ok(()) => Ok(()),
        }
    }
}

/// `c[m, n] += a[m, k] * b[k, n]` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers whose extents match the given
    // dimensions and strides; the output buffer does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// `beta1 = 0`, `beta2 = 0.999` as used for both generator and TA.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdamError {
    NonFinite(usize),
    Shape { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Result<Self> {
        let AdamConfig { lr, beta1, beta2, eps } = config;
        if !(lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {config:?}")));
        }
        Ok(Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Bias-corrected Adam update. The parameters are left untouched when any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> std::result::Result<(), AdamError> {
        self.step_scaled(params, grads, 1.0)
    }

    pub fn step_scaled(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) -> std::result::Result<(), AdamError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AdamError::Shape {
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(AdamError::NonFinite(i));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let lr = lr * lr_scale;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Learning-rate multiplier over a run of `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate towards zero at the last step.
    Linear,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step as f64 / total.max(1) as f64,
        }
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    decay: f64,
    shadow: Vec<f64>,
}

impl EmaState {
    pub fn new(decay: f64, params: &[f64]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            shadow: params.to_vec(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::dim("ema update", &[self.shadow.len()], &[params.len()]));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}
