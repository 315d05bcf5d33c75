//! Layer descriptors. A layer owns the *names* of its parameters (and, for
//! batch normalization, its running statistics); the values live in a
//! [`ParamSet`] so the whole network can be optimized and checkpointed as one.

use rand::Rng;

use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_features,
            out_features,
        }
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }

    /// Uniform initialization in `±1/sqrt(in_features)`.
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (self.in_features as f64).sqrt();
        params.insert(&self.weight, uniform(&[self.in_features, self.out_features], bound, rng))?;
        params.insert(&self.bias, uniform(&[self.out_features], bound, rng))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, &self.weight)?;
        let b = g.param(params, &self.bias)?;
        g.linear(x, w, b)
    }
}

/// Exponential running estimates of per-feature mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.batch as f64;
        let correction = n / (n - 1.0);
        for (r, m) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: String,
    pub beta: String,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
    pub running: RunningStats,
}

impl BatchNorm1d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(prefix: &str, features: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            features,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            running: RunningStats::new(features),
        }
    }

    pub fn param_count(features: usize) -> usize {
        2 * features
    }

    pub fn init(&self, params: &mut ParamSet) -> Result<()> {
        params.insert(&self.gamma, Tensor::full(&[self.features], 1.0))?;
        params.insert(&self.beta, Tensor::zeros(&[self.features]))
    }

    /// Normalizes `x: [batch, features]`. In train mode the batch statistics
    /// are returned; pass them to [`BatchNorm1d::commit`] to advance the
    /// running estimates. Eval mode reads the running estimates only.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(params, &self.gamma)?;
        let beta = g.param(params, &self.beta)?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let y = g.batch_norm_eval(x, gamma, beta, &self.running.mean, &self.running.var, self.eps)?;
                Ok((y, None))
            }
        }
    }

    pub fn commit(&mut self, stats: &BatchStats) {
        self.running.update(stats, self.momentum);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
}

impl Conv1d {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, width: usize) -> Self {
        Self {
            kernel: format!("{prefix}.kernel"),
            bias: format!("{prefix}.bias"),
            in_channels,
            out_channels,
            width,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, width: usize) -> usize {
        out_channels * in_channels * width + out_channels
    }

    /// Output length of a valid convolution over `time` steps.
    pub fn output_len(&self, time: usize) -> Option<usize> {
        time.checked_sub(self.width).map(|d| d + 1)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / ((self.in_channels * self.width) as f64).sqrt();
        params.insert(
            &self.kernel,
            uniform(&[self.out_channels, self.in_channels, self.width], bound, rng),
        )?;
        params.insert(&self.bias, uniform(&[self.out_channels], bound, rng))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let k = g.param(params, &self.kernel)?;
        let b = g.param(params, &self.bias)?;
        g.conv1d(x, k, b)
    }
}

/// Gated recurrent unit with gates stacked in (reset, update, candidate)
/// order along the columns of the input and hidden weight matrices:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub weight_ih: String,
    pub weight_hh: String,
    pub bias_ih: String,
    pub bias_hh: String,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new(prefix: &str, input_size: usize, hidden_size: usize) -> Self {
        Self {
            weight_ih: format!("{prefix}.weight_ih"),
            weight_hh: format!("{prefix}.weight_hh"),
            bias_ih: format!("{prefix}.bias_ih"),
            bias_hh: format!("{prefix}.bias_hh"),
            input_size,
            hidden_size,
        }
    }

    pub fn param_count(input_size: usize, hidden_size: usize) -> usize {
        3 * hidden_size * (input_size + hidden_size + 2)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let h = self.hidden_size;
        let bound = 1.0 / (h as f64).sqrt();
        params.insert(&self.weight_ih, uniform(&[self.input_size, 3 * h], bound, rng))?;
        params.insert(&self.weight_hh, uniform(&[h, 3 * h], bound, rng))?;
        params.insert(&self.bias_ih, uniform(&[3 * h], bound, rng))?;
        params.insert(&self.bias_hh, uniform(&[3 * h], bound, rng))
    }

    /// One recurrence step: `x: [batch, input]`, `h: [batch, hidden]`.
    pub fn step(&self, g: &mut Graph, params: &ParamSet, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden_size;
        if g.shape(h).len() != 2 || g.shape(h)[1] != hs || g.shape(x).len() != 2 || g.shape(x)[0] != g.shape(h)[0] {
            return Err(Error::Shape {
                op: "gru_cell",
                detail: format!("x {:?} and h {:?} must be [batch, {}] and [batch, {hs}]", g.shape(x), g.shape(h), self.input_size),
            });
        }
        let w_ih = g.param(params, &self.weight_ih)?;
        let w_hh = g.param(params, &self.weight_hh)?;
        let b_ih = g.param(params, &self.bias_ih)?;
        let b_hh = g.param(params, &self.bias_hh)?;
        let gi = g.linear(x, w_ih, b_ih)?;
        let gh = g.linear(h, w_hh, b_hh)?;

        let gi_r = g.cols(gi, 0, hs)?;
        let gh_r = g.cols(gh, 0, hs)?;
        let r = g.add(gi_r, gh_r)?;
        let r = g.sigmoid(r)?;

        let gi_z = g.cols(gi, hs, hs)?;
        let gh_z = g.cols(gh, hs, hs)?;
        let z = g.add(gi_z, gh_z)?;
        let z = g.sigmoid(z)?;

        let gi_n = g.cols(gi, 2 * hs, hs)?;
        let gh_n = g.cols(gh, 2 * hs, hs)?;
        let gated = g.mul(r, gh_n)?;
        let n = g.add(gi_n, gated)?;
        let n = g.tanh(n)?;

        // (1 - z) n + z h  ==  n + z (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Runs the cell over `seq: [batch, time, input]` from a zero hidden state
    /// and returns the final hidden state.
    pub fn forward_sequence(&self, g: &mut Graph, params: &ParamSet, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input_size {
            return Err(Error::Shape {
                op: "gru_sequence",
                detail: format!("expected [batch, time, {}], got {s:?}", self.input_size),
            });
        }
        if s[1] == 0 {
            return Err(Error::EmptyInput { op: "gru_sequence" });
        }
        let mut h = g.constant(Tensor::zeros(&[s[0], self.hidden_size]));
        for t in 0..s[1] {
            let x = g.time_step(seq, t)?;
            h = self.step(g, params, x, h)?;
        }
        Ok(h)
    }
}
