//! Feature extractors mapping raw candle states to a fixed-size vector.

use std::fmt;
use std::str::FromStr;

use neuralcore::graph::BatchStats;
use neuralcore::{BatchNorm1d, Conv1d, Graph, GruCell, Linear, Mode, ParamSet, RunningStats, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::marketdata::{RawState, StateMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Identity,
    Mlp,
    Gru,
    Cnn,
    CnnGru,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 5] = [Self::Identity, Self::Mlp, Self::Gru, Self::Cnn, Self::CnnGru];

    pub fn requires_window(self) -> bool {
        matches!(self, Self::Gru | Self::Cnn | Self::CnnGru)
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Mlp => "mlp",
            Self::Gru => "gru",
            Self::Cnn => "cnn",
            Self::CnnGru => "cnn_gru",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity" | "none" | "dqn" => Ok(Self::Identity),
            "mlp" => Ok(Self::Mlp),
            "gru" => Ok(Self::Gru),
            "cnn" => Ok(Self::Cnn),
            "cnn_gru" | "cnngru" => Ok(Self::CnnGru),
            other => Err(Error::config(
                "encoder.kind",
                format!("unknown encoder `{other}` (identity|mlp|gru|cnn|cnn_gru)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub mode: StateMode,
    /// Output size of the learned encoders (ignored by identity).
    pub feature_size: usize,
    pub mlp_hidden: usize,
    pub gru_hidden: usize,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
    /// Output channels of the per-candle convolution in `cnn_gru`.
    pub cnn_gru_channels: usize,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, mode: StateMode) -> Self {
        Self {
            kind,
            mode,
            feature_size: 128,
            mlp_hidden: 128,
            gru_hidden: 128,
            cnn_channels: 32,
            cnn_kernel: 3,
            cnn_gru_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.requires_window() && self.mode == StateMode::Vanilla {
            return Err(Error::config(
                "encoder.input",
                format!("{} encoder needs windowed input", self.kind),
            ));
        }
        if let StateMode::Windowed { w } = self.mode {
            if w == 0 {
                return Err(Error::config("encoder.window", "window size must be at least 1"));
            }
            if self.kind == EncoderKind::Cnn && w < self.cnn_kernel {
                return Err(Error::config(
                    "encoder.window",
                    format!("cnn kernel {} is wider than the window {w}", self.cnn_kernel),
                ));
            }
        }
        let sizes = [
            ("encoder.feature_size", self.feature_size),
            ("encoder.mlp_hidden", self.mlp_hidden),
            ("encoder.gru_hidden", self.gru_hidden),
            ("encoder.cnn_channels", self.cnn_channels),
            ("encoder.cnn_kernel", self.cnn_kernel),
            ("encoder.cnn_gru_channels", self.cnn_gru_channels),
        ];
        if let Some((field, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be at least 1"));
        }
        Ok(())
    }

    /// Length of the feature vector handed to the Q-head.
    pub fn output_size(&self) -> usize {
        match self.kind {
            EncoderKind::Identity => self.mode.input_len(),
            _ => self.feature_size,
        }
    }

    pub fn window(&self) -> usize {
        self.mode.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Parts {
    Identity,
    Mlp { l1: Linear, bn: BatchNorm1d, l2: Linear },
    Gru { cell: GruCell, proj: Linear },
    Cnn { conv: Conv1d, proj: Linear },
    CnnGru { conv: Conv1d, cell: GruCell, proj: Linear },
}

/// Layer layout plus batch-norm running statistics. Parameter values live
/// in the caller's [`ParamSet`] under `{prefix}.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    parts: Parts,
}

impl Encoder {
    /// Builds the layers and inserts freshly initialized parameters.
    pub fn new(config: EncoderConfig, prefix: &str, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        let enc = Self::layout(config, prefix)?;
        match &enc.parts {
            Parts::Identity => {}
            Parts::Mlp { l1, bn, l2 } => {
                l1.init(params, rng)?;
                bn.init(params)?;
                l2.init(params, rng)?;
            }
            Parts::Gru { cell, proj } => {
                cell.init(params, rng)?;
                proj.init(params, rng)?;
            }
            Parts::Cnn { conv, proj } => {
                conv.init(params, rng)?;
                proj.init(params, rng)?;
            }
            Parts::CnnGru { conv, cell, proj } => {
                conv.init(params, rng)?;
                cell.init(params, rng)?;
                proj.init(params, rng)?;
            }
        }
        Ok(enc)
    }

    /// Layer layout only, for attaching to existing parameters.
    pub fn layout(config: EncoderConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let c = config;
        let name = |s: &str| format!("{prefix}.{s}");
        let parts = match c.kind {
            EncoderKind::Identity => Parts::Identity,
            EncoderKind::Mlp => Parts::Mlp {
                l1: Linear::new(&name("linear1"), c.mode.input_len(), c.mlp_hidden),
                bn: BatchNorm1d::new(&name("bn"), c.mlp_hidden),
                l2: Linear::new(&name("linear2"), c.mlp_hidden, c.feature_size),
            },
            EncoderKind::Gru => Parts::Gru {
                cell: GruCell::new(&name("gru"), 4, c.gru_hidden),
                proj: Linear::new(&name("proj"), c.gru_hidden, c.feature_size),
            },
            EncoderKind::Cnn => {
                let conv = Conv1d::new(&name("conv"), 4, c.cnn_channels, c.cnn_kernel);
                let t = conv.output_len(c.window()).expect("validated window >= kernel");
                Parts::Cnn {
                    proj: Linear::new(&name("proj"), c.cnn_channels * t, c.feature_size),
                    conv,
                }
            }
            EncoderKind::CnnGru => Parts::CnnGru {
                conv: Conv1d::new(&name("conv"), 1, c.cnn_gru_channels, 4),
                cell: GruCell::new(&name("gru"), c.cnn_gru_channels, c.gru_hidden),
                proj: Linear::new(&name("proj"), c.gru_hidden, c.feature_size),
            },
        };
        Ok(Self { config, parts })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn running_stats(&self) -> Option<&RunningStats> {
        match &self.parts {
            Parts::Mlp { bn, .. } => Some(&bn.running),
            _ => None,
        }
    }

    pub fn set_running_stats(&mut self, stats: RunningStats) -> Result<()> {
        match &mut self.parts {
            Parts::Mlp { bn, .. } if bn.features == stats.mean.len() && bn.features == stats.var.len() => {
                bn.running = stats;
                Ok(())
            }
            _ => Err(Error::Compatibility(format!(
                "{} encoder cannot take running statistics of size {}",
                self.config.kind,
                stats.mean.len()
            ))),
        }
    }

    /// Advances the batch-norm running estimates with statistics from a
    /// train-mode forward pass.
    pub fn commit(&mut self, stats: &BatchStats) {
        if let Parts::Mlp { bn, .. } = &mut self.parts {
            bn.commit(stats);
        }
    }

    fn check_states(&self, states: &[&RawState]) -> Result<()> {
        if states.is_empty() {
            return Err(Error::config("encoder", "empty batch"));
        }
        if let Some(s) = states.iter().find(|s| s.mode() != self.config.mode) {
            return Err(Error::config(
                "encoder.input",
                format!("encoder expects {:?} states, got {:?}", self.config.mode, s.mode()),
            ));
        }
        Ok(())
    }

    /// Encodes a batch into `[batch, output_size]`. Train mode returns the
    /// batch-norm statistics for [`Encoder::commit`].
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        states: &[&RawState],
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.check_states(states)?;
        let b = states.len();
        let w = self.config.window();
        let flat: Vec<f64> = states.iter().flat_map(|s| s.values().iter().copied()).collect();
        let out = match &self.parts {
            Parts::Identity => (g.constant(Tensor::new(&[b, 4 * w], flat)?), None),
            Parts::Mlp { l1, bn, l2 } => {
                let x = g.constant(Tensor::new(&[b, 4 * w], flat)?);
                let h = l1.forward(g, params, x)?;
                let (h, stats) = bn.forward(g, params, h, mode)?;
                let h = g.relu(h)?;
                (l2.forward(g, params, h)?, stats)
            }
            Parts::Gru { cell, proj } => {
                let x = g.constant(Tensor::new(&[b, w, 4], flat)?);
                let h = cell.forward_sequence(g, params, x)?;
                (proj.forward(g, params, h)?, None)
            }
            Parts::Cnn { conv, proj } => {
                // rows are candles; the convolution wants channels x time
                let mut chw = vec![0.0; flat.len()];
                for s in 0..b {
                    for t in 0..w {
                        for c in 0..4 {
                            chw[s * 4 * w + c * w + t] = flat[s * 4 * w + t * 4 + c];
                        }
                    }
                }
                let x = g.constant(Tensor::new(&[b, 4, w], chw)?);
                let y = conv.forward(g, params, x)?;
                let y = g.relu(y)?;
                let n = g.shape(y)[1] * g.shape(y)[2];
                let y = g.reshape(y, &[b, n])?;
                (proj.forward(g, params, y)?, None)
            }
            Parts::CnnGru { conv, cell, proj } => {
                // each candle is a 1-channel signal of length 4
                let x = g.constant(Tensor::new(&[b * w, 1, 4], flat)?);
                let y = conv.forward(g, params, x)?;
                let y = g.relu(y)?;
                let seq = g.reshape(y, &[b, w, conv.out_channels])?;
                let h = cell.forward_sequence(g, params, seq)?;
                (proj.forward(g, params, h)?, None)
            }
        };
        Ok(out)
    }
}

/// Feature vector for a single state.
pub fn encode(enc: &Encoder, params: &ParamSet, state: &RawState, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let (y, _) = enc.forward(&mut g, params, &[state], mode)?;
    let f = g.shape(y)[1];
    Ok(g.value(y).detached().reshape(&[f])?)
}

/// Exact number of learnable scalars.
pub fn encoder_param_count(config: &EncoderConfig) -> usize {
    let c = config;
    match c.kind {
        EncoderKind::Identity => 0,
        EncoderKind::Mlp => {
            Linear::param_count(c.mode.input_len(), c.mlp_hidden)
                + BatchNorm1d::param_count(c.mlp_hidden)
                + Linear::param_count(c.mlp_hidden, c.feature_size)
        }
        EncoderKind::Gru => GruCell::param_count(4, c.gru_hidden) + Linear::param_count(c.gru_hidden, c.feature_size),
        EncoderKind::Cnn => {
            let t = c.window().saturating_sub(c.cnn_kernel) + 1;
            Conv1d::param_count(4, c.cnn_channels, c.cnn_kernel) + Linear::param_count(c.cnn_channels * t, c.feature_size)
        }
        EncoderKind::CnnGru => {
            Conv1d::param_count(1, c.cnn_gru_channels, 4)
                + GruCell::param_count(c.cnn_gru_channels, c.gru_hidden)
                + Linear::param_count(c.gru_hidden, c.feature_size)
        }
    }
}
