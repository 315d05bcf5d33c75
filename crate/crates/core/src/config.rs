//! Run configuration as flat `key = value` text with dotted keys.
//!
//! Every key has a default; files and command-line flags only list
//! overrides. [`RunConfig::snapshot`] writes every key, so feeding a snapshot
//! back reproduces the run exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use neuralcore::AdamConfig;

use crate::dqnagent::{Eviction, TrainConfig};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::marketdata::{NormScheme, SplitSpec, StateMode, DATE_FORMAT};
use crate::metrics::{ReportOptions, VarMethod};
use crate::tradeenv::RewardParams;

pub const SEED_ENV: &str = "CANDLE_DQN_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub symbol: Option<String>,
    /// Explicit split; when absent a preset for the symbol is used.
    pub split: Option<SplitSpec>,
    pub scheme: NormScheme,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub train_tc: f64,
    pub eval_tc: f64,
    pub w0: f64,
    pub alpha: f64,
    pub var_method: VarMethod,
    /// Number of decision records to export; all when absent.
    pub decision_limit: Option<usize>,
    pub sweep_windows: Vec<usize>,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            symbol: None,
            split: None,
            scheme: NormScheme::PrevCloseRatio,
            encoder: EncoderConfig::new(EncoderKind::Mlp, StateMode::Vanilla),
            train: TrainConfig::default(),
            train_tc: 0.0,
            eval_tc: 0.0,
            w0: 1000.0,
            alpha: 5.0,
            var_method: VarMethod::default(),
            decision_limit: None,
            sweep_windows: crate::backtest::CI_SWEEP_WINDOWS.to_vec(),
            out_dir: PathBuf::from("out"),
            jobs: 1,
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "data.path",
    "data.symbol",
    "data.scheme",
    "split.begin",
    "split.point",
    "split.end",
    "encoder.kind",
    "encoder.input",
    "encoder.window",
    "encoder.feature_size",
    "encoder.mlp_hidden",
    "encoder.gru_hidden",
    "encoder.cnn_channels",
    "encoder.cnn_kernel",
    "encoder.cnn_gru_channels",
    "train.episodes",
    "train.gamma",
    "train.eps_start",
    "train.eps_end",
    "train.eps_decay",
    "train.batch_size",
    "train.capacity",
    "train.target_sync",
    "train.eviction",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.head_hidden",
    "train.tc",
    "eval.tc",
    "eval.w0",
    "eval.alpha",
    "eval.var_method",
    "eval.mc_sims",
    "eval.decision_limit",
    "sweep.windows",
    "run.seed",
    "run.jobs",
    "output.dir",
];

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        map.insert(key.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn parse_date(key: &str, v: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(v, DATE_FORMAT)
        .or_else(|_| NaiveDate::parse_from_str(v, "%Y/%m/%d"))
        .map_err(|_| Error::config(key, format!("bad date `{v}` (YYYY-MM-DD)")))
}

fn opt(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

/// `5,10,15` or an inclusive range `3..75`.
pub fn parse_windows(v: &str) -> Result<Vec<usize>> {
    let key = "sweep.windows";
    let ws: Vec<usize> = if let Some((a, b)) = v.split_once("..") {
        let (a, b): (usize, usize) = (parse(key, a.trim())?, parse(key, b.trim_start_matches('=').trim())?);
        (a..=b).collect()
    } else {
        v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
    };
    if ws.is_empty() || ws.contains(&0) {
        return Err(Error::config(key, "window sizes must be positive and non-empty"));
    }
    Ok(ws)
}

impl RunConfig {
    /// Applies overrides on top of the defaults and validates the result.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);

        if let Some(v) = get("data.path").and_then(opt) {
            c.data_path = Some(PathBuf::from(v));
        }
        c.symbol = get("data.symbol").and_then(opt).map(str::to_string);
        if let Some(v) = get("data.scheme") {
            c.scheme = v.parse()?;
        }
        let dates = ["split.begin", "split.point", "split.end"].map(|k| get(k).and_then(opt).map(|v| parse_date(k, v)));
        match dates {
            [None, None, None] => {}
            [Some(b), Some(s), Some(e)] => {
                c.split = Some(SplitSpec::new(b?, s?, e?).map_err(|e| Error::config("split.point", e.to_string()))?)
            }
            _ => return Err(Error::config("split", "set all of split.begin, split.point and split.end")),
        }

        if let Some(v) = get("encoder.kind") {
            c.encoder.kind = v.parse()?;
        }
        let window: usize = match get("encoder.window") {
            Some(v) => parse("encoder.window", v)?,
            None => 10,
        };
        let windowed = match get("encoder.input").unwrap_or("auto") {
            "vanilla" => false,
            "windowed" => true,
            "auto" => c.encoder.kind.requires_window(),
            other => return Err(Error::config("encoder.input", format!("`{other}` is not vanilla|windowed|auto"))),
        };
        c.encoder.mode = if windowed { StateMode::Windowed { w: window } } else { StateMode::Vanilla };
        let sizes: [(&str, &mut usize); 6] = [
            ("encoder.feature_size", &mut c.encoder.feature_size),
            ("encoder.mlp_hidden", &mut c.encoder.mlp_hidden),
            ("encoder.gru_hidden", &mut c.encoder.gru_hidden),
            ("encoder.cnn_channels", &mut c.encoder.cnn_channels),
            ("encoder.cnn_kernel", &mut c.encoder.cnn_kernel),
            ("encoder.cnn_gru_channels", &mut c.encoder.cnn_gru_channels),
        ];
        for (k, slot) in sizes {
            if let Some(v) = get(k) {
                *slot = parse(k, v)?;
            }
        }

        let t = &mut c.train;
        let counts: [(&str, &mut usize); 5] = [
            ("train.episodes", &mut t.episodes),
            ("train.batch_size", &mut t.batch_size),
            ("train.capacity", &mut t.capacity),
            ("train.target_sync", &mut t.target_sync),
            ("train.head_hidden", &mut t.head_hidden),
        ];
        for (k, slot) in counts {
            if let Some(v) = get(k) {
                *slot = parse(k, v)?;
            }
        }
        let reals: [(&str, &mut f64); 8] = [
            ("train.gamma", &mut t.gamma),
            ("train.eps_start", &mut t.eps_start),
            ("train.eps_end", &mut t.eps_end),
            ("train.eps_decay", &mut t.eps_decay),
            ("train.lr", &mut t.adam.lr),
            ("train.beta1", &mut t.adam.beta1),
            ("train.beta2", &mut t.adam.beta2),
            ("train.adam_eps", &mut t.adam.eps),
        ];
        for (k, slot) in reals {
            if let Some(v) = get(k) {
                *slot = parse(k, v)?;
            }
        }
        if let Some(v) = get("train.eviction") {
            t.eviction = match v {
                "random" => Eviction::Random,
                "fifo" => Eviction::Fifo,
                other => return Err(Error::config("train.eviction", format!("`{other}` is not random|fifo"))),
            };
        }
        if let Some(v) = get("run.seed") {
            t.seed = parse("run.seed", v)?;
        }

        for (k, slot) in [
            ("train.tc", &mut c.train_tc),
            ("eval.tc", &mut c.eval_tc),
            ("eval.w0", &mut c.w0),
            ("eval.alpha", &mut c.alpha),
        ] {
            if let Some(v) = get(k) {
                *slot = parse(k, v)?;
            }
        }
        let sims: usize = match get("eval.mc_sims") {
            Some(v) => parse("eval.mc_sims", v)?,
            None => 1000,
        };
        c.var_method = match get("eval.var_method").unwrap_or("monte_carlo") {
            "monte_carlo" => VarMethod::MonteCarlo { sims },
            "closed_form" => VarMethod::ClosedForm,
            other => {
                return Err(Error::config(
                    "eval.var_method",
                    format!("`{other}` is not monte_carlo|closed_form"),
                ))
            }
        };
        if let Some(v) = get("eval.decision_limit").and_then(opt) {
            c.decision_limit = Some(parse("eval.decision_limit", v)?);
        }
        if let Some(v) = get("sweep.windows") {
            c.sweep_windows = parse_windows(v)?;
        }
        if let Some(v) = get("run.jobs") {
            c.jobs = parse("run.jobs", v)?;
        }
        if let Some(v) = get("output.dir") {
            c.out_dir = PathBuf::from(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        RewardParams::new(self.train_tc).map_err(|e| Error::config("train.tc", e.to_string()))?;
        RewardParams::new(self.eval_tc).map_err(|e| Error::config("eval.tc", e.to_string()))?;
        if !(self.w0 > 0.0 && self.w0.is_finite()) {
            return Err(Error::config("eval.w0", "initial investment must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 50.0) {
            return Err(Error::config("eval.alpha", "must lie in (0, 50)"));
        }
        if let VarMethod::MonteCarlo { sims: 0 } = self.var_method {
            return Err(Error::config("eval.mc_sims", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("run.jobs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            alpha: self.alpha,
            method: self.var_method,
            seed: self.seed(),
            risk_free: 0.0,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }

    /// Split from the config, or the preset for the symbol.
    pub fn resolve_split(&self, symbol: &str) -> Result<SplitSpec> {
        self.split
            .or_else(|| SplitSpec::preset(symbol))
            .ok_or_else(|| Error::config("split.point", format!("no split dates given and no preset for `{symbol}`")))
    }

    /// Every key with its resolved value.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let t = &self.train;
        let (input, window) = match e.mode {
            StateMode::Vanilla => ("vanilla", 10),
            StateMode::Windowed { w } => ("windowed", w),
        };
        let (method, sims) = match self.var_method {
            VarMethod::ClosedForm => ("closed_form", 1000),
            VarMethod::MonteCarlo { sims } => ("monte_carlo", sims),
        };
        let date = |d: Option<NaiveDate>| d.map(|d| d.format(DATE_FORMAT).to_string()).unwrap_or_else(|| "none".into());
        let values: Vec<String> = vec![
            self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()),
            self.symbol.clone().unwrap_or_else(|| "none".into()),
            self.scheme.to_string(),
            date(self.split.map(|s| s.begin)),
            date(self.split.map(|s| s.split)),
            date(self.split.map(|s| s.end)),
            e.kind.to_string(),
            input.into(),
            window.to_string(),
            e.feature_size.to_string(),
            e.mlp_hidden.to_string(),
            e.gru_hidden.to_string(),
            e.cnn_channels.to_string(),
            e.cnn_kernel.to_string(),
            e.cnn_gru_channels.to_string(),
            t.episodes.to_string(),
            t.gamma.to_string(),
            t.eps_start.to_string(),
            t.eps_end.to_string(),
            t.eps_decay.to_string(),
            t.batch_size.to_string(),
            t.capacity.to_string(),
            t.target_sync.to_string(),
            match t.eviction {
                Eviction::Random => "random".into(),
                Eviction::Fifo => "fifo".into(),
            },
            t.adam.lr.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.head_hidden.to_string(),
            self.train_tc.to_string(),
            self.eval_tc.to_string(),
            self.w0.to_string(),
            self.alpha.to_string(),
            method.into(),
            sims.to_string(),
            self.decision_limit.map(|n| n.to_string()).unwrap_or_else(|| "none".into()),
            self.sweep_windows.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            t.seed.to_string(),
            self.jobs.to_string(),
            self.out_dir.display().to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn snapshot(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
