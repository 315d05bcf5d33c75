//! Risk and return metrics over a wealth series.
//!
//! The free functions work on fractions (`0.01` is one percent). The
//! [`MetricsReport`] rescales to the conventional table units: returns,
//! value at risk and volatility in percent, variance in percent squared,
//! time-weighted return as a fraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};

/// Wealth `W_0..W_T`, all finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityCurve(Vec<f64>);

impl EquityCurve {
    pub fn new(wealth: Vec<f64>) -> Result<Self> {
        if wealth.len() < 2 {
            return Err(Error::Domain {
                metric: "equity_curve",
                detail: format!("need at least 2 points, got {}", wealth.len()),
            });
        }
        if let Some(bad) = wealth.iter().find(|w| !w.is_finite() || **w <= 0.0) {
            return Err(Error::Domain {
                metric: "equity_curve",
                detail: format!("wealth must be positive and finite, got {bad}"),
            });
        }
        Ok(Self(wealth))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn initial(&self) -> f64 {
        self.0[0]
    }
    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Per-period simple returns `(W_t - W_{t-1}) / W_{t-1}`.
    pub fn returns(&self) -> Vec<f64> {
        self.0.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect()
    }
}

/// Percent profit relative to `W_0` at every step.
pub fn profit_rate_curve(curve: &EquityCurve) -> Vec<f64> {
    let w0 = curve.initial();
    curve.values().iter().map(|w| (w - w0) / w0 * 100.0).collect()
}

/// Sum of per-period returns, in percent.
pub fn arithmetic_return(curve: &EquityCurve) -> f64 {
    curve.returns().iter().sum::<f64>() * 100.0
}

/// Geometric mean return per period.
pub fn time_weighted_return(returns: &[f64]) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::Domain {
            metric: "time_weighted_return",
            detail: "no returns".into(),
        });
    }
    if let Some(bad) = returns.iter().find(|x| **x <= -1.0) {
        return Err(Error::Domain {
            metric: "time_weighted_return",
            detail: format!("return {bad} <= -1"),
        });
    }
    // log-space keeps long products from over/underflowing
    let mean_log = returns.iter().map(|x| x.ln_1p()).sum::<f64>() / returns.len() as f64;
    Ok(mean_log.exp_m1())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `T - 1` denominator.
pub fn daily_return_variance(returns: &[f64]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::Domain {
            metric: "daily_return_variance",
            detail: format!("need at least 2 returns, got {}", returns.len()),
        });
    }
    let m = mean(returns);
    Ok(returns.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (returns.len() - 1) as f64)
}

pub fn volatility(returns: &[f64]) -> Result<f64> {
    daily_return_variance(returns).map(f64::sqrt)
}

/// `(W_T - W_0) / W_0`, in percent.
pub fn total_return(curve: &EquityCurve) -> f64 {
    (curve.last() - curve.initial()) / curve.initial() * 100.0
}

pub fn sharpe(returns: &[f64], risk_free: f64) -> Result<f64> {
    let sigma = volatility(returns)?;
    if sigma == 0.0 {
        return Err(Error::UndefinedSharpe);
    }
    Ok((mean(returns) - risk_free) / sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarMethod {
    ClosedForm,
    MonteCarlo { sims: usize },
}

impl Default for VarMethod {
    fn default() -> Self {
        Self::MonteCarlo { sims: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarEstimate {
    /// Return threshold; negative values are losses.
    pub value: f64,
    /// Set when the returns have zero dispersion and `value` is just the mean.
    pub degenerate: bool,
}

/// Value at risk at `alpha` percent under a normal model of the returns.
pub fn value_at_risk(returns: &[f64], alpha: f64, method: VarMethod, rng: &mut impl Rng) -> Result<VarEstimate> {
    if !(alpha > 0.0 && alpha < 50.0) {
        return Err(Error::Domain {
            metric: "value_at_risk",
            detail: format!("alpha {alpha} outside (0, 50)"),
        });
    }
    let mu = mean(returns);
    let sigma = volatility(returns)?;
    if sigma == 0.0 {
        return Ok(VarEstimate {
            value: mu,
            degenerate: true,
        });
    }
    let p = alpha / 100.0;
    let value = match method {
        VarMethod::ClosedForm => {
            let z = StdNormal::standard().inverse_cdf(p);
            mu + z * sigma
        }
        VarMethod::MonteCarlo { sims } => {
            if sims == 0 {
                return Err(Error::Domain {
                    metric: "value_at_risk",
                    detail: "monte carlo needs at least one simulation".into(),
                });
            }
            let normal = Normal::new(mu, sigma).map_err(|e| Error::Domain {
                metric: "value_at_risk",
                detail: e.to_string(),
            })?;
            let mut draws: Vec<f64> = (0..sims).map(|_| normal.sample(rng)).collect();
            draws.sort_by(f64::total_cmp);
            percentile_sorted(&draws, p)
        }
    };
    Ok(VarEstimate {
        value,
        degenerate: false,
    })
}

/// Linear-interpolation quantile of sorted data at probability `p`.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    /// VaR level in percent.
    pub alpha: f64,
    pub method: VarMethod,
    /// Seed for the Monte Carlo draws.
    pub seed: u64,
    pub risk_free: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            method: VarMethod::default(),
            seed: 0,
            risk_free: 0.0,
        }
    }
}

/// Column names in table order.
pub const REPORT_COLUMNS: [&str; 10] = [
    "Arithmetic Return",
    "Average Daily Return",
    "Daily Return Variance",
    "Time Weighted Return",
    "Total Return",
    "Sharpe Ratio",
    "Value At Risk",
    "Volatility",
    "Initial Investment",
    "Final Portfolio Value",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "Arithmetic Return")]
    pub arithmetic_return: f64,
    #[serde(rename = "Average Daily Return")]
    pub average_daily_return: f64,
    #[serde(rename = "Daily Return Variance")]
    pub daily_return_variance: f64,
    #[serde(rename = "Time Weighted Return")]
    pub time_weighted_return: f64,
    #[serde(rename = "Total Return")]
    pub total_return_pct: f64,
    /// `None` when volatility is zero.
    #[serde(rename = "Sharpe Ratio")]
    pub sharpe: Option<f64>,
    #[serde(rename = "Value At Risk")]
    pub var_alpha: f64,
    #[serde(rename = "Volatility")]
    pub volatility: f64,
    #[serde(rename = "Initial Investment")]
    pub initial_investment: f64,
    #[serde(rename = "Final Portfolio Value")]
    pub final_value: f64,
}

impl MetricsReport {
    /// Values in [`REPORT_COLUMNS`] order; an undefined Sharpe ratio is `None`.
    pub fn row(&self) -> [Option<f64>; 10] {
        [
            Some(self.arithmetic_return),
            Some(self.average_daily_return),
            Some(self.daily_return_variance),
            Some(self.time_weighted_return),
            Some(self.total_return_pct),
            self.sharpe,
            Some(self.var_alpha),
            Some(self.volatility),
            Some(self.initial_investment),
            Some(self.final_value),
        ]
    }
}

/// Every metric for one curve. With a single return the dispersion-based
/// fields are reported as zero dispersion (Sharpe undefined, VaR = mean).
pub fn full_report(curve: &EquityCurve, opts: &ReportOptions) -> Result<MetricsReport> {
    let returns = curve.returns();
    let variance = if returns.len() < 2 { 0.0 } else { daily_return_variance(&returns)? };
    let sigma = variance.sqrt();
    let sharpe = match sharpe(&returns, opts.risk_free) {
        Ok(s) => Some(s),
        Err(Error::UndefinedSharpe) => None,
        Err(Error::Domain { .. }) if returns.len() < 2 => None,
        Err(e) => return Err(e),
    };
    let var = if returns.len() < 2 {
        mean(&returns)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        value_at_risk(&returns, opts.alpha, opts.method, &mut rng)?.value
    };
    Ok(MetricsReport {
        arithmetic_return: arithmetic_return(curve),
        average_daily_return: mean(&returns) * 100.0,
        daily_return_variance: variance * 1e4,
        time_weighted_return: time_weighted_return(&returns)?,
        total_return_pct: total_return(curve),
        sharpe,
        var_alpha: var * 100.0,
        volatility: sigma * 100.0,
        initial_investment: curve.initial(),
        final_value: curve.last(),
    })
}
