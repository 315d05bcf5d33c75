//! Test-period evaluation: greedy backtests, the buy-and-hold baseline,
//! window-size sweeps, comparison tables and their CSV/JSON exports.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dqnagent::{train, QNetwork, TrainConfig};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::marketdata::{make_states, test_states, NormScheme, OhlcSeries, StateMode, StateSequence, DATE_FORMAT};
use crate::metrics::{full_report, profit_rate_curve, EquityCurve, MetricsReport, ReportOptions, REPORT_COLUMNS};
use crate::tradeenv::{execute_equity, positions, Action, RewardParams, TradingEnv};

#[derive(Debug, Clone, PartialEq)]
pub struct TradeRecord {
    pub date: NaiveDate,
    pub close: f64,
    pub action: Action,
    pub own_share_after: bool,
    /// Wealth once this decision has been carried to the next close (the
    /// final record repeats the closing wealth).
    pub wealth_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backtest {
    pub dates: Vec<NaiveDate>,
    pub curve: EquityCurve,
    pub trades: Vec<TradeRecord>,
    pub report: MetricsReport,
}

/// Evaluates a fixed action sequence over `market`.
pub fn backtest_actions(
    market: &StateSequence,
    actions: &[Action],
    tc: f64,
    w0: f64,
    opts: &ReportOptions,
) -> Result<Backtest> {
    let curve = execute_equity(&market.closes, actions, tc, w0)?;
    let w = curve.values();
    let trades = actions
        .iter()
        .zip(positions(actions))
        .enumerate()
        .map(|(i, (&action, own))| TradeRecord {
            date: market.dates[i],
            close: market.closes[i],
            action,
            own_share_after: own,
            wealth_after: w[(i + 1).min(w.len() - 1)],
        })
        .collect();
    let report = full_report(&curve, opts)?;
    Ok(Backtest {
        dates: market.dates.clone(),
        curve,
        trades,
        report,
    })
}

/// Greedy (ε = 0, eval-mode) policy over the test states.
pub fn run_backtest(net: &QNetwork, market: &StateSequence, tc: f64, w0: f64, opts: &ReportOptions) -> Result<Backtest> {
    if net.config().mode != market.mode {
        return Err(Error::config(
            "encoder.input",
            format!("network expects {:?} states, market has {:?}", net.config().mode, market.mode),
        ));
    }
    let actions = net.greedy_policy(&market.states)?;
    backtest_actions(market, &actions, tc, w0, opts)
}

/// Buys at the first close (paying the cost once) and never sells.
pub fn buy_and_hold(closes: &[f64], tc: f64, w0: f64, opts: &ReportOptions) -> Result<(EquityCurve, MetricsReport)> {
    let mut actions = vec![Action::Noop; closes.len()];
    if let Some(first) = actions.first_mut() {
        *first = Action::Buy;
    }
    let curve = execute_equity(closes, &actions, tc, w0)?;
    let report = full_report(&curve, opts)?;
    Ok((curve, report))
}

/// Rows of named reports kept in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<(String, MetricsReport)>,
}

#[derive(Serialize, Deserialize)]
struct NamedRow {
    #[serde(rename = "Agent")]
    agent: String,
    #[serde(flatten)]
    report: MetricsReport,
}

pub fn compare_report(rows: Vec<(String, MetricsReport)>) -> Result<ComparisonTable> {
    if rows.is_empty() {
        return Err(Error::config("report", "nothing to compare"));
    }
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn header() -> Vec<&'static str> {
        std::iter::once("Agent").chain(REPORT_COLUMNS).collect()
    }

    /// Exact values; an undefined Sharpe ratio is an empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = Self::header().join(",");
        out.push('\n');
        for (name, r) in &self.rows {
            let cells: Vec<String> = r.row().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
            out.push_str(&format!("{},{}\n", csv_field(name), cells.join(",")));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<NamedRow> = self
            .rows
            .iter()
            .map(|(agent, report)| NamedRow {
                agent: agent.clone(),
                report: report.clone(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    /// Inverse of [`ComparisonTable::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<NamedRow> = serde_json::from_str(text)?;
        compare_report(rows.into_iter().map(|r| (r.agent, r.report)).collect())
    }

    /// Column-aligned text with values rounded for reading.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = Self::header().iter().map(|s| s.to_string()).collect();
        let mut table = vec![header];
        for (name, r) in &self.rows {
            let mut line = vec![name.clone()];
            line.extend(r.row().iter().map(|v| match v {
                Some(x) => format!("{x:.4}"),
                None => "undefined".to_string(),
            }));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        table
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                    .collect::<Vec<_>>()
                    .join("  ")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_profit_curve(dates: &[NaiveDate], curve: &EquityCurve, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "date,pct")?;
    for (d, p) in dates.iter().zip(profit_rate_curve(curve)) {
        writeln!(out, "{},{}", d.format(DATE_FORMAT), p)?;
    }
    Ok(())
}

/// Decision-curve data, optionally limited to the first `limit` records.
pub fn write_decisions(trades: &[TradeRecord], limit: Option<usize>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "date,close,action")?;
    for t in trades.iter().take(limit.unwrap_or(usize::MAX)) {
        writeln!(out, "{},{},{}", t.date.format(DATE_FORMAT), t.close, t.action)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub w: usize,
    pub total_return: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub encoder: EncoderKind,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn write_heatmap(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "encoder,w,total_return,normalized")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", self.encoder, e.w, e.total_return, e.normalized)?;
        }
        Ok(())
    }
}

/// Min-max scaling to `[0, 1]`; all-equal input maps to all zeros.
pub fn normalize_scores(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect()
}

pub const DEFAULT_SWEEP_WINDOWS: std::ops::RangeInclusive<usize> = 3..=75;
pub const CI_SWEEP_WINDOWS: [usize; 4] = [5, 10, 15, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Encoder settings; the window is replaced per cell.
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub windows: Vec<usize>,
    pub scheme: NormScheme,
    pub tc: f64,
    pub w0: f64,
    pub report: ReportOptions,
    /// Worker threads; 1 runs the cells in order on the calling thread.
    pub jobs: usize,
}

/// Trains one agent per window size from the same seed and scores its
/// greedy policy by total return on the test period.
pub fn window_sweep(train_series: &OhlcSeries, test_series: &OhlcSeries, spec: &SweepSpec) -> Result<SweepResult> {
    if spec.encoder.mode == StateMode::Vanilla {
        return Err(Error::config("encoder.input", "window sweep needs windowed input"));
    }
    if spec.windows.is_empty() {
        return Err(Error::config("sweep.windows", "no window sizes given"));
    }
    let cell = |w: usize| -> Result<f64> {
        let cfg = EncoderConfig {
            mode: StateMode::Windowed { w },
            ..spec.encoder
        };
        cfg.validate()?;
        let market = make_states(train_series, cfg.mode, spec.scheme)?;
        let mut env = TradingEnv::new(market, RewardParams::default())?;
        let outcome = train(&mut env, cfg, &spec.train, None)?;
        let test = test_states(train_series, test_series, cfg.mode, spec.scheme)?;
        Ok(run_backtest(&outcome.policy, &test, spec.tc, spec.w0, &spec.report)?.report.total_return_pct)
    };

    let n = spec.windows.len();
    let results: Vec<Mutex<Option<Result<f64>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            break;
        }
        let r = cell(spec.windows[i]);
        *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
    };
    let jobs = spec.jobs.clamp(1, n);
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let returns = results
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every cell ran"))
        .collect::<Result<Vec<f64>>>()?;
    let normalized = normalize_scores(&returns);
    Ok(SweepResult {
        encoder: spec.encoder.kind,
        entries: spec
            .windows
            .iter()
            .zip(returns)
            .zip(normalized)
            .map(|((&w, total_return), normalized)| SweepEntry {
                w,
                total_return,
                normalized,
            })
            .collect(),
    })
}
