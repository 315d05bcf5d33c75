//! Subcommand implementations shared by the binary and the tests.
//!
//! Each command validates its configuration and loads its data before
//! touching the output directory, so a failed precondition leaves nothing
//! behind.

use std::path::{Path, PathBuf};

use crate::backtest::{
    buy_and_hold, compare_report, run_backtest, window_sweep, write_decisions, write_profit_curve, ComparisonTable,
    SweepResult, SweepSpec,
};
use crate::config::RunConfig;
use crate::dqnagent::{load_checkpoint, save_checkpoint, train, write_training_log, LogSender, TrainOutcome};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::marketdata::{load_csv, make_states, split, test_states, write_csv, LoadedSeries, OhlcSeries, StateMode};
use crate::tradeenv::{RewardParams, TradingEnv};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PROFIT_CURVE_FILE: &str = "profit_curve.csv";
pub const DECISIONS_FILE: &str = "decisions.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";

/// Table label for an encoder configuration, e.g. `MLP-windowed` or `CNN-GRU`.
pub fn agent_label(enc: &EncoderConfig) -> String {
    let input = match enc.mode {
        StateMode::Vanilla => "vanilla",
        StateMode::Windowed { .. } => "windowed",
    };
    match enc.kind {
        EncoderKind::Identity => format!("DQN-{input}"),
        EncoderKind::Mlp => format!("MLP-{input}"),
        EncoderKind::Gru => "GRU".into(),
        EncoderKind::Cnn => "CNN".into(),
        EncoderKind::CnnGru => "CNN-GRU".into(),
    }
}

pub struct Dataset {
    pub loaded: LoadedSeries,
    pub train: OhlcSeries,
    pub test: OhlcSeries,
}

/// Loads the configured CSV and splits it.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::config("data.path", "no data file given"))?;
    let mut loaded = load_csv(path)?;
    if let Some(sym) = &cfg.symbol {
        loaded.series = OhlcSeries::new(sym.clone(), loaded.series.candles().to_vec())?;
    }
    let spec = cfg.resolve_split(loaded.series.symbol())?;
    let (train, test) = split(&loaded.series, &spec)?;
    Ok(Dataset { loaded, train, test })
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub symbol: String,
    pub rows: usize,
    pub skipped_missing: usize,
    pub skipped_invalid: usize,
    pub first: String,
    pub last: String,
    pub train_rows: Option<usize>,
    pub test_rows: Option<usize>,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "symbol: {}", self.symbol)?;
        writeln!(f, "rows: {} ({} to {})", self.rows, self.first, self.last)?;
        writeln!(f, "skipped (missing prices): {}", self.skipped_missing)?;
        writeln!(f, "skipped (invalid candles): {}", self.skipped_invalid)?;
        if let (Some(a), Some(b)) = (self.train_rows, self.test_rows) {
            writeln!(f, "split: {a} train / {b} test")?;
        }
        Ok(())
    }
}

/// Validates a CSV, reports what was dropped and writes the cleaned series.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::config("data.path", "no data file given"))?;
    let loaded = load_csv(path)?;
    let s = &loaded.series;
    let sizes = cfg
        .split
        .or_else(|| crate::marketdata::SplitSpec::preset(cfg.symbol.as_deref().unwrap_or(s.symbol())))
        .map(|spec| split(s, &spec))
        .transpose()?
        .map(|(a, b)| (a.len(), b.len()));
    let summary = IngestSummary {
        symbol: cfg.symbol.clone().unwrap_or_else(|| s.symbol().to_string()),
        rows: s.len(),
        skipped_missing: loaded.skipped_missing,
        skipped_invalid: loaded.skipped_invalid,
        first: s.first_date().to_string(),
        last: s.last_date().to_string(),
        train_rows: sizes.map(|p| p.0),
        test_rows: sizes.map(|p| p.1),
    };
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir, &format!("{}.csv", summary.symbol), &csv_bytes(|b| write_csv(s, b)))?;
    Ok(summary)
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub snapshot: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains on the training split and writes the checkpoint, the training log
/// and a config snapshot.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cmd_train_reporting(cfg, None)
}

/// [`cmd_train`] that also streams one log line per finished episode.
pub fn cmd_train_reporting(cfg: &RunConfig, reporter: Option<&LogSender>) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let market = make_states(&data.train, cfg.encoder.mode, cfg.scheme)?;
    let mut env = TradingEnv::new(market, RewardParams::new(cfg.train_tc)?)?;

    create_dir(&cfg.out_dir)?;
    let snapshot = write_file(&cfg.out_dir, SNAPSHOT_FILE, cfg.snapshot().as_bytes())?;
    let outcome = train(&mut env, cfg.encoder, &cfg.train, reporter)?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &outcome.policy, &outcome.target, Some(&outcome.adam))?;
    let log = write_file(&cfg.out_dir, TRAIN_LOG_FILE, &csv_bytes(|b| write_training_log(&outcome.log, b)))?;
    Ok(TrainArtifacts {
        checkpoint,
        log,
        snapshot,
        outcome,
    })
}

pub struct EvaluateArtifacts {
    pub table: ComparisonTable,
    pub files: Vec<PathBuf>,
}

/// Backtests the checkpoint's policy on the test split next to buy-and-hold.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<EvaluateArtifacts> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let (policy, _, _) = load_checkpoint(checkpoint, cfg.encoder, cfg.train.head_hidden)?;
    let market = test_states(&data.train, &data.test, cfg.encoder.mode, cfg.scheme)?;
    let opts = cfg.report_options();
    let bt = run_backtest(&policy, &market, cfg.eval_tc, cfg.w0, &opts)?;
    let (_, bh) = buy_and_hold(&market.closes, cfg.eval_tc, cfg.w0, &opts)?;
    let table = compare_report(vec![(agent_label(&cfg.encoder), bt.report.clone()), ("B&H".into(), bh)])?;

    let outputs = [
        (REPORT_JSON, table.to_json()?.into_bytes()),
        (REPORT_CSV, table.to_csv().into_bytes()),
        (PROFIT_CURVE_FILE, csv_bytes(|b| write_profit_curve(&bt.dates, &bt.curve, b))),
        (DECISIONS_FILE, csv_bytes(|b| write_decisions(&bt.trades, cfg.decision_limit, b))),
    ];
    create_dir(&cfg.out_dir)?;
    let files = outputs
        .iter()
        .map(|(name, bytes)| write_file(&cfg.out_dir, name, bytes))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluateArtifacts { table, files })
}

/// Window-size study over `cfg.sweep_windows`, written to `heatmap.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    if cfg.encoder.mode == StateMode::Vanilla {
        return Err(Error::config(
            "encoder.input",
            format!("{} with vanilla input has no window to sweep", agent_label(&cfg.encoder)),
        ));
    }
    let data = load_dataset(cfg)?;
    let spec = SweepSpec {
        encoder: cfg.encoder,
        train: cfg.train,
        windows: cfg.sweep_windows.clone(),
        scheme: cfg.scheme,
        tc: cfg.eval_tc,
        w0: cfg.w0,
        report: cfg.report_options(),
        jobs: cfg.jobs,
    };
    let result = window_sweep(&data.train, &data.test, &spec)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir, HEATMAP_FILE, &csv_bytes(|b| result.write_heatmap(b)))?;
    Ok(result)
}

/// Merges `report.json` files (or directories containing one) into a single
/// table, in argument order.
pub fn cmd_report(inputs: &[PathBuf], out_dir: Option<&Path>) -> Result<ComparisonTable> {
    if inputs.is_empty() {
        return Err(Error::config("report", "no report files given"));
    }
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() { input.join(REPORT_JSON) } else { input.clone() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        rows.extend(ComparisonTable::from_json(&text)?.rows);
    }
    let table = compare_report(rows)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_file(dir, REPORT_CSV, table.to_csv().as_bytes())?;
        write_file(dir, REPORT_JSON, table.to_json()?.as_bytes())?;
    }
    Ok(table)
}
