//! Daily OHLC candles: CSV ingestion, date splits, normalization and the
//! vanilla / windowed state sequences the encoders consume.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// One daily bar. Construction enforces `low <= min(open, close)`,
/// `high >= max(open, close)` and strictly positive prices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candle {
    date: NaiveDate,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
}

impl Candle {
    pub fn new(date: NaiveDate, open: f64, high: f64, low: f64, close: f64) -> Result<Self> {
        let invalid = |detail: String| Error::InvalidCandle {
            date: date.to_string(),
            detail,
        };
        let prices = [open, high, low, close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(invalid(format!("prices must be finite and positive, got {prices:?}")));
        }
        if low > open.min(close) || high < open.max(close) {
            return Err(invalid(format!("range [{low}, {high}] does not cover open {open} and close {close}")));
        }
        Ok(Self {
            date,
            open,
            high,
            low,
            close,
        })
    }

    /// A bar with all four prices equal.
    pub fn flat(date: NaiveDate, price: f64) -> Result<Self> {
        Self::new(date, price, price, price, price)
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }
    pub fn open(&self) -> f64 {
        self.open
    }
    pub fn high(&self) -> f64 {
        self.high
    }
    pub fn low(&self) -> f64 {
        self.low
    }
    pub fn close(&self) -> f64 {
        self.close
    }

    pub fn prices(&self) -> [f64; 4] {
        [self.open, self.high, self.low, self.close]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OhlcSeries {
    symbol: String,
    candles: Vec<Candle>,
}

impl OhlcSeries {
    pub fn new(symbol: impl Into<String>, candles: Vec<Candle>) -> Result<Self> {
        if candles.len() < 2 {
            return Err(Error::InsufficientData { found: candles.len() });
        }
        for pair in candles.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(Error::Ordering {
                    prev: pair[0].date.to_string(),
                    next: pair[1].date.to_string(),
                });
            }
        }
        Ok(Self {
            symbol: symbol.into(),
            candles,
        })
    }

    /// Builds a series of flat candles on consecutive days from `start`.
    pub fn from_closes(symbol: impl Into<String>, start: NaiveDate, closes: &[f64]) -> Result<Self> {
        let candles = closes
            .iter()
            .zip(start.iter_days())
            .map(|(&c, d)| Candle::flat(d, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(symbol, candles)
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }
    pub fn candles(&self) -> &[Candle] {
        &self.candles
    }
    pub fn len(&self) -> usize {
        self.candles.len()
    }
    pub fn is_empty(&self) -> bool {
        self.candles.is_empty()
    }
    pub fn first_date(&self) -> NaiveDate {
        self.candles[0].date
    }
    pub fn last_date(&self) -> NaiveDate {
        self.candles[self.candles.len() - 1].date
    }
    pub fn closes(&self) -> Vec<f64> {
        self.candles.iter().map(Candle::close).collect()
    }

    /// Concatenates two series with the same symbol.
    pub fn concat(&self, other: &OhlcSeries) -> Result<OhlcSeries> {
        let mut candles = self.candles.clone();
        candles.extend_from_slice(&other.candles);
        OhlcSeries::new(self.symbol.clone(), candles)
    }
}

/// Result of [`load_csv`]: the parsed series plus counts of dropped rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSeries {
    pub series: OhlcSeries,
    /// Rows with an empty or non-numeric price (Yahoo writes `null`).
    pub skipped_missing: usize,
    /// Rows whose prices violate the candle invariants.
    pub skipped_invalid: usize,
}

/// Reads a Yahoo-Finance style CSV. The symbol defaults to the file stem.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let symbol = path.file_stem().and_then(|s| s.to_str()).unwrap_or("UNKNOWN");
    parse_csv(file, symbol)
}

pub fn parse_csv(reader: impl Read, symbol: &str) -> Result<LoadedSeries> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let expected = ["Date", "Open", "High", "Low", "Close"];
    if headers.len() < expected.len() || headers.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(Error::Format(format!(
            "header must start with {}, got `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut candles = Vec::new();
    let (mut skipped_missing, mut skipped_invalid) = (0, 0);
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let line = i + 2;
        let date_field = record.get(0).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_field, DATE_FORMAT)
            .map_err(|_| Error::Format(format!("line {line}: bad date `{date_field}`")))?;
        let prices: Option<Vec<f64>> = (1..5)
            .map(|j| record.get(j).and_then(|s| f64::from_str(s).ok()).filter(|v| v.is_finite()))
            .collect();
        let Some(p) = prices else {
            skipped_missing += 1;
            continue;
        };
        match Candle::new(date, p[0], p[1], p[2], p[3]) {
            Ok(c) => candles.push(c),
            Err(_) => skipped_invalid += 1,
        }
    }
    Ok(LoadedSeries {
        series: OhlcSeries::new(symbol, candles)?,
        skipped_missing,
        skipped_invalid,
    })
}

/// Writes `Date,Open,High,Low,Close` with shortest round-trip float formatting,
/// so [`parse_csv`] recovers the series exactly.
pub fn write_csv(series: &OhlcSeries, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "Date,Open,High,Low,Close")?;
    for c in &series.candles {
        writeln!(out, "{},{},{},{},{}", c.date.format(DATE_FORMAT), c.open, c.high, c.low, c.close)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub begin: NaiveDate,
    pub split: NaiveDate,
    pub end: NaiveDate,
}

impl SplitSpec {
    pub fn new(begin: NaiveDate, split: NaiveDate, end: NaiveDate) -> Result<Self> {
        if !(begin < split && split < end) {
            return Err(Error::InvalidSplit(format!("need begin < split < end, got {begin} / {split} / {end}")));
        }
        Ok(Self { begin, split, end })
    }

    /// Date ranges used for the published benchmarks.
    pub fn preset(symbol: &str) -> Option<Self> {
        let (b, s, e) = match symbol.to_ascii_uppercase().as_str() {
            "GOOGL" | "AAPL" | "AAL" => ((2010, 1, 1), (2018, 1, 1), (2020, 8, 25)),
            "BTC-USD" => ((2014, 9, 17), (2018, 1, 1), (2020, 8, 26)),
            "KSS" => ((1999, 1, 1), (2018, 1, 1), (2020, 8, 24)),
            "GE" | "HSI" => ((2000, 1, 1), (2015, 1, 1), (2020, 8, 24)),
            _ => return None,
        };
        let d = |(y, m, d): (i32, u32, u32)| NaiveDate::from_ymd_opt(y, m, d).expect("valid preset date");
        Some(Self {
            begin: d(b),
            split: d(s),
            end: d(e),
        })
    }

    pub fn preset_symbols() -> &'static [&'static str] {
        &["GOOGL", "AAPL", "AAL", "BTC-USD", "KSS", "GE", "HSI"]
    }
}

/// Trims to `[begin, end]`, then returns `(date < split, date >= split)`.
pub fn split(series: &OhlcSeries, spec: &SplitSpec) -> Result<(OhlcSeries, OhlcSeries)> {
    let (train, test): (Vec<Candle>, Vec<Candle>) = series
        .candles
        .iter()
        .filter(|c| c.date >= spec.begin && c.date <= spec.end)
        .partition(|c| c.date < spec.split);
    for (side, part) in [("train", &train), ("test", &test)] {
        if part.len() < 2 {
            return Err(Error::DegenerateSplit { side, len: part.len() });
        }
    }
    Ok((
        OhlcSeries::new(series.symbol.clone(), train)?,
        OhlcSeries::new(series.symbol.clone(), test)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormScheme {
    /// `value / previous close - 1`; the very first candle divides by its own open.
    #[default]
    PrevCloseRatio,
    Raw,
}

impl FromStr for NormScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" | "prev-close-ratio" | "prev_close_ratio" => Ok(Self::PrevCloseRatio),
            "raw" => Ok(Self::Raw),
            other => Err(Error::config("data.scheme", format!("unknown scheme `{other}` (ratio|raw)"))),
        }
    }
}

impl std::fmt::Display for NormScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PrevCloseRatio => "ratio",
            Self::Raw => "raw",
        })
    }
}

/// Normalizes consecutive candles into rows of 4 values. `prev_close` is the
/// close preceding `candles[0]`; pass `None` at the start of a series.
pub fn normalize_window(candles: &[Candle], prev_close: Option<f64>, scheme: NormScheme) -> Vec<[f64; 4]> {
    let mut prev = prev_close;
    candles
        .iter()
        .map(|c| {
            let row = match scheme {
                NormScheme::Raw => c.prices(),
                NormScheme::PrevCloseRatio => {
                    let denom = prev.unwrap_or(c.open);
                    c.prices().map(|v| v / denom - 1.0)
                }
            };
            prev = Some(c.close);
            row
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateMode {
    Vanilla,
    Windowed { w: usize },
}

impl StateMode {
    /// Candles per state.
    pub fn rows(&self) -> usize {
        match self {
            Self::Vanilla => 1,
            Self::Windowed { w } => *w,
        }
    }

    /// Index of the newest candle of state 0 relative to the first candle.
    pub fn offset(&self) -> usize {
        self.rows() - 1
    }

    pub fn input_len(&self) -> usize {
        4 * self.rows()
    }
}

/// Normalized encoder input: a 4-vector or a `w x 4` matrix stored row-major,
/// oldest candle first.
#[derive(Debug, Clone, PartialEq)]
pub struct RawState {
    mode: StateMode,
    values: Vec<f64>,
}

impl RawState {
    pub fn new(mode: StateMode, values: Vec<f64>) -> Result<Self> {
        if values.len() != mode.input_len() {
            return Err(Error::config(
                "state",
                format!("{mode:?} needs {} values, got {}", mode.input_len(), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("state", "non-finite state value"));
        }
        Ok(Self { mode, values })
    }

    pub fn mode(&self) -> StateMode {
        self.mode
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn rows(&self) -> usize {
        self.mode.rows()
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[4 * i..4 * i + 4]
    }
}

/// States aligned one-to-one with the candles whose close they end on.
/// State `i` is observed at `dates[i]`; stepping from it realizes the move
/// `closes[i] -> closes[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSequence {
    pub mode: StateMode,
    pub dates: Vec<NaiveDate>,
    pub closes: Vec<f64>,
    pub states: Vec<RawState>,
}

impl StateSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// One state per candle (vanilla) or per full window (windowed).
pub fn make_states(series: &OhlcSeries, mode: StateMode, scheme: NormScheme) -> Result<StateSequence> {
    states_from(series, mode.offset(), mode, scheme)
}

/// States whose newest candle runs from `series[first]` to the end. Windows may
/// reach back before `first`, which lets test states draw context from the
/// training period. `first` is raised to the first index with a full window.
pub fn states_from(series: &OhlcSeries, first: usize, mode: StateMode, scheme: NormScheme) -> Result<StateSequence> {
    if let StateMode::Windowed { w } = mode {
        if w == 0 {
            return Err(Error::config("encoder.window", "window size must be at least 1"));
        }
    }
    let n = series.len();
    let first = first.max(mode.offset());
    if first + 2 > n {
        return Err(Error::InsufficientLength { len: n, needed: first + 2 });
    }
    let rows = normalize_window(&series.candles, None, scheme);
    let k = mode.rows();
    let states = (first..n)
        .map(|t| RawState::new(mode, rows[t + 1 - k..=t].iter().flatten().copied().collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(StateSequence {
        mode,
        dates: series.candles[first..].iter().map(Candle::date).collect(),
        closes: series.candles[first..].iter().map(Candle::close).collect(),
        states,
    })
}

/// Test-period states, with windows allowed to use the tail of `train`.
pub fn test_states(train: &OhlcSeries, test: &OhlcSeries, mode: StateMode, scheme: NormScheme) -> Result<StateSequence> {
    let full = train.concat(test)?;
    states_from(&full, train.len(), mode, scheme)
}
