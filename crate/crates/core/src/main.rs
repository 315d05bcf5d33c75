use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use candle_dqn::cli::{cmd_evaluate, cmd_ingest, cmd_report, cmd_sweep, cmd_train_reporting, CHECKPOINT_FILE};
use candle_dqn::dqnagent::{log_channel, EpisodeLog};
use candle_dqn::config::{parse_pairs, RunConfig, KEYS, SEED_ENV};
use candle_dqn::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "candle-dqn", version, about = "Deep Q-learning trader on daily OHLC candles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed; falls back to the config, then to CANDLE_DQN_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Transaction cost applied during evaluation (training always uses 0).
    #[arg(long, global = true)]
    tc: Option<f64>,
    /// Encoder: identity, mlp, gru, cnn or cnn_gru.
    #[arg(long, global = true)]
    encoder: Option<String>,
    /// Window size; implies windowed input.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel workers for the sweep.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Input CSV with Date,Open,High,Low,Close columns.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Arbitrary config override, e.g. `--set train.gamma=0.95`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV and write the cleaned series.
    Ingest,
    /// Train on the training split.
    Train,
    /// Backtest a checkpoint on the test split against buy-and-hold.
    Evaluate {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and test once per window size.
    Sweep {
        /// `5,10,15` or an inclusive range `3..75`.
        #[arg(long)]
        windows: Option<String>,
    },
    /// Merge report.json files into one table.
    Report {
        /// report.json files or directories holding one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn build_config(common: &Common, windows: Option<&str>) -> Result<RunConfig> {
    let mut pairs = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => BTreeMap::new(),
    };
    if !pairs.contains_key("run.seed") {
        if let Ok(v) = std::env::var(SEED_ENV) {
            pairs.insert("run.seed".into(), v);
        }
    }
    for item in &common.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config("--set", format!("expected KEY=VALUE, got `{item}`")))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::config(k, "unknown key"));
        }
        pairs.insert(k.into(), v.trim().into());
    }
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.insert(k.into(), v);
        }
    };
    set("run.seed", common.seed.map(|s| s.to_string()));
    set("eval.tc", common.tc.map(|t| t.to_string()));
    set("encoder.kind", common.encoder.clone());
    set("encoder.window", common.window.map(|w| w.to_string()));
    set("encoder.input", common.window.map(|_| "windowed".into()));
    set("output.dir", common.out.as_ref().map(|p| p.display().to_string()));
    set("run.jobs", common.jobs.map(|j| j.to_string()));
    set("data.path", common.data.as_ref().map(|p| p.display().to_string()));
    set("sweep.windows", windows.map(str::to_string));
    RunConfig::from_pairs(&pairs)
}

fn run(cli: Cli) -> Result<()> {
    let windows = match &cli.command {
        Command::Sweep { windows } => windows.as_deref(),
        _ => None,
    };
    if let Command::Report { inputs } = &cli.command {
        let table = cmd_report(inputs, cli.common.out.as_deref())?;
        print!("{}", table.to_text());
        return Ok(());
    }
    let cfg = build_config(&cli.common, windows)?;
    match cli.command {
        Command::Ingest => print!("{}", cmd_ingest(&cfg)?),
        Command::Train => {
            let (tx, rx) = log_channel(256);
            let printer = std::thread::spawn(move || {
                eprintln!("{}", EpisodeLog::HEADER);
                while let Some(line) = rx.recv() {
                    eprintln!("{line}");
                }
            });
            let a = cmd_train_reporting(&cfg, Some(&tx));
            drop(tx);
            printer.join().expect("log printer panicked");
            let a = a?;
            println!("checkpoint: {}", a.checkpoint.display());
            println!("log: {}", a.log.display());
            println!("snapshot: {}", a.snapshot.display());
        }
        Command::Evaluate { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let a = cmd_evaluate(&cfg, &ckpt)?;
            print!("{}", a.table.to_text());
        }
        Command::Sweep { .. } => {
            let r = cmd_sweep(&cfg)?;
            println!("{:>4}  {:>12}  {:>10}", "w", "total_return", "normalized");
            for e in &r.entries {
                println!("{:>4}  {:>12.4}  {:>10.4}", e.w, e.total_return, e.normalized);
            }
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
