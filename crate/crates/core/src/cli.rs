//! The `dtcn` command line.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, LevelFilter};

use crate::config::{FusionMode, RunConfig};
use crate::data::{gen_synthetic, preprocess_mvsa, Split, SynthMode, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{op_suite, CheckReport, Coverage, REL_ERR_TOL};
use crate::model::check_model_gradients;
use crate::train::{ablate_fusion, ablation_csv, evaluate_checkpoint, train, SplitData, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(name = "dtcn", version, about = "Dual transformer contrastive network for text-image sentiment")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic text-image dataset.
    GenSynthetic {
        #[arg(long, default_value = "correlated")]
        mode: SynthMode,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 6)]
        min_words: usize,
        #[arg(long, default_value_t = 12)]
        max_words: usize,
        #[arg(long, default_value_t = 0.1)]
        pixel_noise: f64,
        #[arg(long, default_value_t = 0.1)]
        token_noise: f64,
    },
    /// Curate a raw MVSA-style TSV into a split dataset.
    Preprocess {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one model and write its run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
        /// Also write the record as a one-row CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train early- and late-fusion models and compare their test metrics.
    AblateFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare every gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Entries checked per model parameter tensor.
        #[arg(long, default_value_t = 12)]
        entries: usize,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    log::set_max_level(level);
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 success, 1 failed check, 2 usage,
/// config or data error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenSynthetic {
            mode,
            n,
            classes,
            seed,
            out,
            height,
            width,
            channels,
            min_words,
            max_words,
            pixel_noise,
            token_noise,
        } => {
            let spec = SynthSpec {
                mode,
                n,
                classes,
                seed,
                height,
                width,
                channels,
                min_words,
                max_words,
                pixel_noise,
                token_noise,
            };
            let m = gen_synthetic(&spec, &out)?;
            println!(
                "wrote {} samples to {} (train {}, val {}, test {})",
                m.total(),
                out.display(),
                m.train.len(),
                m.val.len(),
                m.test.len()
            );
            Ok(0)
        }
        Command::Preprocess { raw, out, seed } => {
            let report = preprocess_mvsa(&raw, &out, seed)?;
            print!("{}", report.table());
            Ok(0)
        }
        Command::Train { data, out, config } => {
            let config = config.load()?;
            let split = SplitData::load(&data, &config)?;
            let outcome = train(&config, &split, Some(&out))?;
            let test = outcome.test();
            println!(
                "best epoch {}: test accuracy {:.4}, {} f1 {:.4} (run dir {})",
                outcome.early_stop.best_epoch,
                test.accuracy,
                config.f1_average.as_str(),
                test.macro_f1,
                out.display()
            );
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let record = evaluate_checkpoint(&checkpoint, &data, split)?;
            let csv = format!("{METRICS_HEADER}\n{}\n", record.csv_row());
            print!("{csv}");
            if let Some(p) = out {
                std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            }
            Ok(0)
        }
        Command::AblateFusion { data, out, config } => {
            let config = config.load()?;
            let split = SplitData::load(&data, &config)?;
            let rows = ablate_fusion(&config, &split, Some(&out))?;
            print!("{}", ablation_csv(&rows));
            Ok(0)
        }
        Command::Gradcheck { config, entries } => {
            let config = config.load()?;
            let reports = gradcheck_suite(&config, entries)?;
            print!("{}", gradcheck_table(&reports));
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                println!("{failed} of {} checks failed", reports.len());
                Ok(1)
            } else {
                println!("all {} checks passed", reports.len());
                Ok(0)
            }
        }
    }
}

/// Every op, then the whole model in both fusion modes.
pub fn gradcheck_suite(config: &RunConfig, entries: usize) -> Result<Vec<CheckReport>> {
    let start = Instant::now();
    let mut reports = op_suite(config.seed)?;
    for fusion in [FusionMode::Early, FusionMode::Late] {
        let c = RunConfig {
            fusion,
            ..config.clone()
        };
        reports.extend(check_model_gradients(&c, Coverage::Sample(entries.max(1)))?);
    }
    info!("gradient checks took {:.1}s", start.elapsed().as_secs_f64());
    Ok(reports)
}

pub fn gradcheck_table(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>7}  {:>12}  result\n", "check", "entries", "max_rel_err");
    for r in reports {
        s.push_str(&format!(
            "{:<width$}  {:>7}  {:>12.3e}  {}\n",
            r.name,
            r.entries_checked,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s.push_str(&format!("tolerance {REL_ERR_TOL:e}\n"));
    s
}
