use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ppml_core::harness::{
    build_report, describe_model, execute, keygen, measure_timing, write_outputs, write_table,
    MetricsFile, Mode, Overrides, TrainingRunConfig, DEFAULT_KEY_BITS, METRICS_FILE,
};
use ppml_core::paillier::PAPER_KEY_BITS;

#[derive(Parser)]
#[command(
    name = "ppml",
    version,
    about = "Encrypted multi-party learning with reliability filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded Paillier keypair.
    Keygen {
        #[arg(long, default_value = "keys")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
        key_bits: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use 1024-bit keys.
        #[arg(long)]
        paper_keys: bool,
    },
    /// Run one experiment and write metrics.csv, summary.json and timings.csv.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// filtered, nofilter, centralized or standalone.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Align several runs by round.
    Report {
        /// metrics.csv files or run directories containing one.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
    },
    /// Time one encrypted similarity computation per entity.
    Timing {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the data, init and crypto seeds with ones derived from this value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Use 1024-bit keys.
    #[arg(long)]
    paper_keys: bool,
}

impl CommonArgs {
    fn load(&self, mode: Option<Mode>) -> Result<TrainingRunConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingRunConfig::load(p)?,
            None => TrainingRunConfig::default(),
        };
        Overrides {
            seed: self.seed_override,
            paper_keys: self.paper_keys,
            mode,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        format!("unknown mode `{s}`; expected filtered, nofilter, centralized or standalone")
    })
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(METRICS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keygen {
            out_dir,
            key_bits,
            seed,
            paper_keys,
        } => {
            let bits = if paper_keys { PAPER_KEY_BITS } else { key_bits };
            let (public, private) = keygen(bits, seed, &out_dir)?;
            println!("wrote {} and {}", public.display(), private.display());
        }
        Command::Run {
            common,
            out_dir,
            mode,
        } => {
            let cfg = common.load(mode)?;
            eprintln!(
                "mode {} | {} | {} rounds max | {}-bit keys",
                cfg.mode.as_str(),
                describe_model(&cfg.model),
                cfg.max_rounds,
                cfg.key_bits
            );
            let outcome = execute(&cfg)?;
            let summary = write_outputs(&out_dir, &cfg, &outcome)?;
            println!(
                "{} rounds, accuracy {:.4}, test error {:.4} -> {}",
                summary.rounds_completed,
                summary.final_accuracy,
                summary.final_test_error,
                out_dir.display()
            );
            for p in &summary.participants {
                println!(
                    "  {:<10} included {:>4}  excluded {:>4}  dropped {:>4}",
                    p.party_id, p.rounds_included, p.rounds_excluded, p.rounds_dropped
                );
            }
        }
        Command::Report { runs, out_dir } => {
            let files = runs
                .iter()
                .map(|p| MetricsFile::load(&metrics_path(p)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let mut names: Vec<&str> = files.iter().map(|f| f.name.as_str()).collect();
            names.sort_unstable();
            if names.windows(2).any(|w| w[0] == w[1]) {
                bail!("run names must be distinct: {names:?}");
            }
            let report = build_report(&files)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            for (name, header, rows) in [
                ("series.csv", &report.series_header, &report.series),
                (
                    "comparison.csv",
                    &report.comparison_header,
                    &report.comparison,
                ),
            ] {
                let path = out_dir.join(name);
                let f = fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                write_table(f, header, rows)?;
            }
            println!(
                "{} runs, {} rounds -> {}",
                files.len(),
                report.comparison.len(),
                out_dir.display()
            );
        }
        Command::Timing {
            common,
            repetitions,
            out_dir,
        } => {
            let cfg = common.load(None)?;
            let t = measure_timing(&cfg, repetitions)?;
            print!("{}", t.render());
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join("timing.json");
                fs::write(&path, t.to_json()?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
