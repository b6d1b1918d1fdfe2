use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdd_core::harness::{self, Precision, RunConfig};
use cdd_core::protocol::{BaseMethod, BenchmarkKind};
use cdd_core::Result;

/// Continual deepart detection benchmarks on a synthetic artwork stream.
#[derive(Parser)]
#[command(name = "cdd", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the configured data directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run one benchmark end to end.
    Bench {
        kind: BenchmarkKind,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        strategy: Strategy,
    },
    /// Run the eight KD/CN/PT cells on CDD3.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        method: Option<BaseMethod>,
    },
    /// Average spectra and peak scores per source of a dataset.
    Spectra {
        corpus: PathBuf,
        #[arg(long, default_value = "spectra")]
        out: PathBuf,
        /// Samples per source.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Combine run reports into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory (`{seed}` expands to the seed).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    precision: Option<Precision>,
    /// Epochs per non-base session.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate for non-base sessions.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct Strategy {
    #[arg(long)]
    method: Option<BaseMethod>,
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    kd: bool,
    #[arg(long)]
    cn: bool,
    #[arg(long)]
    pt: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.data.manifest.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data.dir = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if self.epochs.is_some() {
            cfg.train.epochs = self.epochs;
        }
        if self.lr.is_some() {
            cfg.train.lr = self.lr;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { common } => {
            let mut cfg = common.resolve()?;
            if let Some(o) = &common.out {
                cfg.data.dir = o.clone();
            }
            print!("{}", harness::gen_data(&cfg, common.force)?);
            println!("wrote {}", cfg.data_dir().display());
        }
        Command::Bench { kind, common, strategy } => {
            let mut cfg = common.resolve()?;
            cfg.benchmark = kind;
            if let Some(m) = strategy.method {
                cfg.strategy.method = m;
            }
            if let Some(b) = strategy.buffer {
                cfg.strategy.buffer = b;
            }
            cfg.strategy.kd |= strategy.kd;
            cfg.strategy.cn |= strategy.cn;
            cfg.strategy.pt |= strategy.pt;
            cfg.validate()?;
            let report = harness::bench(&cfg, common.force)?;
            print!("{}", harness::render_table(std::slice::from_ref(&report))?);
            println!("wrote {}", cfg.out.display());
        }
        Command::Ablate { common, seeds, method } => {
            let mut cfg = common.resolve()?;
            cfg.benchmark = BenchmarkKind::Cdd3;
            cfg.strategy.buffer = 0;
            if let Some(m) = method {
                cfg.strategy.method = m;
            }
            cfg.validate()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let report = harness::ablate(&cfg, &seeds, common.force)?;
            print!("{}", report.to_markdown());
            println!("wrote {}", cfg.out.display());
        }
        Command::Spectra { corpus, out, limit } => {
            let rows = harness::spectra(&corpus, &out, limit)?;
            println!("source,target,samples,peak_score,ring_score");
            for r in rows {
                println!("{},{},{},{:.3},{:.3}", r.source, r.target, r.samples, r.peak_score, r.ring_score);
            }
        }
        Command::Report { runs } => print!("{}", harness::report(&runs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
