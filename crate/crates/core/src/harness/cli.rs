use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::meta::Ablation;
use crate::stream::{export_csv, make_target_stream};

use super::bench::blob_bench;
use super::config::Config;
use super::gradcheck::gradcheck_suite;
use super::run::{run_baseline, run_experiment, write_outputs, BaselineKind, MetricsLog};

#[derive(Debug, Parser)]
#[command(name = "clkm", version, about = "Continual domain adaptation with deep-kernel MMD")]
pub struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    pub dump_defaults: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One of fe, dq, f_and_d, full.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, meta-train and deploy; writes metrics, summary and accuracy CSV.
    Run(Common),
    /// Run a comparison method.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// source_only or fixed_mmd_seq.
        #[arg(long)]
        kind: String,
    },
    /// Blob power benchmark, one JSON line per trial and kernel.
    TwosampleBench {
        #[command(flatten)]
        common: Common,
        /// Draw both samples from the same distribution.
        #[arg(long)]
        null: bool,
    },
    /// Finite-difference checks of every gradient.
    Gradcheck(Common),
    /// One run per forgetting weight in {0.2, 0.4, 0.6, 0.8}.
    SweepLambda(Common),
    /// Writes the stream as CSV.
    ExportData(Common),
}

fn load(c: &Common) -> Result<(Config, u64)> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(a) = &c.ablation {
        cfg.meta.ablation = Ablation::parse(a)
            .ok_or_else(|| Error::Config(vec![format!("unknown ablation {a:?}; expected fe, dq, f_and_d or full")]))?;
    }
    cfg.validate()?;
    let seed = c.seed.unwrap_or(cfg.run.seed);
    Ok((cfg, seed))
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn run_to(cfg: &Config, seed: u64, dir: &Path) -> Result<super::run::RunRecord> {
    mkdir(dir)?;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
    let rec = run_experiment(cfg, seed, Some(dir), &mut log)?;
    write_outputs(&rec, dir)?;
    Ok(rec)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run(c) => {
            let (cfg, seed) = load(&c)?;
            let rec = run_to(&cfg, seed, &out_dir(&c, "out"))?;
            println!("avg_target_accuracy {:.4} bwt {:?}", rec.avg_target_accuracy, rec.bwt);
        }
        Command::Baseline { common, kind } => {
            let k = BaselineKind::parse(&kind).ok_or_else(|| {
                Error::Config(vec![format!("unknown baseline {kind:?}; expected source_only or fixed_mmd_seq")])
            })?;
            let (cfg, seed) = load(&common)?;
            let dir = out_dir(&common, "out");
            mkdir(&dir)?;
            let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
            let rec = run_baseline(k, &cfg, seed, &mut log)?;
            write_outputs(&rec, &dir)?;
            println!("avg_target_accuracy {:.4} bwt {:?}", rec.avg_target_accuracy, rec.bwt);
        }
        Command::TwosampleBench { common, null } => {
            let (cfg, seed) = load(&common)?;
            let s = blob_bench(&cfg.bench, &cfg.kernel, &cfg.twosample, seed, !null, &mut |t| print_json(t))?;
            print_json(&s)?;
        }
        Command::Gradcheck(c) => {
            let (_, seed) = load(&c)?;
            let lines = gradcheck_suite(seed)?;
            for l in &lines {
                println!(
                    "{:<20} max_rel_error {:.3e} tolerance {:.0e} {}",
                    l.name,
                    l.max_rel_error,
                    l.tolerance,
                    if l.pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(lines.iter().all(|l| l.pass));
        }
        Command::SweepLambda(c) => {
            let (cfg, seed) = load(&c)?;
            let dir = out_dir(&c, "out");
            for lam in [0.2, 0.4, 0.6, 0.8] {
                let mut cl = cfg.clone();
                cl.meta.lambda_forget = lam;
                let rec = run_to(&cl, seed, &dir.join(format!("lambda_{lam}")))?;
                print_json(&rec)?;
            }
        }
        Command::ExportData(c) => {
            let (cfg, seed) = load(&c)?;
            let dir = out_dir(&c, "out");
            mkdir(&dir)?;
            let stream = make_target_stream(&cfg.stream, seed)?;
            export_csv(&stream, &dir.join("data.csv"))?;
        }
    }
    Ok(true)
}

/// Parses `argv` and runs it. Exit codes: 0 success, 1 usage or
/// validation error, 2 numeric failure (a failed gradient check included).
pub fn cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if parsed.dump_defaults {
        print!("{}", Config::dump_defaults());
        return 0;
    }
    let Some(cmd) = parsed.command else {
        eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
        return 1;
    };
    match dispatch(cmd) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 2,
                _ => 1,
            }
        }
    }
}
