//! `bmc`: run experiments, sweeps, Pareto exports and stream generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmc_core::harness::{
    export_pareto, read_records, run_experiment, run_sweep, ParetoPoint, Record, RunOptions,
};
use bmc_core::streams::{generate_stream, save_stream, StreamKind, StreamParams};
use bmc_core::{Error, ExperimentConfig, SweepSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmc", version, about = "Batch model consolidation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Overrides the config seed (the master seed for sweeps).
    #[arg(long)]
    seed: Option<u64>,
    /// Train experts one after another on the calling thread.
    #[arg(long)]
    serial: bool,
    /// Worker threads for expert training (0 = one per expert).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a random-search sweep from a TOML spec.
    Sweep {
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the cost/accuracy Pareto front of every records file matching a glob.
    Pareto {
        pattern: String,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic stream and save it in the binary stream format.
    GenStream {
        /// permuted | split_synthetic
        kind: String,
        /// Comma-separated key=value pairs, e.g. n_tasks=16,classes_per_task=4,dim=16,train_per_task=500,val_per_task=100
        params: String,
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Config problems exit with 2, runtime failures with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Toml(_) | Error::Unknown { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, common } => cmd_run(&config, &common),
        Command::Sweep { spec, common } => cmd_sweep(&spec, &common),
        Command::Pareto { pattern, common } => cmd_pareto(&pattern, &common),
        Command::GenStream { kind, params, out, common } => cmd_gen_stream(&kind, &params, &out, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parent_dir(path: &Path) -> Option<PathBuf> {
    path.parent().map(Path::to_path_buf)
}

fn cmd_run(path: &Path, common: &Common) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    let opts = RunOptions {
        seed: common.seed,
        serial: common.serial,
        workers: common.workers,
        out_dir: common.out_dir.clone(),
        base_dir: parent_dir(path),
    };
    opts.apply(&mut cfg);
    let outcome = run_experiment(&cfg, opts.base_dir.as_deref())?;
    println!("{}", serde_json::to_string(&outcome.summary.summary)?);
    Ok(())
}

fn cmd_sweep(path: &Path, common: &Common) -> Result<(), Error> {
    let mut spec = SweepSpec::load(path)?;
    if let Some(s) = common.seed {
        spec.master_seed = s;
    }
    if let Some(w) = common.workers {
        spec.base.bmc.workers = w;
    }
    let report = run_sweep(&spec, common.out_dir.as_deref(), parent_dir(path).as_deref(), common.serial)?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    for r in &report.rows {
        println!("{}", serde_json::to_string(r)?);
    }
    if failed > 0 {
        log::warn!("{failed} of {} trials failed", report.rows.len());
    }
    Ok(())
}

fn cmd_pareto(pattern: &str, common: &Common) -> Result<(), Error> {
    let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("bad glob: {e}")))?;
    let mut points = Vec::new();
    for entry in paths {
        let path = entry.map_err(|e| Error::Io(e.into()))?;
        for rec in read_records(&path)? {
            let Record::Summary(s) = rec else { continue };
            match s.summary.total_cost_mb {
                Some(tc) => points.push(ParetoPoint {
                    total_cost_mb: tc,
                    mean_acc: s.summary.mean_acc,
                    label: path.display().to_string(),
                }),
                None => log::warn!("{}: summary has no total cost; skipped", path.display()),
            }
        }
    }
    let front = export_pareto(&points)?;
    let mut out = String::from("total_cost_mb,mean_acc,label\n");
    for p in &front {
        out.push_str(&format!("{},{},{}\n", p.total_cost_mb, p.mean_acc, p.label));
    }
    match &common.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            std::fs::write(d.join("pareto.csv"), &out)?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

/// `a=1,b=2` into a TOML table so numeric types follow the usual TOML rules.
fn parse_params(text: &str) -> Result<StreamParams, Error> {
    let mut doc = String::new();
    for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        doc.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    let params: StreamParams = toml::from_str(&doc)?;
    params.validate()?;
    Ok(params)
}

fn cmd_gen_stream(kind: &str, params: &str, out: &Path, common: &Common) -> Result<(), Error> {
    let kind: StreamKind = kind.parse()?;
    let params = parse_params(params)?;
    let stream = generate_stream(kind, &params, common.seed.unwrap_or(0))?;
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    save_stream(&stream, out)?;
    println!("wrote {} tasks ({} classes, dim {}) to {}", stream.len(), stream.total_classes(), stream.dim(), out.display());
    Ok(())
}
