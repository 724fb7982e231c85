//! `loraserve`: reproducible experiments over the serving model.

mod demo;
mod fit;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use loraserve_core::cpu_assist::{worker_main, ServingMode};
use loraserve_core::kernels::KernelKind;
use loraserve_core::simulator::{generate_workload, write_trace_csv, WorkloadKind, WorkloadSpec};

#[derive(Parser)]
#[command(name = "loraserve", version, about = "Multi-tenant LoRA serving experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a fleet under one or more routing policies.
    Simulate(simulate::SimulateArgs),
    /// Fit linear kernel latency models to a profile.
    FitPerf(fit::FitArgs),
    /// Run split prefill against the monolithic reference and print a TTFT table.
    DemoSplitPrefill(demo::DemoArgs),
    /// Write a synthetic request trace.
    GenWorkload(GenArgs),
    /// CPU worker process used by split prefill.
    #[command(hide = true)]
    Worker {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

/// Workload knobs shared by `simulate` and `gen-workload`.
#[derive(Args, Debug, Clone)]
pub struct WorkloadArgs {
    /// JSON workload spec; the flags below override its fields.
    #[arg(long)]
    pub workload: Option<PathBuf>,
    /// Aggregate requests per second.
    #[arg(long)]
    pub rps: Option<f64>,
    #[arg(long)]
    pub adapters: Option<u32>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    /// Popularity skew exponent.
    #[arg(long)]
    pub skew: Option<f64>,
    #[arg(long, value_parser = parse_kind)]
    pub workload_kind: Option<WorkloadKind>,
}

fn parse_kind(s: &str) -> Result<WorkloadKind, String> {
    match s {
        "poisson" => Ok(WorkloadKind::Poisson),
        "skewed" => Ok(WorkloadKind::Skewed),
        _ => Err(format!("unknown workload kind '{s}' (expected poisson or skewed)")),
    }
}

impl WorkloadArgs {
    /// Spec from the file (or defaults) with flag overrides; `default_rps`
    /// applies only when neither the file nor `--rps` sets a rate.
    pub fn resolve(&self, seed: u64, default_rps: f64) -> Result<WorkloadSpec, Failure> {
        let mut spec = match &self.workload {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read workload {}", p.display()))
                    .config()?;
                serde_json::from_str(&text).with_context(|| format!("workload {}", p.display())).config()?
            }
            None => WorkloadSpec { aggregate_rps: default_rps, ..WorkloadSpec::default() },
        };
        spec.seed = seed;
        if let Some(v) = self.rps {
            spec.aggregate_rps = v;
        }
        if let Some(v) = self.adapters {
            spec.num_adapters = v;
        }
        if let Some(v) = self.duration_s {
            spec.duration_s = v;
        }
        if let Some(v) = self.skew {
            spec.skew = v;
        }
        if let Some(v) = self.workload_kind {
            spec.kind = v;
        }
        spec.validate().config()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

pub trait ResultExt<T> {
    /// Bad input or configuration: exit 2.
    fn config(self) -> Result<T, Failure>;
    /// Environment or runtime failure: exit 3.
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_CONFIG, error: e.into() })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_RUNTIME, error: e.into() })
    }
}

pub fn parse_kernel(s: &str) -> Result<KernelKind, String> {
    s.parse()
}

pub fn parse_mode(s: &str) -> Result<ServingMode, String> {
    s.parse()
}

fn gen_workload(args: GenArgs) -> Result<(), Failure> {
    let spec = args.workload.resolve(args.seed, WorkloadSpec::default().aggregate_rps)?;
    let trace = generate_workload(&spec).config()?;
    let file =
        std::fs::File::create(&args.out).with_context(|| format!("cannot create {}", args.out.display())).runtime()?;
    write_trace_csv(file, &trace).runtime()?;
    println!("wrote {} requests to {}", trace.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::FitPerf(a) => fit::run(a),
        Command::DemoSplitPrefill(a) => demo::run(a),
        Command::GenWorkload(a) => gen_workload(a),
        Command::Worker { args } => return ExitCode::from(worker_main(&args).clamp(0, 255) as u8),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
