use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use loraserve_core::cpu_assist::ServingMode;
use loraserve_core::kernels::KernelKind;
use loraserve_core::scheduler::Policy;
use loraserve_core::simulator::{
    generate_workload, read_trace_csv, simulate_trace, write_trace_csv, FleetConfig, SimResult,
};
use loraserve_core::Exec;

use crate::{parse_kernel, parse_mode, Failure, ResultExt, WorkloadArgs};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON fleet config; the flags below override its fields.
    #[arg(long)]
    fleet: Option<PathBuf>,
    /// Replay this trace CSV instead of generating a workload.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated policies, or `all`.
    #[arg(long, default_value = "rank-aware")]
    policy: String,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelKind>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ServingMode>,
    /// Time-per-token objective.
    #[arg(long, default_value_t = 26.0)]
    slo_ms: f64,
    #[arg(long)]
    servers: Option<u32>,
    /// Response length the scheduler assumes; defaults to the workload's mean.
    #[arg(long)]
    avg_resp_len: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_policies(s: &str) -> Result<Vec<Policy>, String> {
    if s == "all" {
        return Ok(Policy::ALL.to_vec());
    }
    let mut out: Vec<Policy> = Vec::new();
    for p in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let p: Policy = p.parse()?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err("no policy given".into());
    }
    Ok(out)
}

fn create(dir: &Path, name: &str) -> Result<File, Failure> {
    let p = dir.join(name);
    File::create(&p).with_context(|| format!("cannot create {}", p.display())).runtime()
}

pub fn run(args: SimulateArgs) -> Result<(), Failure> {
    let policies = parse_policies(&args.policy).map_err(|e| anyhow!(e)).config()?;
    let mut fleet = match &args.fleet {
        Some(p) => FleetConfig::load(p).config()?,
        None => FleetConfig::default(),
    };
    if let Some(n) = args.servers {
        fleet.servers = n;
    }
    if let Some(m) = args.mode {
        fleet.mode = m;
    }
    if let Some(k) = args.kernel {
        fleet.kernel.kind = k;
    }
    fleet.validate().config()?;

    let (trace, mean_output) = match &args.trace {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("cannot open trace {}", p.display())).config()?;
            let trace = read_trace_csv(f).config()?;
            let mean = trace.iter().map(|r| r.output_len as f64).sum::<f64>() / trace.len().max(1) as f64;
            (trace, mean)
        }
        None => {
            let spec = args.workload.resolve(args.seed, 5.0 * fleet.servers as f64)?;
            (generate_workload(&spec).config()?, spec.output_len.mean_hint())
        }
    };
    let avg_resp_len = args.avg_resp_len.unwrap_or(mean_output.max(1.0));
    let configs: Vec<_> = policies
        .iter()
        .map(|&p| {
            let c = fleet.scheduler_config(p, args.slo_ms, avg_resp_len, args.seed);
            c.validate().config().map(|_| c)
        })
        .collect::<Result<_, _>>()?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create output directory {}", args.out.display()))
        .runtime()?;
    write_trace_csv(create(&args.out, "trace.csv")?, &trace).runtime()?;

    let results: Vec<SimResult> = Exec::Parallel
        .map(&configs, |c| simulate_trace(&fleet, &trace, c.clone()))
        .into_iter()
        .collect::<Result<_, _>>()
        .runtime()?;

    let mut summary = create(&args.out, "summary.csv")?;
    use std::io::Write;
    writeln!(summary, "policy,slo_attainment,mean_tpt_ms,p99_tpt_ms,mean_ttft_ms,cold_start_share,dropped")
        .runtime()?;
    println!(
        "{} requests, {} servers, mode {}, kernel {}, SLO {} ms/token",
        trace.len(),
        fleet.servers,
        fleet.mode,
        fleet.kernel.kind,
        args.slo_ms
    );
    println!("{:<11} {:>10} {:>12} {:>12} {:>11}", "policy", "attainment", "mean tpt ms", "mean ttft ms", "cold share");
    for (p, r) in policies.iter().zip(&results) {
        let m = &r.metrics;
        r.write_summary_json(create(&args.out, &format!("metrics-{p}.json"))?).runtime()?;
        r.write_requests_csv(create(&args.out, &format!("requests-{p}.csv"))?).runtime()?;
        r.write_decisions_csv(create(&args.out, &format!("decisions-{p}.csv"))?).runtime()?;
        writeln!(
            summary,
            "{p},{},{},{},{},{},{}",
            m.slo_attainment, m.mean_tpt_ms, m.p99_tpt_ms, m.mean_ttft_ms, m.cold_start_share, m.dropped
        )
        .runtime()?;
        println!(
            "{:<11} {:>9.2}% {:>12.2} {:>12.2} {:>10.2}%",
            p.as_str(),
            100.0 * m.slo_attainment,
            m.mean_tpt_ms,
            m.mean_ttft_ms,
            100.0 * m.cold_start_share
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_lists() {
        assert_eq!(parse_policies("all").unwrap().len(), 4);
        assert_eq!(parse_policies("first-fit, random,first-fit").unwrap(), vec![Policy::FirstFit, Policy::Random]);
        assert!(parse_policies("fastest").is_err());
        assert!(parse_policies(",").is_err());
    }
}
