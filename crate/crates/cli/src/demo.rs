use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use loraserve_core::core_math::{AdapterId, LoraAdapter, Matrix, Target, ToyModel, ToyModelConfig};
use loraserve_core::cpu_assist::{
    overlap_ttft, plan_parallelization, split_prefill, AssistError, OverlapTiming, ServingMode, SplitConfig,
    WorkerLauncher,
};
use rand::SeedableRng;
use serde::Serialize;

use crate::{Failure, ResultExt};

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Prompt length L.
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    /// Tokens one core handles per layer.
    #[arg(long, default_value_t = 8)]
    cap: usize,
    /// Cores available to workers; the capacity grows if the plan needs more.
    #[arg(long)]
    cores: Option<usize>,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    /// Run workers as threads sharing an anonymous mapping instead of processes.
    #[arg(long)]
    inline: bool,
    /// Crash worker W on receiving layer K, given as W:K.
    #[arg(long, value_parser = parse_die_at)]
    die_at: Option<(usize, u32)>,
    /// Adapter load latency for the TTFT table.
    #[arg(long, default_value_t = 50.0)]
    load_ms: f64,
    /// Accelerator prefill rate in tokens per ms.
    #[arg(long, default_value_t = 10.0)]
    gpu_rate: f64,
    /// CPU-assisted prefill rate per worker, tokens per ms.
    #[arg(long, default_value_t = 0.25)]
    cpu_rate_per_core: f64,
    #[arg(long, default_value_t = 5.0)]
    decode_ms: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_die_at(s: &str) -> Result<(usize, u32), String> {
    let (w, l) = s.split_once(':').ok_or("expected WORKER:LAYER")?;
    Ok((w.parse().map_err(|e| format!("worker: {e}"))?, l.parse().map_err(|e| format!("layer: {e}"))?))
}

#[derive(Serialize)]
struct Report {
    tokens: usize,
    capacity: usize,
    workers: usize,
    inline: bool,
    degraded: bool,
    fault: Option<String>,
    max_abs_diff: f32,
    rel_diff: f32,
    ttft_ms: Vec<(ServingMode, f64)>,
}

pub fn run(args: DemoArgs) -> Result<(), Failure> {
    let cores = args.cores.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if cores == 0 {
        return Err(anyhow!("--cores must be >= 1")).config();
    }
    if args.tokens == 0 || args.cap == 0 {
        return Err(anyhow!("--tokens and --cap must be >= 1")).config();
    }
    let capacity = args.cap.max(args.tokens.div_ceil(cores));
    let plan = plan_parallelization(args.tokens, capacity).config()?;

    let cfg = ToyModelConfig {
        hidden_size: args.hidden,
        intermediate_size: 2 * args.hidden,
        num_layers: args.layers,
        head_count: args.heads,
    };
    let model = ToyModel::seeded(cfg, args.seed).config()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let adapter = LoraAdapter::random(AdapterId(0), args.hidden, args.rank, &Target::ALL, &mut rng).config()?;
    let prompt = Matrix::random(args.tokens, args.hidden, 1.0, &mut rng);

    let launcher = if args.inline {
        WorkerLauncher::Inline
    } else {
        let exe = std::env::current_exe().context("cannot locate own executable").runtime()?;
        WorkerLauncher::Process { program: exe, prefix_args: vec!["worker".into()] }
    };
    let split_cfg = SplitConfig { launcher, die_at: args.die_at, ..SplitConfig::default() };
    let (want, _) = model.prefill(&prompt, Some(&adapter)).runtime()?;
    let got = match split_prefill(&prompt, &model, &adapter, &plan, &split_cfg) {
        Ok(g) => g,
        Err(e @ AssistError::Precondition(_)) => return Err(e).config(),
        Err(e) => return Err(e).context("split prefill failed (try --inline)").runtime(),
    };

    let timing = OverlapTiming {
        load_latency_ms: args.load_ms,
        cpu_prefill_rate: args.cpu_rate_per_core * plan.workers() as f64,
        gpu_prefill_rate: args.gpu_rate,
        decode_step_ms: args.decode_ms,
    };
    let ttft: Vec<(ServingMode, f64)> = ServingMode::ALL
        .iter()
        .map(|&m| overlap_ttft(args.tokens, &timing, m).map(|t| (m, t)))
        .collect::<Result<_, _>>()
        .config()?;

    let report = Report {
        tokens: args.tokens,
        capacity,
        workers: got.workers,
        inline: args.inline,
        degraded: got.degraded,
        fault: got.fault.clone(),
        max_abs_diff: got.output.max_abs_diff(&want),
        rel_diff: got.output.rel_diff(&want),
        ttft_ms: ttft,
    };
    println!(
        "{} tokens, capacity {} -> {} {} worker(s)",
        report.tokens,
        report.capacity,
        report.workers,
        if args.inline { "inline" } else { "process" }
    );
    if let Some(f) = &report.fault {
        println!("worker fault, finished in-process: {f}");
    }
    println!("max |split - monolithic| = {:e} (relative {:e})", report.max_abs_diff, report.rel_diff);
    println!("{:<10} {:>9}", "mode", "ttft ms");
    for (m, t) in &report.ttft_ms {
        println!("{:<10} {:>9.3}", m.as_str(), t);
    }
    if let Some(p) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())).runtime()?;
    }
    if report.rel_diff > 1e-5 {
        return Err(anyhow!("split prefill diverged from the reference")).runtime();
    }
    Ok(())
}
