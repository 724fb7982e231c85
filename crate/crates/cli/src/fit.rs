use std::fs::File;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use loraserve_core::kernels::KernelKind;
use loraserve_core::perf_model::{
    instrumented_profile, profile_grid, read_profile_csv, write_profile_csv, PerfModel, ProfilePoint,
};
use loraserve_core::Exec;

use crate::{parse_kernel, Failure, ResultExt};

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Profile CSV: kernel,batch_size,max_rank,sum_rank,latency_ms.
    #[arg(long, conflicts_with = "instrumented", required_unless_present = "instrumented")]
    profile: Option<PathBuf>,
    /// Profile the reference kernels here instead, timing by counted work units.
    #[arg(long)]
    instrumented: bool,
    /// Fit only this kernel; default fits every kernel present in the profile.
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelKind>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    max_batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    ranks: Vec<usize>,
    /// Latency charged per kernel work unit in the instrumented profile.
    #[arg(long, default_value_t = 1e-4)]
    ms_per_unit: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

const R2_WARN: f64 = 0.9;

pub fn run(args: FitArgs) -> Result<(), Failure> {
    let kinds: Vec<KernelKind> = match args.kernel {
        Some(k) => vec![k],
        None => vec![KernelKind::Bgmv, KernelKind::Mbgmv],
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create output directory {}", args.out.display()))
        .runtime()?;
    let points: Vec<ProfilePoint> = if let Some(p) = &args.profile {
        let f = File::open(p).with_context(|| format!("cannot open profile {}", p.display())).config()?;
        read_profile_csv(f).with_context(|| format!("profile {}", p.display())).config()?
    } else {
        if args.ranks.is_empty() || args.ranks.contains(&0) || args.max_batch == 0 || args.hidden == 0 {
            return Err(anyhow!("--hidden, --max-batch and --ranks must be positive")).config();
        }
        let grid = profile_grid(args.max_batch, &args.ranks);
        let mut pts = Vec::new();
        for &k in &kinds {
            pts.extend(instrumented_profile(Exec::Parallel, k, args.hidden, &grid, args.ms_per_unit).runtime()?);
        }
        let path = args.out.join("profile.csv");
        let f = File::create(&path).with_context(|| format!("cannot create {}", path.display())).runtime()?;
        write_profile_csv(f, &pts).runtime()?;
        pts
    };

    let mut fitted = 0;
    for k in kinds {
        let pts: Vec<ProfilePoint> = points.iter().copied().filter(|p| p.kernel == k).collect();
        if pts.is_empty() {
            if args.kernel.is_some() {
                return Err(anyhow!("profile has no {k} rows")).config();
            }
            continue;
        }
        let model = PerfModel::fit(&pts, k).with_context(|| format!("fitting {k}")).config()?;
        let path = args.out.join(format!("perf-{k}.json"));
        std::fs::write(&path, model.to_json() + "\n")
            .with_context(|| format!("cannot write {}", path.display()))
            .runtime()?;
        println!(
            "{k}: alpha = {:.6} ms, beta = {:.4} ms, R^2 = {:.4} ({} points) -> {}",
            model.alpha,
            model.beta,
            model.r_squared,
            pts.len(),
            path.display()
        );
        if model.r_squared < R2_WARN {
            eprintln!(
                "warning: {k} fit has R^2 = {:.3} < {R2_WARN}; the linear model explains this profile poorly",
                model.r_squared
            );
        }
        fitted += 1;
    }
    if fitted == 0 {
        return Err(anyhow!("profile has no usable rows")).config();
    }
    Ok(())
}
