use std::path::PathBuf;

use loraserve_core::core_math::{AdapterId, LoraAdapter, Matrix, Target, ToyModel, ToyModelConfig};
use loraserve_core::cpu_assist::{plan_parallelization, split_prefill, SplitConfig, WorkerLauncher};
use rand::SeedableRng;

fn process_launcher() -> WorkerLauncher {
    WorkerLauncher::Process { program: PathBuf::from(env!("CARGO_BIN_EXE_lora-worker")), prefix_args: vec![] }
}

fn setup(l: usize) -> (ToyModel, LoraAdapter, Matrix) {
    let cfg = ToyModelConfig { hidden_size: 8, intermediate_size: 16, num_layers: 3, head_count: 2 };
    let model = ToyModel::seeded(cfg, 40).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
    let adapter = LoraAdapter::random(AdapterId(3), 8, 2, &[Target::Q, Target::K, Target::V], &mut rng).unwrap();
    (model, adapter, Matrix::random(l, 8, 1.0, &mut rng))
}

#[test]
fn process_workers_match_monolithic() {
    let (model, adapter, prompt) = setup(7);
    let (want, _) = model.prefill(&prompt, Some(&adapter)).unwrap();
    let cfg = SplitConfig { launcher: process_launcher(), ..SplitConfig::default() };
    let got = split_prefill(&prompt, &model, &adapter, &plan_parallelization(7, 3).unwrap(), &cfg).unwrap();
    assert!(!got.degraded, "{:?}", got.fault);
    assert_eq!(got.offloaded_layers, 3);
    assert!(got.output.rel_diff(&want) <= 1e-5);
}

#[test]
fn killed_process_worker_degrades() {
    let (model, adapter, prompt) = setup(6);
    let (want, _) = model.prefill(&prompt, Some(&adapter)).unwrap();
    let cfg = SplitConfig { launcher: process_launcher(), die_at: Some((0, 2)), ..SplitConfig::default() };
    let got = split_prefill(&prompt, &model, &adapter, &plan_parallelization(6, 2).unwrap(), &cfg).unwrap();
    assert!(got.degraded);
    assert_eq!(got.offloaded_layers, 2);
    assert!(got.output.rel_diff(&want) <= 1e-5);
}

#[test]
fn missing_adapter_file_faults_worker() {
    let (model, adapter, prompt) = setup(4);
    let (want, _) = model.prefill(&prompt, Some(&adapter)).unwrap();
    // the wrapper replaces the coordinator's adapter path with a missing one
    let script = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(
        script.path(),
        format!("#!/bin/sh\nexec {} \"$@\" --adapter /nonexistent/adapter.json\n", env!("CARGO_BIN_EXE_lora-worker")),
    )
    .unwrap();
    let cfg = SplitConfig {
        launcher: WorkerLauncher::Process {
            program: PathBuf::from("/bin/sh"),
            prefix_args: vec![script.path().display().to_string()],
        },
        ..SplitConfig::default()
    };
    let got = split_prefill(&prompt, &model, &adapter, &plan_parallelization(4, 2).unwrap(), &cfg).unwrap();
    assert!(got.degraded);
    assert_eq!(got.offloaded_layers, 0);
    assert!(got.output.rel_diff(&want) <= 1e-5);
}
