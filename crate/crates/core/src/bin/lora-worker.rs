//! CPU worker process for split prefill; started by the coordinator.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(loraserve_core::cpu_assist::worker_main(&args));
}
