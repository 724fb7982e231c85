use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::shm::ShmSegment;
use super::{AssistError, TokenSlice};
use crate::core_math::LoraAdapter;

/// Exit code of a worker process that could not serve its slice.
pub const WORKER_FAULT_EXIT: i32 = 3;
/// Exit code of an injected crash.
pub const WORKER_CRASH_EXIT: i32 = 101;

/// What one worker is responsible for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSpec {
    pub index: usize,
    pub slice: TokenSlice,
    /// Exit abruptly, without reporting, on receiving this layer.
    pub die_at_layer: Option<u32>,
    pub core: Option<usize>,
}

/// Computes the adapter deltas for `slice` of the current layer input and
/// writes them into the output slots, one slot per adapted projection.
pub fn worker_compute(seg: &ShmSegment, slice: TokenSlice, adapter: &LoraAdapter) -> Result<(), AssistError> {
    if adapter.target_count() != seg.layout().slots || adapter.hidden() != seg.layout().hidden {
        return Err(AssistError::Protocol(format!(
            "adapter has {} targets at width {}, segment expects {} at {}",
            adapter.target_count(),
            adapter.hidden(),
            seg.layout().slots,
            seg.layout().hidden
        )));
    }
    let x = seg.read_input_rows(slice.start, slice.len)?;
    for (slot, (_, pair)) in adapter.pairs().enumerate() {
        seg.write_output_rows(slot, slice.start, &pair.delta(&x)?)?;
    }
    Ok(())
}

enum Wake {
    Layer,
    Shutdown,
}

fn wait_for_input(seg: &ShmSegment, seen: u64) -> Wake {
    let mut spins = 0u32;
    loop {
        if seg.shutdown_requested() {
            return Wake::Shutdown;
        }
        if seg.input_seq() > seen {
            return Wake::Layer;
        }
        spins += 1;
        if spins < 1_000 {
            std::hint::spin_loop();
        } else if spins < 2_000 {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(50));
        }
    }
}

/// Serves layers until shutdown. Returns `Ok(false)` if it stopped early
/// because of an injected crash.
pub fn run_worker(seg: &ShmSegment, spec: &WorkerSpec, adapter: &LoraAdapter) -> Result<bool, AssistError> {
    let mut seen = 0u64;
    loop {
        match wait_for_input(seg, seen) {
            Wake::Shutdown => return Ok(true),
            Wake::Layer => {}
        }
        seen += 1;
        if spec.die_at_layer == Some(seg.layer_index()) {
            return Ok(false);
        }
        if let Err(e) = worker_compute(seg, spec.slice, adapter) {
            seg.report_fault(spec.index);
            return Err(e);
        }
        seg.complete_slice();
    }
}

/// Best-effort pin of the calling thread to `core`.
pub fn pin_to_core(core: usize) -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: cpu_set_t is plain data; the calls only read it.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            if core >= 8 * std::mem::size_of::<libc::cpu_set_t>() {
                return false;
            }
            libc::CPU_SET(core, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = core;
        false
    }
}

/// How worker processes are started.
#[derive(Debug, Clone)]
pub enum WorkerLauncher {
    /// Threads in this process, sharing an anonymous mapping.
    Inline,
    /// Separate OS processes: `program prefix_args... --segment ...`.
    Process { program: PathBuf, prefix_args: Vec<String> },
}

impl WorkerLauncher {
    pub fn is_inline(&self) -> bool {
        matches!(self, WorkerLauncher::Inline)
    }

    pub fn spawn(
        &self,
        seg: &Arc<ShmSegment>,
        spec: WorkerSpec,
        adapter: &Arc<LoraAdapter>,
        adapter_file: Option<&Path>,
    ) -> Result<WorkerHandle, AssistError> {
        match self {
            WorkerLauncher::Inline => {
                let seg = Arc::clone(seg);
                let adapter = Arc::clone(adapter);
                let handle = std::thread::Builder::new()
                    .name(format!("lora-worker-{}", spec.index))
                    .spawn(move || {
                        if let Some(core) = spec.core {
                            pin_to_core(core);
                        }
                        run_worker(&seg, &spec, &adapter).map(|_| ())
                    })
                    .map_err(|e| AssistError::Spawn(e.to_string()))?;
                Ok(WorkerHandle::Thread(Some(handle)))
            }
            WorkerLauncher::Process { program, prefix_args } => {
                let seg_path = seg
                    .path()
                    .ok_or_else(|| AssistError::Spawn("process workers need a file-backed segment".into()))?;
                let adapter_file =
                    adapter_file.ok_or_else(|| AssistError::Spawn("process workers need an adapter file".into()))?;
                let mut cmd = Command::new(program);
                cmd.args(prefix_args)
                    .arg("--segment")
                    .arg(seg_path)
                    .args(["--index", &spec.index.to_string()])
                    .args(["--start", &spec.slice.start.to_string()])
                    .args(["--len", &spec.slice.len.to_string()])
                    .arg("--adapter")
                    .arg(adapter_file)
                    .stdin(Stdio::null())
                    .stdout(Stdio::null());
                if let Some(layer) = spec.die_at_layer {
                    cmd.args(["--die-at-layer", &layer.to_string()]);
                }
                if let Some(core) = spec.core {
                    cmd.args(["--core", &core.to_string()]);
                }
                let child = cmd.spawn().map_err(|e| AssistError::Spawn(format!("{}: {e}", program.display())))?;
                Ok(WorkerHandle::Process(child))
            }
        }
    }
}

pub enum WorkerHandle {
    Thread(Option<JoinHandle<Result<(), AssistError>>>),
    Process(Child),
}

impl WorkerHandle {
    /// True once the worker is gone, for whatever reason.
    pub fn exited(&mut self) -> bool {
        match self {
            WorkerHandle::Thread(h) => h.as_ref().is_none_or(JoinHandle::is_finished),
            WorkerHandle::Process(c) => !matches!(c.try_wait(), Ok(None)),
        }
    }

    /// Waits up to `grace` for a clean exit, then kills a process worker.
    pub fn finish(&mut self, grace: Duration) {
        let deadline = std::time::Instant::now() + grace;
        while !self.exited() && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        match self {
            WorkerHandle::Thread(h) => {
                if h.as_ref().is_some_and(JoinHandle::is_finished) {
                    let _ = h.take().map(JoinHandle::join);
                }
            }
            WorkerHandle::Process(c) => {
                if matches!(c.try_wait(), Ok(None)) {
                    let _ = c.kill();
                }
                let _ = c.wait();
            }
        }
    }
}

fn parse_args(args: &[String]) -> Result<(PathBuf, WorkerSpec, PathBuf), String> {
    let mut segment = None;
    let mut adapter = None;
    let (mut index, mut start, mut len, mut die, mut core) = (None, None, None, None, None);
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || it.next().cloned().ok_or_else(|| format!("{flag} needs a value"));
        let num = |v: String| v.parse::<usize>().map_err(|e| format!("{flag}: {e}"));
        match flag.as_str() {
            "--segment" => segment = Some(PathBuf::from(value()?)),
            "--adapter" => adapter = Some(PathBuf::from(value()?)),
            "--index" => index = Some(num(value()?)?),
            "--start" => start = Some(num(value()?)?),
            "--len" => len = Some(num(value()?)?),
            "--die-at-layer" => die = Some(num(value()?)? as u32),
            "--core" => core = Some(num(value()?)?),
            other => return Err(format!("unexpected argument '{other}'")),
        }
    }
    let spec = WorkerSpec {
        index: index.ok_or("--index is required")?,
        slice: TokenSlice { start: start.ok_or("--start is required")?, len: len.ok_or("--len is required")? },
        die_at_layer: die,
        core,
    };
    Ok((segment.ok_or("--segment is required")?, spec, adapter.ok_or("--adapter is required")?))
}

/// Entry point of a worker process; returns the exit code.
pub fn worker_main(args: &[String]) -> i32 {
    let (seg_path, spec, adapter_path) = match parse_args(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("lora-worker: {e}");
            return 2;
        }
    };
    let seg = match ShmSegment::open(&seg_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("lora-worker {}: {e}", spec.index);
            return WORKER_FAULT_EXIT;
        }
    };
    let adapter = std::fs::read(&adapter_path)
        .map_err(AssistError::from)
        .and_then(|bytes| Ok(serde_json::from_slice::<LoraAdapter>(&bytes)?));
    let adapter = match adapter {
        Ok(a) => a,
        Err(e) => {
            eprintln!("lora-worker {}: cannot load adapter {}: {e}", spec.index, adapter_path.display());
            seg.report_fault(spec.index);
            return WORKER_FAULT_EXIT;
        }
    };
    if let Some(core) = spec.core {
        pin_to_core(core);
    }
    match run_worker(&seg, &spec, &adapter) {
        Ok(true) => 0,
        Ok(false) => WORKER_CRASH_EXIT,
        Err(e) => {
            eprintln!("lora-worker {}: {e}", spec.index);
            WORKER_FAULT_EXIT
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::{AdapterId, Matrix, Target};
    use crate::cpu_assist::SegmentLayout;
    use rand::SeedableRng;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_worker_args() {
        let (seg, spec, adapter) =
            parse_args(&args("--segment /s --index 2 --start 8 --len 4 --adapter /a --die-at-layer 1")).unwrap();
        assert_eq!(seg, PathBuf::from("/s"));
        assert_eq!(adapter, PathBuf::from("/a"));
        assert_eq!(spec.slice, TokenSlice { start: 8, len: 4 });
        assert_eq!(spec.die_at_layer, Some(1));
        assert!(parse_args(&args("--segment /s --index x")).is_err());
        assert!(parse_args(&args("--segment /s")).is_err());
    }

    #[test]
    fn compute_writes_each_target_slot() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let adapter = LoraAdapter::random(AdapterId(1), 4, 2, &[Target::Q, Target::V], &mut rng).unwrap();
        let seg = ShmSegment::create(None, SegmentLayout { token_count: 3, hidden: 4, slots: 2, workers: 1 }).unwrap();
        let x = Matrix::random(3, 4, 1.0, &mut rng);
        seg.publish_layer_input(0, &x).unwrap();
        worker_compute(&seg, TokenSlice { start: 0, len: 3 }, &adapter).unwrap();
        for (slot, (_, pair)) in adapter.pairs().enumerate() {
            assert_eq!(seg.read_output(slot).unwrap(), pair.delta(&x).unwrap());
        }
    }

    #[test]
    fn mismatched_adapter_reports_fault() {
        let adapter = LoraAdapter::zeros(AdapterId(1), 4, 2, &[Target::Q]).unwrap();
        let seg = ShmSegment::create(None, SegmentLayout { token_count: 2, hidden: 4, slots: 3, workers: 1 }).unwrap();
        seg.publish_layer_input(0, &Matrix::zeros(2, 4)).unwrap();
        let spec = WorkerSpec { index: 0, slice: TokenSlice { start: 0, len: 2 }, die_at_layer: None, core: None };
        assert!(run_worker(&seg, &spec, &adapter).is_err());
        assert_eq!(seg.fault(), Some(0));
    }
}
