use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::shm::{default_shm_dir, SegmentLayout, ShmSegment};
use super::worker::{WorkerHandle, WorkerLauncher, WorkerSpec};
use super::{AssistError, ParallelPlan};
use crate::core_math::{attend_and_mlp, project_qkv, KvCache, LayerCache, LoraAdapter, Matrix, Target, ToyModel};

#[derive(Debug, Clone)]
pub struct SplitConfig {
    pub launcher: WorkerLauncher,
    /// Longest wait for one layer's deltas before falling back.
    pub timeout: Duration,
    /// Crash worker `.0` when it receives layer `.1`.
    pub die_at: Option<(usize, u32)>,
    /// Pin worker `i` to core `i` (best effort).
    pub pin_cores: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { launcher: WorkerLauncher::Inline, timeout: Duration::from_secs(10), die_at: None, pin_cores: false }
    }
}

#[derive(Debug, Clone)]
pub struct SplitPrefillOutput {
    pub output: Matrix,
    pub cache: KvCache,
    /// Set once workers stopped serving and the coordinator took over.
    pub degraded: bool,
    pub fault: Option<String>,
    /// Layers whose deltas came from the workers.
    pub offloaded_layers: usize,
    pub workers: usize,
}

static SEGMENT_COUNTER: AtomicU64 = AtomicU64::new(0);

fn unique_segment_path() -> PathBuf {
    let n = SEGMENT_COUNTER.fetch_add(1, Ordering::Relaxed);
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    default_shm_dir().join(format!("loraserve-{}-{n}-{nanos}", std::process::id()))
}

struct Workers {
    seg: Arc<ShmSegment>,
    handles: Vec<WorkerHandle>,
    adapter_file: Option<PathBuf>,
}

impl Workers {
    fn start(plan: &ParallelPlan, adapter: &LoraAdapter, cfg: &SplitConfig) -> Result<Self, AssistError> {
        let layout = SegmentLayout {
            token_count: plan.total_tokens(),
            hidden: adapter.hidden(),
            slots: adapter.target_count(),
            workers: plan.workers(),
        };
        let (seg, adapter_file) = if cfg.launcher.is_inline() {
            (ShmSegment::create(None, layout)?, None)
        } else {
            let seg_path = unique_segment_path();
            let file = seg_path.with_extension("adapter.json");
            std::fs::write(&file, serde_json::to_vec(adapter)?)?;
            (ShmSegment::create(Some(&seg_path), layout)?, Some(file))
        };
        let mut workers = Self { seg: Arc::new(seg), handles: Vec::new(), adapter_file };
        let shared = Arc::new(adapter.clone());
        for (index, slice) in plan.slices.iter().enumerate() {
            let spec = WorkerSpec {
                index,
                slice: *slice,
                die_at_layer: cfg.die_at.filter(|(w, _)| *w == index).map(|(_, l)| l),
                core: cfg.pin_cores.then_some(index),
            };
            let handle = cfg.launcher.spawn(&workers.seg, spec, &shared, workers.adapter_file.as_deref())?;
            workers.handles.push(handle);
        }
        Ok(workers)
    }

    /// Blocks until every worker finished layer `seq`, or reports why it never will.
    fn wait(&mut self, seq: u64, timeout: Duration) -> Result<(), AssistError> {
        let deadline = Instant::now() + timeout;
        let mut spins = 0u32;
        loop {
            if self.seg.output_seq() >= seq {
                return Ok(());
            }
            if let Some(worker) = self.seg.fault() {
                return Err(AssistError::WorkerFault { worker, reason: "reported a fault".into() });
            }
            if let Some(worker) = self.handles.iter_mut().position(WorkerHandle::exited) {
                // it may have finished its slice just before exiting
                if self.seg.output_seq() >= seq {
                    return Ok(());
                }
                return Err(AssistError::WorkerFault { worker, reason: "exited mid-prefill".into() });
            }
            if Instant::now() >= deadline {
                return Err(AssistError::Timeout(timeout));
            }
            spins += 1;
            if spins < 1_000 {
                std::hint::spin_loop();
            } else {
                std::thread::sleep(Duration::from_micros(20));
            }
        }
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        self.seg.request_shutdown();
        for h in &mut self.handles {
            h.finish(Duration::from_secs(2));
        }
        if let Some(f) = &self.adapter_file {
            let _ = std::fs::remove_file(f);
        }
    }
}

/// Prefills `prompt` through every layer of `model`, offloading the adapter
/// deltas to one CPU worker per plan slice. If a worker faults, exits or
/// times out, the remaining layers are adapted in-process and the result is
/// flagged `degraded`; the output is the same either way.
pub fn split_prefill(
    prompt: &Matrix,
    model: &ToyModel,
    adapter: &LoraAdapter,
    plan: &ParallelPlan,
    cfg: &SplitConfig,
) -> Result<SplitPrefillOutput, AssistError> {
    if plan.total_tokens() != prompt.rows() {
        return Err(AssistError::Precondition(format!(
            "plan covers {} tokens, prompt has {}",
            plan.total_tokens(),
            prompt.rows()
        )));
    }
    let mut next = 0;
    for s in &plan.slices {
        if s.start != next || s.len == 0 {
            return Err(AssistError::Precondition("plan slices must be contiguous and non-empty".into()));
        }
        next = s.end();
    }
    if adapter.hidden() != model.hidden() || prompt.cols() != model.hidden() {
        return Err(AssistError::Precondition(format!(
            "model width {}, adapter width {}, prompt width {}",
            model.hidden(),
            adapter.hidden(),
            prompt.cols()
        )));
    }

    let mut workers = Workers::start(plan, adapter, cfg)?;
    let mut x = prompt.clone();
    let mut cache = KvCache::default();
    let mut fault = None;
    let mut offloaded = 0;
    for (layer, w) in model.layers.iter().enumerate() {
        w.check()?;
        let (q, k, v) = match fault {
            None => match offloaded_projections(&mut workers, &x, w, adapter, layer as u32, cfg.timeout) {
                Ok(qkv) => {
                    offloaded += 1;
                    qkv
                }
                Err(e @ (AssistError::WorkerFault { .. } | AssistError::Timeout(_))) => {
                    fault = Some(e.to_string());
                    project_qkv(&x, w, Some(adapter))?
                }
                Err(e) => return Err(e),
            },
            Some(_) => project_qkv(&x, w, Some(adapter))?,
        };
        let layer_cache = LayerCache { keys: k, values: v };
        x = attend_and_mlp(&x, &q, &layer_cache, 0, w, layer)?;
        cache.layers.push(layer_cache);
    }
    Ok(SplitPrefillOutput {
        output: x,
        cache,
        degraded: fault.is_some(),
        fault,
        offloaded_layers: offloaded,
        workers: plan.workers(),
    })
}

fn offloaded_projections(
    workers: &mut Workers,
    x: &Matrix,
    w: &crate::core_math::LayerWeights,
    adapter: &LoraAdapter,
    layer: u32,
    timeout: Duration,
) -> Result<(Matrix, Matrix, Matrix), AssistError> {
    let seq = workers.seg.publish_layer_input(layer, x)?;
    let mut base = [Target::Q, Target::K, Target::V].map(|t| x.matmul_named(w.projection(t), "W"));
    workers.wait(seq, timeout)?;
    for (slot, (target, _)) in adapter.pairs().enumerate() {
        let delta = workers.seg.read_output(slot)?;
        let idx = Target::ALL.iter().position(|t| *t == target).expect("target is one of Q/K/V");
        if let Ok(m) = &mut base[idx] {
            m.add_assign(&delta)?;
        }
    }
    let [q, k, v] = base;
    Ok((q?, k?, v?))
}
