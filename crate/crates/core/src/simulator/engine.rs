use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use super::config::FleetConfig;
use super::metrics::{RequestRecord, SimMetrics, SimResult};
use super::workload::TraceRequest;
use super::SimError;
use crate::core_math::AdapterId;
use crate::cpu_assist::{overlap_prefill_end, ServingMode};
use crate::kernels::{AdapterBatch, BatchMember};
use crate::scheduler::{Decision, SchedError, SchedRequest, Scheduler, SchedulerConfig, ServerSnapshot, SlotInfo};

/// Simulation time in microseconds.
pub type Tick = u64;

pub fn ms_to_ticks(ms: f64) -> Tick {
    (ms * 1000.0).round() as Tick
}

pub fn ticks_to_ms(t: Tick) -> f64 {
    t as f64 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEvent {
    /// A request arrives, or retries routing.
    Arrival(usize),
    IterationEnd(u32),
}

/// Pending events ordered by time, then by insertion.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(Tick, u64, usize)>>,
    events: Vec<SimEvent>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, at: Tick, ev: SimEvent) {
        self.events.push(ev);
        self.heap.push(Reverse((at, self.seq, self.events.len() - 1)));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(Tick, SimEvent)> {
        self.heap.pop().map(|Reverse((t, _, i))| (t, self.events[i]))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Least-recently-used set of resident adapters.
#[derive(Debug, Clone)]
pub struct LruCache {
    capacity: usize,
    order: VecDeque<AdapterId>,
}

impl LruCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, order: VecDeque::with_capacity(capacity + 1) }
    }

    /// Marks `id` most recently used; returns false if it had to be loaded.
    pub fn touch(&mut self, id: AdapterId) -> bool {
        self.touch_pinned(id, &BTreeSet::new())
    }

    /// Like [`touch`](Self::touch), but a load evicts the least recent adapter
    /// outside `pinned` when there is one.
    pub fn touch_pinned(&mut self, id: AdapterId, pinned: &BTreeSet<AdapterId>) -> bool {
        if let Some(pos) = self.order.iter().position(|a| *a == id) {
            self.order.remove(pos);
            self.order.push_back(id);
            return true;
        }
        if self.order.len() >= self.capacity {
            let victim = self.order.iter().position(|a| !pinned.contains(a)).unwrap_or(0);
            self.order.remove(victim);
        }
        self.order.push_back(id);
        false
    }

    pub fn contains(&self, id: AdapterId) -> bool {
        self.order.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    sched: Option<Tick>,
    prefill_start: Option<Tick>,
    first_token: Option<Tick>,
    done: Option<Tick>,
    generated: u64,
    server: Option<u32>,
    retries: u32,
    dropped: bool,
    cold: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    Prefill(Vec<usize>),
    Decode,
}

#[derive(Debug)]
struct SimServer {
    running: Vec<usize>,
    queue: VecDeque<usize>,
    busy: Option<Phase>,
    cache: LruCache,
    reserved: u64,
}

/// Outcome of one iteration, before it is scheduled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationCost {
    /// Latency without any adapter loading.
    pub compute_ms: f64,
    pub duration_ms: f64,
    pub loads: u32,
}

impl IterationCost {
    pub fn cold_ms(&self) -> f64 {
        (self.duration_ms - self.compute_ms).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IterationCounts {
    pub prefill: u64,
    pub decode: u64,
    pub adapter_loads: u64,
}

pub struct Simulation<'a> {
    fleet: &'a FleetConfig,
    trace: &'a [TraceRequest],
    scheduler: Scheduler,
    slo_ms: f64,
    now: Tick,
    events: EventQueue,
    reqs: Vec<ReqState>,
    servers: Vec<SimServer>,
    snapshots: Vec<ServerSnapshot>,
    dirty: Vec<bool>,
    decisions: Vec<Decision>,
    counts: IterationCounts,
}

impl<'a> Simulation<'a> {
    pub fn new(fleet: &'a FleetConfig, trace: &'a [TraceRequest], sched: SchedulerConfig) -> Result<Self, SimError> {
        fleet.validate()?;
        let slo_ms = sched.slo_ms;
        let scheduler = Scheduler::new(sched)?;
        let n = fleet.servers as usize;
        let mut hosted = vec![BTreeSet::new(); n];
        let adapters: BTreeSet<AdapterId> = trace.iter().map(|r| r.adapter_id).collect();
        for a in adapters {
            for s in fleet.hosts(a.0) {
                hosted[s as usize].insert(a);
            }
        }
        let snapshots = hosted
            .into_iter()
            .enumerate()
            .map(|(i, h)| ServerSnapshot {
                server_id: i as u32,
                running: Vec::new(),
                queue: Vec::new(),
                hosted_adapter_ids: h,
                free_memory_tokens: fleet.memory_tokens,
            })
            .collect();
        let servers = (0..n)
            .map(|_| SimServer {
                running: Vec::new(),
                queue: VecDeque::new(),
                busy: None,
                cache: LruCache::new(fleet.cache_slots),
                reserved: 0,
            })
            .collect();
        let mut events = EventQueue::default();
        for (i, r) in trace.iter().enumerate() {
            if !(r.arrival_ms >= 0.0 && r.arrival_ms.is_finite()) || r.prompt_len == 0 || r.output_len == 0 {
                return Err(SimError::Config(format!("trace request {i} is invalid: {r:?}")));
            }
            events.push(ms_to_ticks(r.arrival_ms), SimEvent::Arrival(i));
        }
        Ok(Self {
            fleet,
            trace,
            scheduler,
            slo_ms,
            now: 0,
            events,
            reqs: vec![ReqState::default(); trace.len()],
            servers,
            snapshots,
            dirty: vec![false; n],
            decisions: Vec::new(),
            counts: IterationCounts::default(),
        })
    }

    pub fn run(mut self) -> Result<SimResult, SimError> {
        while let Some((t, ev)) = self.events.pop() {
            debug_assert!(t >= self.now);
            self.now = t;
            match ev {
                SimEvent::Arrival(i) => self.route(i)?,
                SimEvent::IterationEnd(s) => self.finish_iteration(s as usize),
            }
        }
        Ok(self.into_result())
    }

    fn slot(&self, i: usize) -> SlotInfo {
        let r = &self.trace[i];
        SlotInfo { adapter_id: r.adapter_id, rank: r.rank, prompt_len: r.prompt_len }
    }

    fn refresh_snapshot(&mut self, s: usize) {
        if !self.dirty[s] {
            return;
        }
        let server = &self.servers[s];
        let prefilling: &[usize] = match &server.busy {
            Some(Phase::Prefill(m)) => m,
            _ => &[],
        };
        let running: Vec<SlotInfo> = server.running.iter().chain(prefilling).map(|&i| self.slot(i)).collect();
        let queue: Vec<SlotInfo> = server.queue.iter().map(|&i| self.slot(i)).collect();
        let snap = &mut self.snapshots[s];
        snap.running = running;
        snap.queue = queue;
        snap.free_memory_tokens = self.fleet.memory_tokens.saturating_sub(server.reserved);
        self.dirty[s] = false;
    }

    fn route(&mut self, i: usize) -> Result<(), SimError> {
        for s in 0..self.servers.len() {
            self.refresh_snapshot(s);
        }
        let r = &self.trace[i];
        let req = SchedRequest {
            id: i as u64,
            adapter_id: r.adapter_id,
            rank: r.rank,
            prompt_len: r.prompt_len,
            reserve_tokens: r.prompt_len + r.output_len,
        };
        match self.scheduler.schedule(&req, &self.snapshots) {
            Ok(d) => {
                self.decisions.push(d);
                let s = d.server_id as usize;
                let st = &mut self.reqs[i];
                st.sched = Some(self.now);
                st.server = Some(d.server_id);
                self.servers[s].queue.push_back(i);
                self.servers[s].reserved += req.reserve_tokens;
                self.dirty[s] = true;
                if self.servers[s].busy.is_none() {
                    self.start_iteration(s);
                }
                Ok(())
            }
            Err(SchedError::NoCandidate { .. }) => {
                let st = &mut self.reqs[i];
                st.retries += 1;
                if st.retries > self.fleet.max_retries {
                    st.dropped = true;
                } else {
                    let at = self.now + ms_to_ticks(self.fleet.retry_ms).max(1);
                    self.events.push(at, SimEvent::Arrival(i));
                }
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Makes the adapters of `members` resident, returning `(loads, load_ms)`.
    /// Adapters of requests running on the server are never evicted.
    fn load_adapters(&mut self, s: usize, members: &[usize]) -> (u32, f64) {
        if self.fleet.mode == ServingMode::Cached {
            return (0, 0.0);
        }
        let pinned: BTreeSet<AdapterId> =
            self.servers[s].running.iter().chain(members).map(|&i| self.trace[i].adapter_id).collect();
        let mut seen = BTreeSet::new();
        let (mut loads, mut ms) = (0, 0.0);
        for &i in members {
            let r = &self.trace[i];
            if seen.insert(r.adapter_id) && !self.servers[s].cache.touch_pinned(r.adapter_id, &pinned) {
                loads += 1;
                ms += self.fleet.adapter_load_ms(r.rank);
            }
        }
        (loads, ms)
    }

    fn batch_of(&self, members: &[usize]) -> AdapterBatch {
        AdapterBatch::new(
            members
                .iter()
                .map(|&i| BatchMember { adapter: self.trace[i].adapter_id, rank: self.trace[i].rank })
                .collect(),
        )
    }

    /// Picks the queued requests for the next prefill, in arrival order. A
    /// request whose adapter would need a slot held by running requests waits.
    fn admit_prefill(&mut self, s: usize) -> Vec<usize> {
        let cap = self.fleet.max_prefill_batch.unwrap_or(usize::MAX);
        let server = &mut self.servers[s];
        if self.fleet.mode == ServingMode::Cached {
            let take = cap.min(server.queue.len());
            return server.queue.drain(..take).collect();
        }
        let mut pinned: BTreeSet<AdapterId> = server.running.iter().map(|&i| self.trace[i].adapter_id).collect();
        let mut members = Vec::new();
        // strict arrival order: a request that cannot get a slot holds back everything behind it
        while let Some(&i) = server.queue.front() {
            let a = self.trace[i].adapter_id;
            if members.len() >= cap || !(pinned.contains(&a) || pinned.len() < self.fleet.cache_slots) {
                break;
            }
            pinned.insert(a);
            members.push(i);
            server.queue.pop_front();
        }
        members
    }

    fn start_iteration(&mut self, s: usize) {
        debug_assert!(self.servers[s].busy.is_none());
        let members = if self.servers[s].queue.is_empty() { Vec::new() } else { self.admit_prefill(s) };
        let cost = if !members.is_empty() {
            let tokens: u64 = members.iter().map(|&i| self.trace[i].prompt_len).sum();
            let compute = self.fleet.prefill_model().predict(&self.batch_of(&members), tokens);
            let (loads, load_ms) = self.load_adapters(s, &members);
            let duration = prefill_duration(self.fleet, tokens as f64, compute, load_ms);
            for &i in &members {
                self.reqs[i].prefill_start = Some(self.now);
            }
            self.servers[s].busy = Some(Phase::Prefill(members));
            self.counts.prefill += 1;
            IterationCost { compute_ms: compute, duration_ms: duration, loads }
        } else if !self.servers[s].running.is_empty() {
            let members = self.servers[s].running.clone();
            let compute = self.fleet.decode_model().predict(&self.batch_of(&members), members.len() as u64);
            // running adapters stay pinned, so this only refreshes recency
            let (loads, load_ms) = self.load_adapters(s, &members);
            debug_assert_eq!(loads, 0);
            self.servers[s].busy = Some(Phase::Decode);
            self.counts.decode += 1;
            IterationCost { compute_ms: compute, duration_ms: compute + load_ms, loads }
        } else {
            return;
        };
        self.counts.adapter_loads += cost.loads as u64;
        let cold = ms_to_ticks(cost.cold_ms());
        if cold > 0 {
            let server = &self.servers[s];
            let prefilling: &[usize] = match &server.busy {
                Some(Phase::Prefill(m)) => m,
                _ => &[],
            };
            for &i in server.running.iter().chain(prefilling).chain(server.queue.iter()) {
                self.reqs[i].cold += cold;
            }
        }
        self.dirty[s] = true;
        let end = self.now + ms_to_ticks(cost.duration_ms).max(1);
        self.events.push(end, SimEvent::IterationEnd(s as u32));
    }

    fn complete(&mut self, s: usize, i: usize) {
        self.reqs[i].done = Some(self.now);
        let r = &self.trace[i];
        self.servers[s].reserved -= r.prompt_len + r.output_len;
    }

    fn finish_iteration(&mut self, s: usize) {
        let phase = self.servers[s].busy.take().expect("iteration end on an idle server");
        match phase {
            Phase::Prefill(members) => {
                for i in members {
                    self.reqs[i].first_token = Some(self.now);
                    self.reqs[i].generated = 1;
                    if self.trace[i].output_len <= 1 {
                        self.complete(s, i);
                    } else {
                        self.servers[s].running.push(i);
                    }
                }
            }
            Phase::Decode => {
                let running = std::mem::take(&mut self.servers[s].running);
                let mut still = Vec::with_capacity(running.len());
                for i in running {
                    self.reqs[i].generated += 1;
                    if self.reqs[i].generated >= self.trace[i].output_len {
                        self.complete(s, i);
                    } else {
                        still.push(i);
                    }
                }
                self.servers[s].running = still;
            }
        }
        self.dirty[s] = true;
        self.start_iteration(s);
    }

    fn into_result(self) -> SimResult {
        let records: Vec<RequestRecord> = self
            .trace
            .iter()
            .zip(&self.reqs)
            .enumerate()
            .map(|(id, (r, st))| {
                RequestRecord::new(id as u64, r, st.arrival_ticks(r), st.timestamps(), st.cold, st.dropped, self.slo_ms)
            })
            .collect();
        let queued = self.servers.iter().map(|s| s.queue.len()).sum::<usize>() as u64;
        let in_flight = self.reqs.iter().filter(|r| r.sched.is_some() && r.done.is_none()).count() as u64 - queued;
        let metrics = SimMetrics::from_records(&records, in_flight, queued, self.counts, self.slo_ms);
        SimResult { metrics, records, decisions: self.decisions }
    }
}

impl ReqState {
    fn arrival_ticks(&self, r: &TraceRequest) -> Tick {
        ms_to_ticks(r.arrival_ms)
    }

    fn timestamps(&self) -> [Option<Tick>; 4] {
        [self.sched, self.prefill_start, self.first_token, self.done]
    }
}

/// Prefill iteration length under the fleet's serving mode, given its
/// load-free compute time and the adapter load time it needs.
pub fn prefill_duration(fleet: &FleetConfig, tokens: f64, compute_ms: f64, load_ms: f64) -> f64 {
    if load_ms <= 0.0 {
        return compute_ms;
    }
    match fleet.mode {
        ServingMode::Cached => compute_ms,
        ServingMode::OnDmd => load_ms + compute_ms,
        ServingMode::Assisted => overlap_prefill_end(tokens, load_ms, fleet.cpu_assist_rate, tokens / compute_ms),
    }
}

/// Runs `trace` through a fleet routed by `sched`.
pub fn simulate_trace(
    fleet: &FleetConfig,
    trace: &[TraceRequest],
    sched: SchedulerConfig,
) -> Result<SimResult, SimError> {
    Simulation::new(fleet, trace, sched)?.run()
}
