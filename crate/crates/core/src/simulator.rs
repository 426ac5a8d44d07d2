//! Discrete-event timing model of one training iteration on a cluster.
//!
//! Devices are laid out replica-major: the device for replica `p`, pipeline
//! stage `s` and tensor shard `t` is slot `(p * S + s) * T + t` of the
//! topology. Each replica runs a fill-drain pipeline over its micro-batches,
//! then every (stage, shard) group averages its gradient shard across the
//! replicas. Only time is modeled here; numerical effects live in the trainer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::collectives::{comm_cost_placed, CollectiveAlgorithm, Topology};
use crate::error::{Error, Result};
use crate::strategies::{
    bubble_fraction, build_pipeline_schedule_with, ExecutionMode, Phase, PipelineSchedule,
    StrategyConfig,
};

fn default_forward_fraction() -> f64 {
    1.0 / 3.0
}

fn default_device_memory() -> f64 {
    32e9
}

/// Workload knobs of the timing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Forward plus backward seconds for one sample on one device.
    pub compute_time_per_sample: f64,
    /// Share of a stage's compute spent in the forward pass.
    #[serde(default = "default_forward_fraction")]
    pub forward_fraction: f64,
    /// Share of model compute on each pipeline stage; empty means even.
    #[serde(default)]
    pub stage_cost_split: Vec<f64>,
    /// Activation bytes per sample exchanged at layer and stage boundaries.
    pub activation_bytes_per_sample: f64,
    /// Dense gradient size of the whole model.
    pub gradient_bytes: f64,
    /// Fixed per-iteration host overhead (optimizer step, launch, barrier).
    #[serde(default)]
    pub step_overhead: f64,
    #[serde(default = "default_device_memory")]
    pub device_memory_bytes: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            compute_time_per_sample: 1e-3,
            forward_fraction: default_forward_fraction(),
            stage_cost_split: Vec::new(),
            activation_bytes_per_sample: 1e6,
            gradient_bytes: 1e8,
            step_overhead: 0.0,
            device_memory_bytes: default_device_memory(),
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("compute_time_per_sample", self.compute_time_per_sample),
            ("activation_bytes_per_sample", self.activation_bytes_per_sample),
            ("gradient_bytes", self.gradient_bytes),
            ("step_overhead", self.step_overhead),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::InvalidArgument(format!("costs.{name} = {x} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.forward_fraction) {
            return Err(Error::InvalidArgument(format!(
                "costs.forward_fraction = {} outside [0, 1]",
                self.forward_fraction
            )));
        }
        if !(self.device_memory_bytes.is_finite() && self.device_memory_bytes > 0.0) {
            return Err(Error::InvalidArgument("costs.device_memory_bytes must be > 0".into()));
        }
        if !self.stage_cost_split.is_empty() {
            if self.stage_cost_split.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
                return Err(Error::InvalidArgument("costs.stage_cost_split has a negative entry".into()));
            }
            let total: f64 = self.stage_cost_split.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "costs.stage_cost_split sums to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    fn stage_fractions(&self, stages: usize) -> Result<Vec<f64>> {
        if self.stage_cost_split.is_empty() {
            return Ok(vec![1.0 / stages as f64; stages]);
        }
        if self.stage_cost_split.len() != stages {
            return Err(Error::ShapeMismatch(format!(
                "stage_cost_split has {} entries for {stages} stages",
                self.stage_cost_split.len()
            )));
        }
        Ok(self.stage_cost_split.clone())
    }
}

/// Time accounting of one device over one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DeviceAccount {
    /// Time with compute running (including compute that hides comm).
    pub busy: f64,
    /// Time blocked on communication with no compute running.
    pub comm_blocked: f64,
    /// Communication running underneath compute.
    pub overlapped: f64,
    pub idle: f64,
}

/// Device-averaged time composition of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationProfile {
    pub wall_time: f64,
    pub compute_time: f64,
    /// All communication time, overlapped or not.
    pub comm_time: f64,
    pub overlapped_time: f64,
    pub idle_time: f64,
    pub bubble_fraction: f64,
    pub memory_utilization: f64,
    pub devices: Vec<DeviceAccount>,
}

impl IterationProfile {
    /// Communication the iteration actually waits for.
    pub fn exposed_comm(&self) -> f64 {
        self.comm_time - self.overlapped_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Forward,
    Backward,
    TensorAllreduce,
    PipelineSend,
    GradientAllreduce,
    Overhead,
}

impl SegmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SegmentKind::Forward => "forward",
            SegmentKind::Backward => "backward",
            SegmentKind::TensorAllreduce => "tensor_allreduce",
            SegmentKind::PipelineSend => "pipeline_send",
            SegmentKind::GradientAllreduce => "gradient_allreduce",
            SegmentKind::Overhead => "overhead",
        }
    }

    fn activity(&self) -> Option<Activity> {
        match self {
            SegmentKind::Forward | SegmentKind::Backward => Some(Activity::Compute),
            SegmentKind::TensorAllreduce
            | SegmentKind::PipelineSend
            | SegmentKind::GradientAllreduce => Some(Activity::Comm),
            SegmentKind::Overhead => None,
        }
    }
}

/// One line of the timeline trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelineRecord {
    pub iter: usize,
    pub device: usize,
    pub event_kind: SegmentKind,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Activity {
    Compute,
    Comm,
}

/// Queue entry kinds; at equal time and device, ends drain before starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    ComputeEnd,
    CommEnd,
    ComputeStart,
    CommStart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub device: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    event: Event,
    seq: u64,
}

impl Queued {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.event
            .time
            .total_cmp(&other.event.time)
            .then(self.event.device.cmp(&other.event.device))
            .then(self.event.kind.cmp(&other.event.kind))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

/// Events ordered by time, then device, then kind, then insertion.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        self.heap.push(Queued { event, seq: self.seq });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|q| q.event)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DeviceState {
    clock: f64,
    compute: u32,
    comm: u32,
    account: DeviceAccount,
}

impl DeviceState {
    fn advance(&mut self, to: f64) {
        let dt = to - self.clock;
        if dt > 0.0 {
            if self.compute > 0 {
                self.account.busy += dt;
                if self.comm > 0 {
                    self.account.overlapped += dt;
                }
            } else if self.comm > 0 {
                self.account.comm_blocked += dt;
            } else {
                self.account.idle += dt;
            }
            self.clock = to;
        }
    }
}

/// Replays timeline segments through the event queue and returns each
/// device's busy / comm-blocked / idle split up to `wall`.
fn account_devices(records: &[TimelineRecord], devices: usize, wall: f64) -> Vec<DeviceAccount> {
    let mut queue = EventQueue::new();
    for r in records {
        let Some(activity) = r.event_kind.activity() else {
            continue;
        };
        if r.end_s <= r.start_s {
            continue;
        }
        let (start, end) = match activity {
            Activity::Compute => (EventKind::ComputeStart, EventKind::ComputeEnd),
            Activity::Comm => (EventKind::CommStart, EventKind::CommEnd),
        };
        queue.push(Event { time: r.start_s, device: r.device, kind: start });
        queue.push(Event { time: r.end_s, device: r.device, kind: end });
    }
    let mut state = vec![DeviceState::default(); devices];
    let mut last_time = f64::NEG_INFINITY;
    while let Some(ev) = queue.pop() {
        debug_assert!(ev.time >= last_time);
        last_time = ev.time;
        let d = &mut state[ev.device];
        d.advance(ev.time);
        match ev.kind {
            EventKind::ComputeStart => d.compute += 1,
            EventKind::ComputeEnd => d.compute -= 1,
            EventKind::CommStart => d.comm += 1,
            EventKind::CommEnd => d.comm -= 1,
        }
    }
    state
        .into_iter()
        .map(|mut d| {
            d.advance(wall);
            d.account
        })
        .collect()
}

/// Full trace of one iteration: the profile plus every timeline segment.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub profile: IterationProfile,
    pub records: Vec<TimelineRecord>,
}

fn device_slot(p: usize, s: usize, t: usize, strategy: &StrategyConfig) -> usize {
    (p * strategy.pipeline_stages + s) * strategy.tensor_degree + t
}

/// Bytes of the gradient shard each device sends, after compression.
pub fn gradient_message_bytes(strategy: &StrategyConfig, costs: &CostParams) -> Result<f64> {
    let shard = costs.gradient_bytes / (strategy.tensor_degree * strategy.pipeline_stages) as f64;
    let entries = ((shard / 8.0).round() as usize).max(1);
    Ok(shard / strategy.compressor.modeled_ratio(entries)?)
}

pub fn trace_iteration(
    strategy: &StrategyConfig,
    topo: &Topology,
    costs: &CostParams,
    global_batch: usize,
) -> Result<IterationTrace> {
    strategy.validate()?;
    topo.validate()?;
    costs.validate()?;
    if global_batch == 0 {
        return Err(Error::InvalidArgument("global batch must be >= 1".into()));
    }
    let devices = strategy.devices();
    if devices > topo.total_devices() {
        return Err(Error::Infeasible(format!(
            "strategy needs {devices} devices, topology has {}",
            topo.total_devices()
        )));
    }
    let (p_deg, t_deg, s_deg, m_deg) = (
        strategy.data_degree,
        strategy.tensor_degree,
        strategy.pipeline_stages,
        strategy.micro_batches,
    );
    // a batch that does not divide evenly is padded up on every replica
    let replica_batch = global_batch.div_ceil(p_deg) as f64;
    let micro = replica_batch / m_deg as f64;
    let fractions = costs.stage_fractions(s_deg)?;
    let act_bytes = costs.activation_bytes_per_sample * micro;

    let mut records = Vec::new();
    let mut schedules: Vec<PipelineSchedule> = Vec::with_capacity(p_deg);
    for p in 0..p_deg {
        let mut seg_f = Vec::with_capacity(s_deg);
        let mut seg_b = Vec::with_capacity(s_deg);
        for (s, frac) in fractions.iter().enumerate() {
            let stage_compute = micro * costs.compute_time_per_sample * frac / t_deg as f64;
            let shards: Vec<usize> = (0..t_deg).map(|t| device_slot(p, s, t, strategy)).collect();
            let tp = comm_cost_placed(CollectiveAlgorithm::Ring, act_bytes, &shards, topo)?;
            let send = |to: usize| -> f64 {
                let pair = [device_slot(p, s, 0, strategy), device_slot(p, to, 0, strategy)];
                let (bw, lat) = topo.link(topo.span_class(&pair));
                lat + act_bytes / bw
            };
            let send_f = if s + 1 < s_deg { send(s + 1) } else { 0.0 };
            let send_b = if s > 0 { send(s - 1) } else { 0.0 };
            seg_f.push([stage_compute * costs.forward_fraction, tp, send_f]);
            seg_b.push([stage_compute * (1.0 - costs.forward_fraction), tp, send_b]);
        }
        let dur = |segs: &[[f64; 3]]| segs.iter().map(|x| x[0] + x[1] + x[2]).collect::<Vec<_>>();
        let sched = build_pipeline_schedule_with(
            &dur(&seg_f),
            &dur(&seg_b),
            &vec![0.0; s_deg - 1],
            m_deg,
        )?;
        for op in sched.ops() {
            let (segs, kind) = match op.phase {
                Phase::Forward => (seg_f[op.stage], SegmentKind::Forward),
                Phase::Backward => (seg_b[op.stage], SegmentKind::Backward),
            };
            let kinds = [kind, SegmentKind::TensorAllreduce, SegmentKind::PipelineSend];
            for t in 0..t_deg {
                let device = device_slot(p, op.stage, t, strategy);
                let mut at = op.start;
                for (len, k) in segs.iter().zip(kinds) {
                    if *len > 0.0 {
                        records.push(TimelineRecord {
                            iter: 0,
                            device,
                            event_kind: k,
                            start_s: at,
                            end_s: at + len,
                        });
                    }
                    at += len;
                }
            }
        }
        schedules.push(sched);
    }
    let span = schedules.iter().map(|s| s.span()).fold(0.0, f64::max);

    let mut barrier = span;
    if p_deg > 1 {
        let msg = gradient_message_bytes(strategy, costs)?;
        for s in 0..s_deg {
            for t in 0..t_deg {
                let group: Vec<usize> = (0..p_deg).map(|p| device_slot(p, s, t, strategy)).collect();
                let g = comm_cost_placed(strategy.collective, msg, &group, topo)?;
                let start = match strategy.mode {
                    ExecutionMode::Sync => span - strategy.overlap_fraction * span.min(g),
                    // the reduction of the previous step's gradients runs under this step
                    ExecutionMode::Async => 0.0,
                };
                barrier = barrier.max(start + g);
                for &device in &group {
                    if g > 0.0 {
                        records.push(TimelineRecord {
                            iter: 0,
                            device,
                            event_kind: SegmentKind::GradientAllreduce,
                            start_s: start,
                            end_s: start + g,
                        });
                    }
                }
            }
        }
    }
    let wall = barrier + costs.step_overhead;
    if costs.step_overhead > 0.0 {
        for device in 0..devices {
            records.push(TimelineRecord {
                iter: 0,
                device,
                event_kind: SegmentKind::Overhead,
                start_s: barrier,
                end_s: wall,
            });
        }
    }
    if !(wall.is_finite() && wall > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "iteration time {wall} is not positive; check the cost parameters"
        )));
    }

    let accounts = account_devices(&records, devices, wall);
    let n = devices as f64;
    let mean = |f: fn(&DeviceAccount) -> f64| accounts.iter().map(f).sum::<f64>() / n;
    let shard_params = costs.gradient_bytes / (t_deg * s_deg) as f64;
    let memory = 4.0 * shard_params + costs.activation_bytes_per_sample * replica_batch / t_deg as f64;
    let profile = IterationProfile {
        wall_time: wall,
        compute_time: mean(|a| a.busy),
        comm_time: mean(|a| a.comm_blocked + a.overlapped),
        overlapped_time: mean(|a| a.overlapped),
        idle_time: mean(|a| a.idle),
        bubble_fraction: bubble_fraction(&schedules[0]),
        memory_utilization: memory / costs.device_memory_bytes,
        devices: accounts,
    };
    records.sort_by(|a, b| {
        a.device
            .cmp(&b.device)
            .then(a.start_s.total_cmp(&b.start_s))
            .then(a.event_kind.cmp(&b.event_kind))
    });
    Ok(IterationTrace { profile, records })
}

/// Time composition of one iteration of `strategy` over `global_batch` samples.
pub fn simulate_iteration(
    strategy: &StrategyConfig,
    topo: &Topology,
    costs: &CostParams,
    global_batch: usize,
) -> Result<IterationProfile> {
    trace_iteration(strategy, topo, costs, global_batch).map(|t| t.profile)
}

/// Report metrics for a run, matching the columns of the throughput table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub throughput: f64,
    pub speedup: f64,
    pub device_utilization: f64,
    pub comm_overhead_ms: f64,
    pub comm_share: f64,
    pub memory_utilization: f64,
    pub bubble_fraction: f64,
    pub iteration_time: f64,
    pub devices: usize,
}

/// Runs `iterations` iterations and reports against a one-device baseline
/// at the same batch and costs.
pub fn simulate_run(
    strategy: &StrategyConfig,
    topo: &Topology,
    costs: &CostParams,
    global_batch: usize,
    iterations: usize,
) -> Result<SimReport> {
    simulate_run_traced(strategy, topo, costs, global_batch, iterations).map(|(r, _)| r)
}

pub fn simulate_run_traced(
    strategy: &StrategyConfig,
    topo: &Topology,
    costs: &CostParams,
    global_batch: usize,
    iterations: usize,
) -> Result<(SimReport, Vec<TimelineRecord>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut records = Vec::new();
    let mut profiles = Vec::with_capacity(iterations);
    let mut offset = 0.0;
    for iter in 0..iterations {
        let trace = trace_iteration(strategy, topo, costs, global_batch)?;
        records.extend(trace.records.into_iter().map(|r| TimelineRecord {
            iter,
            start_s: r.start_s + offset,
            end_s: r.end_s + offset,
            ..r
        }));
        offset += trace.profile.wall_time;
        profiles.push(trace.profile);
    }
    let n = iterations as f64;
    let wall = profiles.iter().map(|p| p.wall_time).sum::<f64>() / n;
    let exposed = profiles.iter().map(|p| p.exposed_comm()).sum::<f64>() / n;
    let busy = profiles.iter().map(|p| p.compute_time).sum::<f64>() / n;
    let throughput = global_batch as f64 / wall;

    let baseline = simulate_iteration(&StrategyConfig::default(), topo, costs, global_batch)?;
    let baseline_throughput = global_batch as f64 / baseline.wall_time;
    let report = SimReport {
        throughput,
        speedup: throughput / baseline_throughput,
        device_utilization: (busy / wall).clamp(0.0, 1.0),
        comm_overhead_ms: exposed * 1e3,
        comm_share: comm_share(&profiles)?,
        memory_utilization: profiles[0].memory_utilization,
        bubble_fraction: profiles[0].bubble_fraction,
        iteration_time: wall,
        devices: strategy.devices(),
    };
    Ok((report, records))
}

/// Mean non-overlapped communication over wall time.
pub fn comm_share(profiles: &[IterationProfile]) -> Result<f64> {
    if profiles.is_empty() {
        return Err(Error::Empty("no iteration profiles"));
    }
    let total: f64 = profiles.iter().map(|p| p.exposed_comm() / p.wall_time).sum();
    Ok((total / profiles.len() as f64).clamp(0.0, 1.0))
}

/// Communication share per labeled strategy.
pub fn comm_share_breakdown(
    labeled: &[(String, Vec<IterationProfile>)],
) -> Result<Vec<(String, f64)>> {
    if labeled.is_empty() {
        return Err(Error::Empty("no strategies to break down"));
    }
    labeled
        .iter()
        .map(|(name, profiles)| Ok((name.clone(), comm_share(profiles)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    ComputeTimePerSample,
    StepOverhead,
    GradientBytes,
    ActivationBytesPerSample,
}

impl FreeParam {
    fn get(&self, c: &CostParams) -> f64 {
        match self {
            FreeParam::ComputeTimePerSample => c.compute_time_per_sample,
            FreeParam::StepOverhead => c.step_overhead,
            FreeParam::GradientBytes => c.gradient_bytes,
            FreeParam::ActivationBytesPerSample => c.activation_bytes_per_sample,
        }
    }

    fn set(&self, c: &mut CostParams, v: f64) {
        match self {
            FreeParam::ComputeTimePerSample => c.compute_time_per_sample = v,
            FreeParam::StepOverhead => c.step_overhead = v,
            FreeParam::GradientBytes => c.gradient_bytes = v,
            FreeParam::ActivationBytesPerSample => c.activation_bytes_per_sample = v,
        }
    }

    /// Starting point when the initial value is zero.
    fn seed_value(&self) -> f64 {
        match self {
            FreeParam::ComputeTimePerSample => 1e-3,
            FreeParam::StepOverhead => 1e-2,
            FreeParam::GradientBytes => 1e8,
            FreeParam::ActivationBytesPerSample => 1e6,
        }
    }
}

/// An observed throughput for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub name: String,
    pub strategy: StrategyConfig,
    pub global_batch: usize,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: CostParams,
    /// `simulated / observed - 1` per target.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl Calibration {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Residual level at which a fit counts as exact and refitting is a no-op.
const CONVERGED: f64 = 1e-10;

/// Fits the `free` parameters so simulated throughputs match the targets in
/// relative least squares. Levenberg-Marquardt in log space with a central
/// difference Jacobian; fully deterministic.
pub fn calibrate(
    targets: &[CalibrationTarget],
    free: &[FreeParam],
    topo: &Topology,
    initial: &CostParams,
) -> Result<Calibration> {
    if targets.is_empty() {
        return Err(Error::Calibration("no calibration targets".into()));
    }
    if free.is_empty() {
        return Err(Error::Calibration("no free parameters".into()));
    }
    if free.len() > targets.len() {
        return Err(Error::Calibration(format!(
            "{} free parameters but only {} targets",
            free.len(),
            targets.len()
        )));
    }
    for (i, f) in free.iter().enumerate() {
        if free[..i].contains(f) {
            return Err(Error::Calibration(format!("{f:?} listed twice")));
        }
    }
    for t in targets {
        if !(t.throughput.is_finite() && t.throughput > 0.0) {
            return Err(Error::Calibration(format!("target {} has throughput {}", t.name, t.throughput)));
        }
        t.strategy.validate()?;
    }
    if !targets.iter().any(|t| t.strategy.devices() == 1) {
        return Err(Error::Calibration("targets must include a one-device baseline".into()));
    }
    if targets.len() > 1
        && targets
            .iter()
            .all(|t| t.strategy == targets[0].strategy && t.global_batch == targets[0].global_batch)
    {
        return Err(Error::Calibration("all targets describe the same configuration".into()));
    }
    initial.validate()?;

    let residuals = |x: &[f64]| -> Result<Vec<f64>> {
        let mut c = initial.clone();
        for (f, v) in free.iter().zip(x) {
            f.set(&mut c, v.exp());
        }
        targets
            .iter()
            .map(|t| {
                let prof = simulate_iteration(&t.strategy, topo, &c, t.global_batch)?;
                Ok(t.global_batch as f64 / prof.wall_time / t.throughput - 1.0)
            })
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let max_abs = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut x: Vec<f64> = free
        .iter()
        .map(|f| {
            let v = f.get(initial);
            if v > 0.0 { v.ln() } else { f.seed_value().ln() }
        })
        .collect();
    let n = x.len();
    let mut r = residuals(&x)?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while max_abs(&r) > CONVERGED && iterations < 500 {
        iterations += 1;
        let h = 1e-6;
        let mut jac = vec![vec![0.0; n]; r.len()];
        for j in 0..n {
            let mut hi = x.clone();
            hi[j] += h;
            let mut lo = x.clone();
            lo[j] -= h;
            let (rh, rl) = (residuals(&hi)?, residuals(&lo)?);
            for i in 0..r.len() {
                jac[i][j] = (rh[i] - rl[i]) / (2.0 * h);
            }
        }
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..r.len() {
            for a in 0..n {
                jtr[a] += jac[i][a] * r[i];
                for b in 0..n {
                    jtj[a][b] += jac[i][a] * jac[i][b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut sys = jtj.clone();
            for (a, row) in sys.iter_mut().enumerate() {
                row[a] += lambda * (jtj[a][a] + 1e-12);
            }
            let rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let Some(step) = solve(sys, rhs) else {
                lambda *= 4.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            match residuals(&trial) {
                Ok(rt) if cost(&rt) < cost(&r) => {
                    x = trial;
                    r = rt;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !improved {
            break;
        }
    }

    let mut params = initial.clone();
    for (f, v) in free.iter().zip(&x) {
        f.set(&mut params, v.exp());
    }
    Ok(Calibration {
        params,
        residuals: r,
        iterations,
    })
}

/// Gaussian elimination with partial pivoting; `None` if singular.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
