//! Data, tensor, pipeline and expert parallelism, and their configuration.

use serde::{Deserialize, Serialize};

use crate::collectives::{allreduce_mean, allreduce_sum, CollectiveAlgorithm, WorkerGroup};
use crate::compression::{decompress, CompressorConfig, ErrorFeedbackState};
use crate::error::{Error, Result};
use crate::numerics::{mix64, vec_axpy, DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Sync,
    Async,
}

/// Degrees of each parallelism dimension plus how gradients move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub data_degree: usize,
    pub tensor_degree: usize,
    pub pipeline_stages: usize,
    pub micro_batches: usize,
    pub mode: ExecutionMode,
    pub collective: CollectiveAlgorithm,
    pub compressor: CompressorConfig,
    pub overlap_fraction: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            data_degree: 1,
            tensor_degree: 1,
            pipeline_stages: 1,
            micro_batches: 1,
            mode: ExecutionMode::Sync,
            collective: CollectiveAlgorithm::Ring,
            compressor: CompressorConfig::None,
            overlap_fraction: 0.0,
        }
    }
}

impl StrategyConfig {
    pub fn data_parallel(p: usize) -> Self {
        Self {
            data_degree: p,
            ..Self::default()
        }
    }

    /// Devices needed: one per (replica, stage, tensor shard).
    pub fn devices(&self) -> usize {
        self.data_degree * self.tensor_degree * self.pipeline_stages
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("data_degree", self.data_degree),
            ("tensor_degree", self.tensor_degree),
            ("pipeline_stages", self.pipeline_stages),
            ("micro_batches", self.micro_batches),
        ] {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidArgument(format!(
                "overlap_fraction {} outside [0, 1]",
                self.overlap_fraction
            )));
        }
        self.compressor.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Plain SGD: `params - lr * g`.
pub fn sgd_step(params: &DenseVector, g: &DenseVector, lr: f64) -> Result<DenseVector> {
    vec_axpy(-lr, g, params)
}

/// One synchronous data-parallel update from per-worker gradients.
///
/// With a compressor, each worker's gradient goes through its own
/// error-feedback state and is decompressed before the dense mean.
/// `feedback` is filled with zero residuals on first use.
pub fn sync_data_parallel_step(
    workers: &WorkerGroup,
    params: &DenseVector,
    lr: f64,
    cfg: &StrategyConfig,
    feedback: &mut Vec<ErrorFeedbackState>,
) -> Result<DenseVector> {
    workers.buffers()[0].ensure_dim(params.dim())?;
    let mean = match cfg.compressor {
        CompressorConfig::None => allreduce_mean(workers, cfg.collective)?,
        ref comp => {
            if feedback.is_empty() {
                *feedback = vec![ErrorFeedbackState::new(params.dim()); workers.workers()];
            }
            if feedback.len() != workers.workers() {
                return Err(Error::DimensionMismatch {
                    expected: workers.workers(),
                    actual: feedback.len(),
                });
            }
            let sent = workers
                .buffers()
                .iter()
                .zip(feedback.iter_mut())
                .map(|(g, ef)| decompress(&ef.step(g, comp)?))
                .collect::<Result<Vec<_>>>()?;
            let group = WorkerGroup::with_layout(sent, workers.layout())?;
            allreduce_mean(&group, cfg.collective)?
        }
    };
    sgd_step(params, &mean, lr)
}

/// Staleness-damped update: `params - lr * g / (1 + staleness)`.
pub fn async_step(
    params: &DenseVector,
    g: &DenseVector,
    staleness: usize,
    lr: f64,
) -> Result<DenseVector> {
    vec_axpy(-lr / (1.0 + staleness as f64), g, params)
}

/// Counts global updates since each worker last pulled parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StalenessTracker {
    version: u64,
    pulled: Vec<u64>,
}

impl StalenessTracker {
    pub fn new(workers: usize) -> Self {
        Self {
            version: 0,
            pulled: vec![0; workers],
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Worker reads the current parameters.
    pub fn pull(&mut self, worker: usize) {
        self.pulled[worker] = self.version;
    }

    /// Worker reads parameters `lag` updates old (clamped at version 0).
    pub fn pull_lagged(&mut self, worker: usize, lag: u64) -> u64 {
        let v = self.version.saturating_sub(lag);
        self.pulled[worker] = v;
        v
    }

    pub fn record_update(&mut self) {
        self.version += 1;
    }

    pub fn staleness(&self, worker: usize) -> usize {
        (self.version - self.pulled[worker]) as usize
    }
}

/// Round-robin async order: step `t` belongs to worker `t mod P`, which
/// reads parameters `delays[p mod delays.len()]` updates old.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayPattern {
    pub delays: Vec<usize>,
}

impl Default for DelayPattern {
    fn default() -> Self {
        Self {
            delays: vec![0, 1, 2, 3],
        }
    }
}

impl DelayPattern {
    pub fn worker_for_step(&self, step: usize, workers: usize) -> usize {
        step % workers
    }

    pub fn delay_for(&self, worker: usize) -> usize {
        if self.delays.is_empty() {
            0
        } else {
            self.delays[worker % self.delays.len()]
        }
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }
}

/// `a * x` with columns of `a` (and entries of `x`) split across
/// `shards` devices; partial products are summed like an All-Reduce.
pub fn tensor_parallel_matmul(a: &DenseMatrix, x: &DenseVector, shards: usize) -> Result<DenseVector> {
    if shards == 0 {
        return Err(Error::InvalidArgument("tensor degree must be >= 1".into()));
    }
    if a.cols() != x.dim() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} columns, vector has {} entries",
            a.cols(),
            x.dim()
        )));
    }
    let width = a.cols().div_ceil(shards).max(1);
    let partials = (0..shards)
        .map(|t| {
            // the final shard is zero padded up to `width`
            let start = (t * width).min(a.cols());
            let end = ((t + 1) * width).min(a.cols());
            let block = a.column_block(start, end);
            let xs = DenseVector::new(x.as_slice()[start..end].to_vec())?;
            block.mul_vec(&xs)
        })
        .collect::<Result<Vec<_>>>()?;
    let group = WorkerGroup::new(partials)?;
    DenseVector::new(allreduce_sum(&group, CollectiveAlgorithm::Naive)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineOp {
    pub stage: usize,
    pub micro_batch: usize,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSchedule {
    stages: usize,
    micro_batches: usize,
    ops: Vec<PipelineOp>,
}

impl PipelineSchedule {
    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn micro_batches(&self) -> usize {
        self.micro_batches
    }

    pub fn ops(&self) -> &[PipelineOp] {
        &self.ops
    }

    pub fn span(&self) -> f64 {
        self.ops.iter().map(|o| o.end).fold(0.0, f64::max)
    }

    pub fn busy_time(&self, stage: usize) -> f64 {
        self.ops
            .iter()
            .filter(|o| o.stage == stage)
            .map(|o| o.end - o.start)
            .sum()
    }

    fn find(&self, stage: usize, micro_batch: usize, phase: Phase) -> Option<&PipelineOp> {
        self.ops
            .iter()
            .find(|o| o.stage == stage && o.micro_batch == micro_batch && o.phase == phase)
    }

    /// Checks per-stage exclusivity and cross-stage dependencies.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("pipeline schedule: {msg}")));
        if self.ops.len() != 2 * self.stages * self.micro_batches {
            return bad(format!("{} ops for {}x{}", self.ops.len(), self.stages, self.micro_batches));
        }
        for s in 0..self.stages {
            let mut own: Vec<&PipelineOp> = self.ops.iter().filter(|o| o.stage == s).collect();
            own.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in own.windows(2) {
                if w[1].start < w[0].end {
                    return bad(format!("stage {s} runs two ops at once"));
                }
            }
        }
        for b in 0..self.micro_batches {
            for s in 0..self.stages {
                let (Some(f), Some(bw)) = (
                    self.find(s, b, Phase::Forward),
                    self.find(s, b, Phase::Backward),
                ) else {
                    return bad(format!("missing op for stage {s}, micro-batch {b}"));
                };
                if bw.start < f.end {
                    return bad(format!("backward before forward at stage {s}, micro-batch {b}"));
                }
                if s + 1 < self.stages {
                    let next_f = self.find(s + 1, b, Phase::Forward).unwrap();
                    let next_b = self.find(s + 1, b, Phase::Backward).unwrap();
                    if next_f.start < f.end {
                        return bad(format!("forward of stage {} starts early", s + 1));
                    }
                    if bw.start < next_b.end {
                        return bad(format!("backward of stage {s} starts early"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fill-drain schedule with uniform per-stage costs.
pub fn build_pipeline_schedule(
    stages: usize,
    micro_batches: usize,
    fwd_cost: f64,
    bwd_cost: f64,
) -> Result<PipelineSchedule> {
    build_pipeline_schedule_with(
        &vec![fwd_cost; stages],
        &vec![bwd_cost; stages],
        &vec![0.0; stages.saturating_sub(1)],
        micro_batches,
    )
}

/// Fill-drain schedule: every stage runs all forwards in micro-batch order,
/// then all backwards in reverse order. `transfer[s]` delays hand-offs
/// across the boundary between stage `s` and `s + 1` in both directions.
#[allow(clippy::needless_range_loop)]
pub fn build_pipeline_schedule_with(
    fwd: &[f64],
    bwd: &[f64],
    transfer: &[f64],
    micro_batches: usize,
) -> Result<PipelineSchedule> {
    let stages = fwd.len();
    if stages == 0 || micro_batches == 0 {
        return Err(Error::InvalidArgument(
            "pipeline needs at least one stage and one micro-batch".into(),
        ));
    }
    if bwd.len() != stages || transfer.len() + 1 != stages {
        return Err(Error::ShapeMismatch(format!(
            "{} stages, {} backward costs, {} transfers",
            stages,
            bwd.len(),
            transfer.len()
        )));
    }
    let ok = |c: &f64| c.is_finite() && *c >= 0.0;
    if !(fwd.iter().all(ok) && bwd.iter().all(ok) && transfer.iter().all(ok)) {
        return Err(Error::InvalidArgument("pipeline costs must be finite and >= 0".into()));
    }

    let mut ops = Vec::with_capacity(2 * stages * micro_batches);
    let mut fwd_end = vec![vec![0.0; micro_batches]; stages];
    let mut free = vec![0.0f64; stages];
    for b in 0..micro_batches {
        for s in 0..stages {
            let ready = if s == 0 { 0.0 } else { fwd_end[s - 1][b] + transfer[s - 1] };
            let start = ready.max(free[s]);
            let end = start + fwd[s];
            fwd_end[s][b] = end;
            free[s] = end;
            ops.push(PipelineOp {
                stage: s,
                micro_batch: b,
                phase: Phase::Forward,
                start,
                end,
            });
        }
    }
    let mut bwd_end = vec![vec![0.0; micro_batches]; stages];
    for b in (0..micro_batches).rev() {
        for s in (0..stages).rev() {
            let ready = if s + 1 == stages {
                0.0
            } else {
                bwd_end[s + 1][b] + transfer[s]
            };
            let start = ready.max(free[s]);
            let end = start + bwd[s];
            bwd_end[s][b] = end;
            free[s] = end;
            ops.push(PipelineOp {
                stage: s,
                micro_batch: b,
                phase: Phase::Backward,
                start,
                end,
            });
        }
    }
    Ok(PipelineSchedule {
        stages,
        micro_batches,
        ops,
    })
}

/// Idle stage-time over total stage-time, counted from the schedule.
pub fn bubble_fraction(sched: &PipelineSchedule) -> f64 {
    let span = sched.span();
    if span <= 0.0 {
        return 0.0;
    }
    let total = span * sched.stages as f64;
    let busy: f64 = (0..sched.stages).map(|s| sched.busy_time(s)).sum();
    ((total - busy) / total).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub active_k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.active_k == 0 || self.active_k > self.num_experts {
            return Err(Error::InvalidArgument(format!(
                "active_k = {} must lie in [1, {}]",
                self.active_k, self.num_experts
            )));
        }
        Ok(())
    }

    /// Deterministic gate score of `expert` for `input`.
    pub fn score(&self, input: u64, expert: usize) -> u64 {
        mix64(mix64(mix64(self.seed) ^ input) ^ expert as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadBalanceReport {
    pub counts: Vec<usize>,
    pub imbalance: f64,
}

/// Top-`k` experts per input by gate score (ties go to the lower expert id).
pub fn moe_route(inputs: &[u64], cfg: &MoEConfig) -> Result<(Vec<Vec<usize>>, LoadBalanceReport)> {
    cfg.validate()?;
    let mut counts = vec![0usize; cfg.num_experts];
    let routes: Vec<Vec<usize>> = inputs
        .iter()
        .map(|&input| {
            let mut experts: Vec<usize> = (0..cfg.num_experts).collect();
            experts.sort_by(|&a, &b| {
                cfg.score(input, b)
                    .cmp(&cfg.score(input, a))
                    .then(a.cmp(&b))
            });
            experts.truncate(cfg.active_k);
            experts.sort_unstable();
            for &e in &experts {
                counts[e] += 1;
            }
            experts
        })
        .collect();
    let total: usize = counts.iter().sum();
    let imbalance = if total == 0 {
        1.0
    } else {
        let mean = total as f64 / cfg.num_experts as f64;
        *counts.iter().max().unwrap() as f64 / mean
    };
    Ok((routes, LoadBalanceReport { counts, imbalance }))
}
