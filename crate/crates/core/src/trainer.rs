//! Desk-scale recommendation training: interaction data, a matrix
//! factorisation model trained with a pairwise logistic loss, emulated
//! data-parallel workers and sampled top-K evaluation.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collectives::WorkerGroup;
use crate::compression::{decompress, ErrorFeedbackState};
use crate::error::{Error, Result};
use crate::numerics::{dot, DenseVector, SeededRng};
use crate::strategies::{
    async_step, sync_data_parallel_step, DelayPattern, ExecutionMode, HyperParams,
    StalenessTracker, StrategyConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    records: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
    duplicates_dropped: usize,
}

impl InteractionDataset {
    /// Builds a dataset from dense ids, dropping repeated triples.
    pub fn from_records(records: Vec<Interaction>, num_users: usize, num_items: usize) -> Result<Self> {
        let total = records.len();
        let mut seen = HashSet::with_capacity(total);
        let mut kept = Vec::with_capacity(total);
        for r in records {
            if r.user >= num_users || r.item >= num_items {
                return Err(Error::Dataset(format!(
                    "interaction ({}, {}) outside vocabulary {num_users} x {num_items}",
                    r.user, r.item
                )));
            }
            if seen.insert(r) {
                kept.push(r);
            }
        }
        Ok(Self {
            duplicates_dropped: total - kept.len(),
            records: kept,
            num_users,
            num_items,
        })
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    /// Writes `user_id,item_id,timestamp` CSV.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(["user_id", "item_id", "timestamp"]).map_err(csv_error)?;
        for r in &self.records {
            w.write_record([r.user.to_string(), r.item.to_string(), r.timestamp.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => Error::Io(io),
        (other, Some(line)) => Error::Parse {
            line,
            reason: format!("{other:?}"),
        },
        (other, None) => Error::Dataset(format!("{other:?}")),
    }
}

/// Reads a `user_id,item_id,timestamp` CSV. Raw ids are reindexed densely
/// in ascending order; repeated triples are dropped and counted.
pub fn load_dataset(path: &Path) -> Result<InteractionDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.iter().ne(["user_id", "item_id", "timestamp"]) {
        return Err(Error::Parse {
            line: 1,
            reason: format!(
                "expected header user_id,item_id,timestamp, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut raw = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, name: &str| -> Result<i64> {
            row[i].parse::<i64>().map_err(|_| Error::Parse {
                line,
                reason: format!("{name} {:?} is not an integer", &row[i]),
            })
        };
        raw.push((field(0, "user_id")?, field(1, "item_id")?, field(2, "timestamp")?));
    }
    if raw.is_empty() {
        return Err(Error::Dataset(format!("{} has no interactions", path.display())));
    }
    let users = dense_ids(raw.iter().map(|r| r.0));
    let items = dense_ids(raw.iter().map(|r| r.1));
    let records = raw
        .into_iter()
        .map(|(u, i, t)| Interaction {
            user: users[&u],
            item: items[&i],
            timestamp: t,
        })
        .collect();
    InteractionDataset::from_records(records, users.len(), items.len())
}

fn dense_ids(raw: impl Iterator<Item = i64>) -> BTreeMap<i64, usize> {
    let mut ids: BTreeMap<i64, usize> = raw.map(|x| (x, 0)).collect();
    for (n, v) in ids.values_mut().enumerate() {
        *v = n;
    }
    ids
}

/// Number of clusters whose users prefer a rotated slice of the catalogue.
const AFFINITY_CLUSTERS: usize = 8;
const SYNTHETIC_EPOCH: i64 = 1_600_000_000;

/// Interactions with Zipf(1.1) item popularity, uniform users and one
/// interaction per minute. Half the draws are rotated by the user's cluster
/// so that preferences are personal as well as popular.
pub fn generate_synthetic(
    num_users: usize,
    num_items: usize,
    num_interactions: usize,
    seed: u64,
) -> Result<InteractionDataset> {
    if num_users == 0 || num_items == 0 || num_interactions == 0 {
        return Err(Error::InvalidArgument("synthetic counts must be >= 1".into()));
    }
    let mut cdf = Vec::with_capacity(num_items);
    let mut total = 0.0;
    for rank in 0..num_items {
        total += 1.0 / ((rank + 1) as f64).powf(1.1);
        cdf.push(total);
    }
    let mut rng = SeededRng::new(seed);
    let records = (0..num_interactions)
        .map(|n| {
            let user = rng.below(num_users as u64) as usize;
            let target = rng.next_f64() * total;
            let rank = cdf.partition_point(|&c| c <= target).min(num_items - 1);
            let item = if rng.next_f64() < 0.5 {
                let shift = (user % AFFINITY_CLUSTERS) * num_items / AFFINITY_CLUSTERS;
                (rank + shift) % num_items
            } else {
                rank
            };
            Interaction {
                user,
                item,
                timestamp: SYNTHETIC_EPOCH + 60 * n as i64,
            }
        })
        .collect();
    InteractionDataset::from_records(records, num_users, num_items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChronoSplit {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
}

impl ChronoSplit {
    pub fn all(&self) -> impl Iterator<Item = &Interaction> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Orders by (timestamp, user, item) and cuts at `floor(r0 N)` and
/// `floor((r0 + r1) N)`.
pub fn chrono_split(ds: &InteractionDataset, ratios: (f64, f64, f64)) -> Result<ChronoSplit> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = ds.len();
    if n < 10 {
        return Err(Error::Dataset(format!("chronological split needs >= 10 interactions, got {n}")));
    }
    let mut sorted = ds.records.clone();
    sorted.sort_by_key(|r| (r.timestamp, r.user, r.item));
    let cut1 = ((a * n as f64) + 1e-9).floor() as usize;
    let cut2 = (((a + b) * n as f64) + 1e-9).floor() as usize;
    let test = sorted.split_off(cut2.min(n));
    let validation = sorted.split_off(cut1.min(cut2));
    Ok(ChronoSplit {
        train: sorted,
        validation,
        test,
        num_users: ds.num_users,
        num_items: ds.num_items,
    })
}

/// User and item embeddings stored as one flat parameter vector
/// (all users, then all items).
#[derive(Debug, Clone, PartialEq)]
pub struct RecModel {
    params: DenseVector,
    num_users: usize,
    num_items: usize,
    dim: usize,
}

const MODEL_MAGIC: &[u8; 4] = b"PSMF";
const MODEL_VERSION: u32 = 1;

impl RecModel {
    /// Entries uniform in [-0.01, 0.01].
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_users == 0 || num_items == 0 {
            return Err(Error::InvalidArgument("model sizes must be >= 1".into()));
        }
        let mut rng = SeededRng::new(seed);
        let values = (0..(num_users + num_items) * dim)
            .map(|_| rng.uniform(-0.01, 0.01))
            .collect();
        Self::from_params(DenseVector::new(values)?, num_users, num_items, dim)
    }

    pub fn from_params(params: DenseVector, num_users: usize, num_items: usize, dim: usize) -> Result<Self> {
        params.ensure_dim((num_users + num_items) * dim)?;
        params.check_finite("model parameters")?;
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        Ok(Self {
            params,
            num_users,
            num_items,
            dim,
        })
    }

    pub fn params(&self) -> &DenseVector {
        &self.params
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn user_offset(&self, u: usize) -> usize {
        u * self.dim
    }

    fn item_offset(&self, i: usize) -> usize {
        (self.num_users + i) * self.dim
    }

    pub fn user_embedding(&self, u: usize) -> &[f64] {
        let o = self.user_offset(u);
        &self.params.as_slice()[o..o + self.dim]
    }

    pub fn item_embedding(&self, i: usize) -> &[f64] {
        let o = self.item_offset(i);
        &self.params.as_slice()[o..o + self.dim]
    }

    fn with_params(&self, params: DenseVector) -> Self {
        Self { params, ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(28 + 8 * self.params.dim());
        bytes.extend_from_slice(MODEL_MAGIC);
        bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for n in [self.num_users, self.num_items, self.dim] {
            bytes.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for v in self.params.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |why: &str| Error::Dataset(format!("{}: {why}", path.display()));
        if bytes.len() < 32 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != MODEL_VERSION {
            return Err(bad("unsupported model version"));
        }
        let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        let (users, items, dim) = (word(8), word(16), word(24));
        let count = users
            .checked_add(items)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| bad("sizes overflow"))?;
        if bytes.len() != 32 + 8 * count {
            return Err(bad("truncated parameters"));
        }
        let values = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(DenseVector::new(values)?, users, items, dim)
    }
}

/// Anything that scores a (user, item) pair; higher ranks first.
pub trait Scorer {
    fn score(&self, user: usize, item: usize) -> f64;
}

impl Scorer for RecModel {
    fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.user_embedding(user), self.item_embedding(item))
    }
}

/// A (user, positive item, negative item) training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean pairwise logistic loss `-ln sigmoid(u . (v_pos - v_neg))` plus
/// `l2 / 2` times the squared norm of every embedding the triple touches,
/// and its gradient over the full parameter vector.
pub fn bpr_loss_and_grad(model: &RecModel, triples: &[Triple], l2: f64) -> Result<(f64, DenseVector)> {
    if triples.is_empty() {
        return Err(Error::Empty("gradient of an empty batch"));
    }
    let d = model.dim;
    let mut grad = vec![0.0; model.params.dim()];
    let scale = 1.0 / triples.len() as f64;
    let mut loss = 0.0;
    for t in triples {
        if t.user >= model.num_users || t.positive >= model.num_items || t.negative >= model.num_items {
            return Err(Error::InvalidArgument(format!("triple {t:?} outside the model vocabulary")));
        }
        let u = model.user_embedding(t.user);
        let vp = model.item_embedding(t.positive);
        let vn = model.item_embedding(t.negative);
        let x = dot(u, vp) - dot(u, vn);
        let reg = dot(u, u) + dot(vp, vp) + dot(vn, vn);
        loss += softplus(-x) + 0.5 * l2 * reg;
        let w = -sigmoid(-x) * scale;
        let (uo, po, no) = (
            model.user_offset(t.user),
            model.item_offset(t.positive),
            model.item_offset(t.negative),
        );
        for k in 0..d {
            grad[uo + k] += w * (vp[k] - vn[k]) + l2 * scale * u[k];
            grad[po + k] += w * u[k] + l2 * scale * vp[k];
            grad[no + k] += -w * u[k] + l2 * scale * vn[k];
        }
    }
    Ok((loss * scale, DenseVector::new(grad)?))
}

/// Knobs of a training run beyond the parallel strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub hyper: HyperParams,
    pub l2: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub delays: DelayPattern,
}

fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RecModel,
    pub loss_curve: Vec<LossPoint>,
    /// Largest violation of `new_residual == residual + g - sent` seen.
    pub feedback_max_error: f64,
    pub max_staleness: usize,
    pub updates: usize,
}

fn sample_batch(split: &ChronoSplit, rng: &mut SeededRng, size: usize) -> Vec<Triple> {
    (0..size)
        .map(|_| {
            let pos = split.train[rng.below(split.train.len() as u64) as usize];
            let mut negative = rng.below(split.num_items as u64) as usize;
            while split.num_items > 1 && negative == pos.item {
                negative = rng.below(split.num_items as u64) as usize;
            }
            Triple {
                user: pos.user,
                positive: pos.item,
                negative,
            }
        })
        .collect()
}

fn feedback_violation(
    before: &ErrorFeedbackState,
    g: &DenseVector,
    after: &ErrorFeedbackState,
    strategy: &StrategyConfig,
) -> Result<f64> {
    let corrected = before.residual().add(g)?;
    let sent = decompress(&strategy.compressor.compress(&corrected)?)?;
    let expected = corrected.sub(&sent)?;
    Ok(expected.sub(after.residual())?.max_abs())
}

/// Trains `model` on the training split with `P` emulated workers.
///
/// Every step draws one global batch (the draw depends only on the seed and
/// the step, not on `P`) and hands worker `p` the `p`-th equal shard. Sync
/// mode averages the shard gradients once per step. Async mode applies the
/// shards one at a time in round-robin order, each computed on parameters
/// `delays[p]` updates old and damped by its staleness. Each async update
/// uses `lr / P`, so a round of fresh shard updates equals one sync step.
pub fn train(
    model: RecModel,
    split: &ChronoSplit,
    strategy: &StrategyConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    strategy.validate()?;
    settings.hyper.validate()?;
    if strategy.tensor_degree != 1 || strategy.pipeline_stages != 1 {
        return Err(Error::InvalidArgument(
            "quality training supports data parallelism only (tensor_degree = pipeline_stages = 1)".into(),
        ));
    }
    let workers = strategy.data_degree;
    let batch = settings.hyper.batch_size;
    if !batch.is_multiple_of(workers) {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch} is not divisible by data_degree {workers}"
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if model.num_users != split.num_users || model.num_items != split.num_items {
        return Err(Error::ShapeMismatch(format!(
            "model is {}x{}, data is {}x{}",
            model.num_users, model.num_items, split.num_users, split.num_items
        )));
    }
    if !(settings.l2.is_finite() && settings.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 = {} must be >= 0", settings.l2)));
    }
    let lr = settings.hyper.learning_rate;
    let shard = batch / workers;
    let log_every = settings.log_every.max(1);
    let mut rng = SeededRng::new(seed).fork(0x5eed_ba7c);
    let mut feedback: Vec<ErrorFeedbackState> = Vec::new();
    let compressing = strategy.compressor != Default::default();
    let mut feedback_max_error = 0.0f64;
    let mut loss_curve = Vec::new();
    let mut current = model;

    let mut tracker = StalenessTracker::new(workers);
    let mut history: VecDeque<DenseVector> = VecDeque::new();
    let mut max_staleness = 0;
    let mut updates = 0;

    for step in 0..settings.hyper.steps {
        let triples = sample_batch(split, &mut rng, batch);
        let mut step_loss = 0.0;
        match strategy.mode {
            ExecutionMode::Sync => {
                let mut grads = Vec::with_capacity(workers);
                for part in triples.chunks(shard) {
                    let (loss, g) = bpr_loss_and_grad(&current, part, settings.l2)?;
                    step_loss += loss / workers as f64;
                    grads.push(g);
                }
                let before = feedback.clone();
                let group = WorkerGroup::new(grads)?;
                let next = sync_data_parallel_step(&group, current.params(), lr, strategy, &mut feedback)?;
                if compressing {
                    for (p, g) in group.buffers().iter().enumerate() {
                        let prior = before
                            .get(p)
                            .cloned()
                            .unwrap_or_else(|| ErrorFeedbackState::new(g.dim()));
                        feedback_max_error = feedback_max_error
                            .max(feedback_violation(&prior, g, &feedback[p], strategy)?);
                    }
                }
                next.check_finite("training update")?;
                current = current.with_params(next);
                updates += 1;
            }
            ExecutionMode::Async => {
                if feedback.is_empty() && compressing {
                    feedback = vec![ErrorFeedbackState::new(current.params().dim()); workers];
                }
                for part in triples.chunks(shard) {
                    let p = settings.delays.worker_for_step(updates, workers);
                    let lag = settings.delays.delay_for(p).min(history.len());
                    tracker.pull_lagged(p, lag as u64);
                    let tau = tracker.staleness(p);
                    max_staleness = max_staleness.max(tau);
                    let stale = if lag == 0 {
                        current.clone()
                    } else {
                        current.with_params(history[history.len() - lag].clone())
                    };
                    let (loss, mut g) = bpr_loss_and_grad(&stale, part, settings.l2)?;
                    step_loss += loss / workers as f64;
                    if compressing {
                        let prior = feedback[p].clone();
                        let message = feedback[p].step(&g, &strategy.compressor)?;
                        feedback_max_error = feedback_max_error
                            .max(feedback_violation(&prior, &g, &feedback[p], strategy)?);
                        g = decompress(&message)?;
                    }
                    let next = async_step(current.params(), &g, tau, lr / workers as f64)?;
                    next.check_finite("training update")?;
                    history.push_back(current.params().clone());
                    if history.len() > settings.delays.max_delay() {
                        history.pop_front();
                    }
                    current = current.with_params(next);
                    tracker.record_update();
                    updates += 1;
                }
            }
        }
        if step % log_every == 0 || step + 1 == settings.hyper.steps {
            loss_curve.push(LossPoint { step, loss: step_loss });
        }
    }
    Ok(TrainOutcome {
        model: current,
        loss_curve,
        feedback_max_error,
        max_staleness,
        updates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub k: usize,
    pub negatives: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { k: 10, negatives: 99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub num_evaluated: usize,
    pub skipped: usize,
}

/// 1-based rank of the true item among sampled negatives; ties go to the
/// lower item id.
pub fn rank_among(true_item: usize, true_score: f64, negatives: &[(usize, f64)]) -> usize {
    1 + negatives
        .iter()
        .filter(|&&(item, s)| s > true_score || (s == true_score && item < true_item))
        .count()
}

/// Hit rate and NDCG at `k` from 1-based ranks.
pub fn metrics_from_ranks(ranks: &[usize], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let (mut hits, mut gain) = (0.0, 0.0);
    for &r in ranks {
        if r <= k {
            hits += 1.0;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    (hits / n, gain / n)
}

/// Ranks every test interaction's item against negatives the user never
/// interacted with anywhere in the data. Users with no such items are
/// skipped and counted.
pub fn evaluate_topk(
    scorer: &dyn Scorer,
    split: &ChronoSplit,
    settings: EvalSettings,
    seed: u64,
) -> Result<EvalResult> {
    if split.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    if settings.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); split.num_users];
    for r in split.all() {
        seen[r.user].insert(r.item);
    }
    let mut rng = SeededRng::new(seed).fork(0xe7a1);
    let mut ranks = Vec::with_capacity(split.test.len());
    let mut skipped = 0;
    for r in &split.test {
        let mut pool: Vec<usize> = (0..split.num_items).filter(|i| !seen[r.user].contains(i)).collect();
        if pool.is_empty() {
            skipped += 1;
            continue;
        }
        let take = settings.negatives.min(pool.len());
        for n in 0..take {
            let j = n + rng.below((pool.len() - n) as u64) as usize;
            pool.swap(n, j);
        }
        let negatives: Vec<(usize, f64)> = pool[..take]
            .iter()
            .map(|&i| (i, scorer.score(r.user, i)))
            .collect();
        ranks.push(rank_among(r.item, scorer.score(r.user, r.item), &negatives));
    }
    let (hr, ndcg) = metrics_from_ranks(&ranks, settings.k);
    Ok(EvalResult {
        hr_at_k: hr,
        ndcg_at_k: ndcg,
        num_evaluated: ranks.len(),
        skipped,
    })
}
