//! Synchronous mirror-space gossip and its baselines.
//!
//! Each iteration `t` every device computes its (clipped) local gradient at
//! `w_{i,t}`, mixes mirror images with row `i` of `P(t)` and steps in the
//! mirror space:
//!
//! ```text
//! h(y_{i,t})   = Σ_j P(t)_ij h(w_{j,t})
//! h(w_{i,t+1}) = h(y_{i,t}) − η ∇f_i(w_{i,t})
//! ```
//!
//! The mirror images `h(w_{i,t})` are the engine's source of truth; primal
//! models are recovered with `h⁻¹`.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{consensus_bound, TheoryConstants};
use crate::dataflow::{dirichlet_partition, make_synthetic, Dataset, LocalLoss};
use crate::linalg::{dist2, mean, norm2};
use crate::topology::{generate_schedule, Edge, GraphSchedule, MixingMatrix, Repair};
use crate::{Error, MirrorMap, ModelVec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Aggregation in the mirror space (weighted power mean for `h = x^p`).
    Aims,
    /// Simplified pairwise gossip baseline: one random edge per round, one
    /// local step at both endpoints, then a linear pairwise average.
    PairwiseGossip,
}

/// Where device data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    /// Gaussian blobs partitioned with `Dirichlet(alpha)` and fitted with
    /// multinomial logistic regression.
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        lambda: f64,
    },
    /// CSV dataset (label first) partitioned like `Synthetic`.
    Csv { path: String, lambda: f64 },
    /// Per-device least squares `½‖A_i w − b_i‖²` whose minimisers are
    /// scattered by `spread` around a common centre.
    Quadratic {
        dim: usize,
        rows: usize,
        spread: f64,
    },
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::Synthetic {
            classes: 10,
            dim: 10,
            per_class: 60,
            separation: 4.0,
            lambda: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub m: usize,
    /// Number of iterations `T`.
    pub iters: usize,
    pub eta: f64,
    /// Mirror exponent; `1` is linear aggregation.
    pub p: f64,
    pub density: f64,
    /// Connectivity window `B`.
    pub window: usize,
    pub seed: u64,
    pub alpha: f64,
    pub strategy: Strategy,
    pub rescale: bool,
    pub record_bounds: bool,
    pub record_trace: bool,
    pub grad_clip: f64,
    /// Initial models are drawn from `[-init_scale, init_scale]`; 0 gives the
    /// all-zero start.
    pub init_scale: f64,
    /// Mini-batch size for local gradients; `None` is full batch.
    pub batch_size: Option<usize>,
    /// Absolute loss level for "iterations to threshold".
    pub threshold: Option<f64>,
    pub problem: ProblemSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 10,
            iters: 200,
            eta: 0.05,
            p: 1.0,
            density: 0.2,
            window: 1,
            seed: 42,
            alpha: 0.1,
            strategy: Strategy::Aims,
            rescale: false,
            record_bounds: true,
            record_trace: false,
            grad_clip: 1.0,
            init_scale: 0.0,
            batch_size: None,
            threshold: None,
            problem: ProblemSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.m < 1 {
            return fail("m", "need at least one device".into());
        }
        if self.iters < 1 {
            return fail("iters", "need at least one iteration".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail("eta", format!("must be > 0, got {}", self.eta));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return fail("p", format!("must be >= 1, got {}", self.p));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return fail(
                "density",
                format!("must lie in (0, 1], got {}", self.density),
            );
        }
        if self.window < 1 {
            return fail("window", "must be >= 1".into());
        }
        if !(self.alpha > 0.0) {
            return fail("alpha", format!("must be > 0, got {}", self.alpha));
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip", format!("must be > 0, got {}", self.grad_clip));
        }
        if !(self.init_scale >= 0.0) {
            return fail(
                "init_scale",
                format!("must be >= 0, got {}", self.init_scale),
            );
        }
        if self.batch_size == Some(0) {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.strategy == Strategy::PairwiseGossip && self.m < 2 {
            return fail("strategy", "pairwise gossip needs m >= 2".into());
        }
        Ok(())
    }

    /// Mirror map used for aggregation; the pairwise baseline is linear.
    pub fn mirror_map(&self) -> Result<MirrorMap> {
        match self.strategy {
            Strategy::Aims => MirrorMap::signed_power(self.p),
            Strategy::PairwiseGossip => Ok(MirrorMap::identity()),
        }
    }
}

/// Independent random streams derived from the run seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_DATA: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_TOPOLOGY: u64 = 3;
const STREAM_GOSSIP: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_BATCH: u64 = 1000;

#[derive(Clone, Debug)]
pub struct DeviceState {
    pub id: usize,
    pub w: ModelVec,
    pub shard: Dataset,
    pub loss: LocalLoss,
    rng: ChaCha8Rng,
}

impl DeviceState {
    pub fn new(id: usize, w: ModelVec, shard: Dataset, loss: LocalLoss, seed: u64) -> Self {
        Self {
            id,
            w,
            shard,
            loss,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BATCH + id as u64)),
        }
    }

    fn local_gradient(&mut self, batch_size: Option<usize>) -> Result<ModelVec> {
        match batch_size {
            Some(b) if b < self.shard.len() => {
                let batch = index::sample(&mut self.rng, self.shard.len(), b).into_vec();
                self.loss.batch_gradient(&self.shard, &self.w, &batch)
            }
            _ => self.loss.gradient(&self.shard, &self.w),
        }
    }
}

/// Devices and the pooled evaluation data for one run.
#[derive(Clone, Debug)]
pub struct Problem {
    pub losses: Vec<LocalLoss>,
    pub shards: Vec<Dataset>,
    pub eval: Dataset,
    pub partition: Option<crate::dataflow::Partition>,
}

impl Problem {
    pub fn build(config: &RunConfig) -> Result<Self> {
        let data_seed = derive_seed(config.seed, STREAM_DATA);
        let part_seed = derive_seed(config.seed, STREAM_PARTITION);
        let labelled = |data: Dataset, lambda: f64| -> Result<Problem> {
            let partition = dirichlet_partition(&data, config.m, config.alpha, part_seed)?;
            let loss = LocalLoss::logistic(data.classes().max(2), lambda, config.grad_clip)?;
            Ok(Problem {
                losses: vec![loss; config.m],
                shards: partition.shards(&data),
                eval: data,
                partition: Some(partition),
            })
        };
        match &config.problem {
            ProblemSpec::Synthetic {
                classes,
                dim,
                per_class,
                separation,
                lambda,
            } => labelled(
                make_synthetic(*classes, *dim, *per_class, *separation, data_seed)?,
                *lambda,
            ),
            ProblemSpec::Csv { path, lambda } => labelled(Dataset::from_csv_path(path)?, *lambda),
            ProblemSpec::Quadratic { dim, rows, spread } => {
                if *dim < 1 || *rows < 1 {
                    return Err(Error::Config(
                        "quadratic problem needs dim, rows >= 1".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
                let centre: Vec<f64> = (0..*dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let scale = 1.0 / (*rows as f64).sqrt();
                let losses = (0..config.m)
                    .map(|_| {
                        let target: Vec<f64> = centre
                            .iter()
                            .map(|c| c + spread * rng.random_range(-1.0..1.0))
                            .collect();
                        let a: Vec<Vec<f64>> = (0..*rows)
                            .map(|_| {
                                (0..*dim)
                                    .map(|_| scale * rng.random_range(-1.0..1.0) * 3f64.sqrt())
                                    .collect()
                            })
                            .collect();
                        let b = a
                            .iter()
                            .map(|row| crate::linalg::dot(row, &target))
                            .collect();
                        LocalLoss::quadratic(a, b, config.grad_clip)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Problem {
                    losses,
                    shards: vec![Dataset::empty(); config.m],
                    eval: Dataset::empty(),
                    partition: None,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.losses[0].param_dim(&self.shards[0])
    }

    /// `F(w) = Σ_i f_i(w)`.
    pub fn global_loss(&self, w: &[f64]) -> Result<f64> {
        self.losses
            .iter()
            .zip(&self.shards)
            .map(|(l, d)| l.value(d, w))
            .sum()
    }

    pub fn accuracy(&self, w: &[f64]) -> Option<f64> {
        self.losses[0].accuracy(&self.eval, w)
    }
}

/// `h⁻¹(Σ_j weights_j h(models_j))`.
pub fn aggregate_row(weights: &[f64], models: &[ModelVec], map: &MirrorMap) -> Result<ModelVec> {
    let mirrored = models
        .iter()
        .map(|w| map.forward(w))
        .collect::<Result<Vec<_>>>()?;
    let mixed = mix_row(weights, &mirrored, false)?;
    map.inverse(&mixed)
}

/// Weighted sum of mirror images, optionally divided by the largest
/// magnitude before summing and multiplied back after.
fn mix_row(weights: &[f64], mirrored: &[ModelVec], rescale: bool) -> Result<ModelVec> {
    if weights.len() != mirrored.len() {
        return Err(Error::Shape {
            expected: mirrored.len(),
            got: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Protocol(format!(
            "negative or NaN mixing weight {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Protocol(format!(
            "mixing weights sum to {total}, not 1"
        )));
    }
    let dim = mirrored.first().map_or(0, Vec::len);
    if let Some(bad) = mirrored.iter().find(|v| v.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            got: bad.len(),
        });
    }
    let scale = if rescale {
        let s = mirrored
            .iter()
            .map(|v| crate::linalg::norm_inf(v))
            .fold(0.0, f64::max);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    } else {
        1.0
    };
    let mut out = vec![0.0; dim];
    for (&a, v) in weights.iter().zip(mirrored) {
        if a == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * (x / scale);
        }
    }
    if scale != 1.0 {
        out.iter_mut().for_each(|o| *o *= scale);
    }
    Ok(out)
}

/// One gossip round: row `i` of `P` aggregates every model into `y_i`.
pub fn gossip_round(
    models: &[ModelVec],
    mixing: &MixingMatrix,
    map: &MirrorMap,
) -> Result<Vec<ModelVec>> {
    if mixing.m() != models.len() {
        return Err(Error::Shape {
            expected: mixing.m(),
            got: models.len(),
        });
    }
    let mirrored = models
        .iter()
        .map(|w| map.forward(w))
        .collect::<Result<Vec<_>>>()?;
    (0..models.len())
        .map(|i| map.inverse(&mix_row(&mixing.row(i), &mirrored, false)?))
        .collect()
}

/// `h⁻¹(h(y) − η·grad)`.
pub fn mirror_gradient_step(
    y: &[f64],
    grad: &[f64],
    eta: f64,
    map: &MirrorMap,
) -> Result<ModelVec> {
    if y.len() != grad.len() {
        return Err(Error::Shape {
            expected: y.len(),
            got: grad.len(),
        });
    }
    let mut z = map.forward(y)?;
    step_in_mirror(&mut z, grad, eta)?;
    map.inverse(&z)
}

fn step_in_mirror(z: &mut [f64], grad: &[f64], eta: f64) -> Result<()> {
    for (k, (zk, gk)) in z.iter_mut().zip(grad).enumerate() {
        *zk -= eta * gk;
        if !zk.is_finite() {
            return Err(Error::Range {
                coord: k,
                context: "mirror-space step left the finite range".into(),
            });
        }
    }
    Ok(())
}

/// Pairwise baseline round on `edges`: one uniformly chosen edge, one local
/// gradient step at each endpoint, then both endpoints take the pairwise
/// mean. Returns the chosen edge, or `None` when `edges` is empty.
pub fn pairwise_gossip_round(
    states: &mut [DeviceState],
    edges: &[Edge],
    eta: f64,
    batch_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Edge>> {
    if edges.is_empty() {
        return Ok(None);
    }
    let edge = edges[rng.random_range(0..edges.len())];
    let (a, b) = edge.endpoints();
    for i in [a, b] {
        let g = states[i].local_gradient(batch_size)?;
        crate::linalg::axpy(-eta, &g, &mut states[i].w);
    }
    let avg: ModelVec = states[a]
        .w
        .iter()
        .zip(&states[b].w)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    states[a].w.clone_from(&avg);
    states[b].w = avg;
    Ok(Some(edge))
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// `F(w̄_t)`
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// `max_i ‖h(w_{i,t}) − h(w̄_t)‖₂`
    pub consensus_mirror: f64,
    /// `max_i ‖w_{i,t} − w̄_t‖₂`
    pub consensus_primal: f64,
    #[serde(rename = "lemma1_bound")]
    pub consensus_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub min_loss: f64,
    pub min_loss_iteration: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub threshold: Option<f64>,
    /// First `t` with `F(w̄_t) ≤ threshold`, or −1.
    pub iterations_to_threshold: i64,
    /// Run-wide minimum positive mixing entry.
    pub zeta: f64,
    pub effective_density: f64,
    pub repairs: Vec<Repair>,
    /// Pairwise-gossip rounds with no available edge.
    pub idle_rounds: usize,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<IterationRecord>,
    pub summary: RunSummary,
}

pub const CSV_HEADER: &str = "t,loss,accuracy,consensus_mirror,consensus_primal,lemma1_bound";

impl RunMetrics {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(true)
            .from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

/// First `t` whose loss is at or below `threshold`, or −1.
pub fn iterations_to_threshold(records: &[IterationRecord], threshold: f64) -> i64 {
    records
        .iter()
        .find(|r| r.loss <= threshold)
        .map_or(-1, |r| r.t as i64)
}

/// Everything the unrolled-formula check needs: mixing matrices, mirror
/// states and the gradients actually applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub map: MirrorMap,
    pub eta: f64,
    pub m: usize,
    /// `P(t)` row-major, `t = 0..T-1`.
    pub matrices: Vec<Vec<f64>>,
    /// `h(w_{i,t})`, `t = 0..=T`.
    pub mirror_states: Vec<Vec<ModelVec>>,
    /// `∇f_i(w_{i,t})` as applied, `t = 0..T-1`.
    pub gradients: Vec<Vec<ModelVec>>,
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    sha256: String,
    trace: RunTrace,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.gradients.len()
    }

    fn matrix(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.m, &self.matrices[t])
    }

    fn digest(&self) -> Result<String> {
        let body = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&body)))
    }

    /// JSON with an embedded SHA-256 of the trace body.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TraceFile {
            sha256: self.digest()?,
            trace: self.clone(),
        })?)
    }

    /// Parses and validates a trace file; tampering or truncation is an
    /// integrity error.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: TraceFile = serde_json::from_str(text)
            .map_err(|e| Error::Integrity(format!("unreadable trace: {e}")))?;
        let trace = file.trace;
        if trace.digest()? != file.sha256 {
            return Err(Error::Integrity("trace checksum mismatch".into()));
        }
        let t = trace.gradients.len();
        let consistent = trace.matrices.len() == t
            && trace.mirror_states.len() == t + 1
            && trace.matrices.iter().all(|p| p.len() == trace.m * trace.m)
            && trace
                .mirror_states
                .iter()
                .chain(&trace.gradients)
                .all(|devs| devs.len() == trace.m);
        if !consistent {
            return Err(Error::Integrity(
                "trace arrays have inconsistent shapes".into(),
            ));
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrolledCheck {
    pub t: usize,
    pub k: usize,
    /// Largest per-coordinate gap between recorded and unrolled device states.
    pub max_deviation: f64,
    /// Same for the mirror average `h(w̄_{t+1})`.
    pub mean_deviation: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// Recomputes `h(w_{i,t+1})` from state `k` via
/// `Σ_j P(t,k)_ij h(w_{j,k}) − η Σ_{τ=k+1..t} Σ_j P(t,τ)_ij ∇f_j(w_{j,τ−1}) − η ∇f_i(w_{i,t})`
/// and the mirror average via
/// `(1/m) Σ_j h(w_{j,k}) − (η/m) Σ_{τ=k+1..t+1} Σ_j ∇f_j(w_{j,τ−1})`,
/// then compares both with the recorded states.
pub fn unrolled_state_check(trace: &RunTrace, t: usize, k: usize) -> Result<UnrolledCheck> {
    if !(k <= t && t < trace.iterations()) {
        return Err(Error::Config(format!(
            "unrolled check needs 0 <= k <= t < {}, got k={k}, t={t}",
            trace.iterations()
        )));
    }
    let m = trace.m;
    let dim = trace.mirror_states[0][0].len();
    let as_matrix = |vs: &[ModelVec]| DMatrix::from_fn(m, dim, |i, c| vs[i][c]);
    let eta = trace.eta;

    // Q = P(t) P(t-1) ⋯ P(τ), built right to left.
    let mut q = DMatrix::<f64>::identity(m, m);
    let mut predicted = -eta * as_matrix(&trace.gradients[t]);
    for tau in (k..=t).rev() {
        q *= trace.matrix(tau);
        if tau > k {
            predicted -= eta * &q * as_matrix(&trace.gradients[tau - 1]);
        }
    }
    predicted += &q * as_matrix(&trace.mirror_states[k]);

    let recorded = as_matrix(&trace.mirror_states[t + 1]);
    let max_deviation = (&predicted - &recorded).amax();
    let magnitude = recorded.amax().max(predicted.amax());

    let mut mean_pred = as_matrix(&trace.mirror_states[k]).row_mean();
    for tau in k + 1..=t + 1 {
        mean_pred -= eta * as_matrix(&trace.gradients[tau - 1]).row_mean();
    }
    let mean_deviation = (mean_pred - recorded.row_mean()).amax();

    let tolerance = 1e-8 * (1.0 + magnitude);
    Ok(UnrolledCheck {
        t,
        k,
        max_deviation,
        mean_deviation,
        tolerance,
        holds: max_deviation <= tolerance && mean_deviation <= tolerance,
    })
}

/// Output of [`run`]: metrics plus the artefacts the analysis needs.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub schedule: GraphSchedule,
    pub problem: Problem,
    pub map: MirrorMap,
    /// `‖h(w_{i,t}) − h(w̄_t)‖₂`, indexed `[t][i]`.
    pub mirror_consensus: Vec<Vec<f64>>,
    pub trace: Option<RunTrace>,
    /// Mirror average `h(w̄_0)` mapped back: the starting point of `w̄`.
    pub initial_mean: ModelVec,
    /// `Σ_j ‖h(w_{j,0})‖₂`
    pub initial_mirror_norm_sum: f64,
}

/// Generates the topology and data from `config` and runs it.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let schedule = if config.m == 1 {
        GraphSchedule::from_rounds(1, config.window, vec![Vec::new(); config.iters])?
    } else {
        generate_schedule(
            config.m,
            config.iters,
            config.density,
            config.window,
            derive_seed(config.seed, STREAM_TOPOLOGY),
        )?
    };
    run_with_schedule(config, schedule)
}

/// Runs `config` over a given topology (e.g. one loaded from disk).
pub fn run_with_schedule(config: &RunConfig, schedule: GraphSchedule) -> Result<RunOutput> {
    config.validate()?;
    if schedule.m() != config.m || schedule.len() < config.iters {
        return Err(Error::Config(format!(
            "topology has m={} and {} rounds; run needs m={} and {} rounds",
            schedule.m(),
            schedule.len(),
            config.m,
            config.iters
        )));
    }
    let problem = Problem::build(config)?;
    let map = config.mirror_map()?;
    let started = Instant::now();

    let dim = problem.dim();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT));
    let mut states: Vec<DeviceState> = problem
        .losses
        .iter()
        .zip(&problem.shards)
        .enumerate()
        .map(|(i, (loss, shard))| {
            let w = (0..dim)
                .map(|_| {
                    if config.init_scale > 0.0 {
                        init_rng.random_range(-config.init_scale..=config.init_scale)
                    } else {
                        0.0
                    }
                })
                .collect();
            DeviceState::new(i, w, shard.clone(), loss.clone(), config.seed)
        })
        .collect();

    let matrices = schedule.mixing_matrices();
    let zeta = matrices[..config.iters]
        .iter()
        .map(MixingMatrix::zeta)
        .fold(f64::INFINITY, f64::min);

    let mut mirror: Vec<ModelVec> = states
        .iter()
        .map(|s| map.forward(&s.w))
        .collect::<Result<_>>()?;
    let initial_mirror_norm_sum: f64 = mirror.iter().map(|z| norm2(z)).sum();
    let initial_mean = map.inverse(&mean(&mirror))?;

    let bounds = if config.record_bounds && config.strategy == Strategy::Aims {
        Some(TheoryConstants::new(
            config.m,
            zeta,
            config.window,
            &map,
            config.grad_clip,
            config.eta,
            config.iters,
        )?)
    } else {
        None
    };

    let mut trace = config.record_trace.then(|| RunTrace {
        map,
        eta: config.eta,
        m: config.m,
        matrices: Vec::with_capacity(config.iters),
        mirror_states: Vec::with_capacity(config.iters + 1),
        gradients: Vec::with_capacity(config.iters),
    });

    let mut records = Vec::with_capacity(config.iters + 1);
    let mut mirror_consensus = Vec::with_capacity(config.iters + 1);
    let mut gossip_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_GOSSIP));
    let mut idle_rounds = 0;

    for t in 0..=config.iters {
        let (record, per_device) = observe(
            t,
            &states,
            &mirror,
            &map,
            &problem,
            bounds.as_ref(),
            initial_mirror_norm_sum,
        )
        .map_err(|e| e.at_iteration(t))?;
        records.push(record);
        mirror_consensus.push(per_device);
        if let Some(tr) = trace.as_mut() {
            tr.mirror_states.push(mirror.clone());
        }
        if t == config.iters {
            break;
        }

        match config.strategy {
            Strategy::Aims => {
                let batch = config.batch_size;
                let grads: Vec<ModelVec> = states
                    .par_iter_mut()
                    .map(|s| s.local_gradient(batch))
                    .collect::<Result<_>>()
                    .map_err(|e| e.at_iteration(t))?;
                let p = &matrices[t];
                let mut next = Vec::with_capacity(config.m);
                for (i, g) in grads.iter().enumerate() {
                    let mut z = mix_row(&p.row(i), &mirror, config.rescale)?;
                    step_in_mirror(&mut z, g, config.eta).map_err(|e| e.at_iteration(t))?;
                    next.push(z);
                }
                for (s, z) in states.iter_mut().zip(&next) {
                    s.w = map.inverse(z).map_err(|e| e.at_iteration(t))?;
                }
                if let Some(tr) = trace.as_mut() {
                    tr.matrices
                        .push(p.entries().transpose().as_slice().to_vec());
                    tr.gradients.push(grads);
                }
                mirror = next;
            }
            Strategy::PairwiseGossip => {
                let edges = schedule.edges(t + 1);
                if pairwise_gossip_round(
                    &mut states,
                    edges,
                    config.eta,
                    config.batch_size,
                    &mut gossip_rng,
                )
                .map_err(|e| e.at_iteration(t))?
                .is_none()
                {
                    idle_rounds += 1;
                }
                mirror = states.iter().map(|s| s.w.clone()).collect();
            }
        }
    }

    let (min_idx, min_loss) =
        records
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, r)| {
                if r.loss < best.1 {
                    (i, r.loss)
                } else {
                    best
                }
            });
    let last = records.last().expect("T + 1 records");
    let summary = RunSummary {
        config: config.clone(),
        min_loss,
        min_loss_iteration: min_idx,
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        threshold: config.threshold,
        iterations_to_threshold: config
            .threshold
            .map_or(-1, |th| iterations_to_threshold(&records, th)),
        zeta,
        effective_density: schedule.effective_density(),
        repairs: schedule.repairs().to_vec(),
        idle_rounds,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(RunOutput {
        metrics: RunMetrics { records, summary },
        schedule,
        problem,
        map,
        mirror_consensus,
        trace,
        initial_mean,
        initial_mirror_norm_sum,
    })
}

/// Metrics at the mirror average, plus each device's mirror-space distance
/// to it.
fn observe(
    t: usize,
    states: &[DeviceState],
    mirror: &[ModelVec],
    map: &MirrorMap,
    problem: &Problem,
    bounds: Option<&TheoryConstants>,
    init_norm_sum: f64,
) -> Result<(IterationRecord, Vec<f64>)> {
    let mirror_mean = mean(mirror);
    let w_bar = map.inverse(&mirror_mean)?;
    let per_device: Vec<f64> = mirror.iter().map(|z| dist2(z, &mirror_mean)).collect();
    let consensus_mirror = per_device.iter().copied().fold(0.0, f64::max);
    let consensus_primal = states
        .iter()
        .map(|s| dist2(&s.w, &w_bar))
        .fold(0.0, f64::max);
    let record = IterationRecord {
        t,
        loss: problem.global_loss(&w_bar)?,
        accuracy: problem.accuracy(&w_bar),
        consensus_mirror,
        consensus_primal,
        consensus_bound: bounds
            .map(|c| consensus_bound(t, c, init_norm_sum))
            .transpose()?,
    };
    Ok((record, per_device))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::metropolis_weights;
    use approx::assert_relative_eq;

    fn power(p: f64) -> MirrorMap {
        MirrorMap::signed_power(p).unwrap()
    }

    #[test]
    fn aggregate_motivating_example() {
        let models = vec![vec![3.0], vec![11.0]];
        let lin = aggregate_row(&[0.4, 0.6], &models, &power(1.0)).unwrap();
        assert_relative_eq!(lin[0], 7.8, epsilon = 1e-12);
        let hi = aggregate_row(&[0.4, 0.6], &models, &power(5.0)).unwrap()[0];
        let lo = aggregate_row(&[0.6, 0.4], &models, &power(5.0)).unwrap()[0];
        assert!((hi - 9.9337).abs() < 5e-5, "{hi}");
        // Exact value 9.16223; the worked example rounds to 9.16.
        assert!((lo - 9.1632).abs() < 2e-3, "{lo}");
        assert!((hi - lo - 0.7705).abs() < 5e-3);
    }

    #[test]
    fn aggregate_fixed_point() {
        let v = vec![0.3, -2.0, 5.5];
        for p in [1.0, 2.0, 7.0, 15.0] {
            let out = aggregate_row(&[0.2, 0.5, 0.3], &vec![v.clone(); 3], &power(p)).unwrap();
            for (a, b) in out.iter().zip(&v) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_rejects_bad_weights() {
        let models = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            aggregate_row(&[0.5, 0.6], &models, &power(2.0)),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            aggregate_row(&[1.5, -0.5], &models, &power(2.0)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn rescaled_mixing_matches_plain() {
        let mirrored = vec![vec![1e6, -3.0], vec![2.0, 4e5]];
        let a = mix_row(&[0.3, 0.7], &mirrored, false).unwrap();
        let b = mix_row(&[0.3, 0.7], &mirrored, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
    }

    #[test]
    fn gossip_round_examples() {
        let models = vec![vec![3.0], vec![11.0]];
        let same = gossip_round(&models, &MixingMatrix::identity(2), &power(5.0)).unwrap();
        assert_relative_eq!(same[0][0], 3.0, max_relative = 1e-14);
        assert_relative_eq!(same[1][0], 11.0, max_relative = 1e-14);

        let p = MixingMatrix::from_entries(DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]))
            .unwrap();
        let y = gossip_round(&models, &p, &power(5.0)).unwrap();
        assert!((y[0][0] - 9.1632).abs() < 2e-3);
        assert!((y[1][0] - 9.9337).abs() < 5e-5);
    }

    #[test]
    fn gossip_preserves_mirror_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let schedule = generate_schedule(6, 20, 0.4, 1, 9).unwrap();
        for (t, p) in schedule.mixing_matrices().iter().enumerate() {
            let map = power(1.0 + (t % 5) as f64);
            let models: Vec<ModelVec> = (0..6)
                .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let y = gossip_round(&models, p, &map).unwrap();
            let before = mean(
                &models
                    .iter()
                    .map(|w| map.forward(w).unwrap())
                    .collect::<Vec<_>>(),
            );
            let after = mean(
                &y.iter()
                    .map(|w| map.forward(w).unwrap())
                    .collect::<Vec<_>>(),
            );
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mirror_step_examples() {
        let y = vec![1.5, -2.0];
        let g = vec![0.25, 1.0];
        let lin = mirror_gradient_step(&y, &g, 0.5, &power(1.0)).unwrap();
        assert_eq!(lin, vec![1.5 - 0.125, -2.5]);
        let still = mirror_gradient_step(&y, &[0.0, 0.0], 0.7, &power(4.0)).unwrap();
        assert_relative_eq!(still[0], 1.5, max_relative = 1e-14);
        let s = mirror_gradient_step(&[2.0], &[1.0], 7.0, &power(3.0)).unwrap();
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-14);
        assert!(matches!(
            mirror_gradient_step(&[1e300], &[-1e308], 1e10, &power(1.0)),
            Err(Error::Range { .. })
        ));
    }

    fn quad_config(m: usize, p: f64) -> RunConfig {
        RunConfig {
            m,
            iters: 30,
            eta: 0.05,
            p,
            density: 0.5,
            problem: ProblemSpec::Quadratic {
                dim: 3,
                rows: 4,
                spread: 0.5,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn record_count_and_zero_init() {
        let out = run(&quad_config(4, 3.0)).unwrap();
        assert_eq!(out.metrics.records.len(), 31);
        assert_eq!(out.initial_mirror_norm_sum, 0.0);
        assert_eq!(out.metrics.records[0].consensus_mirror, 0.0);
    }

    #[test]
    fn single_device_is_plain_mirror_descent() {
        for p in [1.0, 3.0] {
            let cfg = quad_config(1, p);
            let out = run(&cfg).unwrap();
            let map = power(p);
            let loss = &out.problem.losses[0];
            let mut w = vec![0.0; 3];
            for t in 0..cfg.iters {
                let g = loss.gradient(&Dataset::empty(), &w).unwrap();
                w = mirror_gradient_step(&w, &g, cfg.eta, &map).unwrap();
                let f = loss.value(&Dataset::empty(), &w).unwrap();
                assert!((f - out.metrics.records[t + 1].loss).abs() <= 1e-9 * f.max(1.0));
            }
        }
    }

    #[test]
    fn pairwise_round_behaviour() {
        let loss = LocalLoss::quadratic(vec![vec![1.0]], vec![1.0], 1.0).unwrap();
        let mut states: Vec<DeviceState> = (0..3)
            .map(|i| DeviceState::new(i, vec![i as f64], Dataset::empty(), loss.clone(), 0))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let edge = Edge::new(0, 1).unwrap();
        let chosen = pairwise_gossip_round(&mut states, &[edge], 0.1, None, &mut rng).unwrap();
        assert_eq!(chosen, Some(edge));
        assert_eq!(states[0].w, states[1].w);
        assert_eq!(states[2].w, vec![2.0]);
        assert_eq!(
            pairwise_gossip_round(&mut states, &[], 0.1, None, &mut rng).unwrap(),
            None
        );
    }

    #[test]
    fn pairwise_baseline_reduces_loss() {
        let cfg = RunConfig {
            m: 6,
            iters: 300,
            eta: 0.2,
            density: 1.0,
            alpha: 100.0,
            strategy: Strategy::PairwiseGossip,
            problem: ProblemSpec::Synthetic {
                classes: 3,
                dim: 4,
                per_class: 30,
                separation: 4.0,
                lambda: 1e-4,
            },
            ..RunConfig::default()
        };
        let out = run(&cfg).unwrap();
        let first = out.metrics.records[0].loss;
        assert!(out.metrics.summary.min_loss < first);
        assert!(out
            .metrics
            .records
            .iter()
            .all(|r| r.consensus_bound.is_none()));
    }

    #[test]
    fn trace_json_integrity() {
        let cfg = RunConfig {
            record_trace: true,
            ..quad_config(3, 2.0)
        };
        let trace = run(&cfg).unwrap().trace.unwrap();
        let text = trace.to_json().unwrap();
        assert_eq!(RunTrace::from_json(&text).unwrap(), trace);
        let tampered = text.replacen("\"eta\":0.05", "\"eta\":0.06", 1);
        assert_ne!(tampered, text);
        assert!(matches!(
            RunTrace::from_json(&tampered),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            RunTrace::from_json("{\"sha"),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn unrolled_check_degenerate_and_fault_injection() {
        let cfg = RunConfig {
            record_trace: true,
            ..quad_config(4, 3.0)
        };
        let mut trace = run(&cfg).unwrap().trace.unwrap();
        for t in [0, 5, 29] {
            assert!(unrolled_state_check(&trace, t, t).unwrap().holds);
        }
        assert!(unrolled_state_check(&trace, 10, 0).unwrap().holds);
        trace.gradients[4][1][0] += 0.5;
        assert!(!unrolled_state_check(&trace, 10, 0).unwrap().holds);
        assert!(unrolled_state_check(&trace, 30, 0).is_err());
    }

    #[test]
    fn loaded_schedule_must_match() {
        let cfg = quad_config(4, 1.0);
        let other = generate_schedule(5, 30, 0.5, 1, 0).unwrap();
        assert!(matches!(
            run_with_schedule(&cfg, other),
            Err(Error::Config(_))
        ));
        let edges = vec![
            vec![
                Edge::new(0, 1).unwrap(),
                Edge::new(1, 2).unwrap(),
                Edge::new(2, 3).unwrap()
            ];
            30
        ];
        let path = GraphSchedule::from_rounds(4, 1, edges).unwrap();
        let out = run_with_schedule(&cfg, path).unwrap();
        assert_eq!(
            out.metrics.summary.zeta,
            metropolis_weights(out.schedule.edges(1), 4).zeta()
        );
    }

    #[test]
    fn config_validation_names_field() {
        let err = RunConfig {
            eta: 0.0,
            ..RunConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("eta"));
        let err = RunConfig {
            p: 0.5,
            ..RunConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("p:"));
    }

    #[test]
    fn threshold_sentinel() {
        let recs: Vec<IterationRecord> = [5.0, 3.0, 2.0]
            .iter()
            .enumerate()
            .map(|(t, &loss)| IterationRecord {
                t,
                loss,
                accuracy: None,
                consensus_mirror: 0.0,
                consensus_primal: 0.0,
                consensus_bound: None,
            })
            .collect();
        assert_eq!(iterations_to_threshold(&recs, 3.0), 1);
        assert_eq!(iterations_to_threshold(&recs, 1.0), -1);
    }
}
