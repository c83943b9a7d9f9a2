//! Local losses, datasets and non-IID partitioning.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{dist2, norm2};
use crate::{Error, ModelVec, Result};

/// Labelled samples sharing one feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape {
                expected: features.len(),
                got: labels.len(),
            });
        }
        let dim = features.first().map_or(0, Vec::len);
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::Shape {
                expected: dim,
                got: bad.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            dim,
        })
    }

    /// A sample-free dataset, used by losses that carry their own data.
    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            classes: 0,
            dim: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Sub-dataset with the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            dim: self.dim,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Reads `label,f1,f2,...` rows. A first row whose label field is not an
    /// integer is treated as a header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let Some(first) = record.get(0) else { continue };
            let label = match first.parse::<usize>() {
                Ok(l) => l,
                Err(_) if row == 0 => continue,
                Err(_) => {
                    return Err(Error::Parse(format!(
                        "row {}: label `{first}` is not a nonnegative integer",
                        row + 1
                    )))
                }
            };
            let x = record
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: bad feature `{f}`", row + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            labels.push(label);
            features.push(x);
        }
        let classes = labels.iter().max().map_or(0, |&l| l + 1);
        Self::new(features, labels, classes)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Multinomial logistic regression. Parameters are laid out per class as
    /// `[weights (d), bias]`, so the model has `classes · (d + 1)` entries.
    Logistic { classes: usize, lambda: f64 },
    /// `½‖A w − b‖²`, with `A` stored by rows.
    Quadratic { a: Vec<Vec<f64>>, b: Vec<f64> },
}

/// A convex local objective `f_i` with gradients clipped to `grad_clip`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalLoss {
    pub kind: LossKind,
    pub grad_clip: f64,
}

impl LocalLoss {
    pub fn logistic(classes: usize, lambda: f64, grad_clip: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(
                "logistic regression needs at least 2 classes".into(),
            ));
        }
        if lambda < 0.0 {
            return Err(Error::Config(format!(
                "L2 coefficient must be >= 0, got {lambda}"
            )));
        }
        Self::with_kind(LossKind::Logistic { classes, lambda }, grad_clip)
    }

    pub fn quadratic(a: Vec<Vec<f64>>, b: Vec<f64>, grad_clip: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape {
                expected: a.len(),
                got: b.len(),
            });
        }
        let d = a.first().map_or(0, Vec::len);
        if d == 0 || a.iter().any(|row| row.len() != d) {
            return Err(Error::Config(
                "quadratic A must be a nonempty rectangular matrix".into(),
            ));
        }
        Self::with_kind(LossKind::Quadratic { a, b }, grad_clip)
    }

    fn with_kind(kind: LossKind, grad_clip: f64) -> Result<Self> {
        if !(grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "gradient cap must be > 0, got {grad_clip}"
            )));
        }
        Ok(Self { kind, grad_clip })
    }

    /// Model dimension expected for `data`.
    pub fn param_dim(&self, data: &Dataset) -> usize {
        match &self.kind {
            LossKind::Logistic { classes, .. } => classes * (data.dim() + 1),
            LossKind::Quadratic { a, .. } => a[0].len(),
        }
    }

    fn check_dim(&self, data: &Dataset, w: &[f64]) -> Result<()> {
        let expected = self.param_dim(data);
        if w.len() == expected {
            Ok(())
        } else {
            Err(Error::Shape {
                expected,
                got: w.len(),
            })
        }
    }

    pub fn value(&self, data: &Dataset, w: &[f64]) -> Result<f64> {
        self.check_dim(data, w)?;
        Ok(match &self.kind {
            LossKind::Logistic { classes, lambda } => {
                let mut total = 0.0;
                let mut logits = vec![0.0; *classes];
                for (x, &y) in data.features.iter().zip(&data.labels) {
                    compute_logits(w, x, &mut logits);
                    total += log_sum_exp(&logits) - logits[y];
                }
                let n = data.len().max(1) as f64;
                total / n + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
            }
            LossKind::Quadratic { a, b } => {
                0.5 * residuals(a, b, w).iter().map(|r| r * r).sum::<f64>()
            }
        })
    }

    /// Exact gradient of [`LocalLoss::value`], without clipping.
    pub fn raw_gradient(&self, data: &Dataset, w: &[f64]) -> Result<ModelVec> {
        self.check_dim(data, w)?;
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(self.gradient_over(data, w, &all))
    }

    /// Gradient rescaled onto the ball of radius `grad_clip` when it leaves it.
    pub fn gradient(&self, data: &Dataset, w: &[f64]) -> Result<ModelVec> {
        let g = self.raw_gradient(data, w)?;
        Ok(self.clip(g))
    }

    /// Clipped gradient of the data term averaged over `batch` (sample
    /// indices) plus the full regulariser.
    pub fn batch_gradient(&self, data: &Dataset, w: &[f64], batch: &[usize]) -> Result<ModelVec> {
        self.check_dim(data, w)?;
        Ok(self.clip(self.gradient_over(data, w, batch)))
    }

    fn clip(&self, mut g: ModelVec) -> ModelVec {
        let norm = norm2(&g);
        if norm > self.grad_clip {
            let scale = self.grad_clip / norm;
            g.iter_mut().for_each(|v| *v *= scale);
        }
        g
    }

    fn gradient_over(&self, data: &Dataset, w: &[f64], batch: &[usize]) -> ModelVec {
        match &self.kind {
            LossKind::Logistic { classes, lambda } => {
                let d = data.dim();
                let mut grad = vec![0.0; w.len()];
                let mut logits = vec![0.0; *classes];
                for &i in batch {
                    let x = &data.features[i];
                    compute_logits(w, x, &mut logits);
                    let lse = log_sum_exp(&logits);
                    for (c, &z) in logits.iter().enumerate() {
                        let coeff = (z - lse).exp() - if c == data.labels[i] { 1.0 } else { 0.0 };
                        let block = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                        for (g, xk) in block[..d].iter_mut().zip(x) {
                            *g += coeff * xk;
                        }
                        block[d] += coeff;
                    }
                }
                let n = batch.len().max(1) as f64;
                for (g, wk) in grad.iter_mut().zip(w) {
                    *g = *g / n + lambda * wk;
                }
                grad
            }
            LossKind::Quadratic { a, b } => {
                let r = residuals(a, b, w);
                let mut grad = vec![0.0; w.len()];
                for (row, rk) in a.iter().zip(&r) {
                    for (g, aij) in grad.iter_mut().zip(row) {
                        *g += aij * rk;
                    }
                }
                grad
            }
        }
    }

    /// Classification accuracy of `w` on `data`; `None` for quadratic losses.
    pub fn accuracy(&self, data: &Dataset, w: &[f64]) -> Option<f64> {
        let LossKind::Logistic { classes, .. } = &self.kind else {
            return None;
        };
        if data.is_empty() || self.check_dim(data, w).is_err() {
            return None;
        }
        let mut logits = vec![0.0; *classes];
        let correct = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| {
                compute_logits(w, x, &mut logits);
                argmax(&logits) == y
            })
            .count();
        Some(correct as f64 / data.len() as f64)
    }
}

fn residuals(a: &[Vec<f64>], b: &[f64], w: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(row, bk)| crate::linalg::dot(row, w) - bk)
        .collect()
}

fn compute_logits(w: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, z) in out.iter_mut().enumerate() {
        let block = &w[c * (d + 1)..(c + 1) * (d + 1)];
        *z = crate::linalg::dot(&block[..d], x) + block[d];
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Gaussian blobs with unit variance, one per class, whose means sit at
/// pairwise distance `separation`.
pub fn make_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 1 || dim < 1 || per_class < 1 || !(separation > 0.0) {
        return Err(Error::Config(
            "synthetic data needs classes, dim, per_class >= 1 and separation > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(classes, dim, separation, &mut rng);
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(x);
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

fn class_means(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if classes == 1 {
        return vec![vec![0.0; dim]];
    }
    let mut means: Vec<Vec<f64>> = if dim >= classes {
        // Scaled simplex vertices on a random set of signed axes.
        let mut axes: Vec<usize> = (0..dim).collect();
        axes.shuffle(rng);
        let scale = separation / std::f64::consts::SQRT_2;
        (0..classes)
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[axes[c]] = if rng.random::<bool>() { scale } else { -scale };
                v
            })
            .collect()
    } else {
        // Not enough room for a regular simplex: random directions rescaled
        // so the closest pair of means is `separation` apart.
        let raw: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let closest = (0..classes)
            .flat_map(|i| (i + 1..classes).map(move |j| (i, j)))
            .map(|(i, j)| dist2(&raw[i], &raw[j]))
            .fold(f64::INFINITY, f64::min);
        let scale = separation / closest.max(f64::MIN_POSITIVE);
        raw.into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect()
    };
    let centroid = crate::linalg::mean(&means);
    for m in &mut means {
        for (v, c) in m.iter_mut().zip(&centroid) {
            *v -= c;
        }
    }
    means
}

/// Disjoint split of a dataset across devices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub alpha: f64,
    pub seed: u64,
    /// Sample indices held by each device.
    pub devices: Vec<Vec<usize>>,
    /// Proportion draws that left some device empty before one succeeded.
    pub resamples: usize,
    /// Samples moved round-robin into empty shards after resampling gave up.
    pub top_ups: usize,
}

impl Partition {
    pub fn shards(&self, data: &Dataset) -> Vec<Dataset> {
        self.devices.iter().map(|idx| data.subset(idx)).collect()
    }

    /// Device → sample-index manifest as JSON.
    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const MAX_PARTITION_DRAWS: usize = 100;

/// Splits each class across `m` devices with proportions drawn from
/// `Dirichlet(α·1_m)`.
pub fn dirichlet_partition(data: &Dataset, m: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if m < 1 {
        return Err(Error::Config("need at least one device".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "Dirichlet alpha must be > 0, got {alpha}"
        )));
    }
    if data.len() < m {
        return Err(Error::Config(format!(
            "{} samples cannot give each of {m} devices at least one",
            data.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes().max(1)];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut devices = Vec::new();
    let mut resamples = 0;
    for attempt in 0..MAX_PARTITION_DRAWS {
        devices = vec![Vec::new(); m];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet_draw(&gamma, m, &mut rng);
            let n = members.len();
            let mut start = 0;
            let mut cumulative = 0.0;
            for (dev, p) in props.iter().enumerate() {
                cumulative += p;
                let end = if dev + 1 == m {
                    n
                } else {
                    ((cumulative * n as f64).round() as usize).clamp(start, n)
                };
                devices[dev].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if devices.iter().all(|d| !d.is_empty()) {
            resamples = attempt;
            break;
        }
        resamples = attempt + 1;
    }

    let mut top_ups = 0;
    while let Some(empty) = devices.iter().position(Vec::is_empty) {
        let donor = (0..m)
            .max_by_key(|&d| (devices[d].len(), std::cmp::Reverse(d)))
            .unwrap();
        let sample = devices[donor]
            .pop()
            .expect("donor holds at least two samples");
        devices[empty].push(sample);
        top_ups += 1;
    }
    for d in &mut devices {
        d.sort_unstable();
    }
    Ok(Partition {
        alpha,
        seed,
        devices,
        resamples: resamples.min(MAX_PARTITION_DRAWS),
        top_ups,
    })
}

fn dirichlet_draw(gamma: &Gamma<f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // Every Gamma draw underflowed (very small α): all mass to one device.
        let mut p = vec![0.0; m];
        p[rng.random_range(0..m)] = 1.0;
        p
    }
}
