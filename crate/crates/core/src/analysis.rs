//! Closed-form consensus and convergence bounds, the inequalities behind
//! them, and checks of both against recorded runs.
//!
//! Every check is an upper-bound assertion. Floating-point slack is only
//! ever granted against false negatives and is at most `1e-12` relative.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataflow::{Dataset, LocalLoss, LossKind};
use crate::engine::{unrolled_state_check, RunOutput, RunTrace};
use crate::linalg::{axpy, dot, norm2, sub};
use crate::topology::{mixing_constants, mixing_product, GraphSchedule, MixingMatrix};
use crate::{Error, MirrorMap, ModelVec, Result};

const SLACK: f64 = 1e-12;

/// Constants entering the consensus and convergence bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub m: usize,
    pub zeta: f64,
    pub window: usize,
    pub vartheta: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub r: f64,
    pub grad_clip: f64,
    pub eta: f64,
    pub iters: usize,
}

impl TheoryConstants {
    pub fn new(
        m: usize,
        zeta: f64,
        window: usize,
        map: &MirrorMap,
        grad_clip: f64,
        eta: f64,
        iters: usize,
    ) -> Result<Self> {
        if !(zeta > 0.0 && zeta <= 1.0) {
            return Err(Error::Config(format!(
                "zeta must lie in (0, 1] for kappa < 1, got {zeta}"
            )));
        }
        let mc = mixing_constants(m, zeta, window);
        let c = Self {
            m,
            zeta,
            window,
            vartheta: mc.vartheta,
            kappa: mc.kappa,
            sigma: map.sigma(),
            r: map.r(),
            grad_clip,
            eta,
            iters,
        };
        c.require_contraction()?;
        Ok(c)
    }

    fn require_contraction(&self) -> Result<()> {
        if self.kappa < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "kappa = {} >= 1: the mixing bound does not contract",
                self.kappa
            )))
        }
    }
}

/// `ϑ(κ^(t−1) Σ_j‖h(w_{j,0})‖ + mηG/(1−κ) + 2ηG)`.
///
/// `t = 0` is evaluated literally (a `κ^(-1)` factor), which is how the
/// convergence bound's sum uses it.
pub fn consensus_bound(t: usize, c: &TheoryConstants, init_mirror_norm_sum: f64) -> Result<f64> {
    c.require_contraction()?;
    let m = c.m as f64;
    let decay = c.kappa.powf(t as f64 - 1.0);
    Ok(c.vartheta
        * (decay * init_mirror_norm_sum
            + m * c.eta * c.grad_clip / (1.0 - c.kappa)
            + 2.0 * c.eta * c.grad_clip))
}

/// The three terms of the convergence bound on `min_t F(w̄_t) − F(x*)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBound {
    /// `(2mG/T) Σ_{t<T} [(ϑ/σ)(consensus bracket at t)]^(1/(r−1))`
    pub consensus: f64,
    /// `m (r−1)/r [(1/σ) η G^r]^(1/(r−1))`
    pub step: f64,
    /// `m D_φ(x*, w̄_0) / (ηT)`
    pub initialization: f64,
    pub total: f64,
}

pub fn convergence_bound(
    c: &TheoryConstants,
    init_mirror_norm_sum: f64,
    map: &MirrorMap,
    x_star: &[f64],
    initial_mean: &[f64],
) -> Result<ConvergenceBound> {
    c.require_contraction()?;
    let m = c.m as f64;
    let t_total = c.iters as f64;
    let root = 1.0 / (c.r - 1.0);
    let consensus_sum: f64 = (0..c.iters)
        .map(|t| {
            let bracket = consensus_bound(t, c, init_mirror_norm_sum)? / c.vartheta;
            Ok((c.vartheta / c.sigma * bracket).powf(root))
        })
        .sum::<Result<f64>>()?;
    let consensus = 2.0 * m * c.grad_clip / t_total * consensus_sum;
    let step = m * (c.r - 1.0) / c.r * (c.eta * c.grad_clip.powf(c.r) / c.sigma).powf(root);
    let initialization = m * map.bregman(x_star, initial_mean)? / (c.eta * t_total);
    Ok(ConvergenceBound {
        consensus,
        step,
        initialization,
        total: consensus + step + initialization,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepSize {
    Explicit(f64),
    /// `η* = (T^(r−1)/m)^(1/r)` with unit constant.
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryRate {
    pub rate: f64,
    pub eta: f64,
}

/// Order-of-magnitude rate `m(ηm)^(1/(r−1)) + m/(ηT)`; with the optimal
/// step it is `(m^(r+1)/T)^(1/r)`.
pub fn corollary_rates(m: usize, iters: usize, r: f64, step: StepSize) -> Result<CorollaryRate> {
    if m < 1 || iters < 1 || !(r >= 2.0) {
        return Err(Error::Config(format!(
            "corollary rates need m, T >= 1 and r >= 2 (got m={m}, T={iters}, r={r})"
        )));
    }
    let (m, t) = (m as f64, iters as f64);
    Ok(match step {
        StepSize::Explicit(eta) => CorollaryRate {
            rate: m * (eta * m).powf(1.0 / (r - 1.0)) + m / (eta * t),
            eta,
        },
        StepSize::Optimal => CorollaryRate {
            rate: (m.powf(r + 1.0) / t).powf(1.0 / r),
            eta: (t.powf(r - 1.0) / m).powf(1.0 / r),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    /// `(Σ α_i x_i)^(1/p)`
    pub lhs: f64,
    /// `(Σ x_i/m)^(1/p)`
    pub uniform_root: f64,
    /// `1 + m·max_i|α_i − 1/m| / p`
    pub factor: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Skew correction: `(Σ α_i x_i)^(1/p) ≤ (Σ x_i/m)^(1/p)·(1 + m·max|α_i − 1/m|/p)`
/// for positive `x` and near-uniform `α` (`max|α_i − 1/m| ≤ 1/m`).
pub fn skew_correction_check(alphas: &[f64], x: &[f64], p: f64) -> Result<SkewReport> {
    let m = alphas.len();
    if m == 0 || x.len() != m {
        return Err(Error::Domain(format!(
            "need matching nonempty weights and values, got {} and {}",
            m,
            x.len()
        )));
    }
    if !(p > 0.0) {
        return Err(Error::Domain(format!("p must be positive, got {p}")));
    }
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("values must be strictly positive".into()));
    }
    if alphas.iter().any(|&a| !(a >= 0.0)) || (alphas.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
        return Err(Error::Domain(
            "weights must be nonnegative and sum to 1".into(),
        ));
    }
    let uniform = 1.0 / m as f64;
    let skew = alphas
        .iter()
        .map(|a| (a - uniform).abs())
        .fold(0.0, f64::max);
    if skew > uniform * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "max |alpha_i - 1/m| = {skew} exceeds 1/m; the inequality is only claimed near uniform weights"
        )));
    }
    let lhs = dot(alphas, x).powf(1.0 / p);
    let uniform_root = (x.iter().sum::<f64>() * uniform).powf(1.0 / p);
    let factor = 1.0 + m as f64 * skew / p;
    let rhs = uniform_root * factor;
    Ok(SkewReport {
        lhs,
        uniform_root,
        factor,
        rhs,
        holds: lhs <= rhs * (1.0 + SLACK),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmGmReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Weighted AM-GM step of the convergence proof, with `delta` standing for
/// `‖w̄_t − w̄_{t+1}‖`:
/// `(mηG)δ ≤ (r−1)[(mηG)^r / (σ r^(r−1) m)]^(1/(r−1)) + m(σ/r)δ^r`.
pub fn weighted_amgm_check(
    m: f64,
    eta: f64,
    grad_clip: f64,
    sigma: f64,
    r: f64,
    delta: f64,
) -> AmGmReport {
    let a = m * eta * grad_clip;
    let lhs = a * delta;
    let first = (r - 1.0) * (a.powf(r) / (sigma * r.powf(r - 1.0) * m)).powf(1.0 / (r - 1.0));
    let rhs = first + m * sigma / r * delta.powf(r);
    AmGmReport {
        lhs,
        rhs,
        holds: lhs <= rhs + SLACK * lhs.max(rhs),
    }
}

/// The `δ` at which the AM-GM inequality is tight:
/// `δ* = (mηG/(σm))^(1/(r−1))`.
pub fn amgm_equality_delta(m: f64, eta: f64, grad_clip: f64, sigma: f64, r: f64) -> f64 {
    (m * eta * grad_clip / (sigma * m)).powf(1.0 / (r - 1.0))
}

/// Minimiser of `F = Σ f_i` from the centralised solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x_star: ModelVec,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// `‖x_gd − x_normal‖_∞` when every loss is quadratic with a
    /// nonsingular normal matrix.
    pub closed_form_gap: Option<f64>,
}

const ORACLE_MAX_ITERS: usize = 1_000_000;

/// Full-batch gradient descent with Armijo backtracking on `F = Σ f_i`
/// (unclipped gradients), started from zero, until `‖∇F‖ ≤ tolerance`.
///
/// The trial step each iteration is the Barzilai-Borwein step, which the
/// backtracking then shrinks until sufficient decrease holds.
pub fn centralized_oracle(
    losses: &[LocalLoss],
    shards: &[Dataset],
    tolerance: f64,
) -> Result<OracleSolution> {
    if losses.is_empty() || losses.len() != shards.len() {
        return Err(Error::Config("oracle needs one shard per loss".into()));
    }
    let dim = losses[0].param_dim(&shards[0]);
    let value =
        |w: &[f64]| -> Result<f64> { losses.iter().zip(shards).map(|(l, d)| l.value(d, w)).sum() };
    let gradient = |w: &[f64]| -> Result<ModelVec> {
        let mut g = vec![0.0; dim];
        for (l, d) in losses.iter().zip(shards) {
            axpy(1.0, &l.raw_gradient(d, w)?, &mut g);
        }
        Ok(g)
    };

    let mut x = vec![0.0; dim];
    let mut f = value(&x)?;
    let mut g = gradient(&x)?;
    let mut step = 1.0;
    let mut iterations = 0;
    while norm2(&g) > tolerance {
        if iterations >= ORACLE_MAX_ITERS {
            return Err(Error::Convergence(format!(
                "gradient norm {} still above {tolerance} after {ORACLE_MAX_ITERS} iterations",
                norm2(&g)
            )));
        }
        iterations += 1;
        let g_sq = dot(&g, &g);
        let mut trial_step = step;
        let (x_new, f_new) = loop {
            let candidate: ModelVec = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| xi - trial_step * gi)
                .collect();
            let fc = value(&candidate)?;
            if fc <= f - 0.5 * trial_step * g_sq {
                break (candidate, fc);
            }
            trial_step *= 0.5;
            if trial_step < 1e-300 {
                return Err(Error::Convergence("line search step underflowed".into()));
            }
        };
        let g_new = gradient(&x_new)?;
        let s = sub(&x_new, &x);
        let y = sub(&g_new, &g);
        let sy = dot(&s, &y);
        step = if sy > 0.0 {
            (dot(&s, &s) / sy).clamp(1e-10, 1e10)
        } else {
            (trial_step * 2.0).min(1e10)
        };
        x = x_new;
        f = f_new;
        g = g_new;
    }

    let closed_form_gap = match normal_equations(losses) {
        Some(exact) => {
            let gap = x
                .iter()
                .zip(exact.iter())
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            if gap > 1e-6 {
                return Err(Error::Convergence(format!(
                    "descent solution differs from the normal-equations solution by {gap}"
                )));
            }
            Some(gap)
        }
        None => None,
    };
    Ok(OracleSolution {
        grad_norm: norm2(&g),
        x_star: x,
        f_star: f,
        iterations,
        closed_form_gap,
    })
}

/// `(Σ AᵢᵀAᵢ)⁻¹ Σ Aᵢᵀbᵢ` when all losses are quadratic.
fn normal_equations(losses: &[LocalLoss]) -> Option<DVector<f64>> {
    let mut gram: Option<DMatrix<f64>> = None;
    let mut rhs: Option<DVector<f64>> = None;
    for loss in losses {
        let LossKind::Quadratic { a, b } = &loss.kind else {
            return None;
        };
        let d = a[0].len();
        let am = DMatrix::from_fn(a.len(), d, |i, j| a[i][j]);
        let bv = DVector::from_column_slice(b);
        let at = am.transpose();
        let ata = &at * &am;
        let atb = &at * bv;
        gram = Some(gram.map_or(ata.clone(), |g| g + ata));
        rhs = Some(rhs.map_or(atb.clone(), |r| r + atb));
    }
    gram?.lu().solve(&rhs?)
}

/// One named inequality check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    /// Smallest `bound − measured` seen (negative means violated).
    pub min_slack: f64,
    /// Description of the first violation.
    pub witness: Option<String>,
}

impl Check {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: true,
            instances: 0,
            min_slack: f64::INFINITY,
            witness: None,
        }
    }

    /// Records `measured ≤ bound` (with `tolerance` in favour of passing).
    fn record(
        &mut self,
        measured: f64,
        bound: f64,
        tolerance: f64,
        witness: impl FnOnce() -> String,
    ) {
        self.instances += 1;
        let slack = bound - measured;
        self.min_slack = self.min_slack.min(slack);
        if !(slack >= -tolerance) && self.passed {
            self.passed = false;
            self.witness = Some(witness());
        }
    }

    fn merge(&mut self, other: Check) {
        self.instances += other.instances;
        self.min_slack = self.min_slack.min(other.min_slack);
        if !other.passed && self.passed {
            self.passed = false;
            self.witness = other.witness;
        }
    }
}

/// `|P(t,τ)_ij − 1/m| ≤ ϑκ^(t−τ)` over window-aligned `τ = kB + 1` and lags
/// `t − τ ∈ {0, B, …, max_windows·B}`, with `ζ` the smallest positive entry
/// among `P(τ), …, P(t)`.
pub fn check_mixing_schedule(schedule: &GraphSchedule, max_windows: usize) -> Check {
    let mut check = Check::new("mixing_product_bound");
    let matrices = schedule.mixing_matrices();
    let b = schedule.window();
    let m = schedule.m();
    let total = schedule.len();
    for tau in (1..=total).step_by(b) {
        let mut product = DMatrix::<f64>::identity(m, m);
        let mut zeta = f64::INFINITY;
        let mut next = tau;
        for t in tau..=total.min(tau + max_windows * b) {
            product = matrices[t - 1].entries() * &product;
            zeta = zeta.min(matrices[t - 1].zeta());
            if t != next {
                continue;
            }
            next += b;
            let deviation = product
                .iter()
                .fold(0.0f64, |acc, v| acc.max((v - 1.0 / m as f64).abs()));
            let bound = mixing_constants(m, zeta, b).bound(t - tau);
            check.record(deviation, bound, 0.0, || {
                format!("t={t}, tau={tau}: deviation {deviation} > bound {bound}")
            });
        }
    }
    check
}

/// Doubly stochastic closure of the running products of `matrices`.
pub fn check_product_stochasticity(matrices: &[MixingMatrix]) -> Check {
    let mut check = Check::new("product_doubly_stochastic");
    if matrices.is_empty() {
        return check;
    }
    let m = matrices[0].m();
    for t in 1..=matrices.len() {
        let product = mixing_product(matrices, t, 1);
        let worst = (0..m)
            .map(|i| {
                (product.row(i).sum() - 1.0)
                    .abs()
                    .max((product.column(i).sum() - 1.0).abs())
            })
            .fold(0.0, f64::max);
        check.record(worst, 1e-10 * t as f64, 0.0, || {
            format!("after {t} products the row/column sums drift by {worst}")
        });
    }
    check
}

/// Constants of a recorded run; `zeta` overrides the run-wide minimum.
pub fn run_constants(output: &RunOutput, zeta: Option<f64>) -> Result<TheoryConstants> {
    let cfg = &output.metrics.summary.config;
    TheoryConstants::new(
        cfg.m,
        zeta.unwrap_or(output.metrics.summary.zeta),
        cfg.window,
        &output.map,
        cfg.grad_clip,
        cfg.eta,
        cfg.iters,
    )
}

/// Measured `‖h(w_{i,t}) − h(w̄_t)‖₂` against [`consensus_bound`] at every
/// `(i, t)` of a recorded run.
pub fn check_consensus_bound(output: &RunOutput) -> Result<(TheoryConstants, Check)> {
    let c = run_constants(output, None)?;
    Ok((c, consensus_check(output, &c)?))
}

fn consensus_check(output: &RunOutput, c: &TheoryConstants) -> Result<Check> {
    let mut check = Check::new("consensus_bound");
    for (t, per_device) in output.mirror_consensus.iter().enumerate() {
        let bound = consensus_bound(t, c, output.initial_mirror_norm_sum)?;
        for (i, &measured) in per_device.iter().enumerate() {
            check.record(measured, bound, 0.0, || {
                format!("device {i}, t={t}: consensus {measured} > bound {bound}")
            });
        }
    }
    Ok(check)
}

/// `min_t F(w̄_t) − F(x*)` against [`convergence_bound`].
pub fn check_convergence_bound(
    output: &RunOutput,
    constants: &TheoryConstants,
    oracle: &OracleSolution,
) -> Result<(ConvergenceBound, f64, Check)> {
    let bound = convergence_bound(
        constants,
        output.initial_mirror_norm_sum,
        &output.map,
        &oracle.x_star,
        &output.initial_mean,
    )?;
    let gap = output.metrics.summary.min_loss - oracle.f_star;
    let mut check = Check::new("convergence_bound");
    check.record(gap, bound.total, 0.0, || {
        format!("min loss gap {gap} > bound {}", bound.total)
    });
    Ok((bound, gap, check))
}

/// Unrolled-recursion check at `k ∈ {0, t/2, t}` for every `t` of a trace.
pub fn check_unrolled_trace(trace: &RunTrace) -> Result<Check> {
    let mut check = Check::new("unrolled_recursion");
    for t in 0..trace.iterations() {
        for k in [0, t / 2, t] {
            let u = unrolled_state_check(trace, t, k)?;
            let measured = u.max_deviation.max(u.mean_deviation);
            check.record(measured, u.tolerance, 0.0, || {
                format!("t={t}, k={k}: deviation {measured} > {}", u.tolerance)
            });
        }
    }
    Ok(check)
}

/// Draws pairs for every `p` in `exponents` and certifies
/// `D_φ(x, y) ≥ (σ/r)‖x − y‖_r^r`.
pub fn check_uniform_convexity(exponents: &[f64], draws: usize, seed: u64) -> Result<Check> {
    let mut check = Check::new("uniform_convexity");
    for (n, &p) in exponents.iter().enumerate() {
        let map = MirrorMap::signed_power(p)?;
        let cert = map.certify_uniform_convexity(draws, seed.wrapping_add(n as u64));
        let mut sub_check = Check::new("uniform_convexity");
        sub_check.instances = cert.samples_checked;
        sub_check.min_slack = cert.min_slack;
        if let Some(w) = cert.witness {
            sub_check.passed = false;
            sub_check.witness = Some(format!(
                "p={p}: D({:?}, {:?}) = {} < {}",
                w.x, w.y, w.divergence, w.bound
            ));
        }
        check.merge(sub_check);
    }
    Ok(check)
}

/// Weighted AM-GM over seeded draws of `(m, η, G, σ, r, δ)`.
pub fn check_weighted_amgm(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = Check::new("weighted_amgm");
    for _ in 0..draws {
        let m = f64::from(rng.random_range(1u32..=64));
        let eta = 10f64.powf(rng.random_range(-4.0..0.0));
        let g = 10f64.powf(rng.random_range(-2.0..1.0));
        let sigma = 10f64.powf(rng.random_range(-5.0..0.5));
        let r = rng.random_range(2.0..16.0);
        let delta = 10f64.powf(rng.random_range(-6.0..2.0));
        let rep = weighted_amgm_check(m, eta, g, sigma, r, delta);
        check.record(rep.lhs, rep.rhs, SLACK * rep.lhs.max(rep.rhs), || {
            format!(
                "m={m}, eta={eta}, G={g}, sigma={sigma}, r={r}, delta={delta}: {} > {}",
                rep.lhs, rep.rhs
            )
        });
    }
    check
}

/// Skew correction over seeded near-uniform weights, positive values and
/// `p ∈ [1, 15]`.
pub fn check_skew_correction(draws: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = Check::new("skew_correction");
    for _ in 0..draws {
        let m = rng.random_range(2usize..=16);
        let alphas = near_uniform_weights(m, rng.random_range(0.0..1.0), &mut rng);
        let x: Vec<f64> = (0..m)
            .map(|_| 10f64.powf(rng.random_range(-3.0..3.0)))
            .collect();
        let p = rng.random_range(1.0..15.0);
        let rep = skew_correction_check(&alphas, &x, p)?;
        check.record(rep.lhs, rep.rhs, SLACK * rep.rhs, || {
            format!(
                "alpha={alphas:?}, x={x:?}, p={p}: {} > {}",
                rep.lhs, rep.rhs
            )
        });
    }
    Ok(check)
}

/// Probability weights with `max|α_i − 1/m| ≤ spread/m`.
pub fn near_uniform_weights(m: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let u = 1.0 / m as f64;
    // Zero-sum perturbation with entries in [-1, 1].
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let centre = raw.iter().sum::<f64>() / m as f64;
    let centred: Vec<f64> = raw.iter().map(|v| v - centre).collect();
    let peak = centred
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut alphas: Vec<f64> = centred.iter().map(|v| u + spread * u * v / peak).collect();
    // Repair rounding so the weights are exact probabilities.
    let total: f64 = alphas.iter().sum();
    alphas.iter_mut().for_each(|a| *a = (*a / total).max(0.0));
    alphas
}

/// Everything [`verify_run`] measured on one AIMS run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub label: String,
    pub constants: TheoryConstants,
    /// `consensus_bound(t)` for `t = 0..=T`.
    pub consensus_bound: Vec<f64>,
    pub convergence_bound: ConvergenceBound,
    pub x_star: ModelVec,
    pub f_star: f64,
    /// `min_t F(w̄_t) − F(x*)`
    pub empirical_gap: f64,
    pub checks: Vec<Check>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Runs the oracle and every run-level check (mixing, consensus,
/// convergence) on one recorded AIMS run.
pub fn verify_run(label: &str, output: &RunOutput, oracle_tolerance: f64) -> Result<TheoryReport> {
    verify_run_with(
        label,
        output,
        run_constants(output, None)?,
        oracle_tolerance,
    )
}

/// [`verify_run`] with caller-supplied constants.
pub fn verify_run_with(
    label: &str,
    output: &RunOutput,
    constants: TheoryConstants,
    oracle_tolerance: f64,
) -> Result<TheoryReport> {
    let oracle = centralized_oracle(
        &output.problem.losses,
        &output.problem.shards,
        oracle_tolerance,
    )?;
    let consensus = consensus_check(output, &constants)?;
    let (bound, gap, convergence) = check_convergence_bound(output, &constants, &oracle)?;
    let per_iteration = (0..=constants.iters)
        .map(|t| consensus_bound(t, &constants, output.initial_mirror_norm_sum))
        .collect::<Result<Vec<_>>>()?;
    let mixing = check_mixing_schedule(&output.schedule, 10);
    let stochastic =
        check_product_stochasticity(&output.schedule.mixing_matrices()[..constants.iters]);
    Ok(TheoryReport {
        label: label.to_string(),
        constants,
        consensus_bound: per_iteration,
        convergence_bound: bound,
        x_star: oracle.x_star,
        f_star: oracle.f_star,
        empirical_gap: gap,
        checks: vec![mixing, stochastic, consensus, convergence],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::make_synthetic;
    use approx::assert_relative_eq;

    fn consts(
        m: usize,
        zeta: f64,
        b: usize,
        eta: f64,
        map: MirrorMap,
        iters: usize,
    ) -> TheoryConstants {
        TheoryConstants::new(m, zeta, b, &map, 1.0, eta, iters).unwrap()
    }

    #[test]
    fn consensus_bound_examples() {
        let c = consts(2, 0.25, 1, 0.1, MirrorMap::identity(), 10);
        let v = consensus_bound(1, &c, 0.0).unwrap();
        let expected = 1.0 / 0.984375f64.powi(2) * (0.2 / 0.015625 + 0.2);
        assert_relative_eq!(v, expected, max_relative = 1e-12);
        assert!((v - 13.4160).abs() < 5e-4, "{v}");

        let limit = c.vartheta * (0.2 / (1.0 - c.kappa) + 0.2);
        let far = consensus_bound(5000, &c, 3.0).unwrap();
        assert!((far - limit).abs() < 1e-9 * limit);

        let still = consts(2, 0.25, 1, 0.0, MirrorMap::identity(), 10);
        for t in [1, 2, 50] {
            assert_eq!(consensus_bound(t, &still, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn kappa_at_one_is_config_error() {
        assert!(matches!(
            TheoryConstants::new(4, 0.0, 1, &MirrorMap::identity(), 1.0, 0.1, 10),
            Err(Error::Config(_))
        ));
        let mut c = consts(2, 0.25, 1, 0.1, MirrorMap::identity(), 10);
        c.kappa = 1.0;
        assert!(matches!(consensus_bound(3, &c, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn convergence_bound_terms() {
        let map = MirrorMap::identity();
        let c = consts(3, 0.2, 2, 0.05, map, 100);
        let b = convergence_bound(&c, 0.0, &map, &[1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(b.step, 1.5 * 0.05, max_relative = 1e-12);
        assert_relative_eq!(
            b.initialization,
            3.0 * 2.5 / (0.05 * 100.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(b.total, b.consensus + b.step + b.initialization);

        let long = consts(3, 0.2, 2, 0.05, map, 1_000_000);
        let lb = convergence_bound(&long, 0.0, &map, &[1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert!(lb.initialization < 1e-3);
    }

    #[test]
    fn convergence_consensus_term_uses_kappa_inverse_at_zero() {
        let map = MirrorMap::signed_power(3.0).unwrap();
        let c = consts(2, 0.5, 1, 0.1, map, 1);
        let b = convergence_bound(&c, 2.0, &map, &[0.0], &[0.0]).unwrap();
        let bracket = 2.0 / c.kappa + 2.0 * 0.1 / (1.0 - c.kappa) + 0.2;
        let expected = 2.0 * 2.0 * (c.vartheta / c.sigma * bracket).powf(1.0 / 3.0);
        assert_relative_eq!(b.consensus, expected, max_relative = 1e-12);
    }

    #[test]
    fn corollary_examples() {
        let r = corollary_rates(1, 1, 2.0, StepSize::Optimal).unwrap();
        assert_eq!((r.rate, r.eta), (1.0, 1.0));
        assert_eq!(
            corollary_rates(16, 4, 2.0, StepSize::Optimal).unwrap().rate,
            32.0
        );
        let big = corollary_rates(16, 4, 16.0, StepSize::Optimal)
            .unwrap()
            .rate;
        assert!((big - 17.45).abs() < 5e-3, "{big}");
        let opt = corollary_rates(7, 300, 4.0, StepSize::Optimal).unwrap();
        let explicit = corollary_rates(7, 300, 4.0, StepSize::Explicit(opt.eta)).unwrap();
        assert!(explicit.rate > 0.0);
        assert!(corollary_rates(2, 2, 1.5, StepSize::Optimal).is_err());
    }

    #[test]
    fn skew_examples() {
        let rep = skew_correction_check(&[0.25; 4], &[1.0, 2.0, 3.0, 9.0], 3.0).unwrap();
        assert_eq!(rep.factor, 1.0);
        assert_relative_eq!(rep.lhs, rep.rhs, max_relative = 1e-15);
        assert!(rep.holds);

        let rep = skew_correction_check(&[0.6, 0.4], &[1.0, 2.0], 5.0).unwrap();
        assert!((rep.lhs - 1.0696).abs() < 5e-5);
        assert!((rep.rhs - 1.1279).abs() < 5e-5);
        assert!(rep.holds);

        let at_p = skew_correction_check(&[0.6, 0.4], &[1.0, 2.0], 4.0).unwrap();
        let at_2p = skew_correction_check(&[0.6, 0.4], &[1.0, 2.0], 8.0).unwrap();
        assert_relative_eq!(
            (at_2p.factor - 1.0) * 2.0,
            at_p.factor - 1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn skew_domain_errors() {
        assert!(skew_correction_check(&[0.9, 0.1], &[1.0, 2.0], 2.0).is_ok());
        assert!(matches!(
            skew_correction_check(&[1.0, 0.0, 0.0], &[1.0, 2.0, 3.0], 2.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            skew_correction_check(&[0.5, 0.5], &[0.0, 2.0], 2.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            skew_correction_check(&[0.5, 0.6], &[1.0, 2.0], 2.0),
            Err(Error::Domain(_))
        ));
    }

    /// Locates the tight point by golden-section search on `rhs − lhs`,
    /// independently of the closed form.
    #[test]
    fn amgm_equality_point() {
        let (m, eta, g, sigma, r) = (5.0, 0.03, 0.8, 0.25, 4.0);
        let gap = |d: f64| {
            let rep = weighted_amgm_check(m, eta, g, sigma, r, d);
            rep.rhs - rep.lhs
        };
        let (mut lo, mut hi) = (0.0, 10.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if gap(a) < gap(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let found = 0.5 * (lo + hi);
        let closed = amgm_equality_delta(m, eta, g, sigma, r);
        assert!((found - closed).abs() < 1e-6, "{found} vs {closed}");
        let rep = weighted_amgm_check(m, eta, g, sigma, r, closed);
        assert!((rep.lhs - rep.rhs).abs() <= 1e-9 * rep.rhs);
        assert!(rep.holds);

        let zero = weighted_amgm_check(m, eta, g, sigma, r, 0.0);
        assert_eq!(zero.lhs, 0.0);
        assert!(zero.rhs > 0.0 && zero.holds);
    }

    #[test]
    fn property_suites_pass() {
        assert!(check_weighted_amgm(10_000, 1).passed);
        assert!(check_skew_correction(10_000, 2).unwrap().passed);
        let exps: Vec<f64> = (1..=15).map(f64::from).collect();
        assert!(check_uniform_convexity(&exps, 2000, 3).unwrap().passed);
    }

    #[test]
    fn near_uniform_weights_are_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let m = rng.random_range(2..20);
            let a = near_uniform_weights(m, 1.0, &mut rng);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.iter().all(|&v| v >= 0.0));
            let skew = a
                .iter()
                .map(|v| (v - 1.0 / m as f64).abs())
                .fold(0.0, f64::max);
            assert!(skew <= (1.0 + 1e-12) / m as f64);
        }
    }

    fn quad(a: Vec<Vec<f64>>, b: Vec<f64>) -> LocalLoss {
        LocalLoss::quadratic(a, b, 1.0).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let sol =
            centralized_oracle(&[quad(eye, vec![1.0, 2.0])], &[Dataset::empty()], 1e-10).unwrap();
        assert!((sol.x_star[0] - 1.0).abs() < 1e-9 && (sol.x_star[1] - 2.0).abs() < 1e-9);
        assert!(sol.f_star < 1e-18);

        let sol = centralized_oracle(
            &[
                quad(vec![vec![1.0]], vec![0.0]),
                quad(vec![vec![1.0]], vec![2.0]),
            ],
            &[Dataset::empty(), Dataset::empty()],
            1e-10,
        )
        .unwrap();
        assert!((sol.x_star[0] - 1.0).abs() < 1e-9);
        assert!(sol.closed_form_gap.unwrap() < 1e-6);
    }

    #[test]
    fn oracle_logistic_certificate() {
        let data = make_synthetic(2, 2, 40, 10.0, 1).unwrap();
        let loss = LocalLoss::logistic(2, 1e-4, 1.0).unwrap();
        let sol = centralized_oracle(
            std::slice::from_ref(&loss),
            std::slice::from_ref(&data),
            1e-6,
        )
        .unwrap();
        let g = loss.raw_gradient(&data, &sol.x_star).unwrap();
        assert!(norm2(&g) <= 1e-6);
        assert!(sol.closed_form_gap.is_none());
        // Well-separated blobs are fitted essentially perfectly.
        assert!(loss.accuracy(&data, &sol.x_star).unwrap() >= 0.99);
    }

    #[test]
    fn mixing_check_detects_violation() {
        use crate::topology::generate_schedule;
        let s = generate_schedule(4, 60, 0.5, 3, 1).unwrap();
        let c = check_mixing_schedule(&s, 10);
        assert!(c.passed && c.instances > 0);
        assert!(check_product_stochasticity(&s.mixing_matrices()).passed);
        // A disconnected schedule never mixes, so long lags break the bound.
        let idle = GraphSchedule::from_rounds(2, 1, vec![Vec::new(); 3000]).unwrap();
        let mut c = Check::new("x");
        let mc = mixing_constants(2, 1.0, 1);
        c.record(0.5, mc.bound(2999), 0.0, || "witness".into());
        assert!(!c.passed);
        assert!(!check_mixing_schedule(&idle, 3000).passed);
    }
}
