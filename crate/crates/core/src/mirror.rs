//! Mirror maps `h = ∇φ` and the geometry they induce.
//!
//! Only separable potentials are supported: `φ(x) = Σ_k |x_k|^(p+1) / (p+1)`
//! with gradient `h(x)_k = sign(x_k)·|x_k|^p`. The signed extension makes `h`
//! a bijection of ℝ for every `p ≥ 1`, so negative coordinates are handled
//! the same way as positive ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::norm_lq;
use crate::{Error, Result};

/// Model parameters, one real per coordinate.
pub type ModelVec = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorKind {
    Identity,
    SignedPower(f64),
}

/// A mirror map together with the uniform convexity parameters `(σ, r)` of
/// its potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorMap {
    kind: MirrorKind,
    sigma: f64,
    r: f64,
}

impl MirrorMap {
    /// `h(x) = x`, `φ = ½‖x‖²`, `(σ, r) = (1, 2)`.
    pub fn identity() -> Self {
        Self {
            kind: MirrorKind::Identity,
            sigma: 1.0,
            r: 2.0,
        }
    }

    /// `h(x)_k = sign(x_k)|x_k|^p` with `σ = 2^(1-p)` and `r = p + 1`.
    ///
    /// `p = 1` yields the same map as [`MirrorMap::identity`].
    pub fn signed_power(p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::Config(format!(
                "mirror exponent p must be a finite real >= 1, got {p}"
            )));
        }
        if p == 1.0 {
            return Ok(Self::identity());
        }
        Ok(Self {
            kind: MirrorKind::SignedPower(p),
            sigma: 2f64.powf(1.0 - p),
            r: p + 1.0,
        })
    }

    /// Replaces the convexity coefficient. Used to probe the certifier with
    /// deliberately wrong constants.
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn kind(&self) -> MirrorKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// The exponent `p` (1 for the identity).
    pub fn exponent(&self) -> f64 {
        match self.kind {
            MirrorKind::Identity => 1.0,
            MirrorKind::SignedPower(p) => p,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, MirrorKind::Identity)
    }

    #[inline]
    pub fn forward_scalar(&self, x: f64) -> f64 {
        match self.kind {
            MirrorKind::Identity => x,
            MirrorKind::SignedPower(p) => x.signum() * x.abs().powf(p),
        }
    }

    #[inline]
    pub fn inverse_scalar(&self, y: f64) -> f64 {
        match self.kind {
            MirrorKind::Identity => y,
            MirrorKind::SignedPower(p) => y.signum() * y.abs().powf(1.0 / p),
        }
    }

    #[inline]
    fn potential_scalar(&self, x: f64) -> f64 {
        match self.kind {
            MirrorKind::Identity => 0.5 * x * x,
            MirrorKind::SignedPower(p) => x.abs().powf(p + 1.0) / (p + 1.0),
        }
    }

    /// Maps a model into the mirror space.
    pub fn forward(&self, x: &[f64]) -> Result<ModelVec> {
        x.iter()
            .enumerate()
            .map(|(k, &v)| {
                check_finite(k, v, "input")?;
                let out = self.forward_scalar(v);
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(Error::Range {
                        coord: k,
                        context: format!(
                            "|{v}|^{} overflows double precision (p too large for unscaled values)",
                            self.exponent()
                        ),
                    })
                }
            })
            .collect()
    }

    /// Maps a mirror-space point back to model space.
    pub fn inverse(&self, y: &[f64]) -> Result<ModelVec> {
        y.iter()
            .enumerate()
            .map(|(k, &v)| {
                check_finite(k, v, "mirror-space input")?;
                Ok(self.inverse_scalar(v))
            })
            .collect()
    }

    /// `φ(x) = Σ_k |x_k|^(p+1) / (p+1)`.
    pub fn potential(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (k, &v) in x.iter().enumerate() {
            check_finite(k, v, "input")?;
            let term = self.potential_scalar(v);
            if !term.is_finite() {
                return Err(Error::Range {
                    coord: k,
                    context: format!("potential of {v} overflows"),
                });
            }
            total += term;
        }
        Ok(total)
    }

    /// Bregman divergence `D_φ(x, y) = φ(x) − φ(y) − ⟨h(y), x − y⟩`.
    ///
    /// Evaluated per coordinate; each coordinate term is clamped at zero to
    /// absorb cancellation when `x_k ≈ y_k`.
    pub fn bregman(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Shape {
                expected: x.len(),
                got: y.len(),
            });
        }
        let mut total = 0.0;
        for (k, (&a, &b)) in x.iter().zip(y).enumerate() {
            check_finite(k, a, "x")?;
            check_finite(k, b, "y")?;
            let term = match self.kind {
                MirrorKind::Identity => 0.5 * (a - b) * (a - b),
                MirrorKind::SignedPower(_) => {
                    self.potential_scalar(a)
                        - self.potential_scalar(b)
                        - self.forward_scalar(b) * (a - b)
                }
            };
            if !term.is_finite() {
                return Err(Error::Range {
                    coord: k,
                    context: format!("Bregman term for ({a}, {b}) overflows"),
                });
            }
            total += term.max(0.0);
        }
        Ok(total)
    }

    /// Scale of the floating-point error in [`MirrorMap::bregman`] at `(x, y)`.
    fn bregman_scale(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(&a, &b)| {
                self.potential_scalar(a)
                    + self.potential_scalar(b)
                    + (self.forward_scalar(b) * (a - b)).abs()
            })
            .sum()
    }

    /// Samples pairs `(x, y)` uniformly from `[-10, 10]^d`, cycling
    /// `d ∈ {1, 2, 8}`, and checks `D_φ(x, y) ≥ (σ/r)‖x − y‖_r^r`.
    ///
    /// Distances use the `ℓ_r` norm, the norm in which the separable power
    /// potential is `(2^(1-p), p+1)`-uniformly convex in every dimension.
    pub fn certify_uniform_convexity(&self, sample_count: usize, seed: u64) -> Certification {
        const DIMS: [usize; 3] = [1, 2, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut min_slack = f64::INFINITY;
        for i in 0..sample_count {
            let d = DIMS[i % DIMS.len()];
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..=10.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..=10.0)).collect();
            let Ok(divergence) = self.bregman(&x, &y) else {
                continue;
            };
            let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let bound = self.sigma / self.r * norm_lq(&diff, self.r).powf(self.r);
            let slack = divergence - bound;
            min_slack = min_slack.min(slack);
            let tolerance = 1e-12 * self.bregman_scale(&x, &y);
            if slack < -tolerance {
                return Certification {
                    holds: false,
                    samples_checked: i + 1,
                    min_slack,
                    witness: Some(ConvexityWitness {
                        x,
                        y,
                        divergence,
                        bound,
                    }),
                };
            }
        }
        Certification {
            holds: true,
            samples_checked: sample_count,
            min_slack,
            witness: None,
        }
    }
}

fn check_finite(coord: usize, v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Range {
            coord,
            context: format!("{what} coordinate is not finite ({v})"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityWitness {
    pub x: ModelVec,
    pub y: ModelVec,
    pub divergence: f64,
    pub bound: f64,
}

/// Result of [`MirrorMap::certify_uniform_convexity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub holds: bool,
    pub samples_checked: usize,
    /// Smallest `D_φ(x, y) − (σ/r)‖x − y‖_r^r` seen.
    pub min_slack: f64,
    pub witness: Option<ConvexityWitness>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, prop_assume, proptest, Strategy};

    fn power(p: f64) -> MirrorMap {
        MirrorMap::signed_power(p).unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(power(5.0).forward(&[3.0]).unwrap(), vec![243.0]);
        assert_eq!(
            power(1.0).forward(&[-7.25, 0.0, 4.0]).unwrap(),
            vec![-7.25, 0.0, 4.0]
        );
        assert_relative_eq!(
            power(3.0).forward(&[-2.0]).unwrap()[0],
            -8.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn forward_overflow_names_coordinate() {
        let err = power(15.0).forward(&[1.0, 1e30]).unwrap_err();
        match err {
            Error::Range { coord, .. } => assert_eq!(coord, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverse_examples() {
        // 0.4·3^5 + 0.6·11^5
        let y = 0.4 * 243.0 + 0.6 * 161051.0;
        assert_relative_eq!(y, 96727.8, epsilon = 1e-9);
        let x = power(5.0).inverse(&[y]).unwrap()[0];
        assert!((x - 9.9337).abs() < 5e-5, "{x}");
        assert_relative_eq!(
            power(3.0).inverse(&[-8.0]).unwrap()[0],
            -2.0,
            epsilon = 1e-12
        );
        let x = power(2.0).inverse(&[16.0, -16.0]).unwrap();
        assert_relative_eq!(x[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_rejects_non_finite() {
        assert!(power(2.0).inverse(&[f64::NAN]).is_err());
    }

    #[test]
    fn potential_examples() {
        assert_relative_eq!(power(1.0).potential(&[3.0, 4.0]).unwrap(), 12.5);
        assert_relative_eq!(
            power(5.0).potential(&[1.0]).unwrap(),
            1.0 / 6.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            power(2.0).potential(&[-3.0, 2.0]).unwrap(),
            35.0 / 3.0,
            epsilon = 1e-12
        );
        assert_eq!(power(7.0).potential(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn bregman_examples() {
        assert_relative_eq!(power(1.0).bregman(&[3.0], &[1.0]).unwrap(), 2.0);
        for p in [1.0, 2.0, 5.5, 15.0] {
            assert_eq!(power(p).bregman(&[0.7, -1.3], &[0.7, -1.3]).unwrap(), 0.0);
        }
        assert_relative_eq!(
            power(2.0).bregman(&[2.0], &[1.0]).unwrap(),
            4.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn constants_follow_exponent() {
        let m = power(5.0);
        assert_eq!(m.r(), 6.0);
        assert_relative_eq!(m.sigma(), 1.0 / 16.0);
        assert_eq!(power(1.0), MirrorMap::identity());
        assert!(MirrorMap::signed_power(0.5).is_err());
    }

    #[test]
    fn certify_examples() {
        assert!(power(1.0).certify_uniform_convexity(1000, 1).holds);
        assert!(power(5.0).certify_uniform_convexity(1000, 1).holds);
        let bad = power(3.0)
            .with_sigma(10.0)
            .certify_uniform_convexity(1000, 1);
        assert!(!bad.holds);
        let w = bad.witness.expect("witness");
        assert!(w.divergence < w.bound);
    }

    /// Coarse grid search for a violating pair when σ is set to 10 for p = 3,
    /// independent of the sampler.
    #[test]
    fn grid_finds_violation_for_inflated_sigma() {
        let map = power(3.0).with_sigma(10.0);
        let grid: Vec<f64> = (-10..=10).map(f64::from).collect();
        let violated = grid.iter().any(|&x| {
            grid.iter().any(|&y| {
                let d = map.bregman(&[x], &[y]).unwrap();
                d < 10.0 / 4.0 * (x - y).abs().powi(4)
            })
        });
        assert!(violated);
    }

    #[test]
    fn uniform_convexity_many_pairs() {
        for p in 1..=15 {
            let cert = power(f64::from(p)).certify_uniform_convexity(10_000, 2024 + p as u64);
            assert!(cert.holds, "p={p}: {:?}", cert.witness);
        }
    }

    #[test]
    fn bregman_nonnegative_on_seeded_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..10_000 {
            let p = 1.0 + (i % 15) as f64;
            let map = power(p);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            assert!(map.bregman(&x, &y).unwrap() >= 0.0);
            assert_eq!(map.bregman(&x, &x).unwrap(), 0.0);
            if x != y {
                assert!(map.bregman(&x, &y).unwrap() > 0.0);
            }
        }
    }

    fn magnitude() -> impl Strategy<Value = f64> {
        (-6.0f64..6.0, any::<bool>()).prop_map(|(e, neg)| {
            let v = 10f64.powf(e);
            if neg {
                -v
            } else {
                v
            }
        })
    }

    proptest! {
        #[test]
        fn roundtrip(x in proptest::collection::vec(magnitude(), 1..6), p in 1u32..=15) {
            let map = power(f64::from(p));
            let back = map.inverse(&map.forward(&x).unwrap()).unwrap();
            let scale = crate::linalg::norm_inf(&x).max(1.0);
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn gradient_matches_finite_differences(
            x in proptest::collection::vec((0.1f64..5.0, any::<bool>()), 1..4),
            p in 1u32..=15,
        ) {
            let x: Vec<f64> = x.into_iter().map(|(v, neg)| if neg { -v } else { v }).collect();
            let map = power(f64::from(p));
            let grad = map.forward(&x).unwrap();
            for k in 0..x.len() {
                let step = 1e-5 * x[k].abs().max(1.0);
                // Separable potential: difference along coordinate k only.
                let hi = map.potential(&[x[k] + step]).unwrap();
                let lo = map.potential(&[x[k] - step]).unwrap();
                let fd = (hi - lo) / (2.0 * step);
                prop_assert!((fd - grad[k]).abs() <= 1e-5 * grad[k].abs(),
                    "p={} x={} fd={} h={}", p, x[k], fd, grad[k]);
            }
        }

        #[test]
        fn monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, p in 1u32..=15) {
            prop_assume!(a < b);
            let map = power(f64::from(p));
            prop_assert!(map.forward_scalar(a) < map.forward_scalar(b));
        }
    }
}
