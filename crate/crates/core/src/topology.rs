//! Dynamic communication graphs and their doubly stochastic mixing matrices.
//!
//! Rounds are numbered from 1 in the text format and in
//! [`product_mixing_check`]; internally `rounds[t - 1]` holds `E_t`.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Undirected edge between two distinct devices, stored with `lo < hi`
/// (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    lo: usize,
    hi: usize,
}

impl Edge {
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::Config(format!("self-loop on device {a}")));
        }
        Ok(Self {
            lo: a.min(b),
            hi: a.max(b),
        })
    }

    pub fn endpoints(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }
}

/// One topology repair: a random spanning tree merged into `round` because
/// the sampled union over `window` was disconnected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repair {
    pub window: usize,
    /// 1-based round index.
    pub round: usize,
    pub edges_added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSchedule {
    m: usize,
    window: usize,
    density: f64,
    seed: u64,
    rounds: Vec<Vec<Edge>>,
    repairs: Vec<Repair>,
}

impl GraphSchedule {
    /// Builds a schedule from explicit per-round edge sets. Edges are
    /// deduplicated and sorted; connectivity is not required here (see
    /// [`GraphSchedule::check_window_connectivity`]).
    pub fn from_rounds(m: usize, window: usize, rounds: Vec<Vec<Edge>>) -> Result<Self> {
        if m < 1 || window < 1 {
            return Err(Error::Config("schedule needs m >= 1 and B >= 1".into()));
        }
        let mut cleaned = Vec::with_capacity(rounds.len());
        for mut edges in rounds {
            if let Some(e) = edges.iter().find(|e| e.hi >= m) {
                return Err(Error::Config(format!(
                    "edge {}-{} references a device outside 1..={m}",
                    e.lo + 1,
                    e.hi + 1
                )));
            }
            edges.sort();
            edges.dedup();
            cleaned.push(edges);
        }
        let n_pairs = m * (m - 1) / 2;
        let mean_edges =
            cleaned.iter().map(Vec::len).sum::<usize>() as f64 / cleaned.len().max(1) as f64;
        let density = if n_pairs == 0 {
            1.0
        } else {
            mean_edges / n_pairs as f64
        };
        Ok(Self {
            m,
            window,
            density,
            seed: 0,
            rounds: cleaned,
            repairs: Vec::new(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of rounds `T`.
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Connectivity window `B`.
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn repairs(&self) -> &[Repair] {
        &self.repairs
    }

    /// Edge set of 1-based round `t`.
    pub fn edges(&self, t: usize) -> &[Edge] {
        &self.rounds[t - 1]
    }

    pub fn rounds(&self) -> &[Vec<Edge>] {
        &self.rounds
    }

    /// Realized density averaged over rounds, repairs included.
    pub fn effective_density(&self) -> f64 {
        let n_pairs = (self.m * (self.m - 1) / 2).max(1);
        let total: usize = self.rounds.iter().map(Vec::len).sum();
        total as f64 / (self.rounds.len().max(1) * n_pairs) as f64
    }

    /// Returns the index of the first window whose union graph is
    /// disconnected, if any. A trailing partial window is checked as well.
    pub fn check_window_connectivity(&self) -> Option<usize> {
        self.rounds
            .chunks(self.window)
            .position(|chunk| !is_connected(self.m, chunk.iter().flatten()))
    }

    /// Metropolis matrices for every round, in round order.
    pub fn mixing_matrices(&self) -> Vec<MixingMatrix> {
        self.rounds
            .iter()
            .map(|e| metropolis_weights(e, self.m))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {} {}\n",
            self.m,
            self.rounds.len(),
            self.window,
            self.density,
            self.seed
        );
        for edges in &self.rounds {
            let line: Vec<String> = edges
                .iter()
                .map(|e| format!("{}-{}", e.lo + 1, e.hi + 1))
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        for r in &self.repairs {
            let _ = writeln!(out, "# repair {} {} {}", r.window, r.round, r.edges_added);
        }
        out
    }
}

impl FromStr for GraphSchedule {
    type Err = Error;

    /// Parses the line format written by [`GraphSchedule::to_text`] and
    /// requires every window union to be connected.
    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty topology file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "topology header must be `m T B density seed`, got `{header}`"
            )));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad {what} `{s}` in topology header")))
        };
        let m = parse_usize(fields[0], "m")?;
        let t = parse_usize(fields[1], "T")?;
        let window = parse_usize(fields[2], "B")?;
        let density: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Parse(format!("bad density `{}`", fields[3])))?;
        let seed: u64 = fields[4]
            .parse()
            .map_err(|_| Error::Parse(format!("bad seed `{}`", fields[4])))?;

        let mut rounds = Vec::with_capacity(t);
        let mut repairs = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix('#') {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.first() == Some(&"repair") && parts.len() == 4 {
                    repairs.push(Repair {
                        window: parse_usize(parts[1], "repair window")?,
                        round: parse_usize(parts[2], "repair round")?,
                        edges_added: parse_usize(parts[3], "repair size")?,
                    });
                }
                continue;
            }
            let mut edges = Vec::new();
            for token in line.split_whitespace() {
                let (a, b) = token
                    .split_once('-')
                    .ok_or_else(|| Error::Parse(format!("bad edge token `{token}`")))?;
                let a = parse_usize(a, "edge endpoint")?;
                let b = parse_usize(b, "edge endpoint")?;
                if a == 0 || b == 0 {
                    return Err(Error::Parse(format!("edge `{token}` is not 1-based")));
                }
                edges.push(Edge::new(a - 1, b - 1)?);
            }
            rounds.push(edges);
        }
        if rounds.len() != t {
            return Err(Error::Parse(format!(
                "topology header declares {t} rounds, file has {}",
                rounds.len()
            )));
        }
        let mut schedule = GraphSchedule::from_rounds(m, window, rounds)?;
        schedule.density = density;
        schedule.seed = seed;
        schedule.repairs = repairs;
        if let Some(w) = schedule.check_window_connectivity() {
            return Err(Error::Config(format!(
                "loaded topology violates window connectivity in window {w}"
            )));
        }
        Ok(schedule)
    }
}

fn is_connected<'a>(m: usize, edges: impl Iterator<Item = &'a Edge>) -> bool {
    let mut uf = UnionFind::<usize>::new(m);
    let mut components = m;
    for e in edges {
        if uf.union(e.lo, e.hi) {
            components -= 1;
        }
    }
    components <= 1
}

/// Random recursive spanning tree over a shuffled vertex order.
fn random_spanning_tree(m: usize, rng: &mut ChaCha8Rng) -> Vec<Edge> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    (1..m)
        .map(|i| {
            let parent = order[rng.random_range(0..i)];
            Edge {
                lo: parent.min(order[i]),
                hi: parent.max(order[i]),
            }
        })
        .collect()
}

/// Samples `round(density · m(m−1)/2)` edges uniformly per round and repairs
/// any disconnected `B`-window by merging a random spanning tree into the
/// window's last round.
pub fn generate_schedule(
    m: usize,
    rounds: usize,
    density: f64,
    window: usize,
    seed: u64,
) -> Result<GraphSchedule> {
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 devices, got {m}")));
    }
    if rounds < 1 {
        return Err(Error::Config("need at least one round".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if window < 1 {
        return Err(Error::Config("connectivity window B must be >= 1".into()));
    }
    let all: Vec<Edge> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| Edge { lo: i, hi: j }))
        .collect();
    let per_round = (density * all.len() as f64).round() as usize;
    if per_round == 0 {
        return Err(Error::Config(format!(
            "density {density} gives round({density} * {}) = 0 edges per round; the graph can never be connected",
            all.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<Vec<Edge>> = (0..rounds)
        .map(|_| {
            let mut edges: Vec<Edge> = index::sample(&mut rng, all.len(), per_round)
                .into_iter()
                .map(|i| all[i])
                .collect();
            edges.sort();
            edges
        })
        .collect();

    let mut repairs = Vec::new();
    for (w, start) in (0..rounds).step_by(window).enumerate() {
        let end = (start + window).min(rounds);
        if is_connected(m, sampled[start..end].iter().flatten()) {
            continue;
        }
        let last = &mut sampled[end - 1];
        let before = last.len();
        last.extend(random_spanning_tree(m, &mut rng));
        last.sort();
        last.dedup();
        repairs.push(Repair {
            window: w,
            round: end,
            edges_added: last.len() - before,
        });
    }

    Ok(GraphSchedule {
        m,
        window,
        density,
        seed,
        rounds: sampled,
        repairs,
    })
}

/// A symmetric doubly stochastic matrix `P(t)` and its smallest positive
/// entry `ζ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    zeta: f64,
}

impl MixingMatrix {
    /// Wraps an explicit matrix after checking it is square, nonnegative,
    /// symmetric and doubly stochastic within `1e-12`.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        let m = entries.nrows();
        if entries.ncols() != m {
            return Err(Error::Shape {
                expected: m,
                got: entries.ncols(),
            });
        }
        for i in 0..m {
            let row: f64 = entries.row(i).sum();
            let col: f64 = entries.column(i).sum();
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return Err(Error::Protocol(format!(
                    "mixing matrix is not doubly stochastic at index {i} (row {row}, column {col})"
                )));
            }
            for j in 0..m {
                let v = entries[(i, j)];
                if v < 0.0 || (v - entries[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Protocol(format!(
                        "mixing matrix entry ({i}, {j}) = {v} is negative or asymmetric"
                    )));
                }
            }
        }
        let zeta = min_positive(&entries);
        Ok(Self { entries, zeta })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            entries: DMatrix::identity(m, m),
            zeta: 1.0,
        }
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Row `i` as a contiguous vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.entries.row(i).iter().copied().collect()
    }
}

fn min_positive(entries: &DMatrix<f64>) -> f64 {
    entries
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min)
}

/// Metropolis weights: `P_ij = 1/(1 + max(deg_i, deg_j))` on edges, the
/// remaining mass on the diagonal.
pub fn metropolis_weights(edges: &[Edge], m: usize) -> MixingMatrix {
    let mut unique: Vec<Edge> = edges.to_vec();
    unique.sort();
    unique.dedup();
    let mut degree = vec![0usize; m];
    for e in &unique {
        degree[e.lo] += 1;
        degree[e.hi] += 1;
    }
    let mut p = DMatrix::<f64>::zeros(m, m);
    for e in &unique {
        let w = 1.0 / (1 + degree[e.lo].max(degree[e.hi])) as f64;
        p[(e.lo, e.hi)] = w;
        p[(e.hi, e.lo)] = w;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| p[(i, j)]).sum();
        p[(i, i)] = 1.0 - off;
    }
    let zeta = min_positive(&p);
    MixingMatrix { entries: p, zeta }
}

/// Geometric mixing constants `ϑ = (1 − ζ/4m²)^(-2)` and
/// `κ = (1 − ζ/4m²)^(1/B)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingConstants {
    pub vartheta: f64,
    pub kappa: f64,
}

impl MixingConstants {
    /// `ϑ κ^lag`.
    pub fn bound(&self, lag: usize) -> f64 {
        self.vartheta * self.kappa.powi(lag as i32)
    }
}

pub fn mixing_constants(m: usize, zeta: f64, window: usize) -> MixingConstants {
    let base = 1.0 - zeta / (4.0 * (m * m) as f64);
    MixingConstants {
        vartheta: base.powi(-2),
        kappa: base.powf(1.0 / window as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductMixingReport {
    pub t: usize,
    pub tau: usize,
    /// `max_ij |P(t,τ)_ij − 1/m|`
    pub deviation: f64,
    /// `ϑ κ^(t−τ)`
    pub bound: f64,
    /// Minimum positive entry over `P(τ), …, P(t)`.
    pub zeta: f64,
    pub holds: bool,
}

/// Left-multiplies `P(τ), P(τ+1), …, P(t)` into `P(t)⋯P(τ)`.
pub fn mixing_product(matrices: &[MixingMatrix], t: usize, tau: usize) -> DMatrix<f64> {
    let m = matrices[0].m();
    let mut product = DMatrix::<f64>::identity(m, m);
    for p in &matrices[tau - 1..t] {
        product = p.entries() * &product;
    }
    product
}

/// Checks `|P(t,τ)_ij − 1/m| ≤ ϑ κ^(t−τ)` entrywise for 1-based rounds
/// `1 ≤ τ ≤ t ≤ T`.
pub fn product_mixing_check(
    schedule: &GraphSchedule,
    t: usize,
    tau: usize,
) -> Result<ProductMixingReport> {
    if !(1 <= tau && tau <= t && t <= schedule.len()) {
        return Err(Error::Config(format!(
            "need 1 <= tau <= t <= {}, got tau={tau}, t={t}",
            schedule.len()
        )));
    }
    let matrices: Vec<MixingMatrix> = schedule.rounds[tau - 1..t]
        .iter()
        .map(|e| metropolis_weights(e, schedule.m))
        .collect();
    Ok(product_check_on(&matrices, schedule.window, t, tau))
}

/// [`product_mixing_check`] over precomputed matrices `P(τ), …, P(t)`.
pub fn product_check_on(
    window_matrices: &[MixingMatrix],
    window: usize,
    t: usize,
    tau: usize,
) -> ProductMixingReport {
    let m = window_matrices[0].m();
    let zeta = window_matrices
        .iter()
        .map(MixingMatrix::zeta)
        .fold(f64::INFINITY, f64::min);
    let product = mixing_product(window_matrices, window_matrices.len(), 1);
    let target = 1.0 / m as f64;
    let deviation = product
        .iter()
        .fold(0.0f64, |acc, v| acc.max((v - target).abs()));
    let bound = mixing_constants(m, zeta, window).bound(t - tau);
    ProductMixingReport {
        t,
        tau,
        deviation,
        bound,
        zeta,
        holds: deviation <= bound,
    }
}
