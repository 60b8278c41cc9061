//! DP-FTRL building blocks: participation schemas, history bookkeeping,
//! clipping, and correlated noise drawn through a lower-triangular strategy
//! matrix.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("round {round} outside 0..{n_round}")]
    RoundOutOfRange { round: usize, n_round: usize },
    #[error("cohort member {client} cannot take round {round} under the schema")]
    SchemaViolation { client: usize, round: usize },
    #[error("client index {client} outside 0..{n}")]
    UnknownClient { client: usize, n: usize },
    #[error("strategy matrix has zero diagonal entry at row {0}")]
    SingularC(usize),
    #[error("strategy matrix is not lower triangular (entry {row},{col} = {value})")]
    NotLowerTriangular { row: usize, col: usize, value: f64 },
    #[error("strategy matrix: {0}")]
    BadMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaVariant {
    /// Every client participates at most once.
    Once,
    /// Consecutive participations of a client are at least `b` rounds apart.
    MinSeparation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationSchema {
    pub variant: SchemaVariant,
    pub n_round: usize,
}

impl ParticipationSchema {
    pub fn once(n_round: usize) -> Self {
        Self {
            variant: SchemaVariant::Once,
            n_round,
        }
    }

    pub fn min_separation(b: usize, n_round: usize) -> Self {
        assert!(b >= 1, "separation must be at least 1");
        Self {
            variant: SchemaVariant::MinSeparation(b),
            n_round,
        }
    }

    /// Whether a single client's round set fits one admissible pattern.
    pub fn admits(&self, rounds: &BTreeSet<usize>) -> bool {
        if rounds.iter().any(|&r| r >= self.n_round) {
            return false;
        }
        match self.variant {
            SchemaVariant::Once => rounds.len() <= 1,
            SchemaVariant::MinSeparation(b) => rounds
                .iter()
                .zip(rounds.iter().skip(1))
                .all(|(a, c)| c - a >= b),
        }
    }

    fn may_join(&self, rounds: &BTreeSet<usize>, round: usize) -> bool {
        if rounds.contains(&round) {
            return false;
        }
        match self.variant {
            SchemaVariant::Once => rounds.is_empty(),
            // Equivalent to `round - max(H_j) >= b` when rounds arrive in order;
            // the symmetric form also covers out-of-order indices.
            SchemaVariant::MinSeparation(b) => rounds.iter().all(|&r| r.abs_diff(round) >= b),
        }
    }
}

/// Per-client participation sets `H_j`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationHistory {
    sets: Vec<BTreeSet<usize>>,
}

impl fmt::Debug for ParticipationHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.sets.iter()).finish()
    }
}

impl ParticipationHistory {
    pub fn empty(n: usize) -> Self {
        Self {
            sets: vec![BTreeSet::new(); n],
        }
    }

    pub fn from_sets<I, S>(sets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = usize>,
    {
        Self {
            sets: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn n_clients(&self) -> usize {
        self.sets.len()
    }

    pub fn rounds_of(&self, client: usize) -> &BTreeSet<usize> {
        &self.sets[client]
    }

    /// Whether any client already holds `round`.
    pub fn round_used(&self, round: usize) -> bool {
        self.sets.iter().any(|s| s.contains(&round))
    }

    pub fn adheres_to(&self, schema: &ParticipationSchema) -> bool {
        self.sets.iter().all(|s| schema.admits(s))
    }

    pub(crate) fn insert_unchecked(&mut self, client: usize, round: usize) {
        self.sets[client].insert(round);
    }
}

/// Clients that may take `round` without breaking the schema.
pub fn f_qualify(
    schema: &ParticipationSchema,
    history: &ParticipationHistory,
    round: usize,
) -> Result<BTreeSet<usize>, DpError> {
    if round >= schema.n_round {
        return Err(DpError::RoundOutOfRange {
            round,
            n_round: schema.n_round,
        });
    }
    Ok((0..history.n_clients())
        .filter(|&j| schema.may_join(history.rounds_of(j), round))
        .collect())
}

pub fn update_history(
    schema: &ParticipationSchema,
    history: &ParticipationHistory,
    cohort: &[usize],
    round: usize,
) -> Result<ParticipationHistory, DpError> {
    let qualified = f_qualify(schema, history, round)?;
    let mut next = history.clone();
    for &j in cohort {
        if j >= history.n_clients() {
            return Err(DpError::UnknownClient {
                client: j,
                n: history.n_clients(),
            });
        }
        if !qualified.contains(&j) {
            return Err(DpError::SchemaViolation { client: j, round });
        }
        next.insert_unchecked(j, round);
    }
    Ok(next)
}

/// A model-sized real vector: an update, a noised sum, or parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(pub Vec<f64>);

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.iter().map(|x| x * s).collect())
    }

    pub fn add_assign(&mut self, other: &ModelVector) {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(raw: &[u8]) -> Option<Self> {
        if raw.len() % 8 != 0 {
            return None;
        }
        Some(Self(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }
}

/// `min(1, zeta / |v|) * v`, with the zero vector mapped to itself.
pub fn clip(v: &ModelVector, zeta: f64) -> ModelVector {
    assert!(zeta > 0.0, "clipping bound must be positive");
    let norm = v.norm();
    if norm <= zeta {
        v.clone()
    } else {
        v.scale(zeta / norm)
    }
}

/// Lower-triangular, invertible factor `C` of the matrix mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl StrategyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, DpError> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(DpError::BadMatrix(format!(
                    "row {r} has {} columns, expected {n}",
                    row.len()
                )));
            }
            for (c, &value) in row.iter().enumerate() {
                if !value.is_finite() {
                    return Err(DpError::BadMatrix(format!("non-finite entry at {r},{c}")));
                }
                if c > r && value != 0.0 {
                    return Err(DpError::NotLowerTriangular { row: r, col: c, value });
                }
            }
            entries.extend(row);
        }
        let m = Self { n, entries };
        if let Some(r) = (0..n).find(|&r| m.get(r, r) == 0.0) {
            return Err(DpError::SingularC(r));
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// All-ones lower triangle; `C^-1` is the first-difference matrix.
    pub fn prefix(n: usize) -> Self {
        Self::from_fn(n, |_, _| 1.0)
    }

    /// Lower-triangular Toeplitz square root of [`Self::prefix`], with
    /// coefficients of `(1 - x)^(-1/2)`.
    pub fn sqrt_prefix(n: usize) -> Self {
        let mut coeff = vec![1.0; n];
        for k in 1..n {
            coeff[k] = coeff[k - 1] * (2 * k - 1) as f64 / (2 * k) as f64;
        }
        Self::from_fn(n, |r, c| coeff[r - c])
    }

    fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..=r {
                entries[r * n + c] = f(r, c);
            }
        }
        Self { n, entries }
    }

    /// One row per line, comma-separated.
    pub fn from_csv_str(text: &str) -> Result<Self, DpError> {
        let rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(r, line)| {
                line.split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|e| {
                            DpError::BadMatrix(format!("row {r}: {e} ({x:?})"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rows(rows)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self, DpError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DpError::BadMatrix(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|c| format!("{:?}", self.get(r, c))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.n + c]
    }
}

/// Seeded Gaussian matrix `Z` with `Z[i,j] ~ N(0, sigma^2)`.
///
/// Entries come from a counter-based stream keyed by `(seed, i, j)`: any replica
/// holding the seed reproduces exactly the same values in any access order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMatrix {
    pub seed: u64,
    pub sigma: f64,
}

impl NoiseMatrix {
    pub fn new(seed: u64, sigma: f64) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        Self { seed, sigma }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        // Each entry owns four 32-bit words of the row's stream.
        rng.set_word_pos(j as u128 * 4);
        // Box-Muller on (0,1] x [0,1).
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        self.sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn row(&self, i: usize, d: usize) -> ModelVector {
        ModelVector((0..d).map(|j| self.entry(i, j)).collect())
    }
}

/// Rows `0..=round` of `zeta * C^-1 Z`, by forward substitution on `C`.
pub fn correlated_noise_rows(
    z: &NoiseMatrix,
    c: &StrategyMatrix,
    round: usize,
    d: usize,
    zeta: f64,
) -> Result<Vec<ModelVector>, DpError> {
    if round >= c.size() {
        return Err(DpError::RoundOutOfRange {
            round,
            n_round: c.size(),
        });
    }
    let mut rows: Vec<ModelVector> = Vec::with_capacity(round + 1);
    for r in 0..=round {
        let diag = c.get(r, r);
        if diag == 0.0 {
            return Err(DpError::SingularC(r));
        }
        let mut acc = z.row(r, d).scale(zeta);
        for (k, prev) in rows.iter().enumerate() {
            let coef = c.get(r, k);
            if coef != 0.0 {
                for (a, p) in acc.0.iter_mut().zip(&prev.0) {
                    *a -= coef * p;
                }
            }
        }
        rows.push(acc.scale(1.0 / diag));
    }
    Ok(rows)
}

/// Row `round` of `zeta * C^-1 Z`; only rows `0..=round` of `Z` are touched.
pub fn correlated_noise(
    z: &NoiseMatrix,
    c: &StrategyMatrix,
    round: usize,
    d: usize,
    zeta: f64,
) -> Result<ModelVector, DpError> {
    Ok(correlated_noise_rows(z, c, round, d, zeta)?
        .pop()
        .expect("at least one row"))
}

/// Synthetic least-squares data held by one client.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientData {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

impl ClientData {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len());
        Self { xs, ys }
    }

    /// `points` samples of `y = <w, x> + noise` with `x ~ N(0, I_d)`, where `w`
    /// is shared by every client of the run (derived from `task_seed`).
    pub fn synthetic(task_seed: u64, client_seed: u64, d: usize, points: usize) -> Self {
        let normal = |rng: &mut ChaCha20Rng| {
            let u1 = 1.0 - rng.gen::<f64>();
            let u2 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let mut task = ChaCha20Rng::seed_from_u64(task_seed);
        let w: Vec<f64> = (0..d).map(|_| normal(&mut task)).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(client_seed);
        let mut xs = Vec::with_capacity(points);
        let mut ys = Vec::with_capacity(points);
        for _ in 0..points {
            let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.1 * normal(&mut rng);
            xs.push(x);
            ys.push(y);
        }
        Self { xs, ys }
    }
}

/// Clipped gradient of `sum_k (<theta, x_k> - y_k)^2` at `theta`.
pub fn local_update(data: &ClientData, theta: &ModelVector, zeta: f64) -> ModelVector {
    let mut grad = ModelVector::zeros(theta.dim());
    for (x, y) in data.xs.iter().zip(&data.ys) {
        let residual = x.iter().zip(&theta.0).map(|(a, b)| a * b).sum::<f64>() - y;
        for (g, xi) in grad.0.iter_mut().zip(x) {
            *g += 2.0 * xi * residual;
        }
    }
    clip(&grad, zeta)
}
