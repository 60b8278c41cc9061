//! Failure probabilities for auditor sampling, the parameter optimizer,
//! and a Monte-Carlo cross-check.
//!
//! All hypergeometric masses are evaluated in log space: the mode is
//! computed with Loader's saddle-point form and the remaining support by
//! ratio recurrence, so nothing overflows for populations up to 1e9.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::party_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid parameters: {0}")]
    ParamsInvalid(String),
    #[error("no (n_audit, tau) up to {cap} meets the targets")]
    NoFeasibleParams { cap: usize },
    #[error("invalid sweep spec: {0}")]
    ConfigInvalid(String),
}

/// Slack absorbing float noise in products like 0.1 * 1e7 before rounding.
const ROUND_EPS: f64 = 1e-9;

/// Round a fractional head-count up (in the adversary's favor).
pub fn ceil_count(x: f64) -> usize {
    (x - ROUND_EPS).ceil().max(0.0) as usize
}

/// Round a fractional head-count down.
pub fn floor_count(x: f64) -> usize {
    (x + ROUND_EPS).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureParams {
    pub n: u64,
    pub gamma: f64,
    pub kappa: f64,
    pub beta: f64,
    pub n_audit: usize,
    pub tau: usize,
    pub n_round: u64,
}

impl FailureParams {
    /// Auditor candidate pool, `floor(kappa n)`.
    pub fn pool(&self) -> usize {
        floor_count(self.kappa * self.n as f64)
    }

    /// Corrupted clients, all assumed to sit in the pool.
    pub fn corrupted(&self) -> usize {
        ceil_count(self.gamma * self.n as f64).min(self.pool())
    }

    /// Dropouts among the pool in one round.
    pub fn dropouts(&self) -> usize {
        ceil_count(self.kappa * self.n as f64 * self.beta).min(self.pool())
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::ParamsInvalid(m));
        for (name, v) in [("gamma", self.gamma), ("kappa", self.kappa), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.pool() == 0 {
            return bad("empty candidate pool".into());
        }
        if self.n_audit == 0 || self.n_audit > self.pool() {
            return bad(format!("n_audit = {} outside 1..={}", self.n_audit, self.pool()));
        }
        if 2 * self.tau <= self.n_audit || self.tau > self.n_audit {
            return bad(format!("tau = {} not in (n_audit/2, n_audit]", self.tau));
        }
        Ok(())
    }
}

fn ln_factorial_small(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// ln(n!) - ln(sqrt(2 pi n) (n/e)^n)
fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        return ln_factorial_small(n as u64) - (n + 0.5) * n.ln() + n - 0.5 * (2.0 * PI).ln();
    }
    let nn = n * n;
    if n > 500.0 {
        return (S0 - S1 / nn) / n;
    }
    if n > 80.0 {
        return (S0 - (S1 - S2 / nn) / nn) / n;
    }
    if n > 35.0 {
        return (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n;
    }
    (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
}

/// x ln(x/np) + np - x, without cancellation near x = np.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1.. {
            ej *= v2;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
    }
    x * (x / np).ln() + np - x
}

/// ln of the binomial mass C(n, x) p^x q^(n-x).
fn ln_dbinom(x: f64, n: f64, p: f64, q: f64) -> f64 {
    if p == 0.0 {
        return if x == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if q == 0.0 {
        return if x == n { 0.0 } else { f64::NEG_INFINITY };
    }
    if x == 0.0 {
        return n * (-p).ln_1p();
    }
    if x == n {
        return n * p.ln();
    }
    let lc = stirlerr(n) - stirlerr(x) - stirlerr(n - x) - bd0(x, n * p) - bd0(n - x, n * q);
    let lf = (2.0 * PI).ln() + x.ln() + (-x / n).ln_1p();
    lc - 0.5 * lf
}

/// Hypergeometric law: `draws` items from a population of `total`
/// containing `marked` marked ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hypergeometric {
    pub total: usize,
    pub marked: usize,
    pub draws: usize,
}

impl Hypergeometric {
    pub fn support(&self) -> (usize, usize) {
        let lo = self.draws.saturating_sub(self.total - self.marked);
        (lo, self.marked.min(self.draws))
    }

    /// ln P[X = x] directly (used for the mode and in tests).
    pub fn ln_pmf(&self, x: usize) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return f64::NEG_INFINITY;
        }
        let (r, b, n) = (
            self.marked as f64,
            (self.total - self.marked) as f64,
            self.draws as f64,
        );
        let x = x as f64;
        let p = n / (r + b);
        let q = (r + b - n) / (r + b);
        ln_dbinom(x, r, p, q) + ln_dbinom(n - x, b, p, q) - ln_dbinom(n, r + b, p, q)
    }

    /// ln P[X = x] for every x in the support, starting at `support().0`.
    pub fn ln_pmf_all(&self) -> Vec<f64> {
        let (lo, hi) = self.support();
        let (k, m, nn) = (self.marked as f64, self.draws as f64, self.total as f64);
        let mode = (((m + 1.0) * (k + 1.0) / (nn + 2.0)).floor() as usize).clamp(lo, hi);
        let mut out = vec![0.0; hi - lo + 1];
        out[mode - lo] = self.ln_pmf(mode);
        // ratio P[x+1]/P[x] = (K-x)(m-x) / ((x+1)(N-K-m+x+1))
        let ratio = |x: usize| {
            let x = x as f64;
            ((k - x) * (m - x)).ln() - ((x + 1.0) * (nn - k - m + x + 1.0)).ln()
        };
        for x in mode..hi {
            out[x + 1 - lo] = out[x - lo] + ratio(x);
        }
        for x in (lo..mode).rev() {
            out[x - lo] = out[x + 1 - lo] - ratio(x);
        }
        out
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Upper tails P[X > t] for all t, from one pass over the pmf.
struct Tails {
    lo: usize,
    /// ln P[X >= lo + i]
    ln_geq: Vec<f64>,
}

impl Tails {
    fn new(h: Hypergeometric) -> Self {
        let (lo, _) = h.support();
        let ln = h.ln_pmf_all();
        let mut ln_geq = vec![f64::NEG_INFINITY; ln.len() + 1];
        for i in (0..ln.len()).rev() {
            ln_geq[i] = log_sum_exp(&[ln_geq[i + 1], ln[i]]);
        }
        Self { lo, ln_geq }
    }

    /// P[X > t]; exactly 0 past the support, exactly 1 below it.
    fn above(&self, t: i64) -> f64 {
        let start = t + 1;
        if start <= self.lo as i64 {
            return 1.0;
        }
        let i = (start - self.lo as i64) as usize;
        if i >= self.ln_geq.len() - 1 {
            return 0.0;
        }
        self.ln_geq[i].exp().min(1.0)
    }
}

/// 1 - (1 - p)^rounds, accurate for tiny p.
pub fn over_rounds(p_round: f64, n_round: u64) -> f64 {
    if p_round <= 0.0 {
        return 0.0;
    }
    if p_round >= 1.0 {
        return 1.0;
    }
    (-(n_round as f64 * (-p_round).ln_1p()).exp_m1()).clamp(0.0, 1.0)
}

fn privacy_law(p: &FailureParams) -> Hypergeometric {
    Hypergeometric {
        total: p.pool(),
        marked: p.corrupted(),
        draws: p.n_audit,
    }
}

fn interrupt_law(p: &FailureParams) -> Hypergeometric {
    Hypergeometric {
        total: p.pool(),
        marked: p.dropouts(),
        draws: p.n_audit,
    }
}

/// Per-round chance that corrupted auditors exceed `2 tau - n_audit`.
pub fn privacy_round_term(p: &FailureParams) -> Result<f64, AnalysisError> {
    p.validate()?;
    Ok(Tails::new(privacy_law(p)).above(2 * p.tau as i64 - p.n_audit as i64))
}

/// Per-round chance that more than `n_audit - tau` auditors drop out.
pub fn interrupt_round_term(p: &FailureParams) -> Result<f64, AnalysisError> {
    p.validate()?;
    Ok(Tails::new(interrupt_law(p)).above(p.n_audit as i64 - p.tau as i64))
}

pub fn delta_privacy(p: &FailureParams) -> Result<f64, AnalysisError> {
    Ok(over_rounds(privacy_round_term(p)?, p.n_round))
}

pub fn delta_interrupt(p: &FailureParams) -> Result<f64, AnalysisError> {
    Ok(over_rounds(interrupt_round_term(p)?, p.n_round))
}

/// Per-round chance that corrupted auditors reach `2 tau - n_audit`, i.e.
/// enough to complete two disjoint quorums. One more than the bound above
/// counts; see the README for why both are reported.
pub fn fork_round_term(p: &FailureParams) -> Result<f64, AnalysisError> {
    p.validate()?;
    Ok(Tails::new(privacy_law(p)).above(2 * p.tau as i64 - p.n_audit as i64 - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub n_audit: usize,
    pub tau: usize,
    pub delta_privacy: f64,
    pub delta_interrupt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRequest {
    pub n: u64,
    pub gamma: f64,
    pub kappa: f64,
    pub beta: f64,
    pub n_round: u64,
    pub p_privacy: f64,
    pub p_interrupt: f64,
}

impl OptimizeRequest {
    fn at(&self, n_audit: usize, tau: usize) -> FailureParams {
        FailureParams {
            n: self.n,
            gamma: self.gamma,
            kappa: self.kappa,
            beta: self.beta,
            n_audit,
            tau,
            n_round: self.n_round,
        }
    }
}

/// Smallest n_audit admitting a tau that meets both targets, searching up
/// to the whole candidate pool.
pub fn optimize_params(req: &OptimizeRequest) -> Result<Optimum, AnalysisError> {
    optimize_params_capped(req, usize::MAX)
}

/// As [`optimize_params`], giving up past `cap` auditors.
pub fn optimize_params_capped(req: &OptimizeRequest, cap: usize) -> Result<Optimum, AnalysisError> {
    for (name, v) in [("p_privacy", req.p_privacy), ("p_interrupt", req.p_interrupt)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(AnalysisError::ParamsInvalid(format!("{name} = {v} outside (0, 1)")));
        }
    }
    let probe = req.at(1, 1);
    probe.validate()?;
    let cap = cap.min(probe.pool());
    for m in 1..=cap {
        let p = req.at(m, m);
        let privacy = Tails::new(privacy_law(&p));
        let interrupt = Tails::new(interrupt_law(&p));
        let dp = |tau: usize| over_rounds(privacy.above(2 * tau as i64 - m as i64), req.n_round);
        let di = |tau: usize| over_rounds(interrupt.above(m as i64 - tau as i64), req.n_round);
        let (lo, hi) = (m / 2 + 1, m);
        // privacy improves with tau, interruption worsens: find the
        // smallest tau meeting privacy, then check interruption there.
        if dp(hi) > req.p_privacy {
            continue;
        }
        let (mut a, mut b) = (lo, hi);
        while a < b {
            let mid = (a + b) / 2;
            if dp(mid) <= req.p_privacy {
                b = mid;
            } else {
                a = mid + 1;
            }
        }
        if di(a) <= req.p_interrupt {
            return Ok(Optimum {
                n_audit: m,
                tau: a,
                delta_privacy: dp(a),
                delta_interrupt: di(a),
            });
        }
    }
    Err(AnalysisError::NoFeasibleParams { cap })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Privacy,
    Interrupt,
}

/// Sample auditor sets and count per-round failures the way the bounds
/// define them. Returns (estimate, standard error).
pub fn mc_round_failure(mode: FailureMode, p: &FailureParams, trials: u64, seed: u64) -> (f64, f64) {
    let (marked, threshold) = match mode {
        FailureMode::Privacy => (p.corrupted(), 2 * p.tau as i64 - p.n_audit as i64),
        FailureMode::Interrupt => (p.dropouts(), p.n_audit as i64 - p.tau as i64),
    };
    let pool = p.pool();
    let mut rng = party_rng(seed, "mc-round-failure", 0);
    let mut hits = 0u64;
    for _ in 0..trials {
        let (mut left, mut bad) = (pool, marked);
        let mut drawn = 0i64;
        for _ in 0..p.n_audit {
            if rng.gen_range(0..left) < bad {
                drawn += 1;
                bad -= 1;
            }
            left -= 1;
        }
        if drawn > threshold {
            hits += 1;
        }
    }
    let est = hits as f64 / trials as f64;
    (est, (est * (1.0 - est) / trials as f64).sqrt())
}

pub const SWEEP_HEADER: &str = "gamma,beta,kappa,n,n_round,n_audit,tau,delta_privacy,delta_interrupt";

/// Cells needing more auditors than this are reported empty.
pub const SWEEP_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub beta: f64,
    pub kappa: f64,
    pub n: u64,
    pub n_round: u64,
    pub n_audit: Option<usize>,
    pub tau: Option<usize>,
    pub delta_privacy: Option<f64>,
    pub delta_interrupt: Option<f64>,
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.gamma,
            self.beta,
            self.kappa,
            self.n,
            self.n_round,
            opt(self.n_audit),
            opt(self.tau),
            opt(self.delta_privacy),
            opt(self.delta_interrupt)
        )
    }
}

/// Evaluate fixed (n_audit, tau) points, or optimize per (gamma, beta, kappa) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepSpec {
    /// Curves of both deltas against n_audit, with tau = ceil(3 n_audit / 4).
    Tradeoff {
        n: u64,
        n_round: u64,
        kappa: f64,
        gammas: Vec<f64>,
        betas: Vec<f64>,
        n_audits: Vec<usize>,
    },
    /// Minimal n_audit per cell for the given targets.
    Minimal {
        n: u64,
        n_round: u64,
        kappas: Vec<f64>,
        gammas: Vec<f64>,
        betas: Vec<f64>,
        p_privacy: f64,
        p_interrupt: f64,
    },
}

/// tau used on trade-off curves: a three-quarter majority.
pub fn tradeoff_tau(n_audit: usize) -> usize {
    (3 * n_audit).div_ceil(4).max(n_audit / 2 + 1)
}

impl SweepSpec {
    pub fn fig3_left() -> Self {
        SweepSpec::Tradeoff {
            n: 10_000_000,
            n_round: 10_000,
            kappa: 1.0,
            gammas: vec![0.05, 0.1, 0.15, 0.2],
            betas: vec![0.0],
            n_audits: (4..=200).step_by(4).collect(),
        }
    }

    pub fn fig3_right() -> Self {
        SweepSpec::Tradeoff {
            n: 10_000_000,
            n_round: 10_000,
            kappa: 1.0,
            gammas: vec![0.0],
            betas: vec![0.05, 0.1, 0.15, 0.2],
            n_audits: (4..=200).step_by(4).collect(),
        }
    }

    pub fn fig4() -> Self {
        let grid: Vec<f64> = (0..=6).map(|i| i as f64 * 0.05).collect();
        SweepSpec::Minimal {
            n: 10_000_000,
            n_round: 10_000,
            kappas: vec![1.0, 0.5],
            gammas: grid.clone(),
            betas: grid,
            p_privacy: 1e-8,
            p_interrupt: 1e-8,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fig3left" => Some(Self::fig3_left()),
            "fig3right" => Some(Self::fig3_right()),
            "fig4" => Some(Self::fig4()),
            _ => None,
        }
    }
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        (a.kappa, a.gamma, a.beta, a.n_audit.unwrap_or(usize::MAX))
            .partial_cmp(&(b.kappa, b.gamma, b.beta, b.n_audit.unwrap_or(usize::MAX)))
            .expect("finite sweep keys")
    });
}

pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, AnalysisError> {
    let check = |xs: &[f64], name: &str| -> Result<(), AnalysisError> {
        match xs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(AnalysisError::ConfigInvalid(format!("{name} value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    };
    let mut rows = Vec::new();
    match spec {
        SweepSpec::Tradeoff {
            n,
            n_round,
            kappa,
            gammas,
            betas,
            n_audits,
        } => {
            check(gammas, "gamma")?;
            check(betas, "beta")?;
            check(&[*kappa], "kappa")?;
            for &gamma in gammas {
                for &beta in betas {
                    for &m in n_audits {
                        let p = FailureParams {
                            n: *n,
                            gamma,
                            kappa: *kappa,
                            beta,
                            n_audit: m,
                            tau: tradeoff_tau(m),
                            n_round: *n_round,
                        };
                        let dp = delta_privacy(&p).map_err(|e| AnalysisError::ConfigInvalid(e.to_string()))?;
                        let di = delta_interrupt(&p).map_err(|e| AnalysisError::ConfigInvalid(e.to_string()))?;
                        rows.push(SweepRow {
                            gamma,
                            beta,
                            kappa: *kappa,
                            n: *n,
                            n_round: *n_round,
                            n_audit: Some(m),
                            tau: Some(p.tau),
                            delta_privacy: Some(dp),
                            delta_interrupt: Some(di),
                        });
                    }
                }
            }
        }
        SweepSpec::Minimal {
            n,
            n_round,
            kappas,
            gammas,
            betas,
            p_privacy,
            p_interrupt,
        } => {
            check(gammas, "gamma")?;
            check(betas, "beta")?;
            check(kappas, "kappa")?;
            for &kappa in kappas {
                for &gamma in gammas {
                    for &beta in betas {
                        let req = OptimizeRequest {
                            n: *n,
                            gamma,
                            kappa,
                            beta,
                            n_round: *n_round,
                            p_privacy: *p_privacy,
                            p_interrupt: *p_interrupt,
                        };
                        let mut row = SweepRow {
                            gamma,
                            beta,
                            kappa,
                            n: *n,
                            n_round: *n_round,
                            n_audit: None,
                            tau: None,
                            delta_privacy: None,
                            delta_interrupt: None,
                        };
                        match optimize_params_capped(&req, SWEEP_CAP) {
                            Ok(o) => {
                                row.n_audit = Some(o.n_audit);
                                row.tau = Some(o.tau);
                                row.delta_privacy = Some(o.delta_privacy);
                                row.delta_interrupt = Some(o.delta_interrupt);
                            }
                            Err(AnalysisError::NoFeasibleParams { .. }) => {}
                            Err(e) => return Err(AnalysisError::ConfigInvalid(e.to_string())),
                        }
                        rows.push(row);
                    }
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}
