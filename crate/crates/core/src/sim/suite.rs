//! Repeated seeded runs of an adversary script, and Sybil-selection trials.

use rand::RngCore;
use serde::Serialize;

use super::config::{SimError, WorldConfig};
use super::integrity::check_integrity;
use super::linearizability::check_linearizable;
use super::world::{run, World};
use crate::actors::adversary::{AdversaryScript, AttackReport, SybilStats};
use crate::analysis::{fork_round_term, privacy_round_term, FailureParams};
use crate::dpftrl::ModelVector;
use crate::enclave::{replicate, EnclaveError, SecAggArgs};
use crate::primitives::party_rng;

/// Verdicts over many seeded runs of one script.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub strategy: String,
    pub trials: u64,
    pub attempted: u64,
    /// Completions beyond the first for one chain state.
    pub successes: u64,
    /// Adversarial processes that got past auditor agreement (possibly
    /// instead of the honest one).
    pub adversarial_completions: u64,
    /// Runs in which some chain state was completed twice.
    pub bypassed_runs: u64,
    pub linearizability_failures: u64,
    pub integrity_failures: u64,
    pub signing_violations: u64,
    pub taint_leaks: u64,
    /// Runs whose honest pipeline did not finish every round.
    pub halted_runs: u64,
    /// Rejections seen in the first run, as an example.
    pub sample_rejections: Vec<String>,
}

impl SuiteReport {
    pub fn safe(&self) -> bool {
        self.successes == 0
            && self.bypassed_runs == 0
            && self.linearizability_failures == 0
            && self.integrity_failures == 0
            && self.signing_violations == 0
            && self.taint_leaks == 0
    }
}

/// Seed of trial `t` of a suite seeded with `seed`.
pub fn trial_seed(seed: u64, t: u64) -> u64 {
    party_rng(seed, "trial", t).next_u64()
}

/// Run `base` under `script` for `trials` seeds and check every log.
pub fn run_suite(base: &WorldConfig, script: AdversaryScript, trials: u64, seed: u64) -> Result<SuiteReport, SimError> {
    let mut cfg = base.clone();
    cfg.adversary = script;
    let needed = script.rounds_needed();
    if cfg.rounds() < needed {
        cfg.n_round = cfg.n_round.max(needed);
        cfg.rounds = Some(needed);
    }
    let mut rep = SuiteReport {
        strategy: script.name().into(),
        trials,
        attempted: 0,
        successes: 0,
        adversarial_completions: 0,
        bypassed_runs: 0,
        linearizability_failures: 0,
        integrity_failures: 0,
        signing_violations: 0,
        taint_leaks: 0,
        halted_runs: 0,
        sample_rejections: Vec::new(),
    };
    for t in 0..trials {
        cfg.master_seed = trial_seed(seed, t);
        let res = run(cfg.clone())?;
        rep.attempted += res.report.attempted;
        rep.successes += res.report.divergent;
        rep.adversarial_completions += res.report.completed;
        rep.bypassed_runs += res.report.bypassed as u64;
        rep.signing_violations += res.signing_violations as u64;
        rep.taint_leaks += res.taint_leaks as u64;
        rep.halted_runs += res.halted.is_some() as u64;
        let lin = check_linearizable(&res.log).map(|v| v.linearizable).unwrap_or(false);
        rep.linearizability_failures += !lin as u64;
        let integ = check_integrity(&res.log, &res.chain, &cfg.participation_schema(), Some(&res.truth))
            .map(|v| v.ok)
            .unwrap_or(false);
        rep.integrity_failures += !integ as u64;
        if t == 0 {
            rep.sample_rejections = res.report.rejections.clone();
        }
    }
    Ok(rep)
}

fn failure_params(cfg: &WorldConfig) -> FailureParams {
    FailureParams {
        n: cfg.n as u64,
        gamma: cfg.gamma,
        kappa: cfg.kappa,
        beta: 0.0,
        n_audit: cfg.n_audit,
        tau: cfg.tau,
        n_round: 1,
    }
}

fn rate(hits: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 0.0);
    }
    let p = hits as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// A server that controls the candidate list stuffs it with corrupted
/// clients. `trials` selections are drawn to measure how often the
/// designated auditors hold enough corrupted members to break the quorum
/// bound; `fork_trials` full runs then try to exploit such a draw by forking.
pub fn sybil_trials(base: &WorldConfig, trials: u64, fork_trials: u64, seed: u64) -> Result<AttackReport, SimError> {
    let mut cfg = base.clone();
    cfg.adversary = AdversaryScript::SybilFlood { round: 0, fork: false };
    cfg.master_seed = seed;
    let world = World::new(cfg.clone())?;
    let mut report = AttackReport::new(&cfg.adversary);

    let sybils: Vec<usize> = world.corrupted.iter().copied().collect();
    let need = world.params.min_candidates.max(world.params.n_audit);
    let cohort: Vec<usize> = (0..cfg.cohort_size).collect();
    let args = SecAggArgs {
        theta: ModelVector::zeros(cfg.d),
    };
    let attempt = |pool: Vec<usize>, t: u64| {
        replicate(
            &world.platform,
            &world.code_id,
            party_rng(seed, "sybil", t),
            &world.blob,
            &world.genesis,
            cohort.clone(),
            args.clone(),
            pool,
        )
    };
    if sybils.len() < need {
        report.attempted += 1;
        match attempt(sybils.clone(), u64::MAX) {
            Err(e @ EnclaveError::TooFewCandidates { .. }) => report.rejections.push(e.to_string()),
            Err(e) => report.rejections.push(e.to_string()),
            Ok(_) => report.completed += 1,
        }
    }
    let mut pool = sybils.clone();
    pool.extend((0..cfg.n).filter(|j| !world.corrupted.contains(j)).take(need.saturating_sub(pool.len())));

    let threshold = 2 * cfg.tau as i64 - cfg.n_audit as i64;
    let mut corrupted_quorums = 0;
    for t in 0..trials {
        let (enclave, _) = attempt(pool.clone(), t).map_err(SimError::Init)?;
        let a = enclave
            .designated_next()
            .iter()
            .filter(|j| world.corrupted.contains(j))
            .count() as i64;
        corrupted_quorums += (a > threshold) as u64;
    }

    let mut fork_cfg = cfg.clone();
    fork_cfg.adversary = AdversaryScript::SybilFlood { round: 0, fork: true };
    fork_cfg.n_round = fork_cfg.n_round.max(2);
    fork_cfg.rounds = Some(2);
    let mut forks = 0;
    for t in 0..fork_trials {
        fork_cfg.master_seed = trial_seed(seed, t);
        let res = run(fork_cfg.clone())?;
        report.attempted += res.report.attempted;
        report.completed += res.report.completed;
        report.divergent += res.report.divergent;
        forks += (res.report.divergent > 0) as u64;
    }

    let fp = failure_params(&cfg);
    let (q, q_se) = rate(corrupted_quorums, trials);
    let (f, f_se) = rate(forks, fork_trials);
    report.sybil = Some(SybilStats {
        trials,
        quorum_corruption_rate: q,
        quorum_corruption_se: q_se,
        predicted: privacy_round_term(&fp).map_err(|e| SimError::ConfigInvalid(e.to_string()))?,
        fork_trials,
        fork_success_rate: f,
        fork_success_se: f_se,
        fork_predicted: fork_round_term(&fp).map_err(|e| SimError::ConfigInvalid(e.to_string()))?,
    });
    report.bypassed = forks > 0;
    Ok(report)
}
