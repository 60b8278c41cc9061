use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::client::DataSource;
use crate::actors::AdversaryScript;
use crate::analysis::{ceil_count, floor_count};
use crate::dpftrl::{DpError, ParticipationSchema, SchemaVariant, StrategyMatrix};
use crate::enclave::EnclaveError;
use crate::primitives::party_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("deployment failed to initialize: {0}")]
    Init(EnclaveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    #[default]
    Identity,
    Prefix,
    SqrtPrefix,
    /// CSV with one row per round.
    File(PathBuf),
}

impl StrategyChoice {
    pub fn load(&self, n_round: usize) -> Result<StrategyMatrix, DpError> {
        let m = match self {
            StrategyChoice::Identity => StrategyMatrix::identity(n_round),
            StrategyChoice::Prefix => StrategyMatrix::prefix(n_round),
            StrategyChoice::SqrtPrefix => StrategyMatrix::sqrt_prefix(n_round),
            StrategyChoice::File(path) => StrategyMatrix::from_csv_file(path)?,
        };
        if m.size() != n_round {
            return Err(DpError::BadMatrix(format!(
                "{}x{} matrix for {n_round} rounds",
                m.size(),
                m.size()
            )));
        }
        Ok(m)
    }
}

/// Crash the enclave of round `round` (0-based) right after its auditors
/// signed, then recover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub round: u64,
}

fn one() -> f64 {
    1.0
}
fn default_d() -> usize {
    8
}
fn default_schema() -> SchemaVariant {
    SchemaVariant::MinSeparation(1)
}
fn default_lr() -> f64 {
    0.1
}
fn default_points() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n: usize,
    /// Fraction of corrupted clients.
    #[serde(default)]
    pub gamma: f64,
    /// Fraction of clients available as auditor candidates.
    #[serde(default = "one")]
    pub kappa: f64,
    /// Fraction of available clients that drop out each round.
    #[serde(default)]
    pub beta: f64,
    pub n_round: usize,
    /// Rounds to drive; defaults to `n_round`.
    #[serde(default)]
    pub rounds: Option<usize>,
    pub n_audit: usize,
    pub tau: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub zeta: f64,
    #[serde(default = "default_schema")]
    pub schema: SchemaVariant,
    #[serde(default)]
    pub strategy_matrix: StrategyChoice,
    #[serde(default)]
    pub overselect_margin: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub adversary: AdversaryScript,
    pub cohort_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub crash: Option<CrashSpec>,
    #[serde(default)]
    pub record_participation: bool,
    #[serde(default = "default_points")]
    pub points_per_client: usize,
    /// Corrupted clients refuse to sign state transitions.
    #[serde(default)]
    pub withhold: bool,
}

impl WorldConfig {
    /// A small honest deployment; tweak fields from here.
    pub fn small(n: usize, n_round: usize) -> Self {
        Self {
            n,
            gamma: 0.0,
            kappa: 1.0,
            beta: 0.0,
            n_round,
            rounds: None,
            n_audit: 5.min(n),
            tau: 5.min(n) / 2 + 1,
            d: default_d(),
            sigma: 1.0,
            zeta: 1.0,
            schema: default_schema(),
            strategy_matrix: StrategyChoice::Identity,
            overselect_margin: 0,
            master_seed: 0,
            adversary: AdversaryScript::Honest,
            cohort_size: 4.min(n),
            learning_rate: default_lr(),
            crash: None,
            record_participation: false,
            points_per_client: default_points(),
            withhold: false,
        }
    }

    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or(self.n_round)
    }

    pub fn participation_schema(&self) -> ParticipationSchema {
        ParticipationSchema {
            variant: self.schema,
            n_round: self.n_round,
        }
    }

    pub fn n_corrupted(&self) -> usize {
        ceil_count(self.gamma * self.n as f64).min(self.n)
    }

    pub fn min_candidates(&self) -> usize {
        ceil_count(self.kappa * self.n as f64).min(self.n)
    }

    pub fn dropouts_per_round(&self) -> usize {
        let pool = floor_count(self.kappa * self.n as f64);
        ceil_count(self.kappa * self.n as f64 * self.beta)
            .min(pool)
            .min(self.n - self.n_corrupted())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        for (name, v) in [("gamma", self.gamma), ("kappa", self.kappa), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.n == 0 || self.n > u32::MAX as usize {
            return bad("n must be positive".into());
        }
        if self.kappa == 0.0 {
            return bad("kappa = 0 leaves no auditor candidates".into());
        }
        if self.n_audit == 0 || 2 * self.tau <= self.n_audit || self.tau > self.n_audit {
            return bad(format!(
                "tau = {} must satisfy n_audit/2 < tau <= n_audit = {}",
                self.tau, self.n_audit
            ));
        }
        if self.n_audit > self.min_candidates() {
            return bad(format!(
                "n_audit = {} exceeds the candidate pool of {}",
                self.n_audit,
                self.min_candidates()
            ));
        }
        if self.n_round == 0 || self.rounds() > self.n_round {
            return bad("rounds must lie in 1..=n_round".into());
        }
        if self.cohort_size == 0 || self.cohort_size + self.overselect_margin > self.n {
            return bad("cohort_size + overselect_margin must lie in 1..=n".into());
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.zeta > 0.0 && self.zeta.is_finite()) {
            return bad("sigma and zeta must be positive".into());
        }
        if !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite".into());
        }
        if self.schema == SchemaVariant::MinSeparation(0) {
            return bad("min_separation needs b >= 1".into());
        }
        if let Some(c) = self.crash {
            if c.round as usize >= self.rounds() {
                return bad(format!("crash round {} is never reached", c.round));
            }
        }
        self.strategy_matrix
            .load(self.n_round)
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

/// The corrupted clients of a run; fixed for its whole duration.
pub fn corrupted_set(cfg: &WorldConfig) -> BTreeSet<usize> {
    let mut rng = party_rng(cfg.master_seed, "corrupted", 0);
    sample(&mut rng, cfg.n, cfg.n_corrupted()).into_iter().collect()
}

pub fn client_source(cfg: &WorldConfig, client: usize) -> DataSource {
    DataSource {
        task_seed: cfg.master_seed,
        client_seed: cfg.master_seed ^ ((client as u64 + 1) << 32),
        points: cfg.points_per_client,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"n": 10, "n_round": 3, "n_audit": 3, "tau": 2, "cohort_size": 2, "bogus": 1}"#;
        assert!(serde_json::from_str::<WorldConfig>(json).is_err());
        let json = r#"{"n": 10, "n_round": 3, "n_audit": 3, "tau": 2, "cohort_size": 2,
            "schema": {"min_separation": 2}, "strategy_matrix": "sqrt_prefix",
            "adversary": {"strategy": "fork", "round": 1}}"#;
        let cfg: WorldConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.schema, SchemaVariant::MinSeparation(2));
    }

    #[test]
    fn validation() {
        let mut cfg = WorldConfig::small(10, 3);
        cfg.validate().unwrap();
        cfg.tau = 2;
        cfg.n_audit = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = WorldConfig::small(10, 3);
        cfg.kappa = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = WorldConfig::small(10, 3);
        cfg.crash = Some(CrashSpec { round: 3 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adversarial_rounding() {
        let mut cfg = WorldConfig::small(10, 3);
        cfg.gamma = 0.25;
        cfg.beta = 0.15;
        assert_eq!(cfg.n_corrupted(), 3);
        assert_eq!(cfg.dropouts_per_round(), 2);
        cfg.gamma = 0.3;
        assert_eq!(cfg.n_corrupted(), 3);
        assert_eq!(corrupted_set(&cfg).len(), 3);
    }
}
