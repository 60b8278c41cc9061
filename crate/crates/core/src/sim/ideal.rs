//! Trusted-party reference: what the deployment should release, computed
//! directly from the clients' data with no enclaves, chains or auditors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::config::{client_source, corrupted_set, SimError, WorldConfig};
use super::world::RunResult;
use crate::dpftrl::{
    correlated_noise, f_qualify, local_update, update_history, ClientData, ModelVector, NoiseMatrix,
    ParticipationHistory, ParticipationSchema, StrategyMatrix,
};
use crate::enclave::derive_noise_seed;

#[derive(Debug, Clone)]
pub struct IdealConfig {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub zeta: f64,
    pub noise_seed: u64,
    pub strategy: StrategyMatrix,
    pub schema: ParticipationSchema,
    pub corrupted: BTreeSet<usize>,
    pub datasets: Vec<ClientData>,
}

impl IdealConfig {
    /// The same data, noise and corruption a simulated run of `cfg` uses.
    pub fn from_world(cfg: &WorldConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let strategy = cfg
            .strategy_matrix
            .load(cfg.n_round)
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let datasets = (0..cfg.n)
            .map(|j| {
                let s = client_source(cfg, j);
                ClientData::synthetic(s.task_seed, s.client_seed, cfg.d, s.points)
            })
            .collect();
        Ok(Self {
            n: cfg.n,
            d: cfg.d,
            sigma: cfg.sigma,
            zeta: cfg.zeta,
            noise_seed: derive_noise_seed(cfg.master_seed),
            strategy,
            schema: cfg.participation_schema(),
            corrupted: corrupted_set(cfg),
            datasets,
        })
    }
}

/// One proposal from the simulator for the next round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub cohort: Vec<usize>,
    pub k: usize,
    pub theta: ModelVector,
    /// Values substituted for corrupted cohort members.
    pub corrupted_updates: BTreeMap<usize, ModelVector>,
}

/// Proposals for one iteration, tried in order until one is valid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IdealRound {
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdealOutcome {
    /// Released output per round index `k`.
    pub outputs: BTreeMap<usize, ModelVector>,
    /// Invalid proposals that were refused (the state did not change).
    pub reprompts: usize,
    pub history: Option<ParticipationHistory>,
}

impl IdealConfig {
    fn valid(&self, a: &Attempt, history: &ParticipationHistory, used: &BTreeSet<usize>) -> bool {
        if a.k >= self.strategy.size() || used.contains(&a.k) {
            return false;
        }
        if a.theta.dim() != self.d || !a.theta.is_finite() {
            return false;
        }
        let Ok(qualified) = f_qualify(&self.schema, history, a.k) else {
            return false;
        };
        let mut seen = BTreeSet::new();
        a.cohort.iter().all(|j| qualified.contains(j) && seen.insert(*j))
            && a.cohort
                .iter()
                .filter(|j| self.corrupted.contains(j))
                .all(|j| a.corrupted_updates.get(j).is_some_and(|g| g.dim() == self.d && g.is_finite()))
    }
}

/// Run the trusted party over `script`. Rounds with no valid attempt are
/// skipped, as if the simulator never supplied one.
pub fn ideal_oracle(cfg: &IdealConfig, script: &[IdealRound]) -> IdealOutcome {
    let z = NoiseMatrix::new(cfg.noise_seed, cfg.sigma);
    let mut history = ParticipationHistory::empty(cfg.n);
    let mut used = BTreeSet::new();
    let mut out = IdealOutcome::default();
    for round in script {
        let Some(a) = round.attempts.iter().find(|a| {
            let ok = cfg.valid(a, &history, &used);
            if !ok {
                out.reprompts += 1;
            }
            ok
        }) else {
            continue;
        };
        history = update_history(&cfg.schema, &history, &a.cohort, a.k).expect("validated");
        used.insert(a.k);
        let mut theta_k = correlated_noise(&z, &cfg.strategy, a.k, cfg.d, cfg.zeta).expect("k in range");
        for &j in &a.cohort {
            let g = match a.corrupted_updates.get(&j) {
                Some(g) if cfg.corrupted.contains(&j) => g.clone(),
                _ => local_update(&cfg.datasets[j], &a.theta, cfg.zeta),
            };
            theta_k.add_assign(&g);
        }
        out.outputs.insert(a.k, theta_k);
    }
    out.history = Some(history);
    out
}

/// The script a simulated run effectively played: one valid attempt per
/// released round, with the clients that actually contributed.
pub fn script_from_run(run: &RunResult) -> Vec<IdealRound> {
    run.rounds
        .iter()
        .filter(|r| r.output.is_some())
        .map(|r| IdealRound {
            attempts: vec![Attempt {
                cohort: r.participants.clone(),
                k: r.round as usize,
                theta: r.args.theta.clone(),
                corrupted_updates: r.corrupted_updates.clone(),
            }],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize, n_round: usize) -> IdealConfig {
        IdealConfig::from_world(&WorldConfig::small(n, n_round)).unwrap()
    }

    #[test]
    fn zero_updates_release_pure_noise() {
        let cfg = config(6, 3);
        let script = vec![IdealRound {
            attempts: vec![Attempt {
                cohort: vec![],
                k: 0,
                theta: ModelVector::zeros(cfg.d),
                corrupted_updates: BTreeMap::new(),
            }],
        }];
        let out = ideal_oracle(&cfg, &script);
        let z = NoiseMatrix::new(cfg.noise_seed, cfg.sigma);
        assert_eq!(out.outputs[&0], z.row(0, cfg.d).scale(cfg.zeta));
    }

    #[test]
    fn invalid_attempts_reprompt_without_state_change() {
        let cfg = config(6, 3);
        let theta = ModelVector::zeros(cfg.d);
        let attempt = |k: usize, cohort: Vec<usize>| Attempt {
            cohort,
            k,
            theta: theta.clone(),
            corrupted_updates: BTreeMap::new(),
        };
        let script = vec![
            IdealRound {
                attempts: vec![attempt(0, vec![0, 1])],
            },
            IdealRound {
                // k already used, then k out of range, then a valid one
                attempts: vec![attempt(0, vec![2]), attempt(9, vec![2]), attempt(1, vec![2])],
            },
        ];
        let out = ideal_oracle(&cfg, &script);
        assert_eq!(out.reprompts, 2);
        assert_eq!(out.outputs.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        let h = out.history.unwrap();
        assert!(h.rounds_of(2).contains(&1) && !h.rounds_of(2).contains(&0));
    }

    #[test]
    fn schema_violation_is_refused() {
        let mut w = WorldConfig::small(6, 3);
        w.schema = crate::dpftrl::SchemaVariant::MinSeparation(3);
        let cfg = IdealConfig::from_world(&w).unwrap();
        let theta = ModelVector::zeros(cfg.d);
        let mk = |k| Attempt {
            cohort: vec![1],
            k,
            theta: theta.clone(),
            corrupted_updates: BTreeMap::new(),
        };
        let script = vec![
            IdealRound { attempts: vec![mk(0)] },
            IdealRound { attempts: vec![mk(1)] },
        ];
        let out = ideal_oracle(&cfg, &script);
        assert_eq!(out.reprompts, 1);
        assert_eq!(out.outputs.len(), 1);
    }
}
