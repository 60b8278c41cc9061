//! Scripted server deviations and what they achieved.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sim::log::{Event, EventLog};

/// What the server does beyond honest orchestration. Rounds are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryScript {
    #[default]
    Honest,
    /// Run a second instance from the same blob and chain as `round`.
    Fork { round: u64 },
    /// After two more rounds, restart from the chain `round` was launched on.
    Rollback { round: u64 },
    /// During the next round, resend `round`'s broadcast, signatures and
    /// secure-aggregation messages.
    Replay { round: u64 },
    /// Offer only corrupted auditor candidates at `round`; with `fork`, try
    /// to fork the following round using whatever auditors were drawn.
    SybilFlood {
        round: u64,
        #[serde(default)]
        fork: bool,
    },
    /// Claim `round`'s instance crashed after quorum and start another.
    PretendCrash { round: u64 },
}

impl AdversaryScript {
    pub fn name(&self) -> &'static str {
        match self {
            AdversaryScript::Honest => "honest",
            AdversaryScript::Fork { .. } => "fork",
            AdversaryScript::Rollback { .. } => "rollback",
            AdversaryScript::Replay { .. } => "replay",
            AdversaryScript::SybilFlood { .. } => "sybil_flood",
            AdversaryScript::PretendCrash { .. } => "pretend_crash",
        }
    }

    /// Rounds a run needs for the script to play out.
    pub fn rounds_needed(&self) -> usize {
        match *self {
            AdversaryScript::Honest => 1,
            AdversaryScript::Fork { round } | AdversaryScript::PretendCrash { round } => round as usize + 1,
            AdversaryScript::Replay { round } => round as usize + 2,
            AdversaryScript::Rollback { round } => round as usize + 3,
            AdversaryScript::SybilFlood { round, fork } => round as usize + 1 + fork as usize,
        }
    }
}

/// Auditor-draw statistics from repeated Sybil-flooded selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SybilStats {
    pub trials: u64,
    /// Draws with more than `2 tau - n_audit` corrupted auditors.
    pub quorum_corruption_rate: f64,
    pub quorum_corruption_se: f64,
    pub predicted: f64,
    /// Full fork attempts on a flooded selection.
    pub fork_trials: u64,
    pub fork_success_rate: f64,
    pub fork_success_se: f64,
    /// Chance of at least `2 tau - n_audit` corrupted auditors.
    pub fork_predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub strategy: String,
    /// Adversarial processes started.
    pub attempted: u64,
    /// Adversarial processes that got past auditor agreement.
    pub completed: u64,
    /// Completions beyond the first for the same loaded chain digest.
    pub divergent: u64,
    /// Completed processes per loaded chain digest (hex).
    pub outputs_per_digest: BTreeMap<String, u64>,
    /// Some chain digest was completed more than once.
    pub bypassed: bool,
    /// Why adversarial steps were refused, in order.
    pub rejections: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sybil: Option<SybilStats>,
}

impl AttackReport {
    pub fn new(script: &AdversaryScript) -> Self {
        Self {
            strategy: script.name().to_string(),
            attempted: 0,
            completed: 0,
            divergent: 0,
            outputs_per_digest: BTreeMap::new(),
            bypassed: false,
            rejections: Vec::new(),
            sybil: None,
        }
    }

    /// Tally completions per loaded digest from the event log.
    pub fn finalize(&mut self, log: &EventLog) {
        let mut loaded = BTreeMap::new();
        for r in &log.records {
            match &r.event {
                Event::Invoke { loaded_digest, .. } => {
                    loaded.insert(r.pid, *loaded_digest);
                }
                Event::Respond { .. } => {
                    if let Some(d) = loaded.get(&r.pid) {
                        *self.outputs_per_digest.entry(d.to_hex()).or_default() += 1;
                    }
                }
                Event::Aborted { .. } => {}
            }
        }
        self.divergent = self.outputs_per_digest.values().map(|&c| c.saturating_sub(1)).sum();
        self.bypassed = self.divergent > 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_json() {
        let s: AdversaryScript = serde_json::from_str(r#"{"strategy":"sybil_flood","round":0}"#).unwrap();
        assert_eq!(s, AdversaryScript::SybilFlood { round: 0, fork: false });
        let s: AdversaryScript = serde_json::from_str(r#"{"strategy":"honest"}"#).unwrap();
        assert_eq!(s, AdversaryScript::Honest);
        assert!(serde_json::from_str::<AdversaryScript>(r#"{"strategy":"teleport"}"#).is_err());
        assert_eq!(AdversaryScript::Rollback { round: 1 }.rounds_needed(), 4);
    }
}
