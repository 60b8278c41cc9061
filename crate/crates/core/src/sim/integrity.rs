//! Integrity of a run: the chain respects the participation schema at every
//! prefix, and every released output is exactly the clipped sum of the
//! accepted updates plus that round's correlated noise.

use std::collections::BTreeMap;

use serde::Serialize;

use super::log::{spans, EventLog, LogError, ProcessId};
use super::world::GroundTruth;
use crate::dpftrl::{clip, correlated_noise, ModelVector, NoiseMatrix, ParticipationSchema};
use crate::evidence::{chain_digest, check_structure, derive_history, EvidenceChain};
use crate::primitives::{hash, Digest};

/// Relative tolerance when recomputing outputs.
pub const OUTPUT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityVerdict {
    pub ok: bool,
    pub violations: Vec<String>,
    /// Outputs recomputed from ground truth (0 when none was supplied).
    pub outputs_checked: usize,
}

/// Sum of clipped contributions plus the round's noise row.
pub fn expected_output(truth: &GroundTruth, round: u64, contributions: &BTreeMap<usize, ModelVector>) -> Option<ModelVector> {
    let z = NoiseMatrix::new(truth.noise_seed, truth.sigma);
    let mut out = correlated_noise(&z, &truth.strategy, round as usize, truth.d, truth.zeta).ok()?;
    for v in contributions.values() {
        out.add_assign(&clip(v, truth.zeta));
    }
    Some(out)
}

fn close(a: &ModelVector, b: &ModelVector) -> bool {
    a.dim() == b.dim()
        && a.0
            .iter()
            .zip(&b.0)
            .all(|(x, y)| (x - y).abs() <= OUTPUT_TOLERANCE * x.abs().max(y.abs()).max(1.0))
}

pub fn check_integrity(
    log: &EventLog,
    chain: &EvidenceChain,
    schema: &ParticipationSchema,
    truth: Option<&GroundTruth>,
) -> Result<IntegrityVerdict, LogError> {
    let spans = spans(log)?;
    let mut violations = Vec::new();

    if let Err(e) = check_structure(chain) {
        violations.push(format!("chain: {e}"));
    }
    let n = truth.map(|t| t.n_clients).unwrap_or_else(|| {
        chain
            .entries
            .iter()
            .flat_map(|e| e.cohort.iter().chain(&e.auditors_next))
            .max()
            .map_or(0, |m| m + 1)
    });
    // digest of each prefix -> the round index that prefix leads into
    let mut on_chain: BTreeMap<Digest, u64> = BTreeMap::new();
    for len in 1..=chain.len() {
        let prefix = chain.prefix(len);
        match derive_history(&prefix, n) {
            Ok(h) if !h.adheres_to(schema) => {
                let round = chain.entries[len - 1].round_index.unwrap_or_default();
                violations.push(format!("round {round}: participation history breaks the schema"));
            }
            Ok(_) => {}
            Err(e) => violations.push(format!("prefix of length {len}: {e}")),
        }
        if let Ok(d) = chain_digest(&prefix) {
            on_chain.insert(d, prefix.next_round());
        }
    }

    let mut outputs_checked = 0;
    for s in spans.iter().filter(|s| s.completed()) {
        let (_, output_digest, evidence_digest) = s.response().expect("completed");
        let tag = |pid: ProcessId, round: u64| format!("process {pid} (round {round})");
        match on_chain.get(&s.loaded_digest) {
            None => violations.push(format!("{}: loaded a state not on the chain", tag(s.pid, s.round))),
            Some(&r) if r != s.round => violations.push(format!(
                "{}: loaded a state leading into round {r}",
                tag(s.pid, s.round)
            )),
            _ => {}
        }
        if !on_chain.contains_key(&evidence_digest) {
            violations.push(format!("{}: emitted evidence not on the chain", tag(s.pid, s.round)));
        }
        let Some(truth) = truth else { continue };
        let Some(pt) = truth.processes.get(&s.pid) else {
            if output_digest.is_some() {
                violations.push(format!("{}: output with no known inputs", tag(s.pid, s.round)));
            }
            continue;
        };
        if pt.round != s.round {
            violations.push(format!("{}: ground truth disagrees on the round", tag(s.pid, s.round)));
        }
        match (output_digest, &pt.output) {
            (None, None) => {}
            (Some(d), Some(out)) => {
                outputs_checked += 1;
                if hash(&out.to_le_bytes()) != d {
                    violations.push(format!("{}: released output does not match the log", tag(s.pid, s.round)));
                }
                match expected_output(truth, s.round, &pt.contributions) {
                    Some(want) if close(&want, out) => {}
                    _ => violations.push(format!(
                        "{}: output is not the clipped sum plus noise",
                        tag(s.pid, s.round)
                    )),
                }
            }
            _ => violations.push(format!("{}: output presence disagrees with ground truth", tag(s.pid, s.round))),
        }
    }
    Ok(IntegrityVerdict {
        ok: violations.is_empty(),
        violations,
        outputs_checked,
    })
}
