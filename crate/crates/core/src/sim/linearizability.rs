//! Brute-force linearizability check over completed update processes.
//!
//! The shared object is the evidence chain itself: a process that loaded
//! digest `x` at round `i` and emitted evidence `y` is a state transition
//! `x -> y`. A history is linearizable when the completed processes can be
//! ordered so that each loads what its predecessor emitted, round indices
//! count up from zero, and no process is placed before one that had already
//! responded when it was invoked.

use serde::Serialize;

use super::log::{spans, EventLog, LogError, ProcessId, ProcessSpan};
use crate::primitives::Digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinearizabilityVerdict {
    pub linearizable: bool,
    /// A valid sequential order when linearizable; otherwise the longest
    /// admissible prefix the search found.
    pub witness: Vec<ProcessId>,
    pub completed: usize,
}

struct Op {
    pid: ProcessId,
    invoke: u64,
    respond: u64,
    round: u64,
    loaded: Digest,
    emitted: Digest,
}

fn completed_ops(spans: &[ProcessSpan]) -> Vec<Op> {
    spans
        .iter()
        .filter_map(|s| {
            let (respond, _, emitted) = s.response()?;
            Some(Op {
                pid: s.pid,
                invoke: s.invoke_ts,
                respond,
                round: s.round,
                loaded: s.loaded_digest,
                emitted,
            })
        })
        .collect()
}

struct Search<'a> {
    ops: &'a [Op],
    /// `before[q]`: ops that responded before `q` was invoked.
    before: Vec<Vec<usize>>,
    placed: Vec<bool>,
    best: Vec<usize>,
}

impl Search<'_> {
    fn dfs(&mut self, order: &mut Vec<usize>, state: Option<(Digest, u64)>) -> bool {
        if order.len() > self.best.len() {
            self.best = order.clone();
        }
        if order.len() == self.ops.len() {
            return true;
        }
        for k in 0..self.ops.len() {
            if self.placed[k] || self.before[k].iter().any(|&p| !self.placed[p]) {
                continue;
            }
            let op = &self.ops[k];
            let fits = match state {
                None => op.round == 0,
                Some((digest, round)) => op.loaded == digest && op.round == round + 1,
            };
            if !fits {
                continue;
            }
            order.push(k);
            self.placed[k] = true;
            if self.dfs(order, Some((op.emitted, op.round))) {
                return true;
            }
            self.placed[k] = false;
            order.pop();
        }
        false
    }
}

pub fn check_linearizable(log: &EventLog) -> Result<LinearizabilityVerdict, LogError> {
    let ops = completed_ops(&spans(log)?);
    // All round-0 processes must start from the same genesis state.
    let mut genesis = ops.iter().filter(|o| o.round == 0).map(|o| o.loaded);
    let consistent_genesis = match genesis.next() {
        Some(g) => genesis.all(|x| x == g),
        None => true,
    };
    let before = ops
        .iter()
        .map(|q| {
            ops.iter()
                .enumerate()
                .filter(|(_, p)| p.respond < q.invoke)
                .map(|(k, _)| k)
                .collect()
        })
        .collect();
    let mut search = Search {
        ops: &ops,
        before,
        placed: vec![false; ops.len()],
        best: Vec::new(),
    };
    let mut order = Vec::new();
    let linearizable = consistent_genesis && search.dfs(&mut order, None);
    let witness = if linearizable { order } else { search.best.clone() };
    Ok(LinearizabilityVerdict {
        linearizable,
        witness: witness.iter().map(|&k| ops[k].pid).collect(),
        completed: ops.len(),
    })
}
