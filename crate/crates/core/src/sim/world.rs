//! The simulated deployment: clients, the planner platform, and a server
//! whose every delivery decision is made by the seeded scheduler.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::{client_source, corrupted_set, SimError, WorldConfig};
use super::log::{Event, EventLog, ProcessId};
use super::scheduler::Scheduler;
use crate::actors::adversary::{AdversaryScript, AttackReport};
use crate::actors::client::{AuditReply, Behavior, Client, SecAggReply, Submission, TrustAnchors};
use crate::dpftrl::{f_qualify, ModelVector, StrategyMatrix};
use crate::enclave::{
    init_enclave, pubkey_list_digest, recovery, replicate, AuditSignature, EnclaveState,
    PlannerParams, SecAggArgs, SecAggMessage,
};
use crate::evidence::{chain_digest, derive_history, latest_auditors, Evidence, EvidenceChain};
use crate::primitives::{hash, party_rng, planner_code_id, Digest, KeyPair, PartyId, Platform, Quote, SealedBlob};

/// Byte sizes observed for each control-message type during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageSizes {
    pub init_broadcast: BTreeSet<usize>,
    pub update_broadcast: BTreeSet<usize>,
    pub audit_response: BTreeSet<usize>,
    pub secagg_request: BTreeSet<usize>,
    pub secagg_control: BTreeSet<usize>,
}

impl MessageSizes {
    /// Each message type was seen with exactly one size.
    pub fn constant(&self) -> bool {
        [
            &self.update_broadcast,
            &self.audit_response,
            &self.secagg_request,
            &self.secagg_control,
        ]
        .iter()
        .all(|s| s.len() == 1)
    }
}

/// What an omniscient harness knows about one process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessTruth {
    pub round: u64,
    /// Plaintext updates the enclave accepted, by client.
    pub contributions: BTreeMap<usize, ModelVector>,
    pub output: Option<ModelVector>,
}

/// Seeds and plaintexts needed to recompute every released output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub noise_seed: u64,
    pub sigma: f64,
    pub zeta: f64,
    pub d: usize,
    pub n_clients: usize,
    pub strategy: StrategyMatrix,
    pub processes: BTreeMap<ProcessId, ProcessTruth>,
}

/// A round whose evidence the server adopted into its chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub pid: ProcessId,
    pub cohort: Vec<usize>,
    pub participants: Vec<usize>,
    pub args: SecAggArgs,
    pub output: Option<ModelVector>,
    pub corrupted_updates: BTreeMap<usize, ModelVector>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: EventLog,
    pub chain: EvidenceChain,
    pub rounds: Vec<RoundRecord>,
    pub report: AttackReport,
    pub sizes: MessageSizes,
    pub truth: GroundTruth,
    /// Reason the honest pipeline stopped early, if it did.
    pub halted: Option<String>,
    /// Times an honest client signed the same digest twice (must stay 0).
    pub signing_violations: usize,
    /// Honest plaintext updates found in the server-visible transcript.
    pub taint_leaks: usize,
    pub manufacturer_pk: crate::primitives::PublicKey,
}

impl RunResult {
    pub fn completed_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Outputs by round for rounds that released one.
    pub fn outputs(&self) -> BTreeMap<u64, ModelVector> {
        self.rounds
            .iter()
            .filter_map(|r| r.output.clone().map(|o| (r.round, o)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Launch(u64),
    Audit(ProcessId, usize),
    Agree(ProcessId),
    SecAgg(ProcessId, usize),
    Aggregate(ProcessId),
}

pub(crate) struct Process {
    pub round: u64,
    pub enclave: EnclaveState,
    pub broadcast: Quote,
    pub cohort: Vec<usize>,
    pub args: SecAggArgs,
    pub loaded: EvidenceChain,
    pub recipients: Vec<usize>,
    pub replies: usize,
    pub signatures: Vec<AuditSignature>,
    pub request: Option<Quote>,
    pub secagg_replies: usize,
    pub submissions: Vec<Submission>,
    pub evidence: Option<Evidence>,
    pub rogue: bool,
    pub pretended: bool,
    pub injected: Vec<SecAggMessage>,
}

pub struct World {
    pub cfg: WorldConfig,
    pub(crate) platform: Platform,
    pub(crate) code_id: Digest,
    pub clients: Vec<Client>,
    pub(crate) corrupted: BTreeSet<usize>,
    pub(crate) params: PlannerParams,
    pub(crate) blob: SealedBlob,
    pub(crate) genesis: EvidenceChain,
    chain: EvidenceChain,
    /// Chain each adopted round was launched from.
    snapshots: BTreeMap<u64, EvidenceChain>,
    adopted: BTreeMap<u64, ProcessId>,
    theta: ModelVector,
    log: EventLog,
    next_pid: ProcessId,
    processes: BTreeMap<ProcessId, Process>,
    /// Rogue pid -> held honest pid to resume once the rogue settles.
    resume: BTreeMap<ProcessId, ProcessId>,
    injections: BTreeMap<u64, Vec<SecAggMessage>>,
    crashed: bool,
    pretend_done: bool,
    report: AttackReport,
    sizes: MessageSizes,
    transcript: Vec<Vec<u8>>,
    secrets: Vec<Vec<u8>>,
    truth: GroundTruth,
    rounds: BTreeMap<u64, RoundRecord>,
    signed: BTreeSet<(usize, Digest)>,
    signing_violations: usize,
    last_abort: Option<String>,
    scheduler: Scheduler<Action>,
}

impl World {
    /// Build the deployment and run initialization to completion.
    pub fn new(cfg: WorldConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let seed = cfg.master_seed;
        let strategy = cfg
            .strategy_matrix
            .load(cfg.n_round)
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let platform = Platform::new(seed);
        let code_id = planner_code_id();
        let keys: Vec<KeyPair> = (0..cfg.n)
            .map(|j| KeyPair::random(&mut party_rng(seed, "client-key", j as u64), PartyId::Client(j as u32)))
            .collect();
        let pubkeys: Vec<_> = keys.iter().map(|k| k.public_key).collect();
        let corrupted = corrupted_set(&cfg);
        let honest: Vec<usize> = (0..cfg.n).filter(|j| !corrupted.contains(j)).collect();
        let mut offline: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); cfg.n];
        let k = cfg.dropouts_per_round();
        if k > 0 {
            for r in 0..cfg.n_round as u64 {
                let mut rng = party_rng(seed, "dropout", r);
                for i in sample(&mut rng, honest.len(), k) {
                    offline[honest[i]].insert(r);
                }
            }
        }
        let params = PlannerParams {
            n_clients: cfg.n,
            n_audit: cfg.n_audit,
            tau: cfg.tau,
            min_candidates: cfg.min_candidates(),
            overselect_margin: cfg.overselect_margin,
            schema: cfg.participation_schema(),
            d: cfg.d,
            sigma: cfg.sigma,
            zeta: cfg.zeta,
            strategy: strategy.clone(),
            record_participation: cfg.record_participation,
        };
        let anchors = TrustAnchors {
            manufacturer_pk: platform.manufacturer_pk(),
            code_id,
            pubkey_list_digest: pubkey_list_digest(&pubkeys),
            params_digest: params.digest(),
        };
        let mut clients: Vec<Client> = keys
            .into_iter()
            .enumerate()
            .map(|(j, kp)| {
                let behavior = if corrupted.contains(&j) {
                    Behavior::Corrupted {
                        withhold: cfg.withhold,
                    }
                } else if offline[j].is_empty() {
                    Behavior::Honest
                } else {
                    Behavior::Dropout(std::mem::take(&mut offline[j]))
                };
                Client::new(
                    j,
                    kp,
                    behavior,
                    client_source(&cfg, j),
                    anchors,
                    cfg.d,
                    cfg.zeta,
                    party_rng(seed, "client", j as u64),
                )
            })
            .collect();

        let candidates = server_candidates(&cfg, u64::MAX);
        let (mut enclave, init_quote) =
            init_enclave(&platform, &code_id, pubkeys, candidates, params.clone(), seed)
                .map_err(SimError::Init)?;
        let mut sizes = MessageSizes::default();
        sizes.init_broadcast.insert(init_quote.wire_len());
        let sigs: Vec<AuditSignature> = clients
            .iter_mut()
            .filter_map(|c| match c.client_audit(&init_quote) {
                AuditReply::Signed(s) => Some(s),
                _ => None,
            })
            .collect();
        let (blob, init) = enclave.finish_init(&sigs).map_err(SimError::Init)?;
        let genesis = EvidenceChain::genesis(init);
        let truth = GroundTruth {
            noise_seed: crate::enclave::derive_noise_seed(seed),
            sigma: cfg.sigma,
            zeta: cfg.zeta,
            d: cfg.d,
            n_clients: cfg.n,
            strategy,
            processes: BTreeMap::new(),
        };
        let report = AttackReport::new(&cfg.adversary);
        Ok(Self {
            theta: ModelVector::zeros(cfg.d),
            scheduler: Scheduler::new(party_rng(seed, "scheduler", 0)),
            platform,
            code_id,
            clients,
            corrupted,
            params,
            blob,
            chain: genesis.clone(),
            genesis,
            snapshots: BTreeMap::new(),
            adopted: BTreeMap::new(),
            log: EventLog::new(),
            next_pid: 0,
            processes: BTreeMap::new(),
            resume: BTreeMap::new(),
            injections: BTreeMap::new(),
            crashed: false,
            pretend_done: false,
            report,
            sizes,
            transcript: Vec::new(),
            secrets: Vec::new(),
            truth,
            rounds: BTreeMap::new(),
            signed: BTreeSet::new(),
            signing_violations: 0,
            last_abort: None,
            cfg,
        })
    }

    pub fn chain(&self) -> &EvidenceChain {
        &self.chain
    }

    pub fn is_corrupted(&self, client: usize) -> bool {
        self.corrupted.contains(&client)
    }

    /// Drive every round to completion (or until the pipeline stalls).
    pub fn run(mut self) -> RunResult {
        self.scheduler.push(Action::Launch(0));
        while let Some(action) = self.scheduler.next() {
            self.step(action);
        }
        self.finish()
    }

    fn finish(mut self) -> RunResult {
        let halted = (self.rounds.len() < self.cfg.rounds()).then(|| {
            self.last_abort
                .clone()
                .unwrap_or_else(|| "pipeline stalled".to_string())
        });
        let taint_leaks = count_leaks(&self.transcript, &self.secrets);
        self.report.finalize(&self.log);
        RunResult {
            log: self.log,
            chain: self.chain,
            rounds: self.rounds.into_values().collect(),
            report: self.report,
            sizes: self.sizes,
            truth: self.truth,
            halted,
            signing_violations: self.signing_violations,
            taint_leaks,
            manufacturer_pk: self.platform.manufacturer_pk(),
        }
    }

    fn step(&mut self, action: Action) {
        match action {
            Action::Launch(round) => self.launch_round(round),
            Action::Audit(pid, j) => self.deliver_audit(pid, j),
            Action::Agree(pid) => self.agree(pid),
            Action::SecAgg(pid, j) => self.deliver_secagg(pid, j),
            Action::Aggregate(pid) => self.aggregate(pid),
        }
    }

    fn server_cohort(&self, chain: &EvidenceChain, round: u64, label: &str, avoid: &[usize]) -> Vec<usize> {
        let history = derive_history(chain, self.cfg.n).expect("server chain is well formed");
        let Ok(qualified) = f_qualify(&self.params.schema, &history, round as usize) else {
            return Vec::new();
        };
        let want = self.cfg.cohort_size + self.cfg.overselect_margin;
        let fresh: Vec<usize> = qualified.iter().copied().filter(|j| !avoid.contains(j)).collect();
        let pool: Vec<usize> = if fresh.len() >= want {
            fresh
        } else {
            qualified.into_iter().collect()
        };
        let mut rng = party_rng(self.cfg.master_seed, label, round);
        let mut cohort: Vec<usize> = sample(&mut rng, pool.len(), want.min(pool.len()))
            .into_iter()
            .map(|k| pool[k])
            .collect();
        cohort.sort_unstable();
        cohort
    }

    fn launch_round(&mut self, round: u64) {
        let chain = self.chain.clone();
        let cohort = self.server_cohort(&chain, round, "server-cohort", &[]);
        let args = SecAggArgs {
            theta: self.theta.clone(),
        };
        let script = self.cfg.adversary;
        let mut candidates = server_candidates(&self.cfg, round);
        if let AdversaryScript::SybilFlood { round: r, .. } = script {
            if r == round {
                candidates = self.sybil_candidates(round, &chain, &cohort, &args);
            }
        }
        self.launch(round, chain.clone(), cohort.clone(), args.clone(), candidates, false);

        if self.forks_at(round) {
            self.launch_rogue(round, chain.clone(), &cohort, &args);
        }
        match script {
            AdversaryScript::Rollback { round: r } if r + 2 == round => {
                if let Some(stale) = self.snapshots.get(&r).cloned() {
                    let old = &self.processes[&self.adopted[&r]];
                    let old_cohort = old.cohort.clone();
                    let old_args = old.args.clone();
                    self.launch_rogue(r, stale, &old_cohort, &old_args);
                }
            }
            AdversaryScript::Replay { round: r } if r + 1 == round => self.replay(r, round),
            _ => {}
        }
    }

    fn forks_at(&self, round: u64) -> bool {
        match self.cfg.adversary {
            AdversaryScript::Fork { round: r } => r == round,
            AdversaryScript::SybilFlood { round: r, fork: true } => r + 1 == round,
            _ => false,
        }
    }

    /// Corrupted clients only first; if the enclave refuses the short list,
    /// pad with as few honest clients as it will accept.
    fn sybil_candidates(
        &mut self,
        round: u64,
        chain: &EvidenceChain,
        cohort: &[usize],
        args: &SecAggArgs,
    ) -> Vec<usize> {
        let only: Vec<usize> = self.corrupted.iter().copied().collect();
        let min = self.params.min_candidates.max(self.params.n_audit);
        if only.len() < min {
            self.report.attempted += 1;
            self.launch(round, chain.clone(), cohort.to_vec(), args.clone(), only.clone(), true);
        }
        let mut pool = only;
        pool.extend(
            (0..self.cfg.n)
                .filter(|j| !self.corrupted.contains(j))
                .take(min.saturating_sub(pool.len())),
        );
        pool
    }

    fn launch_rogue(&mut self, round: u64, chain: EvidenceChain, avoid: &[usize], args: &SecAggArgs) {
        let cohort = self.server_cohort(&chain, round, "adversary-cohort", avoid);
        let mut theta = args.theta.clone();
        theta.0[0] += 1.0;
        let candidates = server_candidates(&self.cfg, round);
        self.report.attempted += 1;
        self.launch(round, chain, cohort, SecAggArgs { theta }, candidates, true);
    }

    fn new_pid(&mut self) -> ProcessId {
        let pid = self.next_pid;
        self.next_pid += 1;
        pid
    }

    fn launch(
        &mut self,
        round: u64,
        chain: EvidenceChain,
        cohort: Vec<usize>,
        args: SecAggArgs,
        candidates: Vec<usize>,
        rogue: bool,
    ) -> Option<ProcessId> {
        let pid = self.new_pid();
        let loaded_digest = chain_digest(&chain).expect("non-empty");
        let mut sorted = cohort.clone();
        sorted.sort_unstable();
        self.log.push(
            pid,
            Event::Invoke {
                cohort: sorted,
                round,
                args_hash: args.digest(),
                loaded_digest,
            },
        );
        let rng = party_rng(self.cfg.master_seed, "enclave-instance", pid);
        let (enclave, broadcast) = match replicate(
            &self.platform,
            &self.code_id,
            rng,
            &self.blob,
            &chain,
            cohort.clone(),
            args.clone(),
            candidates,
        ) {
            Ok(x) => x,
            Err(e) => {
                self.abort(pid, e.to_string(), rogue);
                return None;
            }
        };
        self.sizes.update_broadcast.insert(broadcast.wire_len());
        self.transcript.push(broadcast.encode());
        let auditors = enclave.chosen_auditors().to_vec();
        let recipients = self.recipients(round, &auditors, rogue);
        self.scheduler
            .extend(recipients.iter().map(|&j| Action::Audit(pid, j)));
        let empty = recipients.is_empty();
        self.processes.insert(
            pid,
            Process {
                round,
                enclave,
                broadcast,
                cohort,
                args,
                loaded: chain,
                recipients,
                replies: 0,
                signatures: Vec::new(),
                request: None,
                secagg_replies: 0,
                submissions: Vec::new(),
                evidence: None,
                rogue,
                pretended: false,
                injected: Vec::new(),
            },
        );
        if empty {
            self.scheduler.push(Action::Agree(pid));
        }
        Some(pid)
    }

    /// Which auditors get a process's broadcast. A forking server that holds
    /// enough corrupted auditors splits the honest ones between the two
    /// branches; otherwise every auditor sees every broadcast.
    fn recipients(&self, round: u64, auditors: &[usize], rogue: bool) -> Vec<usize> {
        if !self.forks_at(round) {
            return auditors.to_vec();
        }
        let (bad, good): (Vec<usize>, Vec<usize>) =
            auditors.iter().partition(|j| self.corrupted.contains(j));
        let (a, n_audit, tau) = (bad.len(), self.params.n_audit, self.params.tau);
        if a + n_audit < 2 * tau {
            return auditors.to_vec();
        }
        let first = tau.saturating_sub(a).min(good.len());
        let mut out = bad;
        if rogue {
            out.extend(&good[first..]);
        } else {
            out.extend(&good[..first]);
        }
        out
    }

    fn abort(&mut self, pid: ProcessId, reason: String, rogue: bool) {
        self.log.push(pid, Event::Aborted { reason: reason.clone() });
        if rogue {
            self.report.rejections.push(format!("process {pid}: {reason}"));
        } else {
            self.last_abort = Some(format!("round aborted: {reason}"));
        }
        if let Some(held) = self.resume.remove(&pid) {
            self.scheduler.push(Action::Agree(held));
        }
    }

    fn deliver_audit(&mut self, pid: ProcessId, j: usize) {
        let p = self.processes.get_mut(&pid).expect("live process");
        let reply = self.clients[j].client_audit(&p.broadcast);
        p.replies += 1;
        let done = p.replies == p.recipients.len();
        match reply {
            AuditReply::Signed(s) => {
                self.sizes.audit_response.insert(s.wire_len());
                if !self.corrupted.contains(&j) {
                    let digest = chain_digest(&p.loaded).expect("non-empty");
                    if !self.signed.insert((j, digest)) {
                        self.signing_violations += 1;
                    }
                }
                p.signatures.push(s);
            }
            AuditReply::Aborted(reason) => {
                if p.rogue {
                    self.report
                        .rejections
                        .push(format!("process {pid}: auditor {j} refused ({reason:?})"));
                }
            }
            AuditReply::Silent => {}
        }
        if done {
            self.scheduler.push(Action::Agree(pid));
        }
    }

    fn agree(&mut self, pid: ProcessId) {
        let (round, rogue, pretended) = {
            let p = &self.processes[&pid];
            (p.round, p.rogue, p.pretended)
        };
        if !rogue {
            if let AdversaryScript::PretendCrash { round: r } = self.cfg.adversary {
                if r == round && !pretended && !self.pretend_done {
                    self.pretend_done = true;
                    self.processes.get_mut(&pid).unwrap().pretended = true;
                    let p = &self.processes[&pid];
                    let (chain, cohort, args) = (p.loaded.clone(), p.cohort.clone(), p.args.clone());
                    let before = self.next_pid;
                    self.launch_rogue(round, chain, &cohort, &args);
                    match self.processes.contains_key(&before) {
                        true => {
                            self.resume.insert(before, pid);
                        }
                        false => self.scheduler.push(Action::Agree(pid)),
                    }
                    return;
                }
            }
            if self.cfg.crash.is_some_and(|c| c.round == round) && !self.crashed {
                self.crashed = true;
                self.crash_and_recover(pid);
                return;
            }
        }
        let p = self.processes.get_mut(&pid).unwrap();
        match p.enclave.collect_agreement(&p.signatures) {
            Ok(evidence) => {
                p.evidence = Some(evidence.clone());
                self.transcript.push(evidence.encode());
                let cohort = p.cohort.clone();
                self.scheduler
                    .extend(cohort.iter().map(|&j| Action::SecAgg(pid, j)));
                if cohort.is_empty() {
                    self.scheduler.push(Action::Aggregate(pid));
                }
                let loaded = p.loaded.clone();
                if rogue {
                    self.report.completed += 1;
                }
                if self.try_adopt(pid, &loaded, evidence) && !self.cfg.record_participation {
                    self.schedule_next(round);
                }
            }
            Err(e) => self.abort(pid, e.to_string(), rogue),
        }
        if let Some(held) = self.resume.remove(&pid) {
            self.scheduler.push(Action::Agree(held));
        }
    }

    /// Append `evidence` if the server's chain is still the one `pid` loaded.
    fn try_adopt(&mut self, pid: ProcessId, loaded: &EvidenceChain, evidence: Evidence) -> bool {
        if chain_digest(&self.chain) != chain_digest(loaded) {
            return false;
        }
        let round = self.processes[&pid].round;
        self.snapshots.insert(round, loaded.clone());
        self.adopted.insert(round, pid);
        self.chain = self.chain.appended(evidence);
        true
    }

    fn schedule_next(&mut self, round: u64) {
        if ((round + 1) as usize) < self.cfg.rounds() {
            self.scheduler.push(Action::Launch(round + 1));
        }
    }

    fn crash_and_recover(&mut self, pid: ProcessId) {
        let p = self.processes.get_mut(&pid).unwrap();
        p.enclave.crash();
        let (round, loaded, cohort, args, broadcast, sigs) = (
            p.round,
            p.loaded.clone(),
            p.cohort.clone(),
            p.args.clone(),
            p.broadcast.clone(),
            p.signatures.clone(),
        );
        self.log.push(
            pid,
            Event::Aborted {
                reason: "enclave crashed after quorum".into(),
            },
        );
        let rid = self.new_pid();
        self.log.push(
            rid,
            Event::Invoke {
                cohort: cohort.clone(),
                round,
                args_hash: args.digest(),
                loaded_digest: chain_digest(&loaded).expect("non-empty"),
            },
        );
        match recovery(
            &self.platform,
            &self.code_id,
            &self.blob,
            &loaded,
            &broadcast,
            &cohort,
            &args,
            &sigs,
        ) {
            Ok(evidence) => {
                self.log.push(
                    rid,
                    Event::Respond {
                        output_digest: None,
                        evidence_digest: evidence.digest(),
                    },
                );
                self.transcript.push(evidence.encode());
                self.processes.get_mut(&pid).unwrap().evidence = Some(evidence.clone());
                if self.try_adopt(pid, &loaded, evidence) {
                    self.rounds.insert(
                        round,
                        RoundRecord {
                            round,
                            pid: rid,
                            cohort,
                            participants: Vec::new(),
                            args,
                            output: None,
                            corrupted_updates: BTreeMap::new(),
                        },
                    );
                    self.schedule_next(round);
                }
            }
            Err(e) => self.abort(rid, e.to_string(), false),
        }
    }

    fn deliver_secagg(&mut self, pid: ProcessId, j: usize) {
        let p = self.processes.get_mut(&pid).expect("live process");
        if p.request.is_none() {
            match p.enclave.secagg_request() {
                Ok(q) => {
                    self.sizes.secagg_request.insert(q.wire_len());
                    self.transcript.push(q.encode());
                    p.request = Some(q);
                }
                Err(e) => {
                    let rogue = p.rogue;
                    return self.abort(pid, e.to_string(), rogue);
                }
            }
        }
        let reply = self.clients[j].client_secagg(p.request.as_ref().unwrap(), &p.args);
        p.secagg_replies += 1;
        if let SecAggReply::Submitted(s) = reply {
            self.sizes.secagg_control.insert(s.message.control_len());
            self.transcript.push(message_bytes(&s.message));
            if !self.corrupted.contains(&j) {
                self.secrets.push(s.plaintext.to_le_bytes());
            }
            p.submissions.push(s);
        }
        if p.secagg_replies == p.cohort.len() {
            self.scheduler.push(Action::Aggregate(pid));
        }
    }

    fn aggregate(&mut self, pid: ProcessId) {
        let round = self.processes[&pid].round;
        if !self.processes[&pid].rogue {
            if let Some(extra) = self.injections.remove(&round) {
                self.processes.get_mut(&pid).unwrap().injected = extra;
            }
        }
        let p = self.processes.get_mut(&pid).unwrap();
        let mut messages = p.injected.clone();
        messages.extend(p.submissions.iter().map(|s| s.message.clone()));
        let update_evidence = p.evidence.clone().expect("agreed");
        let outcome = p.enclave.secure_aggregate(&messages);
        let rogue = p.rogue;
        let (output, participants, participation) = match outcome {
            Ok(out) => {
                if rogue {
                    for (j, r) in &out.rejected {
                        self.report
                            .rejections
                            .push(format!("process {pid}: message from {j} dropped ({r:?})"));
                    }
                }
                (Some(out.output), out.participants, out.participation)
            }
            Err(e) => {
                if rogue {
                    self.report.rejections.push(format!("process {pid}: {e}"));
                }
                (None, Vec::new(), None)
            }
        };
        for (j, r) in injected_rejections(&messages, &p.injected, &participants) {
            self.report
                .rejections
                .push(format!("replayed message from {j} dropped ({r})"));
        }
        let final_evidence = participation.clone().unwrap_or(update_evidence.clone());
        self.log.push(
            pid,
            Event::Respond {
                output_digest: output.as_ref().map(|o| hash(&o.to_le_bytes())),
                evidence_digest: final_evidence.digest(),
            },
        );
        if let Some(o) = &output {
            self.transcript.push(o.to_le_bytes());
        }
        let contributions: BTreeMap<usize, ModelVector> = p
            .submissions
            .iter()
            .filter(|s| participants.contains(&s.message.sender))
            .map(|s| (s.message.sender, s.plaintext.clone()))
            .collect();
        self.truth.processes.insert(
            pid,
            ProcessTruth {
                round,
                contributions: contributions.clone(),
                output: output.clone(),
            },
        );
        if self.adopted.get(&round) != Some(&pid) {
            return;
        }
        let corrupted_updates = contributions
            .iter()
            .filter(|(j, _)| self.corrupted.contains(j))
            .map(|(j, v)| (*j, v.clone()))
            .collect();
        let p = &self.processes[&pid];
        if let Some(o) = &output {
            let n = p.cohort.len().max(1) as f64;
            self.theta.add_assign(&o.scale(-self.cfg.learning_rate / n));
        }
        self.rounds.insert(
            round,
            RoundRecord {
                round,
                pid,
                cohort: p.cohort.clone(),
                participants,
                args: p.args.clone(),
                output,
                corrupted_updates,
            },
        );
        if self.cfg.record_participation {
            if let Some(entry) = participation {
                if chain_digest(&self.chain) == Ok(update_evidence.digest()) {
                    self.transcript.push(entry.encode());
                    self.chain = self.chain.appended(entry);
                }
            }
            self.schedule_next(round);
        }
    }

    /// Re-send an old round's broadcast, signatures and messages.
    fn replay(&mut self, old_round: u64, live_round: u64) {
        let Some(&old_pid) = self.adopted.get(&old_round) else {
            return;
        };
        let old = &self.processes[&old_pid];
        let (broadcast, recipients, sigs, chain, cohort, args) = (
            old.broadcast.clone(),
            old.recipients.clone(),
            old.signatures.clone(),
            old.loaded.clone(),
            old.cohort.clone(),
            old.args.clone(),
        );
        let messages: Vec<SecAggMessage> = old.submissions.iter().map(|s| s.message.clone()).collect();
        for j in recipients {
            if let AuditReply::Aborted(reason) = self.clients[j].client_audit(&broadcast) {
                self.report
                    .rejections
                    .push(format!("replayed broadcast: auditor {j} refused ({reason:?})"));
            }
        }
        // A fresh instance on the old chain, fed the old signatures.
        self.report.attempted += 1;
        let pid = self.new_pid();
        self.log.push(
            pid,
            Event::Invoke {
                cohort: cohort.clone(),
                round: old_round,
                args_hash: args.digest(),
                loaded_digest: chain_digest(&chain).expect("non-empty"),
            },
        );
        let rng = party_rng(self.cfg.master_seed, "enclave-instance", pid);
        let candidates = server_candidates(&self.cfg, old_round);
        match replicate(&self.platform, &self.code_id, rng, &self.blob, &chain, cohort, args, candidates) {
            Ok((mut enclave, _)) => match enclave.collect_agreement(&sigs) {
                Ok(_) => {
                    self.report.completed += 1;
                    self.log.push(
                        pid,
                        Event::Aborted {
                            reason: "replayed signatures accepted".into(),
                        },
                    );
                }
                Err(e) => self.abort(pid, e.to_string(), true),
            },
            Err(e) => self.abort(pid, e.to_string(), true),
        }
        self.injections.entry(live_round).or_default().extend(messages);
    }
}

fn injected_rejections<'a>(
    _all: &'a [SecAggMessage],
    injected: &'a [SecAggMessage],
    participants: &'a [usize],
) -> impl Iterator<Item = (usize, &'static str)> + 'a {
    // Injected messages can only count if they were accepted in place of a
    // fresh one; a correct enclave rejects all of them for the nonce.
    injected
        .iter()
        .map(move |m| (m.sender, if participants.contains(&m.sender) { "superseded" } else { "rejected" }))
}

/// Auditor candidates an honest server offers: a random `ceil(kappa n)` subset.
fn server_candidates(cfg: &WorldConfig, round: u64) -> Vec<usize> {
    let k = cfg.min_candidates();
    if k >= cfg.n {
        return (0..cfg.n).collect();
    }
    let mut rng = party_rng(cfg.master_seed, "server-candidates", round);
    let mut c: Vec<usize> = sample(&mut rng, cfg.n, k).into_vec();
    c.sort_unstable();
    c
}

fn message_bytes(m: &SecAggMessage) -> Vec<u8> {
    let mut out = m.encrypted_update.clone();
    out.extend(&m.encrypted_decryption_key);
    out.extend(m.ec_pub_key);
    out.extend(m.mac);
    out
}

/// Occurrences of any secret byte string inside any transcript entry.
pub fn count_leaks(transcript: &[Vec<u8>], secrets: &[Vec<u8>]) -> usize {
    secrets
        .iter()
        .filter(|s| !s.is_empty())
        .filter(|s| {
            transcript
                .iter()
                .any(|t| t.windows(s.len()).any(|w| w == s.as_slice()))
        })
        .count()
}

/// Convenience: build and run in one go.
pub fn run(cfg: WorldConfig) -> Result<RunResult, SimError> {
    Ok(World::new(cfg)?.run())
}

#[allow(dead_code)]
fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[allow(dead_code)]
fn auditors_of(chain: &EvidenceChain) -> Vec<usize> {
    latest_auditors(chain).unwrap_or_default()
}
