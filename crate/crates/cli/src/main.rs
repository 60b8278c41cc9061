//! `planner`: parameter optimization, sweeps, simulation, log checking and
//! attack suites.
//!
//! Exit codes: 0 ok, 1 bad input, 2 no feasible parameters, 3 a safety
//! check failed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use planner_core::actors::AdversaryScript;
use planner_core::analysis::{self, AnalysisError, OptimizeRequest, SweepSpec};
use planner_core::dpftrl::{ParticipationSchema, SchemaVariant};
use planner_core::evidence::{verify_chain, EvidenceChain};
use planner_core::primitives::planner_code_id;
use planner_core::sim::suite::{run_suite, sybil_trials};
use planner_core::sim::world::GroundTruth;
use planner_core::sim::{check_integrity, check_linearizable, EventLog, World, WorldConfig};
use serde_json::{json, Value};

const BAD_INPUT: u8 = 1;
const INFEASIBLE: u8 = 2;
const UNSAFE: u8 = 3;

#[derive(Parser)]
#[command(name = "planner", version, about = "Auditor-gated stateful secure aggregation: simulator and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smallest auditor count meeting both failure targets.
    Optimize {
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        /// Number of rounds in the whole run.
        #[arg(long)]
        rounds: u64,
        #[arg(long, default_value_t = 1e-8)]
        p_privacy: f64,
        #[arg(long, default_value_t = 1e-8)]
        p_interrupt: f64,
        /// Stop searching past this many auditors.
        #[arg(long)]
        max_n_audit: Option<usize>,
    },
    /// Failure-probability tables as CSV.
    Sweep {
        /// Built-in table.
        #[arg(long, value_enum, conflicts_with = "custom", required_unless_present = "custom")]
        spec: Option<Preset>,
        /// JSON sweep description.
        #[arg(long)]
        custom: Option<PathBuf>,
        /// Output file, or `-` for standard output.
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Run a configured deployment and write its artifacts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an event log (and chain) for linearizability and integrity.
    Check {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        chain: Option<PathBuf>,
        /// Ground truth written by `simulate`, enabling output recomputation.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Run config, for the participation schema.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Repeat an attack over many seeds and report what it achieved.
    Attack {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long, default_value_t = 200)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Base deployment; defaults depend on the strategy.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        n_audit: Option<usize>,
        #[arg(long)]
        tau: Option<usize>,
        /// Full fork attempts after a Sybil-flooded selection.
        #[arg(long)]
        fork_trials: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Fig3left,
    Fig3right,
    Fig4,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Fork,
    Rollback,
    Replay,
    Sybil,
    PretendCrash,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", path.display())))
}

fn print_json<T: ?Sized + serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

/// A run config is a WorldConfig plus an optional `out` directory.
fn load_config(path: &Path) -> Result<(WorldConfig, Option<PathBuf>), Failure> {
    let text = read(path)?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", path.display())))?;
    let out = match v.as_object_mut().and_then(|m| m.remove("out")) {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return Err(fail(BAD_INPUT, format!("out must be a path, got {other}"))),
        None => None,
    };
    let cfg: WorldConfig =
        serde_json::from_value(v).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| fail(BAD_INPUT, e))?;
    Ok((cfg, out))
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    n: u64,
    gamma: f64,
    beta: f64,
    kappa: f64,
    rounds: u64,
    p_privacy: f64,
    p_interrupt: f64,
    cap: Option<usize>,
) -> CmdResult {
    let req = OptimizeRequest {
        n,
        gamma,
        kappa,
        beta,
        n_round: rounds,
        p_privacy,
        p_interrupt,
    };
    match analysis::optimize_params_capped(&req, cap.unwrap_or(usize::MAX)) {
        Ok(o) => {
            println!("{}", serde_json::to_string(&o).expect("serializable"));
            Ok(())
        }
        Err(e @ AnalysisError::NoFeasibleParams { .. }) => {
            println!("{}", json!({ "error": "no_feasible_params", "message": e.to_string() }));
            Err(fail(INFEASIBLE, e))
        }
        Err(e) => Err(fail(BAD_INPUT, e)),
    }
}

fn sweep(spec: Option<Preset>, custom: Option<PathBuf>, out: &str) -> CmdResult {
    let spec = match (spec, custom) {
        (Some(Preset::Fig3left), _) => SweepSpec::fig3_left(),
        (Some(Preset::Fig3right), _) => SweepSpec::fig3_right(),
        (Some(Preset::Fig4), _) => SweepSpec::fig4(),
        (None, Some(path)) => {
            serde_json::from_str(&read(&path)?).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(fail(BAD_INPUT, "one of --spec or --custom is required")),
    };
    let rows = analysis::sweep(&spec).map_err(|e| fail(BAD_INPUT, e))?;
    let csv = analysis::to_csv(&rows);
    if out == "-" {
        std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| fail(BAD_INPUT, e))?;
        Ok(())
    } else {
        write(Path::new(out), &csv)
    }
}

fn schema_for(config: Option<&WorldConfig>, chain: &EvidenceChain) -> ParticipationSchema {
    match config {
        Some(c) => c.participation_schema(),
        None => ParticipationSchema {
            variant: SchemaVariant::MinSeparation(1),
            n_round: (chain.next_round() as usize).max(1),
        },
    }
}

fn simulate(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let (mut cfg, cfg_out) = load_config(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let out = out
        .or(cfg_out)
        .ok_or_else(|| fail(BAD_INPUT, "no output directory (--out or \"out\" in the config)"))?;
    fs::create_dir_all(&out).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", out.display())))?;
    let world = World::new(cfg.clone()).map_err(|e| fail(BAD_INPUT, e))?;
    let res = world.run();

    let lin = check_linearizable(&res.log).map_err(|e| fail(UNSAFE, e))?;
    let integ = check_integrity(&res.log, &res.chain, &cfg.participation_schema(), Some(&res.truth))
        .map_err(|e| fail(UNSAFE, e))?;
    let chain_ok = verify_chain(&res.chain, &res.manufacturer_pk, &planner_code_id()).is_ok();
    let aborted = res
        .log
        .records
        .iter()
        .filter(|r| matches!(r.event, planner_core::sim::Event::Aborted { .. }))
        .count();

    write(&out.join("events.jsonl"), &res.log.to_jsonl())?;
    write(&out.join("chain.json"), &res.chain.to_json())?;
    write(
        &out.join("truth.json"),
        &serde_json::to_string(&res.truth).expect("serializable"),
    )?;
    write(
        &out.join("sizes.json"),
        &serde_json::to_string_pretty(&res.sizes).expect("serializable"),
    )?;
    write(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&res.report).expect("serializable"),
    )?;
    let summary = json!({
        "rounds_completed": res.completed_rounds(),
        "rounds_requested": cfg.rounds(),
        "processes_aborted": aborted,
        "halted": res.halted,
        "chain_length": res.chain.len(),
        "chain_verified": chain_ok,
        "linearizable": lin.linearizable,
        "integrity": integ.ok,
        "attack_bypassed": res.report.bypassed,
        "signing_violations": res.signing_violations,
        "taint_leaks": res.taint_leaks,
        "sizes_constant": res.sizes.constant(),
    });
    write(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("serializable"),
    )?;
    println!(
        "rounds completed {}/{}, processes aborted {aborted}, attacks bypassed {}, linearizable {}, integrity {}",
        res.completed_rounds(),
        cfg.rounds(),
        res.report.bypassed as u8,
        lin.linearizable,
        integ.ok
    );
    let safe = chain_ok
        && lin.linearizable
        && integ.ok
        && res.signing_violations == 0
        && res.taint_leaks == 0
        && (cfg.gamma > 0.0 || !res.report.bypassed);
    if safe {
        Ok(())
    } else {
        Err(fail(UNSAFE, "safety check failed"))
    }
}

fn check(events: &Path, chain: Option<PathBuf>, truth: Option<PathBuf>, config: Option<PathBuf>) -> CmdResult {
    let log = EventLog::from_jsonl(&read(events)?).map_err(|e| fail(BAD_INPUT, e))?;
    let lin = check_linearizable(&log).map_err(|e| fail(BAD_INPUT, e))?;
    let mut verdict = json!({ "linearizability": lin });
    let mut ok = lin.linearizable;
    if let Some(path) = chain {
        let chain = EvidenceChain::from_json(&read(&path)?).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", path.display())))?;
        let truth: Option<GroundTruth> = match truth {
            Some(p) => Some(serde_json::from_str(&read(&p)?).map_err(|e| fail(BAD_INPUT, format!("{}: {e}", p.display())))?),
            None => None,
        };
        let cfg = match config {
            Some(p) => Some(load_config(&p)?.0),
            None => None,
        };
        let schema = schema_for(cfg.as_ref(), &chain);
        let integ = check_integrity(&log, &chain, &schema, truth.as_ref()).map_err(|e| fail(BAD_INPUT, e))?;
        ok &= integ.ok;
        verdict["integrity"] = serde_json::to_value(&integ).expect("serializable");
    }
    print_json(&verdict);
    if ok {
        Ok(())
    } else {
        Err(fail(UNSAFE, "check failed"))
    }
}

#[allow(clippy::too_many_arguments)]
fn attack(
    strategy: Strategy,
    trials: u64,
    seed: u64,
    config: Option<PathBuf>,
    n: Option<usize>,
    gamma: Option<f64>,
    kappa: Option<f64>,
    n_audit: Option<usize>,
    tau: Option<usize>,
    fork_trials: Option<u64>,
) -> CmdResult {
    let mut cfg = match config {
        Some(p) => load_config(&p)?.0,
        None => match strategy {
            Strategy::Sybil => {
                let mut c = WorldConfig::small(100, 2);
                c.gamma = 0.2;
                c.n_audit = 5;
                c.tau = 4;
                c
            }
            _ => WorldConfig::small(20, 4),
        },
    };
    if let Some(v) = n {
        cfg.n = v;
    }
    if let Some(v) = gamma {
        cfg.gamma = v;
    }
    if let Some(v) = kappa {
        cfg.kappa = v;
    }
    if let Some(v) = n_audit {
        cfg.n_audit = v;
    }
    if let Some(v) = tau {
        cfg.tau = v;
    }
    cfg.validate().map_err(|e| fail(BAD_INPUT, e))?;
    let script = match strategy {
        Strategy::Fork => AdversaryScript::Fork { round: 1 },
        Strategy::Rollback => AdversaryScript::Rollback { round: 0 },
        Strategy::Replay => AdversaryScript::Replay { round: 1 },
        Strategy::PretendCrash => AdversaryScript::PretendCrash { round: 1 },
        Strategy::Sybil => {
            let forks = fork_trials.unwrap_or(trials.min(2000));
            let rep = sybil_trials(&cfg, trials, forks, seed).map_err(|e| fail(BAD_INPUT, e))?;
            print_json(&rep);
            return Ok(());
        }
    };
    let rep = run_suite(&cfg, script, trials, seed).map_err(|e| fail(BAD_INPUT, e))?;
    print_json(&rep);
    if rep.safe() || cfg.gamma > 0.0 {
        Ok(())
    } else {
        Err(fail(UNSAFE, "attack succeeded against honest auditors"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { BAD_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Optimize {
            n,
            gamma,
            beta,
            kappa,
            rounds,
            p_privacy,
            p_interrupt,
            max_n_audit,
        } => optimize(n, gamma, beta, kappa, rounds, p_privacy, p_interrupt, max_n_audit),
        Command::Sweep { spec, custom, out } => sweep(spec, custom, &out),
        Command::Simulate { config, seed, out } => simulate(&config, seed, out),
        Command::Check {
            events,
            chain,
            truth,
            config,
        } => check(&events, chain, truth, config),
        Command::Attack {
            strategy,
            trials,
            seed,
            config,
            n,
            gamma,
            kappa,
            n_audit,
            tau,
            fork_trials,
        } => attack(strategy, trials, seed, config, n, gamma, kappa, n_audit, tau, fork_trials),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
