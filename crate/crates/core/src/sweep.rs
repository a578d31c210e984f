//! Runs many independent simulations and audits each trace. With the
//! `parallel` feature the runs are spread over a rayon pool.

use crate::cluster::{run_simulation, ClusterError, Load, SimConfig, SimOutput};
use crate::model::{ConsistencyLevel, InstanceId};
use crate::speculation::SpeculationMode;
use crate::workloads::{Workload, ACCOUNT};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Audit {
    pub seed: u64,
    pub mode: SpeculationMode,
    pub workload: String,
    pub complete: bool,
    pub crashes: u64,
    pub rewinds: u64,
    /// Everything found wrong with the run, one line each.
    pub problems: Vec<String>,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks a finished simulation: recorder refusals, all commit-guarantee
/// bullets, every consistency level, completion, and for bank runs the
/// money invariants.
pub fn audit(cfg: &SimConfig, out: &SimOutput) -> Audit {
    let mut problems: Vec<String> = out.recorder_violations.iter().map(|v| format!("recorder: {v}")).collect();
    // closed loops stop at the duration with work in flight
    if !out.complete && !matches!(cfg.load, Load::Closed { .. }) {
        problems.push(format!("run did not settle by {} us", out.end_us));
    }
    problems.extend(out.graph.check_ccc_properties().violations.iter().map(|v| v.to_string()));
    problems.extend(out.graph.check_consistency(&ConsistencyLevel::ALL).violations.iter().map(|v| v.to_string()));
    for r in &out.requests {
        if out.complete && r.completions != 1 {
            problems.push(format!("{:?} reported {} completions", r.instance, r.completions));
        }
    }
    if let Workload::Bank { accounts, initial_balance, .. } = cfg.workload {
        if out.negative_balances > 0 {
            problems.push(format!("{} negative balances observed", out.negative_balances));
        }
        match out.final_states() {
            Ok(states) => {
                let mut sum = 0i64;
                for a in 0..accounts {
                    let id = InstanceId::new(ACCOUNT, a.to_string());
                    let balance = match SimOutput::entity_state(&states, &id) {
                        None => initial_balance,
                        Some(s) => s.parse::<i64>().unwrap_or(i64::MIN),
                    };
                    if balance < 0 {
                        problems.push(format!("account {a} ends at {balance}"));
                    }
                    sum += balance;
                }
                let expected = accounts as i64 * initial_balance;
                if sum != expected {
                    problems.push(format!("balances sum to {sum}, expected {expected}"));
                }
            }
            Err(e) => problems.push(format!("final state unreadable: {e}")),
        }
    }
    Audit {
        seed: cfg.seed,
        mode: cfg.mode,
        workload: cfg.workload.to_string(),
        complete: out.complete,
        crashes: out.crashes,
        rewinds: out.rewinds,
        problems,
    }
}

pub fn run_and_audit(cfg: &SimConfig) -> Result<Audit, ClusterError> {
    let out = run_simulation(cfg)?;
    Ok(audit(cfg, &out))
}

/// One audit per configuration, in input order.
#[cfg(feature = "parallel")]
pub fn sweep(configs: &[SimConfig]) -> Vec<Result<Audit, ClusterError>> {
    use rayon::prelude::*;
    configs.par_iter().map(run_and_audit).collect()
}

/// One audit per configuration, in input order.
#[cfg(not(feature = "parallel"))]
pub fn sweep(configs: &[SimConfig]) -> Vec<Result<Audit, ClusterError>> {
    sweep_sequential(configs)
}

pub fn sweep_sequential(configs: &[SimConfig]) -> Vec<Result<Audit, ClusterError>> {
    configs.iter().map(run_and_audit).collect()
}
