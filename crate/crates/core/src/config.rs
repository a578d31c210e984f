//! Run configuration files: `key=value` lines or one JSON object. Nested
//! JSON objects flatten into dotted keys, so `{"faults": {"probability":
//! 0.01}}` and `faults.probability=0.01` mean the same.
//!
//! ```text
//! workload=bank:100:100:1000
//! mode=global
//! nodes=4
//! partitions=32
//! seed=7
//! rate=200
//! faults=random
//! faults.probability=0.002
//! faults.until=0.8
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cluster::{ClusterError, FaultPlan, Load, SimConfig};
use crate::speculation::SpeculationMode;
use crate::workloads::Workload;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("`{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ClusterError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Driver {
    #[default]
    Sim,
    Realtime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub driver: Driver,
}

/// Flat key/value pairs; a repeated key keeps its last value.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let trimmed = text.trim_start();
    let mut out = BTreeMap::new();
    if trimmed.starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(text)?;
        flatten("", &v, &mut out)?;
        return Ok(out);
    }
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, msg: format!("expected key=value, got `{line}`") });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, msg: "empty key".into() });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) -> Result<(), ConfigError> {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Number(n) => {
            out.insert(prefix.to_string(), n.to_string());
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), b.to_string());
        }
        Value::Null => {}
        Value::Array(_) => {
            return Err(ConfigError::Value { key: prefix.to_string(), msg: "arrays are not supported".into() })
        }
    }
    Ok(())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Value { key: key.to_string(), msg: format!("not a number: `{v}`") })
}

fn seconds(key: &str, v: &str) -> Result<u64, ConfigError> {
    let s: f64 = num(key, v)?;
    if !(s >= 0.0 && s.is_finite()) {
        return Err(ConfigError::Value { key: key.to_string(), msg: "must be a non-negative number of seconds".into() });
    }
    Ok((s * 1e6).round() as u64)
}

/// `t:node` pairs separated by commas, `t` in seconds.
fn crash_list(key: &str, v: &str) -> Result<Vec<(u64, u32)>, ConfigError> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (t, n) = item.trim().split_once(':').ok_or_else(|| ConfigError::Value {
                key: key.to_string(),
                msg: format!("expected time:node, got `{item}`"),
            })?;
            Ok((seconds(key, t)?, num(key, n)?))
        })
        .collect()
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    from_pairs(&parse_pairs(text)?)
}

/// Like [`parse_config`], with `defaults` applying to keys the text leaves
/// out.
pub fn parse_config_with_defaults(text: &str, defaults: &[(&str, &str)]) -> Result<RunConfig, ConfigError> {
    let mut pairs: BTreeMap<String, String> = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    pairs.extend(parse_pairs(text)?);
    from_pairs(&pairs)
}

fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    let mut driver = Driver::Sim;
    let (mut requests, mut rate, mut clients) = (None::<u64>, None::<f64>, None::<u32>);
    let mut start_nodes = None;
    let (mut faults, mut probability, mut until, mut crashes) = (None::<String>, 0.002, 0.8, Vec::new());
    for (k, v) in pairs {
        let k = k.as_str();
        match k {
            "workload" => {
                cfg.workload = v.parse::<Workload>().map_err(|msg| ConfigError::Value { key: k.into(), msg })?
            }
            "mode" => {
                cfg.mode = v.parse::<SpeculationMode>().map_err(|msg| ConfigError::Value { key: k.into(), msg })?
            }
            "driver" => {
                driver = match v.as_str() {
                    "sim" => Driver::Sim,
                    "realtime" => Driver::Realtime,
                    _ => return Err(ConfigError::Value { key: k.into(), msg: "expected sim or realtime".into() }),
                }
            }
            "nodes" => cfg.nodes = num(k, v)?,
            "start_nodes" => start_nodes = Some(num(k, v)?),
            "partitions" => cfg.partitions = num(k, v)?,
            "seed" => cfg.seed = num(k, v)?,
            "cores" => cfg.cores_per_node = num(k, v)?,
            "requests" => requests = Some(num(k, v)?),
            "rate" => rate = Some(num(k, v)?),
            "clients" => clients = Some(num(k, v)?),
            "duration" => cfg.duration_us = seconds(k, v)?,
            "max_time" => cfg.max_time_us = seconds(k, v)?,
            "rebalance_at" => cfg.rebalance_at_us = Some(seconds(k, v)?),
            "checkpoint_events" => cfg.checkpoint_events = num(k, v)?,
            "cache_budget" => cfg.cache_budget = Some(num(k, v)?),
            "faults" => faults = Some(v.clone()),
            "faults.probability" => probability = num(k, v)?,
            "faults.until" => until = num(k, v)?,
            "faults.crashes" => crashes = crash_list(k, v)?,
            "costs.task_min_us" => cfg.costs.task_min_us = num(k, v)?,
            "costs.task_max_us" => cfg.costs.task_max_us = num(k, v)?,
            "costs.step_us" => cfg.costs.step_us = num(k, v)?,
            "costs.flush_us" => cfg.costs.flush_us = num(k, v)?,
            "costs.hop_us" => cfg.costs.hop_us = num(k, v)?,
            "costs.restart_min_us" => cfg.costs.restart_min_us = num(k, v)?,
            "costs.restart_max_us" => cfg.costs.restart_max_us = num(k, v)?,
            "costs.move_us" => cfg.costs.move_us = num(k, v)?,
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
    }
    cfg.start_nodes = start_nodes.unwrap_or(cfg.nodes);
    cfg.load = match (clients, requests, rate) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(ConfigError::Value { key: "clients".into(), msg: "closed load takes no requests or rate".into() })
        }
        (Some(clients), None, None) => Load::Closed { clients },
        (None, requests, rate) => Load::Open {
            requests: requests.or(cfg.workload.request_budget()).unwrap_or(100),
            rate: rate.unwrap_or(100.0),
        },
    };
    cfg.faults = match faults.as_deref() {
        None if crashes.is_empty() => FaultPlan::None,
        None | Some("scripted") => FaultPlan::Scripted(crashes),
        Some("none") => FaultPlan::None,
        Some("random") => FaultPlan::Random { probability, until },
        Some(other) => {
            return Err(ConfigError::Value { key: "faults".into(), msg: format!("unknown fault plan `{other}`") })
        }
    };
    if cfg.max_time_us < cfg.duration_us {
        cfg.max_time_us = cfg.duration_us;
    }
    cfg.validate()?;
    Ok(RunConfig { sim: cfg, driver })
}
