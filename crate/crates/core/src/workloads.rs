//! Built-in orchestrations, entities and activities used by the simulator,
//! the CLI and the tests.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{InstanceId, Payload};
use crate::orchestration::{EntityDefinition, Registry, WorkflowDefinition};

pub const HELLO_SEQUENCE: &str = "HelloSequence";
pub const SIMPLE_SEQUENCE: &str = "SimpleSequence";
pub const TASK_SEQUENCE: &str = "TaskSequence";
pub const TRANSFER: &str = "Transfer";
pub const ACCOUNT: &str = "Account";
pub const FORWARDER: &str = "Forwarder";

const CITIES: [&str; 3] = ["Tokyo", "Seattle", "London"];

pub fn hello_sequence() -> WorkflowDefinition {
    WorkflowDefinition::new(HELLO_SEQUENCE, |ctx| {
        let mut parts = Vec::new();
        for city in CITIES {
            parts.push(ctx.call_activity("SayHello", city)?);
        }
        Ok(parts.join(" "))
    })
}

pub fn simple_sequence() -> WorkflowDefinition {
    WorkflowDefinition::new(SIMPLE_SEQUENCE, |ctx| {
        let x = ctx.get_input();
        let y = ctx.call_activity("F1", &x)?;
        let z = ctx.call_activity("F2", &y)?;
        Ok(z)
    })
}

/// Input is the sequence length; each step appends one token to a
/// comma-separated list.
pub fn task_sequence() -> WorkflowDefinition {
    WorkflowDefinition::new(TASK_SEQUENCE, |ctx| {
        let n: usize = ctx.get_input().parse().unwrap_or(0);
        let mut list = ctx.call_activity("Init", "")?;
        for _ in 0..n {
            list = ctx.call_activity("Process", &list)?;
        }
        Ok(list)
    })
}

/// Input `source,dest,amount`; returns `true` if the money moved.
pub fn transfer() -> WorkflowDefinition {
    WorkflowDefinition::new(TRANSFER, |ctx| {
        let input = ctx.get_input();
        let mut it = input.split(',');
        let (source, dest) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
        let amount: i64 = it.next().and_then(|a| a.parse().ok()).unwrap_or(0);
        let source_id = InstanceId::new(ACCOUNT, source);
        let dest_id = InstanceId::new(ACCOUNT, dest);

        let _lock = ctx.lock(&[source_id.clone(), dest_id.clone()])?;
        let bal: i64 = ctx.call_entity(&source_id, "Get", "")?.parse().unwrap_or(0);
        if bal < amount {
            return Ok("false".into());
        }
        let a = ctx.schedule_entity(&source_id, "Modify", &(-amount).to_string())?;
        let b = ctx.schedule_entity(&dest_id, "Modify", &amount.to_string())?;
        ctx.wait_all(&[a, b])?;
        Ok("true".into())
    })
}

pub fn account(initial_balance: i64) -> EntityDefinition {
    EntityDefinition::new(ACCOUNT, initial_balance.to_string())
        .op("Get", |_, state, _| (state.clone(), state.clone()))
        .op("Modify", |_, state, input| {
            let b: i64 = state.parse().unwrap_or(0);
            let d: i64 = input.parse().unwrap_or(0);
            ((b + d).to_string(), Payload::new())
        })
}

/// Counts `forward` operations and passes the rest of a `;`-separated key
/// list on to the next forwarder.
pub fn forwarder() -> EntityDefinition {
    EntityDefinition::new(FORWARDER, "0").op("forward", |ctx, state, input| {
        let n: u64 = state.parse().unwrap_or(0);
        if let Some((next, rest)) = input.split_once(';').map(|(a, b)| (a.to_string(), b.to_string())).or_else(|| {
            (!input.is_empty()).then(|| (input.to_string(), String::new()))
        }) {
            ctx.signal(&InstanceId::new(FORWARDER, next), "forward", &rest);
        }
        ((n + 1).to_string(), Payload::new())
    })
}

/// Everything above, with accounts starting at `initial_balance`.
pub fn registry(initial_balance: i64) -> Registry {
    let mut r = Registry::new();
    r.orchestration(hello_sequence())
        .orchestration(simple_sequence())
        .orchestration(task_sequence())
        .orchestration(transfer())
        .entity(account(initial_balance))
        .entity(forwarder())
        .activity("SayHello", |input, _| format!("Hello {input}!"))
        .activity("F1", |_, _| "y".into())
        .activity("F2", |_, _| "z".into())
        .activity("Init", |_, _| String::new())
        .activity("Process", |input, _| {
            let n = if input.is_empty() { 0 } else { input.split(',').count() };
            if input.is_empty() {
                format!("t{n}")
            } else {
                format!("{input},t{n}")
            }
        });
    r
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Workload {
    HelloSeq,
    TaskSeq { length: u32 },
    Bank { accounts: u32, initial_balance: i64, transfers: u64, max_amount: i64 },
}

impl Workload {
    pub fn registry(&self) -> Registry {
        match self {
            Workload::Bank { initial_balance, .. } => registry(*initial_balance),
            _ => registry(0),
        }
    }

    /// Requests the workload injects in total, if bounded by itself.
    pub fn request_budget(&self) -> Option<u64> {
        match self {
            Workload::Bank { transfers, .. } => Some(*transfers),
            _ => None,
        }
    }

    /// The orchestration instance and input for request `i`.
    pub fn request(&self, i: u64, rng: &mut impl Rng) -> (InstanceId, Payload) {
        match self {
            Workload::HelloSeq => (InstanceId::new(HELLO_SEQUENCE, format!("r{i}")), Payload::new()),
            Workload::TaskSeq { length } => (InstanceId::new(TASK_SEQUENCE, format!("r{i}")), length.to_string()),
            Workload::Bank { accounts, max_amount, .. } => {
                let a = rng.gen_range(0..*accounts);
                let mut b = rng.gen_range(0..accounts - 1);
                if b >= a {
                    b += 1;
                }
                let amount = rng.gen_range(1..=*max_amount);
                (InstanceId::new(TRANSFER, format!("t{i}")), format!("{a},{b},{amount}"))
            }
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workload::HelloSeq => f.write_str("hello_seq"),
            Workload::TaskSeq { length } => write!(f, "task_seq:{length}"),
            Workload::Bank { accounts, initial_balance, transfers, max_amount } => {
                write!(f, "bank:{accounts}:{initial_balance}:{transfers}:{max_amount}")
            }
        }
    }
}

impl FromStr for Workload {
    type Err = String;

    /// `hello_seq`, `task_seq[:length]` or
    /// `bank[:accounts[:initial[:transfers[:max_amount]]]]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or("");
        let nums: Vec<i64> = parts
            .map(|p| p.parse::<i64>().map_err(|_| format!("bad workload parameter `{p}`")))
            .collect::<Result<_, _>>()?;
        if nums.iter().any(|n| *n <= 0) {
            return Err(format!("workload parameters must be positive in `{s}`"));
        }
        let arg = |i: usize, default: i64| nums.get(i).copied().unwrap_or(default);
        match name {
            "hello_seq" if nums.is_empty() => Ok(Workload::HelloSeq),
            "task_seq" if nums.len() <= 1 => Ok(Workload::TaskSeq { length: arg(0, 10) as u32 }),
            "bank" if nums.len() <= 4 => {
                let accounts = arg(0, 100) as u32;
                if accounts < 2 {
                    return Err("bank needs at least two accounts".into());
                }
                Ok(Workload::Bank {
                    accounts,
                    initial_balance: arg(1, 100),
                    transfers: arg(2, 1000) as u64,
                    max_amount: arg(3, 50),
                })
            }
            _ => Err(format!("unknown workload `{s}`")),
        }
    }
}
