use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use durable_core::cluster::{run_realtime, run_simulation, FaultPlan, Load, RequestMetrics, SimConfig};
use durable_core::config::{parse_config, parse_config_with_defaults, Driver};
use durable_core::metrics::{
    ecdf_csv, emit_ecdf, flushes_csv, metrics_csv, read_latencies, scaleout_rates, throughput_csv, Summary,
};
use durable_core::model::trace::{parse_trace, write_trace};
use durable_core::model::{ConsistencyLevel, ExecutionGraph};
use durable_core::sweep::audit;

#[derive(Parser)]
#[command(name = "durable", version, about = "Workflow engine runs, trace checks and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and write trace.txt, metrics.csv and ecdf.csv.
    Run {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a trace file; exits 1 when it has violations.
    Verify { trace: PathBuf },
    /// Closed-loop load on one node, spread over all nodes at `rebalance_at`.
    Scaleout {
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Turn the latencies in a metrics.csv into an eCDF.
    Ecdf {
        metrics: PathBuf,
        /// Defaults to ecdf.csv next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, out } => cmd_run(&config, &out),
        Cmd::Verify { trace } => cmd_verify(&trace),
        Cmd::Scaleout { config, out } => cmd_scaleout(&config, &out),
        Cmd::Ecdf { metrics, out } => cmd_ecdf(&metrics, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_outputs(dir: &Path, graph: &ExecutionGraph, requests: &[RequestMetrics], series: &[u64], flushes: &[u64]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, "trace.txt", &write_trace(graph))?;
    write(dir, "metrics.csv", &metrics_csv(requests)?)?;
    write(dir, "throughput.csv", &throughput_csv(series)?)?;
    write(dir, "flushes.csv", &flushes_csv(flushes)?)?;
    let latencies: Vec<u64> = requests.iter().filter_map(RequestMetrics::latency_us).collect();
    if !latencies.is_empty() {
        write(dir, "ecdf.csv", &ecdf_csv(&emit_ecdf(&latencies)?)?)?;
    }
    Ok(())
}

fn graph_problems(graph: &ExecutionGraph) -> Vec<String> {
    let mut v: Vec<String> = graph.check_ccc_properties().violations.iter().map(|v| v.to_string()).collect();
    v.extend(graph.check_consistency(&ConsistencyLevel::ALL).violations.iter().map(|v| v.to_string()));
    v
}

fn report(problems: &[String]) -> ExitCode {
    if problems.is_empty() {
        println!("checks: ok");
        return ExitCode::SUCCESS;
    }
    for p in problems.iter().take(20) {
        println!("  {p}");
    }
    println!("checks: {} problems", problems.len());
    ExitCode::from(1)
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_run(config: &Path, out: &Path) -> Result<ExitCode> {
    let rc = parse_config(&read_config(config)?).with_context(|| format!("in {}", config.display()))?;
    let cfg = &rc.sim;
    println!("{} {} on {} nodes, {} partitions, seed {}", cfg.workload, cfg.mode, cfg.nodes, cfg.partitions, cfg.seed);
    match rc.driver {
        Driver::Sim => {
            let o = run_simulation(cfg)?;
            write_outputs(out, &o.graph, &o.requests, &o.throughput, &o.flushes)?;
            println!("{}", Summary::new(&o.requests, o.end_us));
            println!(
                "flushes {}  rewinds {}  crashes {}  moves {}  settled {}",
                o.flushes.iter().sum::<u64>(),
                o.rewinds,
                o.crashes,
                o.moves,
                o.complete
            );
            Ok(report(&audit(cfg, &o).problems))
        }
        Driver::Realtime => {
            fs::create_dir_all(out)?;
            let store = tempfile::tempdir_in(out).context("creating storage directory")?;
            let o = run_realtime(cfg, store.path())?;
            write_outputs(out, &o.graph, &o.requests, &o.throughput, &o.flushes)?;
            println!("{}", Summary::new(&o.requests, o.elapsed.as_micros() as u64));
            println!("flushes {}  rewinds {}  settled {}", o.flushes.iter().sum::<u64>(), o.rewinds, o.complete);
            let mut problems: Vec<String> = o.recorder_violations.iter().map(|v| format!("recorder: {v}")).collect();
            problems.extend(graph_problems(&o.graph));
            Ok(report(&problems))
        }
    }
}

fn cmd_verify(trace: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let graph = parse_trace(&text).with_context(|| format!("parsing {}", trace.display()))?;
    let problems = graph_problems(&graph);
    println!("{} vertices, {} message edges", graph.len(), graph.message_edges().len());
    if problems.is_empty() {
        println!("no violations");
        return Ok(ExitCode::SUCCESS);
    }
    for p in &problems {
        println!("{p}");
    }
    println!("{} violations", problems.len());
    Ok(ExitCode::from(1))
}

const SCALEOUT_DEFAULTS: &[(&str, &str)] = &[
    ("workload", "hello_seq"),
    ("mode", "local"),
    ("nodes", "4"),
    ("clients", "400"),
    ("duration", "30"),
    ("rebalance_at", "10"),
];

/// The scale-out run: every partition starts on node 0.
pub fn scaleout_config(text: &str) -> Result<SimConfig> {
    let mut cfg = parse_config_with_defaults(text, SCALEOUT_DEFAULTS)?.sim;
    if ![4, 8].contains(&cfg.nodes) {
        bail!("scale-out runs on 4 or 8 nodes, not {}", cfg.nodes);
    }
    if !matches!(cfg.load, Load::Closed { .. }) {
        bail!("scale-out needs closed-loop load (`clients`)");
    }
    if cfg.faults != FaultPlan::None {
        bail!("scale-out runs without faults");
    }
    cfg.start_nodes = 1;
    cfg.max_time_us = cfg.max_time_us.max(cfg.duration_us);
    Ok(cfg)
}

fn cmd_scaleout(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = scaleout_config(&read_config(config)?).with_context(|| format!("in {}", config.display()))?;
    let o = run_simulation(&cfg)?;
    write_outputs(out, &o.graph, &o.requests, &o.throughput, &o.flushes)?;
    let at = cfg.rebalance_at_us.unwrap_or(0);
    let (pre, post) = scaleout_rates(&o.throughput, at);
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}/s"));
    println!("1 -> {} nodes at {:.1} s: moved {} of {} partitions", cfg.nodes, at as f64 / 1e6, o.moves, cfg.partitions);
    println!("throughput before {}  after {}", show(pre), show(post));
    if let (Some(pre), Some(post)) = (pre, post) {
        println!("speed-up {:.2}x", post / pre);
    }
    Ok(report(&audit(&cfg, &o).problems))
}

fn cmd_ecdf(metrics: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let latencies = read_latencies(&text).with_context(|| format!("parsing {}", metrics.display()))?;
    let points = emit_ecdf(&latencies).with_context(|| format!("no completed requests in {}", metrics.display()))?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => metrics.with_file_name("ecdf.csv"),
    };
    fs::write(&target, ecdf_csv(&points)?).with_context(|| format!("writing {}", target.display()))?;
    println!("{} points -> {}", points.len(), target.display());
    Ok(ExitCode::SUCCESS)
}
