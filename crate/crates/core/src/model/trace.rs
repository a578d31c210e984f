//! Line-oriented text encoding of execution graphs.
//!
//! ```text
//! V <vid> <kind> <progress>
//! E msg <producer> <consumer> <msgid>
//! E succ <from> <to>
//! P <vid> <msgid>
//! COMPLETE true|false
//! ```
//!
//! `P` lines list produced messages that no edge mentions, so unconsumed
//! output survives a round trip. Kinds are `input`, `task:<name>` or
//! `step:<ordinal>:<name>@<key>`; names and keys are percent-escaped.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::graph::{ExecutionGraph, ExecutionVertex, VertexId, VertexKind};
use super::{InstanceId, MessageId, ProgressState};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct TraceError {
    pub line: usize,
    pub reason: String,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' | '@' | ':' => {
                let _ = write!(out, "%{:02X}", c as u32);
            }
            c if c.is_whitespace() || c.is_control() => {
                let mut buf = [0u8; 4];
                for b in c.encode_utf8(&mut buf).bytes() {
                    let _ = write!(out, "%{b:02X}");
                }
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn kind_token(kind: &VertexKind) -> String {
    match kind {
        VertexKind::Input => "input".into(),
        VertexKind::Task { task_name } => format!("task:{}", escape(task_name)),
        VertexKind::Step { instance, ordinal } => {
            format!("step:{ordinal}:{}@{}", escape(&instance.name), escape(&instance.key))
        }
    }
}

fn parse_kind(s: &str) -> Option<VertexKind> {
    if s == "input" {
        return Some(VertexKind::Input);
    }
    if let Some(name) = s.strip_prefix("task:") {
        return Some(VertexKind::Task { task_name: unescape(name)? });
    }
    let rest = s.strip_prefix("step:")?;
    let (ordinal, inst) = rest.split_once(':')?;
    let (name, key) = inst.split_once('@')?;
    let instance = InstanceId::try_new(unescape(name)?, unescape(key)?).ok()?;
    Some(VertexKind::Step { instance, ordinal: ordinal.parse().ok()? })
}

pub fn write_trace(graph: &ExecutionGraph) -> String {
    let mut out = String::new();
    for v in graph.vertices.values() {
        let _ = writeln!(out, "V {} {} {}", v.id.0, kind_token(&v.kind), v.progress.token());
    }
    for (p, c, m) in &graph.message_edges {
        let _ = writeln!(out, "E msg {} {} {}", p.0, c.0, m);
    }
    for (a, b) in &graph.successor_edges {
        let _ = writeln!(out, "E succ {} {}", a.0, b.0);
    }
    let on_edge: BTreeSet<(VertexId, MessageId)> = graph.message_edges.iter().map(|(p, _, m)| (*p, *m)).collect();
    for v in graph.vertices.values() {
        for m in &v.produced {
            if !on_edge.contains(&(v.id, *m)) {
                let _ = writeln!(out, "P {} {}", v.id.0, m);
            }
        }
    }
    let _ = writeln!(out, "COMPLETE {}", graph.complete);
    out
}

pub fn parse_trace(text: &str) -> Result<ExecutionGraph, TraceError> {
    let mut graph = ExecutionGraph::new();
    let mut produced: Vec<(VertexId, MessageId, usize)> = Vec::new();
    let mut consumed: Vec<(VertexId, MessageId, usize)> = Vec::new();
    let mut saw_complete = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |reason: &str| TraceError { line, reason: reason.to_string() };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let vid = |s: &str| s.parse::<u64>().map(VertexId).map_err(|_| err(&format!("bad vertex id `{s}`")));
        let mid = |s: &str| s.parse::<MessageId>().map_err(|e| err(&e.to_string()));
        match fields.as_slice() {
            [] => {}
            [c, ..] if c.starts_with('#') => {}
            ["V", id, kind, progress] => {
                let id = vid(id)?;
                if graph.vertices.contains_key(&id) {
                    return Err(err(&format!("vertex {id} defined twice")));
                }
                let kind = parse_kind(kind).ok_or_else(|| err(&format!("bad kind `{kind}`")))?;
                let progress =
                    ProgressState::from_token(progress).ok_or_else(|| err(&format!("bad progress `{progress}`")))?;
                graph.insert_parsed(ExecutionVertex { id, kind, progress, consumed: vec![], produced: vec![] });
            }
            ["E", "msg", p, c, m] => {
                let (p, c, m) = (vid(p)?, vid(c)?, mid(m)?);
                graph.insert_message_edge(p, c, m);
                produced.push((p, m, line));
                consumed.push((c, m, line));
            }
            ["E", "succ", a, b] => {
                let (a, b) = (vid(a)?, vid(b)?);
                graph.successor_edges.insert((a, b));
            }
            ["P", v, m] => produced.push((vid(v)?, mid(m)?, line)),
            ["COMPLETE", flag] => {
                graph.complete = flag.parse().map_err(|_| err(&format!("bad flag `{flag}`")))?;
                saw_complete = true;
            }
            _ => return Err(err(&format!("unrecognized record `{raw}`"))),
        }
    }

    let lines = text.lines().count();
    for (v, m, line) in produced {
        let vertex = graph.vertices.get_mut(&v).ok_or(TraceError { line, reason: format!("unknown vertex {v}") })?;
        if !vertex.produced.contains(&m) {
            vertex.produced.push(m);
        }
    }
    for (v, m, line) in consumed {
        let vertex = graph.vertices.get_mut(&v).ok_or(TraceError { line, reason: format!("unknown vertex {v}") })?;
        if !vertex.consumed.contains(&m) {
            vertex.consumed.push(m);
        }
    }
    for (a, b) in &graph.successor_edges {
        for x in [a, b] {
            if !graph.vertices.contains_key(x) {
                return Err(TraceError { line: lines, reason: format!("successor edge names unknown vertex {x}") });
            }
        }
    }
    // a file without records is the empty graph
    if !saw_complete && text.lines().any(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#')) {
        return Err(TraceError { line: lines, reason: "missing COMPLETE record".into() });
    }
    graph.rebuild_indexes();
    Ok(graph)
}
