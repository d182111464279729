//! Domain types shared by every stage, and their on-disk formats.
//!
//! Spans, events and correlation results are stored as JSON lines, one
//! record per line. Topologies (call graphs plus process and address maps)
//! are TOML documents with one `[[service]]` table per service; ground truth
//! is a single JSON document.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanId(pub String);

impl SpanId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SpanId {
    fn from(s: &str) -> Self {
        SpanId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TraceId(pub String);

impl fmt::Display for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Ingress,
    Egress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Http,
    Grpc,
    Other,
}

impl Protocol {
    /// Multiplexed protocols carry a stream id per request.
    pub fn is_multiplexed(self) -> bool {
        matches!(self, Protocol::Grpc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Syscall {
    Send,
    Recv,
}

impl Syscall {
    pub fn opposite(self) -> Syscall {
        match self {
            Syscall::Send => Syscall::Recv,
            Syscall::Recv => Syscall::Send,
        }
    }
}

/// One syscall-level observation.
///
/// `prop_span_id` carries the span id travelling in the TCP header option:
/// on an egress-opening `send` it is the sender's own span id, on an
/// ingress-opening `recv` it is the parent's id extracted at the receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(rename = "remote")]
    pub remote_addr: String,
    #[serde(rename = "local")]
    pub local_addr: String,
    pub syscall: Syscall,
    pub protocol: Protocol,
    pub stream_id: Option<u64>,
    pub pid: u32,
    #[serde(rename = "ts_us")]
    pub timestamp_us: u64,
    #[serde(rename = "prop_span_id")]
    pub propagated_span_id: Option<SpanId>,
    /// Simulator-side request token pairing a sender with its receiver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<u64>,
}

impl EventRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stream_id.is_some() != self.protocol.is_multiplexed() {
            return Err(ModelError::Integrity(format!(
                "event at {} us: stream_id must be present exactly for multiplexed protocols",
                self.timestamp_us
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub span_id: SpanId,
    pub kind: SpanKind,
    pub service: String,
    pub pid: u32,
    pub start_us: u64,
    pub end_us: u64,
    pub protocol: Protocol,
    pub parent_span_id: Option<SpanId>,
    pub trace_id: Option<TraceId>,
    /// Callee service of an egress span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    /// Set on egress copies materialized for multi-candidate output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<SpanId>,
}

impl Span {
    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.end_us < self.start_us {
            return Err(ModelError::Integrity(format!(
                "span {}: end_us {} < start_us {}",
                self.span_id, self.end_us, self.start_us
            )));
        }
        Ok(())
    }
}

/// Ordered downstream calls one ingress request of `service` triggers.
///
/// With `n` calls there are `n + 1` delay positions: ingress start to first
/// egress start, between consecutive egress spans, and last egress end to
/// ingress end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGraph {
    pub service: String,
    pub calls: Vec<String>,
}

impl CallGraph {
    pub fn new(service: impl Into<String>, calls: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            service: service.into(),
            calls: calls.into_iter().map(Into::into).collect(),
        }
    }

    /// Number of egress calls.
    pub fn n(&self) -> usize {
        self.calls.len()
    }

    pub fn delay_positions(&self) -> usize {
        self.calls.len() + 1
    }

    /// `(position, target)` pairs, positions counted from 1.
    pub fn egress_calls(&self) -> impl Iterator<Item = (usize, &str)> {
        self.calls.iter().enumerate().map(|(k, t)| (k + 1, t.as_str()))
    }

    pub fn is_leaf(&self) -> bool {
        self.calls.is_empty()
    }
}

/// One `[[service]]` document of a topology file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub name: String,
    pub pid: u32,
    /// Listening endpoint, `ip:port`.
    pub addr: String,
    pub protocol: Protocol,
    #[serde(default)]
    pub calls: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    #[serde(rename = "service", default)]
    pub services: Vec<ServiceEntry>,
}

impl Topology {
    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let topo: Topology = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut names = HashSet::new();
        let mut pids = HashSet::new();
        for s in &self.services {
            if !names.insert(s.name.as_str()) {
                return Err(ModelError::Config(format!("duplicate service {}", s.name)));
            }
            if !pids.insert(s.pid) {
                return Err(ModelError::Config(format!("duplicate pid {}", s.pid)));
            }
        }
        Ok(())
    }

    pub fn service(&self, name: &str) -> Option<&ServiceEntry> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn call_graph(&self, name: &str) -> Option<CallGraph> {
        self.service(name)
            .map(|s| CallGraph::new(s.name.clone(), s.calls.iter().cloned()))
    }

    pub fn call_graphs(&self) -> Vec<CallGraph> {
        self.services
            .iter()
            .map(|s| CallGraph::new(s.name.clone(), s.calls.iter().cloned()))
            .collect()
    }

    pub fn service_of_pid(&self) -> HashMap<u32, String> {
        self.services.iter().map(|s| (s.pid, s.name.clone())).collect()
    }

    pub fn service_of_addr(&self) -> HashMap<String, String> {
        self.services
            .iter()
            .map(|s| (s.addr.clone(), s.name.clone()))
            .collect()
    }
}

/// True causal structure of a dataset.
///
/// `intra` maps each ingress span to the egress spans it caused, in call
/// order. `inter` maps each downstream ingress span to the egress span that
/// called it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intra: BTreeMap<SpanId, Vec<SpanId>>,
    pub inter: BTreeMap<SpanId, SpanId>,
}

impl GroundTruth {
    /// Egress ids must not be shared between tuples.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen: HashMap<&SpanId, &SpanId> = HashMap::new();
        for (ingress, tuple) in &self.intra {
            for e in tuple {
                if let Some(other) = seen.insert(e, ingress) {
                    return Err(ModelError::Integrity(format!(
                        "egress {e} assigned to both {other} and {ingress}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let truth: GroundTruth =
            serde_json::from_str(text).map_err(|source| ModelError::Parse { line: 1, source })?;
        truth.validate()?;
        Ok(truth)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

/// One emitted correlation for an ingress span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAssignment {
    pub egress: Vec<SpanId>,
    pub pds: f64,
    pub cds: f64,
    /// Per egress id: whether this emission is a duplicate of a span
    /// already emitted for another ingress span.
    pub duplicated: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub service: String,
    /// First entry is the one-to-one assignment; further entries only
    /// appear in multi-candidate mode.
    pub assignments: BTreeMap<SpanId, Vec<CandidateAssignment>>,
    /// Ingress spans without any feasible candidate.
    pub unassigned: Vec<SpanId>,
    pub approximate_components: usize,
    pub degraded: bool,
}

impl CorrelationResult {
    /// Checks that non-duplicated egress ids are used at most once.
    pub fn check_one_to_one(&self) -> Result<(), ModelError> {
        let mut owner: HashMap<&SpanId, &SpanId> = HashMap::new();
        for (ingress, list) in &self.assignments {
            for cand in list {
                for (e, dup) in cand.egress.iter().zip(&cand.duplicated) {
                    if *dup {
                        continue;
                    }
                    match owner.get(e) {
                        Some(o) if *o != ingress => {
                            return Err(ModelError::Integrity(format!(
                                "egress {e} assigned to both {o} and {ingress}"
                            )))
                        }
                        _ => {
                            owner.insert(e, ingress);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Primary assignment of an ingress span.
    pub fn primary(&self, ingress: &SpanId) -> Option<&CandidateAssignment> {
        self.assignments.get(ingress).and_then(|l| l.first())
    }
}

/// Correlation line record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentLine {
    pub service: String,
    pub ingress_id: SpanId,
    pub rank: usize,
    pub egress: Vec<SpanId>,
    pub pds: f64,
    pub cds: f64,
    pub duplicated: Vec<bool>,
}

pub fn assignment_lines(result: &CorrelationResult) -> Vec<AssignmentLine> {
    let mut out = Vec::new();
    for (ingress, list) in &result.assignments {
        for (rank, c) in list.iter().enumerate() {
            out.push(AssignmentLine {
                service: result.service.clone(),
                ingress_id: ingress.clone(),
                rank,
                egress: c.egress.clone(),
                pds: c.pds,
                cds: c.cds,
                duplicated: c.duplicated.clone(),
            });
        }
    }
    out
}

/// Groups assignment lines back into one result per service.
pub fn results_from_lines(lines: Vec<AssignmentLine>) -> Vec<CorrelationResult> {
    let mut by_service: BTreeMap<String, CorrelationResult> = BTreeMap::new();
    for line in lines {
        let r = by_service
            .entry(line.service.clone())
            .or_insert_with(|| CorrelationResult {
                service: line.service.clone(),
                ..Default::default()
            });
        let list = r.assignments.entry(line.ingress_id).or_default();
        if list.len() <= line.rank {
            list.resize(
                line.rank + 1,
                CandidateAssignment {
                    egress: Vec::new(),
                    pds: f64::NEG_INFINITY,
                    cds: f64::INFINITY,
                    duplicated: Vec::new(),
                },
            );
        }
        list[line.rank] = CandidateAssignment {
            egress: line.egress,
            pds: line.pds,
            cds: line.cds,
            duplicated: line.duplicated,
        };
    }
    by_service.into_values().collect()
}

/// Reads JSON lines; blank lines are skipped, line numbers are 1-based.
pub fn read_records<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| ModelError::Parse {
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(records: &[T], mut sink: impl Write) -> Result<(), ModelError> {
    for rec in records {
        serde_json::to_writer(&mut sink, rec).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Reads spans in file order, validating each span and id uniqueness.
pub fn read_spans(reader: impl BufRead) -> Result<Vec<Span>, ModelError> {
    let spans: Vec<Span> = read_records(reader)?;
    let mut ids = HashSet::with_capacity(spans.len());
    for s in &spans {
        s.validate()?;
        if !ids.insert(&s.span_id) {
            return Err(ModelError::Integrity(format!("duplicate span_id {}", s.span_id)));
        }
    }
    Ok(spans)
}

pub fn write_spans(spans: &[Span], sink: impl Write) -> Result<(), ModelError> {
    write_records(spans, sink)
}

pub fn read_events(reader: impl BufRead) -> Result<Vec<EventRecord>, ModelError> {
    let events: Vec<EventRecord> = read_records(reader)?;
    for e in &events {
        e.validate()?;
    }
    Ok(events)
}

pub fn write_events(events: &[EventRecord], sink: impl Write) -> Result<(), ModelError> {
    write_records(events, sink)
}
