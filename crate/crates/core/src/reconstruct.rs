//! Trace assembly from intra-service assignments and propagated parent links.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::derived_hex_id;
use crate::model::{CorrelationResult, GroundTruth, Span, SpanId, SpanKind, TraceId};

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructError {
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("coverage: {0}")]
    Coverage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    IntraService,
    InterService,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub parent: SpanId,
    pub child: SpanId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceGraph {
    /// Input spans followed by materialized duplicates, each with
    /// `parent_span_id` and `trace_id` filled from the graph.
    pub nodes: Vec<Span>,
    pub edges: Vec<Edge>,
    pub trace_of: BTreeMap<SpanId, TraceId>,
    /// Number of duplicate nodes created for multi-candidate emissions.
    pub duplicates: usize,
}

impl TraceGraph {
    /// Member span ids of every trace.
    pub fn traces(&self) -> BTreeMap<&TraceId, Vec<&SpanId>> {
        let mut out: BTreeMap<&TraceId, Vec<&SpanId>> = BTreeMap::new();
        for (s, t) in &self.trace_of {
            out.entry(t).or_default().push(s);
        }
        out
    }

    /// Indented parent/child dump of one trace.
    pub fn render(&self, trace: &TraceId) -> String {
        let by_id: HashMap<&SpanId, &Span> = self.nodes.iter().map(|s| (&s.span_id, s)).collect();
        let mut children: BTreeMap<&SpanId, Vec<&SpanId>> = BTreeMap::new();
        for e in &self.edges {
            children.entry(&e.parent).or_default().push(&e.child);
        }
        for list in children.values_mut() {
            list.sort_by_key(|id| (by_id[id].start_us, *id));
        }
        let mut roots: Vec<&Span> = self
            .nodes
            .iter()
            .filter(|s| s.trace_id.as_ref() == Some(trace) && s.parent_span_id.is_none())
            .collect();
        roots.sort_by_key(|s| (s.start_us, &s.span_id));
        let mut out = String::new();
        fn walk(
            out: &mut String,
            id: &SpanId,
            depth: usize,
            by_id: &HashMap<&SpanId, &Span>,
            children: &BTreeMap<&SpanId, Vec<&SpanId>>,
        ) {
            let s = by_id[id];
            let kind = match s.kind {
                SpanKind::Ingress => "ingress",
                SpanKind::Egress => "egress",
            };
            let _ = writeln!(
                out,
                "{}{} {} {} [{}, {}]{}",
                "  ".repeat(depth),
                s.span_id,
                s.service,
                kind,
                s.start_us,
                s.end_us,
                s.duplicate_of.as_ref().map(|d| format!(" dup of {d}")).unwrap_or_default()
            );
            for c in children.get(id).into_iter().flatten() {
                walk(out, c, depth + 1, by_id, children);
            }
        }
        for r in roots {
            walk(&mut out, &r.span_id, 0, &by_id, &children);
        }
        out
    }
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            self.parent[hi] = lo;
        }
    }
}

/// Child ingress id → parent egress id from the spans' propagated parents.
pub fn inter_links_from_spans(spans: &[Span]) -> BTreeMap<SpanId, SpanId> {
    spans
        .iter()
        .filter(|s| s.kind == SpanKind::Ingress)
        .filter_map(|s| s.parent_span_id.clone().map(|p| (s.span_id.clone(), p)))
        .collect()
}

fn trace_id_of(min_member: &SpanId) -> TraceId {
    TraceId(derived_hex_id(&["trace", min_member.as_str()]))
}

/// Builds the trace forest.
///
/// Every emitted candidate adds ingress → egress edges; egress spans flagged
/// duplicated are materialized as new spans carrying `duplicate_of`.
/// `inter` adds egress → downstream ingress edges. Components are labeled
/// with a trace id derived from their smallest span id.
pub fn reconstruct(
    spans: &[Span],
    intra: &[CorrelationResult],
    inter: &BTreeMap<SpanId, SpanId>,
) -> Result<TraceGraph, ReconstructError> {
    let mut nodes: Vec<Span> = spans.to_vec();
    let mut index: HashMap<SpanId, usize> = HashMap::with_capacity(nodes.len());
    for (i, s) in nodes.iter().enumerate() {
        if index.insert(s.span_id.clone(), i).is_some() {
            return Err(ReconstructError::Integrity(format!("duplicate span id {}", s.span_id)));
        }
    }
    let mut parent_of: HashMap<SpanId, (SpanId, EdgeKind)> = HashMap::new();
    let mut edges = BTreeSet::new();
    let mut add_edge = |parent: &SpanId, child: &SpanId, kind: EdgeKind, edges: &mut BTreeSet<Edge>| {
        match parent_of.get(child) {
            Some((p, _)) if p == parent => Ok(()),
            Some((p, k)) => Err(ReconstructError::Integrity(format!(
                "{child} has two parents: {p} ({k:?}) and {parent} ({kind:?})"
            ))),
            None => {
                parent_of.insert(child.clone(), (parent.clone(), kind));
                edges.insert(Edge {
                    parent: parent.clone(),
                    child: child.clone(),
                    kind,
                });
                Ok(())
            }
        }
    };

    let mut duplicates = 0;
    for result in intra {
        for (ingress, list) in &result.assignments {
            if !index.contains_key(ingress) {
                return Err(ReconstructError::Integrity(format!("unknown ingress span {ingress}")));
            }
            for cand in list {
                for (e, &dup) in cand.egress.iter().zip(&cand.duplicated) {
                    let Some(&ei) = index.get(e) else {
                        return Err(ReconstructError::Integrity(format!("unknown egress span {e}")));
                    };
                    let child = if dup {
                        let id = SpanId(derived_hex_id(&["dup", e.as_str(), ingress.as_str()]));
                        if !index.contains_key(&id) {
                            let mut copy = nodes[ei].clone();
                            copy.span_id = id.clone();
                            copy.duplicate_of = Some(e.clone());
                            index.insert(id.clone(), nodes.len());
                            nodes.push(copy);
                            duplicates += 1;
                        }
                        id
                    } else {
                        e.clone()
                    };
                    add_edge(ingress, &child, EdgeKind::IntraService, &mut edges)?;
                }
            }
        }
    }
    for (child, parent) in inter {
        if !index.contains_key(child) || !index.contains_key(parent) {
            return Err(ReconstructError::Integrity(format!(
                "inter link {parent} -> {child} references a missing span"
            )));
        }
        add_edge(parent, child, EdgeKind::InterService, &mut edges)?;
    }

    let mut dsu = Dsu::new(nodes.len());
    for e in &edges {
        dsu.union(index[&e.parent], index[&e.child]);
    }
    let mut min_id: HashMap<usize, SpanId> = HashMap::new();
    for (i, s) in nodes.iter().enumerate() {
        let r = dsu.find(i);
        min_id
            .entry(r)
            .and_modify(|m| {
                if s.span_id < *m {
                    *m = s.span_id.clone();
                }
            })
            .or_insert_with(|| s.span_id.clone());
    }
    let mut trace_of = BTreeMap::new();
    for i in 0..nodes.len() {
        let t = trace_id_of(&min_id[&dsu.find(i)]);
        let s = &mut nodes[i];
        s.parent_span_id = parent_of.get(&s.span_id).map(|(p, _)| p.clone());
        s.trace_id = Some(t.clone());
        trace_of.insert(s.span_id.clone(), t);
    }
    Ok(TraceGraph {
        nodes,
        edges: edges.into_iter().collect(),
        trace_of,
        duplicates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAccuracy {
    pub span_level: f64,
    pub trace_level: f64,
    /// Materialized duplicates over input spans.
    pub overhead_rate: f64,
    pub ingress_total: usize,
    pub ingress_correct: usize,
    pub requests_total: usize,
    pub requests_correct: usize,
}

/// Whether some emitted candidate of `ingress` equals its true tuple. An
/// ingress span with nothing emitted is correct only if its true tuple is
/// empty.
pub fn ingress_correct(results: &[&CorrelationResult], ingress: &SpanId, truth: &[SpanId]) -> bool {
    let mut emitted = false;
    for r in results {
        if let Some(list) = r.assignments.get(ingress) {
            emitted = true;
            if list.iter().any(|c| c.egress == truth) {
                return true;
            }
        }
    }
    !emitted && truth.is_empty()
}

/// Span-level and trace-level accuracy of `graph` against `truth`.
///
/// Span level counts every ingress span of the input: it is correct when an
/// emitted candidate equals its true egress tuple. Trace level counts the
/// true requests whose reconstructed component, duplicates excluded, equals
/// the true span set.
pub fn trace_accuracy(
    graph: &TraceGraph,
    results: &[CorrelationResult],
    truth: &GroundTruth,
) -> Result<TraceAccuracy, ReconstructError> {
    let by_service: Vec<&CorrelationResult> = results.iter().collect();
    let base: Vec<&Span> = graph.nodes.iter().filter(|s| s.duplicate_of.is_none()).collect();
    let mut total = 0;
    let mut correct = 0;
    for s in base.iter().filter(|s| s.kind == SpanKind::Ingress) {
        let Some(t) = truth.intra.get(&s.span_id) else {
            return Err(ReconstructError::Coverage(format!("no ground truth for ingress {}", s.span_id)));
        };
        total += 1;
        correct += ingress_correct(&by_service, &s.span_id, t) as usize;
    }

    // true components over base spans
    let index: HashMap<&SpanId, usize> = base.iter().enumerate().map(|(i, s)| (&s.span_id, i)).collect();
    let mut dsu = Dsu::new(base.len());
    let link = |a: &SpanId, b: &SpanId, dsu: &mut Dsu| -> Result<(), ReconstructError> {
        match (index.get(a), index.get(b)) {
            (Some(&x), Some(&y)) => {
                dsu.union(x, y);
                Ok(())
            }
            _ => Err(ReconstructError::Coverage(format!("truth edge {a} -> {b} outside the graph"))),
        }
    };
    for (i, tuple) in &truth.intra {
        if !index.contains_key(i) {
            continue;
        }
        for e in tuple {
            link(i, e, &mut dsu)?;
        }
    }
    for (child, parent) in &truth.inter {
        if index.contains_key(child) {
            link(parent, child, &mut dsu)?;
        }
    }
    let mut true_sets: BTreeMap<usize, BTreeSet<&SpanId>> = BTreeMap::new();
    let mut got_sets: HashMap<&TraceId, BTreeSet<&SpanId>> = HashMap::new();
    for (i, s) in base.iter().enumerate() {
        true_sets.entry(dsu.find(i)).or_default().insert(&s.span_id);
        got_sets.entry(&graph.trace_of[&s.span_id]).or_default().insert(&s.span_id);
    }
    let requests_total = true_sets.len();
    let requests_correct = true_sets
        .values()
        .filter(|set| {
            let any = set.iter().next().unwrap();
            got_sets[&graph.trace_of[*any]] == **set
        })
        .count();
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(TraceAccuracy {
        span_level: ratio(correct, total),
        trace_level: ratio(requests_correct, requests_total),
        overhead_rate: if base.is_empty() {
            0.0
        } else {
            graph.duplicates as f64 / base.len() as f64
        },
        ingress_total: total,
        ingress_correct: correct,
        requests_total,
        requests_correct,
    })
}
