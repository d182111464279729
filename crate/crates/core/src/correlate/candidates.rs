use std::collections::BinaryHeap;

use crate::model::{CallGraph, Span, SpanKind};
use crate::stats::DelayEstimate;

use super::{CorrelatorConfig, ThresholdMode};

/// Spans of one service, split and indexed for correlation.
#[derive(Debug, Clone)]
pub struct ServiceSpans {
    pub call_graph: CallGraph,
    /// Sorted by (start, span id).
    pub ingress: Vec<Span>,
    /// Egress spans towards a callee of the call graph, sorted by
    /// (start, span id).
    pub egress: Vec<Span>,
    /// Per call position, indices into `egress`, ascending start.
    pub positions: Vec<Vec<u32>>,
    /// Egress spans of this service whose peer is not in the call graph.
    pub ignored_egress: usize,
}

fn by_start(a: &Span, b: &Span) -> std::cmp::Ordering {
    (a.start_us, &a.span_id).cmp(&(b.start_us, &b.span_id))
}

impl ServiceSpans {
    pub fn new<'a>(spans: impl IntoIterator<Item = &'a Span>, call_graph: &CallGraph) -> Self {
        let mut ingress = Vec::new();
        let mut egress = Vec::new();
        let mut ignored = 0;
        for s in spans {
            if s.service != call_graph.service {
                continue;
            }
            match s.kind {
                SpanKind::Ingress => ingress.push(s.clone()),
                SpanKind::Egress => {
                    if s.peer.as_ref().is_some_and(|p| call_graph.calls.contains(p)) {
                        egress.push(s.clone());
                    } else {
                        ignored += 1;
                    }
                }
            }
        }
        ingress.sort_by(by_start);
        egress.sort_by(by_start);
        let positions = call_graph
            .calls
            .iter()
            .map(|callee| {
                egress
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.peer.as_deref() == Some(callee.as_str()))
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        ServiceSpans {
            call_graph: call_graph.clone(),
            ingress,
            egress,
            positions,
            ignored_egress: ignored,
        }
    }

    /// Egress spans per position, in position order, for mean estimation.
    pub fn egress_by_position(&self) -> Vec<Vec<Span>> {
        self.positions
            .iter()
            .map(|p| p.iter().map(|&i| self.egress[i as usize].clone()).collect())
            .collect()
    }
}

/// One way to complete an ingress span's call sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Indices into [`ServiceSpans::egress`], in call order.
    pub egress: Vec<u32>,
    /// `d_1..d_{n+1}` in µs.
    pub delays: Vec<u64>,
    pub cds: f64,
    pub pds: f64,
}

impl Candidate {
    pub fn total_delay(&self) -> u64 {
        self.delays.iter().sum()
    }

    pub fn shares_egress(&self, other: &Candidate) -> bool {
        self.egress.iter().any(|e| other.egress.contains(e))
    }
}

/// `Σ |d_k - µ_k| / µ_k`; means below 1 µs count as 1 µs.
pub fn cds(delays: &[u64], estimates: &[DelayEstimate]) -> f64 {
    delays
        .iter()
        .zip(estimates)
        .map(|(&d, e)| (d as f64 - e.mean_us).abs() / e.mean_us.max(1.0))
        .sum()
}

/// Per-position thresholds. Adaptive thresholds are at least 1 µs so a
/// zero delay stays admissible when its mean is zero.
pub fn thresholds(estimates: &[DelayEstimate], cfg: &CorrelatorConfig) -> Vec<f64> {
    estimates
        .iter()
        .map(|e| match cfg.threshold {
            ThresholdMode::Adaptive => (cfg.delta * e.mean_us).max(1.0),
            ThresholdMode::Fixed { us } => us,
        })
        .collect()
}

struct Ref {
    start: u64,
    end: u64,
    idx: u32,
}

struct Search<'a> {
    levels: Vec<Vec<Ref>>,
    thr: &'a [f64],
    ingress_start: u64,
    ingress_end: u64,
    total_cap: Option<f64>,
    max: usize,
    heap: BinaryHeap<(u64, Vec<u32>, Vec<u64>)>,
    chosen: Vec<u32>,
    delays: Vec<u64>,
}

impl Search<'_> {
    fn full(&self) -> bool {
        self.heap.len() >= self.max
    }

    fn dfs(&mut self, level: usize, prev_end: u64, partial: u64) {
        if let Some(cap) = self.total_cap {
            if partial as f64 > cap {
                return;
            }
        }
        if self.full() && partial > self.heap.peek().unwrap().0 {
            return;
        }
        if level == self.levels.len() {
            let last = self.ingress_end - prev_end;
            let total = partial + last;
            if let Some(cap) = self.total_cap {
                if total as f64 > cap {
                    return;
                }
            }
            let mut delays = self.delays.clone();
            delays.push(last);
            let entry = (total, self.chosen.clone(), delays);
            if !self.full() {
                self.heap.push(entry);
            } else if entry < *self.heap.peek().unwrap() {
                self.heap.pop();
                self.heap.push(entry);
            }
            return;
        }
        let t = self.thr[level];
        let first = self.levels[level].partition_point(|r| r.start < prev_end);
        let mut j = first;
        while j < self.levels[level].len() {
            let r = &self.levels[level][j];
            let d = r.start - prev_end;
            if d as f64 >= t {
                break;
            }
            let (end, idx) = (r.end, r.idx);
            j += 1;
            if self.chosen.contains(&idx) {
                continue;
            }
            self.chosen.push(idx);
            self.delays.push(d);
            self.dfs(level + 1, end, partial + d);
            self.chosen.pop();
            self.delays.pop();
        }
    }
}

/// Threshold-feasible candidates of every ingress span, sorted by
/// ascending total delay then egress indices; CDS is filled, PDS is zero.
///
/// Before the forward enumeration, each position's egress spans are cut
/// down to those from which the remaining positions can still be completed
/// inside the ingress window, walking backwards from the last position.
pub fn find_candidates(
    ss: &ServiceSpans,
    estimates: &[DelayEstimate],
    cfg: &CorrelatorConfig,
) -> Vec<Vec<Candidate>> {
    let n = ss.call_graph.n();
    if n == 0 {
        return ss
            .ingress
            .iter()
            .map(|i| {
                let delays = vec![i.duration_us()];
                vec![Candidate {
                    cds: cds(&delays, estimates),
                    egress: Vec::new(),
                    delays,
                    pds: 0.0,
                }]
            })
            .collect();
    }
    let thr = thresholds(estimates, cfg);
    let total_cap = match cfg.threshold {
        ThresholdMode::Adaptive => {
            let mu = estimates.first().map_or(0.0, |e| e.total_mean_us);
            (mu > 0.0).then(|| cfg.delta * mu)
        }
        ThresholdMode::Fixed { .. } => None,
    };
    let by_end: Vec<Vec<u32>> = ss
        .positions
        .iter()
        .map(|p| {
            let mut v = p.clone();
            v.sort_by_key(|&i| (ss.egress[i as usize].end_us, i));
            v
        })
        .collect();

    let mut out = Vec::with_capacity(ss.ingress.len());
    for ing in &ss.ingress {
        let (s, e) = (ing.start_us, ing.end_us);
        let mut levels: Vec<Vec<Ref>> = (0..n).map(|_| Vec::new()).collect();
        for k in (0..n).rev() {
            let list = &by_end[k];
            let end_of = |i: u32| ss.egress[i as usize].end_us;
            // admissible end range for position k
            let (lo, hi) = if k == n - 1 {
                (e as f64 - thr[n], e as f64)
            } else {
                let next = &levels[k + 1];
                if next.is_empty() {
                    break;
                }
                let min_start = next.first().unwrap().start as f64;
                let max_start = next.last().unwrap().start as f64;
                (min_start - thr[k + 1], max_start)
            };
            let from = list.partition_point(|&i| end_of(i) as f64 <= lo);
            let mut refs = Vec::new();
            for &i in &list[from..] {
                let sp = &ss.egress[i as usize];
                if sp.end_us as f64 > hi {
                    break;
                }
                if sp.start_us < s || sp.end_us > e {
                    continue;
                }
                let ok = if k == n - 1 {
                    ((e - sp.end_us) as f64) < thr[n]
                } else {
                    let next = &levels[k + 1];
                    let j = next.partition_point(|r| r.start < sp.end_us);
                    j < next.len() && ((next[j].start - sp.end_us) as f64) < thr[k + 1]
                };
                if ok {
                    refs.push(Ref {
                        start: sp.start_us,
                        end: sp.end_us,
                        idx: i,
                    });
                }
            }
            refs.sort_by_key(|r| (r.start, r.idx));
            levels[k] = refs;
        }
        if levels.iter().any(|l| l.is_empty()) {
            out.push(Vec::new());
            continue;
        }
        let mut search = Search {
            levels,
            thr: &thr,
            ingress_start: s,
            ingress_end: e,
            total_cap,
            max: cfg.max_candidates_per_ingress.max(1),
            heap: BinaryHeap::new(),
            chosen: Vec::with_capacity(n),
            delays: Vec::with_capacity(n + 1),
        };
        search.dfs(0, search.ingress_start, 0);
        let mut found = search.heap.into_sorted_vec();
        found.dedup();
        out.push(
            found
                .into_iter()
                .map(|(_, egress, delays)| Candidate {
                    cds: cds(&delays, estimates),
                    egress,
                    delays,
                    pds: 0.0,
                })
                .collect(),
        );
    }
    out
}
