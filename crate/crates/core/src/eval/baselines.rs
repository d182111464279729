use std::collections::{BTreeMap, BTreeSet};

use crate::correlate::{optimal_assignment, Assignment, Candidate, ServiceSpans};
use crate::model::{CandidateAssignment, CorrelationResult};

use super::EvalError;

/// Closest-span baseline.
///
/// Ingress spans are visited by start time; each takes, position by
/// position, the free egress span with the smallest non-negative delay
/// that still ends inside the ingress window. A span that cannot fill
/// every position takes nothing.
pub fn nearest_neighbor_baseline(ss: &ServiceSpans) -> CorrelationResult {
    let mut free: Vec<BTreeSet<(u64, u32)>> = ss
        .positions
        .iter()
        .map(|p| p.iter().map(|&i| (ss.egress[i as usize].start_us, i)).collect())
        .collect();
    let mut assignments = BTreeMap::new();
    let mut unassigned = Vec::new();
    for ing in &ss.ingress {
        let mut prev_end = ing.start_us;
        let mut picked: Vec<u32> = Vec::with_capacity(free.len());
        for set in free.iter() {
            let hit = set
                .range((prev_end, 0)..)
                .find(|&&(_, i)| ss.egress[i as usize].end_us <= ing.end_us && !picked.contains(&i));
            match hit {
                Some(&(_, i)) => {
                    picked.push(i);
                    prev_end = ss.egress[i as usize].end_us;
                }
                None => break,
            }
        }
        if picked.len() == free.len() {
            for &i in &picked {
                // the same span may sit in several positions' lists
                for set in free.iter_mut() {
                    set.remove(&(ss.egress[i as usize].start_us, i));
                }
            }
            assignments.insert(
                ing.span_id.clone(),
                vec![CandidateAssignment {
                    egress: picked.iter().map(|&i| ss.egress[i as usize].span_id.clone()).collect(),
                    pds: 0.0,
                    cds: 0.0,
                    duplicated: vec![false; picked.len()],
                }],
            );
        } else {
            unassigned.push(ing.span_id.clone());
        }
    }
    CorrelationResult {
        service: ss.call_graph.service.clone(),
        assignments,
        unassigned,
        approximate_components: 0,
        degraded: false,
    }
}

/// Groups of ingress indices whose `[start, end]` intervals chain into each
/// other; groups are time-disjoint.
pub fn time_windows(ss: &ServiceSpans) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut reach = 0u64;
    for (i, s) in ss.ingress.iter().enumerate() {
        match out.last_mut() {
            Some(g) if s.start_us <= reach => {
                g.push(i);
                reach = reach.max(s.end_us);
            }
            _ => {
                out.push(vec![i]);
                reach = s.end_us;
            }
        }
    }
    out
}

pub const ORACLE_WINDOW_GUARD: usize = 8;

/// Maximum-(count, total PDS) one-to-one assignment, solved exactly per
/// time-disjoint window. Refuses when a window exceeds `guard` spans.
pub fn exhaustive_oracle(ss: &ServiceSpans, cands: &[Vec<Candidate>], guard: usize) -> Result<Assignment, EvalError> {
    let windows = time_windows(ss);
    if let Some(w) = windows.iter().find(|w| w.len() > guard) {
        return Err(EvalError::Guard {
            window: w.len(),
            guard,
        });
    }
    let mut chosen = vec![None; cands.len()];
    for w in &windows {
        let sol = optimal_assignment(cands, w, &|_| false, usize::MAX).expect("unbounded search");
        for (k, &i) in w.iter().enumerate() {
            chosen[i] = sol[k];
        }
    }
    Ok(Assignment {
        chosen,
        approximate_components: 0,
        resolved_components: windows.len(),
    })
}

/// Result lines for an assignment over a scored candidate table.
pub fn assignment_result(ss: &ServiceSpans, cands: &[Vec<Candidate>], a: &Assignment) -> CorrelationResult {
    let mut assignments = BTreeMap::new();
    let mut unassigned = Vec::new();
    for (i, ing) in ss.ingress.iter().enumerate() {
        match a.chosen[i] {
            Some(c) => {
                let c = &cands[i][c];
                assignments.insert(
                    ing.span_id.clone(),
                    vec![CandidateAssignment {
                        egress: c.egress.iter().map(|&e| ss.egress[e as usize].span_id.clone()).collect(),
                        pds: c.pds,
                        cds: c.cds,
                        duplicated: vec![false; c.egress.len()],
                    }],
                );
            }
            None => unassigned.push(ing.span_id.clone()),
        }
    }
    CorrelationResult {
        service: ss.call_graph.service.clone(),
        assignments,
        unassigned,
        approximate_components: a.approximate_components,
        degraded: false,
    }
}
