use std::cmp::Ordering;

use crate::model::Span;

use super::candidates::Candidate;

/// Score gap between the best and second-best candidate; +∞ with one
/// candidate. Candidate lists must already be sorted by descending PDS.
pub fn pds_gap(cands: &[Candidate]) -> f64 {
    match cands {
        [] => f64::NEG_INFINITY,
        [_] => f64::INFINITY,
        [a, b, ..] => a.pds - b.pds,
    }
}

/// Processing order: descending PDS gap, then earlier start, then span id.
pub fn greedy_order(cands: &[Vec<Candidate>], ingress: &[Span]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).filter(|&i| !cands[i].is_empty()).collect();
    let gaps: Vec<f64> = cands.iter().map(|c| pds_gap(c)).collect();
    order.sort_by(|&a, &b| {
        gaps[b]
            .partial_cmp(&gaps[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ingress[a].start_us.cmp(&ingress[b].start_us))
            .then_with(|| ingress[a].span_id.cmp(&ingress[b].span_id))
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Chosen candidate index per ingress span.
    pub chosen: Vec<Option<usize>>,
    pub approximate_components: usize,
    pub resolved_components: usize,
}

impl Assignment {
    pub fn total_pds(&self, cands: &[Vec<Candidate>]) -> f64 {
        self.chosen
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| cands[i][c].pds))
            .sum()
    }

    pub fn assigned(&self) -> usize {
        self.chosen.iter().filter(|c| c.is_some()).count()
    }
}

/// Limits for [`greedy_assign`].
#[derive(Debug, Clone, Copy)]
pub struct AssignLimits {
    /// Largest conflict component searched exhaustively.
    pub exhaustive_cap: usize,
    /// Search nodes allowed per component before falling back.
    pub node_budget: usize,
}

/// Joint assignment of `members` maximizing (number assigned, total PDS).
///
/// `blocked(e)` marks egress spans owned outside the member set. Returns
/// `None` when the search exceeds `node_budget` nodes.
pub fn optimal_assignment(
    cands: &[Vec<Candidate>],
    members: &[usize],
    blocked: &dyn Fn(u32) -> bool,
    node_budget: usize,
) -> Option<Vec<Option<usize>>> {
    let options: Vec<Vec<usize>> = members
        .iter()
        .map(|&m| {
            (0..cands[m].len())
                .filter(|&c| !cands[m][c].egress.iter().any(|&e| blocked(e)))
                .collect()
        })
        .collect();
    // suffix bounds: members that could still be assigned and their best PDS
    let mut suffix_count = vec![0usize; members.len() + 1];
    let mut suffix_pds = vec![0.0f64; members.len() + 1];
    for k in (0..members.len()).rev() {
        let has = !options[k].is_empty();
        suffix_count[k] = suffix_count[k + 1] + has as usize;
        suffix_pds[k] = suffix_pds[k + 1]
            + options[k]
                .iter()
                .map(|&c| cands[members[k]][c].pds)
                .fold(f64::NEG_INFINITY, f64::max)
                .max(if has { f64::NEG_INFINITY } else { 0.0 });
    }

    struct St<'a> {
        cands: &'a [Vec<Candidate>],
        members: &'a [usize],
        options: &'a [Vec<usize>],
        suffix_count: &'a [usize],
        suffix_pds: &'a [f64],
        used: Vec<u32>,
        cur: Vec<Option<usize>>,
        best: Option<(usize, f64, Vec<Option<usize>>)>,
        nodes: usize,
        budget: usize,
    }

    fn better(a: (usize, f64), b: (usize, f64)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
    }

    fn go(st: &mut St, k: usize, count: usize, pds: f64) -> bool {
        st.nodes += 1;
        if st.nodes > st.budget {
            return false;
        }
        if let Some((bc, bp, _)) = &st.best {
            let ub_count = count + st.suffix_count[k];
            if ub_count < *bc || (ub_count == *bc && pds + st.suffix_pds[k] <= *bp) {
                return true;
            }
        }
        if k == st.members.len() {
            if st.best.as_ref().is_none_or(|(bc, bp, _)| better((count, pds), (*bc, *bp))) {
                st.best = Some((count, pds, st.cur.clone()));
            }
            return true;
        }
        let m = st.members[k];
        for oi in 0..st.options[k].len() {
            let c = st.options[k][oi];
            let cand = &st.cands[m][c];
            if cand.egress.iter().any(|e| st.used.contains(e)) {
                continue;
            }
            let mark = st.used.len();
            st.used.extend_from_slice(&cand.egress);
            st.cur[k] = Some(c);
            let ok = go(st, k + 1, count + 1, pds + cand.pds);
            st.used.truncate(mark);
            st.cur[k] = None;
            if !ok {
                return false;
            }
        }
        go(st, k + 1, count, pds)
    }

    let mut st = St {
        cands,
        members,
        options: &options,
        suffix_count: &suffix_count,
        suffix_pds: &suffix_pds,
        used: Vec::new(),
        cur: vec![None; members.len()],
        best: None,
        nodes: 0,
        budget: node_budget,
    };
    if !go(&mut st, 0, 0, 0.0) {
        return None;
    }
    st.best.map(|(_, _, sol)| sol)
}

struct Owners {
    owner: Vec<Option<usize>>,
}

impl Owners {
    fn free(&self, c: &Candidate) -> bool {
        c.egress.iter().all(|&e| self.owner[e as usize].is_none())
    }

    fn take(&mut self, c: &Candidate, i: usize) {
        for &e in &c.egress {
            self.owner[e as usize] = Some(i);
        }
    }

    fn release(&mut self, c: &Candidate) {
        for &e in &c.egress {
            self.owner[e as usize] = None;
        }
    }
}

/// Greedy one-to-one assignment with conflict resolution.
///
/// Ingress spans are visited once in [`greedy_order`]. When a span's top
/// candidate is free it is taken. Otherwise the conflict component (the
/// span plus, transitively, the owners of egress spans in any of the
/// members' candidates) is reassigned jointly by [`optimal_assignment`].
/// A component that reaches the cap is cut to its first `exhaustive_cap`
/// members in discovery order; the rest keep their egress spans. Cut
/// components, and searches above the node budget (reassigned
/// sequentially in visiting order), count as approximate.
pub fn greedy_assign(
    cands: &[Vec<Candidate>],
    ingress: &[Span],
    egress_count: usize,
    limits: AssignLimits,
) -> Assignment {
    let order = greedy_order(cands, ingress);
    let mut rank = vec![usize::MAX; cands.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut owners = Owners {
        owner: vec![None; egress_count],
    };
    let mut chosen: Vec<Option<usize>> = vec![None; cands.len()];
    let mut approximate = 0;
    let mut resolved = 0;

    for &i in &order {
        let top = &cands[i][0];
        if owners.free(top) {
            owners.take(top, i);
            chosen[i] = Some(0);
            continue;
        }
        // conflict component
        let mut members = vec![i];
        let mut head = 0;
        let mut overflow = false;
        while head < members.len() && !overflow {
            let m = members[head];
            head += 1;
            for e in cands[m].iter().flat_map(|c| c.egress.iter()) {
                if let Some(o) = owners.owner[*e as usize] {
                    if !members.contains(&o) {
                        if members.len() >= limits.exhaustive_cap {
                            overflow = true;
                            break;
                        }
                        members.push(o);
                    }
                }
            }
        }
        members.sort_by_key(|&m| rank[m]);
        for &m in &members {
            if let Some(c) = chosen[m].take() {
                owners.release(&cands[m][c]);
            }
        }
        let solution = {
            let owner = &owners.owner;
            optimal_assignment(cands, &members, &|e| owner[e as usize].is_some(), limits.node_budget)
        };
        match solution {
            Some(sol) => {
                if overflow {
                    approximate += 1;
                } else {
                    resolved += 1;
                }
                for (k, &m) in members.iter().enumerate() {
                    if let Some(c) = sol[k] {
                        owners.take(&cands[m][c], m);
                        chosen[m] = Some(c);
                    }
                }
            }
            None => {
                approximate += 1;
                for &m in &members {
                    if let Some(c) = (0..cands[m].len()).find(|&c| owners.free(&cands[m][c])) {
                        owners.take(&cands[m][c], m);
                        chosen[m] = Some(c);
                    }
                }
            }
        }
    }
    Assignment {
        chosen,
        approximate_components: approximate,
        resolved_components: resolved,
    }
}
