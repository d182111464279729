//! Cross-thread correlation of ingress and egress spans inside one service.
//!
//! The pipeline: mean delays from differences of averages, threshold-bounded
//! candidate enumeration, a high-certainty subset chosen by central
//! deviation, delay models fitted on that subset, density scoring, and a
//! greedy one-to-one assignment with joint conflict resolution.

pub mod assign;
pub mod candidates;

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CallGraph, CandidateAssignment, CorrelationResult, Span, SpanId};
use crate::stats::{estimate_means, fit_model, DelayEstimate, DelayModel, FitConfig, FitError, GmmConfig, StatsError};

pub use assign::{greedy_assign, greedy_order, optimal_assignment, pds_gap, AssignLimits, Assignment};
pub use candidates::{cds, find_candidates, thresholds, Candidate, ServiceSpans};

#[derive(Debug, Error)]
pub enum CorrelateError {
    #[error("config: {0}")]
    Config(String),
    #[error("{service}: {source}")]
    Stats {
        service: String,
        #[source]
        source: StatsError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThresholdMode {
    /// `T_k = delta * mu_k` plus the total-delay prune.
    Adaptive,
    /// One threshold for every position, no total-delay prune.
    Fixed { us: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatorConfig {
    pub delta: f64,
    pub diff_threshold: f64,
    pub ks_alpha: f64,
    pub multi_candidate: bool,
    pub multi_candidate_margin: f64,
    pub max_candidates_per_ingress: usize,
    pub exhaustive_cap: usize,
    pub node_budget: usize,
    pub min_fit_samples: usize,
    pub gmm_max_components: usize,
    pub gmm_seed: u64,
    pub threshold: ThresholdMode,
}

impl Default for CorrelatorConfig {
    fn default() -> Self {
        Self {
            delta: 4.0,
            diff_threshold: 0.2,
            ks_alpha: 0.05,
            multi_candidate: false,
            multi_candidate_margin: std::f64::consts::LN_2,
            max_candidates_per_ingress: 1_000,
            exhaustive_cap: 12,
            node_budget: 200_000,
            min_fit_samples: 30,
            gmm_max_components: 20,
            gmm_seed: GmmConfig::default().seed,
            threshold: ThresholdMode::Adaptive,
        }
    }
}

impl CorrelatorConfig {
    pub fn validate(&self) -> Result<(), CorrelateError> {
        let bad = |m: &str| Err(CorrelateError::Config(m.into()));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be > 0");
        }
        if !(self.diff_threshold > 0.0 && self.diff_threshold < 1.0) {
            return bad("diff threshold must lie in (0, 1)");
        }
        if !(self.ks_alpha > 0.0 && self.ks_alpha < 1.0) {
            return bad("ks alpha must lie in (0, 1)");
        }
        if !(self.multi_candidate_margin >= 0.0) {
            return bad("multi-candidate margin must be >= 0");
        }
        if self.max_candidates_per_ingress == 0 || self.exhaustive_cap == 0 || self.gmm_max_components == 0 {
            return bad("candidate cap, exhaustive cap and gmm components must be >= 1");
        }
        if let ThresholdMode::Fixed { us } = self.threshold {
            if !(us > 0.0) {
                return bad("fixed threshold must be > 0");
            }
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            min_samples: self.min_fit_samples,
            ks_alpha: self.ks_alpha,
            gmm: GmmConfig {
                max_components: self.gmm_max_components,
                seed: self.gmm_seed,
                ..GmmConfig::default()
            },
        }
    }

    fn limits(&self) -> AssignLimits {
        AssignLimits {
            exhaustive_cap: self.exhaustive_cap,
            node_budget: self.node_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    /// Mean estimation and candidate enumeration.
    pub candidate_find: Duration,
    /// Certainty split, fitting, scoring and assignment.
    pub correlate: Duration,
    /// Model fitting, part of `correlate`.
    pub fit: Duration,
    /// Greedy assignment, part of `correlate`.
    pub assign: Duration,
}

/// Everything one correlation run produced, for scoring and diagnostics.
#[derive(Debug, Clone)]
pub struct Correlation {
    pub result: CorrelationResult,
    pub spans: ServiceSpans,
    /// Per ingress span (in `spans.ingress` order), by descending score.
    pub candidates: Vec<Vec<Candidate>>,
    pub estimates: Vec<DelayEstimate>,
    pub models: Vec<DelayModel<f64>>,
    pub high_certainty: Vec<bool>,
    pub assignment: Assignment,
    pub timings: PhaseTimings,
    pub warnings: Vec<String>,
}

impl Correlation {
    pub fn egress_ids(&self, c: &Candidate) -> Vec<SpanId> {
        c.egress
            .iter()
            .map(|&e| self.spans.egress[e as usize].span_id.clone())
            .collect()
    }

    pub fn high_certainty_count(&self) -> usize {
        self.high_certainty.iter().filter(|&&h| h).count()
    }
}

fn two_smallest_cds(cands: &[Candidate]) -> (Option<usize>, Option<usize>) {
    let key = |c: &Candidate| (c.cds, c.egress.clone());
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        let (ka, kb) = (key(&cands[*a]), key(&cands[*b]));
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    };
    if idx.len() > 2 {
        idx.select_nth_unstable_by(1, cmp);
        idx.truncate(2);
    }
    idx.sort_by(cmp);
    (idx.first().copied(), idx.get(1).copied())
}

/// Index of the lowest-CDS candidate of every non-empty list.
pub fn cds_tops(cands: &[Vec<Candidate>]) -> Vec<Option<usize>> {
    cands.iter().map(|c| two_smallest_cds(c).0).collect()
}

/// High-certainty flags. A span qualifies when its lowest two CDS values
/// satisfy `(C1 - C0) / C0 >= D` and its lowest-CDS candidate shares no
/// egress span with another span's lowest-CDS candidate. Spans with a
/// single candidate always qualify; spans without candidates never do.
pub fn split_certainty(cands: &[Vec<Candidate>], diff_threshold: f64) -> Vec<bool> {
    let tops: Vec<(Option<usize>, Option<usize>)> = cands.iter().map(|c| two_smallest_cds(c)).collect();
    let mut uses: HashMap<u32, usize> = HashMap::new();
    for (i, (t, _)) in tops.iter().enumerate() {
        if let Some(t) = t {
            for &e in &cands[i][*t].egress {
                *uses.entry(e).or_insert(0) += 1;
            }
        }
    }
    tops.iter()
        .enumerate()
        .map(|(i, &(t, s))| match (t, s) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(t), Some(s)) => {
                let c0 = cands[i][t].cds;
                let c1 = cands[i][s].cds;
                let ratio = if c0 == 0.0 {
                    if c1 > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                } else {
                    (c1 - c0) / c0
                };
                ratio >= diff_threshold && cands[i][t].egress.iter().all(|e| uses[e] == 1)
            }
        })
        .collect()
}

/// Fits one model per delay position from the lowest-CDS candidates of the
/// high-certainty spans.
///
/// Delays are whole microseconds; each gets uniform jitter in
/// `[-0.5, 0.5)` so goodness-of-fit tests see a continuous sample instead
/// of rejecting every family for its steps.
pub fn fit_models(
    cands: &[Vec<Candidate>],
    high: &[bool],
    positions: usize,
    cfg: &FitConfig,
) -> Result<Vec<DelayModel<f64>>, (usize, FitError)> {
    let tops = cds_tops(cands);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gmm.seed);
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); positions];
    for (i, t) in tops.iter().enumerate() {
        if let (true, Some(t)) = (high[i], t) {
            for (k, &d) in cands[i][*t].delays.iter().enumerate() {
                samples[k].push(d as f64 + rng.random::<f64>() - 0.5);
            }
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| fit_model(s, k + 1, cfg).map_err(|e| (k + 1, e)))
        .collect()
}

/// Fills PDS from `models`, or `-CDS` without models, and sorts each list
/// by descending score then egress indices.
pub fn score_candidates(cands: &mut [Vec<Candidate>], models: Option<&[DelayModel<f64>]>) {
    for list in cands.iter_mut() {
        for c in list.iter_mut() {
            c.pds = match models {
                Some(m) => c
                    .delays
                    .iter()
                    .zip(m)
                    .map(|(&d, model)| model.log_density(d as f64))
                    .sum(),
                None => -c.cds,
            };
        }
        list.sort_by(|a, b| {
            b.pds
                .partial_cmp(&a.pds)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.egress.cmp(&b.egress))
        });
    }
}

/// Correlates the spans of `call_graph.service` found in `spans`.
pub fn correlate(spans: &[Span], call_graph: &CallGraph, cfg: &CorrelatorConfig) -> Result<Correlation, CorrelateError> {
    correlate_with_models(spans, call_graph, cfg, None)
}

/// [`correlate`], scoring with the given models instead of fitting them.
pub fn correlate_with_models(
    spans: &[Span],
    call_graph: &CallGraph,
    cfg: &CorrelatorConfig,
    models: Option<&[DelayModel<f64>]>,
) -> Result<Correlation, CorrelateError> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let t0 = Instant::now();
    let ss = ServiceSpans::new(spans, call_graph);
    if ss.ignored_egress > 0 {
        warnings.push(format!(
            "{}: {} egress spans towards services outside the call graph ignored",
            call_graph.service, ss.ignored_egress
        ));
    }
    if ss.ingress.is_empty() {
        return Ok(Correlation {
            result: CorrelationResult {
                service: call_graph.service.clone(),
                ..Default::default()
            },
            spans: ss,
            candidates: Vec::new(),
            estimates: Vec::new(),
            models: Vec::new(),
            high_certainty: Vec::new(),
            assignment: Assignment {
                chosen: Vec::new(),
                approximate_components: 0,
                resolved_components: 0,
            },
            timings: PhaseTimings::default(),
            warnings,
        });
    }
    let estimates = estimate_means(&ss.ingress, &ss.egress_by_position(), call_graph).map_err(|source| {
        CorrelateError::Stats {
            service: call_graph.service.clone(),
            source,
        }
    })?;
    let mut cands = find_candidates(&ss, &estimates, cfg);
    let candidate_find = t0.elapsed();

    let t1 = Instant::now();
    let high = split_certainty(&cands, cfg.diff_threshold);
    let high_count = high.iter().filter(|&&h| h).count();
    let mut degraded = false;
    let t_fit = Instant::now();
    let fitted = if call_graph.is_leaf() {
        Vec::new()
    } else if let Some(m) = models {
        m.to_vec()
    } else if high_count < cfg.min_fit_samples {
        warnings.push(format!(
            "{}: {high_count} high-certainty spans, fewer than {}; scoring by CDS",
            call_graph.service, cfg.min_fit_samples
        ));
        degraded = true;
        Vec::new()
    } else {
        match fit_models(&cands, &high, call_graph.delay_positions(), &cfg.fit_config()) {
            Ok(m) => m,
            Err((k, e)) => {
                warnings.push(format!("{}: position {k}: {e}; scoring by CDS", call_graph.service));
                degraded = true;
                Vec::new()
            }
        }
    };
    let fit = t_fit.elapsed();
    score_candidates(&mut cands, (!fitted.is_empty()).then_some(fitted.as_slice()));
    let t_assign = Instant::now();
    let assignment = greedy_assign(&cands, &ss.ingress, ss.egress.len(), cfg.limits());
    let assign = t_assign.elapsed();
    if assignment.approximate_components > 0 {
        warnings.push(format!(
            "{}: {} conflict components resolved approximately",
            call_graph.service, assignment.approximate_components
        ));
    }

    let ids = |c: &Candidate| -> Vec<SpanId> {
        c.egress
            .iter()
            .map(|&e| ss.egress[e as usize].span_id.clone())
            .collect()
    };
    let mut emitted: HashMap<u32, usize> = HashMap::new();
    for (i, c) in assignment.chosen.iter().enumerate() {
        if let Some(c) = c {
            for &e in &cands[i][*c].egress {
                emitted.insert(e, i);
            }
        }
    }
    let mut assignments = BTreeMap::new();
    let mut unassigned = Vec::new();
    for (i, ing) in ss.ingress.iter().enumerate() {
        if assignment.chosen[i].is_none() {
            unassigned.push(ing.span_id.clone());
        }
    }
    for &i in &greedy_order(&cands, &ss.ingress) {
        let Some(p) = assignment.chosen[i] else { continue };
        let primary = &cands[i][p];
        let mut list = vec![CandidateAssignment {
            egress: ids(primary),
            pds: primary.pds,
            cds: primary.cds,
            duplicated: vec![false; primary.egress.len()],
        }];
        if cfg.multi_candidate {
            let cut = cands[i][0].pds - cfg.multi_candidate_margin;
            for (ci, c) in cands[i].iter().enumerate() {
                if ci == p || c.pds < cut {
                    continue;
                }
                let duplicated = c
                    .egress
                    .iter()
                    .map(|&e| match emitted.get(&e) {
                        Some(&o) => o != i,
                        None => {
                            emitted.insert(e, i);
                            false
                        }
                    })
                    .collect();
                list.push(CandidateAssignment {
                    egress: ids(c),
                    pds: c.pds,
                    cds: c.cds,
                    duplicated,
                });
            }
        }
        assignments.insert(ss.ingress[i].span_id.clone(), list);
    }

    let result = CorrelationResult {
        service: call_graph.service.clone(),
        assignments,
        unassigned,
        approximate_components: assignment.approximate_components,
        degraded,
    };
    let correlate = t1.elapsed();
    Ok(Correlation {
        result,
        spans: ss,
        candidates: cands,
        estimates,
        models: fitted,
        high_certainty: high,
        assignment,
        timings: PhaseTimings {
            candidate_find,
            correlate,
            fit,
            assign,
        },
        warnings,
    })
}
