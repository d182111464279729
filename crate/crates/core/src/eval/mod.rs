//! Experiment grid, baselines and reports.

pub mod baselines;
pub mod report;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlate::{correlate, Candidate, Correlation, CorrelateError, CorrelatorConfig, ThresholdMode};
use crate::model::{CorrelationResult, GroundTruth, SpanId};
use crate::reconstruct::{ingress_correct, inter_links_from_spans, reconstruct, trace_accuracy, ReconstructError};
use crate::sim::{generate, presets, retime, Dataset, SimError};

pub use baselines::{assignment_result, exhaustive_oracle, nearest_neighbor_baseline, time_windows, ORACLE_WINDOW_GUARD};
pub use report::{report, ReportFormat};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Correlate(#[from] CorrelateError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error("window of {window} ingress spans exceeds the oracle guard of {guard}")]
    Guard { window: usize, guard: usize },
    #[error("no rows to report")]
    EmptyReport,
    #[error("spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Crosstrace,
    CrosstraceMulti,
    NearestNeighbor,
    ExhaustiveOracle,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Crosstrace => "crosstrace",
            Algorithm::CrosstraceMulti => "crosstrace_multi",
            Algorithm::NearestNeighbor => "nearest_neighbor",
            Algorithm::ExhaustiveOracle => "exhaustive_oracle",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crosstrace" => Ok(Algorithm::Crosstrace),
            "crosstrace_multi" => Ok(Algorithm::CrosstraceMulti),
            "nearest_neighbor" => Ok(Algorithm::NearestNeighbor),
            "exhaustive_oracle" => Ok(Algorithm::ExhaustiveOracle),
            other => Err(EvalError::UnknownAlgorithm(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: String,
    pub request_count: usize,
    pub levels: Vec<u32>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub threshold: ThresholdMode,
    pub correlator: CorrelatorConfig,
    /// Grid cells evaluated concurrently. Each cell runs on one thread.
    pub jobs: usize,
}

impl ExperimentSpec {
    pub fn new(preset: &str) -> Self {
        Self {
            preset: preset.into(),
            request_count: 10_000,
            levels: vec![250, 500, 750, 1000, 1250, 1500],
            seeds: (1..=5).collect(),
            algorithms: vec![Algorithm::Crosstrace, Algorithm::NearestNeighbor],
            threshold: ThresholdMode::Adaptive,
            correlator: CorrelatorConfig::default(),
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if presets::by_name(&self.preset, 1, 0).is_none() {
            return Err(EvalError::UnknownPreset(self.preset.clone()));
        }
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(EvalError::Spec("levels must be non-empty and positive".into()));
        }
        if self.seeds.is_empty() || self.algorithms.is_empty() {
            return Err(EvalError::Spec("seeds and algorithms must be non-empty".into()));
        }
        let mut cfg = self.correlator.clone();
        cfg.threshold = self.threshold;
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: Algorithm,
    pub service: String,
    pub concurrency: u32,
    pub seed: u64,
    pub span_accuracy: f64,
    pub trace_accuracy: f64,
    pub wrong_with_lower_true_pds_fraction: f64,
    pub ambiguity_ratio_10pct: f64,
    pub ambiguity_ratio_15pct: f64,
    pub candidate_find_ms: f64,
    pub correlate_ms: f64,
    pub candidates_per_ingress_mean: f64,
    pub span_overhead_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub algorithm: Algorithm,
    pub service: String,
    pub concurrency: u32,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub skipped: Vec<SkippedCell>,
}

/// Preset dataset retimed to `level`.
pub fn dataset_for(preset: &str, request_count: usize, level: u32, seed: u64) -> Result<Dataset, EvalError> {
    let spec = presets::by_name(preset, request_count, seed).ok_or_else(|| EvalError::UnknownPreset(preset.into()))?;
    let base = generate(&spec)?;
    Ok(retime(&base, level, seed)?)
}

/// Fraction of `correlation`'s ingress spans matched exactly.
pub fn span_accuracy(result: &CorrelationResult, ingress: &[SpanId], truth: &GroundTruth) -> f64 {
    if ingress.is_empty() {
        return 1.0;
    }
    let hits = ingress
        .iter()
        .filter(|i| ingress_correct(&[result], i, truth.intra.get(*i).map_or(&[][..], |t| t)))
        .count();
    hits as f64 / ingress.len() as f64
}

fn true_candidate(c: &Correlation, i: usize, truth: &GroundTruth) -> Option<usize> {
    let t = truth.intra.get(&c.spans.ingress[i].span_id)?;
    c.candidates[i].iter().position(|cand| c.egress_ids(cand) == *t)
}

/// Among wrongly assigned ingress spans, the fraction whose true candidate
/// was enumerated but scored below the chosen one.
pub fn wrong_with_lower_true_pds(c: &Correlation, truth: &GroundTruth) -> f64 {
    let mut wrong = 0;
    let mut lower = 0;
    for i in 0..c.spans.ingress.len() {
        let t = true_candidate(c, i, truth);
        let chosen = c.assignment.chosen[i];
        if chosen.is_some() && chosen == t {
            continue;
        }
        wrong += 1;
        if let (Some(t), Some(ch)) = (t, chosen) {
            if c.candidates[i][t].pds < c.candidates[i][ch].pds {
                lower += 1;
            }
        }
    }
    if wrong == 0 {
        0.0
    } else {
        lower as f64 / wrong as f64
    }
}

fn p90(mut xs: Vec<u64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_unstable();
    let idx = ((xs.len() as f64) * 0.9).ceil() as usize;
    xs[idx.clamp(1, xs.len()) - 1] as f64
}

/// Fraction of ingress spans having, at some position, two distinct
/// candidate egress spans whose delays differ by less than `fraction` of
/// the P90 of all candidate delays at that position.
pub fn ambiguity_ratios(cands: &[Vec<Candidate>], positions: usize, fractions: &[f64]) -> Vec<f64> {
    if cands.is_empty() || positions == 0 {
        return vec![0.0; fractions.len()];
    }
    let p90s: Vec<f64> = (0..positions)
        .map(|k| p90(cands.iter().flatten().map(|c| c.delays[k]).collect()))
        .collect();
    let mut counts = vec![0usize; fractions.len()];
    for list in cands {
        let mut min_gap = vec![f64::INFINITY; positions];
        for (k, gap) in min_gap.iter_mut().enumerate() {
            let mut per_egress: Vec<(u32, u64)> = list.iter().map(|c| (c.egress[k], c.delays[k])).collect();
            per_egress.sort_unstable();
            per_egress.dedup_by_key(|x| x.0);
            let mut ds: Vec<u64> = per_egress.into_iter().map(|x| x.1).collect();
            ds.sort_unstable();
            for w in ds.windows(2) {
                *gap = gap.min((w[1] - w[0]) as f64);
            }
        }
        for (j, f) in fractions.iter().enumerate() {
            if (0..positions).any(|k| min_gap[k] < f * p90s[k]) {
                counts[j] += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / cands.len() as f64).collect()
}

struct ServiceRun {
    service: String,
    result: CorrelationResult,
    ingress: Vec<SpanId>,
    candidate_find_ms: f64,
    correlate_ms: f64,
    correlation: Option<Correlation>,
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn run_algorithm(dataset: &Dataset, algorithm: Algorithm, cfg: &CorrelatorConfig) -> Result<Vec<ServiceRun>, EvalError> {
    let mut runs = Vec::new();
    for cg in dataset.topology.call_graphs().into_iter().filter(|g| !g.is_leaf()) {
        let run = match algorithm {
            Algorithm::Crosstrace | Algorithm::CrosstraceMulti => {
                let mut cfg = cfg.clone();
                cfg.multi_candidate = algorithm == Algorithm::CrosstraceMulti;
                let c = correlate(&dataset.spans, &cg, &cfg)?;
                ServiceRun {
                    service: cg.service.clone(),
                    result: c.result.clone(),
                    ingress: c.spans.ingress.iter().map(|s| s.span_id.clone()).collect(),
                    candidate_find_ms: ms(c.timings.candidate_find),
                    correlate_ms: ms(c.timings.correlate),
                    correlation: Some(c),
                }
            }
            Algorithm::NearestNeighbor => {
                let ss = crate::correlate::ServiceSpans::new(&dataset.spans, &cg);
                let t = Instant::now();
                let result = nearest_neighbor_baseline(&ss);
                ServiceRun {
                    service: cg.service.clone(),
                    result,
                    ingress: ss.ingress.iter().map(|s| s.span_id.clone()).collect(),
                    candidate_find_ms: 0.0,
                    correlate_ms: ms(t.elapsed()),
                    correlation: None,
                }
            }
            Algorithm::ExhaustiveOracle => {
                let mut c = correlate(&dataset.spans, &cg, cfg)?;
                let t = Instant::now();
                let a = exhaustive_oracle(&c.spans, &c.candidates, ORACLE_WINDOW_GUARD)?;
                let correlate_ms = ms(t.elapsed());
                let result = assignment_result(&c.spans, &c.candidates, &a);
                c.assignment = a;
                c.result = result.clone();
                ServiceRun {
                    service: cg.service.clone(),
                    result,
                    ingress: c.spans.ingress.iter().map(|s| s.span_id.clone()).collect(),
                    candidate_find_ms: ms(c.timings.candidate_find),
                    correlate_ms,
                    correlation: Some(c),
                }
            }
        };
        runs.push(run);
    }
    Ok(runs)
}

/// Rows of one (dataset, algorithm) cell, one per non-leaf service.
pub fn evaluate(dataset: &Dataset, algorithm: Algorithm, cfg: &CorrelatorConfig, seed: u64) -> Result<Vec<MetricsRow>, EvalError> {
    let runs = run_algorithm(dataset, algorithm, cfg)?;
    let results: Vec<CorrelationResult> = runs.iter().map(|r| r.result.clone()).collect();
    let graph = reconstruct(&dataset.spans, &results, &inter_links_from_spans(&dataset.spans))?;
    let acc = trace_accuracy(&graph, &results, &dataset.ground_truth)?;
    let truth = &dataset.ground_truth;
    let mut dup_by_service: HashMap<&str, usize> = HashMap::new();
    for r in &results {
        let n = r
            .assignments
            .values()
            .flatten()
            .flat_map(|c| c.duplicated.iter())
            .filter(|&&d| d)
            .count();
        dup_by_service.insert(&r.service, n);
    }
    Ok(runs
        .iter()
        .map(|run| {
            let (lower, amb, cpi) = match &run.correlation {
                Some(c) => {
                    let amb = ambiguity_ratios(&c.candidates, c.spans.call_graph.n(), &[0.10, 0.15]);
                    let cpi = if c.candidates.is_empty() {
                        0.0
                    } else {
                        c.candidates.iter().map(Vec::len).sum::<usize>() as f64 / c.candidates.len() as f64
                    };
                    (wrong_with_lower_true_pds(c, truth), amb, cpi)
                }
                None => (0.0, vec![0.0, 0.0], 0.0),
            };
            let base = dataset.spans_of_service(&run.service).count().max(1);
            MetricsRow {
                algorithm,
                service: run.service.clone(),
                concurrency: dataset.concurrency_level,
                seed,
                span_accuracy: span_accuracy(&run.result, &run.ingress, truth),
                trace_accuracy: acc.trace_level,
                wrong_with_lower_true_pds_fraction: lower,
                ambiguity_ratio_10pct: amb[0],
                ambiguity_ratio_15pct: amb[1],
                candidate_find_ms: run.candidate_find_ms,
                correlate_ms: run.correlate_ms,
                candidates_per_ingress_mean: cpi,
                span_overhead_rate: dup_by_service[run.service.as_str()] as f64 / base as f64,
            }
        })
        .collect())
}

fn run_cell(spec: &ExperimentSpec, level: u32, seed: u64) -> Result<(Vec<MetricsRow>, Vec<SkippedCell>), EvalError> {
    let dataset = dataset_for(&spec.preset, spec.request_count, level, seed)?;
    let mut cfg = spec.correlator.clone();
    cfg.threshold = spec.threshold;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &alg in &spec.algorithms {
        match evaluate(&dataset, alg, &cfg, seed) {
            Ok(r) => rows.extend(r),
            Err(e @ EvalError::Guard { .. }) => skipped.push(SkippedCell {
                algorithm: alg,
                service: "*".into(),
                concurrency: level,
                seed,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((rows, skipped))
}

/// Runs every (level, seed) cell; rows come out in (level, seed, algorithm,
/// service) order regardless of `jobs`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, EvalError> {
    spec.validate()?;
    let cells: Vec<(u32, u64)> = spec
        .levels
        .iter()
        .flat_map(|&l| spec.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let jobs = spec.jobs.max(1).min(cells.len());
    let mut outputs: Vec<Option<Result<(Vec<MetricsRow>, Vec<SkippedCell>), EvalError>>> =
        (0..cells.len()).map(|_| None).collect();
    if jobs == 1 {
        for (i, &(l, s)) in cells.iter().enumerate() {
            outputs[i] = Some(run_cell(spec, l, s));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut outputs);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let (l, s) = cells[i];
                    let out = run_cell(spec, l, s);
                    slots.lock().unwrap()[i] = Some(out);
                });
            }
        });
    }
    let mut all = ExperimentOutput::default();
    for o in outputs {
        let (rows, skipped) = o.expect("every cell ran")?;
        all.rows.extend(rows);
        all.skipped.extend(skipped);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in [
            Algorithm::Crosstrace,
            Algorithm::CrosstraceMulti,
            Algorithm::NearestNeighbor,
            Algorithm::ExhaustiveOracle,
        ] {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("closest".parse::<Algorithm>().is_err());
    }

    #[test]
    fn unit_concurrency_is_exact_for_every_algorithm() {
        let d = dataset_for("hotel", 300, 1, 7).unwrap();
        for alg in [Algorithm::Crosstrace, Algorithm::NearestNeighbor, Algorithm::ExhaustiveOracle] {
            let rows = evaluate(&d, alg, &CorrelatorConfig::default(), 7).unwrap();
            assert_eq!(rows.len(), 2);
            for r in rows {
                assert_eq!(r.span_accuracy, 1.0, "{alg} {}", r.service);
                assert_eq!(r.trace_accuracy, 1.0);
            }
        }
    }

    #[test]
    fn oracle_guard_skips_dense_cells() {
        let mut spec = ExperimentSpec::new("chain");
        spec.request_count = 200;
        spec.levels = vec![50];
        spec.seeds = vec![1];
        spec.algorithms = vec![Algorithm::ExhaustiveOracle];
        let out = run_experiment(&spec).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.skipped.len(), 1);
    }

    #[test]
    fn ambiguity_uses_p90_of_pooled_delays() {
        let c = |e: u32, d: u64| Candidate {
            egress: vec![e],
            delays: vec![d, 0],
            cds: 0.0,
            pds: 0.0,
        };
        // pooled position-1 delays 10, 12, 100, 200 -> P90 = 200
        let cands = vec![vec![c(0, 10), c(1, 12)], vec![c(2, 100), c(3, 200)]];
        let r = ambiguity_ratios(&cands, 1, &[0.02, 0.10]);
        assert_eq!(r, vec![0.5, 0.5]);
        let r = ambiguity_ratios(&cands, 1, &[0.005]);
        assert_eq!(r, vec![0.0]);
    }
}
