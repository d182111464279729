use thiserror::Error;

use crate::model::{CallGraph, Span};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no ingress spans")]
    Empty,
    #[error("position {position}: {got} egress spans for {expected} ingress spans")]
    CountMismatch {
        position: usize,
        expected: usize,
        got: usize,
    },
    #[error("call graph has {expected} positions, got {got} egress lists")]
    PositionMismatch { expected: usize, got: usize },
}

/// Mean of one delay position, estimated without knowing correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEstimate {
    /// 1-based delay position.
    pub position: usize,
    pub mean_us: f64,
    /// Mean ingress duration minus the summed mean egress durations.
    pub total_mean_us: f64,
    pub sample_count: usize,
}

fn sum(xs: impl Iterator<Item = u64>) -> i128 {
    xs.map(i128::from).sum()
}

/// Per-position mean delays from differences of averages.
///
/// Since the mean of differences equals the difference of means, each
/// position's mean needs only the mean of its two reference timestamps:
/// ingress start and first egress start, previous egress end and current
/// egress start, last egress end and ingress end. Reported means are the
/// absolute differences.
pub fn estimate_means(
    ingress: &[Span],
    egress_by_position: &[Vec<Span>],
    call_graph: &CallGraph,
) -> Result<Vec<DelayEstimate>, StatsError> {
    let n = ingress.len();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    if egress_by_position.len() != call_graph.n() {
        return Err(StatsError::PositionMismatch {
            expected: call_graph.n(),
            got: egress_by_position.len(),
        });
    }
    for (k, list) in egress_by_position.iter().enumerate() {
        if list.len() != n {
            return Err(StatsError::CountMismatch {
                position: k + 1,
                expected: n,
                got: list.len(),
            });
        }
    }

    let nf = n as f64;
    let ingress_start = sum(ingress.iter().map(|s| s.start_us));
    let ingress_end = sum(ingress.iter().map(|s| s.end_us));
    let starts: Vec<i128> = egress_by_position
        .iter()
        .map(|l| sum(l.iter().map(|s| s.start_us)))
        .collect();
    let ends: Vec<i128> = egress_by_position
        .iter()
        .map(|l| sum(l.iter().map(|s| s.end_us)))
        .collect();

    let mut diffs = Vec::with_capacity(call_graph.delay_positions());
    if call_graph.is_leaf() {
        diffs.push(ingress_end - ingress_start);
    } else {
        diffs.push(starts[0] - ingress_start);
        for k in 1..call_graph.n() {
            diffs.push(starts[k] - ends[k - 1]);
        }
        diffs.push(ingress_end - ends[call_graph.n() - 1]);
    }
    let egress_duration: i128 = (0..call_graph.n()).map(|k| ends[k] - starts[k]).sum();
    let total_mean_us = ((ingress_end - ingress_start) - egress_duration) as f64 / nf;

    Ok(diffs
        .into_iter()
        .enumerate()
        .map(|(k, d)| DelayEstimate {
            position: k + 1,
            mean_us: d.abs() as f64 / nf,
            total_mean_us,
            sample_count: n,
        })
        .collect())
}
