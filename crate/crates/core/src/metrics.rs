//! Navigation error, success rate, oracle success rate and SPL.

use alloc::vec::Vec;

use thiserror::Error;

use crate::episode::EpisodeRecord;
use crate::sim::{NavGraph, SimError};

/// Success radius in meters.
pub const SUCCESS_THRESHOLD_M: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot score an empty split")]
    EmptySplit,
    #[error("{records} records but {goals} goals")]
    LengthMismatch { records: usize, goals: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeScore {
    /// Geodesic distance from the final node to the goal.
    pub ne_m: f64,
    /// Straight-line distance from the final node to the goal.
    pub ne_straight_m: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    pub path_length_m: f64,
    pub shortest_length_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScore {
    pub n: usize,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
}

pub fn score_episode(
    g: &NavGraph,
    record: &EpisodeRecord,
    goal: usize,
) -> Result<EpisodeScore, MetricsError> {
    score_episode_with(g, record, goal, SUCCESS_THRESHOLD_M)
}

pub fn score_episode_with(
    g: &NavGraph,
    record: &EpisodeRecord,
    goal: usize,
    threshold_m: f64,
) -> Result<EpisodeScore, MetricsError> {
    for p in &record.poses {
        g.validate_pose(p)?;
    }
    let visited = record.visited_nodes();
    let start = visited[0];
    let last = *visited.last().unwrap();
    let ne_m = g.geodesic_distance(last, goal)?;
    let mut closest = f64::INFINITY;
    for &n in &visited {
        closest = closest.min(g.geodesic_distance(n, goal)?);
    }
    let mut traveled = 0.0;
    for w in visited.windows(2) {
        traveled += g
            .edge_length(w[0], w[1])
            .ok_or(SimError::NotAdjacent(w[0], w[1]))?;
    }
    let shortest = g.geodesic_distance(start, goal)?;
    let success = ne_m <= threshold_m;
    let spl = match (success, shortest > 0.0) {
        (false, _) => 0.0,
        (true, true) => shortest / traveled.max(shortest),
        (true, false) => 1.0,
    };
    Ok(EpisodeScore {
        ne_m,
        ne_straight_m: g.euclidean(last, goal),
        success,
        oracle_success: closest <= threshold_m,
        spl,
        path_length_m: traveled,
        shortest_length_m: shortest,
    })
}

/// Arithmetic means over already scored episodes.
pub fn aggregate(scores: &[EpisodeScore]) -> Result<SplitScore, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(SplitScore {
        n: scores.len(),
        ne: mean(&|s| s.ne_m),
        sr: mean(&|s| s.success as u8 as f64),
        osr: mean(&|s| s.oracle_success as u8 as f64),
        spl: mean(&|s| s.spl),
    })
}

pub fn score_split(
    g: &NavGraph,
    records: &[EpisodeRecord],
    goals: &[usize],
) -> Result<SplitScore, MetricsError> {
    if records.len() != goals.len() {
        return Err(MetricsError::LengthMismatch {
            records: records.len(),
            goals: goals.len(),
        });
    }
    let scores = records
        .iter()
        .zip(goals)
        .map(|(r, goal)| score_episode(g, r, *goal))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate(&scores)
}
