//! Navigation-graph simulator for the six-action low-level action space.
//!
//! Headings are measured clockwise from world +y in 30° bins, so bin 0 faces
//! +y and bin 3 faces +x. Elevation has three levels, −30°, 0° and +30°.
//! Moving forward picks the neighbour best aligned with the current view
//! inside a ±15° heading and ±45° elevation cone.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use once_cell::race::OnceBox;
use thiserror::Error;

use crate::episode::{Episode, EpisodeRecord};
use crate::tensor::Tensor;

pub const HEADING_BINS: u8 = 12;
pub const ELEVATION_LEVELS: usize = 3;
/// Cells in a panoramic grid: 12 headings × 3 elevation rows.
pub const GRID_CELLS: usize = HEADING_BINS as usize * ELEVATION_LEVELS;
pub const BIN_ANGLE: f64 = PI / 6.0;
pub const FORWARD_HEADING_CONE: f64 = PI / 12.0;
pub const FORWARD_ELEVATION_CONE: f64 = PI / 4.0;
const ANGLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node index {0} out of range")]
    NodeIndex(usize),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("edge {0}-{1} has zero length")]
    ZeroLengthEdge(String, String),
    #[error("graph is disconnected: `{0}` unreachable from `{1}`")]
    Disconnected(String, String),
    #[error("graph has no nodes")]
    Empty,
    #[error("feature grid of `{id}` has shape {shape:?}, expected [36, {dim}]")]
    FeatureShape {
        id: String,
        shape: Vec<usize>,
        dim: usize,
    },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("oracle desync: agent at node {actual}, path expects node {expected}")]
    OracleDesync { expected: usize, actual: usize },
    #[error("path nodes {0} and {1} are not adjacent")]
    NotAdjacent(usize, usize),
    #[error("empty path")]
    EmptyPath,
    #[error("target node {0} cannot be reached by forward motion from this pose")]
    ForwardBlocked(usize),
    #[error("oracle rollout exceeded {0} steps")]
    StepLimit(usize),
}

/// The six low-level actions in their frozen output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Raise = 2,
    Lower = 3,
    Forward = 4,
    End = 5,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::Raise,
        Action::Lower,
        Action::Forward,
        Action::End,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Raise => "raise",
            Action::Lower => "lower",
            Action::Forward => "forward",
            Action::End => "end",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentPose {
    pub node: usize,
    pub heading_bin: u8,
    pub elev_bin: i8,
}

impl AgentPose {
    pub fn new(node: usize, heading_bin: u8, elev_bin: i8) -> Self {
        Self {
            node,
            heading_bin,
            elev_bin,
        }
    }

    pub fn heading(&self) -> f64 {
        self.heading_bin as f64 * BIN_ANGLE
    }

    pub fn elevation(&self) -> f64 {
        self.elev_bin as f64 * BIN_ANGLE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub pose: AgentPose,
    pub moved: bool,
    pub done: bool,
    pub forward_failed: bool,
}

/// A neighbour inside the forward cone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardCandidate {
    pub node: usize,
    pub dphi: f64,
    pub dtheta: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavNode {
    pub id: String,
    pub pos: [f64; 3],
    /// Panoramic features, `[36, dim]`, row `heading_bin * 3 + elevation_row`
    /// with rows ordered bottom, middle, top.
    pub features: Option<Tensor>,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = libm::fmod(a, 2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    libm::sqrt((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
}

/// Immutable navigation graph with lazily computed all-pairs geodesics.
pub struct NavGraph {
    nodes: Vec<NavNode>,
    index: BTreeMap<String, usize>,
    adjacency: Vec<Vec<(usize, f64)>>,
    edges: Vec<(usize, usize)>,
    feature_dim: Option<usize>,
    geodesic: OnceBox<Vec<f64>>,
}

impl fmt::Debug for NavGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NavGraph")
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edges.len())
            .field("feature_dim", &self.feature_dim)
            .finish()
    }
}

impl Clone for NavGraph {
    fn clone(&self) -> Self {
        Self::from_indices(self.nodes.clone(), &self.edges).expect("validated graph")
    }
}

impl NavGraph {
    /// Builds a graph from string-keyed edges.
    pub fn new(nodes: Vec<NavNode>, edges: &[(String, String)]) -> Result<Self, SimError> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(SimError::DuplicateNode(n.id.clone()));
            }
        }
        let mut pairs = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| SimError::UnknownNode(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| SimError::UnknownNode(b.clone()))?;
            pairs.push((ia, ib));
        }
        Self::from_indices(nodes, &pairs)
    }

    /// Builds a graph from index-keyed edges; duplicate edges are merged.
    pub fn from_indices(nodes: Vec<NavNode>, edges: &[(usize, usize)]) -> Result<Self, SimError> {
        if nodes.is_empty() {
            return Err(SimError::Empty);
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(SimError::DuplicateNode(n.id.clone()));
            }
        }
        let mut feature_dim = None;
        for n in &nodes {
            if let Some(f) = &n.features {
                let dim = *feature_dim.get_or_insert(f.shape().last().copied().unwrap_or(0));
                if f.shape() != [GRID_CELLS, dim] {
                    return Err(SimError::FeatureShape {
                        id: n.id.clone(),
                        shape: f.shape().to_vec(),
                        dim,
                    });
                }
            }
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut canon = Vec::new();
        for &(a, b) in edges {
            if a >= nodes.len() {
                return Err(SimError::NodeIndex(a));
            }
            if b >= nodes.len() {
                return Err(SimError::NodeIndex(b));
            }
            if a == b {
                return Err(SimError::SelfLoop(nodes[a].id.clone()));
            }
            let e = (a.min(b), a.max(b));
            if canon.contains(&e) {
                continue;
            }
            let w = dist(&nodes[a].pos, &nodes[b].pos);
            if !(w > 0.0) {
                return Err(SimError::ZeroLengthEdge(nodes[a].id.clone(), nodes[b].id.clone()));
            }
            canon.push(e);
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|(n, _)| *n);
        }
        // Connectivity by BFS from node 0.
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(u) = seen.iter().position(|s| !s) {
            return Err(SimError::Disconnected(nodes[u].id.clone(), nodes[0].id.clone()));
        }
        Ok(Self {
            nodes,
            index,
            adjacency,
            edges: canon,
            feature_dim,
            geodesic: OnceBox::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &NavNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[NavNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn index_of(&self, id: &str) -> Result<usize, SimError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| SimError::UnknownNode(id.into()))
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|(n, _)| *n == b)
            .map(|(_, w)| *w)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    pub fn euclidean(&self, a: usize, b: usize) -> f64 {
        dist(&self.nodes[a].pos, &self.nodes[b].pos)
    }

    fn all_pairs(&self) -> &[f64] {
        self.geodesic.get_or_init(|| {
            let n = self.nodes.len();
            let mut table = vec![f64::INFINITY; n * n];
            for s in 0..n {
                let row = &mut table[s * n..(s + 1) * n];
                let mut done = vec![false; n];
                row[s] = 0.0;
                for _ in 0..n {
                    let mut u = usize::MAX;
                    let mut best = f64::INFINITY;
                    for (v, d) in row.iter().enumerate() {
                        if !done[v] && *d < best {
                            best = *d;
                            u = v;
                        }
                    }
                    if u == usize::MAX {
                        break;
                    }
                    done[u] = true;
                    for &(v, w) in &self.adjacency[u] {
                        if best + w < row[v] {
                            row[v] = best + w;
                        }
                    }
                }
            }
            // Symmetrize against floating-point accumulation order.
            for a in 0..n {
                for b in a + 1..n {
                    let d = table[a * n + b].min(table[b * n + a]);
                    table[a * n + b] = d;
                    table[b * n + a] = d;
                }
            }
            alloc::boxed::Box::new(table)
        })
    }

    /// Shortest-path length under Euclidean edge weights.
    pub fn geodesic_distance(&self, a: usize, b: usize) -> Result<f64, SimError> {
        let n = self.nodes.len();
        if a >= n {
            return Err(SimError::NodeIndex(a));
        }
        if b >= n {
            return Err(SimError::NodeIndex(b));
        }
        Ok(self.all_pairs()[a * n + b])
    }

    pub fn geodesic_by_id(&self, a: &str, b: &str) -> Result<f64, SimError> {
        self.geodesic_distance(self.index_of(a)?, self.index_of(b)?)
    }

    /// First node after `from` on a shortest route to `to`; ties go to the lowest index.
    pub fn next_hop(&self, from: usize, to: usize) -> Result<usize, SimError> {
        if from == to {
            return Ok(from);
        }
        let target = self.geodesic_distance(from, to)?;
        let mut best: Option<(usize, f64)> = None;
        for &(v, w) in &self.adjacency[from] {
            let d = w + self.geodesic_distance(v, to)?;
            if d <= target + 1e-9 && best.map_or(true, |(_, bd)| d < bd - 1e-12) {
                best = Some((v, d));
            }
        }
        best.map(|(v, _)| v).ok_or(SimError::NodeIndex(to))
    }

    pub fn validate_pose(&self, pose: &AgentPose) -> Result<(), SimError> {
        if pose.node >= self.nodes.len() {
            return Err(SimError::InvalidPose(alloc::format!("node {} out of range", pose.node)));
        }
        if pose.heading_bin >= HEADING_BINS {
            return Err(SimError::InvalidPose(alloc::format!(
                "heading bin {}",
                pose.heading_bin
            )));
        }
        if !(-1..=1).contains(&pose.elev_bin) {
            return Err(SimError::InvalidPose(alloc::format!(
                "elevation bin {}",
                pose.elev_bin
            )));
        }
        Ok(())
    }

    /// Heading and elevation of `target` relative to the agent's view.
    pub fn relative_angles(&self, pose: &AgentPose, target: usize) -> (f64, f64) {
        let a = &self.nodes[pose.node].pos;
        let b = &self.nodes[target].pos;
        let (dx, dy, dz) = (b[0] - a[0], b[1] - a[1], b[2] - a[2]);
        let planar = libm::sqrt(dx * dx + dy * dy);
        let dphi = wrap_angle(libm::atan2(dx, dy) - pose.heading());
        let dtheta = libm::atan2(dz, planar) - pose.elevation();
        (dphi, dtheta)
    }

    /// Neighbours eligible for forward motion, best aligned first.
    pub fn forward_candidates(&self, pose: &AgentPose) -> Result<Vec<ForwardCandidate>, SimError> {
        self.validate_pose(pose)?;
        let mut out: Vec<ForwardCandidate> = self.adjacency[pose.node]
            .iter()
            .filter_map(|&(n, w)| {
                let (dphi, dtheta) = self.relative_angles(pose, n);
                (dphi.abs() <= FORWARD_HEADING_CONE + ANGLE_TOL
                    && dtheta.abs() <= FORWARD_ELEVATION_CONE + ANGLE_TOL)
                    .then_some(ForwardCandidate {
                        node: n,
                        dphi,
                        dtheta,
                        distance: w,
                    })
            })
            .collect();
        out.sort_by(|a, b| {
            a.dphi
                .abs()
                .total_cmp(&b.dphi.abs())
                .then(a.distance.total_cmp(&b.distance))
                .then(a.node.cmp(&b.node))
        });
        Ok(out)
    }

    pub fn apply_action(&self, pose: &AgentPose, action: Action) -> Result<StepOutcome, SimError> {
        self.validate_pose(pose)?;
        let mut next = *pose;
        let mut forward_failed = false;
        match action {
            Action::TurnLeft => next.heading_bin = (pose.heading_bin + HEADING_BINS - 1) % HEADING_BINS,
            Action::TurnRight => next.heading_bin = (pose.heading_bin + 1) % HEADING_BINS,
            Action::Raise => next.elev_bin = (pose.elev_bin + 1).min(1),
            Action::Lower => next.elev_bin = (pose.elev_bin - 1).max(-1),
            Action::Forward => match self.forward_candidates(pose)?.first() {
                Some(c) => next.node = c.node,
                None => forward_failed = true,
            },
            Action::End => {}
        }
        Ok(StepOutcome {
            pose: next,
            moved: next != *pose,
            done: action == Action::End,
            forward_failed,
        })
    }

    /// Action that brings the agent closer to facing, then reaching, an adjacent `target`.
    pub fn action_toward(&self, pose: &AgentPose, target: usize) -> Result<Action, SimError> {
        self.validate_pose(pose)?;
        if self.edge_length(pose.node, target).is_none() {
            return Err(SimError::NotAdjacent(pose.node, target));
        }
        let (dphi, dtheta) = self.relative_angles(pose, target);
        if dtheta.abs() > FORWARD_ELEVATION_CONE + ANGLE_TOL {
            return match (dtheta > 0.0, pose.elev_bin) {
                (true, e) if e < 1 => Ok(Action::Raise),
                (false, e) if e > -1 => Ok(Action::Lower),
                _ => Err(SimError::ForwardBlocked(target)),
            };
        }
        if dphi.abs() <= FORWARD_HEADING_CONE + ANGLE_TOL {
            let top = self.forward_candidates(pose)?.first().map(|c| c.node);
            return if top == Some(target) {
                Ok(Action::Forward)
            } else {
                Err(SimError::ForwardBlocked(target))
            };
        }
        if dphi > 0.0 || dphi.abs() >= PI - ANGLE_TOL {
            Ok(Action::TurnRight)
        } else {
            Ok(Action::TurnLeft)
        }
    }

    /// Ground-truth action for an agent standing on `path[progress]`.
    pub fn oracle_action(
        &self,
        pose: &AgentPose,
        path: &[usize],
        progress: usize,
    ) -> Result<Action, SimError> {
        let expected = *path.get(progress).ok_or(SimError::EmptyPath)?;
        if pose.node != expected {
            return Err(SimError::OracleDesync {
                expected,
                actual: pose.node,
            });
        }
        if progress + 1 == path.len() {
            return Ok(Action::End);
        }
        self.action_toward(pose, path[progress + 1])
    }

    /// Supervision label from any pose: on the path this is [`NavGraph::oracle_action`];
    /// off the path it heads along a shortest route to the next unreached path node.
    pub fn label_action(
        &self,
        pose: &AgentPose,
        path: &[usize],
        progress: usize,
    ) -> Result<Action, SimError> {
        let last = path.len().checked_sub(1).ok_or(SimError::EmptyPath)?;
        if let Some(k) = path[progress..].iter().position(|&n| n == pose.node) {
            return self.oracle_action(pose, path, progress + k);
        }
        let target = path[(progress + 1).min(last)];
        let hop = self.next_hop(pose.node, target)?;
        self.action_toward(pose, hop)
    }

    pub fn validate_path(&self, path: &[usize]) -> Result<(), SimError> {
        if path.is_empty() {
            return Err(SimError::EmptyPath);
        }
        for &n in path {
            if n >= self.nodes.len() {
                return Err(SimError::NodeIndex(n));
            }
        }
        for w in path.windows(2) {
            if self.edge_length(w[0], w[1]).is_none() {
                return Err(SimError::NotAdjacent(w[0], w[1]));
            }
        }
        Ok(())
    }

    /// Executes oracle actions from the episode's start pose until the end action.
    pub fn run_oracle_rollout(&self, episode: &Episode) -> Result<EpisodeRecord, SimError> {
        self.validate_path(&episode.path)?;
        let limit = 16 * episode.path.len() + 16;
        let mut record = EpisodeRecord::new(episode);
        let mut pose = episode.start_pose();
        let mut progress = 0;
        loop {
            if record.actions.len() >= limit {
                return Err(SimError::StepLimit(limit));
            }
            let action = self.oracle_action(&pose, &episode.path, progress)?;
            let out = self.apply_action(&pose, action)?;
            record.actions.push(action);
            record.labels.push(action);
            record.poses.push(out.pose);
            if out.done {
                return Ok(record);
            }
            if action == Action::Forward && out.pose.node != pose.node {
                progress = advance_progress(&episode.path, progress, out.pose.node);
            }
            pose = out.pose;
        }
    }
}

/// Moves the progress index to the first later path position equal to `node`, if any.
pub fn advance_progress(path: &[usize], progress: usize, node: usize) -> usize {
    path.iter()
        .enumerate()
        .skip(progress + 1)
        .find(|(_, n)| **n == node)
        .map_or(progress, |(j, _)| j)
}
