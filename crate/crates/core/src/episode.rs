//! Episodes and the trajectories recorded while running them.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::sim::{Action, AgentPose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValSeen, Split::ValUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One instruction paired with its ground-truth route.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub path_id: u64,
    /// Node indices into the owning [`crate::sim::NavGraph`].
    pub path: Vec<usize>,
    pub start_heading: u8,
    pub instruction: String,
    pub split: Split,
}

impl Episode {
    pub fn start(&self) -> usize {
        self.path[0]
    }

    pub fn goal(&self) -> usize {
        *self.path.last().expect("episode path is never empty")
    }

    pub fn start_pose(&self) -> AgentPose {
        AgentPose::new(self.start(), self.start_heading, 0)
    }
}

/// What happened when an episode was executed.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub instruction: String,
    pub gt_path: Vec<usize>,
    pub actions: Vec<Action>,
    /// Pose before the first action followed by the pose after every action.
    pub poses: Vec<AgentPose>,
    /// Oracle label at every step.
    pub labels: Vec<Action>,
    /// Cross-entropy at every step; empty for oracle rollouts.
    pub step_losses: Vec<f64>,
    /// True when the step budget ran out before an end action.
    pub truncated: bool,
}

impl EpisodeRecord {
    pub fn new(episode: &Episode) -> Self {
        Self {
            episode_id: episode.id.clone(),
            instruction: episode.instruction.clone(),
            gt_path: episode.path.clone(),
            actions: Vec::new(),
            poses: alloc::vec![episode.start_pose()],
            labels: Vec::new(),
            step_losses: Vec::new(),
            truncated: false,
        }
    }

    pub fn final_pose(&self) -> AgentPose {
        *self.poses.last().expect("record always holds the start pose")
    }

    /// Nodes in visiting order, collapsing consecutive repeats from rotations.
    pub fn visited_nodes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for p in &self.poses {
            if out.last() != Some(&p.node) {
                out.push(p.node);
            }
        }
        out
    }

    pub fn end_count(&self) -> usize {
        self.actions.iter().filter(|a| **a == Action::End).count()
    }
}
