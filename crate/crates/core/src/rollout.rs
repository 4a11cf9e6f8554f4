//! Running the agent through one episode.

use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::agent::{select_action, Agent, AgentError, SelectMode};
use crate::encoders::Vocabulary;
use crate::episode::{Episode, EpisodeRecord};
use crate::graph::{Graph, NodeId};
use crate::params::{Gradients, ParamStore};
use crate::sim::{advance_progress, Action, NavGraph, SimError};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("episode {episode}: {source}")]
    Agent {
        episode: alloc::string::String,
        source: AgentError,
    },
    #[error("episode {episode}: {source}")]
    Sim {
        episode: alloc::string::String,
        source: SimError,
    },
    #[error("episode {episode} step {step}: {source}")]
    Numeric {
        episode: alloc::string::String,
        step: usize,
        source: TensorError,
    },
}

/// Which action is executed at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Sampled from the policy (student forcing).
    Sample,
    /// Argmax of the policy.
    Greedy,
    /// The oracle label, ignoring the policy.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub mode: ExecMode,
    pub max_steps: usize,
    /// Compute oracle labels and the cross-entropy loss.
    pub supervise: bool,
    /// Train-mode dropout.
    pub dropout: bool,
}

impl RolloutConfig {
    pub fn train(max_steps: usize) -> Self {
        Self {
            mode: ExecMode::Sample,
            max_steps,
            supervise: true,
            dropout: true,
        }
    }

    pub fn eval(max_steps: usize) -> Self {
        Self {
            mode: ExecMode::Greedy,
            max_steps,
            supervise: false,
            dropout: false,
        }
    }
}

pub struct Rollout {
    /// Summed per-step cross-entropy, when supervised.
    pub loss: Option<NodeId>,
    pub record: EpisodeRecord,
    /// Action distribution at every step.
    pub probs: Vec<NodeId>,
}

pub fn rollout<R: Rng + ?Sized>(
    agent: &Agent,
    g: &mut Graph<'_>,
    vocab: &Vocabulary,
    nav: &NavGraph,
    episode: &Episode,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Rollout, RolloutError> {
    let id = || episode.id.clone();
    let agent_err = |source| RolloutError::Agent { episode: id(), source };
    let sim_err = |source| RolloutError::Sim { episode: id(), source };
    nav.validate_path(&episode.path).map_err(sim_err)?;
    let mut ctx = agent.begin_episode(g, vocab, &episode.instruction).map_err(agent_err)?;
    let mut state = agent.initial_state(g);
    let mut record = EpisodeRecord::new(episode);
    let mut pose = episode.start_pose();
    let mut progress = 0;
    let mut losses = Vec::new();
    let mut probs = Vec::new();
    let supervise = cfg.supervise || cfg.mode == ExecMode::Teacher;
    loop {
        if record.actions.len() >= cfg.max_steps {
            record.truncated = true;
            break;
        }
        let step = if cfg.dropout {
            agent.step(g, &mut ctx, &state, nav, &pose, Some(&mut *rng))
        } else {
            agent.step::<R>(g, &mut ctx, &state, nav, &pose, None)
        }
        .map_err(agent_err)?;
        probs.push(step.probs);
        let label = if supervise {
            let y = nav
                .label_action(&pose, &episode.path, progress)
                .map_err(sim_err)?;
            record.labels.push(y);
            Some(y)
        } else {
            None
        };
        if let (true, Some(y)) = (cfg.supervise, label) {
            let t = record.actions.len();
            let ce = g
                .cross_entropy(step.probs, y.index())
                .map_err(|source| RolloutError::Numeric {
                    episode: id(),
                    step: t,
                    source,
                })?;
            record.step_losses.push(g.value(ce).item());
            losses.push(ce);
        }
        let action = match cfg.mode {
            ExecMode::Teacher => label.expect("teacher mode always computes labels"),
            ExecMode::Greedy => select_action(g.value(step.probs).data(), SelectMode::Greedy, rng),
            ExecMode::Sample => select_action(g.value(step.probs).data(), SelectMode::Sample, rng),
        };
        let out = nav.apply_action(&pose, action).map_err(sim_err)?;
        record.actions.push(action);
        record.poses.push(out.pose);
        state = step.state;
        state.prev_action = Some(action);
        if out.done {
            break;
        }
        if action == Action::Forward && out.pose.node != pose.node {
            progress = advance_progress(&episode.path, progress, out.pose.node);
        }
        pose = out.pose;
    }
    let loss = if losses.is_empty() {
        None
    } else {
        Some(g.add_n(&losses).map_err(|source| RolloutError::Numeric {
            episode: id(),
            step: record.actions.len(),
            source,
        })?)
    };
    Ok(Rollout {
        loss,
        record,
        probs,
    })
}

/// Supervised rollout in a fresh graph followed by backpropagation of its summed loss.
pub struct EpisodeGradients {
    pub gradients: Gradients,
    pub loss: f64,
    pub record: EpisodeRecord,
}

pub fn episode_gradients<R: Rng + ?Sized>(
    agent: &Agent,
    store: &ParamStore,
    vocab: &Vocabulary,
    nav: &NavGraph,
    episode: &Episode,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<EpisodeGradients, RolloutError> {
    let mut g = Graph::new(store);
    let out = rollout(agent, &mut g, vocab, nav, episode, cfg, rng)?;
    let steps = out.record.actions.len();
    match out.loss {
        Some(loss) => {
            let gradients = g.backward(loss).map_err(|source| RolloutError::Numeric {
                episode: episode.id.clone(),
                step: steps,
                source,
            })?;
            Ok(EpisodeGradients {
                gradients,
                loss: g.value(loss).item(),
                record: out.record,
            })
        }
        None => Ok(EpisodeGradients {
            gradients: Gradients::new(store.len()),
            loss: 0.0,
            record: out.record,
        }),
    }
}

/// Greedy, unsupervised rollout for evaluation.
pub fn evaluate_episode(
    agent: &Agent,
    store: &ParamStore,
    vocab: &Vocabulary,
    nav: &NavGraph,
    episode: &Episode,
    max_steps: usize,
) -> Result<EpisodeRecord, RolloutError> {
    let mut g = Graph::new(store);
    // Greedy mode never draws from the rng.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let cfg = RolloutConfig::eval(max_steps);
    Ok(rollout(agent, &mut g, vocab, nav, episode, &cfg, &mut rng)?.record)
}
