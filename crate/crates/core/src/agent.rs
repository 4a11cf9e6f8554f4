//! The policy: instruction attention, language-generated 1×1 filters over the
//! panoramic grid, and a recurrent action head.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::encoders::{
    EmbeddingSource, EncodeError, GridCache, InstructionEncoder, InstructionEncoding, Vocabulary,
    VisualEncoder,
};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, LstmCell};
use crate::params::{ParamId, ParamStore};
use crate::sim::{Action, AgentPose, NavGraph, GRID_CELLS};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub word_dim: usize,
    /// Instruction LSTM width `d`.
    pub instr_hidden: usize,
    pub policy_hidden: usize,
    pub raw_feature_dim: usize,
    /// Bottlenecked visual channels `C`.
    pub bottleneck_dim: usize,
    pub attention_dim: usize,
    /// Number of filters `M`.
    pub n_filters: usize,
    pub dynamic_filters: bool,
    pub attention: bool,
    /// Learn the embedding table instead of using the pretrained one.
    pub scratch_embeddings: bool,
    pub vocab_size: usize,
    pub dropout: f64,
    pub absolute_elevation: bool,
}

impl AgentConfig {
    /// Full-size widths: 512 for both LSTMs and the bottleneck, 128 for attention.
    pub fn full(word_dim: usize, raw_feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            word_dim,
            instr_hidden: 512,
            policy_hidden: 512,
            raw_feature_dim,
            bottleneck_dim: 512,
            attention_dim: 128,
            n_filters: 4,
            dynamic_filters: true,
            attention: true,
            scratch_embeddings: false,
            vocab_size,
            dropout: 0.5,
            absolute_elevation: false,
        }
    }

    /// Widths reduced to 128 for single-core runs on synthetic worlds.
    pub fn desk(word_dim: usize, raw_feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            instr_hidden: 128,
            policy_hidden: 128,
            bottleneck_dim: 128,
            ..Self::full(word_dim, raw_feature_dim, vocab_size)
        }
    }

    /// Filter channel count `C' = C + 3`.
    pub fn filter_channels(&self) -> usize {
        self.bottleneck_dim + 3
    }

    pub fn policy_input(&self) -> usize {
        GRID_CELLS * self.n_filters + Action::COUNT
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let dims = [
            self.word_dim,
            self.instr_hidden,
            self.policy_hidden,
            self.raw_feature_dim,
            self.bottleneck_dim,
            self.attention_dim,
        ];
        if dims.contains(&0) {
            return Err(AgentError::Config("layer widths must be positive"));
        }
        if self.n_filters == 0 {
            return Err(AgentError::Config("need at least one filter"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AgentError::Config("dropout must be in [0, 1)"));
        }
        if self.scratch_embeddings && self.vocab_size == 0 {
            return Err(AgentError::Config("scratch embeddings need a vocabulary"));
        }
        Ok(())
    }

    /// Trainable scalar count, computed from the widths alone.
    pub fn expected_param_count(&self) -> usize {
        let lstm = |i: usize, h: usize| 4 * h * (i + h + 1);
        let lin = |i: usize, o: usize| o * (i + 1);
        let c2 = self.filter_channels();
        let mut n = lstm(self.word_dim, self.instr_hidden)
            + lin(self.raw_feature_dim, self.bottleneck_dim)
            + lstm(self.policy_input(), self.policy_hidden)
            + lin(self.policy_hidden, Action::COUNT);
        if self.attention {
            n += lin(self.policy_hidden, self.attention_dim) + lin(self.instr_hidden, self.attention_dim);
        }
        n += if self.dynamic_filters {
            lin(self.instr_hidden, self.n_filters * c2)
        } else {
            self.n_filters * c2
        };
        if self.scratch_embeddings {
            n += self.vocab_size * self.word_dim;
        }
        n
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FilterSource {
    /// `tanh(W_f s + b_f)`, one bank per step.
    Dynamic(Linear),
    /// A learned `[M, C']` bank shared by all steps.
    Static(ParamId),
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
}

/// Parameter handles; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub instruction: InstructionEncoder,
    pub visual: VisualEncoder,
    pub attention: Option<Attention>,
    pub filters: FilterSource,
    pub policy: LstmCell,
    pub head: Linear,
}

/// Per-episode tensors that do not change between steps.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub encoding: InstructionEncoding,
    /// `K = ReLU(W_k X + b_k)`, present when attention is on.
    pub keys: Option<NodeId>,
    pub grids: GridCache,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
    pub prev_action: Option<Action>,
    pub t: usize,
}

/// Everything produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub probs: NodeId,
    pub attention: Option<NodeId>,
    pub filters: NodeId,
    pub response: NodeId,
    pub state: DecoderState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// Draws an action from `p` (sample) or takes the lowest-index argmax (greedy).
pub fn select_action<R: Rng + ?Sized>(p: &[f64], mode: SelectMode, rng: &mut R) -> Action {
    let idx = match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen();
            let total: f64 = p.iter().sum();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, v) in p.iter().enumerate() {
                if *v <= 0.0 {
                    continue;
                }
                acc += v / total;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.unwrap_or(0)
        }
    };
    Action::from_index(idx).expect("probability vector has six entries")
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        config: AgentConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let c = &config;
        let embedding = if c.scratch_embeddings {
            EmbeddingSource::Learned(store.add_uniform(
                "agent.embedding",
                &[c.vocab_size, c.word_dim],
                0.1,
                rng,
            ))
        } else {
            EmbeddingSource::Pretrained
        };
        let instruction = InstructionEncoder {
            lstm: LstmCell::new(store, "agent.instr_lstm", c.word_dim, c.instr_hidden, rng),
            embedding,
        };
        let visual = VisualEncoder {
            bottleneck: Linear::new(store, "agent.bottleneck", c.raw_feature_dim, c.bottleneck_dim, rng),
            absolute_elevation: c.absolute_elevation,
        };
        let attention = c.attention.then(|| Attention {
            query: Linear::new(store, "agent.att.query", c.policy_hidden, c.attention_dim, rng),
            key: Linear::new(store, "agent.att.key", c.instr_hidden, c.attention_dim, rng),
        });
        let c2 = c.filter_channels();
        let filters = if c.dynamic_filters {
            let lin = Linear::new(store, "agent.filter", c.instr_hidden, c.n_filters * c2, rng);
            // A zero bias would leave every filter row at norm 0 whenever dropout blanks `s`.
            let bound = 1.0 / libm::sqrt(c.instr_hidden as f64);
            for v in store.get_mut(lin.b).data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            FilterSource::Dynamic(lin)
        } else {
            let bound = 1.0 / libm::sqrt(c2 as f64);
            FilterSource::Static(store.add_uniform("agent.filter.static", &[c.n_filters, c2], bound, rng))
        };
        let policy = LstmCell::new(store, "agent.policy_lstm", c.policy_input(), c.policy_hidden, rng);
        let head = Linear::new(store, "agent.head", c.policy_hidden, Action::COUNT, rng);
        Ok(Self {
            config,
            instruction,
            visual,
            attention,
            filters,
            policy,
            head,
        })
    }

    /// Encodes the instruction and precomputes attention keys.
    pub fn begin_episode(
        &self,
        g: &mut Graph<'_>,
        vocab: &Vocabulary,
        instruction: &str,
    ) -> Result<EpisodeContext, AgentError> {
        let encoding = self.instruction.encode(g, vocab, instruction)?;
        let keys = match &self.attention {
            Some(att) => {
                let k = att.key.forward(g, encoding.x)?;
                Some(g.relu(k)?)
            }
            None => None,
        };
        Ok(EpisodeContext {
            encoding,
            keys,
            grids: GridCache::new(),
        })
    }

    pub fn initial_state(&self, g: &mut Graph<'_>) -> DecoderState {
        let (h, c) = self.policy.zero_state(g);
        DecoderState {
            h,
            c,
            prev_action: None,
            t: 0,
        }
    }

    /// `s = softmax(K q / √d_att) X` with `q = ReLU(W_q h + b_q)`; returns `(s, α)`.
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        ctx: &EpisodeContext,
        h_prev: NodeId,
    ) -> Result<(NodeId, Option<NodeId>), AgentError> {
        let x = ctx.encoding.x;
        match (&self.attention, ctx.keys) {
            (Some(att), Some(keys)) => {
                let q = att.query.forward(g, h_prev)?;
                let q = g.relu(q)?;
                let scores = g.matvec(keys, q)?;
                let scores = g.scale(scores, 1.0 / libm::sqrt(self.config.attention_dim as f64))?;
                let alpha = g.softmax(scores)?;
                let s = g.vecmat(alpha, x)?;
                Ok((s, Some(alpha)))
            }
            _ => {
                let last = g.shape(x)[0] - 1;
                Ok((g.row(x, last)?, None))
            }
        }
    }

    /// Unit-norm filter bank `[M, C']`. Dropout on `s` applies when `rng` is given.
    pub fn generate_filters<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        s: NodeId,
        rng: Option<&mut R>,
    ) -> Result<NodeId, AgentError> {
        let m = self.config.n_filters;
        let c2 = self.config.filter_channels();
        let raw = match self.filters {
            FilterSource::Dynamic(lin) => {
                let s = match rng {
                    Some(r) => g.dropout(s, self.config.dropout, r)?,
                    None => s,
                };
                let v = lin.forward(g, s)?;
                g.reshape(v, &[m, c2])?
            }
            FilterSource::Static(p) => g.param(p),
        };
        let t = g.tanh(raw)?;
        Ok(g.l2_normalize(t)?)
    }

    /// `D = F Iᵀ / √C'`, shape `[M, 36]`.
    pub fn dynamic_convolve(
        &self,
        g: &mut Graph<'_>,
        filters: NodeId,
        grid: NodeId,
    ) -> Result<NodeId, AgentError> {
        let c2 = g.shape(filters)[1];
        let d = g.matmul_nt(filters, grid)?;
        Ok(g.scale(d, 1.0 / libm::sqrt(c2 as f64))?)
    }

    /// Policy recurrence on `[D̃, a_prev]` and the action distribution.
    pub fn policy_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        state: &DecoderState,
        response: NodeId,
        rng: Option<&mut R>,
    ) -> Result<(NodeId, DecoderState), AgentError> {
        let n = g.value(response).len();
        let flat = g.reshape(response, &[n])?;
        let mut prev = vec![0.0; Action::COUNT];
        if let Some(a) = state.prev_action {
            prev[a.index()] = 1.0;
        }
        let prev = g.constant(Tensor::from_parts(vec![Action::COUNT], prev));
        let input = g.concat(&[flat, prev])?;
        let (h, c) = self.policy.step(g, input, state.h, state.c)?;
        let h_out = match rng {
            Some(r) => g.dropout(h, self.config.dropout, r)?,
            None => h,
        };
        let logits = self.head.forward(g, h_out)?;
        let p = g.softmax(logits)?;
        Ok((
            p,
            DecoderState {
                h,
                c,
                prev_action: state.prev_action,
                t: state.t + 1,
            },
        ))
    }

    /// One full decoder step from the current pose. `rng` enables train-mode dropout.
    pub fn step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        ctx: &mut EpisodeContext,
        state: &DecoderState,
        nav: &NavGraph,
        pose: &AgentPose,
        mut rng: Option<&mut R>,
    ) -> Result<StepOutput, AgentError> {
        let grid = self.visual.build_feature_grid(g, nav, pose, &mut ctx.grids)?;
        let (s, attention) = self.attend(g, ctx, state.h)?;
        let filters = self.generate_filters(g, s, rng.as_deref_mut())?;
        let response = self.dynamic_convolve(g, filters, grid)?;
        let (probs, state) = self.policy_step(g, state, response, rng)?;
        Ok(StepOutput {
            probs,
            attention,
            filters,
            response,
            state,
        })
    }

    /// Names of every parameter this agent owns, in creation order.
    pub fn param_names(store: &ParamStore) -> Vec<&str> {
        store.entries().iter().map(|e| e.name.as_str()).collect()
    }
}
