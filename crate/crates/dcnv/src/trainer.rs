//! Supervised training with sampled rollouts, early stopping, and the
//! ablation and filter-count suites.

use std::time::Instant;

use dcnv_core::adam::{AdamConfig, AdamState};
use dcnv_core::agent::{Agent, AgentConfig, AgentError};
use dcnv_core::checkpoint;
use dcnv_core::encoders::Vocabulary;
use dcnv_core::episode::{Episode, EpisodeRecord, Split};
use dcnv_core::metrics::{self, EpisodeScore, MetricsError, SplitScore};
use dcnv_core::rollout::{episode_gradients, evaluate_episode, ExecMode, RolloutConfig, RolloutError};
use dcnv_core::sim::{NavGraph, SimError};
use dcnv_core::{Gradients, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::Bundle;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("non-finite gradients at epoch {epoch}, batch {batch} (episodes {episodes:?}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        episodes: Vec<String>,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_episode_steps: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub n_filters: usize,
    pub dynamic_filters: bool,
    pub attention: bool,
    pub pretrained_embeddings: bool,
    pub instr_hidden: usize,
    pub policy_hidden: usize,
    pub bottleneck_dim: usize,
    pub attention_dim: usize,
    pub dropout: f64,
    pub absolute_elevation: bool,
    /// Execute oracle labels instead of sampled actions.
    pub teacher_forcing: bool,
    /// Worker threads for rollouts; 0 means one per core.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_episode_steps: 80,
            patience: 10,
            max_epochs: 50,
            n_filters: 4,
            dynamic_filters: true,
            attention: true,
            pretrained_embeddings: true,
            instr_hidden: 128,
            policy_hidden: 128,
            bottleneck_dim: 128,
            attention_dim: 128,
            dropout: 0.5,
            absolute_elevation: false,
            teacher_forcing: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            errs.push(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_episode_steps", self.max_episode_steps),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("n_filters", self.n_filters),
            ("instr_hidden", self.instr_hidden),
            ("policy_hidden", self.policy_hidden),
            ("bottleneck_dim", self.bottleneck_dim),
            ("attention_dim", self.attention_dim),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        errs
    }

    pub fn agent_config(&self, vocab: &Vocabulary, raw_feature_dim: usize) -> AgentConfig {
        AgentConfig {
            word_dim: vocab.dim(),
            instr_hidden: self.instr_hidden,
            policy_hidden: self.policy_hidden,
            raw_feature_dim,
            bottleneck_dim: self.bottleneck_dim,
            attention_dim: self.attention_dim,
            n_filters: self.n_filters,
            dynamic_filters: self.dynamic_filters,
            attention: self.attention,
            scratch_embeddings: !self.pretrained_embeddings,
            vocab_size: vocab.len(),
            dropout: self.dropout,
            absolute_elevation: self.absolute_elevation,
        }
    }

    /// Short name of the ablation variant these flags select.
    pub fn variant(&self) -> String {
        format!(
            "{}+{}+{}",
            if self.dynamic_filters { "dynamic" } else { "static" },
            if self.attention { "attention" } else { "last_state" },
            if self.pretrained_embeddings { "pretrained" } else { "scratch" },
        )
    }

    pub fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    #[serde(rename = "NE")]
    pub ne: f64,
    #[serde(rename = "OSR")]
    pub osr: f64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
    pub n: usize,
}

impl From<SplitScore> for ScoreRow {
    fn from(s: SplitScore) -> Self {
        Self {
            ne: s.ne,
            osr: s.osr,
            sr: s.sr,
            spl: s.spl,
            n: s.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_seen: ScoreRow,
    pub val_unseen: ScoreRow,
    pub mean_sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub param_count: usize,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_mean_sr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn best(&self) -> &EpochReport {
        &self.epochs[self.best_epoch - 1]
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub agent: Agent,
    /// Parameters of the best epoch.
    pub best: ParamStore,
}

/// Builds a freshly initialised agent; initialisation draws from `seed` only.
pub fn init_agent(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    graph: &NavGraph,
    seed: u64,
) -> Result<(Agent, ParamStore), TrainError> {
    let raw = graph
        .feature_dim()
        .ok_or_else(|| TrainError::Config(vec!["world has no visual features".into()]))?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = Agent::new(cfg.agent_config(vocab, raw), &mut store, &mut rng)?;
    Ok((agent, store))
}

/// Maps `f` over `items` on up to `threads` workers, preserving order.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> U + Sync,
) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub struct EvalResult {
    pub records: Vec<EpisodeRecord>,
    pub scores: Vec<EpisodeScore>,
    pub summary: SplitScore,
}

/// Greedy evaluation; with `oracle` the ground-truth actions are executed instead.
pub fn evaluate(
    agent: &Agent,
    store: &ParamStore,
    vocab: &Vocabulary,
    graph: &NavGraph,
    episodes: &[Episode],
    max_steps: usize,
    threads: usize,
    oracle: bool,
) -> Result<EvalResult, TrainError> {
    let records = par_map(episodes, threads, |_, e| -> Result<EpisodeRecord, TrainError> {
        if oracle {
            Ok(graph.run_oracle_rollout(e)?)
        } else {
            Ok(evaluate_episode(agent, store, vocab, graph, e, max_steps)?)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let scores = records
        .iter()
        .zip(episodes)
        .map(|(r, e)| metrics::score_episode(graph, r, e.goal()))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = metrics::aggregate(&scores)?;
    Ok(EvalResult {
        records,
        scores,
        summary,
    })
}

fn longest_oracle_rollout(graph: &NavGraph, episodes: &[Episode]) -> Result<usize, TrainError> {
    let mut longest = 0;
    for e in episodes {
        longest = longest.max(graph.run_oracle_rollout(e)?.actions.len());
    }
    Ok(longest)
}

/// Trains until `max_epochs` or until the mean validation SR stalls for `patience` epochs.
///
/// `on_epoch` sees every epoch report as soon as it is available.
pub fn train(
    cfg: &TrainConfig,
    seed: u64,
    data: &Bundle,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, TrainError> {
    let mut errs = cfg.validate();
    let train_set = data.split(Split::Train);
    let seen = data.split(Split::ValSeen);
    let unseen = data.split(Split::ValUnseen);
    for (name, set) in [("train", train_set), ("val_seen", seen), ("val_unseen", unseen)] {
        if set.is_empty() {
            errs.push(format!("{name} split is empty"));
        }
    }
    if errs.is_empty() {
        let longest = longest_oracle_rollout(&data.graph, train_set)?;
        if cfg.max_episode_steps < longest {
            errs.push(format!(
                "max_episode_steps {} is shorter than the longest oracle rollout ({longest})",
                cfg.max_episode_steps
            ));
        }
    }
    if !errs.is_empty() {
        return Err(TrainError::Config(errs));
    }

    let (agent, mut store) = init_agent(cfg, &data.vocab, &data.graph, seed)?;
    let param_count = store.trainable_scalars();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let threads = cfg.worker_threads();
    let rollout_cfg = RolloutConfig {
        mode: if cfg.teacher_forcing {
            ExecMode::Teacher
        } else {
            ExecMode::Sample
        },
        ..RolloutConfig::train(cfg.max_episode_steps)
    };

    let mut epochs = Vec::new();
    let mut best = store.clone();
    let mut best_sr = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed: u64 = rng.gen();
            let eps: Vec<&Episode> = batch.iter().map(|i| &train_set[*i]).collect();
            let frozen = &store;
            let results = par_map(&eps, threads, |i, e| {
                let mut r = ChaCha8Rng::seed_from_u64(batch_seed);
                r.set_stream(i as u64);
                episode_gradients(&agent, frozen, &data.vocab, &data.graph, e, &rollout_cfg, &mut r)
            });
            let mut grads = Gradients::new(store.len());
            for res in results {
                let res = res.map_err(|e| match e {
                    RolloutError::Numeric { .. } => TrainError::NonFinite {
                        epoch,
                        batch: b,
                        episodes: eps.iter().map(|e| e.id.clone()).collect(),
                        detail: e.to_string(),
                    },
                    other => other.into(),
                })?;
                loss_sum += res.loss;
                grads.merge(&res.gradients);
            }
            grads.scale(1.0 / eps.len() as f64);
            if !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    episodes: eps.iter().map(|e| e.id.clone()).collect(),
                    detail: "gradient contains NaN or infinity".into(),
                });
            }
            adam.step(&mut store, &grads).map_err(AgentError::from)?;
        }
        let eval = |set: &[Episode]| {
            evaluate(&agent, &store, &data.vocab, &data.graph, set, cfg.max_episode_steps, threads, false)
        };
        let vs = eval(seen)?.summary;
        let vu = eval(unseen)?.summary;
        let report = EpochReport {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            val_seen: vs.into(),
            val_unseen: vu.into(),
            mean_sr: (vs.sr + vu.sr) / 2.0,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val_seen SR {:.3}, val_unseen SR {:.3} ({:.1}s)",
            report.mean_loss,
            vs.sr,
            vu.sr,
            started.elapsed().as_secs_f64()
        );
        on_epoch(&report);
        if report.mean_sr > best_sr {
            best_sr = report.mean_sr;
            best_epoch = epoch;
            best = store.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        epochs.push(report);
        if stale >= cfg.patience {
            log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        report: TrainReport {
            variant: cfg.variant(),
            seed,
            config: cfg.clone(),
            param_count,
            epochs,
            best_epoch,
            best_mean_sr: best_sr,
            checkpoint: None,
        },
        agent,
        best,
    })
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    checkpoint::save_store(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub variant: String,
    pub n_filters: usize,
    pub param_count: usize,
    pub expected_param_count: usize,
    pub best_epoch: usize,
    pub val_seen: ScoreRow,
    pub val_unseen: ScoreRow,
}

fn suite_row(out: &TrainOutcome, expected: usize) -> SuiteRow {
    let best = out.report.best();
    SuiteRow {
        variant: out.report.variant.clone(),
        n_filters: out.report.config.n_filters,
        param_count: out.report.param_count,
        expected_param_count: expected,
        best_epoch: out.report.best_epoch,
        val_seen: best.val_seen,
        val_unseen: best.val_unseen,
    }
}

/// The four compared variants, in report order.
pub fn ablation_variants(base: &TrainConfig) -> Vec<TrainConfig> {
    let v = |dynamic_filters, attention, pretrained_embeddings| TrainConfig {
        dynamic_filters,
        attention,
        pretrained_embeddings,
        ..base.clone()
    };
    vec![
        v(false, false, true),
        v(true, false, true),
        v(true, true, false),
        v(true, true, true),
    ]
}

/// Trains each variant with the same seed and world.
pub fn run_ablation_suite(
    base: &TrainConfig,
    seed: u64,
    data: &Bundle,
    mut on_epoch: impl FnMut(&str, &EpochReport),
) -> Result<Vec<SuiteRow>, TrainError> {
    let mut rows = Vec::new();
    for cfg in ablation_variants(base) {
        let name = cfg.variant();
        let out = train(&cfg, seed, data, |r| on_epoch(&name, r))?;
        let expected = out.agent.config.expected_param_count();
        rows.push(suite_row(&out, expected));
    }
    Ok(rows)
}

pub const SWEEP_FILTERS: [usize; 5] = [1, 2, 4, 8, 16];

pub fn run_filter_sweep(
    base: &TrainConfig,
    seed: u64,
    data: &Bundle,
    filters: &[usize],
    mut on_epoch: impl FnMut(usize, &EpochReport),
) -> Result<Vec<SuiteRow>, TrainError> {
    let mut ms = filters.to_vec();
    ms.sort_unstable();
    let mut rows = Vec::new();
    for m in ms {
        let cfg = TrainConfig {
            n_filters: m,
            ..base.clone()
        };
        let out = train(&cfg, seed, data, |r| on_epoch(m, r))?;
        let expected = out.agent.config.expected_param_count();
        rows.push(suite_row(&out, expected));
    }
    Ok(rows)
}

/// `(label, split, NE, SR, OSR, SPL)` lines with a header.
pub fn suite_csv(rows: &[SuiteRow], key: &str, label: impl Fn(&SuiteRow) -> String) -> String {
    let mut out = format!("{key},split,NE,SR,OSR,SPL\n");
    for r in rows {
        for (split, s) in [("val_seen", &r.val_seen), ("val_unseen", &r.val_unseen)] {
            out.push_str(&format!(
                "{},{split},{:.6},{:.6},{:.6},{:.6}\n",
                label(r),
                s.ne,
                s.sr,
                s.osr,
                s.spl
            ));
        }
    }
    out
}
