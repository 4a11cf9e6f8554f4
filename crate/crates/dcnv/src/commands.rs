//! Subcommand implementations. Each writes its files, persists the resolved
//! config beside them, and returns the machine-readable text for stdout.

use std::path::{Path, PathBuf};

use dcnv_core::checkpoint::{self, CheckpointError};
use dcnv_core::episode::{EpisodeRecord, Split};
use dcnv_core::metrics::{EpisodeScore, SplitScore};
use dcnv_core::rollout::{rollout, RolloutConfig};
use dcnv_core::sim::NavGraph;
use dcnv_core::world::{generate_world, WorldError};
use dcnv_core::Graph;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, RESOLVED_CONFIG_FILE};
use crate::io::{self, Bundle, IoError};
use crate::trainer::{self, SuiteRow, TrainError, SWEEP_FILTERS};

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Train(TrainError::Config(_)) => 1,
            CliError::World(WorldError::InvalidSpec(_)) => 1,
            _ => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(v) => CliError::Validation(v.join("\n")),
            ConfigError::Io(e) => CliError::Validation(e.to_string()),
        }
    }
}

fn require_valid(errs: Vec<String>) -> Result<(), CliError> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(errs.join("\n")))
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.paths
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Validation("no output directory given (paths.out_dir or --out)".into()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("report serializes") + "\n";
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn load_bundle(cfg: &RunConfig) -> Result<Bundle, CliError> {
    let dir = cfg.paths.world_dir.as_ref().expect("checked by check_paths");
    Ok(io::load_bundle(dir, cfg.paths.stopwords.as_deref())?)
}

pub fn gen_world(cfg: &mut RunConfig) -> Result<String, CliError> {
    let seed = cfg.resolve_seed()?;
    let dir = out_dir(cfg)?;
    let world = generate_world(&cfg.world.spec(seed))?;
    let manifest = io::save_world_dir(&world, &dir)?;
    cfg.persist(&dir)?;
    log::info!("wrote {} files to {}", manifest.len(), dir.display());
    Ok(serde_json::to_string(&json!({ "seed": seed, "files": manifest })).unwrap())
}

pub fn train(cfg: &mut RunConfig) -> Result<String, CliError> {
    let seed = cfg.resolve_seed()?;
    let mut errs = cfg.check_paths(true, false);
    errs.extend(cfg.train.validate());
    let dir = match out_dir(cfg) {
        Ok(d) => Some(d),
        Err(e) => {
            errs.push(e.to_string());
            None
        }
    };
    require_valid(errs)?;
    let dir = dir.unwrap();
    let data = load_bundle(cfg)?;
    std::fs::create_dir_all(&dir).map_err(|source| IoError::Fs {
        path: dir.clone(),
        source,
    })?;
    cfg.persist(&dir)?;
    let out = trainer::train(&cfg.train, seed, &data, |r| {
        println!("{}", serde_json::to_string(r).unwrap());
    })?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    io::write_atomic(&ckpt, &trainer::checkpoint_bytes(&out.best))?;
    let mut report = out.report;
    report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(serde_json::to_string(&json!({
        "report": dir.join(REPORT_FILE),
        "checkpoint": ckpt,
        "best_epoch": report.best_epoch,
        "best_mean_sr": report.best_mean_sr,
        "variant": report.variant,
    }))
    .unwrap())
}

/// Builds the agent described by `cfg` and loads checkpoint weights into it.
pub fn load_agent(
    cfg: &RunConfig,
    data: &Bundle,
) -> Result<(dcnv_core::agent::Agent, dcnv_core::ParamStore), CliError> {
    let path = cfg.paths.checkpoint.clone().expect("checked by check_paths");
    let (agent, mut store) = trainer::init_agent(&cfg.train, &data.vocab, &data.graph, 0)?;
    let bytes = io::read_bytes(&path)?;
    checkpoint::load_into_store(&mut store, &bytes)
        .map_err(|source| CliError::Checkpoint { path, source })?;
    Ok((agent, store))
}

pub fn trajectory_json(
    g: &NavGraph,
    rec: &EpisodeRecord,
    score: &EpisodeScore,
) -> Value {
    json!({
        "episode_id": rec.episode_id,
        "instruction": rec.instruction,
        "gt_path": rec.gt_path.iter().map(|n| g.node(*n).id.as_str()).collect::<Vec<_>>(),
        "actions": rec.actions.iter().map(|a| a.name()).collect::<Vec<_>>(),
        "poses": rec.poses.iter()
            .map(|p| json!([g.node(p.node).id, p.heading_bin, p.elev_bin]))
            .collect::<Vec<_>>(),
        "truncated": rec.truncated,
        "NE": score.ne_m,
        "NE_straight": score.ne_straight_m,
        "success": score.success,
        "oracle_success": score.oracle_success,
        "SPL": score.spl,
        "path_length": score.path_length_m,
        "shortest_length": score.shortest_length_m,
    })
}

pub fn summary_json(split: Split, s: &SplitScore) -> Value {
    json!({ "split": split.name(), "n": s.n, "NE": s.ne, "SR": s.sr, "OSR": s.osr, "SPL": s.spl })
}

pub fn eval(cfg: &mut RunConfig, split: Split, oracle: bool) -> Result<String, CliError> {
    require_valid(cfg.check_paths(true, !oracle))?;
    let dir = out_dir(cfg)?;
    let data = load_bundle(cfg)?;
    let episodes = data.split(split);
    if episodes.is_empty() {
        return Err(CliError::Validation(format!("split {split} has no episodes")));
    }
    let threads = cfg.train.worker_threads();
    let res = if oracle {
        let (agent, store) = trainer::init_agent(&cfg.train, &data.vocab, &data.graph, 0)?;
        trainer::evaluate(&agent, &store, &data.vocab, &data.graph, episodes, cfg.train.max_episode_steps, threads, true)?
    } else {
        let (agent, store) = load_agent(cfg, &data)?;
        trainer::evaluate(&agent, &store, &data.vocab, &data.graph, episodes, cfg.train.max_episode_steps, threads, false)?
    };
    let mut lines = String::new();
    for (r, s) in res.records.iter().zip(&res.scores) {
        lines.push_str(&serde_json::to_string(&trajectory_json(&data.graph, r, s)).unwrap());
        lines.push('\n');
    }
    std::fs::create_dir_all(&dir).map_err(|source| IoError::Fs {
        path: dir.clone(),
        source,
    })?;
    io::write_atomic(&dir.join(format!("trajectories_{split}.jsonl")), lines.as_bytes())?;
    let summary = summary_json(split, &res.summary);
    write_json(&dir.join(format!("summary_{split}.json")), &summary)?;
    cfg.persist(&dir)?;
    Ok(summary.to_string())
}

/// Runs the listed episodes greedily and dumps the action distribution at every step.
pub fn rollout_cmd(cfg: &mut RunConfig, split: Split, ids: &[String]) -> Result<String, CliError> {
    require_valid(cfg.check_paths(true, true))?;
    let data = load_bundle(cfg)?;
    let (agent, store) = load_agent(cfg, &data)?;
    let episodes: Vec<_> = data
        .split(split)
        .iter()
        .filter(|e| ids.is_empty() || ids.contains(&e.id))
        .collect();
    if episodes.is_empty() {
        return Err(CliError::Validation(format!("no matching episodes in split {split}")));
    }
    let mut out = String::new();
    for e in episodes {
        let mut g = Graph::new(&store);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let cfg_r = RolloutConfig::eval(cfg.train.max_episode_steps);
        let r = rollout(&agent, &mut g, &data.vocab, &data.graph, e, &cfg_r, &mut rng)
            .map_err(TrainError::from)?;
        let score = dcnv_core::metrics::score_episode(&data.graph, &r.record, e.goal())
            .map_err(TrainError::from)?;
        let mut v = trajectory_json(&data.graph, &r.record, &score);
        let probs: Vec<Vec<f64>> = r.probs.iter().map(|p| g.value(*p).data().to_vec()).collect();
        v["probs"] = json!(probs);
        v["tokens"] = json!(data.vocab.kept_tokens(&e.instruction));
        out.push_str(&v.to_string());
        out.push('\n');
    }
    if let Some(dir) = &cfg.paths.out_dir {
        io::write_atomic(&dir.join(format!("rollout_{split}.jsonl")), out.as_bytes())?;
        cfg.persist(dir)?;
    }
    Ok(out.trim_end().to_string())
}

fn suite_outputs(
    dir: &Path,
    stem: &str,
    key: &str,
    rows: &[SuiteRow],
    label: impl Fn(&SuiteRow) -> String,
    extra: Value,
) -> Result<String, CliError> {
    io::write_atomic(
        &dir.join(format!("{stem}.csv")),
        trainer::suite_csv(rows, key, label).as_bytes(),
    )?;
    let mut v = json!({ "rows": rows });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    write_json(&dir.join(format!("{stem}.json")), &v)?;
    Ok(v.to_string())
}

pub fn ablation(cfg: &mut RunConfig) -> Result<String, CliError> {
    let seed = cfg.resolve_seed()?;
    let mut errs = cfg.check_paths(true, false);
    errs.extend(cfg.train.validate());
    require_valid(errs)?;
    let dir = out_dir(cfg)?;
    let data = load_bundle(cfg)?;
    cfg.persist(&dir)?;
    let rows = trainer::run_ablation_suite(&cfg.train, seed, &data, |name, r| {
        println!("{}", json!({ "variant": name, "epoch": r }));
    })?;
    suite_outputs(&dir, "ablation", "variant", &rows, |r| r.variant.clone(), json!({ "seed": seed }))
}

pub fn sweep_filters(cfg: &mut RunConfig, filters: Option<Vec<usize>>) -> Result<String, CliError> {
    let seed = cfg.resolve_seed()?;
    let mut errs = cfg.check_paths(true, false);
    errs.extend(cfg.train.validate());
    let filters = filters.unwrap_or_else(|| SWEEP_FILTERS.to_vec());
    if filters.contains(&0) {
        errs.push("filter counts must be positive".into());
    }
    require_valid(errs)?;
    let dir = out_dir(cfg)?;
    let world_dir = cfg.paths.world_dir.clone().unwrap();
    let hash_before = io::world_hash(&world_dir)?;
    let data = load_bundle(cfg)?;
    cfg.persist(&dir)?;
    let rows = trainer::run_filter_sweep(&cfg.train, seed, &data, &filters, |m, r| {
        println!("{}", json!({ "n_filters": m, "epoch": r }));
    })?;
    let hash_after = io::world_hash(&world_dir)?;
    if hash_before != hash_after {
        return Err(CliError::Validation("world files changed during the sweep".into()));
    }
    let audit_ok = rows.iter().all(|r| r.param_count == r.expected_param_count);
    suite_outputs(
        &dir,
        "sweep",
        "M",
        &rows,
        |r| r.n_filters.to_string(),
        json!({ "seed": seed, "world_hash": hash_after, "param_audit_ok": audit_ok }),
    )
}

/// Reads the resolved config stored next to a checkpoint, if there is one.
pub fn config_beside(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(RESOLVED_CONFIG_FILE);
    p.is_file().then_some(p)
}
