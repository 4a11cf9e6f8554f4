//! Run configuration: one JSON file, overridable from the command line,
//! persisted in resolved form next to every output.

use std::path::{Path, PathBuf};

use dcnv_core::world::WorldSpec;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::trainer::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const SEED_ENV: &str = "DCNV_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub rooms_x: usize,
    pub rooms_y: usize,
    pub room_size: f64,
    pub n_object_tags: usize,
    pub feature_dim: usize,
    pub train_episodes: usize,
    pub val_seen_episodes: usize,
    pub val_unseen_episodes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = WorldSpec::default();
        Self {
            rooms_x: s.rooms_x,
            rooms_y: s.rooms_y,
            room_size: s.room_size,
            n_object_tags: s.n_object_tags,
            feature_dim: s.feature_dim,
            train_episodes: s.train_episodes,
            val_seen_episodes: s.val_seen_episodes,
            val_unseen_episodes: s.val_unseen_episodes,
        }
    }
}

impl WorldConfig {
    pub fn spec(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            seed,
            rooms_x: self.rooms_x,
            rooms_y: self.rooms_y,
            room_size: self.room_size,
            n_object_tags: self.n_object_tags,
            feature_dim: self.feature_dim,
            train_episodes: self.train_episodes,
            val_seen_episodes: self.val_seen_episodes,
            val_unseen_episodes: self.val_unseen_episodes,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the world, embeddings and episode files.
    pub world_dir: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = io::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(vec![format!("{}: {e}", path.display())]))
    }

    /// Fills the seed from the environment, or from the clock as a last resort.
    pub fn resolve_seed(&mut self) -> Result<u64, ConfigError> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        let seed = match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| ConfigError::Invalid(vec![format!("{SEED_ENV}={v:?} is not a u64")]))?,
            Err(_) => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_nanos() as u64),
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn persist(&self, dir: &Path) -> Result<(), IoError> {
        io::write_atomic(&dir.join(RESOLVED_CONFIG_FILE), self.to_json().as_bytes())
    }

    /// Checks that every path the command needs exists, reporting all problems at once.
    pub fn check_paths(&self, need_world: bool, need_checkpoint: bool) -> Vec<String> {
        let mut errs = Vec::new();
        if need_world {
            match &self.paths.world_dir {
                None => errs.push("no world directory given (paths.world_dir or --world)".into()),
                Some(d) => {
                    let mut files = vec![io::WORLD_FILE.to_string(), io::EMBEDDINGS_FILE.to_string()];
                    files.extend(dcnv_core::episode::Split::ALL.iter().map(|s| io::episodes_file(*s)));
                    for f in files {
                        if !d.join(&f).is_file() {
                            errs.push(format!("missing {}", d.join(f).display()));
                        }
                    }
                }
            }
        }
        if let Some(s) = &self.paths.stopwords {
            if !s.is_file() {
                errs.push(format!("stopword file {} does not exist", s.display()));
            }
        }
        if need_checkpoint {
            match &self.paths.checkpoint {
                None => errs.push("no checkpoint given (paths.checkpoint or --checkpoint)".into()),
                Some(c) if !c.is_file() => errs.push(format!("checkpoint {} does not exist", c.display())),
                _ => {}
            }
        }
        errs
    }
}
