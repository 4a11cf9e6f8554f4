//! On-disk formats: world graphs, embedding tables, R2R-style episode files,
//! checkpoints and hashed manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dcnv_core::encoders::{parse_stopwords, Vocabulary, DEFAULT_STOPWORDS};
use dcnv_core::episode::{Episode, Split};
use dcnv_core::sim::{NavGraph, NavNode, SimError, BIN_ANGLE, GRID_CELLS};
use dcnv_core::world::{heading_to_bin, World};
use dcnv_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const WORLD_FILE: &str = "world.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

pub fn episodes_file(split: Split) -> String {
    format!("episodes_{}.json", split.name())
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("episode {episode}: {message}")]
    Episode { episode: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(fs_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(fs_err(path))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(fs_err(&tmp))?;
    f.write_all(bytes).map_err(fs_err(&tmp))?;
    f.sync_all().map_err(fs_err(&tmp))?;
    fs::rename(&tmp, path).map_err(fs_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn manifest_entry(dir: &Path, file: &str) -> Result<ManifestEntry, IoError> {
    let bytes = read_bytes(&dir.join(file))?;
    Ok(ManifestEntry {
        file: file.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

// ---- world graph ----

#[derive(Serialize, Deserialize)]
struct WorldNodeJson {
    id: String,
    pos: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WorldJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    nodes: Vec<WorldNodeJson>,
    edges: Vec<(String, String)>,
}

fn encode_features(t: &Tensor) -> String {
    let mut raw = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(raw)
}

fn decode_features(id: &str, text: &str, dim: usize) -> Result<Tensor, IoError> {
    let bad = |m: String| IoError::Format(format!("features of node `{id}`: {m}"));
    let raw = B64.decode(text).map_err(|e| bad(e.to_string()))?;
    if raw.len() != GRID_CELLS * dim * 4 {
        return Err(bad(format!(
            "{} bytes, expected {} for a 36 x {dim} f32 grid",
            raw.len(),
            GRID_CELLS * dim * 4
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![GRID_CELLS, dim], data).map_err(|e| bad(e.to_string()))
}

pub fn world_to_json(g: &NavGraph) -> String {
    let nodes = g
        .nodes()
        .iter()
        .map(|n| WorldNodeJson {
            id: n.id.clone(),
            pos: n.pos,
            features: n.features.as_ref().map(encode_features),
        })
        .collect();
    let edges = g
        .edges()
        .iter()
        .map(|(a, b)| (g.node(*a).id.clone(), g.node(*b).id.clone()))
        .collect();
    let w = WorldJson {
        feature_dim: g.feature_dim(),
        nodes,
        edges,
    };
    serde_json::to_string(&w).expect("world serializes")
}

pub fn world_from_json(text: &str, origin: &str) -> Result<NavGraph, IoError> {
    let w: WorldJson = serde_json::from_str(text).map_err(|source| IoError::Json {
        path: origin.to_string(),
        source,
    })?;
    let mut nodes = Vec::with_capacity(w.nodes.len());
    for n in w.nodes {
        let features = match (&n.features, w.feature_dim) {
            (Some(f), Some(dim)) => Some(decode_features(&n.id, f, dim)?),
            (Some(_), None) => {
                return Err(IoError::Format(format!(
                    "{origin}: node `{}` has features but the file has no feature_dim",
                    n.id
                )))
            }
            (None, _) => None,
        };
        nodes.push(NavNode {
            id: n.id,
            pos: n.pos,
            features,
        });
    }
    Ok(NavGraph::new(nodes, &w.edges)?)
}

pub fn load_world(path: &Path) -> Result<NavGraph, IoError> {
    world_from_json(&read_to_string(path)?, &path.display().to_string())
}

// ---- embeddings ----

/// `word v1 ... vk`, one word per line.
pub fn embeddings_to_text(entries: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    for (w, v) in entries {
        out.push_str(w);
        for x in v {
            out.push(' ');
            out.push_str(&format!("{x}"));
        }
        out.push('\n');
    }
    out
}

/// Parses the whitespace-separated text format. A leading `count dim` header line is skipped.
pub fn parse_embeddings(text: &str) -> Result<Vec<(String, Vec<f64>)>, IoError> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| IoError::Format(format!("embeddings line {}: {e}", i + 1)))?;
        if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() {
            continue;
        }
        if values.is_empty() {
            return Err(IoError::Format(format!("embeddings line {}: no values", i + 1)));
        }
        if let Some((_, first)) = out.first() {
            if first.len() != values.len() {
                return Err(IoError::Format(format!(
                    "embeddings line {}: {} values, expected {}",
                    i + 1,
                    values.len(),
                    first.len()
                )));
            }
        }
        out.push((word.to_string(), values));
    }
    Ok(out)
}

pub fn load_vocabulary(embeddings: &Path, stopwords: Option<&Path>) -> Result<Vocabulary, IoError> {
    let entries = parse_embeddings(&read_to_string(embeddings)?)?;
    let stop = match stopwords {
        Some(p) => parse_stopwords(&read_to_string(p)?),
        None => parse_stopwords(DEFAULT_STOPWORDS),
    };
    Vocabulary::new(entries, stop)
        .map_err(|e| IoError::Format(format!("{}: {e}", embeddings.display())))
}

// ---- episodes ----

#[derive(Serialize)]
struct R2rRecord<'a> {
    distance: f64,
    scan: &'a str,
    path_id: u64,
    path: Vec<&'a str>,
    heading: f64,
    instructions: Vec<&'a str>,
}

/// Groups episodes sharing a path into R2R records, in first-appearance order.
pub fn episodes_to_r2r(episodes: &[Episode], g: &NavGraph) -> Result<String, IoError> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: BTreeMap<u64, Vec<&Episode>> = BTreeMap::new();
    for e in episodes {
        let group = groups.entry(e.path_id).or_default();
        if group.is_empty() {
            order.push(e.path_id);
        }
        group.push(e);
    }
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let group = &groups[&id];
        let first = group[0];
        let mut distance = 0.0;
        for w in first.path.windows(2) {
            distance += g.edge_length(w[0], w[1]).ok_or(SimError::NotAdjacent(w[0], w[1]))?;
        }
        records.push(R2rRecord {
            distance,
            scan: "synthetic",
            path_id: id,
            path: first.path.iter().map(|n| g.node(*n).id.as_str()).collect(),
            heading: first.start_heading as f64 * BIN_ANGLE,
            instructions: group.iter().map(|e| e.instruction.as_str()).collect(),
        });
    }
    Ok(serde_json::to_string_pretty(&records).expect("episodes serialize"))
}

/// Parses an R2R-style JSON array against `g`; one episode per instruction.
pub fn load_r2r_format(text: &str, g: &NavGraph, split: Split) -> Result<Vec<Episode>, IoError> {
    let root: Value = serde_json::from_str(text).map_err(|source| IoError::Json {
        path: format!("{split} episodes"),
        source,
    })?;
    let records = root
        .as_array()
        .ok_or_else(|| IoError::Format(format!("{split} episodes: expected a JSON array")))?;
    let mut out = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let path_id = rec.get("path_id").and_then(Value::as_u64);
        let label = path_id.map_or_else(|| format!("#{i}"), |p| p.to_string());
        let err = |message: String| IoError::Episode {
            episode: label.clone(),
            message,
        };
        let path_id = path_id.ok_or_else(|| err("missing or non-integer field `path_id`".into()))?;
        let heading = rec
            .get("heading")
            .and_then(Value::as_f64)
            .ok_or_else(|| err("missing or non-numeric field `heading`".into()))?;
        let ids = rec
            .get("path")
            .and_then(Value::as_array)
            .ok_or_else(|| err("missing field `path`".into()))?;
        let instructions = rec
            .get("instructions")
            .and_then(Value::as_array)
            .ok_or_else(|| err("missing field `instructions`".into()))?;
        let mut path = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_str().ok_or_else(|| err("path entries must be strings".into()))?;
            path.push(g.index_of(id).map_err(|e| err(e.to_string()))?);
        }
        g.validate_path(&path).map_err(|e| err(e.to_string()))?;
        for (k, text) in instructions.iter().enumerate() {
            let text = text.as_str().ok_or_else(|| err("instructions must be strings".into()))?;
            out.push(Episode {
                id: format!("{path_id}_{k}"),
                path_id,
                path: path.clone(),
                start_heading: heading_to_bin(heading),
                instruction: text.to_string(),
                split,
            });
        }
    }
    Ok(out)
}

// ---- bundles ----

/// A graph, its vocabulary and all three splits, as stored in one directory.
pub struct Bundle {
    pub graph: NavGraph,
    pub vocab: Vocabulary,
    pub splits: BTreeMap<Split, Vec<Episode>>,
}

impl Bundle {
    pub fn split(&self, s: Split) -> &[Episode] {
        self.splits.get(&s).map_or(&[], Vec::as_slice)
    }
}

/// Serialized world files as `(file name, contents)`, in manifest order.
pub fn world_files(world: &World) -> Result<Vec<(String, Vec<u8>)>, IoError> {
    let mut files = vec![
        (WORLD_FILE.to_string(), world_to_json(&world.graph).into_bytes()),
        (EMBEDDINGS_FILE.to_string(), embeddings_to_text(&world.embeddings).into_bytes()),
    ];
    for split in Split::ALL {
        let eps: Vec<Episode> = world.split(split).cloned().collect();
        files.push((episodes_file(split), episodes_to_r2r(&eps, &world.graph)?.into_bytes()));
    }
    Ok(files)
}

pub fn save_world_dir(world: &World, dir: &Path) -> Result<Vec<ManifestEntry>, IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let mut manifest = Vec::new();
    for (name, bytes) in world_files(world)? {
        write_atomic(&dir.join(&name), &bytes)?;
        manifest.push(ManifestEntry {
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            file: name,
        });
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path, stopwords: Option<&Path>) -> Result<Bundle, IoError> {
    let graph = load_world(&dir.join(WORLD_FILE))?;
    let vocab = load_vocabulary(&dir.join(EMBEDDINGS_FILE), stopwords)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let path = dir.join(episodes_file(split));
        let eps = load_r2r_format(&read_to_string(&path)?, &graph, split)?;
        splits.insert(split, eps);
    }
    Ok(Bundle {
        graph,
        vocab,
        splits,
    })
}

/// Combined hash of the five world files, for checking that runs share data.
pub fn world_hash(dir: &Path) -> Result<String, IoError> {
    let mut h = Sha256::new();
    let mut names = vec![WORLD_FILE.to_string(), EMBEDDINGS_FILE.to_string()];
    names.extend(Split::ALL.iter().map(|s| episodes_file(*s)));
    for n in names {
        h.update(n.as_bytes());
        h.update(read_bytes(&dir.join(&n))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
