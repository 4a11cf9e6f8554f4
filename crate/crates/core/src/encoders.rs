//! Instruction encoder (tokens → embeddings → LSTM states) and the
//! agent-relative panoramic grid.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, LstmCell};
use crate::params::ParamId;
use crate::sim::{wrap_angle, AgentPose, NavGraph, SimError, BIN_ANGLE, GRID_CELLS, HEADING_BINS};
use crate::tensor::{Tensor, TensorError};

/// The bundled English stopword list, one word per line.
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("instruction has no tokens left after stopword filtering: {0:?}")]
    EmptyInstruction(String),
    #[error("embedding for `{word}` has {got} values, expected {expected}")]
    EmbeddingWidth {
        word: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding for `{0}` is not finite")]
    EmbeddingNonFinite(String),
    #[error("duplicate embedding for `{0}`")]
    DuplicateWord(String),
    #[error("embedding table is empty")]
    NoEmbeddings,
    #[error("node `{0}` has no visual features")]
    MissingFeatures(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Lowercases and splits on anything that is not a letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// One word per line; blank lines and `#` comments are skipped.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

/// Word embeddings plus the stopword set. Unknown words map to a zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    words: Vec<String>,
    embeddings: Tensor,
    stopwords: BTreeSet<String>,
}

impl Vocabulary {
    pub fn new(
        entries: Vec<(String, Vec<f64>)>,
        stopwords: BTreeSet<String>,
    ) -> Result<Self, EncodeError> {
        let dim = entries.first().ok_or(EncodeError::NoEmbeddings)?.1.len();
        let mut index = BTreeMap::new();
        let mut words = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (word, v) in entries {
            if v.len() != dim {
                return Err(EncodeError::EmbeddingWidth {
                    word,
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EncodeError::EmbeddingNonFinite(word));
            }
            if index.insert(word.clone(), words.len()).is_some() {
                return Err(EncodeError::DuplicateWord(word));
            }
            words.push(word);
            data.extend(v);
        }
        let embeddings = Tensor::from_parts(vec![words.len(), dim], data);
        Ok(Self {
            index,
            words,
            embeddings,
            stopwords,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    /// Tokens that survive stopword filtering.
    pub fn kept_tokens(&self, text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .filter(|t| !self.is_stopword(t))
            .collect()
    }
}

/// Where token vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Frozen rows of the vocabulary table.
    Pretrained,
    /// A trainable `[|V|, d_word]` parameter.
    Learned(ParamId),
}

#[derive(Debug, Clone, Copy)]
pub struct InstructionEncoder {
    pub lstm: LstmCell,
    pub embedding: EmbeddingSource,
}

/// `X` with one LSTM state per kept token.
#[derive(Debug, Clone)]
pub struct InstructionEncoding {
    pub x: NodeId,
    pub tokens: Vec<String>,
}

impl InstructionEncoder {
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        vocab: &Vocabulary,
        text: &str,
    ) -> Result<InstructionEncoding, EncodeError> {
        let tokens = vocab.kept_tokens(text);
        if tokens.is_empty() {
            return Err(EncodeError::EmptyInstruction(text.to_string()));
        }
        let rows: Vec<Option<usize>> = tokens.iter().map(|t| vocab.lookup(t)).collect();
        let embedded = match self.embedding {
            EmbeddingSource::Pretrained => {
                let d = vocab.dim();
                let mut data = vec![0.0; rows.len() * d];
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        data[i * d..(i + 1) * d].copy_from_slice(vocab.embeddings().row(*r));
                    }
                }
                g.constant(Tensor::from_parts(vec![rows.len(), d], data))
            }
            EmbeddingSource::Learned(p) => {
                let table = g.param(p);
                g.gather_rows(table, &rows)?
            }
        };
        let (mut h, mut c) = self.lstm.zero_state(g);
        let mut states = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            let x = g.row(embedded, i)?;
            (h, c) = self.lstm.step(g, x, h, c)?;
            states.push(h);
        }
        let x = g.stack_rows(&states)?;
        Ok(InstructionEncoding { x, tokens })
    }
}

/// Elevation angle of grid row `r` (0 bottom, 1 middle, 2 top).
pub fn row_elevation(r: usize) -> f64 {
    (r as f64 - 1.0) * BIN_ANGLE
}

/// Raw-grid row feeding output cell `cell` for an agent facing `heading_bin`.
pub fn source_row(heading_bin: u8, cell: usize) -> usize {
    let rel = cell / 3;
    let row = cell % 3;
    ((heading_bin as usize + rel) % HEADING_BINS as usize) * 3 + row
}

/// `(sin φ, cos φ, sin θ)` for every cell, relative to the agent's view.
pub fn coord_features(pose: &AgentPose, absolute_elevation: bool) -> Tensor {
    let mut data = Vec::with_capacity(GRID_CELLS * 3);
    for cell in 0..GRID_CELLS {
        let phi = wrap_angle((cell / 3) as f64 * BIN_ANGLE);
        let mut theta = row_elevation(cell % 3);
        if !absolute_elevation {
            theta -= pose.elevation();
        }
        data.extend([libm::sin(phi), libm::cos(phi), libm::sin(theta)]);
    }
    Tensor::from_parts(vec![GRID_CELLS, 3], data)
}

/// Bottleneck projection of raw panoramas plus coordinate channels.
#[derive(Debug, Clone, Copy)]
pub struct VisualEncoder {
    pub bottleneck: Linear,
    pub absolute_elevation: bool,
}

/// Bottlenecked grids already computed inside one graph, keyed by node.
pub type GridCache = BTreeMap<usize, NodeId>;

impl VisualEncoder {
    /// `[36, C + 3]` grid aligned so that row block 0 is straight ahead.
    pub fn build_feature_grid(
        &self,
        g: &mut Graph<'_>,
        nav: &NavGraph,
        pose: &AgentPose,
        cache: &mut GridCache,
    ) -> Result<NodeId, EncodeError> {
        nav.validate_pose(pose)?;
        let projected = match cache.get(&pose.node) {
            Some(n) => *n,
            None => {
                let node = nav.node(pose.node);
                let raw = node
                    .features
                    .as_ref()
                    .ok_or_else(|| EncodeError::MissingFeatures(node.id.clone()))?;
                let raw = g.constant(raw.clone());
                let lin = self.bottleneck.forward(g, raw)?;
                let n = g.relu(lin)?;
                cache.insert(pose.node, n);
                n
            }
        };
        let rows: Vec<Option<usize>> = (0..GRID_CELLS)
            .map(|c| Some(source_row(pose.heading_bin, c)))
            .collect();
        let rolled = g.gather_rows(projected, &rows)?;
        let coords = g.constant(coord_features(pose, self.absolute_elevation));
        Ok(g.concat_cols(rolled, coords)?)
    }
}
