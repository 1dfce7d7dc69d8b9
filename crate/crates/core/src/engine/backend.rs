//! Scorer backends: the traits the engine talks to plus the offline
//! oracle and synthetic implementations used for baselines and tests.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::similarity::cosine_similarity;
use crate::frame::{FrameRef, MAX_WINDOW_CAPACITY};
use crate::prompt::{IndexedPrompt, TimedText};
use crate::relevance::{format_relevance, RelevanceEntry, Score};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Transport failure or overloaded endpoint; worth retrying.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// The endpoint refused the request.
    #[error("backend rejected request: {0}")]
    Rejected(String),
    /// The endpoint answered with something that does not follow the wire contract.
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Generative,
    Similarity,
    Uniform,
    Oracle,
}

/// Decoding parameters forwarded to a generative endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        // greedy
        Self {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// One generative call for one window.
#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a IndexedPrompt,
    /// Fully rendered prompt text, including any format reminder.
    pub text: String,
    pub subtitles: &'a [TimedText],
    pub window_id: usize,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<serde_json::Value>,
}

/// A model that reads an indexed window prompt and writes relevance text.
pub trait GenerativeBackend: Send + Sync {
    fn tag(&self) -> &str;

    fn kind(&self) -> BackendKind {
        BackendKind::Generative
    }

    fn max_window(&self) -> usize {
        MAX_WINDOW_CAPACITY
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError>;
}

/// Per-frame query similarity.
pub trait SimilarityBackend: Send + Sync {
    fn tag(&self) -> &str;

    fn kind(&self) -> BackendKind {
        BackendKind::Similarity
    }

    /// One value in [-1, 1] per frame, in input order.
    fn similarities(&self, query: &str, frames: &[FrameRef]) -> Result<Vec<f64>, BackendError>;
}

/// Text and image embedding model.
pub trait Embedder: Send + Sync {
    fn tag(&self) -> &str;
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<Vec<f32>>, BackendError>;
}

/// Similarity via cosine between a query embedding and frame embeddings.
pub struct EmbeddingSimilarity<E> {
    embedder: E,
}

impl<E: Embedder> EmbeddingSimilarity<E> {
    pub fn new(embedder: E) -> Self {
        Self { embedder }
    }
}

impl<E: Embedder> SimilarityBackend for EmbeddingSimilarity<E> {
    fn tag(&self) -> &str {
        self.embedder.tag()
    }

    fn similarities(&self, query: &str, frames: &[FrameRef]) -> Result<Vec<f64>, BackendError> {
        let q = self
            .embedder
            .embed_texts(&[query.to_string()])?
            .pop()
            .ok_or_else(|| BackendError::Protocol("no query embedding returned".into()))?;
        let vectors = self.embedder.embed_frames(frames)?;
        if vectors.len() != frames.len() {
            return Err(BackendError::Protocol(format!(
                "{} embeddings for {} frames",
                vectors.len(),
                frames.len()
            )));
        }
        vectors
            .iter()
            .map(|v| cosine_similarity(&q, v).map_err(|e| BackendError::Protocol(e.to_string())))
            .collect()
    }
}

/// Generative stand-in that knows the true relevance of every frame.
///
/// It answers in the canonical relevance grammar, merging runs of
/// consecutive equally scored frames into spans, best spans first.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    relevant: BTreeMap<usize, Score>,
}

impl OracleScorer {
    pub fn new(relevant: BTreeMap<usize, Score>) -> Self {
        Self { relevant }
    }

    /// Every listed pool frame at the top score.
    pub fn planted<I: IntoIterator<Item = usize>>(globals: I) -> Self {
        Self::new(globals.into_iter().map(|g| (g, Score::TOP)).collect())
    }

    pub fn relevant(&self) -> &BTreeMap<usize, Score> {
        &self.relevant
    }

    /// The answer this oracle gives for a window's `(local, frame)` pairs.
    pub fn answer<'a, I>(&self, frames: I) -> String
    where
        I: IntoIterator<Item = (usize, &'a FrameRef)>,
    {
        let mut spans: Vec<RelevanceEntry> = Vec::new();
        for (local, frame) in frames {
            let Some(&score) = self.relevant.get(&frame.global_index) else {
                continue;
            };
            if !score.is_relevant() {
                continue;
            }
            match spans.last_mut() {
                Some(last) if last.end_local + 1 == local && last.score == score => {
                    last.end_local = local;
                }
                _ => spans.push(RelevanceEntry::frame(local, score)),
            }
        }
        spans.sort_by(|a, b| b.score.cmp(&a.score).then(a.start_local.cmp(&b.start_local)));
        format_relevance(&spans)
    }
}

impl GenerativeBackend for OracleScorer {
    fn tag(&self) -> &str {
        "oracle"
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        Ok(Completion {
            text: self.answer(request.prompt.frames()),
            usage: None,
        })
    }
}

/// Embedder that puts planted frames on the query direction and everything else orthogonal to it.
#[derive(Debug, Clone, Default)]
pub struct OracleEmbedder {
    relevant: BTreeSet<usize>,
}

impl OracleEmbedder {
    pub fn new<I: IntoIterator<Item = usize>>(globals: I) -> Self {
        Self {
            relevant: globals.into_iter().collect(),
        }
    }
}

impl Embedder for OracleEmbedder {
    fn tag(&self) -> &str {
        "oracle-similarity"
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(texts.iter().map(|_| vec![1.0, 0.0]).collect())
    }

    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(frames
            .iter()
            .map(|f| {
                if self.relevant.contains(&f.global_index) {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            })
            .collect())
    }
}

/// Imperfect similarity model for offline comparisons.
///
/// Each frame gets a seeded cosine to the query: planted frames draw from
/// `relevant_range`, all others from `background_range`. Overlapping ranges
/// make the ranking noisy the way real image-text similarity is.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    relevant: BTreeSet<usize>,
    seed: u64,
    pub relevant_range: (f64, f64),
    pub background_range: (f64, f64),
}

impl SyntheticEmbedder {
    pub fn new<I: IntoIterator<Item = usize>>(globals: I, seed: u64) -> Self {
        Self {
            relevant: globals.into_iter().collect(),
            seed,
            relevant_range: (0.25, 0.9),
            background_range: (-0.1, 0.45),
        }
    }

    fn cosine_for(&self, global_index: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (global_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (lo, hi) = if self.relevant.contains(&global_index) {
            self.relevant_range
        } else {
            self.background_range
        };
        rng.gen_range(lo..hi)
    }
}

impl Embedder for SyntheticEmbedder {
    fn tag(&self) -> &str {
        "synthetic-similarity"
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(texts.iter().map(|_| vec![1.0, 0.0]).collect())
    }

    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(frames
            .iter()
            .map(|f| {
                let c = self.cosine_for(f.global_index);
                vec![c as f32, (1.0 - c * c).sqrt() as f32]
            })
            .collect())
    }
}
