//! Window scoring, deterministic merging and top-K selection.
//!
//! A run partitions the candidate pool into windows, scores the windows
//! concurrently (bounded by `jobs`), merges the per-window results behind a
//! barrier and keeps `K = min(N_ret, N_ctx)` frames.

pub mod backend;
mod plan_file;
pub mod remote;
pub mod scored;
pub mod similarity;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendError, BackendKind, Completion, CompletionRequest, DecodeParams, Embedder,
    EmbeddingSimilarity, GenerativeBackend, OracleEmbedder, OracleScorer, SimilarityBackend,
    SyntheticEmbedder,
};
pub use plan_file::{PlanFile, PlanProvenance, PlannedFrame, PLAN_SCHEMA_VERSION};
pub use scored::{
    merge_window_results, rank_order, select_top_k, uniform_indices, DedupPolicy, EmissionOrder,
    Relevance, SamplePlan, ScoredFrame, ScoredFrameSet, WindowProvenance,
};
pub use similarity::{cosine_similarity, SimilarityError};

use crate::frame::{
    denormalize, normalize_window, partition_windows, CandidatePool, FrameError, FrameRef,
    RetrievalWindow, MAX_WINDOW_CAPACITY,
};
use crate::parallel::run_indexed;
use crate::prompt::{augment_query, render_window_prompt, PromptError, TemplateStore, TimedText};
use crate::relevance::{expand_with_spans, parse_relevance_output, ParseMode, RelevanceError};

/// Appended to the prompt when a window is retried after unparseable output.
pub const FORMAT_REMINDER: &str = "\n\nReply with exactly one JSON object mapping frame numbers (\"7\") or frame runs (\"12-18\") to integer scores 0-5, or with [None]. Do not add any other text.";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("window {window_id}: {source}")]
    Output {
        window_id: usize,
        #[source]
        source: RelevanceError,
    },
    #[error("window {window_id}: {source}")]
    Backend {
        window_id: usize,
        #[source]
        source: BackendError,
    },
    #[error("window of {n} frames exceeds backend limit {max}")]
    WindowTooLarge { n: usize, max: usize },
    #[error("frame {0} scored twice")]
    DuplicateFrame(usize),
    #[error("generative and similarity scores cannot be ranked together")]
    MixedScoreKinds,
    #[error("prefilter keeps {requested} frames but a window holds at most {capacity}")]
    PrefilterExceedsWindow { requested: usize, capacity: usize },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

impl EngineError {
    /// True for failures caused by a backend rather than by the input data.
    pub fn is_backend(&self) -> bool {
        matches!(self, EngineError::Backend { .. } | EngineError::Output { .. })
    }
}

/// What to do with a window that still fails after its retry budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowErrorPolicy {
    /// The window contributes nothing; the incident is kept in provenance.
    #[default]
    SkipWindow,
    FailFast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub window_capacity: usize,
    pub stride: usize,
    pub n_ctx: usize,
    pub emission_order: EmissionOrder,
    pub parse_mode: ParseMode,
    pub task_prompt_id: String,
    /// Upper bound on concurrently scored windows.
    pub jobs: usize,
    pub transport_retries: u32,
    pub format_retries: u32,
    pub on_window_error: WindowErrorPolicy,
    pub dedup: DedupPolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_capacity: MAX_WINDOW_CAPACITY,
            stride: MAX_WINDOW_CAPACITY,
            n_ctx: 64,
            emission_order: EmissionOrder::Chronological,
            parse_mode: ParseMode::Lenient,
            task_prompt_id: crate::prompt::DEFAULT_TASK_PROMPT.to_string(),
            jobs: 4,
            transport_retries: 2,
            format_retries: 1,
            on_window_error: WindowErrorPolicy::SkipWindow,
            dedup: DedupPolicy::Max,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.window_capacity == 0 || self.window_capacity > MAX_WINDOW_CAPACITY {
            return Err(EngineError::InvalidConfig(format!(
                "window capacity {} outside 1..={MAX_WINDOW_CAPACITY}",
                self.window_capacity
            )));
        }
        if self.stride == 0 || self.stride > self.window_capacity {
            return Err(EngineError::InvalidConfig(format!(
                "stride {} outside 1..={}",
                self.stride, self.window_capacity
            )));
        }
        if self.n_ctx == 0 {
            return Err(EngineError::InvalidConfig("n_ctx must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(EngineError::InvalidConfig("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Question-side inputs besides the query text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryExtras {
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default)]
    pub subtitles: Vec<TimedText>,
}

/// The scorer a run uses.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    Generative(&'a dyn GenerativeBackend),
    Similarity(&'a dyn SimilarityBackend),
    Uniform,
}

impl Scorer<'_> {
    pub fn kind(&self) -> BackendKind {
        match self {
            Scorer::Generative(b) => b.kind(),
            Scorer::Similarity(b) => b.kind(),
            Scorer::Uniform => BackendKind::Uniform,
        }
    }
}

/// One window's scored frames plus how they were obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub set: ScoredFrameSet,
    pub provenance: WindowProvenance,
}

fn provenance_for(window: &RetrievalWindow) -> WindowProvenance {
    let m = window.members();
    WindowProvenance {
        window_id: window.window_id,
        n: m.len(),
        first_global: m[0].global_index,
        last_global: m[m.len() - 1].global_index,
        ..Default::default()
    }
}

/// Scores one window with a generative backend.
///
/// Render, complete, parse, expand, map locals back to pool frames.
/// Transport failures are retried `transport_retries` times; unparseable
/// output is retried `format_retries` times with [`FORMAT_REMINDER`]
/// appended. A window that still fails is skipped or fails the run
/// according to `cfg.on_window_error`.
pub fn score_window_generative(
    backend: &dyn GenerativeBackend,
    store: &TemplateStore,
    window: &RetrievalWindow,
    query: &str,
    extras: &QueryExtras,
    cfg: &SamplerConfig,
) -> Result<WindowOutcome, EngineError> {
    if window.n() > backend.max_window() {
        return Err(EngineError::WindowTooLarge {
            n: window.n(),
            max: backend.max_window(),
        });
    }
    let prompt = render_window_prompt(
        store,
        window,
        query,
        Some(&extras.options),
        Some(&extras.subtitles),
        &cfg.task_prompt_id,
    )?;
    let base_text = prompt.render_text(crate::prompt::IMAGE_MARKER);
    let mut prov = provenance_for(window);

    let mut transport_failures = 0;
    let mut format_failures = 0;
    let failure = loop {
        let text = if format_failures > 0 {
            format!("{base_text}{FORMAT_REMINDER}")
        } else {
            base_text.clone()
        };
        prov.attempts += 1;
        let request = CompletionRequest {
            prompt: &prompt,
            text,
            subtitles: &extras.subtitles,
            window_id: window.window_id,
            attempt: prov.attempts,
        };
        let completion = match backend.complete(&request) {
            Ok(c) => c,
            Err(e) if e.is_retryable() && transport_failures < cfg.transport_retries => {
                transport_failures += 1;
                prov.incidents.push(format!("attempt {}: {e}", prov.attempts));
                continue;
            }
            Err(e) => {
                break EngineError::Backend {
                    window_id: window.window_id,
                    source: e,
                }
            }
        };
        let expanded = parse_relevance_output(&completion.text, cfg.parse_mode).and_then(|p| {
            expand_with_spans(&p.entries, window.n(), cfg.parse_mode)
                .map(|m| (m, p.lenient_salvage_count))
        });
        match expanded {
            Ok((scores, salvaged)) => {
                prov.salvaged_pairs = salvaged;
                let mut items = Vec::with_capacity(scores.len());
                for (local, (score, span)) in scores {
                    items.push(ScoredFrame {
                        frame: denormalize(window, local)?.clone(),
                        score: Relevance::Graded(score),
                        window_id: window.window_id,
                        scorer_tag: backend.tag().to_string(),
                        span: Some(span),
                    });
                }
                let set = ScoredFrameSet::new(items)?;
                prov.n_ret = set.n_ret();
                return Ok(WindowOutcome { set, provenance: prov });
            }
            Err(e) if format_failures < cfg.format_retries => {
                format_failures += 1;
                prov.incidents.push(format!("attempt {}: {e}", prov.attempts));
            }
            Err(e) => {
                break EngineError::Output {
                    window_id: window.window_id,
                    source: e,
                }
            }
        }
    };

    match cfg.on_window_error {
        WindowErrorPolicy::FailFast => Err(failure),
        WindowErrorPolicy::SkipWindow => {
            log::warn!("skipping window {}: {failure}", window.window_id);
            prov.incidents.push(format!("window skipped: {failure}"));
            Ok(WindowOutcome {
                set: ScoredFrameSet::empty(),
                provenance: prov,
            })
        }
    }
}

fn similarities_with_retry(
    backend: &dyn SimilarityBackend,
    query: &str,
    frames: &[FrameRef],
    retries: u32,
    prov: &mut WindowProvenance,
    window_id: usize,
) -> Result<Vec<f64>, EngineError> {
    loop {
        prov.attempts += 1;
        match backend.similarities(query, frames) {
            Ok(v) if v.len() == frames.len() && v.iter().all(|x| x.is_finite()) => {
                return Ok(v.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect())
            }
            Ok(v) => {
                return Err(EngineError::Backend {
                    window_id,
                    source: BackendError::Protocol(format!(
                        "{} similarity values for {} frames",
                        v.len(),
                        frames.len()
                    )),
                })
            }
            Err(e) if e.is_retryable() && prov.attempts <= retries => {
                prov.incidents.push(format!("attempt {}: {e}", prov.attempts));
            }
            Err(e) => return Err(EngineError::Backend { window_id, source: e }),
        }
    }
}

/// Scores one window by query similarity. Every frame counts as retrieved.
pub fn score_window_similarity(
    backend: &dyn SimilarityBackend,
    window: &RetrievalWindow,
    query: &str,
    cfg: &SamplerConfig,
) -> Result<WindowOutcome, EngineError> {
    let mut prov = provenance_for(window);
    let sims = similarities_with_retry(
        backend,
        query,
        window.members(),
        cfg.transport_retries,
        &mut prov,
        window.window_id,
    )?;
    let items = window
        .members()
        .iter()
        .zip(sims)
        .map(|(f, s)| ScoredFrame {
            frame: f.clone(),
            score: Relevance::Similarity(s),
            window_id: window.window_id,
            scorer_tag: backend.tag().to_string(),
            span: None,
        })
        .collect();
    let set = ScoredFrameSet::new(items)?;
    prov.n_ret = set.n_ret();
    Ok(WindowOutcome { set, provenance: prov })
}

/// Scores a window with whichever scorer the run uses.
pub fn score_window(
    scorer: Scorer<'_>,
    store: &TemplateStore,
    window: &RetrievalWindow,
    query: &str,
    extras: &QueryExtras,
    cfg: &SamplerConfig,
) -> Result<WindowOutcome, EngineError> {
    match scorer {
        Scorer::Generative(b) => score_window_generative(b, store, window, query, extras, cfg),
        Scorer::Similarity(b) => {
            let q = augment_query(query, &extras.options)?;
            score_window_similarity(b, window, &q, cfg)
        }
        Scorer::Uniform => Err(EngineError::InvalidConfig(
            "the uniform baseline does not score windows".into(),
        )),
    }
}

/// Subtitles whose start falls in `[window start, next window start)`.
fn subtitles_for(
    windows: &[RetrievalWindow],
    pool: &CandidatePool,
    idx: usize,
    subtitles: &[TimedText],
) -> Vec<TimedText> {
    if subtitles.is_empty() {
        return Vec::new();
    }
    let w = &windows[idx];
    let lo = if idx == 0 { f64::NEG_INFINITY } else { w.first_timestamp() };
    let last = w.members()[w.n() - 1].global_index;
    let hi = pool
        .frames
        .get(last + 1)
        .map_or(f64::INFINITY, |f| f.timestamp_s);
    subtitles
        .iter()
        .filter(|s| s.start_s >= lo && s.start_s < hi)
        .cloned()
        .collect()
}

fn score_windows(
    scorer: Scorer<'_>,
    store: &TemplateStore,
    pool: &CandidatePool,
    windows: &[RetrievalWindow],
    query: &str,
    extras: &QueryExtras,
    cfg: &SamplerConfig,
) -> Result<Vec<WindowOutcome>, EngineError> {
    let outcomes = run_indexed(windows.len(), cfg.jobs, |i| {
        let local_extras = QueryExtras {
            options: extras.options.clone(),
            subtitles: subtitles_for(windows, pool, i, &extras.subtitles),
        };
        score_window(scorer, store, &windows[i], query, &local_extras, cfg)
    });
    // first failure in window order, independent of completion order
    outcomes.into_iter().collect()
}

fn finish(outcomes: Vec<WindowOutcome>, cfg: &SamplerConfig) -> Result<SamplePlan, EngineError> {
    let (sets, provenance): (Vec<_>, Vec<_>) =
        outcomes.into_iter().map(|o| (o.set, o.provenance)).unzip();
    let merged = merge_window_results(sets, cfg.dedup)?;
    let mut plan = select_top_k(&merged, cfg.n_ctx, cfg.emission_order);
    plan.windows = provenance;
    Ok(plan)
}

/// Full sampling run over a candidate pool.
pub fn sample(
    pool: &CandidatePool,
    query: &str,
    extras: &QueryExtras,
    scorer: Scorer<'_>,
    store: &TemplateStore,
    cfg: &SamplerConfig,
) -> Result<SamplePlan, EngineError> {
    cfg.validate()?;
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery.into());
    }
    let windows = partition_windows(pool, cfg.window_capacity, cfg.stride)?;

    if let Scorer::Uniform = scorer {
        let picked: std::collections::BTreeSet<usize> =
            uniform_indices(pool.len(), cfg.n_ctx).into_iter().collect();
        let mut seen = std::collections::BTreeSet::new();
        let outcomes = windows
            .iter()
            .map(|w| {
                let mut prov = provenance_for(w);
                let items: Vec<ScoredFrame> = w
                    .members()
                    .iter()
                    .filter(|f| picked.contains(&f.global_index) && seen.insert(f.global_index))
                    .map(|f| ScoredFrame {
                        frame: f.clone(),
                        score: Relevance::Uniform,
                        window_id: w.window_id,
                        scorer_tag: "uniform".into(),
                        span: None,
                    })
                    .collect();
                let set = ScoredFrameSet::new(items)?;
                prov.n_ret = set.n_ret();
                Ok(WindowOutcome { set, provenance: prov })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        return finish(outcomes, cfg);
    }

    let outcomes = score_windows(scorer, store, pool, &windows, query, extras, cfg)?;
    finish(outcomes, cfg)
}

/// What the similarity stage of a hybrid run kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefilterReport {
    pub prefilter_k: usize,
    pub pool_size: usize,
    /// Pool indices of the survivors, in temporal order.
    pub survivors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutcome {
    pub plan: SamplePlan,
    pub prefilter: PrefilterReport,
}

/// Coarse-to-fine sampling.
///
/// The whole pool is ranked by similarity; the best `prefilter_k` frames
/// (earlier frame on ties) are put back in temporal order, normalized into a
/// single window and scored once by the generative backend.
///
/// `prefilter_k` larger than the pool keeps the whole pool, so the limit
/// applies to `min(prefilter_k, |pool|)`.
pub fn hybrid_sample(
    pool: &CandidatePool,
    query: &str,
    extras: &QueryExtras,
    similarity: &dyn SimilarityBackend,
    generative: &dyn GenerativeBackend,
    prefilter_k: usize,
    store: &TemplateStore,
    cfg: &SamplerConfig,
) -> Result<HybridOutcome, EngineError> {
    cfg.validate()?;
    if prefilter_k == 0 {
        return Err(EngineError::InvalidConfig("prefilter_k must be at least 1".into()));
    }
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery.into());
    }
    if pool.is_empty() {
        return Err(FrameError::EmptyPool.into());
    }
    let keep = prefilter_k.min(pool.len());
    if keep > cfg.window_capacity {
        return Err(EngineError::PrefilterExceedsWindow {
            requested: keep,
            capacity: cfg.window_capacity,
        });
    }

    let sim_query = augment_query(query, &extras.options)?;
    let batches = partition_windows(pool, cfg.window_capacity, cfg.window_capacity)?;
    let scored = run_indexed(batches.len(), cfg.jobs, |i| {
        score_window_similarity(similarity, &batches[i], &sim_query, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut ranked: Vec<ScoredFrame> = scored
        .into_iter()
        .flat_map(|o| o.set.items().to_vec())
        .collect();
    ranked.sort_by(rank_order);
    let mut survivors: Vec<FrameRef> = ranked.into_iter().take(keep).map(|s| s.frame).collect();
    survivors.sort_by(|a, b| {
        a.timestamp_s
            .total_cmp(&b.timestamp_s)
            .then(a.global_index.cmp(&b.global_index))
    });
    let report = PrefilterReport {
        prefilter_k,
        pool_size: pool.len(),
        survivors: survivors.iter().map(|f| f.global_index).collect(),
    };

    let window = normalize_window(0, survivors, cfg.window_capacity)?;
    let outcome = score_window_generative(generative, store, &window, query, extras, cfg)?;
    let plan = finish(vec![outcome], cfg)?;
    Ok(HybridOutcome {
        plan,
        prefilter: report,
    })
}
