use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::annotator::{
    AnnotationRequest, Annotator, LOW_QUALITY_SIGNAL, PARAM_ANSWER_FORMAT, PARAM_HINT,
    PARAM_NEGATIVE, PARAM_TASK_TYPE, PARAM_VIDEO_ID,
};
use super::{
    first_json_object, format_timestamp, parse_timestamp, ForgeConfig, ForgeError, FrameCaption,
    Incident, QASample, RetrievalRatio,
};
use crate::engine::{BackendError, SimilarityBackend};
use crate::frame::{CandidatePool, FrameError, FrameRef};
use crate::prompt::{fill_template, TemplateStore, IMAGE_MARKER};
use crate::relevance::Score;

const NO_CAPTION: &str = "(no caption)";

fn call_annotator(
    annotator: &dyn Annotator,
    request: &mut AnnotationRequest<'_>,
    retries: u32,
) -> Result<String, BackendError> {
    let mut failures = 0;
    loop {
        request.attempt += 1;
        match annotator.annotate(request) {
            Ok(t) => return Ok(t),
            Err(e) if e.is_retryable() && failures < retries => {
                log::warn!("{} attempt {}: {e}", request.template_id, request.attempt);
                failures += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn narration_line(frame: &FrameRef, text: &str) -> String {
    format!("[{}] {}", format_timestamp(frame.timestamp_s), text)
}

/// Differential captions for every pool frame, in pool order.
///
/// Each request shows the previous `caption_context` captions. An empty
/// caption is requested once more and then stored flagged.
pub fn stage1_caption(
    pool: &CandidatePool,
    captioner: &dyn Annotator,
    store: &TemplateStore,
    cfg: &ForgeConfig,
) -> Result<Vec<FrameCaption>, ForgeError> {
    if pool.is_empty() {
        return Err(FrameError::EmptyManifest.into());
    }
    let template = store.get("forge_caption")?;
    let mut out: Vec<FrameCaption> = Vec::with_capacity(pool.len());
    for (i, frame) in pool.frames.iter().enumerate() {
        let from = out.len().saturating_sub(cfg.caption_context);
        let context = if from == out.len() {
            "(none)".to_string()
        } else {
            out[from..]
                .iter()
                .map(|c| narration_line(&c.frame, &c.text))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = fill_template(
            template,
            &[
                ("context", &context),
                ("frames", &narration_line(frame, IMAGE_MARKER)),
            ],
        );
        let mut request = AnnotationRequest {
            template_id: "forge_caption",
            prompt,
            query: String::new(),
            frames: &pool.frames[i..=i],
            params: BTreeMap::from([(PARAM_VIDEO_ID.to_string(), pool.video_id.clone())]),
            attempt: 0,
        };
        let mut text = call_annotator(captioner, &mut request, cfg.transport_retries)?;
        if text.trim().is_empty() {
            text = call_annotator(captioner, &mut request, cfg.transport_retries)?;
        }
        let text = text.trim().to_string();
        let flagged = text.is_empty();
        if flagged {
            log::warn!("{}: empty caption for frame {}", pool.video_id, frame.global_index);
        }
        out.push(FrameCaption {
            frame: frame.clone(),
            text: if flagged { NO_CAPTION.to_string() } else { text },
            flagged,
        });
    }
    Ok(out)
}

/// Consecutive disjoint chunks; the last may be short.
pub fn chunk_captions(captions: &[FrameCaption], chunk_size: usize) -> Vec<&[FrameCaption]> {
    captions.chunks(chunk_size.max(1)).collect()
}

/// What the generation schedule asks for at one ordinal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSlot {
    pub ordinal: u64,
    pub task_type: String,
    pub multiple_choice: bool,
    pub negative: bool,
}

/// True at the ordinals where the running count of `rate * n` steps up.
fn bresenham_hit(ordinal: u64, rate: f64) -> bool {
    let at = |j: u64| (j as f64 * rate + 1e-9).floor();
    at(ordinal + 1) > at(ordinal)
}

/// Slot for a corpus-wide ordinal.
///
/// Task types cycle round-robin, shifted by one per full cycle so that each
/// type meets both answer formats. Multiple choice and negatives are spread
/// evenly so any prefix of `n` slots is within `1/n` of the configured rates.
pub fn schedule_slot(ordinal: u64, cfg: &ForgeConfig) -> TaskSlot {
    let n = cfg.task_types.len() as u64;
    let task = ((ordinal + ordinal / n) % n) as usize;
    TaskSlot {
        ordinal,
        task_type: cfg.task_types[task].clone(),
        multiple_choice: bresenham_hit(ordinal, cfg.mc_fraction),
        negative: bresenham_hit(ordinal, cfg.negative_rate),
    }
}

fn task_requirement(task_type: &str) -> String {
    let text = match task_type {
        "object_reasoning" => "Object Reasoning: infer how objects are used, why they change or how they relate.",
        "action_reasoning" => "Action Reasoning: infer the purpose, cause or consequence of actions.",
        "spatial_reasoning" => "Spatial Reasoning: infer how positions and layouts change across the video.",
        "temporal_reasoning" => "Temporal Reasoning: relate events by order, duration or causality.",
        "object_perception" => "Object Perception: identify objects that appear in the video.",
        "action_perception" => "Action Perception: identify the actions people perform.",
        "attribute_perception" => "Attribute Perception: identify colours, shapes, sizes or materials.",
        "spatial_perception" => "Spatial Perception: identify where things are relative to each other.",
        "video_detail_referring" => "Video Detail Referring: ask about a fine visual detail that is easy to miss.",
        "counting" => "Counting: ask how many times something appears or happens.",
        "ocr" => "OCR: ask about text shown on screen.",
        "temporal_perception" => "Temporal Perception: ask about the sequence in which events occur.",
        other => return other.replace('_', " "),
    };
    text.to_string()
}

/// Samples from stage 2 plus the chunks that produced nothing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stage2Output {
    pub samples: Vec<QASample>,
    pub incidents: Vec<Incident>,
}

struct Generated {
    question: String,
    options: Option<Vec<String>>,
    answer: String,
    grounded: BTreeSet<usize>,
}

/// Frame in `frames` for a timestamp: same `MM:SS` rendering first, then
/// the nearest frame within half a sampling period.
fn frame_for_timestamp(frames: &[&FrameRef], seconds: f64, period: f64) -> Option<usize> {
    let wanted = format_timestamp(seconds);
    if let Some(f) = frames.iter().find(|f| format_timestamp(f.timestamp_s) == wanted) {
        return Some(f.global_index);
    }
    frames
        .iter()
        .map(|f| ((f.timestamp_s - seconds).abs(), f.global_index))
        .filter(|&(d, _)| d <= period / 2.0)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, g)| g)
}

fn non_empty_str(v: Option<&Value>, field: &str) -> Result<String, String> {
    match v.and_then(Value::as_str).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        _ => Err(format!("missing or empty {field}")),
    }
}

fn parse_generated(text: &str, slot: &TaskSlot, chunk: &[FrameCaption], period: f64) -> Result<Generated, String> {
    let obj = first_json_object(text).ok_or("no JSON object in output")?;
    let v: Value = serde_json::from_str(obj).map_err(|e| format!("invalid JSON: {e}"))?;
    let question = non_empty_str(v.get("question"), "question")?;

    let (options, answer) = if slot.multiple_choice {
        let opts = v
            .get("options")
            .and_then(Value::as_object)
            .ok_or("multiple choice output without an options object")?;
        if opts.len() != 5 {
            return Err(format!("expected 5 options, got {}", opts.len()));
        }
        let mut list = Vec::with_capacity(5);
        for l in ["A", "B", "C", "D", "E"] {
            list.push(non_empty_str(opts.get(l), &format!("option {l}"))?);
        }
        let correct = non_empty_str(v.get("correct_option"), "correct_option")?;
        let letter = correct
            .trim_matches(|c: char| c == '(' || c == ')' || c == '[' || c == ']' || c == '.')
            .to_ascii_uppercase();
        if !matches!(letter.as_str(), "A" | "B" | "C" | "D" | "E") {
            return Err(format!("correct_option {correct:?} is not A-E"));
        }
        (Some(list), letter)
    } else {
        (None, non_empty_str(v.get("answer"), "answer")?)
    };

    let stamps = v
        .get("rationale_timestamps")
        .and_then(Value::as_array)
        .ok_or("missing rationale_timestamps list")?;
    let mut grounded = BTreeSet::new();
    if !slot.negative {
        let frames: Vec<&FrameRef> = chunk.iter().map(|c| &c.frame).collect();
        for s in stamps {
            let Some(sec) = s.as_str().and_then(parse_timestamp) else {
                return Err(format!("unreadable timestamp {s}"));
            };
            match frame_for_timestamp(&frames, sec, period) {
                Some(g) => {
                    grounded.insert(g);
                }
                None => log::debug!("timestamp {s} matches no narrated frame"),
            }
        }
        if grounded.is_empty() {
            return Err("no rationale timestamp matches a narrated frame".into());
        }
    }
    Ok(Generated {
        question,
        options,
        answer,
        grounded,
    })
}

/// One question per caption chunk.
///
/// `first_ordinal` is this video's offset in the corpus-wide schedule.
/// Output that breaks the schema is requested again `schema_retries` times;
/// after that the chunk is skipped and reported as an incident.
pub fn stage2_generate(
    video_id: &str,
    captions: &[FrameCaption],
    duration_s: f64,
    first_ordinal: u64,
    generator: &dyn Annotator,
    store: &TemplateStore,
    cfg: &ForgeConfig,
) -> Result<Stage2Output, ForgeError> {
    let template = store.get("forge_qa")?;
    let period = 1.0 / cfg.caption_fps;
    let mut out = Stage2Output::default();
    for (c, chunk) in chunk_captions(captions, cfg.chunk_size).into_iter().enumerate() {
        let slot = schedule_slot(first_ordinal + c as u64, cfg);
        let format = if slot.multiple_choice { "Multiple Choice" } else { "Open-ended" };
        let negative_instruction = if slot.negative {
            "This question must be unanswerable from the narrations: ask about something that never appears, and return an empty rationale_timestamps list.\n"
        } else {
            ""
        };
        let narrations = chunk
            .iter()
            .map(|c| narration_line(&c.frame, &c.text))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = fill_template(
            template,
            &[
                ("question_type", &task_requirement(&slot.task_type)),
                ("answer_format", format),
                ("negative_instruction", negative_instruction),
                ("frames", &narrations),
            ],
        );
        let frames: Vec<FrameRef> = chunk.iter().map(|c| c.frame.clone()).collect();
        let mut request = AnnotationRequest {
            template_id: "forge_qa",
            prompt,
            query: String::new(),
            frames: &frames,
            params: BTreeMap::from([
                (PARAM_VIDEO_ID.to_string(), video_id.to_string()),
                (PARAM_TASK_TYPE.to_string(), slot.task_type.clone()),
                (
                    PARAM_ANSWER_FORMAT.to_string(),
                    if slot.multiple_choice { "multiple_choice" } else { "open_ended" }.to_string(),
                ),
                (PARAM_NEGATIVE.to_string(), slot.negative.to_string()),
            ]),
            attempt: 0,
        };

        let mut violations = 0;
        let generated = loop {
            let text = call_annotator(generator, &mut request, cfg.transport_retries)?;
            match parse_generated(&text, &slot, chunk, period) {
                Ok(g) => break Some(g),
                Err(reason) if violations < cfg.schema_retries => {
                    log::warn!("{video_id} chunk {c}: {reason}; asking again");
                    violations += 1;
                }
                Err(reason) => {
                    log::warn!("{video_id} chunk {c}: {reason}; chunk skipped");
                    out.incidents.push(Incident {
                        stage: 2,
                        item: format!("{video_id}/chunk{c:03}"),
                        reason,
                    });
                    break None;
                }
            }
        };
        let Some(g) = generated else { continue };
        out.samples.push(QASample {
            sample_id: format!("{video_id}-q{c:03}"),
            video_id: video_id.to_string(),
            ordinal: slot.ordinal,
            question: g.question,
            options: g.options,
            answer: g.answer,
            task_type: slot.task_type,
            candidate_relevant: g.grounded.clone(),
            grounded_frames: g.grounded,
            scored_relevant: BTreeMap::new(),
            is_negative: slot.negative,
            n_total: captions.len(),
            duration_s,
        });
    }
    Ok(out)
}

/// Adds the most query-similar frames until the candidate set reaches
/// `target_ratio` of the pool. Grounded frames always stay; negatives are
/// returned unchanged.
pub fn stage3_extend(
    sample: &QASample,
    pool_frames: &[FrameRef],
    similarity: &dyn SimilarityBackend,
    target_ratio: f64,
    transport_retries: u32,
) -> Result<QASample, ForgeError> {
    let mut out = sample.clone();
    out.candidate_relevant.extend(sample.grounded_frames.iter().copied());
    if sample.is_negative {
        return Ok(out);
    }
    let want = RetrievalRatio::frames_for(target_ratio, pool_frames.len());
    if out.candidate_relevant.len() >= want {
        return Ok(out);
    }
    let query = sample.retrieval_query()?;
    let mut failures = 0;
    let sims = loop {
        match similarity.similarities(&query, pool_frames) {
            Ok(v) => break v,
            Err(e) if e.is_retryable() && failures < transport_retries => failures += 1,
            Err(e) => return Err(e.into()),
        }
    };
    if sims.len() != pool_frames.len() {
        return Err(BackendError::Protocol(format!(
            "{} similarities for {} frames",
            sims.len(),
            pool_frames.len()
        ))
        .into());
    }
    let mut ranked: Vec<(f64, usize)> = pool_frames
        .iter()
        .zip(&sims)
        .filter(|(f, _)| !out.candidate_relevant.contains(&f.global_index))
        .map(|(f, &s)| (if s.is_nan() { f64::NEG_INFINITY } else { s }, f.global_index))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = want - out.candidate_relevant.len();
    out.candidate_relevant.extend(ranked.into_iter().take(missing).map(|(_, g)| g));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage4Outcome {
    Scored(QASample),
    Dropped { sample_id: String, reason: String },
}

fn parse_judgement(
    text: &str,
    candidates: &[&FrameRef],
    period: f64,
) -> Result<BTreeMap<usize, Score>, String> {
    let obj = first_json_object(text).ok_or("no JSON object in output")?;
    let v: serde_json::Map<String, Value> =
        serde_json::from_str(obj).map_err(|e| format!("invalid JSON object: {e}"))?;
    let mut scores = BTreeMap::new();
    for (key, value) in &v {
        let Some(sec) = parse_timestamp(key) else {
            log::debug!("ignoring judge key {key:?}");
            continue;
        };
        let Some(g) = frame_for_timestamp(candidates, sec, period) else {
            log::debug!("judge key {key:?} is not a candidate frame");
            continue;
        };
        let raw = match value {
            Value::Number(n) => n.as_f64().unwrap_or(0.0),
            Value::String(s) => match s.trim().parse::<f64>() {
                Ok(x) => x,
                Err(_) => continue,
            },
            _ => continue,
        };
        let score = Score::clamped(raw.floor().clamp(-1.0, 6.0) as i64);
        let e = scores.entry(g).or_insert(score);
        *e = (*e).max(score);
    }
    if scores.is_empty() && !candidates.is_empty() {
        return Err("no judge key matches a candidate frame".into());
    }
    Ok(scores)
}

/// Grades every candidate frame with the judge.
///
/// Grounded frames are passed as a hint. Candidates the judge leaves out
/// score 0. A low-quality verdict, or output that keeps breaking the
/// schema, drops the sample.
pub fn stage4_score(
    sample: &QASample,
    captions: &[FrameCaption],
    judge: &dyn Annotator,
    store: &TemplateStore,
    cfg: &ForgeConfig,
) -> Result<Stage4Outcome, ForgeError> {
    let mut out = sample.clone();
    if sample.is_negative {
        out.scored_relevant = sample
            .candidate_relevant
            .iter()
            .map(|&g| (g, Score::ZERO))
            .collect();
        return Ok(Stage4Outcome::Scored(out));
    }
    if sample.candidate_relevant.is_empty() {
        return Ok(Stage4Outcome::Dropped {
            sample_id: sample.sample_id.clone(),
            reason: "no candidate frames".into(),
        });
    }
    let template = store.get("forge_score")?;
    let by_index: BTreeMap<usize, &FrameCaption> =
        captions.iter().map(|c| (c.frame.global_index, c)).collect();
    let mut chosen: Vec<&FrameCaption> = Vec::with_capacity(sample.candidate_relevant.len());
    for g in &sample.candidate_relevant {
        let c = by_index.get(g).ok_or_else(|| {
            ForgeError::SchemaViolation(format!("{}: frame {g} has no caption", sample.sample_id))
        })?;
        chosen.push(c);
    }
    let frames_text = chosen
        .iter()
        .map(|c| narration_line(&c.frame, &c.text))
        .collect::<Vec<_>>()
        .join("\n");
    let hint_stamps: Vec<String> = sample
        .grounded_frames
        .iter()
        .filter_map(|g| by_index.get(g))
        .map(|c| format_timestamp(c.frame.timestamp_s))
        .collect();
    let hint_text = hint_stamps
        .iter()
        .map(|s| format!("[{s}]"))
        .collect::<Vec<_>>()
        .join(", ");
    let query = sample.retrieval_query()?;
    let prompt = fill_template(
        template,
        &[("frames", &frames_text), ("query", &query), ("hint", &hint_text)],
    );
    let frames: Vec<FrameRef> = chosen.iter().map(|c| c.frame.clone()).collect();
    let frame_refs: Vec<&FrameRef> = frames.iter().collect();
    let mut request = AnnotationRequest {
        template_id: "forge_score",
        prompt,
        query,
        frames: &frames,
        params: BTreeMap::from([
            (PARAM_VIDEO_ID.to_string(), sample.video_id.clone()),
            (PARAM_HINT.to_string(), hint_stamps.join(",")),
        ]),
        attempt: 0,
    };

    let mut violations = 0;
    loop {
        let text = call_annotator(judge, &mut request, cfg.transport_retries)?;
        if text.to_lowercase().contains(LOW_QUALITY_SIGNAL) {
            return Ok(Stage4Outcome::Dropped {
                sample_id: sample.sample_id.clone(),
                reason: "judge flagged the question as low quality".into(),
            });
        }
        match parse_judgement(&text, &frame_refs, 1.0 / cfg.caption_fps) {
            Ok(scores) => {
                out.scored_relevant = sample
                    .candidate_relevant
                    .iter()
                    .map(|&g| (g, scores.get(&g).copied().unwrap_or(Score::ZERO)))
                    .collect();
                return Ok(Stage4Outcome::Scored(out));
            }
            Err(reason) if violations < cfg.schema_retries => {
                log::warn!("{}: {reason}; asking again", sample.sample_id);
                violations += 1;
            }
            Err(reason) => {
                return Ok(Stage4Outcome::Dropped {
                    sample_id: sample.sample_id.clone(),
                    reason,
                })
            }
        }
    }
}
