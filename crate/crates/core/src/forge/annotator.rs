use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{format_timestamp, stable_hash};
use crate::engine::remote::{post_json, wire_frames, Endpoint, GenerativeWireRequest, GenerativeWireResponse};
use crate::engine::{BackendError, DecodeParams, SimilarityBackend};
use crate::frame::FrameRef;

pub const PARAM_VIDEO_ID: &str = "video_id";
pub const PARAM_TASK_TYPE: &str = "task_type";
pub const PARAM_ANSWER_FORMAT: &str = "answer_format";
pub const PARAM_NEGATIVE: &str = "negative";
pub const PARAM_HINT: &str = "hint";

/// What a judge writes instead of scores for an unusable question.
pub const LOW_QUALITY_SIGNAL: &str = "the question has low quality";

/// One annotator call.
#[derive(Debug, Clone)]
pub struct AnnotationRequest<'a> {
    pub template_id: &'a str,
    /// Fully rendered prompt.
    pub prompt: String,
    pub query: String,
    pub frames: &'a [FrameRef],
    /// Structured copies of what went into the prompt.
    pub params: BTreeMap<String, String>,
    pub attempt: u32,
}

/// A captioner, question writer or judge.
pub trait Annotator: Send + Sync {
    fn tag(&self) -> &str;
    fn annotate(&self, request: &AnnotationRequest<'_>) -> Result<String, BackendError>;
}

/// Annotator over HTTP; same body as the generative scorer plus `template_id`.
pub struct RemoteAnnotator {
    endpoint: Endpoint,
    model_id: String,
    decode: DecodeParams,
    agent: ureq::Agent,
}

impl RemoteAnnotator {
    pub fn new(endpoint: Endpoint, model_id: impl Into<String>, decode: DecodeParams) -> Self {
        Self {
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs_f64(endpoint.timeout_s.max(0.001)))
                .build(),
            endpoint,
            model_id: model_id.into(),
            decode,
        }
    }

    pub fn wire_request(&self, request: &AnnotationRequest<'_>) -> Result<GenerativeWireRequest, BackendError> {
        Ok(GenerativeWireRequest {
            model_id: self.model_id.clone(),
            query: request.query.clone(),
            task_prompt_id: request.template_id.to_string(),
            template_id: Some(request.template_id.to_string()),
            prompt: request.prompt.clone(),
            frames: wire_frames(request.frames.iter().enumerate().map(|(i, f)| (i + 1, f)), false)?,
            options: None,
            subtitles: None,
            decode: self.decode,
        })
    }
}

impl Annotator for RemoteAnnotator {
    fn tag(&self) -> &str {
        &self.model_id
    }

    fn annotate(&self, request: &AnnotationRequest<'_>) -> Result<String, BackendError> {
        let body = self.wire_request(request)?;
        let resp: GenerativeWireResponse = post_json(&self.agent, &self.endpoint, &body)?;
        Ok(resp.text)
    }
}

/// Deterministic offline annotator for every forge stage.
///
/// Captions are `frame-<pool index>`. Questions are grounded on about one
/// frame in ten of their chunk. The judge gives hinted frames 5 and hashes
/// the rest, with roughly a third landing on 0.
#[derive(Debug, Clone, Default)]
pub struct StubAnnotator {
    pub seed: u64,
}

impl StubAnnotator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn param<'a>(request: &'a AnnotationRequest<'_>, key: &str) -> &'a str {
        request.params.get(key).map(String::as_str).unwrap_or("")
    }

    fn caption(&self, request: &AnnotationRequest<'_>) -> Result<String, BackendError> {
        let frame = request
            .frames
            .last()
            .ok_or_else(|| BackendError::Rejected("caption request without a frame".into()))?;
        Ok(format!("frame-{}", frame.global_index))
    }

    fn question(&self, request: &AnnotationRequest<'_>) -> Result<String, BackendError> {
        let frames = request.frames;
        if frames.is_empty() {
            return Err(BackendError::Rejected("question request without narrations".into()));
        }
        let video = Self::param(request, PARAM_VIDEO_ID);
        let task = Self::param(request, PARAM_TASK_TYPE);
        let seed = self.seed.to_string();
        let first = frames[0].global_index.to_string();
        let h = stable_hash(&[&seed, video, &first, task]);

        let negative = Self::param(request, PARAM_NEGATIVE) == "true";
        let stamps: Vec<String> = if negative {
            Vec::new()
        } else {
            let count = frames.len().div_ceil(10).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let mut picks = rand::seq::index::sample(&mut rng, frames.len(), count).into_vec();
            picks.sort_unstable();
            picks.iter().map(|&i| format_timestamp(frames[i].timestamp_s)).collect()
        };
        let question = if negative {
            format!("What colour is the zebra that never appears in {video} ({task})?")
        } else {
            format!("[{task}] What happens in {video} around frame {first}?")
        };
        let body = if Self::param(request, PARAM_ANSWER_FORMAT) == "multiple_choice" {
            let letters = ["A", "B", "C", "D", "E"];
            let correct = letters[(h % 5) as usize];
            let options: serde_json::Map<String, serde_json::Value> = letters
                .iter()
                .map(|l| (l.to_string(), format!("option {l} for {video}/{first}").into()))
                .collect();
            serde_json::json!({
                "question": question,
                "options": options,
                "correct_option": correct,
                "rationale_timestamps": stamps,
            })
        } else {
            serde_json::json!({
                "question": question,
                "answer": format!("event near frame {first}"),
                "rationale_timestamps": stamps,
            })
        };
        Ok(format!("Here is the question.\n{}\n", serde_json::to_string_pretty(&body).expect("json value")))
    }

    fn judge(&self, request: &AnnotationRequest<'_>) -> Result<String, BackendError> {
        let hinted: Vec<&str> = Self::param(request, PARAM_HINT)
            .split(',')
            .map(|s| s.trim().trim_start_matches('[').trim_end_matches(']'))
            .filter(|s| !s.is_empty())
            .collect();
        let video = Self::param(request, PARAM_VIDEO_ID);
        let seed = self.seed.to_string();
        let mut scores = serde_json::Map::new();
        for f in request.frames {
            let ts = format_timestamp(f.timestamp_s);
            let score = if hinted.contains(&ts.as_str()) {
                5
            } else {
                let h = stable_hash(&[&seed, video, &request.query, &ts]);
                if h % 3 == 0 {
                    0
                } else {
                    1 + (h / 3) % 4
                }
            };
            scores.insert(format!("[{ts}]"), score.into());
        }
        Ok(format!(
            "{}\nHinted frames carry the key evidence; the others were graded by overlap.\n",
            serde_json::Value::Object(scores)
        ))
    }
}

impl Annotator for StubAnnotator {
    fn tag(&self) -> &str {
        "stub"
    }

    fn annotate(&self, request: &AnnotationRequest<'_>) -> Result<String, BackendError> {
        match request.template_id {
            "forge_caption" => self.caption(request),
            "forge_qa" => self.question(request),
            "forge_score" => self.judge(request),
            other => Err(BackendError::Rejected(format!("stub has no behaviour for template {other}"))),
        }
    }
}

/// Seeded pseudo-similarity in [-1, 1] keyed on query text and pool index.
#[derive(Debug, Clone, Default)]
pub struct StubSimilarity {
    pub seed: u64,
}

impl SimilarityBackend for StubSimilarity {
    fn tag(&self) -> &str {
        "stub-similarity"
    }

    fn similarities(&self, query: &str, frames: &[FrameRef]) -> Result<Vec<f64>, BackendError> {
        let seed = self.seed.to_string();
        Ok(frames
            .iter()
            .map(|f| {
                let h = stable_hash(&[&seed, query, &f.global_index.to_string()]);
                (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect())
    }
}
