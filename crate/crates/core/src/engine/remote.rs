//! HTTP backends speaking the JSON wire contracts.

use std::time::Duration;

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::backend::{
    BackendError, Completion, CompletionRequest, DecodeParams, Embedder, GenerativeBackend,
};
use crate::frame::FrameRef;
use crate::prompt::TimedText;

/// Where and how to reach a remote model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    #[serde(skip)]
    pub token: Option<String>,
    pub timeout_s: f64,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout_s: 120.0,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(self.timeout_s.max(0.001)))
            .build()
    }
}

/// POSTs `body` as JSON and decodes a JSON reply.
pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    agent: &ureq::Agent,
    endpoint: &Endpoint,
    body: &Req,
) -> Result<Resp, BackendError> {
    let mut req = agent.post(&endpoint.url);
    if let Some(token) = &endpoint.token {
        req = req.set("Authorization", &format!("Bearer {token}"));
    }
    match req.send_json(body) {
        Ok(resp) => resp
            .into_json::<Resp>()
            .map_err(|e| BackendError::Protocol(format!("decoding response: {e}"))),
        Err(ureq::Error::Status(code, resp)) => {
            let detail = resp.into_string().unwrap_or_default();
            if code == 429 || code >= 500 {
                Err(BackendError::Unavailable(format!("HTTP {code}: {detail}")))
            } else {
                Err(BackendError::Rejected(format!("HTTP {code}: {detail}")))
            }
        }
        Err(ureq::Error::Transport(t)) => Err(BackendError::Unavailable(t.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    pub local_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
}

/// Body sent to a generative scorer (and, with `template_id`, to an annotator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeWireRequest {
    pub model_id: String,
    pub query: String,
    pub task_prompt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    /// Rendered prompt text with `<image>` markers, in frame order.
    pub prompt: String,
    pub frames: Vec<WireFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtitles: Option<Vec<TimedText>>,
    pub decode: DecodeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeWireResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Option<serde_json::Value>,
}

/// Builds the wire frame list, inlining local image files when asked.
pub fn wire_frames<'a, I>(frames: I, inline_images: bool) -> Result<Vec<WireFrame>, BackendError>
where
    I: IntoIterator<Item = (usize, &'a FrameRef)>,
{
    frames
        .into_iter()
        .map(|(local_index, f)| {
            if inline_images {
                let bytes = std::fs::read(&f.uri)
                    .map_err(|e| BackendError::Rejected(format!("reading {}: {e}", f.uri)))?;
                Ok(WireFrame {
                    local_index,
                    uri: None,
                    image_base64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
                })
            } else {
                Ok(WireFrame {
                    local_index,
                    uri: Some(f.uri.clone()),
                    image_base64: None,
                })
            }
        })
        .collect()
}

pub struct RemoteScorer {
    endpoint: Endpoint,
    model_id: String,
    decode: DecodeParams,
    inline_images: bool,
    agent: ureq::Agent,
    tag: String,
}

impl RemoteScorer {
    pub fn new(endpoint: Endpoint, model_id: impl Into<String>, decode: DecodeParams) -> Self {
        let model_id = model_id.into();
        Self {
            agent: endpoint.agent(),
            tag: format!("remote:{model_id}"),
            endpoint,
            model_id,
            decode,
            inline_images: false,
        }
    }

    pub fn inline_images(mut self, yes: bool) -> Self {
        self.inline_images = yes;
        self
    }

    pub fn wire_request(&self, request: &CompletionRequest<'_>) -> Result<GenerativeWireRequest, BackendError> {
        let prompt = request.prompt;
        Ok(GenerativeWireRequest {
            model_id: self.model_id.clone(),
            query: prompt.query_text.clone(),
            task_prompt_id: prompt.task_prompt_id.clone(),
            template_id: None,
            prompt: request.text.clone(),
            frames: wire_frames(prompt.frames(), self.inline_images)?,
            options: (!prompt.options.is_empty()).then(|| prompt.options.clone()),
            subtitles: (!request.subtitles.is_empty()).then(|| request.subtitles.to_vec()),
            decode: self.decode,
        })
    }
}

impl GenerativeBackend for RemoteScorer {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let body = self.wire_request(request)?;
        let resp: GenerativeWireResponse = post_json(&self.agent, &self.endpoint, &body)?;
        Ok(Completion {
            text: resp.text,
            usage: resp.usage,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedWireRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uris: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedWireResponse {
    pub vectors: Vec<Vec<f32>>,
}

pub struct RemoteEmbedder {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            agent: endpoint.agent(),
            endpoint,
        }
    }

    fn embed(&self, body: EmbedWireRequest, expected: usize) -> Result<Vec<Vec<f32>>, BackendError> {
        let resp: EmbedWireResponse = post_json(&self.agent, &self.endpoint, &body)?;
        if resp.vectors.len() != expected {
            return Err(BackendError::Protocol(format!(
                "expected {expected} vectors, got {}",
                resp.vectors.len()
            )));
        }
        Ok(resp.vectors)
    }
}

impl Embedder for RemoteEmbedder {
    fn tag(&self) -> &str {
        "remote-embedding"
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.embed(
            EmbedWireRequest {
                texts: Some(texts.to_vec()),
                image_uris: None,
            },
            texts.len(),
        )
    }

    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.embed(
            EmbedWireRequest {
                texts: None,
                image_uris: Some(frames.iter().map(|f| f.uri.clone()).collect()),
            },
            frames.len(),
        )
    }
}
