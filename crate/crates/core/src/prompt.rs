//! Indexed prompts and the task template store.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FrameRef, RetrievalWindow};

/// Template used for plain frame retrieval.
pub const DEFAULT_TASK_PROMPT: &str = "frame_retrieval";

/// Marker standing in for an image in the textual rendering of a prompt.
pub const IMAGE_MARKER: &str = "<image>";

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("frame_retrieval", include_str!("../templates/frame_retrieval.txt")),
    ("event_grounding", include_str!("../templates/event_grounding.txt")),
    ("timestamp_retrieval", include_str!("../templates/timestamp_retrieval.txt")),
    ("forge_caption", include_str!("../templates/forge_caption.txt")),
    ("forge_qa", include_str!("../templates/forge_qa.txt")),
    ("forge_score", include_str!("../templates/forge_score.txt")),
];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unknown task prompt {0:?}")]
    UnknownTaskPrompt(String),
    #[error("query text is empty")]
    EmptyQuery,
    #[error("{0} options exceed the A-Z letter range")]
    OptionOverflow(usize),
    #[error("reading templates: {0}")]
    Io(String),
}

/// A line of timed text, e.g. a subtitle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedText {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

/// Task prompt templates keyed by id. Read-only once built.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateStore {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN_TEMPLATES
                .iter()
                .map(|(id, body)| (id.to_string(), body.to_string()))
                .collect(),
        }
    }

    /// Builtin templates overlaid with every `*.txt` file in `dir` (id = file stem).
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut store = Self::builtin();
        let entries = std::fs::read_dir(dir).map_err(|e| PromptError::Io(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| PromptError::Io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io(e.to_string()))?;
            store.templates.insert(id.to_string(), body);
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: impl Into<String>, body: impl Into<String>) {
        self.templates.insert(id.into(), body.into());
    }

    pub fn get(&self, id: &str) -> Result<&str, PromptError> {
        self.templates
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownTaskPrompt(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

/// Replaces `{name}` placeholders whose name appears in `values`. Other braces are left alone.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Appends lettered options to a question: `"Q?\nA. x\nB. y"`.
pub fn augment_query(question: &str, options: &[String]) -> Result<String, PromptError> {
    if options.len() > 26 {
        return Err(PromptError::OptionOverflow(options.len()));
    }
    let mut out = question.to_string();
    for (letter, option) in ('A'..='Z').zip(options) {
        out.push('\n');
        out.push(letter);
        out.push_str(". ");
        out.push_str(option);
    }
    Ok(out)
}

pub fn frame_label(local_index: usize) -> String {
    format!("Frame Number [{local_index}]")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub label: String,
    pub frame: Option<FrameRef>,
    pub subtitle_text: Option<String>,
}

/// Interleaved frame labels, frames and subtitle text, plus the task and query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedPrompt {
    pub segments: Vec<PromptSegment>,
    pub query_text: String,
    pub task_prompt_id: String,
    pub task_template: String,
    pub options: Vec<String>,
}

impl IndexedPrompt {
    /// Frames with their local index, in label order.
    pub fn frames(&self) -> impl Iterator<Item = (usize, &FrameRef)> {
        self.segments
            .iter()
            .filter_map(|s| s.frame.as_ref())
            .enumerate()
            .map(|(i, f)| (i + 1, f))
    }

    /// Text rendering with `image_marker` in place of each frame.
    pub fn render_text(&self, image_marker: &str) -> String {
        let mut frames = String::new();
        let mut subtitles = String::new();
        for seg in &self.segments {
            frames.push_str(&seg.label);
            if seg.frame.is_some() {
                frames.push(' ');
                frames.push_str(image_marker);
            }
            frames.push('\n');
            if let Some(sub) = &seg.subtitle_text {
                for line in sub.lines() {
                    frames.push_str("Subtitle: ");
                    frames.push_str(line);
                    frames.push('\n');
                }
                subtitles.push_str(sub);
                subtitles.push('\n');
            }
        }
        let options = augment_query("", &self.options).unwrap_or_default();
        fill_template(
            &self.task_template,
            &[
                ("frames", frames.trim_end()),
                ("query", &self.query_text),
                ("options", options.trim_start()),
                ("subtitles", subtitles.trim_end()),
            ],
        )
    }
}

/// Builds the indexed prompt for one window.
///
/// Each member gets the label `Frame Number [N]` with `N` its local index.
/// Subtitle lines are attached to the latest frame starting at or before the
/// line's start time; lines that start before the first frame go to frame 1.
pub fn render_window_prompt(
    store: &TemplateStore,
    window: &RetrievalWindow,
    query: &str,
    options: Option<&[String]>,
    subtitles: Option<&[TimedText]>,
    task_prompt_id: &str,
) -> Result<IndexedPrompt, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let task_template = store.get(task_prompt_id)?.to_string();
    let options = options.unwrap_or_default().to_vec();
    let query_text = augment_query(query, &options)?;

    let members = window.members();
    let mut attached: Vec<Vec<&str>> = vec![Vec::new(); members.len()];
    for line in subtitles.unwrap_or_default() {
        let slot = members
            .partition_point(|f| f.timestamp_s <= line.start_s)
            .saturating_sub(1);
        attached[slot].push(line.text.as_str());
    }

    let segments = window
        .local_map()
        .zip(attached)
        .map(|((local, frame), subs)| PromptSegment {
            label: frame_label(local),
            frame: Some(frame.clone()),
            subtitle_text: (!subs.is_empty()).then(|| subs.join("\n")),
        })
        .collect();

    Ok(IndexedPrompt {
        segments,
        query_text,
        task_prompt_id: task_prompt_id.to_string(),
        task_template,
        options,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::normalize_window;

    fn window(ts: &[f64]) -> RetrievalWindow {
        let members = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| FrameRef {
                global_index: 10 + i,
                timestamp_s: t,
                uri: format!("f{i}.jpg"),
                source_index: 10 + i,
            })
            .collect();
        normalize_window(0, members, 256).unwrap()
    }

    #[test]
    fn augment_formats() {
        assert_eq!(augment_query("Q?", &[]).unwrap(), "Q?");
        assert_eq!(
            augment_query("Q?", &["x".into(), "y".into()]).unwrap(),
            "Q?\nA. x\nB. y"
        );
        let many: Vec<String> = (0..27).map(|i| i.to_string()).collect();
        assert_eq!(augment_query("Q?", &many), Err(PromptError::OptionOverflow(27)));
    }

    #[test]
    fn three_frame_window_labels() {
        let p = render_window_prompt(
            &TemplateStore::builtin(),
            &window(&[0.0, 1.0, 2.0]),
            "Q",
            None,
            None,
            DEFAULT_TASK_PROMPT,
        )
        .unwrap();
        let labels: Vec<_> = p.segments.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["Frame Number [1]", "Frame Number [2]", "Frame Number [3]"]);
        assert_eq!(p.segments[1].frame.as_ref().unwrap().global_index, 11);
        let text = p.render_text(IMAGE_MARKER);
        assert!(text.contains("Frame Number [1] <image>\nFrame Number [2] <image>\nFrame Number [3] <image>"));
        assert!(text.trim_end().ends_with("Question: Q"));
    }

    #[test]
    fn options_extend_the_query() {
        let opts: Vec<String> = ["red", "blue", "green", "black", "white"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = render_window_prompt(
            &TemplateStore::builtin(),
            &window(&[0.0]),
            "What color is the car?",
            Some(&opts),
            None,
            DEFAULT_TASK_PROMPT,
        )
        .unwrap();
        assert_eq!(
            p.query_text,
            "What color is the car?\nA. red\nB. blue\nC. green\nD. black\nE. white"
        );
    }

    #[test]
    fn subtitles_follow_preceding_frame() {
        let subs = vec![
            TimedText { start_s: 0.5, end_s: 1.0, text: "hello".into() },
            TimedText { start_s: 2.0, end_s: 3.0, text: "at two".into() },
            TimedText { start_s: 9.0, end_s: 9.5, text: "late".into() },
        ];
        let p = render_window_prompt(
            &TemplateStore::builtin(),
            &window(&[0.0, 2.0, 4.0]),
            "Q",
            None,
            Some(&subs),
            DEFAULT_TASK_PROMPT,
        )
        .unwrap();
        let got: Vec<_> = p.segments.iter().map(|s| s.subtitle_text.clone()).collect();
        assert_eq!(
            got,
            vec![Some("hello".to_string()), Some("at two".to_string()), Some("late".to_string())]
        );
        let text = p.render_text(IMAGE_MARKER);
        assert!(text.contains("Frame Number [1] <image>\nSubtitle: hello\nFrame Number [2]"));
    }

    #[test]
    fn unknown_prompt_and_empty_query() {
        let w = window(&[0.0]);
        let store = TemplateStore::builtin();
        assert_eq!(
            render_window_prompt(&store, &w, "Q", None, None, "nope").unwrap_err(),
            PromptError::UnknownTaskPrompt("nope".into())
        );
        assert_eq!(
            render_window_prompt(&store, &w, "  ", None, None, DEFAULT_TASK_PROMPT).unwrap_err(),
            PromptError::EmptyQuery
        );
    }

    #[test]
    fn fill_leaves_unknown_braces() {
        let t = "{\n  \"a\": 1\n} {query} {other}";
        assert_eq!(fill_template(t, &[("query", "Q")]), "{\n  \"a\": 1\n} Q {other}");
    }

    #[test]
    fn builtin_templates_present() {
        let store = TemplateStore::builtin();
        for id in ["frame_retrieval", "event_grounding", "forge_qa", "forge_score", "forge_caption"] {
            assert!(store.get(id).is_ok(), "{id}");
        }
    }
}
