use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use framesift_core::frame::{group_manifests, read_manifest_rows, FrameManifest};
use framesift_core::relevance::Score;

use crate::error::CliError;

fn open(path: &Path) -> Result<Box<dyn BufRead>, CliError> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(std::io::stdin())));
    }
    let f = fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(Box::new(BufReader::new(f)))
}

/// Manifests in a file (or `-` for stdin), one per video.
pub fn read_manifests(path: &Path) -> Result<Vec<FrameManifest>, CliError> {
    let rows = read_manifest_rows(open(path)?)?;
    Ok(group_manifests(rows)?)
}

/// The single manifest to sample, chosen by `video_id` when the file holds several.
pub fn read_one_manifest(path: &Path, video_id: Option<&str>) -> Result<FrameManifest, CliError> {
    let mut all = read_manifests(path)?;
    match video_id {
        Some(v) => {
            let i = all
                .iter()
                .position(|m| m.video_id == v)
                .ok_or_else(|| CliError::data(format!("video {v:?} is not in {}", path.display())))?;
            Ok(all.swap_remove(i))
        }
        None if all.len() == 1 => Ok(all.pop().expect("one manifest")),
        None => Err(CliError::usage(format!(
            "{} holds {} videos; pick one with --video-id",
            path.display(),
            all.len()
        ))),
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Relevant frames keyed by manifest index: a list (all top score) or a
/// map from index to score.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SourceScores {
    List(Vec<usize>),
    Scored(BTreeMap<String, u8>),
}

impl SourceScores {
    pub fn into_map(self) -> Result<BTreeMap<usize, Score>, CliError> {
        match self {
            SourceScores::List(v) => Ok(v.into_iter().map(|s| (s, Score::TOP)).collect()),
            SourceScores::Scored(m) => m
                .into_iter()
                .map(|(k, v)| {
                    let idx = k
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::data(format!("frame key {k:?} is not an index")))?;
                    let score = Score::new(v).ok_or_else(|| CliError::data(format!("score {v} outside 0..=5")))?;
                    Ok((idx, score))
                })
                .collect(),
        }
    }
}

pub fn read_source_scores(path: &Path) -> Result<BTreeMap<usize, Score>, CliError> {
    read_json::<SourceScores>(path)?.into_map()
}

/// Comma-separated list, e.g. `10,20,30`.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad {what} value {s:?}")))
        })
        .collect()
}
