//! Run directories: `{run}/run.json` plus `{run}/{video}/stage{1..4}.jsonl`.
//!
//! A stage file is written once, atomically, and reused on later
//! invocations, so an interrupted run resumes where it stopped.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::stages::{stage1_caption, stage2_generate, stage3_extend, stage4_score, Stage4Outcome};
use super::{Annotator, ForgeConfig, ForgeError, FrameCaption, Incident, QASample, SCHEMA_VERSION};
use crate::engine::SimilarityBackend;
use crate::frame::{build_candidate_pool, FrameManifest, FrameRef};
use crate::parallel::run_indexed;
use crate::prompt::TemplateStore;

const RUN_FILE: &str = "run.json";
const VIDEO_FILE: &str = "video.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: ForgeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VideoMeta {
    video_id: String,
    source_duration_s: f64,
    sample_ratio: f64,
    n_captions: usize,
}

/// What one stage invocation did.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub videos: usize,
    /// Videos computed in this invocation; the rest were already on disk.
    pub computed: usize,
    pub records: usize,
    pub incidents: usize,
}

pub struct ForgeRun {
    dir: PathBuf,
    cfg: ForgeConfig,
    jobs: usize,
}

fn corrupt(path: &Path, message: impl std::fmt::Display) -> ForgeError {
    ForgeError::Corrupt {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ForgeError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ForgeError> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|e| corrupt(path, e))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ForgeError> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| corrupt(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ForgeError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| corrupt(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ForgeError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| corrupt(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Directory name for a video id.
fn video_dir_name(video_id: &str) -> String {
    video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

impl ForgeRun {
    /// Opens or creates a run directory.
    ///
    /// With `cfg` the directory is created if needed and must match any
    /// configuration already recorded; without it the recorded one is used.
    pub fn open(dir: impl Into<PathBuf>, cfg: Option<ForgeConfig>, jobs: usize) -> Result<Self, ForgeError> {
        let dir = dir.into();
        let run_file = dir.join(RUN_FILE);
        let existing: Option<RunManifest> = if run_file.exists() {
            Some(read_json(&run_file)?)
        } else {
            None
        };
        let cfg = match (cfg, existing) {
            (Some(c), Some(e)) if c != e.config => return Err(ForgeError::RunMismatch),
            (Some(c), Some(_)) => c,
            (Some(c), None) => {
                c.validate()?;
                fs::create_dir_all(&dir)?;
                write_json(
                    &run_file,
                    &RunManifest {
                        schema_version: SCHEMA_VERSION,
                        config: c.clone(),
                    },
                )?;
                c
            }
            (None, Some(e)) => e.config,
            (None, None) => {
                return Err(ForgeError::MissingStage {
                    video_id: "*".into(),
                    stage: 1,
                })
            }
        };
        cfg.validate()?;
        Ok(Self {
            dir,
            cfg,
            jobs: jobs.max(1),
        })
    }

    pub fn config(&self) -> &ForgeConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stage_path(&self, video_id: &str, stage: u8) -> PathBuf {
        self.dir.join(video_dir_name(video_id)).join(format!("stage{stage}.jsonl"))
    }

    fn incidents_path(&self, video_id: &str, stage: u8) -> PathBuf {
        self.dir
            .join(video_dir_name(video_id))
            .join(format!("stage{stage}.incidents.jsonl"))
    }

    fn metas(&self) -> Result<Vec<VideoMeta>, ForgeError> {
        let mut metas = Vec::new();
        if !self.dir.exists() {
            return Ok(metas);
        }
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path().join(VIDEO_FILE);
            if path.exists() && path.with_file_name("stage1.jsonl").exists() {
                metas.push(read_json::<VideoMeta>(&path)?);
            }
        }
        metas.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        Ok(metas)
    }

    /// Video ids with captions, sorted.
    pub fn videos(&self) -> Result<Vec<String>, ForgeError> {
        Ok(self.metas()?.into_iter().map(|m| m.video_id).collect())
    }

    fn load<T: DeserializeOwned>(&self, video_id: &str, stage: u8) -> Result<Vec<T>, ForgeError> {
        let path = self.stage_path(video_id, stage);
        if !path.exists() {
            return Err(ForgeError::MissingStage {
                video_id: video_id.to_string(),
                stage,
            });
        }
        read_jsonl(&path)
    }

    pub fn captions(&self, video_id: &str) -> Result<Vec<FrameCaption>, ForgeError> {
        self.load(video_id, 1)
    }

    pub fn samples(&self, video_id: &str, stage: u8) -> Result<Vec<QASample>, ForgeError> {
        self.load(video_id, stage)
    }

    /// Every stage-4 sample of the run, by video then schedule order.
    pub fn dataset(&self) -> Result<Vec<QASample>, ForgeError> {
        let videos = self.videos()?;
        if videos.is_empty() {
            return Err(ForgeError::MissingStage {
                video_id: "*".into(),
                stage: 1,
            });
        }
        let mut all = Vec::new();
        for v in videos {
            all.extend(self.samples(&v, 4)?);
        }
        Ok(all)
    }

    fn per_video<F>(&self, stage: u8, videos: &[String], work: F) -> Result<StageSummary, ForgeError>
    where
        F: Fn(usize) -> Result<Option<(usize, usize)>, ForgeError> + Sync,
    {
        let results = run_indexed(videos.len(), self.jobs, |i| {
            if self.stage_path(&videos[i], stage).exists() {
                return Ok(None);
            }
            work(i)
        });
        let mut summary = StageSummary {
            stage,
            videos: videos.len(),
            ..Default::default()
        };
        for (i, r) in results.into_iter().enumerate() {
            match r? {
                Some((records, incidents)) => {
                    summary.computed += 1;
                    summary.records += records;
                    summary.incidents += incidents;
                }
                None => summary.records += read_jsonl::<serde_json::Value>(&self.stage_path(&videos[i], stage))?.len(),
            }
        }
        Ok(summary)
    }

    /// Captions every manifest's pool at the configured caption rate.
    pub fn stage1(
        &self,
        manifests: &[FrameManifest],
        captioner: &dyn Annotator,
        store: &TemplateStore,
    ) -> Result<StageSummary, ForgeError> {
        let ids: Vec<String> = manifests.iter().map(|m| m.video_id.clone()).collect();
        self.per_video(1, &ids, |i| {
            let pool = build_candidate_pool(&manifests[i], self.cfg.caption_fps)?;
            let captions = stage1_caption(&pool, captioner, store, &self.cfg)?;
            let vdir = self.dir.join(video_dir_name(&pool.video_id));
            fs::create_dir_all(&vdir)?;
            write_json(
                &vdir.join(VIDEO_FILE),
                &VideoMeta {
                    video_id: pool.video_id.clone(),
                    source_duration_s: pool.source_duration_s,
                    sample_ratio: pool.sample_ratio,
                    n_captions: captions.len(),
                },
            )?;
            write_jsonl(&self.stage_path(&pool.video_id, 1), &captions)?;
            Ok(Some((captions.len(), captions.iter().filter(|c| c.flagged).count())))
        })
    }

    /// Questions for every captioned video. Schedule ordinals run over the
    /// videos in id order.
    pub fn stage2(&self, generator: &dyn Annotator, store: &TemplateStore) -> Result<StageSummary, ForgeError> {
        let metas = self.metas()?;
        if metas.is_empty() {
            return Err(ForgeError::MissingStage {
                video_id: "*".into(),
                stage: 1,
            });
        }
        let mut bases = Vec::with_capacity(metas.len());
        let mut next = 0u64;
        for m in &metas {
            bases.push(next);
            next += m.n_captions.div_ceil(self.cfg.chunk_size) as u64;
        }
        let ids: Vec<String> = metas.iter().map(|m| m.video_id.clone()).collect();
        self.per_video(2, &ids, |i| {
            let m = &metas[i];
            let captions = self.captions(&m.video_id)?;
            let out = stage2_generate(
                &m.video_id,
                &captions,
                m.source_duration_s,
                bases[i],
                generator,
                store,
                &self.cfg,
            )?;
            write_jsonl(&self.incidents_path(&m.video_id, 2), &out.incidents)?;
            write_jsonl(&self.stage_path(&m.video_id, 2), &out.samples)?;
            Ok(Some((out.samples.len(), out.incidents.len())))
        })
    }

    pub fn stage3(&self, similarity: &dyn SimilarityBackend) -> Result<StageSummary, ForgeError> {
        let ids = self.videos()?;
        self.per_video(3, &ids, |i| {
            let captions = self.captions(&ids[i])?;
            let frames: Vec<FrameRef> = captions.into_iter().map(|c| c.frame).collect();
            let samples = self.samples(&ids[i], 2)?;
            let extended = samples
                .iter()
                .map(|s| {
                    stage3_extend(
                        s,
                        &frames,
                        similarity,
                        self.cfg.target_ratio,
                        self.cfg.transport_retries,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_jsonl(&self.stage_path(&ids[i], 3), &extended)?;
            Ok(Some((extended.len(), 0)))
        })
    }

    pub fn stage4(&self, judge: &dyn Annotator, store: &TemplateStore) -> Result<StageSummary, ForgeError> {
        let ids = self.videos()?;
        self.per_video(4, &ids, |i| {
            let captions = self.captions(&ids[i])?;
            let samples = self.samples(&ids[i], 3)?;
            let mut kept = Vec::with_capacity(samples.len());
            let mut dropped = Vec::new();
            for s in &samples {
                match stage4_score(s, &captions, judge, store, &self.cfg)? {
                    Stage4Outcome::Scored(s) => kept.push(s),
                    Stage4Outcome::Dropped { sample_id, reason } => {
                        log::warn!("{sample_id} dropped: {reason}");
                        dropped.push(Incident {
                            stage: 4,
                            item: sample_id,
                            reason,
                        });
                    }
                }
            }
            write_jsonl(&self.incidents_path(&ids[i], 4), &dropped)?;
            write_jsonl(&self.stage_path(&ids[i], 4), &kept)?;
            Ok(Some((kept.len(), dropped.len())))
        })
    }
}
