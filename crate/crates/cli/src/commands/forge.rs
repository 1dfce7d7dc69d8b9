use std::path::Path;

use serde_json::{json, Value};

use framesift_core::engine::remote::RemoteEmbedder;
use framesift_core::engine::{EmbeddingSimilarity, SimilarityBackend};
use framesift_core::forge::{
    aggregate_et, dataset_stats, Annotator, EtRecord, ForgeError, ForgeRun, QASample, RemoteAnnotator, RunManifest,
    StageSummary, StubAnnotator, StubSimilarity,
};

use crate::config::{resolve, Flags, RunConfig, ANNOTATOR_TOKEN_ENV, SCORER_TOKEN_ENV};
use crate::error::CliError;
use crate::io::{read_json, read_jsonl, read_manifests, write_json, write_jsonl};
use crate::{ConfigArgs, ForgeArgs, ForgeCommand};

use super::template_store;

const RUN_FILE: &str = "run.json";

fn flags(forge: &ForgeArgs, common: &ConfigArgs) -> Flags {
    let mut f = Flags::default();
    forge.flags(&mut f);
    f.set("forge.seed", common.seed).set("sampler.jobs", common.jobs);
    f
}

/// Configuration for a run directory: the one it was created with, then the
/// config file, then flags.
fn run_config(forge: &ForgeArgs, common: &ConfigArgs) -> Result<RunConfig, CliError> {
    let run_file = forge.run.join(RUN_FILE);
    let base = if run_file.exists() {
        let m: RunManifest = read_json(&run_file)?;
        Some(RunConfig {
            forge: m.config,
            ..RunConfig::default()
        })
    } else {
        None
    };
    resolve(base, common.config.as_deref(), flags(forge, common).0)
}

fn open(forge: &ForgeArgs, cfg: &RunConfig, create: bool) -> Result<ForgeRun, CliError> {
    if !create && !forge.run.join(RUN_FILE).exists() {
        return Err(ForgeError::MissingStage {
            video_id: "*".into(),
            stage: 1,
        }
        .into());
    }
    Ok(ForgeRun::open(&forge.run, Some(cfg.forge.clone()), cfg.sampler.jobs)?)
}

fn annotator(forge: &ForgeArgs, cfg: &RunConfig) -> Result<Box<dyn Annotator>, CliError> {
    if forge.stub {
        return Ok(Box::new(StubAnnotator::new(cfg.forge.seed)));
    }
    let m = &cfg.annotator;
    let ep = m.endpoint("annotator", ANNOTATOR_TOKEN_ENV)?;
    Ok(Box::new(RemoteAnnotator::new(ep, m.model_id.clone().unwrap_or_default(), m.decode())))
}

fn similarity(forge: &ForgeArgs, cfg: &RunConfig) -> Result<Box<dyn SimilarityBackend>, CliError> {
    if forge.stub {
        return Ok(Box::new(StubSimilarity { seed: cfg.forge.seed }));
    }
    let ep = cfg.embedder.endpoint("embedder", SCORER_TOKEN_ENV)?;
    Ok(Box::new(EmbeddingSimilarity::new(RemoteEmbedder::new(ep))))
}

fn report(out: Option<&Path>, body: Value, config: Value) -> Result<(), CliError> {
    let mut v = body;
    v["config"] = config;
    println!("{}", serde_json::to_string_pretty(&v).expect("report serializes"));
    if let Some(p) = out {
        write_json(p, &v)?;
    }
    Ok(())
}

fn summaries(s: &[StageSummary]) -> Value {
    json!({ "stages": s })
}

pub fn run(cmd: ForgeCommand) -> Result<(), CliError> {
    match cmd {
        ForgeCommand::Stage1 { manifest, forge, common } => {
            let cfg = run_config(&forge, &common)?;
            let manifests = read_manifests(&manifest)?;
            let run = open(&forge, &cfg, true)?;
            let s = run.stage1(&manifests, annotator(&forge, &cfg)?.as_ref(), &template_store(&cfg)?)?;
            report(forge.out.as_deref(), summaries(&[s]), cfg.echo())
        }
        ForgeCommand::Stage2 { forge, common } => {
            let cfg = run_config(&forge, &common)?;
            let run = open(&forge, &cfg, false)?;
            let s = run.stage2(annotator(&forge, &cfg)?.as_ref(), &template_store(&cfg)?)?;
            report(forge.out.as_deref(), summaries(&[s]), cfg.echo())
        }
        ForgeCommand::Stage3 { forge, common } => {
            let cfg = run_config(&forge, &common)?;
            let run = open(&forge, &cfg, false)?;
            let s = run.stage3(similarity(&forge, &cfg)?.as_ref())?;
            report(forge.out.as_deref(), summaries(&[s]), cfg.echo())
        }
        ForgeCommand::Stage4 { forge, common } => {
            let cfg = run_config(&forge, &common)?;
            let run = open(&forge, &cfg, false)?;
            let s = run.stage4(annotator(&forge, &cfg)?.as_ref(), &template_store(&cfg)?)?;
            report(forge.out.as_deref(), summaries(&[s]), cfg.echo())
        }
        ForgeCommand::Run { manifest, forge, common } => {
            let cfg = run_config(&forge, &common)?;
            let manifests = read_manifests(&manifest)?;
            let run = open(&forge, &cfg, true)?;
            let store = template_store(&cfg)?;
            let ann = annotator(&forge, &cfg)?;
            let sim = similarity(&forge, &cfg)?;
            let s = vec![
                run.stage1(&manifests, ann.as_ref(), &store)?,
                run.stage2(ann.as_ref(), &store)?,
                run.stage3(sim.as_ref())?,
                run.stage4(ann.as_ref(), &store)?,
            ];
            let stats = dataset_stats(&run.dataset()?);
            let mut body = summaries(&s);
            body["stats"] = serde_json::to_value(stats).expect("stats serialize");
            report(forge.out.as_deref(), body, cfg.echo())
        }
        ForgeCommand::AggregateEt { input, out, common } => {
            let mut f = Flags::default();
            common.flags(&mut f);
            let cfg = resolve(None, common.config.as_deref(), f.0)?;
            let records: Vec<EtRecord> = read_jsonl(&input)?;
            let merged = aggregate_et(&records);
            write_jsonl(&out, &merged)?;
            let body = json!({ "records_in": records.len(), "records_out": merged.len(), "out": out });
            // records are JSON lines, so the config goes next to them
            let mut side = out.clone().into_os_string();
            side.push(".config.json");
            report(Some(Path::new(&side)), body, cfg.echo())
        }
        ForgeCommand::Stats {
            run,
            dataset,
            out,
            common,
        } => {
            let (samples, config): (Vec<QASample>, Value) = match (run, dataset) {
                (Some(dir), _) => {
                    let run = ForgeRun::open(&dir, None, 1)?;
                    let cfg = RunConfig {
                        forge: run.config().clone(),
                        ..RunConfig::default()
                    };
                    (run.dataset()?, cfg.echo())
                }
                (None, Some(path)) => {
                    let mut f = Flags::default();
                    common.flags(&mut f);
                    let cfg = resolve(None, common.config.as_deref(), f.0)?;
                    (read_jsonl(&path)?, cfg.echo())
                }
                (None, None) => return Err(CliError::usage("stats needs --run or --dataset")),
            };
            let stats = dataset_stats(&samples);
            print_stats(&stats);
            let body = json!({ "stats": stats });
            let mut v = body;
            v["config"] = config;
            if let Some(p) = out.as_deref() {
                write_json(p, &v)?;
            }
            println!("config {}", serde_json::to_string(&v["config"]).expect("config serializes"));
            Ok(())
        }
    }
}

fn print_stats(s: &framesift_core::forge::DatasetStats) {
    println!("samples               {}", s.n_samples);
    println!("videos                {}", s.n_videos);
    println!("mean duration (s)     {:.1}", s.mean_duration_s);
    println!("mean captioned frames {:.1}", s.mean_captioned_frames);
    println!("relevance rate        {:.4}", s.relevance_rate);
    println!("mean retrieval ratio  {:.4}", s.mean_retrieval_ratio);
    println!("multiple choice       {:.4}", s.multiple_choice_fraction);
    println!("negatives             {:.4}", s.negative_fraction);
    let hist: Vec<String> = s.score_histogram.iter().map(|c| c.to_string()).collect();
    println!("scores 0..5           {}", hist.join(" "));
}
