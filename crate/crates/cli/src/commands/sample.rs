use std::collections::BTreeMap;
use std::path::Path;

use framesift_core::engine::remote::{RemoteEmbedder, RemoteScorer};
use framesift_core::engine::{
    hybrid_sample, sample, EmbeddingSimilarity, GenerativeBackend, OracleEmbedder, OracleScorer, PlanFile,
    PlanProvenance, QueryExtras, SamplePlan, Scorer, SimilarityBackend, SyntheticEmbedder,
};
use framesift_core::frame::{build_candidate_pool, CandidatePool};
use framesift_core::prompt::TimedText;
use framesift_core::relevance::Score;

use crate::config::{resolve, Flags, RunConfig, SCORER_TOKEN_ENV};
use crate::error::CliError;
use crate::io::{read_jsonl, read_one_manifest, read_source_scores, write_json};
use crate::{GenerativeBackendArg, QueryArgs, SampleBackend, SimilarityBackendArg};

use super::template_store;

struct Prepared {
    cfg: RunConfig,
    pool: CandidatePool,
    extras: QueryExtras,
    /// Planted relevance keyed by pool index.
    planted: Option<BTreeMap<usize, Score>>,
}

fn prepare(q: &QueryArgs, config: Option<&Path>, flags: Flags) -> Result<Prepared, CliError> {
    let cfg = resolve(None, config, flags.0)?;
    let manifest = read_one_manifest(&q.manifest, q.video_id.as_deref())?;
    let pool = build_candidate_pool(&manifest, cfg.sampler.sample_ratio)?;
    let subtitles: Vec<TimedText> = match &q.subtitles {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let planted = match &q.planted {
        Some(p) => {
            let by_source = read_source_scores(p)?;
            Some(
                pool.frames
                    .iter()
                    .filter_map(|f| by_source.get(&f.source_index).map(|s| (f.global_index, *s)))
                    .collect(),
            )
        }
        None => None,
    };
    Ok(Prepared {
        cfg,
        pool,
        extras: QueryExtras {
            options: q.options.clone(),
            subtitles,
        },
        planted,
    })
}

impl Prepared {
    fn planted(&self, what: &str) -> Result<&BTreeMap<usize, Score>, CliError> {
        self.planted
            .as_ref()
            .ok_or_else(|| CliError::usage(format!("the {what} backend needs --planted")))
    }

    fn planted_globals(&self, what: &str) -> Result<Vec<usize>, CliError> {
        Ok(self
            .planted(what)?
            .iter()
            .filter(|(_, s)| s.is_relevant())
            .map(|(g, _)| *g)
            .collect())
    }

    fn remote_scorer(&self) -> Result<RemoteScorer, CliError> {
        let m = &self.cfg.scorer;
        let ep = m.endpoint("scorer", SCORER_TOKEN_ENV)?;
        let model = m.model_id.clone().unwrap_or_default();
        Ok(RemoteScorer::new(ep, model, m.decode()).inline_images(m.inline_images))
    }

    fn similarity(&self, which: SimilarityBackendArg) -> Result<Box<dyn SimilarityBackend>, CliError> {
        Ok(match which {
            SimilarityBackendArg::Remote => {
                let ep = self.cfg.embedder.endpoint("embedder", SCORER_TOKEN_ENV)?;
                Box::new(EmbeddingSimilarity::new(RemoteEmbedder::new(ep)))
            }
            SimilarityBackendArg::Oracle => {
                Box::new(EmbeddingSimilarity::new(OracleEmbedder::new(self.planted_globals("oracle similarity")?)))
            }
            SimilarityBackendArg::Synthetic => Box::new(EmbeddingSimilarity::new(SyntheticEmbedder::new(
                self.planted_globals("synthetic similarity")?,
                self.cfg.sampler.seed,
            ))),
        })
    }

    fn generative(&self, which: GenerativeBackendArg) -> Result<Box<dyn GenerativeBackend>, CliError> {
        Ok(match which {
            GenerativeBackendArg::Oracle => Box::new(OracleScorer::new(self.planted("oracle")?.clone())),
            GenerativeBackendArg::Remote => Box::new(self.remote_scorer()?),
        })
    }

    fn write(
        &self,
        q: &QueryArgs,
        scorer: &str,
        plan: &SamplePlan,
        prefilter: Option<framesift_core::engine::PrefilterReport>,
    ) -> Result<(), CliError> {
        let provenance = PlanProvenance {
            scorer: scorer.to_string(),
            n_ret: plan.n_ret,
            pool_size: self.pool.len(),
            sampling_period_s: self.pool.sampling_period(),
            windows: plan.windows.clone(),
            prefilter,
        };
        let file = PlanFile::new(&self.pool.video_id, &q.query, plan, provenance, self.cfg.echo());
        write_json(&q.out, &file)?;
        print_summary(&file);
        let skipped = |w: &framesift_core::engine::WindowProvenance| {
            w.incidents.iter().any(|i| i.starts_with("window skipped"))
        };
        if !plan.windows.is_empty() && plan.windows.iter().all(skipped) {
            return Err(CliError::backend("every window failed; the plan is empty"));
        }
        Ok(())
    }
}

fn print_summary(file: &PlanFile) {
    let p = &file.provenance;
    println!("video     {}", file.video_id);
    println!("scorer    {}", p.scorer);
    println!("pool      {} frames, period {:.3} s", p.pool_size, p.sampling_period_s);
    println!("windows   {}", p.windows.len());
    if let Some(pre) = &p.prefilter {
        println!("prefilter {} of {} kept", pre.survivors.len(), pre.pool_size);
    }
    println!("relevant  {}", p.n_ret);
    println!("selected  {} (n_ctx {})", file.k, file.n_ctx);
    let n_incidents: usize = p.windows.iter().map(|w| w.incidents.len()).sum();
    if n_incidents > 0 {
        println!("incidents {n_incidents}");
    }
    println!("config    {}", serde_json::to_string(&file.config).expect("config serializes"));
}

pub fn run_sample(q: &QueryArgs, backend: SampleBackend, config: Option<&Path>, flags: Flags) -> Result<(), CliError> {
    let prep = prepare(q, config, flags)?;
    let store = template_store(&prep.cfg)?;
    let scfg = prep.cfg.sampler_config();
    let generative;
    let similarity;
    let scorer = match backend {
        SampleBackend::Uniform => Scorer::Uniform,
        SampleBackend::Oracle => {
            generative = prep.generative(GenerativeBackendArg::Oracle)?;
            Scorer::Generative(generative.as_ref())
        }
        SampleBackend::Remote => {
            generative = prep.generative(GenerativeBackendArg::Remote)?;
            Scorer::Generative(generative.as_ref())
        }
        SampleBackend::Similarity | SampleBackend::OracleSimilarity | SampleBackend::SyntheticSimilarity => {
            let which = match backend {
                SampleBackend::Similarity => SimilarityBackendArg::Remote,
                SampleBackend::OracleSimilarity => SimilarityBackendArg::Oracle,
                _ => SimilarityBackendArg::Synthetic,
            };
            similarity = prep.similarity(which)?;
            Scorer::Similarity(similarity.as_ref())
        }
    };
    let tag = match scorer {
        Scorer::Generative(b) => b.tag().to_string(),
        Scorer::Similarity(b) => b.tag().to_string(),
        Scorer::Uniform => "uniform".to_string(),
    };
    let plan = sample(&prep.pool, &q.query, &prep.extras, scorer, &store, &scfg)?;
    prep.write(q, &tag, &plan, None)
}

pub fn run_hybrid(
    q: &QueryArgs,
    backend: GenerativeBackendArg,
    similarity: SimilarityBackendArg,
    config: Option<&Path>,
    flags: Flags,
) -> Result<(), CliError> {
    let prep = prepare(q, config, flags)?;
    let store = template_store(&prep.cfg)?;
    let scfg = prep.cfg.sampler_config();
    let sim = prep.similarity(similarity)?;
    let gen = prep.generative(backend)?;
    let out = hybrid_sample(
        &prep.pool,
        &q.query,
        &prep.extras,
        sim.as_ref(),
        gen.as_ref(),
        prep.cfg.sampler.prefilter_k,
        &store,
        &scfg,
    )?;
    let tag = format!("{}+{}", sim.tag(), gen.tag());
    prep.write(q, &tag, &out.plan, Some(out.prefilter))
}
