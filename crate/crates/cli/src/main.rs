mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Flags;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "framesift", version, about = "Query-aware frame sampling for long videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select frames for a question with one scorer.
    Sample(SampleArgs),
    /// Similarity prefilter followed by one generative window.
    Hybrid(HybridArgs),
    /// Score predictions against references.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Build a frame-relevance dataset in a run directory.
    #[command(subcommand)]
    Forge(ForgeCommand),
    /// Compare samplers on a synthetic scenario over frame budgets.
    Compare(CompareArgs),
}

/// Configuration flags shared by every command. Unset flags fall back to
/// the config file, then to built-in defaults.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Upper bound on concurrent windows or videos.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl ConfigArgs {
    pub(crate) fn flags(&self, f: &mut Flags) {
        f.set("sampler.seed", self.seed).set("sampler.jobs", self.jobs);
    }
}

#[derive(Args, Clone, Default)]
pub struct SamplerArgs {
    #[arg(long)]
    pub sample_ratio: Option<f64>,
    #[arg(long)]
    pub window_capacity: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub n_ctx: Option<usize>,
    /// chronological | by_score
    #[arg(long)]
    pub emission_order: Option<String>,
    /// strict | lenient
    #[arg(long)]
    pub parse_mode: Option<String>,
    #[arg(long)]
    pub task_prompt: Option<String>,
    /// Directory of *.txt templates overriding the built-in ones.
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    /// skip-window | fail-fast
    #[arg(long)]
    pub on_window_error: Option<String>,
    /// max | reject
    #[arg(long)]
    pub dedup: Option<String>,
    #[arg(long)]
    pub scorer_endpoint: Option<String>,
    #[arg(long)]
    pub scorer_model: Option<String>,
    #[arg(long)]
    pub embedder_endpoint: Option<String>,
}

impl SamplerArgs {
    pub(crate) fn flags(&self, f: &mut Flags) {
        f.set("sampler.sample_ratio", self.sample_ratio)
            .set("sampler.window_capacity", self.window_capacity)
            .set("sampler.stride", self.stride)
            .set("sampler.n_ctx", self.n_ctx)
            .set("sampler.emission_order", self.emission_order.clone())
            .set("sampler.parse_mode", self.parse_mode.clone())
            .set("sampler.task_prompt_id", self.task_prompt.clone())
            .set("sampler.templates_dir", self.templates_dir.clone())
            .set("sampler.on_window_error", self.on_window_error.clone())
            .set("sampler.dedup", self.dedup.clone())
            .set("scorer.endpoint", self.scorer_endpoint.clone())
            .set("scorer.model_id", self.scorer_model.clone())
            .set("embedder.endpoint", self.embedder_endpoint.clone());
    }
}

#[derive(Args, Clone)]
pub struct QueryArgs {
    /// Frame manifest (JSON lines), or - for stdin.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Video to use when the manifest holds several.
    #[arg(long)]
    pub video_id: Option<String>,
    #[arg(long)]
    pub query: String,
    /// Answer option; repeat for each option in order.
    #[arg(long = "option")]
    pub options: Vec<String>,
    /// Subtitles as JSON lines of {start_s, end_s, text}.
    #[arg(long)]
    pub subtitles: Option<PathBuf>,
    /// Relevant manifest indices for oracle backends (JSON list or index->score map).
    #[arg(long)]
    pub planted: Option<PathBuf>,
    /// Where to write the plan.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleBackend {
    Uniform,
    /// Generative scorer that knows the planted frames.
    Oracle,
    /// Remote generative scorer.
    Remote,
    /// Remote embedding similarity.
    Similarity,
    OracleSimilarity,
    SyntheticSimilarity,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerativeBackendArg {
    Oracle,
    Remote,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityBackendArg {
    Remote,
    Oracle,
    Synthetic,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, value_enum)]
    backend: SampleBackend,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct HybridArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, value_enum)]
    backend: GenerativeBackendArg,
    #[arg(long, value_enum, default_value = "remote")]
    similarity: SimilarityBackendArg,
    #[arg(long)]
    prefilter_k: Option<usize>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Subcommand)]
pub enum EvalCommand {
    /// R1@θ and mIoU from JSON lines of {item_id, start_s, end_s}.
    Grounding {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "0.3,0.5,0.7")]
        thresholds: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Multiple-choice accuracy from JSON lines of {item_id, answer}.
    Qa {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Frame recall and precision of a plan against annotated manifest indices.
    Recall {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        annotated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

#[derive(Args, Clone, Default)]
pub struct ForgeArgs {
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Use the offline stub annotators and similarity.
    #[arg(long)]
    pub stub: bool,
    #[arg(long)]
    pub caption_fps: Option<f64>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub mc_fraction: Option<f64>,
    #[arg(long)]
    pub negative_rate: Option<f64>,
    #[arg(long)]
    pub target_ratio: Option<f64>,
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    #[arg(long)]
    pub annotator_endpoint: Option<String>,
    #[arg(long)]
    pub annotator_model: Option<String>,
    #[arg(long)]
    pub embedder_endpoint: Option<String>,
    /// Also write the stage summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ForgeArgs {
    pub(crate) fn flags(&self, f: &mut Flags) {
        f.set("forge.caption_fps", self.caption_fps)
            .set("forge.chunk_size", self.chunk_size)
            .set("forge.mc_fraction", self.mc_fraction)
            .set("forge.negative_rate", self.negative_rate)
            .set("forge.target_ratio", self.target_ratio)
            .set("sampler.templates_dir", self.templates_dir.clone())
            .set("annotator.endpoint", self.annotator_endpoint.clone())
            .set("annotator.model_id", self.annotator_model.clone())
            .set("embedder.endpoint", self.embedder_endpoint.clone());
    }
}

#[derive(Subcommand)]
pub enum ForgeCommand {
    /// Caption every video of a manifest.
    Stage1 {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        forge: ForgeArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Generate one question per caption chunk.
    Stage2 {
        #[command(flatten)]
        forge: ForgeArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Extend relevant frames by similarity.
    Stage3 {
        #[command(flatten)]
        forge: ForgeArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Grade candidate frames with the judge.
    Stage4 {
        #[command(flatten)]
        forge: ForgeArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// All four stages.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        forge: ForgeArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Merge timestamp-label records per video.
    AggregateEt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Dataset statistics of a finished run or a dataset file.
    Stats {
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        run: Option<PathBuf>,
        /// Dataset as JSON lines of samples.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario JSON with planted relevant segments.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "10,20,30,40,50")]
    budgets: String,
    #[arg(long)]
    prefilter_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    common: ConfigArgs,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample(a) => {
            let mut f = Flags::default();
            a.sampler.flags(&mut f);
            a.common.flags(&mut f);
            commands::sample::run_sample(&a.query, a.backend, a.common.config.as_deref(), f)
        }
        Command::Hybrid(a) => {
            let mut f = Flags::default();
            a.sampler.flags(&mut f);
            a.common.flags(&mut f);
            f.set("sampler.prefilter_k", a.prefilter_k);
            commands::sample::run_hybrid(&a.query, a.backend, a.similarity, a.common.config.as_deref(), f)
        }
        Command::Eval(e) => commands::eval::run(e),
        Command::Forge(c) => commands::forge::run(c),
        Command::Compare(a) => {
            let mut f = Flags::default();
            a.sampler.flags(&mut f);
            a.common.flags(&mut f);
            f.set("sampler.prefilter_k", a.prefilter_k);
            commands::compare::run(&a.scenario, &a.budgets, &a.out, a.common.config.as_deref(), f)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
