//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use framesift_core::engine::remote::Endpoint;
use framesift_core::engine::{DecodeParams, DedupPolicy, EmissionOrder, SamplerConfig, WindowErrorPolicy};
use framesift_core::forge::ForgeConfig;
use framesift_core::frame::{DEFAULT_SAMPLE_RATIO, MAX_WINDOW_CAPACITY};
use framesift_core::relevance::ParseMode;

use crate::error::CliError;

pub const SCORER_TOKEN_ENV: &str = "SCORER_TOKEN";
pub const ANNOTATOR_TOKEN_ENV: &str = "ANNOTATOR_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub sample_ratio: f64,
    pub window_capacity: usize,
    /// Defaults to the window capacity.
    pub stride: Option<usize>,
    pub n_ctx: usize,
    pub emission_order: EmissionOrder,
    pub parse_mode: ParseMode,
    pub task_prompt_id: String,
    pub templates_dir: Option<PathBuf>,
    pub jobs: usize,
    pub transport_retries: u32,
    pub format_retries: u32,
    pub on_window_error: WindowErrorPolicy,
    pub dedup: DedupPolicy,
    pub prefilter_k: usize,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            sample_ratio: DEFAULT_SAMPLE_RATIO,
            window_capacity: MAX_WINDOW_CAPACITY,
            stride: None,
            n_ctx: s.n_ctx,
            emission_order: s.emission_order,
            parse_mode: s.parse_mode,
            task_prompt_id: s.task_prompt_id,
            templates_dir: None,
            jobs: s.jobs,
            transport_retries: s.transport_retries,
            format_retries: s.format_retries,
            on_window_error: s.on_window_error,
            dedup: s.dedup,
            prefilter_k: MAX_WINDOW_CAPACITY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    pub timeout_s: Option<f64>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub inline_images: bool,
}

impl ModelSection {
    pub fn decode(&self) -> DecodeParams {
        let d = DecodeParams::default();
        DecodeParams {
            temperature: self.temperature.unwrap_or(d.temperature),
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
        }
    }

    /// Endpoint with its secret read from `token_env`.
    pub fn endpoint(&self, what: &str, token_env: &str) -> Result<Endpoint, CliError> {
        let url = self
            .endpoint
            .clone()
            .ok_or_else(|| CliError::usage(format!("no {what} endpoint configured")))?;
        let mut ep = Endpoint::new(url);
        if let Some(t) = self.timeout_s {
            ep.timeout_s = t;
        }
        ep.token = std::env::var(token_env).ok().filter(|t| !t.is_empty());
        Ok(ep)
    }
}

/// Everything a command may need. Tokens never appear here.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerSection,
    pub scorer: ModelSection,
    pub embedder: ModelSection,
    pub annotator: ModelSection,
    pub forge: ForgeConfig,
}

impl RunConfig {
    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            window_capacity: s.window_capacity,
            stride: s.stride.unwrap_or(s.window_capacity),
            n_ctx: s.n_ctx,
            emission_order: s.emission_order,
            parse_mode: s.parse_mode,
            task_prompt_id: s.task_prompt_id.clone(),
            jobs: s.jobs,
            transport_retries: s.transport_retries,
            format_retries: s.format_retries,
            on_window_error: s.on_window_error,
            dedup: s.dedup,
        }
    }

    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        // show the stride actually used
        v["sampler"]["stride"] = self.sampler.stride.unwrap_or(self.sampler.window_capacity).into();
        v
    }
}

/// One flag override: a dotted key path and its value.
pub type Override = (&'static str, Value);

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Map::new());
        }
        cur = cur.get_mut(*p).expect("just inserted");
    }
    cur[parts[parts.len() - 1]] = value;
}

fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => Value::from(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

/// Resolves the effective configuration.
///
/// `base` replaces the built-in defaults when given (a forge run reuses the
/// configuration it was created with).
pub fn resolve(base: Option<RunConfig>, file: Option<&Path>, flags: Vec<Override>) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(base.unwrap_or_default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("reading config {}: {e}", path.display())))?;
        let parsed: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        merge(&mut value, toml_to_json(parsed));
    }
    for (path, v) in flags {
        set_path(&mut value, path, v);
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))?;
    cfg.sampler_config()
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    if !(cfg.sampler.sample_ratio.is_finite() && cfg.sampler.sample_ratio > 0.0) {
        return Err(CliError::usage(format!("sample_ratio {} must be positive", cfg.sampler.sample_ratio)));
    }
    if cfg.sampler.prefilter_k == 0 {
        return Err(CliError::usage("prefilter_k must be at least 1"));
    }
    cfg.forge.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

/// Collects `Some` flags into overrides.
#[derive(Default)]
pub struct Flags(pub Vec<Override>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, path: &'static str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((path, serde_json::to_value(v).expect("flag serializes")));
        }
        self
    }
}
