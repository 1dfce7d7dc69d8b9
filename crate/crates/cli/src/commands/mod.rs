pub mod compare;
pub mod eval;
pub mod forge;
pub mod sample;

use framesift_core::prompt::TemplateStore;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn template_store(cfg: &RunConfig) -> Result<TemplateStore, CliError> {
    match &cfg.sampler.templates_dir {
        Some(dir) => Ok(TemplateStore::with_overrides(dir)?),
        None => Ok(TemplateStore::builtin()),
    }
}
