use std::fmt;

use framesift_core::engine::EngineError;
use framesift_core::eval::EvalError;
use framesift_core::forge::ForgeError;
use framesift_core::frame::FrameError;
use framesift_core::prompt::PromptError;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Backend,
    Data,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Backend => 3,
            Kind::Data => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: m.into() }
    }

    pub fn backend(m: impl Into<String>) -> Self {
        Self { kind: Kind::Backend, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: m.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<FrameError> for CliError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::InvalidCapacity { .. }
            | FrameError::InvalidStride { .. }
            | FrameError::InvalidSampleRatio(_)
            | FrameError::RateExceedsSource { .. } => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::UnknownTaskPrompt(_) | PromptError::EmptyQuery => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Frame(f) => f.into(),
            EngineError::Prompt(p) => p.into(),
            EngineError::Backend { .. } | EngineError::Output { .. } => CliError::backend(e.to_string()),
            EngineError::WindowTooLarge { .. }
            | EngineError::PrefilterExceedsWindow { .. }
            | EngineError::InvalidConfig(_) => CliError::usage(e.to_string()),
            EngineError::DuplicateFrame(_) | EngineError::MixedScoreKinds => CliError::data(e.to_string()),
        }
    }
}

impl From<ForgeError> for CliError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Frame(f) => f.into(),
            ForgeError::Prompt(p) => p.into(),
            ForgeError::AnnotatorUnavailable(_) => CliError::backend(e.to_string()),
            ForgeError::InvalidConfig(_) | ForgeError::RunMismatch => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::data(e.to_string())
    }
}
