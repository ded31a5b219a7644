use std::fmt;

use tracer_core::calibration::CalibrationError;
use tracer_core::config::ConfigError;
use tracer_core::embeddings::EmbeddingError;
use tracer_core::evaluation::EvalError;
use tracer_core::risk::ParamError;
use tracer_core::signals::SignalError;
use tracer_core::synth::SynthError;
use tracer_core::trajectory::LogError;

/// Failure classes, one per exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    /// Unreadable or malformed input, bad flags, bad config or scenario.
    Input = 2,
    /// Inputs parse but their content cannot support the request.
    Data = 3,
    /// The embedding provider failed.
    Provider = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub class: ExitClass,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            class: ExitClass::Input,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            class: ExitClass::Data,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.class as i32
    }

    fn with(class: ExitClass, e: impl fmt::Display) -> Self {
        Self {
            class,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::with(ExitClass::Input, e)
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        Self::with(ExitClass::Input, e)
    }
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        let class = match e {
            LogError::Invariant { .. } | LogError::DuplicateEpisode { .. } => ExitClass::Data,
            _ => ExitClass::Input,
        };
        Self::with(class, e)
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        let class = match e {
            EmbeddingError::Config(_) => ExitClass::Input,
            _ => ExitClass::Provider,
        };
        Self::with(class, e)
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::Embedding(inner) => inner.into(),
            SignalError::Config(_) => Self::with(ExitClass::Input, e),
            SignalError::Contract { .. } => Self::with(ExitClass::Data, e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let class = match e {
            EvalError::Io { .. } | EvalError::Format { .. } => ExitClass::Input,
            _ => ExitClass::Data,
        };
        Self::with(class, e)
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Eval(inner) => inner.into(),
            CalibrationError::Grid(_) => Self::with(ExitClass::Input, e),
            _ => Self::with(ExitClass::Data, e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Signal(inner) => inner.into(),
            _ => Self::with(ExitClass::Input, e),
        }
    }
}
