//! Failure classes and their exit codes.

use std::fmt;
use std::path::Path;

use scengen_core::campaign::CampaignError;
use scengen_core::config::ConfigError;
use scengen_core::dsl::DslError;
use scengen_core::ips::ParseError;
use scengen_core::llm::LlmError;
use scengen_core::logicalize::LogicalizeError;
use scengen_core::search::SearchError;
use scengen_core::triage::TriageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags, bad configuration, or missing or malformed input.
    Usage,
    /// A pipeline stage gave up: extraction or conversion exhausted,
    /// unknown transcript digest, missing default range, sampling failure.
    Pipeline,
    /// A result violates an invariant the pipeline guarantees.
    Internal,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Pipeline => 3,
            Kind::Internal => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: message.into() }
    }

    pub fn pipeline(message: impl Into<String>) -> Self {
        Self { kind: Kind::Pipeline, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { kind: Kind::Internal, message: message.into() }
    }

    /// Prefixes the message with where it happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn write_output(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::pipeline(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::pipeline(format!("cannot write {}: {e}", path.display())))
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<DslError> for CliError {
    fn from(e: DslError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        let kind = match &e {
            LlmError::EmptyReport
            | LlmError::IllegalIps(_)
            | LlmError::InvalidConfig(_)
            | LlmError::Transcript { .. } => Kind::Usage,
            LlmError::ExtractionFailed { .. }
            | LlmError::ConversionFailed { .. }
            | LlmError::UnknownDigest { .. }
            | LlmError::Request(_)
            | LlmError::ScriptExhausted => Kind::Pipeline,
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<LogicalizeError> for CliError {
    fn from(e: LogicalizeError) -> Self {
        let kind = match &e {
            LogicalizeError::BadTable(_) => Kind::Usage,
            _ => Kind::Pipeline,
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        let kind = match &e {
            SearchError::InvalidConfig(_) => Kind::Usage,
            SearchError::SamplingExhausted { .. } | SearchError::MutationExhausted { .. } => Kind::Pipeline,
            // every simulated case was validated first
            SearchError::Sim(_) | SearchError::Fitness(_) => Kind::Internal,
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<TriageError> for CliError {
    fn from(e: TriageError) -> Self {
        CliError::internal(e.to_string())
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Run { scenario, method, repetition, source } => {
                CliError::from(source).context(format!("{scenario} ({method}, repetition {repetition})"))
            }
            CampaignError::Triage(t) => t.into(),
        }
    }
}
