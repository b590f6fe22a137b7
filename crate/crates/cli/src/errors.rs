use lmmclip::config::ConfigError;
use lmmclip::embed::EmbedError;
use lmmclip::eval::EvalError;
use lmmclip::gateway::GatewayError;
use lmmclip::labels::LabelError;
use lmmclip::pipeline::PipelineError;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PROVIDER: u8 = 3;
pub const EXIT_FIXTURE_MISS: u8 = 4;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

fn gateway_code(e: &GatewayError) -> u8 {
    match e {
        GatewayError::FixtureMiss { .. } => EXIT_FIXTURE_MISS,
        GatewayError::Config(_) | GatewayError::Fixture { .. } | GatewayError::Image { .. } => EXIT_CONFIG,
        GatewayError::RetriesExhausted { .. }
        | GatewayError::Authentication(_)
        | GatewayError::SafetyRefusal { .. }
        | GatewayError::MalformedRequest(_)
        | GatewayError::NetworkDisabled => EXIT_PROVIDER,
        GatewayError::Cache(_) => EXIT_OTHER,
    }
}

fn embed_code(e: &EmbedError) -> u8 {
    match e {
        EmbedError::BackendUnavailable(_) => EXIT_PROVIDER,
        EmbedError::DimensionTooSmall { .. } | EmbedError::Model(_) | EmbedError::Tokenizer(_) | EmbedError::Label(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_OTHER,
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self::new(gateway_code(&e), e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Gateway(g) => gateway_code(g),
            PipelineError::Embed(em) => embed_code(em),
        };
        Self::new(code, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match &e {
            ConfigError::Gateway(g) => gateway_code(g),
            ConfigError::Embed(em) => embed_code(em),
            _ => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(p) => p.into(),
            EvalError::Io(m) => Self::new(EXIT_OTHER, m),
            other => Self::config(other.to_string()),
        }
    }
}
