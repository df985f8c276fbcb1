//! Generative model access.
//!
//! Both the policy (rollouts, summaries, bank decisions, answers) and the
//! evaluator (per-criterion grading) sit behind [`ModelClient`]. Production
//! traffic goes through [`http::ChatClient`], an OpenAI-style
//! chat-completions client; tests and golden runs use the deterministic
//! clients in [`mock`].

pub mod http;
pub mod mock;
pub mod parse;

use serde::{Deserialize, Serialize};

use crate::prompt::MultimodalPrompt;

pub use parse::{parse_action, parse_answer, parse_scores, render_scores, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Policy,
    Evaluator,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Policy => "policy",
            Role::Evaluator => "evaluator",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptInput {
    Multimodal(MultimodalPrompt),
    Text(String),
}

impl PromptInput {
    pub fn render(&self) -> String {
        match self {
            PromptInput::Multimodal(p) => p.render(),
            PromptInput::Text(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: PromptInput,
    pub temperature: f64,
    pub num_samples: usize,
    pub max_output_length: usize,
    pub role: Role,
}

impl GenerationRequest {
    pub const DEFAULT_MAX_OUTPUT: usize = 1024;

    pub fn new(prompt: PromptInput, role: Role) -> Self {
        Self {
            prompt,
            temperature: 1.0,
            num_samples: 1,
            max_output_length: Self::DEFAULT_MAX_OUTPUT,
            role,
        }
    }

    pub fn samples(mut self, n: usize) -> Self {
        self.num_samples = n;
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_output(mut self, n: usize) -> Self {
        self.max_output_length = n;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_samples == 0 {
            return Err(ModelError::InvalidRequest("num_samples must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ModelError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_output_length == 0 {
            return Err(ModelError::InvalidRequest("max_output_length must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub texts: Vec<String>,
    pub usage: Usage,
    pub model: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("mock script exhausted for role {role} at call {step}")]
    ScriptExhausted { role: Role, step: usize },
    #[error("mock script mismatch: {0}")]
    ScriptMismatch(String),
    #[error("cannot resolve image attachment {0:?}")]
    AttachmentUnresolvable(String),
    #[error("client configuration error: {0}")]
    Config(String),
}

impl ModelError {
    /// Errors caused by the remote side or the network.
    pub fn is_transport(&self) -> bool {
        matches!(self, ModelError::Transport { .. } | ModelError::Timeout)
    }
}

pub trait ModelClient: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError>;

    /// Several independent requests; results are in request order.
    /// Implementations may run them concurrently.
    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<Result<GenerationResponse, ModelError>> {
        reqs.iter().map(|r| self.generate(r)).collect()
    }
}

impl<T: ModelClient + ?Sized> ModelClient for Box<T> {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError> {
        (**self).generate(req)
    }

    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<Result<GenerationResponse, ModelError>> {
        (**self).generate_batch(reqs)
    }
}

impl<T: ModelClient + ?Sized> ModelClient for &T {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError> {
        (**self).generate(req)
    }

    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<Result<GenerationResponse, ModelError>> {
        (**self).generate_batch(reqs)
    }
}

/// The two model roles used by bank evolution.
#[derive(Clone, Copy)]
pub struct Clients<'a> {
    pub policy: &'a dyn ModelClient,
    pub evaluator: &'a dyn ModelClient,
}
