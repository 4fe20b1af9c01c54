//! Cross-register diagnostic drift audit for text completion endpoints.

mod audit;
mod corpus;
mod endpoint;
mod mock;
mod parse;
mod prompt;

pub use audit::{compare_models, run_drift_audit, AuditOptions, CaseOutcome, DriftProfile, FailureMode, ModelComparison, RegisterDelta, RegisterSummary};
pub use corpus::{load_corpus, parse_corpus, sample_corpus, CorpusManifest, Register, Vignette, SAMPLE_CORPUS_JSON};
pub use endpoint::{CompletionBackend, Completion, HttpBackend, InferenceEndpoint};
pub use mock::{MockGenerateServer, MockScript, SAMPLE_SCRIPT_LLAMA, SAMPLE_SCRIPT_NATLAS};
pub use parse::{parse_label, ParsedLabel};
pub use prompt::build_prompt;

use thiserror::Error;

/// Failure talking to a completion endpoint.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EndpointError {
    #[error("request to {url} failed after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: u32,
        message: String,
    },

    #[error("{url} returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status {
        url: String,
        status: u16,
        body: String,
        attempts: u32,
    },

    /// The server answered 200 but the body was not a completion.
    #[error("unexpected reply from {url}: {message}")]
    Protocol { url: String, message: String },
}
