//! Role-based access to chat-completion endpoints.
//!
//! Callers address models by role (`reasoner`, `validator`, `annotator`,
//! `patient-context-llm`, ...). A [`Gateway`] owns the role table, a
//! [`Backend`] that performs the actual request, per-role admission control,
//! retries with exponential backoff, and an append-only [`RunLog`].

mod config;
mod gateway;
mod http;
mod json;
mod mock;
mod qa;

pub use config::{GatewayConfig, RoleConfig, ROLE_ANNOTATOR, ROLE_PATIENT_CONTEXT, ROLE_REASONER, ROLE_VALIDATOR};
pub use gateway::{fingerprint, Backend, ChatExchange, ChatMessage, Gateway, RunLog, Speaker, TransportError};
pub use http::HttpBackend;
pub use json::{extract_first_json_object, parse_json_response};
pub use mock::{MissPolicy, MockBackend, MockRule, MockScript};
pub use qa::{normalize_answer_letter, parse_qa_response, QAResponse, ANSWER_LETTERS};
