//! Motivational-interviewing session laboratory: counsellor and observer
//! agents, virtual clients, automated behavioural coding, agreement and
//! outcome statistics, and study data handling.

pub mod automisc;
pub mod domain;
pub mod engine;
pub mod gateway;
pub mod prompts;
pub mod selfplay;
pub mod stats;

pub use domain::*;
pub use engine::{CounsellorEngine, EngineConfig, EngineError, SessionState};
pub use gateway::{Agent, Gateway, GatewayConfig, GatewayError, MockBackend};
pub use prompts::PromptCatalog;
pub mod store;
