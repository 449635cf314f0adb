//! OpenAI-compatible gateway: routing, budgets, retrieval-augmented chat and
//! the admin API.

pub mod config;
pub mod conversations;
pub mod error;
pub mod guard;
pub mod history;
pub mod mock;
pub mod router;
pub mod service;
pub mod wire;

pub use config::GatewayConfig;
pub use error::ApiError;
pub use router::{Backend, Router, SecretStore};
pub use service::{app, serve, AppState, Gateway};
