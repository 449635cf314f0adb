//! Core library of the Verde gateway: storage, tenancy, metering, retrieval
//! and document intake.

pub mod chat;
pub mod error;
pub mod intake;
pub mod metering;
pub mod persistence;
pub mod rag;
pub mod tenancy;

pub use error::{Error, Result};
