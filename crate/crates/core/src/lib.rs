//! Collusion-aware black-box traitor tracing for federated learning.
//!
//! The aggregator gives every data-owner an individually watermarked copy of
//! the global model. Each copy answers a shared set of trigger inputs with
//! that owner's codeword from a q-ary fingerprinting code, so a leaked model,
//! even one merged from several colluders' copies, can be traced back with
//! label-only queries.

pub mod attack;
pub mod autodiff;
mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod harness;
pub mod model;
pub mod rng;
pub mod tardos;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
