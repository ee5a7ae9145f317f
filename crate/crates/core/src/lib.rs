//! Continual-pretraining simulator for a toy two-tower contrastive model.
//!
//! The modules mirror the moving parts of a continual update cycle: compute
//! budgeting ([`budget`]), learning-rate schedules ([`schedules`]), concept
//! streams ([`streams`]), replay mixtures ([`mixture`]), the model itself
//! ([`model`]), update strategies ([`methods`]) and the loop tying them
//! together ([`engine`]).

pub mod budget;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod methods;
pub mod mixture;
pub mod model;
pub mod schedules;
pub mod streams;

pub use config::RunConfig;
pub use error::{Error, Result};
