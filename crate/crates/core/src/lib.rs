//! Deterministic federated early-exit training simulator.
//!
//! Clients train a multi-exit residual backbone only up to a depth chosen
//! from their memory budget and task, send the layers they trained, and the
//! server averages each layer over the clients that reached it, weighting
//! client `i` by `nᵢ · Lᵢ` (data size times trained depth).

pub mod client;
pub mod datagen;
pub mod error;
pub mod model;
pub mod numerics;
pub mod server;
pub mod sim;
mod wire;

pub use error::{Error, ErrorCategory, Result};
