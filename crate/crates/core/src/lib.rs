//! Budgeted nearest-neighbor search over NSW similarity graphs with learned
//! routing.
//!
//! The crate covers the full pipeline: dataset ingestion and exact ground
//! truth ([`data`]), graph construction ([`graph`]), budgeted beam search and
//! its stochastic relaxation ([`search`]), hop-distance supervision
//! ([`oracle`]), the routing network ([`model`]), imitation and
//! teacher-forcing training ([`train`]) and evaluation ([`eval`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod oracle;
pub mod search;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
