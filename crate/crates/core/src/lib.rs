//! Desk-scale check-in sequence modeling.
//!
//! The crate covers the whole pipeline: parsing and preprocessing raw
//! check-in files, point-wise POI embeddings blended from category words and
//! geohash cells, an interval-gated recurrent intention encoder, a travel
//! preference prompt pool, a small causal sequence backbone with partial
//! freezing, and heads for next-location, trajectory-user-linking, and
//! arrival-time prediction, plus training, metrics, and experiment drivers.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod geocode;
pub mod gradcheck;
pub mod heads;
pub mod htpp;
pub mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ppel;
pub mod tape;
pub mod train;
pub mod vimn;

pub use error::{Error, Result};
