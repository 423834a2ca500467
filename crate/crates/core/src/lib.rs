//! Archival bootstrapping engine: grows a labeled training corpus from
//! historical captures of labeled locations by re-weighting them with an
//! iterated train/score/update loop.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod linear_head;
pub mod pipeline;
pub mod selection;
pub mod ssms;
pub mod temporal;
pub mod tilegrid;

pub use error::{Error, Result};
