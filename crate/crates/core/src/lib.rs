pub mod autoenc;
pub mod cluster;
pub mod dsp;
pub mod embed;
pub mod error;
pub mod fsutil;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod project2d;
pub mod store;
pub mod synthlab;
pub mod triage;

pub use error::{Error, Result};
