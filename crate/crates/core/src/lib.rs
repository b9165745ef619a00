pub mod error;
pub mod causal_stats;
pub mod cli;
pub mod corpus;
pub mod deconfound;
pub mod numerics;
pub mod pretraining;
pub mod two_stream;

pub use error::{Error, Result};
