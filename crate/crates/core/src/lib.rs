//! Streaming keyword spotting with keyword-biased encoding, CTC keyword
//! search and an optional attention-decoder verification pass.

pub mod cascade;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod frontend;
pub mod keywords;
pub mod model;
pub mod par;
pub mod train;

pub use error::{KwsError, Result};
