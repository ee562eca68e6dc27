//! Patient similarity from clinical notes.
//!
//! Each patient becomes a matrix whose rows are embeddings of their notes in
//! chronological order. Pairs of patient matrices are compared with one of
//! three matrix similarity measures, optionally after restricting the notes
//! to the segments relevant to one of ten similarity categories.

pub mod cli;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod matsim;
pub mod segmenter;
mod svd;
pub mod vectorizer;

pub use error::{Error, Result};
pub use svd::{truncated_svd, CsrMatrix, SvdParams, TruncatedSvd};
