//! Spoken term detection over CTC grapheme posteriors.
//!
//! The pipeline, end to end:
//!
//! 1. [`grid`] — posterior grids (per-frame grapheme probabilities) with a
//!    bit-exact binary file format, plus word-separator merging.
//! 2. [`cn`] — CTC 1-best decoding with frame alignments, grapheme confusion
//!    network construction, and sliding-window stitching for long inputs.
//! 3. [`nn`] — the dual-pipeline deep biLSTM model that embeds confusion
//!    networks and query strings into a shared space, scored per segment.
//! 4. [`train`] — query bootstrapping from high-confidence transcripts,
//!    transition-masked BCE + minimum-length losses, Adam training loop.
//! 5. [`search`] — precomputed document indexes, thresholded peak detection,
//!    time-stamped scored hits.
//! 6. [`eval`] — term-weighted value metrics (TWV/ATWV/MTWV).
//! 7. [`synth`] — a synthetic corpus generator that serves as ground truth
//!    for end-to-end testing at desk scale.

pub mod cn;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod search;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
