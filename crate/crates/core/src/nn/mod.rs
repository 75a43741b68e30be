//! Neural primitives and the detection model.
//!
//! Two independent pipelines share an embedding space: the document side
//! maps confusion-network segment features through an input projection and a
//! residual biLSTM stack to per-segment embeddings `R_i`; the query side
//! maps grapheme embeddings through its own projection and stack, then
//! max-pools the outputs into three query embeddings `Q_k` covering the
//! first half, middle, and second half of the term. A segment's occurrence
//! probability is `sigmoid(alpha * max_k(R_i . Q_k) + beta)` with trainable
//! calibration scalars. A small bidirectional LSTM over the query grapheme
//! embeddings predicts the minimum occurrence length in segments.
//!
//! Gradients are hand-written and validated by central finite differences
//! (see [`gradient_check`]).

mod checkpoint;
mod gradcheck;
mod lstm;
mod model;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use gradcheck::{gradient_check, ChunkBatchLoss, LossFunction};
pub use lstm::{bilstm_stack_forward, lstm_cell, LstmDirView};
pub use model::{
    chunk_loss, chunk_loss_backward, minlen_loss, project_document, project_query,
    project_query_ids, score_document, score_segments, ChunkSample, ChunkStats, QueryProjection,
    BCE_CLAMP,
};
pub use params::{ArchConfig, Layout, ModelParams, Pipeline};
