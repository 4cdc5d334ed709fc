//! Aspect term extraction with twin BiLSTM encoders, truncated history
//! attention over recent aspect detections and an aspect-conditioned
//! selective transformation of opinion features.
//!
//! Everything is built on a small dense-tensor core with tape-based
//! reverse-mode differentiation ([`autodiff`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod history;
pub mod model;
pub mod selective;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, GradCheckReport, GradientMap, OpKind, Tape};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{
    distant_opinion_labels, load_bio_corpus, load_embeddings, load_lexicon, preprocess_tokens,
    AspectLabel, Corpus, EmbeddingMatrix, OpinionLabel, OpinionLexicon, Sentence, Vocabulary,
};
pub use error::{Error, Result};
pub use eval::{
    chunk_f1, decode_spans, encode_spans, evaluate, export_attention, EvalReport, Span,
};
pub use model::{
    forward_sentence, init_model, joint_loss, Mode, ModelConfig, ModelParams, SentenceOutput,
};
pub use tensor::{Shape, Tensor};
pub use train::{sgd_epoch, train, EpochMetrics};
