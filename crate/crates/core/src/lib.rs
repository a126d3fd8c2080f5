//! Multimodal knowledge-triplet engine.
//!
//! Feature records from a frozen vision-language encoder are turned into
//! (head, relation, tail) embeddings, trained with a margin ranking loss, a
//! translation-consistency loss and a semantic classification loss, and
//! accumulated into a knowledge base. Questions are answered by ranking every
//! tail entity by cosine distance to `head + relation`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blob;
pub mod error;
pub mod extractor;
pub mod features;
pub mod inference;
pub mod knowledge;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use extractor::{AttentionMode, ExtractionResult, ModelDims, ModelParams};
pub use features::{AnswerVocab, Dataset, SampleFeatures, Split, SynthSpec};
pub use inference::{EvalReport, Prediction, Predictor, RankEntry, RankResult, TailIndex};
pub use knowledge::{KnowledgeBase, KnowledgeTriplet};
pub use losses::{LossBreakdown, LossToggles};
pub use numerics::{Rng, Tensor};
pub use trainer::{Checkpoint, Stage, TrainConfig};
