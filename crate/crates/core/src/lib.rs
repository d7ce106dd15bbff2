//! Knowledge-injection laboratory for cross-modality learning.
//!
//! The crate wires together a small set-theoretic disease/phenotype
//! knowledge base, a deterministic caption generator with three knowledge
//! granularities, a from-scratch dual encoder trained with the symmetric
//! contrastive loss, and a zero-shot evaluator that scores presence/absence
//! prompt pairs per disease. A synthetic generative world supplies
//! multi-label "images" whose features are sums of phenotype signatures.
//!
//! Data-parallel loops (world sampling, caption generation, evaluation and
//! experiment sweeps) run on rayon when the `parallel` feature is enabled
//! and fall back to plain iterators otherwise. See [`exec::Exec`].

pub mod caption;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod hash;
pub mod knowledge;
pub mod paraphrase;
pub mod text;
pub mod world;
pub mod zero_shot;

pub use caption::{CaptionRecord, CaptionSource, Granularity};
pub use encoder::{Batch, EncoderParams, TrainConfig};
pub use error::{Error, Result, ValidationError, ValidationKind};
pub use exec::Exec;
pub use knowledge::{DiseaseEntry, KnowledgeBase, Phenotype};
pub use text::{TokenSeq, Vocabulary};
pub use world::{LabeledExample, World, WorldConfig};
pub use zero_shot::{AccuracyReport, Prediction, PromptSet};
