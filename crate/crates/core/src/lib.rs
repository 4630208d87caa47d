//! Phrase-level alignment for hallucination mitigation, at desk scale.
//!
//! The crate builds a symbolic vision-language world, augments ground-truth
//! responses into correct/hallucinated pairs with recorded phrase spans, and
//! finetunes a small conditional language model with a phrase-level
//! alignment loss plus a token-wise forward KL regularizer against a frozen
//! copy of itself. A sequence-level DPO loss is provided as a baseline, along
//! with CHAIR-style hallucination metrics.
//!
//! Module map:
//!
//! - [`textcore`]: word tokenizer, vocabulary, spans
//! - [`lexicon`]: concept set, co-occurrence statistics, replacement sampling
//! - [`world`]: synthetic scenes, caption templates, yes/no questions
//! - [`augment`]: correct/hallucinated pair construction and validation
//! - [`autodiff`]: reverse-mode autodiff over dense matrices, gradient check
//! - [`model`]: windowed conditional LM and a tabular oracle LM
//! - [`losses`]: alignment loss, token-wise KL, combined objective, DPO
//! - [`trainer`]: MLE pretraining, finetuning, alpha sweeps
//! - [`eval`]: CHAIR, coverage, discriminative F1, significance
//! - [`experiment`]: the bundled desk-scale setup shared by the CLI and tests

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
mod jsonl;
pub mod lexicon;
pub mod losses;
pub mod model;
pub mod textcore;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use textcore::{Span, TokenSeq, Vocab};
