//! Zero-shot cross-language code clone retrieval.
//!
//! The pipeline aligns code embeddings across programming languages without
//! any cross-language clone labels:
//!
//! 1. [`csp`]: contrastive snippet prediction pre-trains the encoder to
//!    relate each snippet to its neighbours, against negatives drawn from a
//!    per-language FIFO queue.
//! 2. [`adversarial`], [`cycle`] and [`cloneloss`]: fine-tuning on
//!    monolingual clone pairs, with a gradient-reversed language classifier
//!    and cycle-consistent cross-language mappers.
//! 3. [`retrieval`]: cosine ranking and mean average precision.
//!
//! [`trainer`] runs the two stages end to end, configured by a
//! [`config::RunConfig`].

// `!(x > 0.0)` is how positivity checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod autograd;
pub mod checkpoint;
pub mod cloneloss;
pub mod config;
pub mod corpus;
pub mod csp;
pub mod cycle;
pub mod encoder;
pub mod error;
pub mod optim;
pub mod retrieval;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
