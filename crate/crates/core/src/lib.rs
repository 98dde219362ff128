//! Active preference learning for DPO fine-tuning of a small autoregressive policy.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod analysis;
pub mod dpo;
pub mod engine;
pub mod error;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod task;
pub mod vocab;

pub use error::{AplError, Result};
pub use policy::{Arch, PolicyParams, SamplingConfig};
pub use vocab::{TokenId, TokenSequence, Vocabulary};
