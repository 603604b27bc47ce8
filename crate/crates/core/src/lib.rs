//! Embedding-space adversarial attacks against a toy autoregressive
//! transformer, with an end-to-end evaluation harness.
//!
//! The crate is organized as five modules:
//!
//! - [`numerics`]: a minimal dense f64 tensor engine with reverse-mode
//!   automatic differentiation (define-by-run tape), plus a central
//!   finite-difference oracle for gradient checking.
//! - [`model`]: a byte-level tokenizer, a small decoder-only transformer
//!   with both token-id and raw-embedding entry points, Adam training,
//!   and binary checkpoint persistence.
//! - [`attack`]: the embedding-space attack engine — adversarial region
//!   initialization, teacher-forced target loss, SGD / signed gradient
//!   descent updates, early stopping, and the periodic multi-generation
//!   schedule.
//! - [`judge`]: deterministic rule-based judging of generated candidates
//!   and aggregation into attack success rates.
//! - [`harness`]: synthetic corpus generation, refusal fine-tuning,
//!   single-variant attack runs, and the three-variant comparison,
//!   exposed to the `embattack` CLI binary.

pub mod attack;
pub mod gradcheck;
pub mod harness;
pub mod judge;
pub mod model;
pub mod numerics;
