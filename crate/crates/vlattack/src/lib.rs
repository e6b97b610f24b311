//! A desk-scale laboratory for transferable adversarial attacks on
//! vision-language models.
//!
//! This crate trains miniature image–text transformers end to end, then
//! attacks fine-tuned copies of them through a query-counting black-box
//! interface. The attack pipeline perturbs images by descending on
//! block-wise feature similarity against a pretrained surrogate, perturbs
//! text by semantically gated word substitution, and finally cross-searches
//! image and text perturbations together under a shared iteration budget.
//!
//! The crate is organised around six modules:
//!
//! - [`modelzoo`] — miniature vision-language transformers (encoder-only and
//!   encoder-decoder), their training loops, sentence embeddings, and a
//!   checkpoint container format;
//! - [`bsa`] — the block-wise similarity attack on images: perturbation
//!   budgets, the feature-similarity loss, and projected sign-gradient
//!   descent with an optional momentum variant;
//! - [`text_attack`] — word-importance ranking, embedding-neighbour
//!   substitution, and the semantic similarity gate;
//! - [`icsa`] — the iterative cross-search over image and text
//!   perturbations, plus the three-stage attack entry point;
//! - [`blackbox`] — the only gateway to a victim model: query ledger,
//!   adversarial-success predicates, and box overlap;
//! - [`harness`] — dataset synthesis, evaluation modes, ablations, and JSON
//!   reports.
//!
//! The accompanying guide in `book/` walks through the same pieces in prose;
//! its code snippets are compiled as doc-tests (see the hidden `book_guide`
//! module) so guide and library cannot drift apart.

pub mod autograd;
pub mod blackbox;
pub mod bsa;
pub mod error;
pub mod harness;
pub mod icsa;
pub mod modelzoo;
pub mod text_attack;

pub use error::{Error, Result};

// The remaining modules land one by one; see the guide for the roadmap.

/// Compiles every fenced Rust snippet in the guide as a doc-test, keeping
/// the book in lockstep with the library.
#[cfg(doctest)]
mod book_guide {}
