//! Desk-scale bimodal test-time adaptation for a dual-encoder classifier.
//!
//! The crate is organized around six pieces:
//!
//! * [`tensor`] — a dense f64 tensor graph with reverse-mode differentiation,
//!   covering exactly the operations the model and losses need.
//! * [`model`] — a small vision/text dual encoder with a named-parameter
//!   registry, LayerNorm scoping, checkpoint I/O, and a contrastive
//!   pretrainer that produces the zero-shot starting point.
//! * [`losses`] — zero-shot likelihood, pseudo-labels, class prototypes, and
//!   the entropy / projection-matching / inter-class-separability losses.
//! * [`adapt`] — the online adaptation loop: per-batch forward, objective,
//!   Adam/AdamW step on scoped parameters, per-task reset, plus baselines.
//! * [`corrupt`] + [`data`] — 15 corruption families at 5 severities, the
//!   synthetic shapes dataset, a CIFAR-10 binary loader, and task assembly.
//! * [`report`] + [`gradcheck`] — benchmark tables, JSON/CSV emission, and a
//!   finite-difference audit of every gradient path.

pub mod adapt;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
