// Guards written as `!(x > 0.0)` are deliberate: they reject NaN along
// with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulator for reputation-gated private decentralized learning.
//!
//! Participants train local softmax classifiers and exchange predictions as
//! distillation targets. The adaptive protocol scores each collaborator by
//! the alignment between the local cross-entropy gradient and the pairwise
//! distillation gradient, turns that score into a reputation, weights the
//! distillation losses by it, and gates message sharing on it. Vanilla
//! decentralized distillation, federated averaging, and standalone training
//! ship as baselines, together with collaborative-fairness metrics and a
//! two-client mean-estimation lab that checks the analytic usefulness bounds
//! by Monte Carlo.

pub mod data;
pub mod error;
pub mod meanlab;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod protocol;
pub mod runner;

pub use error::{Error, Result};
