//! Passive actor-critic learning for linearly-solvable MDPs, a grid eigenfunction
//! solver used as ground truth, and a multipolicy freeway-merge planner that
//! scores candidate gaps with the learned value function.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lmdp;
pub mod merging;
pub mod mpdm;
pub mod network;
pub mod oracle;
pub mod output;
pub mod pac;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
pub use lmdp::{LmdpModel, ValuePair};
pub use network::{GradientReport, OutputActivation, ValueFunction, ZNetwork};
pub use pac::{PacState, TrainConfig, TransitionSample};
