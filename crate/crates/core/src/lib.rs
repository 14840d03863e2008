//! DPO and bilevel SPO on exactly differentiable toy policies, with
//! executable checks of the first-order probability-update theory.
//!
//! The crate is organised bottom-up:
//!
//! * [`policy`]: tabular and log-linear softmax policies with an additive
//!   backbone/adapter parameter split, exact gradients and Hessians.
//! * [`objectives`]: DPO, SFT and hinge-regularizer losses and their
//!   analytic gradients, plus the penalized SPO objective.
//! * [`dynamics`]: closed-form one-step probability change predictions,
//!   bound audits and mass-shift accounting.
//! * [`trainer`]: SFT, DPO and SPO training loops.
//! * [`data`]: datasets, synthetic tasks and generators.
//! * [`verify`]: the seeded property suite behind `prefdyn verify`.
//! * [`cli`]: the experiment runner.

pub mod cli;
pub mod config;
pub mod csvio;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod objectives;
pub mod par;
pub mod policy;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
