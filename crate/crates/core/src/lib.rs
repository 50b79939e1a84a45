//! Flow-matching laboratory: the closed-form optimal velocity field over a
//! finite training set, the empirical flow matching estimator, small trainable
//! velocity networks, ODE samplers (including the exact/learned hybrid) and
//! memorization diagnostics.

pub mod cli;
pub mod datasets;
pub mod diagnostics;
pub mod efm_estimator;
pub mod error;
pub mod exact_field;
pub mod neural_velocity;
pub mod numeric;
pub mod ot;
pub mod rng;
pub mod sampler;

pub use datasets::TrainingSet;
pub use error::{Error, Result};
pub use exact_field::{ExactField, FieldEval, FieldQuery, WeightProfile};
