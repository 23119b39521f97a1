//! Reasoning-guided, multi-condition movie dubbing at desk scale.
//!
//! Stage 1 covers chain-of-thought traces, rule rewards and mixed
//! preference optimization over a small categorical policy. Stage 2 covers
//! conditional flow matching, condition assembly, duration prediction and
//! multi-condition classifier-free guidance. [`metrics`] holds the
//! evaluation suite and [`pipeline`] the file-based runners behind the CLI.

pub mod conditions;
pub mod cot_trace;
pub mod duration;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod preference;
pub mod reward;
pub mod velocity;

pub use error::{DubError, Result};
