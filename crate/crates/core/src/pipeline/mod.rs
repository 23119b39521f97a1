//! File-based runners behind the command-line verbs.
//!
//! All artifacts of a run live under one directory (see [`io::RunLayout`]).

pub mod config;
pub mod eval;
pub mod infer;
pub mod io;
pub mod stage1;
pub mod stage2;
pub mod synth;

pub use config::RunConfig;
pub use eval::run_eval;
pub use infer::run_infer;
pub use io::RunLayout;
pub use stage1::{run_stage_mpo, run_stage_sft};
pub use stage2::{run_stage_cfm, run_stage_tune};
pub use synth::synth_dataset;

use sha2::{Digest, Sha256};

/// Stable sub-seed for a named purpose.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
