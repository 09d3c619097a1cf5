//! Desk-scale laboratory for importance-guided structured sparsification
//! of rank-1 low-rank adapters (TASO), with the baselines needed to probe
//! its mechanisms: dense LoRA, DARE rescaling, random-region ablation, and
//! lottery-ticket iterative magnitude pruning.
//!
//! Layers are tiny frozen linear maps; adapters are rank-r factor pairs
//! whose structure is chosen by gradient-times-weight importance before
//! any training happens. Everything is deterministic given a seed.

pub mod baselines;
pub mod error;
pub mod harness;
pub mod importance;
pub mod lora;
pub mod models;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
