//! Extended graph attention for neural routing: routing environments, the
//! node/edge attention policy, REINFORCE training, inference and exact oracles.

pub mod attention;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod train;

pub use config::{ModelConfig, Profile, TrainConfig};
pub use error::{Error, Result};
pub use model::{Policy, Solution};
pub use problems::{Instance, ProblemKind};
