//! Twisted sequential Monte Carlo for reward-aligned sampling from
//! discrete diffusion models, with exact tabular oracles.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod numeric;
pub mod proposal;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod smc;
pub mod types;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use types::{ParticleSet, RelaxedState, SimplexVector, TokenState, Vocab};
