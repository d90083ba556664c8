pub mod channel;
pub mod detection;
pub mod error;
pub mod linalg;
pub mod mc;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
pub mod asym_ao;
pub mod baselines;
pub mod experiments;
pub mod freeprob;
mod krylov;
pub mod manifold;
pub mod wmmse_mc;
