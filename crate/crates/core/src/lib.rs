//! Movable-antenna ISAC transmitter under inter-antenna crosstalk.
//!
//! The crate covers the array geometry, the crosstalk-involved channels, the
//! angle-estimation Cramér-Rao bound, the reinforcement-learning environment,
//! a small dense-network substrate, a TD3 agent and the experiment harness.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod array;
pub mod channel;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod seeds;
pub mod td3;
pub mod verify;

pub use error::{IsacError, Result};
