//! Class-incremental learning on open temporal graphs.
//!
//! Message passing gates cross-class messages through an
//! information-bottleneck encoder; old classes are rehearsed by replaying
//! influence-scored, diversity-aware triads.

mod error;
pub mod graph;
pub mod ib;
pub mod influence;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod select;
pub mod synth;
pub mod train;
pub mod triad;

pub use error::{Error, Result};
pub use otg_diff as diff;
