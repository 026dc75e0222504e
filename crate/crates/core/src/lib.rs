//! Few-shot classification with class prototypes rectified by stacked
//! attention over the whole episode.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod inspect;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod propagation;
pub mod train;

pub use error::{Error, Result};
