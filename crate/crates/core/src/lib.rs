//! Graph neural operator for river hydrodynamics, with the routing oracle
//! that produces its training data.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod grc;
pub mod network;
pub mod oracle;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
pub use grc::{Checkpoint, Components, GrcConfig, GrcParams, Mode};
pub use network::{GaugeSet, RiverGraph, StaticFeatureTable};
pub use oracle::{ForcingSeries, HydroSeries, Variable};
pub use pipeline::{Dataset, NormStats, SplitSpec};
pub use training::{FinetuneConfig, TrainConfig};
