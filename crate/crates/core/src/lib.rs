//! Asynchronous boosting with decision stumps.
//!
//! Each worker keeps a weighted in-memory sample of a disk-resident dataset,
//! scans it for a stump whose edge can be certified by a sequential
//! stopping rule, and broadcasts every improved model with its loss bound.
//! Workers adopt any received model whose bound beats their own.

pub mod boost;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod protocol;
pub mod sampler;
pub mod scanner;
pub mod sim;
pub mod stats;
pub mod synth;
pub mod train;
pub mod transport;
pub mod worker;

pub use error::{Error, Result};
pub use features::{FeatureAccess, Features};
pub use model::{LossBound, Lineage, Polarity, StrongModel, Stump, WeightedRule};
pub use protocol::{Decision, ModelMessage};
