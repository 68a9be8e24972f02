//! Depth completion for transparent and reflective objects: a dual-branch
//! RGB-D encoder, channel-excitation and attention/state-space fusion, a
//! multi-scale down-fusion decoder, plus losses, metrics, data IO and
//! training utilities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;
pub mod verify;

pub use config::{KvConfig, ModelConfig};
pub use error::{Error, Result};
pub use metrics::{MetricsAccum, MetricsReport};
pub use model::HdcNet;
