//! Explainable engagement prediction over temporal ego-networks.
//!
//! A per-step tensor graph encoder feeds a tensor LSTM whose temporal and
//! action attentions define a Gaussian mixture over the engagement score.
//! Training alternates posterior evaluation with gradient steps, and the
//! attentions double as local and global explanations.

pub mod bench;
pub mod blocks;
pub mod config;
pub mod domain;
pub mod error;
pub mod explain_em;
pub mod friendship;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod params;
pub mod tape;
pub mod temporal;
pub mod synthdata;
pub mod train_eval;

pub use error::{FateError, Result};
