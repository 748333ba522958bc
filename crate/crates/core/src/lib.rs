//! Self-supervised contrast enhancement for chest radiographs, with
//! contrastive encoder pretraining, dataset domain-gap analysis and an
//! out-of-distribution evaluation harness.

pub mod contrastive;
pub mod domain_gap;
pub mod enhancement;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
