//! Multi-view, multi-modal part classification.
//!
//! A capture of one object from `V` cameras passes through shared color and
//! depth encoders, optional stage-wise RGBD fusion, a projection to one
//! token per view, an optional self-attention block over the tokens and a
//! view-fusion operator that reduces the `V×J` token matrix to one vector
//! for the final classifier. Auxiliary per-view heads feed the multi-head
//! loss, and a sinusoidal weight encoding can anchor the decoder query.

pub mod augment;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod model;
pub mod rgbd;
pub mod schedule;
pub mod seed;
pub mod weight;

pub use error::{Error, Result};
