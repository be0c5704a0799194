//! Audio tokens generated one step at a time from a video feature stream,
//! trained and scored on a small synthetic world of sound events.
//!
//! Pipeline: [`world`] renders paired clips, [`codec`] turns audio into
//! residual-quantized tokens, [`sequencer`] lays tokens and video frames out
//! in time, [`model`] is the decoder-only transformer, [`sampler`] generates
//! with classifier-free guidance, [`curation`] filters datasets by
//! audio-visual similarity and [`metrics`] scores the results.

pub mod codec;
pub mod curation;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod sequencer;
pub mod world;

pub use error::{Error, Result};
