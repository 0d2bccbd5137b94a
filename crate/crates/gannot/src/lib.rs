//! Automatic annotation of continuous gesture-feature streams.
//!
//! The pipeline slides long windows over a feature stream, runs a small
//! bi-directional recurrent backbone to get per-frame class probabilities,
//! averages the overlapping window predictions into one probability vector
//! per frame, and decodes that averaged stream with a greedy CTC-style
//! collapse. Each detected gesture comes with a nucleus: the frame where its
//! probability spikes. Evaluation uses edit-distance label accuracy and a
//! normalized nucleus localization error; a seeded synthetic generator
//! provides ground-truth streams at desk scale.

pub mod ctc;
pub mod error;
mod numeric;
pub mod stream;

pub use error::{Error, Result};
