//! Seeded synthetic gesture-stream generator. Each class gets a distinct
//! sinusoidal trajectory signature, time-warped to a sampled gesture length
//! and separated by background gaps, with exact ground-truth spans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{validate_stream, FrameStream, GestureSpan};

/// Generator settings. Ranges are inclusive `(min, max)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub gestures_per_stream: (usize, usize),
    /// Gesture length range in frames.
    pub gesture_len: (usize, usize),
    /// Background gap range in frames, also used before the first gesture.
    pub gap_len: (usize, usize),
    /// Additive Gaussian noise scale on every frame.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            feat_dim: 4,
            gestures_per_stream: (3, 5),
            gesture_len: (20, 50),
            gap_len: (10, 60),
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.feat_dim < 1 {
            return Err(Error::Config("feat_dim must be at least 1".into()));
        }
        for (name, (lo, hi)) in [
            ("gestures_per_stream", self.gestures_per_stream),
            ("gesture_len", self.gesture_len),
            ("gap_len", self.gap_len),
        ] {
            if lo > hi || hi == 0 {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.gestures_per_stream.0 == 0 && self.gap_len.0 == 0 {
            return Err(Error::Config(
                "a stream of zero gestures and zero gap would be empty".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// The noiseless trajectory of one class, warped to `len` frames: a distinct
/// sinusoidal frequency per class, phase-shifted per feature dimension, under
/// a half-sine envelope so gestures start and end at the rest pose.
pub fn class_template(class_id: usize, feat_dim: usize, len: usize) -> Vec<Vec<f64>> {
    use std::f64::consts::{PI, TAU};
    let freq = 1.0 + 0.5 * class_id as f64;
    (0..len)
        .map(|t| {
            let u = if len > 1 {
                t as f64 / (len - 1) as f64
            } else {
                0.5
            };
            let envelope = (PI * u).sin();
            (0..feat_dim)
                .map(|d| {
                    let phase = TAU * (0.37 * class_id as f64 + 0.71 * d as f64);
                    envelope * (TAU * freq * u + phase).sin()
                })
                .collect()
        })
        .collect()
}

/// One RNG per (seed, stream index), domain-separated from the trainer's.
fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&index.to_le_bytes());
    bytes[16] = 0xA5;
    ChaCha8Rng::from_seed(bytes)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// Generates one stream with exact ground-truth spans, deterministically
/// derived from `(config.seed, index)`.
pub fn gen_stream(config: &SynthConfig, index: usize) -> Result<FrameStream> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, index as u64);
    let n_gestures = sample(&mut rng, config.gestures_per_stream);
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let mut spans = Vec::new();

    let mut push_background = |frames: &mut Vec<Vec<f64>>, rng: &mut ChaCha8Rng, len: usize| {
        for _ in 0..len {
            frames.push(
                (0..config.feat_dim)
                    .map(|_| config.noise_sigma * gauss(rng))
                    .collect(),
            );
        }
    };

    push_background(&mut frames, &mut rng, sample(&mut rng, config.gap_len));
    for _ in 0..n_gestures {
        let class_id = rng.gen_range(0..config.num_classes);
        let len = sample(&mut rng, config.gesture_len);
        let start = frames.len();
        for template_frame in class_template(class_id, config.feat_dim, len) {
            frames.push(
                template_frame
                    .into_iter()
                    .map(|v| v + config.noise_sigma * gauss(&mut rng))
                    .collect(),
            );
        }
        spans.push(GestureSpan::new(class_id, start, frames.len() - 1));
        push_background(&mut frames, &mut rng, sample(&mut rng, config.gap_len));
    }

    validate_stream(FrameStream {
        stream_id: format!("s{index:05}"),
        frames,
        spans: Some(spans),
    })
}

/// Generates `n_streams` streams indexed `0..n_streams`, each independently
/// derived from `(config.seed, index)`.
pub fn gen_dataset(config: &SynthConfig, n_streams: usize) -> Result<Vec<FrameStream>> {
    if n_streams < 1 {
        return Err(Error::Config("n_streams must be at least 1".into()));
    }
    (0..n_streams).map(|i| gen_stream(config, i)).collect()
}
