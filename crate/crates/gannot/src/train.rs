//! Training loop: window-level targets, Adam updates, early stopping, and
//! checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward, ce_loss_and_grad, forward, LossMode, ModelDims, ModelParams,
};
use crate::ctc::ctc_loss_and_grad;
use crate::error::{Error, Result};
use crate::stream::{plan_windows, FrameStream, GestureSpan, LabelSequence};

/// Training hyperparameters. Defaults: Adam at learning rate 1e-4, early
/// stopping with patience 5, windows of 200 frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub window_len: usize,
    /// Stride between training windows.
    pub step: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            patience: 5,
            max_epochs: 50,
            batch_size: 8,
            window_len: 200,
            step: 50,
            hidden: 32,
            num_classes: 5,
            seed: 42,
            loss_mode: LossMode::Ctc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("max_epochs and batch_size must be at least 1".into()));
        }
        if self.num_classes < 1 || self.hidden < 1 {
            return Err(Error::Config("num_classes and hidden must be at least 1".into()));
        }
        if self.step < 1 || self.step > self.window_len {
            return Err(Error::InvalidStep {
                step: self.step,
                window_len: self.window_len,
            });
        }
        Ok(())
    }
}

/// A trained model together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Epoch with the lowest validation loss.
    pub epoch: usize,
    /// Epochs actually run before early stopping kicked in.
    pub epochs_run: usize,
    pub validation_loss: f64,
    pub params: ModelParams,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&display, e))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self).map_err(|e| Error::Parse {
            path: display.clone(),
            line: 0,
            source: e,
        })?;
        writeln!(writer).map_err(|e| Error::io(&display, e))?;
        writer.flush().map_err(|e| Error::io(&display, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let checkpoint: Checkpoint =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
                path: display.clone(),
                line: 0,
                source: e,
            })?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                got: checkpoint.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        checkpoint.params.validate()?;
        Ok(checkpoint)
    }
}

/// Adam with the standard moment defaults (0.9, 0.999, 1e-8).
struct Adam {
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.steps += 1;
        let bias1 = 1.0 - Self::BETA1.powi(self.steps as i32);
        let bias2 = 1.0 - Self::BETA2.powi(self.steps as i32);
        let mut idx = 0;
        for (block, grad_block) in params.blocks_mut().into_iter().zip(grad.blocks()) {
            for (w, &g) in block.iter_mut().zip(grad_block) {
                let m = &mut self.first[idx];
                let v = &mut self.second[idx];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + Self::EPS);
                idx += 1;
            }
        }
    }
}

/// Per-window training target.
#[derive(Debug, Clone)]
enum WindowTarget {
    /// Ordered gesture labels whose spans mostly fall inside the window.
    Labels(LabelSequence),
    /// One class per frame, blank for background.
    Frames(Vec<usize>),
}

#[derive(Debug, Clone)]
struct WindowExample {
    stream: usize,
    start: usize,
    end: usize,
    target: WindowTarget,
}

/// Ordered labels of the spans with at least half of their frames inside
/// `[start, end)`; the weak-segmentation window target.
fn window_labels(spans: &[GestureSpan], start: usize, end: usize) -> LabelSequence {
    let labels = spans
        .iter()
        .filter(|span| {
            let inter_start = span.start.max(start);
            let inter_end = (span.end + 1).min(end);
            let inter = inter_end.saturating_sub(inter_start);
            2 * inter >= span.len()
        })
        .map(|span| span.class_id)
        .collect();
    LabelSequence::new(labels)
}

/// Per-frame class targets for `[start, end)`: the covering span's class, or
/// blank (`num_classes`) outside every span.
fn frame_targets(spans: &[GestureSpan], start: usize, end: usize, num_classes: usize) -> Vec<usize> {
    (start..end)
        .map(|frame| {
            spans
                .iter()
                .find(|span| span.contains(frame))
                .map_or(num_classes, |span| span.class_id)
        })
        .collect()
}

fn build_examples(
    streams: &[&FrameStream],
    config: &TrainConfig,
) -> Result<(Vec<WindowExample>, usize)> {
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (idx, stream) in streams.iter().enumerate() {
        let spans = stream.spans.as_deref().ok_or(Error::NoLabeledData)?;
        if let Some(span) = spans.iter().find(|s| s.class_id >= config.num_classes) {
            return Err(Error::dim(format!(
                "stream '{}' has class {} but the model is configured for {} classes",
                stream.stream_id, span.class_id, config.num_classes
            )));
        }
        let plan = plan_windows(stream.len(), config.window_len, config.step)?;
        for (start, end) in plan.ranges() {
            let target = match config.loss_mode {
                LossMode::Ctc => {
                    let labels = window_labels(spans, start, end);
                    if labels.len() + labels.adjacent_repeats() > end - start {
                        skipped += 1;
                        continue;
                    }
                    WindowTarget::Labels(labels)
                }
                LossMode::Ce => {
                    WindowTarget::Frames(frame_targets(spans, start, end, config.num_classes))
                }
            };
            examples.push(WindowExample {
                stream: idx,
                start,
                end,
                target,
            });
        }
    }
    Ok((examples, skipped))
}

fn example_loss_and_grad(
    params: &ModelParams,
    streams: &[&FrameStream],
    example: &WindowExample,
) -> Result<(f64, ModelParams)> {
    let window = &streams[example.stream].frames[example.start..example.end];
    let (logits, cache) = forward(params, window)?;
    let (loss, d_logits) = match &example.target {
        WindowTarget::Labels(labels) => ctc_loss_and_grad(&logits, labels)?,
        WindowTarget::Frames(targets) => ce_loss_and_grad(&logits, targets)?,
    };
    let grad = backward(params, &cache, &d_logits)?;
    Ok((loss, grad))
}

fn example_loss(
    params: &ModelParams,
    streams: &[&FrameStream],
    example: &WindowExample,
) -> Result<f64> {
    let window = &streams[example.stream].frames[example.start..example.end];
    let (logits, _) = forward(params, window)?;
    match &example.target {
        WindowTarget::Labels(labels) => Ok(ctc_loss_and_grad(&logits, labels)?.0),
        WindowTarget::Frames(targets) => Ok(ce_loss_and_grad(&logits, targets)?.0),
    }
}

fn mean_loss(
    params: &ModelParams,
    streams: &[&FrameStream],
    examples: &[WindowExample],
) -> Result<f64> {
    let mut total = 0.0;
    for example in examples {
        total += example_loss(params, streams, example)?;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains a backbone on labeled streams and returns the checkpoint with the
/// lowest validation loss. Fully deterministic given the config seed: data
/// split, parameter init, and shuffling all derive from it.
///
/// The validation split is the last 10% of streams in `stream_id` order
/// (minimum one stream); a single-stream input validates on itself. Windows
/// whose CTC target cannot fit the window are skipped and counted.
pub fn train(streams: &[FrameStream], config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    if streams.is_empty() || streams.iter().any(|s| s.spans.is_none()) {
        return Err(Error::NoLabeledData);
    }
    let feat_dim = streams[0].dim();
    if let Some(other) = streams.iter().find(|s| s.dim() != feat_dim) {
        return Err(Error::dim(format!(
            "stream '{}' has dimension {}, expected {}",
            other.stream_id,
            other.dim(),
            feat_dim
        )));
    }

    let mut ordered: Vec<&FrameStream> = streams.iter().collect();
    ordered.sort_by(|a, b| a.stream_id.cmp(&b.stream_id));
    let n_val = (ordered.len() / 10).max(1);
    let (train_streams, val_streams): (Vec<&FrameStream>, Vec<&FrameStream>) =
        if ordered.len() >= 2 {
            let split = ordered.len() - n_val;
            (ordered[..split].to_vec(), ordered[split..].to_vec())
        } else {
            (ordered.clone(), ordered.clone())
        };

    let (mut train_examples, skipped_train) = build_examples(&train_streams, config)?;
    let (val_examples, skipped_val) = build_examples(&val_streams, config)?;
    if skipped_train + skipped_val > 0 {
        eprintln!(
            "warning: skipped {} windows with infeasible targets",
            skipped_train + skipped_val
        );
    }
    if train_examples.is_empty() || val_examples.is_empty() {
        return Err(Error::NoLabeledData);
    }

    let dims = ModelDims {
        feat_dim,
        hidden: config.hidden,
        num_classes: config.num_classes,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(dims, &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut adam = Adam::new(config.learning_rate, params.num_params());

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut epochs_without_improvement = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        train_examples.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in train_examples.chunks(config.batch_size) {
            let mut batch_grad = ModelParams::zeros(dims);
            let scale = 1.0 / batch.len() as f64;
            for example in batch {
                let (loss, grad) = example_loss_and_grad(&params, &train_streams, example)?;
                epoch_loss += loss;
                batch_grad.add_scaled(&grad, scale);
            }
            adam.step(&mut params, &batch_grad);
        }
        let train_loss = epoch_loss / train_examples.len() as f64;
        let val_loss = mean_loss(&params, &val_streams, &val_examples)?;
        eprintln!(
            "epoch {epoch:3}  train loss {train_loss:.6}  val loss {val_loss:.6}"
        );

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= config.patience {
                break;
            }
        }
    }

    Ok(Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        epoch: best_epoch,
        epochs_run,
        validation_loss: best_val,
        params: best_params,
    })
}
