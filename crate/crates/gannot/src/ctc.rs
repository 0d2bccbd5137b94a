//! Connectionist temporal classification: log-space forward-backward loss and
//! gradient, greedy decoding, spike extraction, and a brute-force
//! path-enumeration oracle used by the test suites.
//!
//! Column layout convention: columns `0..K-1` are gesture classes, column `K`
//! is the blank/background class. Every function here relies on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_prob, log_sum_exp2, softmax};
use crate::stream::LabelSequence;

/// Per-window class-conditional probabilities: one row per frame, `K + 1`
/// columns (gesture classes plus blank). Rows sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    data: Vec<f64>,
    len: usize,
    num_classes: usize,
}

impl ProbMatrix {
    pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

    /// Builds a matrix from per-frame probability rows, validating widths and
    /// row sums.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if width < 2 {
            return Err(Error::dim(format!(
                "probability rows need at least 2 columns (1 class + blank), got {width}"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for (row_idx, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::dim(format!(
                    "probability row {row_idx} has {} columns, expected {width}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_SUM_TOLERANCE || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidProbability { row: row_idx, sum });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            data,
            len: rows.len(),
            num_classes: width - 1,
        })
    }

    /// Softmaxes logit rows into a probability matrix.
    pub fn from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        let width = logits.first().map_or(0, Vec::len);
        if width < 2 {
            return Err(Error::dim(format!(
                "logit rows need at least 2 columns, got {width}"
            )));
        }
        let mut data = vec![0.0; logits.len() * width];
        for (row_idx, row) in logits.iter().enumerate() {
            if row.len() != width {
                return Err(Error::dim(format!(
                    "logit row {row_idx} has {} columns, expected {width}",
                    row.len()
                )));
            }
            softmax(row, &mut data[row_idx * width..(row_idx + 1) * width]);
        }
        Ok(Self {
            data,
            len: logits.len(),
            num_classes: width - 1,
        })
    }

    /// Number of frames (rows).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of gesture classes, excluding the blank column.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Column index of the blank/background class.
    pub fn blank(&self) -> usize {
        self.num_classes
    }

    pub fn prob(&self, frame: usize, class: usize) -> f64 {
        self.data[frame * (self.num_classes + 1) + class]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        let width = self.num_classes + 1;
        &self.data[frame * width..(frame + 1) * width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_classes + 1)
    }

    /// Argmax column of a row; ties resolve to the lowest column index.
    pub fn argmax(&self, frame: usize) -> usize {
        let row = self.row(frame);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        best
    }
}

/// One symbol of a blank-extended CTC target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcSymbol {
    Blank,
    Label(usize),
}

/// A target label sequence interleaved with blanks:
/// `blank, l1, blank, l2, ..., blank`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedLabels {
    pub symbols: Vec<CtcSymbol>,
}

impl ExtendedLabels {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Maps each symbol to its probability-matrix column, blank last.
    fn columns(&self, num_classes: usize) -> Vec<usize> {
        self.symbols
            .iter()
            .map(|s| match s {
                CtcSymbol::Blank => num_classes,
                CtcSymbol::Label(l) => *l,
            })
            .collect()
    }
}

/// Interleaves a label sequence with blanks; the result has length
/// `2 * labels.len() + 1` and starts and ends with a blank.
pub fn extend_with_blanks(labels: &LabelSequence) -> ExtendedLabels {
    let mut symbols = Vec::with_capacity(2 * labels.len() + 1);
    symbols.push(CtcSymbol::Blank);
    for &label in labels.iter() {
        symbols.push(CtcSymbol::Label(label));
        symbols.push(CtcSymbol::Blank);
    }
    ExtendedLabels { symbols }
}

fn check_target(probs_len: usize, num_classes: usize, labels: &LabelSequence) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::dim(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let repeats = labels.adjacent_repeats();
    let needed = labels.len() + repeats;
    if needed > probs_len {
        return Err(Error::TargetTooLong {
            labels: labels.len(),
            repeats,
            needed,
            window_len: probs_len,
        });
    }
    Ok(())
}

/// Whether the alpha recursion may skip from `s - 2` to `s`: allowed only
/// onto a label that differs from the label two slots back.
fn can_skip(columns: &[usize], s: usize, blank_col: usize) -> bool {
    s >= 2 && columns[s] != blank_col && columns[s] != columns[s - 2]
}

/// Log-space forward pass; `log_probs[t * width + k]` are clamped log
/// probabilities. Returns the full alpha table (layout `t * ext_len + s`).
fn forward_alphas(log_probs: &[f64], width: usize, columns: &[usize], len: usize) -> Vec<f64> {
    let ext_len = columns.len();
    let blank_col = width - 1;
    let mut alpha = vec![f64::NEG_INFINITY; len * ext_len];
    alpha[0] = log_probs[columns[0]];
    if ext_len > 1 {
        alpha[1] = log_probs[columns[1]];
    }
    for t in 1..len {
        let (prev, cur) = alpha.split_at_mut(t * ext_len);
        let prev = &prev[(t - 1) * ext_len..];
        let cur = &mut cur[..ext_len];
        for s in 0..ext_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_sum_exp2(acc, prev[s - 1]);
            }
            if can_skip(columns, s, blank_col) {
                acc = log_sum_exp2(acc, prev[s - 2]);
            }
            cur[s] = acc + log_probs[t * width + columns[s]];
        }
    }
    alpha
}

/// Log-space backward pass, exclusive of the current frame's emission:
/// `beta[t][s]` sums paths from frame `t + 1` onward. With this convention
/// `sum_s exp(alpha[t][s] + beta[t][s])` equals the target likelihood at
/// every frame.
fn backward_betas(log_probs: &[f64], width: usize, columns: &[usize], len: usize) -> Vec<f64> {
    let ext_len = columns.len();
    let blank_col = width - 1;
    let mut beta = vec![f64::NEG_INFINITY; len * ext_len];
    beta[(len - 1) * ext_len + ext_len - 1] = 0.0;
    if ext_len > 1 {
        beta[(len - 1) * ext_len + ext_len - 2] = 0.0;
    }
    for t in (0..len - 1).rev() {
        for s in 0..ext_len {
            let next = &beta[(t + 1) * ext_len..(t + 2) * ext_len];
            let emit = |s2: usize| log_probs[(t + 1) * width + columns[s2]];
            let mut acc = next[s] + emit(s);
            if s + 1 < ext_len {
                acc = log_sum_exp2(acc, next[s + 1] + emit(s + 1));
            }
            if s + 2 < ext_len && can_skip(columns, s + 2, blank_col) {
                acc = log_sum_exp2(acc, next[s + 2] + emit(s + 2));
            }
            beta[t * ext_len + s] = acc;
        }
    }
    beta
}

fn clamped_log_probs(probs: &ProbMatrix) -> Vec<f64> {
    probs.data.iter().map(|&p| log_prob(p)).collect()
}

/// Negative log-likelihood (nats) of the label sequence under the
/// probability matrix, marginalized over all blank-extended alignment paths.
pub fn ctc_loss(probs: &ProbMatrix, labels: &LabelSequence) -> Result<f64> {
    check_target(probs.len(), probs.num_classes(), labels)?;
    let width = probs.num_classes() + 1;
    let columns = extend_with_blanks(labels).columns(probs.num_classes());
    let log_probs = clamped_log_probs(probs);
    let alpha = forward_alphas(&log_probs, width, &columns, probs.len());
    let ext_len = columns.len();
    let last = &alpha[(probs.len() - 1) * ext_len..];
    let mut log_like = last[ext_len - 1];
    if ext_len > 1 {
        log_like = log_sum_exp2(log_like, last[ext_len - 2]);
    }
    Ok(-log_like)
}

/// CTC loss of `softmax(logits)` against the labels, together with the
/// gradient with respect to the logits: softmax minus the alpha-beta
/// posterior occupancy.
pub fn ctc_loss_and_grad(
    logits: &[Vec<f64>],
    labels: &LabelSequence,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let probs = ProbMatrix::from_logits(logits)?;
    check_target(probs.len(), probs.num_classes(), labels)?;
    let len = probs.len();
    let width = probs.num_classes() + 1;
    let columns = extend_with_blanks(labels).columns(probs.num_classes());
    let ext_len = columns.len();
    let log_probs = clamped_log_probs(&probs);
    let alpha = forward_alphas(&log_probs, width, &columns, len);
    let beta = backward_betas(&log_probs, width, &columns, len);

    let last = &alpha[(len - 1) * ext_len..];
    let mut log_like = last[ext_len - 1];
    if ext_len > 1 {
        log_like = log_sum_exp2(log_like, last[ext_len - 2]);
    }

    let mut grad = vec![vec![0.0; width]; len];
    let mut occupancy = vec![f64::NEG_INFINITY; width];
    for t in 0..len {
        occupancy.fill(f64::NEG_INFINITY);
        for s in 0..ext_len {
            let col = columns[s];
            let joint = alpha[t * ext_len + s] + beta[t * ext_len + s];
            occupancy[col] = log_sum_exp2(occupancy[col], joint);
        }
        for k in 0..width {
            grad[t][k] = probs.prob(t, k) - (occupancy[k] - log_like).exp();
        }
    }
    Ok((-log_like, grad))
}

/// Gradient of [`ctc_loss`]`(softmax(logits), labels)` with respect to the
/// logits, same shape as the input.
pub fn ctc_grad(logits: &[Vec<f64>], labels: &LabelSequence) -> Result<Vec<Vec<f64>>> {
    ctc_loss_and_grad(logits, labels).map(|(_, grad)| grad)
}

/// Takes the argmax class per frame, collapses consecutive repeats, and
/// removes blanks. For each surviving label the returned frame index is the
/// probability peak of its collapsed run.
pub fn greedy_decode(probs: &ProbMatrix) -> (LabelSequence, Vec<usize>) {
    let spikes = extract_spikes(probs, 0.0);
    let labels = spikes.iter().map(|s| s.class_id).collect();
    let frames = spikes.iter().map(|s| s.frame).collect();
    (LabelSequence::new(labels), frames)
}

/// A localized gesture detection on the argmax path: the probability peak of
/// one collapsed non-blank run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeEvent {
    pub class_id: usize,
    /// Frame index of the class-probability peak inside the run.
    pub frame: usize,
    pub peak_prob: f64,
    /// Contiguous frame range (inclusive) where this class is the argmax.
    pub support: (usize, usize),
}

/// Scans the argmax path and emits one spike per collapsed non-blank run
/// whose peak probability reaches `min_peak`.
pub fn extract_spikes(probs: &ProbMatrix, min_peak: f64) -> Vec<SpikeEvent> {
    let blank = probs.blank();
    let mut spikes = Vec::new();
    let mut run: Option<(usize, usize)> = None; // (class, start frame)
    for t in 0..=probs.len() {
        let class = if t < probs.len() {
            probs.argmax(t)
        } else {
            blank // sentinel to flush the final run
        };
        match run {
            Some((run_class, start)) if run_class != class => {
                push_spike(probs, run_class, start, t - 1, min_peak, &mut spikes);
                run = (class != blank).then_some((class, t));
            }
            None if class != blank => run = Some((class, t)),
            _ => {}
        }
    }
    spikes
}

fn push_spike(
    probs: &ProbMatrix,
    class: usize,
    start: usize,
    end: usize,
    min_peak: f64,
    out: &mut Vec<SpikeEvent>,
) {
    let mut peak = start;
    for t in start + 1..=end {
        if probs.prob(t, class) > probs.prob(peak, class) {
            peak = t;
        }
    }
    let peak_prob = probs.prob(peak, class);
    if peak_prob >= min_peak {
        out.push(SpikeEvent {
            class_id: class,
            frame: peak,
            peak_prob,
            support: (start, end),
        });
    }
}

const ORACLE_MAX_LEN: usize = 8;
const ORACLE_MAX_CLASSES: usize = 3;

/// Test oracle: sums the product of per-frame probabilities over every
/// `(K+1)^L` alignment path whose collapse equals the labels. Deliberately
/// brute force and combinatorially guarded; independent of the
/// forward-backward recursion. Returns probability 0 for infeasible targets.
pub fn brute_force_ctc(probs: &ProbMatrix, labels: &LabelSequence) -> Result<f64> {
    if probs.len() > ORACLE_MAX_LEN || probs.num_classes() > ORACLE_MAX_CLASSES {
        return Err(Error::TooLargeForOracle {
            len: probs.len(),
            classes: probs.num_classes(),
            max_len: ORACLE_MAX_LEN,
            max_classes: ORACLE_MAX_CLASSES,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.num_classes()) {
        return Err(Error::dim(format!(
            "label {bad} out of range for {} classes",
            probs.num_classes()
        )));
    }
    let width = probs.num_classes() + 1;
    let len = probs.len();
    let mut path = vec![0usize; len];
    let mut total = 0.0;
    loop {
        if collapse_equals(&path, width - 1, labels) {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.prob(t, k))
                .product::<f64>();
        }
        // Increment the base-(K+1) counter.
        let mut pos = 0;
        loop {
            if pos == len {
                return Ok(total);
            }
            path[pos] += 1;
            if path[pos] < width {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Collapse rule: merge consecutive repeats, then drop blanks.
fn collapse_equals(path: &[usize], blank: usize, labels: &LabelSequence) -> bool {
    let mut expected = labels.iter();
    let mut prev = blank;
    for &k in path {
        if k != prev && k != blank && expected.next() != Some(&k) {
            return false;
        }
        prev = k;
    }
    expected.next().is_none()
}
