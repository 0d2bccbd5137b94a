//! End-to-end annotation pipeline: slide windows over a stream, run the
//! backbone, average the overlapping per-frame predictions, and decode the
//! averaged stream into gesture annotations with nucleus locations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward, LossMode, ModelParams};
use crate::ctc::{extract_spikes, ProbMatrix};
use crate::error::{Error, Result};
use crate::stream::{plan_windows, FrameStream, LabelSequence};

/// One detected gesture: its class, nucleus frame, confidence, and the
/// contiguous frame range that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(rename = "class")]
    pub class_id: usize,
    /// Global frame index of the probability peak.
    pub nucleus: usize,
    /// Averaged probability of the class at the nucleus frame.
    pub confidence: f64,
    /// Inclusive frame range backing the record.
    pub support: (usize, usize),
}

/// Per-frame class probabilities after averaging every window that covers
/// each frame; rows sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedStream {
    pub probs: ProbMatrix,
}

/// Averages overlapping per-window probability matrices into one probability
/// vector per frame.
///
/// Frame `t` becomes the arithmetic mean of row `t - offset` over every
/// window containing `t`; boundary frames covered by fewer windows average
/// over however many cover them. Rows are renormalized afterwards, which
/// only corrects float drift.
pub fn aggregate_overlaps(
    per_window: &[(usize, ProbMatrix)],
    total_len: usize,
) -> Result<AdjustedStream> {
    let num_classes = match per_window.first() {
        Some((_, m)) => m.num_classes(),
        None => return Err(Error::CoverageGap { frame: 0 }),
    };
    let width = num_classes + 1;
    let mut sums = vec![0.0; total_len * width];
    let mut counts = vec![0usize; total_len];
    for (offset, matrix) in per_window {
        if matrix.num_classes() != num_classes {
            return Err(Error::dim(format!(
                "window at {offset} has {} classes, expected {num_classes}",
                matrix.num_classes()
            )));
        }
        if offset + matrix.len() > total_len {
            return Err(Error::dim(format!(
                "window at {offset} with {} frames exceeds stream of {total_len} frames",
                matrix.len()
            )));
        }
        for (local, row) in matrix.rows().enumerate() {
            let frame = offset + local;
            counts[frame] += 1;
            let dst = &mut sums[frame * width..(frame + 1) * width];
            for (d, &p) in dst.iter_mut().zip(row) {
                *d += p;
            }
        }
    }
    if let Some(frame) = counts.iter().position(|&c| c == 0) {
        return Err(Error::CoverageGap { frame });
    }
    let rows = (0..total_len)
        .map(|frame| {
            let row = &sums[frame * width..(frame + 1) * width];
            let mean_sum: f64 = row.iter().sum();
            row.iter().map(|&p| p / mean_sum).collect()
        })
        .collect();
    Ok(AdjustedStream {
        probs: ProbMatrix::from_rows(rows)?,
    })
}

/// Runs the backbone over every planned window of a stream and returns the
/// per-window probability matrices with their offsets.
pub fn window_probabilities(
    params: &ModelParams,
    stream: &FrameStream,
    window_len: usize,
    step: usize,
) -> Result<Vec<(usize, ProbMatrix)>> {
    if stream.dim() != params.dims().feat_dim {
        return Err(Error::dim(format!(
            "stream '{}' has dimension {}, model expects {}",
            stream.stream_id,
            stream.dim(),
            params.dims().feat_dim
        )));
    }
    let plan = plan_windows(stream.len(), window_len, step)?;
    plan.ranges()
        .map(|(start, end)| {
            let (logits, _) = forward(params, &stream.frames[start..end])?;
            Ok((start, ProbMatrix::from_logits(&logits)?))
        })
        .collect()
}

/// Annotates one stream: forward passes per window, dynamic-adjustment
/// averaging, then one decode over the averaged stream.
///
/// CTC mode extracts probability spikes; CE mode merges argmax plateaus into
/// segments (keeping those whose mean class probability reaches 0.5) and
/// takes the in-segment probability peak as the nucleus — the heuristic
/// baseline path.
pub fn annotate(
    params: &ModelParams,
    stream: &FrameStream,
    window_len: usize,
    step: usize,
    mode: LossMode,
) -> Result<Vec<AnnotationRecord>> {
    let per_window = window_probabilities(params, stream, window_len, step)?;
    let adjusted = aggregate_overlaps(&per_window, stream.len())?;
    Ok(match mode {
        LossMode::Ctc => decode_spikes(&adjusted),
        LossMode::Ce => decode_segments(&adjusted, CE_SEGMENT_MIN_MEAN_PROB),
    })
}

/// Annotates without any cross-window merging: every window is decoded
/// independently and a spike is kept only when its peak frame is owned by
/// that window (nearest window center wins). The contrast case for the
/// averaged pipeline.
pub fn annotate_nearest_window(
    params: &ModelParams,
    stream: &FrameStream,
    window_len: usize,
    step: usize,
) -> Result<Vec<AnnotationRecord>> {
    let per_window = window_probabilities(params, stream, window_len, step)?;
    let centers: Vec<f64> = per_window
        .iter()
        .map(|(offset, m)| *offset as f64 + (m.len() as f64 - 1.0) / 2.0)
        .collect();
    let owner = |frame: usize| -> usize {
        let mut best = 0;
        for (w, center) in centers.iter().enumerate() {
            if (frame as f64 - center).abs() < (frame as f64 - centers[best]).abs() {
                best = w;
            }
        }
        best
    };
    let mut records = Vec::new();
    for (w, (offset, matrix)) in per_window.iter().enumerate() {
        for spike in extract_spikes(matrix, 0.0) {
            let nucleus = offset + spike.frame;
            if owner(nucleus) == w {
                records.push(AnnotationRecord {
                    class_id: spike.class_id,
                    nucleus,
                    confidence: spike.peak_prob,
                    support: (offset + spike.support.0, offset + spike.support.1),
                });
            }
        }
    }
    records.sort_by_key(|r| r.nucleus);
    records.dedup_by(|a, b| a.nucleus == b.nucleus && a.class_id == b.class_id);
    Ok(records)
}

/// Minimum mean class probability for a CE-mode segment to be kept. The one
/// heuristic knob of the baseline path; the spike path has none.
pub const CE_SEGMENT_MIN_MEAN_PROB: f64 = 0.5;

fn decode_spikes(adjusted: &AdjustedStream) -> Vec<AnnotationRecord> {
    extract_spikes(&adjusted.probs, 0.0)
        .into_iter()
        .map(|spike| AnnotationRecord {
            class_id: spike.class_id,
            nucleus: spike.frame,
            confidence: spike.peak_prob,
            support: spike.support,
        })
        .collect()
}

fn decode_segments(adjusted: &AdjustedStream, min_mean_prob: f64) -> Vec<AnnotationRecord> {
    extract_spikes(&adjusted.probs, 0.0)
        .into_iter()
        .filter(|spike| {
            let (start, end) = spike.support;
            let mean: f64 = (start..=end)
                .map(|t| adjusted.probs.prob(t, spike.class_id))
                .sum::<f64>()
                / (end - start + 1) as f64;
            mean >= min_mean_prob
        })
        .map(|spike| AnnotationRecord {
            class_id: spike.class_id,
            nucleus: spike.frame,
            confidence: spike.peak_prob,
            support: spike.support,
        })
        .collect()
}

/// Projects records onto their ordered class ids. Records must already be
/// sorted by nucleus.
pub fn to_label_sequence(records: &[AnnotationRecord]) -> Result<LabelSequence> {
    for (index, pair) in records.windows(2).enumerate() {
        if pair[1].nucleus <= pair[0].nucleus {
            return Err(Error::Unsorted { index: index + 1 });
        }
    }
    Ok(LabelSequence::new(
        records.iter().map(|r| r.class_id).collect(),
    ))
}

/// Annotation output for one stream, one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamAnnotations {
    pub stream_id: String,
    pub annotations: Vec<AnnotationRecord>,
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<StreamAnnotations>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: display.clone(),
                line: i + 1,
                source: e,
            })?,
        );
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[StreamAnnotations]) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut writer = BufWriter::new(file);
    for entry in annotations {
        let line = serde_json::to_string(entry).expect("annotation serialization cannot fail");
        writeln!(writer, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    writer.flush().map_err(|e| Error::io(&display, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_matrix(len: usize, row: &[f64]) -> ProbMatrix {
        ProbMatrix::from_rows(vec![row.to_vec(); len]).unwrap()
    }

    #[test]
    fn single_window_aggregation_is_identity() {
        let m = ProbMatrix::from_rows(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        let adjusted = aggregate_overlaps(&[(0, m.clone())], 2).unwrap();
        assert_eq!(adjusted.probs, m);
    }

    #[test]
    fn overlap_region_averages_the_two_windows() {
        let a = [0.8, 0.1, 0.1];
        let b = [0.2, 0.3, 0.5];
        let per_window = vec![(0, constant_matrix(4, &a)), (2, constant_matrix(4, &b))];
        let adjusted = aggregate_overlaps(&per_window, 6).unwrap();
        for t in 0..2 {
            assert_eq!(adjusted.probs.row(t), &a);
        }
        for t in 2..4 {
            for k in 0..3 {
                assert!((adjusted.probs.prob(t, k) - (a[k] + b[k]) / 2.0).abs() < 1e-12);
            }
        }
        for t in 4..6 {
            assert_eq!(adjusted.probs.row(t), &b);
        }
    }

    #[test]
    fn disjoint_windows_concatenate() {
        let a = constant_matrix(3, &[0.7, 0.2, 0.1]);
        let b = constant_matrix(3, &[0.1, 0.8, 0.1]);
        let adjusted = aggregate_overlaps(&[(0, a.clone()), (3, b.clone())], 6).unwrap();
        assert_eq!(adjusted.probs.row(0), a.row(0));
        assert_eq!(adjusted.probs.row(5), b.row(0));
    }

    #[test]
    fn uncovered_frame_is_a_coverage_gap() {
        let a = constant_matrix(2, &[0.5, 0.25, 0.25]);
        let err = aggregate_overlaps(&[(0, a.clone()), (3, a)], 6).unwrap_err();
        assert!(matches!(err, Error::CoverageGap { frame: 2 }));
    }

    #[test]
    fn label_projection_requires_sorted_records() {
        let rec = |class_id, nucleus| AnnotationRecord {
            class_id,
            nucleus,
            confidence: 0.9,
            support: (nucleus, nucleus),
        };
        assert!(to_label_sequence(&[]).unwrap().is_empty());
        let seq = to_label_sequence(&[rec(1, 30), rec(3, 90)]).unwrap();
        assert_eq!(seq.as_slice(), &[1, 3]);
        assert!(matches!(
            to_label_sequence(&[rec(1, 90), rec(3, 30)]),
            Err(Error::Unsorted { index: 1 })
        ));
    }

    #[test]
    fn annotations_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let entries = vec![StreamAnnotations {
            stream_id: "s3".into(),
            annotations: vec![AnnotationRecord {
                class_id: 2,
                nucleus: 41,
                confidence: 0.875,
                support: (38, 47),
            }],
        }];
        write_annotations(&path, &entries).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), entries);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"class\":2"));
        assert!(text.contains("\"support\":[38,47]"));
    }
}
