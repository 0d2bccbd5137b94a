//! Evaluation: Levenshtein-based label accuracy, normalized nucleus
//! localization error (NNLE), prediction-to-truth matching, and report
//! aggregation across streams.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotator::{AnnotationRecord, StreamAnnotations};
use crate::error::{Error, Result};
use crate::stream::{FrameStream, GestureSpan, LabelSequence};

/// Minimum number of single-token insertions, deletions, and substitutions
/// turning `a` into `b`.
pub fn levenshtein(a: &LabelSequence, b: &LabelSequence) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ta) in a.iter().enumerate() {
        let mut diagonal = row[0];
        row[0] = i + 1;
        for (j, &tb) in b.iter().enumerate() {
            let substitution = diagonal + usize::from(ta != tb);
            diagonal = row[j + 1];
            row[j + 1] = substitution.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[b.len()]
}

/// Label accuracy: `1 - levenshtein(y_pred, y_true) / len(y_true)`.
///
/// Reported raw; the value goes negative when the edit distance exceeds the
/// truth length. Errors when the truth is empty.
pub fn accuracy(y_pred: &LabelSequence, y_true: &LabelSequence) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::EmptyTruth);
    }
    Ok(1.0 - levenshtein(y_pred, y_true) as f64 / y_true.len() as f64)
}

/// Normalized nucleus localization error of a detected nucleus against the
/// span geometry:
///
/// ```text
/// |nucleus - (start + end) / 2 + 1| / (end - start + 1)
/// ```
///
/// The numerator is taken as an absolute value so that smaller always means
/// closer to the span center; the `+ 1` offset shifts the optimum one frame
/// left of center and is kept as printed. The nucleus must lie inside the
/// span; anything else is a localization miss, reported separately and never
/// folded into a mean NNLE.
pub fn nnle(nucleus: usize, span: &GestureSpan) -> Result<f64> {
    if !span.contains(nucleus) {
        return Err(Error::NucleusOutsideSpan {
            nucleus,
            start: span.start,
            end: span.end,
        });
    }
    let center = (span.start as f64 + span.end as f64) / 2.0;
    Ok((nucleus as f64 - center + 1.0).abs() / span.len() as f64)
}

/// Per-class truth/prediction/match counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub truth: usize,
    pub predicted: usize,
    pub matched: usize,
}

/// Aggregated evaluation results: label accuracy (mean and population std
/// over streams) and NNLE (mean and population std over matched gestures).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub mean_nnle: Option<f64>,
    pub std_nnle: Option<f64>,
    pub n_streams: usize,
    pub n_gestures: usize,
    pub matched: usize,
    pub unmatched_predictions: usize,
    pub missed_gestures: usize,
    pub per_class: Vec<ClassStats>,
}

#[derive(Debug, Default)]
struct MatchOutcome {
    predicted: Vec<usize>,
    nnles: Vec<f64>,
    unmatched_predictions: usize,
    n_gestures: usize,
    per_class: BTreeMap<usize, ClassStats>,
}

fn check_spans(truth: &[GestureSpan]) -> Result<()> {
    let mut prev_end: Option<usize> = None;
    for (index, span) in truth.iter().enumerate() {
        if span.start > span.end {
            return Err(Error::SpanOutOfRange {
                index,
                start: span.start,
                end: span.end,
                len: usize::MAX,
            });
        }
        if let Some(prev) = prev_end {
            if span.start <= prev {
                return Err(Error::OverlappingSpans {
                    index,
                    start: span.start,
                    end: span.end,
                });
            }
        }
        prev_end = Some(span.end);
    }
    Ok(())
}

/// Matches records against truth spans: a record matches the unique span
/// containing its nucleus when the classes agree; each span accepts at most
/// one record, earliest nucleus first.
fn match_stream(records: &[AnnotationRecord], truth: &[GestureSpan]) -> Result<MatchOutcome> {
    check_spans(truth)?;
    let mut ordered: Vec<&AnnotationRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.nucleus);

    let mut outcome = MatchOutcome {
        n_gestures: truth.len(),
        ..MatchOutcome::default()
    };
    for span in truth {
        let stats = outcome
            .per_class
            .entry(span.class_id)
            .or_insert(ClassStats {
                class_id: span.class_id,
                truth: 0,
                predicted: 0,
                matched: 0,
            });
        stats.truth += 1;
    }

    let mut span_taken = vec![false; truth.len()];
    for record in ordered {
        outcome.predicted.push(record.class_id);
        let stats = outcome
            .per_class
            .entry(record.class_id)
            .or_insert(ClassStats {
                class_id: record.class_id,
                truth: 0,
                predicted: 0,
                matched: 0,
            });
        stats.predicted += 1;

        // Spans are sorted and disjoint: at most one can contain the nucleus.
        let candidate = truth.partition_point(|s| s.start <= record.nucleus);
        let hit = candidate
            .checked_sub(1)
            .filter(|&i| truth[i].contains(record.nucleus))
            .filter(|&i| truth[i].class_id == record.class_id && !span_taken[i]);
        match hit {
            Some(i) => {
                span_taken[i] = true;
                outcome.nnles.push(nnle(record.nucleus, &truth[i])?);
                outcome.per_class.get_mut(&record.class_id).unwrap().matched += 1;
            }
            None => outcome.unmatched_predictions += 1,
        }
    }
    Ok(outcome)
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    variance.max(0.0).sqrt()
}

fn merge_class_stats(into: &mut BTreeMap<usize, ClassStats>, outcome: &MatchOutcome) {
    for (class_id, stats) in &outcome.per_class {
        let entry = into.entry(*class_id).or_insert(ClassStats {
            class_id: *class_id,
            truth: 0,
            predicted: 0,
            matched: 0,
        });
        entry.truth += stats.truth;
        entry.predicted += stats.predicted;
        entry.matched += stats.matched;
    }
}

fn build_report(
    accuracies: &[f64],
    nnles: &[f64],
    n_streams: usize,
    n_gestures: usize,
    unmatched_predictions: usize,
    per_class: BTreeMap<usize, ClassStats>,
) -> EvalReport {
    let matched = nnles.len();
    let accuracy_mean = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
    let mean_nnle = (!nnles.is_empty()).then(|| nnles.iter().sum::<f64>() / nnles.len() as f64);
    EvalReport {
        accuracy: accuracy_mean,
        accuracy_std: population_std(accuracies, accuracy_mean),
        mean_nnle,
        std_nnle: mean_nnle.map(|m| population_std(nnles, m)),
        n_streams,
        n_gestures,
        matched,
        unmatched_predictions,
        missed_gestures: n_gestures - matched,
        per_class: per_class.into_values().collect(),
    }
}

/// Scores one stream's records against its ground truth. The full predicted
/// label sequence (matched or not, in nucleus order) is compared to `y_true`
/// for accuracy; NNLE statistics cover the matched pairs only.
pub fn match_and_score(
    records: &[AnnotationRecord],
    truth: &[GestureSpan],
    y_true: &LabelSequence,
) -> Result<EvalReport> {
    let outcome = match_stream(records, truth)?;
    let accuracy = accuracy(&LabelSequence::new(outcome.predicted.clone()), y_true)?;
    let mut per_class = BTreeMap::new();
    merge_class_stats(&mut per_class, &outcome);
    Ok(build_report(
        &[accuracy],
        &outcome.nnles,
        1,
        outcome.n_gestures,
        outcome.unmatched_predictions,
        per_class,
    ))
}

/// Scores many streams and aggregates: accuracy is averaged per stream, NNLE
/// is pooled over all matched gestures. Streams with no truth gestures skip
/// the accuracy average but still contribute unmatched predictions.
pub fn evaluate_dataset<'a>(
    items: impl IntoIterator<Item = (&'a [AnnotationRecord], &'a [GestureSpan])>,
) -> Result<EvalReport> {
    let mut accuracies = Vec::new();
    let mut nnles = Vec::new();
    let mut n_streams = 0;
    let mut n_gestures = 0;
    let mut unmatched = 0;
    let mut per_class = BTreeMap::new();
    for (records, truth) in items {
        let outcome = match_stream(records, truth)?;
        if !truth.is_empty() {
            let y_true = LabelSequence::new(truth.iter().map(|s| s.class_id).collect());
            accuracies.push(accuracy(
                &LabelSequence::new(outcome.predicted.clone()),
                &y_true,
            )?);
        }
        n_streams += 1;
        n_gestures += outcome.n_gestures;
        unmatched += outcome.unmatched_predictions;
        nnles.extend_from_slice(&outcome.nnles);
        merge_class_stats(&mut per_class, &outcome);
    }
    if accuracies.is_empty() {
        return Err(Error::EmptyTruth);
    }
    Ok(build_report(
        &accuracies,
        &nnles,
        n_streams,
        n_gestures,
        unmatched,
        per_class,
    ))
}

/// Joins an annotation file with its ground-truth streams by `stream_id` and
/// evaluates. Truth streams without annotations count every gesture as
/// missed; annotations for unknown streams are an error.
pub fn evaluate_annotations(
    annotations: &[StreamAnnotations],
    truth_streams: &[FrameStream],
) -> Result<EvalReport> {
    let mut by_id: BTreeMap<&str, &[AnnotationRecord]> = BTreeMap::new();
    for entry in annotations {
        if by_id
            .insert(entry.stream_id.as_str(), &entry.annotations)
            .is_some()
        {
            return Err(Error::Config(format!(
                "duplicate annotations for stream '{}'",
                entry.stream_id
            )));
        }
    }
    let known: std::collections::BTreeSet<&str> =
        truth_streams.iter().map(|s| s.stream_id.as_str()).collect();
    if let Some(unknown) = by_id.keys().find(|id| !known.contains(*id)) {
        return Err(Error::Config(format!(
            "annotations reference unknown stream '{unknown}'"
        )));
    }
    let empty: &[AnnotationRecord] = &[];
    let items: Vec<(&[AnnotationRecord], &[GestureSpan])> = truth_streams
        .iter()
        .map(|stream| {
            let spans = stream.spans.as_deref().ok_or_else(|| {
                Error::Config(format!(
                    "truth stream '{}' has no ground-truth spans",
                    stream.stream_id
                ))
            })?;
            let records = by_id.get(stream.stream_id.as_str()).copied().unwrap_or(empty);
            Ok((records, spans))
        })
        .collect::<Result<_>>()?;
    evaluate_dataset(items)
}

/// Renders reports as an aligned text table: one row per model variant, with
/// accuracy and NNLE columns (each with its std).
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let name_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(["variant".len()])
        .max()
        .unwrap_or(8);
    let mut out = format!(
        "{:<name_width$}  {:>9}  {:>8}  {:>7}  {:>8}\n",
        "variant", "accuracy", "acc std", "nnle", "nnle std"
    );
    for (name, report) in rows {
        let nnle = report
            .mean_nnle
            .map_or("-".to_string(), |v| format!("{v:.4}"));
        let nnle_std = report
            .std_nnle
            .map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:<name_width$}  {:>9.4}  {:>8.4}  {:>7}  {:>8}\n",
            name, report.accuracy, report.accuracy_std, nnle, nnle_std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(v: &[usize]) -> LabelSequence {
        LabelSequence::new(v.to_vec())
    }

    fn record(class_id: usize, nucleus: usize) -> AnnotationRecord {
        AnnotationRecord {
            class_id,
            nucleus,
            confidence: 0.9,
            support: (nucleus.saturating_sub(1), nucleus + 1),
        }
    }

    /// Exponential-recursion oracle for small sequences.
    fn naive_levenshtein(a: &[usize], b: &[usize]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ha, ta)), Some((hb, tb))) => {
                let sub = naive_levenshtein(ta, tb) + usize::from(ha != hb);
                let del = naive_levenshtein(ta, b) + 1;
                let ins = naive_levenshtein(a, tb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn levenshtein_worked_examples() {
        assert_eq!(levenshtein(&seq(&[]), &seq(&[1, 2, 3])), 3);
        assert_eq!(levenshtein(&seq(&[1, 2, 3]), &seq(&[1, 2, 3])), 0);
        assert_eq!(levenshtein(&seq(&[1, 2, 3, 4]), &seq(&[1, 3, 5, 4])), 2);
    }

    #[test]
    fn levenshtein_matches_naive_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let a: Vec<usize> = (0..rng.gen_range(0..=5)).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<usize> = (0..rng.gen_range(0..=5)).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(
                levenshtein(&seq(&a), &seq(&b)),
                naive_levenshtein(&a, &b),
                "for {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn levenshtein_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let mut gen_seq = || -> LabelSequence {
                seq(&(0..rng.gen_range(0..=6))
                    .map(|_| rng.gen_range(0..3))
                    .collect::<Vec<usize>>())
            };
            let (a, b, c) = (gen_seq(), gen_seq(), gen_seq());
            assert_eq!(levenshtein(&a, &a), 0);
            assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }

    #[test]
    fn accuracy_worked_examples() {
        let truth = seq(&[1, 2, 3, 4, 5]);
        assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
        assert_eq!(accuracy(&seq(&[]), &seq(&[1, 2, 3, 4])).unwrap(), 0.0);
        assert_eq!(
            accuracy(&seq(&[1; 8]), &seq(&[2, 2, 2, 2])).unwrap(),
            -1.0
        );
        assert!(matches!(
            accuracy(&seq(&[1]), &seq(&[])),
            Err(Error::EmptyTruth)
        ));
    }

    #[test]
    fn nnle_worked_examples() {
        let wide = GestureSpan::new(1, 0, 10);
        assert!((nnle(5, &wide).unwrap() - 1.0 / 11.0).abs() < 1e-12);
        assert!((nnle(0, &wide).unwrap() - 4.0 / 11.0).abs() < 1e-12);
        let single = GestureSpan::new(1, 10, 10);
        assert!((nnle(10, &single).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            nnle(11, &wide),
            Err(Error::NucleusOutsideSpan { nucleus: 11, .. })
        ));
    }

    #[test]
    fn nnle_minimum_sits_one_frame_left_of_center_for_odd_spans() {
        let span = GestureSpan::new(0, 20, 40); // center 30
        let best = (span.start..=span.end)
            .min_by(|&a, &b| {
                nnle(a, &span)
                    .unwrap()
                    .partial_cmp(&nnle(b, &span).unwrap())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, 29);
        assert!(nnle(best, &span).unwrap() < 0.55);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![GestureSpan::new(1, 10, 30), GestureSpan::new(4, 50, 80)];
        let records = vec![record(1, 19), record(4, 64)];
        let report = match_and_score(&records, &truth, &seq(&[1, 4])).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.matched, 2);
        assert_eq!(report.missed_gestures, 0);
        assert_eq!(report.unmatched_predictions, 0);
        assert!(report.mean_nnle.unwrap() < 0.1);
    }

    #[test]
    fn zero_predictions_score_zero_with_absent_nnle() {
        let truth = vec![GestureSpan::new(1, 10, 30)];
        let report = match_and_score(&[], &truth, &seq(&[1])).unwrap();
        assert_eq!(report.accuracy, 0.0);
        assert_eq!(report.matched, 0);
        assert_eq!(report.mean_nnle, None);
        assert_eq!(report.std_nnle, None);
        assert_eq!(report.missed_gestures, 1);
    }

    #[test]
    fn a_span_accepts_only_the_earliest_matching_record() {
        let truth = vec![GestureSpan::new(2, 10, 30)];
        let records = vec![record(2, 25), record(2, 15)];
        let report = match_and_score(&records, &truth, &seq(&[2])).unwrap();
        assert_eq!(report.matched, 1);
        assert_eq!(report.unmatched_predictions, 1);
        // Earliest nucleus (15) wins the span.
        assert!((report.mean_nnle.unwrap() - nnle(15, &truth[0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn class_disagreement_is_not_a_match() {
        let truth = vec![GestureSpan::new(2, 10, 30)];
        let records = vec![record(1, 20)];
        let report = match_and_score(&records, &truth, &seq(&[2])).unwrap();
        assert_eq!(report.matched, 0);
        assert_eq!(report.unmatched_predictions, 1);
        assert_eq!(report.mean_nnle, None);
    }

    #[test]
    fn record_input_order_does_not_change_the_report() {
        let truth = vec![GestureSpan::new(1, 0, 20), GestureSpan::new(3, 40, 60)];
        let forward = vec![record(1, 9), record(3, 50), record(2, 30)];
        let mut shuffled = forward.clone();
        shuffled.reverse();
        let a = match_and_score(&forward, &truth, &seq(&[1, 3])).unwrap();
        let b = match_and_score(&shuffled, &truth, &seq(&[1, 3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_accuracy_averages_per_stream() {
        let truth_a = vec![GestureSpan::new(1, 0, 10)];
        let truth_b = vec![GestureSpan::new(2, 0, 10)];
        let recs_a = vec![record(1, 5)];
        let recs_b: Vec<AnnotationRecord> = vec![];
        let report = evaluate_dataset(vec![
            (recs_a.as_slice(), truth_a.as_slice()),
            (recs_b.as_slice(), truth_b.as_slice()),
        ])
        .unwrap();
        assert_eq!(report.n_streams, 2);
        assert!((report.accuracy - 0.5).abs() < 1e-12);
        assert!((report.accuracy_std - 0.5).abs() < 1e-12);
        assert_eq!(report.missed_gestures, 1);
    }

    #[test]
    fn table_has_the_four_metric_columns() {
        let truth = vec![GestureSpan::new(1, 0, 10)];
        let records = vec![record(1, 5)];
        let report = match_and_score(&records, &truth, &seq(&[1])).unwrap();
        let table = render_table(&[("full pipeline", &report)]);
        let header = table.lines().next().unwrap();
        for column in ["variant", "accuracy", "acc std", "nnle", "nnle std"] {
            assert!(header.contains(column), "missing column {column}: {header}");
        }
        assert!(table.lines().count() >= 2);
    }
}
