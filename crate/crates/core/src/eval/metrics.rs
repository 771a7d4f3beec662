use serde::{Deserialize, Serialize};

use crate::crf::LabelSequence;
use crate::error::{Error, Result};

/// Frame-level recognition statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `trace(confusion) / num_frames`.
    pub per_frame_accuracy: f64,
    /// Recall per true class; 0 for classes absent from the truth.
    pub per_class_recall: Vec<f64>,
    /// `confusion[truth][predicted]` frame counts.
    pub confusion: Vec<Vec<u64>>,
    pub num_frames: u64,
    pub num_sequences: u64,
    pub correct_sequences: u64,
    /// Fraction of sequences whose most frequent predicted label equals
    /// their most frequent true label (smallest label on ties).
    pub sequence_majority_accuracy: f64,
}

impl Metrics {
    /// Builds metrics from a confusion matrix and sequence-level counts.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, num_sequences: u64, correct_sequences: u64) -> Self {
        let num_frames: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Metrics {
            per_frame_accuracy: ratio(correct, num_frames),
            per_class_recall,
            confusion,
            num_frames,
            num_sequences,
            correct_sequences,
            sequence_majority_accuracy: ratio(correct_sequences, num_sequences),
        }
    }

    pub fn correct_frames(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Sums the counts of several evaluations over the same label set.
    pub fn pooled(parts: &[Metrics]) -> Result<Metrics> {
        let k = parts.first().ok_or(Error::EmptyCorpus)?.confusion.len();
        let mut confusion = vec![vec![0u64; k]; k];
        let (mut seqs, mut correct_seqs) = (0, 0);
        for m in parts {
            if m.confusion.len() != k {
                return Err(Error::DimensionMismatch(
                    "pooling metrics over different label sets".into(),
                ));
            }
            for (row, other) in confusion.iter_mut().zip(&m.confusion) {
                row.iter_mut().zip(other).for_each(|(a, b)| *a += b);
            }
            seqs += m.num_sequences;
            correct_seqs += m.correct_sequences;
        }
        Ok(Metrics::from_confusion(confusion, seqs, correct_seqs))
    }
}

fn majority(labels: &[usize], k: usize) -> usize {
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&y| counts[y] += 1);
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Compares aligned prediction and truth sequences over `num_labels` labels.
pub fn evaluate(predictions: &[LabelSequence], truth: &[LabelSequence], num_labels: usize) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(Error::Misaligned(format!(
            "{} predicted sequences for {} true sequences",
            predictions.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_labels]; num_labels];
    let mut correct_seqs = 0;
    for (i, (p, t)) in predictions.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Misaligned(format!(
                "sequence {i}: {} predicted labels for {} frames",
                p.len(),
                t.len()
            )));
        }
        p.validate(num_labels)?;
        t.validate(num_labels)?;
        for (&a, &b) in p.0.iter().zip(&t.0) {
            confusion[b][a] += 1;
        }
        if !t.is_empty() && majority(&p.0, num_labels) == majority(&t.0, num_labels) {
            correct_seqs += 1;
        }
    }
    Ok(Metrics::from_confusion(confusion, truth.len() as u64, correct_seqs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[&[usize]]) -> Vec<LabelSequence> {
        v.iter().map(|s| LabelSequence(s.to_vec())).collect()
    }

    #[test]
    fn perfect_predictions() {
        let t = seqs(&[&[0, 1, 1], &[2, 0]]);
        let m = evaluate(&t, &t, 3).unwrap();
        assert_eq!(m.per_frame_accuracy, 1.0);
        assert_eq!(m.confusion, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!(m.sequence_majority_accuracy, 1.0);
    }

    #[test]
    fn constant_prediction_on_uniform_truth() {
        let t = seqs(&[&[0, 1, 2, 3]]);
        let p = seqs(&[&[0, 0, 0, 0]]);
        let m = evaluate(&p, &t, 4).unwrap();
        assert_eq!(m.per_frame_accuracy, 0.25);
        assert_eq!(m.per_class_recall, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn misalignment_is_an_error() {
        assert!(evaluate(&seqs(&[&[0]]), &seqs(&[&[0], &[1]]), 2).is_err());
        assert!(evaluate(&seqs(&[&[0, 1]]), &seqs(&[&[0]]), 2).is_err());
        assert!(evaluate(&seqs(&[&[5]]), &seqs(&[&[0]]), 2).is_err());
    }

    #[test]
    fn pooling_adds_counts() {
        let a = evaluate(&seqs(&[&[0, 1]]), &seqs(&[&[0, 0]]), 2).unwrap();
        let b = evaluate(&seqs(&[&[1, 1, 1]]), &seqs(&[&[1, 1, 0]]), 2).unwrap();
        let p = Metrics::pooled(&[a, b]).unwrap();
        assert_eq!(p.confusion, vec![vec![1, 2], vec![0, 2]]);
        assert_eq!(p.per_frame_accuracy, 3.0 / 5.0);
        assert_eq!(p.num_sequences, 2);
    }
}
