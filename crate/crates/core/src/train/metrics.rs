//! Precision / recall / F1 from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// `confusion[gold][pred]`
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub fn from_confusion(labels: &[String], confusion: Vec<Vec<usize>>) -> Result<Self> {
        let n = labels.len();
        if confusion.len() != n || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::shape("confusion", &[confusion.len()], &[n]));
        }
        let mut per_label = Vec::with_capacity(n);
        let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
        for (k, label) in labels.iter().enumerate() {
            let tp = confusion[k][k];
            let gold: usize = confusion[k].iter().sum();
            let pred: usize = confusion.iter().map(|r| r[k]).sum();
            tp_all += tp;
            fp_all += pred - tp;
            fn_all += gold - tp;
            let precision = ratio(tp, pred);
            let recall = ratio(tp, gold);
            per_label.push(LabelScores {
                label: label.clone(),
                precision,
                recall,
                f1: f1(precision, recall),
                support: gold,
            });
        }
        let mean = |f: fn(&LabelScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_label.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let micro_precision = ratio(tp_all, tp_all + fp_all);
        let micro_recall = ratio(tp_all, tp_all + fn_all);
        Ok(MetricsReport {
            macro_precision: mean(|s| s.precision),
            macro_recall: mean(|s| s.recall),
            macro_f1: mean(|s| s.f1),
            micro_precision,
            micro_recall,
            micro_f1: f1(micro_precision, micro_recall),
            per_label,
            confusion,
        })
    }

    pub fn from_predictions(labels: &[String], gold: &[usize], pred: &[usize]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::shape("metrics", &[gold.len()], &[pred.len()]));
        }
        let n = labels.len();
        let mut confusion = vec![vec![0; n]; n];
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= n || p >= n {
                return Err(Error::Index {
                    index: g.max(p),
                    rows: n,
                });
            }
            confusion[g][p] += 1;
        }
        Self::from_confusion(labels, confusion)
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let correct: usize = (0..self.confusion.len()).map(|k| self.confusion[k][k]).sum();
        ratio(correct, total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let r = MetricsReport::from_predictions(&labels(3), &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert!(r.per_label.iter().all(|s| s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0));
        assert_eq!((r.macro_f1, r.micro_f1), (1.0, 1.0));
    }

    #[test]
    fn two_by_two_hand_example() {
        let r = MetricsReport::from_confusion(&labels(2), vec![vec![1, 1], vec![0, 2]]).unwrap();
        let (a, b) = (&r.per_label[0], &r.per_label[1]);
        assert_eq!((a.precision, a.recall), (1.0, 0.5));
        assert!((a.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.precision - 2.0 / 3.0).abs() < 1e-15 && b.recall == 1.0);
        assert!((b.f1 - 0.8).abs() < 1e-15);
        assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-15);
        assert!((r.micro_f1 - r.accuracy()).abs() < 1e-15);
    }

    #[test]
    fn absent_label_scores_zero_and_counts_in_macro() {
        let r = MetricsReport::from_predictions(&labels(3), &[0, 1], &[0, 1]).unwrap();
        let absent = &r.per_label[2];
        assert_eq!((absent.precision, absent.recall, absent.f1), (0.0, 0.0, 0.0));
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.micro_f1, 1.0);
    }
}
