//! Precision/recall/F1 over the three punctuation classes.
//!
//! The confusion matrix is gold × predicted over non-ignored tokens. The
//! overall row pools COMMA, PERIOD and QUESTION (O is excluded entirely);
//! micro pooling sums TP/FP/FN before dividing, macro averages the per-class
//! scores.

use std::fmt;

use thiserror::Error;

use crate::config::Aggregation;
use crate::data::{Label, NUM_LABELS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold and predicted lengths differ: {gold} vs {predicted}")]
    LengthMismatch { gold: usize, predicted: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn prf(tp: u64, fp: u64, fn_: u64) -> Prf {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Prf {
        precision,
        recall,
        f1: f1_from(precision, recall),
    }
}

/// Confusion counts plus per-class and pooled precision/recall/F1.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    /// `confusion[gold][predicted]`.
    pub confusion: [[u64; NUM_LABELS]; NUM_LABELS],
}

impl MetricsReport {
    fn tp(&self, class: usize) -> u64 {
        self.confusion[class][class]
    }

    fn fp(&self, class: usize) -> u64 {
        (0..NUM_LABELS)
            .filter(|&g| g != class)
            .map(|g| self.confusion[g][class])
            .sum()
    }

    fn fn_(&self, class: usize) -> u64 {
        (0..NUM_LABELS)
            .filter(|&p| p != class)
            .map(|p| self.confusion[class][p])
            .sum()
    }

    /// One-vs-rest scores for a punctuation class.
    pub fn class(&self, label: Label) -> Prf {
        let c = label.id();
        prf(self.tp(c), self.fp(c), self.fn_(c))
    }

    /// Pooled scores over {COMMA, PERIOD, QUESTION}; O never counts.
    pub fn overall(&self, agg: Aggregation) -> Prf {
        let classes = [Label::Comma, Label::Period, Label::Question];
        match agg {
            Aggregation::Micro => {
                let tp: u64 = classes.iter().map(|&c| self.tp(c.id())).sum();
                let fp: u64 = classes.iter().map(|&c| self.fp(c.id())).sum();
                let fn_: u64 = classes.iter().map(|&c| self.fn_(c.id())).sum();
                prf(tp, fp, fn_)
            }
            Aggregation::Macro => {
                let scores: Vec<Prf> = classes.iter().map(|&c| self.class(c)).collect();
                let n = scores.len() as f64;
                let precision = scores.iter().map(|s| s.precision).sum::<f64>() / n;
                let recall = scores.iter().map(|s| s.recall).sum::<f64>() / n;
                Prf {
                    precision,
                    recall,
                    f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
                }
            }
        }
    }

    /// Fraction of tokens tagged with the gold label (all four classes).
    pub fn token_accuracy(&self) -> f64 {
        let correct: u64 = (0..NUM_LABELS).map(|c| self.confusion[c][c]).sum();
        let total: u64 = self
            .confusion
            .iter()
            .flat_map(|row| row.iter())
            .sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    pub fn render(&self, agg: Aggregation) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:10}  {:>9}  {:>9}  {:>9}\n",
            "class", "P", "R", "F1"
        ));
        for label in [Label::Comma, Label::Period, Label::Question] {
            let s = self.class(label);
            out.push_str(&format!(
                "{:10}  {:>9.4}  {:>9.4}  {:>9.4}\n",
                label.name(),
                s.precision,
                s.recall,
                s.f1
            ));
        }
        let o = self.overall(agg);
        out.push_str(&format!(
            "{:10}  {:>9.4}  {:>9.4}  {:>9.4}\n",
            format!("overall[{agg}]"),
            o.precision,
            o.recall,
            o.f1
        ));
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(Aggregation::Micro))
    }
}

/// Tallies aligned gold/predicted labels. Ignored positions must already be
/// filtered out upstream.
pub fn compute_metrics(gold: &[Label], predicted: &[Label]) -> Result<MetricsReport, MetricsError> {
    if gold.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            predicted: predicted.len(),
        });
    }
    let mut confusion = [[0u64; NUM_LABELS]; NUM_LABELS];
    for (&g, &p) in gold.iter().zip(predicted) {
        confusion[g.id()][p.id()] += 1;
    }
    Ok(MetricsReport { confusion })
}
