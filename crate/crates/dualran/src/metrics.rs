//! Classification metrics: confusion matrix, accuracy, per-class F1 and the
//! weighted / micro / macro aggregates, plus the neutral-excluded micro F1
//! used for corpora dominated by a neutral class.
//!
//! Conventions: F1 is 0 when precision + recall is 0; macro F1 averages over
//! every manifest class, counting zero-support classes as 0; the
//! neutral-excluded micro F1 drops the neutral row and column from the
//! aggregation.

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.classes + pred_class]
    }

    pub fn add(&mut self, true_class: usize, pred_class: usize) {
        self.counts[true_class * self.classes + pred_class] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count matrix from aligned prediction/label sequences.
    pub fn from_pairs(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Contract(format!(
                "confusion: {} predictions vs {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (pos, (&p, &t)) in preds.iter().zip(labels).enumerate() {
            if p >= classes || t >= classes {
                return Err(Error::Label(format!(
                    "class index out of range at position {pos}: pred {p}, true {t}, classes {classes}"
                )));
            }
            cm.add(t, p);
        }
        Ok(cm)
    }

    /// Comma-separated table with a header row of class names.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&class_names[t]);
            for p in 0..self.classes {
                out.push(',');
                out.push_str(&self.at(t, p).to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Present when a neutral class index was supplied.
    pub micro_f1_excl_neutral: Option<f64>,
    pub per_class_f1: Vec<f64>,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// All metrics from a confusion matrix. `neutral_index` enables the
/// neutral-excluded micro F1.
pub fn compute_metrics(cm: &ConfusionMatrix, neutral_index: Option<usize>) -> MetricReport {
    let k = cm.classes();
    let total: u64 = cm.total();
    let trace: u64 = (0..k).map(|c| cm.at(c, c)).sum();
    let accuracy = safe_div(trace as f64, total as f64);

    let mut per_class_f1 = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.at(c, c) as f64;
        let pred_c: f64 = (0..k).map(|t| cm.at(t, c) as f64).sum();
        let true_c: f64 = (0..k).map(|p| cm.at(c, p) as f64).sum();
        let precision = safe_div(tp, pred_c);
        let recall = safe_div(tp, true_c);
        per_class_f1.push(safe_div(2.0 * precision * recall, precision + recall));
        support.push(true_c);
    }

    let total_support: f64 = support.iter().sum();
    let weighted_f1 = safe_div(
        per_class_f1
            .iter()
            .zip(&support)
            .map(|(f1, s)| f1 * s)
            .sum::<f64>(),
        total_support,
    );
    let macro_f1 = safe_div(per_class_f1.iter().sum::<f64>(), k as f64);

    // micro aggregation over all classes
    let micro_f1 = micro_over(cm, &(0..k).collect::<Vec<_>>());

    let micro_f1_excl_neutral = neutral_index.map(|n| {
        let kept: Vec<usize> = (0..k).filter(|c| *c != n).collect();
        micro_over(cm, &kept)
    });

    MetricReport {
        accuracy,
        weighted_f1,
        micro_f1,
        macro_f1,
        micro_f1_excl_neutral,
        per_class_f1,
    }
}

/// Micro F1 over the sub-matrix restricted to `kept` classes on both axes.
fn micro_over(cm: &ConfusionMatrix, kept: &[usize]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for &c in kept {
        tp += cm.at(c, c) as f64;
        for &t in kept {
            if t != c {
                fp += cm.at(t, c) as f64;
                fn_ += cm.at(c, t) as f64;
            }
        }
    }
    safe_div(2.0 * tp, 2.0 * tp + fp + fn_)
}
