//! Binary classification metrics for imbalanced data: confusion counts,
//! per-class F1, and the Macro F1 used for model selection and reporting.

use crate::error::{Error, Result};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(y_true: &[u8], y_pred: &[u8]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::MetricLength { lhs: y_true.len(), rhs: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(Error::InvalidParam {
            name: "y_true".to_string(),
            msg: "metrics need at least one sample".to_string(),
        });
    }
    if let Some(&bad) = y_true.iter().chain(y_pred.iter()).find(|&&v| v > 1) {
        return Err(Error::InvalidParam {
            name: "labels".to_string(),
            msg: format!("entries must be 0 or 1, got {bad}"),
        });
    }
    Ok(())
}

/// Confusion counts with class 1 as the positive class.
pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    check_inputs(y_true, y_pred)?;
    let mut m = ConfusionMatrix { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
        match (t, p) {
            (1, 1) => m.tp += 1,
            (1, 0) => m.fn_ += 1,
            (0, 0) => m.tn += 1,
            _ => m.fp += 1,
        }
    }
    Ok(m)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// (precision, recall) for the positive class; undefined ratios are 0.
pub fn precision_recall_pos(m: &ConfusionMatrix) -> (f64, f64) {
    let precision = if m.tp + m.fp == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fp) as f64
    };
    let recall = if m.tp + m.fn_ == 0 {
        0.0
    } else {
        m.tp as f64 / (m.tp + m.fn_) as f64
    };
    (precision, recall)
}

/// F1 per class: treat each class in turn as positive. Returns (f1 of
/// class 0, f1 of class 1).
pub fn per_class_f1(y_true: &[u8], y_pred: &[u8]) -> Result<(f64, f64)> {
    let m = confusion(y_true, y_pred)?;
    let f1_pos = f1_from_counts(m.tp, m.fp, m.fn_);
    let f1_neg = f1_from_counts(m.tn, m.fn_, m.fp);
    Ok((f1_neg, f1_pos))
}

/// Unweighted mean of the two per-class F1 scores.
pub fn macro_f1(y_true: &[u8], y_pred: &[u8]) -> Result<f64> {
    let (f0, f1) = per_class_f1(y_true, y_pred)?;
    Ok(0.5 * (f0 + f1))
}

/// One row of the metrics report CSV.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub appliance: String,
    pub split: String,
    pub macro_f1: f64,
    pub f1_pos: f64,
    pub f1_neg: f64,
    pub precision_pos: f64,
    pub recall_pos: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn from_labels(
        appliance: &str,
        split: &str,
        y_true: &[u8],
        y_pred: &[u8],
    ) -> Result<MetricsReport> {
        let m = confusion(y_true, y_pred)?;
        let (f1_neg, f1_pos) = per_class_f1(y_true, y_pred)?;
        let (precision_pos, recall_pos) = precision_recall_pos(&m);
        Ok(MetricsReport {
            appliance: appliance.to_string(),
            split: split.to_string(),
            macro_f1: 0.5 * (f1_neg + f1_pos),
            f1_pos,
            f1_neg,
            precision_pos,
            recall_pos,
            n: m.total(),
        })
    }
}

pub fn write_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "appliance,split,macro_f1,f1_pos,f1_neg,precision_pos,recall_pos,n"
    )?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.appliance, r.split, r.macro_f1, r.f1_pos, r.f1_neg, r.precision_pos, r.recall_pos, r.n
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_counted_confusion_matrix() {
        let m = confusion(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!(m, ConfusionMatrix { tp: 1, fn_: 1, tn: 2, fp: 0 });
        assert_eq!(m.total(), 4);

        let perfect = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(perfect.fp, 0);
        assert_eq!(perfect.fn_, 0);
    }

    #[test]
    fn hand_computed_macro_f1() {
        let got = macro_f1(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        let want = 0.5 * (2.0 / 3.0 + 0.8);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.733333333333333).abs() < 1e-12);

        assert_eq!(macro_f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn all_one_class_predictions_halve_the_majority_f1() {
        // balanced truth, constant positive prediction
        let got = macro_f1(&[1, 1, 0, 0], &[1, 1, 1, 1]).unwrap();
        let f1_pos = 2.0 * 2.0 / (2.0 * 2.0 + 2.0);
        assert!((got - f1_pos / 2.0).abs() < 1e-12);
    }

    #[test]
    fn relabeling_symmetry_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let t: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let a = macro_f1(&t, &p).unwrap();
            let t2: Vec<u8> = t.iter().map(|&v| 1 - v).collect();
            let p2: Vec<u8> = p.iter().map(|&v| 1 - v).collect();
            let b = macro_f1(&t2, &p2).unwrap();
            assert!((a - b).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn agrees_with_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let t: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let got = macro_f1(&t, &p).unwrap();
            let want = oracle::macro_f1_oracle(&t, &p);
            assert!((got - want).abs() < 1e-12);
            let (g0, g1) = per_class_f1(&t, &p).unwrap();
            let (w0, w1) = oracle::per_class_f1_oracle(&t, &p);
            assert!((g0 - w0).abs() < 1e-12 && (g1 - w1).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            macro_f1(&[1, 0], &[1]),
            Err(Error::MetricLength { lhs: 2, rhs: 1 })
        ));
        assert!(macro_f1(&[], &[]).is_err());
        assert!(macro_f1(&[2], &[1]).is_err());
    }
}
