//! Confusion-matrix bookkeeping and the derived per-class scores:
//! accuracy, precision, recall, F1 — per class and macro-averaged.

use crate::error::{Error, Result};

/// C×C counts; entry (i, j) = samples of true class i predicted as j.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn at(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum: number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes]
            .iter()
            .sum()
    }

    /// Column sum: number of samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.at(t, c)).sum()
    }
}

pub fn confusion(
    true_labels: &[usize],
    predicted_labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted_labels.len() {
        return Err(Error::InvalidArg(format!(
            "label list lengths differ: {} vs {}",
            true_labels.len(),
            predicted_labels.len()
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArg("class count must be >= 1".into()));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in true_labels.iter().zip(predicted_labels) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArg(format!(
                "label out of range for {classes} classes: true {t}, pred {p}"
            )));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// True when any of the scores hit the 0/0 → 0 convention.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    /// Unweighted mean of per-class F1 (the primary average).
    pub macro_f1: f64,
    /// Support-weighted mean of per-class F1, for comparison.
    pub weighted_f1: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn report(m: &ConfusionMatrix) -> Result<ClassReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::InvalidArg("empty confusion matrix".into()));
    }
    let c = m.class_count();
    let mut classes = Vec::with_capacity(c);
    let mut diag = 0u64;
    for i in 0..c {
        let tp = m.at(i, i);
        diag += tp;
        let (precision, d1) = ratio(tp, m.predicted(i));
        let (recall, d2) = ratio(tp, m.support(i));
        let (f1, d3) = if precision + recall > 0.0 {
            (2.0 * precision * recall / (precision + recall), false)
        } else {
            (0.0, true)
        };
        classes.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: m.support(i),
            degenerate: d1 || d2 || d3,
        });
    }
    let accuracy = diag as f64 / total as f64;
    let macro_f1 = classes.iter().map(|x| x.f1).sum::<f64>() / c as f64;
    let weighted_f1 = classes
        .iter()
        .map(|x| x.f1 * x.support as f64)
        .sum::<f64>()
        / total as f64;
    Ok(ClassReport {
        classes,
        accuracy,
        macro_f1,
        weighted_f1,
        total,
    })
}

impl ClassReport {
    /// Aligned text table in the usual precision/recall/F1/support layout.
    pub fn table(&self, names: &[String]) -> String {
        let mut out = String::new();
        let width = names.iter().map(|n| n.len()).max().unwrap_or(5).max(12);
        out.push_str(&format!(
            "{:width$}  {:>9}  {:>9}  {:>9}  {:>8}\n",
            "class", "precision", "recall", "f1-score", "support"
        ));
        for (i, c) in self.classes.iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            let flag = if c.degenerate { " *" } else { "" };
            out.push_str(&format!(
                "{:width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>8}{flag}\n",
                name, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str(&format!(
            "{:width$}  {:>9}  {:>9}  {:>9.2}  {:>8}\n",
            "accuracy", "", "", self.accuracy, self.total
        ));
        out.push_str(&format!(
            "{:width$}  {:>9}  {:>9}  {:>9.2}  {:>8}\n",
            "macro avg F1", "", "", self.macro_f1, self.total
        ));
        out.push_str(&format!(
            "{:width$}  {:>9}  {:>9}  {:>9.2}  {:>8}\n",
            "weighted F1", "", "", self.weighted_f1, self.total
        ));
        if self.classes.iter().any(|c| c.degenerate) {
            out.push_str("* zero-division (0/0 -> 0) in at least one score\n");
        }
        out
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for (i, c) in self.classes.iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                name, c.precision, c.recall, c.f1, c.support
            ));
        }
        out
    }
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 1, 2, 1, 0];
        let m = confusion(&y, &y, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(m.at(t, p), 0);
                }
            }
        }
        let r = report(&m).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn empty_lists_give_zero_matrix() {
        let m = confusion(&[], &[], 4).unwrap();
        assert_eq!(m.total(), 0);
        assert!(report(&m).is_err());
    }

    #[test]
    fn hand_counted_case() {
        let m = confusion(&[0, 0, 1, 2], &[0, 1, 1, 1], 3).unwrap();
        assert_eq!(m.at(0, 0), 1);
        assert_eq!(m.at(0, 1), 1);
        assert_eq!(m.at(1, 1), 1);
        assert_eq!(m.at(2, 1), 1);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn length_mismatch_and_range_errors() {
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(confusion(&[0], &[5], 2).is_err());
    }

    #[test]
    fn f1_two_decimal_rounding() {
        // precision 0.75 and recall 0.95 must print as F1 0.84.
        let f1 = 2.0 * 0.75 * 0.95 / (0.75 + 0.95);
        assert_eq!(format!("{f1:.2}"), "0.84");
    }

    #[test]
    fn degenerate_class_scores_zero_with_flag() {
        // Class 2 never occurs and is never predicted.
        let m = confusion(&[0, 1], &[0, 1], 3).unwrap();
        let r = report(&m).unwrap();
        assert_eq!(r.classes[2].f1, 0.0);
        assert!(r.classes[2].degenerate);
        assert!(!r.classes[0].degenerate);
    }

    #[test]
    fn f1_between_precision_and_recall() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t: Vec<usize> = (0..300).map(|_| rng.gen_range(0..5)).collect();
        let p: Vec<usize> = (0..300).map(|_| rng.gen_range(0..5)).collect();
        let r = report(&confusion(&t, &p, 5).unwrap()).unwrap();
        for c in &r.classes {
            if c.precision > 0.0 && c.recall > 0.0 {
                assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
                assert!(c.f1 >= c.precision.min(c.recall) - 1e-12);
            }
        }
    }

    #[test]
    fn permuting_classes_preserves_averages() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let t: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let p: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let perm = [2usize, 0, 3, 1];
        let tp: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
        let pp: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
        let a = report(&confusion(&t, &p, 4).unwrap()).unwrap();
        let b = report(&confusion(&tp, &pp, 4).unwrap()).unwrap();
        assert!((a.accuracy - b.accuracy).abs() < 1e-15);
        assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_row(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax_row(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax_row(&[3.0]), 0);
    }

    #[test]
    fn csv_column_contract() {
        let m = confusion(&[0, 1], &[0, 1], 2).unwrap();
        let r = report(&m).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = r.to_csv(&names);
        assert!(csv.starts_with("class,precision,recall,f1,support\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
