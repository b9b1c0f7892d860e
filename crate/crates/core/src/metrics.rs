//! Confusion matrices and per-class / aggregate classification metrics.
//!
//! For class `i`: `tp = cm[i][i]`, `fp` is the rest of column `i`, `fn` the
//! rest of row `i`. Precision and recall are undefined when their
//! denominator is zero. F1 is `2·tp / (2·tp + fp + fn)`, which equals the
//! harmonic mean of precision and recall whenever both exist and is zero
//! when the class is seen but never hit; it is undefined only for a class
//! that never occurs in either sequence. Undefined values are left out of
//! the aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], n: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Data(format!(
                "{} true labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::zeros(n);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n || pred >= self.n {
            return Err(Error::Data(format!(
                "label pair ({truth}, {pred}) is outside [0, {})",
                self.n
            )));
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n, other.n
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.row(class).iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, class)).sum()
    }

    pub fn tp(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn fp(&self, class: usize) -> u64 {
        self.predicted(class) - self.tp(class)
    }

    pub fn fn_(&self, class: usize) -> u64 {
        self.support(class) - self.tp(class)
    }

    /// Each row scaled to percentages; rows without samples stay zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let s = self.support(i);
                self.row(i)
                    .iter()
                    .map(|&c| if s == 0 { 0.0 } else { 100.0 * c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.n())
        .map(|i| {
            let (tp, fp, fn_) = (cm.tp(i), cm.fp(i), cm.fn_(i));
            let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
            ClassMetrics {
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                support: tp + fn_,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// `w_i = 1/n`: the macro average.
    Uniform,
    /// `w_i` = number of true samples of class `i`.
    Support,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `Σ w_i·m_i / Σ w_i` over the classes where `m_i` is defined.
pub fn weighted_mean(values: &[Option<f64>], weights: &[f64]) -> Option<f64> {
    let (num, den) = values
        .iter()
        .zip(weights)
        .filter_map(|(v, &w)| v.map(|v| (w * v, w)))
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    (den > 0.0).then(|| num / den)
}

pub fn aggregate_metrics(per_class: &[ClassMetrics], weighting: Weighting) -> Result<Aggregate> {
    let n = per_class.len();
    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0 / n as f64; n],
        Weighting::Support => per_class.iter().map(|m| m.support as f64).collect(),
    };
    aggregate_with_weights(per_class, &weights)
}

pub fn aggregate_with_weights(per_class: &[ClassMetrics], weights: &[f64]) -> Result<Aggregate> {
    if weights.len() != per_class.len() {
        return Err(Error::Data(format!(
            "{} weights for {} classes",
            weights.len(),
            per_class.len()
        )));
    }
    let pick = |f: fn(&ClassMetrics) -> Option<f64>| -> Vec<Option<f64>> { per_class.iter().map(f).collect() };
    let mean = |vals: Vec<Option<f64>>, what: &str| {
        weighted_mean(&vals, weights)
            .ok_or_else(|| Error::Degenerate(format!("no class has a defined {what}")))
    };
    Ok(Aggregate {
        precision: mean(pick(|m| m.precision), "precision")?,
        recall: mean(pick(|m| m.recall), "recall")?,
        f1: mean(pick(|m| m.f1), "f1")?,
    })
}

/// Fraction of samples on the diagonal.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Degenerate("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Aggregate,
    pub weighted_avg: Aggregate,
    pub accuracy: f64,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let per_class = per_class_metrics(cm);
        let mut warnings = Vec::new();
        for (i, m) in per_class.iter().enumerate() {
            let missing: Vec<&str> = [("precision", m.precision), ("recall", m.recall), ("f1", m.f1)]
                .iter()
                .filter(|(_, v)| v.is_none())
                .map(|(n, _)| *n)
                .collect();
            if !missing.is_empty() {
                let msg = format!(
                    "class {i}: {} undefined (0/0), excluded from averages",
                    missing.join(", ")
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        Ok(MetricsReport {
            macro_avg: aggregate_metrics(&per_class, Weighting::Uniform)?,
            weighted_avg: aggregate_metrics(&per_class, Weighting::Support)?,
            accuracy: accuracy(cm)?,
            per_class,
            warnings,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// `label` names row/column `i`, e.g. `C6`.
pub fn confusion_counts_csv(cm: &ConfusionMatrix, labels: &[String]) -> String {
    let mut s = String::from("true\\pred");
    for l in labels {
        write!(s, ",{l}").unwrap();
    }
    s.push('\n');
    for (i, label) in labels.iter().enumerate().take(cm.n()) {
        s.push_str(label);
        for c in cm.row(i) {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn confusion_percent_csv(cm: &ConfusionMatrix, labels: &[String]) -> String {
    let mut s = String::from("true\\pred");
    for l in labels {
        write!(s, ",{l}").unwrap();
    }
    s.push('\n');
    for (i, row) in cm.row_percentages().iter().enumerate() {
        s.push_str(&labels[i]);
        for v in row {
            write!(s, ",{v:.4}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn per_class_csv(report: &MetricsReport, labels: &[String]) -> String {
    let mut s = String::from("class,precision,recall,f1,support\n");
    for (l, m) in labels.iter().zip(&report.per_class) {
        writeln!(
            s,
            "{l},{},{},{},{}",
            fmt_opt(m.precision),
            fmt_opt(m.recall),
            fmt_opt(m.f1),
            m.support
        )
        .unwrap();
    }
    s
}

pub fn summary_csv(report: &MetricsReport) -> String {
    format!(
        "accuracy,precision,recall,f1\n{:.6},{:.6},{:.6},{:.6}\n",
        report.accuracy, report.macro_avg.precision, report.macro_avg.recall, report.macro_avg.f1
    )
}

/// Writes the four report tables into `dir`.
pub fn write_report(dir: &Path, cm: &ConfusionMatrix, report: &MetricsReport, labels: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("confusion_counts.csv", confusion_counts_csv(cm, labels)),
        ("confusion_percent.csv", confusion_percent_csv(cm, labels)),
        ("per_class.csv", per_class_csv(report, labels)),
        ("summary.csv", summary_csv(report)),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.row(0), &[1, 1]);
        assert_eq!(cm.row(1), &[0, 2]);
        let m = per_class_metrics(&cm);
        assert_eq!(m[0].precision, Some(1.0));
        assert_eq!(m[0].recall, Some(0.5));
        assert!((m[0].f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[1].precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m[1].recall, Some(1.0));
        assert!((m[1].f1.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(accuracy(&cm).unwrap(), 0.75);
    }

    #[test]
    fn identity_and_empty() {
        let labels = [0, 1, 2, 2, 1, 0, 0];
        let cm = ConfusionMatrix::from_labels(&labels, &labels, 3).unwrap();
        assert_eq!(cm.row(0), &[3, 0, 0]);
        assert_eq!(cm.row(2), &[0, 0, 2]);
        for m in per_class_metrics(&cm) {
            assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));
        }
        assert_eq!(accuracy(&cm).unwrap(), 1.0);

        let empty = ConfusionMatrix::from_labels(&[], &[], 4).unwrap();
        assert_eq!(empty, ConfusionMatrix::zeros(4));
        assert!(matches!(accuracy(&empty), Err(Error::Degenerate(_))));
        assert!(MetricsReport::from_confusion(&empty).is_err());
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(ConfusionMatrix::from_labels(&[0, 1], &[0], 2), Err(Error::Data(_))));
        assert!(matches!(ConfusionMatrix::from_labels(&[0, 2], &[0, 1], 2), Err(Error::Data(_))));
    }

    #[test]
    fn absent_class_is_excluded_with_warning() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        let m = per_class_metrics(&cm);
        assert_eq!((m[2].precision, m[2].recall, m[2].f1), (None, None, None));
        let r = MetricsReport::from_confusion(&cm).unwrap();
        assert_eq!(r.warnings.len(), 1);
        // Uniform mean over the two defined classes only.
        assert!((r.macro_avg.recall - 0.75).abs() < 1e-15);
    }

    #[test]
    fn never_predicted_class_scores_zero_f1() {
        let cm = ConfusionMatrix::from_labels(&[0, 1], &[0, 0], 2).unwrap();
        let m = per_class_metrics(&cm);
        assert_eq!(m[1].precision, None);
        assert_eq!(m[1].recall, Some(0.0));
        assert_eq!(m[1].f1, Some(0.0));
    }

    #[test]
    fn aggregation_examples() {
        let mk = |v: f64, support: u64| ClassMetrics {
            precision: Some(v),
            recall: Some(v),
            f1: Some(v),
            support,
        };
        let same = vec![mk(0.3, 4); 5];
        let a = aggregate_metrics(&same, Weighting::Uniform).unwrap();
        assert!((a.precision - 0.3).abs() < 1e-15);

        let two = [mk(1.0, 10), mk(0.5, 30)];
        assert_eq!(aggregate_metrics(&two, Weighting::Uniform).unwrap().recall, 0.75);
        assert_eq!(aggregate_metrics(&two, Weighting::Support).unwrap().recall, 0.625);

        let none = [ClassMetrics {
            precision: None,
            recall: None,
            f1: None,
            support: 0,
        }];
        assert!(matches!(aggregate_metrics(&none, Weighting::Uniform), Err(Error::Degenerate(_))));
    }

    #[test]
    fn csv_layouts() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        let r = MetricsReport::from_confusion(&cm).unwrap();
        let labels = vec!["C0".to_string(), "C1".to_string()];
        assert_eq!(confusion_counts_csv(&cm, &labels), "true\\pred,C0,C1\nC0,1,1\nC1,0,2\n");
        assert_eq!(
            confusion_percent_csv(&cm, &labels),
            "true\\pred,C0,C1\nC0,50.0000,50.0000\nC1,0.0000,100.0000\n"
        );
        assert!(summary_csv(&r).starts_with("accuracy,precision,recall,f1\n0.750000,"));
        assert!(per_class_csv(&r, &labels).starts_with("class,precision,recall,f1,support\nC0,1.000000,0.500000,0.666667,2\n"));
    }
}
