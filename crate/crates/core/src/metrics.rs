//! Binary classification metrics. The positive class is palm (label `1`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    /// From a 2×2 matrix with rows = actual (positive, negative), columns = predicted.
    pub fn from_rows(rows: [[u64; 2]; 2]) -> Self {
        ConfusionMatrix::new(rows[0][0], rows[1][0], rows[0][1], rows[1][1])
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same matrix with the positive and negative class designations swapped.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix::new(self.tn, self.fn_, self.fp, self.tp)
    }

    fn require_total(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::invalid("metric of an empty confusion matrix")),
            n => Ok(n),
        }
    }
}

/// A metric value plus a flag set when a denominator vanished and a fallback was used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

impl Metric {
    fn ok(value: f64) -> Self {
        Metric {
            value,
            degenerate: false,
        }
    }

    fn degenerate(value: f64) -> Self {
        Metric {
            value,
            degenerate: true,
        }
    }
}

pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("confusion matrix of zero items"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&l, &p) in labels.iter().zip(predictions) {
        match (l, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => return Err(Error::invalid(format!("label/prediction ({l}, {p}) not in {{0,1}}"))),
        }
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.require_total()?;
    Ok((cm.tp + cm.tn) as f64 / n as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Result<Metric> {
    cm.require_total()?;
    Ok(match cm.tp + cm.fp {
        0 => Metric::degenerate(0.0),
        d => Metric::ok(cm.tp as f64 / d as f64),
    })
}

pub fn recall(cm: &ConfusionMatrix) -> Result<Metric> {
    cm.require_total()?;
    Ok(match cm.tp + cm.fn_ {
        0 => Metric::degenerate(0.0),
        d => Metric::ok(cm.tp as f64 / d as f64),
    })
}

/// Unweighted mean of the per-class accuracies. With one class absent, the
/// present class's accuracy is returned and flagged.
pub fn average_accuracy(cm: &ConfusionMatrix) -> Result<Metric> {
    cm.require_total()?;
    let pos = cm.tp + cm.fn_;
    let neg = cm.tn + cm.fp;
    Ok(match (pos, neg) {
        (0, n) => Metric::degenerate(cm.tn as f64 / n as f64),
        (p, 0) => Metric::degenerate(cm.tp as f64 / p as f64),
        // a/p + b/n over a common denominator keeps this a single rounding
        (p, n) => {
            let num = u128::from(cm.tp) * u128::from(n) + u128::from(cm.tn) * u128::from(p);
            Metric::ok(num as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
        }
    })
}

/// Cohen's κ = (p_o − p_e) / (1 − p_e), evaluated as one exact rational.
///
/// When chance agreement is total (p_e = 1) κ is undefined; 0 is returned flagged.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<Metric> {
    let n = i128::from(cm.require_total()?);
    let (tp, fp, fn_, tn) = (
        i128::from(cm.tp),
        i128::from(cm.fp),
        i128::from(cm.fn_),
        i128::from(cm.tn),
    );
    let expected = (tp + fn_) * (tp + fp) + (tn + fp) * (tn + fn_);
    let num = n * (tp + tn) - expected;
    let den = n * n - expected;
    Ok(if den == 0 {
        Metric::degenerate(0.0)
    } else {
        Metric::ok(num as f64 / den as f64)
    })
}

/// ROC AUC as the fraction of (positive, negative) pairs ranked concordantly,
/// ties credited one half. O(n log n) via sorting.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::invalid(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC AUC is undefined with a single class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the concordance count, so half-credit ties stay integral.
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Points (false-positive rate, true-positive rate) of the ROC curve, thresholds descending.
pub fn roc_curve(labels: &[u8], scores: &[f64]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&n| scores[n] != scores[i]);
        if last_of_tie {
            pts.push((fp / neg, tp / pos));
        }
    }
    pts
}

/// The column set of a classification results table, plus configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scale: String,
    pub nnodes: usize,
    pub acc: f64,
    pub roc_auc: f64,
    pub aa: f64,
    pub kappa: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionMatrix,
    /// Names of metrics whose denominators vanished.
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    /// Assemble a report from labels (1 = palm), palm probabilities and a 0.5 decision rule.
    pub fn from_scores(scale: &str, nnodes: usize, labels: &[u8], scores: &[f64]) -> Result<Self> {
        let preds: Vec<u8> = scores.iter().map(|&p| u8::from(p >= 0.5)).collect();
        let counts = confusion(labels, &preds)?;
        let mut degenerate = Vec::new();
        let mut take = |name: &str, m: Metric| {
            if m.degenerate {
                degenerate.push(name.to_string());
            }
            m.value
        };
        let aa = take("aa", average_accuracy(&counts)?);
        let kappa = take("kappa", cohen_kappa(&counts)?);
        let precision = take("precision", precision(&counts)?);
        let recall = take("recall", recall(&counts)?);
        Ok(MetricsReport {
            scale: scale.to_string(),
            nnodes,
            acc: accuracy(&counts)?,
            roc_auc: roc_auc(labels, scores)?,
            aa,
            kappa,
            precision,
            recall,
            counts,
            degenerate,
        })
    }

    pub fn header() -> String {
        format!(
            "{:<10} | {:>6} | {:>6} | {:>7} | {:>6} | {:>6} | {:>9} | {:>6}",
            "Patch Size", "nnodes", "Acc", "ROC AUC", "AA", "κ", "Precision", "Recall"
        )
    }

    pub fn row(&self) -> String {
        format!(
            "{:<10} | {:>6} | {:>6.4} | {:>7.4} | {:>6.4} | {:>6.4} | {:>9.4} | {:>6.4}",
            self.scale, self.nnodes, self.acc, self.roc_auc, self.aa, self.kappa, self.precision,
            self.recall
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::header())?;
        write!(f, "{}", self.row())
    }
}
