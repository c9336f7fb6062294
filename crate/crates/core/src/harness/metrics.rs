//! Confusion matrices and one-vs-rest classification metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// `k x k` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if k == 0 || counts.len() != k * k {
            return Err(Error::input(format!("{} counts do not form a {k}x{k} matrix", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Rows as nested vectors.
    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    /// Embeds into a larger matrix, new classes empty.
    pub fn lifted(&self, k: usize) -> Result<Self> {
        if k < self.k {
            return Err(Error::input(format!("cannot shrink a {}-class matrix to {k}", self.k)));
        }
        let mut counts = vec![0; k * k];
        for t in 0..self.k {
            for p in 0..self.k {
                counts[t * k + p] = self.get(t, p);
            }
        }
        Ok(Self { k, counts })
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::input(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if k == 0 {
        return Err(Error::input("need at least one class"));
    }
    let mut counts = vec![0; k * k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::input(format!("class index out of range 0..{k}: pred {p}, label {t}")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

/// One-vs-rest scores of one class. `None` marks a rate with an empty
/// denominator (sensitivity of a class absent from the truth, specificity
/// when every sample belongs to the class).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_accuracy: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::input("empty confusion matrix"));
    }
    let k = cm.k();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let tn = total - tp - fn_ - fp;
            ClassMetrics {
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                accuracy: (tp + tn) as f64 / total as f64,
            }
        })
        .collect();
    for (c, m) in per_class.iter().enumerate() {
        if m.sensitivity.is_none() {
            log::warn!("class {c} absent from the labels; sensitivity undefined and left out of the macro average");
        }
        if m.specificity.is_none() {
            log::warn!("every sample has class {c}; specificity undefined and left out of the macro average");
        }
    }
    Ok(MetricsReport {
        macro_sensitivity: mean_defined(per_class.iter().map(|m| m.sensitivity)),
        macro_specificity: mean_defined(per_class.iter().map(|m| m.specificity)),
        macro_accuracy: per_class.iter().map(|m| m.accuracy).sum::<f64>() / k as f64,
        per_class,
    })
}

impl MetricsReport {
    /// `class,sensitivity,specificity,accuracy` rows followed by a `macro` row.
    /// Undefined rates are written as `NA`.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
        let mut s = String::from("class,sensitivity,specificity,accuracy\n");
        for (c, m) in self.per_class.iter().enumerate() {
            let name = names.get(c).map_or_else(|| c.to_string(), |n| n.to_string());
            s += &format!("{name},{},{},{}\n", f(m.sensitivity), f(m.specificity), m.accuracy);
        }
        s += &format!("macro,{},{},{}\n", self.macro_sensitivity, self.macro_specificity, self.macro_accuracy);
        s
    }
}

/// Density histogram over [0, 1] with 10 equal bins; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: [u64; 10],
}

impl Histogram {
    pub fn of(values: &[f64]) -> Self {
        let mut counts = [0; 10];
        for &v in values.iter().filter(|v| v.is_finite()) {
            let b = ((v.clamp(0.0, 1.0) * 10.0) as usize).min(9);
            counts[b] += 1;
        }
        Self { counts }
    }

    /// Bin densities; they integrate to 1 over [0, 1].
    pub fn density(&self) -> [f64; 10] {
        let n: u64 = self.counts.iter().sum();
        self.counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 * 10.0 })
    }
}
