use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Binary classification summary with AD as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub acc: f64,
    pub sens: f64,
    pub spec: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Area under the ROC curve from the Mann–Whitney rank statistic, with average ranks for
/// tied scores.
pub fn auc(scores: &[f64], truth: &[Label]) -> Result<f64> {
    let n_pos = truth.iter().filter(|l| l.is_positive()).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Classification("AUC is undefined when truth has a single label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let r_pos: f64 = truth.iter().zip(&ranks).filter(|(l, _)| l.is_positive()).map(|(_, r)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((r_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn classification_metrics(pred: &[Label], scores: &[f64], truth: &[Label]) -> Result<ClassificationReport> {
    if pred.is_empty() || pred.len() != truth.len() || scores.len() != truth.len() {
        return Err(Error::Classification("predictions, scores and truth must be nonempty and aligned".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        match (p.is_positive(), t.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (a, b, c, d) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let den = ((a + b) * (a + d) * (c + b) * (c + d)).sqrt();
    Ok(ClassificationReport {
        acc: (a + c) / (a + b + c + d),
        sens: ratio(a, a + d),
        spec: ratio(c, c + b),
        f1: ratio(2.0 * a, 2.0 * a + b + d),
        mcc: ratio(a * c - b * d, den),
        auc: auc(scores, truth)?,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Mean and sample standard deviation of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub acc: MeanStd,
    pub sens: MeanStd,
    pub spec: MeanStd,
    pub f1: MeanStd,
    pub mcc: MeanStd,
    pub auc: MeanStd,
}

impl AggregateReport {
    pub fn from_folds(reports: &[ClassificationReport]) -> Self {
        let col = |f: fn(&ClassificationReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            acc: col(|r| r.acc),
            sens: col(|r| r.sens),
            spec: col(|r| r.spec),
            f1: col(|r| r.f1),
            mcc: col(|r| r.mcc),
            auc: col(|r| r.auc),
        }
    }

    /// `(name, value)` pairs in table order.
    pub fn columns(&self) -> [(&'static str, MeanStd); 6] {
        [
            ("ACC", self.acc),
            ("SENS", self.sens),
            ("SPEC", self.spec),
            ("F1", self.f1),
            ("MCC", self.mcc),
            ("AUC", self.auc),
        ]
    }
}
