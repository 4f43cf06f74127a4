//! Label-based mean accuracy and instance-based set-overlap metrics.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub label_accuracy: f64,
    /// Set when the attribute has no positives or no negatives in the
    /// evaluated set; the missing side's ratio is defined as 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mA")]
    pub ma: f64,
    pub accu: f64,
    pub prec: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute: Vec<AttributeReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// pred = 1 iff p > threshold (strict).
pub fn binarize(p: &Tensor, threshold: f64) -> Tensor {
    Tensor::from_fn(p.shape(), |i| {
        if p.data()[i] > threshold {
            1.0
        } else {
            0.0
        }
    })
}

/// Per-attribute mean of positive- and negative-class accuracy, averaged over
/// attributes. A side with no examples contributes ratio 0 and flags the
/// attribute as degenerate.
pub fn label_ma(pred: &Tensor, y: &Tensor) -> (f64, Vec<AttributeReport>) {
    assert_eq!(pred.shape(), y.shape());
    let (b, m) = (pred.shape()[0], pred.shape()[1]);
    let mut per = Vec::with_capacity(m);
    let mut total = 0.0;
    for mi in 0..m {
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..b {
            let p = pred.data()[i * m + mi] == 1.0;
            let t = y.data()[i * m + mi] == 1.0;
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let pos = tp + fn_;
        let neg = tn + fp;
        let pos_acc = if pos > 0 { tp as f64 / pos as f64 } else { 0.0 };
        let neg_acc = if neg > 0 { tn as f64 / neg as f64 } else { 0.0 };
        let acc = 0.5 * (pos_acc + neg_acc);
        per.push(AttributeReport {
            tp,
            fp,
            tn,
            fn_,
            label_accuracy: acc,
            degenerate: pos == 0 || neg == 0,
        });
        total += acc;
    }
    (total / m as f64, per)
}

/// Instance metrics over predicted/true attribute sets, means over samples;
/// 0/0 terms are defined as 0.
pub fn instance_metrics(pred: &Tensor, y: &Tensor) -> (f64, f64, f64, f64) {
    assert_eq!(pred.shape(), y.shape());
    let (b, m) = (pred.shape()[0], pred.shape()[1]);
    let (mut acc, mut prec, mut rec, mut f1) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..b {
        let (mut inter, mut np, mut nt) = (0u64, 0u64, 0u64);
        for mi in 0..m {
            let p = pred.data()[i * m + mi] == 1.0;
            let t = y.data()[i * m + mi] == 1.0;
            np += p as u64;
            nt += t as u64;
            inter += (p && t) as u64;
        }
        let union = np + nt - inter;
        let a = if union > 0 {
            inter as f64 / union as f64
        } else {
            0.0
        };
        let pr = if np > 0 { inter as f64 / np as f64 } else { 0.0 };
        let rc = if nt > 0 { inter as f64 / nt as f64 } else { 0.0 };
        let f = if pr + rc > 0.0 {
            2.0 * pr * rc / (pr + rc)
        } else {
            0.0
        };
        acc += a;
        prec += pr;
        rec += rc;
        f1 += f;
    }
    let n = b as f64;
    (acc / n, prec / n, rec / n, f1 / n)
}

/// Full evaluation of probabilities against labels at a decision threshold.
pub fn evaluate(p: &Tensor, y: &Tensor, threshold: f64) -> EvalReport {
    let pred = binarize(p, threshold);
    let (ma, per_attribute) = label_ma(&pred, y);
    let (accu, prec, recall, f1) = instance_metrics(&pred, y);
    EvalReport {
        ma,
        accu,
        prec,
        recall,
        f1,
        per_attribute,
    }
}
