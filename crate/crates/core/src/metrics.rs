//! Classification metrics with malicious as the positive class, per-class
//! reports and ROC/AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts with the roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total()).0
    }
}

pub fn confusion(preds: &[Label], labels: &[Label]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("confusion counts over zero samples".into()));
    }
    let mut c = ConfusionCounts::default();
    for (p, y) in preds.iter().zip(labels) {
        match (p, y) {
            (Label::Malicious, Label::Malicious) => c.tp += 1,
            (Label::Benign, Label::Benign) => c.tn += 1,
            (Label::Malicious, Label::Benign) => c.fp += 1,
            (Label::Benign, Label::Malicious) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `num / den`, or `(0, true)` for an empty denominator.
fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any of the three hit a zero denominator and was reported as 0.
    pub undefined: bool,
}

/// Precision, recall and F1 for `positive`.
pub fn prf1(counts: &ConfusionCounts, positive: Label) -> ClassMetrics {
    let c = match positive {
        Label::Malicious => *counts,
        Label::Benign => counts.swapped(),
    };
    let (precision, u1) = ratio(c.tp, c.tp + c.fp);
    let (recall, u2) = ratio(c.tp, c.tp + c.fn_);
    let (f1, u3) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        undefined: u1 || u2 || u3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over descending unique thresholds (with ±∞ sentinels) and its
/// trapezoidal area. Tied scores cross the threshold together.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ROC scores".into()));
    }
    let pos = labels.iter().filter(|l| **l == Label::Malicious).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "ROC needs both classes among the labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == Label::Malicious {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((auc, points))
}

/// Test-set report of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub counts: ConfusionCounts,
    pub benign: ClassMetrics,
    pub malicious: ClassMetrics,
    pub accuracy: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    pub fn has_warnings(&self) -> bool {
        self.benign.undefined || self.malicious.undefined
    }
}

/// `malicious_probs` drive the ROC curve; `preds` are the hard decisions.
pub fn evaluate(
    model: &str,
    preds: &[Label],
    malicious_probs: &[f64],
    labels: &[Label],
) -> Result<EvalReport> {
    let counts = confusion(preds, labels)?;
    let (auc, roc) = roc_auc(malicious_probs, labels)?;
    Ok(EvalReport {
        model: model.to_string(),
        counts,
        benign: prf1(&counts, Label::Benign),
        malicious: prf1(&counts, Label::Malicious),
        accuracy: counts.accuracy(),
        auc,
        roc,
    })
}

pub const METRICS_CSV_HEADER: &str =
    "model,benign_precision,benign_recall,benign_f1,malicious_precision,\
malicious_recall,malicious_f1,accuracy,auc,n,tp,tn,fp,fn,undefined_metric,config_hash";

/// One row per model: both class sections, accuracy and AUC.
pub fn metrics_csv(reports: &[EvalReport], config_hash: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_CSV_HEADER}").expect("writing to a String");
    for r in reports {
        let c = &r.counts;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{}",
            r.model,
            r.benign.precision,
            r.benign.recall,
            r.benign.f1,
            r.malicious.precision,
            r.malicious.recall,
            r.malicious.f1,
            r.accuracy,
            r.auc,
            c.total(),
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            r.has_warnings(),
            config_hash
        )
        .expect("writing to a String");
    }
    out
}

pub const ROC_CSV_HEADER: &str = "model,threshold,fpr,tpr,config_hash";

pub fn roc_csv(reports: &[EvalReport], config_hash: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{ROC_CSV_HEADER}").expect("writing to a String");
    for r in reports {
        for p in &r.roc {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{config_hash}",
                r.model, p.threshold, p.fpr, p.tpr
            )
            .expect("writing to a String");
        }
    }
    out
}
