//! Thresholded verdicts, confusion matrices, the metric suite and ROC/AUC.
//!
//! A window is flagged as an attack when its score is `>= threshold`.

use std::io::Write;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::canbus::AttackKind;
use crate::error::{domain, Result};
use crate::features::{InputTensor, LabeledWindow};
use crate::nn::CnnModel;
use crate::quant::{QuantEngine, QuantModel};
use crate::scalar::Real;
use crate::Exact;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        Self { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(domain(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (true, true) => cm.tp += 1,
        }
    }
    Ok(cm)
}

/// Scalar types the metric suite can be evaluated in.
pub trait MetricScalar: Num + Copy {
    fn from_count(c: u64) -> Self;
    fn to_f64(self) -> f64;
}

impl MetricScalar for f64 {
    fn from_count(c: u64) -> Self {
        c as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl MetricScalar for Exact {
    fn from_count(c: u64) -> Self {
        Exact::from_integer(c)
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// The metric suite. A metric whose denominator is zero is reported as 0 and
/// its name listed in `degenerate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics<N> {
    pub precision: N,
    pub recall: N,
    pub f1: N,
    pub fpr: N,
    pub fnr: N,
    pub accuracy: N,
    pub degenerate: Vec<String>,
}

impl<N: MetricScalar> Metrics<N> {
    pub fn to_f64(&self) -> Metrics<f64> {
        Metrics {
            precision: self.precision.to_f64(),
            recall: self.recall.to_f64(),
            f1: self.f1.to_f64(),
            fpr: self.fpr.to_f64(),
            fnr: self.fnr.to_f64(),
            accuracy: self.accuracy.to_f64(),
            degenerate: self.degenerate.clone(),
        }
    }
}

/// `f1` uses `2tp / (2tp + fp + fn)`, the same value as `2pr / (p + r)`
/// without the intermediate products.
pub fn metrics_in<N: MetricScalar>(cm: &ConfusionMatrix) -> Result<Metrics<N>> {
    if cm.total() == 0 {
        return Err(domain("metrics of an empty confusion matrix"));
    }
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            degenerate.push(name.to_string());
            N::zero()
        } else {
            N::from_count(num) / N::from_count(den)
        }
    };
    let precision = ratio("precision", cm.tp, cm.tp + cm.fp);
    let recall = ratio("recall", cm.tp, cm.tp + cm.fn_);
    let fpr = ratio("fpr", cm.fp, cm.fp + cm.tn);
    let fnr = ratio("fnr", cm.fn_, cm.fn_ + cm.tp);
    let accuracy = ratio("accuracy", cm.tp + cm.tn, cm.total());
    let f1 = if cm.tp == 0 {
        degenerate.push("f1".into());
        N::zero()
    } else {
        N::from_count(2 * cm.tp) / N::from_count(2 * cm.tp + cm.fp + cm.fn_)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        fpr,
        fnr,
        accuracy,
        degenerate,
    })
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics<f64>> {
    metrics_in(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are flagged.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Starts at `(0, 0)` with an infinite threshold, then one point per
    /// distinct score in decreasing order, ending at `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(domain(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain("NaN score"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(domain("ROC needs both classes"));
    }
    Ok((pos, neg))
}

/// Threshold sweep over the distinct scores with trapezoidal AUC.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half.
pub fn auc_mann_whitney(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the pair credit, kept integral
    let (mut credit2, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        credit2 += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(credit2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `threshold,fpr,tpr` rows.
pub fn write_roc_csv<W: Write>(curve: &RocCurve, mut out: W) -> std::io::Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    out.flush()
}

/// Anything that scores windows.
pub trait Classifier {
    /// `float` or `quant`.
    fn kind(&self) -> &'static str;
    fn digest(&self) -> String;
    fn scores(&self, inputs: &[InputTensor]) -> Result<Vec<f64>>;
}

impl<T: Real> Classifier for CnnModel<T> {
    fn kind(&self) -> &'static str {
        "float"
    }

    fn digest(&self) -> String {
        CnnModel::digest(self)
    }

    fn scores(&self, inputs: &[InputTensor]) -> Result<Vec<f64>> {
        Ok(self.predict(inputs)?.into_iter().map(|p| p.as_f64()).collect())
    }
}

impl Classifier for QuantModel {
    fn kind(&self) -> &'static str {
        "quant"
    }

    fn digest(&self) -> String {
        QuantModel::digest(self)
    }

    fn scores(&self, inputs: &[InputTensor]) -> Result<Vec<f64>> {
        let mut engine = QuantEngine::new();
        Ok(inputs.iter().map(|x| engine.forward(self, x)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack: AttackKind,
    pub model_kind: String,
    pub model_digest: String,
    pub samples: u64,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics<f64>,
    /// `None` when the windows hold a single class.
    pub auc: Option<f64>,
}

/// Report from precomputed scores.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[u8],
    attack: AttackKind,
    threshold: f64,
    model_kind: &str,
    model_digest: &str,
) -> Result<EvalReport> {
    let confusion = confusion(scores, labels, threshold)?;
    let auc = if confusion.tp + confusion.fn_ == 0 || confusion.tn + confusion.fp == 0 {
        None
    } else {
        Some(roc_auc(scores, labels)?.auc)
    };
    Ok(EvalReport {
        attack,
        model_kind: model_kind.into(),
        model_digest: model_digest.into(),
        samples: scores.len() as u64,
        threshold,
        confusion,
        metrics: metrics(&confusion)?,
        auc,
    })
}

pub fn evaluate_model<C: Classifier + ?Sized>(
    model: &C,
    windows: &[LabeledWindow],
    attack: AttackKind,
    threshold: f64,
) -> Result<EvalReport> {
    let inputs: Vec<InputTensor> = windows.iter().map(|w| w.tensor).collect();
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    let scores = model.scores(&inputs)?;
    evaluate_scores(&scores, &labels, attack, threshold, model.kind(), &model.digest())
}
