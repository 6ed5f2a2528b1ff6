//! Binary classification metrics, ROC curves and AUC.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::softmax::{argmax, ProbVector};

/// Bumped whenever a key in [`MetricsReport`] changes meaning or disappears.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub positive: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(predicted: &[usize], actual: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(shape_err!("{} predictions for {} labels", predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(shape_err!("confusion matrix of zero samples"));
    }
    let mut cm = ConfusionMatrix { tp: 0, tn: 0, fp: 0, fn_: 0, positive };
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p == positive, a == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp + cm.tn, cm.total()).unwrap_or(0.0)
}

/// `None` when nothing was predicted positive.
pub fn precision_checked(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp, cm.tp + cm.fp)
}

/// `None` when there are no positive samples.
pub fn recall_checked(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp, cm.tp + cm.fn_)
}

/// Zero when undefined; see [`precision_checked`].
pub fn precision(cm: &ConfusionMatrix) -> f64 {
    precision_checked(cm).unwrap_or(0.0)
}

/// Zero when undefined; see [`recall_checked`].
pub fn recall(cm: &ConfusionMatrix) -> f64 {
    recall_checked(cm).unwrap_or(0.0)
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1(cm: &ConfusionMatrix) -> f64 {
    let (p, r) = (precision(cm), recall(cm));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

fn class_totals(scores: &[f64], actual: &[usize], positive: usize) -> Result<(usize, usize)> {
    if scores.len() != actual.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), actual.len()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Domain(format!("score {s} outside [0, 1]")));
    }
    let pos = actual.iter().filter(|&&y| y == positive).count();
    let neg = actual.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("ROC/AUC needs at least one positive and one negative sample".into()));
    }
    Ok((pos, neg))
}

/// Points in descending threshold order, starting at `(0, 0)` with threshold
/// `+inf`. Each distinct score contributes one point counting every sample
/// with `score >= threshold` as positive, so tied scores move together and the
/// last point is `(1, 1)`.
pub fn roc_curve(scores: &[f64], actual: &[usize], positive: usize) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_totals(scores, actual, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if actual[order[i]] == positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, tpr: tp as f64 / pos as f64, fpr: fp as f64 / neg as f64 });
    }
    Ok(points)
}

/// Trapezoidal area under an ROC polyline, integrating over `fpr`.
pub fn auc_trapezoid(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
/// Quadratic in the sample count.
pub fn auc_pairwise_oracle(scores: &[f64], actual: &[usize], positive: usize) -> Result<f64> {
    let (pos, neg) = class_totals(scores, actual, positive)?;
    let mut doubled = 0usize;
    for (sp, _) in scores.iter().zip(actual).filter(|(_, &y)| y == positive) {
        for (sn, _) in scores.iter().zip(actual).filter(|(_, &y)| y != positive) {
            doubled += match sp.total_cmp(sn) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

pub fn round_centis(seconds: f64) -> f64 {
    (seconds * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucSummary {
    pub positive_class: String,
    /// `None` when the evaluated split holds a single class.
    pub value: Option<f64>,
    /// AUC with the other class as positive, scored by its own probability.
    /// Equal to `value` for a two-class softmax.
    pub complement: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    pub train_seconds: Option<f64>,
    pub predict_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Keyed by class name.
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub auc: AucSummary,
    pub confusion: ConfusionMatrix,
    /// Degenerate cases that produced sentinel values, e.g. `precision_undefined:benign`.
    pub flags: Vec<String>,
    pub timing: Timing,
}

/// Computes every metric from class probabilities at T = 1. Predictions are
/// row argmaxes (ties to the lower class); `positive` scores the ROC.
pub fn evaluate_probabilities(
    probs: &ProbVector,
    actual: &[usize],
    class_names: &[String],
    positive: usize,
    split: &str,
) -> Result<MetricsReport> {
    if probs.classes() != 2 || class_names.len() != 2 || positive > 1 {
        return Err(Error::Config("metrics are defined for two-class problems".into()));
    }
    if probs.batch() != actual.len() {
        return Err(shape_err!("{} probability rows for {} labels", probs.batch(), actual.len()));
    }
    let predicted: Vec<usize> = (0..probs.batch()).map(|i| argmax(probs.row(i))).collect();
    let mut flags = Vec::new();
    let mut per_class = BTreeMap::new();
    for (class, name) in class_names.iter().enumerate() {
        let cm = confusion(&predicted, actual, class)?;
        if precision_checked(&cm).is_none() {
            flags.push(format!("precision_undefined:{name}"));
        }
        if recall_checked(&cm).is_none() {
            flags.push(format!("recall_undefined:{name}"));
        }
        let support = cm.tp + cm.fn_;
        per_class.insert(
            name.clone(),
            ClassMetrics { precision: precision(&cm), recall: recall(&cm), f1: f1(&cm), support },
        );
    }
    let class_auc = |class: usize| -> Option<f64> {
        let scores: Vec<f64> = (0..probs.batch()).map(|i| probs.row(i)[class]).collect();
        roc_curve(&scores, actual, class).ok().map(|roc| auc_trapezoid(&roc))
    };
    let auc = AucSummary {
        positive_class: class_names[positive].clone(),
        value: class_auc(positive),
        complement: class_auc(1 - positive),
    };
    if auc.value.is_none() {
        flags.push("auc_undefined:single_class".into());
    }
    let cm = confusion(&predicted, actual, positive)?;
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split: split.to_string(),
        samples: actual.len(),
        accuracy: accuracy(&cm),
        per_class,
        auc,
        confusion: cm,
        flags,
        timing: Timing::default(),
    })
}

/// `fpr,tpr,threshold` lines with a header.
pub fn roc_csv(roc: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in roc {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}

/// Standalone SVG line plot of an ROC curve with the chance diagonal.
pub fn roc_svg(roc: &[RocPoint], title: &str) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    let x = |fpr: f64| MARGIN + fpr * SIZE;
    let y = |tpr: f64| MARGIN + (1.0 - tpr) * SIZE;
    let points: Vec<String> = roc.iter().map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr))).collect();
    let mut ticks = String::new();
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        ticks.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{v:.2}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>\n",
            x(v),
            MARGIN + SIZE + 16.0,
            MARGIN - 6.0,
            y(v) + 4.0
        ));
    }
    let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let full = SIZE + 2.0 * MARGIN;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{full}\" height=\"{full}\" viewBox=\"0 0 {full} {full}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{cx}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{escaped}</text>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n\
         {ticks}\
         <text x=\"{cx}\" y=\"{bottom}\" font-size=\"12\" text-anchor=\"middle\">false positive rate</text>\n\
         <text x=\"14\" y=\"{cx}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cx})\">true positive rate</text>\n\
         <polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"{}\"/>\n\
         </svg>\n",
        points.join(" "),
        cx = full / 2.0,
        bottom = full - 10.0,
        x0 = x(0.0),
        y0 = y(0.0),
        x1 = x(1.0),
        y1 = y(1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[1, 1, 1, 0, 0], &[1, 1, 1, 0, 0], 1).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (3, 2, 0, 0));
        let cm = confusion(&[1, 1, 1, 1], &[1, 0, 0, 0], 1).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (1, 0, 3, 0));
        assert!(matches!(confusion(&[], &[], 1), Err(Error::Shape(_))));
        assert!(matches!(confusion(&[1], &[1, 0], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn rate_examples() {
        let cm = ConfusionMatrix { tp: 3, tn: 0, fp: 1, fn_: 0, positive: 1 };
        assert_eq!(precision(&cm), 0.75);
        assert_eq!(recall(&cm), 1.0);
        let even = ConfusionMatrix { tp: 2, tn: 5, fp: 2, fn_: 2, positive: 1 };
        assert_eq!(precision(&even), recall(&even));
        assert_eq!(f1(&even), precision(&even));
        let none = ConfusionMatrix { tp: 0, tn: 4, fp: 0, fn_: 0, positive: 1 };
        assert_eq!((precision_checked(&none), precision(&none), f1(&none)), (None, 0.0, 0.0));
    }

    #[test]
    fn worked_roc_example() {
        let scores = [0.9, 0.4, 0.6, 0.2];
        let actual = [1, 1, 0, 0];
        let roc = roc_curve(&scores, &actual, 1).unwrap();
        let pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auc_trapezoid(&roc), 0.75);
        assert_eq!(auc_pairwise_oracle(&scores, &actual, 1).unwrap(), 0.75);
    }

    #[test]
    fn roc_limits() {
        let perfect = roc_curve(&[0.9, 0.8, 0.1], &[1, 1, 0], 1).unwrap();
        assert!(perfect.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc_trapezoid(&perfect), 1.0);
        let flat = roc_curve(&[0.5; 4], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!(flat.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>(), [(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc_trapezoid(&flat), 0.5);
        assert!(matches!(roc_curve(&[0.3, 0.4], &[1, 1], 1), Err(Error::Domain(_))));
        assert!(matches!(auc_pairwise_oracle(&[0.3, 0.4], &[0, 0], 1), Err(Error::Domain(_))));
    }

    #[test]
    fn report_flags_single_class() {
        let probs =
            ProbVector::new(crate::tensor::Tensor::from_vec(&[2, 2], vec![0.9, 0.1, 0.8, 0.2]).unwrap()).unwrap();
        let names = vec!["benign".to_string(), "malignant".to_string()];
        let r = evaluate_probabilities(&probs, &[0, 0], &names, 1, "test").unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc.value, None);
        assert!(r.flags.contains(&"auc_undefined:single_class".to_string()));
        assert!(r.flags.contains(&"precision_undefined:malignant".to_string()));
    }

    #[test]
    fn csv_and_svg_have_endpoints() {
        let roc = roc_curve(&[0.9, 0.4, 0.6, 0.2], &[1, 1, 0, 0], 1).unwrap();
        let csv = roc_csv(&roc);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines.last().unwrap().starts_with("1,1,"));
        let svg = roc_svg(&roc, "a < b");
        assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.contains("a &lt; b"));
    }
}
