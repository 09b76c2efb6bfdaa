//! Pixel confusion counts and the derived segmentation scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{self, Sample};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::segformer::SegFormer;
use crate::tensor::{sigmoid, Element};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        let mut cm = Self::new();
        cm.accumulate(pred, gt)?;
        Ok(cm)
    }

    /// Adds one prediction/ground-truth pair. Water is the positive class.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        pred.same_shape(gt)?;
        let mut c = [0u64; 4];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            c[(p << 1 | g) as usize] += 1;
        }
        self.tn += c[0];
        self.fn_ += c[1];
        self.fp += c[2];
        self.tp += c[3];
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// One confusion matrix pooled over every pixel of every image.
    #[default]
    Micro,
    /// Per-image scores averaged over the images where they are defined.
    Macro,
}

/// Scores in `[0, 1]`; `None` where a denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub averaging: Averaging,
    pub images: usize,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("confusion matrix is empty".into()));
    }
    let ConfusionMatrix { tp, fp, fn_, tn } = *cm;
    Ok(MetricsReport {
        oa: ratio(tp + tn, total),
        iou: ratio(tp, tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        confusion: *cm,
        averaging: Averaging::Micro,
        images: 1,
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Summarizes per-image confusion matrices.
pub fn aggregate(per_image: &[ConfusionMatrix], averaging: Averaging) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Validation("no images to evaluate".into()));
    }
    let mut pooled = ConfusionMatrix::new();
    for cm in per_image {
        pooled.merge(cm);
    }
    let mut report = match averaging {
        Averaging::Micro => compute_metrics(&pooled)?,
        Averaging::Macro => {
            let each = per_image.iter().map(compute_metrics).collect::<Result<Vec<_>>>()?;
            MetricsReport {
                oa: mean_defined(each.iter().map(|r| r.oa)),
                iou: mean_defined(each.iter().map(|r| r.iou)),
                precision: mean_defined(each.iter().map(|r| r.precision)),
                recall: mean_defined(each.iter().map(|r| r.recall)),
                f1: mean_defined(each.iter().map(|r| r.f1)),
                confusion: pooled,
                averaging,
                images: 0,
            }
        }
    };
    report.averaging = averaging;
    report.images = per_image.len();
    Ok(report)
}

/// Per-image confusion matrices of `model` on `samples`, thresholding the
/// water probability at `threshold`.
pub fn confusion_per_image<S: Element>(
    model: &SegFormer<S>,
    samples: &[Sample],
    threshold: f64,
) -> Result<Vec<ConfusionMatrix>> {
    samples
        .iter()
        .map(|s| {
            let (image, gt) = datasets::load_pair(s)?;
            let pred = predict_mask(model, &image, threshold)?;
            ConfusionMatrix::from_masks(&pred, &gt)
        })
        .collect()
}

/// Thresholded water mask for one RGB image.
pub fn predict_mask<S: Element>(model: &SegFormer<S>, image: &image::RgbImage, threshold: f64) -> Result<Mask> {
    let x = datasets::image_to_tensor::<S>(image);
    let prob = sigmoid(&model.predict_logits(&x)?);
    let scores: Vec<f64> = prob.data().iter().map(|v| v.as_f64()).collect();
    Mask::from_scores(image.width() as usize, image.height() as usize, &scores, threshold)
}

pub fn evaluate_dataset<S: Element>(
    model: &SegFormer<S>,
    samples: &[Sample],
    threshold: f64,
    averaging: Averaging,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    aggregate(&confusion_per_image(model, samples, threshold)?, averaging)
}

pub fn fmt_fraction(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{v:.decimals$}"),
        None => "undefined".into(),
    }
}

/// Aligned plain-text table with columns Model, OA, IoU, Precision, Recall, F_S.
pub fn render_metrics_table(rows: &[(&str, &MetricsReport)], decimals: usize) -> String {
    let header = ["Model", "OA", "IoU", "Precision", "Recall", "F_S"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.to_string(),
                fmt_fraction(r.oa, decimals),
                fmt_fraction(r.iou, decimals),
                fmt_fraction(r.precision, decimals),
                fmt_fraction(r.recall, decimals),
                fmt_fraction(r.f1, decimals),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", parts.join(" | ").trim_end()).unwrap();
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    writeln!(out, "{}", rule.join("-+-")).unwrap();
    for row in &body {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    #[test]
    fn identical_masks() {
        let gt: Vec<u8> = (0..16).map(|i| u8::from(i < 5)).collect();
        let m = Mask::new(4, 4, gt).unwrap();
        assert_eq!(ConfusionMatrix::from_masks(&m, &m).unwrap(), cm(5, 0, 0, 11));
    }

    #[test]
    fn complementary_masks() {
        let gt = Mask::new(4, 4, (0..16).map(|i| u8::from(i % 3 == 0)).collect()).unwrap();
        let pred = Mask::new(4, 4, gt.data().iter().map(|v| 1 - v).collect()).unwrap();
        let c = ConfusionMatrix::from_masks(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 16);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Mask::new(2, 2, vec![0; 4]).unwrap();
        let b = Mask::new(4, 1, vec![0; 4]).unwrap();
        assert!(ConfusionMatrix::from_masks(&a, &b).is_err());
    }

    #[test]
    fn worked_example() {
        let r = compute_metrics(&cm(3, 1, 1, 11)).unwrap();
        assert_eq!(r.iou, Some(0.6));
        assert_eq!(r.precision, Some(0.75));
        assert_eq!(r.recall, Some(0.75));
        assert_eq!(r.f1, Some(0.75));
        assert_eq!(r.oa, Some(0.875));
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = compute_metrics(&cm(7, 0, 0, 9)).unwrap();
        assert!([r.oa, r.iou, r.precision, r.recall, r.f1].iter().all(|v| *v == Some(1.0)));
        let r = compute_metrics(&cm(0, 0, 4, 12)).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.iou, Some(0.0));
        assert!(compute_metrics(&cm(0, 0, 0, 0)).is_err());
        let r = compute_metrics(&cm(0, 0, 0, 5)).unwrap();
        assert_eq!((r.iou, r.f1, r.oa), (None, None, Some(1.0)));
    }

    #[test]
    fn macro_differs_from_micro() {
        let per = [cm(1, 0, 0, 0), cm(1, 3, 0, 0)];
        let micro = aggregate(&per, Averaging::Micro).unwrap();
        let mac = aggregate(&per, Averaging::Macro).unwrap();
        assert_eq!(micro.iou, Some(2.0 / 5.0));
        assert_eq!(mac.iou, Some((1.0 + 0.25) / 2.0));
        assert_eq!(mac.confusion, micro.confusion);
        assert!(aggregate(&[], Averaging::Micro).is_err());
    }

    #[test]
    fn table_row_four_decimals() {
        let r = MetricsReport {
            oa: Some(0.9754),
            iou: Some(0.9439),
            precision: Some(0.9748),
            recall: Some(0.9671),
            f1: Some(0.9709),
            confusion: ConfusionMatrix::new(),
            averaging: Averaging::Micro,
            images: 1,
        };
        let t = render_metrics_table(&[("Habaek", &r)], 4);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].split(" | ").map(str::trim).collect::<Vec<_>>(), ["Model", "OA", "IoU", "Precision", "Recall", "F_S"]);
        let cells: Vec<&str> = lines[2].split(" | ").map(str::trim).collect();
        assert_eq!(cells, ["Habaek", "0.9754", "0.9439", "0.9748", "0.9671", "0.9709"]);
    }

    #[test]
    fn undefined_is_spelled_out() {
        let r = compute_metrics(&cm(0, 0, 0, 5)).unwrap();
        let t = render_metrics_table(&[("x", &r)], 5);
        assert!(t.contains("undefined"));
        assert!(t.contains("1.00000"));
        let j = serde_json::to_value(r).unwrap();
        assert!(j["iou"].is_null());
        assert_eq!(j["confusion"]["fn"], 0);
    }
}
