//! Pixel-level segmentation metrics and connected-component counting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::elastic::Field2D;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

fn check_binary(name: &str, f: &Field2D) -> Result<()> {
    if !f.is_binary() {
        return Err(Error::Domain(format!("{name} must contain only 0 and 1")));
    }
    Ok(())
}

fn check_fov(fov: Option<&Field2D>, reference: &Field2D) -> Result<()> {
    if let Some(f) = fov {
        reference.expect_dims(f)?;
        check_binary("fov mask", f)?;
    }
    Ok(())
}

fn in_fov(fov: Option<&Field2D>, i: usize) -> bool {
    fov.is_none_or(|f| f.data()[i] == 1.0)
}

pub fn confusion(pred_mask: &Field2D, gt_mask: &Field2D, fov_mask: Option<&Field2D>) -> Result<ConfusionCounts> {
    pred_mask.expect_dims(gt_mask)?;
    check_binary("prediction mask", pred_mask)?;
    check_binary("ground-truth mask", gt_mask)?;
    check_fov(fov_mask, gt_mask)?;
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred_mask.data().iter().zip(gt_mask.data()).enumerate() {
        if !in_fov(fov_mask, i) {
            continue;
        }
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> SegmentationMetrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    SegmentationMetrics {
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall: sensitivity,
        f1,
    }
}

/// Area under the ROC curve by an exact sweep over distinct scores with
/// trapezoidal integration. Ties share one ROC point.
pub fn auc_roc(prob_map: &Field2D, gt_mask: &Field2D, fov_mask: Option<&Field2D>) -> Result<Option<f64>> {
    prob_map.expect_dims(gt_mask)?;
    check_binary("ground-truth mask", gt_mask)?;
    check_fov(fov_mask, gt_mask)?;
    if let Some(v) = prob_map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("score {v} outside [0, 1]")));
    }
    let mut pairs: Vec<(f64, bool)> = prob_map
        .data()
        .iter()
        .zip(gt_mask.data())
        .enumerate()
        .filter(|(i, _)| in_fov(fov_mask, *i))
        .map(|(_, (&s, &g))| (s, g == 1.0))
        .collect();
    Ok(auc_from_scores(&mut pairs))
}

/// AUC over `(score, is_positive)` pairs; `None` when only one class is present.
pub fn auc_from_scores(pairs: &mut [(f64, bool)]) -> Option<f64> {
    let pos = pairs.iter().filter(|p| p.1).count() as f64;
    let neg = pairs.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub count: usize,
    /// 0 for background, 1..=count for foreground components in raster order of first pixel.
    pub labels: Vec<usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components of the pixels equal to 1.
pub fn connected_components(mask: &Field2D) -> Result<Components> {
    check_binary("mask", mask)?;
    let (h, w) = mask.dims();
    let fg = |y: usize, x: usize| mask.get(y, x) == 1.0;
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let here = y * w + x;
            // already-visited neighbours: W, NW, N, NE
            let mut neighbours = Vec::with_capacity(4);
            if x > 0 {
                neighbours.push((y, x - 1));
            }
            if y > 0 {
                if x > 0 {
                    neighbours.push((y - 1, x - 1));
                }
                neighbours.push((y - 1, x));
                if x + 1 < w {
                    neighbours.push((y - 1, x + 1));
                }
            }
            for (ny, nx) in neighbours {
                if fg(ny, nx) {
                    let a = find(&mut parent, here);
                    let b = find(&mut parent, ny * w + nx);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = vec![0usize; h * w];
    let mut root_label = vec![0usize; h * w];
    let mut count = 0;
    for i in 0..h * w {
        if mask.data()[i] != 1.0 {
            continue;
        }
        let r = find(&mut parent, i);
        if root_label[r] == 0 {
            count += 1;
            root_label[r] = count;
        }
        labels[i] = root_label[r];
    }
    Ok(Components { count, labels })
}

/// Per-image evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageReport {
    pub id: String,
    pub confusion: ConfusionCounts,
    pub metrics: SegmentationMetrics,
    pub auc: Option<f64>,
    pub components_pred: usize,
    pub components_gt: usize,
}

impl ImageReport {
    pub fn component_error(&self) -> usize {
        self.components_pred.abs_diff(self.components_gt)
    }
}

/// Evaluates one probability map thresholded at 0.5.
pub fn evaluate_image(
    id: &str,
    prob_map: &Field2D,
    gt_mask: &Field2D,
    fov_mask: Option<&Field2D>,
) -> Result<ImageReport> {
    let pred = prob_map.threshold(0.5);
    let confusion = confusion(&pred, gt_mask, fov_mask)?;
    Ok(ImageReport {
        id: id.to_string(),
        confusion,
        metrics: metrics_from_confusion(&confusion),
        auc: auc_roc(prob_map, gt_mask, fov_mask)?,
        components_pred: connected_components(&pred)?.count,
        components_gt: connected_components(gt_mask)?.count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub images: Vec<ImageReport>,
    /// Unweighted mean over images of each defined per-image metric.
    pub aggregate: SegmentationMetrics,
    /// Summed confusion counts of all images.
    pub pooled_confusion: ConfusionCounts,
    /// Mean of the defined per-image AUCs.
    pub mean_auc: Option<f64>,
    pub mean_component_error: f64,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvaluationReport {
    pub fn from_images(images: Vec<ImageReport>) -> Self {
        let pooled_confusion = images
            .iter()
            .fold(ConfusionCounts::default(), |acc, r| acc.merge(&r.confusion));
        let mean_component_error = if images.is_empty() {
            0.0
        } else {
            images.iter().map(|r| r.component_error() as f64).sum::<f64>() / images.len() as f64
        };
        let mean_of = |f: fn(&SegmentationMetrics) -> Option<f64>| mean_defined(images.iter().map(|r| f(&r.metrics)));
        EvaluationReport {
            aggregate: SegmentationMetrics {
                sensitivity: mean_of(|m| m.sensitivity),
                specificity: mean_of(|m| m.specificity),
                accuracy: mean_of(|m| m.accuracy),
                precision: mean_of(|m| m.precision),
                recall: mean_of(|m| m.recall),
                f1: mean_of(|m| m.f1),
            },
            pooled_confusion,
            mean_auc: mean_defined(images.iter().map(|r| r.auc)),
            mean_component_error,
            images,
        }
    }

    /// One row per image plus an `aggregate` row; undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,tp,fp,fn,tn,se,sp,acc,precision,recall,f1,auc,components_pred,components_gt\n");
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let row = |out: &mut String, id: &str, c: &ConfusionCounts, m: &SegmentationMetrics, auc, cp: String, cg: String| {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{},{},{},{},{},{},{cp},{cg}",
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                cell(m.sensitivity),
                cell(m.specificity),
                cell(m.accuracy),
                cell(m.precision),
                cell(m.recall),
                cell(m.f1),
                cell(auc),
            );
        };
        for r in &self.images {
            row(
                &mut out,
                &r.id,
                &r.confusion,
                &r.metrics,
                r.auc,
                r.components_pred.to_string(),
                r.components_gt.to_string(),
            );
        }
        row(
            &mut out,
            "aggregate",
            &self.pooled_confusion,
            &self.aggregate,
            self.mean_auc,
            "NA".into(),
            "NA".into(),
        );
        out
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("   n/a".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8}\n",
            "image", "SE", "SP", "ACC", "F1", "AUC", "comp±"
        );
        for r in &self.images {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8}",
                r.id,
                cell(r.metrics.sensitivity),
                cell(r.metrics.specificity),
                cell(r.metrics.accuracy),
                cell(r.metrics.f1),
                cell(r.auc),
                r.component_error()
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8.3}",
            "aggregate",
            cell(self.aggregate.sensitivity),
            cell(self.aggregate.specificity),
            cell(self.aggregate.accuracy),
            cell(self.aggregate.f1),
            cell(self.mean_auc),
            self.mean_component_error
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, v: &[f64]) -> Field2D {
        Field2D::from_vec(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_confusion() {
        let pred = field(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let gt = field(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let c = confusion(&pred, &gt, None).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let fov = field(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let masked = confusion(&pred, &gt, Some(&fov)).unwrap();
        assert_eq!(masked, ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 1 });
        assert_eq!(confusion(&gt, &gt, None).unwrap().fp, 0);
    }

    #[test]
    fn sensitivity_arithmetic_and_sentinels() {
        let m = metrics_from_confusion(&ConfusionCounts { tp: 3, fp: 0, fn_: 1, tn: 5 });
        assert_eq!(m.sensitivity, Some(0.75));
        let empty = metrics_from_confusion(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 4 });
        assert_eq!(empty.sensitivity, None);
        assert_eq!(empty.precision, None);
        assert_eq!(empty.f1, None);
        assert_eq!(empty.specificity, Some(1.0));
    }

    #[test]
    fn auc_with_ties() {
        let mut pairs = vec![(0.5, true), (0.5, false)];
        assert_eq!(auc_from_scores(&mut pairs), Some(0.5));
        let mut pairs = vec![(0.9, true), (0.1, false), (0.4, true), (0.6, false)];
        assert_eq!(auc_from_scores(&mut pairs), Some(0.75));
        let mut one_class = vec![(0.2, true)];
        assert_eq!(auc_from_scores(&mut one_class), None);
    }

    #[test]
    fn components_basic() {
        assert_eq!(connected_components(&Field2D::zeros(4, 4)).unwrap().count, 0);
        let diag = field(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(connected_components(&diag).unwrap().count, 1);
        let anti = field(2, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(connected_components(&anti).unwrap().count, 1);
        let apart = field(1, 3, &[1.0, 0.0, 1.0]);
        let c = connected_components(&apart).unwrap();
        assert_eq!(c.count, 2);
        assert_eq!(c.labels, vec![1, 0, 2]);
    }
}
