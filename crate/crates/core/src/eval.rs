//! Semantic metrics (pixel accuracy, mean accuracy, mean IoU) and region
//! average precision over mask overlaps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mask_iou, LabelMap, IGNORE_LABEL};

/// `counts[i * n + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Adds one image. Pixels whose ground truth is [`IGNORE_LABEL`] or whose
    /// `ignore` flag is set are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: Option<&[bool]>) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width)
            || ignore.is_some_and(|m| m.len() != gt.len())
        {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.num_classes;
        for (p, (&t, &q)) in gt.data.iter().zip(&pred.data).enumerate() {
            if t == IGNORE_LABEL || ignore.is_some_and(|m| m[p]) {
                continue;
            }
            let (t, q) = (t as usize, q as usize);
            if t >= n || q >= n {
                return Err(Error::Shape(format!("label {} outside {n} classes", t.max(q))));
            }
            self.counts[t * n + q] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> Result<SemanticMetrics> {
        let n = self.num_classes;
        let total = self.total();
        if total == 0 {
            return Err(Error::NoLabeledPixels);
        }
        let row = |i: usize| -> u64 { (0..n).map(|j| self.counts[i * n + j]).sum() };
        let col = |j: usize| -> u64 { (0..n).map(|i| self.counts[i * n + j]).sum() };
        let diag: u64 = (0..n).map(|i| self.counts[i * n + i]).sum();
        let mut acc = Vec::with_capacity(n);
        let mut iou = Vec::with_capacity(n);
        for i in 0..n {
            let r = row(i);
            if r == 0 {
                acc.push(None);
                iou.push(None);
                continue;
            }
            let tp = self.counts[i * n + i] as f64;
            acc.push(Some(tp / r as f64));
            iou.push(Some(tp / ((r + col(i)) as f64 - tp)));
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(SemanticMetrics {
            pixel_acc: diag as f64 / total as f64,
            mean_acc: mean(&acc),
            mean_iou: mean(&iou),
            class_acc: acc,
            class_iou: iou,
        })
    }
}

/// Classes absent from the ground truth are `None` and excluded from means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub class_acc: Vec<Option<f64>>,
    pub class_iou: Vec<Option<f64>>,
}

pub fn semantic_metrics(
    pred: &LabelMap,
    gt: &LabelMap,
    ignore: Option<&[bool]>,
    num_classes: usize,
) -> Result<SemanticMetrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    cm.metrics()
}

/// A predicted instance: 1-based category, confidence, ascending pixel list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub category: u32,
    pub confidence: f64,
    pub pixels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub category: u32,
    pub pixels: Vec<usize>,
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageInstances {
    pub preds: Vec<PredInstance>,
    pub gts: Vec<GtInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedPrediction {
    pub confidence: f64,
    pub image: usize,
    pub pred: usize,
    /// `(image-local gt index, IoU)` when the prediction is a true positive.
    pub matched: Option<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMatches {
    pub category: u32,
    pub num_gt: usize,
    /// Sorted by confidence desc; ties keep (image, prediction) order.
    pub ranked: Vec<RankedPrediction>,
}

/// Greedy matching of every category over a dataset. Each prediction, in
/// descending confidence order, takes the still-unmatched same-category
/// ground truth of its image with the highest mask IoU (lowest index on
/// ties); it is a true positive iff that IoU reaches `iou_threshold`.
pub fn match_instances(images: &[ImageInstances], num_categories: u32, iou_threshold: f64) -> Vec<CategoryMatches> {
    (1..=num_categories)
        .map(|category| {
            let mut ranked: Vec<RankedPrediction> = images
                .iter()
                .enumerate()
                .flat_map(|(image, im)| {
                    im.preds
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.category == category)
                        .map(move |(pred, p)| RankedPrediction {
                            confidence: p.confidence,
                            image,
                            pred,
                            matched: None,
                        })
                })
                .collect();
            ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
            for r in ranked.iter_mut() {
                let im = &images[r.image];
                let pixels = &im.preds[r.pred].pixels;
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in im.gts.iter().enumerate() {
                    if gt.category != category || used[r.image][g] {
                        continue;
                    }
                    let iou = mask_iou(pixels, &gt.pixels);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                if let Some((g, iou)) = best {
                    if iou >= iou_threshold {
                        used[r.image][g] = true;
                        r.matched = Some((g, iou));
                    }
                }
            }
            let num_gt = images
                .iter()
                .map(|im| im.gts.iter().filter(|g| g.category == category).count())
                .sum();
            CategoryMatches {
                category,
                num_gt,
                ranked,
            }
        })
        .collect()
}

/// All-point interpolated AP: the precision envelope integrated over recall.
/// `None` when the category has no ground truth.
pub fn average_precision(m: &CategoryMatches) -> Option<f64> {
    if m.num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(m.ranked.len());
    for (i, r) in m.ranked.iter().enumerate() {
        if r.matched.is_some() {
            tp += 1;
        }
        points.push((tp as f64 / m.num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // envelope: precision at recall r = max precision at any recall >= r
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Mean AP over categories with ground truth.
pub fn map_r(images: &[ImageInstances], num_categories: u32, iou_threshold: f64) -> Result<f64> {
    let aps: Vec<f64> = match_instances(images, num_categories, iou_threshold)
        .iter()
        .filter_map(average_precision)
        .collect();
    if aps.is_empty() {
        return Err(Error::NoForeground);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub const VOL_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Mean of [`map_r`] over overlaps 0.1 to 0.9.
pub fn map_r_vol(images: &[ImageInstances], num_categories: u32) -> Result<f64> {
    let mut sum = 0.0;
    for t in VOL_THRESHOLDS {
        sum += map_r(images, num_categories, t)?;
    }
    Ok(sum / VOL_THRESHOLDS.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub num_images: usize,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
    /// `(threshold, mAP)` at every volume threshold.
    pub map_r_at: Vec<(f64, f64)>,
    pub map_r_05: f64,
    pub map_r_07: f64,
    pub map_r_vol: f64,
    /// AP per category at 0.5; `None` without ground truth.
    pub class_ap_05: Vec<Option<f64>>,
}

pub fn instance_report(images: &[ImageInstances], num_categories: u32) -> Result<InstanceReport> {
    let map_r_at = VOL_THRESHOLDS
        .iter()
        .map(|&t| Ok((t, map_r(images, num_categories, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let vol = map_r_at.iter().map(|p| p.1).sum::<f64>() / map_r_at.len() as f64;
    Ok(InstanceReport {
        num_images: images.len(),
        num_predictions: images.iter().map(|i| i.preds.len()).sum(),
        num_ground_truth: images.iter().map(|i| i.gts.len()).sum(),
        map_r_05: map_r_at[4].1,
        map_r_07: map_r_at[6].1,
        map_r_vol: vol,
        map_r_at,
        class_ap_05: match_instances(images, num_categories, 0.5)
            .iter()
            .map(average_precision)
            .collect(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Two-column aligned table of `(name, value)` rows.
pub fn format_table(rows: &[(String, String)]) -> String {
    let wn = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let wv = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (n, v) in rows {
        let _ = writeln!(s, "{n:<wn$}  {v:>wv$}");
    }
    s
}

impl SemanticMetrics {
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("pixel_acc".to_string(), format!("{:.4}", self.pixel_acc)),
            ("mean_acc".to_string(), format!("{:.4}", self.mean_acc)),
            ("mean_iou".to_string(), format!("{:.4}", self.mean_iou)),
        ];
        for (c, v) in self.class_iou.iter().enumerate() {
            rows.push((format!("iou[{c}]"), fmt_opt(*v)));
        }
        format_table(&rows)
    }
}

impl InstanceReport {
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("images".to_string(), self.num_images.to_string()),
            ("predictions".to_string(), self.num_predictions.to_string()),
            ("ground_truth".to_string(), self.num_ground_truth.to_string()),
        ];
        for (t, v) in &self.map_r_at {
            rows.push((format!("mAP^r@{t:.1}"), format!("{v:.4}")));
        }
        rows.push(("mAP^r_vol".to_string(), format!("{:.4}", self.map_r_vol)));
        for (c, v) in self.class_ap_05.iter().enumerate() {
            rows.push((format!("AP@0.5[{}]", c + 1), fmt_opt(*v)));
        }
        format_table(&rows)
    }
}
