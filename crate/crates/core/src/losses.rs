//! Online-bootstrapped training losses.
//!
//! Both losses select "hard" pixels per mini-batch and average only over
//! those. Semantic segmentation keeps pixels whose true-class probability is
//! below a threshold, plus the `min_kept` lowest; localization keeps pixels
//! whose decoded box overlaps the ground-truth box with IoU below a
//! threshold, plus the `min_kept` lowest. Selection is treated as constant
//! within a step: no gradient flows through it.
//!
//! Pixels of a mini-batch are indexed globally: crop `b`, pixel `p` has index
//! `sum(len of crops before b) + p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcrn::{decode_box, encode_box};
use crate::synth::InstanceRecord;
use crate::tensor::{box_iou, LabelMap, Real, Tensor, IGNORE_LABEL};

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// When false every labeled (or foreground) pixel is kept.
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Initial probability threshold `t` in `(0, 1]`.
    pub t0: f64,
    /// Lower bound on kept pixels per mini-batch.
    pub min_kept: usize,
    /// IoU below which a localization pixel counts as hard, in `(0, 1)`.
    pub iou_threshold: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            t0: 0.6,
            min_kept: 512,
            iou_threshold: 0.7,
        }
    }
}

impl BootstrapConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::Config(format!("t0 = {} outside (0, 1]", self.t0)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold = {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSelection {
    /// Kept global pixel indices, ascending.
    pub kept: Vec<usize>,
    /// Per-kept-pixel loss weight, parallel to `kept`.
    pub weights: Vec<f64>,
    /// Effective threshold after the min-kept rule.
    pub threshold: f64,
    /// Set when the mini-batch had no eligible pixels at all.
    pub empty: bool,
}

impl PixelSelection {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// `score` is "easiness": lower is harder. Candidates are `(score, index)`.
fn select(mut candidates: Vec<(f64, usize)>, threshold: f64, min_kept: usize) -> (Vec<usize>, f64) {
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let forced = min_kept.min(candidates.len());
    let t_eff = if forced > 0 {
        threshold.max(candidates[forced - 1].0)
    } else {
        threshold
    };
    let mut kept: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|&(rank, &(score, _))| rank < forced || score < threshold)
        .map(|(_, &(_, idx))| idx)
        .collect();
    kept.sort_unstable();
    (kept, t_eff)
}

/// Hard-pixel selection for the semantic loss over a mini-batch of
/// `(probabilities [K',H,W], labels)` pairs.
pub fn select_hard_semantic<T: Real>(
    batch: &[(&Tensor<T>, &LabelMap)],
    cfg: &BootstrapConfig,
) -> Result<PixelSelection> {
    let mut candidates = Vec::new();
    let mut offset = 0;
    for (probs, labels) in batch {
        let (k, h, w) = probs.chw()?;
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::Shape("labels and probabilities differ in size".into()));
        }
        let plane = h * w;
        for (p, &y) in labels.data.iter().enumerate() {
            if y == IGNORE_LABEL {
                continue;
            }
            if y as usize >= k {
                return Err(Error::Shape(format!("label {y} with only {k} channels")));
            }
            candidates.push((probs.data()[y as usize * plane + p].as_f64(), offset + p));
        }
        offset += plane;
    }
    if candidates.is_empty() {
        return Ok(PixelSelection {
            threshold: cfg.t0,
            empty: true,
            ..Default::default()
        });
    }
    let (kept, threshold) = if cfg.enabled {
        select(candidates, cfg.t0, cfg.min_kept)
    } else {
        let mut all: Vec<usize> = candidates.iter().map(|c| c.1).collect();
        all.sort_unstable();
        (all, 1.0)
    };
    let weights = vec![1.0; kept.len()];
    Ok(PixelSelection {
        kept,
        weights,
        threshold,
        empty: false,
    })
}

/// Mean negative log true-class probability over the kept pixels, and its
/// gradient with respect to the logits that produced `probs`:
/// `(p - onehot) / |kept|` at kept pixels, zero elsewhere.
pub fn bootstrapped_cross_entropy<T: Real>(
    batch: &[(&Tensor<T>, &LabelMap)],
    selection: &PixelSelection,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut grads: Vec<Tensor<T>> = batch.iter().map(|(p, _)| Tensor::zeros_like(p)).collect();
    if selection.kept.is_empty() {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / selection.kept.len() as f64;
    let mut loss = 0.0;
    let mut crop = 0;
    let mut offset = 0;
    for &g in &selection.kept {
        while g >= offset + batch[crop].1.len() {
            offset += batch[crop].1.len();
            crop += 1;
        }
        let (probs, labels) = batch[crop];
        let (k, _, _) = probs.chw()?;
        let plane = labels.len();
        let p = g - offset;
        let y = labels.data[p] as usize;
        loss -= probs.data()[y * plane + p].as_f64().max(1e-30).ln();
        let grad = grads[crop].data_mut();
        for c in 0..k {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad[c * plane + p] = T::lit((probs.data()[c * plane + p].as_f64() - onehot) * inv);
        }
    }
    Ok((loss * inv, grads))
}

/// Every pixel of instance `r` gets `1 / (h_r * w_r)` from its box; background gets 0.
pub fn instance_pixel_weights(instances: &LabelMap, records: &[InstanceRecord]) -> Vec<f64> {
    let lookup: std::collections::HashMap<u32, f64> = records
        .iter()
        .map(|r| (r.id, 1.0 / (r.bbox.height() * r.bbox.width())))
        .collect();
    instances
        .data
        .iter()
        .map(|&id| if id == 0 { 0.0 } else { lookup.get(&id).copied().unwrap_or(0.0) })
        .collect()
}

pub fn smoothed_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smoothed_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Regression supervision for one image or crop.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationTarget {
    /// `[4,H,W]` box codes of the instance each pixel belongs to (0 on background).
    pub codes: Tensor<f32>,
    /// 1-based category per pixel, 0 for background (unsupervised).
    pub category: LabelMap,
    /// Size-balancing loss weight per pixel.
    pub weight: Vec<f64>,
    pub stride: usize,
}

impl LocalizationTarget {
    pub fn build(instances: &LabelMap, records: &[InstanceRecord], stride: usize) -> Self {
        let (h, w) = (instances.height, instances.width);
        let mut codes = Tensor::zeros(&[4, h, w]);
        let mut category = LabelMap::filled(h, w, 0);
        let boxes: std::collections::HashMap<u32, &InstanceRecord> =
            records.iter().map(|r| (r.id, r)).collect();
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let id = instances.get(y, x);
                let Some(rec) = boxes.get(&id) else { continue };
                let code = encode_box(y, x, &rec.bbox, stride);
                for (c, v) in code.iter().enumerate() {
                    codes.data_mut()[c * plane + y * w + x] = *v as f32;
                }
                category.set(y, x, rec.category);
            }
        }
        Self {
            codes,
            category,
            weight: instance_pixel_weights(instances, records),
            stride,
        }
    }

    pub fn has_foreground(&self) -> bool {
        self.category.data.iter().any(|&c| c != 0)
    }

    fn code_at(&self, p: usize) -> [f64; 4] {
        let plane = self.category.len();
        std::array::from_fn(|c| self.codes.data()[c * plane + p] as f64)
    }
}

fn predicted_code<T: Real>(pred: &Tensor<T>, category: u32, p: usize) -> [f64; 4] {
    let plane = pred.dims()[1] * pred.dims()[2];
    let base = 4 * (category as usize - 1);
    std::array::from_fn(|c| pred.data()[(base + c) * plane + p].as_f64())
}

fn check_loc_pair<T: Real>(pred: &Tensor<T>, target: &LocalizationTarget) -> Result<()> {
    let (c, h, w) = pred.chw()?;
    if (h, w) != (target.category.height, target.category.width) || c % 4 != 0 {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {}x{}",
            pred.dims(),
            target.category.height,
            target.category.width
        )));
    }
    if let Some(&bad) = target.category.data.iter().find(|&&k| k as usize > c / 4) {
        return Err(Error::Shape(format!("category {bad} with only {} box channels", c)));
    }
    Ok(())
}

/// IoU between the decoded predicted box and the ground-truth box of every
/// foreground pixel.
pub fn pixel_box_ious<T: Real>(pred: &Tensor<T>, target: &LocalizationTarget) -> Result<Vec<(usize, f64)>> {
    check_loc_pair(pred, target)?;
    let w = target.category.width;
    let mut out = Vec::new();
    for (p, &cat) in target.category.data.iter().enumerate() {
        if cat == 0 {
            continue;
        }
        let (y, x) = (p / w, p % w);
        let gt = decode_box(y, x, target.code_at(p), target.stride);
        let pr = decode_box(y, x, predicted_code(pred, cat, p), target.stride);
        let iou = match (gt, pr) {
            (Some(g), Some(q)) => box_iou(&g, &q),
            _ => 0.0,
        };
        out.push((p, iou));
    }
    Ok(out)
}

/// Hard-pixel selection for the localization loss: IoU below the threshold,
/// plus the `min_kept` lowest-IoU pixels; weights are the size-balancing weights.
pub fn select_hard_localization<T: Real>(
    batch: &[(&Tensor<T>, &LocalizationTarget)],
    cfg: &BootstrapConfig,
) -> Result<PixelSelection> {
    let mut candidates = Vec::new();
    let mut offset = 0;
    for (pred, target) in batch {
        for (p, iou) in pixel_box_ious(*pred, target)? {
            candidates.push((iou, offset + p));
        }
        offset += target.category.len();
    }
    if candidates.is_empty() {
        return Ok(PixelSelection {
            threshold: cfg.iou_threshold,
            empty: true,
            ..Default::default()
        });
    }
    let (kept, threshold) = if cfg.enabled {
        select(candidates, cfg.iou_threshold, cfg.min_kept)
    } else {
        let mut all: Vec<usize> = candidates.iter().map(|c| c.1).collect();
        all.sort_unstable();
        (all, 1.0)
    };
    let mut weights = Vec::with_capacity(kept.len());
    let mut crop = 0;
    let mut offset = 0;
    for &g in &kept {
        while g >= offset + batch[crop].1.category.len() {
            offset += batch[crop].1.category.len();
            crop += 1;
        }
        weights.push(batch[crop].1.weight[g - offset]);
    }
    Ok(PixelSelection {
        kept,
        weights,
        threshold,
        empty: false,
    })
}

/// Weighted smoothed-l1 over the ground-truth category's four channels,
/// normalized by the total kept weight, with gradients wrt the predictions.
pub fn localization_loss<T: Real>(
    batch: &[(&Tensor<T>, &LocalizationTarget)],
    selection: &PixelSelection,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut grads: Vec<Tensor<T>> = batch.iter().map(|(p, _)| Tensor::zeros_like(p)).collect();
    let total: f64 = selection.weights.iter().sum();
    if selection.kept.is_empty() || total <= 0.0 {
        return Ok((0.0, grads));
    }
    for (pred, target) in batch {
        check_loc_pair(*pred, target)?;
    }
    let mut loss = 0.0;
    let mut crop = 0;
    let mut offset = 0;
    for (&g, &wgt) in selection.kept.iter().zip(&selection.weights) {
        while g >= offset + batch[crop].1.category.len() {
            offset += batch[crop].1.category.len();
            crop += 1;
        }
        let (pred, target) = batch[crop];
        let p = g - offset;
        let cat = target.category.data[p];
        if cat == 0 {
            continue;
        }
        let plane = target.category.len();
        let pc = predicted_code(pred, cat, p);
        let tc = target.code_at(p);
        let base = 4 * (cat as usize - 1);
        let gr = grads[crop].data_mut();
        for c in 0..4 {
            let r = pc[c] - tc[c];
            loss += wgt * smoothed_l1(r);
            gr[(base + c) * plane + p] = T::lit(wgt * smoothed_l1_grad(r) / total);
        }
    }
    Ok((loss / total, grads))
}
