//! Instance assembly: turns semantic score maps plus per-pixel box maps into
//! instance masks.
//!
//! Every foreground pixel of category `c` (restricted to the top-n mask)
//! votes with the box it predicts. Greedy box NMS over the votes finds the
//! modes; each suppressed vote is traced back to the keeper that suppressed
//! it, giving one pixel cluster (= mask) per instance. Masks are scored by
//! their mean semantic probability and deduplicated by mask-IoU NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcrn::{decode_box, layers, Upsample};
use crate::tensor::{box_iou, mask_iou, BBox, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub top_n: usize,
    pub box_nms_iou: f64,
    pub region_nms_iou: f64,
    pub min_cluster_pixels: usize,
    pub max_instances_per_category: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_n: 2,
            box_nms_iou: 0.3,
            region_nms_iou: 0.5,
            min_cluster_pixels: 4,
            max_instances_per_category: 100,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        for (name, v) in [("box_nms_iou", self.box_nms_iou), ("region_nms_iou", self.region_nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if self.min_cluster_pixels == 0 {
            return Err(Error::Config("min_cluster_pixels must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceHypothesis {
    /// 1-based category.
    pub category: u32,
    pub bbox: BBox,
    pub confidence: f64,
    /// Ascending flat pixel indices; this is the mask support.
    pub cluster: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl InstanceHypothesis {
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for &p in &self.cluster {
            m[p] = true;
        }
        m
    }

    /// Mask as a `[H,W]` tensor of 0/1 values.
    pub fn mask_tensor(&self) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[self.height, self.width]);
        for &p in &self.cluster {
            t.data_mut()[p] = 1.0;
        }
        t
    }
}

/// Per-category membership masks, indexed by `category - 1`. A pixel belongs
/// to category `c` when `c` ranks among its `n` highest scores over all
/// channels, background included. Equal scores rank the lower channel first.
pub fn top_n_masks<T: Real>(probs: &Tensor<T>, n: usize) -> Result<Vec<Vec<bool>>> {
    let (k1, h, w) = probs.chw()?;
    let n = n.min(k1);
    let plane = h * w;
    let d = probs.data();
    let mut masks = vec![vec![false; plane]; k1 - 1];
    for p in 0..plane {
        for c in 1..k1 {
            let s = d[c * plane + p];
            let rank = (0..k1)
                .filter(|&o| {
                    let t = d[o * plane + p];
                    t > s || (t == s && o < c)
                })
                .count();
            masks[c - 1][p] = rank < n;
        }
    }
    Ok(masks)
}

/// One pixel's vote: the box it predicts and its semantic score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub pixel: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Decodes the boxes of `category` (1-based) at masked pixels, clipped to
/// the image. Returns the votes and the number of pixels skipped because
/// their box was degenerate.
pub fn decode_boxes<T: Real>(
    transform: &Tensor<T>,
    mask: &[bool],
    category: u32,
    stride: usize,
) -> Result<(Vec<(usize, BBox)>, usize)> {
    let (c, h, w) = transform.chw()?;
    if category == 0 || c < 4 * category as usize || mask.len() != h * w {
        return Err(Error::Shape(format!(
            "transform {:?} / mask of {} pixels for category {category}",
            transform.dims(),
            mask.len()
        )));
    }
    let plane = h * w;
    let base = 4 * (category as usize - 1);
    let d = transform.data();
    let mut out = Vec::new();
    let mut skipped = 0;
    for p in (0..plane).filter(|&p| mask[p]) {
        let code = std::array::from_fn(|i| d[(base + i) * plane + p].as_f64());
        match decode_box(p / w, p % w, code, stride).and_then(|b| b.clip(h as f64, w as f64)) {
            Some(b) => out.push((p, b)),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Result of box NMS: keeper candidate indices in greedy order and, for every
/// candidate, the position in `keepers` of the cluster it joined.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Clusters {
    pub keepers: Vec<usize>,
    pub assignment: Vec<usize>,
}

impl Clusters {
    /// Candidate indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.keepers.len()];
        for (i, &k) in self.assignment.iter().enumerate() {
            m[k].push(i);
        }
        m
    }
}

fn greedy_order(candidates: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.score
            .total_cmp(&ca.score)
            .then(ca.pixel.cmp(&cb.pixel))
    });
    order
}

/// Greedy NMS over score desc (pixel index asc on ties); IoU strictly above
/// `iou_thr` suppresses.
pub fn box_nms_cluster(candidates: &[Candidate], iou_thr: f64) -> Clusters {
    let order = greedy_order(candidates);
    let mut assignment = vec![usize::MAX; candidates.len()];
    let mut keepers = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if assignment[i] != usize::MAX {
            continue;
        }
        let cluster = keepers.len();
        keepers.push(i);
        assignment[i] = cluster;
        let kb = candidates[i].bbox;
        for &j in &order[pos + 1..] {
            if assignment[j] == usize::MAX && box_iou(&kb, &candidates[j].bbox) > iou_thr {
                assignment[j] = cluster;
            }
        }
    }
    Clusters { keepers, assignment }
}

/// One hypothesis per cluster of at least `min_cluster_pixels` pixels.
/// `probs` is the category's probability plane.
pub fn recover_instances<T: Real>(
    candidates: &[Candidate],
    clusters: &Clusters,
    category_probs: &[T],
    category: u32,
    height: usize,
    width: usize,
    min_cluster_pixels: usize,
) -> Vec<InstanceHypothesis> {
    clusters
        .members()
        .into_iter()
        .zip(&clusters.keepers)
        .filter(|(m, _)| m.len() >= min_cluster_pixels.max(1))
        .map(|(m, &keeper)| {
            let mut cluster: Vec<usize> = m.iter().map(|&i| candidates[i].pixel).collect();
            cluster.sort_unstable();
            let confidence = cluster
                .iter()
                .map(|&p| category_probs[p].as_f64())
                .sum::<f64>()
                / cluster.len() as f64;
            InstanceHypothesis {
                category,
                bbox: candidates[keeper].bbox,
                confidence,
                cluster,
                height,
                width,
            }
        })
        .collect()
}

/// Mask-IoU NMS within each category, then at most `max_per_category`
/// survivors per category (0 = no cap). Output is grouped by ascending
/// category, each group by descending confidence.
pub fn region_nms(
    hypotheses: Vec<InstanceHypothesis>,
    iou_thr: f64,
    max_per_category: usize,
) -> Vec<InstanceHypothesis> {
    let mut cats: Vec<u32> = hypotheses.iter().map(|h| h.category).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut slots: Vec<Option<InstanceHypothesis>> = hypotheses.into_iter().map(Some).collect();
    let mut out = Vec::new();
    for cat in cats {
        let mut idx: Vec<usize> = (0..slots.len())
            .filter(|&i| slots[i].as_ref().is_some_and(|h| h.category == cat))
            .collect();
        idx.sort_by(|&a, &b| {
            let (ha, hb) = (slots[a].as_ref().unwrap(), slots[b].as_ref().unwrap());
            hb.confidence
                .total_cmp(&ha.confidence)
                .then_with(|| ha.cluster.first().cmp(&hb.cluster.first()))
                .then(a.cmp(&b))
        });
        let mut kept: Vec<InstanceHypothesis> = Vec::new();
        for i in idx {
            let h = slots[i].take().unwrap();
            if kept
                .iter()
                .all(|k| mask_iou(&k.cluster, &h.cluster) <= iou_thr)
            {
                kept.push(h);
            }
        }
        if max_per_category > 0 {
            kept.truncate(max_per_category);
        }
        out.extend(kept);
    }
    out
}

/// Full assembly for one image. `probs` is `[K+1,H,W]`; `transform` is
/// `[4K,h,w]`, either at `H x W` already or at output stride `stride`, in
/// which case it is brought to `H x W` by nearest-neighbour upsampling.
pub fn run_instance_pipeline<T: Real>(
    probs: &Tensor<T>,
    transform: &Tensor<T>,
    stride: usize,
    cfg: &PipelineConfig,
) -> Result<Vec<InstanceHypothesis>> {
    cfg.validate()?;
    let (k1, h, w) = probs.chw()?;
    let (tc, th, tw) = transform.chw()?;
    if k1 < 2 || tc != 4 * (k1 - 1) {
        return Err(Error::Shape(format!(
            "probs {:?} and transform {:?} disagree on the category count",
            probs.dims(),
            transform.dims()
        )));
    }
    let upsampled;
    let transform = if (th, tw) == (h, w) {
        transform
    } else {
        if stride == 0 || th != h.div_ceil(stride) || tw != w.div_ceil(stride) {
            return Err(Error::Shape(format!(
                "transform {th}x{tw} is not image {h}x{w} at stride {stride}"
            )));
        }
        upsampled = layers::upsample_forward(transform, h, w, stride, Upsample::Nearest)?;
        &upsampled
    };
    let masks = top_n_masks(probs, cfg.top_n)?;
    let mut all = Vec::new();
    for (ci, mask) in masks.iter().enumerate() {
        let category = ci as u32 + 1;
        let plane = probs.channel(category as usize);
        let (boxes, _skipped) = decode_boxes(transform, mask, category, stride.max(1))?;
        // zero-probability pixels carry no evidence and would give
        // zero-confidence hypotheses
        let candidates: Vec<Candidate> = boxes
            .into_iter()
            .map(|(pixel, bbox)| Candidate {
                pixel,
                bbox,
                score: plane[pixel].as_f64(),
            })
            .filter(|c| c.score > 0.0)
            .collect();
        let clusters = box_nms_cluster(&candidates, cfg.box_nms_iou);
        all.extend(recover_instances(
            &candidates,
            &clusters,
            plane,
            category,
            h,
            w,
            cfg.min_cluster_pixels,
        ));
    }
    Ok(region_nms(all, cfg.region_nms_iou, cfg.max_instances_per_category))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcrn::encode_box;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs_from(pixels: &[[f64; 3]]) -> Tensor<f64> {
        let n = pixels.len();
        let mut data = vec![0.0; 3 * n];
        for (p, s) in pixels.iter().enumerate() {
            for c in 0..3 {
                data[c * n + p] = s[c];
            }
        }
        Tensor::new(vec![3, 1, n], data).unwrap()
    }

    #[test]
    fn top_n_rank_by_hand() {
        let m = top_n_masks(&probs_from(&[[0.5, 0.3, 0.2]]), 2).unwrap();
        assert_eq!(m, vec![vec![true], vec![false]]);
    }

    #[test]
    fn top_1_is_argmax_and_full_n_covers_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pix: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                let v: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
                let s: f64 = v.iter().sum();
                v.map(|x| x / s)
            })
            .collect();
        let probs = probs_from(&pix);
        let arg = crate::tensor::argmax_channels(&probs).unwrap();
        let m1 = top_n_masks(&probs, 1).unwrap();
        for p in 0..50 {
            for c in 1..3 {
                assert_eq!(m1[c - 1][p], arg.data[p] == c as u32);
            }
        }
        for n in [3, 7] {
            let m = top_n_masks(&probs, n).unwrap();
            assert!(m.iter().all(|mask| mask.iter().all(|&b| b)));
        }
    }

    #[test]
    fn decode_boxes_clips_and_skips() {
        // 1 category, 4x4 image
        let mut t = Tensor::<f64>::zeros(&[4, 4, 4]);
        let plane = 16;
        // pixel 0: box far outside the image -> skipped
        t.data_mut()[0] = -100.0;
        // pixel 5: big box -> clipped
        t.data_mut()[2 * plane + 5] = 10f64.ln();
        t.data_mut()[3 * plane + 5] = 10f64.ln();
        let mut mask = vec![false; 16];
        mask[0] = true;
        mask[5] = true;
        mask[6] = true;
        let (boxes, skipped) = decode_boxes(&t, &mask, 1, 1).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0], (5, BBox::new(0.0, 0.0, 4.0, 4.0).unwrap()));
        assert_eq!(boxes[1], (6, BBox::new(1.0, 2.0, 2.0, 3.0).unwrap()));
        assert!(decode_boxes(&t, &mask, 2, 1).is_err());
    }

    fn cand(pixel: usize, b: [f64; 4], score: f64) -> Candidate {
        Candidate {
            pixel,
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            score,
        }
    }

    #[test]
    fn nms_trivial_cases() {
        assert_eq!(box_nms_cluster(&[], 0.3), Clusters::default());
        let one = box_nms_cluster(&[cand(4, [0., 0., 2., 2.], 0.5)], 0.3);
        assert_eq!(one.keepers, vec![0]);
        assert_eq!(one.assignment, vec![0]);
        let two = box_nms_cluster(
            &[cand(1, [0., 0., 2., 2.], 0.8), cand(2, [0., 0., 2., 2.], 0.9)],
            0.3,
        );
        assert_eq!(two.keepers, vec![1]);
        assert_eq!(two.members(), vec![vec![0, 1]]);
    }

    /// Independent formulation: a candidate is a keeper iff no earlier keeper
    /// in the total order overlaps it; it belongs to the first overlapping
    /// keeper.
    fn brute_nms(c: &[Candidate], thr: f64) -> (Vec<usize>, Vec<usize>) {
        let n = c.len();
        let before = |a: usize, b: usize| {
            c[a].score > c[b].score || (c[a].score == c[b].score && c[a].pixel < c[b].pixel)
        };
        let mut rank: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in 0..n - 1 - i {
                if before(rank[j + 1], rank[j]) {
                    rank.swap(j, j + 1);
                }
            }
        }
        let mut keepers: Vec<usize> = Vec::new();
        let mut owner = vec![0; n];
        for &i in &rank {
            match keepers.iter().position(|&k| box_iou(&c[k].bbox, &c[i].bbox) > thr) {
                Some(k) => owner[i] = k,
                None => {
                    owner[i] = keepers.len();
                    keepers.push(i);
                }
            }
        }
        (keepers, owner)
    }

    fn random_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<Candidate> {
        (0..n)
            .map(|i| {
                let y = rng.random_range(0.0..10.0);
                let x = rng.random_range(0.0..10.0);
                let h = rng.random_range(1.0..6.0);
                let w = rng.random_range(1.0..6.0);
                // coarse scores force ties
                let s = rng.random_range(1..5) as f64 / 5.0;
                cand(i * 3 % 97, [y, x, y + h, x + w], s)
            })
            .collect()
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = 1 + trial % 25;
            let c = random_candidates(&mut rng, n);
            let got = box_nms_cluster(&c, 0.3);
            let (keepers, owner) = brute_nms(&c, 0.3);
            assert_eq!(got.keepers, keepers);
            assert_eq!(got.assignment, owner);
            // partition
            let total: usize = got.members().iter().map(Vec::len).sum();
            assert_eq!(total, n);
        }
    }

    #[test]
    fn nms_independent_of_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = random_candidates(&mut rng, 20);
        let base = box_nms_cluster(&c, 0.3);
        let keep_pixels = |cs: &[Candidate], r: &Clusters| -> Vec<usize> {
            r.keepers.iter().map(|&k| cs[k].pixel).collect()
        };
        let mut rev = c.clone();
        rev.reverse();
        let r = box_nms_cluster(&rev, 0.3);
        assert_eq!(keep_pixels(&c, &base), keep_pixels(&rev, &r));
    }

    #[test]
    fn recover_confidence_and_min_size() {
        let probs = [0.9f64, 0.5, 0.7, 0.1];
        let c = vec![
            cand(0, [0., 0., 2., 2.], 0.9),
            cand(1, [0., 0., 2., 2.], 0.5),
            cand(2, [5., 5., 6., 6.], 0.7),
        ];
        let cl = box_nms_cluster(&c, 0.3);
        let hyps = recover_instances(&c, &cl, &probs, 1, 2, 2, 1);
        assert_eq!(hyps.len(), 2);
        assert!((hyps[0].confidence - 0.7).abs() < 1e-12);
        assert_eq!(hyps[0].cluster, vec![0, 1]);
        assert_eq!(hyps[0].bbox, c[0].bbox);
        assert!((hyps[1].confidence - 0.7).abs() < 1e-12);
        assert_eq!(recover_instances(&c, &cl, &probs, 1, 2, 2, 2).len(), 1);
        assert!(recover_instances(&c, &cl, &probs, 1, 2, 2, 5).is_empty());
    }

    fn hyp(category: u32, confidence: f64, cluster: Vec<usize>) -> InstanceHypothesis {
        InstanceHypothesis {
            category,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            confidence,
            cluster,
            height: 8,
            width: 8,
        }
    }

    #[test]
    fn region_nms_trivial_cases() {
        let kept = region_nms(vec![hyp(1, 0.5, vec![1, 2]), hyp(1, 0.6, vec![3, 4])], 0.5, 0);
        assert_eq!(kept.len(), 2);
        let kept = region_nms(vec![hyp(1, 0.6, vec![1, 2]), hyp(1, 0.8, vec![1, 2])], 0.5, 0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.8);
        // other category never suppresses
        let kept = region_nms(vec![hyp(1, 0.6, vec![1, 2]), hyp(2, 0.8, vec![1, 2])], 0.5, 0);
        assert_eq!(kept.len(), 2);
        let many: Vec<_> = (0..5).map(|i| hyp(1, i as f64 / 10.0, vec![i])).collect();
        let kept = region_nms(many, 0.5, 3);
        let conf: Vec<f64> = kept.iter().map(|h| h.confidence).collect();
        assert_eq!(conf, vec![0.4, 0.3, 0.2]);
    }

    #[test]
    fn region_nms_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let hyps: Vec<InstanceHypothesis> = (0..10)
                .map(|_| {
                    let mut px: Vec<usize> = (0..12).filter(|_| rng.random_bool(0.4)).collect();
                    if px.is_empty() {
                        px.push(0);
                    }
                    hyp(rng.random_range(1..3), rng.random::<f64>(), px)
                })
                .collect();
            // oracle: a hypothesis survives iff no surviving same-category
            // hypothesis of higher confidence overlaps it by more than thr
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&a, &b| hyps[b].confidence.total_cmp(&hyps[a].confidence));
            let mut alive: Vec<usize> = Vec::new();
            for &i in &order {
                let dominated = alive.iter().any(|&k| {
                    hyps[k].category == hyps[i].category
                        && mask_iou(&hyps[k].cluster, &hyps[i].cluster) > 0.5
                });
                if !dominated {
                    alive.push(i);
                }
            }
            let mut want: Vec<(u32, u64)> = alive
                .iter()
                .map(|&i| (hyps[i].category, hyps[i].confidence.to_bits()))
                .collect();
            want.sort();
            let mut got: Vec<(u32, u64)> = region_nms(hyps, 0.5, 0)
                .iter()
                .map(|h| (h.category, h.confidence.to_bits()))
                .collect();
            got.sort();
            assert_eq!(got, want);
        }
    }

    /// Perfect maps for a set of axis-aligned rectangular instances.
    fn perfect_maps(
        h: usize,
        w: usize,
        k: usize,
        rects: &[(u32, [usize; 4])],
        stride: usize,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let plane = h * w;
        let mut probs = Tensor::<f64>::zeros(&[k + 1, h, w]);
        let mut tr = Tensor::<f64>::zeros(&[4 * k, h, w]);
        for p in 0..plane {
            probs.data_mut()[p] = 1.0;
        }
        for &(cat, [y0, x0, y1, x1]) in rects {
            let b = BBox::new(y0 as f64, x0 as f64, y1 as f64, x1 as f64).unwrap();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    probs.data_mut()[p] = 0.0;
                    probs.data_mut()[cat as usize * plane + p] = 1.0;
                    let code = encode_box(y, x, &b, stride);
                    for i in 0..4 {
                        tr.data_mut()[(4 * (cat as usize - 1) + i) * plane + p] = code[i];
                    }
                }
            }
        }
        (probs, tr)
    }

    fn rect_pixels(w: usize, [y0, x0, y1, x1]: [usize; 4]) -> Vec<usize> {
        (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * w + x)).collect()
    }

    #[test]
    fn all_background_gives_nothing() {
        let (probs, tr) = perfect_maps(8, 8, 2, &[], 1);
        let out = run_instance_pipeline(&probs, &tr, 1, &PipelineConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_square_recovered_exactly() {
        let sq = [3, 4, 9, 10];
        let (probs, tr) = perfect_maps(16, 16, 2, &[(2, sq)], 1);
        let out = run_instance_pipeline(&probs, &tr, 1, &PipelineConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].category, 2);
        assert_eq!(out[0].cluster, rect_pixels(16, sq));
        assert!((out[0].confidence - 1.0).abs() < 1e-12);
    }

    #[test]
    fn touching_same_category_squares_split() {
        let a = [2, 2, 8, 8];
        let b = [2, 8, 8, 14];
        let (probs, tr) = perfect_maps(16, 16, 1, &[(1, a), (1, b)], 1);
        // argmax alone sees one connected blob
        let out = run_instance_pipeline(&probs, &tr, 1, &PipelineConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        let mut got: Vec<Vec<usize>> = out.into_iter().map(|h| h.cluster).collect();
        got.sort();
        assert_eq!(got, vec![rect_pixels(16, a), rect_pixels(16, b)]);
    }

    #[test]
    fn strided_transform_is_upsampled() {
        // transform given at stride 2; coarse cell i covers pixels 2i-1 and
        // 2i, so the square is aligned to those cells
        let sq = [3, 3, 11, 11];
        let (probs, full) = perfect_maps(16, 16, 1, &[(1, sq)], 2);
        // code of pixel 2i; pixel 2i-1 then decodes a box shifted by one
        let mut coarse = Tensor::<f64>::zeros(&[4, 8, 8]);
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    coarse.data_mut()[(c * 8 + y) * 8 + x] = full.at3(c, 2 * y, 2 * x);
                }
            }
        }
        let out = run_instance_pipeline(&probs, &coarse, 2, &PipelineConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cluster, rect_pixels(16, sq));
        let bad = Tensor::<f64>::zeros(&[4, 5, 5]);
        assert!(run_instance_pipeline(&probs, &bad, 2, &PipelineConfig::default()).is_err());
    }
}
