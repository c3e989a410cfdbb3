//! Dataset-level composition: inference over a manifest, instance assembly,
//! evaluation, and the on-disk artifacts each stage exchanges.
//!
//! Layout written under an output directory:
//! - `infer.json` + `maps/{i:06}.fcrt` for inference,
//! - `assembly/{i:06}.json` + `assembly/{i:06}_mask{j:03}.fcrt` for assembly,
//! - `report.json` + `report.txt` for evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::{run_instance_pipeline, InstanceHypothesis, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{instance_report, ConfusionMatrix, GtInstance, ImageInstances, InstanceReport, PredInstance, SemanticMetrics};
use crate::fcrn::layers::upsample_forward;
use crate::fcrn::{HeadKind, Network, Upsample};
use crate::synth::Sample;
use crate::tensor::{argmax_channels, read_tensor, write_tensor, BBox, Tensor};
use crate::trainer::{infer_localization, infer_semantic, localization_maps};

/// Score maps derived from the ground truth: each pixel's distribution is
/// the label histogram of its 3x3 neighbourhood (ignored pixels excluded),
/// so interiors are certain and boundaries are not, as in a learned map.
/// A neighbourhood with nothing but ignored pixels is uniform.
pub fn oracle_probs(sample: &Sample, num_categories: usize) -> Tensor<f32> {
    let (h, w) = (sample.height(), sample.width());
    let k1 = num_categories + 1;
    let plane = h * w;
    let mut t = Tensor::zeros(&[k1, h, w]);
    let d = t.data_mut();
    let labels = &sample.semantic;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut counts = vec![0u32; k1];
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let c = labels.get(ny, nx) as usize;
                    if c < k1 {
                        counts[c] += 1;
                    }
                }
            }
            let total: u32 = counts.iter().sum();
            for (c, &n) in counts.iter().enumerate() {
                d[c * plane + p] = if total == 0 {
                    1.0 / k1 as f32
                } else {
                    n as f32 / total as f32
                };
            }
        }
    }
    t
}

pub fn gt_instances(sample: &Sample) -> Vec<GtInstance> {
    sample
        .records
        .iter()
        .map(|r| GtInstance {
            category: r.category,
            pixels: (0..sample.instances.len())
                .filter(|&p| sample.instances.data[p] == r.id)
                .collect(),
        })
        .filter(|g| !g.pixels.is_empty())
        .collect()
}

pub fn predictions(hyps: &[InstanceHypothesis]) -> Vec<PredInstance> {
    hyps.iter()
        .map(|h| PredInstance {
            category: h.category,
            confidence: h.confidence,
            pixels: h.cluster.clone(),
        })
        .collect()
}

/// The network's maps with every semantic mistake corrected: where the
/// network's top category differs from the ground truth the two scores are
/// swapped. Correct pixels keep their scores, so hypotheses are ranked as in
/// the learned run while every pixel gets its true category.
pub fn guided_oracle_probs(sample: &Sample, net_probs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (k1, h, w) = net_probs.chw()?;
    if (h, w) != (sample.height(), sample.width()) {
        return Err(Error::Shape("score maps and labels differ in size".into()));
    }
    let mut t = net_probs.clone();
    let plane = h * w;
    let d = t.data_mut();
    for (p, &g) in sample.semantic.data.iter().enumerate() {
        let g = g as usize;
        if g >= k1 {
            continue;
        }
        let top = (0..k1).fold(0, |a, c| if d[c * plane + p] > d[a * plane + p] { c } else { a });
        d.swap(top * plane + p, g * plane + p);
        // equal scores rank the lower channel first; shave ties below the truth
        let m = d[g * plane + p];
        for c in 0..g {
            if d[c * plane + p] < m {
                continue;
            }
            let v = d[c * plane + p] * (1.0 - f32::EPSILON);
            d[g * plane + p] += d[c * plane + p] - v;
            d[c * plane + p] = v;
        }
    }
    Ok(t)
}

/// Where semantic score maps come from.
#[derive(Clone, Copy)]
pub enum SemanticSource<'a> {
    Network(&'a Network<f32>),
    /// Ground-truth maps. With a network its scores rank the hypotheses
    /// ([`guided_oracle_probs`]); without one the maps are [`oracle_probs`].
    Oracle(Option<&'a Network<f32>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub num_images: usize,
    pub oracle_semantic: bool,
    /// Absent for oracle maps and for empty datasets.
    pub semantic: Option<SemanticMetrics>,
    /// Absent when the dataset holds no ground-truth instance.
    pub instance: Option<InstanceReport>,
}

impl EndToEndReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "images: {}  semantic maps: {}\n",
            self.num_images,
            if self.oracle_semantic { "ground truth" } else { "network" }
        );
        if let Some(m) = &self.semantic {
            s += &m.table();
        }
        if let Some(r) = &self.instance {
            s += &r.table();
        }
        s
    }
}

fn check_pair(sem: Option<&Network<f32>>, loc: &Network<f32>) -> Result<usize> {
    if loc.config().head != HeadKind::Localization {
        return Err(Error::Config("localization checkpoint has a semantic head".into()));
    }
    let k = loc.config().num_categories;
    if let Some(s) = sem {
        if s.config().head != HeadKind::Semantic {
            return Err(Error::Config("semantic checkpoint has a localization head".into()));
        }
        if s.config().num_categories != k {
            return Err(Error::Config(format!(
                "semantic network has {} categories, localization network {k}",
                s.config().num_categories
            )));
        }
    }
    Ok(k)
}

/// Score maps of one sample from the chosen source.
pub fn semantic_maps(source: &SemanticSource, sample: &Sample, num_categories: usize) -> Result<Tensor<f32>> {
    match source {
        SemanticSource::Network(net) => infer_semantic(net, &sample.image),
        SemanticSource::Oracle(Some(net)) => guided_oracle_probs(sample, &infer_semantic(net, &sample.image)?),
        SemanticSource::Oracle(None) => Ok(oracle_probs(sample, num_categories)),
    }
}

/// Inference, assembly and evaluation over `samples`. Per-image assembly
/// artifacts go to `out_dir` when given.
pub fn run_end_to_end(
    source: SemanticSource,
    loc: &Network<f32>,
    samples: &[Sample],
    pipeline: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<EndToEndReport> {
    pipeline.validate()?;
    let (sem_net, oracle) = match source {
        SemanticSource::Network(n) => (Some(n), false),
        SemanticSource::Oracle(n) => (n, true),
    };
    let k = check_pair(sem_net, loc)?;
    let stride = loc.config().target_output_stride;
    let mut cm = ConfusionMatrix::new(k + 1);
    let mut images = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let probs = semantic_maps(&source, s, k)?;
        if !oracle {
            cm.accumulate(&argmax_channels(&probs)?, &s.semantic, None)?;
        }
        let transform = localization_maps(loc, &s.image)?;
        let hyps = run_instance_pipeline(&probs, &transform, stride, pipeline)?;
        if let Some(dir) = out_dir {
            write_assembly(dir, i, &hyps)?;
        }
        images.push(ImageInstances {
            preds: predictions(&hyps),
            gts: gt_instances(s),
        });
    }
    let semantic = if !oracle && cm.total() > 0 {
        Some(cm.metrics()?)
    } else {
        None
    };
    Ok(EndToEndReport {
        num_images: samples.len(),
        oracle_semantic: oracle,
        semantic,
        instance: instance_report_opt(&images, k)?,
    })
}

fn instance_report_opt(images: &[ImageInstances], k: usize) -> Result<Option<InstanceReport>> {
    if images.iter().all(|im| im.gts.is_empty()) {
        return Ok(None);
    }
    instance_report(images, k as u32).map(Some)
}

/// Semantic metrics of a network over a dataset.
pub fn evaluate_semantic(net: &Network<f32>, samples: &[Sample]) -> Result<SemanticMetrics> {
    let mut cm = ConfusionMatrix::new(net.config().num_categories + 1);
    for s in samples {
        cm.accumulate(&argmax_channels(&infer_semantic(net, &s.image)?)?, &s.semantic, None)?;
    }
    cm.metrics()
}

/// Index of an inference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferIndex {
    pub head: HeadKind,
    pub num_categories: usize,
    /// Localization maps are stored at this stride; semantic maps at input
    /// resolution.
    pub output_stride: usize,
    /// How the network brings its output to input resolution.
    #[serde(default)]
    pub upsample: Upsample,
    /// Relative to the index file.
    pub maps: Vec<PathBuf>,
}

pub const INFER_INDEX: &str = "infer.json";

pub fn infer_to_dir(net: &Network<f32>, samples: &[Sample], out_dir: &Path) -> Result<InferIndex> {
    let maps_dir = out_dir.join("maps");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    let mut maps = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from("maps").join(format!("{i:06}.fcrt"));
        let out = match net.config().head {
            HeadKind::Semantic => infer_semantic(net, &s.image)?,
            HeadKind::Localization => infer_localization(net, &s.image)?,
        };
        write_tensor(out_dir.join(&rel), &out)?;
        maps.push(rel);
    }
    let index = InferIndex {
        head: net.config().head,
        num_categories: net.config().num_categories,
        output_stride: net.config().target_output_stride,
        upsample: net.config().upsample,
        maps,
    };
    write_json(&out_dir.join(INFER_INDEX), &index)?;
    Ok(index)
}

pub fn read_infer_index(dir: &Path) -> Result<InferIndex> {
    read_json(&dir.join(INFER_INDEX))
}

/// Assembly from two inference directories (semantic and localization).
pub fn assemble_dirs(probs_dir: &Path, transforms_dir: &Path, cfg: &PipelineConfig, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let p = read_infer_index(probs_dir)?;
    let t = read_infer_index(transforms_dir)?;
    if p.head != HeadKind::Semantic || t.head != HeadKind::Localization {
        return Err(Error::Config("expected semantic maps and localization maps, in that order".into()));
    }
    if p.maps.len() != t.maps.len() || p.num_categories != t.num_categories {
        return Err(Error::Config(format!(
            "inference runs disagree: {} vs {} images, {} vs {} categories",
            p.maps.len(),
            t.maps.len(),
            p.num_categories,
            t.num_categories
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (i, (pm, tm)) in p.maps.iter().zip(&t.maps).enumerate() {
        let probs = read_tensor(probs_dir.join(pm))?;
        let mut transform = read_tensor(transforms_dir.join(tm))?;
        if t.upsample == Upsample::Bilinear {
            let (_, h, w) = probs.chw()?;
            transform = upsample_forward(&transform, h, w, t.output_stride, Upsample::Bilinear)?;
        }
        let hyps = run_instance_pipeline(&probs, &transform, t.output_stride, cfg)?;
        write_assembly(out_dir, i, &hyps)?;
    }
    Ok(p.maps.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub category: u32,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Relative to the assembly directory.
    pub mask_file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyFile {
    pub image: usize,
    pub height: usize,
    pub width: usize,
    pub hypotheses: Vec<HypothesisRecord>,
}

pub fn write_assembly(out_dir: &Path, image: usize, hyps: &[InstanceHypothesis]) -> Result<()> {
    let dir = out_dir.join("assembly");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (height, width) = hyps.first().map_or((0, 0), |h| (h.height, h.width));
    let mut records = Vec::with_capacity(hyps.len());
    for (j, h) in hyps.iter().enumerate() {
        let rel = PathBuf::from(format!("{image:06}_mask{j:03}.fcrt"));
        write_tensor(dir.join(&rel), &h.mask_tensor())?;
        records.push(HypothesisRecord {
            category: h.category,
            confidence: h.confidence,
            bbox: h.bbox,
            mask_file: rel,
        });
    }
    write_json(
        &dir.join(format!("{image:06}.json")),
        &AssemblyFile {
            image,
            height,
            width,
            hypotheses: records,
        },
    )
}

/// Predictions of image `image` from an assembly directory.
pub fn read_assembly(out_dir: &Path, image: usize) -> Result<Vec<PredInstance>> {
    let dir = out_dir.join("assembly");
    let file: AssemblyFile = read_json(&dir.join(format!("{image:06}.json")))?;
    file.hypotheses
        .iter()
        .map(|r| {
            let path = dir.join(&r.mask_file);
            let mask = read_tensor(&path)?;
            Ok(PredInstance {
                category: r.category,
                confidence: r.confidence,
                pixels: mask
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.5)
                    .map(|(p, _)| p)
                    .collect(),
            })
        })
        .collect()
}

/// Instance metrics of an assembly directory against the dataset it came from.
pub fn evaluate_assembly(assembly_dir: &Path, samples: &[Sample], num_categories: usize) -> Result<Option<InstanceReport>> {
    let images = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(ImageInstances {
                preds: read_assembly(assembly_dir, i)?,
                gts: gt_instances(s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    instance_report_opt(&images, num_categories)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Writes `report.json` and `report.txt`.
pub fn write_report<T: Serialize>(out_dir: &Path, report: &T, table: &str) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("report.json"), report)?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, table).map_err(|e| Error::io(&txt, e))
}
