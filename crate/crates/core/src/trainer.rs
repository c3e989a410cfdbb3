//! Training loops for the semantic and localization networks, plus inference.
//!
//! Both networks train separately with momentum SGD on random crops (with
//! optional horizontal flips). Outputs are brought to crop resolution by the
//! network's upsampling layer and the bootstrapped losses are evaluated
//! there, so gradients flow back through the upsampling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcrn::layers::{upsample_backward, upsample_forward};
use crate::fcrn::{save_checkpoint, HeadKind, Network, NetworkConfig};
use crate::losses::{
    bootstrapped_cross_entropy, localization_loss, select_hard_localization, select_hard_semantic,
    BootstrapConfig, LocalizationTarget, PixelSelection,
};
use crate::synth::{load_dataset, Sample};
use crate::tensor::{softmax_channels, LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr * (1 - step / iterations) ^ power`.
    Poly { power: f64 },
    /// `lr * gamma ^ floor(step / step_size)`.
    Step { step_size: usize, gamma: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Poly { power: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, iterations: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Poly { power } => {
                self.lr * (1.0 - step as f64 / iterations.max(1) as f64).max(0.0).powf(power)
            }
            LrSchedule::Step { step_size, gamma } => {
                self.lr * gamma.powi((step / step_size.max(1)) as i32)
            }
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Crops per mini-batch.
    pub batch_size: usize,
    pub crop_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default)]
    pub manifest: PathBuf,
    #[serde(default = "default_true")]
    pub hflip: bool,
}

impl TrainConfig {
    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::parse(path, e))?,
            _ => serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?,
        };
        if cfg.manifest.is_relative() && !cfg.manifest.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.bootstrap.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop_size < self.network.target_output_stride {
            return Err(Error::Config(format!(
                "crop_size {} below output stride {}",
                self.crop_size, self.network.target_output_stride
            )));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if let LrSchedule::Step { step_size: 0, .. } = o.lr_schedule {
            return Err(Error::Config("step schedule needs step_size >= 1".into()));
        }
        Ok(())
    }
}

/// One training step's record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Effective bootstrapping threshold.
    pub t_eff: f64,
    pub kept: usize,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,lr,loss,t_eff,kept\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:.8},{:.6},{}", r.step, r.lr, r.loss, r.t_eff, r.kept);
    }
    s
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub log: Vec<LogRow>,
}

/// Crop window inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl Crop {
    fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let sx = if self.flip { self.width - 1 - x } else { x };
        (self.y0 + y, self.x0 + sx)
    }

    pub fn tensor(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, _, w) = t.chw()?;
        let mut out = Tensor::zeros(&[c, self.height, self.width]);
        let src = t.data();
        let plane_in = t.dims()[1] * w;
        let dst = out.data_mut();
        for ch in 0..c {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (sy, sx) = self.source(y, x);
                    dst[(ch * self.height + y) * self.width + x] = src[ch * plane_in + sy * w + sx];
                }
            }
        }
        Ok(out)
    }

    pub fn labels(&self, l: &LabelMap) -> LabelMap {
        let mut out = LabelMap::filled(self.height, self.width, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = self.source(y, x);
                out.set(y, x, l.get(sy, sx));
            }
        }
        out
    }

    /// Codes are relative to their pixel, so a crop only relocates them; a
    /// flip mirrors the horizontal offset.
    pub fn target(&self, t: &LocalizationTarget) -> Result<LocalizationTarget> {
        let mut codes = self.tensor(&t.codes)?;
        if self.flip {
            for v in codes.channel_mut(1) {
                *v = -*v;
            }
        }
        let w_in = t.category.width;
        let mut weight = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = self.source(y, x);
                weight.push(t.weight[sy * w_in + sx]);
            }
        }
        Ok(LocalizationTarget {
            codes,
            category: self.labels(&t.category),
            weight,
            stride: t.stride,
        })
    }
}

fn random_crop(rng: &mut ChaCha8Rng, h: usize, w: usize, size: usize, hflip: bool) -> Crop {
    let (ch, cw) = (size.min(h), size.min(w));
    Crop {
        y0: rng.random_range(0..=h - ch),
        x0: rng.random_range(0..=w - cw),
        height: ch,
        width: cw,
        flip: hflip && rng.random_bool(0.5),
    }
}

/// Network output brought to `h x w` with the configured upsampling.
fn upsampled_output(net: &Network<f32>, out: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let cfg = net.config();
    upsample_forward(out, h, w, cfg.target_output_stride, cfg.upsample)
}

fn check_head(cfg: &TrainConfig, head: HeadKind) -> Result<()> {
    if cfg.network.head != head {
        return Err(Error::Config(format!(
            "config describes a {:?} network, expected {head:?}",
            cfg.network.head
        )));
    }
    Ok(())
}

fn check_samples(samples: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.image.dims()[0] != cfg.network.in_channels {
            return Err(Error::Shape(format!("sample {i} has {} channels", s.image.dims()[0])));
        }
        if let Some(bad) = s.semantic.data.iter().find(|&&c| c as usize > cfg.network.num_categories && c != crate::tensor::IGNORE_LABEL) {
            return Err(Error::Shape(format!(
                "sample {i} has category {bad} but the network has {}",
                cfg.network.num_categories
            )));
        }
    }
    Ok(())
}

/// Non-finite activations or parameters mid-training are a divergence.
fn diverged(step: usize, loss: f64) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { step, loss },
        other => other,
    }
}

/// Generic loop: `step_fn` runs forward/loss/backward on one mini-batch of
/// crops and returns the loss and selection.
fn train_loop(
    cfg: &TrainConfig,
    samples: &[Sample],
    mut step_fn: impl FnMut(&mut Network<f32>, &[(usize, Crop)]) -> Result<(f64, PixelSelection)>,
) -> Result<TrainOutcome> {
    let mut net = Network::<f32>::new(cfg.network.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_c7a1);
    let mut log = Vec::with_capacity(cfg.iterations);
    // images are visited in seeded per-epoch shuffles
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.iterations {
        let lr = cfg.optimizer.lr_at(step, cfg.iterations);
        let batch: Vec<(usize, Crop)> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                let s = &samples[i];
                (i, random_crop(&mut rng, s.height(), s.width(), cfg.crop_size, cfg.hflip))
            })
            .collect();
        net.params_mut().zero_grad();
        let (loss, sel) = step_fn(&mut net, &batch).map_err(diverged(step, f64::NAN))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        net.params_mut()
            .sgd_step(lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
            .map_err(diverged(step, loss))?;
        log.push(LogRow {
            step,
            lr,
            loss,
            t_eff: sel.threshold,
            kept: sel.kept.len(),
        });
    }
    Ok(TrainOutcome { network: net, log })
}

pub fn train_semantic(cfg: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_head(cfg, HeadKind::Semantic)?;
    check_samples(samples, cfg)?;
    let bootstrap = cfg.bootstrap;
    train_loop(cfg, samples, |net, batch| {
        let mut inputs = Vec::with_capacity(batch.len());
        for &(i, crop) in batch {
            let s = &samples[i];
            let image = crop.tensor(&s.image)?;
            let (out, acts) = net.forward(&image)?;
            let logits = upsampled_output(net, &out, crop.height, crop.width)?;
            let probs = softmax_channels(&logits)?;
            inputs.push((acts, out.dims().to_vec(), probs, crop.labels(&s.semantic)));
        }
        let pairs: Vec<(&Tensor<f32>, &LabelMap)> = inputs.iter().map(|(_, _, p, l)| (p, l)).collect();
        let sel = select_hard_semantic(&pairs, &bootstrap)?;
        let (loss, grads) = bootstrapped_cross_entropy(&pairs, &sel)?;
        let cfg = net.config().clone();
        for ((acts, dims, _, _), g) in inputs.iter().zip(grads) {
            let g = upsample_backward(&g, dims[1], dims[2], cfg.target_output_stride, cfg.upsample)?;
            net.backward(acts, &g)?;
        }
        Ok((loss, sel))
    })
}

pub fn train_localization(cfg: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_head(cfg, HeadKind::Localization)?;
    check_samples(samples, cfg)?;
    let stride = cfg.network.target_output_stride;
    let targets: Vec<LocalizationTarget> = samples
        .iter()
        .map(|s| LocalizationTarget::build(&s.instances, &s.records, stride))
        .collect();
    if !targets.iter().any(LocalizationTarget::has_foreground) {
        return Err(Error::NoForeground);
    }
    let bootstrap = cfg.bootstrap;
    train_loop(cfg, samples, |net, batch| {
        let mut inputs = Vec::with_capacity(batch.len());
        for &(i, crop) in batch {
            let image = crop.tensor(&samples[i].image)?;
            let (out, acts) = net.forward(&image)?;
            let pred = upsampled_output(net, &out, crop.height, crop.width)?;
            inputs.push((acts, out.dims().to_vec(), pred, crop.target(&targets[i])?));
        }
        let pairs: Vec<(&Tensor<f32>, &LocalizationTarget)> = inputs.iter().map(|(_, _, p, t)| (p, t)).collect();
        let sel = select_hard_localization(&pairs, &bootstrap)?;
        let (loss, grads) = localization_loss(&pairs, &sel)?;
        let cfg = net.config().clone();
        for ((acts, dims, _, _), g) in inputs.iter().zip(grads) {
            let g = upsample_backward(&g, dims[1], dims[2], cfg.target_output_stride, cfg.upsample)?;
            net.backward(acts, &g)?;
        }
        Ok((loss, sel))
    })
}

/// Trains the network named by the config's head on its manifest, then
/// writes the checkpoint and `train_log.csv` into `out_dir`.
pub fn train_to_dir(cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (_, samples) = load_dataset(&cfg.manifest)?;
    let outcome = match cfg.network.head {
        HeadKind::Semantic => train_semantic(cfg, &samples)?,
        HeadKind::Localization => train_localization(cfg, &samples)?,
    };
    let out_dir = out_dir.as_ref();
    save_checkpoint(out_dir, &outcome.network)?;
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, log_csv(&outcome.log)).map_err(|e| Error::io(&log_path, e))?;
    Ok(outcome)
}

pub const LOG_FILE: &str = "train_log.csv";

/// Semantic head: softmax probabilities `[K+1,H,W]` at input resolution.
pub fn infer_semantic(net: &Network<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if net.config().head != HeadKind::Semantic {
        return Err(Error::Config("checkpoint is not a semantic network".into()));
    }
    let (_, h, w) = image.chw()?;
    let (out, _) = net.forward(image)?;
    softmax_channels(&upsampled_output(net, &out, h, w)?)
}

/// Localization head: raw transform maps `[4K, ceil(H/s), ceil(W/s)]`.
pub fn infer_localization(net: &Network<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if net.config().head != HeadKind::Localization {
        return Err(Error::Config("checkpoint is not a localization network".into()));
    }
    Ok(net.forward(image)?.0)
}

/// Localization head brought to input resolution by the network's own
/// upsampling, as during training: `[4K,H,W]`.
pub fn localization_maps(net: &Network<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = image.chw()?;
    upsampled_output(net, &infer_localization(net, image)?, h, w)
}

/// Dispatches on the network's head.
pub fn infer(net: &Network<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    match net.config().head {
        HeadKind::Semantic => infer_semantic(net, image),
        HeadKind::Localization => infer_localization(net, image),
    }
}
