use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetworkConfig;
use super::layers::{
    affine_backward, affine_forward, conv_backward, conv_forward, relu_backward, relu_forward,
    ConvGeom,
};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Conv {
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        input: usize,
    },
    Affine {
        scale: usize,
        bias: usize,
        input: usize,
    },
    Relu {
        input: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    op: Op,
}

/// Every intermediate map of one forward pass. Slot 0 is the input image,
/// slot `i + 1` is the output of node `i`.
#[derive(Debug)]
pub struct Activations<T: Real> {
    slots: Vec<Tensor<T>>,
    patches: Vec<Option<Vec<T>>>,
}

impl<T: Real> Activations<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.slots.last().expect("activations always hold the input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.slots[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// He-normal convolutions, unit affine, zero-scaled residual branches.
    Standard,
    /// Every parameter drawn at random; used for gradient checks.
    Random,
}

/// Fully convolutional residual network: stem, residual stages with
/// hole-algorithm dilations, and a (dilated) convolutional classifier.
#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    config: NetworkConfig,
    params: ParamStore<T>,
    nodes: Vec<Node>,
}

struct Builder<'a, T: Real> {
    params: ParamStore<T>,
    nodes: Vec<Node>,
    rng: &'a mut ChaCha8Rng,
    init: Init,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: String, op: Op) -> usize {
        self.nodes.push(Node { name, op });
        self.nodes.len()
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| T::lit(dist.sample(self.rng))).collect()
    }

    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..n).map(|_| T::lit(self.rng.random_range(lo..hi))).collect()
    }

    fn conv(&mut self, name: &str, input: usize, geom: ConvGeom, bias: bool, std: f64) -> usize {
        let dims = geom.weight_dims();
        let n: usize = dims.iter().product();
        let w = Tensor::new(dims.to_vec(), self.normal(n, std)).expect("weight dims");
        let weight = self.params.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| {
            let values = match self.init {
                Init::Standard => vec![T::zero(); geom.out_channels],
                Init::Random => self.uniform(geom.out_channels, -0.2, 0.2),
            };
            let b = Tensor::new(vec![geom.out_channels], values).expect("bias dims");
            self.params.add(format!("{name}.bias"), b, false)
        });
        self.push(
            name.to_string(),
            Op::Conv {
                weight,
                bias,
                geom,
                input,
            },
        )
    }

    fn affine(&mut self, name: &str, input: usize, channels: usize, scale: f64) -> usize {
        let (s, b) = match self.init {
            Init::Standard => (vec![T::lit(scale); channels], vec![T::zero(); channels]),
            Init::Random => (self.uniform(channels, 0.5, 1.5), self.uniform(channels, -0.2, 0.2)),
        };
        let scale = self.params.add(
            format!("{name}.scale"),
            Tensor::new(vec![channels], s).expect("scale dims"),
            false,
        );
        let bias = self.params.add(
            format!("{name}.bias"),
            Tensor::new(vec![channels], b).expect("bias dims"),
            false,
        );
        self.push(name.to_string(), Op::Affine { scale, bias, input })
    }

    fn relu(&mut self, name: &str, input: usize) -> usize {
        self.push(name.to_string(), Op::Relu { input })
    }

    fn add(&mut self, name: &str, lhs: usize, rhs: usize) -> usize {
        self.push(name.to_string(), Op::Add { lhs, rhs })
    }
}

fn he_std(geom: &ConvGeom) -> f64 {
    (2.0 / geom.patch_len() as f64).sqrt()
}

impl<T: Real> Network<T> {
    /// Standard initialization, seeded.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, Init::Standard)
    }

    /// Every parameter randomized (affine scales and biases included), so no
    /// branch is trivially zero. Meant for gradient and equivalence checks.
    pub fn new_random(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, Init::Random)
    }

    fn build(config: NetworkConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let schedule = config.rebase_strides()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            nodes: Vec::new(),
            rng: &mut rng,
            init,
        };

        let stem = ConvGeom {
            in_channels: config.in_channels,
            out_channels: config.stem.channels,
            kernel: config.stem.kernel,
            stride: schedule[0].stride,
            dilation: schedule[0].entry_dilation,
        };
        let mut x = b.conv("stem.conv", 0, stem, false, he_std(&stem));
        x = b.affine("stem.affine", x, stem.out_channels, 1.0);
        x = b.relu("stem.relu", x);
        let mut channels = stem.out_channels;

        let residual_scale = match init {
            Init::Standard => 0.0,
            Init::Random => 1.0,
        };
        for (si, (stage, sched)) in config.stages.iter().zip(&schedule[1..]).enumerate() {
            for bi in 0..stage.blocks {
                let p = format!("stage{si}.block{bi}");
                let first = bi == 0;
                let conv1 = ConvGeom {
                    in_channels: channels,
                    out_channels: stage.channels,
                    kernel: 3,
                    stride: if first { sched.stride } else { 1 },
                    dilation: if first { sched.entry_dilation } else { sched.dilation },
                };
                let conv2 = ConvGeom {
                    in_channels: stage.channels,
                    out_channels: stage.channels,
                    kernel: 3,
                    stride: 1,
                    dilation: sched.dilation,
                };
                let mut r = b.conv(&format!("{p}.conv1"), x, conv1, false, he_std(&conv1));
                r = b.affine(&format!("{p}.affine1"), r, stage.channels, 1.0);
                r = b.relu(&format!("{p}.relu1"), r);
                r = b.conv(&format!("{p}.conv2"), r, conv2, false, he_std(&conv2));
                r = b.affine(&format!("{p}.affine2"), r, stage.channels, residual_scale);
                // projection exists whenever the nominal block changes shape,
                // so rebased and non-rebased nets share one parameter set
                let shortcut = if first && (stage.stride != 1 || channels != stage.channels) {
                    let proj = ConvGeom {
                        in_channels: channels,
                        out_channels: stage.channels,
                        kernel: 1,
                        stride: sched.stride,
                        dilation: 1,
                    };
                    let s = b.conv(&format!("{p}.shortcut"), x, proj, false, he_std(&proj));
                    b.affine(&format!("{p}.shortcut_affine"), s, stage.channels, 1.0)
                } else {
                    x
                };
                let sum = b.add(&format!("{p}.add"), r, shortcut);
                x = b.relu(&format!("{p}.relu2"), sum);
                channels = stage.channels;
            }
        }

        if config.multilayer_head {
            let hidden = ConvGeom {
                in_channels: channels,
                out_channels: channels,
                kernel: 1,
                stride: 1,
                dilation: 1,
            };
            x = b.conv("head.hidden", x, hidden, true, he_std(&hidden));
            x = b.relu("head.hidden_relu", x);
        }
        let classifier = ConvGeom {
            in_channels: channels,
            out_channels: config.output_channels(),
            kernel: config.classifier_kernel,
            stride: 1,
            dilation: config.classifier_dilation,
        };
        let std = match init {
            Init::Standard => (1.0 / classifier.patch_len() as f64).sqrt(),
            Init::Random => he_std(&classifier),
        };
        b.conv("head.classifier", x, classifier, true, std);

        let Builder { params, nodes, .. } = b;
        Ok(Self {
            config,
            params,
            nodes,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.value.cast(), p.decay);
        }
        Network {
            config: self.config.clone(),
            params,
            nodes: self.nodes.clone(),
        }
    }

    /// Output map `[C, ceil(H/s), ceil(W/s)]` plus the activation cache for [`Network::backward`].
    pub fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Activations<T>)> {
        let (c, h, w) = image.chw()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let min_extent = self.config.fov().div_ceil(4);
        if h < min_extent || w < min_extent {
            return Err(Error::Shape(format!(
                "input {h}x{w} smaller than FoV/4 = {min_extent}"
            )));
        }
        image.ensure_finite("network input")?;
        let mut slots = Vec::with_capacity(self.nodes.len() + 1);
        let mut patches = Vec::with_capacity(self.nodes.len());
        slots.push(image.clone());
        for node in &self.nodes {
            let (out, col) = match &node.op {
                Op::Conv {
                    weight,
                    bias,
                    geom,
                    input,
                } => {
                    let bias = bias.map(|b| self.params.get(b).value.data());
                    conv_forward(&slots[*input], self.params.get(*weight).value.data(), bias, geom)?
                }
                Op::Affine { scale, bias, input } => (
                    affine_forward(
                        &slots[*input],
                        self.params.get(*scale).value.data(),
                        self.params.get(*bias).value.data(),
                    )?,
                    None,
                ),
                Op::Relu { input } => (relu_forward(&slots[*input]), None),
                Op::Add { lhs, rhs } => {
                    let mut out = slots[*lhs].clone();
                    out.add_assign(&slots[*rhs]);
                    (out, None)
                }
            };
            if !out.all_finite() {
                return Err(Error::NonFinite(format!("activation of layer {}", node.name)));
            }
            slots.push(out);
            patches.push(col);
        }
        let output = slots.last().expect("non-empty").clone();
        Ok((output, Activations { slots, patches }))
    }

    /// Accumulates parameter gradients for `upstream = dL/d(output)` and
    /// returns `dL/d(input)`.
    pub fn backward(&mut self, acts: &Activations<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        if acts.slots.len() != self.nodes.len() + 1 {
            return Err(Error::Shape("activation cache from another network".into()));
        }
        if upstream.dims() != acts.output().dims() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.dims(),
                acts.output().dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; acts.slots.len()];
        grads[self.nodes.len()] = Some(upstream.clone());

        fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], slot: usize, g: Tensor<T>) {
            match &mut grads[slot] {
                Some(t) => t.add_assign(&g),
                none => *none = Some(g),
            }
        }

        for (i, node) in self.nodes.iter().enumerate().rev() {
            let Some(dy) = grads[i + 1].take() else {
                continue;
            };
            match &node.op {
                Op::Conv {
                    weight,
                    bias,
                    geom,
                    input,
                } => {
                    if let Some(b) = bias {
                        let n = dy.len() / geom.out_channels;
                        let gb = self.params.get_mut(*b).grad.data_mut();
                        for (o, chunk) in dy.data().chunks_exact(n).enumerate() {
                            let mut s = T::zero();
                            for &v in chunk {
                                s += v;
                            }
                            gb[o] += s;
                        }
                    }
                    let p = self.params.get_mut(*weight);
                    let dx = conv_backward(
                        &acts.slots[*input],
                        acts.patches[i].as_deref(),
                        p.value.data(),
                        geom,
                        &dy,
                        p.grad.data_mut(),
                        None,
                    )?;
                    accumulate(&mut grads, *input, dx);
                }
                Op::Affine { scale, bias, input } => {
                    let mut gb = std::mem::replace(&mut self.params.get_mut(*bias).grad, Tensor::zeros(&[1]));
                    let p = self.params.get_mut(*scale);
                    let dx = affine_backward(
                        &acts.slots[*input],
                        p.value.data(),
                        &dy,
                        p.grad.data_mut(),
                        gb.data_mut(),
                    )?;
                    self.params.get_mut(*bias).grad = gb;
                    accumulate(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let dx = relu_backward(&acts.slots[i + 1], &dy);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut grads, *rhs, dy.clone());
                    accumulate(&mut grads, *lhs, dy);
                }
            }
        }
        Ok(grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros_like(&acts.slots[0])))
    }
}
