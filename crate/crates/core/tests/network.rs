use bootseg::fcrn::layers::{upsample_backward, upsample_forward};
use bootseg::fcrn::*;
use bootseg::losses::*;
use bootseg::synth::InstanceRecord;
use bootseg::tensor::{softmax_channels, BBox, LabelMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stem + two stages, nominal stride 8 rebased to 4: the last stage runs at
/// stride 1 with dilation 2, and the classifier is dilated on top.
fn small(head: HeadKind, multilayer: bool) -> NetworkConfig {
    NetworkConfig {
        in_channels: 3,
        num_categories: 2,
        stem: ConvSpec {
            kernel: 3,
            stride: 2,
            channels: 4,
        },
        stages: vec![
            StageSpec {
                blocks: 1,
                channels: 4,
                stride: 2,
            },
            StageSpec {
                blocks: 2,
                channels: 6,
                stride: 2,
            },
        ],
        target_output_stride: 4,
        classifier_kernel: 3,
        classifier_dilation: 2,
        head,
        multilayer_head: multilayer,
        upsample: Upsample::Bilinear,
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![3, h, w], data).unwrap()
}

/// Semantic training objective at full resolution with a frozen selection.
fn semantic_objective(
    net: &Network<f64>,
    image: &Tensor<f64>,
    labels: &LabelMap,
    sel: Option<&PixelSelection>,
) -> (f64, PixelSelection, Option<Tensor<f64>>) {
    let cfg = net.config();
    let (_, h, w) = image.chw().unwrap();
    let (out, _) = net.forward(image).unwrap();
    let logits = upsample_forward(&out, h, w, cfg.target_output_stride, cfg.upsample).unwrap();
    let probs = softmax_channels(&logits).unwrap();
    let batch = [(&probs, labels)];
    let bootstrap = BootstrapConfig {
        min_kept: 40,
        ..Default::default()
    };
    let sel = sel
        .cloned()
        .unwrap_or_else(|| select_hard_semantic(&batch, &bootstrap).unwrap());
    let (loss, grads) = bootstrapped_cross_entropy(&batch, &sel).unwrap();
    let (_, oh, ow) = out.chw().unwrap();
    let g = upsample_backward(&grads[0], oh, ow, cfg.target_output_stride, cfg.upsample).unwrap();
    (loss, sel, Some(g))
}

fn localization_objective(
    net: &Network<f64>,
    image: &Tensor<f64>,
    target: &LocalizationTarget,
    sel: Option<&PixelSelection>,
) -> (f64, PixelSelection, Option<Tensor<f64>>) {
    let cfg = net.config();
    let (_, h, w) = image.chw().unwrap();
    let (out, _) = net.forward(image).unwrap();
    let pred = upsample_forward(&out, h, w, cfg.target_output_stride, cfg.upsample).unwrap();
    let batch = [(&pred, target)];
    let bootstrap = BootstrapConfig {
        min_kept: 20,
        ..Default::default()
    };
    let sel = sel
        .cloned()
        .unwrap_or_else(|| select_hard_localization(&batch, &bootstrap).unwrap());
    let (loss, grads) = localization_loss(&batch, &sel).unwrap();
    let (_, oh, ow) = out.chw().unwrap();
    let g = upsample_backward(&grads[0], oh, ow, cfg.target_output_stride, cfg.upsample).unwrap();
    (loss, sel, Some(g))
}

/// Central differences on `samples` randomly chosen scalars, compared with the
/// analytic gradient from backward. Returns how many were checked.
fn gradcheck(
    mut net: Network<f64>,
    objective: impl Fn(&Network<f64>, Option<&PixelSelection>) -> (f64, PixelSelection, Option<Tensor<f64>>),
    image: &Tensor<f64>,
    samples: usize,
    seed: u64,
) -> usize {
    let (_, sel, upstream) = objective(&net, None);
    let (_, acts) = net.forward(image).unwrap();
    net.params_mut().zero_grad();
    net.backward(&acts, &upstream.unwrap()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (pi, j) = ids[rng.random_range(0..ids.len())];
        let analytic = net.params().get(pi).grad.data()[j];
        let orig = net.params().get(pi).value.data()[j];
        net.params_mut().get_mut(pi).value.data_mut()[j] = orig + eps;
        let (lp, _, _) = objective(&net, Some(&sel));
        net.params_mut().get_mut(pi).value.data_mut()[j] = orig - eps;
        let (lm, _, _) = objective(&net, Some(&sel));
        net.params_mut().get_mut(pi).value.data_mut()[j] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let diff = (analytic - numeric).abs();
        // relative 1e-3, with an absolute floor for gradients that are zero
        // up to the central-difference rounding error
        let scale = analytic.abs().max(numeric.abs());
        let ok = diff <= 1e-3 * scale || diff <= 1e-8;
        assert!(
            ok,
            "{}[{j}]: analytic {analytic:e} numeric {numeric:e}",
            net.params().get(pi).name
        );
        if scale > 1e-8 {
            worst = worst.max(diff / scale);
        }
    }
    eprintln!("worst relative error {worst:e}");
    samples
}

#[test]
fn gradcheck_semantic_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::<f64>::new_random(small(HeadKind::Semantic, true), 2).unwrap();
    assert!(net.config().rebase_strides().unwrap().iter().any(|s| s.dilation > 1));
    let image = random_image(&mut rng, 16, 20);
    let labels = LabelMap::new(16, 20, (0..320).map(|_| rng.random_range(0..3)).collect()).unwrap();
    let n = gradcheck(
        net,
        |net, sel| semantic_objective(net, &image, &labels, sel),
        &image,
        300,
        3,
    );
    assert_eq!(n, 300);
}

#[test]
fn gradcheck_localization_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::<f64>::new_random(small(HeadKind::Localization, false), 5).unwrap();
    let image = random_image(&mut rng, 16, 16);
    let mut inst = LabelMap::filled(16, 16, 0);
    for y in 2..9 {
        for x in 3..12 {
            inst.set(y, x, 1);
        }
    }
    for y in 10..15 {
        for x in 6..10 {
            inst.set(y, x, 2);
        }
    }
    let records = [
        InstanceRecord {
            id: 1,
            category: 1,
            bbox: BBox::new(2.0, 3.0, 9.0, 12.0).unwrap(),
        },
        InstanceRecord {
            id: 2,
            category: 2,
            bbox: BBox::new(10.0, 6.0, 15.0, 10.0).unwrap(),
        },
    ];
    let target = LocalizationTarget::build(&inst, &records, 4);
    let n = gradcheck(
        net,
        |net, sel| localization_objective(net, &image, &target, sel),
        &image,
        300,
        6,
    );
    assert_eq!(n, 300);
}

fn copy_shared(dst: &mut Network<f32>, src: &Network<f32>) -> usize {
    let mut copied = 0;
    for p in dst.params_mut().iter_mut() {
        if let Some(id) = src.params().find(&p.name) {
            let v = &src.params().get(id).value;
            assert_eq!(v.dims(), p.value.dims(), "{}", p.name);
            p.value = v.clone();
            copied += 1;
        }
    }
    copied
}

fn four_unit(target: usize, dilation: usize) -> NetworkConfig {
    NetworkConfig {
        target_output_stride: target,
        classifier_dilation: dilation,
        ..NetworkConfig::desk(3, HeadKind::Semantic)
    }
}

#[test]
fn hole_algorithm_matches_coarse_grid() {
    // stem + 3 stages nominally reach stride 8; add one more to reach 16
    let mut base = four_unit(16, 1);
    base.stages.push(StageSpec {
        blocks: 1,
        channels: 32,
        stride: 2,
    });
    let coarse = Network::<f32>::new_random(base.clone(), 9).unwrap();
    let mut fine_cfg = base.clone();
    fine_cfg.target_output_stride = 8;
    fine_cfg.classifier_dilation = 2;
    let mut fine = Network::<f32>::new(fine_cfg, 0).unwrap();
    assert_eq!(copy_shared(&mut fine, &coarse), coarse.params().len());
    assert_eq!(fine.params().len(), coarse.params().len());

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let image = Tensor::new(vec![3, 64, 48], (0..3 * 64 * 48).map(|_| rng.random::<f32>()).collect()).unwrap();
    let (a, _) = coarse.forward(&image).unwrap();
    let (b, _) = fine.forward(&image).unwrap();
    let (c, h, w) = a.chw().unwrap();
    assert_eq!(b.dims(), &[c, 2 * h, 2 * w]);
    let mut max_diff = 0.0f64;
    let mut max_abs = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = (a.at3(ch, y, x) - b.at3(ch, 2 * y, 2 * x)).abs() as f64;
                max_diff = max_diff.max(d);
                max_abs = max_abs.max(a.at3(ch, y, x).abs() as f64);
            }
        }
    }
    assert!(max_abs > 1e-2, "outputs must be non-trivial");
    assert!(max_diff <= 1e-5, "max abs diff {max_diff:e}");
}

#[test]
fn zero_initialized_residual_blocks_are_identities() {
    let shallow = Network::<f32>::new(NetworkConfig::desk(2, HeadKind::Semantic), 3).unwrap();
    let mut deep_cfg = NetworkConfig::desk(2, HeadKind::Semantic);
    for s in &mut deep_cfg.stages {
        s.blocks = 4;
    }
    let mut deep = Network::<f32>::new(deep_cfg, 77).unwrap();
    copy_shared(&mut deep, &shallow);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect()).unwrap();
    let (a, _) = shallow.forward(&image).unwrap();
    let (b, _) = deep.forward(&image).unwrap();
    assert_eq!(a, b);
}

#[test]
fn precision_cast_preserves_outputs() {
    let net = Network::<f32>::new_random(small(HeadKind::Semantic, false), 1).unwrap();
    let wide: Network<f64> = net.cast();
    let image = Tensor::<f32>::filled(&[3, 16, 16], 0.25);
    let (a, _) = net.forward(&image).unwrap();
    let (b, _) = wide.forward(&image.cast()).unwrap();
    assert!(a.cast::<f64>().max_abs_diff(&b) < 1e-4);
}
