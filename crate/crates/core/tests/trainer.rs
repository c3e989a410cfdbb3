use std::path::PathBuf;

use bootseg::fcrn::layers::upsample_forward;
use bootseg::fcrn::*;
use bootseg::losses::BootstrapConfig;
use bootseg::synth::{generate_dataset, generate_sample, load_dataset, Sample, SceneConfig};
use bootseg::tensor::{argmax_channels, box_iou};
use bootseg::trainer::*;
use bootseg::workflow::evaluate_semantic;
use bootseg::Error;

fn scene(k: usize, instances: [usize; 2], size: [usize; 2], seed: u64) -> SceneConfig {
    SceneConfig {
        image_height: 32,
        image_width: 32,
        num_categories: k,
        instances_per_image: instances,
        size_range: size,
        class_skew: vec![1.0; k],
        seed,
    }
}

fn net(k: usize, head: HeadKind, upsample: Upsample) -> NetworkConfig {
    NetworkConfig {
        target_output_stride: 4,
        upsample,
        ..NetworkConfig::desk(k, head)
    }
}

fn train_cfg(network: NetworkConfig, iterations: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        network,
        bootstrap: BootstrapConfig::default(),
        optimizer: OptimizerConfig {
            lr,
            ..Default::default()
        },
        batch_size: 2,
        crop_size: 32,
        iterations,
        seed: 5,
        manifest: PathBuf::new(),
        hflip: true,
    }
}

fn samples(cfg: &SceneConfig, n: u64) -> Vec<Sample> {
    (0..n).map(|i| generate_sample(cfg, i).unwrap()).collect()
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let data = samples(&scene(2, [1, 2], [6, 12], 1), 2);
    let cfg = train_cfg(net(2, HeadKind::Semantic, Upsample::Nearest), 1, 0.0);
    let out = train_semantic(&cfg, &data).unwrap();
    let init = Network::<f32>::new(cfg.network.clone(), cfg.seed).unwrap();
    for (a, b) in out.network.params().iter().zip(init.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(out.log.len(), 1);
}

#[test]
fn semantic_overfits_two_images() {
    let data = samples(&scene(1, [1, 3], [8, 16], 2), 2);
    let mut cfg = train_cfg(net(1, HeadKind::Semantic, Upsample::Bilinear), 200, 0.02);
    cfg.bootstrap = BootstrapConfig::disabled();
    // every step sees both whole images: plain full-batch descent
    cfg.hflip = false;
    let out = train_semantic(&cfg, &data).unwrap();
    let m = evaluate_semantic(&out.network, &data).unwrap();
    assert!(m.pixel_acc > 0.95, "pixel accuracy {}", m.pixel_acc);

    // smoothed over 20-step windows the loss does not go up
    let means: Vec<f64> = out
        .log
        .chunks(20)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "window means {means:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&scene(2, [1, 3], [6, 14], 3), 4, dir.path().join("data")).unwrap();
    for head in [HeadKind::Semantic, HeadKind::Localization] {
        let mut cfg = train_cfg(net(2, head, Upsample::Nearest), 6, 0.01);
        cfg.manifest = dir.path().join("data/manifest.json");
        let a = dir.path().join(format!("{head:?}_a"));
        let b = dir.path().join(format!("{head:?}_b"));
        let ra = train_to_dir(&cfg, &a).unwrap();
        let rb = train_to_dir(&cfg, &b).unwrap();
        assert_eq!(ra.log, rb.log);
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                std::fs::read(a.join(&name)).unwrap(),
                std::fs::read(b.join(&name)).unwrap(),
                "{name:?}"
            );
        }
        let log = std::fs::read_to_string(a.join(LOG_FILE)).unwrap();
        assert!(log.starts_with("step,lr,loss,t_eff,kept\n"));
        assert_eq!(log.lines().count(), 7);
    }
}

#[test]
fn localization_without_foreground_aborts() {
    let data = samples(&scene(2, [0, 0], [6, 12], 4), 3);
    let cfg = train_cfg(net(2, HeadKind::Localization, Upsample::Nearest), 10, 0.01);
    let err = train_localization(&cfg, &data).err().expect("training must abort");
    assert!(matches!(err, Error::NoForeground));
    assert_eq!(err.to_string(), "no foreground pixels");
}

#[test]
fn wrong_head_is_rejected() {
    let data = samples(&scene(2, [1, 1], [6, 12], 4), 1);
    let cfg = train_cfg(net(2, HeadKind::Localization, Upsample::Nearest), 1, 0.01);
    assert!(train_semantic(&cfg, &data).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let data = samples(&scene(2, [1, 3], [6, 14], 5), 2);
    let mut cfg = train_cfg(net(2, HeadKind::Localization, Upsample::Nearest), 50, 1e6);
    cfg.optimizer.momentum = 0.0;
    match train_localization(&cfg, &data) {
        Err(Error::Diverged { step, .. }) => assert!(step < 50),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn localization_overfits_single_instance() {
    let data = samples(&scene(1, [1, 1], [14, 20], 6), 1);
    assert_eq!(data[0].records.len(), 1);
    let mut cfg = train_cfg(net(1, HeadKind::Localization, Upsample::Bilinear), 300, 0.01);
    cfg.batch_size = 1;
    cfg.bootstrap = BootstrapConfig::disabled();
    let out = train_localization(&cfg, &data).unwrap();
    let s = &data[0];
    let raw = infer_localization(&out.network, &s.image).unwrap();
    let maps = upsample_forward(&raw, 32, 32, 4, Upsample::Bilinear).unwrap();
    let gt = s.records[0].bbox;
    let mut total = 0.0;
    let mut n = 0;
    for p in (0..32 * 32).filter(|&p| s.instances.data[p] == 1) {
        let code: [f64; 4] = std::array::from_fn(|c| maps.data()[c * 1024 + p] as f64);
        total += decode_box(p / 32, p % 32, code, 4).map_or(0.0, |b| box_iou(&b, &gt));
        n += 1;
    }
    let mean = total / n as f64;
    assert!(mean > 0.8, "mean decoded IoU {mean}");
}

#[test]
fn inference_contracts() {
    let data = samples(&scene(2, [1, 2], [6, 12], 7), 1);
    let sem = Network::<f32>::new_random(net(2, HeadKind::Semantic, Upsample::Nearest), 1).unwrap();
    let probs = infer(&sem, &data[0].image).unwrap();
    assert_eq!(probs.dims(), &[3, 32, 32]);
    for p in 0..1024 {
        let s: f32 = (0..3).map(|c| probs.data()[c * 1024 + p]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    assert_eq!(probs, infer(&sem, &data[0].image).unwrap());

    // nearest upsampling: stride-aligned pixels carry the coarse values
    let (coarse, _) = sem.forward(&data[0].image).unwrap();
    let coarse_probs = bootseg::tensor::softmax_channels(&coarse).unwrap();
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(probs.at3(c, 4 * y, 4 * x), coarse_probs.at3(c, y, x));
            }
        }
    }
    let _ = argmax_channels(&probs).unwrap();

    let loc = Network::<f32>::new(net(2, HeadKind::Localization, Upsample::Nearest), 1).unwrap();
    assert_eq!(infer(&loc, &data[0].image).unwrap().dims(), &[8, 8, 8]);
    assert!(infer_semantic(&loc, &data[0].image).is_err());
}

#[test]
fn manifests_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scene(3, [1, 4], [6, 14], 11);
    let m = generate_dataset(&cfg, 0, dir.path().join("empty")).unwrap();
    assert!(m.samples.is_empty());
    let (_, loaded) = load_dataset(dir.path().join("empty/manifest.json")).unwrap();
    assert!(loaded.is_empty());

    generate_dataset(&cfg, 2, dir.path().join("a")).unwrap();
    generate_dataset(&cfg, 2, dir.path().join("b")).unwrap();
    let (_, loaded) = load_dataset(dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(loaded, samples(&cfg, 2));
    for rel in ["manifest.json", "samples/000001_image.fcrt", "samples/000001_instances.fcrt"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(rel)).unwrap(),
            std::fs::read(dir.path().join("b").join(rel)).unwrap()
        );
    }
}
