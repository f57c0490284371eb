use super::*;
use crate::testing::{central_difference, max_relative_error};

fn micro(res: usize) -> GanConfig {
    GanConfig {
        latent_dim: 8,
        mapping_layers: 2,
        resolution: res,
        channel_base: 64,
        channel_max: 4,
        batch_size: 4,
        ..GanConfig::desk()
    }
}

#[test]
fn style_count_matches_constructed_network() {
    for res in [8, 16, 32, 128] {
        let s = Synthesis::new(&mut seeding::rng(1), &micro(res));
        // Oracle: distinct style indices read by the built layers.
        let read = s.style_indices();
        assert_eq!(read.len(), style_count(res), "res {res}");
        assert_eq!(*read.iter().max().unwrap() + 1, read.len());
        assert_eq!(s.num_ws(), 2 * (res.ilog2() as usize - 1));
    }
    assert_eq!(style_count(128), 12);
    assert_eq!(style_count(8), 4);
}

#[test]
fn mapping_shapes_identity_and_determinism() {
    let m = MappingNetwork::new(&mut seeding::rng(2), 512, 8, 0.01);
    let z = sample_latents(3, 512, &mut seeding::rng(3));
    let w = map_latent(&m, &z).unwrap();
    assert_eq!(w.shape(), vec![3, 512]);
    assert_eq!(w.to_vec(), map_latent(&m, &z).unwrap().to_vec());
    assert!(map_latent(&m, &sample_latents(3, 511, &mut seeding::rng(3))).is_err());

    let id = MappingNetwork::identity(6);
    let z = sample_latents(4, 6, &mut seeding::rng(4));
    assert_eq!(id.forward(&z).to_vec(), z.to_vec());
}

#[test]
fn broadcast_repeats_rows() {
    let w = sample_latents(2, 5, &mut seeding::rng(5));
    let wp = broadcast_latent(&w, 6).to_array();
    assert_eq!(wp.shape(), &[2, 6, 5]);
    let wv = w.to_array();
    for n in 0..2 {
        for l in 0..6 {
            for d in 0..5 {
                assert_eq!(wp[[n, l, d]], wv[[n, d]]);
            }
        }
    }
}

#[test]
fn synthesis_contract() {
    let cfg = micro(32);
    let g = Generator::new(&cfg, &mut seeding::rng(6));
    let w = g.map(&sample_latents(2, 8, &mut seeding::rng(7))).unwrap();
    let wp = broadcast_latent(&w, g.num_ws());
    let a = g.synthesize(&wp, Noise::Const).unwrap();
    assert_eq!(a.shape(), vec![2, 32, 32, 3]);
    assert!(a.all_finite());
    let b = g.synthesize(&wp, Noise::Const).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());

    let mut bumped = wp.to_array();
    for d in 0..8 {
        bumped[[0, 3, d]] += 0.5;
    }
    let c = g.synthesize(&Tensor::constant(bumped), Noise::Const).unwrap();
    let diff: f64 = a.to_vec().iter().zip(c.to_vec()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 0.0);

    assert!(g.synthesize(&wp.narrow(1, 0, 5), Noise::Const).is_err());
}

#[test]
fn r1_examples() {
    let x = Tensor::leaf(randn(&mut seeding::rng(8), &[3, 4, 4, 3], 1.0));
    let constant = r1_penalty(&|x: &Tensor| Tensor::zeros(&[x.shape()[0]]), &x);
    assert_eq!(constant.item(), 0.0);
    // D(x) = sum of pixels has an all-ones input gradient.
    let sum = r1_penalty(&|x: &Tensor| x.sum_axes(&[1, 2, 3], false), &x);
    assert!((sum.item() - 48.0).abs() < 1e-12);
}

#[test]
fn r1_gradient_matches_finite_differences() {
    let cfg = micro(8);
    let d = Discriminator::new(&cfg, &mut seeding::rng(9));
    let real = randn(&mut seeding::rng(10), &[2, 8, 8, 3], 1.0);
    let (name, w) = d.parameters().into_iter().find(|(n, _)| n.contains("b8.conv1.weight")).unwrap();
    let w0 = w.to_array();
    let loss = |d: &Discriminator| r1_penalty(&|x| d.forward(x), &Tensor::leaf(real.clone()));
    let analytic = grad(&loss(&d), &[&w], false).remove(0).to_array();
    let numeric = central_difference(
        &mut |v| {
            w.set_value(v.clone());
            loss(&d).item()
        },
        &w0,
        1e-5,
    );
    w.set_value(w0);
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "{name}: relative error {err}");
}

#[test]
fn path_length_examples() {
    let mut rng = seeding::rng(11);
    let wp = Tensor::leaf(randn(&mut rng, &[3, 2, 4], 1.0));
    let mut state = PlpState { mean: 0.7, decay: 0.01 };
    let out = path_length_penalty(&|w: &Tensor| Tensor::zeros(&[w.shape()[0], 2, 2, 3]), &wp, &mut state, &mut rng);
    assert!(out.lengths.iter().all(|&l| l == 0.0));
    assert!((out.penalty.item() - state.mean * state.mean).abs() < 1e-15);

    // g(w) = c * w on a one-pixel, one-channel, one-style, one-dim code.
    let c = -2.5;
    let w1 = Tensor::leaf(randn(&mut rng, &[5, 1, 1], 1.0));
    let mut st = PlpState::new(0.01);
    let out = path_length_penalty(&|w: &Tensor| w.mul_scalar(c).reshape(&[5, 1, 1, 1]), &w1, &mut st, &mut rng);
    for (len, y) in out.lengths.iter().zip(out.noise.iter()) {
        assert!((len - c.abs() * y.abs()).abs() < 1e-12);
    }
    assert!(out.penalty.item() >= 0.0);
}

#[test]
fn path_length_gradient_matches_finite_differences() {
    let cfg = micro(8);
    let g = Generator::new(&cfg, &mut seeding::rng(12));
    let ws = randn(&mut seeding::rng(13), &[2, g.num_ws(), 8], 1.0);
    let (_, w) = g.parameters().into_iter().find(|(n, _)| n.contains("b8.conv1.conv.weight")).unwrap();
    let w0 = w.to_array();
    let f = |g: &Generator| {
        let mut st = PlpState { mean: 0.3, decay: 0.0 };
        path_length_penalty(&|x| g.synthesis.forward(x, Noise::Const), &Tensor::leaf(ws.clone()), &mut st, &mut seeding::rng(14)).penalty
    };
    let analytic = grad(&f(&g), &[&w], false).remove(0).to_array();
    let numeric = central_difference(
        &mut |v| {
            w.set_value(v.clone());
            f(&g).item()
        },
        &w0,
        1e-5,
    );
    w.set_value(w0);
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn ada_control_law() {
    let cfg = GanConfig::default();
    let up = ada_update(AdaState { p: 0.2, overfit_estimate: 1.0 }, &[0.3, 2.0, 1.0], &cfg);
    assert!((up.p - 0.205).abs() < 1e-15);
    let still = ada_update(AdaState { p: 0.2, overfit_estimate: 0.6 }, &[1.0, 1.0, 1.0, 1.0, -1.0], &cfg);
    assert_eq!(still.p, 0.2);
    let top = ada_update(AdaState { p: 1.0, overfit_estimate: 1.0 }, &[1.0], &cfg);
    assert_eq!(top.p, 1.0);
    let bottom = ada_update(AdaState { p: 0.0, overfit_estimate: -1.0 }, &[-1.0], &cfg);
    assert_eq!(bottom.p, 0.0);
}

#[test]
fn augmentation_contract() {
    let x = Tensor::constant(randn(&mut seeding::rng(15), &[4, 8, 8, 3], 1.0));
    let same = apply_augmentation(&x, 0.0, &AugmentPipeline::default(), &mut seeding::rng(16));
    assert!(same.to_vec().iter().zip(x.to_vec()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let flipped = apply_augmentation(&x, 1.0, &AugmentPipeline::flip_only(), &mut seeding::rng(17)).to_array();
    let xa = x.to_array();
    for n in 0..4 {
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(flipped[[n, i, j, 1]], xa[[n, i, 7 - j, 1]]);
            }
        }
    }

    let plans = plan_augmentation(10_000, 8, 0.5, &AugmentPipeline::flip_only(), &mut seeding::rng(18));
    let freq = plans.iter().filter(|p| p.flip).count() as f64 / 1e4;
    assert!((freq - 0.5).abs() <= 0.02, "flip frequency {freq}");
}

#[test]
fn sampling_contract() {
    let g = Generator::new(&micro(32), &mut seeding::rng(19));
    assert_eq!(sample_faces(&g, 0, &mut seeding::rng(1)).shape(), &[0, 32, 32, 3]);
    let a = sample_faces(&g, 100, &mut seeding::rng(1));
    assert_eq!(a.shape(), &[100, 32, 32, 3]);
    assert_eq!(a, sample_faces(&g, 100, &mut seeding::rng(1)));
}

#[test]
fn training_edge_cases_and_defaults() {
    let paper = GanConfig::paper();
    assert_eq!((paper.latent_dim, paper.mapping_layers, paper.resolution), (512, 8, 128));
    assert_eq!((paper.g_lr, paper.d_lr, paper.lambda_gp, paper.lambda_plp), (0.002, 0.00235, 4.0, 2.0));
    assert_eq!((paper.ada_start_p, paper.ada_target, paper.total_samples), (0.0, 0.6, 8_000_000));
    let parsed: GanConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(parsed, paper);

    let cfg = GanConfig { total_samples: 0, ..micro(8) };
    assert!(train_gan(&[], &cfg, 1, &GanTrainOptions::default()).is_err());
    let img = RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]));
    let t = train_gan(std::slice::from_ref(&img), &cfg, 1, &GanTrainOptions::default()).unwrap();
    let fresh = Generator::new(&cfg, &mut seeding::rng_for(1, "gan-init-g"));
    assert_eq!(generator_hash(&t.generator), generator_hash(&fresh));
    assert_eq!(t.samples_seen, 0);
}

#[test]
fn short_run_is_finite_and_logged() {
    let cfg = GanConfig {
        total_samples: 32,
        r1_interval: 2,
        plp_interval: 2,
        log_every: 8,
        fid_every: 16,
        fid_samples: 8,
        ..micro(8)
    };
    let imgs: Vec<RgbImage> = (0..6).map(|i| RgbImage::from_pixel(12, 12, image::Rgb([i * 30, 90, 200 - i * 20]))).collect();
    let reference = images_to_array(&imgs.iter().map(|im| crate::imaging::resize_rgb(im, 8, 8)).collect::<Vec<_>>());
    let dir = tempfile::tempdir().unwrap();
    let opts = GanTrainOptions { fid_reference: Some(reference), log_path: Some(dir.path().join("log.jsonl")), ..Default::default() };
    let t = train_gan(&imgs, &cfg, 3, &opts).unwrap();
    assert_eq!(t.samples_seen, 32);
    assert!(t.log.iter().any(|r| r.r1.is_some()) && t.log.iter().any(|r| r.plp.is_some()));
    assert!(t.fid_final.unwrap().is_finite());
    let lines = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), t.log.len());
    let ck = t.checkpoint();
    let back = Generator::from_checkpoint(&ck).unwrap();
    assert_eq!(generator_hash(&back), generator_hash(&t.generator));
}
