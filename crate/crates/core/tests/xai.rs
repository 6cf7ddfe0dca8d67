use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xai_kit::render::{compose_panel, render_lime_overlay, render_overlay};
use xai_kit::xai::{
    class_model_visualization, explain_lime, faster_score_cam, grad_cam, grad_cam_pp, score_cam, smoothgrad,
    vanilla_saliency,
};
use xai_kit::{CamConfig, CnnModel, Heatmap, LimeConfig, ModelConfig, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 3,
        conv_filters: vec![4, 5],
        kernel_size: 3,
        dense_units: 8,
        dropout_rate: 0.25,
        num_classes: 2,
    }
}

/// A randomly initialized model with nonzero biases.
fn model(seed: u64) -> CnnModel {
    let base = CnnModel::new(config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let params = base
        .parameters()
        .iter()
        .map(|(name, t)| {
            let t = if name.ends_with(".bias") {
                Tensor::from_fn(t.shape(), |_| rng.random_range(-0.2..0.2))
            } else {
                t.clone()
            };
            (name.clone(), t)
        })
        .collect();
    CnnModel::from_parameters(config(), params).unwrap()
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, 16, 16], |_| rng.random::<f64>())
}

fn logit(model: &CnnModel, image: &Tensor, class: usize) -> f64 {
    let batch = image.clone().reshape(&[1, 3, 16, 16]).unwrap();
    model.forward_logits(&batch, false, 0).unwrap().data()[class]
}

fn assert_unit_map(h: &Heatmap) {
    assert_eq!(h.values.shape(), &[16, 16]);
    assert!(h.values.data().iter().all(|v| (0.0..=1.0).contains(v)), "{:?}", h.method);
}

#[test]
fn saliency_matches_finite_difference_sensitivity() {
    let eps = 1e-5;
    for seed in 0..3 {
        let m = model(seed);
        let x = image(seed + 10);
        for class in 0..2 {
            let mut probe = x.clone();
            let mut raw = Tensor::zeros(&[16, 16]);
            for i in 0..x.len() {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + eps;
                let up = logit(&m, &probe, class);
                probe.data_mut()[i] = orig - eps;
                let down = logit(&m, &probe, class);
                probe.data_mut()[i] = orig;
                let p = i % 256;
                let d = ((up - down) / (2.0 * eps)).abs();
                raw.data_mut()[p] = raw.data()[p].max(d);
            }
            let h = vanilla_saliency(&m, &x, class).unwrap();
            assert!((h.raw_max - raw.max()).abs() <= 1e-3 * raw.max());
            let (lo, hi) = (raw.min(), raw.max());
            for (got, r) in h.values.data().iter().zip(raw.data()) {
                assert!((got - (r - lo) / (hi - lo)).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn all_maps_are_unit_range_and_repeatable() {
    let m = model(3);
    let x = image(4);
    let cam = CamConfig {
        smoothgrad_samples: 6,
        ..CamConfig::default()
    };
    let run = || {
        vec![
            vanilla_saliency(&m, &x, 1).unwrap(),
            smoothgrad(&m, &x, 1, &cam).unwrap(),
            grad_cam(&m, &x, 1, "conv2").unwrap(),
            grad_cam(&m, &x, 0, "conv1").unwrap(),
            grad_cam_pp(&m, &x, 1, "conv2").unwrap(),
            score_cam(&m, &x, 1, "conv2").unwrap(),
            faster_score_cam(&m, &x, 1, "conv2", 2).unwrap(),
        ]
    };
    let first = run();
    for h in &first {
        assert_unit_map(h);
    }
    assert_eq!(first, run());
}

#[test]
fn smoothgrad_noise_changes_the_map() {
    let m = model(5);
    let x = image(6);
    let plain = vanilla_saliency(&m, &x, 0).unwrap();
    let cam = CamConfig {
        smoothgrad_samples: 4,
        smoothgrad_sigma_fraction: 0.3,
        ..CamConfig::default()
    };
    let noisy = smoothgrad(&m, &x, 0, &cam).unwrap();
    assert_ne!(plain.values, noisy.values);
    let other_seed = smoothgrad(&m, &x, 0, &CamConfig { seed: 1, ..cam }).unwrap();
    assert_ne!(noisy.values, other_seed.values);
}

#[test]
fn lime_on_a_cnn_is_deterministic() {
    let m = model(7);
    let x = image(8);
    let config = LimeConfig {
        num_regions: 9,
        num_samples: 60,
        ..LimeConfig::default()
    };
    let (a, sp) = explain_lime(&m, &x, 1, &config).unwrap();
    let (b, _) = explain_lime(&m, &x, 1, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.region_weights.len(), sp.num_regions);
    assert!(a.r2 <= 1.0 + 1e-12);
    let png = render_lime_overlay(&x, &sp, &a, 3).unwrap();
    assert_eq!(png.dimensions(), (16, 16));
}

#[test]
fn class_model_image_and_panel() {
    let m = model(9);
    let cam = CamConfig {
        classmodel_steps: 20,
        classmodel_step_size: 0.1,
        ..CamConfig::default()
    };
    let v = class_model_visualization(&m, 1, &cam).unwrap();
    assert_eq!(v.image.shape(), &[3, 16, 16]);
    assert_eq!(v.objective.len(), 21);
    assert!(v.image.data().iter().all(|p| (0.0..=1.0).contains(p)));

    let x = image(10);
    let tiles: Vec<_> = [grad_cam(&m, &x, 1, "conv2").unwrap(), vanilla_saliency(&m, &x, 1).unwrap()]
        .iter()
        .map(|h| render_overlay(&x, h, 0.5).unwrap())
        .collect();
    let panel = compose_panel(&tiles, 2).unwrap();
    assert_eq!(panel.dimensions(), (32, 16));
}
