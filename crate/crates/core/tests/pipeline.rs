mod common;

use jlcm::pipeline::compress_model_observed;
use jlcm::{
    compress_model, evaluate, CalibrationSet, Capture, ClusteringMethod, CompressedModel, Error, Matrix, ModeChoice,
    RunConfig,
};

fn short_cfg(iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.iterations = iterations;
    cfg
}

#[test]
fn layers_see_original_and_compressed_prefix_features() {
    let mut rng = common::rng(1);
    let model = common::random_model(&mut rng, &[6, 10, 8, 3]);
    let calib = CalibrationSet::new(common::gauss(&mut rng, 20, 6, 1.0)).unwrap();
    let mut seen: Vec<(usize, Matrix, Matrix)> = Vec::new();
    let out = compress_model_observed(&model, Some(&calib), &short_cfg(50), |f| {
        seen.push((f.layer, f.x.clone(), f.x_tilde.clone()))
    })
    .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    for (l, x, x_tilde) in &seen {
        let expect_x = out.reference.forward(&calib.inputs, *l, Capture::PreLayerInput).unwrap();
        let prefix = CompressedModel {
            layers: out.compressed.layers[..*l].to_vec(),
        };
        let expect_tilde = if *l == 0 { calib.inputs.clone() } else { prefix.forward(&calib.inputs).unwrap() };
        assert_eq!(x, &expect_x, "layer {l} x");
        assert_eq!(x_tilde, &expect_tilde, "layer {l} x_tilde");
    }
    // After the first layer the two feature streams really differ.
    assert!(seen[1].1.max_abs_diff(&seen[1].2) > 0.0);
}

#[test]
fn reference_computes_the_original_function() {
    let mut rng = common::rng(2);
    let model = common::random_model(&mut rng, &[8, 16, 12, 4]);
    let cfg = RunConfig {
        optimize: false,
        ..RunConfig::default()
    };
    let out = compress_model(&model, None, &cfg).unwrap();
    let x = common::gauss(&mut rng, 32, 8, 1.0);
    let dev = model.predict(&x).unwrap().max_abs_diff(&out.reference.predict(&x).unwrap());
    assert!(dev <= 1e-5, "{dev}");
    assert!(out.layers.last().unwrap().permutation.is_none());
    assert!(out.layers[..2].iter().all(|r| r.permutation.is_some()));
}

#[test]
fn full_runs_are_reproducible() {
    let mut rng = common::rng(3);
    let model = common::random_model(&mut rng, &[6, 8, 3]);
    let calib = CalibrationSet::new(common::gauss(&mut rng, 16, 6, 1.0)).unwrap();
    let cfg = short_cfg(200);
    let a = compress_model(&model, Some(&calib), &cfg).unwrap();
    let b = compress_model(&model, Some(&calib), &cfg).unwrap();
    assert_eq!(a.compressed.encode().unwrap(), b.compressed.encode().unwrap());
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert_eq!(x.trace, y.trace);
    }
}

#[test]
fn thread_count_does_not_change_init_only_results() {
    let mut rng = common::rng(4);
    let model = common::random_model(&mut rng, &[12, 24, 24, 5]);
    let base = RunConfig {
        optimize: false,
        clustering: ClusteringMethod::Bisecting,
        ..RunConfig::default()
    };
    let one = compress_model(&model, None, &RunConfig { threads: Some(1), ..base.clone() }).unwrap();
    let many = compress_model(&model, None, &RunConfig { threads: Some(4), ..base.clone() }).unwrap();
    let default = compress_model(&model, None, &base).unwrap();
    assert_eq!(one.compressed, many.compressed);
    assert_eq!(one.compressed, default.compressed);
}

#[test]
fn evaluate_identical_models_is_zero() {
    let mut rng = common::rng(5);
    let model = common::random_model(&mut rng, &[5, 7, 4]);
    let x = common::gauss(&mut rng, 10, 5, 1.0);
    let m = evaluate(&model, &model, &x).unwrap();
    assert_eq!(m.output_mse, 0.0);
    assert_eq!(m.max_abs_deviation, 0.0);
    assert_eq!(m.top1_agreement, Some(1.0));
    assert!(m.layer_weight_mse.iter().all(|&v| v == 0.0));
}

#[test]
fn lower_alpha_reconstructs_better() {
    let mut rng = common::rng(6);
    let model = common::random_model(&mut rng, &[32, 64, 8]);
    let run = |alpha| {
        let cfg = RunConfig {
            alpha,
            optimize: false,
            ..RunConfig::default()
        };
        let out = compress_model(&model, None, &cfg).unwrap();
        out.layers.iter().map(|r| r.final_weight_mse).sum::<f64>()
    };
    assert!(run(3.9) < run(7.5));
}

#[test]
fn multi_scale_mode_is_honoured() {
    let mut rng = common::rng(7);
    let model = common::random_model(&mut rng, &[16, 32, 4]);
    let cfg = RunConfig {
        mode: ModeChoice::MultiScale,
        optimize: false,
        ..RunConfig::default()
    };
    let out = compress_model(&model, None, &cfg).unwrap();
    for (rec, layer) in out.layers.iter().zip(&out.compressed.layers) {
        assert_eq!(rec.plan.mode, jlcm::Mode::MultiScale);
        assert_eq!(layer.num_codebooks, 1);
        assert_eq!(layer.scales.len(), rec.plan.num_scales);
    }
}

#[test]
fn optimizing_needs_calibration() {
    let mut rng = common::rng(8);
    let model = common::random_model(&mut rng, &[4, 4, 2]);
    let err = compress_model(&model, None, &RunConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn calibration_width_is_checked() {
    let mut rng = common::rng(9);
    let model = common::random_model(&mut rng, &[4, 4, 2]);
    let calib = CalibrationSet::new(common::gauss(&mut rng, 8, 5, 1.0)).unwrap();
    assert!(compress_model(&model, Some(&calib), &short_cfg(10)).is_err());
}

#[test]
fn invalid_alpha_is_rejected() {
    let mut rng = common::rng(10);
    let model = common::random_model(&mut rng, &[4, 4, 2]);
    let cfg = RunConfig {
        alpha: 0.5,
        optimize: false,
        ..RunConfig::default()
    };
    let err = compress_model(&model, None, &cfg).unwrap_err();
    assert!(err.to_string().contains("alpha must exceed 1"));
}
