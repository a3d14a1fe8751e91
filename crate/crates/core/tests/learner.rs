mod common;

use jlcm::learner::{grad_codebooks, loss_total, soft_reconstruct, Objective, RowLayout};
use jlcm::{
    finalize, optimize_layer, reconstruct, Activation, CodebookSet, HardMapping, LinearLayer, Matrix, Schedule,
    SoftMapping,
};
use rand::Rng;

fn random_soft(rng: &mut rand_chacha::ChaCha8Rng, n_o: usize, n_i: usize, m: usize) -> SoftMapping {
    SoftMapping {
        n_o,
        n_i,
        codebook_size: m,
        logits: (0..n_o * n_i * m).map(|_| common::normal(rng)).collect(),
    }
}

#[test]
fn codebook_gradient_matches_central_differences() {
    let h = 1e-5;
    for case in 0..20u64 {
        let mut rng = common::rng(100 + case);
        let act = [Activation::Identity, Activation::Gelu][case as usize % 2];
        let w = common::gauss(&mut rng, 4, 4, 1.0);
        let layer = LinearLayer::new(w, Some(vec![0.1, -0.2, 0.0, 0.3]), act).unwrap();
        let x = common::gauss(&mut rng, 8, 4, 1.0);
        let x_tilde = common::gauss(&mut rng, 8, 4, 1.0);
        let multi_scale = case % 3 == 0;
        let cbs = CodebookSet {
            codebooks: if multi_scale {
                vec![(0..4).map(|_| common::normal(&mut rng)).collect()]
            } else {
                (0..2).map(|_| (0..4).map(|_| common::normal(&mut rng)).collect()).collect()
            },
            scales: multi_scale.then(|| vec![0.5, 1.5]),
            row_group_boundaries: vec![0, 2, 4],
        };
        let soft = random_soft(&mut rng, 4, 4, 4);
        let sched = Schedule::default();

        let layout = RowLayout::new(&cbs, 4);
        let probs = soft.probs();
        let w_soft = jlcm::learner::soft_weights(&cbs.codebooks, &probs, &layout);
        let (_, _, upstream) = Objective::new(&layer, &x_tilde, &x).unwrap().data_terms(&w_soft, None);
        let analytic = grad_codebooks(&cbs.codebooks, &probs, &upstream, &layout);

        for g in 0..cbs.codebooks.len() {
            for j in 0..4 {
                let at = |delta: f64| {
                    let mut c = cbs.clone();
                    c.codebooks[g][j] += delta;
                    loss_total(&c, &soft, &x_tilde, &x, &layer, &sched, 0).unwrap().total
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let a = analytic[g][j];
                let rel = (a - fd).abs() / (a.abs() + 1e-8);
                assert!(rel < 1e-4, "case {case} codebook {g}[{j}]: analytic {a}, fd {fd}");
            }
        }
    }
}

#[test]
fn one_hot_codebook_gradient_sums_assigned_upstream() {
    let mut rng = common::rng(7);
    let cbs = CodebookSet {
        codebooks: vec![vec![-1.0, 0.0, 0.5, 2.0]],
        scales: None,
        row_group_boundaries: vec![0, 3],
    };
    let map = HardMapping {
        n_o: 3,
        n_i: 2,
        indices: vec![0, 3, 3, 1, 0, 3],
    };
    let soft = SoftMapping::from_hard(&map, 4, 1e3);
    let upstream: Vec<f64> = (0..6).map(|_| common::normal(&mut rng)).collect();
    let g = grad_codebooks(&cbs.codebooks, &soft.probs(), &upstream, &RowLayout::new(&cbs, 2));
    let expect = [upstream[0] + upstream[4], upstream[3], 0.0, upstream[1] + upstream[2] + upstream[5]];
    for j in 0..4 {
        assert!((g[0][j] - expect[j]).abs() < 1e-12);
    }
}

#[test]
fn hand_evaluated_soft_weight() {
    let cbs = CodebookSet {
        codebooks: vec![vec![0.0, 2.0]],
        scales: None,
        row_group_boundaries: vec![0, 1],
    };
    let soft = SoftMapping {
        n_o: 1,
        n_i: 1,
        codebook_size: 2,
        logits: vec![0.0, 3f64.ln()],
    };
    assert!((soft_reconstruct(&cbs, &soft).unwrap().get(0, 0) - 1.5).abs() < 1e-6);
}

/// Weights drawn from a known codebook, then the codebook jittered by 5%.
fn planted_layer(seed: u64) -> (LinearLayer, CodebookSet, HardMapping, Matrix) {
    let mut rng = common::rng(seed);
    let truth = [-1.5, -0.5, 0.25, 1.0];
    let (n_o, n_i) = (16, 12);
    let indices: Vec<u32> = (0..n_o * n_i).map(|_| rng.gen_range(0..4)).collect();
    let w = Matrix::from_fn(n_o, n_i, |r, c| truth[indices[r * n_i + c] as usize] as f32);
    let layer = LinearLayer::new(w, None, Activation::Relu).unwrap();
    let jittered = truth.iter().map(|&c| c * (1.0 + 0.05 * common::normal(&mut rng))).collect();
    let cbs = CodebookSet {
        codebooks: vec![jittered],
        scales: None,
        row_group_boundaries: vec![0, n_o],
    };
    let map = HardMapping { n_o, n_i, indices };
    let x = common::gauss(&mut rng, 64, n_i, 1.0);
    (layer, cbs, map, x)
}

#[test]
fn planted_codebook_is_recovered() {
    let (layer, cbs, map, x) = planted_layer(3);
    let initial = reconstruct(&cbs, &map).unwrap().mse(&layer.weights);
    let sched = Schedule::default();
    let soft = SoftMapping::from_hard(&map, 4, sched.logit_margin);
    let out = optimize_layer(&layer, cbs, soft, &x, &x, &sched).unwrap();
    let (c, m) = finalize(&out.codebooks, &out.mapping).unwrap();
    let fin = reconstruct(&c, &m).unwrap().mse(&layer.weights);
    assert!(fin < initial / 10.0, "initial {initial}, final {fin}");
}

#[test]
fn strong_penalty_hardens_assignments() {
    let (layer, cbs, map, x) = planted_layer(4);
    let sched = Schedule {
        lambda: 10.0,
        iterations: 3000,
        ..Schedule::default()
    };
    // A low margin starts every weight well inside (0.05, 0.95).
    let soft = SoftMapping::from_hard(&map, 4, 1.0);
    let start = soft.probs().iter().filter(|&&p| p > 0.05 && p < 0.95).count();
    assert!(start > 0);
    let out = optimize_layer(&layer, cbs, soft, &x, &x, &sched).unwrap();
    let probs = out.mapping.probs();
    let soft_count = probs.iter().filter(|&&p| p > 0.05 && p < 0.95).count();
    assert!(soft_count as f64 <= 0.01 * probs.len() as f64, "{soft_count} of {} still soft", probs.len());
}

#[test]
fn finalize_error_is_bounded_by_softness() {
    let mut rng = common::rng(11);
    let w = common::gauss(&mut rng, 12, 10, 0.5);
    let layer = LinearLayer::new(w, None, Activation::Relu).unwrap();
    let x = common::gauss(&mut rng, 48, 10, 1.0);
    let plan = jlcm::derive_plan(12, 10, 7.5, jlcm::Mode::MultiScale).unwrap();
    let (cbs, map) =
        jlcm::reorder::init_layer(&layer.weights, &plan, jlcm::ClusteringMethod::KMeans, 1, Default::default()).unwrap();
    let sched = Schedule {
        iterations: 2000,
        ..Schedule::default()
    };
    let soft = SoftMapping::from_hard(&map, plan.codebook_size, sched.logit_margin);
    let out = optimize_layer(&layer, cbs, soft, &x, &x, &sched).unwrap();
    let soft_w = soft_reconstruct(&out.codebooks, &out.mapping).unwrap();
    let (c, m) = finalize(&out.codebooks, &out.mapping).unwrap();
    let hard_w = reconstruct(&c, &m).unwrap();

    let residual = out
        .mapping
        .probs()
        .chunks_exact(plan.codebook_size)
        .map(|r| 1.0 - r.iter().cloned().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let scale = out.codebooks.row_scales().into_iter().fold(0.0, f64::max);
    let cb = &out.codebooks.codebooks[0];
    let spread = cb.iter().cloned().fold(f64::MIN, f64::max) - cb.iter().cloned().fold(f64::MAX, f64::min);
    let largest = cb.iter().map(|v| v.abs()).fold(0.0, f64::max) * scale;
    // Half-precision storage adds at most half an ulp of the largest codeword
    // times the scale, plus f32 output rounding.
    let bound = spread * scale * residual + largest * 2f64.powi(-11) + 1e-6;
    let err = soft_w.max_abs_diff(&hard_w);
    assert!(err <= bound, "error {err} exceeds bound {bound}");
}

#[test]
fn zero_iterations_leave_parameters_untouched() {
    let (layer, cbs, map, x) = planted_layer(5);
    let sched = Schedule {
        iterations: 0,
        ..Schedule::default()
    };
    let soft = SoftMapping::from_hard(&map, 4, 2.5);
    let out = optimize_layer(&layer, cbs.clone(), soft.clone(), &x, &x, &sched).unwrap();
    assert_eq!(out.codebooks, cbs);
    assert_eq!(out.mapping, soft);
    assert!(out.trace.is_empty());
}

#[test]
fn optimization_is_deterministic() {
    let (layer, cbs, map, x) = planted_layer(6);
    let sched = Schedule {
        iterations: 500,
        batch_size: Some(16),
        ..Schedule::default()
    };
    let run = || {
        let soft = SoftMapping::from_hard(&map, 4, sched.logit_margin);
        optimize_layer(&layer, cbs.clone(), soft, &x, &x, &sched).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |t: &[jlcm::learner::TraceRow]| t.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.trace), bits(&b.trace));
    assert_eq!(a.mapping, b.mapping);
    assert_eq!(a.codebooks, b.codebooks);
}

#[test]
fn divergence_is_reported() {
    let (layer, cbs, map, x) = planted_layer(8);
    let sched = Schedule {
        lr_codebook: 1e3,
        iterations: 200,
        ..Schedule::default()
    };
    let soft = SoftMapping::from_hard(&map, 4, sched.logit_margin);
    let err = optimize_layer(&layer, cbs, soft, &x, &x, &sched).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}
