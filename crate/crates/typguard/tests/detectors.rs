use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use typguard::detectors::gmm::DEFAULT_COMPONENT_GRID;
use typguard::detectors::ocsvm::DEFAULT_NU_GRID;
use typguard::detectors::{
    fit_gmm_em, fit_ocsvm, predict_label, scale_gamma, select_gmm_bic, EmConfig, ScoreCalibration, SmoConfig,
};
use typguard::synth::rng_for;

/// `n` points from `blobs` spherical clusters with random centres.
fn blobs(seed: u64, n: usize, dim: usize, blobs: usize, sigma: f64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, 0);
    let centres: Vec<Vec<f64>> = (0..blobs).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..n).map(|i| centres[i % blobs].iter().map(|c| c + noise.sample(&mut rng)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn em_log_likelihood_never_drops(
        seed: u64,
        n in 30usize..150,
        dim in 1usize..5,
        k in 1usize..4,
        c in 1usize..5,
        sigma in 0.05f64..2.0,
    ) {
        let x = blobs(seed, n, dim, k, sigma);
        let model = fit_gmm_em(&x, c, seed, EmConfig::default()).unwrap();
        prop_assert!(model.loglik_history.len() >= 2);
        for w in model.loglik_history.windows(2) {
            prop_assert!(w[1] - w[0] >= -1e-9, "{} -> {}", w[0], w[1]);
        }
        prop_assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nu_property_across_the_grid(seed: u64, n in 60usize..200, dim in 1usize..6, k in 1usize..4) {
        let x = blobs(seed, n, dim, k, 1.0);
        let gamma = scale_gamma(&x);
        let cfg = SmoConfig::default();
        for nu in DEFAULT_NU_GRID {
            let model = fit_ocsvm(&x, nu, gamma, cfg).unwrap();
            // Free support vectors sit on the boundary only up to the solver tolerance.
            let outliers = x.iter().filter(|p| model.decision(p).unwrap() < -cfg.tol).count() as f64 / n as f64;
            let svs = model.support_vectors.len() as f64 / n as f64;
            prop_assert!(outliers <= nu + 0.02, "nu {}: outlier fraction {}", nu, outliers);
            prop_assert!(svs >= nu - 0.02, "nu {}: SV fraction {}", nu, svs);
            prop_assert!((model.dual_coefs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn calibration_is_strictly_monotone(
        raw in prop::collection::vec(-50.0f64..50.0, 1..50),
        a in -60.0f64..60.0,
        d in 1e-6f64..10.0,
    ) {
        let cal = ScoreCalibration::fit(&raw).unwrap();
        let (lo, hi) = (cal.normalize(a), cal.normalize(a + d));
        prop_assert!(lo <= hi);
        prop_assert!(lo > 0.0 && hi < 1.0 || (a + d - cal.mean_nll).abs() / cal.std_nll > 30.0);
        if (a - cal.mean_nll).abs() / cal.std_nll < 30.0 {
            prop_assert!(lo < hi);
        }
    }

    #[test]
    fn labels_survive_monotone_transforms(s in -100.0f64..100.0, t in -100.0f64..100.0) {
        let f = |x: f64| (x / 10.0).tanh() * 3.0 + 1.0;
        prop_assert_eq!(predict_label(s, t), predict_label(f(s), f(t)));
    }
}

#[test]
fn bic_picks_one_component_for_one_blob() {
    for seed in 0..5 {
        let x = blobs(seed, 400, 4, 1, 0.3);
        let sel = select_gmm_bic(&x, &DEFAULT_COMPONENT_GRID, seed, EmConfig::default()).unwrap();
        assert_eq!(sel.model.n_components, 1, "seed {seed}: {:?}", sel.candidates);
    }
}

#[test]
fn two_blobs_give_one_hot_responsibilities() {
    // σ = 0.01, centres 10σ apart.
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rng = rng_for(5, 0);
    let centres = [[0.0, 0.0], [0.1, 0.0]];
    let x: Vec<Vec<f64>> =
        (0..400).map(|i| centres[i % 2].iter().map(|c| c + noise.sample(&mut rng)).collect()).collect();
    let model = fit_gmm_em(&x, 2, 0, EmConfig::default()).unwrap();
    for (b, centre) in centres.iter().enumerate() {
        // Per-blob MLE of the mean.
        let mle: Vec<f64> = (0..2).map(|a| x.iter().skip(b).step_by(2).map(|p| p[a]).sum::<f64>() / 200.0).collect();
        let nearest = model.means.iter().min_by(|p, q| dist(p, centre).total_cmp(&dist(q, centre))).unwrap();
        assert!(dist(nearest, centre) < 0.05);
        assert!(dist(nearest, &mle) < 1e-6, "{nearest:?} vs {mle:?}");
    }
    assert!(model.weights.iter().all(|w| (w - 0.5).abs() < 1e-6));
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn fits_are_reproducible() {
    let x = blobs(9, 150, 3, 2, 0.5);
    let a = select_gmm_bic(&x, &[1, 2, 4], 3, EmConfig::default()).unwrap();
    let b = select_gmm_bic(&x, &[1, 2, 4], 3, EmConfig::default()).unwrap();
    assert_eq!(a.model, b.model);
    let g = scale_gamma(&x);
    assert_eq!(
        fit_ocsvm(&x, 0.1, g, SmoConfig::default()).unwrap(),
        fit_ocsvm(&x, 0.1, g, SmoConfig::default()).unwrap()
    );
}
