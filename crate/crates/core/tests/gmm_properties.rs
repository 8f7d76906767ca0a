use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use locoman::demo::{align, generate_synthetic, DemoGenConfig, DemoSample, DemoSet, Demonstration};
use locoman::gmm::{fit_gmm, fit_gmm_data, fit_gmm_traced, gmr, EmOptions, Gmm};

fn aligned_demos() -> &'static DemoSet {
    static SET: OnceLock<DemoSet> = OnceLock::new();
    SET.get_or_init(|| {
        let raw = generate_synthetic(&DemoGenConfig::default(), 5, 42).unwrap();
        align(&raw, 100).unwrap()
    })
}

fn fitted() -> &'static Gmm {
    static GMM: OnceLock<Gmm> = OnceLock::new();
    GMM.get_or_init(|| fit_gmm(aligned_demos(), 8, 0).unwrap())
}

fn shifted(set: &DemoSet, c: &DVector<f64>) -> DemoSet {
    let demos = set
        .demos()
        .iter()
        .map(|d| {
            let samples = d
                .samples()
                .iter()
                .map(|s| DemoSample {
                    t: s.t,
                    wrist_pos: s.wrist_pos + Vector3::new(c[0], c[1], c[2]),
                    wrist_vel: s.wrist_vel + Vector3::new(c[3], c[4], c[5]),
                    pelvis_pose: s.pelvis_pose + Vector3::new(c[6], c[7], c[8]),
                })
                .collect();
            Demonstration::new(d.source_id(), samples).unwrap()
        })
        .collect();
    // same grid, so re-aligning only restores the aligned marker
    align(&DemoSet::new(demos).unwrap(), set.n_resample().unwrap()).unwrap()
}

fn true_mean() -> DVector<f64> {
    DVector::from_vec(vec![5.0, -1.0, 2.5])
}

fn true_factor() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.2, 0.0, 0.0, 0.4, 0.7, 0.0, -0.3, 0.2, 0.5])
}

fn gaussian_sample(seed: u64, n: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mean, l) = (true_mean(), true_factor());
    (0..n)
        .map(|_| &mean + &l * DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_component_is_the_sample_moments(seed in any::<u64>(), n in 50usize..400) {
        let data = gaussian_sample(seed, n);
        let (g, _) = fit_gmm_data(&data, 1, seed, &EmOptions::default()).unwrap();
        prop_assert_eq!(g.priors(), &[1.0][..]);
        let mean = data.iter().fold(DVector::zeros(3), |a, x| a + x) / n as f64;
        let cov = data.iter().fold(DMatrix::zeros(3, 3), |a, x| a + (x - &mean) * (x - &mean).transpose()) / n as f64;
        prop_assert!((&g.means()[0] - &mean).amax() < 1e-10);
        prop_assert!((&g.covariances()[0] - &cov).amax() < 1e-9);
    }

    #[test]
    fn regression_is_continuous(s in 0.0f64..26.0) {
        let g = fitted();
        let delta = 1e-6;
        let here = g.condition(s).unwrap().mean;
        let there = g.condition(s + delta).unwrap().mean;
        // local Lipschitz estimate from neighbours a hundredth of a second away
        let h = 1e-2;
        let slope = (g.condition(s + h).unwrap().mean - g.condition(s - h).unwrap().mean).amax() / (2.0 * h);
        let bound = 10.0 * (slope + 1.0) * delta;
        prop_assert!((there - here).amax() < bound);
    }

    #[test]
    fn responsibilities_and_covariances_are_valid(s in -2.0f64..28.0) {
        let c = fitted().condition(s).unwrap();
        let total: f64 = c.responsibilities.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!((&c.covariance - c.covariance.transpose()).amax() <= 1e-12);
        prop_assert!(c.covariance.clone().cholesky().is_some());
    }
}

#[test]
fn single_gaussian_mean_within_three_standard_errors() {
    let n = 2000;
    let cov = true_factor() * true_factor().transpose();
    for seed in [1, 2, 3] {
        let (g, _) = fit_gmm_data(&gaussian_sample(seed, n), 1, 0, &EmOptions::default()).unwrap();
        for d in 0..3 {
            let se = (cov[(d, d)] / n as f64).sqrt();
            assert!(
                (g.means()[0][d] - true_mean()[d]).abs() < 3.0 * se,
                "seed {seed} dim {d}"
            );
        }
    }
}

#[test]
fn em_trace_never_decreases() {
    let (_, trace) = fit_gmm_traced(aligned_demos(), 8, 0, &EmOptions::default()).unwrap();
    assert!(trace.log_likelihood.len() >= 2);
    for w in trace.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn translating_the_demos_translates_the_regression() {
    let c = DVector::from_vec(vec![0.5, -0.25, 0.1, 0.02, -0.01, 0.03, 1.5, -0.7, 0.1]);
    let set = aligned_demos();
    let a = fit_gmm(set, 8, 3).unwrap();
    let b = fit_gmm(&shifted(set, &c), 8, 3).unwrap();
    let grid: Vec<f64> = (0..60).map(|i| 26.0 * i as f64 / 59.0).collect();
    let ra = gmr(&a, &grid).unwrap();
    let rb = gmr(&b, &grid).unwrap();
    for (ma, mb) in ra.means().iter().zip(rb.means()) {
        assert!((mb - ma - &c).amax() < 1e-8);
    }
}

#[test]
fn single_component_prior_is_one_on_demo_data() {
    let g = fit_gmm(aligned_demos(), 1, 0).unwrap();
    assert_eq!(g.priors(), &[1.0]);
}

#[test]
fn fitting_is_deterministic() {
    let a = fit_gmm(aligned_demos(), 8, 5).unwrap();
    let b = fit_gmm(aligned_demos(), 8, 5).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}
