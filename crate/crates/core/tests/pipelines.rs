use gpdyn::dataio::{baseline_linreg, Dataset};
use gpdyn::dynamics::SystemSpec;
use gpdyn::experiment::{
    case_a, fd_linreg, logistic_data, lotka_volterra_data, lotka_volterra_dictionaries, point_eps1,
    shared_param, split_theta,
};
use gpdyn::faer::Mat;
use gpdyn::gp::{GpConfig, GpModelRecord, GpStateModel};
use gpdyn::linear::{Dictionary, GaussianPosterior};
use gpdyn::mcmc::{run_chain, ChainConfig, Proposal, SampleChain};
use gpdyn::Error;

fn quick_gp(seed: u64) -> GpConfig {
    GpConfig {
        restarts: 3,
        seed,
        ..GpConfig::default()
    }
}

#[test]
fn case_a_is_reproducible_for_a_fixed_seed() {
    let (train, _) = lotka_volterra_data(0.05, 0.1, 8).unwrap();
    let a = case_a(&train, &lotka_volterra_dictionaries(), 0.0, &quick_gp(2)).unwrap();
    let b = case_a(&train, &lotka_volterra_dictionaries(), 0.0, &quick_gp(2)).unwrap();
    for (p, q) in a.posteriors.iter().zip(&b.posteriors) {
        assert_eq!(p.mean, q.mean);
        assert_eq!(p.covariance, q.covariance);
    }
}

#[test]
fn more_data_tightens_the_case_a_posterior() {
    // Traces at 1% and 10% of the pool with the same seed.
    let trace = |density| {
        let (train, _) = lotka_volterra_data(density, 0.0, 3).unwrap();
        let fit = case_a(&train, &lotka_volterra_dictionaries(), 0.0, &quick_gp(3)).unwrap();
        fit.posteriors
            .iter()
            .map(GaussianPosterior::trace)
            .sum::<f64>()
    };
    assert!(trace(0.1) < trace(0.01));
}

#[test]
fn adding_trajectories_never_loosens_the_shared_posterior() {
    let spec = SystemSpec::lotka_volterra(1.5, 1.0, 1.0, 3.0);
    let dicts = lotka_volterra_dictionaries();
    let gp = quick_gp(1);
    let sets: Vec<Dataset> = [1u64, 2, 3]
        .iter()
        .map(|&s| lotka_volterra_data(0.02, 0.05, s).unwrap().0)
        .collect();
    let mut last = f64::INFINITY;
    for n in 1..=sets.len() {
        let fit = shared_param(&sets[..n], &spec, &dicts, 0.0, &gp).unwrap();
        let trace = fit.posterior.trace();
        assert!(
            trace <= last * (1.0 + 1e-9),
            "{n} trajectories: {trace} > {last}"
        );
        last = trace;
    }
}

#[test]
fn gp_records_rebuild_identical_estimates() {
    let (train, _) = logistic_data(10, 0.5, 4).unwrap();
    let model = GpStateModel::fit(train.times(), &train.component(0), &quick_gp(4)).unwrap();
    let json = serde_json::to_string(&model.to_record()).unwrap();
    let rec: GpModelRecord = serde_json::from_str(&json).unwrap();
    let back = GpStateModel::from_record(&rec).unwrap();
    assert_eq!(back.chi_d(), model.chi_d());
    for (a, b) in back
        .estimate_derivatives()
        .iter()
        .zip(model.estimate_derivatives())
    {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn chains_round_trip_through_files() {
    let target = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
    let config = ChainConfig {
        steps: 2_000,
        burn_in: 500,
        thin: 3,
        seed: 9,
        ..ChainConfig::default()
    };
    let chain = run_chain(&[0.5, -0.5, 0.0], target, &Proposal::Isotropic, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = (dir.path().join("c.csv"), dir.path().join("c.json"));
    chain.write(&csv, &json).unwrap();
    let back = SampleChain::read(&csv, &json).unwrap();
    assert_eq!(back, chain);

    let again = run_chain(&[0.5, -0.5, 0.0], target, &Proposal::Isotropic, &config).unwrap();
    assert_eq!(again, chain);
}

#[test]
fn least_squares_baseline_recovers_exact_coefficients() {
    // Oracle: d = 2 − 3x + 0.5x² evaluated exactly.
    let dict = Dictionary::monomials(1, &["1", "x1", "x1^2"]).unwrap();
    let states: Vec<Vec<f64>> = (0..25).map(|k| vec![-2.0 + 0.2 * k as f64]).collect();
    let g = dict.design_matrix(&states).unwrap();
    let d: Vec<f64> = states
        .iter()
        .map(|s| 2.0 - 3.0 * s[0] + 0.5 * s[0] * s[0])
        .collect();
    let theta = baseline_linreg(g.as_ref(), &d).unwrap();
    for (a, b) in theta.iter().zip([2.0, -3.0, 0.5]) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn finite_difference_baseline_is_accurate_on_dense_clean_data() {
    let spec = SystemSpec::lotka_volterra(1.5, 1.0, 1.0, 3.0);
    let (train, _) = lotka_volterra_data(1.0, 0.0, 1).unwrap();
    let est = fd_linreg(&train, &lotka_volterra_dictionaries(), false).unwrap();
    let eps = point_eps1(&est, &split_theta(&spec, spec.truth.as_ref().unwrap())).unwrap();
    assert!(eps < 1.0, "{eps}");
}

#[test]
fn too_few_points_and_bad_grids_are_rejected() {
    let err = GpStateModel::fit(&[0.0, 1.0], &[1.0, 2.0], &quick_gp(0)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    let err =
        GpStateModel::fit(&[0.0, 1.0, 1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], &quick_gp(0)).unwrap_err();
    assert!(matches!(err, Error::NonIncreasingTimes { .. }));
    let err = baseline_linreg(Mat::<f64>::zeros(3, 2).as_ref(), &[1.0, 2.0, 3.0]).unwrap_err();
    assert!(matches!(err, Error::SingularSystem), "{err}");
}

#[test]
fn datasets_round_trip_through_csv() {
    let (train, _) = lotka_volterra_data(0.02, 0.2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    train.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back, train);
}
