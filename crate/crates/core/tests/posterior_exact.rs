//! End-to-end checks of the controlled sampler against exact posteriors.

use hj_sampler::analytic::AnalyticCase;
use hj_sampler::metrics::w1_1d;
use hj_sampler::models::SdeModel;
use hj_sampler::priors::{GaussianComponent, GaussianMixturePrior, UniformMixturePrior};
use hj_sampler::riccati::solve_riccati;
use hj_sampler::sampler::{sample_posterior_slices, ObservationSpec};
use nalgebra::{DMatrix, DVector};

fn column(samples: &ndarray::Array2<f64>) -> Vec<f64> {
    samples.column(0).to_vec()
}

#[test]
fn brownian_gaussian_sampler_matches_conjugate_posterior() {
    // Standard normal prior, eps = 1, s = T = 1, y_obs = 2, dtau = 0.01.
    let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
    let prior = GaussianMixturePrior::single(GaussianComponent::scalar(0.0, 1.0).unwrap());
    let case = AnalyticCase::brownian_gaussian_mixture(&model, &prior).unwrap();

    let obs = ObservationSpec::new(vec![2.0], 1.0, vec![0.0]).unwrap();
    let slices = sample_posterior_slices(&model, &case, &obs, 0.01, 1_000_000, 42).unwrap();
    let sampled = column(slices.get(0.0).unwrap());

    let exact = case.exact_posterior(0.0, 1.0, &[2.0]).unwrap();
    let reference = column(&exact.sample(1_000_000, 4242));

    let w1 = w1_1d(&sampled, &reference).unwrap();
    assert!(w1 <= 0.004, "W1 = {w1}");
}

#[test]
fn shifted_control_reaches_intermediate_times() {
    // Three-Gaussian mixture prior; sample Y_t | Y_s for t > 0, s < T with
    // the horizon-T control.
    let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
    let prior = GaussianMixturePrior::new(
        vec![
            GaussianComponent::scalar(0.0, 0.25).unwrap(),
            GaussianComponent::scalar(-2.0, 0.64).unwrap(),
            GaussianComponent::scalar(2.0, 0.36).unwrap(),
        ],
        vec![1.0 / 3.0; 3],
    )
    .unwrap();
    let case = AnalyticCase::brownian_gaussian_mixture(&model, &prior).unwrap();

    let (t, s, y) = (0.05, 0.6, 0.5);
    let obs = ObservationSpec::new(vec![y], s, vec![t]).unwrap();
    let slices = sample_posterior_slices(&model, &case, &obs, 0.001, 200_000, 7).unwrap();
    let sampled = column(slices.get(t).unwrap());

    let exact = case.exact_posterior(t, s, &[y]).unwrap();
    let reference = column(&exact.sample(200_000, 77));
    let w1 = w1_1d(&sampled, &reference).unwrap();
    assert!(w1 <= 0.01, "W1 = {w1}");
}

#[test]
fn uniform_mixture_sampler_matches_exact_posterior() {
    let model = SdeModel::brownian(1, 0.05, 1.0).unwrap();
    let prior =
        UniformMixturePrior::new(vec![(-0.75, -0.25), (0.25, 0.75)], vec![0.5, 0.5]).unwrap();
    let case = AnalyticCase::brownian_uniform_mixture(&model, &prior).unwrap();

    for (t, s, y) in [(0.0, 1.0, 0.3), (0.3, 1.0, -0.2)] {
        let obs = ObservationSpec::new(vec![y], s, vec![t]).unwrap();
        let slices = sample_posterior_slices(&model, &case, &obs, 0.001, 100_000, 11).unwrap();
        let sampled = column(slices.get(t).unwrap());
        let exact = case.exact_posterior(t, s, &[y]).unwrap();
        let reference = column(&exact.sample(100_000, 1111));
        let w1 = w1_1d(&sampled, &reference).unwrap();
        assert!(w1 <= 0.01, "W1 = {w1} at (t, s, y) = ({t}, {s}, {y})");
    }
}

#[test]
fn riccati_backend_samples_ou_posterior() {
    let model = SdeModel::linear(
        1,
        1.5,
        1.0,
        DMatrix::from_element(1, 1, -3.0),
        DVector::zeros(1),
    )
    .unwrap();
    let prior = GaussianMixturePrior::single(GaussianComponent::scalar(0.0, 1.0).unwrap());
    let grid = hj_sampler::models::TimeGrid::span(0.0, 1.0, 100).unwrap();
    let control = solve_riccati(&model, &prior, 1e-4, &grid).unwrap();
    let case = AnalyticCase::ou1d_gaussian(&model, &prior).unwrap();

    let y = 0.8;
    let obs = ObservationSpec::new(vec![y], 1.0, vec![0.0]).unwrap();
    let slices = sample_posterior_slices(&model, &control, &obs, 0.01, 200_000, 5).unwrap();
    let sampled = column(slices.get(0.0).unwrap());
    let exact = case.exact_posterior(0.0, 1.0, &[y]).unwrap();
    let reference = column(&exact.sample(200_000, 55));
    let w1 = w1_1d(&sampled, &reference).unwrap();
    // dtau = 0.01 carries an O(dtau) bias near 0.008 for this setup.
    assert!(w1 <= 0.015, "W1 = {w1}");
}
