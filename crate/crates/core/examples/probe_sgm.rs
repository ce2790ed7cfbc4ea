//! Temporary probe: desk-scale SGM quality on the 1D Brownian Gaussian case.

use hj_sampler::analytic::AnalyticCase;
use hj_sampler::metrics::w1_1d;
use hj_sampler::models::{simulate_forward, SdeModel, TimeGrid};
use hj_sampler::priors::{GaussianComponent, GaussianMixturePrior, Prior};
use hj_sampler::sampler::{sample_posterior_slices, ControlField, ObservationSpec};
use hj_sampler::score_net::{score_control, train, LossKind, MlpScoreNetwork, TrainConfig};
use std::time::Instant;

fn main() {
    let n_paths: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let eval: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let lr: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
    let prior = Prior::gaussian(
        nalgebra::DVector::from_element(1, 0.0),
        nalgebra::DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let grid = TimeGrid::span(0.0, 1.0, 100).unwrap();

    let t0 = Instant::now();
    let x0 = prior.sample(n_paths, 1).unwrap();
    let ens = simulate_forward(&model, &x0, &grid, 2).unwrap();
    println!("simulated {n_paths} paths in {:.1?}", t0.elapsed());

    let mut net = MlpScoreNetwork::new(1, &[50, 50], 3).unwrap();
    let cfg = TrainConfig::new(1000, epochs, lr, LossKind::Implicit, 4);
    let t0 = Instant::now();
    let history = train(&mut net, &ens, &cfg).unwrap();
    println!(
        "trained {epochs} epochs in {:.1?}; loss first/last: {:.4} / {:.4}",
        t0.elapsed(),
        history.first().unwrap(),
        history.last().unwrap()
    );

    // Score RMS against -x/(1+t) on x in [-3,3], t in {0.1, 0.5, 1.0}.
    for t in [0.1, 0.5, 1.0] {
        let mut sq = 0.0;
        let m = 61;
        for i in 0..m {
            let x = -3.0 + 6.0 * i as f64 / (m - 1) as f64;
            let s = net.forward(&[x], t)[0];
            let exact = -x / (1.0 + t);
            sq += (s - exact) * (s - exact);
        }
        println!("t = {t}: score RMS = {:.4}", (sq / m as f64).sqrt());
    }

    let gm = GaussianMixturePrior::single(GaussianComponent::scalar(0.0, 1.0).unwrap());
    let case = AnalyticCase::brownian_gaussian_mixture(&model, &gm).unwrap();
    let ctrl = score_control(net, 1.0, 1.0);
    // Max control error on [-2, 2] at tau = 0.
    let mut worst = 0.0f64;
    for i in 0..41 {
        let x = -2.0 + 0.1 * i as f64;
        let d = (ctrl.evaluate(&[x], 0.0)[0] - case.control(&[x], 0.0)[0]).abs();
        worst = worst.max(d);
    }
    println!("max |score control - analytic| on [-2,2] at tau=0: {worst:.4}");

    let t0 = Instant::now();
    for y in [-2.0, -1.0, 0.0, 1.5, 3.0] {
        let obs = ObservationSpec::new(vec![y], 1.0, vec![0.0]).unwrap();
        let slices = sample_posterior_slices(&model, &ctrl, &obs, 0.01, eval, 9).unwrap();
        let sampled: Vec<f64> = slices.get(0.0).unwrap().column(0).to_vec();
        let exact = case.exact_posterior(0.0, 1.0, &[y]).unwrap();
        let reference: Vec<f64> = exact.sample(eval, 99).column(0).to_vec();
        let w1 = w1_1d(&sampled, &reference).unwrap();
        println!("y_obs = {y:>4}: W1(sgm, exact) = {w1:.4}");
    }
    println!("inference for 5 observations in {:.1?}", t0.elapsed());
}
