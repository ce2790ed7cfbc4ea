//! Riccati ODE control for linear drifts with Gaussian-mixture priors.
//!
//! With `b(x, t) = A(t) x + beta(t)` and diffusion `D` (diagonal here), each
//! mixture component's quadratic phase `(Q_j, q_j, r_j)` solves
//!
//! ```text
//! Qdot = D + Q A(t)^T + A(t) Q        Q(0) = Sigma_j / eps
//! qdot = A(t) q + beta(t)             q(0) = theta_j
//! rdot = (eps/2) tr(2 A(t) + D Q^-1)  r(0) = (n eps / 2) ln 2pi + (eps/2) ln det Sigma_j
//! ```
//!
//! integrated by explicit Euler at `ode_step` and stored at the nodes of the
//! requested grid. The control is
//!
//! ```text
//! grad_x S(x, tau) = -sum_j p_j(x, tau) Q_j^{-1} (x - q_j)
//! p_j = softmax_j [ ln w_j - (1/2 eps) (x - q_j)^T Q_j^{-1} (x - q_j) - r_j / eps ]
//! ```
//!
//! with `(Q, q, r)` linearly interpolated between stored nodes and every
//! solve done through a Cholesky factorization, never an explicit inverse.
//! Loss of positive definiteness is fatal by design: for this model class
//! `Q` stays SPD in exact arithmetic, so a failure signals a misconfigured
//! step size rather than something to project away.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{Drift, LinearDrift, SdeModel, TimeGrid};
use crate::priors::{log_sum_exp, GaussianMixturePrior};
use crate::sampler::ControlField;

#[derive(Debug, Clone)]
struct RiccatiComponent {
    /// Row-major `Q` per grid node.
    q_mats: Vec<Vec<f64>>,
    q_vecs: Vec<Vec<f64>>,
    r_vals: Vec<f64>,
}

/// Time-gridded `(Q, q, r)` trajectories per mixture component.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    dim: usize,
    eps: f64,
    horizon: f64,
    log_weights: Vec<f64>,
    comps: Vec<RiccatiComponent>,
}

/// In-place Cholesky of a row-major symmetric matrix, then solve for `b`.
/// Returns false if the matrix is not positive definite.
fn chol_solve_in_place(n: usize, a: &mut [f64], b: &mut [f64]) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    true
}

/// Integrates the Riccati system for every component of `prior` and stores
/// the trajectories at the nodes of `grid`, which must cover `[0, horizon]`.
pub fn solve_riccati(
    model: &SdeModel,
    prior: &GaussianMixturePrior,
    ode_step: f64,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let n = model.dim();
    if prior.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: prior.dim() });
    }
    let lin = match model.drift() {
        Drift::Linear(lin) => lin.clone(),
        Drift::Zero => LinearDrift::constant(DMatrix::zeros(n, n), DVector::zeros(n)),
        Drift::General(_) => {
            return Err(Error::Precondition("Riccati control requires a linear drift".into()))
        }
    };
    if !(ode_step > 0.0) || ode_step > grid.dt + 1e-15 {
        return Err(Error::Precondition(format!(
            "ode_step must satisfy 0 < ode_step <= grid.dt, got {ode_step} vs {}",
            grid.dt
        )));
    }
    if grid.t0.abs() > 1e-12 || (grid.last() - model.horizon()).abs() > 0.5 * grid.dt {
        return Err(Error::Precondition("Riccati grid must cover [0, horizon]".into()));
    }
    let n_sub_f = grid.dt / ode_step;
    let n_sub = n_sub_f.round();
    if (n_sub_f - n_sub).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "ode_step {ode_step} must divide the grid step {}",
            grid.dt
        )));
    }
    let n_sub = n_sub as usize;
    let h = grid.dt / n_sub as f64;

    // D = diag(noise_scale^2) must be SPD for the Riccati route.
    let d_diag: Vec<f64> = model.noise_scale().iter().map(|s| s * s).collect();
    if d_diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::NotSpd("diffusion matrix has a zero diagonal entry".into()));
    }

    let eps = model.epsilon();
    let constant_a = matches!(lin, LinearDrift::Constant { .. });
    let a_const = lin.a_at(0.0);
    let beta_const = lin.beta_at(0.0);

    let mut comps = Vec::with_capacity(prior.components().len());
    for (ci, comp) in prior.components().iter().enumerate() {
        let mut q = comp.cov() / eps;
        let mut qv = comp.mean().clone();
        let log_det_sigma: f64 = comp
            .cov()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("prior component {ci}")))?
            .l()
            .diagonal()
            .iter()
            .map(|d| 2.0 * d.ln())
            .sum();
        let mut r = 0.5 * n as f64 * eps * crate::priors::LN_2PI + 0.5 * eps * log_det_sigma;

        let mut q_mats = Vec::with_capacity(grid.n_nodes());
        let mut q_vecs = Vec::with_capacity(grid.n_nodes());
        let mut r_vals = Vec::with_capacity(grid.n_nodes());
        let store =
            |q: &DMatrix<f64>, qv: &DVector<f64>, r: f64,
             q_mats: &mut Vec<Vec<f64>>, q_vecs: &mut Vec<Vec<f64>>, r_vals: &mut Vec<f64>| {
                q_mats.push(q.transpose().as_slice().to_vec()); // row-major
                q_vecs.push(qv.as_slice().to_vec());
                r_vals.push(r);
            };
        store(&q, &qv, r, &mut q_mats, &mut q_vecs, &mut r_vals);

        let mut a = a_const.clone();
        let mut beta = beta_const.clone();
        for k in 0..grid.steps {
            for sub in 0..n_sub {
                let t = grid.node(k) + sub as f64 * h;
                if !constant_a {
                    a = lin.a_at(t);
                    beta = lin.beta_at(t);
                }
                // tr(D Q^{-1}) through a Cholesky factorization of Q.
                let chol = q.clone().cholesky().ok_or(Error::RiccatiSpd { component: ci, time: t })?;
                let q_inv = chol.inverse();
                let mut tr = 2.0 * a.trace();
                for i in 0..n {
                    tr += d_diag[i] * q_inv[(i, i)];
                }

                let qa = &q * a.transpose();
                let mut q_dot = &qa + qa.transpose();
                for i in 0..n {
                    q_dot[(i, i)] += d_diag[i];
                }
                let qv_dot = &a * &qv + &beta;

                q += q_dot * h;
                q = (&q + q.transpose()) * 0.5;
                qv += qv_dot * h;
                r += 0.5 * eps * tr * h;
            }
            let t_node = grid.node(k + 1);
            if q.clone().cholesky().is_none() {
                return Err(Error::RiccatiSpd { component: ci, time: t_node });
            }
            store(&q, &qv, r, &mut q_mats, &mut q_vecs, &mut r_vals);
        }
        comps.push(RiccatiComponent { q_mats, q_vecs, r_vals });
    }

    Ok(RiccatiSolution {
        grid: grid.clone(),
        dim: n,
        eps,
        horizon: model.horizon(),
        log_weights: prior.weights().iter().map(|w| w.ln()).collect(),
        comps,
    })
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_components(&self) -> usize {
        self.comps.len()
    }

    /// Stored `Q` at grid node `k` for component `j` (row-major).
    pub fn q_mat(&self, j: usize, k: usize) -> &[f64] {
        &self.comps[j].q_mats[k]
    }

    pub fn q_vec(&self, j: usize, k: usize) -> &[f64] {
        &self.comps[j].q_vecs[k]
    }

    pub fn r_val(&self, j: usize, k: usize) -> f64 {
        self.comps[j].r_vals[k]
    }

    /// Interpolates `(Q, q, r)` of component `ci` at forward time `u` into
    /// the provided buffers.
    fn interpolate(&self, ci: usize, u: f64, qm: &mut [f64], qv: &mut [f64]) -> f64 {
        let grid = &self.grid;
        let pos = ((u - grid.t0) / grid.dt).clamp(0.0, grid.steps as f64);
        let idx = (pos.floor() as usize).min(grid.steps - 1);
        let w = (pos - idx as f64).clamp(0.0, 1.0);
        let comp = &self.comps[ci];
        let (m0, m1) = (&comp.q_mats[idx], &comp.q_mats[idx + 1]);
        for i in 0..qm.len() {
            qm[i] = (1.0 - w) * m0[i] + w * m1[i];
        }
        let (v0, v1) = (&comp.q_vecs[idx], &comp.q_vecs[idx + 1]);
        for i in 0..qv.len() {
            qv[i] = (1.0 - w) * v0[i] + w * v1[i];
        }
        (1.0 - w) * comp.r_vals[idx] + w * comp.r_vals[idx + 1]
    }

    /// Mixture responsibilities `p_j(x, tau)`; they sum to one.
    pub fn softmax_weights(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let m = self.comps.len();
        let n = self.dim;
        let u = (self.horizon - tau).clamp(0.0, self.grid.last());
        let mut qm = vec![0.0; n * n];
        let mut z = vec![0.0; n];
        let mut logits = vec![0.0; m];
        for ci in 0..m {
            let r = self.interpolate(ci, u, &mut qm, &mut z);
            for i in 0..n {
                z[i] = x[i] - z[i];
            }
            let d = z.clone();
            let ok = chol_solve_in_place(n, &mut qm, &mut z);
            debug_assert!(ok, "stored Riccati Q lost positive definiteness");
            let quad: f64 = d.iter().zip(&z).map(|(a, b)| a * b).sum();
            logits[ci] = self.log_weights[ci] - 0.5 * quad / self.eps - r / self.eps;
        }
        let total = log_sum_exp(&logits);
        logits.iter().map(|l| (l - total).exp()).collect()
    }

    /// Writes `(t, Q.., q.., r)` rows per component, for debugging.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim;
        write!(w, "component,t")?;
        for i in 0..n {
            for j in 0..n {
                write!(w, ",q{}{}", i + 1, j + 1)?;
            }
        }
        for i in 0..n {
            write!(w, ",qv{}", i + 1)?;
        }
        writeln!(w, ",r")?;
        for (ci, comp) in self.comps.iter().enumerate() {
            for k in 0..self.grid.n_nodes() {
                write!(w, "{},{}", ci, self.grid.node(k))?;
                for v in &comp.q_mats[k] {
                    write!(w, ",{v}")?;
                }
                for v in &comp.q_vecs[k] {
                    write!(w, ",{v}")?;
                }
                writeln!(w, ",{}", comp.r_vals[k])?;
            }
        }
        Ok(())
    }
}

impl ControlField for RiccatiSolution {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn evaluate_into(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        let n = self.dim;
        let m = self.comps.len();
        let u = (self.horizon - tau).clamp(0.0, self.grid.last());

        let mut qm_stack = [0.0; 16];
        let mut qm_heap;
        let qm: &mut [f64] = if n <= 4 {
            &mut qm_stack[..n * n]
        } else {
            qm_heap = vec![0.0; n * n];
            &mut qm_heap
        };
        let mut z_stack = [0.0; 32];
        let mut z_heap;
        // Per-component solves Q_j^{-1}(x - q_j), kept for the second pass.
        let zs: &mut [f64] = if m * n <= 32 {
            &mut z_stack[..m * n]
        } else {
            z_heap = vec![0.0; m * n];
            &mut z_heap
        };
        let mut logit_stack = [0.0; 8];
        let mut logit_heap;
        let logits: &mut [f64] = if m <= 8 {
            &mut logit_stack[..m]
        } else {
            logit_heap = vec![0.0; m];
            &mut logit_heap
        };
        let mut d_stack = [0.0; 8];
        let mut d_heap;
        let diff: &mut [f64] = if n <= 8 {
            &mut d_stack[..n]
        } else {
            d_heap = vec![0.0; n];
            &mut d_heap
        };

        let mut max_logit = f64::NEG_INFINITY;
        for ci in 0..m {
            let z = &mut zs[ci * n..(ci + 1) * n];
            let r = self.interpolate(ci, u, qm, z);
            for i in 0..n {
                diff[i] = x[i] - z[i];
                z[i] = diff[i];
            }
            let ok = chol_solve_in_place(n, qm, z);
            debug_assert!(ok, "stored Riccati Q lost positive definiteness");
            let quad: f64 = diff.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            logits[ci] = self.log_weights[ci] - 0.5 * quad / self.eps - r / self.eps;
            max_logit = max_logit.max(logits[ci]);
        }
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max_logit).exp();
            total += *l;
        }
        out.fill(0.0);
        for ci in 0..m {
            let p = logits[ci] / total;
            let z = &zs[ci * n..(ci + 1) * n];
            for i in 0..n {
                out[i] -= p * z[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::AnalyticCase;
    use crate::priors::GaussianComponent;
    use approx::assert_abs_diff_eq;

    fn single_gaussian(mean: f64, var: f64) -> GaussianMixturePrior {
        GaussianMixturePrior::single(GaussianComponent::scalar(mean, var).unwrap())
    }

    #[test]
    fn brownian_q_is_exact_under_euler() {
        // A = 0, D = I: Qdot = 1, exact for explicit Euler.
        let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 10).unwrap();
        let sol = solve_riccati(&model, &single_gaussian(0.0, 1.0), 1e-3, &grid).unwrap();
        for k in 0..=10 {
            assert_abs_diff_eq!(sol.q_mat(0, k)[0], 1.0 + grid.node(k), epsilon = 1e-12);
        }
        // Initial conditions.
        assert_abs_diff_eq!(sol.q_vec(0, 0)[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            sol.r_val(0, 0),
            0.5 * crate::priors::LN_2PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ou_q_matches_closed_form() {
        let model = SdeModel::linear(
            1,
            1.5,
            1.0,
            DMatrix::from_element(1, 1, -3.0),
            DVector::zeros(1),
        )
        .unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 100).unwrap();
        let sol = solve_riccati(&model, &single_gaussian(0.0, 1.0), 1e-4, &grid).unwrap();
        let closed = |t: f64| (-6.0 * t).exp() / 1.5 + (1.0 - (-6.0 * t).exp()) / 6.0;
        for k in [1, 10, 50, 100] {
            let t = grid.node(k);
            let got = sol.q_mat(0, k)[0];
            let want = closed(t);
            assert!(
                ((got - want) / want).abs() <= 1e-3,
                "Q({t}) = {got}, closed form {want}"
            );
        }
    }

    #[test]
    fn zero_forcing_keeps_q_vec_zero() {
        let model = SdeModel::linear(
            1,
            1.0,
            1.0,
            DMatrix::from_element(1, 1, -2.0),
            DVector::zeros(1),
        )
        .unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 20).unwrap();
        let sol = solve_riccati(&model, &single_gaussian(0.0, 1.0), 1e-3, &grid).unwrap();
        for k in 0..=20 {
            assert_eq!(sol.q_vec(0, k)[0], 0.0);
        }
    }

    #[test]
    fn control_reduces_to_analytic_gaussian() {
        let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 100).unwrap();
        let sol = solve_riccati(&model, &single_gaussian(0.0, 1.0), 1e-4, &grid).unwrap();
        assert_abs_diff_eq!(sol.evaluate(&[2.0], 0.0)[0], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn duplicate_components_match_single() {
        let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 50).unwrap();
        let single = solve_riccati(&model, &single_gaussian(0.3, 0.7), 1e-3, &grid).unwrap();
        let dup = GaussianMixturePrior::new(
            vec![
                GaussianComponent::scalar(0.3, 0.7).unwrap(),
                GaussianComponent::scalar(0.3, 0.7).unwrap(),
            ],
            vec![0.25, 0.75],
        )
        .unwrap();
        let dup = solve_riccati(&model, &dup, 1e-3, &grid).unwrap();
        for x in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            for tau in [0.0, 0.4, 0.9] {
                assert_abs_diff_eq!(
                    single.evaluate(&[x], tau)[0],
                    dup.evaluate(&[x], tau)[0],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn symmetric_mixture_control_vanishes_at_origin() {
        let model = SdeModel::brownian(1, 0.5, 1.0).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 50).unwrap();
        let prior = GaussianMixturePrior::new(
            vec![
                GaussianComponent::scalar(-1.25, 0.4).unwrap(),
                GaussianComponent::scalar(1.25, 0.4).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let sol = solve_riccati(&model, &prior, 1e-3, &grid).unwrap();
        for tau in [0.0, 0.3, 0.8] {
            assert_abs_diff_eq!(sol.evaluate(&[0.0], tau)[0], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_control_agrees_with_analytic() {
        let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
        let prior = GaussianMixturePrior::new(
            vec![
                GaussianComponent::scalar(-2.0, 0.64).unwrap(),
                GaussianComponent::scalar(0.0, 0.25).unwrap(),
                GaussianComponent::scalar(2.0, 0.36).unwrap(),
            ],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let case = AnalyticCase::brownian_gaussian_mixture(&model, &prior).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 1000).unwrap();
        let sol = solve_riccati(&model, &prior, 1e-4, &grid).unwrap();
        let mut worst = 0.0f64;
        for i in 0..100 {
            let x = -4.0 + 8.0 * i as f64 / 99.0;
            for j in 0..10 {
                let tau = j as f64 / 10.0;
                let a = case.control(&[x], tau)[0];
                let b = sol.evaluate(&[x], tau)[0];
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-3, "max control discrepancy {worst}");
    }

    #[test]
    fn softmax_weights_normalized() {
        let model = SdeModel::brownian(1, 0.05, 1.0).unwrap();
        let prior = GaussianMixturePrior::new(
            vec![
                GaussianComponent::scalar(-0.5, 0.04).unwrap(),
                GaussianComponent::scalar(0.5, 0.04).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 100).unwrap();
        let sol = solve_riccati(&model, &prior, 1e-3, &grid).unwrap();
        for x in [-30.0, -1.0, 0.0, 0.4, 25.0] {
            for tau in [0.0, 0.5, 0.99] {
                let w = sol.softmax_weights(&[x], tau);
                let sum: f64 = w.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "weights sum {sum} at x = {x}");
                assert!(w.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn stored_q_stays_symmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]);
        let model = SdeModel::linear(2, 5.0, 1.0, a, DVector::zeros(2)).unwrap();
        let prior = GaussianMixturePrior::single(
            GaussianComponent::new(
                DVector::from_row_slice(&[-0.7, 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 0.16]),
            )
            .unwrap(),
        );
        let grid = TimeGrid::span(0.0, 1.0, 100).unwrap();
        let sol = solve_riccati(&model, &prior, 1e-4, &grid).unwrap();
        for k in 0..=100 {
            let q = sol.q_mat(0, k);
            let gap = (q[1] - q[2]).abs();
            assert!(gap <= 1e-10, "asymmetry {gap} at node {k}");
        }
    }

    #[test]
    fn spd_loss_is_fatal_with_location() {
        // A large positive feedback with a coarse step sends Q negative.
        let model = SdeModel::linear(
            1,
            1.0,
            1.0,
            DMatrix::from_element(1, 1, -100.0),
            DVector::zeros(1),
        )
        .unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 10).unwrap();
        let err = solve_riccati(&model, &single_gaussian(0.0, 1.0), 0.1, &grid).unwrap_err();
        assert!(matches!(err, Error::RiccatiSpd { component: 0, .. }), "got {err:?}");
    }

    #[test]
    fn step_size_preconditions() {
        let model = SdeModel::brownian(1, 1.0, 1.0).unwrap();
        let grid = TimeGrid::span(0.0, 1.0, 10).unwrap();
        assert!(solve_riccati(&model, &single_gaussian(0.0, 1.0), 0.3, &grid).is_err());
        assert!(solve_riccati(&model, &single_gaussian(0.0, 1.0), 0.03, &grid).is_err());
    }
}
