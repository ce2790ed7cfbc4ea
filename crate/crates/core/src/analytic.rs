//! Closed-form controls and exact posteriors for the analytically solvable
//! cases: scaled Brownian motion with a Gaussian-mixture prior, 1D scaled
//! Brownian motion with a uniform-mixture prior, and the 1D
//! Ornstein-Uhlenbeck process with a Gaussian prior.
//!
//! In each case the forward marginal `P(Y_t = x)` is available in closed
//! form, the control is `grad_x S(x, tau) = eps * grad_x log P(Y_{T-tau} = x)`,
//! and `P(Y_t | Y_s = y)` is known exactly. These cases back the
//! analytic sampler backend and every ground-truth metric.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::{erf, erf_inv, erfc};

use crate::error::{Error, Result};
use crate::models::{Drift, LinearDrift, SdeModel};
use crate::priors::{
    log_sum_exp, GaussianComponent, GaussianMixturePrior, Prior, UniformMixturePrior, LN_2PI,
};
use crate::sampler::ControlField;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Near the prior time a compactly supported prior steepens the control at
/// interval edges; magnitudes are clamped here instead of overflowing.
const CONTROL_CLAMP: f64 = 1e6;

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `Phi(za) - Phi(zb)` for `za >= zb`, evaluated through the complementary
/// error function in either tail to avoid cancellation.
fn phi_interval(za: f64, zb: f64) -> f64 {
    debug_assert!(za >= zb);
    if zb >= 0.0 {
        0.5 * (erfc(zb / SQRT_2) - erfc(za / SQRT_2))
    } else if za <= 0.0 {
        0.5 * (erfc(-za / SQRT_2) - erfc(-zb / SQRT_2))
    } else {
        0.5 * (erf(za / SQRT_2) + erf(-zb / SQRT_2))
    }
}

fn log_normal_pdf_1d(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + var.ln() + LN_2PI)
}

fn check_identity_noise(model: &SdeModel) -> Result<()> {
    if !model.is_identity_noise() {
        return Err(Error::Unsupported(
            "analytic cases require identity noise scaling".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Brownian motion + Gaussian mixture prior
// ---------------------------------------------------------------------------

/// One mixture component with the eigendecomposition of its covariance,
/// so `(Sigma + eps*t*I)^{-1}` costs O(n^2) per query without factorization.
#[derive(Debug, Clone)]
struct EigComponent {
    mean: Vec<f64>,
    /// Row-major eigenvector matrix; columns are eigenvectors.
    u: Vec<f64>,
    lambda: Vec<f64>,
    cov: DMatrix<f64>,
    log_w: f64,
}

#[derive(Debug, Clone)]
pub struct BrownianGaussianMixture {
    dim: usize,
    eps: f64,
    horizon: f64,
    comps: Vec<EigComponent>,
}

impl BrownianGaussianMixture {
    fn new(model: &SdeModel, prior: &GaussianMixturePrior) -> Result<Self> {
        if !matches!(model.drift(), Drift::Zero) {
            return Err(Error::Precondition(
                "Brownian Gaussian-mixture case requires zero drift".into(),
            ));
        }
        check_identity_noise(model)?;
        if prior.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: prior.dim() });
        }
        let n = model.dim();
        let comps = prior
            .components()
            .iter()
            .zip(prior.weights())
            .map(|(c, w)| {
                let eig = SymmetricEigen::new(c.cov().clone());
                let mut u = vec![0.0; n * n];
                for r in 0..n {
                    for k in 0..n {
                        u[r * n + k] = eig.eigenvectors[(r, k)];
                    }
                }
                EigComponent {
                    mean: c.mean().as_slice().to_vec(),
                    u,
                    lambda: eig.eigenvalues.as_slice().to_vec(),
                    cov: c.cov().clone(),
                    log_w: w.ln(),
                }
            })
            .collect();
        Ok(Self { dim: n, eps: model.epsilon(), horizon: model.horizon(), comps })
    }

    /// Log-likelihood of one component's marginal at forward time `t`,
    /// writing the whitened residual into `y`.
    fn component_logits(&self, x: &[f64], t: f64, ci: usize, y: &mut [f64]) -> f64 {
        let n = self.dim;
        let c = &self.comps[ci];
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for k in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                acc += c.u[r * n + k] * (x[r] - c.mean[r]);
            }
            y[k] = acc;
            let d = c.lambda[k] + self.eps * t;
            quad += acc * acc / d;
            log_det += d.ln();
        }
        c.log_w - 0.5 * quad - 0.5 * log_det
    }

    /// `log P(Y_t = x)`.
    pub fn log_marginal(&self, x: &[f64], t: f64) -> f64 {
        let n = self.dim;
        let mut y_stack = [0.0; 8];
        let mut y_heap;
        let y: &mut [f64] = if n <= 8 {
            &mut y_stack[..n]
        } else {
            y_heap = vec![0.0; n];
            &mut y_heap
        };
        let logits: Vec<f64> =
            (0..self.comps.len()).map(|ci| self.component_logits(x, t, ci, y)).collect();
        log_sum_exp(&logits) - 0.5 * n as f64 * LN_2PI
    }

    fn control_at_forward_time(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = self.dim;
        let m = self.comps.len();

        let mut y_stack = [0.0; 8];
        let mut y_heap;
        let y: &mut [f64] = if n <= 8 {
            &mut y_stack[..n]
        } else {
            y_heap = vec![0.0; n];
            &mut y_heap
        };
        let mut logit_stack = [0.0; 8];
        let mut logit_heap;
        let logits: &mut [f64] = if m <= 8 {
            &mut logit_stack[..m]
        } else {
            logit_heap = vec![0.0; m];
            &mut logit_heap
        };

        let mut max_logit = f64::NEG_INFINITY;
        for ci in 0..m {
            logits[ci] = self.component_logits(x, t, ci, y);
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
            if p == 0.0 {
                continue;
            }
            let c = &self.comps[ci];
            for k in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += c.u[r * n + k] * (x[r] - c.mean[r]);
                }
                y[k] = acc / (c.lambda[k] + self.eps * t);
            }
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += c.u[i * n + k] * y[k];
                }
                out[i] -= self.eps * p * acc;
            }
        }
    }

    fn posterior(&self, t: f64, s: f64, y_obs: &[f64]) -> Result<PosteriorGaussianMixture> {
        let n = self.dim;
        let c_prec = 1.0 / (self.eps * (s - t));
        let y_vec = DVector::from_row_slice(y_obs);
        let mut means = Vec::with_capacity(self.comps.len());
        let mut covs = Vec::with_capacity(self.comps.len());
        let mut log_w = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let theta = DVector::from_row_slice(&c.mean);
            let b = &c.cov + DMatrix::identity(n, n) * (self.eps * t);
            let b_chol = b
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotSpd("smoothed prior covariance".into()))?;
            let b_inv = b_chol.inverse();
            let precision = &b_inv + DMatrix::identity(n, n) * c_prec;
            let m = precision
                .cholesky()
                .ok_or_else(|| Error::NotSpd("posterior precision".into()))?
                .inverse();
            let v = &m * (&b_inv * &theta + &y_vec * c_prec);
            // Evidence of this component at the observation time.
            let evid_cov = &c.cov + DMatrix::identity(n, n) * (self.eps * s);
            let ev_chol = evid_cov
                .cholesky()
                .ok_or_else(|| Error::NotSpd("evidence covariance".into()))?;
            let diff = &y_vec - &theta;
            let z = ev_chol.l().solve_lower_triangular(&diff).expect("triangular solve");
            let log_det: f64 = ev_chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            log_w.push(c.log_w - 0.5 * (z.norm_squared() + log_det + n as f64 * LN_2PI));
            means.push(v);
            covs.push(m);
        }
        PosteriorGaussianMixture::from_logits(means, covs, log_w)
    }
}

// ---------------------------------------------------------------------------
// 1D Brownian motion + uniform mixture prior
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BrownianUniformMixture {
    eps: f64,
    horizon: f64,
    intervals: Vec<(f64, f64)>,
    /// `w_j / (b_j - a_j)` per interval.
    coeffs: Vec<f64>,
}

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

impl BrownianUniformMixture {
    fn new(model: &SdeModel, prior: &UniformMixturePrior) -> Result<Self> {
        if !matches!(model.drift(), Drift::Zero) {
            return Err(Error::Precondition(
                "Brownian uniform-mixture case requires zero drift".into(),
            ));
        }
        check_identity_noise(model)?;
        if model.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: model.dim() });
        }
        let coeffs = prior
            .intervals()
            .iter()
            .zip(prior.weights())
            .map(|((a, b), w)| w / (b - a))
            .collect();
        Ok(Self {
            eps: model.epsilon(),
            horizon: model.horizon(),
            intervals: prior.intervals().to_vec(),
            coeffs,
        })
    }

    /// `log P(Y_t = x)`.
    pub fn log_marginal(&self, x: &[f64], t: f64) -> f64 {
        let m = self.marginal_density(x[0], t);
        if m > 0.0 {
            m.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn marginal_density(&self, x: f64, t: f64) -> f64 {
        let sigma = (self.eps * t).sqrt();
        let mut den = 0.0;
        for ((a, b), c) in self.intervals.iter().zip(&self.coeffs) {
            let za = (x - a) / sigma;
            let zb = (x - b) / sigma;
            den += c * phi_interval(za, zb);
        }
        den
    }

    fn control_at_forward_time(&self, x: f64, t: f64) -> f64 {
        let t = t.max(f64::MIN_POSITIVE);
        let sigma = (self.eps * t).sqrt();
        let mut den = 0.0;
        let mut num = 0.0;
        for ((a, b), c) in self.intervals.iter().zip(&self.coeffs) {
            let za = (x - a) / sigma;
            let zb = (x - b) / sigma;
            den += c * phi_interval(za, zb);
            num += c * ((-0.5 * za * za).exp() - (-0.5 * zb * zb).exp());
        }
        let raw = if den > 0.0 {
            (self.eps / (2.0 * std::f64::consts::PI * t)).sqrt() * num / den
        } else {
            // Deep tail: both Phi differences underflow. The Mills-ratio
            // limit of the control is a pull toward the nearest edge.
            let mut best = f64::INFINITY;
            let mut target = x;
            for (a, b) in &self.intervals {
                if x < *a && a - x < best {
                    best = a - x;
                    target = *a;
                } else if x > *b && x - b < best {
                    best = x - b;
                    target = *b;
                }
            }
            (target - x) / t
        };
        if raw.abs() > CONTROL_CLAMP || !raw.is_finite() {
            if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "uniform-mixture control clamped to magnitude {CONTROL_CLAMP} (x = {x}, t = {t})"
                );
            }
            if raw.is_nan() {
                return 0.0;
            }
            return raw.signum() * CONTROL_CLAMP;
        }
        raw
    }

    fn posterior(&self, t: f64, s: f64, y_obs: f64) -> Result<ExactPosterior> {
        if t == 0.0 {
            // Mixture of Gaussians truncated to the prior intervals.
            let sigma2 = self.eps * s;
            let sigma = sigma2.sqrt();
            let mut log_masses = Vec::with_capacity(self.intervals.len());
            for ((a, b), c) in self.intervals.iter().zip(&self.coeffs) {
                let za = (b - y_obs) / sigma;
                let zb = (a - y_obs) / sigma;
                let p = phi_interval(za, zb);
                log_masses.push(c.ln() + p.max(f64::MIN_POSITIVE).ln());
            }
            let total = log_sum_exp(&log_masses);
            let weights: Vec<f64> = log_masses.iter().map(|l| (l - total).exp()).collect();
            Ok(ExactPosterior::TruncatedGaussianMixture1d(TruncatedGaussianMixture1d {
                center: y_obs,
                var: sigma2,
                intervals: self.intervals.clone(),
                coeffs: self.coeffs.clone(),
                weights,
            }))
        } else {
            // Smooth density: marginal at t times the Gaussian transition,
            // normalized on a quadrature grid.
            let var = self.eps * (s - t);
            let log_pdf = |theta: f64| -> f64 {
                self.log_marginal(&[theta], t) + log_normal_pdf_1d(y_obs, theta, var)
            };
            let lo = self
                .intervals
                .iter()
                .map(|(a, _)| *a)
                .fold(y_obs, f64::min)
                - 8.0 * (self.eps * s).sqrt();
            let hi = self
                .intervals
                .iter()
                .map(|(_, b)| *b)
                .fold(y_obs, f64::max)
                + 8.0 * (self.eps * s).sqrt();
            Ok(ExactPosterior::Grid1d(PosteriorGrid1d::build(log_pdf, lo, hi)?))
        }
    }
}

// ---------------------------------------------------------------------------
// 1D Ornstein-Uhlenbeck + Gaussian prior
// ---------------------------------------------------------------------------

/// `dY = -B Y dt + sqrt(eps) dW` with `B > 0` and prior `N(theta, sigma^2)`.
#[derive(Debug, Clone)]
pub struct Ou1dGaussian {
    eps: f64,
    horizon: f64,
    b: f64,
    theta: f64,
    sigma2: f64,
}

impl Ou1dGaussian {
    fn new(model: &SdeModel, prior: &GaussianMixturePrior) -> Result<Self> {
        check_identity_noise(model)?;
        if model.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: model.dim() });
        }
        if prior.components().len() != 1 {
            return Err(Error::Precondition("OU analytic case requires a single Gaussian prior".into()));
        }
        let a_scalar = match model.drift() {
            Drift::Linear(LinearDrift::Constant { a, beta }) if beta.amax() == 0.0 => a[(0, 0)],
            _ => {
                return Err(Error::Precondition(
                    "OU analytic case requires constant linear drift A x with beta = 0".into(),
                ))
            }
        };
        if !(a_scalar < 0.0) {
            return Err(Error::Precondition(format!(
                "OU analytic case requires A < 0 (mean reversion), got {a_scalar}"
            )));
        }
        let comp = &prior.components()[0];
        Ok(Self {
            eps: model.epsilon(),
            horizon: model.horizon(),
            b: -a_scalar,
            theta: comp.mean()[0],
            sigma2: comp.cov()[(0, 0)],
        })
    }

    /// `Q(t)` of the Riccati representation; the marginal variance is
    /// `eps * Q(t)`.
    pub fn q_mat(&self, t: f64) -> f64 {
        let e = (-2.0 * self.b * t).exp();
        e * self.sigma2 / self.eps + (1.0 - e) / (2.0 * self.b)
    }

    /// Marginal mean `q(t) = e^{-B t} theta`.
    pub fn q_vec(&self, t: f64) -> f64 {
        (-self.b * t).exp() * self.theta
    }

    /// `log P(Y_t = x)`.
    pub fn log_marginal(&self, x: &[f64], t: f64) -> f64 {
        log_normal_pdf_1d(x[0], self.q_vec(t), self.eps * self.q_mat(t))
    }

    fn control_at_forward_time(&self, x: f64, t: f64) -> f64 {
        -(x - self.q_vec(t)) / self.q_mat(t)
    }

    fn posterior(&self, t: f64, s: f64, y_obs: f64) -> Result<PosteriorGaussianMixture> {
        let b = self.b;
        let eps = self.eps;
        let sigma2 = self.sigma2;
        let den = eps * (1.0 - (-2.0 * b * s).exp()) + 2.0 * b * sigma2 * (-2.0 * b * s).exp();
        let mean = (eps * ((-b * t).exp() - (b * (t - 2.0 * s)).exp()) * self.theta
            + 2.0 * b * sigma2 * (-b * (s + t)).exp() * y_obs
            + eps * ((-b * (s - t)).exp() - (-b * (s + t)).exp()) * y_obs)
            / den;
        let var = eps
            * (sigma2 * (-2.0 * b * t).exp() + eps * (1.0 - (-2.0 * b * t).exp()) / (2.0 * b))
            * (1.0 - (-2.0 * b * (s - t)).exp())
            / den;
        PosteriorGaussianMixture::from_logits(
            vec![DVector::from_element(1, mean)],
            vec![DMatrix::from_element(1, 1, var)],
            vec![0.0],
        )
    }
}

// ---------------------------------------------------------------------------
// Case dispatch
// ---------------------------------------------------------------------------

/// A (model, prior) pair with closed-form marginals, control, and posterior.
#[derive(Debug, Clone)]
pub enum AnalyticCase {
    BrownianGaussianMixture(BrownianGaussianMixture),
    BrownianUniformMixture(BrownianUniformMixture),
    Ou1dGaussian(Ou1dGaussian),
}

impl AnalyticCase {
    pub fn brownian_gaussian_mixture(
        model: &SdeModel,
        prior: &GaussianMixturePrior,
    ) -> Result<Self> {
        Ok(AnalyticCase::BrownianGaussianMixture(BrownianGaussianMixture::new(model, prior)?))
    }

    pub fn brownian_uniform_mixture(
        model: &SdeModel,
        prior: &UniformMixturePrior,
    ) -> Result<Self> {
        Ok(AnalyticCase::BrownianUniformMixture(BrownianUniformMixture::new(model, prior)?))
    }

    pub fn ou1d_gaussian(model: &SdeModel, prior: &GaussianMixturePrior) -> Result<Self> {
        Ok(AnalyticCase::Ou1dGaussian(Ou1dGaussian::new(model, prior)?))
    }

    /// The analytic case matching a (model, prior) pair, if one exists.
    pub fn for_model_and_prior(model: &SdeModel, prior: &Prior) -> Option<Self> {
        match (model.drift(), prior) {
            (Drift::Zero, Prior::GaussianMixture(p)) => {
                Self::brownian_gaussian_mixture(model, p).ok()
            }
            (Drift::Zero, Prior::UniformMixture(p)) => {
                Self::brownian_uniform_mixture(model, p).ok()
            }
            (Drift::Linear(_), Prior::GaussianMixture(p)) => Self::ou1d_gaussian(model, p).ok(),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticCase::BrownianGaussianMixture(c) => c.dim,
            AnalyticCase::BrownianUniformMixture(_) => 1,
            AnalyticCase::Ou1dGaussian(_) => 1,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            AnalyticCase::BrownianGaussianMixture(c) => c.horizon,
            AnalyticCase::BrownianUniformMixture(c) => c.horizon,
            AnalyticCase::Ou1dGaussian(c) => c.horizon,
        }
    }

    /// Closed-form `log P(Y_t = x)` at forward time `t`.
    pub fn log_marginal(&self, x: &[f64], t: f64) -> f64 {
        match self {
            AnalyticCase::BrownianGaussianMixture(c) => c.log_marginal(x, t),
            AnalyticCase::BrownianUniformMixture(c) => c.log_marginal(x, t),
            AnalyticCase::Ou1dGaussian(c) => c.log_marginal(x, t),
        }
    }

    /// `grad_x S(x, tau)`, the control of the reverse sampler.
    pub fn control(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(x, tau, &mut out);
        out
    }

    /// Exact law of `Y_t | Y_s = y_obs` for `0 <= t < s <= T`.
    pub fn exact_posterior(&self, t: f64, s: f64, y_obs: &[f64]) -> Result<ExactPosterior> {
        if !(t >= 0.0 && t < s) {
            return Err(Error::Precondition(format!("need 0 <= t < s, got t = {t}, s = {s}")));
        }
        if s > self.horizon() + 1e-12 {
            return Err(Error::Precondition(format!(
                "observation time {s} exceeds horizon {}",
                self.horizon()
            )));
        }
        if y_obs.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y_obs.len() });
        }
        match self {
            AnalyticCase::BrownianGaussianMixture(c) => {
                Ok(ExactPosterior::GaussianMixture(c.posterior(t, s, y_obs)?))
            }
            AnalyticCase::BrownianUniformMixture(c) => c.posterior(t, s, y_obs[0]),
            AnalyticCase::Ou1dGaussian(c) => {
                Ok(ExactPosterior::GaussianMixture(c.posterior(t, s, y_obs[0])?))
            }
        }
    }
}

impl ControlField for AnalyticCase {
    fn dim(&self) -> usize {
        AnalyticCase::dim(self)
    }

    fn horizon(&self) -> f64 {
        AnalyticCase::horizon(self)
    }

    fn evaluate_into(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        let t = (self.horizon() - tau).max(0.0);
        match self {
            AnalyticCase::BrownianGaussianMixture(c) => c.control_at_forward_time(x, t, out),
            AnalyticCase::BrownianUniformMixture(c) => {
                out[0] = c.control_at_forward_time(x[0], t)
            }
            AnalyticCase::Ou1dGaussian(c) => out[0] = c.control_at_forward_time(x[0], t),
        }
    }
}

// ---------------------------------------------------------------------------
// Exact posteriors
// ---------------------------------------------------------------------------

/// Gaussian-mixture posterior with SPD component covariances.
#[derive(Debug, Clone)]
pub struct PosteriorGaussianMixture {
    weights: Vec<f64>,
    comps: Vec<GaussianComponent>,
}

impl PosteriorGaussianMixture {
    fn from_logits(
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        log_w: Vec<f64>,
    ) -> Result<Self> {
        let total = log_sum_exp(&log_w);
        let weights: Vec<f64> = log_w.iter().map(|l| (l - total).exp()).collect();
        let comps = means
            .into_iter()
            .zip(covs)
            .map(|(m, c)| {
                // Re-symmetrize before the SPD check; the inverse of an
                // inverse picks up round-off skew.
                let c = (&c + c.transpose()) * 0.5;
                GaussianComponent::new(m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights, comps })
    }

    /// Posterior with explicit components; covariances must be SPD.
    pub fn new(
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let log_w = weights.iter().map(|w| w.ln()).collect();
        Self::from_logits(means, covs, log_w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.comps
    }

    pub fn dim(&self) -> usize {
        self.comps[0].dim()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        for (w, c) in self.weights.iter().zip(&self.comps) {
            for i in 0..n {
                out[i] += w * c.mean()[i];
            }
        }
        out
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.comps)
            .map(|(w, c)| w.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.comps.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.comps[pick].sample_into(rng, out);
    }
}

/// 1D mixture of Gaussians truncated to the prior's intervals;
/// the `t = 0` posterior of the uniform-mixture case.
#[derive(Debug, Clone)]
pub struct TruncatedGaussianMixture1d {
    center: f64,
    var: f64,
    intervals: Vec<(f64, f64)>,
    coeffs: Vec<f64>,
    weights: Vec<f64>,
}

impl TruncatedGaussianMixture1d {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let mut coeff = 0.0;
        for ((a, b), c) in self.intervals.iter().zip(&self.coeffs) {
            if *a <= x && x < *b {
                coeff += c;
            }
        }
        if coeff == 0.0 {
            return f64::NEG_INFINITY;
        }
        // Normalizer: sum of coeff * interval mass.
        let sigma = self.var.sqrt();
        let z: f64 = self
            .intervals
            .iter()
            .zip(&self.coeffs)
            .map(|((a, b), c)| {
                c * phi_interval((b - self.center) / sigma, (a - self.center) / sigma)
            })
            .sum();
        coeff.ln() + log_normal_pdf_1d(x, self.center, self.var) - z.ln()
    }

    fn sample_one(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let (a, b) = self.intervals[pick];
        let sigma = self.var.sqrt();
        let fa = norm_cdf((a - self.center) / sigma);
        let fb = norm_cdf((b - self.center) / sigma);
        let v: f64 = rng.random();
        let target = fa + v * (fb - fa);
        let x = self.center + sigma * SQRT_2 * erf_inv(2.0 * target - 1.0);
        x.clamp(a, b)
    }
}

/// Tabulated 1D posterior (density and CDF on a quadrature grid) for cases
/// without a closed-form family; supports pointwise evaluation and
/// inverse-CDF sampling.
#[derive(Debug, Clone)]
pub struct PosteriorGrid1d {
    xs: Vec<f64>,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
}

impl PosteriorGrid1d {
    pub const POINTS: usize = 4096;

    /// Two-pass build: a coarse scan locates the posterior mean and spread,
    /// then the final grid spans mean +- 8 standard deviations.
    pub fn build(log_pdf: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<Self> {
        let coarse = Self::tabulate(&log_pdf, lo, hi, 1024)?;
        let (mean, std) = coarse.moments();
        let span = 8.0 * std;
        Self::tabulate(&log_pdf, mean - span, mean + span, Self::POINTS)
    }

    fn tabulate(log_pdf: &impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<Self> {
        let h = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
        let logs: Vec<f64> = xs.iter().map(|x| log_pdf(*x)).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::NonFiniteValue("posterior grid: density vanished".into()));
        }
        let mut pdf: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * (pdf[i - 1] + pdf[i]) * h;
        }
        let total = cdf[n - 1];
        if !(total > 0.0) {
            return Err(Error::NonFiniteValue("posterior grid: zero mass".into()));
        }
        for v in pdf.iter_mut() {
            *v /= total;
        }
        for v in cdf.iter_mut() {
            *v /= total;
        }
        Ok(Self { xs, pdf, cdf })
    }

    fn moments(&self) -> (f64, f64) {
        let n = self.xs.len();
        let h = self.xs[1] - self.xs[0];
        let mut mean = 0.0;
        for i in 0..n {
            mean += self.xs[i] * self.pdf[i] * h;
        }
        let mut var = 0.0;
        for i in 0..n {
            let d = self.xs[i] - mean;
            var += d * d * self.pdf[i] * h;
        }
        (mean, var.max(1e-300).sqrt())
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] || x > self.xs[n - 1] {
            return f64::NEG_INFINITY;
        }
        let h = self.xs[1] - self.xs[0];
        let pos = (x - self.xs[0]) / h;
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        let p = (1.0 - frac) * self.pdf[i] + frac * self.pdf[i + 1];
        if p > 0.0 {
            p.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample_one(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|c| *c < u);
        if idx == 0 {
            return self.xs[0];
        }
        if idx >= self.cdf.len() {
            return *self.xs.last().unwrap();
        }
        let c0 = self.cdf[idx - 1];
        let c1 = self.cdf[idx];
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 1.0 };
        self.xs[idx - 1] + frac * (self.xs[idx] - self.xs[idx - 1])
    }
}

/// Representation of `P(Y_t | Y_s = y_obs)` for an analytic case.
#[derive(Debug, Clone)]
pub enum ExactPosterior {
    GaussianMixture(PosteriorGaussianMixture),
    TruncatedGaussianMixture1d(TruncatedGaussianMixture1d),
    Grid1d(PosteriorGrid1d),
}

impl ExactPosterior {
    pub fn dim(&self) -> usize {
        match self {
            ExactPosterior::GaussianMixture(p) => p.dim(),
            _ => 1,
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            ExactPosterior::GaussianMixture(p) => p.log_pdf(x),
            ExactPosterior::TruncatedGaussianMixture1d(p) => p.log_pdf(x[0]),
            ExactPosterior::Grid1d(p) => p.log_pdf(x[0]),
        }
    }

    /// `count` i.i.d. draws, deterministic given `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Array2<f64> {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::<f64>::zeros((count, n));
        let mut row = vec![0.0; n];
        for j in 0..count {
            match self {
                ExactPosterior::GaussianMixture(p) => p.sample_into(&mut rng, &mut row),
                ExactPosterior::TruncatedGaussianMixture1d(p) => row[0] = p.sample_one(&mut rng),
                ExactPosterior::Grid1d(p) => row[0] = p.sample_one(&mut rng),
            }
            out.row_mut(j).iter_mut().zip(&row).for_each(|(o, v)| *o = *v);
        }
        out
    }
}
