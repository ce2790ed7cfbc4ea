//! Prior laws of the initial state `Y_0`.
//!
//! Every prior can be sampled; Gaussian mixtures, uniform mixtures, and
//! log-normals also expose densities (mixtures always in log-sum-exp form:
//! the ratio form underflows once `|x|` is moderately large and `eps` small).
//! The function-series prior only ever feeds the sample-based backend, so it
//! carries no density.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Numerically stable `log(sum(exp(v)))`.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Single Gaussian `N(mean, cov)` with SPD covariance.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: cov.nrows() });
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::NotSpd(format!("covariance asymmetry {asym} exceeds 1e-12")));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::NotSpd("covariance Cholesky factorization failed".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (n as f64 * LN_2PI + log_det);
        Ok(Self { mean, cov, chol, log_norm })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = DVector::from_row_slice(x) - &self.mean;
        let z = self.chol.l().solve_lower_triangular(&d).expect("cholesky solve");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let x = &self.mean + self.chol.l() * z;
        out.copy_from_slice(x.as_slice());
    }
}

/// Convex combination of Gaussian components.
#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
}

impl GaussianMixturePrior {
    pub fn new(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                got: weights.len(),
            });
        }
        let n = components[0].dim();
        if components.iter().any(|c| c.dim() != n) {
            return Err(Error::InvalidInput("mixture components disagree on dimension".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components, weights })
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self { components: vec![component], weights: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    fn pick_component(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return j;
            }
        }
        self.weights.len() - 1
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let j = self.pick_component(rng);
        self.components[j].sample_into(rng, out);
    }
}

/// 1D mixture of uniform laws on half-open intervals `[a_j, b_j)`.
#[derive(Debug, Clone)]
pub struct UniformMixturePrior {
    intervals: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl UniformMixturePrior {
    pub fn new(intervals: Vec<(f64, f64)>, weights: Vec<f64>) -> Result<Self> {
        if intervals.is_empty() || intervals.len() != weights.len() {
            return Err(Error::InvalidInput("intervals/weights must be nonempty and equal length".into()));
        }
        if intervals.iter().any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidInput("each interval must satisfy a < b".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("weights must be positive and sum to 1".into()));
        }
        Ok(Self { intervals, weights })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .intervals
            .iter()
            .zip(&self.weights)
            .filter(|((a, b), _)| *a <= x && x < *b)
            .map(|((a, b), w)| w.ln() - (b - a).ln())
            .collect();
        if terms.is_empty() {
            f64::NEG_INFINITY
        } else {
            log_sum_exp(&terms)
        }
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let (a, b) = self.intervals[j];
        let dist = Uniform::new(a, b).expect("valid interval");
        out[0] = dist.sample(rng);
    }
}

/// Coordinate-wise independent log-normal prior: `ln x_i ~ N(mu_i, s_i^2)`.
#[derive(Debug, Clone)]
pub struct LogNormalPrior {
    location: Vec<f64>,
    scale: Vec<f64>,
}

impl LogNormalPrior {
    pub fn new(location: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if location.is_empty() || location.len() != scale.len() {
            return Err(Error::InvalidInput("location/scale must be nonempty and equal length".into()));
        }
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput("log-normal scales must be positive".into()));
        }
        Ok(Self { location, scale })
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            if x[i] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let z = (x[i].ln() - self.location[i]) / self.scale[i];
            acc += -x[i].ln() - self.scale[i].ln() - 0.5 * LN_2PI - 0.5 * z * z;
        }
        acc
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        for i in 0..self.dim() {
            let z: f64 = StandardNormal.sample(rng);
            out[i] = (self.location[i] + self.scale[i] * z).exp();
        }
    }
}

/// Random sine series evaluated on a uniform grid of `[0, 1]`:
/// `f(x) = (1/16) * sum_{j=1..8} xi_j sin(j pi x)` with `xi_j` i.i.d. `U[1, 3)`.
#[derive(Debug, Clone)]
pub struct FunctionSeriesPrior {
    grid: Vec<f64>,
}

impl FunctionSeriesPrior {
    pub const N_TERMS: usize = 8;

    /// Uniform grid with `points` nodes including both endpoints of `[0, 1]`.
    pub fn uniform_grid(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidInput("need at least two grid points".into()));
        }
        let grid = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
        Ok(Self { grid })
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let dist = Uniform::new(1.0, 3.0).expect("valid range");
        let coeffs: Vec<f64> = (0..Self::N_TERMS).map(|_| dist.sample(rng)).collect();
        for (i, &x) in self.grid.iter().enumerate() {
            let mut acc = 0.0;
            for (j, c) in coeffs.iter().enumerate() {
                acc += c * ((j + 1) as f64 * std::f64::consts::PI * x).sin();
            }
            out[i] = acc / 16.0;
        }
    }
}

/// Any supported prior law of `Y_0`.
#[derive(Debug, Clone)]
pub enum Prior {
    GaussianMixture(GaussianMixturePrior),
    UniformMixture(UniformMixturePrior),
    LogNormal(LogNormalPrior),
    FunctionSeries(FunctionSeriesPrior),
}

impl Prior {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Ok(Prior::GaussianMixture(GaussianMixturePrior::single(GaussianComponent::new(
            mean, cov,
        )?)))
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::GaussianMixture(p) => p.dim(),
            Prior::UniformMixture(_) => 1,
            Prior::LogNormal(p) => p.dim(),
            Prior::FunctionSeries(p) => p.dim(),
        }
    }

    /// `count` i.i.d. draws, deterministic given `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Array2<f64>> {
        if count == 0 {
            return Err(Error::Precondition("sample count must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with_rng(count, &mut rng)
    }

    /// Draws from an explicit stream; concurrent callers should pass
    /// disjoint streams.
    pub fn sample_with_rng(&self, count: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
        let n = self.dim();
        let mut out = Array2::<f64>::zeros((count, n));
        let mut row = vec![0.0; n];
        for j in 0..count {
            match self {
                Prior::GaussianMixture(p) => p.sample_into(rng, &mut row),
                Prior::UniformMixture(p) => p.sample_into(rng, &mut row),
                Prior::LogNormal(p) => p.sample_into(rng, &mut row),
                Prior::FunctionSeries(p) => p.sample_into(rng, &mut row),
            }
            out.row_mut(j).iter_mut().zip(&row).for_each(|(o, v)| *o = *v);
        }
        Ok(out)
    }

    /// Exact log-density where the prior has one; the function-series prior
    /// does not (no sampler path needs it).
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        match self {
            Prior::GaussianMixture(p) => Ok(p.log_density(x)),
            Prior::UniformMixture(p) => Ok(p.log_density(x[0])),
            Prior::LogNormal(p) => Ok(p.log_density(x)),
            Prior::FunctionSeries(_) => Err(Error::Unsupported(
                "function-series prior has no tractable density".into(),
            )),
        }
    }
}
