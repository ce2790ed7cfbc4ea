//! Forward SDE models and Euler-Maruyama simulation of path ensembles.
//!
//! A model describes `dY_t = b(Y_t, t) dt + sqrt(eps) * sigma * dW_t` on
//! `[0, T]`, where `sigma` is a constant per-coordinate noise scale
//! (the identity in the standard case). Training data for the score network
//! and all forward diagnostics come from [`simulate_forward`]:
//!
//! ```text
//! Y_{k+1,j} = Y_{k,j} + b(Y_{k,j}, t_k) * dt + sqrt(eps * dt) * sigma .* xi_{k,j}
//! ```
//!
//! with `xi_{k,j}` i.i.d. standard normal. Every path draws from its own
//! counter-derived RNG stream (root seed + path index), so enlarging the
//! ensemble never reshuffles earlier paths.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Uniform time grid with nodes `t0 + k * dt`, `k = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self { t0, dt, steps })
    }

    /// Grid over `[t0, t1]` with `steps` uniform steps.
    pub fn span(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::InvalidInput(format!("empty time span [{t0}, {t1}]")));
        }
        Self::new(t0, (t1 - t0) / steps as f64, steps)
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> f64 {
        self.node(self.steps)
    }

    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    /// Index of the node equal to `t`, if `t` lies on the grid (within
    /// half-ulp-scale rounding of the step).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t0) / self.dt).round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        if (self.node(k) - t).abs() <= 1e-9 * self.dt.max(1.0) {
            Some(k)
        } else {
            None
        }
    }
}

/// Linear drift `b(x, t) = A(t) x + beta(t)`.
#[derive(Clone)]
pub enum LinearDrift {
    /// Constant coefficients; the common case, evaluated without allocation.
    Constant { a: DMatrix<f64>, beta: DVector<f64> },
    /// Time-varying coefficients.
    TimeVarying {
        a: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
        beta: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    },
}

impl LinearDrift {
    pub fn constant(a: DMatrix<f64>, beta: DVector<f64>) -> Self {
        LinearDrift::Constant { a, beta }
    }

    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        match self {
            LinearDrift::Constant { a, .. } => a.clone(),
            LinearDrift::TimeVarying { a, .. } => a(t),
        }
    }

    pub fn beta_at(&self, t: f64) -> DVector<f64> {
        match self {
            LinearDrift::Constant { beta, .. } => beta.clone(),
            LinearDrift::TimeVarying { beta, .. } => beta(t),
        }
    }
}

/// Drift field of the forward process.
#[derive(Clone)]
pub enum Drift {
    /// `b = 0` (scaled Brownian motion).
    Zero,
    /// `b(x, t) = A(t) x + beta(t)`.
    Linear(LinearDrift),
    /// Arbitrary drift writing `b(x, t)` into the output slice.
    General(Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>),
}

impl std::fmt::Debug for Drift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Drift::Zero => write!(f, "Drift::Zero"),
            Drift::Linear(_) => write!(f, "Drift::Linear"),
            Drift::General(_) => write!(f, "Drift::General"),
        }
    }
}

/// Forward SDE `dY = b(Y, t) dt + sqrt(eps) * diag(noise_scale) dW` on `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct SdeModel {
    dimension: usize,
    epsilon: f64,
    horizon: f64,
    drift: Drift,
    /// Per-coordinate constant noise scale `sigma_i >= 0`; all ones unless a
    /// coordinate carries no noise (e.g. an exactly known equation in a
    /// misspecified system). The diffusion matrix is `D = diag(sigma_i^2)`.
    noise_scale: Vec<f64>,
}

impl SdeModel {
    pub fn new(dimension: usize, epsilon: f64, horizon: f64, drift: Drift) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if let Drift::Linear(LinearDrift::Constant { a, beta }) = &drift {
            if a.nrows() != dimension || a.ncols() != dimension {
                return Err(Error::DimensionMismatch { expected: dimension, got: a.nrows() });
            }
            if beta.len() != dimension {
                return Err(Error::DimensionMismatch { expected: dimension, got: beta.len() });
            }
        }
        Ok(Self {
            dimension,
            epsilon,
            horizon,
            drift,
            noise_scale: vec![1.0; dimension],
        })
    }

    /// Scaled Brownian motion `dY = sqrt(eps) dW`.
    pub fn brownian(dimension: usize, epsilon: f64, horizon: f64) -> Result<Self> {
        Self::new(dimension, epsilon, horizon, Drift::Zero)
    }

    /// Constant-coefficient linear drift `b(x) = A x + beta`.
    pub fn linear(
        dimension: usize,
        epsilon: f64,
        horizon: f64,
        a: DMatrix<f64>,
        beta: DVector<f64>,
    ) -> Result<Self> {
        Self::new(dimension, epsilon, horizon, Drift::Linear(LinearDrift::constant(a, beta)))
    }

    pub fn general<F>(dimension: usize, epsilon: f64, horizon: f64, drift: F) -> Result<Self>
    where
        F: Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(dimension, epsilon, horizon, Drift::General(Arc::new(drift)))
    }

    /// Replaces the per-coordinate noise scale (`sigma_i >= 0`, not all zero).
    pub fn with_noise_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.dimension {
            return Err(Error::DimensionMismatch { expected: self.dimension, got: scale.len() });
        }
        if scale.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidInput("noise scales must be finite and >= 0".into()));
        }
        if scale.iter().all(|s| *s == 0.0) {
            return Err(Error::InvalidInput("at least one coordinate must carry noise".into()));
        }
        self.noise_scale = scale;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dimension
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn noise_scale(&self) -> &[f64] {
        &self.noise_scale
    }

    pub fn is_identity_noise(&self) -> bool {
        self.noise_scale.iter().all(|s| *s == 1.0)
    }

    /// Evaluates `b(x, t)` into `out`.
    pub fn drift_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dimension);
        debug_assert_eq!(out.len(), self.dimension);
        match &self.drift {
            Drift::Zero => out.fill(0.0),
            Drift::Linear(LinearDrift::Constant { a, beta }) => {
                let n = self.dimension;
                for i in 0..n {
                    let mut acc = beta[i];
                    for j in 0..n {
                        acc += a[(i, j)] * x[j];
                    }
                    out[i] = acc;
                }
            }
            Drift::Linear(lin @ LinearDrift::TimeVarying { .. }) => {
                let a = lin.a_at(t);
                let beta = lin.beta_at(t);
                let n = self.dimension;
                for i in 0..n {
                    let mut acc = beta[i];
                    for j in 0..n {
                        acc += a[(i, j)] * x[j];
                    }
                    out[i] = acc;
                }
            }
            Drift::General(f) => f(x, t, out),
        }
    }
}

/// Divergence of the drift field, `div_x b(x, t)`.
///
/// Available for zero (`0`) and linear (`tr A(t)`) drifts; general drifts are
/// rejected since their divergence is not represented.
pub fn drift_divergence(model: &SdeModel, _x: &[f64], t: f64) -> Result<f64> {
    match model.drift() {
        Drift::Zero => Ok(0.0),
        Drift::Linear(lin) => Ok(lin.a_at(t).trace()),
        Drift::General(_) => Err(Error::Unsupported(
            "drift divergence is only available for zero and linear drifts".into(),
        )),
    }
}

/// Source of the Gaussian increments, one independent stream per path.
///
/// The default [`GaussianNoise`] derives stream `j` from a root seed with the
/// path index as the ChaCha stream counter. [`ZeroNoise`] turns the SDE into
/// its drift ODE, which pins down the deterministic part of a scheme in tests
/// and diagnostics.
pub trait NoiseSource: Sync {
    type Stream: NoiseStream;
    fn stream(&self, path: usize) -> Self::Stream;
}

pub trait NoiseStream {
    /// Fills `out` with the next increments for this path.
    fn fill(&mut self, out: &mut [f64]);
}

pub struct GaussianNoise {
    pub seed: u64,
}

pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl NoiseSource for GaussianNoise {
    type Stream = GaussianStream;

    fn stream(&self, path: usize) -> GaussianStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        GaussianStream { rng }
    }
}

impl NoiseStream for GaussianStream {
    fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
    }
}

pub struct ZeroNoise;

pub struct ZeroStream;

impl NoiseSource for ZeroNoise {
    type Stream = ZeroStream;

    fn stream(&self, _path: usize) -> ZeroStream {
        ZeroStream
    }
}

impl NoiseStream for ZeroStream {
    fn fill(&mut self, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// A batch of time-indexed sample paths, stored dense as
/// `(path, time index, coordinate)`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    values: Array3<f64>,
    seed: u64,
}

impl PathEnsemble {
    pub(crate) fn from_parts(grid: TimeGrid, values: Array3<f64>, seed: u64) -> Self {
        Self { grid, values, seed }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// All states at time index `k`, shape `(n_paths, dim)`.
    pub fn slice_at_index(&self, k: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(1), k)
    }

    /// State of path `j` at time index `k`.
    pub fn state(&self, j: usize, k: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![j, k, ..])
    }

    /// Writes the ensemble as CSV with header `path,k,t,x1..xn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim();
        write!(w, "path,k,t")?;
        for i in 1..=n {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for j in 0..self.n_paths() {
            for k in 0..self.grid.n_nodes() {
                write!(w, "{},{},{}", j, k, self.grid.node(k))?;
                for i in 0..n {
                    write!(w, ",{}", self.values[(j, k, i)])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Simulates the forward process by Euler-Maruyama from the given initial
/// samples over `grid`, which must cover `[0, horizon]`.
pub fn simulate_forward(
    model: &SdeModel,
    prior_samples: &Array2<f64>,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_forward_with(model, prior_samples, grid, seed, &GaussianNoise { seed })
}

/// [`simulate_forward`] with an explicit noise source.
pub fn simulate_forward_with<N: NoiseSource>(
    model: &SdeModel,
    prior_samples: &Array2<f64>,
    grid: &TimeGrid,
    seed: u64,
    noise: &N,
) -> Result<PathEnsemble> {
    let n = model.dim();
    if prior_samples.nrows() == 0 {
        return Err(Error::Precondition("prior samples must be nonempty".into()));
    }
    if prior_samples.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: prior_samples.ncols() });
    }
    if grid.t0.abs() > 1e-12 || (grid.last() - model.horizon()).abs() > grid.dt * 0.5 {
        return Err(Error::Precondition(format!(
            "grid [{}, {}] does not cover [0, {}]",
            grid.t0,
            grid.last(),
            model.horizon()
        )));
    }

    let n_paths = prior_samples.nrows();
    let mut values = Array3::<f64>::zeros((n_paths, grid.n_nodes(), n));
    let dt = grid.dt;
    let root2 = (model.epsilon() * dt).sqrt();
    let scale = model.noise_scale();

    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .try_for_each(|(j, mut path)| -> Result<()> {
            let mut stream = noise.stream(j);
            let mut x: Vec<f64> = prior_samples.row(j).to_vec();
            let mut b = vec![0.0; n];
            let mut xi = vec![0.0; n];
            for (i, v) in x.iter().enumerate() {
                path[(0, i)] = *v;
            }
            for k in 0..grid.steps {
                let t = grid.node(k);
                model.drift_into(&x, t, &mut b);
                stream.fill(&mut xi);
                for i in 0..n {
                    x[i] += b[i] * dt + root2 * scale[i] * xi[i];
                    if !x[i].is_finite() {
                        return Err(Error::NonFinite { path: j, step: k + 1 });
                    }
                    path[(k + 1, i)] = x[i];
                }
            }
            Ok(())
        })?;

    Ok(PathEnsemble { grid: grid.clone(), values, seed })
}
