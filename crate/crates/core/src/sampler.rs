//! Stage two of the sampler: the controlled SDE started at the observation.
//!
//! Given a control field `u(x, tau) = grad_x S(x, tau)` built for horizon
//! `T`, posterior samples of `Y_t | Y_s = y_obs` for any `0 <= t < s <= T`
//! come from Euler-Maruyama on
//!
//! ```text
//! Z_{k+1} = Z_k + (D u(Z_k, tau_k + T - s) - b(Z_k, s - tau_k)) * dtau
//!           + sqrt(eps * dtau) * sigma .* xi_k,        Z_0 = y_obs,
//! ```
//!
//! where `D = diag(sigma_i^2)` is the identity for standard models. The
//! control runs on its own shifted clock (`tau + T - s`), while the drift is
//! evaluated at the physical forward time `s - tau`; both at the left
//! endpoint of each step. The slice at `tau = s - t` approximates
//! `P(Y_t | Y_s = y_obs)`.
//!
//! [`sample_posterior`] stores every time slice; [`sample_posterior_slices`]
//! keeps only the requested target times, which is what large runs use.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{GaussianNoise, NoiseSource, NoiseStream, PathEnsemble, SdeModel, TimeGrid};

/// The interface "evaluate `grad_x S(x, tau)`" shared by the analytic,
/// Riccati, and score-network backends.
pub trait ControlField: Sync {
    fn dim(&self) -> usize;

    /// Latest `tau` the field covers.
    fn horizon(&self) -> f64;

    fn evaluate_into(&self, x: &[f64], tau: f64, out: &mut [f64]);

    fn evaluate(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(x, tau, &mut out);
        out
    }
}

impl<C: ControlField + ?Sized> ControlField for &C {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn horizon(&self) -> f64 {
        (**self).horizon()
    }
    fn evaluate_into(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        (**self).evaluate_into(x, tau, out)
    }
}

impl ControlField for Box<dyn ControlField + Send> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn horizon(&self) -> f64 {
        (**self).horizon()
    }
    fn evaluate_into(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        (**self).evaluate_into(x, tau, out)
    }
}

/// Terminal observation `Y_s = y_obs` and the times to report.
#[derive(Debug, Clone)]
pub struct ObservationSpec {
    pub y_obs: Vec<f64>,
    /// Observation time, in `(0, T]`.
    pub s: f64,
    /// Times `t < s` whose posterior slices are wanted, sorted ascending.
    pub target_times: Vec<f64>,
}

impl ObservationSpec {
    pub fn new(y_obs: Vec<f64>, s: f64, target_times: Vec<f64>) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::Precondition(format!("observation time must be positive, got {s}")));
        }
        if y_obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("observation".into()));
        }
        let mut ts = target_times.clone();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if ts != target_times {
            return Err(Error::Precondition("target times must be sorted ascending".into()));
        }
        if target_times.iter().any(|t| *t < 0.0 || *t >= s) {
            return Err(Error::Precondition("target times must lie in [0, s)".into()));
        }
        Ok(Self { y_obs, s, target_times })
    }
}

/// Posterior samples at the requested target times only.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub s: f64,
    pub times: Vec<f64>,
    /// One `(count, dim)` array per entry of `times`.
    pub samples: Vec<Array2<f64>>,
}

impl SliceSet {
    pub fn get(&self, t: f64) -> Result<&Array2<f64>> {
        self.times
            .iter()
            .position(|x| (x - t).abs() <= 1e-12)
            .map(|i| &self.samples[i])
            .ok_or_else(|| Error::Precondition(format!("no slice stored for t = {t}")))
    }
}

struct StepPlan {
    n_steps: usize,
    dtau: f64,
    shift: f64,
}

fn plan_steps(
    model: &SdeModel,
    control: &(impl ControlField + ?Sized),
    obs: &ObservationSpec,
    dtau: f64,
) -> Result<StepPlan> {
    if control.dim() != model.dim() || obs.y_obs.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: control.dim() });
    }
    if !(dtau > 0.0) {
        return Err(Error::Precondition(format!("dtau must be positive, got {dtau}")));
    }
    if obs.s > control.horizon() + 1e-12 {
        return Err(Error::Precondition(format!(
            "control horizon {} does not cover observation time {}",
            control.horizon(),
            obs.s
        )));
    }
    let n_steps_f = obs.s / dtau;
    let n_steps = n_steps_f.round();
    if (n_steps_f - n_steps).abs() > 1e-9 * n_steps.max(1.0) || n_steps < 1.0 {
        return Err(Error::Precondition(format!(
            "dtau = {dtau} does not divide the observation time {}",
            obs.s
        )));
    }
    Ok(StepPlan { n_steps: n_steps as usize, dtau, shift: control.horizon() - obs.s })
}

/// Maps each target time `t` to its step index `k = (s - t) / dtau`,
/// rejecting targets that do not land on the grid.
fn target_indices(obs: &ObservationSpec, plan: &StepPlan) -> Result<Vec<usize>> {
    obs.target_times
        .iter()
        .map(|t| {
            let kf = (obs.s - t) / plan.dtau;
            let k = kf.round();
            if (kf - k).abs() > 1e-6 {
                return Err(Error::Precondition(format!(
                    "target time {t} is not a node of the tau grid (dtau = {})",
                    plan.dtau
                )));
            }
            Ok(k as usize)
        })
        .collect()
}

/// Runs the controlled SDE for one path, invoking `record(k, state)` at
/// every grid node `k = 0..=n_steps`.
fn run_path<C: ControlField + ?Sized>(
    model: &SdeModel,
    control: &C,
    obs: &ObservationSpec,
    plan: &StepPlan,
    stream: &mut impl NoiseStream,
    path_index: usize,
    mut record: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let n = model.dim();
    let eps = model.epsilon();
    let scale = model.noise_scale();
    let root = (eps * plan.dtau).sqrt();
    let mut x = obs.y_obs.clone();
    let mut u = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut xi = vec![0.0; n];
    record(0, &x);
    for k in 0..plan.n_steps {
        let tau = k as f64 * plan.dtau;
        control.evaluate_into(&x, tau + plan.shift, &mut u);
        model.drift_into(&x, obs.s - tau, &mut b);
        stream.fill(&mut xi);
        for i in 0..n {
            let d = scale[i] * scale[i];
            x[i] += (d * u[i] - b[i]) * plan.dtau + root * scale[i] * xi[i];
            if !x[i].is_finite() {
                return Err(Error::NonFinite { path: path_index, step: k + 1 });
            }
        }
        record(k + 1, &x);
    }
    Ok(())
}

/// Simulates `count` posterior paths, storing every tau-grid slice.
///
/// Memory grows as `count * (s / dtau + 1) * dim`; prefer
/// [`sample_posterior_slices`] for large ensembles.
pub fn sample_posterior(
    model: &SdeModel,
    control: &(impl ControlField + ?Sized),
    obs: &ObservationSpec,
    dtau: f64,
    count: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    sample_posterior_with(model, control, obs, dtau, count, seed, &GaussianNoise { seed })
}

pub fn sample_posterior_with<N: NoiseSource>(
    model: &SdeModel,
    control: &(impl ControlField + ?Sized),
    obs: &ObservationSpec,
    dtau: f64,
    count: usize,
    seed: u64,
    noise: &N,
) -> Result<PathEnsemble> {
    let plan = plan_steps(model, control, obs, dtau)?;
    let mut values = Array3::<f64>::zeros((count, plan.n_steps + 1, model.dim()));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .try_for_each(|(j, mut path)| -> Result<()> {
            let mut stream = noise.stream(j);
            run_path(model, control, obs, &plan, &mut stream, j, |k, x| {
                for (i, v) in x.iter().enumerate() {
                    path[(k, i)] = *v;
                }
            })
        })?;
    let grid = TimeGrid::new(0.0, plan.dtau, plan.n_steps)?;
    Ok(PathEnsemble::from_parts(grid, values, seed))
}

/// Simulates `count` posterior paths, keeping only the slices at the
/// observation's target times.
pub fn sample_posterior_slices(
    model: &SdeModel,
    control: &(impl ControlField + ?Sized),
    obs: &ObservationSpec,
    dtau: f64,
    count: usize,
    seed: u64,
) -> Result<SliceSet> {
    sample_posterior_slices_with(model, control, obs, dtau, count, seed, &GaussianNoise { seed })
}

pub fn sample_posterior_slices_with<N: NoiseSource>(
    model: &SdeModel,
    control: &(impl ControlField + ?Sized),
    obs: &ObservationSpec,
    dtau: f64,
    count: usize,
    seed: u64,
    noise: &N,
) -> Result<SliceSet> {
    let _ = seed;
    let plan = plan_steps(model, control, obs, dtau)?;
    let targets = target_indices(obs, &plan)?;
    let n = model.dim();
    let mut out = Array3::<f64>::zeros((count, targets.len(), n));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .try_for_each(|(j, mut rows)| -> Result<()> {
            let mut stream = noise.stream(j);
            run_path(model, control, obs, &plan, &mut stream, j, |k, x| {
                for (slot, kt) in targets.iter().enumerate() {
                    if *kt == k {
                        for (i, v) in x.iter().enumerate() {
                            rows[(slot, i)] = *v;
                        }
                    }
                }
            })
        })?;
    let samples = (0..targets.len())
        .map(|slot| out.index_axis(Axis(1), slot).to_owned())
        .collect();
    Ok(SliceSet { s: obs.s, times: obs.target_times.clone(), samples })
}

/// Extracts the `tau = s - t` slice from a dense posterior ensemble.
pub fn posterior_slice(ensemble: &PathEnsemble, t: f64) -> Result<Array2<f64>> {
    let grid = ensemble.grid();
    let s = grid.last();
    let k = grid
        .index_of(s - t)
        .ok_or_else(|| Error::Precondition(format!("time {t} is not a stored slice")))?;
    Ok(ensemble.slice_at_index(k).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ZeroNoise;

    struct ConstControl {
        dim: usize,
        horizon: f64,
        value: f64,
    }

    impl ControlField for ConstControl {
        fn dim(&self) -> usize {
            self.dim
        }
        fn horizon(&self) -> f64 {
            self.horizon
        }
        fn evaluate_into(&self, _x: &[f64], _tau: f64, out: &mut [f64]) {
            out.fill(self.value);
        }
    }

    fn brownian(eps: f64) -> SdeModel {
        SdeModel::brownian(1, eps, 1.0).unwrap()
    }

    #[test]
    fn zero_control_zero_noise_stays_at_observation() {
        let model = brownian(1.0);
        let control = ConstControl { dim: 1, horizon: 1.0, value: 0.0 };
        let obs = ObservationSpec::new(vec![2.5], 1.0, vec![0.0, 0.5]).unwrap();
        let ens =
            sample_posterior_with(&model, &control, &obs, 0.25, 3, 0, &ZeroNoise).unwrap();
        for j in 0..3 {
            for k in 0..=4 {
                assert_eq!(ens.values()[(j, k, 0)], 2.5);
            }
        }
    }

    #[test]
    fn unit_control_single_step() {
        let model = brownian(1.0);
        let control = ConstControl { dim: 1, horizon: 1.0, value: 1.0 };
        let obs = ObservationSpec::new(vec![0.0], 1.0, vec![]).unwrap();
        let ens =
            sample_posterior_with(&model, &control, &obs, 0.01, 1, 0, &ZeroNoise).unwrap();
        assert!((ens.values()[(0, 1, 0)] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn slices_match_dense_run() {
        let model = brownian(0.3);
        let control = ConstControl { dim: 1, horizon: 1.0, value: 0.4 };
        let obs = ObservationSpec::new(vec![1.0], 0.8, vec![0.0, 0.4, 0.7]).unwrap();
        let dense = sample_posterior(&model, &control, &obs, 0.1, 64, 5).unwrap();
        let slim = sample_posterior_slices(&model, &control, &obs, 0.1, 64, 5).unwrap();
        for (i, t) in obs.target_times.iter().enumerate() {
            let a = posterior_slice(&dense, *t).unwrap();
            assert_eq!(a, slim.samples[i], "slice mismatch at t = {t}");
        }
        // t = 0 slice is the final row; slice count equals path count.
        let final_slice = posterior_slice(&dense, 0.0).unwrap();
        assert_eq!(final_slice.nrows(), 64);
        assert_eq!(final_slice, dense.slice_at_index(dense.grid().steps).to_owned());
        // A slice exists after one step: t = s - dtau.
        assert!(posterior_slice(&dense, 0.7).is_ok());
    }

    #[test]
    fn determinism_and_errors() {
        let model = brownian(1.0);
        let control = ConstControl { dim: 1, horizon: 1.0, value: -0.3 };
        let obs = ObservationSpec::new(vec![0.5], 1.0, vec![0.0]).unwrap();
        let a = sample_posterior(&model, &control, &obs, 0.05, 40, 9).unwrap();
        let b = sample_posterior(&model, &control, &obs, 0.05, 40, 9).unwrap();
        assert_eq!(a.values(), b.values());

        // Horizon violation.
        let short = ConstControl { dim: 1, horizon: 0.5, value: 0.0 };
        assert!(matches!(
            sample_posterior(&model, &short, &obs, 0.05, 4, 0),
            Err(Error::Precondition(_))
        ));

        // dtau not dividing s.
        assert!(matches!(
            sample_posterior(&model, &control, &obs, 0.3, 4, 0),
            Err(Error::Precondition(_))
        ));

        // Target time off the grid.
        let bad_obs = ObservationSpec::new(vec![0.5], 1.0, vec![0.123]).unwrap();
        assert!(matches!(
            sample_posterior_slices(&model, &control, &bad_obs, 0.05, 4, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn nonfinite_control_reports_path_and_step() {
        struct NanControl;
        impl ControlField for NanControl {
            fn dim(&self) -> usize {
                1
            }
            fn horizon(&self) -> f64 {
                1.0
            }
            fn evaluate_into(&self, _x: &[f64], _tau: f64, out: &mut [f64]) {
                out.fill(f64::NAN);
            }
        }
        let model = brownian(1.0);
        let obs = ObservationSpec::new(vec![0.0], 1.0, vec![]).unwrap();
        let err = sample_posterior(&model, &NanControl, &obs, 0.5, 2, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }));
    }
}
