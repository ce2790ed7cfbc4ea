//! Bayesian posterior sampling for the inverse problem of a stochastic
//! differential equation: infer `Y_t` given a terminal observation
//! `Y_s = y_obs`, where `dY_t = b(Y_t, t) dt + sqrt(eps) dW_t`.
//!
//! The sampler runs in two stages. Stage one produces the gradient of the
//! viscous Hamilton-Jacobi solution `S` associated with the process, which
//! equals `eps` times the score of the forward marginal evaluated at
//! reversed time. Three backends provide that gradient:
//!
//! * [`analytic`] — closed forms for scaled Brownian motion with Gaussian
//!   mixture or uniform mixture priors and for the 1D Ornstein-Uhlenbeck
//!   process with a Gaussian prior, together with exact posteriors used as
//!   ground truth;
//! * [`riccati`] — Riccati ODE solutions for linear drifts with Gaussian
//!   mixture priors;
//! * [`score_net`] — a small feed-forward network trained with implicit or
//!   sliced score matching on simulated paths.
//!
//! Stage two ([`sampler`]) simulates the controlled SDE
//! `dZ = (grad S - b) dtau + sqrt(eps) dW` from the observation by
//! Euler-Maruyama; the slice at `tau = s - t` approximates `P(Y_t | Y_s)`.
//! Time-shifting the control lets one horizon-`T` solve serve every
//! observation time `s <= T`.
//!
//! [`models`] simulates forward training paths, [`priors`] holds the initial
//! laws, and [`metrics`] provides empirical Wasserstein-1 distances and
//! summary statistics for evaluation.

pub mod analytic;
pub mod error;
pub mod metrics;
pub mod models;
pub mod priors;
pub mod riccati;
pub mod sampler;
pub mod score_net;

pub use error::{Error, Result};
