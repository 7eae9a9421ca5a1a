#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Exact and explicit Runge-Kutta discrete-time models of nonuniformly
//! sampled nonlinear control systems under zero-order hold.
//!
//! The crate builds one-step closed-loop maps `x+ = F(x, e, T)` from a plant
//! `dx/dt = f(x, u)` and a control law `u = U(x, e, T)`, simulates them over
//! varying sampling periods, and fits empirically validated certificates:
//!
//! - one-step and multistep consistency between two models ([`consistency`]),
//! - semiglobal exponential ISS bounds `|x_k| <= K|x_0|e^{-lambda t_k} + gamma(|e|)`
//!   and their transfer from one model to another ([`stability`]).
//!
//! The exact model is realised by a tight-tolerance adaptive integrator
//! ([`systems::exact_step`]); certificates are falsifiable sampled checks,
//! never proofs.

pub mod closedloop;
pub mod consistency;
pub mod error;
pub mod example;
pub mod expr;
pub mod gain;
pub mod rk;
pub mod sampling;
pub mod stability;
pub mod systems;

pub use error::{Error, Result};

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
