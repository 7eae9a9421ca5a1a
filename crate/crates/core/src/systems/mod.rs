//! Continuous-time plant `dx/dt = f(x, u)`, sampled control law
//! `u = U(x, e, T)`, and the exact discrete-time model realised by an
//! adaptive integrator under zero-order hold.

mod bounds;
mod file;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::expr::{DomainError, DomainKind, Env, Node, VectorExpression};
use crate::{Error, Result};

pub use bounds::{estimate_sup_bounds, sup_control, sup_field, SupBounds};
pub use file::{ControlSpec, MatchSpec, SystemFile};
pub use oracle::{exact_step, flow_samples, FlowOracleConfig};

/// A right-hand side `f(x, u)` that integrators can evaluate.
pub trait VectorField: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DomainError>;
}

/// `dx/dt = f(x, u)` with `f` given as expressions in `x` (dim n) and `u` (dim m).
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSystem {
    f: VectorExpression,
    n: usize,
    m: usize,
}

pub const SLOT_X: usize = 0;
pub const SLOT_U: usize = 1;
pub const SLOT_E: usize = 1;
pub const SLOT_T: usize = 2;

impl ContinuousSystem {
    pub fn env(n: usize, m: usize) -> Env {
        Env::new().var("x", n).var("u", m)
    }

    pub fn new(f: VectorExpression, n: usize, m: usize) -> Result<Self> {
        if *f.env() != Self::env(n, m) {
            return Err(Error::Dimension(
                "plant expressions must be declared over x (n) and u (m)".into(),
            ));
        }
        if f.output_dim() != n {
            return Err(Error::Dimension(format!(
                "f has {} components but state dimension is {n}",
                f.output_dim()
            )));
        }
        Ok(Self { f, n, m })
    }

    pub fn parse<S: AsRef<str>>(n: usize, m: usize, f: &[S]) -> Result<Self> {
        let expr = VectorExpression::parse(f, &Self::env(n, m))?;
        Self::new(expr, n, m)
    }

    pub fn f(&self) -> &VectorExpression {
        &self.f
    }

    pub fn eval_f(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DomainError> {
        self.f.eval(&[x, u])
    }
}

impl VectorField for ContinuousSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DomainError> {
        self.f.eval_into(&[x, u], out)
    }
}

/// Which signal the error `e_k` perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    /// `e` has the state's dimension and corrupts the measured state.
    StateMeasurement,
    /// `e` has the input's dimension and is added to the applied input.
    Actuation,
}

/// `u = U(x, e, T)`, valid for `T` in `(0, T_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    u: VectorExpression,
    n: usize,
    q: usize,
    kind: ErrorKind,
    t_u: f64,
}

impl ControlLaw {
    pub fn env(n: usize, q: usize) -> Env {
        Env::new().var("x", n).var("e", q).var("T", 1)
    }

    /// Environment of a disturbance-free law `U(x, T)`.
    pub fn nominal_env(n: usize) -> Env {
        Env::new().var("x", n).var("T", 1)
    }

    pub fn new(u: VectorExpression, n: usize, q: usize, kind: ErrorKind, t_u: f64) -> Result<Self> {
        if *u.env() != Self::env(n, q) {
            return Err(Error::Dimension(
                "control law expressions must be declared over x (n), e (q) and T".into(),
            ));
        }
        if kind == ErrorKind::StateMeasurement && q != n {
            return Err(Error::Dimension(format!(
                "state-measurement errors need q = n = {n}, got q = {q}"
            )));
        }
        if kind == ErrorKind::Actuation && q != u.output_dim() {
            return Err(Error::Dimension(format!(
                "actuation errors need q = m = {}, got q = {q}",
                u.output_dim()
            )));
        }
        if !(t_u > 0.0) {
            return Err(Error::Invalid(format!("validity cap T_u must be positive, got {t_u}")));
        }
        Ok(Self { u, n, q, kind, t_u })
    }

    pub fn parse<S: AsRef<str>>(
        n: usize,
        q: usize,
        kind: ErrorKind,
        t_u: f64,
        u: &[S],
    ) -> Result<Self> {
        let expr = VectorExpression::parse(u, &Self::env(n, q))?;
        Self::new(expr, n, q, kind, t_u)
    }

    /// Wraps a disturbance-free law `U0(x, T)` so the error enters where
    /// `kind` says: `U0(x + e, T)` for state-measurement errors,
    /// `U0(x, T) + e` for actuation errors.
    pub fn with_error(nominal: &VectorExpression, n: usize, kind: ErrorKind, t_u: f64) -> Result<Self> {
        if *nominal.env() != Self::nominal_env(n) {
            return Err(Error::Dimension("nominal law must be declared over x (n) and T".into()));
        }
        let m = nominal.output_dim();
        let q = match kind {
            ErrorKind::StateMeasurement => n,
            ErrorKind::Actuation => m,
        };
        let nodes: Vec<Node> = nominal
            .nodes()
            .enumerate()
            .map(|(row, node)| {
                let moved = node.substitute(&|slot, index| match (slot, kind) {
                    (0, ErrorKind::StateMeasurement) => {
                        Some(Node::add(Node::var(SLOT_X, index), Node::var(SLOT_E, index)))
                    }
                    (1, _) => Some(Node::var(SLOT_T, 0)),
                    _ => None,
                });
                match kind {
                    ErrorKind::StateMeasurement => moved,
                    ErrorKind::Actuation => Node::add(moved, Node::var(SLOT_E, row)),
                }
            })
            .collect();
        let expr = VectorExpression::from_nodes(nodes, &Self::env(n, q))?;
        Self::new(expr, n, q, kind, t_u)
    }

    pub fn expr(&self) -> &VectorExpression {
        &self.u
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn error_dim(&self) -> usize {
        self.q
    }

    pub fn input_dim(&self) -> usize {
        self.u.output_dim()
    }

    pub fn error_kind(&self) -> ErrorKind {
        self.kind
    }

    pub fn t_u(&self) -> f64 {
        self.t_u
    }

    /// True when no component reads `T`.
    pub fn period_independent(&self) -> bool {
        !self.u.references(SLOT_T)
    }

    /// `u = U(x, e, T)`; `T` outside `(0, T_u)` is a domain error.
    pub fn apply(&self, x: &[f64], e: &[f64], t: f64) -> Result<Vec<f64>, DomainError> {
        let mut out = vec![0.0; self.input_dim()];
        self.apply_into(x, e, t, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, x: &[f64], e: &[f64], t: f64, out: &mut [f64]) -> Result<(), DomainError> {
        if !(t > 0.0 && t < self.t_u) {
            return Err(DomainError {
                kind: DomainKind::Period,
                node: format!("T = {t:e} outside (0, {:e})", self.t_u),
            });
        }
        self.u.eval_into(&[x, e, &[t]], out)
    }
}

/// `u = U(x, e, T)`.
pub fn apply_control(law: &ControlLaw, x: &[f64], e: &[f64], t: f64) -> Result<Vec<f64>> {
    Ok(law.apply(x, e, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plant_dimensions_are_checked() {
        assert!(ContinuousSystem::parse(1, 1, &["x^3 + u"]).is_ok());
        assert!(matches!(
            ContinuousSystem::parse(2, 1, &["x[0]"]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn error_injection_points() {
        let nominal =
            VectorExpression::parse(&["-2*x[0] + T"], &ControlLaw::nominal_env(1)).unwrap();
        let sm = ControlLaw::with_error(&nominal, 1, ErrorKind::StateMeasurement, 1.0).unwrap();
        assert_eq!(sm.apply(&[1.0], &[0.5], 0.25).unwrap(), vec![-3.0 + 0.25]);
        let act = ControlLaw::with_error(&nominal, 1, ErrorKind::Actuation, 1.0).unwrap();
        assert_eq!(act.apply(&[1.0], &[0.5], 0.25).unwrap(), vec![-2.0 + 0.25 + 0.5]);
        assert!(!sm.period_independent());
        let static_law = ControlLaw::parse(1, 1, ErrorKind::StateMeasurement, 1.0, &["-x-e"]).unwrap();
        assert!(static_law.period_independent());
    }
}
