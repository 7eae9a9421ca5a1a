//! Explicit Runge-Kutta one-step models
//!
//! ```text
//! y_1 = x,  y_i = x + T sum_{j<i} a_ij f(y_j, u),
//! F(x, u, T) = x + T sum_i b_i f(y_i, u)
//! ```
//!
//! Under zero-order hold the field is autonomous over a step, so tableaux
//! carry no node vector.

use serde::{Deserialize, Serialize};

use crate::expr::DomainError;
use crate::systems::VectorField;
use crate::{Error, Result};

pub const MAX_STAGES: usize = 16;
const CONSISTENCY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTableau", into = "RawTableau")]
pub struct ButcherTableau {
    s: usize,
    /// Row-major `s x s`, zero on and above the diagonal.
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTableau {
    pub s: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl TryFrom<RawTableau> for ButcherTableau {
    type Error = Error;
    fn try_from(raw: RawTableau) -> Result<Self> {
        if raw.s != raw.b.len() {
            return Err(Error::InvalidTableau(format!(
                "s = {} but b has {} weights",
                raw.s,
                raw.b.len()
            )));
        }
        ButcherTableau::new(raw.a, raw.b)
    }
}

impl From<ButcherTableau> for RawTableau {
    fn from(t: ButcherTableau) -> Self {
        RawTableau {
            s: t.s,
            a: t.a.chunks(t.s).map(<[f64]>::to_vec).collect(),
            b: t.b,
        }
    }
}

impl ButcherTableau {
    /// Validates shape, explicitness and finiteness. `a` may be given either
    /// as a full square matrix or as its strictly lower rows
    /// (`[[], [a21], [a31, a32], ...]`).
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let s = b.len();
        if s == 0 || s > MAX_STAGES {
            return Err(Error::InvalidTableau(format!(
                "stage count {s} outside 1..={MAX_STAGES}"
            )));
        }
        if a.len() != s {
            return Err(Error::InvalidTableau(format!("a has {} rows, b has {s} weights", a.len())));
        }
        let mut dense = vec![0.0; s * s];
        for (i, row) in a.iter().enumerate() {
            if row.len() != s && row.len() != i {
                return Err(Error::InvalidTableau(format!(
                    "row {i} of a has length {}, expected {s} or {i}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidTableau(format!("a[{i}][{j}] is not finite")));
                }
                if j >= i && v != 0.0 {
                    return Err(Error::InvalidTableau(format!(
                        "a[{i}][{j}] = {v} makes the method implicit"
                    )));
                }
                dense[i * s + j] = v;
            }
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTableau("b has non-finite weights".into()));
        }
        Ok(Self { s, a: dense, b })
    }

    pub fn euler() -> Self {
        Self::new(vec![vec![]], vec![1.0]).unwrap()
    }

    pub fn heun() -> Self {
        Self::new(vec![vec![], vec![1.0]], vec![0.5, 0.5]).unwrap()
    }

    pub fn rk4() -> Self {
        Self::new(
            vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        )
        .unwrap()
    }

    pub fn stages(&self) -> usize {
        self.s
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.s + j]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn weight_sum(&self) -> f64 {
        self.b.iter().sum()
    }

    /// `sum b_i = 1` to within 1e-12.
    pub fn is_consistent(&self) -> bool {
        (self.weight_sum() - 1.0).abs() < CONSISTENCY_TOL
    }

    pub fn is_euler(&self) -> bool {
        self.s == 1 && self.b[0] == 1.0
    }

    /// `F(x,u,T) - x = T sum b_i f(y_i, u)`, computed without forming
    /// `F` first, so it keeps full relative accuracy when `T` is tiny.
    pub fn increment<F: VectorField + ?Sized>(
        &self,
        field: &F,
        x: &[f64],
        u: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, DomainError> {
        let n = x.len();
        let mut k = vec![vec![0.0; n]; self.s];
        let mut y = x.to_vec();
        for i in 0..self.s {
            if i > 0 {
                for c in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(i) {
                        acc += self.a(i, j) * kj[c];
                    }
                    y[c] = x[c] + t * acc;
                }
            }
            field.eval(&y, u, &mut k[i])?;
        }
        Ok((0..n)
            .map(|c| {
                let acc: f64 = k.iter().zip(&self.b).map(|(ki, bi)| bi * ki[c]).sum();
                t * acc
            })
            .collect())
    }
}

/// `F^RK(x, u, T)`; evaluates `f` exactly `s` times.
pub fn rk_step<F: VectorField + ?Sized>(
    tab: &ButcherTableau,
    field: &F,
    x: &[f64],
    u: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("step size must be positive, got {t}")));
    }
    let inc = tab.increment(field, x, u, t)?;
    Ok(x.iter().zip(inc).map(|(a, d)| a + d).collect())
}

pub fn builtin_tableau(name: &str) -> Result<ButcherTableau> {
    match name {
        "euler" => Ok(ButcherTableau::euler()),
        "heun" => Ok(ButcherTableau::heun()),
        "rk4" => Ok(ButcherTableau::rk4()),
        other => Err(Error::UnknownTableau(other.to_string())),
    }
}

/// A tableau in configuration: a builtin name or explicit coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableauSpec {
    Named(String),
    Explicit(ButcherTableau),
}

impl TableauSpec {
    pub fn resolve(&self) -> Result<ButcherTableau> {
        match self {
            TableauSpec::Named(name) => builtin_tableau(name),
            TableauSpec::Explicit(t) => Ok(t.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::systems::ContinuousSystem;

    struct Counting<'a> {
        inner: &'a ContinuousSystem,
        calls: AtomicUsize,
    }

    impl VectorField for Counting<'_> {
        fn state_dim(&self) -> usize {
            self.inner.state_dim()
        }
        fn input_dim(&self) -> usize {
            self.inner.input_dim()
        }
        fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DomainError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.eval(x, u, out)
        }
    }

    #[test]
    fn euler_on_cubic_plant() {
        let sys = ContinuousSystem::parse(1, 1, &["x^3 + u"]).unwrap();
        let x = rk_step(&ButcherTableau::euler(), &sys, &[1.0], &[0.0], 0.1).unwrap();
        assert!((x[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn heun_on_desired_field() {
        let fd = ContinuousSystem::parse(1, 1, &["-x^3 - 2*x + u"]).unwrap();
        let x = rk_step(&ButcherTableau::heun(), &fd, &[1.0], &[0.0], 0.1).unwrap();
        assert!((x[0] - 0.76285).abs() < 1e-12, "{}", x[0]);
    }

    #[test]
    fn equilibrium_is_fixed_by_every_builtin() {
        let sys = ContinuousSystem::parse(1, 1, &["x^3 + u"]).unwrap();
        for name in ["euler", "heun", "rk4"] {
            let tab = builtin_tableau(name).unwrap();
            assert_eq!(rk_step(&tab, &sys, &[0.0], &[0.0], 0.3).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn stage_count_equals_evaluations() {
        let sys = ContinuousSystem::parse(2, 1, &["x[1]", "-x[0] + u[0]"]).unwrap();
        for name in ["euler", "heun", "rk4"] {
            let tab = builtin_tableau(name).unwrap();
            let f = Counting {
                inner: &sys,
                calls: AtomicUsize::new(0),
            };
            rk_step(&tab, &f, &[1.0, 0.0], &[0.0], 0.1).unwrap();
            assert_eq!(f.calls.load(Ordering::Relaxed), tab.stages());
        }
    }

    #[test]
    fn builtins_and_consistency() {
        let e = builtin_tableau("euler").unwrap();
        assert_eq!((e.stages(), e.b()), (1, &[1.0][..]));
        let h = builtin_tableau("heun").unwrap();
        assert_eq!((h.stages(), h.a(1, 0), h.b()), (2, 1.0, &[0.5, 0.5][..]));
        let r = builtin_tableau("rk4").unwrap();
        assert_eq!(r.stages(), 4);
        for t in [e, h, r] {
            assert!(t.is_consistent());
            assert!((t.weight_sum() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(builtin_tableau("dopri"), Err(Error::UnknownTableau(_))));
        let lazy = ButcherTableau::new(vec![vec![], vec![1.0]], vec![0.5, 0.4]).unwrap();
        assert!(!lazy.is_consistent());
    }

    #[test]
    fn implicit_and_oversized_tableaux_rejected() {
        assert!(ButcherTableau::new(vec![vec![0.5]], vec![1.0]).is_err());
        assert!(ButcherTableau::new(vec![vec![0.0, 0.0], vec![0.5, 0.5]], vec![0.5, 0.5]).is_err());
        let big = vec![vec![]; 17];
        assert!(ButcherTableau::new(big, vec![1.0 / 17.0; 17]).is_err());
    }

    #[test]
    fn tableau_json_is_validated_on_load() {
        let t: ButcherTableau =
            serde_json::from_str(r#"{"s": 2, "a": [[0, 0], [1, 0]], "b": [0.5, 0.5]}"#).unwrap();
        assert_eq!(t, ButcherTableau::heun());
        assert!(serde_json::from_str::<ButcherTableau>(r#"{"s": 1, "a": [[1]], "b": [1]}"#).is_err());
        let spec: TableauSpec = serde_json::from_str("\"rk4\"").unwrap();
        assert_eq!(spec.resolve().unwrap(), ButcherTableau::rk4());
    }

    #[test]
    fn linear_fields_superpose() {
        let sys = ContinuousSystem::parse(2, 1, &["x[1] + u[0]", "-2*x[0] - 0.5*x[1]"]).unwrap();
        let tab = ButcherTableau::rk4();
        let (x1, u1) = ([0.3, -1.2], [0.7]);
        let (x2, u2) = ([-2.0, 0.4], [-0.1]);
        let t = 0.2;
        let a = rk_step(&tab, &sys, &x1, &u1, t).unwrap();
        let b = rk_step(&tab, &sys, &x2, &u2, t).unwrap();
        let xs = [x1[0] + 2.0 * x2[0], x1[1] + 2.0 * x2[1]];
        let us = [u1[0] + 2.0 * u2[0]];
        let c = rk_step(&tab, &sys, &xs, &us, t).unwrap();
        for i in 0..2 {
            assert!((c[i] - (a[i] + 2.0 * b[i])).abs() < 1e-12);
        }
    }
}
