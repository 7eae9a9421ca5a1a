//! Closed-loop one-step maps `x+ = F(x, U(x, e, T), T)`, trajectory
//! simulation over varying sampling periods, and model-matching controller
//! synthesis.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::expr::{Env, Node, VectorExpression};
use crate::rk::ButcherTableau;
use crate::sampling::{cube_to_ball, halton, open_period, uniform_in_ball};
use crate::systems::{exact_step, ContinuousSystem, ControlLaw, ErrorKind, FlowOracleConfig, VectorField};
use crate::systems::{SLOT_E, SLOT_T, SLOT_X};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    /// Flow of the plant over the period, via the adaptive oracle.
    Exact(FlowOracleConfig),
    RungeKutta(ButcherTableau),
}

/// `F(x, e, T) = F_open(x, U(x, e, T), T)` for one open-loop backend.
#[derive(Debug, Clone)]
pub struct ClosedLoopModel {
    backend: Backend,
    sys: Arc<ContinuousSystem>,
    law: Arc<ControlLaw>,
}

impl ClosedLoopModel {
    pub fn new(backend: Backend, sys: Arc<ContinuousSystem>, law: Arc<ControlLaw>) -> Result<Self> {
        if law.state_dim() != sys.state_dim() || law.input_dim() != sys.input_dim() {
            return Err(Error::Dimension(format!(
                "law maps R^{} to R^{}, plant has n = {}, m = {}",
                law.state_dim(),
                law.input_dim(),
                sys.state_dim(),
                sys.input_dim()
            )));
        }
        if let Backend::Exact(cfg) = &backend {
            cfg.validate()?;
        }
        Ok(Self { backend, sys, law })
    }

    pub fn exact(sys: Arc<ContinuousSystem>, law: Arc<ControlLaw>, cfg: FlowOracleConfig) -> Result<Self> {
        Self::new(Backend::Exact(cfg), sys, law)
    }

    pub fn runge_kutta(sys: Arc<ContinuousSystem>, law: Arc<ControlLaw>, tab: ButcherTableau) -> Result<Self> {
        Self::new(Backend::RungeKutta(tab), sys, law)
    }

    /// Checks `F(0, 0, T) = 0` (to the backend tolerance) on a few periods
    /// below `t_cap`.
    pub fn check_equilibrium(&self, t_cap: f64) -> Result<()> {
        let n = self.state_dim();
        let zero_x = vec![0.0; n];
        let zero_e = vec![0.0; self.error_dim()];
        for frac in [1e-3, 0.1, 0.5, 0.9] {
            let t = frac * t_cap.min(self.period_cap());
            let next = self.step(&zero_x, &zero_e, t)?;
            let dev = crate::norm(&next);
            if dev > 10.0 * self.tolerance() {
                return Err(Error::Invalid(format!(
                    "model does not preserve the origin: |F(0,0,{t:e})| = {dev:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn system(&self) -> &ContinuousSystem {
        &self.sys
    }

    pub fn law(&self) -> &ControlLaw {
        &self.law
    }

    pub fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    pub fn error_dim(&self) -> usize {
        self.law.error_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.sys.input_dim()
    }

    /// Periods must lie below this (the law's validity cap).
    pub fn period_cap(&self) -> f64 {
        self.law.t_u()
    }

    /// Absolute accuracy of one step: the oracle tolerance for the exact
    /// backend, zero for Runge-Kutta maps (exact up to rounding).
    pub fn tolerance(&self) -> f64 {
        match &self.backend {
            Backend::Exact(cfg) => cfg.abs_tol,
            Backend::RungeKutta(_) => 0.0,
        }
    }

    pub fn oracle_config(&self) -> Option<&FlowOracleConfig> {
        match &self.backend {
            Backend::Exact(cfg) => Some(cfg),
            Backend::RungeKutta(_) => None,
        }
    }

    pub fn label(&self) -> String {
        match &self.backend {
            Backend::Exact(_) => "exact".into(),
            Backend::RungeKutta(t) if t == &ButcherTableau::euler() => "euler".into(),
            Backend::RungeKutta(t) if t == &ButcherTableau::heun() => "heun".into(),
            Backend::RungeKutta(t) if t == &ButcherTableau::rk4() => "rk4".into(),
            Backend::RungeKutta(t) => format!("rk{}", t.stages()),
        }
    }

    /// `(F(x, e, T), u)`.
    pub fn step_with_input(&self, x: &[f64], e: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = self.law.apply(x, e, t)?;
        let next = match &self.backend {
            Backend::Exact(cfg) => exact_step(&*self.sys, x, &u, t, cfg)?,
            Backend::RungeKutta(tab) => {
                let inc = tab.increment(&*self.sys, x, &u, t)?;
                x.iter().zip(inc).map(|(a, d)| a + d).collect()
            }
        };
        if next.iter().chain(&u).any(|v| !v.is_finite()) {
            return Err(Error::FiniteEscape {
                time: t,
                reason: "state or input overflowed".into(),
            });
        }
        Ok((next, u))
    }

    pub fn step(&self, x: &[f64], e: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.step_with_input(x, e, t)?.0)
    }

    /// `F(x, e, T) - x`. Runge-Kutta backends form it directly from the
    /// stages, so it stays accurate when the step is far below the ulp of `x`.
    pub fn increment(&self, x: &[f64], e: &[f64], t: f64) -> Result<Vec<f64>> {
        let u = self.law.apply(x, e, t)?;
        match &self.backend {
            Backend::Exact(cfg) => {
                let next = exact_step(&*self.sys, x, &u, t, cfg)?;
                Ok(next.iter().zip(x).map(|(a, b)| a - b).collect())
            }
            Backend::RungeKutta(tab) => {
                let inc = tab.increment(&*self.sys, x, &u, t)?;
                if inc.iter().any(|v| !v.is_finite()) {
                    return Err(Error::FiniteEscape {
                        time: t,
                        reason: "increment overflowed".into(),
                    });
                }
                Ok(inc)
            }
        }
    }

    /// Closed-loop vector field `f(x, U(x, e, T))`.
    pub fn closed_loop_field(&self, x: &[f64], e: &[f64], t: f64) -> Result<Vec<f64>> {
        let u = self.law.apply(x, e, t)?;
        Ok(self.sys.eval_f(x, &u)?)
    }
}

/// Sampling periods `T_0, T_1, ...`, each in `(0, t_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    periods: Vec<f64>,
    t_max: f64,
}

impl SamplingSchedule {
    pub fn new(periods: Vec<f64>, t_max: f64) -> Result<Self> {
        if let Some((i, t)) = periods
            .iter()
            .enumerate()
            .find(|(_, &t)| !(t > 0.0 && t < t_max))
        {
            return Err(Error::Invalid(format!("period T_{i} = {t} outside (0, {t_max})")));
        }
        Ok(Self { periods, t_max })
    }

    /// `count` periods drawn uniformly from `(0, t_max)`.
    pub fn random<R: Rng>(rng: &mut R, t_max: f64, count: usize) -> Result<Self> {
        Self::new((0..count).map(|_| open_period(rng, t_max)).collect(), t_max)
    }

    /// Uniform periods until their sum reaches `horizon`.
    pub fn random_until<R: Rng>(rng: &mut R, t_max: f64, horizon: f64) -> Result<Self> {
        let mut periods = Vec::new();
        let mut total = 0.0;
        while total < horizon {
            let t = open_period(rng, t_max);
            total += t;
            periods.push(t);
        }
        Self::new(periods, t_max)
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    pub fn total_time(&self) -> f64 {
        self.periods.iter().sum()
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            periods: self.periods[..k.min(self.len())].to_vec(),
            t_max: self.t_max,
        }
    }
}

/// Error sequence `e_0, e_1, ...` with cached sup-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSignal {
    values: Vec<Vec<f64>>,
    sup_norm: f64,
    /// `running[k] = max_{i < k} |e_i|`, with `running[0] = 0`.
    running: Vec<f64>,
}

impl DisturbanceSignal {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(q) = values.first().map(Vec::len) {
            if values.iter().any(|v| v.len() != q) {
                return Err(Error::Dimension("disturbance vectors differ in length".into()));
            }
        }
        let mut running = Vec::with_capacity(values.len() + 1);
        running.push(0.0);
        let mut sup = 0.0_f64;
        for v in &values {
            sup = sup.max(crate::norm(v));
            running.push(sup);
        }
        Ok(Self {
            values,
            sup_norm: sup,
            running,
        })
    }

    pub fn zero(len: usize, dim: usize) -> Self {
        Self::new(vec![vec![0.0; dim]; len]).unwrap()
    }

    pub fn constant(value: &[f64], len: usize) -> Self {
        Self::new(vec![value.to_vec(); len]).unwrap()
    }

    /// Independent draws uniform in the ball of radius `radius` (for a scalar
    /// error, uniform on `[-radius, radius]`).
    pub fn uniform<R: Rng>(rng: &mut R, radius: f64, len: usize, dim: usize) -> Self {
        Self::new((0..len).map(|_| uniform_in_ball(rng, dim, radius)).collect()).unwrap()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// `sup_{0 <= i <= k-1} |e_i|` (zero for `k = 0`).
    pub fn sup_before(&self, k: usize) -> f64 {
        self.running[k.min(self.values.len())]
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self::new(self.values[..k.min(self.len())].to_vec()).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum TrajectoryStatus {
    Complete,
    /// The step from `x_step` could not be taken (finite escape).
    Escaped { step: usize },
}

/// States at sampling instants, with the periods, errors and inputs applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    /// `t_k = sum_{i<k} T_i`.
    pub times: Vec<f64>,
    /// `periods[k]`, `errors[k]`, `inputs[k]` drive the step from `states[k]`.
    pub periods: Vec<f64>,
    pub errors: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds x_0")
    }

    pub fn escaped(&self) -> bool {
        matches!(self.status, TrajectoryStatus::Escaped { .. })
    }

    pub fn norms(&self) -> Vec<f64> {
        self.states.iter().map(|s| crate::norm(s)).collect()
    }

    /// CSV with columns `k,t,T_k,x_*,e_*,u_*,status`. The last row holds the
    /// final state with empty step columns; `status` is `ok` on every row but
    /// the last, which reads `complete` or `escaped`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states[0].len();
        let q = self.errors.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string(), "t".into(), "T_k".into()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..q).map(|i| format!("e_{i}")));
        header.extend((0..m).map(|i| format!("u_{i}")));
        header.push("status".into());
        writeln!(w, "{}", header.join(","))?;
        let last = self.states.len() - 1;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string(), fmt_num(self.times[k])];
            let has_step = k < self.periods.len();
            row.push(if has_step { fmt_num(self.periods[k]) } else { String::new() });
            row.extend(x.iter().map(|v| fmt_num(*v)));
            for (cols, width) in [(&self.errors, q), (&self.inputs, m)] {
                match cols.get(k).filter(|_| has_step) {
                    Some(v) => row.extend(v.iter().map(|c| fmt_num(*c))),
                    None => row.extend(std::iter::repeat_n(String::new(), width)),
                }
            }
            row.push(
                if k < last {
                    "ok"
                } else {
                    match self.status {
                        TrajectoryStatus::Complete => "complete",
                        TrajectoryStatus::Escaped { .. } => "escaped",
                    }
                }
                .into(),
            );
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

/// Iterates the model from `x0`. A finite escape ends the trajectory with
/// status `Escaped`; other failures (domain errors) are returned.
pub fn simulate(
    model: &ClosedLoopModel,
    x0: &[f64],
    sched: &SamplingSchedule,
    dist: &DisturbanceSignal,
) -> Result<Trajectory> {
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "x0 has length {}, model state dimension is {}",
            x0.len(),
            model.state_dim()
        )));
    }
    if dist.len() < sched.len() {
        return Err(Error::Invalid(format!(
            "{} disturbance values for {} periods",
            dist.len(),
            sched.len()
        )));
    }
    if let Some(e) = dist.values().first() {
        if e.len() != model.error_dim() {
            return Err(Error::Dimension(format!(
                "disturbance has dimension {}, law expects {}",
                e.len(),
                model.error_dim()
            )));
        }
    }
    let mut traj = Trajectory {
        states: vec![x0.to_vec()],
        times: vec![0.0],
        periods: Vec::with_capacity(sched.len()),
        errors: Vec::with_capacity(sched.len()),
        inputs: Vec::with_capacity(sched.len()),
        status: TrajectoryStatus::Complete,
    };
    let mut t = 0.0;
    for (k, (&period, e)) in sched.periods().iter().zip(dist.values()).enumerate() {
        let x = traj.states.last().unwrap();
        match model.step_with_input(x, e, period) {
            Ok((next, u)) => {
                t += period;
                traj.periods.push(period);
                traj.errors.push(e.clone());
                traj.inputs.push(u);
                traj.states.push(next);
                traj.times.push(t);
            }
            Err(Error::FiniteEscape { .. }) | Err(Error::MaxStepsExceeded { .. }) => {
                traj.status = TrajectoryStatus::Escaped { step: k };
                break;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(traj)
}

/// What a model-matching controller should make the Euler model reproduce.
#[derive(Debug, Clone, PartialEq)]
pub enum DesiredMap {
    /// The Runge-Kutta model of a desired field `f_d(x)` (expressions in `x`).
    RungeKutta {
        tableau: ButcherTableau,
        field: VectorExpression,
    },
    /// An explicit map `F_d(x, T)` (expressions in `x` and `T`).
    Map(VectorExpression),
}

impl DesiredMap {
    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            DesiredMap::RungeKutta { tableau, field } => {
                let f = FieldOfX(field);
                let inc = tableau.increment(&f, x, &[], t)?;
                Ok(x.iter().zip(inc).map(|(a, d)| a + d).collect())
            }
            DesiredMap::Map(map) => Ok(map.eval(&[x, &[t]])?),
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            DesiredMap::RungeKutta { field, .. } => field.output_dim(),
            DesiredMap::Map(map) => map.output_dim(),
        }
    }
}

/// Adapts an expression in `x` alone to a [`VectorField`] with no input.
struct FieldOfX<'a>(&'a VectorExpression);

impl VectorField for FieldOfX<'_> {
    fn state_dim(&self) -> usize {
        self.0.output_dim()
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn eval(&self, x: &[f64], _u: &[f64], out: &mut [f64]) -> Result<(), crate::expr::DomainError> {
        self.0.eval_into(&[x], out)
    }
}

const AFFINE_TOL: f64 = 1e-9;

/// Sampled check that `f(x, u) = g(x) + u`.
pub fn check_control_affine(sys: &ContinuousSystem) -> Result<()> {
    let (n, m) = (sys.state_dim(), sys.input_dim());
    if n != m {
        return Err(Error::NotControlAffine { residual: f64::INFINITY });
    }
    let zero_u = vec![0.0; m];
    let mut worst = 0.0_f64;
    for i in 1..=256u64 {
        let h = halton(i, n + m);
        let x = cube_to_ball(&h[..n], 2.0);
        let u = cube_to_ball(&h[n..], 2.0);
        let fu = sys.eval_f(&x, &u)?;
        let f0 = sys.eval_f(&x, &zero_u)?;
        for c in 0..n {
            worst = worst.max((fu[c] - f0[c] - u[c]).abs());
        }
    }
    if worst > AFFINE_TOL {
        return Err(Error::NotControlAffine { residual: worst });
    }
    Ok(())
}

/// Builds `U(x, e, T)` with `F^Euler(x, U(x, 0, T), T) = F_d(x, T)` for a plant
/// `f(x, u) = g(x) + u`, with the error entering as a state measurement
/// error `z = x + e`:
///
/// - for a Runge-Kutta target, `U = sum_i b_i f_d(y_i(z)) - g(z)`, which is
///   `(F_d(z, T) - z)/T - g(z)` with the `1/T` cancelled symbolically;
/// - for an explicit map, `U = (F_d(z, T) - z)/T - g(z)`.
///
/// `t_u` is the validity cap recorded on the law.
pub fn match_controller(
    open_loop: &ButcherTableau,
    desired: &DesiredMap,
    sys: &ContinuousSystem,
    t_u: f64,
) -> Result<ControlLaw> {
    if !open_loop.is_euler() {
        return Err(Error::Invalid(
            "model matching is implemented for the Euler open-loop model".into(),
        ));
    }
    check_control_affine(sys)?;
    let n = sys.state_dim();
    if desired.state_dim() != n {
        return Err(Error::Dimension(format!(
            "desired map has {} components, plant state has {n}",
            desired.state_dim()
        )));
    }
    let z: Vec<Node> = (0..n)
        .map(|i| Node::add(Node::var(SLOT_X, i), Node::var(SLOT_E, i)))
        .collect();
    let period = Node::var(SLOT_T, 0);
    // g(z) = f(z, 0)
    let g: Vec<Node> = sys
        .f()
        .nodes()
        .map(|node| {
            node.substitute(&|slot, index| match slot {
                0 => Some(z[index].clone()),
                _ => Some(Node::Const(0.0)),
            })
        })
        .collect();

    let drift: Vec<Node> = match desired {
        DesiredMap::RungeKutta { tableau, field } => {
            let eval_at = |y: &[Node]| -> Vec<Node> {
                field
                    .nodes()
                    .map(|node| node.substitute(&|_, index| Some(y[index].clone())))
                    .collect()
            };
            let mut k: Vec<Vec<Node>> = Vec::with_capacity(tableau.stages());
            for i in 0..tableau.stages() {
                let y: Vec<Node> = (0..n)
                    .map(|c| {
                        let terms: Vec<Node> = (0..i)
                            .filter(|&j| tableau.a(i, j) != 0.0)
                            .map(|j| scaled(tableau.a(i, j), k[j][c].clone()))
                            .collect();
                        match sum(terms) {
                            None => z[c].clone(),
                            Some(s) => Node::add(z[c].clone(), Node::mul(period.clone(), s)),
                        }
                    })
                    .collect();
                k.push(eval_at(&y));
            }
            (0..n)
                .map(|c| {
                    let terms: Vec<Node> = tableau
                        .b()
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b != 0.0)
                        .map(|(i, &b)| scaled(b, k[i][c].clone()))
                        .collect();
                    sum(terms).unwrap_or(Node::Const(0.0))
                })
                .collect()
        }
        DesiredMap::Map(map) => map
            .nodes()
            .enumerate()
            .map(|(c, node)| {
                let fd = node.substitute(&|slot, index| match slot {
                    0 => Some(z[index].clone()),
                    _ => Some(period.clone()),
                });
                Node::div(Node::sub(fd, z[c].clone()), period.clone())
            })
            .collect(),
    };
    let nodes: Vec<Node> = drift.into_iter().zip(g).map(|(d, gc)| Node::sub(d, gc)).collect();
    let expr = VectorExpression::from_nodes(nodes, &ControlLaw::env(n, n))?;
    ControlLaw::new(expr, n, n, ErrorKind::StateMeasurement, t_u)
}

fn scaled(c: f64, node: Node) -> Node {
    if c == 1.0 {
        node
    } else {
        Node::mul(Node::Const(c), node)
    }
}

fn sum(terms: Vec<Node>) -> Option<Node> {
    terms.into_iter().reduce(Node::add)
}

/// Environment of a desired map `F_d(x, T)`.
pub fn desired_map_env(n: usize) -> Env {
    ControlLaw::nominal_env(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use crate::sampling::stream_rng;

    #[test]
    fn euler_closed_loop_equals_heun_target_spot_value() {
        let m = example::euler_model();
        let x = m.step(&[1.0], &[0.0], 0.1).unwrap();
        assert!((x[0] - 0.76285).abs() < 1e-12, "{}", x[0]);
        assert!((x[0] - example::heun_reference(1.0, 0.1)).abs() < 1e-15);
    }

    #[test]
    fn origin_is_fixed() {
        let m = example::euler_model();
        assert_eq!(m.step(&[0.0], &[0.0], 0.3).unwrap(), vec![0.0]);
        m.check_equilibrium(1.0).unwrap();
        example::exact_model().check_equilibrium(1.0).unwrap();
    }

    #[test]
    fn euler_closed_loop_diverges_above_threshold() {
        // threshold sqrt((3 - T)/(2T)) = sqrt(2.5) at T = 0.5
        let m = example::euler_model();
        let x = m.step(&[2.0], &[0.0], 0.5).unwrap();
        assert!(x[0].abs() > 2.0, "{}", x[0]);
    }

    #[test]
    fn matched_law_reproduces_target_on_random_points() {
        let law = example::matched_law();
        let sys = example::plant();
        let target = example::heun_target();
        let euler = ButcherTableau::euler();
        let mut rng = stream_rng(11, 0);
        for _ in 0..1000 {
            let x = rng.gen_range(-5.0..5.0);
            let t = open_period(&mut rng, 0.5);
            let u = law.apply(&[x], &[0.0], t).unwrap();
            let f_euler = crate::rk::rk_step(&euler, &sys, &[x], &u, t).unwrap()[0];
            let f_d = target.eval(&[x], t).unwrap()[0];
            assert!((f_euler - f_d).abs() < 1e-12, "x={x} T={t}: {f_euler} vs {f_d}");
        }
    }

    #[test]
    fn matched_law_agrees_with_division_form() {
        let matched = example::matched_law();
        let d3 = example::d3_law();
        let mut rng = stream_rng(12, 0);
        for _ in 0..1000 {
            let x = rng.gen_range(-3.0..3.0);
            let e = rng.gen_range(-1.0..1.0);
            let t = open_period(&mut rng, 0.5).max(1e-3);
            let a = matched.apply(&[x], &[e], t).unwrap()[0];
            let b = d3.apply(&[x], &[e], t).unwrap()[0];
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn identity_target_cancels_drift() {
        let sys = example::plant();
        let ident = DesiredMap::Map(VectorExpression::parse(&["x[0]"], &desired_map_env(1)).unwrap());
        let law = match_controller(&ButcherTableau::euler(), &ident, &sys, 1.0).unwrap();
        for (x, e) in [(0.5, 0.0), (-1.5, 0.25), (2.0, -0.5)] {
            let u = law.apply(&[x], &[e], 0.2).unwrap()[0];
            let z: f64 = x + e;
            assert!((u + z.powi(3)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_affine_plant_rejected() {
        let sys = ContinuousSystem::parse(1, 1, &["x^3 + u^2"]).unwrap();
        let r = match_controller(&ButcherTableau::euler(), &example::heun_target(), &sys, 1.0);
        assert!(matches!(r, Err(Error::NotControlAffine { .. })));
    }

    #[test]
    fn printed_closed_form_matches_composition() {
        // x + T (x^3 + U) with U from the expanded Heun polynomial
        let env = ControlLaw::env(1, 1);
        let z = "(x+e)";
        let poly = format!(
            "(1/2*({z}^3 + 2*{z})^3*T^4 - 3/2*{z}*({z}^3 + 2*{z})^2*T^3 \
             + (2*{z} + (3*{z}^2*({z}^3 + 2*{z}))/2 + {z}^3)*T^2 - ({z}^3 + 2*{z})*T + {z})"
        );
        let closed = format!("x + T*(x^3 + ({poly} - x - e)/T - {z}^3)");
        let expr = VectorExpression::parse(&[closed], &env).unwrap();
        let m = example::euler_model();
        let mut rng = stream_rng(13, 0);
        for _ in 0..1000 {
            let x = rng.gen_range(-2.0..2.0);
            let e = rng.gen_range(-0.5..0.5);
            let t = open_period(&mut rng, 0.5).max(1e-3);
            let a = expr.eval(&[&[x], &[e], &[t]]).unwrap()[0];
            let b = m.step(&[x], &[e], t).unwrap()[0];
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()).max(1.0) * 10.0, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_start_gives_zero_trajectory() {
        let m = example::euler_model();
        let mut rng = stream_rng(3, 0);
        let sched = SamplingSchedule::random(&mut rng, 0.05, 50).unwrap();
        let traj = simulate(&m, &[0.0], &sched, &DisturbanceSignal::zero(50, 1)).unwrap();
        assert_eq!(traj.len(), 51);
        assert!(traj.states.iter().all(|s| s[0] == 0.0));
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn truncation_is_causal() {
        let m = example::euler_model();
        let mut rng = stream_rng(4, 0);
        let sched = SamplingSchedule::random(&mut rng, 0.05, 40).unwrap();
        let dist = DisturbanceSignal::uniform(&mut rng, 1.0, 40, 1);
        let full = simulate(&m, &[5.0], &sched, &dist).unwrap();
        for k in [0, 1, 17, 39] {
            let part = simulate(&m, &[5.0], &sched.truncated(k), &dist.truncated(k)).unwrap();
            assert_eq!(&full.states[..=k], &part.states[..]);
        }
    }

    #[test]
    fn escape_is_recorded_not_raised() {
        // open-loop cubic plant, zero input: blows up from 2 before t = 1/8
        let sys = Arc::new(ContinuousSystem::parse(1, 1, &["x^3 + u"]).unwrap());
        let law = Arc::new(ControlLaw::parse(1, 1, ErrorKind::StateMeasurement, 1.0, &["0*x"]).unwrap());
        let m = ClosedLoopModel::exact(sys, law, FlowOracleConfig::default()).unwrap();
        let sched = SamplingSchedule::new(vec![0.05, 0.05, 0.05, 0.05], 0.1).unwrap();
        let traj = simulate(&m, &[2.0], &sched, &DisturbanceSignal::zero(4, 1)).unwrap();
        assert_eq!(traj.status, TrajectoryStatus::Escaped { step: 2 });
        assert_eq!(traj.len(), 3);
    }

    #[test]
    fn schedule_and_signal_validation() {
        assert!(SamplingSchedule::new(vec![0.1, 0.0], 0.5).is_err());
        assert!(SamplingSchedule::new(vec![0.5], 0.5).is_err());
        let d = DisturbanceSignal::new(vec![vec![0.5], vec![-2.0], vec![1.0]]).unwrap();
        assert_eq!(d.sup_norm(), 2.0);
        assert_eq!((d.sup_before(0), d.sup_before(1), d.sup_before(3)), (0.0, 0.5, 2.0));
        assert!(DisturbanceSignal::new(vec![vec![0.5], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = example::euler_model();
        let sched = SamplingSchedule::new(vec![0.1, 0.2], 0.5).unwrap();
        let traj = simulate(&m, &[1.0], &sched, &DisturbanceSignal::zero(2, 1)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,t,T_k,x_0,e_0,u_0,status");
        assert!(lines[1].starts_with("0,0.0,0.1,1.0,0.0,"));
        assert!(lines[3].ends_with(",,,complete"));
        assert_eq!(lines.len(), 4);
    }
}
