//! The cubic benchmark: plant `dx/dt = x^3 + u`, target closed loop the Heun
//! model of `dx/dt = -x^3 - 2x`, and the controller that makes the Euler model
//! of the plant match that target.

use std::sync::Arc;

use crate::closedloop::{match_controller, Backend, ClosedLoopModel, DesiredMap};
use crate::expr::{Env, VectorExpression};
use crate::gain::GainFunction;
use crate::rk::ButcherTableau;
use crate::stability::{LyapunovSpec, LyapunovSpecFile};
use crate::systems::{ContinuousSystem, ControlLaw, ErrorKind, FlowOracleConfig};

/// Validity cap of the matched law.
pub const T_U: f64 = 1.0;

/// Lyapunov constant bounding the closed-loop decrease terms.
pub const LYAPUNOV_C: f64 = 670.0;

/// Slope of the error gate `rho(s) = s / RHO_GAIN`.
pub const RHO_GAIN: f64 = 0.01;

pub fn plant() -> ContinuousSystem {
    ContinuousSystem::parse(1, 1, &["x^3 + u"]).expect("valid plant")
}

/// `f_d(x) = -x^3 - 2x`.
pub fn desired_field() -> VectorExpression {
    VectorExpression::parse(&["-x^3 - 2*x"], &Env::new().var("x", 1)).expect("valid field")
}

pub fn heun_target() -> DesiredMap {
    DesiredMap::RungeKutta {
        tableau: ButcherTableau::heun(),
        field: desired_field(),
    }
}

/// The matched controller, built symbolically with the `1/T` cancelled.
pub fn matched_law() -> ControlLaw {
    match_controller(&ButcherTableau::euler(), &heun_target(), &plant(), T_U).expect("plant is affine")
}

/// The same controller written with the explicit division by `T`.
pub fn d3_law() -> ControlLaw {
    let z = "(x+e)";
    let fd = |s: &str| format!("(-({s})^3 - 2*({s}))");
    let heun = format!("({z} + T/2*({} + {}))", fd(z), fd(&format!("{z} + T*{}", fd(z))));
    let u = format!("({heun} - x - e)/T - {z}^3");
    ControlLaw::parse(1, 1, ErrorKind::StateMeasurement, T_U, &[u]).expect("valid law")
}

fn model(backend: Backend) -> ClosedLoopModel {
    ClosedLoopModel::new(backend, Arc::new(plant()), Arc::new(matched_law())).expect("dimensions agree")
}

pub fn euler_model() -> ClosedLoopModel {
    model(Backend::RungeKutta(ButcherTableau::euler()))
}

pub fn heun_model() -> ClosedLoopModel {
    model(Backend::RungeKutta(ButcherTableau::heun()))
}

pub fn exact_model() -> ClosedLoopModel {
    exact_model_with(FlowOracleConfig::default())
}

pub fn exact_model_with(cfg: FlowOracleConfig) -> ClosedLoopModel {
    model(Backend::Exact(cfg))
}

/// The Heun model of `f_d` as a disturbance-free closed loop: plant
/// `f_d(x) + u` under the zero law.
pub fn heun_reference_model() -> ClosedLoopModel {
    let sys = ContinuousSystem::parse(1, 1, &["-x^3 - 2*x + u"]).expect("valid plant");
    let law = ControlLaw::parse(1, 1, ErrorKind::StateMeasurement, T_U, &["0"]).expect("valid law");
    ClosedLoopModel::new(Backend::RungeKutta(ButcherTableau::heun()), Arc::new(sys), Arc::new(law))
        .expect("dimensions agree")
}

/// `x + T/2 (f_d(x) + f_d(x + T f_d(x)))` in plain arithmetic.
pub fn heun_reference(x: f64, t: f64) -> f64 {
    let fd = |v: f64| -v * v * v - 2.0 * v;
    let k1 = fd(x);
    let k2 = fd(x + t * k1);
    x + t * (0.5 * k1 + 0.5 * k2)
}

/// `s^9 + 3 s^7 + 3 s^5`, the disturbance gain claimed for `|f(0, U(0, e, T))|`.
pub fn claimed_phi() -> GainFunction {
    GainFunction::new(vec![(1.0, 9.0), (3.0, 7.0), (3.0, 5.0)]).expect("valid gain")
}

/// `min{1 / (C (1 + sum_{i=1}^{8} M^{2i})), 1}`.
pub fn t_tilde(m: f64) -> f64 {
    let sum: f64 = (1..=8).map(|i| m.powi(2 * i)).sum();
    (1.0 / (LYAPUNOV_C * (1.0 + sum))).min(1.0)
}

/// `V = x^2`, `alpha_1 = alpha_2 = s^2`, `alpha_3 = s^2 / 2`, gate
/// `|x| >= |e| / 0.01`, decrease checked for `T < t_tilde(m)`.
pub fn lyapunov_spec(m: f64) -> LyapunovSpec {
    LyapunovSpec::from_file(&lyapunov_spec_file(m)).expect("valid spec")
}

pub fn lyapunov_spec_file(m: f64) -> LyapunovSpecFile {
    LyapunovSpecFile {
        v: "x^2".into(),
        state_dim: 1,
        alpha1_k: 1.0,
        alpha2_k: 1.0,
        alpha3_k: 0.5,
        n: 2.0,
        rho_gain: RHO_GAIN,
        t_tilde: t_tilde(m),
    }
}
