use serde::{Deserialize, Serialize};

use super::VectorField;
use crate::{Error, Result};

/// Accuracy and safety limits of the exact-model integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowOracleConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
    /// A rejected step that would need to shrink below this is a blow-up.
    pub min_step: f64,
    /// State norm treated as escape.
    pub ceiling: f64,
}

impl Default for FlowOracleConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_steps: 1_000_000,
            min_step: 1e-14,
            ceiling: 1e8,
        }
    }
}

impl FlowOracleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.abs_tol > 0.0
            && self.rel_tol > 0.0
            && self.max_steps > 0
            && self.min_step > 0.0
            && self.ceiling > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("oracle settings must be positive: {self:?}")))
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.abs_tol = tol;
        self.rel_tol = tol;
        self
    }
}

// Dormand-Prince 5(4) coefficients. The field is autonomous under a held
// input, so the node vector is not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights equal the last row of `A` (FSAL).
const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Fifth- minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
// PI controller exponents for an order-5 error estimate
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;

/// Flow of `dx/dt = f(x, u)` with `u` held constant, from `x` over `t`.
///
/// Dormand-Prince 5(4) with a PI step-size controller and mixed
/// absolute/relative error control. Blow-up (state norm above
/// `cfg.ceiling`, or the step size collapsing below `cfg.min_step`) is
/// reported as [`Error::FiniteEscape`].
pub fn exact_step<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    u: &[f64],
    t: f64,
    cfg: &FlowOracleConfig,
) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Invalid(format!("flow duration must be positive, got {t}")));
    }
    if x.len() != field.state_dim() || u.len() != field.input_dim() {
        return Err(Error::Dimension(format!(
            "flow expects x in R^{} and u in R^{}",
            field.state_dim(),
            field.input_dim()
        )));
    }
    let n = x.len();
    let mut y = x.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    field.eval(&y, u, &mut k[0])?;
    if y.iter().chain(&k[0]).any(|v| !v.is_finite()) {
        return Err(escape(0.0, "non-finite initial state or derivative"));
    }

    let mut h = initial_step(field, &y, u, &k[0], t, cfg)?;
    let mut now = 0.0;
    let mut err_prev: f64 = 1e-4;
    let mut steps = 0usize;
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut last_rejected = false;

    while now < t {
        if steps >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
            });
        }
        steps += 1;
        let remaining = t - now;
        // finish exactly at t; avoid leaving a sliver behind
        let last = h >= remaining || remaining - h < 1e-3 * h;
        if last {
            h = remaining;
        }

        let mut finite = true;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = y[i] + h * acc;
            }
            field.eval(&stage, u, &mut k[s])?;
            if k[s].iter().any(|v| !v.is_finite()) {
                finite = false;
                break;
            }
        }

        let mut err = f64::INFINITY;
        if finite {
            let mut sq = 0.0;
            for i in 0..n {
                let mut acc = 0.0;
                let mut est = 0.0;
                for s in 0..7 {
                    acc += B[s] * k[s][i];
                    est += E[s] * k[s][i];
                }
                y_new[i] = y[i] + h * acc;
                let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
                let r = h * est / sc;
                sq += r * r;
            }
            err = (sq / n as f64).sqrt();
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                err = f64::INFINITY;
            }
        }

        if err <= 1.0 {
            now = if last { t } else { now + h };
            std::mem::swap(&mut y, &mut y_new);
            // FSAL: the last stage was evaluated at the accepted point
            let (first, rest) = k.split_at_mut(6);
            first[0].copy_from_slice(&rest[0]);
            if crate::norm(&y) > cfg.ceiling {
                return Err(escape(now, &format!("state norm exceeded {:e}", cfg.ceiling)));
            }
            let err_c = err.max(1e-10);
            let mut fac = SAFETY * err_c.powf(-ALPHA) * err_prev.powf(BETA);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            err_prev = err_c;
            last_rejected = false;
        } else {
            let fac = if err.is_finite() {
                (SAFETY * err.powf(-1.0 / 5.0)).clamp(0.1, 1.0)
            } else {
                0.1
            };
            h *= fac;
            last_rejected = true;
            if h < cfg.min_step {
                return Err(escape(now, &format!("step size fell below {:e}", cfg.min_step)));
            }
        }
    }
    Ok(y)
}

fn escape(time: f64, reason: &str) -> Error {
    Error::FiniteEscape {
        time,
        reason: reason.to_string(),
    }
}

/// Starting step size after Hairer, Norsett & Wanner (II.4).
fn initial_step<F: VectorField + ?Sized>(
    field: &F,
    y: &[f64],
    u: &[f64],
    f0: &[f64],
    t: f64,
    cfg: &FlowOracleConfig,
) -> Result<f64> {
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| cfg.abs_tol + cfg.rel_tol * v.abs()).collect();
    let rms = |v: &[f64]| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / n as f64).sqrt()
    };
    let d0 = rms(y);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(t);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; n];
    field.eval(&y1, u, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let dmax = d1.max(d2);
    let h1 = if !dmax.is_finite() {
        h0 * 1e-3
    } else if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(t).max(cfg.min_step.min(t)))
}

/// States at `t * j / points` for `j = 1..=points`, integrating piecewise
/// from `x` with `u` held constant.
pub fn flow_samples<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    u: &[f64],
    t: f64,
    points: usize,
    cfg: &FlowOracleConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(points);
    let mut cur = x.to_vec();
    let mut prev_time = 0.0;
    for j in 1..=points {
        let time = t * j as f64 / points as f64;
        cur = exact_step(field, &cur, u, time - prev_time, cfg)?;
        prev_time = time;
        out.push(cur.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::ContinuousSystem;

    fn cubic() -> ContinuousSystem {
        ContinuousSystem::parse(1, 1, &["x^3 + u"]).unwrap()
    }

    #[test]
    fn equilibrium_stays_put() {
        let x = exact_step(&cubic(), &[0.0], &[0.0], 1.0, &FlowOracleConfig::default()).unwrap();
        assert_eq!(x, vec![0.0]);
    }

    #[test]
    fn linear_decay_matches_closed_form() {
        let sys = ContinuousSystem::parse(1, 1, &["-x + u"]).unwrap();
        let x = exact_step(&sys, &[1.0], &[0.0], 1.0, &FlowOracleConfig::default()).unwrap();
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-9, "{}", x[0]);
    }

    #[test]
    fn cubic_blow_up_is_an_escape() {
        // x' = x^3 from 2 blows up at t = 1/8
        let err = exact_step(&cubic(), &[2.0], &[0.0], 0.2, &FlowOracleConfig::default()).unwrap_err();
        match err {
            Error::FiniteEscape { time, .. } => assert!(time <= 0.125 + 1e-9, "{time}"),
            other => panic!("{other:?}"),
        }
        // just before the blow-up time the flow still exists
        let x = exact_step(&cubic(), &[2.0], &[0.0], 0.1, &FlowOracleConfig::default()).unwrap();
        let exact = 1.0 / (0.25f64 - 2.0 * 0.1).sqrt();
        assert!((x[0] - exact).abs() < 1e-7 * exact, "{} vs {exact}", x[0]);
    }

    #[test]
    fn step_budget_is_enforced() {
        let cfg = FlowOracleConfig {
            max_steps: 3,
            ..Default::default()
        };
        let sys = ContinuousSystem::parse(1, 1, &["-x + u"]).unwrap();
        assert!(matches!(
            exact_step(&sys, &[1.0], &[0.0], 50.0, &cfg),
            Err(Error::MaxStepsExceeded { .. })
        ));
    }

    #[test]
    fn dense_samples_end_at_full_step() {
        let sys = ContinuousSystem::parse(1, 1, &["-x + u"]).unwrap();
        let cfg = FlowOracleConfig::default();
        let pts = flow_samples(&sys, &[1.0], &[0.5], 0.8, 8, &cfg).unwrap();
        assert_eq!(pts.len(), 8);
        let direct = exact_step(&sys, &[1.0], &[0.5], 0.8, &cfg).unwrap();
        assert!((pts[7][0] - direct[0]).abs() < 1e-9);
        let mid = 0.5 + 0.5 * (-0.4f64).exp();
        assert!((pts[3][0] - mid).abs() < 1e-9);
    }
}
