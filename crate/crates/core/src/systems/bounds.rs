use serde::{Deserialize, Serialize};

use super::{ContinuousSystem, ControlLaw};
use crate::sampling::{cube_to_ball, halton};
use crate::{Error, Result};

/// Inflation applied to sampled suprema.
pub const SUP_SAFETY: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupBounds {
    pub c_f: f64,
    pub c_u: f64,
}

/// Pushes a ball point onto the sphere of `radius` (the origin stays put).
fn to_sphere(p: &[f64], radius: f64) -> Vec<f64> {
    let n = crate::norm(p);
    if n == 0.0 {
        return p.to_vec();
    }
    p.iter().map(|v| v * radius / n).collect()
}

/// Sampled `sup |f(x, u)|` over `|x| <= x_radius`, `|u| <= u_radius`, times
/// [`SUP_SAFETY`]. The point set is the first `samples` Halton points mapped
/// into the product of balls, plus each point pushed to the bounding spheres.
pub fn sup_field(sys: &ContinuousSystem, x_radius: f64, u_radius: f64, samples: usize) -> Result<f64> {
    let (n, m) = (sys.n, sys.m);
    let mut sup = 0.0_f64;
    for i in 1..=samples as u64 {
        let h = halton(i, n + m);
        let x = cube_to_ball(&h[..n], x_radius);
        let u = cube_to_ball(&h[n..], u_radius);
        let xs = to_sphere(&x, x_radius);
        let us = to_sphere(&u, u_radius);
        for (xx, uu) in [(&x, &u), (&xs, &us)] {
            sup = sup.max(crate::norm(&sys.eval_f(xx, uu)?));
        }
    }
    Ok(sup * SUP_SAFETY)
}

/// Sampled `sup |U(x, e, T)|` over `|x| <= m_radius`, `|e| <= e_radius`,
/// `T` in `(0, t_cap)`, times [`SUP_SAFETY`].
pub fn sup_control(
    law: &ControlLaw,
    m_radius: f64,
    e_radius: f64,
    t_cap: f64,
    samples: usize,
) -> Result<f64> {
    if !(t_cap > 0.0 && t_cap <= law.t_u()) {
        return Err(Error::Invalid(format!(
            "period cap {t_cap} must lie in (0, T_u = {}]",
            law.t_u()
        )));
    }
    let (n, q) = (law.state_dim(), law.error_dim());
    let mut sup = 0.0_f64;
    for i in 1..=samples as u64 {
        let h = halton(i, n + q + 1);
        let x = cube_to_ball(&h[..n], m_radius);
        let e = cube_to_ball(&h[n..n + q], e_radius);
        let t = h[n + q] * t_cap;
        if !(t > 0.0) {
            continue;
        }
        let xs = to_sphere(&x, m_radius);
        let es = to_sphere(&e, e_radius);
        for (xx, ee) in [(&x, &e), (&xs, &es)] {
            sup = sup.max(crate::norm(&law.apply(xx, ee, t)?));
        }
    }
    Ok(sup * SUP_SAFETY)
}

/// Bounds `C_u` on the control over `|x| <= M`, `|e| <= E`, `T < t_cap`, and
/// `C_f` on the vector field over `|x| <= 2M`, `|u| <= C_u`.
pub fn estimate_sup_bounds(
    sys: &ContinuousSystem,
    law: &ControlLaw,
    m_radius: f64,
    e_radius: f64,
    t_cap: f64,
    samples: usize,
) -> Result<SupBounds> {
    if samples < 1000 {
        return Err(Error::Invalid(format!("need at least 1000 samples, got {samples}")));
    }
    if !(m_radius >= 0.0 && e_radius >= 0.0) {
        return Err(Error::Invalid("radii must be nonnegative".into()));
    }
    let c_u = sup_control(law, m_radius, e_radius, t_cap, samples)?;
    let c_f = sup_field(sys, 2.0 * m_radius, c_u, samples)?;
    Ok(SupBounds { c_f, c_u })
}
