//! One-step consistency certificates
//! `|F^a(x^a,e,T) - F^b(x^b,e,T)| <= (1+KT)|x^a-x^b| + T rho(T) (max(|x^a|,|x^b|) + phi(|e|))`
//! with `rho(T) = cT`, their composition, the multistep mismatch recursion
//! they induce, and paired-trajectory checks of the multistep bound
//! `|x^a_k - x^b_k| <= eta |xi| + phi(sup_{i<k} |e_i|)`.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closedloop::{simulate, ClosedLoopModel, DisturbanceSignal, SamplingSchedule};
use crate::gain::{fit_envelope, GainFunction};
use crate::rk::{rk_step, ButcherTableau};
use crate::sampling::{on_sphere, open_period, stream_rng, uniform_in_ball, TrialRng};
use crate::systems::{exact_step, ContinuousSystem, FlowOracleConfig};
use crate::{dist, norm, Error, Result};

/// Certificates are never issued for periods below this.
pub const T_STAR_FLOOR: f64 = 1e-4;

/// Inflation applied to every fitted constant.
pub const FIT_SAFETY: f64 = 1.1;

/// Oracle error allowance, as a multiple of the oracle tolerance.
pub const ORACLE_SLACK: f64 = 1e3;

/// Powers tried for the high term of a fitted disturbance gain.
pub const HIGH_POWERS: [f64; 8] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Size of the validation sample.
    pub samples: usize,
    /// Largest `lhs - rhs` seen in validation (nonpositive when valid).
    pub max_violation: f64,
    pub seed: u64,
    /// Least-squares estimate of `c`, reported next to the envelope value used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_c_least_squares: Option<f64>,
    /// Fit samples dropped because a model escaped.
    #[serde(default)]
    pub excluded: usize,
    #[serde(default)]
    pub method: String,
}

/// Empirically validated consistency constants for a pair of models on
/// `|x| <= M`, `|e| <= E`, `T < T*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCertificate {
    #[serde(rename = "K")]
    pub k: f64,
    pub rho_c: f64,
    pub phi: GainFunction,
    #[serde(rename = "T_star")]
    pub t_star: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub fit_report: FitReport,
}

impl ConsistencyCertificate {
    pub fn new(k: f64, rho_c: f64, phi: GainFunction, t_star: f64, m: f64, e: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Invalid(format!("K must be positive, got {k}")));
        }
        if !(rho_c >= 0.0 && rho_c.is_finite()) {
            return Err(Error::Invalid(format!("rho_c must be nonnegative, got {rho_c}")));
        }
        if !(t_star > 0.0) || !(m >= 0.0) || !(e >= 0.0) {
            return Err(Error::Invalid("T* must be positive and M, E nonnegative".into()));
        }
        Ok(Self {
            k,
            rho_c,
            phi,
            t_star,
            m,
            e,
            fit_report: FitReport {
                samples: 0,
                max_violation: 0.0,
                seed: 0,
                rho_c_least_squares: None,
                excluded: 0,
                method: "declared".into(),
            },
        })
    }

    /// `rho(T) = c T`.
    pub fn rho(&self) -> GainFunction {
        GainFunction::linear(self.rho_c).expect("rho_c is nonnegative")
    }

    /// Right-hand side of the one-step inequality.
    pub fn bound(&self, delta: f64, max_norm: f64, e_norm: f64, t: f64) -> f64 {
        (1.0 + self.k * t) * delta + t * self.rho_c * t * (max_norm + self.phi.eval(e_norm))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("parsing {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialises")
    }
}

/// `alpha(delta, T) = (1 + KT) delta + T rho(T) (M + phi(E))`.
pub fn repmc_alpha(cert: &ConsistencyCertificate, delta: f64, t: f64) -> f64 {
    (1.0 + cert.k * t) * delta + t * cert.rho_c * t * (cert.m + cert.phi.eval(cert.e))
}

/// `alpha^k(delta_0, {T_i})` for `k = 0..=periods.len()`.
pub fn alpha_iterates(cert: &ConsistencyCertificate, delta0: f64, periods: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(periods.len() + 1);
    let mut d = delta0;
    out.push(d);
    for &t in periods {
        d = repmc_alpha(cert, d, t);
        out.push(d);
    }
    out
}

/// `rho(T*) e^{K horizon} horizon (M + phi(E))`, the bound on `alpha^k(0)`
/// over schedules with `sum T_i <= horizon`.
pub fn alpha_horizon_bound(cert: &ConsistencyCertificate, horizon: f64) -> f64 {
    cert.rho_c * cert.t_star * (cert.k * horizon).exp() * horizon * (cert.m + cert.phi.eval(cert.e))
}

/// Largest `T* <= cert.T_star` with `rho(T*) <= eta / (e^{K horizon} horizon)`,
/// which keeps `alpha^k(0) <= eta M + eta phi(E)` over the horizon.
pub fn multistep_t_star(cert: &ConsistencyCertificate, eta: f64, horizon: f64) -> f64 {
    if cert.rho_c == 0.0 {
        return cert.t_star;
    }
    let cap = eta / ((cert.k * horizon).exp() * horizon) / cert.rho_c;
    cert.t_star.min(cap)
}

/// Proposition-style composition of `(a, b)` and `(b, c)` certificates:
/// `K = K_ab`, `rho` and `phi` summed, `T* = min`.
pub fn compose_repc(ab: &ConsistencyCertificate, bc: &ConsistencyCertificate) -> Result<ConsistencyCertificate> {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs()));
    if !close(ab.m, bc.m) || !close(ab.e, bc.e) {
        return Err(Error::Invalid(format!(
            "certificates cover different regions: (M, E) = ({}, {}) vs ({}, {})",
            ab.m, ab.e, bc.m, bc.e
        )));
    }
    let mut out = ConsistencyCertificate::new(
        ab.k,
        ab.rho_c + bc.rho_c,
        ab.phi.add(&bc.phi),
        ab.t_star.min(bc.t_star),
        ab.m,
        ab.e,
    )?;
    out.fit_report.method = "composed".into();
    out.fit_report.seed = ab.fit_report.seed;
    Ok(out)
}

/// Composes and then checks the result on a fresh sample of the outer pair.
pub fn compose_and_revalidate(
    ab: &ConsistencyCertificate,
    bc: &ConsistencyCertificate,
    a: &ClosedLoopModel,
    c: &ClosedLoopModel,
    samples: usize,
    seed: u64,
) -> Result<ConsistencyCertificate> {
    let mut cert = compose_repc(ab, bc)?;
    let v = validate_repc(a, c, &cert, samples, seed)?;
    if !v.passed() {
        return Err(Error::NoCertificate(format!(
            "composed certificate fails revalidation: max violation {:e}, {} escapes",
            v.max_violation, v.escapes
        )));
    }
    cert.fit_report.samples = v.samples;
    cert.fit_report.max_violation = v.max_violation;
    cert.fit_report.seed = seed;
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepcParams {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "T_cap")]
    pub t_cap: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub max_violation: f64,
    pub escapes: usize,
    /// Sample realising `max_violation`: `(x^a, x^b, e, T)`.
    pub worst: Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64)>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.escapes == 0 && self.max_violation <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SampleKind {
    SamePoint,
    SamePointDisturbed,
    NearPair,
    FarPair,
}

struct Sample {
    kind: SampleKind,
    xa: Vec<f64>,
    xb: Vec<f64>,
    e: Vec<f64>,
    t: f64,
}

impl Sample {
    fn draw(rng: &mut TrialRng, index: usize, n: usize, q: usize, m: f64, e_rad: f64, t_cap: f64) -> Self {
        let kind = match index % 4 {
            0 => SampleKind::SamePoint,
            1 => SampleKind::SamePointDisturbed,
            2 => SampleKind::NearPair,
            _ => SampleKind::FarPair,
        };
        let xa = if rng.gen::<f64>() < 0.25 {
            on_sphere(rng, n, m)
        } else {
            uniform_in_ball(rng, n, m)
        };
        let xb = match kind {
            SampleKind::SamePoint | SampleKind::SamePointDisturbed => xa.clone(),
            SampleKind::NearPair => {
                let h = 1e-3 * m.max(1e-3) * rng.gen::<f64>();
                let step = on_sphere(rng, n, h);
                let mut p: Vec<f64> = xa.iter().zip(step).map(|(a, d)| a + d).collect();
                let r = norm(&p);
                if r > m && r > 0.0 {
                    p.iter_mut().for_each(|v| *v *= m / r);
                }
                p
            }
            SampleKind::FarPair => uniform_in_ball(rng, n, m),
        };
        let e = match kind {
            SampleKind::SamePoint => vec![0.0; q],
            _ if rng.gen::<f64>() < 0.25 => on_sphere(rng, q, e_rad),
            _ => uniform_in_ball(rng, q, e_rad),
        };
        let t = if rng.gen::<bool>() {
            open_period(rng, t_cap)
        } else {
            let lo = (1e-3 * t_cap).ln();
            let hi = t_cap.ln();
            (lo + (hi - lo) * rng.gen::<f64>()).exp().min(t_cap * (1.0 - 1e-12))
        };
        Sample { kind, xa, xb, e, t }
    }
}

/// One-step outcome of a sample; `None` when either model escaped.
fn evaluate(a: &ClosedLoopModel, b: &ClosedLoopModel, s: &Sample) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let fa = a.step(&s.xa, &s.e, s.t);
    let fb = b.step(&s.xb, &s.e, s.t);
    match (fa, fb) {
        (Ok(fa), Ok(fb)) => Ok(Some((fa, fb))),
        (Err(err), _) | (_, Err(err)) if is_escape(&err) => Ok(None),
        (Err(err), _) | (_, Err(err)) => Err(err),
    }
}

pub(crate) fn is_escape(err: &Error) -> bool {
    matches!(err, Error::FiniteEscape { .. } | Error::MaxStepsExceeded { .. })
}

fn check_pair(a: &ClosedLoopModel, b: &ClosedLoopModel, p: &RepcParams) -> Result<()> {
    if a.state_dim() != b.state_dim() || a.error_dim() != b.error_dim() {
        return Err(Error::Dimension("models differ in state or error dimension".into()));
    }
    if !(p.m >= 0.0 && p.e >= 0.0) {
        return Err(Error::Invalid("M and E must be nonnegative".into()));
    }
    let cap = a.period_cap().min(b.period_cap());
    if !(p.t_cap > 0.0 && p.t_cap <= cap) {
        return Err(Error::Invalid(format!("T_cap = {} must lie in (0, {cap}]", p.t_cap)));
    }
    if p.samples < 4 {
        return Err(Error::Invalid("need at least 4 samples".into()));
    }
    Ok(())
}

fn oracle_slack(a: &ClosedLoopModel, b: &ClosedLoopModel) -> f64 {
    ORACLE_SLACK * a.tolerance().max(b.tolerance())
}

/// Rounding allowance for comparing two computed states.
fn rounding(fa: &[f64], fb: &[f64]) -> f64 {
    16.0 * f64::EPSILON * (norm(fa) + norm(fb))
}

/// Lipschitz estimate of `x -> f(x, U(x, e, T))` from difference quotients
/// at `pairs` sampled pairs, inflated by [`FIT_SAFETY`].
pub fn closed_loop_lipschitz(
    model: &ClosedLoopModel,
    m: f64,
    e_rad: f64,
    t_cap: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let (n, q) = (model.state_dim(), model.error_dim());
    let quotients: Vec<Result<f64>> = (0..pairs)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, (3 << 40) + j as u64);
            let x1 = uniform_in_ball(&mut rng, n, m);
            let x2 = if j % 2 == 0 {
                let h = 1e-4 * m.max(1e-3);
                let mut p: Vec<f64> = x1
                    .iter()
                    .zip(on_sphere(&mut rng, n, h))
                    .map(|(a, d)| a + d)
                    .collect();
                let r = norm(&p);
                if r > m && r > 0.0 {
                    p.iter_mut().for_each(|v| *v *= m / r);
                }
                p
            } else {
                uniform_in_ball(&mut rng, n, m)
            };
            let e = uniform_in_ball(&mut rng, q, e_rad);
            let t = open_period(&mut rng, t_cap);
            let d = dist(&x1, &x2);
            if d == 0.0 {
                return Ok(0.0);
            }
            let f1 = model.closed_loop_field(&x1, &e, t)?;
            let f2 = model.closed_loop_field(&x2, &e, t)?;
            Ok(dist(&f1, &f2) / d)
        })
        .collect();
    let mut k = 0.0_f64;
    for q in quotients {
        k = k.max(q?);
    }
    Ok((FIT_SAFETY * k).max(f64::EPSILON))
}

/// Fits consistency constants for `(a, b)` and validates them on an
/// independent sample, halving `T*` from `T_cap` until validation passes.
///
/// `K` comes from closed-loop vector-field difference quotients of `a`; `c`
/// from the envelope of `|F^a - F^b| / (T^2 |x|)` at coincident points with
/// no error; `phi` from the remaining excess at coincident points with error;
/// `c` is then raised to cover separated pairs. Each constant is inflated by
/// [`FIT_SAFETY`].
pub fn fit_repc(a: &ClosedLoopModel, b: &ClosedLoopModel, p: &RepcParams) -> Result<ConsistencyCertificate> {
    check_pair(a, b, p)?;
    let k = closed_loop_lipschitz(a, p.m, p.e, p.t_cap, p.samples, p.seed)?;
    let mut t_star = p.t_cap;
    let mut round = 0u64;
    loop {
        let (mut cert, excluded, c_ls) = fit_constants(a, b, p, k, t_star, round)?;
        let v = validate_repc(a, b, &cert, p.samples, p.seed.wrapping_add(1 + round))?;
        if v.passed() {
            cert.fit_report = FitReport {
                samples: v.samples,
                max_violation: v.max_violation,
                seed: p.seed,
                rho_c_least_squares: c_ls,
                excluded,
                method: "empirical: sampled fit, validated on an independent sample".into(),
            };
            return Ok(cert);
        }
        let next = t_star / 2.0;
        if next < T_STAR_FLOOR {
            return Err(Error::NoCertificate(format!(
                "validation still fails at T* = {t_star:e}: max violation {:e}, {} escapes",
                v.max_violation, v.escapes
            )));
        }
        t_star = next;
        round += 1;
    }
}

fn fit_constants(
    a: &ClosedLoopModel,
    b: &ClosedLoopModel,
    p: &RepcParams,
    k: f64,
    t_star: f64,
    round: u64,
) -> Result<(ConsistencyCertificate, usize, Option<f64>)> {
    let (n, q) = (a.state_dim(), a.error_dim());
    let slack = oracle_slack(a, b);
    let outcomes: Vec<Result<Option<(Sample, Vec<f64>, Vec<f64>)>>> = (0..p.samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(p.seed, (round << 32) + j as u64);
            let s = Sample::draw(&mut rng, j, n, q, p.m, p.e, t_star);
            Ok(evaluate(a, b, &s)?.map(|(fa, fb)| (s, fa, fb)))
        })
        .collect();
    let mut evaluated = Vec::with_capacity(outcomes.len());
    let mut excluded = 0;
    for o in outcomes {
        match o? {
            Some(v) => evaluated.push(v),
            None => excluded += 1,
        }
    }

    // c from coincident, undisturbed points
    let mut c_env = 0.0_f64;
    let (mut ls_num, mut ls_den) = (0.0, 0.0);
    for (s, fa, fb) in evaluated.iter().filter(|(s, ..)| s.kind == SampleKind::SamePoint) {
        let x = norm(&s.xa);
        let mis = (dist(fa, fb) - slack - rounding(fa, fb)).max(0.0);
        if x > 0.0 {
            let scale = s.t * s.t * x;
            c_env = c_env.max(mis / scale);
            ls_num += mis * scale;
            ls_den += scale * scale;
        }
    }
    let mut c = FIT_SAFETY * c_env;
    let c_ls = (ls_den > 0.0).then(|| ls_num / ls_den);

    // phi from the excess at coincident, disturbed points
    let mut phi_samples = Vec::new();
    for (s, fa, fb) in evaluated.iter().filter(|(s, ..)| s.kind == SampleKind::SamePointDisturbed) {
        let mis = (dist(fa, fb) - slack - rounding(fa, fb)).max(0.0);
        if mis == 0.0 {
            continue;
        }
        let need = if c > 0.0 {
            mis / (c * s.t * s.t) - norm(&s.xa)
        } else {
            // no undisturbed mismatch to scale by: charge it all to phi with c = 1
            mis / (s.t * s.t)
        };
        phi_samples.push((norm(&s.e), need.max(0.0)));
    }
    if c == 0.0 && !phi_samples.is_empty() {
        c = 1.0;
    }
    let phi = fit_envelope(&phi_samples, 1.0, &HIGH_POWERS, FIT_SAFETY)?;

    // raise c so separated pairs are covered too
    let mut c_pair = 0.0_f64;
    for (s, fa, fb) in evaluated
        .iter()
        .filter(|(s, ..)| matches!(s.kind, SampleKind::NearPair | SampleKind::FarPair))
    {
        let delta = dist(&s.xa, &s.xb);
        let lhs = dist(fa, fb) - slack - rounding(fa, fb);
        let excess = lhs - (1.0 + k * s.t) * delta;
        let scale = s.t * s.t * (norm(&s.xa).max(norm(&s.xb)) + phi.eval(norm(&s.e)));
        if excess > 0.0 && scale > 0.0 {
            c_pair = c_pair.max(excess / scale);
        }
    }
    let c = c.max(FIT_SAFETY * c_pair);
    let cert = ConsistencyCertificate::new(k, c, phi, t_star, p.m, p.e)?;
    Ok((cert, excluded, c_ls))
}

/// Checks the certificate's inequality for `(a, b)` on `samples` fresh
/// draws with periods in `(0, T*)`. Escapes count as failures.
pub fn validate_repc(
    a: &ClosedLoopModel,
    b: &ClosedLoopModel,
    cert: &ConsistencyCertificate,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let (n, q) = (a.state_dim(), a.error_dim());
    let slack = oracle_slack(a, b);
    let t_cap = cert.t_star.min(a.period_cap()).min(b.period_cap());
    let outcomes: Vec<Result<(Sample, Option<f64>)>> = (0..samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, (1 << 48) + j as u64);
            let s = Sample::draw(&mut rng, j, n, q, cert.m, cert.e, t_cap);
            let viol = evaluate(a, b, &s)?.map(|(fa, fb)| {
                let delta = dist(&s.xa, &s.xb);
                let max_norm = norm(&s.xa).max(norm(&s.xb));
                let rhs = cert.bound(delta, max_norm, norm(&s.e), s.t);
                dist(&fa, &fb) - rhs - slack - rounding(&fa, &fb)
            });
            Ok((s, viol))
        })
        .collect();
    let mut report = ValidationReport {
        samples,
        max_violation: f64::NEG_INFINITY,
        escapes: 0,
        worst: None,
    };
    for o in outcomes {
        let (s, viol) = o?;
        match viol {
            None => report.escapes += 1,
            Some(v) if v > report.max_violation => {
                report.max_violation = v;
                report.worst = Some((s.xa, s.xb, s.e, s.t));
            }
            Some(_) => {}
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepmcParams {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    /// Time window `sum T_i <= horizon`.
    pub horizon: f64,
    pub eta: f64,
    /// First rung of the halving ladder.
    pub t_start: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    pub t: f64,
    pub passed: bool,
    pub worst_margin: f64,
    pub escapes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepmcReport {
    #[serde(rename = "T_L")]
    pub t_l: f64,
    pub eta: f64,
    pub horizon: f64,
    pub trials: usize,
    pub seed: u64,
    pub ladder: Vec<LadderRung>,
    /// Per-trial worst margin at the accepted rung.
    pub margins: Vec<f64>,
}

/// Period sequence in `(0, cap)` whose sum stays within `horizon`.
pub fn periods_within<R: Rng>(rng: &mut R, cap: f64, horizon: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut total = 0.0;
    loop {
        let t = open_period(rng, cap);
        if total + t > horizon {
            return out;
        }
        total += t;
        out.push(t);
    }
}

/// Disturbance of `len` steps for trial `trial`: a constant vector of norm
/// `e_rad`, i.i.d. uniform draws in the ball, or zero, in rotation.
pub fn trial_disturbance<R: Rng>(rng: &mut R, trial: usize, e_rad: f64, len: usize, q: usize) -> DisturbanceSignal {
    match trial % 3 {
        0 => DisturbanceSignal::constant(&on_sphere(rng, q, e_rad), len),
        1 => DisturbanceSignal::uniform(rng, e_rad, len, q),
        _ => DisturbanceSignal::zero(len, q),
    }
}

/// Initial state for trial `trial`: on the sphere of radius `m` every fourth
/// trial, uniform in the ball otherwise.
pub fn trial_initial_state<R: Rng>(rng: &mut R, trial: usize, m: f64, n: usize) -> Vec<f64> {
    if trial.is_multiple_of(4) {
        on_sphere(rng, n, m)
    } else {
        uniform_in_ball(rng, n, m)
    }
}

/// Worst margin of `eta |xi| + phi(sup_{i<k} |e_i|) - |x^a_k - x^b_k|` over one
/// paired run; `-inf` when either model escapes.
pub fn paired_margin(
    a: &ClosedLoopModel,
    b: &ClosedLoopModel,
    xi: &[f64],
    sched: &SamplingSchedule,
    dist_sig: &DisturbanceSignal,
    eta: f64,
    phi: &GainFunction,
) -> Result<f64> {
    let ta = simulate(a, xi, sched, dist_sig)?;
    let tb = simulate(b, xi, sched, dist_sig)?;
    if ta.escaped() || tb.escaped() {
        return Ok(f64::NEG_INFINITY);
    }
    let slack = oracle_slack(a, b);
    let base = eta * norm(xi);
    let mut worst = f64::INFINITY;
    for (k, (xa, xb)) in ta.states.iter().zip(&tb.states).enumerate() {
        let bound = base + phi.eval(dist_sig.sup_before(k)) + slack;
        worst = worst.min(bound - dist(xa, xb));
    }
    Ok(worst)
}

/// Halving search for the largest period cap `T_L` at which every paired
/// trial satisfies the multistep bound.
pub fn check_repmc(
    a: &ClosedLoopModel,
    b: &ClosedLoopModel,
    p: &RepmcParams,
    phi: &GainFunction,
) -> Result<RepmcReport> {
    if !(p.eta > 0.0) {
        return Err(Error::Invalid(format!("eta must be positive, got {}", p.eta)));
    }
    if !(p.horizon > 0.0) || p.trials == 0 {
        return Err(Error::Invalid("horizon and trial count must be positive".into()));
    }
    if a.state_dim() != b.state_dim() || a.error_dim() != b.error_dim() {
        return Err(Error::Dimension("models differ in state or error dimension".into()));
    }
    let cap = a.period_cap().min(b.period_cap());
    let (n, q) = (a.state_dim(), a.error_dim());
    let mut t = p.t_start.min(cap);
    let mut ladder = Vec::new();
    let mut rung = 0u64;
    while t >= T_STAR_FLOOR {
        let margins: Vec<Result<f64>> = (0..p.trials)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(p.seed, (rung << 32) + i as u64);
                let xi = trial_initial_state(&mut rng, i, p.m, n);
                let periods = periods_within(&mut rng, t, p.horizon);
                let len = periods.len();
                let sched = SamplingSchedule::new(periods, t)?;
                let d = trial_disturbance(&mut rng, i, p.e, len, q);
                paired_margin(a, b, &xi, &sched, &d, p.eta, phi)
            })
            .collect::<Vec<_>>();
        let margins = margins.into_iter().collect::<Result<Vec<f64>>>()?;
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        let escapes = margins.iter().filter(|m| **m == f64::NEG_INFINITY).count();
        let passed = worst >= 0.0;
        ladder.push(LadderRung {
            t,
            passed,
            worst_margin: worst,
            escapes,
        });
        if passed {
            return Ok(RepmcReport {
                t_l: t,
                eta: p.eta,
                horizon: p.horizon,
                trials: p.trials,
                seed: p.seed,
                ladder,
                margins,
            });
        }
        t /= 2.0;
        rung += 1;
    }
    Err(Error::NoAdmissiblePeriod { floor: T_STAR_FLOOR })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchLaw {
    /// `max |F^e - F^Euler| / (T^2 |f(x, u)|)`.
    pub l_bar: f64,
    /// Log-log slope of the mean mismatch against `T`.
    pub slope: f64,
    /// `(T, mean mismatch)` per grid period.
    pub means: Vec<(f64, f64)>,
    /// `(T, max ratio)` per grid period.
    pub ratios: Vec<(f64, f64)>,
    pub excluded_escape: usize,
    pub excluded_equilibrium: usize,
}

/// Points of the box `|x_i| <= x_half`, `|u_j| <= u_half` taken from the
/// Halton sequence.
pub fn box_points(n: usize, m: usize, x_half: f64, u_half: f64, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (1..=count as u64)
        .map(|i| {
            let h = crate::sampling::halton(i, n + m);
            let x = h[..n].iter().map(|v| (2.0 * v - 1.0) * x_half).collect();
            let u = h[n..].iter().map(|v| (2.0 * v - 1.0) * u_half).collect();
            (x, u)
        })
        .collect()
}

/// Open-loop mismatch between the exact and Euler models,
/// `|F^e(x,u,T) - F^Euler(x,u,T)| <= L T^2 |f(x,u)|`, measured on `points`
/// at every `T` of `t_grid`. Points with `|f| < 1e-12` are excluded, as are
/// points where the exact flow escapes.
pub fn euler_mismatch_law(
    sys: &ContinuousSystem,
    points: &[(Vec<f64>, Vec<f64>)],
    t_grid: &[f64],
    cfg: &FlowOracleConfig,
) -> Result<MismatchLaw> {
    if t_grid.len() < 2 {
        return Err(Error::Invalid("need at least two periods to fit a slope".into()));
    }
    let euler = ButcherTableau::euler();
    let mut law = MismatchLaw {
        l_bar: 0.0,
        slope: f64::NAN,
        means: Vec::new(),
        ratios: Vec::new(),
        excluded_escape: 0,
        excluded_equilibrium: 0,
    };
    for &t in t_grid {
        let rows: Vec<Result<Option<(f64, f64)>>> = points
            .par_iter()
            .map(|(x, u)| {
                let f = sys.eval_f(x, u)?;
                let fnorm = norm(&f);
                if fnorm < 1e-12 {
                    return Ok(None);
                }
                let exact = match exact_step(sys, x, u, t, cfg) {
                    Ok(v) => v,
                    Err(e) if is_escape(&e) => return Ok(Some((f64::NAN, f64::NAN))),
                    Err(e) => return Err(e),
                };
                let approx = rk_step(&euler, sys, x, u, t)?;
                let mis = dist(&exact, &approx);
                Ok(Some((mis, mis / (t * t * fnorm))))
            })
            .collect();
        let (mut sum, mut count, mut max_ratio) = (0.0, 0usize, 0.0_f64);
        for r in rows {
            match r? {
                None => law.excluded_equilibrium += 1,
                Some((mis, _)) if mis.is_nan() => law.excluded_escape += 1,
                Some((mis, ratio)) => {
                    sum += mis;
                    count += 1;
                    max_ratio = max_ratio.max(ratio);
                }
            }
        }
        if count == 0 {
            return Err(Error::Invalid(format!("no usable points at T = {t:e}")));
        }
        law.l_bar = law.l_bar.max(max_ratio);
        law.means.push((t, sum / count as f64));
        law.ratios.push((t, max_ratio));
    }
    law.slope = log_log_slope(&law.means);
    Ok(law)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(pts: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
