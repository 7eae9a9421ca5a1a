//! Semiglobal exponential ISS certificates
//! `|x_k| <= K |x_0| e^{-lambda t_k} + gamma(sup_{i<k} |e_i|)` for periods below
//! `T*(M, E)`: sampled verification, fitting, admissible-period search,
//! transfer between models, Lyapunov grid checks and intersample envelopes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::closedloop::{simulate, ClosedLoopModel, DisturbanceSignal, SamplingSchedule, Trajectory};
use crate::consistency::{
    is_escape, trial_disturbance, trial_initial_state, ConsistencyCertificate, FIT_SAFETY, HIGH_POWERS,
    ORACLE_SLACK,
};
use crate::expr::{Env, Expression};
use crate::gain::{fit_envelope, GainFunction};
use crate::sampling::stream_rng;
use crate::systems::{estimate_sup_bounds, flow_samples};
use crate::{dist, norm, Error, Result};

/// Level the decaying term must reach within the verification horizon.
pub const DECAY_FLOOR: f64 = 1e-6;

/// Iterations of the admissible-period bisection.
pub const BISECTION_STEPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Fitted,
    Transferred,
    Declared,
}

/// `(M, E, T*)`: the bound holds for `|x_0| <= M`, `sup |e_i| <= E` and all
/// periods in `(0, T*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TStarEntry(pub f64, pub f64, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssCertificate {
    #[serde(rename = "K")]
    pub k: f64,
    pub lambda: f64,
    pub gamma: GainFunction,
    #[serde(rename = "T_star_table", default)]
    pub t_star_table: Vec<TStarEntry>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub report: serde_json::Value,
}

impl IssCertificate {
    pub fn new(k: f64, lambda: f64, gamma: GainFunction, provenance: Provenance) -> Result<Self> {
        if !(k >= 1.0 && k.is_finite()) {
            return Err(Error::Invalid(format!("overshoot K must be >= 1, got {k}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid(format!("decay rate must be positive, got {lambda}")));
        }
        Ok(Self {
            k,
            lambda,
            gamma,
            t_star_table: Vec::new(),
            provenance,
            report: serde_json::Value::Null,
        })
    }

    /// `beta(r, t) = K r e^{-lambda t}`.
    pub fn beta(&self, r: f64, t: f64) -> f64 {
        self.k * r * (-self.lambda * t).exp()
    }

    pub fn bound(&self, x0_norm: f64, t: f64, sup_e: f64) -> f64 {
        self.beta(x0_norm, t) + self.gamma.eval(sup_e)
    }

    /// Time for the decaying term from `|x_0| = m` to reach [`DECAY_FLOOR`].
    pub fn horizon(&self, m: f64) -> f64 {
        let ratio = self.k * m / DECAY_FLOOR;
        if ratio > std::f64::consts::E {
            ratio.ln() / self.lambda
        } else {
            1.0 / self.lambda
        }
    }

    /// Records `T*(m, e) = t`. Entries stay nonincreasing in `(M, E)`: the
    /// new value is capped by every entry covering a smaller region, and
    /// entries covering larger regions are capped by it. Lowering a period
    /// cap is always sound.
    pub fn insert_t_star(&mut self, m: f64, e: f64, t: f64) {
        let mut t = t;
        for entry in &self.t_star_table {
            if entry.0 <= m && entry.1 <= e {
                t = t.min(entry.2);
            }
        }
        for entry in &mut self.t_star_table {
            if entry.0 >= m && entry.1 >= e {
                entry.2 = entry.2.min(t);
            }
        }
        match self.t_star_table.iter_mut().find(|en| en.0 == m && en.1 == e) {
            Some(entry) => entry.2 = entry.2.min(t),
            None => self.t_star_table.push(TStarEntry(m, e, t)),
        }
        self.t_star_table
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    }

    /// Largest recorded `T*` whose region contains `(m, e)`.
    pub fn t_star_for(&self, m: f64, e: f64) -> Option<f64> {
        self.t_star_table
            .iter()
            .filter(|en| en.0 >= m && en.1 >= e)
            .map(|en| en.2)
            .reduce(f64::max)
    }

    /// True when no entry covering a larger region has a larger `T*`.
    pub fn table_is_monotone(&self) -> bool {
        self.t_star_table.iter().all(|a| {
            self.t_star_table
                .iter()
                .all(|b| !(a.0 <= b.0 && a.1 <= b.1) || a.2 >= b.2)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("reading {}: {e}", path.display())))?;
        let cert: Self =
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("parsing {}: {e}", path.display())))?;
        Self::new(cert.k, cert.lambda, cert.gamma.clone(), cert.provenance)?;
        Ok(cert)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssParams {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    /// Periods are drawn from `(0, T_try)`.
    #[serde(rename = "T_try")]
    pub t_try: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Inputs of a violating trial, enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssWitness {
    pub trial: usize,
    pub step: usize,
    pub x0: Vec<f64>,
    pub periods: Vec<f64>,
    pub errors: Vec<Vec<f64>>,
    pub state_norm: f64,
    pub bound: f64,
    pub escaped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssReport {
    pub pass: bool,
    pub trials: usize,
    pub violations: usize,
    pub escapes: usize,
    pub worst_margin: f64,
    pub horizon: f64,
    #[serde(rename = "T_try")]
    pub t_try: f64,
    pub seed: u64,
    pub witness: Option<IssWitness>,
}

struct TrialRun {
    x0: Vec<f64>,
    sched: SamplingSchedule,
    dist: DisturbanceSignal,
    traj: Trajectory,
}

fn initial_state(rng: &mut crate::sampling::TrialRng, trial: usize, m: f64, n: usize) -> Vec<f64> {
    if trial % 8 == 7 {
        vec![0.0; n]
    } else {
        trial_initial_state(rng, trial, m, n)
    }
}

fn run_trial(model: &ClosedLoopModel, p: &IssParams, horizon: f64, trial: usize, stream_base: u64) -> Result<TrialRun> {
    let mut rng = stream_rng(p.seed, stream_base + trial as u64);
    let x0 = initial_state(&mut rng, trial, p.m, model.state_dim());
    let sched = SamplingSchedule::random_until(&mut rng, p.t_try, horizon)?;
    let dist = trial_disturbance(&mut rng, trial, p.e, sched.len(), model.error_dim());
    let traj = simulate(model, &x0, &sched, &dist)?;
    Ok(TrialRun { x0, sched, dist, traj })
}

fn check_params(model: &ClosedLoopModel, p: &IssParams) -> Result<()> {
    if !(p.m >= 0.0 && p.e >= 0.0) {
        return Err(Error::Invalid("M and E must be nonnegative".into()));
    }
    if !(p.t_try > 0.0 && p.t_try <= model.period_cap()) {
        return Err(Error::Invalid(format!(
            "T_try = {} must lie in (0, {}]",
            p.t_try,
            model.period_cap()
        )));
    }
    if p.trials == 0 {
        return Err(Error::Invalid("need at least one trial".into()));
    }
    Ok(())
}

/// Runs `trials` random trials and checks the ISS bound at every sampling
/// instant up to the horizon at which `K M e^{-lambda t}` reaches
/// [`DECAY_FLOOR`]. Initial states lie on the sphere of radius `M` (every
/// fourth trial), at the origin (every eighth) or uniformly in the ball;
/// disturbances rotate through constant vectors of norm `E`, uniform draws and
/// zero. Escapes count as violations.
pub fn verify_iss(model: &ClosedLoopModel, cert: &IssCertificate, p: &IssParams) -> Result<IssReport> {
    check_params(model, p)?;
    let horizon = cert.horizon(p.m);
    let slack = ORACLE_SLACK * model.tolerance();
    let outcomes: Vec<Result<(f64, Option<IssWitness>)>> = (0..p.trials)
        .into_par_iter()
        .map(|i| {
            let run = run_trial(model, p, horizon, i, 0)?;
            let x0n = norm(&run.x0);
            let mut worst = f64::INFINITY;
            let mut first: Option<(usize, f64, f64)> = None;
            for (k, x) in run.traj.states.iter().enumerate() {
                let bound = cert.bound(x0n, run.traj.times[k], run.dist.sup_before(k));
                let xn = norm(x);
                let margin = bound + slack - xn;
                worst = worst.min(margin);
                if margin < 0.0 && first.is_none() {
                    first = Some((k, xn, bound));
                }
            }
            let escaped = run.traj.escaped();
            if escaped {
                worst = f64::NEG_INFINITY;
            }
            let witness = match (first, escaped) {
                (None, false) => None,
                (hit, _) => {
                    let (step, state_norm, bound) = hit.unwrap_or((run.traj.len(), f64::INFINITY, f64::NAN));
                    let upto = step.min(run.sched.len());
                    Some(IssWitness {
                        trial: i,
                        step,
                        x0: run.x0.clone(),
                        periods: run.sched.periods()[..upto].to_vec(),
                        errors: run.dist.values()[..upto].to_vec(),
                        state_norm,
                        bound,
                        escaped,
                    })
                }
            };
            Ok((worst, witness))
        })
        .collect();
    let mut report = IssReport {
        pass: true,
        trials: p.trials,
        violations: 0,
        escapes: 0,
        worst_margin: f64::INFINITY,
        horizon,
        t_try: p.t_try,
        seed: p.seed,
        witness: None,
    };
    for o in outcomes {
        let (worst, witness) = o?;
        if worst < report.worst_margin {
            report.worst_margin = worst;
        }
        if let Some(w) = witness {
            report.violations += 1;
            if w.escaped {
                report.escapes += 1;
            }
            if report.witness.is_none() {
                report.witness = Some(w);
            }
        }
    }
    report.pass = report.violations == 0;
    Ok(report)
}

/// Longest disturbance-free fitting run before giving up on decay.
const FIT_HORIZON_CAP: f64 = 1e3;

/// Fits `(K, lambda, gamma)` from simulated runs and self-verifies the result.
///
/// Disturbance-free runs from `|x_0| <= M` give `lambda` as 0.9 times the
/// slowest tail decay slope of `ln |x_k|` and `K` as 1.1 times the envelope of
/// `|x_k| e^{lambda t_k} / |x_0|`. Disturbed runs at `E/8, E/4, E/2, E` give
/// `gamma` as 1.1 times the envelope of the excess over `beta`. If the
/// certificate fails [`verify_iss`] on fresh trials, it is loosened and
/// rechecked up to three times.
pub fn fit_iss(model: &ClosedLoopModel, p: &IssParams) -> Result<IssCertificate> {
    check_params(model, p)?;
    let slack = ORACLE_SLACK * model.tolerance();

    // decay rate and overshoot from disturbance-free runs
    let free = IssParams { e: 0.0, ..*p };
    let mut horizon = 8.0;
    let runs = loop {
        let runs: Vec<TrialRun> = (0..p.trials)
            .into_par_iter()
            .map(|i| run_trial(model, &free, horizon, i, 1 << 40))
            .collect::<Result<_>>()?;
        if let Some(r) = runs.iter().find(|r| r.traj.escaped()) {
            return Err(Error::NoCertificate(format!(
                "disturbance-free run from |x0| = {:e} escaped",
                norm(&r.x0)
            )));
        }
        let decayed = runs.iter().all(|r| {
            let x0 = norm(&r.x0);
            x0 == 0.0 || norm(r.traj.final_state()) <= DECAY_FLOOR * x0.max(1.0)
        });
        if decayed {
            break runs;
        }
        if horizon >= FIT_HORIZON_CAP {
            return Err(Error::NoCertificate(format!(
                "disturbance-free runs do not decay to {DECAY_FLOOR:e} within t = {horizon}"
            )));
        }
        horizon *= 2.0;
    };
    let floor = |x0: f64| (1e-9 * x0).max(slack).max(1e-300);
    let mut lambda = f64::INFINITY;
    for r in &runs {
        let x0 = norm(&r.x0);
        if x0 == 0.0 {
            continue;
        }
        let pts: Vec<(f64, f64)> = r
            .traj
            .states
            .iter()
            .zip(&r.traj.times)
            .filter(|(x, _)| norm(x) > floor(x0))
            .map(|(x, &t)| (t, norm(x).ln()))
            .collect();
        if pts.len() < 4 {
            continue;
        }
        let tail = &pts[pts.len() / 2..];
        lambda = lambda.min(-least_squares_slope(tail));
    }
    if !lambda.is_finite() {
        // every run starts at the origin or decays within a few steps
        lambda = 1.0;
    }
    if !(lambda > 0.0) {
        return Err(Error::NoCertificate(format!("runs do not decay (slope {:e})", -lambda)));
    }
    lambda *= 0.9;
    let mut k = 1.0_f64;
    for r in &runs {
        let x0 = norm(&r.x0);
        if x0 == 0.0 {
            continue;
        }
        for (x, &t) in r.traj.states.iter().zip(&r.traj.times) {
            let xn = norm(x);
            if xn > floor(x0) {
                k = k.max(xn * (lambda * t).exp() / x0);
            }
        }
    }
    k = (FIT_SAFETY * k).max(1.0);
    let mut cert = IssCertificate::new(k, lambda, GainFunction::zero(), Provenance::Fitted)?;

    // gain from disturbed runs
    if p.e > 0.0 {
        let horizon = cert.horizon(p.m);
        let per_level = (p.trials / 4).max(8);
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (level, frac) in [0.125, 0.25, 0.5, 1.0].into_iter().enumerate() {
            let lp = IssParams {
                e: p.e * frac,
                trials: per_level,
                ..*p
            };
            let base = (2 << 40) + ((level as u64) << 32);
            let runs: Vec<TrialRun> = (0..per_level)
                .into_par_iter()
                // skip the zero-disturbance rotation slot
                .map(|i| run_trial(model, &lp, horizon, 3 * (i / 2) + i % 2, base))
                .collect::<Result<_>>()?;
            for r in &runs {
                if r.traj.escaped() {
                    return Err(Error::NoCertificate(format!(
                        "disturbed run with |e| <= {:e} escaped",
                        lp.e
                    )));
                }
                let x0 = norm(&r.x0);
                for (kk, x) in r.traj.states.iter().enumerate() {
                    let excess = norm(x) - cert.beta(x0, r.traj.times[kk]) - slack;
                    if excess > 0.0 {
                        samples.push((r.dist.sup_before(kk), excess));
                    }
                }
            }
        }
        cert.gamma = fit_envelope(&samples, 1.0, &HIGH_POWERS, FIT_SAFETY)?;
    }

    // self-verification on fresh trials
    let check = IssParams {
        seed: p.seed.wrapping_add(0x9e37_79b9),
        ..*p
    };
    for round in 0..4 {
        let report = verify_iss(model, &cert, &check)?;
        if report.pass {
            cert.insert_t_star(p.m, p.e, p.t_try);
            cert.report = serde_json::json!({
                "method": "empirical: envelope fit, self-verified on fresh trials",
                "fit_seed": p.seed,
                "verification": report,
                "loosening_rounds": round,
            });
            return Ok(cert);
        }
        if round == 3 {
            return Err(Error::NoCertificate(format!(
                "fitted certificate fails self-verification ({} of {} trials violate, worst margin {:e})",
                report.violations, report.trials, report.worst_margin
            )));
        }
        cert.lambda *= 0.8;
        cert.k *= 1.25;
        cert.gamma = cert.gamma.scale(1.5);
    }
    unreachable!()
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Where the certificate tested at each candidate period comes from.
#[derive(Debug, Clone, Copy)]
pub enum CertSource<'a> {
    /// Verify one certificate at every candidate.
    Fixed(&'a IssCertificate),
    /// Fit a fresh certificate at every candidate.
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TStarSearch {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "T_lo")]
    pub t_lo: f64,
    #[serde(rename = "T_hi")]
    pub t_hi: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TStarResult {
    #[serde(rename = "T_star")]
    pub t_star: f64,
    /// Certificate valid at `T_star`, with the entry recorded in its table.
    pub certificate: IssCertificate,
    /// `(T, passed)` for every probe, in order.
    pub probes: Vec<(f64, bool)>,
}

/// Bisection for the largest period cap at which the certificate holds,
/// assuming pass/fail is monotone in the cap, followed by a downward sweep at
/// four smaller caps that demotes the result if any of them fails.
pub fn find_t_star(model: &ClosedLoopModel, source: CertSource<'_>, s: &TStarSearch) -> Result<TStarResult> {
    if !(s.t_lo > 0.0 && s.t_lo < s.t_hi) {
        return Err(Error::Invalid(format!("need 0 < T_lo < T_hi, got {} and {}", s.t_lo, s.t_hi)));
    }
    let mut probes = Vec::new();
    let mut probe = |t: f64| -> Result<Option<IssCertificate>> {
        let p = IssParams {
            m: s.m,
            e: s.e,
            t_try: t,
            trials: s.trials,
            seed: s.seed,
        };
        let out = match source {
            CertSource::Fixed(cert) => verify_iss(model, cert, &p)?.pass.then(|| cert.clone()),
            CertSource::Fit => match fit_iss(model, &p) {
                Ok(c) => Some(c),
                Err(Error::NoCertificate(_)) => None,
                Err(e) => return Err(e),
            },
        };
        probes.push((t, out.is_some()));
        Ok(out)
    };
    // small caps need many steps per trial, so the floor is only probed when
    // the top of the bracket fails
    let (mut best, mut best_cert) = match probe(s.t_hi)? {
        Some(c) => (s.t_hi, c),
        None => {
            let Some(lo_cert) = probe(s.t_lo)? else {
                return Err(Error::NoAdmissiblePeriod { floor: s.t_lo });
            };
            let (mut best, mut best_cert) = (s.t_lo, lo_cert);
            let mut hi = s.t_hi;
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (best + hi);
                match probe(mid)? {
                    Some(c) => {
                        best = mid;
                        best_cert = c;
                    }
                    None => hi = mid,
                }
            }
            (best, best_cert)
        }
    };
    // downward sweep
    let sweep: Vec<f64> = (1..=4)
        .map(|j| best * (1.0 - j as f64 / 5.0))
        .filter(|&t| t > s.t_lo)
        .collect();
    let mut results = Vec::new();
    for &t in &sweep {
        results.push((t, probe(t)?));
    }
    if let Some(fail_idx) = results.iter().rposition(|(_, c)| c.is_none()) {
        match results[fail_idx + 1..].iter().find(|(_, c)| c.is_some()) {
            Some((t, c)) => {
                best = *t;
                best_cert = c.clone().expect("passing probe");
            }
            None => {
                best = s.t_lo;
                best_cert = probe(s.t_lo)?.ok_or(Error::NoAdmissiblePeriod { floor: s.t_lo })?;
            }
        }
    }
    best_cert.insert_t_star(s.m, s.e, best);
    Ok(TStarResult {
        t_star: best,
        certificate: best_cert,
        probes,
    })
}

/// Carries an ISS certificate of model `a` to model `b` through a
/// consistency certificate of the pair:
/// `K_b = (K_a + eta)/delta`,
/// `lambda_b = -ln(delta) / (ln(K_a/(delta - eta))/lambda_a + 1)`,
/// `gamma_b = ((K_a + eta)/(1 - delta) + 1)(gamma_a + phi)`.
pub fn transfer_certificate(
    cert_a: &IssCertificate,
    cons: &ConsistencyCertificate,
    delta: f64,
    eta: f64,
) -> Result<IssCertificate> {
    if !(0.0 < eta && eta < delta && delta < 1.0) {
        return Err(Error::ParameterOrder { delta, eta });
    }
    if !(cert_a.k >= 1.0) {
        return Err(Error::Invalid(format!("source overshoot must be >= 1, got {}", cert_a.k)));
    }
    let k_b = (cert_a.k + eta) / delta;
    let lambda_b = -delta.ln() / transfer_window(cert_a, delta, eta);
    let scale = (cert_a.k + eta) / (1.0 - delta) + 1.0;
    let gamma_b = cert_a.gamma.add(&cons.phi).scale(scale);
    let mut out = IssCertificate::new(k_b, lambda_b, gamma_b, Provenance::Transferred)?;
    out.report = serde_json::json!({
        "delta": delta,
        "eta": eta,
        "source": {"K": cert_a.k, "lambda": cert_a.lambda},
    });
    Ok(out)
}

/// `ln(K_a / (delta - eta)) / lambda_a + 1`, the time window over which the
/// transfer compares the two models.
pub fn transfer_window(cert_a: &IssCertificate, delta: f64, eta: f64) -> f64 {
    (cert_a.k / (delta - eta)).ln() / cert_a.lambda + 1.0
}

/// Serialised form of a [`LyapunovSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSpecFile {
    #[serde(rename = "V")]
    pub v: String,
    pub state_dim: usize,
    #[serde(rename = "alpha1_K")]
    pub alpha1_k: f64,
    #[serde(rename = "alpha2_K")]
    pub alpha2_k: f64,
    #[serde(rename = "alpha3_K")]
    pub alpha3_k: f64,
    #[serde(rename = "N")]
    pub n: f64,
    pub rho_gain: f64,
    #[serde(rename = "T_tilde")]
    pub t_tilde: f64,
}

/// Candidate `V(x)` with `alpha_i(s) = K_i s^N`, decrease
/// `V(F(x,e,T)) - V(x) <= -T alpha_3(|x|)` required on
/// `|e| / rho_gain <= |x| <= M` for `T < T_tilde`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpec {
    pub v: Expression,
    pub alpha1_k: f64,
    pub alpha2_k: f64,
    pub alpha3_k: f64,
    pub power: f64,
    pub rho_gain: f64,
    pub t_tilde: f64,
}

impl LyapunovSpec {
    pub fn from_file(f: &LyapunovSpecFile) -> Result<Self> {
        let v = Expression::parse(&f.v, &Env::new().var("x", f.state_dim))?;
        for (name, k) in [("alpha1_K", f.alpha1_k), ("alpha2_K", f.alpha2_k), ("alpha3_K", f.alpha3_k)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {k}")));
            }
        }
        if !(f.n > 0.0) || !(f.rho_gain > 0.0) || !(f.t_tilde > 0.0) {
            return Err(Error::Invalid("N, rho_gain and T_tilde must be positive".into()));
        }
        if f.alpha1_k > f.alpha2_k {
            return Err(Error::Invalid("alpha1_K must not exceed alpha2_K".into()));
        }
        Ok(Self {
            v,
            alpha1_k: f.alpha1_k,
            alpha2_k: f.alpha2_k,
            alpha3_k: f.alpha3_k,
            power: f.n,
            rho_gain: f.rho_gain,
            t_tilde: f.t_tilde,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.v.env().vars()[0].dim
    }

    pub fn alpha(&self, k: f64, s: f64) -> f64 {
        k * s.powf(self.power)
    }

    /// `rho(s) = s / rho_gain`.
    pub fn gate(&self, e_norm: f64) -> f64 {
        e_norm / self.rho_gain
    }

    /// The `count` periods `T_tilde * 10^{-4 (j+1) / count}`, `j = 0..count`.
    pub fn periods(&self, count: usize) -> Vec<f64> {
        (0..count)
            .map(|j| self.t_tilde * 10f64.powf(-4.0 * (j as f64 + 1.0) / count as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovParams {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    /// Grid points per state and error axis.
    pub grid_density: usize,
    /// Number of log-spaced periods below `T_tilde`.
    pub periods: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovWitness {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    #[serde(rename = "T")]
    pub t: f64,
    /// `V(F(x,e,T)) - V(x)`, or `V(x)` for a sandwich check.
    pub lhs: f64,
    pub rhs: f64,
    pub check: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub pass: bool,
    /// Gated grid points times periods at which the decrease was evaluated.
    pub checked: usize,
    /// Grid points skipped by the gate.
    pub gated_out: usize,
    pub violations: usize,
    /// Smallest `-T alpha_3(|x|) - (V(F) - V(x))`, relative to `T alpha_3(|x|)`.
    pub worst_relative_margin: f64,
    pub worst_sandwich_margin: f64,
    pub periods: Vec<f64>,
    pub witness: Option<LyapunovWitness>,
}

/// Evaluates the decrease condition and the sandwich bounds on a regular
/// grid of `x` in `[-M, M]^n`, `e` in `[-E, E]^q`, restricted to the gate
/// `|e| / rho_gain <= |x| <= M`, at `periods` log-spaced `T < T_tilde`.
///
/// `V(x + dx) - V(x)` is computed in double-double arithmetic from the
/// model's increment `dx`, so decreases far below the ulp of `V(x)` are
/// resolved.
pub fn check_lyapunov(model: &ClosedLoopModel, spec: &LyapunovSpec, p: &LyapunovParams) -> Result<LyapunovReport> {
    let (n, q) = (model.state_dim(), model.error_dim());
    if spec.state_dim() != n {
        return Err(Error::Dimension(format!(
            "V is declared over {} states, model has {n}",
            spec.state_dim()
        )));
    }
    if p.grid_density < 2 || p.periods == 0 {
        return Err(Error::Invalid("grid density must be >= 2 and at least one period".into()));
    }
    let periods: Vec<f64> = spec
        .periods(p.periods)
        .into_iter()
        .filter(|&t| t < model.period_cap())
        .collect();
    let axis = |half: f64, i: usize| -half + 2.0 * half * i as f64 / (p.grid_density - 1) as f64;
    let dims = n + q;
    let total = p
        .grid_density
        .checked_pow(dims as u32)
        .ok_or_else(|| Error::Invalid("grid too large".into()))?;

    struct Acc {
        checked: usize,
        gated_out: usize,
        violations: usize,
        worst_rel: f64,
        worst_sandwich: f64,
        witness: Option<(f64, LyapunovWitness)>,
    }
    let empty = || Acc {
        checked: 0,
        gated_out: 0,
        violations: 0,
        worst_rel: f64::INFINITY,
        worst_sandwich: f64::INFINITY,
        witness: None,
    };
    let merge = |mut a: Acc, b: Acc| {
        a.checked += b.checked;
        a.gated_out += b.gated_out;
        a.violations += b.violations;
        a.worst_rel = a.worst_rel.min(b.worst_rel);
        a.worst_sandwich = a.worst_sandwich.min(b.worst_sandwich);
        a.witness = match (a.witness, b.witness) {
            (Some(x), Some(y)) => Some(if y.0 < x.0 { y } else { x }),
            (x, y) => x.or(y),
        };
        a
    };

    let acc = (0..total)
        .into_par_iter()
        .try_fold(empty, |mut acc, idx| -> Result<Acc> {
            let mut rest = idx;
            let mut coords = Vec::with_capacity(dims);
            for d in 0..dims {
                let i = rest % p.grid_density;
                rest /= p.grid_density;
                coords.push(axis(if d < n { p.m } else { p.e }, i));
            }
            let (x, e) = coords.split_at(n);
            let xn = norm(x);
            if xn > p.m || spec.gate(norm(e)) > xn {
                acc.gated_out += 1;
                return Ok(acc);
            }
            let xs: Vec<TwoFloat> = x.iter().map(|&v| TwoFloat::from(v)).collect();
            let v_x = spec.v.eval_with(&[&xs])?;
            let v_f = f64::from(v_x);
            let lo = spec.alpha(spec.alpha1_k, xn);
            let hi = spec.alpha(spec.alpha2_k, xn);
            let tol = 1e-12 * hi.abs().max(1e-300);
            let sandwich = (v_f - lo).min(hi - v_f) + tol;
            if sandwich < acc.worst_sandwich {
                acc.worst_sandwich = sandwich;
            }
            if sandwich < 0.0 {
                acc.violations += 1;
                let w = LyapunovWitness {
                    x: x.to_vec(),
                    e: e.to_vec(),
                    t: 0.0,
                    lhs: v_f,
                    rhs: if v_f < lo { lo } else { hi },
                    check: "sandwich".into(),
                };
                if acc.witness.as_ref().is_none_or(|(m, _)| sandwich < *m) {
                    acc.witness = Some((sandwich, w));
                }
            }
            for &t in &periods {
                acc.checked += 1;
                let dx = model.increment(x, e, t)?;
                let moved: Vec<TwoFloat> = x
                    .iter()
                    .zip(&dx)
                    .map(|(&a, &d)| TwoFloat::new_add(a, d))
                    .collect();
                let dv = f64::from(spec.v.eval_with(&[&moved])? - v_x);
                let rhs = -t * spec.alpha(spec.alpha3_k, xn);
                let scale = rhs.abs().max(f64::MIN_POSITIVE);
                let rel = (rhs - dv) / scale + 1e-12;
                if rel < acc.worst_rel {
                    acc.worst_rel = rel;
                }
                if rel < 0.0 {
                    acc.violations += 1;
                    let w = LyapunovWitness {
                        x: x.to_vec(),
                        e: e.to_vec(),
                        t,
                        lhs: dv,
                        rhs,
                        check: "decrease".into(),
                    };
                    if acc.witness.as_ref().is_none_or(|(m, _)| rel < *m) {
                        acc.witness = Some((rel, w));
                    }
                }
            }
            Ok(acc)
        })
        .try_reduce(empty, |a, b| Ok(merge(a, b)))?;

    Ok(LyapunovReport {
        pass: acc.violations == 0,
        checked: acc.checked,
        gated_out: acc.gated_out,
        violations: acc.violations,
        worst_relative_margin: acc.worst_rel,
        worst_sandwich_margin: acc.worst_sandwich,
        periods,
        witness: acc.witness.map(|(_, w)| w),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersampleParams {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub dense_per_interval: usize,
    /// Halton samples for the sup bounds.
    pub sup_samples: usize,
    /// Period cap used when bounding the control.
    #[serde(rename = "T_cap")]
    pub t_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersampleReport {
    pub pass: bool,
    pub intervals: usize,
    pub points: usize,
    pub violations: usize,
    pub worst_margin: f64,
    /// `R = K M + gamma(E)`.
    #[serde(rename = "R")]
    pub r: f64,
    /// Drift constant `C(R, E) = C_f(2R, C_u(R, E))`.
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "C_u")]
    pub c_u: f64,
    /// Whether the law ignores `T`, enabling the sharper check
    /// `|x(t_k + t)| <= beta(|x_0|, t_k + t) + gamma(...)`.
    pub period_independent_checked: bool,
    pub period_independent_violations: usize,
    pub max_oracle_deviation: f64,
    /// `(interval, dense index, |x|, bound)` of the worst point.
    pub worst_point: Option<(usize, usize, f64, f64)>,
}

/// Dense states on `[t_k, t_k + T_k]` for every interval of an exact-model
/// trajectory, re-integrated with the recorded inputs. Fails with
/// `OracleMismatch` if an endpoint deviates from the recorded next state by
/// more than the oracle allowance.
pub fn dense_states(model: &ClosedLoopModel, traj: &Trajectory, dense: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let cfg = model
        .oracle_config()
        .ok_or_else(|| Error::Invalid("intersample checks need the exact backend".into()))?;
    let allowance = ORACLE_SLACK * cfg.abs_tol;
    (0..traj.periods.len())
        .into_par_iter()
        .map(|k| {
            let pts = flow_samples(model.system(), &traj.states[k], &traj.inputs[k], traj.periods[k], dense, cfg)?;
            let deviation = dist(pts.last().expect("dense >= 1"), &traj.states[k + 1]);
            if deviation > allowance {
                return Err(Error::OracleMismatch { step: k, deviation });
            }
            Ok(pts)
        })
        .collect()
}

/// Checks `|x(t_k + t)| <= beta(|x_0|, t_k) + gamma(sup_{i<k} |e_i|) + C(R, E) t`
/// at `dense_per_interval` points of every sampling interval.
pub fn intersample_envelope(
    model: &ClosedLoopModel,
    traj: &Trajectory,
    cert: &IssCertificate,
    p: &IntersampleParams,
) -> Result<IntersampleReport> {
    if p.dense_per_interval == 0 {
        return Err(Error::Invalid("need at least one dense point per interval".into()));
    }
    let r = cert.k * p.m + cert.gamma.eval(p.e);
    let bounds = estimate_sup_bounds(model.system(), model.law(), r, p.e, p.t_cap, p.sup_samples)?;
    let c = bounds.c_f;
    let dense = dense_states(model, traj, p.dense_per_interval)?;
    let cfg = model.oracle_config().expect("checked by dense_states");
    let slack = ORACLE_SLACK * cfg.abs_tol;
    let x0n = norm(&traj.states[0]);
    let sup_e: Vec<f64> = {
        let mut out = Vec::with_capacity(traj.errors.len() + 1);
        let mut s = 0.0_f64;
        out.push(0.0);
        for e in &traj.errors {
            s = s.max(norm(e));
            out.push(s);
        }
        out
    };
    let check_r6 = model.law().period_independent();
    let mut report = IntersampleReport {
        pass: true,
        intervals: dense.len(),
        points: 0,
        violations: 0,
        worst_margin: f64::INFINITY,
        r,
        c,
        c_u: bounds.c_u,
        period_independent_checked: check_r6,
        period_independent_violations: 0,
        max_oracle_deviation: 0.0,
        worst_point: None,
    };
    for (k, pts) in dense.iter().enumerate() {
        let tk = traj.times[k];
        let period = traj.periods[k];
        let g = cert.gamma.eval(sup_e[k]);
        report.max_oracle_deviation = report
            .max_oracle_deviation
            .max(dist(pts.last().expect("nonempty"), &traj.states[k + 1]));
        for (j, x) in pts.iter().enumerate() {
            let t = period * (j + 1) as f64 / pts.len() as f64;
            let xn = norm(x);
            let bound = cert.beta(x0n, tk) + g + c * t;
            let margin = bound + slack - xn;
            report.points += 1;
            if margin < report.worst_margin {
                report.worst_margin = margin;
                report.worst_point = Some((k, j, xn, bound));
            }
            if margin < 0.0 {
                report.violations += 1;
            }
            if check_r6 && cert.beta(x0n, tk + t) + g + slack < xn {
                report.period_independent_violations += 1;
            }
        }
    }
    report.pass = report.violations == 0 && report.period_independent_violations == 0;
    Ok(report)
}

/// Converts an escape into a violation-style `None`, passing other errors on.
pub fn escape_as_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if is_escape(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use crate::systems::{ContinuousSystem, ControlLaw, ErrorKind};
    use crate::closedloop::Backend;
    use crate::rk::ButcherTableau;
    use std::sync::Arc;

    /// `x+ = (1 - T) x`, the Euler model of `dx/dt = -x`.
    fn contraction() -> ClosedLoopModel {
        let sys = ContinuousSystem::parse(1, 1, &["u"]).unwrap();
        let law = ControlLaw::parse(1, 1, ErrorKind::StateMeasurement, 1.0, &["-x - e"]).unwrap();
        ClosedLoopModel::new(Backend::RungeKutta(ButcherTableau::euler()), Arc::new(sys), Arc::new(law)).unwrap()
    }

    #[test]
    fn transfer_spot_values() {
        let a = IssCertificate::new(2.0, 1.0, GainFunction::zero(), Provenance::Declared).unwrap();
        let cons = ConsistencyCertificate::new(1.0, 1.0, GainFunction::zero(), 0.1, 5.0, 1.0).unwrap();
        let b = transfer_certificate(&a, &cons, 0.5, 0.25).unwrap();
        assert!((b.k - 4.5).abs() < 1e-12);
        let expected = 2f64.ln() / (8f64.ln() + 1.0);
        assert!((b.lambda - expected).abs() < 1e-12);
        assert!((b.lambda - 0.2251).abs() < 1e-4);
        assert!(b.gamma.is_zero());
        assert_eq!(b.provenance, Provenance::Transferred);
        assert!(b.t_star_table.is_empty());
    }

    #[test]
    fn transfer_parameter_order() {
        let a = IssCertificate::new(2.0, 1.0, GainFunction::zero(), Provenance::Declared).unwrap();
        let cons = ConsistencyCertificate::new(1.0, 1.0, GainFunction::zero(), 0.1, 5.0, 1.0).unwrap();
        for (d, e) in [(0.5, 0.5), (0.5, 0.7), (1.0, 0.2), (0.5, 0.0)] {
            assert!(matches!(
                transfer_certificate(&a, &cons, d, e),
                Err(Error::ParameterOrder { .. })
            ));
        }
    }

    #[test]
    fn transfer_limits() {
        let a = IssCertificate::new(2.0, 1.0, GainFunction::linear(1.0).unwrap(), Provenance::Declared).unwrap();
        let cons = ConsistencyCertificate::new(1.0, 1.0, GainFunction::linear(0.5).unwrap(), 0.1, 5.0, 1.0).unwrap();
        let b = transfer_certificate(&a, &cons, 1.0 - 1e-9, 1e-9).unwrap();
        assert!((b.k - 2.0).abs() < 1e-6);
        assert!(b.lambda > 0.0 && b.lambda < 1e-8);
        let g = transfer_certificate(&a, &cons, 0.5, 0.25).unwrap().gamma;
        assert!((g.eval(1.0) - (2.25 / 0.5 + 1.0) * 1.5).abs() < 1e-12);
    }

    #[test]
    fn t_star_table_stays_monotone() {
        let mut c = IssCertificate::new(1.0, 1.0, GainFunction::zero(), Provenance::Declared).unwrap();
        c.insert_t_star(1.0, 1.0, 0.1);
        c.insert_t_star(5.0, 1.0, 0.2);
        c.insert_t_star(2.0, 0.5, 0.05);
        c.insert_t_star(10.0, 2.0, 0.01);
        assert!(c.table_is_monotone());
        assert_eq!(c.t_star_for(5.0, 1.0), Some(0.05));
        assert_eq!(c.t_star_for(1.0, 1.0), Some(0.1));
        assert_eq!(c.t_star_for(20.0, 1.0), None);
    }

    #[test]
    fn certificate_json_layout() {
        let mut c = IssCertificate::new(1.5, 0.8, GainFunction::linear(2.0).unwrap(), Provenance::Fitted).unwrap();
        c.insert_t_star(5.0, 1.0, 0.02);
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(v["T_star_table"], serde_json::json!([[5.0, 1.0, 0.02]]));
        assert_eq!(v["provenance"], "fitted");
        assert_eq!(v["gamma"], serde_json::json!([[2.0, 1.0]]));
        let back: IssCertificate = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn origin_trials_have_zero_margin_cost() {
        let m = contraction();
        let c = IssCertificate::new(1.0, 0.5, GainFunction::zero(), Provenance::Declared).unwrap();
        let p = IssParams { m: 0.0, e: 0.0, t_try: 0.5, trials: 100, seed: 1 };
        let r = verify_iss(&m, &c, &p).unwrap();
        assert!(r.pass);
        assert_eq!(r.worst_margin, 0.0);
    }

    #[test]
    fn heun_reference_passes_declared_certificate() {
        let m = example::heun_reference_model();
        let c = IssCertificate::new(1.1, 1.5, GainFunction::zero(), Provenance::Declared).unwrap();
        let p = IssParams { m: 5.0, e: 0.0, t_try: 0.05, trials: 100, seed: 2 };
        let r = verify_iss(&m, &c, &p).unwrap();
        assert!(r.pass, "{:?}", r.witness);
    }

    #[test]
    fn overclaimed_rate_is_falsified() {
        let m = contraction();
        let p = IssParams { m: 2.0, e: 0.0, t_try: 0.1, trials: 100, seed: 3 };
        let fitted = fit_iss(&m, &p).unwrap();
        let doubled = IssCertificate::new(fitted.k, 2.0 * fitted.lambda, GainFunction::zero(), Provenance::Declared)
            .unwrap();
        let r = verify_iss(&m, &doubled, &p).unwrap();
        assert!(!r.pass);
        let w = r.witness.unwrap();
        assert!(w.state_norm > w.bound);
    }

    #[test]
    fn fit_recovers_geometric_decay() {
        // x+ = (1 - T) x decays like e^{-t} as T -> 0
        let m = contraction();
        let p = IssParams { m: 1.0, e: 0.0, t_try: 0.01, trials: 100, seed: 4 };
        let c = fit_iss(&m, &p).unwrap();
        assert!((0.85..=1.0).contains(&c.lambda), "{}", c.lambda);
        assert!((1.0..=1.2).contains(&c.k), "{}", c.k);
        assert!(c.gamma.is_zero());
    }

    #[test]
    fn divergent_region_gets_no_certificate() {
        let p = IssParams { m: 1e3, e: 0.0, t_try: 0.01, trials: 16, seed: 5 };
        let r = fit_iss(&example::euler_model(), &p);
        assert!(matches!(r, Err(Error::NoCertificate(_))), "{r:?}");
    }

    #[test]
    fn bisection_on_contraction() {
        let m = contraction();
        let c = IssCertificate::new(1.0, 0.9, GainFunction::zero(), Provenance::Declared).unwrap();
        let s = TStarSearch { m: 1.0, e: 0.0, t_lo: 1e-3, t_hi: 0.9, trials: 50, seed: 6 };
        let r = find_t_star(&m, CertSource::Fixed(&c), &s).unwrap();
        // (1 - T) <= e^{-0.9 T} holds for every T below 0.9 here
        assert!(r.t_star > 0.5, "{}", r.t_star);
        assert_eq!(r.certificate.t_star_for(1.0, 0.0), Some(r.t_star));
    }

    #[test]
    fn lyapunov_contraction_passes() {
        let spec = LyapunovSpec::from_file(&LyapunovSpecFile {
            v: "x^2".into(),
            state_dim: 1,
            alpha1_k: 1.0,
            alpha2_k: 1.0,
            alpha3_k: 1.0,
            n: 2.0,
            rho_gain: 1e9,
            t_tilde: 0.99,
        })
        .unwrap();
        let p = LyapunovParams { m: 2.0, e: 0.0, grid_density: 201, periods: 16 };
        let r = check_lyapunov(&contraction(), &spec, &p).unwrap();
        assert!(r.pass, "{:?}", r.witness);
    }

    #[test]
    fn lyapunov_gate_skips_violations() {
        // the decrease fails wherever the error dominates, but those points are gated out
        let spec = LyapunovSpec::from_file(&LyapunovSpecFile {
            v: "x^2".into(),
            state_dim: 1,
            alpha1_k: 1.0,
            alpha2_k: 1.0,
            alpha3_k: 0.5,
            n: 2.0,
            rho_gain: 0.1,
            t_tilde: 0.5,
        })
        .unwrap();
        let p = LyapunovParams { m: 2.0, e: 1.0, grid_density: 201, periods: 8 };
        let r = check_lyapunov(&contraction(), &spec, &p).unwrap();
        assert!(r.pass, "{:?}", r.witness);
        assert!(r.gated_out > 0);
        let loose = LyapunovSpec { rho_gain: 10.0, ..spec };
        assert!(!check_lyapunov(&contraction(), &loose, &p).unwrap().pass);
    }

    #[test]
    fn zero_trajectory_envelope() {
        let m = example::exact_model();
        let sched = SamplingSchedule::new(vec![0.01; 20], 0.02).unwrap();
        let traj = simulate(&m, &[0.0], &sched, &DisturbanceSignal::zero(20, 1)).unwrap();
        let c = IssCertificate::new(1.1, 1.0, GainFunction::zero(), Provenance::Declared).unwrap();
        let p = IntersampleParams { m: 1.0, e: 0.0, dense_per_interval: 8, sup_samples: 1000, t_cap: 0.02 };
        let r = intersample_envelope(&m, &traj, &c, &p).unwrap();
        assert!(r.pass);
        assert_eq!(r.points, 160);
    }
}
