//! Power-sum gains `s -> sum_i c_i s^{p_i}` used for consistency and ISS
//! bounds, plus the envelope fit that produces them from sampled data.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `s -> sum c_i s^{p_i}` with `c_i >= 0`, `p_i > 0`. Zero at zero and
/// nondecreasing; strictly increasing (class K-infinity) unless every
/// coefficient is zero, which is kept as the degenerate zero gain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct GainFunction {
    terms: Vec<(f64, f64)>,
}

impl GainFunction {
    pub fn new(terms: Vec<(f64, f64)>) -> Result<Self> {
        for &(c, p) in &terms {
            if !(c >= 0.0 && c.is_finite()) || !(p > 0.0 && p.is_finite()) {
                return Err(Error::Invalid(format!(
                    "gain term ({c}, {p}) needs c >= 0 and p > 0"
                )));
            }
        }
        Ok(Self { terms }.normalized())
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `c * s`.
    pub fn linear(c: f64) -> Result<Self> {
        Self::new(vec![(c, 1.0)])
    }

    pub fn terms(&self) -> &[(f64, f64)] {
        &self.terms
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.terms.iter().map(|&(c, p)| c * s.powf(p)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|&(c, _)| c == 0.0)
    }

    pub fn add(&self, other: &GainFunction) -> GainFunction {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        GainFunction { terms }.normalized()
    }

    pub fn scale(&self, k: f64) -> GainFunction {
        assert!(k >= 0.0, "gains scale by nonnegative factors");
        GainFunction {
            terms: self.terms.iter().map(|&(c, p)| (c * k, p)).collect(),
        }
        .normalized()
    }

    /// Merges equal powers, drops zero coefficients, sorts by power.
    fn normalized(mut self) -> Self {
        self.terms.retain(|&(c, _)| c != 0.0);
        self.terms.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(self.terms.len());
        for (c, p) in self.terms {
            match merged.last_mut() {
                Some(last) if last.1 == p => last.0 += c,
                _ => merged.push((c, p)),
            }
        }
        Self { terms: merged }
    }
}

impl TryFrom<Vec<[f64; 2]>> for GainFunction {
    type Error = Error;
    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        GainFunction::new(v.into_iter().map(|[c, p]| (c, p)).collect())
    }
}

impl From<GainFunction> for Vec<[f64; 2]> {
    fn from(g: GainFunction) -> Self {
        g.terms.into_iter().map(|(c, p)| [c, p]).collect()
    }
}

const MAX_BINS: usize = 32;

/// Fits a two-term gain `a s^low + b s^high` lying on or above every sample
/// `(s_j, r_j)` and then multiplies it by `inflate`.
///
/// `high` is chosen from `high_powers` by minimal total height over the
/// (binned) samples; `a, b >= 0` solve the two-variable covering LP exactly by
/// vertex enumeration. Samples with `r <= 0` impose nothing. Samples at
/// `s = 0` with `r > 0` cannot be dominated and are rejected.
pub fn fit_envelope(
    samples: &[(f64, f64)],
    low: f64,
    high_powers: &[f64],
    inflate: f64,
) -> Result<GainFunction> {
    let active: Vec<(f64, f64)> = samples.iter().copied().filter(|&(_, r)| r > 0.0).collect();
    if active.is_empty() {
        return Ok(GainFunction::zero());
    }
    if let Some(&(s, r)) = active.iter().find(|&&(s, _)| !(s > 0.0)) {
        return Err(Error::NoCertificate(format!(
            "gain sample r = {r:e} at s = {s:e} cannot be bounded by a gain vanishing at zero"
        )));
    }
    let pts = bin_conservatively(&active);
    let mut best: Option<(f64, GainFunction)> = None;
    for &high in high_powers {
        if high <= low {
            continue;
        }
        if let Some((a, b)) = cover_lp(&pts, low, high) {
            let g = GainFunction::new(vec![(a, low), (b, high)])?;
            let cost: f64 = pts.iter().map(|&(s, _)| g.eval(s)).sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, g));
            }
        }
    }
    let (_, g) = best.ok_or_else(|| Error::Invalid("no admissible high power".into()))?;
    Ok(g.scale(inflate))
}

/// Reduces samples to at most `MAX_BINS` points `(min s, max r)` per
/// log-spaced bin of `s`. Dominating the reduced points with a nondecreasing
/// function dominates the originals.
fn bin_conservatively(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (lo, hi) = pts
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &(s, _)| (lo.min(s), hi.max(s)));
    if pts.len() <= MAX_BINS || hi <= lo {
        return pts.to_vec();
    }
    let span = (hi / lo).ln();
    let mut bins: Vec<Option<(f64, f64)>> = vec![None; MAX_BINS];
    for &(s, r) in pts {
        let k = (((s / lo).ln() / span) * MAX_BINS as f64) as usize;
        let k = k.min(MAX_BINS - 1);
        bins[k] = Some(match bins[k] {
            None => (s, r),
            Some((s0, r0)) => (s0.min(s), r0.max(r)),
        });
    }
    bins.into_iter().flatten().collect()
}

/// Minimises `sum_j (a s_j^p + b s_j^q)` subject to `a s_j^p + b s_j^q >= r_j`,
/// `a, b >= 0`.
fn cover_lp(pts: &[(f64, f64)], p: f64, q: f64) -> Option<(f64, f64)> {
    let rows: Vec<(f64, f64, f64)> = pts.iter().map(|&(s, r)| (s.powf(p), s.powf(q), r)).collect();
    let (wa, wb) = rows
        .iter()
        .fold((0.0, 0.0), |(wa, wb), &(u, v, _)| (wa + u, wb + v));
    let feasible = |a: f64, b: f64| {
        a >= 0.0
            && b >= 0.0
            && rows
                .iter()
                .all(|&(u, v, r)| a * u + b * v >= r * (1.0 - 1e-12) - 1e-300)
    };
    let mut cands: Vec<(f64, f64)> = Vec::new();
    cands.push((rows.iter().map(|&(u, _, r)| r / u).fold(0.0, f64::max), 0.0));
    cands.push((0.0, rows.iter().map(|&(_, v, r)| r / v).fold(0.0, f64::max)));
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let (u1, v1, r1) = rows[i];
            let (u2, v2, r2) = rows[j];
            let det = u1 * v2 - u2 * v1;
            if det.abs() < 1e-300 {
                continue;
            }
            let a = (r1 * v2 - r2 * v1) / det;
            let b = (u1 * r2 - u2 * r1) / det;
            cands.push((a, b));
        }
    }
    cands
        .into_iter()
        .filter(|&(a, b)| a.is_finite() && b.is_finite() && feasible(a, b))
        .map(|(a, b)| {
            // nudge up by one part in 1e12 so the envelope holds after rounding
            let a = a * (1.0 + 1e-12);
            let b = b * (1.0 + 1e-12);
            (a * wa + b * wb, (a, b))
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, ab)| ab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addition_and_scaling_merge_terms() {
        let a = GainFunction::new(vec![(1.0, 1.0), (2.0, 3.0)]).unwrap();
        let b = GainFunction::new(vec![(0.5, 3.0)]).unwrap();
        let s = a.add(&b).scale(2.0);
        assert_eq!(s.terms(), &[(2.0, 1.0), (5.0, 3.0)]);
        assert_eq!(s.eval(2.0), 4.0 + 40.0);
        assert!(GainFunction::zero().add(&GainFunction::zero()).is_zero());
        assert_eq!(a.add(&GainFunction::zero()), a);
    }

    #[test]
    fn rejects_negative_coefficients() {
        assert!(GainFunction::new(vec![(-1.0, 2.0)]).is_err());
        assert!(GainFunction::new(vec![(1.0, 0.0)]).is_err());
    }

    #[test]
    fn serde_as_pairs() {
        let g = GainFunction::new(vec![(1.5, 1.0), (3.0, 5.0)]).unwrap();
        let j = serde_json::to_string(&g).unwrap();
        assert_eq!(j, "[[1.5,1.0],[3.0,5.0]]");
        let back: GainFunction = serde_json::from_str(&j).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<GainFunction>("[[-1.0,1.0]]").is_err());
    }

    #[test]
    fn envelope_dominates_samples() {
        let pts: Vec<(f64, f64)> = (1..=200)
            .map(|i| {
                let s = i as f64 / 100.0;
                (s, 0.3 * s + s.powi(5) * (1.0 + 0.1 * (i as f64).sin()))
            })
            .collect();
        let g = fit_envelope(&pts, 1.0, &[2.0, 3.0, 5.0, 7.0], 1.0).unwrap();
        for &(s, r) in &pts {
            assert!(g.eval(s) >= r * (1.0 - 1e-12), "s={s} r={r} g={}", g.eval(s));
        }
        // exact data for a one-term law is recovered
        let lin: Vec<(f64, f64)> = (1..20).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let g = fit_envelope(&lin, 1.0, &[3.0], 1.1).unwrap();
        assert!((g.eval(1.0) - 2.2).abs() < 1e-9);
    }

    #[test]
    fn envelope_of_nothing_is_zero() {
        assert!(fit_envelope(&[(1.0, 0.0)], 1.0, &[2.0], 1.1).unwrap().is_zero());
        assert!(fit_envelope(&[(0.0, 1.0)], 1.0, &[2.0], 1.1).is_err());
    }
}
