//! Deterministic randomness and low-discrepancy point sets.
//!
//! Every random draw in the crate comes from ChaCha8 seeded with
//! `seed_from_u64(seed)` and switched to `stream`, where the stream id is the
//! index of the trial (or sample block) being generated. Streams are
//! independent, so trials can run in any order or on any thread and still
//! replay bit for bit on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += (index % b) as f64 * f;
        index /= b;
        f *= inv;
    }
    r
}

/// Halton point `index` (starting at 1, so no coordinate is exactly 0) in
/// `[0, 1)^dim`. Panics above 24 dimensions.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sequence limited to {} dims", PRIMES.len());
    (0..dim).map(|d| radical_inverse(index, PRIMES[d])).collect()
}

/// Maps a point of the unit cube `[0,1)^n` into the closed ball of `radius`.
/// The cube is first stretched to `[-1,1]^n`, then each ray is rescaled so the
/// cube boundary lands on the sphere.
pub fn cube_to_ball(unit: &[f64], radius: f64) -> Vec<f64> {
    let v: Vec<f64> = unit.iter().map(|u| 2.0 * u - 1.0).collect();
    let inf = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let two = crate::norm(&v);
    if two == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x * radius * inf / two).collect()
}

/// Uniform point in the ball of `radius` (radius drawn as `r U^{1/n}`).
pub fn uniform_in_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let dir = unit_vector(rng, dim);
    let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|d| d * r).collect()
}

/// Point on the sphere of `radius`.
pub fn on_sphere<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    unit_vector(rng, dim).into_iter().map(|d| d * radius).collect()
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![if rng.gen::<bool>() { 1.0 } else { -1.0 }];
    }
    loop {
        // Gaussian directions via Box-Muller
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let n = crate::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform draw from the open interval `(0, cap)`.
pub fn open_period<R: Rng>(rng: &mut R, cap: f64) -> f64 {
    loop {
        let t = rng.gen::<f64>() * cap;
        if t > 0.0 && t < cap {
            return t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(7, 3).gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: f64 = stream_rng(7, 3).gen();
        let y: f64 = stream_rng(7, 4).gen();
        assert_ne!(x, y);
    }

    #[test]
    fn halton_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert_eq!(halton(1, 2), vec![0.5, 1.0 / 3.0]);
    }

    #[test]
    fn ball_maps_stay_inside() {
        for i in 1..500 {
            let p = cube_to_ball(&halton(i, 3), 2.0);
            assert!(crate::norm(&p) <= 2.0 + 1e-12);
        }
        let mut rng = stream_rng(1, 0);
        for _ in 0..500 {
            assert!(crate::norm(&uniform_in_ball(&mut rng, 2, 3.0)) <= 3.0 + 1e-12);
            assert!((crate::norm(&on_sphere(&mut rng, 3, 3.0)) - 3.0).abs() < 1e-12);
            let t = open_period(&mut rng, 0.1);
            assert!(t > 0.0 && t < 0.1);
        }
    }
}
