use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdstab_core::rk::{builtin_tableau, rk_step, ButcherTableau};
use sdstab_core::systems::{estimate_sup_bounds, exact_step, ContinuousSystem, FlowOracleConfig};
use sdstab_core::{dist, example, Error};

fn decay() -> ContinuousSystem {
    ContinuousSystem::parse(1, 1, &["-x"]).unwrap()
}

fn corpus() -> Vec<(ContinuousSystem, Vec<f64>, Vec<f64>, f64)> {
    vec![
        (decay(), vec![1.0], vec![0.0], 1.0),
        (example::plant(), vec![0.5], vec![-1.0], 0.4),
        (example::plant(), vec![-1.2], vec![2.0], 0.05),
        (
            ContinuousSystem::parse(2, 1, &["x[1]", "-x[0] - 0.1*x[1]^3 + u"]).unwrap(),
            vec![1.0, 0.0],
            vec![0.3],
            2.0,
        ),
        (
            ContinuousSystem::parse(2, 2, &["-x[0] + x[1]^2 + u[0]", "-2*x[1] + u[1]"]).unwrap(),
            vec![0.7, -0.4],
            vec![0.1, 0.2],
            1.5,
        ),
    ]
}

#[test]
fn oracle_spot_values() {
    let cfg = FlowOracleConfig::default();
    assert_eq!(exact_step(&example::plant(), &[0.0], &[0.0], 1.0, &cfg).unwrap(), vec![0.0]);
    let x = exact_step(&decay(), &[1.0], &[0.0], 1.0, &cfg).unwrap();
    assert_abs_diff_eq!(x[0], (-1.0f64).exp(), epsilon = 1e-9);
    // dx/dt = x^3 from 2 blows up at t = 1/8
    let err = exact_step(&example::plant(), &[2.0], &[0.0], 0.2, &cfg).unwrap_err();
    assert!(matches!(err, Error::FiniteEscape { .. }), "{err:?}");
    if let Error::FiniteEscape { time, .. } = err {
        assert!((time - 0.125).abs() < 1e-3, "{time}");
    }
}

#[test]
fn halving_tolerances_barely_moves_the_result() {
    let cfg = FlowOracleConfig::default();
    let half = cfg.with_tolerance(cfg.abs_tol / 2.0);
    for (sys, x, u, t) in corpus() {
        let a = exact_step(&sys, &x, &u, t, &cfg).unwrap();
        let b = exact_step(&sys, &x, &u, t, &half).unwrap();
        assert!(dist(&a, &b) < 10.0 * cfg.abs_tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn flow_is_a_semigroup() {
    let cfg = FlowOracleConfig::default();
    for (sys, x, u, t) in corpus() {
        for split in [0.1, 0.37, 0.5, 0.9] {
            let (t1, t2) = (t * split, t * (1.0 - split));
            let whole = exact_step(&sys, &x, &u, t, &cfg).unwrap();
            let mid = exact_step(&sys, &x, &u, t1, &cfg).unwrap();
            let parts = exact_step(&sys, &mid, &u, t2, &cfg).unwrap();
            assert!(dist(&whole, &parts) < 10.0 * cfg.abs_tol, "{whole:?} vs {parts:?}");
        }
    }
}

/// `exp(A t)` for a 2x2 matrix through the Cayley-Hamilton closed form.
fn expm2(a: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let s = (a[0][0] + a[1][1]) / 2.0;
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let q2 = s * s - det;
    let (c, sh) = if q2 > 1e-12 {
        let q = q2.sqrt();
        ((q * t).cosh(), (q * t).sinh() / q)
    } else if q2 < -1e-12 {
        let q = (-q2).sqrt();
        ((q * t).cos(), (q * t).sin() / q)
    } else {
        (1.0, t)
    };
    let e = (s * t).exp();
    let mut m = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let id = if i == j { 1.0 } else { 0.0 };
            let shifted = a[i][j] - s * id;
            m[i][j] = e * (c * id + sh * shifted);
        }
    }
    m
}

#[test]
fn linear_flow_matches_matrix_exponential() {
    let cfg = FlowOracleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let a = [
            [rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..2.0)],
            [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..1.0)],
        ];
        let src = [
            format!("({:?})*x[0] + ({:?})*x[1] + u[0]", a[0][0], a[0][1]),
            format!("({:?})*x[0] + ({:?})*x[1] + u[1]", a[1][0], a[1][1]),
        ];
        let sys = ContinuousSystem::parse(2, 2, &src).unwrap();
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let t = rng.gen_range(0.1..1.0);
        let m = expm2(a, t);
        let want = [
            m[0][0] * x[0] + m[0][1] * x[1],
            m[1][0] * x[0] + m[1][1] * x[1],
        ];
        let got = exact_step(&sys, &x, &[0.0, 0.0], t, &cfg).unwrap();
        assert!(dist(&got, &want) < 100.0 * cfg.abs_tol, "A={a:?}: {got:?} vs {want:?}");
    }
}

#[test]
fn builtin_tableaux_are_consistent() {
    for name in ["euler", "heun", "rk4"] {
        let tab = builtin_tableau(name).unwrap();
        assert!((tab.weight_sum() - 1.0).abs() < 1e-12, "{name}");
        assert!(tab.is_consistent());
    }
    assert_eq!(builtin_tableau("euler").unwrap().stages(), 1);
    let heun = builtin_tableau("heun").unwrap();
    assert_eq!((heun.stages(), heun.a(1, 0), heun.b()), (2, 1.0, &[0.5, 0.5][..]));
    let rk4 = builtin_tableau("rk4").unwrap();
    assert_eq!(rk4.b(), &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]);
    assert!(matches!(builtin_tableau("midpoint"), Err(Error::UnknownTableau(_))));
}

#[test]
fn rk_spot_values() {
    let euler = ButcherTableau::euler();
    let x = rk_step(&euler, &example::plant(), &[1.0], &[0.0], 0.1).unwrap();
    assert_abs_diff_eq!(x[0], 1.1, epsilon = 1e-15);
    let fd = ContinuousSystem::parse(1, 1, &["-x^3 - 2*x"]).unwrap();
    let x = rk_step(&ButcherTableau::heun(), &fd, &[1.0], &[0.0], 0.1).unwrap();
    assert_abs_diff_eq!(x[0], 0.76285, epsilon = 1e-12);
    for tab in [ButcherTableau::euler(), ButcherTableau::heun(), ButcherTableau::rk4()] {
        // x = 1, u = -1 is an equilibrium of x^3 + u
        assert_eq!(rk_step(&tab, &example::plant(), &[1.0], &[-1.0], 0.3).unwrap(), vec![1.0]);
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(t, e)| (a + t.ln(), b + e.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(t, e)| {
        let dx = t.ln() - mx;
        (num + dx * (e.ln() - my), den + dx * dx)
    });
    num / den
}

#[test]
fn one_step_orders() {
    let cfg = FlowOracleConfig::default().with_tolerance(1e-14);
    let sys = decay();
    for (tab, lo, hi) in [(ButcherTableau::euler(), 1.85, 2.15), (ButcherTableau::heun(), 2.85, 3.15)] {
        let pts: Vec<(f64, f64)> = (4..=10)
            .map(|k| {
                let t = 2f64.powi(-k);
                let exact = exact_step(&sys, &[1.0], &[0.0], t, &cfg).unwrap();
                let approx = rk_step(&tab, &sys, &[1.0], &[0.0], t).unwrap();
                (t, dist(&exact, &approx))
            })
            .collect();
        let p = slope(&pts);
        assert!((lo..=hi).contains(&p), "slope {p} for {} stages", tab.stages());
    }
}

#[test]
fn linear_rk_steps_superpose() {
    let sys = ContinuousSystem::parse(2, 1, &["-x[0] + 2*x[1] + u", "0.5*x[0] - 3*x[1] - u"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for tab in [ButcherTableau::euler(), ButcherTableau::heun(), ButcherTableau::rk4()] {
        for _ in 0..100 {
            let x1 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let x2 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let (u1, u2) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let t = rng.gen_range(0.01..0.5);
            let f1 = rk_step(&tab, &sys, &x1, &[u1], t).unwrap();
            let f2 = rk_step(&tab, &sys, &x2, &[u2], t).unwrap();
            let xs = [a * x1[0] + b * x2[0], a * x1[1] + b * x2[1]];
            let fs = rk_step(&tab, &sys, &xs, &[a * u1 + b * u2], t).unwrap();
            for c in 0..2 {
                assert!((fs[c] - (a * f1[c] + b * f2[c])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sup_bounds_follow_the_box() {
    let law = example::matched_law();
    let sys = example::plant();
    let zero = estimate_sup_bounds(&sys, &law, 0.0, 0.0, 0.5, 1000).unwrap();
    assert!(zero.c_u <= 1e-12, "{zero:?}");
    let mut prev = 0.0;
    for m in [0.5, 1.0, 2.0, 4.0] {
        let b = estimate_sup_bounds(&sys, &law, m, 1.0, 0.5, 1000).unwrap();
        assert!(b.c_f >= prev);
        prev = b.c_f;
    }
}
