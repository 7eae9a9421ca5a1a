//! One line per acceptance criterion. Runs without the libtest harness so
//! every verdict is printed; pass criterion numbers as arguments to run a
//! subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use sdstab_cli::config::ExampleSpec;
use sdstab_cli::example::reproduce_example;
use sdstab_cli::Verdict;
use sdstab_core::closedloop::{simulate, DisturbanceSignal, SamplingSchedule};
use sdstab_core::consistency::{
    box_points, check_repmc, euler_mismatch_law, fit_repc, ConsistencyCertificate, RepcParams, RepmcParams,
};
use sdstab_core::gain::GainFunction;
use sdstab_core::rk::{builtin_tableau, rk_step, ButcherTableau};
use sdstab_core::sampling::stream_rng;
use sdstab_core::stability::{
    check_lyapunov, find_t_star, fit_iss, transfer_certificate, transfer_window, verify_iss, CertSource,
    IssCertificate, IssParams, LyapunovParams, Provenance, TStarSearch,
};
use sdstab_core::systems::{exact_step, ContinuousSystem, FlowOracleConfig};
use sdstab_core::{dist, example};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn matching_identity() -> Check {
    let model = example::euler_model();
    let mut rng = stream_rng(1, 0);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let x = rng.gen_range(-5.0..=5.0);
        let t = loop {
            let t = rng.gen_range(0.0..0.5);
            if t > 0.0 {
                break t;
            }
        };
        let got = model.step(&[x], &[0.0], t).map_err(err)?[0];
        worst = worst.max((got - example::heun_reference(x, t)).abs());
    }
    ensure(worst < 1e-12, format!("max |Euler - Heun| = {worst:e} over 1000 draws"))
}

fn spot_value() -> Check {
    let v = example::heun_reference(1.0, 0.1);
    let via_model = example::euler_model().step(&[1.0], &[0.0], 0.1).map_err(err)?[0];
    let gap = (v - 0.76285).abs().max((via_model - 0.76285).abs());
    ensure(gap <= 1e-12, format!("F(1, 0.1) = {v:?}, closed loop {via_model:?}"))
}

fn order_law() -> Check {
    let cfg = FlowOracleConfig::default().with_tolerance(1e-14);
    let grid: Vec<f64> = (4..=10).map(|k| 2f64.powi(-k)).collect();
    let pts = box_points(1, 1, 1.0, 3.0, 400);
    let cubic = euler_mismatch_law(&example::plant(), &pts, &grid, &cfg).map_err(err)?;
    let decay = ContinuousSystem::parse(1, 1, &["-x"]).map_err(err)?;
    let line = box_points(1, 1, 1.0, 0.0, 64);
    let linear = euler_mismatch_law(&decay, &line, &grid, &cfg).map_err(err)?;
    let ratio = linear.ratios.last().expect("grid is nonempty").1;
    ensure(
        (1.85..=2.15).contains(&cubic.slope) && (ratio - 0.5).abs() <= 0.05,
        format!("slope {:.4} on x^3 + u, ratio {ratio:.5} on -x at T = 2^-10", cubic.slope),
    )
}

fn rk_consistency() -> Check {
    let mut worst = 0.0_f64;
    for name in ["euler", "heun", "rk4"] {
        worst = worst.max((builtin_tableau(name).map_err(err)?.weight_sum() - 1.0).abs());
    }
    let cfg = FlowOracleConfig::default().with_tolerance(1e-14);
    let decay = ContinuousSystem::parse(1, 1, &["-x"]).map_err(err)?;
    let heun = ButcherTableau::heun();
    let mut pts = Vec::new();
    for k in 4..=10 {
        let t = 2f64.powi(-k);
        let exact = exact_step(&decay, &[1.0], &[0.0], t, &cfg).map_err(err)?;
        let approx = rk_step(&heun, &decay, &[1.0], &[0.0], t).map_err(err)?;
        pts.push((t, dist(&exact, &approx)));
    }
    let slope = sdstab_core::consistency::log_log_slope(&pts);
    ensure(
        worst < 1e-12 && (2.85..=3.15).contains(&slope),
        format!("max |sum b - 1| = {worst:e}, Heun slope {slope:.4}"),
    )
}

fn lyapunov() -> Check {
    let spec = example::lyapunov_spec(5.0);
    let p = LyapunovParams {
        m: 5.0,
        e: 1.0,
        grid_density: 400,
        periods: 16,
    };
    let r = check_lyapunov(&example::euler_model(), &spec, &p).map_err(err)?;
    ensure(
        r.pass && r.violations == 0 && r.checked > 0,
        format!(
            "T_tilde = {:e}, {} checks, {} gated out, {} violation(s), worst relative margin {:e}",
            spec.t_tilde, r.checked, r.gated_out, r.violations, r.worst_relative_margin
        ),
    )
}

fn divergence() -> Check {
    let model = example::euler_model();
    let mut parts = Vec::new();
    let mut ok = true;
    for x in [1.6, 2.0, 5.0, 10.0] {
        let next = model.step(&[x], &[0.0], 0.5).map_err(err)?[0];
        ok &= next.abs() > x;
        parts.push(format!("{x} -> {next:e}"));
    }
    ensure(ok, parts.join(", "))
}

fn transfer_formulas() -> Check {
    let cert_a = IssCertificate::new(2.0, 1.0, GainFunction::zero(), Provenance::Declared).map_err(err)?;
    let cons = ConsistencyCertificate::new(1.0, 1.0, GainFunction::zero(), 0.1, 1.0, 0.0).map_err(err)?;
    let b = transfer_certificate(&cert_a, &cons, 0.5, 0.25).map_err(err)?;
    let lambda = 2f64.ln() / (8f64.ln() + 1.0);
    ensure(
        (b.k - 4.5).abs() <= 1e-12 && (b.lambda - lambda).abs() <= 1e-12,
        format!("K_b = {:?}, lambda_b = {:?} (hand value {lambda:?})", b.k, b.lambda),
    )
}

fn end_to_end() -> Check {
    let euler = example::euler_model();
    let exact = example::exact_model();
    let iss = IssParams {
        m: 5.0,
        e: 1.0,
        t_try: 0.01,
        trials: 200,
        seed: 1,
    };
    let cert_a = fit_iss(&euler, &iss).map_err(err)?;
    let repc = RepcParams {
        m: 5.0,
        e: 1.0,
        t_cap: 0.01,
        samples: 2000,
        seed: 2,
    };
    let cons = fit_repc(&euler, &exact, &repc).map_err(err)?;
    let (delta, eta) = (0.5, 0.1);
    let window = transfer_window(&cert_a, delta, eta);
    let repmc = RepmcParams {
        m: 5.0,
        e: 1.0,
        horizon: window.max(3.0),
        eta,
        t_start: cons.t_star,
        trials: 100,
        seed: 3,
    };
    let mc = check_repmc(&euler, &exact, &repmc, &cons.phi).map_err(err)?;
    if !(mc.t_l > 0.0) {
        return Err(format!("REPMC found no admissible period (ladder {:?})", mc.ladder));
    }
    let cert_b = transfer_certificate(&cert_a, &cons, delta, eta).map_err(err)?;
    let search = TStarSearch {
        m: 5.0,
        e: 1.0,
        t_lo: 1e-4,
        t_hi: mc.t_l.min(cons.t_star),
        trials: 200,
        seed: 4,
    };
    let found = find_t_star(&exact, CertSource::Fixed(&cert_b), &search).map_err(err)?;
    let check = IssParams {
        m: 5.0,
        e: 1.0,
        t_try: found.t_star,
        trials: 200,
        seed: 5,
    };
    let r = verify_iss(&exact, &cert_b, &check).map_err(err)?;
    ensure(
        r.pass && r.violations == 0 && r.trials >= 200,
        format!(
            "Euler K = {:.3}, lambda = {:.3}; T_L = {:e}; exact K = {:.3}, lambda = {:.4}; T* = {:e}; {} trials, {} violation(s)",
            cert_a.k, cert_a.lambda, mc.t_l, cert_b.k, cert_b.lambda, found.t_star, r.trials, r.violations
        ),
    )
}

fn equilibrium() -> Check {
    let euler = example::euler_model();
    let exact = example::exact_model();
    let sched = SamplingSchedule::random_until(&mut stream_rng(9, 0), 0.01, 6.0).map_err(err)?;
    let zero = DisturbanceSignal::zero(sched.len(), 1);
    let a = simulate(&euler, &[0.0], &sched, &zero).map_err(err)?;
    let b = simulate(&exact, &[0.0], &sched, &zero).map_err(err)?;
    let worst = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| dist(x, y))
        .fold(0.0, f64::max);
    ensure(
        worst <= 1e-9 && a.states.len() == b.states.len(),
        format!("{} steps, max mismatch {worst:e}", sched.len()),
    )
}

fn reproduce_twice() -> Check {
    let spec = ExampleSpec::with_seed(2024);
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    let mut outcomes = Vec::new();
    for d in &dirs {
        outcomes.push(reproduce_example(&spec, d.path()).map_err(err)?);
    }
    let report = load_report(dirs[0].path())?;
    let files: Vec<_> = outcomes[0].artifacts.iter().map(|p| p.file_name().expect("file").to_owned()).collect();
    let has = |ext: &str| files.iter().any(|f| f.to_string_lossy().ends_with(ext));
    let identical = files.iter().all(|f| {
        std::fs::read(dirs[0].path().join(f)).ok() == std::fs::read(dirs[1].path().join(f)).ok()
    });
    let settles = report["disturbance_free_settles"].as_bool() == Some(true);
    let within = report["disturbed_within_gamma"].as_bool() == Some(true);
    let runs = report["runs"].as_array().ok_or("report has no runs")?;
    ensure(
        settles && within && has(".csv") && has(".svg") && identical,
        format!(
            "final |x| {} / {}, disturbed tail {} / {} vs gamma(1) = {}, {} files byte-identical: {identical}",
            runs[0]["final_norm"], runs[2]["final_norm"], runs[1]["tail_sup"], runs[3]["tail_sup"],
            report["gamma_e"], files.len()
        ),
    )
}

fn load_report(dir: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(dir.join("example_report.json")).map_err(err)?;
    serde_json::from_str(&text).map_err(err)
}

fn intersample() -> Check {
    let spec = ExampleSpec::with_seed(2024);
    let dir = tempfile::tempdir().map_err(err)?;
    let outcome = reproduce_example(&spec, dir.path()).map_err(err)?;
    let report = load_report(dir.path())?;
    let runs = report["intersample"].as_array().ok_or("report has no intersample entries")?;
    let mut parts = Vec::new();
    let mut ok = spec.dense_per_interval == 64 && !runs.is_empty();
    for r in runs {
        ok &= r["pass"].as_bool() == Some(true) && r["violations"].as_u64() == Some(0);
        parts.push(format!(
            "{} points, {} violation(s), C = {}, worst margin {}",
            r["points"], r["violations"], r["C"], r["worst_margin"]
        ));
    }
    ensure(ok && outcome.verdict == Verdict::Pass, parts.join("; "))
}

fn phi_inequality() -> Check {
    let law = example::matched_law();
    let mut rng = stream_rng(12, 0);
    let (mut violations, mut equal) = (0usize, 0usize);
    let mut worst: Option<(f64, f64, f64, f64)> = None;
    let samples = 10_000;
    for _ in 0..samples {
        let e = rng.gen_range(-1.0..=1.0);
        let t = loop {
            let t = rng.gen_range(0.0..1.0);
            if t > 0.0 {
                break t;
            }
        };
        let u = law.apply(&[0.0], &[e], t).map_err(err)?;
        let lhs = example::plant().eval_f(&[0.0], &u).map_err(err)?[0].abs();
        let a = e.abs();
        let rhs = a.powi(9) + 3.0 * a.powi(7) + 3.0 * a.powi(5);
        if lhs > rhs {
            violations += 1;
            if worst.is_none_or(|w| lhs - rhs > w.2 - w.3) {
                worst = Some((e, t, lhs, rhs));
            }
        }
        if (lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300) {
            equal += 1;
        }
    }
    let detail = format!(
        "{violations} of {samples} samples exceed the bound, claimed equality holds at {equal}; worst (e, T, |f|, bound) = {worst:?}"
    );
    ensure(violations == 0, detail)
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "matching identity", matching_identity),
        (2, "Heun spot value", spot_value),
        (3, "Euler mismatch order", order_law),
        (4, "Runge-Kutta consistency", rk_consistency),
        (5, "Lyapunov decrease", lyapunov),
        (6, "divergence at T = 0.5", divergence),
        (7, "transfer formulas", transfer_formulas),
        (8, "end-to-end transfer", end_to_end),
        (9, "mismatch at the equilibrium", equilibrium),
        (10, "reproduce-example", reproduce_twice),
        (11, "intersample envelope", intersample),
        (12, "phi inequality", phi_inequality),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (verdict, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[PRIMARY] criterion {n} ({name}): {verdict} - {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
