//! The cubic benchmark end to end: Euler and exact closed loops from one
//! initial state, with and without measurement errors, plus the fitted
//! certificates that bound them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use sdstab_core::closedloop::{fmt_num, simulate, DisturbanceSignal, SamplingSchedule, Trajectory};
use sdstab_core::consistency::{fit_repc, RepcParams};
use sdstab_core::sampling::stream_rng;
use sdstab_core::stability::{dense_states, fit_iss, intersample_envelope, IntersampleParams, IntersampleReport, IssParams};
use sdstab_core::{dist, example, norm};

use crate::config::ExampleSpec;
use crate::error::{CliError, Result};
use crate::svg::{Chart, Mark, Series};
use crate::tasks::{write_json, write_text, write_trajectory};
use crate::{Outcome, Verdict};

/// Halton samples used for the intersample sup bounds.
const SUP_SAMPLES: usize = 4096;
/// Fit and validation samples of the Euler/exact consistency certificate.
const REPC_SAMPLES: usize = 2000;
/// Dense points per interval kept in the SVG.
const PLOT_STRIDE: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub steps: usize,
    pub escaped: bool,
    pub elapsed: f64,
    pub final_norm: f64,
    pub max_norm: f64,
    /// `max |x_k|` over `t_k >= horizon / 2`.
    pub tail_sup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowCheck {
    pub window: f64,
    pub eta: f64,
    /// `eta |x_0| + phi(E)`.
    pub bound: f64,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExampleReport {
    pub seed: u64,
    #[serde(rename = "T_max")]
    pub t_max: f64,
    pub horizon: f64,
    pub x0: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub runs: Vec<RunSummary>,
    pub disturbance_free_settles: bool,
    pub gamma_e: f64,
    pub disturbed_within_gamma: bool,
    pub euler_vs_exact: Vec<WindowCheck>,
    pub intersample: Vec<IntersampleReport>,
    pub pass: bool,
}

fn summary(name: &str, traj: &Trajectory, horizon: f64) -> RunSummary {
    let norms = traj.norms();
    let tail_sup = traj
        .times
        .iter()
        .zip(&norms)
        .filter(|(t, _)| **t >= horizon / 2.0)
        .map(|(_, n)| *n)
        .fold(0.0, f64::max);
    RunSummary {
        name: name.into(),
        steps: traj.len() - 1,
        escaped: traj.escaped(),
        elapsed: *traj.times.last().expect("x_0 present"),
        final_norm: *norms.last().expect("x_0 present"),
        max_norm: norms.iter().copied().fold(0.0, f64::max),
        tail_sup,
    }
}

/// Rows `k,j,t,x_*`: the `j`-th of the dense states on interval `k`, with
/// `j = 0` the sampled state itself.
pub fn write_dense(path: &Path, run: &str, traj: &Trajectory, dense: &[Vec<Vec<f64>>]) -> Result<PathBuf> {
    let file = File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    let n = traj.states[0].len();
    let mut write = || -> std::io::Result<()> {
        let cols: Vec<String> = (0..n).map(|i| format!("x_{i}")).collect();
        writeln!(w, "run,k,j,t,{}", cols.join(","))?;
        for (k, pts) in dense.iter().enumerate() {
            let row = |j: usize, t: f64, x: &[f64]| {
                let xs: Vec<String> = x.iter().map(|v| fmt_num(*v)).collect();
                format!("{run},{k},{j},{},{}", fmt_num(t), xs.join(","))
            };
            writeln!(w, "{}", row(0, traj.times[k], &traj.states[k]))?;
            for (j, x) in pts.iter().enumerate() {
                let t = traj.times[k] + traj.periods[k] * (j + 1) as f64 / pts.len() as f64;
                writeln!(w, "{}", row(j + 1, t, x))?;
            }
        }
        w.flush()
    };
    write().map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(path.to_path_buf())
}

/// `(t, |x(t)|)` along the dense states, starting at `x_0`.
pub fn dense_points(traj: &Trajectory, dense: &[Vec<Vec<f64>>]) -> Vec<(f64, f64)> {
    thinned(traj, dense, 1)
}

fn thinned(traj: &Trajectory, dense: &[Vec<Vec<f64>>], stride: usize) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, norm(&traj.states[0]))];
    for (k, interval) in dense.iter().enumerate() {
        let len = interval.len();
        for (j, x) in interval.iter().enumerate() {
            if (j + 1) % stride == 0 || j + 1 == len {
                let t = traj.times[k] + traj.periods[k] * (j + 1) as f64 / len as f64;
                pts.push((t, norm(x)));
            }
        }
    }
    pts
}

fn stems(traj: &Trajectory) -> Vec<(f64, f64)> {
    traj.times.iter().copied().zip(traj.norms()).collect()
}

/// Largest `|x^a_k - x^b_k|` over `t_k <= window`.
fn deviation_within(a: &Trajectory, b: &Trajectory, window: f64) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .zip(&a.times)
        .take_while(|(_, t)| **t <= window)
        .map(|((xa, xb), _)| dist(xa, xb))
        .fold(0.0, f64::max)
}

pub fn reproduce_example(spec: &ExampleSpec, out: &Path) -> Result<Outcome> {
    if !(spec.t_max > 0.0 && spec.t_max <= example::T_U && spec.horizon > 0.0 && spec.e >= 0.0) {
        return Err(CliError::Config(format!(
            "example needs 0 < T_max <= {}, horizon > 0 and E >= 0",
            example::T_U
        )));
    }
    let euler = example::euler_model();
    let exact = example::exact_model();
    let sched = SamplingSchedule::random_until(&mut stream_rng(spec.seed, 0), spec.t_max, spec.horizon)?;
    let zero = DisturbanceSignal::zero(sched.len(), 1);
    let noise = DisturbanceSignal::uniform(&mut stream_rng(spec.seed, 1), spec.e, sched.len(), 1);
    let x0 = [spec.x0];

    let runs = [
        ("euler_clean", &euler, &zero),
        ("euler_disturbed", &euler, &noise),
        ("exact_clean", &exact, &zero),
        ("exact_disturbed", &exact, &noise),
    ];
    let mut trajs = Vec::with_capacity(runs.len());
    let mut artifacts = Vec::new();
    for (name, model, d) in runs {
        let traj = simulate(model, &x0, &sched, d)?;
        artifacts.push(write_trajectory(&out.join(format!("{name}.csv")), &traj)?);
        trajs.push(traj);
    }
    let summaries: Vec<RunSummary> = runs
        .iter()
        .zip(&trajs)
        .map(|((name, _, _), t)| summary(name, t, spec.horizon))
        .collect();

    let iss = IssParams {
        m: spec.x0.abs(),
        e: spec.e,
        t_try: spec.t_max,
        trials: spec.trials,
        seed: spec.seed,
    };
    let cert = fit_iss(&exact, &iss)?;
    artifacts.push(write_json(&out.join("iss_certificate.json"), &cert)?);
    let gamma_e = cert.gamma.eval(spec.e);

    let repc = RepcParams {
        m: spec.x0.abs(),
        e: spec.e,
        t_cap: spec.t_max,
        samples: REPC_SAMPLES,
        seed: spec.seed,
    };
    let cons = fit_repc(&euler, &exact, &repc)?;
    artifacts.push(write_json(&out.join("consistency_certificate.json"), &cons)?);
    let bound = spec.eta * spec.x0.abs() + cons.phi.eval(spec.e);
    let euler_vs_exact: Vec<WindowCheck> = [(0, 2), (1, 3)]
        .into_iter()
        .map(|(a, b)| {
            let max_deviation = deviation_within(&trajs[a], &trajs[b], spec.window);
            WindowCheck {
                window: spec.window,
                eta: spec.eta,
                bound,
                max_deviation,
                pass: max_deviation <= bound,
            }
        })
        .collect();

    let ip = IntersampleParams {
        m: spec.x0.abs(),
        e: spec.e,
        dense_per_interval: spec.dense_per_interval,
        sup_samples: SUP_SAMPLES,
        t_cap: spec.t_max,
    };
    let mut intersample = Vec::new();
    let mut dense_curves = Vec::new();
    for (idx, name) in [(2, "exact_clean"), (3, "exact_disturbed")] {
        let dense = dense_states(&exact, &trajs[idx], spec.dense_per_interval)?;
        artifacts.push(write_dense(&out.join(format!("{name}_dense.csv")), name, &trajs[idx], &dense)?);
        intersample.push(intersample_envelope(&exact, &trajs[idx], &cert, &ip)?);
        dense_curves.push(thinned(&trajs[idx], &dense, PLOT_STRIDE));
    }

    let disturbance_free_settles = [&summaries[0], &summaries[2]]
        .iter()
        .all(|s| !s.escaped && s.final_norm < 1e-3);
    let disturbed_within_gamma = [&summaries[1], &summaries[3]]
        .iter()
        .all(|s| !s.escaped && s.tail_sup <= gamma_e);
    let pass = disturbance_free_settles
        && disturbed_within_gamma
        && euler_vs_exact.iter().all(|c| c.pass)
        && intersample.iter().all(|r| r.pass);

    let mut curves = dense_curves.into_iter();
    let chart = Chart {
        title: format!("x0 = {}, sampling periods below {}", spec.x0, spec.t_max),
        x_label: "t".into(),
        y_label: "|x|".into(),
        series: vec![
            Series {
                label: "exact, disturbance-free".into(),
                points: curves.next().expect("two curves"),
                mark: Mark::Line,
                color: "#c0392b",
                dashed: false,
            },
            Series {
                label: "exact, disturbed".into(),
                points: curves.next().expect("two curves"),
                mark: Mark::Line,
                color: "#1f4e9c",
                dashed: true,
            },
            Series {
                label: "Euler, disturbance-free".into(),
                points: stems(&trajs[0]),
                mark: Mark::Stems,
                color: "#c0392b",
                dashed: false,
            },
            Series {
                label: "Euler, disturbed".into(),
                points: stems(&trajs[1]),
                mark: Mark::Stems,
                color: "#1f4e9c",
                dashed: false,
            },
        ],
    };
    artifacts.push(write_text(&out.join("example.svg"), &chart.render())?);

    let report = ExampleReport {
        seed: spec.seed,
        t_max: spec.t_max,
        horizon: spec.horizon,
        x0: spec.x0,
        e: spec.e,
        runs: summaries,
        disturbance_free_settles,
        gamma_e,
        disturbed_within_gamma,
        euler_vs_exact,
        intersample,
        pass,
    };
    artifacts.push(write_json(&out.join("example_report.json"), &report)?);
    Ok(Outcome {
        verdict: if pass { Verdict::Pass } else { Verdict::Violation },
        summary: format!(
            "final |x| {:e} (Euler) / {:e} (exact), disturbed tail {:e} / {:e} vs gamma(E) = {:e}",
            report.runs[0].final_norm,
            report.runs[2].final_norm,
            report.runs[1].tail_sup,
            report.runs[3].tail_sup,
            gamma_e
        ),
        artifacts,
    })
}
