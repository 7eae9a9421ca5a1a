//! One function per subcommand. Each writes its artifacts into the output
//! directory and reports whether the underlying check passed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use sdstab_core::closedloop::{simulate, Trajectory};
use sdstab_core::consistency::{check_repmc, fit_repc, ConsistencyCertificate};
use sdstab_core::stability::{
    check_lyapunov, fit_iss, find_t_star, intersample_envelope, transfer_certificate, verify_iss, CertSource,
    IssCertificate, LyapunovSpec,
};
use sdstab_core::{norm, Error};

use crate::config::{DisturbanceSpec, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::svg::{Chart, Mark, Series};
use crate::{example, Outcome, Task, Verdict};

pub fn run(task: Task, cfg: &ExperimentConfig, out: &Path, plot: bool) -> Result<Outcome> {
    match task {
        Task::Simulate => run_simulate(cfg, out, plot),
        Task::FitRepc => run_fit_repc(cfg, out),
        Task::CheckRepmc => run_check_repmc(cfg, out),
        Task::FitIss => run_fit_iss(cfg, out),
        Task::VerifyIss => run_verify_iss(cfg, out),
        Task::FindTstar => run_find_tstar(cfg, out),
        Task::Transfer => run_transfer(cfg, out),
        Task::CheckLyapunov => run_check_lyapunov(cfg, out),
        Task::Intersample => run_intersample(cfg, out, plot),
        Task::ReproduceExample => {
            let spec = cfg.example.expect("validated");
            example::reproduce_example(&spec, out)
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialise");
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(path.to_path_buf())
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(path.to_path_buf())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<PathBuf> {
    let file = File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    traj.write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(path.to_path_buf())
}

/// `|x_k|` against `t_k` as stems joined by a line.
pub fn trajectory_chart(title: &str, traj: &Trajectory) -> Chart {
    let pts: Vec<(f64, f64)> = traj.times.iter().zip(traj.norms()).map(|(&t, n)| (t, n)).collect();
    Chart {
        title: title.into(),
        x_label: "t".into(),
        y_label: "|x|".into(),
        series: vec![
            Series {
                label: "|x_k|".into(),
                points: pts.clone(),
                mark: Mark::Stems,
                color: "#1f4e9c",
                dashed: false,
            },
            Series {
                label: "interpolated".into(),
                points: pts,
                mark: Mark::Line,
                color: "#999999",
                dashed: true,
            },
        ],
    }
}

fn verdict(pass: bool) -> Verdict {
    if pass {
        Verdict::Pass
    } else {
        Verdict::Violation
    }
}

/// Search failures that are findings about the models, not usage errors.
fn as_finding<T>(r: sdstab_core::Result<T>) -> Result<std::result::Result<T, Error>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e @ (Error::NoCertificate(_) | Error::NoAdmissiblePeriod { .. })) => Ok(Err(e)),
        Err(e) => Err(e.into()),
    }
}

fn finding(out: &Path, file: &str, err: &Error) -> Result<Outcome> {
    let path = write_json(&out.join(file), &json!({ "pass": false, "error": err.to_string() }))?;
    Ok(Outcome {
        verdict: Verdict::Violation,
        summary: err.to_string(),
        artifacts: vec![path],
    })
}

type Models = (Arc<sdstab_core::systems::ContinuousSystem>, Arc<sdstab_core::systems::ControlLaw>);

fn system(cfg: &ExperimentConfig) -> Result<Models> {
    let (sys, law) = cfg.load_system()?;
    Ok((Arc::new(sys), Arc::new(law)))
}

fn model_a(cfg: &ExperimentConfig, m: &Models) -> Result<sdstab_core::closedloop::ClosedLoopModel> {
    cfg.model.as_ref().expect("validated").build(&m.0, &m.1)
}

fn model_b(cfg: &ExperimentConfig, m: &Models) -> Result<sdstab_core::closedloop::ClosedLoopModel> {
    cfg.model_b.as_ref().expect("validated").build(&m.0, &m.1)
}

fn load_iss(cfg: &ExperimentConfig) -> Result<IssCertificate> {
    Ok(IssCertificate::load(&cfg.resolve(cfg.certificate.as_ref().expect("validated")))?)
}

fn load_consistency(cfg: &ExperimentConfig) -> Result<ConsistencyCertificate> {
    Ok(ConsistencyCertificate::load(
        &cfg.resolve(cfg.consistency_certificate.as_ref().expect("validated")),
    )?)
}

fn run_trajectory(cfg: &ExperimentConfig, model: &sdstab_core::closedloop::ClosedLoopModel) -> Result<Trajectory> {
    let sched = cfg.schedule.as_ref().expect("validated").build()?;
    let dist = cfg
        .disturbance
        .as_ref()
        .unwrap_or(&DisturbanceSpec::Zero)
        .build(sched.len(), model.error_dim())?;
    Ok(simulate(model, cfg.x0.as_ref().expect("validated"), &sched, &dist)?)
}

fn run_simulate(cfg: &ExperimentConfig, out: &Path, plot: bool) -> Result<Outcome> {
    let m = system(cfg)?;
    let model = model_a(cfg, &m)?;
    let traj = run_trajectory(cfg, &model)?;
    let mut artifacts = vec![write_trajectory(&out.join("trajectory.csv"), &traj)?];
    let norms = traj.norms();
    let report = json!({
        "model": model.label(),
        "status": traj.status,
        "steps": traj.len() - 1,
        "elapsed": traj.times.last(),
        "final_norm": norms.last(),
        "max_norm": norms.iter().copied().fold(0.0, f64::max),
    });
    artifacts.push(write_json(&out.join("simulate_report.json"), &report)?);
    if plot {
        let chart = trajectory_chart(&format!("{} closed loop", model.label()), &traj);
        artifacts.push(write_text(&out.join("trajectory.svg"), &chart.render())?);
    }
    Ok(Outcome {
        verdict: Verdict::Pass,
        summary: format!(
            "{} steps, {}, final |x| = {:e}",
            traj.len() - 1,
            if traj.escaped() { "escaped" } else { "complete" },
            norm(traj.final_state())
        ),
        artifacts,
    })
}

fn run_fit_repc(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let m = system(cfg)?;
    let (a, b) = (model_a(cfg, &m)?, model_b(cfg, &m)?);
    let cert = match as_finding(fit_repc(&a, &b, cfg.repc.as_ref().expect("validated")))? {
        Ok(c) => c,
        Err(e) => return finding(out, "consistency_certificate.json", &e),
    };
    let path = write_json(&out.join("consistency_certificate.json"), &cert)?;
    Ok(Outcome {
        verdict: Verdict::Pass,
        summary: format!(
            "K = {:e}, rho_c = {:e}, T* = {:e}, max violation {:e}",
            cert.k, cert.rho_c, cert.t_star, cert.fit_report.max_violation
        ),
        artifacts: vec![path],
    })
}

fn run_check_repmc(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let m = system(cfg)?;
    let (a, b) = (model_a(cfg, &m)?, model_b(cfg, &m)?);
    let cons = load_consistency(cfg)?;
    let report = match as_finding(check_repmc(&a, &b, cfg.repmc.as_ref().expect("validated"), &cons.phi))? {
        Ok(r) => r,
        Err(e) => return finding(out, "repmc_report.json", &e),
    };
    let path = write_json(&out.join("repmc_report.json"), &report)?;
    Ok(Outcome {
        verdict: Verdict::Pass,
        summary: format!("T_L = {:e} after {} rung(s)", report.t_l, report.ladder.len()),
        artifacts: vec![path],
    })
}

fn run_fit_iss(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let m = system(cfg)?;
    let model = model_a(cfg, &m)?;
    let cert = match as_finding(fit_iss(&model, cfg.iss.as_ref().expect("validated")))? {
        Ok(c) => c,
        Err(e) => return finding(out, "iss_certificate.json", &e),
    };
    let path = write_json(&out.join("iss_certificate.json"), &cert)?;
    Ok(Outcome {
        verdict: Verdict::Pass,
        summary: format!("K = {:e}, lambda = {:e}, gamma(E) = {:e}", cert.k, cert.lambda, {
            cert.gamma.eval(cfg.iss.as_ref().expect("validated").e)
        }),
        artifacts: vec![path],
    })
}

fn run_verify_iss(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let m = system(cfg)?;
    let model = model_a(cfg, &m)?;
    let cert = load_iss(cfg)?;
    let report = verify_iss(&model, &cert, cfg.iss.as_ref().expect("validated"))?;
    let path = write_json(&out.join("iss_report.json"), &report)?;
    Ok(Outcome {
        verdict: verdict(report.pass),
        summary: format!(
            "{} trials, {} violation(s), {} escape(s), worst margin {:e}",
            report.trials, report.violations, report.escapes, report.worst_margin
        ),
        artifacts: vec![path],
    })
}

fn run_find_tstar(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let m = system(cfg)?;
    let model = model_a(cfg, &m)?;
    let fixed = cfg.certificate.as_ref().map(|_| load_iss(cfg)).transpose()?;
    let source = fixed.as_ref().map_or(CertSource::Fit, CertSource::Fixed);
    let result = match as_finding(find_t_star(&model, source, cfg.tstar.as_ref().expect("validated")))? {
        Ok(r) => r,
        Err(e) => return finding(out, "tstar.json", &e),
    };
    let path = write_json(&out.join("tstar.json"), &result)?;
    let cert_path = write_json(&out.join("iss_certificate.json"), &result.certificate)?;
    Ok(Outcome {
        verdict: Verdict::Pass,
        summary: format!("T* = {:e} after {} probe(s)", result.t_star, result.probes.len()),
        artifacts: vec![path, cert_path],
    })
}

fn run_transfer(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let cert_a = load_iss(cfg)?;
    let cons = load_consistency(cfg)?;
    let t = cfg.transfer.unwrap_or_default();
    let cert_b = transfer_certificate(&cert_a, &cons, t.delta, t.eta)?;
    let path = write_json(&out.join("transferred_certificate.json"), &cert_b)?;
    Ok(Outcome {
        verdict: Verdict::Pass,
        summary: format!("K_b = {:e}, lambda_b = {:e}", cert_b.k, cert_b.lambda),
        artifacts: vec![path],
    })
}

fn run_check_lyapunov(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let m = system(cfg)?;
    let model = model_a(cfg, &m)?;
    let task = cfg.lyapunov.as_ref().expect("validated");
    let spec = LyapunovSpec::from_file(&task.spec)?;
    let report = check_lyapunov(&model, &spec, &task.params)?;
    let path = write_json(&out.join("lyapunov_report.json"), &report)?;
    Ok(Outcome {
        verdict: verdict(report.pass),
        summary: format!(
            "{} checks, {} gated out, {} violation(s), worst relative margin {:e}",
            report.checked, report.gated_out, report.violations, report.worst_relative_margin
        ),
        artifacts: vec![path],
    })
}

fn run_intersample(cfg: &ExperimentConfig, out: &Path, plot: bool) -> Result<Outcome> {
    let m = system(cfg)?;
    let model = model_a(cfg, &m)?;
    let cert = load_iss(cfg)?;
    let params = cfg.intersample.as_ref().expect("validated");
    let traj = run_trajectory(cfg, &model)?;
    let mut artifacts = vec![write_trajectory(&out.join("trajectory.csv"), &traj)?];
    let dense = sdstab_core::stability::dense_states(&model, &traj, params.dense_per_interval)?;
    artifacts.push(example::write_dense(&out.join("dense.csv"), "exact", &traj, &dense)?);
    let report = intersample_envelope(&model, &traj, &cert, params)?;
    artifacts.push(write_json(&out.join("intersample_report.json"), &report)?);
    if plot {
        let mut chart = trajectory_chart("exact closed loop with intersample states", &traj);
        chart.series.push(Series {
            label: "|x(t)|".into(),
            points: example::dense_points(&traj, &dense),
            mark: Mark::Line,
            color: "#c0392b",
            dashed: false,
        });
        artifacts.push(write_text(&out.join("intersample.svg"), &chart.render())?);
    }
    Ok(Outcome {
        verdict: verdict(report.pass),
        summary: format!(
            "{} points, {} violation(s), C(R,E) = {:e}, worst margin {:e}",
            report.points, report.violations, report.c, report.worst_margin
        ),
        artifacts,
    })
}
