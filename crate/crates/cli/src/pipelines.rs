use std::path::Path;

use nls_floer::diagnostics::{distinctness_report, gradient_monitor, normal_profile, normal_profile_state};
use nls_floer::dynamics::{
    continue_fixed_point, evolve, fixed_point_residual, fs_distance_fields, uniform_schedule, ContinuationConfig,
    ContinuationResult, ProjectivePoint,
};
use nls_floer::floer::{
    extract_slices, fixed_point_orbit, free_orbit, load_state, solve_floer, write_history_csv, CutoffProfile,
    CylinderGrid, FloerBoundary, FloerSolution, SliceReport,
};
use nls_floer::model::{free_energy, galerkin_gap, hofer_norm, random_sphere_point, ModelSpec, Nonlinearity};
use nls_floer::smalldiv::{convergents, divisor_scan};
use nls_floer::spectral::SpectralField;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Config, CutoffChoice, InitialState};
use crate::output::{label, num, Outputs};
use crate::Failure;

/// What a finished pipeline hands back: a summary, and the failure to report
/// once every artifact is on disk.
pub struct Outcome {
    pub summary: Value,
    pub failure: Option<Failure>,
}

impl Outcome {
    fn ok(summary: Value) -> Self {
        Self { summary, failure: None }
    }
}

fn csv_err(e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("csv: {e}"))
}

fn csv_rows(buf: &mut Vec<u8>, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

fn initial_state(cfg: &Config, k: usize) -> Result<SpectralField, Failure> {
    let u = match &cfg.simulate.initial {
        InitialState::Mode { mode } => SpectralField::single_mode(k, *mode)?,
        InitialState::Coeffs { coeffs } => {
            let c = coeffs.iter().map(|[re, im]| Complex64::new(*re, *im)).collect();
            SpectralField::from_coeffs(c)?
                .normalized()
                .ok_or_else(|| Failure::Config("simulate.initial.coeffs: zero vector".into()))?
        }
        InitialState::Random { .. } => random_sphere_point(k, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    Ok(u)
}

/// Exact solution when the nonlinear phase is diagonal and time independent.
fn hartree_exact(model: &ModelSpec, u: &SpectralField, dt: f64) -> Option<SpectralField> {
    if !matches!(model.nonlinearity(), Nonlinearity::Hartree) {
        return None;
    }
    let psi = model.psi();
    let eps = model.strength();
    Some(SpectralField::from_fn(u.bandwidth(), |n| {
        let p = psi[n.unsigned_abs() as usize];
        u.coeff(n) * Complex64::from_polar(1.0, -((n * n) as f64 + eps * p * p) * dt)
    }))
}

pub fn simulate(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let model = &cfg.model;
    let s = &cfg.simulate;
    let u0 = initial_state(cfg, model.bandwidth())?;
    let n0 = u0.l2_norm();
    let h0 = free_energy(&u0) + model.eval_f(&u0, s.t0)?;
    let dt = (s.t1 - s.t0) / s.steps as f64;
    let mut rows = vec![vec![num(s.t0), num(n0), num(0.0), num(h0)]];
    let (mut u, mut drift, mut done) = (u0.clone(), 0.0f64, 0);
    while done < s.steps {
        let chunk = s.report_every.min(s.steps - done);
        let (ta, tb) = (s.t0 + done as f64 * dt, s.t0 + (done + chunk) as f64 * dt);
        let offset = (u.l2_norm() - n0).abs();
        let ev = evolve(model, &u, ta, tb, chunk)?;
        u = ev.state;
        drift = drift.max(offset + ev.l2_drift);
        done += chunk;
        let h = free_energy(&u) + model.eval_f(&u, tb)?;
        rows.push(vec![num(tb), num(u.l2_norm()), num((u.l2_norm() - n0).abs()), num(h)]);
    }
    out.write_with("trajectory.csv", |b| csv_rows(b, &["t", "l2_norm", "l2_drift", "hamiltonian"], rows))?;
    let final_rows = u.iter_modes().map(|(n, c)| vec![n.to_string(), num(c.re), num(c.im)]);
    out.write_with("final_state.csv", |b| csv_rows(b, &["n", "re", "im"], final_rows))?;
    let closed_form_error = hartree_exact(model, &u0, s.t1 - s.t0).map(|e| {
        e.coeffs()
            .iter()
            .zip(u.coeffs())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    });
    let h1 = free_energy(&u) + model.eval_f(&u, s.t1)?;
    Ok(Outcome::ok(json!({
        "steps": s.steps,
        "t0": s.t0,
        "t1": s.t1,
        "l2_initial": n0,
        "l2_final": u.l2_norm(),
        "l2_drift": drift,
        "hamiltonian_change": (h1 - h0).abs(),
        "closed_form_error": closed_form_error,
    })))
}

/// Stored form of one continued fixed point.
#[derive(Debug, Serialize, Deserialize)]
pub struct FixedPointFile {
    pub n: i64,
    pub eps: f64,
    pub phase: f64,
    pub residual: f64,
    pub verify_steps: usize,
    pub verify_residual: f64,
    pub converged: bool,
    pub point: ProjectivePoint,
}

struct ModeRun {
    n: i64,
    result: Result<(ContinuationResult, f64), Failure>,
}

fn run_continuation(model: &ModelSpec, n: i64, c: &ContinuationConfig, verify_factor: usize) -> Result<(ContinuationResult, f64), Failure> {
    let res = continue_fixed_point(model, n, &uniform_schedule(model.strength(), c.eps_steps), c)?;
    let verify = fixed_point_residual(model, &res.endpoint().point, c.newton.steps * verify_factor)?;
    Ok((res, verify))
}

pub fn fixed_points(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let model = &cfg.model;
    let fp = &cfg.fixed_points;
    let runs: Vec<ModeRun> = fp
        .modes
        .par_iter()
        .map(|&n| ModeRun {
            n,
            result: run_continuation(model, n, &fp.continuation, fp.verify_factor),
        })
        .collect();

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut modes = Vec::new();
    let mut failure = None;
    for run in runs {
        match run.result {
            Ok((res, verify)) => {
                let end = res.endpoint();
                let ok = res.converged && verify < fp.verify_tol;
                let file = FixedPointFile {
                    n: run.n,
                    eps: end.eps,
                    phase: end.phase,
                    residual: end.residual,
                    verify_steps: fp.continuation.newton.steps * fp.verify_factor,
                    verify_residual: verify,
                    converged: ok,
                    point: end.point.clone(),
                };
                out.write_json(&format!("fixed_point_n{}.json", run.n), &file)?;
                let rows = res.path.iter().map(|p| vec![num(p.eps), num(p.residual), num(p.phase)]);
                out.write_with(&format!("continuation_n{}.csv", run.n), |b| csv_rows(b, &["eps", "residual", "phase"], rows))?;
                modes.push(json!({"n": run.n, "converged": ok, "residual": end.residual, "verify_residual": verify, "phase": end.phase}));
                if !ok && failure.is_none() {
                    failure = Some(Failure::NonConvergence(format!(
                        "mode {}: residual {:e}, re-verified {:e}",
                        run.n, end.residual, verify
                    )));
                }
                points.push(end.point.clone());
                labels.push(format!("n{}", run.n));
            }
            Err(e) => {
                modes.push(json!({"n": run.n, "converged": false, "error": e.message()}));
                if failure.is_none() {
                    failure = Some(e);
                }
            }
        }
    }
    let mut min_distance = None;
    let mut flagged = Vec::new();
    if !points.is_empty() {
        let table = distinctness_report(&points, fp.distinct_threshold)?;
        out.write_with("distances.csv", |b| table.write_csv(&labels, b).map_err(Failure::from))?;
        min_distance = table
            .matrix
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().skip(i + 1).copied())
            .reduce(f64::min);
        flagged = table.flagged.iter().map(|(i, j, d)| json!([labels[*i], labels[*j], d])).collect();
    }
    Ok(Outcome {
        summary: json!({"modes": modes, "min_distance": min_distance, "flagged_pairs": flagged}),
        failure,
    })
}

struct FloerRun {
    t: f64,
    result: Result<(FloerSolution, SliceReport, f64, Option<f64>), Failure>,
}

fn floer_boundary(cfg: &Config) -> Result<FloerBoundary, Failure> {
    let model = &cfg.model;
    let fl = &cfg.floer;
    let k = model.bandwidth();
    let left = free_orbit(k, fl.mode, fl.n_t)?;
    let right = match fl.cutoff {
        CutoffChoice::Bump => left.clone(),
        CutoffChoice::Switch => {
            let c = &fl.continuation;
            let res = continue_fixed_point(model, fl.mode, &uniform_schedule(model.strength(), c.eps_steps), c)?;
            if !res.converged {
                return Err(Failure::NonConvergence(format!(
                    "continuation of mode {} stopped at residual {:e}",
                    fl.mode,
                    res.endpoint().residual
                )));
            }
            fixed_point_orbit(model, &res.endpoint().point, fl.n_t, fl.orbit_steps)?
        }
    };
    Ok(FloerBoundary {
        left,
        right,
        gauge: fl.mode,
        mode: fl.mode,
    })
}

fn floer_one(cfg: &Config, boundary: &FloerBoundary, t: f64) -> Result<(FloerSolution, SliceReport, f64, Option<f64>), Failure> {
    let model = &cfg.model;
    let fl = &cfg.floer;
    let cutoff = match fl.cutoff {
        CutoffChoice::Bump => CutoffProfile::bump(t)?,
        CutoffChoice::Switch => CutoffProfile::switch(t)?,
    };
    let grid = CylinderGrid::new(fl.s_half, fl.n_s, fl.n_t, model.bandwidth())?;
    let guess = match &fl.guess {
        Some(p) => Some(load_state(p)?),
        None => None,
    };
    let sol = solve_floer(model, grid, cutoff, boundary, guess.as_ref(), &fl.solver)?;
    let slices = extract_slices(model, &sol.state, &cutoff, fl.gamma_max)?;
    let last = grid.n_s - 1;
    let right_distance = fs_distance_fields(sol.state.node(last, 0), &boundary.right[0]);
    let refined = if fl.refine_check {
        let fine = solve_floer(model, grid.refine_s(), cutoff, boundary, None, &fl.solver)?;
        Some(fine.energy)
    } else {
        None
    };
    Ok((sol, slices, right_distance, refined))
}

pub fn floer(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let boundary = floer_boundary(cfg)?;
    let runs: Vec<FloerRun> = cfg
        .floer
        .t_values
        .par_iter()
        .map(|&t| FloerRun {
            t,
            result: floer_one(cfg, &boundary, t),
        })
        .collect();
    let mut reports = Vec::new();
    let mut failure = None;
    for run in runs {
        let tag = label(run.t);
        match run.result {
            Ok((sol, slices, right_distance, refined)) => {
                out.write(&format!("floer_T{tag}_state.json"), sol.state.to_json()?.as_bytes())?;
                out.write_with(&format!("floer_T{tag}_history.csv"), |b| write_history_csv(&sol.history, b).map_err(Failure::from))?;
                let profile = slices.profile.iter().map(|(s, v)| vec![num(*s), num(*v)]);
                out.write_with(&format!("floer_T{tag}_profile.csv"), |b| csv_rows(b, &["s", "slice_value"], profile))?;
                let rows = slices.slices.iter().map(|sl| {
                    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
                    vec![
                        sl.gamma.to_string(),
                        sl.side.to_string(),
                        opt(sl.s),
                        opt(sl.value),
                        num(sl.threshold),
                        sl.qualifies.to_string(),
                        opt(sl.boundary_distance),
                    ]
                });
                out.write_with(&format!("floer_T{tag}_slices.csv"), |b| {
                    csv_rows(b, &["gamma", "side", "s", "value", "threshold", "qualifies", "boundary_distance"], rows)
                })?;
                let refined_change = refined.map(|e| (e - sol.energy).abs() / sol.energy.abs().max(1e-300));
                reports.push(json!({
                    "t": run.t,
                    "converged": sol.converged,
                    "iterations": sol.iterations,
                    "residual_norm": sol.residual_norm,
                    "energy": sol.energy,
                    "status": sol.status,
                    "right_distance": right_distance,
                    "refined_energy": refined,
                    "refined_relative_change": refined_change,
                }));
                if !sol.converged && failure.is_none() {
                    failure = Some(Failure::NonConvergence(format!("T = {}: {}", run.t, sol.status)));
                }
            }
            Err(e) => {
                reports.push(json!({"t": run.t, "converged": false, "error": e.message()}));
                if failure.is_none() {
                    failure = Some(e);
                }
            }
        }
    }
    Ok(Outcome {
        summary: json!({"mode": cfg.floer.mode, "cutoff": cfg.floer.cutoff, "runs": reports}),
        failure,
    })
}

pub fn divisors(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let d = &cfg.divisors;
    let scan = divisor_scan(d.m_max, d.n)?;
    let rows = scan.entries.iter().map(|e| {
        let r = &e.record;
        vec![
            r.m.to_string(),
            r.n.to_string(),
            r.q().to_string(),
            r.p_star.to_string(),
            num(r.value),
            e.is_record.to_string(),
        ]
    });
    out.write_with("divisors.csv", |b| csv_rows(b, &["m", "n", "q", "p_star", "value", "is_record"], rows))?;
    let rows = scan.records.iter().map(|r| vec![r.m.to_string(), num(r.value), num(r.value * (r.m as f64).powi(14))]);
    out.write_with("records.csv", |b| csv_rows(b, &["m", "value", "value_times_m14"], rows))?;
    let conv = convergents(&d.convergents.x, d.convergents.count)?;
    let rows = conv.convergents.iter().enumerate().map(|(i, c)| {
        vec![
            i.to_string(),
            conv.partial_quotients[i].to_string(),
            c.p.to_string(),
            c.q.to_string(),
            num(c.error),
            c.certified.to_string(),
        ]
    });
    out.write_with("convergents.csv", |b| csv_rows(b, &["index", "a", "p", "q", "error", "certified"], rows))?;
    Ok(Outcome::ok(json!({
        "n": scan.n,
        "m_max": scan.m_max,
        "records": scan.records.len(),
        "fitted_c": scan.fitted_c,
        "worst_exponent": scan.worst_exponent,
        "worst_pointwise_exponent": scan.worst_pointwise_exponent,
        "convergents": conv.convergents.len(),
        "convergents_truncated": conv.truncated,
    })))
}

pub fn hofer(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let report = hofer_norm(&cfg.model, &cfg.hofer)?;
    out.write_json("hofer.json", &report)?;
    say!("hofer estimate: {}", num(report.estimate));
    let failure = (!report.converged).then(|| Failure::NonConvergence("an extremum search missed the gradient tolerance".into()));
    Ok(Outcome {
        summary: json!({
            "estimate": report.estimate,
            "converged": report.converged,
            "certified_upper": report.certified_upper,
            "sup_f_bound": report.sup_f_bound,
            "sufficient_gate": report.sufficient_gate,
        }),
        failure,
    })
}

pub fn galerkin(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let g = &cfg.galerkin;
    let reports = g
        .k_values
        .par_iter()
        .map(|&k| galerkin_gap(&cfg.model, k, g.radius, g.samples, cfg.seed, g.t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut prev: Option<f64> = None;
    let mut rows = Vec::new();
    for r in &reports {
        let ratio = prev.filter(|p| *p > 0.0).map(|p| r.grad_gap / p);
        prev = Some(r.grad_gap);
        rows.push(vec![
            r.k.to_string(),
            num(r.f_gap),
            num(r.grad_gap),
            num(r.conv_gap),
            num(r.conv_bound),
            num(r.f_gap_bound),
            num(r.grad_gap_bound),
            ratio.map(num).unwrap_or_default(),
        ]);
    }
    out.write_with("galerkin.csv", |b| {
        csv_rows(
            b,
            &["k", "f_gap", "grad_gap", "conv_gap", "conv_bound", "f_gap_bound", "grad_gap_bound", "grad_ratio"],
            rows,
        )
    })?;
    let bounded = reports.iter().all(|r| r.grad_gap <= r.grad_gap_bound * (1.0 + 1e-12) && r.f_gap <= r.f_gap_bound * (1.0 + 1e-12));
    Ok(Outcome::ok(json!({"k_values": g.k_values, "within_bounds": bounded})))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("state").to_string()
}

pub fn diagnose(cfg: &Config, out: &mut Outputs) -> Result<Outcome, Failure> {
    let dg = &cfg.diagnose;
    let model = &cfg.model;
    let default_ells = |k: usize| -> Vec<usize> { (1..k.max(2)).collect() };
    let mut states = Vec::new();
    for path in &dg.states {
        let state = load_state(path)?;
        let name = stem(path);
        let ells = dg.ells.clone().unwrap_or_else(|| default_ells(state.grid.k));
        let mut decreasing = Vec::new();
        for &alpha in &dg.alphas {
            let prof = normal_profile_state(&state, &ells, alpha)?;
            out.write_with(&format!("profile_{name}_a{alpha}.csv"), |b| prof.write_csv(b).map_err(Failure::from))?;
            decreasing.push(json!({"alpha": alpha, "deltas_decreasing": [prof.weighted_decreasing(0), prof.weighted_decreasing(1), prof.weighted_decreasing(2)]}));
        }
        let mon = gradient_monitor(model, &state)?;
        out.write_with(&format!("density_{name}.csv"), |b| mon.write_density_csv(b).map_err(Failure::from))?;
        let summary = json!({"sup_ds": mon.sup_ds, "sup_dt": mon.sup_dt, "energy": mon.energy});
        out.write_json(&format!("monitor_{name}.json"), &summary)?;
        states.push(json!({"state": name, "monitor": summary, "profiles": decreasing}));
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for path in &dg.points {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let file: FixedPointFile =
            serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let name = stem(path);
        let ells = dg.ells.clone().unwrap_or_else(|| default_ells(file.point.rep().bandwidth()));
        for &alpha in &dg.alphas {
            let prof = normal_profile(file.point.rep(), &ells, alpha)?;
            out.write_with(&format!("profile_{name}_a{alpha}.csv"), |b| prof.write_csv(b).map_err(Failure::from))?;
        }
        points.push(file.point);
        labels.push(name);
    }
    let mut flagged = Vec::new();
    if !points.is_empty() {
        let table = distinctness_report(&points, dg.distinct_threshold)?;
        out.write_with("distances.csv", |b| table.write_csv(&labels, b).map_err(Failure::from))?;
        flagged = table.flagged.iter().map(|(i, j, d)| json!([labels[*i], labels[*j], d])).collect();
    }
    Ok(Outcome::ok(json!({"states": states, "points": labels, "flagged_pairs": flagged})))
}
