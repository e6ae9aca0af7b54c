//! Subcommand drivers. Each returns its report, artifacts and findings; the
//! caller writes files and maps findings to the exit code.

use std::path::Path;

use serde_json::{json, Value};
use visco_core::analysis::{
    contraction_check, edb_residual, evi_residual, l_glob, DistanceMode,
};
use visco_core::experiments::{counterexample_scan, growth_envelope_study, refinement_convergence};
use visco_core::flow::solve;
use visco_core::io::{path_to_csv, trajectory_to_csv};
use visco_core::material::MaterialLaw;
use visco_core::metric::{bhattacharya, geodesic_distance, hellinger, l1_distance, sandwich_constants};
use visco_core::state::{energy_with_loading, StepDensity, RENORMALIZE_LIMIT};
use visco_core::{Error, Result};

use crate::config::RunConfig;

/// Relative slack for the energy monotonicity and sandwich checks.
const REL_SLACK: f64 = 1e-9;
const EDB_TOL: f64 = 1e-6;
/// Relative disagreement between relaxation and shooting that counts as a finding.
const SHOOTING_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct Outcome {
    pub report: Value,
    /// File name and contents, written next to the report.
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub findings: Vec<String>,
    /// Lines printed to stdout.
    pub summary: Vec<String>,
}

fn energy(law: &MaterialLaw, p: &StepDensity) -> f64 {
    energy_with_loading(law, p.cells(), &law.loading_cells(p.n()))
}

fn block<'a, T>(b: &'a Option<T>, name: &str) -> Result<&'a T> {
    b.as_ref().ok_or_else(|| Error::InvalidParameter(format!("this command needs a [{name}] block")))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// Closed-form distance `(2/√κ) Bh` when `k = κp`.
fn linear_distance(law: &MaterialLaw, bh: f64) -> Result<Option<f64>> {
    let c = law.constants()?;
    if (c.kappa_hi - c.kappa_lo).abs() <= 1e-12 * c.kappa_hi {
        Ok(Some(2.0 / c.kappa_lo.sqrt() * bh))
    } else {
        Ok(None)
    }
}

pub fn simulate(cfg: &RunConfig, base: &Path) -> Result<Outcome> {
    let law = cfg.build_law()?;
    let p0 = cfg.initial(base)?;
    let tr = solve(&law, &p0, &cfg.flow)?;
    let edb = edb_residual(&tr);
    let max_increase = tr
        .energies
        .windows(2)
        .map(|w| (w[1] - w[0]) / (1.0 + w[0].abs()))
        .fold(0.0, f64::max);
    let min_cell = tr.states.iter().map(|p| p.min_cell()).fold(f64::INFINITY, f64::min);
    let d = &tr.diagnostics;
    let mut findings = Vec::new();
    if edb > EDB_TOL {
        findings.push(format!("EDB residual {edb:.3e} exceeds {EDB_TOL:e}"));
    }
    if max_increase > REL_SLACK {
        findings.push(format!("energy increased by {max_increase:.3e} (relative)"));
    }
    if min_cell < d.sublevel_floor {
        findings.push(format!("min cell {min_cell} below the sublevel floor {}", d.sublevel_floor));
    }
    if d.max_mass_drift > RENORMALIZE_LIMIT {
        findings.push(format!("mass drift {:.3e}", d.max_mass_drift));
    }
    let e0 = tr.energies[0];
    let e1 = *tr.energies.last().expect("trajectory has states");
    let dissipation = *tr.dissipation.last().expect("trajectory has states");
    let report = json!({
        "law_id": tr.law_id,
        "n": tr.n,
        "t_final": d.t_final,
        "recorded_states": tr.times.len(),
        "initial_energy": e0,
        "final_energy": e1,
        "dissipation": dissipation,
        "edb_residual": edb,
        "invariants": {
            "min_cell": min_cell,
            "sublevel_floor": d.sublevel_floor,
            "positivity_margin": min_cell - d.sublevel_floor,
            "max_relative_energy_increase": max_increase,
            "max_mass_drift": d.max_mass_drift,
        },
        "diagnostics": to_json(d),
    });
    Ok(Outcome {
        summary: vec![
            format!("energy {e0} -> {e1}, dissipation {dissipation}"),
            format!("edb_residual = {edb:e}"),
            format!("min cell {min_cell}, sublevel floor {}", d.sublevel_floor),
        ],
        report,
        artifacts: vec![
            ("trajectory.csv".into(), trajectory_to_csv(&tr).into_bytes()),
            ("trajectory.json".into(), pretty(&to_json(&tr))),
        ],
        findings,
    })
}

fn endpoints(cfg: &RunConfig, base: &Path) -> Result<(MaterialLaw, StepDensity, StepDensity)> {
    let b = block(&cfg.distance, "distance")?;
    let law = cfg.build_law()?;
    let p0 = cfg.initial(base)?;
    let p1 = cfg.density(&b.target, base)?;
    if p0.n() != p1.n() {
        return Err(Error::DimensionMismatch { expected: p0.n(), got: p1.n() });
    }
    Ok((law, p0, p1))
}

pub fn distance(cfg: &RunConfig, base: &Path) -> Result<Outcome> {
    let (law, p0, p1) = endpoints(cfg, base)?;
    let he = hellinger(&p0, &p1)?;
    let bh = bhattacharya(&p0, &p1)?;
    let (c_low, c_upp) = sandwich_constants(&law)?;
    let relaxed = geodesic_distance(&law, &p0, &p1, &cfg.geodesic)?;
    let closed = linear_distance(&law, bh)?;
    let dist = closed.unwrap_or(relaxed.distance);
    let mut findings = Vec::new();
    // the relaxation is only consistent with the sandwich between interior endpoints
    let interior = !p0.is_boundary() && !p1.is_boundary();
    if interior {
        let (lo, hi) = (c_low * bh, c_upp * bh);
        if relaxed.distance < lo * (1.0 - 1e-6) || relaxed.distance > hi * (1.0 + 1e-6) {
            findings.push(format!("relaxed distance {} outside the sandwich [{lo}, {hi}]", relaxed.distance));
        }
    }
    let report = json!({
        "law_id": law.id(),
        "n": p0.n(),
        "distance": dist,
        "closed_form": closed,
        "relaxed_distance": relaxed.distance,
        "relaxation_status": relaxed.status,
        "relaxation_iterations": relaxed.iterations,
        "hellinger": he,
        "bhattacharya": bh,
        "l1": l1_distance(&p0, &p1)?,
        "sandwich": { "lower": c_low * bh, "upper": c_upp * bh, "checked": interior },
    });
    let mut summary = vec![format!("distance = {dist}")];
    if closed.is_some() {
        summary.push(format!("relaxed_distance = {}", relaxed.distance));
    }
    summary.push(format!("bhattacharya = {bh}"));
    summary.push(format!("hellinger = {he}"));
    Ok(Outcome { report, artifacts: Vec::new(), findings, summary })
}

pub fn geodesic(cfg: &RunConfig, base: &Path) -> Result<Outcome> {
    let (law, p0, p1) = endpoints(cfg, base)?;
    let r = geodesic_distance(&law, &p0, &p1, &cfg.geodesic)?;
    let mut findings = Vec::new();
    if !r.converged {
        findings.push(format!("relaxation did not converge ({})", r.status));
    }
    if let Some(shot) = r.shooting_distance {
        let gap = (shot - r.distance).abs() / r.distance.max(1e-300);
        if gap > SHOOTING_TOL {
            findings.push(format!("shooting distance {shot} differs from relaxation {} by {gap:.2e}", r.distance));
        }
    }
    let report = json!({
        "law_id": law.id(),
        "n": p0.n(),
        "distance": r.distance,
        "action": r.action,
        "action_coarse": r.action_coarse,
        "action_fine": r.action_fine,
        "iterations": r.iterations,
        "converged": r.converged,
        "status": r.status,
        "shooting_distance": r.shooting_distance,
        "path_knots": r.path.knots.len(),
    });
    Ok(Outcome {
        summary: vec![format!("distance = {}", r.distance), format!("status = {}", r.status)],
        report,
        artifacts: vec![("geodesic_path.csv".into(), path_to_csv(&r.path).into_bytes())],
        findings,
    })
}

pub fn contraction(cfg: &RunConfig, base: &Path) -> Result<Outcome> {
    let b = block(&cfg.contraction, "contraction")?;
    let law = cfg.build_law()?;
    let p0 = cfg.initial(base)?;
    let p1 = cfg.density(&b.target, base)?;
    let level = b.level.unwrap_or_else(|| energy(&law, &p0).max(energy(&law, &p1)));
    let r = contraction_check(&law, &p0, &p1, level, &b.t_grid, b.mode, &cfg.flow, &cfg.geodesic)?;
    if b.mode == DistanceMode::Intrinsic && !r.within_locality {
        return Err(Error::InvalidParameter(format!(
            "initial distance {} exceeds the locality threshold {:?}",
            r.initial_distance, r.locality_threshold
        )));
    }
    let mut findings = Vec::new();
    if r.max_ratio > 1.0 + b.tolerance {
        findings.push(format!("contraction ratio {} exceeds 1 + {}", r.max_ratio, b.tolerance));
    }
    Ok(Outcome {
        summary: vec![format!("rate = {}, max ratio = {}", r.rate, r.max_ratio)],
        report: to_json(&r),
        artifacts: Vec::new(),
        findings,
    })
}

pub fn evi(cfg: &RunConfig, base: &Path) -> Result<Outcome> {
    let b = block(&cfg.evi, "evi")?;
    let law = cfg.build_law()?;
    let p0 = cfg.initial(base)?;
    let q = cfg.density(&b.reference, base)?;
    let level = b.level.unwrap_or_else(|| energy(&law, &p0).max(energy(&law, &q)));
    let lambda = match (b.lambda, b.mode) {
        (Some(l), _) => l,
        (None, DistanceMode::Bhattacharya) => l_glob(&law, level)?,
        (None, DistanceMode::Intrinsic) => {
            return Err(Error::InvalidParameter("the intrinsic EVI mode needs an explicit `lambda`".into()))
        }
    };
    if let Some(&[_, t]) = b.pairs.iter().find(|p| p[1] > cfg.flow.t_end) {
        return Err(Error::InvalidParameter(format!("EVI pair time {t} is beyond flow.t_end = {}", cfg.flow.t_end)));
    }
    let tr = solve(&law, &p0, &cfg.flow)?;
    let pairs: Vec<(f64, f64)> = b.pairs.iter().map(|p| (p[0], p[1])).collect();
    let r = evi_residual(&law, &tr, &q, lambda, &pairs, b.mode, &cfg.geodesic)?;
    let mut findings = Vec::new();
    if r.worst_residual > b.tolerance {
        findings.push(format!("EVI residual {} exceeds {}", r.worst_residual, b.tolerance));
    }
    Ok(Outcome {
        summary: vec![format!("lambda = {lambda}, worst residual = {}", r.worst_residual)],
        report: json!({ "level": level, "evi": to_json(&r) }),
        artifacts: Vec::new(),
        findings,
    })
}

pub fn counterexample(cfg: &RunConfig) -> Result<Outcome> {
    let b = cfg.counterexample.clone().unwrap_or_default();
    let results = counterexample_scan(&b.m, b.grid_points)?;
    let rows: Vec<Value> = results
        .iter()
        .map(|r| {
            json!({
                "m": r.m,
                "epsilon": r.epsilon,
                "j": r.j,
                "bh_value": r.bh_value,
                "margin": r.margin,
                "grid_points": r.grid_points,
            })
        })
        .collect();
    let best = results.iter().max_by(|a, b| a.margin.total_cmp(&b.margin));
    let mut findings = Vec::new();
    let mut artifacts = Vec::new();
    match best {
        Some(r) if r.margin > b.threshold => {
            artifacts.push((format!("counterexample_curve_m{}.csv", r.m), path_to_csv(&r.curve).into_bytes()));
        }
        _ => findings.push(format!("no M in {:?} has margin above {}", b.m, b.threshold)),
    }
    let summary = results.iter().map(|r| format!("M = {}: J = {}, margin = {}", r.m, r.j, r.margin)).collect();
    Ok(Outcome {
        report: json!({ "threshold": b.threshold, "results": rows }),
        artifacts,
        findings,
        summary,
    })
}

pub fn refine(cfg: &RunConfig, base: &Path) -> Result<Outcome> {
    let b = block(&cfg.refine, "refine")?;
    let law = cfg.build_law()?;
    let p0 = cfg.initial(base)?;
    let r = refinement_convergence(&law, &p0, &b.ladder, &b.t_grid, &cfg.flow)?;
    let mut findings = Vec::new();
    if !r.monotone {
        findings.push("Bh differences do not decrease along the ladder".into());
    }
    Ok(Outcome {
        summary: vec![format!("ladder {:?}, monotone = {}", r.ladder, r.monotone)],
        report: to_json(&r),
        artifacts: Vec::new(),
        findings,
    })
}

pub fn envelope(cfg: &RunConfig) -> Result<Outcome> {
    let b = block(&cfg.envelope, "envelope")?;
    let law = cfg.build_law()?;
    let r = growth_envelope_study(&law, b.level, b.zeta_scale, &b.t_grid, b.n, b.cases, cfg.seed, &cfg.flow, &cfg.geodesic)?;
    let mut findings = Vec::new();
    if r.max_ratio > 1.0 + b.tolerance {
        findings.push(format!("envelope ratio {} exceeds 1 + {}", r.max_ratio, b.tolerance));
    }
    Ok(Outcome {
        summary: vec![format!("rate = {}, max ratio = {}", r.rate, r.max_ratio)],
        report: to_json(&r),
        artifacts: Vec::new(),
        findings,
    })
}

pub fn pretty(v: &Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("json values serialize");
    out.push(b'\n');
    out
}
