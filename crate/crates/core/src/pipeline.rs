//! The solve-then-certify pipeline behind the CLI: continuation over the
//! homotopy grid, second-order certification, and machine-readable artifacts
//! (trajectory CSV, delta-trace CSV, J-curve CSV, JSON report).

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{CrtbpParams, EngineParams, State};
use crate::error::{Error, Result};
use crate::extremal::{
    integrate_extremal, switching_function, Costate, ExtremalTrajectory, Model, ThrustMode,
};
use crate::scenario::{BuiltScenario, Scenario, TargetSpec};
use crate::shooting::{
    continuation, default_energy_guess, solve_shooting, ContinuationStep, JacobianMode,
    ShootingProblem, ShootingUnknowns, SolveOptions, ENERGY_GUESS_SCALES,
};
use crate::singular::{diagnose_chattering, ChatteringDiagnosis, DEFAULT_SURFACE_TOL};
use crate::sufficiency::{certify, Classification, DeltaTrace, JCurve, SufficiencyReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

/// Bang-bang structure summary of the converged extremal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchStructure {
    pub burn_arcs: usize,
    pub coast_arcs: usize,
    pub switch_count: usize,
    pub switch_times: Vec<f64>,
    pub first_mode: ThrustMode,
}

/// Machine-readable run summary (mirrors the JSON report on disk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario_name: Option<String>,
    pub continuation: Vec<ContinuationStep>,
    pub switch_structure: SwitchStructure,
    /// Propellant surrogate: integral of rho over [0, t_f].
    pub rho_integral: f64,
    pub residual_inf: f64,
    pub hamiltonian_drift_rel: f64,
    pub sufficiency: SufficiencyReport,
    pub chattering: ChatteringDiagnosis,
    pub jcurve: Option<JCurve>,
    pub timing_s: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Everything a run produces in memory; the report plus the bulk data the
/// CSV artifacts are written from.
pub struct RunArtifacts {
    pub report: RunReport,
    pub built: BuiltScenario,
    pub trajectory: ExtremalTrajectory,
    pub unknowns: ShootingUnknowns,
    pub delta: DeltaTrace,
    pub jcurve: Option<JCurve>,
}

/// Stored extremal for `certify`: enough to re-integrate and re-certify.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub schema_version: u32,
    pub params: CrtbpParams,
    pub engine: EngineParams,
    pub model: Model,
    pub x0: State,
    pub p0: Costate,
    pub t_f: f64,
    pub lambda: f64,
    pub nu: Vec<f64>,
    pub target: TargetSpec,
}

impl TrajectoryFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let tf: TrajectoryFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        tf.validate()?;
        Ok(tf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory file serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported trajectory schema version {}",
                self.schema_version
            )));
        }
        let finite = self.t_f.is_finite()
            && self.lambda.is_finite()
            && self.nu.iter().all(|x| x.is_finite())
            && self.x0.r.iter().all(|x| x.is_finite())
            && self.x0.v.iter().all(|x| x.is_finite())
            && self.x0.m.is_finite()
            && self.p0.p_r.iter().all(|x| x.is_finite())
            && self.p0.p_v.iter().all(|x| x.is_finite())
            && self.p0.p_m.is_finite();
        if !finite || self.t_f <= 0.0 {
            return Err(Error::Validation {
                field: "trajectory".into(),
                reason: "entries must be finite with t_f > 0".into(),
            });
        }
        if !(self.params.mu.is_finite() && (0.0..0.5).contains(&self.params.mu)) {
            return Err(Error::Validation {
                field: "params.mu".into(),
                reason: "must lie in [0, 1/2)".into(),
            });
        }
        if !(self.engine.tau_max.is_finite()
            && self.engine.tau_max > 0.0
            && self.engine.beta.is_finite()
            && self.engine.beta >= 0.0
            && self.engine.m0.is_finite()
            && self.engine.m0 > 0.0)
        {
            return Err(Error::Validation {
                field: "engine".into(),
                reason: "engine constants out of range".into(),
            });
        }
        match &self.target {
            TargetSpec::CircularOrbit { radius, speed, .. } => {
                if !(radius.is_finite() && *radius > 0.0 && speed.is_finite() && *speed >= 0.0) {
                    return Err(Error::Validation {
                        field: "target".into(),
                        reason: "circular-orbit target out of range".into(),
                    });
                }
            }
            TargetSpec::FixedState { r, v } => {
                if !(r.iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite())) {
                    return Err(Error::Validation {
                        field: "target".into(),
                        reason: "fixed-state target must be finite".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Relative drift of the maximized Hamiltonian along a trajectory.
pub fn hamiltonian_drift(
    traj: &ExtremalTrajectory,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<f64> {
    let mut h0 = None;
    let mut max_drift = 0.0f64;
    for s in &traj.samples {
        let pt = traj.point(s, engine.m0);
        let rho = traj.sample_rho(s, engine);
        let h1 = switching_function(&pt, engine);
        let g = crate::dynamics::gravity(&pt.x.r, params)?;
        let h = pt.p.p_r.dot(&pt.x.v)
            + pt.p.p_v.dot(&(crate::dynamics::coriolis(&pt.x.v) + g))
            + rho * h1
            + extra_cost_term(traj.lambda, rho);
        match h0 {
            None => h0 = Some(h),
            Some(base) => {
                let scale = base.abs().max(1.0);
                max_drift = max_drift.max((h - base).abs() / scale);
            }
        }
    }
    Ok(max_drift)
}

/// The smoothed running cost lambda rho + (1-lambda) rho^2 exceeds rho by
/// this much; the maximized Hamiltonian absorbs it.
fn extra_cost_term(lambda: f64, rho: f64) -> f64 {
    if lambda >= 1.0 {
        0.0
    } else {
        rho - (lambda * rho + (1.0 - lambda) * rho * rho)
    }
}

/// Runs the full pipeline: lambda = 0 solve (with deterministic fallback
/// guesses), continuation to lambda = 1, certification, optional J-curve.
pub fn run(scenario: &Scenario) -> Result<RunArtifacts> {
    let started = Instant::now();
    let built = scenario.build()?;
    let target = built.target_spec.manifold(&built.params);
    let problem = ShootingProblem {
        x0: built.x0,
        t_f: built.t_f,
        target: target.clone(),
        engine: built.engine.clone(),
        params: built.params.clone(),
        model: built.model,
        lambda: 0.0,
    };
    let opts = SolveOptions {
        newton_tol: built.newton_tol,
        max_iters: 30,
        jacobian: JacobianMode::Auto,
        integ: built.integ,
        ..SolveOptions::default()
    };

    // lambda = 0 seed: default policy first, then the deterministic fallback
    // scale list
    let mut seed = None;
    let mut last_err = None;
    for scale in ENERGY_GUESS_SCALES {
        let guess = default_energy_guess(&problem, scale);
        match solve_shooting(&problem, &guess, &opts) {
            Ok(sol) => {
                seed = Some(sol.unknowns);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let seed = match seed {
        Some(s) => s,
        None => return Err(last_err.unwrap_or(Error::NoConvergence { iterations: 0, residual: f64::NAN })),
    };

    let cont = continuation(&problem, &built.lambda_grid, &seed, &opts)?;
    let final_sol = cont.final_solution;
    let traj = final_sol.trajectory;

    let cert = {
        let mut prob1 = problem.clone();
        prob1.lambda = 1.0;
        certify(&traj, target.as_ref(), &built.engine, &built.params, &built.integ, &built.conditions)?
    };

    let jcurve = if built.jcurve.enabled {
        let mut prob1 = problem.clone();
        prob1.lambda = 1.0;
        Some(crate::sufficiency::j_curve(
            &prob1,
            &final_sol.unknowns.p0,
            built.jcurve.epsilon,
            built.jcurve.points,
            &built.integ,
        )?)
    } else {
        None
    };

    let drift = hamiltonian_drift(&traj, &built.engine, &built.params)?;
    let chattering = diagnose_chattering(&traj, &built.engine, &built.params, DEFAULT_SURFACE_TOL);
    let burn_arcs = traj.arc_modes.iter().filter(|m| **m == ThrustMode::Burn).count();
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario_name: built.name.clone(),
        continuation: cont.steps,
        switch_structure: SwitchStructure {
            burn_arcs,
            coast_arcs: traj.arc_modes.len() - burn_arcs,
            switch_count: traj.switch_times.len(),
            switch_times: traj.switch_times.clone(),
            first_mode: traj.arc_modes[0],
        },
        rho_integral: traj.rho_integral(&built.engine),
        residual_inf: final_sol.residual_inf,
        hamiltonian_drift_rel: drift,
        sufficiency: cert.report.clone(),
        chattering,
        jcurve: jcurve.clone(),
        timing_s: started.elapsed().as_secs_f64(),
    };

    Ok(RunArtifacts {
        report,
        built,
        trajectory: traj,
        unknowns: final_sol.unknowns,
        delta: cert.trace,
        jcurve,
    })
}

/// Re-runs certification on a stored extremal.
pub fn certify_stored(file: &TrajectoryFile, conditions: &crate::sufficiency::ConditionOpts) -> Result<(SufficiencyReport, DeltaTrace, ExtremalTrajectory)> {
    if (file.lambda - 1.0).abs() > 1e-12 {
        return Err(Error::Validation {
            field: "lambda".into(),
            reason: "certification applies to lambda = 1 extremals".into(),
        });
    }
    let integ = crate::extremal::IntegOptions::default();
    let traj = integrate_extremal(
        &file.p0,
        &file.x0,
        file.t_f,
        1.0,
        &file.engine,
        &file.params,
        file.model,
        &integ,
    )?;
    let target = file.target.manifold(&file.params);
    let cert = certify(&traj, target.as_ref(), &file.engine, &file.params, &integ, conditions)?;
    Ok((cert.report, cert.trace, traj))
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Writes the trajectory CSV: t, r, v, m, rho, omega, H1, H.
pub fn write_trajectory_csv(artifacts: &RunArtifacts, path: &Path) -> Result<()> {
    let traj = &artifacts.trajectory;
    let engine = &artifacts.built.engine;
    let params = &artifacts.built.params;
    let mut out = String::new();
    out.push_str("t,x,y,z,vx,vy,vz,m,rho,omega_x,omega_y,omega_z,H1,H\n");
    for s in &traj.samples {
        let pt = traj.point(s, engine.m0);
        let rho = traj.sample_rho(s, engine);
        let h1 = switching_function(&pt, engine);
        let pv_norm = pt.p.p_v.norm();
        let omega = if pv_norm > 0.0 { pt.p.p_v / pv_norm } else { nalgebra::Vector3::zeros() };
        let g = crate::dynamics::gravity(&pt.x.r, params)?;
        let h = pt.p.p_r.dot(&pt.x.v)
            + pt.p.p_v.dot(&(crate::dynamics::coriolis(&pt.x.v) + g))
            + rho * h1
            + extra_cost_term(traj.lambda, rho);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt(s.t),
            fmt(pt.x.r.x),
            fmt(pt.x.r.y),
            fmt(pt.x.r.z),
            fmt(pt.x.v.x),
            fmt(pt.x.v.y),
            fmt(pt.x.v.z),
            fmt(pt.x.m),
            fmt(rho),
            fmt(omega.x),
            fmt(omega.y),
            fmt(omega.z),
            fmt(h1),
            fmt(h),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the delta-trace CSV: every sample plus both one-sided rows at each
/// switch time (switch rows appear as two consecutive rows sharing t).
pub fn write_delta_csv(delta: &DeltaTrace, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("t,delta\n");
    for s in &delta.samples {
        out.push_str(&format!("{},{}\n", fmt(s.t), fmt(s.delta)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the J-curve CSV: xi, J, and the endpoint coordinates.
pub fn write_jcurve_csv(jc: &JCurve, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("xi,J,x,y,z,vx,vy,vz\n");
    for (i, xi) in jc.xis.iter().enumerate() {
        let e = &jc.endpoints[i];
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt(*xi),
            fmt(jc.j_values[i]),
            fmt(e[0]),
            fmt(e[1]),
            fmt(e[2]),
            fmt(e[3]),
            fmt(e[4]),
            fmt(e[5]),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Columnar files behind the four figures: XY trajectory with burn/coast
/// segmentation, controls vs time, the sign-preserving 1/12-power delta
/// rescale, and J(xi) vs endpoint coordinates.
pub fn emit_plot_data(artifacts: &RunArtifacts, outdir: &Path) -> Result<()> {
    if artifacts.trajectory.samples.is_empty() || artifacts.delta.samples.is_empty() {
        return Err(Error::Validation {
            field: "artifacts".into(),
            reason: "empty run artifacts; nothing to emit".into(),
        });
    }
    fs::create_dir_all(outdir)?;
    let traj = &artifacts.trajectory;
    let engine = &artifacts.built.engine;

    let mut fig3 = String::from("t,x,y,burn\n");
    let mut fig4 = String::from("t,rho,pv_norm,H1\n");
    for s in &traj.samples {
        let pt = traj.point(s, engine.m0);
        let rho = traj.sample_rho(s, engine);
        let h1 = switching_function(&pt, engine);
        fig3.push_str(&format!(
            "{},{},{},{}\n",
            fmt(s.t),
            fmt(pt.x.r.x),
            fmt(pt.x.r.y),
            if rho > 0.5 { 1 } else { 0 }
        ));
        fig4.push_str(&format!(
            "{},{},{},{}\n",
            fmt(s.t),
            fmt(rho),
            fmt(pt.p.p_v.norm()),
            fmt(h1)
        ));
    }
    fs::write(outdir.join("fig3_trajectory_xy.csv"), fig3)?;
    fs::write(outdir.join("fig4_controls.csv"), fig4)?;

    let mut fig5 = String::from("t,delta_sign_root\n");
    for s in &artifacts.delta.samples {
        let rescaled = s.delta.signum() * s.delta.abs().powf(1.0 / 12.0);
        fig5.push_str(&format!("{},{}\n", fmt(s.t), fmt(rescaled)));
    }
    fs::write(outdir.join("fig5_delta_sign_root.csv"), fig5)?;

    if let Some(jc) = &artifacts.jcurve {
        write_jcurve_csv(jc, &outdir.join("fig6_jcurve.csv"))?;
    }
    Ok(())
}

/// Runs a scenario and writes all artifacts under `outdir`.
pub fn run_and_write(scenario: &Scenario, outdir: &Path) -> Result<RunArtifacts> {
    let artifacts = run(scenario)?;
    fs::create_dir_all(outdir)?;
    write_trajectory_csv(&artifacts, &outdir.join("trajectory.csv"))?;
    write_delta_csv(&artifacts.delta, &outdir.join("delta_trace.csv"))?;
    if let Some(jc) = &artifacts.jcurve {
        write_jcurve_csv(jc, &outdir.join("jcurve.csv"))?;
    }
    let traj_file = TrajectoryFile {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        params: artifacts.built.params.clone(),
        engine: artifacts.built.engine.clone(),
        model: artifacts.built.model,
        x0: artifacts.built.x0,
        p0: artifacts.unknowns.p0,
        t_f: artifacts.built.t_f,
        lambda: 1.0,
        nu: artifacts.unknowns.nu.clone(),
        target: artifacts.built.target_spec.clone(),
    };
    let mut f = fs::File::create(outdir.join("extremal.json"))?;
    f.write_all(traj_file.to_json().as_bytes())?;
    fs::write(outdir.join("report.json"), artifacts.report.to_json())?;
    emit_plot_data(&artifacts, outdir)?;
    Ok(artifacts)
}

/// Exit-code contract of the CLI: 0 = certified optimum, 2 = converged but
/// not certified, 1 = solver failure (mapped from Err by the caller).
pub fn exit_code_for(report: &RunReport) -> i32 {
    if report.sufficiency.classification == Classification::StrictStrongLocalOptimum {
        0
    } else {
        2
    }
}
