// temporary experimentation harness; removed before delivery
mod common;

use std::sync::Arc;

use common::{em_engine, twobody_params};
use nalgebra::Vector3;

use l1crtbp::dynamics::State;
use l1crtbp::extremal::Model;
use l1crtbp::shooting::{
    continuation, default_energy_guess, solve_shooting, CircularOrbitTarget, FrameConvention,
    OrbitCenter, ShootingProblem, SolveOptions,
};

fn toy_problem(t_f: f64) -> ShootingProblem {
    let params = twobody_params();
    let engine = em_engine();
    let r0: f64 = 0.8;
    let v0 = (1.0 / r0).sqrt() - r0; // inertial-convention circular, prograde
    let target = CircularOrbitTarget::new(&params, OrbitCenter::Primary, 1.1, FrameConvention::Inertial);
    ShootingProblem {
        x0: State::new(Vector3::new(r0, 0.0, 0.0), Vector3::new(0.0, v0, 0.0), 1.0),
        t_f,
        target: Arc::new(target),
        engine,
        params,
        model: Model::ReducedConstantMass,
        lambda: 0.0,
    }
}

#[test]
#[ignore]
fn explore_toy_lambda0() {
    let problem = toy_problem(3.5);
    let opts = SolveOptions::default();
    for scale in [2.0, 1.0, 3.0, 0.5, 5.0, -1.0, -2.0] {
        let guess = default_energy_guess(&problem, scale);
        match solve_shooting(&problem, &guess, &opts) {
            Ok(sol) => {
                println!(
                    "scale {scale}: CONVERGED in {} iters, residual {:.3e}, p0 = {:?}",
                    sol.iterations, sol.residual_inf, sol.unknowns.p0
                );
                let rho = sol.trajectory.rho_integral(&problem.engine);
                println!("  rho integral {rho:.6}");
                break;
            }
            Err(e) => println!("scale {scale}: {e}"),
        }
    }
}

#[test]
#[ignore]
fn explore_toy_continuation() {
    let problem = toy_problem(3.5);
    let opts = SolveOptions { max_iters: 30, ..SolveOptions::default() };
    let mut seed = None;
    for scale in [2.0, 1.0, 3.0, 0.5, 5.0] {
        let guess = default_energy_guess(&problem, scale);
        if let Ok(sol) = solve_shooting(&problem, &guess, &opts) {
            println!("lambda 0 converged with scale {scale} ({} iters)", sol.iterations);
            seed = Some(sol.unknowns);
            break;
        }
    }
    let seed = seed.expect("lambda0 converged");
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    match continuation(&problem, &grid, &seed, &opts) {
        Ok(res) => {
            for s in &res.steps {
                println!(
                    "lambda {:.4}: {} iters, residual {:.2e}, {} switches",
                    s.lambda, s.iterations, s.residual_inf, s.switch_count
                );
            }
            let traj = &res.final_solution.trajectory;
            println!("final modes: {:?}", traj.arc_modes);
            println!("switch times: {:?}", traj.switch_times);
            println!("rho integral: {:.6}", traj.rho_integral(&problem.engine));
        }
        Err(e) => println!("continuation failed: {e}"),
    }
}

#[test]
#[ignore]
fn explore_toy_certification() {
    use l1crtbp::extremal::{integrate_extremal, IntegOptions};
    use l1crtbp::sufficiency::{certify, j_curve, propagate_variational, ConditionOpts};

    let mut problem = toy_problem(3.5);
    let opts = SolveOptions { max_iters: 30, ..SolveOptions::default() };
    let guess = default_energy_guess(&problem, 1.0);
    let sol0 = solve_shooting(&problem, &guess, &opts).unwrap();
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let res = continuation(&problem, &grid, &sol0.unknowns, &opts).unwrap();
    problem.lambda = 1.0;
    let traj = &res.final_solution.trajectory;
    let integ = IntegOptions::default();

    // FD of flow maps vs jump-aware propagation
    let prop = propagate_variational(traj, &problem.engine, &problem.params, &integ).unwrap();
    let n = 6;
    let h = 1e-6;
    let mut max_rel_x = 0.0f64;
    let mut max_rel_p = 0.0f64;
    let p0 = res.final_solution.unknowns.p0;
    for j in 0..n {
        let mut pp = p0;
        let mut pm = p0;
        if j < 3 {
            pp.p_r[j] += h;
            pm.p_r[j] -= h;
        } else {
            pp.p_v[j - 3] += h;
            pm.p_v[j - 3] -= h;
        }
        let tp = integrate_extremal(&pp, &problem.x0, problem.t_f, 1.0, &problem.engine, &problem.params, problem.model, &integ).unwrap();
        let tm = integrate_extremal(&pm, &problem.x0, problem.t_f, 1.0, &problem.engine, &problem.params, problem.model, &integ).unwrap();
        let zp = &tp.final_sample().z;
        let zm = &tm.final_sample().z;
        for i in 0..n {
            let fd_x = (zp[i] - zm[i]) / (2.0 * h);
            let fd_p = (zp[n + i] - zm[n + i]) / (2.0 * h);
            let sx = prop.final_pair.mx[(i, j)];
            let sp = prop.final_pair.mp[(i, j)];
            max_rel_x = max_rel_x.max((fd_x - sx).abs() / prop.final_pair.mx.amax());
            max_rel_p = max_rel_p.max((fd_p - sp).abs() / prop.final_pair.mp.amax());
        }
    }
    println!("Mx FD max rel err: {max_rel_x:.3e}");
    println!("Mp FD max rel err: {max_rel_p:.3e}");

    // certification
    let cert = certify(traj, problem.target.as_ref(), &problem.engine, &problem.params, &integ, &ConditionOpts::default()).unwrap();
    println!("classification: {:?}", cert.report.classification);
    println!("cond1: {:?}", cert.report.condition1);
    println!("cond2 pass: {}, per-switch {:?}", cert.report.condition2.pass, cert.report.condition2.per_switch);
    if let Some(c3) = &cert.report.condition3 {
        println!("cond3: pass {} eig {:.6e} reduced {:?}", c3.pass, c3.smallest_eigenvalue, c3.reduced);
    }
    println!("nu: {:?}", cert.report.nu);
    println!("delta switch pairs: {:?}", cert.trace.switch_pairs);

    // J-curve
    match j_curve(&problem, &p0, 1e-3, 21, &integ) {
        Ok(jc) => {
            println!("J fitted slope: {:.3e}", jc.fitted_slope);
            println!("J positive away from zero: {}", jc.positive_away_from_zero());
            println!("J values: {:?}", jc.j_values.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>());
        }
        Err(e) => println!("jcurve failed: {e}"),
    }
}

fn ems_problem() -> ShootingProblem {
    let params = common::em_params();
    let engine = common::em_engine();
    let r_g: f64 = 42165.0 / 384400.0;
    let v_g = ((1.0 - params.mu) / r_g).sqrt();
    let target = CircularOrbitTarget::new(&params, OrbitCenter::Secondary, 13069.6 / 384400.0, FrameConvention::Rotating);
    let t_f = 38.46 * 86400.0 / params.t_star;
    ShootingProblem {
        x0: State::new(
            Vector3::new(r_g - params.mu, 0.0, 0.0),
            Vector3::new(0.0, v_g, 0.0),
            1.0,
        ),
        t_f,
        target: Arc::new(target),
        engine,
        params,
        model: Model::ReducedConstantMass,
        lambda: 0.0,
    }
}

#[test]
#[ignore]
fn explore_ems_timing() {
    use l1crtbp::extremal::{integrate_extremal, Costate, IntegOptions};
    let problem = ems_problem();
    println!("t_f = {}", problem.t_f);
    println!("x0 = {:?}", problem.x0);
    println!("tau = {}", problem.engine.tau_max);
    let guess = default_energy_guess(&problem, 1.0);
    let start = std::time::Instant::now();
    let traj = integrate_extremal(
        &guess.p0, &problem.x0, problem.t_f, 0.0,
        &problem.engine, &problem.params, problem.model, &IntegOptions::default(),
    ).unwrap();
    println!("lambda=0 integration: {:?}, {} samples", start.elapsed(), traj.samples.len());
    let end = traj.point(traj.final_sample(), 1.0);
    println!("endpoint r = {:?} |r-r2| = {:.4}", end.x.r, (end.x.r - problem.params.r2()).norm());
    let phi = problem.target.phi(&end.x, 6);
    println!("phi = {:?}", phi);

    // a coast trajectory for reference
    let start = std::time::Instant::now();
    let p0 = Costate::new(Vector3::zeros(), Vector3::zeros(), 0.0);
    let traj = integrate_extremal(
        &p0, &problem.x0, problem.t_f, 1.0,
        &problem.engine, &problem.params, problem.model, &IntegOptions::default(),
    ).unwrap();
    println!("coast integration: {:?}, {} samples", start.elapsed(), traj.samples.len());
}

#[test]
#[ignore]
fn explore_ems_lambda0() {
    use l1crtbp::extremal::IntegOptions;
    use l1crtbp::ode::OdeTol;
    let problem = ems_problem();
    let opts = SolveOptions {
        max_iters: 60,
        verbose: true,
        integ: IntegOptions {
            ode: OdeTol { abs: 1e-10, rel: 1e-10, ..OdeTol::default() },
            ..IntegOptions::default()
        },
        ..SolveOptions::default()
    };
    for scale in [1.0, 2.0, 3.0, 0.5, 5.0] {
        println!("=== scale {scale} ===");
        let guess = default_energy_guess(&problem, scale);
        let start = std::time::Instant::now();
        match solve_shooting(&problem, &guess, &opts) {
            Ok(sol) => {
                println!(
                    "scale {scale}: CONVERGED in {} iters ({:?}), residual {:.3e}",
                    sol.iterations, start.elapsed(), sol.residual_inf
                );
                println!("p0 = {:?}", sol.unknowns.p0);
                println!("nu = {:?}", sol.unknowns.nu);
                println!("rho integral {:.6}", sol.trajectory.rho_integral(&problem.engine));
                break;
            }
            Err(e) => println!("scale {scale}: {e} ({:?})", start.elapsed()),
        }
    }
}

#[test]
#[ignore]
fn explore_ems_lambda0_spiral() {
    use l1crtbp::extremal::IntegOptions;
    use l1crtbp::ode::OdeTol;
    use l1crtbp::shooting::spiral_energy_guess;
    let problem = ems_problem();
    let opts = SolveOptions {
        max_iters: 150,
        verbose: true,
        integ: IntegOptions {
            ode: OdeTol { abs: 1e-10, rel: 1e-10, ..OdeTol::default() },
            ..IntegOptions::default()
        },
        ..SolveOptions::default()
    };
    for scale in [1.0, 1.5, 2.0, 0.7] {
        println!("=== spiral scale {scale} ===");
        let guess = spiral_energy_guess(&problem, scale);
        println!("guess p0 = {:?}", guess.p0);
        let start = std::time::Instant::now();
        match solve_shooting(&problem, &guess, &opts) {
            Ok(sol) => {
                println!(
                    "spiral scale {scale}: CONVERGED in {} iters ({:?}), residual {:.3e}",
                    sol.iterations, start.elapsed(), sol.residual_inf
                );
                println!("p0 = {:?}", sol.unknowns.p0);
                println!("rho integral {:.6}", sol.trajectory.rho_integral(&problem.engine));
                let end = sol.trajectory.point(sol.trajectory.final_sample(), 1.0);
                println!("end |r - r2| = {:.5}", (end.x.r - problem.params.r2()).norm());
                break;
            }
            Err(e) => println!("spiral scale {scale}: {e} ({:?})", start.elapsed()),
        }
    }
}
