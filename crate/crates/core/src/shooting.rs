//! Target manifolds, the shooting function with transversality residuals,
//! damped Newton, and lambda-continuation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{CrtbpParams, EngineParams, State};
use crate::error::{Error, Result};
use crate::extremal::{
    integrate_extremal, Costate, ExtremalTrajectory, IntegOptions, Model,
};
use crate::sufficiency;

/// Final-state constraint submanifold M = { x : phi(x) = 0 } of codimension l.
pub trait TargetManifold: Send + Sync {
    fn codim(&self) -> usize;
    /// phi(x), an l-vector.
    fn phi(&self, x: &State, n: usize) -> DVector<f64>;
    /// dphi(x), an l x n matrix of row gradients.
    fn dphi(&self, x: &State, n: usize) -> DMatrix<f64>;
    /// d2phi_i(x), the n x n Hessian of the i-th row.
    fn d2phi(&self, x: &State, i: usize, n: usize) -> DMatrix<f64>;
    /// A twice-differentiable curve y(xi) on M through `x_f` (xi = 0) with its
    /// derivative, used by the J-curve diagnostic. None when M is a point.
    fn boundary_curve(&self, x_f: &State, xi: f64, n: usize) -> Option<(State, DVector<f64>)>;
}

/// Which primary a circular-orbit target is centered on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrbitCenter {
    Primary,
    Secondary,
}

/// Reading of the circular-orbit speed (see the scenario docs): `Rotating`
/// applies the two-body circular speed sqrt(mu_c/r) directly as the
/// rotating-frame speed; `Inertial` first subtracts the frame rotation across
/// the orbit radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FrameConvention {
    #[default]
    Rotating,
    Inertial,
}

/// Planar circular orbit of radius `radius` about one primary: the l = 5
/// constraint rows are radius, speed, orthogonality, and the two out-of-plane
/// components.
#[derive(Clone, Debug)]
pub struct CircularOrbitTarget {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub speed: f64,
}

impl CircularOrbitTarget {
    pub fn new(
        params: &CrtbpParams,
        center: OrbitCenter,
        radius: f64,
        convention: FrameConvention,
    ) -> Self {
        let (c, mu_c) = match center {
            OrbitCenter::Primary => (params.r1(), 1.0 - params.mu),
            OrbitCenter::Secondary => (params.r2(), params.mu),
        };
        let circular = (mu_c / radius).sqrt();
        let speed = match convention {
            FrameConvention::Rotating => circular,
            FrameConvention::Inertial => (circular - radius).abs(),
        };
        CircularOrbitTarget { center: c, radius, speed }
    }
}

/// The section 6 target: a circular orbit around the secondary.
pub fn moon_circular_target(
    params: &CrtbpParams,
    r_m: f64,
    convention: FrameConvention,
) -> CircularOrbitTarget {
    assert!(r_m > params.r_body2, "target orbit must clear the body");
    CircularOrbitTarget::new(params, OrbitCenter::Secondary, r_m, convention)
}

impl TargetManifold for CircularOrbitTarget {
    fn codim(&self) -> usize {
        5
    }

    fn phi(&self, x: &State, _n: usize) -> DVector<f64> {
        let q = x.r - self.center;
        DVector::from_vec(vec![
            0.5 * q.norm_squared() - 0.5 * self.radius * self.radius,
            0.5 * x.v.norm_squared() - 0.5 * self.speed * self.speed,
            x.v.dot(&q),
            x.r.z,
            x.v.z,
        ])
    }

    fn dphi(&self, x: &State, n: usize) -> DMatrix<f64> {
        let q = x.r - self.center;
        let mut m = DMatrix::zeros(5, n);
        for j in 0..3 {
            m[(0, j)] = q[j];
            m[(1, 3 + j)] = x.v[j];
            m[(2, j)] = x.v[j];
            m[(2, 3 + j)] = q[j];
        }
        m[(3, 2)] = 1.0;
        m[(4, 5)] = 1.0;
        m
    }

    fn d2phi(&self, _x: &State, i: usize, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        match i {
            0 => {
                for j in 0..3 {
                    m[(j, j)] = 1.0;
                }
            }
            1 => {
                for j in 0..3 {
                    m[(3 + j, 3 + j)] = 1.0;
                }
            }
            2 => {
                for j in 0..3 {
                    m[(j, 3 + j)] = 1.0;
                    m[(3 + j, j)] = 1.0;
                }
            }
            _ => {}
        }
        m
    }

    fn boundary_curve(&self, x_f: &State, xi: f64, n: usize) -> Option<(State, DVector<f64>)> {
        // rotate the endpoint about the z-axis through the orbit center
        let (s, c) = xi.sin_cos();
        let rot = |w: &Vector3<f64>| Vector3::new(c * w.x - s * w.y, s * w.x + c * w.y, w.z);
        let zc = |w: &Vector3<f64>| Vector3::new(-w.y, w.x, 0.0); // d/dxi of rot at xi
        let q = x_f.r - self.center;
        let r = self.center + rot(&q);
        let v = rot(&x_f.v);
        let y = State::new(r, v, x_f.m);
        let mut dy = DVector::zeros(n);
        let dr = zc(&rot(&q));
        let dv = zc(&rot(&x_f.v));
        for j in 0..3 {
            dy[j] = dr[j];
            dy[3 + j] = dv[j];
        }
        Some((y, dy))
    }
}

/// Fixed final state (l = n): phi(x) = x - x_target.
#[derive(Clone, Debug)]
pub struct FixedStateTarget {
    pub x_target: State,
}

pub(crate) fn state_coords(x: &State, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for j in 0..3 {
        out[j] = x.r[j];
        out[3 + j] = x.v[j];
    }
    if n == 7 {
        out[6] = x.m;
    }
    out
}

impl TargetManifold for FixedStateTarget {
    fn codim(&self) -> usize {
        6
    }

    fn phi(&self, x: &State, n: usize) -> DVector<f64> {
        // fixes position and velocity; mass is never constrained
        let mut out = state_coords(x, 6);
        out -= state_coords(&self.x_target, 6);
        let _ = n;
        out
    }

    fn dphi(&self, _x: &State, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(6, n);
        for j in 0..6 {
            m[(j, j)] = 1.0;
        }
        m
    }

    fn d2phi(&self, _x: &State, _i: usize, n: usize) -> DMatrix<f64> {
        DMatrix::zeros(n, n)
    }

    fn boundary_curve(&self, _x_f: &State, _xi: f64, _n: usize) -> Option<(State, DVector<f64>)> {
        None
    }
}

/// The two-point boundary value problem: steer `x0` to the target manifold in
/// time `t_f` under the lambda-blended cost.
#[derive(Clone)]
pub struct ShootingProblem {
    pub x0: State,
    pub t_f: f64,
    pub target: Arc<dyn TargetManifold>,
    pub engine: EngineParams,
    pub params: CrtbpParams,
    pub model: Model,
    pub lambda: f64,
}

/// Unknowns of the shooting function: initial costate and the Lagrange
/// multipliers of the transversality condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingUnknowns {
    pub p0: Costate,
    pub nu: Vec<f64>,
}

impl ShootingUnknowns {
    fn to_vec(&self, model: Model) -> DVector<f64> {
        let n = model.n();
        let mut v = DVector::zeros(n + self.nu.len());
        for j in 0..3 {
            v[j] = self.p0.p_r[j];
            v[3 + j] = self.p0.p_v[j];
        }
        if n == 7 {
            v[6] = self.p0.p_m;
        }
        for (i, nu_i) in self.nu.iter().enumerate() {
            v[n + i] = *nu_i;
        }
        v
    }

    fn from_vec(v: &DVector<f64>, model: Model, l: usize) -> Self {
        let n = model.n();
        let p0 = Costate::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
            if n == 7 { v[6] } else { 0.0 },
        );
        ShootingUnknowns { p0, nu: (0..l).map(|i| v[n + i]).collect() }
    }
}

/// Shooting residual [phi(x(t_f)); p(t_f) - nu dphi(x(t_f))], stacked as an
/// (n + l)-vector, together with the trajectory that produced it.
pub fn shooting_residual(
    problem: &ShootingProblem,
    unknowns: &ShootingUnknowns,
    integ: &IntegOptions,
) -> Result<(DVector<f64>, ExtremalTrajectory)> {
    let traj = integrate_extremal(
        &unknowns.p0,
        &problem.x0,
        problem.t_f,
        problem.lambda,
        &problem.engine,
        &problem.params,
        problem.model,
        integ,
    )?;
    let n = problem.model.n();
    let l = problem.target.codim();
    let pt_f = traj.point(traj.final_sample(), problem.engine.m0);
    let phi = problem.target.phi(&pt_f.x, n);
    let dphi = problem.target.dphi(&pt_f.x, n);
    let p_f = costate_coords(&pt_f.p, n);
    let nu = DVector::from_vec(unknowns.nu.clone());
    let trans = &p_f - dphi.transpose() * &nu;
    let mut res = DVector::zeros(n + l);
    res.rows_mut(0, l).copy_from(&phi);
    res.rows_mut(l, n).copy_from(&trans);
    Ok((res, traj))
}

pub(crate) fn costate_coords(p: &Costate, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for j in 0..3 {
        out[j] = p.p_r[j];
        out[3 + j] = p.p_v[j];
    }
    if n == 7 {
        out[6] = p.p_m;
    }
    out
}

/// How the Newton Jacobian is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianMode {
    /// Column-wise central finite differences (smooth lambda < 1 problems).
    FiniteDifference,
    /// Jump-aware variational propagation (bang-bang lambda = 1 problems).
    Variational,
    /// FiniteDifference below lambda = 1, Variational at lambda = 1.
    Auto,
}

/// Damped-Newton options.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Convergence threshold on the residual infinity norm.
    pub newton_tol: f64,
    pub max_iters: usize,
    /// Base step for finite-difference Jacobian columns (scaled per entry).
    pub fd_step: f64,
    /// Armijo sufficient-decrease factor.
    pub armijo: f64,
    /// Smallest line-search fraction before giving up on a direction.
    pub min_line_step: f64,
    /// Cap on the infinity norm of a raw Newton step.
    pub max_newton_step: f64,
    pub jacobian: JacobianMode,
    pub integ: IntegOptions,
    /// Print per-iteration residuals to stderr.
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            newton_tol: 1e-10,
            max_iters: 60,
            fd_step: 1e-7,
            armijo: 1e-4,
            min_line_step: 1.0 / 1024.0,
            max_newton_step: 50.0,
            jacobian: JacobianMode::Auto,
            integ: IntegOptions::default(),
            verbose: false,
        }
    }
}

/// A converged shooting solution.
#[derive(Clone, Debug)]
pub struct SolveResult {
    pub unknowns: ShootingUnknowns,
    pub trajectory: ExtremalTrajectory,
    pub residual_inf: f64,
    pub iterations: usize,
}

fn residual_norms(r: &DVector<f64>) -> (f64, f64) {
    (r.amax(), r.norm())
}

/// Integration options used while iterating: switch regularity is not
/// enforced mid-solve (trial points may pass near tangential switches); the
/// converged trajectory is validated separately.
fn relaxed(integ: &IntegOptions) -> IntegOptions {
    IntegOptions { regularity_tol: 0.0, ..*integ }
}

fn jacobian_fd(
    problem: &ShootingProblem,
    x: &DVector<f64>,
    opts: &SolveOptions,
    integ: &IntegOptions,
) -> Result<DMatrix<f64>> {
    let n = problem.model.n();
    let l = problem.target.codim();
    let dim = n + l;
    let mut jac = DMatrix::zeros(dim, dim);
    // p0 columns by central differences
    for j in 0..n {
        let h = opts.fd_step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let up = ShootingUnknowns::from_vec(&xp, problem.model, l);
        let um = ShootingUnknowns::from_vec(&xm, problem.model, l);
        let (rp, _) = shooting_residual(problem, &up, integ)?;
        let (rm, _) = shooting_residual(problem, &um, integ)?;
        let col = (rp - rm) / (2.0 * h);
        jac.column_mut(j).copy_from(&col);
    }
    // nu columns are analytic: residual depends on nu only through -dphi^T nu
    let u = ShootingUnknowns::from_vec(x, problem.model, l);
    let (_, traj) = shooting_residual(problem, &u, integ)?;
    let pt_f = traj.point(traj.final_sample(), problem.engine.m0);
    let dphi = problem.target.dphi(&pt_f.x, n);
    for i in 0..l {
        for row in 0..n {
            jac[(l + row, n + i)] = -dphi[(i, row)];
        }
    }
    Ok(jac)
}

fn jacobian_variational(
    problem: &ShootingProblem,
    unknowns: &ShootingUnknowns,
    traj: &ExtremalTrajectory,
    integ: &IntegOptions,
) -> Result<DMatrix<f64>> {
    let n = problem.model.n();
    let l = problem.target.codim();
    let prop = sufficiency::propagate_variational(traj, &problem.engine, &problem.params, integ)?;
    let mx = &prop.final_pair.mx;
    let mp = &prop.final_pair.mp;
    let pt_f = traj.point(traj.final_sample(), problem.engine.m0);
    let dphi = problem.target.dphi(&pt_f.x, n);
    let mut jac = DMatrix::zeros(n + l, n + l);
    // d phi / d p0 = dphi Mx
    let top = &dphi * mx;
    jac.view_mut((0, 0), (l, n)).copy_from(&top);
    // d (p_f - nu dphi)^T / d p0 = Mp - (sum_i nu_i d2phi_i) Mx
    let mut nu_d2 = DMatrix::zeros(n, n);
    for (i, nu_i) in unknowns.nu.iter().enumerate() {
        if *nu_i != 0.0 {
            nu_d2 += problem.target.d2phi(&pt_f.x, i, n) * *nu_i;
        }
    }
    let bottom = mp - nu_d2 * mx;
    jac.view_mut((l, 0), (n, n)).copy_from(&bottom);
    for i in 0..l {
        for row in 0..n {
            jac[(l + row, n + i)] = -dphi[(i, row)];
        }
    }
    Ok(jac)
}

/// Damped Newton on the shooting function: line search on the residual norm
/// with Armijo acceptance, FD or variational Jacobians per `opts.jacobian`.
pub fn solve_shooting(
    problem: &ShootingProblem,
    initial_guess: &ShootingUnknowns,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let l = problem.target.codim();
    let integ = relaxed(&opts.integ);
    let mut x = initial_guess.to_vec(problem.model);
    let (mut res, mut traj) =
        shooting_residual(problem, &ShootingUnknowns::from_vec(&x, problem.model, l), &integ)?;
    let (mut res_inf, mut res_2) = residual_norms(&res);
    let mut lm_damping: f64 = 1e-10;

    for iter in 0..opts.max_iters {
        if opts.verbose {
            eprintln!(
                "  newton iter {iter}: |R|_inf = {res_inf:.3e} |R|_2 = {res_2:.3e} (lambda {})",
                problem.lambda
            );
        }
        if res_inf <= opts.newton_tol {
            return finish(problem, x, traj, res_inf, iter, opts);
        }
        let use_variational = match opts.jacobian {
            JacobianMode::FiniteDifference => false,
            JacobianMode::Variational => true,
            JacobianMode::Auto => problem.lambda >= 1.0,
        };
        let unknowns = ShootingUnknowns::from_vec(&x, problem.model, l);
        let jac = if use_variational {
            jacobian_variational(problem, &unknowns, &traj, &integ)?
        } else {
            jacobian_fd(problem, &x, opts, &integ)?
        };
        let lu = jac.clone().full_piv_lu();
        let Some(mut step) = lu.solve(&(-&res)) else {
            return Err(Error::NoConvergence { iterations: iter, residual: res_inf });
        };
        let step_inf = step.amax();
        if step_inf > opts.max_newton_step {
            step *= opts.max_newton_step / step_inf;
        }
        // backtracking line search on the Newton direction
        let mut t = 1.0;
        let mut accepted = false;
        while t >= opts.min_line_step {
            let xt = &x + &step * t;
            let ut = ShootingUnknowns::from_vec(&xt, problem.model, l);
            match shooting_residual(problem, &ut, &integ) {
                Ok((rt, trajt)) => {
                    let (rt_inf, rt_2) = residual_norms(&rt);
                    if rt_2 <= (1.0 - opts.armijo * t) * res_2 || rt_inf <= opts.newton_tol {
                        x = xt;
                        res = rt;
                        res_inf = rt_inf;
                        res_2 = rt_2;
                        traj = trajt;
                        accepted = true;
                        break;
                    }
                }
                Err(_) => {} // inadmissible trial point; shrink
            }
            t *= 0.5;
        }
        if !accepted {
            // Levenberg-Marquardt rescue: the Newton direction stalled, so
            // damp the normal equations until a decrease appears
            let jtj = jac.transpose() * &jac;
            let g = jac.transpose() * &res;
            let mut diag = DMatrix::zeros(jtj.nrows(), jtj.ncols());
            for i in 0..jtj.nrows() {
                diag[(i, i)] = jtj[(i, i)].max(1e-12);
            }
            let mut lm = lm_damping.max(1e-8);
            for _ in 0..25 {
                let sys = &jtj + &diag * lm;
                let Some(step) = sys.full_piv_lu().solve(&(-&g)) else {
                    lm *= 10.0;
                    continue;
                };
                let xt = &x + &step;
                let ut = ShootingUnknowns::from_vec(&xt, problem.model, l);
                if let Ok((rt, trajt)) = shooting_residual(problem, &ut, &integ) {
                    let (rt_inf, rt_2) = residual_norms(&rt);
                    if rt_2 < res_2 {
                        x = xt;
                        res = rt;
                        res_inf = rt_inf;
                        res_2 = rt_2;
                        traj = trajt;
                        accepted = true;
                        lm_damping = lm / 3.0;
                        break;
                    }
                }
                lm *= 10.0;
            }
            if !accepted {
                return Err(Error::NoConvergence { iterations: iter, residual: res_inf });
            }
        } else {
            lm_damping = (lm_damping / 3.0).max(1e-12);
        }
    }
    if res_inf <= opts.newton_tol {
        return finish(problem, x, traj, res_inf, opts.max_iters, opts);
    }
    Err(Error::NoConvergence { iterations: opts.max_iters, residual: res_inf })
}

fn finish(
    problem: &ShootingProblem,
    x: DVector<f64>,
    traj: ExtremalTrajectory,
    residual_inf: f64,
    iterations: usize,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let l = problem.target.codim();
    // validate switch regularity on the converged trajectory
    if problem.lambda >= 1.0 && opts.integ.regularity_tol > 0.0 {
        for &t_sw in &traj.switch_times {
            let s = traj
                .samples
                .iter()
                .min_by(|a, b| (a.t - t_sw).abs().partial_cmp(&(b.t - t_sw).abs()).unwrap())
                .expect("samples");
            let pt = traj.point(s, problem.engine.m0);
            let h01 = crate::singular::bracket_h01(&pt, &problem.engine, &problem.params)?;
            if h01.abs() < opts.integ.regularity_tol {
                return Err(Error::RegularityViolation {
                    t: t_sw,
                    h01,
                    tol: opts.integ.regularity_tol,
                });
            }
        }
    }
    Ok(SolveResult {
        unknowns: ShootingUnknowns::from_vec(&x, problem.model, l),
        trajectory: traj,
        residual_inf,
        iterations,
    })
}

/// Default initial guess for the lambda = 0 energy problem: primer aligned
/// with the initial velocity, zero position costate, zero multipliers.
pub fn default_energy_guess(problem: &ShootingProblem, scale: f64) -> ShootingUnknowns {
    let v = problem.x0.v;
    let dir = if v.norm() > 0.0 { v / v.norm() } else { Vector3::x() };
    ShootingUnknowns {
        p0: Costate::new(Vector3::zeros(), dir * scale, 0.0),
        nu: vec![0.0; problem.target.codim()],
    }
}

/// Tangential-thrust spiral guess: keeps the primer aligned with the
/// velocity over many revolutions by letting p_v co-rotate with the
/// velocity direction. On a near-circular prograde start the costate
/// equation dp_v/dt = -p_r + dh p_v rotates p_v at the orbital rate only if
/// p_r = (2 + w_rel) scale (-z x v_hat), with w_rel the angular rate of the
/// velocity direction in the rotating frame. Without this term the primer
/// misaligns within a fraction of a revolution, which is fatal for
/// many-revolution spirals.
pub fn spiral_energy_guess(problem: &ShootingProblem, scale: f64) -> ShootingUnknowns {
    let x0 = &problem.x0;
    let v_norm = x0.v.norm();
    if v_norm == 0.0 {
        return default_energy_guess(problem, scale);
    }
    let v_hat = x0.v / v_norm;
    // angular rate of the position (and of a near-circular velocity
    // direction) in the rotating frame: |v_inertial| / r - 1, about the
    // dominant primary
    let q = x0.r - problem.params.r1();
    let r_mag = q.norm();
    let v_inertial = x0.v + Vector3::new(-x0.r.y, x0.r.x, 0.0);
    let w_rel = v_inertial.norm() / r_mag - 1.0;
    let z_cross_vhat = Vector3::new(-v_hat.y, v_hat.x, 0.0);
    let p_r = -z_cross_vhat * ((2.0 + w_rel) * scale);
    ShootingUnknowns {
        p0: Costate::new(p_r, v_hat * scale, 0.0),
        nu: vec![0.0; problem.target.codim()],
    }
}

/// Primer-magnitude fallbacks tried, in order, when the default energy guess
/// does not converge. Positive entries are also retried with the
/// spiral-consistent position costate.
pub const ENERGY_GUESS_SCALES: [f64; 7] = [2.0, 1.0, 3.0, 0.5, 5.0, -1.0, -2.0];

/// One converged continuation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationStep {
    pub lambda: f64,
    pub iterations: usize,
    pub residual_inf: f64,
    pub switch_count: usize,
}

/// Result of a full continuation run: per-step summaries plus the final
/// (lambda = 1) solution.
pub struct ContinuationResult {
    pub steps: Vec<ContinuationStep>,
    pub final_solution: SolveResult,
}

/// Smallest lambda increment attempted by adaptive bisection.
pub const MIN_LAMBDA_STEP: f64 = 1e-4;

/// Solves the problem family along `lambda_grid` (strictly increasing, from 0
/// to 1), warm-starting each solve and bisecting the lambda step on failure.
pub fn continuation(
    problem: &ShootingProblem,
    lambda_grid: &[f64],
    seed_guess: &ShootingUnknowns,
    opts: &SolveOptions,
) -> Result<ContinuationResult> {
    assert!(
        lambda_grid.len() >= 2
            && lambda_grid.windows(2).all(|w| w[1] > w[0])
            && lambda_grid[0] == 0.0
            && *lambda_grid.last().unwrap() == 1.0,
        "lambda grid must increase strictly from 0 to 1"
    );
    let mut steps = Vec::new();
    let mut guess = seed_guess.clone();

    // first grid point
    let mut prob0 = problem.clone();
    prob0.lambda = lambda_grid[0];
    let sol0 = solve_shooting(&prob0, &guess, opts)?;
    guess = sol0.unknowns.clone();
    steps.push(ContinuationStep {
        lambda: lambda_grid[0],
        iterations: sol0.iterations,
        residual_inf: sol0.residual_inf,
        switch_count: sol0.trajectory.switch_times.len(),
    });
    let mut current = (lambda_grid[0], sol0);

    let mut targets: Vec<f64> = lambda_grid[1..].to_vec();
    while let Some(&next) = targets.first() {
        let lam_prev = current.0;
        let mut prob = problem.clone();
        prob.lambda = next;
        match solve_shooting(&prob, &guess, opts) {
            Ok(sol) => {
                guess = sol.unknowns.clone();
                steps.push(ContinuationStep {
                    lambda: next,
                    iterations: sol.iterations,
                    residual_inf: sol.residual_inf,
                    switch_count: sol.trajectory.switch_times.len(),
                });
                current = (next, sol);
                targets.remove(0);
            }
            Err(_) => {
                let mid = 0.5 * (lam_prev + next);
                if next - lam_prev <= MIN_LAMBDA_STEP || mid <= lam_prev || mid >= next {
                    return Err(Error::HomotopyStalled { lambda_reached: lam_prev });
                }
                targets.insert(0, mid);
            }
        }
    }
    Ok(ContinuationResult { steps, final_solution: current.1 })
}
