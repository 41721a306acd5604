//! Second-order optimality certification.
//!
//! The variational pair (dx/dp0, dp^T/dp0) is propagated along a converged
//! bang-bang extremal with jump updates at every switch; the determinant of
//! the state block, delta(t), carries the focal-point information: Condition 1
//! forbids zeros on arc interiors, Condition 2 demands a positive one-sided
//! product at every switch, and Condition 3 requires positive definiteness of
//! the terminal quadratic form restricted to the tangent space of the target
//! manifold. The J(xi) curve re-solves the fixed-endpoint problem along a
//! curve on the target and integrates the Poincare-Cartan integrand as an
//! independent visual diagnostic.

use nalgebra::{DMatrix, DVector, Matrix3, RowDVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    gravity_hessian_matrix, gravity_jacobian, CrtbpParams, EngineParams, State,
};
use crate::error::{Error, Result};
use crate::extremal::{
    pack, rhs_into, unpack, ExtremalPoint, ExtremalTrajectory, IntegOptions, Model, ThrustMode,
};
use crate::ode::{integrate, StopReason};
use crate::shooting::{costate_coords, state_coords, ShootingProblem, TargetManifold};
use crate::singular::bracket_h01;

/// The two n x n sensitivity matrices dx/dp0 and dp^T/dp0 at one time.
#[derive(Clone, Debug)]
pub struct VariationalPair {
    pub mx: DMatrix<f64>,
    pub mp: DMatrix<f64>,
    pub t: f64,
}

impl VariationalPair {
    /// Initial conditions for a fixed initial state: Mx = 0, Mp = I.
    pub fn initial(n: usize) -> Self {
        VariationalPair { mx: DMatrix::zeros(n, n), mp: DMatrix::identity(n, n), t: 0.0 }
    }

    pub fn delta(&self) -> f64 {
        self.mx.clone().lu().determinant()
    }
}

/// Applies the linearized canonical field to one tangent column
/// (xi, pi) -> (dxi, dpi) for the current throttle. `g` and `hess_pv` are the
/// gravity Jacobian and the p_v-contracted gravity Hessian at the point.
#[allow(clippy::too_many_arguments)]
fn apply_blocks(
    n: usize,
    rho: f64,
    tau: f64,
    m: f64,
    pv: &Vector3<f64>,
    g: &Matrix3<f64>,
    hess_pv: &Matrix3<f64>,
    xi: &[f64],
    pi: &[f64],
    dxi: &mut [f64],
    dpi: &mut [f64],
) {
    let xir = Vector3::new(xi[0], xi[1], xi[2]);
    let xiv = Vector3::new(xi[3], xi[4], xi[5]);
    let pir = Vector3::new(pi[0], pi[1], pi[2]);
    let piv = Vector3::new(pi[3], pi[4], pi[5]);
    let u = pv.norm();

    // d xi_r = xi_v
    dxi[0] = xi[3];
    dxi[1] = xi[4];
    dxi[2] = xi[5];
    // d xi_v = G xi_r + A xi_v + rho tau/(m u) (I - w w^T) pi_v  [- rho tau w/m^2 xi_m]
    let mut dxiv = g * xir + Vector3::new(2.0 * xiv.y, -2.0 * xiv.x, 0.0);
    if rho != 0.0 {
        let w = pv / u;
        dxiv += (piv - w * w.dot(&piv)) * (rho * tau / (m * u));
        if n == 7 {
            dxiv -= w * (rho * tau / (m * m)) * xi[6];
        }
    }
    dxi[3] = dxiv.x;
    dxi[4] = dxiv.y;
    dxi[5] = dxiv.z;
    if n == 7 {
        dxi[6] = 0.0;
    }

    // d pi_r = -Hm(p_v) xi_r - G pi_v
    let dpir = -(hess_pv * xir) - g * piv;
    // d pi_v = -pi_r + A pi_v
    let dpiv = Vector3::new(-pir.x + 2.0 * piv.y, -pir.y - 2.0 * piv.x, -pir.z);
    dpi[0] = dpir.x;
    dpi[1] = dpir.y;
    dpi[2] = dpir.z;
    dpi[3] = dpiv.x;
    dpi[4] = dpiv.y;
    dpi[5] = dpiv.z;
    if n == 7 {
        // d pi_m = -2 rho tau u/m^3 xi_m + rho tau/m^2 w . pi_v
        let mut d = 0.0;
        if rho != 0.0 {
            let w = pv / u;
            d = -2.0 * rho * tau * u / (m * m * m) * xi[6] + rho * tau / (m * m) * w.dot(&piv);
        }
        dpi[6] = d;
    }
}

/// Rate of the variational pair on a bang-arc interior: the four Hamiltonian
/// second-derivative blocks applied to (Mx, Mp), column by column.
pub fn variational_rhs(
    pt: &ExtremalPoint,
    pair: &VariationalPair,
    rho: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = model.n();
    if rho != 0.0 && pt.p.p_v.norm() == 0.0 {
        return Err(Error::UndefinedDirection { p_v_norm: 0.0, h1: f64::NAN });
    }
    let g = gravity_jacobian(&pt.x.r, params)?;
    let hess_pv = gravity_hessian_matrix(&pt.x.r, &pt.p.p_v, params)?;
    let mut dmx = DMatrix::zeros(n, n);
    let mut dmp = DMatrix::zeros(n, n);
    let mut dxi = vec![0.0; n];
    let mut dpi = vec![0.0; n];
    for j in 0..n {
        let xi: Vec<f64> = pair.mx.column(j).iter().copied().collect();
        let pi: Vec<f64> = pair.mp.column(j).iter().copied().collect();
        apply_blocks(
            n,
            rho,
            engine.tau_max,
            pt.x.m,
            &pt.p.p_v,
            &g,
            &hess_pv,
            &xi,
            &pi,
            &mut dxi,
            &mut dpi,
        );
        for i in 0..n {
            dmx[(i, j)] = dxi[i];
            dmp[(i, j)] = dpi[i];
        }
    }
    Ok((dmx, dmp))
}

/// f1 as an n-vector at the optimal thrust direction.
fn f1_coords(pt: &ExtremalPoint, engine: &EngineParams, n: usize) -> Result<DVector<f64>> {
    let u = pt.p.p_v.norm();
    if u == 0.0 {
        return Err(Error::UndefinedDirection { p_v_norm: 0.0, h1: f64::NAN });
    }
    let w = pt.p.p_v / u;
    let mut out = DVector::zeros(n);
    for j in 0..3 {
        out[3 + j] = engine.tau_max * w[j] / pt.x.m;
    }
    if n == 7 {
        out[6] = -engine.tau_max * engine.beta;
    }
    Ok(out)
}

/// Row gradient of p . f1 in x at the fixed optimal direction: only the mass
/// column is nonzero (and the reduced model has none).
fn grad_x_pf1(pt: &ExtremalPoint, engine: &EngineParams, n: usize) -> RowDVector<f64> {
    let mut out = RowDVector::zeros(n);
    if n == 7 {
        out[6] = -engine.tau_max * pt.p.p_v.norm() / (pt.x.m * pt.x.m);
    }
    out
}

/// Gradient of the i-th switching time with respect to p0:
/// dt_i = -[p (df1/dx) Mx + f1^T Mp] / H01, evaluated at t_i-.
pub fn switch_time_gradient(
    pt_i: &ExtremalPoint,
    pair_minus: &VariationalPair,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    regularity_tol: f64,
) -> Result<RowDVector<f64>> {
    let n = model.n();
    let h01 = bracket_h01(pt_i, engine, params)?;
    if h01.abs() < regularity_tol {
        return Err(Error::RegularityViolation { t: pt_i.t, h01, tol: regularity_tol });
    }
    let p_df1_dx = grad_x_pf1(pt_i, engine, n);
    let f1 = f1_coords(pt_i, engine, n)?;
    let row = (&p_df1_dx * &pair_minus.mx) + f1.transpose() * &pair_minus.mp;
    Ok(-row / h01)
}

/// Jump update of the variational pair across a switch with throttle jump
/// `delta_rho` in {-1, +1}:
/// Mx(+) = Mx(-) - drho f1 (x) dt_i, Mp(+) = Mp(-) + drho grad_x(p f1)^T (x) dt_i.
pub fn jump_update(
    pair_minus: &VariationalPair,
    pt_i: &ExtremalPoint,
    dti: &RowDVector<f64>,
    delta_rho: f64,
    engine: &EngineParams,
    model: Model,
) -> Result<VariationalPair> {
    let n = model.n();
    let f1 = f1_coords(pt_i, engine, n)?;
    let gx = grad_x_pf1(pt_i, engine, n);
    let mx = &pair_minus.mx - (&f1 * dti) * delta_rho;
    let mp = &pair_minus.mp + (gx.transpose() * dti) * delta_rho;
    Ok(VariationalPair { mx, mp, t: pt_i.t })
}

/// One delta sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSample {
    pub t: f64,
    pub delta: f64,
}

/// One-sided determinants at a switch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchDeltaPair {
    pub t: f64,
    pub minus: f64,
    pub plus: f64,
}

/// The delta(t) record of a propagated extremal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrace {
    pub samples: Vec<DeltaSample>,
    /// Index ranges into `samples`, one per arc.
    pub arc_ranges: Vec<(usize, usize)>,
    pub arc_modes: Vec<ThrustMode>,
    pub switch_pairs: Vec<SwitchDeltaPair>,
}

impl DeltaTrace {
    pub fn arc_max_abs(&self, arc: usize) -> f64 {
        let (lo, hi) = self.arc_ranges[arc];
        self.samples[lo..hi].iter().map(|s| s.delta.abs()).fold(0.0, f64::max)
    }

    pub fn arc_min_abs(&self, arc: usize) -> f64 {
        let (lo, hi) = self.arc_ranges[arc];
        self.samples[lo..hi].iter().map(|s| s.delta.abs()).fold(f64::INFINITY, f64::min)
    }
}

/// Output of the jump-aware variational propagation.
pub struct VariationalPropagation {
    pub trace: DeltaTrace,
    pub final_pair: VariationalPair,
    /// Pair snapshots at every recorded sample time (same indexing as
    /// `trace.samples`).
    pub pairs: Vec<VariationalPair>,
}

struct VariationalSys<'a> {
    engine: &'a EngineParams,
    params: &'a CrtbpParams,
    model: Model,
    rho: f64,
    err: std::cell::RefCell<Option<Error>>,
}

impl crate::ode::OdeSystem for &VariationalSys<'_> {
    fn eval(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.model.n();
        let dim_c = 2 * n;
        if let Err(e) = (|| -> Result<()> {
            rhs_into(&y[..dim_c], self.rho, self.engine, self.params, self.model, &mut dy[..dim_c])?;
            let (x, p) = unpack(&y[..dim_c], self.model, self.engine.m0);
            if self.rho != 0.0 && p.p_v.norm() == 0.0 {
                return Err(Error::UndefinedDirection { p_v_norm: 0.0, h1: f64::NAN });
            }
            let g = gravity_jacobian(&x.r, self.params)?;
            let hess_pv = gravity_hessian_matrix(&x.r, &p.p_v, self.params)?;
            let n2 = n * n;
            for j in 0..n {
                let xi = &y[dim_c + j * n..dim_c + (j + 1) * n];
                let pi = &y[dim_c + n2 + j * n..dim_c + n2 + (j + 1) * n];
                // split the output slice to borrow both column targets
                let (dxi_all, dpi_all) = dy[dim_c..].split_at_mut(n2);
                apply_blocks(
                    n,
                    self.rho,
                    self.engine.tau_max,
                    x.m,
                    &p.p_v,
                    &g,
                    &hess_pv,
                    xi,
                    pi,
                    &mut dxi_all[j * n..(j + 1) * n],
                    &mut dpi_all[j * n..(j + 1) * n],
                );
            }
            Ok(())
        })() {
            dy.fill(0.0);
            let mut slot = self.err.borrow_mut();
            if slot.is_none() {
                *slot = Some(e);
            }
        }
    }
}

fn pair_from_slice(y: &[f64], n: usize, t: f64) -> VariationalPair {
    let dim_c = 2 * n;
    let n2 = n * n;
    let mx = DMatrix::from_column_slice(n, n, &y[dim_c..dim_c + n2]);
    let mp = DMatrix::from_column_slice(n, n, &y[dim_c + n2..dim_c + 2 * n2]);
    VariationalPair { mx, mp, t }
}

fn pair_into_slice(pair: &VariationalPair, y: &mut [f64], n: usize) {
    let dim_c = 2 * n;
    let n2 = n * n;
    y[dim_c..dim_c + n2].copy_from_slice(pair.mx.as_slice());
    y[dim_c + n2..dim_c + 2 * n2].copy_from_slice(pair.mp.as_slice());
}

/// Integrates the variational pair along a lambda = 1 extremal, applying the
/// jump updates at every recorded switch, and records delta(t) densely with
/// one-sided values at switches.
pub fn propagate_variational(
    traj: &ExtremalTrajectory,
    engine: &EngineParams,
    params: &CrtbpParams,
    integ: &IntegOptions,
) -> Result<VariationalPropagation> {
    assert!(
        (traj.lambda - 1.0).abs() < 1e-14,
        "variational propagation applies to lambda = 1 extremals"
    );
    let n = traj.model.n();
    let dim = 2 * n + 2 * n * n;
    let mut y = vec![0.0; dim];
    pack_into_augmented(traj, &mut y, n);

    let mut trace = DeltaTrace::default();
    let mut pairs = Vec::new();
    let boundaries = traj.arc_boundaries();
    let mut t = 0.0;

    let record = |y: &[f64], t: f64, trace: &mut DeltaTrace, pairs: &mut Vec<VariationalPair>| {
        let pair = pair_from_slice(y, n, t);
        trace.samples.push(DeltaSample { t, delta: pair.delta() });
        pairs.push(pair);
    };

    record(&y, 0.0, &mut trace, &mut pairs);

    for (arc, mode) in traj.arc_modes.iter().enumerate() {
        let t_end = boundaries[arc + 1];
        let arc_start_idx = trace.samples.len() - 1;
        let sys = VariationalSys {
            engine,
            params,
            model: traj.model,
            rho: mode.rho(),
            err: std::cell::RefCell::new(None),
        };
        let (t_reached, reason) = integrate(&&sys, t, &mut y, t_end, &integ.ode, |dense, y_end| {
            let pair = pair_from_slice(y_end, n, dense.t1());
            trace.samples.push(DeltaSample { t: dense.t1(), delta: pair.delta() });
            pairs.push(pair);
            true
        });
        if let Some(e) = sys.err.borrow_mut().take() {
            return Err(e);
        }
        if reason != StopReason::Reached {
            return Err(Error::StepBudgetExceeded { t: t_reached, max_steps: integ.ode.max_steps });
        }
        t = t_end;
        trace.arc_ranges.push((arc_start_idx, trace.samples.len()));
        trace.arc_modes.push(*mode);

        if arc < traj.switch_times.len() {
            // apply the jump at this switch
            let (x, p) = unpack(&y[..2 * n], traj.model, engine.m0);
            let pt = ExtremalPoint { x, p, t };
            let pair_minus = pair_from_slice(&y, n, t);
            let delta_minus = pair_minus.delta();
            let dti = switch_time_gradient(
                &pt,
                &pair_minus,
                engine,
                params,
                traj.model,
                integ.regularity_tol,
            )?;
            let next_mode = traj.arc_modes[arc + 1];
            let delta_rho = next_mode.rho() - mode.rho();
            let pair_plus = jump_update(&pair_minus, &pt, &dti, delta_rho, engine, traj.model)?;
            let delta_plus = pair_plus.delta();
            trace.switch_pairs.push(SwitchDeltaPair { t, minus: delta_minus, plus: delta_plus });
            pair_into_slice(&pair_plus, &mut y, n);
            trace.samples.push(DeltaSample { t, delta: delta_plus });
            pairs.push(pair_plus);
        }
    }
    let final_pair = pair_from_slice(&y, n, traj.t_f);
    Ok(VariationalPropagation { trace, final_pair, pairs })
}

fn pack_into_augmented(traj: &ExtremalTrajectory, y: &mut [f64], n: usize) {
    let z0 = pack(&traj.x0, &traj.p0, traj.model);
    y[..2 * n].copy_from_slice(&z0);
    let init = VariationalPair::initial(n);
    pair_into_slice(&init, y, n);
}

/// Floors and tolerances of the delta-based conditions.
#[derive(Clone, Copy, Debug)]
pub struct ConditionOpts {
    /// Relative floor (against the arc max) below which |delta| counts as a
    /// zero on an arc interior.
    pub cond1_floor_rel: f64,
    /// Relative floor (against adjacent arc maxima) below which a one-sided
    /// pair is inconclusive.
    pub cond2_floor_rel: f64,
    /// Absolute floor for Condition 2 (0 disables).
    pub cond2_floor_abs: f64,
    /// Smallest-eigenvalue threshold of the reduced terminal form.
    pub cond3_tol: f64,
}

impl Default for ConditionOpts {
    fn default() -> Self {
        ConditionOpts {
            cond1_floor_rel: 1e-10,
            cond2_floor_rel: 1e-10,
            cond2_floor_abs: 0.0,
            cond3_tol: 1e-10,
        }
    }
}

/// Outcome of Condition 1 (no zeros of delta on arc interiors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition1Verdict {
    pub pass: bool,
    pub first_violation: Option<f64>,
    /// Number of leading arcs exempted because delta is structurally zero
    /// before the first burn.
    pub exempt_leading_arcs: usize,
}

/// Condition 1: delta has no zero crossing on any open inter-switch interval
/// from the first burn arc onward. The leading coast (delta identically zero
/// since Mx(0) = 0) is exempt and reported, not failed.
pub fn check_condition1(trace: &DeltaTrace, opts: &ConditionOpts) -> Condition1Verdict {
    let first_burn = trace
        .arc_modes
        .iter()
        .position(|m| *m == ThrustMode::Burn)
        .unwrap_or(trace.arc_modes.len());
    let mut verdict =
        Condition1Verdict { pass: true, first_violation: None, exempt_leading_arcs: first_burn };
    for arc in first_burn..trace.arc_ranges.len() {
        let (lo, hi) = trace.arc_ranges[arc];
        if hi - lo < 2 {
            continue;
        }
        let arc_max = trace.arc_max_abs(arc);
        let samples = &trace.samples[lo..hi];
        let floor = opts.cond1_floor_rel * arc_max;
        // sign changes strictly inside the arc; flips within the sub-floor
        // noise band (the structural ramp out of delta(0) = 0 lives there)
        // are not resolvable zeros
        for w in samples.windows(2) {
            if w[0].delta.abs() > floor
                && w[1].delta.abs() > floor
                && w[0].delta * w[1].delta < 0.0
            {
                verdict.pass = false;
                verdict.first_violation.get_or_insert(w[1].t);
            }
        }
        // near-zero dips; skip on the first burn arc where delta ramps from
        // the structural zero at t = 0
        if arc > first_burn && arc_max > 0.0 {
            for s in &samples[1..hi - lo - 1] {
                if s.delta.abs() < floor {
                    verdict.pass = false;
                    verdict.first_violation.get_or_insert(s.t);
                }
            }
        }
        if arc == first_burn && arc_max == 0.0 {
            // a burn arc with identically zero delta cannot certify
            verdict.pass = false;
            verdict.first_violation.get_or_insert(samples[0].t);
        }
    }
    verdict
}

/// Per-switch outcome of Condition 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchVerdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Outcome of Condition 2 (positive one-sided products at switches).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition2Verdict {
    pub pass: bool,
    pub failing_switch: Option<usize>,
    pub inconclusive_switches: Vec<usize>,
    pub per_switch: Vec<SwitchVerdict>,
}

/// Condition 2: delta(t_i-) delta(t_i+) > 0 at every switch, with relative
/// and absolute floors below which a pair is reported inconclusive rather
/// than failed.
pub fn check_condition2(trace: &DeltaTrace, opts: &ConditionOpts) -> Condition2Verdict {
    let mut verdict = Condition2Verdict {
        pass: true,
        failing_switch: None,
        inconclusive_switches: Vec::new(),
        per_switch: Vec::new(),
    };
    // switches before the first burn arc sit in the structural-zero segment
    let first_burn = trace
        .arc_modes
        .iter()
        .position(|m| *m == ThrustMode::Burn)
        .unwrap_or(trace.arc_modes.len());
    for (i, pair) in trace.switch_pairs.iter().enumerate() {
        if i + 1 < first_burn {
            verdict.per_switch.push(SwitchVerdict::Inconclusive);
            verdict.inconclusive_switches.push(i);
            continue;
        }
        let scale = trace.arc_max_abs(i).max(trace.arc_max_abs(i + 1));
        let floor = (opts.cond2_floor_rel * scale).max(opts.cond2_floor_abs);
        let conclusive = pair.minus.abs() > floor && pair.plus.abs() > floor;
        if !conclusive {
            verdict.per_switch.push(SwitchVerdict::Inconclusive);
            verdict.inconclusive_switches.push(i);
            verdict.pass = false;
        } else if pair.minus * pair.plus > 0.0 {
            verdict.per_switch.push(SwitchVerdict::Pass);
        } else {
            verdict.per_switch.push(SwitchVerdict::Fail);
            verdict.pass = false;
            verdict.failing_switch.get_or_insert(i);
        }
    }
    verdict
}

/// Lagrange multipliers from the converged endpoint:
/// nu = p(t_f) dphi^T (dphi dphi^T)^{-1}.
pub fn compute_multipliers(
    final_pt: &ExtremalPoint,
    target: &dyn TargetManifold,
    n: usize,
) -> Result<DVector<f64>> {
    let l = target.codim();
    let dphi = target.dphi(&final_pt.x, n);
    let gram = &dphi * dphi.transpose();
    let svd = gram.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * smax.max(1.0)).count();
    if rank < l {
        return Err(Error::RankDeficientTarget { rank, codim: l });
    }
    let p_f = costate_coords(&final_pt.p, n);
    let rhs = &dphi * p_f;
    gram.full_piv_lu().solve(&rhs).ok_or(Error::RankDeficientTarget { rank, codim: l })
}

/// Orthonormal basis of the tangent space of M at the endpoint: columns span
/// the null space of dphi (modified Gram-Schmidt against the orthonormalized
/// constraint gradients).
pub fn tangent_basis(
    final_pt: &ExtremalPoint,
    target: &dyn TargetManifold,
    n: usize,
) -> Result<DMatrix<f64>> {
    let l = target.codim();
    let dphi = target.dphi(&final_pt.x, n);
    // orthonormalize the constraint gradients
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(l);
    for i in 0..l {
        let mut w: DVector<f64> = dphi.row(i).transpose();
        for _ in 0..2 {
            for qj in &q {
                let c = qj.dot(&w);
                w -= qj * c;
            }
        }
        let norm = w.norm();
        if norm < 1e-12 {
            return Err(Error::RankDeficientTarget { rank: q.len(), codim: l });
        }
        q.push(w / norm);
    }
    // extend with coordinate directions
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n - l);
    for e in 0..n {
        if basis.len() == n - l {
            break;
        }
        let mut w = DVector::zeros(n);
        w[e] = 1.0;
        for _ in 0..2 {
            for qj in &q {
                let c = qj.dot(&w);
                w -= qj * c;
            }
            for bj in &basis {
                let c = bj.dot(&w);
                w -= bj * c;
            }
        }
        let norm = w.norm();
        if norm > 1e-8 {
            basis.push(w / norm);
        }
    }
    if basis.len() != n - l {
        return Err(Error::RankDeficientTarget { rank: l + basis.len(), codim: l });
    }
    let mut c = DMatrix::zeros(n, n - l);
    for (j, b) in basis.iter().enumerate() {
        c.column_mut(j).copy_from(b);
    }
    Ok(c)
}

/// Outcome of Condition 3 (terminal quadratic form on T M).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition3Verdict {
    pub pass: bool,
    /// True when l = n leaves no tangent directions to test.
    pub vacuous: bool,
    pub reduced: Vec<Vec<f64>>,
    pub smallest_eigenvalue: f64,
}

/// Condition 3: the symmetric part of
/// C^T [ Mp(t_f) Mx(t_f)^{-1} - sum_i nu_i d2phi_i ] C is positive definite.
pub fn check_condition3(
    final_pair: &VariationalPair,
    final_pt: &ExtremalPoint,
    target: &dyn TargetManifold,
    nu: &DVector<f64>,
    model: Model,
    opts: &ConditionOpts,
) -> Result<Condition3Verdict> {
    let n = model.n();
    let l = target.codim();
    if l >= n {
        return Ok(Condition3Verdict {
            pass: true,
            vacuous: true,
            reduced: Vec::new(),
            smallest_eigenvalue: f64::INFINITY,
        });
    }
    let svd = final_pair.mx.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e12 {
        return Err(Error::NearSingularMx { cond });
    }
    let mx_inv = final_pair
        .mx
        .clone()
        .full_piv_lu()
        .try_inverse()
        .ok_or(Error::NearSingularMx { cond })?;
    let mut w = &final_pair.mp * mx_inv;
    for i in 0..l {
        if nu[i] != 0.0 {
            w -= target.d2phi(&final_pt.x, i, n) * nu[i];
        }
    }
    let c = tangent_basis(final_pt, target, n)?;
    let reduced_full = c.transpose() * &w * &c;
    let reduced = (&reduced_full + reduced_full.transpose()) * 0.5;
    let eig = reduced.clone().symmetric_eigen();
    let smallest = eig.eigenvalues.min();
    Ok(Condition3Verdict {
        pass: smallest > opts.cond3_tol,
        vacuous: false,
        reduced: (0..reduced.nrows())
            .map(|i| (0..reduced.ncols()).map(|j| reduced[(i, j)]).collect())
            .collect(),
        smallest_eigenvalue: smallest,
    })
}

/// Final classification of a certified extremal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Classification {
    StrictStrongLocalOptimum,
    FocalPointOnArc { t: f64 },
    FoldAtSwitch { switch_index: usize },
    Condition3Failure,
    Inconclusive,
}

/// Full second-order report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub condition1: Condition1Verdict,
    pub condition2: Condition2Verdict,
    pub condition3: Option<Condition3Verdict>,
    pub nu: Vec<f64>,
    pub classification: Classification,
}

/// The J(xi) diagnostic curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JCurve {
    pub epsilon: f64,
    pub xis: Vec<f64>,
    pub j_values: Vec<f64>,
    /// Endpoint states y(xi) on M (state coordinates).
    pub endpoints: Vec<Vec<f64>>,
    /// |J'(0)| of a least-squares quadratic fit through the nodes.
    pub fitted_slope: f64,
}

/// Whether J(xi) > J(0) = 0 at every nonzero node.
impl JCurve {
    pub fn positive_away_from_zero(&self) -> bool {
        self.xis
            .iter()
            .zip(&self.j_values)
            .all(|(xi, j)| *xi == 0.0 || *j > 0.0)
    }
}

/// Computes the J(xi) curve: for each node on the boundary curve through the
/// converged endpoint, Newton-solves the fixed-endpoint problem
/// x(t_f, p0(xi)) = y(xi) (warm-started along the path) and accumulates the
/// Poincare-Cartan integrand lambda(eta) . y'(eta) by trapezoid quadrature.
/// The final time is fixed, so the H dt term drops.
pub fn j_curve(
    problem: &ShootingProblem,
    converged_p0: &crate::extremal::Costate,
    epsilon: f64,
    n_points: usize,
    integ: &IntegOptions,
) -> Result<JCurve> {
    assert!(problem.lambda >= 1.0, "J-curve applies to the lambda = 1 extremal");
    assert!(n_points >= 3 && epsilon > 0.0);
    let n = problem.model.n();
    let base = crate::extremal::integrate_extremal(
        converged_p0,
        &problem.x0,
        problem.t_f,
        1.0,
        &problem.engine,
        &problem.params,
        problem.model,
        integ,
    )?;
    let base_pt = base.point(base.final_sample(), problem.engine.m0);

    let half = (n_points - 1) / 2;
    let dxi = epsilon / half as f64;

    // node solver: fixed-endpoint Newton with the jump-aware variational
    // Jacobian, refreshed once per node
    let solve_node = |xi: f64, p0_guess: &crate::extremal::Costate| -> Result<(crate::extremal::Costate, DVector<f64>, State)> {
        let (y_state, _) = problem
            .target
            .boundary_curve(&base_pt.x, xi, n)
            .ok_or(Error::PathSolveFailed { xi })?;
        let y_coords = state_coords(&y_state, n);
        let mut p0 = *p0_guess;
        for _ in 0..25 {
            let traj = crate::extremal::integrate_extremal(
                &p0,
                &problem.x0,
                problem.t_f,
                1.0,
                &problem.engine,
                &problem.params,
                problem.model,
                &IntegOptions { regularity_tol: 0.0, ..*integ },
            )
            .map_err(|_| Error::PathSolveFailed { xi })?;
            let pt_f = traj.point(traj.final_sample(), problem.engine.m0);
            let res = state_coords(&pt_f.x, n) - &y_coords;
            if res.amax() <= 1e-11 {
                return Ok((p0, costate_coords(&pt_f.p, n), pt_f.x));
            }
            let prop = propagate_variational(&traj, &problem.engine, &problem.params, integ)
                .map_err(|_| Error::PathSolveFailed { xi })?;
            let step = prop
                .final_pair
                .mx
                .full_piv_lu()
                .solve(&(-res))
                .ok_or(Error::PathSolveFailed { xi })?;
            p0 = add_costate(&p0, &step, n);
        }
        Err(Error::PathSolveFailed { xi })
    };

    let mut xis = vec![0.0];
    let mut js = vec![0.0];
    let mut ends = vec![state_coords(&base_pt.x, n).as_slice().to_vec()];

    // integrand at xi = 0
    let lam0 = costate_coords(&base_pt.p, n);
    let (_, dy0) = problem.target.boundary_curve(&base_pt.x, 0.0, n).unwrap();
    let g0 = lam0.dot(&dy0);

    for dir in [1.0, -1.0] {
        let mut p0 = *converged_p0;
        let mut j_acc = 0.0;
        let mut g_prev = g0;
        for k in 1..=half {
            let xi = dir * dxi * k as f64;
            let (p0_new, lam, y_state) = solve_node(xi, &p0)?;
            p0 = p0_new;
            let (_, dy) = problem.target.boundary_curve(&base_pt.x, xi, n).unwrap();
            let g = lam.dot(&dy);
            j_acc += 0.5 * (g_prev + g) * (dir * dxi);
            g_prev = g;
            xis.push(xi);
            js.push(j_acc);
            ends.push(state_coords(&y_state, n).as_slice().to_vec());
        }
    }
    // sort nodes by xi
    let mut order: Vec<usize> = (0..xis.len()).collect();
    order.sort_by(|&a, &b| xis[a].partial_cmp(&xis[b]).unwrap());
    let xis: Vec<f64> = order.iter().map(|&i| xis[i]).collect();
    let js: Vec<f64> = order.iter().map(|&i| js[i]).collect();
    let ends: Vec<Vec<f64>> = order.iter().map(|&i| ends[i].clone()).collect();

    // least-squares quadratic fit J ~ c0 + c1 xi + c2 xi^2
    let mut a = DMatrix::zeros(xis.len(), 3);
    let mut b = DVector::zeros(xis.len());
    for (i, (&xi, &j)) in xis.iter().zip(&js).enumerate() {
        a[(i, 0)] = 1.0;
        a[(i, 1)] = xi;
        a[(i, 2)] = xi * xi;
        b[i] = j;
    }
    let coeffs = (a.transpose() * &a)
        .full_piv_lu()
        .solve(&(a.transpose() * b))
        .expect("quadratic fit");

    Ok(JCurve {
        epsilon,
        xis,
        j_values: js,
        endpoints: ends,
        fitted_slope: coeffs[1].abs(),
    })
}

fn add_costate(p0: &crate::extremal::Costate, step: &DVector<f64>, n: usize) -> crate::extremal::Costate {
    crate::extremal::Costate::new(
        p0.p_r + Vector3::new(step[0], step[1], step[2]),
        p0.p_v + Vector3::new(step[3], step[4], step[5]),
        p0.p_m + if n == 7 { step[6] } else { 0.0 },
    )
}

/// Everything produced by a certification pass.
pub struct Certification {
    pub report: SufficiencyReport,
    pub trace: DeltaTrace,
    pub final_pair: VariationalPair,
}

/// Runs the full second-order test battery on a converged lambda = 1
/// extremal and classifies it.
pub fn certify(
    traj: &ExtremalTrajectory,
    target: &dyn TargetManifold,
    engine: &EngineParams,
    params: &CrtbpParams,
    integ: &IntegOptions,
    opts: &ConditionOpts,
) -> Result<Certification> {
    let n = traj.model.n();
    let l = target.codim();
    let prop = propagate_variational(traj, engine, params, integ)?;
    let cond1 = check_condition1(&prop.trace, opts);
    let cond2 = check_condition2(&prop.trace, opts);
    let final_pt = traj.point(traj.final_sample(), engine.m0);
    let nu = compute_multipliers(&final_pt, target, n)?;

    let cond3 = if l < n {
        if cond1.pass && cond2.pass {
            Some(check_condition3(&prop.final_pair, &final_pt, target, &nu, traj.model, opts)?)
        } else {
            // Mx(t_f) may be singular; still attempt, but tolerate failure
            check_condition3(&prop.final_pair, &final_pt, target, &nu, traj.model, opts).ok()
        }
    } else {
        Some(Condition3Verdict {
            pass: true,
            vacuous: true,
            reduced: Vec::new(),
            smallest_eigenvalue: f64::INFINITY,
        })
    };

    let classification = if !cond1.pass {
        match cond1.first_violation {
            Some(t) => Classification::FocalPointOnArc { t },
            None => Classification::Inconclusive,
        }
    } else if !cond2.pass {
        match cond2.failing_switch {
            Some(i) => Classification::FoldAtSwitch { switch_index: i },
            None => Classification::Inconclusive,
        }
    } else {
        match &cond3 {
            Some(v) if v.pass => Classification::StrictStrongLocalOptimum,
            Some(v) if !v.vacuous => Classification::Condition3Failure,
            _ => Classification::Inconclusive,
        }
    };

    Ok(Certification {
        report: SufficiencyReport {
            condition1: cond1,
            condition2: cond2,
            condition3: cond3,
            nu: nu.as_slice().to_vec(),
            classification,
        },
        trace: prop.trace,
        final_pair: prop.final_pair,
    })
}
