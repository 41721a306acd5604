//! PMP canonical system and bang-bang extremal integration.
//!
//! The canonical flow is integrated with a fixed throttle per arc; the
//! switching function H1 is monitored on the dense output of every accepted
//! step and each zero is refined, by re-stepping from the last accepted point,
//! until the committed switch state satisfies |H1| <= switch_tol with a time
//! bracket below `bracket_tol`. For lambda < 1 the throttle follows the
//! smoothed (clamped affine) law and the integration is only split, not
//! switched, where the throttle enters or leaves its clamp.

use std::cell::RefCell;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    coriolis, gravity, gravity_jacobian, Control, CrtbpParams, EngineParams, State,
};
use crate::error::{Error, Result};
use crate::ode::{dp_step, integrate, DenseStep, OdeTol, StopReason};
use crate::singular::bracket_h01;

/// State-space model: the constant-mass reduction carries x = (r, v) with the
/// mass as a parameter; the full model appends m and its costate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    ReducedConstantMass,
    FullMass,
}

impl Model {
    /// State (and costate) dimension n.
    pub fn n(self) -> usize {
        match self {
            Model::ReducedConstantMass => 6,
            Model::FullMass => 7,
        }
    }

    /// Packed canonical dimension 2n.
    pub fn dim(self) -> usize {
        2 * self.n()
    }
}

/// Adjoint state p = (p_r, p_v, p_m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costate {
    pub p_r: Vector3<f64>,
    pub p_v: Vector3<f64>,
    pub p_m: f64,
}

impl Costate {
    pub fn new(p_r: Vector3<f64>, p_v: Vector3<f64>, p_m: f64) -> Self {
        Costate { p_r, p_v, p_m }
    }
}

/// A point on an extremal: state, costate, time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtremalPoint {
    pub x: State,
    pub p: Costate,
    pub t: f64,
}

/// Thrust mode of a bang arc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThrustMode {
    Burn,
    Coast,
}

impl ThrustMode {
    pub fn rho(self) -> f64 {
        match self {
            ThrustMode::Burn => 1.0,
            ThrustMode::Coast => 0.0,
        }
    }
}

/// Packs (x, p) into the flat canonical layout.
pub fn pack(x: &State, p: &Costate, model: Model) -> Vec<f64> {
    let mut z = vec![0.0; model.dim()];
    pack_into(x, p, model, &mut z);
    z
}

pub fn pack_into(x: &State, p: &Costate, model: Model, z: &mut [f64]) {
    z[0..3].copy_from_slice(x.r.as_slice());
    z[3..6].copy_from_slice(x.v.as_slice());
    match model {
        Model::ReducedConstantMass => {
            z[6..9].copy_from_slice(p.p_r.as_slice());
            z[9..12].copy_from_slice(p.p_v.as_slice());
        }
        Model::FullMass => {
            z[6] = x.m;
            z[7..10].copy_from_slice(p.p_r.as_slice());
            z[10..13].copy_from_slice(p.p_v.as_slice());
            z[13] = p.p_m;
        }
    }
}

/// Unpacks the flat layout; `m_const` supplies the mass in the reduced model.
pub fn unpack(z: &[f64], model: Model, m_const: f64) -> (State, Costate) {
    let r = Vector3::new(z[0], z[1], z[2]);
    let v = Vector3::new(z[3], z[4], z[5]);
    match model {
        Model::ReducedConstantMass => (
            State::new(r, v, m_const),
            Costate::new(
                Vector3::new(z[6], z[7], z[8]),
                Vector3::new(z[9], z[10], z[11]),
                0.0,
            ),
        ),
        Model::FullMass => (
            State::new(r, v, z[6]),
            Costate::new(
                Vector3::new(z[7], z[8], z[9]),
                Vector3::new(z[10], z[11], z[12]),
                z[13],
            ),
        ),
    }
}

/// Switching function H1 = tau |p_v| / m - tau beta p_m - 1.
pub fn switching_function(pt: &ExtremalPoint, engine: &EngineParams) -> f64 {
    engine.tau_max * pt.p.p_v.norm() / pt.x.m - engine.tau_max * engine.beta * pt.p.p_m - 1.0
}

/// Hamiltonian H = p (f0 + rho f1) + p0 rho with p0 = -1.
pub fn hamiltonian(
    pt: &ExtremalPoint,
    u: &Control,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<f64> {
    let g = gravity(&pt.x.r, params)?;
    let h0 = pt.p.p_r.dot(&pt.x.v) + pt.p.p_v.dot(&(coriolis(&pt.x.v) + g));
    let pf1 = engine.tau_max * pt.p.p_v.dot(&u.omega) / pt.x.m
        - engine.tau_max * engine.beta * pt.p.p_m;
    Ok(h0 + u.rho * (pf1 - 1.0))
}

/// Pointwise-maximized control of the L1 Hamiltonian. Within the switching
/// tolerance the throttle follows `mode_hint` (the integrator's current arc).
pub fn optimal_control(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    switch_tol: f64,
    mode_hint: Option<ThrustMode>,
) -> Result<Control> {
    let pv_norm = pt.p.p_v.norm();
    let h1 = switching_function(pt, engine);
    let rho = if h1.abs() <= switch_tol {
        match mode_hint {
            Some(mode) => mode.rho(),
            None => {
                if h1 > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    } else if h1 > 0.0 {
        1.0
    } else {
        0.0
    };
    if pv_norm == 0.0 {
        if h1 >= 0.0 {
            return Err(Error::UndefinedDirection { p_v_norm: pv_norm, h1 });
        }
        return Ok(Control { rho: 0.0, omega: Vector3::x() });
    }
    Ok(Control { rho, omega: pt.p.p_v / pv_norm })
}

/// Throttle of the lambda-blended cost: the maximizer of
/// rho H1 - (lambda rho + (1-lambda) rho^2) + rho over [0,1], clamped.
pub fn smoothed_rho(h1: f64, lambda: f64) -> f64 {
    (h1 / (2.0 * (1.0 - lambda)) + 0.5).clamp(0.0, 1.0)
}

/// Control under the smoothing homotopy; lambda = 1 delegates to the
/// bang-bang law.
pub fn smoothed_control(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    lambda: f64,
) -> Result<Control> {
    if lambda >= 1.0 {
        return optimal_control(pt, engine, 0.0, None);
    }
    let pv_norm = pt.p.p_v.norm();
    let h1 = switching_function(pt, engine);
    let rho = smoothed_rho(h1, lambda);
    if pv_norm == 0.0 {
        if rho > 0.0 {
            return Err(Error::UndefinedDirection { p_v_norm: pv_norm, h1 });
        }
        return Ok(Control { rho: 0.0, omega: Vector3::x() });
    }
    Ok(Control { rho, omega: pt.p.p_v / pv_norm })
}

/// Canonical right-hand side for a given throttle (thrust along p_v).
/// Returns the packed rate of (x, p).
pub fn canonical_rhs(
    pt: &ExtremalPoint,
    rho: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
) -> Result<Vec<f64>> {
    let z = pack(&pt.x, &pt.p, model);
    let mut dz = vec![0.0; model.dim()];
    rhs_into(&z, rho, engine, params, model, &mut dz)?;
    Ok(dz)
}

pub(crate) fn rhs_into(
    z: &[f64],
    rho: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    dz: &mut [f64],
) -> Result<()> {
    let (x, p) = unpack(z, model, engine.m0);
    let g = gravity(&x.r, params)?;
    let dg = gravity_jacobian(&x.r, params)?;
    let pv_norm = p.p_v.norm();

    let mut dv = coriolis(&x.v) + g;
    if rho != 0.0 {
        if pv_norm < 1e-300 {
            return Err(Error::UndefinedDirection { p_v_norm: pv_norm, h1: f64::NAN });
        }
        dv += p.p_v * (rho * engine.tau_max / (x.m * pv_norm));
    }
    let dpr = -dg * p.p_v;
    // dp_v = -p_r - dh^T p_v = -p_r + dh p_v
    let dpv = Vector3::new(
        -p.p_r.x + 2.0 * p.p_v.y,
        -p.p_r.y - 2.0 * p.p_v.x,
        -p.p_r.z,
    );

    dz[0..3].copy_from_slice(x.v.as_slice());
    dz[3..6].copy_from_slice(dv.as_slice());
    match model {
        Model::ReducedConstantMass => {
            dz[6..9].copy_from_slice(dpr.as_slice());
            dz[9..12].copy_from_slice(dpv.as_slice());
        }
        Model::FullMass => {
            dz[6] = -rho * engine.tau_max * engine.beta;
            dz[7..10].copy_from_slice(dpr.as_slice());
            dz[10..13].copy_from_slice(dpv.as_slice());
            dz[13] = rho * engine.tau_max * pv_norm / (x.m * x.m);
        }
    }
    Ok(())
}

/// Throttle law used while integrating.
#[derive(Clone, Copy, Debug)]
enum RhoLaw {
    Fixed(f64),
    Smoothed(f64),
}

struct CanonicalSys<'a> {
    engine: &'a EngineParams,
    params: &'a CrtbpParams,
    model: Model,
    law: RhoLaw,
    err: RefCell<Option<Error>>,
}

impl CanonicalSys<'_> {
    fn h1(&self, z: &[f64]) -> f64 {
        let (x, p) = unpack(z, self.model, self.engine.m0);
        self.engine.tau_max * p.p_v.norm() / x.m
            - self.engine.tau_max * self.engine.beta * p.p_m
            - 1.0
    }

    fn take_err(&self) -> Option<Error> {
        self.err.borrow_mut().take()
    }
}

impl crate::ode::OdeSystem for &CanonicalSys<'_> {
    fn eval(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let rho = match self.law {
            RhoLaw::Fixed(r) => r,
            RhoLaw::Smoothed(lambda) => smoothed_rho(self.h1(y), lambda),
        };
        if let Err(e) = rhs_into(y, rho, self.engine, self.params, self.model, dy) {
            dy.fill(0.0);
            let mut slot = self.err.borrow_mut();
            if slot.is_none() {
                *slot = Some(e);
            }
        }
    }
}

/// Options for extremal integration.
#[derive(Clone, Copy, Debug)]
pub struct IntegOptions {
    pub ode: OdeTol,
    /// |H1| tolerance at committed switch points.
    pub switch_tol: f64,
    /// Time-bracket width for switch localization.
    pub bracket_tol: f64,
    /// Minimum |H01| for a switch to count as regular.
    pub regularity_tol: f64,
    /// Abort with ChatteringSuspected beyond this many switches.
    pub max_switches: usize,
}

impl Default for IntegOptions {
    fn default() -> Self {
        IntegOptions {
            ode: OdeTol::default(),
            switch_tol: 1e-12,
            bracket_tol: 1e-13,
            regularity_tol: 1e-8,
            max_switches: 200,
        }
    }
}

/// One dense sample of the canonical flow.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub z: Vec<f64>,
}

/// An extremal trajectory: dense samples, ordered switch times, per-arc
/// thrust modes (lambda = 1), and the homotopy parameter that produced it.
#[derive(Clone, Debug)]
pub struct ExtremalTrajectory {
    pub model: Model,
    pub lambda: f64,
    pub t_f: f64,
    pub x0: State,
    pub p0: Costate,
    pub samples: Vec<TrajectorySample>,
    pub switch_times: Vec<f64>,
    pub arc_modes: Vec<ThrustMode>,
}

impl ExtremalTrajectory {
    pub fn point(&self, sample: &TrajectorySample, m_const: f64) -> ExtremalPoint {
        let (x, p) = unpack(&sample.z, self.model, m_const);
        ExtremalPoint { x, p, t: sample.t }
    }

    pub fn final_sample(&self) -> &TrajectorySample {
        self.samples.last().expect("trajectory has samples")
    }

    /// Arc boundaries as [0, t1, ..., tk, t_f].
    pub fn arc_boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.switch_times.len() + 2);
        b.push(0.0);
        b.extend_from_slice(&self.switch_times);
        b.push(self.t_f);
        b
    }

    /// Thrust mode governing time `t` (lambda = 1 trajectories).
    pub fn mode_at(&self, t: f64) -> ThrustMode {
        let mut idx = 0;
        for (i, &ts) in self.switch_times.iter().enumerate() {
            if t >= ts {
                idx = i + 1;
            }
        }
        self.arc_modes[idx]
    }

    /// L1 cost of the trajectory: integral of rho dt. Exact for bang-bang
    /// arcs; trapezoid over samples for smoothed controls.
    pub fn rho_integral(&self, engine: &EngineParams) -> f64 {
        if (self.lambda - 1.0).abs() < 1e-14 && !self.arc_modes.is_empty() {
            let b = self.arc_boundaries();
            return self
                .arc_modes
                .iter()
                .enumerate()
                .map(|(i, m)| m.rho() * (b[i + 1] - b[i]))
                .sum();
        }
        let mut acc = 0.0;
        for w in self.samples.windows(2) {
            let r0 = self.sample_rho(&w[0], engine);
            let r1 = self.sample_rho(&w[1], engine);
            acc += 0.5 * (r0 + r1) * (w[1].t - w[0].t);
        }
        acc
    }

    pub fn sample_rho(&self, s: &TrajectorySample, engine: &EngineParams) -> f64 {
        let (x, p) = unpack(&s.z, self.model, engine.m0);
        let pt = ExtremalPoint { x, p, t: s.t };
        let h1 = switching_function(&pt, engine);
        if (self.lambda - 1.0).abs() < 1e-14 {
            if self.arc_modes.is_empty() {
                if h1 > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                self.mode_at(s.t).rho()
            }
        } else {
            smoothed_rho(h1, self.lambda)
        }
    }
}

fn initial_mode(
    h1: f64,
    h01: f64,
    switch_tol: f64,
) -> ThrustMode {
    if h1 > switch_tol {
        ThrustMode::Burn
    } else if h1 < -switch_tol {
        ThrustMode::Coast
    } else if h01 > 0.0 {
        ThrustMode::Burn
    } else {
        ThrustMode::Coast
    }
}

/// Integrates the canonical flow gamma(t, p0) on [0, t_f].
///
/// For lambda = 1 the result is a bang-bang extremal with located, regular
/// switch points; for lambda < 1 the smoothed control is followed and the
/// switch list is empty. Deterministic for identical inputs and tolerances.
pub fn integrate_extremal(
    p0: &Costate,
    x0: &State,
    t_f: f64,
    lambda: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    opts: &IntegOptions,
) -> Result<ExtremalTrajectory> {
    assert!(t_f > 0.0, "t_f must be positive");
    if !x0.is_admissible(params) {
        return Err(Error::Validation {
            field: "x0".into(),
            reason: "initial state not admissible".into(),
        });
    }
    let mut traj = ExtremalTrajectory {
        model,
        lambda,
        t_f,
        x0: *x0,
        p0: *p0,
        samples: Vec::new(),
        switch_times: Vec::new(),
        arc_modes: Vec::new(),
    };
    let mut z = pack(x0, p0, model);
    traj.samples.push(TrajectorySample { t: 0.0, z: z.clone() });

    if lambda >= 1.0 {
        integrate_bang_bang(&mut traj, &mut z, engine, params, model, opts)?;
    } else {
        integrate_smoothed(&mut traj, &mut z, lambda, engine, params, model, opts)?;
    }
    Ok(traj)
}

/// Event bracket produced while scanning a step.
struct Bracket {
    t_lo: f64,
    t_hi: f64,
    /// state and time at the start of the step containing the bracket
    t_base: f64,
    y_base: Vec<f64>,
}

/// Scans one accepted step for a sign change of `g` (dense probes + end
/// point). `armed` tracks whether |g| has left the tolerance band since the
/// arc started, which suppresses re-detection of the switch we started on.
#[allow(clippy::too_many_arguments)]
fn scan_step(
    dense: &DenseStep,
    y_end: &[f64],
    g: &dyn Fn(&[f64]) -> f64,
    arm_threshold: f64,
    armed: &mut bool,
    prev: &mut (f64, f64),
    probes: usize,
    y_start: &[f64],
) -> Option<Bracket> {
    let n = y_end.len();
    let mut buf = vec![0.0; n];
    let check = |t: f64, gval: f64, prev: &mut (f64, f64), armed: &mut bool| -> Option<(f64, f64, f64, f64)> {
        let (t_a, g_a) = *prev;
        if *armed && g_a * gval < 0.0 {
            return Some((t_a, g_a, t, gval));
        }
        if !*armed && gval.abs() > arm_threshold {
            *armed = true;
        }
        *prev = (t, gval);
        None
    };
    for j in 1..probes {
        let t = dense.t0 + dense.h * (j as f64) / (probes as f64);
        dense.eval(t, &mut buf);
        let gv = g(&buf);
        if let Some((t_lo, _, t_hi, _)) = check(t, gv, prev, armed) {
            return Some(Bracket { t_lo, t_hi, t_base: dense.t0, y_base: y_start.to_vec() });
        }
    }
    let gv = g(y_end);
    if let Some((t_lo, _, t_hi, _)) = check(dense.t1(), gv, prev, armed) {
        return Some(Bracket { t_lo, t_hi, t_base: dense.t0, y_base: y_start.to_vec() });
    }
    None
}

/// Refines an event bracket by re-stepping from the bracket's base point and
/// evaluating `g` on the stepped state. Returns (t_event, state_at_event).
fn refine_event(
    sys: &CanonicalSys<'_>,
    bracket: &Bracket,
    g: &dyn Fn(&[f64]) -> f64,
    opts: &IntegOptions,
    value_tol: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = bracket.y_base.len();
    let mut k: [Vec<f64>; 7] = Default::default();
    for kk in k.iter_mut() {
        *kk = vec![0.0; n];
    }
    let mut y1 = vec![0.0; n];
    let mut work = vec![0.0; n];
    crate::ode::OdeSystem::eval(&sys, bracket.t_base, &bracket.y_base, &mut k[0]);
    if let Some(e) = sys.take_err() {
        return Err(e);
    }
    let k0 = k[0].clone();
    let tol_loose = OdeTol { abs: 1.0, rel: 1.0, max_steps: 0 };
    let mut eval_at = |t: f64, k: &mut [Vec<f64>; 7], out: Option<&mut Vec<f64>>| -> Result<f64> {
        if t == bracket.t_base {
            if let Some(o) = out {
                o.copy_from_slice(&bracket.y_base);
            }
            return Ok(g(&bracket.y_base));
        }
        k[0].copy_from_slice(&k0);
        let h = t - bracket.t_base;
        dp_step(&sys, bracket.t_base, &bracket.y_base, h, k, &mut y1, &mut work, &tol_loose);
        if let Some(e) = sys.take_err() {
            return Err(e);
        }
        let gv = g(&y1);
        if let Some(o) = out {
            o.copy_from_slice(&y1);
        }
        Ok(gv)
    };

    // bisection with secant acceleration (regula falsi safeguarded)
    let (mut a, mut fa) = (bracket.t_lo, eval_at(bracket.t_lo, &mut k, None)?);
    let (mut b, mut fb) = (bracket.t_hi, eval_at(bracket.t_hi, &mut k, None)?);
    if fa * fb > 0.0 {
        // dense-output bracket disagreed with full-accuracy evaluation; fall
        // back to the whole step as bracket
        a = bracket.t_lo.min(bracket.t_hi).min(bracket.t_base);
        fa = eval_at(a, &mut k, None)?;
        b = bracket.t_hi.max(bracket.t_lo);
        fb = eval_at(b, &mut k, None)?;
    }
    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    for iter in 0..120 {
        if (b - a).abs() <= opts.bracket_tol && best.1.abs() <= value_tol {
            break;
        }
        // alternate secant and bisection for safety
        let mut m = if iter % 2 == 0 && (fb - fa).abs() > 1e-300 {
            a - fa * (b - a) / (fb - fa)
        } else {
            0.5 * (a + b)
        };
        if !(m > a.min(b) && m < a.max(b)) {
            m = 0.5 * (a + b);
        }
        let fm = eval_at(m, &mut k, None)?;
        if fm.abs() < best.1.abs() {
            best = (m, fm);
        }
        if fa * fm <= 0.0 {
            b = m;
            fb = fm;
        } else {
            a = m;
            fa = fm;
        }
    }
    let mut y_at = vec![0.0; n];
    let gv = eval_at(best.0, &mut k, Some(&mut y_at))?;
    if gv.abs() > value_tol * 10.0 {
        return Err(Error::Validation {
            field: "event".into(),
            reason: format!("event refinement left |g| = {:.3e}", gv.abs()),
        });
    }
    Ok((best.0, y_at))
}

fn integrate_bang_bang(
    traj: &mut ExtremalTrajectory,
    z: &mut Vec<f64>,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    opts: &IntegOptions,
) -> Result<()> {
    let pt0 = traj.point(&traj.samples[0], engine.m0);
    let h1_0 = switching_function(&pt0, engine);
    let h01_0 = if pt0.p.p_v.norm() > 0.0 {
        bracket_h01(&pt0, engine, params)?
    } else {
        0.0
    };
    let mut mode = initial_mode(h1_0, h01_0, opts.switch_tol);
    traj.arc_modes.push(mode);

    let mut t = 0.0;
    while t < traj.t_f {
        let sys = CanonicalSys {
            engine,
            params,
            model,
            law: RhoLaw::Fixed(mode.rho()),
            err: RefCell::new(None),
        };
        let g = |y: &[f64]| sys.h1(y);
        let mut armed = false;
        let mut prev = (t, g(z));
        let mut bracket: Option<Bracket> = None;
        let mut y_start = z.clone();
        let mut pending: Vec<TrajectorySample> = Vec::new();
        let arm_threshold = (opts.switch_tol * 100.0).max(1e-11);

        let (t_reached, reason) = integrate(&&sys, t, z, traj.t_f, &opts.ode, |dense, y_end| {
            pending.push(TrajectorySample { t: dense.t1(), z: y_end.to_vec() });
            let found = scan_step(dense, y_end, &g, arm_threshold, &mut armed, &mut prev, 8, &y_start);
            y_start.copy_from_slice(y_end);
            if let Some(b) = found {
                bracket = Some(b);
                false
            } else {
                true
            }
        });
        if let Some(e) = sys.take_err() {
            return Err(e);
        }
        match reason {
            StopReason::StepBudget => {
                return Err(Error::StepBudgetExceeded { t: t_reached, max_steps: opts.ode.max_steps })
            }
            StopReason::Reached => {
                traj.samples.extend(pending);
                return Ok(());
            }
            StopReason::CallbackStop => {
                // drop the sample that stepped past the switch
                pending.pop();
                traj.samples.extend(pending);
                let b = bracket.take().expect("callback stop implies bracket");
                let (t_sw, y_sw) =
                    refine_event(&sys, &b, &g, opts, opts.switch_tol)?;
                let (x, p) = unpack(&y_sw, model, engine.m0);
                let pt = ExtremalPoint { x, p, t: t_sw };
                let h01 = bracket_h01(&pt, engine, params)?;
                if h01.abs() < opts.regularity_tol {
                    return Err(Error::RegularityViolation {
                        t: t_sw,
                        h01,
                        tol: opts.regularity_tol,
                    });
                }
                if traj.switch_times.len() + 1 > opts.max_switches {
                    return Err(Error::ChatteringSuspected {
                        t: t_sw,
                        max_switches: opts.max_switches,
                    });
                }
                traj.switch_times.push(t_sw);
                traj.samples.push(TrajectorySample { t: t_sw, z: y_sw.clone() });
                mode = match mode {
                    ThrustMode::Burn => ThrustMode::Coast,
                    ThrustMode::Coast => ThrustMode::Burn,
                };
                traj.arc_modes.push(mode);
                *z = y_sw;
                t = t_sw;
            }
        }
    }
    Ok(())
}

fn integrate_smoothed(
    traj: &mut ExtremalTrajectory,
    z: &mut Vec<f64>,
    lambda: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    opts: &IntegOptions,
) -> Result<()> {
    // The throttle law is continuous; integration is split where H1 crosses
    // the clamp boundaries +-(1-lambda) so the integrator never straddles a
    // derivative kink.
    let width = 1.0 - lambda;
    let mut t = 0.0;
    let mut splits = 0usize;
    while t < traj.t_f {
        let sys = CanonicalSys {
            engine,
            params,
            model,
            law: RhoLaw::Smoothed(lambda),
            err: RefCell::new(None),
        };
        let g_lo = |y: &[f64]| sys.h1(y) + width;
        let g_hi = |y: &[f64]| sys.h1(y) - width;
        let mut armed = (false, false);
        let g0 = (g_lo(z), g_hi(z));
        let mut prev = ((t, g0.0), (t, g0.1));
        let mut bracket: Option<(Bracket, bool)> = None; // bool: true = lower boundary
        let mut y_start = z.clone();
        let mut pending: Vec<TrajectorySample> = Vec::new();
        let arm = 1e-9;

        let (t_reached, reason) = integrate(&&sys, t, z, traj.t_f, &opts.ode, |dense, y_end| {
            pending.push(TrajectorySample { t: dense.t1(), z: y_end.to_vec() });
            let found_lo =
                scan_step(dense, y_end, &g_lo, arm, &mut armed.0, &mut prev.0, 5, &y_start);
            let found_hi =
                scan_step(dense, y_end, &g_hi, arm, &mut armed.1, &mut prev.1, 5, &y_start);
            y_start.copy_from_slice(y_end);
            let found = match (found_lo, found_hi) {
                (Some(a), Some(b)) => Some(if a.t_hi <= b.t_hi { (a, true) } else { (b, false) }),
                (Some(a), None) => Some((a, true)),
                (None, Some(b)) => Some((b, false)),
                (None, None) => None,
            };
            if let Some(b) = found {
                bracket = Some(b);
                false
            } else {
                true
            }
        });
        if let Some(e) = sys.take_err() {
            return Err(e);
        }
        match reason {
            StopReason::StepBudget => {
                return Err(Error::StepBudgetExceeded { t: t_reached, max_steps: opts.ode.max_steps })
            }
            StopReason::Reached => {
                traj.samples.extend(pending);
                return Ok(());
            }
            StopReason::CallbackStop => {
                pending.pop();
                traj.samples.extend(pending);
                let (b, is_lower) = bracket.take().expect("callback stop implies bracket");
                let gfun: &dyn Fn(&[f64]) -> f64 = if is_lower { &g_lo } else { &g_hi };
                let (t_sp, y_sp) = refine_event(&sys, &b, gfun, opts, 1e-9)?;
                splits += 1;
                if splits > 10_000 {
                    return Err(Error::StepBudgetExceeded { t: t_sp, max_steps: 10_000 });
                }
                traj.samples.push(TrajectorySample { t: t_sp, z: y_sp.clone() });
                *z = y_sp;
                t = t_sp;
            }
        }
    }
    Ok(())
}

/// Integrates the canonical flow with a fixed throttle between two times, in
/// either direction (no event handling). Used by tests and the variational
/// propagation.
pub fn flow_canonical_arc(
    z0: &[f64],
    t0: f64,
    t1: f64,
    rho: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    tol: &OdeTol,
) -> Result<Vec<f64>> {
    let sys = CanonicalSys {
        engine,
        params,
        model,
        law: RhoLaw::Fixed(rho),
        err: RefCell::new(None),
    };
    let mut z = z0.to_vec();
    let (t_reached, reason) = integrate(&&sys, t0, &mut z, t1, tol, |_, _| true);
    if let Some(e) = sys.take_err() {
        return Err(e);
    }
    if reason != StopReason::Reached {
        return Err(Error::StepBudgetExceeded { t: t_reached, max_steps: tol.max_steps });
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn em_params() -> CrtbpParams {
        CrtbpParams {
            mu: 1.2153e-2,
            d_star: 384_400.0,
            t_star: 3.7521e5,
            m_star: 6.045e24,
            r_body1: 6378.0 / 384_400.0,
            r_body2: 1737.4 / 384_400.0,
            m_dry: 0.1,
            singularity_floor: 1e-12,
        }
    }

    fn em_engine() -> EngineParams {
        EngineParams { tau_max: 0.732, beta: 0.0, m0: 1.0 }
    }

    fn random_point(rng: &mut ChaCha8Rng, params: &CrtbpParams) -> ExtremalPoint {
        let r = loop {
            let r = Vector3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-0.3..0.3),
            );
            if (r - params.r1()).norm() > 0.1 && (r - params.r2()).norm() > 0.05 {
                break r;
            }
        };
        ExtremalPoint {
            x: State::new(
                r,
                Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.5)),
                1.0,
            ),
            p: Costate::new(
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                rng.gen_range(-1.0..1.0),
            ),
            t: 0.0,
        }
    }

    #[test]
    fn switching_function_closed_forms() {
        let engine = em_engine();
        let mut pt = random_point(&mut ChaCha8Rng::seed_from_u64(1), &em_params());
        pt.x.m = 1.0;
        pt.p.p_v = Vector3::zeros();
        assert_relative_eq!(switching_function(&pt, &engine), -1.0);
        pt.p.p_v = Vector3::new(0.0, 1.0 / engine.tau_max, 0.0);
        assert_relative_eq!(switching_function(&pt, &engine), 0.0, epsilon = 1e-15);
        pt.p.p_v = Vector3::new(0.0, 2.0 / engine.tau_max, 0.0);
        assert_relative_eq!(switching_function(&pt, &engine), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn hamiltonian_splits_into_h0_and_h1() {
        let params = em_params();
        let engine = em_engine();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pt = random_point(&mut rng, &params);
            let omega = pt.p.p_v / pt.p.p_v.norm();
            let coast = Control { rho: 0.0, omega };
            let burn = Control { rho: 1.0, omega };
            let g = crate::dynamics::gravity(&pt.x.r, &params).unwrap();
            let h0 = pt.p.p_r.dot(&pt.x.v) + pt.p.p_v.dot(&(crate::dynamics::coriolis(&pt.x.v) + g));
            assert_relative_eq!(hamiltonian(&pt, &coast, &engine, &params).unwrap(), h0, max_relative = 1e-14);
            let h1 = switching_function(&pt, &engine);
            assert_relative_eq!(
                hamiltonian(&pt, &burn, &engine, &params).unwrap(),
                h0 + h1,
                max_relative = 1e-13,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn thrust_direction_maximizes_hamiltonian() {
        let params = em_params();
        let engine = em_engine();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pt = random_point(&mut rng, &params);
        let best = Control { rho: 1.0, omega: pt.p.p_v / pt.p.p_v.norm() };
        let h_best = hamiltonian(&pt, &best, &engine, &params).unwrap();
        for _ in 0..1000 {
            let w = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if w.norm() < 1e-6 {
                continue;
            }
            let u = Control { rho: 1.0, omega: w / w.norm() };
            assert!(hamiltonian(&pt, &u, &engine, &params).unwrap() <= h_best + 1e-14);
        }
    }

    #[test]
    fn optimal_control_cases() {
        let params = em_params();
        let engine = em_engine();
        let mut pt = random_point(&mut ChaCha8Rng::seed_from_u64(4), &params);
        pt.x.m = 1.0;
        pt.p.p_v = Vector3::new(0.0, 0.0, 3.0);
        let u = optimal_control(&pt, &engine, 1e-12, None).unwrap();
        assert_eq!(u.rho, 1.0);
        assert_relative_eq!(u.omega, Vector3::new(0.0, 0.0, 1.0));

        pt.p.p_v = Vector3::zeros();
        let u = optimal_control(&pt, &engine, 1e-12, None).unwrap();
        assert_eq!(u.rho, 0.0);

        // exact tie broken by the arc mode
        pt.p.p_v = Vector3::new(1.0 / engine.tau_max, 0.0, 0.0);
        let u = optimal_control(&pt, &engine, 1e-9, Some(ThrustMode::Burn)).unwrap();
        assert_eq!(u.rho, 1.0);
        let u = optimal_control(&pt, &engine, 1e-9, Some(ThrustMode::Coast)).unwrap();
        assert_eq!(u.rho, 0.0);

        // undefined direction only when it matters
        pt.p.p_v = Vector3::zeros();
        pt.p.p_m = -2.0 / engine.tau_max; // H1 = +1 with beta > 0
        let engine_b = EngineParams { beta: 1.0, ..engine };
        assert!(matches!(
            optimal_control(&pt, &engine_b, 1e-12, None),
            Err(Error::UndefinedDirection { .. })
        ));
    }

    #[test]
    fn smoothed_control_limits() {
        let params = em_params();
        let engine = em_engine();
        let mut pt = random_point(&mut ChaCha8Rng::seed_from_u64(5), &params);
        // lambda = 0, H1 = 0 -> rho = 1/2
        pt.x.m = 1.0;
        pt.p.p_v = Vector3::new(1.0 / engine.tau_max, 0.0, 0.0);
        let u = smoothed_control(&pt, &engine, 0.0).unwrap();
        assert_relative_eq!(u.rho, 0.5, epsilon = 1e-14);
        // lambda = 0.5, H1 <= -1 -> clamped to 0
        pt.p.p_v = Vector3::zeros();
        let u = smoothed_control(&pt, &engine, 0.5).unwrap();
        assert_eq!(u.rho, 0.0);
        // monotone nondecreasing and continuous in H1 for each lambda < 1
        for lambda in [0.0, 0.3, 0.7, 0.95] {
            let mut prev = -1.0;
            let mut h1 = -2.0;
            while h1 <= 2.0 {
                let rho = smoothed_rho(h1, lambda);
                assert!((0.0..=1.0).contains(&rho));
                assert!(rho + 1e-15 >= prev);
                prev = rho;
                h1 += 1e-3;
            }
        }
    }

    #[test]
    fn canonical_rhs_matches_hamiltonian_gradient() {
        let params = em_params();
        let engine = EngineParams { tau_max: 0.732, beta: 0.4, m0: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let step = 1e-6;
        for _ in 0..100 {
            let pt = random_point(&mut rng, &params);
            for rho in [0.0, 1.0] {
                let dz = canonical_rhs(&pt, rho, &engine, &params, Model::FullMass).unwrap();
                // H at fixed rho and optimal omega, as a function of packed z
                let h = |z: &[f64]| -> f64 {
                    let (x, p) = unpack(z, Model::FullMass, engine.m0);
                    let g = crate::dynamics::gravity(&x.r, &params).unwrap();
                    let h0 = p.p_r.dot(&x.v) + p.p_v.dot(&(crate::dynamics::coriolis(&x.v) + g));
                    h0 + rho
                        * (engine.tau_max * p.p_v.norm() / x.m
                            - engine.tau_max * engine.beta * p.p_m
                            - 1.0)
                };
                let z0 = pack(&pt.x, &pt.p, Model::FullMass);
                let n = 7;
                for j in 0..n {
                    let mut zp = z0.clone();
                    let mut zm = z0.clone();
                    zp[n + j] += step;
                    zm[n + j] -= step;
                    let dh_dpj = (h(&zp) - h(&zm)) / (2.0 * step);
                    assert_relative_eq!(dz[j], dh_dpj, max_relative = 1e-6, epsilon = 1e-8);
                    let mut zp = z0.clone();
                    let mut zm = z0.clone();
                    zp[j] += step;
                    zm[j] -= step;
                    let dh_dxj = (h(&zp) - h(&zm)) / (2.0 * step);
                    assert_relative_eq!(dz[n + j], -dh_dxj, max_relative = 1e-6, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn coast_freezes_mass_costate_and_reduced_matches_full() {
        let params = em_params();
        let engine = em_engine(); // beta = 0
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pt = random_point(&mut rng, &params);
            let coast = canonical_rhs(&pt, 0.0, &engine, &params, Model::FullMass).unwrap();
            assert_eq!(coast[13], 0.0); // p_m frozen on coasts
            assert_eq!(coast[6], 0.0); // mass frozen when beta = 0
            let full = canonical_rhs(&pt, 1.0, &engine, &params, Model::FullMass).unwrap();
            let reduced = canonical_rhs(&pt, 1.0, &engine, &params, Model::ReducedConstantMass).unwrap();
            for j in 0..6 {
                assert_relative_eq!(full[j], reduced[j], max_relative = 1e-15);
                assert_relative_eq!(full[7 + j], reduced[6 + j], max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn pure_coast_has_no_switches() {
        let params = em_params();
        let engine = em_engine();
        let x0 = State::new(Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.0, 0.8, 0.0), 1.0);
        let p0 = Costate::new(Vector3::new(0.01, 0.0, 0.0), Vector3::zeros(), 0.0);
        let traj = integrate_extremal(
            &p0,
            &x0,
            0.5,
            1.0,
            &engine,
            &params,
            Model::ReducedConstantMass,
            &IntegOptions::default(),
        )
        .unwrap();
        assert!(traj.switch_times.is_empty());
        assert_eq!(traj.arc_modes, vec![ThrustMode::Coast]);
        assert_eq!(traj.rho_integral(&engine), 0.0);
    }

    #[test]
    fn two_body_retrograde_circle_closes() {
        // mu = 0, retrograde unit circular orbit: closed-form
        // x(t) = (cos 2t, -sin 2t), rotating-frame period pi
        let mut params = em_params();
        params.mu = 0.0;
        let engine = em_engine();
        let x0 = State::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, -2.0, 0.0), 1.0);
        let p0 = Costate::new(Vector3::zeros(), Vector3::zeros(), 0.0);
        let t_f = std::f64::consts::PI;
        let traj = integrate_extremal(
            &p0,
            &x0,
            t_f,
            1.0,
            &engine,
            &params,
            Model::ReducedConstantMass,
            &IntegOptions::default(),
        )
        .unwrap();
        let end = traj.point(traj.final_sample(), engine.m0);
        assert!((end.x.r - x0.r).norm() < 1e-9, "position error {:.3e}", (end.x.r - x0.r).norm());
        assert!((end.x.v - x0.v).norm() < 1e-9);
        // mid-course closed form
        for s in traj.samples.iter().step_by(7) {
            let pt = traj.point(s, engine.m0);
            let expect = Vector3::new((2.0 * s.t).cos(), -(2.0 * s.t).sin(), 0.0);
            assert!((pt.x.r - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn forward_backward_roundtrip() {
        let params = em_params();
        let engine = em_engine();
        let x0 = State::new(Vector3::new(0.4, 0.1, 0.0), Vector3::new(0.1, 1.2, 0.0), 1.0);
        let p0 = Costate::new(
            Vector3::new(0.2, -0.1, 0.0),
            Vector3::new(1.0, 0.7, 0.1),
            0.0,
        );
        let model = Model::ReducedConstantMass;
        let tol = crate::ode::OdeTol::default();
        let z0 = pack(&x0, &p0, model);
        let z1 = flow_canonical_arc(&z0, 0.0, 0.8, 1.0, &engine, &params, model, &tol).unwrap();
        let z0_back = flow_canonical_arc(&z1, 0.8, 0.0, 1.0, &engine, &params, model, &tol).unwrap();
        for j in 0..z0.len() {
            assert!((z0_back[j] - z0[j]).abs() < 1e-8, "component {j}");
        }
    }
}
