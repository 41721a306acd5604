//! Poisson-bracket ladder along extremals, singular-submanifold membership,
//! and chattering diagnosis.
//!
//! The ladder entries are the iterated brackets of the drift and switching
//! Hamiltonians evaluated in closed form; each entry equals the time
//! derivative of the previous one along a coast arc, which is what the test
//! suite checks them against (finite differences of the integrated flow).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    coriolis_matrix, gravity_hessian_form, gravity_jacobian, CrtbpParams, EngineParams,
};
use crate::error::{Error, Result};
use crate::extremal::{ExtremalPoint, ExtremalTrajectory};

/// The bracket ladder evaluated at one extremal point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketLadder {
    pub h1: f64,
    pub h01: f64,
    pub h001: f64,
    pub h0001: f64,
    pub h10001: f64,
}

fn primer(pt: &ExtremalPoint) -> Result<(Vector3<f64>, f64)> {
    let u = pt.p.p_v.norm();
    if u == 0.0 {
        return Err(Error::UndefinedDirection { p_v_norm: 0.0, h1: f64::NAN });
    }
    Ok((pt.p.p_v, u))
}

/// H01 = -tau p_v^T (p_r + dh p_v) / (m |p_v|): the time derivative of the
/// switching function along any arc.
pub fn bracket_h01(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    _params: &CrtbpParams,
) -> Result<f64> {
    let (pv, u) = primer(pt)?;
    let a = coriolis_matrix();
    let w = pt.p.p_r + a * pv;
    Ok(-engine.tau_max * pv.dot(&w) / (pt.x.m * u))
}

/// H001 = d/dt H01 along a coast arc, in closed form.
pub fn bracket_h001(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<f64> {
    let (pv, u) = primer(pt)?;
    let pr = pt.p.p_r;
    let g = gravity_jacobian(&pt.x.r, params)?;
    let a_pv = coriolis_matrix() * pv;
    let s = pv.dot(&pr);
    let q = pv.dot(&(g * pv)) + pr.norm_squared() - pr.dot(&a_pv) - s * s / (u * u);
    Ok(engine.tau_max * q / (pt.x.m * u))
}

/// H0001 = d/dt H001 along a coast arc, in closed form.
pub fn bracket_h0001(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<f64> {
    let (pv, u) = primer(pt)?;
    let pr = pt.p.p_r;
    let v = pt.x.v;
    let g = gravity_jacobian(&pt.x.r, params)?;
    let amat = coriolis_matrix();
    let a_pv = amat * pv;
    let a2_pv = amat * a_pv;
    let s = pv.dot(&pr);
    let a = pr.dot(&a_pv);
    let g_pp = pv.dot(&(g * pv));
    let q = g_pp + pr.norm_squared() - a - s * s / (u * u);
    let d2g_pv_pv = gravity_hessian_form(&pt.x.r, &pv, &pv, params)?;
    let val = d2g_pv_pv.dot(&v) - 4.0 * pr.dot(&(g * pv)) + 3.0 * a_pv.dot(&(g * pv))
        - pr.dot(&a2_pv)
        + 3.0 * (s / (u * u)) * q;
    Ok(engine.tau_max * val / (pt.x.m * u))
}

/// H10001 via the d2g contraction: tau [p_v^T d2g(r) p_v] . p_v / (m^2 |p_v|^2).
pub fn bracket_h10001_contraction(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<f64> {
    let (pv, u) = primer(pt)?;
    let d2g_pv_pv = gravity_hessian_form(&pt.x.r, &pv, &pv, params)?;
    Ok(engine.tau_max * d2g_pv_pv.dot(&pv) / (pt.x.m * pt.x.m * u * u))
}

/// H10001 in the angle closed form:
/// 3 tau (|p_v|/m^2) [ mu cos(a2)(3 - 5cos^2 a2)/|r-r2|^4
///                   + (1-mu) cos(a1)(3 - 5cos^2 a1)/|r-r1|^4 ].
pub fn bracket_h10001(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<f64> {
    let (pv, u) = primer(pt)?;
    let mut acc = 0.0;
    for (body, mt) in [(params.r1(), 1.0 - params.mu), (params.r2(), params.mu)] {
        if mt == 0.0 {
            continue;
        }
        let q = pt.x.r - body;
        let d = q.norm();
        if d <= params.singularity_floor {
            return Err(Error::Singularity {
                body: if mt == params.mu { 2 } else { 1 },
                dist: d,
                floor: params.singularity_floor,
            });
        }
        let c = pv.dot(&q) / (u * d);
        acc += mt * c * (3.0 - 5.0 * c * c) / d.powi(4);
    }
    Ok(3.0 * engine.tau_max * u / (pt.x.m * pt.x.m) * acc)
}

/// Evaluates the full ladder at a point.
pub fn bracket_ladder(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    params: &CrtbpParams,
) -> Result<BracketLadder> {
    Ok(BracketLadder {
        h1: crate::extremal::switching_function(pt, engine),
        h01: bracket_h01(pt, engine, params)?,
        h001: bracket_h001(pt, engine, params)?,
        h0001: bracket_h0001(pt, engine, params)?,
        h10001: bracket_h10001(pt, engine, params)?,
    })
}

/// Distance record to the singular submanifold S.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub h1_abs: f64,
    pub h01_abs: f64,
    pub h001_abs: f64,
    pub h0001_abs: f64,
    /// Signed Kelley quantity.
    pub h10001: f64,
    /// All four magnitudes at or below tol and H10001 <= 0.
    pub member: bool,
}

impl SurfaceDistance {
    /// Largest of the four ladder magnitudes.
    pub fn max_magnitude(&self) -> f64 {
        self.h1_abs.max(self.h01_abs).max(self.h001_abs).max(self.h0001_abs)
    }
}

/// Default tolerance on ladder magnitudes for S membership.
pub const DEFAULT_SURFACE_TOL: f64 = 1e-6;

/// Ladder magnitudes, the signed Kelley quantity, and S membership.
pub fn singular_surface_distance(
    pt: &ExtremalPoint,
    engine: &EngineParams,
    params: &CrtbpParams,
    tol: f64,
) -> Result<SurfaceDistance> {
    let ladder = bracket_ladder(pt, engine, params)?;
    let d = SurfaceDistance {
        h1_abs: ladder.h1.abs(),
        h01_abs: ladder.h01.abs(),
        h001_abs: ladder.h001.abs(),
        h0001_abs: ladder.h0001.abs(),
        h10001: ladder.h10001,
        member: ladder.h1.abs() <= tol
            && ladder.h01.abs() <= tol
            && ladder.h001.abs() <= tol
            && ladder.h0001.abs() <= tol
            && ladder.h10001 <= 0.0,
    };
    Ok(d)
}

/// Chattering diagnosis for a computed bang-bang extremal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatteringDiagnosis {
    pub flagged: bool,
    /// Index range (into switch_times) of the accumulating run, if any.
    pub suspect_switches: Option<(usize, usize)>,
    /// Closest approach to the singular surface over the suspect segment.
    pub nearest_surface: Option<SurfaceDistance>,
}

/// Number of consecutive gap contractions (ratio < 1/2) that flags a
/// trajectory.
const CHATTER_WINDOW: usize = 6;

/// Flags switch-time accumulation by a ratio test on successive inter-switch
/// gaps: a run of at least six consecutive ratios below 1/2.
pub fn diagnose_chattering(
    traj: &ExtremalTrajectory,
    engine: &EngineParams,
    params: &CrtbpParams,
    surface_tol: f64,
) -> ChatteringDiagnosis {
    let ts = &traj.switch_times;
    if ts.len() < CHATTER_WINDOW + 2 {
        return ChatteringDiagnosis { flagged: false, suspect_switches: None, nearest_surface: None };
    }
    let gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    // a run of contracting gaps in either time direction (switch times can
    // accumulate entering or leaving a singular junction)
    let scan = |shrinking_forward: bool| -> Option<(usize, usize)> {
        let mut run_start = None;
        let mut run_len = 0usize;
        for i in 0..gaps.len() - 1 {
            let contracting = if shrinking_forward {
                gaps[i + 1] < 0.5 * gaps[i]
            } else {
                gaps[i] < 0.5 * gaps[i + 1]
            };
            if contracting {
                if run_len == 0 {
                    run_start = Some(i);
                }
                run_len += 1;
                if run_len >= CHATTER_WINDOW {
                    return Some((run_start.unwrap(), i + 1));
                }
            } else {
                run_len = 0;
                run_start = None;
            }
        }
        None
    };
    let found = scan(true).or_else(|| scan(false));
    let Some((lo, hi)) = found else {
        return ChatteringDiagnosis { flagged: false, suspect_switches: None, nearest_surface: None };
    };
    // closest ladder approach over samples in the suspect time window
    let (t_lo, t_hi) = (ts[lo], ts[hi.min(ts.len() - 1)]);
    let mut nearest: Option<SurfaceDistance> = None;
    for s in &traj.samples {
        if s.t < t_lo || s.t > t_hi {
            continue;
        }
        let pt = traj.point(s, engine.m0);
        if let Ok(d) = singular_surface_distance(&pt, engine, params, surface_tol) {
            let better = match &nearest {
                None => true,
                Some(best) => d.max_magnitude() < best.max_magnitude(),
            };
            if better {
                nearest = Some(d);
            }
        }
    }
    ChatteringDiagnosis {
        flagged: true,
        suspect_switches: Some((lo, hi)),
        nearest_surface: nearest,
    }
}
