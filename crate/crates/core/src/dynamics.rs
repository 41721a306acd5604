//! Nondimensional CRTBP dynamics in the rotating frame.
//!
//! Conventions: lengths in units of the primary separation `d_star`, time in
//! units of `t_star` so the frame rotation rate is 1, masses of the primaries
//! in units of `m_star`. The primaries sit at `r1 = (-mu, 0, 0)` and
//! `r2 = (1-mu, 0, 0)`. Spacecraft mass and thrust are scaled by the
//! spacecraft's own reference mass (see [`EngineParams`]), which leaves every
//! dynamical quantity (tau/m accelerations, beta*tau mass flow) unchanged.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gravitational constant in km^3 / (kg s^2).
pub const GRAVITATIONAL_CONSTANT: f64 = 6.67430e-20;

/// Nondimensional three-body constants plus admissibility radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrtbpParams {
    /// Mass ratio mu = m2 / (m1 + m2), 0 < mu < 1/2.
    pub mu: f64,
    /// Length unit, km.
    pub d_star: f64,
    /// Time unit, s.
    pub t_star: f64,
    /// Mass unit of the primaries, kg.
    pub m_star: f64,
    /// Nondimensional radius of the first (heavier) primary.
    pub r_body1: f64,
    /// Nondimensional radius of the second primary.
    pub r_body2: f64,
    /// Nondimensional spacecraft dry mass (same unit as `EngineParams::m0`).
    pub m_dry: f64,
    /// Hard guard on distance to either primary before raising an error.
    #[serde(default = "default_singularity_floor")]
    pub singularity_floor: f64,
}

fn default_singularity_floor() -> f64 {
    1e-12
}

impl CrtbpParams {
    /// Builds the nondimensional parameter set from physical inputs,
    /// recomputing the time unit from Kepler's third law.
    pub fn from_physical(
        mu: f64,
        d_star_km: f64,
        m_star_kg: f64,
        r_body1_km: f64,
        r_body2_km: f64,
        m_dry: f64,
    ) -> Self {
        let t_star = (d_star_km.powi(3) / (GRAVITATIONAL_CONSTANT * m_star_kg)).sqrt();
        CrtbpParams {
            mu,
            d_star: d_star_km,
            t_star,
            m_star: m_star_kg,
            r_body1: r_body1_km / d_star_km,
            r_body2: r_body2_km / d_star_km,
            m_dry,
            singularity_floor: default_singularity_floor(),
        }
    }

    /// Position of the heavier primary.
    pub fn r1(&self) -> Vector3<f64> {
        Vector3::new(-self.mu, 0.0, 0.0)
    }

    /// Position of the lighter primary.
    pub fn r2(&self) -> Vector3<f64> {
        Vector3::new(1.0 - self.mu, 0.0, 0.0)
    }

    /// Offsets and distances to the primaries; the singularity guard only
    /// applies to bodies with positive mass (mu = 0 leaves a massless ghost
    /// at r2 whose term vanishes).
    fn guard(&self, r: &Vector3<f64>) -> Result<(Vector3<f64>, f64, Vector3<f64>, f64)> {
        let q1 = r - self.r1();
        let q2 = r - self.r2();
        let d1 = q1.norm();
        let d2 = q2.norm();
        if d1 <= self.singularity_floor {
            return Err(Error::Singularity { body: 1, dist: d1, floor: self.singularity_floor });
        }
        if self.mu > 0.0 && d2 <= self.singularity_floor {
            return Err(Error::Singularity { body: 2, dist: d2, floor: self.singularity_floor });
        }
        Ok((q1, d1, q2, d2))
    }
}

/// Nondimensional engine constants. `tau_max` and `m0` share an arbitrary
/// spacecraft mass unit; only tau/m and beta*tau enter the dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    /// Maximum thrust magnitude.
    pub tau_max: f64,
    /// Mass-flow slope, >= 0 (0 for the constant-mass model).
    pub beta: f64,
    /// Initial spacecraft mass.
    pub m0: f64,
}

/// Spacecraft state x = (r, v, m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    pub m: f64,
}

impl State {
    pub fn new(r: Vector3<f64>, v: Vector3<f64>, m: f64) -> Self {
        State { r, v, m }
    }

    /// Membership in the admissible set: outside both body radii, mass at or
    /// above dry mass. A massless secondary (mu = 0) has no exclusion zone.
    pub fn is_admissible(&self, params: &CrtbpParams) -> bool {
        (self.r - params.r1()).norm() > params.r_body1
            && (params.mu == 0.0 || (self.r - params.r2()).norm() > params.r_body2)
            && self.m >= params.m_dry
    }
}

/// Rate of a state under the controlled vector field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateRate {
    pub dr: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dm: f64,
}

/// Control u = (rho, omega) with throttle in [0,1] and a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Control {
    pub rho: f64,
    pub omega: Vector3<f64>,
}

/// Constant Coriolis matrix dh: h(v) = dh * v.
pub fn coriolis_matrix() -> Matrix3<f64> {
    Matrix3::new(0.0, 2.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0)
}

/// Coriolis term h(v) = (2 v_y, -2 v_x, 0).
pub fn coriolis(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(2.0 * v.y, -2.0 * v.x, 0.0)
}

/// Rotating-frame gravity-plus-centrifugal field
/// g(r) = diag(1,1,0) r - (1-mu)(r-r1)/|r-r1|^3 - mu (r-r2)/|r-r2|^3.
pub fn gravity(r: &Vector3<f64>, params: &CrtbpParams) -> Result<Vector3<f64>> {
    let (q1, d1, q2, d2) = params.guard(r)?;
    let mut out = Vector3::new(r.x, r.y, 0.0) - q1 * ((1.0 - params.mu) / d1.powi(3));
    if params.mu > 0.0 {
        out -= q2 * (params.mu / d2.powi(3));
    }
    Ok(out)
}

/// Derivative dg(r), a symmetric 3x3 matrix.
pub fn gravity_jacobian(r: &Vector3<f64>, params: &CrtbpParams) -> Result<Matrix3<f64>> {
    let (q1, d1, q2, d2) = params.guard(r)?;
    let mut out = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
    for (q, d, mt) in [(q1, d1, 1.0 - params.mu), (q2, d2, params.mu)] {
        if mt == 0.0 {
            continue;
        }
        let d3 = d.powi(3);
        let d5 = d3 * d * d;
        out -= (Matrix3::identity() / d3 - (q * q.transpose()) * (3.0 / d5)) * mt;
    }
    Ok(out)
}

/// Bilinear action of the second derivative of gravity: the 3-vector with
/// components sum_jk d2g_i/dr_j dr_k a_j b_k. Symmetric in (a, b).
pub fn gravity_hessian_form(
    r: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    params: &CrtbpParams,
) -> Result<Vector3<f64>> {
    let (q1, d1, q2, d2) = params.guard(r)?;
    let mut out = Vector3::zeros();
    for (q, d, mt) in [(q1, d1, 1.0 - params.mu), (q2, d2, params.mu)] {
        if mt == 0.0 {
            continue;
        }
        let d5 = d.powi(5);
        let d7 = d5 * d * d;
        let qa = q.dot(a);
        let qb = q.dot(b);
        out += (q * a.dot(b) + a * qb + b * qa) * (3.0 * mt / d5) - q * (15.0 * mt * qa * qb / d7);
    }
    Ok(out)
}

/// One-index contraction of d2g with `a`: the symmetric matrix M(a) with
/// M(a) b = gravity_hessian_form(r, a, b).
pub fn gravity_hessian_matrix(
    r: &Vector3<f64>,
    a: &Vector3<f64>,
    params: &CrtbpParams,
) -> Result<Matrix3<f64>> {
    let (q1, d1, q2, d2) = params.guard(r)?;
    let mut out = Matrix3::zeros();
    for (q, d, mt) in [(q1, d1, 1.0 - params.mu), (q2, d2, params.mu)] {
        if mt == 0.0 {
            continue;
        }
        let d5 = d.powi(5);
        let d7 = d5 * d * d;
        let qa = q.dot(a);
        out += (Matrix3::identity() * qa + q * a.transpose() + a * q.transpose()) * (3.0 * mt / d5)
            - (q * q.transpose()) * (15.0 * mt * qa / d7);
    }
    Ok(out)
}

/// Drift field f0(x) = (v, h(v) + g(r), 0).
pub fn drift_field(x: &State, params: &CrtbpParams) -> Result<StateRate> {
    Ok(StateRate { dr: x.v, dv: coriolis(&x.v) + gravity(&x.r, params)?, dm: 0.0 })
}

/// Thrust field f1(x, omega) = (0, tau_max omega / m, -tau_max beta).
pub fn thrust_field(x: &State, omega: &Vector3<f64>, engine: &EngineParams, params: &CrtbpParams) -> Result<StateRate> {
    if x.m <= params.m_dry {
        return Err(Error::DegenerateMass { m: x.m, m_dry: params.m_dry });
    }
    Ok(StateRate {
        dr: Vector3::zeros(),
        dv: omega * (engine.tau_max / x.m),
        dm: -engine.tau_max * engine.beta,
    })
}

/// X-coordinate of a collinear equilibrium: bisection on the x-component of
/// `gravity` along the X-axis over the given bracket.
pub fn collinear_equilibrium_x(params: &CrtbpParams, lo: f64, hi: f64) -> Result<f64> {
    let gx = |x: f64| -> Result<f64> {
        Ok(gravity(&Vector3::new(x, 0.0, 0.0), params)?.x)
    };
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (gx(a)?, gx(b)?);
    assert!(fa * fb < 0.0, "bracket does not straddle a root");
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let fm = gx(mid)?;
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
        if (b - a).abs() < 1e-15 {
            break;
        }
    }
    let _ = fb;
    Ok(0.5 * (a + b))
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

    fn random_admissible_r(rng: &mut ChaCha8Rng, params: &CrtbpParams) -> Vector3<f64> {
        loop {
            let r = Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..0.5),
            );
            if (r - params.r1()).norm() > 3.0 * params.r_body1
                && (r - params.r2()).norm() > 3.0 * params.r_body2
            {
                return r;
            }
        }
    }

    #[test]
    fn coriolis_matches_matrix_rows() {
        assert_eq!(coriolis(&Vector3::zeros()), Vector3::zeros());
        assert_eq!(coriolis(&Vector3::new(1.0, 0.0, 0.0)), Vector3::new(0.0, -2.0, 0.0));
        assert_eq!(coriolis(&Vector3::new(0.0, 1.0, 5.0)), Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn coriolis_is_linear() {
        let a = Vector3::new(0.3, -1.2, 0.7);
        let b = Vector3::new(-2.0, 0.5, 1.1);
        let lhs = coriolis(&(a * 2.5 + b * -1.75));
        let rhs = coriolis(&a) * 2.5 + coriolis(&b) * -1.75;
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gravity_vanishes_on_unit_circle_for_mu_zero() {
        let mut p = em_params();
        p.mu = 0.0;
        let g = gravity(&Vector3::new(1.0, 0.0, 0.0), &p).unwrap();
        assert!(g.norm() < 1e-15, "{g:?}");
    }

    #[test]
    fn gravity_vanishes_at_l1() {
        let p = em_params();
        // L1 lies between the primaries.
        let x_l1 = collinear_equilibrium_x(&p, 0.5, 1.0 - p.mu - 2.0 * p.r_body2).unwrap();
        let g = gravity(&Vector3::new(x_l1, 0.0, 0.0), &p).unwrap();
        assert!(g.norm() < 1e-12, "residual gravity at L1: {g:?}");
        assert!(x_l1 > 0.8 && x_l1 < 1.0 - p.mu);
    }

    #[test]
    fn gravity_errors_at_body() {
        let p = em_params();
        let err = gravity(&p.r2(), &p).unwrap_err();
        assert!(matches!(err, Error::Singularity { body: 2, .. }));
    }

    #[test]
    fn drift_zero_at_equilibrium_and_mass_row_zero() {
        let p = em_params();
        let x_l1 = collinear_equilibrium_x(&p, 0.5, 1.0 - p.mu - 2.0 * p.r_body2).unwrap();
        let x = State::new(Vector3::new(x_l1, 0.0, 0.0), Vector3::zeros(), 1.0);
        let rate = drift_field(&x, &p).unwrap();
        assert!(rate.dr.norm() < 1e-15);
        assert!(rate.dv.norm() < 1e-12);
        assert_eq!(rate.dm, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let x = State::new(
                random_admissible_r(&mut rng, &p),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0),
                1.0,
            );
            assert_eq!(drift_field(&x, &p).unwrap().dm, 0.0);
        }
    }

    #[test]
    fn thrust_field_basics() {
        let p = em_params();
        let engine = EngineParams { tau_max: 0.7, beta: 0.0, m0: 1.0 };
        let x = State::new(Vector3::new(0.5, 0.0, 0.0), Vector3::zeros(), 1.0);
        let rate = thrust_field(&x, &Vector3::new(1.0, 0.0, 0.0), &engine, &p).unwrap();
        assert_eq!(rate.dm, 0.0);
        assert_relative_eq!(rate.dv.x, 0.7, max_relative = 1e-15);

        let x_low = State::new(x.r, x.v, p.m_dry / 2.0);
        let err = thrust_field(&x_low, &Vector3::new(1.0, 0.0, 0.0), &engine, &p).unwrap_err();
        assert!(matches!(err, Error::DegenerateMass { .. }));
    }

    #[test]
    fn gravity_jacobian_matches_finite_differences() {
        let p = em_params();
        let step = 1e-6;
        let mut check = |r: Vector3<f64>| {
            let jac = gravity_jacobian(&r, &p).unwrap();
            for j in 0..3 {
                let mut rp = r;
                let mut rm = r;
                rp[j] += step;
                rm[j] -= step;
                let col =
                    (gravity(&rp, &p).unwrap() - gravity(&rm, &p).unwrap()) / (2.0 * step);
                for i in 0..3 {
                    assert_relative_eq!(jac[(i, j)], col[i], max_relative = 1e-6, epsilon = 1e-9);
                }
            }
            // exact symmetry
            assert_eq!(jac, jac.transpose());
        };
        check(Vector3::new(0.5, 0.2, 0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            check(random_admissible_r(&mut rng, &p));
        }
    }

    #[test]
    fn gravity_jacobian_two_body_closed_form() {
        let mut p = em_params();
        p.mu = 0.0;
        let jac = gravity_jacobian(&Vector3::new(1.0, 0.0, 0.0), &p).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(3.0, 0.0, -1.0));
        assert_relative_eq!(jac, expected, epsilon = 1e-14);
    }

    #[test]
    fn hessian_form_matches_nested_finite_differences() {
        let p = em_params();
        let r = Vector3::new(0.45, 0.3, -0.15);
        let a = Vector3::new(0.2, -0.7, 0.4);
        let b = Vector3::new(-1.1, 0.3, 0.9);
        let form = gravity_hessian_form(&r, &a, &b, &p).unwrap();
        // FD of the Jacobian contracted with a, then with b.
        let step = 1e-5;
        let mut fd = Vector3::zeros();
        for k in 0..3 {
            let mut rp = r;
            let mut rm = r;
            rp[k] += step;
            rm[k] -= step;
            let dj = (gravity_jacobian(&rp, &p).unwrap() - gravity_jacobian(&rm, &p).unwrap())
                / (2.0 * step);
            fd += dj * a * b[k];
        }
        assert_relative_eq!(form, fd, max_relative = 1e-4);
        // symmetry in (a, b) and linearity in a
        let swapped = gravity_hessian_form(&r, &b, &a, &p).unwrap();
        assert_relative_eq!(form, swapped, max_relative = 1e-14);
        let zero = gravity_hessian_form(&r, &Vector3::zeros(), &b, &p).unwrap();
        assert_eq!(zero, Vector3::zeros());
    }

    #[test]
    fn hessian_matrix_contracts_to_form() {
        let p = em_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r = random_admissible_r(&mut rng, &p);
            let a = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let b = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let m = gravity_hessian_matrix(&r, &a, &p).unwrap();
            let f = gravity_hessian_form(&r, &a, &b, &p).unwrap();
            assert_relative_eq!(m * b, f, max_relative = 1e-13, epsilon = 1e-16);
            assert_relative_eq!(m, m.transpose(), max_relative = 1e-13, epsilon = 1e-16);
        }
    }

    #[test]
    fn drift_divergence_vanishes() {
        // trace of the state Jacobian of f0 at random admissible states
        let p = em_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let step = 1e-6;
        for _ in 0..100 {
            let x = State::new(
                random_admissible_r(&mut rng, &p),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)),
                1.0,
            );
            let mut trace = 0.0;
            for j in 0..6 {
                let mut xp = x;
                let mut xm = x;
                if j < 3 {
                    xp.r[j] += step;
                    xm.r[j] -= step;
                } else {
                    xp.v[j - 3] += step;
                    xm.v[j - 3] -= step;
                }
                let rp = drift_field(&xp, &p).unwrap();
                let rm = drift_field(&xm, &p).unwrap();
                let diff = if j < 3 {
                    (rp.dr[j] - rm.dr[j], rp.dv[j] - rm.dv[j])
                } else {
                    (rp.dr[j - 3] - rm.dr[j - 3], rp.dv[j - 3] - rm.dv[j - 3])
                };
                trace += if j < 3 { diff.0 } else { diff.1 } / (2.0 * step);
            }
            assert!(trace.abs() < 1e-12, "divergence {trace:.3e}");
        }
    }

    #[test]
    fn kepler_time_unit_matches_paper_value() {
        let p = CrtbpParams::from_physical(1.2153e-2, 384_400.0, 6.045e24, 6378.0, 1737.4, 0.1);
        assert_relative_eq!(p.t_star, 3.7521e5, max_relative = 1e-4);
    }
}
