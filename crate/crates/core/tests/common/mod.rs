//! Shared fixtures and independent finite-difference oracles for the
//! integration-test suite. Everything here deliberately avoids the closed
//! forms under test.

#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use l1crtbp::dynamics::{CrtbpParams, EngineParams, State};
use l1crtbp::extremal::{
    canonical_rhs, pack, unpack, Costate, ExtremalPoint, Model,
};

/// Earth-Moon frame constants used throughout the suite.
pub fn em_params() -> CrtbpParams {
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

/// The EMS engine: 1 N on 500 kg, constant mass.
pub fn em_engine() -> EngineParams {
    let t_star: f64 = 3.7521e5;
    let tau = 1.0 * t_star * t_star / (500.0 * 3.844e8);
    EngineParams { tau_max: tau, beta: 0.0, m0: 1.0 }
}

/// Two-body (mu = 0) frame for the toy problems.
pub fn twobody_params() -> CrtbpParams {
    CrtbpParams { mu: 0.0, ..em_params() }
}

pub fn random_point(rng: &mut ChaCha8Rng, params: &CrtbpParams) -> ExtremalPoint {
    let r = loop {
        let r = Vector3::new(
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-0.3..0.3),
        );
        if (r - params.r1()).norm() > 0.12 && (r - params.r2()).norm() > 0.06 {
            break r;
        }
    };
    ExtremalPoint {
        x: State::new(
            r,
            Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..0.5),
            ),
            1.0,
        ),
        p: Costate::new(
            Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
            Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
            rng.gen_range(-1.0..1.0),
        ),
        t: 0.0,
    }
}

pub fn point_from_z(z: &[f64], model: Model, m0: f64) -> ExtremalPoint {
    let (x, p) = unpack(z, model, m0);
    ExtremalPoint { x, p, t: 0.0 }
}

/// d/dt of `f` along the canonical flow with fixed throttle, by a central
/// RK4 finite difference. Independent of the dense integrator.
pub fn flow_derivative(
    f: &dyn Fn(&ExtremalPoint) -> f64,
    pt: &ExtremalPoint,
    rho: f64,
    engine: &EngineParams,
    params: &CrtbpParams,
    model: Model,
    h: f64,
) -> f64 {
    let step = |z: &[f64], dt: f64| -> Vec<f64> {
        let rk = |z: &[f64]| -> Vec<f64> {
            let pt = point_from_z(z, model, engine.m0);
            canonical_rhs(&pt, rho, engine, params, model).unwrap()
        };
        let k1 = rk(z);
        let z2: Vec<f64> = z.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
        let k2 = rk(&z2);
        let z3: Vec<f64> = z.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
        let k3 = rk(&z3);
        let z4: Vec<f64> = z.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
        let k4 = rk(&z4);
        z.iter()
            .enumerate()
            .map(|(i, a)| a + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    };
    let z0 = pack(&pt.x, &pt.p, model);
    let zp = step(&z0, h);
    let zm = step(&z0, -h);
    (f(&point_from_z(&zp, model, engine.m0)) - f(&point_from_z(&zm, model, engine.m0))) / (2.0 * h)
}

/// Finite-difference Poisson bracket {G, F}: the derivative of F along the
/// Hamiltonian vector field of G, built from FD gradients of both functions.
pub fn poisson_fd(
    g: &dyn Fn(&ExtremalPoint) -> f64,
    f: &dyn Fn(&ExtremalPoint) -> f64,
    pt: &ExtremalPoint,
    model: Model,
    m0: f64,
    h: f64,
) -> f64 {
    let n = model.n();
    let z0 = pack(&pt.x, &pt.p, model);
    let grad = |func: &dyn Fn(&ExtremalPoint) -> f64| -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; n];
        let mut gp = vec![0.0; n];
        for j in 0..2 * n {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[j] += h;
            zm[j] -= h;
            let d = (func(&point_from_z(&zp, model, m0)) - func(&point_from_z(&zm, model, m0)))
                / (2.0 * h);
            if j < n {
                gx[j] = d;
            } else {
                gp[j - n] = d;
            }
        }
        (gx, gp)
    };
    let (gx_g, gp_g) = grad(g);
    let (gx_f, gp_f) = grad(f);
    // {G, F} = dF/dx . dG/dp - dF/dp . dG/dx
    let mut acc = 0.0;
    for j in 0..n {
        acc += gx_f[j] * gp_g[j] - gp_f[j] * gx_g[j];
    }
    acc
}
