//! Embedded Dormand-Prince 5(4) integrator with dense output.
//!
//! Works on flat `&[f64]` state slices so callers can pack canonical and
//! variational components without heap churn in the step loop. Dense output
//! uses the standard fourth-order continuous extension; event localization on
//! top of it lives with the callers (see `extremal`), which re-step to the
//! event time at full accuracy before committing.

/// Right-hand side of an ODE system on a flat state slice.
pub trait OdeSystem {
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for F {
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        self(t, y, dy)
    }
}

/// Integration tolerances and budgets.
#[derive(Clone, Copy, Debug)]
pub struct OdeTol {
    pub abs: f64,
    pub rel: f64,
    pub max_steps: usize,
}

impl Default for OdeTol {
    fn default() -> Self {
        OdeTol { abs: 1e-12, rel: 1e-12, max_steps: 40_000_000 }
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// b - bhat, for the embedded error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output weights for the order-4 continuous extension.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// One accepted step with everything needed for dense interpolation.
#[derive(Clone, Debug)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Interpolated state at `t` inside [t0, t1].
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t0) / self.h;
        let th1 = 1.0 - theta;
        for i in 0..out.len() {
            out[i] = self.rcont[0][i]
                + theta
                    * (self.rcont[1][i]
                        + th1
                            * (self.rcont[2][i]
                                + theta * (self.rcont[3][i] + th1 * self.rcont[4][i])));
        }
    }
}

/// A single explicit Dormand-Prince step of size `h` from (t, y).
/// Writes the 5th-order result into `y1` and the stage derivatives into `k`.
/// `k[0]` must hold f(t, y) on entry (FSAL reuse); the remaining stages are
/// evaluated here. Returns the scaled error norm.
pub fn dp_step<S: OdeSystem>(
    sys: &S,
    t: f64,
    y: &[f64],
    h: f64,
    k: &mut [Vec<f64>; 7],
    y1: &mut [f64],
    work: &mut [f64],
    tol: &OdeTol,
) -> f64 {
    let n = y.len();
    for stage in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(stage) {
                let a = A[stage][j];
                if a != 0.0 {
                    acc += a * kj[i];
                }
            }
            work[i] = y[i] + h * acc;
        }
        if stage == 6 {
            // stage 7 is the FSAL evaluation at (t + h, y1)
            y1.copy_from_slice(&work[..n]);
        }
        let (head, tail) = k.split_at_mut(stage);
        let _ = head;
        sys.eval(t + C[stage] * h, &work[..n], &mut tail[0]);
    }
    // scaled error estimate
    let mut err = 0.0;
    for i in 0..n {
        let mut e = 0.0;
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                e += E[j] * kj[i];
            }
        }
        e *= h;
        let sc = tol.abs + tol.rel * y[i].abs().max(y1[i].abs());
        err += (e / sc) * (e / sc);
    }
    (err / n as f64).sqrt()
}

fn build_dense(y0: &[f64], y1: &[f64], h: f64, k: &[Vec<f64>; 7]) -> DenseStep {
    let n = y0.len();
    let mut rcont: [Vec<f64>; 5] = [
        y0.to_vec(),
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    ];
    for i in 0..n {
        let dy = y1[i] - y0[i];
        let bspl = h * k[0][i] - dy;
        rcont[1][i] = dy;
        rcont[2][i] = bspl;
        rcont[3][i] = dy - h * k[6][i] - bspl;
        let mut d = 0.0;
        for (j, kj) in k.iter().enumerate() {
            if D[j] != 0.0 {
                d += D[j] * kj[i];
            }
        }
        rcont[4][i] = h * d;
    }
    DenseStep { t0: 0.0, h, rcont }
}

/// Outcome of [`integrate`]: why the driver stopped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopReason {
    Reached,
    CallbackStop,
    StepBudget,
}

/// Adaptive integration of `sys` from (t0, y0) to t_end (either direction).
///
/// `on_step` fires after every accepted step with the dense interpolant for
/// that step; returning `false` stops the driver (used for event handling).
/// The state slice `y` is advanced in place.
pub fn integrate<S: OdeSystem>(
    sys: &S,
    t0: f64,
    y: &mut Vec<f64>,
    t_end: f64,
    tol: &OdeTol,
    mut on_step: impl FnMut(&DenseStep, &[f64]) -> bool,
) -> (f64, StopReason) {
    let n = y.len();
    if t_end == t0 {
        return (t0, StopReason::Reached);
    }
    let posneg = (t_end - t0).signum();
    let mut k: [Vec<f64>; 7] = [
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    ];
    let mut y1 = vec![0.0; n];
    let mut work = vec![0.0; n];
    sys.eval(t0, y, &mut k[0]);

    let mut h = initial_step(sys, t0, y, &k[0].clone(), posneg, tol, &mut work, &mut y1);
    let mut t = t0;
    let mut rejected = false;
    let mut nsteps = 0usize;
    while (t_end - t) * posneg > 0.0 {
        if nsteps >= tol.max_steps {
            return (t, StopReason::StepBudget);
        }
        nsteps += 1;
        let mut last = false;
        if (t + 1.000001 * h - t_end) * posneg >= 0.0 {
            h = t_end - t;
            last = true;
        }
        let err = dp_step(sys, t, y, h, &mut k, &mut y1, &mut work, tol);
        if err <= 1.0 {
            let mut dense = build_dense(y, &y1, h, &k);
            dense.t0 = t;
            t = if last { t_end } else { t + h };
            y.copy_from_slice(&y1);
            k.swap(0, 6); // FSAL
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, if rejected { 1.0 } else { 5.0 });
            h *= fac;
            rejected = false;
            if !on_step(&dense, y) {
                return (t, StopReason::CallbackStop);
            }
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            rejected = true;
            // k[0] still holds f(t, y); nothing to refresh
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) && !rejected {
            // step collapsed; treat as budget failure
            return (t, StopReason::StepBudget);
        }
    }
    (t, StopReason::Reached)
}

fn initial_step<S: OdeSystem>(
    sys: &S,
    t0: f64,
    y: &[f64],
    f0: &[f64],
    posneg: f64,
    tol: &OdeTol,
    work: &mut [f64],
    y1: &mut [f64],
) -> f64 {
    let n = y.len();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..n {
        let sc = tol.abs + tol.rel * y[i].abs();
        d0 += (y[i] / sc) * (y[i] / sc);
        d1 += (f0[i] / sc) * (f0[i] / sc);
    }
    d0 = (d0 / n as f64).sqrt();
    d1 = (d1 / n as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 *= posneg;
    // one Euler probe for the second derivative scale
    for i in 0..n {
        work[i] = y[i] + h0 * f0[i];
    }
    sys.eval(t0 + h0, &work[..n], y1);
    let mut d2 = 0.0;
    for i in 0..n {
        let sc = tol.abs + tol.rel * y[i].abs();
        let df = (y1[i] - f0[i]) / sc;
        d2 += df * df;
    }
    d2 = (d2 / n as f64).sqrt() / h0.abs();
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0.abs() * 1e-3).max(1e-6)
    } else {
        (0.01 / dm).powf(0.2)
    };
    (h1.min(100.0 * h0.abs())) * posneg
}
