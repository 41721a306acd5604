use thiserror::Error;

/// Errors surfaced by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Position entered the guard radius of one of the primaries.
    #[error("state within {dist:.3e} of body {body} (floor {floor:.1e})")]
    Singularity { body: usize, dist: f64, floor: f64 },

    /// Spacecraft mass at or below the dry mass.
    #[error("mass {m:.6e} at or below dry mass {m_dry:.6e}")]
    DegenerateMass { m: f64, m_dry: f64 },

    /// Thrust direction requested while the primer vector vanishes.
    #[error("thrust direction undefined: |p_v| = {p_v_norm:.3e} with H1 = {h1:.3e}")]
    UndefinedDirection { p_v_norm: f64, h1: f64 },

    /// A detected switching point violates the regularity assumption.
    #[error("switch at t = {t:.12} has |H01| = {h01:.3e} below regularity tol {tol:.1e}")]
    RegularityViolation { t: f64, h01: f64, tol: f64 },

    /// Switch-count guard tripped; switch times may be accumulating.
    #[error("more than {max_switches} switches detected by t = {t:.6}; chattering suspected")]
    ChatteringSuspected { t: f64, max_switches: usize },

    /// Newton failed to reach the requested residual.
    #[error("no convergence after {iterations} iterations (residual inf-norm {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Continuation could not advance past the recorded lambda.
    #[error("homotopy stalled at lambda = {lambda_reached:.6}")]
    HomotopyStalled { lambda_reached: f64 },

    /// A fixed-endpoint node solve of the J-curve failed.
    #[error("J-curve node solve failed at xi = {xi:.6e}")]
    PathSolveFailed { xi: f64 },

    /// dphi does not have full row rank at the candidate endpoint.
    #[error("target constraint Jacobian is rank deficient (rank {rank} < {codim})")]
    RankDeficientTarget { rank: usize, codim: usize },

    /// The state-block sensitivity matrix is too ill conditioned to invert.
    #[error("Mx(t_f) near singular: condition estimate {cond:.3e}")]
    NearSingularMx { cond: f64 },

    /// The ODE integrator exceeded its step budget.
    #[error("integrator exceeded {max_steps} steps at t = {t:.6}")]
    StepBudgetExceeded { t: f64, max_steps: usize },

    /// Scenario or trajectory file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Scenario parsed but failed validation.
    #[error("invalid scenario field `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
