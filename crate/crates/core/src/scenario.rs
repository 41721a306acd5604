//! Scenario files: physical mission description, validated and converted to
//! the nondimensional problem the solver works on.
//!
//! Scenarios are TOML or JSON (chosen by file extension). Unknown keys are
//! rejected. All geometry is given physically (km, N, kg, days) and converted
//! here; nondimensional overrides exist for the test problems.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CrtbpParams, EngineParams, State};
use crate::error::{Error, Result};
use crate::extremal::{IntegOptions, Model};
use crate::ode::OdeTol;
use crate::shooting::{
    CircularOrbitTarget, FixedStateTarget, FrameConvention, OrbitCenter, TargetManifold,
};
use crate::sufficiency::ConditionOpts;

pub const STANDARD_GRAVITY_M_S2: f64 = 9.80665;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub frame: FrameSection,
    pub engine: EngineSection,
    pub initial: InitialSection,
    pub target: TargetSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
    #[serde(default)]
    pub jcurve: JCurveSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSection {
    pub mu: f64,
    pub d_star_km: f64,
    /// Time unit override; recomputed from Kepler's third law when absent.
    #[serde(default)]
    pub t_star_s: Option<f64>,
    pub m_star_kg: f64,
    pub r_body1_km: f64,
    pub r_body2_km: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub thrust_newtons: f64,
    pub m0_kg: f64,
    pub dry_mass_kg: f64,
    /// Nondimensional mass-flow slope; exclusive with `isp_s`.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Specific impulse in seconds; exclusive with `beta`.
    #[serde(default)]
    pub isp_s: Option<f64>,
    /// "constant" (mass as a parameter, n = 6) or "variable" (n = 7).
    pub mass_model: MassModelSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassModelSpec {
    Constant,
    Variable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    /// Circular orbit about the first primary, starting on the X-axis
    /// between the primaries, prograde.
    CircularPrimaryXaxis,
    /// Explicit nondimensional state.
    State,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub kind: InitialKind,
    #[serde(default)]
    pub radius_km: Option<f64>,
    #[serde(default)]
    pub frame_convention: Option<FrameConvention>,
    #[serde(default)]
    pub r: Option<[f64; 3]>,
    #[serde(default)]
    pub v: Option<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    CircularSecondary,
    CircularPrimary,
    FixedState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub kind: TargetKind,
    #[serde(default)]
    pub radius_km: Option<f64>,
    #[serde(default)]
    pub frame_convention: Option<FrameConvention>,
    #[serde(default)]
    pub r: Option<[f64; 3]>,
    #[serde(default)]
    pub v: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub tf_days: f64,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_grid_step: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSection {
    pub integ_abs: Option<f64>,
    pub integ_rel: Option<f64>,
    pub newton: Option<f64>,
    pub switch: Option<f64>,
    pub regularity: Option<f64>,
    pub max_switches: Option<usize>,
    pub cond1_floor_rel: Option<f64>,
    pub cond2_floor_rel: Option<f64>,
    pub cond2_floor_abs: Option<f64>,
    pub cond3_tol: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JCurveSection {
    pub enabled: bool,
    pub epsilon: f64,
    pub points: usize,
}

impl Default for JCurveSection {
    fn default() -> Self {
        JCurveSection { enabled: false, epsilon: 1e-3, points: 21 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let sc: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation {
                    field: field.into(),
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
            Ok(())
        }
        let f = &self.frame;
        // mu = 0 is allowed: the two-body regression mode
        if !(f.mu.is_finite() && (0.0..0.5).contains(&f.mu)) {
            return Err(Error::Validation {
                field: "frame.mu".into(),
                reason: format!("must lie in [0, 1/2), got {}", f.mu),
            });
        }
        positive("frame.d_star_km", f.d_star_km)?;
        positive("frame.m_star_kg", f.m_star_kg)?;
        positive("frame.r_body1_km", f.r_body1_km)?;
        positive("frame.r_body2_km", f.r_body2_km)?;
        if let Some(t) = f.t_star_s {
            positive("frame.t_star_s", t)?;
        }
        positive("engine.thrust_newtons", self.engine.thrust_newtons)?;
        positive("engine.m0_kg", self.engine.m0_kg)?;
        positive("engine.dry_mass_kg", self.engine.dry_mass_kg)?;
        if self.engine.dry_mass_kg >= self.engine.m0_kg {
            return Err(Error::Validation {
                field: "engine.dry_mass_kg".into(),
                reason: "dry mass must be below the initial mass".into(),
            });
        }
        match (self.engine.beta, self.engine.isp_s) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation {
                    field: "engine.beta".into(),
                    reason: "give either beta or isp_s, not both".into(),
                })
            }
            (Some(b), None) if !(b.is_finite() && b >= 0.0) => {
                return Err(Error::Validation {
                    field: "engine.beta".into(),
                    reason: "must be finite and nonnegative".into(),
                })
            }
            (None, Some(isp)) => positive("engine.isp_s", isp)?,
            _ => {}
        }
        if self.engine.mass_model == MassModelSpec::Constant && self.nondim_beta() != 0.0 {
            return Err(Error::Validation {
                field: "engine.mass_model".into(),
                reason: "the constant-mass model requires beta = 0 (no isp)".into(),
            });
        }
        fn finite_state(
            field: &str,
            r: &Option<[f64; 3]>,
            v: &Option<[f64; 3]>,
        ) -> Result<([f64; 3], [f64; 3])> {
            match (r, v) {
                (Some(r), Some(v))
                    if r.iter().all(|c| c.is_finite()) && v.iter().all(|c| c.is_finite()) =>
                {
                    Ok((*r, *v))
                }
                _ => Err(Error::Validation {
                    field: field.into(),
                    reason: "kind = state requires finite r and v arrays".into(),
                }),
            }
        }
        match self.initial.kind {
            InitialKind::CircularPrimaryXaxis => {
                let radius = self.initial.radius_km.ok_or_else(|| Error::Validation {
                    field: "initial.radius_km".into(),
                    reason: "required for circular_primary_xaxis".into(),
                })?;
                positive("initial.radius_km", radius)?;
                if self.initial.r.is_some() || self.initial.v.is_some() {
                    return Err(Error::Validation {
                        field: "initial.r".into(),
                        reason: "r/v only apply to kind = state".into(),
                    });
                }
            }
            InitialKind::State => {
                finite_state("initial", &self.initial.r, &self.initial.v)?;
                if self.initial.radius_km.is_some() {
                    return Err(Error::Validation {
                        field: "initial.radius_km".into(),
                        reason: "radius_km only applies to kind = circular_primary_xaxis".into(),
                    });
                }
            }
        }
        match self.target.kind {
            TargetKind::CircularSecondary | TargetKind::CircularPrimary => {
                let radius = self.target.radius_km.ok_or_else(|| Error::Validation {
                    field: "target.radius_km".into(),
                    reason: "required for circular-orbit targets".into(),
                })?;
                positive("target.radius_km", radius)?;
                if self.target.kind == TargetKind::CircularSecondary {
                    if radius <= self.frame.r_body2_km {
                        return Err(Error::Validation {
                            field: "target.radius_km".into(),
                            reason: "target orbit must clear the secondary body".into(),
                        });
                    }
                    if self.frame.mu == 0.0 {
                        return Err(Error::Validation {
                            field: "target.kind".into(),
                            reason: "circular_secondary needs a massive secondary (mu > 0)".into(),
                        });
                    }
                }
                if self.target.r.is_some() || self.target.v.is_some() {
                    return Err(Error::Validation {
                        field: "target.r".into(),
                        reason: "r/v only apply to kind = fixed_state".into(),
                    });
                }
            }
            TargetKind::FixedState => {
                finite_state("target", &self.target.r, &self.target.v)?;
                if self.target.radius_km.is_some() {
                    return Err(Error::Validation {
                        field: "target.radius_km".into(),
                        reason: "radius_km only applies to circular-orbit targets".into(),
                    });
                }
            }
        }
        positive("problem.tf_days", self.problem.tf_days)?;
        if self.problem.lambda_grid.is_some() && self.problem.lambda_grid_step.is_some() {
            return Err(Error::Validation {
                field: "problem.lambda_grid".into(),
                reason: "give either lambda_grid or lambda_grid_step, not both".into(),
            });
        }
        if let Some(grid) = &self.problem.lambda_grid {
            let ok = grid.len() >= 2
                && grid.first() == Some(&0.0)
                && grid.last() == Some(&1.0)
                && grid.windows(2).all(|w| w[1] > w[0])
                && grid.iter().all(|l| l.is_finite());
            if !ok {
                return Err(Error::Validation {
                    field: "problem.lambda_grid".into(),
                    reason: "must increase strictly from 0 to 1".into(),
                });
            }
        }
        if let Some(step) = self.problem.lambda_grid_step {
            if !(step.is_finite() && step > 0.0 && step <= 1.0) {
                return Err(Error::Validation {
                    field: "problem.lambda_grid_step".into(),
                    reason: "must lie in (0, 1]".into(),
                });
            }
        }
        if self.jcurve.enabled {
            positive("jcurve.epsilon", self.jcurve.epsilon)?;
            if self.jcurve.points < 3 || self.jcurve.points % 2 == 0 {
                return Err(Error::Validation {
                    field: "jcurve.points".into(),
                    reason: "must be an odd number >= 3".into(),
                });
            }
        }
        Ok(())
    }

    fn nondim_beta(&self) -> f64 {
        match (self.engine.beta, self.engine.isp_s) {
            (Some(b), _) => b,
            (None, Some(isp)) => {
                let t_star = self.t_star();
                let d_star_m = self.frame.d_star_km * 1000.0;
                d_star_m / (t_star * isp * STANDARD_GRAVITY_M_S2)
            }
            (None, None) => 0.0,
        }
    }

    fn t_star(&self) -> f64 {
        self.frame.t_star_s.unwrap_or_else(|| {
            (self.frame.d_star_km.powi(3)
                / (crate::dynamics::GRAVITATIONAL_CONSTANT * self.frame.m_star_kg))
                .sqrt()
        })
    }

    /// Converts to the nondimensional problem description.
    pub fn build(&self) -> Result<BuiltScenario> {
        let t_star = self.t_star();
        let params = CrtbpParams {
            mu: self.frame.mu,
            d_star: self.frame.d_star_km,
            t_star,
            m_star: self.frame.m_star_kg,
            r_body1: self.frame.r_body1_km / self.frame.d_star_km,
            r_body2: self.frame.r_body2_km / self.frame.d_star_km,
            m_dry: self.engine.dry_mass_kg / self.engine.m0_kg,
            singularity_floor: 1e-12,
        };
        // spacecraft mass unit: the initial mass
        let d_star_m = self.frame.d_star_km * 1000.0;
        let tau_max = self.engine.thrust_newtons * t_star * t_star / (self.engine.m0_kg * d_star_m);
        let engine = EngineParams { tau_max, beta: self.nondim_beta(), m0: 1.0 };
        let model = match self.engine.mass_model {
            MassModelSpec::Constant => Model::ReducedConstantMass,
            MassModelSpec::Variable => Model::FullMass,
        };
        let x0 = match self.initial.kind {
            InitialKind::CircularPrimaryXaxis => {
                let r = self.initial.radius_km.unwrap() / self.frame.d_star_km;
                let circ = ((1.0 - params.mu) / r).sqrt();
                let v = match self.initial.frame_convention.unwrap_or_default() {
                    FrameConvention::Rotating => circ,
                    FrameConvention::Inertial => circ - r,
                };
                State::new(
                    Vector3::new(r - params.mu, 0.0, 0.0),
                    Vector3::new(0.0, v, 0.0),
                    engine.m0,
                )
            }
            InitialKind::State => {
                let r = self.initial.r.unwrap();
                let v = self.initial.v.unwrap();
                State::new(
                    Vector3::new(r[0], r[1], r[2]),
                    Vector3::new(v[0], v[1], v[2]),
                    engine.m0,
                )
            }
        };
        if !x0.is_admissible(&params) {
            return Err(Error::Validation {
                field: "initial".into(),
                reason: "initial state is not admissible".into(),
            });
        }
        let target_spec = match self.target.kind {
            TargetKind::CircularSecondary | TargetKind::CircularPrimary => {
                let center = if self.target.kind == TargetKind::CircularSecondary {
                    OrbitCenter::Secondary
                } else {
                    OrbitCenter::Primary
                };
                let t = CircularOrbitTarget::new(
                    &params,
                    center,
                    self.target.radius_km.unwrap() / self.frame.d_star_km,
                    self.target.frame_convention.unwrap_or_default(),
                );
                TargetSpec::CircularOrbit { center, radius: t.radius, speed: t.speed }
            }
            TargetKind::FixedState => TargetSpec::FixedState {
                r: self.target.r.unwrap(),
                v: self.target.v.unwrap(),
            },
        };
        let t_f = self.problem.tf_days * 86_400.0 / t_star;
        let lambda_grid = if let Some(grid) = &self.problem.lambda_grid {
            grid.clone()
        } else {
            let step = self.problem.lambda_grid_step.unwrap_or(0.1);
            let mut grid = Vec::new();
            let mut lam = 0.0;
            while lam < 1.0 - 1e-12 {
                grid.push(lam);
                lam += step;
            }
            grid.push(1.0);
            grid
        };

        let tols = &self.tolerances;
        let integ = IntegOptions {
            ode: OdeTol {
                abs: tols.integ_abs.unwrap_or(1e-12),
                rel: tols.integ_rel.unwrap_or(1e-12),
                ..OdeTol::default()
            },
            switch_tol: tols.switch.unwrap_or(1e-12),
            bracket_tol: 1e-13,
            regularity_tol: tols.regularity.unwrap_or(1e-8),
            max_switches: tols.max_switches.unwrap_or(200),
        };
        let conditions = ConditionOpts {
            cond1_floor_rel: tols.cond1_floor_rel.unwrap_or(1e-10),
            cond2_floor_rel: tols.cond2_floor_rel.unwrap_or(1e-10),
            cond2_floor_abs: tols.cond2_floor_abs.unwrap_or(0.0),
            cond3_tol: tols.cond3_tol.unwrap_or(1e-10),
        };
        Ok(BuiltScenario {
            name: self.name.clone(),
            params,
            engine,
            model,
            x0,
            t_f,
            target_spec,
            lambda_grid,
            newton_tol: tols.newton.unwrap_or(1e-10),
            integ,
            conditions,
            jcurve: self.jcurve.clone(),
            output_dir: self.output.dir.clone(),
        })
    }
}

/// Resolved, serializable target description (nondimensional).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    CircularOrbit { center: OrbitCenter, radius: f64, speed: f64 },
    FixedState { r: [f64; 3], v: [f64; 3] },
}

impl TargetSpec {
    pub fn manifold(&self, params: &CrtbpParams) -> Arc<dyn TargetManifold> {
        match self {
            TargetSpec::CircularOrbit { center, radius, speed } => {
                let c = match center {
                    OrbitCenter::Primary => params.r1(),
                    OrbitCenter::Secondary => params.r2(),
                };
                Arc::new(CircularOrbitTarget { center: c, radius: *radius, speed: *speed })
            }
            TargetSpec::FixedState { r, v } => Arc::new(FixedStateTarget {
                x_target: State::new(
                    Vector3::new(r[0], r[1], r[2]),
                    Vector3::new(v[0], v[1], v[2]),
                    1.0,
                ),
            }),
        }
    }
}

/// Nondimensional problem description produced from a scenario.
#[derive(Clone, Debug)]
pub struct BuiltScenario {
    pub name: Option<String>,
    pub params: CrtbpParams,
    pub engine: EngineParams,
    pub model: Model,
    pub x0: State,
    pub t_f: f64,
    pub target_spec: TargetSpec,
    pub lambda_grid: Vec<f64>,
    pub newton_tol: f64,
    pub integ: IntegOptions,
    pub conditions: ConditionOpts,
    pub jcurve: JCurveSection,
    pub output_dir: String,
}

/// Loads and validates a scenario from a TOML or JSON file (by extension).
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => Scenario::from_toml_str(&text),
        Some("json") => Scenario::from_json_str(&text),
        other => Err(Error::Parse(format!(
            "unsupported scenario extension {:?} (expected .toml or .json)",
            other
        ))),
    }
}
