//! Closed-loop scenario description, JSON I/O and the built-in
//! demonstration scenarios.

use std::path::Path as FsPath;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::dynamics::{PathTimingState, QuadrotorState, VehicleParams};
use crate::geometry::Ellipsoid;
use crate::ocp::{ObstacleTrack, OcpConfig, OcpProblem, S_DOT_FLOOR};
use crate::pathdef::{Path, PathSpec};

pub const DEMO_DRONE_SHAPE: [[f64; 3]; 3] = [[177.78, 0.0, 0.0], [0.0, 177.78, 0.0], [0.0, 0.0, 1975.3]];
pub const DEMO_OBSTACLE_SHAPE: [[f64; 3]; 3] = [[234.57, -67.42, 0.0], [-67.42, 190.76, 0.0], [0.0, 0.0, 35.44]];
pub const DEMO_OBSTACLE_CENTER: [f64; 3] = [0.2, 0.16, 0.5];
pub const DEMO_OBSTACLE_VELOCITY: [f64; 3] = [0.0, 0.005, 0.0];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown built-in scenario `{0}`")]
    UnknownBuiltin(String),
}

/// Measurement noise. Velocities are re-estimated from noisy positions with a
/// moving-average finite difference whenever `position_std > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub position_std: f64,
    pub attitude_std: f64,
    pub velocity_window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            position_std: 0.0,
            attitude_std: 0.0,
            velocity_window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "demo_path_spec")]
    pub path: PathSpec,
    #[serde(default)]
    pub vehicle: VehicleParams,
    /// Shape matrix `A` of the robot body (rows).
    pub drone_shape: [[f64; 3]; 3],
    #[serde(default)]
    pub obstacles: Vec<ObstacleTrack>,
    /// Starts at rest on `p(s₀)` when omitted.
    #[serde(default)]
    pub initial_state: Option<QuadrotorState>,
    #[serde(default)]
    pub initial_timing: Option<PathTimingState>,
    pub duration: f64,
    #[serde(default)]
    pub ocp: OcpConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Plant mass deviation from the model, in percent.
    #[serde(default)]
    pub mass_mismatch: f64,
    #[serde(default)]
    pub seed: u64,
}

fn demo_path_spec() -> PathSpec {
    PathSpec::Named("demo".into())
}

fn rows_to_matrix(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

/// Dotted serde path turned into a JSON pointer.
fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses JSON into `T`, reporting failures with the JSON pointer of the
/// offending value.
pub fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })
}

impl Scenario {
    pub fn demo_static() -> Self {
        let vehicle = VehicleParams::default();
        Self {
            path: demo_path_spec(),
            vehicle,
            drone_shape: DEMO_DRONE_SHAPE,
            obstacles: vec![ObstacleTrack::fixed(
                Ellipsoid::new(rows_to_matrix(&DEMO_OBSTACLE_SHAPE), Vector3::from(DEMO_OBSTACLE_CENTER))
                    .expect("demo obstacle is valid"),
            )],
            initial_state: None,
            initial_timing: None,
            duration: 15.0,
            ocp: OcpConfig {
                w_s: 10.0,
                // real-time cap; the warm start carries progress across steps
                sqp_max_iters: 3,
                ..OcpConfig::for_vehicle(&vehicle)
            },
            controller: ControllerConfig::default(),
            noise: NoiseConfig::default(),
            mass_mismatch: 0.0,
            seed: 0,
        }
    }

    pub fn demo_moving() -> Self {
        let mut s = Self::demo_static();
        s.obstacles[0].velocity = Vector3::from(DEMO_OBSTACLE_VELOCITY);
        s
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        match name {
            "demo-static" => Ok(Self::demo_static()),
            "demo-moving" => Ok(Self::demo_moving()),
            other => Err(ScenarioError::UnknownBuiltin(other.into())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = from_json_str(text)?;
        s.validate().map_err(ScenarioError::Invalid)?;
        Ok(s)
    }

    /// A built-in name or a path to a JSON file.
    pub fn load(source: &str) -> Result<Self, ScenarioError> {
        if let Ok(s) = Self::builtin(source) {
            return Ok(s);
        }
        let path = FsPath::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: source.into(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn robot_shape(&self) -> Matrix3<f64> {
        rows_to_matrix(&self.drone_shape)
    }

    pub fn build_path(&self) -> Result<Path, String> {
        Path::from_spec(&self.path)
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.ocp.delta).round() as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        self.vehicle.validate()?;
        self.ocp.validate()?;
        self.controller.validate()?;
        let path = self.build_path()?;
        let shape = Ellipsoid::new(self.robot_shape(), Vector3::zeros()).map_err(|e| format!("drone_shape: {e}"))?;
        if !shape.is_strictly_pd() {
            return Err("drone_shape must be strictly positive definite".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err("duration must be positive".into());
        }
        if self.steps() == 0 {
            return Err("duration shorter than one control period".into());
        }
        if !(self.noise.position_std >= 0.0 && self.noise.attitude_std >= 0.0) {
            return Err("noise standard deviations must be nonnegative".into());
        }
        if self.noise.velocity_window < 1 {
            return Err("velocity_window must be at least 1".into());
        }
        if !(self.mass_mismatch > -100.0 && self.mass_mismatch.is_finite()) {
            return Err("mass_mismatch must exceed -100 percent".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.velocity.iter().all(|v| v.is_finite()) {
                return Err(format!("obstacles/{i}/velocity must be finite"));
            }
        }
        if let Some(x) = &self.initial_state {
            if !x.0.iter().all(|v| v.is_finite()) {
                return Err("initial_state must be finite".into());
            }
        }
        if let Some(z) = &self.initial_timing {
            if !(z.s >= path.s0() && z.s <= 0.0) {
                return Err(format!("initial_timing.s must lie in [{}, 0]", path.s0()));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self, path: &Path) -> QuadrotorState {
        self.initial_state.unwrap_or_else(|| {
            let p = path.eval(path.s0());
            QuadrotorState::at_rest(Vector3::new(p[0], p[1], p[2]), p[3])
        })
    }

    pub fn initial_timing(&self, path: &Path) -> PathTimingState {
        self.initial_timing.unwrap_or(PathTimingState::new(path.s0(), S_DOT_FLOOR))
    }
}

/// Owned pieces an [`OcpProblem`] borrows from.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub cfg: OcpConfig,
    pub path: Path,
    pub vehicle: VehicleParams,
    pub robot_shape: Matrix3<f64>,
    pub obstacles: Vec<ObstacleTrack>,
}

impl ProblemData {
    pub fn from_scenario(s: &Scenario) -> Result<Self, String> {
        Ok(Self {
            cfg: s.ocp.clone(),
            path: s.build_path()?,
            vehicle: s.vehicle,
            robot_shape: s.robot_shape(),
            obstacles: s.obstacles.clone(),
        })
    }

    pub fn problem(&self) -> OcpProblem<'_> {
        OcpProblem {
            cfg: &self.cfg,
            path: &self.path,
            vehicle: &self.vehicle,
            robot_shape: &self.robot_shape,
            obstacles: &self.obstacles,
        }
    }
}
