//! Two-stage optimization per control step: minimize `K` over `λ` stage by
//! stage against the candidate trajectory, then solve the parameterized OCP
//! with those `λ̄`, and repeat until `λ̄` settles or the budget runs out.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{PathTimingState, QuadrotorInput, QuadrotorState};
use crate::geometry::{minimize_k, Ellipsoid, GeometryError, DEFAULT_LAMBDA_TOL};
use crate::ocp::{
    simulate_timing, solve_joint, solve_parameterized, OcpError, OcpProblem, SolveOutput, SolveStatus,
};

/// How `λ̄` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    TwoStage,
    /// `λ̂` held constant over the horizon and over time.
    FixedLambda(f64),
    Joint,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::TwoStage => write!(f, "twostage"),
            Mode::FixedLambda(l) => write!(f, "fixed:{l}"),
            Mode::Joint => write!(f, "joint"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "twostage" => Ok(Mode::TwoStage),
            "joint" => Ok(Mode::Joint),
            _ => {
                let value = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| format!("unknown mode `{s}`, expected twostage, joint or fixed:<lambda>"))?;
                let lambda: f64 = value.parse().map_err(|_| format!("bad fixed lambda `{value}`"))?;
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(format!("fixed lambda {lambda} outside [0, 1]"));
                }
                Ok(Mode::FixedLambda(lambda))
            }
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub mode: Mode,
    pub i_max: usize,
    pub epsilon: f64,
    /// Bisection precision of the per-stage `λ` search.
    pub lambda_tol: f64,
    /// Wall-clock budget per step in seconds; the control period when unset.
    pub wall_budget: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TwoStage,
            i_max: 1,
            epsilon: 1e-3,
            lambda_tol: DEFAULT_LAMBDA_TOL,
            wall_budget: None,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.i_max < 1 {
            return Err("i_max must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return Err("epsilon must be positive".into());
        }
        if !(self.lambda_tol > 0.0 && self.lambda_tol < 0.5) {
            return Err("lambda_tol must lie in (0, 0.5)".into());
        }
        if let Some(b) = self.wall_budget {
            if !(b > 0.0) {
                return Err("wall_budget must be positive".into());
            }
        }
        if let Mode::FixedLambda(l) = self.mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(format!("fixed lambda {l} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Warm-start memory carried from one control step to the next.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub config: ControllerConfig,
    pub previous: SolveOutput,
    pub previous_lambda: Vec<Vec<f64>>,
}

/// One JSON-lines record per control step.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub lambda0: Vec<f64>,
    #[serde(rename = "K0")]
    pub k0: Vec<f64>,
    #[serde(rename = "J")]
    pub cost: f64,
    pub iters: usize,
    pub wall_time: f64,
    pub slack_max: f64,
    pub mode: Mode,
    pub status: SolveStatus,
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub input: QuadrotorInput,
    pub nu: f64,
    pub diagnostics: StepDiagnostics,
    /// `λ̄` used by the final solve, one trajectory per obstacle.
    pub lambda_bar: Vec<Vec<f64>>,
    pub solution: SolveOutput,
}

fn robot_body(pb: &OcpProblem<'_>) -> Result<Ellipsoid, GeometryError> {
    Ellipsoid::new(*pb.robot_shape, Vector3::zeros())
}

/// Per-stage minimizers of `K` against a state trajectory, one vector per
/// obstacle. Also returns the minimal `K` values.
pub fn lambda_update(
    pb: &OcpProblem<'_>,
    states: &[QuadrotorState],
    t_now: f64,
    lambda_tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), GeometryError> {
    let body = robot_body(pb)?;
    let mut lambdas = Vec::with_capacity(pb.obstacles.len());
    let mut values = Vec::with_capacity(pb.obstacles.len());
    for obs in pb.obstacles {
        let mut lam = Vec::with_capacity(states.len());
        let mut val = Vec::with_capacity(states.len());
        for (k, x) in states.iter().enumerate() {
            let verdict = minimize_k(
                &body.with_center(x.position()),
                &obs.at(t_now + k as f64 * pb.cfg.delta),
                lambda_tol,
            )?;
            lam.push(verdict.lambda_star);
            val.push(verdict.k_min);
        }
        lambdas.push(lam);
        values.push(val);
    }
    Ok((lambdas, values))
}

/// Constant state trajectory at `x_meas`, hover inputs, and `λ̄` minimizing
/// `K` along it.
pub fn cold_start(
    config: ControllerConfig,
    pb: &OcpProblem<'_>,
    x_meas: &QuadrotorState,
    z0: PathTimingState,
    t_now: f64,
) -> Result<ControllerState, OcpError> {
    config.validate().map_err(OcpError::Config)?;
    pb.cfg.validate().map_err(OcpError::Config)?;
    let n = pb.cfg.horizon;
    let states = vec![*x_meas; n + 1];
    let virtual_inputs = vec![0.0; n];
    let lambda = match config.mode {
        Mode::FixedLambda(l) => vec![vec![l; n + 1]; pb.obstacles.len()],
        _ => lambda_update(pb, &states, t_now, config.lambda_tol)?.0,
    };
    let previous = SolveOutput {
        timing_states: simulate_timing(z0, &virtual_inputs, pb.cfg.delta),
        states,
        inputs: vec![QuadrotorInput::hover(); n],
        virtual_inputs,
        lambda_params: lambda.clone(),
        cost: f64::NAN,
        kkt_residual: f64::NAN,
        status: SolveStatus::MaxIters,
        wall_time: 0.0,
        slack_max: 0.0,
        max_defect: 0.0,
        iterations: 0,
        merit_history: Vec::new(),
        qp_active_set: Vec::new(),
    };
    Ok(ControllerState {
        config,
        previous,
        previous_lambda: lambda,
    })
}

fn shift<T: Clone>(v: &[T]) -> Vec<T> {
    let mut out: Vec<T> = v[1..].to_vec();
    out.push(v[v.len() - 1].clone());
    out
}

/// The previous solution moved forward by one control period: stage `k`
/// takes stage `k+1`, the terminal entries are duplicated and the first state
/// is replaced by the measurement.
fn shifted_warm_start(prev: &SolveOutput, x_meas: &QuadrotorState) -> SolveOutput {
    let mut warm = prev.clone();
    warm.states = shift(&prev.states);
    warm.states[0] = *x_meas;
    warm.inputs = shift(&prev.inputs);
    warm.virtual_inputs = shift(&prev.virtual_inputs);
    warm.timing_states = shift(&prev.timing_states);
    warm.lambda_params = prev.lambda_params.iter().map(|l| shift(l)).collect();
    warm
}

fn max_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One control step. Returns the first input of the last completed solve.
pub fn control_step(
    ctrl: &mut ControllerState,
    pb: &OcpProblem<'_>,
    x_meas: &QuadrotorState,
    z_now: PathTimingState,
    t_now: f64,
) -> Result<StepOutput, OcpError> {
    let started = Instant::now();
    let budget = ctrl.config.wall_budget.unwrap_or(pb.cfg.delta);
    let mut warm = shifted_warm_start(&ctrl.previous, x_meas);
    let mut iters = 0;
    let mut degraded = false;

    let (solution, lambda_bar) = match ctrl.config.mode {
        Mode::Joint => {
            let sol = solve_joint(pb, x_meas, z_now, t_now, Some(&warm))?;
            iters = 1;
            let lam = sol.lambda_params.clone();
            (sol, lam)
        }
        Mode::FixedLambda(l) => {
            let lam = vec![vec![l; pb.cfg.horizon + 1]; pb.obstacles.len()];
            let sol = solve_parameterized(pb, x_meas, z_now, &lam, t_now, Some(&warm))?;
            iters = 1;
            (sol, lam)
        }
        Mode::TwoStage => {
            let mut lam_prev: Vec<Vec<f64>> = ctrl.previous_lambda.iter().map(|l| shift(l)).collect();
            let mut last = None;
            while iters < ctrl.config.i_max {
                if iters > 0 && started.elapsed().as_secs_f64() >= budget {
                    degraded = true;
                    break;
                }
                let (lam, _) = lambda_update(pb, &warm.states, t_now, ctrl.config.lambda_tol)?;
                let sol = solve_parameterized(pb, x_meas, z_now, &lam, t_now, Some(&warm))?;
                iters += 1;
                let settled = max_change(&lam, &lam_prev) < ctrl.config.epsilon;
                warm = sol.clone();
                last = Some((sol, lam.clone()));
                if settled {
                    break;
                }
                lam_prev = lam;
            }
            last.expect("at least one iteration runs")
        }
    };

    let wall_time = started.elapsed().as_secs_f64();
    degraded |= wall_time > budget;
    let body = robot_body(pb)?;
    let (lambda0, k0): (Vec<f64>, Vec<f64>) = pb
        .obstacles
        .iter()
        .zip(&lambda_bar)
        .map(|(obs, lam)| {
            let k = crate::geometry::k_fused(lam[0], &body.with_center(x_meas.position()), &obs.at(t_now))
                .map(|aux| aux.k_value)
                .unwrap_or(f64::NAN);
            (lam[0], k)
        })
        .unzip();

    let diagnostics = StepDiagnostics {
        t: t_now,
        lambda0,
        k0,
        cost: solution.cost,
        iters,
        wall_time,
        slack_max: solution.slack_max,
        mode: ctrl.config.mode,
        status: solution.status,
        degraded,
    };
    let input = solution.inputs[0];
    let nu = solution.virtual_inputs[0];
    ctrl.previous = solution.clone();
    ctrl.previous_lambda = lambda_bar.clone();
    Ok(StepOutput {
        input,
        nu,
        diagnostics,
        lambda_bar,
        solution,
    })
}
