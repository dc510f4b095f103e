//! Collision-avoidant path-following optimal control problem.
//!
//! Decision variables are the plant inputs `u_k` and the virtual timing
//! inputs `ν_k`, `k = 0..N-1`. The plant states are kept as multiple-shooting
//! variables and condensed away at every SQP iteration, which leaves a dense
//! QP in `(Δu, Δν, slacks)`. The tracking cost is a weighted least-squares
//! sum, so the Gauss–Newton Hessian is positive semi-definite by
//! construction; the input weights and the quadratic slack penalty make it
//! definite.
//!
//! Collision rows read `K(λ̄_k, x_k) ≤ -α + σ_k`, `σ_k ≥ 0`, for every
//! obstacle and `k = 1..N` (row `k = 0` only depends on the measured state).
//! In the parameterized problem `λ̄` is fixed data; [`solve_joint`] instead
//! treats it as a decision variable for comparison.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    output, step_rk4, step_timing, step_with_jacobians, InputVec, PathTimingState, QuadrotorInput, QuadrotorState,
    StateVec, VehicleParams, NU, NX,
};
use crate::geometry::{minimize_k, Ellipsoid, GeometryError, SeparationMetric, DEFAULT_LAMBDA_TOL};
use crate::pathdef::Path;
use crate::qp::{ActiveSetSolver, Qp, QpError};

/// Lower bound realizing the open constraint `ṡ > 0`.
pub const S_DOT_FLOOR: f64 = 1e-6;
/// Dynamics defect required for convergence.
pub const DEFECT_TOL: f64 = 1e-8;

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1.0 / 1024.0;
const DEFECT_PENALTY: f64 = 1e5;
const MIN_SLACK_CURVATURE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBox {
    pub lower: [f64; 9],
    pub upper: [f64; 9],
}

/// Horizon, weights, bounds and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    pub horizon: usize,
    pub delta: f64,
    pub w_y: [[f64; 4]; 4],
    pub w_s: f64,
    pub w_u: [[f64; 4]; 4],
    pub w_nu: f64,
    pub u_min: [f64; 4],
    pub u_max: [f64; 4],
    pub nu_min: f64,
    pub nu_max: f64,
    pub s_dot_max: f64,
    pub state_box: Option<StateBox>,
    pub soft_penalty_l1: f64,
    pub soft_penalty_l2: f64,
    pub collision_margin: f64,
    pub sqp_max_iters: usize,
    pub kkt_tol: f64,
    /// Hessian regularization on the `λ` blocks of the joint problem.
    pub rho_lambda: f64,
}

fn diag4(d: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = d[i];
    }
    m
}

impl Default for OcpConfig {
    fn default() -> Self {
        let hover = VehicleParams::default().hover_thrust();
        Self {
            horizon: 20,
            delta: 0.02,
            w_y: diag4([50.0, 50.0, 50.0, 5.0]),
            w_s: 1.0,
            w_u: diag4([1.0, 10.0, 10.0, 1.0]),
            w_nu: 0.1,
            u_min: [-0.5 * hover, -0.35, -0.35, -1.0],
            u_max: [0.5 * hover, 0.35, 0.35, 1.0],
            nu_min: -2.0,
            nu_max: 2.0,
            s_dot_max: 0.3,
            state_box: None,
            soft_penalty_l1: 1e3,
            soft_penalty_l2: 1e4,
            collision_margin: 0.0,
            sqp_max_iters: 20,
            kkt_tol: 1e-6,
            rho_lambda: 1e-4,
        }
    }
}

fn mat4(m: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| m[i][j])
}

fn is_spd(m: &Matrix4<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.cholesky().is_some()
}

impl OcpConfig {
    /// Input bounds scaled to a vehicle's hover thrust.
    pub fn for_vehicle(vehicle: &VehicleParams) -> Self {
        let hover = vehicle.hover_thrust();
        let mut cfg = Self::default();
        cfg.u_min[0] = -0.5 * hover;
        cfg.u_max[0] = 0.5 * hover;
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.horizon < 1 {
            return Err("horizon must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err("delta must be positive".into());
        }
        if !is_spd(&mat4(&self.w_y)) {
            return Err("w_y must be symmetric positive definite".into());
        }
        if !is_spd(&mat4(&self.w_u)) {
            return Err("w_u must be symmetric positive definite".into());
        }
        if !(self.w_s > 0.0 && self.w_nu > 0.0) {
            return Err("w_s and w_nu must be positive".into());
        }
        if (0..4).any(|i| !(self.u_min[i] < self.u_max[i])) {
            return Err("u_min must be below u_max componentwise".into());
        }
        if !(self.nu_min < 0.0 && 0.0 < self.nu_max) {
            return Err("virtual input bounds must satisfy nu_min < 0 < nu_max".into());
        }
        if !(self.s_dot_max > S_DOT_FLOOR) {
            return Err("s_dot_max must be positive".into());
        }
        if let Some(b) = &self.state_box {
            if (0..9).any(|i| !(b.lower[i] <= b.upper[i])) {
                return Err("state_box lower must not exceed upper".into());
            }
        }
        if !(self.soft_penalty_l1 >= 0.0 && self.soft_penalty_l2 >= 0.0) {
            return Err("soft penalties must be nonnegative".into());
        }
        if !(self.collision_margin >= 0.0) {
            return Err("collision_margin must be nonnegative".into());
        }
        if self.sqp_max_iters < 1 {
            return Err("sqp_max_iters must be at least 1".into());
        }
        if !(self.kkt_tol > 0.0) {
            return Err("kkt_tol must be positive".into());
        }
        if !(self.rho_lambda >= 0.0) {
            return Err("rho_lambda must be nonnegative".into());
        }
        Ok(())
    }
}

/// Obstacle translating with constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleTrack {
    pub base: Ellipsoid,
    #[serde(default)]
    pub velocity: Vector3<f64>,
}

impl ObstacleTrack {
    pub fn fixed(base: Ellipsoid) -> Self {
        Self {
            base,
            velocity: Vector3::zeros(),
        }
    }

    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        self.base.center() + self.velocity * t
    }

    pub fn at(&self, t: f64) -> Ellipsoid {
        self.base.with_center(self.center_at(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIters,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub states: Vec<QuadrotorState>,
    pub timing_states: Vec<PathTimingState>,
    pub inputs: Vec<QuadrotorInput>,
    pub virtual_inputs: Vec<f64>,
    /// One `λ` trajectory of length `N+1` per obstacle.
    pub lambda_params: Vec<Vec<f64>>,
    /// Tracking cost plus soft-constraint penalties.
    pub cost: f64,
    /// Measured at the last linearization, which precedes the final step
    /// when the iteration cap is hit.
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub wall_time: f64,
    /// Largest collision-row violation `max(0, K + α)` over `k = 1..N`.
    pub slack_max: f64,
    pub max_defect: f64,
    pub iterations: usize,
    /// Merit value after every accepted iterate, starting with the initial guess.
    pub merit_history: Vec<f64>,
    pub qp_active_set: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct SolveSummary {
    pub cost: f64,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub wall_time: f64,
    pub slack_max: f64,
}

impl SolveOutput {
    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            cost: self.cost,
            kkt_residual: self.kkt_residual,
            status: self.status,
            wall_time: self.wall_time,
            slack_max: self.slack_max,
        }
    }

    /// One row per stage `k = 0..N`; input columns are empty on the last row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "k", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw", "s", "s_dot", "thrust_delta", "roll_cmd",
            "pitch_cmd", "yaw_rate_cmd", "nu",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for o in 0..self.lambda_params.len() {
            header.push(format!("lambda_{o}"));
        }
        w.write_record(&header)?;
        for (k, x) in self.states.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(x.0.iter().map(|v| v.to_string()));
            let z = self.timing_states[k];
            rec.push(z.s.to_string());
            rec.push(z.s_dot.to_string());
            match self.inputs.get(k) {
                Some(u) => {
                    rec.extend(u.0.iter().map(|v| v.to_string()));
                    rec.push(self.virtual_inputs[k].to_string());
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
            for lam in &self.lambda_params {
                rec.push(lam[k].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `K(λ̄_k, x_k)` per obstacle and stage.
    pub fn collision_values(&self, problem: &OcpProblem<'_>, t_now: f64) -> Result<Vec<Vec<f64>>, GeometryError> {
        let delta = problem.cfg.delta;
        problem
            .obstacles
            .iter()
            .zip(&self.lambda_params)
            .map(|(obs, lam)| {
                self.states
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let m = SeparationMetric::new(lam[k], problem.robot_shape, obs.base.shape())?;
                        Ok(m.k(&x.position(), &obs.center_at(t_now + k as f64 * delta)))
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("λ̄ has {got} trajectories of length {len}, expected {want} of length {horizon}")]
    LambdaShape {
        got: usize,
        len: usize,
        want: usize,
        horizon: usize,
    },
    #[error("λ̄ entry {0} outside [0, 1]")]
    LambdaRange(f64),
    #[error("warm start does not match the horizon")]
    WarmShape,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Everything a solve needs besides the initial condition.
#[derive(Debug, Clone, Copy)]
pub struct OcpProblem<'a> {
    pub cfg: &'a OcpConfig,
    pub path: &'a Path,
    pub vehicle: &'a VehicleParams,
    /// Shape matrix of the robot body, centered on its position.
    pub robot_shape: &'a Matrix3<f64>,
    pub obstacles: &'a [ObstacleTrack],
}

/// `‖[y - p(s); s; u; ν]‖²_W` with `W = blockdiag(W_y, W_s, W_u, W_ν)`.
pub fn stage_cost(
    y: &SVector<f64, 4>,
    z: &PathTimingState,
    u: &QuadrotorInput,
    nu: f64,
    path: &Path,
    cfg: &OcpConfig,
) -> f64 {
    let e = y - path.eval(z.s);
    e.dot(&(mat4(&cfg.w_y) * e)) + cfg.w_s * z.s * z.s + u.0.dot(&(mat4(&cfg.w_u) * u.0)) + cfg.w_nu * nu * nu
}

fn soft_penalty(cfg: &OcpConfig, violation: f64) -> f64 {
    let v = violation.max(0.0);
    cfg.soft_penalty_l1 * v + cfg.soft_penalty_l2 * v * v
}

/// Exact timing trajectory for a virtual input sequence.
pub fn simulate_timing(z0: PathTimingState, nu: &[f64], delta: f64) -> Vec<PathTimingState> {
    let mut z = Vec::with_capacity(nu.len() + 1);
    z.push(z0);
    for &v in nu {
        let last = *z.last().unwrap();
        z.push(step_timing(&last, v, delta));
    }
    z
}

#[derive(Debug, Clone)]
struct Iterate {
    u: Vec<InputVec>,
    nu: Vec<f64>,
    x: Vec<StateVec>,
    z: Vec<PathTimingState>,
    lambda: Vec<Vec<f64>>,
}

struct Evaluation {
    tracking: f64,
    penalty: f64,
    defect_l1: f64,
    max_defect: f64,
    slack_max: f64,
}

impl Evaluation {
    fn cost(&self) -> f64 {
        self.tracking + self.penalty
    }

    fn merit(&self) -> f64 {
        self.cost() + DEFECT_PENALTY * self.defect_l1
    }
}

/// Column offsets of the QP variables.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    n_obs: usize,
    joint: bool,
}

impl Layout {
    fn u(&self, k: usize) -> usize {
        5 * k
    }
    fn nu(&self, k: usize) -> usize {
        5 * k + 4
    }
    /// Collision slack of obstacle `o` at stage `k ∈ 1..=N`.
    fn coll_slack(&self, o: usize, k: usize) -> usize {
        5 * self.n + o * self.n + (k - 1)
    }
    fn s_slack(&self, k: usize) -> usize {
        5 * self.n + self.n_obs * self.n + (k - 1)
    }
    fn lambda(&self, o: usize, k: usize) -> usize {
        debug_assert!(self.joint);
        5 * self.n + (self.n_obs + 1) * self.n + o * self.n + (k - 1)
    }
    fn num_vars(&self) -> usize {
        5 * self.n + (self.n_obs + 1) * self.n + if self.joint { self.n_obs * self.n } else { 0 }
    }
}

struct Solver<'a> {
    pb: OcpProblem<'a>,
    t_now: f64,
    joint: bool,
    layout: Layout,
    lambda_bounds: Vec<(f64, f64)>,
    wy: Matrix4<f64>,
    wu: Matrix4<f64>,
}

/// Rows of the QP built one at a time.
struct RowBuilder {
    n: usize,
    data: Vec<f64>,
    bounds: Vec<f64>,
}

impl RowBuilder {
    fn new(n: usize) -> Self {
        Self {
            n,
            data: Vec::new(),
            bounds: Vec::new(),
        }
    }

    fn push(&mut self, row: &[f64], bound: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.data.extend_from_slice(row);
        self.bounds.push(bound);
    }

    fn push_sparse(&mut self, entries: &[(usize, f64)], bound: f64) {
        let start = self.data.len();
        self.data.resize(start + self.n, 0.0);
        for &(j, v) in entries {
            self.data[start + j] += v;
        }
        self.bounds.push(bound);
    }

    fn finish(self) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.bounds.len();
        (DMatrix::from_row_slice(m, self.n, &self.data), DVector::from_vec(self.bounds))
    }
}

struct Linearization {
    qp: Qp,
    start: DVector<f64>,
    /// Condensed state offsets `c_k` and sensitivities `∂x_k/∂p` (for `k ≥ 1`).
    offsets: Vec<StateVec>,
    sens: Vec<DMatrix<f64>>,
    /// Penalty of the linearized soft rows at `p = 0`.
    start_penalty: f64,
}

impl<'a> Solver<'a> {
    fn obstacle_center(&self, o: usize, k: usize) -> Vector3<f64> {
        self.pb.obstacles[o].center_at(self.t_now + k as f64 * self.pb.cfg.delta)
    }

    fn metric(&self, o: usize, lambda: f64) -> Result<SeparationMetric, GeometryError> {
        SeparationMetric::new(lambda, self.pb.robot_shape, self.pb.obstacles[o].base.shape())
    }

    fn evaluate(&self, it: &Iterate) -> Result<Evaluation, GeometryError> {
        let cfg = self.pb.cfg;
        let n = cfg.horizon;
        let mut tracking = 0.0;
        for k in 0..n {
            tracking += stage_cost(
                &output(&QuadrotorState(it.x[k])),
                &it.z[k],
                &QuadrotorInput(it.u[k]),
                it.nu[k],
                self.pb.path,
                cfg,
            );
        }
        let mut penalty = 0.0;
        let mut slack_max: f64 = 0.0;
        for o in 0..self.pb.obstacles.len() {
            for k in 1..=n {
                let m = self.metric(o, it.lambda[o][k])?;
                let viol = m.k(&it.x[k].fixed_rows::<3>(0).into_owned(), &self.obstacle_center(o, k)) + cfg.collision_margin;
                penalty += soft_penalty(cfg, viol);
                slack_max = slack_max.max(viol);
            }
        }
        for k in 1..=n {
            penalty += soft_penalty(cfg, it.z[k].s);
        }
        let mut defect_l1 = 0.0;
        let mut max_defect: f64 = 0.0;
        for k in 0..n {
            let next = step_rk4(&QuadrotorState(it.x[k]), &QuadrotorInput(it.u[k]), self.pb.vehicle, cfg.delta);
            let d = next.0 - it.x[k + 1];
            defect_l1 += d.lp_norm(1);
            max_defect = max_defect.max(d.amax());
        }
        Ok(Evaluation {
            tracking,
            penalty,
            defect_l1,
            max_defect,
            slack_max,
        })
    }

    fn linearize(&self, it: &Iterate) -> Result<Linearization, GeometryError> {
        let cfg = self.pb.cfg;
        let n = cfg.horizon;
        let lay = self.layout;
        let nv = lay.num_vars();
        let delta = cfg.delta;

        // Condensing: Δx_{k+1} = A_k Δx_k + B_k Δu_k + d_k, Δx_0 = 0.
        let mut offsets = vec![StateVec::zeros(); n + 1];
        let mut sens: Vec<DMatrix<f64>> = vec![DMatrix::zeros(NX, nv); n + 1];
        for k in 0..n {
            let (next, a, b) =
                step_with_jacobians(&QuadrotorState(it.x[k]), &QuadrotorInput(it.u[k]), self.pb.vehicle, delta);
            let defect = next.0 - it.x[k + 1];
            offsets[k + 1] = a * offsets[k] + defect;
            // only the input columns of earlier stages are nonzero so far
            let used = lay.u(k);
            let mut g = DMatrix::<f64>::zeros(NX, nv);
            for c in 0..used {
                let col: StateVec = a * sens[k].fixed_view::<NX, 1>(0, c);
                g.fixed_view_mut::<NX, 1>(0, c).copy_from(&col);
            }
            for (r, c) in (0..NX).flat_map(|r| (0..NU).map(move |c| (r, c))) {
                g[(r, lay.u(k) + c)] += b[(r, c)];
            }
            sens[k + 1] = g;
        }
        // Timing sensitivities (exact, linear).
        let mut s_sens: Vec<DVector<f64>> = vec![DVector::zeros(nv); n + 1];
        let mut sd_sens: Vec<DVector<f64>> = vec![DVector::zeros(nv); n + 1];
        for k in 0..n {
            let mut s_next = &s_sens[k] + &sd_sens[k] * delta;
            s_next[lay.nu(k)] += 0.5 * delta * delta;
            let mut sd_next = sd_sens[k].clone();
            sd_next[lay.nu(k)] += delta;
            s_sens[k + 1] = s_next;
            sd_sens[k + 1] = sd_next;
        }

        // Tracking: residual rows r_k = [y_k - p(s_k); s_k] weighted by
        // blockdiag(W_y, W_s) through its Cholesky factor.
        let mut w5 = SMatrix::<f64, 5, 5>::zeros();
        w5.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.wy);
        w5[(4, 4)] = cfg.w_s;
        let l5t = w5.cholesky().expect("weights validated").l().transpose();
        let mut jac = DMatrix::<f64>::zeros(5 * n, nv);
        let mut res = DVector::<f64>::zeros(5 * n);
        for k in 0..n {
            let y = output(&QuadrotorState(it.x[k]));
            let s = it.z[k].s;
            let dp = self.pb.path.derivative(s);
            let mut r = SVector::<f64, 5>::zeros();
            r.fixed_rows_mut::<4>(0).copy_from(&(y - self.pb.path.eval(s)));
            r[4] = s;
            // constant shift from the condensed defects
            let off = &offsets[k];
            r[0] += off[0];
            r[1] += off[1];
            r[2] += off[2];
            r[3] += off[8];
            // stage k depends only on the inputs of earlier stages
            for j in 0..lay.u(k) {
                let sv = s_sens[k][j];
                let col = SVector::<f64, 5>::new(
                    sens[k][(0, j)] - dp[0] * sv,
                    sens[k][(1, j)] - dp[1] * sv,
                    sens[k][(2, j)] - dp[2] * sv,
                    sens[k][(8, j)] - dp[3] * sv,
                    sv,
                );
                jac.fixed_view_mut::<5, 1>(5 * k, j).copy_from(&(l5t * col));
            }
            res.rows_mut(5 * k, 5).copy_from(&(l5t * r));
        }
        // only the input columns of the tracking Jacobian are nonzero
        let nin = 5 * n;
        let jin = jac.columns(0, nin);
        let jt = jin.transpose();
        let mut hessian = DMatrix::<f64>::zeros(nv, nv);
        hessian.view_mut((0, 0), (nin, nin)).gemm(2.0, &jt, &jin, 0.0);
        let mut gradient = DVector::<f64>::zeros(nv);
        gradient.rows_mut(0, nin).gemv(2.0, &jt, &res, 0.0);
        for k in 0..n {
            let (iu, inu) = (lay.u(k), lay.nu(k));
            let wu2 = self.wu * 2.0;
            for r in 0..4 {
                for c in 0..4 {
                    hessian[(iu + r, iu + c)] += wu2[(r, c)];
                }
            }
            let gu = wu2 * it.u[k];
            for r in 0..4 {
                gradient[iu + r] += gu[r];
            }
            hessian[(inu, inu)] += 2.0 * cfg.w_nu;
            gradient[inu] += 2.0 * cfg.w_nu * it.nu[k];
        }
        let slack_curv = (2.0 * cfg.soft_penalty_l2).max(MIN_SLACK_CURVATURE);
        for o in 0..lay.n_obs {
            for k in 1..=n {
                let i = lay.coll_slack(o, k);
                hessian[(i, i)] += slack_curv;
                gradient[i] += cfg.soft_penalty_l1;
            }
        }
        for k in 1..=n {
            let i = lay.s_slack(k);
            hessian[(i, i)] += slack_curv;
            gradient[i] += cfg.soft_penalty_l1;
        }
        if self.joint {
            for o in 0..lay.n_obs {
                for k in 1..=n {
                    let i = lay.lambda(o, k);
                    hessian[(i, i)] += cfg.rho_lambda;
                }
            }
        }

        let mut start = DVector::<f64>::zeros(nv);
        let mut start_penalty = 0.0;
        let mut rows = RowBuilder::new(nv);
        for k in 0..n {
            for c in 0..4 {
                let j = lay.u(k) + c;
                rows.push_sparse(&[(j, 1.0)], cfg.u_max[c] - it.u[k][c]);
                rows.push_sparse(&[(j, -1.0)], it.u[k][c] - cfg.u_min[c]);
            }
            rows.push_sparse(&[(lay.nu(k), 1.0)], cfg.nu_max - it.nu[k]);
            rows.push_sparse(&[(lay.nu(k), -1.0)], it.nu[k] - cfg.nu_min);
        }
        let neg = |v: &DVector<f64>| -> Vec<f64> { v.iter().map(|x| -x).collect() };
        for k in 1..=n {
            let z = it.z[k];
            rows.push(sd_sens[k].as_slice(), cfg.s_dot_max - z.s_dot);
            rows.push(&neg(&sd_sens[k]), z.s_dot - S_DOT_FLOOR);
            rows.push(&neg(&s_sens[k]), z.s - self.pb.path.s0());
            // soft upper bound s ≤ 0
            let mut row: Vec<f64> = s_sens[k].iter().copied().collect();
            let js = lay.s_slack(k);
            row[js] -= 1.0;
            rows.push(&row, -z.s);
            start[js] = z.s.max(0.0);
            start_penalty += soft_penalty(cfg, z.s);
        }
        for o in 0..lay.n_obs {
            for k in 1..=n {
                let pos = Vector3::new(it.x[k][0], it.x[k][1], it.x[k][2]);
                let w = self.obstacle_center(o, k);
                let m = self.metric(o, it.lambda[o][k])?;
                let kv = m.k(&pos, &w);
                let grad = m.grad_robot_center(&pos, &w);
                // K + ∇ᵀ(c_k + G_k p) [+ ∂K/∂λ Δλ] - σ ≤ -α
                let mut row = vec![0.0; nv];
                for (axis, gval) in grad.iter().enumerate() {
                    for (j, v) in sens[k].row(axis).iter().enumerate() {
                        row[j] += gval * v;
                    }
                }
                let js = lay.coll_slack(o, k);
                row[js] -= 1.0;
                if self.joint {
                    row[lay.lambda(o, k)] += m.dk_dlambda(&pos, &w);
                }
                let lin0 = kv + grad.dot(&offsets[k].fixed_rows::<3>(0).into_owned());
                rows.push(&row, -cfg.collision_margin - lin0);
                let viol0 = lin0 + cfg.collision_margin;
                start[js] = viol0.max(0.0);
                start_penalty += soft_penalty(cfg, viol0);
            }
        }
        for o in 0..lay.n_obs {
            for k in 1..=n {
                rows.push_sparse(&[(lay.coll_slack(o, k), -1.0)], 0.0);
            }
        }
        for k in 1..=n {
            rows.push_sparse(&[(lay.s_slack(k), -1.0)], 0.0);
        }
        if self.joint {
            for o in 0..lay.n_obs {
                let (lo, hi) = self.lambda_bounds[o];
                for k in 1..=n {
                    let j = lay.lambda(o, k);
                    rows.push_sparse(&[(j, 1.0)], hi - it.lambda[o][k]);
                    rows.push_sparse(&[(j, -1.0)], it.lambda[o][k] - lo);
                }
            }
        }
        if let Some(b) = &cfg.state_box {
            for k in 1..=n {
                let base = it.x[k] + offsets[k];
                for i in 0..NX {
                    let row: Vec<f64> = sens[k].row(i).iter().copied().collect();
                    if b.upper[i].is_finite() {
                        rows.push(&row, b.upper[i] - base[i]);
                    }
                    if b.lower[i].is_finite() {
                        let negrow: Vec<f64> = row.iter().map(|v| -v).collect();
                        rows.push(&negrow, base[i] - b.lower[i]);
                    }
                }
            }
        }
        let (constraints, bounds) = rows.finish();
        Ok(Linearization {
            qp: Qp {
                hessian,
                gradient,
                constraints,
                bounds,
            },
            start,
            offsets,
            sens,
            start_penalty,
        })
    }

    fn apply_step(&self, it: &Iterate, lin: &Linearization, p: &DVector<f64>, alpha: f64) -> Iterate {
        let cfg = self.pb.cfg;
        let n = cfg.horizon;
        let lay = self.layout;
        let mut next = it.clone();
        for k in 0..n {
            for c in 0..4 {
                next.u[k][c] += alpha * p[lay.u(k) + c];
            }
            next.nu[k] += alpha * p[lay.nu(k)];
        }
        for k in 1..=n {
            let dx = &lin.sens[k] * p;
            for i in 0..NX {
                next.x[k][i] += alpha * (lin.offsets[k][i] + dx[i]);
            }
        }
        next.z = simulate_timing(it.z[0], &next.nu, cfg.delta);
        if self.joint {
            for o in 0..lay.n_obs {
                let (lo, hi) = self.lambda_bounds[o];
                for k in 1..=n {
                    next.lambda[o][k] = (next.lambda[o][k] + alpha * p[lay.lambda(o, k)]).clamp(lo, hi);
                }
            }
        }
        next
    }

    /// Second-order correction: the trial inputs simulated from `x_0`, which
    /// removes every defect.
    fn rollout(&self, it: &Iterate) -> Iterate {
        let mut next = it.clone();
        for k in 0..self.pb.cfg.horizon {
            next.x[k + 1] = step_rk4(&QuadrotorState(next.x[k]), &QuadrotorInput(next.u[k]), self.pb.vehicle, self.pb.cfg.delta).0;
        }
        next
    }

    fn run(&self, mut it: Iterate, warm_active: &[usize]) -> Result<SolveOutput, OcpError> {
        let started = Instant::now();
        let cfg = self.pb.cfg;
        let qp_solver = ActiveSetSolver::default();
        let mut active: Vec<usize> = warm_active.to_vec();
        let mut eval = self.evaluate(&it)?;
        let mut merit_history = vec![eval.merit()];
        let mut status = SolveStatus::MaxIters;
        let mut kkt_residual = f64::INFINITY;
        let mut iterations = 0;

        for _ in 0..cfg.sqp_max_iters {
            let lin = self.linearize(&it)?;
            let sol = match qp_solver.solve(&lin.qp, Some(&lin.start), &active) {
                Ok(sol) => sol,
                Err(QpError::Infeasible(_)) | Err(QpError::NotConvex) | Err(QpError::IterationLimit) => {
                    status = SolveStatus::Infeasible;
                    break;
                }
                Err(e @ QpError::Dimension(_)) => panic!("internal QP assembly error: {e}"),
            };
            active = sol.active_set.clone();
            let p = &sol.x;

            let qp = &lin.qp;
            let stationarity = stationarity(&lin, &sol.multipliers);
            let slack_at_start = &qp.bounds - &qp.constraints * &lin.start;
            let complementarity = sol
                .multipliers
                .iter()
                .zip(slack_at_start.iter())
                .map(|(mu, s)| (mu * s.max(0.0)).abs())
                .fold(0.0, f64::max);
            let primal = slack_at_start.iter().fold(0.0f64, |acc, s| acc.max(-s));
            kkt_residual = stationarity.max(complementarity).max(primal).max(eval.max_defect);
            if kkt_residual <= cfg.kkt_tol && eval.max_defect <= DEFECT_TOL {
                status = SolveStatus::Converged;
                break;
            }

            let predicted = (lin.start_penalty + DEFECT_PENALTY * eval.defect_l1 - qp.objective(p)).max(0.0);
            let phi0 = eval.merit();
            let mut alpha = 1.0;
            let mut accepted = None;
            'search: while alpha >= MIN_STEP {
                let lifted = self.apply_step(&it, &lin, p, alpha);
                let rolled = self.rollout(&lifted);
                for trial in [lifted, rolled] {
                    let trial_eval = self.evaluate(&trial)?;
                    if trial_eval.merit() <= phi0 - ARMIJO * alpha * predicted {
                        accepted = Some((trial, trial_eval));
                        break 'search;
                    }
                }
                alpha *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some((trial, trial_eval)) => {
                    it = trial;
                    eval = trial_eval;
                    merit_history.push(eval.merit());
                }
                None => break,
            }
        }

        Ok(SolveOutput {
            states: it.x.iter().map(|x| QuadrotorState(*x)).collect(),
            timing_states: it.z.clone(),
            inputs: it.u.iter().map(|u| QuadrotorInput(*u)).collect(),
            virtual_inputs: it.nu.clone(),
            lambda_params: it.lambda.clone(),
            cost: eval.cost(),
            kkt_residual,
            status,
            wall_time: started.elapsed().as_secs_f64(),
            slack_max: eval.slack_max.max(0.0),
            max_defect: eval.max_defect,
            iterations,
            merit_history,
            qp_active_set: active,
        })
    }
}

/// Gradient of the Lagrangian at the current iterate. The slack entries of
/// the QP start carry the current constraint violation, so the objective
/// gradient is taken there rather than at zero.
fn stationarity(lin: &Linearization, multipliers: &DVector<f64>) -> f64 {
    let qp = &lin.qp;
    (&qp.gradient + &qp.hessian * &lin.start + qp.constraints.tr_mul(multipliers)).amax()
}

/// Projects `ν` so that `ṡ` stays inside `[S_DOT_FLOOR, s_dot_max]`.
fn repair_virtual_inputs(z0: PathTimingState, nu: &mut [f64], cfg: &OcpConfig) {
    let mut s_dot = z0.s_dot;
    for v in nu.iter_mut() {
        let lo = ((S_DOT_FLOOR - s_dot) / cfg.delta).max(cfg.nu_min);
        let hi = ((cfg.s_dot_max - s_dot) / cfg.delta).min(cfg.nu_max);
        *v = if lo <= hi { v.clamp(lo, hi) } else { (lo + hi) * 0.5 };
        s_dot += cfg.delta * *v;
    }
}

fn initial_iterate(
    pb: &OcpProblem<'_>,
    x0: &QuadrotorState,
    z0: PathTimingState,
    lambda: Vec<Vec<f64>>,
    warm: Option<&SolveOutput>,
) -> Result<Iterate, OcpError> {
    let cfg = pb.cfg;
    let n = cfg.horizon;
    let (mut u, mut nu, mut x) = match warm {
        Some(w) => {
            if w.states.len() != n + 1 || w.inputs.len() != n || w.virtual_inputs.len() != n {
                return Err(OcpError::WarmShape);
            }
            (
                w.inputs.iter().map(|u| u.0).collect::<Vec<_>>(),
                w.virtual_inputs.clone(),
                w.states.iter().map(|x| x.0).collect::<Vec<_>>(),
            )
        }
        None => (vec![InputVec::zeros(); n], vec![0.0; n], vec![x0.0; n + 1]),
    };
    x[0] = x0.0;
    for uk in u.iter_mut() {
        for c in 0..4 {
            uk[c] = uk[c].clamp(cfg.u_min[c], cfg.u_max[c]);
        }
    }
    repair_virtual_inputs(z0, &mut nu, cfg);
    let z = simulate_timing(z0, &nu, cfg.delta);
    Ok(Iterate { u, nu, x, z, lambda })
}

fn check_lambda(pb: &OcpProblem<'_>, lambda_bar: &[Vec<f64>]) -> Result<(), OcpError> {
    let n = pb.cfg.horizon;
    if lambda_bar.len() != pb.obstacles.len() || lambda_bar.iter().any(|l| l.len() != n + 1) {
        return Err(OcpError::LambdaShape {
            got: lambda_bar.len(),
            len: lambda_bar.first().map_or(0, |l| l.len()),
            want: pb.obstacles.len(),
            horizon: n + 1,
        });
    }
    for &l in lambda_bar.iter().flatten() {
        if !(0.0..=1.0).contains(&l) {
            return Err(OcpError::LambdaRange(l));
        }
    }
    Ok(())
}

fn make_solver<'a>(pb: OcpProblem<'a>, t_now: f64, joint: bool) -> Result<Solver<'a>, OcpError> {
    pb.cfg.validate().map_err(OcpError::Config)?;
    let lambda_bounds = pb
        .obstacles
        .iter()
        .map(|o| {
            let lo = if o.base.is_strictly_pd() { 0.0 } else { DEFAULT_LAMBDA_TOL };
            (lo, 1.0)
        })
        .collect();
    Ok(Solver {
        pb,
        t_now,
        joint,
        layout: Layout {
            n: pb.cfg.horizon,
            n_obs: pb.obstacles.len(),
            joint,
        },
        lambda_bounds,
        wy: mat4(&pb.cfg.w_y),
        wu: mat4(&pb.cfg.w_u),
    })
}

/// Solves the problem with `λ̄` fixed (one length-`N+1` vector per obstacle).
///
/// `warm` must already be aligned with the current time; its states seed the
/// shooting nodes and its QP working set seeds the subsolver.
pub fn solve_parameterized(
    pb: &OcpProblem<'_>,
    x0: &QuadrotorState,
    z0: PathTimingState,
    lambda_bar: &[Vec<f64>],
    t_now: f64,
    warm: Option<&SolveOutput>,
) -> Result<SolveOutput, OcpError> {
    check_lambda(pb, lambda_bar)?;
    let solver = make_solver(*pb, t_now, false)?;
    let it = initial_iterate(pb, x0, z0, lambda_bar.to_vec(), warm)?;
    solver.run(it, warm.map_or(&[], |w| &w.qp_active_set))
}

/// Solves the problem with `λ_k` as decision variables (`k = 1..N`), each
/// with Hessian regularization `rho_lambda`. `λ_0` is set to the minimizer of
/// `K` at the measured state. Provided for comparison with the
/// parameterized problem.
pub fn solve_joint(
    pb: &OcpProblem<'_>,
    x0: &QuadrotorState,
    z0: PathTimingState,
    t_now: f64,
    warm: Option<&SolveOutput>,
) -> Result<SolveOutput, OcpError> {
    let solver = make_solver(*pb, t_now, true)?;
    let n = pb.cfg.horizon;
    let seed_states: Vec<StateVec> = match warm {
        Some(w) if w.states.len() == n + 1 => w.states.iter().map(|x| x.0).collect(),
        _ => vec![x0.0; n + 1],
    };
    let robot = Ellipsoid::new(*pb.robot_shape, Vector3::zeros())?;
    let mut lambda = Vec::with_capacity(pb.obstacles.len());
    for (o, obs) in pb.obstacles.iter().enumerate() {
        let mut traj = Vec::with_capacity(n + 1);
        for (k, xs) in seed_states.iter().enumerate() {
            let x = if k == 0 { x0.0 } else { *xs };
            let body = robot.with_center(Vector3::new(x[0], x[1], x[2]));
            let v = minimize_k(&body, &obs.at(t_now + k as f64 * pb.cfg.delta), DEFAULT_LAMBDA_TOL)?;
            traj.push(v.lambda_star.clamp(solver.lambda_bounds[o].0, 1.0));
        }
        lambda.push(traj);
    }
    let it = initial_iterate(pb, x0, z0, lambda, warm)?;
    solver.run(it, warm.map_or(&[], |w| &w.qp_active_set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn drone_shape() -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(177.78, 177.78, 1975.3))
    }

    #[test]
    fn stage_cost_zero_on_path_end() {
        let path = Path::demo();
        let cfg = OcpConfig::default();
        let y = path.eval(0.0);
        let c = stage_cost(&y, &PathTimingState::new(0.0, 0.1), &QuadrotorInput::hover(), 0.0, &path, &cfg);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn stage_cost_identity_weights() {
        let path = Path::demo();
        let cfg = OcpConfig {
            w_y: diag4([1.0; 4]),
            w_u: diag4([1.0; 4]),
            w_s: 1.0,
            w_nu: 1.0,
            ..OcpConfig::default()
        };
        let y = path.eval(0.0) + SVector::<f64, 4>::new(1.0, 0.0, 0.0, 0.0);
        let c = stage_cost(&y, &PathTimingState::new(0.0, 0.1), &QuadrotorInput::hover(), 0.0, &path, &cfg);
        assert_relative_eq!(c, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(OcpConfig::default().validate().is_ok());
        let bad = OcpConfig {
            nu_min: 0.5,
            ..OcpConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = OcpConfig::default();
        bad.w_y[0][1] = 10.0;
        assert!(bad.validate().is_err());
        let bad = OcpConfig {
            horizon: 0,
            ..OcpConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_uses_listed_names() {
        let cfg = OcpConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        for key in [
            "horizon", "delta", "w_y", "w_s", "w_u", "w_nu", "u_min", "u_max", "nu_min", "nu_max", "s_dot_max",
            "state_box", "soft_penalty_l1", "soft_penalty_l2", "collision_margin", "sqp_max_iters", "kkt_tol",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: OcpConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hover_on_path_end_is_near_zero_cost() {
        let path = Path::line(
            SVector::<f64, 4>::new(-1.0, 0.0, 1.0, 0.0),
            SVector::<f64, 4>::new(0.0, 0.0, 1.0, 0.0),
            -1.0,
        );
        let cfg = OcpConfig::default();
        let vehicle = VehicleParams::default();
        let shape = drone_shape();
        let pb = OcpProblem {
            cfg: &cfg,
            path: &path,
            vehicle: &vehicle,
            robot_shape: &shape,
            obstacles: &[],
        };
        let p0 = path.eval(0.0);
        let x0 = QuadrotorState::at_rest(Vector3::new(p0[0], p0[1], p0[2]), p0[3]);
        let out = solve_parameterized(&pb, &x0, PathTimingState::new(0.0, S_DOT_FLOOR), &[], 0.0, None).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        // only the s ≤ 0 penalty from the ṡ floor remains
        assert!(out.cost < 1e-2, "cost {}", out.cost);
        assert!(out.max_defect <= DEFECT_TOL);
        for u in &out.inputs {
            assert!(u.0.amax() < 1e-3);
        }
        assert_eq!(out.states[0], x0);
    }

    #[test]
    fn far_obstacle_is_inactive() {
        let path = Path::demo();
        let cfg = OcpConfig::default();
        let vehicle = VehicleParams::default();
        let shape = drone_shape();
        let p0 = path.eval(-1.0);
        let x0 = QuadrotorState::at_rest(Vector3::new(p0[0], p0[1], p0[2]), p0[3]);
        let z0 = PathTimingState::new(-1.0, S_DOT_FLOOR);
        let free = OcpProblem {
            cfg: &cfg,
            path: &path,
            vehicle: &vehicle,
            robot_shape: &shape,
            obstacles: &[],
        };
        let reference = solve_parameterized(&free, &x0, z0, &[], 0.0, None).unwrap();
        let far = [ObstacleTrack::fixed(
            Ellipsoid::new(
                Matrix3::new(234.57, -67.42, 0.0, -67.42, 190.76, 0.0, 0.0, 0.0, 35.44),
                Vector3::new(100.0, 0.16, 0.5),
            )
            .unwrap(),
        )];
        let pb = OcpProblem { obstacles: &far, ..free };
        let out = solve_parameterized(&pb, &x0, z0, &[vec![0.5; cfg.horizon + 1]], 0.0, None).unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert!((out.cost - reference.cost).abs() <= 1e-8);
        for (a, b) in out.merit_history.windows(2).map(|w| (w[0], w[1])) {
            assert!(b <= a);
        }
    }

    #[test]
    fn rejects_bad_lambda() {
        let path = Path::demo();
        let cfg = OcpConfig::default();
        let vehicle = VehicleParams::default();
        let shape = drone_shape();
        let obs = [ObstacleTrack::fixed(Ellipsoid::sphere(0.1, Vector3::new(0.2, 0.16, 0.5)).unwrap())];
        let pb = OcpProblem {
            cfg: &cfg,
            path: &path,
            vehicle: &vehicle,
            robot_shape: &shape,
            obstacles: &obs,
        };
        let x0 = QuadrotorState::zeros();
        let z0 = PathTimingState::new(-1.0, S_DOT_FLOOR);
        assert!(matches!(
            solve_parameterized(&pb, &x0, z0, &[vec![0.5; 3]], 0.0, None),
            Err(OcpError::LambdaShape { .. })
        ));
        assert!(matches!(
            solve_parameterized(&pb, &x0, z0, &[vec![1.5; cfg.horizon + 1]], 0.0, None),
            Err(OcpError::LambdaRange(_))
        ));
    }
}
