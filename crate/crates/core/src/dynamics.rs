//! Quadrotor model with first-order attitude lags, its RK4 discretization,
//! and the double-integrator timing law that drives the path parameter.
//!
//! State `x = [ξ, ξ̇, Θ]` (position, velocity, roll/pitch/yaw), input
//! `u = [ΔT, φ_cmd, θ_cmd, ψ̇_cmd]` where `ΔT` is the thrust deviation from
//! hover. Roll and pitch follow their commands through first-order lags; yaw
//! integrates the commanded rate.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

pub const NX: usize = 9;
pub const NU: usize = 4;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;
pub type StateJacobian = SMatrix<f64, NX, NX>;
pub type InputJacobian = SMatrix<f64, NX, NU>;

/// Position, velocity and attitude, stored as one 9-vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuadrotorState(pub StateVec);

impl QuadrotorState {
    pub fn zeros() -> Self {
        Self(StateVec::zeros())
    }

    /// At rest with the given position and yaw.
    pub fn at_rest(position: Vector3<f64>, yaw: f64) -> Self {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&position);
        x[8] = yaw;
        Self(x)
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    /// Roll, pitch, yaw.
    pub fn attitude(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(6).into_owned()
    }

    pub fn yaw(&self) -> f64 {
        self.0[8]
    }
}

/// Thrust deviation and attitude setpoints sent to the inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuadrotorInput(pub InputVec);

impl QuadrotorInput {
    pub fn hover() -> Self {
        Self(InputVec::zeros())
    }

    pub fn new(thrust_delta: f64, roll_cmd: f64, pitch_cmd: f64, yaw_rate_cmd: f64) -> Self {
        Self(InputVec::new(thrust_delta, roll_cmd, pitch_cmd, yaw_rate_cmd))
    }

    pub fn thrust_delta(&self) -> f64 {
        self.0[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub gravity: f64,
    pub roll_lag: f64,
    pub pitch_lag: f64,
}

impl Default for VehicleParams {
    /// Crazyflie-sized defaults; the lag constants are nominal guesses.
    fn default() -> Self {
        Self {
            mass: 0.031,
            gravity: 9.81,
            roll_lag: 0.1,
            pitch_lag: 0.1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("roll_lag", self.roll_lag),
            ("pitch_lag", self.pitch_lag),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be strictly positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }
}

/// Continuous-time vector field.
pub fn f_continuous(x: &QuadrotorState, u: &QuadrotorInput, p: &VehicleParams) -> StateVec {
    let x = &x.0;
    let u = &u.0;
    let (sphi, cphi) = x[6].sin_cos();
    let (sth, cth) = x[7].sin_cos();
    let (spsi, cpsi) = x[8].sin_cos();
    let acc = u[0] / p.mass + p.gravity;

    let mut dx = StateVec::zeros();
    dx[0] = x[3];
    dx[1] = x[4];
    dx[2] = x[5];
    dx[3] = (sphi * spsi + cphi * cpsi * sth) * acc;
    dx[4] = (cphi * spsi * sth - cpsi * sphi) * acc;
    dx[5] = -p.gravity + cphi * cth * acc;
    dx[6] = (u[1] - x[6]) / p.roll_lag;
    dx[7] = (u[2] - x[7]) / p.pitch_lag;
    dx[8] = u[3];
    dx
}

/// Jacobians of [`f_continuous`] with respect to state and input.
pub fn f_jacobians(x: &StateVec, u: &InputVec, p: &VehicleParams) -> (StateJacobian, InputJacobian) {
    let (sphi, cphi) = x[6].sin_cos();
    let (sth, cth) = x[7].sin_cos();
    let (spsi, cpsi) = x[8].sin_cos();
    let acc = u[0] / p.mass + p.gravity;

    let mut fx = StateJacobian::zeros();
    fx[(0, 3)] = 1.0;
    fx[(1, 4)] = 1.0;
    fx[(2, 5)] = 1.0;

    // ẍ
    fx[(3, 6)] = (cphi * spsi - sphi * cpsi * sth) * acc;
    fx[(3, 7)] = cphi * cpsi * cth * acc;
    fx[(3, 8)] = (sphi * cpsi - cphi * spsi * sth) * acc;
    // ÿ
    fx[(4, 6)] = (-sphi * spsi * sth - cpsi * cphi) * acc;
    fx[(4, 7)] = cphi * spsi * cth * acc;
    fx[(4, 8)] = (cphi * cpsi * sth + spsi * sphi) * acc;
    // z̈
    fx[(5, 6)] = -sphi * cth * acc;
    fx[(5, 7)] = -cphi * sth * acc;

    fx[(6, 6)] = -1.0 / p.roll_lag;
    fx[(7, 7)] = -1.0 / p.pitch_lag;

    let mut fu = InputJacobian::zeros();
    fu[(3, 0)] = (sphi * spsi + cphi * cpsi * sth) / p.mass;
    fu[(4, 0)] = (cphi * spsi * sth - cpsi * sphi) / p.mass;
    fu[(5, 0)] = cphi * cth / p.mass;
    fu[(6, 1)] = 1.0 / p.roll_lag;
    fu[(7, 2)] = 1.0 / p.pitch_lag;
    fu[(8, 3)] = 1.0;
    (fx, fu)
}

/// One classical Runge–Kutta step with the input held constant.
pub fn step_rk4(x: &QuadrotorState, u: &QuadrotorInput, p: &VehicleParams, delta: f64) -> QuadrotorState {
    let f = |s: StateVec| f_continuous(&QuadrotorState(s), u, p);
    let x0 = x.0;
    let k1 = f(x0);
    let k2 = f(x0 + k1 * (0.5 * delta));
    let k3 = f(x0 + k2 * (0.5 * delta));
    let k4 = f(x0 + k3 * delta);
    QuadrotorState(x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (delta / 6.0))
}

/// [`step_rk4`] together with its exact Jacobians, obtained by differentiating
/// through the four stages.
pub fn step_with_jacobians(
    x: &QuadrotorState,
    u: &QuadrotorInput,
    p: &VehicleParams,
    delta: f64,
) -> (QuadrotorState, StateJacobian, InputJacobian) {
    let h = delta;
    let uu = u.0;
    let x0 = x.0;
    let eye = StateJacobian::identity();

    let eval = |s: StateVec| {
        let f = f_continuous(&QuadrotorState(s), u, p);
        let (fx, fu) = f_jacobians(&s, &uu, p);
        (f, fx, fu)
    };

    let (k1, a1, b1) = eval(x0);
    let dk1x = a1;
    let dk1u = b1;

    let x2 = x0 + k1 * (0.5 * h);
    let (k2, a2, b2) = eval(x2);
    let dk2x = a2 * (eye + dk1x * (0.5 * h));
    let dk2u = a2 * dk1u * (0.5 * h) + b2;

    let x3 = x0 + k2 * (0.5 * h);
    let (k3, a3, b3) = eval(x3);
    let dk3x = a3 * (eye + dk2x * (0.5 * h));
    let dk3u = a3 * dk2u * (0.5 * h) + b3;

    let x4 = x0 + k3 * h;
    let (k4, a4, b4) = eval(x4);
    let dk4x = a4 * (eye + dk3x * h);
    let dk4u = a4 * dk3u * h + b4;

    let w = h / 6.0;
    let next = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w;
    let jx = eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * w;
    let ju = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * w;
    (QuadrotorState(next), jx, ju)
}

/// Jacobians of [`step_rk4`] with respect to state and input.
pub fn jacobians(
    x: &QuadrotorState,
    u: &QuadrotorInput,
    p: &VehicleParams,
    delta: f64,
) -> (StateJacobian, InputJacobian) {
    let (_, jx, ju) = step_with_jacobians(x, u, p, delta);
    (jx, ju)
}

/// Output `y = [ξ, ψ]` matched against the path.
pub fn output(x: &QuadrotorState) -> SVector<f64, 4> {
    SVector::<f64, 4>::new(x.0[0], x.0[1], x.0[2], x.0[8])
}

/// Path parameter and its rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTimingState {
    pub s: f64,
    pub s_dot: f64,
}

impl PathTimingState {
    pub fn new(s: f64, s_dot: f64) -> Self {
        Self { s, s_dot }
    }
}

/// Exact zero-order-hold step of `s̈ = ν`.
pub fn step_timing(z: &PathTimingState, nu: f64, delta: f64) -> PathTimingState {
    PathTimingState {
        s: z.s + delta * z.s_dot + 0.5 * delta * delta * nu,
        s_dot: z.s_dot + delta * nu,
    }
}
