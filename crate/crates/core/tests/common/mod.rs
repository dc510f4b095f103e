//! Random instances and independent oracles shared by the integration tests.

#![allow(dead_code)]

use ellipsoid_mpc::dynamics::{QuadrotorInput, QuadrotorState, StateVec, VehicleParams};
use ellipsoid_mpc::geometry::Ellipsoid;
use ellipsoid_mpc::qp::Qp;
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle).matrix()
}

/// Strictly positive definite shape with semi-axes in `[r_min, r_max]`.
pub fn random_shape(rng: &mut ChaCha8Rng, r_min: f64, r_max: f64) -> Matrix3<f64> {
    let r = random_rotation(rng);
    let eig = Vector3::from_fn(|_, _| rng.random_range(r_min..r_max).powi(-2));
    r * Matrix3::from_diagonal(&eig) * r.transpose()
}

/// Pair of ellipsoids whose centers are `spread` times the summed largest
/// semi-axes apart at most, so both overlapping and separate pairs occur.
pub fn random_pair(rng: &mut ChaCha8Rng, spread: f64) -> (Ellipsoid, Ellipsoid) {
    let (r_min, r_max) = (0.2, 2.0);
    let a = Ellipsoid::new(random_shape(rng, r_min, r_max), Vector3::zeros()).unwrap();
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let dist = rng.random_range(0.0..spread * 2.0 * r_max);
    let b = Ellipsoid::new(random_shape(rng, r_min, r_max), Vector3::from(dir) * dist).unwrap();
    (a, b)
}

/// Vector field written from the model equations with an explicit rotation
/// matrix, independent of the library implementation.
pub fn f_oracle(x: &StateVec, u: &[f64; 4], p: &VehicleParams) -> StateVec {
    let rot = Rotation3::from_euler_angles(x[6], x[7], x[8]);
    let thrust = rot * Vector3::z() * (u[0] / p.mass + p.gravity);
    let acc = thrust - Vector3::z() * p.gravity;
    StateVec::from_column_slice(&[
        x[3],
        x[4],
        x[5],
        acc.x,
        acc.y,
        acc.z,
        (u[1] - x[6]) / p.roll_lag,
        (u[2] - x[7]) / p.pitch_lag,
        u[3],
    ])
}

/// Fine fixed-step RK4 with sub-step `h` over `delta`.
pub fn fine_oracle(x: &QuadrotorState, u: &QuadrotorInput, p: &VehicleParams, delta: f64, h: f64) -> StateVec {
    let steps = (delta / h).round() as usize;
    let h = delta / steps as f64;
    let u = [u.0[0], u.0[1], u.0[2], u.0[3]];
    let mut s = x.0;
    for _ in 0..steps {
        let k1 = f_oracle(&s, &u, p);
        let k2 = f_oracle(&(s + k1 * (h / 2.0)), &u, p);
        let k3 = f_oracle(&(s + k2 * (h / 2.0)), &u, p);
        let k4 = f_oracle(&(s + k3 * h), &u, p);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    s
}

/// Random state and input with attitudes and commands inside ±`angle`.
pub fn random_state_input(rng: &mut ChaCha8Rng, angle: f64) -> (QuadrotorState, QuadrotorInput) {
    let mut x = StateVec::zeros();
    for i in 0..3 {
        x[i] = rng.random_range(-2.0..2.0);
        x[3 + i] = rng.random_range(-1.0..1.0);
        x[6 + i] = rng.random_range(-angle..angle);
    }
    x[8] = rng.random_range(-3.0..3.0);
    let u = QuadrotorInput::new(
        rng.random_range(-0.1..0.1),
        rng.random_range(-angle..angle),
        rng.random_range(-angle..angle),
        rng.random_range(-1.0..1.0),
    );
    (QuadrotorState(x), u)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Strictly convex QP with a known interior point, `n ≤ 8` variables.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Qp {
    let g = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let hessian = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
    let gradient = DVector::from_fn(n, |_, _| normal(rng) * 3.0);
    let constraints = DMatrix::from_fn(m, n, |_, _| normal(rng));
    let interior = DVector::from_fn(n, |_, _| normal(rng));
    let bounds = &constraints * &interior + DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    Qp {
        hessian,
        gradient,
        constraints,
        bounds,
    }
}

/// Minimizer by enumerating every candidate active set and solving its KKT
/// system; the feasible, dual-feasible candidate is the unique optimum.
pub fn qp_enumeration_oracle(qp: &Qp) -> DVector<f64> {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > n {
            continue;
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&qp.gradient));
        for (j, &i) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = qp.constraints[(i, c)];
                kkt[(c, n + j)] = qp.constraints[(i, c)];
            }
            rhs[n + j] = qp.bounds[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let mu = sol.rows(n, k);
        if mu.iter().any(|&v| v < -1e-9) || qp.max_violation(&x) > 1e-9 {
            continue;
        }
        let obj = qp.objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.expect("a feasible strictly convex QP has a KKT point").1
}

/// Strictly positive definite ellipsoid from semi-axes, an axis-angle
/// rotation and a center.
pub fn ellipsoid_strategy(center_range: f64) -> impl proptest::strategy::Strategy<Value = Ellipsoid> {
    use proptest::prelude::*;
    (
        prop::array::uniform3(0.2f64..2.0),
        prop::array::uniform3(-1.0f64..1.0),
        0.0f64..std::f64::consts::PI,
        prop::array::uniform3(-center_range..center_range),
    )
        .prop_map(|(axes, axis, angle, center)| {
            let axis = Vector3::from(axis) + Vector3::new(0.0, 0.0, 1e-3);
            let r = *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix();
            let d = Matrix3::from_diagonal(&Vector3::from(axes).map(|a| a.powi(-2)));
            Ellipsoid::new(r * d * r.transpose(), Vector3::from(center)).unwrap()
        })
}
