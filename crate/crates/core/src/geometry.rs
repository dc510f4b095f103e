//! Ellipsoids and the `K(λ)` overlap test.
//!
//! An ellipsoid is the set `{x : (x - r)ᵀ P (x - r) ≤ 1}` with a symmetric
//! positive semi-definite shape matrix `P` and center `r`. For two ellipsoids
//! `A` (center `v`) and `B` (center `w`) the scalar function
//!
//! ```text
//! K(λ) = 1 - λ vᵀAv - (1-λ) wᵀBw + m_λᵀ E_λ m_λ
//! E_λ  = λA + (1-λ)B
//! m_λ  = E_λ⁻¹ (λAv + (1-λ)Bw)
//! ```
//!
//! is convex in `λ ∈ [0, 1]`, and the two sets are disjoint iff `K(λ) < 0`
//! for some `λ`. Three algebraically equivalent evaluation routes live here:
//! the fused form above ([`k_fused`]), the Minkowski-sum form
//! ([`k_minkowski`]) and the quadratic-in-displacement form used by the
//! optimal control problem ([`SeparationMetric`]).

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative eigenvalue threshold (against the trace) separating PSD from PD.
pub const PD_EIGEN_RTOL: f64 = 1e-10;
/// Default classification band around `K = 0`.
pub const DEFAULT_TOUCH_TOL: f64 = 1e-6;
/// Default bisection precision on `λ`.
pub const DEFAULT_LAMBDA_TOL: f64 = 1e-4;

const SINGULAR_COND: f64 = 1e12;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("shape matrix has non-finite entries")]
    NonFinite,
    #[error("shape matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("E_λ = λA + (1-λ)B is numerically singular at λ = {lambda}")]
    SingularCombination { lambda: f64 },
    #[error("shape matrix is only positive semi-definite; use the fused formulation")]
    DegenerateShape,
    #[error("λ = {0} lies on the boundary of (0, 1)")]
    EndpointLambda(f64),
    #[error("λ = {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("ellipsoid must be strictly positive definite")]
    NotStrictlyPd,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Closed ellipsoid `{x : (x - center)ᵀ shape (x - center) ≤ 1}`.
///
/// The shape matrix is symmetrized on construction. Positive semi-definite
/// shapes are accepted, so unbounded sets such as infinite cylinders can be
/// used as obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EllipsoidJson", into = "EllipsoidJson")]
pub struct Ellipsoid {
    shape: Matrix3<f64>,
    center: Vector3<f64>,
    strictly_pd: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipsoidJson {
    shape: [[f64; 3]; 3],
    center: [f64; 3],
}

impl TryFrom<EllipsoidJson> for Ellipsoid {
    type Error = GeometryError;

    fn try_from(raw: EllipsoidJson) -> Result<Self> {
        let shape = Matrix3::from_fn(|i, j| raw.shape[i][j]);
        Ellipsoid::new(shape, Vector3::from(raw.center))
    }
}

impl From<Ellipsoid> for EllipsoidJson {
    fn from(e: Ellipsoid) -> Self {
        let mut shape = [[0.0; 3]; 3];
        for (i, row) in shape.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = e.shape[(i, j)];
            }
        }
        EllipsoidJson {
            shape,
            center: [e.center.x, e.center.y, e.center.z],
        }
    }
}

impl Ellipsoid {
    pub fn new(shape: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        if shape.iter().chain(center.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let shape = (shape + shape.transpose()) * 0.5;
        let trace = shape.trace();
        let min_eig = SymmetricEigen::new(shape).eigenvalues.min();
        if trace <= 0.0 || min_eig < -PD_EIGEN_RTOL * trace {
            return Err(GeometryError::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self {
            shape,
            center,
            strictly_pd: min_eig > PD_EIGEN_RTOL * trace,
        })
    }

    /// Sphere of the given radius.
    pub fn sphere(radius: f64, center: Vector3<f64>) -> Result<Self> {
        Self::new(Matrix3::identity() / (radius * radius), center)
    }

    /// Axis-aligned ellipsoid from its three semi-axes.
    pub fn from_semi_axes(semi_axes: Vector3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(
            Matrix3::from_diagonal(&semi_axes.map(|a| 1.0 / (a * a))),
            center,
        )
    }

    pub fn shape(&self) -> &Matrix3<f64> {
        &self.shape
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn is_strictly_pd(&self) -> bool {
        self.strictly_pd
    }

    /// Same shape, moved to `center`.
    pub fn with_center(&self, center: Vector3<f64>) -> Self {
        Self { center, ..*self }
    }

    pub fn quadratic_form(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.center;
        d.dot(&(self.shape * d))
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        self.quadratic_form(x) <= 1.0
    }
}

/// The fused ellipsoid `{x : (x - m_λ)ᵀ E_λ (x - m_λ) ≤ K(λ)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxiliaryEllipsoid {
    pub lambda: f64,
    pub e_lambda: Matrix3<f64>,
    pub m_lambda: Vector3<f64>,
    pub k_value: f64,
}

impl AuxiliaryEllipsoid {
    /// Membership test; empty whenever `k_value < 0`.
    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let d = x - self.m_lambda;
        d.dot(&(self.e_lambda * d)) <= self.k_value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Separate,
    Touching,
    Overlapping,
}

impl Classification {
    pub fn from_k(k: f64, touch_tol: f64) -> Self {
        if k < -touch_tol {
            Classification::Separate
        } else if k > touch_tol {
            Classification::Overlapping
        } else {
            Classification::Touching
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapVerdict {
    pub classification: Classification,
    pub k_min: f64,
    pub lambda_star: f64,
}

fn check_unit_interval(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(GeometryError::LambdaOutOfRange(lambda));
    }
    Ok(())
}

fn checked_inverse(m: &Matrix3<f64>, lambda: f64) -> Result<Matrix3<f64>> {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 || hi / lo > SINGULAR_COND {
        return Err(GeometryError::SingularCombination { lambda });
    }
    m.try_inverse()
        .ok_or(GeometryError::SingularCombination { lambda })
}

/// `K(λ)` through the fused auxiliary ellipsoid.
pub fn k_fused(lambda: f64, a: &Ellipsoid, b: &Ellipsoid) -> Result<AuxiliaryEllipsoid> {
    check_unit_interval(lambda)?;
    let (v, w) = (a.center, b.center);
    let av = a.shape * v;
    let bw = b.shape * w;
    let e_lambda = a.shape * lambda + b.shape * (1.0 - lambda);
    let e_inv = checked_inverse(&e_lambda, lambda)?;
    let m_lambda = e_inv * (av * lambda + bw * (1.0 - lambda));
    let k_value = 1.0 - lambda * v.dot(&av) - (1.0 - lambda) * w.dot(&bw)
        + m_lambda.dot(&(e_lambda * m_lambda));
    Ok(AuxiliaryEllipsoid {
        lambda,
        e_lambda,
        m_lambda,
        k_value,
    })
}

fn interior_inverses(lambda: f64, a: &Ellipsoid, b: &Ellipsoid) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    if !a.strictly_pd || !b.strictly_pd {
        return Err(GeometryError::DegenerateShape);
    }
    if lambda <= 0.0 || lambda >= 1.0 {
        return Err(if lambda == 0.0 || lambda == 1.0 {
            GeometryError::EndpointLambda(lambda)
        } else {
            GeometryError::LambdaOutOfRange(lambda)
        });
    }
    let a_inv = a.shape.try_inverse().ok_or(GeometryError::DegenerateShape)?;
    let b_inv = b.shape.try_inverse().ok_or(GeometryError::DegenerateShape)?;
    Ok((a_inv, b_inv))
}

/// Shape of the Minkowski over-approximation, `(B⁻¹/(1-λ) + A⁻¹/λ)⁻¹`.
fn minkowski_shape(lambda: f64, a_inv: &Matrix3<f64>, b_inv: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let s = b_inv / (1.0 - lambda) + a_inv / lambda;
    s.try_inverse()
        .map(|m| (m + m.transpose()) * 0.5)
        .ok_or(GeometryError::SingularCombination { lambda })
}

/// `K(λ)` through the Minkowski-sum form
/// `1 - ηᵀ (B⁻¹/(1-λ) + A⁻¹/λ)⁻¹ η` with `η = w - v`.
pub fn k_minkowski(lambda: f64, a: &Ellipsoid, b: &Ellipsoid) -> Result<f64> {
    let (a_inv, b_inv) = interior_inverses(lambda, a, b)?;
    let eta = b.center - a.center;
    let q = minkowski_shape(lambda, &a_inv, &b_inv)?;
    Ok(1.0 - eta.dot(&(q * eta)))
}

/// Analytic `dK/dλ` for strictly positive definite pairs.
pub fn dk_dlambda(lambda: f64, a: &Ellipsoid, b: &Ellipsoid) -> Result<f64> {
    let (a_inv, b_inv) = interior_inverses(lambda, a, b)?;
    let eta = b.center - a.center;
    let s_inv = minkowski_shape(lambda, &a_inv, &b_inv)?;
    let y = s_inv * eta;
    let mid = b_inv / ((1.0 - lambda) * (1.0 - lambda)) - a_inv / (lambda * lambda);
    Ok(y.dot(&(mid * y)))
}

fn dk_dlambda_fd(lambda: f64, a: &Ellipsoid, b: &Ellipsoid) -> Result<f64> {
    let hi = k_fused((lambda + FD_STEP).min(1.0), a, b)?;
    let lo = k_fused((lambda - FD_STEP).max(0.0), a, b)?;
    Ok((hi.k_value - lo.k_value) / (hi.lambda - lo.lambda))
}

/// Bracket on `λ` where `E_λ` is guaranteed invertible.
fn search_interval(a: &Ellipsoid, b: &Ellipsoid, lambda_tol: f64) -> (f64, f64) {
    let lo = if b.strictly_pd { 0.0 } else { lambda_tol };
    let hi = if a.strictly_pd { 1.0 } else { 1.0 - lambda_tol };
    (lo, hi)
}

/// Minimizes the convex function `K` over `λ ∈ [0, 1]` by bisection on the
/// sign of `dK/dλ` and classifies the pair with the default touch band.
pub fn minimize_k(a: &Ellipsoid, b: &Ellipsoid, lambda_tol: f64) -> Result<OverlapVerdict> {
    minimize_k_with_touch(a, b, lambda_tol, DEFAULT_TOUCH_TOL)
}

pub fn minimize_k_with_touch(
    a: &Ellipsoid,
    b: &Ellipsoid,
    lambda_tol: f64,
    touch_tol: f64,
) -> Result<OverlapVerdict> {
    assert!(lambda_tol > 0.0, "lambda_tol must be positive");
    let (lo_bound, hi_bound) = search_interval(a, b, lambda_tol);
    let analytic = a.strictly_pd && b.strictly_pd;
    let slope = |lambda: f64| {
        if analytic {
            dk_dlambda(lambda, a, b)
        } else {
            dk_dlambda_fd(lambda, a, b)
        }
    };

    let probe_lo = (lo_bound + lambda_tol).min(0.5);
    let probe_hi = (hi_bound - lambda_tol).max(0.5);
    let g_lo = slope(probe_lo)?;
    let g_hi = slope(probe_hi)?;

    let lambda_star = if g_lo >= 0.0 {
        lo_bound
    } else if g_hi <= 0.0 {
        hi_bound
    } else {
        let (mut lo, mut hi) = (probe_lo, probe_hi);
        let (mut s_lo, mut s_hi) = (g_lo, g_hi);
        while hi - lo > lambda_tol {
            let mid = 0.5 * (lo + hi);
            let s = slope(mid)?;
            if s > 0.0 {
                hi = mid;
                s_hi = s;
            } else {
                lo = mid;
                s_lo = s;
            }
        }
        // secant on the bracketed derivative tightens the estimate
        let t = s_lo / (s_lo - s_hi);
        if t.is_finite() {
            lo + t.clamp(0.0, 1.0) * (hi - lo)
        } else {
            0.5 * (lo + hi)
        }
    };

    let k_min = k_fused(lambda_star, a, b)?.k_value;
    Ok(OverlapVerdict {
        classification: Classification::from_k(k_min, touch_tol),
        k_min,
        lambda_star,
    })
}

/// Ellipsoid `E((B⁻¹/(1-λ) + A⁻¹/λ)⁻¹, w)` containing the Minkowski sum of
/// the two shapes, centered on `b`.
pub fn minkowski_outer(lambda: f64, a: &Ellipsoid, b: &Ellipsoid) -> Result<Ellipsoid> {
    let (a_inv, b_inv) = interior_inverses(lambda, a, b)?;
    let q = minkowski_shape(lambda, &a_inv, &b_inv)?;
    Ellipsoid::new(q, b.center)
}

/// `K` as a quadratic in the displacement of the two centers:
/// `K(λ) = 1 - (w - v)ᵀ Q(λ) (w - v)` with `Q(λ) = λ(1-λ) A E_λ⁻¹ B`.
///
/// `Q` depends only on the shapes, which makes this the convenient form for
/// the optimal control problem where the robot center is a decision
/// variable. Valid for positive semi-definite obstacles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationMetric {
    pub lambda: f64,
    pub q: Matrix3<f64>,
    /// `dQ/dλ`.
    pub dq: Matrix3<f64>,
}

impl SeparationMetric {
    pub fn new(lambda: f64, robot_shape: &Matrix3<f64>, obstacle_shape: &Matrix3<f64>) -> Result<Self> {
        check_unit_interval(lambda)?;
        let (a, b) = (robot_shape, obstacle_shape);
        let e = a * lambda + b * (1.0 - lambda);
        let e_inv = checked_inverse(&e, lambda)?;
        let aeb = a * e_inv * b;
        let q = aeb * (lambda * (1.0 - lambda));
        let dq = aeb * (1.0 - 2.0 * lambda)
            - a * e_inv * (a - b) * e_inv * b * (lambda * (1.0 - lambda));
        Ok(Self {
            lambda,
            q: (q + q.transpose()) * 0.5,
            dq: (dq + dq.transpose()) * 0.5,
        })
    }

    /// `K` for robot center `v` and obstacle center `w`.
    pub fn k(&self, v: &Vector3<f64>, w: &Vector3<f64>) -> f64 {
        let eta = w - v;
        1.0 - eta.dot(&(self.q * eta))
    }

    /// Gradient of `K` with respect to the robot center.
    pub fn grad_robot_center(&self, v: &Vector3<f64>, w: &Vector3<f64>) -> Vector3<f64> {
        self.q * (w - v) * 2.0
    }

    pub fn dk_dlambda(&self, v: &Vector3<f64>, w: &Vector3<f64>) -> f64 {
        let eta = w - v;
        -eta.dot(&(self.dq * eta))
    }
}

const ORACLE_RESTARTS: usize = 20;
const ORACLE_MAX_ITERS: usize = 20_000;
const ORACLE_SEED: u64 = 0x05ee_de11;

/// Minimum of `(x - w)ᵀ B (x - w)` over `x ∈ a`, computed without `K`.
///
/// The robot ellipsoid is parametrized as `x = v + A^{-1/2} u` with
/// `‖u‖ ≤ 1`, which turns the problem into a convex quadratic over the unit
/// ball solved by projected gradient descent from random restarts.
pub fn oracle_min_quadratic(a: &Ellipsoid, b: &Ellipsoid) -> Result<f64> {
    if !a.strictly_pd {
        return Err(GeometryError::NotStrictlyPd);
    }
    let eig = SymmetricEigen::new(a.shape);
    let inv_sqrt = eig.eigenvectors
        * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let offset = a.center - b.center;
    // f(u) = (offset + M u)ᵀ B (offset + M u)
    let hess = inv_sqrt * b.shape * inv_sqrt;
    let lip = 2.0 * SymmetricEigen::new(hess).eigenvalues.max().max(1e-300);
    let step = 1.0 / lip;
    let f = |u: &Vector3<f64>| {
        let d = offset + inv_sqrt * u;
        d.dot(&(b.shape * d))
    };
    let grad = |u: &Vector3<f64>| inv_sqrt * (b.shape * (offset + inv_sqrt * u)) * 2.0;
    let project = |u: Vector3<f64>| {
        let n = u.norm();
        if n > 1.0 {
            u / n
        } else {
            u
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
    let mut best = f64::INFINITY;
    for restart in 0..ORACLE_RESTARTS {
        let mut u = if restart == 0 {
            Vector3::zeros()
        } else {
            project(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        };
        for _ in 0..ORACLE_MAX_ITERS {
            let next = project(u - grad(&u) * step);
            let moved = (next - u).norm();
            u = next;
            if moved < 1e-14 {
                break;
            }
        }
        best = best.min(f(&u));
    }
    Ok(best)
}

/// Independent intersection test: the sets intersect iff the oracle minimum
/// is at most `1 + 1e-9`.
pub fn intersects_oracle(a: &Ellipsoid, b: &Ellipsoid) -> Result<bool> {
    Ok(oracle_min_quadratic(a, b)? <= 1.0 + 1e-9)
}

/// Like [`intersects_oracle`] but contact within `touch_band` (on the
/// quadratic form of `b`) counts as touching, not overlapping.
pub fn overlaps_oracle(a: &Ellipsoid, b: &Ellipsoid, touch_band: f64) -> Result<bool> {
    Ok(oracle_min_quadratic(a, b)? < 1.0 - touch_band)
}
