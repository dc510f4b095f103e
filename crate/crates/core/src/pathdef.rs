//! Geometric reference paths `p(s)`, `s ∈ [s₀, 0]`, in the output space
//! `(x, y, z, ψ)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

pub type PathPoint = SVector<f64, 4>;

/// A parametric curve evaluated on `[s0, 0]`.
pub trait PathFn: Send + Sync {
    fn eval(&self, s: f64) -> PathPoint;

    /// `dp/ds`. Defaults to central differences.
    fn derivative(&self, s: f64) -> PathPoint {
        let h = 1e-6;
        (self.eval(s + h) - self.eval(s - h)) / (2.0 * h)
    }
}

/// A reference path. Evaluation outside `[s0, 0]` is clamped.
#[derive(Clone)]
pub struct Path {
    curve: Arc<dyn PathFn>,
    s0: f64,
    spec: PathSpec,
}

impl fmt::Debug for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Path").field("s0", &self.s0).field("spec", &self.spec).finish()
    }
}

/// Serializable description of a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathSpec {
    /// The built-in demonstration path, written as the string `"demo"`.
    Named(String),
    Waypoints(WaypointPath),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointPath {
    pub s_samples: Vec<f64>,
    pub points: Vec<[f64; 4]>,
}

impl Path {
    pub fn new(curve: Arc<dyn PathFn>, s0: f64) -> Self {
        Self {
            curve,
            s0,
            spec: PathSpec::Named("custom".into()),
        }
    }

    /// The demonstration path: a diagonal sweep with an exponential bend,
    /// constant altitude 0.5 m, starting at `s₀ = -1`.
    pub fn demo() -> Self {
        Self {
            curve: Arc::new(DemoPath),
            s0: -1.0,
            spec: PathSpec::Named("demo".into()),
        }
    }

    /// Straight segment `start + (s - s0)/(-s0) · (end - start)`.
    pub fn line(start: PathPoint, end: PathPoint, s0: f64) -> Self {
        Self::new(Arc::new(LinePath { start, end, s0 }), s0)
    }

    pub fn from_waypoints(wp: &WaypointPath) -> Result<Self, String> {
        let spline = SplinePath::new(wp)?;
        let s0 = wp.s_samples[0];
        Ok(Self {
            curve: Arc::new(spline),
            s0,
            spec: PathSpec::Waypoints(wp.clone()),
        })
    }

    pub fn from_spec(spec: &PathSpec) -> Result<Self, String> {
        match spec {
            PathSpec::Named(name) if name == "demo" => Ok(Self::demo()),
            PathSpec::Named(name) => Err(format!("unknown built-in path `{name}`")),
            PathSpec::Waypoints(wp) => Self::from_waypoints(wp),
        }
    }

    pub fn spec(&self) -> &PathSpec {
        &self.spec
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    fn clamp(&self, s: f64) -> f64 {
        s.clamp(self.s0, 0.0)
    }

    pub fn eval(&self, s: f64) -> PathPoint {
        self.curve.eval(self.clamp(s))
    }

    /// `dp/ds`; zero outside the domain, consistent with clamping.
    pub fn derivative(&self, s: f64) -> PathPoint {
        if s < self.s0 || s > 0.0 {
            PathPoint::zeros()
        } else {
            self.curve.derivative(s)
        }
    }
}

struct DemoPath;

impl PathFn for DemoPath {
    fn eval(&self, s: f64) -> PathPoint {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let e = (-(6.0 * s + 5.8)).exp();
        let lin = 0.75 * s + 0.5;
        let bend = e * (2.25 * s + 2.175);
        PathPoint::new(
            r * (lin - bend),
            r * (lin + bend),
            0.5,
            (-(4.0 / 30.0) * (135.0 * s + 108.0) * e).atan() + std::f64::consts::FRAC_PI_4,
        )
    }

    fn derivative(&self, s: f64) -> PathPoint {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let e = (-(6.0 * s + 5.8)).exp();
        // d/ds [e (2.25 s + 2.175)] = e (2.25 - 6 (2.25 s + 2.175))
        let dbend = e * (2.25 - 6.0 * (2.25 * s + 2.175));
        let arg = -(4.0 / 30.0) * (135.0 * s + 108.0) * e;
        let darg = -(4.0 / 30.0) * e * (135.0 - 6.0 * (135.0 * s + 108.0));
        PathPoint::new(
            r * (0.75 - dbend),
            r * (0.75 + dbend),
            0.0,
            darg / (1.0 + arg * arg),
        )
    }
}

struct LinePath {
    start: PathPoint,
    end: PathPoint,
    s0: f64,
}

impl PathFn for LinePath {
    fn eval(&self, s: f64) -> PathPoint {
        let t = (s - self.s0) / (-self.s0);
        self.start + (self.end - self.start) * t
    }

    fn derivative(&self, _s: f64) -> PathPoint {
        (self.end - self.start) / (-self.s0)
    }
}

/// Natural cubic spline through waypoints, one spline per component.
struct SplinePath {
    knots: Vec<f64>,
    values: Vec<PathPoint>,
    /// Second derivatives at the knots.
    curvature: Vec<PathPoint>,
}

impl SplinePath {
    fn new(wp: &WaypointPath) -> Result<Self, String> {
        let n = wp.s_samples.len();
        if n < 2 {
            return Err("waypoint path needs at least two samples".into());
        }
        if wp.points.len() != n {
            return Err(format!(
                "s_samples has {n} entries but points has {}",
                wp.points.len()
            ));
        }
        if wp.s_samples.windows(2).any(|w| !(w[1] > w[0])) {
            return Err("s_samples must be strictly increasing".into());
        }
        if wp.s_samples[n - 1] != 0.0 {
            return Err("s_samples must end at 0".into());
        }
        if wp.s_samples.iter().chain(wp.points.iter().flatten()).any(|v| !v.is_finite()) {
            return Err("waypoints must be finite".into());
        }
        let knots = wp.s_samples.clone();
        let values: Vec<PathPoint> = wp.points.iter().map(|p| PathPoint::from(*p)).collect();

        // Tridiagonal solve for natural boundary conditions (Thomas algorithm).
        let mut curvature = vec![PathPoint::zeros(); n];
        if n > 2 {
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![PathPoint::zeros(); m];
            for i in 1..n - 1 {
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0) * 6.0;
            }
            for i in 1..m {
                let lower = knots[i + 1] - knots[i];
                let factor = lower / diag[i - 1];
                diag[i] -= factor * upper[i - 1];
                let prev = rhs[i - 1];
                rhs[i] -= prev * factor;
            }
            curvature[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                curvature[i + 1] = (rhs[i] - curvature[i + 2] * upper[i]) / diag[i];
            }
        }
        Ok(Self {
            knots,
            values,
            curvature,
        })
    }

    fn segment(&self, s: f64) -> usize {
        let idx = self.knots.partition_point(|&k| k <= s);
        idx.clamp(1, self.knots.len() - 1) - 1
    }
}

impl PathFn for SplinePath {
    fn eval(&self, s: f64) -> PathPoint {
        let i = self.segment(s);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - s) / h;
        let b = (s - self.knots[i]) / h;
        self.values[i] * a
            + self.values[i + 1] * b
            + (self.curvature[i] * (a * a * a - a) + self.curvature[i + 1] * (b * b * b - b)) * (h * h / 6.0)
    }

    fn derivative(&self, s: f64) -> PathPoint {
        let i = self.segment(s);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - s) / h;
        let b = (s - self.knots[i]) / h;
        (self.values[i + 1] - self.values[i]) / h
            + (self.curvature[i + 1] * (3.0 * b * b - 1.0) - self.curvature[i] * (3.0 * a * a - 1.0)) * (h / 6.0)
    }
}
