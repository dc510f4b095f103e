//! Closed-loop simulation: true plant, obstacle motion, measurement noise,
//! logging, summary metrics and CSV/JSON export.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::controller::{cold_start, control_step, ControllerConfig, Mode, StepDiagnostics};
use crate::dynamics::{step_rk4, PathTimingState, QuadrotorInput, QuadrotorState, VehicleParams};
use crate::geometry::{minimize_k, overlaps_oracle, Ellipsoid, GeometryError, DEFAULT_LAMBDA_TOL};
use crate::ocp::{OcpError, SolveStatus};
use crate::pathdef::Path;
use crate::scenario::{ProblemData, Scenario};

/// Plant integration substeps per control period.
pub const PLANT_SUBSTEPS: usize = 10;
/// Penetration band of the true-overlap verdict: bodies whose oracle
/// minimum lies within this distance below 1 are in contact, not overlapping.
pub const OVERLAP_TOUCH_BAND: f64 = 1e-6;
/// Consecutive infeasible steps after which a run is aborted.
pub const MAX_INFEASIBLE_STREAK: usize = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("controller infeasible for {MAX_INFEASIBLE_STREAK} consecutive steps, aborted at t = {t:.3} s")]
    Aborted { t: f64, log: Box<SimLog> },
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: QuadrotorState,
    pub timing: PathTimingState,
    pub input: QuadrotorInput,
    pub nu: f64,
    /// `λ_{0|t}` per obstacle.
    pub lambda0: Vec<f64>,
    /// `K(λ_{0|t}, x(t))` with the body at the true state, per obstacle.
    pub k_true: Vec<f64>,
    /// `min_λ K(λ, x(t))` at the true state, per obstacle.
    pub k_min_true: Vec<f64>,
    pub obstacle_centers: Vec<Vector3<f64>>,
    /// Sampling-oracle verdict at the true state, per obstacle.
    pub overlap: Vec<bool>,
    pub cost: f64,
    pub wall_time: f64,
    pub iters: usize,
    pub sqp_iterations: usize,
    pub status: SolveStatus,
    pub slack_max: f64,
    /// Largest `K(λ̄_k, x_k)` along the predicted trajectory.
    pub predicted_k_max: f64,
    pub degraded: bool,
    /// Distance from the position to the nearest point of the path.
    pub path_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimLog {
    pub mode: Mode,
    pub delta: f64,
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    pub diagnostics: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallTimeQuantiles {
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mode: String,
    pub samples: usize,
    pub wall_time: WallTimeQuantiles,
    pub k_min: f64,
    pub k_max: f64,
    pub lambda0_min: f64,
    pub lambda0_max: f64,
    pub lambda0_std: f64,
    pub max_path_deviation: f64,
    pub terminal_s: f64,
    pub overlap_steps: usize,
    pub infeasible_steps: usize,
    pub degraded_steps: usize,
    pub max_slack: f64,
    /// Longest run of samples with every `K` within the contact band, as
    /// `[t_start, t_end]`.
    pub contact_interval: Option<[f64; 2]>,
}

/// Band around zero counted as contact in [`Summary::contact_interval`].
pub const CONTACT_BAND: f64 = 1e-3;

/// Empirical quantile: smallest sample whose eCDF value reaches `q`.
pub fn ecdf_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn wall_time_quantiles(times: &[f64]) -> WallTimeQuantiles {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    WallTimeQuantiles {
        p50: ecdf_quantile(&sorted, 0.5),
        p75: ecdf_quantile(&sorted, 0.75),
        p95: ecdf_quantile(&sorted, 0.95),
        max: sorted.last().copied().unwrap_or(f64::NAN),
    }
}

/// Longest contiguous run where `values[i]` lies in `[-band, band]`.
pub fn longest_band_run(values: &[f64], band: f64) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (i, v) in values.iter().enumerate() {
        if v.abs() <= band {
            let s = *start.get_or_insert(i);
            if best.is_none_or(|(a, b)| i - s > b - a) {
                best = Some((s, i));
            }
        } else {
            start = None;
        }
    }
    best
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Distance from `pos` to the path, by dense sampling plus golden-section
/// refinement.
pub fn distance_to_path(path: &Path, pos: &Vector3<f64>) -> f64 {
    const SAMPLES: usize = 2000;
    let s0 = path.s0();
    let dist = |s: f64| {
        let p = path.eval(s);
        (Vector3::new(p[0], p[1], p[2]) - pos).norm()
    };
    let step = -s0 / SAMPLES as f64;
    let mut best_i = 0;
    let mut best = f64::INFINITY;
    for i in 0..=SAMPLES {
        let d = dist(s0 + i as f64 * step);
        if d < best {
            best = d;
            best_i = i;
        }
    }
    let (mut a, mut b) = (
        (s0 + (best_i as f64 - 1.0) * step).max(s0),
        (s0 + (best_i as f64 + 1.0) * step).min(0.0),
    );
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if dist(c) < dist(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best.min(dist(0.5 * (a + b)))
}

impl SimLog {
    pub fn summary(&self) -> Summary {
        let times: Vec<f64> = self.records.iter().map(|r| r.wall_time).collect();
        let k_all: Vec<f64> = self.records.iter().flat_map(|r| r.k_true.iter().copied()).collect();
        let lam0: Vec<f64> = self.records.iter().filter_map(|r| r.lambda0.first().copied()).collect();
        let k_worst: Vec<f64> = self
            .records
            .iter()
            .map(|r| r.k_true.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let contact_interval = longest_band_run(&k_worst, CONTACT_BAND)
            .map(|(a, b)| [self.records[a].t, self.records[b].t]);
        Summary {
            mode: self.mode.to_string(),
            samples: self.records.len(),
            wall_time: wall_time_quantiles(&times),
            k_min: k_all.iter().copied().fold(f64::INFINITY, f64::min),
            k_max: k_all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            lambda0_min: lam0.iter().copied().fold(f64::INFINITY, f64::min),
            lambda0_max: lam0.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            lambda0_std: std_dev(&lam0),
            max_path_deviation: self.records.iter().map(|r| r.path_deviation).fold(0.0, f64::max),
            terminal_s: self.records.last().map_or(f64::NAN, |r| r.timing.s),
            overlap_steps: self.records.iter().filter(|r| r.overlap.iter().any(|&o| o)).count(),
            infeasible_steps: self.records.iter().filter(|r| r.status == SolveStatus::Infeasible).count(),
            degraded_steps: self.records.iter().filter(|r| r.degraded).count(),
            max_slack: self.records.iter().map(|r| r.slack_max).fold(0.0, f64::max),
            contact_interval,
        }
    }

    pub fn write_traces<W: Write>(&self, out: W) -> csv::Result<()> {
        let n_obs = self.records.first().map_or(0, |r| r.lambda0.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "t", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw", "s", "s_dot", "thrust_delta", "roll_cmd",
            "pitch_cmd", "yaw_rate_cmd", "nu", "cost", "wall_time", "iters", "status", "slack_max", "predicted_k_max",
            "path_deviation",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for o in 0..n_obs {
            for col in ["lambda0", "k_true", "k_min_true", "overlap", "obs_x", "obs_y", "obs_z"] {
                header.push(format!("{col}_{o}"));
            }
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut rec = vec![r.t.to_string()];
            rec.extend(r.state.0.iter().map(|v| v.to_string()));
            rec.push(r.timing.s.to_string());
            rec.push(r.timing.s_dot.to_string());
            rec.extend(r.input.0.iter().map(|v| v.to_string()));
            rec.push(r.nu.to_string());
            rec.push(r.cost.to_string());
            rec.push(r.wall_time.to_string());
            rec.push(r.iters.to_string());
            rec.push(format!("{:?}", r.status));
            rec.push(r.slack_max.to_string());
            rec.push(r.predicted_k_max.to_string());
            rec.push(r.path_deviation.to_string());
            for o in 0..n_obs {
                rec.push(r.lambda0[o].to_string());
                rec.push(r.k_true[o].to_string());
                rec.push(r.k_min_true[o].to_string());
                rec.push(u8::from(r.overlap[o]).to_string());
                rec.extend(r.obstacle_centers[o].iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_diagnostics<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for d in &self.diagnostics {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Plot-ready CSVs: path tracking, `K`/`λ` traces, wall-time eCDF with
    /// cost, and obstacle motion.
    pub fn write_plot_data(&self, dir: &FsPath, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("path.csv"))?;
        w.write_record(["t", "x", "y", "z", "path_x", "path_y", "path_z", "s"])?;
        for r in &self.records {
            let p = path.eval(r.timing.s);
            let pos = r.state.position();
            w.write_record(
                [r.t, pos[0], pos[1], pos[2], p[0], p[1], p[2], r.timing.s].map(|v| v.to_string()),
            )?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("k_lambda.csv"))?;
        w.write_record(["t", "obstacle", "k", "lambda0"])?;
        for r in &self.records {
            for (o, (k, l)) in r.k_true.iter().zip(&r.lambda0).enumerate() {
                w.write_record([r.t.to_string(), o.to_string(), k.to_string(), l.to_string()])?;
            }
        }
        w.flush()?;

        let mut times: Vec<f64> = self.records.iter().map(|r| r.wall_time).collect();
        times.sort_by(f64::total_cmp);
        let mut w = csv::Writer::from_path(dir.join("wall_time_ecdf.csv"))?;
        w.write_record(["wall_time", "ecdf"])?;
        for (i, t) in times.iter().enumerate() {
            w.write_record([t.to_string(), ((i + 1) as f64 / times.len() as f64).to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("cost.csv"))?;
        w.write_record(["t", "cost"])?;
        for r in &self.records {
            w.write_record([r.t.to_string(), r.cost.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("motion.csv"))?;
        w.write_record(["t", "obstacle", "x", "y", "z", "obs_x", "obs_y", "obs_z", "overlap"])?;
        for r in &self.records {
            let pos = r.state.position();
            for (o, c) in r.obstacle_centers.iter().enumerate() {
                w.write_record([
                    r.t.to_string(),
                    o.to_string(),
                    pos[0].to_string(),
                    pos[1].to_string(),
                    pos[2].to_string(),
                    c[0].to_string(),
                    c[1].to_string(),
                    c[2].to_string(),
                    u8::from(r.overlap[o]).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `traces.csv`, `diagnostics.jsonl`, `summary.json` (with the effective
    /// scenario) and the plot-data bundle under `dir/plots`.
    pub fn export(&self, dir: &FsPath, scenario: &Scenario) -> Result<Summary, Box<dyn std::error::Error>> {
        fs::create_dir_all(dir)?;
        self.write_traces(fs::File::create(dir.join("traces.csv"))?)?;
        self.write_diagnostics(std::io::BufWriter::new(fs::File::create(dir.join("diagnostics.jsonl"))?))?;
        let summary = self.summary();
        let doc = serde_json::json!({ "summary": summary, "scenario": scenario });
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&doc)?)?;
        let path = scenario.build_path()?;
        self.write_plot_data(&dir.join("plots"), &path)?;
        Ok(summary)
    }
}

/// Noisy measurement with velocities estimated by a moving-average finite
/// difference over the last `window` samples.
struct Sensor {
    rng: ChaCha8Rng,
    position: Option<Normal<f64>>,
    attitude: Option<Normal<f64>>,
    history: VecDeque<Vector3<f64>>,
    window: usize,
    delta: f64,
}

impl Sensor {
    fn new(s: &Scenario) -> Self {
        let normal = |std: f64| (std > 0.0).then(|| Normal::new(0.0, std).expect("validated std"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(s.seed),
            position: normal(s.noise.position_std),
            attitude: normal(s.noise.attitude_std),
            history: VecDeque::new(),
            window: s.noise.velocity_window,
            delta: s.ocp.delta,
        }
    }

    fn measure(&mut self, x: &QuadrotorState) -> QuadrotorState {
        let mut m = *x;
        if let Some(n) = self.attitude {
            for i in 6..9 {
                m.0[i] += n.sample(&mut self.rng);
            }
        }
        if let Some(n) = self.position {
            for i in 0..3 {
                m.0[i] += n.sample(&mut self.rng);
            }
            let pos = m.position();
            self.history.push_back(pos);
            if self.history.len() > self.window + 1 {
                self.history.pop_front();
            }
            let span = self.history.len() - 1;
            let vel = if span > 0 {
                (pos - self.history[0]) / (span as f64 * self.delta)
            } else {
                x.velocity()
            };
            for i in 0..3 {
                m.0[3 + i] = vel[i];
            }
        }
        m
    }
}

fn propagate(x: &QuadrotorState, u: &QuadrotorInput, plant: &VehicleParams, delta: f64) -> QuadrotorState {
    let h = delta / PLANT_SUBSTEPS as f64;
    let mut x = *x;
    for _ in 0..PLANT_SUBSTEPS {
        x = step_rk4(&x, u, plant, h);
    }
    x
}

/// Runs `scenario` in closed loop with the controller in `mode`.
pub fn run(scenario: &Scenario, mode: Mode) -> Result<SimLog, SimError> {
    let mut scenario = scenario.clone();
    scenario.controller.mode = mode;
    scenario.validate().map_err(SimError::Scenario)?;
    let data = ProblemData::from_scenario(&scenario).map_err(SimError::Scenario)?;
    let pb = data.problem();
    let delta = scenario.ocp.delta;
    let mut plant = scenario.vehicle;
    plant.mass *= 1.0 + scenario.mass_mismatch / 100.0;
    let body = Ellipsoid::new(data.robot_shape, Vector3::zeros())?;

    let mut x = scenario.initial_state(&data.path);
    let mut z = scenario.initial_timing(&data.path);
    let mut sensor = Sensor::new(&scenario);
    let controller_config: ControllerConfig = scenario.controller.clone();
    let first_reading = sensor.measure(&x);
    let mut ctrl = cold_start(controller_config, &pb, &first_reading, z, 0.0)?;
    let steps = scenario.steps();
    let mut log = SimLog {
        mode,
        delta,
        records: Vec::with_capacity(steps + 1),
        diagnostics: Vec::with_capacity(steps + 1),
    };
    let mut infeasible_streak = 0;

    for i in 0..=steps {
        let t = i as f64 * delta;
        let x_meas = if i == 0 { first_reading } else { sensor.measure(&x) };
        let out = control_step(&mut ctrl, &pb, &x_meas, z, t)?;

        let mut lambda0 = Vec::new();
        let mut k_true = Vec::new();
        let mut k_min_true = Vec::new();
        let mut centers = Vec::new();
        let mut overlap = Vec::new();
        let drone = body.with_center(x.position());
        for (o, obs) in data.obstacles.iter().enumerate() {
            let current = obs.at(t);
            let l0 = out.lambda_bar[o][0];
            lambda0.push(l0);
            k_true.push(crate::geometry::k_fused(l0, &drone, &current)?.k_value);
            k_min_true.push(minimize_k(&drone, &current, DEFAULT_LAMBDA_TOL)?.k_min);
            centers.push(current.center().to_owned());
            overlap.push(overlaps_oracle(&drone, &current, OVERLAP_TOUCH_BAND)?);
        }
        let predicted_k_max = out
            .solution
            .collision_values(&pb, t)?
            .iter()
            .flat_map(|v| v.iter().skip(1).copied())
            .fold(f64::NEG_INFINITY, f64::max);

        log.records.push(StepRecord {
            t,
            state: x,
            timing: z,
            input: out.input,
            nu: out.nu,
            lambda0,
            k_true,
            k_min_true,
            obstacle_centers: centers,
            overlap,
            cost: out.diagnostics.cost,
            wall_time: out.diagnostics.wall_time,
            iters: out.diagnostics.iters,
            sqp_iterations: out.solution.iterations,
            status: out.diagnostics.status,
            slack_max: out.diagnostics.slack_max,
            predicted_k_max,
            degraded: out.diagnostics.degraded,
            path_deviation: distance_to_path(&data.path, &x.position()),
        });
        log.diagnostics.push(out.diagnostics.clone());

        if out.diagnostics.status == SolveStatus::Infeasible {
            infeasible_streak += 1;
            if infeasible_streak >= MAX_INFEASIBLE_STREAK {
                return Err(SimError::Aborted { t, log: Box::new(log) });
            }
        } else {
            infeasible_streak = 0;
        }
        if i == steps {
            break;
        }
        x = propagate(&x, &out.input, &plant, delta);
        z = crate::dynamics::step_timing(&z, out.nu, delta);
    }
    Ok(log)
}

/// Runs several scenarios concurrently, one controller per thread. Results
/// keep the input order.
pub fn run_batch(jobs: &[(Scenario, Mode)]) -> Vec<Result<SimLog, SimError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(s, m)| scope.spawn(move || run(s, *m)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_constant_times_are_degenerate() {
        let q = wall_time_quantiles(&[0.004; 7]);
        assert_eq!(q.p50, 0.004);
        assert_eq!(q.p75, 0.004);
        assert_eq!(q.max, 0.004);
    }

    #[test]
    fn quantiles_follow_ecdf() {
        let times: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let q = wall_time_quantiles(&times);
        assert_eq!(q.p50, 50.0);
        assert_eq!(q.p75, 75.0);
        assert_eq!(q.p95, 95.0);
        assert_eq!(q.max, 100.0);
    }

    #[test]
    fn band_run_picks_longest() {
        let v = [-0.5, 0.0, -0.5, 1e-4, -2e-4, 0.0, -0.3];
        assert_eq!(longest_band_run(&v, 1e-3), Some((3, 5)));
        assert_eq!(longest_band_run(&[-1.0, -2.0], 1e-3), None);
    }

    #[test]
    fn distance_to_line_path() {
        let path = Path::line(
            nalgebra::SVector::<f64, 4>::new(0.0, 0.0, 0.0, 0.0),
            nalgebra::SVector::<f64, 4>::new(1.0, 0.0, 0.0, 0.0),
            -1.0,
        );
        assert!((distance_to_path(&path, &Vector3::new(0.3, 0.2, 0.0)) - 0.2).abs() < 1e-9);
        assert!((distance_to_path(&path, &Vector3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noise_free_sensor_is_exact() {
        let s = Scenario::demo_static();
        let mut sensor = Sensor::new(&s);
        let x = QuadrotorState(crate::dynamics::StateVec::from_fn(|i, _| i as f64));
        assert_eq!(sensor.measure(&x), x);
    }

    #[test]
    fn noisy_sensor_estimates_constant_velocity() {
        let mut s = Scenario::demo_static();
        s.noise.position_std = 1e-9;
        let mut sensor = Sensor::new(&s);
        let v = Vector3::new(0.1, -0.2, 0.05);
        let mut last = QuadrotorState::zeros();
        for i in 0..10 {
            let mut x = QuadrotorState::zeros();
            for a in 0..3 {
                x.0[a] = v[a] * i as f64 * s.ocp.delta;
                x.0[3 + a] = v[a];
            }
            last = sensor.measure(&x);
        }
        assert!((last.velocity() - v).norm() < 1e-6);
    }
}
