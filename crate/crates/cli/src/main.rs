use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ellipsoid_mpc::controller::Mode;
use ellipsoid_mpc::geometry::{minimize_k, Classification, Ellipsoid, DEFAULT_LAMBDA_TOL};
use ellipsoid_mpc::scenario::{from_json_str, Scenario};
use ellipsoid_mpc::simulator::{self, ecdf_quantile, wall_time_quantiles, SimLog};

/// Collision-avoidant path-following MPC with ellipsoidal bodies.
#[derive(Parser)]
#[command(name = "ellmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop simulation; exit 2 if any step overlaps the obstacle.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Minimal K between two ellipsoid files; exit 0 separate, 3 touching, 4 overlapping.
    Collision { first: PathBuf, second: PathBuf },
    /// One fixed-λ̂ run per value plus a two-stage baseline.
    SweepLambda {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated λ̂ values in [0, 1].
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        lambdas: Vec<f64>,
    },
    /// Repeated runs; writes the wall-time eCDF.
    Bench {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Parses and checks a scenario, then prints the effective configuration.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

/// Scenario source plus flag overrides, applied on top of the file.
#[derive(Args)]
struct ScenarioArgs {
    /// Built-in name (`demo-static`, `demo-moving`) or JSON file.
    #[arg(long, default_value = "demo-static")]
    scenario: String,
    /// Collision margin α.
    #[arg(long)]
    alpha: Option<f64>,
    /// λ change threshold ε of the two-stage loop.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "i-max")]
    i_max: Option<usize>,
    /// `twostage`, `fixed:<λ̂>` or `joint`.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut s = Scenario::load(&self.scenario)?;
        if let Some(v) = self.alpha {
            s.ocp.collision_margin = v;
        }
        if let Some(v) = self.epsilon {
            s.controller.epsilon = v;
        }
        if let Some(v) = self.i_max {
            s.controller.i_max = v;
        }
        if let Some(v) = self.mode {
            s.controller.mode = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.duration {
            s.duration = v;
        }
        s.validate().map_err(|e| anyhow::anyhow!("invalid scenario: {e}"))?;
        Ok(s)
    }
}

fn simulate(args: &ScenarioArgs, out: &FsPath) -> Result<ExitCode> {
    let scenario = args.load()?;
    let log = simulator::run(&scenario, scenario.controller.mode)?;
    let summary = log.export(out, &scenario).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if summary.overlap_steps > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn read_ellipsoid(path: &FsPath) -> Result<Ellipsoid> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    from_json_str(&text).with_context(|| format!("in {}", path.display()))
}

fn collision(first: &FsPath, second: &FsPath) -> Result<ExitCode> {
    let verdict = minimize_k(&read_ellipsoid(first)?, &read_ellipsoid(second)?, DEFAULT_LAMBDA_TOL)?;
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    Ok(ExitCode::from(match verdict.classification {
        Classification::Separate => 0,
        Classification::Touching => 3,
        Classification::Overlapping => 4,
    }))
}

fn mean_cost(log: &SimLog) -> f64 {
    log.records.iter().map(|r| r.cost).sum::<f64>() / log.records.len().max(1) as f64
}

fn sweep_lambda(args: &ScenarioArgs, out: &FsPath, lambdas: &[f64]) -> Result<ExitCode> {
    if lambdas.is_empty() {
        bail!("no λ̂ values given (use --lambdas 0.5,0.8)");
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        bail!("λ̂ = {l} outside [0, 1]");
    }
    let scenario = args.load()?;
    let mut jobs: Vec<(Scenario, Mode)> = lambdas.iter().map(|&l| (scenario.clone(), Mode::FixedLambda(l))).collect();
    jobs.push((scenario.clone(), Mode::TwoStage));
    let logs = simulator::run_batch(&jobs);

    fs::create_dir_all(out)?;
    let mut csv = csv::Writer::from_path(out.join("comparison.csv"))?;
    csv.write_record(["mode", "max_path_deviation", "mean_cost", "final_cost", "overlap_steps", "lambda0_mean"])?;
    let mut any_overlap = false;
    for ((_, mode), log) in jobs.iter().zip(logs) {
        let log = log?;
        let summary = log.summary();
        any_overlap |= summary.overlap_steps > 0;
        let lambda0: Vec<f64> = log.records.iter().filter_map(|r| r.lambda0.first().copied()).collect();
        let lambda0_mean = lambda0.iter().sum::<f64>() / lambda0.len().max(1) as f64;
        csv.write_record([
            mode.to_string(),
            summary.max_path_deviation.to_string(),
            mean_cost(&log).to_string(),
            log.records.last().map_or(f64::NAN, |r| r.cost).to_string(),
            summary.overlap_steps.to_string(),
            lambda0_mean.to_string(),
        ])?;
        println!("{mode}: max deviation {:.4} m, overlaps {}", summary.max_path_deviation, summary.overlap_steps);
    }
    csv.flush()?;
    Ok(if any_overlap { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn bench(args: &ScenarioArgs, out: &FsPath, reps: usize) -> Result<ExitCode> {
    if reps == 0 {
        bail!("--reps must be at least 1");
    }
    let scenario = args.load()?;
    let mut times = Vec::new();
    for rep in 0..reps {
        let log = simulator::run(&scenario, scenario.controller.mode)?;
        let q = wall_time_quantiles(&log.records.iter().map(|r| r.wall_time).collect::<Vec<_>>());
        eprintln!("rep {}: p75 {:.3} ms, max {:.3} ms", rep + 1, q.p75 * 1e3, q.max * 1e3);
        times.extend(log.records.iter().map(|r| r.wall_time));
    }
    times.sort_by(f64::total_cmp);

    fs::create_dir_all(out)?;
    let mut csv = csv::Writer::from_path(out.join("wall_time_ecdf.csv"))?;
    csv.write_record(["wall_time", "ecdf"])?;
    for (i, t) in times.iter().enumerate() {
        csv.write_record([t.to_string(), ((i + 1) as f64 / times.len() as f64).to_string()])?;
    }
    csv.flush()?;

    let q = wall_time_quantiles(&times);
    let delta = scenario.ocp.delta;
    let report = serde_json::json!({
        "reps": reps,
        "samples": times.len(),
        "quantiles": q,
        "p99": ecdf_quantile(&times, 0.99),
        "delta": delta,
        "within_budget": q.max < delta,
    });
    fs::write(out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if q.max >= delta {
        eprintln!("warning: maximum step time {:.3} ms exceeds δ = {:.1} ms", q.max * 1e3, delta * 1e3);
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(args: &ScenarioArgs) -> Result<ExitCode> {
    let scenario = args.load()?;
    scenario.build_path().map_err(|e| anyhow::anyhow!("invalid path: {e}"))?;
    println!("{}", scenario.to_json());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, out } => simulate(scenario, out),
        Command::Collision { first, second } => collision(first, second),
        Command::SweepLambda { scenario, out, lambdas } => sweep_lambda(scenario, out, lambdas),
        Command::Bench { scenario, out, reps } => bench(scenario, out, *reps),
        Command::Validate { scenario } => validate(scenario),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
