//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p ellipsoid-mpc --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use ellipsoid_mpc::controller::{lambda_update, Mode};
use ellipsoid_mpc::dynamics::{jacobians, step_rk4, QuadrotorInput, QuadrotorState, VehicleParams};
use ellipsoid_mpc::geometry::{
    intersects_oracle, k_fused, k_minkowski, minimize_k, Ellipsoid, DEFAULT_LAMBDA_TOL,
};
use ellipsoid_mpc::ocp::{solve_parameterized, SolveStatus};
use ellipsoid_mpc::qp::ActiveSetSolver;
use ellipsoid_mpc::scenario::{ProblemData, Scenario};
use ellipsoid_mpc::simulator::{self, longest_band_run, SimLog, CONTACT_BAND};
use nalgebra::Vector3;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn equivalence() -> Outcome {
    let mut rng = common::rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = common::random_pair(&mut rng, 1.0);
        for _ in 0..10 {
            let lambda = rng.random_range(0.01..0.99);
            let fused = k_fused(lambda, &a, &b).map_err(|e| e.to_string())?.k_value;
            let mink = k_minkowski(lambda, &a, &b).map_err(|e| e.to_string())?;
            worst = worst.max((fused - mink).abs() / (1.0 + fused.abs()));
        }
    }
    ensure(worst <= 1e-9, || format!("worst scaled gap {worst:e}"))?;
    Ok(format!("worst scaled gap {worst:.1e}"))
}

fn sign_agreement() -> Outcome {
    let mut rng = common::rng(2);
    let (mut checked, mut overlapping) = (0, 0);
    for i in 0..1000 {
        let (a, b) = common::random_pair(&mut rng, 1.0);
        let verdict = minimize_k(&a, &b, DEFAULT_LAMBDA_TOL).map_err(|e| e.to_string())?;
        if verdict.k_min.abs() <= 1e-3 {
            continue;
        }
        let oracle = intersects_oracle(&a, &b).map_err(|e| e.to_string())?;
        ensure(oracle == (verdict.k_min > 0.0), || {
            format!("pair {i}: k_min {} but oracle says intersecting = {oracle}", verdict.k_min)
        })?;
        checked += 1;
        overlapping += usize::from(oracle);
    }
    Ok(format!("{checked} pairs checked, {overlapping} overlapping"))
}

fn sphere_closed_form() -> Outcome {
    let mut rng = common::rng(3);
    let (mut dl, mut dk): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let ra = rng.random_range(0.1..2.0);
        let rb = rng.random_range(0.1..2.0);
        let d = rng.random_range(0.0..2.0 * (ra + rb));
        let a = Ellipsoid::sphere(ra, Vector3::zeros()).map_err(|e| e.to_string())?;
        let b = Ellipsoid::sphere(rb, Vector3::new(0.0, d, 0.0)).map_err(|e| e.to_string())?;
        let v = minimize_k(&a, &b, DEFAULT_LAMBDA_TOL).map_err(|e| e.to_string())?;
        dl = dl.max((v.lambda_star - ra / (ra + rb)).abs());
        dk = dk.max((v.k_min - (1.0 - d * d / ((ra + rb) * (ra + rb)))).abs());
    }
    ensure(dl <= 1e-4 && dk <= 1e-6, || format!("max |Δλ| {dl:e}, max |ΔK| {dk:e}"))?;
    Ok(format!("max |Δλ| {dl:.1e}, max |ΔK| {dk:.1e}"))
}

fn containment() -> Outcome {
    let mut rng = common::rng(4);
    let mut violations = 0usize;
    let mut empty_hits = 0usize;
    for _ in 0..100 {
        let (a, b) = common::random_pair(&mut rng, 0.6);
        let lo = a.center().inf(b.center()) - Vector3::repeat(2.0);
        let hi = a.center().sup(b.center()) + Vector3::repeat(2.0);
        for _ in 0..10 {
            let lambda = rng.random_range(0.0..=1.0);
            let aux = k_fused(lambda, &a, &b).map_err(|e| e.to_string())?;
            for _ in 0..10_000 {
                let x = Vector3::from_fn(|i, _| rng.random_range(lo[i]..hi[i]));
                let (in_a, in_b) = (a.contains(&x), b.contains(&x));
                let in_aux = aux.contains(&x);
                if in_a && in_b && !in_aux {
                    if aux.k_value < 0.0 {
                        empty_hits += 1;
                    } else {
                        violations += 1;
                    }
                }
                if in_aux && !(in_a || in_b) {
                    violations += 1;
                }
            }
        }
    }
    ensure(violations == 0 && empty_hits == 0, || {
        format!("{violations} implication violations, {empty_hits} intersection points with K < 0")
    })?;
    Ok("10 000 000 samples, zero violations".into())
}

fn dynamics_fidelity() -> Outcome {
    let p = VehicleParams::default();
    let delta = 0.02;
    let mut rng = common::rng(5);
    let (mut rk_err, mut jac_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        // one RK4 step of a 0.1 s lag is off by 2.6e-6 per radian of gap
        // between command and attitude, so gaps stay within 0.2 rad
        let (x, u) = common::random_state_input(&mut rng, 0.1);
        let fine = common::fine_oracle(&x, &u, &p, delta, 1e-5);
        rk_err = rk_err.max((step_rk4(&x, &u, &p, delta).0 - fine).amax());

        let (jx, ju) = jacobians(&x, &u, &p, delta);
        let h = 1e-6;
        for j in 0..9 {
            let mut xp = x;
            let mut xm = x;
            xp.0[j] += h;
            xm.0[j] -= h;
            let fd = (step_rk4(&xp, &u, &p, delta).0 - step_rk4(&xm, &u, &p, delta).0) / (2.0 * h);
            for i in 0..9 {
                jac_err = jac_err.max((fd[i] - jx[(i, j)]).abs() / jx[(i, j)].abs().max(1.0));
            }
        }
        for j in 0..4 {
            let mut up = u;
            let mut um = u;
            up.0[j] += h;
            um.0[j] -= h;
            let fd = (step_rk4(&x, &up, &p, delta).0 - step_rk4(&x, &um, &p, delta).0) / (2.0 * h);
            for i in 0..9 {
                jac_err = jac_err.max((fd[i] - ju[(i, j)]).abs() / ju[(i, j)].abs().max(1.0));
            }
        }
    }
    let hover = step_rk4(&QuadrotorState::zeros(), &QuadrotorInput::hover(), &p, delta);
    ensure(rk_err <= 1e-6, || format!("RK4 vs fine oracle {rk_err:e}"))?;
    ensure(jac_err <= 1e-5, || format!("Jacobian vs central differences {jac_err:e}"))?;
    ensure(hover == QuadrotorState::zeros(), || format!("hover moved to {:?}", hover.0))?;
    Ok(format!("RK4 gap {rk_err:.1e}, Jacobian gap {jac_err:.1e}, hover exact"))
}

fn solver_soundness(reference: &SimLog) -> Outcome {
    let scenario = Scenario::demo_static();
    let mut data = ProblemData::from_scenario(&scenario)?;
    data.cfg.sqp_max_iters = 100;
    let pb = data.problem();
    let (mut converged, mut attempted) = (0, 0);
    let (mut worst_defect, mut worst_kkt): (f64, f64) = (0.0, 0.0);
    for r in reference.records.iter().step_by(25) {
        attempted += 1;
        let states = vec![r.state; data.cfg.horizon + 1];
        let (lam, _) = lambda_update(&pb, &states, r.t, DEFAULT_LAMBDA_TOL).map_err(|e| e.to_string())?;
        let out = solve_parameterized(&pb, &r.state, r.timing, &lam, r.t, None).map_err(|e| e.to_string())?;
        if out.status == SolveStatus::Converged {
            converged += 1;
            worst_defect = worst_defect.max(out.max_defect);
            worst_kkt = worst_kkt.max(out.kkt_residual);
        }
    }
    ensure(converged * 10 >= attempted * 9, || format!("only {converged}/{attempted} solves converged"))?;
    ensure(worst_defect <= 1e-8 && worst_kkt <= 1e-6, || {
        format!("defect {worst_defect:e}, KKT residual {worst_kkt:e}")
    })?;

    let mut rng = common::rng(6);
    let solver = ActiveSetSolver::default();
    let mut qp_gap: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=8);
        let qp = common::random_qp(&mut rng, n, m);
        let x = solver.solve(&qp, None, &[]).map_err(|e| e.to_string())?.x;
        qp_gap = qp_gap.max((x - common::qp_enumeration_oracle(&qp)).amax());
    }
    ensure(qp_gap <= 1e-8, || format!("QP vs enumeration oracle {qp_gap:e}"))?;
    Ok(format!(
        "{converged}/{attempted} demo solves converged, defect {worst_defect:.1e}, KKT {worst_kkt:.1e}; QP gap {qp_gap:.1e}"
    ))
}

fn static_reproduction(log: &SimLog, runtime: Duration) -> Outcome {
    let s = log.summary();
    let k_min: Vec<f64> = log
        .records
        .iter()
        .map(|r| r.k_min_true.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let contact = longest_band_run(&k_min, CONTACT_BAND);
    ensure(s.overlap_steps == 0, || format!("{} overlapping steps", s.overlap_steps))?;
    let (a, b) = contact.ok_or("no contact interval")?;
    ensure(s.terminal_s >= -0.01, || format!("terminal s {}", s.terminal_s))?;
    ensure(runtime.as_secs_f64() < 120.0, || format!("runtime {runtime:?}"))?;
    Ok(format!(
        "no overlap, contact over t ∈ [{:.2}, {:.2}] s, terminal s {:.1e}",
        log.records[a].t, log.records[b].t, s.terminal_s
    ))
}

fn moving_reproduction() -> Outcome {
    let started = Instant::now();
    let log = simulator::run(&Scenario::demo_moving(), Mode::TwoStage).map_err(|e| e.to_string())?;
    let runtime = started.elapsed();
    let s = log.summary();
    ensure(s.overlap_steps == 0, || format!("{} overlapping steps", s.overlap_steps))?;
    ensure(runtime.as_secs_f64() < 120.0, || format!("runtime {runtime:?}"))?;
    Ok(format!("no overlap over {} samples", s.samples))
}

fn fixed_lambda_conservatism(two_stage: &SimLog) -> Outcome {
    let scenario = Scenario::demo_static();
    let mut dev = Vec::new();
    for l in [0.5, 0.8] {
        let log = simulator::run(&scenario, Mode::FixedLambda(l)).map_err(|e| e.to_string())?;
        dev.push(log.summary().max_path_deviation);
    }
    let two = two_stage.summary().max_path_deviation;
    let bound = dev[0].min(dev[1]) * 1.1;
    ensure(dev[1] >= dev[0], || format!("deviation λ̂=0.8 {} < λ̂=0.5 {}", dev[1], dev[0]))?;
    ensure(two <= bound, || format!("two-stage deviation {two} above {bound}"))?;
    Ok(format!("deviation λ̂=0.5 {:.4} m, λ̂=0.8 {:.4} m, two-stage {two:.4} m", dev[0], dev[1]))
}

fn real_time_budget(log: &SimLog) -> Outcome {
    let q = log.summary().wall_time;
    ensure(q.max < log.delta, || format!("max step {:.2} ms, p75 {:.2} ms", q.max * 1e3, q.p75 * 1e3))?;
    Ok(format!("p75 {:.2} ms, max {:.2} ms", q.p75 * 1e3, q.max * 1e3))
}

fn early_termination_safety(log: &SimLog) -> Outcome {
    let worst_k = log.records.iter().map(|r| r.predicted_k_max).fold(f64::NEG_INFINITY, f64::max);
    let worst_slack = log.records.iter().map(|r| r.slack_max).fold(0.0, f64::max);
    let max_iters = log.records.iter().map(|r| r.iters).max().unwrap_or(0);
    ensure(max_iters <= 1, || format!("{max_iters} λ updates in one step"))?;
    ensure(worst_k <= 1e-8, || format!("predicted K reaches {worst_k:e}"))?;
    // zero up to rounding in the slack evaluation
    ensure(worst_slack <= 1e-12, || format!("slack reaches {worst_slack:e}"))?;
    Ok(format!("max predicted K {worst_k:.1e}, max slack {worst_slack:.1e}"))
}

fn lambda_variability(log: &SimLog) -> Outcome {
    let std = log.summary().lambda0_std;
    ensure(std > 0.01, || format!("λ0 standard deviation {std}"))?;
    Ok(format!("λ0 standard deviation {std:.4}"))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} ({secs:.1} s)"),
            Err(reason) => {
                failures += 1;
                println!("FAIL {id:>2} {name}: {reason} ({secs:.1} s)");
            }
        }
    };

    report(1, "formulation equivalence", &mut || {
        let started = Instant::now();
        let detail = equivalence()?;
        ensure(started.elapsed().as_secs_f64() < 5.0, || "runtime over 5 s".into())?;
        Ok(detail)
    });
    report(2, "collision test vs oracle", &mut sign_agreement);
    report(3, "sphere closed form", &mut sphere_closed_form);
    report(4, "containment", &mut containment);
    report(5, "dynamics fidelity", &mut dynamics_fidelity);

    // the nominal demo run feeds several criteria; nothing else runs meanwhile
    let started = Instant::now();
    let demo = simulator::run(&Scenario::demo_static(), Mode::TwoStage);
    let runtime = started.elapsed();
    let demo = demo.map_err(|e| e.to_string());
    let with_demo = |f: &dyn Fn(&SimLog) -> Outcome| demo.as_ref().map_err(Clone::clone).and_then(f);

    report(6, "solver soundness", &mut || with_demo(&solver_soundness));
    report(7, "static scenario", &mut || with_demo(&|log| static_reproduction(log, runtime)));
    report(8, "moving obstacle", &mut moving_reproduction);
    report(9, "fixed-λ conservatism", &mut || with_demo(&fixed_lambda_conservatism));
    report(10, "real-time budget", &mut || with_demo(&real_time_budget));
    report(11, "early-termination safety", &mut || with_demo(&early_termination_safety));
    report(12, "λ variability", &mut || with_demo(&lambda_variability));

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
