//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL` line;
//! the process exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use singtraj_core::charfield::{integrate_characteristic, integrate_family, transverse_segment, CharfieldConfig};
use singtraj_core::endpoint::{
    certify, endpoint_jacobian, singularity_verdict, ControlBounds, ControlSignal, EndpointConfig, JacobianMethod,
    DEFAULT_RANK_TOL,
};
use singtraj_core::expr::random::random_field;
use singtraj_core::perturb::{breakdown_threshold, openness_experiment, OpennessConfig};
use singtraj_core::pmp::{closed_form_p3, constraint_residuals, discretize_lift, integrate_adjoint_general, lift_to_extremal};
use singtraj_core::system::SystemForm;
use singtraj_core::{parse_expr, ChartBox, ExtremalLift, Point, ScalarField, Trajectory, Var, VectorFieldSystem};

type Outcome = Result<String, String>;

fn f(s: &str) -> ScalarField {
    parse_expr(s).unwrap()
}

fn model(p: &str, q: &str, half_side: f64) -> VectorFieldSystem {
    VectorFieldSystem::model(f(p), f(q), ChartBox::cube(-half_side, half_side).unwrap()).unwrap()
}

fn seed_system() -> VectorFieldSystem {
    model("0", "x2", 1.0)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Characteristic control on `n` intervals, certified with the variational Jacobian.
fn certify_characteristic(sys: &VectorFieldSystem, traj: &Trajectory, n: usize) -> (ControlSignal, f64, bool) {
    let lift = lift_to_extremal(sys, traj, 1.0).unwrap();
    let control = discretize_lift(sys, &lift, n, ControlBounds::default(), &EndpointConfig::default()).unwrap();
    let v = certify(
        sys,
        traj.start(),
        &control,
        JacobianMethod::Variational,
        DEFAULT_RANK_TOL,
        &EndpointConfig::default(),
    )
    .unwrap();
    (control, v.ratio, v.singular)
}

fn closed_form_adjoint() -> Outcome {
    let sys = model("0", "x3", 3.0);
    let c = 0.5;
    // x2 = t, x3 = c·e^t on dt = 1e-3
    let traj = Trajectory::from_fn(0.0, 1.0, 1001, |t| {
        (Point::new(0.0, t, c * t.exp()), Vector3::new(0.0, 1.0, c * t.exp()))
    })
    .unwrap();
    let p3 = closed_form_p3(&sys, &traj, 1.0).unwrap();
    let analytic = traj
        .times
        .iter()
        .zip(&p3)
        .map(|(t, v)| (v - (-t).exp()).abs() / (-t).exp())
        .fold(0.0, f64::max);

    let lift = lift_to_extremal(&sys, &traj, 1.0).unwrap();
    let general = integrate_adjoint_general(&sys, &traj, &lift.control, lift.adjoint[0]).unwrap();
    let integrated = general
        .values
        .iter()
        .zip(&lift.adjoint)
        .map(|(g, p)| (g - p).norm() / p.norm())
        .fold(0.0, f64::max);
    check(
        analytic < 1e-8 && integrated < 1e-8,
        format!("max rel err vs e^-t {analytic:.2e}, vs integrated adjoint {integrated:.2e} (tol 1e-8)"),
    )
}

/// Lifts of characteristic trajectories for 20 random normal-form systems.
fn random_lifts() -> Vec<(VectorFieldSystem, ExtremalLift)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let vars = [Var::X2, Var::X3];
    let mut lifts = Vec::new();
    while lifts.len() < 20 {
        let sys = VectorFieldSystem::model(
            random_field(&mut rng, 3, &vars),
            random_field(&mut rng, 3, &vars),
            ChartBox::cube(-3.0, 3.0).unwrap(),
        )
        .unwrap();
        let x0 = Point::new(0.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let a = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let Ok(traj) = integrate_characteristic(&sys, &x0, 1.0, 0.01, &CharfieldConfig::default()) else {
            continue;
        };
        if traj.len() < 2 {
            continue;
        }
        let lift = lift_to_extremal(&sys, &traj, a).unwrap();
        lifts.push((sys, lift));
    }
    lifts
}

fn conservation(lifts: &[(VectorFieldSystem, ExtremalLift)]) -> Outcome {
    let mut worst = 0.0_f64;
    for (sys, lift) in lifts {
        let SystemForm::Model { q, .. } = sys.form() else {
            unreachable!()
        };
        let p0 = lift.adjoint[0];
        let x0 = lift.trajectory.states[0];
        let c = p0[1] + q.eval(&[x0[0], x0[1], x0[2]]).unwrap() * p0[2];
        for (x, p) in lift.trajectory.states.iter().zip(&lift.adjoint) {
            let v = p[1] + q.eval(&[x[0], x[1], x[2]]).unwrap() * p[2];
            worst = worst.max((v - c).abs());
        }
    }
    check(
        worst < 1e-8,
        format!("{} lifts, max |Δ(p2 + Q p3)| {worst:.2e} (tol 1e-8)", lifts.len()),
    )
}

fn residuals(lifts: &[(VectorFieldSystem, ExtremalLift)]) -> Outcome {
    let mut worst = 0.0_f64;
    for (sys, lift) in lifts {
        worst = worst.max(constraint_residuals(sys, lift).unwrap().max_overall());
        // and once more straight from the frame matrix
        for (x, p) in lift.trajectory.states.iter().zip(&lift.adjoint) {
            let frame = sys.eval_frame(x).unwrap().matrix;
            worst = worst.max((frame.transpose() * p).amax());
        }
    }
    check(worst < 1e-8, format!("{} lifts, max |<p, X_i>| {worst:.2e} (tol 1e-8)", lifts.len()))
}

fn singularity(certified: &mut Vec<Trajectory>) -> Outcome {
    let sys = seed_system();
    let x0 = Point::new(0.0, -0.5, 0.125);
    let traj = integrate_characteristic(&sys, &x0, 1.0, 0.01, &CharfieldConfig::default()).unwrap();
    let (control, ratio, singular) = certify_characteristic(&sys, &traj, 50);
    if singular {
        certified.push(traj);
    }

    let off = Point::new(0.5, x0[1], x0[2]);
    let cfg = EndpointConfig::default();
    let off_verdict = certify(&sys, &off, &control, JacobianMethod::Variational, DEFAULT_RANK_TOL, &cfg).unwrap();

    let mut gap = 0.0_f64;
    for start in [x0, off] {
        let var = endpoint_jacobian(&sys, &start, &control, JacobianMethod::Variational, &cfg).unwrap();
        let fd = endpoint_jacobian(&sys, &start, &control, JacobianMethod::FiniteDifference, &cfg).unwrap();
        let sigma1 = singularity_verdict(&var, DEFAULT_RANK_TOL, JacobianMethod::Variational)
            .unwrap()
            .singular_values[0];
        gap = gap.max(relative_gap(&var, &fd, sigma1));
    }
    check(
        singular && ratio < 1e-6 && off_verdict.ratio > 1e-2 && gap < 1e-5,
        format!(
            "on Σ σ3/σ1 {ratio:.2e} (< 1e-6), off Σ {:.2e} (> 1e-2), variational vs FD {gap:.2e} (< 1e-5)",
            off_verdict.ratio
        ),
    )
}

fn relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma1: f64) -> f64 {
    (a - b).amax() / sigma1
}

fn family(certified: &mut Vec<Trajectory>) -> Outcome {
    let sys = seed_system();
    let cfg = CharfieldConfig::default();
    let seeds = transverse_segment(&sys, &Point::new(0.0, -0.5, 0.0), 0.25, 10, &cfg).unwrap();
    let members: Vec<Trajectory> = integrate_family(&sys, &seeds, 1.0, 0.01, &cfg)
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
    let mut worst_ratio = 0.0_f64;
    let mut singular = 0;
    for traj in &members {
        let (_, ratio, ok) = certify_characteristic(&sys, traj, 50);
        worst_ratio = worst_ratio.max(ratio);
        if ok {
            singular += 1;
            certified.push(traj.clone());
        }
    }
    let mut separation = f64::INFINITY;
    for (i, a) in members.iter().enumerate() {
        for b in &members[i + 1..] {
            separation = separation.min((a.end() - b.end()).norm());
        }
    }
    check(
        members.len() == 10 && singular == 10 && separation > 1e-3,
        format!(
            "{singular}/{} certified (max σ3/σ1 {worst_ratio:.2e}), min endpoint separation {separation:.3e} (> 1e-3)",
            members.len()
        ),
    )
}

fn dependent_and_nontrivial(certified: &[Trajectory]) -> Outcome {
    let sys = seed_system();
    let mut max_dep = 0.0_f64;
    let mut speed_err = 0.0_f64;
    let mut min_step = f64::INFINITY;
    for traj in certified {
        max_dep = max_dep.max(traj.max_dependence(&sys).unwrap());
        for v in &traj.velocities {
            speed_err = speed_err.max((v.norm() - 1.0).abs());
        }
        for (w, t) in traj.states.windows(2).zip(traj.times.windows(2)) {
            min_step = min_step.min((w[1] - w[0]).norm() / (t[1] - t[0]));
        }
    }
    check(
        !certified.is_empty() && max_dep < 1e-8 && speed_err < 1e-8 && min_step > 0.5,
        format!(
            "{} trajectories, max |Δ| {max_dep:.2e}, max ||ẋ| - 1| {speed_err:.2e}, min chord speed {min_step:.4}",
            certified.len()
        ),
    )
}

fn openness() -> Outcome {
    let sys = seed_system();
    let cfg = OpennessConfig::default();
    let report = openness_experiment(&sys, 100, 0.05, 2024, &cfg).map_err(|e| e.to_string())?;
    let worst = report.records.iter().filter_map(|r| r.ratio).fold(0.0, f64::max);
    let threshold = breakdown_threshold(&sys, 20, 2024, 0.05, 4.0, 3, &cfg).map_err(|e| e.to_string())?;
    let bracket = match threshold.failing {
        Some(hi) => format!("breakdown in ({}, {hi}]", threshold.passing),
        None => format!("no breakdown up to {}", threshold.passing),
    };
    check(
        report.persistence_rate == 1.0,
        format!(
            "persistence {}/{} at eps 0.05 (max σ3/σ1 {worst:.2e}, N = {}); {bracket} over 20 trials",
            report.passed(),
            report.trials,
            cfg.intervals
        ),
    )
}

fn analytic_trajectories() -> Outcome {
    let cfg = CharfieldConfig::default();
    let quadratic = model("0", "x2", 3.0);
    let traj = integrate_characteristic(&quadratic, &Point::new(0.0, -0.5, 0.125), 1.0, 0.01, &cfg).unwrap();
    let e_quad = traj
        .states
        .iter()
        .map(|x| (x[2] - 0.5 * x[1] * x[1]).abs())
        .fold(0.0, f64::max);

    let exponential = model("0", "x3", 3.0);
    let c = 0.3;
    let traj = integrate_characteristic(&exponential, &Point::new(0.0, 0.0, c), 1.0, 0.01, &cfg).unwrap();
    let e_exp = traj
        .states
        .iter()
        .map(|x| (x[2] - c * x[1].exp()).abs())
        .fold(0.0, f64::max);
    check(
        e_quad < 1e-8 && e_exp < 1e-8,
        format!("max |x3 - x2²/2| {e_quad:.2e}, max |x3 - x3(0)e^x2| {e_exp:.2e} (tol 1e-8)"),
    )
}

fn point_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 3] {
    loop {
        let x: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-radius..radius));
        if x.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
            return x;
        }
    }
}

fn rel_err(fd: f64, exact: f64) -> f64 {
    (fd - exact).abs() / exact.abs().max(1.0)
}

fn derivative_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    let mut worst_expr = 0.0_f64;
    for _ in 0..100 {
        let field = random_field(&mut rng, 5, &Var::ALL);
        for _ in 0..10 {
            let x = point_in_ball(&mut rng, 2.0);
            for v in Var::ALL {
                let (mut hi, mut lo) = (x, x);
                hi[v.index()] += h;
                lo[v.index()] -= h;
                let fd = (field.eval(&hi).unwrap() - field.eval(&lo).unwrap()) / (2.0 * h);
                worst_expr = worst_expr.max(rel_err(fd, field.differentiate(v).eval(&x).unwrap()));
            }
        }
    }

    let mut worst_frame = 0.0_f64;
    for _ in 0..100 {
        let components = std::array::from_fn(|_| std::array::from_fn(|_| random_field(&mut rng, 3, &Var::ALL)));
        let sys = VectorFieldSystem::general(components, ChartBox::cube(-2.0, 2.0).unwrap()).unwrap();
        for _ in 0..5 {
            let x = Point::from(point_in_ball(&mut rng, 1.9));
            let jac = sys.frame_jacobians(&x).unwrap();
            for k in 0..3 {
                let mut dx = Vector3::zeros();
                dx[k] = h;
                let fd = (sys.eval_frame(&(x + dx)).unwrap().matrix - sys.eval_frame(&(x - dx)).unwrap().matrix)
                    / (2.0 * h);
                for i in 0..3 {
                    for j in 0..3 {
                        worst_frame = worst_frame.max(rel_err(fd[(j, i)], jac[i][(j, k)]));
                    }
                }
            }
        }
    }
    check(
        worst_expr < 1e-6 && worst_frame < 1e-6,
        format!("100 fields: max rel err {worst_expr:.2e}; 100 frames: max rel err {worst_frame:.2e} (tol 1e-6)"),
    )
}

fn run(id: usize, name: &str, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} [{id}] {name}: {detail} ({secs:.1}s)");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let lifts = random_lifts();
    let mut certified = Vec::new();
    let results = [
        run(1, "closed-form adjoint", closed_form_adjoint),
        run(2, "conservation of p2 + Q p3", || conservation(&lifts)),
        run(3, "constraint residuals", || residuals(&lifts)),
        run(4, "singularity certification", || singularity(&mut certified)),
        run(5, "one-parameter family", || family(&mut certified)),
        run(6, "dependent and non-trivial", || dependent_and_nontrivial(&certified)),
        run(7, "openness under bump perturbations", openness),
        run(8, "analytic trajectory oracles", analytic_trajectories),
        run(9, "derivative and Jacobian checks", derivative_checks),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
