use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use singtraj_core::charfield::{integrate_characteristic, integrate_family, transverse_segment, CharfieldConfig};
use singtraj_core::endpoint::{certify, ControlBounds, EndpointConfig, JacobianMethod};
use singtraj_core::export::fmt_f64;
use singtraj_core::locus::{analyze_locus, detect_locus, write_mesh_csv, LocusConfig};
use singtraj_core::perturb::{bracket_control, breakdown_threshold, openness_experiment, OpennessConfig};
use singtraj_core::pmp::{constraint_residuals, discretize_lift, lift_to_extremal};
use singtraj_core::{ControlSignal, Point, SingularityVerdict, Trajectory, VectorFieldSystem};

use crate::artifacts::Artifacts;
use crate::config::RunConfig;

pub fn charfield_config(cfg: &RunConfig) -> CharfieldConfig {
    CharfieldConfig {
        tangency_cutoff: cfg.tangency_cutoff,
        ..CharfieldConfig::default()
    }
}

fn point_json(p: &Point) -> serde_json::Value {
    json!([p[0], p[1], p[2]])
}

pub fn locus(sys: &VectorFieldSystem, cfg: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let lcfg = LocusConfig::default();
    let mesh = detect_locus(sys, cfg.resolution, &lcfg)?;
    let report = analyze_locus(sys, &mesh, &lcfg);
    out.write("locus.csv", |w| write_mesh_csv(w, &mesh, &report))?;
    let margins: Vec<f64> = report.entries.iter().filter_map(|e| e.margin).collect();
    let summary = json!({
        "points": mesh.len(),
        "resolution": cfg.resolution,
        "regular": report.entries.iter().filter(|e| e.regular_ok).count(),
        "transverse": report.entries.iter().filter(|e| e.transverse_ok).count(),
        "degenerate": report.entries.iter().filter(|e| e.degenerate).count(),
        "all_regular": report.all_regular(),
        "all_transverse": report.all_transverse(),
        "min_transversality_margin": margins.iter().copied().reduce(f64::min),
        "gamma_points": report.gamma_points.iter().map(point_json).collect::<Vec<_>>(),
    });
    out.write_json("tangency.json", &summary)?;
    println!(
        "locus: {} points, {} regular, {} transverse, {} on the tangency curve",
        mesh.len(),
        summary["regular"],
        summary["transverse"],
        report.gamma_points.len()
    );
    Ok(())
}

fn characteristic(sys: &VectorFieldSystem, cfg: &RunConfig, x0: &Point, duration: f64) -> Result<Trajectory> {
    let traj = integrate_characteristic(sys, x0, duration, cfg.dt, &charfield_config(cfg))?;
    if let Some(reason) = traj.stopped {
        eprintln!(
            "warning: characteristic trajectory stopped at t = {} ({reason:?})",
            fmt_f64(traj.duration())
        );
    }
    if traj.len() < 2 {
        bail!("characteristic trajectory has a single sample");
    }
    Ok(traj)
}

pub fn traj(sys: &VectorFieldSystem, cfg: &RunConfig, x0: &Point, duration: f64, out: &mut Artifacts) -> Result<()> {
    let traj = characteristic(sys, cfg, x0, duration)?;
    out.write("trajectory.csv", |w| traj.write_csv(w))?;
    println!(
        "trajectory: {} samples, arc length {}, max |Δ| {}",
        traj.len(),
        fmt_f64(traj.arc_length()),
        fmt_f64(traj.max_dependence(sys)?)
    );
    Ok(())
}

pub fn lift(
    sys: &VectorFieldSystem,
    cfg: &RunConfig,
    x0: &Point,
    a: f64,
    duration: f64,
    out: &mut Artifacts,
) -> Result<()> {
    let traj = characteristic(sys, cfg, x0, duration)?;
    let lift = lift_to_extremal(sys, &traj, a)?;
    let stats = constraint_residuals(sys, &lift)?;
    out.write("lift.csv", |w| lift.write_csv(w))?;
    println!(
        "lift: {} samples, max |<p, X_i>| {}, max |H| {}",
        traj.len(),
        fmt_f64(stats.max_overall()),
        fmt_f64(stats.max_hamiltonian)
    );
    Ok(())
}

/// The characteristic control from `x0` on `n` intervals: the exact discrete
/// lift for normal-form systems, midpoint samples of the bracket control otherwise.
fn characteristic_control(
    sys: &VectorFieldSystem,
    cfg: &RunConfig,
    x0: &Point,
    n: usize,
    duration: f64,
) -> Result<ControlSignal> {
    let traj = characteristic(sys, cfg, x0, duration)?;
    let control = if sys.is_model() {
        let lift = lift_to_extremal(sys, &traj, 1.0)?;
        discretize_lift(sys, &lift, n, ControlBounds::default(), &EndpointConfig::default())?
    } else {
        let samples = bracket_control(sys, &traj, &charfield_config(cfg))?;
        ControlSignal::from_samples_midpoint(&traj.times, &samples, n, ControlBounds::default())?
    };
    Ok(control)
}

pub fn random_control(seed: u64, n: usize, duration: f64) -> Result<ControlSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n)
        .map(|_| Point::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    Ok(ControlSignal::new(0.0, duration, values, ControlBounds::default())?)
}

pub struct VerifyArgs {
    pub x0: Point,
    pub intervals: usize,
    pub duration: f64,
    pub method: JacobianMethod,
    pub random: Option<u64>,
}

pub fn verify_verdict(sys: &VectorFieldSystem, cfg: &RunConfig, args: &VerifyArgs) -> Result<SingularityVerdict> {
    let control = match args.random {
        Some(seed) => random_control(seed, args.intervals, args.duration)?,
        None => characteristic_control(sys, cfg, &args.x0, args.intervals, args.duration)?,
    };
    Ok(certify(sys, &args.x0, &control, args.method, cfg.rank_tol, &EndpointConfig::default())?)
}

pub fn verify(sys: &VectorFieldSystem, cfg: &RunConfig, args: &VerifyArgs, out: &mut Artifacts) -> Result<()> {
    let verdict = verify_verdict(sys, cfg, args)?;
    out.write_json("verdict.json", &serde_json::to_value(verdict)?)?;
    println!(
        "verdict: singular = {}, σ3/σ1 = {} (tol {:e}, {}, N = {})",
        verdict.singular,
        fmt_f64(verdict.ratio),
        verdict.tolerance,
        verdict.method,
        verdict.intervals
    );
    Ok(())
}

pub struct PerturbArgs {
    pub trials: usize,
    pub eps: f64,
    pub seed: u64,
    pub intervals: usize,
    pub x0: Point,
    pub duration: f64,
    pub threshold: Option<ThresholdArgs>,
}

pub struct ThresholdArgs {
    pub trials: usize,
    pub cap: f64,
    pub bisections: usize,
}

pub fn openness_config(cfg: &RunConfig, intervals: usize, x0: Point, duration: f64) -> OpennessConfig {
    OpennessConfig {
        x0,
        duration,
        dt: cfg.dt,
        intervals,
        rank_tol: cfg.rank_tol,
        resolution: cfg.resolution,
        charfield: charfield_config(cfg),
        ..OpennessConfig::default()
    }
}

pub fn perturb(sys: &VectorFieldSystem, cfg: &RunConfig, args: &PerturbArgs, out: &mut Artifacts) -> Result<()> {
    if !sys.is_model() {
        bail!("the openness experiment perturbs a normal-form system");
    }
    let ocfg = openness_config(cfg, args.intervals, args.x0, args.duration);
    let report = openness_experiment(sys, args.trials, args.eps, args.seed, &ocfg)?;
    let threshold = match &args.threshold {
        Some(t) => Some(breakdown_threshold(sys, t.trials, args.seed, args.eps, t.cap, t.bisections, &ocfg)?),
        None => None,
    };
    let mut value = serde_json::to_value(&report)?;
    value["threshold"] = serde_json::to_value(&threshold)?;
    out.write_json("openness.json", &value)?;
    println!(
        "openness: {}/{} trials persist at eps = {} (rate {})",
        report.passed(),
        report.trials,
        fmt_f64(report.epsilon),
        fmt_f64(report.persistence_rate)
    );
    if let Some(t) = threshold {
        match t.failing {
            Some(f) => println!("breakdown between eps = {} and {}", fmt_f64(t.passing), fmt_f64(f)),
            None => println!("no breakdown up to eps = {}", fmt_f64(t.passing)),
        }
    }
    Ok(())
}

/// Runs the pipeline on the seed system and prints one row per stage.
pub fn demo(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.system = RunConfig::default().system;
    let sys = cfg.build_system()?;
    let lcfg = LocusConfig::default();
    let ccfg = charfield_config(&cfg);
    let x0 = Point::new(0.0, -0.5, 0.125);
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut row = |k: &str, v: String| rows.push((k.to_string(), v));

    row("system", "P = 0, Q = x2".into());
    let mesh = detect_locus(&sys, cfg.resolution, &lcfg)?;
    let report = analyze_locus(&sys, &mesh, &lcfg);
    row("locus points", mesh.len().to_string());
    row("all regular", report.all_regular().to_string());
    row("all transverse", report.all_transverse().to_string());

    let traj = characteristic(&sys, &cfg, &x0, 1.0)?;
    row("trajectory samples", traj.len().to_string());
    row("max |Δ| along trajectory", fmt_f64(traj.max_dependence(&sys)?));

    let lift = lift_to_extremal(&sys, &traj, 1.0)?;
    let stats = constraint_residuals(&sys, &lift)?;
    row("max |<p, X_i>|", fmt_f64(stats.max_overall()));

    let control = discretize_lift(&sys, &lift, cfg.intervals, ControlBounds::default(), &EndpointConfig::default())?;
    let verdict = certify(&sys, &x0, &control, JacobianMethod::Variational, cfg.rank_tol, &EndpointConfig::default())?;
    row("lift σ3/σ1", fmt_f64(verdict.ratio));
    row("lift singular", verdict.singular.to_string());

    let off = Point::new(0.5, x0[1], x0[2]);
    let random = random_control(1, cfg.intervals, 1.0)?;
    let verdict = certify(&sys, &off, &random, JacobianMethod::Variational, cfg.rank_tol, &EndpointConfig::default())?;
    row("random off-Σ σ3/σ1", fmt_f64(verdict.ratio));
    row("random off-Σ singular", verdict.singular.to_string());

    let starts = transverse_segment(&sys, &Point::new(0.0, -0.5, 0.0), 0.25, 10, &ccfg)?;
    let family = integrate_family(&sys, &starts, 1.0, cfg.dt, &ccfg);
    let ends: Vec<Point> = family
        .into_iter()
        .map(|t| t.map(|t| *t.end()))
        .collect::<Result<_, _>>()
        .context("family member")?;
    let separation = ends
        .iter()
        .enumerate()
        .flat_map(|(i, a)| ends[i + 1..].iter().map(move |b| (a - b).norm()))
        .fold(f64::INFINITY, f64::min);
    row("family size", ends.len().to_string());
    row("min endpoint separation", fmt_f64(separation));

    let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("{k:<width$}  {v}");
    }
    Ok(())
}
