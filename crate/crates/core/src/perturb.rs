//! Compactly supported perturbations and the openness experiment.
//!
//! A perturbation adds `α_i φ` to each field `X_i`, where
//! `φ(x) = max(1 - |x - c|²/ρ², 0)⁴` is a quartic bump: C³ across the sphere
//! `|x - c| = ρ` and identically zero outside it. The experiment perturbs a
//! system many times, re-runs the whole pipeline on each copy and reports
//! how often every stage still succeeds.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::charfield::{integrate_characteristic, CharfieldConfig, Trajectory};
use crate::endpoint::{certify, ControlBounds, ControlSignal, EndpointConfig, JacobianMethod, DEFAULT_RANK_TOL};
use crate::expr::{ScalarField, Var};
use crate::locus::{
    check_regularity, check_transversality, detect_locus, frame_geometry, project_to_locus, project_to_locus_unbounded,
    LocusError, LocusMesh,
};
use crate::system::{ChartBox, SystemError, VectorFieldSystem};
use crate::Point;

/// `ρ · max |∇φ|` for the quartic profile, attained at `|x - c| = ρ/√7`.
pub fn profile_slope() -> f64 {
    8.0 / 7f64.sqrt() * (6.0f64 / 7.0).powi(3)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbError {
    #[error("perturbation size must be finite and nonnegative, got {0}")]
    InvalidEpsilon(f64),
    #[error("unperturbed system fails the pipeline: {0}")]
    Baseline(String),
    #[error("no singular control direction at t = {t}: |F β| = {norm:e}")]
    DegenerateBracket { t: f64, norm: f64 },
    #[error(transparent)]
    Locus(#[from] LocusError),
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BumpPerturbation {
    pub center: [f64; 3],
    pub radius: f64,
    /// `amplitudes[i]` is added to `X_{i+1}` with profile `φ`.
    pub amplitudes: [[f64; 3]; 3],
}

impl BumpPerturbation {
    pub fn identity() -> Self {
        BumpPerturbation {
            center: [0.0; 3],
            radius: 1.0,
            amplitudes: [[0.0; 3]; 3],
        }
    }

    pub fn profile(&self, x: &Point) -> f64 {
        let r2 = (x - Point::from(self.center)).norm_squared();
        (1.0 - r2 / (self.radius * self.radius)).max(0.0).powi(4)
    }

    /// `φ` in the expression grammar.
    pub fn profile_field(&self) -> ScalarField {
        let r2 = Var::ALL
            .iter()
            .zip(self.center)
            .map(|(&v, c)| ScalarField::var(v).sub(&ScalarField::constant(c)).powi(2))
            .reduce(|a, b| a.add(&b))
            .expect("three terms");
        ScalarField::one()
            .sub(&r2.div(&ScalarField::constant(self.radius * self.radius)))
            .pos()
            .powi(4)
    }

    /// Sup norm of the added components.
    pub fn c0_size(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|a| Vector3::from(*a).norm())
            .fold(0.0, f64::max)
    }

    /// Bound on the sup norm of the added components' first derivatives.
    pub fn c1_size(&self) -> f64 {
        self.c0_size() * profile_slope() / self.radius
    }

    pub fn is_identity(&self) -> bool {
        self.amplitudes.iter().flatten().all(|&a| a == 0.0)
    }
}

/// A bump with center uniform in `region`, radius between a quarter and a
/// half of the region's smallest side, and amplitudes `|α_i| ≤ eps`.
pub fn random_bump_perturbation(seed: u64, eps: f64, region: &ChartBox) -> Result<BumpPerturbation, PerturbError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(PerturbError::InvalidEpsilon(eps));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = std::array::from_fn(|k| rng.gen_range(region.min[k]..=region.max[k]));
    let side = (0..3).map(|k| region.max[k] - region.min[k]).fold(f64::INFINITY, f64::min);
    let radius = side * rng.gen_range(0.25..=0.5);
    let amplitudes = std::array::from_fn(|_| {
        let v = Vector3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..=1.0));
        let a = v * (eps / v.norm().max(1.0));
        [a[0], a[1], a[2]]
    });
    Ok(BumpPerturbation {
        center,
        radius,
        amplitudes,
    })
}

/// The general-form system with components `(X_i)_j + (α_i)_j φ`.
pub fn apply_perturbation(
    sys: &VectorFieldSystem,
    pert: &BumpPerturbation,
) -> Result<VectorFieldSystem, SystemError> {
    let phi = pert.profile_field();
    let mut components = sys.components().clone();
    for (field, alpha) in components.iter_mut().zip(pert.amplitudes) {
        for (c, a) in field.iter_mut().zip(alpha) {
            if a != 0.0 {
                *c = c.add(&ScalarField::constant(a).mul(&phi));
            }
        }
    }
    VectorFieldSystem::general(components, *sys.chart())
}

/// Singular control along a dependent trajectory of any frame.
///
/// With `m` the annihilator of `D` and `B_ij = ⟨m, [X_i, X_j]⟩`, an adjoint
/// `p ∥ m` stays orthogonal to the frame iff `uᵀB = 0`, so `u` is parallel to
/// `β = (B23, B31, B12)`; it is scaled so that `F u` matches the trajectory's
/// velocity. On a normal-form frame this reproduces the closed-form lift.
pub fn bracket_control(
    sys: &VectorFieldSystem,
    traj: &Trajectory,
    cfg: &CharfieldConfig,
) -> Result<Vec<Vector3<f64>>, PerturbError> {
    traj.states
        .iter()
        .zip(&traj.velocities)
        .zip(&traj.times)
        .map(|((x, v), &t)| {
            let m = frame_geometry(sys, x, &cfg.locus)?.annihilator;
            let frame = sys.frame_unchecked(x).map_err(SystemError::from)?;
            let jac = sys.jacobians_unchecked(x)?;
            let b = |i: usize, j: usize| {
                let bracket = jac[j] * frame.column(i) - jac[i] * frame.column(j);
                m.dot(&bracket)
            };
            let beta = Vector3::new(b(1, 2), b(2, 0), b(0, 1));
            let fb = frame * beta;
            let norm = fb.norm();
            if norm < cfg.tangency_cutoff {
                return Err(PerturbError::DegenerateBracket { t, norm });
            }
            Ok(beta * (fb.dot(v) / (norm * norm)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpennessConfig {
    /// Start of the reference characteristic trajectory (on Σ).
    pub x0: Point,
    pub duration: f64,
    pub dt: f64,
    /// Control intervals used for certification. Midpoint samples of a
    /// singular control on a perturbed frame are singular only up to
    /// `O(ε/N²)`, so this is larger than the usual 50.
    pub intervals: usize,
    pub rank_tol: f64,
    pub resolution: [usize; 3],
    /// Box the bump centers are drawn from; the chart if `None`.
    pub region: Option<ChartBox>,
    /// Every `check_stride`-th sample of the reference trajectory is checked.
    pub check_stride: usize,
    pub charfield: CharfieldConfig,
    pub endpoint: EndpointConfig,
}

impl Default for OpennessConfig {
    fn default() -> Self {
        OpennessConfig {
            x0: Point::new(0.0, -0.5, 0.125),
            duration: 1.0,
            dt: 0.01,
            intervals: 200,
            rank_tol: DEFAULT_RANK_TOL,
            resolution: [12; 3],
            region: None,
            check_stride: 5,
            charfield: CharfieldConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub c0_size: f64,
    pub c1_size: f64,
    pub locus_found: bool,
    pub regular: bool,
    pub transverse: bool,
    pub trajectory_found: bool,
    pub singular: bool,
    /// `σ3/σ1` of the re-certified control, when certification ran.
    pub ratio: Option<f64>,
    /// First stage that failed, with its message.
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn passed(&self) -> bool {
        self.locus_found && self.regular && self.transverse && self.trajectory_found && self.singular
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpennessReport {
    pub trials: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub persistence_rate: f64,
    pub max_c0_size: f64,
    pub max_c1_size: f64,
    pub records: Vec<TrialRecord>,
}

impl OpennessReport {
    pub fn passed(&self) -> usize {
        self.records.iter().filter(|r| r.passed()).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Seed of trial `index` under experiment seed `seed`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a trial compares against.
struct Baseline {
    mesh: LocusMesh,
    checkpoints: Vec<Point>,
}

/// Runs the pipeline once on `sys`: characteristic trajectory from `x0`,
/// bracket control, certification. Returns the trajectory and verdict ratio.
fn certify_from(
    sys: &VectorFieldSystem,
    x0: &Point,
    cfg: &OpennessConfig,
) -> Result<(Trajectory, f64, bool), String> {
    let traj = integrate_characteristic(sys, x0, cfg.duration, cfg.dt, &cfg.charfield).map_err(|e| e.to_string())?;
    if let Some(reason) = traj.stopped {
        return Err(format!("characteristic trajectory stopped early ({reason:?}) at t = {}", traj.duration()));
    }
    let control = bracket_control(sys, &traj, &cfg.charfield).map_err(|e| e.to_string())?;
    let signal = ControlSignal::from_samples_midpoint(&traj.times, &control, cfg.intervals, ControlBounds::default())
        .map_err(|e| e.to_string())?;
    let verdict = certify(sys, x0, &signal, JacobianMethod::Variational, cfg.rank_tol, &cfg.endpoint)
        .map_err(|e| e.to_string())?;
    Ok((traj, verdict.ratio, verdict.singular))
}

fn baseline(sys: &VectorFieldSystem, cfg: &OpennessConfig) -> Result<Baseline, PerturbError> {
    let mesh = detect_locus(sys, cfg.resolution, &cfg.charfield.locus)?;
    if mesh.is_empty() {
        return Err(PerturbError::Baseline("no locus points in the chart".into()));
    }
    let (traj, ratio, singular) = certify_from(sys, &cfg.x0, cfg).map_err(PerturbError::Baseline)?;
    if !singular {
        return Err(PerturbError::Baseline(format!("reference control not singular (ratio {ratio:e})")));
    }
    let checkpoints = traj.states.iter().step_by(cfg.check_stride.max(1)).copied().collect();
    Ok(Baseline { mesh, checkpoints })
}

fn run_trial(
    sys: &VectorFieldSystem,
    base: &Baseline,
    trial: usize,
    eps: f64,
    seed: u64,
    cfg: &OpennessConfig,
) -> TrialRecord {
    let seed = trial_seed(seed, trial);
    let region = cfg.region.unwrap_or(*sys.chart());
    let pert = random_bump_perturbation(seed, eps, &region).expect("epsilon validated by caller");
    let mut rec = TrialRecord {
        trial,
        seed,
        c0_size: pert.c0_size(),
        c1_size: pert.c1_size(),
        locus_found: false,
        regular: false,
        transverse: false,
        trajectory_found: false,
        singular: false,
        ratio: None,
        failure: None,
    };
    let psys = match apply_perturbation(sys, &pert) {
        Ok(s) => s,
        Err(e) => {
            rec.failure = Some(format!("perturbed system: {e}"));
            return rec;
        }
    };
    let lcfg = &cfg.charfield.locus;

    // Mesh points whose projection converges outside the chart are dropped:
    // near the boundary Σ may simply move out of the box.
    let mut lost = 0;
    let mut kept = 0;
    for p in &base.mesh.points {
        match project_to_locus_unbounded(&psys, &p.position, lcfg) {
            None => lost += 1,
            Some(y) if psys.chart().contains(&y) => kept += 1,
            Some(_) => {}
        }
    }
    rec.locus_found = lost == 0 && kept > 0;
    if !rec.locus_found {
        rec.failure = Some(format!(
            "locus: {lost} of {} mesh points did not reproject, {kept} landed in the chart",
            base.mesh.len()
        ));
        return rec;
    }

    let mut regular = true;
    let mut transverse = true;
    for x in &base.checkpoints {
        let Some(y) = project_to_locus(&psys, x, lcfg) else {
            regular = false;
            transverse = false;
            break;
        };
        regular &= check_regularity(&psys, &y, lcfg).is_ok_and(|v| v.pass);
        transverse &= check_transversality(&psys, &y, lcfg).is_ok_and(|v| v.pass);
    }
    rec.regular = regular;
    rec.transverse = transverse;
    if !(regular && transverse) {
        rec.failure = Some("genericity check failed near the reference trajectory".into());
        return rec;
    }

    let Some(x0) = project_to_locus(&psys, &cfg.x0, lcfg) else {
        rec.failure = Some("initial point did not reproject".into());
        return rec;
    };
    match certify_from(&psys, &x0, cfg) {
        Ok((_, ratio, singular)) => {
            rec.trajectory_found = true;
            rec.ratio = Some(ratio);
            rec.singular = singular;
            if !singular {
                rec.failure = Some(format!("control not certified singular (ratio {ratio:e})"));
            }
        }
        Err(e) => rec.failure = Some(e),
    }
    rec
}

/// Perturbs `sys` `trials` times at size `eps` and re-runs locus detection
/// (warm-started from the unperturbed mesh), the genericity checks along the
/// reference trajectory, characteristic integration and certification.
///
/// Trial failures are recorded in the report; an error means the unperturbed
/// system itself does not pass.
pub fn openness_experiment(
    sys: &VectorFieldSystem,
    trials: usize,
    eps: f64,
    seed: u64,
    cfg: &OpennessConfig,
) -> Result<OpennessReport, PerturbError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(PerturbError::InvalidEpsilon(eps));
    }
    let base = baseline(sys, cfg)?;
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(sys, &base, i, eps, seed, cfg))
        .collect();
    let passed = records.iter().filter(|r| r.passed()).count();
    Ok(OpennessReport {
        trials,
        epsilon: eps,
        seed,
        persistence_rate: if trials == 0 { 1.0 } else { passed as f64 / trials as f64 },
        max_c0_size: records.iter().map(|r| r.c0_size).fold(0.0, f64::max),
        max_c1_size: records.iter().map(|r| r.c1_size).fold(0.0, f64::max),
        records,
    })
}

/// Bisection bracket for the largest perturbation size with rate 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownThreshold {
    /// Largest size seen with every trial passing.
    pub passing: f64,
    /// Smallest size seen with a failing trial; `None` if none failed up to the cap.
    pub failing: Option<f64>,
    /// `(eps, persistence_rate)` for every evaluated size, in order.
    pub evaluations: Vec<(f64, f64)>,
}

/// Brackets the breakdown size: doubles from `start` (which must pass) up to
/// `cap`, then bisects `iterations` times.
pub fn breakdown_threshold(
    sys: &VectorFieldSystem,
    trials: usize,
    seed: u64,
    start: f64,
    cap: f64,
    iterations: usize,
    cfg: &OpennessConfig,
) -> Result<BreakdownThreshold, PerturbError> {
    let mut evaluations = Vec::new();
    let mut rate = |eps: f64| -> Result<f64, PerturbError> {
        let r = openness_experiment(sys, trials, eps, seed, cfg)?.persistence_rate;
        evaluations.push((eps, r));
        Ok(r)
    };
    if rate(start)? < 1.0 {
        return Err(PerturbError::Baseline(format!("persistence already below 1 at eps = {start}")));
    }
    let mut lo = start;
    let mut hi = None;
    while hi.is_none() && lo < cap {
        let next = (2.0 * lo).min(cap);
        if rate(next)? < 1.0 {
            hi = Some(next);
        } else {
            lo = next;
        }
    }
    if let Some(mut h) = hi {
        for _ in 0..iterations {
            let mid = 0.5 * (lo + h);
            if rate(mid)? < 1.0 {
                h = mid;
            } else {
                lo = mid;
            }
        }
        hi = Some(h);
    }
    Ok(BreakdownThreshold {
        passing: lo,
        failing: hi,
        evaluations,
    })
}
