//! The characteristic line field `D ∩ TΣ` on the dependence locus and its
//! integral curves, the dependent trajectories.
//!
//! Directions are unit vectors, so integral curves are parametrized by arc
//! length. A line field has no global orientation; the integrator keeps the
//! sign consistent with the previous step.

use std::io::{self, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::export::csv_row;
use crate::locus::{frame_geometry, LocusConfig, LocusError};
use crate::system::{SystemError, VectorFieldSystem};
use crate::Point;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CharfieldError {
    #[error("D is tangent to the locus here (transversality margin {margin:e})")]
    Tangency { margin: f64 },
    #[error("step size and duration must be positive and finite")]
    InvalidStep,
    #[error("characteristic direction flipped at step {step}")]
    DirectionFlip { step: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Locus(#[from] LocusError),
}

impl From<SystemError> for CharfieldError {
    fn from(e: SystemError) -> Self {
        CharfieldError::Locus(e.into())
    }
}

/// Why an integration stopped before the requested duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    ChartBoundary,
    Tangency,
}

/// A sampled curve `t ↦ x(t)` with velocities at the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Point>,
    pub velocities: Vec<Vector3<f64>>,
    /// Set when integration was truncated.
    pub stopped: Option<StopReason>,
}

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        states: Vec<Point>,
        velocities: Vec<Vector3<f64>>,
    ) -> Result<Self, CharfieldError> {
        if times.is_empty() || times.len() != states.len() || times.len() != velocities.len() {
            return Err(CharfieldError::InvalidTrajectory(format!(
                "{} times, {} states, {} velocities",
                times.len(),
                states.len(),
                velocities.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CharfieldError::InvalidTrajectory(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(Trajectory {
            times,
            states,
            velocities,
            stopped: None,
        })
    }

    /// Samples a closed-form curve and its derivative on a uniform grid.
    pub fn from_fn(
        t0: f64,
        t1: f64,
        samples: usize,
        curve: impl Fn(f64) -> (Point, Vector3<f64>),
    ) -> Result<Self, CharfieldError> {
        if samples < 2 || !(t1 > t0) {
            return Err(CharfieldError::InvalidTrajectory(
                "need at least two samples on a non-empty interval".into(),
            ));
        }
        let times: Vec<f64> = (0..samples)
            .map(|k| t0 + (t1 - t0) * k as f64 / (samples - 1) as f64)
            .collect();
        let (states, velocities) = times.iter().map(|&t| curve(t)).unzip();
        Self::new(times, states, velocities)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> &Point {
        &self.states[0]
    }

    pub fn end(&self) -> &Point {
        self.states.last().expect("trajectory is non-empty")
    }

    pub fn duration(&self) -> f64 {
        self.times[self.len() - 1] - self.times[0]
    }

    /// Polygonal length through the samples.
    pub fn arc_length(&self) -> f64 {
        self.states.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// `max_k |Δ(x(t_k))|`.
    pub fn max_dependence(&self, sys: &VectorFieldSystem) -> Result<f64, SystemError> {
        self.states.iter().try_fold(0.0_f64, |acc, x| {
            Ok(acc.max(sys.dependence_at(x)?.abs()))
        })
    }

    /// CSV with header `t,x1,x2,x3`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,x1,x2,x3")?;
        for (t, x) in self.times.iter().zip(&self.states) {
            writeln!(out, "{}", csv_row(&[*t, x[0], x[1], x[2]]))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharfieldConfig {
    pub locus: LocusConfig,
    /// Below this transversality margin the line field is treated as tangent.
    pub tangency_cutoff: f64,
    /// `|Δ|` above which a step is followed by a Newton projection.
    pub projection_tol: f64,
}

impl Default for CharfieldConfig {
    fn default() -> Self {
        CharfieldConfig {
            locus: LocusConfig::default(),
            tangency_cutoff: 1e-4,
            projection_tol: 1e-12,
        }
    }
}

/// Unit vector spanning `D_x ∩ ker ∇Δ(x)` with an arbitrary sign, and the
/// transversality margin. Defined near Σ as well, which the integrator needs
/// for its stage points.
fn line_direction(
    sys: &VectorFieldSystem,
    x: &Point,
    cfg: &CharfieldConfig,
) -> Result<Vector3<f64>, CharfieldError> {
    let geo = frame_geometry(sys, x, &cfg.locus)?;
    let margin = geo.transversality_margin();
    if margin <= cfg.tangency_cutoff {
        return Err(CharfieldError::Tangency { margin });
    }
    let d = geo.annihilator.cross(&geo.normal);
    Ok(d / d.norm())
}

/// Flips `d` so that its largest-magnitude component is positive; among
/// components equal in magnitude up to rounding the lowest index decides.
fn normalize_orientation(d: Vector3<f64>) -> Vector3<f64> {
    let max = d.amax();
    let lead = (0..3)
        .find(|&k| d[k].abs() >= max * (1.0 - 1e-12))
        .expect("non-empty vector");
    if d[lead] < 0.0 {
        -d
    } else {
        d
    }
}

fn align(d: Vector3<f64>, reference: &Vector3<f64>) -> Vector3<f64> {
    if d.dot(reference) < 0.0 {
        -d
    } else {
        d
    }
}

/// The characteristic direction at a point of `Σ \ γ`.
pub fn characteristic_direction(
    sys: &VectorFieldSystem,
    x: &Point,
    cfg: &CharfieldConfig,
) -> Result<Vector3<f64>, CharfieldError> {
    if !sys.chart().contains(x) {
        return Err(SystemError::OutOfChart { point: (*x).into() }.into());
    }
    let residual = sys.dependence_at(x).map_err(SystemError::from)?.abs();
    if residual >= cfg.locus.on_locus_tol {
        return Err(LocusError::NotOnLocus { residual }.into());
    }
    Ok(normalize_orientation(line_direction(sys, x, cfg)?))
}

fn project_once(sys: &VectorFieldSystem, x: &mut Point, tol: f64) -> Result<(), SystemError> {
    let f = sys.dependence_at(x)?;
    if f.abs() > tol {
        let g = sys.dependence_gradient_at(x)?;
        let g2 = g.norm_squared();
        if g2 > 0.0 {
            *x -= g * (f / g2);
        }
    }
    Ok(())
}

enum StepOutcome {
    Advanced(Point, Vector3<f64>),
    Stopped(StopReason),
}

fn rk4_step(
    sys: &VectorFieldSystem,
    x: &Point,
    d0: &Vector3<f64>,
    dt: f64,
    step: usize,
    cfg: &CharfieldConfig,
) -> Result<StepOutcome, CharfieldError> {
    let chart = sys.chart();
    let stage = |p: Point| -> Result<Option<Vector3<f64>>, CharfieldError> {
        if !chart.contains(&p) {
            return Ok(None);
        }
        match line_direction(sys, &p, cfg) {
            Ok(d) => Ok(Some(align(d, d0))),
            Err(CharfieldError::Tangency { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let stop_reason = |p: &Point| {
        if chart.contains(p) {
            StopReason::Tangency
        } else {
            StopReason::ChartBoundary
        }
    };
    let k1 = *d0;
    let p2 = x + k1 * (0.5 * dt);
    let Some(k2) = stage(p2)? else {
        return Ok(StepOutcome::Stopped(stop_reason(&p2)));
    };
    let p3 = x + k2 * (0.5 * dt);
    let Some(k3) = stage(p3)? else {
        return Ok(StepOutcome::Stopped(stop_reason(&p3)));
    };
    let p4 = x + k3 * dt;
    let Some(k4) = stage(p4)? else {
        return Ok(StepOutcome::Stopped(stop_reason(&p4)));
    };
    let mut next = x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    if !chart.contains(&next) {
        return Ok(StepOutcome::Stopped(StopReason::ChartBoundary));
    }
    project_once(sys, &mut next, cfg.projection_tol)?;
    if !chart.contains(&next) {
        return Ok(StepOutcome::Stopped(StopReason::ChartBoundary));
    }
    let Some(d_next) = stage(next)? else {
        return Ok(StepOutcome::Stopped(StopReason::Tangency));
    };
    if d_next.dot(d0) <= 0.0 {
        return Err(CharfieldError::DirectionFlip { step });
    }
    Ok(StepOutcome::Advanced(next, d_next))
}

/// Integrates the characteristic line field from `x0` for arc length
/// `duration` with fixed step `dt`, using classical Runge-Kutta followed by
/// a Newton projection back onto Σ after every step.
///
/// Integration stops early, with [`Trajectory::stopped`] set, at the chart
/// boundary or when the transversality margin falls below the cutoff.
pub fn integrate_characteristic(
    sys: &VectorFieldSystem,
    x0: &Point,
    duration: f64,
    dt: f64,
    cfg: &CharfieldConfig,
) -> Result<Trajectory, CharfieldError> {
    if !(dt > 0.0 && dt.is_finite() && duration >= 0.0 && duration.is_finite()) {
        return Err(CharfieldError::InvalidStep);
    }
    let mut direction = characteristic_direction(sys, x0, cfg)?;
    let steps = (duration / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(*x0);
    velocities.push(direction);
    let mut stopped = None;
    let mut x = *x0;
    for step in 1..=steps {
        match rk4_step(sys, &x, &direction, dt, step, cfg)? {
            StepOutcome::Advanced(next, d) => {
                x = next;
                direction = d;
                times.push(step as f64 * dt);
                states.push(x);
                velocities.push(direction);
            }
            StepOutcome::Stopped(reason) => {
                stopped = Some(reason);
                break;
            }
        }
    }
    Ok(Trajectory {
        times,
        states,
        velocities,
        stopped,
    })
}

/// `count` points of Σ on a segment through `center` that crosses the
/// characteristic lines, each projected back onto Σ.
pub fn transverse_segment(
    sys: &VectorFieldSystem,
    center: &Point,
    half_length: f64,
    count: usize,
    cfg: &CharfieldConfig,
) -> Result<Vec<Point>, CharfieldError> {
    let d = characteristic_direction(sys, center, cfg)?;
    let normal = sys
        .dependence_gradient_at(center)
        .map_err(SystemError::from)?
        .normalize();
    let across = normal.cross(&d).normalize();
    (0..count)
        .map(|k| {
            let s = if count == 1 {
                0.0
            } else {
                -half_length + 2.0 * half_length * k as f64 / (count - 1) as f64
            };
            crate::locus::project_to_locus(sys, &(center + across * s), &cfg.locus).ok_or_else(|| {
                LocusError::NotOnLocus {
                    residual: f64::NAN,
                }
                .into()
            })
        })
        .collect()
}

/// Integrates from every seed in parallel.
pub fn integrate_family(
    sys: &VectorFieldSystem,
    seeds: &[Point],
    duration: f64,
    dt: f64,
    cfg: &CharfieldConfig,
) -> Vec<Result<Trajectory, CharfieldError>> {
    seeds
        .par_iter()
        .map(|x0| integrate_characteristic(sys, x0, duration, dt, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, random::random_field, ScalarField, Var};
    use crate::system::ChartBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f(s: &str) -> ScalarField {
        parse_expr(s).unwrap()
    }

    fn model(p: &str, q: &str) -> VectorFieldSystem {
        VectorFieldSystem::model(f(p), f(q), ChartBox::cube(-2.0, 2.0).unwrap()).unwrap()
    }

    fn cfg() -> CharfieldConfig {
        CharfieldConfig::default()
    }

    #[test]
    fn direction_examples() {
        let d = characteristic_direction(&model("0", "x2"), &Point::new(0.0, 1.0, 0.0), &cfg()).unwrap();
        let expected = Vector3::new(0.0, 1.0, 1.0) / 2.0_f64.sqrt();
        assert!((d - expected).norm() < 1e-15);

        let d = characteristic_direction(&model("x3", "0"), &Point::new(0.0, -0.4, 1.2), &cfg()).unwrap();
        assert!((d - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn direction_on_gamma_is_a_tangency() {
        let cols = [["1", "0", "x2"], ["0", "1", "0"], ["0", "0", "x3"]];
        let sys = VectorFieldSystem::general(cols.map(|c| c.map(f)), ChartBox::cube(-2.0, 2.0).unwrap())
            .unwrap();
        assert!(matches!(
            characteristic_direction(&sys, &Point::new(1.0, 0.0, 0.0), &cfg()),
            Err(CharfieldError::Tangency { .. })
        ));
        assert!(matches!(
            integrate_characteristic(&sys, &Point::new(1.0, 0.0, 0.0), 1.0, 0.01, &cfg()),
            Err(CharfieldError::Tangency { .. })
        ));
        // away from γ the line field of this frame is ∂2
        let d = characteristic_direction(&sys, &Point::new(0.3, 0.7, 0.0), &cfg()).unwrap();
        assert!((d - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn direction_requires_a_locus_point() {
        assert!(matches!(
            characteristic_direction(&model("0", "0"), &Point::new(0.5, 0.0, 0.0), &cfg()),
            Err(CharfieldError::Locus(LocusError::NotOnLocus { .. }))
        ));
    }

    #[test]
    fn parabola_for_q_equal_x2() {
        let sys = model("0", "x2");
        let traj = integrate_characteristic(&sys, &Point::zeros(), 1.6, 1e-3, &cfg()).unwrap();
        assert_eq!(traj.stopped, None);
        for x in &traj.states {
            assert!((x[2] - 0.5 * x[1] * x[1]).abs() < 1e-8);
            assert_eq!(x[0], 0.0);
        }
        // the sample closest to x2 = 1 lies on (0, 1, 0.5) up to its offset along the curve
        let k = (0..traj.len())
            .min_by(|&a, &b| (traj.states[a][1] - 1.0).abs().total_cmp(&(traj.states[b][1] - 1.0).abs()))
            .unwrap();
        let x = traj.states[k];
        let s = x[1] - 1.0;
        assert!(s.abs() < 1e-3);
        assert!((x - Point::new(0.0, 1.0 + s, 0.5 * (1.0 + s) * (1.0 + s))).norm() < 1e-8);
    }

    #[test]
    fn frozen_x3_for_q_zero() {
        let traj = integrate_characteristic(&model("0", "0"), &Point::new(0.0, 0.0, 0.3), 1.0, 0.01, &cfg())
            .unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            assert!((x - Point::new(0.0, *t, 0.3)).norm() < 1e-12);
        }
    }

    #[test]
    fn exponential_for_q_equal_x3() {
        let sys = model("0", "x3");
        let traj = integrate_characteristic(&sys, &Point::new(0.0, 0.0, 1.0), 1.2, 1e-3, &cfg()).unwrap();
        for x in &traj.states {
            assert!((x[2] - x[1].exp()).abs() < 1e-8);
        }
        assert!(traj.states.last().unwrap()[1] > 0.5);
    }

    #[test]
    fn stops_at_the_chart_boundary() {
        let traj = integrate_characteristic(&model("0", "0"), &Point::new(0.0, 1.5, 0.0), 2.0, 0.01, &cfg())
            .unwrap();
        assert_eq!(traj.stopped, Some(StopReason::ChartBoundary));
        assert!(traj.end()[1] <= 2.0 && traj.end()[1] > 1.98);
    }

    #[test]
    fn rejects_bad_steps() {
        assert_eq!(
            integrate_characteristic(&model("0", "0"), &Point::zeros(), 1.0, 0.0, &cfg()),
            Err(CharfieldError::InvalidStep)
        );
    }

    #[test]
    fn trajectories_stay_on_curved_locus_and_follow_the_field() {
        let comps = [
            ["1 + 0.1*x3", "0.2*x2", "sin(x2)"],
            ["0.1*x1", "1", "x3*x2"],
            ["0", "0.3*x3", "x1 - 0.2*x2^2 + 0.1*x3"],
        ];
        let sys = VectorFieldSystem::general(comps.map(|c| c.map(f)), ChartBox::cube(-2.0, 2.0).unwrap())
            .unwrap();
        let x0 = crate::locus::project_to_locus(&sys, &Point::new(0.0, 0.1, 0.2), &LocusConfig::default())
            .unwrap();
        let traj = integrate_characteristic(&sys, &x0, 1.0, 1e-3, &cfg()).unwrap();
        assert!(traj.len() > 100);
        assert!(traj.max_dependence(&sys).unwrap() < 1e-8);
        for k in 1..traj.len() - 1 {
            let fd = (traj.states[k + 1] - traj.states[k - 1]) / (traj.times[k + 1] - traj.times[k - 1]);
            let d = traj.velocities[k];
            let angle = (fd.normalize().dot(&d)).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-3, "angle {angle} at {k}");
            assert!(traj.velocities[k].dot(&traj.velocities[k - 1]) > 0.0);
        }
    }

    #[test]
    fn random_model_trajectories_are_dependent_and_oriented() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let p = random_field(&mut rng, 3, &[Var::X2, Var::X3]);
            let q = random_field(&mut rng, 3, &[Var::X2, Var::X3]);
            let sys = VectorFieldSystem::model(p, q, ChartBox::cube(-2.0, 2.0).unwrap()).unwrap();
            let x0 = Point::new(0.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let traj = integrate_characteristic(&sys, &x0, 1.0, 1e-2, &cfg()).unwrap();
            assert!(traj.max_dependence(&sys).unwrap() < 1e-8);
            assert!(traj.velocities.windows(2).all(|w| w[0].dot(&w[1]) > 0.0));
        }
    }

    #[test]
    fn family_from_a_transverse_segment_is_disjoint() {
        let sys = model("0", "x2 + x3");
        let seeds = transverse_segment(&sys, &Point::zeros(), 0.5, 10, &cfg()).unwrap();
        let family = integrate_family(&sys, &seeds, 0.8, 1e-2, &cfg());
        let ends: Vec<Point> = family.iter().map(|t| *t.as_ref().unwrap().end()).collect();
        for i in 0..ends.len() {
            for j in i + 1..ends.len() {
                assert!((ends[i] - ends[j]).norm() > 1e-3);
            }
        }
    }

    #[test]
    fn csv_export() {
        let traj = integrate_characteristic(&model("0", "0"), &Point::zeros(), 0.02, 0.01, &cfg()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,x1,x2,x3"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(
            text.lines().nth(2).unwrap(),
            "1.0000000000000000e-2,0.0000000000000000e0,1.0000000000000000e-2,0.0000000000000000e0"
        );
    }
}
