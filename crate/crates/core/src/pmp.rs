//! Pontryagin lifts of dependent trajectories.
//!
//! For the normal-form frame `X1 = ∂1 + P∂3`, `X2 = ∂2 + Q∂3`, `X3 = x1∂3`
//! the Hamiltonian is `H = u1(p1 + P p3) + u2(p2 + Q p3) + u3 x1 p3`, and a
//! singular extremal must keep all three brackets at zero. Off Σ this forces
//! `p = 0`; on Σ it reduces to
//!
//! ```text
//! x1 = 0,  u1 = 0,  x2' = u2,  x3' = u2 Q,
//! p3(t) = a exp ∫ -x2'(t) Q_x3(x2(t), x3(t)) dt,   a ≠ 0,
//! p2 = -Q p3,  p1 = -P p3,  u3 = -p1'/p3.
//! ```
//!
//! Differentiating `p1 = -P p3` along the curve gives the closed form
//! `u3 = u2 (P_x2 + P_x3 Q - P Q_x3)` used here.

use std::io::{self, Write};

use nalgebra::{SVector, Vector3};
use thiserror::Error;

use crate::charfield::Trajectory;
use crate::endpoint::{rk4, ControlBounds, ControlSignal, EndpointConfig, EndpointError};
use crate::export::csv_row;
use crate::expr::{ScalarField, Var};
use crate::interp::{cumulative_trapezoid, lagrange_cubic};
use crate::system::{SystemError, SystemForm, VectorFieldSystem};

/// `|Δ|` above which a sample counts as off the locus.
pub const ON_LOCUS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PmpError {
    #[error("closed-form lifts need a normal-form system")]
    Unsupported,
    #[error("the adjoint scale must be nonzero and finite")]
    ZeroScale,
    #[error("sample {index} is off the locus (|Δ| = {residual:e}); the adjoint would vanish there")]
    OffLocus { index: usize, residual: f64 },
    #[error("control has {control} samples but the trajectory has {trajectory}")]
    GridMismatch { control: usize, trajectory: usize },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
}

impl From<crate::expr::EvalError> for PmpError {
    fn from(e: crate::expr::EvalError) -> Self {
        PmpError::System(e.into())
    }
}

/// A trajectory together with an adjoint path and a control.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalLift {
    pub trajectory: Trajectory,
    pub adjoint: Vec<Vector3<f64>>,
    pub control: Vec<Vector3<f64>>,
    pub scale: f64,
    /// `⟨p, X_i(x)⟩` per sample.
    pub residuals: Vec<[f64; 3]>,
}

impl ExtremalLift {
    /// CSV with header `t,x1,x2,x3,p1,p2,p3,u1,u2,u3,res1,res2,res3`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,x1,x2,x3,p1,p2,p3,u1,u2,u3,res1,res2,res3")?;
        let tr = &self.trajectory;
        for k in 0..tr.len() {
            let (x, p, u, r) = (&tr.states[k], &self.adjoint[k], &self.control[k], &self.residuals[k]);
            let row = [
                tr.times[k], x[0], x[1], x[2], p[0], p[1], p[2], u[0], u[1], u[2], r[0], r[1], r[2],
            ];
            writeln!(out, "{}", csv_row(&row))?;
        }
        Ok(())
    }
}

struct ModelParts {
    p: ScalarField,
    q: ScalarField,
    p_x2: ScalarField,
    p_x3: ScalarField,
    q_x3: ScalarField,
}

fn model_parts(sys: &VectorFieldSystem) -> Result<ModelParts, PmpError> {
    let SystemForm::Model { p, q } = sys.form() else {
        return Err(PmpError::Unsupported);
    };
    Ok(ModelParts {
        p_x2: p.differentiate(Var::X2),
        p_x3: p.differentiate(Var::X3),
        q_x3: q.differentiate(Var::X3),
        p: p.clone(),
        q: q.clone(),
    })
}

fn check_scale(a: f64) -> Result<(), PmpError> {
    if a == 0.0 || !a.is_finite() {
        Err(PmpError::ZeroScale)
    } else {
        Ok(())
    }
}

fn p3_path(q_x3: &ScalarField, traj: &Trajectory, a: f64) -> Result<Vec<f64>, PmpError> {
    let integrand = traj
        .states
        .iter()
        .zip(&traj.velocities)
        .map(|(x, v)| Ok(-v[1] * q_x3.eval(&[x[0], x[1], x[2]])?))
        .collect::<Result<Vec<f64>, PmpError>>()?;
    Ok(cumulative_trapezoid(&traj.times, &integrand)
        .into_iter()
        .map(|i| a * i.exp())
        .collect())
}

/// `p3(t_k) = a·exp(∫_{t_0}^{t_k} -x2'(t) Q_x3(x2, x3) dt)` with a cumulative
/// trapezoidal integral. `x2'` is read from the trajectory's velocity samples.
pub fn closed_form_p3(sys: &VectorFieldSystem, traj: &Trajectory, a: f64) -> Result<Vec<f64>, PmpError> {
    let parts = model_parts(sys)?;
    check_scale(a)?;
    p3_path(&parts.q_x3, traj, a)
}

fn brackets(sys: &VectorFieldSystem, x: &crate::Point, p: &Vector3<f64>) -> Result<[f64; 3], PmpError> {
    let frame = sys.frame_unchecked(x)?;
    Ok(std::array::from_fn(|i| p.dot(&frame.column(i))))
}

/// Lifts a dependent trajectory of a normal-form system to a singular extremal.
pub fn lift_to_extremal(sys: &VectorFieldSystem, traj: &Trajectory, a: f64) -> Result<ExtremalLift, PmpError> {
    let parts = model_parts(sys)?;
    check_scale(a)?;
    for (index, x) in traj.states.iter().enumerate() {
        let residual = sys.dependence_at(x)?.abs();
        if residual > ON_LOCUS_TOL {
            return Err(PmpError::OffLocus { index, residual });
        }
    }
    let p3 = p3_path(&parts.q_x3, traj, a)?;
    let mut adjoint = Vec::with_capacity(traj.len());
    let mut control = Vec::with_capacity(traj.len());
    let mut residuals = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let x = &traj.states[k];
        let at = [x[0], x[1], x[2]];
        let (pv, qv) = (parts.p.eval(&at)?, parts.q.eval(&at)?);
        let u2 = traj.velocities[k][1];
        let u3 = u2 * (parts.p_x2.eval(&at)? + parts.p_x3.eval(&at)? * qv - pv * parts.q_x3.eval(&at)?);
        let p = Vector3::new(-pv * p3[k], -qv * p3[k], p3[k]);
        residuals.push(brackets(sys, x, &p)?);
        adjoint.push(p);
        control.push(Vector3::new(0.0, u2, u3));
    }
    Ok(ExtremalLift {
        trajectory: traj.clone(),
        adjoint,
        control,
        scale: a,
        residuals,
    })
}

/// Maximum and root-mean-square of `|⟨p, X_i(x)⟩|` over the samples, and the
/// largest `|H|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub max: [f64; 3],
    pub rms: [f64; 3],
    pub max_hamiltonian: f64,
}

impl ResidualStats {
    pub fn max_overall(&self) -> f64 {
        self.max.iter().copied().fold(0.0, f64::max)
    }
}

/// Recomputes the constraint brackets of `lift` from the full frame.
pub fn constraint_residuals(sys: &VectorFieldSystem, lift: &ExtremalLift) -> Result<ResidualStats, PmpError> {
    let mut max = [0.0_f64; 3];
    let mut sum_sq = [0.0_f64; 3];
    let mut max_hamiltonian = 0.0_f64;
    let states = &lift.trajectory.states;
    for k in 0..states.len() {
        let r = brackets(sys, &states[k], &lift.adjoint[k])?;
        let u = &lift.control[k];
        for i in 0..3 {
            max[i] = max[i].max(r[i].abs());
            sum_sq[i] += r[i] * r[i];
        }
        max_hamiltonian = max_hamiltonian.max((u[0] * r[0] + u[1] * r[1] + u[2] * r[2]).abs());
    }
    let n = states.len().max(1) as f64;
    Ok(ResidualStats {
        max,
        rms: sum_sq.map(|s| (s / n).sqrt()),
        max_hamiltonian,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub values: Vec<Vector3<f64>>,
    /// The initial covector was zero, so the whole path is; not a valid lift.
    pub degenerate: bool,
}

/// Integrates `p' = -Σ u_i (DX_i)ᵀ p` along a sampled trajectory with classical
/// Runge-Kutta on the trajectory grid. States and controls at half steps come
/// from cubic interpolation of the samples.
pub fn integrate_adjoint_general(
    sys: &VectorFieldSystem,
    traj: &Trajectory,
    control: &[Vector3<f64>],
    p0: Vector3<f64>,
) -> Result<AdjointPath, PmpError> {
    if control.len() != traj.len() {
        return Err(PmpError::GridMismatch {
            control: control.len(),
            trajectory: traj.len(),
        });
    }
    let rhs = |x: &crate::Point, u: &Vector3<f64>, p: &Vector3<f64>| -> Result<Vector3<f64>, PmpError> {
        let jac = sys.jacobians_unchecked(x)?;
        let a = jac[0] * u[0] + jac[1] * u[1] + jac[2] * u[2];
        Ok(-(a.transpose() * p))
    };
    let mut values = Vec::with_capacity(traj.len());
    let mut p = p0;
    values.push(p);
    for k in 0..traj.len() - 1 {
        let (t0, t1) = (traj.times[k], traj.times[k + 1]);
        let h = t1 - t0;
        let tm = t0 + 0.5 * h;
        let xm = lagrange_cubic(&traj.times, &traj.states, tm);
        let um = lagrange_cubic(&traj.times, control, tm);
        let k1 = rhs(&traj.states[k], &control[k], &p)?;
        let k2 = rhs(&xm, &um, &(p + k1 * (0.5 * h)))?;
        let k3 = rhs(&xm, &um, &(p + k2 * (0.5 * h)))?;
        let k4 = rhs(&traj.states[k + 1], &control[k + 1], &(p + k3 * h))?;
        p += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        values.push(p);
    }
    Ok(AdjointPath {
        values,
        degenerate: p0 == Vector3::zeros(),
    })
}

/// Discretizes a lift onto `n` equal intervals so that the piecewise-constant
/// control is itself singular for the endpoint mapping.
///
/// `u1 = 0` and `u2` is taken at interval midpoints. Along `x1 ≡ 0` the state
/// does not depend on `u3`, which only enters the adjoint through
/// `p1' = -u3 p3`; each `u3_k` is then solved backward from `b` so that
/// `∫_{I_k} (p1 + P p3) dt = 0`. The bracket with `X2` integrates to zero
/// automatically because `p2 + Q p3` is conserved. Plain midpoint sampling of
/// `u3` leaves an `O(1/N²)` rank defect.
pub fn discretize_lift(
    sys: &VectorFieldSystem,
    lift: &ExtremalLift,
    n: usize,
    bounds: ControlBounds,
    cfg: &EndpointConfig,
) -> Result<ControlSignal, PmpError> {
    let parts = model_parts(sys)?;
    let traj = &lift.trajectory;
    if n == 0 || traj.len() < 2 {
        return Err(EndpointError::InvalidControl("cannot discretize".into()).into());
    }
    if cfg.steps_per_interval < 20 {
        return Err(EndpointError::TooFewSteps(cfg.steps_per_interval).into());
    }
    let (start, end) = (traj.times[0], traj.times[traj.len() - 1]);
    let width = (end - start) / n as f64;
    let h = width / cfg.steps_per_interval as f64;
    let u2: Vec<f64> = (0..n)
        .map(|k| lagrange_cubic(&traj.times, &lift.control, start + (k as f64 + 0.5) * width)[1])
        .collect();
    let chart = sys.chart();

    // y = (x2, x3, p3, ∫p3, ∫P p3, ∫(s - t_k) p3, s - t_k)
    let x0 = traj.start();
    let mut x = (x0[1], x0[2]);
    let mut p3 = lift.adjoint[0][2];
    let mut quad = Vec::with_capacity(n);
    for (k, &c) in u2.iter().enumerate() {
        let mut y = SVector::<f64, 7>::from([x.0, x.1, p3, 0.0, 0.0, 0.0, 0.0]);
        for s in 0..cfg.steps_per_interval {
            y = rk4(&y, h, |z| {
                let at = [0.0, z[0], z[1]];
                if !chart.contains(&at.into()) {
                    return Err(EndpointError::ChartExit {
                        t: start + k as f64 * width + s as f64 * h,
                    });
                }
                let ev = |f: &ScalarField| f.eval(&at).map_err(EndpointError::from);
                Ok(SVector::<f64, 7>::from([
                    c,
                    c * ev(&parts.q)?,
                    -c * ev(&parts.q_x3)? * z[2],
                    z[2],
                    ev(&parts.p)? * z[2],
                    z[6] * z[2],
                    1.0,
                ]))
            })?;
        }
        x = (y[0], y[1]);
        p3 = y[2];
        quad.push((y[3], y[4], y[5]));
    }
    let mut p1 = -parts.p.eval(&[0.0, x.0, x.1])? * p3;
    let mut values = vec![Vector3::zeros(); n];
    for k in (0..n).rev() {
        let (i0, i1, i2) = quad[k];
        let u3 = -(width * p1 + i1) / i2;
        p1 += u3 * i0;
        values[k] = Vector3::new(0.0, u2[k], u3);
    }
    Ok(ControlSignal::new(start, end, values, bounds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charfield::{integrate_characteristic, CharfieldConfig};
    use crate::expr::parse_expr;
    use crate::system::ChartBox;
    use crate::Point;

    fn f(s: &str) -> ScalarField {
        parse_expr(s).unwrap()
    }

    fn model(p: &str, q: &str) -> VectorFieldSystem {
        VectorFieldSystem::model(f(p), f(q), ChartBox::cube(-3.0, 3.0).unwrap()).unwrap()
    }

    /// x2 = t, x3 = c·e^t, the characteristic of Q = x3 parametrized by x2.
    fn exponential_curve(c: f64, samples: usize) -> Trajectory {
        Trajectory::from_fn(0.0, 1.0, samples, |t| {
            (Point::new(0.0, t, c * t.exp()), Vector3::new(0.0, 1.0, c * t.exp()))
        })
        .unwrap()
    }

    #[test]
    fn p3_is_constant_when_q_ignores_x3() {
        let sys = model("0", "x2");
        let traj = integrate_characteristic(&sys, &Point::zeros(), 1.0, 0.01, &CharfieldConfig::default()).unwrap();
        let p3 = closed_form_p3(&sys, &traj, 2.0).unwrap();
        assert!(p3.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn p3_decays_like_exp_minus_t() {
        let sys = model("0", "x3");
        let traj = exponential_curve(0.5, 1001);
        let p3 = closed_form_p3(&sys, &traj, 1.0).unwrap();
        for (t, v) in traj.times.iter().zip(&p3) {
            assert!((v - (-t).exp()).abs() / (-t).exp() < 1e-8);
        }
        assert!((p3[1000] - (-1.0_f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rejects_zero_scale_and_general_systems() {
        let sys = model("0", "x3");
        let traj = exponential_curve(0.5, 11);
        assert_eq!(closed_form_p3(&sys, &traj, 0.0), Err(PmpError::ZeroScale));
        assert_eq!(lift_to_extremal(&sys, &traj, 0.0), Err(PmpError::ZeroScale));
        let comps = sys.components().clone();
        let general = VectorFieldSystem::general(comps, *sys.chart()).unwrap();
        assert_eq!(closed_form_p3(&general, &traj, 1.0), Err(PmpError::Unsupported));
    }

    #[test]
    fn trivial_lift_for_flat_frame() {
        let sys = model("0", "0");
        let traj = Trajectory::from_fn(0.0, 1.0, 11, |t| (Point::new(0.0, t, 0.7), Vector3::new(0.0, 1.0, 0.0)))
            .unwrap();
        let lift = lift_to_extremal(&sys, &traj, 1.0).unwrap();
        for (p, u) in lift.adjoint.iter().zip(&lift.control) {
            assert_eq!(*p, Vector3::new(-0.0, -0.0, 1.0));
            assert_eq!(*u, Vector3::new(0.0, 1.0, 0.0));
        }
    }

    #[test]
    fn p2_is_conserved_along_exponential_curve() {
        let sys = model("0", "x3");
        let traj = exponential_curve(0.8, 1001);
        let lift = lift_to_extremal(&sys, &traj, 1.0).unwrap();
        for p in &lift.adjoint {
            assert!((p[1] + 0.8).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_trajectories_off_the_locus() {
        let sys = model("0", "0");
        let traj = Trajectory::from_fn(0.0, 1.0, 5, |t| (Point::new(0.1, t, 0.0), Vector3::new(0.0, 1.0, 0.0)))
            .unwrap();
        assert!(matches!(
            lift_to_extremal(&sys, &traj, 1.0),
            Err(PmpError::OffLocus { index: 0, .. })
        ));
    }

    #[test]
    fn residual_statistics() {
        let sys = model("sin(x2)", "x2*x3");
        let traj = integrate_characteristic(&sys, &Point::new(0.0, 0.1, 0.2), 1.0, 1e-3, &CharfieldConfig::default())
            .unwrap();
        let lift = lift_to_extremal(&sys, &traj, 1.5).unwrap();
        let stats = constraint_residuals(&sys, &lift).unwrap();
        assert!(stats.max_overall() < 1e-8);
        assert!(stats.max_hamiltonian < 1e-8);

        let mut doubled = lift.clone();
        doubled.adjoint.iter_mut().for_each(|p| *p *= 2.0);
        let stats2 = constraint_residuals(&sys, &doubled).unwrap();
        for i in 0..3 {
            assert_eq!(stats2.max[i], 2.0 * stats.max[i]);
        }

        let flat = model("0", "0");
        let traj = Trajectory::from_fn(0.0, 1.0, 5, |t| (Point::new(0.0, t, 0.0), Vector3::new(0.0, 1.0, 0.0)))
            .unwrap();
        let mut lift = lift_to_extremal(&flat, &traj, 1.0).unwrap();
        lift.adjoint.iter_mut().for_each(|p| *p = Vector3::new(1.0, 0.0, 0.0));
        let stats = constraint_residuals(&flat, &lift).unwrap();
        assert_eq!(stats.max[0], 1.0);
        assert_eq!(stats.rms[0], 1.0);
    }

    #[test]
    fn general_adjoint_matches_closed_form() {
        let sys = model("0", "x3");
        let traj = exponential_curve(0.5, 1001);
        let lift = lift_to_extremal(&sys, &traj, 1.0).unwrap();
        let path = integrate_adjoint_general(&sys, &traj, &lift.control, lift.adjoint[0]).unwrap();
        assert!(!path.degenerate);
        for (a, b) in path.values.iter().zip(&lift.adjoint) {
            assert!((a[2] - b[2]).abs() / b[2].abs() < 1e-8);
        }
    }

    #[test]
    fn general_adjoint_trivial_cases() {
        let sys = model("x2", "x3");
        let traj = exponential_curve(0.5, 11);
        let zero = vec![Vector3::zeros(); traj.len()];
        let p0 = Vector3::new(0.3, -1.0, 2.0);
        let path = integrate_adjoint_general(&sys, &traj, &zero, p0).unwrap();
        assert!(path.values.iter().all(|p| *p == p0));

        let control = vec![Vector3::new(0.0, 1.0, 0.2); traj.len()];
        let path = integrate_adjoint_general(&sys, &traj, &control, Vector3::zeros()).unwrap();
        assert!(path.degenerate);
        assert!(path.values.iter().all(|p| *p == Vector3::zeros()));

        assert!(matches!(
            integrate_adjoint_general(&sys, &traj, &control[1..], p0),
            Err(PmpError::GridMismatch { .. })
        ));
    }

    #[test]
    fn lift_csv_has_all_columns() {
        let sys = model("0", "x3");
        let lift = lift_to_extremal(&sys, &exponential_curve(0.5, 3), 1.0).unwrap();
        let mut buf = Vec::new();
        lift.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,x1,x2,x3,p1,p2,p3,u1,u2,u3,res1,res2,res3"));
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == 13));
    }
}
