//! The endpoint mapping on piecewise-constant controls and its rank.
//!
//! A control is a list of `N` values `u_k ∈ Ω` on equal subintervals of
//! `[a, b]`. The endpoint mapping sends it to `x(b)` for a fixed `x(a)`; its
//! Jacobian is a `3 × 3N` matrix whose column `3k + i` is the sensitivity of
//! `x(b)` to component `i` of `u_k`. A control is singular when that matrix
//! is rank deficient, which is decided on the ratio `σ3/σ1` of its singular
//! values.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::charfield::Trajectory;
use crate::expr::EvalError;
use crate::interp::lagrange_cubic;
use crate::system::{SystemError, VectorFieldSystem};
use crate::Point;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EndpointError {
    #[error("trajectory left the chart at t = {t}")]
    ChartExit { t: f64 },
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("at least 20 integration steps per control interval are required, got {0}")]
    TooFewSteps(usize),
    #[error("Jacobian has non-finite entries")]
    NonFinite,
    #[error(transparent)]
    System(#[from] SystemError),
}

impl From<EvalError> for EndpointError {
    fn from(e: EvalError) -> Self {
        EndpointError::System(e.into())
    }
}

/// Open box `Ω` of admissible control values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds {
            lo: [-10.0; 3],
            hi: [10.0; 3],
        }
    }
}

impl ControlBounds {
    pub fn contains(&self, u: &Vector3<f64>) -> bool {
        (0..3).all(|i| u[i] > self.lo[i] && u[i] < self.hi[i])
    }
}

/// A piecewise-constant control on `N` equal subintervals of `[start, end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    start: f64,
    end: f64,
    values: Vec<Vector3<f64>>,
    bounds: ControlBounds,
}

impl ControlSignal {
    pub fn new(
        start: f64,
        end: f64,
        values: Vec<Vector3<f64>>,
        bounds: ControlBounds,
    ) -> Result<Self, EndpointError> {
        if values.is_empty() {
            return Err(EndpointError::InvalidControl("need at least one interval".into()));
        }
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(EndpointError::InvalidControl(format!("empty time interval [{start}, {end}]")));
        }
        if let Some(k) = values.iter().position(|u| !bounds.contains(u)) {
            return Err(EndpointError::InvalidControl(format!(
                "value on interval {k} ({}, {}, {}) is outside Ω",
                values[k][0], values[k][1], values[k][2]
            )));
        }
        Ok(ControlSignal {
            start,
            end,
            values,
            bounds,
        })
    }

    /// A constant control on a single interval.
    pub fn constant(start: f64, end: f64, u: Vector3<f64>, n: usize) -> Result<Self, EndpointError> {
        Self::new(start, end, vec![u; n], ControlBounds::default())
    }

    /// Resamples a control given at `times` onto `n` equal intervals by
    /// evaluating it at interval midpoints (cubic interpolation in between
    /// samples).
    pub fn from_samples_midpoint(
        times: &[f64],
        samples: &[Vector3<f64>],
        n: usize,
        bounds: ControlBounds,
    ) -> Result<Self, EndpointError> {
        if times.len() != samples.len() || times.len() < 2 || n == 0 {
            return Err(EndpointError::InvalidControl("cannot resample".into()));
        }
        let (start, end) = (times[0], times[times.len() - 1]);
        let h = (end - start) / n as f64;
        let values = (0..n)
            .map(|k| lagrange_cubic(times, samples, start + (k as f64 + 0.5) * h))
            .collect();
        Self::new(start, end, values, bounds)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Vector3<f64>] {
        &self.values
    }

    pub fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn interval_length(&self) -> f64 {
        (self.end - self.start) / self.values.len() as f64
    }

    pub fn interval(&self, k: usize) -> (f64, f64) {
        let h = self.interval_length();
        (self.start + k as f64 * h, self.start + (k + 1) as f64 * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointConfig {
    pub steps_per_interval: usize,
    /// Central-difference step on control values.
    pub fd_step: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            steps_per_interval: 20,
            fd_step: 1e-6,
        }
    }
}

impl EndpointConfig {
    fn validate(&self) -> Result<(), EndpointError> {
        if self.steps_per_interval < 20 {
            Err(EndpointError::TooFewSteps(self.steps_per_interval))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMethod {
    Variational,
    FiniteDifference,
}

impl std::fmt::Display for JacobianMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JacobianMethod::Variational => "variational",
            JacobianMethod::FiniteDifference => "finite-difference",
        })
    }
}

pub(crate) fn rk4<S, F>(y: &S, h: f64, f: F) -> Result<S, EndpointError>
where
    S: Copy + std::ops::Add<Output = S> + std::ops::Mul<f64, Output = S>,
    F: Fn(&S) -> Result<S, EndpointError>,
{
    let k1 = f(y)?;
    let k2 = f(&(*y + k1 * (0.5 * h)))?;
    let k3 = f(&(*y + k2 * (0.5 * h)))?;
    let k4 = f(&(*y + k3 * h))?;
    Ok(*y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// Integrates `x' = Σ u_i X_i(x)` from `x0`, restarting at every interval
/// boundary. `visit` sees every accepted state.
fn flow(
    sys: &VectorFieldSystem,
    x0: &Point,
    start: f64,
    h_interval: f64,
    values: &[Vector3<f64>],
    steps: usize,
    mut visit: impl FnMut(f64, &Point, &Vector3<f64>),
) -> Result<Point, EndpointError> {
    let chart = sys.chart();
    if !chart.contains(x0) {
        return Err(SystemError::OutOfChart { point: (*x0).into() }.into());
    }
    let h = h_interval / steps as f64;
    let mut x = *x0;
    visit(start, &x, &values[0]);
    for (k, u) in values.iter().enumerate() {
        let t0 = start + k as f64 * h_interval;
        for s in 0..steps {
            x = rk4(&x, h, |y| {
                if !chart.contains(y) {
                    return Err(EndpointError::ChartExit { t: t0 + s as f64 * h });
                }
                Ok(sys.velocity(y, u)?)
            })?;
            let t = t0 + (s + 1) as f64 * h;
            if !chart.contains(&x) {
                return Err(EndpointError::ChartExit { t });
            }
            let next_u = if s + 1 == steps {
                values.get(k + 1).unwrap_or(u)
            } else {
                u
            };
            visit(t, &x, next_u);
        }
    }
    Ok(x)
}

/// The trajectory driven by `control` from `x0`, sampled at every integration
/// step. Velocities at interval boundaries use the following interval's value.
pub fn integrate_trajectory(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    cfg: &EndpointConfig,
) -> Result<Trajectory, EndpointError> {
    cfg.validate()?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    let mut eval_err = None;
    flow(
        sys,
        x0,
        control.start,
        control.interval_length(),
        &control.values,
        cfg.steps_per_interval,
        |t, x, u| {
            times.push(t);
            states.push(*x);
            match sys.velocity(x, u) {
                Ok(v) => velocities.push(v),
                Err(e) => {
                    eval_err.get_or_insert(e);
                    velocities.push(Vector3::from_element(f64::NAN));
                }
            }
        },
    )?;
    if let Some(e) = eval_err {
        return Err(e.into());
    }
    Trajectory::new(times, states, velocities)
        .map_err(|e| EndpointError::InvalidControl(e.to_string()))
}

pub fn endpoint_map(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    cfg: &EndpointConfig,
) -> Result<Point, EndpointError> {
    cfg.validate()?;
    endpoint_of(sys, x0, control, &control.values, cfg)
}

fn endpoint_of(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    values: &[Vector3<f64>],
    cfg: &EndpointConfig,
) -> Result<Point, EndpointError> {
    flow(
        sys,
        x0,
        control.start,
        control.interval_length(),
        values,
        cfg.steps_per_interval,
        |_, _, _| {},
    )
}

/// State, interval transition matrix and control sensitivities integrated together.
#[derive(Debug, Clone, Copy)]
struct Augmented {
    x: Vector3<f64>,
    transition: Matrix3<f64>,
    sensitivity: Matrix3<f64>,
}

impl std::ops::Add for Augmented {
    type Output = Augmented;
    fn add(self, o: Augmented) -> Augmented {
        Augmented {
            x: self.x + o.x,
            transition: self.transition + o.transition,
            sensitivity: self.sensitivity + o.sensitivity,
        }
    }
}

impl std::ops::Mul<f64> for Augmented {
    type Output = Augmented;
    fn mul(self, s: f64) -> Augmented {
        Augmented {
            x: self.x * s,
            transition: self.transition * s,
            sensitivity: self.sensitivity * s,
        }
    }
}

/// Integrates one interval of constant control `u` from `x`, returning the
/// end state, the interval's transition matrix and its sensitivity block.
fn interval_variation(
    sys: &VectorFieldSystem,
    x: &Point,
    u: &Vector3<f64>,
    t0: f64,
    h: f64,
    steps: usize,
) -> Result<Augmented, EndpointError> {
    let chart = sys.chart();
    let mut y = Augmented {
        x: *x,
        transition: Matrix3::identity(),
        sensitivity: Matrix3::zeros(),
    };
    for s in 0..steps {
        y = rk4(&y, h, |z| {
            if !chart.contains(&z.x) {
                return Err(EndpointError::ChartExit { t: t0 + s as f64 * h });
            }
            let frame = sys.frame_unchecked(&z.x)?;
            let jac = sys.jacobians_unchecked(&z.x)?;
            let a = jac[0] * u[0] + jac[1] * u[1] + jac[2] * u[2];
            Ok(Augmented {
                x: frame * u,
                transition: a * z.transition,
                sensitivity: a * z.sensitivity + frame,
            })
        })?;
        if !chart.contains(&y.x) {
            return Err(EndpointError::ChartExit { t: t0 + (s + 1) as f64 * h });
        }
    }
    Ok(y)
}

fn variational_jacobian(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    cfg: &EndpointConfig,
) -> Result<DMatrix<f64>, EndpointError> {
    if !sys.chart().contains(x0) {
        return Err(SystemError::OutOfChart { point: (*x0).into() }.into());
    }
    let n = control.len();
    let h = control.interval_length() / cfg.steps_per_interval as f64;
    let mut x = *x0;
    let mut transitions = Vec::with_capacity(n);
    let mut sensitivities = Vec::with_capacity(n);
    for (k, u) in control.values.iter().enumerate() {
        let y = interval_variation(sys, &x, u, control.interval(k).0, h, cfg.steps_per_interval)?;
        x = y.x;
        transitions.push(y.transition);
        sensitivities.push(y.sensitivity);
    }
    let mut jac = DMatrix::zeros(3, 3 * n);
    let mut propagate = Matrix3::<f64>::identity();
    for k in (0..n).rev() {
        let block = propagate * sensitivities[k];
        jac.view_mut((0, 3 * k), (3, 3)).copy_from(&block);
        propagate *= transitions[k];
    }
    Ok(jac)
}

fn finite_difference_jacobian(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    cfg: &EndpointConfig,
) -> Result<DMatrix<f64>, EndpointError> {
    let n = control.len();
    let h = cfg.fd_step;
    let columns: Vec<Vector3<f64>> = (0..3 * n)
        .into_par_iter()
        .map(|col| {
            let (k, i) = (col / 3, col % 3);
            let mut values = control.values.clone();
            values[k][i] = control.values[k][i] + h;
            let plus = endpoint_of(sys, x0, control, &values, cfg)?;
            values[k][i] = control.values[k][i] - h;
            let minus = endpoint_of(sys, x0, control, &values, cfg)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect::<Result<_, EndpointError>>()?;
    Ok(DMatrix::from_fn(3, 3 * n, |r, c| columns[c][r]))
}

/// The `3 × 3N` Jacobian of the endpoint mapping at `control`.
pub fn endpoint_jacobian(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    method: JacobianMethod,
    cfg: &EndpointConfig,
) -> Result<DMatrix<f64>, EndpointError> {
    cfg.validate()?;
    match method {
        JacobianMethod::Variational => variational_jacobian(sys, x0, control, cfg),
        JacobianMethod::FiniteDifference => finite_difference_jacobian(sys, x0, control, cfg),
    }
}

/// Default threshold on `σ3/σ1`.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingularityVerdict {
    #[serde(rename = "sigma")]
    pub singular_values: [f64; 3],
    pub ratio: f64,
    pub singular: bool,
    #[serde(rename = "tol")]
    pub tolerance: f64,
    pub method: JacobianMethod,
    #[serde(rename = "N")]
    pub intervals: usize,
}

impl SingularityVerdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

/// Rank decision on an endpoint Jacobian: singular iff `σ3/σ1 < tol`. The zero
/// matrix is singular with ratio 0.
pub fn singularity_verdict(
    jacobian: &DMatrix<f64>,
    tol: f64,
    method: JacobianMethod,
) -> Result<SingularityVerdict, EndpointError> {
    if jacobian.iter().any(|v| !v.is_finite()) {
        return Err(EndpointError::NonFinite);
    }
    let mut sv: Vec<f64> = jacobian.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.resize(3, 0.0);
    let singular_values = [sv[0], sv[1], sv[2]];
    let ratio = if sv[0] == 0.0 { 0.0 } else { sv[2] / sv[0] };
    Ok(SingularityVerdict {
        singular_values,
        ratio,
        singular: ratio < tol,
        tolerance: tol,
        method,
        intervals: jacobian.ncols() / 3,
    })
}

/// Jacobian and verdict in one call.
pub fn certify(
    sys: &VectorFieldSystem,
    x0: &Point,
    control: &ControlSignal,
    method: JacobianMethod,
    tol: f64,
    cfg: &EndpointConfig,
) -> Result<SingularityVerdict, EndpointError> {
    let jac = endpoint_jacobian(sys, x0, control, method, cfg)?;
    singularity_verdict(&jac, tol, method)
}
