//! Frames of three vector fields on a box chart.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::expr::{EvalError, ScalarField, Var};
use crate::Point;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("model field {name} must not depend on x1")]
    ModelDependsOnX1 { name: &'static str },
    #[error("point ({}, {}, {}) lies outside the chart", .point[0], .point[1], .point[2])]
    OutOfChart { point: [f64; 3] },
    #[error("invalid chart: {0}")]
    InvalidChart(String),
    #[error("component X{field}[{component}] is not finite at ({}, {}, {})", .at[0], .at[1], .at[2])]
    NonFinite {
        field: usize,
        component: usize,
        at: [f64; 3],
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Axis-aligned box `[min, max]` in chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ChartBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, SystemError> {
        for k in 0..3 {
            if !(min[k].is_finite() && max[k].is_finite() && min[k] < max[k]) {
                return Err(SystemError::InvalidChart(format!(
                    "axis {} has bounds [{}, {}]",
                    k + 1,
                    min[k],
                    max[k]
                )));
            }
        }
        Ok(ChartBox { min, max })
    }

    /// The cube `[lo, hi]³`.
    pub fn cube(lo: f64, hi: f64) -> Result<Self, SystemError> {
        Self::new([lo; 3], [hi; 3])
    }

    pub fn contains(&self, x: &Point) -> bool {
        (0..3).all(|k| x[k] >= self.min[k] && x[k] <= self.max[k])
    }

    pub fn center(&self) -> Point {
        Point::from_fn(|k, _| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn intersects_ball(&self, center: &Point, radius: f64) -> bool {
        let dist2: f64 = (0..3)
            .map(|k| {
                let c = center[k].clamp(self.min[k], self.max[k]);
                (c - center[k]).powi(2)
            })
            .sum();
        dist2 < radius * radius
    }
}

/// Whether the frame was built from the normal form `(∂1 + P∂3, ∂2 + Q∂3, x1∂3)`.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemForm {
    Model { p: ScalarField, q: ScalarField },
    General,
}

/// A frame `X = (X1, X2, X3)` of vector fields on a chart.
///
/// `components[i][j]` is the `j`-th coordinate of `X_{i+1}`. Symbolic
/// derivatives of the components and of the frame determinant are computed
/// once at construction.
#[derive(Debug, Clone)]
pub struct VectorFieldSystem {
    components: [[ScalarField; 3]; 3],
    form: SystemForm,
    chart: ChartBox,
    dependence: ScalarField,
    dependence_grad: [ScalarField; 3],
    // partials[i][j][k] = ∂(X_i)_j / ∂x_k
    partials: [[[ScalarField; 3]; 3]; 3],
}

/// The frame evaluated at a point; column `i` is `X_{i+1}(basepoint)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameValue {
    pub matrix: Matrix3<f64>,
    pub basepoint: Point,
}

impl VectorFieldSystem {
    /// Builds the normal-form frame `X1 = ∂1 + P∂3`, `X2 = ∂2 + Q∂3`,
    /// `X3 = x1∂3`, whose dependence locus is `{x1 = 0}`.
    pub fn model(p: ScalarField, q: ScalarField, chart: ChartBox) -> Result<Self, SystemError> {
        if p.depends_on(Var::X1) {
            return Err(SystemError::ModelDependsOnX1 { name: "P" });
        }
        if q.depends_on(Var::X1) {
            return Err(SystemError::ModelDependsOnX1 { name: "Q" });
        }
        let zero = ScalarField::zero;
        let one = ScalarField::one;
        let components = [
            [one(), zero(), p.clone()],
            [zero(), one(), q.clone()],
            [zero(), zero(), ScalarField::var(Var::X1)],
        ];
        Self::assemble(components, SystemForm::Model { p, q }, chart)
    }

    /// Builds a frame from arbitrary components, `components[i][j] = (X_{i+1})_{j+1}`.
    pub fn general(
        components: [[ScalarField; 3]; 3],
        chart: ChartBox,
    ) -> Result<Self, SystemError> {
        Self::assemble(components, SystemForm::General, chart)
    }

    fn assemble(
        components: [[ScalarField; 3]; 3],
        form: SystemForm,
        chart: ChartBox,
    ) -> Result<Self, SystemError> {
        check_finite_on_chart(&components, &chart)?;
        let dependence = determinant(&components);
        let dependence_grad = dependence.gradient();
        let partials = components
            .each_ref()
            .map(|field| field.each_ref().map(|c| c.gradient()));
        Ok(VectorFieldSystem {
            components,
            form,
            chart,
            dependence,
            dependence_grad,
            partials,
        })
    }

    pub fn components(&self) -> &[[ScalarField; 3]; 3] {
        &self.components
    }

    pub fn form(&self) -> &SystemForm {
        &self.form
    }

    pub fn is_model(&self) -> bool {
        matches!(self.form, SystemForm::Model { .. })
    }

    pub fn chart(&self) -> &ChartBox {
        &self.chart
    }

    /// The symbolic frame determinant Δ; the dependence locus is Δ⁻¹(0).
    pub fn dependence_function(&self) -> &ScalarField {
        &self.dependence
    }

    pub fn dependence_gradient(&self) -> &[ScalarField; 3] {
        &self.dependence_grad
    }

    pub fn partials(&self) -> &[[[ScalarField; 3]; 3]; 3] {
        &self.partials
    }

    fn check_chart(&self, x: &Point) -> Result<(), SystemError> {
        if self.chart.contains(x) {
            Ok(())
        } else {
            Err(SystemError::OutOfChart { point: (*x).into() })
        }
    }

    pub fn eval_frame(&self, x: &Point) -> Result<FrameValue, SystemError> {
        self.check_chart(x)?;
        Ok(FrameValue {
            matrix: self.frame_unchecked(x)?,
            basepoint: *x,
        })
    }

    /// Three matrices; entry `(j, k)` of matrix `i` is `∂(X_{i+1})_j/∂x_k`.
    pub fn frame_jacobians(&self, x: &Point) -> Result<[Matrix3<f64>; 3], SystemError> {
        self.check_chart(x)?;
        self.jacobians_unchecked(x)
    }

    /// Frame matrix without the chart check.
    pub fn frame_unchecked(&self, x: &Point) -> Result<Matrix3<f64>, EvalError> {
        let at = [x[0], x[1], x[2]];
        let mut m = Matrix3::zeros();
        for (i, field) in self.components.iter().enumerate() {
            for (j, c) in field.iter().enumerate() {
                m[(j, i)] = c.eval(&at)?;
            }
        }
        Ok(m)
    }

    pub fn jacobians_unchecked(&self, x: &Point) -> Result<[Matrix3<f64>; 3], SystemError> {
        let at = [x[0], x[1], x[2]];
        let mut out = [Matrix3::zeros(); 3];
        for (i, field) in self.partials.iter().enumerate() {
            for (j, grad) in field.iter().enumerate() {
                for (k, d) in grad.iter().enumerate() {
                    out[i][(j, k)] = d.eval(&at)?;
                }
            }
        }
        Ok(out)
    }

    /// `Σ u_i X_i(x)`.
    pub fn velocity(&self, x: &Point, u: &Vector3<f64>) -> Result<Vector3<f64>, EvalError> {
        Ok(self.frame_unchecked(x)? * u)
    }

    pub fn dependence_at(&self, x: &Point) -> Result<f64, EvalError> {
        self.dependence.eval(&[x[0], x[1], x[2]])
    }

    pub fn dependence_gradient_at(&self, x: &Point) -> Result<Vector3<f64>, EvalError> {
        let at = [x[0], x[1], x[2]];
        let g = &self.dependence_grad;
        Ok(Vector3::new(g[0].eval(&at)?, g[1].eval(&at)?, g[2].eval(&at)?))
    }
}

/// Cofactor expansion along the first row of the matrix whose columns are the fields.
fn determinant(c: &[[ScalarField; 3]; 3]) -> ScalarField {
    // m(r, s) = row r, column s = (X_s)_r
    let m = |r: usize, s: usize| &c[s][r];
    let minor = |r0: usize, r1: usize, s0: usize, s1: usize| {
        m(r0, s0).mul(m(r1, s1)).sub(&m(r0, s1).mul(m(r1, s0)))
    };
    let t0 = m(0, 0).mul(&minor(1, 2, 1, 2));
    let t1 = m(0, 1).mul(&minor(1, 2, 0, 2));
    let t2 = m(0, 2).mul(&minor(1, 2, 0, 1));
    t0.sub(&t1).add(&t2)
}

fn check_finite_on_chart(
    components: &[[ScalarField; 3]; 3],
    chart: &ChartBox,
) -> Result<(), SystemError> {
    const SAMPLES: usize = 5;
    for a in 0..SAMPLES {
        for b in 0..SAMPLES {
            for d in 0..SAMPLES {
                let idx = [a, b, d];
                let at: [f64; 3] = std::array::from_fn(|k| {
                    let s = idx[k] as f64 / (SAMPLES - 1) as f64;
                    chart.min[k] + s * (chart.max[k] - chart.min[k])
                });
                for (i, field) in components.iter().enumerate() {
                    for (j, c) in field.iter().enumerate() {
                        match c.eval(&at) {
                            Ok(v) if v.is_finite() => {}
                            _ => {
                                return Err(SystemError::NonFinite {
                                    field: i + 1,
                                    component: j + 1,
                                    at,
                                })
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
