//! The dependence locus Σ = {Δ = 0} of a frame and its genericity conditions.
//!
//! Σ is located by scanning a grid for sign changes of Δ and refining each
//! crossing with Newton steps. On Σ two conditions are checked: regularity
//! (∇Δ ≠ 0, so Σ is a smooth surface) and transversality of the distribution
//! `D = span(X1, X2, X3)` to `TΣ = ker ∇Δ`. Points where transversality fails
//! make up the tangency curve γ.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::EvalError;
use crate::export::fmt_f64;
use crate::system::{SystemError, VectorFieldSystem};
use crate::Point;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocusError {
    #[error("resolution must be at least 2 along every axis, got {0:?}")]
    InvalidResolution([usize; 3]),
    #[error("point is not on the dependence locus (|Δ| = {residual:e})")]
    NotOnLocus { residual: f64 },
    #[error("dependence locus is not regular here (|∇Δ| = {margin:e})")]
    Irregular { margin: f64 },
    #[error("frame rank drops below 2 (singular values {singular_values:?})")]
    DegenerateRank { singular_values: [f64; 3] },
    #[error(transparent)]
    System(#[from] SystemError),
}

impl From<EvalError> for LocusError {
    fn from(e: EvalError) -> Self {
        LocusError::System(SystemError::Eval(e))
    }
}

/// Tolerances for locus detection and the genericity checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocusConfig {
    /// Relative residual: a point is on Σ when `|Δ| < newton_tol·(1 + |∇Δ|)`.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// `|Δ|` below which a point is accepted as input to the checks.
    pub on_locus_tol: f64,
    /// Regularity and transversality margins must exceed this.
    pub margin_threshold: f64,
    /// Mesh points closer than this are merged.
    pub dedup_radius: f64,
    /// The frame has rank ≥ 2 when `σ2 > rank_tol·σ1`.
    pub rank_tol: f64,
}

impl Default for LocusConfig {
    fn default() -> Self {
        LocusConfig {
            newton_tol: 1e-10,
            max_newton_iters: 50,
            on_locus_tol: 1e-8,
            margin_threshold: 1e-6,
            dedup_radius: 1e-6,
            rank_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshPoint {
    pub position: Point,
    /// `∇Δ/|∇Δ|`, absent where the gradient vanishes.
    pub normal: Option<Vector3<f64>>,
}

/// Points on Σ found by a grid scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LocusMesh {
    pub points: Vec<MeshPoint>,
    pub resolution: [usize; 3],
}

impl LocusMesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Outcome of a margin test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangencyEntry {
    pub regular_ok: bool,
    pub transverse_ok: bool,
    /// Transversality margin; `None` if the check could not be carried out.
    pub margin: Option<f64>,
    /// The frame dropped to rank ≤ 1.
    pub degenerate: bool,
}

/// Per-point results of both genericity conditions over a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TangencyReport {
    pub entries: Vec<TangencyEntry>,
    /// Mesh points where `D_x ⊆ T_xΣ`.
    pub gamma_points: Vec<Point>,
}

impl TangencyReport {
    pub fn all_regular(&self) -> bool {
        self.entries.iter().all(|e| e.regular_ok)
    }

    pub fn all_transverse(&self) -> bool {
        self.entries.iter().all(|e| e.transverse_ok)
    }
}

fn residual_ok(delta: f64, grad_norm: f64, tol: f64) -> bool {
    delta.abs() < tol * (1.0 + grad_norm)
}

/// Scans the chart on a `resolution` grid for the zero set of Δ.
///
/// Sign changes along grid edges are refined by safeguarded Newton iteration
/// along the edge and then projected onto Σ along ∇Δ. Grid nodes where Δ
/// already vanishes are kept as is, which is the only way zeros of even
/// multiplicity are found.
pub fn detect_locus(
    sys: &VectorFieldSystem,
    resolution: [usize; 3],
    cfg: &LocusConfig,
) -> Result<LocusMesh, LocusError> {
    if resolution.iter().any(|&r| r < 2) {
        return Err(LocusError::InvalidResolution(resolution));
    }
    let chart = sys.chart();
    let node = |idx: [usize; 3]| -> Point {
        Point::from_fn(|k, _| {
            let s = idx[k] as f64 / (resolution[k] - 1) as f64;
            chart.min[k] + s * (chart.max[k] - chart.min[k])
        })
    };
    let [n0, n1, n2] = resolution;
    let flat = |i: usize, j: usize, k: usize| (i * n1 + j) * n2 + k;
    let mut indices = Vec::with_capacity(n0 * n1 * n2);
    for i in 0..n0 {
        for j in 0..n1 {
            for k in 0..n2 {
                indices.push([i, j, k]);
            }
        }
    }
    let values: Vec<f64> = indices
        .par_iter()
        .map(|&idx| sys.dependence_at(&node(idx)).unwrap_or(f64::NAN))
        .collect();

    let mut candidates: Vec<(Point, Option<(Point, f64, f64)>)> = Vec::new();
    for &idx in &indices {
        let here = values[flat(idx[0], idx[1], idx[2])];
        if here == 0.0 {
            candidates.push((node(idx), None));
        }
        for axis in 0..3 {
            if idx[axis] + 1 >= resolution[axis] {
                continue;
            }
            let mut next = idx;
            next[axis] += 1;
            let there = values[flat(next[0], next[1], next[2])];
            if here.is_finite() && there.is_finite() && here * there < 0.0 {
                candidates.push((node(idx), Some((node(next), here, there))));
            }
        }
    }

    let refined: Vec<Option<MeshPoint>> = candidates
        .par_iter()
        .map(|(a, edge)| {
            let start = match edge {
                None => *a,
                Some((b, fa, fb)) => refine_on_edge(sys, a, b, *fa, *fb, cfg)?,
            };
            let x = project_to_locus(sys, &start, cfg)?;
            let grad = sys.dependence_gradient_at(&x).ok()?;
            let norm = grad.norm();
            let normal = (norm > 0.0).then(|| grad / norm);
            Some(MeshPoint {
                position: x,
                normal,
            })
        })
        .collect();

    let mut points: Vec<MeshPoint> = refined.into_iter().flatten().collect();
    points.sort_by(|p, q| {
        let (a, b) = (&p.position, &q.position);
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    Ok(LocusMesh {
        points: dedup(points, cfg.dedup_radius),
        resolution,
    })
}

fn dedup(sorted: Vec<MeshPoint>, radius: f64) -> Vec<MeshPoint> {
    let cell = |x: &Point| -> [i64; 3] { std::array::from_fn(|k| (x[k] / radius).floor() as i64) };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut kept: Vec<MeshPoint> = Vec::with_capacity(sorted.len());
    for p in sorted {
        let c = cell(&p.position);
        let mut duplicate = false;
        'search: for di in -1..=1 {
            for dj in -1..=1 {
                for dk in -1..=1 {
                    if let Some(ids) = buckets.get(&[c[0] + di, c[1] + dj, c[2] + dk]) {
                        if ids
                            .iter()
                            .any(|&id| (kept[id].position - p.position).norm() < radius)
                        {
                            duplicate = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !duplicate {
            buckets.entry(c).or_default().push(kept.len());
            kept.push(p);
        }
    }
    kept
}

/// Safeguarded Newton on `s ↦ Δ(a + s(b − a))` over a sign-changing edge.
fn refine_on_edge(
    sys: &VectorFieldSystem,
    a: &Point,
    b: &Point,
    fa: f64,
    fb: f64,
    cfg: &LocusConfig,
) -> Option<Point> {
    let dir = b - a;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut flo = fa;
    let mut s = fa / (fa - fb);
    for _ in 0..cfg.max_newton_iters {
        let x = a + dir * s;
        let f = sys.dependence_at(&x).ok()?;
        let grad = sys.dependence_gradient_at(&x).ok()?;
        if residual_ok(f, grad.norm(), cfg.newton_tol) {
            return Some(x);
        }
        if f * flo > 0.0 {
            lo = s;
            flo = f;
        } else {
            hi = s;
        }
        let slope = grad.dot(&dir);
        let newton = s - f / slope;
        s = if slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Some(a + dir * s)
}

/// Newton projection onto Σ along ∇Δ. Returns `None` if the iteration does
/// not reach the residual tolerance or leaves the chart.
pub fn project_to_locus(sys: &VectorFieldSystem, x0: &Point, cfg: &LocusConfig) -> Option<Point> {
    newton_project(sys, x0, cfg, true)
}

/// Like [`project_to_locus`], but the iteration may leave the chart; the
/// caller decides what a limit outside the chart means.
pub fn project_to_locus_unbounded(sys: &VectorFieldSystem, x0: &Point, cfg: &LocusConfig) -> Option<Point> {
    newton_project(sys, x0, cfg, false)
}

fn newton_project(sys: &VectorFieldSystem, x0: &Point, cfg: &LocusConfig, bounded: bool) -> Option<Point> {
    let mut x = *x0;
    for _ in 0..=cfg.max_newton_iters {
        if bounded && !sys.chart().contains(&x) {
            return None;
        }
        let f = sys.dependence_at(&x).ok()?;
        let grad = sys.dependence_gradient_at(&x).ok()?;
        let g2 = grad.norm_squared();
        if residual_ok(f, g2.sqrt(), cfg.newton_tol) {
            return Some(x);
        }
        if g2 == 0.0 {
            return None;
        }
        x -= grad * (f / g2);
    }
    None
}

fn require_on_locus(sys: &VectorFieldSystem, x: &Point, cfg: &LocusConfig) -> Result<(), LocusError> {
    let residual = sys.dependence_at(x)?.abs();
    if residual < cfg.on_locus_tol {
        Ok(())
    } else {
        Err(LocusError::NotOnLocus { residual })
    }
}

/// Regularity of Σ at `x`: the margin is `|∇Δ(x)|`.
pub fn check_regularity(
    sys: &VectorFieldSystem,
    x: &Point,
    cfg: &LocusConfig,
) -> Result<Verdict, LocusError> {
    require_on_locus(sys, x, cfg)?;
    let margin = sys.dependence_gradient_at(x)?.norm();
    Ok(Verdict {
        margin,
        pass: margin > cfg.margin_threshold,
    })
}

/// Local geometry of the frame at a point of (or near) Σ.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FrameGeometry {
    /// Unit normal `∇Δ/|∇Δ|`.
    pub normal: Vector3<f64>,
    /// Unit annihilator of the two dominant frame directions.
    pub annihilator: Vector3<f64>,
    /// Orthonormal basis of the rank-2 part of the frame's column space.
    pub span: [Vector3<f64>; 2],
}

impl FrameGeometry {
    /// `max |⟨n, v⟩|` over unit `v ∈ D`.
    pub fn transversality_margin(&self) -> f64 {
        self.normal.dot(&self.span[0]).hypot(self.normal.dot(&self.span[1]))
    }
}

/// Left singular vectors of `m` ordered by decreasing singular value.
pub(crate) fn ordered_svd(m: &Matrix3<f64>) -> ([Vector3<f64>; 3], [f64; 3]) {
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    (
        order.map(|i| u.column(i).into_owned()),
        order.map(|i| sv[i]),
    )
}

pub(crate) fn frame_geometry(
    sys: &VectorFieldSystem,
    x: &Point,
    cfg: &LocusConfig,
) -> Result<FrameGeometry, LocusError> {
    let frame = sys.frame_unchecked(x)?;
    let (dirs, sv) = ordered_svd(&frame);
    if !(sv[0] > 0.0 && sv[1] > cfg.rank_tol * sv[0]) {
        return Err(LocusError::DegenerateRank {
            singular_values: sv,
        });
    }
    let grad = sys.dependence_gradient_at(x)?;
    let gnorm = grad.norm();
    if gnorm <= cfg.margin_threshold {
        return Err(LocusError::Irregular { margin: gnorm });
    }
    Ok(FrameGeometry {
        normal: grad / gnorm,
        annihilator: dirs[2],
        span: [dirs[0], dirs[1]],
    })
}

/// Transversality of `D_x` to `T_xΣ`; failures are candidates for γ.
///
/// The frame rank is checked before regularity: rank ≤ 1 forces ∇Δ = 0, so
/// the rank error is the more specific diagnosis.
pub fn check_transversality(
    sys: &VectorFieldSystem,
    x: &Point,
    cfg: &LocusConfig,
) -> Result<Verdict, LocusError> {
    if !sys.chart().contains(x) {
        return Err(SystemError::OutOfChart { point: (*x).into() }.into());
    }
    require_on_locus(sys, x, cfg)?;
    let margin = frame_geometry(sys, x, cfg)?.transversality_margin();
    Ok(Verdict {
        margin,
        pass: margin > cfg.margin_threshold,
    })
}

/// Runs both genericity checks at every mesh point.
pub fn analyze_locus(sys: &VectorFieldSystem, mesh: &LocusMesh, cfg: &LocusConfig) -> TangencyReport {
    let entries: Vec<TangencyEntry> = mesh
        .points
        .par_iter()
        .map(|p| {
            let regular_ok = check_regularity(sys, &p.position, cfg)
                .map(|v| v.pass)
                .unwrap_or(false);
            match check_transversality(sys, &p.position, cfg) {
                Ok(v) => TangencyEntry {
                    regular_ok,
                    transverse_ok: v.pass,
                    margin: Some(v.margin),
                    degenerate: false,
                },
                Err(e) => TangencyEntry {
                    regular_ok,
                    transverse_ok: false,
                    margin: None,
                    degenerate: matches!(e, LocusError::DegenerateRank { .. }),
                },
            }
        })
        .collect();
    let gamma_points = mesh
        .points
        .iter()
        .zip(&entries)
        .filter(|(_, e)| e.regular_ok && !e.transverse_ok && e.margin.is_some())
        .map(|(p, _)| p.position)
        .collect();
    TangencyReport {
        entries,
        gamma_points,
    }
}

/// CSV with header `x1,x2,x3,n1,n2,n3,regular_ok,transverse_ok`. Missing
/// normals are written as zeros.
pub fn write_mesh_csv<W: Write>(
    mut out: W,
    mesh: &LocusMesh,
    report: &TangencyReport,
) -> io::Result<()> {
    writeln!(out, "x1,x2,x3,n1,n2,n3,regular_ok,transverse_ok")?;
    for (p, e) in mesh.points.iter().zip(&report.entries) {
        let n = p.normal.unwrap_or_else(Vector3::zeros);
        let cells: Vec<String> = p
            .position
            .iter()
            .chain(n.iter())
            .map(|&v| fmt_f64(v))
            .collect();
        writeln!(
            out,
            "{},{},{}",
            cells.join(","),
            u8::from(e.regular_ok),
            u8::from(e.transverse_ok)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, random::random_field, ScalarField, Var};
    use crate::system::ChartBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f(s: &str) -> ScalarField {
        parse_expr(s).unwrap()
    }

    fn unit_cube() -> ChartBox {
        ChartBox::cube(-1.0, 1.0).unwrap()
    }

    fn general(cols: [[&str; 3]; 3]) -> VectorFieldSystem {
        VectorFieldSystem::general(cols.map(|c| c.map(f)), unit_cube()).unwrap()
    }

    fn model(p: &str, q: &str) -> VectorFieldSystem {
        VectorFieldSystem::model(f(p), f(q), unit_cube()).unwrap()
    }

    fn gamma_system() -> VectorFieldSystem {
        general([["1", "0", "x2"], ["0", "1", "0"], ["0", "0", "x3"]])
    }

    fn assert_mesh_invariants(sys: &VectorFieldSystem, mesh: &LocusMesh) {
        for p in &mesh.points {
            let delta = sys.dependence_at(&p.position).unwrap();
            let grad = sys.dependence_gradient_at(&p.position).unwrap();
            assert!(delta.abs() < 1e-10 * (1.0 + grad.norm()));
            if let Some(n) = p.normal {
                assert!((n.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_locus_is_the_x1_plane() {
        let sys = model("x2*x3", "sin(x2)");
        let mesh = detect_locus(&sys, [8; 3], &LocusConfig::default()).unwrap();
        assert_eq!(mesh.len(), 64);
        assert!(mesh.points.iter().all(|p| p.position[0].abs() < 1e-10));
        assert_mesh_invariants(&sys, &mesh);
    }

    #[test]
    fn locus_outside_the_box_gives_an_empty_mesh() {
        let sys = general([["1", "0", "0"], ["0", "1", "0"], ["0", "0", "x1 - 5"]]);
        let mesh = detect_locus(&sys, [8; 3], &LocusConfig::default()).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn tangential_zero_is_found_on_nodes_but_is_irregular() {
        let sys = general([["1", "0", "0"], ["0", "1", "0"], ["0", "0", "x1^2"]]);
        let cfg = LocusConfig::default();
        let mesh = detect_locus(&sys, [9; 3], &cfg).unwrap();
        assert_eq!(mesh.len(), 81);
        assert!(mesh.points.iter().all(|p| p.position[0] == 0.0 && p.normal.is_none()));
        let report = analyze_locus(&sys, &mesh, &cfg);
        assert!(report.entries.iter().all(|e| !e.regular_ok));

        let v = check_regularity(&sys, &Point::zeros(), &cfg).unwrap();
        assert_eq!(v, Verdict { margin: 0.0, pass: false });
    }

    #[test]
    fn regularity_on_model_system() {
        let cfg = LocusConfig::default();
        let sys = model("0", "x2");
        let v = check_regularity(&sys, &Point::new(0.0, 0.3, -0.7), &cfg).unwrap();
        assert_eq!(v, Verdict { margin: 1.0, pass: true });
        assert!(matches!(
            check_regularity(&sys, &Point::new(0.5, 0.0, 0.0), &cfg),
            Err(LocusError::NotOnLocus { .. })
        ));
    }

    #[test]
    fn model_systems_are_transverse_everywhere() {
        let cfg = LocusConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let p = random_field(&mut rng, 4, &[Var::X2, Var::X3]);
            let q = random_field(&mut rng, 4, &[Var::X2, Var::X3]);
            let sys = VectorFieldSystem::model(p, q, unit_cube()).unwrap();
            let mesh = detect_locus(&sys, [6; 3], &cfg).unwrap();
            let report = analyze_locus(&sys, &mesh, &cfg);
            assert!(report.all_regular() && report.all_transverse());
            assert!(report.gamma_points.is_empty());
        }
    }

    #[test]
    fn gamma_is_where_x2_vanishes() {
        let cfg = LocusConfig::default();
        let sys = gamma_system();
        let on_gamma = check_transversality(&sys, &Point::new(1.0, 0.0, 0.0), &cfg).unwrap();
        assert!(!on_gamma.pass);
        assert!(on_gamma.margin < 1e-15);
        let off = check_transversality(&sys, &Point::new(0.2, 0.5, 0.0), &cfg).unwrap();
        assert!(off.pass);
        assert!((off.margin - 0.5 / 1.25_f64.sqrt()).abs() < 1e-12);

        let mesh = detect_locus(&sys, [5; 3], &cfg).unwrap();
        let report = analyze_locus(&sys, &mesh, &cfg);
        assert_eq!(report.gamma_points.len(), 5);
        assert!(report.gamma_points.iter().all(|p| p[1] == 0.0 && p[2].abs() < 1e-10));
    }

    #[test]
    fn proportional_columns_are_degenerate() {
        let cfg = LocusConfig::default();
        let sys = general([["1", "0", "0"], ["2", "0", "0"], ["0", "0", "x1"]]);
        assert!(matches!(
            check_transversality(&sys, &Point::new(0.0, 0.1, 0.2), &cfg),
            Err(LocusError::DegenerateRank { .. })
        ));
    }

    #[test]
    fn curved_locus_is_refined_onto_the_surface() {
        let sys = general([["1", "0", "0"], ["0", "1", "0"], ["0", "0", "x1 - 0.3*sin(2*x2) + x3^2/4"]]);
        let cfg = LocusConfig::default();
        let mesh = detect_locus(&sys, [10; 3], &cfg).unwrap();
        assert!(mesh.len() > 50);
        assert_mesh_invariants(&sys, &mesh);
        for w in mesh.points.windows(2) {
            assert!((w[0].position - w[1].position).norm() >= 1e-6);
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let sys = general([["1", "x3", "0"], ["0", "1", "x1"], ["x2", "0", "x1 + x2*x3"]]);
        let cfg = LocusConfig::default();
        let a = detect_locus(&sys, [7; 3], &cfg).unwrap();
        let b = detect_locus(&sys, [7; 3], &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(p.position.map(f64::to_bits), q.position.map(f64::to_bits));
        }
    }

    #[test]
    fn rejects_coarse_resolution() {
        let sys = model("0", "0");
        assert!(matches!(
            detect_locus(&sys, [1, 4, 4], &LocusConfig::default()),
            Err(LocusError::InvalidResolution(_))
        ));
    }

    #[test]
    fn mesh_csv_has_header_and_flags() {
        let sys = model("0", "0");
        let cfg = LocusConfig::default();
        let mesh = detect_locus(&sys, [2; 3], &cfg).unwrap();
        let report = analyze_locus(&sys, &mesh, &cfg);
        let mut buf = Vec::new();
        write_mesh_csv(&mut buf, &mesh, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x1,x2,x3,n1,n2,n3,regular_ok,transverse_ok"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 8);
        assert_eq!(&row[6..], ["1", "1"]);
        assert_eq!(text.lines().count(), 1 + mesh.len());
    }
}
