//! Adaptive isogeometric Galerkin solver for `-Δu = f` with Dirichlet and
//! Neumann sides of the parameter square.
//!
//! The same space discretizes geometry and solution. Each level runs
//! solve, estimate and mark, label, refine. The estimator is the cell
//! residual `h² ||Δu_h + f||²` plus `h ||g_N - ∂u_h/∂n||²` on Neumann edges.

pub mod linsolve;
pub mod problems;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DVector, Matrix2, Vector2};
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::{classify_ratio, sample_layout};
use crate::mesh::{CellId, MeshError, Side, Split, TMesh};
use crate::quadrature::gauss_legendre;
use crate::refine::{refine, RefineError, RefinementReport, RefinementRequest, Strategy};
use crate::report::{AdaptiveReport, LevelRecord};
use crate::space::{FunctionId, SpaceError, SplineField, SplineSpace};

pub use linsolve::{SolveMethod, SolveStats};

#[derive(Debug, Error)]
pub enum IgaError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("singular Jacobian in cell {cell} at ({s}, {t})")]
    SingularJacobian { cell: CellId, s: f64, t: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("linear solver stopped at relative residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

pub type ScalarFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(f64, f64) -> Vector2<f64> + Send + Sync>;
/// Neumann datum `g_N(x, y, n)` with the outward unit normal `n`.
pub type FluxFn = Arc<dyn Fn(f64, f64, Vector2<f64>) -> f64 + Send + Sync>;
/// Hermite data `(G, G_s, G_t, G_st)` of a parameterization.
pub type MapFn = Arc<dyn Fn(f64, f64) -> [Vector2<f64>; 4] + Send + Sync>;

pub const SIDES: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

#[derive(Clone)]
pub struct PoissonProblem {
    pub name: String,
    pub source: ScalarFn,
    /// Parameter sides forming `Γ_D`; the remaining sides form `Γ_N`.
    pub dirichlet: Vec<Side>,
    /// `None` means homogeneous Dirichlet data.
    pub dirichlet_data: Option<ScalarFn>,
    /// `None` means zero flux.
    pub neumann_data: Option<FluxFn>,
    pub exact: Option<(ScalarFn, GradientFn)>,
}

impl fmt::Debug for PoissonProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoissonProblem")
            .field("name", &self.name)
            .field("dirichlet", &self.dirichlet)
            .field("dirichlet_data", &self.dirichlet_data.is_some())
            .field("neumann_data", &self.neumann_data.is_some())
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl PoissonProblem {
    pub fn validate(&self) -> Result<(), IgaError> {
        if self.dirichlet.is_empty() {
            return Err(IgaError::Problem("the Dirichlet boundary must have positive length (pure Neumann is not supported)".into()));
        }
        let unique: BTreeSet<Side> = self.dirichlet.iter().copied().collect();
        if unique.len() != self.dirichlet.len() {
            return Err(IgaError::Problem("a side is listed twice in the Dirichlet boundary".into()));
        }
        Ok(())
    }

    pub fn is_dirichlet(&self, side: Side) -> bool {
        self.dirichlet.contains(&side)
    }

    pub fn neumann_sides(&self) -> Vec<Side> {
        SIDES.into_iter().filter(|s| !self.is_dirichlet(*s)).collect()
    }

    fn flux(&self, x: Vector2<f64>, n: Vector2<f64>) -> f64 {
        self.neumann_data.as_ref().map(|g| g(x.x, x.y, n)).unwrap_or(0.0)
    }
}

/// Geometry and its derivatives at one parameter point.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub x: Vector2<f64>,
    /// Columns `G_s`, `G_t`.
    pub jac: Matrix2<f64>,
    pub det: f64,
    pub jinv: Matrix2<f64>,
    /// `G_ss, G_st, G_tt`.
    pub hess: [Vector2<f64>; 3],
}

impl Frame {
    /// Physical gradient from parameter derivatives.
    pub fn gradient(&self, ds: f64, dt: f64) -> Vector2<f64> {
        self.jinv.transpose() * Vector2::new(ds, dt)
    }

    /// Physical Laplacian from `(f, f_s, f_t, f_ss, f_st, f_tt)`.
    pub fn laplacian(&self, d: &[f64; 6]) -> f64 {
        let g = self.gradient(d[1], d[2]);
        let [gss, gst, gtt] = self.hess;
        let mut h = Matrix2::new(d[3], d[4], d[4], d[5]);
        for k in 0..2 {
            h -= Matrix2::new(gss[k], gst[k], gst[k], gtt[k]) * g[k];
        }
        let hx = self.jinv.transpose() * h * self.jinv;
        hx.trace()
    }
}

#[derive(Clone, Debug)]
pub struct Geometry {
    pub field: SplineField<Vector2<f64>>,
}

impl Geometry {
    pub fn identity(space: Arc<SplineSpace>) -> Result<Geometry, IgaError> {
        let map: MapFn = Arc::new(|s, t| [Vector2::new(s, t), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0), Vector2::zeros()]);
        Geometry::from_map(space, &map)
    }

    /// Hermite interpolation of a parameterization at the basis vertices.
    pub fn from_map(space: Arc<SplineSpace>, map: &MapFn) -> Result<Geometry, IgaError> {
        Ok(Geometry { field: SplineField::from_hermite(space, |s, t| map(s, t))? })
    }

    pub fn space(&self) -> &Arc<SplineSpace> {
        &self.field.space
    }

    pub fn prolong(&self, fine: Arc<SplineSpace>) -> Result<Geometry, IgaError> {
        Ok(Geometry { field: self.field.prolong(fine)? })
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<Vector2<f64>, IgaError> {
        Ok(self.field.value(s, t)?)
    }

    pub fn frame(&self, cell: CellId, s: f64, t: f64) -> Result<Frame, IgaError> {
        let d = self.field.derivatives_in_cell(cell, s, t);
        let jac = Matrix2::from_columns(&[d[1], d[2]]);
        let det = jac.determinant();
        let scale = d[1].norm_squared().max(d[2].norm_squared());
        let jinv = match jac.try_inverse() {
            Some(m) if det.abs() > 1e-13 * scale && scale > 0.0 => m,
            _ => return Err(IgaError::SingularJacobian { cell, s, t }),
        };
        Ok(Frame { x: d[0], jac, det, jinv, hess: [d[3], d[4], d[5]] })
    }

    /// Largest distance between opposite mapped corners.
    pub fn cell_diameter(&self, cell: CellId) -> f64 {
        let [s0, s1, t0, t1] = self.space().mesh().cell_rect(cell);
        let p = |s, t| self.field.derivatives_in_cell(cell, s, t)[0];
        (p(s0, t0) - p(s1, t1)).norm().max((p(s1, t0) - p(s0, t1)).norm())
    }
}

/// Sides of the parameter domain that a cell touches.
pub fn boundary_sides(mesh: &TMesh, cell: CellId) -> Vec<Side> {
    let b = mesh.cells()[cell].bounds;
    let d = mesh.lattice_domain();
    let mut out = Vec::new();
    if b.x0 == d.x0 {
        out.push(Side::Left);
    }
    if b.x1 == d.x1 {
        out.push(Side::Right);
    }
    if b.y0 == d.y0 {
        out.push(Side::Bottom);
    }
    if b.y1 == d.y1 {
        out.push(Side::Top);
    }
    out
}

/// Quadrature on one boundary edge of a cell: parameter point, weight
/// including the physical line element, and outward unit normal.
#[derive(Clone, Copy, Debug)]
struct EdgePoint {
    s: f64,
    t: f64,
    weight: f64,
    x: Vector2<f64>,
    normal: Vector2<f64>,
    frame: Frame,
}

fn edge_points(geometry: &Geometry, cell: CellId, side: Side, q: usize) -> Result<Vec<EdgePoint>, IgaError> {
    let [s0, s1, t0, t1] = geometry.space().mesh().cell_rect(cell);
    let (x, w) = gauss_legendre(q);
    let mut out = Vec::with_capacity(q);
    for (xi, wi) in x.iter().zip(&w) {
        let (s, t, len) = match side {
            Side::Left => (s0, t0 + xi * (t1 - t0), t1 - t0),
            Side::Right => (s1, t0 + xi * (t1 - t0), t1 - t0),
            Side::Bottom => (s0 + xi * (s1 - s0), t0, s1 - s0),
            Side::Top => (s0 + xi * (s1 - s0), t1, s1 - s0),
        };
        let frame = geometry.frame(cell, s, t)?;
        let (gs, gt) = (frame.jac.column(0).into_owned(), frame.jac.column(1).into_owned());
        let (tangent, inward) = match side {
            Side::Left => (gt, gs),
            Side::Right => (gt, -gs),
            Side::Bottom => (gs, gt),
            Side::Top => (gs, -gt),
        };
        let tn = tangent.norm();
        let mut normal = Vector2::new(tangent.y, -tangent.x) / tn;
        if normal.dot(&inward) > 0.0 {
            normal = -normal;
        }
        out.push(EdgePoint { s, t, weight: wi * len * tn, x: frame.x, normal, frame });
    }
    Ok(out)
}

/// Interior quadrature: parameter point, weight including `|det J|` and
/// the cell area.
fn cell_points(geometry: &Geometry, cell: CellId, q: usize) -> Result<Vec<(f64, f64, f64, Frame)>, IgaError> {
    let [s0, s1, t0, t1] = geometry.space().mesh().cell_rect(cell);
    let (x, w) = gauss_legendre(q);
    let area = (s1 - s0) * (t1 - t0);
    let mut out = Vec::with_capacity(q * q);
    for (yj, wj) in x.iter().zip(&w) {
        for (xi, wi) in x.iter().zip(&w) {
            let (s, t) = (s0 + xi * (s1 - s0), t0 + yj * (t1 - t0));
            let frame = geometry.frame(cell, s, t)?;
            out.push((s, t, wi * wj * area * frame.det.abs(), frame));
        }
    }
    Ok(out)
}

fn composite_points(geometry: &Geometry, cell: CellId, q: usize, m: usize) -> Result<Vec<(f64, f64, f64, Frame)>, IgaError> {
    let [s0, s1, t0, t1] = geometry.space().mesh().cell_rect(cell);
    let (x, w) = gauss_legendre(q);
    let (hs, ht) = ((s1 - s0) / m as f64, (t1 - t0) / m as f64);
    let mut out = Vec::with_capacity(q * q * m * m);
    for b in 0..m {
        for a in 0..m {
            for (yj, wj) in x.iter().zip(&w) {
                for (xi, wi) in x.iter().zip(&w) {
                    let (s, t) = (s0 + (a as f64 + xi) * hs, t0 + (b as f64 + yj) * ht);
                    let frame = geometry.frame(cell, s, t)?;
                    out.push((s, t, wi * wj * hs * ht * frame.det.abs(), frame));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct System {
    pub matrix: CscMatrix<f64>,
    pub rhs: DVector<f64>,
}

struct LocalSystem {
    ids: Vec<FunctionId>,
    k: Vec<f64>,
    f: Vec<f64>,
}

/// Stiffness matrix and load vector with `q x q` Gauss points per cell and
/// `q` points per Neumann edge.
pub fn assemble(geometry: &Geometry, problem: &PoissonProblem, q: usize) -> Result<System, IgaError> {
    let space = geometry.space();
    let mesh = space.mesh();
    let cells: Vec<CellId> = mesh.active_cells().collect();
    let locals: Vec<Result<LocalSystem, IgaError>> = cells
        .par_iter()
        .map(|&c| {
            let ids = space.cell_functions(c).to_vec();
            let n = ids.len();
            let mut k = vec![0.0; n * n];
            let mut f = vec![0.0; n];
            for (s, t, w, frame) in cell_points(geometry, c, q)? {
                let vals = space.eval_in_cell(c, s, t);
                let grads: Vec<Vector2<f64>> = vals.iter().map(|v| frame.gradient(v.d[1], v.d[2])).collect();
                let src = (problem.source)(frame.x.x, frame.x.y);
                for a in 0..n {
                    f[a] += w * src * vals[a].d[0];
                    for b in a..n {
                        k[a * n + b] += w * grads[a].dot(&grads[b]);
                    }
                }
            }
            for a in 0..n {
                for b in 0..a {
                    k[a * n + b] = k[b * n + a];
                }
            }
            for side in boundary_sides(mesh, c) {
                if problem.is_dirichlet(side) {
                    continue;
                }
                for e in edge_points(geometry, c, side, q)? {
                    let g = problem.flux(e.x, e.normal);
                    for v in space.eval_in_cell(c, e.s, e.t) {
                        let a = ids.iter().position(|&i| i == v.id).expect("cell function");
                        f[a] += e.weight * g * v.d[0];
                    }
                }
            }
            Ok(LocalSystem { ids, k, f })
        })
        .collect();
    let n = space.dim();
    let mut coo = CooMatrix::new(n, n);
    let mut rhs = DVector::zeros(n);
    for local in locals {
        let l = local?;
        let m = l.ids.len();
        for a in 0..m {
            rhs[l.ids[a]] += l.f[a];
            for b in 0..m {
                coo.push(l.ids[a], l.ids[b], l.k[a * m + b]);
            }
        }
    }
    Ok(System { matrix: CscMatrix::from(&coo), rhs })
}

/// Values of the functions that do not vanish on `Γ_D`: zero for
/// homogeneous data, otherwise the least-squares fit of the data on `Γ_D`.
pub fn dirichlet_values(geometry: &Geometry, problem: &PoissonProblem, q: usize) -> Result<BTreeMap<FunctionId, f64>, IgaError> {
    let space = geometry.space();
    let mesh = space.mesh();
    let mut edges = Vec::new();
    for c in mesh.active_cells() {
        let sides = boundary_sides(mesh, c);
        for side in sides.iter().filter(|s| problem.is_dirichlet(**s)) {
            for e in edge_points(geometry, c, *side, q)? {
                let vals: Vec<(FunctionId, f64)> = space
                    .eval_in_cell(c, e.s, e.t)
                    .into_iter()
                    .filter(|v| v.d[0].abs() > 1e-12)
                    .map(|v| (v.id, v.d[0]))
                    .collect();
                edges.push((e, vals));
            }
        }
        if sides.len() == 2 && sides.iter().filter(|s| problem.is_dirichlet(**s)).count() == 1 {
            log::debug!("cell {c} has a corner shared by Dirichlet and Neumann sides; Dirichlet wins");
        }
    }
    let pinned: BTreeSet<FunctionId> = edges.iter().flat_map(|(_, v)| v.iter().map(|p| p.0)).collect();
    let Some(g) = &problem.dirichlet_data else {
        return Ok(pinned.into_iter().map(|i| (i, 0.0)).collect());
    };
    let local: BTreeMap<FunctionId, usize> = pinned.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let m = local.len();
    let mut coo = CooMatrix::new(m, m);
    let mut rhs = DVector::zeros(m);
    for (e, vals) in &edges {
        let gv = g(e.x.x, e.x.y);
        for &(i, vi) in vals {
            rhs[local[&i]] += e.weight * gv * vi;
            for &(j, vj) in vals {
                coo.push(local[&i], local[&j], e.weight * vi * vj);
            }
        }
    }
    let (c, _) = linsolve::solve_spd(&CscMatrix::from(&coo), &rhs, 1e-12)?;
    Ok(pinned.into_iter().map(|i| (i, c[local[&i]])).collect())
}

/// Eliminate fixed coefficients symmetrically and solve for the rest.
pub fn solve_constrained(
    system: &System,
    fixed: &BTreeMap<FunctionId, f64>,
    tol: f64,
) -> Result<(DVector<f64>, SolveStats), IgaError> {
    let n = system.rhs.len();
    let mut free_index = vec![usize::MAX; n];
    let mut free = Vec::new();
    for i in 0..n {
        if !fixed.contains_key(&i) {
            free_index[i] = free.len();
            free.push(i);
        }
    }
    let mut rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| system.rhs[i]));
    let mut coo = CooMatrix::new(free.len(), free.len());
    for (i, j, &v) in system.matrix.triplet_iter() {
        match (free_index[i], fixed.get(&j)) {
            (fi, _) if fi == usize::MAX => {}
            (fi, Some(&cj)) => rhs[fi] -= v * cj,
            (fi, None) => coo.push(fi, free_index[j], v),
        }
    }
    let (x, stats) = linsolve::solve_spd(&CscMatrix::from(&coo), &rhs, tol)?;
    let mut out = DVector::zeros(n);
    for (k, &i) in free.iter().enumerate() {
        out[i] = x[k];
    }
    for (&i, &v) in fixed {
        out[i] = v;
    }
    Ok((out, stats))
}

#[derive(Clone, Debug)]
pub struct DiscreteSolution {
    pub field: SplineField<f64>,
    pub geometry: Geometry,
    pub stats: SolveStats,
}

impl DiscreteSolution {
    /// Value and physical gradient at a parameter point of a cell.
    pub fn value_gradient(&self, cell: CellId, s: f64, t: f64) -> Result<(f64, Vector2<f64>), IgaError> {
        let frame = self.geometry.frame(cell, s, t)?;
        let d = self.field.derivatives_in_cell(cell, s, t);
        Ok((d[0], frame.gradient(d[1], d[2])))
    }
}

/// Assemble, constrain and solve on the geometry's space.
pub fn solve(geometry: &Geometry, problem: &PoissonProblem, q: usize, tol: f64) -> Result<DiscreteSolution, IgaError> {
    problem.validate()?;
    let system = assemble(geometry, problem, q)?;
    let fixed = dirichlet_values(geometry, problem, q)?;
    let (c, stats) = solve_constrained(&system, &fixed, tol)?;
    let field = SplineField::new(geometry.space().clone(), c.iter().copied().collect())?;
    Ok(DiscreteSolution { field, geometry: geometry.clone(), stats })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellIndicator {
    pub eta: f64,
    /// Physical cell diameter.
    pub diameter: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorIndicator {
    pub cells: BTreeMap<CellId, CellIndicator>,
    pub total: f64,
}

pub fn error_indicators(sol: &DiscreteSolution, problem: &PoissonProblem, q: usize) -> Result<ErrorIndicator, IgaError> {
    let geometry = &sol.geometry;
    let mesh = geometry.space().mesh();
    let cells: Vec<CellId> = mesh.active_cells().collect();
    let parts: Vec<Result<(CellId, CellIndicator), IgaError>> = cells
        .par_iter()
        .map(|&c| {
            let h = geometry.cell_diameter(c);
            let mut interior = 0.0;
            for (s, t, w, frame) in cell_points(geometry, c, q)? {
                let d = sol.field.derivatives_in_cell(c, s, t);
                let r = frame.laplacian(&d) + (problem.source)(frame.x.x, frame.x.y);
                interior += w * r * r;
            }
            let mut flux = 0.0;
            for side in boundary_sides(mesh, c) {
                if problem.is_dirichlet(side) {
                    continue;
                }
                for e in edge_points(geometry, c, side, q)? {
                    let d = sol.field.derivatives_in_cell(c, e.s, e.t);
                    let dn = e.frame.gradient(d[1], d[2]).dot(&e.normal);
                    let r = problem.flux(e.x, e.normal) - dn;
                    flux += e.weight * r * r;
                }
            }
            let eta = (h * h * interior + h * flux).sqrt();
            Ok((c, CellIndicator { eta, diameter: h }))
        })
        .collect();
    let mut out = ErrorIndicator::default();
    let mut sum = 0.0;
    for p in parts {
        let (c, ind) = p?;
        sum += ind.eta * ind.eta;
        out.cells.insert(c, ind);
    }
    out.total = sum.sqrt();
    Ok(out)
}

/// Mean curvatures `(K_s, K_t)` of the graph curves of `u_h ∘ G` along the
/// two parameter directions over one cell.
pub fn solution_curvatures(sol: &DiscreteSolution, cell: CellId, samples: usize) -> (f64, f64) {
    let [s0, s1, t0, t1] = sol.field.space.mesh().cell_rect(cell);
    let pts = sample_layout(samples);
    let (mut ks, mut kt) = (0.0, 0.0);
    for &(u, v) in &pts {
        let d = sol.field.derivatives_in_cell(cell, s0 + u * (s1 - s0), t0 + v * (t1 - t0));
        ks += d[3].abs() / (1.0 + d[1] * d[1]).powf(1.5);
        kt += d[5].abs() / (1.0 + d[2] * d[2]).powf(1.5);
    }
    let n = pts.len() as f64;
    (ks / n, kt / n)
}

/// V when `K_s / K_t > delta0`, H when below `delta1`, otherwise C.
pub fn label_by_solution(sol: &DiscreteSolution, cells: &[CellId], delta0: f64, delta1: f64, samples: usize) -> BTreeMap<CellId, Split> {
    cells
        .par_iter()
        .map(|&c| {
            let (ks, kt) = solution_curvatures(sol, c, samples);
            (c, classify_ratio(ks, kt, delta0, delta1).label)
        })
        .collect()
}

/// Sub-cells per direction of the composite rule used for error norms, so
/// singular exact gradients are integrated with some accuracy.
pub const NORM_SUBCELLS: usize = 4;

/// `(||u - u_h||_{L²}, |u - u_h|_{H¹})` over the physical domain.
pub fn exact_error_norms(sol: &DiscreteSolution, exact: &ScalarFn, gradient: &GradientFn, q: usize) -> Result<(f64, f64), IgaError> {
    let cells: Vec<CellId> = sol.geometry.space().mesh().active_cells().collect();
    let parts: Vec<Result<(f64, f64), IgaError>> = cells
        .par_iter()
        .map(|&c| {
            let (mut l2, mut h1) = (0.0, 0.0);
            for (s, t, w, frame) in composite_points(&sol.geometry, c, q, NORM_SUBCELLS)? {
                let d = sol.field.derivatives_in_cell(c, s, t);
                let e = exact(frame.x.x, frame.x.y) - d[0];
                let g = gradient(frame.x.x, frame.x.y) - frame.gradient(d[1], d[2]);
                l2 += w * e * e;
                h1 += w * g.norm_squared();
            }
            Ok((l2, h1))
        })
        .collect();
    let (mut l2, mut h1) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        l2 += a;
        h1 += b;
    }
    Ok((l2.sqrt(), h1.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Marking {
    /// Cells with `η_θ` above the value.
    Threshold(f64),
    /// Smallest set of largest indicators carrying this fraction of `η_τ²`.
    Dorfler(f64),
    /// Every markable cell.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub marking: Marking,
    pub delta0: f64,
    pub delta1: f64,
    pub samples: usize,
    pub quadrature: usize,
    pub max_levels: u32,
    pub solver_tolerance: f64,
    pub strategy: Strategy,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            marking: Marking::Threshold(1e-4),
            delta0: 2.0,
            delta1: 0.5,
            samples: 9,
            quadrature: 5,
            max_levels: 6,
            solver_tolerance: 1e-10,
            strategy: Strategy::Modified,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), IgaError> {
        if !(self.delta0 > 1.0 && 1.0 > self.delta1 && self.delta1 > 0.0) {
            return Err(IgaError::Config(format!("need delta0 > 1 > delta1 > 0, got {} and {}", self.delta0, self.delta1)));
        }
        if self.quadrature < 4 {
            return Err(IgaError::Config(format!("quadrature order must be at least 4, got {}", self.quadrature)));
        }
        if self.samples == 0 {
            return Err(IgaError::Config("need at least one curvature sample".into()));
        }
        match self.marking {
            Marking::Threshold(x) if !(x >= 0.0) => Err(IgaError::Config(format!("bad marking threshold {x}"))),
            Marking::Dorfler(x) if !(x > 0.0 && x <= 1.0) => Err(IgaError::Config(format!("Dorfler fraction {x} not in (0, 1]"))),
            _ => Ok(()),
        }
    }
}

fn mark(ind: &ErrorIndicator, markable: &[CellId], marking: Marking) -> Vec<CellId> {
    match marking {
        Marking::Threshold(x) => markable.iter().copied().filter(|c| ind.cells[c].eta > x).collect(),
        Marking::Uniform => markable.to_vec(),
        Marking::Dorfler(theta) => {
            let mut order = markable.to_vec();
            order.sort_by(|a, b| ind.cells[b].eta.total_cmp(&ind.cells[a].eta).then(a.cmp(b)));
            let goal = theta * ind.total * ind.total;
            let mut acc = 0.0;
            let mut out = Vec::new();
            for c in order {
                if acc >= goal {
                    break;
                }
                acc += ind.cells[&c].eta.powi(2);
                out.push(c);
            }
            out.sort();
            out
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptiveSolution {
    pub solution: DiscreteSolution,
    pub report: AdaptiveReport,
    pub meshes: Vec<TMesh>,
    pub refinements: Vec<RefinementReport>,
    pub indicators: Vec<ErrorIndicator>,
}

/// Solve, estimate and mark, label, refine until nothing is marked or the
/// level cap is reached.
pub fn adaptive_solve(problem: &PoissonProblem, geometry: Geometry, config: &SolveConfig) -> Result<AdaptiveSolution, IgaError> {
    config.validate()?;
    problem.validate()?;
    let q = config.quadrature;
    let mut geometry = geometry;
    let mut report = AdaptiveReport::default();
    let mut meshes = vec![geometry.space().mesh().clone()];
    let mut refinements = Vec::new();
    let mut indicators = Vec::new();
    let (mut prev_dof, mut modified) = (0, 0);
    loop {
        let space = geometry.space().clone();
        let t0 = Instant::now();
        let sol = solve(&geometry, problem, q, config.solver_tolerance)?;
        let solve_time = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let ind = error_indicators(&sol, problem, q)?;
        let norms = match &problem.exact {
            Some((u, g)) => Some(exact_error_norms(&sol, u, g, q)?),
            None => None,
        };
        let level = space.mesh().level();
        let mut rec = LevelRecord {
            level,
            dof: space.dim(),
            new_functions: space.dim() - prev_dof,
            modified_functions: modified,
            eta_total: Some(ind.total),
            l2: norms.map(|n| n.0),
            h1: norms.map(|n| n.1),
            timings: vec![("solve".into(), solve_time), ("estimate".into(), t1.elapsed().as_secs_f64())],
            ..Default::default()
        };
        if let Some(prev) = report.last().and_then(|l| l.eta_total) {
            if ind.total >= prev {
                report.warnings.push(format!("level {level}: eta_total did not decrease ({prev:e} -> {:e})", ind.total));
            }
        }
        log::info!("level {level}: dof {} eta {:e}", space.dim(), ind.total);
        let marked = mark(&ind, &space.mesh().markable_cells(), config.marking);
        if marked.is_empty() || level >= config.max_levels {
            report.converged = marked.is_empty();
            report.levels.push(rec);
            indicators.push(ind);
            return Ok(AdaptiveSolution { solution: sol, report, meshes, refinements, indicators });
        }
        let t2 = Instant::now();
        let labels = match config.marking {
            Marking::Uniform => marked.iter().map(|&c| (c, Split::C)).collect(),
            _ => label_by_solution(&sol, &marked, config.delta0, config.delta1, config.samples),
        };
        let request: RefinementRequest = config.strategy.request(labels);
        let (mesh1, rrep) = refine(space.mesh(), &request)?;
        rec.marked = marked.len();
        rec.labels = rrep.label_histogram();
        let next = Arc::new(space.advance(&mesh1, &rrep)?);
        modified = next.modified_count(&space);
        prev_dof = space.dim();
        geometry = geometry.prolong(next)?;
        rec.timings.push(("refine".into(), t2.elapsed().as_secs_f64()));
        report.levels.push(rec);
        indicators.push(ind);
        meshes.push(mesh1);
        refinements.push(rrep);
    }
}

#[cfg(test)]
mod tests;
