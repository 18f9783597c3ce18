//! Adaptive surface fitting of parameterized point sets.
//!
//! Each level estimates control points only for the functions anchored at
//! new basis vertices, from a local quadratic least-squares fit of the data
//! around the vertex. Old control points are kept. Cells whose maximum data
//! error exceeds the tolerance are labelled by directional curvature and
//! refined.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{CellId, MeshError, Point, Split, TMesh};
use crate::quadrature::gauss_legendre;
use crate::refine::{refine, RefineError, RefinementReport, Strategy};
use crate::report::{AdaptiveReport, LevelRecord};
use crate::space::{SpaceError, SplineField, SplineSpace};

pub type SurfaceField = SplineField<Vector3<f64>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("point set is empty")]
    Empty,
    #[error("point {index} has parameters ({s}, {t}) outside [0,1]^2")]
    OutsideDomain { index: usize, s: f64, t: f64 },
    #[error("{params} parameter pairs but {points} points")]
    LengthMismatch { params: usize, points: usize },
    #[error("no usable data near basis vertex at ({0}, {1})")]
    Underdetermined(f64, f64),
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPointSet {
    pub params: Vec<(f64, f64)>,
    pub points: Vec<Vector3<f64>>,
}

impl ParamPointSet {
    pub fn new(params: Vec<(f64, f64)>, points: Vec<Vector3<f64>>) -> Result<Self, FitError> {
        if params.len() != points.len() {
            return Err(FitError::LengthMismatch { params: params.len(), points: points.len() });
        }
        if params.is_empty() {
            return Err(FitError::Empty);
        }
        for (index, &(s, t)) in params.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
                return Err(FitError::OutsideDomain { index, s, t });
            }
        }
        Ok(ParamPointSet { params, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    /// Point indices per active cell of `mesh`.
    pub fn index(&self, mesh: &TMesh) -> Result<HashMap<CellId, Vec<usize>>, FitError> {
        let cells: Vec<CellId> = self
            .params
            .par_iter()
            .map(|&(s, t)| mesh.locate(s, t))
            .collect::<Result<_, _>>()?;
        let mut out: HashMap<CellId, Vec<usize>> = HashMap::new();
        for (i, c) in cells.into_iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Fraction of the bounding-box diagonal.
    pub tolerance: f64,
    /// Anisotropy threshold, > 1.
    pub delta: f64,
    /// Curvature samples per cell (rounded up to a square layout).
    pub samples: usize,
    pub max_levels: u32,
    pub grid: (usize, usize),
    pub strategy: Strategy,
    /// Gaussian weight radius of the local fit in mean data spacings;
    /// 0 gives the unweighted fit.
    pub weight_radius: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tolerance: 1e-3,
            delta: 2.0,
            samples: 9,
            max_levels: 8,
            grid: (2, 2),
            strategy: Strategy::Modified,
            weight_radius: 0.6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.tolerance >= 0.0) {
            return Err(FitError::Config(format!("tolerance must be nonnegative, got {}", self.tolerance)));
        }
        if !(self.delta > 1.0) {
            return Err(FitError::Config(format!("delta must exceed 1, got {}", self.delta)));
        }
        if self.samples == 0 {
            return Err(FitError::Config("samples must be at least 1".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(FitError::Config("initial grid must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyEstimate {
    pub ks: f64,
    pub kt: f64,
    /// `K_s / K_t`; infinite when `K_t = 0 < K_s`, `None` when both vanish.
    pub rho: Option<f64>,
    pub label: Split,
}

/// Curvatures below this are treated as zero.
const FLAT: f64 = 1e-10;

/// Label from directional curvature means with a symmetric threshold pair
/// (`hi` for V, `lo` for H).
pub fn classify_ratio(ks: f64, kt: f64, hi: f64, lo: f64) -> AnisotropyEstimate {
    if ks <= FLAT && kt <= FLAT {
        return AnisotropyEstimate { ks, kt, rho: None, label: Split::C };
    }
    let rho = if kt <= FLAT { f64::INFINITY } else { ks / kt };
    let label = if rho > hi {
        Split::V
    } else if rho < lo {
        Split::H
    } else {
        Split::C
    };
    AnisotropyEstimate { ks, kt, rho: Some(rho), label }
}

/// Interior sample layout in local cell coordinates.
pub fn sample_layout(l: usize) -> Vec<(f64, f64)> {
    let k = (l as f64).sqrt().ceil().max(1.0) as usize;
    let (x, _) = gauss_legendre(k);
    let mut out = Vec::with_capacity(k * k);
    for &v in &x {
        for &u in &x {
            out.push((u, v));
        }
    }
    out
}

fn curve_curvature(d1: &Vector3<f64>, d2: &Vector3<f64>) -> Option<f64> {
    let n = d1.norm();
    if !(n > 1e-14) {
        return None;
    }
    Some(d1.cross(d2).norm() / (n * n * n))
}

/// Mean directional curvatures of the surface over one cell.
pub fn cell_anisotropy(field: &SurfaceField, cell: CellId, delta: f64, samples: usize) -> AnisotropyEstimate {
    let [s0, s1, t0, t1] = field.space.mesh().cell_rect(cell);
    let (mut ks, mut kt, mut ns, mut nt) = (0.0, 0.0, 0usize, 0usize);
    for (u, v) in sample_layout(samples) {
        let d = field.derivatives_in_cell(cell, s0 + u * (s1 - s0), t0 + v * (t1 - t0));
        if let Some(k) = curve_curvature(&d[1], &d[3]) {
            ks += k;
            ns += 1;
        }
        if let Some(k) = curve_curvature(&d[2], &d[5]) {
            kt += k;
            nt += 1;
        }
    }
    if ns == 0 && nt == 0 {
        return AnisotropyEstimate { ks: 0.0, kt: 0.0, rho: None, label: Split::C };
    }
    let ks = if ns > 0 { ks / ns as f64 } else { 0.0 };
    let kt = if nt > 0 { kt / nt as f64 } else { 0.0 };
    classify_ratio(ks, kt, delta, 1.0 / delta)
}

pub fn label_by_curvature(field: &SurfaceField, cells: &[CellId], delta: f64, samples: usize) -> BTreeMap<CellId, Split> {
    cells
        .par_iter()
        .map(|&c| (c, cell_anisotropy(field, c, delta, samples).label))
        .collect()
}

/// Largest distance from a data point in `cell` to the surface; 0 for an
/// empty cell.
pub fn max_cell_error(field: &SurfaceField, points: &ParamPointSet, cell: CellId, members: &[usize]) -> f64 {
    members
        .iter()
        .map(|&i| {
            let (s, t) = points.params[i];
            (field.derivatives_in_cell(cell, s, t)[0] - points.points[i]).norm()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VertexEstimate {
    /// Control points of the four anchored functions, slot order.
    pub controls: [Vector3<f64>; 4],
    /// Surface data `(S, S_s, S_t, S_st)` taken from the local fit.
    pub hermite: [Vector3<f64>; 4],
    pub fallback: Option<String>,
}

fn local_fit(
    points: &ParamPointSet,
    members: &[usize],
    sv: f64,
    tv: f64,
    hs: f64,
    ht: f64,
    quadratic: bool,
    radius: Option<f64>,
) -> Option<[Vector3<f64>; 4]> {
    let cols = if quadratic { 6 } else { 3 };
    if members.len() < cols {
        return None;
    }
    let mut a = DMatrix::zeros(members.len(), cols);
    let mut b = DMatrix::zeros(members.len(), 3);
    let mut wts = Vec::with_capacity(members.len());
    for (r, &i) in members.iter().enumerate() {
        let (s, t) = points.params[i];
        let (u, w) = ((s - sv) / hs, (t - tv) / ht);
        a[(r, 0)] = 1.0;
        a[(r, 1)] = u;
        a[(r, 2)] = w;
        if quadratic {
            a[(r, 3)] = u * u;
            a[(r, 4)] = u * w;
            a[(r, 5)] = w * w;
        }
        for k in 0..3 {
            b[(r, k)] = points.points[i][k];
        }
        wts.push(match radius {
            Some(rho) => {
                let d2 = ((s - sv).powi(2) + (t - tv).powi(2)) / (rho * rho);
                ((-d2).exp() + 1e-8).sqrt()
            }
            None => 1.0,
        });
    }
    // rank is decided on the point layout alone, weights only bias the fit
    let sv_geom = a.clone().singular_values();
    if !(sv_geom.min() > 1e-9 * sv_geom.max()) {
        return None;
    }
    for (r, &wr) in wts.iter().enumerate() {
        a.row_mut(r).scale_mut(wr);
        b.row_mut(r).scale_mut(wr);
    }
    let svd = a.svd(true, true);
    let c = svd.solve(&b, 1e-14 * svd.singular_values.max()).ok()?;
    let row = |k: usize| Vector3::new(c[(k, 0)], c[(k, 1)], c[(k, 2)]);
    let twist = if quadratic { row(4) / (hs * ht) } else { Vector3::zeros() };
    Some([row(0), row(1) / hs, row(2) / ht, twist])
}

/// Control points for the four functions anchored at basis vertex `p`.
pub fn estimate_vertex_controls(
    space: &SplineSpace,
    p: Point,
    points: &ParamPointSet,
    index: &HashMap<CellId, Vec<usize>>,
    radius: Option<f64>,
) -> Result<VertexEstimate, FitError> {
    let mesh = space.mesh();
    let (sv, tv) = mesh.real_point(p);
    let block = space.collocation_block(p)?;
    let w = block.widths;
    let hs = 0.5 * (w[0] + w[1]).max(f64::MIN_POSITIVE);
    let ht = 0.5 * (w[2] + w[3]).max(f64::MIN_POSITIVE);

    let mut cells: BTreeSet<CellId> = mesh.cells_around(p).into_iter().collect();
    let gather = |cells: &BTreeSet<CellId>| -> Vec<usize> {
        cells.iter().flat_map(|c| index.get(c).into_iter().flatten().copied()).collect()
    };
    let grow = |cells: &mut BTreeSet<CellId>| {
        let ring: Vec<CellId> = cells.iter().flat_map(|&c| mesh.neighbors(c)).collect();
        cells.extend(ring);
    };

    let mut fallback = None;
    let mut members = gather(&cells);
    let mut fit = local_fit(points, &members, sv, tv, hs, ht, true, radius);
    if fit.is_none() {
        grow(&mut cells);
        members = gather(&cells);
        fit = local_fit(points, &members, sv, tv, hs, ht, true, radius);
        if fit.is_some() {
            fallback = Some("quadratic fit on enlarged neighbourhood".to_string());
        }
    }
    let mut rings = 1;
    while fit.is_none() {
        fit = local_fit(points, &members, sv, tv, hs, ht, false, radius);
        if fit.is_some() {
            fallback = Some(format!("linear fit, {rings} extra ring(s), twist set to zero"));
            break;
        }
        let before = cells.len();
        grow(&mut cells);
        if cells.len() == before {
            break;
        }
        members = gather(&cells);
        rings += 1;
    }
    let hermite = fit.ok_or(FitError::Underdetermined(sv, tv))?;
    if let Some(msg) = &fallback {
        log::warn!("vertex ({sv}, {tv}): {msg}");
    }
    let inv = block.matrix.try_inverse().ok_or(SpaceError::SingularBlock(p.x, p.y))?;
    let mut controls = [Vector3::zeros(); 4];
    for (k, c) in controls.iter_mut().enumerate() {
        for j in 0..4 {
            *c += hermite[j] * inv[(k, j)];
        }
    }
    Ok(VertexEstimate { controls, hermite, fallback })
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub field: SurfaceField,
    pub report: AdaptiveReport,
    pub meshes: Vec<TMesh>,
    pub refinements: Vec<RefinementReport>,
}

fn estimate_new(
    space: &SplineSpace,
    first_new: usize,
    coeffs: &mut Vec<Vector3<f64>>,
    points: &ParamPointSet,
    index: &HashMap<CellId, Vec<usize>>,
    radius: Option<f64>,
    warnings: &mut Vec<String>,
) -> Result<(), FitError> {
    coeffs.resize(space.dim(), Vector3::zeros());
    let todo: Vec<(Point, [usize; 4])> =
        space.anchors().iter().filter(|(_, ids)| ids[0] >= first_new).map(|(p, ids)| (*p, *ids)).collect();
    let results: Vec<Result<VertexEstimate, FitError>> =
        todo.par_iter().map(|(p, _)| estimate_vertex_controls(space, *p, points, index, radius)).collect();
    for ((_, ids), r) in todo.iter().zip(results) {
        let est = r?;
        if let Some(msg) = est.fallback {
            warnings.push(msg);
        }
        for k in 0..4 {
            coeffs[ids[k]] = est.controls[k];
        }
    }
    Ok(())
}

/// Adaptive fit until every cell error is within `tolerance * diagonal` or
/// the level cap is reached.
pub fn fit_surface(points: &ParamPointSet, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate()?;
    if points.is_empty() {
        return Err(FitError::Empty);
    }
    let tol = config.tolerance * points.bbox_diagonal();
    let radius = (config.weight_radius > 0.0).then(|| config.weight_radius / (points.len() as f64).sqrt());
    let mesh = TMesh::tensor(config.grid.0, config.grid.1, [0.0, 1.0, 0.0, 1.0])?;
    let mut space = Arc::new(SplineSpace::new(mesh)?);
    let mut report = AdaptiveReport::default();
    let mut coeffs = Vec::new();
    let t_est = Instant::now();
    let mut index = points.index(space.mesh())?;
    estimate_new(&space, 0, &mut coeffs, points, &index, radius, &mut report.warnings)?;
    let mut est_time = t_est.elapsed().as_secs_f64();
    let mut meshes = vec![space.mesh().clone()];
    let mut refinements = Vec::new();
    let mut prev_dof = 0;
    let mut modified = 0;
    let mut prev_errors: HashMap<CellId, f64> = HashMap::new();

    loop {
        let field = SplineField::new(space.clone(), coeffs.clone())?;
        let t_err = Instant::now();
        let active: Vec<CellId> = space.mesh().active_cells().collect();
        let errors: Vec<(CellId, f64)> = active
            .par_iter()
            .map(|&c| (c, max_cell_error(&field, points, c, index.get(&c).map(|v| v.as_slice()).unwrap_or(&[]))))
            .collect();
        let total: f64 = index
            .par_iter()
            .map(|(&c, members)| {
                members
                    .iter()
                    .map(|&i| {
                        let (s, t) = points.params[i];
                        (field.derivatives_in_cell(c, s, t)[0] - points.points[i]).norm()
                    })
                    .sum::<f64>()
            })
            .sum();
        let max_err = errors.iter().map(|e| e.1).fold(0.0, f64::max);
        let empty = active.iter().filter(|c| !index.contains_key(c)).count();
        let err_time = t_err.elapsed().as_secs_f64();

        // per-cell error over refined cells should not grow
        for (&parent, &before) in &prev_errors {
            let kids = space.mesh().cells()[parent].children().to_vec();
            let after = errors.iter().filter(|(c, _)| kids.contains(c)).map(|e| e.1).fold(0.0, f64::max);
            if after > before * (1.0 + 1e-9) + 1e-15 {
                let msg = format!("level {}: error over cell {parent} grew from {before:e} to {after:e}", space.mesh().level());
                log::info!("{msg}");
                report.warnings.push(msg);
            }
        }
        if empty > 0 {
            log::debug!("{empty} active cells hold no data points");
        }

        let level = space.mesh().level();
        let mut rec = LevelRecord {
            level,
            dof: space.dim(),
            new_functions: space.dim() - prev_dof,
            modified_functions: modified,
            max_error: Some(max_err),
            mean_error: Some(total / points.len() as f64),
            timings: vec![("estimate".into(), est_time), ("error".into(), err_time)],
            ..Default::default()
        };
        if max_err <= tol {
            report.converged = true;
            report.levels.push(rec);
            break;
        }
        if level >= config.max_levels {
            report.levels.push(rec);
            break;
        }
        let markable: BTreeSet<CellId> = space.mesh().markable_cells().into_iter().collect();
        let marked: Vec<CellId> = errors.iter().filter(|e| e.1 > tol && markable.contains(&e.0)).map(|e| e.0).collect();
        let stale = errors.iter().filter(|e| e.1 > tol && !markable.contains(&e.0)).count();
        if stale > 0 {
            report.warnings.push(format!("level {level}: {stale} cells above tolerance belong to older levels"));
        }
        if marked.is_empty() {
            report.levels.push(rec);
            break;
        }
        let t_ref = Instant::now();
        let labels = match config.strategy {
            Strategy::Modified => label_by_curvature(&field, &marked, config.delta, config.samples),
            Strategy::CrossOnly => marked.iter().map(|&c| (c, Split::C)).collect(),
        };
        let (mesh1, rrep) = refine(space.mesh(), &config.strategy.request(labels))?;
        rec.marked = marked.len();
        rec.labels = rrep.label_histogram();
        let next = Arc::new(space.advance(&mesh1, &rrep)?);
        rec.timings.push(("refine".into(), t_ref.elapsed().as_secs_f64()));
        report.levels.push(rec);

        prev_errors = errors.into_iter().filter(|(c, _)| rrep.final_labels.contains_key(c)).collect();
        modified = next.modified_count(&space);
        prev_dof = space.dim();
        let first_new = space.dim();
        space = next;
        let t_est = Instant::now();
        index = points.index(space.mesh())?;
        estimate_new(&space, first_new, &mut coeffs, points, &index, radius, &mut report.warnings)?;
        est_time = t_est.elapsed().as_secs_f64();
        meshes.push(space.mesh().clone());
        refinements.push(rrep);
    }
    let field = SplineField::new(space, coeffs)?;
    Ok(FitResult { field, report, meshes, refinements })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestModel {
    Cone,
    Paraboloid,
    BernsteinExample,
}

impl TestModel {
    pub fn parse(s: &str) -> Option<TestModel> {
        match s {
            "cone" => Some(TestModel::Cone),
            "paraboloid" => Some(TestModel::Paraboloid),
            "bernstein" | "bernstein_example" => Some(TestModel::BernsteinExample),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestModel::Cone => "cone",
            TestModel::Paraboloid => "paraboloid",
            TestModel::BernsteinExample => "bernstein_example",
        }
    }

    /// Surface point at parameters `(u, v)`.
    pub fn point(self, u: f64, v: f64) -> Vector3<f64> {
        match self {
            // three-quarter cone, rulings along v
            TestModel::Cone => {
                let r = 0.2 + 0.8 * v;
                let phi = 1.5 * PI * u;
                Vector3::new(r * phi.cos(), r * phi.sin(), v)
            }
            // three-quarter paraboloid of revolution in polar parameters
            TestModel::Paraboloid => {
                let r = 0.2 + 0.8 * u;
                let phi = 1.5 * PI * v;
                Vector3::new(r * phi.cos(), r * phi.sin(), r * r)
            }
            TestModel::BernsteinExample => Vector3::new(u, v, bernstein_height(u, v)),
        }
    }
}

/// `B_{i,n}(x)`.
pub fn bernstein(i: u32, n: u32, x: f64) -> f64 {
    let mut c = 1.0;
    for k in 0..i {
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    c * x.powi(i as i32) * (1.0 - x).powi((n - i) as i32)
}

pub fn bernstein_height(u: f64, v: f64) -> f64 {
    let a = (120.0 * u).sin() * (2.0 * PI * u).sin();
    0.1 * (bernstein(0, 7, u) * a
        + bernstein(1, 7, u) * 2.0 * a
        + bernstein(7, 7, u) * (2.0 - 2.0 * (1.0 + 0.4 * (60.0 * v).sin()) * (2.0 * PI * v).cos().abs()))
}

/// Uniform `m x n` parameter grid sampled from a test model.
pub fn generate_test_model(model: TestModel, m: usize, n: usize) -> Result<ParamPointSet, FitError> {
    if m < 2 || n < 2 {
        return Err(FitError::Config(format!("grid must be at least 2x2, got {m}x{n}")));
    }
    let mut params = Vec::with_capacity(m * n);
    let mut pts = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            let (u, v) = (i as f64 / (m - 1) as f64, j as f64 / (n - 1) as f64);
            params.push((u, v));
            pts.push(model.point(u, v));
        }
    }
    ParamPointSet::new(params, pts)
}
