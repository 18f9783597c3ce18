//! Hierarchical C¹ bicubic spline spaces over T-meshes.
//!
//! Every basis vertex (boundary or crossing) anchors four functions. A
//! function is stored as one Bézier patch per support cell. Moving to the
//! next level splits the patches of subdivided cells, clears the corner
//! blocks sitting on the new basis vertices and adds four fresh functions per
//! new vertex, so old coefficients stay valid in the refined space.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bezier::{bernstein3, BezierPatch, Corner, CornerData, Ordinate};
use crate::mesh::{Bounds, CellId, CellState, MeshError, Point, Quadrant, Side, TMesh, VertexKind};
use crate::quadrature::gauss_legendre;
use crate::refine::RefinementReport;

pub type FunctionId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("initial space needs an unrefined tensor mesh")]
    NotInitialMesh,
    #[error("refinement report does not match the mesh: {0}")]
    MismatchedReport(String),
    #[error("collocation block at ({0}, {1}) is singular")]
    SingularBlock(i64, i64),
    #[error("({0}, {1}) is not a basis vertex of the space")]
    NotBasisVertex(i64, i64),
    #[error("coefficient vector has length {got}, space dimension is {want}")]
    DimensionMismatch { got: usize, want: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub anchor: Point,
    /// 0: L x L, 1: R x L, 2: L x R, 3: R x R (s factor first).
    pub slot: u8,
    pub birth_level: u32,
    /// Lattice box spanned by the cells around the anchor at birth.
    pub extent: Bounds,
    pub support: BTreeMap<CellId, BezierPatch>,
}

/// Collocation block at a basis vertex: column `k` holds
/// `(f, f_s, f_t, f_st)` of the function in slot `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocationBlock {
    pub vertex: Point,
    pub functions: [FunctionId; 4],
    pub matrix: Matrix4<f64>,
    /// Left, right, bottom and top real extents at the anchor.
    pub widths: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisValue {
    pub id: FunctionId,
    /// `f, f_s, f_t, f_ss, f_st, f_tt` in real parameter units.
    pub d: [f64; 6],
}

#[derive(Clone, Debug)]
pub struct SplineSpace {
    mesh: TMesh,
    functions: Vec<BasisFunction>,
    anchors: BTreeMap<Point, [FunctionId; 4]>,
    cell_functions: HashMap<CellId, Vec<FunctionId>>,
    /// Basis vertices whose surrounding cells do not form a tensor 2x2 (or
    /// 2x1 on the boundary) arrangement.
    irregular_anchors: Vec<Point>,
}

/// Univariate value and derivative at the knot for the (L, R) pair.
fn univariate_pair(hl: f64, hr: f64) -> [(f64, f64); 2] {
    let sum = hl + hr;
    let d = 3.0 / sum;
    [(hr / sum, -d), (hl / sum, d)]
}

fn corner_of(b: &Bounds, p: Point) -> Option<Corner> {
    match (p.x == b.x0, p.x == b.x1, p.y == b.y0, p.y == b.y1) {
        (true, _, true, _) => Some(Corner::SW),
        (_, true, true, _) => Some(Corner::SE),
        (true, _, _, true) => Some(Corner::NW),
        (_, true, _, true) => Some(Corner::NE),
        _ => None,
    }
}

impl SplineSpace {
    /// Tensor spline space with double knots on an unrefined mesh.
    pub fn new(mesh: TMesh) -> Result<SplineSpace, SpaceError> {
        if !mesh.log().is_empty() || mesh.level() != 0 || mesh.active_count() != mesh.ns() * mesh.nt() {
            return Err(SpaceError::NotInitialMesh);
        }
        let mut space = SplineSpace {
            mesh,
            functions: Vec::new(),
            anchors: BTreeMap::new(),
            cell_functions: HashMap::new(),
            irregular_anchors: Vec::new(),
        };
        let pts: Vec<Point> = space.mesh.basis_vertices().iter().map(|&v| space.mesh.vertices()[v].pos).collect();
        for p in pts {
            space.add_anchor(p);
        }
        space.rebuild_index();
        Ok(space)
    }

    pub fn mesh(&self) -> &TMesh {
        &self.mesh
    }

    pub fn dim(&self) -> usize {
        self.functions.len()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn function(&self, id: FunctionId) -> &BasisFunction {
        &self.functions[id]
    }

    pub fn anchors(&self) -> &BTreeMap<Point, [FunctionId; 4]> {
        &self.anchors
    }

    pub fn irregular_anchors(&self) -> &[Point] {
        &self.irregular_anchors
    }

    /// Functions with a patch on an active cell.
    pub fn cell_functions(&self, c: CellId) -> &[FunctionId] {
        self.cell_functions.get(&c).map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn rebuild_index(&mut self) {
        self.cell_functions.clear();
        for (id, f) in self.functions.iter().enumerate() {
            for &c in f.support.keys() {
                self.cell_functions.entry(c).or_default().push(id);
            }
        }
    }

    /// Lattice extents (left, right, bottom, top) of the cells around `p`,
    /// together with those cells.
    fn neighbourhood(&self, p: Point) -> ([i64; 4], Vec<(CellId, Corner)>, bool) {
        let mesh = &self.mesh;
        let mut ext = [i64::MAX; 4];
        let mut cells = Vec::new();
        let mut regular = true;
        let mut seen = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for c in mesh.cells_around(p) {
            let b = mesh.cells()[c].bounds;
            match corner_of(&b, p) {
                Some(corner) => cells.push((c, corner)),
                None => {
                    regular = false;
                    continue;
                }
            }
            if b.x1 == p.x {
                seen[0].push(b.width());
            }
            if b.x0 == p.x {
                seen[1].push(b.width());
            }
            if b.y1 == p.y {
                seen[2].push(b.height());
            }
            if b.y0 == p.y {
                seen[3].push(b.height());
            }
        }
        for k in 0..4 {
            if seen[k].is_empty() {
                ext[k] = 0;
            } else {
                ext[k] = *seen[k].iter().min().unwrap();
                if seen[k].iter().any(|&w| w != ext[k]) {
                    regular = false;
                }
            }
        }
        (ext, cells, regular)
    }

    fn real_widths(&self, p: Point, ext: [i64; 4]) -> [f64; 4] {
        let m = &self.mesh;
        let (s, t) = m.real_point(p);
        [
            s - m.s_of(p.x - ext[0]),
            m.s_of(p.x + ext[1]) - s,
            t - m.t_of(p.y - ext[2]),
            m.t_of(p.y + ext[3]) - t,
        ]
    }

    /// Hermite data `(f, f_s, f_t, f_st)` of the four anchored functions.
    fn anchor_data(w: [f64; 4]) -> [CornerData; 4] {
        let us = univariate_pair(w[0], w[1]);
        let ut = univariate_pair(w[2], w[3]);
        let mut out = [CornerData { f: 0.0, fs: 0.0, ft: 0.0, fst: 0.0 }; 4];
        for (slot, o) in out.iter_mut().enumerate() {
            let (sv, sd) = us[slot % 2];
            let (tv, td) = ut[slot / 2];
            *o = CornerData { f: sv * tv, fs: sd * tv, ft: sv * td, fst: sd * td };
        }
        out
    }

    fn add_anchor(&mut self, p: Point) {
        let (ext, cells, regular) = self.neighbourhood(p);
        if !regular {
            log::warn!("basis vertex ({}, {}) has an irregular neighbourhood", p.x, p.y);
            self.irregular_anchors.push(p);
        }
        let widths = self.real_widths(p, ext);
        let data = Self::anchor_data(widths);
        let extent = Bounds::new(p.x - ext[0], p.x + ext[1], p.y - ext[2], p.y + ext[3]);
        let base = self.functions.len();
        for (slot, d) in data.iter().enumerate() {
            let mut support = BTreeMap::new();
            for &(c, corner) in &cells {
                let [s0, s1, t0, t1] = self.mesh.cell_rect(c);
                let mut patch = BezierPatch::zero();
                patch.set_corner_data(corner, s1 - s0, t1 - t0, d);
                if !patch.is_zero() {
                    support.insert(c, patch);
                }
            }
            self.functions.push(BasisFunction {
                anchor: p,
                slot: slot as u8,
                birth_level: self.mesh.level(),
                extent,
                support,
            });
        }
        self.anchors.insert(p, [base, base + 1, base + 2, base + 3]);
    }

    fn check_report(&self, mesh: &TMesh, report: &RefinementReport) -> Result<(), SpaceError> {
        let old = &self.mesh;
        let bad = |m: &str| Err(SpaceError::MismatchedReport(m.to_string()));
        if report.level != old.level() {
            return bad("report level differs from the space level");
        }
        if mesh.log().len() != old.log().len() + 1 || mesh.log()[..old.log().len()] != *old.log() {
            return bad("mesh is not a one-pass refinement of the space mesh");
        }
        if mesh.s_knots() != old.s_knots() || mesh.t_knots() != old.t_knots() {
            return bad("knot lines differ");
        }
        let entry = mesh.log().last().unwrap();
        if entry.splits.len() != report.subdivisions.len() {
            return bad("subdivision count differs");
        }
        for (rec, &(c, split)) in report.subdivisions.iter().zip(&entry.splits) {
            if rec.cell != c || rec.split != split {
                return bad("subdivision order differs");
            }
            if !old.cell(c)?.is_active() {
                return bad("subdivided cell was not active");
            }
            match &mesh.cell(c)?.state {
                CellState::Subdivided { split: s, children } if *s == split && *children == rec.children => {}
                _ => return bad("cell state differs"),
            }
        }
        Ok(())
    }

    /// Space on `mesh`, the result of refining this space's mesh as
    /// described by `report`.
    pub fn advance(&self, mesh: &TMesh, report: &RefinementReport) -> Result<SplineSpace, SpaceError> {
        if report.is_empty() {
            if !mesh.same_structure(&self.mesh) {
                return Err(SpaceError::MismatchedReport("empty report but the mesh changed".into()));
            }
            let mut out = self.clone();
            out.mesh = mesh.clone();
            return Ok(out);
        }
        self.check_report(mesh, report)?;
        let mut out = self.clone();
        out.mesh = mesh.clone();

        for rec in &report.subdivisions {
            let ids = self.cell_functions(rec.cell).to_vec();
            for id in ids {
                let f = &mut out.functions[id];
                let patch = f.support.remove(&rec.cell).expect("indexed patch");
                for (child, piece) in rec.children.iter().zip(patch.split(rec.split)) {
                    if !piece.is_zero() {
                        f.support.insert(*child, piece);
                    }
                }
            }
        }
        out.rebuild_index();

        let new_anchors: Vec<Point> = out
            .mesh
            .basis_vertices()
            .into_iter()
            .map(|v| out.mesh.vertices()[v].pos)
            .filter(|p| !self.anchors.contains_key(p))
            .collect();
        for &p in &new_anchors {
            for c in out.mesh.cells_around(p) {
                let b = out.mesh.cells()[c].bounds;
                let Some(corner) = corner_of(&b, p) else { continue };
                for &id in out.cell_functions.get(&c).map(|v| v.as_slice()).unwrap_or(&[]) {
                    let f = &mut out.functions[id];
                    let Some(patch) = f.support.get(&c) else { continue };
                    let z = patch.zero_corner_block(corner);
                    if z.is_zero() {
                        f.support.remove(&c);
                    } else {
                        f.support.insert(c, z);
                    }
                }
            }
        }
        for p in new_anchors {
            out.add_anchor(p);
        }
        out.rebuild_index();
        Ok(out)
    }

    /// Values and derivatives of every function supported on `cell` at the
    /// real point `(s, t)`.
    pub fn eval_in_cell(&self, cell: CellId, s: f64, t: f64) -> Vec<BasisValue> {
        let [s0, s1, t0, t1] = self.mesh.cell_rect(cell);
        let (w, h) = (s1 - s0, t1 - t0);
        let (u, v) = ((s - s0) / w, (t - t0) / h);
        let bu = [bernstein3(u, 0), bernstein3(u, 1), bernstein3(u, 2)];
        let bv = [bernstein3(v, 0), bernstein3(v, 1), bernstein3(v, 2)];
        let scale = [1.0, 1.0 / w, 1.0 / h, 1.0 / (w * w), 1.0 / (w * h), 1.0 / (h * h)];
        const ORDERS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];
        self.cell_functions(cell)
            .iter()
            .map(|&id| {
                let p = &self.functions[id].support[&cell];
                let mut d = [0.0; 6];
                for (k, &(a, b)) in ORDERS.iter().enumerate() {
                    d[k] = p.eval_unchecked(&bu[a], &bv[b]) * scale[k];
                }
                BasisValue { id, d }
            })
            .collect()
    }

    /// Non-zero basis functions at `(s, t)`.
    pub fn evaluate(&self, s: f64, t: f64) -> Result<Vec<BasisValue>, SpaceError> {
        let c = self.mesh.locate(s, t)?;
        Ok(self.eval_in_cell(c, s, t))
    }

    pub fn collocation_block(&self, p: Point) -> Result<CollocationBlock, SpaceError> {
        let ids = *self.anchors.get(&p).ok_or(SpaceError::NotBasisVertex(p.x, p.y))?;
        let e = self.functions[ids[0]].extent;
        let widths = self.real_widths(p, [p.x - e.x0, e.x1 - p.x, p.y - e.y0, e.y1 - p.y]);
        let data = Self::anchor_data(widths);
        let mut m = Matrix4::zeros();
        for (k, d) in data.iter().enumerate() {
            m.set_column(k, &Vector4::from(d.as_array()));
        }
        Ok(CollocationBlock { vertex: p, functions: ids, matrix: m, widths })
    }

    /// Hermite data of a field at a lattice vertex, read from the first
    /// available incident cell (NE, NW, SE, SW).
    pub fn hermite_at<T: Ordinate>(&self, p: Point, coeffs: &[T]) -> [T; 4] {
        for q in [Quadrant::NE, Quadrant::NW, Quadrant::SE, Quadrant::SW] {
            if let Some(c) = self.mesh.quadrant_cell(p, q) {
                return self.hermite_in_cell(c, p, coeffs);
            }
        }
        [T::zero(); 4]
    }

    /// Hermite data at a corner `p` of `cell`, evaluated from that cell's patches.
    pub fn hermite_in_cell<T: Ordinate>(&self, cell: CellId, p: Point, coeffs: &[T]) -> [T; 4] {
        let b = self.mesh.cells()[cell].bounds;
        let Some(corner) = corner_of(&b, p) else {
            // p on a side or inside: evaluate directly
            let (s, t) = self.mesh.real_point(p);
            let mut acc = [T::zero(); 4];
            for bv in self.eval_in_cell(cell, s, t) {
                for (k, idx) in [0usize, 1, 2, 4].iter().enumerate() {
                    acc[k] = acc[k] + coeffs[bv.id] * bv.d[*idx];
                }
            }
            return acc;
        };
        let [s0, s1, t0, t1] = self.mesh.cell_rect(cell);
        let mut acc = [T::zero(); 4];
        for &id in self.cell_functions(cell) {
            let d = self.functions[id].support[&cell]
                .corner_data(corner, s1 - s0, t1 - t0)
                .expect("positive cell size");
            for (k, x) in d.as_array().iter().enumerate() {
                acc[k] = acc[k] + coeffs[id] * *x;
            }
        }
        acc
    }

    /// Coefficients whose field carries the prescribed Hermite data at every
    /// basis vertex. `data(s, t)` returns `(f, f_s, f_t, f_st)`.
    pub fn hermite_coefficients<T: Ordinate>(
        &self,
        mut data: impl FnMut(f64, f64) -> [T; 4],
    ) -> Result<Vec<T>, SpaceError> {
        let mut out = vec![T::zero(); self.dim()];
        for &p in self.anchors.keys() {
            let (s, t) = self.mesh.real_point(p);
            let target = data(s, t);
            self.solve_block(p, target, &mut out)?;
        }
        Ok(out)
    }

    fn solve_block<T: Ordinate>(&self, p: Point, target: [T; 4], out: &mut [T]) -> Result<(), SpaceError> {
        let block = self.collocation_block(p)?;
        let inv = block.matrix.try_inverse().ok_or(SpaceError::SingularBlock(p.x, p.y))?;
        if !inv.iter().all(|x| x.is_finite()) {
            return Err(SpaceError::SingularBlock(p.x, p.y));
        }
        for k in 0..4 {
            let mut c = T::zero();
            for (j, tj) in target.iter().enumerate() {
                c = c + *tj * inv[(k, j)];
            }
            out[block.functions[k]] = c;
        }
        Ok(())
    }

    /// Coefficients in this space of a field given in `coarse`, a space this
    /// one was advanced from. Old coefficients are kept; only the functions
    /// anchored at new vertices receive values.
    pub fn prolong<T: Ordinate>(&self, coarse: &SplineSpace, coeffs: &[T]) -> Result<Vec<T>, SpaceError> {
        if coeffs.len() != coarse.dim() {
            return Err(SpaceError::DimensionMismatch { got: coeffs.len(), want: coarse.dim() });
        }
        let mut out = coeffs.to_vec();
        out.resize(self.dim(), T::zero());
        for (&p, ids) in &self.anchors {
            if ids[0] < coarse.dim() {
                continue;
            }
            let mut target = coarse.hermite_at(p, coeffs);
            // subtract what the old functions already carry at p in the fine space
            let carried = self.hermite_at(p, &out);
            for k in 0..4 {
                target[k] = target[k] - carried[k];
            }
            self.solve_block(p, target, &mut out)?;
        }
        Ok(out)
    }

    /// Number of `coarse` functions whose patches differ in this space.
    pub fn modified_count(&self, coarse: &SplineSpace) -> usize {
        coarse
            .functions
            .iter()
            .zip(&self.functions)
            .filter(|(a, b)| a.support != b.support)
            .count()
    }

    /// Gram matrix of the basis by tensor Gauss quadrature (exact for bicubics).
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = DMatrix::zeros(n, n);
        let (x, w) = gauss_legendre(4);
        for c in self.mesh.active_cells() {
            let [s0, s1, t0, t1] = self.mesh.cell_rect(c);
            let area = (s1 - s0) * (t1 - t0);
            for (i, &u) in x.iter().enumerate() {
                for (j, &v) in x.iter().enumerate() {
                    let vals = self.eval_in_cell(c, s0 + u * (s1 - s0), t0 + v * (t1 - t0));
                    let wt = w[i] * w[j] * area;
                    for a in &vals {
                        for b in &vals {
                            g[(a.id, b.id)] += wt * a.d[0] * b.d[0];
                        }
                    }
                }
            }
        }
        g
    }

    /// Numerical checks of the basis: partition of unity, sign, C¹ seams,
    /// Hermite round trip, supports and dimension count.
    pub fn verify(&self, samples: usize, seed: u64) -> SpaceReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [s0, s1, t0, t1] = self.mesh.domain();
        let mut unity: f64 = 0.0;
        let mut min_value = f64::INFINITY;
        for _ in 0..samples {
            let s = rng.gen_range(s0..=s1);
            let t = rng.gen_range(t0..=t1);
            let Ok(vals) = self.evaluate(s, t) else { continue };
            let sum: f64 = vals.iter().map(|b| b.d[0]).sum();
            unity = unity.max((sum - 1.0).abs());
            for b in &vals {
                min_value = min_value.min(b.d[0]);
            }
        }
        if min_value == f64::INFINITY {
            min_value = 0.0;
        }

        let c1_jump = self.max_seam_jump(&mut rng);

        let data: BTreeMap<Point, [f64; 4]> =
            self.anchors.keys().map(|&p| (p, [0; 4].map(|_: i32| rng.gen_range(-1.0..1.0)))).collect();
        let mut roundtrip: f64 = 0.0;
        let ok_coeffs = (|| {
            let mut out = vec![0.0; self.dim()];
            for (&p, &d) in &data {
                self.solve_block(p, d, &mut out)?;
            }
            Ok::<_, SpaceError>(out)
        })();
        let singular = ok_coeffs.is_err();
        if let Ok(coeffs) = ok_coeffs {
            for (&p, d) in &data {
                for c in self.mesh.cells_around(p) {
                    let got = self.hermite_in_cell(c, p, &coeffs);
                    for k in 0..4 {
                        roundtrip = roundtrip.max((got[k] - d[k]).abs() / (1.0 + d[k].abs()));
                    }
                }
            }
        }

        let mut bad_supports = Vec::new();
        for (id, f) in self.functions.iter().enumerate() {
            if !self.support_is_sound(f) {
                bad_supports.push(id);
            }
        }

        SpaceReport {
            dimension: self.dim(),
            expected_dimension: self.mesh.dimension(),
            max_unity_error: unity,
            min_value,
            max_c1_jump: c1_jump,
            max_roundtrip_error: if singular { f64::INFINITY } else { roundtrip },
            bad_supports,
            irregular_anchors: self.irregular_anchors.len(),
        }
    }

    fn support_is_sound(&self, f: &BasisFunction) -> bool {
        if f.support.is_empty() {
            return false;
        }
        let cells: BTreeSet<CellId> = f.support.keys().copied().collect();
        let mesh = &self.mesh;
        for &c in &cells {
            let b = mesh.cells()[c].bounds;
            if !mesh.cells()[c].is_active()
                || b.x0 < f.extent.x0
                || b.x1 > f.extent.x1
                || b.y0 < f.extent.y0
                || b.y1 > f.extent.y1
            {
                return false;
            }
        }
        // edge-connected through shared sides
        let start = *cells.iter().next().unwrap();
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            for n in mesh.neighbors(c) {
                if cells.contains(&n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen.len() == cells.len()
    }

    /// Largest jump of value or gradient of any basis function across a
    /// shared cell side, sampled at interior points of each shared segment.
    fn max_seam_jump(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mesh = &self.mesh;
        let mut worst: f64 = 0.0;
        for c in mesh.active_cells().collect::<Vec<_>>() {
            let b = mesh.cells()[c].bounds;
            for side in [Side::Right, Side::Top] {
                for n in mesh.side_neighbors(c, side) {
                    let nb = mesh.cells()[n].bounds;
                    for _ in 0..3 {
                        let frac: f64 = rng.gen_range(0.05..0.95);
                        let (s, t) = match side {
                            Side::Right => {
                                let (lo, hi) = (b.y0.max(nb.y0), b.y1.min(nb.y1));
                                (mesh.s_of(b.x1), mesh.t_of(lo) + frac * (mesh.t_of(hi) - mesh.t_of(lo)))
                            }
                            _ => {
                                let (lo, hi) = (b.x0.max(nb.x0), b.x1.min(nb.x1));
                                (mesh.s_of(lo) + frac * (mesh.s_of(hi) - mesh.s_of(lo)), mesh.t_of(b.y1))
                            }
                        };
                        let a: HashMap<FunctionId, [f64; 6]> =
                            self.eval_in_cell(c, s, t).into_iter().map(|v| (v.id, v.d)).collect();
                        let z: HashMap<FunctionId, [f64; 6]> =
                            self.eval_in_cell(n, s, t).into_iter().map(|v| (v.id, v.d)).collect();
                        let ids: BTreeSet<FunctionId> = a.keys().chain(z.keys()).copied().collect();
                        for id in ids {
                            let da = a.get(&id).copied().unwrap_or([0.0; 6]);
                            let dz = z.get(&id).copied().unwrap_or([0.0; 6]);
                            for k in 0..3 {
                                worst = worst.max((da[k] - dz[k]).abs());
                            }
                        }
                    }
                }
            }
        }
        worst
    }

    /// Vertex kinds are recomputed from the mesh; exposed for diagnostics.
    /// Corrupt one interior Bézier ordinate of the first function so that the
    /// partition of unity breaks; lets callers check that verification fails.
    #[doc(hidden)]
    pub fn inject_fault(&mut self) {
        if let Some(patch) = self.functions.first_mut().and_then(|f| f.support.values_mut().next()) {
            patch.b[1][1] += 0.25;
        }
    }

    pub fn anchor_kind(&self, p: Point) -> Option<VertexKind> {
        self.mesh.vertex_at(p).and_then(|v| self.mesh.classify_vertex(v).ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceReport {
    pub dimension: usize,
    pub expected_dimension: usize,
    pub max_unity_error: f64,
    pub min_value: f64,
    pub max_c1_jump: f64,
    pub max_roundtrip_error: f64,
    pub bad_supports: Vec<FunctionId>,
    pub irregular_anchors: usize,
}

impl SpaceReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.dimension == self.expected_dimension
            && self.max_unity_error <= tol
            && self.min_value >= -tol
            && self.max_c1_jump <= tol
            && self.max_roundtrip_error <= tol
            && self.bad_supports.is_empty()
    }
}

/// A spline-valued field: coefficients over a shared space.
#[derive(Clone, Debug)]
pub struct SplineField<T: Ordinate = f64> {
    pub space: Arc<SplineSpace>,
    pub coefficients: Vec<T>,
}

impl<T: Ordinate> SplineField<T> {
    pub fn new(space: Arc<SplineSpace>, coefficients: Vec<T>) -> Result<Self, SpaceError> {
        if coefficients.len() != space.dim() {
            return Err(SpaceError::DimensionMismatch { got: coefficients.len(), want: space.dim() });
        }
        Ok(SplineField { space, coefficients })
    }

    /// Field interpolating Hermite data at all basis vertices.
    pub fn from_hermite(space: Arc<SplineSpace>, data: impl FnMut(f64, f64) -> [T; 4]) -> Result<Self, SpaceError> {
        let coefficients = space.hermite_coefficients(data)?;
        Ok(SplineField { space, coefficients })
    }

    /// `f, f_s, f_t, f_ss, f_st, f_tt` at `(s, t)`.
    pub fn derivatives(&self, s: f64, t: f64) -> Result<[T; 6], SpaceError> {
        let c = self.space.mesh().locate(s, t)?;
        Ok(self.derivatives_in_cell(c, s, t))
    }

    pub fn derivatives_in_cell(&self, cell: CellId, s: f64, t: f64) -> [T; 6] {
        let mut acc = [T::zero(); 6];
        for b in self.space.eval_in_cell(cell, s, t) {
            let c = self.coefficients[b.id];
            for k in 0..6 {
                acc[k] = acc[k] + c * b.d[k];
            }
        }
        acc
    }

    pub fn value(&self, s: f64, t: f64) -> Result<T, SpaceError> {
        let c = self.space.mesh().locate(s, t)?;
        let mut acc = T::zero();
        for b in self.space.eval_in_cell(c, s, t) {
            acc = acc + self.coefficients[b.id] * b.d[0];
        }
        Ok(acc)
    }

    /// The same field expressed in a space advanced from this one's.
    pub fn prolong(&self, fine: Arc<SplineSpace>) -> Result<Self, SpaceError> {
        let coefficients = fine.prolong(&self.space, &self.coefficients)?;
        Ok(SplineField { space: fine, coefficients })
    }

    /// Ordinates of the field on one cell as a single Bézier patch.
    pub fn cell_patch(&self, cell: CellId) -> BezierPatch<T> {
        let mut p = BezierPatch::zero();
        for &id in self.space.cell_functions(cell) {
            let q = &self.space.functions[id].support[&cell];
            let c = self.coefficients[id];
            for i in 0..4 {
                for j in 0..4 {
                    p.b[i][j] = p.b[i][j] + c * q.b[i][j];
                }
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Split, UNIT};
    use crate::refine::{naive_refine, refine, RefinementRequest};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Cox–de Boor evaluation of a cubic B-spline on a 5-knot vector with
    /// its first derivative.
    fn bspline(knots: &[f64; 5], x: f64) -> (f64, f64) {
        fn n(k: &[f64], i: usize, p: usize, x: f64) -> f64 {
            if p == 0 {
                let right_end = x == k[k.len() - 1] && k[i + 1] == k[k.len() - 1] && k[i] < k[i + 1];
                return if (k[i] <= x && x < k[i + 1]) || right_end { 1.0 } else { 0.0 };
            }
            let mut v = 0.0;
            if k[i + p] > k[i] {
                v += (x - k[i]) / (k[i + p] - k[i]) * n(k, i, p - 1, x);
            }
            if k[i + p + 1] > k[i + 1] {
                v += (k[i + p + 1] - x) / (k[i + p + 1] - k[i + 1]) * n(k, i + 1, p - 1, x);
            }
            v
        }
        let val = n(knots, 0, 3, x);
        let mut d = 0.0;
        if knots[3] > knots[0] {
            d += 3.0 / (knots[3] - knots[0]) * n(knots, 0, 2, x);
        }
        if knots[4] > knots[1] {
            d -= 3.0 / (knots[4] - knots[1]) * n(knots, 1, 2, x);
        }
        (val, d)
    }

    fn knot_column(x: f64, hl: f64, hr: f64) -> [(f64, f64); 2] {
        let l = [x - hl, x - hl, x, x, x + hr];
        let r = [x - hl, x, x, x + hr, x + hr];
        [bspline(&l, x), bspline(&r, x)]
    }

    #[test]
    fn collocation_block_matches_knot_formulas() {
        let mesh = TMesh::with_knots(vec![0.0, 0.3, 1.0, 1.2], vec![0.0, 0.5, 0.6]).unwrap();
        let space = SplineSpace::new(mesh.clone()).unwrap();
        for (&p, _) in space.anchors() {
            let b = space.collocation_block(p).unwrap();
            let [hl, hr, hb, ht] = b.widths;
            let (s, t) = mesh.real_point(p);
            if hr == 0.0 || ht == 0.0 {
                continue;
            }
            let us = knot_column(s, hl, hr);
            let ut = knot_column(t, hb, ht);
            for slot in 0..4 {
                let (sv, sd) = us[slot % 2];
                let (tv, td) = ut[slot / 2];
                let want = [sv * tv, sd * tv, sv * td, sd * td];
                for k in 0..4 {
                    assert_abs_diff_eq!(b.matrix[(k, slot)], want[k], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn collocation_matches_direct_hermite() {
        let mesh = TMesh::with_knots(vec![0.0, 0.25, 1.0], vec![0.0, 2.0, 3.0]).unwrap();
        let space = SplineSpace::new(mesh).unwrap();
        for (&p, ids) in space.anchors() {
            let b = space.collocation_block(p).unwrap();
            for c in space.mesh().cells_around(p) {
                for (k, &id) in ids.iter().enumerate() {
                    let mut e = vec![0.0; space.dim()];
                    e[id] = 1.0;
                    let h = space.hermite_in_cell(c, p, &e);
                    for r in 0..4 {
                        assert_abs_diff_eq!(h[r], b.matrix[(r, k)], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn initial_space_is_tensor_bspline() {
        let mesh = TMesh::tensor(3, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let space = SplineSpace::new(mesh).unwrap();
        assert_eq!(space.dim(), 4 * 4 * 3);
        let r = space.verify(500, 1);
        assert!(r.passes(1e-12), "{r:?}");
        // 1D check against Cox–de Boor on the double-knot vector
        let id = space.anchors()[&Point::new(UNIT, 0)][0];
        for k in 0..20 {
            let s = k as f64 / 19.0;
            let t = 0.05;
            let vals = space.evaluate(s, t).unwrap();
            let got = vals.iter().find(|b| b.id == id).map(|b| b.d[0]).unwrap_or(0.0);
            let third = 1.0 / 3.0;
            let (bs, _) = bspline(&[0.0, 0.0, third, third, 2.0 * third], s);
            let (bt, _) = bspline(&[0.0, 0.0, 0.0, 0.0, 0.5], t);
            assert_abs_diff_eq!(got, bs * bt, epsilon = 1e-13);
        }
    }

    #[test]
    fn refuses_refined_mesh() {
        let mut mesh = TMesh::tensor(1, 1, [0.0, 1.0, 0.0, 1.0]).unwrap();
        mesh.split_cell(0, Split::C).unwrap();
        mesh.commit_level();
        assert_eq!(SplineSpace::new(mesh).unwrap_err(), SpaceError::NotInitialMesh);
    }

    fn advance(space: &SplineSpace, labels: &[(CellId, Split)]) -> SplineSpace {
        let req = RefinementRequest::new(labels.iter().copied().collect());
        let (mesh, report) = refine(space.mesh(), &req).unwrap();
        space.advance(&mesh, &report).unwrap()
    }

    #[test]
    fn single_cross_split() {
        let mesh = TMesh::tensor(2, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let s0 = SplineSpace::new(mesh).unwrap();
        let s1 = advance(&s0, &[(0, Split::C)]);
        assert_eq!(s1.dim(), s1.mesh().dimension());
        assert_eq!(s1.dim(), s0.dim() + 12);
        let r = s1.verify(1000, 2);
        assert!(r.passes(1e-11), "{r:?}");
    }

    #[test]
    fn anisotropic_levels_stay_valid() {
        let mesh = TMesh::with_knots(vec![0.0, 0.4, 1.0, 1.5], vec![0.0, 1.0, 1.8]).unwrap();
        let mut space = SplineSpace::new(mesh).unwrap();
        let script: Vec<Vec<(CellId, Split)>> = vec![
            vec![(0, Split::V), (1, Split::V), (3, Split::H), (4, Split::C)],
            vec![],
            vec![],
        ];
        for (level, labels) in script.into_iter().enumerate() {
            let labels = if labels.is_empty() {
                let m = space.mesh().markable_cells();
                m.iter().take(5).enumerate().map(|(k, &c)| (c, [Split::H, Split::V, Split::C][k % 3])).collect()
            } else {
                labels
            };
            let next = advance(&space, &labels);
            let r = next.verify(800, level as u64);
            assert!(r.passes(1e-10), "level {level}: {r:?}");
            space = next;
        }
    }

    #[test]
    fn prolongation_keeps_the_field() {
        let mesh = TMesh::tensor(3, 3, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let s0 = Arc::new(SplineSpace::new(mesh).unwrap());
        let f = |s: f64, t: f64| [(3.0 * s).sin() * t, 3.0 * (3.0 * s).cos() * t, (3.0 * s).sin(), 3.0 * (3.0 * s).cos()];
        let field = SplineField::from_hermite(s0.clone(), f).unwrap();
        let s1 = Arc::new(advance(&s0, &[(0, Split::C), (4, Split::V), (5, Split::H)]));
        let fine = field.prolong(s1.clone()).unwrap();
        assert_eq!(&fine.coefficients[..s0.dim()], &field.coefficients[..]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let (s, t) = (rng.gen::<f64>(), rng.gen::<f64>());
            assert_abs_diff_eq!(fine.value(s, t).unwrap(), field.value(s, t).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn hermite_interpolation_reproduces_bicubics() {
        let mesh = TMesh::with_knots(vec![0.0, 0.3, 1.0], vec![0.0, 0.6, 1.0]).unwrap();
        let s0 = SplineSpace::new(mesh).unwrap();
        let s1 = Arc::new(advance(&s0, &[(0, Split::C), (3, Split::H)]));
        let g = |s: f64, t: f64| 1.0 + s - 2.0 * t + s * s * t + s.powi(3) * t.powi(3);
        let data = |s: f64, t: f64| {
            [
                g(s, t),
                1.0 + 2.0 * s * t + 3.0 * s * s * t.powi(3),
                -2.0 + s * s + 3.0 * s.powi(3) * t * t,
                2.0 * s + 9.0 * s * s * t * t,
            ]
        };
        let field = SplineField::from_hermite(s1, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let (s, t) = (rng.gen::<f64>(), rng.gen::<f64>());
            assert_abs_diff_eq!(field.value(s, t).unwrap(), g(s, t), epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_matrix_full_rank() {
        let mesh = TMesh::tensor(2, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let s0 = SplineSpace::new(mesh).unwrap();
        let s1 = advance(&s0, &[(0, Split::C), (1, Split::V), (3, Split::H)]);
        let g = s1.gram_matrix();
        let sv = g.singular_values();
        let (mx, mn) = (sv.max(), sv.min());
        assert!(mn / mx > 1e-12, "{mn} / {mx}");
    }

    #[test]
    fn mismatched_report_rejected() {
        let mesh = TMesh::tensor(2, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let s0 = SplineSpace::new(mesh).unwrap();
        let (m1, r1) = refine(s0.mesh(), &RefinementRequest::uniform(&[0], Split::C)).unwrap();
        let (_, r_other) = refine(s0.mesh(), &RefinementRequest::uniform(&[1], Split::H)).unwrap();
        assert!(matches!(s0.advance(&m1, &r_other), Err(SpaceError::MismatchedReport(_))));
        let s1 = s0.advance(&m1, &r1).unwrap();
        assert!(matches!(s1.advance(&m1, &r1), Err(SpaceError::MismatchedReport(_))));
        assert!(s0.collocation_block(Point::new(1, 1)).is_err());
    }

    #[test]
    fn naive_cross_only_refinement_also_spans() {
        let mesh = TMesh::tensor(3, 3, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let s0 = SplineSpace::new(mesh).unwrap();
        let labels: BTreeMap<CellId, Split> = [(0, Split::C), (4, Split::C), (8, Split::C)].into_iter().collect();
        let (m1, r1) = naive_refine(s0.mesh(), &labels).unwrap();
        let s1 = s0.advance(&m1, &r1).unwrap();
        let r = s1.verify(500, 3);
        assert!(r.passes(1e-11), "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_refinements_keep_basis_properties(seed in 0u64..10_000, levels in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mesh = TMesh::tensor(3, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
            let mut space = SplineSpace::new(mesh).unwrap();
            for _ in 0..levels {
                let cells = space.mesh().markable_cells();
                let mut labels = BTreeMap::new();
                for c in cells {
                    if rng.gen_bool(0.4) {
                        labels.insert(c, [Split::H, Split::V, Split::C][rng.gen_range(0..3)]);
                    }
                }
                let (m, r) = refine(space.mesh(), &RefinementRequest::new(labels)).unwrap();
                space = space.advance(&m, &r).unwrap();
            }
            let rep = space.verify(300, seed);
            prop_assert!(rep.passes(1e-10), "{:?}", rep);
        }
    }
}
