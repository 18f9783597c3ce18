//! Readers and writers for mesh JSON, spline JSON, point sets, OBJ surfaces
//! and VTK solution fields. Byte-level layouts are documented in
//! `docs/FORMATS.md`.

use std::fmt::Write as _;
use std::path::Path;

use anisoline::bezier::BezierPatch;
use anisoline::fitting::{ParamPointSet, SurfaceField};
use anisoline::iga::DiscreteSolution;
use anisoline::iga::ScalarFn;
use anisoline::mesh::{dyadic_string, parse_dyadic, CellState, Split, TMesh};
use anisoline::space::SplineField;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellJson {
    pub id: usize,
    /// `[x0, x1, y0, y1]` as dyadic numbers in level-0 interval units.
    pub bounds: [String; 4],
    pub level: u32,
    /// `"active"` or `"subdivided"`.
    pub state: String,
    /// `"H"`, `"V"`, `"C"` once subdivided.
    pub label: Option<String>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogJson {
    pub level: u32,
    /// `[cell, label]` pairs in application order.
    pub splits: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshJson {
    pub domain: [f64; 4],
    pub s_knots: Vec<f64>,
    pub t_knots: Vec<f64>,
    pub level: u32,
    pub cells: Vec<CellJson>,
    pub log: Vec<LogJson>,
}

pub fn mesh_to_json(mesh: &TMesh) -> MeshJson {
    let cells = mesh
        .cells()
        .iter()
        .enumerate()
        .map(|(id, c)| CellJson {
            id,
            bounds: [c.bounds.x0, c.bounds.x1, c.bounds.y0, c.bounds.y1].map(dyadic_string),
            level: c.level,
            state: match c.state {
                CellState::Active => "active".into(),
                CellState::Subdivided { .. } => "subdivided".into(),
            },
            label: c.label.map(|l| l.as_char().to_string()),
            parent: c.parent,
            children: c.children().to_vec(),
        })
        .collect();
    let log = mesh
        .log()
        .iter()
        .map(|e| LogJson { level: e.level, splits: e.splits.iter().map(|&(c, s)| (c, s.as_char().to_string())).collect() })
        .collect();
    MeshJson {
        domain: mesh.domain(),
        s_knots: mesh.s_knots().to_vec(),
        t_knots: mesh.t_knots().to_vec(),
        level: mesh.level(),
        cells,
        log,
    }
}

fn parse_split(s: &str) -> Result<Split> {
    let mut it = s.chars();
    match (it.next().and_then(Split::from_char), it.next()) {
        (Some(x), None) => Ok(x),
        _ => Err(CliError::Parse(format!("bad split label '{s}'"))),
    }
}

/// Rebuild the mesh by replaying the log over the initial knots, then check
/// the cell table against the stored one.
pub fn mesh_from_json(j: &MeshJson) -> Result<TMesh> {
    let mut m = TMesh::with_knots(j.s_knots.clone(), j.t_knots.clone())?;
    for entry in &j.log {
        for (c, s) in &entry.splits {
            m.split_cell(*c, parse_split(s)?)?;
        }
        m.commit_level();
    }
    let again = mesh_to_json(&m);
    if again.cells.len() != j.cells.len() {
        return Err(CliError::Parse(format!("log rebuilds {} cells, file lists {}", again.cells.len(), j.cells.len())));
    }
    for (a, b) in again.cells.iter().zip(&j.cells) {
        let same_bounds = a
            .bounds
            .iter()
            .zip(&b.bounds)
            .all(|(x, y)| parse_dyadic(y).map_or(false, |v| parse_dyadic(x) == Some(v)));
        if !same_bounds || a.level != b.level || a.state != b.state || a.label != b.label {
            return Err(CliError::Parse(format!("cell {} does not match its replayed log", b.id)));
        }
    }
    if m.level() != j.level {
        return Err(CliError::Parse(format!("level {} does not match replayed level {}", j.level, m.level())));
    }
    Ok(m)
}

/// Flat component view of field values.
pub trait Components: Copy {
    const N: usize;
    fn write(&self, out: &mut Vec<f64>);
}

impl Components for f64 {
    const N: usize = 1;
    fn write(&self, out: &mut Vec<f64>) {
        out.push(*self);
    }
}

impl Components for Vector2<f64> {
    const N: usize = 2;
    fn write(&self, out: &mut Vec<f64>) {
        out.extend(self.iter());
    }
}

impl Components for Vector3<f64> {
    const N: usize = 3;
    fn write(&self, out: &mut Vec<f64>) {
        out.extend(self.iter());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchJson {
    pub cell: usize,
    /// `b[i][j]` flattened row-major, `i` along s.
    pub ordinates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionJson {
    pub id: usize,
    pub anchor: [String; 2],
    pub slot: u8,
    pub birth_level: u32,
    pub coefficient: Vec<f64>,
    pub patches: Vec<PatchJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineJson {
    pub components: usize,
    pub dimension: usize,
    pub mesh: MeshJson,
    pub functions: Vec<FunctionJson>,
}

pub fn spline_to_json<T: Components + anisoline::bezier::Ordinate>(field: &SplineField<T>) -> SplineJson {
    let space = &field.space;
    let functions = space
        .functions()
        .iter()
        .enumerate()
        .map(|(id, f)| {
            let mut coefficient = Vec::with_capacity(T::N);
            field.coefficients[id].write(&mut coefficient);
            FunctionJson {
                id,
                anchor: [dyadic_string(f.anchor.x), dyadic_string(f.anchor.y)],
                slot: f.slot,
                birth_level: f.birth_level,
                coefficient,
                patches: f.support.iter().map(|(&cell, p)| PatchJson { cell, ordinates: p.ordinates().collect() }).collect(),
            }
        })
        .collect();
    SplineJson { components: T::N, dimension: space.dim(), mesh: mesh_to_json(space.mesh()), functions }
}

/// A spline read back from JSON, evaluable without rebuilding the space.
pub struct LoadedSpline {
    pub mesh: TMesh,
    pub components: usize,
    /// Per active cell: `(coefficient, patch)` pairs.
    cells: std::collections::HashMap<usize, Vec<(Vec<f64>, BezierPatch)>>,
}

impl LoadedSpline {
    pub fn from_json(j: &SplineJson) -> Result<LoadedSpline> {
        let mesh = mesh_from_json(&j.mesh)?;
        if j.functions.len() != j.dimension {
            return Err(CliError::Parse(format!("{} functions listed, dimension {}", j.functions.len(), j.dimension)));
        }
        let mut cells: std::collections::HashMap<usize, Vec<(Vec<f64>, BezierPatch)>> = Default::default();
        for f in &j.functions {
            if f.coefficient.len() != j.components {
                return Err(CliError::Parse(format!("function {} has {} components", f.id, f.coefficient.len())));
            }
            for p in &f.patches {
                if p.ordinates.len() != 16 {
                    return Err(CliError::Parse(format!("function {} cell {}: need 16 ordinates", f.id, p.cell)));
                }
                if !mesh.cell(p.cell).map(|c| c.is_active()).unwrap_or(false) {
                    return Err(CliError::Parse(format!("function {} refers to non-active cell {}", f.id, p.cell)));
                }
                let patch = BezierPatch::from_fn(|i, k| p.ordinates[4 * i + k]);
                cells.entry(p.cell).or_default().push((f.coefficient.clone(), patch));
            }
        }
        Ok(LoadedSpline { mesh, components: j.components, cells })
    }

    pub fn value(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        let c = self.mesh.locate(s, t)?;
        let [s0, s1, t0, t1] = self.mesh.cell_rect(c);
        let (u, v) = ((s - s0) / (s1 - s0), (t - t0) / (t1 - t0));
        let mut out = vec![0.0; self.components];
        for (coef, p) in self.cells.get(&c).map(|v| v.as_slice()).unwrap_or(&[]) {
            let b = p.eval(u, v, (0, 0)).expect("order 0");
            for k in 0..out.len() {
                out[k] += coef[k] * b;
            }
        }
        Ok(out)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Parse(e.to_string()))?;
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointsJson {
    /// `[s, t, x, y, z]` or `[s, t, z]` rows.
    pub points: Vec<Vec<f64>>,
}

fn point_row(vals: &[f64]) -> Option<((f64, f64), Vector3<f64>)> {
    match vals {
        [s, t, x, y, z] => Some(((*s, *t), Vector3::new(*x, *y, *z))),
        [s, t, z] => Some(((*s, *t), Vector3::new(*s, *t, *z))),
        _ => None,
    }
}

fn check_param(s: f64, t: f64) -> bool {
    (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t)
}

/// Point CSV with header `s,t,x,y,z` or `s,t,z` (a height field over the
/// parameters). Diagnostics name the 1-based line and column.
pub fn parse_points_csv(text: &str) -> Result<ParamPointSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Parse(format!("line 1: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let width = match header.iter().map(|s| s.as_str()).collect::<Vec<_>>().as_slice() {
        ["s", "t", "x", "y", "z"] => 5,
        ["s", "t", "z"] => 3,
        _ => {
            return Err(CliError::Parse(format!("line 1: header must be s,t,x,y,z or s,t,z, got '{}'", header.join(","))))
        }
    };
    let mut params = Vec::new();
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Parse(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != width {
            return Err(CliError::Parse(format!(
                "line {line}, column {}: expected {width} fields, got {}",
                rec.len().min(width) + 1,
                rec.len()
            )));
        }
        let mut vals = Vec::with_capacity(width);
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Parse(format!("line {line}, column {}: '{field}' is not a number", k + 1)))?;
            if !v.is_finite() {
                return Err(CliError::Parse(format!("line {line}, column {}: non-finite value", k + 1)));
            }
            vals.push(v);
        }
        let (st, p) = point_row(&vals).expect("width checked");
        if !check_param(st.0, st.1) {
            let col = if (0.0..=1.0).contains(&st.0) { 2 } else { 1 };
            return Err(CliError::Parse(format!(
                "line {line}, column {col}: parameters ({}, {}) outside [0,1]^2",
                st.0, st.1
            )));
        }
        params.push(st);
        points.push(p);
    }
    Ok(ParamPointSet::new(params, points)?)
}

pub fn parse_points_json(text: &str) -> Result<ParamPointSet> {
    let j: PointsJson = serde_json::from_str(text).map_err(|e| CliError::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    let mut params = Vec::new();
    let mut points = Vec::new();
    for (i, row) in j.points.iter().enumerate() {
        let (st, p) = point_row(row).ok_or_else(|| CliError::Parse(format!("point {i}: expected 3 or 5 numbers, got {}", row.len())))?;
        if !check_param(st.0, st.1) {
            return Err(CliError::Parse(format!("point {i}: parameters ({}, {}) outside [0,1]^2", st.0, st.1)));
        }
        params.push(st);
        points.push(p);
    }
    Ok(ParamPointSet::new(params, points)?)
}

/// Reads `.json` as [`PointsJson`], anything else as CSV.
pub fn read_points(path: &Path) -> Result<ParamPointSet> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if path.extension().map_or(false, |e| e == "json") { parse_points_json(&text) } else { parse_points_csv(&text) };
    parsed.map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

pub fn points_csv(points: &ParamPointSet) -> String {
    let mut out = String::from("s,t,x,y,z\n");
    for (st, p) in points.params.iter().zip(&points.points) {
        let _ = writeln!(out, "{},{},{},{},{}", st.0, st.1, p.x, p.y, p.z);
    }
    out
}

/// Subdivisions per cell edge in OBJ and VTK sampling.
pub const SAMPLES_PER_CELL: usize = 4;

fn cell_grid(mesh: &TMesh, cell: usize, n: usize) -> Vec<(f64, f64)> {
    let [s0, s1, t0, t1] = mesh.cell_rect(cell);
    let mut out = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            out.push((s0 + (s1 - s0) * i as f64 / n as f64, t0 + (t1 - t0) * j as f64 / n as f64));
        }
    }
    out
}

fn quads(base: usize, n: usize) -> impl Iterator<Item = [usize; 4]> {
    (0..n).flat_map(move |j| {
        (0..n).map(move |i| {
            let a = base + j * (n + 1) + i;
            [a, a + 1, a + n + 2, a + n + 1]
        })
    })
}

/// Wavefront OBJ: per active cell an `(n+1)²` vertex grid with `vt`
/// parameters and `n²` quads, vertices not shared between cells.
pub fn surface_obj(field: &SurfaceField, n: usize) -> String {
    let mesh = field.space.mesh();
    let cells: Vec<usize> = mesh.active_cells().collect();
    let mut out = format!("# anisoline surface: {} cells, {} functions\n", cells.len(), field.space.dim());
    let mut faces = String::new();
    let mut base = 1;
    for &c in &cells {
        for (s, t) in cell_grid(mesh, c, n) {
            let p = field.derivatives_in_cell(c, s, t)[0];
            let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
            let _ = writeln!(out, "vt {s} {t}");
        }
        for q in quads(base, n) {
            let _ = writeln!(faces, "f {0}/{0} {1}/{1} {2}/{2} {3}/{3}", q[0], q[1], q[2], q[3]);
        }
        base += (n + 1) * (n + 1);
    }
    out.push_str(&faces);
    out
}

/// Legacy ASCII VTK unstructured grid of quads sampled per cell, with the
/// solution `u`, the pointwise error when an exact solution is known, and
/// the cell level.
pub fn solution_vtk(sol: &DiscreteSolution, title: &str, exact: Option<&ScalarFn>, n: usize) -> String {
    let mesh = sol.field.space.mesh();
    let cells: Vec<usize> = mesh.active_cells().collect();
    let per = (n + 1) * (n + 1);
    let npts = cells.len() * per;
    let nquads = cells.len() * n * n;
    let mut pts = String::new();
    let mut u = String::new();
    let mut err = String::new();
    let mut conn = String::new();
    let mut levels = String::new();
    for (k, &c) in cells.iter().enumerate() {
        for (s, t) in cell_grid(mesh, c, n) {
            let x = sol.geometry.field.derivatives_in_cell(c, s, t)[0];
            let v = sol.field.derivatives_in_cell(c, s, t)[0];
            let _ = writeln!(pts, "{} {} 0", x.x, x.y);
            let _ = writeln!(u, "{v}");
            if let Some(f) = exact {
                let _ = writeln!(err, "{}", v - f(x.x, x.y));
            }
        }
        for q in quads(k * per, n) {
            let _ = writeln!(conn, "4 {} {} {} {}", q[0], q[1], q[2], q[3]);
            let _ = writeln!(levels, "{}", mesh.cells()[c].level);
        }
    }
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "anisoline solution {title}");
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(out, "POINTS {npts} double");
    out.push_str(&pts);
    let _ = writeln!(out, "CELLS {nquads} {}", 5 * nquads);
    out.push_str(&conn);
    let _ = writeln!(out, "CELL_TYPES {nquads}");
    for _ in 0..nquads {
        out.push_str("9\n");
    }
    let _ = writeln!(out, "CELL_DATA {nquads}");
    out.push_str("SCALARS level int 1\nLOOKUP_TABLE default\n");
    out.push_str(&levels);
    let _ = writeln!(out, "POINT_DATA {npts}");
    out.push_str("SCALARS u double 1\nLOOKUP_TABLE default\n");
    out.push_str(&u);
    if exact.is_some() {
        out.push_str("SCALARS error double 1\nLOOKUP_TABLE default\n");
        out.push_str(&err);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use anisoline::refine::{refine, RefinementRequest};
    use anisoline::space::SplineSpace;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn refined() -> TMesh {
        let m = TMesh::with_knots(vec![0.0, 0.3, 1.0], vec![0.0, 0.5, 1.0]).unwrap();
        let (m1, _) = refine(&m, &RefinementRequest::new(BTreeMap::from([(0, Split::V), (3, Split::C)]))).unwrap();
        let c = m1.markable_cells()[0];
        refine(&m1, &RefinementRequest::new(BTreeMap::from([(c, Split::H)]))).unwrap().0
    }

    #[test]
    fn mesh_json_round_trip() {
        let m = refined();
        let j = mesh_to_json(&m);
        let text = serde_json::to_string(&j).unwrap();
        let back: MeshJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back, j);
        assert!(mesh_from_json(&back).unwrap().same_structure(&m));
        assert_eq!(j.cells[0].bounds, ["0", "1", "0", "1"].map(String::from));
        assert_eq!(j.cells[0].label.as_deref(), Some("V"));
    }

    #[test]
    fn tampered_mesh_json_is_rejected() {
        let mut j = mesh_to_json(&refined());
        j.cells[1].level = 7;
        assert!(mesh_from_json(&j).is_err());
        let mut j = mesh_to_json(&refined());
        j.log[0].splits[0].1 = "Q".into();
        assert!(mesh_from_json(&j).is_err());
    }

    #[test]
    fn spline_json_round_trip_evaluates_the_same() {
        let m = TMesh::tensor(2, 2, [0.0, 1.0, 0.0, 1.0]).unwrap();
        let (m1, rep) = refine(&m, &RefinementRequest::new(BTreeMap::from([(0, Split::C), (1, Split::H)]))).unwrap();
        let space = Arc::new(SplineSpace::new(m.clone()).unwrap().advance(&m1, &rep).unwrap());
        let field = SplineField::from_hermite(space, |s, t| {
            let v = Vector3::new(s * s, t.sin(), s * t * t);
            let ds = Vector3::new(2.0 * s, 0.0, t * t);
            let dt = Vector3::new(0.0, t.cos(), 2.0 * s * t);
            let dst = Vector3::new(0.0, 0.0, 2.0 * t);
            [v, ds, dt, dst]
        })
        .unwrap();
        let j = spline_to_json(&field);
        assert_eq!(j.functions[0].patches[0].ordinates.len(), 16);
        let back: SplineJson = serde_json::from_str(&serde_json::to_string(&j).unwrap()).unwrap();
        let loaded = LoadedSpline::from_json(&back).unwrap();
        for &(s, t) in &[(0.1, 0.2), (0.7, 0.3), (0.33, 0.9), (1.0, 1.0)] {
            let a = field.value(s, t).unwrap();
            let b = loaded.value(s, t).unwrap();
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-14, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn points_csv_both_layouts() {
        let p = parse_points_csv("s,t,x,y,z\n0,0,1,2,3\n1,0.5,4,5,6\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.points[1], Vector3::new(4.0, 5.0, 6.0));
        let h = parse_points_csv("s, t, z\n0.25,0.5,2\n\n").unwrap();
        assert_eq!(h.points[0], Vector3::new(0.25, 0.5, 2.0));
        let back = parse_points_csv(&points_csv(&p)).unwrap();
        assert_eq!(back.points, p.points);
        assert_eq!(back.params, p.params);
    }

    #[test]
    fn points_csv_diagnostics() {
        let e = parse_points_csv("s,t,z\n0,0,1\n0.5,abc,1\n").unwrap_err().to_string();
        assert!(e.contains("line 3, column 2"), "{e}");
        let e = parse_points_csv("s,t,z\n0,0,1\n0.5,0.5\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = parse_points_csv("s,t,z\n1.5,0,1\n").unwrap_err().to_string();
        assert!(e.contains("line 2, column 1") && e.contains("outside"), "{e}");
        let e = parse_points_csv("u,v,w\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(parse_points_csv("s,t,z\n").is_err());
    }

    #[test]
    fn points_json() {
        let p = parse_points_json(r#"{"points": [[0, 0, 1], [1, 1, 0, 0, 2]]}"#).unwrap();
        assert_eq!(p.points[1], Vector3::new(0.0, 0.0, 2.0));
        assert!(parse_points_json(r#"{"points": [[0, 0]]}"#).is_err());
    }

    #[test]
    fn obj_counts() {
        let space = Arc::new(SplineSpace::new(TMesh::tensor(2, 1, [0.0, 1.0, 0.0, 1.0]).unwrap()).unwrap());
        let field = SplineField::from_hermite(space, |s, t| {
            [Vector3::new(s, t, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0), Vector3::zeros()]
        })
        .unwrap();
        let obj = surface_obj(&field, 3);
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 2 * 16);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 2 * 9);
        assert!(obj.contains("f 1/1 2/2 6/6 5/5"));
    }
}
