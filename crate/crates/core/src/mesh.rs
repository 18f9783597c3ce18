//! Hierarchical T-meshes over an axis-aligned parameter rectangle.
//!
//! Coordinates live on an integer lattice: every level-0 knot interval is
//! `2^FRAC_BITS` lattice units wide, so every midpoint split stays exact and
//! aligned-adjacency tests are integer comparisons. The level-0 knot lines may
//! be non-uniform; real coordinates are recovered through them piecewise
//! linearly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lattice resolution inside one level-0 interval. Bounds the number of
/// successive halvings of a single interval.
pub const FRAC_BITS: u32 = 30;
pub const UNIT: i64 = 1 << FRAC_BITS;

pub type CellId = usize;
pub type VertexId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mesh needs at least one cell per direction, got {ns}x{nt}")]
    EmptyGrid { ns: usize, nt: usize },
    #[error("degenerate domain [{0}, {1}] x [{2}, {3}]")]
    DegenerateDomain(f64, f64, f64, f64),
    #[error("knot lines must be strictly increasing")]
    UnsortedKnots,
    #[error("unknown cell id {0}")]
    UnknownCell(CellId),
    #[error("unknown vertex id {0}")]
    UnknownVertex(VertexId),
    #[error("cell {0} is not active")]
    InactiveCell(CellId),
    #[error(
        "cell {cell} has level {cell_level} but only cells of the current level {mesh_level} \
         may be subdivided (cells skipped at a level are excluded from later subdivision)"
    )]
    StaleLevel {
        cell: CellId,
        cell_level: u32,
        mesh_level: u32,
    },
    #[error("cell {0} is too small to split further on the dyadic lattice")]
    TooDeep(CellId),
    #[error("vertex {0} has an invalid valence {1}")]
    BadValence(VertexId, usize),
    #[error("point ({0}, {1}) lies outside the parameter domain")]
    OutsideDomain(f64, f64),
}

/// Subdivision type of a cell. `H` inserts a horizontal edge (children stacked
/// bottom/top), `V` a vertical edge (children left/right), `C` a cross.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    H,
    V,
    C,
}

impl Split {
    pub fn splits_s(self) -> bool {
        matches!(self, Split::V | Split::C)
    }

    pub fn splits_t(self) -> bool {
        matches!(self, Split::H | Split::C)
    }

    pub fn as_char(self) -> char {
        match self {
            Split::H => 'H',
            Split::V => 'V',
            Split::C => 'C',
        }
    }

    pub fn from_char(c: char) -> Option<Split> {
        match c.to_ascii_uppercase() {
            'H' => Some(Split::H),
            'V' => Some(Split::V),
            'C' => Some(Split::C),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VertexKind {
    Boundary,
    Crossing,
    TJunction,
}

impl VertexKind {
    pub fn is_basis(self) -> bool {
        !matches!(self, VertexKind::TJunction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Point { x, y }
    }
}

/// Lattice rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bounds {
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

impl Bounds {
    pub const fn new(x0: i64, x1: i64, y0: i64, y1: i64) -> Self {
        Bounds { x0, x1, y0, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i128 {
        self.width() as i128 * self.height() as i128
    }

    pub fn xmid(&self) -> i64 {
        (self.x0 + self.x1) / 2
    }

    pub fn ymid(&self) -> i64 {
        (self.y0 + self.y1) / 2
    }

    /// Corners in the order (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x0, self.y0),
            Point::new(self.x1, self.y0),
            Point::new(self.x0, self.y1),
            Point::new(self.x1, self.y1),
        ]
    }

    pub fn contains_closed(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_open(&self, p: Point) -> bool {
        p.x > self.x0 && p.x < self.x1 && p.y > self.y0 && p.y < self.y1
    }

    pub fn interiors_overlap(&self, o: &Bounds) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    /// Child rectangles in the canonical order: H = [bottom, top],
    /// V = [left, right], C = [bottom-left, bottom-right, top-left, top-right].
    pub fn split(&self, split: Split) -> Vec<Bounds> {
        let (xm, ym) = (self.xmid(), self.ymid());
        match split {
            Split::H => vec![
                Bounds::new(self.x0, self.x1, self.y0, ym),
                Bounds::new(self.x0, self.x1, ym, self.y1),
            ],
            Split::V => vec![
                Bounds::new(self.x0, xm, self.y0, self.y1),
                Bounds::new(xm, self.x1, self.y0, self.y1),
            ],
            Split::C => vec![
                Bounds::new(self.x0, xm, self.y0, ym),
                Bounds::new(xm, self.x1, self.y0, ym),
                Bounds::new(self.x0, xm, ym, self.y1),
                Bounds::new(xm, self.x1, ym, self.y1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellState {
    Active,
    Subdivided { split: Split, children: Vec<CellId> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub bounds: Bounds,
    pub level: u32,
    pub parent: Option<CellId>,
    pub state: CellState,
    /// Subdivision type applied to this cell, once subdivided.
    pub label: Option<Split>,
}

impl Cell {
    pub fn is_active(&self) -> bool {
        matches!(self.state, CellState::Active)
    }

    pub fn children(&self) -> &[CellId] {
        match &self.state {
            CellState::Active => &[],
            CellState::Subdivided { children, .. } => children,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub pos: Point,
    /// Mesh level at which the vertex first appeared.
    pub level: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdjacencyKind {
    NotAdjacent,
    AdjacentOnly,
    /// Side by side, sharing a full vertical edge with identical t-extents.
    HorizontallyAligned,
    /// Stacked, sharing a full horizontal edge with identical s-extents.
    VerticallyAligned,
}

impl AdjacencyKind {
    pub fn is_aligned(self) -> bool {
        matches!(
            self,
            AdjacencyKind::HorizontallyAligned | AdjacencyKind::VerticallyAligned
        )
    }

    pub fn is_adjacent(self) -> bool {
        !matches!(self, AdjacencyKind::NotAdjacent)
    }
}

/// One committed refinement pass: the level it was applied at and the cells
/// subdivided, in application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub level: u32,
    pub splits: Vec<(CellId, Split)>,
}

/// Side of a cell, used for neighbour walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

#[derive(Clone, Debug)]
pub struct TMesh {
    s_knots: Vec<f64>,
    t_knots: Vec<f64>,
    cells: Vec<Cell>,
    vertices: Vec<Vertex>,
    vertex_index: HashMap<Point, VertexId>,
    level: u32,
    log: Vec<LogEntry>,
    pending: Vec<(CellId, Split)>,
}

/// Open quadrant direction around a lattice point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    NE,
    NW,
    SE,
    SW,
}

impl Quadrant {
    fn signs(self) -> (bool, bool) {
        match self {
            Quadrant::NE => (true, true),
            Quadrant::NW => (false, true),
            Quadrant::SE => (true, false),
            Quadrant::SW => (false, false),
        }
    }
}

impl TMesh {
    /// Uniform `ns x nt` tensor mesh on `[s0,s1] x [t0,t1]`.
    pub fn tensor(ns: usize, nt: usize, domain: [f64; 4]) -> Result<TMesh, MeshError> {
        if ns == 0 || nt == 0 {
            return Err(MeshError::EmptyGrid { ns, nt });
        }
        let [s0, s1, t0, t1] = domain;
        if !(s1 > s0) || !(t1 > t0) || !s0.is_finite() || !s1.is_finite() || !t0.is_finite() || !t1.is_finite() {
            return Err(MeshError::DegenerateDomain(s0, s1, t0, t1));
        }
        let sk = (0..=ns).map(|i| s0 + (s1 - s0) * i as f64 / ns as f64).collect();
        let tk = (0..=nt).map(|j| t0 + (t1 - t0) * j as f64 / nt as f64).collect();
        TMesh::with_knots(sk, tk)
    }

    /// Tensor mesh over arbitrary strictly increasing level-0 knot lines.
    pub fn with_knots(s_knots: Vec<f64>, t_knots: Vec<f64>) -> Result<TMesh, MeshError> {
        if s_knots.len() < 2 || t_knots.len() < 2 {
            return Err(MeshError::EmptyGrid {
                ns: s_knots.len().saturating_sub(1),
                nt: t_knots.len().saturating_sub(1),
            });
        }
        let increasing = |k: &[f64]| k.windows(2).all(|w| w[1] > w[0]) && k.iter().all(|v| v.is_finite());
        if !increasing(&s_knots) || !increasing(&t_knots) {
            return Err(MeshError::UnsortedKnots);
        }
        let ns = s_knots.len() - 1;
        let nt = t_knots.len() - 1;
        let mut cells = Vec::with_capacity(ns * nt);
        for j in 0..nt {
            for i in 0..ns {
                cells.push(Cell {
                    bounds: Bounds::new(
                        i as i64 * UNIT,
                        (i as i64 + 1) * UNIT,
                        j as i64 * UNIT,
                        (j as i64 + 1) * UNIT,
                    ),
                    level: 0,
                    parent: None,
                    state: CellState::Active,
                    label: None,
                });
            }
        }
        let mut mesh = TMesh {
            s_knots,
            t_knots,
            cells,
            vertices: Vec::new(),
            vertex_index: HashMap::new(),
            level: 0,
            log: Vec::new(),
            pending: Vec::new(),
        };
        for j in 0..=nt {
            for i in 0..=ns {
                mesh.register_vertex(Point::new(i as i64 * UNIT, j as i64 * UNIT), 0);
            }
        }
        Ok(mesh)
    }

    fn register_vertex(&mut self, p: Point, level: u32) -> VertexId {
        if let Some(&id) = self.vertex_index.get(&p) {
            return id;
        }
        let id = self.vertices.len();
        self.vertices.push(Vertex { pos: p, level });
        self.vertex_index.insert(p, id);
        id
    }

    pub fn ns(&self) -> usize {
        self.s_knots.len() - 1
    }

    pub fn nt(&self) -> usize {
        self.t_knots.len() - 1
    }

    pub fn s_knots(&self) -> &[f64] {
        &self.s_knots
    }

    pub fn t_knots(&self) -> &[f64] {
        &self.t_knots
    }

    /// Real domain `[s0, s1, t0, t1]`.
    pub fn domain(&self) -> [f64; 4] {
        [
            self.s_knots[0],
            *self.s_knots.last().unwrap(),
            self.t_knots[0],
            *self.t_knots.last().unwrap(),
        ]
    }

    pub fn lattice_domain(&self) -> Bounds {
        Bounds::new(0, self.ns() as i64 * UNIT, 0, self.nt() as i64 * UNIT)
    }

    /// Current mesh level: the level of cells that may be subdivided next.
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> Result<&Cell, MeshError> {
        self.cells.get(id).ok_or(MeshError::UnknownCell(id))
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn vertex(&self, id: VertexId) -> Result<&Vertex, MeshError> {
        self.vertices.get(id).ok_or(MeshError::UnknownVertex(id))
    }

    pub fn vertex_at(&self, p: Point) -> Option<VertexId> {
        self.vertex_index.get(&p).copied()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn active_cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_active())
            .map(|(i, _)| i)
    }

    pub fn active_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_active()).count()
    }

    /// Active cells whose level equals the current mesh level.
    pub fn markable_cells(&self) -> Vec<CellId> {
        self.active_cells()
            .filter(|&c| self.cells[c].level == self.level)
            .collect()
    }

    /// Lattice x coordinate to real s.
    pub fn s_of(&self, x: i64) -> f64 {
        lattice_to_real(&self.s_knots, x)
    }

    pub fn t_of(&self, y: i64) -> f64 {
        lattice_to_real(&self.t_knots, y)
    }

    pub fn real_point(&self, p: Point) -> (f64, f64) {
        (self.s_of(p.x), self.t_of(p.y))
    }

    /// Real bounds `[s0, s1, t0, t1]` of a cell.
    pub fn cell_rect(&self, id: CellId) -> [f64; 4] {
        let b = self.cells[id].bounds;
        [self.s_of(b.x0), self.s_of(b.x1), self.t_of(b.y0), self.t_of(b.y1)]
    }

    pub fn on_boundary(&self, p: Point) -> bool {
        let d = self.lattice_domain();
        p.x == d.x0 || p.x == d.x1 || p.y == d.y0 || p.y == d.y1
    }

    /// Active cell covering the open quadrant next to `p`, if inside the domain.
    pub fn quadrant_cell(&self, p: Point, q: Quadrant) -> Option<CellId> {
        let (east, north) = q.signs();
        let d = self.lattice_domain();
        if (east && p.x >= d.x1) || (!east && p.x <= d.x0) || (north && p.y >= d.y1) || (!north && p.y <= d.y0) {
            return None;
        }
        if p.x < d.x0 || p.x > d.x1 || p.y < d.y0 || p.y > d.y1 {
            return None;
        }
        let col = if east { p.x.div_euclid(UNIT) } else { (p.x - 1).div_euclid(UNIT) } as usize;
        let row = if north { p.y.div_euclid(UNIT) } else { (p.y - 1).div_euclid(UNIT) } as usize;
        let mut id = row * self.ns() + col;
        loop {
            let cell = &self.cells[id];
            match &cell.state {
                CellState::Active => return Some(id),
                CellState::Subdivided { split, children } => {
                    let b = cell.bounds;
                    let right = if east { p.x >= b.xmid() } else { p.x > b.xmid() };
                    let top = if north { p.y >= b.ymid() } else { p.y > b.ymid() };
                    id = children[child_slot(*split, right, top)];
                }
            }
        }
    }

    /// Active cell containing the real point `(s, t)`; points on edges go to
    /// the upper/right cell except on the far domain boundary.
    pub fn locate(&self, s: f64, t: f64) -> Result<CellId, MeshError> {
        let [s0, s1, t0, t1] = self.domain();
        let tol_s = 1e-12 * (s1 - s0);
        let tol_t = 1e-12 * (t1 - t0);
        if !(s >= s0 - tol_s && s <= s1 + tol_s && t >= t0 - tol_t && t <= t1 + tol_t) {
            return Err(MeshError::OutsideDomain(s, t));
        }
        let col = knot_interval(&self.s_knots, s);
        let row = knot_interval(&self.t_knots, t);
        let mut id = row * self.ns() + col;
        loop {
            let cell = &self.cells[id];
            match &cell.state {
                CellState::Active => return Ok(id),
                CellState::Subdivided { split, children } => {
                    let b = cell.bounds;
                    let right = s >= self.s_of(b.xmid());
                    let top = t >= self.t_of(b.ymid());
                    id = children[child_slot(*split, right, top)];
                }
            }
        }
    }

    /// Incident edge directions at a lattice point: [right, up, left, down].
    pub fn incident_edges(&self, p: Point) -> [bool; 4] {
        let ne = self.quadrant_cell(p, Quadrant::NE);
        let nw = self.quadrant_cell(p, Quadrant::NW);
        let se = self.quadrant_cell(p, Quadrant::SE);
        let sw = self.quadrant_cell(p, Quadrant::SW);
        let sep = |a: Option<CellId>, b: Option<CellId>| match (a, b) {
            (Some(x), Some(y)) => x != y,
            (None, None) => false,
            _ => true,
        };
        let inside = |a: Option<CellId>, b: Option<CellId>| a.is_some() || b.is_some();
        [
            inside(ne, se) && sep(ne, se),
            inside(ne, nw) && sep(ne, nw),
            inside(nw, sw) && sep(nw, sw),
            inside(se, sw) && sep(se, sw),
        ]
    }

    fn kind_at(&self, p: Point) -> Option<VertexKind> {
        if self.on_boundary(p) {
            return Some(VertexKind::Boundary);
        }
        match self.incident_edges(p).iter().filter(|&&e| e).count() {
            4 => Some(VertexKind::Crossing),
            3 => Some(VertexKind::TJunction),
            _ => None,
        }
    }

    pub fn classify_vertex(&self, v: VertexId) -> Result<VertexKind, MeshError> {
        let p = self.vertex(v)?.pos;
        self.kind_at(p).ok_or_else(|| {
            MeshError::BadValence(v, self.incident_edges(p).iter().filter(|&&e| e).count())
        })
    }

    /// Kinds of all vertices, indexed by vertex id.
    pub fn vertex_kinds(&self) -> Vec<VertexKind> {
        (0..self.vertices.len())
            .map(|v| self.classify_vertex(v).unwrap_or(VertexKind::TJunction))
            .collect()
    }

    pub fn basis_vertices(&self) -> Vec<VertexId> {
        (0..self.vertices.len())
            .filter(|&v| matches!(self.classify_vertex(v), Ok(k) if k.is_basis()))
            .collect()
    }

    /// `4 (V^b + V^+)`.
    pub fn dimension(&self) -> usize {
        4 * self.basis_vertices().len()
    }

    pub fn adjacency(&self, c1: CellId, c2: CellId) -> Result<AdjacencyKind, MeshError> {
        for &c in &[c1, c2] {
            if !self.cell(c)?.is_active() {
                return Err(MeshError::InactiveCell(c));
            }
        }
        Ok(bounds_adjacency(&self.cells[c1].bounds, &self.cells[c2].bounds))
    }

    /// Active cells across one side of an active cell, in ascending order
    /// along the side.
    pub fn side_neighbors(&self, c: CellId, side: Side) -> Vec<CellId> {
        let b = self.cells[c].bounds;
        let mut out = Vec::new();
        match side {
            Side::Left | Side::Right => {
                let (x, q) = if side == Side::Right { (b.x1, Quadrant::NE) } else { (b.x0, Quadrant::NW) };
                let mut y = b.y0;
                while y < b.y1 {
                    match self.quadrant_cell(Point::new(x, y), q) {
                        Some(n) => {
                            out.push(n);
                            y = self.cells[n].bounds.y1;
                        }
                        None => break,
                    }
                }
            }
            Side::Bottom | Side::Top => {
                let (y, q) = if side == Side::Top { (b.y1, Quadrant::NE) } else { (b.y0, Quadrant::SE) };
                let mut x = b.x0;
                while x < b.x1 {
                    match self.quadrant_cell(Point::new(x, y), q) {
                        Some(n) => {
                            out.push(n);
                            x = self.cells[n].bounds.x1;
                        }
                        None => break,
                    }
                }
            }
        }
        out
    }

    pub fn neighbors(&self, c: CellId) -> Vec<CellId> {
        let mut out = Vec::new();
        for side in [Side::Left, Side::Right, Side::Bottom, Side::Top] {
            out.extend(self.side_neighbors(c, side));
        }
        out
    }

    /// Active cells having `p` on their closure.
    pub fn cells_around(&self, p: Point) -> Vec<CellId> {
        let mut out: Vec<CellId> = [Quadrant::SW, Quadrant::SE, Quadrant::NW, Quadrant::NE]
            .iter()
            .filter_map(|&q| self.quadrant_cell(p, q))
            .collect();
        out.dedup();
        let mut seen = Vec::new();
        out.retain(|c| {
            if seen.contains(c) {
                false
            } else {
                seen.push(*c);
                true
            }
        });
        out
    }

    /// Vertices lying on the closed boundary of a cell.
    pub fn vertices_on_cell(&self, c: CellId) -> Vec<VertexId> {
        let b = self.cells[c].bounds;
        let mut pts: Vec<Point> = b.corners().to_vec();
        for side in [Side::Left, Side::Right, Side::Bottom, Side::Top] {
            for n in self.side_neighbors(c, side) {
                let nb = self.cells[n].bounds;
                let p = match side {
                    Side::Left | Side::Right => {
                        let x = if side == Side::Left { b.x0 } else { b.x1 };
                        [Point::new(x, nb.y0), Point::new(x, nb.y1)]
                    }
                    Side::Bottom | Side::Top => {
                        let y = if side == Side::Bottom { b.y0 } else { b.y1 };
                        [Point::new(nb.x0, y), Point::new(nb.x1, y)]
                    }
                };
                for q in p {
                    if b.contains_closed(q) {
                        pts.push(q);
                    }
                }
            }
        }
        pts.sort();
        pts.dedup();
        pts.into_iter().filter_map(|p| self.vertex_at(p)).collect()
    }

    /// Subdivide an active cell of the current level. Children get level
    /// `level + 1`; the split is queued in the pending log entry until
    /// [`TMesh::commit_level`].
    pub fn split_cell(&mut self, c: CellId, split: Split) -> Result<Vec<CellId>, MeshError> {
        let cell = self.cell(c)?;
        if !cell.is_active() {
            return Err(MeshError::InactiveCell(c));
        }
        if cell.level != self.level {
            return Err(MeshError::StaleLevel {
                cell: c,
                cell_level: cell.level,
                mesh_level: self.level,
            });
        }
        let b = cell.bounds;
        if (split.splits_s() && b.width() % 2 != 0) || (split.splits_t() && b.height() % 2 != 0) {
            return Err(MeshError::TooDeep(c));
        }
        let child_level = cell.level + 1;
        let mut ids = Vec::new();
        for cb in b.split(split) {
            ids.push(self.cells.len());
            self.cells.push(Cell {
                bounds: cb,
                level: child_level,
                parent: Some(c),
                state: CellState::Active,
                label: None,
            });
        }
        let (xm, ym) = (b.xmid(), b.ymid());
        let mut new_pts = Vec::new();
        if split.splits_t() {
            new_pts.push(Point::new(b.x0, ym));
            new_pts.push(Point::new(b.x1, ym));
        }
        if split.splits_s() {
            new_pts.push(Point::new(xm, b.y0));
            new_pts.push(Point::new(xm, b.y1));
        }
        if split == Split::C {
            new_pts.push(Point::new(xm, ym));
        }
        for p in new_pts {
            self.register_vertex(p, child_level);
        }
        let cell = &mut self.cells[c];
        cell.state = CellState::Subdivided {
            split,
            children: ids.clone(),
        };
        cell.label = Some(split);
        self.pending.push((c, split));
        Ok(ids)
    }

    /// Close the current refinement pass: record the log entry and advance
    /// the mesh level. A pass with no splits is a no-op.
    pub fn commit_level(&mut self) -> bool {
        if self.pending.is_empty() {
            return false;
        }
        let splits = std::mem::take(&mut self.pending);
        self.log.push(LogEntry {
            level: self.level,
            splits,
        });
        self.level += 1;
        true
    }

    /// Rebuild the mesh from its initial knot lines and the generation log.
    pub fn replay(&self) -> Result<TMesh, MeshError> {
        let mut m = TMesh::with_knots(self.s_knots.clone(), self.t_knots.clone())?;
        for entry in &self.log {
            for &(c, split) in &entry.splits {
                m.split_cell(c, split)?;
            }
            m.commit_level();
        }
        Ok(m)
    }

    /// Same cells, vertices, states and levels.
    pub fn same_structure(&self, other: &TMesh) -> bool {
        self.s_knots == other.s_knots
            && self.t_knots == other.t_knots
            && self.cells == other.cells
            && self.vertices == other.vertices
            && self.level == other.level
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let active: Vec<Bounds> = self.active_cells().map(|c| self.cells[c].bounds).collect();
        out.extend(validate_layout(&RawLayout {
            domain: self.lattice_domain(),
            cells: active,
            segments: Vec::new(),
        }));
        for (id, cell) in self.cells.iter().enumerate() {
            if let CellState::Subdivided { split, children } = &cell.state {
                let expect = cell.bounds.split(*split);
                let got: Vec<Bounds> = children.iter().map(|&k| self.cells[k].bounds).collect();
                if expect != got {
                    out.push(Violation::new("children-tile-parent", format!("cell {id}")));
                }
                for &k in children {
                    if self.cells[k].level != cell.level + 1 || self.cells[k].parent != Some(id) {
                        out.push(Violation::new("child-level", format!("cell {k} of parent {id}")));
                    }
                }
            }
        }
        for (v, vert) in self.vertices.iter().enumerate() {
            if self.kind_at(vert.pos).is_none() {
                out.push(Violation::new("vertex-valence", format!("vertex {v} at {:?}", vert.pos)));
            }
        }
        if self.pending.is_empty() {
            match self.replay() {
                Ok(m) if m.same_structure(self) => {}
                _ => out.push(Violation::new("log-replay", "generation log does not reproduce mesh".into())),
            }
        }
        out
    }
}

fn child_slot(split: Split, right: bool, top: bool) -> usize {
    match split {
        Split::H => top as usize,
        Split::V => right as usize,
        Split::C => (top as usize) * 2 + right as usize,
    }
}

fn knot_interval(knots: &[f64], v: f64) -> usize {
    let n = knots.len() - 1;
    match knots.iter().rposition(|&k| k <= v) {
        None => 0,
        Some(i) => i.min(n - 1),
    }
}

fn lattice_to_real(knots: &[f64], x: i64) -> f64 {
    let n = knots.len() as i64 - 1;
    let i = x.div_euclid(UNIT).clamp(0, n - 1);
    let frac = (x - i * UNIT) as f64 / UNIT as f64;
    let (a, b) = (knots[i as usize], knots[i as usize + 1]);
    if frac == 0.0 {
        a
    } else if frac == 1.0 {
        b
    } else {
        a + (b - a) * frac
    }
}

pub fn bounds_adjacency(a: &Bounds, b: &Bounds) -> AdjacencyKind {
    let y_overlap = a.y1.min(b.y1) - a.y0.max(b.y0);
    let x_overlap = a.x1.min(b.x1) - a.x0.max(b.x0);
    if (a.x1 == b.x0 || b.x1 == a.x0) && y_overlap > 0 {
        if a.y0 == b.y0 && a.y1 == b.y1 {
            AdjacencyKind::HorizontallyAligned
        } else {
            AdjacencyKind::AdjacentOnly
        }
    } else if (a.y1 == b.y0 || b.y1 == a.y0) && x_overlap > 0 {
        if a.x0 == b.x0 && a.x1 == b.x1 {
            AdjacencyKind::VerticallyAligned
        } else {
            AdjacencyKind::AdjacentOnly
        }
    } else {
        AdjacencyKind::NotAdjacent
    }
}

/// A broken mesh rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub entity: String,
}

impl Violation {
    fn new(rule: &str, entity: String) -> Self {
        Violation {
            rule: rule.to_string(),
            entity,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.entity)
    }
}

/// Axis-aligned grid-line segment on the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

/// A free-form cell layout, used to validate hand-built meshes that the
/// hierarchical constructor cannot express. `segments` are extra grid lines
/// beyond the cell boundaries.
#[derive(Clone, Debug, Default)]
pub struct RawLayout {
    pub domain: Bounds,
    pub cells: Vec<Bounds>,
    pub segments: Vec<Segment>,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::new(0, 0, 0, 0)
    }
}

pub fn validate_layout(layout: &RawLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let d = layout.domain;
    let mut area: i128 = 0;
    for (i, c) in layout.cells.iter().enumerate() {
        if c.width() <= 0 || c.height() <= 0 {
            out.push(Violation::new("cell-rectangle", format!("cell {i} is degenerate")));
            continue;
        }
        if c.x0 < d.x0 || c.x1 > d.x1 || c.y0 < d.y0 || c.y1 > d.y1 {
            out.push(Violation::new("cell-in-domain", format!("cell {i}")));
        }
        area += c.area();
    }
    let mut order: Vec<usize> = (0..layout.cells.len()).collect();
    order.sort_by_key(|&i| layout.cells[i].x0);
    for (k, &i) in order.iter().enumerate() {
        let a = layout.cells[i];
        for &j in &order[k + 1..] {
            let b = layout.cells[j];
            if b.x0 >= a.x1 {
                break;
            }
            if a.interiors_overlap(&b) {
                out.push(Violation::new("cells-disjoint", format!("cells {i} and {j} overlap")));
            }
        }
    }
    if area != d.area() {
        out.push(Violation::new(
            "cells-tile-domain",
            format!("cell area {area} != domain area {}", d.area()),
        ));
    }
    // Extra grid lines must run along cell boundaries and end on two other
    // grid lines (or the boundary).
    for (i, s) in layout.segments.iter().enumerate() {
        let (lo, hi) = (s.a.min(s.b), s.a.max(s.b));
        let through_cell = layout.cells.iter().any(|c| {
            if lo.x == hi.x {
                lo.x > c.x0 && lo.x < c.x1 && lo.y.max(c.y0) < hi.y.min(c.y1)
            } else {
                lo.y > c.y0 && lo.y < c.y1 && lo.x.max(c.x0) < hi.x.min(c.x1)
            }
        });
        let dangling = [lo, hi].iter().any(|&p| layout.cells.iter().any(|c| c.contains_open(p)));
        if through_cell || dangling {
            out.push(Violation::new(
                "grid-line-endpoints",
                format!("segment {i}: grid-line endpoint not on two grid lines"),
            ));
        }
    }
    out
}

/// Dyadic string for a lattice coordinate relative to the level-0 grid,
/// e.g. `5/4` for one and a quarter intervals.
pub fn dyadic_string(x: i64) -> String {
    if x == 0 {
        return "0".into();
    }
    let tz = x.trailing_zeros().min(FRAC_BITS);
    let num = x >> tz;
    let den_bits = FRAC_BITS - tz;
    if den_bits == 0 {
        format!("{num}")
    } else {
        format!("{num}/{}", 1i64 << den_bits)
    }
}

pub fn parse_dyadic(s: &str) -> Option<i64> {
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim().parse::<i64>().ok()?, d.trim().parse::<i64>().ok()?),
        None => (s.trim().parse::<i64>().ok()?, 1),
    };
    if den <= 0 || den.count_ones() != 1 || den > UNIT {
        return None;
    }
    Some(num * (UNIT / den))
}

/// Census of vertex kinds, computed independently of the vertex table by
/// enumerating cell corners and counting incident edge directions from the
/// active rectangles alone.
pub fn brute_force_census(mesh: &TMesh) -> BTreeMap<&'static str, usize> {
    let rects: Vec<Bounds> = mesh.active_cells().map(|c| mesh.cells()[c].bounds).collect();
    let d = mesh.lattice_domain();
    let mut pts: Vec<Point> = rects.iter().flat_map(|r| r.corners()).collect();
    pts.sort();
    pts.dedup();
    let mut census = BTreeMap::new();
    for p in pts {
        let kind = if p.x == d.x0 || p.x == d.x1 || p.y == d.y0 || p.y == d.y1 {
            "boundary"
        } else {
            let mut dirs = [false; 4];
            for r in &rects {
                if p.y == r.y0 || p.y == r.y1 {
                    if p.x >= r.x0 && p.x < r.x1 {
                        dirs[0] = true;
                    }
                    if p.x > r.x0 && p.x <= r.x1 {
                        dirs[2] = true;
                    }
                }
                if p.x == r.x0 || p.x == r.x1 {
                    if p.y >= r.y0 && p.y < r.y1 {
                        dirs[1] = true;
                    }
                    if p.y > r.y0 && p.y <= r.y1 {
                        dirs[3] = true;
                    }
                }
            }
            match dirs.iter().filter(|&&e| e).count() {
                4 => "crossing",
                3 => "t-junction",
                _ => "invalid",
            }
        };
        *census.entry(kind).or_insert(0) += 1;
    }
    census
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(ns: usize, nt: usize) -> TMesh {
        TMesh::tensor(ns, nt, [0.0, 1.0, 0.0, 1.0]).unwrap()
    }

    fn kinds(m: &TMesh) -> (usize, usize, usize) {
        let k = m.vertex_kinds();
        (
            k.iter().filter(|&&k| k == VertexKind::Boundary).count(),
            k.iter().filter(|&&k| k == VertexKind::Crossing).count(),
            k.iter().filter(|&&k| k == VertexKind::TJunction).count(),
        )
    }

    #[test]
    fn tensor_vertex_counts() {
        assert_eq!(kinds(&unit(1, 1)), (4, 0, 0));
        assert_eq!(kinds(&unit(2, 2)), (8, 1, 0));
        assert_eq!(kinds(&unit(3, 3)), (12, 4, 0));
        assert_eq!(unit(3, 3).active_count(), 9);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(TMesh::tensor(0, 2, [0.0, 1.0, 0.0, 1.0]), Err(MeshError::EmptyGrid { .. })));
        assert!(matches!(TMesh::tensor(2, 2, [0.0, 0.0, 0.0, 1.0]), Err(MeshError::DegenerateDomain(..))));
        assert!(TMesh::with_knots(vec![0.0, 0.5, 0.4], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn dimension_examples() {
        assert_eq!(unit(2, 2).dimension(), 36);
        assert_eq!(unit(1, 1).dimension(), 16);
        let mut m = unit(1, 1);
        m.split_cell(0, Split::C).unwrap();
        assert_eq!(m.dimension(), 36);
    }

    #[test]
    fn cross_on_interior_cell() {
        let mut m = unit(3, 3);
        let before = kinds(&m);
        m.split_cell(4, Split::C).unwrap();
        let after = kinds(&m);
        assert_eq!(after.0, before.0);
        assert_eq!(after.1, before.1 + 1);
        assert_eq!(after.2, before.2 + 4);
    }

    #[test]
    fn half_split_on_boundary_cell() {
        let mut m = unit(3, 3);
        // cell 3 = middle row, left column: left edge on the boundary
        m.split_cell(3, Split::H).unwrap();
        let (b, c, t) = kinds(&m);
        assert_eq!((b, c, t), (13, 4, 1));
    }

    #[test]
    fn aligned_vertical_splits_keep_kinds() {
        let mut m = unit(2, 1);
        assert_eq!(m.adjacency(0, 1).unwrap(), AdjacencyKind::HorizontallyAligned);
        m.split_cell(0, Split::V).unwrap();
        m.split_cell(1, Split::V).unwrap();
        let k = m.vertex_kinds();
        assert!(k.iter().all(|&k| k == VertexKind::Boundary || k == VertexKind::Crossing));
        assert_eq!(kinds(&m), (10, 0, 0));
    }

    #[test]
    fn adjacency_kinds() {
        let mut m = unit(2, 2);
        assert_eq!(m.adjacency(0, 1).unwrap(), AdjacencyKind::HorizontallyAligned);
        assert_eq!(m.adjacency(0, 2).unwrap(), AdjacencyKind::VerticallyAligned);
        assert_eq!(m.adjacency(0, 3).unwrap(), AdjacencyKind::NotAdjacent);
        let kids = m.split_cell(1, Split::H).unwrap();
        assert_eq!(m.adjacency(0, kids[0]).unwrap(), AdjacencyKind::AdjacentOnly);
        assert_eq!(m.adjacency(kids[0], 0).unwrap(), AdjacencyKind::AdjacentOnly);
        assert!(matches!(m.adjacency(0, 1), Err(MeshError::InactiveCell(1))));
    }

    #[test]
    fn stale_level_rejected() {
        let mut m = unit(2, 1);
        m.split_cell(0, Split::C).unwrap();
        m.commit_level();
        let err = m.split_cell(1, Split::C).unwrap_err();
        assert!(matches!(err, MeshError::StaleLevel { cell: 1, .. }));
        assert!(err.to_string().contains("excluded"));
        assert!(matches!(m.split_cell(0, Split::C), Err(MeshError::InactiveCell(0))));
    }

    #[test]
    fn figure_one_classification() {
        // Mesh with crossing, T-junction and boundary vertices.
        let mut m = unit(2, 2);
        m.split_cell(0, Split::C).unwrap();
        let center = m.vertex_at(Point::new(UNIT, UNIT)).unwrap();
        let corner = m.vertex_at(Point::new(0, 0)).unwrap();
        let tv = m.vertex_at(Point::new(UNIT / 2, UNIT)).unwrap();
        assert_eq!(m.classify_vertex(corner).unwrap(), VertexKind::Boundary);
        assert_eq!(m.classify_vertex(center).unwrap(), VertexKind::Crossing);
        assert_eq!(m.classify_vertex(tv).unwrap(), VertexKind::TJunction);
        assert!(matches!(m.classify_vertex(999), Err(MeshError::UnknownVertex(999))));
    }

    #[test]
    fn validate_constructive_meshes() {
        let mut m = unit(3, 2);
        m.split_cell(0, Split::C).unwrap();
        m.split_cell(4, Split::H).unwrap();
        m.commit_level();
        let kid = m.markable_cells()[0];
        m.split_cell(kid, Split::V).unwrap();
        m.commit_level();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
    }

    #[test]
    fn validate_rejects_non_t_mesh() {
        // 2x2 cells plus a grid line dangling into the interior of a cell.
        let u = UNIT;
        let layout = RawLayout {
            domain: Bounds::new(0, 2 * u, 0, 2 * u),
            cells: vec![
                Bounds::new(0, u, 0, u),
                Bounds::new(u, 2 * u, 0, u),
                Bounds::new(0, u, u, 2 * u),
                Bounds::new(u, 2 * u, u, 2 * u),
            ],
            segments: vec![Segment {
                a: Point::new(u / 2, 0),
                b: Point::new(u / 2, u / 2),
            }],
        };
        let v = validate_layout(&layout);
        assert!(v.iter().any(|v| v.entity.contains("grid-line endpoint not on two grid lines")));
    }

    #[test]
    fn validate_rejects_overlap() {
        let u = UNIT;
        let layout = RawLayout {
            domain: Bounds::new(0, 2 * u, 0, u),
            cells: vec![Bounds::new(0, u + u / 2, 0, u), Bounds::new(u, 2 * u, 0, u)],
            segments: vec![],
        };
        let v = validate_layout(&layout);
        assert!(v.iter().any(|v| v.rule == "cells-disjoint"));
        assert!(v.iter().any(|v| v.rule == "cells-tile-domain"));
    }

    #[test]
    fn dyadic_strings_round_trip() {
        for x in [0, UNIT, 5 * UNIT / 4, 3 * UNIT / 1024, 7 * UNIT + 1] {
            assert_eq!(parse_dyadic(&dyadic_string(x)), Some(x));
        }
        assert_eq!(dyadic_string(5 * UNIT / 4), "5/4");
        assert_eq!(parse_dyadic("1/3"), None);
    }

    #[test]
    fn locate_points() {
        let mut m = unit(2, 2);
        let kids = m.split_cell(3, Split::C).unwrap();
        assert_eq!(m.locate(0.25, 0.25).unwrap(), 0);
        assert_eq!(m.locate(0.9, 0.9).unwrap(), kids[3]);
        assert_eq!(m.locate(1.0, 1.0).unwrap(), kids[3]);
        assert_eq!(m.locate(0.5, 0.5).unwrap(), kids[0]);
        assert!(m.locate(1.5, 0.5).is_err());
    }

    #[test]
    fn nonuniform_knots_map_to_real() {
        let m = TMesh::with_knots(vec![0.0, 0.1, 1.0], vec![0.0, 2.0]).unwrap();
        assert_eq!(m.s_of(UNIT), 0.1);
        assert!((m.s_of(UNIT + UNIT / 2) - 0.55).abs() < 1e-15);
        assert_eq!(m.cell_rect(1), [0.1, 1.0, 0.0, 2.0]);
    }
}
