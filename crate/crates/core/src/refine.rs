//! Anisotropic refinement: connected-group classification, label
//! resolution and subdivision of the marked cells of the current level.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{
    AdjacencyKind, CellId, MeshError, Point, Quadrant, Split, TMesh, VertexId, VertexKind,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("marked cell {0} has no label")]
    MissingLabel(CellId),
    #[error("cell {0} is marked twice")]
    DuplicateMark(CellId),
}

/// A set of marked cells linked by aligned-adjacency; adjacent members are
/// always aligned-adjacent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectedGroup {
    pub id: usize,
    pub cells: Vec<CellId>,
    /// Aligned-adjacent member pairs `(a, b, kind)` with `a < b`.
    pub links: Vec<(CellId, CellId, AdjacencyKind)>,
}

impl ConnectedGroup {
    fn neighbors_of(&self, c: CellId, kind: AdjacencyKind) -> impl Iterator<Item = CellId> + '_ {
        self.links.iter().filter_map(move |&(a, b, k)| {
            if k != kind {
                None
            } else if a == c {
                Some(b)
            } else if b == c {
                Some(a)
            } else {
                None
            }
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementRequest {
    pub marked: Vec<CellId>,
    pub labels: BTreeMap<CellId, Split>,
}

impl RefinementRequest {
    pub fn new(labels: BTreeMap<CellId, Split>) -> Self {
        RefinementRequest {
            marked: labels.keys().copied().collect(),
            labels,
        }
    }

    pub fn uniform(cells: &[CellId], split: Split) -> Self {
        RefinementRequest::new(cells.iter().map(|&c| (c, split)).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.marked.is_empty()
    }
}

/// Label policy: the anisotropic labels as given, or every label forced to
/// a cross split (classical hierarchical refinement).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    Modified,
    CrossOnly,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "modified" => Some(Strategy::Modified),
            "cross_only" => Some(Strategy::CrossOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Modified => "modified",
            Strategy::CrossOnly => "cross_only",
        }
    }

    pub fn request(self, labels: BTreeMap<CellId, Split>) -> RefinementRequest {
        match self {
            Strategy::Modified => RefinementRequest::new(labels),
            Strategy::CrossOnly => RefinementRequest::new(labels.into_keys().map(|c| (c, Split::C)).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdivisionRecord {
    pub cell: CellId,
    pub split: Split,
    pub children: Vec<CellId>,
    pub new_basis_vertices: Vec<VertexId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    /// Level of the subdivided cells (the mesh level before refinement).
    pub level: u32,
    pub groups: Vec<ConnectedGroup>,
    pub final_labels: BTreeMap<CellId, Split>,
    pub subdivisions: Vec<SubdivisionRecord>,
    pub new_basis_vertices: Vec<VertexId>,
    pub t_to_crossing: usize,
}

impl RefinementReport {
    pub fn is_empty(&self) -> bool {
        self.subdivisions.is_empty()
    }

    pub fn label_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for s in self.final_labels.values() {
            h[*s as usize] += 1;
        }
        h
    }
}

fn check_marks(mesh: &TMesh, marked: &[CellId]) -> Result<(), RefineError> {
    let mut seen = BTreeSet::new();
    for &c in marked {
        let cell = mesh.cell(c)?;
        if !cell.is_active() {
            return Err(MeshError::InactiveCell(c).into());
        }
        if cell.level != mesh.level() {
            return Err(MeshError::StaleLevel {
                cell: c,
                cell_level: cell.level,
                mesh_level: mesh.level(),
            }
            .into());
        }
        if !seen.insert(c) {
            return Err(RefineError::DuplicateMark(c));
        }
    }
    Ok(())
}

/// Partition the marked cells into connected groups by flood fill through
/// aligned-adjacent pairs, in ascending id order. A cell that is adjacent
/// but not aligned to a member of the growing group is left for a later group.
pub fn flood_fill_groups(mesh: &TMesh, marked: &[CellId]) -> Result<Vec<ConnectedGroup>, RefineError> {
    check_marks(mesh, marked)?;
    let marked_set: BTreeSet<CellId> = marked.iter().copied().collect();
    let mut assigned: BTreeSet<CellId> = BTreeSet::new();
    let mut groups = Vec::new();
    for &seed in &marked_set {
        if assigned.contains(&seed) {
            continue;
        }
        let mut members: BTreeSet<CellId> = BTreeSet::new();
        let mut queue = VecDeque::new();
        members.insert(seed);
        assigned.insert(seed);
        queue.push_back(seed);
        while let Some(m) = queue.pop_front() {
            let mut cand = mesh.neighbors(m);
            cand.sort_unstable();
            cand.dedup();
            for n in cand {
                if !marked_set.contains(&n) || assigned.contains(&n) {
                    continue;
                }
                if !mesh.adjacency(m, n)?.is_aligned() {
                    continue;
                }
                let conflict = mesh.neighbors(n).into_iter().any(|o| {
                    members.contains(&o)
                        && matches!(mesh.adjacency(n, o), Ok(AdjacencyKind::AdjacentOnly))
                });
                if conflict {
                    continue;
                }
                members.insert(n);
                assigned.insert(n);
                queue.push_back(n);
            }
        }
        groups.push(build_group(mesh, groups.len(), members)?);
    }
    Ok(groups)
}

fn build_group(mesh: &TMesh, id: usize, members: BTreeSet<CellId>) -> Result<ConnectedGroup, RefineError> {
    let mut links = Vec::new();
    for &a in &members {
        let mut ns = mesh.neighbors(a);
        ns.sort_unstable();
        ns.dedup();
        for b in ns {
            if b > a && members.contains(&b) {
                let k = mesh.adjacency(a, b)?;
                if k.is_aligned() {
                    links.push((a, b, k));
                }
            }
        }
    }
    Ok(ConnectedGroup {
        id,
        cells: members.into_iter().collect(),
        links,
    })
}

/// Points a split of `cell` would create, in lattice coordinates.
pub fn split_points(mesh: &TMesh, cell: CellId, split: Split) -> Vec<Point> {
    let b = mesh.cells()[cell].bounds;
    let (xm, ym) = (b.xmid(), b.ymid());
    let mut pts = Vec::new();
    if split.splits_t() {
        pts.push(Point::new(b.x0, ym));
        pts.push(Point::new(b.x1, ym));
    }
    if split.splits_s() {
        pts.push(Point::new(xm, b.y0));
        pts.push(Point::new(xm, b.y1));
    }
    if split == Split::C {
        pts.push(Point::new(xm, ym));
    }
    pts
}

/// Kind of the lattice point `p` after the cells in `proposed` are split as
/// given, leaving every other cell untouched. Returns `None` if `p` would
/// not be a vertex.
pub fn predicted_kind(mesh: &TMesh, p: Point, proposed: &BTreeMap<CellId, Split>) -> Option<VertexKind> {
    if mesh.on_boundary(p) {
        return Some(VertexKind::Boundary);
    }
    let mut dirs = mesh.incident_edges(p);
    for q in [Quadrant::NE, Quadrant::NW, Quadrant::SE, Quadrant::SW] {
        let Some(c) = mesh.quadrant_cell(p, q) else { continue };
        let Some(&split) = proposed.get(&c) else { continue };
        let b = mesh.cells()[c].bounds;
        if split.splits_t() && p.y == b.ymid() && p.x >= b.x0 && p.x <= b.x1 {
            if p.x < b.x1 {
                dirs[0] = true;
            }
            if p.x > b.x0 {
                dirs[2] = true;
            }
        }
        if split.splits_s() && p.x == b.xmid() && p.y >= b.y0 && p.y <= b.y1 {
            if p.y < b.y1 {
                dirs[1] = true;
            }
            if p.y > b.y0 {
                dirs[3] = true;
            }
        }
    }
    match dirs.iter().filter(|&&d| d).count() {
        4 => Some(VertexKind::Crossing),
        3 => Some(VertexKind::TJunction),
        _ => None,
    }
}

/// Whether splitting `cell` jointly with the rest of `proposed` creates at
/// least one new basis vertex on its closure.
pub fn gains_basis_vertex(mesh: &TMesh, cell: CellId, proposed: &BTreeMap<CellId, Split>) -> bool {
    let split = proposed[&cell];
    split_points(mesh, cell, split).into_iter().any(|p| {
        mesh.vertex_at(p).is_none() && matches!(predicted_kind(mesh, p, proposed), Some(k) if k.is_basis())
    })
}

/// Resolve the final subdivision type of every member of a group.
pub fn resolve_labels(
    mesh: &TMesh,
    group: &ConnectedGroup,
    labels: &BTreeMap<CellId, Split>,
) -> Result<BTreeMap<CellId, Split>, RefineError> {
    let mut proposed = BTreeMap::new();
    for &c in &group.cells {
        let l = *labels.get(&c).ok_or(RefineError::MissingLabel(c))?;
        proposed.insert(c, l);
    }
    let first = proposed[&group.cells[0]];
    let identical = proposed.values().all(|&l| l == first);
    if identical {
        if first == Split::C {
            return Ok(proposed);
        }
        // H needs a horizontal partner (or the boundary) to create a basis
        // vertex; failing cells and their column inside the group become C.
        let chain = if first == Split::H {
            AdjacencyKind::VerticallyAligned
        } else {
            AdjacencyKind::HorizontallyAligned
        };
        let starved: Vec<CellId> = group
            .cells
            .iter()
            .copied()
            .filter(|&c| !gains_basis_vertex(mesh, c, &proposed))
            .collect();
        let mut relabel = BTreeSet::new();
        let mut queue: VecDeque<CellId> = starved.into_iter().collect();
        while let Some(c) = queue.pop_front() {
            if !relabel.insert(c) {
                continue;
            }
            for n in group.neighbors_of(c, chain) {
                if !relabel.contains(&n) {
                    queue.push_back(n);
                }
            }
        }
        for c in relabel {
            proposed.insert(c, Split::C);
        }
        Ok(proposed)
    } else {
        let mut out = BTreeMap::new();
        for &c in &group.cells {
            let h = group.neighbors_of(c, AdjacencyKind::HorizontallyAligned).next().is_some();
            let v = group.neighbors_of(c, AdjacencyKind::VerticallyAligned).next().is_some();
            let l = match (h, v) {
                (true, false) => Split::H,
                (false, true) => Split::V,
                _ => Split::C,
            };
            out.insert(c, l);
        }
        Ok(out)
    }
}

/// Run the full anisotropic refinement pass on the current level.
pub fn refine(mesh: &TMesh, request: &RefinementRequest) -> Result<(TMesh, RefinementReport), RefineError> {
    if request.is_empty() {
        return Ok((
            mesh.clone(),
            RefinementReport {
                level: mesh.level(),
                ..Default::default()
            },
        ));
    }
    for c in &request.marked {
        if !request.labels.contains_key(c) {
            return Err(RefineError::MissingLabel(*c));
        }
    }
    let groups = flood_fill_groups(mesh, &request.marked)?;
    let mut final_labels = BTreeMap::new();
    for g in &groups {
        final_labels.extend(resolve_labels(mesh, g, &request.labels)?);
    }
    apply_splits(mesh, groups, final_labels)
}

/// Subdivide exactly as labelled, bypassing group resolution. Used to
/// reproduce the failure modes the resolution step exists to prevent.
pub fn naive_refine(mesh: &TMesh, labels: &BTreeMap<CellId, Split>) -> Result<(TMesh, RefinementReport), RefineError> {
    let marked: Vec<CellId> = labels.keys().copied().collect();
    let groups = flood_fill_groups(mesh, &marked)?;
    apply_splits(mesh, groups, labels.clone())
}

fn apply_splits(
    mesh: &TMesh,
    groups: Vec<ConnectedGroup>,
    final_labels: BTreeMap<CellId, Split>,
) -> Result<(TMesh, RefinementReport), RefineError> {
    let before_kinds = mesh.vertex_kinds();
    let n_before = mesh.vertices().len();
    let mut out = mesh.clone();
    let mut subdivisions = Vec::new();
    for (&c, &split) in &final_labels {
        let children = out.split_cell(c, split)?;
        subdivisions.push(SubdivisionRecord {
            cell: c,
            split,
            children,
            new_basis_vertices: Vec::new(),
        });
    }
    out.commit_level();
    let after_kinds = out.vertex_kinds();
    let new_basis: Vec<VertexId> = (n_before..out.vertices().len())
        .filter(|&v| after_kinds[v].is_basis())
        .collect();
    let t_to_crossing = (0..n_before)
        .filter(|&v| before_kinds[v] == VertexKind::TJunction && after_kinds[v] == VertexKind::Crossing)
        .count();
    for rec in &mut subdivisions {
        rec.new_basis_vertices = split_points(mesh, rec.cell, rec.split)
            .into_iter()
            .filter_map(|p| out.vertex_at(p))
            .filter(|&v| v >= n_before && after_kinds[v].is_basis())
            .collect();
    }
    let report = RefinementReport {
        level: mesh.level(),
        groups,
        final_labels,
        subdivisions,
        new_basis_vertices: new_basis,
        t_to_crossing,
    };
    Ok((out, report))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub passed: bool,
    pub diagnostics: Vec<String>,
}

/// Check the guarantees of a refinement pass: no T-junction became a
/// crossing vertex, every subdivided cell gained a basis vertex, and each
/// group image has no T-junction on its interior edges.
pub fn check_refinement_invariants(before: &TMesh, after: &TMesh, report: &RefinementReport) -> InvariantCheck {
    let mut diagnostics = Vec::new();
    let before_kinds = before.vertex_kinds();
    let after_kinds = after.vertex_kinds();
    for (v, (&b, &a)) in before_kinds.iter().zip(after_kinds.iter()).enumerate() {
        if b == VertexKind::TJunction && a == VertexKind::Crossing {
            diagnostics.push(format!(
                "T-junction {v} at {:?} changed into a crossing vertex",
                before.vertices()[v].pos
            ));
        }
    }
    let n_before = before.vertices().len();
    for rec in &report.subdivisions {
        let gained = split_points(before, rec.cell, rec.split)
            .into_iter()
            .filter_map(|p| after.vertex_at(p))
            .any(|v| v >= n_before && after_kinds[v].is_basis());
        if !gained {
            diagnostics.push(format!("cell {} ({}) gained no new basis vertex", rec.cell, rec.split));
        }
    }
    for img in group_images(after, report) {
        let set: BTreeSet<CellId> = img.iter().copied().collect();
        for &c in &img {
            for n in after.neighbors(c) {
                if set.contains(&n) && !matches!(after.adjacency(c, n), Ok(k) if k.is_aligned()) {
                    diagnostics.push(format!("T-junction on interior edge between cells {c} and {n}"));
                }
            }
        }
    }
    diagnostics.dedup();
    InvariantCheck {
        passed: diagnostics.is_empty(),
        diagnostics,
    }
}

/// Children of each group's cells, one list per group.
pub fn group_images(after: &TMesh, report: &RefinementReport) -> Vec<Vec<CellId>> {
    report
        .groups
        .iter()
        .map(|g| {
            g.cells
                .iter()
                .flat_map(|&c| after.cells()[c].children().to_vec())
                .collect()
        })
        .collect()
}
