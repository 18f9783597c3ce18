//! Subcommand drivers. Each one computes everything first and writes its
//! outputs only after success, so a failed run leaves no partial files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anisoline::fitting::{fit_surface, generate_test_model, FitResult, ParamPointSet, TestModel};
use anisoline::iga::problems::{benchmark, Benchmark, REGISTRY};
use anisoline::iga::{adaptive_solve, AdaptiveSolution, Geometry};
use anisoline::mesh::{CellId, Split, TMesh};
use anisoline::refine::{refine, RefinementReport, RefinementRequest};
use anisoline::space::SplineSpace;
use anisoline::verify;
use serde::{Deserialize, Serialize};

use crate::config::{effective_fit, effective_solve, effective_verify, RunConfig, EFFECTIVE_CONFIG};
use crate::formats::{mesh_to_json, solution_vtk, spline_to_json, surface_obj, write_text, SAMPLES_PER_CELL};
use crate::svg::{parameter_mesh, physical_mesh, Overlay};
use crate::{CliError, Result};

/// Exit code for a fit that hit the level cap before converging.
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub code: i32,
    /// Summary printed to stdout.
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Files queued for writing once a command has finished computing.
#[derive(Default)]
struct Outputs {
    files: Vec<(String, String)>,
}

impl Outputs {
    fn add(&mut self, name: impl Into<String>, text: String) {
        self.files.push((name.into(), text));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Parse(e.to_string()))?;
        self.add(name, text + "\n");
        Ok(())
    }

    fn flush(self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut out = Vec::new();
        for (name, text) in self.files {
            let p = dir.join(name);
            write_text(&p, &text)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Points of a built-in model or a CSV/JSON file, with the default initial
/// grid for that input.
pub fn load_fit_input(input: &str, cfg: &RunConfig) -> Result<(ParamPointSet, (usize, usize))> {
    if let Some(model) = TestModel::parse(input) {
        let (n, grid) = match model {
            TestModel::BernsteinExample => (101, (5, 5)),
            _ => (51, (2, 2)),
        };
        let n = cfg.points()?.unwrap_or(n);
        return Ok((generate_test_model(model, n, n)?, grid));
    }
    let path = Path::new(input);
    if !path.exists() {
        return Err(CliError::Parse(format!(
            "{input}: no such file (built-in models: cone, paraboloid, bernstein)"
        )));
    }
    Ok((crate::formats::read_points(path)?, (2, 2)))
}

fn mesh_svgs(out: &mut Outputs, meshes: &[TMesh], refinements: &[RefinementReport], prefix: &str) {
    for (k, m) in meshes.iter().enumerate() {
        let overlay = refinements.get(k).filter(|_| k + 1 < meshes.len()).map(|r| Overlay { report: r, requested: None });
        out.add(
            format!("{prefix}{k}.svg"),
            parameter_mesh(m, &format!("level {k}: {} cells", m.active_count()), overlay.as_ref(), false),
        );
    }
}

pub fn fit(input: &str, cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    let (points, default_grid) = load_fit_input(input, cfg)?;
    let fc = cfg.fit_config(default_grid)?;
    let write_spline = cfg.write_spline()?;
    let FitResult { field, report, meshes, refinements } = fit_surface(&points, &fc)?;
    let mut out = Outputs::default();
    out.add(EFFECTIVE_CONFIG, effective_fit(&fc, input, cfg.seed()?, cfg.points()?, write_spline));
    out.add("report.csv", report.fit_csv());
    out.json("report.json", &report)?;
    out.add("surface.obj", surface_obj(&field, SAMPLES_PER_CELL));
    mesh_svgs(&mut out, &meshes, &refinements, "mesh_level_");
    out.json("mesh.json", &mesh_to_json(field.space.mesh()))?;
    if write_spline {
        out.json("spline.json", &spline_to_json(&field))?;
    }
    let diag = points.bbox_diagonal();
    let mut lines = vec![format!(
        "fit {input}: {} points, tolerance {:e} x diagonal {:.4} = {:.3e}, strategy {}",
        points.len(),
        fc.tolerance,
        diag,
        fc.tolerance * diag,
        fc.strategy.name()
    )];
    for l in &report.levels {
        lines.push(format!(
            "level {} dof {} max_error {:.3e} mean_error {:.3e}",
            l.level,
            l.dof,
            l.max_error.unwrap_or(f64::NAN),
            l.mean_error.unwrap_or(f64::NAN)
        ));
    }
    for w in &report.warnings {
        lines.push(format!("warning: {w}"));
    }
    let code = if report.converged {
        lines.push("converged".into());
        0
    } else {
        lines.push(format!("not converged within {} levels", fc.max_levels));
        EXIT_NOT_CONVERGED
    };
    let files = out.flush(out_dir)?;
    Ok(Outcome { code, lines, files })
}

/// Problem file: a registry name plus an optional initial grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemJson {
    pub problem: String,
    #[serde(default)]
    pub grid: Option<(usize, usize)>,
}

pub fn load_problem(input: &str) -> Result<(String, Benchmark)> {
    if let Some(b) = benchmark(input) {
        return Ok((input.to_string(), b));
    }
    let path = Path::new(input);
    if path.extension().map_or(false, |e| e == "json") && path.exists() {
        let j: ProblemJson = crate::formats::read_json(path)?;
        let mut b = benchmark(&j.problem).ok_or_else(|| CliError::UnknownProblem(j.problem.clone()))?;
        if let Some((ns, nt)) = j.grid {
            b = b.with_grid(ns, nt)?;
        }
        return Ok((j.problem, b));
    }
    Err(CliError::UnknownProblem(input.to_string()))
}

/// Spaces and prolonged geometries of every level of an adaptive run.
fn level_geometries(first: &Geometry, sol: &AdaptiveSolution) -> Result<Vec<Geometry>> {
    let mut out = vec![first.clone()];
    let mut space = first.space().clone();
    for (m, r) in sol.meshes.iter().skip(1).zip(&sol.refinements) {
        space = Arc::new(space.advance(m, r)?);
        let g = out.last().expect("nonempty").prolong(space.clone())?;
        out.push(g);
    }
    Ok(out)
}

pub fn solve(input: &str, cfg: &RunConfig, out_dir: &Path) -> Result<Outcome> {
    let (name, mut bench) = load_problem(input)?;
    if let Some((ns, nt)) = cfg.grid()? {
        bench = bench.with_grid(ns, nt)?;
    }
    let sc = cfg.solve_config()?;
    let geometry = bench.geometry()?;
    let sol = adaptive_solve(&bench.problem, geometry.clone(), &sc)?;
    let geometries = level_geometries(&geometry, &sol)?;
    let mut out = Outputs::default();
    out.add(EFFECTIVE_CONFIG, effective_solve(&sc, &name, (bench.mesh.ns(), bench.mesh.nt()), cfg.seed()?));
    out.add("convergence.csv", sol.report.convergence_csv());
    out.json("report.json", &sol.report)?;
    mesh_svgs(&mut out, &sol.meshes, &sol.refinements, "mesh_param_level_");
    for (k, g) in geometries.iter().enumerate() {
        out.add(format!("mesh_phys_level_{k}.svg"), physical_mesh(g, &format!("{name} level {k}"), 8));
    }
    let exact = bench.problem.exact.as_ref().map(|(u, _)| u);
    out.add("solution.vtk", solution_vtk(&sol.solution, &name, exact, SAMPLES_PER_CELL));
    out.json("mesh.json", &mesh_to_json(sol.solution.field.space.mesh()))?;
    let mut lines = vec![format!("solve {name}: strategy {}, {} levels", sc.strategy.name(), sol.report.levels.len())];
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3e}"));
    for l in &sol.report.levels {
        lines.push(format!("level {} dof {} eta {} L2 {} H1 {}", l.level, l.dof, f(l.eta_total), f(l.l2), f(l.h1)));
    }
    for w in &sol.report.warnings {
        lines.push(format!("warning: {w}"));
    }
    let files = out.flush(out_dir)?;
    Ok(Outcome { code: 0, lines, files })
}

pub fn verify(cfg: &RunConfig, out_dir: Option<&Path>, inject_fault: bool) -> Result<Outcome> {
    let vc = verify::VerifyConfig { inject_fault, ..cfg.verify_config()? };
    let summary = verify::run(&vc);
    let lines = summary.lines();
    let files = match out_dir {
        Some(d) => {
            let mut out = Outputs::default();
            out.add(EFFECTIVE_CONFIG, effective_verify(&vc));
            out.json("verify.json", &summary)?;
            out.add("verify.txt", lines.join("\n") + "\n");
            out.flush(d)?
        }
        None => Vec::new(),
    };
    Ok(Outcome { code: if summary.passed() { 0 } else { 1 }, lines, files })
}

/// Cell reference in a demo script: an id, or `@s,t` for the active cell
/// containing a parameter point.
#[derive(Clone, Debug, PartialEq)]
pub enum CellRef {
    Id(CellId),
    At(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoScript {
    pub grid: (usize, usize),
    /// One entry per refinement pass, with the script line it came from.
    pub passes: Vec<(usize, Vec<(CellRef, Split)>)>,
}

/// `grid NS NT` (optional, before any pass), then one pass per line of
/// `CELL:LABEL` tokens. `#` starts a comment.
pub fn parse_demo_script(text: &str) -> Result<DemoScript> {
    let mut script = DemoScript { grid: (4, 4), passes: Vec::new() };
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| CliError::Parse(format!("script line {line_no}: {m}"));
        if let Some(rest) = line.strip_prefix("grid") {
            if !script.passes.is_empty() {
                return Err(err("grid must come before the first pass".into()));
            }
            let nums: Vec<usize> = rest.split_whitespace().map(|x| x.parse()).collect::<std::result::Result<_, _>>().map_err(|_| err(format!("bad grid '{rest}'")))?;
            match nums[..] {
                [ns, nt] if ns > 0 && nt > 0 => script.grid = (ns, nt),
                _ => return Err(err(format!("grid needs two positive sizes, got '{}'", rest.trim()))),
            }
            continue;
        }
        let mut marks = Vec::new();
        for tok in line.split_whitespace() {
            let (cell, label) = tok.rsplit_once(':').ok_or_else(|| err(format!("expected CELL:LABEL, got '{tok}'")))?;
            let mut lc = label.chars();
            let split = match (lc.next().and_then(Split::from_char), lc.next()) {
                (Some(s), None) => s,
                _ => return Err(err(format!("label must be H, V or C, got '{label}'"))),
            };
            let cref = if let Some(p) = cell.strip_prefix('@') {
                let (s, t) = p.split_once(',').ok_or_else(|| err(format!("expected @s,t, got '{cell}'")))?;
                let s: f64 = s.parse().map_err(|_| err(format!("bad coordinate '{s}'")))?;
                let t: f64 = t.parse().map_err(|_| err(format!("bad coordinate '{t}'")))?;
                CellRef::At(s, t)
            } else {
                CellRef::Id(cell.parse().map_err(|_| err(format!("bad cell id '{cell}'")))?)
            };
            marks.push((cref, split));
        }
        script.passes.push((line_no, marks));
    }
    Ok(script)
}

#[derive(Serialize)]
struct DemoPass<'a> {
    line: usize,
    requested: &'a BTreeMap<CellId, Split>,
    report: &'a RefinementReport,
}

pub fn mesh_demo(script_path: &Path, out_dir: &Path) -> Result<Outcome> {
    let text = std::fs::read_to_string(script_path).map_err(|e| CliError::io(script_path, e))?;
    let script = parse_demo_script(&text)?;
    let mut meshes = vec![TMesh::tensor(script.grid.0, script.grid.1, [0.0, 1.0, 0.0, 1.0])?];
    let mut passes = Vec::new();
    for (line, marks) in &script.passes {
        let mesh = meshes.last().expect("nonempty");
        let mut labels = BTreeMap::new();
        for (c, split) in marks {
            let id = match *c {
                CellRef::Id(id) => id,
                CellRef::At(s, t) => mesh.locate(s, t).map_err(|e| CliError::Parse(format!("script line {line}: {e}")))?,
            };
            if labels.insert(id, *split).is_some() {
                return Err(CliError::Parse(format!("script line {line}: cell {id} is marked twice")));
            }
        }
        let (next, rep) = refine(mesh, &RefinementRequest::new(labels.clone()))
            .map_err(|e| CliError::Parse(format!("script line {line}: {e}")))?;
        meshes.push(next);
        passes.push((*line, labels, rep));
    }
    let mut out = Outputs::default();
    let mut lines = Vec::new();
    for (k, m) in meshes.iter().enumerate() {
        if k > 0 || passes.is_empty() {
            out.add(format!("level_{k}.svg"), parameter_mesh(m, &format!("level {k}"), None, true));
        }
        if let Some((line, req, rep)) = passes.get(k) {
            let ov = Overlay { report: rep, requested: Some(req) };
            out.add(format!("level_{k}_marks.svg"), parameter_mesh(m, &format!("level {k} marks"), Some(&ov), true));
            out.json(&format!("pass_{k}.json"), &DemoPass { line: *line, requested: req, report: rep })?;
            let [h, v, c] = rep.label_histogram();
            lines.push(format!(
                "pass {k} (line {line}): {} marked, {} groups, labels H {h} V {v} C {c}, {} new basis vertices",
                req.len(),
                rep.groups.len(),
                rep.new_basis_vertices.len()
            ));
        }
    }
    let last = meshes.last().expect("nonempty");
    out.json("mesh.json", &mesh_to_json(last))?;
    lines.push(format!("final level {}: {} active cells, dimension {}", last.level(), last.active_count(), last.dimension()));
    let files = out.flush(out_dir)?;
    Ok(Outcome { code: 0, lines, files })
}

/// Dimension of the space on the final mesh of a script, built through the
/// same passes; used to cross-check the demo against the dimension law.
pub fn demo_dimension(script: &DemoScript) -> Result<usize> {
    let mut mesh = TMesh::tensor(script.grid.0, script.grid.1, [0.0, 1.0, 0.0, 1.0])?;
    let mut space = SplineSpace::new(mesh.clone())?;
    for (_, marks) in &script.passes {
        let mut labels = BTreeMap::new();
        for (c, s) in marks {
            let id = match *c {
                CellRef::Id(id) => id,
                CellRef::At(s, t) => mesh.locate(s, t)?,
            };
            labels.insert(id, *s);
        }
        let (next, rep) = refine(&mesh, &RefinementRequest::new(labels))?;
        space = space.advance(&next, &rep)?;
        mesh = next;
    }
    Ok(space.dim())
}

pub fn registry_list() -> String {
    REGISTRY.join(", ")
}
