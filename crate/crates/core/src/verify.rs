//! Randomized invariant suites over group refinement sequences, plus
//! the two naive-subdivision counterexamples.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh::{brute_force_census, MeshError, Point, Split, TMesh, VertexKind, UNIT};
use crate::refine::{check_refinement_invariants, naive_refine, refine, RefinementReport, RefinementRequest};
use crate::space::SplineSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Refinement passes per trial are drawn from `1..=depth`.
    pub depth: usize,
    pub trials: usize,
    pub seed: u64,
    /// Initial grids are at most `start_max x start_max`.
    pub start_max: usize,
    /// Probability that a markable cell is marked.
    pub mark_probability: f64,
    /// Random evaluation points per space for the partition-of-unity check.
    pub samples: usize,
    /// Spaces up to this dimension also get a Gram rank check.
    pub gram_limit: usize,
    pub unity_tol: f64,
    pub c1_tol: f64,
    pub roundtrip_tol: f64,
    pub gram_tol: f64,
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            depth: 5,
            trials: 200,
            seed: 2024,
            start_max: 4,
            mark_probability: 0.35,
            samples: 10_000,
            gram_limit: 200,
            unity_tol: 1e-10,
            c1_tol: 1e-9,
            roundtrip_tol: 1e-8,
            gram_tol: 1e-10,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub start: (usize, usize),
    pub levels: usize,
    pub dimension: usize,
    /// `4 (V^b + V^+)` from the mesh vertex classification.
    pub dimension_law: usize,
    /// The same count from an independent rectangle-only census.
    pub census_dimension: usize,
    pub subdivided: usize,
    pub t_to_crossing: usize,
    /// Subdivided cells that gained no new basis vertex.
    pub starved: usize,
    pub invariant_failures: usize,
    pub max_unity_error: f64,
    pub max_c1_jump: f64,
    pub max_roundtrip_error: f64,
    /// Smallest over largest singular value of the Gram matrix, when checked.
    pub gram_ratio: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub name: String,
    /// The naive path produced the defect.
    pub reproduced: bool,
    /// The invariant checker flagged it.
    pub rejected: bool,
    /// Group refinement on the same marks passes the checker.
    pub algorithm_passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub config: VerifyConfig,
    pub trials: Vec<TrialOutcome>,
    pub counterexamples: Vec<Counterexample>,
}

impl VerifySummary {
    pub fn failures(&self) -> usize {
        self.trials.iter().filter(|t| !t.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0 && self.counterexamples.iter().all(|c| c.reproduced && c.rejected && c.algorithm_passes)
    }

    fn max_of(&self, f: impl Fn(&TrialOutcome) -> f64) -> f64 {
        self.trials.iter().map(f).fold(0.0, f64::max)
    }

    /// Human-readable summary; identical for identical configurations.
    pub fn lines(&self) -> Vec<String> {
        let total = |f: fn(&TrialOutcome) -> usize| self.trials.iter().map(f).sum::<usize>();
        let gram: Vec<f64> = self.trials.iter().filter_map(|t| t.gram_ratio).collect();
        let mut out = vec![
            format!(
                "trials {} (depth <= {}, start <= {}x{}, seed {}): {} passed, {} failed",
                self.trials.len(),
                self.config.depth,
                self.config.start_max,
                self.config.start_max,
                self.config.seed,
                self.trials.len() - self.failures(),
                self.failures()
            ),
            format!(
                "dimension law mismatches: {}",
                self.trials.iter().filter(|t| t.dimension != t.dimension_law || t.dimension != t.census_dimension).count()
            ),
            format!("subdivided cells: {}, T->crossing: {}, without new basis vertex: {}", total(|t| t.subdivided), total(|t| t.t_to_crossing), total(|t| t.starved)),
            format!("max partition-of-unity error: {:.3e}", self.max_of(|t| t.max_unity_error)),
            format!("max C1 seam jump: {:.3e}", self.max_of(|t| t.max_c1_jump)),
            format!("max Hermite round-trip error: {:.3e}", self.max_of(|t| t.max_roundtrip_error)),
            format!(
                "Gram checks: {}, smallest singular ratio {:.3e}",
                gram.len(),
                gram.iter().copied().fold(f64::INFINITY, f64::min)
            ),
        ];
        for c in &self.counterexamples {
            out.push(format!(
                "counterexample {}: reproduced {}, rejected {}, group refinement clean {}",
                c.name, c.reproduced, c.rejected, c.algorithm_passes
            ));
        }
        out.push(if self.passed() { "verify: PASS".into() } else { "verify: FAIL".into() });
        out
    }
}

/// Tensor mesh on the unit square with random knot spacing.
pub fn random_start(rng: &mut ChaCha8Rng, max: usize) -> Result<TMesh, MeshError> {
    let (ns, nt) = (rng.gen_range(1..=max), rng.gen_range(1..=max));
    let mut knots = |n: usize| {
        let steps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let sum: f64 = steps.iter().sum();
        let mut k = vec![0.0];
        let mut acc = 0.0;
        for s in &steps[..n - 1] {
            acc += s / sum;
            k.push(acc);
        }
        k.push(1.0);
        k
    };
    let s = knots(ns);
    let t = knots(nt);
    TMesh::with_knots(s, t)
}

/// Random marks and labels on the current level; at least one cell.
pub fn random_request(rng: &mut ChaCha8Rng, mesh: &TMesh, p: f64) -> RefinementRequest {
    let cells = mesh.markable_cells();
    let mut labels = BTreeMap::new();
    for &c in &cells {
        if rng.gen_bool(p) {
            labels.insert(c, [Split::H, Split::V, Split::C][rng.gen_range(0..3)]);
        }
    }
    if labels.is_empty() && !cells.is_empty() {
        labels.insert(cells[rng.gen_range(0..cells.len())], [Split::H, Split::V, Split::C][rng.gen_range(0..3)]);
    }
    RefinementRequest::new(labels)
}

/// A random group refinement sequence with its space.
pub fn random_sequence(
    seed: u64,
    depth: usize,
    start_max: usize,
    p: f64,
) -> Result<(SplineSpace, Vec<(TMesh, TMesh, RefinementReport)>), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = random_start(&mut rng, start_max).map_err(|e| e.to_string())?;
    let levels = rng.gen_range(1..=depth.max(1));
    let mut space = SplineSpace::new(mesh).map_err(|e| e.to_string())?;
    let mut passes = Vec::new();
    for _ in 0..levels {
        let req = random_request(&mut rng, space.mesh(), p);
        let (m, r) = match refine(space.mesh(), &req) {
            Ok(x) => x,
            // cells at the lattice resolution limit end the sequence
            Err(crate::refine::RefineError::Mesh(MeshError::TooDeep(_))) => break,
            Err(e) => return Err(e.to_string()),
        };
        let next = space.advance(&m, &r).map_err(|e| e.to_string())?;
        passes.push((space.mesh().clone(), m, r));
        space = next;
    }
    Ok((space, passes))
}

fn census_dimension(mesh: &TMesh) -> usize {
    let c = brute_force_census(mesh);
    4 * (c.get("boundary").unwrap_or(&0) + c.get("crossing").unwrap_or(&0))
}

pub fn run_trial(cfg: &VerifyConfig, trial: usize) -> TrialOutcome {
    let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64);
    let (mut space, passes) = match random_sequence(seed, cfg.depth, cfg.start_max, cfg.mark_probability) {
        Ok(x) => x,
        Err(e) => {
            log::warn!("trial {trial}: {e}");
            return TrialOutcome {
                trial,
                start: (0, 0),
                levels: 0,
                dimension: 0,
                dimension_law: 0,
                census_dimension: 0,
                subdivided: 0,
                t_to_crossing: 0,
                starved: 0,
                invariant_failures: 1,
                max_unity_error: f64::INFINITY,
                max_c1_jump: f64::INFINITY,
                max_roundtrip_error: f64::INFINITY,
                gram_ratio: None,
                passed: false,
            };
        }
    };
    if cfg.inject_fault {
        space.inject_fault();
    }
    let mut subdivided = 0;
    let mut t_to_crossing = 0;
    let mut starved = 0;
    let mut invariant_failures = 0;
    for (before, after, rep) in &passes {
        subdivided += rep.subdivisions.len();
        t_to_crossing += rep.t_to_crossing;
        starved += rep.subdivisions.iter().filter(|s| s.new_basis_vertices.is_empty()).count();
        if !check_refinement_invariants(before, after, rep).passed {
            invariant_failures += 1;
        }
    }
    let mesh = space.mesh();
    let start = passes.first().map(|p| &p.0).unwrap_or(mesh);
    let rep = space.verify(cfg.samples, seed);
    let gram_ratio = (space.dim() <= cfg.gram_limit).then(|| {
        let sv = space.gram_matrix().singular_values();
        sv.min() / sv.max()
    });
    let dimension_law = mesh.dimension();
    let census = census_dimension(mesh);
    let passed = space.dim() == dimension_law
        && dimension_law == census
        && t_to_crossing == 0
        && starved == 0
        && invariant_failures == 0
        && rep.max_unity_error <= cfg.unity_tol
        && rep.min_value >= -cfg.unity_tol
        && rep.max_c1_jump <= cfg.c1_tol
        && rep.max_roundtrip_error <= cfg.roundtrip_tol
        && rep.bad_supports.is_empty()
        && gram_ratio.map_or(true, |g| g > cfg.gram_tol);
    TrialOutcome {
        trial,
        start: (start.ns(), start.nt()),
        levels: passes.len(),
        dimension: space.dim(),
        dimension_law,
        census_dimension: census,
        subdivided,
        t_to_crossing,
        starved,
        invariant_failures,
        max_unity_error: rep.max_unity_error,
        max_c1_jump: rep.max_c1_jump,
        max_roundtrip_error: rep.max_roundtrip_error,
        gram_ratio,
        passed,
    }
}

fn labels(pairs: &[(usize, Split)]) -> BTreeMap<usize, Split> {
    pairs.iter().copied().collect()
}

/// A T-junction turned into a crossing by two naive passes: a cross split
/// next to a vertical split, then a horizontal split of the neighbour's
/// left child.
pub fn t_to_crossing_counterexample() -> Result<Counterexample, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let m0 = TMesh::tensor(2, 1, [0.0, 1.0, 0.0, 1.0]).map_err(|e| err(&e))?;
    let (m1, _) = naive_refine(&m0, &labels(&[(0, Split::C), (1, Split::V)])).map_err(|e| err(&e))?;
    let b_left = m1.cells()[1].children()[0];
    let (m2, r2) = naive_refine(&m1, &labels(&[(b_left, Split::H)])).map_err(|e| err(&e))?;
    let tv = m1.vertex_at(Point::new(UNIT, UNIT / 2)).ok_or("missing vertex")?;
    let reproduced = r2.t_to_crossing > 0
        && m1.classify_vertex(tv).map_err(|e| err(&e))? == VertexKind::TJunction
        && m2.classify_vertex(tv).map_err(|e| err(&e))? == VertexKind::Crossing;
    let rejected = !check_refinement_invariants(&m1, &m2, &r2).passed;
    let (a1, ra1) = refine(&m0, &RefinementRequest::new(labels(&[(0, Split::C), (1, Split::V)]))).map_err(|e| err(&e))?;
    let mut clean = check_refinement_invariants(&m0, &a1, &ra1).passed;
    let kids = a1.cells()[1].children().to_vec();
    if let Some(&k) = kids.first() {
        let (a2, ra2) = refine(&a1, &RefinementRequest::new(labels(&[(k, Split::H)]))).map_err(|e| err(&e))?;
        clean &= check_refinement_invariants(&a1, &a2, &ra2).passed && ra2.t_to_crossing == 0;
    }
    Ok(Counterexample { name: "T-junction becomes crossing".into(), reproduced, rejected, algorithm_passes: clean })
}

/// A lone interior horizontal split on a 3x3 grid gains no basis vertex.
pub fn starved_cell_counterexample() -> Result<Counterexample, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let m = TMesh::tensor(3, 3, [0.0, 1.0, 0.0, 1.0]).map_err(|e| err(&e))?;
    let (out, rep) = naive_refine(&m, &labels(&[(4, Split::H)])).map_err(|e| err(&e))?;
    let reproduced = rep.subdivisions.iter().any(|s| s.new_basis_vertices.is_empty());
    let rejected = !check_refinement_invariants(&m, &out, &rep).passed;
    let (a, ra) = refine(&m, &RefinementRequest::new(labels(&[(4, Split::H)]))).map_err(|e| err(&e))?;
    let algorithm_passes = check_refinement_invariants(&m, &a, &ra).passed;
    Ok(Counterexample { name: "subdivided cell without new basis vertex".into(), reproduced, rejected, algorithm_passes })
}

pub fn run(cfg: &VerifyConfig) -> VerifySummary {
    let trials: Vec<TrialOutcome> = (0..cfg.trials).into_par_iter().map(|i| run_trial(cfg, i)).collect();
    let mut counterexamples = Vec::new();
    for c in [t_to_crossing_counterexample(), starved_cell_counterexample()] {
        counterexamples.push(c.unwrap_or_else(|e| Counterexample { name: e, reproduced: false, rejected: false, algorithm_passes: false }));
    }
    VerifySummary { config: cfg.clone(), trials, counterexamples }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig { trials: 12, depth: 3, samples: 500, ..Default::default() }
    }

    #[test]
    fn small_run_passes_and_is_deterministic() {
        let a = run(&small());
        assert!(a.passed(), "{:#?}", a.lines());
        let b = run(&small());
        assert_eq!(a.lines(), b.lines());
        assert_eq!(a, b);
    }

    #[test]
    fn injected_fault_is_detected() {
        let s = run(&VerifyConfig { inject_fault: true, ..small() });
        assert!(!s.passed());
        assert_eq!(s.failures(), s.trials.len());
    }

    #[test]
    fn counterexamples_are_reproduced_and_rejected() {
        for c in [t_to_crossing_counterexample().unwrap(), starved_cell_counterexample().unwrap()] {
            assert!(c.reproduced && c.rejected && c.algorithm_passes, "{c:?}");
        }
    }

    #[test]
    fn random_start_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = random_start(&mut rng, 4).unwrap();
            assert!((1..=4).contains(&m.ns()) && (1..=4).contains(&m.nt()));
            assert_eq!(m.domain(), [0.0, 1.0, 0.0, 1.0]);
        }
    }
}
