use super::problems::*;
use super::*;
use approx::assert_abs_diff_eq;

fn unit_space(n: usize) -> Arc<SplineSpace> {
    Arc::new(SplineSpace::new(TMesh::tensor(n, n, [0.0, 1.0, 0.0, 1.0]).unwrap()).unwrap())
}

fn constant(v: f64) -> ScalarFn {
    Arc::new(move |_, _| v)
}

fn all_dirichlet(source: ScalarFn) -> PoissonProblem {
    PoissonProblem {
        name: "test".into(),
        source,
        dirichlet: SIDES.to_vec(),
        dirichlet_data: None,
        neumann_data: None,
        exact: None,
    }
}

fn max_asymmetry(a: &CscMatrix<f64>) -> (f64, f64) {
    let dense = nalgebra::DMatrix::from(a);
    let asym = (&dense - dense.transpose()).abs().max();
    (asym, dense.abs().max())
}

#[test]
fn single_cell_identity_without_source() {
    let geo = Geometry::identity(unit_space(1)).unwrap();
    let sys = assemble(&geo, &all_dirichlet(constant(0.0)), 4).unwrap();
    assert_eq!(sys.rhs.len(), 16);
    assert!(sys.rhs.iter().all(|&v| v == 0.0));
    let (asym, norm) = max_asymmetry(&sys.matrix);
    assert!(asym <= 1e-14 * norm);
    // constants are in the kernel before constraints
    let ones = DVector::from_element(16, 1.0);
    assert!((&sys.matrix * ones).amax() < 1e-13);
}

#[test]
fn quadrature_weights_sum_to_the_area() {
    let b = lshape_benchmark();
    let geo = b.geometry().unwrap();
    let mut area = 0.0;
    for c in geo.space().mesh().active_cells() {
        area += cell_points(&geo, c, 4).unwrap().iter().map(|p| p.2).sum::<f64>();
    }
    assert_abs_diff_eq!(area, 3.0, epsilon = 1e-12);
    let geo = Geometry::identity(unit_space(3)).unwrap();
    let f = all_dirichlet(constant(1.0));
    let sys = assemble(&geo, &f, 4).unwrap();
    // partition of unity: the load of f = 1 sums to the area
    assert_abs_diff_eq!(sys.rhs.sum(), 1.0, epsilon = 1e-12);
}

#[test]
fn doubling_quadrature_leaves_polynomial_stiffness_unchanged() {
    let geo = Geometry::identity(unit_space(2)).unwrap();
    let p = all_dirichlet(constant(0.0));
    let a = nalgebra::DMatrix::from(&assemble(&geo, &p, 4).unwrap().matrix);
    let b = nalgebra::DMatrix::from(&assemble(&geo, &p, 8).unwrap().matrix);
    assert!((a - b).amax() <= 1e-10);
}

#[test]
fn lshape_map_is_reproduced_and_stays_in_the_domain() {
    let b = lshape_benchmark();
    let geo = b.geometry().unwrap();
    for i in 0..=20 {
        for j in 0..=20 {
            let (s, t) = (i as f64 / 20.0, j as f64 / 20.0);
            let x = geo.eval(s, t).unwrap();
            let exact = lshape_map(s, t)[0];
            assert!((x - exact).norm() < 1e-12, "({s}, {t}) -> {x} vs {exact}");
            assert!(x.x >= -1.0 - 1e-12 && x.x <= 1.0 + 1e-12 && x.y >= -1.0 - 1e-12 && x.y <= 1.0 + 1e-12);
            assert!(!(x.x > 1e-12 && x.y > 1e-12), "image point {x} lies in the removed quadrant");
        }
    }
    assert!(geo.eval(0.5, 0.0).unwrap().norm() < 1e-14);
    assert!((geo.eval(0.5, 1.0).unwrap() - Vector2::new(-1.0, -1.0)).norm() < 1e-14);
    assert!((geo.eval(0.0, 1.0).unwrap() - Vector2::new(-1.0, 1.0)).norm() < 1e-14);
    assert!((geo.eval(1.0, 1.0).unwrap() - Vector2::new(1.0, -1.0)).norm() < 1e-14);
}

#[test]
fn lshape_exact_solution_values() {
    assert_abs_diff_eq!(lshape_exact(0.0, 0.7), 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(lshape_exact(-1.0, 0.0), 3f64.sqrt() / 2.0, epsilon = 1e-14);
    assert_abs_diff_eq!(lshape_exact(0.4, -1e-300), 0.0, epsilon = 1e-12);
    // gradient against central differences
    let (x, y, h) = (-0.3, -0.45, 1e-6);
    let g = lshape_gradient(x, y);
    let fd = Vector2::new(
        (lshape_exact(x + h, y) - lshape_exact(x - h, y)) / (2.0 * h),
        (lshape_exact(x, y + h) - lshape_exact(x, y - h)) / (2.0 * h),
    );
    assert!((g - fd).norm() < 1e-7);
}

#[test]
fn laplacian_pullback_on_a_curved_map() {
    // u = x² + y² has Δu = 4 whatever the map
    let b = lshape_benchmark();
    let geo = b.geometry().unwrap();
    let mesh = geo.space().mesh();
    for (s, t) in [(0.13, 0.4), (0.77, 0.81), (0.42, 0.06)] {
        let c = mesh.locate(s, t).unwrap();
        let f = geo.frame(c, s, t).unwrap();
        let d = geo.field.derivatives_in_cell(c, s, t);
        let (g, gs, gt, gss, gst, gtt) = (d[0], d[1], d[2], d[3], d[4], d[5]);
        let u = [
            g.norm_squared(),
            2.0 * g.dot(&gs),
            2.0 * g.dot(&gt),
            2.0 * (gs.dot(&gs) + g.dot(&gss)),
            2.0 * (gs.dot(&gt) + g.dot(&gst)),
            2.0 * (gt.dot(&gt) + g.dot(&gtt)),
        ];
        assert_abs_diff_eq!(f.laplacian(&u), 4.0, epsilon = 1e-9);
        assert!((f.gradient(u[1], u[2]) - 2.0 * g).norm() < 1e-12);
    }
}

#[test]
fn patch_test_reproduces_linear_solution() {
    let b = patch_linear();
    let geo = b.geometry().unwrap();
    let sol = solve(&geo, &b.problem, 4, 1e-12).unwrap();
    let (u, g) = b.problem.exact.clone().unwrap();
    let (l2, h1) = exact_error_norms(&sol, &u, &g, 5).unwrap();
    assert!(l2 <= 1e-9 && h1 <= 1e-9, "{l2} {h1}");
    let ind = error_indicators(&sol, &b.problem, 5).unwrap();
    assert!(ind.total <= 1e-10, "{}", ind.total);
    let rss = ind.cells.values().map(|c| c.eta * c.eta).sum::<f64>().sqrt();
    assert_abs_diff_eq!(ind.total, rss, epsilon = 1e-15);
}

#[test]
fn dirichlet_fit_reproduces_linear_data() {
    let geo = Geometry::identity(unit_space(3)).unwrap();
    let mut p = all_dirichlet(constant(0.0));
    p.dirichlet_data = Some(Arc::new(|x, _| x));
    let fixed = dirichlet_values(&geo, &p, 4).unwrap();
    let mut c = vec![0.0; geo.space().dim()];
    for (&i, &v) in &fixed {
        c[i] = v;
    }
    let field = SplineField::new(geo.space().clone(), c).unwrap();
    for k in 0..=30 {
        let r = k as f64 / 30.0;
        for (s, t) in [(r, 0.0), (r, 1.0), (0.0, r), (1.0, r)] {
            assert_abs_diff_eq!(field.value(s, t).unwrap(), s, epsilon = 1e-8);
        }
    }
}

#[test]
fn homogeneous_dirichlet_pins_boundary_value_slots() {
    let geo = Geometry::identity(unit_space(2)).unwrap();
    let fixed = dirichlet_values(&geo, &all_dirichlet(constant(0.0)), 4).unwrap();
    assert!(fixed.values().all(|&v| v == 0.0));
    // 9 vertices, 8 on the boundary; only the interior one keeps all 4
    let free = geo.space().dim() - fixed.len();
    assert!(free >= 4);
    let interior = geo.space().anchors()[&crate::mesh::Point::new(crate::mesh::UNIT, crate::mesh::UNIT)];
    assert!(interior.iter().all(|i| !fixed.contains_key(i)));
}

#[test]
fn pure_neumann_is_rejected() {
    let geo = Geometry::identity(unit_space(1)).unwrap();
    let mut p = all_dirichlet(constant(0.0));
    p.dirichlet.clear();
    assert!(matches!(solve(&geo, &p, 4, 1e-10), Err(IgaError::Problem(_))));
}

#[test]
fn indicator_of_zero_solution_with_unit_source() {
    let geo = Geometry::identity(unit_space(1)).unwrap();
    let field = SplineField::new(geo.space().clone(), vec![0.0; 16]).unwrap();
    let sol = DiscreteSolution {
        field,
        geometry: geo,
        stats: SolveStats { method: SolveMethod::Cholesky, residual: 0.0, iterations: 0 },
    };
    let ind = error_indicators(&sol, &all_dirichlet(constant(1.0)), 4).unwrap();
    let c = ind.cells.values().next().unwrap();
    assert_abs_diff_eq!(c.diameter, 2f64.sqrt(), epsilon = 1e-14);
    assert_abs_diff_eq!(c.eta, 2f64.sqrt(), epsilon = 1e-12);
    let u1: ScalarFn = constant(1.0);
    let g0: GradientFn = Arc::new(|_, _| Vector2::zeros());
    let (l2, h1) = exact_error_norms(&sol, &u1, &g0, 4).unwrap();
    assert_abs_diff_eq!(l2, 1.0, epsilon = 1e-12);
    assert_eq!(h1, 0.0);
}

fn solution_from(data: impl Fn(f64, f64) -> [f64; 4]) -> DiscreteSolution {
    let geo = Geometry::identity(unit_space(2)).unwrap();
    let field = SplineField::from_hermite(geo.space().clone(), data).unwrap();
    DiscreteSolution { field, geometry: geo, stats: SolveStats { method: SolveMethod::Cholesky, residual: 0.0, iterations: 0 } }
}

#[test]
fn solution_labels() {
    let cells: Vec<CellId> = (0..4).collect();
    let vary_s = solution_from(|s, _| [s * s * s, 3.0 * s * s, 0.0, 0.0]);
    let l = label_by_solution(&vary_s, &cells, 2.0, 0.5, 9);
    assert!(l.values().filter(|&&x| x == Split::V).count() >= 3, "{l:?}");
    let vary_t = solution_from(|_, t| [t * t, 0.0, 2.0 * t, 0.0]);
    assert!(label_by_solution(&vary_t, &cells, 2.0, 0.5, 9).values().all(|&x| x == Split::H));
    let flat = solution_from(|_, _| [2.5, 0.0, 0.0, 0.0]);
    assert!(label_by_solution(&flat, &cells, 2.0, 0.5, 9).values().all(|&x| x == Split::C));
    // radially symmetric about the centre vertex (0.5, 0.5)
    let radial = solution_from(|s, t| {
        let (x, y) = (s - 0.5, t - 0.5);
        [x * x + y * y, 2.0 * x, 2.0 * y, 0.0]
    });
    assert!(label_by_solution(&radial, &cells, 2.0, 0.5, 9).values().all(|&x| x == Split::C));
}

#[test]
fn resolved_problem_stops_at_level_zero() {
    let b = patch_linear();
    let cfg = SolveConfig { max_levels: 3, ..Default::default() };
    let run = adaptive_solve(&b.problem, b.geometry().unwrap(), &cfg).unwrap();
    assert!(run.report.converged);
    assert_eq!(run.report.levels.len(), 1);
}

#[test]
fn uniform_refinement_keeps_dof_accounting() {
    let b = square_sin();
    let cfg = SolveConfig { marking: Marking::Uniform, max_levels: 2, ..Default::default() };
    let run = adaptive_solve(&b.problem, b.geometry().unwrap(), &cfg).unwrap();
    assert_eq!(run.report.levels.len(), 3);
    assert!(run.report.dof_accounting_holds());
    let l2: Vec<f64> = run.report.levels.iter().map(|l| l.l2.unwrap()).collect();
    assert!(l2.windows(2).all(|w| w[1] < w[0] / 8.0), "{l2:?}");
}

#[test]
fn dorfler_marks_the_largest_indicators() {
    let mut ind = ErrorIndicator::default();
    for (c, e) in [(0, 3.0), (1, 1.0), (2, 2.0), (3, 0.5)] {
        ind.cells.insert(c, CellIndicator { eta: e, diameter: 1.0 });
    }
    ind.total = (9.0f64 + 1.0 + 4.0 + 0.25).sqrt();
    assert_eq!(mark(&ind, &[0, 1, 2, 3], Marking::Dorfler(0.8)), vec![0, 2]);
    assert_eq!(mark(&ind, &[0, 1, 2, 3], Marking::Threshold(1.5)), vec![0, 2]);
    assert_eq!(mark(&ind, &[1, 3], Marking::Uniform), vec![1, 3]);
}

#[test]
fn bad_configs_are_rejected() {
    for cfg in [
        SolveConfig { delta0: 0.9, ..Default::default() },
        SolveConfig { delta1: 1.2, ..Default::default() },
        SolveConfig { quadrature: 3, ..Default::default() },
        SolveConfig { marking: Marking::Dorfler(0.0), ..Default::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
    assert!(benchmark("nope").is_none());
    for n in REGISTRY {
        assert!(benchmark(n).is_some());
    }
}
