//! Built-in Poisson problems selectable by name.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector2;

use super::{Geometry, GradientFn, IgaError, MapFn, PoissonProblem, ScalarFn};
use crate::mesh::{Side, TMesh};
use crate::space::SplineSpace;

pub const REGISTRY: [&str; 3] = ["lshape", "square_sin", "patch_linear"];

/// A problem together with its initial mesh and parameterization.
#[derive(Clone)]
pub struct Benchmark {
    pub problem: PoissonProblem,
    pub mesh: TMesh,
    pub map: MapFn,
    /// Parameter preimage of a singular boundary point, if any.
    pub singular_point: Option<(f64, f64)>,
}

impl Benchmark {
    pub fn geometry(&self) -> Result<Geometry, IgaError> {
        let space = Arc::new(SplineSpace::new(self.mesh.clone())?);
        Geometry::from_map(space, &self.map)
    }

    /// Same problem and map on a different initial tensor grid.
    pub fn with_grid(mut self, ns: usize, nt: usize) -> Result<Benchmark, IgaError> {
        self.mesh = TMesh::tensor(ns, nt, [0.0, 1.0, 0.0, 1.0])?;
        Ok(self)
    }
}

pub fn benchmark(name: &str) -> Option<Benchmark> {
    match name {
        "lshape" => Some(lshape_benchmark()),
        "square_sin" => Some(square_sin()),
        "patch_linear" => Some(patch_linear()),
        _ => None,
    }
}

fn identity_map() -> MapFn {
    Arc::new(|s, t| [Vector2::new(s, t), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0), Vector2::zeros()])
}

fn unit_grid(n: usize) -> TMesh {
    TMesh::tensor(n, n, [0.0, 1.0, 0.0, 1.0]).expect("non-empty grid")
}

/// `sin(πx) sin(πy)` on the unit square, homogeneous Dirichlet data.
pub fn square_sin() -> Benchmark {
    let u: ScalarFn = Arc::new(|x, y| (PI * x).sin() * (PI * y).sin());
    let g: GradientFn = Arc::new(|x, y| PI * Vector2::new((PI * x).cos() * (PI * y).sin(), (PI * x).sin() * (PI * y).cos()));
    let problem = PoissonProblem {
        name: "square_sin".into(),
        source: Arc::new(|x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()),
        dirichlet: vec![Side::Left, Side::Right, Side::Bottom, Side::Top],
        dirichlet_data: None,
        neumann_data: None,
        exact: Some((u, g)),
    };
    Benchmark { problem, mesh: unit_grid(2), map: identity_map(), singular_point: None }
}

/// `u = 0.5 + x - 2y`: Dirichlet data on the left and bottom sides, exact
/// flux on the others.
pub fn patch_linear() -> Benchmark {
    let u: ScalarFn = Arc::new(|x, y| 0.5 + x - 2.0 * y);
    let g: GradientFn = Arc::new(|_, _| Vector2::new(1.0, -2.0));
    let problem = PoissonProblem {
        name: "patch_linear".into(),
        source: Arc::new(|_, _| 0.0),
        dirichlet: vec![Side::Left, Side::Bottom],
        dirichlet_data: Some(u.clone()),
        neumann_data: Some(Arc::new(|_, _, n: Vector2<f64>| n.dot(&Vector2::new(1.0, -2.0)))),
        exact: Some((u, g)),
    };
    Benchmark { problem, mesh: unit_grid(3), map: identity_map(), singular_point: None }
}

/// Polar angle in `(0, 2π]`.
fn angle(x: f64, y: f64) -> f64 {
    let a = y.atan2(x);
    if a <= 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

/// `r^{2/3} sin((2θ - π)/3)`.
pub fn lshape_exact(x: f64, y: f64) -> f64 {
    let r = x.hypot(y);
    r.powf(2.0 / 3.0) * ((2.0 * angle(x, y) - PI) / 3.0).sin()
}

pub fn lshape_gradient(x: f64, y: f64) -> Vector2<f64> {
    let r = x.hypot(y);
    if r == 0.0 {
        return Vector2::zeros();
    }
    let th = angle(x, y);
    let phi = (2.0 * th - PI) / 3.0;
    let ur = 2.0 / 3.0 * r.powf(-1.0 / 3.0) * phi.sin();
    let ut = 2.0 / 3.0 * r.powf(-1.0 / 3.0) * phi.cos();
    Vector2::new(ur * th.cos() - ut * th.sin(), ur * th.sin() + ut * th.cos())
}

/// Parameterization of `(-1,1)² \ [0,1]²`. The edge `t = 0` runs along the
/// inner boundary `(0,1) -> (0,0) -> (1,0)`, `t = 1` along the outer one
/// `(-1,1) -> (-1,-1) -> (1,-1)`. Each half is linear in `t` and quadratic
/// in `s`, with `G_s = 0` on `s = 1/2` so the two corners are C¹ kinks of
/// the parameterization (the repeated control point construction).
pub fn lshape_map(s: f64, t: f64) -> [Vector2<f64>; 4] {
    if s <= 0.5 {
        let sig = 2.0 * s;
        let a = 2.0 * sig - sig * sig;
        let da = 4.0 * (1.0 - sig);
        [
            Vector2::new(-t, 1.0 - a - t * a),
            Vector2::new(0.0, -da * (1.0 + t)),
            Vector2::new(-1.0, -a),
            Vector2::new(0.0, -da),
        ]
    } else {
        let sig = 2.0 * s - 1.0;
        let a = sig * sig;
        let da = 4.0 * sig;
        [
            Vector2::new(a * (1.0 + t) - t, -t),
            Vector2::new(da * (1.0 + t), 0.0),
            Vector2::new(a - 1.0, -1.0),
            Vector2::new(da, 0.0),
        ]
    }
}

/// Laplace problem on the L-shaped domain with the corner singularity
/// solution; Dirichlet on the inner edges (`t = 0`), exact flux elsewhere.
pub fn lshape_benchmark() -> Benchmark {
    let u: ScalarFn = Arc::new(lshape_exact);
    let g: GradientFn = Arc::new(lshape_gradient);
    let problem = PoissonProblem {
        name: "lshape".into(),
        source: Arc::new(|_, _| 0.0),
        dirichlet: vec![Side::Bottom],
        dirichlet_data: None,
        neumann_data: Some(Arc::new(|x, y, n: Vector2<f64>| lshape_gradient(x, y).dot(&n))),
        exact: Some((u, g)),
    };
    Benchmark { problem, mesh: unit_grid(4), map: Arc::new(lshape_map), singular_point: Some((0.5, 0.0)) }
}
