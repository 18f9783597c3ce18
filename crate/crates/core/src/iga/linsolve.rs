//! Sparse symmetric positive definite solves: Cholesky after a reverse
//! Cuthill–McKee reordering for moderate sizes, Jacobi-preconditioned CG
//! above that.

use std::collections::VecDeque;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use super::IgaError;

/// Largest system handed to the direct factorization.
pub const DIRECT_LIMIT: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    Cholesky,
    ConjugateGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub method: SolveMethod,
    /// `||A c - F|| / ||F||`.
    pub residual: f64,
    pub iterations: usize,
}

pub fn residual(a: &CscMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let r = b - a * x;
    let nb = b.norm();
    if nb == 0.0 {
        r.norm()
    } else {
        r.norm() / nb
    }
}

/// Reverse Cuthill–McKee ordering of the symmetric pattern of `a`;
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CscMatrix<f64>) -> Vec<usize> {
    let n = a.nrows();
    let (off, rows) = (a.col_offsets(), a.row_indices());
    let adj: Vec<&[usize]> = (0..n).map(|j| &rows[off[j]..off[j + 1]]).collect();
    let degree: Vec<usize> = adj.iter().map(|r| r.len()).collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &start in &by_degree {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !seen[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn permute(a: &CscMatrix<f64>, perm: &[usize]) -> CscMatrix<f64> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut coo = CooMatrix::new(a.nrows(), a.ncols());
    for (i, j, &v) in a.triplet_iter() {
        coo.push(inv[i], inv[j], v);
    }
    CscMatrix::from(&coo)
}

pub fn solve_cholesky(a: &CscMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, IgaError> {
    let perm = reverse_cuthill_mckee(a);
    let pa = permute(a, &perm);
    let chol = CscCholesky::factor(&pa).map_err(|e| IgaError::Singular(format!("{e:?}")))?;
    let pb = DVector::from_iterator(b.len(), perm.iter().map(|&i| b[i]));
    let px = chol.solve(&pb);
    let mut x = DVector::zeros(b.len());
    for (new, &old) in perm.iter().enumerate() {
        x[old] = px[(new, 0)];
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(IgaError::Singular("non-finite solution".into()));
    }
    Ok(x)
}

/// Jacobi-preconditioned conjugate gradients from a zero start.
pub fn solve_pcg(a: &CscMatrix<f64>, b: &DVector<f64>, tol: f64, max_iter: usize) -> Result<(DVector<f64>, usize), IgaError> {
    let n = b.len();
    let mut diag = DVector::zeros(n);
    for (i, j, &v) in a.triplet_iter() {
        if i == j {
            diag[i] += v;
        }
    }
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(IgaError::Singular("non-positive diagonal entry".into()));
    }
    let nb = b.norm();
    let mut x = DVector::zeros(n);
    if nb == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.clone();
    let mut z = r.component_div(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 1..=max_iter {
        let ap = a * &p;
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(IgaError::Singular(format!("CG breakdown at iteration {it}")));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= tol * nb {
            return Ok((x, it));
        }
        z = r.component_div(&diag);
        let rz1 = r.dot(&z);
        p = &z + &p * (rz1 / rz);
        rz = rz1;
    }
    Err(IgaError::NotConverged { residual: residual(a, &x, b), iterations: max_iter })
}

/// Solve `A x = b` for a symmetric positive definite `A`, with at most a
/// few steps of iterative refinement on the direct path.
pub fn solve_spd(a: &CscMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, SolveStats), IgaError> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(IgaError::Singular(format!("shape {}x{} against {}", a.nrows(), a.ncols(), b.len())));
    }
    if b.is_empty() {
        return Ok((DVector::zeros(0), SolveStats { method: SolveMethod::Cholesky, residual: 0.0, iterations: 0 }));
    }
    if a.nrows() <= DIRECT_LIMIT {
        let mut x = solve_cholesky(a, b)?;
        let mut res = residual(a, &x, b);
        let mut steps = 0;
        while res > tol && steps < 3 {
            let r = b - a * &x;
            x += solve_cholesky(a, &r)?;
            res = residual(a, &x, b);
            steps += 1;
        }
        if res > tol {
            return Err(IgaError::NotConverged { residual: res, iterations: steps });
        }
        Ok((x, SolveStats { method: SolveMethod::Cholesky, residual: res, iterations: steps }))
    } else {
        let (x, it) = solve_pcg(a, b, tol, 20 * a.nrows())?;
        let res = residual(a, &x, b);
        Ok((x, SolveStats { method: SolveMethod::ConjugateGradient, residual: res, iterations: it }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_csc(m: &DMatrix<f64>) -> CscMatrix<f64> {
        let mut coo = CooMatrix::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    coo.push(i, j, m[(i, j)]);
                }
            }
        }
        CscMatrix::from(&coo)
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn one_by_one() {
        let a = to_csc(&DMatrix::from_element(1, 1, 4.0));
        let (x, st) = solve_spd(&a, &DVector::from_element(1, 2.0), 1e-12).unwrap();
        assert_eq!(x[0], 0.5);
        assert_eq!(st.method, SolveMethod::Cholesky);
    }

    #[test]
    fn direct_and_cg_match_dense_oracle() {
        let m = random_spd(10, 3);
        let b = DVector::from_fn(10, |i, _| (i as f64).sin());
        let exact = m.clone().cholesky().unwrap().solve(&b);
        let a = to_csc(&m);
        let (x, _) = solve_spd(&a, &b, 1e-12).unwrap();
        assert!((&x - &exact).norm() <= 1e-10 * exact.norm());
        let (y, _) = solve_pcg(&a, &b, 1e-13, 1000).unwrap();
        assert!((&y - &exact).norm() <= 1e-10 * exact.norm());
    }

    #[test]
    fn singular_system_is_an_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(solve_spd(&to_csc(&m), &DVector::from_vec(vec![1.0, 0.0]), 1e-10).is_err());
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(solve_pcg(&to_csc(&z), &DVector::from_vec(vec![1.0, 1.0]), 1e-10, 10).is_err());
    }

    #[test]
    fn rcm_is_a_permutation_and_narrows_a_shuffled_band() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut shuffle: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            shuffle.swap(i, rng.gen_range(0..=i));
        }
        let mut coo = CooMatrix::new(n, n);
        for i in 0..n {
            coo.push(shuffle[i], shuffle[i], 4.0);
            if i + 1 < n {
                coo.push(shuffle[i], shuffle[i + 1], -1.0);
                coo.push(shuffle[i + 1], shuffle[i], -1.0);
            }
        }
        let a = CscMatrix::from(&coo);
        let p = reverse_cuthill_mckee(&a);
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let pa = permute(&a, &p);
        let band = pa.triplet_iter().map(|(i, j, _)| i.abs_diff(j)).max().unwrap();
        assert_eq!(band, 1);
    }
}
