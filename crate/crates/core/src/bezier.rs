//! Bicubic Bernstein–Bézier patches over a single cell.
//!
//! Ordinates are stored as `b[i][j]`, `i` running along t (0 = t_min) and `j`
//! along s (0 = s_min). A patch lives on the unit square; callers map the
//! owning cell affinely and apply the chain rule for derivatives.

use std::ops::{Add, Mul, Sub};

use nalgebra::SVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::Split;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BezierError {
    #[error("derivative order ({0}, {1}) exceeds 2")]
    DerivativeOrder(usize, usize),
    #[error("cell dimensions must be positive, got {0} x {1}")]
    CellSize(f64, f64),
}

/// Values a patch can carry: scalars or small fixed-size vectors.
pub trait Ordinate: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> + PartialEq {
    fn zero() -> Self;
}

impl Ordinate for f64 {
    fn zero() -> Self {
        0.0
    }
}

impl<const N: usize> Ordinate for SVector<f64, N> {
    fn zero() -> Self {
        SVector::zeros()
    }
}

/// Cell corner, numbered like [`crate::mesh::Bounds::corners`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Corner {
    SW = 0,
    SE = 1,
    NW = 2,
    NE = 3,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::SW, Corner::SE, Corner::NW, Corner::NE];

    /// (row, col) of the corner ordinate and the unit steps into the patch.
    fn frame(self) -> (usize, usize, isize, isize) {
        match self {
            Corner::SW => (0, 0, 1, 1),
            Corner::SE => (0, 3, 1, -1),
            Corner::NW => (3, 0, -1, 1),
            Corner::NE => (3, 3, -1, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BezierPatch<T: Ordinate = f64> {
    pub b: [[T; 4]; 4],
}

/// Hermite data `(f, f_s, f_t, f_st)` at a cell corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerData<T: Ordinate = f64> {
    pub f: T,
    pub fs: T,
    pub ft: T,
    pub fst: T,
}

impl<T: Ordinate> CornerData<T> {
    pub fn as_array(&self) -> [T; 4] {
        [self.f, self.fs, self.ft, self.fst]
    }
}

/// Cubic Bernstein polynomials (or their `d`-th derivative) at `u`.
pub fn bernstein3(u: f64, d: usize) -> [f64; 4] {
    let w = 1.0 - u;
    match d {
        0 => [w * w * w, 3.0 * u * w * w, 3.0 * u * u * w, u * u * u],
        1 => [-3.0 * w * w, 3.0 * w * (1.0 - 3.0 * u), 3.0 * u * (2.0 - 3.0 * u), 3.0 * u * u],
        2 => [6.0 * w, 18.0 * u - 12.0, 6.0 - 18.0 * u, 6.0 * u],
        3 => [-6.0, 18.0, -18.0, 6.0],
        _ => [0.0; 4],
    }
}

fn split_row<T: Ordinate>(p: [T; 4]) -> ([T; 4], [T; 4]) {
    let h = |a: T, b: T| (a + b) * 0.5;
    let p01 = h(p[0], p[1]);
    let p12 = h(p[1], p[2]);
    let p23 = h(p[2], p[3]);
    let p012 = h(p01, p12);
    let p123 = h(p12, p23);
    let mid = h(p012, p123);
    ([p[0], p01, p012, mid], [mid, p123, p23, p[3]])
}

impl<T: Ordinate> BezierPatch<T> {
    pub fn zero() -> Self {
        BezierPatch { b: [[T::zero(); 4]; 4] }
    }

    pub fn constant(c: T) -> Self {
        BezierPatch { b: [[c; 4]; 4] }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut b = [[T::zero(); 4]; 4];
        for (i, row) in b.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = f(i, j);
            }
        }
        BezierPatch { b }
    }

    pub fn is_zero(&self) -> bool {
        self.b.iter().flatten().all(|&x| x == T::zero())
    }

    /// Row-major `(i, j)` ordinates.
    pub fn ordinates(&self) -> impl Iterator<Item = T> + '_ {
        self.b.iter().flatten().copied()
    }

    /// `d^(a+b) / du^a dv^b` in local coordinates.
    pub fn eval(&self, u: f64, v: f64, deriv: (usize, usize)) -> Result<T, BezierError> {
        if deriv.0 + deriv.1 > 2 {
            return Err(BezierError::DerivativeOrder(deriv.0, deriv.1));
        }
        Ok(self.eval_unchecked(&bernstein3(u, deriv.0), &bernstein3(v, deriv.1)))
    }

    /// Contract with precomputed Bernstein values along s (`bu`) and t (`bv`).
    #[inline]
    pub fn eval_unchecked(&self, bu: &[f64; 4], bv: &[f64; 4]) -> T {
        let mut acc = T::zero();
        for i in 0..4 {
            let mut row = T::zero();
            for j in 0..4 {
                row = row + self.b[i][j] * bu[j];
            }
            acc = acc + row * bv[i];
        }
        acc
    }

    fn split_s(&self) -> (Self, Self) {
        let mut l = Self::zero();
        let mut r = Self::zero();
        for i in 0..4 {
            let (a, b) = split_row(self.b[i]);
            l.b[i] = a;
            r.b[i] = b;
        }
        (l, r)
    }

    fn split_t(&self) -> (Self, Self) {
        let mut lo = Self::zero();
        let mut hi = Self::zero();
        for j in 0..4 {
            let col = [self.b[0][j], self.b[1][j], self.b[2][j], self.b[3][j]];
            let (a, b) = split_row(col);
            for i in 0..4 {
                lo.b[i][j] = a[i];
                hi.b[i][j] = b[i];
            }
        }
        (lo, hi)
    }

    /// De Casteljau split at the parameter midpoint; children ordered like
    /// [`crate::mesh::Bounds::split`].
    pub fn split(&self, split: Split) -> Vec<Self> {
        match split {
            Split::H => {
                let (lo, hi) = self.split_t();
                vec![lo, hi]
            }
            Split::V => {
                let (l, r) = self.split_s();
                vec![l, r]
            }
            Split::C => {
                let (l, r) = self.split_s();
                let (ll, lh) = l.split_t();
                let (rl, rh) = r.split_t();
                vec![ll, rl, lh, rh]
            }
        }
    }

    /// Hermite data at a corner of a `w x h` cell.
    pub fn corner_data(&self, corner: Corner, w: f64, h: f64) -> Result<CornerData<T>, BezierError> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(BezierError::CellSize(w, h));
        }
        let (i0, j0, di, dj) = corner.frame();
        let i1 = (i0 as isize + di) as usize;
        let j1 = (j0 as isize + dj) as usize;
        let (ss, st) = (dj as f64, di as f64);
        let b = &self.b;
        Ok(CornerData {
            f: b[i0][j0],
            fs: (b[i0][j1] - b[i0][j0]) * (3.0 * ss / w),
            ft: (b[i1][j0] - b[i0][j0]) * (3.0 * st / h),
            fst: (b[i1][j1] - b[i1][j0] - b[i0][j1] + b[i0][j0]) * (9.0 * ss * st / (w * h)),
        })
    }

    /// Overwrite the 2x2 corner block so that the corner carries `data`.
    pub fn set_corner_data(&mut self, corner: Corner, w: f64, h: f64, data: &CornerData<T>) {
        let (i0, j0, di, dj) = corner.frame();
        let i1 = (i0 as isize + di) as usize;
        let j1 = (j0 as isize + dj) as usize;
        let (ss, st) = (dj as f64, di as f64);
        let es = data.fs * (ss * w / 3.0);
        let et = data.ft * (st * h / 3.0);
        let twist = data.fst * (ss * st * w * h / 9.0);
        self.b[i0][j0] = data.f;
        self.b[i0][j1] = data.f + es;
        self.b[i1][j0] = data.f + et;
        self.b[i1][j1] = data.f + es + et + twist;
    }

    /// Zero the 2x2 ordinate block owned by a corner.
    pub fn zero_corner_block(&self, corner: Corner) -> Self {
        let mut out = *self;
        let (i0, j0, di, dj) = corner.frame();
        let i1 = (i0 as isize + di) as usize;
        let j1 = (j0 as isize + dj) as usize;
        for i in [i0, i1] {
            for j in [j0, j1] {
                out.b[i][j] = T::zero();
            }
        }
        out
    }
}

/// Bicubic Hermite patch on a `w x h` cell from corner data.
pub fn hermite_patch<T: Ordinate>(corners: &[CornerData<T>; 4], w: f64, h: f64) -> BezierPatch<T> {
    let mut p = BezierPatch::zero();
    for (k, c) in Corner::ALL.iter().enumerate() {
        p.set_corner_data(*c, w, h, &corners[k]);
    }
    p
}
