//! Clamped cubic B-splines on an interval with a modified boundary basis.
//!
//! The raw space on `N + 4` clamped equidistant knots has `N` B-splines but
//! only `N - 2` distinct knots. To collocate at the knots themselves, the first
//! five and the last five B-splines are replaced by four combinations each
//! (rows of [`BOUNDARY_MATRIX`]). The resulting basis keeps full cubic
//! reproduction, and at each endpoint exactly one basis function has a
//! nonzero value, one a nonzero first derivative and one a nonzero second
//! derivative.
//!
//! Indices are zero-based throughout. Evaluation is right-continuous at
//! interior knots and takes the left limit at the right endpoint.

use crate::error::{Error, Result};
use crate::sparse::{CscMatrix, LuOptions, SparseLu};

/// Cubic order.
pub const ORDER: usize = 4;

/// Coefficients of the four left boundary functions in terms of the first
/// five raw B-splines. Row `i` is `B_i`; the right end mirrors it.
///
/// Every row is orthogonal to `(6, -12, 9, -4, 1)`, the normal of the space
/// spanned by the Marsden coefficients of `1, x, x², x³` on a clamped
/// equidistant head. That forces `A[2][3] = 9/8`; with `3/4` there the
/// quadratic is not reproduced.
pub const BOUNDARY_MATRIX: [[f64; 5]; 4] = [
    [1.0, 1.0, 1.0, 0.75, 0.0],
    [0.0, 0.25, 0.75, 15.0 / 16.0, 0.0],
    [0.0, 0.0, 0.5, 9.0 / 8.0, 0.0],
    [0.0, 0.0, 0.0, 0.25, 1.0],
];

/// Smallest number of grid points for which the two boundary blocks use
/// disjoint raw B-splines.
pub const MIN_GRID_POINTS: usize = 8;

/// Clamped equidistant knot sequence on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    a: f64,
    b: f64,
    grid_points: usize,
    knots: Vec<f64>,
    /// The same sequence in units of the spacing starting at 0. Evaluation
    /// runs on these integer knots so that endpoint cancellations are exact.
    unit: Vec<f64>,
}

impl KnotVector {
    /// Knot vector with `grid_points` distinct knots (the collocation grid),
    /// i.e. `grid_points + 2` raw B-splines and spacing
    /// `(b - a) / (grid_points - 1)`.
    pub fn uniform(a: f64, b: f64, grid_points: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidArgument(format!("bad interval [{a}, {b}]")));
        }
        if grid_points < MIN_GRID_POINTS {
            return Err(Error::InvalidArgument(format!(
                "need at least {MIN_GRID_POINTS} grid points, got {grid_points}"
            )));
        }
        let h = (b - a) / (grid_points - 1) as f64;
        let mut knots = Vec::with_capacity(grid_points + 6);
        knots.extend([a; 4]);
        knots.extend((1..grid_points - 1).map(|k| a + h * k as f64));
        knots.extend([b; 4]);
        let last = (grid_points - 1) as f64;
        let mut unit = vec![0.0; 4];
        unit.extend((1..grid_points - 1).map(|k| k as f64));
        unit.extend([last; 4]);
        Ok(Self { a, b, grid_points, knots, unit })
    }

    /// Knot vector described by its raw B-spline count `n` (so `n + 4`
    /// knots and `n - 2` distinct ones).
    pub fn from_raw_count(a: f64, b: f64, n: usize) -> Result<Self> {
        if n < MIN_GRID_POINTS + 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least {} raw B-splines, got {n}",
                MIN_GRID_POINTS + 2
            )));
        }
        Self::uniform(a, b, n - 2)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Number of distinct knots.
    pub fn grid_points(&self) -> usize {
        self.grid_points
    }

    /// Number of raw B-splines.
    pub fn raw_count(&self) -> usize {
        self.grid_points + 2
    }

    pub fn spacing(&self) -> f64 {
        (self.b - self.a) / (self.grid_points - 1) as f64
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// The distinct knots, `a` and `b` included.
    pub fn grid(&self) -> Vec<f64> {
        self.knots[3..3 + self.grid_points].to_vec()
    }

    /// Knot vector with halved spacing; the old spline space is a subspace
    /// of the new one.
    pub fn refine(&self) -> Self {
        Self::uniform(self.a, self.b, 2 * self.grid_points - 1).expect("refinement of a valid knot vector")
    }

    fn check(&self, x: f64) -> Result<()> {
        if x >= self.a && x <= self.b {
            Ok(())
        } else {
            Err(Error::OutsideDomain { x, a: self.a, b: self.b })
        }
    }

    /// `x` in units of the spacing, exactly `0` at `a` and `N - 1` at `b`,
    /// with the span index `k`, `unit[k] <= t < unit[k + 1]` (the last
    /// nonempty span at `b`).
    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.raw_count();
        if x >= self.b {
            return (n - 1, (self.grid_points - 1) as f64);
        }
        let t = ((x - self.a) / self.spacing()).clamp(0.0, (self.grid_points - 1) as f64);
        let k = self.unit.partition_point(|&u| u <= t);
        ((k - 1).clamp(ORDER - 1, n - 1), t)
    }

    /// Values and first two derivatives, with respect to `x` in units of the
    /// spacing, of the four raw B-splines that can be nonzero at `x`.
    /// Returns the index of the first one.
    fn local_raw(&self, x: f64) -> (usize, [[f64; 4]; 3]) {
        let (span, t) = self.locate(x);
        (span + 1 - ORDER, cubic_ders(&self.unit, span, t))
    }

    /// Factors taking unit derivatives of order 0, 1, 2 to derivatives in `x`.
    fn scales(&self) -> [f64; 3] {
        let h = self.spacing();
        [1.0, 1.0 / h, 1.0 / (h * h)]
    }
}

/// Derivatives 0..=2 of the cubic B-splines `span-3 ..= span` at `x`
/// (triangular scheme with derivative recursion).
fn cubic_ders(t: &[f64], span: usize, x: f64) -> [[f64; 4]; 3] {
    const P: usize = 3;
    let mut ndu = [[0.0f64; 4]; 4];
    let mut left = [0.0f64; 4];
    let mut right = [0.0f64; 4];
    ndu[0][0] = 1.0;
    for j in 1..=P {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = [[0.0f64; 4]; 3];
    for j in 0..=P {
        ders[0][j] = ndu[j][P];
    }
    let mut a = [[0.0f64; 4]; 2];
    for r in 0..=P {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=2usize {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = P - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { P - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    // Multiply through by p!/(p-k)!.
    for j in 0..=P {
        ders[1][j] *= 3.0;
        ders[2][j] *= 6.0;
    }
    ders
}

/// Value (`deriv = 0`) or derivative of raw B-spline `i` at `x`.
pub fn eval_raw_bspline(knots: &KnotVector, i: usize, x: f64, deriv: usize) -> Result<f64> {
    let n = knots.raw_count();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    if deriv > 2 {
        return Err(Error::DerivativeOrder(deriv));
    }
    knots.check(x)?;
    let (first, ders) = knots.local_raw(x);
    Ok(if (first..first + 4).contains(&i) { ders[deriv][i - first] * knots.scales()[deriv] } else { 0.0 })
}

/// Nonzero modified basis functions at one point with value, first and
/// second derivative.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    len: usize,
    index: [usize; 8],
    jet: [[f64; 3]; 8],
}

impl LocalBasis {
    fn new() -> Self {
        Self { len: 0, index: [0; 8], jet: [[0.0; 3]; 8] }
    }

    fn add(&mut self, i: usize, w: f64, d: [f64; 3]) {
        for k in 0..self.len {
            if self.index[k] == i {
                for m in 0..3 {
                    self.jet[k][m] += w * d[m];
                }
                return;
            }
        }
        self.index[self.len] = i;
        self.jet[self.len] = [w * d[0], w * d[1], w * d[2]];
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(basis index, [value, d/dx, d²/dx²])` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, [f64; 3])> + '_ {
        (0..self.len).map(move |k| (self.index[k], self.jet[k]))
    }
}

/// The modified basis of dimension `grid_points` over a knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedBasis {
    knots: KnotVector,
}

impl ModifiedBasis {
    pub fn new(knots: KnotVector) -> Self {
        Self { knots }
    }

    pub fn uniform(a: f64, b: f64, grid_points: usize) -> Result<Self> {
        Ok(Self::new(KnotVector::uniform(a, b, grid_points)?))
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.grid_points()
    }

    pub fn refine(&self) -> Self {
        Self::new(self.knots.refine())
    }

    /// Modified functions receiving raw B-spline `j`, with weights.
    fn raw_to_modified(&self, j: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.knots.raw_count();
        let dim = self.dim();
        if j <= 4 {
            for (i, row) in BOUNDARY_MATRIX.iter().enumerate() {
                if row[j] != 0.0 {
                    f(i, row[j]);
                }
            }
        } else if j + 5 >= n {
            let l = n - 1 - j;
            for (k, row) in BOUNDARY_MATRIX.iter().enumerate() {
                if row[l] != 0.0 {
                    f(dim - 1 - k, row[l]);
                }
            }
        } else {
            f(j - 1, 1.0);
        }
    }

    /// All modified basis functions that may be nonzero at `x`.
    pub fn local(&self, x: f64) -> Result<LocalBasis> {
        self.knots.check(x)?;
        let (first, ders) = self.knots.local_raw(x);
        let mut out = LocalBasis::new();
        for r in 0..4 {
            let d = [ders[0][r], ders[1][r], ders[2][r]];
            self.raw_to_modified(first + r, |i, w| out.add(i, w, d));
        }
        // Scaled after combining, so cancellations at the ends stay exact.
        let s = self.knots.scales();
        for jet in &mut out.jet[..out.len] {
            for m in 1..3 {
                jet[m] *= s[m];
            }
        }
        Ok(out)
    }

    /// Value or derivative of modified basis function `i` at `x`.
    pub fn eval(&self, i: usize, x: f64, deriv: usize) -> Result<f64> {
        if i >= self.dim() {
            return Err(Error::IndexOutOfRange { index: i, len: self.dim() });
        }
        if deriv > 2 {
            return Err(Error::DerivativeOrder(deriv));
        }
        Ok(self.local(x)?.iter().find(|&(k, _)| k == i).map_or(0.0, |(_, d)| d[deriv]))
    }

    /// Integral of every basis function over `[a, b]`.
    pub fn integrals(&self) -> Vec<f64> {
        let t = self.knots.knots();
        let mut out = vec![0.0; self.dim()];
        for j in 0..self.knots.raw_count() {
            let raw = (t[j + 4] - t[j]) / 4.0;
            self.raw_to_modified(j, |i, w| out[i] += w * raw);
        }
        out
    }

    /// Coefficients reproducing the monomial `x^m`, `m <= 3`, exactly.
    ///
    /// Raw coefficients come from Marsden's identity; the boundary blocks solve
    /// `Aᵀ C = B` for the four modified coefficients at each end.
    pub fn monomial_coeffs(&self, m: usize) -> Result<Vec<f64>> {
        if m > 3 {
            return Err(Error::InvalidArgument(format!("monomial degree {m} > 3")));
        }
        let t = self.knots.knots();
        let n = self.knots.raw_count();
        let raw: Vec<f64> = (0..n)
            .map(|j| {
                let (p, q, r) = (t[j + 1], t[j + 2], t[j + 3]);
                match m {
                    0 => 1.0,
                    1 => (p + q + r) / 3.0,
                    2 => (p * q + p * r + q * r) / 3.0,
                    _ => p * q * r,
                }
            })
            .collect();
        let dim = self.dim();
        let mut c = vec![0.0; dim];
        c[4..dim - 4].copy_from_slice(&raw[5..dim - 3]);
        let left = solve_boundary_block(&raw[..5]);
        let right_raw: Vec<f64> = (0..5).map(|l| raw[n - 1 - l]).collect();
        let right = solve_boundary_block(&right_raw);
        for k in 0..4 {
            c[k] = left[k];
            c[dim - 1 - k] = right[k];
        }
        Ok(c)
    }
}

/// Solves `Aᵀ c = b` (five equations, four unknowns, consistent for
/// Marsden data) using the lower-triangular rows 0, 1, 2 and 4.
fn solve_boundary_block(b: &[f64]) -> [f64; 4] {
    let a = &BOUNDARY_MATRIX;
    let c0 = b[0] / a[0][0];
    let c1 = (b[1] - a[0][1] * c0) / a[1][1];
    let c2 = (b[2] - a[0][2] * c0 - a[1][2] * c1) / a[2][2];
    let c3 = b[4] / a[3][4];
    debug_assert!(
        (a[0][3] * c0 + a[1][3] * c1 + a[2][3] * c2 + a[3][3] * c3 - b[3]).abs()
            <= 1e-9 * (1.0 + b[3].abs()),
        "boundary block inconsistent"
    );
    [c0, c1, c2, c3]
}

/// A one-dimensional spline in the modified basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spline1D {
    basis: ModifiedBasis,
    coeffs: Vec<f64>,
}

impl Spline1D {
    pub fn new(basis: ModifiedBasis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of dimension {}",
                coeffs.len(),
                basis.dim()
            )));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn basis(&self) -> &ModifiedBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, x: f64, deriv: usize) -> Result<f64> {
        if deriv > 2 {
            return Err(Error::DerivativeOrder(deriv));
        }
        Ok(self.basis.local(x)?.iter().map(|(i, d)| self.coeffs[i] * d[deriv]).sum())
    }

    /// The same function on once-refined knots.
    pub fn prolong(&self) -> Result<Spline1D> {
        let fine = self.basis.refine();
        let interp = Interpolator1D::new(&fine)?;
        let values = fine.knots().grid().iter().map(|&x| self.eval(x, 0)).collect::<Result<Vec<_>>>()?;
        Spline1D::new(fine, interp.solve(&values))
    }
}

/// Factorized knot-interpolation system of a modified basis.
#[derive(Debug, Clone)]
pub struct Interpolator1D {
    lu: SparseLu,
}

impl Interpolator1D {
    pub fn new(basis: &ModifiedBasis) -> Result<Self> {
        let grid = basis.knots().grid();
        let mut triplets = Vec::with_capacity(4 * grid.len());
        for (row, &x) in grid.iter().enumerate() {
            for (i, d) in basis.local(x)?.iter() {
                if d[0] != 0.0 {
                    triplets.push((row, i, d[0]));
                }
            }
        }
        let m = CscMatrix::from_triplets(grid.len(), basis.dim(), &triplets);
        Ok(Self { lu: SparseLu::factor(&m, &LuOptions::default())? })
    }

    /// Coefficients whose spline takes `values` at the grid points.
    pub fn solve(&self, values: &[f64]) -> Vec<f64> {
        self.lu.solve(values)
    }
}
