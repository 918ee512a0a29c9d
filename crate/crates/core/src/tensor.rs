//! Tensor-product spline surfaces on a rectangle.

use crate::bspline::{Interpolator1D, LocalBasis, ModifiedBasis};
use crate::error::{Error, Result};

/// Value, gradient and Hessian at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

/// One tensor basis function evaluated at a point: global index and
/// `[B, B_x, B_y, B_xx, B_xy, B_yy]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisJet {
    pub index: usize,
    pub d: [f64; 6],
}

impl BasisJet {
    pub fn value(&self) -> f64 {
        self.d[0]
    }

    pub fn grad(&self) -> [f64; 2] {
        [self.d[1], self.d[2]]
    }

    pub fn hess(&self) -> [[f64; 2]; 2] {
        [[self.d[3], self.d[4]], [self.d[4], self.d[5]]]
    }
}

/// Pair of 1D bases spanning the tensor space. Basis function `(i, j)` has
/// global index `i * dim_y + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasis {
    pub x: ModifiedBasis,
    pub y: ModifiedBasis,
}

impl TensorBasis {
    pub fn new(x: ModifiedBasis, y: ModifiedBasis) -> Self {
        Self { x, y }
    }

    /// Square `[a, b]²` with `n` grid points per axis.
    pub fn square(a: f64, b: f64, n: usize) -> Result<Self> {
        let m = ModifiedBasis::uniform(a, b, n)?;
        Ok(Self { x: m.clone(), y: m })
    }

    /// Rectangle `[x0, x1] × [y0, y1]` with `n` grid points per axis.
    pub fn rect(x0: f64, x1: f64, y0: f64, y1: f64, n: usize) -> Result<Self> {
        Ok(Self { x: ModifiedBasis::uniform(x0, x1, n)?, y: ModifiedBasis::uniform(y0, y1, n)? })
    }

    pub fn dim(&self) -> usize {
        self.x.dim() * self.y.dim()
    }

    pub fn refine(&self) -> Self {
        Self { x: self.x.refine(), y: self.y.refine() }
    }

    /// Same rectangle with `n` grid points per axis.
    pub fn with_grid_points(&self, n: usize) -> Result<Self> {
        let kx = self.x.knots();
        let ky = self.y.knots();
        Self::rect(kx.a(), kx.b(), ky.a(), ky.b(), n)
    }

    pub fn bounds(&self) -> [[f64; 2]; 2] {
        let kx = self.x.knots();
        let ky = self.y.knots();
        [[kx.a(), kx.b()], [ky.a(), ky.b()]]
    }

    fn check(&self, p: [f64; 2]) -> Result<()> {
        let [[x0, x1], [y0, y1]] = self.bounds();
        if !(x0..=x1).contains(&p[0]) {
            return Err(Error::OutsideDomain { x: p[0], a: x0, b: x1 });
        }
        if !(y0..=y1).contains(&p[1]) {
            return Err(Error::OutsideDomain { x: p[1], a: y0, b: y1 });
        }
        Ok(())
    }

    /// All tensor basis functions that may be nonzero at `p`, with jets.
    pub fn local(&self, p: [f64; 2]) -> Result<Vec<BasisJet>> {
        self.check(p)?;
        let lx = self.x.local(p[0])?;
        let ly = self.y.local(p[1])?;
        Ok(tensor_jets(&lx, &ly, self.y.dim()))
    }
}

fn tensor_jets(lx: &LocalBasis, ly: &LocalBasis, dim_y: usize) -> Vec<BasisJet> {
    let mut out = Vec::with_capacity(lx.len() * ly.len());
    for (i, bx) in lx.iter() {
        for (j, by) in ly.iter() {
            out.push(BasisJet {
                index: i * dim_y + j,
                d: [
                    bx[0] * by[0],
                    bx[1] * by[0],
                    bx[0] * by[1],
                    bx[2] * by[0],
                    bx[1] * by[1],
                    bx[0] * by[2],
                ],
            });
        }
    }
    out
}

/// Jet of `Σ c_k B_k` from precomputed basis jets.
pub fn combine(jets: &[BasisJet], coeffs: &[f64]) -> Jet {
    let mut d = [0.0; 6];
    for b in jets {
        let c = coeffs[b.index];
        for k in 0..6 {
            d[k] += c * b.d[k];
        }
    }
    Jet { value: d[0], grad: [d[1], d[2]], hess: [[d[3], d[4]], [d[4], d[5]]] }
}

/// A spline `Σ c_ij B_i(x) B_j(y)` with coefficients stored row-major by the
/// x index.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSurface {
    basis: TensorBasis,
    coeffs: Vec<f64>,
}

impl SplineSurface {
    pub fn new(basis: TensorBasis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a {}x{} tensor basis",
                coeffs.len(),
                basis.x.dim(),
                basis.y.dim()
            )));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zeros(basis: TensorBasis) -> Self {
        let n = basis.dim();
        Self { basis, coeffs: vec![0.0; n] }
    }

    pub fn basis(&self) -> &TensorBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn eval(&self, p: [f64; 2]) -> Result<Jet> {
        Ok(combine(&self.basis.local(p)?, &self.coeffs))
    }

    pub fn value(&self, p: [f64; 2]) -> Result<f64> {
        self.basis.check(p)?;
        let lx = self.basis.x.local(p[0])?;
        let ly = self.basis.y.local(p[1])?;
        let dy = self.basis.y.dim();
        let mut s = 0.0;
        for (i, bx) in lx.iter() {
            for (j, by) in ly.iter() {
                s += self.coeffs[i * dy + j] * bx[0] * by[0];
            }
        }
        Ok(s)
    }

    /// The same function on once-refined knots.
    pub fn prolong(&self) -> Result<SplineSurface> {
        self.resample(self.basis.refine())
    }

    /// Interpolant of this surface on another basis over the same rectangle
    /// (exact when the target space contains this one).
    pub fn resample(&self, target: TensorBasis) -> Result<SplineSurface> {
        interpolate(|p| self.value(p).expect("grid point inside the rectangle"), target)
    }
}

/// A collocation point: a knot pair, with the outward normal for boundary
/// points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollocationPoint {
    pub p: [f64; 2],
    pub grid: [usize; 2],
    pub normal: Option<[f64; 2]>,
}

/// Knot pairs of a tensor basis, interior points first.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationGrid {
    points: Vec<CollocationPoint>,
    n_interior: usize,
}

impl CollocationGrid {
    pub fn points(&self) -> &[CollocationPoint] {
        &self.points
    }

    pub fn interior(&self) -> &[CollocationPoint] {
        &self.points[..self.n_interior]
    }

    pub fn boundary(&self) -> &[CollocationPoint] {
        &self.points[self.n_interior..]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// All distinct knot pairs; boundary points carry outward normals, corners
/// the normalized sum of the two edge normals.
pub fn collocation_points(basis: &TensorBasis) -> CollocationGrid {
    let gx = basis.x.knots().grid();
    let gy = basis.y.knots().grid();
    let (nx, ny) = (gx.len(), gy.len());
    let mut interior = Vec::with_capacity((nx - 2) * (ny - 2));
    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    for (ix, &x) in gx.iter().enumerate() {
        for (iy, &y) in gy.iter().enumerate() {
            let ex: f64 = if ix == 0 { -1.0 } else if ix == nx - 1 { 1.0 } else { 0.0 };
            let ey: f64 = if iy == 0 { -1.0 } else if iy == ny - 1 { 1.0 } else { 0.0 };
            let point = CollocationPoint { p: [x, y], grid: [ix, iy], normal: None };
            if ex == 0.0 && ey == 0.0 {
                interior.push(point);
            } else {
                let len = (ex * ex + ey * ey).sqrt();
                boundary.push(CollocationPoint { normal: Some([ex / len, ey / len]), ..point });
            }
        }
    }
    let n_interior = interior.len();
    interior.extend(boundary);
    CollocationGrid { points: interior, n_interior }
}

/// Spline matching `f` at every knot pair.
pub fn interpolate(f: impl Fn([f64; 2]) -> f64, basis: TensorBasis) -> Result<SplineSurface> {
    let gx = basis.x.knots().grid();
    let gy = basis.y.knots().grid();
    let mut values = Vec::with_capacity(gx.len() * gy.len());
    for &x in &gx {
        for &y in &gy {
            let v = f([x, y]);
            if !v.is_finite() {
                return Err(Error::NonFiniteResidual { x, y });
            }
            values.push(v);
        }
    }
    interpolate_values(&values, basis)
}

/// Spline taking `values[ix * ny + iy]` at grid point `(ix, iy)`.
pub fn interpolate_values(values: &[f64], basis: TensorBasis) -> Result<SplineSurface> {
    let (nx, ny) = (basis.x.dim(), basis.y.dim());
    if values.len() != nx * ny {
        return Err(Error::Dimension(format!("{} values for a {nx}x{ny} grid", values.len())));
    }
    // V = Mx C Myᵀ: solve along x for every y column, then along y per row.
    let ix = Interpolator1D::new(&basis.x)?;
    let iy = if basis.y == basis.x { ix.clone() } else { Interpolator1D::new(&basis.y)? };
    let mut w = vec![0.0; nx * ny];
    let mut col = vec![0.0; nx];
    for j in 0..ny {
        for i in 0..nx {
            col[i] = values[i * ny + j];
        }
        for (i, v) in ix.solve(&col).into_iter().enumerate() {
            w[i * ny + j] = v;
        }
    }
    let mut coeffs = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        coeffs.extend(iy.solve(&w[i * ny..(i + 1) * ny]));
    }
    SplineSurface::new(basis, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> TensorBasis {
        TensorBasis::square(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn quadratic_has_constant_hessian() {
        let s = interpolate(|p| p[0] * p[0] + p[1] * p[1], unit(11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let p = [rng.gen::<f64>(), rng.gen::<f64>()];
            let j = s.eval(p).unwrap();
            assert!((j.hess[0][0] - 2.0).abs() <= 1e-9);
            assert!((j.hess[1][1] - 2.0).abs() <= 1e-9);
            assert!(j.hess[0][1].abs() <= 1e-9);
            assert!((j.grad[0] - 2.0 * p[0]).abs() <= 1e-9);
        }
        for p in [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.3]] {
            assert!((s.eval(p).unwrap().hess[0][0] - 2.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_surface() {
        let s = interpolate(|_| 3.5, unit(9)).unwrap();
        let j = s.eval([0.37, 0.81]).unwrap();
        assert!((j.value - 3.5).abs() < 1e-13);
        assert!(j.grad.iter().all(|g| g.abs() < 1e-11));
        assert!(j.hess.iter().flatten().all(|h| h.abs() < 1e-9));
    }

    #[test]
    fn smooth_interpolation_is_fourth_order() {
        let f = |p: [f64; 2]| ((p[0] * p[0] + p[1] * p[1]) / 2.0).exp();
        let mut errs = Vec::new();
        for n in [11, 21, 41] {
            let s = interpolate(f, unit(n)).unwrap();
            let mut e: f64 = 0.0;
            for k in 0..=50 {
                for l in 0..=50 {
                    let p = [k as f64 / 50.0, l as f64 / 50.0];
                    e = e.max((s.value(p).unwrap() - f(p)).abs());
                }
            }
            errs.push(e);
        }
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 3.5, "rates {errs:?}");
        }
        let s = interpolate(f, unit(31)).unwrap();
        assert!((s.value([0.5, 0.5]).unwrap() - 0.25f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn grid_counts_and_normals() {
        let g = collocation_points(&unit(9));
        assert_eq!(g.len(), 81);
        assert_eq!(g.interior().len(), 49);
        assert_eq!(g.boundary().len(), 32);
        assert!(g.interior().iter().all(|c| c.normal.is_none()));
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let corners: Vec<_> = g.boundary().iter().filter(|c| c.normal.unwrap().iter().all(|v| *v != 0.0)).collect();
        assert_eq!(corners.len(), 4);
        for c in corners {
            let n = c.normal.unwrap();
            let expect = [if c.p[0] == 0.0 { -r } else { r }, if c.p[1] == 0.0 { -r } else { r }];
            assert!((n[0] - expect[0]).abs() < 1e-15 && (n[1] - expect[1]).abs() < 1e-15);
        }
        let edge = g.boundary().iter().find(|c| c.p == [0.5, 0.0]).unwrap();
        assert_eq!(edge.normal, Some([0.0, -1.0]));
        let mut seen: Vec<_> = g.points().iter().map(|c| c.grid).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 81);
    }

    #[test]
    fn cubic_product_reproduced() {
        let f = |p: [f64; 2]| p[0].powi(3) * p[1].powi(3);
        let s = interpolate(f, TensorBasis::rect(-1.0, 2.0, 0.0, 1.5, 10).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = [rng.gen_range(-1.0..=2.0), rng.gen_range(0.0..=1.5)];
            assert!((s.value(p).unwrap() - f(p)).abs() <= 1e-10);
        }
    }

    #[test]
    fn interpolation_conditions_hold() {
        let f = |p: [f64; 2]| ((p[0] * p[0] + p[1] * p[1]) / 2.0).exp();
        let b = unit(31);
        let s = interpolate(f, b.clone()).unwrap();
        for c in collocation_points(&b).points() {
            assert!((s.value(c.p).unwrap() - f(c.p)).abs() <= 1e-12);
        }
    }

    #[test]
    fn cone_error_is_first_order_near_kink() {
        let f = |p: [f64; 2]| ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
        let mut errs = Vec::new();
        for n in [11, 21, 41] {
            let s = interpolate(f, unit(n)).unwrap();
            let h = 1.0 / (n - 1) as f64;
            let mut e: f64 = 0.0;
            for k in -4..=4 {
                for l in -4..=4 {
                    let p = [0.5 + (k as f64 + 0.5) * h / 2.0, 0.5 + (l as f64 + 0.5) * h / 2.0];
                    e = e.max((s.value(p).unwrap() - f(p)).abs());
                }
            }
            assert!(e < h, "n={n} e={e}");
            errs.push(e);
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.5..2.6).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn prolongation_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = TensorBasis::rect(-0.25, 0.25, -0.25, 0.25, 11).unwrap();
        let coeffs = (0..b.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = SplineSurface::new(b, coeffs).unwrap();
        let f = s.prolong().unwrap();
        assert_eq!(f.basis().x.dim(), 21);
        for _ in 0..10_000 {
            let p = [rng.gen_range(-0.25..=0.25), rng.gen_range(-0.25..=0.25)];
            assert!((s.value(p).unwrap() - f.value(p).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn out_of_rectangle_is_an_error() {
        let s = SplineSurface::zeros(unit(8));
        assert!(matches!(s.eval([1.1, 0.5]), Err(Error::OutsideDomain { .. })));
        assert!(SplineSurface::new(unit(8), vec![0.0; 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn derivatives_match_finite_differences(seed in any::<u64>(), px in 0.05f64..0.95, py in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = unit(9);
            let coeffs = (0..b.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = SplineSurface::new(b, coeffs).unwrap();
            let grid = s.basis().x.knots().grid();
            prop_assume!(grid.iter().all(|g| (g - px).abs() > 2e-3 && (g - py).abs() > 2e-3));
            let h = 1e-5;
            let j = s.eval([px, py]).unwrap();
            let jx = |d: f64| s.eval([px + d, py]).unwrap();
            let jy = |d: f64| s.eval([px, py + d]).unwrap();
            let close = |a: f64, b: f64, scale: f64| (a - b).abs() <= 1e-5 * scale.max(1.0);
            let gx = (jx(h).value - jx(-h).value) / (2.0 * h);
            let gy = (jy(h).value - jy(-h).value) / (2.0 * h);
            prop_assert!(close(gx, j.grad[0], j.grad[0].abs()));
            prop_assert!(close(gy, j.grad[1], j.grad[1].abs()));
            let hxx = (jx(h).grad[0] - jx(-h).grad[0]) / (2.0 * h);
            let hxy = (jy(h).grad[0] - jy(-h).grad[0]) / (2.0 * h);
            let hyx = (jx(h).grad[1] - jx(-h).grad[1]) / (2.0 * h);
            let hyy = (jy(h).grad[1] - jy(-h).grad[1]) / (2.0 * h);
            let scale = j.hess.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(close(hxx, j.hess[0][0], scale));
            prop_assert!(close(hxy, j.hess[0][1], scale));
            prop_assert!(close(hyx, j.hess[1][0], scale));
            prop_assert!(close(hyy, j.hess[1][1], scale));
            prop_assert_eq!(j.hess[0][1], j.hess[1][0]);
        }

        #[test]
        fn interpolation_is_a_projection(seed in any::<u64>(), n in 8usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = TensorBasis::rect(0.0, 2.0, -1.0, 1.0, n).unwrap();
            let coeffs: Vec<f64> = (0..b.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = SplineSurface::new(b.clone(), coeffs.clone()).unwrap();
            let t = s.resample(b).unwrap();
            for (a, c) in coeffs.iter().zip(t.coeffs()) {
                prop_assert!((a - c).abs() <= 1e-10);
            }
        }
    }
}
