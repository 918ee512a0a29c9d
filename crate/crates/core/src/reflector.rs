//! Inverse reflector problem for a point source and a planar target.
//!
//! The reflector is `{X / u(x)}` with `X = (x, ω)`, `ω = √(1 - ‖x‖²)`, over a
//! parameter rectangle Ω inside the unit disk. Reflected rays hit the plane
//! `z₃ = z_plane`, and the target Σ is a rectangle in that plane.

use std::sync::Mutex;

use crate::bspline::ModifiedBasis;
use crate::collocation::{solve, ConstraintEval, Linearization, PdeProblem, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::image::{mollify, prepare_target, resample, sample_g, sample_g_grad, IrradianceImage, Rect};
use crate::tensor::{interpolate, CollocationGrid, CollocationPoint, Jet, SplineSurface, TensorBasis};

/// Geometry, data and solver parameters of a reflector computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectorSetup {
    /// Parameter domain, strictly inside the unit disk.
    pub omega: Rect,
    /// Target rectangle in the plane.
    pub sigma: Rect,
    pub z_plane: f64,
    /// Constant source intensity `f`.
    pub source_intensity: f64,
    /// Prescribed `∫_Ω u dx`.
    pub size_g: f64,
    pub lambda: f64,
    pub gray_lift: f64,
    /// `(grid points, mollifier parameter)` levels.
    pub schedule: Vec<(usize, usize)>,
    /// Raster size the target image is resampled to.
    pub image_size: usize,
    pub solver: SolverConfig,
}

impl Default for ReflectorSetup {
    fn default() -> Self {
        Self {
            omega: Rect { x0: -0.25, x1: 0.25, y0: -0.25, y1: 0.25 },
            sigma: Rect { x0: -1.5, x1: 1.5, y0: 1.0, y1: 4.0 },
            z_plane: -5.0,
            source_intensity: 1.0,
            size_g: 0.417674,
            lambda: 1e3,
            gray_lift: 20.0,
            schedule: vec![(21, 55), (41, 55), (41, 19), (81, 19), (81, 7), (161, 7), (161, 3), (321, 3)],
            image_size: 512,
            solver: SolverConfig { tol_residual: 1e-8, stall_window: 20, ..SolverConfig::default() },
        }
    }
}

impl ReflectorSetup {
    pub fn validate(&self) -> Result<()> {
        let o = &self.omega;
        let corner = [o.x0.abs().max(o.x1.abs()), o.y0.abs().max(o.y1.abs())];
        if !(o.x0 < o.x1 && o.y0 < o.y1 && corner[0].hypot(corner[1]) < 1.0) {
            return Err(Error::InvalidArgument(format!("Ω = {o:?} must lie inside the open unit disk")));
        }
        if !(self.sigma.x0 < self.sigma.x1 && self.sigma.y0 < self.sigma.y1) {
            return Err(Error::InvalidArgument(format!("degenerate target {:?}", self.sigma)));
        }
        if !(self.z_plane < 0.0 && self.z_plane.is_finite()) {
            return Err(Error::InvalidArgument(format!("target plane z = {} must lie below the source", self.z_plane)));
        }
        if !(self.size_g > 0.0) {
            return Err(Error::InvalidArgument(format!("size constant G = {} must be positive", self.size_g)));
        }
        if !(self.source_intensity > 0.0 && self.lambda >= 0.0 && self.gray_lift >= 0.0) {
            return Err(Error::InvalidArgument("intensity > 0, lambda >= 0 and gray lift >= 0 required".into()));
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|&(n, m)| n < 11 || m < 1) {
            return Err(Error::InvalidArgument(format!("bad schedule {:?}", self.schedule)));
        }
        if self.schedule.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::InvalidArgument("schedule grid sizes must not decrease".into()));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        self.solver.validate()
    }

    /// Flux emitted into Ω, `∫_Ω f / ω dx` (solid-angle measure).
    pub fn source_flux(&self) -> f64 {
        // Composite 3-point Gauss-Legendre; the integrand is smooth.
        const NODES: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];
        let panels = 32;
        let o = &self.omega;
        let (hx, hy) = ((o.x1 - o.x0) / panels as f64, (o.y1 - o.y0) / panels as f64);
        let mut s = 0.0;
        for i in 0..panels {
            for j in 0..panels {
                let cx = o.x0 + (i as f64 + 0.5) * hx;
                let cy = o.y0 + (j as f64 + 0.5) * hy;
                for (a, wa) in NODES {
                    for (b, wb) in NODES {
                        let x = cx + 0.5 * hx * a;
                        let y = cy + 0.5 * hy * b;
                        s += wa * wb / (1.0 - x * x - y * y).sqrt();
                    }
                }
            }
        }
        s * self.source_intensity * 0.25 * hx * hy
    }

    /// Tensor basis over Ω with `n` grid points per axis.
    pub fn basis(&self, n: usize) -> Result<TensorBasis> {
        TensorBasis::rect(self.omega.x0, self.omega.x1, self.omega.y0, self.omega.y1, n)
    }
}

/// The quantities of the reflector equation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectorJet {
    pub omega: f64,
    pub t: f64,
    pub a_tilde: f64,
    pub b_tilde: f64,
    /// Unit direction `(x, ω)`.
    pub x_dir: [f64; 3],
    pub z0: [f64; 3],
    /// Hit point on the target plane.
    pub z: [f64; 3],
    pub nmat: [[f64; 2]; 2],
    pub amat: [[f64; 2]; 2],
}

fn inadmissible(x: [f64; 2], reason: impl Into<String>) -> Error {
    Error::Inadmissible { x: x[0], y: x[1], reason: reason.into() }
}

/// Evaluates the reflector quantities for `u`, `Du = p` at `x`.
pub fn reflector_jet(setup: &ReflectorSetup, x: [f64; 2], u: f64, p: [f64; 2]) -> Result<ReflectorJet> {
    let r2 = x[0] * x[0] + x[1] * x[1];
    if !(r2 < 1.0) {
        return Err(Error::InvalidArgument(format!("point {x:?} outside the unit disk")));
    }
    if !(u > 0.0 && u.is_finite() && p.iter().all(|v| v.is_finite())) {
        return Err(inadmissible(x, format!("u = {u} must be positive")));
    }
    let omega = (1.0 - r2).sqrt();
    let zp = setup.z_plane;
    let t = 1.0 - u * zp / omega;
    if !(t > 0.0) {
        return Err(inadmissible(x, format!("t = {t} <= 0")));
    }
    let s = p[0] * x[0] + p[1] * x[1];
    let pp = p[0] * p[0] + p[1] * p[1];
    let a_tilde = pp - (u - s) * (u - s);
    let b_tilde = pp + u * u - s * s;
    if a_tilde == 0.0 {
        return Err(inadmissible(x, "ã = 0"));
    }
    let x_dir = [x[0], x[1], omega];
    let z0 = [2.0 * p[0] / a_tilde, 2.0 * p[1] / a_tilde, 0.0];
    // Z = X/u + t (Z0 - X/u); the third component is exactly z_plane.
    let z = [x[0] * zp / omega + t * z0[0], x[1] * zp / omega + t * z0[1], zp];
    let w2 = omega * omega;
    let nmat = [[1.0 + x[0] * x[0] / w2, x[0] * x[1] / w2], [x[0] * x[1] / w2, 1.0 + x[1] * x[1] / w2]];
    let k = a_tilde * zp / (2.0 * t * omega);
    let amat = [[k * nmat[0][0], k * nmat[0][1]], [k * nmat[1][0], k * nmat[1][1]]];
    Ok(ReflectorJet { omega, t, a_tilde, b_tilde, x_dir, z0, z, nmat, amat })
}

/// Right-hand side `b` of the reflector equation (without the energy factor
/// `c`) for the density `g_at` on the target plane.
pub fn reflector_rhs(setup: &ReflectorSetup, x: [f64; 2], u: f64, p: [f64; 2], g_at: impl Fn([f64; 2]) -> f64) -> Result<f64> {
    let j = reflector_jet(setup, x, u, p)?;
    let g = g_at([j.z[0], j.z[1]]);
    if !(g > 0.0) {
        return Err(inadmissible(x, format!("target density {g} <= 0 at the hit point")));
    }
    Ok(rhs_from_jet(setup, &j, g))
}

/// `-((uZ₀ - X)·∇ψ) / (t² ‖∇ψ‖ ω) · ã³/(4b̃) · f/(ω g)` with `ψ = z_plane - z₃`,
/// for which `(uZ₀ - X)·∇ψ = ω`.
fn rhs_from_jet(setup: &ReflectorSetup, j: &ReflectorJet, g: f64) -> f64 {
    -j.a_tilde.powi(3) * setup.source_intensity / (4.0 * j.b_tilde * j.t * j.t * j.omega * g)
}

/// Closest point of the rectangle boundary to `z`.
pub fn project_to_boundary(r: &Rect, z: [f64; 2]) -> [f64; 2] {
    let c = [z[0].clamp(r.x0, r.x1), z[1].clamp(r.y0, r.y1)];
    if c != z {
        return c;
    }
    let d = [z[0] - r.x0, r.x1 - z[0], z[1] - r.y0, r.y1 - z[1]];
    let k = (0..4).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("four edges");
    match k {
        0 => [r.x0, z[1]],
        1 => [r.x1, z[1]],
        2 => [z[0], r.y0],
        _ => [z[0], r.y1],
    }
}

/// Projected boundary data `φ(x) = proj_∂Σ(T(x)) · ν(x)` for every boundary
/// point of `grid`, indexed like `grid.boundary()`.
pub fn boundary_phi_update(setup: &ReflectorSetup, surface: &SplineSurface, grid: &CollocationGrid) -> Result<Vec<f64>> {
    grid.boundary()
        .iter()
        .map(|pt| {
            let jet = surface.eval(pt.p)?;
            let j = reflector_jet(setup, pt.p, jet.value, jet.grad)?;
            let q = project_to_boundary(&setup.sigma, [j.z[0], j.z[1]]);
            let nu = pt.normal.expect("boundary point");
            Ok(q[0] * nu[0] + q[1] * nu[1])
        })
        .collect()
}

/// First derivatives of the reflector quantities with respect to `u` and
/// `p = Du`.
struct JetDerivatives {
    jet: ReflectorJet,
    /// `∂Z/∂u`, `∂Z/∂p_k` (in-plane components).
    z_u: [f64; 2],
    z_p: [[f64; 2]; 2],
    /// `∂A/∂u`, `∂A/∂p_k`.
    a_u: [[f64; 2]; 2],
    a_p: [[[f64; 2]; 2]; 2],
    b: f64,
    b_u: f64,
    b_p: [f64; 2],
}

fn jet_derivatives(setup: &ReflectorSetup, image: &IrradianceImage, x: [f64; 2], u: f64, p: [f64; 2]) -> Result<JetDerivatives> {
    let jet = reflector_jet(setup, x, u, p)?;
    let zp = setup.z_plane;
    let (w, t, a) = (jet.omega, jet.t, jet.a_tilde);
    let s = p[0] * x[0] + p[1] * x[1];
    let a_u = -2.0 * (u - s);
    let a_p = [2.0 * p[0] + 2.0 * (u - s) * x[0], 2.0 * p[1] + 2.0 * (u - s) * x[1]];
    let bt_u = 2.0 * u;
    let bt_p = [2.0 * p[0] - 2.0 * s * x[0], 2.0 * p[1] - 2.0 * s * x[1]];
    let t_u = -zp / w;

    // Z = x zp/ω + 2 t p / ã
    let z_u = [2.0 * p[0] * (t_u / a - t * a_u / (a * a)), 2.0 * p[1] * (t_u / a - t * a_u / (a * a))];
    let mut z_p = [[0.0; 2]; 2];
    for (k, zk) in z_p.iter_mut().enumerate() {
        for (m, v) in zk.iter_mut().enumerate() {
            let e = if m == k { 1.0 } else { 0.0 };
            *v = 2.0 * t * e / a - 2.0 * t * p[m] * a_p[k] / (a * a);
        }
    }

    // A = κ 𝒩 with κ = ã zp / (2 t ω)
    let c = zp / (2.0 * w);
    let kappa_u = c * (a_u / t - a * t_u / (t * t));
    let kappa_p = [c * a_p[0] / t, c * a_p[1] / t];
    let n = jet.nmat;
    let scale = |k: f64| [[k * n[0][0], k * n[0][1]], [k * n[1][0], k * n[1][1]]];

    let z2 = [jet.z[0], jet.z[1]];
    let g = sample_g(image, z2);
    if !(g > 0.0) {
        return Err(inadmissible(x, format!("target density {g} <= 0 at the hit point")));
    }
    let gg = sample_g_grad(image, z2);
    let b = rhs_from_jet(setup, &jet, g);
    let log_u = 3.0 * a_u / a - bt_u / jet.b_tilde - 2.0 * t_u / t - (gg[0] * z_u[0] + gg[1] * z_u[1]) / g;
    let log_p = |k: usize| 3.0 * a_p[k] / a - bt_p[k] / jet.b_tilde - (gg[0] * z_p[k][0] + gg[1] * z_p[k][1]) / g;
    Ok(JetDerivatives {
        jet,
        z_u,
        z_p,
        a_u: scale(kappa_u),
        a_p: [scale(kappa_p[0]), scale(kappa_p[1])],
        b,
        b_u: b * log_u,
        b_p: [b * log_p(0), b * log_p(1)],
    })
}

/// One Picard subproblem family: `det⁺_λ(D²u + A) = c b` inside,
/// `T·ν = φ` on the boundary and `∫u = G`, with `φ` refreshed from the
/// current iterate.
pub struct ReflectorProblem {
    pub setup: ReflectorSetup,
    /// Target density (lifted, normalized and mollified).
    pub target: IrradianceImage,
    integrals: Vec<f64>,
    /// `φ` per grid point index `ix * ny + iy` (boundary points only).
    phi: Vec<f64>,
    ny: usize,
}

impl ReflectorProblem {
    pub fn new(setup: ReflectorSetup, target: IrradianceImage, basis: &TensorBasis) -> Self {
        let ix = basis.x.integrals();
        let iy = basis.y.integrals();
        let integrals = ix.iter().flat_map(|a| iy.iter().map(move |b| a * b)).collect();
        Self { setup, target, integrals, phi: vec![0.0; basis.dim()], ny: basis.y.dim() }
    }

    fn phi_at(&self, pt: &CollocationPoint) -> f64 {
        self.phi[pt.grid[0] * self.ny + pt.grid[1]]
    }
}

impl PdeProblem for ReflectorProblem {
    fn interior(&self, pt: &CollocationPoint, jet: &Jet, aux: f64) -> Result<Linearization> {
        let d = jet_derivatives(&self.setup, &self.target, pt.p, jet.value, jet.grad)?;
        let a = d.jet.amat;
        let w = crate::benchmarks::SymMat2::new(jet.hess[0][0] + a[0][0], jet.hess[0][1] + a[0][1], jet.hess[1][1] + a[1][1]);
        let value = crate::benchmarks::det_plus_lambda(w, self.setup.lambda) - aux * d.b;
        let dw = crate::benchmarks::det_plus_lambda_grad(w, self.setup.lambda);
        let through_a = |m: &[[f64; 2]; 2]| dw[0] * m[0][0] + dw[1] * m[0][1] + dw[2] * m[1][1];
        Ok(Linearization {
            value,
            du: through_a(&d.a_u) - aux * d.b_u,
            dp: [through_a(&d.a_p[0]) - aux * d.b_p[0], through_a(&d.a_p[1]) - aux * d.b_p[1]],
            dh: dw,
            daux: -d.b,
        })
    }

    fn boundary(&self, pt: &CollocationPoint, jet: &Jet, _aux: f64) -> Result<Linearization> {
        let d = jet_derivatives(&self.setup, &self.target, pt.p, jet.value, jet.grad)?;
        let nu = pt.normal.expect("boundary point");
        let dot = |v: [f64; 2]| v[0] * nu[0] + v[1] * nu[1];
        Ok(Linearization {
            value: dot([d.jet.z[0], d.jet.z[1]]) - self.phi_at(pt),
            du: dot(d.z_u),
            dp: [dot(d.z_p[0]), dot(d.z_p[1])],
            ..Default::default()
        })
    }

    fn has_aux(&self) -> bool {
        true
    }

    fn constraint(&self, surface: &SplineSurface, _aux: f64) -> Option<ConstraintEval> {
        let value = surface.coeffs().iter().zip(&self.integrals).map(|(c, w)| c * w).sum::<f64>() - self.setup.size_g;
        Some(ConstraintEval { value, grad: self.integrals.clone(), daux: 0.0 })
    }

    fn refresh(&mut self, surface: &SplineSurface, _aux: f64, grid: &CollocationGrid) -> Result<()> {
        let phi = boundary_phi_update(&self.setup, surface, grid)?;
        for (pt, v) in grid.boundary().iter().zip(phi) {
            self.phi[pt.grid[0] * self.ny + pt.grid[1]] = v;
        }
        Ok(())
    }
}

/// Lifted and flux-normalized target on the working raster (not yet
/// mollified).
pub fn working_target(setup: &ReflectorSetup, image: &IrradianceImage) -> Result<IrradianceImage> {
    let img = IrradianceImage { extent: setup.sigma, ..image.clone() };
    let img = resample(&img, setup.image_size, setup.image_size)?;
    prepare_target(&img, setup.gray_lift, setup.source_flux())
}

/// Integral of `u` over Ω computed from the basis integrals.
pub fn surface_integral(surface: &SplineSurface) -> f64 {
    let ix = surface.basis().x.integrals();
    let iy = surface.basis().y.integrals();
    let ny = iy.len();
    surface.coeffs().iter().enumerate().map(|(k, c)| c * ix[k / ny] * iy[k % ny]).sum()
}

/// One level of the reflector continuation.
#[derive(Debug, Clone)]
pub struct LevelReport {
    pub n: usize,
    pub mollifier: usize,
    /// Report of the last successful solve, if any.
    pub report: Option<SolveReport>,
    /// Fraction `s` of the level's density that was reached.
    pub blend: f64,
    /// Failed attempts that forced a smaller continuation step.
    pub retries: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ReflectorSolution {
    pub surface: SplineSurface,
    /// Energy factor `c`.
    pub c: f64,
    pub levels: Vec<LevelReport>,
}

/// Confocal ellipsoid of revolution with foci at the source and at `focus`,
/// scaled so that `∫_Ω u = G`:
/// `u(X) = (4a - 2 X·F) / (4a² - |F|²)` in inverse-distance form.
pub fn ellipsoid_guess(setup: &ReflectorSetup, basis: &TensorBasis, focus: [f64; 3]) -> Result<SplineSurface> {
    let f2 = focus.iter().map(|v| v * v).sum::<f64>();
    let fnorm = f2.sqrt();
    let shape = |a: f64| {
        move |p: [f64; 2]| {
            let w = (1.0 - p[0] * p[0] - p[1] * p[1]).sqrt();
            let xf = p[0] * focus[0] + p[1] * focus[1] + w * focus[2];
            (4.0 * a - 2.0 * xf) / (4.0 * a * a - f2)
        }
    };
    // ∫u decreases in a on a > |F|/2; bisect in log space.
    let integral = |a: f64| -> Result<f64> { Ok(surface_integral(&interpolate(shape(a), basis.clone())?)) };
    let mut lo = 0.5 * fnorm * (1.0 + 1e-9) + 1e-12;
    let mut hi = lo.max(1e-3);
    while integral(hi)? > setup.size_g {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidArgument("cannot fit the ellipsoid to G".into()));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if integral(mid)? > setup.size_g {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let mut s = interpolate(shape(hi), basis.clone())?;
    // Exact size: rescale (u ↦ κu scales the reflector about the source).
    let k = setup.size_g / surface_integral(&s);
    s.coeffs_mut().iter_mut().for_each(|c| *c *= k);
    Ok(s)
}

/// Focus that sends the central ray to the center of Σ, placed at
/// `focus_height` above the source.
pub fn central_focus(setup: &ReflectorSetup, focus_height: f64) -> [f64; 3] {
    let omega_c = setup.omega.center();
    let w = (1.0 - omega_c[0] * omega_c[0] - omega_c[1] * omega_c[1]).sqrt();
    // Reflector point of the central ray for the sphere of matching size.
    let area = (setup.omega.x1 - setup.omega.x0) * (setup.omega.y1 - setup.omega.y0);
    let rho = area / setup.size_g;
    let p = [rho * omega_c[0], rho * omega_c[1], rho * w];
    let target = setup.sigma.center();
    let s = (p[2] - focus_height) / (p[2] - setup.z_plane);
    [p[0] + s * (target[0] - p[0]), p[1] + s * (target[1] - p[1]), focus_height]
}

/// Smallest blend step of the target continuation before a level gives up.
pub const MIN_BLEND_STEP: f64 = 1.0 / 64.0;

fn check_usable(report: &SolveReport) -> Result<()> {
    if report.usable() {
        Ok(())
    } else {
        Err(Error::Stalled(format!(
            "{:?} after {} iterations, residual {:.3e}",
            report.termination, report.iterations, report.final_residual_norm
        )))
    }
}

fn blend(a: &IrradianceImage, b: &IrradianceImage, s: f64) -> IrradianceImage {
    let values = a.values.iter().zip(&b.values).map(|(x, y)| (1.0 - s) * x + s * y).collect();
    IrradianceImage { values, ..b.clone() }
}

/// Solves one level for the density `g`. If the direct solve fails, the
/// density is reached through blends `(1-s) previous + s g` with an adaptive
/// step in `s`. Intermediate levels may stop at a partial blend; the final
/// level must reach `s = 1`.
#[allow(clippy::too_many_arguments)]
fn solve_level(
    setup: &ReflectorSetup,
    previous: &IrradianceImage,
    g: &IrradianceImage,
    start: (SplineSurface, f64),
    n: usize,
    mollifier: usize,
    level: usize,
    final_level: bool,
) -> Result<(SplineSurface, f64, IrradianceImage, LevelReport)> {
    let clock = std::time::Instant::now();
    let wrap = |e: Error| Error::LevelFailed { level, n, source: Box::new(e) };
    let basis = setup.basis(n).map_err(wrap)?;
    let (mut surface, mut c) = start;
    if surface.basis() != &basis {
        surface = surface.resample(basis.clone()).map_err(wrap)?;
    }
    let (mut done, mut step) = (0.0f64, 1.0f64);
    let (mut retries, mut last) = (0, None);
    while done < 1.0 {
        let s = (done + step).min(1.0);
        let target = if s == 1.0 { g.clone() } else { blend(previous, g, s) };
        let mut problem = ReflectorProblem::new(setup.clone(), target.clone(), &basis);
        let attempt = solve(&mut problem, surface.clone(), c, &setup.solver).and_then(|sol| {
            check_usable(&sol.report)?;
            Ok(sol)
        });
        match attempt {
            Ok(sol) => {
                surface = sol.surface;
                c = sol.aux;
                done = s;
                last = Some(sol.report);
                step = (2.0 * step).min(1.0 - done);
            }
            Err(e) => {
                step *= 0.5;
                retries += 1;
                if step < MIN_BLEND_STEP {
                    if final_level {
                        return Err(wrap(e));
                    }
                    break;
                }
            }
        }
    }
    let achieved = if done == 1.0 { g.clone() } else { blend(previous, g, done) };
    let report = LevelReport { n, mollifier, report: last, blend: done, retries, seconds: clock.elapsed().as_secs_f64() };
    Ok((surface, c, achieved, report))
}

/// Runs the `(N, mollifier)` schedule up to grid size `n_target`, starting
/// from `initial` (surface and energy factor, solved for a constant target).
pub fn solve_reflector(
    setup: &ReflectorSetup,
    image: &IrradianceImage,
    initial: (SplineSurface, f64),
    n_target: usize,
) -> Result<ReflectorSolution> {
    setup.validate()?;
    let target = working_target(setup, image)?;
    let levels: Vec<(usize, usize)> = setup.schedule.iter().copied().filter(|l| l.0 <= n_target).collect();
    if levels.is_empty() {
        return Err(Error::InvalidArgument(format!("no schedule level with N <= {n_target}")));
    }
    let flat = IrradianceImage::constant(target.width, target.height, target.extent, target.total_flux() / target.extent.area())?;
    let mut previous = flat;
    let mut state = initial;
    let mut reports = Vec::with_capacity(levels.len());
    for (k, &(n, m)) in levels.iter().enumerate() {
        let g = mollify(&target, m)?;
        let (s, c, achieved, r) = solve_level(setup, &previous, &g, state, n, m, k, k + 1 == levels.len())?;
        state = (s, c);
        previous = achieved;
        reports.push(r);
    }
    Ok(ReflectorSolution { surface: state.0, c: state.1, levels: reports })
}

static UNIVERSAL: Mutex<Vec<(ReflectorSetup, SplineSurface, f64)>> = Mutex::new(Vec::new());

/// Reflector for a constant target on the coarsest schedule grid, cached per
/// geometry. It serves as the initial guess for every target image.
pub fn universal_initial_guess(setup: &ReflectorSetup) -> Result<(SplineSurface, f64)> {
    setup.validate()?;
    let key = ReflectorSetup { schedule: vec![setup.schedule[0]], ..setup.clone() };
    if let Some((_, s, c)) = UNIVERSAL.lock().expect("cache lock").iter().find(|e| e.0 == key) {
        return Ok((s.clone(), *c));
    }
    let n = setup.schedule[0].0;
    let basis = setup.basis(n)?;
    let start = ellipsoid_guess(setup, &basis, central_focus(setup, 0.0))?;
    let flat = IrradianceImage::constant(setup.image_size, setup.image_size, setup.sigma, 1.0)?;
    let target = working_target(setup, &flat)?;
    let (surface, c, _, _) = solve_level(setup, &target, &target, (start, 1.0), n, 1, 0, true)?;
    UNIVERSAL.lock().expect("cache lock").push((key, surface.clone(), c));
    Ok((surface, c))
}

/// `u ≡ const` with `∫_Ω u = G` (a spherical cap around the source).
pub fn sphere_guess(setup: &ReflectorSetup, n: usize) -> Result<SplineSurface> {
    let basis = setup.basis(n)?;
    let u0 = setup.size_g / setup.omega.area();
    let c = ModifiedBasis::monomial_coeffs(&basis.x, 0)?;
    let d = ModifiedBasis::monomial_coeffs(&basis.y, 0)?;
    let coeffs = c.iter().flat_map(|a| d.iter().map(move |b| u0 * a * b)).collect();
    SplineSurface::new(basis, coeffs)
}

/// Checks on a computed reflector.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectorDiagnostics {
    /// Smallest `t` over the interior collocation points.
    pub min_t: f64,
    /// Smallest eigenvalue of `D²u + A` over the interior collocation points.
    pub min_eigenvalue: f64,
    /// Largest `|z₃ - z_plane|` of the computed hit points.
    pub plane_error: f64,
    /// Largest change of `φ` when re-projecting the boundary image.
    pub picard_defect: f64,
    /// `∫_Ω u dx`.
    pub integral: f64,
    /// `c ∫_{T(Ω)} g`, the flux of `c g` over the achieved image.
    pub mapped_flux: f64,
    /// `∫_Σ g`.
    pub target_flux: f64,
}

impl ReflectorDiagnostics {
    pub fn elliptic(&self) -> bool {
        self.min_t > 0.0 && self.min_eigenvalue > 0.0
    }

    pub fn energy_mismatch(&self) -> f64 {
        (self.mapped_flux / self.target_flux - 1.0).abs()
    }
}

/// Evaluates admissibility, the Picard fixed point and the energy balance.
/// `target` is the density the final level was solved with.
pub fn diagnose(setup: &ReflectorSetup, target: &IrradianceImage, surface: &SplineSurface, c: f64) -> Result<ReflectorDiagnostics> {
    let grid = crate::tensor::collocation_points(surface.basis());
    let (mut min_t, mut min_eigenvalue, mut plane_error) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    for pt in grid.interior() {
        let jet = surface.eval(pt.p)?;
        let j = reflector_jet(setup, pt.p, jet.value, jet.grad)?;
        min_t = min_t.min(j.t);
        plane_error = plane_error.max((j.z[2] - setup.z_plane).abs());
        let (a, b, d) = (jet.hess[0][0] + j.amat[0][0], jet.hess[0][1] + j.amat[0][1], jet.hess[1][1] + j.amat[1][1]);
        let lo = 0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt();
        min_eigenvalue = min_eigenvalue.min(lo);
    }
    let phi = boundary_phi_update(setup, surface, &grid)?;
    let mut picard_defect = 0.0f64;
    for (pt, v) in grid.boundary().iter().zip(&phi) {
        let jet = surface.eval(pt.p)?;
        let j = reflector_jet(setup, pt.p, jet.value, jet.grad)?;
        let nu = pt.normal.expect("boundary point");
        picard_defect = picard_defect.max((j.z[0] * nu[0] + j.z[1] * nu[1] - v).abs());
    }
    // ∫_Ω g(T(x)) |det DT(x)| dx by the midpoint rule, DT by central differences.
    let m = 128;
    let o = &setup.omega;
    let (hx, hy) = ((o.x1 - o.x0) / m as f64, (o.y1 - o.y0) / m as f64);
    let map = |p: [f64; 2]| -> Result<[f64; 2]> {
        let jet = surface.eval(p)?;
        let j = reflector_jet(setup, p, jet.value, jet.grad)?;
        Ok([j.z[0], j.z[1]])
    };
    let e = 1e-5 * hx.min(hy);
    let mut mapped = 0.0;
    for i in 0..m {
        for k in 0..m {
            let p = [o.x0 + (i as f64 + 0.5) * hx, o.y0 + (k as f64 + 0.5) * hy];
            let (xp, xm) = (map([p[0] + e, p[1]])?, map([p[0] - e, p[1]])?);
            let (yp, ym) = (map([p[0], p[1] + e])?, map([p[0], p[1] - e])?);
            let det = ((xp[0] - xm[0]) * (yp[1] - ym[1]) - (xp[1] - xm[1]) * (yp[0] - ym[0])) / (4.0 * e * e);
            mapped += sample_g(target, map(p)?) * det.abs();
        }
    }
    Ok(ReflectorDiagnostics {
        min_t,
        min_eigenvalue,
        plane_error,
        picard_defect,
        integral: surface_integral(surface),
        mapped_flux: c * mapped * hx * hy,
        target_flux: target.total_flux(),
    })
}

/// The density the last level of `solution` was solved with.
pub fn final_target(setup: &ReflectorSetup, image: &IrradianceImage, solution: &ReflectorSolution) -> Result<IrradianceImage> {
    let m = solution.levels.last().map_or(1, |l| l.mollifier);
    mollify(&working_target(setup, image)?, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::{assemble_jacobian, JacobianMode};
    use crate::tensor::collocation_points;

    #[test]
    fn pole_direction() {
        let s = ReflectorSetup::default();
        let j = reflector_jet(&s, [0.0, 0.0], 2.0, [0.0, 0.0]).unwrap();
        assert_eq!(j.omega, 1.0);
        assert_eq!(j.nmat, [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(j.x_dir, [0.0, 0.0, 1.0]);
        // Du = 0: ã = -u², Z0 = 0 and t = 1 + 5u.
        assert_eq!(j.a_tilde, -4.0);
        assert_eq!(j.z0, [0.0, 0.0, 0.0]);
        assert_eq!(j.t, 11.0);
        assert_eq!(j.z, [0.0, 0.0, -5.0]);
    }

    /// Flux balance of the reflection map: for any smooth `u`,
    /// `|det(D²u + A)| = b|_{g=1} |det DZ| ω / f`.
    #[test]
    fn equation_matches_jacobian_determinant_of_the_map() {
        let s = ReflectorSetup { source_intensity: 1.3, ..ReflectorSetup::default() };
        let surfaces: [(&str, fn([f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2])); 3] = [
            ("quadratic", |x| {
                let u = 0.4 + 0.3 * x[0] * x[0] + 0.1 * x[0] * x[1] + 0.2 * x[1] * x[1] - 0.05 * x[1];
                (u, [0.6 * x[0] + 0.1 * x[1], 0.1 * x[0] + 0.4 * x[1] - 0.05], [[0.6, 0.1], [0.1, 0.4]])
            }),
            ("exponential", |x| {
                let e = (0.5 * x[0] - 0.3 * x[1]).exp();
                (0.35 * e, [0.175 * e, -0.105 * e], [[0.0875 * e, -0.0525 * e], [-0.0525 * e, 0.0315 * e]])
            }),
            ("cubic", |x| {
                let u = 0.5 + 0.1 * x[0] - 0.2 * x[0] * x[0] * x[0] + 0.15 * x[1] * x[1];
                (u, [0.1 - 0.6 * x[0] * x[0], 0.3 * x[1]], [[-1.2 * x[0], 0.0], [0.0, 0.3]])
            }),
        ];
        let h = 1e-5;
        for (name, f) in surfaces {
            for x in [[0.0, 0.0], [0.15, -0.1], [-0.2, 0.12]] {
                let hit = |y: [f64; 2]| {
                    let (u, p, _) = f(y);
                    let z = reflector_jet(&s, y, u, p).unwrap().z;
                    [z[0], z[1]]
                };
                let mut dz = [[0.0; 2]; 2];
                for k in 0..2 {
                    let (mut a, mut b) = (x, x);
                    a[k] += h;
                    b[k] -= h;
                    let (za, zb) = (hit(a), hit(b));
                    for i in 0..2 {
                        dz[i][k] = (za[i] - zb[i]) / (2.0 * h);
                    }
                }
                let det_dz = (dz[0][0] * dz[1][1] - dz[0][1] * dz[1][0]).abs();
                let (u, p, hess) = f(x);
                let j = reflector_jet(&s, x, u, p).unwrap();
                let w = [[hess[0][0] + j.amat[0][0], hess[0][1] + j.amat[0][1]], [hess[1][0] + j.amat[1][0], hess[1][1] + j.amat[1][1]]];
                let lhs = (w[0][0] * w[1][1] - w[0][1] * w[1][0]).abs();
                let rhs = reflector_rhs(&s, x, u, p, |_| 1.0).unwrap() * det_dz * j.omega / s.source_intensity;
                assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1e-3), "{name} at {x:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn hit_point_lies_on_plane_and_matches_definition() {
        let s = ReflectorSetup::default();
        for (x, u, p) in [([0.1, -0.2], 1.7, [0.3, 0.5]), ([-0.24, 0.2], 0.9, [-1.0, 0.1]), ([0.0, 0.25], 2.5, [0.0, 1.0])] {
            let j = reflector_jet(&s, x, u, p).unwrap();
            // Z = X/u + t (Z0 - X/u) componentwise.
            for k in 0..3 {
                let xk = j.x_dir[k] / u;
                let zk = xk + j.t * (j.z0[k] - xk);
                assert!((zk - j.z[k]).abs() <= 1e-12 * zk.abs().max(1.0));
            }
            assert!((j.z[2] + 5.0).abs() <= 1e-12);
            let xn: f64 = j.x_dir.iter().map(|v| v * v).sum();
            assert!((xn - 1.0).abs() < 1e-15);
            assert!(j.b_tilde >= j.a_tilde);
        }
    }

    #[test]
    fn sphere_maps_radially() {
        let s = ReflectorSetup::default();
        let x = [0.2, -0.1];
        let w = (1.0f64 - 0.05).sqrt();
        let u = 1.3;
        // Du = 0 only at the pole, so use the true gradient of a constant.
        let j = reflector_jet(&s, x, u, [0.0, 0.0]).unwrap();
        assert!((j.z[0] + 5.0 * x[0] / w).abs() < 1e-12);
        assert!((j.z[1] + 5.0 * x[1] / w).abs() < 1e-12);
        // A is positive definite for the sphere.
        assert!(j.amat[0][0] > 0.0 && j.amat[0][0] * j.amat[1][1] - j.amat[0][1].powi(2) > 0.0);
    }

    #[test]
    fn rhs_positive_and_inverse_in_g() {
        let s = ReflectorSetup::default();
        let b1 = reflector_rhs(&s, [0.1, 0.1], 1.6, [0.2, -0.1], |_| 0.5).unwrap();
        let b2 = reflector_rhs(&s, [0.1, 0.1], 1.6, [0.2, -0.1], |_| 1.0).unwrap();
        assert!(b1 > 0.0);
        assert!((b1 - 2.0 * b2).abs() < 1e-14 * b1);
        assert!(reflector_rhs(&s, [0.1, 0.1], 1.6, [0.2, -0.1], |_| 0.0).is_err());
        assert!(matches!(reflector_jet(&s, [0.1, 0.1], -1.0, [0.0, 0.0]), Err(Error::Inadmissible { .. })));
    }

    #[test]
    fn rhs_reduces_to_standard_form_for_plane_through_source() {
        let s = ReflectorSetup { z_plane: 0.0, ..ReflectorSetup::default() };
        let (x, u, p) = ([0.15, -0.05], 1.2, [0.4, 0.3]);
        let g = |z: [f64; 2]| 1.0 + 0.1 * z[0] * z[0];
        let b = reflector_rhs(&s, x, u, p, g).unwrap();
        // det(D²u) = -((uZ0 - X)·∇ψ)/(‖∇ψ‖ω) · ã³/(4b̃) · f/(ω g(Z0)), ∇ψ = (0,0,-1).
        let w = (1.0 - x[0] * x[0] - x[1] * x[1]).sqrt();
        let sx = p[0] * x[0] + p[1] * x[1];
        let a = p[0] * p[0] + p[1] * p[1] - (u - sx) * (u - sx);
        let bt = p[0] * p[0] + p[1] * p[1] + u * u - sx * sx;
        let z0 = [2.0 * p[0] / a, 2.0 * p[1] / a, 0.0];
        let uz0_minus_x = [u * z0[0] - x[0], u * z0[1] - x[1], u * z0[2] - w];
        let grad_psi = [0.0, 0.0, -1.0];
        let dotp: f64 = uz0_minus_x.iter().zip(&grad_psi).map(|(a, b)| a * b).sum();
        let expect = -dotp / w * a.powi(3) / (4.0 * bt) / (w * g([z0[0], z0[1]]));
        assert!((b - expect).abs() <= 1e-13 * expect.abs());
        let j = reflector_jet(&s, x, u, p).unwrap();
        assert_eq!(j.amat, [[0.0, 0.0], [0.0, 0.0]]);
    }

    fn brute_projection(r: &Rect, z: [f64; 2]) -> [f64; 2] {
        let m = 400_000;
        let per = 2.0 * ((r.x1 - r.x0) + (r.y1 - r.y0));
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for k in 0..m {
            let s = per * k as f64 / m as f64;
            let w = r.x1 - r.x0;
            let h = r.y1 - r.y0;
            let q = if s < w {
                [r.x0 + s, r.y0]
            } else if s < w + h {
                [r.x1, r.y0 + s - w]
            } else if s < 2.0 * w + h {
                [r.x1 - (s - w - h), r.y1]
            } else {
                [r.x0, r.y1 - (s - 2.0 * w - h)]
            };
            let d = (q[0] - z[0]).hypot(q[1] - z[1]);
            if d < best.0 {
                best = (d, q);
            }
        }
        best.1
    }

    #[test]
    fn projection_matches_brute_force() {
        let r = ReflectorSetup::default().sigma;
        for z in [[-1.5, 2.0], [2.7, 5.1], [0.3, -0.5], [-1.2, 2.4], [1.0, 3.9], [-4.0, 2.2]] {
            let p = project_to_boundary(&r, z);
            let b = brute_projection(&r, z);
            assert!((p[0] - b[0]).abs() < 3e-5 && (p[1] - b[1]).abs() < 3e-5, "{z:?}: {p:?} vs {b:?}");
        }
        assert_eq!(project_to_boundary(&r, [-1.2, 2.4]), [-1.5, 2.4]);
        assert_eq!(project_to_boundary(&r, [-1.5, 2.0]), [-1.5, 2.0]);
    }

    #[test]
    fn source_flux_matches_fine_midpoint_rule() {
        let s = ReflectorSetup::default();
        let m = 1000;
        let h = 0.5 / m as f64;
        let mut q = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = -0.25 + (i as f64 + 0.5) * h;
                let y = -0.25 + (j as f64 + 0.5) * h;
                q += h * h / (1.0 - x * x - y * y).sqrt();
            }
        }
        assert!((s.source_flux() - q).abs() < 1e-7);
    }

    #[test]
    fn setup_validation() {
        assert!(ReflectorSetup::default().validate().is_ok());
        let bad = ReflectorSetup { omega: Rect { x0: -0.9, x1: 0.9, y0: -0.9, y1: 0.9 }, ..ReflectorSetup::default() };
        assert!(bad.validate().is_err());
        let bad = ReflectorSetup { size_g: 0.0, ..ReflectorSetup::default() };
        assert!(bad.validate().is_err());
    }

    fn test_problem(n: usize) -> (ReflectorProblem, SplineSurface) {
        let setup = ReflectorSetup { image_size: 64, ..ReflectorSetup::default() };
        let vals: Vec<f64> = (0..64 * 64).map(|k| ((k % 64) as f64 * 0.3).sin().abs() * 100.0 + (k / 64) as f64).collect();
        let img = IrradianceImage::new(64, 64, setup.sigma, vals).unwrap();
        let target = mollify(&working_target(&setup, &img).unwrap(), 7).unwrap();
        let basis = setup.basis(n).unwrap();
        let s = ellipsoid_guess(&setup, &basis, central_focus(&setup, 0.0)).unwrap();
        let mut p = ReflectorProblem::new(setup, target, &basis);
        p.refresh(&s, 1.0, &collocation_points(&basis)).unwrap();
        (p, s)
    }

    #[test]
    fn ellipsoid_guess_has_prescribed_size_and_hits_target_center() {
        let (p, s) = test_problem(11);
        assert!((surface_integral(&s) - p.setup.size_g).abs() < 1e-12);
        let j = s.eval([0.0, 0.0]).unwrap();
        let r = reflector_jet(&p.setup, [0.0, 0.0], j.value, j.grad).unwrap();
        let c = p.setup.sigma.center();
        assert!((r.z[0] - c[0]).abs() < 0.05 && (r.z[1] - c[1]).abs() < 0.05, "{:?}", r.z);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let (p, s) = test_problem(11);
        let a = assemble_jacobian(&p, &s, 1.3, JacobianMode::Analytic, 1e-6).unwrap().to_dense();
        let f = assemble_jacobian(&p, &s, 1.3, JacobianMode::FiniteDifference, 1e-6).unwrap().to_dense();
        let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for (x, y) in a.iter().flatten().zip(f.iter().flatten()) {
            worst = worst.max((x - y).abs() / x.abs().max(1e-3 * scale));
        }
        assert!(worst <= 1e-5, "worst relative difference {worst}");
    }
}
