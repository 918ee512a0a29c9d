//! Forward Monte-Carlo check of a reflector: rays from the point source are
//! reflected once at `{X / u(x)}` and binned on the target plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{mollify_raster, IrradianceImage, Rect};
use crate::reflector::ReflectorSetup;
use crate::tensor::SplineSurface;

/// Rays per independently seeded batch.
pub const BATCH: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub x: [f64; 2],
    /// `f / ω` times the sample's share of Ω.
    pub weight: f64,
    pub hit: Option<[f64; 2]>,
}

/// Geometry of one reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reflection {
    /// Incoming direction (unit, from the source).
    pub d: [f64; 3],
    /// Point on the reflector.
    pub point: [f64; 3],
    /// Unit normal facing the source.
    pub normal: [f64; 3],
    /// Reflected direction (unit).
    pub reflected: [f64; 3],
    /// Intersection with the target plane, when the reflected ray reaches it.
    pub hit: Option<[f64; 2]>,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Reflects the ray through `x ∈ Ω` at the surface `{X / u}`.
pub fn reflect(surface: &SplineSurface, z_plane: f64, x: [f64; 2]) -> Result<Reflection> {
    let jet = surface.eval(x)?;
    let u = jet.value;
    let r2 = x[0] * x[0] + x[1] * x[1];
    if !(u > 0.0) || !(r2 < 1.0) {
        return Err(Error::Inadmissible { x: x[0], y: x[1], reason: format!("u = {u} at |x|² = {r2}") });
    }
    let w = (1.0 - r2).sqrt();
    let d = [x[0], x[1], w];
    let point = [d[0] / u, d[1] / u, d[2] / u];
    let tangent = |i: usize| {
        let mut dx = [0.0, 0.0, -x[i] / w];
        dx[i] = 1.0;
        let g = jet.grad[i] / (u * u);
        [dx[0] / u - d[0] * g, dx[1] / u - d[1] * g, dx[2] / u - d[2] * g]
    };
    let n = cross(tangent(0), tangent(1));
    let len = dot(n, n).sqrt();
    if !(len > 1e-300) || !len.is_finite() {
        return Err(Error::Inadmissible { x: x[0], y: x[1], reason: "degenerate surface normal".into() });
    }
    let sign = if dot(n, d) > 0.0 { -1.0 } else { 1.0 };
    let normal = [sign * n[0] / len, sign * n[1] / len, sign * n[2] / len];
    let k = 2.0 * dot(d, normal);
    let reflected = [d[0] - k * normal[0], d[1] - k * normal[1], d[2] - k * normal[2]];
    let hit = (reflected[2] < 0.0 && point[2] > z_plane).then(|| {
        let s = (z_plane - point[2]) / reflected[2];
        [point[0] + s * reflected[0], point[1] + s * reflected[1]]
    });
    Ok(Reflection { d, point, normal, reflected, hit })
}

/// Ray samples over Ω for rays `start..end` of a `ray_count` stratified
/// sequence. The first `k²` rays (`k = ⌊√ray_count⌋`) are jittered in a
/// `k × k` grid of cells, the rest are uniform.
fn samples(omega: &Rect, ray_count: usize, seed: u64, batch: usize) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    let k = (ray_count as f64).sqrt() as usize;
    let k = if (k + 1) * (k + 1) <= ray_count { k + 1 } else { k };
    let (wx, wy) = (omega.x1 - omega.x0, omega.y1 - omega.y0);
    let start = batch * BATCH;
    let end = (start + BATCH).min(ray_count);
    (start..end)
        .map(|r| {
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            if r < k * k {
                let (ci, cj) = (r % k, r / k);
                [omega.x0 + wx * (ci as f64 + a) / k as f64, omega.y0 + wy * (cj as f64 + b) / k as f64]
            } else {
                [omega.x0 + wx * a, omega.y0 + wy * b]
            }
        })
        .collect()
}

/// Result of a forward simulation.
#[derive(Debug, Clone)]
pub struct TraceResult {
    /// Irradiance on Σ (deposited weight per unit area).
    pub rendered: IrradianceImage,
    pub emitted: f64,
    pub deposited: f64,
    pub missed_weight: f64,
    pub rays: usize,
    pub missed_rays: usize,
}

impl TraceResult {
    pub fn miss_fraction(&self) -> f64 {
        self.missed_rays as f64 / self.rays as f64
    }
}

/// Traces `ray_count` rays and bins the hits into a `width × height` raster
/// over Σ. Deterministic for a fixed seed, independent of the thread count.
pub fn trace(
    surface: &SplineSurface,
    setup: &ReflectorSetup,
    ray_count: usize,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<TraceResult> {
    if ray_count == 0 {
        return Err(Error::InvalidArgument("ray count must be at least 1".into()));
    }
    let mut raster = IrradianceImage::constant(width, height, setup.sigma, 0.0)?;
    let share = setup.source_intensity * setup.omega.area() / ray_count as f64;
    let batches = ray_count.div_ceil(BATCH);
    let (mut emitted, mut deposited, mut missed_weight, mut missed_rays) = (0.0, 0.0, 0.0, 0);
    // Batches are processed in groups; deposits happen in ray order.
    let group = 4 * rayon::current_num_threads().max(1);
    for first in (0..batches).step_by(group) {
        let last = (first + group).min(batches);
        let traced: Vec<Result<Vec<RaySample>>> = (first..last)
            .into_par_iter()
            .map(|b| {
                samples(&setup.omega, ray_count, seed, b)
                    .into_iter()
                    .map(|x| {
                        let r = reflect(surface, setup.z_plane, x)?;
                        Ok(RaySample { x, weight: share / r.d[2], hit: r.hit })
                    })
                    .collect()
            })
            .collect();
        for batch in traced {
            for s in batch? {
                emitted += s.weight;
                match s.hit.and_then(|h| raster.pixel_of(h)) {
                    Some((i, j)) => {
                        raster.values[j * width + i] += s.weight;
                        deposited += s.weight;
                    }
                    None => {
                        missed_weight += s.weight;
                        missed_rays += 1;
                    }
                }
            }
        }
    }
    let area = raster.pixel_area();
    raster.values.iter_mut().for_each(|v| *v /= area);
    Ok(TraceResult { rendered: raster, emitted, deposited, missed_weight, rays: ray_count, missed_rays })
}

/// Relative L1 distance (after scaling `rendered` to the flux of `target`)
/// and normalized cross-correlation.
pub fn compare(rendered: &IrradianceImage, target: &IrradianceImage) -> Result<(f64, f64)> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::Dimension(format!(
            "rendered {}x{} vs target {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let rs: f64 = rendered.values.iter().sum();
    let ts: f64 = target.values.iter().sum();
    if !(ts > 0.0) {
        return Err(Error::InvalidArgument("target has no flux".into()));
    }
    let scale = if rs > 0.0 { ts / rs } else { 0.0 };
    let l1: f64 = rendered.values.iter().zip(&target.values).map(|(r, t)| (r * scale - t).abs()).sum();
    Ok((l1 / ts, ncc(&rendered.values, &target.values)))
}

/// Zero-mean normalized cross-correlation; 0 when either input is constant.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (x - ma, y - mb);
        ab += p * q;
        aa += p * p;
        bb += q * q;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Coefficient of variation (std / mean) of the pixel values.
pub fn coefficient_of_variation(img: &IrradianceImage) -> f64 {
    let n = img.values.len() as f64;
    let m = img.values.iter().sum::<f64>() / n;
    let var = img.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    var.sqrt() / m
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub rendered: IrradianceImage,
    pub relative_l1: f64,
    pub normalized_cross_correlation: f64,
    pub miss_fraction: f64,
    pub emitted: f64,
    pub deposited: f64,
}

impl ValidationReport {
    /// Single-line `key=value` summary.
    pub fn summary(&self) -> String {
        format!(
            "relative_l1={:.6} ncc={:.6} miss_fraction={:.6} emitted={:.9e} deposited={:.9e} width={} height={}",
            self.relative_l1,
            self.normalized_cross_correlation,
            self.miss_fraction,
            self.emitted,
            self.deposited,
            self.rendered.width,
            self.rendered.height
        )
    }
}

/// Traces onto the raster of `target` and compares.
pub fn validate(
    surface: &SplineSurface,
    setup: &ReflectorSetup,
    target: &IrradianceImage,
    ray_count: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let t = trace(surface, setup, ray_count, seed, target.width, target.height)?;
    let (relative_l1, normalized_cross_correlation) = compare(&t.rendered, target)?;
    Ok(ValidationReport {
        miss_fraction: t.miss_fraction(),
        emitted: t.emitted,
        deposited: t.deposited,
        rendered: t.rendered,
        relative_l1,
        normalized_cross_correlation,
    })
}

/// Fine structure of the reflector: the radial distance `1/u` sampled on a
/// `size × size` grid over Ω, minus its low-pass copy, as magnitude around
/// the mean difference. The low pass is the least-squares quadratic plus the
/// mollified remainder (`cutoff` in samples).
pub fn high_pass(surface: &SplineSurface, cutoff: usize, size: usize) -> Result<IrradianceImage> {
    if size == 0 {
        return Err(Error::InvalidArgument("high-pass raster size must be positive".into()));
    }
    let [[x0, x1], [y0, y1]] = surface.basis().bounds();
    let mut pts = Vec::with_capacity(size * size);
    let mut h = Vec::with_capacity(size * size);
    for j in 0..size {
        // Normalized coordinates keep the quadratic fit well conditioned.
        let t = 1.0 - 2.0 * (j as f64 + 0.5) / size as f64;
        for i in 0..size {
            let s = 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;
            let p = [x0 + 0.5 * (s + 1.0) * (x1 - x0), y0 + 0.5 * (t + 1.0) * (y1 - y0)];
            h.push(1.0 / surface.value(p)?);
            pts.push([1.0, s, t, s * s, s * t, t * t]);
        }
    }
    let q = least_squares_6(&pts, &h);
    let rest: Vec<f64> = h.iter().zip(&pts).map(|(v, m)| v - m.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()).collect();
    let smooth = mollify_raster(&rest, size, size, cutoff)?;
    let d: Vec<f64> = rest.iter().zip(&smooth).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    IrradianceImage::new(size, size, Rect { x0, x1, y0, y1 }, d.iter().map(|v| (v - mean).abs()).collect())
}

/// Normal-equation solve for six monomial coefficients.
fn least_squares_6(rows: &[[f64; 6]], rhs: &[f64]) -> [f64; 6] {
    let mut a = [[0.0; 7]; 6];
    for (r, &v) in rows.iter().zip(rhs) {
        for i in 0..6 {
            for j in 0..6 {
                a[i][j] += r[i] * r[j];
            }
            a[i][6] += r[i] * v;
        }
    }
    for c in 0..6 {
        let p = (c..6).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows");
        a.swap(c, p);
        for r in c + 1..6 {
            let f = a[r][c] / a[c][c];
            for k in c..7 {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    let mut x = [0.0; 6];
    for c in (0..6).rev() {
        x[c] = (a[c][6] - (c + 1..6).map(|k| a[c][k] * x[k]).sum::<f64>()) / a[c][c];
    }
    x
}
