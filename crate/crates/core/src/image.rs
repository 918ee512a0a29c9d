//! Grayscale rasters: PGM I/O and the irradiance images living on the target
//! rectangle.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit grayscale raster, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Dimension(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }
}

struct Tokens<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn next(&mut self) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() && self.data[self.pos] != b'#' {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse("unexpected end of PGM data".into()));
        }
        std::str::from_utf8(&self.data[start..self.pos]).map_err(|_| Error::Parse("non-ASCII PGM header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.next()?;
        t.parse().map_err(|_| Error::Parse(format!("bad PGM number {t:?}")))
    }
}

/// Parses a plain (P2) or binary (P5) PGM with maxval at most 255. Values
/// are rescaled to 0..=255 when maxval is smaller.
pub fn parse_pgm(data: &[u8]) -> Result<GrayImage> {
    let mut tok = Tokens { data, pos: 0 };
    let magic = tok.next()?.to_owned();
    let width = tok.number()?;
    let height = tok.number()?;
    let maxval = tok.number()?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    let scale = |v: usize| -> Result<u8> {
        if v > maxval {
            return Err(Error::Parse(format!("PGM sample {v} exceeds maxval {maxval}")));
        }
        Ok(((v * 255 + maxval / 2) / maxval) as u8)
    };
    let n = width.checked_mul(height).ok_or_else(|| Error::Parse("PGM too large".into()))?;
    let pixels = match magic.as_str() {
        "P2" => (0..n).map(|_| tok.number().and_then(scale)).collect::<Result<Vec<u8>>>()?,
        "P5" => {
            // Exactly one whitespace byte separates the header from the raster.
            let start = tok.pos + 1;
            let raster = data
                .get(start..start + n)
                .ok_or_else(|| Error::Parse(format!("PGM raster truncated: need {n} bytes")))?;
            raster.iter().map(|&b| scale(b as usize)).collect::<Result<Vec<u8>>>()?
        }
        other => return Err(Error::Parse(format!("not a PGM file (magic {other:?})"))),
    };
    GrayImage::new(width, height, pixels)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn write_pgm_p5(img: &GrayImage, mut w: impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn write_pgm_p2(img: &GrayImage, mut w: impl Write) -> Result<()> {
    writeln!(w, "P2\n{} {}\n255", img.width, img.height)?;
    for row in img.pixels.chunks(img.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1 && [x0, x1, y0, y1].iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument(format!("degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]")));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x0..=self.x1).contains(&p[0]) && (self.y0..=self.y1).contains(&p[1])
    }
}

/// A nonnegative density on a rectangle, one value per pixel. Pixel
/// `(i, j)` (column `i`, row `j` from the top) covers
/// `[x0 + i dx, x0 + (i+1) dx] × [y1 - (j+1) dy, y1 - j dy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IrradianceImage {
    pub width: usize,
    pub height: usize,
    pub extent: Rect,
    pub values: Vec<f64>,
}

impl IrradianceImage {
    pub fn new(width: usize, height: usize, extent: Rect, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Dimension(format!("{} values for a {width}x{height} image", values.len())));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("irradiance values must be finite and nonnegative".into()));
        }
        Ok(Self { width, height, extent, values })
    }

    pub fn constant(width: usize, height: usize, extent: Rect, value: f64) -> Result<Self> {
        Self::new(width, height, extent, vec![value; width * height])
    }

    pub fn from_gray(img: &GrayImage, extent: Rect) -> Self {
        Self {
            width: img.width,
            height: img.height,
            extent,
            values: img.pixels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn pixel_size(&self) -> (f64, f64) {
        ((self.extent.x1 - self.extent.x0) / self.width as f64, (self.extent.y1 - self.extent.y0) / self.height as f64)
    }

    pub fn pixel_area(&self) -> f64 {
        let (dx, dy) = self.pixel_size();
        dx * dy
    }

    /// Integral of the density over the extent.
    pub fn total_flux(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.pixel_area()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    /// Pixel containing `p`, if inside the extent.
    pub fn pixel_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        if !self.extent.contains(p) {
            return None;
        }
        let (dx, dy) = self.pixel_size();
        let i = (((p[0] - self.extent.x0) / dx) as usize).min(self.width - 1);
        let j = (((self.extent.y1 - p[1]) / dy) as usize).min(self.height - 1);
        Some((i, j))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * factor).collect(), ..self.clone() }
    }

    /// Values mapped linearly from `[lo, hi]` to 0..=255.
    pub fn to_gray(&self, lo: f64, hi: f64) -> GrayImage {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels = self.values.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        GrayImage { width: self.width, height: self.height, pixels }
    }

    /// Values mapped from `[0, max]` to 0..=255.
    pub fn to_gray_auto(&self) -> GrayImage {
        self.to_gray(0.0, self.max())
    }
}

/// High-contrast test pattern: a ring, a bar and a disk, white on black.
pub fn test_pattern(size: usize) -> GrayImage {
    let mut pixels = vec![0u8; size * size];
    for j in 0..size {
        for i in 0..size {
            let x = (i as f64 + 0.5) / size as f64;
            let y = 1.0 - (j as f64 + 0.5) / size as f64;
            let r = (x - 0.33).hypot(y - 0.62);
            let ring = (0.12..0.22).contains(&r);
            let bar = (0.58..0.8).contains(&x) && (0.15..0.85).contains(&y);
            let dot = (x - 0.3).hypot(y - 0.22) < 0.1;
            if ring || bar || dot {
                pixels[j * size + i] = 255;
            }
        }
    }
    GrayImage { width: size, height: size, pixels }
}

/// Lifts the image so its minimum is at least `gray_lift`
/// (`g + max(0, gray_lift - min g)`) and scales it to carry `source_flux`.
pub fn prepare_target(image: &IrradianceImage, gray_lift: f64, source_flux: f64) -> Result<IrradianceImage> {
    if !(gray_lift >= 0.0 && source_flux > 0.0) {
        return Err(Error::InvalidArgument(format!("gray lift {gray_lift} / source flux {source_flux}")));
    }
    let shift = (gray_lift - image.min()).max(0.0);
    let lifted: Vec<f64> = image.values.iter().map(|v| v + shift).collect();
    let flux = lifted.iter().sum::<f64>() * image.pixel_area();
    if flux <= 0.0 {
        return Err(Error::InvalidArgument("target image carries no flux".into()));
    }
    let k = source_flux / flux;
    IrradianceImage::new(image.width, image.height, image.extent, lifted.into_iter().map(|v| v * k).collect())
}

/// Normalized weights of the discrete mollifier with parameter `n`, as a
/// `(2r+1)²` stencil with `r` its radius in pixels.
pub fn mollifier_weights(n: usize) -> Result<(usize, Vec<f64>)> {
    if n < 1 {
        return Err(Error::InvalidArgument("mollifier parameter must be >= 1".into()));
    }
    let bump = |x: f64, y: f64| {
        let r2 = x * x + y * y;
        if r2 < 1.0 { (-1.0 / (1.0 - r2)).exp() } else { 0.0 }
    };
    let nf = n as f64;
    // Largest offset with |2i/n| < 1.
    let r = (n - 1) / 2;
    let side = 2 * r + 1;
    let mut w = vec![0.0; side * side];
    for a in 0..side {
        for b in 0..side {
            let i = a as f64 - r as f64;
            let j = b as f64 - r as f64;
            w[a * side + b] = bump(2.0 * i / nf, 2.0 * j / nf);
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    Ok((r, w))
}

/// Half-sample mirror index into `0..len`.
fn mirror(k: isize, len: usize) -> usize {
    let len = len as isize;
    let period = 2 * len;
    let mut m = k.rem_euclid(period);
    if m >= len {
        m = period - 1 - m;
    }
    m as usize
}

/// Convolves a raster with the mollifier. Each pixel spreads its value over
/// the stencil, with the parts falling outside mirrored back in, so the sum
/// is preserved.
pub fn mollify_raster(values: &[f64], width: usize, height: usize, n: usize) -> Result<Vec<f64>> {
    let (r, w) = mollifier_weights(n)?;
    if r == 0 {
        return Ok(values.to_vec());
    }
    let side = 2 * r + 1;
    let mut out = vec![0.0; values.len()];
    for j in 0..height {
        for i in 0..width {
            let v = values[j * width + i];
            if v == 0.0 {
                continue;
            }
            for b in 0..side {
                let jj = mirror(j as isize + b as isize - r as isize, height);
                let row = &mut out[jj * width..(jj + 1) * width];
                let wrow = &w[b * side..(b + 1) * side];
                for (a, &wk) in wrow.iter().enumerate() {
                    let ii = mirror(i as isize + a as isize - r as isize, width);
                    row[ii] += wk * v;
                }
            }
        }
    }
    Ok(out)
}

/// The image convolved with the discrete mollifier `φ_n`.
pub fn mollify(image: &IrradianceImage, n: usize) -> Result<IrradianceImage> {
    let values = mollify_raster(&image.values, image.width, image.height, n)?;
    IrradianceImage::new(image.width, image.height, image.extent, values.into_iter().map(|v| v.max(0.0)).collect())
}

/// Bilinear interpolation through pixel centers; outside the outermost
/// centers the nearest edge value is used.
pub fn sample_g(image: &IrradianceImage, z: [f64; 2]) -> f64 {
    let (dx, dy) = image.pixel_size();
    let fx = ((z[0] - image.extent.x0) / dx - 0.5).clamp(0.0, (image.width - 1) as f64);
    let fy = ((image.extent.y1 - z[1]) / dy - 0.5).clamp(0.0, (image.height - 1) as f64);
    let i0 = (fx.floor() as usize).min(image.width.saturating_sub(2));
    let j0 = (fy.floor() as usize).min(image.height.saturating_sub(2));
    let i1 = (i0 + 1).min(image.width - 1);
    let j1 = (j0 + 1).min(image.height - 1);
    let tx = fx - i0 as f64;
    let ty = fy - j0 as f64;
    let g = |i, j| image.get(i, j);
    (1.0 - ty) * ((1.0 - tx) * g(i0, j0) + tx * g(i1, j0)) + ty * ((1.0 - tx) * g(i0, j1) + tx * g(i1, j1))
}

/// Gradient of [`sample_g`] with respect to `z` (zero in clamped
/// directions).
pub fn sample_g_grad(image: &IrradianceImage, z: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = image.pixel_size();
    let rx = (z[0] - image.extent.x0) / dx - 0.5;
    let ry = (image.extent.y1 - z[1]) / dy - 0.5;
    let fx = rx.clamp(0.0, (image.width - 1) as f64);
    let fy = ry.clamp(0.0, (image.height - 1) as f64);
    let i0 = (fx.floor() as usize).min(image.width.saturating_sub(2));
    let j0 = (fy.floor() as usize).min(image.height.saturating_sub(2));
    let i1 = (i0 + 1).min(image.width - 1);
    let j1 = (j0 + 1).min(image.height - 1);
    let tx = fx - i0 as f64;
    let ty = fy - j0 as f64;
    let g = |i, j| image.get(i, j);
    let inside_x = rx > 0.0 && rx < (image.width - 1) as f64;
    let inside_y = ry > 0.0 && ry < (image.height - 1) as f64;
    let d_tx = (1.0 - ty) * (g(i1, j0) - g(i0, j0)) + ty * (g(i1, j1) - g(i0, j1));
    let d_ty = (1.0 - tx) * (g(i0, j1) - g(i0, j0)) + tx * (g(i1, j1) - g(i1, j0));
    [if inside_x { d_tx / dx } else { 0.0 }, if inside_y { -d_ty / dy } else { 0.0 }]
}

/// Overlap weights mapping `from` equal cells onto `to` equal cells of the
/// same interval: `w[t]` lists `(source, fraction of the source cell)`.
fn overlap_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    (0..to)
        .map(|t| {
            let lo = t as f64 * from as f64 / to as f64;
            let hi = (t + 1) as f64 * from as f64 / to as f64;
            let mut out = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < from {
                let a = lo.max(s as f64);
                let b = hi.min((s + 1) as f64);
                if b > a {
                    out.push((s, b - a));
                }
                s += 1;
            }
            out
        })
        .collect()
}

/// Area-weighted resampling to a `width × height` raster over the same
/// extent; the total flux is preserved.
pub fn resample(image: &IrradianceImage, width: usize, height: usize) -> Result<IrradianceImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("empty target raster".into()));
    }
    if width == image.width && height == image.height {
        return Ok(image.clone());
    }
    let wx = overlap_weights(image.width, width);
    let wy = overlap_weights(image.height, height);
    // Density average over each target cell.
    let sx = width as f64 / image.width as f64;
    let sy = height as f64 / image.height as f64;
    let mut tmp = vec![0.0; image.height * width];
    for j in 0..image.height {
        for (t, ws) in wx.iter().enumerate() {
            tmp[j * width + t] = ws.iter().map(|&(s, f)| f * image.get(s, j)).sum::<f64>() * sx;
        }
    }
    let mut out = vec![0.0; height * width];
    for (t, ws) in wy.iter().enumerate() {
        for i in 0..width {
            out[t * width + i] = ws.iter().map(|&(s, f)| f * tmp[s * width + i]).sum::<f64>() * sy;
        }
    }
    IrradianceImage::new(width, height, image.extent, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect() -> Rect {
        Rect::new(-1.5, 1.5, 1.0, 4.0).unwrap()
    }

    #[test]
    fn pgm_round_trip_binary_and_plain() {
        let img = GrayImage::new(3, 2, vec![0, 17, 255, 128, 3, 99]).unwrap();
        let mut p5 = Vec::new();
        write_pgm_p5(&img, &mut p5).unwrap();
        assert_eq!(parse_pgm(&p5).unwrap(), img);
        let mut p2 = Vec::new();
        write_pgm_p2(&img, &mut p2).unwrap();
        assert_eq!(parse_pgm(&p2).unwrap(), img);
    }

    #[test]
    fn pgm_comments_and_maxval() {
        let txt = b"P2\n# a comment\n2 2 # trailing\n15\n0 15\n5 10\n";
        let img = parse_pgm(txt).unwrap();
        assert_eq!(img.pixels, vec![0, 255, 85, 170]);
        assert!(parse_pgm(b"P2\n1 1\n65535\n7\n").is_err());
        assert!(parse_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\0\0").is_err());
        assert!(parse_pgm(b"P2\n1 1\n10\n11\n").is_err());
    }

    #[test]
    fn lift_and_normalize() {
        let img = IrradianceImage::new(2, 1, rect(), vec![0.0, 100.0]).unwrap();
        let t = prepare_target(&img, 20.0, 1.0).unwrap();
        assert!((t.values[1] / t.values[0] - 6.0).abs() < 1e-12);
        assert!((t.total_flux() - 1.0).abs() < 1e-10);
        let bright = IrradianceImage::new(2, 1, rect(), vec![30.0, 60.0]).unwrap();
        let t = prepare_target(&bright, 20.0, 2.0).unwrap();
        assert!((t.values[1] / t.values[0] - 2.0).abs() < 1e-12);
        let black = IrradianceImage::constant(2, 2, rect(), 0.0).unwrap();
        assert!(prepare_target(&black, 0.0, 1.0).is_err());
    }

    #[test]
    fn mollifier_weights_sum_to_one() {
        for n in [3usize, 7, 19, 55] {
            let (r, w) = mollifier_weights(n).unwrap();
            assert_eq!(r, (n - 1) / 2);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            // Symmetric stencil.
            let side = 2 * r + 1;
            for a in 0..side {
                for b in 0..side {
                    assert_eq!(w[a * side + b], w[b * side + a]);
                    assert_eq!(w[a * side + b], w[(side - 1 - a) * side + b]);
                }
            }
        }
        assert_eq!(mollifier_weights(1).unwrap(), (0, vec![1.0]));
        assert!(mollifier_weights(0).is_err());
    }

    #[test]
    fn mollify_identity_constant_and_flux() {
        let img = IrradianceImage::new(4, 3, rect(), (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(mollify(&img, 1).unwrap(), img);
        let c = IrradianceImage::constant(40, 30, rect(), 2.5).unwrap();
        let m = mollify(&c, 19).unwrap();
        assert!(m.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let mut spike = vec![0.0; 50 * 50];
        spike[2 * 50 + 3] = 7.0;
        spike[25 * 50 + 25] = 1.0;
        let s = IrradianceImage::new(50, 50, rect(), spike).unwrap();
        let m = mollify(&s, 19).unwrap();
        assert!((m.total_flux() - s.total_flux()).abs() <= 1e-10 * s.total_flux());
    }

    #[test]
    fn bilinear_sampling() {
        let img = IrradianceImage::new(2, 2, Rect::new(0.0, 2.0, 0.0, 2.0).unwrap(), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        // Pixel centers: (0.5,1.5) -> 1, (1.5,1.5) -> 3, (0.5,0.5) -> 5, (1.5,0.5) -> 7.
        assert_eq!(sample_g(&img, [0.5, 1.5]), 1.0);
        assert_eq!(sample_g(&img, [1.5, 0.5]), 7.0);
        assert_eq!(sample_g(&img, [1.0, 1.5]), 2.0);
        assert_eq!(sample_g(&img, [-3.0, 1.5]), 1.0);
        assert_eq!(sample_g(&img, [0.5, 9.0]), 1.0);
        assert_eq!(sample_g(&img, [1.0, 1.0]), 4.0);
        let g = sample_g_grad(&img, [1.0, 1.0]);
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 4.0).abs() < 1e-12);
        assert_eq!(sample_g_grad(&img, [-1.0, 1.0])[0], 0.0);
    }

    #[test]
    fn resampling_preserves_flux_and_replicates() {
        let img = IrradianceImage::new(3, 2, rect(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let up = resample(&img, 6, 4).unwrap();
        assert!((up.total_flux() - img.total_flux()).abs() < 1e-12);
        assert_eq!(up.get(0, 0), 1.0);
        assert_eq!(up.get(1, 1), 1.0);
        assert_eq!(up.get(5, 3), 6.0);
        let odd = resample(&img, 7, 5).unwrap();
        assert!((odd.total_flux() - img.total_flux()).abs() < 1e-12);
        let down = resample(&up, 3, 2).unwrap();
        for (a, b) in down.values.iter().zip(&img.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_lookup() {
        let img = IrradianceImage::constant(4, 4, Rect::new(0.0, 4.0, 0.0, 4.0).unwrap(), 1.0).unwrap();
        assert_eq!(img.pixel_of([0.1, 3.9]), Some((0, 0)));
        assert_eq!(img.pixel_of([4.0, 0.0]), Some((3, 3)));
        assert_eq!(img.pixel_of([4.1, 0.0]), None);
    }
}
