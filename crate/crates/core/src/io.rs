//! Text formats for spline surfaces.
//!
//! Surface CSV: a `knots_x,...` line and a `knots_y,...` line with the full
//! clamped knot vectors, then one line of coefficients per x index. Floats
//! use the shortest representation that round-trips.

use std::io::{BufRead, Write};

use crate::bspline::{KnotVector, ModifiedBasis};
use crate::error::{Error, Result};
use crate::tensor::{SplineSurface, TensorBasis};

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_surface_csv(surface: &SplineSurface, mut w: impl Write) -> Result<()> {
    let basis = surface.basis();
    writeln!(w, "knots_x,{}", join(basis.x.knots().knots().iter().copied()))?;
    writeln!(w, "knots_y,{}", join(basis.y.knots().knots().iter().copied()))?;
    let ny = basis.y.dim();
    for row in surface.coeffs().chunks(ny) {
        writeln!(w, "{}", join(row.iter().copied()))?;
    }
    Ok(())
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {lineno}: '{}': {e}", s.trim()))))
        .collect()
}

fn parse_knots(line: Option<&str>, name: &str) -> Result<KnotVector> {
    let line = line.ok_or_else(|| Error::Parse(format!("missing {name} line")))?;
    let rest = line
        .strip_prefix(name)
        .and_then(|r| r.strip_prefix(','))
        .ok_or_else(|| Error::Parse(format!("expected a line starting with '{name},'")))?;
    let knots = parse_floats(rest, 0)?;
    if knots.len() < 8 {
        return Err(Error::Parse(format!("{name}: {} knots is too few", knots.len())));
    }
    let kv = KnotVector::uniform(knots[0], knots[knots.len() - 1], knots.len() - 6)?;
    let tol = 1e-12 * (kv.b() - kv.a()).abs().max(1.0);
    if kv.knots().iter().zip(&knots).any(|(a, b)| (a - b).abs() > tol) {
        return Err(Error::Parse(format!("{name} is not a clamped uniform knot vector")));
    }
    Ok(kv)
}

pub fn read_surface_csv(r: impl BufRead) -> Result<SplineSurface> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let mut it = lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty());
    let kx = parse_knots(it.next(), "knots_x")?;
    let ky = parse_knots(it.next(), "knots_y")?;
    let basis = TensorBasis::new(ModifiedBasis::new(kx), ModifiedBasis::new(ky));
    let (nx, ny) = (basis.x.dim(), basis.y.dim());
    let mut coeffs = Vec::with_capacity(nx * ny);
    for (i, line) in it.enumerate() {
        let row = parse_floats(line, i + 3)?;
        if row.len() != ny {
            return Err(Error::Parse(format!("coefficient row {i} has {} entries, expected {ny}", row.len())));
        }
        coeffs.extend(row);
    }
    if coeffs.len() != nx * ny {
        return Err(Error::Parse(format!("{} coefficient rows, expected {nx}", coeffs.len() / ny)));
    }
    SplineSurface::new(basis, coeffs)
}

/// `x,y,u` on a `samples × samples` grid over the surface's rectangle.
pub fn write_height_field_csv(surface: &SplineSurface, samples: usize, mut w: impl Write) -> Result<()> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples per axis, got {samples}")));
    }
    let [[x0, x1], [y0, y1]] = surface.basis().bounds();
    writeln!(w, "x,y,u")?;
    for i in 0..samples {
        let x = x0 + (x1 - x0) * i as f64 / (samples - 1) as f64;
        for j in 0..samples {
            let y = y0 + (y1 - y0) * j as f64 / (samples - 1) as f64;
            writeln!(w, "{x},{y},{}", surface.value([x, y])?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::interpolate;

    fn surface() -> SplineSurface {
        let basis = TensorBasis::rect(-0.25, 0.25, -0.2, 0.3, 11).unwrap();
        interpolate(|[x, y]| 0.3 + x * x - 0.7 * x * y + (3.0 * y).sin() / 7.0, basis).unwrap()
    }

    #[test]
    fn surface_round_trips_bit_exactly() {
        let s = surface();
        let mut buf = Vec::new();
        write_surface_csv(&s, &mut buf).unwrap();
        let back = read_surface_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        write_surface_csv(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn layout_is_row_major_by_x() {
        let s = surface();
        let mut buf = Vec::new();
        write_surface_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 + s.basis().x.dim());
        assert!(lines[0].starts_with("knots_x,-0.25,-0.25,-0.25,-0.25,"));
        let second: Vec<f64> = lines[3].split(',').map(|v| v.parse().unwrap()).collect();
        let ny = s.basis().y.dim();
        assert_eq!(second, s.coeffs()[ny..2 * ny]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let s = surface();
        let mut buf = Vec::new();
        write_surface_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let drop_row: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(read_surface_csv(drop_row.as_bytes()).is_err());
        assert!(read_surface_csv(text.replacen("knots_x", "knots", 1).as_bytes()).is_err());
        assert!(read_surface_csv(text.replacen(",0.3", ",abc", 1).as_bytes()).is_err());
        let skewed = text.replacen("knots_x,-0.25,-0.25,-0.25,-0.25,", "knots_x,-0.25,-0.25,-0.25,-0.25,-0.2,", 1);
        assert!(read_surface_csv(skewed.as_bytes()).is_err());
        assert!(read_surface_csv("".as_bytes()).is_err());
    }

    #[test]
    fn height_field_samples_corners() {
        let s = surface();
        let mut buf = Vec::new();
        write_height_field_csv(&s, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0], "x,y,u");
        let first: Vec<f64> = rows[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[..2], [-0.25, -0.2]);
        assert_eq!(first[2], s.value([-0.25, -0.2]).unwrap());
        assert!(write_height_field_csv(&s, 1, Vec::new()).is_err());
    }
}
