//! Flat `key = value` configuration for reflector runs.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Rectangles are written `x0 x1 y0 y1`, schedules `21:55, 41:55`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::collocation::JacobianMode;
use crate::error::{Error, Result};
use crate::image::Rect;
use crate::reflector::ReflectorSetup;

/// Ray-tracing settings that sit next to the reflector setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub setup: ReflectorSetup,
    pub seed: u64,
    pub rays: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { setup: ReflectorSetup::default(), seed: 1, rays: 10_000_000 }
    }
}

pub const KEYS: [&str; 17] = [
    "omega",
    "sigma",
    "z_plane",
    "source_intensity",
    "G",
    "lambda",
    "gray_lift",
    "schedule",
    "image_size",
    "max_iter",
    "tol_residual",
    "tol_step",
    "stall_window",
    "jacobian",
    "fd_step",
    "seed",
    "rays",
];

fn number<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Parse(format!("{key}: '{value}': {e}")))
}

fn rect(key: &str, value: &str) -> Result<Rect> {
    let v: Vec<f64> = value.split_whitespace().map(|s| number(key, s)).collect::<Result<_>>()?;
    match v[..] {
        [x0, x1, y0, y1] => Rect::new(x0, x1, y0, y1),
        _ => Err(Error::Parse(format!("{key}: expected 'x0 x1 y0 y1', got '{value}'"))),
    }
}

/// Parses `N:m` pairs separated by commas.
pub fn parse_schedule(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|pair| {
            let (n, m) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("schedule: '{}' is not of the form N:m", pair.trim())))?;
            Ok((number("schedule", n.trim())?, number("schedule", m.trim())?))
        })
        .collect()
}

fn apply(s: &mut RunSettings, key: &str, value: &str) -> Result<()> {
    let setup = &mut s.setup;
    match key {
        "omega" => setup.omega = rect(key, value)?,
        "sigma" => setup.sigma = rect(key, value)?,
        "z_plane" => setup.z_plane = number(key, value)?,
        "source_intensity" => setup.source_intensity = number(key, value)?,
        "G" => setup.size_g = number(key, value)?,
        "lambda" => setup.lambda = number(key, value)?,
        "gray_lift" => setup.gray_lift = number(key, value)?,
        "schedule" => setup.schedule = parse_schedule(value)?,
        "image_size" => setup.image_size = number(key, value)?,
        "max_iter" => setup.solver.max_iter = number(key, value)?,
        "tol_residual" => setup.solver.tol_residual = number(key, value)?,
        "tol_step" => setup.solver.tol_step = number(key, value)?,
        "stall_window" => setup.solver.stall_window = number(key, value)?,
        "jacobian" => {
            setup.solver.jacobian_mode = match value {
                "analytic" => JacobianMode::Analytic,
                "fd" => JacobianMode::FiniteDifference,
                _ => return Err(Error::Parse(format!("jacobian: expected 'analytic' or 'fd', got '{value}'"))),
            }
        }
        "fd_step" => setup.solver.fd_step = number(key, value)?,
        "seed" => s.seed = number(key, value)?,
        "rays" => s.rays = number(key, value)?,
        _ => return Err(Error::Parse(format!("unknown key '{key}'"))),
    }
    Ok(())
}

/// Parses a configuration on top of the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<RunSettings> {
    let mut settings = RunSettings::default();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if seen.contains(&key) {
            return Err(Error::Parse(format!("line {}: duplicate key '{key}'", i + 1)));
        }
        apply(&mut settings, key, value).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        seen.push(key);
    }
    settings.validate()?;
    Ok(settings)
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.setup.validate()?;
        self.setup.solver.validate()?;
        if self.setup.image_size == 0 {
            return Err(Error::InvalidArgument("image_size must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its value, in [`KEYS`] order; parses back to `self`.
    pub fn to_config_string(&self) -> String {
        let s = &self.setup;
        let r = |r: &Rect| format!("{} {} {} {}", r.x0, r.x1, r.y0, r.y1);
        let schedule = s.schedule.iter().map(|(n, m)| format!("{n}:{m}")).collect::<Vec<_>>().join(", ");
        let jacobian = match s.solver.jacobian_mode {
            JacobianMode::Analytic => "analytic",
            JacobianMode::FiniteDifference => "fd",
        };
        let values = [
            r(&s.omega),
            r(&s.sigma),
            s.z_plane.to_string(),
            s.source_intensity.to_string(),
            s.size_g.to_string(),
            s.lambda.to_string(),
            s.gray_lift.to_string(),
            schedule,
            s.image_size.to_string(),
            s.solver.max_iter.to_string(),
            s.solver.tol_residual.to_string(),
            s.solver.tol_step.to_string(),
            s.solver.stall_window.to_string(),
            jacobian.to_string(),
            s.solver.fd_step.to_string(),
            self.seed.to_string(),
            self.rays.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
