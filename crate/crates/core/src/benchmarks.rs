//! Dirichlet Monge-Ampère test problems on the unit square.

use std::io::Write;
use std::time::Instant;

use crate::collocation::{nested_schedule, nested_solve, nested_solve_with, solve, Linearization, PdeProblem, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::tensor::{collocation_points, CollocationPoint, Jet, SplineSurface, TensorBasis};

/// Penalty weight of the modified determinant.
pub const LAMBDA: f64 = 1e3;

/// Coarsest grid of the nested iteration.
pub const COARSEST: usize = 11;

/// Stagnation window used for the degenerate benchmark 4.
pub const DEGENERATE_STALL_WINDOW: usize = 10;

/// Symmetric 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat2 {
    pub w11: f64,
    pub w12: f64,
    pub w22: f64,
}

impl SymMat2 {
    pub fn new(w11: f64, w12: f64, w22: f64) -> Self {
        Self { w11, w12, w22 }
    }

    pub fn from_hessian(h: &[[f64; 2]; 2]) -> Self {
        Self { w11: h[0][0], w12: h[0][1], w22: h[1][1] }
    }

    pub fn det(&self) -> f64 {
        self.w11 * self.w22 - self.w12 * self.w12
    }

    pub fn is_positive_definite(&self) -> bool {
        self.w11 > 0.0 && self.det() > 0.0
    }
}

/// `max(0, W11) max(0, W22) - W12²`.
pub fn det_plus(w: SymMat2) -> f64 {
    w.w11.max(0.0) * w.w22.max(0.0) - w.w12 * w.w12
}

/// `det⁺(W) - λ (min(0, W11)² + min(0, W22)²)`.
pub fn det_plus_lambda(w: SymMat2, lambda: f64) -> f64 {
    det_plus(w) - lambda * (w.w11.min(0.0).powi(2) + w.w22.min(0.0).powi(2))
}

/// Partial derivatives of [`det_plus_lambda`] with respect to
/// `(W11, W12, W22)`.
pub fn det_plus_lambda_grad(w: SymMat2, lambda: f64) -> [f64; 3] {
    let d11 = if w.w11 > 0.0 { w.w22.max(0.0) } else { -2.0 * lambda * w.w11 };
    let d22 = if w.w22 > 0.0 { w.w11.max(0.0) } else { -2.0 * lambda * w.w22 };
    [d11, -2.0 * w.w12, d22]
}

const X0: [f64; 2] = [0.5, 0.5];

fn dist_x0(p: [f64; 2]) -> f64 {
    (p[0] - X0[0]).hypot(p[1] - X0[1])
}

fn norm2_sq(p: [f64; 2]) -> f64 {
    p[0] * p[0] + p[1] * p[1]
}

/// One of the five test cases. `h` is the grid spacing, used by example 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub id: u8,
    pub h: f64,
}

impl Benchmark {
    pub fn new(id: u8, n: usize) -> Result<Self> {
        if !(1..=5).contains(&id) {
            return Err(Error::InvalidArgument(format!("unknown benchmark {id} (expected 1..=5)")));
        }
        if n < COARSEST {
            return Err(Error::InvalidArgument(format!("need N >= {COARSEST}, got {n}")));
        }
        Ok(Self { id, h: 1.0 / (n - 1) as f64 })
    }

    /// Benchmark 4, whose `f_h` is supported at a single knot.
    pub fn is_degenerate(&self) -> bool {
        self.id == 4
    }

    /// Right-hand side `f`.
    pub fn rhs(&self, p: [f64; 2]) -> f64 {
        match self.id {
            1 => {
                let r2 = norm2_sq(p);
                (1.0 + r2) * r2.exp()
            }
            2 => {
                let r = dist_x0(p);
                if r == 0.0 { 0.0 } else { (1.0 - 0.2 / r).max(0.0) }
            }
            3 => 2.0 / (2.0 - norm2_sq(p)).powi(2),
            4 => {
                if dist_x0(p) <= self.h / 2.0 {
                    4.0 / (self.h * self.h)
                } else {
                    0.0
                }
            }
            _ => 1.0,
        }
    }

    /// Exact solution (examples 1 to 4).
    pub fn exact(&self, p: [f64; 2]) -> Option<f64> {
        match self.id {
            1 => Some((norm2_sq(p) / 2.0).exp()),
            2 => Some(0.5 * (dist_x0(p) - 0.2).max(0.0).powi(2)),
            3 => Some(-(2.0 - norm2_sq(p)).sqrt()),
            4 => Some(dist_x0(p)),
            _ => None,
        }
    }

    /// Gradient of the exact solution where it exists.
    pub fn exact_grad(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let d = [p[0] - X0[0], p[1] - X0[1]];
        match self.id {
            1 => {
                let u = (norm2_sq(p) / 2.0).exp();
                Some([p[0] * u, p[1] * u])
            }
            2 => {
                let r = dist_x0(p);
                let s = if r > 0.2 { (r - 0.2) / r } else { 0.0 };
                Some([s * d[0], s * d[1]])
            }
            3 => {
                let w = (2.0 - norm2_sq(p)).sqrt();
                Some([p[0] / w, p[1] / w])
            }
            4 => {
                let r = dist_x0(p);
                (r > 0.0).then(|| [d[0] / r, d[1] / r])
            }
            _ => None,
        }
    }

    /// Dirichlet data.
    pub fn boundary(&self, p: [f64; 2]) -> f64 {
        self.exact(p).unwrap_or(0.0)
    }
}

/// `det⁺_λ(D²u) = f` in the interior, `u = g` on the boundary.
#[derive(Debug, Clone)]
pub struct DirichletMongeAmpere {
    pub bench: Benchmark,
    pub lambda: f64,
}

impl PdeProblem for DirichletMongeAmpere {
    fn interior(&self, pt: &CollocationPoint, jet: &Jet, _aux: f64) -> Result<Linearization> {
        let w = SymMat2::from_hessian(&jet.hess);
        Ok(Linearization {
            value: det_plus_lambda(w, self.lambda) - self.bench.rhs(pt.p),
            dh: det_plus_lambda_grad(w, self.lambda),
            ..Default::default()
        })
    }

    fn boundary(&self, pt: &CollocationPoint, jet: &Jet, _aux: f64) -> Result<Linearization> {
        Ok(Linearization { value: jet.value - self.bench.boundary(pt.p), du: 1.0, ..Default::default() })
    }
}

/// The Monge-Ampère problem of benchmark `id` on an `n × n` grid.
pub fn make_benchmark(id: u8, n: usize) -> Result<(DirichletMongeAmpere, Benchmark)> {
    let bench = Benchmark::new(id, n)?;
    Ok((DirichletMongeAmpere { bench, lambda: LAMBDA }, bench))
}

/// `Δu = √(2f)` with the benchmark's Dirichlet data.
struct PoissonGuess {
    bench: Benchmark,
}

impl PdeProblem for PoissonGuess {
    fn interior(&self, pt: &CollocationPoint, jet: &Jet, _aux: f64) -> Result<Linearization> {
        let rhs = (2.0 * self.bench.rhs(pt.p).max(0.0)).sqrt();
        Ok(Linearization { value: jet.hess[0][0] + jet.hess[1][1] - rhs, dh: [1.0, 0.0, 1.0], ..Default::default() })
    }

    fn boundary(&self, pt: &CollocationPoint, jet: &Jet, _aux: f64) -> Result<Linearization> {
        Ok(Linearization { value: jet.value - self.bench.boundary(pt.p), du: 1.0, ..Default::default() })
    }
}

/// Solution of the Poisson problem `Δu = √(2f)` on an `n × n` grid, used as
/// the initial guess (not convexified).
pub fn poisson_initial_guess(bench: &Benchmark, n: usize) -> Result<SplineSurface> {
    let basis = TensorBasis::square(0.0, 1.0, n)?;
    let mut problem = PoissonGuess { bench: *bench };
    let sol = solve(&mut problem, SplineSurface::zeros(basis), 0.0, &SolverConfig::default())?;
    if !sol.report.usable() {
        return Err(Error::Stalled(format!("Poisson initial guess: {:?}", sol.report.termination)));
    }
    Ok(sol.surface)
}

/// Maximum of `|u - u*|` over all knot pairs.
pub fn max_knot_error(surface: &SplineSurface, bench: &Benchmark) -> Option<f64> {
    let grid = collocation_points(surface.basis());
    let mut e: f64 = 0.0;
    for c in grid.points() {
        let exact = bench.exact(c.p)?;
        e = e.max((surface.value(c.p).expect("knot inside domain") - exact).abs());
    }
    Some(e)
}

/// Full pipeline for one grid size: Poisson guess on the coarsest grid,
/// then nested iteration up to `n`.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub n: usize,
    pub surface: SplineSurface,
    pub reports: Vec<(usize, SolveReport)>,
    pub max_error: Option<f64>,
    pub seconds: f64,
}

pub fn solve_benchmark(id: u8, n: usize, config: &SolverConfig) -> Result<BenchmarkRun> {
    let start = Instant::now();
    let bench = Benchmark::new(id, n)?;
    let schedule = nested_schedule(COARSEST, n);
    let coarse = Benchmark::new(id, schedule[0])?;
    let initial = poisson_initial_guess(&coarse, schedule[0])?;
    let family = |m| Ok(make_benchmark(id, m)?.0);
    let out = if bench.is_degenerate() {
        // f_h vanishes away from one knot: Newton stalls on every level and
        // the best iterate is kept.
        let config = SolverConfig { stall_window: config.stall_window.max(DEGENERATE_STALL_WINDOW), ..config.clone() };
        nested_solve_with(family, initial, 0.0, &schedule, &config, |_| true)?
    } else {
        nested_solve(family, initial, 0.0, &schedule, config)?
    };
    let seconds = start.elapsed().as_secs_f64();
    let max_error = max_knot_error(&out.surface, &bench);
    Ok(BenchmarkRun { n, surface: out.surface, reports: out.reports, max_error, seconds })
}

/// One line of an error/timing table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub n: usize,
    pub max_error: Option<f64>,
    pub seconds: f64,
    /// Set when the solve failed; the row then carries no error value.
    pub failure: Option<String>,
}

/// Solves benchmark `id` for every grid size in `ns`. Failures are recorded
/// in the row rather than aborting the table.
pub fn run_table(id: u8, ns: &[usize], config: &SolverConfig) -> Result<Vec<TableRow>> {
    Benchmark::new(id, COARSEST)?;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let start = Instant::now();
        match solve_benchmark(id, n, config) {
            Ok(run) => rows.push(TableRow { n, max_error: run.max_error, seconds: run.seconds, failure: None }),
            Err(e) => rows.push(TableRow {
                n,
                max_error: None,
                seconds: start.elapsed().as_secs_f64(),
                failure: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

/// Writes `N,max_error,seconds`; failed rows have an empty error field.
pub fn write_table_csv(rows: &[TableRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "N,max_error,seconds")?;
    for r in rows {
        let err = match (r.max_error, &r.failure) {
            (Some(e), None) => format!("{e:.6e}"),
            _ => String::new(),
        };
        writeln!(w, "{},{},{:.3}", r.n, err, r.seconds)?;
    }
    Ok(())
}

/// Samples along the horizontal center line and along the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSections {
    /// `(x, u(x, 1/2))`.
    pub x_axis: Vec<(f64, f64)>,
    /// `(s, u(s, s))`.
    pub diagonal: Vec<(f64, f64)>,
}

pub const CROSS_SECTION_SAMPLES: usize = 512;

pub fn cross_sections(surface: &SplineSurface) -> Result<CrossSections> {
    let [[x0, x1], [y0, y1]] = surface.basis().bounds();
    let ym = 0.5 * (y0 + y1);
    let m = CROSS_SECTION_SAMPLES;
    let t = |k: usize| k as f64 / (m - 1) as f64;
    let x_axis = (0..m)
        .map(|k| {
            let x = if k == m - 1 { x1 } else { x0 + (x1 - x0) * t(k) };
            Ok((x, surface.value([x, ym])?))
        })
        .collect::<Result<_>>()?;
    let diagonal = (0..m)
        .map(|k| {
            let (x, y) = if k == m - 1 { (x1, y1) } else { (x0 + (x1 - x0) * t(k), y0 + (y1 - y0) * t(k)) };
            Ok((t(k), surface.value([x, y])?))
        })
        .collect::<Result<_>>()?;
    Ok(CrossSections { x_axis, diagonal })
}

pub fn write_cross_section_csv(samples: &[(f64, f64)], mut w: impl Write) -> Result<()> {
    writeln!(w, "s,u")?;
    for (s, u) in samples {
        writeln!(w, "{s:.17e},{u:.17e}")?;
    }
    Ok(())
}
