//! Square nonlinear collocation systems and their trust-region solver.
//!
//! Unknowns are the tensor spline coefficients, optionally followed by one
//! scalar (`aux`). Equations are the interior residuals, then the boundary
//! residuals, then an optional scalar constraint.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse::{factor_paired, CscMatrix, SparseLu};
use crate::tensor::{collocation_points, combine, BasisJet, CollocationGrid, CollocationPoint, Jet, SplineSurface, TensorBasis};

/// A pointwise residual and its partial derivatives with respect to `u`,
/// `Du`, the Hessian entries `(H11, H12, H22)` and the scalar unknown.
///
/// `H12` is treated as a single variable, so the derivative of e.g.
/// `H11 H22 - H12²` with respect to it is `-2 H12`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Linearization {
    pub value: f64,
    pub du: f64,
    pub dp: [f64; 2],
    pub dh: [f64; 3],
    pub daux: f64,
}

impl Linearization {
    pub fn constant(value: f64) -> Self {
        Self { value, ..Self::default() }
    }

    /// Derivative with respect to the coefficient of basis function `b`.
    pub fn apply(&self, b: &BasisJet) -> f64 {
        self.du * b.d[0]
            + self.dp[0] * b.d[1]
            + self.dp[1] * b.d[2]
            + self.dh[0] * b.d[3]
            + self.dh[1] * b.d[4]
            + self.dh[2] * b.d[5]
    }
}

/// The scalar constraint and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub daux: f64,
}

/// A collocation problem `F(x, u, Du, D²u) = 0` in the interior with a
/// boundary condition `G(x, ν, u, Du) = 0`.
pub trait PdeProblem: Sync {
    fn interior(&self, pt: &CollocationPoint, jet: &Jet, aux: f64) -> Result<Linearization>;

    fn boundary(&self, pt: &CollocationPoint, jet: &Jet, aux: f64) -> Result<Linearization>;

    /// Whether the system carries the extra scalar unknown. Must agree with
    /// [`PdeProblem::constraint`] returning `Some`.
    fn has_aux(&self) -> bool {
        false
    }

    fn constraint(&self, _surface: &SplineSurface, _aux: f64) -> Option<ConstraintEval> {
        None
    }

    /// Called before the first iteration and after every accepted step;
    /// problems with iterate-dependent data (boundary projections) refresh it
    /// here.
    fn refresh(&mut self, _surface: &SplineSurface, _aux: f64, _grid: &CollocationGrid) -> Result<()> {
        Ok(())
    }
}

/// How the Jacobian is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Converged when the max-norm of the residual drops to this value.
    pub tol_residual: f64,
    /// Also stop when an accepted step is at most `tol_step * (1 + ‖x‖)`.
    pub tol_step: f64,
    /// Initial trust radius relative to `max(1, ‖x‖)`; `None` starts with the
    /// length of the first Newton step.
    pub initial_radius: Option<f64>,
    pub jacobian_mode: JacobianMode,
    pub fd_step: f64,
    /// Give up ([`Termination::Stalled`]) when the best residual of the last
    /// `stall_window` iterations is not below half the best residual before
    /// them; 0 disables the check.
    pub stall_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_residual: 1e-10,
            tol_step: 1e-10,
            initial_radius: None,
            jacobian_mode: JacobianMode::Analytic,
            fd_step: 1e-7,
            stall_window: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tol_residual > 0.0
            && self.tol_step > 0.0
            && self.fd_step > 0.0
            && self.initial_radius.is_none_or(|r| r > 0.0)
            && self.max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid solver configuration {self:?}")))
        }
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// `‖r‖∞ ≤ tol_residual`.
    Residual,
    /// An accepted step fell below the step tolerance.
    StepTolerance,
    /// The trust radius underflowed or the residual stagnated.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual_norm: f64,
    /// Only set for [`Termination::Residual`].
    pub converged: bool,
    pub termination: Termination,
    pub radius_history: Vec<f64>,
    /// Max-norm of the residual before each iteration and at the end.
    pub residual_history: Vec<f64>,
    /// `(merit before, merit after)` of every accepted step, with
    /// merit `½‖r‖₂²`.
    pub accepted_merits: Vec<(f64, f64)>,
    /// Largest `‖step‖ / radius` over all trial steps.
    pub max_step_ratio: f64,
    pub aux_value: Option<f64>,
}

impl SolveReport {
    /// Terminated with a usable iterate (residual or step criterion).
    pub fn usable(&self) -> bool {
        matches!(self.termination, Termination::Residual | Termination::StepTolerance)
    }
}

/// Result of a solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub surface: SplineSurface,
    pub aux: f64,
    pub report: SolveReport,
}

/// Per-axis basis data at the grid lines, shared by all collocation points.
struct GridCache {
    basis: TensorBasis,
    grid: CollocationGrid,
    lx: Vec<crate::bspline::LocalBasis>,
    ly: Vec<crate::bspline::LocalBasis>,
}

impl GridCache {
    fn new(basis: &TensorBasis) -> Result<Self> {
        let grid = collocation_points(basis);
        let lx = basis.x.knots().grid().iter().map(|&x| basis.x.local(x)).collect::<Result<_>>()?;
        let ly = basis.y.knots().grid().iter().map(|&y| basis.y.local(y)).collect::<Result<_>>()?;
        Ok(Self { basis: basis.clone(), grid, lx, ly })
    }

    fn jets(&self, pt: &CollocationPoint) -> Vec<BasisJet> {
        let dim_y = self.basis.y.dim();
        let lx = &self.lx[pt.grid[0]];
        let ly = &self.ly[pt.grid[1]];
        let mut out = Vec::with_capacity(lx.len() * ly.len());
        for (i, bx) in lx.iter() {
            for (j, by) in ly.iter() {
                let d = [
                    bx[0] * by[0],
                    bx[1] * by[0],
                    bx[0] * by[1],
                    bx[2] * by[0],
                    bx[1] * by[1],
                    bx[0] * by[2],
                ];
                if d.iter().any(|&v| v != 0.0) {
                    out.push(BasisJet { index: i * dim_y + j, d });
                }
            }
        }
        out
    }

    fn n_unknowns(&self, aux: bool) -> usize {
        self.basis.dim() + usize::from(aux)
    }
}

fn eval_point<P: PdeProblem + ?Sized>(problem: &P, pt: &CollocationPoint, jet: &Jet, aux: f64) -> Result<Linearization> {
    let lin = if pt.normal.is_some() { problem.boundary(pt, jet, aux)? } else { problem.interior(pt, jet, aux)? };
    if !lin.value.is_finite() {
        return Err(Error::NonFiniteResidual { x: pt.p[0], y: pt.p[1] });
    }
    Ok(lin)
}

fn check_aux<P: PdeProblem + ?Sized>(problem: &P, surface: &SplineSurface, aux: f64) -> Result<Option<ConstraintEval>> {
    let c = problem.constraint(surface, aux);
    if c.is_some() != problem.has_aux() {
        return Err(Error::InvalidArgument("scalar constraint present iff the problem has an aux unknown".into()));
    }
    Ok(c)
}

fn residual_with<P: PdeProblem + ?Sized>(
    problem: &P,
    cache: &GridCache,
    surface: &SplineSurface,
    aux: f64,
) -> Result<Vec<f64>> {
    let coeffs = surface.coeffs();
    let mut r: Vec<f64> = cache
        .grid
        .points()
        .par_iter()
        .map(|pt| {
            let jet = combine(&cache.jets(pt), coeffs);
            eval_point(problem, pt, &jet, aux).map(|l| l.value)
        })
        .collect::<Result<_>>()?;
    if let Some(c) = check_aux(problem, surface, aux)? {
        if !c.value.is_finite() {
            return Err(Error::InvalidArgument("non-finite scalar constraint".into()));
        }
        r.push(c.value);
    }
    Ok(r)
}

/// Residual vector: interior points, boundary points, then the constraint.
pub fn assemble_residual<P: PdeProblem + ?Sized>(problem: &P, surface: &SplineSurface, aux: f64) -> Result<Vec<f64>> {
    let cache = GridCache::new(surface.basis())?;
    residual_with(problem, &cache, surface, aux)
}

fn jacobian_with<P: PdeProblem + ?Sized>(
    problem: &P,
    cache: &GridCache,
    surface: &SplineSurface,
    aux: f64,
    mode: JacobianMode,
    fd_step: f64,
) -> Result<CscMatrix> {
    let coeffs = surface.coeffs();
    let has_aux = problem.has_aux();
    let n = cache.n_unknowns(has_aux);
    let aux_col = cache.basis.dim();
    let rows: Vec<Vec<(usize, usize, f64)>> = cache
        .grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(row, pt)| {
            let jets = cache.jets(pt);
            let jet = combine(&jets, coeffs);
            let mut out = Vec::with_capacity(jets.len() + 1);
            match mode {
                JacobianMode::Analytic => {
                    let lin = eval_point(problem, pt, &jet, aux)?;
                    for b in &jets {
                        out.push((row, b.index, lin.apply(b)));
                    }
                    if has_aux {
                        out.push((row, aux_col, lin.daux));
                    }
                }
                JacobianMode::FiniteDifference => {
                    let f = |j: &Jet, a: f64| eval_point(problem, pt, j, a).map(|l| l.value);
                    for b in &jets {
                        let h = fd_step * coeffs[b.index].abs().max(1.0);
                        let shift = |s: f64| Jet {
                            value: jet.value + s * b.d[0],
                            grad: [jet.grad[0] + s * b.d[1], jet.grad[1] + s * b.d[2]],
                            hess: [
                                [jet.hess[0][0] + s * b.d[3], jet.hess[0][1] + s * b.d[4]],
                                [jet.hess[1][0] + s * b.d[4], jet.hess[1][1] + s * b.d[5]],
                            ],
                        };
                        let d = (f(&shift(h), aux)? - f(&shift(-h), aux)?) / (2.0 * h);
                        out.push((row, b.index, d));
                    }
                    if has_aux {
                        let h = fd_step * aux.abs().max(1.0);
                        out.push((row, aux_col, (f(&jet, aux + h)? - f(&jet, aux - h)?) / (2.0 * h)));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut triplets: Vec<(usize, usize, f64)> = rows.into_iter().flatten().collect();
    if let Some(c) = check_aux(problem, surface, aux)? {
        let row = cache.grid.len();
        match mode {
            JacobianMode::Analytic => {
                triplets.extend(c.grad.iter().enumerate().filter(|e| *e.1 != 0.0).map(|(j, &v)| (row, j, v)));
                triplets.push((row, aux_col, c.daux));
            }
            JacobianMode::FiniteDifference => {
                let mut s = surface.clone();
                for j in 0..coeffs.len() {
                    let h = fd_step * coeffs[j].abs().max(1.0);
                    s.coeffs_mut()[j] = coeffs[j] + h;
                    let plus = problem.constraint(&s, aux).map_or(0.0, |c| c.value);
                    s.coeffs_mut()[j] = coeffs[j] - h;
                    let minus = problem.constraint(&s, aux).map_or(0.0, |c| c.value);
                    s.coeffs_mut()[j] = coeffs[j];
                    let d = (plus - minus) / (2.0 * h);
                    if d != 0.0 {
                        triplets.push((row, j, d));
                    }
                }
                let h = fd_step * aux.abs().max(1.0);
                let plus = problem.constraint(surface, aux + h).map_or(0.0, |c| c.value);
                let minus = problem.constraint(surface, aux - h).map_or(0.0, |c| c.value);
                triplets.push((row, aux_col, (plus - minus) / (2.0 * h)));
            }
        }
    }
    let m = cache.grid.len() + usize::from(has_aux);
    if m != n {
        return Err(Error::Dimension(format!("{m} equations for {n} unknowns")));
    }
    Ok(CscMatrix::from_triplets(m, n, &triplets))
}

/// Jacobian of [`assemble_residual`] with respect to the coefficients (and
/// `aux` as the last column).
pub fn assemble_jacobian<P: PdeProblem + ?Sized>(
    problem: &P,
    surface: &SplineSurface,
    aux: f64,
    mode: JacobianMode,
    fd_step: f64,
) -> Result<CscMatrix> {
    let cache = GridCache::new(surface.basis())?;
    jacobian_with(problem, &cache, surface, aux, mode, fd_step)
}

fn factor(cache: &GridCache, jac: &CscMatrix, has_aux: bool) -> Result<SparseLu> {
    let ny = cache.basis.y.dim();
    let mut row_to_col: Vec<usize> = cache.grid.points().iter().map(|p| p.grid[0] * ny + p.grid[1]).collect();
    let mut coords: Vec<Option<[i64; 2]>> =
        (0..cache.basis.dim()).map(|k| Some([(k / ny) as i64, (k % ny) as i64])).collect();
    if has_aux {
        row_to_col.push(cache.basis.dim());
        coords.push(None);
    }
    factor_paired(jac, &row_to_col, &coords)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Double-dogleg step of length at most `radius`.
///
/// `newton` is `-J⁻¹r` (absent when `J` is singular), `grad = Jᵀr` and
/// `jg = J grad`.
pub fn dogleg_step(newton: Option<&[f64]>, grad: &[f64], jg: &[f64], r_norm2: f64, radius: f64) -> Vec<f64> {
    let g2 = dot(grad, grad);
    let jg2 = dot(jg, jg);
    let cauchy: Vec<f64> = if jg2 > 0.0 { grad.iter().map(|g| -g * g2 / jg2).collect() } else { vec![0.0; grad.len()] };
    let cp_norm = norm2(&cauchy);
    let Some(newton) = newton else {
        // Steepest descent only.
        if cp_norm <= radius {
            return cauchy;
        }
        let s = radius / g2.sqrt();
        return grad.iter().map(|g| -s * g).collect();
    };
    let nn = norm2(newton);
    if nn <= radius {
        return newton.to_vec();
    }
    // Dennis-Mei bias of the Newton point towards the Cauchy point.
    let gamma = if jg2 > 0.0 && r_norm2 > 0.0 { (g2 * g2 / (jg2 * r_norm2)).min(1.0) } else { 1.0 };
    let eta = 0.2 + 0.8 * gamma;
    if eta * nn <= radius {
        let s = radius / nn;
        return newton.iter().map(|v| s * v).collect();
    }
    if cp_norm >= radius {
        let s = radius / g2.sqrt();
        return grad.iter().map(|g| -s * g).collect();
    }
    // Point on the segment from the Cauchy point to eta * Newton with length
    // radius.
    let d: Vec<f64> = newton.iter().zip(&cauchy).map(|(n, c)| eta * n - c).collect();
    let a = dot(&d, &d);
    let b = 2.0 * dot(&cauchy, &d);
    let c = cp_norm * cp_norm - radius * radius;
    let tau = if a > 0.0 { (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a) } else { 0.0 };
    cauchy.iter().zip(&d).map(|(c, d)| c + tau * d).collect()
}

/// Trust-region constants.
const ETA_ACCEPT: f64 = 1e-4;
const RHO_GOOD: f64 = 0.75;
const RHO_POOR: f64 = 0.25;
const GROW: f64 = 2.0;
const SHRINK: f64 = 1.0 / 3.0;
const MIN_RADIUS: f64 = 1e-14;

/// Solves the collocation system starting from `initial` (and `aux0` when
/// the problem has a scalar unknown) with the double-dogleg trust-region
/// method.
pub fn solve<P: PdeProblem + ?Sized>(
    problem: &mut P,
    initial: SplineSurface,
    aux0: f64,
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    let cache = GridCache::new(initial.basis())?;
    let has_aux = problem.has_aux();
    let dim = cache.basis.dim();
    let mut surface = initial;
    let mut aux = aux0;
    problem.refresh(&surface, aux, &cache.grid)?;
    let mut r = residual_with(problem, &cache, &surface, aux)?;

    let x_norm = |s: &SplineSurface, a: f64| {
        let c = s.coeffs();
        (dot(c, c) + if has_aux { a * a } else { 0.0 }).sqrt()
    };
    let mut radius = config.initial_radius.map(|r0| r0 * x_norm(&surface, aux).max(1.0));
    let mut report = SolveReport {
        iterations: 0,
        final_residual_norm: norm_inf(&r),
        converged: false,
        termination: Termination::MaxIterations,
        radius_history: Vec::new(),
        residual_history: Vec::new(),
        accepted_merits: Vec::new(),
        max_step_ratio: 0.0,
        aux_value: has_aux.then_some(aux),
    };

    let mut factored: Option<(CscMatrix, Option<Vec<f64>>, Vec<f64>, Vec<f64>)> = None;
    loop {
        let r_inf = norm_inf(&r);
        report.residual_history.push(r_inf);
        if r_inf <= config.tol_residual {
            report.termination = Termination::Residual;
            break;
        }
        if report.iterations >= config.max_iter {
            report.termination = Termination::MaxIterations;
            break;
        }
        if stagnated(&report.residual_history, config.stall_window) {
            report.termination = Termination::Stalled;
            break;
        }
        report.iterations += 1;

        if factored.is_none() {
            let jac = jacobian_with(problem, &cache, &surface, aux, config.jacobian_mode, config.fd_step)?;
            let newton = match factor(&cache, &jac, has_aux) {
                Ok(lu) => {
                    let s: Vec<f64> = lu.solve(&r).into_iter().map(|v| -v).collect();
                    s.iter().all(|v| v.is_finite()).then_some(s)
                }
                Err(Error::SingularMatrix { .. }) => None,
                Err(e) => return Err(e),
            };
            let grad = jac.tr_mul_vec(&r);
            let jg = jac.mul_vec(&grad);
            factored = Some((jac, newton, grad, jg));
        }
        let (jac, newton, grad, jg) = factored.as_ref().expect("factored above");
        if newton.is_none() && norm2(grad) == 0.0 {
            return Err(Error::SingularMatrix { column: 0 });
        }
        let delta = *radius.get_or_insert_with(|| match newton {
            Some(n) => norm2(n).max(f64::MIN_POSITIVE),
            None => norm2(grad),
        });
        report.radius_history.push(delta);

        let r_norm2 = dot(&r, &r);
        let step = dogleg_step(newton.as_deref(), grad, jg, r_norm2, delta);
        let step_norm = norm2(&step);
        report.max_step_ratio = report.max_step_ratio.max(step_norm / delta);

        let mut trial = surface.clone();
        for (c, s) in trial.coeffs_mut().iter_mut().zip(&step) {
            *c += s;
        }
        let trial_aux = if has_aux { aux + step[dim] } else { aux };
        let merit = 0.5 * r_norm2;
        let trial_r = match residual_with(problem, &cache, &trial, trial_aux) {
            Ok(v) => Some(v),
            Err(Error::NonFiniteResidual { .. }) | Err(Error::Inadmissible { .. }) => None,
            Err(e) => return Err(e),
        };
        let (rho, trial_merit) = match &trial_r {
            Some(tr) => {
                let tm = 0.5 * dot(tr, tr);
                let js = jac.mul_vec(&step);
                let lin: Vec<f64> = r.iter().zip(&js).map(|(a, b)| a + b).collect();
                let pred = merit - 0.5 * dot(&lin, &lin);
                let ared = merit - tm;
                (if pred > 0.0 { ared / pred } else { -1.0 }, tm)
            }
            None => (-1.0, f64::INFINITY),
        };

        let mut new_radius = if rho > RHO_GOOD {
            GROW * delta
        } else if rho < RHO_POOR {
            SHRINK * delta.min(step_norm)
        } else {
            delta
        };
        if rho > ETA_ACCEPT && trial_merit < merit {
            surface = trial;
            aux = trial_aux;
            report.accepted_merits.push((merit, trial_merit));
            problem.refresh(&surface, aux, &cache.grid)?;
            r = residual_with(problem, &cache, &surface, aux)?;
            factored = None;
            if step_norm <= config.tol_step * (1.0 + x_norm(&surface, aux)) && norm_inf(&r) > config.tol_residual {
                report.residual_history.push(norm_inf(&r));
                report.termination = Termination::StepTolerance;
                break;
            }
        } else if step_norm <= config.tol_step * (1.0 + x_norm(&surface, aux)) {
            // Even the smallest trial steps no longer reduce the merit.
            report.residual_history.push(norm_inf(&r));
            report.termination = Termination::StepTolerance;
            break;
        }
        if new_radius < MIN_RADIUS * (1.0 + x_norm(&surface, aux)) {
            report.residual_history.push(norm_inf(&r));
            report.termination = Termination::Stalled;
            break;
        }
        if !new_radius.is_finite() {
            new_radius = delta;
        }
        radius = Some(new_radius);
    }
    report.final_residual_norm = norm_inf(&r);
    report.converged = report.termination == Termination::Residual;
    report.aux_value = has_aux.then_some(aux);
    Ok(Solution { surface, aux, report })
}

fn stagnated(history: &[f64], window: usize) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let (before, recent) = history.split_at(history.len() - window);
    let best = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    best(recent) > 0.5 * best(before)
}

/// Grid sizes of the nested iteration from `n0` to `target`: `n0`, then
/// `2n - 1` while that stays below `target`, then `target`.
pub fn nested_schedule(n0: usize, target: usize) -> Vec<usize> {
    let mut out = vec![n0.min(target)];
    let mut n = n0;
    while n < target {
        n = 2 * n - 1;
        out.push(n.min(target));
    }
    out.dedup();
    out
}

/// Outcome of a nested iteration.
#[derive(Debug, Clone)]
pub struct NestedSolution {
    pub surface: SplineSurface,
    pub aux: f64,
    pub reports: Vec<(usize, SolveReport)>,
}

/// Solves on each grid size of `schedule` in turn, transferring each
/// solution to the next grid as its initial guess. `family(n)` builds the
/// problem for `n` grid points.
pub fn nested_solve<P: PdeProblem, F: FnMut(usize) -> Result<P>>(
    family: F,
    initial: SplineSurface,
    aux0: f64,
    schedule: &[usize],
    config: &SolverConfig,
) -> Result<NestedSolution> {
    nested_solve_with(family, initial, aux0, schedule, config, SolveReport::usable)
}

/// [`nested_solve`] where `accept` decides whether a level's report lets the
/// iteration continue. Accepting stalled levels suits degenerate problems
/// whose discrete solution is only approximated.
pub fn nested_solve_with<P: PdeProblem, F: FnMut(usize) -> Result<P>>(
    mut family: F,
    initial: SplineSurface,
    aux0: f64,
    schedule: &[usize],
    config: &SolverConfig,
    accept: impl Fn(&SolveReport) -> bool,
) -> Result<NestedSolution> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("schedule {schedule:?} must be nonempty and strictly increasing")));
    }
    if initial.basis().x.dim() != schedule[0] || initial.basis().y.dim() != schedule[0] {
        return Err(Error::InvalidArgument(format!(
            "initial surface has {} grid points, schedule starts at {}",
            initial.basis().x.dim(),
            schedule[0]
        )));
    }
    let mut surface = initial;
    let mut aux = aux0;
    let mut reports = Vec::with_capacity(schedule.len());
    for (level, &n) in schedule.iter().enumerate() {
        let wrap = |e: Error| Error::LevelFailed { level, n, source: Box::new(e) };
        if level > 0 {
            let basis = surface.basis().with_grid_points(n).map_err(wrap)?;
            surface = surface.resample(basis).map_err(wrap)?;
        }
        let mut problem = family(n).map_err(wrap)?;
        let sol = solve(&mut problem, surface, aux, config).map_err(wrap)?;
        if !accept(&sol.report) {
            return Err(wrap(Error::Stalled(format!(
                "{:?} after {} iterations, residual {:.3e}",
                sol.report.termination, sol.report.iterations, sol.report.final_residual_norm
            ))));
        }
        surface = sol.surface;
        aux = sol.aux;
        reports.push((n, sol.report));
    }
    Ok(NestedSolution { surface, aux, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::interpolate;

    /// `Δu = f` with Dirichlet data `g`.
    struct Poisson<F: Fn([f64; 2]) -> f64 + Sync, G: Fn([f64; 2]) -> f64 + Sync> {
        f: F,
        g: G,
    }

    impl<F: Fn([f64; 2]) -> f64 + Sync, G: Fn([f64; 2]) -> f64 + Sync> PdeProblem for Poisson<F, G> {
        fn interior(&self, pt: &CollocationPoint, jet: &Jet, _: f64) -> Result<Linearization> {
            Ok(Linearization {
                value: jet.hess[0][0] + jet.hess[1][1] - (self.f)(pt.p),
                dh: [1.0, 0.0, 1.0],
                ..Default::default()
            })
        }

        fn boundary(&self, pt: &CollocationPoint, jet: &Jet, _: f64) -> Result<Linearization> {
            Ok(Linearization { value: jet.value - (self.g)(pt.p), du: 1.0, ..Default::default() })
        }
    }

    /// `u_xx u_yy - u_xy² = f` plus `u = g`, with a mean-value constraint
    /// and scalar multiplier on `f` to exercise the aux column.
    struct MongeAmpere {
        f: f64,
        mean: f64,
        integrals: Vec<f64>,
    }

    impl PdeProblem for MongeAmpere {
        fn interior(&self, _: &CollocationPoint, jet: &Jet, aux: f64) -> Result<Linearization> {
            let h = jet.hess;
            Ok(Linearization {
                value: h[0][0] * h[1][1] - h[0][1] * h[0][1] - aux * self.f,
                dh: [h[1][1], -2.0 * h[0][1], h[0][0]],
                daux: -self.f,
                ..Default::default()
            })
        }

        fn boundary(&self, pt: &CollocationPoint, jet: &Jet, _: f64) -> Result<Linearization> {
            let [x, y] = pt.p;
            let n = pt.normal.unwrap();
            // Neumann data of (x² + y²)/2.
            Ok(Linearization { value: jet.grad[0] * n[0] + jet.grad[1] * n[1] - (x * n[0] + y * n[1]), dp: n, ..Default::default() })
        }

        fn has_aux(&self) -> bool {
            true
        }

        fn constraint(&self, s: &SplineSurface, _: f64) -> Option<ConstraintEval> {
            let value = dot(s.coeffs(), &self.integrals) - self.mean;
            Some(ConstraintEval { value, grad: self.integrals.clone(), daux: 0.0 })
        }
    }

    fn tensor_integrals(b: &TensorBasis) -> Vec<f64> {
        let ix = b.x.integrals();
        let iy = b.y.integrals();
        ix.iter().flat_map(|a| iy.iter().map(move |c| a * c)).collect()
    }

    #[test]
    fn stagnation_needs_a_full_window_without_halving() {
        assert!(!stagnated(&[1.0, 0.9, 0.8], 0));
        assert!(!stagnated(&[1.0, 0.9], 2));
        assert!(stagnated(&[1.0, 0.9, 0.8], 2));
        assert!(!stagnated(&[1.0, 0.9, 0.4], 2));
        assert!(stagnated(&[1.0, 0.1, 2.0, 3.0, 0.06], 3));
    }

    #[test]
    fn poisson_residual_vanishes_for_exact_cubic() {
        let u = |p: [f64; 2]| p[0].powi(3) + p[0] * p[1] * p[1];
        let lap = |p: [f64; 2]| 6.0 * p[0] + 2.0 * p[0];
        let s = interpolate(u, TensorBasis::square(0.0, 1.0, 11).unwrap()).unwrap();
        let r = assemble_residual(&Poisson { f: lap, g: u }, &s, 0.0).unwrap();
        assert_eq!(r.len(), 121);
        assert!(norm_inf(&r) <= 1e-9);
    }

    #[test]
    fn linear_problem_converges_in_one_step() {
        let u = |p: [f64; 2]| (p[0] * p[1]).sin() + p[0];
        let f = |p: [f64; 2]| -(p[0] * p[0] + p[1] * p[1]) * (p[0] * p[1]).sin();
        let mut prob = Poisson { f, g: u };
        let basis = TensorBasis::square(0.0, 1.0, 21).unwrap();
        let sol = solve(&mut prob, SplineSurface::zeros(basis), 0.0, &SolverConfig::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert_eq!(sol.report.iterations, 1);
        let j1 = assemble_jacobian(&prob, &sol.surface, 0.0, JacobianMode::Analytic, 1e-7).unwrap();
        let j0 = assemble_jacobian(&prob, &SplineSurface::zeros(sol.surface.basis().clone()), 0.0, JacobianMode::Analytic, 1e-7).unwrap();
        let d0 = j0.to_dense();
        let d1 = j1.to_dense();
        for (a, b) in d0.iter().flatten().zip(d1.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let basis = TensorBasis::square(0.0, 1.0, 11).unwrap();
        let prob = MongeAmpere { f: 1.0, mean: 1.0 / 3.0, integrals: tensor_integrals(&basis) };
        let s = interpolate(|p| 0.5 * (p[0] * p[0] + p[1] * p[1]) + 0.1 * (3.0 * p[0]).sin() * p[1], basis).unwrap();
        let a = assemble_jacobian(&prob, &s, 0.7, JacobianMode::Analytic, 1e-6).unwrap().to_dense();
        let f = assemble_jacobian(&prob, &s, 0.7, JacobianMode::FiniteDifference, 1e-6).unwrap().to_dense();
        assert_eq!(a.len(), 122);
        let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().flatten().zip(f.iter().flatten()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3 * scale), "{x} vs {y}");
        }
    }

    #[test]
    fn monge_ampere_with_constraint_recovers_paraboloid() {
        let basis = TensorBasis::square(0.0, 1.0, 15).unwrap();
        let integrals = tensor_integrals(&basis);
        // mean of (x² + y²)/2 over the unit square is 1/3
        let mut prob = MongeAmpere { f: 2.0, mean: 1.0 / 3.0, integrals };
        let init = interpolate(|p| 0.3 * (p[0] * p[0] + p[1] * p[1]) + 0.2, basis).unwrap();
        let sol = solve(&mut prob, init, 1.0, &SolverConfig::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert!((sol.aux - 0.5).abs() < 1e-9);
        let j = sol.surface.eval([0.3, 0.6]).unwrap();
        assert!((j.value - 0.5 * (0.09 + 0.36)).abs() < 1e-9);
        for (before, after) in &sol.report.accepted_merits {
            assert!(after <= before);
        }
        assert!(sol.report.max_step_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn dogleg_returns_newton_inside_radius() {
        let newton = [0.3, -0.4];
        let grad = [1.0, 2.0];
        let jg = [2.0, 1.0];
        assert_eq!(dogleg_step(Some(&newton), &grad, &jg, 1.0, 0.6), newton.to_vec());
        for radius in [0.01, 0.1, 0.3, 0.45, 0.49] {
            let s = dogleg_step(Some(&newton), &grad, &jg, 1.0, radius);
            assert!(norm2(&s) <= radius * (1.0 + 1e-12));
            assert!((norm2(&s) - radius).abs() <= 1e-12 || norm2(&s) <= radius);
        }
        let s = dogleg_step(None, &grad, &jg, 1.0, 0.01);
        assert!((norm2(&s) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn schedules() {
        assert_eq!(nested_schedule(11, 41), vec![11, 21, 41]);
        assert_eq!(nested_schedule(11, 31), vec![11, 21, 31]);
        assert_eq!(nested_schedule(11, 11), vec![11]);
        assert_eq!(nested_schedule(11, 361), vec![11, 21, 41, 81, 161, 321, 361]);
    }

    #[test]
    fn nested_solve_runs_every_level() {
        let u = |p: [f64; 2]| (p[0] + 2.0 * p[1]).exp();
        let f = |p: [f64; 2]| 5.0 * (p[0] + 2.0 * p[1]).exp();
        let basis = TensorBasis::square(0.0, 1.0, 11).unwrap();
        let out = nested_solve(|_| Ok(Poisson { f, g: u }), SplineSurface::zeros(basis), 0.0, &[11, 21, 31], &SolverConfig::default())
            .unwrap();
        assert_eq!(out.reports.iter().map(|r| r.0).collect::<Vec<_>>(), vec![11, 21, 31]);
        assert_eq!(out.surface.basis().x.dim(), 31);
        assert!(nested_solve(|_| Ok(Poisson { f, g: u }), out.surface.clone(), 0.0, &[31, 21], &SolverConfig::default()).is_err());
    }
}
