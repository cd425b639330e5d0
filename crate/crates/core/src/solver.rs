//! Picard solver for `theta_t = xi_t + int_0^t A(ds, theta_s)`, the
//! regularised SDE pipeline `x = w + theta` with `A = b * L^{-w}`, the
//! existence-condition checker and the mollification harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{DriftSpec, Mollifier};
use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, Path1D};
use crate::holder::{estimate_holder_exponents, holder_seminorms, ExponentFit, HolderReport};
use crate::occupation::{averaged_field_convolved, occupation_density};
use crate::sewing::{GermRule, PointSampler, TimeIndexedField};
use crate::spatial::SpatialGrid;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 50;
pub const DEFAULT_MAX_HALVINGS: u32 = 8;

/// Boundary paths `xi^1` on `[0,T1] x {0}` and `xi^2` on `{0} x [0,T2]`.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    xi1: Path1D,
    xi2: Path1D,
}

impl BoundaryData {
    pub fn new(xi1: Path1D, xi2: Path1D) -> Result<Self> {
        if xi1.dim() != xi2.dim() {
            return Err(Error::DimensionMismatch { expected: xi1.dim(), got: xi2.dim() });
        }
        if xi1.get(0) != xi2.get(0) {
            return Err(Error::domain(format!(
                "boundary paths disagree at the corner: {:?} vs {:?}",
                xi1.get(0),
                xi2.get(0)
            )));
        }
        Ok(Self { xi1, xi2 })
    }

    /// `xi = c` on both axes of `grid`.
    pub fn constant(c: &[f64], grid: &Grid2D) -> Result<Self> {
        let [t1, t2] = grid.horizons();
        let [n1, n2] = grid.levels();
        let p1 = Path1D::from_fn(t1, n1, c.len(), |_, o| o.copy_from_slice(c))?;
        let p2 = Path1D::from_fn(t2, n2, c.len(), |_, o| o.copy_from_slice(c))?;
        Self::new(p1, p2)
    }

    pub fn zero(dim: usize, grid: &Grid2D) -> Result<Self> {
        Self::constant(&vec![0.0; dim], grid)
    }

    pub fn dim(&self) -> usize {
        self.xi1.dim()
    }

    pub fn paths(&self) -> (&Path1D, &Path1D) {
        (&self.xi1, &self.xi2)
    }

    /// `xi_t = xi^1(t1) + xi^2(t2) - xi^1(0)` on the nodes of `grid`.
    pub fn field(&self, grid: &Grid2D) -> Result<Field2D> {
        let d = self.dim();
        let [m1, m2] = grid.nodes();
        let mut a = vec![0.0; m1 * d];
        let mut b = vec![0.0; m2 * d];
        for i in 0..m1 {
            self.xi1.eval(grid.node(i, 0)[0], &mut a[i * d..(i + 1) * d])?;
        }
        for j in 0..m2 {
            self.xi2.eval(grid.node(0, j)[1], &mut b[j * d..(j + 1) * d])?;
        }
        let corner = self.xi1.get(0).to_vec();
        let mut values = Vec::with_capacity(m1 * m2 * d);
        for i in 0..m1 {
            for j in 0..m2 {
                for c in 0..d {
                    // Written so that both axis traces are reproduced exactly.
                    let v = if i == 0 {
                        b[j * d + c]
                    } else if j == 0 {
                        a[i * d + c]
                    } else {
                        a[i * d + c] + (b[j * d + c] - corner[c])
                    };
                    values.push(v);
                }
            }
        }
        Field2D::new(*grid, d, values)
    }
}

/// Theorem selector for [`check_conditions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSet {
    /// `gamma_i (1 + eta) > 1` and `zeta + alpha > 2 + eta`.
    General,
    /// `zeta > d + 3 - 1/(2 H1) - 1/(2 H2)`.
    FbmSum,
    /// `zeta > d + 3 - 1/(2 H)` with `H = H1`.
    FbmPlusDeterministic,
    /// `zeta > 3 - 1/(2 max(H1, H2)) + d/2`.
    Sheet,
}

/// Regularity parameters entering the existence theorems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularityParams {
    pub zeta: f64,
    pub alpha: f64,
    pub gamma: [f64; 2],
    /// `None` asks for a feasibility search over `eta in (0, 1)`.
    pub eta: Option<f64>,
    pub p: f64,
    pub q: f64,
    pub hurst: [f64; 2],
    pub d: usize,
    pub lambda: f64,
}

impl Default for RegularityParams {
    fn default() -> Self {
        Self {
            zeta: 0.0,
            alpha: 0.0,
            gamma: [1.0, 1.0],
            eta: None,
            p: 1.0,
            q: f64::INFINITY,
            hurst: [0.5, 0.5],
            d: 1,
            lambda: 0.0,
        }
    }
}

/// One inequality `lhs > rhs` with `slack = lhs - rhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

impl Inequality {
    fn new(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        let slack = lhs - rhs;
        Self { name: name.into(), lhs, rhs, slack, holds: slack > 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub which: ConditionSet,
    pub pass: bool,
    pub checks: Vec<Inequality>,
    /// Open interval of admissible `eta` for the general conditions.
    pub eta_interval: Option<(f64, f64)>,
}

impl Verdict {
    /// Smallest slack over all inequalities.
    pub fn slack(&self) -> f64 {
        self.checks.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }
}

fn validate_params(p: &RegularityParams, which: ConditionSet) -> Result<()> {
    if !p.zeta.is_finite() {
        return Err(Error::domain("zeta must be finite"));
    }
    if p.d == 0 {
        return Err(Error::domain("dimension d must be at least 1"));
    }
    if !(p.p >= 1.0 && p.q >= 1.0) {
        return Err(Error::domain(format!("p and q must lie in [1, inf], got p={} q={}", p.p, p.q)));
    }
    if p.p.is_finite() && p.q.is_finite() && (1.0 / p.p + 1.0 / p.q - 1.0).abs() > 1e-12 {
        return Err(Error::domain(format!("1/p + 1/q must equal 1, got p={} q={}", p.p, p.q)));
    }
    match which {
        ConditionSet::General => {
            if p.gamma.iter().any(|g| !(*g > 0.5 && *g <= 1.0)) {
                return Err(Error::domain(format!("gamma must lie in (1/2, 1]^2, got {:?}", p.gamma)));
            }
            if !p.alpha.is_finite() {
                return Err(Error::domain("alpha must be finite"));
            }
            if let Some(eta) = p.eta {
                if !(eta > 0.0 && eta <= 1.0) {
                    return Err(Error::domain(format!("eta must lie in (0, 1], got {eta}")));
                }
            }
        }
        ConditionSet::FbmSum | ConditionSet::Sheet => {
            if p.hurst.iter().any(|h| !(*h > 0.0 && *h < 1.0)) {
                return Err(Error::domain(format!("Hurst parameters must lie in (0, 1), got {:?}", p.hurst)));
            }
        }
        ConditionSet::FbmPlusDeterministic => {
            if !(p.hurst[0] > 0.0 && p.hurst[0] < 1.0) {
                return Err(Error::domain(format!("Hurst parameter must lie in (0, 1), got {}", p.hurst[0])));
            }
        }
    }
    Ok(())
}

/// Evaluates the existence conditions of the selected theorem.
pub fn check_conditions(p: &RegularityParams, which: ConditionSet) -> Result<Verdict> {
    validate_params(p, which)?;
    let d = p.d as f64;
    let [h1, h2] = p.hurst;
    let (checks, eta_interval) = match which {
        ConditionSet::General => {
            let gmin = p.gamma[0].min(p.gamma[1]);
            let lo = (1.0 / gmin - 1.0).max(0.0);
            let hi = (p.zeta + p.alpha - 2.0).min(1.0);
            let interval = (lo < hi).then_some((lo, hi));
            let checks = match p.eta {
                Some(eta) => vec![
                    Inequality::new("gamma1*(1+eta) > 1", p.gamma[0] * (1.0 + eta), 1.0),
                    Inequality::new("gamma2*(1+eta) > 1", p.gamma[1] * (1.0 + eta), 1.0),
                    Inequality::new("zeta+alpha > 2+eta", p.zeta + p.alpha, 2.0 + eta),
                ],
                None => vec![Inequality::new("eta interval non-empty", hi, lo)],
            };
            (checks, Some(interval.unwrap_or((lo, hi))))
        }
        ConditionSet::FbmSum => (
            vec![Inequality::new(
                "zeta > d+3-1/(2H1)-1/(2H2)",
                p.zeta,
                d + 3.0 - 1.0 / (2.0 * h1) - 1.0 / (2.0 * h2),
            )],
            None,
        ),
        ConditionSet::FbmPlusDeterministic => {
            (vec![Inequality::new("zeta > d+3-1/(2H)", p.zeta, d + 3.0 - 1.0 / (2.0 * h1))], None)
        }
        ConditionSet::Sheet => (
            vec![Inequality::new("zeta > 3-1/(2 max H)+d/2", p.zeta, 3.0 - 1.0 / (2.0 * h1.max(h2)) + d / 2.0)],
            None,
        ),
    };
    let pass = checks.iter().all(|c| c.holds);
    Ok(Verdict { which, pass, checks, eta_interval })
}

/// Initial Picard iterate inside each window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// The inherited boundary data `xi~`.
    #[default]
    Boundary,
    /// `xi~ + c` away from the window's lower and left edges.
    Shifted(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: u32,
    pub rule: GermRule,
    pub initial: InitialGuess,
    /// Skip the Hölder diagnostics of the solution.
    pub skip_diagnostics: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            max_halvings: DEFAULT_MAX_HALVINGS,
            rule: GermRule::Midpoint,
            initial: InitialGuess::Boundary,
            skip_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowLog {
    pub window_i: usize,
    pub window_j: usize,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub theta: Field2D,
    pub windows: Vec<WindowLog>,
    /// Number of window columns and rows.
    pub schedule: [usize; 2],
    pub halvings: u32,
    /// `|theta - (xi + int A(ds, theta))|_inf` recomputed over the whole grid.
    pub residual: f64,
    pub holder: Option<HolderReport>,
    pub exponents: Option<ExponentFit>,
    /// Fitted mixed exponents of `theta`; membership in `C^gamma` is not certified.
    pub gamma_hat: Option<[f64; 2]>,
}

impl SolveReport {
    /// CSV with columns `window_i,window_j,iterations,residual`.
    pub fn write_iteration_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "window_i,window_j,iterations,residual")?;
        for w in &self.windows {
            writeln!(out, "{},{},{},{:.16e}", w.window_i, w.window_j, w.iterations, w.residual)?;
        }
        Ok(())
    }
}

/// Germs of every cell of `[i0,i1] x [j0,j1]`, row-major, `d` values each.
fn cell_germs<A: TimeIndexedField + ?Sized>(
    a: &A,
    theta: &Field2D,
    rule: GermRule,
    (i0, i1): (usize, usize),
    (j0, j1): (usize, usize),
) -> Vec<f64> {
    let grid = *theta.grid();
    let d = theta.dim();
    let cols = j1 - j0;
    let sampler = PointSampler::new(theta);
    (i0..i1)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; cols * d];
            let mut x = vec![0.0; d];
            for j in j0..j1 {
                let s = grid.node(i, j);
                let t = grid.node(i + 1, j + 1);
                sampler.sample(rule, s, t, &mut x);
                a.rect_increment(s, t, &x, &mut row[(j - j0) * d..(j - j0 + 1) * d]);
            }
            row
        })
        .flatten_iter()
        .collect()
}

enum WindowOutcome {
    Converged { iterations: usize, residual: f64 },
    Failed(String),
}

fn solve_window<A: TimeIndexedField + ?Sized>(
    a: &A,
    theta: &mut Field2D,
    (i0, i1): (usize, usize),
    (j0, j1): (usize, usize),
    opts: &PicardOptions,
) -> WindowOutcome {
    let d = theta.dim();
    let m2 = theta.grid().nodes()[1];
    let idx = |i: usize, j: usize| (i * m2 + j) * d;
    // Inherited boundary xi~(i,j) = theta(i0,j) + theta(i,j0) - theta(i0,j0).
    let mut base = vec![0.0; (i1 - i0 + 1) * (j1 - j0 + 1) * d];
    {
        let v = theta.values();
        for i in i0..=i1 {
            for j in j0..=j1 {
                for c in 0..d {
                    base[((i - i0) * (j1 - j0 + 1) + (j - j0)) * d + c] =
                        v[idx(i0, j) + c] + (v[idx(i, j0) + c] - v[idx(i0, j0) + c]);
                }
            }
        }
    }
    let shift = match opts.initial {
        InitialGuess::Boundary => 0.0,
        InitialGuess::Shifted(c) => c,
    };
    {
        let v = theta.values_mut();
        for i in i0 + 1..=i1 {
            for j in j0 + 1..=j1 {
                for c in 0..d {
                    v[idx(i, j) + c] = base[((i - i0) * (j1 - j0 + 1) + (j - j0)) * d + c] + shift;
                }
            }
        }
    }
    let cols = j1 - j0;
    let width = j1 - j0 + 1;
    let mut prev_update = f64::INFINITY;
    let mut growth = 0;
    let mut sums = vec![0.0; (i1 - i0 + 1) * width * d];
    for it in 1..=opts.max_iter {
        let germs = cell_germs(a, theta, opts.rule, (i0, i1), (j0, j1));
        // Prefix sums over the window.
        for i in 1..=i1 - i0 {
            for j in 1..=cols {
                for c in 0..d {
                    let at = |a: usize, b: usize| (a * width + b) * d + c;
                    sums[at(i, j)] = sums[at(i - 1, j)] + sums[at(i, j - 1)] - sums[at(i - 1, j - 1)]
                        + germs[((i - 1) * cols + j - 1) * d + c];
                }
            }
        }
        let v = theta.values_mut();
        let mut update: f64 = 0.0;
        let mut sup: f64 = 0.0;
        for i in i0 + 1..=i1 {
            for j in j0 + 1..=j1 {
                for c in 0..d {
                    let k = ((i - i0) * width + (j - j0)) * d + c;
                    let new = base[k] + sums[k];
                    update = update.max((new - v[idx(i, j) + c]).abs());
                    sup = sup.max(new.abs());
                    v[idx(i, j) + c] = new;
                }
            }
        }
        if !update.is_finite() {
            return WindowOutcome::Failed(format!("non-finite iterate at iteration {it}"));
        }
        if update < opts.tol * (1.0 + sup) {
            return WindowOutcome::Converged { iterations: it, residual: update };
        }
        if update > prev_update {
            growth += 1;
            if growth >= 3 {
                return WindowOutcome::Failed(format!("update grew for 3 iterations (last {update:.3e})"));
            }
        } else {
            growth = 0;
        }
        prev_update = update;
    }
    WindowOutcome::Failed(format!("no convergence in {} iterations (last update {prev_update:.3e})", opts.max_iter))
}

/// `|theta - (xi + int_0^t A(ds, theta_s))|_inf` with the cell germs of `theta`.
pub fn fixed_point_residual<A: TimeIndexedField + ?Sized>(
    a: &A,
    xi: &Field2D,
    theta: &Field2D,
    rule: GermRule,
) -> Result<f64> {
    xi.check_compatible(theta)?;
    let [m1, m2] = theta.grid().nodes();
    let d = theta.dim();
    let germs = cell_germs(a, theta, rule, (0, m1 - 1), (0, m2 - 1));
    let mut sums = vec![0.0; m1 * m2 * d];
    let mut worst: f64 = 0.0;
    for i in 0..m1 {
        for j in 0..m2 {
            for c in 0..d {
                let at = |a: usize, b: usize| (a * m2 + b) * d + c;
                if i > 0 && j > 0 {
                    sums[at(i, j)] = sums[at(i - 1, j)] + sums[at(i, j - 1)] - sums[at(i - 1, j - 1)]
                        + germs[((i - 1) * (m2 - 1) + j - 1) * d + c];
                }
                let r = theta.values()[at(i, j)] - xi.values()[at(i, j)] - sums[at(i, j)];
                worst = worst.max(r.abs());
            }
        }
    }
    Ok(worst)
}

/// Solves `theta_t = xi_t + int_0^t A(ds, theta_s)` on `grid`.
///
/// The integral is the left-to-right, bottom-to-top sum of the cell germs of
/// the current iterate. Windows are vertical strips; the strip width starts
/// at `T1` and is halved whenever an iteration fails to contract.
pub fn picard_solve<A: TimeIndexedField + ?Sized>(
    a: &A,
    xi: &BoundaryData,
    grid: &Grid2D,
    opts: &PicardOptions,
) -> Result<SolveReport> {
    if a.dim() != xi.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: xi.dim() });
    }
    if let Some(native) = a.native_grid() {
        let (nl, gl) = (native.levels(), grid.levels());
        if native.horizons() != grid.horizons() || nl[0] < gl[0] || nl[1] < gl[1] {
            return Err(Error::domain(format!(
                "solution grid {:?} is not a coarsening of the field's time grid {:?}",
                grid, native
            )));
        }
    }
    let xi_field = xi.field(grid)?;
    let [c1, c2] = grid.cells();
    let mut failures = Vec::new();
    for halvings in 0..=opts.max_halvings {
        let cols = 1usize << halvings;
        if cols > c1 {
            break;
        }
        let width = c1 / cols;
        let mut theta = xi_field.clone();
        let mut logs = Vec::with_capacity(cols);
        let mut failed = None;
        for k in 0..cols {
            match solve_window(a, &mut theta, (k * width, (k + 1) * width), (0, c2), opts) {
                WindowOutcome::Converged { iterations, residual } => {
                    logs.push(WindowLog { window_i: k, window_j: 0, iterations, residual })
                }
                WindowOutcome::Failed(msg) => {
                    failed = Some(format!("window {k}/{cols}: {msg}"));
                    break;
                }
            }
        }
        if let Some(msg) = failed {
            log::info!("Picard: {msg}; halving the window width");
            failures.push(msg);
            continue;
        }
        let residual = fixed_point_residual(a, &xi_field, &theta, opts.rule)?;
        let (holder, exponents, gamma_hat) = if opts.skip_diagnostics { (None, None, None) } else { diagnostics(&theta) };
        return Ok(SolveReport {
            theta,
            windows: logs,
            schedule: [cols, 1],
            halvings,
            residual,
            holder,
            exponents,
            gamma_hat,
        });
    }
    Err(Error::NonContraction { halvings: opts.max_halvings, diagnostics: failures.join("; ") })
}

fn diagnostics(theta: &Field2D) -> (Option<HolderReport>, Option<ExponentFit>, Option<[f64; 2]>) {
    let [n1, n2] = theta.grid().levels();
    let small = theta.restrict(n1.min(5), n2.min(5)).ok();
    let holder = small.and_then(|f| holder_seminorms(&f, [0.5, 0.5], None).ok());
    let top = n1.min(n2).min(8);
    let fit = if top >= 3 {
        theta
            .restrict(top.min(n1), top.min(n2))
            .ok()
            .and_then(|f| estimate_holder_exponents(&f, &(1..=top).collect::<Vec<_>>()).ok())
    } else {
        None
    };
    let gamma = fit.as_ref().map(|f| [f.mixed.exponents.0, f.mixed.exponents.1]);
    (holder, fit, gamma)
}

/// Solves `x_t = xi_t + w_t + int_0^t b(x_r) dr` as `x = w + theta`, with
/// `theta_t = xi_t + int_0^t (b * L^{-w})(ds, theta_s)`.
pub fn solve_regularized_sde(
    b: &DriftSpec,
    w: &Field2D,
    xi: &BoundaryData,
    sgrid: &SpatialGrid,
    opts: &PicardOptions,
) -> Result<(Field2D, SolveReport)> {
    if b.dim() != w.dim() {
        return Err(Error::DimensionMismatch { expected: b.dim(), got: w.dim() });
    }
    let lt = occupation_density(w, sgrid)?;
    let a = averaged_field_convolved(b.clone(), &lt, true)?;
    let report = picard_solve(&a, xi, w.grid(), opts)?;
    let x = w.add(&report.theta)?;
    Ok((x, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MollificationRow {
    pub eps: f64,
    /// Sup distance to the previous row's solution.
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MollificationTable {
    pub shape: Mollifier,
    pub rows: Vec<MollificationRow>,
    pub strictly_decreasing: bool,
    pub mean_ratio: f64,
    /// Distances strictly decrease and their mean consecutive ratio is below 0.9.
    pub cauchy: bool,
    #[serde(skip)]
    pub last: Option<Field2D>,
}

impl MollificationTable {
    pub fn final_gap(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.distance)
    }

    /// CSV with columns `eps,distance,error`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "eps,distance,error")?;
        for r in &self.rows {
            let dist = r.distance.map(|v| format!("{v:.16e}")).unwrap_or_default();
            let err = r.error.as_deref().unwrap_or("").replace('"', "\"\"");
            writeln!(out, "{:.16e},{dist},\"{err}\"", r.eps)?;
        }
        Ok(())
    }
}

/// Widths must be positive, finite and strictly decreasing, at least two of them.
pub fn check_eps(eps: &[f64]) -> Result<()> {
    if eps.len() < 2 {
        return Err(Error::Config("need at least two mollification widths".into()));
    }
    if eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("mollification widths must be positive and strictly decreasing, got {eps:?}")));
    }
    Ok(())
}

/// Builds a Cauchy table from a sequence of solutions (failed solves are `Err`).
pub(crate) fn cauchy_table(
    shape: Mollifier,
    eps: &[f64],
    solutions: Vec<Result<Field2D>>,
) -> MollificationTable {
    let mut rows = Vec::with_capacity(eps.len());
    let mut prev: Option<Field2D> = None;
    let mut last = None;
    for (e, sol) in eps.iter().zip(solutions) {
        match sol {
            Ok(f) => {
                let distance = prev.as_ref().and_then(|p| p.sup_distance(&f).ok());
                rows.push(MollificationRow { eps: *e, distance, error: None });
                prev = Some(f.clone());
                last = Some(f);
            }
            Err(err) => {
                rows.push(MollificationRow { eps: *e, distance: None, error: Some(err.to_string()) });
                prev = None;
            }
        }
    }
    let dists: Vec<f64> = rows.iter().skip(1).map(|r| r.distance.unwrap_or(f64::NAN)).collect();
    let any_failed = rows.iter().any(|r| r.error.is_some());
    let strictly_decreasing = !any_failed && dists.windows(2).all(|w| w[1] < w[0]);
    let ratios: Vec<f64> = dists.windows(2).map(|w| w[1] / w[0]).collect();
    let mean_ratio =
        if ratios.is_empty() { f64::NAN } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    // Distances already at rounding level count as converged.
    let negligible = !any_failed && dists.iter().all(|d| *d < 1e-13);
    let cauchy = negligible || (strictly_decreasing && mean_ratio < 0.9);
    MollificationTable { shape, rows, strictly_decreasing, mean_ratio, cauchy, last }
}

/// Solves the regularised SDE with `b^eps = b * rho^eps` along a decreasing
/// sequence of widths and tabulates consecutive sup distances of `x`.
pub fn mollification_study(
    b: &DriftSpec,
    eps: &[f64],
    shape: Mollifier,
    w: &Field2D,
    xi: &BoundaryData,
    sgrid: &SpatialGrid,
    opts: &PicardOptions,
) -> Result<MollificationTable> {
    check_eps(eps)?;
    let lt = occupation_density(w, sgrid)?;
    let mut o = *opts;
    o.skip_diagnostics = true;
    let solutions: Vec<Result<Field2D>> = eps
        .iter()
        .map(|&e| {
            let be = b.mollified(shape, e)?;
            let a = averaged_field_convolved(be, &lt, true)?;
            let r = picard_solve(&a, xi, w.grid(), &o)?;
            w.add(&r.theta)
        })
        .collect();
    Ok(cauchy_table(shape, eps, solutions))
}

/// Gaussian and triangular studies plus the distance between their limits.
#[derive(Debug, Clone, Serialize)]
pub struct ShapeComparison {
    pub gaussian: MollificationTable,
    pub triangular: MollificationTable,
    pub limit_distance: f64,
    /// Final Cauchy gap of the Gaussian study.
    pub final_gap: f64,
    /// `limit_distance <= 2 final_gap`.
    pub agree: bool,
}

pub(crate) fn compare(gaussian: MollificationTable, triangular: MollificationTable) -> Result<ShapeComparison> {
    let (a, b) = match (&gaussian.last, &triangular.last) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Numerical("a mollified solve failed; no limit to compare".into())),
    };
    let limit_distance = a.sup_distance(b)?;
    let final_gap = gaussian.final_gap().unwrap_or(f64::NAN);
    let agree = limit_distance <= 2.0 * final_gap || limit_distance < 1e-13;
    Ok(ShapeComparison { gaussian, triangular, limit_distance, final_gap, agree })
}

pub fn compare_mollifiers(
    b: &DriftSpec,
    eps: &[f64],
    w: &Field2D,
    xi: &BoundaryData,
    sgrid: &SpatialGrid,
    opts: &PicardOptions,
) -> Result<ShapeComparison> {
    let g = mollification_study(b, eps, Mollifier::Gaussian, w, xi, sgrid, opts)?;
    let t = mollification_study(b, eps, Mollifier::Triangular, w, xi, sgrid, opts)?;
    compare(g, t)
}
