//! Wave equation with boundary data on the characteristics `y = x` and
//! `y = -x`, solved through its Goursat form.
//!
//! With `t1 = (y+x)/sqrt2`, `t2 = (y-x)/sqrt2`, the function
//! `phi(t) = u(x, y)` has `phi(t1, 0) = bbar1(t1)` and `phi(0, t2) = bbar2(t2)`
//! where `bbar_i(r) = beta_i(r / sqrt2)`. Writing
//! `phi = psi + bbar1(t1) + bbar2(t2) - beta(0)`, the correction solves
//! `psi_t = c int_0^t (h * L)(ds, psi_s)` with `L = L^{-bbar1} * L^{-(bbar2 - beta(0))}`
//! and coupling constant `c`.

use serde::Serialize;
use std::f64::consts::SQRT_2;

use crate::drift::{Drift, DriftSpec, Mollifier};
use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, Path1D};
use crate::noise::rescaled_boundary;
use crate::occupation::{convolve_local_times, occupation_density_path, ConvolvedField};
use crate::sewing::ScaledField;
use crate::solver::{cauchy_table, check_eps, compare, picard_solve, BoundaryData, MollificationTable, PicardOptions, ShapeComparison, SolveReport};
use crate::spatial::SpatialGrid;

/// Coupling of the integrated Goursat equation used by default.
pub const DEFAULT_COUPLING: f64 = -2.0;

/// `(x, y) -> (t1, t2) = ((y+x)/sqrt2, (y-x)/sqrt2)`.
#[inline]
pub fn rotate_to_goursat(x: f64, y: f64) -> (f64, f64) {
    ((y + x) / SQRT_2, (y - x) / SQRT_2)
}

/// `(t1, t2) -> (x, y) = ((t1-t2)/sqrt2, (t1+t2)/sqrt2)`.
#[inline]
pub fn rotate_from_goursat(t1: f64, t2: f64) -> (f64, f64) {
    ((t1 - t2) / SQRT_2, (t1 + t2) / SQRT_2)
}

/// Nonlinearity and characteristic boundary data.
#[derive(Debug, Clone)]
pub struct WaveProblem {
    pub h: DriftSpec,
    pub beta1: Path1D,
    pub beta2: Path1D,
    /// `c` in `psi_t = c int (h * L)(ds, psi_s)`.
    pub coupling: f64,
}

impl WaveProblem {
    pub fn new(h: DriftSpec, beta1: Path1D, beta2: Path1D) -> Result<Self> {
        let p = Self { h, beta1, beta2, coupling: DEFAULT_COUPLING };
        p.validate()?;
        Ok(p)
    }

    pub fn with_coupling(mut self, c: f64) -> Self {
        self.coupling = c;
        self
    }

    fn validate(&self) -> Result<()> {
        let (b1, b2) = (&self.beta1, &self.beta2);
        if b1.dim() != 1 || b2.dim() != 1 || self.h.dim() != 1 {
            return Err(Error::domain("the wave problem is scalar: h and both boundary paths need d = 1"));
        }
        if b1.get(0) != b2.get(0) {
            return Err(Error::domain(format!(
                "corner inconsistency: beta1(0) = {} but beta2(0) = {}",
                b1.get(0)[0],
                b2.get(0)[0]
            )));
        }
        if b1.horizon() != b2.horizon() || b1.level() != b2.level() {
            return Err(Error::domain("boundary paths must share horizon and level"));
        }
        if !self.coupling.is_finite() {
            return Err(Error::domain("coupling must be finite"));
        }
        Ok(())
    }

    /// Side `T` of the Goursat square, `sqrt2` times the boundary horizon.
    pub fn horizon(&self) -> f64 {
        SQRT_2 * self.beta1.horizon()
    }

    pub fn level(&self) -> u32 {
        self.beta1.level()
    }

    /// `bbar1` and `bbar2`.
    pub fn rescaled(&self) -> Result<(Path1D, Path1D)> {
        Ok((rescaled_boundary(&self.beta1, SQRT_2)?, rescaled_boundary(&self.beta2, SQRT_2)?))
    }

    pub fn h(&self) -> &DriftSpec {
        &self.h
    }

    fn with_h(&self, h: DriftSpec) -> Self {
        Self { h, ..self.clone() }
    }
}

/// `psi`, `phi` and the solve diagnostics.
#[derive(Debug, Clone)]
pub struct WaveSolution {
    pub psi: Field2D,
    /// `u` in the Goursat frame.
    pub phi: Field2D,
    pub coupling: f64,
    /// Largest deviation of `u` from `beta_i` on the characteristic lattice points.
    pub boundary_error: f64,
    pub report: SolveReport,
}

impl WaveSolution {
    /// `(x, y, u)` on the rotated image of the Goursat grid.
    pub fn lattice(&self) -> Vec<(f64, f64, f64)> {
        let g = self.phi.grid();
        let [m1, m2] = g.nodes();
        let mut out = Vec::with_capacity(m1 * m2);
        for i in 0..m1 {
            for j in 0..m2 {
                let [t1, t2] = g.node(i, j);
                let (x, y) = rotate_from_goursat(t1, t2);
                out.push((x, y, self.phi.get(i, j)[0]));
            }
        }
        out
    }

    /// `u(x, y)`: exact at lattice points, bilinear in `(t1, t2)` elsewhere.
    pub fn u_at(&self, x: f64, y: f64) -> Result<f64> {
        let (t1, t2) = rotate_to_goursat(x, y);
        let g = self.phi.grid();
        if let Some((i, j)) = g.locate([t1, t2]) {
            return Ok(self.phi.get(i, j)[0]);
        }
        let [h1, h2] = g.steps();
        let [c1, c2] = g.cells();
        let (p, q) = (t1 / h1, t2 / h2);
        let tol = 1e-9;
        if p < -tol || q < -tol || p > c1 as f64 + tol || q > c2 as f64 + tol {
            return Err(Error::domain(format!("({x}, {y}) lies outside the rotated square")));
        }
        let i = (p.floor().max(0.0) as usize).min(c1 - 1);
        let j = (q.floor().max(0.0) as usize).min(c2 - 1);
        let (a, b) = ((p - i as f64).clamp(0.0, 1.0), (q - j as f64).clamp(0.0, 1.0));
        let f = |i, j| self.phi.get(i, j)[0];
        Ok((1.0 - a) * (1.0 - b) * f(i, j) + a * (1.0 - b) * f(i + 1, j) + (1.0 - a) * b * f(i, j + 1) + a * b * f(i + 1, j + 1))
    }

    /// CSV with columns `x,y,u`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "x,y,u")?;
        for (x, y, u) in self.lattice() {
            writeln!(out, "{x:.16e},{y:.16e},{u:.16e}")?;
        }
        Ok(())
    }
}

/// Local time `L^{-w}` of `w = bbar1(t1) + bbar2(t2) - beta(0)` on `sgrid`.
fn boundary_local_time(p: &WaveProblem, sgrid: &SpatialGrid) -> Result<crate::occupation::LocalTime> {
    let (b1, b2) = p.rescaled()?;
    let corner = p.beta1.get(0)[0];
    let shifted = Path1D::new(b2.horizon(), b2.level(), 1, b2.values().iter().map(|v| v - corner).collect())?;
    let l1 = occupation_density_path(&b1, sgrid)?;
    let l2 = occupation_density_path(&shifted, sgrid)?;
    Ok(convolve_local_times(&l1, &l2)?.reflect())
}

fn solve_with_lt(
    p: &WaveProblem,
    lt: &crate::occupation::LocalTime,
    opts: &PicardOptions,
) -> Result<WaveSolution> {
    let a = ScaledField { inner: ConvolvedField::new(p.h.clone(), lt.clone())?, factor: p.coupling };
    let grid = lt.time_grid().expect("convolved local time is two-parameter");
    let report = picard_solve(&a, &BoundaryData::zero(1, &grid)?, &grid, opts)?;
    let (b1, b2) = p.rescaled()?;
    let w = BoundaryData::new(b1, b2)?.field(&grid)?;
    let psi = report.theta.clone();
    let phi = psi.add(&w)?;
    let boundary_error = boundary_error(&phi, &p.beta1, &p.beta2);
    Ok(WaveSolution { psi, phi, coupling: p.coupling, boundary_error, report })
}

/// `max |u - beta_i|` over the lattice points on `y = x` and `y = -x`.
fn boundary_error(phi: &Field2D, beta1: &Path1D, beta2: &Path1D) -> f64 {
    let [m1, m2] = phi.grid().nodes();
    let mut e: f64 = 0.0;
    for i in 0..m1 {
        e = e.max((phi.get(i, 0)[0] - beta1.get(i)[0]).abs());
    }
    for j in 0..m2 {
        e = e.max((phi.get(0, j)[0] - beta2.get(j)[0]).abs());
    }
    e
}

/// Solves the wave problem on the Goursat grid at the boundary paths' level.
pub fn solve_wave(p: &WaveProblem, sgrid: &SpatialGrid, opts: &PicardOptions) -> Result<WaveSolution> {
    p.validate()?;
    let lt = boundary_local_time(p, sgrid)?;
    solve_with_lt(p, &lt, opts)
}

/// Residual of `d^2 phi / dt1 dt2 = c h(phi)` over the grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub level: u32,
    pub max_residual: f64,
    pub l2_residual: f64,
}

/// Compares `box_cell phi / |cell|` with `c h(phi)` at cell centres, where
/// `phi` at a centre is the mean of the four corners.
pub fn wave_residual(sol: &WaveSolution, h: &DriftSpec) -> Result<ResidualReport> {
    if !h.is_smooth() {
        return Err(Error::domain("the residual is undefined for a non-smooth nonlinearity"));
    }
    let g = sol.phi.grid();
    let [c1, c2] = g.cells();
    let area = g.cell_area();
    let mut max: f64 = 0.0;
    let mut sq = 0.0;
    let mut hv = [0.0];
    for i in 0..c1 {
        for j in 0..c2 {
            let f = |a, b| sol.phi.get(a, b)[0];
            let mixed = ((f(i + 1, j + 1) - f(i + 1, j)) - (f(i, j + 1) - f(i, j))) / area;
            let centre = 0.25 * (f(i, j) + f(i + 1, j) + f(i, j + 1) + f(i + 1, j + 1));
            Drift::eval(h, &[centre], &mut hv);
            let r = (mixed - sol.coupling * hv[0]).abs();
            max = max.max(r);
            sq += r * r * area;
        }
    }
    Ok(ResidualReport { level: g.levels()[0], max_residual: max, l2_residual: sq.sqrt() })
}

/// `log2` of consecutive max-residual ratios, averaged.
pub fn residual_order(reports: &[ResidualReport]) -> f64 {
    let orders: Vec<f64> = reports
        .windows(2)
        .map(|w| (w[0].max_residual / w[1].max_residual).log2() / (w[1].level as f64 - w[0].level as f64))
        .collect();
    orders.iter().sum::<f64>() / orders.len() as f64
}

/// CSV with columns `level,max_residual,l2_residual`.
pub fn write_residual_csv(reports: &[ResidualReport], out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "level,max_residual,l2_residual")?;
    for r in reports {
        writeln!(out, "{},{:.16e},{:.16e}", r.level, r.max_residual, r.l2_residual)?;
    }
    Ok(())
}

/// Wave solutions for `h^eps = h * rho^eps` along decreasing widths, with
/// sup distances of `u` on the rotated lattice.
pub fn wave_mollification_study(
    p: &WaveProblem,
    eps: &[f64],
    shape: Mollifier,
    sgrid: &SpatialGrid,
    opts: &PicardOptions,
) -> Result<MollificationTable> {
    check_eps(eps)?;
    p.validate()?;
    let lt = boundary_local_time(p, sgrid)?;
    let mut o = *opts;
    o.skip_diagnostics = true;
    let solutions = eps
        .iter()
        .map(|&e| {
            let he = p.h.mollified(shape, e)?;
            Ok(solve_with_lt(&p.with_h(he), &lt, &o)?.phi)
        })
        .collect();
    Ok(cauchy_table(shape, eps, solutions))
}

pub fn compare_wave_mollifiers(
    p: &WaveProblem,
    eps: &[f64],
    sgrid: &SpatialGrid,
    opts: &PicardOptions,
) -> Result<ShapeComparison> {
    let g = wave_mollification_study(p, eps, Mollifier::Gaussian, sgrid, opts)?;
    let t = wave_mollification_study(p, eps, Mollifier::Triangular, sgrid, opts)?;
    compare(g, t)
}

/// Goursat grid of a wave problem.
pub fn goursat_grid(p: &WaveProblem) -> Result<Grid2D> {
    let t = p.horizon();
    Grid2D::new(t, t, p.level(), p.level())
}
