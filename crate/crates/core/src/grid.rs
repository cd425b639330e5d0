//! Dyadic time grids on rectangles and the sampled paths/fields living on them.
//!
//! A [`Grid2D`] discretises `[0,T1]x[0,T2]` with `2^n1 x 2^n2` cells. Node
//! `(i,j)` sits at `(i*T1/2^n1, j*T2/2^n2)` and values are stored row-major
//! with the first time index outermost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dyadic level per axis.
pub const MAX_LEVEL: u32 = 16;

/// Relative tolerance used when snapping a coordinate to a grid node.
const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    t1: f64,
    t2: f64,
    n1: u32,
    n2: u32,
}

impl Grid2D {
    pub fn new(t1: f64, t2: f64, n1: u32, n2: u32) -> Result<Self> {
        if !(t1 > 0.0 && t1.is_finite() && t2 > 0.0 && t2.is_finite()) {
            return Err(Error::domain(format!("horizons must be positive and finite, got ({t1}, {t2})")));
        }
        if n1 < 1 || n2 < 1 || n1 > MAX_LEVEL || n2 > MAX_LEVEL {
            return Err(Error::domain(format!(
                "dyadic levels must lie in 1..={MAX_LEVEL}, got ({n1}, {n2})"
            )));
        }
        Ok(Self { t1, t2, n1, n2 })
    }

    /// Unit square at level `n` on both axes.
    pub fn unit(n: u32) -> Self {
        Self::new(1.0, 1.0, n, n).expect("valid unit grid")
    }

    pub fn horizons(&self) -> [f64; 2] {
        [self.t1, self.t2]
    }

    pub fn levels(&self) -> [u32; 2] {
        [self.n1, self.n2]
    }

    pub fn cells(&self) -> [usize; 2] {
        [1usize << self.n1, 1usize << self.n2]
    }

    pub fn nodes(&self) -> [usize; 2] {
        [(1usize << self.n1) + 1, (1usize << self.n2) + 1]
    }

    pub fn node_count(&self) -> usize {
        let [a, b] = self.nodes();
        a * b
    }

    pub fn steps(&self) -> [f64; 2] {
        [
            self.t1 / (1u64 << self.n1) as f64,
            self.t2 / (1u64 << self.n2) as f64,
        ]
    }

    pub fn cell_area(&self) -> f64 {
        let [h1, h2] = self.steps();
        h1 * h2
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nodes()[1] + j
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let [h1, h2] = self.steps();
        [i as f64 * h1, j as f64 * h2]
    }

    /// Node indices of a point, if it coincides with a node up to roundoff.
    pub fn locate(&self, t: [f64; 2]) -> Option<(usize, usize)> {
        let i = snap_index(t[0], self.t1, 1usize << self.n1)?;
        let j = snap_index(t[1], self.t2, 1usize << self.n2)?;
        Some((i, j))
    }

    /// Same rectangle with every axis refined or coarsened to the given levels.
    pub fn with_levels(&self, n1: u32, n2: u32) -> Result<Self> {
        Self::new(self.t1, self.t2, n1, n2)
    }
}

/// Index `k` with `k * horizon / cells == x` up to relative roundoff.
pub(crate) fn snap_index(x: f64, horizon: f64, cells: usize) -> Option<usize> {
    let pos = x / horizon * cells as f64;
    let k = pos.round();
    if k < 0.0 || k > cells as f64 || (pos - k).abs() > SNAP_TOL * cells as f64 {
        return None;
    }
    Some(k as usize)
}

/// A path on `[0,T]` sampled at the `2^n + 1` nodes of a dyadic partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Path1D {
    horizon: f64,
    level: u32,
    dim: usize,
    values: Vec<f64>,
}

impl Path1D {
    pub fn new(horizon: f64, level: u32, dim: usize, values: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if level > MAX_LEVEL {
            return Err(Error::domain(format!("level {level} exceeds {MAX_LEVEL}")));
        }
        if dim == 0 {
            return Err(Error::domain("path dimension must be positive"));
        }
        let expected = ((1usize << level) + 1) * dim;
        if values.len() != expected {
            return Err(Error::domain(format!(
                "path at level {level} with d={dim} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite path value at flat index {bad}")));
        }
        Ok(Self { horizon, level, dim, values })
    }

    pub fn from_fn(horizon: f64, level: u32, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Result<Self> {
        let n = (1usize << level) + 1;
        let h = horizon / (n - 1) as f64;
        let mut values = vec![0.0; n * dim];
        for (i, chunk) in values.chunks_mut(dim).enumerate() {
            f(i as f64 * h, chunk);
        }
        Self::new(horizon, level, dim, values)
    }

    pub fn zeros(horizon: f64, level: u32, dim: usize) -> Result<Self> {
        Self::new(horizon, level, dim, vec![0.0; ((1usize << level) + 1) * dim])
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        (1usize << self.level) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / (1u64 << self.level) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Piecewise-linear evaluation; exact at nodes.
    pub fn eval(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(0.0..=self.horizon * (1.0 + SNAP_TOL)).contains(&t) {
            return Err(Error::domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        let cells = 1usize << self.level;
        if let Some(k) = snap_index(t, self.horizon, cells) {
            out.copy_from_slice(self.get(k));
            return Ok(());
        }
        let pos = t / self.horizon * cells as f64;
        let k = (pos.floor() as usize).min(cells - 1);
        let w = pos - k as f64;
        let (a, b) = (self.get(k), self.get(k + 1));
        for c in 0..self.dim {
            out[c] = a[c] + w * (b[c] - a[c]);
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn negated(&self) -> Self {
        self.map(|v| -v)
    }
}

/// A field on a [`Grid2D`] with values in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    grid: Grid2D,
    dim: usize,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(grid: Grid2D, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("field dimension must be positive"));
        }
        if values.len() != grid.node_count() * dim {
            return Err(Error::domain(format!(
                "field needs {} values, got {}",
                grid.node_count() * dim,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite field value at flat index {bad}")));
        }
        Ok(Self { grid, dim, values })
    }

    pub(crate) fn from_raw(grid: Grid2D, dim: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count() * dim);
        Self { grid, dim, values }
    }

    pub fn zeros(grid: Grid2D, dim: usize) -> Self {
        Self::from_raw(grid, dim, vec![0.0; grid.node_count() * dim])
    }

    pub fn from_fn(grid: Grid2D, dim: usize, mut f: impl FnMut([f64; 2], &mut [f64])) -> Result<Self> {
        let [m1, m2] = grid.nodes();
        let mut values = vec![0.0; m1 * m2 * dim];
        for i in 0..m1 {
            for j in 0..m2 {
                let k = grid.index(i, j) * dim;
                f(grid.node(i, j), &mut values[k..k + dim]);
            }
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let k = self.grid.index(i, j) * self.dim;
        &self.values[k..k + self.dim]
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = self.grid.index(i, j) * self.dim;
        &mut self.values[k..k + self.dim]
    }

    /// Rectangular increment between node indices `s <= t` (componentwise).
    pub fn rect_increment_nodes(&self, s: (usize, usize), t: (usize, usize)) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.rect_increment_into(s, t, &mut out);
        out
    }

    #[inline]
    pub(crate) fn rect_increment_into(&self, s: (usize, usize), t: (usize, usize), out: &mut [f64]) {
        let a = self.get(t.0, t.1);
        let b = self.get(t.0, s.1);
        let c = self.get(s.0, t.1);
        let d = self.get(s.0, s.1);
        for k in 0..self.dim {
            out[k] = (a[k] - b[k]) - (c[k] - d[k]);
        }
    }

    /// Rectangular increment over `[s,t]` given in time coordinates.
    ///
    /// Both corners must coincide with grid nodes; sampled fields carry no
    /// interpolation rule here.
    pub fn rect_increment(&self, s: [f64; 2], t: [f64; 2]) -> Result<Vec<f64>> {
        let si = self
            .grid
            .locate(s)
            .ok_or_else(|| Error::domain(format!("point {s:?} is not a grid node")))?;
        let ti = self
            .grid
            .locate(t)
            .ok_or_else(|| Error::domain(format!("point {t:?} is not a grid node")))?;
        if si.0 > ti.0 || si.1 > ti.1 {
            return Err(Error::domain(format!("rectangle corners out of order: {s:?} !<= {t:?}")));
        }
        Ok(self.rect_increment_nodes(si, ti))
    }

    /// Splits `f = z + y` with `z(t) = f(t1,0) + f(0,t2) - f(0,0)` and
    /// `y(t) = rect_increment over [0,t]`.
    pub fn boundary_decompose(&self) -> (Field2D, Field2D) {
        let [m1, m2] = self.grid.nodes();
        let d = self.dim;
        let mut z = Field2D::zeros(self.grid, d);
        let mut y = Field2D::zeros(self.grid, d);
        for i in 0..m1 {
            for j in 0..m2 {
                let f = self.get(i, j);
                let a = self.get(i, 0);
                let b = self.get(0, j);
                let c = self.get(0, 0);
                let zk = z.get_mut(i, j);
                for k in 0..d {
                    zk[k] = if i == 0 || j == 0 { f[k] } else { a[k] + b[k] - c[k] };
                }
                let yk = y.get_mut(i, j);
                for k in 0..d {
                    yk[k] = (f[k] - b[k]) - (a[k] - c[k]);
                }
            }
        }
        (z, y)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &Field2D) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn check_compatible(&self, other: &Field2D) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        if self.grid != other.grid {
            return Err(Error::domain("fields live on different grids"));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Result<Field2D> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Field2D::from_raw(self.grid, self.dim, values))
    }

    pub fn add(&self, other: &Field2D) -> Result<Field2D> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field2D) -> Result<Field2D> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field2D {
        Field2D::from_raw(self.grid, self.dim, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn negated(&self) -> Field2D {
        self.map(|v| -v)
    }

    /// Restriction to the nodes of a coarser dyadic grid on the same rectangle.
    pub fn restrict(&self, n1: u32, n2: u32) -> Result<Field2D> {
        let [l1, l2] = self.grid.levels();
        if n1 > l1 || n2 > l2 {
            return Err(Error::domain(format!(
                "cannot restrict level ({l1},{l2}) field to finer level ({n1},{n2})"
            )));
        }
        let coarse = self.grid.with_levels(n1, n2)?;
        let (s1, s2) = (1usize << (l1 - n1), 1usize << (l2 - n2));
        let [m1, m2] = coarse.nodes();
        let mut values = Vec::with_capacity(m1 * m2 * self.dim);
        for i in 0..m1 {
            for j in 0..m2 {
                values.extend_from_slice(self.get(i * s1, j * s2));
            }
        }
        Ok(Field2D::from_raw(coarse, self.dim, values))
    }

    /// Component `c` as a scalar field.
    pub fn component(&self, c: usize) -> Result<Field2D> {
        if c >= self.dim {
            return Err(Error::domain(format!("component {c} out of range for d={}", self.dim)));
        }
        let values = self.values.chunks(self.dim).map(|v| v[c]).collect();
        Ok(Field2D::from_raw(self.grid, 1, values))
    }
}

/// Rectangular increment of an evaluable field over `[s,t]`.
pub fn rect_increment_fn(dim: usize, s: [f64; 2], t: [f64; 2], f: impl Fn([f64; 2], &mut [f64])) -> Vec<f64> {
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut c = vec![0.0; dim];
    let mut d = vec![0.0; dim];
    f([t[0], t[1]], &mut a);
    f([t[0], s[1]], &mut b);
    f([s[0], t[1]], &mut c);
    f([s[0], s[1]], &mut d);
    (0..dim).map(|k| (a[k] - b[k]) - (c[k] - d[k])).collect()
}

/// `m(t-s)^alpha = |t1-s1|^a1 |t2-s2|^a2`.
pub fn mixed_distance(s: [f64; 2], t: [f64; 2], alpha: [f64; 2]) -> f64 {
    (t[0] - s[0]).abs().powf(alpha[0]) * (t[1] - s[1]).abs().powf(alpha[1])
}

/// `|t-s|^alpha = |t1-s1|^a1 + |t2-s2|^a2`.
pub fn additive_distance(s: [f64; 2], t: [f64; 2], alpha: [f64; 2]) -> f64 {
    (t[0] - s[0]).abs().powf(alpha[0]) + (t[1] - s[1]).abs().powf(alpha[1])
}
