//! Occupation measures, local times and averaged fields.
//!
//! Local times are histogram estimators on a [`SpatialGrid`]. Over a time
//! cell the path is known only at the cell corners, so every cell deposits a
//! quarter of its area in the bin of each corner value (a quarter of its
//! length per endpoint for one-parameter paths). This is the trapezoid rule in
//! time: the mass identity `sum_x L_t(x) h^d = t1 t2` is exact, `L_0 = 0` and
//! `L` is nondecreasing in `t`.
//!
//! A [`LocalTime`] is stored lazily as the bin index of every time node, so
//! that increments over small rectangles cost only the nodes they contain.
//! Dense densities at every node of a coarser lattice come from block
//! histograms and prefix sums.

use rayon::prelude::*;

use crate::drift::Drift;
use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, Path1D};
use crate::noise::{FbmSampler, SheetSampler};
use crate::sewing::TimeIndexedField;
use crate::spatial::{bessel_norm, convolve_full, fft_nd, SpatialGrid};

/// Upper bound on the number of stored lattice density values.
const LATTICE_LIMIT: usize = 1 << 27;

/// Masses (density times `h^d`) on a sparse set of bins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseDensity {
    entries: Vec<(usize, f64)>,
}

impl SparseDensity {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Dense density values `mass / h^d` on every bin of `sgrid`.
    pub fn to_density(&self, sgrid: &SpatialGrid) -> Vec<f64> {
        let mut out = vec![0.0; sgrid.total_bins()];
        let vol = sgrid.cell_volume();
        for &(b, m) in &self.entries {
            out[b] += m / vol;
        }
        out
    }
}

/// Time parametrisation of a local time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeAxes {
    One { horizon: f64, level: u32 },
    Two(Grid2D),
}

#[derive(Debug, Clone)]
enum Source {
    Path { horizon: f64, level: u32, bins: Vec<u32> },
    Field { grid: Grid2D, bins: Vec<u32> },
    /// `L_t = first_{t1} * second_{t2}` on the doubled spatial grid.
    Convolved { first: Box<LocalTime>, second: Box<LocalTime> },
}

/// Local time `L_t(x)` of a path or field, possibly reflected (`L^{-w}`).
#[derive(Debug, Clone)]
pub struct LocalTime {
    source: Source,
    sgrid: SpatialGrid,
    reflected: bool,
}

fn bin_all(values: &[f64], dim: usize, sgrid: &SpatialGrid) -> Result<Vec<u32>> {
    if sgrid.dim() != dim {
        return Err(Error::DimensionMismatch { expected: sgrid.dim(), got: dim });
    }
    let mut bins = Vec::with_capacity(values.len() / dim);
    let mut failed = false;
    for x in values.chunks(dim) {
        match sgrid.bin_of(x) {
            Some(b) => bins.push(b as u32),
            None => {
                failed = true;
                break;
            }
        }
    }
    if failed {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let a = sgrid.half_widths().iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::Range { observed_min: lo, observed_max: hi, box_min: -a, box_max: a });
    }
    Ok(bins)
}

/// Local time of a one-parameter path.
pub fn occupation_density_path(beta: &Path1D, sgrid: &SpatialGrid) -> Result<LocalTime> {
    let bins = bin_all(beta.values(), beta.dim(), sgrid)?;
    Ok(LocalTime {
        source: Source::Path { horizon: beta.horizon(), level: beta.level(), bins },
        sgrid: sgrid.clone(),
        reflected: false,
    })
}

/// Local time of a two-parameter field.
pub fn occupation_density(w: &Field2D, sgrid: &SpatialGrid) -> Result<LocalTime> {
    let bins = bin_all(w.values(), w.dim(), sgrid)?;
    Ok(LocalTime { source: Source::Field { grid: *w.grid(), bins }, sgrid: sgrid.clone(), reflected: false })
}

/// `L_t = L1_{t1} * L2_{t2}`, the local time of `beta1(t1) + beta2(t2)`.
///
/// Both inputs are piecewise-constant densities on the same grid; their exact
/// convolution is piecewise linear and is sampled at the bin centres of the
/// doubled grid. Pair `(j, k)` of masses `m1, m2` thus puts `2^-d m1 m2` into
/// each of the bins `j + k + e`, `e in {0,1}^d`, and the mass identity holds
/// exactly.
pub fn convolve_local_times(l1: &LocalTime, l2: &LocalTime) -> Result<LocalTime> {
    for l in [l1, l2] {
        if !matches!(l.source, Source::Path { .. }) {
            return Err(Error::domain("convolve_local_times expects one-parameter local times"));
        }
    }
    l1.sgrid.check_same(&l2.sgrid)?;
    Ok(LocalTime {
        sgrid: l1.sgrid.doubled(),
        source: Source::Convolved { first: Box::new(l1.clone()), second: Box::new(l2.clone()) },
        reflected: false,
    })
}

#[inline]
fn trapezoid(k: usize, lo: usize, hi: usize, h: f64) -> f64 {
    if k == lo || k == hi {
        0.5 * h
    } else {
        h
    }
}

impl LocalTime {
    pub fn sgrid(&self) -> &SpatialGrid {
        &self.sgrid
    }

    pub fn is_reflected(&self) -> bool {
        self.reflected
    }

    /// `L^{-w}` from `L^w`: index reversal of the symmetric spatial grid.
    pub fn reflect(&self) -> LocalTime {
        LocalTime { reflected: !self.reflected, ..self.clone() }
    }

    pub fn time_axes(&self) -> TimeAxes {
        match &self.source {
            Source::Path { horizon, level, .. } => TimeAxes::One { horizon: *horizon, level: *level },
            Source::Field { grid, .. } => TimeAxes::Two(*grid),
            Source::Convolved { first, second } => {
                let (TimeAxes::One { horizon: t1, level: n1 }, TimeAxes::One { horizon: t2, level: n2 }) =
                    (first.time_axes(), second.time_axes())
                else {
                    unreachable!("components are one-parameter")
                };
                TimeAxes::Two(Grid2D::new(t1, t2, n1, n2).expect("component levels are valid"))
            }
        }
    }

    /// Time grid of a two-parameter local time.
    pub fn time_grid(&self) -> Option<Grid2D> {
        match self.time_axes() {
            TimeAxes::Two(g) => Some(g),
            TimeAxes::One { .. } => None,
        }
    }

    #[inline]
    fn emit(&self, bin: usize) -> usize {
        if self.reflected {
            self.sgrid.reflect_index(bin)
        } else {
            bin
        }
    }

    /// Calls `f(bin, mass)` for every deposit of the one-parameter increment
    /// `L_t - L_s` over nodes `s <= t`. Bins may repeat.
    pub(crate) fn for_each_1d(&self, s: usize, t: usize, mut f: impl FnMut(usize, f64)) {
        let Source::Path { horizon, level, bins } = &self.source else {
            panic!("one-parameter increment on a two-parameter local time");
        };
        if s >= t {
            return;
        }
        let h = horizon / (1u64 << level) as f64;
        for k in s..=t {
            f(self.emit(bins[k] as usize), trapezoid(k, s, t, h));
        }
    }

    /// Calls `f(bin, mass)` for every deposit of the rectangular increment
    /// over node indices `s <= t`. Bins may repeat.
    pub(crate) fn for_each_2d(&self, s: (usize, usize), t: (usize, usize), mut f: impl FnMut(usize, f64)) {
        if s.0 >= t.0 || s.1 >= t.1 {
            return;
        }
        match &self.source {
            Source::Path { .. } => panic!("rectangular increment on a one-parameter local time"),
            Source::Field { grid, bins } => {
                let [h1, h2] = grid.steps();
                let m2 = grid.nodes()[1];
                for i in s.0..=t.0 {
                    let wi = trapezoid(i, s.0, t.0, h1);
                    let row = &bins[i * m2..(i + 1) * m2];
                    for j in s.1..=t.1 {
                        f(self.emit(row[j] as usize), wi * trapezoid(j, s.1, t.1, h2));
                    }
                }
            }
            Source::Convolved { first, second } => {
                let a = first.increment_1d(s.0, t.0);
                let b = second.increment_1d(s.1, t.1);
                self.pair_deposits(&a, &b, &mut f);
            }
        }
    }

    fn pair_deposits(&self, a: &SparseDensity, b: &SparseDensity, f: &mut impl FnMut(usize, f64)) {
        let d = self.sgrid.dim();
        let k = self.sgrid.bins() / 2;
        let share = 0.5f64.powi(d as i32);
        if d == 1 {
            for &(j, ma) in &a.entries {
                for &(l, mb) in &b.entries {
                    let m = share * ma * mb;
                    f(self.emit(j + l), m);
                    f(self.emit(j + l + 1), m);
                }
            }
            return;
        }
        let mut ja = vec![0usize; d];
        let mut jb = vec![0usize; d];
        let small = SpatialGrid::with_half_widths(
            self.sgrid.half_widths().iter().map(|x| x / 2.0).collect(),
            k,
        )
        .expect("component grid is valid");
        for &(j, ma) in &a.entries {
            small.multi_index(j, &mut ja);
            for &(l, mb) in &b.entries {
                small.multi_index(l, &mut jb);
                let m = share * ma * mb;
                for corner in 0..(1usize << d) {
                    let mut flat = 0usize;
                    for ax in 0..d {
                        flat = flat * 2 * k + ja[ax] + jb[ax] + ((corner >> ax) & 1);
                    }
                    f(self.emit(flat), m);
                }
            }
        }
    }

    fn merge(&self, expected: usize, fill: impl FnOnce(&mut dyn FnMut(usize, f64))) -> SparseDensity {
        if expected > self.sgrid.total_bins() / 4 {
            let mut dense = vec![0.0; self.sgrid.total_bins()];
            fill(&mut |b, m| dense[b] += m);
            SparseDensity { entries: dense.into_iter().enumerate().filter(|e| e.1 != 0.0).collect() }
        } else {
            let mut raw: Vec<(usize, f64)> = Vec::with_capacity(expected);
            fill(&mut |b, m| raw.push((b, m)));
            raw.sort_by_key(|e| e.0);
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
            for (b, m) in raw {
                match entries.last_mut() {
                    Some(last) if last.0 == b => last.1 += m,
                    _ => entries.push((b, m)),
                }
            }
            SparseDensity { entries }
        }
    }

    /// `L_t - L_s` for a one-parameter local time (node indices).
    pub fn increment_1d(&self, s: usize, t: usize) -> SparseDensity {
        self.merge(t.saturating_sub(s) + 1, |f| self.for_each_1d(s, t, f))
    }

    /// Rectangular increment over node indices `s <= t`.
    pub fn increment(&self, s: (usize, usize), t: (usize, usize)) -> Result<SparseDensity> {
        let grid = self
            .time_grid()
            .ok_or_else(|| Error::domain("rectangular increment of a one-parameter local time"))?;
        let [m1, m2] = grid.nodes();
        if s.0 > t.0 || s.1 > t.1 || t.0 >= m1 || t.1 >= m2 {
            return Err(Error::domain(format!("invalid node rectangle {s:?} -> {t:?}")));
        }
        if let Source::Convolved { first, second } = &self.source {
            let a = first.increment_1d(s.0, t.0);
            let b = second.increment_1d(s.1, t.1);
            let pairs = a.entries.len() * b.entries.len();
            if pairs > 16 * self.sgrid.total_bins() {
                return Ok(self.fft_pair(&a, &b, &first.sgrid));
            }
            let expected = pairs << self.sgrid.dim();
            return Ok(self.merge(expected, |f| self.pair_deposits(&a, &b, &mut |x, m| f(x, m))));
        }
        let expected = (t.0 - s.0 + 1) * (t.1 - s.1 + 1);
        Ok(self.merge(expected, |f| self.for_each_2d(s, t, f)))
    }

    /// Convolution of two dense component masses through the FFT.
    fn fft_pair(&self, a: &SparseDensity, b: &SparseDensity, small: &SpatialGrid) -> SparseDensity {
        let n = small.total_bins();
        let mut da = vec![0.0; n];
        let mut db = vec![0.0; n];
        a.entries.iter().for_each(|&(j, m)| da[j] += m);
        b.entries.iter().for_each(|&(j, m)| db[j] += m);
        let conv = convolve_full(&da, &db, &small.shape());
        SparseDensity { entries: self.spread_corners(&conv) }
    }

    /// `Q_m = 2^-d sum_e conv_{m-e}` on the doubled grid, reflected if needed.
    fn spread_corners(&self, conv: &[f64]) -> Vec<(usize, f64)> {
        let d = self.sgrid.dim();
        let big = self.sgrid.bins();
        let share = 0.5f64.powi(d as i32);
        let mut idx = vec![0usize; d];
        let mut out = vec![0.0; conv.len()];
        for (m, slot) in out.iter_mut().enumerate() {
            self.sgrid.multi_index(m, &mut idx);
            let mut acc = 0.0;
            'corner: for corner in 0..(1usize << d) {
                let mut flat = 0usize;
                for ax in 0..d {
                    let e = (corner >> ax) & 1;
                    if idx[ax] < e {
                        continue 'corner;
                    }
                    flat = flat * big + idx[ax] - e;
                }
                acc += conv[flat];
            }
            *slot = share * acc;
        }
        out.into_iter()
            .enumerate()
            .filter(|e| e.1 != 0.0)
            .map(|(m, v)| (self.emit(m), v))
            .collect()
    }

    /// Dense density `L_t` at node `t` of a two-parameter local time.
    pub fn density(&self, t: (usize, usize)) -> Result<Vec<f64>> {
        Ok(self.increment((0, 0), t)?.to_density(&self.sgrid))
    }

    /// Dense density `L_t` at node `t` of a one-parameter local time.
    pub fn density_1d(&self, t: usize) -> Vec<f64> {
        self.increment_1d(0, t).to_density(&self.sgrid)
    }

    /// One-parameter densities at every node of the level-`level` partition.
    pub fn lattice_1d(&self, level: u32) -> Result<Vec<Vec<f64>>> {
        let Source::Path { level: fine, bins, horizon } = &self.source else {
            return Err(Error::domain("lattice_1d needs a one-parameter local time"));
        };
        if level > *fine {
            return Err(Error::domain(format!("lattice level {level} finer than the path level {fine}")));
        }
        let r = 1usize << (fine - level);
        let blocks = 1usize << level;
        let nb = self.sgrid.total_bins();
        let h = horizon / (1u64 << fine) as f64;
        let vol = self.sgrid.cell_volume();
        let mut out = vec![vec![0.0; nb]];
        let mut acc = vec![0.0; nb];
        for blk in 0..blocks {
            for k in blk * r..=(blk + 1) * r {
                acc[self.emit(bins[k] as usize)] += trapezoid(k, blk * r, (blk + 1) * r, h) / vol;
            }
            out.push(acc.clone());
        }
        Ok(out)
    }

    /// Two-parameter densities at every node of the coarser grid with the
    /// given levels, as a field with one value per spatial bin.
    pub fn lattice(&self, levels: [u32; 2]) -> Result<LatticeDensities> {
        let grid = self
            .time_grid()
            .ok_or_else(|| Error::domain("lattice needs a two-parameter local time"))?;
        let [f1, f2] = grid.levels();
        if levels[0] > f1 || levels[1] > f2 {
            return Err(Error::domain(format!("lattice levels {levels:?} finer than the time grid ({f1},{f2})")));
        }
        let coarse = grid.with_levels(levels[0], levels[1])?;
        let nb = self.sgrid.total_bins();
        if coarse.node_count().saturating_mul(nb) > LATTICE_LIMIT {
            return Err(Error::domain("requested lattice is too large; use a coarser level"));
        }
        let [c1, c2] = coarse.cells();
        let [m1, m2] = coarse.nodes();
        let values = match &self.source {
            Source::Field { grid, bins } => {
                let (r1, r2) = (1usize << (f1 - levels[0]), 1usize << (f2 - levels[1]));
                let [h1, h2] = grid.steps();
                let fm2 = grid.nodes()[1];
                let vol = self.sgrid.cell_volume();
                // Block histograms, one row of blocks per task.
                let block_rows: Vec<Vec<f64>> = (0..c1)
                    .into_par_iter()
                    .map(|bi| {
                        let mut row = vec![0.0; c2 * nb];
                        for i in bi * r1..=(bi + 1) * r1 {
                            let wi = trapezoid(i, bi * r1, (bi + 1) * r1, h1) / vol;
                            for bj in 0..c2 {
                                let dst = &mut row[bj * nb..(bj + 1) * nb];
                                for j in bj * r2..=(bj + 1) * r2 {
                                    let b = self.emit(bins[i * fm2 + j] as usize);
                                    dst[b] += wi * trapezoid(j, bj * r2, (bj + 1) * r2, h2);
                                }
                            }
                        }
                        row
                    })
                    .collect();
                let mut values = vec![0.0; m1 * m2 * nb];
                for i in 1..m1 {
                    for j in 1..m2 {
                        let blk = &block_rows[i - 1][(j - 1) * nb..j * nb];
                        let (cur, prev_row) = {
                            let (head, tail) = values.split_at_mut((i * m2) * nb);
                            (&mut tail[..m2 * nb], &head[(i - 1) * m2 * nb..])
                        };
                        for b in 0..nb {
                            cur[j * nb + b] = cur[(j - 1) * nb + b] + prev_row[j * nb + b]
                                - prev_row[(j - 1) * nb + b]
                                + blk[b];
                        }
                    }
                }
                values
            }
            Source::Convolved { first, second } => {
                let a = first.lattice_1d(levels[0])?;
                let b = second.lattice_1d(levels[1])?;
                let small = &first.sgrid;
                let hv = small.cell_volume();
                let shape = small.shape();
                let pad: Vec<usize> = shape.iter().map(|n| 2 * n).collect();
                let spectra = |list: &[Vec<f64>]| -> Vec<Vec<num_complex::Complex64>> {
                    list.par_iter()
                        .map(|dens| {
                            let masses: Vec<f64> = dens.iter().map(|v| v * hv).collect();
                            let mut z = embed_padded(&masses, &shape, &pad);
                            fft_nd(&mut z, &pad, false);
                            z
                        })
                        .collect()
                };
                let (fa, fb) = (spectra(&a), spectra(&b));
                let vol = self.sgrid.cell_volume();
                let rows: Vec<Vec<f64>> = (0..m1)
                    .into_par_iter()
                    .map(|i| {
                        let mut row = vec![0.0; m2 * nb];
                        for j in 0..m2 {
                            if i == 0 || j == 0 {
                                continue;
                            }
                            let mut z: Vec<_> = fa[i].iter().zip(&fb[j]).map(|(x, y)| x * y).collect();
                            fft_nd(&mut z, &pad, true);
                            let conv: Vec<f64> = z.iter().map(|c| c.re / z.len() as f64).collect();
                            for (m, v) in self.spread_corners(&conv) {
                                row[j * nb + m] = v / vol;
                            }
                        }
                        row
                    })
                    .collect();
                rows.concat()
            }
            Source::Path { .. } => unreachable!(),
        };
        Ok(LatticeDensities { grid: coarse, sgrid: self.sgrid.clone(), values })
    }
}

fn embed_padded(a: &[f64], shape: &[usize], padded: &[usize]) -> Vec<num_complex::Complex64> {
    let total: usize = padded.iter().product();
    let mut out = vec![num_complex::Complex64::new(0.0, 0.0); total];
    let d = shape.len();
    let mut idx = vec![0usize; d];
    for (flat, &v) in a.iter().enumerate() {
        let mut rest = flat;
        for k in (0..d).rev() {
            idx[k] = rest % shape[k];
            rest /= shape[k];
        }
        let mut target = 0usize;
        for k in 0..d {
            target = target * padded[k] + idx[k];
        }
        out[target].re = v;
    }
    out
}

/// Dense local-time densities at the nodes of a time grid.
#[derive(Debug, Clone)]
pub struct LatticeDensities {
    grid: Grid2D,
    sgrid: SpatialGrid,
    values: Vec<f64>,
}

impl LatticeDensities {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn sgrid(&self) -> &SpatialGrid {
        &self.sgrid
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let nb = self.sgrid.total_bins();
        let k = self.grid.index(i, j) * nb;
        &self.values[k..k + nb]
    }

    /// The densities as a field with one component per spatial bin.
    pub fn to_field(&self) -> Result<Field2D> {
        Field2D::new(self.grid, self.sgrid.total_bins(), self.values.clone())
    }

    /// Long-format CSV rows `t1,t2,x_1..x_d,value`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        let d = self.sgrid.dim();
        let mut header: Vec<String> = vec!["t1".into(), "t2".into()];
        header.extend((1..=d).map(|k| format!("x_{k}")));
        header.push("value".into());
        writeln!(out, "{}", header.join(","))?;
        let [m1, m2] = self.grid.nodes();
        let mut c = vec![0.0; d];
        for i in 0..m1 {
            for j in 0..m2 {
                let [t1, t2] = self.grid.node(i, j);
                for (b, v) in self.at(i, j).iter().enumerate() {
                    self.sgrid.centre_of(b, &mut c);
                    write!(out, "{t1:.16e},{t2:.16e}")?;
                    for x in &c {
                        write!(out, ",{x:.16e}")?;
                    }
                    writeln!(out, ",{v:.16e}")?;
                }
            }
        }
        Ok(())
    }
}

/// `T^w b(t, x) = int_0^t b(x + w_r) dr` by the corner (trapezoid) rule on the
/// grid of `w`, for each `x` in `x_points`, reported on the nodes of the
/// coarser grid with the given levels.
pub fn averaged_field_direct<D: Drift>(
    b: &D,
    w: &Field2D,
    x_points: &[Vec<f64>],
    levels: [u32; 2],
) -> Result<Vec<Field2D>> {
    let d = b.dim();
    if w.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: w.dim() });
    }
    let grid = *w.grid();
    let [f1, f2] = grid.levels();
    if levels[0] > f1 || levels[1] > f2 {
        return Err(Error::domain(format!("output levels {levels:?} finer than the field grid")));
    }
    x_points
        .par_iter()
        .map(|x| {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
            let [m1, m2] = grid.nodes();
            let quarter = 0.25 * grid.cell_area();
            let mut vals = vec![0.0; m1 * m2 * d];
            let mut y = vec![0.0; d];
            for (k, wk) in w.values().chunks(d).enumerate() {
                for c in 0..d {
                    y[c] = x[c] + wk[c];
                }
                b.eval(&y, &mut vals[k * d..(k + 1) * d]);
            }
            let mut acc = vec![0.0; m1 * m2 * d];
            for i in 1..m1 {
                for j in 1..m2 {
                    for c in 0..d {
                        let at = |a: usize, bb: usize| (a * m2 + bb) * d + c;
                        let cell = vals[at(i - 1, j - 1)] + vals[at(i - 1, j)] + vals[at(i, j - 1)] + vals[at(i, j)];
                        acc[at(i, j)] = acc[at(i - 1, j)] + acc[at(i, j - 1)] - acc[at(i - 1, j - 1)] + quarter * cell;
                    }
                }
            }
            Field2D::new(grid, d, acc)?.restrict(levels[0], levels[1])
        })
        .collect()
}

/// `A(t, x) = (b * L_t)(x)` for a two-parameter local time `L`.
///
/// Increments are evaluated exactly from the histogram,
/// `box_{s,t} A(x) = sum_bins m_k b(x - z_k)`, where `m_k` are the masses of
/// the increment of `L` and `z_k` the bin centres. Time arguments are snapped
/// to the nearest node of the local time's grid.
#[derive(Debug, Clone)]
pub struct ConvolvedField<D> {
    drift: D,
    lt: LocalTime,
    grid: Grid2D,
}

/// Below this many deposits an increment is evaluated without merging bins.
const DIRECT_DEPOSITS: usize = 64;

impl<D: Drift> ConvolvedField<D> {
    pub fn new(drift: D, lt: LocalTime) -> Result<Self> {
        let grid = lt
            .time_grid()
            .ok_or_else(|| Error::domain("averaged field needs a two-parameter local time"))?;
        if drift.dim() != lt.sgrid.dim() {
            return Err(Error::DimensionMismatch { expected: lt.sgrid.dim(), got: drift.dim() });
        }
        Ok(Self { drift, lt, grid })
    }

    pub fn drift(&self) -> &D {
        &self.drift
    }

    pub fn local_time(&self) -> &LocalTime {
        &self.lt
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn snap(&self, t: [f64; 2]) -> (usize, usize) {
        let [h1, h2] = self.grid.steps();
        let [c1, c2] = self.grid.cells();
        let i = ((t[0] / h1).round().max(0.0) as usize).min(c1);
        let j = ((t[1] / h2).round().max(0.0) as usize).min(c2);
        (i, j)
    }

    /// Increment over node indices.
    pub fn increment_nodes(&self, s: (usize, usize), t: (usize, usize), x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if s.0 >= t.0 || s.1 >= t.1 {
            return;
        }
        let d = self.drift.dim();
        let mut z = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut bv = vec![0.0; d];
        let sg = &self.lt.sgrid;
        let mut add = |bin: usize, m: f64| {
            sg.centre_of(bin, &mut z);
            for c in 0..d {
                y[c] = x[c] - z[c];
            }
            self.drift.eval(&y, &mut bv);
            for c in 0..d {
                out[c] += m * bv[c];
            }
        };
        let deposits = match &self.lt.source {
            Source::Convolved { .. } => ((t.0 - s.0 + 1) * (t.1 - s.1 + 1)) << d,
            _ => (t.0 - s.0 + 1) * (t.1 - s.1 + 1),
        };
        if deposits <= DIRECT_DEPOSITS {
            self.lt.for_each_2d(s, t, add);
        } else {
            let inc = self.lt.increment(s, t).expect("node rectangle lies on the grid");
            for &(bin, m) in inc.entries() {
                add(bin, m);
            }
        }
    }

    /// `A(t, .)` on all bin centres of the local time's spatial grid, through
    /// a zero-padded FFT convolution with `b` sampled on the lattice of bin
    /// offsets `n h`, `|n| < K`.
    pub fn lattice_values(&self, t: (usize, usize)) -> Result<Vec<f64>> {
        let sg = &self.lt.sgrid;
        let d = self.drift.dim();
        let k = sg.bins();
        let shape = sg.shape();
        let total = sg.total_bins();
        let mass: Vec<f64> = {
            let inc = self.lt.increment((0, 0), t)?;
            let mut m = vec![0.0; total];
            inc.entries().iter().for_each(|&(b, v)| m[b] += v);
            m
        };
        // Kernel index n_a in 0..2K stands for offset (n_a - K) h_a; entry 2K-1.. is unused padding.
        let big: Vec<usize> = shape.iter().map(|n| 2 * n).collect();
        let big_total: usize = big.iter().product();
        let mut out = vec![0.0; total * d];
        let mut idx = vec![0usize; d];
        let mut y = vec![0.0; d];
        let mut bv = vec![0.0; d];
        let mut kernels = vec![vec![0.0; big_total]; d];
        for flat in 0..big_total {
            let mut rest = flat;
            for a in (0..d).rev() {
                idx[a] = rest % big[a];
                rest /= big[a];
            }
            for a in 0..d {
                y[a] = (idx[a] as f64 - k as f64) * sg.step(a);
            }
            self.drift.eval(&y, &mut bv);
            for c in 0..d {
                kernels[c][flat] = bv[c];
            }
        }
        let mut fm = embed_padded(&mass, &shape, &big);
        fft_nd(&mut fm, &big, false);
        for c in 0..d {
            let mut fk: Vec<num_complex::Complex64> =
                kernels[c].iter().map(|&v| num_complex::Complex64::new(v, 0.0)).collect();
            fft_nd(&mut fk, &big, false);
            for (a, b) in fk.iter_mut().zip(&fm) {
                *a *= b;
            }
            fft_nd(&mut fk, &big, true);
            // A(c_m) = sum_j mass_j b((m - j) h): cyclic index m - j + K.
            for m in 0..total {
                sg.multi_index(m, &mut idx);
                let mut src = 0usize;
                for a in 0..d {
                    src = src * big[a] + idx[a] + k;
                }
                out[m * d + c] = fk[src].re / big_total as f64;
            }
        }
        Ok(out)
    }

    /// `A(t, x)` at every node of the coarser grid with the given levels.
    pub fn grid_values(&self, x_points: &[Vec<f64>], levels: [u32; 2]) -> Result<Vec<Field2D>> {
        let lat = self.lt.lattice(levels)?;
        let d = self.drift.dim();
        let sg = &self.lt.sgrid;
        let vol = sg.cell_volume();
        let nb = sg.total_bins();
        x_points
            .par_iter()
            .map(|x| {
                if x.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: x.len() });
                }
                // b(x - z) for every bin, reused across time nodes.
                let mut table = vec![0.0; nb * d];
                let mut z = vec![0.0; d];
                let mut y = vec![0.0; d];
                for bin in 0..nb {
                    sg.centre_of(bin, &mut z);
                    for c in 0..d {
                        y[c] = x[c] - z[c];
                    }
                    self.drift.eval(&y, &mut table[bin * d..(bin + 1) * d]);
                }
                let g = *lat.grid();
                let [m1, m2] = g.nodes();
                let mut vals = vec![0.0; m1 * m2 * d];
                for i in 0..m1 {
                    for j in 0..m2 {
                        let dens = lat.at(i, j);
                        let o = g.index(i, j) * d;
                        for (bin, &p) in dens.iter().enumerate() {
                            if p != 0.0 {
                                for c in 0..d {
                                    vals[o + c] += p * vol * table[bin * d + c];
                                }
                            }
                        }
                    }
                }
                Field2D::new(g, d, vals)
            })
            .collect()
    }
}

impl<D: Drift> TimeIndexedField for ConvolvedField<D> {
    fn dim(&self) -> usize {
        self.drift.dim()
    }

    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]) {
        self.increment_nodes((0, 0), self.snap(t), x, out);
    }

    fn rect_increment(&self, s: [f64; 2], t: [f64; 2], x: &[f64], out: &mut [f64]) {
        self.increment_nodes(self.snap(s), self.snap(t), x, out);
    }

    fn native_grid(&self) -> Option<Grid2D> {
        Some(self.grid)
    }
}

/// `A = b * L`, or `b * L^{-w}` when `reflect` is set and `lt` is `L^w`.
pub fn averaged_field_convolved<D: Drift>(b: D, lt: &LocalTime, reflect: bool) -> Result<ConvolvedField<D>> {
    let lt = if reflect { lt.reflect() } else { lt.clone() };
    ConvolvedField::new(b, lt)
}

/// `||box_{s,t} L||_{H^lambda}` over node indices `s <= t`.
pub fn sobolev_norm_increment(lt: &LocalTime, s: (usize, usize), t: (usize, usize), lambda: f64) -> Result<f64> {
    let dens = lt.increment(s, t)?.to_density(&lt.sgrid);
    bessel_norm(&dens, &lt.sgrid, lambda)
}

/// Noise model for [`regularity_scan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScanSource {
    /// `w = beta1(t1) + beta2(t2)` with independent fBms.
    FbmSum { hurst: [f64; 2], horizon: [f64; 2], level: u32, dim: usize },
    /// Fractional Brownian sheet.
    Sheet { hurst: [f64; 2], grid: Grid2D, dim: usize },
}

impl ScanSource {
    pub fn hurst(&self) -> [f64; 2] {
        match self {
            ScanSource::FbmSum { hurst, .. } | ScanSource::Sheet { hurst, .. } => *hurst,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScanSource::FbmSum { dim, .. } | ScanSource::Sheet { dim, .. } => *dim,
        }
    }

    fn levels(&self) -> [u32; 2] {
        match self {
            ScanSource::FbmSum { level, .. } => [*level, *level],
            ScanSource::Sheet { grid, .. } => grid.levels(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
    pub bins: usize,
    /// Dyadic levels `k` of the times `tau = T / 2^k` used in the regression.
    pub scales: Vec<u32>,
}

/// Mean fitted exponent of one axis at one `lambda`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AxisExponent {
    pub gamma_hat: f64,
    pub gamma_se: f64,
    pub gamma_floor: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScanRow {
    pub lambda: f64,
    pub axes: [AxisExponent; 2],
    /// True when `lambda` exceeds the admissible bound `1/(2 max H) - d/2`.
    pub above_bound: bool,
}

/// Monte Carlo estimate of the time-Hölder exponents of `t -> L_t` in `H^lambda`.
///
/// Per seed and axis, `log ||box_{0,(tau,T2)} L||` (resp. `(T1,tau)`) is
/// regressed on `log tau`; the table reports mean and standard error over
/// seeds next to the floor `1 - (lambda + d/2) H_i`.
pub fn regularity_scan(source: &ScanSource, opts: &ScanOptions) -> Result<Vec<ScanRow>> {
    if opts.seeds < 10 {
        return Err(Error::Config(format!("regularity scan needs at least 10 seeds, got {}", opts.seeds)));
    }
    if opts.scales.len() < 3 {
        return Err(Error::Config("regularity scan needs at least 3 time scales".into()));
    }
    let levels = source.levels();
    if let Some(&k) = opts.scales.iter().find(|&&k| k > levels[0].min(levels[1])) {
        return Err(Error::Config(format!("time scale level {k} is finer than the sampled grid")));
    }
    let hurst = source.hurst();
    let d = source.dim();
    let bound = 1.0 / (2.0 * hurst[0].max(hurst[1])) - d as f64 / 2.0;
    for &l in &opts.lambdas {
        if l >= bound {
            log::warn!("lambda = {l} is at or above the admissible bound {bound}");
        }
    }
    enum Sampler {
        Pair(FbmSampler, FbmSampler),
        Sheet(SheetSampler),
    }
    let sampler = match source {
        ScanSource::FbmSum { hurst, horizon, level, .. } => Sampler::Pair(
            FbmSampler::new(hurst[0], horizon[0], *level)?,
            FbmSampler::new(hurst[1], horizon[1], *level)?,
        ),
        ScanSource::Sheet { hurst, grid, .. } => Sampler::Sheet(SheetSampler::new(*hurst, *grid)?),
    };
    // slopes[seed][lambda][axis]
    let slopes: Vec<Vec<[f64; 2]>> = (0..opts.seeds)
        .into_par_iter()
        .map(|r| -> Result<Vec<[f64; 2]>> {
            let seed = opts.base_seed.wrapping_add(r as u64);
            let lt = match &sampler {
                Sampler::Pair(s1, s2) => {
                    let b1 = s1.sample(d, seed)?;
                    let b2 = s2.sample(d, seed ^ 0x9e37_79b9_7f4a_7c15)?;
                    let sg = fitted_box(&[b1.values(), b2.values()], d, opts.bins)?;
                    convolve_local_times(&occupation_density_path(&b1, &sg)?, &occupation_density_path(&b2, &sg)?)?
                }
                Sampler::Sheet(s) => {
                    let w = s.sample(d, seed)?;
                    let sg = fitted_box(&[w.values()], d, opts.bins)?;
                    occupation_density(&w, &sg)?
                }
            };
            let grid = lt.time_grid().expect("two-parameter");
            let [c1, c2] = grid.cells();
            let [t1, t2] = grid.horizons();
            opts.lambdas
                .iter()
                .map(|&lambda| {
                    let mut out = [0.0; 2];
                    for axis in 0..2 {
                        let mut xs = Vec::new();
                        let mut ys = Vec::new();
                        for &k in &opts.scales {
                            let (node, tau) = if axis == 0 {
                                ((c1 >> k, c2), t1 / (1u64 << k) as f64)
                            } else {
                                ((c1, c2 >> k), t2 / (1u64 << k) as f64)
                            };
                            let norm = sobolev_norm_increment(&lt, (0, 0), node, lambda)?;
                            xs.push(tau.ln());
                            ys.push(norm.ln());
                        }
                        out[axis] = crate::holder::linear_fit(&xs, &ys).0;
                    }
                    Ok(out)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = opts.seeds as f64;
    Ok(opts
        .lambdas
        .iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let axes = [0, 1].map(|axis| {
                let vals: Vec<f64> = slopes.iter().map(|s| s[li][axis]).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                AxisExponent {
                    gamma_hat: mean,
                    gamma_se: (var / n).sqrt(),
                    gamma_floor: 1.0 - (lambda + d as f64 / 2.0) * hurst[axis],
                }
            });
            ScanRow { lambda, axes, above_bound: lambda >= bound }
        })
        .collect())
}

/// Symmetric box covering all samples (no sigma padding needed: the samples are known).
fn fitted_box(samples: &[&[f64]], d: usize, bins: usize) -> Result<SpatialGrid> {
    let all: Vec<f64> = samples.iter().flat_map(|s| s.iter().copied()).collect();
    SpatialGrid::auto(&all, &vec![0.0; d], 0.0, bins)
}

/// Regularity-scan CSV with columns
/// `lambda,gamma1_hat,gamma1_se,gamma1_floor,gamma2_hat,gamma2_se,gamma2_floor`.
pub fn write_scan_csv(rows: &[ScanRow], out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "lambda,gamma1_hat,gamma1_se,gamma1_floor,gamma2_hat,gamma2_se,gamma2_floor")?;
    for r in rows {
        let [a, b] = &r.axes;
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.lambda, a.gamma_hat, a.gamma_se, a.gamma_floor, b.gamma_hat, b.gamma_se, b.gamma_floor
        )?;
    }
    Ok(())
}
