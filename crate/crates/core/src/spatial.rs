//! Symmetric spatial boxes, histogram bins and the FFT helpers used on them.
//!
//! A [`SpatialGrid`] covers `[-a_k, a_k]` on every axis with the same power of
//! two `K` of bins. Bin `j` has centre `(j - K/2 + 1/2) h_k`, so the grid is
//! symmetric about the origin and reflection `x -> -x` is the index reversal
//! `j -> K - 1 - j`. Flat bin indices are row-major with axis 0 outermost.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations of the terminal marginal covered by an auto-sized box.
pub const AUTO_SIGMAS: f64 = 4.0;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    half_widths: Vec<f64>,
    bins: usize,
}

impl SpatialGrid {
    /// Cube `[-a, a]^d` with `bins` bins per axis.
    pub fn new(dim: usize, half_width: f64, bins: usize) -> Result<Self> {
        Self::with_half_widths(vec![half_width; dim], bins)
    }

    pub fn with_half_widths(half_widths: Vec<f64>, bins: usize) -> Result<Self> {
        if half_widths.is_empty() || half_widths.len() > MAX_DIM {
            return Err(Error::domain(format!(
                "spatial dimension must lie in 1..={MAX_DIM}, got {}",
                half_widths.len()
            )));
        }
        if let Some(a) = half_widths.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::domain(format!("box half-width must be positive, got {a}")));
        }
        if bins < 2 || !bins.is_power_of_two() {
            return Err(Error::domain(format!("bins per axis must be a power of two >= 2, got {bins}")));
        }
        let total = (bins as u128).checked_pow(half_widths.len() as u32);
        if total.is_none_or(|t| t > (1u128 << 26)) {
            return Err(Error::domain(format!(
                "{bins}^{} bins exceed the supported histogram size",
                half_widths.len()
            )));
        }
        Ok(Self { half_widths, bins })
    }

    /// Box sized from sample values: each half-width is the larger of the
    /// observed `max |x_k|` and `AUTO_SIGMAS * terminal_sd[k]`, plus `margin`.
    pub fn auto(values: &[f64], terminal_sd: &[f64], margin: f64, bins: usize) -> Result<Self> {
        let dim = terminal_sd.len();
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::domain("sample values do not match the spatial dimension"));
        }
        if !(margin >= 0.0) {
            return Err(Error::domain(format!("margin must be nonnegative, got {margin}")));
        }
        let mut half = vec![0.0f64; dim];
        for chunk in values.chunks(dim) {
            for k in 0..dim {
                half[k] = half[k].max(chunk[k].abs());
            }
        }
        for k in 0..dim {
            // Tiny relative pad keeps the extreme sample strictly inside.
            half[k] = half[k].max(AUTO_SIGMAS * terminal_sd[k]) * (1.0 + 1e-9) + margin;
            if half[k] == 0.0 {
                half[k] = 1.0;
            }
        }
        Self::with_half_widths(half, bins)
    }

    pub fn dim(&self) -> usize {
        self.half_widths.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn total_bins(&self) -> usize {
        self.bins.pow(self.dim() as u32)
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_widths
    }

    pub fn step(&self, axis: usize) -> f64 {
        2.0 * self.half_widths[axis] / self.bins as f64
    }

    pub fn steps(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.step(k)).collect()
    }

    /// Volume `h^d` of one bin.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.step(k)).product()
    }

    #[inline]
    pub fn centre(&self, axis: usize, j: usize) -> f64 {
        (j as f64 - (self.bins / 2) as f64 + 0.5) * self.step(axis)
    }

    /// Bin index along one axis, or `None` outside the box.
    #[inline]
    pub fn axis_bin(&self, axis: usize, x: f64) -> Option<usize> {
        let pos = x / self.step(axis) + (self.bins / 2) as f64;
        if pos >= 0.0 && pos < self.bins as f64 {
            Some(pos as usize)
        } else {
            None
        }
    }

    #[inline]
    pub fn bin_of(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0usize;
        for (k, &xk) in x.iter().enumerate() {
            flat = flat * self.bins + self.axis_bin(k, xk)?;
        }
        Some(flat)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bin_of(x).is_some()
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for k in (0..self.dim()).rev() {
            out[k] = flat % self.bins;
            flat /= self.bins;
        }
    }

    pub fn centre_of(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for k in (0..self.dim()).rev() {
            out[k] = self.centre(k, rest % self.bins);
            rest /= self.bins;
        }
    }

    /// Index of the bin mirrored through the origin.
    #[inline]
    pub fn reflect_index(&self, flat: usize) -> usize {
        let mut rest = flat;
        let mut out = 0usize;
        let mut scale = 1usize;
        for _ in 0..self.dim() {
            let j = rest % self.bins;
            rest /= self.bins;
            out += (self.bins - 1 - j) * scale;
            scale *= self.bins;
        }
        out
    }

    /// Grid with the same bin width and twice the extent, which holds the
    /// support of a convolution of two densities on `self`.
    pub fn doubled(&self) -> Self {
        Self {
            half_widths: self.half_widths.iter().map(|a| 2.0 * a).collect(),
            bins: 2 * self.bins,
        }
    }

    /// Largest `|lambda|` accepted by Bessel-potential norms on this grid.
    pub fn lambda_max(&self) -> f64 {
        (self.bins as f64).log2() / 4.0
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.bins; self.dim()]
    }

    pub(crate) fn check_same(&self, other: &SpatialGrid) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        let same_steps = (0..self.dim()).all(|k| (self.step(k) - other.step(k)).abs() <= 1e-12 * self.step(k));
        if self.bins != other.bins || !same_steps {
            return Err(Error::domain("spatial grids differ"));
        }
        Ok(())
    }
}

/// In-place multi-dimensional FFT over a row-major array of the given shape.
/// The inverse transform is unnormalised.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(total, data.len());
    let mut planner = FftPlanner::<f64>::new();
    let mut stride = 1usize;
    for axis in (0..shape.len()).rev() {
        let n = shape[axis];
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        if stride == 1 {
            fft.process(data);
        } else {
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            let block = n * stride;
            for start in (0..total).step_by(block) {
                for off in 0..stride {
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = data[start + off + i * stride];
                    }
                    fft.process(&mut line);
                    for (i, v) in line.iter().enumerate() {
                        data[start + off + i * stride] = *v;
                    }
                }
            }
        }
        stride *= n;
    }
}

/// Full linear convolution of two real row-major arrays of equal shape `s`;
/// the output has shape `2s` and entry `m` holds `sum_{j+k=m} a_j b_k`.
pub fn convolve_full(a: &[f64], b: &[f64], shape: &[usize]) -> Vec<f64> {
    let padded: Vec<usize> = shape.iter().map(|n| 2 * n).collect();
    let total: usize = padded.iter().product();
    let mut fa = embed(a, shape, &padded);
    let mut fb = embed(b, shape, &padded);
    fft_nd(&mut fa, &padded, false);
    fft_nd(&mut fb, &padded, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_nd(&mut fa, &padded, true);
    let scale = 1.0 / total as f64;
    fa.iter().map(|z| z.re * scale).collect()
}

fn embed(a: &[f64], shape: &[usize], padded: &[usize]) -> Vec<Complex64> {
    let total: usize = padded.iter().product();
    let mut out = vec![Complex64::new(0.0, 0.0); total];
    let dim = shape.len();
    let mut idx = vec![0usize; dim];
    for (flat, &v) in a.iter().enumerate() {
        let mut rest = flat;
        for k in (0..dim).rev() {
            idx[k] = rest % shape[k];
            rest /= shape[k];
        }
        let mut target = 0usize;
        for k in 0..dim {
            target = target * padded[k] + idx[k];
        }
        out[target] = Complex64::new(v, 0.0);
    }
    out
}

/// Bessel-potential norm `(sum_z |f^(z)|^2 (1+|z|^2)^lambda dz)^(1/2)` of a
/// density sampled on the bins of `sgrid`, with the continuous transform
/// approximated by `h^d` times the DFT and frequencies cut at Nyquist.
/// At `lambda = 0` this is exactly the discrete L2 norm.
pub fn bessel_norm(values: &[f64], sgrid: &SpatialGrid, lambda: f64) -> Result<f64> {
    if values.len() != sgrid.total_bins() {
        return Err(Error::domain(format!(
            "density has {} entries, grid has {} bins",
            values.len(),
            sgrid.total_bins()
        )));
    }
    let lmax = sgrid.lambda_max();
    if !(lambda.abs() <= lmax) {
        return Err(Error::domain(format!(
            "lambda = {lambda} outside the resolvable band |lambda| <= {lmax} for {} bins",
            sgrid.bins()
        )));
    }
    let dim = sgrid.dim();
    let k = sgrid.bins();
    let shape = sgrid.shape();
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut data, &shape, false);
    let steps = sgrid.steps();
    let vol = sgrid.cell_volume();
    let mut idx = vec![0usize; dim];
    let mut acc = 0.0;
    for (flat, z) in data.iter().enumerate() {
        sgrid.multi_index(flat, &mut idx);
        let mut freq2 = 0.0;
        for a in 0..dim {
            let signed = if idx[a] < k / 2 { idx[a] as f64 } else { idx[a] as f64 - k as f64 };
            let w = std::f64::consts::TAU * signed / (k as f64 * steps[a]);
            freq2 += w * w;
        }
        acc += z.norm_sqr() * (1.0 + freq2).powf(lambda);
    }
    // Parseval: h^d * sum |f|^2 = h^d / K^d * sum |DFT|^2.
    Ok((acc * vol / sgrid.total_bins() as f64).sqrt())
}
