//! Exact-covariance Gaussian samplers: fractional Brownian motion, the
//! fractional Brownian sheet, and additive composite fields.
//!
//! fBm increments on a uniform grid are fractional Gaussian noise. They are
//! drawn by circulant embedding of the fGn autocovariance
//! `g(k) = (|k+1|^2H - 2|k|^2H + |k-1|^2H) dt^2H / 2` into a circulant of size
//! `2N`. If the embedding has a negative eigenvalue the dense Toeplitz
//! covariance is factorised instead (Cholesky, then a clipped eigen-factor).
//!
//! The sheet has covariance `R_H1(s1,t1) R_H2(s2,t2)` with
//! `R_H(s,t) = (s^2H + t^2H - |t-s|^2H) / 2`. With Cholesky factors `L1`, `L2`
//! of the two axis covariances on the interior nodes, `W = L1 Z L2^T` has
//! exactly that covariance for `Z` with i.i.d. standard normal entries.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, Path1D, MAX_LEVEL};
use crate::rng::Gaussian;

/// Relative size of a negative eigenvalue tolerated as roundoff.
const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbmSpec {
    pub hurst: f64,
    pub horizon: f64,
    pub level: u32,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheetSpec {
    pub hurst: [f64; 2],
    pub grid: Grid2D,
    pub dim: usize,
    pub seed: u64,
}

fn check_hurst(h: f64) -> Result<()> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::domain(format!("Hurst parameter must lie in (0,1), got {h}")));
    }
    Ok(())
}

/// fBm covariance `R_H(s,t)`.
pub fn fbm_covariance(hurst: f64, s: f64, t: f64) -> f64 {
    let e = 2.0 * hurst;
    0.5 * (s.abs().powf(e) + t.abs().powf(e) - (t - s).abs().powf(e))
}

#[derive(Debug, Clone)]
enum Factor {
    /// `sqrt(eigenvalue / 2N)` of the circulant embedding.
    Circulant(Vec<f64>),
    /// Lower factor `C` with `C C^T` the increment covariance.
    Dense(DMatrix<f64>),
}

/// Cached fBm sampler for one `(H, T, n)`.
#[derive(Debug, Clone)]
pub struct FbmSampler {
    hurst: f64,
    horizon: f64,
    level: u32,
    factor: Factor,
}

impl FbmSampler {
    pub fn new(hurst: f64, horizon: f64, level: u32) -> Result<Self> {
        check_hurst(hurst)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if level > MAX_LEVEL {
            return Err(Error::domain(format!("level {level} exceeds {MAX_LEVEL}")));
        }
        let n = 1usize << level;
        let dt = horizon / n as f64;
        let gamma: Vec<f64> = (0..=n).map(|k| fgn_autocov(hurst, k) * dt.powf(2.0 * hurst)).collect();
        let factor = match circulant_factor(&gamma) {
            Some(f) => Factor::Circulant(f),
            None => {
                log::warn!("circulant embedding not nonnegative for H={hurst}, n={level}; using dense factor");
                Factor::Dense(dense_factor(&toeplitz(&gamma[..n]))?)
            }
        };
        Ok(Self { hurst, horizon, level, factor })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// `dim` independent components, component `k` drawn from stream `k`.
    pub fn sample(&self, dim: usize, seed: u64) -> Result<Path1D> {
        if dim == 0 {
            return Err(Error::domain("number of components must be positive"));
        }
        let n = 1usize << self.level;
        let mut values = vec![0.0; (n + 1) * dim];
        for k in 0..dim {
            let incr = self.increments(seed, k as u64);
            let mut acc = 0.0;
            for (i, dx) in incr.iter().enumerate() {
                acc += dx;
                values[(i + 1) * dim + k] = acc;
            }
        }
        Path1D::new(self.horizon, self.level, dim, values)
    }

    fn increments(&self, seed: u64, stream: u64) -> Vec<f64> {
        let n = 1usize << self.level;
        let mut g = Gaussian::new(seed, stream);
        match &self.factor {
            Factor::Circulant(scale) => {
                let m = scale.len();
                let mut y: Vec<Complex64> = scale
                    .iter()
                    .map(|&s| {
                        let a = g.next();
                        let b = g.next();
                        Complex64::new(s * a, s * b)
                    })
                    .collect();
                FftPlanner::<f64>::new().plan_fft_forward(m).process(&mut y);
                y[..n].iter().map(|z| z.re).collect()
            }
            Factor::Dense(c) => {
                let mut z = vec![0.0; n];
                g.fill(&mut z);
                let z = nalgebra::DVector::from_vec(z);
                (c * z).iter().copied().collect()
            }
        }
    }
}

fn fgn_autocov(hurst: f64, k: usize) -> f64 {
    let e = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

/// `sqrt(lambda_j / 2N)` for the circulant built from `gamma[0..=N]`, or
/// `None` when an eigenvalue is negative beyond roundoff.
fn circulant_factor(gamma: &[f64]) -> Option<Vec<f64>> {
    let n = gamma.len() - 1;
    let m = 2 * n;
    let mut row: Vec<Complex64> = (0..m)
        .map(|j| Complex64::new(if j <= n { gamma[j] } else { gamma[m - j] }, 0.0))
        .collect();
    FftPlanner::<f64>::new().plan_fft_forward(m).process(&mut row);
    let max = row.iter().fold(0.0f64, |a, z| a.max(z.re));
    if row.iter().any(|z| z.re < -EIGEN_TOL * max) {
        return None;
    }
    Some(row.iter().map(|z| (z.re.max(0.0) / m as f64).sqrt()).collect())
}

fn toeplitz(gamma: &[f64]) -> DMatrix<f64> {
    let n = gamma.len();
    DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)])
}

/// `C` with `C C^T = cov`: Cholesky if possible, else eigenvectors scaled by
/// the square roots of the clipped eigenvalues.
fn dense_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min < -1e-8 * max {
        return Err(Error::Numerical(format!(
            "covariance factorisation failed: Cholesky rejected the matrix and the smallest eigenvalue \
             {min:e} is not roundoff relative to {max:e}"
        )));
    }
    let mut v = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    Ok(v)
}

pub fn sample_fbm(spec: &FbmSpec) -> Result<Path1D> {
    FbmSampler::new(spec.hurst, spec.horizon, spec.level)?.sample(spec.dim, spec.seed)
}

/// Cached sheet sampler for one `(H1, H2, grid)`.
#[derive(Debug, Clone)]
pub struct SheetSampler {
    grid: Grid2D,
    factors: [DMatrix<f64>; 2],
}

impl SheetSampler {
    pub fn new(hurst: [f64; 2], grid: Grid2D) -> Result<Self> {
        check_hurst(hurst[0])?;
        check_hurst(hurst[1])?;
        let [c1, c2] = grid.cells();
        let [h1, h2] = grid.steps();
        let axis = |h: f64, dt: f64, n: usize| {
            let cov = DMatrix::from_fn(n, n, |i, j| fbm_covariance(h, (i + 1) as f64 * dt, (j + 1) as f64 * dt));
            dense_factor(&cov)
        };
        Ok(Self { grid, factors: [axis(hurst[0], h1, c1)?, axis(hurst[1], h2, c2)?] })
    }

    pub fn sample(&self, dim: usize, seed: u64) -> Result<Field2D> {
        if dim == 0 {
            return Err(Error::domain("number of components must be positive"));
        }
        let [c1, c2] = self.grid.cells();
        let mut field = Field2D::zeros(self.grid, dim);
        for k in 0..dim {
            let mut g = Gaussian::new(seed, k as u64);
            let mut z = DMatrix::<f64>::zeros(c1, c2);
            // Row-major draw order, independent of nalgebra's storage.
            for i in 0..c1 {
                for j in 0..c2 {
                    z[(i, j)] = g.next();
                }
            }
            let w = &self.factors[0] * z * self.factors[1].transpose();
            for i in 0..c1 {
                for j in 0..c2 {
                    field.get_mut(i + 1, j + 1)[k] = w[(i, j)];
                }
            }
        }
        Ok(field)
    }
}

pub fn sample_sheet(spec: &SheetSpec) -> Result<Field2D> {
    SheetSampler::new(spec.hurst, spec.grid)?.sample(spec.dim, spec.seed)
}

/// `w(t) = beta1(t1) + beta2(t2)` on the grid spanned by the two paths.
pub fn sum_field(beta1: &Path1D, beta2: &Path1D) -> Result<Field2D> {
    if beta1.dim() != beta2.dim() {
        return Err(Error::DimensionMismatch { expected: beta1.dim(), got: beta2.dim() });
    }
    let grid = Grid2D::new(beta1.horizon(), beta2.horizon(), beta1.level(), beta2.level())?;
    let d = beta1.dim();
    let [m1, m2] = grid.nodes();
    let mut values = Vec::with_capacity(m1 * m2 * d);
    for i in 0..m1 {
        let a = beta1.get(i);
        for j in 0..m2 {
            let b = beta2.get(j);
            values.extend((0..d).map(|k| a[k] + b[k]));
        }
    }
    Field2D::new(grid, d, values)
}

/// The path `t -> beta(t / factor)` on `[0, factor * T]` at the same level.
/// Its nodes are the images of the original nodes, so no interpolation error
/// is introduced.
pub fn rescaled_boundary(beta: &Path1D, factor: f64) -> Result<Path1D> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::domain(format!("rescaling factor must be positive, got {factor}")));
    }
    let horizon = beta.horizon() * factor;
    let n = beta.len();
    let d = beta.dim();
    let mut values = vec![0.0; n * d];
    for (i, out) in values.chunks_mut(d).enumerate() {
        // t_i / factor is node i of the original grid.
        let t = (i as f64 * horizon / (n - 1) as f64 / factor).min(beta.horizon());
        beta.eval(t, out)?;
    }
    Path1D::new(horizon, beta.level(), d, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fbm_starts_at_zero_and_is_deterministic() {
        let spec = FbmSpec { hurst: 0.3, horizon: 1.0, level: 6, dim: 2, seed: 11 };
        let a = sample_fbm(&spec).unwrap();
        let b = sample_fbm(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(0), &[0.0, 0.0]);
        assert_ne!(a.get(64)[0], a.get(64)[1]);
        let c = sample_fbm(&FbmSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn circulant_is_nonnegative_for_fgn() {
        for &h in &[0.1, 0.25, 0.5, 0.75, 0.95] {
            let n = 64;
            let g: Vec<f64> = (0..=n).map(|k| fgn_autocov(h, k)).collect();
            assert!(circulant_factor(&g).is_some(), "H={h}");
        }
    }

    #[test]
    fn dense_fallback_reproduces_covariance() {
        let g: Vec<f64> = (0..8).map(|k| fgn_autocov(0.7, k)).collect();
        let cov = toeplitz(&g);
        let c = dense_factor(&cov).unwrap();
        assert!((&c * c.transpose() - &cov).abs().max() < 1e-12);
        // Rank-deficient PSD matrix goes through the eigen branch.
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let cov = &v * v.transpose();
        let c = dense_factor(&cov).unwrap();
        assert!((&c * c.transpose() - &cov).abs().max() < 1e-10);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(dense_factor(&bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn sheet_vanishes_on_axes() {
        let grid = Grid2D::new(1.0, 2.0, 4, 3).unwrap();
        let w = sample_sheet(&SheetSpec { hurst: [0.3, 0.7], grid, dim: 2, seed: 5 }).unwrap();
        let [m1, m2] = grid.nodes();
        for i in 0..m1 {
            assert_eq!(w.get(i, 0), &[0.0, 0.0]);
        }
        for j in 0..m2 {
            assert_eq!(w.get(0, j), &[0.0, 0.0]);
        }
        assert!(w.get(m1 - 1, m2 - 1)[0] != 0.0);
    }

    #[test]
    fn sum_field_examples() {
        let id = Path1D::from_fn(1.0, 3, 1, |t, o| o[0] = t).unwrap();
        let w = sum_field(&id, &id).unwrap();
        let g = *w.grid();
        for i in 0..9 {
            for j in 0..9 {
                let [t1, t2] = g.node(i, j);
                assert_eq!(w.get(i, j)[0], t1 + t2);
            }
        }
        let two = Path1D::zeros(1.0, 3, 2).unwrap();
        assert!(sum_field(&id, &two).is_err());
    }

    #[test]
    fn rescale_examples() {
        let id = Path1D::from_fn(1.0, 4, 1, |t, o| o[0] = t).unwrap();
        assert_eq!(rescaled_boundary(&id, 1.0).unwrap(), id);
        let r = rescaled_boundary(&id, 2f64.sqrt()).unwrap();
        assert!((r.horizon() - 2f64.sqrt()).abs() < 1e-15);
        for i in 0..r.len() {
            assert!((r.get(i)[0] - r.time(i) / 2f64.sqrt()).abs() < 1e-15);
        }
        assert!(rescaled_boundary(&id, 0.0).is_err());
    }
}
