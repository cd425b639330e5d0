//! Drift coefficients `b : R^d -> R^d` and their mollifications.
//!
//! Every catalog profile except the Gaussian bump acts componentwise
//! (`b_k` depends on `x_k` only) and the bump is a product over axes. Both
//! mollifiers are products of one-dimensional kernels, so every mollified
//! profile reduces to one-dimensional convolutions. Closed forms are used
//! where they exist; the rest goes through composite Gauss–Legendre
//! quadrature over the kernel support. Grid-sampled drifts are mollified once,
//! on their own grid, by FFT convolution with the sampled kernel.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::spatial::{convolve_full, SpatialGrid};

/// Gaussian kernels are truncated at this many standard deviations.
const GAUSS_CUTOFF: f64 = 8.0;
const PANELS: usize = 16;
const PANEL_POINTS: usize = 16;

/// Anything usable as a drift coefficient `b : R^d -> R^d`.
pub trait Drift: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Closure-backed drift.
#[derive(Clone)]
pub struct FnDrift<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> FnDrift<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> Drift for FnDrift<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

impl Drift for DriftSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        DriftSpec::eval(self, x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mollifier {
    /// Centred normal density with standard deviation `eps`.
    Gaussian,
    /// Triangular density `(1 - |x|/eps)/eps` on `[-eps, eps]`.
    Triangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub frequency: f64,
    pub cos: f64,
    pub sin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: Vec<f64> },
    /// `b(x) = x`.
    Identity,
    /// `b_k = amplitude * sin(frequency * x_k + phase)`.
    Sine { amplitude: f64, frequency: f64, phase: f64 },
    /// `b_k = amplitude * exp(-|x - centre|^2 / (2 width^2))`.
    GaussianBump { amplitude: f64, centre: Vec<f64>, width: f64 },
    /// `b_k = amplitude * 1{x_k >= threshold}`.
    Step { amplitude: f64, threshold: f64 },
    /// `b_k = amplitude * sign(x_k) |x_k|^exponent`.
    Power { amplitude: f64, exponent: f64 },
    /// Values per bin (`d` components each), multilinear between bin centres,
    /// zero outside the box.
    Grid { sgrid: SpatialGrid, values: Vec<f64> },
    /// `b_k = sum_m cos_m cos(f_m x_k) + sin_m sin(f_m x_k)`.
    Fourier { modes: Vec<FourierMode> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    profile: Profile,
    dim: usize,
    scale: f64,
    mollifier: Option<(Mollifier, f64)>,
    zeta: Option<f64>,
}

impl DriftSpec {
    pub fn new(profile: Profile, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("drift dimension must be positive"));
        }
        let bad = |msg: String| Err(Error::domain(msg));
        match &profile {
            Profile::Constant { value } if value.len() != dim => {
                return Err(Error::DimensionMismatch { expected: dim, got: value.len() })
            }
            Profile::GaussianBump { centre, width, .. } => {
                if centre.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: centre.len() });
                }
                if !(*width > 0.0) {
                    return bad(format!("bump width must be positive, got {width}"));
                }
            }
            Profile::Power { exponent, .. } if !(*exponent >= 0.0) => {
                return bad(format!("power exponent must be nonnegative, got {exponent}"));
            }
            Profile::Grid { sgrid, values } => {
                if sgrid.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: sgrid.dim() });
                }
                if values.len() != sgrid.total_bins() * dim {
                    return bad(format!(
                        "grid drift needs {} values, got {}",
                        sgrid.total_bins() * dim,
                        values.len()
                    ));
                }
            }
            _ => {}
        }
        Ok(Self { profile, dim, scale: 1.0, mollifier: None, zeta: None })
    }

    pub fn constant(value: Vec<f64>) -> Result<Self> {
        let d = value.len();
        Self::new(Profile::Constant { value }, d)
    }

    pub fn sine(dim: usize, amplitude: f64, frequency: f64) -> Result<Self> {
        Self::new(Profile::Sine { amplitude, frequency, phase: 0.0 }, dim)
    }

    pub fn gaussian_bump(amplitude: f64, centre: Vec<f64>, width: f64) -> Result<Self> {
        let d = centre.len();
        Self::new(Profile::GaussianBump { amplitude, centre, width }, d)
    }

    pub fn step(dim: usize, amplitude: f64, threshold: f64) -> Result<Self> {
        Self::new(Profile::Step { amplitude, threshold }, dim)
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mollifier(&self) -> Option<(Mollifier, f64)> {
        self.mollifier
    }

    pub fn zeta(&self) -> Option<f64> {
        self.zeta
    }

    /// Attach the Besov regularity tag used by condition checks.
    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = Some(zeta);
        self
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale *= factor;
        out
    }

    /// `b * rho^eps`. Mollifying twice is rejected; `eps = 0` is the identity.
    pub fn mollified(&self, shape: Mollifier, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::domain(format!("mollification width must be nonnegative, got {eps}")));
        }
        if self.mollifier.is_some() {
            return Err(Error::domain("drift is already mollified"));
        }
        if eps == 0.0 {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.mollifier = Some((shape, eps));
        if let Profile::Grid { sgrid, values } = &self.profile {
            out.profile = Profile::Grid { sgrid: sgrid.clone(), values: mollify_grid(sgrid, values, self.dim, shape, eps) };
        }
        Ok(out)
    }

    /// True when `b` is (at least) continuously differentiable.
    pub fn is_smooth(&self) -> bool {
        if self.mollifier.is_some() {
            return true;
        }
        match &self.profile {
            Profile::Constant { .. }
            | Profile::Identity
            | Profile::Sine { .. }
            | Profile::GaussianBump { .. }
            | Profile::Fourier { .. } => true,
            Profile::Power { exponent, .. } => *exponent == 1.0 || (*exponent >= 2.0 && exponent.fract() == 0.0),
            Profile::Step { .. } | Profile::Grid { .. } => false,
        }
    }

    /// `true` when `b` does not depend on `x`.
    pub fn is_constant(&self) -> bool {
        matches!(self.profile, Profile::Constant { .. })
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match self.mollifier {
            None => self.eval_raw(x, out),
            Some((shape, eps)) => self.eval_mollified(x, out, shape, eps),
        }
        if self.scale != 1.0 {
            for v in out.iter_mut() {
                *v *= self.scale;
            }
        }
    }

    pub fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval(x, &mut out);
        out
    }

    fn eval_raw(&self, x: &[f64], out: &mut [f64]) {
        match &self.profile {
            Profile::Constant { value } => out.copy_from_slice(value),
            Profile::Identity => out.copy_from_slice(x),
            Profile::Sine { amplitude, frequency, phase } => {
                for k in 0..self.dim {
                    out[k] = amplitude * (frequency * x[k] + phase).sin();
                }
            }
            Profile::GaussianBump { amplitude, centre, width } => {
                let r2: f64 = x.iter().zip(centre).map(|(a, c)| (a - c) * (a - c)).sum();
                out.fill(amplitude * (-r2 / (2.0 * width * width)).exp());
            }
            Profile::Step { amplitude, threshold } => {
                for k in 0..self.dim {
                    out[k] = if x[k] >= *threshold { *amplitude } else { 0.0 };
                }
            }
            Profile::Power { amplitude, exponent } => {
                for k in 0..self.dim {
                    out[k] = amplitude * x[k].signum() * x[k].abs().powf(*exponent);
                }
            }
            Profile::Grid { sgrid, values } => grid_interp(sgrid, values, self.dim, x, out),
            Profile::Fourier { modes } => {
                for k in 0..self.dim {
                    out[k] = modes
                        .iter()
                        .map(|m| m.cos * (m.frequency * x[k]).cos() + m.sin * (m.frequency * x[k]).sin())
                        .sum();
                }
            }
        }
    }

    fn eval_mollified(&self, x: &[f64], out: &mut [f64], shape: Mollifier, eps: f64) {
        match &self.profile {
            // Symmetric kernels preserve constants and affine maps.
            Profile::Constant { .. } | Profile::Identity | Profile::Grid { .. } => self.eval_raw(x, out),
            Profile::Sine { amplitude, frequency, phase } => {
                let damp = char_fn(shape, eps, *frequency);
                for k in 0..self.dim {
                    out[k] = amplitude * damp * (frequency * x[k] + phase).sin();
                }
            }
            Profile::Fourier { modes } => {
                for k in 0..self.dim {
                    out[k] = modes
                        .iter()
                        .map(|m| {
                            char_fn(shape, eps, m.frequency)
                                * (m.cos * (m.frequency * x[k]).cos() + m.sin * (m.frequency * x[k]).sin())
                        })
                        .sum();
                }
            }
            Profile::Step { amplitude, threshold } => {
                for k in 0..self.dim {
                    let u = (x[k] - threshold) / eps;
                    out[k] = amplitude
                        * match shape {
                            Mollifier::Gaussian => 0.5 * erfc(-u / std::f64::consts::SQRT_2),
                            Mollifier::Triangular => triangular_cdf(u),
                        };
                }
            }
            Profile::GaussianBump { amplitude, centre, width } => {
                let v = match shape {
                    Mollifier::Gaussian => {
                        let w2 = width * width + eps * eps;
                        let r2: f64 = x.iter().zip(centre).map(|(a, c)| (a - c) * (a - c)).sum();
                        let factor = (width * width / w2).powf(0.5 * self.dim as f64);
                        amplitude * factor * (-r2 / (2.0 * w2)).exp()
                    }
                    Mollifier::Triangular => {
                        let mut prod = *amplitude;
                        for (a, c) in x.iter().zip(centre) {
                            prod *= convolve_1d(|y| (-(y - c) * (y - c) / (2.0 * width * width)).exp(), *a, shape, eps);
                        }
                        prod
                    }
                };
                out.fill(v);
            }
            Profile::Power { amplitude, exponent } => {
                for k in 0..self.dim {
                    out[k] = amplitude * convolve_1d(|y| y.signum() * y.abs().powf(*exponent), x[k], shape, eps);
                }
            }
        }
    }
}

/// Fourier transform of the unit-mass kernel at frequency `f`.
fn char_fn(shape: Mollifier, eps: f64, f: f64) -> f64 {
    match shape {
        Mollifier::Gaussian => (-0.5 * (eps * f).powi(2)).exp(),
        Mollifier::Triangular => {
            let u = 0.5 * f * eps;
            if u == 0.0 {
                1.0
            } else {
                (u.sin() / u).powi(2)
            }
        }
    }
}

fn triangular_cdf(u: f64) -> f64 {
    if u <= -1.0 {
        0.0
    } else if u <= 0.0 {
        0.5 * (1.0 + u) * (1.0 + u)
    } else if u < 1.0 {
        1.0 - 0.5 * (1.0 - u) * (1.0 - u)
    } else {
        1.0
    }
}

/// Kernel density at `y` (unit mass).
pub fn kernel(shape: Mollifier, eps: f64, y: f64) -> f64 {
    match shape {
        Mollifier::Gaussian => (-0.5 * (y / eps).powi(2)).exp() / (eps * (std::f64::consts::TAU).sqrt()),
        Mollifier::Triangular => ((1.0 - y.abs() / eps) / eps).max(0.0),
    }
}

fn support(shape: Mollifier, eps: f64) -> f64 {
    match shape {
        Mollifier::Gaussian => GAUSS_CUTOFF * eps,
        Mollifier::Triangular => eps,
    }
}

/// `int f(x - y) rho(y) dy` by composite Gauss–Legendre; panel edges include
/// `y = 0` and `y = x` so kinks at the origin of `f` or of the kernel fall on
/// panel boundaries.
fn convolve_1d(f: impl Fn(f64) -> f64, x: f64, shape: Mollifier, eps: f64) -> f64 {
    let r = support(shape, eps);
    let (nodes, weights) = gauss_legendre();
    let mut edges: Vec<f64> = (0..=PANELS).map(|p| -r + 2.0 * r * p as f64 / PANELS as f64).collect();
    // Geometric grading towards y = x resolves kinks of f at the origin.
    let panel = 2.0 * r / PANELS as f64;
    for k in 0..12 {
        for e in [x - panel * 0.5f64.powi(k), x, x + panel * 0.5f64.powi(k)] {
            if e > -r && e < r {
                edges.push(e);
            }
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let mut acc = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        if half <= 0.0 {
            continue;
        }
        for (z, wt) in nodes.iter().zip(weights) {
            let y = mid + half * z;
            acc += wt * half * f(x - y) * kernel(shape, eps, y);
        }
    }
    acc
}

/// Gauss–Legendre rule on `[-1, 1]` via the Golub–Welsch eigenproblem.
fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = PANEL_POINTS;
        let jac = DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) == 1 {
                let k = i.max(j) as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| (eig.eigenvalues[j], 2.0 * eig.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pairs.into_iter().unzip()
    })
}

fn grid_interp(sgrid: &SpatialGrid, values: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let k = sgrid.bins();
    let sd = sgrid.dim();
    let mut base = [0usize; 8];
    let mut frac = [0f64; 8];
    for a in 0..sd {
        let h = sgrid.step(a);
        let pos = x[a] / h + (k / 2) as f64 - 0.5;
        if !(pos > -1.0 && pos < k as f64) {
            return;
        }
        let fl = pos.floor();
        base[a] = (fl.max(-1.0) + 1.0) as usize; // shifted by one so -1 is representable
        frac[a] = pos - fl;
    }
    // Sum over the 2^d corners; corners outside the box contribute zero.
    for corner in 0..(1usize << sd) {
        let mut weight = 1.0;
        let mut flat = 0usize;
        let mut inside = true;
        for a in 0..sd {
            let up = (corner >> a) & 1;
            let idx = base[a] + up; // shifted index
            if idx == 0 || idx > k {
                inside = false;
                break;
            }
            weight *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
            flat = flat * k + (idx - 1);
        }
        if inside && weight != 0.0 {
            for c in 0..dim {
                out[c] += weight * values[flat * dim + c];
            }
        }
    }
}

fn mollify_grid(sgrid: &SpatialGrid, values: &[f64], dim: usize, shape: Mollifier, eps: f64) -> Vec<f64> {
    let k = sgrid.bins();
    let sd = sgrid.dim();
    let shapes = sgrid.shape();
    // Kernel sampled on offsets (j - K/2) h per axis, normalised to unit mass.
    let total = sgrid.total_bins();
    let mut ker = vec![0.0; total];
    let mut idx = vec![0usize; sd];
    for (flat, v) in ker.iter_mut().enumerate() {
        sgrid.multi_index(flat, &mut idx);
        *v = (0..sd)
            .map(|a| kernel(shape, eps, (idx[a] as f64 - (k / 2) as f64) * sgrid.step(a)))
            .product();
    }
    let mass: f64 = ker.iter().sum();
    if mass > 0.0 {
        ker.iter_mut().for_each(|v| *v /= mass);
    } else {
        return values.to_vec();
    }
    let mut out = vec![0.0; values.len()];
    let padded: Vec<usize> = shapes.iter().map(|n| 2 * n).collect();
    for c in 0..dim {
        let comp: Vec<f64> = (0..total).map(|f| values[f * dim + c]).collect();
        let conv = convolve_full(&comp, &ker, &shapes);
        // Output bin m corresponds to full index m + K/2 on each axis.
        for (flat, slot) in (0..total).zip(out.chunks_mut(dim)) {
            sgrid.multi_index(flat, &mut idx);
            let mut src = 0usize;
            for a in 0..sd {
                src = src * padded[a] + idx[a] + k / 2;
            }
            slot[c] = conv[src];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(f: impl Fn(f64) -> f64, x: f64, shape: Mollifier, eps: f64) -> f64 {
        // Midpoint oracle with breaks at every kink or jump of the integrand.
        let r = support(shape, eps);
        let mut edges = vec![-r, r, 0.0, x, x - 0.1, x - 0.2];
        edges.retain(|e| e.abs() <= r);
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = 40_000;
        let mut acc = 0.0;
        for w in edges.windows(2) {
            let h = (w[1] - w[0]) / n as f64;
            acc += (0..n).map(|i| w[0] + (i as f64 + 0.5) * h).map(|y| f(x - y) * kernel(shape, eps, y) * h).sum::<f64>();
        }
        acc
    }

    #[test]
    fn catalog_values() {
        let b = DriftSpec::sine(1, 2.0, 3.0).unwrap();
        assert!((b.eval_vec(&[0.5])[0] - 2.0 * 1.5f64.sin()).abs() < 1e-15);
        let b = DriftSpec::gaussian_bump(1.0, vec![0.0, 1.0], 0.5).unwrap();
        assert!((b.eval_vec(&[0.0, 1.0])[0] - 1.0).abs() < 1e-15);
        let b = DriftSpec::step(1, 1.0, 0.0).unwrap();
        assert_eq!(b.eval_vec(&[-1e-9]), vec![0.0]);
        assert_eq!(b.eval_vec(&[0.0]), vec![1.0]);
        assert!(!b.is_smooth());
        assert!(DriftSpec::constant(vec![]).is_err());
        assert!(DriftSpec::gaussian_bump(1.0, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for shape in [Mollifier::Gaussian, Mollifier::Triangular] {
            let eps = 0.3;
            let cases: Vec<(DriftSpec, Box<dyn Fn(f64) -> f64>)> = vec![
                (DriftSpec::sine(1, 1.5, 2.0).unwrap(), Box::new(|y: f64| 1.5 * (2.0 * y).sin())),
                (DriftSpec::step(1, 2.0, 0.1).unwrap(), Box::new(|y: f64| if y >= 0.1 { 2.0 } else { 0.0 })),
                (DriftSpec::gaussian_bump(1.0, vec![0.2], 0.4).unwrap(), Box::new(|y: f64| (-(y - 0.2).powi(2) / 0.32).exp())),
                (
                    DriftSpec::new(Profile::Power { amplitude: 1.0, exponent: 0.5 }, 1).unwrap(),
                    Box::new(|y: f64| y.signum() * y.abs().sqrt()),
                ),
            ];
            for (b, f) in cases {
                let m = b.mollified(shape, eps).unwrap();
                assert!(m.is_smooth());
                for &x in &[-0.7, -0.05, 0.0, 0.13, 0.9] {
                    let got = m.eval_vec(&[x])[0];
                    let want = quad(&f, x, shape, eps);
                    assert!((got - want).abs() < 1e-6, "{shape:?} {:?} x={x}: {got} vs {want}", b.profile());
                }
            }
        }
    }

    #[test]
    fn mollification_preserves_affine() {
        let b = DriftSpec::new(Profile::Identity, 2).unwrap().mollified(Mollifier::Triangular, 0.5).unwrap();
        assert_eq!(b.eval_vec(&[0.25, -1.0]), vec![0.25, -1.0]);
        let b = DriftSpec::constant(vec![3.0]).unwrap().mollified(Mollifier::Gaussian, 0.1).unwrap();
        assert_eq!(b.eval_vec(&[7.0]), vec![3.0]);
        assert!(b.mollified(Mollifier::Gaussian, 0.1).is_err());
    }

    #[test]
    fn grid_profile_interpolates_and_mollifies() {
        let sg = SpatialGrid::new(1, 4.0, 128).unwrap();
        let values: Vec<f64> = (0..128).map(|j| sg.centre(0, j).sin()).collect();
        let b = DriftSpec::new(Profile::Grid { sgrid: sg.clone(), values }, 1).unwrap();
        assert!((b.eval_vec(&[sg.centre(0, 40)])[0] - sg.centre(0, 40).sin()).abs() < 1e-15);
        assert!((b.eval_vec(&[0.3])[0] - 0.3f64.sin()).abs() < 1e-3);
        assert_eq!(b.eval_vec(&[5.0]), vec![0.0]);
        let m = b.mollified(Mollifier::Gaussian, 0.2).unwrap();
        let want = (-0.5 * 0.04f64).exp() * 0.3f64.sin();
        assert!((m.eval_vec(&[0.3])[0] - want).abs() < 2e-3);
    }

    #[test]
    fn grid_profile_2d_bilinear_exact_on_affine() {
        let sg = SpatialGrid::new(2, 1.0, 8).unwrap();
        let mut values = vec![0.0; 64 * 2];
        let mut c = [0.0; 2];
        for f in 0..64 {
            sg.centre_of(f, &mut c);
            values[2 * f] = c[0] + 2.0 * c[1];
            values[2 * f + 1] = 1.0;
        }
        let b = DriftSpec::new(Profile::Grid { sgrid: sg, values }, 2).unwrap();
        let v = b.eval_vec(&[0.1, -0.33]);
        assert!((v[0] - (0.1 - 0.66)).abs() < 1e-14);
        assert!((v[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn scaling() {
        let b = DriftSpec::sine(1, 1.0, 1.0).unwrap().scaled(-2.0);
        assert!((b.eval_vec(&[1.0])[0] + 2.0 * 1f64.sin()).abs() < 1e-15);
    }
}
