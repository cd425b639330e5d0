//! Two-parameter Hölder seminorms and log–log exponent regression.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::rng::stream_rng;

/// Windows up to this many cells per axis get exact pairwise suprema.
pub const EXACT_CELLS: usize = 256;
/// Random pairs added to the dyadic pairs above [`EXACT_CELLS`].
pub const RANDOM_PAIRS: usize = 10_000;
const RANDOM_PAIR_SEED: u64 = 0x5EED_401D;

/// Inclusive node-index window `[i0, i1] x [j0, j1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl Window {
    pub fn full(f: &Field2D) -> Self {
        let [m1, m2] = f.grid().nodes();
        Self { i0: 0, i1: m1 - 1, j0: 0, j1: m2 - 1 }
    }

    fn validate(&self, f: &Field2D) -> Result<()> {
        let [m1, m2] = f.grid().nodes();
        if self.i1 >= m1 || self.j1 >= m2 {
            return Err(Error::domain(format!("window {self:?} exceeds grid nodes ({m1},{m2})")));
        }
        if self.i0 >= self.i1 || self.j0 >= self.j1 {
            return Err(Error::domain(format!("window {self:?} is empty")));
        }
        Ok(())
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        (self.i0..=self.i1).contains(&i) && (self.j0..=self.j1).contains(&j)
    }
}

/// Result of a single-exponent log–log fit.
#[derive(Debug, Clone, Serialize)]
pub struct AxisFit {
    /// Fitted slope; `+inf` when every increment vanished.
    pub exponent: f64,
    pub r_squared: f64,
    pub degenerate: bool,
    pub scales_used: usize,
    pub scale_range: (f64, f64),
}

/// Fit of `log M = c + g1 log d1 + g2 log d2` for mixed increments.
#[derive(Debug, Clone, Serialize)]
pub struct MixedFit {
    pub exponents: (f64, f64),
    pub r_squared: f64,
    pub degenerate: bool,
    pub scales_used: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentFit {
    pub axis1: AxisFit,
    pub axis2: AxisFit,
    pub mixed: MixedFit,
    pub levels: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HolderReport {
    pub alpha: [f64; 2],
    pub seminorm_10: f64,
    pub seminorm_01: f64,
    pub seminorm_11: f64,
    /// True when the suprema ran over every node pair of the window.
    pub exact: bool,
    pub fitted: Option<ExponentFit>,
}

impl HolderReport {
    pub fn total(&self) -> f64 {
        self.seminorm_10 + self.seminorm_01 + self.seminorm_11
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rect_norm(f: &Field2D, s: (usize, usize), t: (usize, usize), buf: &mut [f64]) -> f64 {
    f.rect_increment_into(s, t, buf);
    norm(buf)
}

/// The three Hölder seminorms of `f` over `window` for exponent pair `alpha`.
///
/// Windows with at most [`EXACT_CELLS`] cells per axis are scanned over all
/// node pairs. Larger windows use every pair whose separations are powers of
/// two, plus [`RANDOM_PAIRS`] pairs drawn from the whole grid with a fixed
/// seed and filtered to the window, so enlarging the window never shrinks the
/// candidate set.
pub fn holder_seminorms(f: &Field2D, alpha: [f64; 2], window: Option<Window>) -> Result<HolderReport> {
    if !(alpha[0] > 0.0 && alpha[0] < 1.0 && alpha[1] > 0.0 && alpha[1] < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0,1)^2, got {alpha:?}")));
    }
    let w = window.unwrap_or_else(|| Window::full(f));
    w.validate(f)?;
    let [h1, h2] = f.grid().steps();
    let exact = w.i1 - w.i0 <= EXACT_CELLS && w.j1 - w.j0 <= EXACT_CELLS;

    let (s10, s01, s11) = if exact {
        exact_suprema(f, alpha, &w, h1, h2)
    } else {
        sampled_suprema(f, alpha, &w, h1, h2)
    };

    let available = {
        let c1 = (w.i1 - w.i0).ilog2();
        let c2 = (w.j1 - w.j0).ilog2();
        c1.min(c2)
    };
    let fitted = if available >= 3 {
        let [n1, n2] = f.grid().levels();
        let nmax = n1.min(n2);
        let lo = nmax.saturating_sub(available).max(1);
        let levels: Vec<u32> = (lo..=nmax).collect();
        if levels.len() >= 3 {
            Some(fit_exponents(f, &levels, &w)?)
        } else {
            None
        }
    } else {
        None
    };

    Ok(HolderReport { alpha, seminorm_10: s10, seminorm_01: s01, seminorm_11: s11, exact, fitted })
}

fn exact_suprema(f: &Field2D, alpha: [f64; 2], w: &Window, h1: f64, h2: f64) -> (f64, f64, f64) {
    let d = f.dim();
    let mut s10: f64 = 0.0;
    for i in w.i0..=w.i1 {
        for k in i + 1..=w.i1 {
            let den = ((k - i) as f64 * h1).powf(alpha[0]);
            for j in w.j0..=w.j1 {
                s10 = s10.max(diff_norm(f.get(k, j), f.get(i, j)) / den);
            }
        }
    }
    let mut s01: f64 = 0.0;
    for j in w.j0..=w.j1 {
        for l in j + 1..=w.j1 {
            let den = ((l - j) as f64 * h2).powf(alpha[1]);
            for i in w.i0..=w.i1 {
                s01 = s01.max(diff_norm(f.get(i, l), f.get(i, j)) / den);
            }
        }
    }
    let pow2: Vec<f64> = (0..=w.j1 - w.j0).map(|k| (k as f64 * h2).powf(alpha[1])).collect();
    let mut s11: f64 = 0.0;
    let mut col = vec![0.0; (w.j1 - w.j0 + 1) * d];
    for i in w.i0..=w.i1 {
        for k in i + 1..=w.i1 {
            let den1 = ((k - i) as f64 * h1).powf(alpha[0]);
            for (jj, j) in (w.j0..=w.j1).enumerate() {
                let (a, b) = (f.get(k, j), f.get(i, j));
                for c in 0..d {
                    col[jj * d + c] = a[c] - b[c];
                }
            }
            let m = w.j1 - w.j0;
            for a in 0..=m {
                for b in a + 1..=m {
                    let v = diff_norm(&col[b * d..(b + 1) * d], &col[a * d..(a + 1) * d]);
                    s11 = s11.max(v / (den1 * pow2[b - a]));
                }
            }
        }
    }
    (s10, s01, s11)
}

fn sampled_suprema(f: &Field2D, alpha: [f64; 2], w: &Window, h1: f64, h2: f64) -> (f64, f64, f64) {
    let d = f.dim();
    let mut buf = vec![0.0; d];
    let (mut s10, mut s01, mut s11): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let seps = |len: usize| -> Vec<usize> {
        let mut v = Vec::new();
        let mut k = 1;
        while k <= len {
            v.push(k);
            k *= 2;
        }
        v
    };
    let seps1 = seps(w.i1 - w.i0);
    let seps2 = seps(w.j1 - w.j0);
    for &a in &seps1 {
        let den = (a as f64 * h1).powf(alpha[0]);
        for i in w.i0..=w.i1 - a {
            for j in w.j0..=w.j1 {
                s10 = s10.max(diff_norm(f.get(i + a, j), f.get(i, j)) / den);
            }
        }
    }
    for &b in &seps2 {
        let den = (b as f64 * h2).powf(alpha[1]);
        for i in w.i0..=w.i1 {
            for j in w.j0..=w.j1 - b {
                s01 = s01.max(diff_norm(f.get(i, j + b), f.get(i, j)) / den);
            }
        }
    }
    for &a in &seps1 {
        for &b in &seps2 {
            let den = (a as f64 * h1).powf(alpha[0]) * (b as f64 * h2).powf(alpha[1]);
            for i in w.i0..=w.i1 - a {
                for j in w.j0..=w.j1 - b {
                    s11 = s11.max(rect_norm(f, (i, j), (i + a, j + b), &mut buf) / den);
                }
            }
        }
    }
    let [m1, m2] = f.grid().nodes();
    let mut rng = stream_rng(RANDOM_PAIR_SEED, 0);
    for _ in 0..RANDOM_PAIRS {
        let (mut i, mut k) = (rng.gen_range(0..m1), rng.gen_range(0..m1));
        let (mut j, mut l) = (rng.gen_range(0..m2), rng.gen_range(0..m2));
        if i > k {
            std::mem::swap(&mut i, &mut k);
        }
        if j > l {
            std::mem::swap(&mut j, &mut l);
        }
        if !(w.contains(i, j) && w.contains(k, l)) {
            continue;
        }
        if k > i {
            let den = ((k - i) as f64 * h1).powf(alpha[0]);
            s10 = s10.max(diff_norm(f.get(k, j), f.get(i, j)) / den);
        }
        if l > j {
            let den = ((l - j) as f64 * h2).powf(alpha[1]);
            s01 = s01.max(diff_norm(f.get(i, l), f.get(i, j)) / den);
        }
        if k > i && l > j {
            let den = ((k - i) as f64 * h1).powf(alpha[0]) * ((l - j) as f64 * h2).powf(alpha[1]);
            s11 = s11.max(rect_norm(f, (i, j), (k, l), &mut buf) / den);
        }
    }
    (s10, s01, s11)
}

/// Log–log regression of max-over-position increments against dyadic scale.
///
/// `levels` are dyadic levels `l`; along axis `k` the separation is
/// `T_k / 2^l`, which must be a whole number of grid steps.
pub fn estimate_holder_exponents(f: &Field2D, levels: &[u32]) -> Result<ExponentFit> {
    fit_exponents(f, levels, &Window::full(f))
}

fn fit_exponents(f: &Field2D, levels: &[u32], w: &Window) -> Result<ExponentFit> {
    if levels.len() < 3 {
        return Err(Error::domain(format!("need at least 3 scales, got {}", levels.len())));
    }
    let [n1, n2] = f.grid().levels();
    let [h1, h2] = f.grid().steps();
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    if let Some(&l) = levels.iter().find(|&&l| l > n1.min(n2) || l == 0) {
        return Err(Error::domain(format!("scale level {l} not resolvable on a level ({n1},{n2}) grid")));
    }
    let sep1: Vec<usize> = levels.iter().map(|&l| 1usize << (n1 - l)).collect();
    let sep2: Vec<usize> = levels.iter().map(|&l| 1usize << (n2 - l)).collect();
    if sep1.iter().any(|&s| s > w.i1 - w.i0) || sep2.iter().any(|&s| s > w.j1 - w.j0) {
        return Err(Error::domain("scale separation exceeds the window"));
    }
    let d = f.dim();
    let floor = 1e-13 * (1.0 + f.sup_norm());

    let m1: Vec<f64> = sep1
        .iter()
        .map(|&a| {
            let mut m: f64 = 0.0;
            for i in w.i0..=w.i1 - a {
                for j in w.j0..=w.j1 {
                    m = m.max(diff_norm(f.get(i + a, j), f.get(i, j)));
                }
            }
            m
        })
        .collect();
    let m2: Vec<f64> = sep2
        .iter()
        .map(|&b| {
            let mut m: f64 = 0.0;
            for i in w.i0..=w.i1 {
                for j in w.j0..=w.j1 - b {
                    m = m.max(diff_norm(f.get(i, j + b), f.get(i, j)));
                }
            }
            m
        })
        .collect();
    let mut mixed = Vec::with_capacity(sep1.len() * sep2.len());
    let mut buf = vec![0.0; d];
    for &a in &sep1 {
        for &b in &sep2 {
            let mut m: f64 = 0.0;
            for i in w.i0..=w.i1 - a {
                for j in w.j0..=w.j1 - b {
                    m = m.max(rect_norm(f, (i, j), (i + a, j + b), &mut buf));
                }
            }
            mixed.push((a as f64 * h1, b as f64 * h2, m));
        }
    }

    let d1: Vec<f64> = sep1.iter().map(|&a| a as f64 * h1).collect();
    let d2: Vec<f64> = sep2.iter().map(|&b| b as f64 * h2).collect();
    Ok(ExponentFit {
        axis1: axis_fit(&d1, &m1, floor),
        axis2: axis_fit(&d2, &m2, floor),
        mixed: mixed_fit(&mixed, floor),
        levels,
    })
}

/// Ordinary least squares slope, intercept and R^2.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

fn axis_fit(scales: &[f64], maxima: &[f64], floor: f64) -> AxisFit {
    // scales are ascending in level, i.e. descending in separation
    let mut pts: Vec<(f64, f64)> = scales
        .iter()
        .zip(maxima)
        .filter(|(_, &m)| m > floor)
        .map(|(&s, &m)| (s, m))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // noise floor: the two finest separations agree within 1%
    if pts.len() >= 5 && (pts[0].1 / pts[1].1 - 1.0).abs() < 0.01 {
        pts.drain(0..2);
    }
    if pts.len() < 3 {
        return AxisFit {
            exponent: f64::INFINITY,
            r_squared: f64::NAN,
            degenerate: true,
            scales_used: pts.len(),
            scale_range: (f64::NAN, f64::NAN),
        };
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (slope, _, r2) = linear_fit(&x, &y);
    AxisFit {
        exponent: slope,
        r_squared: r2,
        degenerate: false,
        scales_used: pts.len(),
        scale_range: (pts[0].0, pts[pts.len() - 1].0),
    }
}

fn mixed_fit(samples: &[(f64, f64, f64)], floor: f64) -> MixedFit {
    let pts: Vec<_> = samples.iter().filter(|p| p.2 > floor).collect();
    if pts.len() < 4 {
        return MixedFit {
            exponents: (f64::INFINITY, f64::INFINITY),
            r_squared: f64::NAN,
            degenerate: true,
            scales_used: pts.len(),
        };
    }
    let a = DMatrix::from_fn(pts.len(), 3, |r, c| match c {
        0 => 1.0,
        1 => pts[r].0.ln(),
        _ => pts[r].1.ln(),
    });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.2.ln()));
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-12).expect("svd solve");
    let resid = &a * &coef - &b;
    let mean = b.mean();
    let ss_tot: f64 = b.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res: f64 = resid.iter().map(|v| v * v).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    MixedFit { exponents: (coef[1], coef[2]), r_squared: r2, degenerate: false, scales_used: pts.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2D;

    #[test]
    fn product_seminorm() {
        let f = Field2D::from_fn(Grid2D::unit(4), 1, |t, o| o[0] = t[0] * t[1]).unwrap();
        let r = holder_seminorms(&f, [0.5, 0.5], None).unwrap();
        assert!((r.seminorm_11 - 1.0).abs() < 1e-14, "{}", r.seminorm_11);
        assert!(r.exact);
    }

    #[test]
    fn constant_field_is_flat() {
        let f = Field2D::from_fn(Grid2D::unit(4), 2, |_, o| o.fill(3.5)).unwrap();
        let r = holder_seminorms(&f, [0.3, 0.7], None).unwrap();
        assert_eq!((r.seminorm_10, r.seminorm_01, r.seminorm_11), (0.0, 0.0, 0.0));
    }

    #[test]
    fn power_in_first_variable() {
        let f = Field2D::from_fn(Grid2D::unit(8), 1, |t, o| o[0] = t[0].powf(0.3)).unwrap();
        let r = holder_seminorms(&f, [0.5, 0.5], None).unwrap();
        let fit = r.fitted.unwrap();
        assert!((fit.axis1.exponent - 0.3).abs() < 0.05, "{}", fit.axis1.exponent);
        assert!(r.seminorm_11 < 1e-12);
        assert!(fit.mixed.degenerate);
    }

    #[test]
    fn separable_power_fit() {
        let f = Field2D::from_fn(Grid2D::unit(8), 1, |t, o| o[0] = t[0].powf(0.7) * t[1].powf(0.6)).unwrap();
        let fit = estimate_holder_exponents(&f, &[2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!((fit.mixed.exponents.0 - 0.7).abs() < 0.05);
        assert!((fit.mixed.exponents.1 - 0.6).abs() < 0.05);
    }

    #[test]
    fn zero_field_sentinel() {
        let f = Field2D::zeros(Grid2D::unit(5), 1);
        let fit = estimate_holder_exponents(&f, &[2, 3, 4, 5]).unwrap();
        assert!(fit.axis1.degenerate && fit.axis1.exponent == f64::INFINITY);
        assert!(fit.axis2.degenerate && fit.mixed.degenerate);
    }

    #[test]
    fn errors() {
        let f = Field2D::zeros(Grid2D::unit(3), 1);
        assert!(holder_seminorms(&f, [1.0, 0.5], None).is_err());
        let w = Window { i0: 2, i1: 2, j0: 0, j1: 3 };
        assert!(holder_seminorms(&f, [0.5, 0.5], Some(w)).is_err());
        assert!(estimate_holder_exponents(&f, &[1, 2]).is_err());
    }

    #[test]
    fn sampled_strategy_matches_exact_on_product() {
        // 2^9 cells forces the sampled path; the sup sits at the full square
        let f = Field2D::from_fn(Grid2D::new(1.0, 1.0, 9, 2).unwrap(), 1, |t, o| o[0] = t[0] * t[1]).unwrap();
        let r = holder_seminorms(&f, [0.5, 0.5], None).unwrap();
        assert!(!r.exact);
        assert!((r.seminorm_11 - 1.0).abs() < 1e-12);
    }
}
