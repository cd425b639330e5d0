//! Two-parameter sewing and the nonlinear Young integral.
//!
//! A germ `Xi_{s,t}` is summed over dyadic partitions of a target rectangle;
//! the partial sums `I_n` (level `n` on both axes) converge to the sewn value
//! when the defects `delta^1 Xi`, `delta^2 Xi` and `delta^1 delta^2 Xi` are of
//! order greater than one in time.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{additive_distance, mixed_distance, Field2D, Grid2D};
use crate::holder::{holder_seminorms, linear_fit};
use crate::rng::stream_rng;

/// Default finest dyadic level of [`sew`].
pub const DEFAULT_MAX_LEVEL: u32 = 12;
/// Default relative tolerance on level differences.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Finest level at which the sewn value field is stored.
pub const FIELD_LEVEL: u32 = 10;
const CONFIRM_LEVELS: usize = 3;
const DEFECT_SAMPLES: usize = 1000;

/// Claimed regularity of a time-indexed field: `C^gamma` in time with values
/// in `C^{1+eta}` in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldExponents {
    pub gamma: [f64; 2],
    pub eta: f64,
}

/// A map `(t, x) -> A(t, x)` with rectangular increments in `t`.
pub trait TimeIndexedField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]);

    /// `box_{s,t} A(x)`.
    fn rect_increment(&self, s: [f64; 2], t: [f64; 2], x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut buf = vec![0.0; 3 * d];
        let (b, rest) = buf.split_at_mut(d);
        let (c, e) = rest.split_at_mut(d);
        self.eval(t, x, out);
        self.eval([t[0], s[1]], x, b);
        self.eval([s[0], t[1]], x, c);
        self.eval(s, x, e);
        for k in 0..d {
            out[k] = (out[k] - b[k]) - (c[k] - e[k]);
        }
    }

    /// Time grid on which the field is natively known, if any.
    fn native_grid(&self) -> Option<Grid2D> {
        None
    }

    fn exponents(&self) -> Option<FieldExponents> {
        None
    }
}

impl<T: TimeIndexedField + ?Sized> TimeIndexedField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]) {
        (**self).eval(t, x, out)
    }
    fn rect_increment(&self, s: [f64; 2], t: [f64; 2], x: &[f64], out: &mut [f64]) {
        (**self).rect_increment(s, t, x, out)
    }
    fn native_grid(&self) -> Option<Grid2D> {
        (**self).native_grid()
    }
    fn exponents(&self) -> Option<FieldExponents> {
        (**self).exponents()
    }
}

impl<T: TimeIndexedField + ?Sized> TimeIndexedField for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]) {
        (**self).eval(t, x, out)
    }
    fn rect_increment(&self, s: [f64; 2], t: [f64; 2], x: &[f64], out: &mut [f64]) {
        (**self).rect_increment(s, t, x, out)
    }
    fn native_grid(&self) -> Option<Grid2D> {
        (**self).native_grid()
    }
    fn exponents(&self) -> Option<FieldExponents> {
        (**self).exponents()
    }
}

/// Closure-backed field `A(t, x) = f(t, x)`.
#[derive(Clone)]
pub struct FnField<F> {
    dim: usize,
    f: F,
    exponents: Option<FieldExponents>,
}

impl<F: Fn([f64; 2], &[f64], &mut [f64]) + Send + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, exponents: None }
    }

    pub fn with_exponents(mut self, e: FieldExponents) -> Self {
        self.exponents = Some(e);
        self
    }
}

impl<F: Fn([f64; 2], &[f64], &mut [f64]) + Send + Sync> TimeIndexedField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]) {
        (self.f)(t, x, out)
    }
    fn exponents(&self) -> Option<FieldExponents> {
        self.exponents
    }
}

/// `c * A`.
#[derive(Debug, Clone)]
pub struct ScaledField<A> {
    pub inner: A,
    pub factor: f64,
}

impl<A: TimeIndexedField> TimeIndexedField for ScaledField<A> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]) {
        self.inner.eval(t, x, out);
        out.iter_mut().for_each(|v| *v *= self.factor);
    }
    fn rect_increment(&self, s: [f64; 2], t: [f64; 2], x: &[f64], out: &mut [f64]) {
        self.inner.rect_increment(s, t, x, out);
        out.iter_mut().for_each(|v| *v *= self.factor);
    }
    fn native_grid(&self) -> Option<Grid2D> {
        self.inner.native_grid()
    }
    fn exponents(&self) -> Option<FieldExponents> {
        self.inner.exponents()
    }
}

/// `A + B`.
#[derive(Debug, Clone)]
pub struct SumField<A, B>(pub A, pub B);

impl<A: TimeIndexedField, B: TimeIndexedField> TimeIndexedField for SumField<A, B> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, t: [f64; 2], x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.0.eval(t, x, out);
        self.1.eval(t, x, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    }
    fn rect_increment(&self, s: [f64; 2], t: [f64; 2], x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.0.rect_increment(s, t, x, out);
        self.1.rect_increment(s, t, x, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    }
    fn native_grid(&self) -> Option<Grid2D> {
        match (self.0.native_grid(), self.1.native_grid()) {
            (Some(a), Some(b)) => Some(if a.cells()[0] >= b.cells()[0] { b } else { a }),
            (a, b) => a.or(b),
        }
    }
}

/// Claimed germ regularity: `Xi in C_2^{alpha,beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GermExponents {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
}

/// A rectangle-indexed increment candidate `(s, t) -> Xi_{s,t}`.
///
/// Implementations must return zero on degenerate rectangles.
pub trait Germ: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, s: [f64; 2], t: [f64; 2], out: &mut [f64]);
    fn exponents(&self) -> Option<GermExponents> {
        None
    }
}

/// Closure-backed germ.
pub struct FnGerm<F> {
    dim: usize,
    f: F,
    exponents: Option<GermExponents>,
}

impl<F: Fn([f64; 2], [f64; 2], &mut [f64]) + Send + Sync> FnGerm<F> {
    /// Wraps `f`, rejecting it if it is non-zero on sampled degenerate rectangles.
    pub fn new(dim: usize, f: F) -> Result<Self> {
        let g = Self { dim, f, exponents: None };
        let pts = [0.0, 0.125, 0.3, 0.5, 0.77, 1.0];
        let mut out = vec![0.0; dim];
        for &a in &pts {
            for &b in &pts {
                for &c in &pts {
                    for (s, t) in [([a, b], [a, c]), ([b, a], [c, a])] {
                        out.fill(0.0);
                        (g.f)(s, t, &mut out);
                        if out.iter().any(|v| *v != 0.0) {
                            return Err(Error::domain(format!(
                                "germ is non-zero on the degenerate rectangle {s:?} -> {t:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn with_exponents(mut self, e: GermExponents) -> Self {
        self.exponents = Some(e);
        self
    }
}

impl<F: Fn([f64; 2], [f64; 2], &mut [f64]) + Send + Sync> Germ for FnGerm<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, s: [f64; 2], t: [f64; 2], out: &mut [f64]) {
        (self.f)(s, t, out)
    }
    fn exponents(&self) -> Option<GermExponents> {
        self.exponents
    }
}

/// A non-degenerate time rectangle `[s, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Rect {
    pub s: [f64; 2],
    pub t: [f64; 2],
}

impl Rect {
    pub fn new(s: [f64; 2], t: [f64; 2]) -> Result<Self> {
        if !(s[0] < t[0] && s[1] < t[1]) || s.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("rectangle needs s < t componentwise, got {s:?} -> {t:?}")));
        }
        Ok(Self { s, t })
    }

    pub fn unit() -> Self {
        Self { s: [0.0, 0.0], t: [1.0, 1.0] }
    }

    /// `[0, T]` for the horizons of `grid`.
    pub fn of_grid(grid: &Grid2D) -> Self {
        Self { s: [0.0, 0.0], t: grid.horizons() }
    }

    pub fn span(&self) -> [f64; 2] {
        [self.t[0] - self.s[0], self.t[1] - self.s[1]]
    }

    /// Node `k` of the level-`n` dyadic partition of axis `axis`; exact at both ends.
    #[inline]
    pub fn node(&self, axis: usize, k: usize, n: u32) -> f64 {
        let cells = 1usize << n;
        if k >= cells {
            self.t[axis]
        } else {
            self.s[axis] + (self.t[axis] - self.s[axis]) * (k as f64 / cells as f64)
        }
    }
}

fn check_triple(s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Result<()> {
    if (0..2).all(|k| s[k] < u[k] && u[k] < t[k]) {
        Ok(())
    } else {
        Err(Error::domain(format!("defect needs s < u < t, got {s:?}, {u:?}, {t:?}")))
    }
}

fn germ_vec(g: &(impl Germ + ?Sized), s: [f64; 2], t: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; g.dim()];
    g.eval(s, t, &mut out);
    out
}

fn delta1_raw(f: &dyn Fn([f64; 2], [f64; 2]) -> Vec<f64>, s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Vec<f64> {
    let a = f(s, t);
    let b = f(s, [u[0], t[1]]);
    let c = f([u[0], s[1]], t);
    a.iter().zip(&b).zip(&c).map(|((a, b), c)| a - b - c).collect()
}

fn delta2_raw(f: &dyn Fn([f64; 2], [f64; 2]) -> Vec<f64>, s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Vec<f64> {
    let a = f(s, t);
    let b = f(s, [t[0], u[1]]);
    let c = f([s[0], u[1]], t);
    a.iter().zip(&b).zip(&c).map(|((a, b), c)| a - b - c).collect()
}

/// `delta^1_u Xi_{s,t} = Xi_{s,t} - Xi_{s,(u1,t2)} - Xi_{(u1,s2),t}`.
pub fn delta1(germ: &(impl Germ + ?Sized), s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Result<Vec<f64>> {
    check_triple(s, u, t)?;
    Ok(delta1_raw(&|a, b| germ_vec(germ, a, b), s, u, t))
}

/// `delta^2_u Xi_{s,t} = Xi_{s,t} - Xi_{s,(t1,u2)} - Xi_{(s1,u2),t}`.
pub fn delta2(germ: &(impl Germ + ?Sized), s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Result<Vec<f64>> {
    check_triple(s, u, t)?;
    Ok(delta2_raw(&|a, b| germ_vec(germ, a, b), s, u, t))
}

/// `delta^1 (delta^2 Xi)`, with the same split point on both axes.
pub fn delta12(germ: &(impl Germ + ?Sized), s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Result<Vec<f64>> {
    check_triple(s, u, t)?;
    let inner = |a: [f64; 2], b: [f64; 2]| delta2_raw(&|x, y| germ_vec(germ, x, y), a, [u[0], u[1]], b);
    Ok(delta1_raw(&inner, s, u, t))
}

/// `delta^2 (delta^1 Xi)`; equal to [`delta12`] up to rounding.
pub fn delta21(germ: &(impl Germ + ?Sized), s: [f64; 2], u: [f64; 2], t: [f64; 2]) -> Result<Vec<f64>> {
    check_triple(s, u, t)?;
    let inner = |a: [f64; 2], b: [f64; 2]| delta1_raw(&|x, y| germ_vec(germ, x, y), a, u, b);
    Ok(delta2_raw(&inner, s, u, t))
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Block sums of the level-`n` partial sum over `2^v1 x 2^v2` blocks.
///
/// Each block is reduced with a pairwise tree in a fixed order, so the
/// result does not depend on the thread count.
pub(crate) fn block_sums(germ: &(impl Germ + ?Sized), rect: &Rect, n: [u32; 2], v: [u32; 2]) -> Vec<f64> {
    let d = germ.dim();
    let (b1, b2) = (1usize << v[0], 1usize << v[1]);
    let (r1, r2) = (1usize << (n[0] - v[0]), 1usize << (n[1] - v[1]));
    let rows: Vec<Vec<f64>> = (0..b1)
        .into_par_iter()
        .map(|bi| {
            let mut row = vec![0.0; b2 * d];
            let mut cell = vec![0.0; d];
            let mut comps = vec![Vec::with_capacity(r1 * r2); d];
            for bj in 0..b2 {
                comps.iter_mut().for_each(Vec::clear);
                for i in bi * r1..(bi + 1) * r1 {
                    let (s1, t1) = (rect.node(0, i, n[0]), rect.node(0, i + 1, n[0]));
                    for j in bj * r2..(bj + 1) * r2 {
                        let (s2, t2) = (rect.node(1, j, n[1]), rect.node(1, j + 1, n[1]));
                        germ.eval([s1, s2], [t1, t2], &mut cell);
                        for c in 0..d {
                            comps[c].push(cell[c]);
                        }
                    }
                }
                for c in 0..d {
                    row[bj * d + c] = pairwise_sum(&comps[c]);
                }
            }
            row
        })
        .collect();
    rows.concat()
}

fn total_of_blocks(blocks: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let comp: Vec<f64> = blocks.iter().skip(c).step_by(d).copied().collect();
            pairwise_sum(&comp)
        })
        .collect()
}

/// Level-`(n1, n2)` dyadic partial sum of the germ over `rect`.
pub fn partial_sum(germ: &(impl Germ + ?Sized), rect: &Rect, n: [u32; 2]) -> Vec<f64> {
    let v = [n[0].min(6), n[1].min(6)];
    total_of_blocks(&block_sums(germ, rect, n, v), germ.dim())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SewOptions {
    pub max_level: u32,
    pub tol: f64,
    /// Level of the stored value field (capped by the final level).
    pub field_level: u32,
    /// Random `(s, u, t)` triples for the defect diagnostics; 0 disables them.
    pub defect_samples: usize,
    /// Level at which per-axis orders are measured; `None` skips them.
    pub axis_order_level: Option<u32>,
}

impl Default for SewOptions {
    fn default() -> Self {
        Self {
            max_level: DEFAULT_MAX_LEVEL,
            tol: DEFAULT_TOL,
            field_level: FIELD_LEVEL,
            defect_samples: DEFECT_SAMPLES,
            axis_order_level: Some(6),
        }
    }
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRow {
    pub level: u32,
    pub value: Vec<f64>,
    /// `|I_n - I_{n-1}|`; NaN at level 0.
    pub diff_norm: f64,
    /// `log2(diff_{n-1} / diff_n)`; NaN where undefined.
    pub observed_order: f64,
}

/// Maxima of the sampled defects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DefectStats {
    pub samples: usize,
    pub max_delta1: f64,
    pub max_delta2: f64,
    pub max_delta12: f64,
}

#[derive(Debug, Clone)]
pub struct SewingResult {
    pub rect: Rect,
    pub value: Vec<f64>,
    /// `t -> I_{[rect.s, rect.s + t]}` on the dyadic grid of the rectangle.
    pub field: Field2D,
    pub levels: Vec<LevelRow>,
    pub final_level: u32,
    pub converged: bool,
    /// Median of the finite orders over the last three levels.
    pub observed_order: f64,
    pub axis_orders: Option<[f64; 2]>,
    /// Last level difference, an estimate of the remaining error.
    pub residual_estimate: f64,
    /// Smallest `C` with `|I_{[u,v]} - Xi_{u,v}| <= C m(v-u)^alpha |v-u|^{beta-alpha}`
    /// over dyadic sub-rectangles, when exponents are known.
    pub fitted_constant: Option<f64>,
    pub defects: Option<DefectStats>,
}

impl SewingResult {
    /// CSV with columns `level,value_1..value_d,diff_norm,observed_order`.
    pub fn write_level_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        let d = self.value.len();
        let mut head = vec!["level".to_string()];
        head.extend((1..=d).map(|k| format!("value_{k}")));
        head.push("diff_norm".into());
        head.push("observed_order".into());
        writeln!(out, "{}", head.join(","))?;
        for r in &self.levels {
            write!(out, "{}", r.level)?;
            for v in &r.value {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out, ",{:.16e},{:.16e}", r.diff_norm, r.observed_order)?;
        }
        Ok(())
    }
}

fn prefix_field(blocks: &[f64], v: [u32; 2], rect: &Rect, d: usize) -> Result<Field2D> {
    let span = rect.span();
    let grid = Grid2D::new(span[0], span[1], v[0], v[1])?;
    let [m1, m2] = grid.nodes();
    let c2 = m2 - 1;
    let mut vals = vec![0.0; m1 * m2 * d];
    for i in 1..m1 {
        for j in 1..m2 {
            for c in 0..d {
                let at = |a: usize, b: usize| (a * m2 + b) * d + c;
                vals[at(i, j)] =
                    vals[at(i - 1, j)] + vals[at(i, j - 1)] - vals[at(i - 1, j - 1)] + blocks[((i - 1) * c2 + j - 1) * d + c];
            }
        }
    }
    Field2D::new(grid, d, vals)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Per-axis orders from refining one axis at a time around level `k`.
pub fn axis_orders(germ: &(impl Germ + ?Sized), rect: &Rect, k: u32) -> [f64; 2] {
    let k = k.max(1);
    let base = partial_sum(germ, rect, [k, k]);
    [0, 1].map(|axis| {
        let mut lo = [k, k];
        lo[axis] -= 1;
        let mut hi = [k, k];
        hi[axis] += 1;
        let a = diff_norm(&base, &partial_sum(germ, rect, lo));
        let b = diff_norm(&partial_sum(germ, rect, hi), &base);
        (a / b).log2()
    })
}

/// Sews `germ` over `rect` through dyadic refinement.
pub fn sew(germ: &(impl Germ + ?Sized), rect: &Rect, opts: &SewOptions) -> Result<SewingResult> {
    let d = germ.dim();
    let mut levels: Vec<LevelRow> = Vec::new();
    let mut last_blocks = Vec::new();
    let mut last_v = [0, 0];
    let mut converged = false;
    let mut small_run = 0usize;
    let mut bad_run = 0usize;
    for n in 0..=opts.max_level {
        let v = [n.min(opts.field_level); 2];
        let blocks = block_sums(germ, rect, [n, n], v);
        let value = total_of_blocks(&blocks, d);
        let (diff, order) = match levels.last() {
            None => (f64::NAN, f64::NAN),
            Some(prev) => {
                let diff = diff_norm(&value, &prev.value);
                let order = if prev.diff_norm.is_finite() && prev.diff_norm > 0.0 && diff > 0.0 {
                    (prev.diff_norm / diff).log2()
                } else {
                    f64::NAN
                };
                (diff, order)
            }
        };
        let scale = opts.tol * (1.0 + norm(&value));
        if diff.is_finite() {
            if diff < scale {
                small_run += 1;
                bad_run = 0;
            } else {
                small_run = 0;
                if order.is_finite() && order <= 0.0 {
                    bad_run += 1;
                } else {
                    bad_run = 0;
                }
            }
        }
        levels.push(LevelRow { level: n, value, diff_norm: diff, observed_order: order });
        last_blocks = blocks;
        last_v = v;
        if bad_run >= CONFIRM_LEVELS {
            let table: Vec<String> =
                levels.iter().map(|r| format!("n={} diff={:.3e} order={:.3}", r.level, r.diff_norm, r.observed_order)).collect();
            return Err(Error::Divergence { diagnostics: table.join("; ") });
        }
        if small_run >= CONFIRM_LEVELS {
            converged = true;
            break;
        }
    }
    let last = levels.last().expect("at least level 0");
    let final_level = last.level;
    let value = last.value.clone();
    let residual_estimate = if last.diff_norm.is_finite() { last.diff_norm } else { 0.0 };
    let observed_order = median(levels.iter().rev().take(3).map(|r| r.observed_order).collect());
    let field = prefix_field(&last_blocks, last_v, rect, d)?;
    let axis_orders = match opts.axis_order_level {
        Some(k) if !converged || final_level > k => Some(axis_orders(germ, rect, k.min(opts.max_level))),
        _ => None,
    };
    let fitted_constant = germ.exponents().map(|e| fit_constant(germ, rect, &field, e));
    let defects = (opts.defect_samples > 0).then(|| defect_stats(germ, rect, opts.defect_samples));
    Ok(SewingResult {
        rect: *rect,
        value,
        field,
        levels,
        final_level,
        converged,
        observed_order,
        axis_orders,
        residual_estimate,
        fitted_constant,
        defects,
    })
}

fn fit_constant(germ: &(impl Germ + ?Sized), rect: &Rect, field: &Field2D, e: GermExponents) -> f64 {
    let [v1, v2] = field.grid().levels();
    let top = v1.min(v2).min(4);
    let mut best: f64 = 0.0;
    let mut xi = vec![0.0; germ.dim()];
    for k in 0..=top {
        let (r1, r2) = (1usize << (v1 - k), 1usize << (v2 - k));
        for a in 0..(1usize << k) {
            for b in 0..(1usize << k) {
                let (s, t) = ((a * r1, b * r2), ((a + 1) * r1, (b + 1) * r2));
                let sewn = field.rect_increment_nodes(s, t);
                let ts = [rect.node(0, a, k), rect.node(1, b, k)];
                let tt = [rect.node(0, a + 1, k), rect.node(1, b + 1, k)];
                germ.eval(ts, tt, &mut xi);
                let beta_minus = [e.beta[0] - e.alpha[0], e.beta[1] - e.alpha[1]];
                let scale = mixed_distance(ts, tt, e.alpha) * additive_distance(ts, tt, beta_minus);
                best = best.max(diff_norm(&sewn, &xi) / scale);
            }
        }
    }
    best
}

fn defect_stats(germ: &(impl Germ + ?Sized), rect: &Rect, samples: usize) -> DefectStats {
    use rand::Rng;
    let mut rng = stream_rng(0x00DE_FEC7, 0);
    let mut stats = DefectStats { samples, max_delta1: 0.0, max_delta2: 0.0, max_delta12: 0.0 };
    for _ in 0..samples {
        let mut s = [0.0; 2];
        let mut u = [0.0; 2];
        let mut t = [0.0; 2];
        for k in 0..2 {
            let mut p: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            p.sort_by(|a, b| a.total_cmp(b));
            let span = rect.t[k] - rect.s[k];
            s[k] = rect.s[k] + span * p[0];
            u[k] = rect.s[k] + span * p[1];
            t[k] = rect.s[k] + span * p[2];
        }
        if check_triple(s, u, t).is_err() {
            continue;
        }
        stats.max_delta1 = stats.max_delta1.max(norm(&delta1_raw(&|a, b| germ_vec(germ, a, b), s, u, t)));
        stats.max_delta2 = stats.max_delta2.max(norm(&delta2_raw(&|a, b| germ_vec(germ, a, b), s, u, t)));
        let inner = |a: [f64; 2], b: [f64; 2]| delta2_raw(&|x, y| germ_vec(germ, x, y), a, u, b);
        stats.max_delta12 = stats.max_delta12.max(norm(&delta1_raw(&inner, s, u, t)));
    }
    stats
}

/// Where `y` is sampled inside each partition cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GermRule {
    /// `y` at the cell centre by causal cubic interpolation of the grid values.
    #[default]
    Midpoint,
    /// `y` at the lower-left corner, held at the last grid node below.
    LeftPoint,
}

/// Cubic Lagrange weights on 4 consecutive nodes for fractional index `x`.
///
/// The stencil ends at the first node at or above `x`, so that for a cell
/// centre `i + 1/2` it uses nodes `i-2..=i+1` and never looks further ahead
/// than the end of the cell.
#[inline]
pub(crate) fn causal_cubic(x: f64, nodes: usize) -> (usize, [f64; 4]) {
    if nodes < 4 {
        // Linear fallback on tiny grids.
        let i = (x.floor().max(0.0) as usize).min(nodes.saturating_sub(2));
        let f = x - i as f64;
        return (i, [1.0 - f, f, 0.0, 0.0]);
    }
    let start = (x.ceil() as i64 - 3).clamp(0, nodes as i64 - 4) as usize;
    let r = x - start as f64;
    let w = [
        -(r - 1.0) * (r - 2.0) * (r - 3.0) / 6.0,
        r * (r - 2.0) * (r - 3.0) / 2.0,
        -r * (r - 1.0) * (r - 3.0) / 2.0,
        r * (r - 1.0) * (r - 2.0) / 6.0,
    ];
    (start, w)
}

/// Samples a grid field at off-node times by a given rule.
pub(crate) struct PointSampler<'a> {
    y: &'a Field2D,
}

impl<'a> PointSampler<'a> {
    pub(crate) fn new(y: &'a Field2D) -> Self {
        Self { y }
    }

    /// `y` at time `t` by tensor causal cubic interpolation.
    pub(crate) fn cubic(&self, t: [f64; 2], out: &mut [f64]) {
        let g = self.y.grid();
        let [h1, h2] = g.steps();
        let [m1, m2] = g.nodes();
        let (i0, wi) = causal_cubic(t[0] / h1, m1);
        let (j0, wj) = causal_cubic(t[1] / h2, m2);
        out.fill(0.0);
        for (a, &wa) in wi.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            for (b, &wb) in wj.iter().enumerate() {
                if wb == 0.0 {
                    continue;
                }
                let v = self.y.get(i0 + a, j0 + b);
                for c in 0..out.len() {
                    out[c] += wa * wb * v[c];
                }
            }
        }
    }

    /// `y` at the last node at or below `t` (with a small tolerance for rounding).
    pub(crate) fn held(&self, t: [f64; 2], out: &mut [f64]) {
        let g = self.y.grid();
        let [h1, h2] = g.steps();
        let [c1, c2] = g.cells();
        let i = ((t[0] / h1 + 1e-9).floor().max(0.0) as usize).min(c1);
        let j = ((t[1] / h2 + 1e-9).floor().max(0.0) as usize).min(c2);
        out.copy_from_slice(self.y.get(i, j));
    }

    pub(crate) fn sample(&self, rule: GermRule, s: [f64; 2], t: [f64; 2], out: &mut [f64]) {
        match rule {
            GermRule::Midpoint => self.cubic([0.5 * (s[0] + t[0]), 0.5 * (s[1] + t[1])], out),
            GermRule::LeftPoint => self.held(s, out),
        }
    }
}

/// The nonlinear Young germ `Xi_{u,v} = box_{u,v} A(y*)`.
pub struct NlyGerm<'a, A: ?Sized> {
    a: &'a A,
    y: PointSampler<'a>,
    rule: GermRule,
    exponents: Option<GermExponents>,
}

impl<'a, A: TimeIndexedField + ?Sized> NlyGerm<'a, A> {
    pub fn new(a: &'a A, y: &'a Field2D, rule: GermRule) -> Result<Self> {
        if a.dim() != y.dim() {
            return Err(Error::DimensionMismatch { expected: a.dim(), got: y.dim() });
        }
        Ok(Self { a, y: PointSampler::new(y), rule, exponents: None })
    }

    pub fn with_exponents(mut self, e: Option<GermExponents>) -> Self {
        self.exponents = e;
        self
    }
}

impl<A: TimeIndexedField + ?Sized> Germ for NlyGerm<'_, A> {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn eval(&self, s: [f64; 2], t: [f64; 2], out: &mut [f64]) {
        if s[0] == t[0] || s[1] == t[1] {
            out.fill(0.0);
            return;
        }
        let mut x = vec![0.0; out.len()];
        self.y.sample(self.rule, s, t, &mut x);
        self.a.rect_increment(s, t, &x, out);
    }

    fn exponents(&self) -> Option<GermExponents> {
        self.exponents
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlyOptions {
    pub sew: SewOptions,
    pub rule: GermRule,
    /// Claimed Hölder exponent of `y`, used for the `alpha eta + gamma > 1` check.
    pub y_alpha: Option<[f64; 2]>,
}

impl Default for NlyOptions {
    fn default() -> Self {
        Self { sew: SewOptions::default(), rule: GermRule::Midpoint, y_alpha: None }
    }
}

/// Germ exponents implied by `A in C^gamma C^{1+eta}` and `y in C^alpha`,
/// warning when `alpha_i eta + gamma_i <= 1`.
fn nly_exponents(a: Option<FieldExponents>, y_alpha: Option<[f64; 2]>) -> Option<GermExponents> {
    let (e, alpha) = (a?, y_alpha?);
    let beta = [e.gamma[0] + e.eta * alpha[0], e.gamma[1] + e.eta * alpha[1]];
    if beta.iter().any(|b| *b <= 1.0) {
        log::warn!("regularity condition alpha*eta + gamma > 1 fails: gamma={:?} eta={} alpha={alpha:?}", e.gamma, e.eta);
    }
    Some(GermExponents { alpha: e.gamma, beta })
}

/// Finest level at which a field with native grid `g` resolves `rect`.
fn native_cap(g: &Grid2D, rect: &Rect) -> u32 {
    let steps = g.steps();
    let span = rect.span();
    (0..2)
        .map(|k| {
            let ratio = span[k] / steps[k];
            if ratio < 1.0 {
                0
            } else {
                ratio.log2().floor() as u32
            }
        })
        .min()
        .unwrap_or(0)
}

/// `int_{rect} A(ds, y_s)` by sewing the nonlinear Young germ.
pub fn nly_integral<A: TimeIndexedField + ?Sized>(
    a: &A,
    y: &Field2D,
    rect: &Rect,
    opts: &NlyOptions,
) -> Result<SewingResult> {
    let germ = NlyGerm::new(a, y, opts.rule)?.with_exponents(nly_exponents(a.exponents(), opts.y_alpha));
    let mut sew_opts = opts.sew;
    if let Some(g) = a.native_grid() {
        sew_opts.max_level = sew_opts.max_level.min(native_cap(&g, rect));
    }
    sew(&germ, rect, &sew_opts)
}

/// Outcome of [`stability_gap`].
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub value: Vec<f64>,
    pub value_tilde: Vec<f64>,
    /// Gap on the full rectangle.
    pub gap: f64,
    /// Per sub-rectangle: `(gap, field term, path term)`.
    pub samples: Vec<(f64, f64, f64)>,
    pub c1: f64,
    pub c2: f64,
    /// True when every sampled gap is at most twice the fitted bound.
    pub dominated: bool,
}

/// Compares the integrals of `(A, y)` and `(A~, y~)` against the shape
/// `(c1 |A - A~| + c2 (|y_s - y~_s| + [y - y~]_alpha)) m(t-s)^gamma`
/// over dyadic sub-rectangles of `rect` (levels 0 to 2).
pub fn stability_gap<A: TimeIndexedField + ?Sized, B: TimeIndexedField + ?Sized>(
    a: &A,
    a_tilde: &B,
    y: &Field2D,
    y_tilde: &Field2D,
    rect: &Rect,
    opts: &NlyOptions,
    gamma: [f64; 2],
    alpha: [f64; 2],
) -> Result<GapReport> {
    y.check_compatible(y_tilde)?;
    let mut o = *opts;
    o.sew.field_level = o.sew.field_level.max(2);
    let r1 = nly_integral(a, y, rect, &o)?;
    let r2 = nly_integral(a_tilde, y_tilde, rect, &o)?;
    let gap = diff_norm(&r1.value, &r2.value);
    let dy = y.sub(y_tilde)?;
    let holder_dist = if dy.sup_norm() == 0.0 {
        0.0
    } else {
        let alpha = [alpha[0].clamp(1e-3, 0.999), alpha[1].clamp(1e-3, 0.999)];
        holder_seminorms(&dy, alpha, None)?.total()
    };
    let d = a.dim();
    let sampler = PointSampler::new(y);
    let sampler_dy = PointSampler::new(&dy);
    let mut samples = Vec::new();
    let (f1, f2) = (r1.field.clone(), r2.field.clone());
    let [v1, v2] = f1.grid().levels();
    let mut x = vec![0.0; d];
    let mut ya = vec![0.0; d];
    let mut yb = vec![0.0; d];
    let mut dys = vec![0.0; d];
    for k in 0..=v1.min(v2).min(2) {
        let (q1, q2) = (1usize << (v1 - k), 1usize << (v2 - k));
        for i in 0..(1usize << k) {
            for j in 0..(1usize << k) {
                let (sn, tn) = ((i * q1, j * q2), ((i + 1) * q1, (j + 1) * q2));
                let g = diff_norm(&f1.rect_increment_nodes(sn, tn), &f2.rect_increment_nodes(sn, tn));
                let s = [rect.node(0, i, k), rect.node(1, j, k)];
                let t = [rect.node(0, i + 1, k), rect.node(1, j + 1, k)];
                // Field distance probed at the start values of both paths.
                sampler.held(s, &mut x);
                a.rect_increment(s, t, &x, &mut ya);
                a_tilde.rect_increment(s, t, &x, &mut yb);
                let m = mixed_distance(s, t, gamma);
                let field_term = diff_norm(&ya, &yb);
                sampler_dy.held(s, &mut dys);
                let path_term = (norm(&dys) + holder_dist) * m;
                samples.push((g, field_term, path_term));
            }
        }
    }
    let (c1, c2) = nonneg_least_squares(&samples);
    let dominated = samples.iter().all(|&(g, f, p)| g <= 2.0 * (c1 * f + c2 * p) + 1e-13 * (1.0 + g));
    Ok(GapReport { value: r1.value, value_tilde: r2.value, gap, samples, c1, c2, dominated })
}

/// Least squares `g ~ c1 f + c2 p` with `c1, c2 >= 0`.
fn nonneg_least_squares(samples: &[(f64, f64, f64)]) -> (f64, f64) {
    let (mut sff, mut spp, mut sfp, mut sgf, mut sgp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(g, f, p) in samples {
        sff += f * f;
        spp += p * p;
        sfp += f * p;
        sgf += g * f;
        sgp += g * p;
    }
    let single = |sgx: f64, sxx: f64| if sxx > 0.0 { (sgx / sxx).max(0.0) } else { 0.0 };
    let det = sff * spp - sfp * sfp;
    if det > 1e-12 * sff * spp && det > 0.0 {
        let c1 = (sgf * spp - sgp * sfp) / det;
        let c2 = (sgp * sff - sgf * sfp) / det;
        if c1 >= 0.0 && c2 >= 0.0 {
            return (c1, c2);
        }
    }
    // Best of the two one-sided fits.
    let a = single(sgf, sff);
    let b = single(sgp, spp);
    let err = |c1: f64, c2: f64| samples.iter().map(|&(g, f, p)| (g - c1 * f - c2 * p).powi(2)).sum::<f64>();
    if err(a, 0.0) <= err(0.0, b) {
        (a, 0.0)
    } else {
        (0.0, b)
    }
}

/// Slope of `log gap` against `log delta`.
pub fn gap_slope(deltas: &[f64], gaps: &[f64]) -> f64 {
    let x: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    linear_fit(&x, &y).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly_germ() -> impl Germ {
        FnGerm::new(1, |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
            o[0] = (t[0] - s[0]).powi(2) * (t[1] - s[1])
        })
        .unwrap()
    }

    #[test]
    fn defect_examples() {
        let g = poly_germ();
        let (s, u, t) = ([0.1, 0.2], [0.4, 0.5], [0.9, 0.7]);
        let d1 = delta1(&g, s, u, t).unwrap()[0];
        assert!((d1 - 2.0 * 0.3 * 0.5 * 0.5).abs() < 1e-15);
        assert!(delta2(&g, s, u, t).unwrap()[0].abs() < 1e-15);
        let add = FnGerm::new(1, |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
            o[0] = rect_f(s, t, |x| (x[0] * 3.0).sin() * x[1].exp())
        })
        .unwrap();
        assert!(delta1(&add, s, u, t).unwrap()[0].abs() < 1e-15);
        assert!(delta2(&add, s, u, t).unwrap()[0].abs() < 1e-15);
        assert!(delta1(&g, s, [0.05, 0.5], t).is_err());
    }

    fn rect_f(s: [f64; 2], t: [f64; 2], f: impl Fn([f64; 2]) -> f64) -> f64 {
        (f(t) - f([t[0], s[1]])) - (f([s[0], t[1]]) - f(s))
    }

    #[test]
    fn degenerate_germs_are_rejected() {
        let bad = FnGerm::new(1, |s: [f64; 2], _t: [f64; 2], o: &mut [f64]| o[0] = s[0] + 1.0);
        assert!(bad.is_err());
    }

    #[test]
    fn additive_germ_is_exact_at_level_zero() {
        let f = |x: [f64; 2]| (2.0 * x[0]).sin() * (1.0 + x[1] * x[1]);
        let g = FnGerm::new(1, move |s: [f64; 2], t: [f64; 2], o: &mut [f64]| o[0] = rect_f(s, t, f)).unwrap();
        let rect = Rect::new([0.0, 0.0], [1.0, 2.0]).unwrap();
        let r = sew(&g, &rect, &SewOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.final_level, 3);
        let exact = rect_f([0.0, 0.0], [1.0, 2.0], f);
        for row in &r.levels {
            assert!((row.value[0] - exact).abs() < 1e-14);
        }
        // Additivity of the value field.
        let fld = &r.field;
        let whole = fld.rect_increment_nodes((0, 0), (8, 8))[0];
        let parts: f64 = [((0, 0), (3, 5)), ((3, 0), (8, 5)), ((0, 5), (3, 8)), ((3, 5), (8, 8))]
            .iter()
            .map(|&(a, b)| fld.rect_increment_nodes(a, b)[0])
            .sum();
        assert!((whole - parts).abs() < 1e-14);
    }

    #[test]
    fn causal_cubic_weights() {
        let (start, w) = causal_cubic(5.5, 20);
        assert_eq!(start, 3);
        let want = [0.0625, -0.3125, 0.9375, 0.3125];
        for k in 0..4 {
            assert!((w[k] - want[k]).abs() < 1e-15);
        }
        let (start, w) = causal_cubic(0.5, 20);
        assert_eq!(start, 0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // Reproduces cubics exactly.
        let p = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
        for x in [0.5, 3.25, 9.5, 19.0] {
            let (s, w) = causal_cubic(x, 20);
            let v: f64 = (0..4).map(|k| w[k] * p((s + k) as f64)).sum();
            assert!((v - p(x)).abs() < 1e-10, "{x}");
        }
    }

    #[test]
    fn nly_constant_path_and_time_only_field() {
        let a = FnField::new(1, |t: [f64; 2], x: &[f64], o: &mut [f64]| o[0] = t[0] * t[1] * x[0].sin());
        let c = Field2D::from_fn(Grid2D::unit(5), 1, |_, o| o[0] = 0.7).unwrap();
        let r = nly_integral(&a, &c, &Rect::unit(), &NlyOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.value[0] - 0.7f64.sin()).abs() < 1e-14);
        let b = FnField::new(1, |t: [f64; 2], _x: &[f64], o: &mut [f64]| o[0] = t[0] * t[1]);
        let y = Field2D::from_fn(Grid2D::unit(5), 1, |t, o| o[0] = t[0] - t[1]).unwrap();
        let r = nly_integral(&b, &y, &Rect::unit(), &NlyOptions::default()).unwrap();
        assert!((r.value[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn divergent_germ_is_reported() {
        // Sum over a level-n partition grows like 2^n.
        let g = FnGerm::new(1, |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
            o[0] = ((t[0] - s[0]) * (t[1] - s[1])).sqrt()
        })
        .unwrap();
        let r = sew(&g, &Rect::unit(), &SewOptions { max_level: 8, ..Default::default() });
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn planted_defect_rate() {
        let beta = [1.5, 1.5];
        let g = FnGerm::new(1, move |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
            o[0] = rect_f(s, t, |x| x[0] * x[1].cos()) + mixed_distance(s, t, beta)
        })
        .unwrap()
        .with_exponents(GermExponents { alpha: [1.0, 1.0], beta });
        let r = sew(&g, &Rect::unit(), &SewOptions { max_level: 9, ..Default::default() }).unwrap();
        assert!((r.observed_order - 1.0).abs() < 1e-6);
        let [a1, a2] = r.axis_orders.unwrap();
        assert!((a1 - 0.5).abs() < 1e-6 && (a2 - 0.5).abs() < 1e-6);
        assert!(r.fitted_constant.unwrap() > 0.0);
    }

    #[test]
    fn stability_gap_trivial_cases() {
        let a = FnField::new(1, |t: [f64; 2], x: &[f64], o: &mut [f64]| o[0] = t[0] * t[1] * x[0].cos());
        let y = Field2D::from_fn(Grid2D::unit(6), 1, |t, o| o[0] = t[0] * t[1]).unwrap();
        let opts = NlyOptions { sew: SewOptions { max_level: 6, ..Default::default() }, ..Default::default() };
        let r = stability_gap(&a, &a, &y, &y, &Rect::unit(), &opts, [1.0, 1.0], [0.9, 0.9]).unwrap();
        assert_eq!(r.gap, 0.0);
        let delta = 0.125;
        let shifted = SumField(&a, FnField::new(1, move |t: [f64; 2], _x: &[f64], o: &mut [f64]| o[0] = delta * t[0] * t[1]));
        let r = stability_gap(&a, &shifted, &y, &y, &Rect::unit(), &opts, [1.0, 1.0], [0.9, 0.9]).unwrap();
        assert!((r.gap - delta).abs() < 1e-14);
        assert!(r.dominated);
    }
}
