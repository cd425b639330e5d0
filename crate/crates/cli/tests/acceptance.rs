//! Acceptance suite: one `criterion N: PASS|FAIL ...` line per criterion.
//!
//! `cargo test --release -p nly2d-cli --test acceptance [-- 3 5 ...]` runs all
//! criteria or the listed ones; the process exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use nly2d::drift::{DriftSpec, Mollifier};
use nly2d::grid::mixed_distance;
use nly2d::noise::{sum_field, FbmSampler, SheetSampler};
use nly2d::occupation::{
    averaged_field_convolved, averaged_field_direct, convolve_local_times, occupation_density,
    occupation_density_path, regularity_scan, ScanOptions, ScanSource,
};
use nly2d::sewing::{nly_integral, sew, FnField, FnGerm, GermExponents, NlyOptions, Rect, SewOptions};
use nly2d::solver::{
    check_conditions, compare_mollifiers, picard_solve, solve_regularized_sde, BoundaryData, ConditionSet,
    PicardOptions, RegularityParams,
};
use nly2d::spatial::SpatialGrid;
use nly2d::wave::{residual_order, solve_wave, wave_residual, WaveProblem};
use nly2d::{Field2D, Grid2D, Path1D};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- criterion 1

/// Spacing of doubles at magnitude `m`.
fn ulp(m: f64) -> f64 {
    if m == 0.0 {
        f64::MIN_POSITIVE
    } else {
        f64::EPSILON * 2f64.powi(m.abs().log2().floor() as i32)
    }
}

fn c1_increment_algebra() -> Outcome {
    const FIELDS: usize = 1000;
    const TOL_ULPS: f64 = 8.0;
    let g = Grid2D::unit(6);
    let [m1, m2] = g.nodes();
    let mut worst = [0.0f64; 3];
    for seed in 0..FIELDS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let vals: Vec<f64> = (0..m1 * m2).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let f = Field2D::new(g, 1, vals).unwrap();
        let u = ulp(f.sup_norm());

        // Four-tile additivity on a random rectangle split at a random interior node.
        for _ in 0..20 {
            let (s1, t1) = ordered(&mut rng, m1);
            let (s2, t2) = ordered(&mut rng, m2);
            let u1 = rng.gen_range(s1..=t1);
            let u2 = rng.gen_range(s2..=t2);
            let whole = f.rect_increment_nodes((s1, s2), (t1, t2))[0];
            let tiles = f.rect_increment_nodes((s1, s2), (u1, u2))[0]
                + f.rect_increment_nodes((u1, s2), (t1, u2))[0]
                + f.rect_increment_nodes((s1, u2), (u1, t2))[0]
                + f.rect_increment_nodes((u1, u2), (t1, t2))[0];
            worst[0] = worst[0].max((whole - tiles).abs() / u);
        }

        // Additive fields have vanishing rectangular increments.
        let a1: Vec<f64> = (0..m1).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let a2: Vec<f64> = (0..m2).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let add = Field2D::new(g, 1, (0..m1 * m2).map(|k| a1[k / m2] + a2[k % m2]).collect()).unwrap();
        let ua = ulp(add.sup_norm());
        for _ in 0..20 {
            let (s1, t1) = ordered(&mut rng, m1);
            let (s2, t2) = ordered(&mut rng, m2);
            worst[1] = worst[1].max(add.rect_increment_nodes((s1, s2), (t1, t2))[0].abs() / ua);
        }

        // Boundary decomposition reassembles the field; the increment part vanishes on the axes.
        let (z, y) = f.boundary_decompose();
        for i in 0..m1 {
            for j in 0..m2 {
                let e = (z.get(i, j)[0] + y.get(i, j)[0] - f.get(i, j)[0]).abs() / u;
                worst[2] = worst[2].max(e);
                if (i == 0 || j == 0) && y.get(i, j)[0] != 0.0 {
                    return outcome(false, format!("seed {seed}: increment part nonzero on the axis at ({i},{j})"));
                }
            }
        }
    }
    let pass = worst.iter().all(|w| *w <= TOL_ULPS);
    outcome(
        pass,
        format!(
            "{FIELDS} fields at level 6: max error in ulps: four-tile {:.1}, additive {:.1}, reassembly {:.1} (limit {TOL_ULPS})",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn ordered(rng: &mut ChaCha8Rng, m: usize) -> (usize, usize) {
    let a = rng.gen_range(0..m);
    let b = rng.gen_range(0..m);
    (a.min(b), a.max(b))
}

// ---------------------------------------------------------------- criterion 2

struct Pair {
    name: &'static str,
    g1: fn(f64) -> f64,
    g2: fn(f64) -> f64,
    f: fn(f64) -> f64,
    drift: fn() -> DriftSpec,
    y: fn(f64, f64) -> f64,
}

fn c2_pairs() -> Vec<Pair> {
    vec![
        Pair {
            name: "t1 t2 sin(x), y = sin(2 t1) cos(t2)",
            g1: |t| t,
            g2: |t| t,
            f: f64::sin,
            drift: || DriftSpec::sine(1, 1.0, 1.0).unwrap(),
            y: |a, b| (2.0 * a).sin() * b.cos(),
        },
        Pair {
            name: "sin(t1) t2^2 x^2, y = t1 + t2",
            g1: f64::sin,
            g2: |t| t * t,
            f: |x| x * x,
            drift: || {
                DriftSpec::new(nly2d::drift::Profile::Power { amplitude: 1.0, exponent: 2.0 }, 1).unwrap()
            },
            y: |a, b| a + b,
        },
        Pair {
            name: "exp(t1) cos(t2) bump(x), y = t1 t2",
            g1: f64::exp,
            g2: f64::cos,
            f: |x| (-x * x / (2.0 * 0.25)).exp(),
            drift: || DriftSpec::gaussian_bump(1.0, vec![0.0], 0.5).unwrap(),
            y: |a, b| a * b,
        },
        Pair {
            name: "t1^2 sin(3 t2) sin(2x), y = exp(-t1) - t2^2",
            g1: |t| t * t,
            g2: |t| (3.0 * t).sin(),
            f: |x| (2.0 * x).sin(),
            drift: || DriftSpec::sine(1, 1.0, 2.0).unwrap(),
            y: |a, b| (-a).exp() - b * b,
        },
        Pair {
            name: "t1 t2 x, y = sin(pi t1) sin(pi t2)",
            g1: |t| t,
            g2: |t| t,
            f: |x| x,
            drift: || DriftSpec::new(nly2d::drift::Profile::Identity, 1).unwrap(),
            y: |a, b| (std::f64::consts::PI * a).sin() * (std::f64::consts::PI * b).sin(),
        },
    ]
}

/// Midpoint Riemann sum of `dG1 dG2 f(y)` on the level-`n` grid of the unit square.
fn riemann(p: &Pair, n: u32) -> f64 {
    let m = 1usize << n;
    let h = 1.0 / m as f64;
    let dg1: Vec<f64> = (0..m).map(|i| (p.g1)((i + 1) as f64 * h) - (p.g1)(i as f64 * h)).collect();
    let dg2: Vec<f64> = (0..m).map(|j| (p.g2)((j + 1) as f64 * h) - (p.g2)(j as f64 * h)).collect();
    (0..m)
        .into_par_iter()
        .map(|i| {
            let a = (i as f64 + 0.5) * h;
            let mut row = 0.0;
            for (j, d2) in dg2.iter().enumerate() {
                row += d2 * (p.f)((p.y)(a, (j as f64 + 0.5) * h));
            }
            dg1[i] * row
        })
        .sum::<f64>()
}

fn c2_sewing_consistency() -> Outcome {
    const TOL: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for p in c2_pairs() {
        let f = (p.drift)();
        let (g1, g2) = (p.g1, p.g2);
        let a = FnField::new(1, move |t: [f64; 2], x: &[f64], o: &mut [f64]| {
            f.eval(x, o);
            o[0] *= g1(t[0]) * g2(t[1]);
        });
        let yf = p.y;
        let y = Field2D::from_fn(Grid2D::unit(10), 1, |t, o| o[0] = yf(t[0], t[1])).unwrap();
        let opts = NlyOptions { sew: SewOptions { max_level: 10, ..Default::default() }, ..Default::default() };
        let r = nly_integral(&a, &y, &Rect::unit(), &opts).unwrap();
        let oracle = riemann(&p, 14);
        let err = (r.value[0] - oracle).abs();
        worst = worst.max(err);
        lines.push(format!("[{}] {err:.2e}", p.name));
    }
    outcome(worst <= TOL, format!("max |nly - riemann| = {worst:.3e} (limit {TOL:.0e}); {}", lines.join("; ")))
}

// ---------------------------------------------------------------- criterion 3

fn c3_sewing_rate() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for beta in [[1.2, 1.2], [1.5, 1.5], [1.2, 1.8]] {
        let germ = FnGerm::new(1, move |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
            let f = |x: [f64; 2]| x[0].sin() * (1.0 + x[1] * x[1]);
            o[0] = ((f(t) - f([t[0], s[1]])) - (f([s[0], t[1]]) - f(s))) + mixed_distance(s, t, beta);
        })
        .unwrap()
        .with_exponents(GermExponents { alpha: [1.0, 1.0], beta });
        let r = sew(&germ, &Rect::unit(), &SewOptions { max_level: 11, tol: 1e-14, ..Default::default() }).unwrap();
        let [a1, a2] = r.axis_orders.unwrap();
        let fitted = r.observed_order.min(a1).min(a2);
        let need = beta[0].min(beta[1]) - 1.0 - 0.1;
        pass &= fitted >= need;
        parts.push(format!(
            "beta={beta:?}: joint {:.3}, axis ({a1:.3}, {a2:.3}), fitted {fitted:.3} >= {need:.2}",
            r.observed_order
        ));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 4

fn c4_linear_goursat() -> Outcome {
    const TOL: f64 = 1e-6;
    let g = Grid2D::unit(9);
    let [m1, m2] = g.nodes();
    let mut worst: f64 = 0.0;
    for lambda in [-1.0, 1.0, 2.0] {
        let a = FnField::new(1, move |t: [f64; 2], x: &[f64], o: &mut [f64]| o[0] = lambda * x[0] * t[0] * t[1]);
        let xi = BoundaryData::constant(&[1.0], &g).unwrap();
        let opts = PicardOptions { tol: 1e-13, skip_diagnostics: true, ..Default::default() };
        let r = picard_solve(&a, &xi, &g, &opts).unwrap();
        for i in 0..m1 {
            for j in 0..m2 {
                let [t1, t2] = g.node(i, j);
                let z = lambda * t1 * t2;
                let (mut term, mut sum) = (1.0, 1.0);
                for k in 1..30 {
                    term *= z / (k * k) as f64;
                    sum += term;
                }
                worst = worst.max((r.theta.get(i, j)[0] - sum).abs());
            }
        }
    }
    outcome(worst <= TOL, format!("lambda in {{-1,1,2}}, level 9: max error {worst:.3e} (limit {TOL:.0e})"))
}

// ---------------------------------------------------------------- criterion 5

fn c5_local_time_formula() -> Outcome {
    const TOL: f64 = 1e-2;
    const BAND: (f64, f64) = (0.35, 0.65);
    let level = 10;
    let xs: Vec<Vec<f64>> = (0..17).map(|k| vec![-1.0 + k as f64 / 8.0]).collect();
    let drifts = [
        ("constant", DriftSpec::constant(vec![0.7]).unwrap()),
        ("sine", DriftSpec::sine(1, 1.0, 2.0).unwrap()),
        ("bump", DriftSpec::gaussian_bump(1.0, vec![0.0], 0.5).unwrap()),
    ];
    let s1 = FbmSampler::new(0.5, 1.0, level).unwrap();
    let fields = [
        ("fbm_sum", sum_field(&s1.sample(1, 101).unwrap(), &s1.sample(1, 102).unwrap()).unwrap()),
        ("sheet", SheetSampler::new([0.5, 0.5], Grid2D::unit(level)).unwrap().sample(1, 103).unwrap()),
    ];
    let bins_sweep = [256usize, 512, 1024, 2048];
    let mut pass = true;
    let mut parts = Vec::new();
    for (wn, w) in &fields {
        for (bn, b) in &drifts {
            let direct = averaged_field_direct(b, w, &xs, [5, 5]).unwrap();
            let errs: Vec<f64> = bins_sweep
                .iter()
                .map(|&bins| {
                    let sg = SpatialGrid::auto(w.values(), &[0.0], 1.0, bins).unwrap();
                    let a = averaged_field_convolved(b.clone(), &occupation_density(w, &sg).unwrap(), true).unwrap();
                    let conv = a.grid_values(&xs, [5, 5]).unwrap();
                    direct.iter().zip(&conv).map(|(d, c)| d.sup_distance(c).unwrap()).fold(0.0, f64::max)
                })
                .collect();
            let ok_abs = errs[0] <= TOL;
            // Per-doubling ratio from the log-log slope over the sweep; rounding-level errors are exact.
            let exact = errs.iter().all(|e| *e <= 1e-10);
            let ratio = if exact { f64::NAN } else { 2f64.powf(slope_log2(&errs)) };
            let ok_rate = exact || (BAND.0..=BAND.1).contains(&ratio);
            pass &= ok_abs && ok_rate;
            parts.push(format!(
                "{wn}/{bn}: err@256 {:.2e}, ratio {}",
                errs[0],
                if exact { "exact".to_string() } else { format!("{ratio:.3}") }
            ));
        }
    }
    outcome(pass, format!("level 10, limit {TOL:.0e}, ratio band {BAND:?}: {}", parts.join("; ")))
}

/// Least-squares slope of `log2 e_k` against `k`.
fn slope_log2(errs: &[f64]) -> f64 {
    let n = errs.len() as f64;
    let xs: Vec<f64> = (0..errs.len()).map(|k| k as f64).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.log2()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------- criterion 6

fn c6_convolution_identity() -> Outcome {
    const TOL: f64 = 5e-2;
    let level = 12;
    let s = FbmSampler::new(0.5, 1.0, level).unwrap();
    let dists: Vec<f64> = (0..20u64)
        .map(|seed| {
            let b1 = s.sample(1, 2 * seed + 1000).unwrap();
            let b2 = s.sample(1, 2 * seed + 1001).unwrap();
            let all: Vec<f64> = b1.values().iter().chain(b2.values()).copied().collect();
            let sg = SpatialGrid::auto(&all, &[0.0], 0.0, 256).unwrap();
            let lt = convolve_local_times(
                &occupation_density_path(&b1, &sg).unwrap(),
                &occupation_density_path(&b2, &sg).unwrap(),
            )
            .unwrap();
            let m = b1.len();
            let conv = lt.density((m - 1, m - 1)).unwrap();
            // Direct trapezoid histogram of beta1_i + beta2_j on the same doubled grid.
            let dg = lt.sgrid().clone();
            let h = b1.step();
            let wt = |k: usize| if k == 0 || k == m - 1 { 0.5 * h } else { h };
            let mut direct = vec![0.0; dg.total_bins()];
            for i in 0..m {
                let (wi, x1) = (wt(i), b1.get(i)[0]);
                for j in 0..m {
                    let bin = dg.bin_of(&[x1 + b2.get(j)[0]]).expect("sum inside the doubled box");
                    direct[bin] += wi * wt(j);
                }
            }
            let dx = dg.cell_volume();
            conv.iter().zip(&direct).map(|(c, d)| (c - d / dx).abs() * dx).sum::<f64>()
        })
        .collect();
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let max = dists.iter().copied().fold(0.0, f64::max);
    outcome(mean <= TOL, format!("20 seeds, level 12, bins 2^8: mean L1 {mean:.3e}, max {max:.3e} (limit {TOL:.0e})"))
}

// ---------------------------------------------------------------- criterion 7

fn c7_regularity_scan() -> Outcome {
    let src = ScanSource::FbmSum { hurst: [0.5, 0.5], horizon: [1.0, 1.0], level: 10, dim: 1 };
    let opts =
        ScanOptions { lambdas: vec![0.0, 0.25], seeds: 100, base_seed: 2024, bins: 256, scales: (1..=6).collect() };
    let rows = regularity_scan(&src, &opts).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &rows {
        for (k, a) in r.axes.iter().enumerate() {
            let need = a.gamma_floor - 0.1;
            pass &= a.gamma_hat >= need;
            parts.push(format!(
                "lambda {} axis {}: {:.3} +- {:.3} >= {need:.3}",
                r.lambda,
                k + 1,
                a.gamma_hat,
                a.gamma_se
            ));
        }
    }
    outcome(pass, format!("100 seeds, level 10: {}", parts.join("; ")))
}

// ---------------------------------------------------------------- criterion 8

fn c8_smooth_sde() -> Outcome {
    const TOL: f64 = 1e-3;
    let level = 9;
    let s = FbmSampler::new(0.5, 1.0, level).unwrap();
    let w = sum_field(&s.sample(1, 81).unwrap(), &s.sample(1, 82).unwrap()).unwrap();
    let g = *w.grid();
    let b = DriftSpec::gaussian_bump(1.0, vec![0.0], 0.5).unwrap();
    let xi = BoundaryData::constant(&[0.3], &g).unwrap();
    let sg = SpatialGrid::auto(w.values(), &[0.0], 2.0, 256).unwrap();
    let (x, _) = solve_regularized_sde(&b, &w, &xi, &sg, &PicardOptions::default()).unwrap();

    // Picard iteration of x = xi + w + int b(x) dr with the corner rule per cell.
    let m = g.nodes()[0];
    let area = g.cell_area();
    let bump = |v: f64| (-v * v / (2.0 * 0.25)).exp();
    let mut xo: Vec<f64> = w.values().iter().map(|v| 0.3 + v).collect();
    for _ in 0..200 {
        let bv: Vec<f64> = xo.iter().map(|v| bump(*v)).collect();
        let mut acc = vec![0.0; m * m];
        let mut update: f64 = 0.0;
        for i in 1..m {
            for j in 1..m {
                let cell = 0.25 * area * (bv[(i - 1) * m + j - 1] + bv[(i - 1) * m + j] + bv[i * m + j - 1] + bv[i * m + j]);
                acc[i * m + j] = acc[(i - 1) * m + j] + acc[i * m + j - 1] - acc[(i - 1) * m + j - 1] + cell;
            }
        }
        for k in 0..m * m {
            let v = 0.3 + w.values()[k] + acc[k];
            update = update.max((v - xo[k]).abs());
            xo[k] = v;
        }
        if update < 1e-14 {
            break;
        }
    }
    let dist = x.values().iter().zip(&xo).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(dist <= TOL, format!("level 9, bins 2^8, Gaussian bump: sup distance {dist:.3e} (limit {TOL:.0e})"))
}

// ---------------------------------------------------------------- criterion 9

fn c9_mollification() -> Outcome {
    let level = 10;
    let s = FbmSampler::new(0.25, 1.0, level).unwrap();
    let w = sum_field(&s.sample(1, 91).unwrap(), &s.sample(1, 92).unwrap()).unwrap();
    let b = DriftSpec::step(1, 1.0, 0.0).unwrap();
    let xi = BoundaryData::constant(&[0.0], w.grid()).unwrap();
    let sg = SpatialGrid::auto(w.values(), &[0.0], 2.0, 4096).unwrap();
    let eps: Vec<f64> = (2..=7).map(|k| 0.5f64.powi(k)).collect();
    let c = compare_mollifiers(&b, &eps, &w, &xi, &sg, &PicardOptions::default()).unwrap();
    let mut parts = Vec::new();
    for t in [&c.gaussian, &c.triangular] {
        let d: Vec<String> =
            t.rows.iter().skip(1).map(|r| r.distance.map_or("failed".into(), |v| format!("{v:.2e}"))).collect();
        parts.push(format!(
            "{:?}: [{}] decreasing {} mean ratio {:.3}",
            t.shape,
            d.join(", "),
            t.strictly_decreasing,
            t.mean_ratio
        ));
    }
    let pass = c.gaussian.cauchy && c.triangular.cauchy && c.agree;
    let shape_name = |m: Mollifier| format!("{m:?}");
    outcome(
        pass,
        format!(
            "level 10, bins 2^12, eps 2^-2..2^-7: {}; limits {} vs {} differ by {:.2e} <= 2 x {:.2e}: {}",
            parts.join("; "),
            shape_name(Mollifier::Gaussian),
            shape_name(Mollifier::Triangular),
            c.limit_distance,
            c.final_gap,
            c.agree
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn beta1(t: f64) -> f64 {
    0.2 + 0.5 * (2.0 * t).sin()
}

fn beta2(t: f64) -> f64 {
    0.2 + 0.3 * t - t * t
}

/// Spatial bins refined at twice the time rate, so the first-order binning error
/// stays below the second-order time error.
fn wave_bins(level: u32) -> usize {
    1usize << (2 * level - 4)
}

fn smooth_wave(level: u32, h: DriftSpec) -> (WaveProblem, SpatialGrid) {
    let p1 = Path1D::from_fn(1.0, level, 1, |t, o| o[0] = beta1(t)).unwrap();
    let p2 = Path1D::from_fn(1.0, level, 1, |t, o| o[0] = beta2(t)).unwrap();
    let all: Vec<f64> = p1.values().iter().chain(p2.values()).copied().collect();
    let sg = SpatialGrid::auto(&all, &[0.0], 0.5, wave_bins(level)).unwrap();
    (WaveProblem::new(h, p1, p2).unwrap(), sg)
}

/// Explicit characteristic marching for `phi_{t1 t2} = c h(phi)` on the Goursat square.
fn marching_oracle(level: u32, coupling: f64) -> (usize, Vec<f64>) {
    let m = (1usize << level) + 1;
    let side = std::f64::consts::SQRT_2;
    let h = side / (m - 1) as f64;
    let mut phi = vec![0.0; m * m];
    for k in 0..m {
        phi[k * m] = beta1(k as f64 * h / side);
        phi[k] = beta2(k as f64 * h / side);
    }
    for i in 1..m {
        for j in 1..m {
            let centre = 0.5 * (phi[i * m + j - 1] + phi[(i - 1) * m + j]);
            phi[i * m + j] =
                phi[i * m + j - 1] + phi[(i - 1) * m + j] - phi[(i - 1) * m + j - 1] + coupling * h * h * centre.sin();
        }
    }
    (m, phi)
}

fn c10_wave() -> Outcome {
    let opts = PicardOptions { skip_diagnostics: true, ..Default::default() };
    let mut parts = Vec::new();
    let mut pass = true;

    // (a) free wave with rough boundary data.
    let s = FbmSampler::new(0.5, 1.0, 7).unwrap();
    let (r1, r2) = (s.sample(1, 1).unwrap(), s.sample(1, 2).unwrap());
    let all: Vec<f64> = r1.values().iter().chain(r2.values()).copied().collect();
    let sg = SpatialGrid::auto(&all, &[0.0], 1.0, 512).unwrap();
    let free = WaveProblem::new(DriftSpec::constant(vec![0.0]).unwrap(), r1.clone(), r2.clone()).unwrap();
    let sol = solve_wave(&free, &sg, &opts).unwrap();
    let a_ok = sol.boundary_error == 0.0 && sol.psi.sup_norm() == 0.0;
    pass &= a_ok;
    parts.push(format!("(a) trace error {:e}, |psi| {:e}", sol.boundary_error, sol.psi.sup_norm()));

    // (b) constant nonlinearity.
    let c = 0.7;
    let p = WaveProblem::new(DriftSpec::constant(vec![c]).unwrap(), r1, r2).unwrap();
    let sol = solve_wave(&p, &sg, &opts).unwrap();
    let g = *sol.psi.grid();
    let [m1, m2] = g.nodes();
    let mut err_b: f64 = 0.0;
    for i in 0..m1 {
        for j in 0..m2 {
            let [t1, t2] = g.node(i, j);
            err_b = err_b.max((sol.psi.get(i, j)[0] + 2.0 * c * t1 * t2).abs());
        }
    }
    pass &= err_b <= 1e-10;
    parts.push(format!("(b) |psi + 2c t1 t2| {err_b:.2e} (limit 1e-10)"));

    // (c) h = sin against the marching oracle at level 12.
    let (mo, orc) = marching_oracle(12, nly2d::wave::DEFAULT_COUPLING);
    let (p, sg) = smooth_wave(9, DriftSpec::sine(1, 1.0, 1.0).unwrap());
    let sol = solve_wave(&p, &sg, &opts).unwrap();
    let stride = 1usize << (12 - 9);
    let m = sol.phi.grid().nodes()[0];
    let mut err_c: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            err_c = err_c.max((sol.phi.get(i, j)[0] - orc[i * stride * mo + j * stride]).abs());
        }
    }
    pass &= err_c <= 1e-3;
    parts.push(format!("(c) level 9 vs marching: {err_c:.2e} (limit 1e-3)"));

    // (d) residual order under refinement.
    let h = DriftSpec::sine(1, 1.0, 1.0).unwrap();
    let reports: Vec<_> = (6..=10)
        .map(|level| {
            let (p, sg) = smooth_wave(level, h.clone());
            wave_residual(&solve_wave(&p, &sg, &opts).unwrap(), &h).unwrap()
        })
        .collect();
    let order = residual_order(&reports);
    pass &= order >= 1.0;
    let res: Vec<String> = reports.iter().map(|r| format!("{:.2e}", r.max_residual)).collect();
    parts.push(format!("(d) residuals levels 6..10 [{}], order {order:.3} (need >= 1)", res.join(", ")));
    outcome(pass, parts.join("; "))
}

// --------------------------------------------------------------- criterion 11

struct Case {
    which: ConditionSet,
    params: RegularityParams,
    pass: bool,
    slack: f64,
    /// Dyadic arithmetic is exact; other cases carry one rounding per operation.
    exact: bool,
}

fn params(zeta: f64, hurst: [f64; 2], d: usize) -> RegularityParams {
    RegularityParams { zeta, hurst, d, ..Default::default() }
}

fn general(zeta: f64, alpha: f64, gamma: [f64; 2], eta: Option<f64>) -> RegularityParams {
    RegularityParams { zeta, alpha, gamma, eta, ..Default::default() }
}

fn c11_conditions() -> Outcome {
    use ConditionSet::*;
    let cases = [
        // 1 + 3 - 2 - 2 = 0
        Case { which: FbmSum, params: params(0.5, [0.25, 0.25], 1), pass: true, slack: 0.5, exact: true },
        // 2.5 > 2.4 and 1.12 > 1
        Case {
            which: General,
            params: general(1.5, 1.0, [0.8, 0.8], Some(0.4)),
            pass: true,
            slack: 0.1,
            exact: false,
        },
        // 3 - 1 + 0.5 = 2.5
        Case { which: Sheet, params: params(2.0, [0.5, 0.5], 1), pass: false, slack: -0.5, exact: true },
        // 1 + 3 - 1 - 1 = 2
        Case { which: FbmSum, params: params(1.5, [0.5, 0.5], 1), pass: false, slack: -0.5, exact: true },
        // 2 + 3 - 4 - 2 = -1
        Case { which: FbmSum, params: params(0.0, [0.125, 0.25], 2), pass: true, slack: 1.0, exact: true },
        // 1 + 3 - 2 = 2
        Case { which: FbmPlusDeterministic, params: params(2.5, [0.25, 0.25], 1), pass: true, slack: 0.5, exact: true },
        // 1 + 3 - 1 = 3
        Case {
            which: FbmPlusDeterministic,
            params: params(2.5, [0.5, 0.5], 1),
            pass: false,
            slack: -0.5,
            exact: true,
        },
        // 3 - 1/(2 * 0.25) + 0.5 = 1.5
        Case { which: Sheet, params: params(2.0, [0.25, 0.125], 1), pass: true, slack: 0.5, exact: true },
        // 3 - 2 + 1 = 2, equality fails the strict inequality
        Case { which: Sheet, params: params(2.0, [0.25, 0.25], 2), pass: false, slack: 0.0, exact: true },
        // 1.125 > 1, 1.5 > 1, 2.75 > 2.5
        Case {
            which: General,
            params: general(1.75, 1.0, [0.75, 1.0], Some(0.5)),
            pass: true,
            slack: 0.125,
            exact: true,
        },
        // 0.9375 < 1 and 2.25 = 2.25
        Case {
            which: General,
            params: general(1.25, 1.0, [0.75, 0.75], Some(0.25)),
            pass: false,
            slack: -0.0625,
            exact: true,
        },
        // eta interval (1/0.8 - 1, min(1, 2.25 + 0.5 - 2)) = (0.25, 0.75)
        Case { which: General, params: general(2.25, 0.5, [1.0, 0.8], None), pass: true, slack: 0.5, exact: false },
    ];
    let mut bad = Vec::new();
    for (k, c) in cases.iter().enumerate() {
        let v = check_conditions(&c.params, c.which).unwrap();
        let ok_slack = if c.exact { v.slack() == c.slack } else { (v.slack() - c.slack).abs() <= 1e-15 };
        if v.pass != c.pass || !ok_slack {
            bad.push(format!("case {}: got pass={} slack={}, expected {} / {}", k + 1, v.pass, v.slack(), c.pass, c.slack));
        }
    }
    let n = cases.len();
    if bad.is_empty() {
        outcome(true, format!("{n} parameter sets across 4 selectors match"))
    } else {
        outcome(false, bad.join("; "))
    }
}

// --------------------------------------------------------------- criterion 12

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_cli(sub: &str, config: &Path, out: &Path, threads: Option<usize>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nly2d"));
    cmd.arg(sub).arg("--config").arg(config).arg("--out").arg(out).arg("--seed").arg("12345");
    if let Some(t) = threads {
        cmd.arg("--threads").arg(t.to_string());
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{sub} exited with {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(())
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn c12_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for sub in [
        "sample-field",
        "local-time",
        "averaged-field",
        "sew-demo",
        "solve-nly",
        "solve-sde",
        "regularity-scan",
        "solve-wave",
        "mollify-study",
        "check-conditions",
    ] {
        let cfg = configs_dir().join(format!("{sub}.toml"));
        let (a, b) = (tmp.path().join(format!("{sub}-a")), tmp.path().join(format!("{sub}-b")));
        if let Err(e) = run_cli(sub, &cfg, &a, Some(1)).and_then(|_| run_cli(sub, &cfg, &b, None)) {
            pass = false;
            parts.push(e);
            continue;
        }
        let (fa, fb) = (data_files(&a), data_files(&b));
        let same = !fa.is_empty() && fa == fb;
        pass &= same;
        parts.push(format!("{sub} {} files {}", fa.len(), if same { "identical" } else { "DIFFER" }));
    }
    outcome(pass, format!("two runs per subcommand (1 thread vs default pool): {}", parts.join(", ")))
}

// ---------------------------------------------------------------------- main

fn main() {
    let criteria: [(u32, fn() -> Outcome); 12] = [
        (1, c1_increment_algebra),
        (2, c2_sewing_consistency),
        (3, c3_sewing_rate),
        (4, c4_linear_goursat),
        (5, c5_local_time_formula),
        (6, c6_convolution_identity),
        (7, c7_regularity_scan),
        (8, c8_smooth_sde),
        (9, c9_mollification),
        (10, c10_wave),
        (11, c11_conditions),
        (12, c12_determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n}: {} {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
