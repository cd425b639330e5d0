//! One function per subcommand. Each validates its whole configuration
//! before computing anything, then writes its artifacts into the run directory.

use anyhow::Result;
use serde_json::json;
use sha2::{Digest, Sha256};

use nly2d::drift::DriftSpec;
use nly2d::grid::mixed_distance;
use nly2d::io::{write_field_binary, write_field_csv, write_path_csv};
use nly2d::noise::{sum_field, FbmSampler, SheetSampler};
use nly2d::occupation::{
    averaged_field_convolved, averaged_field_direct, convolve_local_times, occupation_density,
    occupation_density_path, regularity_scan, write_scan_csv, LocalTime, ScanOptions, ScanSource,
};
use nly2d::sewing::{sew, FnField, FnGerm, GermExponents, Rect, SewOptions};
use nly2d::solver::{
    check_conditions, compare_mollifiers, mollification_study, picard_solve, solve_regularized_sde, BoundaryData,
    ConditionSet, MollificationTable, RegularityParams,
};
use nly2d::spatial::SpatialGrid;
use nly2d::wave::{compare_wave_mollifiers, solve_wave, wave_mollification_study, wave_residual, WaveProblem};
use nly2d::{Field2D, Grid2D, Path1D};

use crate::config::*;
use crate::output::{Cell, Csv, RunDir};

pub const SUBCOMMANDS: [&str; 10] = [
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
];

/// Per-run randomness: `seed ^ hash(subcommand) ^ replicate`, with the hash
/// taken as the first eight bytes of SHA-256 of the subcommand name.
pub fn sub_seed(seed: u64, subcommand: &str, replicate: u64) -> u64 {
    let h = Sha256::digest(subcommand.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h[..8]);
    seed ^ u64::from_le_bytes(b) ^ replicate
}

pub struct Ctx<'a> {
    pub name: &'a str,
    pub seed: u64,
    pub cfg: &'a Config,
    pub out: &'a mut RunDir,
}

impl Ctx<'_> {
    fn seed_for(&self, replicate: u64) -> u64 {
        sub_seed(self.seed, self.name, replicate)
    }
}

pub fn run(ctx: &mut Ctx) -> Result<()> {
    match ctx.name {
        "sample-field" => sample_field(ctx),
        "local-time" => local_time(ctx),
        "averaged-field" => averaged_field(ctx),
        "sew-demo" => sew_demo(ctx),
        "solve-nly" => solve_nly(ctx),
        "solve-sde" => solve_sde(ctx),
        "regularity-scan" => scan(ctx),
        "solve-wave" => wave(ctx),
        "mollify-study" => mollify(ctx),
        "check-conditions" => conditions(ctx),
        other => Err(Invalid::new(format!("unknown subcommand {other}")).into()),
    }
}

struct Noise {
    field: Field2D,
    paths: Option<(Path1D, Path1D)>,
}

fn check_noise(n: &NoiseCfg) -> CfgResult<()> {
    for h in n.hurst {
        if !(h > 0.0 && h < 1.0) {
            return Err(Invalid::at("noise.hurst", format!("Hurst parameters must lie in (0,1), got {h}")));
        }
    }
    if n.dim == 0 {
        return Err(Invalid::at("noise.dim", "must be positive"));
    }
    if n.horizon.iter().any(|t| !(*t > 0.0)) {
        return Err(Invalid::at("noise.horizon", "must be positive"));
    }
    if n.level > 12 {
        return Err(Invalid::at("noise.level", "levels above 12 are not supported by the samplers"));
    }
    Ok(())
}

fn sample_noise(ctx: &Ctx, n: &NoiseCfg) -> Result<Noise> {
    Ok(match n.kind {
        NoiseKind::FbmSum => {
            let b1 = FbmSampler::new(n.hurst[0], n.horizon[0], n.level)?.sample(n.dim, ctx.seed_for(0))?;
            let b2 = FbmSampler::new(n.hurst[1], n.horizon[1], n.level)?.sample(n.dim, ctx.seed_for(1))?;
            Noise { field: sum_field(&b1, &b2)?, paths: Some((b1, b2)) }
        }
        NoiseKind::Sheet => {
            let g = Grid2D::new(n.horizon[0], n.horizon[1], n.level, n.level)?;
            Noise { field: SheetSampler::new(n.hurst, g)?.sample(n.dim, ctx.seed_for(0))?, paths: None }
        }
    })
}

fn spatial_grid(space: &SpaceCfg, dim: usize, values: &[f64]) -> Result<SpatialGrid> {
    Ok(match space.half_width {
        Some(a) => SpatialGrid::new(dim, a, space.bins)?,
        None => SpatialGrid::auto(values, &vec![0.0; dim], space.margin, space.bins)?,
    })
}

fn sample_field(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["noise"])?;
    let n: NoiseCfg = ctx.cfg.section("noise")?;
    check_noise(&n)?;
    let noise = sample_noise(ctx, &n)?;
    ctx.out.write_with("field.csv", |b| write_field_csv(&noise.field, b))?;
    ctx.out.write_with("field.bin", |b| write_field_binary(&noise.field, b))?;
    if let Some((b1, b2)) = &noise.paths {
        ctx.out.write_with("beta1.csv", |b| write_path_csv(b1, b))?;
        ctx.out.write_with("beta2.csv", |b| write_path_csv(b2, b))?;
    }
    ctx.out.write_json(
        "summary.json",
        &json!({ "grid": noise.field.grid(), "dim": noise.field.dim(), "sup_norm": noise.field.sup_norm() }),
    )
}

fn local_time(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["noise", "space", "local_time"])?;
    let n: NoiseCfg = ctx.cfg.section("noise")?;
    check_noise(&n)?;
    let space: SpaceCfg = ctx.cfg.section_or_default("space")?;
    let lc: LocalTimeCfg = ctx.cfg.section_or_default("local_time")?;
    if lc.method == LocalTimeMethod::Convolved && n.kind != NoiseKind::FbmSum {
        return Err(Invalid::at("local_time.method", "the convolved local time needs an fbm_sum field").into());
    }
    if lc.lattice.iter().any(|l| *l > n.level) {
        return Err(Invalid::at("local_time.lattice", "lattice levels exceed noise.level").into());
    }
    let noise = sample_noise(ctx, &n)?;
    let sg = spatial_grid(&space, n.dim, noise.field.values())?;
    let lt: LocalTime = match (lc.method, &noise.paths) {
        (LocalTimeMethod::Convolved, Some((b1, b2))) => {
            convolve_local_times(&occupation_density_path(b1, &sg)?, &occupation_density_path(b2, &sg)?)?
        }
        _ => occupation_density(&noise.field, &sg)?,
    };
    let lat = lt.lattice(lc.lattice)?;
    ctx.out.write_with("local_time.csv", |b| lat.write_csv(b))?;
    let [m1, m2] = lat.grid().nodes();
    let mass: f64 = lat.at(m1 - 1, m2 - 1).iter().sum::<f64>() * lt.sgrid().cell_volume();
    ctx.out.write_json(
        "summary.json",
        &json!({
            "method": lc.method,
            "spatial_grid": lt.sgrid(),
            "lattice": lat.grid(),
            "terminal_mass": mass,
        }),
    )
}

fn averaged_field(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["noise", "space", "drift", "averaged"])?;
    let n: NoiseCfg = ctx.cfg.section("noise")?;
    check_noise(&n)?;
    let space: SpaceCfg = ctx.cfg.section_or_default("space")?;
    let drift: DriftCfg = ctx.cfg.section("drift")?;
    let ac: AveragedCfg = ctx.cfg.section("averaged")?;
    let b = drift.spec()?;
    if b.dim() != n.dim {
        return Err(Invalid::at("drift.dim", format!("drift has d = {} but the noise has d = {}", b.dim(), n.dim)).into());
    }
    let xs: Vec<Vec<f64>> = ac.x.iter().map(Point::to_vec).collect();
    if xs.is_empty() || xs.iter().any(|x| x.len() != n.dim) {
        return Err(Invalid::at("averaged.x", format!("need a nonempty list of points with {} coordinates", n.dim)).into());
    }
    if ac.levels.iter().any(|l| *l > n.level) {
        return Err(Invalid::at("averaged.levels", "levels exceed noise.level").into());
    }
    let noise = sample_noise(ctx, &n)?;
    let sg = spatial_grid(&space, n.dim, noise.field.values())?;
    let direct = averaged_field_direct(&b, &noise.field, &xs, ac.levels)?;
    let conv = averaged_field_convolved(b.clone(), &occupation_density(&noise.field, &sg)?, true)?
        .grid_values(&xs, ac.levels)?;
    let d = b.dim();
    let mut head: Vec<String> = vec!["t1".into(), "t2".into()];
    head.extend((1..=d).map(|k| format!("x_{k}")));
    for k in 1..=d {
        head.extend([format!("direct_{k}"), format!("convolved_{k}"), format!("abs_diff_{k}")]);
    }
    let head_ref: Vec<&str> = head.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&head_ref);
    let mut max_diff: f64 = 0.0;
    for (x, (fd, fc)) in xs.iter().zip(direct.iter().zip(&conv)) {
        let g = fd.grid();
        let [m1, m2] = g.nodes();
        for i in 0..m1 {
            for j in 0..m2 {
                let [t1, t2] = g.node(i, j);
                let mut row = vec![Cell::F(t1), Cell::F(t2)];
                row.extend(x.iter().map(|v| Cell::F(*v)));
                for (a, c) in fd.get(i, j).iter().zip(fc.get(i, j)) {
                    max_diff = max_diff.max((a - c).abs());
                    row.extend([Cell::F(*a), Cell::F(*c), Cell::F((a - c).abs())]);
                }
                csv.row(&row);
            }
        }
    }
    ctx.out.write("averaged.csv", &csv.into_bytes())?;
    ctx.out.write_json("summary.json", &json!({ "spatial_grid": sg, "max_abs_diff": max_diff }))
}

fn sew_demo(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["germ"])?;
    let gc: GermCfg = ctx.cfg.section("germ")?;
    if gc.beta.iter().any(|b| !(*b > 1.0)) {
        return Err(Invalid::at("germ.beta", "planted exponents must exceed 1").into());
    }
    let beta = gc.beta;
    // Additive part plus a planted defect of exponent beta.
    let germ = FnGerm::new(1, move |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
        let f = |x: [f64; 2]| x[0] * x[1].cos();
        o[0] = ((f(t) - f([t[0], s[1]])) - (f([s[0], t[1]]) - f(s))) + mixed_distance(s, t, beta);
    })?
    .with_exponents(GermExponents { alpha: [1.0, 1.0], beta });
    let mut opts = SewOptions { max_level: gc.max_level, ..Default::default() };
    if let Some(t) = gc.tol {
        opts.tol = t;
    }
    let r = sew(&germ, &Rect::unit(), &opts)?;
    ctx.out.write_with("levels.csv", |b| r.write_level_csv(b))?;
    let mut plot = Csv::new(&["level", "diff_norm", "observed_order"]);
    for l in &r.levels {
        plot.row(&[Cell::I(l.level as i64), Cell::F(l.diff_norm), Cell::F(l.observed_order)]);
    }
    ctx.out.write("sew_plot.csv", &plot.into_bytes())?;
    ctx.out.write_json(
        "summary.json",
        &json!({
            "value": r.value,
            "converged": r.converged,
            "final_level": r.final_level,
            "observed_order": r.observed_order,
            "axis_orders": r.axis_orders,
            "residual_estimate": r.residual_estimate,
            "fitted_constant": r.fitted_constant,
            "defects": r.defects,
        }),
    )
}

fn write_solve(ctx: &mut Ctx, main: &str, field: &Field2D, report: &nly2d::solver::SolveReport) -> Result<()> {
    ctx.out.write_with(main, |b| write_field_csv(field, b))?;
    ctx.out.write_with("iterations.csv", |b| report.write_iteration_csv(b))?;
    ctx.out.write_json("report.json", report)
}

fn solve_nly(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["nly", "drift", "solver"])?;
    let nc: NlyCfg = ctx.cfg.section("nly")?;
    let drift: DriftCfg = ctx.cfg.section("drift")?;
    let opts = ctx.cfg.section_or_default::<SolverCfg>("solver")?.options()?;
    let f = drift.spec()?;
    if nc.xi.len() != f.dim() {
        return Err(Invalid::at("nly.xi", format!("expected {} components", f.dim())).into());
    }
    let grid = Grid2D::new(nc.horizon[0], nc.horizon[1], nc.level, nc.level)?;
    let c = nc.coupling;
    let a = FnField::new(f.dim(), move |t: [f64; 2], x: &[f64], o: &mut [f64]| {
        f.eval(x, o);
        o.iter_mut().for_each(|v| *v *= c * t[0] * t[1]);
    });
    let xi = BoundaryData::constant(&nc.xi, &grid)?;
    let report = picard_solve(&a, &xi, &grid, &opts)?;
    let theta = report.theta.clone();
    write_solve(ctx, "theta.csv", &theta, &report)
}

fn solve_sde(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["noise", "space", "drift", "sde", "solver"])?;
    let n: NoiseCfg = ctx.cfg.section("noise")?;
    check_noise(&n)?;
    let space: SpaceCfg = ctx.cfg.section_or_default("space")?;
    let b = ctx.cfg.section::<DriftCfg>("drift")?.spec()?;
    let sc: SdeCfg = ctx.cfg.section("sde")?;
    let opts = ctx.cfg.section_or_default::<SolverCfg>("solver")?.options()?;
    if sc.xi.len() != n.dim || b.dim() != n.dim {
        return Err(Invalid::at("sde.xi", format!("xi and the drift need {} components", n.dim)).into());
    }
    let noise = sample_noise(ctx, &n)?;
    let sg = spatial_grid(&space, n.dim, noise.field.values())?;
    let xi = BoundaryData::constant(&sc.xi, noise.field.grid())?;
    let (x, report) = solve_regularized_sde(&b, &noise.field, &xi, &sg, &opts)?;
    write_solve(ctx, "x.csv", &x, &report)
}

fn scan(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["scan"])?;
    let sc: ScanCfg = ctx.cfg.section("scan")?;
    if sc.hurst.iter().any(|h| !(*h > 0.0 && *h < 1.0)) {
        return Err(Invalid::at("scan.hurst", "Hurst parameters must lie in (0,1)").into());
    }
    if sc.lambdas.is_empty() {
        return Err(Invalid::at("scan.lambdas", "need at least one lambda").into());
    }
    let source = match sc.source {
        NoiseKind::FbmSum => {
            ScanSource::FbmSum { hurst: sc.hurst, horizon: sc.horizon, level: sc.level, dim: sc.dim }
        }
        NoiseKind::Sheet => ScanSource::Sheet {
            hurst: sc.hurst,
            grid: Grid2D::new(sc.horizon[0], sc.horizon[1], sc.level, sc.level)?,
            dim: sc.dim,
        },
    };
    let opts = ScanOptions {
        lambdas: sc.lambdas.clone(),
        seeds: sc.seeds,
        base_seed: ctx.seed_for(0),
        bins: sc.bins,
        scales: sc.scales.clone(),
    };
    let rows = regularity_scan(&source, &opts)?;
    ctx.out.write_with("scan.csv", |b| write_scan_csv(&rows, b))?;
    let mut plot = Csv::new(&["lambda", "axis", "gamma_hat", "gamma_se", "gamma_floor"]);
    for r in &rows {
        for (k, a) in r.axes.iter().enumerate() {
            plot.row(&[Cell::F(r.lambda), Cell::I(k as i64 + 1), Cell::F(a.gamma_hat), Cell::F(a.gamma_se), Cell::F(a.gamma_floor)]);
        }
    }
    ctx.out.write("scan_plot.csv", &plot.into_bytes())?;
    ctx.out.write_json("summary.json", &json!({ "rows": rows }))
}

fn wave_problem(ctx: &Ctx, wc: &WaveCfg, h: DriftSpec) -> Result<WaveProblem> {
    if !(wc.horizon > 0.0) {
        return Err(Invalid::at("wave.horizon", "must be positive").into());
    }
    let corner = wc.corner;
    let (b1, b2) = match &wc.boundary {
        BoundaryCfg::Fbm { hurst } => {
            if !(*hurst > 0.0 && *hurst < 1.0) {
                return Err(Invalid::at("wave.boundary.hurst", "must lie in (0,1)").into());
            }
            let s = FbmSampler::new(*hurst, wc.horizon, wc.level)?;
            let shift = |p: Path1D| p.map(|v| v + corner);
            (shift(s.sample(1, ctx.seed_for(0))?), shift(s.sample(1, ctx.seed_for(1))?))
        }
        BoundaryCfg::Sine { amplitude, frequency } => {
            let mk = |k: usize| {
                let (a, f) = (amplitude[k], frequency[k]);
                Path1D::from_fn(wc.horizon, wc.level, 1, move |t, o| o[0] = corner + a * (f * t).sin())
            };
            (mk(0)?, mk(1)?)
        }
    };
    Ok(WaveProblem::new(h, b1, b2)?.with_coupling(wc.coupling))
}

fn wave_sgrid(p: &WaveProblem, space: &SpaceCfg) -> Result<SpatialGrid> {
    let all: Vec<f64> = p.beta1.values().iter().chain(p.beta2.values()).copied().collect();
    spatial_grid(space, 1, &all)
}

fn wave(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["wave", "drift", "space", "solver"])?;
    let wc: WaveCfg = ctx.cfg.section("wave")?;
    let h = ctx.cfg.section::<DriftCfg>("drift")?.spec()?;
    let space: SpaceCfg = ctx.cfg.section_or_default("space")?;
    let opts = ctx.cfg.section_or_default::<SolverCfg>("solver")?.options()?;
    let p = wave_problem(ctx, &wc, h.clone())?;
    let sg = wave_sgrid(&p, &space)?;
    let sol = solve_wave(&p, &sg, &opts)?;
    ctx.out.write_with("wave.csv", |b| sol.write_csv(b))?;
    let residual = if h.is_smooth() { Some(wave_residual(&sol, &h)?) } else { None };
    ctx.out.write_json(
        "report.json",
        &json!({
            "coupling": sol.coupling,
            "boundary_error": sol.boundary_error,
            "residual": residual,
            "solve": sol.report,
        }),
    )
}

fn table_json(t: &MollificationTable) -> serde_json::Value {
    json!({
        "shape": t.shape,
        "rows": t.rows,
        "strictly_decreasing": t.strictly_decreasing,
        "mean_ratio": t.mean_ratio,
        "cauchy": t.cauchy,
    })
}

fn mollify(ctx: &mut Ctx) -> Result<()> {
    let mc: MollifyCfg = ctx.cfg.section("mollify")?;
    let eps = mc.eps.clone();
    nly2d::solver::check_eps(&eps).map_err(|e| Invalid::at("mollify.eps", e.to_string()))?;
    let space: SpaceCfg = ctx.cfg.section_or_default("space")?;
    let opts = ctx.cfg.section_or_default::<SolverCfg>("solver")?.options()?;
    let b = ctx.cfg.section::<DriftCfg>("drift")?.spec()?;
    let (tables, comparison) = match mc.target {
        MollifyTarget::Sde => {
            ctx.cfg.expect_sections(&["mollify", "noise", "space", "drift", "solver"])?;
            let n: NoiseCfg = ctx.cfg.section("noise")?;
            check_noise(&n)?;
            let xi_v = mc.xi.clone().ok_or_else(|| Invalid::at("mollify.xi", "the sde target needs an initial value"))?;
            if xi_v.len() != n.dim || b.dim() != n.dim {
                return Err(Invalid::at("mollify.xi", format!("xi and the drift need {} components", n.dim)).into());
            }
            let noise = sample_noise(ctx, &n)?;
            let sg = spatial_grid(&space, n.dim, noise.field.values())?;
            let xi = BoundaryData::constant(&xi_v, noise.field.grid())?;
            match mc.shape.single() {
                Some(shape) => (vec![mollification_study(&b, &eps, shape, &noise.field, &xi, &sg, &opts)?], None),
                None => {
                    let c = compare_mollifiers(&b, &eps, &noise.field, &xi, &sg, &opts)?;
                    (vec![c.gaussian.clone(), c.triangular.clone()], Some(c))
                }
            }
        }
        MollifyTarget::Wave => {
            ctx.cfg.expect_sections(&["mollify", "wave", "space", "drift", "solver"])?;
            let wc: WaveCfg = ctx.cfg.section("wave")?;
            let p = wave_problem(ctx, &wc, b)?;
            let sg = wave_sgrid(&p, &space)?;
            match mc.shape.single() {
                Some(shape) => (vec![wave_mollification_study(&p, &eps, shape, &sg, &opts)?], None),
                None => {
                    let c = compare_wave_mollifiers(&p, &eps, &sg, &opts)?;
                    (vec![c.gaussian.clone(), c.triangular.clone()], Some(c))
                }
            }
        }
    };
    for t in &tables {
        let name = match t.shape {
            nly2d::drift::Mollifier::Gaussian => "cauchy_gaussian.csv",
            nly2d::drift::Mollifier::Triangular => "cauchy_triangular.csv",
        };
        ctx.out.write_with(name, |b| t.write_csv(b))?;
    }
    ctx.out.write_json(
        "summary.json",
        &json!({
            "target": mc.target,
            "tables": tables.iter().map(table_json).collect::<Vec<_>>(),
            "limit_distance": comparison.as_ref().map(|c| c.limit_distance),
            "final_gap": comparison.as_ref().map(|c| c.final_gap),
            "shapes_agree": comparison.as_ref().map(|c| c.agree),
        }),
    )
}

fn conditions(ctx: &mut Ctx) -> Result<()> {
    ctx.cfg.expect_sections(&["conditions"])?;
    let c: ConditionsCfg = ctx.cfg.section("conditions")?;
    let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Invalid::at(format!("conditions.{k}"), "missing key for this selector"));
    let mut p = RegularityParams { zeta: need(c.zeta, "zeta")?, ..Default::default() };
    if let Some(l) = c.lambda {
        p.lambda = l;
    }
    match c.which {
        ConditionSet::General => {
            p.alpha = need(c.alpha, "alpha")?;
            p.gamma = c.gamma.ok_or_else(|| Invalid::at("conditions.gamma", "missing key for this selector"))?;
            p.eta = c.eta;
            if let Some(v) = c.p {
                p.p = v;
            }
            if let Some(v) = c.q {
                p.q = v;
            }
        }
        which => {
            let h = c.hurst.as_ref().ok_or_else(|| Invalid::at("conditions.hurst", "missing key for this selector"))?;
            p.hurst = match (which, h.as_slice()) {
                (ConditionSet::FbmPlusDeterministic, [h]) => [*h, *h],
                (ConditionSet::FbmPlusDeterministic, _) => {
                    return Err(Invalid::at("conditions.hurst", "expected a single Hurst parameter").into())
                }
                (_, [h1, h2]) => [*h1, *h2],
                _ => return Err(Invalid::at("conditions.hurst", "expected two Hurst parameters").into()),
            };
            p.d = c.d.ok_or_else(|| Invalid::at("conditions.d", "missing key for this selector"))?;
        }
    }
    let v = check_conditions(&p, c.which)?;
    ctx.out.write_json("verdict.json", &json!({ "params": p, "verdict": v, "slack": v.slack() }))
}
