use nly2d::noise::{sum_field, FbmSampler};
use nly2d::occupation::{occupation_density, occupation_density_path};
use nly2d::sewing::{partial_sum, sew, FnGerm, Rect, SewOptions};
use nly2d::solver::{check_conditions, ConditionSet, RegularityParams};
use nly2d::spatial::SpatialGrid;
use nly2d::wave::{rotate_from_goursat, rotate_to_goursat};
use nly2d::{Field2D, Grid2D};
use proptest::prelude::*;

fn field(level: u32) -> impl Strategy<Value = Field2D> {
    let m = (1usize << level) + 1;
    prop::collection::vec(-1e3f64..1e3, m * m).prop_map(move |v| Field2D::new(Grid2D::unit(level), 1, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_along_one_axis_adds_up(f in field(4), a in 0usize..17, b in 0usize..17, c in 0usize..17, k in 0usize..17) {
        let (s1, t1) = (a.min(b), a.max(b));
        let u1 = s1 + (t1 - s1) / 2;
        let (s2, t2) = (c.min(k), c.max(k));
        let whole = f.rect_increment_nodes((s1, s2), (t1, t2))[0];
        let parts = f.rect_increment_nodes((s1, s2), (u1, t2))[0] + f.rect_increment_nodes((u1, s2), (t1, t2))[0];
        prop_assert!((whole - parts).abs() <= 1e-9);
    }

    #[test]
    fn decomposition_is_exact_on_axes(f in field(3)) {
        let (z, y) = f.boundary_decompose();
        for k in 0..9 {
            prop_assert_eq!(y.get(k, 0)[0], 0.0);
            prop_assert_eq!(y.get(0, k)[0], 0.0);
            prop_assert_eq!(z.get(k, 0)[0], f.get(k, 0)[0]);
        }
        // The boundary part is additive.
        prop_assert!(z.rect_increment_nodes((1, 2), (7, 8))[0].abs() <= 1e-9);
    }

    #[test]
    fn rotation_round_trips(x in -10.0f64..10.0, y in -10.0f64..10.0) {
        let (t1, t2) = rotate_to_goursat(x, y);
        let (x2, y2) = rotate_from_goursat(t1, t2);
        prop_assert!((x - x2).abs() <= 1e-13 && (y - y2).abs() <= 1e-13);
    }

    #[test]
    fn exact_germ_sums_do_not_depend_on_level(a in -2.0f64..2.0, b in -2.0f64..2.0, n in 0u32..5) {
        // The increment of a smooth field is additive, so every partition gives the same sum.
        let germ = FnGerm::new(1, move |s: [f64; 2], t: [f64; 2], o: &mut [f64]| {
            let f = |x: [f64; 2]| (a * x[0]).sin() * (b * x[1]).cos();
            o[0] = (f(t) - f([t[0], s[1]])) - (f([s[0], t[1]]) - f(s));
        }).unwrap();
        let r = Rect::unit();
        let coarse = partial_sum(&germ, &r, [0, 0])[0];
        let fine = partial_sum(&germ, &r, [n, n + 1])[0];
        prop_assert!((coarse - fine).abs() <= 1e-12);
    }

    #[test]
    fn path_local_time_mass_and_monotonicity(seed in 0u64..1000) {
        let p = FbmSampler::new(0.5, 1.0, 7).unwrap().sample(1, seed).unwrap();
        let sg = SpatialGrid::auto(p.values(), &[0.0], 1.0, 64).unwrap();
        let lt = occupation_density_path(&p, &sg).unwrap();
        let dx = sg.cell_volume();
        let mut prev = vec![0.0; sg.total_bins()];
        for t in [0usize, 31, 64, 100, 128] {
            let d = lt.density_1d(t);
            let mass: f64 = d.iter().sum::<f64>() * dx;
            prop_assert!((mass - p.time(t)).abs() <= 1e-12);
            prop_assert!(d.iter().zip(&prev).all(|(a, b)| *a >= *b - 1e-15));
            prev = d;
        }
    }

    #[test]
    fn strict_inequalities_flip_with_zeta(zeta in 0.0f64..4.0, h in 0.05f64..0.95) {
        let p = RegularityParams { zeta, hurst: [h, h], d: 1, ..Default::default() };
        let v = check_conditions(&p, ConditionSet::FbmSum).unwrap();
        let bound = 1.0 + 3.0 - 1.0 / h;
        prop_assert_eq!(v.pass, zeta > bound);
        prop_assert!((v.slack() - (zeta - bound)).abs() <= 1e-12);
    }
}

#[test]
fn field_local_time_mass_is_area() {
    let s = FbmSampler::new(0.5, 1.0, 6).unwrap();
    let w = sum_field(&s.sample(1, 1).unwrap(), &s.sample(1, 2).unwrap()).unwrap();
    let sg = SpatialGrid::auto(w.values(), &[0.0], 1.0, 64).unwrap();
    let lt = occupation_density(&w, &sg).unwrap();
    let g = w.grid();
    for (i, j) in [(64, 64), (10, 50), (0, 3)] {
        let mass: f64 = lt.density((i, j)).unwrap().iter().sum::<f64>() * sg.cell_volume();
        let [t1, t2] = g.node(i, j);
        assert!((mass - t1 * t2).abs() < 1e-12, "{mass} vs {}", t1 * t2);
    }
}

#[test]
fn sewing_an_additive_germ_converges_immediately() {
    let germ = FnGerm::new(1, |s: [f64; 2], t: [f64; 2], o: &mut [f64]| o[0] = (t[0] - s[0]) * (t[1] - s[1])).unwrap();
    let r = sew(&germ, &Rect::unit(), &SewOptions { max_level: 6, ..Default::default() }).unwrap();
    assert!((r.value[0] - 1.0).abs() < 1e-14);
}
