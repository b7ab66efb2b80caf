use mfbdsde::cli::{parse_report, render_report, ReportRow};
use mfbdsde::coefficients::{builtin_scenarios, coefficients_by_name, Coefficients, LawSampler, ScenarioSpec};
use mfbdsde::measures::{directional_check, lions_fd, w2, w2_weighted, EmpiricalMeasure};
use mfbdsde::paths::{backward_ito_sum, forward_ito_sum, make_grid, sample_paths, Seed};
use proptest::prelude::*;

fn cloud(n: usize, dim: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-3.0f64..3.0, n * dim).prop_map(move |v| EmpiricalMeasure::new(v, dim).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_nodes_partition_the_horizon(t0 in -2.0f64..2.0, len in 0.01f64..5.0, n in 1usize..200) {
        let g = make_grid(t0, t0 + len, n).unwrap();
        prop_assert_eq!(g.nodes()[0], t0);
        prop_assert_eq!(g.nodes()[n], t0 + len);
        prop_assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        prop_assert!(g.steps().iter().all(|d| *d > 0.0));
        prop_assert!((g.steps().iter().sum::<f64>() - len).abs() < 1e-12 * len.max(1.0));
    }

    #[test]
    fn bundles_regenerate_bit_identically(seed in any::<u64>(), n in 1usize..6, np in 1usize..8, mm in 1usize..4) {
        let g = make_grid(0.0, 1.0, n).unwrap();
        let a = sample_paths(&g, 1, 1, np, mm, Seed::new(seed));
        let b = sample_paths(&g, 1, 1, np, mm, Seed::new(seed));
        prop_assert_eq!(&a.w.data, &b.w.data);
        prop_assert_eq!(&a.b.data, &b.b.data);
        prop_assert_ne!(&a.w.data[..], &a.b.data[..np.min(mm)]);
    }

    #[test]
    fn w2_is_symmetric_and_satisfies_the_triangle_inequality(a in cloud(5, 2), b in cloud(5, 2), c in cloud(5, 2)) {
        let ab = w2(&a, &b).unwrap();
        prop_assert_eq!(ab, w2(&b, &a).unwrap());
        prop_assert_eq!(w2(&a, &a).unwrap(), 0.0);
        prop_assert!(w2(&a, &c).unwrap() <= ab + w2(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn w2_ignores_atom_labels(a in cloud(6, 2), b in cloud(6, 2), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let pts: Vec<f64> = perm.iter().flat_map(|&i| a.point(i).to_vec()).collect();
        let relabelled = EmpiricalMeasure::new(pts, 2).unwrap();
        prop_assert_eq!(w2(&a, &b).unwrap(), w2(&relabelled, &b).unwrap());
    }

    #[test]
    fn weighted_metric_is_sandwiched(a in cloud(4, 3), b in cloud(4, 3), g1 in 0.1f64..4.0, g2 in 0.1f64..4.0) {
        let base = w2(&a, &b).unwrap();
        let wt = w2_weighted(&a, &b, 1, g1, g2).unwrap();
        prop_assert!(wt >= g1.min(g2).sqrt() * base - 1e-12);
        prop_assert!(wt <= g1.max(g2).sqrt() * base + 1e-12);
    }

    #[test]
    fn law_free_functionals_have_zero_lions_derivative(a in cloud(7, 1), i in 0usize..7) {
        prop_assert_eq!(lions_fd(|_: &EmpiricalMeasure| 2.5, &a, i, 1e-4).unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_functionals_have_exact_directional_expansion(a in cloud(6, 1), zeta in prop::collection::vec(-1.0f64..1.0, 6)) {
        let r = directional_check(|m: &EmpiricalMeasure| 3.0 * m.mean()[0] - 1.0, &a, &zeta, 0.1).unwrap();
        prop_assert!(r < 1e-12);
    }

    #[test]
    fn report_rows_round_trip(value in any::<f64>().prop_filter("finite", |v| v.is_finite()), se in 0.0f64..1e6, seed in any::<u64>(), pass in any::<bool>()) {
        let row = ReportRow {
            scenario: "S1".into(), check: "c".into(), metric: "m".into(), value, se,
            n_samples: 7, dt: 1.0 / 3.0, n: 64, m: 4, seed, pass,
        };
        let back = parse_report(&render_report(std::slice::from_ref(&row)).unwrap()).unwrap();
        prop_assert_eq!(back, vec![row]);
    }

    #[test]
    fn scenario_documents_round_trip(idx in 0usize..6, steps in 1usize..512, seed in any::<u64>(), tol in 1e-8f64..1.0) {
        let (mut spec, _) = builtin_scenarios().swap_remove(idx);
        spec.steps = steps;
        spec.seed = seed;
        spec.picard_tol = tol;
        prop_assert_eq!(ScenarioSpec::parse(&spec.to_document()).unwrap(), spec);
    }

    #[test]
    fn affine_g_splits_exactly(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0, law in cloud(8, 3)) {
        for name in ["S1", "S3", "S4", "S5"] {
            let c = coefficients_by_name(name).unwrap();
            prop_assert!(c.affine_g());
            let mut g = [0.0];
            c.g(&[x], y, &[z], &law, &mut g);
            let split = c.g1(&[x], y, &law).unwrap()[0] + c.g2(&law).unwrap()[0] * z;
            prop_assert!((g[0] - split).abs() <= 1e-12 * (1.0 + g[0].abs()));
        }
    }

    #[test]
    fn samplers_draw_deterministically(seed in any::<u64>(), mean in -2.0f64..2.0, sd in 0.01f64..2.0) {
        let s = LawSampler::Gaussian { mean, sd };
        prop_assert_eq!(s.draw(16, 1, Seed::new(seed)), s.draw(16, 1, Seed::new(seed)));
    }
}

#[test]
fn central_differences_are_second_order() {
    let mu = EmpiricalMeasure::from_scalars(&[0.3, -1.2, 2.0, 0.7]).unwrap();
    let phi = |m: &EmpiricalMeasure| m.mean()[0].powi(3) + m.second_moment()[0].sin();
    let exact = {
        let mean = mu.mean()[0];
        3.0 * mean * mean + mu.second_moment()[0].cos() * 2.0 * mu.point(1)[0]
    };
    let errs: Vec<f64> = [1e-1, 1e-2].iter().map(|&e| (lions_fd(phi, &mu, 1, e).unwrap()[0] - exact).abs()).collect();
    let slope = (errs[0] / errs[1]).log10();
    assert!((slope - 2.0).abs() < 0.2, "slope {slope}");
}

#[test]
fn ito_sums_are_isometric_and_independent() {
    let g = make_grid(0.0, 1.0, 16).unwrap();
    let n = 4000;
    let b = sample_paths(&g, 1, 1, n, n, Seed::new(8));
    let v: Vec<f64> = g.nodes().iter().map(|t| 1.0 + t).collect();
    let fwd_target: f64 = v[..16].iter().zip(g.steps()).map(|(v, d)| v * v * d).sum();
    let bwd_target: f64 = v[1..].iter().zip(g.steps()).map(|(v, d)| v * v * d).sum();
    let fwd: Vec<f64> = (0..n).map(|p| forward_ito_sum(&v, &b.w.series(p, 0)).unwrap().powi(2)).collect();
    let bwd: Vec<f64> = (0..n).map(|p| backward_ito_sum(&v, &b.b.series(p, 0)).unwrap().powi(2)).collect();
    for (sums, target) in [(fwd, fwd_target), (bwd, bwd_target)] {
        let (m, se) = mfbdsde::verify::mean_se(&sums);
        assert!((m - target).abs() <= 3.0 * se, "{m} vs {target} ± {se}");
    }
    let cross: Vec<f64> = (0..n).map(|p| b.w.get(p, 0)[0] * b.b.get(p, 0)[0] / g.steps()[0]).collect();
    let (m, se) = mfbdsde::verify::mean_se(&cross);
    assert!(m.abs() <= 3.0 * se && se < 3.0 / (n as f64).sqrt());
}
