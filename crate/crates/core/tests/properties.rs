mod common;

use common::{gaussian, report};
use farms::allocators::{ConstraintReport, SparsityConfig};
use farms::faer::Mat;
use farms::sampler::{baseline_alpha_linear, StepMode};
use farms::{
    assign_learning_rates, assign_sparsities, esd_of_matrix, farms_alpha_linear, hill_alpha,
    plan_subsamples, Esd, HillConfig, LrScheduleConfig, LsConfig, Metric, SubsampleConfig,
};
use proptest::prelude::*;

fn spectrum() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1e3, 4..200)
}

fn no_ls() -> LrScheduleConfig {
    LrScheduleConfig {
        layer_selection: LsConfig::disabled(),
        ..LrScheduleConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hill_is_scale_invariant(v in spectrum(), c in 1e-3f64..1e3) {
        let esd = Esd::new(v, 1).unwrap();
        if let Ok(a) = hill_alpha(&esd, &HillConfig::default()) {
            let b = hill_alpha(&esd.scaled(c), &HillConfig::default()).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a, "{} vs {}", a, b);
        }
    }

    #[test]
    fn stretching_the_tail_lowers_alpha(v in spectrum(), c in 1.01f64..10.0) {
        let cfg = HillConfig::default();
        let esd = Esd::new(v, 1).unwrap();
        let Ok(before) = hill_alpha(&esd, &cfg) else { return Ok(()) };
        let n = esd.len();
        let k = farms::spectral::resolve_k(n, &cfg);
        let mut stretched = esd.eigenvalues().to_vec();
        for x in &mut stretched[n - k..] {
            *x *= c;
        }
        let after = hill_alpha(&Esd::new(stretched, 1).unwrap(), &cfg).unwrap();
        prop_assert!(after < before, "{} !< {}", after, before);
    }

    #[test]
    fn concat_histogram_is_mean_of_parts(
        parts in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 12), 1..6),
        bins in 1usize..20,
    ) {
        let esds: Vec<Esd> = parts.iter().map(|p| Esd::new(p.clone(), 1).unwrap()).collect();
        let edges: Vec<f64> = (0..=bins).map(|i| 10.0 * i as f64 / bins as f64).collect();
        let pooled = Esd::concat(&esds).unwrap().histogram(&edges);
        for (b, h) in pooled.iter().enumerate() {
            let mean = esds.iter().map(|e| e.histogram(&edges)[b]).sum::<f64>() / esds.len() as f64;
            prop_assert!((h - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn plan_invariants(
        m in 1usize..3000,
        n in 1usize..3000,
        q in 0.5f64..4.0,
        grid in prop::option::of((1usize..12, 1usize..12)),
    ) {
        let cfg = SubsampleConfig {
            q_ratio: q,
            steps: grid.map_or(StepMode::Auto, |(r, c)| StepMode::Grid { rows: r, cols: c }),
            ..SubsampleConfig::default()
        };
        let plan = plan_subsamples((m, n), &cfg).unwrap();
        let (wr, wc) = plan.window;
        prop_assert!(wr >= 1 && wc >= 1 && wr <= m && wc <= n);
        prop_assert_eq!(plan.offsets[0], (0, 0));
        // several positions on an axis always reach its far edge
        let (last_r, last_c) = *plan.offsets.last().unwrap();
        prop_assert!(last_r == 0 || last_r == m - wr);
        prop_assert!(last_c == 0 || last_c == n - wc);
        if let Some((gr, gc)) = grid {
            prop_assert!(gr < 2 || last_r == m - wr);
            prop_assert!(gc < 2 || last_c == n - wc);
        }
        let mut sorted = plan.offsets.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), plan.offsets.len());
        for &(r, c) in &plan.offsets {
            prop_assert!(r + wr <= m && c + wc <= n);
        }
        if !plan.aspect_clamped && m >= n {
            // window aspect is within one unit of q
            prop_assert!((wr as f64 / q - wc as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn lr_bounds_and_monotonicity(alphas in prop::collection::vec(1.1f64..8.0, 2..30)) {
        let reports: Vec<_> = alphas.iter().enumerate()
            .map(|(i, &a)| report(&format!("l{i}"), (64, 64), a)).collect();
        let cfg = no_ls();
        let lr = assign_learning_rates(&reports, &cfg, Metric::Farms).unwrap().values();
        let (lo, hi) = (cfg.s1 * cfg.eta_t, cfg.s2 * cfg.eta_t);
        for i in 0..alphas.len() {
            prop_assert!(lo <= lr[i] && lr[i] <= hi);
            for j in 0..alphas.len() {
                if alphas[i] < alphas[j] {
                    prop_assert!(lr[i] <= lr[j]);
                }
            }
        }
    }

    #[test]
    fn lr_shift_invariance(alphas in prop::collection::vec(1.1f64..8.0, 2..20), shift in -1.0f64..5.0) {
        let mk = |s: f64| -> Vec<_> {
            alphas.iter().enumerate().map(|(i, &a)| report(&format!("l{i}"), (64, 64), a + s)).collect()
        };
        let a = assign_learning_rates(&mk(0.0), &no_ls(), Metric::Farms).unwrap().values();
        let b = assign_learning_rates(&mk(shift), &no_ls(), Metric::Farms).unwrap().values();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn sparsity_budget_bounds_monotone(
        layers in prop::collection::vec((1.1f64..8.0, 1usize..200), 1..30),
        target in 0.05f64..0.95,
        tau in 0.0f64..0.3,
    ) {
        let reports: Vec<_> = layers.iter().enumerate()
            .map(|(i, &(a, rows))| report(&format!("l{i}"), (rows, 16), a)).collect();
        let cfg = SparsityConfig { target, tau, ..SparsityConfig::default() };
        let res = assign_sparsities(&reports, &cfg, Metric::Farms).unwrap();
        let s = res.values();
        let w: Vec<f64> = reports.iter().map(|r| r.param_count as f64).collect();
        let mean = s.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
        prop_assert!((mean - target).abs() <= 1e-9, "mean {} target {}", mean, target);
        if let ConstraintReport::Sparsity { achieved_mean, .. } = res.constraint_report {
            prop_assert!((achieved_mean - target).abs() <= 1e-9);
        }
        for i in 0..s.len() {
            prop_assert!((cfg.clamp.0..=cfg.clamp.1).contains(&s[i]));
            for j in 0..s.len() {
                if layers[i].0 < layers[j].0 {
                    prop_assert!(s[i] <= s[j] + 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectra_are_transpose_invariant(m in 2usize..40, n in 2usize..40, seed in any::<u64>()) {
        let w = gaussian(m, n, seed);
        let wt = Mat::from_fn(n, m, |i, j| w[(j, i)]);
        let a = esd_of_matrix(w.as_ref()).unwrap();
        let b = esd_of_matrix(wt.as_ref()).unwrap();
        for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
            prop_assert!((x - y).abs() <= 1e-12 * a.max());
        }
        let cfg = SubsampleConfig::default();
        if let (Ok(x), Ok(y)) = (farms_alpha_linear(w.as_ref(), &cfg), farms_alpha_linear(wt.as_ref(), &cfg)) {
            prop_assert!((x - y).abs() <= 1e-9 * x);
        }
    }

    #[test]
    fn whole_window_equals_baseline(m in 2usize..60, n in 2usize..60, seed in any::<u64>()) {
        let w = gaussian(m, n, seed);
        let (r, c) = (m.max(n), m.min(n));
        let cfg = SubsampleConfig::whole_matrix(r, c);
        match (baseline_alpha_linear(w.as_ref(), &cfg.hill), farms_alpha_linear(w.as_ref(), &cfg)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}
