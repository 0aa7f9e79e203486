use metaselect::data::build_design;
use metaselect::dist::t_two_sided_p;
use metaselect::ensemble::{fit_ensemble, selection_matrix, EnsembleOptions};
use metaselect::estimation::{estimate_tau2, restricted_log_likelihood, tau2_upper_bound};
use metaselect::linear_select::{forward_ic_select, forward_test_select, univariate_select, Criterion, SelectOptions};
use metaselect::metacart::{grow_tree, TreeControls, TreeMode};
use metaselect::{fit, CovariateMeta, FitOptions, MetaDataset, ModelSpec};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Raw {
    y: Vec<f64>,
    v: Vec<f64>,
    x: Vec<Vec<f64>>,
}

impl Raw {
    fn dataset(&self) -> MetaDataset {
        let metas = (0..self.x.len()).map(|j| CovariateMeta::metric(format!("x{j}"))).collect();
        MetaDataset::from_columns(&self.y, &self.v, &self.x, metas).unwrap()
    }
}

fn raw(k: std::ops::Range<usize>, p: usize) -> impl Strategy<Value = Raw> {
    k.prop_flat_map(move |k| {
        (
            prop::collection::vec(-2.0..2.0f64, k),
            prop::collection::vec(0.01..0.5f64, k),
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, k), p),
        )
            .prop_map(|(y, v, x)| Raw { y, v, x })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reml_estimate_maximizes_restricted_likelihood(r in raw(8..30, 2), probes in prop::collection::vec(0.0..1.0f64, 20)) {
        let ds = r.dataset();
        let x = build_design(&ds, &ModelSpec::closed([0], []).unwrap()).unwrap();
        let est = estimate_tau2(&ds, &x, &FitOptions::default()).unwrap();
        let best = restricted_log_likelihood(&ds, &x, est.tau2).unwrap();
        let ub = tau2_upper_bound(&ds.y());
        for u in probes {
            prop_assert!(restricted_log_likelihood(&ds, &x, u * ub).unwrap() <= best + 1e-7);
        }
    }

    #[test]
    fn tau2_scales_with_squared_outcome_scale(r in raw(8..30, 1), a in 0.2..5.0f64) {
        let ds = r.dataset();
        let scaled = Raw {
            y: r.y.iter().map(|y| a * y).collect(),
            v: r.v.iter().map(|v| a * a * v).collect(),
            x: r.x.clone(),
        }
        .dataset();
        let spec = ModelSpec::closed([0], []).unwrap();
        let t = fit(&ds, &spec, &FitOptions::default()).unwrap().tau2;
        let ts = fit(&scaled, &spec, &FitOptions::default()).unwrap().tau2;
        prop_assert!((ts - a * a * t).abs() <= 1e-5 * (1.0 + a * a * t), "{ts} vs {}", a * a * t);
    }

    #[test]
    fn fit_invariant_to_study_order(r in raw(8..30, 2), shift in 1usize..100) {
        let ds = r.dataset();
        let k = ds.k();
        let order: Vec<usize> = (0..k).map(|i| (i * 7 + shift) % k).collect();
        let mut seen = order.clone();
        seen.sort();
        seen.dedup();
        prop_assume!(seen.len() == k);
        let spec = ModelSpec::closed([], [(0, 1)]).unwrap();
        let a = fit(&ds, &spec, &FitOptions::default());
        let b = fit(&ds.subset(&order), &spec, &FitOptions::default());
        if let (Ok(a), Ok(b)) = (a, b) {
            for j in 0..a.beta.len() {
                prop_assert!((a.beta[j] - b.beta[j]).abs() <= 1e-6 * (1.0 + a.beta[j].abs()));
                prop_assert!((a.sigma[(j, j)] - b.sigma[(j, j)]).abs() <= 1e-6 * (1.0 + a.sigma[(j, j)]));
            }
        }
    }

    #[test]
    fn p_value_decreases_with_statistic(t in 0.0..20.0f64, dt in 0.001..5.0f64, nu in 1.0..200.0f64) {
        let (p0, p1) = (t_two_sided_p(t, nu), t_two_sided_p(t + dt, nu));
        prop_assert!(p1 <= p0 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&p0));
    }

    #[test]
    fn linear_selections_respect_marginality(r in raw(10..40, 3)) {
        let ds = r.dataset();
        let aicc = SelectOptions::default();
        let bic = SelectOptions { criterion: Criterion::Bic, ..aicc };
        for res in [univariate_select(&ds, &aicc), forward_test_select(&ds, &aicc), forward_ic_select(&ds, &aicc), forward_ic_select(&ds, &bic)] {
            if let Ok(res) = res {
                prop_assert!(res.spec.is_marginality_closed());
            }
        }
    }

    #[test]
    fn leaves_partition_the_studies(r in raw(20..60, 3), re in any::<bool>()) {
        let ds = r.dataset();
        let mode = if re { TreeMode::Re } else { TreeMode::Fe };
        let controls = TreeControls { minsplit: 6, minbucket: 2, ..TreeControls::default() };
        let tree = grow_tree(&ds, mode, &controls);
        let mut members: Vec<usize> = tree.leaves().iter().flat_map(|l| l.members.iter().copied()).collect();
        members.sort();
        prop_assert_eq!(members, (0..ds.k()).collect::<Vec<_>>());
        for (i, s) in ds.studies().iter().enumerate() {
            prop_assert!(tree.route(&s.x).members.contains(&i));
        }
    }

    #[test]
    fn fixed_effect_trees_ignore_variance_scale(r in raw(20..60, 3), a in 0.1..10.0f64) {
        let ds = r.dataset();
        let scaled = Raw { v: r.v.iter().map(|v| a * v).collect(), ..r.clone() }.dataset();
        let controls = TreeControls { minsplit: 6, minbucket: 2, ..TreeControls::default() };
        let t1 = grow_tree(&ds, TreeMode::Fe, &controls);
        let t2 = grow_tree(&scaled, TreeMode::Fe, &controls);
        prop_assert_eq!(t1.tau2, 0.0);
        prop_assert_eq!(t1.render_text(), t2.render_text());
    }

    #[test]
    fn selection_matrix_follows_covariate_permutation(r in raw(30..50, 3), rot in 1usize..3) {
        let ds = r.dataset();
        let perm: Vec<usize> = (0..3).map(|j| (j + rot) % 3).collect();
        let permuted = Raw { x: perm.iter().map(|&j| r.x[j].clone()).collect(), ..r.clone() }.dataset();
        let opts = EnsembleOptions::new(12, 0.5, 3);
        let a = selection_matrix(&fit_ensemble(&ds, TreeMode::Fe, &opts).unwrap(), 3);
        let b = selection_matrix(&fit_ensemble(&permuted, TreeMode::Fe, &opts).unwrap(), 3);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((b.a[i][j] - a.a[perm[i]][perm[j]]).abs() < 1e-12);
            }
        }
    }
}
