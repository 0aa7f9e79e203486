use metaselect::metacart::{fit_pruned_tree, grow_tree, tree_to_spec, PruneRule, SplitRule, TreeControls, TreeMode};
use metaselect::{seed, CovariateMeta, MetaDataset};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn dataset(k: usize, p: usize, s: u64, signal: impl Fn(&[f64]) -> f64) -> MetaDataset {
    let mut rng = seed::rng(s);
    let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.08)).collect();
    let y: Vec<f64> = (0..k)
        .map(|i| {
            let x: Vec<f64> = cols.iter().map(|c| c[i]).collect();
            signal(&x) + Normal::new(0.0, v[i].sqrt()).unwrap().sample(&mut rng)
        })
        .collect();
    let metas = (0..p).map(|j| CovariateMeta::metric(format!("x{j}"))).collect();
    MetaDataset::from_columns(&y, &v, &cols, metas).unwrap()
}

#[test]
fn planted_step_is_found_first() {
    let ds = dataset(100, 4, 3, |x| if x[2] > 0.5 { 1.0 } else { 0.0 });
    for mode in [TreeMode::Fe, TreeMode::Re] {
        let tree = grow_tree(&ds, mode, &TreeControls::default());
        let split = tree.root().split.expect("root split");
        assert_eq!(split.covariate, 2);
        match split.rule {
            SplitRule::Threshold { threshold } => assert!((threshold - 0.5).abs() < 0.1, "threshold {threshold}"),
            SplitRule::Binary => panic!("metric covariate split as binary"),
        }
    }
}

#[test]
fn pure_noise_prunes_to_root() {
    let mut root_only = 0;
    for s in 0..100 {
        let ds = dataset(60, 3, 1000 + s, |_| 0.0);
        let rule = PruneRule::default_for(TreeMode::Fe, ds.k());
        let tree = fit_pruned_tree(&ds, TreeMode::Fe, &TreeControls::default(), rule, s).unwrap();
        if tree.n_splits() == 0 {
            root_only += 1;
        }
    }
    assert!(root_only >= 90, "only {root_only} of 100 pruned to the root");
}

#[test]
fn homogeneous_random_effects_path_stays_near_zero() {
    let ds = dataset(100, 3, 11, |x| if x[0] > 0.5 { 0.8 } else { 0.0 });
    let tree = grow_tree(&ds, TreeMode::Re, &TreeControls::default());
    assert!(!tree.tau2_path.is_empty());
    // once the step is split off only sampling noise is left
    assert!(tree.tau2_path.iter().all(|&t| t < 0.02), "{:?}", tree.tau2_path);
}

#[test]
fn pruned_tree_spec_is_closed_and_uses_split_variables() {
    let ds = dataset(120, 4, 5, |x| if x[0] > 0.5 && x[1] > 0.5 { 1.0 } else { 0.0 });
    let tree = fit_pruned_tree(&ds, TreeMode::Fe, &TreeControls::default(), PruneRule { c: 0.5 }, 9).unwrap();
    let spec = tree_to_spec(&tree);
    assert!(spec.is_marginality_closed());
    assert_eq!(spec.mains, tree.split_variables());
    assert!(spec.interactions.contains(&(0, 1)), "{spec:?}");
}
