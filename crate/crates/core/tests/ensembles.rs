use metaselect::ensemble::{fit_ensemble, selection_matrix, threshold_select, EnsembleOptions};
use metaselect::metacart::TreeMode;
use metaselect::{seed, CovariateMeta, MetaDataset};
use rand::Rng;

fn dataset(k: usize) -> MetaDataset {
    let mut rng = seed::rng(21);
    let cols: Vec<Vec<f64>> = (0..4).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.1)).collect();
    let y: Vec<f64> = (0..k)
        .map(|i| if cols[0][i] > 0.4 && cols[3][i] > 0.5 { 0.7 } else { 0.0 } + rng.random_range(-0.3..0.3))
        .collect();
    let metas = (0..4).map(|j| CovariateMeta::metric(format!("x{j}"))).collect();
    MetaDataset::from_columns(&y, &v, &cols, metas).unwrap()
}

#[test]
fn identical_across_thread_counts() {
    let ds = dataset(80);
    let opts = EnsembleOptions::new(40, 0.5, 99);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| selection_matrix(&fit_ensemble(&ds, TreeMode::Re, &opts).unwrap(), ds.p()))
    };
    let one = run(1);
    assert_eq!(one.to_csv(), run(3).to_csv());
    assert_eq!(one.to_json(), run(4).to_json());
}

#[test]
fn pair_frequencies_bounded_and_selections_nested() {
    let ds = dataset(100);
    for mode in [TreeMode::Fe, TreeMode::Re] {
        let a = selection_matrix(&fit_ensemble(&ds, mode, &EnsembleOptions::new(60, 0.5, 4)).unwrap(), ds.p());
        for i in 0..a.p {
            for j in 0..a.p {
                assert!(a.a[i][j] <= a.a[i][i].min(a.a[j][j]) + 1e-12);
                assert_eq!(a.a[i][j], a.a[j][i]);
            }
        }
        let mut previous = threshold_select(&a, 0.05).unwrap();
        for l in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let s = threshold_select(&a, l).unwrap();
            assert!(s.is_subset_of(&previous));
            assert!(s.is_marginality_closed());
            previous = s;
        }
    }
}
