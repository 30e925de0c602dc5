use limchan_core::embed::{dense_interpolate, interpolation_matrix, EmbeddingConfig, Interpolation};
use limchan_core::forest::{fit_forest, fit_tree, DecisionTree, ForestConfig, RandomForest, TreeNode};
use limchan_core::ingest::Label;
use limchan_core::tensor::Tensor;
use limchan_core::SeededRng;
use proptest::prelude::*;

fn seq(steps: usize, h: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[steps, h], 3.0, &mut SeededRng::new(seed))
}

proptest! {
    #[test]
    fn normalized_interpolation_with_m_equal_t_is_concatenation(steps in 1usize..=32, h in 1usize..=8, seed in any::<u64>()) {
        let z = seq(steps, h, seed);
        let s = dense_interpolate(&z, &EmbeddingConfig { m: steps, interpolation: Interpolation::Normalized }).unwrap();
        for (a, b) in s.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn interpolation_is_linear(steps in 1usize..=40, h in 1usize..=6, m_frac in 0.0f64..1.0, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>(), raw in any::<bool>()) {
        let m = 1 + ((steps - 1) as f64 * m_frac) as usize;
        let cfg = EmbeddingConfig { m, interpolation: if raw { Interpolation::Raw } else { Interpolation::Normalized } };
        let z1 = seq(steps, h, seed);
        let z2 = seq(steps, h, seed.wrapping_add(1));
        let mix = Tensor::new(vec![steps, h], z1.data().iter().zip(z2.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = dense_interpolate(&mix, &cfg).unwrap();
        let s1 = dense_interpolate(&z1, &cfg).unwrap();
        let s2 = dense_interpolate(&z2, &cfg).unwrap();
        prop_assert_eq!(lhs.len(), m * h);
        for ((l, a), b) in lhs.data().iter().zip(s1.data()).zip(s2.data()) {
            prop_assert!((l - (alpha * a + beta * b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn raw_weights_are_bounded(steps in 1usize..60, m_frac in 0.0f64..1.0) {
        let m = 1 + ((steps - 1) as f64 * m_frac) as usize;
        let w = interpolation_matrix(steps, m, Interpolation::Raw).unwrap();
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn defaults_give_width_1024() {
    let s = dense_interpolate(&seq(500, 64, 0), &EmbeddingConfig::default()).unwrap();
    assert_eq!(s.len(), 1024);
}

fn labels_from(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|&b| if b { Label::Abnormal } else { Label::Normal }).collect()
}

fn brute_mean(forest: &RandomForest, x: &Tensor<f64>) -> Vec<f64> {
    (0..x.dim(0))
        .map(|i| {
            let mut s = 0.0;
            for t in &forest.trees {
                let mut n = 0;
                loop {
                    match &t.nodes[n] {
                        TreeNode::Leaf { positive_fraction, .. } => {
                            s += positive_fraction;
                            break;
                        }
                        TreeNode::Split { feature, threshold, left, right } => {
                            n = if x.row(i)[*feature] <= *threshold { *left } else { *right };
                        }
                    }
                }
            }
            s / forest.trees.len() as f64
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn forest_properties(n in 4usize..60, d in 1usize..6, seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 60)) {
        let x = Tensor::<f64>::uniform(&[n, d], 1.0, &mut SeededRng::new(seed));
        let y = labels_from(&bits[..n]);
        let cfg = ForestConfig { n_trees: 7, seed, ..Default::default() };
        let forest = fit_forest(&x, &y, &cfg).unwrap();
        let p = forest.predict_proba(&x).unwrap();
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let brute = brute_mean(&forest, &x);
        for (a, b) in p.iter().zip(&brute) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        let mut reversed = forest.clone();
        reversed.trees.reverse();
        let q = reversed.predict_proba(&x).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        let mut with_unanimous = forest.clone();
        with_unanimous.trees.push(DecisionTree { nodes: vec![TreeNode::Leaf { positive_fraction: 1.0, sample_count: 1 }] });
        let u = with_unanimous.predict_proba(&x).unwrap();
        prop_assert!(u.iter().zip(&p).all(|(a, b)| a >= b));

        // each tree, grown without bootstrap, beats the majority rate on its training set
        let full = ForestConfig { n_trees: 1, bootstrap: false, seed, ..cfg };
        let tree = fit_tree(&x, &y, &full, SeededRng::new(seed)).unwrap();
        let single = RandomForest { n_features: d, trees: vec![tree] };
        let pred = single.predict(&x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
        let pos = y.iter().filter(|l| l.is_positive()).count();
        prop_assert!(acc >= pos.max(n - pos));
    }

    #[test]
    fn degenerate_forest_equals_single_tree(n in 2usize..40, d in 1usize..5, seed in any::<u64>(), other in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 40)) {
        let x = Tensor::<f64>::uniform(&[n, d], 1.0, &mut SeededRng::new(seed));
        let y = labels_from(&bits[..n]);
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, features_per_split: Some(d), seed, ..Default::default() };
        let forest = fit_forest(&x, &y, &cfg).unwrap();
        let tree = fit_tree(&x, &y, &cfg, SeededRng::new(other)).unwrap();
        prop_assert_eq!(&forest.trees[0], &tree);
        let reseeded = fit_forest(&x, &y, &ForestConfig { seed: other, ..cfg }).unwrap();
        prop_assert_eq!(reseeded, forest);
    }
}

#[test]
fn separable_gaussians_fit_perfectly() {
    let mut rng = SeededRng::new(5);
    let mut data = Vec::new();
    let mut y = Vec::new();
    for i in 0..200 {
        let pos = i % 2 == 0;
        let c = if pos { 1.0 } else { -1.0 };
        data.push(c + 0.25 * rng.normal());
        data.push(c + 0.25 * rng.normal());
        y.push(if pos { Label::Abnormal } else { Label::Normal });
    }
    let x = Tensor::new(vec![200, 2], data).unwrap();
    let forest = fit_forest(&x, &y, &ForestConfig { n_trees: 25, seed: 1, ..Default::default() }).unwrap();
    assert_eq!(forest.predict(&x).unwrap(), y);
}

#[test]
fn forest_is_seed_deterministic_under_any_thread_count() {
    let mut rng = SeededRng::new(9);
    let x = Tensor::<f64>::uniform(&[120, 8], 1.0, &mut rng);
    let y: Vec<Label> = (0..120).map(|i| if x.row(i)[0] + x.row(i)[3] > 0.0 { Label::Abnormal } else { Label::Normal }).collect();
    let cfg = ForestConfig { n_trees: 20, seed: 42, ..Default::default() };
    let parallel = fit_forest(&x, &y, &cfg).unwrap();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| fit_forest(&x, &y, &cfg).unwrap());
    assert_eq!(parallel, serial);
    assert_ne!(parallel, fit_forest(&x, &y, &ForestConfig { seed: 43, ..cfg }).unwrap());
}
