//! Random forest of CART trees grown on Gini impurity, for binary labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Unlimited when `None`.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features drawn at each node; `⌈√d⌉` when `None`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn features_for(&self, d: usize) -> Result<usize> {
        let k = self
            .features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize);
        if k == 0 || k > d {
            return Err(Error::Config(format!("features_per_split {k} not in 1..={d}")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        positive_fraction: f64,
        sample_count: usize,
    },
}

/// Nodes in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict_row<S: Scalar>(&self, row: &[S]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { positive_fraction, .. } => return *positive_fraction,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[*feature].f64() <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

struct Grower<'a, S> {
    x: &'a [S],
    d: usize,
    positive: Vec<bool>,
    cfg: &'a ForestConfig,
    n_features: usize,
    rng: SeededRng,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    score: f64,
    feature: usize,
    threshold: f64,
}

impl<S: Scalar> Grower<'_, S> {
    fn value(&self, i: usize, f: usize) -> f64 {
        self.x[i * self.d + f].f64()
    }

    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.positive[i]).count();
        self.nodes.push(TreeNode::Leaf {
            positive_fraction: pos as f64 / idx.len() as f64,
            sample_count: idx.len(),
        });
        self.nodes.len() - 1
    }

    /// Lowest weighted Gini over sorted-unique midpoints of feature `f`.
    /// The score is `Σ_side pos·neg/n`, proportional to weighted Gini.
    fn scan(&self, idx: &[usize], f: usize, best: &mut Option<BestSplit>) {
        let mut order: Vec<(f64, bool)> = idx.iter().map(|&i| (self.value(i, f), self.positive[i])).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = order.len();
        let total_pos = order.iter().filter(|p| p.1).count();
        let mut left_pos = 0usize;
        for j in 0..n - 1 {
            left_pos += usize::from(order[j].1);
            let (lo, hi) = (order[j].0, order[j + 1].0);
            if lo == hi {
                continue;
            }
            let nl = j + 1;
            let nr = n - nl;
            let right_pos = total_pos - left_pos;
            let score = (left_pos * (nl - left_pos)) as f64 / nl as f64
                + (right_pos * (nr - right_pos)) as f64 / nr as f64;
            let mut threshold = lo + (hi - lo) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            let better = match best {
                None => true,
                Some(b) => score < b.score,
            };
            if better {
                *best = Some(BestSplit { score, feature: f, threshold });
            }
        }
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let pos = idx.iter().filter(|&&i| self.positive[i]).count();
        let pure = pos == 0 || pos == idx.len();
        let depth_capped = self.cfg.max_depth.is_some_and(|m| depth >= m);
        if pure || depth_capped || idx.len() < self.cfg.min_samples_split.max(2) {
            return self.leaf(&idx);
        }
        let mut features = self.rng.sample_indices(self.d, self.n_features);
        features.sort_unstable();
        let mut best = None;
        for f in features {
            self.scan(&idx, f, &mut best);
        }
        let Some(best) = best else {
            return self.leaf(&idx);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.value(i, best.feature) <= best.threshold);
        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { positive_fraction: 0.0, sample_count: 0 });
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[me] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        me
    }
}

fn check_inputs<S: Scalar>(x: &Tensor<S>, y: &[Label]) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("feature matrix must be [n, d], got {:?}", x.shape())));
    }
    let (n, d) = (x.dim(0), x.dim(1));
    if n == 0 || d == 0 {
        return Err(Error::Data(format!("cannot fit a tree on an empty {n}x{d} matrix")));
    }
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} labels", y.len())));
    }
    Ok((n, d))
}

/// Grows one tree on rows `rows` of `x` (duplicates allowed).
fn grow_tree<S: Scalar>(
    x: &Tensor<S>,
    y: &[Label],
    rows: Vec<usize>,
    cfg: &ForestConfig,
    rng: SeededRng,
) -> Result<DecisionTree> {
    let d = x.dim(1);
    let mut g = Grower {
        x: x.data(),
        d,
        positive: y.iter().map(|l| l.is_positive()).collect(),
        cfg,
        n_features: cfg.features_for(d)?,
        rng,
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    Ok(DecisionTree { nodes: g.nodes })
}

/// Greedy CART on all rows of `x`. Ties go to the lowest feature index,
/// then the lowest threshold.
pub fn fit_tree<S: Scalar>(x: &Tensor<S>, y: &[Label], cfg: &ForestConfig, rng: SeededRng) -> Result<DecisionTree> {
    let (n, _) = check_inputs(x, y)?;
    grow_tree(x, y, (0..n).collect(), cfg, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
}

/// Tree `k` draws its bootstrap sample and node features from stream `k`
/// of `cfg.seed`, so trees can be grown in any order or in parallel.
pub fn fit_forest<S: Scalar>(x: &Tensor<S>, y: &[Label], cfg: &ForestConfig) -> Result<RandomForest> {
    let (n, d) = check_inputs(x, y)?;
    if cfg.n_trees == 0 {
        return Err(Error::Config("n_trees must be >= 1".into()));
    }
    cfg.features_for(d)?;
    let root = SeededRng::new(cfg.seed);
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.derive(k as u64);
            let rows = if cfg.bootstrap {
                (0..n).map(|_| rng.index(n)).collect()
            } else {
                (0..n).collect()
            };
            grow_tree(x, y, rows, cfg, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomForest { n_features: d, trees })
}

impl RandomForest {
    /// Mean over trees of the reached leaf's positive fraction.
    pub fn predict_proba<S: Scalar>(&self, x: &Tensor<S>) -> Result<Vec<f64>> {
        if x.rank() != 2 || x.dim(1) != self.n_features {
            return Err(Error::Dimension(format!(
                "forest trained on {} features, got {:?}",
                self.n_features,
                x.shape()
            )));
        }
        let inv = 1.0 / self.trees.len() as f64;
        Ok((0..x.dim(0))
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() * inv
            })
            .collect())
    }

    /// Abnormal iff the score is at least 0.5.
    pub fn predict<S: Scalar>(&self, x: &Tensor<S>) -> Result<Vec<Label>> {
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| if p >= 0.5 { Label::Abnormal } else { Label::Normal })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Abnormal as P, Normal as N};

    fn all_features(n_trees: usize) -> ForestConfig {
        ForestConfig { n_trees, bootstrap: false, features_per_split: Some(1), ..Default::default() }
    }

    #[test]
    fn pure_input_is_single_leaf() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let t = fit_tree(&x, &[P, P, P], &all_features(1), SeededRng::new(0)).unwrap();
        assert_eq!(t.nodes, vec![TreeNode::Leaf { positive_fraction: 1.0, sample_count: 3 }]);
    }

    #[test]
    fn one_dimensional_split_at_midpoint() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = fit_tree(&x, &[N, N, P, P], &all_features(1), SeededRng::new(0)).unwrap();
        // exhaustive Gini over thresholds 1.5, 2.5, 3.5: only 2.5 gives two pure sides
        let gini = |l: &[bool]| {
            let p = l.iter().filter(|&&b| b).count() as f64 / l.len() as f64;
            2.0 * p * (1.0 - p)
        };
        let labels = [false, false, true, true];
        let scores: Vec<f64> = (1..4)
            .map(|k| (k as f64 * gini(&labels[..k]) + (4 - k) as f64 * gini(&labels[k..])) / 4.0)
            .collect();
        assert_eq!(scores.iter().cloned().fold(f64::MAX, f64::min), scores[1]);
        assert!(scores[0] > 0.0 && scores[2] > 0.0);
        match &t.nodes[0] {
            TreeNode::Split { feature: 0, threshold, .. } => assert_eq!(*threshold, 2.5),
            other => panic!("{other:?}"),
        }
        assert_eq!(t.nodes.len(), 3);
    }

    #[test]
    fn xor_needs_two_levels() {
        let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let y = [N, P, P, N];
        let cfg = ForestConfig { n_trees: 1, bootstrap: false, max_depth: Some(2), ..Default::default() };
        let cfg = ForestConfig { features_per_split: Some(2), ..cfg };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        assert_eq!(f.predict(&x).unwrap(), y.to_vec());
        assert_eq!(f.trees[0].depth(), 2);
    }

    #[test]
    fn stump_scores_are_leaf_values() {
        let forest = RandomForest {
            n_features: 1,
            trees: vec![DecisionTree {
                nodes: vec![
                    TreeNode::Split { feature: 0, threshold: 0.0, left: 1, right: 2 },
                    TreeNode::Leaf { positive_fraction: 0.2, sample_count: 5 },
                    TreeNode::Leaf { positive_fraction: 0.8, sample_count: 5 },
                ],
            }],
        };
        let x = Tensor::new(vec![3, 1], vec![-1.0, 0.0, 3.0]).unwrap();
        assert_eq!(forest.predict_proba(&x).unwrap(), vec![0.2, 0.2, 0.8]);
        assert!(forest.predict_proba(&Tensor::<f64>::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn errors() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(fit_forest(&x, &[P], &ForestConfig::default()).is_err());
        assert!(fit_forest(&x, &[P, N], &ForestConfig { n_trees: 0, ..Default::default() }).is_err());
        assert!(fit_forest(&x, &[P, N], &ForestConfig { features_per_split: Some(4), ..Default::default() }).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = SeededRng::new(0);
        let x = Tensor::<f64>::uniform(&[30, 4], 1.0, &mut rng);
        let y: Vec<Label> = (0..30).map(|i| if x.row(i)[0] > 0.0 { P } else { N }).collect();
        let f = fit_forest(&x, &y, &ForestConfig { n_trees: 5, ..Default::default() }).unwrap();
        let back: RandomForest = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
