use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        n_samples: usize,
        impurity: f64,
        /// Impurity decrease weighted by the node's share of the bootstrap
        /// sample: `(n_t g_t - n_l g_l - n_r g_r) / N`.
        gini_decrease: f64,
    },
    Leaf {
        n_samples: usize,
        impurity: f64,
        counts: [usize; 2],
        class: u8,
    },
}

impl TreeNode {
    pub fn n_samples(&self) -> usize {
        match self {
            TreeNode::Split { n_samples, .. } | TreeNode::Leaf { n_samples, .. } => *n_samples,
        }
    }

    pub fn impurity(&self) -> f64 {
        match self {
            TreeNode::Split { impurity, .. } | TreeNode::Leaf { impurity, .. } => *impurity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
    pub bootstrap: Vec<usize>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { class, .. } => return *class,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub feature_names: Vec<String>,
    pub params: ForestParams,
    pub seed: u64,
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

fn class_counts(y: &[u8], idx: &[usize]) -> [usize; 2] {
    let mut c = [0, 0];
    for &i in idx {
        c[y[i] as usize] += 1;
    }
    c
}

struct Builder<'a> {
    x: &'a [&'a [f64]],
    y: &'a [u8],
    n_features: usize,
    mtry: usize,
    max_depth: usize,
    total: f64,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let counts = class_counts(self.y, idx);
        self.nodes.push(TreeNode::Leaf {
            n_samples: idx.len(),
            impurity: gini(counts),
            counts,
            class: u8::from(counts[1] > counts[0]),
        });
        self.nodes.len() - 1
    }

    fn best_split_on(&self, idx: &[usize], feature: usize, parent: f64) -> Option<(f64, f64)> {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));
        let n = order.len();
        let total = class_counts(self.y, &order);
        let mut left = [0usize; 2];
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            left[self.y[order[i]] as usize] += 1;
            let (v, next) = (self.x[order[i]][feature], self.x[order[i + 1]][feature]);
            if v == next {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let nl = (i + 1) as f64;
            let nr = (n - i - 1) as f64;
            let child = (nl * gini(left) + nr * gini(right)) / n as f64;
            let decrease = parent - child;
            if best.is_none_or(|b| decrease > b.0) {
                let mut threshold = v + (next - v) / 2.0;
                if threshold >= next {
                    threshold = v;
                }
                best = Some((decrease, threshold));
            }
        }
        best
    }

    fn find_split(&self, idx: &[usize], parent: f64, rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let mut features: Vec<usize> = (0..self.n_features).collect();
        features.shuffle(rng);
        let mut best: Option<(usize, f64, f64)> = None;
        for (visited, &f) in features.iter().enumerate() {
            // draw extra features only while no valid split has been found
            if visited >= self.mtry && best.is_some() {
                break;
            }
            if let Some((dec, thr)) = self.best_split_on(idx, f, parent) {
                if best.is_none_or(|b| dec > b.1) {
                    best = Some((f, dec, thr));
                }
            }
        }
        let (feature, decrease, threshold) = best?;
        let (left, right) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        Some(BestSplit {
            feature,
            threshold,
            decrease,
            left,
            right,
        })
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = class_counts(self.y, &idx);
        let impurity = gini(counts);
        if depth >= self.max_depth || idx.len() < 2 || impurity == 0.0 {
            return self.leaf(&idx);
        }
        let Some(split) = self.find_split(&idx, impurity, rng) else {
            return self.leaf(&idx);
        };
        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            n_samples: 0,
            impurity: 0.0,
            counts: [0, 0],
            class: 0,
        });
        let n_samples = idx.len();
        let gini_decrease = split.decrease * n_samples as f64 / self.total;
        let left = self.grow(split.left, depth + 1, rng);
        let right = self.grow(split.right, depth + 1, rng);
        self.nodes[slot] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            n_samples,
            impurity,
            gini_decrease,
        };
        slot
    }
}

impl ForestModel {
    /// Bootstrap-aggregated CART trees with `ceil(sqrt(F))` candidate
    /// features per split. Tree `t` draws from seed `seed + t`.
    pub fn fit(x: &[&[f64]], y: &[u8], feature_names: Vec<String>, params: &ForestParams, seed: u64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::invalid("forest needs matching non-empty inputs"));
        }
        let n_features = feature_names.len();
        if n_features == 0 || x.iter().any(|r| r.len() != n_features) {
            return Err(Error::dim(n_features, x.first().map_or(0, |r| r.len())));
        }
        if y.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        let mtry = (n_features as f64).sqrt().ceil() as usize;
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                let bootstrap: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut builder = Builder {
                    x,
                    y,
                    n_features,
                    mtry,
                    max_depth: params.max_depth,
                    total: n as f64,
                    nodes: Vec::new(),
                };
                builder.grow(bootstrap.clone(), 0, &mut rng);
                DecisionTree {
                    nodes: builder.nodes,
                    bootstrap,
                }
            })
            .collect();
        Ok(Self {
            trees,
            feature_names,
            params: *params,
            seed,
        })
    }

    /// Majority vote; ties go to class 0.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let votes: usize = self.trees.iter().map(|t| t.predict(x) as usize).sum();
        u8::from(2 * votes > self.trees.len())
    }

    /// Mean total Gini decrease per feature across trees, normalised to
    /// sum to 1 (all zeros when no tree ever splits).
    pub fn feature_importances(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.feature_names.len()];
        for tree in &self.trees {
            for node in &tree.nodes {
                if let TreeNode::Split { feature, gini_decrease, .. } = node {
                    imp[*feature] += gini_decrease;
                }
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }
}
