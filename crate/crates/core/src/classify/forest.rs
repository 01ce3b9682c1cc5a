//! Random forest classifier on fixed embeddings: bootstrap resampling,
//! class-weighted Gini splits over random feature subsets, leaf class
//! histograms averaged at prediction time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Dimensions examined per split; defaults to floor(sqrt(dim)).
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    /// Inverse-class-frequency sample weights.
    pub balanced: bool,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_features: None,
            bootstrap: true,
            balanced: true,
            max_depth: None,
            min_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if self.min_leaf < 1 {
            return Err(Error::Config("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TreeNode {
    Leaf {
        /// Weighted class distribution, normalized to sum 1.
        dist: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn leaf_dist(&self, x: &[f64]) -> &[f64] {
        match self {
            TreeNode::Leaf { dist } => dist,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.leaf_dist(x)
                } else {
                    right.leaf_dist(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Forest {
    pub config: ForestConfig,
    pub n_classes: usize,
    pub dim: usize,
    pub trees: Vec<TreeNode>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn gini(weighted: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let mut g = 1.0;
    for &w in weighted {
        let p = w / total;
        g -= p * p;
    }
    g
}

struct TreeBuilder<'a> {
    data: &'a [Vec<f64>],
    labels: &'a [usize],
    weights: &'a [f64],
    n_classes: usize,
    max_features: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
}

impl TreeBuilder<'_> {
    fn class_histogram(&self, indices: &[usize]) -> Vec<f64> {
        let mut hist = vec![0.0; self.n_classes];
        for &i in indices {
            hist[self.labels[i]] += self.weights[i];
        }
        hist
    }

    fn leaf(&self, hist: Vec<f64>) -> TreeNode {
        let total: f64 = hist.iter().sum();
        let dist = if total > 0.0 {
            hist.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / self.n_classes as f64; self.n_classes]
        };
        TreeNode::Leaf { dist }
    }

    fn grow(&self, indices: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> TreeNode {
        let hist = self.class_histogram(indices);
        let node_total: f64 = hist.iter().sum();
        let pure = hist.iter().filter(|&&w| w > 0.0).count() <= 1;
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || indices.len() < 2 * self.min_leaf {
            return self.leaf(hist);
        }

        let dim = self.data[0].len();
        let mut features = sample_features(rng, dim, self.max_features);
        features.sort_unstable();

        let parent_gini = gini(&hist, node_total);
        let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
        for &f in &features {
            let mut order: Vec<usize> = indices.to_vec();
            order.sort_by(|&a, &b| {
                self.data[a][f]
                    .partial_cmp(&self.data[b][f])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut left_hist = vec![0.0; self.n_classes];
            let mut left_total = 0.0;
            for w in 0..order.len() - 1 {
                let i = order[w];
                left_hist[self.labels[i]] += self.weights[i];
                left_total += self.weights[i];
                let (a, b) = (self.data[order[w]][f], self.data[order[w + 1]][f]);
                if a == b {
                    continue;
                }
                if w + 1 < self.min_leaf || order.len() - w - 1 < self.min_leaf {
                    continue;
                }
                let mut right_hist = vec![0.0; self.n_classes];
                for (c, &l) in right_hist.iter_mut().zip(hist.iter()) {
                    *c = l;
                }
                for (c, &l) in right_hist.iter_mut().zip(left_hist.iter()) {
                    *c -= l;
                }
                let right_total = node_total - left_total;
                let weighted_child = (left_total / node_total) * gini(&left_hist, left_total)
                    + (right_total / node_total) * gini(&right_hist, right_total);
                let decrease = parent_gini - weighted_child;
                let threshold = a + (b - a) / 2.0;
                let candidate = (decrease, f, threshold);
                // Strictly-better keeps the first candidate on ties: lowest
                // feature, then lowest threshold.
                if best.is_none() || decrease > best.unwrap().0 {
                    best = Some(candidate);
                }
            }
        }

        let Some((decrease, feature, threshold)) = best else {
            return self.leaf(hist);
        };
        if decrease <= 1e-12 {
            return self.leaf(hist);
        }
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.data[i][feature] <= threshold);
        if left_idx.is_empty() || right_idx.is_empty() {
            return self.leaf(hist);
        }
        let left = self.grow(&left_idx, depth + 1, rng);
        let right = self.grow(&right_idx, depth + 1, rng);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Distinct feature indices drawn without replacement.
fn sample_features(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<usize> {
    let k = k.min(dim);
    let mut pool: Vec<usize> = (0..dim).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let j = rng.random_range(0..pool.len());
        picked.push(pool.swap_remove(j));
    }
    picked
}

/// Train a forest on fixed embedding vectors.
pub fn train(data: &[Vec<f64>], labels: &[usize], config: &ForestConfig) -> Result<Forest> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no training embeddings".into()));
    }
    if data.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings vs {} labels",
            data.len(),
            labels.len()
        )));
    }
    let dim = data[0].len();
    if data.iter().any(|row| row.len() != dim) {
        return Err(Error::Dimension("embedding lengths differ".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(format!(
            "training labels contain {} distinct class(es); need at least 2",
            distinct.len()
        )));
    }
    let n_classes = labels.iter().max().unwrap() + 1;

    // Inverse class frequency: w_c = n / (K·n_c), over classes present.
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| {
            if config.balanced {
                data.len() as f64 / (present * counts[l] as f64)
            } else {
                1.0
            }
        })
        .collect();

    let max_features = config
        .max_features
        .unwrap_or_else(|| (dim as f64).sqrt().floor().max(1.0) as usize)
        .clamp(1, dim);
    let builder = TreeBuilder {
        data,
        labels,
        weights: &weights,
        n_classes,
        max_features,
        max_depth: config.max_depth,
        min_leaf: config.min_leaf,
    };

    let trees = (0..config.n_trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ (t as u64 + 1)));
            let indices: Vec<usize> = if config.bootstrap {
                (0..data.len())
                    .map(|_| rng.random_range(0..data.len()))
                    .collect()
            } else {
                (0..data.len()).collect()
            };
            builder.grow(&indices, 0, &mut rng)
        })
        .collect();

    Ok(Forest {
        config: config.clone(),
        n_classes,
        dim,
        trees,
    })
}

/// Average of per-tree leaf distributions plus the argmax label (lower index
/// on ties).
pub fn predict(forest: &Forest, embedding: &[f64]) -> Result<(usize, Vec<f64>)> {
    if embedding.len() != forest.dim {
        return Err(Error::Dimension(format!(
            "embedding has {} values, forest expects {}",
            embedding.len(),
            forest.dim
        )));
    }
    let mut probs = vec![0.0; forest.n_classes];
    for tree in &forest.trees {
        for (p, &d) in probs.iter_mut().zip(tree.leaf_dist(embedding)) {
            *p += d;
        }
    }
    let k = forest.trees.len() as f64;
    for p in probs.iter_mut() {
        *p /= k;
    }
    Ok((super::fcnn::argmax(&probs), probs))
}
