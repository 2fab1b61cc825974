//! Bagged regression trees with random feature subsets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_matrix, ClassicalError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `max(1, floor(sqrt(width)))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: Some(10),
            min_leaf: 2,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
        samples: usize,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_one(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub width: usize,
}

impl ForestModel {
    pub fn predict_one(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_one(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_matrix(x, self.width)?;
        Ok(x.chunks(self.width).map(|r| self.predict_one(r)).collect())
    }
}

/// Best variance-reducing split of `rows` on `feature`: returns
/// `(child_sse, threshold)`. Thresholds sit midway between consecutive
/// distinct values; the first minimum in ascending threshold order wins.
pub(crate) fn best_split_on(
    x: &[f64],
    width: usize,
    y: &[f64],
    rows: &[usize],
    feature: usize,
    min_leaf: usize,
) -> Option<(f64, f64)> {
    let mut order: Vec<(f64, f64)> = rows.iter().map(|&r| (x[r * width + feature], y[r])).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = order.len();
    let total: f64 = order.iter().map(|p| p.1).sum();
    let total_sq: f64 = order.iter().map(|p| p.1 * p.1).sum();
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for k in 1..n {
        sum += order[k - 1].1;
        sq += order[k - 1].1 * order[k - 1].1;
        if k < min_leaf || n - k < min_leaf || order[k - 1].0 == order[k].0 {
            continue;
        }
        let (nl, nr) = (k as f64, (n - k) as f64);
        let sse_l = sq - sum * sum / nl;
        let sse_r = (total_sq - sq) - (total - sum) * (total - sum) / nr;
        let sse = sse_l + sse_r;
        if best.is_none_or(|b| sse < b.0) {
            let threshold = 0.5 * (order[k - 1].0 + order[k].0);
            best = Some((sse, threshold));
        }
    }
    best
}

struct Grower<'a> {
    x: &'a [f64],
    width: usize,
    y: &'a [f64],
    params: &'a ForestParams,
    max_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let n = rows.len();
        let mean = rows.iter().map(|&r| self.y[r]).sum::<f64>() / n as f64;
        let sse: f64 = rows.iter().map(|&r| (self.y[r] - mean).powi(2)).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean, samples: n });
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || n < 2 * self.params.min_leaf || sse <= 0.0 {
            return id;
        }

        let mut features: Vec<usize> = (0..self.width).collect();
        features.shuffle(&mut self.rng);
        // Try a random subset first; widen it one feature at a time only if
        // none of the chosen features admits a split. Ties go to the lowest
        // feature index.
        let mut k = self.max_features;
        let best = loop {
            let mut candidates = features[..k].to_vec();
            candidates.sort_unstable();
            let mut best: Option<(f64, usize, f64)> = None;
            for c in candidates {
                if let Some((s, t)) = best_split_on(self.x, self.width, self.y, &rows, c, self.params.min_leaf) {
                    if best.is_none_or(|b| s < b.0) {
                        best = Some((s, c, t));
                    }
                }
            }
            if best.is_some() || k == self.width {
                break best;
            }
            k += 1;
        };
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&row| self.x[row * self.width + feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

pub fn fit_tree(x: &[f64], width: usize, y: &[f64], rows: Vec<usize>, params: &ForestParams, seed: u64) -> Tree {
    let max_features = params
        .max_features
        .unwrap_or_else(|| ((width as f64).sqrt().floor() as usize).max(1))
        .clamp(1, width);
    let mut g = Grower {
        x,
        width,
        y,
        params,
        max_features,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    Tree { nodes: g.nodes }
}

pub fn fit_random_forest(x: &[f64], width: usize, y: &[f64], params: &ForestParams) -> Result<ForestModel> {
    let n = check_matrix(x, width)?;
    if y.len() != n {
        return Err(ClassicalError::Shape(format!("{n} rows but {} targets", y.len())));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(ClassicalError::Contract("n_trees and min_leaf must be positive".into()));
    }
    if n < params.min_leaf || n == 0 {
        return Err(ClassicalError::Contract(format!(
            "{n} rows cannot fill a leaf of {}",
            params.min_leaf
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ClassicalError::Contract("non-finite input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let trees = (0..params.n_trees)
        .map(|_| {
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let tree_seed = rng.random();
            fit_tree(x, width, y, rows, params, tree_seed)
        })
        .collect();
    Ok(ForestModel { trees, width })
}
