//! CART trees with optional MIA splits, and random forests.
//!
//! MIA evaluates every (feature, threshold) twice, sending the node's missing
//! rows left and then right, plus the pure missing-vs-observed split. The
//! latter is stored as threshold `-inf` with missing rows going left.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::derive_seed;
use crate::data::MaskedMatrix;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Variance,
    Gini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub criterion: Criterion,
    pub mia: bool,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            max_depth: 6,
            min_samples_leaf: 5,
            criterion: Criterion::Variance,
            mia: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingGoes {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
        n: usize,
    },
    Split {
        feature: usize,
        /// Observed `x <= threshold` goes left.
        #[serde(with = "crate::data::float_serde")]
        threshold: f64,
        /// Node mean, used when the tree is truncated here.
        value: f64,
        n: usize,
        missing_goes: MissingGoes,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Same tree with every node at `depth` turned into a leaf. Growth is
    /// greedy and per-node randomness is keyed by position, so this equals
    /// a tree grown with `max_depth = depth`.
    pub fn truncated(&self, depth: usize) -> TreeNode {
        match self {
            TreeNode::Leaf { .. } => self.clone(),
            TreeNode::Split { value, n, .. } if depth == 0 => TreeNode::Leaf { value: *value, n: *n },
            TreeNode::Split {
                feature,
                threshold,
                value,
                n,
                missing_goes,
                left,
                right,
            } => TreeNode::Split {
                feature: *feature,
                threshold: *threshold,
                value: *value,
                n: *n,
                missing_goes: *missing_goes,
                left: Box::new(left.truncated(depth - 1)),
                right: Box::new(right.truncated(depth - 1)),
            },
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    /// Leaf reached by a row; `missing(j)` reports whether coordinate `j` is masked.
    fn route<'a>(&'a self, x: &[f64], missing: &dyn Fn(usize) -> bool) -> &'a TreeNode {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { .. } => return node,
                TreeNode::Split {
                    feature,
                    threshold,
                    missing_goes,
                    left,
                    right,
                    ..
                } => {
                    let go_left = if missing(*feature) {
                        *missing_goes == MissingGoes::Left
                    } else {
                        x[*feature] <= *threshold
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub spec: TreeSpec,
    pub d: usize,
    pub root: TreeNode,
}

/// Sufficient statistics of a set of responses.
#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Stats {
    fn add(&mut self, y: f64) {
        self.n += 1.0;
        self.sum += y;
        self.sumsq += y * y;
    }

    fn plus(self, o: Stats) -> Stats {
        Stats {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sumsq: self.sumsq + o.sumsq,
        }
    }

    fn minus(self, o: Stats) -> Stats {
        Stats {
            n: self.n - o.n,
            sum: self.sum - o.sum,
            sumsq: self.sumsq - o.sumsq,
        }
    }

    /// Node impurity times node size.
    fn impurity(&self, c: Criterion) -> f64 {
        if self.n <= 0.0 {
            return 0.0;
        }
        match c {
            Criterion::Variance => (self.sumsq - self.sum * self.sum / self.n).max(0.0),
            Criterion::Gini => {
                let p = self.sum / self.n;
                (2.0 * self.n * p * (1.0 - p)).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    missing_goes: MissingGoes,
    decrease: f64,
}

struct Builder<'a> {
    spec: &'a TreeSpec,
    /// Value of sample `s` on feature `j` (sample = bootstrap draw).
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
    y: Vec<f64>,
    max_features: Option<usize>,
    /// Seed of the per-node feature subsample (forests only).
    seed: Option<u64>,
}

impl Builder<'_> {
    fn stats(&self, samples: &[usize]) -> Stats {
        let mut s = Stats::default();
        for &i in samples {
            s.add(self.y[i]);
        }
        s
    }

    fn features(&self, node_id: u64) -> Vec<usize> {
        let d = self.values.len();
        match (self.max_features, self.seed) {
            (Some(k), Some(seed)) if k < d => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "node", &[node_id]));
                let mut f = sample(&mut rng, d, k).into_vec();
                f.sort();
                f
            }
            _ => (0..d).collect(),
        }
    }

    /// Best split among `features` for the node holding `samples`.
    fn best_split(&self, samples: &[usize], features: &[usize], total: Stats) -> Option<Candidate> {
        let c = self.spec.criterion;
        let min_leaf = self.spec.min_samples_leaf as f64;
        let parent = total.impurity(c);
        let mut best: Option<Candidate> = None;
        let consider = |cand: Candidate, best: &mut Option<Candidate>| {
            if cand.decrease > best.map(|b| b.decrease).unwrap_or(0.0) {
                *best = Some(cand);
            }
        };
        for &j in features {
            let mut obs: Vec<usize> = Vec::with_capacity(samples.len());
            let mut miss = Stats::default();
            for &s in samples {
                if self.missing[j][s] {
                    miss.add(self.y[s]);
                } else {
                    obs.push(s);
                }
            }
            obs.sort_by(|&a, &b| self.values[j][a].total_cmp(&self.values[j][b]));
            let obs_total = total.minus(miss);
            let has_miss = miss.n > 0.0;
            if has_miss && self.spec.mia && miss.n >= min_leaf && obs_total.n >= min_leaf {
                let dec = parent - miss.impurity(c) - obs_total.impurity(c);
                consider(
                    Candidate {
                        feature: j,
                        threshold: f64::NEG_INFINITY,
                        missing_goes: MissingGoes::Left,
                        decrease: dec,
                    },
                    &mut best,
                );
            }
            let mut left = Stats::default();
            for k in 0..obs.len().saturating_sub(1) {
                left.add(self.y[obs[k]]);
                let a = self.values[j][obs[k]];
                let b = self.values[j][obs[k + 1]];
                if a == b {
                    continue;
                }
                let threshold = a + (b - a) / 2.0;
                let right = obs_total.minus(left);
                for goes in [MissingGoes::Left, MissingGoes::Right] {
                    if goes == MissingGoes::Right && !has_miss {
                        continue;
                    }
                    let (l, r) = match goes {
                        MissingGoes::Left => (left.plus(miss), right),
                        MissingGoes::Right => (left, right.plus(miss)),
                    };
                    if l.n < min_leaf || r.n < min_leaf {
                        continue;
                    }
                    let dec = parent - l.impurity(c) - r.impurity(c);
                    consider(
                        Candidate {
                            feature: j,
                            threshold,
                            missing_goes: goes,
                            decrease: dec,
                        },
                        &mut best,
                    );
                }
            }
        }
        best.filter(|b| b.decrease > 1e-12 * (1.0 + parent))
    }

    /// `node_id` is the heap index of the node (root = 1).
    fn build(&self, samples: Vec<usize>, depth: usize, node_id: u64) -> TreeNode {
        let total = self.stats(&samples);
        let leaf = TreeNode::Leaf {
            value: total.sum / total.n,
            n: samples.len(),
        };
        if depth >= self.spec.max_depth
            || samples.len() < 2 * self.spec.min_samples_leaf
            || total.impurity(self.spec.criterion) <= 1e-14 * (1.0 + total.sumsq)
        {
            return leaf;
        }
        let features = self.features(node_id);
        let Some(cand) = self.best_split(&samples, &features, total) else {
            return leaf;
        };
        let (mut l, mut r) = (Vec::new(), Vec::new());
        for s in samples {
            let go_left = if self.missing[cand.feature][s] {
                cand.missing_goes == MissingGoes::Left
            } else {
                self.values[cand.feature][s] <= cand.threshold
            };
            if go_left {
                l.push(s)
            } else {
                r.push(s)
            }
        }
        let n = l.len() + r.len();
        let left = self.build(l, depth + 1, node_id.wrapping_mul(2));
        let right = self.build(r, depth + 1, node_id.wrapping_mul(2).wrapping_add(1));
        TreeNode::Split {
            feature: cand.feature,
            threshold: cand.threshold,
            value: total.sum / total.n,
            n,
            missing_goes: cand.missing_goes,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

fn check_inputs(x: &MaskedMatrix, y: &[f64], spec: &TreeSpec) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.nrows() == 0 {
        return invalid("cannot grow a tree on an empty node");
    }
    if spec.max_depth < 1 {
        return invalid("max_depth must be at least 1");
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite response");
    }
    if !spec.mia {
        if let Some(((i, j), _)) = x.mask().indexed_iter().find(|(_, &m)| m) {
            return Err(Error::MaskedInput { row: i, column: j });
        }
    }
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if let Some(v) = x.get(i, j) {
                if !v.is_finite() {
                    return invalid(format!("non-finite feature at ({i}, {j})"));
                }
            }
        }
    }
    Ok(())
}

fn grow(x: &MaskedMatrix, y: &[f64], rows: &[usize], spec: &TreeSpec, max_features: Option<usize>, seed: Option<u64>) -> Tree {
    let d = x.ncols();
    let values = (0..d)
        .map(|j| rows.iter().map(|&i| x.get(i, j).unwrap_or(0.0)).collect())
        .collect();
    let missing = (0..d).map(|j| rows.iter().map(|&i| x.is_missing(i, j)).collect()).collect();
    let b = Builder {
        spec,
        values,
        missing,
        y: rows.iter().map(|&i| y[i]).collect(),
        max_features,
        seed,
    };
    let root = b.build((0..rows.len()).collect(), 0, 1);
    Tree {
        spec: spec.clone(),
        d,
        root,
    }
}

/// Greedy CART. Without MIA the input must be fully observed.
pub fn fit_tree(x: &MaskedMatrix, y: &[f64], spec: &TreeSpec) -> Result<Tree> {
    check_inputs(x, y, spec)?;
    let rows: Vec<usize> = (0..x.nrows()).collect();
    Ok(grow(x, y, &rows, spec, None, None))
}

impl Tree {
    pub fn truncated(&self, depth: usize) -> Tree {
        Tree {
            spec: TreeSpec {
                max_depth: depth.min(self.spec.max_depth),
                ..self.spec.clone()
            },
            d: self.d,
            root: self.root.truncated(depth),
        }
    }

    /// `m` marks masked coordinates (`None` = fully observed). Plain trees
    /// reject masked rows.
    pub fn predict_row(&self, x: &[f64], m: Option<&[bool]>) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        if !self.spec.mia {
            if let Some(j) = m.and_then(|m| m.iter().position(|&b| b)) {
                return Err(Error::MaskedInput { row: 0, column: j });
            }
        }
        let missing = |j: usize| m.map(|m| m[j]).unwrap_or(false);
        match self.root.route(x, &missing) {
            TreeNode::Leaf { value, .. } => Ok(*value),
            TreeNode::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }

    pub fn predict(&self, x: &MaskedMatrix) -> Result<Vec<f64>> {
        predict_rows(x, |row, m| self.predict_row(row, m))
    }
}

/// Applies a row predictor; masked storage is replaced by 0 before the call.
pub(crate) fn predict_rows(x: &MaskedMatrix, f: impl Fn(&[f64], Option<&[bool]>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.nrows());
    let mut row = vec![0.0; x.ncols()];
    let mut m = vec![false; x.ncols()];
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            m[j] = x.is_missing(i, j);
            row[j] = x.get(i, j).unwrap_or(0.0);
        }
        out.push(f(&row, Some(&m)).map_err(|e| match e {
            Error::MaskedInput { column, .. } => Error::MaskedInput { row: i, column },
            e => e,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSpec {
    pub n_trees: usize,
    pub tree: TreeSpec,
    /// Fraction of features tried at each split.
    pub max_features: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            n_trees: 100,
            tree: TreeSpec {
                max_depth: 8,
                ..TreeSpec::default()
            },
            max_features: 1.0 / 3.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

pub fn fit_forest(x: &MaskedMatrix, y: &[f64], spec: &ForestSpec) -> Result<Forest> {
    check_inputs(x, y, &spec.tree)?;
    if spec.n_trees < 1 {
        return invalid("n_trees must be at least 1");
    }
    if !(spec.max_features > 0.0 && spec.max_features <= 1.0) {
        return invalid("max_features must lie in (0, 1]");
    }
    let n = x.nrows();
    let d = x.ncols();
    let k = ((spec.max_features * d as f64).ceil() as usize).clamp(1, d);
    let trees = (0..spec.n_trees)
        .into_par_iter()
        .map(|t| {
            let tree_seed = derive_seed(spec.seed, "tree", &[t as u64]);
            let rows: Vec<usize> = if spec.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow(x, y, &rows, &spec.tree, Some(k), Some(tree_seed))
        })
        .collect();
    Ok(Forest { trees })
}

impl Forest {
    /// The first `n_trees` trees, each truncated at `depth`. Tree `t` is
    /// seeded by its index, so this equals a forest grown with those limits.
    pub fn truncated(&self, n_trees: usize, depth: usize) -> Forest {
        Forest {
            trees: self.trees.iter().take(n_trees.max(1)).map(|t| t.truncated(depth)).collect(),
        }
    }

    pub fn predict_row(&self, x: &[f64], m: Option<&[bool]>) -> Result<f64> {
        let mut s = 0.0;
        for t in &self.trees {
            s += t.predict_row(x, m)?;
        }
        Ok(s / self.trees.len() as f64)
    }

    pub fn predict(&self, x: &MaskedMatrix) -> Result<Vec<f64>> {
        predict_rows(x, |row, m| self.predict_row(row, m))
    }
}
