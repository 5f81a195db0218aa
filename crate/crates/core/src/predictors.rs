//! Downstream predictor families (regularized linear, tree, forest) with
//! cross-validated hyperparameters, and "best" selection across families.
//!
//! Inputs are all-continuous matrices: callers one-hot encode categorical
//! columns first. Linear models need fully observed input; trees and forests
//! accept masked cells only when grown with MIA.

use serde::{Deserialize, Serialize};

use crate::cv::{derive_seed, Folds};
use crate::data::{MaskedMatrix, TargetVector, Task};
use crate::error::{invalid, Error, Result};
use crate::glm::{cv_path, fit_glm, GlmFit, GlmGrid, GlmSpec, LambdaGrid, Loss};
use crate::tree::{fit_forest, fit_tree, predict_rows, Criterion, Forest, ForestSpec, Tree, TreeNode, TreeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Tree,
    Forest,
    /// CV choice among the three families above.
    Best,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Family::Linear),
            "tree" => Ok(Family::Tree),
            "forest" | "rf" => Ok(Family::Forest),
            "best" => Ok(Family::Best),
            _ => invalid(format!("unknown predictor family '{s}'")),
        }
    }
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::Tree => "tree",
            Family::Forest => "forest",
            Family::Best => "best",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub glm: GlmGrid,
    pub tree_depths: Vec<usize>,
    pub forest_trees: Vec<usize>,
    pub forest_depths: Vec<usize>,
    pub min_samples_leaf: usize,
    pub max_features: f64,
    pub folds: usize,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            glm: GlmGrid::default(),
            tree_depths: (2..=10).collect(),
            forest_trees: vec![50, 100],
            forest_depths: (4..=10).collect(),
            min_samples_leaf: 5,
            max_features: 1.0 / 3.0,
            folds: 5,
        }
    }
}

impl HyperGrid {
    /// Smaller grids for fast experiments.
    pub fn quick() -> Self {
        Self {
            glm: GlmGrid {
                lambdas: LambdaGrid::Auto {
                    count: 15,
                    min_ratio: 1e-4,
                },
                mixings: vec![0.0, 0.5, 1.0],
            },
            tree_depths: (2..=8).collect(),
            forest_trees: vec![50],
            forest_depths: vec![4, 6, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tree_depths.is_empty() || self.forest_trees.is_empty() || self.forest_depths.is_empty() {
            return invalid("hyperparameter grids must be non-empty");
        }
        if self.tree_depths.iter().chain(&self.forest_depths).any(|&d| d == 0 || d > 60) {
            return invalid("tree depths must lie in 1..=60");
        }
        if self.forest_trees.contains(&0) {
            return invalid("forest sizes must be positive");
        }
        if self.folds < 2 {
            return invalid("need at least 2 folds");
        }
        Ok(())
    }
}

pub fn loss_for(task: Task) -> Loss {
    match task {
        Task::Regression => Loss::Squared,
        Task::Binary => Loss::Logistic,
    }
}

pub fn criterion_for(task: Task) -> Criterion {
    match task {
        Task::Regression => Criterion::Variance,
        Task::Binary => Criterion::Gini,
    }
}

/// Fully resolved hyperparameters of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PredictorSpec {
    Linear(GlmSpec),
    Tree(TreeSpec),
    Forest(ForestSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FittedPredictor {
    Linear(GlmFit),
    Tree(Tree),
    Forest(Forest),
}

impl FittedPredictor {
    pub fn family(&self) -> Family {
        match self {
            FittedPredictor::Linear(_) => Family::Linear,
            FittedPredictor::Tree(_) => Family::Tree,
            FittedPredictor::Forest(_) => Family::Forest,
        }
    }

    /// `m` marks masked coordinates; masked storage in `x` is ignored.
    pub fn predict_row(&self, x: &[f64], m: Option<&[bool]>) -> Result<f64> {
        match self {
            FittedPredictor::Linear(fit) => {
                if let Some(j) = m.and_then(|m| m.iter().position(|&b| b)) {
                    return Err(Error::MaskedInput { row: 0, column: j });
                }
                if x.len() != fit.beta.len() {
                    return Err(Error::DimensionMismatch {
                        expected: fit.beta.len(),
                        got: x.len(),
                    });
                }
                Ok(fit.predict_row(x))
            }
            FittedPredictor::Tree(t) => t.predict_row(x, m),
            FittedPredictor::Forest(f) => f.predict_row(x, m),
        }
    }

    pub fn predict(&self, x: &MaskedMatrix) -> Result<Vec<f64>> {
        predict_rows(x, |row, m| self.predict_row(row, m))
    }
}

pub fn fit_with_spec(x: &MaskedMatrix, y: &TargetVector, spec: &PredictorSpec) -> Result<FittedPredictor> {
    match spec {
        PredictorSpec::Linear(s) => Ok(FittedPredictor::Linear(fit_glm(x.to_dense()?.view(), y.values(), s)?)),
        PredictorSpec::Tree(s) => Ok(FittedPredictor::Tree(fit_tree(x, y.values(), s)?)),
        PredictorSpec::Forest(s) => Ok(FittedPredictor::Forest(fit_forest(x, y.values(), s)?)),
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub spec: PredictorSpec,
    pub model: FittedPredictor,
    /// Fold-mean validation MSE (Brier score for binary targets).
    pub cv_loss: f64,
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Folds> {
    if n < 2 {
        return invalid("need at least 2 rows for cross-validation");
    }
    Folds::new(n, k.min(n), derive_seed(seed, "folds", &[]))
}

/// Per-depth values along a row's path: entry `k` is the prediction of the
/// tree truncated at depth `k`.
fn path_values(root: &TreeNode, x: &[f64], m: &[bool], max_depth: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_depth + 1);
    let mut node = root;
    loop {
        match node {
            TreeNode::Leaf { value, .. } => {
                while out.len() <= max_depth {
                    out.push(*value);
                }
                return out;
            }
            TreeNode::Split {
                feature,
                threshold,
                value,
                missing_goes,
                left,
                right,
                ..
            } => {
                out.push(*value);
                if out.len() > max_depth {
                    return out;
                }
                let go_left = if m[*feature] {
                    *missing_goes == crate::tree::MissingGoes::Left
                } else {
                    x[*feature] <= *threshold
                };
                node = if go_left { left } else { right };
            }
        }
    }
}

fn rows_of(x: &MaskedMatrix, rows: &[usize]) -> Vec<(Vec<f64>, Vec<bool>)> {
    rows.iter()
        .map(|&i| {
            let v = (0..x.ncols()).map(|j| x.get(i, j).unwrap_or(0.0)).collect();
            let m = (0..x.ncols()).map(|j| x.is_missing(i, j)).collect();
            (v, m)
        })
        .collect()
}

fn select_tree(x: &MaskedMatrix, y: &TargetVector, grid: &HyperGrid, mia: bool, folds: &Folds) -> Result<Selection> {
    let dmax = *grid.tree_depths.iter().max().expect("validated");
    let base = TreeSpec {
        max_depth: dmax,
        min_samples_leaf: grid.min_samples_leaf,
        criterion: criterion_for(y.task()),
        mia,
    };
    let mut sse = vec![0.0; dmax + 1];
    for (train, valid) in folds.splits() {
        let t = fit_tree(&x.select_rows(&train), &y.select(&train).values().to_vec(), &base)?;
        for (i, (v, m)) in valid.iter().zip(rows_of(x, &valid)) {
            let pv = path_values(&t.root, &v, &m, dmax);
            let yi = y.values()[*i];
            for (d, p) in pv.iter().enumerate() {
                sse[d] += (p - yi) * (p - yi);
            }
        }
    }
    let n = x.nrows() as f64;
    let mut best = (f64::INFINITY, 0);
    let mut depths = grid.tree_depths.clone();
    depths.sort();
    for &d in &depths {
        let loss = sse[d] / n;
        if loss < best.0 {
            best = (loss, d);
        }
    }
    let full = fit_tree(x, y.values(), &base)?;
    let tree = full.truncated(best.1);
    Ok(Selection {
        spec: PredictorSpec::Tree(tree.spec.clone()),
        model: FittedPredictor::Tree(tree),
        cv_loss: best.0,
    })
}

fn select_forest(x: &MaskedMatrix, y: &TargetVector, grid: &HyperGrid, mia: bool, folds: &Folds, seed: u64) -> Result<Selection> {
    let dmax = *grid.forest_depths.iter().max().expect("validated");
    let tmax = *grid.forest_trees.iter().max().expect("validated");
    let base = ForestSpec {
        n_trees: tmax,
        tree: TreeSpec {
            max_depth: dmax,
            min_samples_leaf: grid.min_samples_leaf,
            criterion: criterion_for(y.task()),
            mia,
        },
        max_features: grid.max_features,
        bootstrap: true,
        seed: derive_seed(seed, "forest", &[]),
    };
    let mut trees = grid.forest_trees.clone();
    trees.sort();
    let mut depths = grid.forest_depths.clone();
    depths.sort();
    // sse[(tree count index, depth)]
    let mut sse = vec![vec![0.0; dmax + 1]; trees.len()];
    for (train, valid) in folds.splits() {
        let f = fit_forest(&x.select_rows(&train), &y.select(&train).values().to_vec(), &base)?;
        for (i, (v, m)) in valid.iter().zip(rows_of(x, &valid)) {
            let yi = y.values()[*i];
            let mut cum = vec![0.0; dmax + 1];
            let mut ti = 0;
            for (t, tree) in f.trees.iter().enumerate() {
                let pv = path_values(&tree.root, &v, &m, dmax);
                for d in 0..=dmax {
                    cum[d] += pv[d];
                }
                while ti < trees.len() && trees[ti] == t + 1 {
                    for &d in &depths {
                        let p = cum[d] / (t + 1) as f64;
                        sse[ti][d] += (p - yi) * (p - yi);
                    }
                    ti += 1;
                }
            }
        }
    }
    let n = x.nrows() as f64;
    let mut best = (f64::INFINITY, trees[0], depths[0]);
    for (ti, &nt) in trees.iter().enumerate() {
        for &d in &depths {
            let loss = sse[ti][d] / n;
            if loss < best.0 {
                best = (loss, nt, d);
            }
        }
    }
    let full = fit_forest(x, y.values(), &base)?;
    let forest = full.truncated(best.1, best.2);
    let spec = ForestSpec {
        n_trees: best.1,
        tree: TreeSpec {
            max_depth: best.2,
            ..base.tree.clone()
        },
        ..base
    };
    Ok(Selection {
        spec: PredictorSpec::Forest(spec),
        model: FittedPredictor::Forest(forest),
        cv_loss: best.0,
    })
}

fn select_linear(x: &MaskedMatrix, y: &TargetVector, grid: &HyperGrid, folds: &Folds) -> Result<Selection> {
    let dense = x.to_dense()?;
    let base = GlmSpec::with_loss(loss_for(y.task()));
    let out = cv_path(dense.view(), y.values(), &base, &grid.glm, folds)?;
    Ok(Selection {
        spec: PredictorSpec::Linear(out.spec),
        model: FittedPredictor::Linear(out.fit),
        cv_loss: out.cv_loss,
    })
}

/// Chooses hyperparameters (and, for [`Family::Best`], the family) by
/// k-fold CV and refits on all rows. `mia` grows trees with MIA splits and
/// excludes the linear family.
pub fn select_predictor(x: &MaskedMatrix, y: &TargetVector, family: Family, grid: &HyperGrid, mia: bool, seed: u64) -> Result<Selection> {
    grid.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.kinds().iter().any(|k| k.is_categorical()) {
        return invalid("predictors need one-hot encoded input");
    }
    let folds = make_folds(x.nrows(), grid.folds, seed)?;
    match family {
        Family::Linear => {
            if mia {
                return invalid("MIA applies to tree families only");
            }
            select_linear(x, y, grid, &folds)
        }
        Family::Tree => select_tree(x, y, grid, mia, &folds),
        Family::Forest => select_forest(x, y, grid, mia, &folds, seed),
        Family::Best => {
            let mut cands = Vec::new();
            if !mia {
                cands.push(select_linear(x, y, grid, &folds)?);
            }
            cands.push(select_tree(x, y, grid, mia, &folds)?);
            cands.push(select_forest(x, y, grid, mia, &folds, seed)?);
            let mut best = cands.remove(0);
            for c in cands {
                if c.cv_loss < best.cv_loss {
                    best = c;
                }
            }
            Ok(best)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn data(n: usize, nonlinear: bool, seed: u64) -> (MaskedMatrix, TargetVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Array2<f64> = Array2::from_shape_fn((n, 3), |_| rng.sample(StandardNormal));
        let y = (0..n)
            .map(|i| {
                let s = if nonlinear {
                    3.0 * (v[[i, 0]] > 0.0) as u8 as f64 * (v[[i, 1]] > 0.0) as u8 as f64
                } else {
                    v[[i, 0]] - 2.0 * v[[i, 1]]
                };
                s + 0.1 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        (MaskedMatrix::complete(v).unwrap(), TargetVector::regression(y).unwrap())
    }

    #[test]
    fn tree_cv_matches_explicit_refits() {
        let (x, y) = data(120, true, 1);
        let grid = HyperGrid {
            tree_depths: vec![1, 2, 3],
            ..HyperGrid::default()
        };
        let sel = select_predictor(&x, &y, Family::Tree, &grid, false, 5).unwrap();
        let folds = make_folds(120, 5, 5).unwrap();
        let mut losses = Vec::new();
        for d in [1, 2, 3] {
            let spec = TreeSpec {
                max_depth: d,
                ..TreeSpec::default()
            };
            let mut sse = 0.0;
            for (tr, va) in folds.splits() {
                let t = fit_tree(&x.select_rows(&tr), &y.select(&tr).values().to_vec(), &spec).unwrap();
                let p = t.predict(&x.select_rows(&va)).unwrap();
                sse += p.iter().zip(&va).map(|(p, &i)| (p - y.values()[i]).powi(2)).sum::<f64>();
            }
            losses.push(sse / 120.0);
        }
        let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((sel.cv_loss - best).abs() < 1e-12);
    }

    #[test]
    fn best_prefers_linear_on_linear_data_and_trees_on_interactions() {
        let grid = HyperGrid::quick();
        let (x, y) = data(200, false, 2);
        let sel = select_predictor(&x, &y, Family::Best, &grid, false, 1).unwrap();
        assert_eq!(sel.model.family(), Family::Linear);
        let (x, y) = data(300, true, 3);
        let sel = select_predictor(&x, &y, Family::Best, &grid, false, 1).unwrap();
        assert_ne!(sel.model.family(), Family::Linear);
    }

    #[test]
    fn spec_refit_reproduces_selected_model() {
        let (x, y) = data(100, true, 4);
        let grid = HyperGrid {
            forest_trees: vec![5, 10],
            forest_depths: vec![2, 4],
            ..HyperGrid::quick()
        };
        for fam in [Family::Linear, Family::Tree, Family::Forest] {
            let sel = select_predictor(&x, &y, fam, &grid, false, 9).unwrap();
            let refit = fit_with_spec(&x, &y, &sel.spec).unwrap();
            assert_eq!(refit.predict(&x).unwrap(), sel.model.predict(&x).unwrap());
        }
    }

    #[test]
    fn linear_rejects_masked_rows() {
        let (x, y) = data(30, false, 5);
        let sel = select_predictor(&x, &y, Family::Linear, &HyperGrid::quick(), false, 0).unwrap();
        assert!(matches!(sel.model.predict_row(&[0.0, 1.0, 2.0], Some(&[false, true, false])), Err(Error::MaskedInput { .. })));
    }
}
