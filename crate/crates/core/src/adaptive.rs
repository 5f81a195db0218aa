//! Pattern-adaptive linear models `f(x, m) = <w(m), x>_m + b(m)`.
//!
//! Non-finite classes are fitted as one penalized GLM over an expanded
//! design whose columns are `x_j (1 - m_j) prod_{k in J} m_k` (or the bare
//! mask monomial for intercept-type columns). The finite class partitions
//! pattern space greedily on single mask bits and fits a linear model per cell.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cv::derive_seed;
use crate::data::{MaskedMatrix, TargetVector, Task};
use crate::error::{invalid, Error, Result};
use crate::glm::{cv_path, scaled_penalty_factors, GlmFit, GlmGrid, GlmSpec};
use crate::linalg::ridge_ols;
use crate::predictors::{loss_for, make_folds};

/// Ridge used by the split search's leaf fits.
pub const SPLIT_RIDGE: f64 = 1e-8;
/// |w_j| below this makes the derived imputation value undefined.
pub const UNDEFINED_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptiveClass {
    Static,
    AffineIntercept,
    Affine,
    Polynomial { order: usize },
    Finite {
        max_depth: usize,
        min_leaf: usize,
        #[serde(with = "crate::data::float_serde")]
        min_gain: f64,
    },
}

impl AdaptiveClass {
    pub fn finite() -> Self {
        AdaptiveClass::Finite {
            max_depth: 4,
            min_leaf: 20,
            min_gain: 1e-3,
        }
    }

    pub fn name(&self) -> String {
        match self {
            AdaptiveClass::Static => "static".into(),
            AdaptiveClass::AffineIntercept => "affine_intercept".into(),
            AdaptiveClass::Affine => "affine".into(),
            AdaptiveClass::Polynomial { order } => format!("polynomial{order}"),
            AdaptiveClass::Finite { .. } => "finite".into(),
        }
    }
}

impl std::str::FromStr for AdaptiveClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(AdaptiveClass::Static),
            "affine_intercept" => Ok(AdaptiveClass::AffineIntercept),
            "affine" => Ok(AdaptiveClass::Affine),
            "finite" => Ok(AdaptiveClass::finite()),
            _ => {
                let t = s
                    .strip_prefix("polynomial")
                    .map(|r| r.trim_matches(|c| c == '(' || c == ')' || c == ':'))
                    .and_then(|r| r.parse::<usize>().ok());
                match t {
                    Some(order) => Ok(AdaptiveClass::Polynomial { order }),
                    None => invalid(format!("unknown adaptive class '{s}'")),
                }
            }
        }
    }
}

/// One expanded column: `base = Some(j)` is `x_j (1 - m_j) prod_J m_k`,
/// `base = None` is the monomial `prod_J m_k` (the intercept when `J` is empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedColumn {
    pub base: Option<usize>,
    pub monomial: Vec<usize>,
}

impl ExpandedColumn {
    pub fn is_intercept(&self) -> bool {
        self.base.is_none() && self.monomial.is_empty()
    }

    /// Column value; masked entries of `x` are never read.
    pub fn value(&self, x: &[f64], m: &[bool]) -> f64 {
        if !self.monomial.iter().all(|&k| m[k]) {
            return 0.0;
        }
        match self.base {
            None => 1.0,
            Some(j) if m[j] => 0.0,
            Some(j) => x[j],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionMap {
    pub d: usize,
    pub columns: Vec<ExpandedColumn>,
}

fn combinations(d: usize, s: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, s: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == s {
            out.push(cur.clone());
            return;
        }
        for j in start..d {
            cur.push(j);
            rec(j + 1, d, s, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, s, &mut Vec::new(), &mut out);
    out
}

impl ExpansionMap {
    pub fn new(d: usize, class: &AdaptiveClass) -> Result<Self> {
        let base = |j| ExpandedColumn {
            base: Some(j),
            monomial: vec![],
        };
        let columns = match class {
            AdaptiveClass::Static => (0..d).map(base).collect(),
            AdaptiveClass::AffineIntercept => {
                let mut c: Vec<_> = (0..d).map(base).collect();
                c.extend((0..d).map(|j| ExpandedColumn {
                    base: None,
                    monomial: vec![j],
                }));
                c.push(ExpandedColumn {
                    base: None,
                    monomial: vec![],
                });
                c
            }
            AdaptiveClass::Affine => {
                let mut c: Vec<_> = (0..d).map(base).collect();
                // k == j columns vanish identically but are kept so the count is d + d^2
                for k in 0..d {
                    for j in 0..d {
                        c.push(ExpandedColumn {
                            base: Some(j),
                            monomial: vec![k],
                        });
                    }
                }
                c
            }
            AdaptiveClass::Polynomial { order } => {
                if *order < 1 || *order > d {
                    return invalid(format!("polynomial order must lie in 1..={d}"));
                }
                let mut c = Vec::new();
                for s in 0..=*order {
                    for set in combinations(d, s) {
                        for j in (0..d).filter(|j| !set.contains(j)) {
                            c.push(ExpandedColumn {
                                base: Some(j),
                                monomial: set.clone(),
                            });
                        }
                        c.push(ExpandedColumn {
                            base: None,
                            monomial: set,
                        });
                    }
                }
                c
            }
            AdaptiveClass::Finite { .. } => return invalid("the finite class has no fixed expansion"),
        };
        Ok(Self { d, columns })
    }

    /// Total column count, intercept included when the class has one.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Indices of the columns handed to the solver (all but the intercept,
    /// which the solver fits unpenalized).
    pub fn solver_columns(&self) -> Vec<usize> {
        (0..self.columns.len()).filter(|&k| !self.columns[k].is_intercept()).collect()
    }

    fn solver_row(&self, x: &[f64], m: &[bool], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.columns.iter().filter(|c| !c.is_intercept()).map(|c| c.value(x, m)));
    }
}

/// Column count of a non-finite class.
pub fn column_count(d: usize, class: &AdaptiveClass) -> Result<usize> {
    fn binom(n: usize, k: usize) -> usize {
        if k > n {
            return 0;
        }
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }
    Ok(match class {
        AdaptiveClass::Static => d,
        AdaptiveClass::AffineIntercept => 2 * d + 1,
        AdaptiveClass::Affine => d + d * d,
        AdaptiveClass::Polynomial { order } => (0..=*order).map(|s| d * binom(d - 1, s) + binom(d, s)).sum(),
        AdaptiveClass::Finite { .. } => return invalid("the finite class has no fixed expansion"),
    })
}

#[derive(Debug, Clone)]
pub struct ExpandedDesign {
    pub map: ExpansionMap,
    /// n x P, one column per entry of `map.columns`.
    pub matrix: Array2<f64>,
}

fn check_continuous(x: &MaskedMatrix) -> Result<()> {
    if let Some(j) = x.kinds().iter().position(|k| k.is_categorical()) {
        return Err(Error::ColumnKind {
            column: j,
            reason: "adaptive models need one-hot encoded input".into(),
        });
    }
    Ok(())
}

fn row_of(x: &MaskedMatrix, i: usize, v: &mut [f64], m: &mut [bool]) {
    for j in 0..x.ncols() {
        m[j] = x.is_missing(i, j);
        v[j] = x.get(i, j).unwrap_or(0.0);
    }
}

pub fn expand(x: &MaskedMatrix, class: &AdaptiveClass) -> Result<ExpandedDesign> {
    let map = ExpansionMap::new(x.ncols(), class)?;
    let d = x.ncols();
    let mut matrix = Array2::zeros((x.nrows(), map.len()));
    let (mut v, mut m) = (vec![0.0; d], vec![false; d]);
    for i in 0..x.nrows() {
        row_of(x, i, &mut v, &mut m);
        for (k, c) in map.columns.iter().enumerate() {
            matrix[[i, k]] = c.value(&v, &m);
        }
    }
    Ok(ExpandedDesign { map, matrix })
}

/// Fitting options shared by all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveSpec {
    pub grid: GlmGrid,
    /// Multipliers on the penalty of mask-derived columns, chosen by CV.
    pub extra_penalties: Vec<f64>,
    /// Scale penalties by `sqrt(n / n_k)` (column activity counts).
    pub scale_penalties: bool,
    pub folds: usize,
    pub seed: u64,
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        Self {
            grid: GlmGrid::default(),
            extra_penalties: vec![1.0, 4.0],
            scale_penalties: true,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum PartitionNode {
    Leaf {
        fit: GlmFit,
        n: usize,
    },
    /// Rows with `m_feature = 0` go to `observed`, the rest to `missing`.
    Split {
        feature: usize,
        observed: Box<PartitionNode>,
        missing: Box<PartitionNode>,
    },
}

impl PartitionNode {
    fn leaf(&self, m: &[bool]) -> &GlmFit {
        match self {
            PartitionNode::Leaf { fit, .. } => fit,
            PartitionNode::Split {
                feature,
                observed,
                missing,
            } => {
                if m[*feature] {
                    missing.leaf(m)
                } else {
                    observed.leaf(m)
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            PartitionNode::Leaf { .. } => 1,
            PartitionNode::Split { observed, missing, .. } => observed.n_leaves() + missing.n_leaves(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            PartitionNode::Leaf { .. } => 0,
            PartitionNode::Split { observed, missing, .. } => 1 + observed.depth().max(missing.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum ModelBody {
    Expanded { map: ExpansionMap, fit: GlmFit },
    /// Leaves hold static models over `(1 - m_j) x_j`.
    Partition { root: PartitionNode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveModel {
    pub class: AdaptiveClass,
    pub d: usize,
    pub task: Task,
    pub body: ModelBody,
    /// Fold-mean validation loss (MSE, or Brier score for binary targets).
    #[serde(with = "crate::data::float_serde")]
    pub cv_loss: f64,
}

impl AdaptiveModel {
    pub fn predict_row(&self, x: &[f64], m: &[bool]) -> Result<f64> {
        if x.len() != self.d || m.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len().min(m.len()),
            });
        }
        match &self.body {
            ModelBody::Expanded { map, fit } => {
                let mut row = Vec::with_capacity(fit.beta.len());
                map.solver_row(x, m, &mut row);
                Ok(fit.predict_row(&row))
            }
            ModelBody::Partition { root } => {
                let row: Vec<f64> = x.iter().zip(m).map(|(v, &b)| if b { 0.0 } else { *v }).collect();
                Ok(root.leaf(m).predict_row(&row))
            }
        }
    }

    pub fn predict(&self, x: &MaskedMatrix) -> Result<Vec<f64>> {
        if x.ncols() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.ncols(),
            });
        }
        let (mut v, mut m) = (vec![0.0; self.d], vec![false; self.d]);
        (0..x.nrows())
            .map(|i| {
                row_of(x, i, &mut v, &mut m);
                self.predict_row(&v, &m)
            })
            .collect()
    }

    /// Coefficients aligned with `map.columns` (intercept column holds the
    /// fitted intercept). `None` for the finite class.
    pub fn coefficients(&self) -> Option<(&ExpansionMap, Vec<f64>)> {
        match &self.body {
            ModelBody::Expanded { map, fit } => {
                let mut out = Vec::with_capacity(map.len());
                let mut b = fit.beta.iter();
                for c in &map.columns {
                    if c.is_intercept() {
                        out.push(fit.intercept);
                    } else {
                        out.push(*b.next().expect("beta aligned with solver columns"));
                    }
                }
                Some((map, out))
            }
            ModelBody::Partition { .. } => None,
        }
    }

    /// Effective `(w(m), b(m))`: prediction equals `b + sum_j w_j x_j` over
    /// observed `j` (before the logistic link).
    pub fn pattern_weights(&self, m: &[bool]) -> Result<(Vec<f64>, f64)> {
        if m.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: m.len(),
            });
        }
        match &self.body {
            ModelBody::Expanded { map, fit } => {
                let mut w = vec![0.0; self.d];
                let mut b = fit.intercept;
                let ones = vec![1.0; self.d];
                for (c, beta) in map.columns.iter().filter(|c| !c.is_intercept()).zip(&fit.beta) {
                    let active = c.value(&ones, m);
                    match c.base {
                        Some(j) => w[j] += beta * active,
                        None => b += beta * active,
                    }
                }
                Ok((w, b))
            }
            ModelBody::Partition { root } => {
                let fit = root.leaf(m);
                let w = fit.beta.iter().zip(m).map(|(b, &mk)| if mk { 0.0 } else { *b }).collect();
                Ok((w, fit.intercept))
            }
        }
    }

    pub fn to_imputation(&self) -> Result<DerivedImputation> {
        if self.class != AdaptiveClass::AffineIntercept {
            return invalid("derived imputation needs an affine_intercept model");
        }
        let (map, coef) = self.coefficients().expect("expanded body");
        let mut w = vec![0.0; self.d];
        let mut b = vec![0.0; self.d];
        for (c, v) in map.columns.iter().zip(&coef) {
            match (c.base, c.monomial.as_slice()) {
                (Some(j), []) => w[j] = *v,
                (None, [j]) => b[*j] = *v,
                _ => {}
            }
        }
        let undefined: Vec<bool> = w.iter().map(|v| v.abs() < UNDEFINED_WEIGHT).collect();
        let mu = (0..self.d).map(|j| if undefined[j] { 0.0 } else { b[j] / w[j] }).collect();
        Ok(DerivedImputation { mu, undefined })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedImputation {
    /// `b_j / w_j`; 0 where undefined.
    pub mu: Vec<f64>,
    pub undefined: Vec<bool>,
}

fn column_activity(design: &Array2<f64>, map: &ExpansionMap, mask: &Array2<bool>, rows: &[usize]) -> Vec<usize> {
    let _ = design;
    map.columns
        .iter()
        .filter(|c| !c.is_intercept())
        .map(|c| {
            rows.iter()
                .filter(|&&i| c.monomial.iter().all(|&k| mask[[i, k]]) && c.base.is_none_or(|j| !mask[[i, j]]))
                .count()
        })
        .collect()
}

/// CV over the GLM grid and the extra-penalty multipliers.
fn fit_glm_cv(
    z: ArrayView2<f64>,
    y: &[f64],
    task: Task,
    base_factors: &[f64],
    mask_derived: &[bool],
    spec: &AdaptiveSpec,
    seed: u64,
) -> Result<(GlmFit, f64)> {
    let n = z.nrows();
    let loss = loss_for(task);
    if n < 2 {
        let v = if n == 1 { y[0] } else { 0.0 };
        return Ok((GlmFit::constant(loss, z.ncols(), v), f64::INFINITY));
    }
    let folds = make_folds(n, spec.folds, seed)?;
    let extras: &[f64] = if mask_derived.iter().any(|&b| b) && !spec.extra_penalties.is_empty() {
        &spec.extra_penalties
    } else {
        &[1.0]
    };
    let mut best: Option<(GlmFit, f64)> = None;
    for &extra in extras {
        let factors: Vec<f64> = base_factors
            .iter()
            .zip(mask_derived)
            .map(|(f, &md)| if md { f * extra } else { *f })
            .collect();
        let base = GlmSpec {
            penalty_factors: Some(factors),
            ..GlmSpec::with_loss(loss)
        };
        let out = cv_path(z, y, &base, &spec.grid, &folds)?;
        if best.as_ref().is_none_or(|(_, l)| out.cv_loss < *l) {
            best = Some((out.fit, out.cv_loss));
        }
    }
    Ok(best.expect("at least one extra penalty"))
}

fn check_fit_inputs(x: &MaskedMatrix, y: &TargetVector) -> Result<()> {
    check_continuous(x)?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.nrows() < 2 {
        return invalid("need at least 2 training rows");
    }
    Ok(())
}

fn fit_expanded(x: &MaskedMatrix, y: &TargetVector, class: AdaptiveClass, spec: &AdaptiveSpec) -> Result<AdaptiveModel> {
    let design = expand(x, &class)?;
    let cols = design.map.solver_columns();
    let z = design.matrix.select(Axis(1), &cols);
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let counts = column_activity(&design.matrix, &design.map, x.mask(), &rows);
    let factors = if spec.scale_penalties {
        scaled_penalty_factors(&counts, x.nrows())
    } else {
        counts.iter().map(|&c| if c == 0 { f64::INFINITY } else { 1.0 }).collect()
    };
    let mask_derived: Vec<bool> = cols.iter().map(|&k| !design.map.columns[k].monomial.is_empty()).collect();
    let (fit, cv_loss) = fit_glm_cv(z.view(), y.values(), y.task(), &factors, &mask_derived, spec, derive_seed(spec.seed, "adaptive", &[]))?;
    Ok(AdaptiveModel {
        class,
        d: x.ncols(),
        task: y.task(),
        body: ModelBody::Expanded { map: design.map, fit },
        cv_loss,
    })
}

fn ridge_sse(z: &Array2<f64>, y: &[f64], rows: &[usize]) -> f64 {
    let zs = z.select(Axis(0), rows);
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    match ridge_ols(zs.view(), &ys, SPLIT_RIDGE) {
        Ok((b0, b)) => zs
            .rows()
            .into_iter()
            .zip(&ys)
            .map(|(r, yv)| {
                let e = yv - b0 - r.dot(&b);
                e * e
            })
            .sum(),
        Err(_) => f64::INFINITY,
    }
}

struct FiniteCtx<'a> {
    z: Array2<f64>,
    mask: &'a Array2<bool>,
    y: &'a TargetVector,
    spec: &'a AdaptiveSpec,
    max_depth: usize,
    min_leaf: usize,
    min_gain: f64,
}

impl FiniteCtx<'_> {
    /// Returns the cell tree (leaves unfitted) as row sets.
    fn split(&self, rows: Vec<usize>, depth: usize, out: &mut Vec<Vec<usize>>) -> Shape {
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf.max(1) || !self.min_gain.is_finite() {
            out.push(rows);
            return Shape::Leaf(out.len() - 1);
        }
        let y = self.y.values();
        let parent = ridge_sse(&self.z, y, &rows);
        let mut best: Option<(f64, usize, Vec<usize>, Vec<usize>)> = None;
        for j in 0..self.mask.ncols() {
            let (miss, obs): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.mask[[i, j]]);
            if obs.len() < self.min_leaf.max(1) || miss.len() < self.min_leaf.max(1) {
                continue;
            }
            let total = ridge_sse(&self.z, y, &obs) + ridge_sse(&self.z, y, &miss);
            if best.as_ref().is_none_or(|b| total < b.0) {
                best = Some((total, j, obs, miss));
            }
        }
        match best {
            Some((total, j, obs, miss)) if parent > 0.0 && (parent - total) / parent >= self.min_gain => {
                let o = self.split(obs, depth + 1, out);
                let m = self.split(miss, depth + 1, out);
                Shape::Split(j, Box::new(o), Box::new(m))
            }
            _ => {
                out.push(rows);
                Shape::Leaf(out.len() - 1)
            }
        }
    }

    fn fit_leaf(&self, rows: &[usize]) -> Result<(GlmFit, f64)> {
        let zs = self.z.select(Axis(0), rows);
        let ys: Vec<f64> = rows.iter().map(|&i| self.y.values()[i]).collect();
        let counts: Vec<usize> = (0..self.mask.ncols()).map(|j| rows.iter().filter(|&&i| !self.mask[[i, j]]).count()).collect();
        let factors = if self.spec.scale_penalties {
            scaled_penalty_factors(&counts, rows.len())
        } else {
            counts.iter().map(|&c| if c == 0 { f64::INFINITY } else { 1.0 }).collect()
        };
        let plain = vec![false; factors.len()];
        fit_glm_cv(zs.view(), &ys, self.y.task(), &factors, &plain, self.spec, derive_seed(self.spec.seed, "adaptive", &[]))
    }
}

enum Shape {
    Leaf(usize),
    Split(usize, Box<Shape>, Box<Shape>),
}

fn fit_finite(x: &MaskedMatrix, y: &TargetVector, class: AdaptiveClass, spec: &AdaptiveSpec) -> Result<AdaptiveModel> {
    let AdaptiveClass::Finite {
        max_depth,
        min_leaf,
        min_gain,
    } = class
    else {
        return invalid("fit_finite needs the finite class");
    };
    if min_gain.is_nan() || min_gain < 0.0 {
        return invalid("min_gain must be nonnegative");
    }
    let ctx = FiniteCtx {
        z: x.filled(0.0),
        mask: x.mask(),
        y,
        spec,
        max_depth,
        min_leaf,
        min_gain,
    };
    let mut cells = Vec::new();
    let shape = ctx.split((0..x.nrows()).collect(), 0, &mut cells);
    let mut fits = Vec::with_capacity(cells.len());
    let mut weighted = 0.0;
    for rows in &cells {
        let (fit, loss) = ctx.fit_leaf(rows)?;
        weighted += loss * rows.len() as f64;
        fits.push(Some(fit));
    }
    fn build(s: Shape, fits: &mut [Option<GlmFit>], cells: &[Vec<usize>]) -> PartitionNode {
        match s {
            Shape::Leaf(l) => PartitionNode::Leaf {
                fit: fits[l].take().expect("each leaf used once"),
                n: cells[l].len(),
            },
            Shape::Split(j, o, m) => PartitionNode::Split {
                feature: j,
                observed: Box::new(build(*o, fits, cells)),
                missing: Box::new(build(*m, fits, cells)),
            },
        }
    }
    let root = build(shape, &mut fits, &cells);
    Ok(AdaptiveModel {
        class,
        d: x.ncols(),
        task: y.task(),
        body: ModelBody::Partition { root },
        cv_loss: weighted / x.nrows() as f64,
    })
}

/// Fits one class. Inputs must be continuous (one-hot encode first).
pub fn fit_adaptive(x: &MaskedMatrix, y: &TargetVector, class: AdaptiveClass, spec: &AdaptiveSpec) -> Result<AdaptiveModel> {
    check_fit_inputs(x, y)?;
    match class {
        AdaptiveClass::Finite { .. } => fit_finite(x, y, class, spec),
        _ => fit_expanded(x, y, class, spec),
    }
}

/// CV choice among affine_intercept, affine and finite (ties keep the
/// earlier, simpler class).
pub fn fit_best(x: &MaskedMatrix, y: &TargetVector, spec: &AdaptiveSpec) -> Result<AdaptiveModel> {
    let mut best: Option<AdaptiveModel> = None;
    for class in [AdaptiveClass::AffineIntercept, AdaptiveClass::Affine, AdaptiveClass::finite()] {
        let m = fit_adaptive(x, y, class, spec)?;
        if best.as_ref().is_none_or(|b| m.cv_loss < b.cv_loss) {
            best = Some(m);
        }
    }
    Ok(best.expect("three candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::LambdaGrid;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};
    use std::collections::HashMap;
    use crate::stats::r2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn lambda0() -> AdaptiveSpec {
        AdaptiveSpec {
            grid: GlmGrid::fixed(0.0, 1.0),
            extra_penalties: vec![1.0],
            ..AdaptiveSpec::default()
        }
    }

    fn random_masked(n: usize, d: usize, p: f64, rng: &mut ChaCha8Rng) -> MaskedMatrix {
        let v: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        let m = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() < p);
        MaskedMatrix::from_parts(v, m).unwrap()
    }

    #[test]
    fn column_counts_match_enumeration() {
        assert_eq!(ExpansionMap::new(3, &AdaptiveClass::Affine).unwrap().len(), 12);
        assert_eq!(ExpansionMap::new(2, &AdaptiveClass::AffineIntercept).unwrap().len(), 5);
        for d in 1..=8 {
            for class in [AdaptiveClass::Static, AdaptiveClass::AffineIntercept, AdaptiveClass::Affine] {
                assert_eq!(ExpansionMap::new(d, &class).unwrap().len(), column_count(d, &class).unwrap());
            }
            for t in 1..=d {
                let class = AdaptiveClass::Polynomial { order: t };
                let map = ExpansionMap::new(d, &class).unwrap();
                // independent count: subsets J with |J| <= t, times (d - |J|) base features plus one monomial
                let mut direct = 0;
                for bits in 0u32..(1 << d) {
                    let s = bits.count_ones() as usize;
                    if s <= t {
                        direct += d - s + 1;
                    }
                }
                assert_eq!(map.len(), direct);
                assert_eq!(map.len(), column_count(d, &class).unwrap());
            }
        }
        assert!(ExpansionMap::new(3, &AdaptiveClass::Polynomial { order: 4 }).is_err());
        assert!(ExpansionMap::new(3, &AdaptiveClass::finite()).is_err());
    }

    #[test]
    fn observed_rows_expand_to_static_part() {
        let x = MaskedMatrix::complete(Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let e = expand(&x, &AdaptiveClass::Polynomial { order: 2 }).unwrap();
        for (k, c) in e.map.columns.iter().enumerate() {
            let want = match (c.base, c.monomial.is_empty()) {
                (Some(j), true) => x.get(0, j).unwrap(),
                (None, true) => 1.0,
                _ => 0.0,
            };
            assert_eq!(e.matrix[[0, k]], want);
        }
    }

    #[test]
    fn static_recovers_planted_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_masked(200, 3, 0.2, &mut rng);
        let w = [1.5, -2.0, 0.7];
        let y: Vec<f64> = (0..200).map(|i| 0.3 + (0..3).map(|j| w[j] * x.get(i, j).unwrap_or(0.0)).sum::<f64>()).collect();
        let spec = AdaptiveSpec {
            grid: GlmGrid {
                lambdas: LambdaGrid::Auto { count: 30, min_ratio: 1e-4 },
                mixings: vec![1.0],
            },
            ..AdaptiveSpec::default()
        };
        let m = fit_adaptive(&x, &TargetVector::regression(y).unwrap(), AdaptiveClass::Static, &spec).unwrap();
        let (_, coef) = m.coefficients().unwrap();
        for j in 0..3 {
            assert!((coef[j] - w[j]).abs() < 1e-3, "{coef:?}");
        }
    }

    #[test]
    fn affine_intercept_captures_pure_missingness_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_masked(150, 3, 0.3, &mut rng);
        let y: Vec<f64> = (0..150).map(|i| x.is_missing(i, 0) as u8 as f64).collect();
        let m = fit_adaptive(&x, &TargetVector::regression(y.clone()).unwrap(), AdaptiveClass::AffineIntercept, &AdaptiveSpec::default()).unwrap();
        assert!(r2(&y, &m.predict(&x).unwrap()).unwrap() >= 0.999);
    }

    #[test]
    fn static_underfits_pattern_dependent_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = |n, rng: &mut ChaCha8Rng| {
            let x = random_masked(n, 2, 0.0, rng);
            let mask = Array2::from_shape_fn((n, 2), |(i, j)| j == 1 && i % 2 == 0);
            let x = x.with_mask(mask).unwrap();
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let s = if x.is_missing(i, 1) { -1.0 } else { 1.0 };
                    s * x.get(i, 0).unwrap() + 0.05 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            (x, TargetVector::regression(y).unwrap())
        };
        let (xt, yt) = gen(200, &mut rng);
        let (xv, yv) = gen(500, &mut rng);
        let spec = AdaptiveSpec::default();
        let stat = fit_adaptive(&xt, &yt, AdaptiveClass::Static, &spec).unwrap();
        let aff = fit_adaptive(&xt, &yt, AdaptiveClass::Affine, &spec).unwrap();
        let r_s = r2(yv.values(), &stat.predict(&xv).unwrap()).unwrap();
        let r_a = r2(yv.values(), &aff.predict(&xv).unwrap()).unwrap();
        assert!(r_a - r_s >= 0.1, "{r_s} {r_a}");
    }

    #[test]
    fn finite_finds_planted_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let x = random_masked(n, 3, 0.0, &mut rng);
        let mask = Array2::from_shape_fn((n, 3), |(i, j)| (j == 1 && i % 2 == 0) || (j == 2 && i % 3 == 0));
        let x = x.with_mask(mask).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| if x.is_missing(i, 1) { -x.get(i, 0).unwrap() } else { x.get(i, 0).unwrap() })
            .collect();
        let m = fit_adaptive(&x, &TargetVector::regression(y).unwrap(), AdaptiveClass::finite(), &lambda0()).unwrap();
        let ModelBody::Partition { root } = &m.body else { panic!() };
        let PartitionNode::Split { feature, .. } = root else { panic!("no split") };
        assert_eq!(*feature, 1);
        let (w_obs, _) = m.pattern_weights(&[false, false, false]).unwrap();
        let (w_mis, _) = m.pattern_weights(&[false, true, false]).unwrap();
        assert!((w_obs[0] - 1.0).abs() < 1e-3 && (w_mis[0] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn finite_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_masked(100, 3, 0.0, &mut rng);
        let y: Vec<f64> = (0..100).map(|i| x.get(i, 0).unwrap() + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y = TargetVector::regression(y).unwrap();
        let spec = AdaptiveSpec::default();
        let fin = fit_adaptive(&x, &y, AdaptiveClass::finite(), &spec).unwrap();
        let stat = fit_adaptive(&x, &y, AdaptiveClass::Static, &spec).unwrap();
        assert_eq!(fin.predict(&x).unwrap().len(), 100);
        let ModelBody::Partition { root } = &fin.body else { panic!() };
        assert_eq!(root.n_leaves(), 1);
        let a = fin.predict(&x).unwrap();
        let b = stat.predict(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }

        let x = random_masked(100, 3, 0.4, &mut rng);
        let y = TargetVector::regression((0..100).map(|i| x.is_missing(i, 0) as u8 as f64).collect()).unwrap();
        let never = AdaptiveClass::Finite {
            max_depth: 4,
            min_leaf: 5,
            min_gain: f64::INFINITY,
        };
        let m = fit_adaptive(&x, &y, never, &spec).unwrap();
        let ModelBody::Partition { root } = &m.body else { panic!() };
        assert_eq!(root.n_leaves(), 1);
    }

    #[test]
    fn imputation_identity_examples() {
        let map = ExpansionMap::new(1, &AdaptiveClass::AffineIntercept).unwrap();
        let model = |w: f64, b1: f64| AdaptiveModel {
            class: AdaptiveClass::AffineIntercept,
            d: 1,
            task: Task::Regression,
            body: ModelBody::Expanded {
                map: map.clone(),
                fit: GlmFit {
                    intercept: 1.0,
                    beta: vec![w, b1],
                    ..GlmFit::constant(crate::glm::Loss::Squared, 2, 0.0)
                },
            },
            cv_loss: 0.0,
        };
        let m = model(2.0, 4.0);
        let imp = m.to_imputation().unwrap();
        assert_eq!(imp.mu, vec![2.0]);
        assert_eq!(m.predict_row(&[123.0], &[true]).unwrap(), 5.0);
        assert_eq!(1.0 + 2.0 * imp.mu[0], 5.0);
        let imp = model(0.0, 4.0).to_imputation().unwrap();
        assert_eq!(imp.undefined, vec![true]);
    }

    #[test]
    fn population_mu_matches_enumeration() {
        // X|M=0 in {-1, 1}, X|M=1 = 3, Y = X; replicate the population exactly
        let mut vals = Vec::new();
        let mut mask = Vec::new();
        for r in 0..300 {
            match r % 3 {
                0 => (vals.push(-1.0), mask.push(false)),
                1 => (vals.push(1.0), mask.push(false)),
                _ => (vals.push(3.0), mask.push(true)),
            };
        }
        let y = vals.clone();
        let x = MaskedMatrix::from_parts(Array2::from_shape_vec((300, 1), vals).unwrap(), Array2::from_shape_vec((300, 1), mask).unwrap()).unwrap();
        let m = fit_adaptive(&x, &TargetVector::regression(y).unwrap(), AdaptiveClass::AffineIntercept, &lambda0()).unwrap();
        // E[Y|M=1] E[X^2|M=0] / E[YX|M=0] = 3 * 1 / 1
        assert!((m.to_imputation().unwrap().mu[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_categorical_and_bad_inputs() {
        let x = MaskedMatrix::complete(Array2::zeros((1, 2))).unwrap();
        let y = TargetVector::regression(vec![1.0]).unwrap();
        assert!(fit_adaptive(&x, &y, AdaptiveClass::Static, &AdaptiveSpec::default()).is_err());
        assert!("polynomial2".parse::<AdaptiveClass>().unwrap() == AdaptiveClass::Polynomial { order: 2 });
        assert!("nope".parse::<AdaptiveClass>().is_err());
    }

    #[test]
    fn json_round_trip_predicts_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_masked(80, 3, 0.3, &mut rng);
        let y = TargetVector::regression((0..80).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        for class in [AdaptiveClass::Affine, AdaptiveClass::finite()] {
            let m = fit_adaptive(&x, &y, class, &AdaptiveSpec::default()).unwrap();
            let back: AdaptiveModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
            assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        }
    }

    fn mse(model: &AdaptiveModel, x: &MaskedMatrix, y: &[f64]) -> f64 {
        let p = model.predict(x).unwrap();
        p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
    }

    /// OLS with intercept on the given columns, by the normal equations.
    fn ols_fitted(x: &MaskedMatrix, y: &[f64], rows: &[usize], cols: &[usize]) -> Vec<f64> {
        let q = cols.len() + 1;
        let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(cols.iter().map(|&j| x.get(i, j).unwrap())).collect() };
        let mut a = Array2::zeros((q, q));
        let mut b = vec![0.0; q];
        for &i in rows {
            let r = row(i);
            for u in 0..q {
                b[u] += r[u] * y[i];
                for v in 0..q {
                    a[[u, v]] += r[u] * r[v];
                }
            }
        }
        let coef = crate::linalg::cholesky_solve(&a, &b).unwrap();
        rows.iter().map(|&i| row(i).iter().zip(&coef).map(|(u, c)| u * c).sum()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn affine_intercept_predictions_equal_imputation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..=4);
            let x = random_masked(120, d, 0.3, &mut rng);
            let y: Vec<f64> = (0..120)
                .map(|i| (0..d).map(|j| x.get(i, j).unwrap_or(0.5) * (j as f64 + 1.0)).sum::<f64>() + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let model = fit_adaptive(&x, &TargetVector::regression(y).unwrap(), AdaptiveClass::AffineIntercept, &lambda0()).unwrap();
            let imp = model.to_imputation().unwrap();
            prop_assume!(imp.undefined.iter().all(|u| !u));
            let (w, b0) = model.pattern_weights(&vec![false; d]).unwrap();
            for _ in 0..50 {
                let xr: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mr: Vec<bool> = (0..d).map(|_| rng.random()).collect();
                let direct = model.predict_row(&xr, &mr).unwrap();
                let via = b0 + (0..d).map(|j| w[j] * if mr[j] { imp.mu[j] } else { xr[j] }).sum::<f64>();
                prop_assert!((direct - via).abs() <= 1e-10 * (1.0 + direct.abs()), "{} vs {}", direct, via);
            }
        }

        #[test]
        fn fits_and_predictions_ignore_masked_storage(seed in any::<u64>(), which in 0usize..5) {
            let class = [
                AdaptiveClass::Static,
                AdaptiveClass::AffineIntercept,
                AdaptiveClass::Affine,
                AdaptiveClass::Polynomial { order: 2 },
                AdaptiveClass::finite(),
            ][which]
                .clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_masked(120, 3, 0.3, &mut rng);
            let y: Vec<f64> = (0..120)
                .map(|i| x.get(i, 0).unwrap_or(1.0) - if x.is_missing(i, 2) { 2.0 } else { 0.0 } + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let y = TargetVector::regression(y).unwrap();
            let model = fit_adaptive(&x, &y, class.clone(), &lambda0()).unwrap();
            let fuzzed = x.fuzz_masked(|| rng.random_range(-1e6..1e6));
            prop_assert_eq!(model.predict(&x).unwrap(), model.predict(&fuzzed).unwrap());
            let refit = fit_adaptive(&fuzzed, &y, class, &lambda0()).unwrap();
            prop_assert_eq!(model.predict(&x).unwrap(), refit.predict(&x).unwrap());
        }

        #[test]
        fn affine_training_loss_never_exceeds_static(seed in any::<u64>(), d in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_masked(80, d, 0.35, &mut rng);
            let y: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
            let t = TargetVector::regression(y.clone()).unwrap();
            let s = fit_adaptive(&x, &t, AdaptiveClass::Static, &lambda0()).unwrap();
            let a = fit_adaptive(&x, &t, AdaptiveClass::Affine, &lambda0()).unwrap();
            prop_assert!(mse(&a, &x, &y) <= mse(&s, &x, &y) + 1e-8);
        }

        #[test]
        fn full_depth_finite_matches_per_pattern_ols(seed in any::<u64>(), d in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            // patterns in rotation: all 2^d appear, each on at least 12 rows
            let v: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
            let x = MaskedMatrix::from_parts(v, Array2::from_shape_fn((n, d), |(i, j)| (i % (1 << d)) >> j & 1 == 1)).unwrap();
            let mut groups: HashMap<Vec<bool>, Vec<usize>> = HashMap::new();
            for i in 0..n {
                groups.entry((0..d).map(|j| x.is_missing(i, j)).collect()).or_default().push(i);
            }
            prop_assert_eq!(groups.len(), 1 << d);
            let mut weights: HashMap<Vec<bool>, Vec<f64>> = HashMap::new();
            for m in groups.keys() {
                weights.insert(m.clone(), (0..=d).map(|_| rng.random_range(-2.0..2.0)).collect());
            }
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let m: Vec<bool> = (0..d).map(|j| x.is_missing(i, j)).collect();
                    let w = &weights[&m];
                    w[d] + (0..d).map(|j| w[j] * x.get(i, j).unwrap_or(0.0)).sum::<f64>() + 0.2 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let class = AdaptiveClass::Finite { max_depth: d, min_leaf: 1, min_gain: 0.0 };
            let model = fit_adaptive(&x, &TargetVector::regression(y.clone()).unwrap(), class, &lambda0()).unwrap();
            let pred = model.predict(&x).unwrap();
            for (m, rows) in &groups {
                let cols: Vec<usize> = (0..d).filter(|&j| !m[j]).collect();
                let want = ols_fitted(&x, &y, rows, &cols);
                for (&i, w) in rows.iter().zip(&want) {
                    prop_assert!((pred[i] - w).abs() <= 1e-6 * (1.0 + w.abs()), "row {}: {} vs {}", i, pred[i], w);
                }
            }
        }
    }
}
