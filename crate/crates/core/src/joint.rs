//! Joint optimization of a constant imputation vector and a downstream
//! predictor: alternate a refit of the predictor on `X^mu` with a cyclic
//! `+-sigma_j` coordinate search on `mu` at fixed predictor.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{MaskedMatrix, TargetVector, Task};
use crate::error::{invalid, Error, Result};
use crate::linalg::{mean, sample_sd};
use crate::predictors::{fit_with_spec, make_folds, select_predictor, Family, FittedPredictor, HyperGrid, PredictorSpec};
use crate::stats::auc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub family: Family,
    pub grid: HyperGrid,
    pub max_outer: usize,
    pub max_inner_passes: usize,
    pub min_rel_improve: f64,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            family: Family::Linear,
            grid: HyperGrid::default(),
            max_outer: 20,
            max_inner_passes: 10,
            min_rel_improve: 1e-4,
            seed: 0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner_passes == 0 {
            return invalid("iteration limits must be positive");
        }
        if !(self.min_rel_improve >= 0.0) {
            return invalid("min_rel_improve must be nonnegative");
        }
        self.grid.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub spec: PredictorSpec,
    pub predictor: FittedPredictor,
    pub task: Task,
    /// Training error after each accepted coordinate move, and after each refit.
    pub error_trace: Vec<f64>,
    pub outer_iterations: usize,
}

impl JointModel {
    /// Fills masked coordinates with `mu` and applies the predictor.
    pub fn predict_row(&self, x: &[f64], m: &[bool]) -> Result<f64> {
        if x.len() != self.mu.len() || m.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                got: x.len().min(m.len()),
            });
        }
        let row: Vec<f64> = (0..x.len()).map(|j| if m[j] { self.mu[j] } else { x[j] }).collect();
        self.predictor.predict_row(&row, None)
    }

    pub fn predict(&self, x: &MaskedMatrix) -> Result<Vec<f64>> {
        if x.ncols() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                got: x.ncols(),
            });
        }
        let mut row = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                fill_row(x, i, &self.mu, &mut row);
                self.predictor.predict_row(&row, None)
            })
            .collect()
    }
}

fn fill_row(x: &MaskedMatrix, i: usize, mu: &[f64], row: &mut [f64]) {
    for (j, r) in row.iter_mut().enumerate() {
        *r = x.get(i, j).unwrap_or(mu[j]);
    }
}

/// `X^mu`: masked cells replaced by `mu`, empty mask.
pub fn impute_constant(x: &MaskedMatrix, mu: &[f64]) -> Result<MaskedMatrix> {
    if mu.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: mu.len(),
        });
    }
    let values = Array2::from_shape_fn((x.nrows(), x.ncols()), |(i, j)| x.get(i, j).unwrap_or(mu[j]));
    MaskedMatrix::new(values, Array2::from_elem(x.raw_values().dim(), false), x.kinds().to_vec(), x.names().to_vec())
}

/// Training MSE for regression, `1 - AUC` for binary targets (Brier score
/// when the AUC is undefined).
pub fn training_error(y: &TargetVector, pred: &[f64]) -> f64 {
    let mse = || y.values().iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    match y.task() {
        Task::Regression => mse(),
        Task::Binary => auc(y.values(), pred).map(|a| 1.0 - a).unwrap_or_else(|_| mse()),
    }
}

/// Starting point and step sizes: observed means and `sd_obs / sqrt(n)`.
pub fn initial_mu(x: &MaskedMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.nrows() as f64;
    let mut mu = Vec::with_capacity(x.ncols());
    let mut sigma = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let obs = x.observed(j);
        if obs.is_empty() {
            return Err(Error::FullyMissingColumn { column: j });
        }
        mu.push(mean(&obs));
        sigma.push(if obs.len() > 1 { sample_sd(&obs) / n.sqrt() } else { 0.0 });
    }
    Ok((mu, sigma))
}

struct Search<'a> {
    x: &'a MaskedMatrix,
    y: &'a TargetVector,
    /// Rows with a masked cell in column `j`.
    masked_rows: Vec<Vec<usize>>,
}

impl Search<'_> {
    fn predictions(&self, f: &FittedPredictor, mu: &[f64]) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.x.ncols()];
        (0..self.x.nrows())
            .map(|i| {
                fill_row(self.x, i, mu, &mut row);
                f.predict_row(&row, None)
            })
            .collect()
    }

    /// Cyclic coordinate search at fixed `f`. Returns (error, moved).
    fn inner(&self, f: &FittedPredictor, mu: &mut [f64], sigma: &[f64], passes: usize, trace: &mut Vec<f64>) -> Result<(f64, bool)> {
        let mut pred = self.predictions(f, mu)?;
        let mut err = training_error(self.y, &pred);
        let mut moved_any = false;
        let mut row = vec![0.0; self.x.ncols()];
        for _ in 0..passes {
            let mut moved = false;
            for (j, rows) in self.masked_rows.iter().enumerate() {
                if rows.is_empty() || sigma[j] == 0.0 {
                    continue;
                }
                let base = mu[j];
                let mut best: Option<(f64, f64, Vec<f64>)> = None;
                for eps in [-1.0, 1.0] {
                    mu[j] = base + eps * sigma[j];
                    let mut cand = pred.clone();
                    for &i in rows {
                        fill_row(self.x, i, mu, &mut row);
                        cand[i] = f.predict_row(&row, None)?;
                    }
                    let e = training_error(self.y, &cand);
                    if e < err && best.as_ref().is_none_or(|b| e < b.0) {
                        best = Some((e, mu[j], cand));
                    }
                }
                match best {
                    Some((e, v, cand)) => {
                        debug_assert!(e <= err);
                        mu[j] = v;
                        pred = cand;
                        err = e;
                        trace.push(e);
                        moved = true;
                    }
                    None => mu[j] = base,
                }
            }
            moved_any |= moved;
            if !moved {
                break;
            }
        }
        Ok((err, moved_any))
    }
}

/// Alternating fit. Hyperparameters are chosen once by CV on the
/// mean-imputed data and held fixed for every refit. The best `(mu, f)` pair
/// seen (by training error) is returned.
///
/// With [`Family::Best`] the whole joint fit is run per family on each CV
/// fold, and the family with the lowest validation loss (MSE, Brier score
/// for binary targets) is refit on all rows.
pub fn fit_joint(x: &MaskedMatrix, y: &TargetVector, config: &JointConfig) -> Result<JointModel> {
    config.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if config.family != Family::Best {
        return fit_family(x, y, config);
    }
    let folds = make_folds(x.nrows(), config.grid.folds, config.seed)?;
    let mut best: Option<(f64, Family)> = None;
    for family in [Family::Linear, Family::Tree, Family::Forest] {
        let cfg = JointConfig { family, ..config.clone() };
        let mut sse = 0.0;
        for (train, valid) in folds.splits() {
            let model = fit_family(&x.select_rows(&train), &y.select(&train), &cfg)?;
            let pred = model.predict(&x.select_rows(&valid))?;
            sse += valid.iter().zip(&pred).map(|(&i, p)| (y.values()[i] - p).powi(2)).sum::<f64>();
        }
        let loss = sse / x.nrows() as f64;
        if best.is_none_or(|b| loss < b.0) {
            best = Some((loss, family));
        }
    }
    let family = best.expect("three candidates").1;
    fit_family(x, y, &JointConfig { family, ..config.clone() })
}

fn fit_family(x: &MaskedMatrix, y: &TargetVector, config: &JointConfig) -> Result<JointModel> {
    let (mut mu, sigma) = initial_mu(x)?;
    let masked_rows: Vec<Vec<usize>> = (0..x.ncols()).map(|j| (0..x.nrows()).filter(|&i| x.is_missing(i, j)).collect()).collect();
    let search = Search { x, y, masked_rows };

    let selection = select_predictor(&impute_constant(x, &mu)?, y, config.family, &config.grid, false, config.seed)?;
    let spec = selection.spec;
    let mut f = selection.model;
    let mut trace = Vec::new();

    let start_err = training_error(y, &search.predictions(&f, &mu)?);
    trace.push(start_err);
    let mut best = (start_err, mu.clone(), f.clone());
    let mut prev = start_err;
    let mut outer = 0;
    while outer < config.max_outer {
        outer += 1;
        if outer > 1 {
            f = fit_with_spec(&impute_constant(x, &mu)?, y, &spec)?;
            let e = training_error(y, &search.predictions(&f, &mu)?);
            trace.push(e);
            if e < best.0 {
                best = (e, mu.clone(), f.clone());
            }
        }
        let (err, moved) = search.inner(&f, &mut mu, &sigma, config.max_inner_passes, &mut trace)?;
        if err < best.0 {
            best = (err, mu.clone(), f.clone());
        }
        let rel = if prev > 0.0 { (prev - err) / prev } else { 0.0 };
        prev = err;
        if !moved || rel < config.min_rel_improve {
            break;
        }
    }
    Ok(JointModel {
        mu: best.1,
        sigma,
        spec,
        predictor: best.2,
        task: y.task(),
        error_trace: trace,
        outer_iterations: outer,
    })
}
