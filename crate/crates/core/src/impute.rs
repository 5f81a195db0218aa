//! Single-value imputers, missing-as-category encoding, and a deterministic
//! chained-equations imputer with the V1/V2/V3 test-time policies.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, MaskedMatrix, MISSING_LEVEL};
use crate::error::{invalid, Error, Result};
use crate::glm::{fit_glm, GlmFit, GlmSpec, Loss};
use crate::linalg::ridge_ols;

pub const CHAINED_RIDGE: f64 = 1e-6;
pub const DEFAULT_SWEEPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImputerKind {
    Zero,
    /// Mean for continuous columns, mode for categorical ones.
    Mean,
    /// Mode of categorical columns only.
    Mode,
    Constant { values: Vec<f64> },
    /// Missing cells of categorical columns become their own level;
    /// continuous columns fall back to the mean.
    MissingCategory,
    Chained { n_sweeps: usize },
}

impl ImputerKind {
    pub fn chained() -> Self {
        ImputerKind::Chained {
            n_sweeps: DEFAULT_SWEEPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ImputerKind::Zero => "zero",
            ImputerKind::Mean => "mean",
            ImputerKind::Mode => "mode",
            ImputerKind::Constant { .. } => "constant",
            ImputerKind::MissingCategory => "category",
            ImputerKind::Chained { .. } => "chained",
        }
    }
}

/// Test-time imputation policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Refit on train rows followed by test rows.
    V1,
    /// Condition on the imputed training matrix.
    V2,
    /// Condition on the raw training matrix.
    V3,
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Policy::V1),
            "v2" => Ok(Policy::V2),
            "v3" => Ok(Policy::V3),
            _ => invalid(format!("unknown policy '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ColumnModel {
    Continuous { intercept: f64, beta: Vec<f64> },
    /// One-vs-all scores; `None` means the level never occurs.
    Categorical { per_level: Vec<Option<GlmFit>>, fallback: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainedState {
    n_sweeps: usize,
    models: Vec<ColumnModel>,
    train_raw: MaskedMatrix,
    train_imputed: MaskedMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Fitted {
    in_kinds: Vec<ColumnKind>,
    out_kinds: Vec<ColumnKind>,
    /// Per-column fill value (level code for categorical columns).
    fill: Vec<f64>,
    /// Columns with at least one missing training cell.
    fit_mask: Vec<bool>,
    /// Code of the added missing level, per column.
    missing_code: Vec<Option<usize>>,
    chained: Option<ChainedState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Imputer {
    kind: ImputerKind,
    state: Option<Fitted>,
}

fn observed_mean(x: &MaskedMatrix, j: usize) -> Result<f64> {
    let v = x.observed(j);
    if v.is_empty() {
        return Err(Error::FullyMissingColumn { column: j });
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Most frequent observed level; ties go to the lowest code.
fn observed_mode(x: &MaskedMatrix, j: usize) -> Result<f64> {
    let v = x.observed(j);
    if v.is_empty() {
        return Err(Error::FullyMissingColumn { column: j });
    }
    let levels = x.kinds()[j].n_levels();
    let mut counts = vec![0usize; levels.max(1)];
    for c in v {
        counts[c as usize] += 1;
    }
    let mut best = 0;
    for (l, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = l;
        }
    }
    Ok(best as f64)
}

fn default_fill(x: &MaskedMatrix, j: usize) -> Result<f64> {
    if x.kinds()[j].is_categorical() {
        observed_mode(x, j)
    } else {
        observed_mean(x, j)
    }
}

impl Imputer {
    pub fn new(kind: ImputerKind) -> Self {
        Self { kind, state: None }
    }

    pub fn kind(&self) -> &ImputerKind {
        &self.kind
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    pub fn fill_values(&self) -> Result<&[f64]> {
        Ok(&self.state.as_ref().ok_or(Error::NotFitted)?.fill)
    }

    /// Columns that had missing training cells.
    pub fn fit_mask(&self) -> Result<&[bool]> {
        Ok(&self.state.as_ref().ok_or(Error::NotFitted)?.fit_mask)
    }

    /// Final imputed training matrix (chained kind only).
    pub fn train_imputed(&self) -> Option<&MaskedMatrix> {
        self.state.as_ref()?.chained.as_ref().map(|c| &c.train_imputed)
    }

    pub fn fit(&mut self, train: &MaskedMatrix) -> Result<()> {
        let d = train.ncols();
        let kinds = train.kinds().to_vec();
        let fit_mask: Vec<bool> = (0..d).map(|j| train.column_has_missing(j)).collect();
        let mut out_kinds = kinds.clone();
        let mut missing_code = vec![None; d];
        let mut chained = None;
        let fill: Vec<f64> = match &self.kind {
            ImputerKind::Zero => vec![0.0; d],
            ImputerKind::Mean => (0..d).map(|j| default_fill(train, j)).collect::<Result<_>>()?,
            ImputerKind::Mode => (0..d)
                .map(|j| {
                    if !kinds[j].is_categorical() {
                        return Err(Error::ColumnKind {
                            column: j,
                            reason: "mode imputation needs a categorical column".into(),
                        });
                    }
                    observed_mode(train, j)
                })
                .collect::<Result<_>>()?,
            ImputerKind::Constant { values } => {
                if values.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: values.len(),
                    });
                }
                for (j, v) in values.iter().enumerate() {
                    if let ColumnKind::Categorical { levels } = &kinds[j] {
                        if v.fract() != 0.0 || *v < 0.0 || *v as usize >= levels.len() {
                            return invalid(format!("constant {v} is not a level code of column {j}"));
                        }
                    }
                }
                values.clone()
            }
            ImputerKind::MissingCategory => {
                let mut fill = Vec::with_capacity(d);
                for j in 0..d {
                    if let ColumnKind::Categorical { levels } = &kinds[j] {
                        if fit_mask[j] {
                            let mut lv = levels.clone();
                            missing_code[j] = Some(lv.len());
                            fill.push(lv.len() as f64);
                            lv.push(MISSING_LEVEL.to_string());
                            out_kinds[j] = ColumnKind::Categorical { levels: lv };
                            continue;
                        }
                    }
                    fill.push(default_fill(train, j)?);
                }
                fill
            }
            ImputerKind::Chained { n_sweeps } => {
                let (models, completed, fill) = run_chained(train, *n_sweeps)?;
                chained = Some(ChainedState {
                    n_sweeps: *n_sweeps,
                    models,
                    train_raw: train.clone(),
                    train_imputed: complete_like(train, completed, &kinds)?,
                });
                fill
            }
        };
        self.state = Some(Fitted {
            in_kinds: kinds,
            out_kinds,
            fill,
            fit_mask,
            missing_code,
            chained,
        });
        Ok(())
    }

    /// Fills every masked cell of `x`; observed cells are copied unchanged and
    /// the result has an empty mask.
    pub fn transform(&self, x: &MaskedMatrix, policy: Policy) -> Result<MaskedMatrix> {
        let st = self.state.as_ref().ok_or(Error::NotFitted)?;
        if x.ncols() != st.in_kinds.len() {
            return Err(Error::DimensionMismatch {
                expected: st.in_kinds.len(),
                got: x.ncols(),
            });
        }
        if x.kinds() != st.in_kinds.as_slice() {
            return invalid("column kinds differ from the training matrix");
        }
        if let Some(ch) = &st.chained {
            let stacked = match policy {
                Policy::V2 => ch.train_imputed.vstack(x)?,
                Policy::V1 | Policy::V3 => ch.train_raw.vstack(x)?,
            };
            let (_, completed, _) = run_chained(&stacked, ch.n_sweeps)?;
            let n0 = ch.train_raw.nrows();
            let rows: Vec<usize> = (n0..stacked.nrows()).collect();
            let test = completed.select(Axis(0), &rows);
            return complete_like(x, test, &st.in_kinds);
        }
        let (n, d) = (x.nrows(), x.ncols());
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                out[[i, j]] = match x.get(i, j) {
                    Some(v) => v,
                    None => st.missing_code[j].map(|c| c as f64).unwrap_or(st.fill[j]),
                };
            }
        }
        MaskedMatrix::new(
            out,
            Array2::from_elem((n, d), false),
            st.out_kinds.clone(),
            x.names().to_vec(),
        )
    }
}

fn complete_like(template: &MaskedMatrix, values: Array2<f64>, kinds: &[ColumnKind]) -> Result<MaskedMatrix> {
    let dim = values.dim();
    MaskedMatrix::new(
        values,
        Array2::from_elem(dim, false),
        kinds.to_vec(),
        template.names().to_vec(),
    )
}

pub fn fit_mean(train: &MaskedMatrix) -> Result<Imputer> {
    let mut imp = Imputer::new(ImputerKind::Mean);
    imp.fit(train)?;
    Ok(imp)
}

pub fn fit_mode(train: &MaskedMatrix) -> Result<Imputer> {
    let mut imp = Imputer::new(ImputerKind::Mode);
    imp.fit(train)?;
    Ok(imp)
}

pub fn fit_chained(train: &MaskedMatrix, n_sweeps: usize) -> Result<Imputer> {
    let mut imp = Imputer::new(ImputerKind::Chained { n_sweeps });
    imp.fit(train)?;
    Ok(imp)
}

/// Imputes a train/test pair under `policy`. For chained imputation under V1
/// both blocks come from one joint refit; otherwise the imputer is fitted on
/// `train` alone.
pub fn impute_pair(kind: &ImputerKind, train: &MaskedMatrix, test: &MaskedMatrix, policy: Policy) -> Result<(MaskedMatrix, MaskedMatrix)> {
    train.check_schema(test)?;
    if let (ImputerKind::Chained { n_sweeps }, Policy::V1) = (kind, policy) {
        let stacked = train.vstack(test)?;
        let (_, completed, _) = run_chained(&stacked, *n_sweeps)?;
        let n0 = train.nrows();
        let tr: Vec<usize> = (0..n0).collect();
        let te: Vec<usize> = (n0..stacked.nrows()).collect();
        let kinds = train.kinds();
        return Ok((
            complete_like(train, completed.select(Axis(0), &tr), kinds)?,
            complete_like(test, completed.select(Axis(0), &te), kinds)?,
        ));
    }
    let mut imp = Imputer::new(kind.clone());
    imp.fit(train)?;
    let tr = match imp.train_imputed() {
        Some(t) => t.clone(),
        None => imp.transform(train, policy)?,
    };
    let te = imp.transform(test, policy)?;
    Ok((tr, te))
}

/// Adds a missing level to each listed categorical column that has missing
/// cells and recodes those cells to it. Columns without missing cells keep
/// their levels.
pub fn encode_missing_category(x: &MaskedMatrix, columns: &[usize]) -> Result<MaskedMatrix> {
    let (mut values, mut mask, mut kinds, names) = x.clone().into_parts();
    for &j in columns {
        if j >= kinds.len() {
            return Err(Error::DimensionMismatch {
                expected: kinds.len(),
                got: j + 1,
            });
        }
        let ColumnKind::Categorical { levels } = &kinds[j] else {
            return Err(Error::ColumnKind {
                column: j,
                reason: "missing-as-category needs a categorical column".into(),
            });
        };
        if !x.column_has_missing(j) {
            continue;
        }
        let code = levels.len() as f64;
        let mut lv = levels.clone();
        lv.push(MISSING_LEVEL.to_string());
        kinds[j] = ColumnKind::Categorical { levels: lv };
        for i in 0..x.nrows() {
            if mask[[i, j]] {
                mask[[i, j]] = false;
                values[[i, j]] = code;
            }
        }
    }
    MaskedMatrix::new(values, mask, kinds, names)
}

/// Inverse of [`encode_missing_category`]: cells holding a trailing
/// missing level become masked again and the level is removed.
pub fn decode_missing_category(x: &MaskedMatrix) -> Result<MaskedMatrix> {
    let (values, mut mask, mut kinds, names) = x.clone().into_parts();
    for j in 0..kinds.len() {
        let ColumnKind::Categorical { levels } = &kinds[j] else {
            continue;
        };
        if levels.last().map(|s| s.as_str()) != Some(MISSING_LEVEL) {
            continue;
        }
        let code = (levels.len() - 1) as f64;
        let lv = levels[..levels.len() - 1].to_vec();
        kinds[j] = ColumnKind::Categorical { levels: lv };
        for i in 0..values.nrows() {
            if !mask[[i, j]] && values[[i, j]] == code {
                mask[[i, j]] = true;
            }
        }
    }
    MaskedMatrix::new(values, mask, kinds, names)
}

/// Predictor columns for target column `j`: other continuous columns as is,
/// other categorical columns one-hot over all their levels.
fn feature_row(row: &[f64], j: usize, kinds: &[ColumnKind], out: &mut Vec<f64>) {
    out.clear();
    for (k, kind) in kinds.iter().enumerate() {
        if k == j {
            continue;
        }
        match kind {
            ColumnKind::Continuous => out.push(row[k]),
            ColumnKind::Categorical { levels } => {
                for l in 0..levels.len() {
                    out.push(if row[k] as usize == l { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

fn design_for(cur: &Array2<f64>, rows: &[usize], j: usize, kinds: &[ColumnKind]) -> Array2<f64> {
    let mut buf = Vec::new();
    let width = {
        feature_row(&cur.row(0).to_vec(), j, kinds, &mut buf);
        buf.len()
    };
    let mut x = Array2::zeros((rows.len(), width));
    for (r, &i) in rows.iter().enumerate() {
        feature_row(&cur.row(i).to_vec(), j, kinds, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            x[[r, c]] = *v;
        }
    }
    x
}

fn fit_column(cur: &Array2<f64>, obs_rows: &[usize], j: usize, kinds: &[ColumnKind]) -> Result<ColumnModel> {
    let x = design_for(cur, obs_rows, j, kinds);
    let y: Vec<f64> = obs_rows.iter().map(|&i| cur[[i, j]]).collect();
    match &kinds[j] {
        ColumnKind::Continuous => {
            let (intercept, beta) = ridge_ols(x.view(), &y, CHAINED_RIDGE)?;
            Ok(ColumnModel::Continuous {
                intercept,
                beta: beta.to_vec(),
            })
        }
        ColumnKind::Categorical { levels } => {
            let mut counts = vec![0usize; levels.len()];
            for &v in &y {
                counts[v as usize] += 1;
            }
            let mut fallback = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[fallback] {
                    fallback = l;
                }
            }
            let spec = GlmSpec {
                loss: Loss::Logistic,
                lambda: 1e-4,
                mixing: 0.0,
                max_iter: 2000,
                tol: 1e-6,
                ..GlmSpec::default()
            };
            let mut per_level = Vec::with_capacity(levels.len());
            for l in 0..levels.len() {
                let yl: Vec<f64> = y.iter().map(|&v| if v as usize == l { 1.0 } else { 0.0 }).collect();
                let c = counts[l];
                per_level.push(if c == 0 {
                    None
                } else if c == y.len() || y.len() < 2 {
                    Some(GlmFit::constant(Loss::Logistic, x.ncols(), c as f64 / y.len() as f64))
                } else {
                    Some(fit_glm(x.view(), &yl, &spec)?)
                });
            }
            Ok(ColumnModel::Categorical { per_level, fallback })
        }
    }
}

fn predict_column(model: &ColumnModel, features: &[f64]) -> f64 {
    match model {
        ColumnModel::Continuous { intercept, beta } => intercept + beta.iter().zip(features).map(|(b, v)| b * v).sum::<f64>(),
        ColumnModel::Categorical { per_level, fallback } => {
            let mut best = *fallback;
            let mut best_p = f64::NEG_INFINITY;
            for (l, m) in per_level.iter().enumerate() {
                if let Some(fit) = m {
                    let p = fit.predict_row(features);
                    if p > best_p {
                        best_p = p;
                        best = l;
                    }
                }
            }
            best as f64
        }
    }
}

/// Deterministic chained equations: mean/mode start, then `n_sweeps` cyclic
/// passes refitting every column on the others and refreshing its missing
/// cells. Returns the last models, the completed matrix, and the start fill.
fn run_chained(x: &MaskedMatrix, n_sweeps: usize) -> Result<(Vec<ColumnModel>, Array2<f64>, Vec<f64>)> {
    let (n, d) = (x.nrows(), x.ncols());
    if d < 2 {
        return invalid("chained imputation needs at least 2 columns");
    }
    if n < 2 {
        return invalid("chained imputation needs at least 2 rows");
    }
    let kinds = x.kinds().to_vec();
    let fill: Vec<f64> = (0..d).map(|j| default_fill(x, j)).collect::<Result<_>>()?;
    let mut cur = x.filled(0.0);
    for ((i, j), v) in cur.indexed_iter_mut() {
        if x.is_missing(i, j) {
            *v = fill[j];
        }
    }
    let obs: Vec<Vec<usize>> = (0..d).map(|j| (0..n).filter(|&i| !x.is_missing(i, j)).collect()).collect();
    let miss: Vec<Vec<usize>> = (0..d).map(|j| (0..n).filter(|&i| x.is_missing(i, j)).collect()).collect();
    let mut models: Vec<ColumnModel> = Vec::new();
    let mut buf = Vec::new();
    for _ in 0..n_sweeps.max(1) {
        models.clear();
        for j in 0..d {
            let model = fit_column(&cur, &obs[j], j, &kinds)?;
            for &i in &miss[j] {
                feature_row(&cur.row(i).to_vec(), j, &kinds, &mut buf);
                cur[[i, j]] = predict_column(&model, &buf);
            }
            models.push(model);
        }
        if n_sweeps == 0 {
            break;
        }
    }
    Ok((models, cur, fill))
}
