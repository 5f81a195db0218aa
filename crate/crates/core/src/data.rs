//! Partially observed design matrices, missingness patterns, and CSV I/O.
//!
//! A [`MaskedMatrix`] stores values and a boolean mask of the same shape
//! (`true` = missing). Missing cells hold `NaN`, but nothing downstream is
//! allowed to test for `NaN`: the mask is the single source of truth.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Label given to the extra level created by missing-as-category encoding.
pub const MISSING_LEVEL: &str = "<missing>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    /// Values are level codes in `0..levels.len()`.
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn is_categorical(&self) -> bool {
        matches!(self, ColumnKind::Categorical { .. })
    }

    pub fn n_levels(&self) -> usize {
        match self {
            ColumnKind::Continuous => 0,
            ColumnKind::Categorical { levels } => levels.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "MatrixRepr", try_from = "MatrixRepr")]
pub struct MaskedMatrix {
    values: Array2<f64>,
    mask: Array2<bool>,
    kinds: Vec<ColumnKind>,
    names: Vec<String>,
}

impl MaskedMatrix {
    /// Builds a matrix, overwriting masked cells with `NaN`.
    ///
    /// Zero-row matrices are allowed so that empty test splits can flow
    /// through transforms; readers reject empty files separately.
    pub fn new(
        mut values: Array2<f64>,
        mask: Array2<bool>,
        kinds: Vec<ColumnKind>,
        names: Vec<String>,
    ) -> Result<Self> {
        let d = values.ncols();
        if d == 0 {
            return invalid("matrix must have at least one column");
        }
        if mask.dim() != values.dim() {
            return invalid(format!(
                "mask shape {:?} differs from values shape {:?}",
                mask.dim(),
                values.dim()
            ));
        }
        if kinds.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: kinds.len(),
            });
        }
        if names.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: names.len(),
            });
        }
        for ((i, j), v) in values.indexed_iter_mut() {
            if mask[[i, j]] {
                *v = f64::NAN;
                continue;
            }
            if let ColumnKind::Categorical { levels } = &kinds[j] {
                let ok = v.fract() == 0.0 && *v >= 0.0 && (*v as usize) < levels.len();
                if !ok {
                    return invalid(format!(
                        "categorical column {j} holds {v} outside [0, {})",
                        levels.len()
                    ));
                }
            } else if !v.is_finite() {
                return invalid(format!("non-finite observed value at ({i}, {j})"));
            }
        }
        Ok(Self {
            values,
            mask,
            kinds,
            names,
        })
    }

    /// Continuous matrix with the given mask and default names `x1..xd`.
    pub fn from_parts(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        let d = values.ncols();
        Self::new(
            values,
            mask,
            vec![ColumnKind::Continuous; d],
            default_names(d),
        )
    }

    /// Fully observed continuous matrix.
    pub fn complete(values: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), false);
        Self::from_parts(values, mask)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Raw storage, `NaN` at masked cells. Callers must consult the mask.
    pub fn raw_values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if self.mask[[i, j]] {
            None
        } else {
            Some(self.values[[i, j]])
        }
    }

    pub fn row_pattern(&self, i: usize) -> Pattern {
        Pattern::new(self.mask.row(i).to_vec())
    }

    pub fn has_missing(&self) -> bool {
        self.mask.iter().any(|&b| b)
    }

    pub fn column_has_missing(&self, j: usize) -> bool {
        self.mask.column(j).iter().any(|&b| b)
    }

    pub fn missing_count(&self, j: usize) -> usize {
        self.mask.column(j).iter().filter(|&&b| b).count()
    }

    /// Observed entries of column `j`.
    pub fn observed(&self, j: usize) -> Vec<f64> {
        self.values
            .column(j)
            .iter()
            .zip(self.mask.column(j))
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Values with masked cells replaced by `fill` (zero-imputation when 0).
    pub fn filled(&self, fill: f64) -> Array2<f64> {
        let mut out = self.values.clone();
        for (v, &m) in out.iter_mut().zip(self.mask.iter()) {
            if m {
                *v = fill;
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> MaskedMatrix {
        MaskedMatrix {
            values: self.values.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
            kinds: self.kinds.clone(),
            names: self.names.clone(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> MaskedMatrix {
        MaskedMatrix {
            values: self.values.select(Axis(1), cols),
            mask: self.mask.select(Axis(1), cols),
            kinds: cols.iter().map(|&j| self.kinds[j].clone()).collect(),
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
        }
    }

    /// Row-concatenation; schemas must agree.
    pub fn vstack(&self, other: &MaskedMatrix) -> Result<MaskedMatrix> {
        self.check_schema(other)?;
        let values = ndarray::concatenate(Axis(0), &[self.values.view(), other.values.view()])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mask = ndarray::concatenate(Axis(0), &[self.mask.view(), other.mask.view()])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(MaskedMatrix {
            values,
            mask,
            kinds: self.kinds.clone(),
            names: self.names.clone(),
        })
    }

    pub fn check_schema(&self, other: &MaskedMatrix) -> Result<()> {
        if self.ncols() != other.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.ncols(),
                got: other.ncols(),
            });
        }
        if self.kinds != other.kinds {
            return invalid("column kinds differ between matrices");
        }
        Ok(())
    }

    /// Same values with a new mask. Cells newly masked become `NaN`; cells
    /// unmasked must have been observed before.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<MaskedMatrix> {
        if mask.dim() != self.mask.dim() {
            return invalid("mask shape mismatch");
        }
        if self.mask.iter().zip(mask.iter()).any(|(&old, &new)| old && !new) {
            return invalid("cannot unmask a cell whose value was never observed");
        }
        MaskedMatrix::new(
            self.values.clone(),
            mask,
            self.kinds.clone(),
            self.names.clone(),
        )
    }

    /// Replaces masked cells with arbitrary values; observed cells untouched.
    /// Used to check that nothing reads masked storage.
    pub fn fuzz_masked(&self, mut gen: impl FnMut() -> f64) -> MaskedMatrix {
        let mut out = self.clone();
        for (v, &m) in out.values.iter_mut().zip(self.mask.iter()) {
            if m {
                *v = gen();
            }
        }
        out
    }

    /// Moves the storage out. Masked cells are `NaN`.
    pub fn into_parts(self) -> (Array2<f64>, Array2<bool>, Vec<ColumnKind>, Vec<String>) {
        (self.values, self.mask, self.kinds, self.names)
    }

    /// Observed values as a dense matrix; fails if any cell is masked.
    pub fn to_dense(&self) -> Result<Array2<f64>> {
        if let Some(((i, j), _)) = self.mask.indexed_iter().find(|(_, &m)| m) {
            return Err(Error::MaskedInput { row: i, column: j });
        }
        Ok(self.values.clone())
    }

    /// One-hot expands categorical columns. Continuous columns pass through.
    /// A masked categorical cell masks every indicator column of that feature.
    pub fn one_hot(&self) -> MaskedMatrix {
        let n = self.nrows();
        let mut cols: Vec<(Vec<f64>, Vec<bool>, String)> = Vec::new();
        for j in 0..self.ncols() {
            match &self.kinds[j] {
                ColumnKind::Continuous => {
                    cols.push((
                        self.values.column(j).to_vec(),
                        self.mask.column(j).to_vec(),
                        self.names[j].clone(),
                    ));
                }
                ColumnKind::Categorical { levels } => {
                    for (l, level) in levels.iter().enumerate() {
                        let mut v = vec![0.0; n];
                        for (i, vi) in v.iter_mut().enumerate() {
                            if self.mask[[i, j]] {
                                *vi = f64::NAN;
                            } else if self.values[[i, j]] as usize == l {
                                *vi = 1.0;
                            }
                        }
                        cols.push((
                            v,
                            self.mask.column(j).to_vec(),
                            format!("{}={}", self.names[j], level),
                        ));
                    }
                }
            }
        }
        let p = cols.len();
        let mut values = Array2::zeros((n, p));
        let mut mask = Array2::from_elem((n, p), false);
        let mut names = Vec::with_capacity(p);
        for (k, (v, m, name)) in cols.into_iter().enumerate() {
            for i in 0..n {
                values[[i, k]] = v[i];
                mask[[i, k]] = m[i];
            }
            names.push(name);
        }
        MaskedMatrix {
            values,
            mask,
            kinds: vec![ColumnKind::Continuous; p],
            names,
        }
    }
}

/// Equality ignores whatever is stored in masked cells.
impl PartialEq for MaskedMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.mask == other.mask
            && self.kinds == other.kinds
            && self.names == other.names
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.mask.iter())
                .all(|((a, b), &m)| m || a == b)
    }
}

/// Serialized form: masked cells are written as 0 so the document stays
/// valid JSON; the mask restores them on load.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    values: Array2<f64>,
    mask: Array2<bool>,
    kinds: Vec<ColumnKind>,
    names: Vec<String>,
}

impl From<MaskedMatrix> for MatrixRepr {
    fn from(m: MaskedMatrix) -> Self {
        let values = m.filled(0.0);
        Self {
            values,
            mask: m.mask,
            kinds: m.kinds,
            names: m.names,
        }
    }
}

impl TryFrom<MatrixRepr> for MaskedMatrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        MaskedMatrix::new(r.values, r.mask, r.kinds, r.names)
    }
}

pub fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// One row's missingness indicator `m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pattern {
    bits: Vec<bool>,
}

impl Pattern {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn observed(d: usize) -> Self {
        Self {
            bits: vec![false; d],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_missing(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn count_missing(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl From<ArrayView1<'_, bool>> for Pattern {
    fn from(row: ArrayView1<'_, bool>) -> Self {
        Pattern::new(row.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    y: Vec<f64>,
    task: Task,
}

impl TargetVector {
    pub fn new(y: Vec<f64>, task: Task) -> Result<Self> {
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return invalid(format!("target value {i} is not finite"));
        }
        if task == Task::Binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("binary target must take values in {0, 1}");
        }
        Ok(Self { y, task })
    }

    pub fn regression(y: Vec<f64>) -> Result<Self> {
        Self::new(y, Task::Regression)
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> TargetVector {
        TargetVector {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            task: self.task,
        }
    }
}

/// `Σ_j w_j (1 - m_j) x_j`; masked coordinates are never read.
pub fn masked_dot(w: &[f64], x: &[f64], m: &Pattern) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: x.len(),
        });
    }
    if m.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: m.len(),
        });
    }
    Ok(w
        .iter()
        .zip(x)
        .zip(m.bits())
        .filter(|(_, &missing)| !missing)
        .map(|((wj, xj), _)| wj * xj)
        .sum())
}

/// Groups row indices by identical mask rows, ordered by pattern.
pub fn unique_patterns(mask: &Array2<bool>) -> BTreeMap<Pattern, Vec<usize>> {
    let mut groups: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
    for (i, row) in mask.outer_iter().enumerate() {
        groups.entry(Pattern::from(row)).or_default().push(i);
    }
    groups
}

/// Column typing hint for [`read_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnHint {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub na_token: String,
    /// Name of the target column to split off, if any.
    pub target: Option<String>,
    /// Per-column kind hints; unhinted columns are continuous when every
    /// non-NA cell parses as a number, categorical otherwise.
    pub hints: HashMap<String, ColumnHint>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            na_token: "NA".to_string(),
            target: None,
            hints: HashMap::new(),
        }
    }
}

/// Reads a header-first CSV file. Cells equal to the NA token are masked.
pub fn read_csv(
    path: impl AsRef<Path>,
    opts: &CsvOptions,
) -> Result<(MaskedMatrix, Option<TargetVector>)> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv_from(file, opts)
}

pub fn read_csv_from<R: std::io::Read>(
    reader: R,
    opts: &CsvOptions,
) -> Result<(MaskedMatrix, Option<TargetVector>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Csv("empty file".into()));
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::Csv("file has no data rows".into()));
    }

    let target_idx = match &opts.target {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Csv(format!("target column '{name}' not found")))?,
        ),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != target_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Csv("no feature columns".into()));
    }

    let n = rows.len();
    let d = feature_cols.len();
    let mut values = Array2::zeros((n, d));
    let mut mask = Array2::from_elem((n, d), false);
    let mut kinds = Vec::with_capacity(d);
    let mut names = Vec::with_capacity(d);
    let na = opts.na_token.as_str();

    for (j, &c) in feature_cols.iter().enumerate() {
        let name = headers[c].clone();
        let all_numeric = rows
            .iter()
            .all(|r| r[c] == na || r[c].parse::<f64>().is_ok());
        let categorical = match opts.hints.get(&name) {
            Some(ColumnHint::Categorical) => true,
            Some(ColumnHint::Continuous) => false,
            None => !all_numeric,
        };
        if categorical {
            let mut levels: Vec<String> = Vec::new();
            let mut index: HashMap<String, usize> = HashMap::new();
            for (i, r) in rows.iter().enumerate() {
                let cell = &r[c];
                if cell == na {
                    mask[[i, j]] = true;
                    continue;
                }
                let code = *index.entry(cell.clone()).or_insert_with(|| {
                    levels.push(cell.clone());
                    levels.len() - 1
                });
                values[[i, j]] = code as f64;
            }
            kinds.push(ColumnKind::Categorical { levels });
        } else {
            for (i, r) in rows.iter().enumerate() {
                let cell = &r[c];
                if cell == na {
                    mask[[i, j]] = true;
                    continue;
                }
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line: i + 2,
                    column: name.clone(),
                    message: format!("'{cell}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: i + 2,
                        column: name.clone(),
                        message: "non-finite value".into(),
                    });
                }
                values[[i, j]] = v;
            }
            kinds.push(ColumnKind::Continuous);
        }
        names.push(name);
    }

    let target = match target_idx {
        Some(c) => Some(parse_target(&rows, c, &headers[c], na)?),
        None => None,
    };
    Ok((MaskedMatrix::new(values, mask, kinds, names)?, target))
}

/// Numeric targets in {0,1} are binary; other numeric targets are
/// regression; non-numeric targets become one-vs-all on the first level in
/// alphabetical order.
fn parse_target(rows: &[Vec<String>], c: usize, name: &str, na: &str) -> Result<TargetVector> {
    if let Some(i) = rows.iter().position(|r| r[c] == na) {
        return Err(Error::Parse {
            line: i + 2,
            column: name.to_string(),
            message: "target values cannot be missing".into(),
        });
    }
    let parsed: Option<Vec<f64>> = rows.iter().map(|r| r[c].parse::<f64>().ok()).collect();
    match parsed {
        Some(y) => {
            let binary = y.iter().all(|&v| v == 0.0 || v == 1.0);
            TargetVector::new(y, if binary { Task::Binary } else { Task::Regression })
        }
        None => {
            let first = rows.iter().map(|r| r[c].as_str()).min().unwrap_or_default();
            let y = rows
                .iter()
                .map(|r| if r[c] == first { 1.0 } else { 0.0 })
                .collect();
            TargetVector::new(y, Task::Binary)
        }
    }
}

/// Writes the matrix (and optional target as a trailing column named
/// `target_name`). Categorical cells are written as level labels.
pub fn write_csv(
    path: impl AsRef<Path>,
    x: &MaskedMatrix,
    target: Option<(&str, &TargetVector)>,
    na_token: &str,
) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(file, x, target, na_token)
}

pub fn write_csv_to<W: std::io::Write>(
    writer: W,
    x: &MaskedMatrix,
    target: Option<(&str, &TargetVector)>,
    na_token: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = x.names().to_vec();
    if let Some((name, _)) = target {
        header.push(name.to_string());
    }
    w.write_record(&header)?;
    for i in 0..x.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for j in 0..x.ncols() {
            let cell = match (x.get(i, j), &x.kinds()[j]) {
                (None, _) => na_token.to_string(),
                (Some(v), ColumnKind::Continuous) => format_f64(v),
                (Some(v), ColumnKind::Categorical { levels }) => levels[v as usize].clone(),
            };
            rec.push(cell);
        }
        if let Some((_, t)) = target {
            rec.push(format_f64(t.values()[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Serde adapters that keep non-finite floats through JSON, which has no
/// literal for them: `inf`, `-inf` and `nan` are written as strings.
pub mod float_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "Infinity" => Ok(f64::INFINITY),
                "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
                "nan" | "NaN" => Ok(f64::NAN),
                _ => Err(E::custom(format!("not a number: '{t}'"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod opt_vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
            v.as_ref().map(|v| v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>()).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
            Option::<Vec<Repr>>::deserialize(d)?
                .map(|v| v.into_iter().map(from_repr).collect())
                .transpose()
        }
    }
}

#[cfg(test)]
mod tests {

    #[test]
    fn non_finite_floats_survive_json() {
        #[derive(Serialize, Deserialize, Debug)]
        struct S {
            #[serde(with = "float_serde")]
            a: f64,
            #[serde(with = "float_serde::opt_vec")]
            b: Option<Vec<f64>>,
        }
        let s = S {
            a: f64::NEG_INFINITY,
            b: Some(vec![1.0, f64::INFINITY, 0.1 + 0.2]),
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"a":"-inf","b":[1.0,"inf",0.30000000000000004]}"#);
        let back: S = serde_json::from_str(&json).unwrap();
        assert_eq!(back.a, f64::NEG_INFINITY);
        assert_eq!(back.b.unwrap()[2].to_bits(), (0.1f64 + 0.2).to_bits());
        let nan: S = serde_json::from_str(r#"{"a":"nan","b":null}"#).unwrap();
        assert!(nan.a.is_nan() && nan.b.is_none());
        assert!(serde_json::from_str::<S>(r#"{"a":"x","b":null}"#).is_err());
    }
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn opts() -> CsvOptions {
        CsvOptions::default()
    }

    #[test]
    fn masked_dot_examples() {
        let w = [1.0, 2.0];
        assert_eq!(masked_dot(&w, &[3.0, 4.0], &Pattern::new(vec![false, false])).unwrap(), 11.0);
        assert_eq!(masked_dot(&w, &[3.0, 4.0], &Pattern::new(vec![false, true])).unwrap(), 3.0);
        assert_eq!(masked_dot(&w, &[3.0, 999.0], &Pattern::new(vec![false, true])).unwrap(), 3.0);
        assert!(masked_dot(&w, &[1.0], &Pattern::observed(2)).is_err());
    }

    #[test]
    fn csv_masks_na_cells() {
        let (x, y) = read_csv_from("a,b\n1,NA\n2,3\n".as_bytes(), &opts()).unwrap();
        assert!(y.is_none());
        assert_eq!(x.mask(), &array![[false, true], [false, false]]);
        assert_eq!(x.get(1, 1), Some(3.0));
    }

    #[test]
    fn csv_categorical_column() {
        let (x, _) = read_csv_from("c\nyes\nno\nNA\nyes\n".as_bytes(), &opts()).unwrap();
        assert_eq!(
            x.kinds()[0],
            ColumnKind::Categorical {
                levels: vec!["yes".into(), "no".into()]
            }
        );
        assert!(x.is_missing(2, 0));
        assert_eq!(x.get(1, 0), Some(1.0));
    }

    #[test]
    fn csv_target_with_na_is_error() {
        let o = CsvOptions {
            target: Some("y".into()),
            ..opts()
        };
        let err = read_csv_from("a,y\n1,2\n3,NA\n".as_bytes(), &o).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn csv_rejects_bad_numeric_and_empty() {
        let mut o = opts();
        o.hints.insert("a".into(), ColumnHint::Continuous);
        assert!(read_csv_from("a\n1\nfoo\n".as_bytes(), &o).is_err());
        assert!(read_csv_from("".as_bytes(), &opts()).is_err());
        assert!(read_csv_from("a,b\n".as_bytes(), &opts()).is_err());
    }

    #[test]
    fn csv_string_target_is_one_vs_all() {
        let o = CsvOptions {
            target: Some("y".into()),
            ..opts()
        };
        let (_, y) = read_csv_from("a,y\n1,dog\n2,cat\n3,emu\n".as_bytes(), &o).unwrap();
        let y = y.unwrap();
        assert_eq!(y.task(), Task::Binary);
        assert_eq!(y.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unique_pattern_examples() {
        let g = unique_patterns(&array![[false, true], [false, true]]);
        assert_eq!(g.len(), 1);
        assert_eq!(g.values().next().unwrap(), &vec![0, 1]);
        assert_eq!(unique_patterns(&array![[false, true], [true, false]]).len(), 2);
        let g = unique_patterns(&Array2::from_elem((5, 3), false));
        assert_eq!(g.len(), 1);
        assert_eq!(g.values().next().unwrap().len(), 5);
    }

    #[test]
    fn new_rejects_bad_shapes_and_levels() {
        let v = Array2::zeros((2, 2));
        assert!(MaskedMatrix::from_parts(v.clone(), Array2::from_elem((2, 1), false)).is_err());
        let kinds = vec![
            ColumnKind::Categorical {
                levels: vec!["a".into()],
            },
            ColumnKind::Continuous,
        ];
        let mut bad = v.clone();
        bad[[0, 0]] = 3.0;
        assert!(MaskedMatrix::new(bad, Array2::from_elem((2, 2), false), kinds, default_names(2)).is_err());
    }

    #[test]
    fn one_hot_propagates_mask() {
        let kinds = vec![ColumnKind::Categorical {
            levels: vec!["a".into(), "b".into()],
        }];
        let x = MaskedMatrix::new(
            array![[0.0], [1.0], [0.0]],
            array![[false], [false], [true]],
            kinds,
            vec!["c".into()],
        )
        .unwrap();
        let oh = x.one_hot();
        assert_eq!(oh.ncols(), 2);
        assert_eq!(oh.get(0, 0), Some(1.0));
        assert_eq!(oh.get(1, 1), Some(1.0));
        assert!(oh.is_missing(2, 0) && oh.is_missing(2, 1));
    }

    fn arb_matrix() -> impl Strategy<Value = MaskedMatrix> {
        (1usize..6, 1usize..4).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(-1e6f64..1e6, n * d),
                proptest::collection::vec(any::<bool>(), n * d),
                proptest::collection::vec(proptest::option::of(1usize..4), d),
            )
                .prop_map(move |(vals, mask, cat)| {
                    let mut values = Array2::from_shape_vec((n, d), vals).unwrap();
                    let mask = Array2::from_shape_vec((n, d), mask).unwrap();
                    let kinds: Vec<ColumnKind> = cat
                        .iter()
                        .map(|c| match c {
                            Some(l) => ColumnKind::Categorical {
                                levels: (0..*l).map(|k| format!("L{k}")).collect(),
                            },
                            None => ColumnKind::Continuous,
                        })
                        .collect();
                    for ((i, j), v) in values.indexed_iter_mut() {
                        if let ColumnKind::Categorical { levels } = &kinds[j] {
                            *v = ((i + j) % levels.len()) as f64;
                        }
                    }
                    MaskedMatrix::new(values, mask, kinds, default_names(d)).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(x in arb_matrix()) {
            let mut buf = Vec::new();
            write_csv_to(&mut buf, &x, None, "NA").unwrap();
            let mut o = opts();
            for (j, k) in x.kinds().iter().enumerate() {
                let hint = if k.is_categorical() { ColumnHint::Categorical } else { ColumnHint::Continuous };
                o.hints.insert(x.names()[j].clone(), hint);
            }
            let (back, _) = read_csv_from(buf.as_slice(), &o).unwrap();
            prop_assert_eq!(back.mask(), x.mask());
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    match (&x.kinds()[j], x.get(i, j)) {
                        (ColumnKind::Continuous, v) => prop_assert_eq!(back.get(i, j), v),
                        (ColumnKind::Categorical { levels }, Some(code)) => {
                            let ColumnKind::Categorical { levels: bl } = &back.kinds()[j] else {
                                panic!("kind changed");
                            };
                            let b = back.get(i, j).unwrap() as usize;
                            prop_assert_eq!(&bl[b], &levels[code as usize]);
                        }
                        (_, None) => prop_assert!(back.is_missing(i, j)),
                    }
                }
            }
        }

        #[test]
        fn masked_dot_ignores_masked_cells(
            w in proptest::collection::vec(-10f64..10.0, 4),
            x in proptest::collection::vec(-10f64..10.0, 4),
            fuzz in proptest::collection::vec(-1e9f64..1e9, 4),
            m in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let p = Pattern::new(m.clone());
            let x2: Vec<f64> = x.iter().zip(&fuzz).zip(&m).map(|((a, b), &mm)| if mm { *b } else { *a }).collect();
            prop_assert_eq!(masked_dot(&w, &x, &p).unwrap().to_bits(), masked_dot(&w, &x2, &p).unwrap().to_bits());
        }

        #[test]
        fn pattern_groups_cover_rows(bits in proptest::collection::vec(any::<bool>(), 1..60)) {
            let n = bits.len() / 3 + 1;
            let d = 3;
            let mut full = bits.clone();
            full.resize(n * d, false);
            let mask = Array2::from_shape_vec((n, d), full).unwrap();
            let groups = unique_patterns(&mask);
            prop_assert_eq!(groups.values().map(Vec::len).sum::<usize>(), n);
            for (p, rows) in &groups {
                prop_assert_eq!(p.count_missing(), p.bits().iter().filter(|&&b| b).count());
                for &i in rows {
                    prop_assert_eq!(&mask.row(i).to_vec(), &p.bits().to_vec());
                }
            }
        }
    }
}
