//! Experiment engine: pipelines, data sources, replicated runs, result
//! records and their aggregation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{fit_adaptive, fit_best, AdaptiveClass, AdaptiveModel, AdaptiveSpec};
use crate::cv::derive_seed;
use crate::data::{read_csv, ColumnHint, ColumnKind, CsvOptions, MaskedMatrix, TargetVector, Task};
use crate::datagen::{
    generate_binary, generate_synthetic, semisyn_signal, BinaryConfig, SemiMechanism, SemiSynConfig, SynthMechanism,
    SyntheticConfig,
};
use crate::error::{invalid, Error, Result};
use crate::impute::{fit_chained, impute_pair, Imputer, ImputerKind, Policy, DEFAULT_SWEEPS};
use crate::joint::{fit_joint, JointConfig, JointModel};
use crate::linalg::mean;
use crate::predictors::{select_predictor, Family, FittedPredictor, HyperGrid};
use crate::stats::{auc_norm, mean_se, paired_tests, r2, PairedTests};

/// A pipeline recipe, written as a colon-separated string:
/// `complete:<family>`, `itr:<imputer>:<family>[:<policy>]`,
/// `adaptive:<class|best>`, `joint:<family>`, `mia[:<family>]`,
/// `oracle:<family>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    CompleteFeatures { family: Family },
    ImputeThenRegress { imputer: ImputerKind, family: Family, policy: Policy },
    /// `None` selects the class by CV.
    Adaptive { class: Option<AdaptiveClass> },
    Joint { family: Family },
    Mia { family: Family },
    Oracle { family: Family },
}

fn parse_imputer(s: &str) -> Result<ImputerKind> {
    match s {
        "zero" => Ok(ImputerKind::Zero),
        "mean" => Ok(ImputerKind::Mean),
        "mode" => Ok(ImputerKind::Mode),
        "category" => Ok(ImputerKind::MissingCategory),
        "chained" => Ok(ImputerKind::chained()),
        _ => invalid(format!("unknown imputer '{s}'")),
    }
}

fn policy_name(p: Policy) -> &'static str {
    match p {
        Policy::V1 => "v1",
        Policy::V2 => "v2",
        Policy::V3 => "v3",
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let family = |i: usize| -> Result<Family> {
            match parts.get(i) {
                Some(f) => f.parse(),
                None => invalid(format!("method '{s}' needs a family")),
            }
        };
        let method = match parts[0] {
            "complete" if parts.len() == 2 => Method::CompleteFeatures { family: family(1)? },
            "itr" if (3..=4).contains(&parts.len()) => Method::ImputeThenRegress {
                imputer: parse_imputer(parts[1])?,
                family: family(2)?,
                policy: parts.get(3).map(|p| p.parse()).transpose()?.unwrap_or(Policy::V2),
            },
            "adaptive" if parts.len() == 2 => Method::Adaptive {
                class: match parts[1] {
                    "best" => None,
                    c => Some(c.parse()?),
                },
            },
            "joint" if parts.len() == 2 => Method::Joint { family: family(1)? },
            "mia" if parts.len() <= 2 => {
                let family = if parts.len() == 2 { family(1)? } else { Family::Tree };
                if family == Family::Linear {
                    return invalid("MIA needs a tree-based family");
                }
                Method::Mia { family }
            }
            "oracle" if parts.len() == 2 => Method::Oracle { family: family(1)? },
            _ => return invalid(format!("unknown method '{s}'")),
        };
        Ok(method)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::CompleteFeatures { family } => write!(f, "complete:{}", family.name()),
            Method::ImputeThenRegress {
                imputer,
                family,
                policy,
            } => write!(f, "itr:{}:{}:{}", imputer.name(), family.name(), policy_name(*policy)),
            Method::Adaptive { class } => match class {
                None => write!(f, "adaptive:best"),
                Some(c) => write!(f, "adaptive:{}", c.name()),
            },
            Method::Joint { family } => write!(f, "joint:{}", family.name()),
            Method::Mia { family } => write!(f, "mia:{}", family.name()),
            Method::Oracle { family } => write!(f, "oracle:{}", family.name()),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl Method {
    pub fn needs_full_data(&self) -> bool {
        matches!(self, Method::Oracle { .. })
    }
}

/// Hyperparameters shared by every pipeline of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub grid: HyperGrid,
    pub extra_penalties: Vec<f64>,
    pub scale_penalties: bool,
    pub joint_max_outer: usize,
    pub joint_max_inner_passes: usize,
    pub joint_min_rel_improve: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let a = AdaptiveSpec::default();
        let j = JointConfig::default();
        Self {
            grid: HyperGrid::default(),
            extra_penalties: a.extra_penalties,
            scale_penalties: a.scale_penalties,
            joint_max_outer: j.max_outer,
            joint_max_inner_passes: j.max_inner_passes,
            joint_min_rel_improve: j.min_rel_improve,
        }
    }
}

impl PipelineOptions {
    pub fn quick() -> Self {
        Self {
            grid: HyperGrid::quick(),
            ..Self::default()
        }
    }

    fn adaptive_spec(&self, seed: u64) -> AdaptiveSpec {
        AdaptiveSpec {
            grid: self.grid.glm.clone(),
            extra_penalties: self.extra_penalties.clone(),
            scale_penalties: self.scale_penalties,
            folds: self.grid.folds,
            seed,
        }
    }

    fn joint_config(&self, family: Family, seed: u64) -> JointConfig {
        JointConfig {
            family,
            grid: self.grid.clone(),
            max_outer: self.joint_max_outer,
            max_inner_passes: self.joint_max_inner_passes,
            min_rel_improve: self.joint_min_rel_improve,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum PipelineBody {
    /// Never-missing training columns; test gaps in them get the training
    /// mean (mode for categorical columns). Without such columns the model
    /// predicts the training mean of `y`.
    Complete {
        columns: Vec<usize>,
        fill: Option<Imputer>,
        model: Option<FittedPredictor>,
        constant: f64,
    },
    Imputed { imputer: Imputer, model: FittedPredictor },
    Adaptive { model: AdaptiveModel },
    Joint { model: JointModel },
    Mia { model: FittedPredictor },
    Oracle { model: FittedPredictor },
}

/// A fitted pipeline; serializes to the model file used by `train`/`predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub method: Method,
    pub kinds: Vec<ColumnKind>,
    pub names: Vec<String>,
    pub task: Task,
    pub body: PipelineBody,
}

impl FittedPipeline {
    /// Fits on training rows only.
    pub fn fit(method: &Method, x: &MaskedMatrix, y: &TargetVector, opts: &PipelineOptions, seed: u64) -> Result<Self> {
        Self::fit_impl(method, x, y, None, opts, seed)
    }

    /// As [`FittedPipeline::fit`], but a V1 impute-then-regress pipeline
    /// imputes `test` jointly with the training rows. Other pipelines ignore
    /// `test`.
    pub fn fit_with_test(
        method: &Method,
        x: &MaskedMatrix,
        y: &TargetVector,
        test: &MaskedMatrix,
        opts: &PipelineOptions,
        seed: u64,
    ) -> Result<Self> {
        Self::fit_impl(method, x, y, Some(test), opts, seed)
    }

    fn fit_impl(
        method: &Method,
        x: &MaskedMatrix,
        y: &TargetVector,
        test: Option<&MaskedMatrix>,
        opts: &PipelineOptions,
        seed: u64,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let grid = &opts.grid;
        let body = match method {
            Method::CompleteFeatures { family } => {
                let columns: Vec<usize> = (0..x.ncols()).filter(|&j| !x.column_has_missing(j)).collect();
                if columns.is_empty() {
                    PipelineBody::Complete {
                        columns,
                        fill: None,
                        model: None,
                        constant: mean(y.values()),
                    }
                } else {
                    let sub = x.select_columns(&columns);
                    let mut fill = Imputer::new(ImputerKind::Mean);
                    fill.fit(&sub)?;
                    let sel = select_predictor(&sub.one_hot(), y, *family, grid, false, seed)?;
                    PipelineBody::Complete {
                        columns,
                        fill: Some(fill),
                        model: Some(sel.model),
                        constant: 0.0,
                    }
                }
            }
            Method::ImputeThenRegress {
                imputer: kind,
                family,
                policy,
            } => {
                let mut imputer = Imputer::new(kind.clone());
                imputer.fit(x)?;
                let train = match (kind, policy, test) {
                    (ImputerKind::Chained { .. }, Policy::V1, Some(t)) => impute_pair(kind, x, t, Policy::V1)?.0,
                    _ => match imputer.train_imputed() {
                        Some(t) => t.clone(),
                        None => imputer.transform(x, *policy)?,
                    },
                };
                let sel = select_predictor(&train.one_hot(), y, *family, grid, false, seed)?;
                PipelineBody::Imputed {
                    imputer,
                    model: sel.model,
                }
            }
            Method::Adaptive { class } => {
                let xe = x.one_hot();
                let spec = opts.adaptive_spec(seed);
                let model = match class {
                    Some(c) => fit_adaptive(&xe, y, *c, &spec)?,
                    None => fit_best(&xe, y, &spec)?,
                };
                PipelineBody::Adaptive { model }
            }
            Method::Joint { family } => PipelineBody::Joint {
                model: fit_joint(&x.one_hot(), y, &opts.joint_config(*family, seed))?,
            },
            Method::Mia { family } => PipelineBody::Mia {
                model: select_predictor(&x.one_hot(), y, *family, grid, true, seed)?.model,
            },
            Method::Oracle { family } => {
                if x.has_missing() {
                    return invalid("the oracle pipeline needs fully observed data");
                }
                PipelineBody::Oracle {
                    model: select_predictor(&x.one_hot(), y, *family, grid, false, seed)?.model,
                }
            }
        };
        Ok(Self {
            method: method.clone(),
            kinds: x.kinds().to_vec(),
            names: x.names().to_vec(),
            task: y.task(),
            body,
        })
    }

    pub fn predict(&self, x: &MaskedMatrix) -> Result<Vec<f64>> {
        if x.ncols() != self.kinds.len() {
            return Err(Error::DimensionMismatch {
                expected: self.kinds.len(),
                got: x.ncols(),
            });
        }
        if x.kinds() != self.kinds.as_slice() {
            return invalid("column kinds differ from the training data");
        }
        match &self.body {
            PipelineBody::Complete {
                columns,
                fill,
                model,
                constant,
            } => match (fill, model) {
                (Some(fill), Some(model)) => {
                    let sub = fill.transform(&x.select_columns(columns), Policy::V2)?;
                    model.predict(&sub.one_hot())
                }
                _ => Ok(vec![*constant; x.nrows()]),
            },
            PipelineBody::Imputed { imputer, model } => {
                let policy = match &self.method {
                    Method::ImputeThenRegress { policy, .. } => *policy,
                    _ => Policy::V2,
                };
                model.predict(&imputer.transform(x, policy)?.one_hot())
            }
            PipelineBody::Adaptive { model } => model.predict(&x.one_hot()),
            PipelineBody::Joint { model } => model.predict(&x.one_hot()),
            PipelineBody::Mia { model } => model.predict(&x.one_hot()),
            PipelineBody::Oracle { model } => {
                if x.has_missing() {
                    return invalid("the oracle pipeline needs fully observed data");
                }
                model.predict(&x.one_hot())
            }
        }
    }

    /// Re-expresses `x` in this model's column schema: categorical cells are
    /// recoded by level name, and unseen levels become missing.
    pub fn conform(&self, x: &MaskedMatrix) -> Result<MaskedMatrix> {
        conform(x, &self.kinds)
    }
}

pub fn conform(x: &MaskedMatrix, kinds: &[ColumnKind]) -> Result<MaskedMatrix> {
    if x.ncols() != kinds.len() {
        return Err(Error::DimensionMismatch {
            expected: kinds.len(),
            got: x.ncols(),
        });
    }
    let (mut values, mut mask, in_kinds, names) = x.clone().into_parts();
    for (j, kind) in kinds.iter().enumerate() {
        match (kind, &in_kinds[j]) {
            (ColumnKind::Continuous, ColumnKind::Continuous) => {}
            (ColumnKind::Categorical { levels }, ColumnKind::Categorical { levels: seen }) => {
                for i in 0..values.nrows() {
                    if mask[[i, j]] {
                        continue;
                    }
                    let name = &seen[values[[i, j]] as usize];
                    match levels.iter().position(|l| l == name) {
                        Some(code) => values[[i, j]] = code as f64,
                        None => mask[[i, j]] = true,
                    }
                }
            }
            _ => {
                return Err(Error::ColumnKind {
                    column: j,
                    reason: "column kind differs from the training data".into(),
                })
            }
        }
    }
    MaskedMatrix::new(values, mask, kinds.to_vec(), names)
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "r2",
        Task::Binary => "auc_norm",
    }
}

pub fn score(y: &TargetVector, pred: &[f64]) -> Result<f64> {
    match y.task() {
        Task::Regression => r2(y.values(), pred),
        Task::Binary => auc_norm(y.values(), pred),
    }
}

/// Where the data of each replication comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian design; the sweep varies `n_train` and `p_missing`.
    Synthetic(SyntheticConfig),
    /// Binary categorical features with self-masking; same sweep axes.
    Binary(BinaryConfig),
    /// Real features from a CSV completed by chained imputation, synthetic
    /// response; the sweep varies `k_missing`.
    SemiSynthetic {
        path: PathBuf,
        #[serde(default)]
        drop: Vec<String>,
        #[serde(default)]
        config: SemiSynConfig,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Real features and target, random train/test split per replication.
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        categorical: Vec<String>,
    },
}

fn default_test_fraction() -> f64 {
    0.3
}

impl DataSource {
    pub fn name(&self) -> String {
        match self {
            DataSource::Synthetic(_) => "synthetic".into(),
            DataSource::Binary(_) => "binary".into(),
            DataSource::SemiSynthetic { path, .. } | DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }
}

/// Values swept over. Empty lists keep the source's own setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub n_train: Vec<usize>,
    /// `p_missing` for generated data, `k_missing` for semi-synthetic data.
    pub missing: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub data: DataSource,
    pub methods: Vec<Method>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub options: PipelineOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_na_token")]
    pub na_token: String,
}

fn default_replications() -> usize {
    10
}

fn default_na_token() -> String {
    "NA".into()
}

impl ExperimentConfig {
    pub fn new(data: DataSource, methods: Vec<Method>) -> Self {
        Self {
            name: String::new(),
            data,
            methods,
            replications: default_replications(),
            sweep: Sweep::default(),
            options: PipelineOptions::default(),
            seed: 0,
            na_token: default_na_token(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return invalid("replications must be at least 1");
        }
        if self.methods.is_empty() {
            return invalid("no methods given");
        }
        self.options.grid.validate()?;
        match &self.data {
            DataSource::Synthetic(c) => c.validate()?,
            DataSource::Binary(c) => c.validate()?,
            DataSource::SemiSynthetic { test_fraction, .. } | DataSource::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return invalid("test_fraction must lie in (0, 1)");
                }
            }
        }
        if self.sweep.n_train.contains(&0) {
            return invalid("n_train values must be positive");
        }
        Ok(())
    }

    /// Dataset id used in records and seeds.
    pub fn dataset(&self) -> String {
        if self.name.is_empty() {
            self.data.name()
        } else {
            self.name.clone()
        }
    }

    /// Sweep points as `(n_train, missing)`; `None` keeps the source value.
    pub fn points(&self) -> Vec<(Option<usize>, Option<f64>)> {
        let ns: Vec<Option<usize>> = match (&self.data, self.sweep.n_train.is_empty()) {
            (DataSource::Synthetic(_) | DataSource::Binary(_), false) => self.sweep.n_train.iter().map(|&n| Some(n)).collect(),
            _ => vec![None],
        };
        let ms: Vec<Option<f64>> = match (&self.data, self.sweep.missing.is_empty()) {
            (DataSource::Csv { .. }, _) | (_, true) => vec![None],
            _ => self.sweep.missing.iter().map(|&m| Some(m)).collect(),
        };
        let mut out = Vec::new();
        for &n in &ns {
            for &m in &ms {
                out.push((n, m));
            }
        }
        out
    }
}

/// One train/test draw.
#[derive(Debug, Clone)]
pub struct Instance {
    pub train: MaskedMatrix,
    pub train_y: TargetVector,
    pub test: MaskedMatrix,
    pub test_y: TargetVector,
    pub train_full: Option<MaskedMatrix>,
    pub test_full: Option<MaskedMatrix>,
    pub mechanism: String,
    pub missing_param: String,
    pub missing_value: f64,
    /// Generator details for manifests.
    pub meta: serde_json::Value,
}

/// Features and target loaded once per run for file-based sources.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub x: MaskedMatrix,
    pub y: Option<TargetVector>,
    pub x_full: Option<Array2<f64>>,
}

pub fn load_source(source: &DataSource, na_token: &str) -> Result<Option<Loaded>> {
    match source {
        DataSource::Synthetic(_) | DataSource::Binary(_) => Ok(None),
        DataSource::SemiSynthetic { path, drop, .. } => {
            let opts = CsvOptions {
                na_token: na_token.into(),
                ..CsvOptions::default()
            };
            let (x, _) = read_csv(path, &opts)?;
            let keep: Vec<usize> = (0..x.ncols()).filter(|&j| !drop.contains(&x.names()[j])).collect();
            let x = x.select_columns(&keep);
            if let Some(j) = x.kinds().iter().position(|k| k.is_categorical()) {
                return Err(Error::ColumnKind {
                    column: j,
                    reason: "semi-synthetic signals need continuous features".into(),
                });
            }
            let completed = fit_chained(&x, DEFAULT_SWEEPS)?;
            let x_full = completed.train_imputed().expect("chained imputer keeps its training fill").raw_values().clone();
            Ok(Some(Loaded {
                x,
                y: None,
                x_full: Some(x_full),
            }))
        }
        DataSource::Csv {
            path, target, categorical, ..
        } => {
            let opts = CsvOptions {
                na_token: na_token.into(),
                target: Some(target.clone()),
                hints: categorical.iter().map(|c| (c.clone(), ColumnHint::Categorical)).collect(),
            };
            let (x, y) = read_csv(path, &opts)?;
            let y = y.ok_or_else(|| Error::InvalidInput(format!("target column '{target}' not found")))?;
            Ok(Some(Loaded { x, y: Some(y), x_full: None }))
        }
    }
}

fn random_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return invalid(format!("cannot split {n} rows with test fraction {test_fraction}"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (te, tr) = idx.split_at(n_test);
    let (mut tr, mut te) = (tr.to_vec(), te.to_vec());
    tr.sort();
    te.sort();
    Ok((tr, te))
}

fn mechanism_name<T: Serialize>(m: &T) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Draws replication `rep` at one sweep point.
pub fn make_instance(
    source: &DataSource,
    loaded: Option<&Loaded>,
    point: (Option<usize>, Option<f64>),
    seed: u64,
) -> Result<Instance> {
    let (n_train, missing) = point;
    match source {
        DataSource::Synthetic(base) => {
            let mut c = base.clone();
            c.seed = seed;
            if let Some(n) = n_train {
                c.n_train = n;
            }
            if let Some(p) = missing {
                c.p_missing = p;
            }
            let data = generate_synthetic(&c)?;
            Ok(Instance {
                train_full: Some(MaskedMatrix::complete(data.train_full)?),
                test_full: Some(MaskedMatrix::complete(data.test_full)?),
                train: data.train,
                train_y: data.train_y,
                test: data.test,
                test_y: data.test_y,
                mechanism: mechanism_name(&c.mechanism),
                missing_param: "p_missing".into(),
                missing_value: c.p_missing,
                meta: serde_json::json!({
                    "config": c,
                    "noise_sd": data.signal.noise_sd,
                    "support": data.signal.support,
                    "signal": data.signal,
                }),
            })
        }
        DataSource::Binary(base) => {
            let mut c = base.clone();
            c.seed = seed;
            if let Some(n) = n_train {
                c.n_train = n;
            }
            if let Some(p) = missing {
                c.p_missing = p;
            }
            let data = generate_binary(&c)?;
            Ok(Instance {
                train: data.train,
                train_y: data.train_y,
                test: data.test,
                test_y: data.test_y,
                train_full: Some(data.train_full),
                test_full: Some(data.test_full),
                mechanism: "self_masking".into(),
                missing_param: "p_missing".into(),
                missing_value: c.p_missing,
                meta: serde_json::json!({
                    "config": c,
                    "noise_sd": data.signal.noise_sd,
                    "support": data.signal.support,
                    "signal": data.signal,
                }),
            })
        }
        DataSource::SemiSynthetic {
            config, test_fraction, ..
        } => {
            let l = loaded.ok_or_else(|| Error::InvalidInput("source data not loaded".into()))?;
            let x_full = l.x_full.as_ref().expect("semi-synthetic sources carry a completion");
            let mut c = config.clone();
            c.seed = seed;
            if let Some(k) = missing {
                if k < 0.0 || k.fract() != 0.0 {
                    return invalid(format!("k_missing must be a whole number, got {k}"));
                }
                c.k_missing = k as usize;
            }
            let data = semisyn_signal(&l.x, x_full, &c)?;
            let (tr, te) = random_split(data.x.nrows(), *test_fraction, derive_seed(seed, "split", &[]))?;
            let full = MaskedMatrix::new(
                x_full.clone(),
                Array2::from_elem(x_full.dim(), false),
                data.x.kinds().to_vec(),
                data.x.names().to_vec(),
            )?;
            // under AM the mask moved with y; x_full rows stay in place
            Ok(Instance {
                train: data.x.select_rows(&tr),
                train_y: data.y.select(&tr),
                test: data.x.select_rows(&te),
                test_y: data.y.select(&te),
                train_full: Some(full.select_rows(&tr)),
                test_full: Some(full.select_rows(&te)),
                mechanism: mechanism_name(&c.mechanism),
                missing_param: "k_missing".into(),
                missing_value: c.k_missing as f64,
                meta: serde_json::json!({
                    "config": c,
                    "noise_sd": data.signal.noise_sd,
                    "support": data.signal.support,
                    "mask_support": data.signal.mask_support,
                    "assignment": data.reassignment.as_ref().map(|r| mechanism_name(&r.method)),
                }),
            })
        }
        DataSource::Csv { test_fraction, .. } => {
            let l = loaded.ok_or_else(|| Error::InvalidInput("source data not loaded".into()))?;
            let y = l.y.as_ref().expect("csv sources carry a target");
            let (tr, te) = random_split(l.x.nrows(), *test_fraction, derive_seed(seed, "split", &[]))?;
            Ok(Instance {
                train: l.x.select_rows(&tr),
                train_y: y.select(&tr),
                test: l.x.select_rows(&te),
                test_y: y.select(&te),
                train_full: None,
                test_full: None,
                mechanism: "real".into(),
                missing_param: "none".into(),
                missing_value: f64::NAN,
                meta: serde_json::json!({ "train_rows": tr.len(), "test_rows": te.len() }),
            })
        }
    }
}

/// Data seed of one replication. Every method and sweep point of a
/// replication shares it, so comparisons are paired.
pub fn replication_seed(master: u64, dataset: &str, rep: usize) -> u64 {
    derive_seed(master, dataset, &[rep as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub method: String,
    pub replication: usize,
    pub mechanism: String,
    pub n_train: usize,
    pub missing_param: String,
    pub missing_value: f64,
    pub metric: String,
    pub value: f64,
    pub wall_time_s: f64,
    pub status: String,
    pub message: String,
}

impl ResultRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Fits one pipeline on an instance and scores it on the test split.
pub fn evaluate(method: &Method, inst: &Instance, opts: &PipelineOptions, seed: u64) -> Result<f64> {
    let (train, test) = if method.needs_full_data() {
        match (&inst.train_full, &inst.test_full) {
            (Some(a), Some(b)) => (a, b),
            _ => return invalid("the oracle pipeline needs the complete design"),
        }
    } else {
        (&inst.train, &inst.test)
    };
    let model = FittedPipeline::fit_with_test(method, train, &inst.train_y, test, opts, seed)?;
    let pred = model.predict(test)?;
    score(&inst.test_y, &pred)
}

/// Runs every (replication, sweep point, method) combination. Records come
/// back in that nested order whatever the thread count; failures become
/// records with status `error`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    config.validate()?;
    let dataset = config.dataset();
    let loaded = load_source(&config.data, &config.na_token)?;
    let points = config.points();
    let cells: Vec<(usize, usize)> = (0..config.replications)
        .flat_map(|r| (0..points.len()).map(move |p| (r, p)))
        .collect();
    let instances: Vec<(u64, Result<Instance>)> = cells
        .par_iter()
        .map(|&(r, p)| {
            let seed = replication_seed(config.seed, &dataset, r);
            (seed, make_instance(&config.data, loaded.as_ref(), points[p], seed))
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.methods.len()).map(move |m| (c, m)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, m)| {
            let (rep, p) = cells[c];
            let (seed, inst) = &instances[c];
            let method = &config.methods[m];
            let fit_seed = derive_seed(*seed, "fit", &[]);
            let start = Instant::now();
            let (value, err, task, meta) = match inst {
                Ok(inst) => {
                    let res = evaluate(method, inst, &config.options, fit_seed);
                    let meta = (
                        inst.mechanism.clone(),
                        inst.train.nrows(),
                        inst.missing_param.clone(),
                        inst.missing_value,
                    );
                    match res {
                        Ok(v) => (v, None, inst.train_y.task(), meta),
                        Err(e) => (f64::NAN, Some(e.to_string()), inst.train_y.task(), meta),
                    }
                }
                Err(e) => (
                    f64::NAN,
                    Some(format!("data: {e}")),
                    Task::Regression,
                    (
                        String::new(),
                        points[p].0.unwrap_or(0),
                        String::new(),
                        points[p].1.unwrap_or(f64::NAN),
                    ),
                ),
            };
            ResultRecord {
                dataset: dataset.clone(),
                method: method.to_string(),
                replication: rep,
                mechanism: meta.0,
                n_train: meta.1,
                missing_param: meta.2,
                missing_value: meta.3,
                metric: metric_name(task).into(),
                value,
                wall_time_s: start.elapsed().as_secs_f64(),
                status: if err.is_some() { "error" } else { "ok" }.into(),
                message: err.unwrap_or_default(),
            }
        })
        .collect();
    Ok(records)
}

pub fn write_records<W: std::io::Write>(records: &[ResultRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(r: R) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Mean and standard error of one (dataset, method, sweep point) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub mechanism: String,
    pub n_train: usize,
    pub missing_param: String,
    pub missing_value: f64,
    pub metric: String,
    pub n: usize,
    pub n_errors: usize,
    pub mean: f64,
    pub se: f64,
}

type GroupKey = (String, String, String, usize, String, u64, String);

fn group_key(r: &ResultRecord) -> GroupKey {
    (
        r.dataset.clone(),
        r.method.clone(),
        r.mechanism.clone(),
        r.n_train,
        r.missing_param.clone(),
        r.missing_value.to_bits(),
        r.metric.clone(),
    )
}

/// Groups records by everything but the replication. Groups keep the order
/// of their first record.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let k = group_key(r);
        let g = groups.entry(k.clone()).or_insert_with(|| {
            order.push(k);
            (Vec::new(), 0)
        });
        if r.is_ok() {
            g.0.push(r.value);
        } else {
            g.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|k| {
            let (vals, errors) = &groups[&k];
            let (mean, se) = mean_se(vals);
            SummaryRow {
                dataset: k.0,
                method: k.1,
                mechanism: k.2,
                n_train: k.3,
                missing_param: k.4,
                missing_value: f64::from_bits(k.5),
                metric: k.6,
                n: vals.len(),
                n_errors: *errors,
                mean,
                se,
            }
        })
        .collect()
}

/// Per-replication values of `method` at the sweep point of `like`, in
/// replication order.
fn values_at(records: &[ResultRecord], method: &str, like: &ResultRecord) -> BTreeMap<usize, f64> {
    records
        .iter()
        .filter(|r| {
            r.is_ok()
                && r.method == method
                && r.dataset == like.dataset
                && r.mechanism == like.mechanism
                && r.n_train == like.n_train
                && r.missing_value.to_bits() == like.missing_value.to_bits()
        })
        .map(|r| (r.replication, r.value))
        .collect()
}

/// Paired test of `a > b` per sweep point, over replications where both
/// succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub n_train: usize,
    pub missing_value: f64,
    pub tests: Option<PairedTests>,
    pub message: String,
}

pub fn compare(records: &[ResultRecord], a: &str, b: &str) -> Vec<Comparison> {
    let mut out = Vec::new();
    let mut seen = Vec::new();
    for r in records.iter().filter(|r| r.method == a) {
        let key = (r.dataset.clone(), r.mechanism.clone(), r.n_train, r.missing_value.to_bits());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let va = values_at(records, a, r);
        let vb = values_at(records, b, r);
        let (xa, xb): (Vec<f64>, Vec<f64>) = va.iter().filter_map(|(k, v)| vb.get(k).map(|w| (*v, *w))).unzip();
        let (tests, message) = match paired_tests(&xa, &xb) {
            Ok(t) => (Some(t), String::new()),
            Err(e) => (None, e.to_string()),
        };
        out.push(Comparison {
            a: a.into(),
            b: b.into(),
            n_train: r.n_train,
            missing_value: r.missing_value,
            tests,
            message,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub rows: Vec<SummaryRow>,
    /// Every method against the first one listed.
    pub comparisons: Vec<Comparison>,
}

pub fn build_summary(name: &str, methods: &[Method], records: &[ResultRecord]) -> Summary {
    let names: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
    let comparisons = match names.split_first() {
        Some((first, rest)) => rest.iter().flat_map(|m| compare(records, m, first)).collect(),
        None => Vec::new(),
    };
    Summary {
        name: name.into(),
        rows: summarize(records),
        comparisons,
    }
}

/// Long-format figure data: one row per (method, sweep point) with the
/// training size on the x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub dataset: String,
    pub method: String,
    pub mechanism: String,
    pub missing_param: String,
    pub missing_value: f64,
    pub x_name: String,
    pub x: f64,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

pub fn plot_data(records: &[ResultRecord]) -> Vec<PlotRow> {
    let mut rows: Vec<PlotRow> = summarize(records)
        .into_iter()
        .map(|s| PlotRow {
            x_name: "n_train".into(),
            x: s.n_train as f64,
            lower: s.mean - s.se,
            upper: s.mean + s.se,
            dataset: s.dataset,
            method: s.method,
            mechanism: s.mechanism,
            missing_param: s.missing_param,
            missing_value: s.missing_value,
            metric: s.metric,
            mean: s.mean,
            se: s.se,
            n: s.n,
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.dataset, &a.mechanism, &a.method)
            .cmp(&(&b.dataset, &b.mechanism, &b.method))
            .then(a.missing_value.total_cmp(&b.missing_value))
            .then(a.x.total_cmp(&b.x))
    });
    rows
}

pub fn write_plot_data<W: std::io::Write>(rows: &[PlotRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Column kinds to hint a CSV reader with, so that prediction files parse
/// like the training file.
pub fn hints_for(kinds: &[ColumnKind], names: &[String]) -> std::collections::HashMap<String, ColumnHint> {
    names
        .iter()
        .zip(kinds)
        .map(|(n, k)| {
            let h = if k.is_categorical() {
                ColumnHint::Categorical
            } else {
                ColumnHint::Continuous
            };
            (n.clone(), h)
        })
        .collect()
}

/// Mechanism parsing helpers for the CLI.
pub fn parse_synth_mechanism(s: &str) -> Result<SynthMechanism> {
    match s {
        "mcar" => Ok(SynthMechanism::Mcar),
        "censoring" => Ok(SynthMechanism::Censoring),
        _ => invalid(format!("unknown mechanism '{s}'")),
    }
}

pub fn parse_semi_mechanism(s: &str) -> Result<SemiMechanism> {
    match s {
        "mar" => Ok(SemiMechanism::Mar),
        "nmar" => Ok(SemiMechanism::Nmar),
        "am" => Ok(SemiMechanism::Am),
        _ => invalid(format!("unknown mechanism '{s}'")),
    }
}
