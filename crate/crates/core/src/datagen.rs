//! Synthetic and semi-synthetic data with controlled signals and
//! missingness mechanisms.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assign::{assignment_value, max_weight_assignment};
use crate::cv::derive_seed;
use crate::data::{default_names, ColumnKind, MaskedMatrix, Pattern, TargetVector, Task};
use crate::error::{invalid, Error, Result};
use crate::linalg::variance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Linear,
    Nn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMechanism {
    Mcar,
    Censoring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub d: usize,
    pub r: usize,
    pub eps: f64,
    pub k: usize,
    #[serde(with = "crate::data::float_serde")]
    pub snr: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub p_missing: f64,
    pub signal_kind: SignalKind,
    pub mechanism: SynthMechanism,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 10,
            r: 5,
            eps: 0.1,
            k: 5,
            snr: 2.0,
            n_train: 200,
            n_test: 5000,
            p_missing: 0.3,
            signal_kind: SignalKind::Linear,
            mechanism: SynthMechanism::Mcar,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("d must be positive");
        }
        if !(self.p_missing > 0.0 && self.p_missing < 1.0) {
            return invalid("p_missing must lie in (0, 1)");
        }
        if self.r > self.d || self.k > self.d || self.k == 0 {
            return invalid("need 0 < k <= d and r <= d");
        }
        if !(self.snr > 0.0) || !(self.eps > 0.0) {
            return invalid("snr and eps must be positive");
        }
        if self.n_train == 0 {
            return invalid("n_train must be positive");
        }
        Ok(())
    }
}

/// Zero-mean Gaussian law with covariance `B B' + eps I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDesign {
    pub b: Array2<f64>,
    pub eps: f64,
}

impl GaussianDesign {
    pub fn random<R: Rng>(d: usize, r: usize, eps: f64, rng: &mut R) -> Self {
        let b = Array2::from_shape_fn((d, r), |_| rng.sample(StandardNormal));
        Self { b, eps }
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    pub fn covariance(&self) -> Array2<f64> {
        let mut s = self.b.dot(&self.b.t());
        for j in 0..self.d() {
            s[[j, j]] += self.eps;
        }
        s
    }

    /// Rows `B z1 + sqrt(eps) z2` with standard normal `z1`, `z2`.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let (d, r) = self.b.dim();
        let se = self.eps.sqrt();
        let mut x = Array2::zeros((n, d));
        let mut z = vec![0.0; r];
        for mut row in x.rows_mut() {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for j in 0..d {
                let mut s = 0.0;
                for (l, zl) in z.iter().enumerate() {
                    s += self.b[[j, l]] * zl;
                }
                row[j] = s + se * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    }
}

/// Draws `n_train` rows from a fresh random design seeded by `config.seed`.
pub fn gen_gaussian(config: &SyntheticConfig) -> Result<(GaussianDesign, MaskedMatrix)> {
    if config.r > config.d || !(config.eps > 0.0) || config.d == 0 {
        return invalid("need d > 0, r <= d and eps > 0");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "design", &[]));
    let design = GaussianDesign::random(config.d, config.r, config.eps, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "x-train", &[]));
    let x = design.sample(config.n_train, &mut rng);
    Ok((design, MaskedMatrix::complete(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnLayer {
    /// hidden × inputs
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub out_weights: Vec<f64>,
    pub out_bias: f64,
}

/// `f` reads the support coordinates of `x`, followed by the mask bits of
/// `mask_support` (non-empty only for signals that depend on missingness).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub kind: SignalKind,
    pub support: Vec<usize>,
    pub mask_support: Vec<usize>,
    pub intercept: f64,
    /// Linear weights over the inputs (support values then mask bits).
    pub weights: Vec<f64>,
    pub nn: Option<NnLayer>,
    pub noise_sd: f64,
}

pub const NN_HIDDEN: usize = 10;

impl SignalModel {
    pub fn linear(support: Vec<usize>, intercept: f64, weights: Vec<f64>) -> Self {
        Self {
            kind: SignalKind::Linear,
            support,
            mask_support: Vec::new(),
            intercept,
            weights,
            nn: None,
            noise_sd: 0.0,
        }
    }

    pub fn random<R: Rng>(kind: SignalKind, support: Vec<usize>, mask_support: Vec<usize>, rng: &mut R) -> Self {
        let inputs = support.len() + mask_support.len();
        match kind {
            SignalKind::Linear => {
                let intercept = rng.sample(StandardNormal);
                let weights = (0..inputs).map(|_| rng.random_range(-1.0..=1.0)).collect();
                Self {
                    kind,
                    support,
                    mask_support,
                    intercept,
                    weights,
                    nn: None,
                    noise_sd: 0.0,
                }
            }
            SignalKind::Nn => {
                let weights = (0..NN_HIDDEN)
                    .map(|_| (0..inputs).map(|_| rng.sample(StandardNormal)).collect())
                    .collect();
                let biases = (0..NN_HIDDEN).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let out_weights = (0..NN_HIDDEN).map(|_| rng.sample(StandardNormal)).collect();
                let out_bias = rng.random_range(-1.0..=1.0);
                Self {
                    kind,
                    support,
                    mask_support,
                    intercept: 0.0,
                    weights: Vec::new(),
                    nn: Some(NnLayer {
                        weights,
                        biases,
                        out_weights,
                        out_bias,
                    }),
                    noise_sd: 0.0,
                }
            }
        }
    }

    fn inputs(&self, x: &[f64], m: Option<&[bool]>) -> Vec<f64> {
        let mut v: Vec<f64> = self.support.iter().map(|&j| x[j]).collect();
        for &j in &self.mask_support {
            let bit = m.map(|m| m[j]).unwrap_or(false);
            v.push(if bit { 1.0 } else { 0.0 });
        }
        v
    }

    /// Noise-free signal at one row. `m` is needed only when the signal reads
    /// mask bits; `None` is treated as all observed.
    pub fn f_row(&self, x: &[f64], m: Option<&[bool]>) -> f64 {
        let z = self.inputs(x, m);
        match &self.nn {
            None => self.intercept + self.weights.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>(),
            Some(nn) => {
                let mut out = nn.out_bias;
                for h in 0..nn.biases.len() {
                    let a = nn.biases[h] + nn.weights[h].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>();
                    out += nn.out_weights[h] * a.max(0.0);
                }
                out
            }
        }
    }

    pub fn f(&self, x: ArrayView2<f64>, mask: Option<&Array2<bool>>) -> Result<Vec<f64>> {
        let d = x.ncols();
        if let Some(&j) = self.support.iter().chain(&self.mask_support).find(|&&j| j >= d) {
            return invalid(format!("support index {j} out of range for {d} columns"));
        }
        if !self.mask_support.is_empty() && mask.is_none() {
            return invalid("signal reads mask bits but no mask was given");
        }
        Ok(x.rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let row = r.to_vec();
                let m = mask.map(|m| m.row(i).to_vec());
                self.f_row(&row, m.as_deref())
            })
            .collect())
    }

    /// Sets `noise_sd` so that `Var(f) / sigma^2 = snr` on the given values.
    /// Infinite `snr` gives zero noise.
    pub fn calibrate(&mut self, f_values: &[f64], snr: f64) {
        self.noise_sd = if snr.is_infinite() {
            0.0
        } else {
            (variance(f_values) / snr).sqrt()
        };
    }
}

/// `y = f(x) + N(0, noise_sd^2)`. The signal must not read masked cells: `x`
/// must be fully observed.
pub fn gen_signal<R: Rng>(x: &MaskedMatrix, model: &SignalModel, rng: &mut R) -> Result<TargetVector> {
    if x.has_missing() {
        return invalid("gen_signal needs a fully observed design");
    }
    let f = model.f(x.raw_values().view(), None)?;
    add_noise(f, model.noise_sd, rng)
}

fn add_noise<R: Rng>(f: Vec<f64>, sd: f64, rng: &mut R) -> Result<TargetVector> {
    let y = f
        .into_iter()
        .map(|v| {
            if sd > 0.0 {
                v + sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                v
            }
        })
        .collect();
    TargetVector::new(y, Task::Regression)
}

/// Masks each cell independently with probability `p`.
pub fn apply_mcar<R: Rng>(x: &MaskedMatrix, p: f64, rng: &mut R) -> Result<MaskedMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return invalid("p must lie in [0, 1]");
    }
    let mut mask = x.mask().clone();
    for v in mask.iter_mut() {
        if rng.random::<f64>() < p {
            *v = true;
        }
    }
    x.with_mask(mask)
}

/// Index (0-based) of the order statistic used as the censoring threshold:
/// the `ceil((1 - p) n)`-th smallest value, clamped to `[1, n]`.
pub fn censoring_rank(n: usize, p: f64) -> usize {
    let r = ((1.0 - p) * n as f64 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n) - 1
}

/// Masks, per column, the observed cells strictly above the empirical
/// `(1 - p)` quantile of that column's observed values.
pub fn apply_censoring(x: &MaskedMatrix, p: f64) -> Result<MaskedMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return invalid("p must lie in [0, 1]");
    }
    let mut mask = x.mask().clone();
    for j in 0..x.ncols() {
        let mut vals = x.observed(j);
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let q = vals[censoring_rank(vals.len(), p)];
        for i in 0..x.nrows() {
            if let Some(v) = x.get(i, j) {
                if v > q {
                    mask[[i, j]] = true;
                }
            }
        }
    }
    x.with_mask(mask)
}

/// One synthetic train/test draw.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub design: GaussianDesign,
    pub signal: SignalModel,
    pub train_full: Array2<f64>,
    pub train: MaskedMatrix,
    pub train_y: TargetVector,
    pub test_full: Array2<f64>,
    pub test: MaskedMatrix,
    pub test_y: TargetVector,
}

/// Full synthetic pipeline with a random design and a random signal on a
/// random support of size `k`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "signal", &[]));
    let support = {
        let mut s = sample(&mut rng, config.d, config.k).into_vec();
        s.sort();
        s
    };
    let signal = SignalModel::random(config.signal_kind, support, Vec::new(), &mut rng);
    generate_synthetic_with(config, signal)
}

/// As [`generate_synthetic`] with a caller-supplied signal (its noise level
/// is recalibrated on the training sample).
pub fn generate_synthetic_with(config: &SyntheticConfig, mut signal: SignalModel) -> Result<SyntheticData> {
    config.validate()?;
    let (design, train_c) = gen_gaussian(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "x-test", &[]));
    let test_c = MaskedMatrix::complete(design.sample(config.n_test, &mut rng))?;

    let f_train = signal.f(train_c.raw_values().view(), None)?;
    let f_test = signal.f(test_c.raw_values().view(), None)?;
    signal.calibrate(&f_train, config.snr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise-train", &[]));
    let train_y = add_noise(f_train, signal.noise_sd, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise-test", &[]));
    let test_y = add_noise(f_test, signal.noise_sd, &mut rng)?;

    let (train, test) = match config.mechanism {
        SynthMechanism::Mcar => {
            let mut r1 = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "mask-train", &[]));
            let mut r2 = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "mask-test", &[]));
            (
                apply_mcar(&train_c, config.p_missing, &mut r1)?,
                apply_mcar(&test_c, config.p_missing, &mut r2)?,
            )
        }
        SynthMechanism::Censoring => (
            apply_censoring(&train_c, config.p_missing)?,
            apply_censoring(&test_c, config.p_missing)?,
        ),
    };
    Ok(SyntheticData {
        design,
        signal,
        train_full: train_c.raw_values().clone(),
        train,
        train_y,
        test_full: test_c.raw_values().clone(),
        test,
        test_y,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiMechanism {
    Mar,
    Nmar,
    Am,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSynConfig {
    /// Signal support size; `None` means `min(10, d)`.
    pub k: Option<usize>,
    pub k_missing: usize,
    pub mechanism: SemiMechanism,
    pub signal_kind: SignalKind,
    #[serde(with = "crate::data::float_serde")]
    pub snr: f64,
    pub seed: u64,
    /// Largest `n` solved exactly by the assignment step of `Am`.
    pub exact_cutoff: usize,
}

impl Default for SemiSynConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_missing: 0,
            mechanism: SemiMechanism::Mar,
            signal_kind: SignalKind::Linear,
            snr: 2.0,
            seed: 0,
            exact_cutoff: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemiSynData {
    /// Observed design: `x_full` with (possibly reassigned) mask.
    pub x: MaskedMatrix,
    pub y: TargetVector,
    pub signal: SignalModel,
    pub reassignment: Option<Reassignment>,
}

/// Synthetic response on a completed real design. `observed` supplies the
/// mask (and which columns are maskable); `x_full` is its completion.
pub fn semisyn_signal(observed: &MaskedMatrix, x_full: &Array2<f64>, config: &SemiSynConfig) -> Result<SemiSynData> {
    let (n, d) = (observed.nrows(), observed.ncols());
    if x_full.dim() != (n, d) {
        return Err(Error::DimensionMismatch {
            expected: n * d,
            got: x_full.len(),
        });
    }
    let k = config.k.unwrap_or(d.min(10)).min(d);
    let maskable: Vec<usize> = (0..d).filter(|&j| observed.column_has_missing(j)).collect();
    let complete: Vec<usize> = (0..d).filter(|&j| !observed.column_has_missing(j)).collect();
    if config.k_missing > maskable.len() || config.k_missing > k {
        return invalid(format!(
            "k_missing = {} exceeds the {} maskable columns (k = {k})",
            config.k_missing,
            maskable.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "semisyn-signal", &[]));
    let pick = |rng: &mut ChaCha8Rng, from: &[usize], m: usize| -> Vec<usize> {
        let mut v: Vec<usize> = sample(rng, from.len(), m).into_iter().map(|i| from[i]).collect();
        v.sort();
        v
    };
    let miss_part = pick(&mut rng, &maskable, config.k_missing);
    let rest = (k - config.k_missing).min(complete.len());
    let comp_part = pick(&mut rng, &complete, rest);
    let mut support: Vec<usize> = miss_part.iter().chain(&comp_part).copied().collect();
    support.sort();
    let mask_support = match config.mechanism {
        SemiMechanism::Nmar => miss_part.clone(),
        _ => Vec::new(),
    };
    let mut signal = SignalModel::random(config.signal_kind, support, mask_support, &mut rng);
    let f = signal.f(x_full.view(), Some(observed.mask()))?;
    signal.calibrate(&f, config.snr);
    let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "semisyn-noise", &[]));
    let y = add_noise(f, signal.noise_sd, &mut nrng)?;

    let full = MaskedMatrix::new(
        x_full.clone(),
        Array2::from_elem((n, d), false),
        observed.kinds().to_vec(),
        observed.names().to_vec(),
    )?;
    match config.mechanism {
        SemiMechanism::Mar | SemiMechanism::Nmar => Ok(SemiSynData {
            x: full.with_mask(observed.mask().clone())?,
            y,
            signal,
            reassignment: None,
        }),
        SemiMechanism::Am => {
            let r = adversarial_reassign(x_full, observed.mask(), y.values(), config.exact_cutoff)?;
            Ok(SemiSynData {
                x: full.with_mask(r.mask.clone())?,
                y: TargetVector::new(r.y.clone(), Task::Regression)?,
                signal,
                reassignment: Some(r),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMethod {
    Exact,
    Greedy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reassignment {
    /// Row `i` receives the mask and response of original row `sigma[i]`.
    pub sigma: Vec<usize>,
    pub objective: f64,
    pub method: AssignMethod,
    #[serde(skip)]
    pub mask: Array2<bool>,
    #[serde(skip)]
    pub y: Vec<f64>,
}

fn masked_sum(x: &Array2<f64>, mask: &Array2<bool>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(mask.row(j))
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum()
}

/// Permutes masks (with their responses) across rows to maximize
/// `sum_i x_full_i . m_sigma(i)`: exactly for `n <= exact_cutoff`, greedily
/// over unique patterns otherwise. Returns the identity when it is optimal.
pub fn adversarial_reassign(x_full: &Array2<f64>, mask: &Array2<bool>, y: &[f64], exact_cutoff: usize) -> Result<Reassignment> {
    let n = x_full.nrows();
    if mask.dim() != x_full.dim() {
        return Err(Error::DimensionMismatch {
            expected: x_full.len(),
            got: mask.len(),
        });
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let identity: Vec<usize> = (0..n).collect();
    let id_obj: f64 = (0..n).map(|i| masked_sum(x_full, mask, i, i)).sum();
    let (mut sigma, method) = if n <= exact_cutoff {
        let score = Array2::from_shape_fn((n, n), |(i, j)| masked_sum(x_full, mask, i, j));
        (max_weight_assignment(&score), AssignMethod::Exact)
    } else {
        (greedy_reassign(x_full, mask), AssignMethod::Greedy)
    };
    let mut objective: f64 = (0..n).map(|i| masked_sum(x_full, mask, i, sigma[i])).sum();
    let scale = 1.0 + objective.abs().max(id_obj.abs());
    if id_obj >= objective - 1e-9 * scale {
        sigma = identity;
        objective = id_obj;
    }
    let mut new_mask = mask.clone();
    for (i, &s) in sigma.iter().enumerate() {
        new_mask.row_mut(i).assign(&mask.row(s));
    }
    let new_y = sigma.iter().map(|&s| y[s]).collect();
    Ok(Reassignment {
        sigma,
        objective,
        method,
        mask: new_mask,
        y: new_y,
    })
}

/// Greedy transportation over unique patterns: take (row, pattern) pairs by
/// decreasing score while the pattern still has unused source rows.
pub fn greedy_reassign(x_full: &Array2<f64>, mask: &Array2<bool>) -> Vec<usize> {
    let n = x_full.nrows();
    let groups: BTreeMap<Pattern, Vec<usize>> = crate::data::unique_patterns(mask);
    let groups: Vec<(Pattern, Vec<usize>)> = groups.into_iter().collect();
    let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(n * groups.len());
    for i in 0..n {
        for (g, (pat, _)) in groups.iter().enumerate() {
            let s: f64 = x_full
                .row(i)
                .iter()
                .zip(pat.bits())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum();
            cands.push((s, i, g));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut next = vec![0usize; groups.len()];
    let mut sigma = vec![usize::MAX; n];
    let mut left = n;
    for (_, i, g) in cands {
        if left == 0 {
            break;
        }
        if sigma[i] != usize::MAX || next[g] >= groups[g].1.len() {
            continue;
        }
        sigma[i] = groups[g].1[next[g]];
        next[g] += 1;
        left -= 1;
    }
    sigma
}

/// Objective value of a permutation (for comparing exact and greedy modes).
pub fn reassign_objective(x_full: &Array2<f64>, mask: &Array2<bool>, sigma: &[usize]) -> f64 {
    let score = Array2::from_shape_fn((sigma.len(), sigma.len()), |(i, j)| masked_sum(x_full, mask, i, j));
    assignment_value(&score, sigma)
}

/// Binary categorical features with self-masking: a cell holding level 1 is
/// masked with probability `p_missing`, a cell holding 0 with probability
/// `p_missing * zero_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryConfig {
    pub d: usize,
    pub k: usize,
    pub prob_one: f64,
    #[serde(with = "crate::data::float_serde")]
    pub snr: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub p_missing: f64,
    pub zero_ratio: f64,
    pub seed: u64,
}

impl Default for BinaryConfig {
    fn default() -> Self {
        Self {
            d: 10,
            k: 10,
            prob_one: 0.5,
            snr: 2.0,
            n_train: 500,
            n_test: 5000,
            p_missing: 0.3,
            zero_ratio: 0.25,
            seed: 0,
        }
    }
}

impl BinaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.k > self.d {
            return invalid("need 0 < k <= d");
        }
        if !(self.p_missing > 0.0 && self.p_missing < 1.0) {
            return invalid("p_missing must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.zero_ratio) || !(self.prob_one > 0.0 && self.prob_one < 1.0) {
            return invalid("zero_ratio must lie in [0, 1] and prob_one in (0, 1)");
        }
        if !(self.snr > 0.0) || self.n_train == 0 {
            return invalid("snr and n_train must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BinaryData {
    pub signal: SignalModel,
    pub train_full: MaskedMatrix,
    pub train: MaskedMatrix,
    pub train_y: TargetVector,
    pub test_full: MaskedMatrix,
    pub test: MaskedMatrix,
    pub test_y: TargetVector,
}

pub fn generate_binary(config: &BinaryConfig) -> Result<BinaryData> {
    config.validate()?;
    let d = config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "signal", &[]));
    let mut support = sample(&mut rng, d, config.k).into_vec();
    support.sort();
    let mut signal = SignalModel::random(SignalKind::Linear, support, Vec::new(), &mut rng);
    let kinds = vec![
        ColumnKind::Categorical {
            levels: vec!["0".into(), "1".into()],
        };
        d
    ];
    let draw = |n: usize, label: &str| -> Result<(MaskedMatrix, MaskedMatrix)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, label, &[]));
        let values = Array2::from_shape_fn((n, d), |_| (rng.random::<f64>() < config.prob_one) as u8 as f64);
        let mask = values.mapv(|v| {
            let p = if v == 1.0 { config.p_missing } else { config.p_missing * config.zero_ratio };
            rng.random::<f64>() < p
        });
        let full = MaskedMatrix::new(values, Array2::from_elem((n, d), false), kinds.clone(), default_names(d))?;
        let masked = full.with_mask(mask)?;
        Ok((full, masked))
    };
    let (train_full, train) = draw(config.n_train, "x-train")?;
    let (test_full, test) = draw(config.n_test, "x-test")?;
    let f_train = signal.f(train_full.raw_values().view(), None)?;
    let f_test = signal.f(test_full.raw_values().view(), None)?;
    signal.calibrate(&f_train, config.snr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise-train", &[]));
    let train_y = add_noise(f_train, signal.noise_sd, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise-test", &[]));
    let test_y = add_noise(f_test, signal.noise_sd, &mut rng)?;
    Ok(BinaryData {
        signal,
        train_full,
        train,
        train_y,
        test_full,
        test,
        test_y,
    })
}
