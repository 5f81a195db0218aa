//! ElasticNet-penalized least squares and logistic regression by cyclic
//! coordinate descent, with per-feature penalty factors.
//!
//! Squared loss minimizes
//!
//! ```text
//! (1/2n) ||y - b0 - X b||^2 + lambda * sum_j phi_j (a |b_j| + (1 - a) b_j^2 / 2)
//! ```
//!
//! and logistic loss replaces the quadratic term by the mean negative
//! log-likelihood (solved by iteratively reweighted coordinate descent).
//! With `standardize = true` the penalty applies to coefficients of the
//! unit-variance columns; reported coefficients are always in original units.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cv::Folds;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub loss: Loss,
    pub lambda: f64,
    /// ElasticNet mixing: 1 is pure lasso, 0 pure ridge.
    pub mixing: f64,
    /// Per-column penalty multipliers. `f64::INFINITY` pins a coefficient to 0.
    #[serde(with = "crate::data::float_serde::opt_vec")]
    pub penalty_factors: Option<Vec<f64>>,
    pub standardize: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub intercept: bool,
}

impl Default for GlmSpec {
    fn default() -> Self {
        Self {
            loss: Loss::Squared,
            lambda: 0.0,
            mixing: 1.0,
            penalty_factors: None,
            standardize: true,
            max_iter: 100_000,
            tol: 1e-7,
            intercept: true,
        }
    }
}

impl GlmSpec {
    pub fn with_loss(loss: Loss) -> Self {
        Self {
            loss,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub loss: Loss,
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub mixing: f64,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl GlmFit {
    pub fn linear_predictor_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Mean response: the linear predictor for squared loss, the class-1
    /// probability for logistic loss.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let eta = self.linear_predictor_row(x);
        match self.loss {
            Loss::Squared => eta,
            Loss::Logistic => sigmoid(eta),
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.predict_row(s),
                None => self.predict_row(&r.to_vec()),
            })
            .collect()
    }

    /// A fit that predicts a constant.
    pub fn constant(loss: Loss, p: usize, value: f64) -> Self {
        let intercept = match loss {
            Loss::Squared => value,
            Loss::Logistic => logit(value),
        };
        Self {
            loss,
            intercept,
            beta: vec![0.0; p],
            lambda: 0.0,
            mixing: 1.0,
            objective_trace: Vec::new(),
            converged: true,
        }
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Sweeps before the first active-set refinement; later ones double the gap.
const POLISH_FIRST: usize = 32;
/// Face solves per refinement attempt.
const POLISH_STEPS: usize = 200;

/// Penalty weights in standardized coordinates.
struct Penalty {
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Penalty {
    fn new(lambda: f64, mixing: f64, factors: &[f64]) -> Self {
        let l1 = factors.iter().map(|f| lambda * mixing * f).collect();
        let l2 = factors.iter().map(|f| lambda * (1.0 - mixing) * f).collect();
        Self { l1, l2 }
    }

    fn value(&self, b: &[f64]) -> f64 {
        b.iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, &v)| self.l1[j] * v.abs() + 0.5 * self.l2[j] * v * v)
            .sum()
    }
}

/// Quadratic problem `(1/2) zz - b'c + (1/2) b'Gb` in standardized coordinates.
struct Quadratic {
    p: usize,
    gram: Vec<f64>,
    c: Vec<f64>,
    zz: f64,
}

struct CdOutcome {
    trace: Vec<f64>,
    converged: bool,
    sweeps: usize,
}

impl Quadratic {
    fn objective(&self, b: &[f64], g: &[f64], pen: &Penalty) -> f64 {
        let cross: f64 = b.iter().zip(self.c.iter().zip(g)).map(|(bj, (cj, gj))| bj * (cj + gj)).sum();
        0.5 * self.zz - 0.5 * cross + pen.value(b)
    }

    /// Cyclic coordinate descent from `b`. `active[j] = false` pins `b_j = 0`.
    fn solve(&self, b: &mut [f64], active: &[bool], pen: &Penalty, max_iter: usize, tol: f64) -> CdOutcome {
        let p = self.p;
        for j in 0..p {
            if !active[j] {
                b[j] = 0.0;
            }
        }
        // g = c - G b
        let mut g = self.c.clone();
        for k in 0..p {
            if b[k] != 0.0 {
                let bk = b[k];
                let row = &self.gram[k * p..(k + 1) * p];
                for j in 0..p {
                    g[j] -= row[j] * bk;
                }
            }
        }
        let mut trace = Vec::new();
        let mut prev = self.objective(b, &g, pen);
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < max_iter {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                if !active[j] {
                    continue;
                }
                let gjj = self.gram[j * p + j];
                let old = b[j];
                let z = g[j] + gjj * old;
                let new = soft_threshold(z, pen.l1[j]) / (gjj + pen.l2[j]);
                let delta = new - old;
                if delta != 0.0 {
                    b[j] = new;
                    let row = &self.gram[j * p..(j + 1) * p];
                    for k in 0..p {
                        g[k] -= row[k] * delta;
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
            if sweeps >= POLISH_FIRST && sweeps.is_power_of_two() && max_change >= tol * bmax_of(b).max(1.0) {
                if let Some((bp, gp)) = self.polish(b, &g, active, pen) {
                    if self.objective(&bp, &gp, pen) <= self.objective(b, &g, pen) {
                        b.copy_from_slice(&bp);
                        g = gp;
                    }
                }
            }
            let obj = self.objective(b, &g, pen);
            debug_assert!(
                obj <= prev + 1e-9 * (1.0 + prev.abs()),
                "coordinate descent objective increased: {prev} -> {obj}"
            );
            trace.push(obj);
            prev = obj;
            if max_change < tol * bmax_of(b).max(1.0) {
                converged = true;
                break;
            }
        }
        CdOutcome {
            trace,
            converged,
            sweeps,
        }
    }

    /// Active-set refinement from `b`: repeatedly solves the smooth problem on
    /// the current support and sign pattern, stepping toward its minimizer
    /// until a coefficient hits zero (dropped) and adding the worst violator
    /// once the face is optimal. Every step lowers the objective. Coordinate
    /// descent crawls on ill-conditioned designs (p > n, tiny λ); this does not.
    fn polish(&self, b: &[f64], g: &[f64], active: &[bool], pen: &Penalty) -> Option<(Vec<f64>, Vec<f64>)> {
        let p = self.p;
        let mut cur = b.to_vec();
        let mut gcur = g.to_vec();
        let mut sign: Vec<f64> = b.iter().map(|v| v.signum()).collect();
        let mut chol = FaceCholesky::default();
        for j in (0..p).filter(|&j| active[j] && (b[j] != 0.0 || pen.l1[j] == 0.0)) {
            if !chol.push(j, self, pen) {
                return None;
            }
        }
        let mut moved = false;
        for _ in 0..POLISH_STEPS {
            if chol.idx.is_empty() {
                break;
            }
            let rhs: Vec<f64> = chol.idx.iter().map(|&j| self.c[j] - pen.l1[j] * sign[j]).collect();
            let sol = chol.solve(&rhs);
            if sol.iter().any(|v| !v.is_finite()) {
                break;
            }
            let mut t = 1.0;
            let mut hit = None;
            for (pos, (&j, &v)) in chol.idx.iter().zip(&sol).enumerate() {
                if pen.l1[j] > 0.0 && v * sign[j] <= 0.0 {
                    let tj = cur[j] / (cur[j] - v);
                    if tj < t {
                        t = tj;
                        hit = Some(pos);
                    }
                }
            }
            for (pos, (&j, &v)) in chol.idx.iter().zip(&sol).enumerate() {
                let new = if Some(pos) == hit { 0.0 } else { cur[j] + t * (v - cur[j]) };
                let delta = new - cur[j];
                if delta != 0.0 {
                    cur[j] = new;
                    moved = true;
                    let row = &self.gram[j * p..(j + 1) * p];
                    for (gk, rk) in gcur.iter_mut().zip(row) {
                        *gk -= rk * delta;
                    }
                }
            }
            if let Some(pos) = hit {
                chol.remove(pos);
                continue;
            }
            let worst = (0..p)
                .filter(|&j| active[j] && cur[j] == 0.0 && !chol.idx.contains(&j))
                .map(|j| (j, gcur[j].abs() - pen.l1[j] * (1.0 + 1e-9)))
                .filter(|&(_, v)| v > 1e-12)
                .max_by(|x, y| x.1.total_cmp(&y.1));
            match worst {
                Some((j, _)) if chol.push(j, self, pen) => sign[j] = gcur[j].signum(),
                _ => break,
            }
        }
        moved.then_some((cur, gcur))
    }
}

/// Cholesky factor of `G_SS + diag(l2_S)` kept up to date as the support
/// `S` gains and loses columns.
#[derive(Default)]
struct FaceCholesky {
    idx: Vec<usize>,
    /// Lower-triangular rows; row `r` has `r + 1` entries.
    rows: Vec<Vec<f64>>,
}

impl FaceCholesky {
    /// Appends column `j`. A (numerically) dependent column gets a pivot
    /// floor of `1e-10` times its diagonal, which picks one minimizer of a
    /// singular face; false only for non-finite input.
    fn push(&mut self, j: usize, q: &Quadratic, pen: &Penalty) -> bool {
        let p = q.p;
        let mut w: Vec<f64> = self.idx.iter().map(|&i| q.gram[i * p + j]).collect();
        for r in 0..w.len() {
            let s: f64 = self.rows[r][..r].iter().zip(&w[..r]).map(|(a, b)| a * b).sum();
            w[r] = (w[r] - s) / self.rows[r][r];
        }
        let diag = q.gram[j * p + j] + pen.l2[j];
        let d = (diag - w.iter().map(|v| v * v).sum::<f64>()).max(1e-10 * diag);
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        w.push(d.sqrt());
        self.rows.push(w);
        self.idx.push(j);
        true
    }

    fn remove(&mut self, pos: usize) {
        self.idx.remove(pos);
        self.rows.remove(pos);
        let mut x: Vec<f64> = self.rows[pos..].iter_mut().map(|r| r.remove(pos)).collect();
        // rank-one update of the trailing block by the removed column
        let m = x.len();
        for k in 0..m {
            let lkk = self.rows[pos + k][pos + k];
            let r = lkk.hypot(x[k]);
            let (c, s) = (r / lkk, x[k] / lkk);
            self.rows[pos + k][pos + k] = r;
            for i in k + 1..m {
                let l = &mut self.rows[pos + i][pos + k];
                *l = (*l + s * x[i]) / c;
                x[i] = c * x[i] - s * *l;
            }
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let k = rhs.len();
        let mut z = rhs.to_vec();
        for i in 0..k {
            let s: f64 = self.rows[i][..i].iter().zip(&z[..i]).map(|(a, b)| a * b).sum();
            z[i] = (z[i] - s) / self.rows[i][i];
        }
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|r| self.rows[r][i] * z[r]).sum();
            z[i] = (z[i] - s) / self.rows[i][i];
        }
        z
    }
}

fn bmax_of(b: &[f64]) -> f64 {
    b.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Shared preprocessing for repeated fits on one design (λ paths, CV).
struct Solver<'a> {
    y: &'a [f64],
    loss: Loss,
    intercept: bool,
    n: usize,
    p: usize,
    xbar: Vec<f64>,
    /// 0 marks a constant column, which is pinned to zero.
    scale: Vec<f64>,
    /// Standardized design, `(x - xbar) / scale` (0 where scale = 0).
    xs: Array2<f64>,
    /// Unweighted quadratic for squared loss.
    quad: Option<Quadratic>,
}

impl<'a> Solver<'a> {
    fn new(x: ArrayView2<'a, f64>, y: &'a [f64], loss: Loss, intercept: bool, standardize: bool) -> Result<Self> {
        let (n, p) = x.dim();
        if n != y.len() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if n < 2 {
            return invalid("need at least 2 rows to fit a GLM");
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite value in GLM input");
        }
        if loss == Loss::Logistic && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("logistic loss needs 0/1 targets");
        }
        let nf = n as f64;
        let mut xbar = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for j in 0..p {
            let col = x.column(j);
            let m = if intercept { col.sum() / nf } else { 0.0 };
            let ms = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf;
            xbar[j] = m;
            // Relative threshold: columns that are constant up to rounding.
            let tiny = 1e-24 * (1.0 + m * m);
            scale[j] = if ms <= tiny {
                0.0
            } else if standardize {
                ms.sqrt()
            } else {
                1.0
            };
        }
        let mut xs = Array2::zeros((n, p));
        for ((i, j), v) in xs.indexed_iter_mut() {
            if scale[j] > 0.0 {
                *v = (x[[i, j]] - xbar[j]) / scale[j];
            }
        }
        let quad = match loss {
            Loss::Squared => {
                let ybar = if intercept { y.iter().sum::<f64>() / nf } else { 0.0 };
                let z: Vec<f64> = y.iter().map(|v| v - ybar).collect();
                Some(weighted_quadratic(&xs, &z, None, false))
            }
            Loss::Logistic => None,
        };
        Ok(Self {
            y,
            loss,
            intercept,
            n,
            p,
            xbar,
            scale,
            xs,
            quad,
        })
    }

    fn factors(&self, spec_factors: Option<&[f64]>) -> Result<Vec<f64>> {
        match spec_factors {
            None => Ok(vec![1.0; self.p]),
            Some(f) => {
                if f.len() != self.p {
                    return Err(Error::DimensionMismatch {
                        expected: self.p,
                        got: f.len(),
                    });
                }
                if f.iter().any(|v| v.is_nan() || *v < 0.0) {
                    return invalid("penalty factors must be nonnegative");
                }
                Ok(f.to_vec())
            }
        }
    }

    fn active(&self, factors: &[f64]) -> Vec<bool> {
        (0..self.p)
            .map(|j| self.scale[j] > 0.0 && factors[j].is_finite())
            .collect()
    }

    /// Smallest λ at which every penalized coefficient is zero.
    fn lambda_max(&self, mixing: f64, factors: &[f64]) -> f64 {
        let nf = self.n as f64;
        let ybar = if self.intercept {
            self.y.iter().sum::<f64>() / nf
        } else {
            match self.loss {
                Loss::Squared => 0.0,
                Loss::Logistic => 0.5,
            }
        };
        let a = mixing.max(1e-3);
        let active = self.active(factors);
        let mut best: f64 = 0.0;
        for j in 0..self.p {
            if !active[j] || factors[j] <= 0.0 {
                continue;
            }
            let c: f64 = self
                .xs
                .column(j)
                .iter()
                .zip(self.y)
                .map(|(xv, yv)| xv * (yv - ybar))
                .sum::<f64>()
                / nf;
            best = best.max(c.abs() / (a * factors[j]));
        }
        best
    }

    /// Fits from an optional warm start (standardized coefficients, intercept
    /// in standardized coordinates). Returns the fit and the new warm start.
    fn fit(&self, spec: &GlmSpec, warm: Option<&(Vec<f64>, f64)>) -> Result<(GlmFit, (Vec<f64>, f64))> {
        if !(spec.lambda >= 0.0) || !spec.lambda.is_finite() && spec.lambda != f64::INFINITY {
            return invalid("lambda must be nonnegative");
        }
        if !(0.0..=1.0).contains(&spec.mixing) {
            return invalid("mixing must lie in [0, 1]");
        }
        if !(spec.tol > 0.0) {
            return invalid("tol must be positive");
        }
        let factors = self.factors(spec.penalty_factors.as_deref())?;
        let active = self.active(&factors);
        let lambda = if spec.lambda.is_finite() { spec.lambda } else { f64::MAX / 4.0 };
        let pen = Penalty::new(lambda, spec.mixing, &factors);
        let (b, b0s, trace, converged) = match self.loss {
            Loss::Squared => {
                let quad = self.quad.as_ref().expect("squared loss quadratic");
                let mut b = warm.map(|w| w.0.clone()).unwrap_or_else(|| vec![0.0; self.p]);
                let out = quad.solve(&mut b, &active, &pen, spec.max_iter, spec.tol);
                let ybar = if self.intercept {
                    self.y.iter().sum::<f64>() / self.n as f64
                } else {
                    0.0
                };
                (b, ybar, out.trace, out.converged)
            }
            Loss::Logistic => self.irls(&active, &pen, spec, warm),
        };
        let beta: Vec<f64> = (0..self.p)
            .map(|j| if self.scale[j] > 0.0 { b[j] / self.scale[j] } else { 0.0 })
            .collect();
        let intercept = b0s - beta.iter().zip(&self.xbar).map(|(bj, m)| bj * m).sum::<f64>();
        let fit = GlmFit {
            loss: self.loss,
            intercept,
            beta,
            lambda: spec.lambda,
            mixing: spec.mixing,
            objective_trace: trace,
            converged,
        };
        Ok((fit, (b, b0s)))
    }

    fn logistic_objective(&self, b: &[f64], b0: f64, pen: &Penalty) -> f64 {
        let mut nll = 0.0;
        for (i, row) in self.xs.rows().into_iter().enumerate() {
            let eta = b0 + row.iter().zip(b).map(|(x, bj)| x * bj).sum::<f64>();
            // log(1 + e^eta) - y eta, computed stably
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            nll += softplus - self.y[i] * eta;
        }
        nll / self.n as f64 + pen.value(b)
    }

    fn irls(
        &self,
        active: &[bool],
        pen: &Penalty,
        spec: &GlmSpec,
        warm: Option<&(Vec<f64>, f64)>,
    ) -> (Vec<f64>, f64, Vec<f64>, bool) {
        let n = self.n;
        let (mut b, mut b0) = match warm {
            Some((wb, wb0)) => (wb.clone(), *wb0),
            None => {
                let ybar = self.y.iter().sum::<f64>() / n as f64;
                (vec![0.0; self.p], if self.intercept { logit(ybar) } else { 0.0 })
            }
        };
        for j in 0..self.p {
            if !active[j] {
                b[j] = 0.0;
            }
        }
        let mut obj = self.logistic_objective(&b, b0, pen);
        let mut trace = vec![obj];
        let mut sweeps_left = spec.max_iter;
        let mut converged = false;
        for _ in 0..200 {
            if sweeps_left == 0 {
                break;
            }
            let mut w = vec![0.0; n];
            let mut z = vec![0.0; n];
            for (i, row) in self.xs.rows().into_iter().enumerate() {
                let eta = b0 + row.iter().zip(&b).map(|(x, bj)| x * bj).sum::<f64>();
                let pr = sigmoid(eta);
                let wi = (pr * (1.0 - pr)).max(1e-5);
                w[i] = wi;
                z[i] = eta + (self.y[i] - pr) / wi;
            }
            let (quad, xw, zw) = weighted_quadratic_centered(&self.xs, &z, &w, self.intercept);
            let mut bn = b.clone();
            let out = quad.solve(&mut bn, active, pen, sweeps_left, spec.tol);
            sweeps_left = sweeps_left.saturating_sub(out.sweeps);
            let mut b0n = if self.intercept {
                zw - xw.iter().zip(&bn).map(|(m, bj)| m * bj).sum::<f64>()
            } else {
                0.0
            };
            let mut objn = self.logistic_objective(&bn, b0n, pen);
            let mut halvings = 0;
            while objn > obj + 1e-13 * (1.0 + obj.abs()) && halvings < 40 {
                for j in 0..self.p {
                    bn[j] = 0.5 * (bn[j] + b[j]);
                }
                b0n = 0.5 * (b0n + b0);
                objn = self.logistic_objective(&bn, b0n, pen);
                halvings += 1;
            }
            if objn > obj {
                // no descent direction left at this precision
                converged = true;
                break;
            }
            let change = bn
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold((b0n - b0).abs(), f64::max);
            b = bn;
            b0 = b0n;
            obj = objn;
            trace.push(obj);
            let bmax = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if change < spec.tol * bmax.max(1.0) && out.converged {
                converged = true;
                break;
            }
        }
        (b, b0, trace, converged)
    }
}

fn weighted_quadratic(xs: &Array2<f64>, z: &[f64], w: Option<&[f64]>, _centered: bool) -> Quadratic {
    let (n, p) = xs.dim();
    let nf = n as f64;
    let xw: Array2<f64> = match w {
        None => xs.clone(),
        Some(w) => {
            let mut m = xs.clone();
            for (i, mut row) in m.rows_mut().into_iter().enumerate() {
                row *= w[i];
            }
            m
        }
    };
    let gram_m = xw.t().dot(xs) / nf;
    let zv = ndarray::ArrayView1::from(z);
    let c = xw.t().dot(&zv) / nf;
    let zz = match w {
        None => z.iter().map(|v| v * v).sum::<f64>() / nf,
        Some(w) => z.iter().zip(w).map(|(v, wi)| wi * v * v).sum::<f64>() / nf,
    };
    let mut gram = Vec::with_capacity(p * p);
    for r in gram_m.rows() {
        gram.extend(r.iter().copied());
    }
    Quadratic {
        p,
        gram,
        c: c.to_vec(),
        zz,
    }
}

/// Weighted quadratic after weighted centering of columns and response.
/// Returns the quadratic plus the weighted column means and response mean.
fn weighted_quadratic_centered(xs: &Array2<f64>, z: &[f64], w: &[f64], intercept: bool) -> (Quadratic, Vec<f64>, f64) {
    let (n, p) = xs.dim();
    let sw: f64 = w.iter().sum();
    let mut xm = vec![0.0; p];
    let mut zm = 0.0;
    if intercept {
        for i in 0..n {
            for j in 0..p {
                xm[j] += w[i] * xs[[i, j]];
            }
            zm += w[i] * z[i];
        }
        for v in xm.iter_mut() {
            *v /= sw;
        }
        zm /= sw;
    }
    let mut xc = xs.clone();
    for mut row in xc.rows_mut() {
        for j in 0..p {
            row[j] -= xm[j];
        }
    }
    let zc: Vec<f64> = z.iter().map(|v| v - zm).collect();
    (weighted_quadratic(&xc, &zc, Some(w), true), xm, zm)
}

/// Fits one ElasticNet GLM. `max_iter` exhaustion returns a fit with
/// `converged = false`.
pub fn fit_glm(x: ArrayView2<f64>, y: &[f64], spec: &GlmSpec) -> Result<GlmFit> {
    let solver = Solver::new(x, y, spec.loss, spec.intercept, spec.standardize)?;
    Ok(solver.fit(spec, None)?.0)
}

/// Largest useful λ for the given mixing and penalty factors (the smallest
/// λ that zeroes every penalized coefficient; ridge uses mixing 0.001).
pub fn lambda_max(x: ArrayView2<f64>, y: &[f64], spec: &GlmSpec) -> Result<f64> {
    let solver = Solver::new(x, y, spec.loss, spec.intercept, spec.standardize)?;
    let factors = solver.factors(spec.penalty_factors.as_deref())?;
    Ok(solver.lambda_max(spec.mixing, &factors))
}

/// Largest KKT violation of `fit` for the problem `spec`, measured in the
/// solver's standardized coordinates.
pub fn kkt_violation(x: ArrayView2<f64>, y: &[f64], spec: &GlmSpec, fit: &GlmFit) -> Result<f64> {
    let solver = Solver::new(x, y, spec.loss, spec.intercept, spec.standardize)?;
    let factors = solver.factors(spec.penalty_factors.as_deref())?;
    let active = solver.active(&factors);
    let nf = solver.n as f64;
    let resid: Vec<f64> = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(r, &yi)| yi - fit.predict_row(&r.to_vec()))
        .collect();
    let mut worst: f64 = 0.0;
    for j in 0..solver.p {
        if !active[j] {
            continue;
        }
        let g: f64 = solver.xs.column(j).iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf;
        let b = fit.beta[j] * solver.scale[j];
        let l1 = spec.lambda * spec.mixing * factors[j];
        let l2 = spec.lambda * (1.0 - spec.mixing) * factors[j];
        let v = if b == 0.0 {
            (g.abs() - l1).max(0.0)
        } else {
            (g - l2 * b - l1 * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Penalty factors `sqrt(n / n_k)` from per-feature activity counts; a
/// feature never active gets `INFINITY` (its coefficient is pinned to 0).
pub fn scaled_penalty_factors(active_counts: &[usize], n: usize) -> Vec<f64> {
    active_counts
        .iter()
        .map(|&nk| {
            if nk == 0 {
                f64::INFINITY
            } else {
                (n as f64 / nk as f64).sqrt()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaGrid {
    /// `count` log-spaced values from λ_max down to `min_ratio * λ_max`.
    Auto { count: usize, min_ratio: f64 },
    Fixed { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmGrid {
    pub lambdas: LambdaGrid,
    pub mixings: Vec<f64>,
}

impl Default for GlmGrid {
    fn default() -> Self {
        Self {
            lambdas: LambdaGrid::Auto {
                count: 30,
                min_ratio: 1e-4,
            },
            mixings: vec![0.0, 0.5, 1.0],
        }
    }
}

impl GlmGrid {
    pub fn fixed(lambda: f64, mixing: f64) -> Self {
        Self {
            lambdas: LambdaGrid::Fixed {
                values: vec![lambda],
            },
            mixings: vec![mixing],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    /// Winning spec (λ, mixing filled in).
    pub spec: GlmSpec,
    /// Winner refit on the full training set.
    pub fit: GlmFit,
    /// Fold-mean validation mean squared error of the winner.
    pub cv_loss: f64,
    /// `(mixing, lambda, cv loss)` for every grid point.
    pub table: Vec<(f64, f64, f64)>,
}

fn lambda_values(grid: &LambdaGrid, lmax: f64) -> Vec<f64> {
    match grid {
        LambdaGrid::Fixed { values } => {
            let mut v = values.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        }
        LambdaGrid::Auto { count, min_ratio } => {
            let count = (*count).max(1);
            if lmax <= 0.0 {
                return vec![0.0];
            }
            if count == 1 {
                return vec![lmax];
            }
            let lo = (lmax * min_ratio).ln();
            let hi = lmax.ln();
            (0..count)
                .map(|i| (hi + (lo - hi) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// Grid search over (λ, mixing) by fold-mean validation MSE (Brier score for
/// logistic). Ties go to the larger λ. The winner is refit on all rows.
pub fn cv_path(x: ArrayView2<f64>, y: &[f64], base: &GlmSpec, grid: &GlmGrid, folds: &Folds) -> Result<CvOutcome> {
    let n = x.nrows();
    if folds.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: folds.len(),
        });
    }
    if grid.mixings.is_empty() {
        return invalid("empty mixing grid");
    }
    let full = Solver::new(x, y, base.loss, base.intercept, base.standardize)?;
    let factors = full.factors(base.penalty_factors.as_deref())?;

    let mut paths: Vec<(f64, Vec<f64>)> = Vec::new();
    for &a in &grid.mixings {
        let lmax = full.lambda_max(a, &factors);
        paths.push((a, lambda_values(&grid.lambdas, lmax)));
    }
    let mut sums: Vec<Vec<f64>> = paths.iter().map(|(_, l)| vec![0.0; l.len()]).collect();

    for (train, valid) in folds.splits() {
        if train.len() < 2 || valid.is_empty() {
            continue;
        }
        let xt = x.select(ndarray::Axis(0), &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let xv = x.select(ndarray::Axis(0), &valid);
        let yv: Vec<f64> = valid.iter().map(|&i| y[i]).collect();
        let solver = match Solver::new(xt.view(), &yt, base.loss, base.intercept, base.standardize) {
            Ok(s) => s,
            Err(_) => continue,
        };
        for (pi, (a, lambdas)) in paths.iter().enumerate() {
            let mut warm: Option<(Vec<f64>, f64)> = None;
            for (li, &lam) in lambdas.iter().enumerate() {
                let spec = GlmSpec {
                    lambda: lam,
                    mixing: *a,
                    ..base.clone()
                };
                let (fit, w) = solver.fit(&spec, warm.as_ref())?;
                warm = Some(w);
                let pred = fit.predict(xv.view());
                let mse = pred.iter().zip(&yv).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / yv.len() as f64;
                sums[pi][li] += mse * valid.len() as f64;
            }
        }
    }

    let mut table = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for (pi, (a, lambdas)) in paths.iter().enumerate() {
        for (li, &lam) in lambdas.iter().enumerate() {
            let loss = sums[pi][li] / n as f64;
            table.push((*a, lam, loss));
            let better = match best {
                None => true,
                Some((_, bl, bloss)) => loss < bloss || (loss == bloss && lam > bl),
            };
            if better {
                best = Some((*a, lam, loss));
            }
        }
    }
    let (a, lam, cv_loss) = best.expect("non-empty grid");
    let spec = GlmSpec {
        lambda: lam,
        mixing: a,
        ..base.clone()
    };
    let fit = full.fit(&spec, None)?.0;
    Ok(CvOutcome {
        spec,
        fit,
        cv_loss,
        table,
    })
}
