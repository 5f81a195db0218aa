//! Evaluation metrics and paired significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{invalid, Error, Result};

/// `1 - SS_res / SS_tot` with the mean of `y_true` as reference.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return invalid("r2 of an empty vector");
    }
    let m = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let tot: f64 = y_true.iter().map(|y| (y - m) * (y - m)).sum();
    if tot == 0.0 {
        return Err(Error::Undefined("r2 of a constant response".into()));
    }
    let res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(1.0 - res / tot)
}

/// Mann-Whitney AUC (ties count 1/2).
pub fn auc(y_true: &[f64], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let ranks = average_ranks(&idx.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    let mut pos = 0.0;
    let mut rank_sum = 0.0;
    for (r, &i) in ranks.iter().zip(&idx) {
        if y_true[i] == 1.0 {
            pos += 1.0;
            rank_sum += r;
        } else if y_true[i] != 0.0 {
            return invalid("auc needs 0/1 labels");
        }
    }
    let neg = y_true.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Undefined("auc needs both classes".into()));
    }
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// `2 AUC - 1`, in `[-1, 1]`.
pub fn auc_norm(y_true: &[f64], scores: &[f64]) -> Result<f64> {
    Ok(2.0 * auc(y_true, scores)? - 1.0)
}

/// 1-based ranks of sorted values with ties averaged.
fn average_ranks(sorted: &[f64]) -> Vec<f64> {
    let n = sorted.len();
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for rk in ranks.iter_mut().take(j + 1).skip(i) {
            *rk = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    pub n: usize,
    pub mean_diff: f64,
    pub t_stat: f64,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub t_p_one_sided: f64,
    /// Sum of positive signed ranks; `None` when every difference is zero.
    pub wilcoxon_stat: Option<f64>,
    /// One-sided p-value for `a > b`, normal approximation.
    pub wilcoxon_p: Option<f64>,
}

/// One-sided paired t-test and Wilcoxon signed-rank test of `a > b`.
pub fn paired_tests(a: &[f64], b: &[f64]) -> Result<PairedTests> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 5 {
        return invalid("paired tests need at least 5 pairs");
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let (t_stat, t_p) = if var <= 1e-300 {
        // all differences equal
        if mean == 0.0 {
            (0.0, 0.5)
        } else if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        }
    } else {
        let t = mean / (var / nf).sqrt();
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Undefined(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };

    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let (w_stat, w_p) = if nz.is_empty() {
        (None, None)
    } else {
        let mut idx: Vec<usize> = (0..nz.len()).collect();
        idx.sort_by(|&i, &j| nz[i].abs().total_cmp(&nz[j].abs()));
        let abs_sorted: Vec<f64> = idx.iter().map(|&i| nz[i].abs()).collect();
        let ranks = average_ranks(&abs_sorted);
        let w_plus: f64 = idx.iter().zip(&ranks).filter(|(&i, _)| nz[i] > 0.0).map(|(_, r)| r).sum();
        let m = nz.len() as f64;
        let mu = m * (m + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < abs_sorted.len() {
            let mut j = i;
            while j + 1 < abs_sorted.len() && abs_sorted[j + 1] == abs_sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let sigma = (m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - tie_term / 48.0).sqrt();
        let p = if sigma <= 0.0 {
            0.5
        } else {
            // continuity correction toward the null
            let diff = w_plus - mu;
            let cc = if diff > 0.0 {
                -0.5
            } else if diff < 0.0 {
                0.5
            } else {
                0.0
            };
            let z = (diff + cc) / sigma;
            1.0 - Normal::standard().cdf(z)
        };
        (Some(w_plus), Some(p))
    };
    Ok(PairedTests {
        n,
        mean_diff: mean,
        t_stat,
        t_p_one_sided: t_p,
        wilcoxon_stat: w_stat,
        wilcoxon_p: w_p,
    })
}

/// Mean and standard error (sample sd / sqrt(n)).
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
