//! Standardization, Welch t-tests, variance inflation factors, forward
//! stepwise selection by AIC and the log-link rate effect.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::linalg::{least_squares, PivotedCholesky};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("zero standard deviation")]
    ZeroVariance,
    #[error("both samples have zero variance")]
    Degenerate,
    #[error("design needs at least 2 columns and more rows than columns")]
    BadDesign,
    #[error("non-finite input")]
    NonFinite,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the n − 1 denominator.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl Standardized {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / (2.0 * self.sd)
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * 2.0 * self.sd + self.mean
    }
}

/// `(x − mean) / (2·sd)`.
pub fn standardize_2sd(values: &[f64]) -> Result<Standardized, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let m = mean(values);
    let sd = variance(values).sqrt();
    if !(sd > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    Ok(Standardized {
        values: values.iter().map(|x| (x - m) / (2.0 * sd)).collect(),
        mean: m,
        sd,
    })
}

pub fn significance_code(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "."
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub label_a: String,
    pub label_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    /// mean_a − mean_b.
    pub diff: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub t_stat: f64,
    pub df: f64,
    pub p_value: f64,
    pub significance: String,
}

/// Two-sided unequal-variance t-test of `a` against `b` with a t-based 95% CI.
pub fn welch_ttest(
    label_a: &str,
    a: &[f64],
    label_b: &str,
    b: &[f64],
) -> Result<TTestResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFew {
                need: 2,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a), variance(b));
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::Degenerate);
    }
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    let se = se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let diff = ma - mb;
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| StatsError::Degenerate)?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    let q = dist.inverse_cdf(0.975);
    Ok(TTestResult {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        sd_a: va.sqrt(),
        mean_b: mb,
        sd_b: vb.sqrt(),
        diff,
        ci_lo: diff - q * se,
        ci_hi: diff + q * se,
        t_stat: t,
        df,
        p_value: p,
        significance: significance_code(p).to_string(),
    })
}

/// Coefficient of determination of `y` on `others` plus an intercept.
fn r_squared(others: &[&[f64]], y: &[f64]) -> f64 {
    let n = y.len();
    let my = mean(y);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - my));
    let tss = yc.norm_squared();
    let x = DMatrix::from_fn(n, others.len(), |i, j| {
        let c = others[j];
        c[i] - mean(c)
    });
    let ch = match PivotedCholesky::new(&x.tr_mul(&x)) {
        Ok(c) => c,
        Err(_) => return f64::NAN,
    };
    let beta = ch.solve(&x.tr_mul(&yc));
    let rss = (&yc - &x * beta).norm_squared();
    1.0 - rss / tss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vif {
    pub value: f64,
    /// The column is an exact linear combination of the others.
    pub collinear: bool,
}

/// Tolerance on 1 − R² below which a column counts as exactly collinear.
pub const COLLINEAR_TOL: f64 = 1e-10;

/// `1 / (1 − R²_k)` regressing each column on the others with an intercept.
pub fn vif(columns: &[Vec<f64>]) -> Result<Vec<Vif>, StatsError> {
    let k = columns.len();
    let n = columns.first().map_or(0, Vec::len);
    if k < 2 || n <= k || columns.iter().any(|c| c.len() != n) {
        return Err(StatsError::BadDesign);
    }
    if columns.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok((0..k)
        .map(|j| {
            let others: Vec<&[f64]> = (0..k)
                .filter(|&i| i != j)
                .map(|i| columns[i].as_slice())
                .collect();
            let tol = 1.0 - r_squared(&others, &columns[j]);
            if !(tol > COLLINEAR_TOL) {
                Vif {
                    value: f64::INFINITY,
                    collinear: true,
                }
            } else {
                Vif {
                    value: 1.0 / tol,
                    collinear: false,
                }
            }
        })
        .collect())
}

/// Repeatedly drop the column with the largest VIF above `limit`; ties drop
/// the later name. Returns kept names in their original order.
pub fn vif_screen(
    names: &[String],
    columns: &[Vec<f64>],
    limit: f64,
) -> Result<Vec<String>, StatsError> {
    let mut keep: Vec<usize> = (0..names.len()).collect();
    while keep.len() >= 2 {
        let cols: Vec<Vec<f64>> = keep.iter().map(|&i| columns[i].clone()).collect();
        let v = vif(&cols)?;
        let worst = (0..keep.len())
            .filter(|&j| v[j].value > limit)
            .max_by(|&x, &y| {
                v[x].value
                    .total_cmp(&v[y].value)
                    .then_with(|| names[keep[x]].cmp(&names[keep[y]]))
            });
        match worst {
            Some(j) => {
                warn!("dropping `{}` with VIF {:.3}", names[keep[j]], v[j].value);
                keep.remove(j);
            }
            None => break,
        }
    }
    Ok(keep.into_iter().map(|i| names[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseResult {
    pub selected: Vec<String>,
    pub aic: f64,
    /// AIC of the intercept-only model followed by each accepted addition.
    pub path: Vec<(String, f64)>,
}

/// Greedy forward selection. `fit` returns the AIC of a model with the given
/// terms (empty = intercept only). Each round adds the candidate with the
/// lowest AIC, ties broken by name, while that strictly lowers AIC.
pub fn forward_stepwise_aic<F, E>(candidates: &[String], fit: F) -> Result<StepwiseResult, E>
where
    F: Fn(&[String]) -> Result<f64, E> + Sync,
    E: std::fmt::Display + Send,
{
    let mut pool: Vec<String> = candidates.to_vec();
    pool.sort();
    pool.dedup();
    let mut selected: Vec<String> = Vec::new();
    let mut aic = fit(&selected)?;
    let mut path = vec![("(intercept)".to_string(), aic)];
    loop {
        let scores: Vec<(usize, Option<f64>)> = pool
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let mut trial = selected.clone();
                trial.push(c.clone());
                match fit(&trial) {
                    Ok(a) if a.is_finite() => (i, Some(a)),
                    Ok(_) => {
                        warn!("candidate `{c}` skipped: non-finite AIC");
                        (i, None)
                    }
                    Err(e) => {
                        warn!("candidate `{c}` skipped: {e}");
                        (i, None)
                    }
                }
            })
            .collect();
        // Pool is sorted, so the first minimum is the smallest name.
        let best = scores.iter().filter_map(|&(i, a)| a.map(|a| (i, a))).fold(
            None,
            |acc: Option<(usize, f64)>, (i, a)| match acc {
                Some((_, b)) if b <= a => acc,
                _ => Some((i, a)),
            },
        );
        match best {
            Some((i, a)) if a < aic => {
                let c = pool.remove(i);
                path.push((c.clone(), a));
                selected.push(c);
                aic = a;
            }
            _ => break,
        }
    }
    Ok(StepwiseResult {
        selected,
        aic,
        path,
    })
}

/// Gaussian OLS AIC with intercept: −2 loglik + 2(#coefficients + 1).
pub fn ols_aic(columns: &[&[f64]], y: &[f64]) -> Result<f64, StatsError> {
    let n = y.len();
    let p = columns.len() + 1;
    if n <= p {
        return Err(StatsError::BadDesign);
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let yv = DVector::from_column_slice(y);
    let beta = least_squares(&x, &yv).map_err(|_| StatsError::BadDesign)?;
    let rss = (&yv - &x * beta).norm_squared();
    let nf = n as f64;
    let loglik = -0.5 * nf * ((2.0 * std::f64::consts::PI * rss / nf).ln() + 1.0);
    Ok(-2.0 * loglik + 2.0 * (p as f64 + 1.0))
}

/// Percentage change in the mean implied by a log-link coefficient,
/// positive for a reduction: `(1 − e^β)·100`.
pub fn rate_effect(beta: f64) -> f64 {
    (1.0 - beta.exp()) * 100.0
}
