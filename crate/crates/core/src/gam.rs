//! Generalized additive models fitted by penalized IRLS.
//!
//! Terms are an intercept, parametric terms (categorical dummies against a
//! reference level, or 2-SD standardized numerics), centered cubic regression
//! spline smooths and an interaction-only tensor product of two such bases.
//! Smoothing parameters are chosen by GCV over a log grid, one coordinate at a
//! time. The negative binomial dispersion is estimated by a Pearson moment
//! equation, alternating with the smoothing parameter search.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::PivotedCholesky;
use crate::stats::{significance_code, standardize_2sd, Standardized};

pub const THETA_MIN: f64 = 1e-3;
pub const THETA_MAX: f64 = 1e6;
const THETA_TOL: f64 = 1e-6;
const MAX_HALVINGS: usize = 30;
const MAX_GCV_PASSES: usize = 10;
const MAX_OUTER: usize = 20;
const MAX_THETA_STEPS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GamError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("column `{column}` has {got} rows, expected {expected}")]
    Length {
        column: String,
        got: usize,
        expected: usize,
    },
    #[error("column `{0}` contains missing or non-finite values")]
    NonFinite(String),
    #[error("`{variable}` has {distinct} distinct values; basis dimension {k} needs at least {k}, use a smaller k")]
    TooFewDistinct {
        variable: String,
        distinct: usize,
        k: usize,
    },
    #[error("term `{0}` is constant and cannot be standardized")]
    Constant(String),
    #[error("reference level `{reference}` of `{variable}` does not occur in the data")]
    MissingReference { variable: String, reference: String },
    #[error("invalid response: {0}")]
    Response(String),
    #[error("model matrix is rank deficient in term(s) {0:?}")]
    RankDeficient(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianIdentity,
    NegBinLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    Estimate,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Encoding {
    Categorical { reference: String },
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub variable: String,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub variable: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorTerm {
    pub x: String,
    pub z: String,
    pub k1: usize,
    pub k2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSpec {
    pub response: String,
    pub family: Family,
    pub theta: ThetaMode,
    pub linear: Vec<LinearTerm>,
    pub smooths: Vec<SmoothTerm>,
    pub tensor: Option<TensorTerm>,
    pub lambda_grid: Vec<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

/// 25 log-spaced values from 1e-4 to 1e8.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

impl GamSpec {
    pub fn new(response: &str, family: Family) -> Self {
        GamSpec {
            response: response.to_string(),
            family,
            theta: ThetaMode::Estimate,
            linear: Vec::new(),
            smooths: Vec::new(),
            tensor: None,
            lambda_grid: default_lambda_grid(),
            max_iter: 200,
            tol: 1e-8,
        }
    }

    pub fn numeric(mut self, variable: &str) -> Self {
        self.linear.push(LinearTerm {
            variable: variable.to_string(),
            encoding: Encoding::Numeric,
        });
        self
    }

    pub fn categorical(mut self, variable: &str, reference: &str) -> Self {
        self.linear.push(LinearTerm {
            variable: variable.to_string(),
            encoding: Encoding::Categorical {
                reference: reference.to_string(),
            },
        });
        self
    }

    pub fn smooth(mut self, variable: &str, k: usize) -> Self {
        self.smooths.push(SmoothTerm {
            variable: variable.to_string(),
            k,
        });
        self
    }

    pub fn tensor(mut self, x: &str, z: &str, k1: usize, k2: usize) -> Self {
        self.tensor = Some(TensorTerm {
            x: x.to_string(),
            z: z.to_string(),
            k1,
            k2,
        });
        self
    }

    pub fn validate(&self) -> Result<(), GamError> {
        for s in &self.smooths {
            if s.k < 3 {
                return Err(GamError::Spec(format!(
                    "basis dimension of s({}) must be >= 3",
                    s.variable
                )));
            }
        }
        if let Some(t) = &self.tensor {
            if t.k1 < 3 || t.k2 < 3 {
                return Err(GamError::Spec(format!(
                    "marginal dimensions of ti({}, {}) must be >= 3",
                    t.x, t.z
                )));
            }
        }
        if self.lambda_grid.is_empty()
            || self
                .lambda_grid
                .iter()
                .any(|l| !(*l > 0.0) || !l.is_finite())
        {
            return Err(GamError::Spec(
                "lambda grid must be nonempty and positive".into(),
            ));
        }
        if let ThetaMode::Fixed(t) = self.theta {
            if !(t > 0.0) || !t.is_finite() {
                return Err(GamError::Spec(format!("fixed theta {t} must be positive")));
            }
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(GamError::Spec(
                "iteration cap and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of smoothing parameters.
    pub fn n_lambda(&self) -> usize {
        self.smooths.len() + if self.tensor.is_some() { 2 } else { 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GamData {
    pub response: Vec<f64>,
    pub numeric: BTreeMap<String, Vec<f64>>,
    pub categorical: BTreeMap<String, Vec<String>>,
}

impl GamData {
    pub fn new(response: Vec<f64>) -> Self {
        GamData {
            response,
            ..Default::default()
        }
    }

    pub fn with_numeric(mut self, name: &str, values: Vec<f64>) -> Self {
        self.numeric.insert(name.to_string(), values);
        self
    }

    pub fn with_categorical(mut self, name: &str, values: Vec<String>) -> Self {
        self.categorical.insert(name.to_string(), values);
        self
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    fn numeric_col(&self, name: &str) -> Result<&[f64], GamError> {
        let c = self
            .numeric
            .get(name)
            .ok_or_else(|| GamError::MissingColumn(name.to_string()))?;
        if c.len() != self.n() {
            return Err(GamError::Length {
                column: name.to_string(),
                got: c.len(),
                expected: self.n(),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GamError::NonFinite(name.to_string()));
        }
        Ok(c)
    }

    fn categorical_col(&self, name: &str) -> Result<&[String], GamError> {
        let c = self
            .categorical
            .get(name)
            .ok_or_else(|| GamError::MissingColumn(name.to_string()))?;
        if c.len() != self.n() {
            return Err(GamError::Length {
                column: name.to_string(),
                got: c.len(),
                expected: self.n(),
            });
        }
        Ok(c)
    }
}

/// Cubic regression spline basis parametrized by function values at knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CrBasis {
    knots: Vec<f64>,
    /// Second derivatives at the knots as a linear map of knot values.
    f: DMatrix<f64>,
    s_raw: DMatrix<f64>,
    /// Null space of the sum-to-zero constraint, k × (k − 1).
    z: DMatrix<f64>,
}

fn place_knots(x: &[f64], k: usize, variable: &str) -> Result<Vec<f64>, GamError> {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    if u.len() < k {
        return Err(GamError::TooFewDistinct {
            variable: variable.to_string(),
            distinct: u.len(),
            k,
        });
    }
    let m = u.len();
    Ok((0..k)
        .map(|j| {
            let pos = j as f64 * (m - 1) as f64 / (k - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let frac = pos - lo as f64;
            u[lo] + frac * (u[hi] - u[lo])
        })
        .collect())
}

/// Householder basis for the null space of `cᵀ`.
fn constraint_null_space(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    if norm == 0.0 {
        return DMatrix::identity(k, k).columns(1, k - 1).into_owned();
    }
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let h = DMatrix::identity(k, k) - (&v * v.transpose()) * (2.0 / v.norm_squared());
    h.columns(1, k - 1).into_owned()
}

impl CrBasis {
    pub fn new(x: &[f64], k: usize, variable: &str) -> Result<CrBasis, GamError> {
        if k < 3 {
            return Err(GamError::Spec(format!(
                "basis dimension of `{variable}` must be >= 3"
            )));
        }
        let knots = place_knots(x, k, variable)?;
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let binv_d = b
            .clone()
            .lu()
            .solve(&d)
            .expect("tridiagonal B is diagonally dominant");
        let s_raw = d.transpose() * &binv_d;
        let s_raw = (&s_raw + s_raw.transpose()) * 0.5;
        let mut f = DMatrix::zeros(k, k);
        f.rows_mut(1, k - 2).copy_from(&binv_d);
        let mut basis = CrBasis {
            knots,
            f,
            s_raw,
            z: DMatrix::identity(k, k),
        };
        let raw = basis.raw_design(x);
        let sums = DVector::from_fn(k, |j, _| raw.column(j).sum());
        basis.z = constraint_null_space(&sums);
        Ok(basis)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn k(&self) -> usize {
        self.knots.len()
    }

    /// Unconstrained basis row at `x`; linear beyond the outer knots.
    pub fn raw_row(&self, x: f64) -> Vec<f64> {
        let kn = &self.knots;
        let k = kn.len();
        let mut row = vec![0.0; k];
        let add_f = |row: &mut Vec<f64>, j: usize, w: f64| {
            for (r, v) in row.iter_mut().zip(self.f.row(j).iter()) {
                *r += w * v;
            }
        };
        if x < kn[0] {
            let h = kn[1] - kn[0];
            let dx = x - kn[0];
            row[0] += 1.0 - dx / h;
            row[1] += dx / h;
            add_f(&mut row, 0, -dx * h / 3.0);
            add_f(&mut row, 1, -dx * h / 6.0);
        } else if x > kn[k - 1] {
            let h = kn[k - 1] - kn[k - 2];
            let dx = x - kn[k - 1];
            row[k - 1] += 1.0 + dx / h;
            row[k - 2] -= dx / h;
            add_f(&mut row, k - 2, dx * h / 6.0);
            add_f(&mut row, k - 1, dx * h / 3.0);
        } else {
            let j = kn.partition_point(|&t| t <= x).clamp(1, k - 1) - 1;
            let h = kn[j + 1] - kn[j];
            let a = (kn[j + 1] - x) / h;
            let c = (x - kn[j]) / h;
            row[j] += a;
            row[j + 1] += c;
            add_f(&mut row, j, (a * a * a - a) * h * h / 6.0);
            add_f(&mut row, j + 1, (c * c * c - c) * h * h / 6.0);
        }
        row
    }

    pub fn raw_design(&self, xs: &[f64]) -> DMatrix<f64> {
        let k = self.k();
        let mut m = DMatrix::zeros(xs.len(), k);
        for (i, &x) in xs.iter().enumerate() {
            for (j, v) in self.raw_row(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Centered basis, n × (k − 1).
    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        self.raw_design(xs) * &self.z
    }

    /// Integrated squared second derivative in knot-value coordinates.
    pub fn raw_penalty(&self) -> &DMatrix<f64> {
        &self.s_raw
    }

    /// Penalty in centered coordinates, (k − 1) × (k − 1).
    pub fn penalty(&self) -> DMatrix<f64> {
        let s = self.z.transpose() * &self.s_raw * &self.z;
        (&s + s.transpose()) * 0.5
    }
}

/// Centered basis and its penalty.
pub fn cr_basis(x: &[f64], k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), GamError> {
    let b = CrBasis::new(x, k, "x")?;
    Ok((b.design(x), b.penalty()))
}

/// Interaction-only tensor product of two centered marginal bases.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasis {
    pub bx: CrBasis,
    pub bz: CrBasis,
}

impl TensorBasis {
    pub fn new(
        x: &[f64],
        z: &[f64],
        k1: usize,
        k2: usize,
        names: (&str, &str),
    ) -> Result<Self, GamError> {
        Ok(TensorBasis {
            bx: CrBasis::new(x, k1, names.0)?,
            bz: CrBasis::new(z, k2, names.1)?,
        })
    }

    pub fn design(&self, x: &[f64], z: &[f64]) -> DMatrix<f64> {
        let a = self.bx.design(x);
        let b = self.bz.design(z);
        let (p, q) = (a.ncols(), b.ncols());
        DMatrix::from_fn(x.len(), p * q, |i, c| a[(i, c / q)] * b[(i, c % q)])
    }

    pub fn penalties(&self) -> [DMatrix<f64>; 2] {
        let s1 = self.bx.penalty();
        let s2 = self.bz.penalty();
        let i1 = DMatrix::<f64>::identity(s1.nrows(), s1.nrows());
        let i2 = DMatrix::<f64>::identity(s2.nrows(), s2.nrows());
        [s1.kronecker(&i2), i1.kronecker(&s2)]
    }
}

pub fn tensor_basis(
    x: &[f64],
    z: &[f64],
    k1: usize,
    k2: usize,
) -> Result<(DMatrix<f64>, [DMatrix<f64>; 2]), GamError> {
    let t = TensorBasis::new(x, z, k1, k2, ("x", "z"))?;
    Ok((t.design(x, z), t.penalties()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Linear,
    Smooth,
    Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermBlock {
    pub name: String,
    pub kind: TermKind,
    pub cols: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Penalty {
    cols: Range<usize>,
    s: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Design {
    x: DMatrix<f64>,
    terms: Vec<TermBlock>,
    penalties: Vec<Penalty>,
    coef_names: Vec<String>,
    standardizers: BTreeMap<String, Standardized>,
    smooth_bases: Vec<(String, CrBasis)>,
    tensor: Option<(String, String, TensorBasis)>,
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Rescale a penalty to the magnitude of its block's cross product.
fn scale_penalty(s: DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let ma_x = inf_norm(x).powi(2);
    let ma_s = one_norm(&s);
    if ma_s > 0.0 {
        s * (ma_x / ma_s)
    } else {
        s
    }
}

fn build_design(spec: &GamSpec, data: &GamData) -> Result<Design, GamError> {
    let n = data.n();
    let mut blocks: Vec<(
        String,
        TermKind,
        DMatrix<f64>,
        Vec<String>,
        Vec<DMatrix<f64>>,
    )> = Vec::new();
    blocks.push((
        "(Intercept)".into(),
        TermKind::Intercept,
        DMatrix::from_element(n, 1, 1.0),
        vec!["(Intercept)".into()],
        vec![],
    ));
    let mut standardizers = BTreeMap::new();
    for t in &spec.linear {
        match &t.encoding {
            Encoding::Numeric => {
                let col = data.numeric_col(&t.variable)?;
                let st =
                    standardize_2sd(col).map_err(|_| GamError::Constant(t.variable.clone()))?;
                let m = DMatrix::from_column_slice(n, 1, &st.values);
                standardizers.insert(t.variable.clone(), st);
                blocks.push((
                    t.variable.clone(),
                    TermKind::Linear,
                    m,
                    vec![t.variable.clone()],
                    vec![],
                ));
            }
            Encoding::Categorical { reference } => {
                let col = data.categorical_col(&t.variable)?;
                let levels: BTreeSet<&String> = col.iter().collect();
                if !levels.contains(reference) {
                    return Err(GamError::MissingReference {
                        variable: t.variable.clone(),
                        reference: reference.clone(),
                    });
                }
                let others: Vec<&String> = levels.into_iter().filter(|l| *l != reference).collect();
                if others.is_empty() {
                    return Err(GamError::Constant(t.variable.clone()));
                }
                let m = DMatrix::from_fn(n, others.len(), |i, j| {
                    f64::from(u8::from(&col[i] == others[j]))
                });
                let names = others
                    .iter()
                    .map(|l| format!("{}[{}]", t.variable, l))
                    .collect();
                blocks.push((t.variable.clone(), TermKind::Linear, m, names, vec![]));
            }
        }
    }
    let mut smooth_bases = Vec::new();
    for s in &spec.smooths {
        let col = data.numeric_col(&s.variable)?;
        let b = CrBasis::new(col, s.k, &s.variable)?;
        let m = b.design(col);
        let pen = scale_penalty(b.penalty(), &m);
        let name = format!("s({})", s.variable);
        let names = (1..=m.ncols()).map(|j| format!("{name}.{j}")).collect();
        blocks.push((name, TermKind::Smooth, m, names, vec![pen]));
        smooth_bases.push((s.variable.clone(), b));
    }
    let mut tensor = None;
    if let Some(t) = &spec.tensor {
        let (cx, cz) = (data.numeric_col(&t.x)?, data.numeric_col(&t.z)?);
        let tb = TensorBasis::new(cx, cz, t.k1, t.k2, (&t.x, &t.z))?;
        let m = tb.design(cx, cz);
        let pens = tb.penalties().map(|s| scale_penalty(s, &m));
        let name = format!("ti({},{})", t.x, t.z);
        let names = (1..=m.ncols()).map(|j| format!("{name}.{j}")).collect();
        blocks.push((name, TermKind::Tensor, m, names, pens.to_vec()));
        tensor = Some((t.x.clone(), t.z.clone(), tb));
    }

    let p: usize = blocks.iter().map(|b| b.2.ncols()).sum();
    let mut x = DMatrix::zeros(n, p);
    let mut terms = Vec::new();
    let mut penalties = Vec::new();
    let mut coef_names = Vec::new();
    let mut at = 0;
    for (name, kind, m, names, pens) in blocks {
        let cols = at..at + m.ncols();
        x.columns_mut(at, m.ncols()).copy_from(&m);
        for s in pens {
            penalties.push(Penalty {
                cols: cols.clone(),
                s,
            });
        }
        terms.push(TermBlock {
            name,
            kind,
            cols: cols.clone(),
        });
        coef_names.extend(names);
        at = cols.end;
    }
    Ok(Design {
        x,
        terms,
        penalties,
        coef_names,
        standardizers,
        smooth_bases,
        tensor,
    })
}

fn total_penalty(design: &Design, lambdas: &[f64]) -> DMatrix<f64> {
    let p = design.x.ncols();
    let mut s = DMatrix::zeros(p, p);
    for (pen, &l) in design.penalties.iter().zip(lambdas) {
        let r = pen.cols.clone();
        let mut blk = s.view_mut((r.start, r.start), (r.len(), r.len()));
        blk += &pen.s * l;
    }
    s
}

/// Negative binomial unit deviance summed over observations.
pub fn nb_deviance(y: &[f64], mu: &[f64], theta: f64) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let a = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            a - (y + theta) * ((y + theta) / (m + theta)).ln()
        })
        .sum::<f64>()
}

/// Negative binomial log-likelihood at linear predictor `x β`.
pub fn nb_loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, theta: f64) -> f64 {
    let eta = x * beta;
    y.iter()
        .zip(eta.iter())
        .map(|(&y, &e)| {
            let mu = e.exp();
            ln_gamma(y + theta) - ln_gamma(theta) - ln_gamma(y + 1.0)
                + theta * (theta / (theta + mu)).ln()
                + y * (mu / (theta + mu)).ln()
        })
        .sum()
}

/// Gradient of [`nb_loglik`] with respect to `β`.
pub fn nb_score(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, theta: f64) -> DVector<f64> {
    let eta = x * beta;
    let r = DVector::from_fn(y.len(), |i, _| {
        let mu = eta[i].exp();
        (y[i] - mu) * theta / (theta + mu)
    });
    x.tr_mul(&r)
}

fn gaussian_loglik(dev: f64, n: f64) -> f64 {
    -0.5 * n * ((2.0 * std::f64::consts::PI * dev / n).ln() + 1.0)
}

struct Problem<'a> {
    design: &'a Design,
    y: &'a [f64],
    family: Family,
    max_iter: usize,
    tol: f64,
    gauss_xtx: Option<DMatrix<f64>>,
    gauss_xty: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct Irls {
    beta: DVector<f64>,
    mu: Vec<f64>,
    deviance: f64,
    a_inv: DMatrix<f64>,
    edf: DVector<f64>,
    edf_total: f64,
    gcv: f64,
    iterations: usize,
    converged: bool,
    last_change: f64,
    pdev_trace: Vec<f64>,
}

const ETA_MAX: f64 = 700.0;

impl<'a> Problem<'a> {
    fn new(design: &'a Design, y: &'a [f64], spec: &GamSpec) -> Self {
        let (gauss_xtx, gauss_xty) = match spec.family {
            Family::GaussianIdentity => {
                let yv = DVector::from_column_slice(y);
                (Some(design.x.tr_mul(&design.x)), Some(design.x.tr_mul(&yv)))
            }
            Family::NegBinLog => (None, None),
        };
        Problem {
            design,
            y,
            family: spec.family,
            max_iter: spec.max_iter,
            tol: spec.tol,
            gauss_xtx,
            gauss_xty,
        }
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn deviance(&self, mu: &[f64], theta: f64) -> f64 {
        match self.family {
            Family::GaussianIdentity => self.y.iter().zip(mu).map(|(y, m)| (y - m).powi(2)).sum(),
            Family::NegBinLog => nb_deviance(self.y, mu, theta),
        }
    }

    fn mu_of(&self, beta: &DVector<f64>) -> Vec<f64> {
        let eta = &self.design.x * beta;
        match self.family {
            Family::GaussianIdentity => eta.iter().copied().collect(),
            Family::NegBinLog => eta.iter().map(|e| e.min(ETA_MAX).exp()).collect(),
        }
    }

    fn factor(&self, a: &DMatrix<f64>) -> Result<PivotedCholesky, GamError> {
        let ch = PivotedCholesky::new(a)
            .map_err(|_| GamError::RankDeficient(vec!["(non-finite weights)".into()]))?;
        if ch.rank() < ch.dim() {
            let bad: BTreeSet<String> = ch
                .deficient()
                .into_iter()
                .filter_map(|c| {
                    self.design
                        .terms
                        .iter()
                        .find(|t| t.cols.contains(&c))
                        .map(|t| t.name.clone())
                })
                .collect();
            return Err(GamError::RankDeficient(bad.into_iter().collect()));
        }
        Ok(ch)
    }

    fn weighted_cross(&self, w: &[f64]) -> DMatrix<f64> {
        let x = &self.design.x;
        let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i].sqrt());
        xw.tr_mul(&xw)
    }

    fn finish(
        &self,
        beta: DVector<f64>,
        h: DMatrix<f64>,
        s: &DMatrix<f64>,
        theta: f64,
        iterations: usize,
        converged: bool,
        last_change: f64,
        pdev_trace: Vec<f64>,
    ) -> Result<Irls, GamError> {
        let a = &h + s;
        let a_inv = self.factor(&a)?.inverse();
        let p = h.nrows();
        let edf = DVector::from_fn(p, |j, _| {
            (0..p).map(|k| a_inv[(j, k)] * h[(k, j)]).sum::<f64>()
        });
        let edf_total = edf.sum();
        let mu = self.mu_of(&beta);
        let deviance = self.deviance(&mu, theta);
        let n = self.n() as f64;
        let gcv = if n - edf_total > 0.0 {
            n * deviance / (n - edf_total).powi(2)
        } else {
            f64::INFINITY
        };
        Ok(Irls {
            beta,
            mu,
            deviance,
            a_inv,
            edf,
            edf_total,
            gcv,
            iterations,
            converged,
            last_change,
            pdev_trace,
        })
    }

    /// Penalized IRLS at fixed smoothing parameters and dispersion.
    fn fit(
        &self,
        lambdas: &[f64],
        theta: f64,
        start: Option<&DVector<f64>>,
    ) -> Result<Irls, GamError> {
        let s = total_penalty(self.design, lambdas);
        if let (Some(h), Some(xty)) = (&self.gauss_xtx, &self.gauss_xty) {
            let a = h + &s;
            let beta = self.factor(&a)?.solve(xty);
            let mu = self.mu_of(&beta);
            let pd = self.deviance(&mu, theta) + beta.dot(&(&s * &beta));
            return self.finish(beta, h.clone(), &s, theta, 1, true, 0.0, vec![pd]);
        }

        let x = &self.design.x;
        let y = self.y;
        let n = self.n();
        let mut beta: Option<DVector<f64>> = start.cloned();
        let (mut eta, mut mu): (Vec<f64>, Vec<f64>) = match &beta {
            Some(b) => {
                let mu = self.mu_of(b);
                (mu.iter().map(|m| m.ln()).collect(), mu)
            }
            None => {
                let mu: Vec<f64> = y
                    .iter()
                    .map(|&v| v + if v == 0.0 { 1.0 / 6.0 } else { 0.0 })
                    .collect();
                (mu.iter().map(|m| m.ln()).collect(), mu)
            }
        };
        let pdev = |b: &DVector<f64>, mu: &[f64]| self.deviance(mu, theta) + b.dot(&(&s * b));
        let mut pd_old = match &beta {
            Some(b) => pdev(b, &mu),
            None => f64::INFINITY,
        };
        let mut trace = Vec::new();
        let mut converged = false;
        let mut change = f64::INFINITY;
        let mut it = 0;
        let mut w = vec![0.0; n];
        while it < self.max_iter {
            it += 1;
            let mut zw = DVector::zeros(n);
            for i in 0..n {
                let m = mu[i];
                w[i] = m / (1.0 + m / theta);
                zw[i] = w[i] * (eta[i] + (y[i] - m) / m);
            }
            let h = self.weighted_cross(&w);
            let a = &h + &s;
            let mut b_new = self.factor(&a)?.solve(&x.tr_mul(&zw));
            let mut mu_new = self.mu_of(&b_new);
            let mut pd_new = pdev(&b_new, &mu_new);
            if let Some(b_old) = &beta {
                let mut halvings = 0;
                while (!pd_new.is_finite() || pd_new > pd_old + 1e-10 * pd_old.abs())
                    && halvings < MAX_HALVINGS
                {
                    b_new = (&b_new + b_old) * 0.5;
                    mu_new = self.mu_of(&b_new);
                    pd_new = pdev(&b_new, &mu_new);
                    halvings += 1;
                }
            }
            change = (pd_new - pd_old).abs() / (pd_new.abs() + 0.1);
            trace.push(pd_new);
            eta = mu_new.iter().map(|m| m.ln()).collect();
            mu = mu_new;
            beta = Some(b_new);
            pd_old = pd_new;
            if change < self.tol {
                converged = true;
                break;
            }
        }
        let beta = beta.expect("at least one iteration");
        for i in 0..n {
            w[i] = mu[i] / (1.0 + mu[i] / theta);
        }
        let h = self.weighted_cross(&w);
        self.finish(beta, h, &s, theta, it, converged, change, trace)
    }

    /// Pearson moment estimate of θ given a fit.
    fn moment_theta(&self, fit: &Irls) -> f64 {
        let target = self.n() as f64 - fit.edf_total;
        let g = |lt: f64| {
            let t = lt.exp();
            self.y
                .iter()
                .zip(&fit.mu)
                .map(|(y, m)| (y - m).powi(2) / (m + m * m / t))
                .sum::<f64>()
                - target
        };
        let (mut lo, mut hi) = (THETA_MIN.ln(), THETA_MAX.ln());
        if g(hi) <= 0.0 {
            return THETA_MAX;
        }
        if g(lo) >= 0.0 {
            return THETA_MIN;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSummary {
    pub name: String,
    pub kind: TermKind,
    pub edf: f64,
    pub ref_df: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
    /// Penalized deviance after each IRLS iteration of the final fit.
    pub pdev_trace: Vec<f64>,
    pub outer_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamFit {
    pub family: Family,
    pub response: String,
    pub n: usize,
    pub coef_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Bayesian posterior covariance of the coefficients (scaled).
    pub covariance: Vec<Vec<f64>>,
    pub parametric: Vec<Coefficient>,
    pub smooths: Vec<SmoothSummary>,
    pub lambdas: Vec<f64>,
    pub theta: Option<f64>,
    pub theta_estimated: bool,
    pub scale: f64,
    pub edf: Vec<f64>,
    pub edf_total: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub deviance: f64,
    pub null_deviance: f64,
    pub deviance_explained: f64,
    pub r2_adjusted: f64,
    pub aic: f64,
    pub loglik: f64,
    pub gcv: f64,
    pub convergence: Convergence,
    pub lambda_grid: Vec<f64>,
    #[serde(skip)]
    terms: Vec<TermBlock>,
    #[serde(skip)]
    smooth_bases: Vec<(String, CrBasis)>,
    #[serde(skip)]
    tensor: Option<(String, String, TensorBasis)>,
    #[serde(skip)]
    standardizers: BTreeMap<String, Standardized>,
}

impl GamFit {
    pub fn terms(&self) -> &[TermBlock] {
        &self.terms
    }

    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.parametric.iter().find(|c| c.name == name)
    }

    pub fn smooth(&self, name: &str) -> Option<&SmoothSummary> {
        self.smooths.iter().find(|s| s.name == name)
    }

    pub fn standardizer(&self, variable: &str) -> Option<&Standardized> {
        self.standardizers.get(variable)
    }

    fn block_cov(&self, cols: &Range<usize>) -> DMatrix<f64> {
        DMatrix::from_fn(cols.len(), cols.len(), |i, j| {
            self.covariance[cols.start + i][cols.start + j]
        })
    }

    /// Partial effect of term `name` on the linear predictor at each data row.
    pub fn term_contribution(&self, name: &str, data: &GamData) -> Result<Vec<f64>, GamError> {
        let t = self
            .terms
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| GamError::Spec(format!("no term `{name}`")))?;
        let m = self.term_matrix(t, data)?;
        let b = DVector::from_column_slice(&self.beta[t.cols.clone()]);
        Ok((m * b).iter().copied().collect())
    }

    fn term_matrix(&self, t: &TermBlock, data: &GamData) -> Result<DMatrix<f64>, GamError> {
        match t.kind {
            TermKind::Smooth => {
                let (var, b) = self
                    .smooth_bases
                    .iter()
                    .find(|(v, _)| format!("s({v})") == t.name)
                    .expect("smooth term has a basis");
                Ok(b.design(data.numeric_col(var)?))
            }
            TermKind::Tensor => {
                let (x, z, tb) = self.tensor.as_ref().expect("tensor term has a basis");
                Ok(tb.design(data.numeric_col(x)?, data.numeric_col(z)?))
            }
            _ => Err(GamError::Spec(format!("`{}` is not a smooth term", t.name))),
        }
    }

    /// Partial-effect curves with pointwise 95% bands: 100 points per smooth
    /// over its knot range and a 10 × 10 grid for the tensor term.
    pub fn smooth_curves(&self) -> Vec<SmoothCurveRow> {
        let q = match self.family {
            Family::GaussianIdentity => {
                StudentsT::new(0.0, 1.0, (self.n as f64 - self.edf_total).max(1.0))
                    .map(|d| d.inverse_cdf(0.975))
                    .unwrap_or(1.96)
            }
            Family::NegBinLog => Normal::standard().inverse_cdf(0.975),
        };
        let mut rows = Vec::new();
        let mut emit =
            |term: &str, m: DMatrix<f64>, cols: &Range<usize>, pts: Vec<(f64, Option<f64>)>| {
                let b = DVector::from_column_slice(&self.beta[cols.clone()]);
                let v = self.block_cov(cols);
                let fit = &m * &b;
                let mv = &m * v;
                for (i, (x, z)) in pts.into_iter().enumerate() {
                    let se = mv.row(i).dot(&m.row(i)).max(0.0).sqrt();
                    rows.push(SmoothCurveRow {
                        term: term.to_string(),
                        x,
                        z,
                        fit: fit[i],
                        se,
                        lo: fit[i] - q * se,
                        hi: fit[i] + q * se,
                    });
                }
            };
        for t in &self.terms {
            match t.kind {
                TermKind::Smooth => {
                    let (_, b) = self
                        .smooth_bases
                        .iter()
                        .find(|(v, _)| format!("s({v})") == t.name)
                        .expect("smooth term has a basis");
                    let (lo, hi) = (b.knots()[0], b.knots()[b.k() - 1]);
                    let xs: Vec<f64> = (0..100).map(|i| lo + (hi - lo) * i as f64 / 99.0).collect();
                    emit(
                        &t.name,
                        b.design(&xs),
                        &t.cols,
                        xs.iter().map(|&x| (x, None)).collect(),
                    );
                }
                TermKind::Tensor => {
                    let (_, _, tb) = self.tensor.as_ref().expect("tensor term has a basis");
                    let range = |b: &CrBasis| (b.knots()[0], b.knots()[b.k() - 1]);
                    let ((x0, x1), (z0, z1)) = (range(&tb.bx), range(&tb.bz));
                    let mut xs = Vec::new();
                    let mut zs = Vec::new();
                    for i in 0..10 {
                        for j in 0..10 {
                            xs.push(x0 + (x1 - x0) * i as f64 / 9.0);
                            zs.push(z0 + (z1 - z0) * j as f64 / 9.0);
                        }
                    }
                    let pts = xs.iter().zip(&zs).map(|(&x, &z)| (x, Some(z))).collect();
                    emit(&t.name, tb.design(&xs, &zs), &t.cols, pts);
                }
                _ => {}
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothCurveRow {
    pub term: String,
    pub x: f64,
    pub z: Option<f64>,
    pub fit: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

fn validate_response(spec: &GamSpec, y: &[f64]) -> Result<(), GamError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GamError::NonFinite(spec.response.clone()));
    }
    if spec.family == Family::NegBinLog && y.iter().any(|&v| v < 0.0) {
        return Err(GamError::Response(
            "negative binomial response must be non-negative".into(),
        ));
    }
    let p_min = 2;
    if y.len() < p_min {
        return Err(GamError::Response("too few observations".into()));
    }
    Ok(())
}

/// Fit with GCV-selected smoothing parameters and, for the negative binomial
/// family, estimated or fixed θ.
pub fn fit_gam(spec: &GamSpec, data: &GamData) -> Result<GamFit, GamError> {
    spec.validate()?;
    validate_response(spec, &data.response)?;
    let design = build_design(spec, data)?;
    let prob = Problem::new(&design, &data.response, spec);
    let grid = &spec.lambda_grid;
    let n_l = design.penalties.len();
    // Start every coordinate at the grid point closest to 1.
    let start_idx = (0..grid.len())
        .min_by(|&a, &b| grid[a].ln().abs().total_cmp(&grid[b].ln().abs()))
        .unwrap_or(0);
    let mut idx = vec![start_idx; n_l];
    let (mut theta, estimate) = match (spec.family, spec.theta) {
        (Family::GaussianIdentity, _) => (1.0, false),
        (Family::NegBinLog, ThetaMode::Fixed(t)) => (t, false),
        (Family::NegBinLog, ThetaMode::Estimate) => (1.0, true),
    };
    let lambdas_of = |idx: &[usize]| idx.iter().map(|&i| grid[i]).collect::<Vec<f64>>();
    let mut best = prob.fit(&lambdas_of(&idx), theta, None)?;
    let mut outer = 0;
    loop {
        outer += 1;
        let before = idx.clone();
        if n_l > 0 {
            best = gcv_search(&prob, grid, &mut idx, theta, best)?;
        }
        let mut theta_settled = true;
        if estimate {
            for _ in 0..MAX_THETA_STEPS {
                let t_new = prob.moment_theta(&best);
                let rel = (t_new - theta).abs() / theta;
                theta = t_new;
                best = prob.fit(&lambdas_of(&idx), theta, Some(&best.beta))?;
                if rel < THETA_TOL {
                    break;
                }
                theta_settled = false;
            }
        }
        if (idx == before && theta_settled) || outer >= MAX_OUTER || (n_l == 0 && !estimate) {
            break;
        }
        if n_l == 0 && theta_settled {
            break;
        }
    }
    let lambdas = lambdas_of(&idx);
    let start = best.beta.clone();
    let fit = prob.fit(&lambdas, theta, Some(&start))?;
    Ok(summarize(
        spec, &design, &prob, fit, lambdas, theta, estimate, outer,
    ))
}

/// Fit at fixed smoothing parameters (any non-negative values) and fixed θ.
pub fn fit_gam_fixed(
    spec: &GamSpec,
    data: &GamData,
    lambdas: &[f64],
    theta: Option<f64>,
) -> Result<GamFit, GamError> {
    spec.validate()?;
    validate_response(spec, &data.response)?;
    let design = build_design(spec, data)?;
    if lambdas.len() != design.penalties.len() || lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(GamError::Spec(format!(
            "expected {} non-negative smoothing parameters",
            design.penalties.len()
        )));
    }
    let prob = Problem::new(&design, &data.response, spec);
    let theta = match (spec.family, theta, spec.theta) {
        (Family::GaussianIdentity, _, _) => 1.0,
        (_, Some(t), _) => t,
        (_, None, ThetaMode::Fixed(t)) => t,
        (_, None, ThetaMode::Estimate) => {
            return Err(GamError::Spec("fixed fit needs a theta".into()))
        }
    };
    let fit = prob.fit(lambdas, theta, None)?;
    Ok(summarize(
        spec,
        &design,
        &prob,
        fit,
        lambdas.to_vec(),
        theta,
        false,
        1,
    ))
}

/// GCV score for every grid value of one coordinate, others held fixed.
fn gcv_profile(
    prob: &Problem<'_>,
    grid: &[f64],
    idx: &[usize],
    coord: usize,
    theta: f64,
    start: &DVector<f64>,
) -> Result<Vec<Irls>, GamError> {
    (0..grid.len())
        .into_par_iter()
        .map(|g| {
            let lambdas: Vec<f64> = idx
                .iter()
                .enumerate()
                .map(|(c, &i)| if c == coord { grid[g] } else { grid[i] })
                .collect();
            prob.fit(&lambdas, theta, Some(start))
        })
        .collect()
}

fn gcv_search(
    prob: &Problem<'_>,
    grid: &[f64],
    idx: &mut [usize],
    theta: f64,
    mut best: Irls,
) -> Result<Irls, GamError> {
    for _ in 0..MAX_GCV_PASSES {
        let mut changed = false;
        for coord in 0..idx.len() {
            let start = best.beta.clone();
            let fits = gcv_profile(prob, grid, idx, coord, theta, &start)?;
            let (g, _) =
                fits.iter()
                    .enumerate()
                    .fold((0usize, f64::INFINITY), |(bi, bg), (i, f)| {
                        if f.gcv < bg {
                            (i, f.gcv)
                        } else {
                            (bi, bg)
                        }
                    });
            if g != idx[coord] {
                changed = true;
            }
            idx[coord] = g;
            best = fits.into_iter().nth(g).expect("grid index in range");
        }
        if !changed {
            break;
        }
    }
    Ok(best)
}

/// GCV scores along each smoothing coordinate at the selected point, for
/// diagnostics: `result[c][g]` varies coordinate `c` over the grid.
pub fn gcv_profiles(
    spec: &GamSpec,
    data: &GamData,
    fit: &GamFit,
) -> Result<Vec<Vec<f64>>, GamError> {
    let design = build_design(spec, data)?;
    let prob = Problem::new(&design, &data.response, spec);
    let grid = &spec.lambda_grid;
    let idx: Vec<usize> = fit
        .lambdas
        .iter()
        .map(|l| grid.iter().position(|g| g == l).unwrap_or(0))
        .collect();
    let theta = fit.theta.unwrap_or(1.0);
    let start = DVector::from_column_slice(&fit.beta);
    (0..idx.len())
        .map(|c| {
            Ok(gcv_profile(&prob, grid, &idx, c, theta, &start)?
                .into_iter()
                .map(|f| f.gcv)
                .collect())
        })
        .collect()
}

/// Wald statistic with a rank-truncated pseudo-inverse of `v`.
fn wald(beta: &DVector<f64>, v: &DMatrix<f64>, rank: usize) -> f64 {
    let eig = SymmetricEigen::new(v.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order
        .into_iter()
        .take(rank)
        .filter(|&i| eig.eigenvalues[i] > 0.0)
        .map(|i| eig.eigenvectors.column(i).dot(beta).powi(2) / eig.eigenvalues[i])
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    spec: &GamSpec,
    design: &Design,
    prob: &Problem<'_>,
    fit: Irls,
    lambdas: Vec<f64>,
    theta: f64,
    theta_estimated: bool,
    outer: usize,
) -> GamFit {
    let y = prob.y;
    let n = y.len();
    let nf = n as f64;
    let resid_df = (nf - fit.edf_total).max(1.0);
    let scale = match spec.family {
        Family::GaussianIdentity => fit.deviance / resid_df,
        Family::NegBinLog => 1.0,
    };
    let cov = &fit.a_inv * scale;
    let gaussian = spec.family == Family::GaussianIdentity;
    let tdist = StudentsT::new(0.0, 1.0, resid_df).expect("positive df");
    let normal = Normal::standard();
    let q = if gaussian {
        tdist.inverse_cdf(0.975)
    } else {
        normal.inverse_cdf(0.975)
    };

    let mut parametric = Vec::new();
    for t in design
        .terms
        .iter()
        .filter(|t| matches!(t.kind, TermKind::Intercept | TermKind::Linear))
    {
        for j in t.cols.clone() {
            let est = fit.beta[j];
            let se = cov[(j, j)].max(0.0).sqrt();
            let stat = est / se;
            let p = if gaussian {
                2.0 * tdist.sf(stat.abs())
            } else {
                2.0 * normal.sf(stat.abs())
            };
            parametric.push(Coefficient {
                name: design.coef_names[j].clone(),
                estimate: est,
                se,
                ci_lo: est - q * se,
                ci_hi: est + q * se,
                statistic: stat,
                p_value: p.min(1.0),
            });
        }
    }

    let mut smooths = Vec::new();
    let mut pen_at = 0;
    for t in &design.terms {
        let n_pen = match t.kind {
            TermKind::Smooth => 1,
            TermKind::Tensor => 2,
            _ => continue,
        };
        let edf: f64 = t.cols.clone().map(|j| fit.edf[j]).sum();
        let rank = (edf.round() as usize).clamp(1, t.cols.len());
        let b = DVector::from_column_slice(&fit.beta.as_slice()[t.cols.clone()]);
        let v = DMatrix::from_fn(t.cols.len(), t.cols.len(), |i, j| {
            cov[(t.cols.start + i, t.cols.start + j)]
        });
        let stat = wald(&b, &v, rank);
        let r = rank as f64;
        let (statistic, p) = if gaussian {
            let f = stat / r;
            let p = FisherSnedecor::new(r, resid_df)
                .map(|d| d.sf(f))
                .unwrap_or(f64::NAN);
            (f, p)
        } else {
            let p = ChiSquared::new(r).map(|d| d.sf(stat)).unwrap_or(f64::NAN);
            (stat, p)
        };
        smooths.push(SmoothSummary {
            name: t.name.clone(),
            kind: t.kind,
            edf,
            ref_df: r,
            statistic,
            p_value: p,
            lambdas: lambdas[pen_at..pen_at + n_pen].to_vec(),
        });
        pen_at += n_pen;
    }

    let ybar = y.iter().sum::<f64>() / nf;
    let null_deviance = prob.deviance(&vec![ybar; n], theta);
    let deviance_explained = if null_deviance > 0.0 {
        ((null_deviance - fit.deviance) / null_deviance).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let residuals: Vec<f64> = y.iter().zip(&fit.mu).map(|(y, m)| y - m).collect();
    let rbar = residuals.iter().sum::<f64>() / nf;
    let ss_r: f64 = residuals.iter().map(|r| (r - rbar).powi(2)).sum();
    let ss_y: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let r2_adjusted = if ss_y > 0.0 {
        1.0 - ss_r / (ss_y / (nf - 1.0) * resid_df)
    } else {
        f64::NAN
    };
    let (loglik, n_var) = match spec.family {
        Family::GaussianIdentity => (gaussian_loglik(fit.deviance, nf), 1.0),
        Family::NegBinLog => (
            nb_loglik(&design.x, y, &fit.beta, theta),
            if theta_estimated { 1.0 } else { 0.0 },
        ),
    };
    let aic = -2.0 * loglik + 2.0 * (fit.edf_total + n_var);

    GamFit {
        family: spec.family,
        response: spec.response.clone(),
        n,
        coef_names: design.coef_names.clone(),
        beta: fit.beta.iter().copied().collect(),
        covariance: (0..cov.nrows())
            .map(|i| cov.row(i).iter().copied().collect())
            .collect(),
        parametric,
        smooths,
        lambdas,
        theta: (spec.family == Family::NegBinLog).then_some(theta),
        theta_estimated,
        scale,
        edf: fit.edf.iter().copied().collect(),
        edf_total: fit.edf_total,
        fitted: fit.mu.clone(),
        residuals,
        deviance: fit.deviance,
        null_deviance,
        deviance_explained,
        r2_adjusted,
        aic,
        loglik,
        gcv: fit.gcv,
        convergence: Convergence {
            iterations: fit.iterations,
            converged: fit.converged,
            last_change: fit.last_change,
            pdev_trace: fit.pdev_trace,
            outer_iterations: outer,
        },
        lambda_grid: spec.lambda_grid.clone(),
        terms: design.terms.clone(),
        smooth_bases: design.smooth_bases.clone(),
        tensor: design.tensor.clone(),
        standardizers: design.standardizers.clone(),
    }
}

/// One row of a model-estimation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub section: String,
    pub term: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub edf: Option<f64>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub signif: String,
}

pub const SUMMARY_HEADER: &[&str] = &[
    "section",
    "term",
    "estimate",
    "se",
    "ci_lo",
    "ci_hi",
    "edf",
    "statistic",
    "p_value",
    "signif",
];

/// Parametric coefficients, smooth terms and fit statistics as table rows.
pub fn summarize_fit(fit: &GamFit) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for c in &fit.parametric {
        rows.push(SummaryRow {
            section: "parametric".into(),
            term: c.name.clone(),
            estimate: Some(c.estimate),
            se: Some(c.se),
            ci_lo: Some(c.ci_lo),
            ci_hi: Some(c.ci_hi),
            edf: None,
            statistic: Some(c.statistic),
            p_value: Some(c.p_value),
            signif: significance_code(c.p_value).into(),
        });
    }
    for s in &fit.smooths {
        rows.push(SummaryRow {
            section: "smooth".into(),
            term: s.name.clone(),
            estimate: None,
            se: None,
            ci_lo: None,
            ci_hi: None,
            edf: Some(s.edf),
            statistic: Some(s.statistic),
            p_value: Some(s.p_value),
            signif: significance_code(s.p_value).into(),
        });
    }
    let stat = |term: &str, v: f64| SummaryRow {
        section: "fit".into(),
        term: term.into(),
        estimate: Some(v),
        se: None,
        ci_lo: None,
        ci_hi: None,
        edf: None,
        statistic: None,
        p_value: None,
        signif: String::new(),
    };
    rows.push(stat("r2_adjusted", fit.r2_adjusted));
    rows.push(stat("deviance_explained", fit.deviance_explained));
    rows.push(stat("aic", fit.aic));
    rows.push(stat("edf_total", fit.edf_total));
    rows.push(stat("n", fit.n as f64));
    if let Some(t) = fit.theta {
        rows.push(stat("theta", t));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as RNormal, Poisson};

    fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn basis_shapes_and_errors() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 7.0).collect();
        let (b, s) = cr_basis(&x, 6).unwrap();
        assert_eq!((b.nrows(), b.ncols()), (50, 5));
        assert_eq!((s.nrows(), s.ncols()), (5, 5));
        for j in 0..5 {
            assert!(b.column(j).sum().abs() < 1e-10);
        }
        assert!(matches!(
            cr_basis(&[1.0, 2.0, 2.0, 1.0], 3),
            Err(GamError::TooFewDistinct {
                distinct: 2,
                k: 3,
                ..
            })
        ));
        let (t, pens) =
            tensor_basis(&x, &x.iter().map(|v| v.sin()).collect::<Vec<_>>(), 4, 5).unwrap();
        assert_eq!((t.nrows(), t.ncols()), (50, 12));
        assert_eq!(pens[0].nrows(), 12);
    }

    #[test]
    fn penalty_null_space_and_psd() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64).powf(1.3)).collect();
        let b = CrBasis::new(&x, 7, "x").unwrap();
        let lin = DVector::from_iterator(7, b.knots().iter().map(|k| 3.0 - 0.5 * k));
        assert!(lin.dot(&(b.raw_penalty() * &lin)).abs() < 1e-10);
        let eig = SymmetricEigen::new(b.raw_penalty().clone());
        let zeros = eig.eigenvalues.iter().filter(|e| e.abs() < 1e-9).count();
        assert_eq!(zeros, 2);
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-9));
    }

    #[test]
    fn basis_interpolates_knot_values_and_cubics() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.37).collect();
        let b = CrBasis::new(&x, 6, "x").unwrap();
        // A cubic spline through knot values of a linear function is that line.
        let vals: Vec<f64> = b.knots().iter().map(|k| 2.0 * k - 1.0).collect();
        for &t in &[0.0, 1.234, 5.5, 10.7, -1.0, 12.0] {
            let row = b.raw_row(t);
            let f: f64 = row.iter().zip(&vals).map(|(r, v)| r * v).sum();
            assert!((f - (2.0 * t - 1.0)).abs() < 1e-10, "{t}: {f}");
        }
        for (j, &k) in b.knots().iter().enumerate() {
            let row = b.raw_row(k);
            for (i, v) in row.iter().enumerate() {
                assert!((v - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    /// Closed-form line fit.
    fn ols_line(x: &[f64], y: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let b = sxy / sxx;
        (my - b * mx, b)
    }

    #[test]
    fn heavy_penalty_gives_least_squares_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&mut rng, 200, 0.0, 10.0);
        let noise = RNormal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 1.0 + 0.5 * v + noise.sample(&mut rng))
            .collect();
        let spec = GamSpec::new("y", Family::GaussianIdentity).smooth("x", 8);
        let data = GamData::new(y.clone()).with_numeric("x", x.clone());
        let fit = fit_gam_fixed(&spec, &data, &[1e8], None).unwrap();
        let (a, b) = ols_line(&x, &y);
        let dev = x
            .iter()
            .zip(&fit.fitted)
            .map(|(xi, f)| (a + b * xi - f).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-3, "{dev}");
    }

    #[test]
    fn intercept_only_gaussian() {
        let y = vec![1.0, 4.0, 2.0, 7.0, 3.0];
        let fit = fit_gam(
            &GamSpec::new("y", Family::GaussianIdentity),
            &GamData::new(y),
        )
        .unwrap();
        assert!((fit.beta[0] - 3.4).abs() < 1e-12);
        assert_eq!(fit.deviance_explained, 0.0);
        assert!(fit.convergence.converged);
    }

    fn linear_fixture(n: usize, seed: u64) -> (GamData, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = uniform(&mut rng, n, -2.0, 2.0);
        let x2 = uniform(&mut rng, n, 0.0, 50.0);
        let g: Vec<String> = (0..n)
            .map(|_| ["a", "b", "c"][rng.random_range(0..3)].to_string())
            .collect();
        let noise = RNormal::new(0.0, 0.7).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let ge = match g[i].as_str() {
                    "b" => 1.5,
                    "c" => -0.5,
                    _ => 0.0,
                };
                2.0 + 0.8 * x1[i] - 0.03 * x2[i] + ge + noise.sample(&mut rng)
            })
            .collect();
        let data = GamData::new(y)
            .with_numeric("x1", x1.clone())
            .with_numeric("x2", x2.clone())
            .with_categorical("g", g.clone());
        let cols = vec![
            vec![1.0; n],
            crate::stats::standardize_2sd(&x1).unwrap().values,
            crate::stats::standardize_2sd(&x2).unwrap().values,
            g.iter().map(|v| f64::from(u8::from(v == "b"))).collect(),
            g.iter().map(|v| f64::from(u8::from(v == "c"))).collect(),
        ];
        (data, cols)
    }

    #[test]
    fn gaussian_without_smooths_is_ols() {
        let (data, cols) = linear_fixture(1000, 11);
        let spec = GamSpec::new("y", Family::GaussianIdentity)
            .numeric("x1")
            .numeric("x2")
            .categorical("g", "a");
        let fit = fit_gam(&spec, &data).unwrap();
        let n = data.n();
        let x = DMatrix::from_fn(n, 5, |i, j| cols[j][i]);
        let oracle = (x.transpose() * &x)
            .lu()
            .solve(&(x.transpose() * DVector::from_column_slice(&data.response)))
            .unwrap();
        for j in 0..5 {
            assert!((fit.beta[j] - oracle[j]).abs() < 1e-8);
        }
        assert_eq!(
            fit.coef_names,
            vec!["(Intercept)", "x1", "x2", "g[b]", "g[c]"]
        );
        assert!((fit.edf_total - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rescaled_covariate_keeps_standardized_coefficient() {
        let (data, _) = linear_fixture(300, 5);
        let spec = GamSpec::new("y", Family::GaussianIdentity)
            .numeric("x1")
            .numeric("x2");
        let a = fit_gam(&spec, &data).unwrap();
        let mut scaled = data.clone();
        for v in scaled.numeric.get_mut("x2").unwrap() {
            *v *= 37.5;
        }
        let b = fit_gam(&spec, &scaled).unwrap();
        for (p, q) in a.beta.iter().zip(&b.beta) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn missing_reference_and_constant_terms() {
        let (data, _) = linear_fixture(50, 1);
        let spec = GamSpec::new("y", Family::GaussianIdentity).categorical("g", "zzz");
        assert!(matches!(
            fit_gam(&spec, &data),
            Err(GamError::MissingReference { .. })
        ));
        let data2 = data.clone().with_numeric("k", vec![2.0; 50]);
        let spec = GamSpec::new("y", Family::GaussianIdentity).numeric("k");
        assert_eq!(
            fit_gam(&spec, &data2).unwrap_err(),
            GamError::Constant("k".into())
        );
        let spec = GamSpec::new("y", Family::GaussianIdentity).numeric("nope");
        assert!(matches!(
            fit_gam(&spec, &data),
            Err(GamError::MissingColumn(_))
        ));
    }

    #[test]
    fn collinear_terms_are_named() {
        let (mut data, _) = linear_fixture(100, 2);
        let x1 = data.numeric["x1"].clone();
        data.numeric
            .insert("x1copy".into(), x1.iter().map(|v| 3.0 * v + 1.0).collect());
        let spec = GamSpec::new("y", Family::GaussianIdentity)
            .numeric("x1")
            .numeric("x1copy");
        match fit_gam(&spec, &data) {
            Err(GamError::RankDeficient(terms)) => {
                assert!(terms.iter().any(|t| t.starts_with("x1")), "{terms:?}");
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn unpenalized_smooth_edf_is_column_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = uniform(&mut rng, 150, 0.0, 1.0);
        let y: Vec<f64> = x
            .iter()
            .map(|v| (6.0 * v).sin() + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        let spec = GamSpec::new("y", Family::GaussianIdentity).smooth("x", 7);
        let fit =
            fit_gam_fixed(&spec, &GamData::new(y).with_numeric("x", x), &[0.0], None).unwrap();
        assert!((fit.smooths[0].edf - 6.0).abs() < 1e-9);
    }

    #[test]
    fn saturated_fit_explains_everything() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = vec![1.0, 3.0, 0.0, 2.0];
        let spec = GamSpec::new("y", Family::GaussianIdentity).smooth("x", 4);
        let fit =
            fit_gam_fixed(&spec, &GamData::new(y).with_numeric("x", x), &[0.0], None).unwrap();
        assert!((fit.deviance_explained - 1.0).abs() < 1e-9);
    }

    fn smooth_fixture(n: usize, seed: u64) -> (GamSpec, GamData) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n, 0.0, 1.0);
        let u = uniform(&mut rng, n, -1.0, 1.0);
        let noise = RNormal::new(0.0, 0.3).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| (5.0 * x[i]).sin() + 0.7 * u[i] + noise.sample(&mut rng))
            .collect();
        let spec = GamSpec::new("y", Family::GaussianIdentity)
            .numeric("u")
            .smooth("x", 10);
        (
            spec,
            GamData::new(y).with_numeric("x", x).with_numeric("u", u),
        )
    }

    #[test]
    fn edf_trace_additivity_and_range() {
        let (spec, data) = smooth_fixture(300, 3);
        let fit = fit_gam(&spec, &data).unwrap();
        let smooth_edf: f64 = fit.smooths.iter().map(|s| s.edf).sum();
        assert!((smooth_edf + fit.parametric.len() as f64 - fit.edf_total).abs() < 1e-8);
        for s in &fit.smooths {
            assert!(s.edf > 0.0 && s.edf <= 9.0 + 1e-9);
        }
        assert!(fit.smooths[0].edf > 2.0);
        assert!((0.0..=1.0).contains(&fit.deviance_explained));
        for i in 0..fit.parametric.len() {
            assert!((fit.edf[i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn selected_lambda_minimizes_gcv_along_each_coordinate() {
        let (_, data) = smooth_fixture(250, 12);
        let spec = GamSpec::new("y", Family::GaussianIdentity)
            .smooth("x", 10)
            .smooth("u", 6);
        let fit = fit_gam(&spec, &data).unwrap();
        let profiles = gcv_profiles(&spec, &data, &fit).unwrap();
        assert_eq!(profiles.len(), 2);
        for prof in &profiles {
            for &g in prof {
                assert!(fit.gcv <= g + 1e-12 * g.abs());
            }
        }
    }

    fn poisson_irls_oracle(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
        let n = y.len();
        let mut beta = DVector::zeros(x.ncols());
        beta[0] = (y.iter().sum::<f64>() / n as f64).ln();
        for _ in 0..100 {
            let eta = x * &beta;
            let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
            let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
            let mut xtwz = DVector::zeros(x.ncols());
            for i in 0..n {
                let xi = x.row(i).transpose();
                let z = eta[i] + (y[i] - mu[i]) / mu[i];
                xtwx += &xi * xi.transpose() * mu[i];
                xtwz += &xi * (mu[i] * z);
            }
            let next = xtwx.lu().solve(&xtwz).unwrap();
            let done = (&next - &beta).amax() < 1e-13;
            beta = next;
            if done {
                break;
            }
        }
        beta
    }

    fn poisson_fixture(n: usize, seed: u64) -> (GamData, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = uniform(&mut rng, n, -1.0, 1.0);
        let x2 = uniform(&mut rng, n, -1.0, 1.0);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mu = (1.2 + 0.6 * x1[i] - 0.4 * x2[i]).exp();
                Poisson::new(mu).unwrap().sample(&mut rng)
            })
            .collect();
        let s1 = crate::stats::standardize_2sd(&x1).unwrap().values;
        let s2 = crate::stats::standardize_2sd(&x2).unwrap().values;
        let x = DMatrix::from_fn(n, 3, |i, j| [1.0, s1[i], s2[i]][j]);
        (
            GamData::new(y)
                .with_numeric("x1", x1)
                .with_numeric("x2", x2),
            x,
        )
    }

    #[test]
    fn nb_with_huge_theta_matches_poisson() {
        let (data, x) = poisson_fixture(800, 21);
        let mut spec = GamSpec::new("y", Family::NegBinLog)
            .numeric("x1")
            .numeric("x2");
        spec.theta = ThetaMode::Fixed(THETA_MAX);
        let fit = fit_gam(&spec, &data).unwrap();
        let oracle = poisson_irls_oracle(&x, &data.response);
        for j in 0..3 {
            assert!(
                (fit.beta[j] - oracle[j]).abs() < 1e-4,
                "{} vs {}",
                fit.beta[j],
                oracle[j]
            );
        }
        assert!(fit.convergence.converged);
    }

    #[test]
    fn nb_theta_estimate_tracks_overdispersion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1500;
        let x = uniform(&mut rng, n, -1.0, 1.0);
        let theta = 2.0;
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                let mu = (1.5 + 0.5 * v).exp();
                let g = rand_distr::Gamma::new(theta, mu / theta)
                    .unwrap()
                    .sample(&mut rng);
                Poisson::new(g.max(1e-9)).unwrap().sample(&mut rng)
            })
            .collect();
        let spec = GamSpec::new("y", Family::NegBinLog).numeric("x");
        let fit = fit_gam(&spec, &GamData::new(y).with_numeric("x", x.clone())).unwrap();
        let t = fit.theta.unwrap();
        assert!(t > 1.4 && t < 2.8, "{t}");
        assert!(fit.theta_estimated);
        let slope = 0.5 * fit.standardizer("x").unwrap().sd * 2.0;
        assert!(
            (fit.beta[1] - slope).abs() < 0.1,
            "{} vs {slope}",
            fit.beta[1]
        );
    }

    #[test]
    fn nb_penalized_deviance_never_increases() {
        let (data, _) = poisson_fixture(400, 9);
        let spec = GamSpec::new("y", Family::NegBinLog)
            .smooth("x1", 8)
            .numeric("x2");
        for &lam in &[1e-3, 1.0, 1e3] {
            let fit = fit_gam_fixed(&spec, &data, &[lam], Some(3.0)).unwrap();
            for w in fit.convergence.pdev_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10 * w[0].abs(), "{w:?}");
            }
            assert!(fit.convergence.converged);
        }
    }

    #[test]
    fn nb_score_matches_finite_differences() {
        let (data, x) = poisson_fixture(200, 13);
        let mut spec = GamSpec::new("y", Family::NegBinLog)
            .numeric("x1")
            .numeric("x2");
        spec.theta = ThetaMode::Fixed(4.0);
        let fit = fit_gam(&spec, &data).unwrap();
        let beta = DVector::from_vec(fit.beta.iter().map(|b| b + 0.05).collect());
        let g = nb_score(&x, &data.response, &beta, 4.0);
        for j in 0..3 {
            let h = 1e-6 * beta[j].abs().max(1.0);
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += h;
            bm[j] -= h;
            let fd = (nb_loglik(&x, &data.response, &bp, 4.0)
                - nb_loglik(&x, &data.response, &bm, 4.0))
                / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1.0),
                "{j}: {fd} vs {}",
                g[j]
            );
        }
    }

    #[test]
    fn opposite_signs_for_count_and_change_models() {
        // A covariate that lengthens disruption and deepens the drop.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 600;
        let w = uniform(&mut rng, n, 0.0, 1.0);
        let dur: Vec<f64> = w
            .iter()
            .map(|v| {
                Poisson::new((1.0 + 1.2 * v).exp())
                    .unwrap()
                    .sample(&mut rng)
            })
            .collect();
        let change: Vec<f64> = w
            .iter()
            .map(|v| -5.0 - 10.0 * v + rng.random_range(-2.0..2.0))
            .collect();
        let nb = fit_gam(
            &GamSpec::new("duration", Family::NegBinLog).numeric("w"),
            &GamData::new(dur).with_numeric("w", w.clone()),
        )
        .unwrap();
        let ga = fit_gam(
            &GamSpec::new("change", Family::GaussianIdentity).numeric("w"),
            &GamData::new(change).with_numeric("w", w),
        )
        .unwrap();
        assert!(nb.beta[1] > 0.0 && ga.beta[1] < 0.0);
    }

    #[test]
    fn summary_rows_and_curves() {
        let (spec, data) = smooth_fixture(200, 30);
        let fit = fit_gam(&spec, &data).unwrap();
        let rows = summarize_fit(&fit);
        assert_eq!(rows.iter().filter(|r| r.section == "parametric").count(), 2);
        assert_eq!(rows.iter().filter(|r| r.section == "smooth").count(), 1);
        assert!(rows.iter().any(|r| r.term == "deviance_explained"));
        let curves = fit.smooth_curves();
        assert_eq!(curves.len(), 100);
        assert!(curves.iter().all(|c| c.lo <= c.fit && c.fit <= c.hi));
        assert_eq!(fit.smooths[0].p_value < 0.001, true);
    }

    fn spatial_fixture(n: usize, seed: u64, interaction: f64) -> (GamSpec, GamData) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = uniform(&mut rng, n, 38.8, 39.1);
        let lon = uniform(&mut rng, n, -77.2, -76.9);
        let noise = RNormal::new(0.0, 0.3).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b) = ((lat[i] - 38.8) / 0.3, (lon[i] + 77.2) / 0.3);
                (3.0 * a).sin()
                    + b * b
                    + interaction
                        * (std::f64::consts::PI * 2.0 * a).sin()
                        * (std::f64::consts::PI * b).cos()
                    + noise.sample(&mut rng)
            })
            .collect();
        let spec = GamSpec::new("y", Family::GaussianIdentity)
            .smooth("lat", 8)
            .smooth("lon", 8)
            .tensor("lat", "lon", 5, 5);
        (
            spec,
            GamData::new(y)
                .with_numeric("lat", lat)
                .with_numeric("lon", lon),
        )
    }

    #[test]
    fn tensor_edf_shrinks_on_additive_truth() {
        let (spec, data) = spatial_fixture(800, 41, 0.0);
        let fit = fit_gam(&spec, &data).unwrap();
        let floor = fit_gam_fixed(
            &spec,
            &data,
            &[fit.lambdas[0], fit.lambdas[1], 1e8, 1e8],
            None,
        )
        .unwrap();
        let ti = fit.smooth("ti(lat,lon)").unwrap().edf;
        let ti_min = floor.smooth("ti(lat,lon)").unwrap().edf;
        assert!((ti_min - 1.0).abs() < 0.01, "{ti_min}");
        assert!(ti < ti_min + 0.5, "{ti} vs {ti_min}");
    }

    #[test]
    fn tensor_edf_exceeds_one_with_interaction() {
        let (spec, data) = spatial_fixture(800, 41, 1.0);
        let fit = fit_gam(&spec, &data).unwrap();
        let ti = fit.smooth("ti(lat,lon)").unwrap();
        assert!(ti.edf > 2.0, "{}", ti.edf);
        assert!(ti.p_value < 1e-6);
        assert_eq!(ti.lambdas.len(), 2);
    }
}
