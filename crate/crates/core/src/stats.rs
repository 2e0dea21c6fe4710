//! Evaluation metrics, test-retest summaries, least squares with an
//! age-by-deviation interaction and partial correlation.

use serde::Serialize;
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::cohort::{AgeBins, Gender};
use crate::linalg::{dot, invert, norm};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("correlation undefined: {0} has zero variance")]
    UndefinedCorrelation(&'static str),
    #[error("design column `{0}` is collinear with the preceding columns")]
    Collinear(String),
    #[error("{0} is exactly linear in the covariates")]
    DegenerateResidual(&'static str),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(StatsError::Length(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len(), truth.len(), "predictions and ages")?;
    if pred.is_empty() {
        return Err(StatsError::InsufficientData("no samples".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len(), "pearson inputs")?;
    if x.len() < 2 {
        return Err(StatsError::InsufficientData("pearson needs at least two points".into()));
    }
    let (cx, cy) = (centered(x), centered(y));
    let (nx, ny) = (norm(&cx), norm(&cy));
    if nx == 0.0 {
        return Err(StatsError::UndefinedCorrelation("x"));
    }
    if ny == 0.0 {
        return Err(StatsError::UndefinedCorrelation("y"));
    }
    Ok((dot(&cx, &cy) / (nx * ny)).clamp(-1.0, 1.0))
}

/// CDF of Student's t with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let tail = 0.5 * beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value of a t statistic.
pub fn two_sided_p(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// Per-comparison significance threshold for `n` tests.
pub fn bonferroni_threshold(alpha: f64, n: usize) -> f64 {
    alpha / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub chronological: f64,
    pub estimated: f64,
    pub age_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinMae {
    pub label: String,
    pub count: usize,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mae: f64,
    pub pearson_r: f64,
    pub per_bin: Vec<BinMae>,
    /// Rows whose age falls outside every bin.
    pub unbinned: usize,
}

impl EvalReport {
    /// Ratio of the largest to the smallest per-bin MAE over occupied bins.
    pub fn bin_mae_ratio(&self) -> Option<f64> {
        let maes: Vec<f64> = self.per_bin.iter().filter_map(|b| b.mae).collect();
        let max = maes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = maes.iter().cloned().fold(f64::INFINITY, f64::min);
        (!maes.is_empty() && min > 0.0).then(|| max / min)
    }
}

pub fn eval_metrics(preds: &[f64], ages: &[f64], bins: &AgeBins) -> Result<EvalReport> {
    let mae = mean_absolute_error(preds, ages)?;
    let pearson_r = pearson(preds, ages)?;
    let rows = preds
        .iter()
        .zip(ages)
        .map(|(&p, &a)| EvalRow { chronological: a, estimated: p, age_diff: p - a })
        .collect();
    let mut sums = vec![(0usize, 0.0f64); bins.len()];
    let mut unbinned = 0;
    for (&p, &a) in preds.iter().zip(ages) {
        match bins.find(a) {
            Some(b) => {
                sums[b].0 += 1;
                sums[b].1 += (p - a).abs();
            }
            None => unbinned += 1,
        }
    }
    let per_bin = sums
        .iter()
        .enumerate()
        .map(|(b, &(count, total))| BinMae {
            label: bins.label(b),
            count,
            mae: (count > 0).then(|| total / count as f64),
        })
        .collect();
    Ok(EvalReport { rows, mae, pearson_r, per_bin, unbinned })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetestSummary {
    pub subject: String,
    pub scans: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single scan.
    pub std: Option<f64>,
}

pub fn retest_summary(subjects: &[(String, Vec<f64>)]) -> Result<Vec<RetestSummary>> {
    subjects
        .iter()
        .map(|(subject, preds)| {
            if preds.is_empty() {
                return Err(StatsError::InsufficientData(format!("no predictions for {subject}")));
            }
            let m = mean(preds);
            let std = (preds.len() >= 2).then(|| {
                let ss: f64 = preds.iter().map(|p| (p - m) * (p - m)).sum();
                (ss / (preds.len() - 1) as f64).sqrt()
            });
            Ok(RetestSummary { subject: subject.clone(), scans: preds.len(), mean: m, std })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Term {
    pub name: String,
    pub beta: f64,
    pub std_error: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionResult {
    pub terms: Vec<Term>,
    pub dof: usize,
    pub rss: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl RegressionResult {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Relative tolerance below which a Gram-Schmidt residual marks a column as
/// linearly dependent on its predecessors.
const COLLINEAR_TOL: f64 = 1e-10;

fn collinearity_check(columns: &[(&str, &[f64])]) -> Result<()> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(columns.len());
    for (name, col) in columns {
        let scale = norm(col);
        let mut v = col.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let len = norm(&v);
        if scale == 0.0 || len <= COLLINEAR_TOL * scale {
            return Err(StatsError::Collinear(name.to_string()));
        }
        basis.push(v.into_iter().map(|a| a / len).collect());
    }
    Ok(())
}

fn solve_least_squares(columns: &[&[f64]], y: &[f64], xtx_inv: &[f64]) -> Vec<f64> {
    let p = columns.len();
    let project = |r: &[f64]| -> Vec<f64> {
        let xty: Vec<f64> = columns.iter().map(|c| dot(c, r)).collect();
        (0..p).map(|i| (0..p).map(|j| xtx_inv[i * p + j] * xty[j]).sum()).collect()
    };
    let mut beta = project(y);
    // Iterative refinement keeps residuals orthogonal on ill-scaled designs.
    for _ in 0..2 {
        let resid = residuals(columns, y, &beta);
        let delta = project(&resid);
        beta.iter_mut().zip(delta).for_each(|(b, d)| *b += d);
    }
    beta
}

fn residuals(columns: &[&[f64]], y: &[f64], beta: &[f64]) -> Vec<f64> {
    (0..y.len())
        .map(|i| y[i] - columns.iter().zip(beta).map(|(c, b)| c[i] * b).sum::<f64>())
        .collect()
}

/// Ordinary least squares on named design columns (include an intercept
/// column explicitly).
pub fn ols(columns: &[(&str, &[f64])], y: &[f64]) -> Result<RegressionResult> {
    let n = y.len();
    let p = columns.len();
    for (name, c) in columns {
        check_len(c.len(), n, name)?;
    }
    if n <= p {
        return Err(StatsError::InsufficientData(format!("{n} observations for {p} parameters")));
    }
    collinearity_check(columns)?;
    let cols: Vec<&[f64]> = columns.iter().map(|(_, c)| *c).collect();
    let mut xtx = vec![0.0; p * p];
    for i in 0..p {
        for j in i..p {
            let v = dot(cols[i], cols[j]);
            xtx[i * p + j] = v;
            xtx[j * p + i] = v;
        }
    }
    let inv = invert(&xtx, p, 1e-15).ok_or_else(|| StatsError::Collinear(columns[p - 1].0.to_string()))?;
    let beta = solve_least_squares(&cols, y, &inv);
    let resid = residuals(&cols, y, &beta);
    let rss = dot(&resid, &resid);
    let dof = n - p;
    let sigma2 = rss / dof as f64;
    let terms = columns
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let se = (sigma2 * inv[i * p + i]).sqrt();
            let t = beta[i] / se;
            Term { name: name.to_string(), beta: beta[i], std_error: se, t, p: two_sided_p(t, dof as f64) }
        })
        .collect();
    Ok(RegressionResult { terms, dof, rss, residuals: resid })
}

pub const TERM_INTERCEPT: &str = "intercept";
pub const TERM_AGE: &str = "age";
pub const TERM_AGE_DIFF: &str = "age_diff";
pub const TERM_INTERACTION: &str = "age_x_age_diff";
pub const TERM_GENDER: &str = "gender";

/// `score ~ 1 + age + age_diff + age*age_diff + gender`, gender coded F=0, M=1.
pub fn ols_interaction(score: &[f64], age: &[f64], age_diff: &[f64], gender: &[Gender]) -> Result<RegressionResult> {
    let n = score.len();
    check_len(age.len(), n, "age")?;
    check_len(age_diff.len(), n, "age_diff")?;
    check_len(gender.len(), n, "gender")?;
    let ones = vec![1.0; n];
    let inter: Vec<f64> = age.iter().zip(age_diff).map(|(a, d)| a * d).collect();
    let g: Vec<f64> = gender.iter().map(|g| g.indicator()).collect();
    ols(
        &[
            (TERM_INTERCEPT, &ones),
            (TERM_AGE, age),
            (TERM_AGE_DIFF, age_diff),
            (TERM_INTERACTION, &inter),
            (TERM_GENDER, &g),
        ],
        score,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartialCorrelation {
    pub r: f64,
    pub p: f64,
    pub dof: usize,
}

fn residualize(v: &[f64], design: &[(&str, &[f64])], what: &'static str) -> Result<Vec<f64>> {
    let fit = ols(design, v)?;
    let scale = norm(&centered(v));
    if scale == 0.0 || norm(&fit.residuals) <= 1e-10 * scale {
        return Err(StatsError::DegenerateResidual(what));
    }
    Ok(fit.residuals)
}

/// Pearson correlation of `x` and `y` after regressing both on an intercept
/// and the covariates.
pub fn partial_correlation(x: &[f64], y: &[f64], covariates: &[&[f64]]) -> Result<PartialCorrelation> {
    let n = x.len();
    check_len(y.len(), n, "partial correlation inputs")?;
    let k = covariates.len();
    if n <= k + 2 {
        return Err(StatsError::InsufficientData(format!("{n} observations for {k} covariates")));
    }
    let ones = vec![1.0; n];
    let names: Vec<String> = (0..k).map(|i| format!("covariate{i}")).collect();
    let mut design: Vec<(&str, &[f64])> = vec![("intercept", &ones)];
    design.extend(names.iter().map(String::as_str).zip(covariates.iter().copied()));
    let (rx, ry) = if k == 0 {
        (x.to_vec(), y.to_vec())
    } else {
        (residualize(x, &design, "x")?, residualize(y, &design, "y")?)
    };
    let r = pearson(&rx, &ry).map_err(|e| match e {
        StatsError::UndefinedCorrelation(w) => StatsError::DegenerateResidual(w),
        other => other,
    })?;
    let dof = n - k - 2;
    let t = if r.abs() >= 1.0 { r.signum() * f64::INFINITY } else { r * (dof as f64 / (1.0 - r * r)).sqrt() };
    Ok(PartialCorrelation { r, p: two_sided_p(t, dof as f64), dof })
}
