//! L1-penalized logistic regression with an unpenalized intercept.
//!
//! Minimizes `(1/n)·Σ [log(1 + e^η) − y·η] + λ·‖β‖₁`. Each outer iteration forms the
//! IRLS quadratic approximation, solves the weighted lasso by cyclic coordinate
//! descent over an active set, and backtracks along the resulting direction until the
//! true objective does not increase. Continuous columns are centered and scaled on the
//! training rows; indicator and fraction columns are used as-is. Returned coefficients
//! are on the original scale.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_WEIGHT: f64 = 1e-5;
const INNER_TOL: f64 = 1e-6;
const OBJ_REL_TOL: f64 = 1e-12;
const MAX_FULL_SWEEPS: usize = 100;
const MAX_ACTIVE_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    /// Explicit descending grid; generated from λ_max when absent.
    pub lambda_grid: Option<Vec<f64>>,
    pub n_lambda: usize,
    /// Orders of magnitude spanned by the generated grid.
    pub lambda_decades: f64,
    pub n_folds: usize,
    /// Outer (proximal Newton) iterations per λ.
    pub max_iter: usize,
    /// Largest curvature-weighted step at convergence.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            lambda_grid: None,
            n_lambda: 100,
            lambda_decades: 4.0,
            n_folds: 10,
            max_iter: 200,
            tol: 1e-8,
            seed: 0,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::config("n_folds", format!("must be at least 2, got {}", self.n_folds)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tol", "must be positive"));
        }
        match &self.lambda_grid {
            Some(g) => {
                if g.is_empty() || g.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                    return Err(Error::config("lambda_grid", "must be non-empty positive reals"));
                }
                if g.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::config("lambda_grid", "must be strictly descending"));
                }
            }
            None => {
                if self.n_lambda == 0 {
                    return Err(Error::config("n_lambda", "must be at least 1"));
                }
                if !(self.lambda_decades > 0.0) {
                    return Err(Error::config("lambda_decades", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Column centering and scaling; scale is 1 for unstandardized columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: f64,
    pub scale: f64,
}

#[cfg(test)]
const IDENTITY: Scaling = Scaling { mean: 0.0, scale: 1.0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coef {
    pub index: usize,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    /// Nonzero coefficients in column order; every other coefficient is exactly zero.
    pub coefficients: Vec<Coef>,
    pub feature_names: Vec<String>,
    pub lambda: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub scaling: Vec<Scaling>,
}

impl LassoFit {
    pub fn dense(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.feature_names.len()];
        for c in &self.coefficients {
            b[c.index] = c.value;
        }
        b
    }

    pub fn get(&self, name: &str) -> f64 {
        self.coefficients.iter().find(|c| c.name == name).map_or(0.0, |c| c.value)
    }

    pub fn n_nonzero(&self) -> usize {
        self.coefficients.len()
    }
}

#[derive(Debug, Clone)]
struct SparseCol {
    idx: Vec<usize>,
    val: Vec<f64>,
}

/// Standardized training design. Columns hold `x / scale` on the nonzero raw cells;
/// centering by `center = mean / scale` is applied implicitly so dummies stay sparse.
struct Design {
    n: usize,
    cols: Vec<SparseCol>,
    center: Vec<f64>,
    scaling: Vec<Scaling>,
}

impl Design {
    fn new(x: ArrayView2<f64>, rows: &[usize], standardize: &[bool]) -> Design {
        let n = rows.len();
        let p = x.ncols();
        let mut cols = Vec::with_capacity(p);
        let mut center = Vec::with_capacity(p);
        let mut scaling = Vec::with_capacity(p);
        for j in 0..p {
            // Every column is centered; with a free intercept this leaves the solution unchanged
            // and keeps near-constant columns from coupling with the intercept.
            let mean = rows.iter().map(|&i| x[[i, j]]).sum::<f64>() / n as f64;
            let scale = if standardize[j] {
                let var = rows.iter().map(|&i| (x[[i, j]] - mean).powi(2)).sum::<f64>() / n as f64;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            } else {
                1.0
            };
            let mut col = SparseCol { idx: Vec::new(), val: Vec::new() };
            for (r, &i) in rows.iter().enumerate() {
                let v = x[[i, j]];
                if v != 0.0 {
                    col.idx.push(r);
                    col.val.push(v / scale);
                }
            }
            cols.push(col);
            center.push(mean / scale);
            scaling.push(Scaling { mean, scale });
        }
        Design {
            n,
            cols,
            center,
            scaling,
        }
    }

    fn linear(&self, b0: f64, beta: &[f64]) -> Vec<f64> {
        let shift: f64 = beta.iter().zip(&self.center).map(|(b, c)| b * c).sum();
        let mut eta = vec![b0 - shift; self.n];
        for (col, &b) in self.cols.iter().zip(beta) {
            if b != 0.0 {
                for (&i, &v) in col.idx.iter().zip(&col.val) {
                    eta[i] += b * v;
                }
            }
        }
        eta
    }

    /// `(1/n)·x_jᵀ r` for every centered column.
    fn scores(&self, r: &[f64]) -> Vec<f64> {
        let total: f64 = r.iter().sum();
        self.cols
            .iter()
            .zip(&self.center)
            .map(|(c, m)| (c.idx.iter().zip(&c.val).map(|(&i, &v)| v * r[i]).sum::<f64>() - m * total) / self.n as f64)
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn objective(design: &Design, y: &[f64], b0: f64, beta: &[f64], lambda: f64) -> f64 {
    let eta = design.linear(b0, beta);
    let nll: f64 = eta.iter().zip(y).map(|(&e, &yi)| softplus(e) - yi * e).sum::<f64>() / design.n as f64;
    nll + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
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

fn check_response(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("empty response"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("response must be 0/1"));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if mean == 0.0 || mean == 1.0 {
        return Err(Error::invalid("response is constant"));
    }
    Ok(mean)
}

fn lambda_max_design(design: &Design, y: &[f64], ybar: f64) -> f64 {
    let r: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    design.scores(&r).into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// Smallest λ at which the all-zero coefficient vector is optimal.
pub fn lambda_max(x: ArrayView2<f64>, y: &[f64], standardize: &[bool]) -> Result<f64> {
    check_shapes(x, y, standardize)?;
    let ybar = check_response(y)?;
    let rows: Vec<usize> = (0..y.len()).collect();
    Ok(lambda_max_design(&Design::new(x, &rows, standardize), y, ybar))
}

/// `n` values from `lambda_max` down `decades` orders of magnitude, log-spaced.
pub fn lambda_grid(lambda_max: f64, n: usize, decades: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    (0..n)
        .map(|i| lambda_max * 10f64.powf(-decades * i as f64 / (n - 1) as f64))
        .collect()
}

fn check_shapes(x: ArrayView2<f64>, y: &[f64], standardize: &[bool]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    if x.ncols() != standardize.len() {
        return Err(Error::Dimension(format!(
            "{} columns but {} standardization flags",
            x.ncols(),
            standardize.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("design matrix has non-finite cells".into()));
    }
    Ok(())
}

struct SolveState {
    b0: f64,
    beta: Vec<f64>,
}

/// Weighted lasso on the IRLS quadratic; updates `(b0, beta)` in place and returns the
/// per-column curvature `(1/n)·Σ w x̃²`.
///
/// The working residual is kept as `r + off` so that centering never touches every row.
fn weighted_cd(design: &Design, w: &[f64], r: &mut [f64], lambda: f64, b0: &mut f64, beta: &mut [f64]) -> Vec<f64> {
    let n = design.n as f64;
    let wsum: f64 = w.iter().sum();
    let mut off = 0.0;
    let mut wr: f64 = w.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
    let wx: Vec<f64> = design
        .cols
        .iter()
        .map(|c| c.idx.iter().zip(&c.val).map(|(&i, &x)| w[i] * x).sum::<f64>())
        .collect();
    let v: Vec<f64> = design
        .cols
        .iter()
        .zip(&design.center)
        .zip(&wx)
        .map(|((c, m), sx)| {
            let sxx = c.idx.iter().zip(&c.val).map(|(&i, &x)| w[i] * x * x).sum::<f64>();
            ((sxx - 2.0 * m * sx + m * m * wsum) / n).max(0.0)
        })
        .collect();

    let update = |j: usize, r: &mut [f64], beta: &mut [f64], off: &mut f64, wr: &mut f64| -> f64 {
        if v[j] <= 1e-14 {
            let old = beta[j];
            beta[j] = 0.0;
            return old.abs();
        }
        let col = &design.cols[j];
        let m = design.center[j];
        let sxr: f64 = col.idx.iter().zip(&col.val).map(|(&i, &x)| w[i] * x * r[i]).sum();
        let grad = (sxr + *off * wx[j] - m * (*wr + *off * wsum)) / n;
        let new = soft_threshold(grad + v[j] * beta[j], lambda) / v[j];
        let delta = new - beta[j];
        if delta != 0.0 {
            for (&i, &x) in col.idx.iter().zip(&col.val) {
                r[i] -= delta * x;
            }
            *wr -= delta * wx[j];
            *off += delta * m;
            beta[j] = new;
        }
        delta.abs() * v[j].sqrt()
    };
    let update_intercept = |b0: &mut f64, off: &mut f64, wr: f64| -> f64 {
        let delta = (wr + *off * wsum) / wsum;
        if delta != 0.0 {
            *off -= delta;
            *b0 += delta;
        }
        delta.abs()
    };

    let p = beta.len();
    for _ in 0..MAX_FULL_SWEEPS {
        let mut change = update_intercept(b0, &mut off, wr);
        for j in 0..p {
            change = change.max(update(j, r, beta, &mut off, &mut wr));
        }
        if change < INNER_TOL {
            break;
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        for _ in 0..MAX_ACTIVE_SWEEPS {
            let mut c = update_intercept(b0, &mut off, wr);
            for &j in &active {
                c = c.max(update(j, r, beta, &mut off, &mut wr));
            }
            if c < INNER_TOL {
                break;
            }
        }
    }
    v
}

/// Proximal Newton iterations at one λ, starting from `state`.
fn solve(design: &Design, y: &[f64], lambda: f64, state: &mut SolveState, config: &LassoConfig) -> (bool, usize) {
    let mut f = objective(design, y, state.b0, &state.beta, lambda);
    for it in 1..=config.max_iter {
        let eta = design.linear(state.b0, &state.beta);
        let mut w = Vec::with_capacity(design.n);
        let mut r = Vec::with_capacity(design.n);
        for (&e, &yi) in eta.iter().zip(y) {
            let p = sigmoid(e);
            let wi = (p * (1.0 - p)).max(MIN_WEIGHT);
            w.push(wi);
            r.push((yi - p) / wi);
        }
        let mut nb0 = state.b0;
        let mut nbeta = state.beta.clone();
        let v = weighted_cd(design, &w, &mut r, lambda, &mut nb0, &mut nbeta);

        let d0 = nb0 - state.b0;
        let d: Vec<f64> = nbeta.iter().zip(&state.beta).map(|(a, b)| a - b).collect();
        // Step length in the local curvature metric, so flat directions do not stall.
        let wmean = w.iter().sum::<f64>() / design.n as f64;
        let step_size = v
            .iter()
            .zip(&d)
            .map(|(vj, dj)| dj.abs() * vj.sqrt())
            .fold(d0.abs() * wmean.sqrt(), f64::max);
        if step_size < config.tol {
            return (true, it);
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cb0 = state.b0 + t * d0;
            let cbeta: Vec<f64> = if t == 1.0 {
                nbeta.clone()
            } else {
                state.beta.iter().zip(&d).map(|(b, dj)| b + t * dj).collect()
            };
            let fc = objective(design, y, cb0, &cbeta, lambda);
            if fc <= f {
                state.b0 = cb0;
                state.beta = cbeta;
                if f - fc <= OBJ_REL_TOL * f.abs().max(1.0) {
                    return (true, it);
                }
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent left at machine precision.
            return (true, it);
        }
        if t * step_size < config.tol {
            return (true, it);
        }
    }
    (false, config.max_iter)
}

fn to_fit(design: &Design, names: &[String], state: &SolveState, lambda: f64, converged: bool, n_iter: usize) -> LassoFit {
    let mut intercept = state.b0;
    let mut coefficients = Vec::new();
    for (j, (&b, s)) in state.beta.iter().zip(&design.scaling).enumerate() {
        if b != 0.0 {
            let value = b / s.scale;
            intercept -= value * s.mean;
            coefficients.push(Coef {
                index: j,
                name: names[j].clone(),
                value,
            });
        }
    }
    LassoFit {
        intercept,
        coefficients,
        feature_names: names.to_vec(),
        lambda,
        converged,
        n_iter,
        scaling: design.scaling.clone(),
    }
}

fn path_on_rows(
    x: ArrayView2<f64>,
    y: &[f64],
    rows: &[usize],
    standardize: &[bool],
    names: &[String],
    grid: &[f64],
    config: &LassoConfig,
) -> Result<Vec<LassoFit>> {
    let design = Design::new(x, rows, standardize);
    let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let ybar = check_response(&yr)?;
    let lmax = lambda_max_design(&design, &yr, ybar);
    let null_b0 = (ybar / (1.0 - ybar)).ln();
    let mut state = SolveState {
        b0: null_b0,
        beta: vec![0.0; x.ncols()],
    };
    let mut fits = Vec::with_capacity(grid.len());
    for &lambda in grid {
        if lambda >= lmax {
            // The null model is the exact solution here.
            state = SolveState {
                b0: null_b0,
                beta: vec![0.0; x.ncols()],
            };
            fits.push(to_fit(&design, names, &state, lambda, true, 0));
            continue;
        }
        let (converged, n_iter) = solve(&design, &yr, lambda, &mut state, config);
        if !converged {
            log::warn!("lasso did not converge at lambda {lambda:.3e} after {n_iter} iterations");
        }
        fits.push(to_fit(&design, names, &state, lambda, converged, n_iter));
    }
    Ok(fits)
}

/// Warm-started fits along a descending λ grid.
pub fn fit_path(
    x: ArrayView2<f64>,
    y: &[f64],
    standardize: &[bool],
    names: &[String],
    grid: &[f64],
    config: &LassoConfig,
) -> Result<Vec<LassoFit>> {
    check_shapes(x, y, standardize)?;
    if names.len() != x.ncols() {
        return Err(Error::Dimension("feature names do not match columns".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) || grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("lambda grid must be non-negative and strictly descending"));
    }
    let rows: Vec<usize> = (0..y.len()).collect();
    path_on_rows(x, y, &rows, standardize, names, grid, config)
}

pub fn fit_single(
    x: ArrayView2<f64>,
    y: &[f64],
    standardize: &[bool],
    names: &[String],
    lambda: f64,
    config: &LassoConfig,
) -> Result<LassoFit> {
    Ok(fit_path(x, y, standardize, names, &[lambda], config)?.remove(0))
}

pub fn predict_prob(fit: &LassoFit, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.ncols() != fit.feature_names.len() {
        return Err(Error::Dimension(format!(
            "fit has {} features, matrix has {} columns",
            fit.feature_names.len(),
            x.ncols()
        )));
    }
    Ok(x.outer_iter()
        .map(|row| {
            let eta = fit.intercept + fit.coefficients.iter().map(|c| c.value * row[c.index]).sum::<f64>();
            sigmoid(eta)
        })
        .collect())
}

pub fn classify(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p >= 0.5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub fold_of_group: BTreeMap<String, usize>,
    /// Fold of every row.
    pub row_fold: Vec<usize>,
}

/// Distinct groups are sorted, shuffled with the seed, and dealt round-robin.
pub fn grouped_folds(groups: &[String], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::config("n_folds", "must be at least 2"));
    }
    let mut distinct: Vec<&String> = groups.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() < n_folds {
        return Err(Error::invalid(format!(
            "{} groups cannot fill {n_folds} folds",
            distinct.len()
        )));
    }
    distinct.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of_group: BTreeMap<String, usize> = distinct.iter().enumerate().map(|(i, g)| ((*g).clone(), i % n_folds)).collect();
    let row_fold = groups.iter().map(|g| fold_of_group[g]).collect();
    Ok(FoldAssignment {
        n_folds,
        fold_of_group,
        row_fold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: FoldAssignment,
    pub lambdas: Vec<f64>,
    /// Held-out mean squared error of predicted probabilities, per λ.
    pub mean_loss: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    /// Held-out probability of every row at the chosen λ.
    pub oof_prob: Vec<f64>,
    /// Full-data fit at the chosen λ.
    pub fit: LassoFit,
}

/// Grouped K-fold selection of λ followed by a full-data fit at the winner.
pub fn cv_select(
    x: ArrayView2<f64>,
    y: &[f64],
    groups: &[String],
    standardize: &[bool],
    names: &[String],
    config: &LassoConfig,
) -> Result<CvResult> {
    config.validate()?;
    check_shapes(x, y, standardize)?;
    if groups.len() != y.len() {
        return Err(Error::Dimension("groups do not match rows".into()));
    }
    let folds = grouped_folds(groups, config.n_folds, config.seed)?;
    let grid = match &config.lambda_grid {
        Some(g) => g.clone(),
        None => lambda_grid(lambda_max(x, y, standardize)?, config.n_lambda, config.lambda_decades),
    };
    let n = y.len();
    let per_fold: Vec<Result<(Vec<usize>, Vec<Vec<f64>>)>> = (0..config.n_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds.row_fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds.row_fold[i] == f).collect();
            let path = path_on_rows(x, y, &train, standardize, names, &grid, config)?;
            let xt = x.select(ndarray::Axis(0), &test);
            let preds = path.iter().map(|fit| predict_prob(fit, xt.view())).collect::<Result<Vec<_>>>()?;
            Ok((test, preds))
        })
        .collect();

    let mut sq = vec![0.0; grid.len()];
    let mut oof = vec![vec![0.0; n]; grid.len()];
    for res in per_fold {
        let (test, preds) = res?;
        for (l, p) in preds.iter().enumerate() {
            for (&i, &pi) in test.iter().zip(p) {
                sq[l] += (pi - y[i]).powi(2);
                oof[l][i] = pi;
            }
        }
    }
    let mean_loss: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
    let chosen_index = mean_loss
        .iter()
        .enumerate()
        .fold(0, |best, (l, &m)| if m < mean_loss[best] { l } else { best });
    let rows: Vec<usize> = (0..n).collect();
    let full = path_on_rows(x, y, &rows, standardize, names, &grid[..=chosen_index], config)?;
    Ok(CvResult {
        folds,
        chosen_lambda: grid[chosen_index],
        lambdas: grid,
        mean_loss,
        chosen_index,
        oof_prob: oof.swap_remove(chosen_index),
        fit: full.into_iter().last().expect("non-empty path"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn metrics(y_true: &[bool], y_pred: &[bool]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Dimension("label vectors differ in length".into()));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy: ratio(tp + tn, y_true.len()),
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Coefficients divided by the largest magnitude; intercept excluded.
pub fn normalize_coefs(fit: &LassoFit) -> Result<Vec<(String, f64)>> {
    let m = fit.coefficients.iter().map(|c| c.value.abs()).fold(0.0, f64::max);
    if m == 0.0 {
        return Err(Error::invalid("cannot normalize an all-zero coefficient vector"));
    }
    Ok(fit.coefficients.iter().map(|c| (c.name.clone(), c.value / m)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Largest violation over coefficients and the intercept.
    pub max_violation: f64,
}

impl KktReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

/// Optimality certificate of a fit on the scale it was solved in.
pub fn kkt_certificate(fit: &LassoFit, x: ArrayView2<f64>, y: &[f64]) -> Result<KktReport> {
    let probs = predict_prob(fit, x)?;
    let n = y.len() as f64;
    let resid: Vec<f64> = probs.iter().zip(y).map(|(p, yi)| p - yi).collect();
    let mut worst = (resid.iter().sum::<f64>() / n).abs();
    let dense = fit.dense();
    for (j, s) in fit.scaling.iter().enumerate() {
        let g = x
            .column(j)
            .iter()
            .zip(&resid)
            .map(|(xv, r)| (xv - s.mean) / s.scale * r)
            .sum::<f64>()
            / n;
        let b = dense[j] * s.scale;
        let v = if b == 0.0 {
            (g.abs() - fit.lambda).max(0.0)
        } else {
            (g + fit.lambda * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    Ok(KktReport { max_violation: worst })
}

/// Builds a row-major matrix from column vectors; a small convenience for tests and callers.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), p), data).map_err(|e| Error::Dimension(e.to_string()))
}

// ---------------------------------------------------------------------------
// Coefficient tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoefRow {
    variable: String,
    fe: Option<f64>,
    fne: Option<f64>,
}

/// Variable, FE and FNE coefficient; blank where a model did not retain the variable.
/// Variables retained by neither model are omitted. `decimals` rounds for display;
/// `None` writes values that parse back exactly.
pub fn write_coefficient_table<W: Write>(fe: &LassoFit, fne: &LassoFit, decimals: Option<usize>, writer: W) -> Result<()> {
    if fe.feature_names != fne.feature_names {
        return Err(Error::Dimension("FE and FNE fits use different features".into()));
    }
    let fmt = |v: f64| match decimals {
        Some(d) => format!("{v:.d$}"),
        None => v.to_string(),
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "fe", "fne"])?;
    w.write_record(["Intercept".to_string(), fmt(fe.intercept), fmt(fne.intercept)])?;
    let (dfe, dfne) = (fe.dense(), fne.dense());
    for (j, name) in fe.feature_names.iter().enumerate() {
        if dfe[j] == 0.0 && dfne[j] == 0.0 {
            continue;
        }
        let cell = |v: f64| if v == 0.0 { String::new() } else { fmt(v) };
        w.write_record([name.clone(), cell(dfe[j]), cell(dfne[j])])?;
    }
    w.flush().map_err(|e| Error::io("writing coefficient table", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub fe_intercept: f64,
    pub fne_intercept: f64,
    /// Variable → (FE, FNE), blanks as `None`.
    pub rows: Vec<(String, Option<f64>, Option<f64>)>,
}

impl CoefficientTable {
    /// Sparse coefficients of one model, in table order.
    pub fn sparse(&self, fne: bool) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter_map(|(n, a, b)| if fne { b } else { a }.map(|v| (n.clone(), v)))
            .collect()
    }
}

pub fn read_coefficient_table<R: Read>(reader: R) -> Result<CoefficientTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut table = CoefficientTable {
        fe_intercept: 0.0,
        fne_intercept: 0.0,
        rows: Vec::new(),
    };
    for row in rdr.deserialize::<CoefRow>() {
        let row = row?;
        if row.variable == "Intercept" {
            table.fe_intercept = row.fe.unwrap_or(0.0);
            table.fne_intercept = row.fne.unwrap_or(0.0);
        } else {
            table.rows.push((row.variable, row.fe, row.fne));
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn random_problem(n: usize, p: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
        let beta: Vec<f64> = (0..p).map(|j| if j < 3 { 1.0 - j as f64 * 0.5 } else { 0.0 }).collect();
        let y = x
            .outer_iter()
            .map(|r| {
                let eta: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() - 0.3;
                (rng.random::<f64>() < sigmoid(eta)) as u8 as f64
            })
            .collect();
        (x, y)
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn lambda_max_zero_for_orthogonal_column() {
        let x = matrix_from_rows(&[vec![1.0], vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let y = [1.0, 0.0, 1.0, 0.0];
        assert!(lambda_max(x.view(), &y, &[false]).unwrap().abs() < 1e-12);
        assert!(lambda_max(x.view(), &[1.0; 4], &[false]).is_err());
    }

    #[test]
    fn zero_above_lambda_max_and_nonzero_below() {
        let (x, y) = random_problem(200, 6, 3);
        let std = vec![false; 6];
        let lmax = lambda_max(x.view(), &y, &std).unwrap();
        let cfg = LassoConfig::default();
        let above = fit_single(x.view(), &y, &std, &names(6), 1.01 * lmax, &cfg).unwrap();
        assert_eq!(above.n_nonzero(), 0);
        let below = fit_single(x.view(), &y, &std, &names(6), 0.5 * lmax, &cfg).unwrap();
        assert!(below.n_nonzero() >= 1);
        assert!(kkt_certificate(&below, x.view(), &y).unwrap().passes(1e-6));
    }

    #[test]
    fn objective_never_increases_over_iterations() {
        let (x, y) = random_problem(150, 8, 11);
        let rows: Vec<usize> = (0..150).collect();
        let design = Design::new(x.view(), &rows, &[false; 8]);
        let lambda = 0.01;
        let mut state = SolveState { b0: 0.0, beta: vec![0.0; 8] };
        let cfg = LassoConfig { max_iter: 1, ..Default::default() };
        let mut prev = objective(&design, &y, state.b0, &state.beta, lambda);
        for _ in 0..30 {
            solve(&design, &y, lambda, &mut state, &cfg);
            let f = objective(&design, &y, state.b0, &state.beta, lambda);
            assert!(f <= prev + 1e-10);
            prev = f;
        }
    }

    #[test]
    fn standardized_columns_map_back() {
        let (mut x, y) = random_problem(300, 4, 5);
        x.column_mut(0).mapv_inplace(|v| 1000.0 + 250.0 * v);
        let std = [true, false, false, false];
        let fit = fit_single(x.view(), &y, &std, &names(4), 0.0, &LassoConfig::default()).unwrap();
        let unstd = fit_single(x.view(), &y, &[false; 4], &names(4), 0.0, &LassoConfig::default()).unwrap();
        // At λ = 0 scaling does not change the optimum.
        for (a, b) in fit.dense().iter().zip(unstd.dense()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!((fit.intercept - unstd.intercept).abs() < 1e-3);
    }

    #[test]
    fn duplicated_column_splits_mass() {
        let (x, y) = random_problem(300, 3, 9);
        let mut dup = Array2::zeros((300, 4));
        dup.slice_mut(ndarray::s![.., 0..3]).assign(&x);
        dup.column_mut(3).assign(&x.column(0));
        let cfg = LassoConfig::default();
        let lmax = lambda_max(x.view(), &y, &[false; 3]).unwrap();
        let single = fit_single(x.view(), &y, &[false; 3], &names(3), 0.2 * lmax, &cfg).unwrap();
        let double = fit_single(dup.view(), &y, &[false; 4], &names(4), 0.2 * lmax, &cfg).unwrap();
        let d = double.dense();
        assert!((d[0].abs() + d[3].abs() - single.dense()[0].abs()).abs() < 1e-4);
    }

    #[test]
    fn folds_are_balanced_by_group() {
        let groups: Vec<String> = (0..20).flat_map(|g| std::iter::repeat_n(format!("p{g}"), 3)).collect();
        let f = grouped_folds(&groups, 10, 1).unwrap();
        let mut counts = [0usize; 10];
        for fold in f.fold_of_group.values() {
            counts[*fold] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
        assert_eq!(f, grouped_folds(&groups, 10, 1).unwrap());
        assert!(grouped_folds(&groups[..6], 3, 1).is_err());
    }

    #[test]
    fn prediction_edge_cases() {
        let fit = LassoFit {
            intercept: 0.0,
            coefficients: vec![],
            feature_names: names(2),
            lambda: 1.0,
            converged: true,
            n_iter: 0,
            scaling: vec![IDENTITY; 2],
        };
        let x = Array2::from_elem((3, 2), 1.0);
        assert_eq!(predict_prob(&fit, x.view()).unwrap(), vec![0.5; 3]);
        let big = LassoFit { intercept: 50.0, ..fit.clone() };
        assert!(predict_prob(&big, x.view()).unwrap().iter().all(|&p| p > 1.0 - 1e-12));
        assert!(predict_prob(&fit, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn metrics_cases() {
        let m = metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let m = metrics(&[true, false], &[true, true]).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let m = metrics(&[true, false], &[false, false]).unwrap();
        assert_eq!(m.f1, 0.0);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn normalization() {
        let fit = LassoFit {
            intercept: 3.0,
            coefficients: vec![
                Coef { index: 0, name: "a".into(), value: 2.0 },
                Coef { index: 1, name: "b".into(), value: -4.0 },
            ],
            feature_names: names(2),
            lambda: 0.1,
            converged: true,
            n_iter: 1,
            scaling: vec![IDENTITY; 2],
        };
        assert_eq!(normalize_coefs(&fit).unwrap(), vec![("a".to_string(), 0.5), ("b".to_string(), -1.0)]);
        let empty = LassoFit { coefficients: vec![], ..fit };
        assert!(normalize_coefs(&empty).is_err());
    }

    #[test]
    fn coefficient_table_round_trip() {
        let (x, y) = random_problem(200, 6, 21);
        let std = vec![false; 6];
        let cfg = LassoConfig::default();
        let lmax = lambda_max(x.view(), &y, &std).unwrap();
        let fe = fit_single(x.view(), &y, &std, &names(6), 0.3 * lmax, &cfg).unwrap();
        let fne = fit_single(x.view(), &y, &std, &names(6), 0.1 * lmax, &cfg).unwrap();
        let mut buf = Vec::new();
        write_coefficient_table(&fe, &fne, None, &mut buf).unwrap();
        let t = read_coefficient_table(&buf[..]).unwrap();
        assert_eq!(t.fe_intercept, fe.intercept);
        let want: Vec<(String, f64)> = fe.coefficients.iter().map(|c| (c.name.clone(), c.value)).collect();
        assert_eq!(t.sparse(false), want);
        let want: Vec<(String, f64)> = fne.coefficients.iter().map(|c| (c.name.clone(), c.value)).collect();
        assert_eq!(t.sparse(true), want);
    }

    #[test]
    fn config_validation() {
        assert!(LassoConfig::default().validate().is_ok());
        assert!(LassoConfig { n_folds: 1, ..Default::default() }.validate().is_err());
        let bad = LassoConfig { lambda_grid: Some(vec![0.1, 0.2]), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
