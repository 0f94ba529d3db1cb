//! LASSO by cyclic coordinate descent on standardized features.
//!
//! All fits go through second-moment summaries of the data, so a K-fold
//! cross-validation costs one pass over the rows plus K small p × p solves per
//! penalty. Held-out squared error is also evaluated from the fold summaries.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::LinearModel;
use crate::data::{make_folds, FoldAssignment, ScalerParams};
use crate::error::{invalid, CalmError, Result};

const CONSTANT_SD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoConfig {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub tol: f64,
    pub max_passes: usize,
    pub cv_folds: usize,
    /// Fail on hitting `max_passes`; otherwise warn and keep the last iterate.
    pub strict: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            n_lambda: 50,
            lambda_min_ratio: 1e-4,
            tol: 1e-7,
            max_passes: 100_000,
            cv_folds: 5,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub model: LinearModel,
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub cv_error: Vec<f64>,
    pub selected: usize,
}

/// `n_lambda` log-spaced penalties from `lambda_max` down to `ratio · lambda_max`.
pub fn lasso_grid(lambda_max: f64, n_lambda: usize, ratio: f64) -> Vec<f64> {
    if n_lambda <= 1 {
        return vec![lambda_max];
    }
    let lo = ratio.ln();
    (0..n_lambda)
        .map(|i| lambda_max * (lo * i as f64 / (n_lambda - 1) as f64).exp())
        .collect()
}

/// Sums of a row block after subtracting a fixed shift from x and y.
#[derive(Debug, Clone)]
struct Moments {
    pub n: f64,
    pub sx: DVector<f64>,
    pub sxx: DMatrix<f64>,
    pub sxy: DVector<f64>,
    pub sy: f64,
    pub syy: f64,
}

impl Moments {
    fn accumulate(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        rows: &[usize],
        shift_x: &DVector<f64>,
        shift_y: f64,
    ) -> Self {
        let p = x.ncols();
        let xs = DMatrix::from_fn(rows.len(), p, |i, j| x[(rows[i], j)] - shift_x[j]);
        let ys = DVector::from_fn(rows.len(), |i, _| y[rows[i]] - shift_y);
        let xt = xs.transpose();
        Self {
            n: rows.len() as f64,
            sx: DVector::from_iterator(p, xs.column_iter().map(|c| c.sum())),
            sxx: &xt * &xs,
            sxy: &xt * &ys,
            sy: ys.sum(),
            syy: ys.dot(&ys),
        }
    }

    fn zeros(p: usize) -> Self {
        Self {
            n: 0.0,
            sx: DVector::zeros(p),
            sxx: DMatrix::zeros(p, p),
            sxy: DVector::zeros(p),
            sy: 0.0,
            syy: 0.0,
        }
    }

    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.sx += &o.sx;
        self.sxx += &o.sxx;
        self.sxy += &o.sxy;
        self.sy += o.sy;
        self.syy += o.syy;
    }

    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            n: self.n - o.n,
            sx: &self.sx - &o.sx,
            sxx: &self.sxx - &o.sxx,
            sxy: &self.sxy - &o.sxy,
            sy: self.sy - o.sy,
            syy: self.syy - o.syy,
        }
    }

    fn leading(&self, d: usize) -> Moments {
        Moments {
            n: self.n,
            sx: self.sx.rows(0, d).into_owned(),
            sxx: self.sxx.view((0, 0), (d, d)).into_owned(),
            sxy: self.sxy.rows(0, d).into_owned(),
            sy: self.sy,
            syy: self.syy,
        }
    }

    /// Sum of squared residuals of `b + xᵀβ` on these (shifted) rows.
    fn sse(&self, b: f64, beta: &DVector<f64>) -> f64 {
        let quad = beta.dot(&(&self.sxx * beta));
        let v = self.syy - 2.0 * b * self.sy - 2.0 * beta.dot(&self.sxy)
            + self.n * b * b
            + 2.0 * b * beta.dot(&self.sx)
            + quad;
        v.max(0.0)
    }
}

/// Standardized problem `½βᵀGβ − cᵀβ + λ‖β‖₁` derived from training moments.
struct Standardized {
    gram: DMatrix<f64>,
    c: DVector<f64>,
    mean_x: DVector<f64>,
    mean_y: f64,
    sd: DVector<f64>,
    constant: Vec<bool>,
}

impl Standardized {
    fn from_moments(m: &Moments) -> Self {
        let p = m.sx.len();
        let n = m.n;
        let mean_x = &m.sx / n;
        let mean_y = m.sy / n;
        let mut cov = &m.sxx / n - &mean_x * mean_x.transpose();
        // Symmetrize against round-off so the diagonal update stays exact.
        cov = (&cov + cov.transpose()) * 0.5;
        let mut sd = DVector::zeros(p);
        let mut constant = vec![false; p];
        for j in 0..p {
            let s = cov[(j, j)].max(0.0).sqrt();
            if s <= CONSTANT_SD {
                constant[j] = true;
                sd[j] = 1.0;
            } else {
                sd[j] = s;
            }
        }
        let mut gram = DMatrix::zeros(p, p);
        for k in 0..p {
            for j in 0..p {
                if !constant[j] && !constant[k] {
                    gram[(j, k)] = cov[(j, k)] / (sd[j] * sd[k]);
                }
            }
        }
        for j in 0..p {
            if !constant[j] {
                gram[(j, j)] = 1.0;
            }
        }
        let mut c = DVector::zeros(p);
        for j in 0..p {
            if !constant[j] {
                c[j] = (m.sxy[j] / n - mean_x[j] * mean_y) / sd[j];
            }
        }
        Self {
            gram,
            c,
            mean_x,
            mean_y,
            sd,
            constant,
        }
    }

    fn lambda_max(&self) -> f64 {
        self.c.amax()
    }

    /// Coordinate descent at one penalty, warm-started from `beta`.
    fn solve(&self, lambda: f64, beta: &mut DVector<f64>, cfg: &LassoConfig) -> Result<()> {
        let p = beta.len();
        // grad = c − Gβ, kept in sync with β.
        let mut grad = &self.c - &self.gram * &*beta;
        let mut passes = 0usize;
        let free: Vec<usize> = (0..p).filter(|&j| !self.constant[j]).collect();
        loop {
            let change = self.pass(lambda, beta, &mut grad, &free);
            passes += 1;
            if change < cfg.tol {
                return Ok(());
            }
            loop {
                let active: Vec<usize> = free.iter().copied().filter(|&j| beta[j] != 0.0).collect();
                let ch = self.pass(lambda, beta, &mut grad, &active);
                passes += 1;
                if ch < cfg.tol {
                    break;
                }
                if passes >= cfg.max_passes {
                    return give_up(cfg, lambda, passes, ch, beta);
                }
            }
            if passes >= cfg.max_passes {
                return give_up(cfg, lambda, passes, change, beta);
            }
        }
    }

    fn pass(&self, lambda: f64, beta: &mut DVector<f64>, grad: &mut DVector<f64>, idx: &[usize]) -> f64 {
        let mut max_change: f64 = 0.0;
        for &j in idx {
            let old = beta[j];
            let z = grad[j] + old;
            let new = soft_threshold(z, lambda);
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                grad.axpy(-delta, &self.gram.column(j), 1.0);
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// Original-scale slopes and intercept (in the coordinates the moments were taken in).
    fn unscale(&self, beta_std: &DVector<f64>) -> (f64, DVector<f64>) {
        let beta = beta_std.component_div(&self.sd);
        let b = self.mean_y - self.mean_x.dot(&beta);
        (b, beta)
    }
}

fn give_up(cfg: &LassoConfig, lambda: f64, passes: usize, max_change: f64, beta: &DVector<f64>) -> Result<()> {
    if cfg.strict {
        return Err(CalmError::NonConvergence {
            passes,
            max_change,
            coefficients: beta.iter().copied().collect(),
        });
    }
    warn!("coordinate descent stopped after {passes} passes at lambda {lambda:.3e} (last change {max_change:.2e})");
    Ok(())
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Per-fold summaries of one regression problem, reusable across grids and
/// leading-column restrictions.
#[derive(Debug, Clone)]
pub struct LassoCv {
    folds: Vec<Moments>,
    total: Moments,
    shift_x: DVector<f64>,
    shift_y: f64,
}

impl LassoCv {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, folds: &FoldAssignment) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return invalid("x and y row counts differ");
        }
        if folds.n != n {
            return invalid(format!("fold assignment covers {} rows, data has {n}", folds.n));
        }
        if folds.k < 2 {
            return invalid("cross-validation needs at least 2 folds");
        }
        let shift_x = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
        let shift_y = y.mean();
        let mut total = Moments::zeros(p);
        let mut per_fold = Vec::with_capacity(folds.k);
        for k in 0..folds.k {
            let m = Moments::accumulate(x, y, &folds.rows_in(k), &shift_x, shift_y);
            total.add(&m);
            per_fold.push(m);
        }
        Ok(Self {
            folds: per_fold,
            total,
            shift_x,
            shift_y,
        })
    }

    pub fn n_features(&self) -> usize {
        self.shift_x.len()
    }

    /// Restrict to the first `d` feature columns.
    pub fn leading(&self, d: usize) -> Result<Self> {
        if d == 0 || d > self.n_features() {
            return invalid(format!("cannot keep {d} of {} columns", self.n_features()));
        }
        Ok(Self {
            folds: self.folds.iter().map(|m| m.leading(d)).collect(),
            total: self.total.leading(d),
            shift_x: self.shift_x.rows(0, d).into_owned(),
            shift_y: self.shift_y,
        })
    }

    /// Smallest penalty with an all-zero solution on the full data.
    pub fn lambda_max(&self) -> f64 {
        Standardized::from_moments(&self.total).lambda_max()
    }

    /// Mean held-out squared error at every grid value.
    pub fn cv_path(&self, grid: &[f64], cfg: &LassoConfig) -> Result<Vec<f64>> {
        check_grid(grid)?;
        let mut err = vec![0.0; grid.len()];
        for fold in &self.folds {
            let train = self.total.minus(fold);
            if train.n < 2.0 || fold.n < 1.0 {
                return invalid("each fold needs held-out rows and at least 2 training rows");
            }
            let st = Standardized::from_moments(&train);
            let mut beta = DVector::zeros(self.n_features());
            for (i, &lambda) in grid.iter().enumerate() {
                st.solve(lambda, &mut beta, cfg)?;
                let (b, slope) = st.unscale(&beta);
                err[i] += fold.sse(b, &slope) / fold.n;
            }
        }
        let k = self.folds.len() as f64;
        Ok(err.into_iter().map(|e| e / k).collect())
    }

    /// Refit on all rows along `grid[..=upto]` and return the model at `grid[upto]`.
    pub fn refit(&self, grid: &[f64], upto: usize, cfg: &LassoConfig) -> Result<LinearModel> {
        check_grid(grid)?;
        if upto >= grid.len() {
            return invalid("selected index outside the grid");
        }
        let st = Standardized::from_moments(&self.total);
        let mut beta = DVector::zeros(self.n_features());
        for &lambda in &grid[..=upto] {
            st.solve(lambda, &mut beta, cfg)?;
        }
        Ok(self.to_model(&st, &beta, grid[upto]))
    }

    fn to_model(&self, st: &Standardized, beta_std: &DVector<f64>, lambda: f64) -> LinearModel {
        let (b_shifted, slope) = st.unscale(beta_std);
        let intercept = b_shifted + self.shift_y - self.shift_x.dot(&slope);
        let mean: Vec<f64> = (&st.mean_x + &self.shift_x).iter().copied().collect();
        LinearModel {
            intercept,
            coefficients: slope,
            scaler: Some(ScalerParams {
                mean,
                sd: st.sd.iter().copied().collect(),
                constant: st.constant.clone(),
            }),
            penalty: lambda,
        }
    }

    /// Cross-validate over `grid` and refit at the selected penalty.
    pub fn fit(&self, grid: &[f64], cfg: &LassoConfig) -> Result<LassoFit> {
        let cv_error = self.cv_path(grid, cfg)?;
        let selected = select_index(&cv_error);
        let model = self.refit(grid, selected, cfg)?;
        Ok(LassoFit {
            model,
            lambda: grid[selected],
            grid: grid.to_vec(),
            cv_error,
            selected,
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return invalid("penalty grid is empty");
    }
    if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return invalid("penalties must be finite and non-negative");
    }
    if grid.windows(2).any(|w| w[1] > w[0]) {
        return invalid("penalty grid must be sorted in descending order");
    }
    Ok(())
}

/// Index of the minimum CV error; ties go to the earliest (largest) penalty.
fn select_index(err: &[f64]) -> usize {
    let min = err.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = min.abs() * 1e-12;
    err.iter().position(|&e| e <= min + tol).unwrap_or(0)
}

/// LASSO with the penalty chosen by K-fold CV over a caller-supplied grid.
pub fn fit_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    folds: &FoldAssignment,
    cfg: &LassoConfig,
) -> Result<LassoFit> {
    LassoCv::new(x, y, folds)?.fit(grid, cfg)
}

/// LASSO at a single penalty on all rows.
pub fn fit_lasso_fixed(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    cfg: &LassoConfig,
) -> Result<LinearModel> {
    let n = x.nrows();
    if y.len() != n {
        return invalid("x and y row counts differ");
    }
    if n == 0 {
        return invalid("cannot fit on zero rows");
    }
    let p = x.ncols();
    let shift_x = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let shift_y = y.mean();
    let rows: Vec<usize> = (0..n).collect();
    let total = Moments::accumulate(x, y, &rows, &shift_x, shift_y);
    let cv = LassoCv {
        folds: Vec::new(),
        total,
        shift_x,
        shift_y,
    };
    cv.refit(&[lambda], 0, cfg)
}

/// LASSO with its own standard grid and CV folds drawn from `seed`.
///
/// Falls back to the intercept-only model when the problem is too small to
/// cross-validate or no column varies.
pub fn fit_lasso_cv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &LassoConfig,
    seed: u64,
) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return invalid("x and y row counts differ");
    }
    if n == 0 {
        return invalid("cannot fit on zero rows");
    }
    let k = cfg.cv_folds.min(n / 2);
    if k < 2 {
        warn!("only {n} rows; returning the intercept-only model");
        return Ok(intercept_only(y, p));
    }
    let folds = make_folds(n, k, seed)?;
    let cv = LassoCv::new(x, y, &folds)?;
    let lambda_max = cv.lambda_max();
    if !(lambda_max > 0.0) {
        return Ok(intercept_only(y, p));
    }
    let grid = lasso_grid(lambda_max, cfg.n_lambda, cfg.lambda_min_ratio);
    cv.fit(&grid, cfg)
}

fn intercept_only(y: &DVector<f64>, p: usize) -> LassoFit {
    LassoFit {
        model: LinearModel::constant(y.mean(), p),
        lambda: f64::INFINITY,
        grid: Vec::new(),
        cv_error: Vec::new(),
        selected: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmod::fit_ols;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = crate::rng::derive_rng(seed, 77, 0);
        let x = DMatrix::from_fn(n, p, |_, j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64) + 0.3);
        let y = DVector::from_fn(n, |i, _| {
            0.5 + x[(i, 0)] - 0.5 * x[(i, p - 1)] + rng.sample::<f64, _>(StandardNormal)
        });
        (x, y)
    }

    fn standardized(x: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let sc = ScalerParams::fit(x).unwrap();
        (sc.transform(x).unwrap(), y.add_scalar(-y.mean()))
    }

    #[test]
    fn grid_is_log_spaced_and_descending() {
        let g = lasso_grid(2.0, 50, 1e-4);
        assert_eq!(g.len(), 50);
        assert!((g[0] - 2.0).abs() < 1e-15);
        assert!((g[49] - 2e-4).abs() < 1e-15);
        let r = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_penalty_matches_ols() {
        let (x, y) = problem(60, 4, 1);
        let m = fit_lasso_fixed(&x, &y, 0.0, &LassoConfig::default()).unwrap();
        let o = fit_ols(&x, &y).unwrap();
        assert!((m.intercept - o.intercept).abs() < 1e-6);
        for j in 0..4 {
            assert!((m.coefficients[j] - o.coefficients[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_max_kills_everything() {
        let (x, y) = problem(50, 5, 2);
        let (xs, yc) = standardized(&x, &y);
        let lmax = (xs.transpose() * &yc / 50.0).amax();
        let m = fit_lasso_fixed(&x, &y, lmax, &LassoConfig::default()).unwrap();
        assert_eq!(m.support_size(), 0);
        assert!((m.intercept - y.mean()).abs() < 1e-12);
        let m = fit_lasso_fixed(&x, &y, lmax * 0.99, &LassoConfig::default()).unwrap();
        assert_eq!(m.support_size(), 1);
    }

    #[test]
    fn kkt_conditions_hold() {
        let (x, y) = problem(80, 5, 3);
        let (xs, yc) = standardized(&x, &y);
        let lmax = (xs.transpose() * &yc / 80.0).amax();
        for frac in [0.5, 0.1, 0.01] {
            let lambda = frac * lmax;
            let m = fit_lasso_fixed(&x, &y, lambda, &LassoConfig::default()).unwrap();
            let sc = m.scaler.as_ref().unwrap();
            let r = &y - m.predict(&x).unwrap();
            let g = xs.transpose() * &r / 80.0;
            for j in 0..5 {
                let b_std = m.coefficients[j] * sc.sd[j];
                if b_std == 0.0 {
                    assert!(g[j].abs() <= lambda + 1e-6);
                } else {
                    assert!((g[j] - lambda * b_std.signum()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_column_gets_zero_weight() {
        let (mut x, y) = problem(40, 3, 4);
        x.column_mut(1).fill(2.5);
        let m = fit_lasso_fixed(&x, &y, 0.0, &LassoConfig::default()).unwrap();
        assert_eq!(m.coefficients[1], 0.0);
        assert!(m.scaler.unwrap().constant[1]);
    }

    #[test]
    fn cv_error_from_moments_matches_direct_evaluation() {
        let (x, y) = problem(45, 3, 5);
        let folds = make_folds(45, 3, 0).unwrap();
        let grid = [0.3, 0.1, 0.01];
        let cfg = LassoConfig::default();
        let cv = LassoCv::new(&x, &y, &folds).unwrap().cv_path(&grid, &cfg).unwrap();
        for (i, &lambda) in grid.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..3 {
                let tr = folds.rows_out(k);
                let te = folds.rows_in(k);
                let xt = crate::data::select_rows(&x, &tr);
                let yt = crate::data::select_entries(&y, &tr);
                let m = fit_lasso_fixed(&xt, &yt, lambda, &cfg).unwrap();
                let pred = m.predict(&crate::data::select_rows(&x, &te)).unwrap();
                let r = crate::data::select_entries(&y, &te) - pred;
                acc += r.dot(&r) / te.len() as f64;
            }
            assert!((acc / 3.0 - cv[i]).abs() < 1e-8, "{} vs {}", acc / 3.0, cv[i]);
        }
    }

    #[test]
    fn cv_is_deterministic_and_ties_go_large() {
        let (x, y) = problem(100, 4, 6);
        let a = fit_lasso_cv(&x, &y, &LassoConfig::default(), 3).unwrap();
        let b = fit_lasso_cv(&x, &y, &LassoConfig::default(), 3).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.model, b.model);
        assert_eq!(select_index(&[2.0, 1.0, 1.0, 3.0]), 1);
    }

    #[test]
    fn pure_noise_response_is_shrunk() {
        let mut rng = crate::rng::derive_rng(9, 77, 1);
        let x = DMatrix::from_fn(400, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(400, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = fit_lasso_cv(&x, &y, &LassoConfig::default(), 0).unwrap();
        assert!(fit.model.coefficients.amax() < 0.15);
    }

    #[test]
    fn leading_columns_match_a_narrow_fit() {
        let (x, y) = problem(60, 5, 8);
        let folds = make_folds(60, 4, 1).unwrap();
        let cfg = LassoConfig::default();
        let full = LassoCv::new(&x, &y, &folds).unwrap().leading(2).unwrap();
        let narrow = LassoCv::new(&x.columns(0, 2).into_owned(), &y, &folds).unwrap();
        let grid = [0.2, 0.05];
        let a = full.cv_path(&grid, &cfg).unwrap();
        let b = narrow.cv_path(&grid, &cfg).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let (x, y) = problem(20, 2, 9);
        let folds = make_folds(20, 2, 0).unwrap();
        let cfg = LassoConfig::default();
        assert!(fit_lasso(&x, &y, &[], &folds, &cfg).is_err());
        assert!(fit_lasso(&x, &y, &[0.1, 0.2], &folds, &cfg).is_err());
    }

    #[test]
    fn non_convergence_is_reported_with_iterate() {
        let (x, y) = problem(30, 3, 10);
        let cfg = LassoConfig {
            max_passes: 1,
            tol: 0.0,
            strict: true,
            ..LassoConfig::default()
        };
        match fit_lasso_fixed(&x, &y, 0.0, &cfg) {
            Err(CalmError::NonConvergence { coefficients, .. }) => assert_eq!(coefficients.len(), 3),
            other => panic!("expected non-convergence, got {other:?}"),
        }
        let lenient = LassoConfig { strict: false, ..cfg };
        assert!(fit_lasso_fixed(&x, &y, 0.0, &lenient).is_ok());
    }
}
