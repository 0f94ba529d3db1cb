//! Penalized linear-model primitives shared by the calibration estimators.

mod lasso;
mod pca;

pub use lasso::{
    fit_lasso, fit_lasso_cv, fit_lasso_fixed, lasso_grid, LassoConfig, LassoCv, LassoFit,
};
pub use pca::{build_rct_encoder_linear, fit_pca, Projection};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ScalerParams;
use crate::error::{invalid, CalmError, Result};

/// `y ≈ intercept + x · coefficients`, with coefficients on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: DVector<f64>,
    /// Scaling of the training features (the fit itself runs on standardized columns).
    pub scaler: Option<ScalerParams>,
    pub penalty: f64,
}

impl LinearModel {
    pub fn constant(value: f64, p: usize) -> Self {
        Self {
            intercept: value,
            coefficients: DVector::zeros(p),
            scaler: None,
            penalty: f64::INFINITY,
        }
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.n_features() {
            return invalid(format!(
                "model has {} features, input has {} columns",
                self.n_features(),
                x.ncols()
            ));
        }
        let mut out = x * &self.coefficients;
        out.add_scalar_mut(self.intercept);
        Ok(out)
    }

    /// Number of nonzero coefficients.
    pub fn support_size(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }
}

/// Ordinary least squares with an unpenalized intercept.
pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearModel> {
    let (n, p) = x.shape();
    if y.len() != n {
        return invalid("x and y row counts differ");
    }
    if n <= p {
        return invalid(format!("OLS needs n > p, got n = {n}, p = {p}"));
    }
    let x_mean = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let y_mean = y.mean();
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-x_mean[j]);
    }
    let yc = y.add_scalar(-y_mean);

    let qr = xc.qr();
    let r = qr.r();
    let max_diag = r.diagonal().abs().max();
    if max_diag == 0.0 || r.diagonal().iter().any(|d| d.abs() < 1e-10 * max_diag) {
        return Err(CalmError::Singular("design matrix is rank deficient".into()));
    }
    let qty = qr.q().transpose() * yc;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| CalmError::Singular("triangular solve failed".into()))?;
    let intercept = y_mean - x_mean.dot(&beta);
    Ok(LinearModel {
        intercept,
        coefficients: beta,
        scaler: None,
        penalty: 0.0,
    })
}

/// Several linear outputs sharing one design: `Y ≈ 1 · interceptsᵀ + X · coefficients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLinearModel {
    pub intercepts: DVector<f64>,
    /// `p × q`, one column per output.
    pub coefficients: DMatrix<f64>,
    pub alpha: f64,
}

impl MultiLinearModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.coefficients.nrows() {
            return invalid(format!(
                "model has {} inputs, got {} columns",
                self.coefficients.nrows(),
                x.ncols()
            ));
        }
        let mut out = x * &self.coefficients;
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.intercepts[j]);
        }
        Ok(out)
    }
}

/// Ridge for every output column: `(XcᵀXc + n·alpha·I) B = XcᵀYc` on centered data.
pub fn fit_ridge_multi(x: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> Result<MultiLinearModel> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return invalid("x and y row counts differ");
    }
    if !(alpha >= 0.0) {
        return invalid(format!("ridge strength must be >= 0, got {alpha}"));
    }
    if n == 0 {
        return invalid("cannot fit ridge on zero rows");
    }
    let x_mean = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let y_mean = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.mean()));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-x_mean[j]);
    }
    let mut yc = y.clone();
    for (j, mut col) in yc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-y_mean[j]);
    }
    let xt = xc.transpose();
    let mut gram = &xt * &xc;
    for j in 0..p {
        gram[(j, j)] += n as f64 * alpha;
    }
    let rhs = &xt * &yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| CalmError::Singular("ridge normal equations are not positive definite".into()))?;
    let coefficients = chol.solve(&rhs);
    let intercepts = &y_mean - coefficients.transpose() * &x_mean;
    Ok(MultiLinearModel {
        intercepts,
        coefficients,
        alpha,
    })
}

/// Conditional-mean imputer `Z ↦ E[V | Z]` fitted by ridge on observational rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub model: MultiLinearModel,
}

impl Imputer {
    pub fn fit(z: &DMatrix<f64>, v: &DMatrix<f64>, alpha: f64) -> Result<Self> {
        Ok(Self {
            model: fit_ridge_multi(z, v, alpha)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.model.coefficients.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.model.coefficients.ncols()
    }

    pub fn impute(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.model.predict(z)
    }

    /// The estimated `p_v × p_z` loading matrix.
    pub fn lambda_hat(&self) -> DMatrix<f64> {
        self.model.coefficients.transpose()
    }
}
