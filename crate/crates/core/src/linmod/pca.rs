use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Imputer;
use crate::data::CovariateLayout;
use crate::error::{invalid, Result};

/// Affine map `x ↦ W (x − center) + bias` with `W` of shape `d × p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub w: DMatrix<f64>,
    pub center: DVector<f64>,
    pub bias: DVector<f64>,
    /// Variance captured by each row (PCA only; empty otherwise).
    pub explained_variance: Vec<f64>,
}

impl Projection {
    pub fn identity(p: usize) -> Self {
        Self {
            w: DMatrix::identity(p, p),
            center: DVector::zeros(p),
            bias: DVector::zeros(p),
            explained_variance: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Rows of `x` mapped to `n × d` embeddings.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return invalid(format!(
                "projection expects {} columns, got {}",
                self.input_dim(),
                x.ncols()
            ));
        }
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.center[j]);
        }
        let mut out = xc * self.w.transpose();
        for (k, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[k]);
        }
        Ok(out)
    }

    /// The first `d` output coordinates.
    pub fn leading(&self, d: usize) -> Result<Self> {
        if d == 0 || d > self.dim() {
            return invalid(format!("cannot keep {d} of {} directions", self.dim()));
        }
        Ok(Self {
            w: self.w.rows(0, d).into_owned(),
            center: self.center.clone(),
            bias: self.bias.rows(0, d).into_owned(),
            explained_variance: self.explained_variance.iter().take(d).copied().collect(),
        })
    }
}

/// Top-`d` principal directions of the centered data (covariance with a 1/n factor).
pub fn fit_pca(x: &DMatrix<f64>, d: usize) -> Result<Projection> {
    let (n, p) = x.shape();
    if d == 0 || d > p {
        return invalid(format!("need 1 <= d <= {p}, got {d}"));
    }
    if n < 2 {
        return invalid("PCA needs at least 2 rows");
    }
    let center = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-center[j]);
    }
    let mut cov = xc.transpose() * &xc / n as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] > 1e-12 * top.max(f64::MIN_POSITIVE))
        .count()
        .max(1);
    let d_eff = if d > rank {
        warn!("requested {d} components but the data has rank {rank}; using {rank}");
        rank
    } else {
        d
    };
    let mut w = DMatrix::zeros(d_eff, p);
    let mut explained = Vec::with_capacity(d_eff);
    for (r, &k) in order.iter().take(d_eff).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // Fix the sign so the largest-magnitude loading is positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        w.row_mut(r).copy_from(&v.transpose());
        explained.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(Projection {
        w,
        center,
        bias: DVector::zeros(d_eff),
        explained_variance: explained,
    })
}

/// RCT-side encoder `(u, z) ↦ W^o((z, ĝ(z)) − center) + bias` as a single affine map over `X^r`.
///
/// The U columns get zero weight; the imputer's loadings are folded into the Z block.
pub fn build_rct_encoder_linear(
    w_o: &Projection,
    imputer: &Imputer,
    layout: &CovariateLayout,
) -> Result<Projection> {
    let (p_z, p_u, p_v) = (layout.p_z, layout.p_u, layout.p_v);
    if w_o.input_dim() != layout.p_o() {
        return invalid(format!(
            "OS projection takes {} inputs but the layout has p_o = {}",
            w_o.input_dim(),
            layout.p_o()
        ));
    }
    if imputer.input_dim() != p_z || imputer.output_dim() != p_v {
        return invalid(format!(
            "imputer maps {} -> {}, layout needs {p_z} -> {p_v}",
            imputer.input_dim(),
            imputer.output_dim()
        ));
    }
    let d = w_o.dim();
    let w_z = w_o.w.columns(0, p_z);
    let w_v = w_o.w.columns(p_z, p_v);
    let lambda = imputer.lambda_hat();
    let mut w = DMatrix::zeros(d, layout.p_r());
    let z_block = &w_z + &w_v * &lambda;
    w.columns_mut(p_u, p_z).copy_from(&z_block);
    let bias = &w_v * &imputer.model.intercepts - &w_o.w * &w_o.center + &w_o.bias;
    Ok(Projection {
        w,
        center: DVector::zeros(layout.p_r()),
        bias,
        explained_variance: w_o.explained_variance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmod::MultiLinearModel;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::derive_rng(seed, 55, 0);
        DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn rank_one_line() {
        let t = gaussian(100, 1, 1);
        let x = DMatrix::from_fn(100, 2, |i, j| t[i] * if j == 0 { 3.0 } else { 4.0 } + 1.0);
        let proj = fit_pca(&x, 1).unwrap();
        let cos = (proj.w[(0, 0)] * 3.0 + proj.w[(0, 1)] * 4.0).abs() / 5.0;
        assert!(cos > 1.0 - 1e-8);
        // Asking for more directions than the rank falls back to the rank.
        assert_eq!(fit_pca(&x, 2).unwrap().dim(), 1);
    }

    #[test]
    fn full_rank_rows_orthonormal_and_scores_uncorrelated() {
        let x = gaussian(500, 4, 2);
        let proj = fit_pca(&x, 4).unwrap();
        let wwt = &proj.w * proj.w.transpose();
        assert!((wwt - DMatrix::identity(4, 4)).amax() < 1e-8);
        let s = proj.apply(&x).unwrap();
        let cov = s.transpose() * &s / 500.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(cov[(i, j)].abs() < 1e-8);
                }
            }
        }
        assert!(proj.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn reconstruction_error_is_discarded_spectrum() {
        // Columns with variances {4, 1, 0.25} after exact whitening of a Gaussian draw.
        let raw = gaussian(300, 3, 3);
        let mut c = raw.clone();
        for (j, mut col) in c.column_iter_mut().enumerate() {
            let m = raw.column(j).mean();
            col.add_scalar_mut(-m);
        }
        let cov = c.transpose() * &c / 300.0;
        let l = cov.cholesky().unwrap().l();
        let white = c * l.try_inverse().unwrap().transpose();
        let scales = [2.0, 1.0, 0.5];
        let rot = fit_pca(&gaussian(50, 3, 4), 3).unwrap().w;
        let x = DMatrix::from_fn(300, 3, |i, j| white[(i, j)] * scales[j]) * rot;
        let proj = fit_pca(&x, 1).unwrap();
        let s = proj.apply(&x).unwrap();
        let recon = &s * &proj.w;
        let mut err = 0.0;
        for i in 0..300 {
            for j in 0..3 {
                err += (x[(i, j)] - proj.center[j] - recon[(i, j)]).powi(2);
            }
        }
        assert!((err / 300.0 - 1.25).abs() < 1e-8);
    }

    fn layout_and_imputer() -> (CovariateLayout, Imputer) {
        let layout = CovariateLayout::new(2, 1, 3).unwrap();
        let coefficients = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.0, 1.5]);
        let imputer = Imputer {
            model: MultiLinearModel {
                intercepts: DVector::from_column_slice(&[0.1, 0.2, -0.3]),
                coefficients,
                alpha: 0.0,
            },
        };
        (layout, imputer)
    }

    #[test]
    fn encoder_equals_impute_then_project() {
        let (layout, imputer) = layout_and_imputer();
        let os = gaussian(40, 5, 5);
        let w_o = fit_pca(&os, 3).unwrap();
        let enc = build_rct_encoder_linear(&w_o, &imputer, &layout).unwrap();
        let xr = gaussian(20, 3, 6);
        let z = xr.columns(1, 2).into_owned();
        let v = imputer.impute(&z).unwrap();
        let xo = crate::data::hcat(&z, &v);
        let direct = w_o.apply(&xo).unwrap();
        let folded = enc.apply(&xr).unwrap();
        assert!((direct - folded).amax() < 1e-12);
        assert!(enc.w.column(0).amax() == 0.0);
    }

    #[test]
    fn identity_projection_gives_imputed_features() {
        let (layout, imputer) = layout_and_imputer();
        let enc = build_rct_encoder_linear(&Projection::identity(5), &imputer, &layout).unwrap();
        let xr = gaussian(10, 3, 7);
        let out = enc.apply(&xr).unwrap();
        let z = xr.columns(1, 2).into_owned();
        let expected = crate::data::hcat(&z, &imputer.impute(&z).unwrap());
        assert!((out - expected).amax() < 1e-12);
    }

    #[test]
    fn zero_imputer_uses_z_block_only() {
        let (layout, mut imputer) = layout_and_imputer();
        imputer.model.coefficients.fill(0.0);
        imputer.model.intercepts.fill(0.0);
        let w_o = Projection {
            w: DMatrix::from_fn(2, 5, |i, j| (i * 5 + j) as f64),
            center: DVector::zeros(5),
            bias: DVector::zeros(2),
            explained_variance: Vec::new(),
        };
        let enc = build_rct_encoder_linear(&w_o, &imputer, &layout).unwrap();
        assert_eq!(enc.w.columns(1, 2).into_owned(), w_o.w.columns(0, 2).into_owned());
    }

    #[test]
    fn encoder_dimension_mismatch() {
        let (layout, imputer) = layout_and_imputer();
        assert!(build_rct_encoder_linear(&Projection::identity(4), &imputer, &layout).is_err());
    }
}
