use nalgebra::{DMatrix, DVector};

use super::ArmPredictions;
use crate::data::{Arm, Dataset, PropensityModel};
use crate::error::{invalid, CalmError, Result};
use crate::linmod::{fit_lasso_cv, LassoConfig, LassoFit};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub psi: DVector<f64>,
    /// The augmentation evaluated at each unit.
    pub m: DVector<f64>,
}

/// `ψ_i = A_i (Y_i − m_i) / π_{A_i}(X_i)`.
pub fn pseudo_outcomes(rct: &Dataset, m: &DVector<f64>, pi: &PropensityModel) -> Result<PseudoOutcomes> {
    pi.validate()?;
    if m.len() != rct.n() {
        return invalid(format!("augmentation has {} values for {} units", m.len(), rct.n()));
    }
    let psi = DVector::from_fn(rct.n(), |i, _| {
        let a = rct.a[i];
        a.sign() * (rct.y[i] - m[i]) / pi.pi(a, i)
    });
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(CalmError::NonFinite("pseudo-outcomes".into()));
    }
    Ok(PseudoOutcomes { psi, m: m.clone() })
}

/// `m̂(x_i) = Σ_a π_{−a}(x_i) μ̂^cal_a(x_i)` for the RCT rows `rows` (used to index `π`).
pub fn cmo(preds: &ArmPredictions, pi: &PropensityModel, rows: &[usize]) -> Result<DVector<f64>> {
    let mu1 = preds.calibrated(Arm::Treated);
    let mu0 = preds.calibrated(Arm::Control);
    if mu1.len() != rows.len() || mu0.len() != rows.len() {
        return invalid("arm predictions and row indices differ in length");
    }
    Ok(DVector::from_fn(rows.len(), |k, _| {
        let i = rows[k];
        pi.pi(Arm::Control, i) * mu1[k] + pi.pi(Arm::Treated, i) * mu0[k]
    }))
}

/// LASSO of `ψ̂ − τ̃` on the raw RCT covariates.
pub fn fit_cate_correction(
    x_r: &DMatrix<f64>,
    psi: &DVector<f64>,
    tau_tilde: &DVector<f64>,
    cfg: &LassoConfig,
    seed: u64,
) -> Result<LassoFit> {
    if psi.len() != x_r.nrows() || tau_tilde.len() != x_r.nrows() {
        return invalid("pseudo-outcomes, preliminary effects and covariates differ in length");
    }
    fit_lasso_cv(x_r, &(psi - tau_tilde), cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateLayout, Source};

    fn tiny(a: Vec<Arm>, y: Vec<f64>) -> Dataset {
        let n = a.len();
        let layout = CovariateLayout::new(1, 0, 0).unwrap();
        Dataset::new(Source::Rct, DMatrix::zeros(n, 1), a, DVector::from_vec(y), layout).unwrap()
    }

    #[test]
    fn hand_values() {
        let ds = tiny(vec![Arm::Treated, Arm::Control], vec![2.0, 1.0]);
        let pi = PropensityModel::known(0.5).unwrap();
        let p = pseudo_outcomes(&ds, &DVector::from_vec(vec![0.5, 0.0]), &pi).unwrap();
        assert_eq!(p.psi.as_slice(), &[3.0, -2.0]);
    }

    #[test]
    fn cmo_hand_values() {
        let pi = PropensityModel::known(0.5).unwrap();
        let preds = ArmPredictions {
            base: [DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)],
            discrepancy: [DVector::zeros(1), DVector::zeros(1)],
        };
        assert_eq!(cmo(&preds, &pi, &[0]).unwrap()[0], 1.0);
        let skewed = PropensityModel::known(0.8).unwrap();
        let flat = ArmPredictions {
            base: [DVector::from_element(1, 0.7), DVector::from_element(1, 0.7)],
            discrepancy: [DVector::zeros(1), DVector::zeros(1)],
        };
        assert!((cmo(&flat, &skewed, &[0]).unwrap()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn bad_propensity_is_rejected() {
        let ds = tiny(vec![Arm::Treated], vec![1.0]);
        let bad = PropensityModel {
            kind: crate::data::PropensityKind::KnownConstant(1.0),
            rho: 0.01,
        };
        assert!(matches!(
            pseudo_outcomes(&ds, &DVector::zeros(1), &bad),
            Err(CalmError::Positivity(_))
        ));
    }
}
