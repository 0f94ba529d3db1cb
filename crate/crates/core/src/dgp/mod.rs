//! Synthetic and semi-synthetic data-generating processes with their oracles.

mod baseline;
mod ihdp;
mod latent;

pub use baseline::{BaselineDgpConfig, BaselineOracle, OutcomeForm};
pub use ihdp::{bundled_ihdp_path, load_ihdp_semi_synthetic, IhdpConfig, IhdpOracle};
pub use latent::{gen_latent_nonlinear, CateForm, LatentDgpConfig, LatentOracle};

pub use baseline::gen_baseline;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, CovariateLayout, Dataset, Source};
use crate::error::{invalid, CalmError, Result};
use crate::rng::{derive_rng, stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Baseline,
    LatentNonlinear,
    Ihdp,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::LatentNonlinear => "latent",
            Regime::Ihdp => "ihdp",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = CalmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "latent" | "latent_nonlinear" => Ok(Regime::LatentNonlinear),
            "ihdp" => Ok(Regime::Ihdp),
            other => invalid(format!("unknown regime '{other}'")),
        }
    }
}

/// Any of the three generators with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum DgpConfig {
    Baseline(BaselineDgpConfig),
    Latent(LatentDgpConfig),
    Ihdp(IhdpConfig),
}

impl DgpConfig {
    pub fn regime(&self) -> Regime {
        match self {
            DgpConfig::Baseline(_) => Regime::Baseline,
            DgpConfig::Latent(_) => Regime::LatentNonlinear,
            DgpConfig::Ihdp(_) => Regime::Ihdp,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Generated> {
        match self {
            DgpConfig::Baseline(c) => gen_baseline(c, seed),
            DgpConfig::Latent(c) => gen_latent_nonlinear(c, seed),
            DgpConfig::Ihdp(c) => load_ihdp_semi_synthetic(c, seed),
        }
    }

    pub fn n_r(&self) -> usize {
        match self {
            DgpConfig::Baseline(c) => c.n_r,
            DgpConfig::Latent(c) => c.n_r,
            DgpConfig::Ihdp(c) => c.n_r,
        }
    }

    pub fn n_o(&self) -> usize {
        match self {
            DgpConfig::Baseline(c) => c.n_o,
            DgpConfig::Latent(c) => c.n_o,
            DgpConfig::Ihdp(c) => c.n_o,
        }
    }
}

/// A paired draw and the oracle that produced it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub os: Dataset,
    pub rct: Dataset,
    pub oracle: DgpOracle,
}

/// How the harness evaluates the true CATE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    Exact,
    MonteCarlo { draws: usize },
}

impl Default for TruthMode {
    fn default() -> Self {
        TruthMode::Exact
    }
}

/// Monte-Carlo CATE values with per-unit standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McCate {
    pub value: DVector<f64>,
    pub se: DVector<f64>,
}

/// Sealed generative parameters of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DgpOracle {
    Baseline(BaselineOracle),
    Latent(LatentOracle),
    Ihdp(IhdpOracle),
}

impl DgpOracle {
    pub fn regime(&self) -> Regime {
        match self {
            DgpOracle::Baseline(_) => Regime::Baseline,
            DgpOracle::Latent(_) => Regime::LatentNonlinear,
            DgpOracle::Ihdp(_) => Regime::Ihdp,
        }
    }

    pub fn layout(&self) -> CovariateLayout {
        match self {
            DgpOracle::Baseline(o) => o.layout,
            DgpOracle::Latent(o) => o.layout,
            DgpOracle::Ihdp(o) => o.layout,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DgpOracle::Baseline(o) => o.seed,
            DgpOracle::Latent(o) => o.seed,
            DgpOracle::Ihdp(o) => o.seed,
        }
    }

    /// Closed-form `E[Y(+1) − Y(−1) | X^r = x, S = r]` for every row of `x_r`.
    pub fn true_cate(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_xr(x_r)?;
        match self {
            DgpOracle::Baseline(o) => Ok(o.cate_exact(x_r)),
            DgpOracle::Latent(o) => Ok(o.cate_exact(x_r)),
            DgpOracle::Ihdp(o) => Ok(o.cate_exact(x_r)),
        }
    }

    /// `E[Y(a) | X^r = x, S = r]` for every row of `x_r`.
    pub fn outcome_mean(&self, arm: Arm, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_xr(x_r)?;
        match self {
            DgpOracle::Baseline(o) => Ok(o.outcome_mean(arm, x_r)),
            DgpOracle::Latent(o) => Ok(o.outcome_mean(arm, x_r)),
            DgpOracle::Ihdp(_) => Err(CalmError::Unsupported(
                "IHDP outcome means depend on the empirical law of V given X^r".into(),
            )),
        }
    }

    /// Mean and covariance of the Gaussian law of V given `X^r = x`.
    pub fn conditional_v(&self, x_r: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = DMatrix::from_row_slice(1, x_r.len(), x_r.as_slice());
        self.check_xr(&m)?;
        match self {
            DgpOracle::Baseline(o) => Ok(o.conditional_v(x_r)),
            DgpOracle::Latent(o) => Ok(o.conditional_v(x_r)),
            DgpOracle::Ihdp(_) => Err(CalmError::Unsupported(
                "the IHDP outcome model has no latent V law; its CATE is exact".into(),
            )),
        }
    }

    /// Draw `draws` values of V from its conditional law at `x_r`.
    pub fn sample_v(&self, x_r: &DVector<f64>, draws: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        let (mean, cov) = self.conditional_v(x_r)?;
        let root = psd_sqrt(&cov);
        let e = standard_normal_matrix(rng, draws, mean.len());
        Ok(shift_rows(&(e * root.transpose()), &mean))
    }

    /// CATE by averaging the integrand over draws of V | X^r.
    ///
    /// The same standard-normal draws are reused for every row (common random numbers).
    pub fn true_cate_mc(&self, x_r: &DMatrix<f64>, draws: usize, seed: u64) -> Result<McCate> {
        if draws == 0 {
            return invalid("Monte-Carlo truth needs at least one draw");
        }
        self.check_xr(x_r)?;
        if let DgpOracle::Ihdp(o) = self {
            let v = o.cate_exact(x_r);
            let se = DVector::zeros(v.len());
            return Ok(McCate { value: v, se });
        }
        let p_v = self.layout().p_v;
        let mut rng = derive_rng(seed, stage::TRUTH_MC, 0);
        let e = standard_normal_matrix(&mut rng, draws, p_v);
        let n = x_r.nrows();
        let mut value = DVector::zeros(n);
        let mut se = DVector::zeros(n);
        for i in 0..n {
            let row = x_r.row(i).transpose();
            let (mean, cov) = self.conditional_v(&row)?;
            let vs = shift_rows(&(&e * psd_sqrt(&cov).transpose()), &mean);
            let vals: Vec<f64> = (0..draws)
                .map(|k| {
                    let v = vs.row(k).transpose();
                    match self {
                        DgpOracle::Baseline(o) => o.effect_integrand(&row, &v),
                        DgpOracle::Latent(o) => o.effect_integrand(&v),
                        DgpOracle::Ihdp(_) => unreachable!(),
                    }
                })
                .collect();
            let (m, s) = mean_se(&vals);
            value[i] = m;
            se[i] = s;
        }
        Ok(McCate { value, se })
    }

    /// Truth for every RCT row under the requested mode.
    pub fn truth(&self, x_r: &DMatrix<f64>, mode: TruthMode, seed: u64) -> Result<DVector<f64>> {
        match mode {
            TruthMode::Exact => self.true_cate(x_r),
            TruthMode::MonteCarlo { draws } => Ok(self.true_cate_mc(x_r, draws, seed)?.value),
        }
    }

    fn check_xr(&self, x_r: &DMatrix<f64>) -> Result<()> {
        let p_r = self.layout().p_r();
        if x_r.ncols() != p_r {
            return invalid(format!("expected {p_r} RCT covariates, got {}", x_r.ncols()));
        }
        Ok(())
    }
}

pub(crate) fn standard_normal_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Rows with AR(1) correlation `rho^|i−j|` across columns, unit marginal variance.
pub(crate) fn ar1_rows(rng: &mut ChaCha8Rng, n: usize, p: usize, rho: f64) -> DMatrix<f64> {
    let mut z = standard_normal_matrix(rng, n, p);
    let s = (1.0 - rho * rho).sqrt();
    for j in 1..p {
        let prev = z.column(j - 1).into_owned();
        let mut col = z.column_mut(j);
        col *= s;
        col.axpy(rho, &prev, 1.0);
    }
    z
}

pub(crate) fn ar1_cov(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

pub(crate) fn unit_vector(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// OS treatment from a logistic model with coefficients `0.3·(−1)^j` on the first ten columns.
pub(crate) fn logistic_treatment(rng: &mut ChaCha8Rng, x_o: &DMatrix<f64>) -> Vec<Arm> {
    let k = x_o.ncols().min(10);
    (0..x_o.nrows())
        .map(|i| {
            let logit: f64 = (0..k)
                .map(|j| if j % 2 == 0 { 0.3 } else { -0.3 } * x_o[(i, j)])
                .sum();
            let p = 1.0 / (1.0 + (-logit).exp());
            if rng.gen::<f64>() < p {
                Arm::Treated
            } else {
                Arm::Control
            }
        })
        .collect()
}

pub(crate) fn randomized_treatment(rng: &mut ChaCha8Rng, n: usize, pi_treated: f64) -> Vec<Arm> {
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() < pi_treated {
                Arm::Treated
            } else {
                Arm::Control
            }
        })
        .collect()
}

fn shift_rows(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(mean[j]);
    }
    out
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clamped to 0).
pub(crate) fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub(crate) fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (m, 0.0);
    }
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub(crate) fn make_dataset(
    source: Source,
    x: DMatrix<f64>,
    a: Vec<Arm>,
    y: DVector<f64>,
    layout: CovariateLayout,
) -> Result<Dataset> {
    Dataset::new(source, x, a, y, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_lag_one_correlation() {
        let mut rng = derive_rng(1, 999, 0);
        let z = ar1_rows(&mut rng, 10_000, 6, 0.5);
        for j in 0..5 {
            let a = z.column(j);
            let b = z.column(j + 1);
            let r = a.dot(&b) / (a.norm() * b.norm());
            assert!((r - 0.5).abs() < 0.03, "lag-1 correlation {r}");
        }
        let v = z.column(3).variance();
        assert!((v - 1.0).abs() < 0.05);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&a);
        assert!((&r * &r - a).amax() < 1e-12);
        assert_eq!(psd_sqrt(&DMatrix::zeros(3, 3)), DMatrix::zeros(3, 3));
    }

    #[test]
    fn mean_se_hand_values() {
        let (m, s) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regime_round_trip() {
        for r in [Regime::Baseline, Regime::LatentNonlinear, Regime::Ihdp] {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
    }
}
