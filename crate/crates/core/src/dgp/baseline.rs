use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    ar1_cov, ar1_rows, logistic_treatment, make_dataset, randomized_treatment,
    standard_normal_matrix, unit_vector, Generated, DgpOracle,
};
use crate::data::{hcat, Arm, CovariateLayout, Source};
use crate::error::{invalid, Result};
use crate::rng::{derive_rng, stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeForm {
    Linear,
    Quadratic,
    Sinusoidal,
}

impl OutcomeForm {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeForm::Linear => "linear",
            OutcomeForm::Quadratic => "quadratic",
            OutcomeForm::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OutcomeForm::Linear),
            "quadratic" => Ok(OutcomeForm::Quadratic),
            "sinusoidal" | "sin" => Ok(OutcomeForm::Sinusoidal),
            other => invalid(format!("unknown outcome form '{other}'")),
        }
    }
}

/// Linear-CATE regime: AR(1) shared block, linear-Gaussian mismatch blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineDgpConfig {
    pub p_z: usize,
    pub p_u: usize,
    pub p_v: usize,
    pub d_true: usize,
    pub rho_ar: f64,
    pub sigma_v2: f64,
    pub sigma_u2: f64,
    pub outcome_form: OutcomeForm,
    pub shift_magnitude: f64,
    pub n_r: usize,
    pub n_o: usize,
    /// When set, `p_z / (p_z + p_v)` with `p_z + p_v` held at its configured total.
    pub shared_proportion: Option<f64>,
    pub noise_sd: f64,
    pub pi_treated: f64,
}

impl Default for BaselineDgpConfig {
    fn default() -> Self {
        Self {
            p_z: 30,
            p_u: 10,
            p_v: 20,
            d_true: 5,
            rho_ar: 0.5,
            sigma_v2: 1.0,
            sigma_u2: 1.0,
            outcome_form: OutcomeForm::Linear,
            shift_magnitude: 0.5,
            n_r: 500,
            n_o: 10_000,
            shared_proportion: None,
            noise_sd: 1.0,
            pi_treated: 0.5,
        }
    }
}

impl BaselineDgpConfig {
    /// Block sizes after applying the shared-proportion override.
    pub fn layout(&self) -> Result<CovariateLayout> {
        let (p_z, p_v) = match self.shared_proportion {
            None => (self.p_z, self.p_v),
            Some(q) => {
                if !(q > 0.0 && q <= 1.0) {
                    return invalid(format!("shared proportion must be in (0, 1], got {q}"));
                }
                let total = self.p_z + self.p_v;
                let p_z = ((q * total as f64).round() as usize).clamp(1, total);
                (p_z, total - p_z)
            }
        };
        CovariateLayout::new(p_z, self.p_u, p_v)
    }

    pub fn validate(&self) -> Result<CovariateLayout> {
        let layout = self.layout()?;
        if self.d_true == 0 || self.d_true > layout.p() {
            return invalid(format!("d_true must be in [1, {}], got {}", layout.p(), self.d_true));
        }
        if !(self.sigma_v2 >= 0.0 && self.sigma_u2 >= 0.0 && self.noise_sd >= 0.0) {
            return invalid("variances must be non-negative");
        }
        if !(self.shift_magnitude >= 0.0) {
            return invalid("shift magnitude must be non-negative");
        }
        if !(self.rho_ar.abs() < 1.0) {
            return invalid("AR(1) coefficient must lie in (-1, 1)");
        }
        if !(self.pi_treated > 0.0 && self.pi_treated < 1.0) {
            return invalid("RCT treatment probability must lie in (0, 1)");
        }
        if self.n_r < 4 || self.n_o < 4 {
            return invalid("both sources need at least 4 units");
        }
        Ok(layout)
    }
}

/// Coefficients of one baseline replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOracle {
    pub config: BaselineDgpConfig,
    pub seed: u64,
    pub layout: CovariateLayout,
    /// `p_v × p_z`.
    pub lambda_vz: DMatrix<f64>,
    /// `p_u × p_z`.
    pub lambda_uz: DMatrix<f64>,
    /// `d_true × p` over the full `(U, Z, V)` vector.
    pub projection: DMatrix<f64>,
    pub beta_b: DVector<f64>,
    pub beta_e: DVector<f64>,
    /// Unit direction over the shared block used by the RCT shift.
    pub eta: DVector<f64>,
    /// Population sd of `η·Z`.
    pub eta_sd: f64,
}

impl BaselineOracle {
    fn g(&self, t: &[f64]) -> f64 {
        let lin: f64 = self.beta_e.iter().zip(t).map(|(b, x)| b * x).sum();
        match self.config.outcome_form {
            OutcomeForm::Linear => lin,
            OutcomeForm::Quadratic => {
                let t1 = t[0];
                let t2 = if t.len() > 1 { t[1] } else { 0.0 };
                lin + 0.3 * (t1 * t2 + t1 * t1 - 1.0)
            }
            OutcomeForm::Sinusoidal => lin.sin(),
        }
    }

    /// RCT-only level shift, identical for both arms.
    fn shift(&self, z: &[f64]) -> f64 {
        if self.config.shift_magnitude == 0.0 {
            return 0.0;
        }
        let s: f64 = self.eta.iter().zip(z).map(|(e, x)| e * x).sum();
        self.config.shift_magnitude * s / self.eta_sd
    }

    fn split_xr<'a>(&self, x_r: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x_r.split_at(self.layout.p_u)
    }

    /// Mean and covariance of `t = P x` given `x^r`.
    fn t_law(&self, x_r: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let (u, z) = self.split_xr(x_r);
        let z = DVector::from_column_slice(z);
        let v_mean = &self.lambda_vz * &z;
        let mut full = DVector::zeros(self.layout.p());
        full.rows_mut(0, self.layout.p_u).copy_from_slice(u);
        full.rows_mut(self.layout.p_u, self.layout.p_z).copy_from(&z);
        full.rows_mut(self.layout.p_r(), self.layout.p_v).copy_from(&v_mean);
        let mean = &self.projection * full;
        let p_v_block = self.projection.columns(self.layout.p_r(), self.layout.p_v);
        let cov = &p_v_block * p_v_block.transpose() * self.config.sigma_v2;
        (mean, cov)
    }

    fn expected_g(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let lin = self.beta_e.dot(mean);
        match self.config.outcome_form {
            OutcomeForm::Linear => lin,
            OutcomeForm::Quadratic => {
                let t1t1 = mean[0] * mean[0] + cov[(0, 0)];
                let t1t2 = if mean.len() > 1 { mean[0] * mean[1] + cov[(0, 1)] } else { 0.0 };
                lin + 0.3 * (t1t2 + t1t1 - 1.0)
            }
            OutcomeForm::Sinusoidal => {
                let var = self.beta_e.dot(&(cov * &self.beta_e));
                lin.sin() * (-0.5 * var).exp()
            }
        }
    }

    pub(super) fn cate_exact(&self, x_r: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x_r.nrows(), |i, _| {
            let row: Vec<f64> = x_r.row(i).iter().copied().collect();
            let (m, c) = self.t_law(&row);
            2.0 * self.expected_g(&m, &c)
        })
    }

    pub(super) fn outcome_mean(&self, arm: Arm, x_r: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x_r.nrows(), |i, _| {
            let row: Vec<f64> = x_r.row(i).iter().copied().collect();
            let (m, c) = self.t_law(&row);
            let (_, z) = self.split_xr(&row);
            self.beta_b.dot(&m) + arm.sign() * self.expected_g(&m, &c) + self.shift(z)
        })
    }

    pub(super) fn conditional_v(&self, x_r: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let z = x_r.rows(self.layout.p_u, self.layout.p_z);
        let mean = &self.lambda_vz * z;
        let cov = DMatrix::identity(self.layout.p_v, self.layout.p_v) * self.config.sigma_v2;
        (mean, cov)
    }

    /// `Y(+1) − Y(−1)` at a full covariate vector.
    pub(super) fn effect_integrand(&self, x_r: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut full = DVector::zeros(self.layout.p());
        full.rows_mut(0, self.layout.p_r()).copy_from(x_r);
        full.rows_mut(self.layout.p_r(), self.layout.p_v).copy_from(v);
        let t = &self.projection * full;
        2.0 * self.g(t.as_slice())
    }

    /// Regenerate the paired datasets bit-identically.
    pub fn regenerate(&self) -> Result<Generated> {
        gen_baseline(&self.config, self.seed)
    }
}

struct Draw {
    x_r: DMatrix<f64>,
    x_o: DMatrix<f64>,
    t: DMatrix<f64>,
    z: DMatrix<f64>,
}

fn draw_covariates(o: &BaselineOracle, rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Draw {
    let l = &o.layout;
    let cfg = &o.config;
    let z = ar1_rows(rng, n, l.p_z, cfg.rho_ar);
    let e_u = standard_normal_matrix(rng, n, l.p_u);
    let e_v = standard_normal_matrix(rng, n, l.p_v);
    let u = &z * o.lambda_uz.transpose() + e_u * cfg.sigma_u2.sqrt();
    let v = &z * o.lambda_vz.transpose() + e_v * cfg.sigma_v2.sqrt();
    let x_r = hcat(&u, &z);
    let x_o = hcat(&z, &v);
    let full = hcat(&x_r, &v);
    let t = full * o.projection.transpose();
    Draw { x_r, x_o, t, z }
}

fn outcomes(
    o: &BaselineOracle,
    rng: &mut rand_chacha::ChaCha8Rng,
    d: &Draw,
    a: &[Arm],
    shifted: bool,
) -> DVector<f64> {
    let eps = standard_normal_matrix(rng, a.len(), 1);
    DVector::from_fn(a.len(), |i, _| {
        let t: Vec<f64> = d.t.row(i).iter().copied().collect();
        let lin_b: f64 = o.beta_b.iter().zip(&t).map(|(b, x)| b * x).sum();
        let z: Vec<f64> = d.z.row(i).iter().copied().collect();
        let delta = if shifted { o.shift(&z) } else { 0.0 };
        lin_b + a[i].sign() * o.g(&t) + delta + o.config.noise_sd * eps[(i, 0)]
    })
}

/// Paired OS/RCT draw for the linear-CATE regime.
pub fn gen_baseline(cfg: &BaselineDgpConfig, seed: u64) -> Result<Generated> {
    let layout = cfg.validate()?;
    let mut prng = derive_rng(seed, stage::DGP_PARAMS, 0);
    let sd = (1.0 / layout.p_z as f64).sqrt();
    let lambda_vz = standard_normal_matrix(&mut prng, layout.p_v, layout.p_z) * sd;
    let lambda_uz = standard_normal_matrix(&mut prng, layout.p_u, layout.p_z) * sd;
    let gauss = standard_normal_matrix(&mut prng, layout.p(), cfg.d_true);
    let q = gauss.qr().q();
    let projection = q.transpose();
    let beta_b = unit_vector(&mut prng, cfg.d_true) * 2.0;
    let beta_e = unit_vector(&mut prng, cfg.d_true);
    let k = layout.p_z.min(5);
    let mut eta = DVector::zeros(layout.p_z);
    eta.rows_mut(0, k).fill(1.0 / (k as f64).sqrt());
    let eta_sd = eta.dot(&(ar1_cov(layout.p_z, cfg.rho_ar) * &eta)).sqrt();

    let oracle = BaselineOracle {
        config: cfg.clone(),
        seed,
        layout,
        lambda_vz,
        lambda_uz,
        projection,
        beta_b,
        beta_e,
        eta,
        eta_sd,
    };

    let mut orng = derive_rng(seed, stage::DGP_OS, 0);
    let od = draw_covariates(&oracle, &mut orng, cfg.n_o);
    let oa = logistic_treatment(&mut orng, &od.x_o);
    let oy = outcomes(&oracle, &mut orng, &od, &oa, false);

    let mut rrng = derive_rng(seed, stage::DGP_RCT, 0);
    let rd = draw_covariates(&oracle, &mut rrng, cfg.n_r);
    let ra = randomized_treatment(&mut rrng, cfg.n_r, cfg.pi_treated);
    let ry = outcomes(&oracle, &mut rrng, &rd, &ra, true);

    let os = make_dataset(Source::Os, od.x_o, oa, oy, layout)?;
    let rct = make_dataset(Source::Rct, rd.x_r, ra, ry, layout)?;
    Ok(Generated {
        os,
        rct,
        oracle: DgpOracle::Baseline(oracle),
    })
}
