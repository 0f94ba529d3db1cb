use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{
    ar1_rows, logistic_treatment, make_dataset, randomized_treatment, standard_normal_matrix,
    unit_vector, DgpOracle, Generated,
};
use crate::data::{hcat, Arm, CovariateLayout, Source};
use crate::error::{invalid, CalmError, Result};
use crate::rng::{derive_rng, stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CateForm {
    Sin { omega: f64 },
    Abs,
    Quad,
}

impl CateForm {
    pub fn name(&self) -> &'static str {
        match self {
            CateForm::Sin { .. } => "sin",
            CateForm::Abs => "abs",
            CateForm::Quad => "quad",
        }
    }

    /// Default multiplier on the standardized index.
    pub fn default_scale(&self) -> f64 {
        match self {
            CateForm::Sin { .. } => 2.0,
            CateForm::Abs => 2.0,
            CateForm::Quad => 1.0,
        }
    }
}

/// Nonlinear-CATE regime where U and V share a low-dimensional latent factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentDgpConfig {
    pub p_z: usize,
    pub p_u: usize,
    pub p_v: usize,
    pub latent_dim: usize,
    pub latent_scale_v: f64,
    pub alpha_u: f64,
    pub sigma_v2: f64,
    pub sigma_u2: f64,
    pub rho_ar: f64,
    pub w_z: f64,
    pub w_u: f64,
    pub w_v: f64,
    pub cate_form: CateForm,
    /// Overrides the form's default multiplier when set.
    pub cate_scale: Option<f64>,
    pub n_r: usize,
    pub n_o: usize,
    pub noise_sd: f64,
    pub pi_treated: f64,
}

impl Default for LatentDgpConfig {
    fn default() -> Self {
        Self {
            p_z: 30,
            p_u: 10,
            p_v: 20,
            latent_dim: 5,
            latent_scale_v: 2.0,
            alpha_u: 2.0,
            sigma_v2: 0.1,
            sigma_u2: 0.1,
            rho_ar: 0.5,
            w_z: 0.0,
            w_u: 0.0,
            w_v: 2.0,
            cate_form: CateForm::Sin { omega: 1.5 },
            cate_scale: None,
            n_r: 500,
            n_o: 10_000,
            noise_sd: 1.0,
            pi_treated: 0.5,
        }
    }
}

impl LatentDgpConfig {
    pub fn validate(&self) -> Result<CovariateLayout> {
        let layout = CovariateLayout::new(self.p_z, self.p_u, self.p_v)?;
        if self.p_u == 0 || self.p_v == 0 {
            return invalid("the latent regime needs non-empty U and V blocks");
        }
        if self.latent_dim == 0 {
            return invalid("latent_dim must be at least 1");
        }
        if self.w_z < 0.0 || self.w_u < 0.0 || self.w_v < 0.0 {
            return invalid("signal weights must be non-negative");
        }
        if !(self.sigma_v2 >= 0.0 && self.sigma_u2 > 0.0 && self.noise_sd >= 0.0) {
            return invalid("sigma_u2 must be positive and the other variances non-negative");
        }
        if self.alpha_u < 0.0 || self.latent_scale_v < 0.0 {
            return invalid("latent scales must be non-negative");
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

    pub fn scale(&self) -> f64 {
        self.cate_scale.unwrap_or_else(|| self.cate_form.default_scale())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentOracle {
    pub config: LatentDgpConfig,
    pub seed: u64,
    pub layout: CovariateLayout,
    /// `p_v × latent_dim`.
    pub b_v: DMatrix<f64>,
    /// `p_u × latent_dim`.
    pub b_u: DMatrix<f64>,
    pub beta_z: DVector<f64>,
    pub beta_u: DVector<f64>,
    pub beta_v: DVector<f64>,
    pub beta_tau: DVector<f64>,
    /// Population sd of `β_τ·V`.
    pub index_sd: f64,
    /// Posterior covariance of H given U (does not depend on u).
    pub h_cov: DMatrix<f64>,
    /// `h_mean = h_gain · u`.
    pub h_gain: DMatrix<f64>,
}

impl LatentOracle {
    fn tau_form(&self, s: f64) -> f64 {
        let c = self.config.scale();
        match self.config.cate_form {
            CateForm::Sin { omega } => c * (omega * s).sin(),
            CateForm::Abs => c * s.abs(),
            CateForm::Quad => c * s * s,
        }
    }

    /// `E[τ_form(s)]` for `s ~ N(m, v)`.
    fn expected_tau(&self, m: f64, v: f64) -> f64 {
        let c = self.config.scale();
        match self.config.cate_form {
            CateForm::Sin { omega } => c * (omega * m).sin() * (-0.5 * omega * omega * v).exp(),
            CateForm::Abs => {
                if v <= 0.0 {
                    return c * m.abs();
                }
                let sd = v.sqrt();
                // Folded-normal mean; Φ(−x) = erfc(x/√2)/2.
                let tail = erfc(m / (sd * std::f64::consts::SQRT_2)) * 0.5;
                c * (sd * (2.0 / std::f64::consts::PI).sqrt() * (-m * m / (2.0 * v)).exp()
                    + m * (1.0 - 2.0 * tail))
            }
            CateForm::Quad => c * (m * m + v),
        }
    }

    pub(super) fn conditional_v(&self, x_r: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let u = x_r.rows(0, self.layout.p_u);
        let h_mean = &self.h_gain * u;
        let s = self.config.latent_scale_v;
        let mean = &self.b_v * h_mean * s;
        let cov = &self.b_v * &self.h_cov * self.b_v.transpose() * (s * s)
            + DMatrix::identity(self.layout.p_v, self.layout.p_v) * self.config.sigma_v2;
        (mean, cov)
    }

    fn index_law(&self, x_r: &DVector<f64>) -> (f64, f64) {
        let (mean, cov) = self.conditional_v(x_r);
        let m = self.beta_tau.dot(&mean) / self.index_sd;
        let v = self.beta_tau.dot(&(cov * &self.beta_tau)) / (self.index_sd * self.index_sd);
        (m, v)
    }

    pub(super) fn cate_exact(&self, x_r: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x_r.nrows(), |i, _| {
            let (m, v) = self.index_law(&x_r.row(i).transpose());
            self.expected_tau(m, v)
        })
    }

    pub(super) fn outcome_mean(&self, arm: Arm, x_r: &DMatrix<f64>) -> DVector<f64> {
        let c = &self.config;
        let p_u = self.layout.p_u;
        DVector::from_fn(x_r.nrows(), |i, _| {
            let row = x_r.row(i).transpose();
            let (v_mean, _) = self.conditional_v(&row);
            let (m, v) = self.index_law(&row);
            let u = row.rows(0, p_u);
            let z = row.rows(p_u, self.layout.p_z);
            c.w_z * self.beta_z.dot(&z)
                + c.w_u * self.beta_u.dot(&u)
                + c.w_v * self.beta_v.dot(&v_mean)
                + 0.5 * arm.sign() * self.expected_tau(m, v)
        })
    }

    pub(super) fn effect_integrand(&self, v: &DVector<f64>) -> f64 {
        self.tau_form(self.beta_tau.dot(v) / self.index_sd)
    }

    pub fn regenerate(&self) -> Result<Generated> {
        gen_latent_nonlinear(&self.config, self.seed)
    }
}

fn draw(
    o: &LatentOracle,
    rng: &mut rand_chacha::ChaCha8Rng,
    n: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let c = &o.config;
    let l = &o.layout;
    let h = standard_normal_matrix(rng, n, c.latent_dim);
    let z = ar1_rows(rng, n, l.p_z, c.rho_ar);
    let e_u = standard_normal_matrix(rng, n, l.p_u);
    let e_v = standard_normal_matrix(rng, n, l.p_v);
    let u = &h * o.b_u.transpose() * c.alpha_u + e_u * c.sigma_u2.sqrt();
    let v = &h * o.b_v.transpose() * c.latent_scale_v + e_v * c.sigma_v2.sqrt();
    (z, u, v)
}

fn outcomes(
    o: &LatentOracle,
    rng: &mut rand_chacha::ChaCha8Rng,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    a: &[Arm],
) -> DVector<f64> {
    let c = &o.config;
    let eps = standard_normal_matrix(rng, a.len(), 1);
    let main = z * &o.beta_z * c.w_z + u * &o.beta_u * c.w_u + v * &o.beta_v * c.w_v;
    DVector::from_fn(a.len(), |i, _| {
        let s = v.row(i).transpose();
        main[i] + 0.5 * a[i].sign() * o.effect_integrand(&s) + c.noise_sd * eps[(i, 0)]
    })
}

/// Paired OS/RCT draw for the shared-latent nonlinear-CATE regime.
pub fn gen_latent_nonlinear(cfg: &LatentDgpConfig, seed: u64) -> Result<Generated> {
    let layout = cfg.validate()?;
    let k = cfg.latent_dim;
    let mut prng = derive_rng(seed, stage::DGP_PARAMS, 0);
    let sd = (1.0 / k as f64).sqrt();
    let b_v = standard_normal_matrix(&mut prng, layout.p_v, k) * sd;
    let b_u = standard_normal_matrix(&mut prng, layout.p_u, k) * sd;
    let beta_z = unit_vector(&mut prng, layout.p_z);
    let beta_u = unit_vector(&mut prng, layout.p_u);
    let beta_v = unit_vector(&mut prng, layout.p_v);
    let beta_tau = unit_vector(&mut prng, layout.p_v);

    let s = cfg.latent_scale_v;
    let btv = b_v.transpose() * &beta_tau;
    let index_sd = (s * s * btv.norm_squared() + cfg.sigma_v2 * beta_tau.norm_squared()).sqrt();
    if !(index_sd > 0.0) {
        return Err(CalmError::InvalidArgument("the CATE index has zero variance".into()));
    }
    // H | U is Gaussian: precision I + α² B_Uᵀ B_U / σ_U².
    let a = cfg.alpha_u;
    let precision = DMatrix::identity(k, k) + b_u.transpose() * &b_u * (a * a / cfg.sigma_u2);
    let h_cov = precision
        .try_inverse()
        .ok_or_else(|| CalmError::Singular("latent posterior precision".into()))?;
    let h_gain = &h_cov * b_u.transpose() * (a / cfg.sigma_u2);

    let oracle = LatentOracle {
        config: cfg.clone(),
        seed,
        layout,
        b_v,
        b_u,
        beta_z,
        beta_u,
        beta_v,
        beta_tau,
        index_sd,
        h_cov,
        h_gain,
    };

    let mut orng = derive_rng(seed, stage::DGP_OS, 0);
    let (z, u, v) = draw(&oracle, &mut orng, cfg.n_o);
    let x_o = hcat(&z, &v);
    let oa = logistic_treatment(&mut orng, &x_o);
    let oy = outcomes(&oracle, &mut orng, &z, &u, &v, &oa);

    let mut rrng = derive_rng(seed, stage::DGP_RCT, 0);
    let (z, u, v) = draw(&oracle, &mut rrng, cfg.n_r);
    let ra = randomized_treatment(&mut rrng, cfg.n_r, cfg.pi_treated);
    let ry = outcomes(&oracle, &mut rrng, &z, &u, &v, &ra);
    let x_r = hcat(&u, &z);

    Ok(Generated {
        os: make_dataset(Source::Os, x_o, oa, oy, layout)?,
        rct: make_dataset(Source::Rct, x_r, ra, ry, layout)?,
        oracle: DgpOracle::Latent(oracle),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LatentDgpConfig {
        LatentDgpConfig {
            n_r: 100,
            n_o: 200,
            ..Default::default()
        }
    }

    #[test]
    fn exact_truth_matches_monte_carlo_for_every_form() {
        for form in [CateForm::Sin { omega: 1.5 }, CateForm::Abs, CateForm::Quad] {
            let g = gen_latent_nonlinear(&LatentDgpConfig { cate_form: form, ..small() }, 2).unwrap();
            let x = g.rct.x.rows(0, 8).into_owned();
            let exact = g.oracle.true_cate(&x).unwrap();
            let mc = g.oracle.true_cate_mc(&x, 10_000, 4).unwrap();
            for i in 0..8 {
                let gap = (exact[i] - mc.value[i]).abs();
                assert!(gap <= 3.0 * mc.se[i] + 1e-12, "{form:?}: gap {gap}, se {}", mc.se[i]);
            }
        }
    }

    #[test]
    fn index_is_standardized() {
        let g = gen_latent_nonlinear(&LatentDgpConfig { n_o: 20_000, ..small() }, 3).unwrap();
        let DgpOracle::Latent(o) = &g.oracle else { panic!() };
        let v = g.os.x.columns(30, 20);
        let s = v * &o.beta_tau / o.index_sd;
        assert!((s.variance() - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_coupling_makes_v_independent_of_u() {
        let g = gen_latent_nonlinear(&LatentDgpConfig { alpha_u: 0.0, ..small() }, 5).unwrap();
        let a = g.oracle.conditional_v(&g.rct.x.row(0).transpose()).unwrap();
        let b = g.oracle.conditional_v(&g.rct.x.row(1).transpose()).unwrap();
        assert_eq!(a, b);
        assert!(a.0.amax() == 0.0);
        // Sin of a centered Gaussian index averages to zero.
        let tau = g.oracle.true_cate(&g.rct.x).unwrap();
        assert!(tau.amax() < 1e-12);
    }

    #[test]
    fn sin_form_population_mean_near_zero() {
        let g = gen_latent_nonlinear(&LatentDgpConfig { n_o: 100_000, ..small() }, 6).unwrap();
        let DgpOracle::Latent(o) = &g.oracle else { panic!() };
        let v = g.os.x.columns(30, 20).into_owned();
        let mean = (0..v.nrows())
            .map(|i| o.effect_integrand(&v.row(i).transpose()))
            .sum::<f64>()
            / v.nrows() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn null_model_has_zero_truth() {
        let cfg = LatentDgpConfig {
            w_v: 0.0,
            cate_scale: Some(0.0),
            ..small()
        };
        let g = gen_latent_nonlinear(&cfg, 1).unwrap();
        assert!(g.oracle.true_cate(&g.rct.x).unwrap().amax() == 0.0);
    }

    #[test]
    fn sampler_matches_analytic_law() {
        let g = gen_latent_nonlinear(&small(), 8).unwrap();
        let x = g.rct.x.row(3).transpose();
        let (mean, cov) = g.oracle.conditional_v(&x).unwrap();
        let mut rng = derive_rng(1, 1234, 0);
        let n = 100_000;
        let draws = g.oracle.sample_v(&x, n, &mut rng).unwrap();
        let emp_mean = DVector::from_iterator(20, draws.column_iter().map(|c| c.mean()));
        let sd = cov.diagonal().map(f64::sqrt);
        for j in 0..20 {
            assert!((emp_mean[j] - mean[j]).abs() < 0.02 * sd[j].max(mean[j].abs()));
            let var = draws.column(j).variance();
            assert!((var / cov[(j, j)] - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn determinism() {
        let a = gen_latent_nonlinear(&small(), 11).unwrap();
        let b = gen_latent_nonlinear(&small(), 11).unwrap();
        assert_eq!(a.rct.y, b.rct.y);
        assert_eq!(a.os.x, b.os.x);
    }
}
