use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{logistic_treatment, make_dataset, randomized_treatment, standard_normal_matrix, unit_vector, DgpOracle, Generated};
use crate::data::{select_rows, Arm, CovariateLayout, ScalerParams, Source};
use crate::error::{invalid, CalmError, Result};
use crate::rng::{derive_rng, stage};

/// The IHDP covariate table shipped with this repository.
pub fn bundled_ihdp_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ihdp/ihdp_covariates.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IhdpConfig {
    pub path: PathBuf,
    pub has_header: bool,
    pub z_cols: Vec<usize>,
    pub u_cols: Vec<usize>,
    pub v_cols: Vec<usize>,
    pub n_o: usize,
    pub n_r: usize,
    /// Seed for the structural coefficients; the replicate seed is used when unset.
    pub outcome_seed: Option<u64>,
    pub rct_shift_magnitude: f64,
    /// Multiplier on the heterogeneous part of the effect; 0 with `tau_mean = 0` gives a null effect.
    pub tau_scale: f64,
    pub tau_mean: f64,
    pub noise_sd: f64,
    pub pi_treated: f64,
}

impl Default for IhdpConfig {
    fn default() -> Self {
        Self {
            path: bundled_ihdp_path(),
            has_header: true,
            z_cols: (0..13).collect(),
            u_cols: (13..19).collect(),
            v_cols: (19..29).collect(),
            n_o: 2_000,
            n_r: 300,
            outcome_seed: None,
            rct_shift_magnitude: 1.0,
            tau_scale: 0.5,
            tau_mean: 1.0,
            noise_sd: 0.5,
            pi_treated: 0.5,
        }
    }
}

impl IhdpConfig {
    fn validate(&self, ncols: usize) -> Result<CovariateLayout> {
        let mut seen = vec![false; ncols];
        for &c in self.z_cols.iter().chain(&self.u_cols).chain(&self.v_cols) {
            if c >= ncols {
                return Err(CalmError::Load(format!(
                    "column index {c} out of range for a table with {ncols} columns"
                )));
            }
            if seen[c] {
                return Err(CalmError::Load(format!("column index {c} assigned twice")));
            }
            seen[c] = true;
        }
        if self.n_o < 4 || self.n_r < 4 {
            return invalid("both sources need at least 4 units");
        }
        if !(self.pi_treated > 0.0 && self.pi_treated < 1.0) {
            return invalid("RCT treatment probability must lie in (0, 1)");
        }
        if self.rct_shift_magnitude < 0.0 || self.noise_sd < 0.0 {
            return invalid("shift and noise must be non-negative");
        }
        CovariateLayout::new(self.z_cols.len(), self.u_cols.len(), self.v_cols.len())
    }
}

/// Read a numeric CSV into a matrix.
pub fn read_numeric_csv(path: &Path, has_header: bool) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| CalmError::Load(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CalmError::Load(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                cell.trim().parse::<f64>().map_err(|_| {
                    CalmError::Load(format!(
                        "{}: non-numeric cell '{cell}' at data row {}, column {}",
                        path.display(),
                        i + 1,
                        j + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CalmError::Load(format!(
                    "{}: row {} has {} cells, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CalmError::Load(format!("{}: no data rows", path.display())));
    }
    let p = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

/// Structural coefficients of the semi-synthetic outcome model (on standardized covariates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhdpOracle {
    pub config: IhdpConfig,
    pub seed: u64,
    pub layout: CovariateLayout,
    /// Covariate standardization from the full table, in `(U, Z, V)` order.
    pub scaler: ScalerParams,
    /// Main-effect coefficients over `(U, Z, V)`.
    pub beta: DVector<f64>,
    /// Effect coefficients over `(U, Z)`.
    pub gamma: DVector<f64>,
    pub eta: DVector<f64>,
    pub eta_sd: f64,
}

impl IhdpOracle {
    fn standardized_xr(&self, x_r: &DMatrix<f64>) -> DMatrix<f64> {
        let p_r = self.layout.p_r();
        DMatrix::from_fn(x_r.nrows(), p_r, |i, j| {
            (x_r[(i, j)] - self.scaler.mean[j]) / self.scaler.sd[j]
        })
    }

    fn tau_std(&self, xs_r: &DMatrix<f64>) -> DVector<f64> {
        (xs_r * &self.gamma * self.config.tau_scale).add_scalar(self.config.tau_mean)
    }

    pub(super) fn cate_exact(&self, x_r: &DMatrix<f64>) -> DVector<f64> {
        self.tau_std(&self.standardized_xr(x_r))
    }

    fn shift_std(&self, xs_r: &DMatrix<f64>) -> DVector<f64> {
        let z = xs_r.columns(self.layout.p_u, self.layout.p_z);
        z * &self.eta * (self.config.rct_shift_magnitude / self.eta_sd)
    }
}

/// Bootstrap OS and RCT samples from the covariate table with simulated outcomes.
pub fn load_ihdp_semi_synthetic(cfg: &IhdpConfig, seed: u64) -> Result<Generated> {
    let table = read_numeric_csv(&cfg.path, cfg.has_header)?;
    let layout = cfg.validate(table.ncols())?;
    let order: Vec<usize> = cfg
        .u_cols
        .iter()
        .chain(&cfg.z_cols)
        .chain(&cfg.v_cols)
        .copied()
        .collect();
    let full = DMatrix::from_fn(table.nrows(), order.len(), |i, j| table[(i, order[j])]);
    let scaler = ScalerParams::fit(&full)?;
    let std_full = scaler.transform(&full)?;

    let coef_seed = cfg.outcome_seed.unwrap_or(seed);
    let mut prng = derive_rng(coef_seed, stage::DGP_PARAMS, 0);
    let beta = unit_vector(&mut prng, layout.p());
    let gamma = unit_vector(&mut prng, layout.p_r());
    let k = layout.p_z.min(5);
    let mut eta = DVector::zeros(layout.p_z);
    eta.rows_mut(0, k).fill(1.0 / (k as f64).sqrt());
    let z_all = std_full.columns(layout.p_u, layout.p_z);
    let eta_sd = (z_all * &eta).variance().sqrt().max(1e-12);

    let oracle = IhdpOracle {
        config: cfg.clone(),
        seed,
        layout,
        scaler,
        beta,
        gamma,
        eta,
        eta_sd,
    };

    let n = table.nrows();
    let bootstrap = |size: usize, stream: u64| {
        let mut rng = derive_rng(seed, stream, 0);
        let rows: Vec<usize> = (0..size).map(|_| rng.gen_range(0..n)).collect();
        (select_rows(&full, &rows), select_rows(&std_full, &rows), rng)
    };

    let (raw_o, std_o, mut orng) = bootstrap(cfg.n_o, stage::DGP_OS);
    let x_o = raw_o.columns(layout.p_u, layout.p_o()).into_owned();
    let std_xo = std_o.columns(layout.p_u, layout.p_o()).into_owned();
    let oa = logistic_treatment(&mut orng, &std_xo);
    let oy = simulate(&oracle, &mut orng, &std_o, &oa, false);

    let (raw_r, std_r, mut rrng) = bootstrap(cfg.n_r, stage::DGP_RCT);
    let x_r = raw_r.columns(0, layout.p_r()).into_owned();
    let ra = randomized_treatment(&mut rrng, cfg.n_r, cfg.pi_treated);
    let ry = simulate(&oracle, &mut rrng, &std_r, &ra, true);

    Ok(Generated {
        os: make_dataset(Source::Os, x_o, oa, oy, layout)?,
        rct: make_dataset(Source::Rct, x_r, ra, ry, layout)?,
        oracle: DgpOracle::Ihdp(oracle),
    })
}

fn simulate(
    o: &IhdpOracle,
    rng: &mut rand_chacha::ChaCha8Rng,
    std_full: &DMatrix<f64>,
    a: &[Arm],
    shifted: bool,
) -> DVector<f64> {
    let eps = standard_normal_matrix(rng, a.len(), 1);
    let xs_r = std_full.columns(0, o.layout.p_r()).into_owned();
    let main = std_full * &o.beta;
    let tau = o.tau_std(&xs_r);
    let shift = if shifted {
        o.shift_std(&xs_r)
    } else {
        DVector::zeros(a.len())
    };
    DVector::from_fn(a.len(), |i, _| {
        main[i] + 0.5 * a[i].sign() * tau[i] + shift[i] + o.config.noise_sd * eps[(i, 0)]
    })
}
