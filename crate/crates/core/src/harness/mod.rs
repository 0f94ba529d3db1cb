//! Experiment orchestration: replicate execution, RMSE evaluation, sweeps and
//! result files.

mod grid;
mod summary;
mod sweep;

pub use grid::{full_grid, GRID_SETTINGS};
pub use summary::{summarize, SummaryRow};
pub use sweep::{
    read_results_csv, run_sweep, write_records, write_summary, Factor, FactorValue, SweepOutput, SweepSpec,
    RESULTS_HEADER,
};

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{DgpConfig, Regime, TruthMode};
use crate::error::{invalid, CalmError, Result};
use crate::estimators::{default_context_parts, fit_method, EstimatorConfig, FitContext, Method};

/// `sqrt(mean((pred − truth)²))`.
pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if pred.len() != truth.len() {
        return invalid(format!("prediction has {} entries, truth has {}", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return invalid("rmse of an empty vector");
    }
    Ok(((pred - truth).norm_squared() / pred.len() as f64).sqrt())
}

/// One fully specified experiment cell: a DGP, the methods to fit and the replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub dgp: DgpConfig,
    pub methods: Vec<Method>,
    pub n_reps: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub truth: TruthMode,
    /// Labels copied into every record.
    #[serde(default = "default_factor")]
    pub factor: String,
    #[serde(default = "default_factor")]
    pub factor_value: String,
}

fn default_factor() -> String {
    "default".into()
}

impl Setting {
    pub fn new(dgp: DgpConfig, methods: Vec<Method>, n_reps: usize, base_seed: u64) -> Self {
        Self {
            dgp,
            methods,
            n_reps,
            base_seed,
            estimator: EstimatorConfig::default(),
            truth: TruthMode::default(),
            factor: default_factor(),
            factor_value: default_factor(),
        }
    }

    pub fn regime(&self) -> Regime {
        self.dgp.regime()
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return invalid("a setting needs at least one method");
        }
        if self.n_reps == 0 {
            return invalid("a setting needs at least one replicate");
        }
        self.estimator.calm_nn.validate()
    }

    /// Data seed of replicate `k`.
    pub fn replicate_seed(&self, k: usize) -> u64 {
        self.base_seed.wrapping_add(k as u64)
    }
}

/// One (method, replicate) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub regime: Regime,
    pub factor: String,
    pub factor_value: String,
    pub method: Method,
    pub replicate: usize,
    pub seed: u64,
    pub n_r: usize,
    pub n_o: usize,
    /// `None` marks a failed fit; `failure` then holds the reason.
    pub rmse: Option<f64>,
    pub fit_seconds: f64,
    pub failure: Option<String>,
    pub diagnostics: serde_json::Value,
}

impl ResultRecord {
    pub fn is_failure(&self) -> bool {
        self.rmse.is_none()
    }
}

/// Run every replicate of `setting` on `jobs` worker threads.
///
/// Per-method failures become records with a failure marker; only an invalid
/// setting or a thread-pool error aborts. Output is sorted by (method, replicate)
/// and, apart from `fit_seconds`, does not depend on `jobs`.
pub fn run_setting(setting: &Setting, jobs: usize) -> Result<Vec<ResultRecord>> {
    setting.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CalmError::InvalidArgument(format!("thread pool: {e}")))?;
    let mut records: Vec<ResultRecord> = pool.install(|| {
        (0..setting.n_reps)
            .into_par_iter()
            .flat_map_iter(|k| run_replicate(setting, k))
            .collect()
    });
    let order = |m: Method| setting.methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (order(r.method), r.replicate));
    Ok(records)
}

fn run_replicate(setting: &Setting, k: usize) -> Vec<ResultRecord> {
    let seed = setting.replicate_seed(k);
    let record = |method: Method, rmse: Option<f64>, secs: f64, failure: Option<String>, diag: serde_json::Value| {
        ResultRecord {
            regime: setting.regime(),
            factor: setting.factor.clone(),
            factor_value: setting.factor_value.clone(),
            method,
            replicate: k,
            seed,
            n_r: setting.dgp.n_r(),
            n_o: setting.dgp.n_o(),
            rmse,
            fit_seconds: secs,
            failure,
            diagnostics: diag,
        }
    };
    let prepared = setting.dgp.generate(seed).and_then(|g| {
        let truth = g.oracle.truth(&g.rct.x, setting.truth, seed)?;
        let (pi, folds) = default_context_parts(&g, &setting.estimator, seed, pi_treated(&setting.dgp))?;
        Ok((g, truth, pi, folds))
    });
    let (g, truth, pi, folds) = match prepared {
        Ok(p) => p,
        Err(e) => {
            let reason = format!("data generation: {e}");
            log::warn!("replicate {k}: {reason}");
            return setting
                .methods
                .iter()
                .map(|&m| record(m, None, 0.0, Some(reason.clone()), serde_json::Value::Null))
                .collect();
        }
    };
    let ctx = FitContext {
        os: &g.os,
        rct: &g.rct,
        pi: &pi,
        folds: &folds,
        config: &setting.estimator,
        seed,
    };
    setting
        .methods
        .iter()
        .map(|&m| {
            let t = Instant::now();
            let out = fit_method(m, &ctx).and_then(|fit| {
                let pred = fit.in_sample(&g.rct.x)?;
                let r = rmse(&pred, &truth)?;
                if !r.is_finite() {
                    return Err(CalmError::NonFinite("rmse".into()));
                }
                Ok((r, fit.diagnostics))
            });
            let secs = t.elapsed().as_secs_f64();
            match out {
                Ok((r, diag)) => record(m, Some(r), secs, None, serde_json::to_value(diag).unwrap_or_default()),
                Err(e) => {
                    log::warn!("{m} failed on replicate {k}: {e}");
                    record(m, None, secs, Some(e.to_string()), serde_json::Value::Null)
                }
            }
        })
        .collect()
}

fn pi_treated(dgp: &DgpConfig) -> f64 {
    match dgp {
        DgpConfig::Baseline(c) => c.pi_treated,
        DgpConfig::Latent(c) => c.pi_treated,
        DgpConfig::Ihdp(c) => c.pi_treated,
    }
}
