//! CATE estimators built on pseudo-outcome regression with cross-fitted nuisances.
//!
//! Every pipeline method follows the same outline: per-arm outcome models
//! (possibly borrowed from the OS and calibrated on the RCT) are fitted on the
//! out-of-fold RCT rows, the counterfactual mean outcome `m̂` and the
//! preliminary effect `τ̃` are evaluated on the held-out fold, and a final LASSO
//! of `ψ̂ − τ̃` on the raw RCT covariates gives the correction `δ̂`.

mod calm_nn;
mod htce;
mod linear;
mod pseudo;

pub use calm_nn::{fit_calm_nn, fit_stage1, TrainTrace, stage1_loss, stage2_loss, CalmNnConfig, NeuralCalibrated, Stage1Model, Stage2Batch, Stage2Member, Stage2Scope};
pub use htce::{fit_htce, fit_htce_pair, htce_loss, HtceBatch, HtceConfig, HtceNet, HtceVariant, SourceBatch};
pub use linear::{fit_baseline, fit_calm_lin, CalmLinConfig, FeatureMap, LinearCalibrated};
pub use pseudo::{cmo, fit_cate_correction, pseudo_outcomes, PseudoOutcomes};

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{select_rows, Arm, Dataset, FoldAssignment, PropensityModel, Source};
use crate::dgp::Generated;
use crate::error::{invalid, CalmError, Result};
use crate::linmod::{LassoConfig, LinearModel};
use crate::rng::{child_seed, stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Naive,
    Racer,
    SrOscar,
    MrOscar,
    CalmLin,
    CalmNn,
    HtceT,
    HtceDr,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Naive,
        Method::Racer,
        Method::SrOscar,
        Method::MrOscar,
        Method::CalmLin,
        Method::CalmNn,
        Method::HtceT,
        Method::HtceDr,
    ];

    /// The four calibration-based linear pipelines.
    pub const CALIBRATION_GROUP: [Method; 4] = [Method::Racer, Method::SrOscar, Method::MrOscar, Method::CalmLin];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "Naive",
            Method::Racer => "Racer",
            Method::SrOscar => "SrOscar",
            Method::MrOscar => "MrOscar",
            Method::CalmLin => "CalmLin",
            Method::CalmNn => "CalmNn",
            Method::HtceT => "HtceT",
            Method::HtceDr => "HtceDr",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Method::CalmNn | Method::HtceT | Method::HtceDr)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = CalmError;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().to_lowercase() == key)
            .map_or_else(|| invalid(format!("unknown method '{s}'")), Ok)
    }
}

/// Settings shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub lasso: LassoConfig,
    /// Ridge strength of the `Z → V` imputer (MR-Oscar and CALM-Lin).
    pub imputer_alpha: f64,
    /// Number of RCT folds; `None` picks 5, or 2 when `n_r ≤ 150`.
    pub folds: Option<usize>,
    pub calm_lin: CalmLinConfig,
    pub calm_nn: CalmNnConfig,
    pub htce: HtceConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lasso: LassoConfig::default(),
            imputer_alpha: 1e-3,
            folds: None,
            calm_lin: CalmLinConfig::default(),
            calm_nn: CalmNnConfig::default(),
            htce: HtceConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn n_folds(&self, n_r: usize) -> usize {
        self.folds.unwrap_or(if n_r <= 150 { 2 } else { 5 })
    }
}

/// Inner-CV seed for one model, keyed by its role rather than by the method,
/// so two pipelines fitting the same sub-problem use the same folds.
pub(crate) fn cv_seed(seed: u64, role: u64, fold: usize, arm: usize) -> u64 {
    child_seed(seed, stage::INNER_CV, role * 10_000 + fold as u64 * 10 + arm as u64)
}

pub(crate) mod role {
    pub const OS_HEAD: u64 = 1;
    pub const DISCREPANCY: u64 = 2;
    pub const RCT_HEAD: u64 = 3;
    pub const CORRECTION: u64 = 4;
    pub const DIM_SELECT: u64 = 5;
    pub const DR_FINAL: u64 = 6;
}

/// Outcome predictions per arm, indexed by `Arm::index`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPredictions {
    /// OS-derived (or RCT-only) outcome head `μ̂_a`.
    pub base: [DVector<f64>; 2],
    /// Calibration term `δ̂_a`; zero for uncalibrated heads.
    pub discrepancy: [DVector<f64>; 2],
}

impl ArmPredictions {
    pub fn calibrated(&self, arm: Arm) -> DVector<f64> {
        &self.base[arm.index()] + &self.discrepancy[arm.index()]
    }

    pub fn tau(&self) -> DVector<f64> {
        self.calibrated(Arm::Treated) - self.calibrated(Arm::Control)
    }
}

/// Per-arm calibrated outcome predictions `μ̂^cal_a = μ̂_a + δ̂_a` on `X^r`.
pub trait CalibratedModel: Debug + Send + Sync {
    fn arms(&self, x_r: &DMatrix<f64>) -> Result<ArmPredictions>;
}

/// A map from `X^r` to a preliminary effect.
pub trait CateMap: Debug + Send + Sync {
    fn tau(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>>;
}

/// The average of the per-fold calibrated models, used away from the training rows.
#[derive(Debug, Clone)]
pub struct FoldEnsemble {
    pub models: Vec<Arc<dyn CalibratedModel>>,
}

impl CateMap for FoldEnsemble {
    fn tau(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(x_r.nrows());
        for m in &self.models {
            acc += m.arms(x_r)?.tau();
        }
        Ok(acc / self.models.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    /// Enters `ψ̂` or `τ̃` and must be cross-fitted.
    Nuisance,
    /// Part of the final regression, fitted on every RCT row by design.
    Final,
}

/// Which rows trained a fitted component and where it was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceRecord {
    pub name: String,
    pub group: String,
    pub kind: NuisanceKind,
    /// Source of `trained_rows`; RCT rows are checked against `evaluated_rows`.
    pub source: Source,
    pub trained_rows: Vec<usize>,
    /// RCT rows at which the component's predictions were used.
    pub evaluated_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub n_rct: usize,
    pub folds: Option<FoldAssignment>,
    pub records: Vec<NuisanceRecord>,
}

impl Provenance {
    pub fn new(n_rct: usize, folds: Option<FoldAssignment>) -> Self {
        Self {
            n_rct,
            folds,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: NuisanceRecord) {
        self.records.push(r);
    }

    /// Every way the ledger fails to prove cross-fitting; empty when clean.
    ///
    /// An RCT-trained nuisance may not be evaluated on its own training rows,
    /// and the evaluation sets within each cross-fitted group must cover every
    /// RCT row exactly once.
    pub fn audit(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut coverage: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for r in &self.records {
            if r.kind != NuisanceKind::Nuisance {
                continue;
            }
            if r.source == Source::Rct {
                let mut trained = vec![false; self.n_rct];
                for &i in &r.trained_rows {
                    if i < self.n_rct {
                        trained[i] = true;
                    } else {
                        out.push(format!("{}: training row {i} out of range", r.name));
                    }
                }
                for &i in &r.evaluated_rows {
                    if i < self.n_rct && trained[i] {
                        out.push(format!("{}: RCT row {i} used in training and evaluation", r.name));
                    }
                }
                let cov = coverage.entry(r.group.as_str()).or_insert_with(|| vec![0; self.n_rct]);
                for &i in &r.evaluated_rows {
                    if i < self.n_rct {
                        cov[i] += 1;
                    }
                }
            }
        }
        for (g, cov) in coverage {
            let bad = cov.iter().filter(|&&c| c != 1).count();
            if bad > 0 {
                out.push(format!("group {g}: {bad} RCT rows not evaluated exactly once"));
            }
        }
        out
    }
}

/// A fitted estimator: `τ̂(x) = τ̃(x) + δ̂(x)`.
#[derive(Debug, Clone)]
pub struct FittedCate {
    pub method: Method,
    /// `None` means `τ̃ ≡ 0`.
    pub prelim: Option<Arc<dyn CateMap>>,
    /// LASSO correction on the raw RCT covariates.
    pub correction: LinearModel,
    /// Cross-fitted `τ̃` at the training RCT rows.
    pub tau_tilde_train: DVector<f64>,
    /// `ψ̂` at the training RCT rows.
    pub pseudo_outcomes: DVector<f64>,
    pub provenance: Provenance,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl FittedCate {
    /// The correction is always fitted on `X^r`; this is its width.
    pub fn correction_width(&self) -> usize {
        self.correction.n_features()
    }

    /// Estimates at the training RCT rows, using the cross-fitted `τ̃`.
    pub fn in_sample(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x_r.nrows() != self.tau_tilde_train.len() {
            return invalid("in-sample prediction needs exactly the training RCT rows");
        }
        Ok(&self.tau_tilde_train + self.correction.predict(x_r)?)
    }

    pub fn prelim_at(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        match &self.prelim {
            Some(p) => p.tau(x_r),
            None => Ok(DVector::zeros(x_r.nrows())),
        }
    }
}

/// `τ̂(x) = τ̃(x) + δ̂(x)` at arbitrary points.
pub fn predict_cate(model: &FittedCate, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x_r.ncols() != model.correction_width() {
        return invalid(format!(
            "model expects {} RCT covariates, got {}",
            model.correction_width(),
            x_r.ncols()
        ));
    }
    Ok(model.prelim_at(x_r)? + model.correction.predict(x_r)?)
}

/// Inputs shared by all estimators for one replicate.
#[derive(Debug, Clone, Copy)]
pub struct FitContext<'a> {
    pub os: &'a Dataset,
    pub rct: &'a Dataset,
    pub pi: &'a PropensityModel,
    pub folds: &'a FoldAssignment,
    pub config: &'a EstimatorConfig,
    pub seed: u64,
}

impl<'a> FitContext<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.os.layout != self.rct.layout {
            return invalid("OS and RCT datasets have different covariate layouts");
        }
        if self.os.source != Source::Os || self.rct.source != Source::Rct {
            return invalid("datasets are passed in the wrong order");
        }
        if self.folds.n != self.rct.n() {
            return invalid("fold assignment does not match the RCT size");
        }
        if let crate::data::PropensityKind::Table(t) = &self.pi.kind {
            if t.len() != self.rct.n() {
                return invalid("propensity table does not match the RCT size");
            }
        }
        self.pi.validate()
    }
}

/// Default folds and known propensities for a generated replicate.
pub fn default_context_parts(g: &Generated, cfg: &EstimatorConfig, seed: u64, pi_treated: f64) -> Result<(PropensityModel, FoldAssignment)> {
    let n = g.rct.n();
    let folds = crate::data::make_folds(n, cfg.n_folds(n), seed)?;
    Ok((PropensityModel::known(pi_treated)?, folds))
}

/// Fit any method.
pub fn fit_method(method: Method, ctx: &FitContext) -> Result<FittedCate> {
    ctx.validate()?;
    match method {
        Method::Naive | Method::Racer | Method::SrOscar | Method::MrOscar => fit_baseline(method, ctx),
        Method::CalmLin => fit_calm_lin(ctx, &ctx.config.calm_lin),
        Method::CalmNn => fit_calm_nn(ctx),
        Method::HtceT => fit_htce(HtceVariant::T, ctx),
        Method::HtceDr => fit_htce(HtceVariant::Dr, ctx),
    }
}

/// Stages 3 and 4 around per-fold calibrated models.
///
/// `fit_fold(train_rows)` must use only those RCT rows; its `NuisanceRecord`s
/// are completed here with the evaluation rows.
pub(crate) fn crossfit_pipeline<F>(
    method: Method,
    ctx: &FitContext,
    mut provenance: Provenance,
    mut diagnostics: BTreeMap<String, serde_json::Value>,
    mut fit_fold: F,
) -> Result<FittedCate>
where
    F: FnMut(usize, &[usize]) -> Result<(Arc<dyn CalibratedModel>, Vec<NuisanceRecord>)>,
{
    let rct = ctx.rct;
    let n = rct.n();
    let mut m_hat = DVector::zeros(n);
    let mut tau_tilde = DVector::zeros(n);
    let mut models = Vec::with_capacity(ctx.folds.k);
    for k in 0..ctx.folds.k {
        let train = ctx.folds.rows_out(k);
        let held = ctx.folds.rows_in(k);
        let (model, records) = fit_fold(k, &train)?;
        let preds = model.arms(&select_rows(&rct.x, &held))?;
        let m_k = cmo(&preds, ctx.pi, &held)?;
        let t_k = preds.tau();
        for (pos, &i) in held.iter().enumerate() {
            m_hat[i] = m_k[pos];
            tau_tilde[i] = t_k[pos];
        }
        for mut r in records {
            r.evaluated_rows = held.clone();
            provenance.push(r);
        }
        models.push(model);
    }
    let psi = pseudo_outcomes(rct, &m_hat, ctx.pi)?;
    let prelim: Arc<dyn CateMap> = Arc::new(FoldEnsemble { models });
    finish(method, ctx, Some(prelim), tau_tilde, psi.psi, provenance, &mut diagnostics)
}

/// Stage 4 and assembly.
pub(crate) fn finish(
    method: Method,
    ctx: &FitContext,
    prelim: Option<Arc<dyn CateMap>>,
    tau_tilde: DVector<f64>,
    psi: DVector<f64>,
    mut provenance: Provenance,
    diagnostics: &mut BTreeMap<String, serde_json::Value>,
) -> Result<FittedCate> {
    let fit = fit_cate_correction(&ctx.rct.x, &psi, &tau_tilde, &ctx.config.lasso, cv_seed(ctx.seed, role::CORRECTION, 0, 0))?;
    provenance.push(NuisanceRecord {
        name: "correction".into(),
        group: "final".into(),
        kind: NuisanceKind::Final,
        source: Source::Rct,
        trained_rows: (0..ctx.rct.n()).collect(),
        evaluated_rows: (0..ctx.rct.n()).collect(),
    });
    diagnostics.insert("correction_lambda".into(), json_f64(fit.lambda));
    diagnostics.insert("correction_support".into(), fit.model.support_size().into());
    Ok(FittedCate {
        method,
        prelim,
        correction: fit.model,
        tau_tilde_train: tau_tilde,
        pseudo_outcomes: psi,
        provenance,
        diagnostics: std::mem::take(diagnostics),
    })
}

pub(crate) fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

pub(crate) fn rct_record(name: impl Into<String>, group: &str, train: &[usize]) -> NuisanceRecord {
    NuisanceRecord {
        name: name.into(),
        group: group.into(),
        kind: NuisanceKind::Nuisance,
        source: Source::Rct,
        trained_rows: train.to_vec(),
        evaluated_rows: Vec::new(),
    }
}

pub(crate) fn os_record(name: impl Into<String>, n_os: usize) -> NuisanceRecord {
    NuisanceRecord {
        name: name.into(),
        group: "os".into(),
        kind: NuisanceKind::Nuisance,
        source: Source::Os,
        trained_rows: (0..n_os).collect(),
        evaluated_rows: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("calm_nn".parse::<Method>().unwrap(), Method::CalmNn);
        assert_eq!("sr-oscar".parse::<Method>().unwrap(), Method::SrOscar);
        assert!("oscar".parse::<Method>().is_err());
    }

    #[test]
    fn default_fold_rule() {
        let c = EstimatorConfig::default();
        assert_eq!(c.n_folds(150), 2);
        assert_eq!(c.n_folds(151), 5);
    }

    #[test]
    fn audit_flags_leaks_and_gaps() {
        let mut p = Provenance::new(4, None);
        let mut a = rct_record("a", "g", &[2, 3]);
        a.evaluated_rows = vec![0, 1];
        let mut b = rct_record("b", "g", &[0, 1]);
        b.evaluated_rows = vec![2, 3];
        p.push(a);
        p.push(b.clone());
        assert!(p.audit().is_empty());
        let mut leak = rct_record("c", "h", &[0, 1, 2]);
        leak.evaluated_rows = vec![0, 1, 2, 3];
        p.push(leak);
        let v = p.audit();
        assert_eq!(v.len(), 3, "{v:?}");
        let mut q = Provenance::new(4, None);
        q.push(b);
        assert_eq!(q.audit().len(), 1);
    }
}
