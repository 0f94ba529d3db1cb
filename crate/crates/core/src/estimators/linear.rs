use std::collections::BTreeMap;
use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    crossfit_pipeline, cv_seed, finish, json_f64, os_record, rct_record, role, ArmPredictions, CalibratedModel,
    FitContext, FittedCate, Method, Provenance,
};
use crate::data::{hcat, make_folds, select_entries, select_rows, Arm, CovariateLayout, Source};
use crate::error::{invalid, Result};
use crate::linmod::{build_rct_encoder_linear, fit_lasso_cv, fit_pca, lasso_grid, Imputer, LassoCv, LinearModel, Projection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalmLinConfig {
    /// Fixed embedding dimension; chosen by OS cross-validation when unset.
    pub d: Option<usize>,
    pub candidates: Vec<usize>,
    /// `false` replaces PCA by the identity map (so `d = p_o`).
    pub pca: bool,
}

impl Default for CalmLinConfig {
    fn default() -> Self {
        Self {
            d: None,
            candidates: vec![1, 2, 3, 5, 8, 10, 15, 20, 30, 40, 50],
            pca: true,
        }
    }
}

/// How RCT covariates are turned into the inputs of a linear head.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Raw,
    /// The shared block Z.
    Shared { layout: CovariateLayout },
    /// `(Z, V̂)`, or `(U, Z, V̂)` with `with_u`.
    Imputed { layout: CovariateLayout, imputer: Imputer, with_u: bool },
    /// A linear encoder of `X^r`.
    Encoder(Projection),
    /// `[X^r | encoder(X^r)]`.
    RawPlusEncoder(Projection),
}

impl FeatureMap {
    pub fn apply(&self, x_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FeatureMap::Raw => Ok(x_r.clone()),
            FeatureMap::Shared { layout } => {
                let r = layout.z_range(Source::Rct);
                Ok(x_r.columns(r.start, r.len()).into_owned())
            }
            FeatureMap::Imputed { layout, imputer, with_u } => {
                let r = layout.z_range(Source::Rct);
                let z = x_r.columns(r.start, r.len()).into_owned();
                let v = imputer.impute(&z)?;
                let left = if *with_u { x_r.clone() } else { z };
                Ok(hcat(&left, &v))
            }
            FeatureMap::Encoder(p) => p.apply(x_r),
            FeatureMap::RawPlusEncoder(p) => Ok(hcat(x_r, &p.apply(x_r)?)),
        }
    }
}

/// Linear per-arm heads with optional linear discrepancy terms.
#[derive(Debug, Clone)]
pub struct LinearCalibrated {
    pub base_map: FeatureMap,
    pub base: [LinearModel; 2],
    pub discrepancy: Option<(FeatureMap, [LinearModel; 2])>,
}

impl CalibratedModel for LinearCalibrated {
    fn arms(&self, x_r: &DMatrix<f64>) -> Result<ArmPredictions> {
        let f = self.base_map.apply(x_r)?;
        let base = [self.base[0].predict(&f)?, self.base[1].predict(&f)?];
        let discrepancy = match &self.discrepancy {
            Some((map, d)) => {
                let g = map.apply(x_r)?;
                [d[0].predict(&g)?, d[1].predict(&g)?]
            }
            None => [DVector::zeros(x_r.nrows()), DVector::zeros(x_r.nrows())],
        };
        Ok(ArmPredictions { base, discrepancy })
    }
}

/// Per-arm LASSO heads on the given features, rows restricted to `rows`.
fn arm_heads(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    arms: &[Arm],
    rows: &[usize],
    ctx: &FitContext,
    role: u64,
    fold: usize,
) -> Result<[LinearModel; 2]> {
    let fit = |arm: Arm| -> Result<LinearModel> {
        let sel: Vec<usize> = rows.iter().copied().filter(|&i| arms[i] == arm).collect();
        if sel.is_empty() {
            return invalid(format!("no {arm:?} units available to fit a head"));
        }
        let seed = cv_seed(ctx.seed, role, fold, arm.index());
        Ok(fit_lasso_cv(&select_rows(x, &sel), &select_entries(y, &sel), &ctx.config.lasso, seed)?.model)
    };
    Ok([fit(Arm::Control)?, fit(Arm::Treated)?])
}

/// Discrepancy heads: LASSO of `Y − μ̂_a(base features)` on `disc` features.
fn discrepancy_heads(
    base_map: &FeatureMap,
    base: &[LinearModel; 2],
    disc_map: &FeatureMap,
    train: &[usize],
    fold: usize,
    ctx: &FitContext,
) -> Result<[LinearModel; 2]> {
    let x = select_rows(&ctx.rct.x, train);
    let f = base_map.apply(&x)?;
    let g = disc_map.apply(&x)?;
    let arms: Vec<Arm> = train.iter().map(|&i| ctx.rct.a[i]).collect();
    let mut resid = DVector::zeros(train.len());
    for arm in Arm::BOTH {
        let pred = base[arm.index()].predict(&f)?;
        for (k, &i) in train.iter().enumerate() {
            if arms[k] == arm {
                resid[k] = ctx.rct.y[i] - pred[k];
            }
        }
    }
    let local: Vec<usize> = (0..train.len()).collect();
    arm_heads(&g, &resid, &arms, &local, ctx, role::DISCREPANCY, fold)
}

fn os_heads_on(x_o: &DMatrix<f64>, ctx: &FitContext) -> Result<[LinearModel; 2]> {
    let rows: Vec<usize> = (0..ctx.os.n()).collect();
    arm_heads(x_o, &ctx.os.y, &ctx.os.a, &rows, ctx, role::OS_HEAD, 0)
}

/// Naive, RACER, SR-Oscar and MR-Oscar.
pub fn fit_baseline(method: Method, ctx: &FitContext) -> Result<FittedCate> {
    ctx.validate()?;
    let layout = ctx.rct.layout;
    let n = ctx.rct.n();
    let prov = Provenance::new(n, Some(ctx.folds.clone()));
    let mut diag = BTreeMap::new();
    match method {
        Method::Naive => {
            let psi = super::pseudo_outcomes(ctx.rct, &DVector::zeros(n), ctx.pi)?;
            finish(method, ctx, None, DVector::zeros(n), psi.psi, prov, &mut diag)
        }
        Method::Racer => crossfit_pipeline(method, ctx, prov, diag, |k, train| {
            let heads = arm_heads(&ctx.rct.x, &ctx.rct.y, &ctx.rct.a, train, ctx, role::RCT_HEAD, k)?;
            let model = LinearCalibrated {
                base_map: FeatureMap::Raw,
                base: heads,
                discrepancy: None,
            };
            Ok((Arc::new(model) as Arc<dyn CalibratedModel>, vec![rct_record(format!("rct_heads_fold{k}"), "heads", train)]))
        }),
        Method::SrOscar => {
            let z_o = shared(&ctx.os.x, &layout, Source::Os);
            let base = os_heads_on(&z_o, ctx)?;
            let map = FeatureMap::Shared { layout };
            calibrated_linear(method, ctx, prov, diag, map.clone(), base, map)
        }
        Method::MrOscar => {
            let imputer = fit_imputer(ctx)?;
            let base = os_heads_on(&ctx.os.x, ctx)?;
            let base_map = FeatureMap::Imputed { layout, imputer: imputer.clone(), with_u: false };
            let disc_map = FeatureMap::Imputed { layout, imputer, with_u: true };
            calibrated_linear(method, ctx, prov, diag, base_map, base, disc_map)
        }
        other => invalid(format!("{other} is not a baseline method")),
    }
}

fn shared(x: &DMatrix<f64>, layout: &CovariateLayout, source: Source) -> DMatrix<f64> {
    let r = layout.z_range(source);
    x.columns(r.start, r.len()).into_owned()
}

fn fit_imputer(ctx: &FitContext) -> Result<Imputer> {
    let layout = ctx.os.layout;
    let z = shared(&ctx.os.x, &layout, Source::Os);
    let v = ctx.os.x.columns(layout.p_z, layout.p_v).into_owned();
    Imputer::fit(&z, &v, ctx.config.imputer_alpha)
}

/// Frozen OS heads on `base_map` features, discrepancies cross-fitted on the RCT.
fn calibrated_linear(
    method: Method,
    ctx: &FitContext,
    mut prov: Provenance,
    diag: BTreeMap<String, serde_json::Value>,
    base_map: FeatureMap,
    base: [LinearModel; 2],
    disc_map: FeatureMap,
) -> Result<FittedCate> {
    let mut os = os_record("os_heads", ctx.os.n());
    os.evaluated_rows = (0..ctx.rct.n()).collect();
    prov.push(os);
    crossfit_pipeline(method, ctx, prov, diag, |k, train| {
        let disc = discrepancy_heads(&base_map, &base, &disc_map, train, k, ctx)?;
        let model = LinearCalibrated {
            base_map: base_map.clone(),
            base: base.clone(),
            discrepancy: Some((disc_map.clone(), disc)),
        };
        Ok((Arc::new(model) as Arc<dyn CalibratedModel>, vec![rct_record(format!("discrepancy_fold{k}"), "discrepancy", train)]))
    })
}

/// CV error of per-arm OS heads on the leading `d` PCA scores, summed over arms.
fn dimension_scores(scores: &DMatrix<f64>, ctx: &FitContext, candidates: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut per_arm = Vec::new();
    for arm in Arm::BOTH {
        let rows = ctx.os.arm_rows(arm);
        let k = ctx.config.lasso.cv_folds.min(rows.len() / 2);
        if k < 2 {
            return invalid("too few OS units per arm to choose the embedding dimension");
        }
        let folds = make_folds(rows.len(), k, cv_seed(ctx.seed, role::DIM_SELECT, 0, arm.index()))?;
        per_arm.push(LassoCv::new(&select_rows(scores, &rows), &select_entries(&ctx.os.y, &rows), &folds)?);
    }
    let mut out = Vec::new();
    for &d in candidates {
        let mut total = 0.0;
        for cv in &per_arm {
            let lead = cv.leading(d)?;
            let lmax = lead.lambda_max();
            if !(lmax > 0.0) {
                total += f64::INFINITY;
                continue;
            }
            let grid = lasso_grid(lmax, ctx.config.lasso.n_lambda, ctx.config.lasso.lambda_min_ratio);
            let err = lead.cv_path(&grid, &ctx.config.lasso)?;
            total += err.iter().copied().fold(f64::INFINITY, f64::min);
        }
        out.push((d, total));
    }
    Ok(out)
}

/// CALM-Lin: PCA embedding of the OS covariates, LASSO heads in embedding
/// space, and an RCT encoder that folds the `Z → V` imputer into the projection.
pub fn fit_calm_lin(ctx: &FitContext, cfg: &CalmLinConfig) -> Result<FittedCate> {
    ctx.validate()?;
    let layout = ctx.rct.layout;
    let p_o = layout.p_o();
    let mut diag = BTreeMap::new();
    let projection = if !cfg.pca {
        Projection::identity(p_o)
    } else {
        let full = fit_pca(&ctx.os.x, p_o)?;
        let d = match cfg.d {
            Some(d) if d >= 1 && d <= full.dim() => d,
            Some(d) => return invalid(format!("embedding dimension {d} outside [1, {}]", full.dim())),
            None => {
                let mut cands: Vec<usize> = cfg.candidates.iter().copied().filter(|&d| d >= 1 && d <= full.dim()).collect();
                if cands.is_empty() {
                    cands.push(full.dim());
                }
                let scores = full.apply(&ctx.os.x)?;
                let errs = dimension_scores(&scores, ctx, &cands)?;
                debug!("embedding dimension CV errors: {errs:?}");
                errs.iter()
                    .fold((cands[0], f64::INFINITY), |best, &(d, e)| if e < best.1 { (d, e) } else { best })
                    .0
            }
        };
        full.leading(d)?
    };
    diag.insert("embedding_dim".into(), projection.dim().into());
    if let Some(v) = projection.explained_variance.iter().copied().reduce(|a, b| a + b) {
        diag.insert("explained_variance".into(), json_f64(v));
    }
    let emb_o = projection.apply(&ctx.os.x)?;
    let base = os_heads_on(&emb_o, ctx)?;
    let imputer = fit_imputer(ctx)?;
    let enc_r = build_rct_encoder_linear(&projection, &imputer, &layout)?;
    let prov = Provenance::new(ctx.rct.n(), Some(ctx.folds.clone()));
    calibrated_linear(
        Method::CalmLin,
        ctx,
        prov,
        diag,
        FeatureMap::Encoder(enc_r.clone()),
        base,
        FeatureMap::RawPlusEncoder(enc_r),
    )
}
