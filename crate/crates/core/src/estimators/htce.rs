//! Simplified shared/private-encoder transfer learners used as baselines.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::calm_nn::train_loop;
use super::pseudo::{fit_cate_correction, pseudo_outcomes};
use super::{cv_seed, json_f64, os_record, rct_record, role, CateMap, FitContext, FittedCate, Method, NuisanceKind, NuisanceRecord, Provenance};
use crate::data::{hcat, select_entries, select_rows, Arm, Dataset, ScalerParams, Source};
use crate::error::{invalid, Result};
use crate::linmod::LinearModel;
use crate::neural::{backward, forward, AdamConfig, ForwardCache, Mlp, MlpParams, MlpSpec, Parameters, TrainConfig};
use crate::rng::{derive_rng, stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HtceVariant {
    T,
    Dr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HtceConfig {
    pub shared_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub private_hidden: Vec<usize>,
    pub private_dim: usize,
    pub head_hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Replace the DR augmentation by zero (diagnostic switch).
    pub zero_augmentation: bool,
}

impl Default for HtceConfig {
    fn default() -> Self {
        Self {
            shared_hidden: vec![32],
            shared_dim: 8,
            private_hidden: vec![32],
            private_dim: 4,
            head_hidden: vec![32],
            train: TrainConfig {
                epochs: 100,
                patience: 15,
                adam: AdamConfig { weight_decay: 1e-4, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
            zero_augmentation: false,
        }
    }
}

/// Architecture: an optional shared encoder on Z, optional private encoders on
/// U (RCT) and V (OS), and one head per (source, arm) on the concatenation.
///
/// Parameters are a flat list: present encoders in the order shared, RCT
/// private, OS private, followed by the heads RCT-control, RCT-treated,
/// OS-control, OS-treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtceNet {
    pub shared: Option<MlpSpec>,
    pub private_rct: Option<MlpSpec>,
    pub private_os: Option<MlpSpec>,
    pub head: MlpSpec,
}

fn source_index(s: Source) -> usize {
    match s {
        Source::Rct => 0,
        Source::Os => 1,
    }
}

impl HtceNet {
    pub fn new(cfg: &HtceConfig, p_z: usize, p_u: usize, p_v: usize) -> Result<Self> {
        let enc = |p: usize, hidden: &[usize], out: usize| (p > 0).then(|| MlpSpec::new(p, hidden.to_vec(), out));
        let shared = enc(p_z, &cfg.shared_hidden, cfg.shared_dim);
        let private_rct = enc(p_u, &cfg.private_hidden, cfg.private_dim);
        let private_os = enc(p_v, &cfg.private_hidden, cfg.private_dim);
        let w = |s: &Option<MlpSpec>| s.as_ref().map_or(0, |s| s.output_dim);
        let (wr, wo) = (w(&private_rct), w(&private_os));
        if wr != wo && wr > 0 && wo > 0 {
            return invalid("private encoders must share an output width");
        }
        let rep = w(&shared) + wr.max(wo);
        if rep == 0 {
            return invalid("HTCE needs at least one covariate block");
        }
        // A missing private block on one side is zero-padded so both sources feed the same heads.
        let head = MlpSpec::new(rep, cfg.head_hidden.clone(), 1);
        for s in [&shared, &private_rct, &private_os].into_iter().flatten() {
            s.validate()?;
        }
        head.validate()?;
        Ok(Self { shared, private_rct, private_os, head })
    }

    fn private(&self, s: Source) -> &Option<MlpSpec> {
        match s {
            Source::Rct => &self.private_rct,
            Source::Os => &self.private_os,
        }
    }

    fn shared_width(&self) -> usize {
        self.shared.as_ref().map_or(0, |s| s.output_dim)
    }

    pub fn rep_dim(&self) -> usize {
        self.head.input_dim
    }

    fn idx_shared(&self) -> Option<usize> {
        self.shared.as_ref().map(|_| 0)
    }

    fn idx_private(&self, s: Source) -> Option<usize> {
        let base = usize::from(self.shared.is_some());
        match s {
            Source::Rct => self.private_rct.as_ref().map(|_| base),
            Source::Os => self
                .private_os
                .as_ref()
                .map(|_| base + usize::from(self.private_rct.is_some())),
        }
    }

    fn idx_head(&self, s: Source, a: Arm) -> usize {
        let base = [&self.shared, &self.private_rct, &self.private_os].iter().filter(|s| s.is_some()).count();
        base + 2 * source_index(s) + a.index()
    }

    pub fn n_blocks(&self) -> usize {
        self.idx_head(Source::Os, Arm::Treated) + 1
    }

    pub fn init(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<MlpParams>> {
        let mut out = Vec::with_capacity(self.n_blocks());
        for s in [&self.shared, &self.private_rct, &self.private_os].into_iter().flatten() {
            out.push(Mlp::init(s.clone(), rng)?.params);
        }
        for _ in 0..4 {
            out.push(Mlp::init(self.head.clone(), rng)?.params);
        }
        Ok(out)
    }

    /// Concatenated representation; `z` and `private` are standardized blocks.
    pub fn representation(&self, params: &[MlpParams], s: Source, z: &DMatrix<f64>, private: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.rep_forward(params, s, z, private)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn rep_forward(
        &self,
        params: &[MlpParams],
        s: Source,
        z: &DMatrix<f64>,
        private: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, Option<ForwardCache>, Option<ForwardCache>)> {
        let n = z.nrows();
        let (zs, zc) = match (&self.shared, self.idx_shared()) {
            (Some(spec), Some(i)) => {
                let (o, c) = forward(spec, &params[i], z)?;
                (o, Some(c))
            }
            _ => (DMatrix::zeros(n, 0), None),
        };
        let pw = self.rep_dim() - self.shared_width();
        let (ps, pc) = match (self.private(s), self.idx_private(s)) {
            (Some(spec), Some(i)) => {
                let (o, c) = forward(spec, &params[i], private)?;
                (o, Some(c))
            }
            _ => (DMatrix::zeros(n, pw), None),
        };
        Ok((hcat(&zs, &ps), zc, pc))
    }

    /// Arm-`a` outcome prediction for source `s` in standardized units.
    pub fn predict(&self, params: &[MlpParams], s: Source, a: Arm, z: &DMatrix<f64>, private: &DMatrix<f64>) -> Result<DVector<f64>> {
        let rep = self.representation(params, s, z, private)?;
        let (o, _) = forward(&self.head, &params[self.idx_head(s, a)], &rep)?;
        Ok(o.column(0).into_owned())
    }
}

/// Standardized rows of one source.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub z: DMatrix<f64>,
    pub private: DMatrix<f64>,
    pub y: DVector<f64>,
    pub arms: Vec<Arm>,
}

#[derive(Debug, Clone)]
pub struct HtceBatch {
    pub rct: SourceBatch,
    pub os: SourceBatch,
}

/// Joint objective: for each source and arm, the mean squared error of that
/// arm's head over the arm's rows; empty (source, arm) cells contribute nothing.
pub fn htce_loss(net: &HtceNet, params: &Vec<MlpParams>, batch: &HtceBatch) -> Result<(f64, Vec<MlpParams>)> {
    let mut grads: Vec<MlpParams> = params.iter().map(|p| p.zeros_like()).collect();
    let mut loss = 0.0;
    for (s, b) in [(Source::Rct, &batch.rct), (Source::Os, &batch.os)] {
        if b.y.is_empty() {
            continue;
        }
        let (rep, zc, pc) = net.rep_forward(params, s, &b.z, &b.private)?;
        let mut g_rep = DMatrix::zeros(rep.nrows(), rep.ncols());
        for a in Arm::BOTH {
            let rows: Vec<usize> = (0..b.arms.len()).filter(|&i| b.arms[i] == a).collect();
            if rows.is_empty() {
                continue;
            }
            let h = net.idx_head(s, a);
            let (o, cache) = forward(&net.head, &params[h], &select_rows(&rep, &rows))?;
            let n_a = rows.len() as f64;
            let mut up = DMatrix::zeros(rows.len(), 1);
            for (k, &i) in rows.iter().enumerate() {
                let r = o[(k, 0)] - b.y[i];
                loss += r * r / n_a;
                up[(k, 0)] = 2.0 * r / n_a;
            }
            let (g, g_in) = backward(&net.head, &params[h], &cache, &up)?;
            grads[h] = g;
            for (k, &i) in rows.iter().enumerate() {
                g_rep.row_mut(i).copy_from(&g_in.row(k));
            }
        }
        let sw = net.shared_width();
        if let (Some(spec), Some(i), Some(c)) = (&net.shared, net.idx_shared(), zc) {
            let (g, _) = backward(spec, &params[i], &c, &g_rep.columns(0, sw).into_owned())?;
            for (acc, gi) in grads[i].layers.iter_mut().zip(g.layers) {
                acc.w += gi.w;
                acc.b += gi.b;
            }
        }
        if let (Some(spec), Some(i), Some(c)) = (net.private(s), net.idx_private(s), pc) {
            let (g, _) = backward(spec, &params[i], &c, &g_rep.columns(sw, spec.output_dim).into_owned())?;
            grads[i] = g;
        }
    }
    Ok((loss, grads))
}

/// Fixed standardization shared by every fold model.
#[derive(Debug, Clone, PartialEq)]
struct HtceScaling {
    z: ScalerParams,
    u: ScalerParams,
    v: ScalerParams,
    y_mean: f64,
    y_sd: f64,
}

impl HtceScaling {
    fn fit(os: &Dataset, rct: &Dataset) -> Result<Self> {
        let l = os.layout;
        let cols = |ds: &Dataset, r: std::ops::Range<usize>| ds.x.columns(r.start, r.len()).into_owned();
        let y_mean = os.y.mean();
        Ok(Self {
            z: ScalerParams::fit(&cols(os, l.z_range(Source::Os)))?,
            u: ScalerParams::fit(&cols(rct, 0..l.p_u))?,
            v: ScalerParams::fit(&cols(os, l.p_z..l.p_o()))?,
            y_mean,
            y_sd: os.y.variance().sqrt().max(1e-8),
        })
    }

    /// (standardized Z, standardized private block) of rows `rows` of `ds`.
    fn blocks(&self, ds: &Dataset, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let l = ds.layout;
        let zr = l.z_range(ds.source);
        let z = self.z.transform(&x.columns(zr.start, zr.len()).into_owned())?;
        let p = match ds.source {
            Source::Rct => self.u.transform(&x.columns(0, l.p_u).into_owned())?,
            Source::Os => self.v.transform(&x.columns(l.p_z, l.p_v).into_owned())?,
        };
        Ok((z, p))
    }

    fn batch(&self, ds: &Dataset, rows: &[usize]) -> Result<SourceBatch> {
        let (z, private) = self.blocks(ds, &select_rows(&ds.x, rows))?;
        Ok(SourceBatch {
            z,
            private,
            y: select_entries(&ds.y, rows).map(|v| (v - self.y_mean) / self.y_sd),
            arms: rows.iter().map(|&i| ds.a[i]).collect(),
        })
    }
}

/// One trained network with its input scaling.
#[derive(Debug, Clone)]
struct HtceModel {
    net: HtceNet,
    params: Vec<MlpParams>,
    scaling: Arc<HtceScaling>,
    layout: crate::data::CovariateLayout,
}

impl HtceModel {
    fn rct_blocks(&self, x_r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if x_r.ncols() != self.layout.p_r() {
            return invalid(format!("expected {} RCT columns, got {}", self.layout.p_r(), x_r.ncols()));
        }
        let zr = self.layout.z_range(Source::Rct);
        Ok((
            self.scaling.z.transform(&x_r.columns(zr.start, zr.len()).into_owned())?,
            self.scaling.u.transform(&x_r.columns(0, self.layout.p_u).into_owned())?,
        ))
    }

    fn rct_arm(&self, a: Arm, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (z, u) = self.rct_blocks(x_r)?;
        let s = &self.scaling;
        Ok(self.net.predict(&self.params, Source::Rct, a, &z, &u)?.map(|v| s.y_mean + s.y_sd * v))
    }

    fn representation(&self, x_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (z, u) = self.rct_blocks(x_r)?;
        self.net.representation(&self.params, Source::Rct, &z, &u)
    }
}

/// T-learner map: difference of the RCT arm heads, averaged over fold models.
#[derive(Debug)]
struct HtceTMap {
    models: Vec<HtceModel>,
}

impl CateMap for HtceTMap {
    fn tau(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(x_r.nrows());
        for m in &self.models {
            acc += m.rct_arm(Arm::Treated, x_r)? - m.rct_arm(Arm::Control, x_r)?;
        }
        Ok(acc / self.models.len() as f64)
    }
}

/// DR map: linear regression of pseudo-outcomes on a full-data representation.
#[derive(Debug)]
struct HtceDrMap {
    model: HtceModel,
    regression: LinearModel,
}

impl CateMap for HtceDrMap {
    fn tau(&self, x_r: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.regression.predict(&self.model.representation(x_r)?)
    }
}

fn train_htce(ctx: &FitContext, scaling: &Arc<HtceScaling>, rct_rows: &[usize], stream: u64) -> Result<(HtceModel, usize)> {
    let cfg = &ctx.config.htce;
    let l = ctx.rct.layout;
    let net = HtceNet::new(cfg, l.p_z, l.p_u, l.p_v)?;
    let mut rng = derive_rng(ctx.seed, stage::HTCE, stream);
    let mut params = net.init(&mut rng)?;
    // Joint row index: OS rows first, then the RCT training rows.
    let n_o = ctx.os.n();
    let all: Vec<usize> = (0..n_o + rct_rows.len()).collect();
    let (train, val) = super::calm_nn::val_split(&all, cfg.train.val_fraction, &mut rng);
    let make = |idx: &[usize]| -> Result<HtceBatch> {
        let os_rows: Vec<usize> = idx.iter().copied().filter(|&i| i < n_o).collect();
        let rct: Vec<usize> = idx.iter().filter(|&&i| i >= n_o).map(|&i| rct_rows[i - n_o]).collect();
        Ok(HtceBatch { rct: scaling.batch(ctx.rct, &rct)?, os: scaling.batch(ctx.os, &os_rows)? })
    };
    let val_batch = make(&val)?;
    let trace = train_loop(
        "htce",
        &mut params,
        &train,
        !val.is_empty(),
        &cfg.train,
        &mut rng,
        |p, b, _, _| htce_loss(&net, p, &make(b)?),
        |_| {},
        |p| Ok(htce_loss(&net, p, &val_batch)?.0),
    )?;
    Ok((HtceModel { net, params, scaling: Arc::clone(scaling), layout: l }, trace.epochs_run))
}

fn base_diagnostics(epochs: &[usize]) -> Result<BTreeMap<String, serde_json::Value>> {
    let mut d = BTreeMap::new();
    d.insert("implementation".into(), "simplified".into());
    d.insert("epochs".into(), serde_json::to_value(epochs)?);
    Ok(d)
}

/// Fit both variants, sharing the fold networks.
pub fn fit_htce_pair(ctx: &FitContext) -> Result<(FittedCate, FittedCate)> {
    ctx.validate()?;
    let scaling = Arc::new(HtceScaling::fit(ctx.os, ctx.rct)?);
    let n = ctx.rct.n();
    let k = ctx.folds.k;
    let mut tau = DVector::zeros(n);
    let mut m = DVector::zeros(n);
    let mut models = Vec::with_capacity(k);
    let mut epochs = Vec::with_capacity(k + 1);
    let mut prov = Provenance::new(n, Some(ctx.folds.clone()));
    let mut os = os_record("htce_os_rows", ctx.os.n());
    os.evaluated_rows = (0..n).collect();
    prov.push(os);
    for fold in 0..k {
        let train = ctx.folds.rows_out(fold);
        let held = ctx.folds.rows_in(fold);
        let (model, ep) = train_htce(ctx, &scaling, &train, fold as u64)?;
        epochs.push(ep);
        let xh = select_rows(&ctx.rct.x, &held);
        let mu1 = model.rct_arm(Arm::Treated, &xh)?;
        let mu0 = model.rct_arm(Arm::Control, &xh)?;
        for (j, &i) in held.iter().enumerate() {
            tau[i] = mu1[j] - mu0[j];
            m[i] = ctx.pi.pi(Arm::Control, i) * mu1[j] + ctx.pi.pi(Arm::Treated, i) * mu0[j];
        }
        let mut rec = rct_record(format!("htce_fold{fold}"), "htce", &train);
        rec.evaluated_rows = held;
        prov.push(rec);
        models.push(model);
    }
    let mut prov_dr = prov.clone();
    if ctx.config.htce.zero_augmentation {
        m.fill(0.0);
    }
    let po = pseudo_outcomes(ctx.rct, &m, ctx.pi)?;

    let p_r = ctx.rct.layout.p_r();
    let t_fit = FittedCate {
        method: Method::HtceT,
        prelim: Some(Arc::new(HtceTMap { models })),
        correction: LinearModel::constant(0.0, p_r),
        tau_tilde_train: tau,
        pseudo_outcomes: po.psi.clone(),
        provenance: prov,
        diagnostics: base_diagnostics(&epochs)?,
    };

    // DR: one network on all rows provides the representation for the final regression.
    let (full, ep) = train_htce(ctx, &scaling, &(0..n).collect::<Vec<_>>(), k as u64)?;
    epochs.push(ep);
    let rep = full.representation(&ctx.rct.x)?;
    let fit = fit_cate_correction(&rep, &po.psi, &DVector::zeros(n), &ctx.config.lasso, cv_seed(ctx.seed, role::DR_FINAL, 0, 0))?;
    prov_dr.push(NuisanceRecord {
        name: "htce_dr_final".into(),
        group: "final".into(),
        kind: NuisanceKind::Final,
        source: Source::Rct,
        trained_rows: (0..n).collect(),
        evaluated_rows: (0..n).collect(),
    });
    let tau_dr = fit.model.predict(&rep)?;
    let mut diag = base_diagnostics(&epochs)?;
    diag.insert("final_lambda".into(), json_f64(fit.lambda));
    diag.insert("final_support".into(), fit.model.support_size().into());
    let dr_fit = FittedCate {
        method: Method::HtceDr,
        prelim: Some(Arc::new(HtceDrMap { model: full, regression: fit.model })),
        correction: LinearModel::constant(0.0, p_r),
        tau_tilde_train: tau_dr,
        pseudo_outcomes: po.psi,
        provenance: prov_dr,
        diagnostics: diag,
    };
    Ok((t_fit, dr_fit))
}

pub fn fit_htce(variant: HtceVariant, ctx: &FitContext) -> Result<FittedCate> {
    let (t, dr) = fit_htce_pair(ctx)?;
    Ok(match variant {
        HtceVariant::T => t,
        HtceVariant::Dr => dr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_folds, PropensityModel};
    use crate::dgp::{gen_baseline, BaselineDgpConfig};
    use crate::estimators::{fit_method, EstimatorConfig};
    use crate::neural::grad_check;

    fn tiny() -> HtceConfig {
        HtceConfig {
            shared_hidden: vec![5],
            shared_dim: 3,
            private_hidden: vec![4],
            private_dim: 2,
            head_hidden: vec![4],
            train: TrainConfig { epochs: 4, ..TrainConfig::default() },
            zero_augmentation: false,
        }
    }

    fn batch(net_cfg: &HtceConfig, p_z: usize, p_u: usize, p_v: usize) -> (HtceNet, Vec<MlpParams>, HtceBatch) {
        let net = HtceNet::new(net_cfg, p_z, p_u, p_v).unwrap();
        let mut rng = derive_rng(4, 701, 0);
        let params = net.init(&mut rng).unwrap();
        let g = |n: usize, p: usize, s: f64| DMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 3) as f64 * s).sin());
        let arms = |n: usize| (0..n).map(|i| if i % 3 == 0 { Arm::Treated } else { Arm::Control }).collect();
        let b = HtceBatch {
            rct: SourceBatch { z: g(9, p_z, 0.3), private: g(9, p_u, 0.7), y: g(9, 1, 1.1).column(0).into(), arms: arms(9) },
            os: SourceBatch { z: g(12, p_z, 0.5), private: g(12, p_v, 0.2), y: g(12, 1, 0.9).column(0).into(), arms: arms(12) },
        };
        (net, params, b)
    }

    #[test]
    fn joint_loss_gradient() {
        for (pz, pu, pv) in [(3, 2, 4), (3, 0, 0), (0, 2, 2)] {
            let (net, params, b) = batch(&tiny(), pz, pu, pv);
            let rep = grad_check(|q| htce_loss(&net, q, &b).unwrap(), &params, 300, 1e-5, 9);
            assert!(rep.max_rel_error < 1e-5, "{pz},{pu},{pv}: {rep:?}");
        }
    }

    #[test]
    fn block_indexing() {
        let net = HtceNet::new(&tiny(), 3, 0, 2).unwrap();
        assert_eq!(net.idx_private(Source::Rct), None);
        assert_eq!(net.idx_private(Source::Os), Some(1));
        assert_eq!(net.idx_head(Source::Rct, Arm::Control), 2);
        assert_eq!(net.n_blocks(), 6);
        assert_eq!(net.rep_dim(), 5);
        assert!(HtceNet::new(&tiny(), 0, 0, 0).is_err());
    }

    #[test]
    fn pair_runs_and_zero_augmentation_matches_naive_target() {
        let cfg = BaselineDgpConfig { n_r: 60, n_o: 150, p_z: 4, p_u: 2, p_v: 3, d_true: 2, ..Default::default() };
        let g = gen_baseline(&cfg, 3).unwrap();
        let pi = PropensityModel::known(0.5).unwrap();
        let folds = make_folds(60, 2, 1).unwrap();
        let ecfg = EstimatorConfig { htce: tiny(), ..Default::default() };
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &ecfg, seed: 2 };
        let (t, dr) = fit_htce_pair(&ctx).unwrap();
        assert_eq!(t.diagnostics["implementation"], "simplified");
        assert!(t.provenance.audit().is_empty());
        assert!(dr.provenance.audit().is_empty());
        assert!(t.tau_tilde_train.iter().all(|v| v.is_finite()));
        assert_eq!(t.correction_width(), 6);

        let zero_cfg = EstimatorConfig { htce: HtceConfig { zero_augmentation: true, ..tiny() }, ..ecfg.clone() };
        let ctx = FitContext { config: &zero_cfg, ..ctx };
        let dr0 = fit_htce(HtceVariant::Dr, &ctx).unwrap();
        let naive = fit_method(Method::Naive, &ctx).unwrap();
        assert_eq!(dr0.pseudo_outcomes, naive.pseudo_outcomes);
    }
}
