use std::collections::BTreeMap;
use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::seq::{index::sample, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crossfit_pipeline, json_f64, os_record, rct_record, ArmPredictions, CalibratedModel, FitContext, FittedCate, Method, Provenance};
use crate::alignment::{anneal_lambda, AlignMode, AlignmentConfig, PreparedAlignment};
use crate::data::{select_entries, select_rows, Arm, ScalerParams, Source};
use crate::error::{invalid, CalmError, Result};
use crate::neural::{backward, forward, minibatches, AdamConfig, AdamState, EarlyStopping, Mlp, MlpParams, MlpSpec, Parameters, TrainConfig};
use crate::rng::{derive_rng, stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalmNnConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Hidden widths of each OS outcome head.
    pub head_hidden: Vec<usize>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Squared-norm penalty on the discrepancy-head weights.
    pub cal_penalty: f64,
    pub align: AlignmentConfig,
    /// Use contrastive alignment instead of the configured mode when `n_r` is at most this.
    pub contrastive_below: Option<usize>,
    /// Start the RCT encoder from the OS encoder restricted to Z.
    pub init_from_os: bool,
    pub stage2_scope: Stage2Scope,
    /// Independent Stage-2 runs averaged per fold.
    pub stage2_members: usize,
}

/// Which RCT-encoder parameters Stage 2 updates; the rest keep their initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Scope {
    All,
    /// First layer only.
    InputLayer,
    /// First-layer weights of the RCT-only covariates only.
    RctInputs,
    /// As `RctInputs`, with those weights kept in the row span of the OS-only weights.
    OsSpan,
}

impl Stage2Scope {
    /// Zero the frozen entries of `enc`, or with `restore` copy them back from it.
    fn mask(self, enc: &mut MlpParams, p_u: usize, restore: Option<&MlpParams>) {
        if self == Stage2Scope::All {
            return;
        }
        for (l, layer) in enc.layers.iter_mut().enumerate() {
            let src = restore.map(|r| &r.layers[l]);
            if l == 0 {
                if matches!(self, Stage2Scope::RctInputs | Stage2Scope::OsSpan) {
                    let p = layer.w.nrows() - p_u;
                    match src {
                        Some(r) => {
                            layer.w.rows_mut(p_u, p).copy_from(&r.w.rows(p_u, p));
                            layer.b.copy_from(&r.b);
                        }
                        None => {
                            layer.w.rows_mut(p_u, p).fill(0.0);
                            layer.b.fill(0.0);
                        }
                    }
                }
                continue;
            }
            match src {
                Some(r) => *layer = r.clone(),
                None => {
                    layer.w.fill(0.0);
                    layer.b.fill(0.0);
                }
            }
        }
    }
}

impl Default for CalmNnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden: vec![64, 64],
            head_hidden: vec![32],
            stage1: TrainConfig {
                epochs: 300,
                adam: AdamConfig { weight_decay: 1e-4, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
            // Small minibatches with a few bagged members: the RCT side is small and one
            // full-batch run overfits the RCT-only weights quickly.
            stage2: TrainConfig {
                epochs: 200,
                full_batch_max: 0,
                batch_size: 32,
                adam: AdamConfig { lr: 3e-3, weight_decay: 1e-4, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
            cal_penalty: 1.0,
            align: AlignmentConfig::default(),
            contrastive_below: Some(250),
            init_from_os: true,
            stage2_scope: Stage2Scope::OsSpan,
            stage2_members: 5,
        }
    }
}

impl CalmNnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return invalid("embedding dimension must be positive");
        }
        if !(self.cal_penalty >= 0.0) {
            return invalid("calibration penalty must be non-negative");
        }
        if self.stage2_members == 0 {
            return invalid("Stage 2 needs at least one member");
        }
        if !self.init_from_os && self.stage2_scope != Stage2Scope::All {
            return invalid("freezing RCT-encoder layers requires initializing them from the OS encoder");
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.align.validate()
    }

    pub fn encoder_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec::new(input_dim, self.hidden.clone(), self.embed_dim)
    }

    pub fn head_spec(&self) -> MlpSpec {
        MlpSpec::new(self.embed_dim, self.head_hidden.clone(), 1)
    }

    /// Linear map from the embedding to one output.
    pub fn discrepancy_spec(&self) -> MlpSpec {
        MlpSpec::new(self.embed_dim, Vec::new(), 1)
    }

    /// Alignment actually used for an RCT of size `n_r`.
    pub fn effective_align(&self, n_r: usize) -> AlignmentConfig {
        match self.contrastive_below {
            Some(t) if n_r <= t => AlignmentConfig { mode: AlignMode::Contrastive, ..self.align },
            _ => self.align,
        }
    }
}

/// Per-arm squared error: `Σ_a mean_{i: A_i = a} (out_i − y_i)²`, its output gradient.
fn per_arm_sq(out: &DVector<f64>, y: &DVector<f64>, arms: &[Arm]) -> (f64, DVector<f64>) {
    let mut counts = [0usize; 2];
    for a in arms {
        counts[a.index()] += 1;
    }
    let mut loss = 0.0;
    let mut g = DVector::zeros(out.len());
    for i in 0..out.len() {
        let n_a = counts[arms[i].index()] as f64;
        let r = out[i] - y[i];
        loss += r * r / n_a;
        g[i] = 2.0 * r / n_a;
    }
    (loss, g)
}

/// Outputs of both heads at every row: column `a` holds head `a`.
fn heads_forward(
    head_spec: &MlpSpec,
    heads: &[MlpParams],
    e: &DMatrix<f64>,
    arms: &[Arm],
) -> Result<(DVector<f64>, Vec<(Vec<usize>, crate::neural::ForwardCache)>)> {
    let mut out = DVector::zeros(e.nrows());
    let mut caches = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let rows: Vec<usize> = (0..e.nrows()).filter(|&i| arms[i] == arm).collect();
        let (o, cache) = forward(head_spec, &heads[arm.index()], &select_rows(e, &rows))?;
        for (k, &i) in rows.iter().enumerate() {
            out[i] = o[(k, 0)];
        }
        caches.push((rows, cache));
    }
    Ok((out, caches))
}

/// Backpropagate `g_out` through both heads; returns head gradients and the embedding gradient.
fn heads_backward(
    head_spec: &MlpSpec,
    heads: &[MlpParams],
    caches: &[(Vec<usize>, crate::neural::ForwardCache)],
    g_out: &DVector<f64>,
    n: usize,
    d: usize,
) -> Result<(Vec<MlpParams>, DMatrix<f64>)> {
    let mut g_e = DMatrix::zeros(n, d);
    let mut grads = Vec::with_capacity(2);
    for (arm_idx, (rows, cache)) in caches.iter().enumerate() {
        let up = DMatrix::from_fn(rows.len(), 1, |k, _| g_out[rows[k]]);
        if rows.is_empty() {
            grads.push(heads[arm_idx].zeros_like());
            continue;
        }
        let (g, g_in) = backward(head_spec, &heads[arm_idx], cache, &up)?;
        for (k, &i) in rows.iter().enumerate() {
            g_e.row_mut(i).copy_from(&g_in.row(k));
        }
        grads.push(g);
    }
    Ok((grads, g_e))
}

/// Stage-1 objective on standardized inputs: per-arm mean squared error of the OS heads.
pub fn stage1_loss(
    enc_spec: &MlpSpec,
    head_spec: &MlpSpec,
    params: &(MlpParams, Vec<MlpParams>),
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    arms: &[Arm],
) -> Result<(f64, (MlpParams, Vec<MlpParams>))> {
    let (enc, heads) = params;
    let (e, enc_cache) = forward(enc_spec, enc, x)?;
    let (out, caches) = heads_forward(head_spec, heads, &e, arms)?;
    let (loss, g_out) = per_arm_sq(&out, y, arms);
    let (g_heads, g_e) = heads_backward(head_spec, heads, &caches, &g_out, e.nrows(), e.ncols())?;
    let (g_enc, _) = backward(enc_spec, enc, &enc_cache, &g_e)?;
    Ok((loss, (g_enc, g_heads)))
}

/// Frozen OS encoder and outcome heads, with the scalings they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Model {
    pub scaler: ScalerParams,
    pub y_mean: f64,
    pub y_sd: f64,
    pub encoder: Mlp,
    pub heads: Vec<Mlp>,
}

impl Stage1Model {
    pub fn embed_os(&self, x_o: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.encoder.predict(&self.scaler.transform(x_o)?)
    }

    pub fn head_params(&self) -> Vec<MlpParams> {
        self.heads.iter().map(|h| h.params.clone()).collect()
    }
}

/// One Stage-2 minibatch on standardized RCT inputs.
#[derive(Debug, Clone)]
pub struct Stage2Batch {
    pub x: DMatrix<f64>,
    /// Standardized outcomes.
    pub y: DVector<f64>,
    pub arms: Vec<Arm>,
    /// Positions of the batch rows in the alignment's RCT indexing.
    pub rows: Vec<usize>,
    /// OS comparison rows for MMD.
    pub os_rows: Vec<usize>,
    pub lambda: f64,
}

/// Stage-2 composite objective: per-arm calibration error through the frozen
/// OS heads, a squared-norm penalty on the discrepancy weights, and the
/// weighted alignment penalty on the RCT embeddings.
pub fn stage2_loss(
    stage1: &Stage1Model,
    enc_spec: &MlpSpec,
    disc_spec: &MlpSpec,
    params: &(MlpParams, Vec<MlpParams>),
    batch: &Stage2Batch,
    align: &PreparedAlignment,
    cal_penalty: f64,
) -> Result<(f64, (MlpParams, Vec<MlpParams>))> {
    let (enc, disc) = params;
    let head_spec = &stage1.heads[0].spec;
    let heads = stage1.head_params();
    let (e, enc_cache) = forward(enc_spec, enc, &batch.x)?;
    let (n, d) = e.shape();
    let (base, base_caches) = heads_forward(head_spec, &heads, &e, &batch.arms)?;
    let (delta, disc_caches) = heads_forward(disc_spec, disc, &e, &batch.arms)?;
    let (mut loss, g_out) = per_arm_sq(&(&base + &delta), &batch.y, &batch.arms);
    let (_, g_e_base) = heads_backward(head_spec, &heads, &base_caches, &g_out, n, d)?;
    let (mut g_disc, g_e_disc) = heads_backward(disc_spec, disc, &disc_caches, &g_out, n, d)?;
    let mut g_e = g_e_base + g_e_disc;
    for (p, g) in disc.iter().zip(g_disc.iter_mut()) {
        for (layer, gl) in p.layers.iter().zip(g.layers.iter_mut()) {
            loss += cal_penalty * layer.w.norm_squared();
            gl.w += &layer.w * (2.0 * cal_penalty);
        }
    }
    if batch.lambda > 0.0 {
        let (a, g_a) = align.loss(&e, &batch.rows, &batch.os_rows)?;
        loss += batch.lambda * a;
        g_e += g_a * batch.lambda;
    }
    let (g_enc, _) = backward(enc_spec, enc, &enc_cache, &g_e)?;
    Ok((loss, (g_enc, g_disc)))
}

/// Calibration error only (no penalties), for validation.
fn stage2_fit_error(stage1: &Stage1Model, enc: &Mlp, disc: &[Mlp], x: &DMatrix<f64>, y: &DVector<f64>, arms: &[Arm]) -> Result<f64> {
    let e = enc.predict(x)?;
    let heads = stage1.head_params();
    let (base, _) = heads_forward(&stage1.heads[0].spec, &heads, &e, arms)?;
    let dp: Vec<MlpParams> = disc.iter().map(|m| m.params.clone()).collect();
    let (delta, _) = heads_forward(&disc[0].spec, &dp, &e, arms)?;
    Ok(per_arm_sq(&(base + delta), y, arms).0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Split `rows` into (train, validation) with a seeded shuffle.
pub(crate) fn val_split(rows: &[usize], frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((rows.len() as f64) * frac).round() as usize;
    if n_val == 0 || n_val >= rows.len() {
        return (rows.to_vec(), Vec::new());
    }
    let mut r = rows.to_vec();
    r.shuffle(rng);
    let val = r.split_off(r.len() - n_val);
    r.sort_unstable();
    let mut v = val;
    v.sort_unstable();
    (r, v)
}

/// Generic Adam loop with early stopping on `val_loss`.
/// `project` runs after every update (e.g. to hold frozen blocks fixed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_loop<P, S, R, V>(
    stage_name: &str,
    params: &mut P,
    train_rows: &[usize],
    has_val: bool,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut step: S,
    mut project: R,
    mut val_loss: V,
) -> Result<TrainTrace>
where
    P: Parameters,
    S: FnMut(&P, &[usize], usize, &mut ChaCha8Rng) -> Result<(f64, P)>,
    R: FnMut(&mut P),
    V: FnMut(&P) -> Result<f64>,
{
    let mut adam = AdamState::new(cfg.adam, params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut trace = TrainTrace::default();
    let batch = cfg.batch_for(train_rows.len());
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let batches = minibatches(train_rows, batch, rng);
        let nb = batches.len();
        for b in batches {
            let (loss, grad) = step(params, &b, epoch, rng)?;
            if !loss.is_finite() {
                trace.train_loss.push(loss);
                return Err(CalmError::Divergence { stage: stage_name.into(), epoch, trace: trace.train_loss });
            }
            adam.step(params, &grad).map_err(|e| match e {
                CalmError::NonFinite(_) => CalmError::Divergence {
                    stage: stage_name.into(),
                    epoch,
                    trace: trace.train_loss.clone(),
                },
                other => other,
            })?;
            project(params);
            epoch_loss += loss / nb as f64;
        }
        trace.train_loss.push(epoch_loss);
        trace.epochs_run = epoch + 1;
        if has_val {
            let v = val_loss(params)?;
            trace.val_loss.push(v);
            if !v.is_finite() {
                return Err(CalmError::Divergence { stage: stage_name.into(), epoch, trace: trace.train_loss });
            }
            if stopper.update(epoch, v, params) {
                break;
            }
        }
    }
    if has_val {
        trace.best_epoch = stopper.best_epoch;
        if let Some(best) = stopper.into_best() {
            *params = best;
        }
    } else {
        trace.best_epoch = trace.epochs_run.saturating_sub(1);
    }
    Ok(trace)
}

/// Train the OS encoder and per-arm heads on the whole OS sample.
pub fn fit_stage1(ctx: &FitContext, cfg: &CalmNnConfig) -> Result<(Stage1Model, TrainTrace)> {
    let os = ctx.os;
    let scaler = ScalerParams::fit(&os.x)?;
    let x = scaler.transform(&os.x)?;
    let y_mean = os.y.mean();
    let y_sd = os.y.variance().sqrt().max(1e-8);
    let y = os.y.map(|v| (v - y_mean) / y_sd);
    let mut rng = derive_rng(ctx.seed, stage::STAGE1, 0);
    let enc = Mlp::init(cfg.encoder_spec(x.ncols()), &mut rng)?;
    let heads = [Mlp::init(cfg.head_spec(), &mut rng)?, Mlp::init(cfg.head_spec(), &mut rng)?];
    let all: Vec<usize> = (0..os.n()).collect();
    let (train, val) = val_split(&all, cfg.stage1.val_fraction, &mut rng);
    let x_val = select_rows(&x, &val);
    let y_val = select_entries(&y, &val);
    let a_val: Vec<Arm> = val.iter().map(|&i| os.a[i]).collect();
    let (es, hs) = (enc.spec.clone(), heads[0].spec.clone());
    let mut params = (enc.params, vec![heads[0].params.clone(), heads[1].params.clone()]);
    let trace = train_loop(
        "stage 1",
        &mut params,
        &train,
        !val.is_empty(),
        &cfg.stage1,
        &mut rng,
        |p, b, _, _| {
            let arms: Vec<Arm> = b.iter().map(|&i| os.a[i]).collect();
            stage1_loss(&es, &hs, p, &select_rows(&x, b), &select_entries(&y, b), &arms)
        },
        |_| {},
        |p| Ok(stage1_loss(&es, &hs, p, &x_val, &y_val, &a_val)?.0),
    )?;
    debug!("stage 1 stopped after {} epochs (best {})", trace.epochs_run, trace.best_epoch);
    let (enc_p, head_p) = params;
    let model = Stage1Model {
        scaler,
        y_mean,
        y_sd,
        encoder: Mlp { spec: es, params: enc_p },
        heads: head_p.into_iter().map(|p| Mlp { spec: hs.clone(), params: p }).collect(),
    };
    Ok((model, trace))
}

/// Standardization of `X^r = (U, Z)`: U by RCT moments, Z by the OS moments the encoder saw.
fn rct_scaler(ctx: &FitContext, stage1: &Stage1Model) -> Result<ScalerParams> {
    let layout = ctx.rct.layout;
    let u = ctx.rct.x.columns(0, layout.p_u).into_owned();
    let su = ScalerParams::fit(&u)?;
    let zr = layout.z_range(Source::Os);
    let mut mean = su.mean.clone();
    let mut sd = su.sd.clone();
    let mut constant = su.constant.clone();
    for j in zr {
        mean.push(stage1.scaler.mean[j]);
        sd.push(stage1.scaler.sd[j]);
        constant.push(stage1.scaler.constant[j]);
    }
    Ok(ScalerParams { mean, sd, constant })
}

/// OS encoder weights moved onto RCT inputs: Z rows copied, U rows zero.
/// Orthogonal projector onto the row span of the OS-only first-layer weights.
fn os_span_projector(stage1: &Stage1Model, p_z: usize) -> DMatrix<f64> {
    let w = &stage1.encoder.params.layers[0].w;
    let w_v = w.rows(p_z, w.nrows() - p_z);
    let svd = w_v.into_owned().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let tol = svd.singular_values.max() * 1e-10;
    let mut p = DMatrix::zeros(w.ncols(), w.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let r = v_t.row(k);
            p += r.transpose() * r;
        }
    }
    p
}

fn init_rct_encoder(stage1: &Stage1Model, spec: &MlpSpec, p_u: usize, p_z: usize) -> Result<Mlp> {
    let mut enc = Mlp::zeros(spec.clone())?;
    for (l, (dst, src)) in enc.params.layers.iter_mut().zip(&stage1.encoder.params.layers).enumerate() {
        if l == 0 {
            dst.w.rows_mut(p_u, p_z).copy_from(&src.w.rows(0, p_z));
            dst.b.copy_from(&src.b);
        } else {
            *dst = src.clone();
        }
    }
    Ok(enc)
}

/// One trained RCT encoder with its discrepancy heads.
#[derive(Debug, Clone)]
pub struct Stage2Member {
    pub encoder: Mlp,
    pub discrepancy: Vec<Mlp>,
}

/// RCT encoder(s) plus discrepancy heads on top of the frozen Stage-1 model.
/// With several members the base and discrepancy predictions are averaged.
#[derive(Debug, Clone)]
pub struct NeuralCalibrated {
    pub stage1: Arc<Stage1Model>,
    pub scaler: ScalerParams,
    pub members: Vec<Stage2Member>,
}

impl NeuralCalibrated {
    pub fn embed(&self, member: usize, x_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.members.get(member).ok_or_else(|| CalmError::InvalidArgument(format!("no Stage-2 member {member}")))?;
        m.encoder.predict(&self.scaler.transform(x_r)?)
    }
}

impl CalibratedModel for NeuralCalibrated {
    fn arms(&self, x_r: &DMatrix<f64>) -> Result<ArmPredictions> {
        let s1 = &self.stage1;
        let xs = self.scaler.transform(x_r)?;
        let n = x_r.nrows();
        let mut base = [DVector::zeros(n), DVector::zeros(n)];
        let mut disc = [DVector::zeros(n), DVector::zeros(n)];
        for m in &self.members {
            let e = m.encoder.predict(&xs)?;
            for a in 0..2 {
                base[a] += s1.heads[a].predict(&e)?.column(0);
                disc[a] += m.discrepancy[a].predict(&e)?.column(0);
            }
        }
        let k = self.members.len() as f64;
        Ok(ArmPredictions {
            base: base.map(|b| b.map(|v| s1.y_mean + s1.y_sd * v / k)),
            discrepancy: disc.map(|d| d.map(|v| s1.y_sd * v / k)),
        })
    }
}

/// Stage 2 on the RCT rows `train`: `cfg.stage2_members` independently shuffled runs.
fn fit_stage2(
    ctx: &FitContext,
    cfg: &CalmNnConfig,
    stage1: &Arc<Stage1Model>,
    w_os: &DMatrix<f64>,
    z_os: &DMatrix<f64>,
    train: &[usize],
    fold: usize,
) -> Result<(NeuralCalibrated, Vec<TrainTrace>)> {
    let layout = ctx.rct.layout;
    let scaler = rct_scaler(ctx, stage1)?;
    let x_all = scaler.transform(&select_rows(&ctx.rct.x, train))?;
    let y_all = select_entries(&ctx.rct.y, train).map(|v| (v - stage1.y_mean) / stage1.y_sd);
    let a_all: Vec<Arm> = train.iter().map(|&i| ctx.rct.a[i]).collect();
    let enc_spec = cfg.encoder_spec(layout.p_r());
    let disc_spec = cfg.discrepancy_spec();
    let z_r = x_all.columns(layout.p_u, layout.p_z).into_owned();
    let align_cfg = cfg.effective_align(ctx.rct.n());
    let n_os = w_os.nrows();
    let epochs = cfg.stage2.epochs;
    let lambda0 = align_cfg.lambda0;
    let scope = cfg.stage2_scope;
    let local: Vec<usize> = (0..train.len()).collect();
    let span = (scope == Stage2Scope::OsSpan).then(|| os_span_projector(stage1, layout.p_z));
    let to_span = |w: &mut DMatrix<f64>| {
        if let Some(p) = &span {
            let u = w.rows(0, layout.p_u) * p;
            w.rows_mut(0, layout.p_u).copy_from(&u);
        }
    };

    let mut members = Vec::with_capacity(cfg.stage2_members);
    let mut traces = Vec::with_capacity(cfg.stage2_members);
    for member in 0..cfg.stage2_members {
        let mut rng = derive_rng(ctx.seed, stage::STAGE2, (fold * 1000 + member) as u64);
        let enc = if cfg.init_from_os {
            init_rct_encoder(stage1, &enc_spec, layout.p_u, layout.p_z)?
        } else {
            Mlp::init(enc_spec.clone(), &mut rng)?
        };
        let (tr, val) = val_split(&local, cfg.stage2.val_fraction, &mut rng);
        let w_init = enc.predict(&x_all)?;
        let align = PreparedAlignment::new(&align_cfg, z_os, w_os.clone(), &z_r, &w_init)?;
        let x_val = select_rows(&x_all, &val);
        let y_val = select_entries(&y_all, &val);
        let a_val: Vec<Arm> = val.iter().map(|&i| a_all[i]).collect();
        let init_enc = enc.params.clone();
        let mut params = (enc.params, vec![Mlp::zeros(disc_spec.clone())?.params, Mlp::zeros(disc_spec.clone())?.params]);
        let trace = train_loop(
            "stage 2",
            &mut params,
            &tr,
            !val.is_empty(),
            &cfg.stage2,
            &mut rng,
            |p, b, epoch, rng| {
                let os_rows = if align_cfg.mode == AlignMode::Mmd {
                    sample(rng, n_os, b.len().min(n_os)).into_vec()
                } else {
                    Vec::new()
                };
                let batch = Stage2Batch {
                    x: select_rows(&x_all, b),
                    y: select_entries(&y_all, b),
                    arms: b.iter().map(|&i| a_all[i]).collect(),
                    rows: b.to_vec(),
                    os_rows,
                    lambda: anneal_lambda(epoch, epochs, lambda0),
                };
                let (l, mut g) = stage2_loss(stage1, &enc_spec, &disc_spec, p, &batch, &align, cfg.cal_penalty)?;
                scope.mask(&mut g.0, layout.p_u, None);
                to_span(&mut g.0.layers[0].w);
                Ok((l, g))
            },
            |p| {
                scope.mask(&mut p.0, layout.p_u, Some(&init_enc));
                to_span(&mut p.0.layers[0].w);
            },
            |p| {
                let e = Mlp { spec: enc_spec.clone(), params: p.0.clone() };
                let d: Vec<Mlp> = p.1.iter().map(|q| Mlp { spec: disc_spec.clone(), params: q.clone() }).collect();
                stage2_fit_error(stage1, &e, &d, &x_val, &y_val, &a_val)
            },
        )?;
        let (enc_p, disc_p) = params;
        members.push(Stage2Member {
            encoder: Mlp { spec: enc_spec.clone(), params: enc_p },
            discrepancy: disc_p.into_iter().map(|p| Mlp { spec: disc_spec.clone(), params: p }).collect(),
        });
        traces.push(trace);
    }
    Ok((NeuralCalibrated { stage1: Arc::clone(stage1), scaler, members }, traces))
}

/// CALM-NN: neural Stage 1 on the OS, aligned and calibrated Stage 2 per RCT fold.
pub fn fit_calm_nn(ctx: &FitContext) -> Result<FittedCate> {
    ctx.validate()?;
    let cfg = &ctx.config.calm_nn;
    cfg.validate()?;
    let (stage1, trace1) = fit_stage1(ctx, cfg)?;
    let stage1 = Arc::new(stage1);
    let xs_os = stage1.scaler.transform(&ctx.os.x)?;
    let w_os = stage1.encoder.predict(&xs_os)?;
    let zr = ctx.os.layout.z_range(Source::Os);
    let z_os = xs_os.columns(zr.start, zr.len()).into_owned();

    let mut diag = BTreeMap::new();
    diag.insert("stage1_epochs".into(), trace1.epochs_run.into());
    diag.insert("stage1_best_epoch".into(), trace1.best_epoch.into());
    if let Some(v) = trace1.val_loss.get(trace1.best_epoch) {
        diag.insert("stage1_val_loss".into(), json_f64(*v));
    }
    diag.insert("align_mode".into(), cfg.effective_align(ctx.rct.n()).mode.as_str().into());
    let mut prov = Provenance::new(ctx.rct.n(), Some(ctx.folds.clone()));
    let mut os = os_record("stage1_os_model", ctx.os.n());
    os.evaluated_rows = (0..ctx.rct.n()).collect();
    prov.push(os);
    let mut epochs2 = Vec::new();
    let mut val2 = Vec::new();
    let fitted = crossfit_pipeline(Method::CalmNn, ctx, prov, BTreeMap::new(), |k, train| {
        let (model, traces) = fit_stage2(ctx, cfg, &stage1, &w_os, &z_os, train, k)?;
        for t in traces {
            epochs2.push(t.epochs_run);
            val2.push(t.val_loss.get(t.best_epoch).copied().unwrap_or(f64::NAN));
        }
        Ok((
            Arc::new(model) as Arc<dyn CalibratedModel>,
            vec![rct_record(format!("stage2_fold{k}"), "stage2", train)],
        ))
    })?;
    let mut fitted = fitted;
    diag.insert("stage2_epochs".into(), serde_json::to_value(&epochs2)?);
    diag.insert("stage2_val_loss".into(), val2.into_iter().map(json_f64).collect());
    fitted.diagnostics.append(&mut diag);
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Radius;
    use crate::data::{make_folds, PropensityModel};
    use crate::dgp::{gen_latent_nonlinear, LatentDgpConfig};
    use crate::estimators::EstimatorConfig;
    use crate::neural::grad_check;

    fn tiny_cfg() -> CalmNnConfig {
        CalmNnConfig {
            embed_dim: 3,
            hidden: vec![6, 6],
            head_hidden: vec![4],
            stage1: TrainConfig { epochs: 5, ..TrainConfig::default() },
            stage2: TrainConfig { epochs: 5, ..TrainConfig::default() },
            ..CalmNnConfig::default()
        }
    }

    fn data() -> crate::dgp::Generated {
        let cfg = LatentDgpConfig {
            p_z: 3,
            p_u: 2,
            p_v: 3,
            latent_dim: 2,
            n_r: 40,
            n_o: 120,
            ..Default::default()
        };
        gen_latent_nonlinear(&cfg, 5).unwrap()
    }

    #[test]
    fn stage1_gradient() {
        let g = data();
        let cfg = tiny_cfg();
        let mut rng = derive_rng(1, 700, 0);
        let es = cfg.encoder_spec(6);
        let hs = cfg.head_spec();
        let p = (
            Mlp::init(es.clone(), &mut rng).unwrap().params,
            vec![Mlp::init(hs.clone(), &mut rng).unwrap().params, Mlp::init(hs.clone(), &mut rng).unwrap().params],
        );
        let x = ScalerParams::fit(&g.os.x).unwrap().transform(&g.os.x).unwrap();
        let rep = grad_check(|q| stage1_loss(&es, &hs, q, &x, &g.os.y, &g.os.a).unwrap(), &p, 300, 1e-5, 2);
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn stage2_gradient_for_every_alignment_mode() {
        let g = data();
        let ecfg = EstimatorConfig { calm_nn: tiny_cfg(), ..Default::default() };
        let pi = PropensityModel::known(0.5).unwrap();
        let folds = make_folds(40, 2, 1).unwrap();
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &ecfg, seed: 1 };
        let (s1, _) = fit_stage1(&ctx, &ecfg.calm_nn).unwrap();
        let s1 = Arc::new(s1);
        let xs = s1.scaler.transform(&g.os.x).unwrap();
        let w_os = s1.encoder.predict(&xs).unwrap();
        let z_os = xs.columns(0, 3).into_owned();
        let scaler = rct_scaler(&ctx, &s1).unwrap();
        let x = scaler.transform(&g.rct.x).unwrap();
        let z_r = x.columns(2, 3).into_owned();
        let enc_spec = ecfg.calm_nn.encoder_spec(5);
        let disc_spec = ecfg.calm_nn.discrepancy_spec();
        let mut rng = derive_rng(2, 700, 0);
        let p = (
            Mlp::init(enc_spec.clone(), &mut rng).unwrap().params,
            vec![Mlp::init(disc_spec.clone(), &mut rng).unwrap().params, Mlp::init(disc_spec.clone(), &mut rng).unwrap().params],
        );
        for mode in [AlignMode::Mmd, AlignMode::Contrastive, AlignMode::CondMean] {
            let acfg = AlignmentConfig { mode, radius: Radius::Quantile(0.3), ..Default::default() };
            let w_init = Mlp { spec: enc_spec.clone(), params: p.0.clone() }.predict(&x).unwrap();
            let align = PreparedAlignment::new(&acfg, &z_os, w_os.clone(), &z_r, &w_init).unwrap();
            let batch = Stage2Batch {
                x: x.clone(),
                y: g.rct.y.map(|v| (v - s1.y_mean) / s1.y_sd),
                arms: g.rct.a.clone(),
                rows: (0..40).collect(),
                os_rows: (0..30).collect(),
                lambda: 0.7,
            };
            let rep = grad_check(
                |q| stage2_loss(&s1, &enc_spec, &disc_spec, q, &batch, &align, 0.05).unwrap(),
                &p,
                300,
                1e-5,
                3,
            );
            assert!(rep.max_rel_error < 1e-5, "{mode:?}: {rep:?}");
        }
    }

    #[test]
    fn rct_encoder_init_copies_shared_columns() {
        let g = data();
        let ecfg = EstimatorConfig { calm_nn: tiny_cfg(), ..Default::default() };
        let pi = PropensityModel::known(0.5).unwrap();
        let folds = make_folds(40, 2, 1).unwrap();
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &ecfg, seed: 1 };
        let (s1, _) = fit_stage1(&ctx, &ecfg.calm_nn).unwrap();
        let enc = init_rct_encoder(&s1, &ecfg.calm_nn.encoder_spec(5), 2, 3).unwrap();
        let w0 = &enc.params.layers[0].w;
        assert_eq!(w0.rows(0, 2).amax(), 0.0);
        assert_eq!(w0.rows(2, 3), s1.encoder.params.layers[0].w.rows(0, 3));
        // With V at zero, both encoders see the same standardized Z.
        let zs = DMatrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
        let os_in = crate::data::hcat(&zs, &DMatrix::zeros(4, 3));
        let rct_in = crate::data::hcat(&DMatrix::from_element(4, 2, 9.0), &zs);
        let a = s1.encoder.predict(&os_in).unwrap();
        let b = enc.predict(&rct_in).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn fit_runs_with_clean_ledger_and_frozen_stage1() {
        let g = data();
        let ecfg = EstimatorConfig { calm_nn: tiny_cfg(), ..Default::default() };
        let pi = PropensityModel::known(0.5).unwrap();
        let folds = make_folds(40, 2, 1).unwrap();
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &ecfg, seed: 1 };
        let (s1, _) = fit_stage1(&ctx, &ecfg.calm_nn).unwrap();
        let before = s1.clone();
        let s1 = Arc::new(s1);
        let xs = s1.scaler.transform(&g.os.x).unwrap();
        let w_os = s1.encoder.predict(&xs).unwrap();
        let z_os = xs.columns(0, 3).into_owned();
        let rows: Vec<usize> = (0..30).collect();
        fit_stage2(&ctx, &ecfg.calm_nn, &s1, &w_os, &z_os, &rows, 0).unwrap();
        assert_eq!(*s1, before);

        let fit = fit_calm_nn(&ctx).unwrap();
        assert!(fit.provenance.audit().is_empty());
        assert_eq!(fit.diagnostics["align_mode"], "contrastive");
        let again = fit_calm_nn(&ctx).unwrap();
        assert_eq!(fit.tau_tilde_train, again.tau_tilde_train);
    }

    #[test]
    fn os_span_scope_keeps_rct_weights_in_span() {
        let g = data();
        let ecfg = EstimatorConfig { calm_nn: tiny_cfg(), ..Default::default() };
        let pi = PropensityModel::known(0.5).unwrap();
        let folds = make_folds(40, 2, 1).unwrap();
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &ecfg, seed: 1 };
        let (s1, _) = fit_stage1(&ctx, &ecfg.calm_nn).unwrap();
        let p = os_span_projector(&s1, 3);
        assert!((&p * &p - &p).amax() < 1e-10);
        assert!((p.transpose() - &p).amax() < 1e-12);
        let s1 = Arc::new(s1);
        let xs = s1.scaler.transform(&g.os.x).unwrap();
        let w_os = s1.encoder.predict(&xs).unwrap();
        let z_os = xs.columns(0, 3).into_owned();
        let rows: Vec<usize> = (0..30).collect();
        let (model, traces) = fit_stage2(&ctx, &ecfg.calm_nn, &s1, &w_os, &z_os, &rows, 0).unwrap();
        assert_eq!(traces.len(), ecfg.calm_nn.stage2_members);
        let init = init_rct_encoder(&s1, &ecfg.calm_nn.encoder_spec(5), 2, 3).unwrap();
        for m in &model.members {
            let w = &m.encoder.params.layers[0].w;
            let u = w.rows(0, 2).into_owned();
            assert!(u.amax() > 0.0);
            assert!((&u * &p - &u).amax() < 1e-10);
            assert_eq!(w.rows(2, 3), init.params.layers[0].w.rows(2, 3));
            assert_eq!(m.encoder.params.layers[1], init.params.layers[1]);
        }
    }
}
