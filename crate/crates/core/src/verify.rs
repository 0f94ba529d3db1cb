//! Executable checks of the estimator contracts and the headline simulation
//! claims, shared by `calm verify` and the acceptance test target.
//!
//! Each check returns a [`Check`] with a one-line verdict. Checks that run
//! simulations take a worker count; their results do not depend on it.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{mmd_loss, mmd_value, AlignMode, AlignmentConfig, PreparedAlignment, Radius};
use crate::data::{make_folds, Arm, PropensityModel, ScalerParams};
use crate::dgp::{gen_baseline, BaselineDgpConfig, CateForm, DgpConfig, IhdpConfig, LatentDgpConfig};
use crate::error::{invalid, Result};
use crate::estimators::{
    cmo, fit_method, fit_stage1, htce_loss, predict_cate, pseudo_outcomes, stage1_loss, stage2_loss, ArmPredictions,
    CalmLinConfig, CalmNnConfig, EstimatorConfig, FitContext, HtceBatch, HtceConfig, HtceNet, Method, SourceBatch,
    Stage2Batch,
};
use crate::harness::{run_setting, summarize, write_records, write_summary, Setting, SummaryRow};
use crate::linmod::{fit_lasso_fixed, LassoConfig};
use crate::neural::{grad_check, Mlp, TrainConfig};
use crate::rng::{derive_rng, stage};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {:>2} {}: {} ({:.1} s)", self.id, self.name, self.detail, self.seconds)
    }
}

fn timed(id: u32, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<Check> {
    let t = Instant::now();
    let (passed, detail) = f()?;
    Ok(Check { id, name: name.into(), passed, detail, seconds: t.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Exact and numerical identities; seconds.
    Unit,
    /// Statistical invariants and pipeline contracts; about a minute.
    Invariants,
    /// Everything, including the simulation studies.
    Acceptance,
}

impl std::str::FromStr for Suite {
    type Err = crate::error::CalmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Suite::Unit),
            "invariants" => Ok(Suite::Invariants),
            "acceptance" => Ok(Suite::Acceptance),
            other => invalid(format!("unknown suite '{other}'")),
        }
    }
}

/// Run a suite, calling `report` after each check. Simulation summaries are
/// written under `out_dir` when given.
pub fn run_suite(suite: Suite, jobs: usize, out_dir: Option<&Path>, mut report: impl FnMut(&Check)) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut push = |c: Check| {
        report(&c);
        out.push(c);
    };
    push(cmo_optimality()?);
    push(lasso_oracle(0)?);
    push(gradient_checks(0)?);
    push(mmd_identities(0)?);
    if suite == Suite::Unit {
        return Ok(out);
    }
    push(pseudo_outcome_unbiasedness(0)?);
    push(linear_equivalence(0)?);
    push(ledger_audit(0)?);
    push(determinism(0)?);
    if suite == Suite::Invariants {
        return Ok(out);
    }
    let sigma = sigma_sweep(jobs, out_dir)?;
    push(calibration_group(&sigma)?);
    push(sigma_monotone(&sigma)?);
    push(nonlinear_win(&omega_sweep(jobs, out_dir)?)?);
    push(small_rct_stability(&small_rct_cell(jobs, out_dir)?)?);
    push(shift_robustness(&shift_cells(jobs, out_dir)?)?);
    push(ihdp_pipeline(&ihdp_cell(jobs, out_dir)?)?);
    out.sort_by_key(|c| c.id);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Identities

/// ψ is unbiased for the CATE whatever the augmentation: binned means of ψ
/// against binned means of the truth for m = 0, the oracle CMO and m = 10.
pub fn pseudo_outcome_unbiasedness(seed: u64) -> Result<Check> {
    timed(1, "pseudo-outcome unbiasedness", || {
        let n = 200_000;
        let bins = 50;
        let cfg = BaselineDgpConfig { n_r: n, n_o: 200, ..Default::default() };
        let g = gen_baseline(&cfg, seed)?;
        let truth = g.oracle.true_cate(&g.rct.x)?;
        let pi = PropensityModel::known(cfg.pi_treated)?;
        let mu = ArmPredictions {
            base: [g.oracle.outcome_mean(Arm::Control, &g.rct.x)?, g.oracle.outcome_mean(Arm::Treated, &g.rct.x)?],
            discrepancy: [DVector::zeros(n), DVector::zeros(n)],
        };
        let rows: Vec<usize> = (0..n).collect();
        let augmentations = [
            ("zero", DVector::zeros(n)),
            ("oracle CMO", cmo(&mu, &pi, &rows)?),
            ("constant 10", DVector::from_element(n, 10.0)),
        ];
        let mut order = rows.clone();
        order.sort_by(|&i, &j| truth[i].total_cmp(&truth[j]));
        let mut all_ok = true;
        let mut parts = Vec::new();
        for (name, m) in &augmentations {
            let psi = pseudo_outcomes(&g.rct, m, &pi)?.psi;
            let mut inside = 0;
            for b in 0..bins {
                let idx = &order[b * n / bins..(b + 1) * n / bins];
                let k = idx.len() as f64;
                let mean_psi = idx.iter().map(|&i| psi[i]).sum::<f64>() / k;
                let mean_tau = idx.iter().map(|&i| truth[i]).sum::<f64>() / k;
                let var = idx.iter().map(|&i| (psi[i] - mean_psi).powi(2)).sum::<f64>() / (k - 1.0);
                if (mean_psi - mean_tau).abs() <= 3.0 * (var / k).sqrt() {
                    inside += 1;
                }
            }
            let ok = inside as f64 >= 0.95 * bins as f64;
            all_ok &= ok;
            parts.push(format!("{name} {inside}/{bins}"));
        }
        Ok((all_ok, format!("bins within 3 SE: {}", parts.join(", "))))
    })
}

/// Brute-force minimizer of Var(ψ) over constant augmentations on a discrete
/// toy against the CMO formula.
pub fn cmo_optimality() -> Result<Check> {
    timed(2, "CMO variance optimality", || {
        // Y(+1) and Y(−1) each take three values; treatment probability 0.3.
        let pi1 = 0.3;
        let y1 = [(-1.0, 0.2), (0.5, 0.5), (3.0, 0.3)];
        let y0 = [(0.0, 0.6), (1.0, 0.3), (-2.0, 0.1)];
        let second_moment = |m: f64| -> f64 {
            let part = |ys: &[(f64, f64)], p: f64| ys.iter().map(|(y, w)| w * (y - m).powi(2)).sum::<f64>() / p;
            part(&y1, pi1) + part(&y0, 1.0 - pi1)
        };
        let (mut best_m, mut best_v) = (0.0, f64::INFINITY);
        for k in -5000..=5000 {
            let m = k as f64 * 1e-3;
            let v = second_moment(m);
            if v < best_v {
                best_v = v;
                best_m = m;
            }
        }
        let mean = |ys: &[(f64, f64)]| ys.iter().map(|(y, w)| y * w).sum::<f64>();
        let preds = ArmPredictions {
            base: [DVector::from_element(1, mean(&y0)), DVector::from_element(1, mean(&y1))],
            discrepancy: [DVector::zeros(1), DVector::zeros(1)],
        };
        let formula = cmo(&preds, &PropensityModel::known(pi1)?, &[0])?[0];
        let gap = (best_m - formula).abs();
        Ok((gap <= 2e-3, format!("grid argmin {best_m:.3}, formula {formula:.6}, gap {gap:.2e}")))
    })
}

/// Proximal gradient (ISTA) on standardized features, run until the iterate
/// moves less than `tol`. Returns coefficients on the original scale and the intercept.
pub fn prox_grad_lasso(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, tol: f64) -> (f64, DVector<f64>) {
    let (n, p) = x.shape();
    let nf = n as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let sds: Vec<f64> = x
        .column_iter()
        .zip(&means)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt())
        .collect();
    let xs = DMatrix::from_fn(n, p, |i, j| (x[(i, j)] - means[j]) / sds[j]);
    let ybar = y.mean();
    let yc = y.add_scalar(-ybar);
    let gram = xs.transpose() * &xs / nf;
    let xty = xs.transpose() * &yc / nf;
    let step = 1.0 / gram.symmetric_eigenvalues().max();
    let mut b = DVector::zeros(p);
    for _ in 0..10_000_000 {
        let grad = &gram * &b - &xty;
        let z = &b - step * grad;
        let next = z.map(|v| v.signum() * (v.abs() - step * lambda).max(0.0));
        let change = (&next - &b).amax();
        b = next;
        if change < tol {
            break;
        }
    }
    let coef = DVector::from_fn(p, |j, _| b[j] / sds[j]);
    let intercept = ybar - (0..p).map(|j| coef[j] * means[j]).sum::<f64>();
    (intercept, coef)
}

/// Coordinate descent against proximal gradient on 20 random small problems.
pub fn lasso_oracle(seed: u64) -> Result<Check> {
    timed(3, "LASSO oracle equivalence", || {
        let mut rng = derive_rng(seed, stage::PERMUTATION, 3);
        let cfg = LassoConfig { strict: true, ..Default::default() };
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let n = 40;
            let p = rng.gen_range(2..=5);
            let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &x * &beta + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sc = ScalerParams::fit(&x)?;
            let xs = sc.transform(&x)?;
            let lmax = (xs.transpose() * y.add_scalar(-y.mean()) / n as f64).amax();
            let lambda = lmax * rng.gen_range(0.01..0.9);
            let (b0, b) = prox_grad_lasso(&x, &y, lambda, 1e-13);
            let m = fit_lasso_fixed(&x, &y, lambda, &cfg)?;
            worst = worst.max((&m.coefficients - &b).amax()).max((m.intercept - b0).abs());
        }
        Ok((worst < 1e-6, format!("max coefficient gap {worst:.2e} over 20 problems")))
    })
}

/// Central differences for the Stage-1 loss, the Stage-2 composite loss in
/// every alignment mode and the joint HTCE loss.
pub fn gradient_checks(seed: u64) -> Result<Check> {
    timed(4, "gradient correctness", || {
        let mut worst = Vec::new();
        let dgp = LatentDgpConfig { p_z: 3, p_u: 2, p_v: 3, latent_dim: 2, n_r: 40, n_o: 120, ..Default::default() };
        let g = crate::dgp::gen_latent_nonlinear(&dgp, seed)?;
        let nn = CalmNnConfig {
            embed_dim: 3,
            hidden: vec![6, 6],
            head_hidden: vec![4],
            stage1: TrainConfig { epochs: 5, ..TrainConfig::default() },
            stage2: TrainConfig { epochs: 5, ..TrainConfig::default() },
            ..CalmNnConfig::default()
        };
        let mut rng = derive_rng(seed, stage::PERMUTATION, 4);

        let es = nn.encoder_spec(6);
        let hs = nn.head_spec();
        let p1 = (
            Mlp::init(es.clone(), &mut rng)?.params,
            vec![Mlp::init(hs.clone(), &mut rng)?.params, Mlp::init(hs.clone(), &mut rng)?.params],
        );
        let xo = ScalerParams::fit(&g.os.x)?.transform(&g.os.x)?;
        let rep = grad_check(|q| stage1_loss(&es, &hs, q, &xo, &g.os.y, &g.os.a).expect("stage 1 loss"), &p1, 300, 1e-5, seed);
        worst.push(("stage 1", rep.max_rel_error));

        let ecfg = EstimatorConfig { calm_nn: nn.clone(), ..Default::default() };
        let pi = PropensityModel::known(0.5)?;
        let folds = make_folds(40, 2, seed)?;
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &ecfg, seed };
        let (s1, _) = fit_stage1(&ctx, &nn)?;
        let s1 = Arc::new(s1);
        let xs = s1.scaler.transform(&g.os.x)?;
        let w_os = s1.encoder.predict(&xs)?;
        let z_os = xs.columns(0, 3).into_owned();
        let xr = ScalerParams::fit(&g.rct.x)?.transform(&g.rct.x)?;
        let z_r = xr.columns(2, 3).into_owned();
        let enc_spec = nn.encoder_spec(5);
        let disc_spec = nn.discrepancy_spec();
        let p2 = (
            Mlp::init(enc_spec.clone(), &mut rng)?.params,
            vec![Mlp::init(disc_spec.clone(), &mut rng)?.params, Mlp::init(disc_spec.clone(), &mut rng)?.params],
        );
        let w_init = Mlp { spec: enc_spec.clone(), params: p2.0.clone() }.predict(&xr)?;
        let batch = Stage2Batch {
            x: xr.clone(),
            y: g.rct.y.map(|v| (v - s1.y_mean) / s1.y_sd),
            arms: g.rct.a.clone(),
            rows: (0..40).collect(),
            os_rows: (0..30).collect(),
            lambda: 0.7,
        };
        for (name, mode) in [("stage 2 mmd", AlignMode::Mmd), ("stage 2 contrastive", AlignMode::Contrastive), ("stage 2 cond-mean", AlignMode::CondMean)] {
            let acfg = AlignmentConfig { mode, radius: Radius::Quantile(0.3), ..Default::default() };
            let align = PreparedAlignment::new(&acfg, &z_os, w_os.clone(), &z_r, &w_init)?;
            let rep = grad_check(
                |q| stage2_loss(&s1, &enc_spec, &disc_spec, q, &batch, &align, 0.05).expect("stage 2 loss"),
                &p2,
                300,
                1e-5,
                seed,
            );
            worst.push((name, rep.max_rel_error));
        }

        let hcfg = HtceConfig {
            shared_hidden: vec![5],
            shared_dim: 3,
            private_hidden: vec![4],
            private_dim: 2,
            head_hidden: vec![4],
            ..HtceConfig::default()
        };
        let wave = |n: usize, p: usize, s: f64| DMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 3) as f64 * s).sin());
        let arms = |n: usize| (0..n).map(|i| if i % 3 == 0 { Arm::Treated } else { Arm::Control }).collect::<Vec<_>>();
        for (name, (pz, pu, pv)) in [("htce private blocks", (3, 2, 4)), ("htce shared only", (3, 0, 0))] {
            let net = HtceNet::new(&hcfg, pz, pu, pv)?;
            let params = net.init(&mut rng)?;
            let b = HtceBatch {
                rct: SourceBatch { z: wave(9, pz, 0.3), private: wave(9, pu, 0.7), y: wave(9, 1, 1.1).column(0).into(), arms: arms(9) },
                os: SourceBatch { z: wave(12, pz, 0.5), private: wave(12, pv, 0.2), y: wave(12, 1, 0.9).column(0).into(), arms: arms(12) },
            };
            let rep = grad_check(|q| htce_loss(&net, q, &b).expect("htce loss"), &params, 300, 1e-5, seed);
            worst.push((name, rep.max_rel_error));
        }
        let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
        let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
        Ok((max < 1e-5, format!("max relative error {max:.2e} ({detail})")))
    })
}

/// Coincident clouds, the two-point closed form, and a permutation null.
pub fn mmd_identities(seed: u64) -> Result<Check> {
    timed(5, "MMD identities", || {
        let col = |v: &[f64]| DMatrix::from_column_slice(v.len(), 1, v);
        let (coincident, grad) = mmd_loss(&col(&[0.3, 0.3]), &col(&[0.3, 0.3]), 1.0)?;
        let mut formula_gap: f64 = 0.0;
        for t in [0.1, 0.5, 1.0, (2.0 * 2f64.ln()).sqrt(), 2.5] {
            let v = mmd_value(&col(&[0.0, 0.0]), &col(&[t, t]), 1.0)?;
            formula_gap = formula_gap.max((v - (2.0 - 2.0 * (-t * t / 2.0_f64).exp())).abs());
        }
        let n = 500;
        let mut rng = derive_rng(seed, stage::PERMUTATION, 5);
        let mut draw = |n: usize| DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = draw(n);
        let b = draw(n);
        let observed = mmd_value(&a, &b, 1.0)?;
        let pooled: Vec<usize> = (0..2 * n).collect();
        let both = DMatrix::from_fn(2 * n, 2, |i, j| if i < n { a[(i, j)] } else { b[(i - n, j)] });
        let mut null = Vec::new();
        for _ in 0..100 {
            let mut idx = pooled.clone();
            idx.shuffle(&mut rng);
            let pa = DMatrix::from_fn(n, 2, |i, j| both[(idx[i], j)]);
            let pb = DMatrix::from_fn(n, 2, |i, j| both[(idx[n + i], j)]);
            null.push(mmd_value(&pa, &pb, 1.0)?);
        }
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
        let z = (observed - mean) / sd;
        let ok = coincident == 0.0 && grad.amax() == 0.0 && formula_gap <= 1e-12 && z.abs() <= 3.0;
        Ok((ok, format!("coincident {coincident}, two-point gap {formula_gap:.1e}, same-law z = {z:.2}")))
    })
}

/// CALM-Lin without PCA against MR-Oscar on fresh test points.
pub fn linear_equivalence(seed: u64) -> Result<Check> {
    timed(6, "linear equivalence with MR-Oscar", || {
        let dgp = BaselineDgpConfig::default();
        let g = gen_baseline(&dgp, seed)?;
        let test = gen_baseline(&BaselineDgpConfig { n_r: 1000, ..dgp.clone() }, seed + 1)?;
        let cfg = EstimatorConfig { calm_lin: CalmLinConfig { pca: false, ..Default::default() }, ..Default::default() };
        let pi = PropensityModel::known(dgp.pi_treated)?;
        let folds = make_folds(g.rct.n(), cfg.n_folds(g.rct.n()), seed)?;
        let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &cfg, seed };
        let lin = fit_method(Method::CalmLin, &ctx)?;
        let mr = fit_method(Method::MrOscar, &ctx)?;
        let gap = (predict_cate(&lin, &test.rct.x)? - predict_cate(&mr, &test.rct.x)?).amax();
        Ok((gap <= 1e-6, format!("max CATE gap {gap:.2e} on 1000 test points")))
    })
}

/// Every method on a default draw of each simulated regime; no nuisance may
/// be evaluated on a unit it was trained on.
pub fn ledger_audit(seed: u64) -> Result<Check> {
    timed(12, "cross-fitting ledger audit", || {
        let mut violations = 0;
        let mut fits = 0;
        for dgp in [DgpConfig::Baseline(BaselineDgpConfig::default()), DgpConfig::Latent(LatentDgpConfig::default())] {
            let g = dgp.generate(seed)?;
            let cfg = EstimatorConfig::default();
            let pi = PropensityModel::known(0.5)?;
            let folds = make_folds(g.rct.n(), cfg.n_folds(g.rct.n()), seed)?;
            let ctx = FitContext { os: &g.os, rct: &g.rct, pi: &pi, folds: &folds, config: &cfg, seed };
            for m in Method::ALL {
                let fit = fit_method(m, &ctx)?;
                let v = fit.provenance.audit();
                for line in &v {
                    log::error!("{m}: {line}");
                }
                violations += v.len();
                fits += 1;
            }
        }
        Ok((violations == 0, format!("{violations} violations over {fits} fits")))
    })
}

/// Same setting twice and on 1 vs 4 workers.
pub fn determinism(seed: u64) -> Result<Check> {
    timed(13, "determinism", || {
        let dgp = DgpConfig::Latent(LatentDgpConfig { n_r: 150, n_o: 1000, ..Default::default() });
        let s = Setting::new(dgp, vec![Method::Naive, Method::MrOscar, Method::CalmNn], 3, seed);
        let key = |rs: &[crate::harness::ResultRecord]| rs.iter().map(|r| r.rmse.map(f64::to_bits)).collect::<Vec<_>>();
        let a = run_setting(&s, 1)?;
        let b = run_setting(&s, 1)?;
        let c = run_setting(&s, 4)?;
        let ok = key(&a) == key(&b) && key(&a) == key(&c) && a.iter().all(|r| r.rmse.is_some());
        Ok((ok, format!("{} records identical across reruns and worker counts", a.len())))
    })
}

// ---------------------------------------------------------------------------
// Simulation studies

const GROUP: [Method; 4] = Method::CALIBRATION_GROUP;

fn run_cell(s: &Setting, jobs: usize, out_dir: Option<&Path>, tag: &str) -> Result<Vec<SummaryRow>> {
    let recs = run_setting(s, jobs)?;
    let rows = summarize(&recs);
    if let Some(dir) = out_dir {
        let dir = dir.join(tag);
        std::fs::create_dir_all(&dir)?;
        let stem = format!("{}_{}", s.factor, s.factor_value);
        write_records(&recs, &dir.join(format!("{stem}_results.csv")))?;
        write_summary(&rows, &dir.join(format!("{stem}_summary.csv")))?;
    }
    Ok(rows)
}

fn labelled(dgp: DgpConfig, methods: Vec<Method>, reps: usize, factor: &str, value: impl fmt::Display) -> Setting {
    let mut s = Setting::new(dgp, methods, reps, 0);
    s.factor = factor.into();
    s.factor_value = value.to_string();
    s
}

fn mean_of(rows: &[SummaryRow], m: Method) -> Result<f64> {
    let r = rows
        .iter()
        .find(|r| r.method == m)
        .ok_or_else(|| crate::error::CalmError::InvalidArgument(format!("no summary for {m}")))?;
    Ok(r.mean_rmse)
}

fn group_means(rows: &[SummaryRow]) -> Result<Vec<f64>> {
    GROUP.iter().map(|&m| mean_of(rows, m)).collect()
}

fn failures(rows: &[SummaryRow]) -> usize {
    rows.iter().map(|r| r.n_failed).sum()
}

/// Baseline regime at σ_V² ∈ {0.1, 0.5, 1.0, 2.0}, 20 replicates, group plus Naive.
pub fn sigma_sweep(jobs: usize, out_dir: Option<&Path>) -> Result<Vec<(f64, Vec<SummaryRow>)>> {
    let mut methods = vec![Method::Naive];
    methods.extend(GROUP);
    [0.1, 0.5, 1.0, 2.0]
        .into_iter()
        .map(|s2| {
            let dgp = DgpConfig::Baseline(BaselineDgpConfig { sigma_v2: s2, ..Default::default() });
            let s = labelled(dgp, methods.clone(), 20, "sigma_v2", s2);
            Ok((s2, run_cell(&s, jobs, out_dir, "sigma_v2")?))
        })
        .collect()
}

/// Group near-equivalence at the default baseline setting (σ_V² = 1).
pub fn calibration_group(sigma: &[(f64, Vec<SummaryRow>)]) -> Result<Check> {
    timed(7, "calibration-group near-equivalence", || {
        let rows = &sigma
            .iter()
            .find(|(s, _)| *s == 1.0)
            .ok_or_else(|| crate::error::CalmError::InvalidArgument("σ_V² = 1 missing".into()))?
            .1;
        let g = group_means(rows)?;
        let naive = mean_of(rows, Method::Naive)?;
        let gap = g.iter().copied().fold(f64::MIN, f64::max) - g.iter().copied().fold(f64::MAX, f64::min);
        let margin = g.iter().map(|m| naive - m).fold(f64::INFINITY, f64::min);
        let ok = gap <= 0.05 && margin >= 0.1 && failures(rows) == 0;
        Ok((ok, format!("group {} | max gap {gap:.3}, Naive {naive:.3}, smallest margin {margin:.3}", fmt_group(&g))))
    })
}

/// Group mean RMSE rises with σ_V².
pub fn sigma_monotone(sigma: &[(f64, Vec<SummaryRow>)]) -> Result<Check> {
    timed(8, "monotone degradation in sigma_V^2", || {
        let mut means = Vec::new();
        for (_, rows) in sigma {
            let g = group_means(rows)?;
            means.push(g.iter().sum::<f64>() / g.len() as f64);
        }
        let xs: Vec<f64> = sigma.iter().map(|(s, _)| *s).collect();
        let rho = spearman(&xs, &means);
        let increasing = means.windows(2).all(|w| w[1] >= w[0]);
        let shown = xs.iter().zip(&means).map(|(s, m)| format!("{s}: {m:.3}")).collect::<Vec<_>>().join(", ");
        Ok((increasing && (rho - 1.0).abs() < 1e-12, format!("group means {shown}; Spearman {rho:.2}")))
    })
}

/// Latent regime over ω ∈ {0.5, 1, 1.5, 2}, 10 replicates, group plus CALM-NN.
pub fn omega_sweep(jobs: usize, out_dir: Option<&Path>) -> Result<Vec<(f64, Vec<SummaryRow>)>> {
    let mut methods = GROUP.to_vec();
    methods.push(Method::CalmNn);
    [0.5, 1.0, 1.5, 2.0]
        .into_iter()
        .map(|w| {
            let dgp = DgpConfig::Latent(LatentDgpConfig { cate_form: CateForm::Sin { omega: w }, ..Default::default() });
            let s = labelled(dgp, methods.clone(), 10, "omega", w);
            Ok((w, run_cell(&s, jobs, out_dir, "omega")?))
        })
        .collect()
}

/// CALM-NN at most 0.8× the best group method at ω = 1.5 and best in ≥ 3 of 4 ω.
pub fn nonlinear_win(omega: &[(f64, Vec<SummaryRow>)]) -> Result<Check> {
    timed(9, "nonlinear-regime win", || {
        let mut wins = 0;
        let mut ratio_15 = f64::NAN;
        let mut parts = Vec::new();
        for (w, rows) in omega {
            let best = group_means(rows)?.into_iter().fold(f64::INFINITY, f64::min);
            let nn = mean_of(rows, Method::CalmNn)?;
            if nn < best {
                wins += 1;
            }
            if *w == 1.5 {
                ratio_15 = nn / best;
            }
            parts.push(format!("ω={w}: NN {nn:.3} vs {best:.3}"));
        }
        let ok = ratio_15 <= 0.8 && wins >= 3;
        Ok((ok, format!("ratio at ω=1.5 {ratio_15:.3}, wins {wins}/4 ({})", parts.join("; "))))
    })
}

/// Latent regime at n^r = 100, 10 replicates.
pub fn small_rct_cell(jobs: usize, out_dir: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let mut methods = GROUP.to_vec();
    methods.push(Method::CalmNn);
    let dgp = DgpConfig::Latent(LatentDgpConfig { n_r: 100, ..Default::default() });
    run_cell(&labelled(dgp, methods, 10, "n_r", 100), jobs, out_dir, "n_r")
}

/// Group mean at least twice CALM-NN's at n^r = 100.
pub fn small_rct_stability(rows: &[SummaryRow]) -> Result<Check> {
    timed(10, "small-n^r stability", || {
        let g = group_means(rows)?;
        let group = g.iter().sum::<f64>() / g.len() as f64;
        let nn = mean_of(rows, Method::CalmNn)?;
        let ratio = group / nn;
        Ok((ratio >= 2.0, format!("group {} mean {group:.3}, CALM-NN {nn:.3}, ratio {ratio:.2}", fmt_group(&g))))
    })
}

/// Baseline regime at shift 0 and 5, 20 replicates, Naive and CALM-Lin.
pub fn shift_cells(jobs: usize, out_dir: Option<&Path>) -> Result<[Vec<SummaryRow>; 2]> {
    let cell = |shift: f64| {
        let dgp = DgpConfig::Baseline(BaselineDgpConfig { shift_magnitude: shift, ..Default::default() });
        run_cell(&labelled(dgp, vec![Method::Naive, Method::CalmLin], 20, "shift", shift), jobs, out_dir, "shift")
    };
    Ok([cell(0.0)?, cell(5.0)?])
}

pub fn shift_robustness(cells: &[Vec<SummaryRow>; 2]) -> Result<Check> {
    timed(11, "shift robustness", || {
        let lin0 = mean_of(&cells[0], Method::CalmLin)?;
        let lin5 = mean_of(&cells[1], Method::CalmLin)?;
        let naive5 = mean_of(&cells[1], Method::Naive)?;
        let ok = naive5 >= 2.0 * lin5 && lin5 <= 1.5 * lin0;
        Ok((ok, format!("shift 5: Naive {naive5:.3}, CALM-Lin {lin5:.3}; CALM-Lin at shift 0 {lin0:.3}")))
    })
}

/// IHDP semi-synthetic benchmark, 50 replicates.
pub fn ihdp_cell(jobs: usize, out_dir: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let mut methods = GROUP.to_vec();
    methods.push(Method::CalmNn);
    let dgp = DgpConfig::Ihdp(IhdpConfig::default());
    run_cell(&labelled(dgp, methods, 50, "default", "default"), jobs, out_dir, "ihdp")
}

pub fn ihdp_pipeline(rows: &[SummaryRow]) -> Result<Check> {
    timed(15, "IHDP pipeline", || {
        let g = group_means(rows)?;
        let group = g.iter().sum::<f64>() / g.len() as f64;
        let gap = g.iter().copied().fold(f64::MIN, f64::max) - g.iter().copied().fold(f64::MAX, f64::min);
        let nn = mean_of(rows, Method::CalmNn)?;
        let ok = failures(rows) == 0 && gap <= 0.1 * group && nn <= 1.5 * group;
        Ok((ok, format!("group {} mean {group:.3}, gap {gap:.3}, CALM-NN {nn:.3}", fmt_group(&g))))
    })
}

fn fmt_group(g: &[f64]) -> String {
    GROUP.iter().zip(g).map(|(m, v)| format!("{m} {v:.3}")).collect::<Vec<_>>().join(", ")
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
