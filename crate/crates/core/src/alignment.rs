//! Penalties that pull RCT embeddings toward the frozen OS embedding distribution.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::select_rows;
use crate::error::{invalid, Result};
use crate::linmod::fit_ridge_multi;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Mmd,
    Contrastive,
    CondMean,
}

impl AlignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::Mmd => "mmd",
            AlignMode::Contrastive => "contrastive",
            AlignMode::CondMean => "cond_mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radius {
    /// Quantile of all OS–RCT distances in Z.
    Quantile(f64),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub mode: AlignMode,
    pub lambda0: f64,
    pub bandwidth: Bandwidth,
    pub radius: Radius,
    pub ridge_alpha: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::Mmd,
            lambda0: 1.0,
            bandwidth: Bandwidth::Median,
            radius: Radius::Quantile(0.05),
            ridge_alpha: 1e-3,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0) {
            return invalid("alignment weight must be non-negative");
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) {
                return invalid("fixed bandwidth must be positive");
            }
        }
        match self.radius {
            Radius::Fixed(e) if !(e > 0.0) => return invalid("contrastive radius must be positive"),
            Radius::Quantile(q) if !(q > 0.0 && q <= 1.0) => {
                return invalid("radius quantile must lie in (0, 1]")
            }
            _ => {}
        }
        if !(self.ridge_alpha > 0.0) {
            return invalid("conditional-mean ridge strength must be positive");
        }
        Ok(())
    }
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
}

/// Sample quantile with linear interpolation between order statistics.
fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `sqrt(median ‖w_i − w_j‖²)` over distinct pairs; 1 when every distance is zero.
pub fn median_heuristic(points: &DMatrix<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return invalid("median heuristic needs at least two points");
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(points, i, points, j));
        }
    }
    let med = quantile(d, 0.5);
    if !(med > 0.0) {
        warn!("all embeddings coincide; falling back to bandwidth 1");
        return Ok(1.0);
    }
    Ok(med.sqrt())
}

fn check_pair(w_os: &DMatrix<f64>, w_rct: &DMatrix<f64>) -> Result<()> {
    if w_os.ncols() != w_rct.ncols() {
        return invalid("OS and RCT embeddings have different widths");
    }
    Ok(())
}

/// Unbiased Gaussian-kernel MMD² and its gradient with respect to `w_rct`.
///
/// The OS embeddings are treated as constants, so only the cross term and the
/// RCT–RCT term contribute to the gradient. The value may be slightly negative.
pub fn mmd_loss(w_os: &DMatrix<f64>, w_rct: &DMatrix<f64>, sigma: f64) -> Result<(f64, DMatrix<f64>)> {
    check_pair(w_os, w_rct)?;
    let (n_o, n_r) = (w_os.nrows(), w_rct.nrows());
    if n_o < 2 || n_r < 2 {
        return invalid("MMD needs at least two points per source");
    }
    if !(sigma > 0.0) {
        return invalid("MMD bandwidth must be positive");
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let s2 = sigma * sigma;
    let d = w_rct.ncols();

    let mut oo = 0.0;
    for j in 0..n_o {
        for k in (j + 1)..n_o {
            oo += 2.0 * (-sq_dist(w_os, j, w_os, k) * inv).exp();
        }
    }
    let c_oo = 1.0 / (n_o * (n_o - 1)) as f64;
    let c_or = 2.0 / (n_o * n_r) as f64;
    let c_rr = 1.0 / (n_r * (n_r - 1)) as f64;

    let mut grad = DMatrix::zeros(n_r, d);
    let mut or = 0.0;
    for i in 0..n_r {
        for j in 0..n_o {
            let k = (-sq_dist(w_rct, i, w_os, j) * inv).exp();
            or += k;
            // d/dr_i of −c_or·k(r_i, o_j) = c_or·k·(r_i − o_j)/σ²
            let f = c_or * k / s2;
            for c in 0..d {
                grad[(i, c)] += f * (w_rct[(i, c)] - w_os[(j, c)]);
            }
        }
    }
    let mut rr = 0.0;
    for i in 0..n_r {
        for m in (i + 1)..n_r {
            let k = (-sq_dist(w_rct, i, w_rct, m) * inv).exp();
            rr += 2.0 * k;
            // each unordered pair appears twice in the sum
            let f = 2.0 * c_rr * k / s2;
            for c in 0..d {
                let diff = w_rct[(i, c)] - w_rct[(m, c)];
                grad[(i, c)] -= f * diff;
                grad[(m, c)] += f * diff;
            }
        }
    }
    Ok((c_oo * oo - c_or * or + c_rr * rr, grad))
}

/// MMD² without the gradient, for reporting and permutation tests.
pub fn mmd_value(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma: f64) -> Result<f64> {
    Ok(mmd_loss(a, b, sigma)?.0)
}

/// OS indices within Euclidean distance `eps` of each RCT unit in Z.
pub fn neighbor_sets(z_os: &DMatrix<f64>, z_rct: &DMatrix<f64>, eps: f64) -> Result<Vec<Vec<usize>>> {
    check_pair(z_os, z_rct)?;
    if !(eps > 0.0) {
        return invalid("neighbor radius must be positive");
    }
    let e2 = eps * eps;
    Ok((0..z_rct.nrows())
        .map(|i| (0..z_os.nrows()).filter(|&j| sq_dist(z_rct, i, z_os, j) <= e2).collect())
        .collect())
}

/// The `q`-quantile of all OS–RCT distances in Z.
pub fn distance_quantile(z_os: &DMatrix<f64>, z_rct: &DMatrix<f64>, q: f64) -> Result<f64> {
    check_pair(z_os, z_rct)?;
    if z_os.nrows() == 0 || z_rct.nrows() == 0 {
        return invalid("distance quantile needs points in both sources");
    }
    let mut d = Vec::with_capacity(z_os.nrows() * z_rct.nrows());
    for i in 0..z_rct.nrows() {
        for j in 0..z_os.nrows() {
            d.push(sq_dist(z_rct, i, z_os, j).sqrt());
        }
    }
    Ok(quantile(d, q))
}

/// Mean over RCT units with neighbors of the mean squared embedding distance to them.
pub fn contrastive_loss(
    w_os: &DMatrix<f64>,
    w_rct: &DMatrix<f64>,
    neighbors: &[Vec<usize>],
) -> Result<(f64, DMatrix<f64>)> {
    check_pair(w_os, w_rct)?;
    if neighbors.len() != w_rct.nrows() {
        return invalid("one neighbor set per RCT unit is required");
    }
    let d = w_rct.ncols();
    let mut grad = DMatrix::zeros(w_rct.nrows(), d);
    let active = neighbors.iter().filter(|n| !n.is_empty()).count();
    if active == 0 {
        warn!("every contrastive neighbor set is empty; alignment term is zero");
        return Ok((0.0, grad));
    }
    let scale = 1.0 / active as f64;
    let mut value = 0.0;
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let k = nb.len() as f64;
        let mut mean = vec![0.0; d];
        let mut sum_sq = 0.0;
        for &j in nb {
            sum_sq += sq_dist(w_os, j, w_rct, i);
            for c in 0..d {
                mean[c] += w_os[(j, c)] / k;
            }
        }
        value += sum_sq / k;
        for c in 0..d {
            grad[(i, c)] = 2.0 * scale * (w_rct[(i, c)] - mean[c]);
        }
    }
    Ok((value * scale, grad))
}

/// Ridge predictions of the OS embedding from Z, evaluated at the RCT units.
pub fn cond_mean_targets(
    z_os: &DMatrix<f64>,
    w_os: &DMatrix<f64>,
    z_rct: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0) {
        return invalid("conditional-mean ridge strength must be positive");
    }
    fit_ridge_multi(z_os, w_os, alpha)?.predict(z_rct)
}

/// Mean squared distance to the targets and its gradient.
pub fn cond_mean_loss(w_rct: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if w_rct.shape() != targets.shape() {
        return invalid("targets must match the RCT embeddings in shape");
    }
    let n = w_rct.nrows().max(1) as f64;
    let r = w_rct - targets;
    Ok((r.norm_squared() / n, r * (2.0 / n)))
}

/// λ₀ for the first 60% of epochs, then linear down to 0.2·λ₀ at the end.
pub fn anneal_lambda(epoch: usize, total: usize, lambda0: f64) -> f64 {
    if total == 0 {
        return lambda0;
    }
    let t = (epoch.min(total)) as f64 / total as f64;
    if t <= 0.6 {
        lambda0
    } else {
        lambda0 * (1.0 - 0.8 * (t - 0.6) / 0.4)
    }
}

/// Alignment state fixed at the start of Stage 2.
#[derive(Debug, Clone)]
pub enum PreparedAlignment {
    Mmd { w_os: DMatrix<f64>, sigma: f64 },
    Contrastive { w_os: DMatrix<f64>, neighbors: Vec<Vec<usize>>, eps: f64 },
    CondMean { targets: DMatrix<f64> },
}

impl PreparedAlignment {
    /// `w_init` is the RCT embedding at the start of training, used only for the bandwidth.
    pub fn new(
        cfg: &AlignmentConfig,
        z_os: &DMatrix<f64>,
        w_os: DMatrix<f64>,
        z_rct: &DMatrix<f64>,
        w_init: &DMatrix<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        match cfg.mode {
            AlignMode::Mmd => {
                let sigma = match cfg.bandwidth {
                    Bandwidth::Fixed(s) => s,
                    Bandwidth::Median => {
                        let cap = 400;
                        let a = thin(&w_os, cap);
                        let b = thin(w_init, cap);
                        let pooled = DMatrix::from_fn(a.nrows() + b.nrows(), a.ncols(), |i, j| {
                            if i < a.nrows() {
                                a[(i, j)]
                            } else {
                                b[(i - a.nrows(), j)]
                            }
                        });
                        median_heuristic(&pooled)?
                    }
                };
                Ok(Self::Mmd { w_os, sigma })
            }
            AlignMode::Contrastive => {
                let eps = match cfg.radius {
                    Radius::Fixed(e) => e,
                    Radius::Quantile(q) => distance_quantile(z_os, z_rct, q)?.max(1e-12),
                };
                let neighbors = neighbor_sets(z_os, z_rct, eps)?;
                let empty = neighbors.iter().filter(|n| n.is_empty()).count();
                if empty > 0 {
                    log::debug!("{empty} RCT units have no OS neighbors within {eps:.4}");
                }
                Ok(Self::Contrastive { w_os, neighbors, eps })
            }
            AlignMode::CondMean => Ok(Self::CondMean {
                targets: cond_mean_targets(z_os, &w_os, z_rct, cfg.ridge_alpha)?,
            }),
        }
    }

    pub fn n_os(&self) -> Option<usize> {
        match self {
            Self::Mmd { w_os, .. } => Some(w_os.nrows()),
            _ => None,
        }
    }

    /// Loss on the RCT rows `rct_rows` (whose embeddings are `w_batch`).
    /// `os_rows` selects the OS comparison sample for MMD and is ignored otherwise.
    pub fn loss(&self, w_batch: &DMatrix<f64>, rct_rows: &[usize], os_rows: &[usize]) -> Result<(f64, DMatrix<f64>)> {
        match self {
            Self::Mmd { w_os, sigma } => mmd_loss(&select_rows(w_os, os_rows), w_batch, *sigma),
            Self::Contrastive { w_os, neighbors, .. } => {
                let nb: Vec<Vec<usize>> = rct_rows.iter().map(|&i| neighbors[i].clone()).collect();
                contrastive_loss(w_os, w_batch, &nb)
            }
            Self::CondMean { targets } => cond_mean_loss(w_batch, &select_rows(targets, rct_rows)),
        }
    }
}

/// Evenly spaced rows, at most `cap` of them.
fn thin(x: &DMatrix<f64>, cap: usize) -> DMatrix<f64> {
    if x.nrows() <= cap {
        return x.clone();
    }
    let rows: Vec<usize> = (0..cap).map(|k| k * x.nrows() / cap).collect();
    select_rows(x, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{grad_check, Layer, MlpParams};
    use crate::rng::derive_rng;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn normal(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = derive_rng(seed, 800, 0);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn wrap(m: &DMatrix<f64>) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                w: m.clone(),
                b: DVector::zeros(0),
            }],
        }
    }

    #[test]
    fn median_heuristic_hand_value() {
        assert_eq!(median_heuristic(&col(&[0.0, 1.0, 3.0])).unwrap(), 2.0);
        assert_eq!(median_heuristic(&col(&[4.0, 4.0, 4.0])).unwrap(), 1.0);
        let x = normal(20, 3, 1);
        let s = median_heuristic(&x).unwrap();
        assert!((median_heuristic(&(&x * 3.0)).unwrap() - 3.0 * s).abs() < 1e-12);
        assert!(median_heuristic(&col(&[1.0])).is_err());
    }

    #[test]
    fn mmd_coincident_clouds_vanish() {
        let p = col(&[0.7, 0.7]);
        let (v, g) = mmd_loss(&p, &p, 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn mmd_two_point_formula() {
        for t in [0.1, 0.5, 1.0, (2.0 * 2f64.ln()).sqrt(), 3.0] {
            let (v, _) = mmd_loss(&col(&[0.0, 0.0]), &col(&[t, t]), 1.0).unwrap();
            assert!((v - (2.0 - 2.0 * (-t * t / 2.0).exp())).abs() < 1e-12);
        }
        let t = (2.0 * 2f64.ln()).sqrt();
        assert!((mmd_value(&col(&[0.0, 0.0]), &col(&[t, t]), 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_gradient_matches_differences() {
        let os = normal(9, 3, 2);
        let r0 = normal(7, 3, 3).add_scalar(0.4);
        let rep = grad_check(
            |p: &MlpParams| {
                let (v, g) = mmd_loss(&os, &p.layers[0].w, 1.3).unwrap();
                (v, wrap(&g))
            },
            &wrap(&r0),
            100,
            1e-5,
            0,
        );
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn mmd_lower_bound_and_errors() {
        let a = normal(30, 2, 4);
        let b = normal(30, 2, 5);
        assert!(mmd_value(&a, &b, 1.0).unwrap() >= -2.0 / 30.0);
        assert!(mmd_loss(&col(&[1.0]), &b.columns(0, 1).into_owned(), 1.0).is_err());
        assert!(mmd_loss(&a, &b, 0.0).is_err());
    }

    #[test]
    fn neighbor_hand_example() {
        let n = neighbor_sets(&col(&[0.0, 1.0, 2.0]), &col(&[0.9]), 1.0).unwrap();
        assert_eq!(n, vec![vec![0, 1]]);
        assert_eq!(neighbor_sets(&col(&[0.0, 1.0]), &col(&[0.5]), 100.0).unwrap(), vec![vec![0, 1]]);
        assert!(neighbor_sets(&col(&[0.0, 1.0]), &col(&[0.5]), 1e-9).unwrap()[0].is_empty());
    }

    #[test]
    fn contrastive_hand_example() {
        let (v, g) = contrastive_loss(&col(&[1.0, 3.0]), &col(&[0.0]), &[vec![0, 1]]).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g[(0, 0)], 2.0 * (0.0 - 2.0));
        let w_os = normal(6, 2, 6);
        let w_r = normal(3, 2, 7);
        let nb = vec![vec![0, 2, 5], vec![], vec![1, 3]];
        let (v1, _) = contrastive_loss(&w_os, &w_r, &nb).unwrap();
        let shift = |m: &DMatrix<f64>| m.add_scalar(2.5);
        let (v2, _) = contrastive_loss(&shift(&w_os), &shift(&w_r), &nb).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
        let (v3, _) = contrastive_loss(&w_os, &w_r, &[vec![5, 0, 2], vec![], vec![3, 1]]).unwrap();
        assert!((v1 - v3).abs() < 1e-12);
        let (v0, g0) = contrastive_loss(&w_os, &w_r, &[vec![], vec![], vec![]]).unwrap();
        assert_eq!((v0, g0.amax()), (0.0, 0.0));
    }

    #[test]
    fn contrastive_gradient_matches_differences() {
        let w_os = normal(8, 3, 8);
        let nb = vec![vec![0, 1, 2], vec![3], vec![], vec![4, 5, 6, 7]];
        let rep = grad_check(
            |p: &MlpParams| {
                let (v, g) = contrastive_loss(&w_os, &p.layers[0].w, &nb).unwrap();
                (v, wrap(&g))
            },
            &wrap(&normal(4, 3, 9)),
            100,
            1e-5,
            0,
        );
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn cond_mean_hand_example() {
        let t = cond_mean_targets(&col(&[-1.0, 1.0]), &col(&[-1.0, 1.0]), &col(&[2.0]), 1.0).unwrap();
        assert!((t[(0, 0)] - 1.0).abs() < 1e-12);
        let z = normal(40, 2, 10);
        let big = cond_mean_targets(&z, &(&z * 2.0), &normal(3, 2, 11), 1e9).unwrap();
        let mean = (&z * 2.0).row_mean();
        for i in 0..3 {
            assert!((big.row(i) - &mean).amax() < 1e-6);
        }
        let lin = &z * DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -1.0, 2.0]);
        let t = cond_mean_targets(&z, &lin, &z, 1e-10).unwrap();
        let (v, _) = cond_mean_loss(&t, &lin).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn cond_mean_gradient() {
        let t = normal(5, 2, 12);
        let rep = grad_check(
            |p: &MlpParams| {
                let (v, g) = cond_mean_loss(&p.layers[0].w, &t).unwrap();
                (v, wrap(&g))
            },
            &wrap(&normal(5, 2, 13)),
            100,
            1e-5,
            0,
        );
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn annealing_schedule() {
        assert_eq!(anneal_lambda(50, 100, 2.0), 2.0);
        assert_eq!(anneal_lambda(60, 100, 2.0), 2.0);
        assert!((anneal_lambda(80, 100, 2.0) - 1.2).abs() < 1e-12);
        assert!((anneal_lambda(100, 100, 2.0) - 0.4).abs() < 1e-12);
        assert_eq!(anneal_lambda(0, 0, 2.0), 2.0);
    }

    #[test]
    fn quantile_radius_and_config() {
        let q = distance_quantile(&col(&[0.0, 1.0, 2.0]), &col(&[0.0]), 0.5).unwrap();
        assert_eq!(q, 1.0);
        assert!(AlignmentConfig { lambda0: -1.0, ..Default::default() }.validate().is_err());
        assert!(AlignmentConfig { bandwidth: Bandwidth::Fixed(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn prepared_modes_agree_with_free_functions() {
        let z_os = normal(50, 2, 14);
        let w_os = normal(50, 3, 15);
        let z_r = normal(10, 2, 16);
        let w_r = normal(10, 3, 17);
        let rows: Vec<usize> = (0..10).collect();
        for mode in [AlignMode::Mmd, AlignMode::Contrastive, AlignMode::CondMean] {
            let cfg = AlignmentConfig { mode, radius: Radius::Quantile(0.3), ..Default::default() };
            let p = PreparedAlignment::new(&cfg, &z_os, w_os.clone(), &z_r, &w_r).unwrap();
            let os_rows: Vec<usize> = (0..20).collect();
            let (v, g) = p.loss(&w_r, &rows, &os_rows).unwrap();
            assert!(v.is_finite());
            assert_eq!(g.shape(), (10, 3));
        }
    }
}
