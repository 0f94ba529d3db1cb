//! Two-source, block-structured covariate data.
//!
//! Covariates split into a shared block `Z`, a trial-only block `U` and an
//! observational-only block `V`. Trial rows store `(U, Z)` and observational
//! rows store `(Z, V)`, so the shared block is a contiguous column range in
//! both sources.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CalmError, Result};
use crate::rng;

/// Which study a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Observational study.
    Os,
    /// Randomized trial.
    Rct,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Os => "os",
            Source::Rct => "rct",
        }
    }
}

/// Treatment arm, encoded as `-1` / `+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn sign(self) -> f64 {
        match self {
            Arm::Control => -1.0,
            Arm::Treated => 1.0,
        }
    }

    pub fn opposite(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }

    /// Position in `[Control, Treated]` arrays.
    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn from_sign(a: f64) -> Result<Arm> {
        if a == 1.0 {
            Ok(Arm::Treated)
        } else if a == -1.0 {
            Ok(Arm::Control)
        } else {
            invalid(format!("treatment must be -1 or +1, got {a}"))
        }
    }
}

/// Sizes of the `U`, `Z` and `V` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateLayout {
    pub p_z: usize,
    pub p_u: usize,
    pub p_v: usize,
}

impl CovariateLayout {
    pub fn new(p_z: usize, p_u: usize, p_v: usize) -> Result<Self> {
        if p_z == 0 {
            return invalid("the shared block must have at least one covariate");
        }
        Ok(Self { p_z, p_u, p_v })
    }

    pub fn p_r(&self) -> usize {
        self.p_u + self.p_z
    }

    pub fn p_o(&self) -> usize {
        self.p_z + self.p_v
    }

    pub fn p(&self) -> usize {
        self.p_u + self.p_z + self.p_v
    }

    /// Columns of `U`, `Z`, `V` in the complete vector `(U, Z, V)`.
    pub fn full_ranges(&self) -> (Range<usize>, Range<usize>, Range<usize>) {
        let u = 0..self.p_u;
        let z = self.p_u..self.p_u + self.p_z;
        let v = self.p_u + self.p_z..self.p();
        (u, z, v)
    }

    /// Column count stored for a source.
    pub fn width(&self, source: Source) -> usize {
        match source {
            Source::Rct => self.p_r(),
            Source::Os => self.p_o(),
        }
    }

    /// Columns of the shared block within a source's matrix.
    pub fn z_range(&self, source: Source) -> Range<usize> {
        match source {
            Source::Rct => self.p_u..self.p_u + self.p_z,
            Source::Os => 0..self.p_z,
        }
    }

    pub fn u_range(&self) -> Range<usize> {
        0..self.p_u
    }

    /// Columns of `V` within an observational matrix.
    pub fn v_range(&self) -> Range<usize> {
        self.p_z..self.p_z + self.p_v
    }

    /// Column names in storage order, e.g. `u0.., z0..` for the trial.
    pub fn column_names(&self, source: Source) -> Vec<String> {
        let u = (0..self.p_u).map(|j| format!("u{j}"));
        let z = (0..self.p_z).map(|j| format!("z{j}"));
        let v = (0..self.p_v).map(|j| format!("v{j}"));
        match source {
            Source::Rct => u.chain(z).collect(),
            Source::Os => z.chain(v).collect(),
        }
    }
}

/// Covariates, treatments and outcomes of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Source,
    pub x: DMatrix<f64>,
    pub a: Vec<Arm>,
    pub y: DVector<f64>,
    pub layout: CovariateLayout,
}

impl Dataset {
    pub fn new(
        source: Source,
        x: DMatrix<f64>,
        a: Vec<Arm>,
        y: DVector<f64>,
        layout: CovariateLayout,
    ) -> Result<Self> {
        let n = x.nrows();
        if a.len() != n || y.len() != n {
            return invalid(format!(
                "row counts disagree: x has {n}, a has {}, y has {}",
                a.len(),
                y.len()
            ));
        }
        if x.ncols() != layout.width(source) {
            return invalid(format!(
                "{} matrix has {} columns, layout expects {}",
                source.as_str(),
                x.ncols(),
                layout.width(source)
            ));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(CalmError::NonFinite(format!("{} dataset", source.as_str())));
        }
        Ok(Self { source, x, a, y, layout })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn signs(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.a.iter().map(|a| a.sign()))
    }

    /// Row indices in a given arm.
    pub fn arm_rows(&self, arm: Arm) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == arm).collect()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.a.iter().filter(|&&a| a == arm).count()
    }

    /// A new dataset holding the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            source: self.source,
            x: select_rows(&self.x, rows),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            layout: self.layout,
        }
    }

    /// Writes `unit_id,source,a,y,<covariates>` with one row per unit.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["unit_id".to_string(), "source".into(), "a".into(), "y".into()];
        header.extend(self.layout.column_names(self.source));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![
                i.to_string(),
                self.source.as_str().to_string(),
                format!("{}", self.a[i].sign() as i32),
                format!("{}", self.y[i]),
            ];
            rec.extend(self.x.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The `Z` columns of a dataset.
pub fn shared_block(ds: &Dataset) -> DMatrix<f64> {
    let r = ds.layout.z_range(ds.source);
    ds.x.columns(r.start, r.len()).into_owned()
}

/// The `U` columns of a trial dataset.
pub fn rct_only_block(ds: &Dataset) -> Result<DMatrix<f64>> {
    if ds.source != Source::Rct {
        return invalid("the U block only exists in trial data");
    }
    Ok(ds.x.columns(0, ds.layout.p_u).into_owned())
}

/// The `V` columns of an observational dataset.
pub fn os_only_block(ds: &Dataset) -> Result<DMatrix<f64>> {
    if ds.source != Source::Os {
        return invalid("the V block only exists in observational data");
    }
    let r = ds.layout.v_range();
    Ok(ds.x.columns(r.start, r.len()).into_owned())
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// Horizontal concatenation `[a | b]`.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hcat row mismatch");
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Trial propensity `pi_a(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityKind {
    /// `P(A = +1)` is the same for every unit.
    KnownConstant(f64),
    /// Per-row `P(A = +1)`.
    Table(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub kind: PropensityKind,
    /// Positivity margin: every propensity must lie in `[rho, 1 - rho]`.
    pub rho: f64,
}

impl PropensityModel {
    pub fn known(pi_treated: f64) -> Result<Self> {
        let m = Self {
            kind: PropensityKind::KnownConstant(pi_treated),
            rho: 0.01,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn table(pi_treated: Vec<f64>, rho: f64) -> Result<Self> {
        let m = Self {
            kind: PropensityKind::Table(pi_treated),
            rho,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return Err(CalmError::Positivity(format!("margin rho = {} outside (0, 0.5)", self.rho)));
        }
        let check = |p: f64| -> Result<()> {
            if !(p >= self.rho && p <= 1.0 - self.rho) {
                return Err(CalmError::Positivity(format!(
                    "propensity {p} outside [{}, {}]",
                    self.rho,
                    1.0 - self.rho
                )));
            }
            Ok(())
        };
        match &self.kind {
            PropensityKind::KnownConstant(p) => check(*p),
            PropensityKind::Table(ps) => ps.iter().try_for_each(|&p| check(p)),
        }
    }

    /// `pi_arm` for row `i`.
    pub fn pi(&self, arm: Arm, i: usize) -> f64 {
        let p1 = match &self.kind {
            PropensityKind::KnownConstant(p) => *p,
            PropensityKind::Table(ps) => ps[i],
        };
        match arm {
            Arm::Treated => p1,
            Arm::Control => 1.0 - p1,
        }
    }

    /// Restriction to a subset of rows (identity for constant propensities).
    pub fn subset(&self, rows: &[usize]) -> PropensityModel {
        match &self.kind {
            PropensityKind::KnownConstant(_) => self.clone(),
            PropensityKind::Table(ps) => PropensityModel {
                kind: PropensityKind::Table(rows.iter().map(|&i| ps[i]).collect()),
                rho: self.rho,
            },
        }
    }
}

/// A K-fold partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n: usize,
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn rows_out(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Shuffles `0..n` with a seeded stream and deals rows round-robin into `k` folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return invalid(format!("need 2 <= K <= n, got K = {k}, n = {n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive_rng(seed, rng::stage::FOLDS, n as u64));
    let mut fold_of = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos % k;
    }
    Ok(FoldAssignment { n, k, fold_of })
}

const CONSTANT_SD: f64 = 1e-12;

/// Per-column centering and scaling learned on a reference matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1.0 for constant columns.
    pub sd: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ScalerParams {
    /// Constant columns keep `sd = 1` and are left unscaled (they are still centered).
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return invalid("cannot standardize an empty matrix");
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            mean.push(m);
            if s <= CONSTANT_SD {
                sd.push(1.0);
                constant.push(true);
            } else {
                sd.push(s);
                constant.push(false);
            }
        }
        Ok(Self { mean, sd, constant })
    }

    pub fn ncols(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.sd[j]))
    }

    pub fn inverse_transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.sd[j] + self.mean[j]))
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.ncols() {
            return invalid(format!(
                "scaler fitted on {} columns applied to {}",
                self.ncols(),
                x.ncols()
            ));
        }
        Ok(())
    }
}

/// Fits a scaler on a dataset's covariates.
pub fn standardize(train: &Dataset) -> Result<ScalerParams> {
    ScalerParams::fit(&train.x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_ten_into_five_pairs() {
        let f = make_folds(10, 5, 0).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let mut all: Vec<usize> = (0..5).flat_map(|k| f.rows_in(k)).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn folds_of_seven_into_three() {
        for seed in 0..20 {
            let mut s = make_folds(7, 3, seed).unwrap().sizes();
            s.sort();
            assert_eq!(s, vec![2, 2, 3]);
        }
    }

    #[test]
    fn folds_are_deterministic() {
        assert_eq!(make_folds(100, 5, 42).unwrap(), make_folds(100, 5, 42).unwrap());
        assert_ne!(make_folds(100, 5, 42).unwrap(), make_folds(100, 5, 43).unwrap());
    }

    #[test]
    fn folds_reject_bad_k() {
        assert!(make_folds(10, 1, 0).is_err());
        assert!(make_folds(3, 4, 0).is_err());
    }

    #[test]
    fn scaler_two_point_column() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let s = ScalerParams::fit(&x).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.sd, vec![1.0]);
        let t = s.transform(&x).unwrap();
        assert_eq!(t.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn scaler_constant_column_flagged() {
        let x = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let s = ScalerParams::fit(&x).unwrap();
        assert_eq!(s.constant, vec![true, false]);
        assert_eq!(s.sd[0], 1.0);
        let t = s.transform(&x).unwrap();
        assert!(t.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaler_centers_and_round_trips() {
        let x = DMatrix::from_fn(50, 4, |i, j| ((i * 31 + j * 17) % 23) as f64 * 0.7 - 3.0 + j as f64);
        let s = ScalerParams::fit(&x).unwrap();
        let t = s.transform(&x).unwrap();
        for col in t.column_iter() {
            assert!((col.sum() / 50.0).abs() < 1e-10);
            let sd = (col.iter().map(|v| v * v).sum::<f64>() / 50.0).sqrt();
            assert!((sd - 1.0).abs() < 1e-10);
        }
        let back = s.inverse_transform(&t).unwrap();
        assert!((back - &x).abs().max() < 1e-10);
        assert!(s.transform(&DMatrix::zeros(2, 3)).is_err());
    }

    fn toy(source: Source, layout: CovariateLayout) -> Dataset {
        let w = layout.width(source);
        let x = DMatrix::from_fn(4, w, |i, j| (10 * i + j) as f64);
        Dataset::new(
            source,
            x,
            vec![Arm::Treated, Arm::Control, Arm::Treated, Arm::Control],
            DVector::from_element(4, 1.0),
            layout,
        )
        .unwrap()
    }

    #[test]
    fn shared_block_slices_both_sources() {
        let rct = toy(Source::Rct, CovariateLayout::new(2, 1, 3).unwrap());
        let z = shared_block(&rct);
        assert_eq!(z, rct.x.columns(1, 2).into_owned());

        let os = toy(Source::Os, CovariateLayout::new(2, 1, 3).unwrap());
        assert_eq!(shared_block(&os), os.x.columns(0, 2).into_owned());

        let full = toy(Source::Rct, CovariateLayout::new(3, 0, 0).unwrap());
        assert_eq!(shared_block(&full), full.x);
    }

    #[test]
    fn dataset_rejects_inconsistent_input() {
        let layout = CovariateLayout::new(2, 1, 0).unwrap();
        let x = DMatrix::zeros(3, 3);
        let bad_rows = Dataset::new(Source::Rct, x.clone(), vec![Arm::Treated; 2], DVector::zeros(3), layout);
        assert!(bad_rows.is_err());
        let bad_cols = Dataset::new(Source::Os, x.clone(), vec![Arm::Treated; 3], DVector::zeros(3), layout);
        assert!(bad_cols.is_err());
        let mut y = DVector::zeros(3);
        y[1] = f64::NAN;
        assert!(Dataset::new(Source::Rct, x, vec![Arm::Treated; 3], y, layout).is_err());
        assert!(CovariateLayout::new(0, 1, 1).is_err());
        assert!(Arm::from_sign(0.0).is_err());
    }

    #[test]
    fn propensity_positivity() {
        assert!(PropensityModel::known(0.5).is_ok());
        assert!(PropensityModel::known(1.0).is_err());
        assert!(PropensityModel::known(0.0).is_err());
        let p = PropensityModel::known(0.3).unwrap();
        assert!((p.pi(Arm::Control, 0) - 0.7).abs() < 1e-15);
        assert!(PropensityModel::table(vec![0.2, 0.999], 0.05).is_err());
    }
}
