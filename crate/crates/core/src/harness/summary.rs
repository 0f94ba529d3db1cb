use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ResultRecord;
use crate::dgp::Regime;
use crate::estimators::Method;

/// Mean and standard error of one (setting, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: Regime,
    pub factor: String,
    pub factor_value: String,
    pub method: Method,
    pub n_reps: usize,
    pub n_failed: usize,
    /// Over successful replicates; NaN when all failed.
    pub mean_rmse: f64,
    /// `sd / sqrt(n)` with the n − 1 sd; 0 when fewer than two replicates succeeded.
    pub se_rmse: f64,
    /// False when the SE is the degenerate 0 convention.
    pub se_defined: bool,
}

/// Group records by (regime, factor, factor_value, method), keeping first-seen order.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(Regime, String, String, Method)> = Vec::new();
    let mut cells: BTreeMap<(Regime, String, String, Method), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.regime, r.factor.clone(), r.factor_value.clone(), r.method);
        cells
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &cells[&key];
            let ok: Vec<f64> = rows.iter().filter_map(|r| r.rmse).collect();
            let n = ok.len();
            let mean = if n == 0 { f64::NAN } else { ok.iter().sum::<f64>() / n as f64 };
            let se = if n < 2 {
                0.0
            } else {
                let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            };
            let (regime, factor, factor_value, method) = key;
            SummaryRow {
                regime,
                factor,
                factor_value,
                method,
                n_reps: rows.len(),
                n_failed: rows.len() - n,
                mean_rmse: mean,
                se_rmse: se,
                se_defined: n >= 2,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, k: usize, rmse: Option<f64>) -> ResultRecord {
        ResultRecord {
            regime: Regime::Baseline,
            factor: "sigma_v2".into(),
            factor_value: "1".into(),
            method,
            replicate: k,
            seed: k as u64,
            n_r: 10,
            n_o: 10,
            rmse,
            fit_seconds: 0.0,
            failure: rmse.is_none().then(|| "boom".into()),
            diagnostics: serde_json::Value::Null,
        }
    }

    #[test]
    fn hand_values() {
        let s = summarize(&[rec(Method::Naive, 0, Some(1.0)), rec(Method::Naive, 1, Some(3.0))]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_rmse, 2.0);
        assert!((s[0].se_rmse - 1.0).abs() < 1e-15);
        assert!(s[0].se_defined);
    }

    #[test]
    fn single_record_has_flagged_zero_se() {
        let s = summarize(&[rec(Method::Racer, 0, Some(0.7))]);
        assert_eq!((s[0].mean_rmse, s[0].se_rmse, s[0].se_defined), (0.7, 0.0, false));
    }

    #[test]
    fn failures_are_counted_but_not_averaged() {
        let s = summarize(&[
            rec(Method::Naive, 0, Some(1.0)),
            rec(Method::Naive, 1, None),
            rec(Method::Naive, 2, Some(2.0)),
            rec(Method::CalmNn, 0, None),
        ]);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].n_reps, s[0].n_failed, s[0].mean_rmse), (3, 1, 1.5));
        assert!(s[1].mean_rmse.is_nan());
        assert_eq!(s[1].n_failed, 1);
    }
}
