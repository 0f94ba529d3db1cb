use calm_core::data::{make_folds, PropensityModel, ScalerParams};
use calm_core::dgp::Regime;
use calm_core::estimators::{cmo, ArmPredictions, Method};
use calm_core::harness::{rmse, summarize, ResultRecord};
use calm_core::linmod::{fit_lasso_fixed, LassoConfig};
use calm_core::rng::derive_key;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, n * p).prop_map(move |v| DMatrix::from_vec(n, p, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Stationarity on the standardized scale: |x_jᵀr/n| ≤ λ, with equality
    // and matching sign on the support.
    #[test]
    fn lasso_satisfies_kkt(x in matrix(30, 4), beta in prop::collection::vec(-2.0..2.0f64, 4),
                           noise in prop::collection::vec(-1.0..1.0f64, 30), frac in 0.02..0.8f64) {
        let y = &x * DVector::from_vec(beta) + DVector::from_vec(noise);
        let sc = ScalerParams::fit(&x).unwrap();
        let xs = sc.transform(&x).unwrap();
        prop_assume!(sc.sd.iter().all(|s| *s > 1e-3));
        let lmax = (xs.transpose() * y.add_scalar(-y.mean()) / 30.0).amax();
        let lambda = frac * lmax;
        let m = fit_lasso_fixed(&x, &y, lambda, &LassoConfig { strict: true, ..Default::default() }).unwrap();
        let r = &y - m.predict(&x).unwrap();
        prop_assert!(r.mean().abs() < 1e-9);
        let g = xs.transpose() * &r / 30.0;
        for j in 0..4 {
            if m.coefficients[j] == 0.0 {
                prop_assert!(g[j].abs() <= lambda + 1e-6);
            } else {
                prop_assert!((g[j] - lambda * m.coefficients[j].signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn seed_keys_are_injective(a in any::<(u64, u64, u64)>(), b in any::<(u64, u64, u64)>()) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_key(a.0, a.1, a.2), derive_key(b.0, b.1, b.2));
    }

    #[test]
    fn summary_mean_equals_record_mean(vals in prop::collection::vec(prop::option::weighted(0.8, 0.0..10.0f64), 1..30)) {
        let recs: Vec<ResultRecord> = vals.iter().enumerate().map(|(k, v)| ResultRecord {
            regime: Regime::Baseline,
            factor: "n_r".into(),
            factor_value: "100".into(),
            method: Method::Racer,
            replicate: k,
            seed: k as u64,
            n_r: 100,
            n_o: 1000,
            rmse: *v,
            fit_seconds: 0.0,
            failure: v.is_none().then(|| "failed".into()),
            diagnostics: serde_json::Value::Null,
        }).collect();
        let row = &summarize(&recs)[0];
        let ok: Vec<f64> = vals.iter().flatten().copied().collect();
        prop_assert_eq!(row.n_failed, vals.len() - ok.len());
        if ok.is_empty() {
            prop_assert!(row.mean_rmse.is_nan());
        } else {
            let mean = ok.iter().sum::<f64>() / ok.len() as f64;
            prop_assert!((row.mean_rmse - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn rmse_of_a_constant_shift(v in prop::collection::vec(-5.0..5.0f64, 1..50), c in -3.0..3.0f64) {
        let a = DVector::from_vec(v);
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        prop_assert!((rmse(&a.add_scalar(c), &a).unwrap() - c.abs()).abs() < 1e-12);
    }

    // Var ψ as a function of a constant m is (σ₁² + (μ₁−m)²)/π₁ + (σ₋₁² + (μ₋₁−m)²)/π₋₁;
    // the CMO must sit at its minimum.
    #[test]
    fn cmo_minimizes_the_variance_quadratic(mu1 in -5.0..5.0f64, mu0 in -5.0..5.0f64, p in 0.05..0.95f64, d in 1e-4..1.0f64) {
        let preds = ArmPredictions {
            base: [DVector::from_element(1, mu0), DVector::from_element(1, mu1)],
            discrepancy: [DVector::zeros(1), DVector::zeros(1)],
        };
        let m = cmo(&preds, &PropensityModel::known(p).unwrap(), &[0]).unwrap()[0];
        let f = |m: f64| (mu1 - m).powi(2) / p + (mu0 - m).powi(2) / (1.0 - p);
        prop_assert!(f(m) <= f(m + d) && f(m) <= f(m - d));
        prop_assert!((m - ((1.0 - p) * mu1 + p * mu0)).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_and_balance(n in 10usize..300, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let f = make_folds(n, k, seed).unwrap();
        let sizes = f.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = (0..k).flat_map(|j| f.rows_in(j)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
