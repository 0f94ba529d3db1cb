use rand::seq::index::sample;

use super::Parameters;
use crate::rng::derive_rng;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Compare `loss_and_grad` against central differences at up to `probes`
/// randomly chosen coordinates (all of them when `probes` exceeds the count).
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-4)`, so coordinates with a
/// vanishing gradient are judged on absolute error.
pub fn grad_check<P, F>(mut loss_and_grad: F, params: &P, probes: usize, h: f64, seed: u64) -> GradCheckReport
where
    P: Parameters,
    F: FnMut(&P) -> (f64, P),
{
    let (_, grad) = loss_and_grad(params);
    let n = params.len();
    let idx: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        let mut rng = derive_rng(seed, crate::rng::stage::PERMUTATION, 7);
        let mut v = sample(&mut rng, n, probes).into_vec();
        v.sort_unstable();
        v
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: idx.len(),
    };
    let mut p = params.clone();
    for k in idx {
        let orig = p.get(k);
        p.set(k, orig + h);
        let (fp, _) = loss_and_grad(&p);
        p.set(k, orig - h);
        let (fm, _) = loss_and_grad(&p);
        p.set(k, orig);
        let num = (fp - fm) / (2.0 * h);
        let a = grad.get(k);
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
        if rel > report.max_rel_error || !rel.is_finite() {
            report = GradCheckReport {
                max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                worst_index: k,
                analytic: a,
                numeric: num,
                probes: report.probes,
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Layer, MlpParams};
    use nalgebra::{DMatrix, DVector};

    fn single(vals: &[f64]) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                w: DMatrix::from_column_slice(vals.len(), 1, vals),
                b: DVector::zeros(1),
            }],
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let p = single(&[1.0, 2.0]);
        let good = grad_check(
            |q: &MlpParams| {
                let w = &q.layers[0].w;
                (w.norm_squared(), single(&[2.0 * w[0], 2.0 * w[1]]))
            },
            &p,
            10,
            1e-5,
            0,
        );
        assert!(good.max_rel_error < 1e-9);
        let bad = grad_check(
            |q: &MlpParams| {
                let w = &q.layers[0].w;
                (w.norm_squared(), single(&[2.0 * w[0], w[1]]))
            },
            &p,
            10,
            1e-5,
            0,
        );
        assert!(bad.max_rel_error > 0.4);
        assert_eq!(bad.worst_index, 1);
    }
}
