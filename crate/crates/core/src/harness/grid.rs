use super::{Factor, FactorValue, Setting, SweepSpec};
use crate::dgp::{BaselineDgpConfig, DgpConfig, IhdpConfig, LatentDgpConfig};
use crate::estimators::Method;

/// Simulated settings in the published grid (29 baseline + 22 latent), IHDP excluded.
pub const GRID_SETTINGS: usize = 51;

const REPS: usize = 20;
const IHDP_REPS: usize = 50;

fn nums(v: &[f64]) -> Vec<FactorValue> {
    v.iter().copied().map(FactorValue::Number).collect()
}

fn names(v: &[&str]) -> Vec<FactorValue> {
    v.iter().map(|s| FactorValue::Name((*s).into())).collect()
}

/// Every published sweep at default settings, all eight methods, then IHDP last.
pub fn full_grid(base_seed: u64) -> Vec<SweepSpec> {
    let methods = Method::ALL.to_vec();
    let baseline = Setting::new(DgpConfig::Baseline(BaselineDgpConfig::default()), methods.clone(), REPS, base_seed);
    let latent = Setting::new(DgpConfig::Latent(LatentDgpConfig::default()), methods.clone(), REPS, base_seed);
    let ihdp = Setting::new(DgpConfig::Ihdp(IhdpConfig::default()), methods, IHDP_REPS, base_seed);
    let sweep = |t: &Setting, factor, values| SweepSpec { template: t.clone(), factor, values };
    vec![
        sweep(&baseline, Factor::SigmaV2, nums(&[0.1, 0.25, 0.5, 1.0, 2.0])),
        sweep(&baseline, Factor::DTrue, nums(&[2.0, 3.0, 5.0, 10.0, 15.0, 20.0])),
        sweep(&baseline, Factor::NR, nums(&[100.0, 250.0, 500.0, 1000.0, 2000.0])),
        sweep(&baseline, Factor::OutcomeForm, names(&["linear", "quadratic", "sinusoidal"])),
        sweep(&baseline, Factor::Shift, nums(&[0.0, 0.25, 0.5, 1.0, 2.0, 5.0])),
        sweep(&baseline, Factor::SharedProportion, nums(&[0.3, 0.5, 0.7, 0.9])),
        sweep(&latent, Factor::Omega, nums(&[0.5, 1.0, 1.5, 2.0])),
        sweep(&latent, Factor::WZ, nums(&[0.0, 0.5, 1.0, 1.5, 2.0])),
        sweep(&latent, Factor::NR, nums(&[100.0, 200.0, 500.0, 1000.0, 2000.0])),
        sweep(&latent, Factor::AlphaU, nums(&[0.5, 1.0, 2.0, 3.0, 4.0])),
        sweep(&latent, Factor::CateForm, names(&["sin", "abs", "quad"])),
        sweep(&ihdp, Factor::Default, names(&["default"])),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::Regime;

    #[test]
    fn grid_covers_every_published_setting() {
        let grid = full_grid(0);
        let count = |r: Regime| -> usize {
            grid.iter().filter(|s| s.regime() == r).map(|s| s.settings().unwrap().len()).sum()
        };
        assert_eq!(count(Regime::Baseline), 29);
        assert_eq!(count(Regime::LatentNonlinear), 22);
        assert_eq!(count(Regime::Baseline) + count(Regime::LatentNonlinear), GRID_SETTINGS);
        assert_eq!(count(Regime::Ihdp), 1);
        let ihdp = grid.last().unwrap();
        assert_eq!(ihdp.template.n_reps, 50);
        assert!(grid.iter().all(|s| s.template.methods.len() == 8));
    }
}
