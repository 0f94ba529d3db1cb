use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{run_setting, summarize, ResultRecord, Setting, SummaryRow};
use crate::dgp::{CateForm, DgpConfig, OutcomeForm, Regime};
use crate::error::{invalid, CalmError, Result};
use crate::estimators::Method;

pub const RESULTS_HEADER: [&str; 10] =
    ["regime", "factor", "factor_value", "method", "replicate", "seed", "n_r", "n_o", "rmse", "fit_seconds"];

/// A knob varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    /// No change; a single-setting "sweep".
    Default,
    SigmaV2,
    DTrue,
    NR,
    OutcomeForm,
    Shift,
    SharedProportion,
    Omega,
    WZ,
    AlphaU,
    CateForm,
}

impl Factor {
    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Default => "default",
            Factor::SigmaV2 => "sigma_v2",
            Factor::DTrue => "d_true",
            Factor::NR => "n_r",
            Factor::OutcomeForm => "outcome_form",
            Factor::Shift => "shift",
            Factor::SharedProportion => "shared_proportion",
            Factor::Omega => "omega",
            Factor::WZ => "w_z",
            Factor::AlphaU => "alpha_u",
            Factor::CateForm => "cate_form",
        }
    }

    /// Apply one value to a DGP configuration.
    pub fn apply(self, dgp: &mut DgpConfig, value: &FactorValue) -> Result<()> {
        let regime = dgp.regime().as_str();
        let mismatch = || invalid(format!("factor '{}' does not apply to the {regime} regime", self.as_str()));
        match (self, &mut *dgp) {
            (Factor::Default, _) => Ok(()),
            (Factor::NR, DgpConfig::Baseline(c)) => value.count().map(|v| c.n_r = v),
            (Factor::NR, DgpConfig::Latent(c)) => value.count().map(|v| c.n_r = v),
            (Factor::NR, DgpConfig::Ihdp(c)) => value.count().map(|v| c.n_r = v),
            (Factor::SigmaV2, DgpConfig::Baseline(c)) => value.number().map(|v| c.sigma_v2 = v),
            (Factor::DTrue, DgpConfig::Baseline(c)) => value.count().map(|v| c.d_true = v),
            (Factor::OutcomeForm, DgpConfig::Baseline(c)) => OutcomeForm::parse(&value.to_string()).map(|v| c.outcome_form = v),
            (Factor::Shift, DgpConfig::Baseline(c)) => value.number().map(|v| c.shift_magnitude = v),
            (Factor::Shift, DgpConfig::Ihdp(c)) => value.number().map(|v| c.rct_shift_magnitude = v),
            (Factor::SharedProportion, DgpConfig::Baseline(c)) => value.number().map(|v| c.shared_proportion = Some(v)),
            (Factor::Omega, DgpConfig::Latent(c)) => value.number().map(|v| c.cate_form = CateForm::Sin { omega: v }),
            (Factor::WZ, DgpConfig::Latent(c)) => value.number().map(|v| c.w_z = v),
            (Factor::AlphaU, DgpConfig::Latent(c)) => value.number().map(|v| c.alpha_u = v),
            (Factor::CateForm, DgpConfig::Latent(c)) => {
                let omega = match c.cate_form {
                    CateForm::Sin { omega } => omega,
                    _ => 1.5,
                };
                c.cate_form = match value.to_string().as_str() {
                    "sin" => CateForm::Sin { omega },
                    "abs" => CateForm::Abs,
                    "quad" => CateForm::Quad,
                    other => return invalid(format!("unknown CATE form '{other}'")),
                };
                Ok(())
            }
            _ => mismatch(),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = CalmError;
    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Factor::Default,
            Factor::SigmaV2,
            Factor::DTrue,
            Factor::NR,
            Factor::OutcomeForm,
            Factor::Shift,
            Factor::SharedProportion,
            Factor::Omega,
            Factor::WZ,
            Factor::AlphaU,
            Factor::CateForm,
        ];
        all.into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| CalmError::InvalidArgument(format!("unknown factor '{s}'")))
    }
}

/// A sweep value: numeric for most factors, a name for the functional-form factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactorValue {
    Number(f64),
    Name(String),
}

impl FactorValue {
    /// Numbers stay numbers; anything else is a name.
    pub fn parse(s: &str) -> Self {
        s.trim().parse::<f64>().map_or_else(|_| FactorValue::Name(s.trim().to_string()), FactorValue::Number)
    }

    fn number(&self) -> Result<f64> {
        match self {
            FactorValue::Number(v) if v.is_finite() => Ok(*v),
            other => invalid(format!("expected a number, got '{other}'")),
        }
    }

    fn count(&self) -> Result<usize> {
        let v = self.number()?;
        if v < 0.0 || v.fract() != 0.0 {
            return invalid(format!("expected a non-negative integer, got {v}"));
        }
        Ok(v as usize)
    }
}

impl fmt::Display for FactorValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorValue::Number(v) => write!(f, "{v}"),
            FactorValue::Name(s) => f.write_str(s),
        }
    }
}

/// A template setting and one factor varied over a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub template: Setting,
    pub factor: Factor,
    pub values: Vec<FactorValue>,
}

impl SweepSpec {
    /// The resolved settings, validated before any work is done.
    pub fn settings(&self) -> Result<Vec<Setting>> {
        if self.values.is_empty() {
            return invalid(format!("sweep over '{}' has no values", self.factor));
        }
        self.template.validate()?;
        self.values
            .iter()
            .map(|v| {
                let mut s = self.template.clone();
                self.factor.apply(&mut s.dgp, v)?;
                match &s.dgp {
                    DgpConfig::Baseline(c) => {
                        c.validate()?;
                    }
                    DgpConfig::Latent(c) => {
                        c.validate()?;
                    }
                    DgpConfig::Ihdp(_) => {}
                }
                s.factor = self.factor.as_str().into();
                s.factor_value = v.to_string();
                Ok(s)
            })
            .collect()
    }

    pub fn regime(&self) -> Regime {
        self.template.regime()
    }
}

/// Files written by `run_sweep`.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub manifest: PathBuf,
    pub diagnostics: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    code_version: &'a str,
    factor: Factor,
    values: &'a [FactorValue],
    settings: Vec<ManifestSetting<'a>>,
}

#[derive(Serialize)]
struct ManifestSetting<'a> {
    setting: &'a Setting,
    seeds: Vec<u64>,
}

/// Run every setting of `spec` and write `results.csv`, `summary.csv`,
/// `diagnostics.jsonl` and `manifest.json` into `out_dir`.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<SweepOutput> {
    let settings = spec.settings()?;
    fs::create_dir_all(out_dir)?;
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION"),
        factor: spec.factor,
        values: &spec.values,
        settings: settings
            .iter()
            .map(|s| ManifestSetting { setting: s, seeds: (0..s.n_reps).map(|k| s.replicate_seed(k)).collect() })
            .collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let mut records = Vec::new();
    for s in &settings {
        log::info!("{} = {}: {} reps of {} methods", s.factor, s.factor_value, s.n_reps, s.methods.len());
        records.extend(run_setting(s, jobs)?);
    }
    let summary = summarize(&records);
    let results_csv = out_dir.join("results.csv");
    let summary_csv = out_dir.join("summary.csv");
    let diagnostics = out_dir.join("diagnostics.jsonl");
    write_records(&records, &results_csv)?;
    write_summary(&summary, &summary_csv)?;
    let mut f = fs::File::create(&diagnostics)?;
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    Ok(SweepOutput { records, summary, results_csv, summary_csv, manifest: manifest_path, diagnostics })
}

/// The results CSV. Failed fits have `rmse = NA`; their reasons live in the diagnostics file.
pub fn write_records(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in records {
        w.write_record([
            r.regime.as_str().to_string(),
            r.factor.clone(),
            r.factor_value.clone(),
            r.method.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.n_r.to_string(),
            r.n_o.to_string(),
            r.rmse.map_or_else(|| "NA".to_string(), |v| format!("{v:.17e}")),
            format!("{:.6}", r.fit_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "regime",
        "factor",
        "factor_value",
        "method",
        "n_reps",
        "n_failed",
        "mean_rmse",
        "se_rmse",
        "se_defined",
    ])?;
    for r in rows {
        w.write_record([
            r.regime.as_str().to_string(),
            r.factor.clone(),
            r.factor_value.clone(),
            r.method.to_string(),
            r.n_reps.to_string(),
            r.n_failed.to_string(),
            format!("{:.17e}", r.mean_rmse),
            format!("{:.17e}", r.se_rmse),
            r.se_defined.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a results CSV back. Diagnostics and failure reasons are not in the CSV.
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(CalmError::Load(format!("unexpected results header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| CalmError::Load(format!("bad number '{}' in column {}", field(i), RESULTS_HEADER[i])))
        };
        let rmse = match field(8) {
            "NA" => None,
            _ => Some(num(8)?),
        };
        out.push(ResultRecord {
            regime: field(0).parse()?,
            factor: field(1).into(),
            factor_value: field(2).into(),
            method: field(3).parse::<Method>()?,
            replicate: num(4)? as usize,
            seed: field(5).parse().map_err(|_| CalmError::Load(format!("bad seed '{}'", field(5))))?,
            n_r: num(6)? as usize,
            n_o: num(7)? as usize,
            failure: rmse.is_none().then(|| "failed".to_string()),
            rmse,
            fit_seconds: num(9)?,
            diagnostics: serde_json::Value::Null,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{BaselineDgpConfig, LatentDgpConfig};

    fn latent_template() -> Setting {
        let dgp = DgpConfig::Latent(LatentDgpConfig {
            p_z: 4,
            p_u: 2,
            p_v: 3,
            latent_dim: 2,
            n_r: 60,
            n_o: 200,
            ..Default::default()
        });
        Setting::new(dgp, vec![Method::Naive], 2, 0)
    }

    #[test]
    fn factor_names_round_trip() {
        for f in ["default", "sigma_v2", "d_true", "n_r", "outcome_form", "shift", "shared_proportion", "omega", "w_z", "alpha_u", "cate_form"] {
            assert_eq!(f.parse::<Factor>().unwrap().as_str(), f);
        }
        assert!("sigma".parse::<Factor>().is_err());
    }

    #[test]
    fn values_resolve_on_their_regime_only() {
        let spec = SweepSpec {
            template: latent_template(),
            factor: Factor::Omega,
            values: vec![FactorValue::Number(0.5), FactorValue::Number(2.0)],
        };
        let s = spec.settings().unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].factor_value, "2");
        match &s[1].dgp {
            DgpConfig::Latent(c) => assert_eq!(c.cate_form, CateForm::Sin { omega: 2.0 }),
            _ => unreachable!(),
        }
        let wrong = SweepSpec { factor: Factor::SigmaV2, ..spec.clone() };
        assert!(wrong.settings().is_err());
        let empty = SweepSpec { values: vec![], ..spec };
        assert!(empty.settings().is_err());
    }

    #[test]
    fn sigma_sweep_has_five_settings() {
        let t = Setting::new(DgpConfig::Baseline(BaselineDgpConfig::default()), vec![Method::Naive], 1, 0);
        let values = [0.1, 0.25, 0.5, 1.0, 2.0].map(FactorValue::Number).to_vec();
        let s = SweepSpec { template: t, factor: Factor::SigmaV2, values }.settings().unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].factor, "sigma_v2");
    }

    #[test]
    fn value_parsing() {
        assert_eq!(FactorValue::parse("1.5"), FactorValue::Number(1.5));
        assert_eq!(FactorValue::parse(" quad"), FactorValue::Name("quad".into()));
        assert!(FactorValue::Number(2.5).count().is_err());
    }

    #[test]
    fn sweep_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec {
            template: latent_template(),
            factor: Factor::NR,
            values: vec![FactorValue::Number(40.0), FactorValue::Number(60.0)],
        };
        let out = run_sweep(&spec, dir.path(), 2).unwrap();
        assert_eq!(out.records.len(), 4);
        let text = fs::read_to_string(&out.results_csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER.join(","));
        let back = read_results_csv(&out.results_csv).unwrap();
        for (a, b) in back.iter().zip(&out.records) {
            assert_eq!((a.method, a.replicate, a.rmse, a.n_r), (b.method, b.replicate, b.rmse, b.n_r));
        }
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out.manifest).unwrap()).unwrap();
        assert_eq!(m["settings"][1]["seeds"], serde_json::json!([0, 1]));
        let again: Setting = serde_json::from_value(m["settings"][1]["setting"].clone()).unwrap();
        assert_eq!(again.dgp.n_r(), 60);
        assert_eq!(fs::read_to_string(&out.diagnostics).unwrap().lines().count(), 4);
        assert!(fs::read_to_string(&out.summary_csv).unwrap().starts_with("regime,factor,factor_value,method,n_reps"));
    }
}
