use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use calm_core::dgp::{BaselineDgpConfig, DgpConfig, IhdpConfig, LatentDgpConfig, Regime};
use calm_core::estimators::Method;
use calm_core::harness::{
    full_grid, run_setting, run_sweep, summarize, write_records, write_summary, Factor, FactorValue, Setting,
    SweepSpec,
};
use calm_core::verify::{run_suite, Suite};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calm", version, about = "Simulation sweeps for calibrated CATE estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep one factor of a regime's default setting.
    Sweep {
        #[arg(long, default_value = "baseline")]
        regime: Regime,
        /// Factor name, e.g. sigma_v2, n_r, omega. Defaults to the unmodified setting.
        #[arg(long, default_value = "default")]
        factor: Factor,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', default_value = "default")]
        values: Vec<String>,
        /// Comma-separated methods; all eight when omitted.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Read a full sweep spec from JSON instead of the flags above.
        #[arg(long, conflicts_with_all = ["factor", "values", "methods"])]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single fully specified setting from JSON.
    RunOne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property and acceptance checks.
    Verify {
        #[arg(long, default_value = "unit")]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Keep the simulation summaries here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the spec of every published sweep; `--run` also executes them.
    PaperGrid {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the replicate count (e.g. 3 for a smoke run).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        run: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_dgp(regime: Regime) -> DgpConfig {
    match regime {
        Regime::Baseline => DgpConfig::Baseline(BaselineDgpConfig::default()),
        Regime::LatentNonlinear => DgpConfig::Latent(LatentDgpConfig::default()),
        Regime::Ihdp => DgpConfig::Ihdp(IhdpConfig::default()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sweep_dir_name(spec: &SweepSpec) -> String {
    format!("{}_{}", spec.regime().as_str(), spec.factor)
}

fn report_sweep(spec: &SweepSpec, out: &Path, jobs: usize) -> Result<()> {
    let res = run_sweep(spec, out, jobs)?;
    let failed = res.records.iter().filter(|r| r.is_failure()).count();
    for row in &res.summary {
        println!(
            "{:<10} {:<8} {:<8} mean {:.4} se {:.4}{}",
            row.factor_value,
            row.method,
            row.regime.as_str(),
            row.mean_rmse,
            row.se_rmse,
            if row.n_failed > 0 { format!(" ({} failed)", row.n_failed) } else { String::new() }
        );
    }
    if failed > 0 {
        log::warn!("{failed} fits failed; see {}", res.diagnostics.display());
    }
    println!("wrote {}", res.summary_csv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sweep { regime, factor, values, methods, reps, seed, jobs, config, out } => {
            let spec = match config {
                Some(path) => read_json::<SweepSpec>(&path)?,
                None => {
                    let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods };
                    SweepSpec {
                        template: Setting::new(default_dgp(regime), methods, reps, seed),
                        factor,
                        values: values.iter().map(|v| FactorValue::parse(v)).collect(),
                    }
                }
            };
            report_sweep(&spec, &out, jobs)?;
        }
        Command::RunOne { config, jobs, out } => {
            let setting: Setting = read_json(&config)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&setting)?)?;
            let records = run_setting(&setting, jobs)?;
            let summary = summarize(&records);
            write_records(&records, &out.join("results.csv"))?;
            write_summary(&summary, &out.join("summary.csv"))?;
            let mut diag = fs::File::create(out.join("diagnostics.jsonl"))?;
            for r in &records {
                serde_json::to_writer(&mut diag, r)?;
                writeln!(diag)?;
            }
            for row in &summary {
                println!("{:<8} mean {:.4} se {:.4} failed {}", row.method, row.mean_rmse, row.se_rmse, row.n_failed);
            }
        }
        Command::Verify { suite, jobs, out } => {
            let checks = run_suite(suite, jobs, out.as_deref(), |c| println!("{c}"))?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::PaperGrid { seed, reps, run, jobs, out } => {
            let mut grid = full_grid(seed);
            if let Some(r) = reps {
                if r == 0 {
                    bail!("--reps must be positive");
                }
                grid.iter_mut().for_each(|s| s.template.n_reps = r);
            }
            fs::create_dir_all(&out)?;
            let mut index = Vec::new();
            let mut total = 0;
            for spec in &grid {
                let n = spec.settings()?.len();
                total += n;
                let name = sweep_dir_name(spec);
                let file = out.join(format!("{name}.json"));
                fs::write(&file, serde_json::to_string_pretty(spec)?)?;
                index.push(serde_json::json!({ "sweep": name, "settings": n, "spec": file.file_name().and_then(|f| f.to_str()) }));
            }
            fs::write(out.join("grid.json"), serde_json::to_string_pretty(&index)?)?;
            println!("{} sweeps, {total} settings written to {}", grid.len(), out.display());
            if run {
                for spec in &grid {
                    report_sweep(spec, &out.join(sweep_dir_name(spec)), jobs)?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
