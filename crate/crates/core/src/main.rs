use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use certattack::attacks::clean_verdict;
use certattack::harness::{
    certifiers, compare_selected, ibp_study, load_datasets, report, run_sweep, sample_seed, select_operating_point,
    sigma_estimation_run, trained_model, ExperimentConfig, GridUnits, RunRecord,
};
use certattack::{Error, Result};

#[derive(Parser)]
#[command(name = "certattack", version, about = "Certify small classifiers and attack their certificates")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, global = true, env = "CERTATTACK_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Units of grid step sizes, overriding the config.
    #[arg(long)]
    units: Option<GridUnits>,
    /// Worker threads, overriding the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load from cache) the model of every σ setting.
    Train(Common),
    /// Certify one test point with the judge's budget.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: usize,
        /// σ setting index.
        #[arg(long, default_value_t = 0)]
        setting: usize,
    },
    /// Run one attack on one test point.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        setting: usize,
        /// Method grid index.
        #[arg(long, default_value_t = 0)]
        grid: usize,
        /// Parameter point within the grid.
        #[arg(long, default_value_t = 0)]
        point: usize,
        /// Keep the per-iteration trace in the output.
        #[arg(long)]
        trace: bool,
    },
    /// Run (or resume) the full parameter sweep.
    Sweep(Common),
    /// Pick one operating point per method from a finished sweep.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
    },
    /// Attack with a misestimated σ.
    SigmaStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sigma_true: f64,
        #[arg(long, value_delimiter = ',', default_value = "1.0,1.5")]
        factors: Vec<f64>,
    },
    /// Compare CAA and PGD against interval bound propagation.
    IbpStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
    },
    /// Write CSV, Markdown and SVG summaries of a finished sweep.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
        /// Destination, by default `report/` inside the sweep directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(u) = c.units {
        cfg.grid_units = u;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn setting_sigma(cfg: &ExperimentConfig, setting: usize) -> Result<Option<f64>> {
    cfg.certifier
        .settings()
        .get(setting)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no σ setting {setting}")))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(out) = &cli.out {
        std::env::set_var("CERTATTACK_OUT", out);
    }
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            let dir = cfg.resolved_output_dir();
            let mut out = Vec::new();
            for s in cfg.certifier.settings() {
                let (m, hash) = trained_model(&cfg, &train_set, s, Some(&dir))?;
                out.push(serde_json::json!({
                    "sigma": s,
                    "model_hash": hash,
                    "test_accuracy": certattack::model::accuracy(&m, &test_set)?,
                }));
            }
            print(&out)
        }
        Command::Certify { common, index, setting } => {
            let cfg = load(&common)?;
            let sigma = setting_sigma(&cfg, setting)?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            if index >= test_set.len() {
                return Err(Error::InvalidArgument(format!("index {index} outside {} test points", test_set.len())));
            }
            let (m, _) = trained_model(&cfg, &train_set, sigma, Some(&cfg.resolved_output_dir()))?;
            let (_, judge) = certifiers(&cfg.certifier, &m, sigma, cfg.seed)?;
            let v = clean_verdict(judge.as_ref(), test_set.input(index), sample_seed(cfg.seed, index))?;
            print(&serde_json::json!({
                "index": index,
                "label": test_set.label(index),
                "class": v.class,
                "radius": v.radius,
                "sigma": sigma,
            }))
        }
        Command::Attack {
            common,
            index,
            setting,
            grid,
            point,
            trace,
        } => {
            let cfg = load(&common)?;
            let sigma = setting_sigma(&cfg, setting)?;
            let spec = cfg
                .methods
                .get(grid)
                .ok_or_else(|| Error::InvalidArgument(format!("no method grid {grid}")))?
                .points(cfg.grid_units)?
                .get(point)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no point {point} in grid {grid}")))?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            if index >= test_set.len() {
                return Err(Error::InvalidArgument(format!("index {index} outside {} test points", test_set.len())));
            }
            let (m, _) = trained_model(&cfg, &train_set, sigma, Some(&cfg.resolved_output_dir()))?;
            let (att, judge) = certifiers(&cfg.certifier, &m, sigma, cfg.seed)?;
            let mut r = spec
                .with_seed(sample_seed(cfg.seed, index))
                .run(att.as_ref(), judge.as_ref(), test_set.input(index))?;
            if !trace {
                r.trace.clear();
            }
            print(&r)
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let rec = run_sweep(&cfg)?;
            let sel = select_operating_point(&rec, 0.9)?;
            for cmp in compare_selected(&rec, &sel)? {
                let sigma = cmp.sigma.map_or("ibp".to_string(), |s| s.to_string());
                eprintln!("σ = {sigma}\n{}", certattack::metrics::summary_text(&cmp.metrics));
            }
            print(&serde_json::json!({
                "output_dir": cfg.resolved_output_dir(),
                "config_hash": rec.config_hash,
                "rows": rec.rows.len(),
            }))
        }
        Command::Select { common, target } => {
            let cfg = load(&common)?;
            let rec = RunRecord::load(cfg.resolved_output_dir())?;
            print(&select_operating_point(&rec, target)?)
        }
        Command::SigmaStudy {
            common,
            sigma_true,
            factors,
        } => {
            let cfg = load(&common)?;
            print(&sigma_estimation_run(&cfg, sigma_true, &factors)?)
        }
        Command::IbpStudy { common, target } => {
            let cfg = load(&common)?;
            let s = ibp_study(&cfg, target)?;
            print(&serde_json::json!({
                "selections": s.selections,
                "caa_success": s.caa_success,
                "pgd_success": s.pgd_success,
                "matched_budget": s.matched_budget,
                "caa_at_least_pgd": s.caa_at_least_pgd,
            }))
        }
        Command::Report { common, target, dir } => {
            let cfg = load(&common)?;
            let src = cfg.resolved_output_dir();
            let rec = RunRecord::load(&src)?;
            let files = report(&rec, dir.unwrap_or_else(|| src.join("report")), target)?;
            print(&files)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
