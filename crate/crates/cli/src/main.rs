//! `rmbs`: run pipeline stages from the command line.
//!
//! Without `--config` the defaults generate and analyze the bundled synthetic sample.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rmbs_core::error::{Error, Result};
use rmbs_core::performance::ClassThresholds;
use rmbs_core::pipeline::{PipelineConfig, Runner, Stage};

#[derive(Debug, Parser)]
#[command(name = "rmbs", version, about = "RMBS supply-chain analytics pipeline")]
struct Args {
    /// synth, extract, corpus, topics, label, features, fit, toxicity, report or all
    #[arg(long, default_value = "all")]
    stage: String,
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of topics
    #[arg(long)]
    k: Option<usize>,
    /// Dirichlet concentration of document mixtures
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-slice variance of the dynamic model
    #[arg(long)]
    chain_var: Option<f64>,
    /// Variational EM iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Comma-separated descending penalty values
    #[arg(long)]
    lambda_grid: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Class A thresholds as `ME_MAX,FE_MIN` in basis points
    #[arg(long)]
    threshold_class_a: Option<String>,
    /// Class M and B thresholds as `ME_MAX,FE_MIN` in basis points
    #[arg(long)]
    threshold_class_mb: Option<String>,
    /// Print the effective configuration and exit
    #[arg(long)]
    print_config: bool,
}

fn parse_floats(field: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(field, format!("`{t}` is not a number")))
        })
        .collect()
}

fn parse_thresholds(field: &str, s: &str) -> Result<ClassThresholds> {
    match parse_floats(field, s)?.as_slice() {
        &[me, fe] => ClassThresholds::new(me, fe).map_err(|e| Error::config(field, e.to_string())),
        _ => Err(Error::config(field, "expected ME_MAX,FE_MIN")),
    }
}

fn build_config(args: &Args) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(k) = args.k {
        cfg.topics.k = k;
    }
    if let Some(alpha) = args.alpha {
        cfg.topics.alpha = alpha;
    }
    if let Some(v) = args.chain_var {
        cfg.topics.chain_var = v;
    }
    if let Some(n) = args.iterations {
        cfg.topics.iterations = n;
    }
    if let Some(g) = &args.lambda_grid {
        cfg.lasso.lambda_grid = Some(parse_floats("--lambda-grid", g)?);
    }
    if let Some(f) = args.folds {
        cfg.lasso.n_folds = f;
    }
    if let Some(t) = &args.threshold_class_a {
        cfg.thresholds.class_a = parse_thresholds("--threshold-class-a", t)?;
    }
    if let Some(t) = &args.threshold_class_mb {
        let t = parse_thresholds("--threshold-class-mb", t)?;
        cfg.thresholds.class_m = t;
        cfg.thresholds.class_b = t;
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<()> {
    let stage: Stage = args.stage.parse().map_err(|_| Error::config("--stage", format!("unknown stage `{}`", args.stage)))?;
    let cfg = build_config(&args)?;
    if args.print_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let out = cfg.out_dir.clone();
    let manifest = Runner::new(cfg)?.run(stage)?;
    for s in &manifest.stages {
        eprintln!("{:<9} {:>7} ms  {} files", s.stage.as_str(), s.duration_ms, s.outputs.len());
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
