//! `mklnet`: synthetic data, fitting, selection, geometry and rate sweeps.
//!
//! Every run writes `manifest.json` next to its outputs; passing that file
//! back through `--config` reproduces the outputs byte for byte.
//!
//! Exit codes: 0 success, 1 bad input or I/O, 2 usage, 3 numerical failure
//! (with `diagnostics.json` in the output directory).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mklnet::data::{Noise, Profile};
use mklnet::rates::Branch;
use mklnet::MklError;

use commands::Outputs;
use config::*;

#[derive(Parser)]
#[command(name = "mklnet", version, about = "Elastic-net / L1 multiple kernel learning experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; falls back to the config, then MKLNET_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or the primary output file when it has an extension.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a ground truth and a dataset (run.csv + run.meta.json).
    GenData(GenDataArgs),
    /// Fit one model, by theorem schedule or explicit weights.
    Fit(FitArgs),
    /// Half-split validation over the candidate grid.
    Select(SelectArgs),
    /// κ(I), ρ(I) and the restricted-eigenvalue bound; theorem constants given a truth.
    Geometry(GeometryArgs),
    /// Error-vs-n (or vs-d) sweeps with fitted log-log slopes.
    Rates(RatesArgs),
    /// Support-recovery diagnostic and side conditions for one dataset.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long = "M")]
    blocks: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long = "K")]
    truncation: Option<usize>,
    /// homogeneous | inhomogeneous | r2g:R
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Leading eigenfunctions spanned by each g*_m.
    #[arg(long)]
    support: Option<usize>,
    #[arg(long)]
    permute: bool,
    #[arg(long)]
    n: Option<usize>,
    /// none | bounded:L | gaussian:SIGMA
    #[arg(long, value_parser = parse_noise)]
    noise: Option<Noise>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, value_parser = parse_branch)]
    branch: Option<Branch>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    psi: Option<f64>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    /// exact | subsampled
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    clip_bound: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long = "M")]
    blocks: Option<usize>,
    /// Comma-separated 0-based block indices.
    #[arg(long = "I", value_delimiter = ',')]
    index_set: Option<Vec<usize>>,
    /// product | equicorrelated:R | duplicated:i,j,...
    #[arg(long, value_parser = parse_design)]
    design: Option<DesignSpec>,
    /// analytic | mc
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long = "K")]
    truncation: Option<usize>,
    #[arg(long)]
    k_trunc: Option<usize>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    h: Option<Vec<f64>>,
}

#[derive(Args)]
struct RatesArgs {
    /// l1 | elastic, or both comma-separated.
    #[arg(long, value_parser = parse_branch, value_delimiter = ',')]
    branch: Option<Vec<Branch>>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "M")]
    blocks: Option<usize>,
    #[arg(long = "K")]
    truncation: Option<usize>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    support: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    d_grid: Option<Vec<usize>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, value_parser = parse_noise)]
    noise: Option<Noise>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long)]
    lambda_scale: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_parser = parse_branch)]
    branch: Option<Branch>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    psi: Option<f64>,
}

/// `target = flag` for every flag that was given.
macro_rules! apply {
    ($args:expr, $cfg:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.take() { $cfg.$field = v; } )*
    };
}

macro_rules! apply_opt {
    ($args:expr, $cfg:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.take() { $cfg.$field = Some(v); } )*
    };
}

fn base<T: Default + serde::de::DeserializeOwned>(global: &Global, command: &str) -> Result<T> {
    match &global.config {
        Some(p) => config::load(p, command),
        None => Ok(T::default()),
    }
}

fn require_data(p: &std::path::Path) -> Result<()> {
    if p.as_os_str().is_empty() {
        anyhow::bail!("no dataset given (--data)");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(Outputs, Vec<String>)> {
    let g = &cli.global;
    let mut warnings = Vec::new();
    let outputs = match cli.command {
        Command::GenData(mut a) => {
            let mut cfg: GenDataConfig = base(g, "gen-data")?;
            apply!(a, cfg; blocks, d, q, s, truncation, profile, n, noise);
            apply_opt!(a, cfg; support);
            cfg.permute |= a.permute;
            let seed = resolve_seed(g.seed, cfg.seed)?;
            cfg.seed = Some(seed);
            let out = Outputs::new(g.out.as_deref(), "run.csv")?;
            commands::gen_data(&cfg, seed, &out)?;
            out.manifest("gen-data", seed, &cfg)?;
            out
        }
        Command::Fit(mut a) => {
            let mut cfg: FitConfig = base(g, "fit")?;
            apply!(a, cfg; data, t, psi);
            apply_opt!(a, cfg; meta, branch, lambda1, lambda2, lambda3);
            require_data(&cfg.data)?;
            let seed = resolve_seed(g.seed, cfg.seed)?;
            cfg.seed = Some(seed);
            let out = Outputs::new(g.out.as_deref(), "model.json")?;
            commands::fit_cmd(&cfg, &out)?;
            out.manifest("fit", seed, &cfg)?;
            out
        }
        Command::Select(mut a) => {
            let mut cfg: SelectConfig = base(g, "select")?;
            apply!(a, cfg; data, mode, budget, margin);
            apply_opt!(a, cfg; meta, clip_bound);
            require_data(&cfg.data)?;
            let seed = resolve_seed(g.seed, cfg.seed)?;
            cfg.seed = Some(seed);
            let out = Outputs::new(g.out.as_deref(), "select.csv")?;
            commands::select_cmd(&cfg, &out)?;
            out.manifest("select", seed, &cfg)?;
            out
        }
        Command::Geometry(mut a) => {
            let mut cfg: GeometryConfig = base(g, "geometry")?;
            apply!(a, cfg; blocks, index_set, design, method, s, truncation, k_trunc, n_mc);
            apply_opt!(a, cfg; meta, h);
            let seed = resolve_seed(g.seed, cfg.seed)?;
            cfg.seed = Some(seed);
            let out = Outputs::new(g.out.as_deref(), "geometry.json")?;
            commands::geometry_cmd(&cfg, seed, &out)?;
            out.manifest("geometry", seed, &cfg)?;
            out
        }
        Command::Rates(mut a) => {
            let mut cfg: RatesConfig = base(g, "rates")?;
            apply!(a, cfg; branch, s, q, d, blocks, truncation, profile, n_grid, d_grid, seeds, noise, t, psi, lambda_scale);
            apply_opt!(a, cfg; support);
            let seed = resolve_seed(g.seed, cfg.seed)?;
            cfg.seed = Some(seed);
            let out = Outputs::new(g.out.as_deref(), "report.csv")?;
            warnings = commands::rates_cmd(&cfg, seed, &out)?;
            out.manifest("rates", seed, &cfg)?;
            out
        }
        Command::Diagnose(mut a) => {
            let mut cfg: DiagnoseConfig = base(g, "diagnose")?;
            apply!(a, cfg; data, branch, t, psi);
            apply_opt!(a, cfg; meta, model);
            require_data(&cfg.data)?;
            let seed = resolve_seed(g.seed, cfg.seed)?;
            cfg.seed = Some(seed);
            let out = Outputs::new(g.out.as_deref(), "diagnose.json")?;
            commands::diagnose_cmd(&cfg, &out)?;
            out.manifest("diagnose", seed, &cfg)?;
            out
        }
    };
    Ok((outputs, warnings))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.jobs).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let out_hint = cli.global.out.clone();
    match run(cli) {
        Ok((out, warnings)) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("wrote {}", out.primary.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| c.downcast_ref::<MklError>().is_some_and(MklError::is_numeric));
            if numeric {
                let dir = match out_hint {
                    Some(p) if p.extension().is_some() => p.parent().map(PathBuf::from).unwrap_or_default(),
                    Some(p) => p,
                    None => PathBuf::from("mklnet-out"),
                };
                let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
                let _ = std::fs::create_dir_all(&dir);
                let diag = serde_json::json!({ "error": format!("{e:#}"), "kind": "numeric" });
                let _ = commands::write_json(&dir.join("diagnostics.json"), &diag);
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
