//! Resolved per-command configurations and the run manifest.
//!
//! Precedence: command-line flag, then `--config` file (plain config or a
//! manifest from an earlier run), then the defaults below. The seed falls
//! back to `MKLNET_SEED` and finally 0.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mklnet::data::{Noise, Profile};
use mklnet::kernel::{KernelSpec, DEFAULT_TRUNCATION};
use mklnet::rates::Branch;
use mklnet::solver::FitOptions;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MKLNET_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Reads `path` as a config for `command`: either the bare config object or
/// a manifest whose `command` must match.
pub fn load<T: DeserializeOwned>(path: &Path, command: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let config = match value.get("command").and_then(|c| c.as_str()) {
        Some(c) if value.get("config").is_some() => {
            if c != command {
                bail!("{} is a manifest for `{c}`, not `{command}`", path.display());
            }
            value["config"].clone()
        }
        _ => value,
    };
    serde_json::from_value(config).with_context(|| format!("invalid {command} config in {}", path.display()))
}

pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

/// `none`, `bounded:L` or `gaussian:σ`.
pub fn parse_noise(s: &str) -> std::result::Result<Noise, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let value = || arg.parse::<f64>().map_err(|_| format!("noise {s:?}: expected a number after ':'"));
    match kind {
        "none" => Ok(Noise::None),
        "bounded" => Ok(Noise::Bounded { radius: value()? }),
        "gaussian" => Ok(Noise::Gaussian { sigma: value()? }),
        _ => Err(format!("noise {s:?}: expected none, bounded:L or gaussian:SIGMA")),
    }
}

pub fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    match s {
        "homogeneous" => Ok(Profile::Homogeneous),
        "inhomogeneous" => Ok(Profile::Inhomogeneous),
        _ => match s.strip_prefix("r2g:") {
            Some(r) => r
                .parse()
                .map(|r_target| Profile::Custom { r_target, weights: None })
                .map_err(|_| format!("profile {s:?}: bad R value")),
            None => Err(format!("profile {s:?}: expected homogeneous, inhomogeneous or r2g:R")),
        },
    }
}

pub fn parse_branch(s: &str) -> std::result::Result<Branch, String> {
    Branch::from_str(s).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DesignSpec {
    Product,
    Equicorrelated { correlation: f64 },
    Duplicated { source: Vec<usize> },
}

pub fn parse_design(s: &str) -> std::result::Result<DesignSpec, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    match kind {
        "product" => Ok(DesignSpec::Product),
        "equicorrelated" => arg
            .parse()
            .map(|correlation| DesignSpec::Equicorrelated { correlation })
            .map_err(|_| format!("design {s:?}: bad correlation")),
        "duplicated" => arg
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(|source| DesignSpec::Duplicated { source })
            .map_err(|_| format!("design {s:?}: expected duplicated:i,j,...")),
        _ => Err(format!("design {s:?}: expected product, equicorrelated:R or duplicated:i,j,...")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(rename = "M")]
    pub blocks: usize,
    pub d: usize,
    pub q: f64,
    pub s: f64,
    #[serde(rename = "K")]
    pub truncation: usize,
    pub profile: Profile,
    pub support: Option<usize>,
    pub permute: bool,
    pub n: usize,
    pub noise: Noise,
    pub seed: Option<u64>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            blocks: 8,
            d: 2,
            q: 0.0,
            s: 0.5,
            truncation: DEFAULT_TRUNCATION,
            profile: Profile::Homogeneous,
            support: None,
            permute: false,
            n: 256,
            noise: Noise::Bounded { radius: 0.5 },
            seed: None,
        }
    }
}

/// How a fit picks its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub data: PathBuf,
    /// Generation sidecar; defaults to `<data stem>.meta.json` when present.
    pub meta: Option<PathBuf>,
    /// Theorem schedule; ignored when all three lambdas are given.
    pub branch: Option<Branch>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub t: f64,
    pub psi: f64,
    /// Kernel for every block; defaults to the truth's kernel.
    pub kernel: Option<KernelSpec>,
    pub options: FitOptions,
    pub seed: Option<u64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            data: PathBuf::new(),
            meta: None,
            branch: None,
            lambda1: None,
            lambda2: None,
            lambda3: None,
            t: 1.0,
            psi: 1.0,
            kernel: None,
            options: FitOptions::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub data: PathBuf,
    pub meta: Option<PathBuf>,
    /// `exact` or `subsampled`.
    pub mode: String,
    pub budget: usize,
    pub clip_bound: Option<f64>,
    pub margin: f64,
    pub kernel: Option<KernelSpec>,
    pub options: FitOptions,
    pub seed: Option<u64>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            data: PathBuf::new(),
            meta: None,
            mode: "subsampled".into(),
            budget: mklnet::selection::DEFAULT_BUDGET,
            clip_bound: None,
            margin: 0.1,
            kernel: None,
            options: FitOptions::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(rename = "M")]
    pub blocks: usize,
    pub index_set: Vec<usize>,
    pub design: DesignSpec,
    /// `analytic` or `mc`.
    pub method: String,
    pub s: f64,
    #[serde(rename = "K")]
    pub truncation: usize,
    pub k_trunc: usize,
    pub n_mc: usize,
    /// Truth sidecar for the theorem constants.
    pub meta: Option<PathBuf>,
    pub h: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            blocks: 8,
            index_set: vec![0, 1],
            design: DesignSpec::Product,
            method: "analytic".into(),
            s: 0.5,
            truncation: DEFAULT_TRUNCATION,
            k_trunc: mklnet::geometry::DEFAULT_K_TRUNC,
            n_mc: 100_000,
            meta: None,
            h: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub branch: Vec<Branch>,
    pub s: f64,
    pub q: f64,
    pub d: usize,
    #[serde(rename = "M")]
    pub blocks: usize,
    #[serde(rename = "K")]
    pub truncation: usize,
    pub profile: Profile,
    pub support: Option<usize>,
    pub n_grid: Vec<usize>,
    /// Non-empty switches to a d-sweep at the first `n_grid` entry.
    pub d_grid: Vec<usize>,
    pub seeds: usize,
    pub noise: Noise,
    pub t: f64,
    pub psi: f64,
    pub lambda_scale: f64,
    pub options: FitOptions,
    pub seed: Option<u64>,
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig {
            branch: vec![Branch::L1],
            s: 0.5,
            q: 0.0,
            d: 2,
            blocks: 8,
            truncation: DEFAULT_TRUNCATION,
            profile: Profile::Homogeneous,
            support: None,
            n_grid: vec![128, 256, 512, 1024, 2048],
            d_grid: Vec::new(),
            seeds: 20,
            noise: Noise::Bounded { radius: 0.5 },
            t: 1.0,
            psi: 1.0,
            lambda_scale: 1.0,
            options: FitOptions::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub data: PathBuf,
    pub meta: Option<PathBuf>,
    /// Model to diagnose; without one the data is fitted with `branch`.
    pub model: Option<PathBuf>,
    pub branch: Branch,
    pub t: f64,
    pub psi: f64,
    pub options: FitOptions,
    pub seed: Option<u64>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            data: PathBuf::new(),
            meta: None,
            model: None,
            branch: Branch::Elastic,
            t: 1.0,
            psi: 1.0,
            options: FitOptions::default(),
            seed: None,
        }
    }
}

/// `run.csv` → `run.meta.json`.
pub fn default_meta_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data.with_file_name(format!("{stem}.meta.json"))
}
