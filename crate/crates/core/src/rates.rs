//! Regularization schedules, theoretical rates and the empirical rate harness.
//!
//! The schedules follow the convergence theorem for the two branches:
//!
//! | branch  | `λ` | `λ3` |
//! |---------|-----|------|
//! | elastic | `d^{1/(1+q+s)} n^{-1/(1+q+s)} R_{2,g*}^{-2/(1+q+s)}` | `λ` |
//! | L1      | `d^{(1-s)/(1+s)} n^{-1/(1+s)} R_{1,f*}^{-2/(1+s)}` | `0` |
//!
//! with `λ1 = ψ_s η(t) ξ_n(λ)` and `λ2 = λ1 √λ` in both.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{exact_l2_error, make_truth, sample_dataset, Noise, TruthSpec};
use crate::error::{MklError, Result};
use crate::kernel::{AnyKernel, SpectralKernel};
use crate::solver::{fit_prepared, FitOptions, PreparedBlocks, RegParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    L1,
    Elastic,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::L1 => "l1",
            Branch::Elastic => "elastic",
        })
    }
}

impl FromStr for Branch {
    type Err = MklError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Branch::L1),
            "elastic" => Ok(Branch::Elastic),
            other => Err(MklError::input(format!("unknown branch {other:?} (expected l1 or elastic)"))),
        }
    }
}

/// `η(t) = max(1, √t, t/√n)`.
pub fn eta(t: f64, n: usize) -> f64 {
    1f64.max(t.sqrt()).max(t / (n as f64).sqrt())
}

/// `ξ_n(λ) = max(λ^{-s/2}/√n, λ^{-1/2}/n^{1/(1+s)}, √(log M / n))`.
pub fn xi(lambda: f64, n: usize, m: usize, s: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(MklError::input(format!("λ = {lambda} must be positive")));
    }
    let nf = n as f64;
    let a = lambda.powf(-s / 2.0) / nf.sqrt();
    let b = lambda.powf(-0.5) / nf.powf(1.0 / (1.0 + s));
    let c = ((m as f64).ln() / nf).sqrt();
    Ok(a.max(b).max(c))
}

/// Inputs of the theorem's schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub d: usize,
    pub s: f64,
    pub q: f64,
    /// `R_{2,g*}`, required by the elastic branch.
    pub r2g: Option<f64>,
    /// `R_{1,f*}`, required by the L1 branch.
    pub r1f: Option<f64>,
    pub t: f64,
    pub psi: f64,
}

impl ScheduleInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(MklError::input("n, M and d must be positive"));
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(MklError::input(format!("s = {} outside (0, 1)", self.s)));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(MklError::input(format!("q = {} outside [0, 1]", self.q)));
        }
        if !(self.t >= 1.0) {
            return Err(MklError::input(format!("t = {} must be at least 1", self.t)));
        }
        if !(self.psi > 0.0) {
            return Err(MklError::input("ψ_s must be positive"));
        }
        Ok(())
    }
}

/// Output of [`schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub branch: Branch,
    pub lambda: f64,
    pub eta: f64,
    pub xi: f64,
    pub params: RegParams,
}

pub fn schedule(inputs: &ScheduleInputs, branch: Branch) -> Result<Schedule> {
    inputs.validate()?;
    let (n, d, s, q) = (inputs.n as f64, inputs.d as f64, inputs.s, inputs.q);
    let positive = |r: Option<f64>, name: &str| match r {
        Some(v) if v > 0.0 && v.is_finite() => Ok(v),
        Some(v) => Err(MklError::input(format!("{name} = {v} must be positive"))),
        None => Err(MklError::input(format!("the {branch} schedule needs {name}"))),
    };
    let lambda = match branch {
        Branch::Elastic => {
            let r = positive(inputs.r2g, "R_{2,g*}")?;
            let e = 1.0 / (1.0 + q + s);
            d.powf(e) * n.powf(-e) * r.powf(-2.0 * e)
        }
        Branch::L1 => {
            let r = positive(inputs.r1f, "R_{1,f*}")?;
            d.powf((1.0 - s) / (1.0 + s)) * n.powf(-1.0 / (1.0 + s)) * r.powf(-2.0 / (1.0 + s))
        }
    };
    let eta = eta(inputs.t, inputs.n);
    let xi = xi(lambda, inputs.n, inputs.m, s)?;
    let lambda1 = inputs.psi * eta * xi;
    let lambda3 = match branch {
        Branch::Elastic => lambda,
        Branch::L1 => 0.0,
    };
    Ok(Schedule { branch, lambda, eta, xi, params: RegParams::new(lambda1, lambda1 * lambda.sqrt(), lambda3)? })
}

/// Exponent of `n` in the leading term of the simplified bound.
pub fn theoretical_exponent(s: f64, q: f64, branch: Branch) -> f64 {
    match branch {
        Branch::L1 => -1.0 / (1.0 + s),
        Branch::Elastic => -(1.0 + q) / (1.0 + q + s),
    }
}

/// Exponent of `d` in the same leading term.
pub fn d_exponent(s: f64, q: f64, branch: Branch) -> f64 {
    match branch {
        Branch::L1 => (1.0 - s) / (1.0 + s),
        Branch::Elastic => (1.0 + q) / (1.0 + q + s),
    }
}

/// `d^{(1−s)/(1+s)} n^{−1/(1+s)} R_{1,f*}^{2s/(1+s)}`.
pub fn l1_leading_term(d: f64, n: f64, s: f64, r1f: f64) -> f64 {
    d.powf((1.0 - s) / (1.0 + s)) * n.powf(-1.0 / (1.0 + s)) * r1f.powf(2.0 * s / (1.0 + s))
}

/// `d^{(1+q)/(1+q+s)} n^{−(1+q)/(1+q+s)} R_{2,g*}^{2s/(1+q+s)}`.
pub fn elastic_leading_term(d: f64, n: f64, s: f64, q: f64, r2g: f64) -> f64 {
    let e = (1.0 + q) / (1.0 + q + s);
    d.powf(e) * n.powf(-e) * r2g.powf(2.0 * s / (1.0 + q + s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub q: f64,
    pub l1_bound: f64,
    pub elastic_bound: f64,
    /// The elastic bound is strictly below the L1 bound.
    pub elastic_faster: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_elastic: Option<f64>,
}

/// Compares the two leading terms along `q_grid`. `r2g` is evaluated at each
/// `q` by `r2g(q)` so that callers can tie it to a family of truths.
pub fn phase_transition_scan(
    s: f64,
    d: usize,
    n: usize,
    r1f: f64,
    r2g: impl Fn(f64) -> f64,
    q_grid: &[f64],
) -> Result<Vec<PhaseRow>> {
    if !(s > 0.0 && s < 1.0) || d == 0 || n == 0 || !(r1f > 0.0) {
        return Err(MklError::input("phase scan needs s ∈ (0,1), d, n ≥ 1 and R_{1,f*} > 0"));
    }
    q_grid
        .iter()
        .map(|&q| {
            if !(0.0..=1.0).contains(&q) {
                return Err(MklError::input(format!("q = {q} outside [0, 1]")));
            }
            let l1 = l1_leading_term(d as f64, n as f64, s, r1f);
            let el = elastic_leading_term(d as f64, n as f64, s, q, r2g(q));
            Ok(PhaseRow { q, l1_bound: l1, elastic_bound: el, elastic_faster: el < l1, measured_l1: None, measured_elastic: None })
        })
        .collect()
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (NaN with two points).
    pub se: f64,
}

pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MklError::input("slope fit needs at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(MklError::input("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MklError::input("slope fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = if lx.len() > 2 { (rss / (k - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(SlopeFit { slope, intercept, se })
}

/// Side conditions of the theorem, evaluated with unknown constants set to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditions {
    /// `log(M)/√n`, must be at most 1.
    pub log_m_over_sqrt_n: f64,
    /// `(C̃1/β²) ψ_s √n ξ_n(λ)² d` with `C̃1 = 1`, must be at most 1.
    pub restricted_proxy: f64,
    pub satisfied: bool,
}

pub fn preconditions(inputs: &ScheduleInputs, sched: &Schedule, beta: f64) -> Preconditions {
    let nf = inputs.n as f64;
    let a = (inputs.m as f64).ln() / nf.sqrt();
    let b = inputs.psi * nf.sqrt() * sched.xi * sched.xi * inputs.d as f64 / (beta * beta);
    Preconditions { log_m_over_sqrt_n: a, restricted_proxy: b, satisfied: a <= 1.0 && b <= 1.0 }
}

/// One experiment of the rate harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Truth template; `d` is replaced along a d-sweep and `seed` per replicate.
    pub truth: TruthSpec,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub d_grid: Vec<usize>,
    pub seeds: usize,
    pub branches: Vec<Branch>,
    pub noise: Noise,
    #[serde(default = "one")]
    pub t: f64,
    #[serde(default = "one")]
    pub psi: f64,
    /// Multiplies every scheduled weight; 0 fits without regularization.
    #[serde(default = "one")]
    pub lambda_scale: f64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub fit: FitOptions,
}

fn one() -> f64 {
    1.0
}

/// Result of one `(n, d, replicate)` cell for one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub d: usize,
    pub replicate: usize,
    pub branch: Branch,
    pub error: f64,
    pub converged: bool,
    pub params: RegParams,
    pub preconditions: Preconditions,
}

/// Aggregate over replicates at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub d: usize,
    pub mean_err: f64,
    pub se: f64,
    pub count: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    N,
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub axis: Axis,
    pub branch: Branch,
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub slope_se: f64,
    pub theory_exponent: f64,
    pub warnings: Vec<String>,
    pub cells: Vec<Cell>,
}

/// Deterministic per-cell seed.
fn cell_seed(base: u64, replicate: usize, n: usize, d: usize) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [replicate as u64, n as u64, d as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
    h
}

fn run_cell(cfg: &SweepConfig, kernel: &AnyKernel, n: usize, d: usize, replicate: usize) -> Result<Vec<Cell>> {
    let mut spec = cfg.truth.clone();
    spec.d = d;
    spec.seed = cfg.base_seed.wrapping_add(replicate as u64).wrapping_mul(1_000_003).wrapping_add(d as u64);
    let truth = make_truth(&spec)?;
    let data = sample_dataset(&truth, n, cfg.noise, cell_seed(cfg.base_seed, replicate, n, d))?;
    let prep = PreparedBlocks::new(&data, &vec![kernel.clone(); spec.blocks])?;
    let s = truth.kernel().s();
    let mut out = Vec::new();
    for &branch in &cfg.branches {
        let inputs = ScheduleInputs {
            n,
            m: spec.blocks,
            d: d.max(1),
            s,
            q: spec.q,
            r2g: Some(truth.r_g(2.0).max(f64::MIN_POSITIVE)),
            r1f: Some(truth.r_f(1.0).max(f64::MIN_POSITIVE)),
            t: cfg.t,
            psi: cfg.psi,
        };
        let sched = schedule(&inputs, branch)?;
        let p = sched.params;
        let params = RegParams::new(p.lambda1 * cfg.lambda_scale, p.lambda2 * cfg.lambda_scale, p.lambda3 * cfg.lambda_scale)?;
        let model = fit_prepared(&prep, &data.y, &params, &cfg.fit, None)?;
        let error = exact_l2_error(&model.block_functions()?, &truth)?;
        out.push(Cell {
            n,
            d,
            replicate,
            branch,
            error,
            converged: model.converged,
            params,
            preconditions: preconditions(&inputs, &sched, 1.0),
        });
    }
    Ok(out)
}

fn run_cells(cfg: &SweepConfig, grid: &[(usize, usize)]) -> Result<Vec<Cell>> {
    if cfg.seeds == 0 || cfg.branches.is_empty() {
        return Err(MklError::input("need at least one seed and one branch"));
    }
    let kernel: AnyKernel = SpectralKernel::from_spec(&cfg.truth.kernel)?.into();
    let jobs: Vec<(usize, usize, usize)> =
        grid.iter().flat_map(|&(n, d)| (0..cfg.seeds).map(move |r| (n, d, r))).collect();
    let nested = jobs
        .par_iter()
        .map(|&(n, d, r)| run_cell(cfg, &kernel, n, d, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn aggregate(cells: &[Cell], branch: Branch, axis: Axis, theory: f64) -> Result<RateReport> {
    let mut keys: Vec<(usize, usize)> = cells.iter().filter(|c| c.branch == branch).map(|c| (c.n, c.d)).collect();
    keys.dedup();
    keys.sort_unstable();
    keys.dedup();
    let mut warnings = Vec::new();
    let mut points = Vec::new();
    for (n, d) in keys {
        let group: Vec<&Cell> = cells.iter().filter(|c| c.branch == branch && c.n == n && c.d == d).collect();
        let kept: Vec<f64> = group.iter().filter(|c| c.converged).map(|c| c.error).collect();
        let excluded = group.len() - kept.len();
        if excluded > 0 {
            warnings.push(format!("{branch}: {excluded} unconverged fit(s) at n = {n}, d = {d} excluded"));
        }
        let k = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / k;
        let var = if kept.len() > 1 { kept.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
        if group.iter().any(|c| !c.preconditions.satisfied) {
            warnings.push(format!("{branch}: theorem side conditions fail at n = {n}, d = {d}"));
        }
        points.push(RatePoint { n, d, mean_err: mean, se: (var / k).sqrt(), count: kept.len(), excluded });
    }
    let usable: Vec<&RatePoint> = points.iter().filter(|p| p.count > 0 && p.mean_err > 0.0).collect();
    let xs: Vec<f64> = usable.iter().map(|p| if axis == Axis::N { p.n as f64 } else { p.d as f64 }).collect();
    let ys: Vec<f64> = usable.iter().map(|p| p.mean_err).collect();
    let (slope, slope_se) = match fit_loglog(&xs, &ys) {
        Ok(f) => (f.slope, f.se),
        Err(e) => {
            warnings.push(format!("{branch}: no slope ({e})"));
            (f64::NAN, f64::NAN)
        }
    };
    warnings.dedup();
    Ok(RateReport {
        axis,
        branch,
        points,
        slope,
        slope_se,
        theory_exponent: theory,
        warnings,
        cells: cells.iter().filter(|c| c.branch == branch).copied().collect(),
    })
}

/// Error versus `n` at the template's `d`, one report per branch.
pub fn run_rate_sweep(cfg: &SweepConfig) -> Result<Vec<RateReport>> {
    let mut ns = cfg.n_grid.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 || ns[ns.len() - 1] < 16 * ns[0] {
        return Err(MklError::input("n grid needs at least 4 points spanning a 16× range"));
    }
    if cfg.seeds < 10 {
        return Err(MklError::input("rate sweeps need at least 10 seeds"));
    }
    let grid: Vec<(usize, usize)> = ns.iter().map(|&n| (n, cfg.truth.d)).collect();
    let cells = run_cells(cfg, &grid)?;
    let (s, q) = (cfg.truth.kernel.s, cfg.truth.q);
    cfg.branches.iter().map(|&b| aggregate(&cells, b, Axis::N, theoretical_exponent(s, q, b))).collect()
}

/// Error versus `d` at fixed `n` (the first entry of `n_grid`).
pub fn d_sweep(cfg: &SweepConfig) -> Result<Vec<RateReport>> {
    let n = *cfg.n_grid.first().ok_or_else(|| MklError::input("d-sweep needs n"))?;
    if cfg.d_grid.len() < 2 {
        return Err(MklError::input("d grid needs at least two values"));
    }
    if let Some(&d) = cfg.d_grid.iter().find(|&&d| d == 0 || 2 * d > cfg.truth.blocks) {
        return Err(MklError::input(format!("d = {d} outside 1..=M/2 (M = {})", cfg.truth.blocks)));
    }
    let grid: Vec<(usize, usize)> = cfg.d_grid.iter().map(|&d| (n, d)).collect();
    let cells = run_cells(cfg, &grid)?;
    let (s, q) = (cfg.truth.kernel.s, cfg.truth.q);
    cfg.branches.iter().map(|&b| aggregate(&cells, b, Axis::D, d_exponent(s, q, b))).collect()
}
