//! Dependency between blocks: `κ(I)`, `ρ(I)` and the resulting lower bound
//! `√((1 − ρ²) κ)` on the restricted eigenvalue, plus the theorem constants
//! and the support-recovery diagnostic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Design, GroundTruth};
use crate::error::{MklError, Result};
use crate::function::rkhs_norm;
use crate::kernel::SpectralKernel;
use crate::solver::MklModel;

pub const DEFAULT_K_TRUNC: usize = 32;
pub const MIN_MC_SAMPLES: usize = 10_000;
/// Ridge added to the Monte Carlo Gram before whitening.
pub const WHITENING_RIDGE: f64 = 1e-10;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryMethod {
    AnalyticProduct,
    SpectralMc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub index_set: Vec<usize>,
    pub kappa: f64,
    pub rho: f64,
    /// `√((1 − ρ²) κ)`: a lower bound on `β_∞(I)`, not the quantity itself.
    pub lemma1_bound: f64,
    pub method: GeometryMethod,
    pub mc_samples: Option<usize>,
    pub k_trunc: Option<usize>,
}

fn bound(kappa: f64, rho: f64) -> f64 {
    ((1.0 - rho * rho).max(0.0) * kappa.max(0.0)).sqrt()
}

fn check_index_set(index_set: &[usize], blocks: usize) -> Result<Vec<usize>> {
    let mut set = index_set.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return Err(MklError::input("index set is empty"));
    }
    if let Some(&m) = set.iter().find(|&&m| m >= blocks) {
        return Err(MklError::input(format!("block {m} outside 0..{blocks}")));
    }
    Ok(set)
}

/// Independent coordinates with mean-zero eigenfunctions are pairwise
/// orthogonal in `L2`, so `κ = 1` and `ρ = 0` for every `I`.
pub fn geometry_analytic_product(index_set: &[usize], design: &dyn Design) -> Result<GeometryReport> {
    if !design.is_product() {
        return Err(MklError::input("analytic geometry needs a product design; use the Monte Carlo estimate"));
    }
    let set = check_index_set(index_set, design.dim())?;
    Ok(GeometryReport {
        index_set: set,
        kappa: 1.0,
        rho: 0.0,
        lemma1_bound: 1.0,
        method: GeometryMethod::AnalyticProduct,
        mc_samples: None,
        k_trunc: None,
    })
}

/// Monte Carlo `E[ψ ψᵀ]` for the stacked leading eigenfunctions of every
/// block. Chunks are seeded independently and summed in order.
pub fn monte_carlo_gram(
    kernels: &[SpectralKernel],
    design: &dyn Design,
    k_trunc: usize,
    samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if kernels.len() != design.dim() {
        return Err(MklError::input(format!("{} kernels for a {}-dimensional design", kernels.len(), design.dim())));
    }
    let widths: Vec<usize> = kernels.iter().map(|k| k_trunc.min(k.truncation())).collect();
    let total: usize = widths.iter().sum();
    let chunks = samples.div_ceil(CHUNK);
    let partials: Vec<DMatrix<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK.min(samples - c * CHUNK);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let mut feats = DMatrix::zeros(rows, total);
            let mut x = vec![0.0; design.dim()];
            let mut buf = vec![0.0; k_trunc];
            for i in 0..rows {
                design.sample_row(&mut rng, &mut x);
                let mut col = 0;
                for (m, k) in kernels.iter().enumerate() {
                    k.basis_values_into(x[m], &mut buf[..widths[m]]);
                    for &v in &buf[..widths[m]] {
                        feats[(i, col)] = v;
                        col += 1;
                    }
                }
            }
            feats.tr_mul(&feats)
        })
        .collect();
    let mut gram = DMatrix::zeros(total, total);
    for p in partials {
        gram += p;
    }
    Ok(gram / samples as f64)
}

/// Index ranges of each block's features inside the stacked Gram.
fn offsets(kernels: &[SpectralKernel], k_trunc: usize) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    kernels
        .iter()
        .map(|k| {
            let w = k_trunc.min(k.truncation());
            let r = start..start + w;
            start += w;
            r
        })
        .collect()
}

fn submatrix(g: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
}

/// Orthonormalizing map of the span of a Gram (columns `v/√λ` over the
/// numerically nonzero eigenvalues).
fn range_basis(g: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(g.clone());
    let top = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..e.eigenvalues.len()).filter(|&i| e.eigenvalues[i] > WHITENING_RIDGE * top.max(1.0)).collect();
    DMatrix::from_fn(g.nrows(), keep.len(), |r, c| {
        let i = keep[c];
        e.eigenvectors[(r, i)] / (e.eigenvalues[i] + WHITENING_RIDGE).sqrt()
    })
}

/// `κ(I)` and `ρ(I)` from a stacked basis Gram.
pub fn geometry_from_gram(
    gram: &DMatrix<f64>,
    ranges: &[std::ops::Range<usize>],
    index_set: &[usize],
) -> Result<(f64, f64)> {
    let set = check_index_set(index_set, ranges.len())?;
    // per-block whitening makes Σ_{m∈I} ‖f_m‖² the identity form
    let mut inside: Vec<usize> = Vec::new();
    let mut whiteners: Vec<DMatrix<f64>> = Vec::new();
    for &m in &set {
        let idx: Vec<usize> = ranges[m].clone().collect();
        let g = submatrix(gram, &idx, &idx);
        let e = SymmetricEigen::new(g.clone());
        let min = e.eigenvalues.min();
        if min < WHITENING_RIDGE {
            let rank = e.eigenvalues.iter().filter(|&&v| v >= WHITENING_RIDGE).count();
            return Err(MklError::numeric(format!(
                "basis Gram of block {m} is singular: rank {rank} of {} (smallest eigenvalue {min:.3e})",
                idx.len()
            )));
        }
        let w = &e.eigenvectors
            * DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / (v + WHITENING_RIDGE).sqrt()))
            * e.eigenvectors.transpose();
        whiteners.push(w);
        inside.extend(idx);
    }
    let dim = inside.len();
    let mut w = DMatrix::zeros(dim, dim);
    let mut at = 0;
    for wm in &whiteners {
        w.view_mut((at, at), wm.shape()).copy_from(wm);
        at += wm.nrows();
    }
    let g_ii = submatrix(gram, &inside, &inside);
    let normalized = &w * &g_ii * &w;
    let kappa = SymmetricEigen::new((&normalized + normalized.transpose()) * 0.5).eigenvalues.min();

    let outside: Vec<usize> = (0..ranges.len()).filter(|m| !set.contains(m)).flat_map(|m| ranges[m].clone()).collect();
    let rho = if outside.is_empty() {
        0.0
    } else {
        let qi = range_basis(&g_ii);
        let qo = range_basis(&submatrix(gram, &outside, &outside));
        let cross = qi.transpose() * submatrix(gram, &inside, &outside) * qo;
        cross.singular_values().max().min(1.0)
    };
    Ok((kappa, rho))
}

/// Estimates the geometry from the top `k_trunc` eigenfunctions of each block
/// under `design`.
pub fn geometry_spectral_mc(
    kernels: &[SpectralKernel],
    index_set: &[usize],
    design: &dyn Design,
    k_trunc: usize,
    samples: usize,
    seed: u64,
) -> Result<GeometryReport> {
    if k_trunc == 0 {
        return Err(MklError::input("K_trunc must be at least 1"));
    }
    if samples < MIN_MC_SAMPLES {
        return Err(MklError::input(format!("{samples} Monte Carlo samples; at least {MIN_MC_SAMPLES} needed")));
    }
    let set = check_index_set(index_set, kernels.len())?;
    let gram = monte_carlo_gram(kernels, design, k_trunc, samples, seed)?;
    let (kappa, rho) = geometry_from_gram(&gram, &offsets(kernels, k_trunc), &set)?;
    Ok(GeometryReport {
        index_set: set,
        kappa,
        rho,
        lemma1_bound: bound(kappa, rho),
        method: GeometryMethod::SpectralMc,
        mc_samples: Some(samples),
        k_trunc: Some(k_trunc),
    })
}

/// Monte Carlo check of `‖f‖² ≥ b² Σ_{m∈I} ‖f_m‖²` for `f` given by basis
/// coefficients per block. Returns the mean and standard error of
/// `f(x)² − b² Σ_{m∈I} f_m(x)²`; the inequality holds within tolerance when
/// `mean ≥ −3·se`.
pub fn lemma1_margin(
    kernels: &[SpectralKernel],
    coeffs: &[Vec<f64>],
    report: &GeometryReport,
    design: &dyn Design,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if coeffs.len() != kernels.len() || kernels.len() != design.dim() || samples < 2 {
        return Err(MklError::input("one coefficient vector per block and at least two samples"));
    }
    let b2 = report.lemma1_bound.powi(2);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = vec![0.0; design.dim()];
    let mut vals = vec![0.0; kernels.len()];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        design.sample_row(&mut rng, &mut x);
        for (m, (k, c)) in kernels.iter().zip(coeffs).enumerate() {
            vals[m] = c.iter().enumerate().map(|(j, a)| a * k.basis().eval(j + 1, x[m])).sum();
        }
        let total: f64 = vals.iter().sum();
        let inside: f64 = report.index_set.iter().map(|&m| vals[m] * vals[m]).sum();
        let v = total * total - b2 * inside;
        s1 += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub b1: f64,
    pub b2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_r2g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
}

/// `b̃1`, `b̃2` and, given one `h_m` per active block (in active order),
/// `ĥR_{2,g*}` and `b̃3`.
pub fn theorem_constants(truth: &GroundTruth, h: Option<&[f64]>) -> Result<TheoremConstants> {
    let d = truth.d();
    if d == 0 {
        return Err(MklError::input("theorem constants need d ≥ 1"));
    }
    let norms = truth.g_norms();
    let active: Vec<f64> = truth.active().iter().map(|&m| norms[m]).collect();
    let r2 = truth.r_g(2.0);
    if !(r2 > 0.0) {
        return Err(MklError::input("R_{2,g*} is zero"));
    }
    let sd = (d as f64).sqrt();
    let max_g = active.iter().cloned().fold(0.0, f64::max);
    let b1 = 16.0 * (1.0 + sd * max_g / r2);
    let (b3, h_r2g, h) = match h {
        None => (None, None, None),
        Some(h) => {
            if h.len() != d {
                return Err(MklError::input(format!("{} h values for d = {d}", h.len())));
            }
            if let Some(v) = h.iter().find(|v| !(**v > 0.0)) {
                return Err(MklError::input(format!("h = {v} must be positive")));
            }
            let hr = active.iter().zip(h).map(|(g, hm)| g * g / hm).sum::<f64>().sqrt();
            let ratio = active.iter().zip(h).map(|(g, hm)| g / hm).fold(0.0, f64::max);
            (Some(32.0 * (1.0 + sd * ratio / hr)), Some(hr), Some(h.to_vec()))
        }
    };
    Ok(TheoremConstants { b1, b2: 16.0, b3, h_r2g, h })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub block: usize,
    pub fitted_norm: f64,
    /// `‖f*_m‖_H / 2`.
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rows: Vec<DiagnosticRow>,
    pub pass_rate: f64,
}

/// Whether each truly active block is fitted with at least half its true norm.
pub fn lemma2_diagnostic(model: &MklModel, truth: &GroundTruth) -> Result<DiagnosticsReport> {
    if model.blocks() != truth.blocks() {
        return Err(MklError::input("model and truth have different block counts"));
    }
    let true_norms = truth.f_norms();
    let rows = truth
        .active()
        .iter()
        .map(|&m| {
            let fitted = if model.is_active(m) { rkhs_norm(&model.block_function(m)?)? } else { 0.0 };
            let threshold = true_norms[m] / 2.0;
            Ok(DiagnosticRow { block: m, fitted_norm: fitted, threshold, pass: fitted >= threshold })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass_rate = if rows.is_empty() { 1.0 } else { rows.iter().filter(|r| r.pass).count() as f64 / rows.len() as f64 };
    Ok(DiagnosticsReport { rows, pass_rate })
}

/// Dense vector helper for callers assembling random block coefficients.
pub fn stack(coeffs: &[Vec<f64>]) -> DVector<f64> {
    DVector::from_iterator(coeffs.iter().map(Vec::len).sum(), coeffs.iter().flatten().copied())
}
