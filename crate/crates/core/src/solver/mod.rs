//! Elastic-net MKL by cyclic block coordinate descent.
//!
//! Each block is handled in the whitened coordinates of its Gram
//! eigensystem (see [`block`]): an exact zero test first, then the
//! two-scalar fixed point for a nonzero block. Setting `λ3 = 0` gives L1-MKL.

pub mod block;
mod fit;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MklError, Result};
use crate::function::{BlockFunction, KernelExpansion, SpectralFunction};
use crate::kernel::{gram, AnyKernel, Kernel};

pub use block::{block_zero_test, solve_block, solve_block_whitened, zero_test, BlockSolution, ZeroTest};
pub use fit::{fit, fit_prepared, l1_fit, PreparedBlock, PreparedBlocks};

/// Regularization weights on `‖f_m‖_n`, `‖f_m‖_H` and `‖f_m‖²_H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl RegParams {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let p = RegParams { lambda1, lambda2, lambda3 };
        p.validate()?;
        Ok(p)
    }

    pub fn l1(lambda1: f64, lambda2: f64) -> Result<Self> {
        Self::new(lambda1, lambda2, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MklError::input(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Without `λ1` or `λ2` nothing forces blocks to exactly zero.
    pub fn is_sparsity_inducing(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

/// Stopping rules for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative objective decrease over a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Block stationarity residual.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Relative bracket width of the zero-test bisection.
    pub bisection_tol: f64,
    /// KKT residual required before declaring convergence.
    pub kkt_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tol: 1e-8, max_sweeps: 500, inner_tol: 1e-10, max_inner: 10_000, bisection_tol: 1e-12, kkt_tol: 1e-6 }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.tol, self.inner_tol, self.bisection_tol, self.kkt_tol].iter().all(|v| *v > 0.0)
            && self.max_sweeps > 0
            && self.max_inner > 0;
        if ok {
            Ok(())
        } else {
            Err(MklError::input("fit options need positive tolerances and iteration limits"))
        }
    }
}

/// Fitted additive model `f̂ = Σ_m Σ_i α_{m,i} k_m(·, x_i^{(m)})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MklModel {
    pub params: RegParams,
    pub kernels: Vec<AnyKernel>,
    /// Per-block representer coefficients over the training anchors.
    pub alpha: Vec<Vec<f64>>,
    /// Per-block eigen-coefficients, present when the block kernel is spectral.
    pub coeffs: Vec<Option<Vec<f64>>>,
    pub active: Vec<usize>,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Training anchors, one column per block; not serialized (the model
    /// file refers to its dataset instead).
    #[serde(skip)]
    pub anchors: Option<DMatrix<f64>>,
}

impl MklModel {
    pub fn blocks(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_active(&self, m: usize) -> bool {
        self.active.binary_search(&m).is_ok()
    }

    /// Restores the anchors after deserialization.
    pub fn attach_anchors(&mut self, data: &Dataset) -> Result<()> {
        if data.blocks() != self.blocks() || self.alpha.first().is_some_and(|a| a.len() != data.n()) {
            return Err(MklError::input("dataset shape does not match the model"));
        }
        self.anchors = Some(data.x.clone());
        Ok(())
    }

    /// Block `m` as a function, spectral when possible.
    pub fn block_function(&self, m: usize) -> Result<BlockFunction> {
        if let (Some(c), Some(k)) = (&self.coeffs[m], self.kernels[m].spectral()) {
            return Ok(BlockFunction::spectral(m, SpectralFunction::new(k, c.clone())));
        }
        let anchors = self
            .anchors
            .as_ref()
            .ok_or_else(|| MklError::input("model has no anchors attached"))?;
        let e = KernelExpansion::new(
            self.kernels[m].clone(),
            anchors.column(m).iter().copied().collect(),
            self.alpha[m].clone(),
        )?;
        Ok(BlockFunction::expansion(m, e))
    }

    pub fn block_functions(&self) -> Result<Vec<BlockFunction>> {
        (0..self.blocks()).map(|m| self.block_function(m)).collect()
    }

    /// `f̂(x)` at each row of `x` (`rows × M`).
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.blocks() {
            return Err(MklError::input(format!("{} columns for a {}-block model", x.ncols(), self.blocks())));
        }
        let mut out = DVector::zeros(x.nrows());
        for &m in &self.active {
            let f = self.block_function(m)?;
            for i in 0..x.nrows() {
                out[i] += f.eval(x[(i, m)]);
            }
        }
        Ok(out)
    }
}

/// Objective of the estimator at `model` on `data`.
///
/// Blocks with eigen-coefficients are evaluated through them (numerically
/// stable); other blocks go through their Gram matrix and `α`.
pub fn objective(model: &MklModel, data: &Dataset, params: &RegParams) -> Result<f64> {
    check_shapes(&model.alpha, data, &model.kernels)?;
    let n = data.n();
    let nf = n as f64;
    let mut fitted = DVector::zeros(n);
    let mut penalty = 0.0;
    for m in 0..model.blocks() {
        let (values, h_sq) = match (&model.coeffs[m], model.kernels[m].spectral()) {
            (Some(c), Some(k)) => {
                let f = SpectralFunction::new(k, c.clone());
                let values = DVector::from_iterator(n, data.x.column(m).iter().map(|&x| f.eval(x)));
                let h_sq: f64 = c.iter().zip(k.eigenvalues()).map(|(b, mu)| b * b / mu).sum();
                (values, h_sq)
            }
            _ => {
                let g = gram(&model.kernels[m], &data.column(m))?;
                let a = DVector::from_column_slice(&model.alpha[m]);
                let values = g.entries() * &a;
                (values.clone(), a.dot(&values).max(0.0))
            }
        };
        penalty += params.lambda1 * (values.norm_squared() / nf).sqrt()
            + params.lambda2 * h_sq.sqrt()
            + params.lambda3 * h_sq;
        fitted += values;
    }
    let loss = (&data.y - fitted).norm_squared() / nf;
    let total = loss + penalty;
    if !total.is_finite() {
        return Err(MklError::numeric("objective is not finite"));
    }
    Ok(total)
}

/// Objective for explicit coefficient vectors, straight from the Gram form
/// `(1/n)‖y − Σ K_m α_m‖² + Σ λ1√(α_mᵀK_m²α_m/n) + λ2√(α_mᵀK_mα_m) + λ3 α_mᵀK_mα_m`.
pub fn objective_from_alpha(
    alpha: &[Vec<f64>],
    data: &Dataset,
    kernels: &[AnyKernel],
    params: &RegParams,
) -> Result<f64> {
    check_shapes(alpha, data, kernels)?;
    let nf = data.n() as f64;
    let mut fitted = DVector::zeros(data.n());
    let mut penalty = 0.0;
    for (m, a) in alpha.iter().enumerate() {
        let g = gram(&kernels[m], &data.column(m))?;
        let a = DVector::from_column_slice(a);
        let ka = g.entries() * &a;
        let h_sq = a.dot(&ka).max(0.0);
        penalty += params.lambda1 * (ka.norm_squared() / nf).sqrt()
            + params.lambda2 * h_sq.sqrt()
            + params.lambda3 * h_sq;
        fitted += ka;
    }
    Ok((&data.y - fitted).norm_squared() / nf + penalty)
}

fn check_shapes(alpha: &[Vec<f64>], data: &Dataset, kernels: &[AnyKernel]) -> Result<()> {
    if alpha.len() != data.blocks() || kernels.len() != data.blocks() {
        return Err(MklError::input(format!(
            "{} coefficient blocks and {} kernels for {} design columns",
            alpha.len(),
            kernels.len(),
            data.blocks()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| a.len() != data.n()) {
        return Err(MklError::input(format!("coefficient vector of length {} for n = {}", a.len(), data.n())));
    }
    Ok(())
}
