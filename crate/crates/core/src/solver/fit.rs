use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::block::{block_objective, solve_block_whitened, stationarity, zero_test};
use super::{FitOptions, MklModel, RegParams};
use crate::data::Dataset;
use crate::error::{MklError, Result};
use crate::kernel::{eigensystem, factored_eigensystem, gram, AnyKernel, Kernel};

/// Eigensystem of one block's Gram matrix over fixed anchors.
#[derive(Debug, Clone)]
pub struct PreparedBlock {
    pub kernel: AnyKernel,
    /// `n × r`, orthonormal columns spanning the positive eigenspace.
    pub u: DMatrix<f64>,
    /// The `r` positive eigenvalues, descending.
    pub d: DVector<f64>,
    /// For spectral kernels, `V` with `Z = U D^{1/2} Vᵀ` where
    /// `Z_ik = √μ_k φ_k(x_i)`; eigen-coefficients are then `Λ^{1/2} V β`.
    pub right: Option<DMatrix<f64>>,
    sqrt_d: DVector<f64>,
}

impl PreparedBlock {
    pub fn new(kernel: &AnyKernel, anchors: &[f64]) -> Result<Self> {
        let (u, d, right) = match kernel.spectral() {
            Some(k) => {
                let f = factored_eigensystem(&k.feature_matrix(anchors)?)?;
                (f.system.vectors, f.system.values, Some(f.right))
            }
            None => {
                let e = eigensystem(&gram(kernel, anchors)?)?;
                (e.vectors, e.values, None)
            }
        };
        let sqrt_d = d.map(f64::sqrt);
        Ok(PreparedBlock { kernel: kernel.clone(), u, d, right, sqrt_d })
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// Fitted values `U D^{1/2} β` at the anchors.
    fn values(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.u * beta.component_mul(&self.sqrt_d)
    }

    fn alpha(&self, beta: &DVector<f64>) -> Vec<f64> {
        (&self.u * beta.component_div(&self.sqrt_d)).iter().copied().collect()
    }

    fn coeffs(&self, beta: &DVector<f64>) -> Option<Vec<f64>> {
        let (k, v) = (self.kernel.spectral()?, self.right.as_ref()?);
        let vb = v * beta;
        Some(vb.iter().zip(k.eigenvalues()).map(|(x, mu)| x * mu.sqrt()).collect())
    }

    fn whiten(&self, alpha: &[f64]) -> DVector<f64> {
        self.u.tr_mul(&DVector::from_column_slice(alpha)).component_mul(&self.sqrt_d)
    }
}

/// Per-block eigensystems for one design, reusable across parameter values.
#[derive(Debug, Clone)]
pub struct PreparedBlocks {
    pub blocks: Vec<PreparedBlock>,
    pub anchors: DMatrix<f64>,
}

impl PreparedBlocks {
    pub fn new(data: &Dataset, kernels: &[AnyKernel]) -> Result<Self> {
        if kernels.len() != data.blocks() {
            return Err(MklError::input(format!(
                "{} kernels for {} design columns",
                kernels.len(),
                data.blocks()
            )));
        }
        let blocks = (0..data.blocks())
            .into_par_iter()
            .map(|m| PreparedBlock::new(&kernels[m], &data.column(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedBlocks { blocks, anchors: data.x.clone() })
    }

    pub fn n(&self) -> usize {
        self.anchors.nrows()
    }
}

/// Fits the estimator on `data` with one kernel per design column.
pub fn fit(
    data: &Dataset,
    kernels: &[AnyKernel],
    params: &RegParams,
    opts: &FitOptions,
    warm_start: Option<&MklModel>,
) -> Result<MklModel> {
    let prep = PreparedBlocks::new(data, kernels)?;
    fit_prepared(&prep, &data.y, params, opts, warm_start)
}

/// [`fit`] with `λ3 = 0`.
pub fn l1_fit(
    data: &Dataset,
    kernels: &[AnyKernel],
    lambda1: f64,
    lambda2: f64,
    opts: &FitOptions,
) -> Result<MklModel> {
    fit(data, kernels, &RegParams::l1(lambda1, lambda2)?, opts, None)
}

struct State<'a> {
    prep: &'a PreparedBlocks,
    y: &'a DVector<f64>,
    params: &'a RegParams,
    opts: &'a FitOptions,
    beta: Vec<DVector<f64>>,
    values: Vec<DVector<f64>>,
}

impl State<'_> {
    fn nf(&self) -> f64 {
        self.prep.n() as f64
    }

    fn residual(&self) -> DVector<f64> {
        let mut r = self.y.clone();
        for v in &self.values {
            r -= v;
        }
        r
    }

    fn objective(&self, resid: &DVector<f64>) -> f64 {
        let nf = self.nf();
        let p = self.params;
        let penalty: f64 = self
            .beta
            .iter()
            .zip(&self.prep.blocks)
            .map(|(b, blk)| {
                let h_sq = b.norm_squared();
                let n_sq = b.component_mul(&blk.sqrt_d).norm_squared() / nf;
                p.lambda1 * n_sq.sqrt() + p.lambda2 * h_sq.sqrt() + p.lambda3 * h_sq
            })
            .sum();
        resid.norm_squared() / nf + penalty
    }

    /// One block update against the current residual (updated in place).
    fn update(&mut self, m: usize, resid: &mut DVector<f64>) -> Result<()> {
        let blk = &self.prep.blocks[m];
        let n = self.prep.n();
        *resid += &self.values[m];
        let z = blk.u.tr_mul(resid);
        let g: Vec<f64> = (0..z.len()).map(|i| -2.0 / self.nf() * blk.sqrt_d[i] * z[i]).collect();
        let p = self.params;
        let d = blk.d.as_slice();
        // a bracketing failure is reported by treating the block as nonzero
        let is_zero = zero_test(&g, d, p.lambda1, p.lambda2, n, self.opts.bisection_tol)
            .map(|t| t.is_zero)
            .unwrap_or(false);
        let new = if is_zero {
            DVector::zeros(z.len())
        } else {
            let sol = solve_block_whitened(&z, &blk.d, p, n, self.opts)
                .map_err(|e| MklError::numeric(format!("block {m}: {e}")))?;
            let old = &self.beta[m];
            // never accept an increase; ties go to the sparser candidate
            let (f_new, f_old) = (block_objective(&sol.beta, &z, &blk.d, p, n), block_objective(old, &z, &blk.d, p, n));
            if f_new.min(f_old) >= 0.0 || sol.underflow {
                DVector::zeros(z.len())
            } else if f_new <= f_old {
                sol.beta
            } else {
                old.clone()
            }
        };
        self.values[m] = blk.values(&new);
        self.beta[m] = new;
        *resid -= &self.values[m];
        Ok(())
    }

    /// Max over blocks of the zero-test violation or stationarity residual,
    /// against a freshly computed residual.
    fn kkt(&self) -> f64 {
        let resid = self.residual();
        let p = self.params;
        let n = self.prep.n();
        let mut worst = 0.0f64;
        for (m, blk) in self.prep.blocks.iter().enumerate() {
            let partial = &resid + &self.values[m];
            let z = blk.u.tr_mul(&partial);
            let v = if self.beta[m].iter().all(|&b| b == 0.0) {
                let g: Vec<f64> = (0..z.len()).map(|i| -2.0 / self.nf() * blk.sqrt_d[i] * z[i]).collect();
                match zero_test(&g, blk.d.as_slice(), p.lambda1, p.lambda2, n, self.opts.bisection_tol) {
                    Ok(t) => (-t.slack(p.lambda2)).max(0.0),
                    Err(_) => f64::INFINITY,
                }
            } else {
                stationarity(&self.beta[m], &z, &blk.d, p, n)
            };
            worst = worst.max(v);
        }
        worst
    }
}

/// Cyclic block coordinate descent on prepared blocks.
///
/// Stops once a sweep decreases the objective by at most `opts.tol`
/// (relative) and the KKT residual is within `opts.kkt_tol`; otherwise
/// returns after `opts.max_sweeps` with `converged = false`.
pub fn fit_prepared(
    prep: &PreparedBlocks,
    y: &DVector<f64>,
    params: &RegParams,
    opts: &FitOptions,
    warm_start: Option<&MklModel>,
) -> Result<MklModel> {
    params.validate()?;
    opts.validate()?;
    let n = prep.n();
    if y.len() != n {
        return Err(MklError::input(format!("{} responses for {n} anchors", y.len())));
    }
    let mut beta: Vec<DVector<f64>> = prep.blocks.iter().map(|b| DVector::zeros(b.rank())).collect();
    if let Some(w) = warm_start {
        if w.alpha.len() != prep.blocks.len() || w.alpha.iter().any(|a| a.len() != n) {
            return Err(MklError::input("warm start does not match the prepared blocks"));
        }
        for (m, blk) in prep.blocks.iter().enumerate() {
            beta[m] = blk.whiten(&w.alpha[m]);
        }
    }
    let values = beta.iter().zip(&prep.blocks).map(|(b, blk)| blk.values(b)).collect();
    let mut state = State { prep, y, params, opts, beta, values };

    let mut resid = state.residual();
    let mut trace = vec![state.objective(&resid)];
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for m in 0..prep.blocks.len() {
            state.update(m, &mut resid)?;
        }
        let prev = *trace.last().expect("trace starts nonempty");
        let obj = state.objective(&resid);
        if !obj.is_finite() {
            return Err(MklError::numeric(format!("objective became non-finite at sweep {sweeps}")));
        }
        trace.push(obj);
        if prev - obj <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
            // drift control: re-anchor the residual before certifying
            resid = state.residual();
            kkt = state.kkt();
            if kkt <= opts.kkt_tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        kkt = state.kkt();
    }
    let objective = state.objective(&state.residual());
    if let Some(last) = trace.last_mut() {
        *last = objective;
    }

    let blocks = &prep.blocks;
    let active: Vec<usize> = (0..blocks.len()).filter(|&m| state.beta[m].iter().any(|&b| b != 0.0)).collect();
    Ok(MklModel {
        params: *params,
        kernels: blocks.iter().map(|b| b.kernel.clone()).collect(),
        alpha: state.beta.iter().zip(blocks).map(|(b, blk)| blk.alpha(b)).collect(),
        coeffs: state.beta.iter().zip(blocks).map(|(b, blk)| blk.coeffs(b)).collect(),
        active,
        objective,
        objective_trace: trace,
        kkt_residual: kkt,
        converged,
        sweeps,
        anchors: Some(prep.anchors.clone()),
    })
}
