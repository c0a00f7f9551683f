//! Functions in the block RKHSs and the norms used throughout the crate.
//!
//! A [`SpectralFunction`] stores coordinates `b_k` in the kernel's eigenbasis,
//! so every norm is a closed-form sum:
//!
//! | norm | formula |
//! |------|---------|
//! | `L2(Q)` | `√Σ b_k²` |
//! | RKHS | `√Σ μ_k^{-1} b_k²` |
//! | interpolation space `H_β` | `√Σ μ_k^{-β} b_k²` |
//!
//! A [`KernelExpansion`] is the representer form `f = Σ_i α_i k(·, x_i)`
//! produced by the solver. It converts to spectral form through
//! `b_k = μ_k Σ_i α_i φ_k(x_i)`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::kernel::{check_unit_interval, gram, AnyKernel, Kernel, KernelSpec, SpectralKernel};

/// Smallest grid accepted by [`sup_norm_estimate`].
pub const MIN_SUP_GRID: usize = 1000;

/// Function `Σ_k b_k φ_k` in the eigenbasis of a spectral kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFunction {
    kernel: SpectralKernel,
    coeffs: Vec<f64>,
}

impl SpectralFunction {
    /// Coefficients shorter than the truncation are zero-padded. Longer
    /// vectors are kept: such a function lives in `L2(Q)` but has no finite
    /// RKHS norm unless the extra coefficients vanish.
    pub fn new(kernel: &SpectralKernel, mut coeffs: Vec<f64>) -> Self {
        if coeffs.len() < kernel.truncation() {
            coeffs.resize(kernel.truncation(), 0.0);
        }
        SpectralFunction { kernel: kernel.clone(), coeffs }
    }

    pub fn zero(kernel: &SpectralKernel) -> Self {
        SpectralFunction::new(kernel, Vec::new())
    }

    /// Unit coefficient on `φ_k` (`k ≥ 1`).
    pub fn basis(kernel: &SpectralKernel, k: usize) -> Self {
        let mut c = vec![0.0; kernel.truncation().max(k)];
        c[k - 1] = 1.0;
        SpectralFunction::new(kernel, c)
    }

    pub fn kernel(&self) -> &SpectralKernel {
        &self.kernel
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, x: f64) -> f64 {
        let basis = self.kernel.basis();
        self.coeffs.iter().enumerate().map(|(j, b)| b * basis.eval(j + 1, x)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&b| b == 0.0)
    }

    fn check_support(&self) -> Result<()> {
        let k = self.kernel.truncation();
        if let Some(j) = self.coeffs[k..].iter().position(|&b| b != 0.0) {
            return Err(MklError::Representation(format!(
                "coefficient on φ_{} lies beyond the truncation K = {k}; the norm diverges",
                k + j + 1
            )));
        }
        Ok(())
    }

    /// `Σ_k b_k² w_k` over the retained eigenpairs.
    fn weighted_sq(&self, weight: impl Fn(f64) -> f64) -> f64 {
        self.kernel.eigenvalues().iter().zip(&self.coeffs).map(|(&mu, &b)| weight(mu) * b * b).sum()
    }

    /// Pointwise difference `self − other` over the same kernel.
    pub fn sub(&self, other: &SpectralFunction) -> Result<SpectralFunction> {
        if self.kernel != other.kernel {
            return Err(MklError::input("spectral functions use different kernels"));
        }
        let len = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (0..len)
            .map(|j| {
                self.coeffs.get(j).copied().unwrap_or(0.0) - other.coeffs.get(j).copied().unwrap_or(0.0)
            })
            .collect();
        Ok(SpectralFunction::new(&self.kernel, coeffs))
    }

    pub fn scaled(&self, factor: f64) -> SpectralFunction {
        SpectralFunction {
            kernel: self.kernel.clone(),
            coeffs: self.coeffs.iter().map(|b| b * factor).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SpectralFunctionFile {
    kernel: KernelSpec,
    coeffs: Vec<f64>,
}

impl Serialize for SpectralFunction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SpectralFunctionFile { kernel: self.kernel.spec(), coeffs: self.coeffs.clone() }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SpectralFunction {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = SpectralFunctionFile::deserialize(deserializer)?;
        let kernel = SpectralKernel::from_spec(&file.kernel).map_err(serde::de::Error::custom)?;
        Ok(SpectralFunction::new(&kernel, file.coeffs))
    }
}

/// Representer form `f = Σ_i α_i k(·, x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelExpansion {
    kernel: AnyKernel,
    anchors: Vec<f64>,
    alpha: Vec<f64>,
}

impl KernelExpansion {
    pub fn new(kernel: AnyKernel, anchors: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if anchors.len() != alpha.len() {
            return Err(MklError::input(format!(
                "{} anchors but {} coefficients",
                anchors.len(),
                alpha.len()
            )));
        }
        for &x in &anchors {
            check_unit_interval(x)?;
        }
        Ok(KernelExpansion { kernel, anchors, alpha })
    }

    pub fn kernel(&self) -> &AnyKernel {
        &self.kernel
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.anchors.iter().zip(&self.alpha).map(|(&a, &c)| c * self.kernel.eval_unchecked(x, a)).sum()
    }

    /// `√(αᵀ K α)`.
    pub fn rkhs_norm(&self) -> Result<f64> {
        if self.anchors.is_empty() {
            return Ok(0.0);
        }
        let g = gram(&self.kernel, &self.anchors)?;
        let a = DVector::from_column_slice(&self.alpha);
        Ok(a.dot(&(g.entries() * &a)).max(0.0).sqrt())
    }

    /// `√(αᵀ K² α / n)`: the empirical norm on the expansion's own anchors.
    pub fn anchor_empirical_norm(&self) -> Result<f64> {
        if self.anchors.is_empty() {
            return Err(MklError::input("expansion has no anchors"));
        }
        let g = gram(&self.kernel, &self.anchors)?;
        let a = DVector::from_column_slice(&self.alpha);
        let ka = g.entries() * &a;
        Ok((ka.norm_squared() / self.anchors.len() as f64).sqrt())
    }

    /// `b_k = μ_k Σ_i α_i φ_k(x_i)`. Requires a spectral kernel.
    pub fn to_spectral(&self) -> Result<SpectralFunction> {
        let kernel = self.kernel.spectral().ok_or_else(|| {
            MklError::Representation("black-box kernels have no eigen-system".into())
        })?;
        let mut coeffs = vec![0.0; kernel.truncation()];
        let mut phi = vec![0.0; kernel.truncation()];
        for (&x, &a) in self.anchors.iter().zip(&self.alpha) {
            kernel.basis_values_into(x, &mut phi);
            for (c, p) in coeffs.iter_mut().zip(&phi) {
                *c += a * p;
            }
        }
        for (c, mu) in coeffs.iter_mut().zip(kernel.eigenvalues()) {
            *c *= mu;
        }
        Ok(SpectralFunction::new(kernel, coeffs))
    }
}

/// Either representation of one block `f_m`.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockRepr {
    Spectral(SpectralFunction),
    Expansion(KernelExpansion),
}

/// One additive component `f_m` together with its block index.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFunction {
    pub block: usize,
    pub repr: BlockRepr,
}

impl BlockFunction {
    pub fn spectral(block: usize, f: SpectralFunction) -> Self {
        BlockFunction { block, repr: BlockRepr::Spectral(f) }
    }

    pub fn expansion(block: usize, f: KernelExpansion) -> Self {
        BlockFunction { block, repr: BlockRepr::Expansion(f) }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.repr {
            BlockRepr::Spectral(f) => f.eval(x),
            BlockRepr::Expansion(f) => f.eval(x),
        }
    }

    /// Spectral coordinates, converting an expansion if necessary.
    pub fn to_spectral(&self) -> Result<SpectralFunction> {
        match &self.repr {
            BlockRepr::Spectral(f) => Ok(f.clone()),
            BlockRepr::Expansion(f) => f.to_spectral(),
        }
    }
}

pub fn l2_norm(f: &SpectralFunction) -> f64 {
    f.coeffs.iter().map(|b| b * b).sum::<f64>().sqrt()
}

pub fn rkhs_norm(f: &BlockFunction) -> Result<f64> {
    match &f.repr {
        BlockRepr::Spectral(g) => spectral_rkhs_norm(g),
        BlockRepr::Expansion(g) => g.rkhs_norm(),
    }
}

/// `√Σ μ_k^{-1} b_k²`.
pub fn spectral_rkhs_norm(f: &SpectralFunction) -> Result<f64> {
    interp_norm(f, 1.0)
}

/// `‖f‖_n = √((1/n) Σ f(x_i)²)`.
pub fn empirical_norm(f: &BlockFunction, points: &[f64]) -> Result<f64> {
    if points.is_empty() {
        return Err(MklError::input("empirical norm needs at least one point"));
    }
    let mut acc = 0.0;
    for &x in points {
        check_unit_interval(x)?;
        let v = f.eval(x);
        acc += v * v;
    }
    Ok((acc / points.len() as f64).sqrt())
}

/// Max of `|f|` over the uniform grid `{j / (G − 1)}`; a lower bound on `‖f‖_∞`.
///
/// Grids with `G − 1` doubling are nested, so the estimate is nondecreasing
/// along such a sequence.
pub fn sup_norm_estimate(f: &BlockFunction, grid_size: usize) -> Result<f64> {
    if grid_size < MIN_SUP_GRID {
        return Err(MklError::input(format!("grid size {grid_size} below {MIN_SUP_GRID}")));
    }
    let step = 1.0 / (grid_size - 1) as f64;
    Ok((0..grid_size).map(|j| f.eval(j as f64 * step).abs()).fold(0.0, f64::max))
}

/// `T^β f`: coefficients `b_k ↦ μ_k^β b_k`, `β ∈ [0, 1]`.
pub fn power_operator(f: &SpectralFunction, exponent: f64) -> Result<SpectralFunction> {
    if !(0.0..=1.0).contains(&exponent) {
        return Err(MklError::input(format!("power exponent {exponent} outside [0, 1]")));
    }
    f.check_support()?;
    let coeffs = f
        .kernel
        .eigenvalues()
        .iter()
        .zip(&f.coeffs)
        .map(|(&mu, &b)| mu.powf(exponent) * b)
        .collect();
    Ok(SpectralFunction::new(&f.kernel, coeffs))
}

/// Norm of the interpolation space `H_β`: `√Σ μ_k^{-β} b_k²`, `β ∈ [0, 2]`.
/// `β = 0` is the `L2(Q)` norm and `β = 1` the RKHS norm.
pub fn interp_norm(f: &SpectralFunction, beta: f64) -> Result<f64> {
    if !(0.0..=2.0).contains(&beta) {
        return Err(MklError::input(format!("interpolation index {beta} outside [0, 2]")));
    }
    if beta == 0.0 {
        return Ok(l2_norm(f));
    }
    f.check_support()?;
    let v = f.weighted_sq(|mu| mu.powf(-beta));
    if !v.is_finite() {
        return Err(MklError::Representation(format!("H_{beta} norm diverges")));
    }
    Ok(v.sqrt())
}

/// `g` with `‖g‖_H = radius`, direction Gaussian over the first `support`
/// eigenfunctions (in RKHS-whitened coordinates) then normalized.
pub fn sample_rkhs_sphere<R: Rng + ?Sized>(
    kernel: &SpectralKernel,
    radius: f64,
    support: usize,
    rng: &mut R,
) -> Result<SpectralFunction> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(MklError::input(format!("radius {radius} must be finite and nonnegative")));
    }
    let support = support.clamp(1, kernel.truncation());
    let w: Vec<f64> = (0..support).map(|_| rng.sample(StandardNormal)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let coeffs = w
        .iter()
        .zip(kernel.eigenvalues())
        .map(|(&wk, &mu)| if norm > 0.0 { radius * wk / norm * mu.sqrt() } else { 0.0 })
        .collect();
    Ok(SpectralFunction::new(kernel, coeffs))
}

/// Draw from `H^q(R) = {T^{q/2} g : ‖g‖_H ≤ R}` over the full truncation.
pub fn sample_ball_hq(kernel: &SpectralKernel, q: f64, radius: f64, seed: u64) -> Result<SpectralFunction> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    sample_ball_hq_with(kernel, q, radius, kernel.truncation(), &mut rng)
}

/// Ball draw with direction supported on the first `support` eigenfunctions
/// and radius `R·u`, `u ~ Uniform(0, 1)`. The result satisfies
/// `interp_norm(f, 1 + q) = ‖g‖_H ≤ R`.
pub fn sample_ball_hq_with<R: Rng + ?Sized>(
    kernel: &SpectralKernel,
    q: f64,
    radius: f64,
    support: usize,
    rng: &mut R,
) -> Result<SpectralFunction> {
    check_smoothness(q)?;
    if !(radius >= 0.0) {
        return Err(MklError::input(format!("radius {radius} must be nonnegative")));
    }
    let u: f64 = rng.random();
    let g = sample_rkhs_sphere(kernel, radius * u, support, rng)?;
    power_operator(&g, q / 2.0)
}

pub(crate) fn check_smoothness(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(MklError::input(format!("smoothness q = {q} outside [0, 1]")))
    }
}

/// `(Σ_m v_m^p)^{1/p}` of a vector of block norms; `p = ∞` gives the max.
pub fn mixed_norm_of(norms: &[f64], p: f64) -> Result<f64> {
    if norms.is_empty() {
        return Err(MklError::input("mixed norm of an empty block list"));
    }
    if !(p >= 1.0) {
        return Err(MklError::input(format!("mixed norm exponent p = {p} must be ≥ 1")));
    }
    if p.is_infinite() {
        return Ok(norms.iter().copied().fold(0.0, f64::max));
    }
    if p == 1.0 {
        return Ok(norms.iter().sum());
    }
    if p == 2.0 {
        return Ok(norms.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(norms.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p))
}

/// `R_{p,f} = (Σ_m ‖f_m‖_{H_m}^p)^{1/p}`.
pub fn mixed_norm(blocks: &[BlockFunction], p: f64) -> Result<f64> {
    let norms = blocks.iter().map(rkhs_norm).collect::<Result<Vec<_>>>()?;
    mixed_norm_of(&norms, p)
}
