//! Mercer kernels on `[0, 1]` with an explicit eigen-system, Gram matrices and
//! their eigendecompositions.
//!
//! The reference kernel is
//!
//! ```text
//! k(x, x') = Σ_{k=1..K} μ_k φ_k(x) φ_k(x'),   μ_k = c · k^{-1/s},   φ_k(x) = √2 cos(π k x)
//! ```
//!
//! The cosine basis is centered and orthonormal under the uniform measure on
//! `[0, 1]`, so L2 and RKHS norms of any function in the span are exact sums
//! over coefficients. The scale `c` is derived from `(s, K)` so that
//! `sup_x k(x, x) ≤ 1` holds by construction: `sup |φ_k| = √2`, hence
//! `k(x, x) ≤ 2 Σ μ_k`, and `c = 1 / (2 Σ_{k≤K} k^{-1/s})` makes that bound equal to one.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};

/// Default number of retained eigenpairs.
pub const DEFAULT_TRUNCATION: usize = 512;

/// Eigenvalues below this fraction of the trace are clamped to zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Relative Frobenius tolerance for the eigendecomposition reconstruction check.
pub const RECONSTRUCTION_TOL: f64 = 1e-8;

pub(crate) fn check_unit_interval(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(MklError::input(format!("point {x} lies outside [0, 1]")))
    }
}

/// Orthonormal basis used by a [`SpectralKernel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    /// `φ_k(x) = √2 cos(π k x)` on `[0, 1]`, uniform measure.
    #[serde(rename = "cosine01")]
    Cosine01,
}

impl Basis {
    /// Value of the `k`-th basis function (`k ≥ 1`).
    #[inline]
    pub fn eval(self, k: usize, x: f64) -> f64 {
        match self {
            Basis::Cosine01 => SQRT_2 * (PI * k as f64 * x).cos(),
        }
    }

    /// Sup-norm of every basis function.
    pub fn sup_norm(self) -> f64 {
        match self {
            Basis::Cosine01 => SQRT_2,
        }
    }
}

/// Serialized form of a spectral kernel. The scale is derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub s: f64,
    #[serde(rename = "K")]
    pub truncation: usize,
    pub basis: Basis,
}

impl KernelSpec {
    pub fn new(s: f64, truncation: usize) -> Self {
        KernelSpec { s, truncation, basis: Basis::Cosine01 }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::new(0.5, DEFAULT_TRUNCATION)
    }
}

/// Evaluation-only kernel interface.
///
/// Spectral kernels additionally expose their eigen-system through
/// [`Kernel::spectral`]; black-box kernels (e.g. [`GaussianKernel`]) return
/// `None` and are excluded from exact-norm computations.
pub trait Kernel: Send + Sync {
    /// Kernel value without the domain check.
    fn eval_unchecked(&self, x: f64, y: f64) -> f64;

    fn eval(&self, x: f64, y: f64) -> Result<f64> {
        check_unit_interval(x)?;
        check_unit_interval(y)?;
        Ok(self.eval_unchecked(x, y))
    }

    fn spectral(&self) -> Option<&SpectralKernel> {
        None
    }
}

impl<T: Kernel + ?Sized> Kernel for &T {
    fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        (**self).eval_unchecked(x, y)
    }
    fn spectral(&self) -> Option<&SpectralKernel> {
        (**self).spectral()
    }
}

impl<T: Kernel + ?Sized> Kernel for Box<T> {
    fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        (**self).eval_unchecked(x, y)
    }
    fn spectral(&self) -> Option<&SpectralKernel> {
        (**self).spectral()
    }
}

impl<T: Kernel + ?Sized> Kernel for Arc<T> {
    fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        (**self).eval_unchecked(x, y)
    }
    fn spectral(&self) -> Option<&SpectralKernel> {
        (**self).spectral()
    }
}

/// Mercer kernel with eigenvalues `μ_k = c k^{-1/s}`, `k = 1..K`.
#[derive(Debug, Clone)]
pub struct SpectralKernel {
    spec: KernelSpec,
    scale: f64,
    eigenvalues: Arc<[f64]>,
    truncation_bound: f64,
}

impl PartialEq for SpectralKernel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl SpectralKernel {
    pub fn new(s: f64, truncation: usize) -> Result<Self> {
        Self::from_spec(&KernelSpec::new(s, truncation))
    }

    pub fn from_spec(spec: &KernelSpec) -> Result<Self> {
        let s = spec.s;
        if !(s > 0.0 && s < 1.0) {
            return Err(MklError::input(format!("decay exponent s = {s} must lie in (0, 1)")));
        }
        if spec.truncation == 0 {
            return Err(MklError::input("truncation K must be positive"));
        }
        let decay = 1.0 / s;
        let raw: Vec<f64> = (1..=spec.truncation).map(|k| (k as f64).powf(-decay)).collect();
        let raw_sum: f64 = raw.iter().sum();
        let scale = 1.0 / (spec.basis.sup_norm().powi(2) * raw_sum);
        let eigenvalues: Arc<[f64]> = raw.iter().map(|r| scale * r).collect();
        // Σ_{k>K} k^{-1/s} ≤ ∫_K^∞ x^{-1/s} dx = K^{1-1/s} s / (1 - s)
        let tail = (spec.truncation as f64).powf(1.0 - decay) * s / (1.0 - s);
        let truncation_bound = spec.basis.sup_norm().powi(2) * scale * tail;
        Ok(SpectralKernel { spec: *spec, scale, eigenvalues, truncation_bound })
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn s(&self) -> f64 {
        self.spec.s
    }

    /// Derived scale `c`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of retained eigenpairs `K`.
    pub fn truncation(&self) -> usize {
        self.spec.truncation
    }

    pub fn basis(&self) -> Basis {
        self.spec.basis
    }

    /// Eigenvalues `μ_1 ≥ μ_2 ≥ … ≥ μ_K`; index `j` holds `μ_{j+1}`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Upper bound on `|k_∞(x, x') − k_K(x, x')|`, the error against the
    /// untruncated series with the same scale.
    pub fn truncation_bound(&self) -> f64 {
        self.truncation_bound
    }

    /// `φ_k(x)` for `k = 1..K`, written into `out`.
    pub fn basis_values_into(&self, x: f64, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.spec.basis.eval(j + 1, x);
        }
    }

    pub fn basis_values(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.truncation()];
        self.basis_values_into(x, &mut out);
        out
    }

    /// Feature matrix `Z` (`n × K`) with `Z_ik = √μ_k φ_k(x_i)`, so that the
    /// Gram matrix factors as `Z Zᵀ`.
    pub fn feature_matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        for &x in points {
            check_unit_interval(x)?;
        }
        let k = self.truncation();
        let roots: Vec<f64> = self.eigenvalues.iter().map(|m| m.sqrt()).collect();
        Ok(DMatrix::from_fn(points.len(), k, |i, j| {
            roots[j] * self.spec.basis.eval(j + 1, points[i])
        }))
    }
}

impl Kernel for SpectralKernel {
    fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(j, mu)| mu * (self.spec.basis.eval(j + 1, x) * self.spec.basis.eval(j + 1, y)))
            .sum()
    }

    fn spectral(&self) -> Option<&SpectralKernel> {
        Some(self)
    }
}

/// Gaussian kernel `exp(-(x − x')² / (2σ²))`, evaluation only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub bandwidth: f64,
}

impl GaussianKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(MklError::input(format!("invalid bandwidth {bandwidth}")));
        }
        Ok(GaussianKernel { bandwidth })
    }
}

impl Kernel for GaussianKernel {
    fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        (-d * d / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

/// Closed set of kernels that can be stored and serialized.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyKernel {
    Spectral(SpectralKernel),
    Gaussian(GaussianKernel),
}

impl Kernel for AnyKernel {
    fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        match self {
            AnyKernel::Spectral(k) => k.eval_unchecked(x, y),
            AnyKernel::Gaussian(k) => k.eval_unchecked(x, y),
        }
    }

    fn spectral(&self) -> Option<&SpectralKernel> {
        match self {
            AnyKernel::Spectral(k) => Some(k),
            AnyKernel::Gaussian(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AnyKernelFile {
    Spectral(KernelSpec),
    Gaussian(GaussianKernel),
}

impl Serialize for AnyKernel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AnyKernel::Spectral(k) => AnyKernelFile::Spectral(k.spec()),
            AnyKernel::Gaussian(k) => AnyKernelFile::Gaussian(*k),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AnyKernel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Ok(match AnyKernelFile::deserialize(deserializer)? {
            AnyKernelFile::Spectral(spec) => {
                AnyKernel::Spectral(SpectralKernel::from_spec(&spec).map_err(serde::de::Error::custom)?)
            }
            AnyKernelFile::Gaussian(k) => {
                AnyKernel::Gaussian(GaussianKernel::new(k.bandwidth).map_err(serde::de::Error::custom)?)
            }
        })
    }
}

impl From<SpectralKernel> for AnyKernel {
    fn from(k: SpectralKernel) -> Self {
        AnyKernel::Spectral(k)
    }
}

impl From<GaussianKernel> for AnyKernel {
    fn from(k: GaussianKernel) -> Self {
        AnyKernel::Gaussian(k)
    }
}

/// Checked kernel evaluation.
pub fn eval_kernel<K: Kernel + ?Sized>(kernel: &K, x: f64, y: f64) -> Result<f64> {
    kernel.eval(x, y)
}

/// Gram matrix over a set of anchor points.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    anchors: Vec<f64>,
}

/// Builds `K_ij = k(x_i, x_j)`. Rows are filled in parallel; each entry is a
/// pure function of its two anchors so the result does not depend on scheduling.
pub fn gram<K: Kernel + ?Sized>(kernel: &K, points: &[f64]) -> Result<GramMatrix> {
    if points.is_empty() {
        return Err(MklError::input("gram: empty point list"));
    }
    for &x in points {
        check_unit_interval(x)?;
    }
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| kernel.eval_unchecked(points[i], points[j])).collect())
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(GramMatrix { entries, anchors: points.to_vec() })
}

impl GramMatrix {
    /// Wraps an explicit symmetric matrix. Fails if it is not square or not symmetric.
    pub fn from_entries(entries: DMatrix<f64>, anchors: Vec<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() != anchors.len() {
            return Err(MklError::input("gram matrix must be square with one anchor per row"));
        }
        let scale = entries.amax().max(1.0);
        for i in 0..entries.nrows() {
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > 1e-12 * scale {
                    return Err(MklError::input("gram matrix is not symmetric"));
                }
            }
        }
        Ok(GramMatrix { entries, anchors })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// Smallest eigenvalue of the matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.entries.clone()).eigenvalues.min()
    }

    /// Checks symmetry, positive semidefiniteness (`λ_min ≥ −1e-9·trace`) and
    /// `diag ≤ 1`.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        for i in 0..n {
            if self.entries[(i, i)] > 1.0 + 1e-12 {
                return Err(MklError::numeric(format!(
                    "diagonal entry {i} = {} exceeds 1",
                    self.entries[(i, i)]
                )));
            }
            for j in 0..i {
                if self.entries[(i, j)] != self.entries[(j, i)] {
                    return Err(MklError::numeric("gram matrix is not symmetric"));
                }
            }
        }
        let lmin = self.min_eigenvalue();
        if lmin < -1e-9 * self.trace().abs() {
            return Err(MklError::numeric(format!("gram matrix is not PSD: λ_min = {lmin}")));
        }
        Ok(())
    }
}

/// Positive part of a symmetric eigendecomposition `G = U D Uᵀ`.
///
/// Only eigenpairs above `EIGEN_CLAMP · trace` are retained; the rest are
/// counted in `clamped` and treated as exact zeros.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    /// `n × r` matrix with orthonormal columns.
    pub vectors: DMatrix<f64>,
    /// `r` retained eigenvalues, descending.
    pub values: DVector<f64>,
    /// Dimension `n` of the decomposed matrix.
    pub dim: usize,
    /// Number of eigenvalues clamped to zero (`n − r`).
    pub clamped: usize,
}

impl EigenSystem {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// All `n` eigenvalues, descending, with clamped ones reported as zero.
    pub fn full_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.values.iter().copied().collect();
        v.resize(self.dim, 0.0);
        v
    }

    /// `U D Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.values[j];
        }
        &scaled * self.vectors.transpose()
    }

    fn from_decomposition(eig: SymmetricEigen<f64, nalgebra::Dyn>, trace: f64) -> (Self, Vec<usize>) {
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let threshold = EIGEN_CLAMP * trace.abs();
        let kept: Vec<usize> =
            order.into_iter().filter(|&j| eig.eigenvalues[j] > threshold).collect();
        let vectors = DMatrix::from_fn(n, kept.len(), |i, c| eig.eigenvectors[(i, kept[c])]);
        let values = DVector::from_iterator(kept.len(), kept.iter().map(|&j| eig.eigenvalues[j]));
        let clamped = n - kept.len();
        (EigenSystem { vectors, values, dim: n, clamped }, kept)
    }
}

/// Eigendecomposition of a Gram matrix, sorted descending, with small
/// eigenvalues clamped and a reconstruction check at `1e-8 · trace`.
pub fn eigensystem(gram: &GramMatrix) -> Result<EigenSystem> {
    let trace = gram.trace();
    let eig = SymmetricEigen::new(gram.entries.clone());
    let (system, _) = EigenSystem::from_decomposition(eig, trace);
    let err = (gram.entries() - system.reconstruct()).norm();
    if !(err <= RECONSTRUCTION_TOL * trace.abs()) && err > 0.0 {
        return Err(MklError::numeric(format!(
            "eigendecomposition reconstruction error {err:.3e} exceeds {:.1e}·trace",
            RECONSTRUCTION_TOL
        )));
    }
    Ok(system)
}

/// Eigen-system of a Gram matrix given through a feature factor `Z` (`G = Z Zᵀ`).
///
/// Besides the left vectors `U` this keeps the right vectors `V` (`Z = U D^{1/2} Vᵀ`),
/// which map whitened block coordinates back to feature-space coefficients.
#[derive(Debug, Clone)]
pub struct FactoredEigen {
    pub system: EigenSystem,
    /// `p × r` matrix with orthonormal columns, `p` = number of features.
    pub right: DMatrix<f64>,
}

/// Decomposes `Z Zᵀ` through whichever of `Z Zᵀ` / `Zᵀ Z` is smaller.
pub fn factored_eigensystem(z: &DMatrix<f64>) -> Result<FactoredEigen> {
    let (n, p) = z.shape();
    if n == 0 {
        return Err(MklError::input("feature factor has no rows"));
    }
    let trace = z.norm_squared();
    let (system, right) = if n <= p {
        let g = z * z.transpose();
        let eig = SymmetricEigen::new(g.clone());
        let (system, _) = EigenSystem::from_decomposition(eig, trace);
        let err = (&g - system.reconstruct()).norm();
        if err > RECONSTRUCTION_TOL * trace.max(f64::MIN_POSITIVE) {
            return Err(MklError::numeric(format!("factored eigendecomposition residual {err:.3e}")));
        }
        let mut right = z.transpose() * &system.vectors;
        for (j, mut col) in right.column_iter_mut().enumerate() {
            col /= system.values[j].sqrt();
        }
        (system, right)
    } else {
        let c = z.transpose() * z;
        let eig = SymmetricEigen::new(c.clone());
        let (small, _) = EigenSystem::from_decomposition(eig, trace);
        let err = (&c - small.reconstruct()).norm();
        if err > RECONSTRUCTION_TOL * trace.max(f64::MIN_POSITIVE) {
            return Err(MklError::numeric(format!("factored eigendecomposition residual {err:.3e}")));
        }
        let mut left = z * &small.vectors;
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col /= small.values[j].sqrt();
        }
        let clamped = n - small.rank();
        let right = small.vectors;
        (EigenSystem { vectors: left, values: small.values, dim: n, clamped }, right)
    };
    Ok(FactoredEigen { system, right })
}
