//! The single-block subproblem in whitened coordinates.
//!
//! With the block Gram matrix `K = U D Uᵀ` (positive part only) and
//! `α = U D^{-1/2} β`, the fitted values are `U D^{1/2} β`,
//! `‖f‖_H = ‖β‖` and `‖f‖_n = ‖D^{1/2} β‖ / √n`. For a partial residual `r`
//! and `z = Uᵀ r` the block objective (up to a constant) is
//!
//! ```text
//! φ(β) = (1/n)(βᵀDβ − 2 zᵀD^{1/2}β) + λ1‖D^{1/2}β‖/√n + λ2‖β‖ + λ3‖β‖²
//! ```

use nalgebra::DVector;

use super::{FitOptions, RegParams};
use crate::error::{MklError, Result};
use crate::kernel::EigenSystem;

/// Norms below this are treated as an exact zero block.
pub const UNDERFLOW: f64 = 1e-14;

/// Outcome of the zero test, with the certificate distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroTest {
    pub is_zero: bool,
    /// `min_{‖w‖≤1} ‖g − (λ1/√n) D^{1/2} w‖`.
    pub distance: f64,
}

impl ZeroTest {
    /// `λ2 − distance`; nonnegative exactly when zero is optimal.
    pub fn slack(&self, lambda2: f64) -> f64 {
        lambda2 - self.distance
    }
}

/// Is `β = 0` optimal for the block whose smooth gradient at zero is `g`?
///
/// `g = −(2/n) D^{1/2} Uᵀ r`. Zero is optimal iff
/// `min_{‖w‖≤1} ‖g − a D^{1/2} w‖ ≤ λ2` with `a = λ1/√n`.
pub fn block_zero_test(g: &[f64], d: &[f64], lambda1: f64, lambda2: f64, n: usize) -> Result<bool> {
    Ok(zero_test(g, d, lambda1, lambda2, n, 1e-12)?.is_zero)
}

/// [`block_zero_test`] with the distance and an explicit bisection tolerance.
///
/// The constrained minimizer is `w_i(θ) = a√d_i g_i / (a² d_i + θ)` for the
/// multiplier `θ ≥ 0`, with residual `θ g_i / (a² d_i + θ)`. If `‖w(0)‖ ≤ 1`
/// the distance is zero; otherwise `θ` solves `‖w(θ)‖ = 1` and is found by
/// bisection on `(0, a·max√d·‖g‖]`.
pub fn zero_test(g: &[f64], d: &[f64], lambda1: f64, lambda2: f64, n: usize, tol: f64) -> Result<ZeroTest> {
    if g.len() != d.len() {
        return Err(MklError::input("gradient and eigenvalue vectors differ in length"));
    }
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a = lambda1 / (n as f64).sqrt();
    let verdict = |distance: f64| ZeroTest { is_zero: distance <= lambda2, distance };
    if gnorm == 0.0 {
        return Ok(verdict(0.0));
    }
    if a == 0.0 {
        return Ok(verdict(gnorm));
    }

    let w_norm = |theta: f64| {
        g.iter()
            .zip(d)
            .map(|(&gi, &di)| {
                let den = a * a * di + theta;
                if den > 0.0 {
                    (a * di.sqrt() * gi / den).powi(2)
                } else if gi != 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            .sqrt()
    };
    let distance = |theta: f64| {
        theta
            * g.iter()
                .zip(d)
                .map(|(&gi, &di)| (gi / (a * a * di + theta)).powi(2))
                .sum::<f64>()
                .sqrt()
    };

    if w_norm(0.0) <= 1.0 {
        return Ok(verdict(0.0));
    }
    let max_root = d.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
    let (mut lo, mut hi) = (0.0, a * max_root * gnorm);
    if !(w_norm(hi) <= 1.0 + 1e-12) {
        return Err(MklError::numeric(format!(
            "zero test: multiplier bracket (0, {hi:.3e}] does not contain the root"
        )));
    }
    while hi - lo > tol * hi.max(1e-300) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if w_norm(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(verdict(distance(0.5 * (lo + hi))))
}

/// Result of [`solve_block_whitened`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolution {
    pub beta: DVector<f64>,
    pub iterations: usize,
    /// Norm of the block stationarity residual at `beta`.
    pub stationarity: f64,
    /// The iteration collapsed to zero (norm underflow).
    pub underflow: bool,
}

/// Block objective `φ(β)` without the constant `‖r‖²/n`; `φ(0) = 0`.
pub fn block_objective(beta: &DVector<f64>, z: &DVector<f64>, d: &DVector<f64>, p: &RegParams, n: usize) -> f64 {
    let nf = n as f64;
    let mut quad = 0.0;
    let mut lin = 0.0;
    let mut sq = 0.0;
    for i in 0..beta.len() {
        let b = beta[i];
        quad += d[i] * b * b;
        lin += d[i].sqrt() * z[i] * b;
        sq += b * b;
    }
    (quad - 2.0 * lin) / nf + p.lambda1 * (quad / nf).sqrt() + p.lambda2 * sq.sqrt() + p.lambda3 * sq
}

/// Norm of `∇φ(β)` (for `β ≠ 0`).
pub fn stationarity(beta: &DVector<f64>, z: &DVector<f64>, d: &DVector<f64>, p: &RegParams, n: usize) -> f64 {
    let nf = n as f64;
    let t1 = (beta.iter().zip(d.iter()).map(|(b, di)| di * b * b).sum::<f64>() / nf).sqrt();
    let t2 = beta.norm();
    let mut acc = 0.0;
    for i in 0..beta.len() {
        let b = beta[i];
        let mut gi = 2.0 / nf * (d[i] * b - d[i].sqrt() * z[i]) + 2.0 * p.lambda3 * b;
        if p.lambda1 > 0.0 {
            gi += p.lambda1 * d[i] * b / (nf * t1);
        }
        if p.lambda2 > 0.0 {
            gi += p.lambda2 * b / t2;
        }
        acc += gi * gi;
    }
    acc.sqrt()
}

/// Minimizes the block objective given `r`, where `eig` is the block's
/// positive-part eigensystem.
pub fn solve_block(r: &DVector<f64>, eig: &EigenSystem, p: &RegParams, opts: &FitOptions) -> Result<BlockSolution> {
    let z = eig.vectors.tr_mul(r);
    solve_block_whitened(&z, &eig.values, p, r.len(), opts)
}

/// Minimizes `φ` for a block already known to be nonzero.
///
/// Stationarity gives `β_i = (2/n)√d_i z_i / ((2/n)d_i + λ1 d_i/(n t1) + λ2/t2 + 2λ3)`
/// where `t1 = ‖D^{1/2}β‖/√n` and `t2 = ‖β‖` depend on `β`. The pair
/// `t = (t1, t2)` is found as a fixed point of `t ↦ F(t)`: each step tries a
/// Newton step on `t − F(t)` with the analytic Jacobian and falls back to the
/// damped update `t ← (t + F(t))/2` when Newton does not reduce the residual.
pub fn solve_block_whitened(
    z: &DVector<f64>,
    d: &DVector<f64>,
    p: &RegParams,
    n: usize,
    opts: &FitOptions,
) -> Result<BlockSolution> {
    let nf = n as f64;
    let r = z.len();
    let num: Vec<f64> = (0..r).map(|i| 2.0 / nf * d[i].sqrt() * z[i]).collect();
    let base: Vec<f64> = (0..r).map(|i| 2.0 / nf * d[i] + 2.0 * p.lambda3).collect();
    let (use1, use2) = (p.lambda1 > 0.0, p.lambda2 > 0.0);
    let zero = || BlockSolution { beta: DVector::zeros(r), iterations: 0, stationarity: 0.0, underflow: true };

    let denominator = |i: usize, t: [f64; 2]| {
        let mut den = base[i];
        if use1 {
            den += p.lambda1 * d[i] / (nf * t[0]);
        }
        if use2 {
            den += p.lambda2 / t[1];
        }
        den
    };
    let beta_at = |t: [f64; 2]| DVector::from_fn(r, |i, _| num[i] / denominator(i, t));
    let norms = |b: &DVector<f64>| {
        let t1 = (b.iter().zip(d.iter()).map(|(x, di)| di * x * x).sum::<f64>() / nf).sqrt();
        [t1, b.norm()]
    };
    // components of t − F(t) that actually enter the denominators
    let gap = |t: [f64; 2], f: [f64; 2]| {
        let h0 = if use1 { t[0] - f[0] } else { 0.0 };
        let h1 = if use2 { t[1] - f[1] } else { 0.0 };
        [h0, h1]
    };

    if num.iter().all(|&v| v == 0.0) {
        return Ok(zero());
    }

    // smooth start: the ridge / least-squares solution
    let start = DVector::from_fn(r, |i, _| if base[i] > 0.0 { num[i] / base[i] } else { 0.0 });
    let mut t = norms(&start);
    if (use1 && t[0] < UNDERFLOW) || (use2 && t[1] < UNDERFLOW) {
        return Ok(zero());
    }

    for iter in 1..=opts.max_inner {
        let beta = beta_at(t);
        let f = norms(&beta);
        if (use1 && f[0] < UNDERFLOW) || (use2 && f[1] < UNDERFLOW) || f[1] == 0.0 {
            return Ok(BlockSolution { iterations: iter, ..zero() });
        }
        let res = stationarity(&beta, z, d, p, n);
        if res <= opts.inner_tol || (!use1 && !use2) {
            return Ok(BlockSolution { beta, iterations: iter, stationarity: res, underflow: false });
        }
        let h = gap(t, f);
        let hnorm = h[0].hypot(h[1]);

        // Jacobian of F at t
        let mut jac = [[0.0; 2]; 2];
        for i in 0..r {
            let den = denominator(i, t);
            let db0 = if use1 { beta[i] * p.lambda1 * d[i] / (nf * t[0] * t[0] * den) } else { 0.0 };
            let db1 = if use2 { beta[i] * p.lambda2 / (t[1] * t[1] * den) } else { 0.0 };
            let w0 = d[i] * beta[i] / (nf * f[0].max(f64::MIN_POSITIVE));
            let w1 = beta[i] / f[1];
            jac[0][0] += w0 * db0;
            jac[0][1] += w0 * db1;
            jac[1][0] += w1 * db0;
            jac[1][1] += w1 * db1;
        }
        let newton = newton_step(t, h, jac, use1, use2);
        let damped = [0.5 * (t[0] + f[0]), 0.5 * (t[1] + f[1])];
        t = match newton {
            Some(cand) if cand[0] > 0.0 && cand[1] > 0.0 => {
                let fc = norms(&beta_at(cand));
                let hc = gap(cand, fc);
                if hc[0].hypot(hc[1]) < hnorm {
                    cand
                } else {
                    damped
                }
            }
            _ => damped,
        };
    }
    Err(MklError::numeric(format!(
        "block fixed point did not converge in {} iterations (t1 = {:.3e}, t2 = {:.3e})",
        opts.max_inner, t[0], t[1]
    )))
}

/// Solves `(I − J) δ = −h` over the active coordinates.
fn newton_step(t: [f64; 2], h: [f64; 2], j: [[f64; 2]; 2], use1: bool, use2: bool) -> Option<[f64; 2]> {
    match (use1, use2) {
        (true, true) => {
            let (a, b, c, e) = (1.0 - j[0][0], -j[0][1], -j[1][0], 1.0 - j[1][1]);
            let det = a * e - b * c;
            if det == 0.0 || !det.is_finite() {
                return None;
            }
            let d0 = (-h[0] * e + h[1] * b) / det;
            let d1 = (-h[1] * a + h[0] * c) / det;
            Some([t[0] + d0, t[1] + d1])
        }
        (true, false) => {
            let a = 1.0 - j[0][0];
            (a != 0.0).then(|| [t[0] - h[0] / a, t[1]])
        }
        (false, true) => {
            let e = 1.0 - j[1][1];
            (e != 0.0).then(|| [t[0], t[1] - h[1] / e])
        }
        (false, false) => None,
    }
}
