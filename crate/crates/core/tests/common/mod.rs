//! Reference solvers shared by the integration tests. Nothing here reuses
//! the crate's own eigensystem or block solver: Gram matrices are
//! decomposed directly with `SymmetricEigen`, and minimization is plain
//! damped Newton on the smooth pieces of the objective.
#![allow(dead_code)]

use mklnet::kernel::{gram, AnyKernel};
use mklnet::{Dataset, RegParams};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// `A_m = U_m D_m^{1/2}` and `D_m` for each block.
pub struct Whitened {
    pub a: Vec<DMatrix<f64>>,
    pub d: Vec<DVector<f64>>,
}

pub fn whiten(data: &Dataset, kernels: &[AnyKernel]) -> Whitened {
    let mut a = Vec::new();
    let mut d = Vec::new();
    for (m, k) in kernels.iter().enumerate() {
        let g = gram(k, &data.column(m)).unwrap();
        let trace = g.trace();
        let eig = SymmetricEigen::new(g.entries().clone());
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&j| eig.eigenvalues[j] > 1e-12 * trace).collect();
        let dm = DVector::from_iterator(keep.len(), keep.iter().map(|&j| eig.eigenvalues[j]));
        let am = DMatrix::from_fn(data.n(), keep.len(), |i, c| eig.eigenvectors[(i, keep[c])] * dm[c].sqrt());
        a.push(am);
        d.push(dm);
    }
    Whitened { a, d }
}

/// Total objective in whitened coordinates (blocks not in `beta` are zero).
pub fn total_objective(w: &Whitened, y: &DVector<f64>, p: &RegParams, beta: &[DVector<f64>]) -> f64 {
    let n = y.len() as f64;
    let mut r = y.clone();
    let mut pen = 0.0;
    for (m, b) in beta.iter().enumerate() {
        r -= &w.a[m] * b;
        let bn = b.component_mul(&w.d[m].map(f64::sqrt)).norm() / n.sqrt();
        pen += p.lambda1 * bn + p.lambda2 * b.norm() + p.lambda3 * b.norm_squared();
    }
    r.norm_squared() / n + pen
}

/// `F(x) = (1/n)‖y − A x‖² + Σ_groups [λ1‖B_g x_g‖ + λ2‖x_g‖ + λ3‖x_g‖²]`
/// with `B_g = D_g^{1/2}/√n`, every norm replaced by `√(‖·‖² + ε²)`.
fn smoothed_value(a: &DMatrix<f64>, y: &DVector<f64>, n: f64, groups: &[(usize, DVector<f64>)], p: &RegParams, eps: f64, x: &DVector<f64>) -> f64 {
    let mut v = (y - a * x).norm_squared() / n;
    for (start, dg) in groups {
        let xg = x.rows(*start, dg.len());
        let bx: f64 = xg.iter().zip(dg.iter()).map(|(xi, di)| di * xi * xi).sum::<f64>() / n;
        v += p.lambda1 * (bx + eps * eps).sqrt() + p.lambda2 * (xg.norm_squared() + eps * eps).sqrt() + p.lambda3 * xg.norm_squared();
    }
    v
}

/// Minimizes `F` by damped Newton on the smoothed objective, driving `ε`
/// from 1e-2 down to 1e-13 with warm starts. Returns the minimizer and the
/// exact (unsmoothed) objective there.
fn newton(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    n: f64,
    groups: &[(usize, DVector<f64>)],
    p: &RegParams,
    x0: DVector<f64>,
) -> (DVector<f64>, f64) {
    let dim = x0.len();
    let ata = a.tr_mul(a) * (2.0 / n);
    let aty = a.tr_mul(y) * (2.0 / n);
    let mut x = x0;
    for level in 2..=13 {
        let eps = 10f64.powi(-level);
        let mut fx = smoothed_value(a, y, n, groups, p, eps, &x);
        for _ in 0..200 {
            let mut grad = &ata * &x - &aty;
            let mut hess = ata.clone();
            for (start, dg) in groups {
                let k = dg.len();
                let xg: DVector<f64> = x.rows(*start, k).into_owned();
                let bbx = xg.component_mul(dg) / n;
                let s1 = (xg.dot(&bbx) + eps * eps).sqrt();
                let s2 = (xg.norm_squared() + eps * eps).sqrt();
                let mut gg = 2.0 * p.lambda3 * &xg;
                let mut hg = DMatrix::identity(k, k) * (2.0 * p.lambda3);
                gg += &bbx * (p.lambda1 / s1);
                hg += (DMatrix::from_diagonal(&(dg / n)) / s1 - &bbx * bbx.transpose() / s1.powi(3)) * p.lambda1;
                gg += &xg * (p.lambda2 / s2);
                hg += (DMatrix::identity(k, k) / s2 - &xg * xg.transpose() / s2.powi(3)) * p.lambda2;
                let mut gslice = grad.rows_mut(*start, k);
                gslice += gg;
                let mut hslice = hess.view_mut((*start, *start), (k, k));
                hslice += hg;
            }
            let ridge = 1e-15 * hess.diagonal().amax().max(1e-300);
            for i in 0..dim {
                hess[(i, i)] += ridge;
            }
            let step = match hess.cholesky() {
                Some(c) => c.solve(&grad),
                None => grad.clone(),
            };
            let slope = grad.dot(&step);
            if !(slope > 1e-30) {
                break;
            }
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-12 {
                let cand = &x - &step * t;
                let fc = smoothed_value(a, y, n, groups, p, eps, &cand);
                if fc <= fx - 1e-4 * t * slope {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
    }
    let f = smoothed_value(a, y, n, groups, p, 0.0, &x);
    (x, f)
}

/// Minimum of the full objective: every support pattern is tried, and on
/// each the (then smooth) objective is minimized by Newton. The pattern of
/// the true minimizer recovers the global minimum; any other pattern can
/// only give a larger value.
pub fn reference_objective(data: &Dataset, kernels: &[AnyKernel], p: &RegParams) -> f64 {
    let w = whiten(data, kernels);
    let m = kernels.len();
    let y = &data.y;
    let n = y.len() as f64;
    let mut best = y.norm_squared() / n;
    for mask in 1u32..(1 << m) {
        let blocks: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let dim: usize = blocks.iter().map(|&j| w.d[j].len()).sum();
        let mut a = DMatrix::zeros(y.len(), dim);
        let mut groups = Vec::new();
        let mut col = 0;
        for &j in &blocks {
            a.view_mut((0, col), (y.len(), w.d[j].len())).copy_from(&w.a[j]);
            groups.push((col, w.d[j].clone()));
            col += w.d[j].len();
        }
        // a nearly unshrunk start and a heavily shrunk one
        let mut f = f64::INFINITY;
        for shrink in [1e-9, 2.0 * p.lambda3 + p.lambda1 + p.lambda2 + 1e-3] {
            let mut h = a.tr_mul(&a) * (2.0 / n);
            for i in 0..dim {
                h[(i, i)] += 2.0 * p.lambda3 + shrink;
            }
            let x0 = h.cholesky().unwrap().solve(&(a.tr_mul(y) * (2.0 / n)));
            f = f.min(newton(&a, y, n, &groups, p, x0).1);
        }
        best = best.min(f);
    }
    best
}

/// Block objective `φ(β)` for `z = Uᵀr` (constant dropped, `φ(0) = 0`).
pub fn block_phi(beta: &DVector<f64>, z: &DVector<f64>, d: &DVector<f64>, p: &RegParams, n: usize) -> f64 {
    let nf = n as f64;
    let q: f64 = (0..beta.len()).map(|i| d[i] * beta[i] * beta[i]).sum();
    let l: f64 = (0..beta.len()).map(|i| d[i].sqrt() * z[i] * beta[i]).sum();
    (q - 2.0 * l) / nf + p.lambda1 * (q / nf).sqrt() + p.lambda2 * beta.norm() + p.lambda3 * beta.norm_squared()
}

/// Newton minimizer of a single block, posed as a least-squares problem
/// with `A = D^{1/2}` and target `z`.
pub fn block_reference(z: &DVector<f64>, d: &DVector<f64>, p: &RegParams, n: usize) -> (DVector<f64>, f64) {
    // (1/n)‖z − D^{1/2}β‖² = φ's quadratic part + ‖z‖²/n
    let a = DMatrix::from_diagonal(&d.map(f64::sqrt));
    let nf = n as f64;
    let mut best = (DVector::zeros(z.len()), 0.0);
    for shrink in [0.0, p.lambda1 + p.lambda2] {
        let x0 = DVector::from_fn(z.len(), |i, _| {
            2.0 / nf * d[i].sqrt() * z[i] / (2.0 / nf * d[i] + 2.0 * p.lambda3 + shrink)
        });
        let (x, _) = newton(&a, z, nf, &[(0, d.clone())], p, x0);
        let f = block_phi(&x, z, d, p, n);
        if f < best.1 {
            best = (x, f);
        }
    }
    let (x, f) = best;
    (x, f.min(0.0))
}

/// Minimum over unit directions of the one-sided derivative of `φ` at 0,
/// brute-forced on a dense circle (2-D blocks only). Zero is optimal iff it
/// is nonnegative.
pub fn min_directional_derivative_2d(z: &DVector<f64>, d: &DVector<f64>, p: &RegParams, n: usize) -> f64 {
    let nf = n as f64;
    let g = [-2.0 / nf * d[0].sqrt() * z[0], -2.0 / nf * d[1].sqrt() * z[1]];
    (0..200_000)
        .map(|k| {
            let th = k as f64 / 200_000.0 * std::f64::consts::TAU;
            let v = [th.cos(), th.sin()];
            g[0] * v[0] + g[1] * v[1] + p.lambda1 * ((d[0] * v[0] * v[0] + d[1] * v[1] * v[1]) / nf).sqrt() + p.lambda2
        })
        .fold(f64::INFINITY, f64::min)
}

/// Brute-force lattice minimization of a 2-D block objective with four
/// levels of zoom; returns the minimizing lattice point.
pub fn lattice_minimizer_2d(z: &DVector<f64>, d: &DVector<f64>, p: &RegParams, n: usize) -> DVector<f64> {
    let half = 400i64;
    let mut center = DVector::zeros(2);
    let mut width = [2.0 * z.norm() / d[0].sqrt() + 1e-12, 2.0 * z.norm() / d[1].sqrt() + 1e-12];
    let mut best = DVector::zeros(2);
    let mut best_f = 0.0;
    for _ in 0..4 {
        for i in -half..=half {
            for j in -half..=half {
                let b = DVector::from_vec(vec![
                    center[0] + width[0] * i as f64 / half as f64,
                    center[1] + width[1] * j as f64 / half as f64,
                ]);
                let f = block_phi(&b, z, d, p, n);
                if f < best_f {
                    best_f = f;
                    best = b;
                }
            }
        }
        center = best.clone();
        width = [width[0] / 20.0, width[1] / 20.0];
    }
    best
}

/// Small random fitting instance: data from a sparse truth plus random weights.
pub fn random_instance(seed: u64) -> (Dataset, Vec<AnyKernel>, RegParams) {
    use mklnet::data::{make_truth, sample_dataset, Noise, Profile, TruthSpec};
    use mklnet::kernel::{KernelSpec, SpectralKernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=32);
    let m = rng.random_range(1..=4);
    let d = rng.random_range(0..=m);
    let mut spec = TruthSpec::new(m, d, rng.random::<f64>(), Profile::Homogeneous, seed);
    spec.kernel = KernelSpec::new(0.3 + 0.4 * rng.random::<f64>(), 32);
    let truth = make_truth(&spec).unwrap();
    let data = sample_dataset(&truth, n, Noise::Bounded { radius: 0.3 }, seed ^ 0xabc).unwrap();
    let log_uniform = |rng: &mut ChaCha20Rng, lo: f64, hi: f64| (lo.ln() + (hi / lo).ln() * rng.random::<f64>()).exp();
    let l1 = log_uniform(&mut rng, 1e-3, 0.5);
    let l2 = log_uniform(&mut rng, 1e-4, 0.1);
    let l3 = if rng.random::<bool>() { 0.0 } else { log_uniform(&mut rng, 1e-4, 0.1) };
    let kernel: AnyKernel = SpectralKernel::from_spec(&spec.kernel).unwrap().into();
    (data, vec![kernel; m], RegParams::new(l1, l2, l3).unwrap())
}

/// Random whitened block: `z`, descending `d`, weights and `n`.
pub fn random_block(rng: &mut rand_chacha::ChaCha20Rng, dim: usize) -> (DVector<f64>, DVector<f64>, RegParams, usize) {
    use rand::Rng;
    let n = rng.random_range(dim..=4 * dim);
    let mut d: Vec<f64> = (0..dim).map(|_| (rng.random::<f64>() * 8.0 - 6.0).exp2() * n as f64 / 4.0).collect();
    d.sort_by(|a, b| b.total_cmp(a));
    let z = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let d = DVector::from_vec(d);
    let gnorm = (0..dim).map(|i| (2.0 / n as f64 * d[i].sqrt() * z[i]).powi(2)).sum::<f64>().sqrt();
    // scale the weights to the gradient so both verdicts occur
    let l1 = gnorm * (n as f64).sqrt() * rng.random::<f64>() * 0.8 / d[0].sqrt();
    let l2 = gnorm * rng.random::<f64>() * 1.2;
    let l3 = if rng.random::<bool>() { 0.0 } else { rng.random::<f64>() * 0.1 };
    (z, d, RegParams::new(l1, l2, l3).unwrap(), n)
}
