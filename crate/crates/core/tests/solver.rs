mod common;

use common::*;
use mklnet::solver::{fit, zero_test, solve_block_whitened, FitOptions, RegParams};
use mklnet::kernel::{AnyKernel, SpectralKernel};
use mklnet::data::{make_truth, sample_dataset, Noise, Profile, TruthSpec};
use mklnet::kernel::KernelSpec;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn gradient(z: &DVector<f64>, d: &DVector<f64>, n: usize) -> Vec<f64> {
    (0..z.len()).map(|i| -2.0 / n as f64 * d[i].sqrt() * z[i]).collect()
}

#[test]
fn zero_test_agrees_with_lattice_in_two_dimensions() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let (mut checked, mut zeros) = (0, 0);
    while checked < 30 {
        let (z, d, p, n) = random_block(&mut rng, 2);
        let margin = min_directional_derivative_2d(&z, &d, &p, n);
        if margin.abs() < 1e-4 * p.lambda2.max(1e-3) {
            continue;
        }
        let ours = zero_test(&gradient(&z, &d, n), d.as_slice(), p.lambda1, p.lambda2, n, 1e-12).unwrap();
        let lattice = lattice_minimizer_2d(&z, &d, &p, n);
        assert_eq!(ours.is_zero, margin >= 0.0, "directional derivative disagrees");
        assert_eq!(ours.is_zero, lattice.norm() < 1e-6, "lattice disagrees: {lattice}");
        checked += 1;
        zeros += ours.is_zero as usize;
    }
    assert!(zeros > 3 && zeros < 27, "{zeros} zero verdicts");
}

#[test]
fn zero_test_agrees_with_reference_in_ten_dimensions() {
    let mut rng = ChaCha20Rng::seed_from_u64(22);
    let mut checked = 0;
    while checked < 50 {
        let (z, d, p, n) = random_block(&mut rng, 10);
        let t = zero_test(&gradient(&z, &d, n), d.as_slice(), p.lambda1, p.lambda2, n, 1e-12).unwrap();
        if t.slack(p.lambda2).abs() < 1e-3 * p.lambda2 {
            continue;
        }
        let (beta, phi) = block_reference(&z, &d, &p, n);
        let reference_zero = phi > -1e-12 || beta.norm() < 1e-6;
        assert_eq!(t.is_zero, reference_zero, "slack {} phi {phi}", t.slack(p.lambda2));
        checked += 1;
    }
}

#[test]
fn solve_block_matches_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let opts = FitOptions::default();
    let mut checked = 0;
    while checked < 50 {
        let (z, d, p, n) = random_block(&mut rng, 10);
        if zero_test(&gradient(&z, &d, n), d.as_slice(), p.lambda1, p.lambda2, n, 1e-12).unwrap().is_zero {
            continue;
        }
        let sol = solve_block_whitened(&z, &d, &p, n, &opts).unwrap();
        let ours = block_phi(&sol.beta, &z, &d, &p, n);
        let (_, reference) = block_reference(&z, &d, &p, n);
        assert!(ours <= reference + 1e-8, "ours {ours} reference {reference}");
        checked += 1;
    }
}

#[test]
fn fit_matches_reference_objective() {
    let opts = FitOptions::default();
    for seed in 0..10 {
        let (data, kernels, p) = random_instance(seed);
        let model = fit(&data, &kernels, &p, &opts, None).unwrap();
        let reference = reference_objective(&data, &kernels, &p);
        assert!(model.objective <= reference + 1e-6, "seed {seed}: {} vs {reference}", model.objective);
        assert!(model.converged && model.kkt_residual <= 1e-6);
    }
}

#[test]
fn kkt_certificate_at_exit() {
    use mklnet::solver::PreparedBlocks;
    for seed in 100..110 {
        let (data, kernels, p) = random_instance(seed);
        let model = fit(&data, &kernels, &p, &FitOptions::default(), None).unwrap();
        assert!(model.converged);
        // recheck independently of the model's own residual bookkeeping
        let prep = PreparedBlocks::new(&data, &kernels).unwrap();
        let fitted = model.predict(&data.x).unwrap();
        let resid = &data.y - fitted;
        let n = data.n();
        for m in 0..data.blocks() {
            let blk = &prep.blocks[m];
            let own = model.block_function(m).unwrap();
            let partial = &resid + DVector::from_iterator(n, data.column(m).iter().map(|&x| own.eval(x)));
            let z = blk.u.tr_mul(&partial);
            if !model.is_active(m) {
                let t = zero_test(&gradient(&z, &blk.d, n), blk.d.as_slice(), p.lambda1, p.lambda2, n, 1e-12).unwrap();
                assert!(t.slack(p.lambda2) >= -1e-8, "seed {seed} block {m}");
            }
        }
    }
}

#[test]
fn objective_is_permutation_invariant() {
    let opts = FitOptions::default();
    for seed in 200..205 {
        let (data, kernels, p) = random_instance(seed);
        let m = data.blocks();
        let perm: Vec<usize> = (0..m).rev().collect();
        let x = nalgebra::DMatrix::from_fn(data.n(), m, |i, j| data.x[(i, perm[j])]);
        let permuted = mklnet::Dataset::new(x, data.y.clone()).unwrap();
        let kperm: Vec<AnyKernel> = perm.iter().map(|&j| kernels[j].clone()).collect();
        let a = fit(&data, &kernels, &p, &opts, None).unwrap();
        let b = fit(&permuted, &kperm, &p, &opts, None).unwrap();
        assert!((a.objective - b.objective).abs() <= 1e-8, "seed {seed}: {} vs {}", a.objective, b.objective);
    }
}

#[test]
fn strongly_convex_fits_agree_across_starts() {
    let opts = FitOptions::default();
    let (data, kernels, _) = random_instance(300);
    let p = RegParams::new(0.05, 0.01, 0.02).unwrap();
    let base = fit(&data, &kernels, &p, &opts, None).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(300);
    for _ in 0..5 {
        let mut start = base.clone();
        for a in start.alpha.iter_mut().flatten() {
            *a = rng.random::<f64>() - 0.5;
        }
        let other = fit(&data, &kernels, &p, &opts, Some(&start)).unwrap();
        assert!((other.objective - base.objective).abs() <= 1e-8);
    }
}

/// Spearman correlation of two equally long samples (average ranks on ties).
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[test]
fn active_set_shrinks_along_lambda1_path() {
    let opts = FitOptions::default();
    let kernel: AnyKernel = SpectralKernel::new(0.5, 32).unwrap().into();
    let lambdas: Vec<f64> = (0..20).map(|j| 1e-3 * 10f64.powf(3.0 * j as f64 / 19.0)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let mut spec = TruthSpec::new(6, 2, 0.0, Profile::Homogeneous, seed);
        spec.kernel = KernelSpec::new(0.5, 32);
        let truth = make_truth(&spec).unwrap();
        let data = sample_dataset(&truth, 40, Noise::Bounded { radius: 0.5 }, seed + 50).unwrap();
        for &l1 in &lambdas {
            let model = mklnet::l1_fit(&data, &vec![kernel.clone(); 6], l1, 1e-3, &opts).unwrap();
            xs.push(l1);
            ys.push(model.active.len() as f64);
        }
    }
    let rho = spearman(&xs, &ys);
    assert!(rho <= 0.0, "Spearman {rho}");
}
