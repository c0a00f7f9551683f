//! Synthetic product-design experiments: sparse additive ground truths of
//! controlled smoothness and the datasets drawn from them.
//!
//! Each coordinate `x^{(m)}` is iid uniform on `[0, 1]`, and every block
//! function is centered. So for an estimate that lives in the same spectral
//! basis, the population error `‖f̂ − f*‖²_{L2(Π)}` splits exactly into the
//! sum of per-block coefficient distances ([`exact_l2_error`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::function::{
    check_smoothness, l2_norm, mixed_norm_of, power_operator, sample_rkhs_sphere, spectral_rkhs_norm,
    BlockFunction, SpectralFunction,
};
use crate::kernel::{KernelSpec, SpectralKernel};

/// How the per-block norms of the truth are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `‖f*_m‖_H = 1` on every active block.
    Homogeneous,
    /// `‖f*_m‖_H = 1/m` for the 1-based block index `m`.
    Inhomogeneous,
    /// `‖g*_m‖_H ∝ weights` (all equal if absent), rescaled so that
    /// `R_{2,g*}` equals `r_target`.
    Custom { r_target: f64, weights: Option<Vec<f64>> },
}

/// Everything needed to rebuild a [`GroundTruth`] deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    #[serde(rename = "M")]
    pub blocks: usize,
    pub d: usize,
    pub q: f64,
    pub profile: Profile,
    pub kernel: KernelSpec,
    /// Number of leading eigenfunctions the direction of `g*_m` is drawn over.
    /// `None` uses the whole truncation.
    #[serde(default)]
    pub support: Option<usize>,
    /// Draw the active set at random instead of `{1..d}`.
    #[serde(default)]
    pub permute: bool,
    pub seed: u64,
}

impl TruthSpec {
    pub fn new(blocks: usize, d: usize, q: f64, profile: Profile, seed: u64) -> Self {
        TruthSpec {
            blocks,
            d,
            q,
            profile,
            kernel: KernelSpec::default(),
            support: None,
            permute: false,
            seed,
        }
    }
}

/// Sparse additive truth `f* = Σ_{m∈I0} f*_m`, `f*_m = T^{q/2} g*_m`.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    spec: TruthSpec,
    kernel: SpectralKernel,
    active: Vec<usize>,
    /// Indexed by block, zero outside the active set.
    g: Vec<SpectralFunction>,
    f: Vec<SpectralFunction>,
}

pub fn make_truth(spec: &TruthSpec) -> Result<GroundTruth> {
    check_smoothness(spec.q)?;
    if spec.blocks == 0 {
        return Err(MklError::input("need at least one block"));
    }
    if spec.d > spec.blocks {
        return Err(MklError::input(format!("d = {} exceeds M = {}", spec.d, spec.blocks)));
    }
    let kernel = SpectralKernel::from_spec(&spec.kernel)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let mut active: Vec<usize> = (0..spec.d).collect();
    if spec.permute {
        let mut all: Vec<usize> = (0..spec.blocks).collect();
        all.shuffle(&mut rng);
        active = all[..spec.d].to_vec();
        active.sort_unstable();
    }

    let support = spec.support.unwrap_or(kernel.truncation());
    let mut g = vec![SpectralFunction::zero(&kernel); spec.blocks];
    let mut f = g.clone();
    for (rank, &m) in active.iter().enumerate() {
        let unit = sample_rkhs_sphere(&kernel, 1.0, support, &mut rng)?;
        let fm = power_operator(&unit, spec.q / 2.0)?;
        // rescale the pair so the profile's target norm holds
        let scale = match &spec.profile {
            Profile::Homogeneous => 1.0 / spectral_rkhs_norm(&fm)?,
            Profile::Inhomogeneous => 1.0 / ((m + 1) as f64 * spectral_rkhs_norm(&fm)?),
            Profile::Custom { weights, .. } => match weights {
                Some(w) => {
                    let v = *w.get(rank).ok_or_else(|| {
                        MklError::input(format!("{} custom weights for d = {}", w.len(), spec.d))
                    })?;
                    if !(v > 0.0) {
                        return Err(MklError::input("custom weights must be positive"));
                    }
                    v
                }
                None => 1.0,
            },
        };
        g[m] = unit.scaled(scale);
        f[m] = fm.scaled(scale);
    }

    if let Profile::Custom { r_target, .. } = &spec.profile {
        if !(*r_target > 0.0) {
            return Err(MklError::input(format!("R target {r_target} must be positive")));
        }
        if !active.is_empty() {
            let norms = g.iter().map(spectral_rkhs_norm).collect::<Result<Vec<_>>>()?;
            let factor = r_target / mixed_norm_of(&norms, 2.0)?;
            for m in &active {
                g[*m] = g[*m].scaled(factor);
                f[*m] = f[*m].scaled(factor);
            }
        }
    }

    Ok(GroundTruth { spec: spec.clone(), kernel, active, g, f })
}

impl GroundTruth {
    pub fn spec(&self) -> &TruthSpec {
        &self.spec
    }

    pub fn kernel(&self) -> &SpectralKernel {
        &self.kernel
    }

    /// Number of blocks `M`.
    pub fn blocks(&self) -> usize {
        self.f.len()
    }

    /// Zero-based indices of the active blocks, ascending.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn d(&self) -> usize {
        self.active.len()
    }

    pub fn q(&self) -> f64 {
        self.spec.q
    }

    pub fn f(&self, m: usize) -> &SpectralFunction {
        &self.f[m]
    }

    pub fn g(&self, m: usize) -> &SpectralFunction {
        &self.g[m]
    }

    pub fn block_functions(&self) -> Vec<BlockFunction> {
        self.f.iter().enumerate().map(|(m, f)| BlockFunction::spectral(m, f.clone())).collect()
    }

    /// `‖f*_m‖_H` for every block.
    pub fn f_norms(&self) -> Vec<f64> {
        self.f.iter().map(|f| spectral_rkhs_norm(f).expect("truth lies in the truncation")).collect()
    }

    /// `‖g*_m‖_H` for every block.
    pub fn g_norms(&self) -> Vec<f64> {
        self.g.iter().map(|g| spectral_rkhs_norm(g).expect("truth lies in the truncation")).collect()
    }

    /// `R_{p,f*}`.
    pub fn r_f(&self, p: f64) -> f64 {
        mixed_norm_of(&self.f_norms(), p).expect("p validated by caller")
    }

    /// `R_{p,g*}`.
    pub fn r_g(&self, p: f64) -> f64 {
        mixed_norm_of(&self.g_norms(), p).expect("p validated by caller")
    }

    /// `f*(x)` for one design row.
    pub fn eval_row(&self, row: &[f64]) -> f64 {
        self.active.iter().map(|&m| self.f[m].eval(row[m])).sum()
    }

    /// Largest `|f*|` bound available cheaply: `Σ_m Σ_k |b_k| √2`.
    pub fn sup_bound(&self) -> f64 {
        self.active
            .iter()
            .map(|&m| self.f[m].coeffs().iter().map(|b| b.abs()).sum::<f64>() * std::f64::consts::SQRT_2)
            .sum()
    }
}

/// Additive noise law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Noise {
    None,
    /// Uniform on `[−L, L]`.
    Bounded { radius: f64 },
    Gaussian { sigma: f64 },
}

impl Noise {
    fn validate(&self) -> Result<()> {
        match *self {
            Noise::None => Ok(()),
            Noise::Bounded { radius } if radius > 0.0 && radius.is_finite() => Ok(()),
            Noise::Gaussian { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            other => Err(MklError::input(format!("invalid noise specification {other:?}"))),
        }
    }
}

/// `n` observations of the `M`-coordinate design with responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × M`, entry `(i, m) = x_i^{(m)}`.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(MklError::input(format!("{} design rows but {} responses", x.nrows(), y.len())));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(MklError::input("dataset must have at least one row and one column"));
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MklError::input(format!("design entry {v} outside [0, 1]")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MklError::input("non-finite response"));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn blocks(&self) -> usize {
        self.x.ncols()
    }

    /// Column `m` of the design: the anchors of block `m`.
    pub fn column(&self, m: usize) -> Vec<f64> {
        self.x.column(m).iter().copied().collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Rows `range` as a new dataset.
    pub fn rows(&self, start: usize, len: usize) -> Dataset {
        Dataset { x: self.x.rows(start, len).into_owned(), y: self.y.rows(start, len).into_owned() }
    }

    /// Write `x_1..x_M,y` with full round-trip precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.blocks()).map(|m| format!("x_{m}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 2 || &header[cols - 1] != "y" {
            return Err(MklError::input("CSV must have columns x_1..x_M,y"));
        }
        let mut data = Vec::new();
        let mut y = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..cols {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| MklError::input(format!("unparsable value {:?}", &rec[j])))?;
                if j + 1 == cols {
                    y.push(v);
                } else {
                    data.push(v);
                }
            }
        }
        let n = y.len();
        let x = DMatrix::from_row_slice(n, cols - 1, &data);
        Dataset::new(x, DVector::from_vec(y))
    }
}

/// Sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub truth: TruthSpec,
    pub n: usize,
    pub noise: Noise,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Draw `n` rows of the product design and noisy responses. Pure in `seed`.
pub fn sample_dataset(truth: &GroundTruth, n: usize, noise: Noise, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(MklError::input("n must be at least 1"));
    }
    noise.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = truth.blocks();
    let mut x = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            x[(i, j)] = rng.random::<f64>();
        }
    }
    let mut y = DVector::zeros(n);
    let gauss = match noise {
        Noise::Gaussian { sigma } => Some(Normal::new(0.0, sigma).map_err(|e| MklError::input(e.to_string()))?),
        _ => None,
    };
    let mut row = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            row[j] = x[(i, j)];
        }
        let eps = match noise {
            Noise::None => 0.0,
            Noise::Bounded { radius } => rng.random_range(-radius..=radius),
            Noise::Gaussian { .. } => gauss.as_ref().map(|g| g.sample(&mut rng)).unwrap_or(0.0),
        };
        y[i] = truth.eval_row(&row) + eps;
    }
    Ok(Dataset { x, y })
}

/// `‖f̂ − f*‖²_{L2(Π)} = Σ_m ‖f̂_m − f*_m‖²_{L2(Q)}`, exact under the product design.
///
/// `blocks` must hold one function per block index `0..M` (any order).
pub fn exact_l2_error(blocks: &[BlockFunction], truth: &GroundTruth) -> Result<f64> {
    if blocks.len() != truth.blocks() {
        return Err(MklError::input(format!(
            "{} model blocks for a truth with M = {}",
            blocks.len(),
            truth.blocks()
        )));
    }
    let mut seen = vec![false; truth.blocks()];
    let mut total = 0.0;
    for b in blocks {
        if b.block >= truth.blocks() || std::mem::replace(&mut seen[b.block], true) {
            return Err(MklError::input(format!("block index {} missing or repeated", b.block)));
        }
        let s = b.to_spectral()?;
        if s.kernel() != truth.kernel() {
            return Err(MklError::input(format!("block {} uses a different kernel than the truth", b.block)));
        }
        total += l2_norm(&s.sub(truth.f(b.block))?).powi(2);
    }
    Ok(total)
}

/// Joint law of one design row.
pub trait Design: Send + Sync {
    fn dim(&self) -> usize;
    fn sample_row(&self, rng: &mut ChaCha20Rng, out: &mut [f64]);
    /// Iid uniform coordinates, for which the exact error path applies.
    fn is_product(&self) -> bool {
        false
    }
}

/// Iid `Uniform[0, 1]` coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ProductDesign {
    pub dim: usize,
}

impl Design for ProductDesign {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_row(&self, rng: &mut ChaCha20Rng, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = rng.random();
        }
    }

    fn is_product(&self) -> bool {
        true
    }
}

/// Gaussian copula with equicorrelation `r`, uniform marginals.
#[derive(Debug, Clone, Copy)]
pub struct EquicorrelatedDesign {
    pub dim: usize,
    pub correlation: f64,
}

impl EquicorrelatedDesign {
    pub fn new(dim: usize, correlation: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&correlation) {
            return Err(MklError::input(format!("correlation {correlation} outside [0, 1)")));
        }
        Ok(EquicorrelatedDesign { dim, correlation })
    }
}

impl Design for EquicorrelatedDesign {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_row(&self, rng: &mut ChaCha20Rng, out: &mut [f64]) {
        let shared: f64 = rng.sample(StandardNormal);
        let (a, b) = (self.correlation.sqrt(), (1.0 - self.correlation).sqrt());
        for v in out.iter_mut() {
            let own: f64 = rng.sample(StandardNormal);
            *v = normal_cdf(a * shared + b * own).clamp(0.0, 1.0);
        }
    }
}

/// Block `m` reads coordinate `source[m]` of an iid uniform vector; repeated
/// sources make blocks share a coordinate.
#[derive(Debug, Clone)]
pub struct DuplicatedDesign {
    pub source: Vec<usize>,
}

impl Design for DuplicatedDesign {
    fn dim(&self) -> usize {
        self.source.len()
    }

    fn sample_row(&self, rng: &mut ChaCha20Rng, out: &mut [f64]) {
        let width = self.source.iter().copied().max().map_or(0, |v| v + 1);
        let base: Vec<f64> = (0..width).map(|_| rng.random()).collect();
        for (v, &s) in out.iter_mut().zip(&self.source) {
            *v = base[s];
        }
    }
}

/// Standard normal CDF via the complementary error function.
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Monte Carlo `E[(f̂ − f*)²]` with its standard error under an arbitrary design,
/// for designs where [`exact_l2_error`] does not apply.
pub fn monte_carlo_l2_error(
    blocks: &[BlockFunction],
    truth: &GroundTruth,
    design: &dyn Design,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if design.dim() != truth.blocks() || samples < 2 {
        return Err(MklError::input("design dimension must equal M and samples ≥ 2"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut row = vec![0.0; design.dim()];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        design.sample_row(&mut rng, &mut row);
        let fhat: f64 = blocks.iter().map(|b| b.eval(row[b.block])).sum();
        let e = (fhat - truth.eval_row(&row)).powi(2);
        s1 += e;
        s2 += e * e;
    }
    let n = samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
