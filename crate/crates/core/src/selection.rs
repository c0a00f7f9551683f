//! Half-split validation over a grid of regularization triples, with the
//! clipped estimator `f̄ = clip(f̂, B)`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{exact_l2_error, Dataset, GroundTruth};
use crate::error::{MklError, Result};
use crate::kernel::AnyKernel;
use crate::solver::{fit_prepared, FitOptions, MklModel, PreparedBlocks, RegParams};

/// Largest `n` for which the full `Γ_n` product is enumerated.
pub const PAPER_EXACT_MAX_N: usize = 8;
pub const DEFAULT_BUDGET: usize = 8;

/// First `⌊n/2⌋` rows for training, the rest for validation.
pub fn split(data: &Dataset) -> Result<(Dataset, Dataset)> {
    let n = data.n();
    if n < 2 {
        return Err(MklError::input(format!("cannot split {n} sample(s)")));
    }
    let half = n / 2;
    Ok((data.rows(0, half), data.rows(half, n - half)))
}

pub fn clip(value: f64, bound: f64) -> f64 {
    debug_assert!(bound > 0.0);
    if value >= bound {
        bound
    } else if value <= -bound {
        -bound
    } else {
        value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum GridMode {
    PaperExact,
    LogSubsampled { budget: usize },
}

/// Candidate triples for both branches, in construction order: the elastic
/// branch `(λ1, λ1√λ3, λ3)` then the L1 branch `(λ1, λ1√λ, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub mode: GridMode,
    pub n: usize,
    /// `Γ_n` or its log-spaced subsample.
    pub gamma: Vec<f64>,
    pub candidates: Vec<RegParams>,
}

impl ParamGrid {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// A grid with explicit candidates (e.g. a single triple).
    pub fn explicit(n: usize, candidates: Vec<RegParams>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(MklError::input("empty parameter grid"));
        }
        for c in &candidates {
            c.validate()?;
        }
        Ok(ParamGrid { mode: GridMode::LogSubsampled { budget: 0 }, n, gamma: Vec::new(), candidates })
    }
}

pub fn build_grid(n: usize, mode: GridMode) -> Result<ParamGrid> {
    if n < 2 {
        return Err(MklError::input("grid needs n ≥ 2"));
    }
    let n2 = (n * n) as f64;
    let gamma: Vec<f64> = match mode {
        GridMode::PaperExact => {
            if n > PAPER_EXACT_MAX_N {
                return Err(MklError::input(format!(
                    "paper-exact grid has {} triples per branch at n = {n}; only n ≤ {PAPER_EXACT_MAX_N} is allowed, use log-subsampled mode",
                    n * n * n * n
                )));
            }
            (1..=n * n).map(|k| k as f64 / n2).collect()
        }
        GridMode::LogSubsampled { budget } => {
            if budget < 4 {
                return Err(MklError::input(format!("budget {budget} below 4")));
            }
            let lo = -n2.ln();
            (0..budget)
                .map(|i| {
                    if i == 0 {
                        1.0 / n2
                    } else if i + 1 == budget {
                        1.0
                    } else {
                        (lo * (1.0 - i as f64 / (budget - 1) as f64)).exp()
                    }
                })
                .collect()
        }
    };
    let mut candidates = Vec::with_capacity(2 * gamma.len() * gamma.len());
    for &l1 in &gamma {
        for &l3 in &gamma {
            candidates.push(RegParams { lambda1: l1, lambda2: l1 * l3.sqrt(), lambda3: l3 });
        }
    }
    for &l1 in &gamma {
        for &lam in &gamma {
            candidates.push(RegParams { lambda1: l1, lambda2: l1 * lam.sqrt(), lambda3: 0.0 });
        }
    }
    Ok(ParamGrid { mode, n, gamma, candidates })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    /// Fixed bound; `None` picks `(1 + margin) · max|y|`.
    pub bound: Option<f64>,
    pub margin: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec { bound: None, margin: 0.1 }
    }
}

impl ClipSpec {
    pub fn fixed(bound: f64) -> Self {
        ClipSpec { bound: Some(bound), margin: 0.1 }
    }

    pub fn resolve(&self, y: &DVector<f64>) -> Result<f64> {
        if !(self.margin >= 0.0) {
            return Err(MklError::input("clip margin must be nonnegative"));
        }
        let b = match self.bound {
            Some(b) => b,
            None => (1.0 + self.margin) * y.amax(),
        };
        if !(b > 0.0 && b.is_finite()) {
            return Err(MklError::input(format!("clip bound {b} must be positive (all-zero responses need a fixed B)")));
        }
        Ok(b)
    }
}

/// `f̂` with predictions clipped to `[−B, B]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClippedModel {
    pub model: MklModel,
    pub bound: f64,
}

impl ClippedModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.model.predict(x)?.map(|v| clip(v, self.bound)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub validation_mse: Option<f64>,
    /// `‖f̂ − f*‖²_{L2}` of the unclipped fit, when the truth is known.
    pub exact_l2_error: Option<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub chosen: RegParams,
    pub index: usize,
    pub model: ClippedModel,
    /// One row per grid candidate, in grid order.
    pub table: Vec<ValidationRow>,
}

fn tie_key(a: &RegParams, b: &RegParams) -> Ordering {
    a.lambda1
        .total_cmp(&b.lambda1)
        .then(a.lambda3.total_cmp(&b.lambda3))
        .then(a.lambda2.total_cmp(&b.lambda2))
}

/// Fits every candidate on the training half and keeps the one with the
/// smallest clipped validation error (ties: smallest `(λ1, λ3, λ2)`).
pub fn select(
    data: &Dataset,
    kernels: &[AnyKernel],
    grid: &ParamGrid,
    clip_spec: &ClipSpec,
    opts: &FitOptions,
    truth: Option<&GroundTruth>,
) -> Result<Selection> {
    if grid.is_empty() {
        return Err(MklError::input("empty parameter grid"));
    }
    let (train, valid) = split(data)?;
    let bound = clip_spec.resolve(&data.y)?;
    let prep = PreparedBlocks::new(&train, kernels)?;

    let results: Vec<(ValidationRow, Option<MklModel>)> = grid
        .candidates
        .par_iter()
        .map(|p| {
            let mut row = ValidationRow {
                lambda1: p.lambda1,
                lambda2: p.lambda2,
                lambda3: p.lambda3,
                validation_mse: None,
                exact_l2_error: None,
                converged: false,
                failure: None,
            };
            let outcome = fit_prepared(&prep, &train.y, p, opts, None).and_then(|model| {
                let clipped = ClippedModel { model, bound };
                let pred = clipped.predict(&valid.x)?;
                let mse = (pred - &valid.y).norm_squared() / valid.n() as f64;
                let exact = match truth {
                    Some(t) => Some(exact_l2_error(&clipped.model.block_functions()?, t)?),
                    None => None,
                };
                Ok((clipped.model, mse, exact))
            });
            match outcome {
                Ok((model, mse, exact)) => {
                    row.validation_mse = Some(mse);
                    row.exact_l2_error = exact;
                    row.converged = model.converged;
                    (row, Some(model))
                }
                Err(e) => {
                    row.failure = Some(e.to_string());
                    (row, None)
                }
            }
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, (row, _)) in results.iter().enumerate() {
        let Some(mse) = row.validation_mse else { continue };
        best = match best {
            None => Some(i),
            Some(j) => {
                let other = results[j].0.validation_mse.expect("best has a score");
                let better = mse < other
                    || (mse == other && tie_key(&grid.candidates[i], &grid.candidates[j]) == Ordering::Less);
                Some(if better { i } else { j })
            }
        };
    }
    let Some(index) = best else {
        let failures = results
            .iter()
            .zip(&grid.candidates)
            .map(|((row, _), p)| {
                (format!("{:?}", p), row.failure.clone().unwrap_or_default())
            })
            .collect();
        return Err(MklError::Selection { failures });
    };
    let (table, mut models): (Vec<ValidationRow>, Vec<Option<MklModel>>) = results.into_iter().unzip();
    let model = models[index].take().expect("chosen fit succeeded");
    Ok(Selection { chosen: grid.candidates[index], index, model: ClippedModel { model, bound }, table })
}
