//! Elastic-net and L1 multiple kernel learning on additive models over `[0, 1]^M`.
//!
//! The crate is organised around the estimator
//!
//! ```text
//! min (1/n)‖y − Σ_m f_m(x^{(m)})‖² + Σ_m λ1‖f_m‖_n + λ2‖f_m‖_H + λ3‖f_m‖²_H
//! ```
//!
//! solved by block coordinate descent ([`solver`]), together with the synthetic
//! product-design experiments used to check its convergence rates.

pub mod data;
pub mod error;
pub mod function;
pub mod geometry;
pub mod kernel;
pub mod rates;
pub mod selection;
pub mod solver;

pub use error::{MklError, Result};
pub use function::{BlockFunction, BlockRepr, KernelExpansion, SpectralFunction};
pub use kernel::{
    eigensystem, eval_kernel, factored_eigensystem, gram, AnyKernel, Basis, EigenSystem, GaussianKernel,
    GramMatrix, Kernel, KernelSpec, SpectralKernel,
};
pub use data::{exact_l2_error, make_truth, sample_dataset, Dataset, GroundTruth, Noise, Profile, TruthSpec};
pub use solver::{fit, fit_prepared, l1_fit, objective, FitOptions, MklModel, PreparedBlocks, RegParams};
pub use rates::{schedule, Branch, RateReport, ScheduleInputs, SweepConfig};
pub use selection::{build_grid, clip, select, split, ClipSpec, GridMode, ParamGrid, Selection};
pub use geometry::{geometry_analytic_product, geometry_spectral_mc, theorem_constants, GeometryReport};
