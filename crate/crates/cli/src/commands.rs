use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mklnet::data::{make_truth, sample_dataset, Dataset, DatasetMeta, DuplicatedDesign, EquicorrelatedDesign, GroundTruth, ProductDesign, TruthSpec, Design};
use mklnet::geometry::{geometry_analytic_product, geometry_spectral_mc, lemma2_diagnostic, theorem_constants};
use mklnet::kernel::{AnyKernel, KernelSpec, SpectralKernel};
use mklnet::rates::{d_sweep, preconditions, run_rate_sweep, schedule, ScheduleInputs, SweepConfig};
use mklnet::selection::{build_grid, select, ClipSpec, GridMode};
use mklnet::solver::{fit, objective, MklModel, RegParams};
use mklnet::exact_l2_error;
use serde::Serialize;

use crate::config::*;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Output directory plus the primary file, honouring `--out file.ext`.
pub struct Outputs {
    pub dir: PathBuf,
    pub primary: PathBuf,
}

impl Outputs {
    pub fn new(out: Option<&Path>, default_name: &str) -> Result<Self> {
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("mklnet-out"));
        let (dir, primary) = if out.extension().is_some() {
            let dir = out.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| ".".into());
            (dir, out)
        } else {
            (out.clone(), out.join(default_name))
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir, primary })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest(&self, command: &str, seed: u64, config: &impl Serialize) -> Result<()> {
        let m = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config)?,
        };
        write_json(&self.file("manifest.json"), &m)
    }

    /// Refuses to overwrite any of the command's inputs.
    pub fn guard(&self, inputs: &[&Path]) -> Result<()> {
        for p in inputs {
            if let (Ok(a), Ok(b)) = (p.canonicalize(), self.primary.canonicalize()) {
                if a == b {
                    bail!("output {} would overwrite an input", self.primary.display());
                }
            }
        }
        Ok(())
    }
}

fn truth_spec(blocks: usize, d: usize, q: f64, s: f64, k: usize, cfg_profile: &mklnet::Profile, support: Option<usize>, permute: bool, seed: u64) -> TruthSpec {
    let mut t = TruthSpec::new(blocks, d, q, cfg_profile.clone(), seed);
    t.kernel = KernelSpec::new(s, k);
    t.support = support;
    t.permute = permute;
    t
}

pub fn gen_data(cfg: &GenDataConfig, seed: u64, out: &Outputs) -> Result<()> {
    let spec = truth_spec(cfg.blocks, cfg.d, cfg.q, cfg.s, cfg.truncation, &cfg.profile, cfg.support, cfg.permute, seed);
    let truth = make_truth(&spec)?;
    let data_seed = seed.wrapping_add(1);
    let data = sample_dataset(&truth, cfg.n, cfg.noise, data_seed)?;
    data.write_csv(&out.primary)?;
    let meta = DatasetMeta { truth: spec, n: cfg.n, noise: cfg.noise, seed: data_seed };
    meta.write(&default_meta_path(&out.primary))?;
    Ok(())
}

struct Loaded {
    data: Dataset,
    meta: Option<DatasetMeta>,
    truth: Option<GroundTruth>,
}

fn load_data(data: &Path, meta: Option<&Path>, need_meta: bool) -> Result<Loaded> {
    let dataset = Dataset::read_csv(data).with_context(|| format!("reading {}", data.display()))?;
    let meta_path = meta.map(Path::to_path_buf).unwrap_or_else(|| default_meta_path(data));
    let meta = if meta_path.exists() {
        Some(DatasetMeta::read(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?)
    } else if meta.is_some() || need_meta {
        bail!("generation metadata {} not found", meta_path.display());
    } else {
        None
    };
    if let Some(m) = &meta {
        if m.truth.blocks != dataset.blocks() {
            bail!("metadata describes M = {} but the data has {} columns", m.truth.blocks, dataset.blocks());
        }
    }
    let truth = meta.as_ref().map(|m| make_truth(&m.truth)).transpose()?;
    Ok(Loaded { data: dataset, meta, truth })
}

fn kernels_for(spec: Option<&KernelSpec>, meta: Option<&DatasetMeta>, blocks: usize) -> Result<Vec<AnyKernel>> {
    let spec = spec.cloned().or_else(|| meta.map(|m| m.truth.kernel.clone())).unwrap_or_default();
    let k: AnyKernel = SpectralKernel::from_spec(&spec)?.into();
    Ok(vec![k; blocks])
}

fn scheduled(truth: &GroundTruth, n: usize, branch: mklnet::Branch, t: f64, psi: f64) -> Result<(ScheduleInputs, mklnet::rates::Schedule)> {
    let inputs = ScheduleInputs {
        n,
        m: truth.blocks(),
        d: truth.d().max(1),
        s: truth.kernel().s(),
        q: truth.q(),
        r2g: Some(truth.r_g(2.0)),
        r1f: Some(truth.r_f(1.0)),
        t,
        psi,
    };
    let sched = schedule(&inputs, branch)?;
    Ok((inputs, sched))
}

#[derive(Serialize)]
struct FitSummary {
    params: RegParams,
    objective: f64,
    recomputed_objective: f64,
    converged: bool,
    sweeps: usize,
    kkt_residual: f64,
    active: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_l2_error: Option<f64>,
}

pub fn fit_cmd(cfg: &FitConfig, out: &Outputs) -> Result<()> {
    out.guard(&[&cfg.data])?;
    let loaded = load_data(&cfg.data, cfg.meta.as_deref(), false)?;
    let kernels = kernels_for(cfg.kernel.as_ref(), loaded.meta.as_ref(), loaded.data.blocks())?;
    let params = match (cfg.lambda1, cfg.lambda2, cfg.lambda3) {
        (Some(a), Some(b), Some(c)) => RegParams::new(a, b, c)?,
        (None, None, None) => {
            let branch = cfg.branch.context("give --branch or all of --lambda1/--lambda2/--lambda3")?;
            let truth = loaded.truth.as_ref().context("the theorem schedule needs the generation metadata")?;
            scheduled(truth, loaded.data.n(), branch, cfg.t, cfg.psi)?.1.params
        }
        _ => bail!("give all three of --lambda1/--lambda2/--lambda3 or none"),
    };
    let model = fit(&loaded.data, &kernels, &params, &cfg.options, None)?;
    let summary = FitSummary {
        params,
        objective: model.objective,
        recomputed_objective: objective(&model, &loaded.data, &params)?,
        converged: model.converged,
        sweeps: model.sweeps,
        kkt_residual: model.kkt_residual,
        active: model.active.clone(),
        exact_l2_error: match &loaded.truth {
            Some(t) => Some(exact_l2_error(&model.block_functions()?, t)?),
            None => None,
        },
    };
    write_json(&out.primary, &model)?;
    write_json(&out.file("fit.json"), &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct Chosen {
    index: usize,
    params: RegParams,
    clip_bound: f64,
    candidates: usize,
}

pub fn select_cmd(cfg: &SelectConfig, out: &Outputs) -> Result<()> {
    out.guard(&[&cfg.data])?;
    let loaded = load_data(&cfg.data, cfg.meta.as_deref(), false)?;
    let kernels = kernels_for(cfg.kernel.as_ref(), loaded.meta.as_ref(), loaded.data.blocks())?;
    let mode = match cfg.mode.as_str() {
        "exact" => GridMode::PaperExact,
        "subsampled" => GridMode::LogSubsampled { budget: cfg.budget },
        other => bail!("unknown grid mode {other:?} (exact or subsampled)"),
    };
    let grid = build_grid(loaded.data.n(), mode)?;
    let clip = ClipSpec { bound: cfg.clip_bound, margin: cfg.margin };
    let sel = select(&loaded.data, &kernels, &grid, &clip, &cfg.options, loaded.truth.as_ref())?;

    let mut w = csv::Writer::from_path(&out.primary)?;
    w.write_record(["lambda1", "lambda2", "lambda3", "validation_mse", "exact_l2_error", "converged"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &sel.table {
        w.write_record([
            row.lambda1.to_string(),
            row.lambda2.to_string(),
            row.lambda3.to_string(),
            opt(row.validation_mse),
            opt(row.exact_l2_error),
            row.converged.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        &out.file("chosen.json"),
        &Chosen { index: sel.index, params: sel.chosen, clip_bound: sel.model.bound, candidates: grid.len() },
    )?;
    write_json(&out.file("model.json"), &sel.model)?;
    Ok(())
}

fn design(spec: &DesignSpec, blocks: usize) -> Result<Box<dyn Design>> {
    let d: Box<dyn Design> = match spec {
        DesignSpec::Product => Box::new(ProductDesign { dim: blocks }),
        DesignSpec::Equicorrelated { correlation } => Box::new(EquicorrelatedDesign::new(blocks, *correlation)?),
        DesignSpec::Duplicated { source } => {
            if source.len() != blocks {
                bail!("duplicated design lists {} sources for M = {blocks}", source.len());
            }
            Box::new(DuplicatedDesign { source: source.clone() })
        }
    };
    Ok(d)
}

#[derive(Serialize)]
struct GeometryOutput {
    report: mklnet::GeometryReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    constants: Option<mklnet::geometry::TheoremConstants>,
}

pub fn geometry_cmd(cfg: &GeometryConfig, seed: u64, out: &Outputs) -> Result<()> {
    let design = design(&cfg.design, cfg.blocks)?;
    let report = match cfg.method.as_str() {
        "analytic" => geometry_analytic_product(&cfg.index_set, design.as_ref())?,
        "mc" => {
            let k = SpectralKernel::new(cfg.s, cfg.truncation)?;
            geometry_spectral_mc(&vec![k; cfg.blocks], &cfg.index_set, design.as_ref(), cfg.k_trunc, cfg.n_mc, seed)?
        }
        other => bail!("unknown geometry method {other:?} (analytic or mc)"),
    };
    let constants = match &cfg.meta {
        Some(p) => {
            let meta = DatasetMeta::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(theorem_constants(&make_truth(&meta.truth)?, cfg.h.as_deref())?)
        }
        None => None,
    };
    write_json(&out.primary, &GeometryOutput { report, constants })
}

pub fn rates_cmd(cfg: &RatesConfig, seed: u64, out: &Outputs) -> Result<Vec<String>> {
    let spec = truth_spec(cfg.blocks, cfg.d, cfg.q, cfg.s, cfg.truncation, &cfg.profile, cfg.support, false, seed);
    let sweep = SweepConfig {
        truth: spec,
        n_grid: cfg.n_grid.clone(),
        d_grid: cfg.d_grid.clone(),
        seeds: cfg.seeds,
        branches: cfg.branch.clone(),
        noise: cfg.noise,
        t: cfg.t,
        psi: cfg.psi,
        lambda_scale: cfg.lambda_scale,
        base_seed: seed,
        fit: cfg.options,
    };
    let reports = if cfg.d_grid.is_empty() { run_rate_sweep(&sweep)? } else { d_sweep(&sweep)? };
    let mut w = csv::Writer::from_path(&out.primary)?;
    w.write_record(["n", "d", "mean_err", "se", "branch", "slope", "theory_exponent"])?;
    let mut warnings = Vec::new();
    for r in &reports {
        for p in &r.points {
            w.write_record([
                p.n.to_string(),
                p.d.to_string(),
                p.mean_err.to_string(),
                p.se.to_string(),
                r.branch.to_string(),
                r.slope.to_string(),
                r.theory_exponent.to_string(),
            ])?;
        }
        warnings.extend(r.warnings.iter().cloned());
    }
    w.flush()?;
    write_json(&out.file("report.json"), &reports)?;
    Ok(warnings)
}

#[derive(Serialize)]
struct Diagnosis {
    lemma2: mklnet::geometry::DiagnosticsReport,
    exact_l2_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    preconditions: Option<mklnet::rates::Preconditions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    constants: Option<mklnet::geometry::TheoremConstants>,
    converged: bool,
}

pub fn diagnose_cmd(cfg: &DiagnoseConfig, out: &Outputs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&cfg.data];
    if let Some(m) = &cfg.model {
        inputs.push(m);
    }
    out.guard(&inputs)?;
    let loaded = load_data(&cfg.data, cfg.meta.as_deref(), true)?;
    let truth = loaded.truth.as_ref().expect("metadata required above");
    let (model, pre) = match &cfg.model {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut model: MklModel = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            model.attach_anchors(&loaded.data)?;
            (model, None)
        }
        None => {
            let (inputs, sched) = scheduled(truth, loaded.data.n(), cfg.branch, cfg.t, cfg.psi)?;
            let kernels = kernels_for(None, loaded.meta.as_ref(), loaded.data.blocks())?;
            let model = fit(&loaded.data, &kernels, &sched.params, &cfg.options, None)?;
            (model, Some(preconditions(&inputs, &sched, 1.0)))
        }
    };
    let diagnosis = Diagnosis {
        lemma2: lemma2_diagnostic(&model, truth)?,
        exact_l2_error: exact_l2_error(&model.block_functions()?, truth)?,
        preconditions: pre,
        constants: theorem_constants(truth, None).ok(),
        converged: model.converged,
    };
    write_json(&out.primary, &diagnosis)
}
