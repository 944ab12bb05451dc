//! Sequential reconstruction with learned priors.
//!
//! The first two frames are reconstructed without a prior, refined by the
//! refinement model and then solved with those refined frames as priors. Every
//! later frame is solved with the prediction model's output on the previous
//! reconstructions as its prior.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tcr_nn::{par, ParamStore};

use crate::error::{CoreError, Result};
use crate::frames::{FrameSequence, Sinogram};
use crate::geometry::{norm, LinearOperator, NormedOperator, OperatorCache};
use crate::metrics::{psnr, ssim, MetricRow, Scope};
use crate::stt::{predict_next, refine, SttConfig};
use crate::train::load_model;
use crate::varsolve::{l1_tcr_fista, l1_tv_tcr_pdhg, l2_tcr, landweber, IterOptions, SolveReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    L2,
    L1,
    L1Tv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub solver: SolverKind,
    /// Prior weight for the two refined frames.
    pub alpha_init: f64,
    /// Prior weight for every predicted frame.
    pub alpha_rest: f64,
    #[serde(default)]
    pub beta_init: f64,
    #[serde(default)]
    pub beta_rest: f64,
    pub l2_max_iter: usize,
    pub l1_max_iter: usize,
    pub pdhg_max_iter: usize,
    pub landweber_max_iter: usize,
    /// TV weight for the two initial reconstructions; plain Landweber when absent.
    #[serde(default)]
    pub initial_tv: Option<f64>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            solver: SolverKind::L1,
            alpha_init: 0.1,
            alpha_rest: 0.1,
            beta_init: 0.0,
            beta_rest: 0.0,
            l2_max_iter: IterOptions::l2().max_iter,
            l1_max_iter: IterOptions::fista().max_iter,
            pdhg_max_iter: IterOptions::pdhg().max_iter,
            landweber_max_iter: IterOptions::l2().max_iter,
            initial_tv: None,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_init, self.alpha_rest, self.beta_init, self.beta_rest, self.initial_tv.unwrap_or(0.0)];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(CoreError::Config(format!("recon: regularisation weights must be finite and ≥ 0, got {weights:?}")));
        }
        if [self.l2_max_iter, self.l1_max_iter, self.pdhg_max_iter, self.landweber_max_iter].contains(&0) {
            return Err(CoreError::Config("recon: iteration caps must be ≥ 1".into()));
        }
        Ok(())
    }

    fn weights(&self, t: usize) -> (f64, f64) {
        if t < 2 {
            (self.alpha_init, self.beta_init)
        } else {
            (self.alpha_rest, self.beta_rest)
        }
    }
}

/// A trained model with its architecture.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamStore,
    pub config: SttConfig,
}

impl Model {
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, config, _) = load_model(dir)?;
        Ok(Model { params, config })
    }
}

/// Refinement and prediction models used by the reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct Priors<'a> {
    pub refine: &'a Model,
    pub predict: &'a Model,
}

impl Priors<'_> {
    fn image_size(&self) -> Result<usize> {
        let (a, b) = (self.refine.config.image_size, self.predict.config.image_size);
        if a != b {
            return Err(CoreError::Config(format!("refinement model is {a}px but prediction model is {b}px")));
        }
        Ok(a)
    }
}

/// Sinogram steps a produced frame depends on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Time step the value belongs to.
    pub step: usize,
    pub output: String,
    pub sinogram_deps: BTreeSet<usize>,
}

/// True when no value depends on data from a later time step.
pub fn audit_is_causal(events: &[AuditEvent]) -> bool {
    events.iter().all(|e| e.sinogram_deps.iter().all(|&s| s <= e.step))
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub reconstructions: FrameSequence,
    /// Prior used at every step: refined frames for steps 0 and 1, predictions afterwards.
    pub priors: FrameSequence,
    /// Prior-free reconstructions of steps 0 and 1 fed to the refinement model.
    pub initial: FrameSequence,
    pub reports: Vec<SolveReport>,
    /// `‖A_t x_t − ψ_t‖` of the reconstructions.
    pub discrepancy: Vec<f64>,
    /// `‖A_t p_t − ψ_t‖` of the priors.
    pub prior_discrepancy: Vec<f64>,
    pub audit: Vec<AuditEvent>,
}

fn data_misfit(op: &dyn LinearOperator, x: &[f64], psi: &[f64]) -> f64 {
    let ax = op.apply(x);
    norm(&ax.iter().zip(psi).map(|(a, b)| a - b).collect::<Vec<_>>())
}

fn at_step(t: usize) -> impl Fn(CoreError) -> CoreError {
    move |e| match e {
        CoreError::Numerical { module, msg, .. } => CoreError::Numerical {
            module,
            step: t,
            msg: format!("time step {t}: {msg}"),
        },
        other => other,
    }
}

/// Solves step `t` against `prior`. The iteration starts at the prior when it has
/// weight and at zero otherwise, so a zero weight reproduces the prior-free solver.
fn solve_step(cfg: &ReconConfig, t: usize, op: &NormedOperator, psi: &[f64], prior: &[f64]) -> Result<(Vec<f64>, SolveReport)> {
    let (alpha, beta) = cfg.weights(t);
    let x0 = if alpha > 0.0 { prior.to_vec() } else { vec![0.0; prior.len()] };
    let out = match cfg.solver {
        SolverKind::L2 => l2_tcr(&op.op, psi, prior, alpha, &x0, &IterOptions::l2().with_norm(op.norm).with_max_iter(cfg.l2_max_iter)),
        SolverKind::L1 => l1_tcr_fista(&op.op, psi, prior, alpha, &x0, &IterOptions::fista().with_norm(op.norm).with_max_iter(cfg.l1_max_iter)),
        SolverKind::L1Tv => {
            let opts = IterOptions::pdhg().with_norm(op.norm_with_gradient()).with_max_iter(cfg.pdhg_max_iter);
            l1_tv_tcr_pdhg(&op.op, psi, prior, alpha, beta, &x0, &opts)
        }
    };
    out.map_err(at_step(t))
}

fn initial_recon(cfg: &ReconConfig, t: usize, op: &NormedOperator, psi: &[f64]) -> Result<Vec<f64>> {
    let out = match cfg.initial_tv {
        None => landweber(&op.op, psi, &IterOptions::l2().with_norm(op.norm).with_max_iter(cfg.landweber_max_iter)),
        Some(beta) => {
            let zero = vec![0.0; op.op.domain_len()];
            let opts = IterOptions::pdhg().with_norm(op.norm_with_gradient()).with_max_iter(cfg.pdhg_max_iter);
            l1_tv_tcr_pdhg(&op.op, psi, &zero, 0.0, beta, &zero, &opts)
        }
    };
    Ok(out.map_err(at_step(t))?.0)
}

/// State after the two refined frames have been solved.
#[derive(Clone, Debug)]
struct Partial {
    recon: Vec<Vec<f64>>,
    priors: Vec<Vec<f64>>,
    initial: Vec<Vec<f64>>,
    reports: Vec<SolveReport>,
    discrepancy: Vec<f64>,
    prior_discrepancy: Vec<f64>,
    audit: Vec<AuditEvent>,
    deps: Vec<BTreeSet<usize>>,
}

fn check_inputs(sino: &Sinogram, models: &Priors, cfg: &ReconConfig) -> Result<usize> {
    cfg.validate()?;
    sino.validate()?;
    if sino.n_steps() < 2 {
        return Err(CoreError::input("tcr_reconstruct", format!("need at least 2 time steps, got {}", sino.n_steps())));
    }
    let size = models.image_size()?;
    if sino.n_steps() > models.predict.config.max_context {
        return Err(CoreError::Config(format!(
            "{} time steps exceed the prediction model's context of {}",
            sino.n_steps(),
            models.predict.config.max_context
        )));
    }
    Ok(size)
}

fn operators(sino: &Sinogram, size: usize, cache: &OperatorCache) -> Result<Vec<std::sync::Arc<NormedOperator>>> {
    sino.steps.iter().map(|s| cache.get(size, &s.angles, &sino.offsets)).collect()
}

fn initial_phase(sino: &Sinogram, models: &Priors, cfg: &ReconConfig, ops: &[std::sync::Arc<NormedOperator>], size: usize) -> Result<Partial> {
    let mut audit = Vec::new();
    let initial = (0..2)
        .map(|t| {
            audit.push(AuditEvent { step: t, output: format!("initial[{t}]"), sinogram_deps: BTreeSet::from([t]) });
            initial_recon(cfg, t, &ops[t], &sino.steps[t].data)
        })
        .collect::<Result<Vec<_>>>()?;
    // the refinement model is causal: output slot k sees input frames 0..=k only
    let refined = refine(&models.refine.params, &models.refine.config, &FrameSequence::new(size, initial.clone())?)?;
    let mut p = Partial {
        recon: Vec::new(),
        priors: Vec::new(),
        initial,
        reports: Vec::new(),
        discrepancy: Vec::new(),
        prior_discrepancy: Vec::new(),
        audit,
        deps: Vec::new(),
    };
    for t in 0..2 {
        let deps: BTreeSet<usize> = (0..=t).collect();
        p.audit.push(AuditEvent { step: t, output: format!("prior[{t}]"), sinogram_deps: deps.clone() });
        let prior = refined.frames[t].clone();
        solve_into(&mut p, cfg, t, &ops[t], &sino.steps[t].data, prior, deps)?;
    }
    Ok(p)
}

fn solve_into(p: &mut Partial, cfg: &ReconConfig, t: usize, op: &NormedOperator, psi: &[f64], prior: Vec<f64>, prior_deps: BTreeSet<usize>) -> Result<()> {
    let (x, report) = solve_step(cfg, t, op, psi, &prior)?;
    let mut deps = prior_deps;
    deps.insert(t);
    p.audit.push(AuditEvent { step: t, output: format!("reconstruction[{t}]"), sinogram_deps: deps.clone() });
    p.prior_discrepancy.push(data_misfit(&op.op, &prior, psi));
    p.discrepancy.push(data_misfit(&op.op, &x, psi));
    p.recon.push(x);
    p.priors.push(prior);
    p.reports.push(report);
    p.deps.push(deps);
    Ok(())
}

fn continue_phase(mut p: Partial, sino: &Sinogram, models: &Priors, cfg: &ReconConfig, ops: &[std::sync::Arc<NormedOperator>], size: usize) -> Result<ReconResult> {
    for t in 2..sino.n_steps() {
        let history = FrameSequence::new(size, p.recon[..t].to_vec())?;
        let prior = predict_next(&models.predict.params, &models.predict.config, &history).map_err(at_step(t))?;
        let deps: BTreeSet<usize> = p.deps[..t].iter().flatten().copied().collect();
        p.audit.push(AuditEvent { step: t, output: format!("prior[{t}]"), sinogram_deps: deps.clone() });
        solve_into(&mut p, cfg, t, &ops[t], &sino.steps[t].data, prior, deps)?;
    }
    Ok(ReconResult {
        reconstructions: FrameSequence::new(size, p.recon)?,
        priors: FrameSequence::new(size, p.priors)?,
        initial: FrameSequence::new(size, p.initial)?,
        reports: p.reports,
        discrepancy: p.discrepancy,
        prior_discrepancy: p.prior_discrepancy,
        audit: p.audit,
    })
}

/// Reconstructs every time step of `sino` in order.
pub fn tcr_reconstruct(sino: &Sinogram, models: &Priors, cfg: &ReconConfig, cache: &OperatorCache) -> Result<ReconResult> {
    let size = check_inputs(sino, models, cfg)?;
    let ops = operators(sino, size, cache)?;
    let partial = initial_phase(sino, models, cfg, &ops, size)?;
    continue_phase(partial, sino, models, cfg, &ops, size)
}

/// `n_per_decade` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n_per_decade: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n_per_decade == 0 {
        return Err(CoreError::input("log_grid", format!("range [{lo}, {hi}] with {n_per_decade} points per decade")));
    }
    let decades = (hi / lo).log10();
    let n = (decades * n_per_decade as f64).round() as usize;
    Ok((0..=n).map(|k| lo * 10f64.powf(k as f64 / n_per_decade as f64)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSelection {
    pub alpha_init: f64,
    pub alpha_rest: f64,
    pub mse: f64,
    /// `(alpha_init, alpha_rest, mean squared error)` for every grid pair.
    pub table: Vec<(f64, f64, f64)>,
}

fn sequence_mse(a: &FrameSequence, b: &FrameSequence) -> f64 {
    let n = (a.len() * a.pixels()) as f64;
    a.frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Exhaustive search over `grid_init × grid_rest` minimising the mean squared
/// error of whole reconstructed sequences. Ties go to the larger `alpha_rest`,
/// then the larger `alpha_init`.
pub fn select_alphas(
    validation: &[(Sinogram, FrameSequence)],
    models: &Priors,
    cfg: &ReconConfig,
    grid_init: &[f64],
    grid_rest: &[f64],
    cache: &OperatorCache,
) -> Result<AlphaSelection> {
    if grid_init.is_empty() || grid_rest.is_empty() {
        return Err(CoreError::input("select_alphas", "empty grid"));
    }
    if validation.is_empty() {
        return Err(CoreError::input("select_alphas", "empty validation set"));
    }
    // per sample: the initial phase depends on alpha_init only
    let per_sample = par::map_indexed(validation.len(), |i| -> Result<Vec<f64>> {
        let (sino, gt) = &validation[i];
        let size = check_inputs(sino, models, cfg)?;
        if gt.len() != sino.n_steps() || gt.size != size {
            return Err(CoreError::input("select_alphas", format!("sample {i}: ground truth does not match its sinogram")));
        }
        let ops = operators(sino, size, cache)?;
        let mut errs = Vec::with_capacity(grid_init.len() * grid_rest.len());
        for &ai in grid_init {
            let c = ReconConfig { alpha_init: ai, ..cfg.clone() };
            let partial = initial_phase(sino, models, &c, &ops, size)?;
            for &ar in grid_rest {
                let c = ReconConfig { alpha_rest: ar, ..c.clone() };
                let r = continue_phase(partial.clone(), sino, models, &c, &ops, size)?;
                errs.push(sequence_mse(&r.reconstructions, gt));
            }
        }
        Ok(errs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::new();
    for (a, &ai) in grid_init.iter().enumerate() {
        for (b, &ar) in grid_rest.iter().enumerate() {
            let k = a * grid_rest.len() + b;
            let mse = per_sample.iter().map(|e| e[k]).sum::<f64>() / per_sample.len() as f64;
            table.push((ai, ar, mse));
        }
    }
    let best = table
        .iter()
        .copied()
        .min_by(|x, y| {
            x.2.total_cmp(&y.2)
                .then(y.1.total_cmp(&x.1))
                .then(y.0.total_cmp(&x.0))
        })
        .expect("non-empty grid");
    Ok(AlphaSelection { alpha_init: best.0, alpha_rest: best.1, mse: best.2, table })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl FrameMetrics {
    pub fn compute(x: &FrameSequence, gt: &FrameSequence, data_range: f64) -> Result<Self> {
        if x.len() != gt.len() || x.size != gt.size {
            return Err(CoreError::input("evaluate", format!("{}×{}px vs ground truth {}×{}px", x.len(), x.size, gt.len(), gt.size)));
        }
        let mut m = FrameMetrics { psnr: Vec::new(), ssim: Vec::new() };
        for (a, b) in x.frames.iter().zip(&gt.frames) {
            m.psnr.push(psnr(a, b, data_range)?);
            m.ssim.push(ssim(a, b, x.size, data_range)?);
        }
        Ok(m)
    }

    pub fn row(&self, scope: Scope) -> MetricRow {
        match scope {
            Scope::AllFrames => MetricRow::from_samples(scope, &self.psnr, &self.ssim),
            Scope::LastFrame => {
                let n = self.psnr.len();
                MetricRow::from_samples(scope, &self.psnr[n - 1..], &self.ssim[n - 1..])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reconstructions: FrameMetrics,
    pub priors: FrameMetrics,
}

impl Evaluation {
    /// `(target, row)` pairs: reconstructions and priors, all frames and last frame.
    pub fn rows(&self) -> Vec<(&'static str, MetricRow)> {
        let mut out = Vec::new();
        for (name, m) in [("reconstruction", &self.reconstructions), ("prior", &self.priors)] {
            for scope in [Scope::AllFrames, Scope::LastFrame] {
                out.push((name, m.row(scope)));
            }
        }
        out
    }
}

pub fn evaluate(result: &ReconResult, gt: &FrameSequence, data_range: f64) -> Result<Evaluation> {
    Ok(Evaluation {
        reconstructions: FrameMetrics::compute(&result.reconstructions, gt, data_range)?,
        priors: FrameMetrics::compute(&result.priors, gt, data_range)?,
    })
}
