//! End-to-end desk protocol: generate data, train both models, pick prior
//! weights on a validation split and compare reconstructions with pure
//! autoregressive prediction on a held-out split.

use serde::{Deserialize, Serialize};
use tcr_nn::par;

use crate::config::ExperimentConfig;
use crate::dataset::{generate_dataset, Dataset, Split};
use crate::error::{CoreError, Result};
use crate::frames::{FrameSequence, Sinogram};
use crate::geometry::OperatorCache;
use crate::metrics::{mean_std, psnr};
use crate::pipeline::{evaluate, log_grid, select_alphas, tcr_reconstruct, Model, Priors, ReconConfig};
use crate::stt::refine;
use crate::train::{prepare_training_set, refine_initial, rollout, train_prediction, train_refinement, EpochLog, TrainingSet};

/// Results for one angle count on the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub angles: usize,
    pub alpha_init: f64,
    pub alpha_rest: f64,
    pub tcr_psnr_all: f64,
    pub tcr_psnr_last: f64,
    pub tcr_ssim_all: f64,
    pub prior_psnr_last: f64,
    /// Free-running prediction from the refined first two frames.
    pub rollout_psnr_all: f64,
    pub rollout_psnr_last: f64,
    /// Fraction of steps whose reconstruction fits the data no worse than its prior.
    pub discrepancy_ok: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub refine_log: Vec<EpochLog>,
    pub predict_log: Vec<EpochLog>,
    /// Mean PSNR of the Landweber and refined first two frames on the held-out split.
    pub landweber_psnr: f64,
    pub refined_psnr: f64,
    pub per_angles: Vec<AngleReport>,
}

fn pairs(ds: &Dataset) -> Result<Vec<(Sinogram, FrameSequence)>> {
    (0..ds.len()).map(|i| Ok((ds.samples[i].sinogram.clone(), ds.ground_truth(i)?.clone()))).collect()
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).0
}

pub fn run_protocol(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<ProtocolReport> {
    cfg.validate()?;
    if cfg.phantom.test_count == 0 || cfg.phantom.validation_count == 0 || cfg.phantom.train_count == 0 {
        return Err(CoreError::Config("protocol: need training, validation and test samples".into()));
    }
    let dataset = |split, angles| generate_dataset(&cfg.generate_options(split, angles));
    let cache = OperatorCache::new();
    let landweber_iters = cfg.train_refine.landweber_max_iter;
    let train = prepare_training_set(&dataset(Split::Train, cfg.geometry.angles)?, &cache, landweber_iters)?;
    progress(&format!("training set: {} sequences", train.len()));

    let re = train_refinement(&train, None, &cfg.model, &cfg.train_refine, None)?;
    progress(&format!("refinement: final training loss {:.4}", re.log.last().unwrap().loss));
    let refined = refine_initial(&re.params, &cfg.model, &train)?;
    let pre = train_prediction(&train, &refined, None, &cfg.model, &cfg.train_predict, None)?;
    progress(&format!("prediction: final training loss {:.4}", pre.log.last().unwrap().loss));
    let refine_model = Model { params: re.params, config: cfg.model.clone() };
    let predict_model = Model { params: pre.params, config: cfg.model.clone() };
    let priors = Priors { refine: &refine_model, predict: &predict_model };

    let grid = log_grid(cfg.eval.alpha_min, cfg.eval.alpha_max, cfg.eval.alpha_points_per_decade)?;
    let mut report = ProtocolReport {
        refine_log: re.log,
        predict_log: pre.log,
        landweber_psnr: f64::NAN,
        refined_psnr: f64::NAN,
        per_angles: Vec::new(),
    };
    let range = cfg.eval.data_range;
    for &angles in &cfg.eval.angle_sweep {
        let val = pairs(&dataset(Split::Validation, angles)?)?;
        let sel = select_alphas(&val, &priors, &cfg.recon, &grid, &grid, &cache)?;
        let recon_cfg = ReconConfig { alpha_init: sel.alpha_init, alpha_rest: sel.alpha_rest, ..cfg.recon.clone() };
        let test_ds = dataset(Split::Test, angles)?;
        let test = pairs(&test_ds)?;
        let test_set: TrainingSet = prepare_training_set(&test_ds, &cache, cfg.train_refine.landweber_max_iter)?;
        let rows = par::map_indexed(test.len(), |i| -> Result<_> {
            let (sino, gt) = &test[i];
            let r = tcr_reconstruct(sino, &priors, &recon_cfg, &cache)?;
            let ev = evaluate(&r, gt, range)?;
            let start = refine(&refine_model.params, &refine_model.config, &test_set.initial[i])?;
            let ar = rollout(&predict_model.params, &predict_model.config, &start, gt.len())?;
            let ar_psnr = ar.frames.iter().zip(&gt.frames).map(|(a, b)| psnr(a, b, range)).collect::<Result<Vec<_>>>()?;
            let ok = r.discrepancy.iter().zip(&r.prior_discrepancy).filter(|(d, p)| d <= p).count();
            let init_psnr = (0..2).map(|t| psnr(&test_set.initial[i].frames[t], &gt.frames[t], range)).collect::<Result<Vec<_>>>()?;
            let ref_psnr = (0..2).map(|t| psnr(&start.frames[t], &gt.frames[t], range)).collect::<Result<Vec<_>>>()?;
            Ok((ev, ar_psnr, ok, init_psnr, ref_psnr))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let last = cfg.geometry.n_steps - 1;
        let col = |f: &dyn Fn(&(crate::pipeline::Evaluation, Vec<f64>, usize, Vec<f64>, Vec<f64>)) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
        let a = AngleReport {
            angles,
            alpha_init: sel.alpha_init,
            alpha_rest: sel.alpha_rest,
            tcr_psnr_all: col(&|r| mean(&r.0.reconstructions.psnr)),
            tcr_psnr_last: col(&|r| r.0.reconstructions.psnr[last]),
            tcr_ssim_all: col(&|r| mean(&r.0.reconstructions.ssim)),
            prior_psnr_last: col(&|r| r.0.priors.psnr[last]),
            rollout_psnr_all: col(&|r| mean(&r.1)),
            rollout_psnr_last: col(&|r| r.1[last]),
            discrepancy_ok: rows.iter().map(|r| r.2).sum::<usize>() as f64 / (rows.len() * cfg.geometry.n_steps) as f64,
        };
        report.landweber_psnr = col(&|r| mean(&r.3));
        report.refined_psnr = col(&|r| mean(&r.4));
        progress(&format!(
            "{angles} angles: alpha ({:.4}, {:.4}); TCR last {:.2} dB all {:.2} dB; rollout last {:.2} dB; consistent steps {:.1}%",
            a.alpha_init,
            a.alpha_rest,
            a.tcr_psnr_last,
            a.tcr_psnr_all,
            a.rollout_psnr_last,
            100.0 * a.discrepancy_ok
        ));
        report.per_angles.push(a);
    }
    Ok(report)
}
