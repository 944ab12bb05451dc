//! Training of the refinement and next-frame prediction models.
//!
//! Both loops run for `epochs` epochs but evaluate every curriculum (ground-truth
//! ratio, teacher forcing, rollout length, learning rate) on a fixed span of
//! `schedule_span` epochs, so short runs traverse the full curriculum.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tcr_nn::{par, AdamConfig, Checkpoint, CosineSchedule, Graph, OptimizerState, ParamStore, Tensor};

use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::frames::FrameSequence;
use crate::geometry::OperatorCache;
use crate::stt::{forward_graph, init_params, stt_forward, SttConfig};
use crate::varsolve::{landweber, IterOptions};

pub fn gt_ratio(epoch: usize) -> f64 {
    match epoch {
        e if e < 10 => 1.0,
        e if e < 40 => 1.0 - (e - 10) as f64 / 37.5,
        _ => 0.2,
    }
}

pub fn teacher_forcing_ratio(epoch: usize) -> f64 {
    if epoch < 85 {
        (0.9 * (1.0 - epoch as f64 / 85.0)).max(0.0)
    } else {
        0.0
    }
}

pub fn max_rollout(epoch: usize) -> usize {
    match epoch {
        e if e < 30 => 2,
        e if e < 70 => 4,
        e if e < 90 => 6,
        _ => 8,
    }
}

pub fn rollout_prob(epoch: usize) -> f64 {
    (epoch as f64 / 30.0).min(1.0)
}

/// Forces schedule values, e.g. to pin teacher forcing in tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleOverrides {
    pub gt_ratio: Option<f64>,
    pub teacher_forcing: Option<f64>,
    pub rollout: Option<usize>,
    pub rollout_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: CosineSchedule,
    pub schedule_span: usize,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub landweber_max_iter: usize,
    #[serde(default)]
    pub overrides: ScheduleOverrides,
}

impl TrainConfig {
    pub fn refinement() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 8,
            seed: 0,
            lr: CosineSchedule::refinement(),
            schedule_span: 100,
            checkpoint_every: 10,
            landweber_max_iter: IterOptions::l2().max_iter,
            overrides: ScheduleOverrides::default(),
        }
    }

    pub fn prediction() -> Self {
        TrainConfig {
            lr: CosineSchedule::prediction(),
            ..Self::refinement()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.schedule_span == 0 || self.landweber_max_iter == 0 {
            return Err(CoreError::Config("train: epochs, batch, schedule_span and landweber_max_iter must be ≥ 1".into()));
        }
        if self.lr.total != self.schedule_span {
            return Err(CoreError::Config(format!(
                "train: learning-rate schedule spans {} epochs but schedule_span is {}",
                self.lr.total, self.schedule_span
            )));
        }
        Ok(())
    }

    /// Curriculum epoch for training epoch `e`.
    pub fn schedule_epoch(&self, e: usize) -> usize {
        e * self.schedule_span / self.epochs
    }

    fn gt_ratio(&self, e: usize) -> f64 {
        self.overrides.gt_ratio.unwrap_or_else(|| gt_ratio(self.schedule_epoch(e)))
    }

    fn teacher_forcing(&self, e: usize) -> f64 {
        self.overrides.teacher_forcing.unwrap_or_else(|| teacher_forcing_ratio(self.schedule_epoch(e)))
    }

    fn rollout(&self, e: usize) -> (usize, f64) {
        let s = self.schedule_epoch(e);
        (
            self.overrides.rollout.unwrap_or_else(|| max_rollout(s)),
            self.overrides.rollout_prob.unwrap_or_else(|| rollout_prob(s)),
        )
    }

    fn epoch_rng(&self, e: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(e as u64 + 1);
        rng
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub gt_ratio: Option<f64>,
    pub tf_ratio: Option<f64>,
    pub rollout: Option<usize>,
}

pub const LOG_HEADER: &str = "epoch,split,loss,lr,gt_ratio,tf_ratio,rollout";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{:.8e},{:.6e},{},{},{}\n",
            r.epoch,
            r.split,
            r.loss,
            r.lr,
            opt(r.gt_ratio),
            opt(r.tf_ratio),
            r.rollout.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    s
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochLog>,
}

/// Ground truth plus plain Landweber reconstructions of frames 0 and 1.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub truth: Vec<FrameSequence>,
    pub initial: Vec<FrameSequence>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.truth.first().map_or(0, |s| s.len())
    }

    pub fn size(&self) -> usize {
        self.truth.first().map_or(0, |s| s.size)
    }
}

/// Landweber reconstructions of the first `n` steps of sample `index`.
pub fn initial_frames(ds: &Dataset, index: usize, n: usize, cache: &OperatorCache, max_iter: usize) -> Result<FrameSequence> {
    let sample = ds
        .samples
        .get(index)
        .ok_or(CoreError::Range { op: "initial_frames", index, len: ds.len() })?;
    let sino = &sample.sinogram;
    if sino.n_steps() < n {
        return Err(CoreError::Dataset(format!("sample {index} has {} steps, need {n}", sino.n_steps())));
    }
    let size = ds.geometry.image_size;
    let frames = (0..n)
        .map(|t| {
            let step = &sino.steps[t];
            let op = cache.get(size, &step.angles, &sino.offsets)?;
            let opts = IterOptions::l2().with_norm(op.norm).with_max_iter(max_iter);
            Ok(landweber(&op.op, &step.data, &opts)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(size, frames)
}

pub fn prepare_training_set(ds: &Dataset, cache: &OperatorCache, max_iter: usize) -> Result<TrainingSet> {
    if ds.is_empty() {
        return Err(CoreError::Dataset("training set is empty".into()));
    }
    let truth = (0..ds.len()).map(|i| ds.ground_truth(i).cloned()).collect::<Result<Vec<_>>>()?;
    let t = truth[0].len();
    if t < 2 || truth.iter().any(|s| s.len() != t) {
        return Err(CoreError::Dataset(format!("training sequences need a common length ≥ 2, first has {t}")));
    }
    let initial = par::map_indexed(ds.len(), |i| initial_frames(ds, i, 2, cache, max_iter))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet { truth, initial })
}

/// `[B, 1, T, H, W]` from per-sample frame lists.
fn pair(s: &FrameSequence) -> Vec<&[f64]> {
    vec![&s.frames[0][..], &s.frames[1][..]]
}

fn batch_tensor(samples: &[Vec<&[f64]>], size: usize) -> Result<Tensor> {
    let t = samples.first().map_or(0, |s| s.len());
    let data: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.iter().flat_map(|f| f.iter().map(|&v| v as f32)))
        .collect();
    Ok(Tensor::new(&[samples.len(), 1, t, size, size], data)?)
}

fn check_model(cfg: &SttConfig, set: &TrainingSet) -> Result<()> {
    cfg.validate()?;
    if set.size() != cfg.image_size {
        return Err(CoreError::Config(format!("model image size {} but data is {}", cfg.image_size, set.size())));
    }
    Ok(())
}

fn checkpoint_config(role: &str, stt: &SttConfig, train: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "role": role, "stt": stt, "train": train })
}

struct Saver<'a> {
    dir: Option<&'a Path>,
    role: &'static str,
    config: serde_json::Value,
    every: usize,
}

impl Saver<'_> {
    fn epoch_done(&self, e: usize, total: usize, params: &ParamStore, opt: &OptimizerState, log: &[EpochLog]) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}_log.csv", self.role)), log_csv(log))?;
        let ckpt = |name: String| {
            Checkpoint {
                params: params.clone(),
                optimizer: Some(opt.clone()),
                epoch: e + 1,
                config: self.config.clone(),
            }
            .save(&dir.join(name))
        };
        if self.every > 0 && (e + 1) % self.every == 0 && e + 1 < total {
            ckpt(format!("{}_epoch{:03}", self.role, e + 1))?;
        }
        if e + 1 == total {
            ckpt(self.role.to_string())?;
        }
        Ok(())
    }
}

/// Loads a model checkpoint written by the training loops; returns the role
/// (`"refinement"` or `"prediction"`) alongside the weights.
pub fn load_model(dir: &Path) -> Result<(ParamStore, SttConfig, String)> {
    crate::dataset::require_meta(dir)?;
    let ck = Checkpoint::load(dir)?;
    let stt: SttConfig = serde_json::from_value(ck.config.get("stt").cloned().ok_or_else(|| {
        CoreError::Format(format!("{}: checkpoint has no model configuration", dir.display()))
    })?)?;
    let role = ck.config.get("role").and_then(|r| r.as_str()).unwrap_or("").to_string();
    stt.validate()?;
    if ck.params.count() != stt.param_count() {
        return Err(CoreError::Config(format!(
            "{}: {} parameters but the stored configuration implies {}",
            dir.display(),
            ck.params.count(),
            stt.param_count()
        )));
    }
    Ok((ck.params, stt, role))
}

/// Loss `½(‖out₀ − gt₀‖² + ‖out₁ − gt₁‖²)` averaged over the batch; returns its value.
fn refinement_step(g: &mut Graph, params: &ParamStore, cfg: &SttConfig, inputs: &[Vec<&[f64]>], targets: &[Vec<&[f64]>]) -> Result<(tcr_nn::Var, f64)> {
    let b = inputs.len();
    let x = g.constant(batch_tensor(inputs, cfg.image_size)?);
    let y = forward_graph(g, params, cfg, x)?;
    let y = g.slice(y, 2, 0, 2)?;
    let gt = g.constant(batch_tensor(targets, cfg.image_size)?);
    let l = g.l2_loss(y, gt)?;
    let loss = g.scale(l, 0.5 / b as f32)?;
    let v = g.value(loss)?.item() as f64;
    Ok((loss, v))
}

fn check_loss(v: f64, module: &'static str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numerical { module, step, msg: format!("loss is {v}") })
    }
}

pub fn train_refinement(set: &TrainingSet, validation: Option<&TrainingSet>, cfg: &SttConfig, tc: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate()?;
    check_model(cfg, set)?;
    let mut params = init_params(cfg, tc.seed)?;
    let mut opt = OptimizerState::new(&params, AdamConfig::adamw_transformer());
    let saver = Saver { dir: out, role: "refinement", config: checkpoint_config("refinement", cfg, tc), every: tc.checkpoint_every };
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..set.len()).collect();
    for e in 0..tc.epochs {
        let mut rng = tc.epoch_rng(e);
        let lr = tc.lr.lr(tc.schedule_epoch(e))?;
        let ratio = tc.gt_ratio(e);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch) {
            let inputs: Vec<Vec<&[f64]>> = chunk
                .iter()
                .map(|&i| {
                    pair(if rng.random::<f64>() < ratio { &set.truth[i] } else { &set.initial[i] })
                })
                .collect();
            let targets: Vec<Vec<&[f64]>> = chunk.iter().map(|&i| pair(&set.truth[i])).collect();
            let mut g = Graph::new();
            let (loss, v) = refinement_step(&mut g, &params, cfg, &inputs, &targets)?;
            check_loss(v, "train_refinement", opt.step as usize)?;
            let grads = g.backward(loss)?.params(&params);
            opt.step(&mut params, &grads, lr)?;
            total += v * chunk.len() as f64;
        }
        log.push(EpochLog {
            epoch: e,
            split: "train".into(),
            loss: total / set.len() as f64,
            lr,
            gt_ratio: Some(ratio),
            tf_ratio: None,
            rollout: None,
        });
        if let Some(val) = validation {
            log.push(EpochLog {
                loss: refinement_validation_loss(&params, cfg, val, tc.batch)?,
                split: "validation".into(),
                gt_ratio: Some(0.0),
                ..log.last().unwrap().clone()
            });
        }
        saver.epoch_done(e, tc.epochs, &params, &opt, &log)?;
    }
    Ok(TrainOutcome { params, optimizer: opt, log })
}

/// Mean refinement loss on Landweber inputs.
pub fn refinement_validation_loss(params: &ParamStore, cfg: &SttConfig, set: &TrainingSet, batch: usize) -> Result<f64> {
    check_model(cfg, set)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let inputs: Vec<_> = chunk.iter().map(|&i| pair(&set.initial[i])).collect();
        let targets: Vec<_> = chunk.iter().map(|&i| pair(&set.truth[i])).collect();
        let mut g = Graph::inference();
        total += refinement_step(&mut g, params, cfg, &inputs, &targets)?.1 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Origin of one input frame of a prediction step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    Refined(usize),
    GroundTruth(usize),
    Prediction(usize),
}

/// What one optimizer update of the prediction loop consumed.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub epoch: usize,
    pub target: usize,
    pub samples: Vec<usize>,
    pub sources: Vec<Vec<FrameSource>>,
    pub loss: f64,
}

/// Refinement-model outputs for frames 0 and 1 of every sample.
pub fn refine_initial(params_re: &ParamStore, cfg_re: &SttConfig, set: &TrainingSet) -> Result<Vec<FrameSequence>> {
    par::map_indexed(set.len(), |i| Ok(stt_forward(params_re, cfg_re, &set.initial[i])?.slice(0, 2)))
        .into_iter()
        .collect()
}

pub fn train_prediction(set: &TrainingSet, refined: &[FrameSequence], validation: Option<(&TrainingSet, &[FrameSequence])>, cfg: &SttConfig, tc: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_prediction_traced(set, refined, validation, cfg, tc, out, &mut |_| {})
}

/// As [`train_prediction`], reporting every optimizer update to `observe`.
pub fn train_prediction_traced(
    set: &TrainingSet,
    refined: &[FrameSequence],
    validation: Option<(&TrainingSet, &[FrameSequence])>,
    cfg: &SttConfig,
    tc: &TrainConfig,
    out: Option<&Path>,
    observe: &mut dyn FnMut(&StepTrace),
) -> Result<TrainOutcome> {
    tc.validate()?;
    check_model(cfg, set)?;
    if refined.len() != set.len() {
        return Err(CoreError::input("train_prediction", format!("{} refined pairs for {} samples", refined.len(), set.len())));
    }
    let n_steps = set.n_steps();
    if n_steps < 3 {
        return Err(CoreError::Config(format!("prediction training needs ≥ 3 frames per sequence, got {n_steps}")));
    }
    let cap = (n_steps - 2).min(cfg.max_context - 1);
    let mut params = init_params(cfg, tc.seed)?;
    let mut opt = OptimizerState::new(&params, AdamConfig::adamw_transformer());
    let saver = Saver { dir: out, role: "prediction", config: checkpoint_config("prediction", cfg, tc), every: tc.checkpoint_every };
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let size = cfg.image_size;
    for e in 0..tc.epochs {
        let mut rng = tc.epoch_rng(e);
        let lr = tc.lr.lr(tc.schedule_epoch(e))?;
        let tf = tc.teacher_forcing(e);
        let (max_r, prob) = tc.rollout(e);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        let mut longest = 0;
        for chunk in order.chunks(tc.batch) {
            let r = if rng.random::<f64>() < prob { max_r } else { 1 }.clamp(1, cap);
            longest = longest.max(r);
            let mut hist: Vec<Vec<Vec<f64>>> = Vec::with_capacity(chunk.len());
            let mut src: Vec<Vec<FrameSource>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let forced = rng.random::<f64>() < tf;
                let f1 = if forced { set.truth[i].frames[1].clone() } else { refined[i].frames[1].clone() };
                hist.push(vec![refined[i].frames[0].clone(), f1]);
                src.push(vec![FrameSource::Refined(0), if forced { FrameSource::GroundTruth(1) } else { FrameSource::Refined(1) }]);
            }
            for t in 2..=r + 1 {
                let inputs: Vec<Vec<&[f64]>> = hist.iter().map(|h| h.iter().map(|f| &f[..]).collect()).collect();
                let targets: Vec<Vec<&[f64]>> = chunk.iter().map(|&i| vec![&set.truth[i].frames[t][..]]).collect();
                let mut g = Graph::new();
                let x = g.constant(batch_tensor(&inputs, size)?);
                let y = forward_graph(&mut g, &params, cfg, x)?;
                let pred = g.slice(y, 2, t, t + 1)?;
                let gt = g.constant(batch_tensor(&targets, size)?);
                let l = g.l2_loss(pred, gt)?;
                let loss = g.scale(l, 1.0 / chunk.len() as f32)?;
                let v = g.value(loss)?.item() as f64;
                check_loss(v, "train_prediction", opt.step as usize)?;
                observe(&StepTrace { epoch: e, target: t, samples: chunk.to_vec(), sources: src.clone(), loss: v });
                let next = g.value(pred)?.to_f64();
                let grads = g.backward(loss)?.params(&params);
                opt.step(&mut params, &grads, lr)?;
                total += v;
                count += 1;
                if t < r + 1 {
                    let px = size * size;
                    for (k, &i) in chunk.iter().enumerate() {
                        if rng.random::<f64>() < tf {
                            hist[k].push(set.truth[i].frames[t].clone());
                            src[k].push(FrameSource::GroundTruth(t));
                        } else {
                            hist[k].push(next[k * px..(k + 1) * px].to_vec());
                            src[k].push(FrameSource::Prediction(t));
                        }
                    }
                }
            }
        }
        log.push(EpochLog {
            epoch: e,
            split: "train".into(),
            loss: total / count as f64,
            lr,
            gt_ratio: None,
            tf_ratio: Some(tf),
            rollout: Some(longest),
        });
        if let Some((val, val_refined)) = validation {
            log.push(EpochLog {
                loss: rollout_validation_loss(&params, cfg, val, val_refined)?,
                split: "validation".into(),
                tf_ratio: Some(0.0),
                rollout: Some(val.n_steps() - 2),
                ..log.last().unwrap().clone()
            });
        }
        saver.epoch_done(e, tc.epochs, &params, &opt, &log)?;
    }
    Ok(TrainOutcome { params, optimizer: opt, log })
}

/// Autoregressive rollout from `start` (frames 0 and 1) feeding predictions back;
/// returns the full sequence of `n_steps` frames.
pub fn rollout(params: &ParamStore, cfg: &SttConfig, start: &FrameSequence, n_steps: usize) -> Result<FrameSequence> {
    if start.len() < 2 {
        return Err(CoreError::input("rollout", format!("need 2 start frames, got {}", start.len())));
    }
    let mut seq = start.slice(0, 2);
    while seq.len() < n_steps {
        let mut next = stt_forward(params, cfg, &seq)?;
        let last = next.frames.swap_remove(seq.len());
        seq.frames.push(last);
    }
    Ok(seq)
}

/// Mean per-step `‖pred − gt‖²` of a free-running rollout from the refined frames.
pub fn rollout_validation_loss(params: &ParamStore, cfg: &SttConfig, set: &TrainingSet, refined: &[FrameSequence]) -> Result<f64> {
    let n = set.n_steps();
    let per_sample = par::map_indexed(set.len(), |i| -> Result<f64> {
        let seq = rollout(params, cfg, &refined[i], n)?;
        Ok((2..n)
            .map(|t| seq.frames[t].iter().zip(&set.truth[i].frames[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n - 2) as f64)
    });
    let v = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
