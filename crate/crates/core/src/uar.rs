//! Unrolled adversarial regularization baseline: a learned primal-dual
//! generator trained against a convolutional regularizer without paired data.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tcr_nn::params::{kaiming, truncated_normal};
use tcr_nn::{AdamConfig, Checkpoint, Graph, OptimizerState, ParamStore, Tensor, Var};

use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::frames::{FrameSequence, Sinogram};
use crate::geometry::{NormedOperator, OperatorCache};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UarMode {
    /// Single frames, one randomly chosen time step per draw.
    #[default]
    Static2D,
    /// Whole sequences with convolutions over time as well.
    Dynamic3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UarConfig {
    pub mode: UarMode,
    pub image_size: usize,
    /// Unrolled iterations `L`.
    pub layers: usize,
    pub gamma_channels: usize,
    pub reg_channels: [usize; 6],
    /// Spatial stride of each regularizer convolution.
    pub reg_strides: [usize; 6],
    pub dense_hidden: usize,
    /// Temporal kernel size in `Dynamic3D`; `Static2D` always uses 1.
    pub temporal_kernel: usize,
    pub step_init: f64,
    pub lambda_gp: f64,
    pub alpha: f64,
    pub reg_epochs: usize,
    pub gen_epochs: usize,
    pub adv_epochs: usize,
    pub warmup_lr: f64,
    pub adv_lr: f64,
    pub seed: u64,
}

impl Default for UarConfig {
    fn default() -> Self {
        UarConfig {
            mode: UarMode::Static2D,
            image_size: 32,
            layers: 20,
            gamma_channels: 32,
            reg_channels: [16, 16, 32, 32, 64, 64],
            reg_strides: [1, 2, 1, 2, 1, 2],
            dense_hidden: 64,
            temporal_kernel: 3,
            step_init: 0.01,
            lambda_gp: 10.0,
            alpha: 0.1,
            reg_epochs: 5,
            gen_epochs: 5,
            adv_epochs: 10,
            warmup_lr: 1e-5,
            adv_lr: 2e-5,
            seed: 0,
        }
    }
}

impl UarConfig {
    pub fn new(mode: UarMode, image_size: usize) -> Self {
        UarConfig { mode, image_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("uar: {m}")));
        if self.layers == 0 {
            return bad("unroll depth must be at least 1".into());
        }
        if self.image_size == 0 || self.gamma_channels == 0 || self.dense_hidden == 0 || self.reg_channels.contains(&0) {
            return bad("sizes and channel counts must be positive".into());
        }
        if self.reg_strides.iter().any(|s| !(1..=2).contains(s)) {
            return bad(format!("strides must be 1 or 2, got {:?}", self.reg_strides));
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if !self.step_init.is_finite() {
            return bad("step sizes must be finite".into());
        }
        if !(self.lambda_gp >= 0.0 && self.alpha >= 0.0 && self.lambda_gp.is_finite() && self.alpha.is_finite()) {
            return bad("penalty weights must be finite and non-negative".into());
        }
        if !(self.warmup_lr > 0.0 && self.adv_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn kernel_depth(&self) -> usize {
        match self.mode {
            UarMode::Static2D => 1,
            UarMode::Dynamic3D => self.temporal_kernel,
        }
    }
}

/// Generator weights (`gen.*`) and regularizer weights (`reg.*`).
#[derive(Clone, Debug)]
pub struct UarParams {
    pub config: UarConfig,
    pub generator: ParamStore,
    pub regularizer: ParamStore,
}

fn dual_used(cfg: &UarConfig, l: usize) -> bool {
    // the primal update reads the dual iterate from before the same layer,
    // so the last dual update never reaches the output
    l + 1 < cfg.layers
}

fn gamma_params(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c_in: usize, ch: usize, kt: usize) -> Result<()> {
    let shapes = [[ch, c_in], [ch, ch], [1, ch]];
    for (i, [o, c]) in shapes.into_iter().enumerate() {
        let mut w = kaiming(rng, &[o, c, kt, 3, 3]);
        if i == 2 {
            w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        p.insert(format!("{prefix}.{i}.w"), w)?;
        p.insert(format!("{prefix}.{i}.b"), Tensor::zeros(&[o]))?;
    }
    Ok(())
}

impl UarParams {
    pub fn init(cfg: &UarConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let kt = cfg.kernel_depth();
        let ch = cfg.gamma_channels;
        let step = Tensor::full(&[1], cfg.step_init as f32);
        let mut gen = ParamStore::new();
        for l in 0..cfg.layers {
            if dual_used(cfg, l) {
                gen.insert(format!("gen.{l}.sigma"), step.clone())?;
                gamma_params(&mut gen, &mut rng, &format!("gen.{l}.dual"), 4, ch, kt)?;
            }
            gen.insert(format!("gen.{l}.tau"), step.clone())?;
            gamma_params(&mut gen, &mut rng, &format!("gen.{l}.primal"), 3, ch, kt)?;
        }
        let mut reg = ParamStore::new();
        let mut c_in = 1;
        for (i, &c) in cfg.reg_channels.iter().enumerate() {
            reg.insert(format!("reg.conv.{i}.w"), kaiming(&mut rng, &[c, c_in, kt, 3, 3]))?;
            reg.insert(format!("reg.conv.{i}.b"), Tensor::zeros(&[c]))?;
            c_in = c;
        }
        let d = cfg.dense_hidden;
        reg.insert("reg.fc.0.w", truncated_normal(&mut rng, &[c_in, d], (2.0 / c_in as f32).sqrt()))?;
        reg.insert("reg.fc.0.b", Tensor::zeros(&[d]))?;
        reg.insert("reg.fc.1.w", truncated_normal(&mut rng, &[d, 1], (1.0 / d as f32).sqrt()))?;
        reg.insert("reg.fc.1.b", Tensor::zeros(&[1]))?;
        Ok(UarParams { config: cfg.clone(), generator: gen, regularizer: reg })
    }

    pub fn step_sizes_finite(&self) -> bool {
        self.generator.iter().filter(|(n, _)| n.ends_with(".sigma") || n.ends_with(".tau")).all(|(_, t)| t.is_finite())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut all = self.generator.clone();
        for (name, t) in self.regularizer.iter() {
            all.insert(name, t.clone())?;
        }
        Checkpoint {
            params: all,
            optimizer: None,
            epoch: self.config.reg_epochs + self.config.gen_epochs + self.config.adv_epochs,
            config: serde_json::json!({ "role": "uar", "uar": self.config }),
        }
        .save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        crate::dataset::require_meta(dir)?;
        let ck = Checkpoint::load(dir)?;
        let config: UarConfig = serde_json::from_value(
            ck.config
                .get("uar")
                .cloned()
                .ok_or_else(|| CoreError::Format(format!("{}: checkpoint has no baseline configuration", dir.display())))?,
        )?;
        let template = UarParams::init(&config)?;
        let mut out = UarParams { config, generator: ParamStore::new(), regularizer: ParamStore::new() };
        for (store, tpl) in [(&mut out.generator, &template.generator), (&mut out.regularizer, &template.regularizer)] {
            for (name, t) in tpl.iter() {
                let v = ck.params.get(name).map_err(|_| CoreError::Format(format!("{}: missing tensor {name}", dir.display())))?;
                if v.shape() != t.shape() {
                    return Err(CoreError::Format(format!("{}: {name} has shape {:?}, expected {:?}", dir.display(), v.shape(), t.shape())));
                }
                store.insert(name, v.clone())?;
            }
        }
        Ok(out)
    }
}

/// Measurements and forward operators for one generator call: a single step
/// in `Static2D`, a run of steps in `Dynamic3D`.
#[derive(Clone)]
pub struct UarInput {
    pub ops: Vec<Arc<NormedOperator>>,
    /// `T × n_angles × n_offsets`.
    pub data: Vec<f64>,
    pub n_angles: usize,
    pub n_offsets: usize,
    pub size: usize,
}

impl UarInput {
    pub fn new(sino: &Sinogram, size: usize, steps: &[usize], cache: &OperatorCache) -> Result<Self> {
        sino.validate()?;
        let Some(&first) = steps.first() else {
            return Err(CoreError::input("uar_input", "no time steps selected"));
        };
        let n_steps = sino.n_steps();
        let step = |t: usize| sino.steps.get(t).ok_or(CoreError::Range { op: "uar_input", index: t, len: n_steps });
        let n_angles = step(first)?.angles.len();
        let mut ops = Vec::with_capacity(steps.len());
        let mut data = Vec::new();
        for &t in steps {
            let s = step(t)?;
            if s.angles.len() != n_angles {
                return Err(CoreError::input(
                    "uar_input",
                    format!("step {t} has {} angles, step {first} has {n_angles}; stacked steps need equal counts", s.angles.len()),
                ));
            }
            ops.push(cache.get(size, &s.angles, &sino.offsets)?);
            data.extend_from_slice(&s.data);
        }
        Ok(UarInput { ops, data, n_angles, n_offsets: sino.offsets.len(), size })
    }

    pub fn n_steps(&self) -> usize {
        self.ops.len()
    }

    pub fn image_shape(&self) -> [usize; 5] {
        [1, 1, self.n_steps(), self.size, self.size]
    }

    pub fn data_shape(&self) -> [usize; 5] {
        [1, 1, self.n_steps(), self.n_angles, self.n_offsets]
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        stacked(&self.ops, x, self.size * self.size, |op, v| op.op.project(v))
    }

    pub fn backproject(&self, y: &[f64]) -> Result<Vec<f64>> {
        stacked(&self.ops, y, self.n_angles * self.n_offsets, |op, v| op.op.backproject(v))
    }

    /// Pseudo-inverse surrogate used to start the unrolled iteration.
    pub fn fbp(&self) -> Result<Vec<f64>> {
        stacked(&self.ops, &self.data, self.n_angles * self.n_offsets, |op, v| op.op.fbp(v))
    }
}

fn stacked(
    ops: &[Arc<NormedOperator>],
    x: &[f64],
    chunk: usize,
    f: impl Fn(&NormedOperator, &[f64]) -> crate::error::Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if x.len() != chunk * ops.len() {
        return Err(CoreError::input("uar_operator", format!("{} values for {} steps of {chunk}", x.len(), ops.len())));
    }
    let mut out = Vec::new();
    for (op, v) in ops.iter().zip(x.chunks(chunk)) {
        out.extend(f(op, v)?);
    }
    Ok(out)
}

/// `A` (or `Aᵀ` when `adjoint`) as a linear graph op on `[1, 1, T, ..]` tensors.
fn radon_var(g: &mut Graph, x: Var, input: &UarInput, adjoint: bool) -> Result<Var> {
    let xv = g.value(x)?.to_f64();
    let (y, shape) = if adjoint {
        (input.backproject(&xv)?, input.image_shape())
    } else {
        (input.project(&xv)?, input.data_shape())
    };
    let back = input.clone();
    Ok(g.custom(
        &[x],
        Tensor::from_f64(&shape, &y)?,
        Box::new(move |c| {
            let gd: Vec<f64> = c.grad.iter().map(|&v| v as f64).collect();
            let r = if adjoint { back.project(&gd) } else { back.backproject(&gd) };
            vec![Some(r.expect("shapes fixed at construction").into_iter().map(|v| v as f32).collect())]
        }),
    )?)
}

/// Parameters either tracked on the tape or frozen as constants.
#[derive(Clone, Copy)]
struct Weights<'a> {
    store: &'a ParamStore,
    train: bool,
}

impl Weights<'_> {
    fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(if self.train { g.param(self.store, name)? } else { g.constant(self.store.get(name)?.clone()) })
    }
}

fn conv(g: &mut Graph, w: Weights, name: &str, x: Var, kt: usize, stride: usize) -> Result<Var> {
    let wv = w.get(g, &format!("{name}.w"))?;
    let b = w.get(g, &format!("{name}.b"))?;
    let p = kt / 2;
    Ok(g.conv3d(x, wv, Some(b), [1, stride, stride], [(p, p), (1, 1), (1, 1)])?)
}

/// Residual three-layer CNN over `inputs` plus a constant step-size channel.
fn gamma(g: &mut Graph, w: Weights, prefix: &str, inputs: &[Var], step: Var, kt: usize) -> Result<Var> {
    let shape = g.shape(inputs[0])?;
    let s = g.broadcast_scalar(step, &shape)?;
    let mut parts = inputs.to_vec();
    parts.push(s);
    let mut x = g.concat(&parts, 1)?;
    for i in 0..3 {
        x = conv(g, w, &format!("{prefix}.{i}"), x, kt, 1)?;
        if i < 2 {
            x = g.gelu(x)?;
        }
    }
    Ok(g.add(inputs[0], x)?)
}

fn generator_graph(g: &mut Graph, w: Weights, cfg: &UarConfig, input: &UarInput) -> Result<Var> {
    let kt = cfg.kernel_depth();
    let psi = g.constant(Tensor::from_f64(&input.data_shape(), &input.data)?);
    let mut theta = g.constant(Tensor::from_f64(&input.image_shape(), &input.fbp()?)?);
    let mut h = g.constant(Tensor::zeros(&input.data_shape()));
    for l in 0..cfg.layers {
        let back = radon_var(g, h, input, true)?;
        if dual_used(cfg, l) {
            let a_theta = radon_var(g, theta, input, false)?;
            let sigma = w.get(g, &format!("gen.{l}.sigma"))?;
            h = gamma(g, w, &format!("gen.{l}.dual"), &[h, a_theta, psi], sigma, kt)?;
        }
        let tau = w.get(g, &format!("gen.{l}.tau"))?;
        theta = gamma(g, w, &format!("gen.{l}.primal"), &[theta, back], tau, kt)?;
    }
    Ok(theta)
}

fn check_input(cfg: &UarConfig, input: &UarInput) -> Result<()> {
    if input.size != cfg.image_size {
        return Err(CoreError::input("uar_generator", format!("image size {} but model expects {}", input.size, cfg.image_size)));
    }
    if cfg.mode == UarMode::Static2D && input.n_steps() != 1 {
        return Err(CoreError::input("uar_generator", format!("static mode takes one step, got {}", input.n_steps())));
    }
    Ok(())
}

/// Unrolled reconstruction `G_ζ(ψ)`, one frame per input step.
pub fn uar_generator(params: &UarParams, input: &UarInput) -> Result<FrameSequence> {
    check_input(&params.config, input)?;
    let mut g = Graph::inference();
    let out = generator_graph(&mut g, Weights { store: &params.generator, train: false }, &params.config, input)?;
    let px = input.size * input.size;
    let v = g.value(out)?.to_f64();
    FrameSequence::new(input.size, v.chunks(px).map(<[f64]>::to_vec).collect())
}

/// A scalar critic whose input gradient can itself be differentiated.
pub trait Critic {
    fn score(&self, g: &mut Graph, x: Var) -> Result<Var>;
    /// Score together with `∇ₓ score` built from differentiable ops.
    fn score_with_input_gradient(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)>;
}

pub struct Regularizer<'a> {
    params: &'a ParamStore,
    cfg: &'a UarConfig,
    train: bool,
}

impl<'a> Regularizer<'a> {
    pub fn new(p: &'a UarParams) -> Self {
        Regularizer { params: &p.regularizer, cfg: &p.config, train: false }
    }

    /// Records regularizer weights as trainable parameters.
    pub fn trainable(p: &'a UarParams) -> Self {
        Self::from_store(&p.regularizer, &p.config)
    }

    /// Trainable regularizer over an arbitrary `reg.*` store.
    pub fn from_store(params: &'a ParamStore, cfg: &'a UarConfig) -> Self {
        Regularizer { params, cfg, train: true }
    }

    fn weights(&self) -> Weights<'a> {
        Weights { store: self.params, train: self.train }
    }

    /// Forward pass keeping pre-activations and layer input shapes.
    fn traced(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>, Vec<[usize; 3]>, Var)> {
        let w = self.weights();
        let kt = self.cfg.kernel_depth();
        let (mut a, mut pre, mut dims) = (x, Vec::new(), Vec::new());
        for (i, &s) in self.cfg.reg_strides.iter().enumerate() {
            let sh = g.shape(a)?;
            dims.push([sh[2], sh[3], sh[4]]);
            let z = conv(g, w, &format!("reg.conv.{i}"), a, kt, s)?;
            pre.push(z);
            a = g.gelu(z)?;
        }
        let pooled = g.mean_trailing(a, 3)?;
        let (w0, b0) = (w.get(g, "reg.fc.0.w")?, w.get(g, "reg.fc.0.b")?);
        let z = g.linear(pooled, w0, Some(b0))?;
        let a = g.gelu(z)?;
        let (w1, b1) = (w.get(g, "reg.fc.1.w")?, w.get(g, "reg.fc.1.b")?);
        let r = g.linear(a, w1, Some(b1))?;
        Ok((g.sum_all(r)?, pre, dims, z))
    }
}

impl Critic for Regularizer<'_> {
    fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.traced(g, x)?.0)
    }

    fn score_with_input_gradient(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let (r, pre, dims, fc_pre) = self.traced(g, x)?;
        let w = self.weights();
        let d = self.cfg.dense_hidden;
        let w1 = w.get(g, "reg.fc.1.w")?;
        let ga = g.reshape(w1, &[1, d])?;
        let slope = g.gelu_derivative(fc_pre)?;
        let gz = g.mul(ga, slope)?;
        let w0 = w.get(g, "reg.fc.0.w")?;
        let w0t = g.transpose_last(w0)?;
        let gp = g.matmul(gz, w0t)?;
        let last = g.shape(*pre.last().expect("six layers"))?;
        let gp = g.reshape(gp, &[last[1]])?;
        let zeros = g.constant(Tensor::zeros(&last));
        let spread = g.add_bias(zeros, gp, 1)?;
        let mut ga = g.scale(spread, 1.0 / (last[2] * last[3] * last[4]) as f32)?;
        let kt = self.cfg.kernel_depth();
        for i in (0..pre.len()).rev() {
            let slope = g.gelu_derivative(pre[i])?;
            let gz = g.mul(ga, slope)?;
            let wi = w.get(g, &format!("reg.conv.{i}.w"))?;
            let s = self.cfg.reg_strides[i];
            let p = kt / 2;
            ga = g.conv_transpose3d(gz, wi, [1, s, s], [(p, p), (1, 1), (1, 1)], dims[i])?;
        }
        Ok((r, ga))
    }
}

pub struct RegLossParts {
    pub loss: Var,
    pub score_truth: Var,
    pub score_generated: Var,
    pub penalty: Var,
}

/// `R(ϑ) − R(u) + λ (‖∇R(εϑ + (1−ε)u)‖ − 1)²` on the tape.
pub fn reg_loss_graph(g: &mut Graph, critic: &dyn Critic, truth: Var, generated: Var, eps: f64, lambda: f64) -> Result<RegLossParts> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(CoreError::input("reg_loss", format!("mixing weight {eps} outside [0, 1]")));
    }
    let st = critic.score(g, truth)?;
    let sg = critic.score(g, generated)?;
    let a = g.scale(truth, eps as f32)?;
    let b = g.scale(generated, (1.0 - eps) as f32)?;
    let mix = g.add(a, b)?;
    let (_, grad) = critic.score_with_input_gradient(g, mix)?;
    let sq = g.sum_sq(grad)?;
    let norm = g.sqrt_eps(sq, 1e-12)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let penalty = g.square(dev)?;
    let diff = g.sub(st, sg)?;
    let weighted = g.scale(penalty, lambda as f32)?;
    let loss = g.add(diff, weighted)?;
    Ok(RegLossParts { loss, score_truth: st, score_generated: sg, penalty })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegLoss {
    pub loss: f64,
    pub score_truth: f64,
    pub score_generated: f64,
    pub penalty: f64,
}

fn read(g: &Graph, v: Var) -> Result<f64> {
    Ok(g.value(v)?.item() as f64)
}

pub fn reg_loss(critic: &dyn Critic, truth: &Tensor, generated: &Tensor, eps: f64, lambda: f64) -> Result<RegLoss> {
    if truth.shape() != generated.shape() {
        return Err(CoreError::input("reg_loss", format!("shapes {:?} and {:?}", truth.shape(), generated.shape())));
    }
    let mut g = Graph::inference();
    let (t, u) = (g.constant(truth.clone()), g.constant(generated.clone()));
    let p = reg_loss_graph(&mut g, critic, t, u, eps, lambda)?;
    Ok(RegLoss {
        loss: read(&g, p.loss)?,
        score_truth: read(&g, p.score_truth)?,
        score_generated: read(&g, p.score_generated)?,
        penalty: read(&g, p.penalty)?,
    })
}

pub struct GenLossParts {
    pub loss: Var,
    pub fidelity: Var,
    pub score: Var,
    pub output: Var,
}

/// Generator loss with `zeta` tracked on the tape and the regularizer of `params` frozen.
pub fn gen_loss_graph(g: &mut Graph, zeta: &ParamStore, params: &UarParams, input: &UarInput, alpha: f64) -> Result<GenLossParts> {
    check_input(&params.config, input)?;
    let w = Weights { store: zeta, train: true };
    let out = generator_graph(g, w, &params.config, input)?;
    let proj = radon_var(g, out, input, false)?;
    let psi = g.constant(Tensor::from_f64(&input.data_shape(), &input.data)?);
    let fidelity = g.l2_loss(psi, proj)?;
    let score = Regularizer::new(params).score(g, out)?;
    let weighted = g.scale(score, alpha as f32)?;
    let loss = g.add(fidelity, weighted)?;
    Ok(GenLossParts { loss, fidelity, score, output: out })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenLoss {
    pub loss: f64,
    pub fidelity: f64,
    pub score: f64,
}

/// `‖ψ − A G(ψ)‖² + α R(G(ψ))`.
pub fn gen_loss(params: &UarParams, input: &UarInput, alpha: f64) -> Result<GenLoss> {
    let mut g = Graph::inference();
    let p = gen_loss_graph(&mut g, &params.generator, params, input, alpha)?;
    Ok(GenLoss { loss: read(&g, p.loss)?, fidelity: read(&g, p.fidelity)?, score: read(&g, p.score)? })
}

/// Unpaired pools: ground truth and measurements are drawn by separate samplers.
#[derive(Clone, Debug)]
pub struct UarData {
    pub truths: Vec<FrameSequence>,
    pub measurements: Vec<Sinogram>,
    pub image_size: usize,
}

impl UarData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let truths = (0..ds.len()).map(|i| ds.ground_truth(i).cloned()).collect::<Result<Vec<_>>>()?;
        Ok(UarData {
            truths,
            measurements: ds.samples.iter().map(|s| s.sinogram.clone()).collect(),
            image_size: ds.geometry.image_size,
        })
    }
}

/// Draws `(sequence, step)` pairs from one pool, reshuffling when exhausted.
pub struct PoolSampler {
    rng: ChaCha8Rng,
    lens: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    single_step: bool,
}

impl PoolSampler {
    pub fn new(seed: u64, stream: u64, lens: Vec<usize>, single_step: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        PoolSampler { rng, order: (0..lens.len()).collect(), lens, pos: usize::MAX, single_step }
    }

    /// Sequence index and, in single-step mode, a uniformly drawn time step.
    pub fn next_draw(&mut self) -> (usize, Option<usize>) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        let t = self.single_step.then(|| self.rng.random_range(0..self.lens[i]));
        (i, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UarPhase {
    Regularizer,
    Generator,
    Adversarial,
}

impl UarPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            UarPhase::Regularizer => "regularizer",
            UarPhase::Generator => "generator",
            UarPhase::Adversarial => "adversarial",
        }
    }
}

/// One parameter update as seen by an observer.
#[derive(Clone, Debug, PartialEq)]
pub struct UarStep {
    pub phase: UarPhase,
    pub epoch: usize,
    pub truth: Option<(usize, Option<usize>)>,
    pub measurement: (usize, Option<usize>),
    pub reg: Option<RegLoss>,
    pub gen: Option<GenLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UarLog {
    pub phase: UarPhase,
    pub epoch: usize,
    pub lr: f64,
    pub reg_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub gen_loss: Option<f64>,
    pub fidelity: Option<f64>,
}

pub const UAR_LOG_HEADER: &str = "phase,epoch,lr,reg_loss,penalty,gen_loss,fidelity";

pub fn uar_log_csv(rows: &[UarLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut s = format!("{UAR_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{},{},{},{}\n",
            r.phase.as_str(),
            r.epoch,
            r.lr,
            opt(r.reg_loss),
            opt(r.penalty),
            opt(r.gen_loss),
            opt(r.fidelity)
        ));
    }
    s
}

pub struct UarOutcome {
    pub params: UarParams,
    pub log: Vec<UarLog>,
}

fn finite(v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numerical { module: "train_uar", step: step as usize, msg: format!("loss is {v}") })
    }
}

struct Trainer<'a> {
    data: &'a UarData,
    cfg: &'a UarConfig,
    cache: &'a OperatorCache,
    params: UarParams,
    reg_opt: OptimizerState,
    gen_opt: OptimizerState,
    truths: PoolSampler,
    measurements: PoolSampler,
    mix: ChaCha8Rng,
}

impl Trainer<'_> {
    fn truth(&self, (i, t): (usize, Option<usize>)) -> Result<Tensor> {
        let seq = &self.data.truths[i];
        let frames: Vec<f64> = match t {
            Some(t) => seq.frames[t].clone(),
            None => seq.frames.concat(),
        };
        let n = frames.len() / (seq.size * seq.size);
        Ok(Tensor::from_f64(&[1, 1, n, seq.size, seq.size], &frames)?)
    }

    fn measurement(&self, (i, t): (usize, Option<usize>)) -> Result<UarInput> {
        let sino = &self.data.measurements[i];
        let steps: Vec<usize> = match t {
            Some(t) => vec![t],
            None => (0..sino.n_steps()).collect(),
        };
        UarInput::new(sino, self.data.image_size, &steps, self.cache)
    }

    fn reg_update(&mut self, truth: &Tensor, generated: &Tensor, lr: f64) -> Result<RegLoss> {
        if truth.shape() != generated.shape() {
            return Err(CoreError::Dataset(format!(
                "ground truth {:?} and reconstruction {:?} differ in shape",
                truth.shape(),
                generated.shape()
            )));
        }
        let eps: f64 = self.mix.random();
        let mut g = Graph::new();
        let (t, u) = (g.constant(truth.clone()), g.constant(generated.clone()));
        let p = reg_loss_graph(&mut g, &Regularizer::trainable(&self.params), t, u, eps, self.cfg.lambda_gp)?;
        let out = RegLoss {
            loss: read(&g, p.loss)?,
            score_truth: read(&g, p.score_truth)?,
            score_generated: read(&g, p.score_generated)?,
            penalty: read(&g, p.penalty)?,
        };
        finite(out.loss, self.reg_opt.step)?;
        let grads = g.backward(p.loss)?.params(&self.params.regularizer);
        self.reg_opt.step(&mut self.params.regularizer, &grads, lr)?;
        Ok(out)
    }

    fn gen_update(&mut self, input: &UarInput, lr: f64) -> Result<GenLoss> {
        let mut g = Graph::new();
        let p = gen_loss_graph(&mut g, &self.params.generator, &self.params, input, self.cfg.alpha)?;
        let out = GenLoss { loss: read(&g, p.loss)?, fidelity: read(&g, p.fidelity)?, score: read(&g, p.score)? };
        finite(out.loss, self.gen_opt.step)?;
        let grads = g.backward(p.loss)?.params(&self.params.generator);
        self.gen_opt.step(&mut self.params.generator, &grads, lr)?;
        Ok(out)
    }

    fn reconstruct(&self, input: &UarInput) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = generator_graph(&mut g, Weights { store: &self.params.generator, train: false }, self.cfg, input)?;
        Ok(g.value(out)?.clone())
    }

    fn update(&mut self, phase: UarPhase, epoch: usize, lr: f64) -> Result<UarStep> {
        let m = self.measurements.next_draw();
        let input = self.measurement(m)?;
        let mut step = UarStep { phase, epoch, truth: None, measurement: m, reg: None, gen: None };
        if phase != UarPhase::Generator {
            let t = self.truths.next_draw();
            let truth = self.truth(t)?;
            let generated = match phase {
                UarPhase::Regularizer => Tensor::from_f64(&input.image_shape(), &input.fbp()?)?,
                _ => self.reconstruct(&input)?,
            };
            step.truth = Some(t);
            step.reg = Some(self.reg_update(&truth, &generated, lr)?);
        }
        if phase != UarPhase::Regularizer {
            step.gen = Some(self.gen_update(&input, lr)?);
        }
        Ok(step)
    }
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn train_uar(data: &UarData, cfg: &UarConfig, out: Option<&Path>) -> Result<UarOutcome> {
    train_uar_traced(data, cfg, out, &mut |_| {})
}

/// Three phases: regularizer warm-up against pseudo-inverse reconstructions,
/// generator warm-up against the frozen regularizer, then alternating single
/// updates. Each epoch performs one update per measurement.
pub fn train_uar_traced(data: &UarData, cfg: &UarConfig, out: Option<&Path>, observe: &mut dyn FnMut(&UarStep)) -> Result<UarOutcome> {
    cfg.validate()?;
    if data.truths.is_empty() || data.measurements.is_empty() {
        return Err(CoreError::Config("uar: need at least one ground-truth sequence and one measurement per epoch".into()));
    }
    if data.image_size != cfg.image_size {
        return Err(CoreError::Config(format!("uar: data has {}px images, model expects {}", data.image_size, cfg.image_size)));
    }
    let single = cfg.mode == UarMode::Static2D;
    let params = UarParams::init(cfg)?;
    let cache = OperatorCache::new();
    let mut mix = ChaCha8Rng::seed_from_u64(cfg.seed);
    mix.set_stream(3);
    let mut tr = Trainer {
        data,
        cfg,
        cache: &cache,
        reg_opt: OptimizerState::new(&params.regularizer, AdamConfig::adam_adversarial()),
        gen_opt: OptimizerState::new(&params.generator, AdamConfig::adam_adversarial()),
        params,
        truths: PoolSampler::new(cfg.seed, 1, data.truths.iter().map(FrameSequence::len).collect(), single),
        measurements: PoolSampler::new(cfg.seed, 2, data.measurements.iter().map(Sinogram::n_steps).collect(), single),
        mix,
    };
    let phases = [
        (UarPhase::Regularizer, cfg.reg_epochs, cfg.warmup_lr),
        (UarPhase::Generator, cfg.gen_epochs, cfg.warmup_lr),
        (UarPhase::Adversarial, cfg.adv_epochs, cfg.adv_lr),
    ];
    let mut log = Vec::new();
    let mut epoch = 0;
    for (phase, epochs, lr) in phases {
        for _ in 0..epochs {
            let (mut reg, mut pen, mut gen, mut fid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for _ in 0..data.measurements.len() {
                let s = tr.update(phase, epoch, lr)?;
                if let Some(r) = s.reg {
                    reg.push(r.loss);
                    pen.push(r.penalty);
                }
                if let Some(g) = s.gen {
                    gen.push(g.loss);
                    fid.push(g.fidelity);
                }
                observe(&s);
            }
            log.push(UarLog {
                phase,
                epoch,
                lr,
                reg_loss: mean_of(&reg),
                penalty: mean_of(&pen),
                gen_loss: mean_of(&gen),
                fidelity: mean_of(&fid),
            });
            if let Some(dir) = out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("uar_log.csv"), uar_log_csv(&log))?;
            }
            epoch += 1;
        }
    }
    if !tr.params.step_sizes_finite() {
        return Err(CoreError::Numerical { module: "train_uar", step: epoch, msg: "step sizes diverged".into() });
    }
    if let Some(dir) = out {
        tr.params.save(&dir.join("uar"))?;
    }
    Ok(UarOutcome { params: tr.params, log })
}
