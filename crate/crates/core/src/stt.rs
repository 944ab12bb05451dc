//! Causal spatial-temporal transformer mapping `T` frames to `T + 1` frames.
//!
//! A query slot (a copy of the last frame) is appended, a causal 3-D conv
//! encoder reduces every frame to an `H/8 × W/8` feature map, each spatial
//! patch becomes a token sequence over time with causal RoPE attention, and a
//! per-frame conv decoder maps the final token features back to images with a
//! residual connection to the slot's input frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tcr_nn::params::{kaiming, truncated_normal};
use tcr_nn::{CausalMask, Graph, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::frames::FrameSequence;

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SttConfig {
    pub image_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Output channels of the three stride-2 encoder stages.
    pub enc_channels: [usize; 3],
    /// Decoder widths at H/8, H/4, H/2 and H.
    pub dec_channels: [usize; 4],
    /// Channels of each projection of the transformer features fed to a decoder level.
    pub skip_channels: usize,
    pub temporal_kernel: usize,
    pub max_context: usize,
    pub causal: bool,
    #[serde(default)]
    pub mask_window: Option<usize>,
}

impl Default for SttConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SttConfig {
    pub fn desk() -> Self {
        SttConfig {
            image_size: 32,
            model_dim: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 2,
            enc_channels: [8, 16, 32],
            dec_channels: [32, 16, 8, 8],
            skip_channels: 4,
            temporal_kernel: 2,
            max_context: 16,
            causal: true,
            mask_window: None,
        }
    }

    pub fn paper() -> Self {
        SttConfig {
            image_size: 64,
            model_dim: 512,
            heads: 8,
            layers: 6,
            mlp_ratio: 4,
            enc_channels: [64, 128, 256],
            dec_channels: [256, 128, 64, 32],
            skip_channels: 32,
            temporal_kernel: 2,
            max_context: 16,
            causal: true,
            mask_window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("stt: {m}")));
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if (self.model_dim / self.heads) % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.model_dim / self.heads));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.temporal_kernel == 0 || self.mlp_ratio == 0 || self.layers == 0 || self.max_context < 2 {
            return bad("temporal_kernel, mlp_ratio, layers must be ≥ 1 and max_context ≥ 2".into());
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) || self.skip_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        CausalMask::from_config(self.causal, self.mask_window)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn mask(&self) -> Result<CausalMask> {
        Ok(CausalMask::from_config(self.causal, self.mask_window)?)
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let kt = self.temporal_kernel;
        let [e1, e2, e3] = self.enc_channels;
        let enc = (e1 * kt * 9 + e1) + (e2 * e1 * kt * 9 + e2) + (e3 * e2 * kt * 9 + e3);
        let embed = e3 * d + d;
        let layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * self.mlp_ratio * d + self.mlp_ratio * d) + (self.mlp_ratio * d * d + d);
        let s = self.skip_channels;
        let [d0, d1, d2, d3] = self.dec_channels;
        let dec = (d0 * d + d0) + 3 * (s * d + s) + (d1 * (d0 + s) * 9 + d1) + (d2 * (d1 + s) * 9 + d2) + (d3 * (d2 + s + 1) * 9 + d3) + (d3 + 1);
        enc + embed + self.layers * layer + 2 * d + dec
    }
}

/// Builds a freshly initialised parameter store.
pub fn init_params(cfg: &SttConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let d = cfg.model_dim;
    let kt = cfg.temporal_kernel;
    let mut c_in = 1;
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        p.insert(format!("enc.{i}.w"), kaiming(&mut rng, &[c, c_in, kt, 3, 3]))?;
        p.insert(format!("enc.{i}.b"), Tensor::zeros(&[c]))?;
        c_in = c;
    }
    p.insert("embed.w", truncated_normal(&mut rng, &[c_in, d], 0.02))?;
    p.insert("embed.b", Tensor::zeros(&[d]))?;
    let r = cfg.mlp_ratio;
    for l in 0..cfg.layers {
        let n = |s: &str| format!("layer.{l}.{s}");
        p.insert(n("ln1.g"), Tensor::full(&[d], 1.0))?;
        p.insert(n("ln1.b"), Tensor::zeros(&[d]))?;
        p.insert(n("qkv.w"), truncated_normal(&mut rng, &[d, 3 * d], 0.02))?;
        p.insert(n("qkv.b"), Tensor::zeros(&[3 * d]))?;
        p.insert(n("proj.w"), truncated_normal(&mut rng, &[d, d], 0.02))?;
        p.insert(n("proj.b"), Tensor::zeros(&[d]))?;
        p.insert(n("ln2.g"), Tensor::full(&[d], 1.0))?;
        p.insert(n("ln2.b"), Tensor::zeros(&[d]))?;
        p.insert(n("mlp1.w"), truncated_normal(&mut rng, &[d, r * d], 0.02))?;
        p.insert(n("mlp1.b"), Tensor::zeros(&[r * d]))?;
        p.insert(n("mlp2.w"), truncated_normal(&mut rng, &[r * d, d], 0.02))?;
        p.insert(n("mlp2.b"), Tensor::zeros(&[d]))?;
    }
    p.insert("final_ln.g", Tensor::full(&[d], 1.0))?;
    p.insert("final_ln.b", Tensor::zeros(&[d]))?;
    let [d0, d1, d2, d3] = cfg.dec_channels;
    let s = cfg.skip_channels;
    p.insert("dec.bottom.w", kaiming(&mut rng, &[d0, d, 1, 1]))?;
    p.insert("dec.bottom.b", Tensor::zeros(&[d0]))?;
    let ins = [d0 + s, d1 + s, d2 + s + 1];
    let outs = [d1, d2, d3];
    for i in 0..3 {
        p.insert(format!("dec.skip.{i}.w"), kaiming(&mut rng, &[s, d, 1, 1]))?;
        p.insert(format!("dec.skip.{i}.b"), Tensor::zeros(&[s]))?;
        p.insert(format!("dec.up.{i}.w"), kaiming(&mut rng, &[outs[i], ins[i], 3, 3]))?;
        p.insert(format!("dec.up.{i}.b"), Tensor::zeros(&[outs[i]]))?;
    }
    p.insert("dec.head.w", truncated_normal(&mut rng, &[1, d3, 1, 1], 0.02))?;
    p.insert("dec.head.b", Tensor::zeros(&[1]))?;
    debug_assert_eq!(p.count(), cfg.param_count());
    Ok(p)
}

fn conv2d_named(g: &mut Graph, p: &ParamStore, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), 1, pad)?)
}

fn layer_norm_named(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{name}.g"))?;
    let beta = g.param(p, &format!("{name}.b"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

fn linear_named(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    Ok(g.linear(x, w, Some(b))?)
}

/// Attention weights of every layer, `[B·P, heads, S, S]`, for inspection.
pub struct ForwardTrace {
    pub attention: Vec<Var>,
}

/// Graph-level forward pass on `x: [B, 1, T, H, W]`; returns `[B, 1, T + 1, H, W]`.
pub fn forward_graph(g: &mut Graph, p: &ParamStore, cfg: &SttConfig, x: Var) -> Result<Var> {
    Ok(forward_traced(g, p, cfg, x)?.0)
}

pub fn forward_traced(g: &mut Graph, p: &ParamStore, cfg: &SttConfig, x: Var) -> Result<(Var, ForwardTrace)> {
    let xs = g.shape(x)?;
    let hw = cfg.image_size;
    if xs.len() != 5 || xs[1] != 1 || xs[3] != hw || xs[4] != hw {
        return Err(CoreError::input("stt_forward", format!("input shape {xs:?}, expected [B, 1, T, {hw}, {hw}]")));
    }
    let (b, t) = (xs[0], xs[2]);
    if t == 0 || t > cfg.max_context {
        return Err(CoreError::input("stt_forward", format!("sequence length {t} outside 1..={}", cfg.max_context)));
    }
    if !g.value(x)?.is_finite() {
        return Err(CoreError::input("stt_forward", "non-finite input frame"));
    }
    let s = t + 1;
    let last = g.slice(x, 2, t - 1, t)?;
    let x = g.concat(&[x, last], 2)?;

    // causal encoder
    let kt = cfg.temporal_kernel;
    let mut h = x;
    for i in 0..3 {
        let w = g.param(p, &format!("enc.{i}.w"))?;
        let bias = g.param(p, &format!("enc.{i}.b"))?;
        h = g.conv3d(h, w, Some(bias), [1, 2, 2], [(kt - 1, 0), (1, 1), (1, 1)])?;
        h = g.gelu(h)?;
    }
    let pg = cfg.patch_grid();
    let np = pg * pg;
    let c3 = cfg.enc_channels[2];
    let d = cfg.model_dim;

    // tokens: one temporal sequence per spatial patch
    let tok = g.permute(h, &[0, 3, 4, 2, 1])?;
    let tok = g.reshape(tok, &[b * np, s, c3])?;
    let mut z = linear_named(g, p, "embed", tok)?;
    let positions: Vec<f64> = (0..s).map(|i| i as f64).collect();
    let mask = cfg.mask()?;
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let mut trace = ForwardTrace { attention: Vec::new() };
    for l in 0..cfg.layers {
        let n = |s: &str| format!("layer.{l}.{s}");
        let a = layer_norm_named(g, p, &n("ln1"), z)?;
        let qkv = linear_named(g, p, &n("qkv"), a)?;
        let split = |g: &mut Graph, k: usize| -> Result<Var> {
            let part = g.slice(qkv, 2, k * d, (k + 1) * d)?;
            Ok(g.reshape(part, &[b * np, s, heads, dk])?)
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let q = g.rope(q, &positions)?;
        let k = g.rope(k, &positions)?;
        let (att, weights) = g.causal_attention_weights(q, k, v, &mask)?;
        trace.attention.push(weights);
        let att = g.reshape(att, &[b * np, s, d])?;
        let att = linear_named(g, p, &n("proj"), att)?;
        z = g.add(z, att)?;
        let m = layer_norm_named(g, p, &n("ln2"), z)?;
        let m = linear_named(g, p, &n("mlp1"), m)?;
        let m = g.gelu(m)?;
        let m = linear_named(g, p, &n("mlp2"), m)?;
        z = g.add(z, m)?;
    }
    let z = layer_norm_named(g, p, "final_ln", z)?;

    // per-frame decoder
    let z = g.reshape(z, &[b, pg, pg, s, d])?;
    let z = g.permute(z, &[0, 3, 4, 1, 2])?;
    let z = g.reshape(z, &[b * s, d, pg, pg])?;
    let frames = g.permute(x, &[0, 2, 1, 3, 4])?;
    let frames = g.reshape(frames, &[b * s, 1, hw, hw])?;
    let mut y = conv2d_named(g, p, "dec.bottom", z, 0)?;
    y = g.gelu(y)?;
    for i in 0..3 {
        y = g.upsample2x(y)?;
        let mut skip = conv2d_named(g, p, &format!("dec.skip.{i}"), z, 0)?;
        for _ in 0..=i {
            skip = g.upsample2x(skip)?;
        }
        let parts = if i == 2 { vec![y, skip, frames] } else { vec![y, skip] };
        let cat = g.concat(&parts, 1)?;
        y = conv2d_named(g, p, &format!("dec.up.{i}"), cat, 1)?;
        y = g.gelu(y)?;
    }
    let y = conv2d_named(g, p, "dec.head", y, 0)?;
    let y = g.add(y, frames)?;
    let y = g.reshape(y, &[b, s, 1, hw, hw])?;
    let y = g.permute(y, &[0, 2, 1, 3, 4])?;
    Ok((y, trace))
}

/// Evaluates the model on a frame sequence; returns `T + 1` frames.
pub fn stt_forward(p: &ParamStore, cfg: &SttConfig, frames: &FrameSequence) -> Result<FrameSequence> {
    if frames.size != cfg.image_size {
        return Err(CoreError::input("stt_forward", format!("frame size {} but model expects {}", frames.size, cfg.image_size)));
    }
    if !frames.is_finite() {
        return Err(CoreError::input("stt_forward", "non-finite input frame"));
    }
    let mut g = Graph::inference();
    let x = g.constant(frames.to_tensor());
    let y = forward_graph(&mut g, p, cfg, x)?;
    FrameSequence::from_tensor(g.value(y)?)
}

/// Refined versions of a two-frame input (slots 0 and 1).
pub fn refine(p: &ParamStore, cfg: &SttConfig, pair: &FrameSequence) -> Result<FrameSequence> {
    if pair.len() != 2 {
        return Err(CoreError::input("refine", format!("expected 2 frames, got {}", pair.len())));
    }
    Ok(stt_forward(p, cfg, pair)?.slice(0, 2))
}

/// Prediction of the frame following `history`.
pub fn predict_next(p: &ParamStore, cfg: &SttConfig, history: &FrameSequence) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(CoreError::input("predict_next", "empty history"));
    }
    let t = history.len();
    Ok(stt_forward(p, cfg, history)?.frames.swap_remove(t))
}

/// `(Σ_t ‖a(t) − b(t)‖_p^p)^{1/p}`
pub fn bochner_distance(a: &FrameSequence, b: &FrameSequence, p: f64) -> Result<f64> {
    if a.size != b.size || a.len() != b.len() {
        return Err(CoreError::input("bochner_distance", format!("shapes {}×{} and {}×{}", a.len(), a.size, b.len(), b.size)));
    }
    if !(p >= 1.0) {
        return Err(CoreError::input("bochner_distance", format!("exponent {p} < 1")));
    }
    let s: f64 = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs().powf(p)).sum::<f64>())
        .sum();
    Ok(s.powf(1.0 / p))
}
