//! Random piecewise-constant phantoms under a whole-object affine motion, and
//! simulated sparse-angle measurements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use tcr_nn::par;

use crate::error::{CoreError, Result};
use crate::frames::{FrameSequence, SinoStep, Sinogram};
use crate::geometry::ScanGeometry;

const MAX_RETRIES: usize = 1000;
const BOUNDARY_SAMPLES: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    /// Half side lengths for rectangles, semi-axes otherwise.
    pub half_axes: [f64; 2],
    pub orientation: f64,
    pub intensity: f64,
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.orientation.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = (c * dx + s * dy) / self.half_axes[0];
        let v = (-s * dx + c * dy) / self.half_axes[1];
        match self.kind {
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse | ShapeKind::Circle => u * u + v * v <= 1.0,
        }
    }

    /// Points whose convex hull contains the shape.
    fn hull_points(&self) -> Vec<[f64; 2]> {
        let (s, c) = self.orientation.sin_cos();
        let local: Vec<(f64, f64)> = match self.kind {
            ShapeKind::Rectangle => vec![(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)],
            _ => {
                // circumscribed polygon: scale vertices by 1/cos(π/n)
                let k = 1.0 / (PI / BOUNDARY_SAMPLES as f64).cos();
                (0..BOUNDARY_SAMPLES)
                    .map(|i| {
                        let a = 2.0 * PI * i as f64 / BOUNDARY_SAMPLES as f64;
                        (k * a.cos(), k * a.sin())
                    })
                    .collect()
            }
        };
        local
            .into_iter()
            .map(|(u, v)| {
                let (x, y) = (u * self.half_axes[0], v * self.half_axes[1]);
                [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
            })
            .collect()
    }
}

/// Per-step affine map `p ↦ L p + b`, with `L = e^{log_scale} R(rotation) [[1, shear], [0, 1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMotion {
    pub translation: [f64; 2],
    pub rotation: f64,
    pub log_scale: f64,
    pub shear: f64,
}

impl AffineMotion {
    pub fn identity() -> Self {
        AffineMotion {
            translation: [0.0, 0.0],
            rotation: 0.0,
            log_scale: 0.0,
            shear: 0.0,
        }
    }

    fn linear(&self) -> [[f64; 2]; 2] {
        let k = self.log_scale.exp();
        let (s, c) = self.rotation.sin_cos();
        [[k * c, k * (c * self.shear - s)], [k * s, k * (s * self.shear + c)]]
    }

    pub fn determinant(&self) -> f64 {
        (2.0 * self.log_scale).exp()
    }

    /// The `t`-fold composition as `(L^t, b_t)`.
    pub fn power(&self, t: usize) -> ([[f64; 2]; 2], [f64; 2]) {
        let l = self.linear();
        let mut m = [[1.0, 0.0], [0.0, 1.0]];
        let mut b = [0.0, 0.0];
        for _ in 0..t {
            m = matmul2(&l, &m);
            b = add2(apply2(&l, b), self.translation);
        }
        (m, b)
    }
}

fn matmul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn apply2(m: &[[f64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
    [m[0][0] * p[0] + m[0][1] * p[1], m[1][0] * p[0] + m[1][1] * p[1]]
}

fn add2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn inverse2(m: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let d = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_steps: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub intensity: [f64; 2],
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_log_scale: f64,
    pub max_shear: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_steps: 10,
            size: 64,
            min_shapes: 3,
            max_shapes: 5,
            intensity: [0.2, 1.0],
            max_translation: 0.03,
            max_rotation: 0.05,
            max_log_scale: 0.02,
            max_shear: 0.02,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("phantom: {m}")));
        if self.min_shapes < 1 || self.min_shapes > self.max_shapes {
            return bad("shape count range is empty");
        }
        if !(self.intensity[0] > 0.0 && self.intensity[0] <= self.intensity[1] && self.intensity[1] <= 1.0) {
            return bad("intensity range must lie in (0, 1]");
        }
        if self.n_steps < 1 || self.size < 2 {
            return bad("need at least one step and two pixels");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub shapes: Vec<Shape>,
    pub motion: AffineMotion,
    pub n_steps: usize,
    pub size: usize,
}

impl PhantomSpec {
    /// True when every shape stays inside the unit disc at every step.
    pub fn stays_inside(&self) -> bool {
        let pts: Vec<[f64; 2]> = self.shapes.iter().flat_map(|s| s.hull_points()).collect();
        (0..self.n_steps).all(|t| {
            let (m, b) = self.motion.power(t);
            pts.iter().all(|&p| {
                let q = add2(apply2(&m, p), b);
                q[0] * q[0] + q[1] * q[1] <= 1.0
            })
        })
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Shape {
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Circle,
    };
    let r = 0.6 * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    let ax = rng.random_range(0.08..0.3);
    let ay = if kind == ShapeKind::Circle { ax } else { rng.random_range(0.08..0.3) };
    Shape {
        kind,
        center: [r * a.cos(), r * a.sin()],
        half_axes: [ax, ay],
        orientation: rng.random_range(0.0..PI),
        intensity: rng.random_range(cfg.intensity[0]..=cfg.intensity[1]),
    }
}

/// Draws a phantom by rejection until every shape stays in the unit disc over the horizon.
pub fn sample_phantom(seed: u64, cfg: &PhantomConfig) -> Result<PhantomSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RETRIES {
        let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        let shapes = (0..n).map(|_| sample_shape(&mut rng, cfg)).collect();
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let motion = AffineMotion {
            translation: [sym(&mut rng, cfg.max_translation), sym(&mut rng, cfg.max_translation)],
            rotation: sym(&mut rng, cfg.max_rotation),
            log_scale: sym(&mut rng, cfg.max_log_scale),
            shear: sym(&mut rng, cfg.max_shear),
        };
        let spec = PhantomSpec {
            seed,
            shapes,
            motion,
            n_steps: cfg.n_steps,
            size: cfg.size,
        };
        if spec.stays_inside() {
            return Ok(spec);
        }
    }
    Err(CoreError::Generation(format!("seed {seed}: no admissible phantom after {MAX_RETRIES} draws")))
}

/// Renders frame `t` by pulling pixel centres back through the `t`-fold motion.
pub fn render_frame(spec: &PhantomSpec, t: usize) -> Vec<f64> {
    let size = spec.size;
    let h = 2.0 / size as f64;
    let (m, b) = spec.motion.power(t);
    let inv = inverse2(&m);
    let mut img = vec![0.0; size * size];
    par::for_each_chunk(&mut img, size, |i, row| {
        let y = -1.0 + (i as f64 + 0.5) * h;
        for (j, px) in row.iter_mut().enumerate() {
            let x = -1.0 + (j as f64 + 0.5) * h;
            let p = apply2(&inv, [x - b[0], y - b[1]]);
            let v: f64 = spec.shapes.iter().filter(|s| s.contains(p)).map(|s| s.intensity).sum();
            *px = v.min(1.0);
        }
    });
    img
}

pub fn render_sequence(spec: &PhantomSpec) -> FrameSequence {
    FrameSequence {
        size: spec.size,
        frames: (0..spec.n_steps).map(|t| render_frame(spec, t)).collect(),
    }
}

/// How the measurement noise standard deviation is derived from the clean data of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `σ = level · max |ψ_t|`
    #[default]
    Peak,
    /// `σ = level · ‖ψ_t‖ / √m`, so that `‖δ‖ / ‖ψ‖ ≈ level`.
    Rms,
}

pub fn simulate_measurements(seq: &FrameSequence, geom: &ScanGeometry, noise_level: f64, scale: NoiseScale, seed: u64) -> Result<Sinogram> {
    if seq.len() != geom.n_steps() {
        return Err(CoreError::input("simulate_measurements", format!("{} frames for {} steps", seq.len(), geom.n_steps())));
    }
    if seq.size != geom.image_size {
        return Err(CoreError::input("simulate_measurements", format!("frame size {} vs geometry {}", seq.size, geom.image_size)));
    }
    if !(noise_level >= 0.0) {
        return Err(CoreError::input("simulate_measurements", format!("noise level {noise_level}")));
    }
    let mut steps = Vec::with_capacity(seq.len());
    for (t, frame) in seq.frames.iter().enumerate() {
        let op = geom.operator(t)?;
        let mut data = op.project(frame)?;
        if noise_level > 0.0 {
            let sigma = noise_level
                * match scale {
                    NoiseScale::Peak => data.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                    NoiseScale::Rms => (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt(),
                };
            if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
        }
        steps.push(SinoStep {
            angles: op.angles().to_vec(),
            data,
        });
    }
    Ok(Sinogram {
        offsets: geom.offsets(),
        steps,
    })
}
