//! Parallel-beam Radon transform on the unit disc.
//!
//! Rays are sampled at half-pixel spacing with bilinear interpolation between
//! pixel centres. The resulting sparse matrix is stored together with its
//! transpose, so [`RadonOperator::adjoint`] is the exact discrete adjoint of
//! [`RadonOperator::apply`].

use std::f64::consts::PI;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use tcr_nn::par;

use crate::error::{CoreError, Result};

/// How the projection angles move from one time step to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RotationScheme {
    /// `φ = π j / n + t Δ (mod π)`. `shift: None` means `Δ = π / (n · T)`.
    UniformShift {
        #[serde(default)]
        shift: Option<f64>,
    },
    /// Angles given verbatim for every step (external data).
    Explicit { angles: Vec<Vec<f64>> },
}

impl Default for RotationScheme {
    fn default() -> Self {
        RotationScheme::UniformShift { shift: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub n_offsets: usize,
    pub offset_min: f64,
    pub offset_max: f64,
    /// Number of angles at each time step; its length is the horizon `T`.
    pub angles_per_step: Vec<usize>,
    #[serde(default)]
    pub rotation: RotationScheme,
    pub image_size: usize,
}

impl ScanGeometry {
    /// `n_init` angles for the first two steps, `n_angles` afterwards, 100 offsets on `[-1, 1]`.
    pub fn rotating(image_size: usize, n_steps: usize, n_init: usize, n_angles: usize) -> Self {
        let angles_per_step = (0..n_steps).map(|t| if t < 2 { n_init } else { n_angles }).collect();
        ScanGeometry {
            n_offsets: 100,
            offset_min: -1.0,
            offset_max: 1.0,
            angles_per_step,
            rotation: RotationScheme::default(),
            image_size,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.angles_per_step.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("geometry: {m}")));
        if self.n_offsets < 2 {
            return bad(format!("n_offsets = {} < 2", self.n_offsets));
        }
        if !(self.offset_min >= -1.0 && self.offset_max <= 1.0 && self.offset_min < self.offset_max) {
            return bad(format!("offsets [{}, {}] not inside [-1, 1]", self.offset_min, self.offset_max));
        }
        if (self.offset_min + self.offset_max).abs() > 1e-12 {
            return bad("offsets not symmetric about 0".into());
        }
        if self.n_steps() < 2 {
            return bad(format!("n_steps = {} < 2", self.n_steps()));
        }
        if self.image_size < 2 {
            return bad(format!("image_size = {}", self.image_size));
        }
        if let Some(t) = self.angles_per_step.iter().position(|&n| n == 0) {
            return bad(format!("no angles at step {t}"));
        }
        match &self.rotation {
            RotationScheme::UniformShift { shift: Some(s) } if !s.is_finite() => bad("non-finite shift".into()),
            RotationScheme::Explicit { angles } => {
                if angles.len() != self.n_steps() {
                    return bad(format!("{} explicit angle lists for {} steps", angles.len(), self.n_steps()));
                }
                for (t, a) in angles.iter().enumerate() {
                    if a.len() != self.angles_per_step[t] {
                        return bad(format!("step {t}: {} angles, expected {}", a.len(), self.angles_per_step[t]));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn offsets(&self) -> Vec<f64> {
        linspace(self.offset_min, self.offset_max, self.n_offsets)
    }

    pub fn offset_spacing(&self) -> f64 {
        (self.offset_max - self.offset_min) / (self.n_offsets - 1) as f64
    }

    /// Per-step rotation increment for a step with `n_a` angles.
    pub fn shift_for(&self, n_a: usize) -> f64 {
        match self.rotation {
            RotationScheme::UniformShift { shift: Some(s) } => s,
            _ => PI / (n_a * self.n_steps()) as f64,
        }
    }

    pub fn angle_schedule(&self, t: usize) -> Result<Vec<f64>> {
        if t >= self.n_steps() {
            return Err(CoreError::Range {
                op: "angle_schedule",
                index: t,
                len: self.n_steps(),
            });
        }
        if let RotationScheme::Explicit { angles } = &self.rotation {
            let mut a = angles[t].clone();
            a.sort_by(f64::total_cmp);
            return Ok(a);
        }
        let n = self.angles_per_step[t];
        let shift = self.shift_for(n);
        let mut a: Vec<f64> = (0..n)
            .map(|j| (PI * j as f64 / n as f64 + t as f64 * shift).rem_euclid(PI))
            .collect();
        a.sort_by(f64::total_cmp);
        Ok(a)
    }

    /// Forward operator of step `t`.
    pub fn operator(&self, t: usize) -> Result<RadonOperator> {
        RadonOperator::new(self.image_size, &self.angle_schedule(t)?, &self.offsets())
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// A real linear map between flat vectors.
pub trait LinearOperator: Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn domain_len(&self) -> usize {
        (**self).domain_len()
    }
    fn range_len(&self) -> usize {
        (**self).range_len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (**self).apply(x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        (**self).adjoint(y)
    }
}

impl<T: LinearOperator + ?Sized + Send> LinearOperator for Arc<T> {
    fn domain_len(&self) -> usize {
        (**self).domain_len()
    }
    fn range_len(&self) -> usize {
        (**self).range_len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (**self).apply(x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        (**self).adjoint(y)
    }
}

/// `x ↦ diag(d) x`; with all ones it is the identity.
#[derive(Clone, Debug)]
pub struct DiagonalOperator {
    pub diag: Vec<f64>,
}

impl DiagonalOperator {
    pub fn identity(n: usize) -> Self {
        DiagonalOperator { diag: vec![1.0; n] }
    }
}

impl LinearOperator for DiagonalOperator {
    fn domain_len(&self) -> usize {
        self.diag.len()
    }
    fn range_len(&self) -> usize {
        self.diag.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.diag).map(|(a, d)| a * d).collect()
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y)
    }
}

#[derive(Clone, Debug)]
struct Csr {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    fn from_rows(rows: Vec<Vec<(u32, f64)>>, n_cols: usize) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for r in rows {
            for (c, v) in r {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr {
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0u32; self.indices.len()];
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.n_rows() {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k] as usize;
                indices[next[c]] = r as u32;
                values[next[c]] = self.values[k];
                next[c] += 1;
            }
        }
        Csr {
            n_cols: self.n_rows(),
            indptr,
            indices,
            values,
        }
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in self.indptr[r]..self.indptr[r + 1] {
            s += self.values[k] * x[self.indices[k] as usize];
        }
        s
    }

    fn matvec(&self, x: &[f64], chunk: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        par::for_each_chunk(&mut out, chunk, |ci, block| {
            for (i, o) in block.iter_mut().enumerate() {
                *o = self.row_dot(ci * chunk + i, x);
            }
        });
        out
    }
}

/// Discretised Radon transform for a fixed angle list, offset grid and image size.
#[derive(Clone, Debug)]
pub struct RadonOperator {
    size: usize,
    angles: Vec<f64>,
    offsets: Vec<f64>,
    forward: Csr,
    backward: Csr,
}

/// Line-integral weights of one ray over the pixel grid, merged by pixel index.
fn ray_weights(size: usize, angle: f64, offset: f64) -> Vec<(u32, f64)> {
    let h = 2.0 / size as f64;
    let n_samples = 2 * size;
    let ds = 2.0 / n_samples as f64;
    let (s, c) = angle.sin_cos();
    let mut acc: Vec<(u32, f64)> = Vec::with_capacity(4 * n_samples);
    let inside = |i: usize, j: usize| {
        let x = -1.0 + (j as f64 + 0.5) * h;
        let y = -1.0 + (i as f64 + 0.5) * h;
        x * x + y * y <= 1.0
    };
    for m in 0..n_samples {
        let w = -1.0 + (m as f64 + 0.5) * ds;
        let x = offset * c - w * s;
        let y = offset * s + w * c;
        let u = (x + 1.0) / h - 0.5;
        let v = (y + 1.0) / h - 0.5;
        let (j0, i0) = (u.floor(), v.floor());
        let (fu, fv) = (u - j0, v - i0);
        for (di, wi) in [(0.0, 1.0 - fv), (1.0, fv)] {
            for (dj, wj) in [(0.0, 1.0 - fu), (1.0, fu)] {
                let (i, j) = (i0 + di, j0 + dj);
                if i < 0.0 || j < 0.0 || i >= size as f64 || j >= size as f64 {
                    continue;
                }
                let wgt = wi * wj * ds;
                let (i, j) = (i as usize, j as usize);
                if wgt == 0.0 || !inside(i, j) {
                    continue;
                }
                acc.push(((i * size + j) as u32, wgt));
            }
        }
    }
    acc.sort_by_key(|e| e.0);
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(acc.len());
    for (c, v) in acc {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => merged.push((c, v)),
        }
    }
    merged
}

impl RadonOperator {
    pub fn new(size: usize, angles: &[f64], offsets: &[f64]) -> Result<Self> {
        if size < 2 {
            return Err(CoreError::input("radon", format!("image size {size}")));
        }
        if angles.is_empty() || offsets.is_empty() {
            return Err(CoreError::input("radon", "empty angle or offset list"));
        }
        if let Some(a) = angles.iter().find(|a| !(0.0..PI).contains(*a)) {
            return Err(CoreError::input("radon", format!("angle {a} outside [0, π)")));
        }
        if let Some(o) = offsets.iter().find(|o| !(-1.0..=1.0).contains(*o)) {
            return Err(CoreError::input("radon", format!("offset {o} outside [-1, 1]")));
        }
        let n_off = offsets.len();
        let rows = par::map_indexed(angles.len() * n_off, |r| ray_weights(size, angles[r / n_off], offsets[r % n_off]));
        let forward = Csr::from_rows(rows, size * size);
        let backward = forward.transpose();
        Ok(RadonOperator {
            size,
            angles: angles.to_vec(),
            offsets: offsets.to_vec(),
            forward,
            backward,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn nnz(&self) -> usize {
        self.forward.values.len()
    }

    /// Checked forward projection; returns the `(angle, offset)` sinogram row-major.
    pub fn project(&self, img: &[f64]) -> Result<Vec<f64>> {
        if img.len() != self.size * self.size {
            return Err(CoreError::input("radon_forward", format!("image has {} pixels, expected {}", img.len(), self.size * self.size)));
        }
        if let Some(i) = img.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::input("radon_forward", format!("non-finite pixel {i}")));
        }
        Ok(self.apply(img))
    }

    /// Checked adjoint.
    pub fn backproject(&self, sino: &[f64]) -> Result<Vec<f64>> {
        if sino.len() != self.range_len() {
            return Err(CoreError::input(
                "radon_adjoint",
                format!("sinogram has {} entries, expected {}×{}", sino.len(), self.angles.len(), self.offsets.len()),
            ));
        }
        Ok(self.adjoint(sino))
    }

    /// Ram-Lak filtered backprojection.
    pub fn fbp(&self, sino: &[f64]) -> Result<Vec<f64>> {
        let n = self.offsets.len();
        if n < 2 {
            return Err(CoreError::input("fbp", "need at least 2 offsets"));
        }
        if sino.len() != self.range_len() {
            return Err(CoreError::input("fbp", format!("sinogram has {} entries, expected {}", sino.len(), self.range_len())));
        }
        let d = (self.offsets[n - 1] - self.offsets[0]) / (n - 1) as f64;
        let filtered = ramlak_filter(sino, n, d);
        let h = 2.0 / self.size as f64;
        let scale = PI / self.angles.len() as f64 * d / (h * h);
        Ok(self.adjoint(&filtered).into_iter().map(|v| v * scale).collect())
    }
}

/// Convolves each length-`n` row with the spatial Ram-Lak kernel (spacing `d`).
pub fn ramlak_filter(rows: &[f64], n: usize, d: f64) -> Vec<f64> {
    let len = (2 * n).next_power_of_two();
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    for k in 0..n as isize {
        let v = if k == 0 {
            1.0 / (4.0 * d * d)
        } else if k % 2 == 1 {
            -1.0 / (PI * PI * (k * k) as f64 * d * d)
        } else {
            0.0
        };
        kernel[k as usize].re = v;
        if k > 0 {
            kernel[len - k as usize].re = v;
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fwd.process(&mut kernel);
    let mut out = vec![0.0; rows.len()];
    par::for_each_chunk(&mut out, n, |r, o| {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for (b, &v) in buf.iter_mut().zip(&rows[r * n..(r + 1) * n]) {
            b.re = v;
        }
        fwd.process(&mut buf);
        buf.iter_mut().zip(&kernel).for_each(|(b, k)| *b *= k);
        inv.process(&mut buf);
        for (o, b) in o.iter_mut().zip(&buf) {
            *o = b.re / len as f64 * d;
        }
    });
    out
}

impl LinearOperator for RadonOperator {
    fn domain_len(&self) -> usize {
        self.size * self.size
    }
    fn range_len(&self) -> usize {
        self.angles.len() * self.offsets.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.domain_len(), "radon forward: image length");
        self.forward.matvec(x, self.offsets.len())
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.range_len(), "radon adjoint: sinogram length");
        self.backward.matvec(y, self.size)
    }
}

/// Estimates `‖AᵀA‖` by power iteration (relative change < 1e-4 or 200 iterations).
/// Callers apply their own safety factor.
pub fn operator_norm(op: &dyn LinearOperator) -> f64 {
    let n = op.domain_len();
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut lambda = 0.0f64;
    for restart in 0..3 {
        if restart > 0 {
            v = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        normalize(&mut v);
        let mut degenerate = false;
        for _ in 0..200 {
            let av = op.apply(&v);
            let rq: f64 = av.iter().map(|a| a * a).sum();
            let mut w = op.adjoint(&av);
            let wn = norm(&w);
            if wn == 0.0 {
                degenerate = true;
                lambda = lambda.max(rq);
                break;
            }
            let done = lambda > 0.0 && (rq - lambda).abs() < 1e-4 * rq;
            lambda = rq;
            w.iter_mut().for_each(|x| *x /= wn);
            v = w;
            if done {
                break;
            }
        }
        if !degenerate {
            break;
        }
    }
    lambda
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}


/// A Radon operator together with its `‖AᵀA‖` estimate.
pub struct NormedOperator {
    pub op: RadonOperator,
    pub norm: f64,
    with_gradient: OnceLock<f64>,
}

impl NormedOperator {
    pub fn new(op: RadonOperator) -> Self {
        let norm = operator_norm(&op);
        NormedOperator { op, norm, with_gradient: OnceLock::new() }
    }

    /// `‖AᵀA + ∇ᵀ∇‖`, computed on first use.
    pub fn norm_with_gradient(&self) -> f64 {
        *self.with_gradient.get_or_init(|| {
            operator_norm(&crate::varsolve::StackedGradient { op: &self.op, size: self.op.size() })
        })
    }
}

/// Shares operators and their norms between samples scanned with identical geometry.
#[derive(Default)]
pub struct OperatorCache {
    map: Mutex<HashMap<(usize, Vec<u64>, Vec<u64>), Arc<NormedOperator>>>,
}

impl OperatorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, size: usize, angles: &[f64], offsets: &[f64]) -> Result<Arc<NormedOperator>> {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let key = (size, bits(angles), bits(offsets));
        if let Some(hit) = self.map.lock().expect("operator cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let entry = Arc::new(NormedOperator::new(RadonOperator::new(size, angles, offsets)?));
        self.map.lock().expect("operator cache poisoned").insert(key, entry.clone());
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("operator cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
