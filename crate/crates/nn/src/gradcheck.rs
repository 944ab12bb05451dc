//! Central finite-difference gradient checking.
//!
//! The function under test may return a tensor of any shape; it is reduced to
//! a scalar with fixed random weights `w` so every output element takes part.
//! Analytic gradients come from the tape, numeric ones from re-evaluating the
//! forward pass on an inference tape and forming `Σ w·y` in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst norm-wise relative error over all checked tensors.
    pub max_rel_err: f64,
    /// Name (or index) of the worst tensor.
    pub worst: String,
    pub coords_checked: usize,
}

/// Finite-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`
    #[default]
    Central,
    /// `(8(f(x+ε) − f(x−ε)) − (f(x+2ε) − f(x−2ε))) / 12ε`
    FourthOrder,
}

impl Stencil {
    fn derivative(self, eps: f32, mut at: impl FnMut(f32) -> Result<f64>) -> Result<f64> {
        let e = eps as f64;
        let d1 = at(eps)? - at(-eps)?;
        match self {
            Stencil::Central => Ok(d1 / (2.0 * e)),
            Stencil::FourthOrder => {
                let d2 = at(2.0 * eps)? - at(-2.0 * eps)?;
                Ok((8.0 * d1 - d2) / (12.0 * e))
            }
        }
    }
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn weights_for(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
}

fn projected(y: &Tensor, w: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn pick_coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|_| rng.random_range(0..n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = fd
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(an.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-9 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks gradients with respect to the given input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, eps: f32, seed: u64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_inputs_with(inputs, f, eps, Stencil::Central, seed, max_coords)
}

pub fn check_inputs_with<F>(inputs: &[Tensor], f: F, eps: f32, stencil: Stencil, seed: u64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let w = weights_for(g.value(y)?.shape(), seed);
    let wy = g.mul_const(y, &w)?;
    let loss = g.sum_all(wy)?;
    let grads = g.backward(loss)?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(projected(g.value(y)?, &w))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    for (k, t) in inputs.iter().enumerate() {
        let an_full = grads.wrt(vars[k])?.map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let coords = pick_coords(t.len(), max_coords, &mut rng);
        let mut fd = Vec::with_capacity(coords.len());
        let mut an = Vec::with_capacity(coords.len());
        let mut ins = inputs.to_vec();
        for &i in &coords {
            let d = stencil.derivative(eps, |h| {
                ins[k].data_mut()[i] = t.data()[i] + h;
                eval(&ins)
            })?;
            ins[k].data_mut()[i] = t.data()[i];
            fd.push(d);
            an.push(an_full[i] as f64);
        }
        report.coords_checked += coords.len();
        let e = rel_err(&fd, &an);
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("input {k}");
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every tensor of a parameter store.
pub fn check_params<F>(store: &ParamStore, f: F, eps: f32, seed: u64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_params_with(store, f, eps, Stencil::Central, seed, max_coords)
}

pub fn check_params_with<F>(store: &ParamStore, f: F, eps: f32, stencil: Stencil, seed: u64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    let w = weights_for(g.value(y)?.shape(), seed);
    let wy = g.mul_const(y, &w)?;
    let loss = g.sum_all(wy)?;
    let grads = g.backward(loss)?.params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let y = f(&mut g, s)?;
        Ok(projected(g.value(y)?, &w))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    let mut work = store.clone();
    for name in store.names() {
        let base = store.get(name)?.clone();
        let an_full = grads.get(store, name)?.to_vec();
        let coords = pick_coords(base.len(), max_coords, &mut rng);
        let mut fd = Vec::with_capacity(coords.len());
        let mut an = Vec::with_capacity(coords.len());
        for &i in &coords {
            let d = stencil.derivative(eps, |h| {
                work.get_mut(name)?.data_mut()[i] = base.data()[i] + h;
                eval(&work)
            })?;
            work.get_mut(name)?.data_mut()[i] = base.data()[i];
            fd.push(d);
            an.push(an_full[i] as f64);
        }
        report.coords_checked += coords.len();
        let e = rel_err(&fd, &an);
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = name.clone();
        }
    }
    Ok(report)
}
