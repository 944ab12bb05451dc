//! Differentiable ops recorded on a [`Graph`].

use crate::error::{NnError, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{strides, Tensor};

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NnError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `tanh(u)` and `du/dx` for the GELU argument `u = c (x + a x³)`.
fn gelu_parts(v: f32) -> (f32, f32) {
    let t = (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh();
    (t, SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v))
}

fn unary(g: &[f32], d: impl Fn(usize) -> f32) -> Vec<f32> {
    g.iter().enumerate().map(|(i, &gi)| gi * d(i)).collect()
}

impl Graph {
    fn map_op(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
    ) -> Result<Var> {
        let xv = self.value(x)?;
        let y: Vec<f32> = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape(), y)?;
        self.custom(
            &[x],
            out,
            Box::new(move |c: &BackwardCtx| {
                let (xs, ys) = (c.inputs[0].data(), c.output.data());
                vec![Some(unary(c.grad, |i| df(xs[i], ys[i])))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        same_shape("add", av, bv)?;
        let y = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), y)?;
        self.custom(&[a, b], out, Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        same_shape("sub", av, bv)?;
        let y = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape(), y)?;
        self.custom(
            &[a, b],
            out,
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|g| -g).collect())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        same_shape("mul", av, bv)?;
        let y = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), y)?;
        self.custom(
            &[a, b],
            out,
            Box::new(|c| {
                let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
                vec![Some(unary(c.grad, |i| b[i])), Some(unary(c.grad, |i| a[i]))]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.map_op(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        self.map_op(x, move |v| v + s, |_, _| 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_op(
            x,
            |v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()),
            |v, _| {
                let t = (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh();
                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
            },
        )
    }

    /// Derivative of [`Graph::gelu`], itself differentiable so input gradients can be trained on.
    pub fn gelu_derivative(&mut self, x: Var) -> Result<Var> {
        self.map_op(
            x,
            |v| {
                let (t, du) = gelu_parts(v);
                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
            },
            |v, _| {
                let (t, du) = gelu_parts(v);
                let d2u = 6.0 * GELU_C * SQRT_2_OVER_PI * v;
                let s = 1.0 - t * t;
                s * du + 0.5 * v * s * (d2u - 2.0 * t * du * du)
            },
        )
    }

    /// Elementwise `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f32) -> Result<Var> {
        self.map_op(x, move |v| (v + eps).sqrt(), |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Adds a constant whose shape is a suffix of `x`'s shape (broadcast over leading axes).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x)?;
        let (xs, cs) = (xv.shape(), c.shape());
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return Err(NnError::shape("add_const", xs, cs));
        }
        let n = c.len().max(1);
        let y = xv.data().iter().enumerate().map(|(i, v)| v + c.data()[i % n]).collect();
        let out = Tensor::new(xs, y)?;
        self.custom(&[x], out, Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x)?;
        same_shape("mul_const", xv, c)?;
        let y = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape(), y)?;
        let cd = c.data().to_vec();
        self.custom(&[x], out, Box::new(move |c| vec![Some(unary(c.grad, |i| cd[i]))]))
    }

    /// Broadcasts a one-element variable to `shape`.
    pub fn broadcast_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let sv = self.value(s)?;
        if sv.len() != 1 {
            return Err(NnError::shape("broadcast_scalar", sv.shape(), &[1]));
        }
        let out = Tensor::full(shape, sv.item());
        self.custom(
            &[s],
            out,
            Box::new(|c| vec![Some(vec![c.grad.iter().map(|&g| g as f64).sum::<f64>() as f32])]),
        )
    }

    /// Adds `b` (length `x.shape[axis]`) along `axis`, broadcasting over all other axes.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (xv, bv) = (self.value(x)?, self.value(b)?);
        let xs = xv.shape().to_vec();
        if axis >= xs.len() || bv.shape() != [xs[axis]] {
            return Err(NnError::shape("add_bias", &xs, bv.shape()));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let ch = xs[axis];
        let y = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[(i / inner) % ch])
            .collect();
        let out = Tensor::new(&xs, y)?;
        self.custom(
            &[x, b],
            out,
            Box::new(move |c| {
                let mut gb = vec![0.0f64; ch];
                for (i, &g) in c.grad.iter().enumerate() {
                    gb[(i / inner) % ch] += g as f64;
                }
                vec![Some(c.grad.to_vec()), Some(gb.into_iter().map(|v| v as f32).collect())]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let n = xv.len();
        self.custom(&[x], Tensor::scalar(s as f32), Box::new(move |c| vec![Some(vec![c.grad[0]; n])]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len().max(1);
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Sum of squares.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let s: f64 = xv.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        self.custom(
            &[x],
            Tensor::scalar(s as f32),
            Box::new(|c| vec![Some(c.inputs[0].data().iter().map(|&v| 2.0 * v * c.grad[0]).collect())]),
        )
    }

    /// Squared Euclidean distance `Σ (a − b)²`.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.sum_sq(d)
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a)?.len().max(1);
        let s = self.l2_loss(a, b)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Averages over the trailing `n_axes` axes.
    pub fn mean_trailing(&mut self, x: Var, n_axes: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let xs = xv.shape().to_vec();
        if n_axes > xs.len() {
            return Err(NnError::input("mean_trailing", format!("{n_axes} axes of {xs:?}")));
        }
        let keep = &xs[..xs.len() - n_axes];
        let inner: usize = xs[xs.len() - n_axes..].iter().product();
        let y: Vec<f32> = xv
            .data()
            .chunks(inner.max(1))
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        let out = Tensor::new(keep, y)?;
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut g = Vec::with_capacity(c.grad.len() * inner);
                for &gi in c.grad {
                    g.extend(std::iter::repeat_n(gi / inner as f32, inner));
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x)?.clone().reshaped(shape)?;
        self.custom(&[x], out, Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x)?;
        let xs = xv.shape().to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::input("permute", format!("{perm:?} for shape {xs:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let y = permute_data(xv.data(), &xs, perm);
        let out = Tensor::new(&out_shape, y)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.custom(&[x], out, Box::new(move |c| vec![Some(permute_data(c.grad, c.output.shape(), &inv))]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x)?.shape().len();
        if r < 2 {
            return Err(NnError::input("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| NnError::input("concat", "no inputs"))?)?;
        if axis >= first.len() {
            return Err(NnError::input("concat", format!("axis {axis} of {first:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v)?;
            let ok = s.len() == first.len() && (0..s.len()).all(|a| a == axis || s[a] == first[a]);
            if !ok {
                return Err(NnError::shape("concat", &first, &s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(v)?.data();
                y.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, y)?;
        self.custom(
            xs,
            out,
            Box::new(move |c| {
                let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &sz) in grads.iter_mut().zip(&sizes) {
                        g.extend_from_slice(&c.grad[off..off + sz * inner]);
                        off += sz * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x)?;
        if axis >= xs.len() || start >= end || end > xs[axis] {
            return Err(NnError::input("slice", format!("{start}..{end} on axis {axis} of {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let (n, w) = (xs[axis], end - start);
        let d = self.value(x)?.data();
        let mut y = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            y.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = w;
        let out = Tensor::new(&shape, y)?;
        let total = xs.iter().product();
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut g = vec![0.0f32; total];
                for o in 0..outer {
                    g[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&c.grad[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x)?;
        if xs.len() < 2 {
            return Err(NnError::input("upsample2x", "rank < 2"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let outer: usize = xs[..xs.len() - 2].iter().product();
        let d = self.value(x)?.data();
        let mut y = vec![0.0f32; outer * 4 * h * w];
        for o in 0..outer {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    y[(o * 2 * h + i) * 2 * w + j] = d[(o * h + i / 2) * w + j / 2];
                }
            }
        }
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let out = Tensor::new(&shape, y)?;
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let mut g = vec![0.0f32; outer * h * w];
                for o in 0..outer {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            g[(o * h + i / 2) * w + j / 2] += c.grad[(o * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// `a[.., m, k] · b[k, n]` (shared right factor) or `a[.., m, k] · b[.., k, n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(NnError::shape("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch_a = &ash[..ash.len() - 2];
        let shared = bsh.len() == 2;
        if k != k2 || (!shared && batch_a != &bsh[..bsh.len() - 2]) {
            return Err(NnError::shape("matmul", &ash, &bsh));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let y = if shared {
            kernels::matmul(av.data(), bv.data(), batch * m, k, n)
        } else {
            let mut y = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                y.extend(kernels::matmul(
                    &av.data()[i * m * k..(i + 1) * m * k],
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            y
        };
        let out = Tensor::new(&out_shape, y)?;
        self.custom(
            &[a, b],
            out,
            Box::new(move |c| {
                let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
                if shared {
                    let ga = kernels::matmul(c.grad, &kernels::transpose(b, k, n), batch * m, n, k);
                    let gb = kernels::matmul(&kernels::transpose(a, batch * m, k), c.grad, k, batch * m, n);
                    return vec![Some(ga), Some(gb)];
                }
                let mut ga = Vec::with_capacity(batch * m * k);
                let mut gb = Vec::with_capacity(batch * k * n);
                for i in 0..batch {
                    let gi = &c.grad[i * m * n..(i + 1) * m * n];
                    let ai = &a[i * m * k..(i + 1) * m * k];
                    let bi = &b[i * k * n..(i + 1) * k * n];
                    ga.extend(kernels::matmul(gi, &kernels::transpose(bi, k, n), m, n, k));
                    gb.extend(kernels::matmul(&kernels::transpose(ai, m, k), gi, k, m, n));
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let axis = self.shape(y)?.len() - 1;
                self.add_bias(y, b, axis)
            }
            None => Ok(y),
        }
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let n = *xv.shape().last().ok_or_else(|| NnError::input("softmax_last", "scalar input"))?;
        let mut y = vec![0.0f32; xv.len()];
        for (row, out) in xv.data().chunks(n).zip(y.chunks_mut(n)) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f64> = row.iter().map(|&v| ((v - mx) as f64).exp()).collect();
            let s: f64 = e.iter().sum();
            out.iter_mut().zip(&e).for_each(|(o, &ei)| *o = (ei / s) as f32);
        }
        let out = Tensor::new(xv.shape(), y)?;
        self.custom(
            &[x],
            out,
            Box::new(move |c| {
                let y = c.output.data();
                let mut g = vec![0.0f32; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(c.grad.chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot as f32);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x)?;
        let n = *xv.shape().last().ok_or_else(|| NnError::input("layer_norm", "scalar input"))?;
        let (gv, bv) = (self.value(gamma)?, self.value(beta)?);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(NnError::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / n;
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; rows];
        for (r, (row, out)) in xv.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = is as f32;
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = ((v as f64 - mean) * is) as f32);
        }
        let y: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % n] + bv.data()[i % n])
            .collect();
        let out = Tensor::new(xv.shape(), y)?;
        self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |c| {
                let gamma = c.inputs[1].data();
                let mut gx = vec![0.0f32; xhat.len()];
                let mut gg = vec![0.0f64; n];
                let mut gb = vec![0.0f64; n];
                for r in 0..rows {
                    let gr = &c.grad[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..n {
                        let d = (gr[j] * gamma[j]) as f64;
                        s1 += d;
                        s2 += d * hr[j] as f64;
                        gg[j] += (gr[j] * hr[j]) as f64;
                        gb[j] += gr[j] as f64;
                    }
                    for j in 0..n {
                        let d = (gr[j] * gamma[j]) as f64;
                        gx[r * n + j] =
                            (inv_std[r] as f64 * (d - s1 / n as f64 - hr[j] as f64 * s2 / n as f64)) as f32;
                    }
                }
                vec![
                    Some(gx),
                    Some(gg.into_iter().map(|v| v as f32).collect()),
                    Some(gb.into_iter().map(|v| v as f32).collect()),
                ]
            }),
        )
    }

    /// 3-D convolution of `x: [N, C, D, H, W]` with `w: [O, C, kd, kh, kw]`.
    /// Padding is given per axis as `(before, after)` so temporal padding can be one-sided.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [(usize, usize); 3],
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x)?, self.shape(w)?);
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] || stride.contains(&0) {
            return Err(NnError::shape("conv3d", &xs, &ws));
        }
        let geom = ConvGeom {
            in_ch: xs[1],
            out_ch: ws[0],
            in_dims: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad_lo: [pad[0].0, pad[1].0, pad[2].0],
            pad_hi: [pad[0].1, pad[1].1, pad[2].1],
        };
        let od = geom.out_dims();
        if od.contains(&0) {
            return Err(NnError::shape("conv3d", &xs, &ws));
        }
        let n = xs[0];
        let bias = match b {
            Some(b) => {
                let bv = self.value(b)?;
                if bv.shape() != [geom.out_ch] {
                    return Err(NnError::shape("conv3d bias", bv.shape(), &[geom.out_ch]));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let y = kernels::conv_forward(self.value(x)?.data(), self.value(w)?.data(), bias.as_deref(), &geom, n);
        let out = Tensor::new(&[n, geom.out_ch, od[0], od[1], od[2]], y)?;
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        let has_bias = b.is_some();
        self.custom(
            &parents,
            out,
            Box::new(move |c| {
                let (x, w) = (c.inputs[0].data(), c.inputs[1].data());
                let mut g = vec![
                    Some(kernels::conv_backward_input(c.grad, w, &geom, n)),
                    Some(kernels::conv_backward_weight(x, c.grad, &geom, n)),
                ];
                if has_bias {
                    g.push(Some(kernels::conv_backward_bias(c.grad, &geom, n)));
                }
                g
            }),
        )
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, kh, kw]`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x)?, self.shape(w)?);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(NnError::shape("conv2d", &xs, &ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x5, w5, b, [1, stride, stride], [(0, 0), (pad, pad), (pad, pad)])?;
        let ys = self.shape(y)?;
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    /// Transposed 3-D convolution: the adjoint of [`Graph::conv3d`] with respect to its input.
    /// `x: [N, O, ..]` is mapped to `[N, C, out_dims]` using `w: [O, C, kd, kh, kw]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        stride: [usize; 3],
        pad: [(usize, usize); 3],
        out_dims: [usize; 3],
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x)?, self.shape(w)?);
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[0] {
            return Err(NnError::shape("conv_transpose3d", &xs, &ws));
        }
        let geom = ConvGeom {
            in_ch: ws[1],
            out_ch: ws[0],
            in_dims: out_dims,
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad_lo: [pad[0].0, pad[1].0, pad[2].0],
            pad_hi: [pad[0].1, pad[1].1, pad[2].1],
        };
        if geom.out_dims() != [xs[2], xs[3], xs[4]] {
            return Err(NnError::shape("conv_transpose3d", &xs, &out_dims));
        }
        let n = xs[0];
        let y = kernels::conv_backward_input(self.value(x)?.data(), self.value(w)?.data(), &geom, n);
        let out = Tensor::new(&[n, geom.in_ch, out_dims[0], out_dims[1], out_dims[2]], y)?;
        self.custom(
            &[x, w],
            out,
            Box::new(move |c| {
                let (x, w) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    Some(kernels::conv_forward(c.grad, w, None, &geom, n)),
                    Some(kernels::conv_backward_weight(c.grad, x, &geom, n)),
                ]
            }),
        )
    }

    /// Transposed 2-D convolution, adjoint of [`Graph::conv2d`] in its input.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_hw: [usize; 2]) -> Result<Var> {
        let (xs, ws) = (self.shape(x)?, self.shape(w)?);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(NnError::shape("conv_transpose2d", &xs, &ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv_transpose3d(
            x5,
            w5,
            [1, stride, stride],
            [(0, 0), (pad, pad), (pad, pad)],
            [1, out_hw[0], out_hw[1]],
        )?;
        self.reshape(y, &[xs[0], ws[1], out_hw[0], out_hw[1]])
    }
}

pub(crate) fn permute_data(d: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = d.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(d[off]);
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}
