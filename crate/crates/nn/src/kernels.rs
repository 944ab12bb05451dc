//! Raw numeric kernels shared by the differentiable ops.
//!
//! Inner products accumulate in f64; each output element is owned by exactly
//! one task so the parallel path is bitwise equal to the sequential one.

use crate::par;

/// `c[m, n] = a[m, k] · b[k, n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    if n == 0 {
        return c;
    }
    par::for_each_chunk(&mut c, n, |i, row| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (acc_j, &bpj) in acc.iter_mut().zip(b_row) {
                *acc_j += aip * bpj as f64;
            }
        }
        for (r, s) in row.iter_mut().zip(&acc) {
            *r = *s as f32;
        }
    });
    c
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of a (up to) 3-D convolution over `[C, D, H, W]` items.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            let padded = self.in_dims[a] + self.pad_lo[a] + self.pad_hi[a];
            o[a] = if padded < self.kernel[a] {
                0
            } else {
                (padded - self.kernel[a]) / self.stride[a] + 1
            };
        }
        o
    }

    pub fn in_item(&self) -> usize {
        self.in_ch * self.in_dims.iter().product::<usize>()
    }

    pub fn out_item(&self) -> usize {
        self.out_ch * self.out_positions()
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims().iter().product()
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.patch_len()
    }

    /// Input coordinate read by output position `o` and kernel tap `k` along axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride[a] + k) as isize - self.pad_lo[a] as isize;
        if p < 0 || p as usize >= self.in_dims[a] {
            None
        } else {
            Some(p as usize)
        }
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let [od, oh, ow] = g.out_dims();
    let [_, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let p = od * oh * ow;
    let mut col = vec![0.0f32; g.patch_len() * p];
    par::for_each_chunk(&mut col, p, |row, out| {
        let c = row / (kd * kh * kw);
        let r = row % (kd * kh * kw);
        let (dz, dy, dx) = (r / (kh * kw), (r / kw) % kh, r % kw);
        let xc = &x[c * g.in_dims.iter().product::<usize>()..];
        for zo in 0..od {
            let Some(zi) = g.src(0, zo, dz) else { continue };
            for yo in 0..oh {
                let Some(yi) = g.src(1, yo, dy) else { continue };
                for xo in 0..ow {
                    if let Some(xi) = g.src(2, xo, dx) {
                        out[(zo * oh + yo) * ow + xo] = xc[(zi * ih + yi) * iw + xi];
                    }
                }
            }
        }
    });
    col
}

fn col2im(col: &[f32], g: &ConvGeom) -> Vec<f32> {
    let [od, oh, ow] = g.out_dims();
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let p = od * oh * ow;
    let taps = kd * kh * kw;
    let mut x = vec![0.0f32; g.in_item()];
    // one task per input channel; taps are visited in a fixed order
    par::for_each_chunk(&mut x, id * ih * iw, |c, xc| {
        for r in 0..taps {
            let (dz, dy, dx) = (r / (kh * kw), (r / kw) % kh, r % kw);
            let crow = &col[(c * taps + r) * p..(c * taps + r + 1) * p];
            for zo in 0..od {
                let Some(zi) = g.src(0, zo, dz) else { continue };
                for yo in 0..oh {
                    let Some(yi) = g.src(1, yo, dy) else { continue };
                    for xo in 0..ow {
                        if let Some(xi) = g.src(2, xo, dx) {
                            xc[(zi * ih + yi) * iw + xi] += crow[(zo * oh + yo) * ow + xo];
                        }
                    }
                }
            }
        }
    });
    x
}

/// Forward convolution over a batch of `n` items.
pub fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom, n: usize) -> Vec<f32> {
    let p = g.out_positions();
    let mut y = Vec::with_capacity(n * g.out_item());
    for b in 0..n {
        let col = im2col(&x[b * g.in_item()..(b + 1) * g.in_item()], g);
        let mut yb = matmul(w, &col, g.out_ch, g.patch_len(), p);
        if let Some(bias) = bias {
            for (o, &bo) in bias.iter().enumerate() {
                yb[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
            }
        }
        y.extend_from_slice(&yb);
    }
    y
}

/// Gradient of the convolution with respect to its input (transposed convolution).
pub fn conv_backward_input(gy: &[f32], w: &[f32], g: &ConvGeom, n: usize) -> Vec<f32> {
    let p = g.out_positions();
    let wt = transpose(w, g.out_ch, g.patch_len());
    let mut gx = Vec::with_capacity(n * g.in_item());
    for b in 0..n {
        let col = matmul(&wt, &gy[b * g.out_item()..(b + 1) * g.out_item()], g.patch_len(), g.out_ch, p);
        gx.extend_from_slice(&col2im(&col, g));
    }
    gx
}

/// Gradient of the convolution with respect to its weights, summed over the batch in order.
pub fn conv_backward_weight(x: &[f32], gy: &[f32], g: &ConvGeom, n: usize) -> Vec<f32> {
    let p = g.out_positions();
    let mut gw = vec![0.0f32; g.weight_len()];
    for b in 0..n {
        let col = im2col(&x[b * g.in_item()..(b + 1) * g.in_item()], g);
        let colt = transpose(&col, g.patch_len(), p);
        let part = matmul(&gy[b * g.out_item()..(b + 1) * g.out_item()], &colt, g.out_ch, p, g.patch_len());
        gw.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
    gw
}

/// Bias gradient: sum of the output gradient over batch and positions.
pub fn conv_backward_bias(gy: &[f32], g: &ConvGeom, n: usize) -> Vec<f32> {
    let p = g.out_positions();
    let mut gb = vec![0.0f64; g.out_ch];
    for b in 0..n {
        for (o, acc) in gb.iter_mut().enumerate() {
            let off = b * g.out_item() + o * p;
            *acc += gy[off..off + p].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    gb.into_iter().map(|v| v as f32).collect()
}
