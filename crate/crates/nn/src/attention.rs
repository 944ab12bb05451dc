//! Rotary position embedding and masked scaled dot-product attention.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates pairs `(2i, 2i+1)` of the last axis of `[.., S, H, d]` data by `±m·θ_i`.
fn rotate(data: &[f32], shape: &[usize], positions: &[f64], inverse: bool) -> Vec<f32> {
    let r = shape.len();
    let (s, h, d) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = data.to_vec();
    let freqs: Vec<f64> = (0..d / 2).map(|i| ROPE_BASE.powf(-2.0 * i as f64 / d as f64)).collect();
    for chunk in out.chunks_mut(s * h * d) {
        for (t, &m) in positions.iter().enumerate() {
            let rot: Vec<(f64, f64)> = freqs.iter().map(|f| (sign * m * f).sin_cos()).collect();
            for head in 0..h {
                let v = &mut chunk[(t * h + head) * d..(t * h + head + 1) * d];
                for (i, &(sin, cos)) in rot.iter().enumerate() {
                    let (a, b) = (v[2 * i] as f64, v[2 * i + 1] as f64);
                    v[2 * i] = (a * cos - b * sin) as f32;
                    v[2 * i + 1] = (a * sin + b * cos) as f32;
                }
            }
        }
    }
    out
}

impl Graph {
    /// Applies RoPE to `x: [.., S, H, d_k]`; `positions[t]` is the position of sequence slot `t`.
    pub fn rope(&mut self, x: Var, positions: &[f64]) -> Result<Var> {
        let xs = self.shape(x)?;
        if xs.len() < 3 {
            return Err(NnError::input("rope", format!("need [.., S, H, d], got {xs:?}")));
        }
        let r = xs.len();
        if xs[r - 1] % 2 != 0 {
            return Err(NnError::input("rope", format!("head dimension {} is odd", xs[r - 1])));
        }
        if positions.len() != xs[r - 3] {
            return Err(NnError::input(
                "rope",
                format!("{} positions for sequence length {}", positions.len(), xs[r - 3]),
            ));
        }
        let y = rotate(self.value(x)?.data(), &xs, positions, false);
        let out = Tensor::new(&xs, y)?;
        let pos = positions.to_vec();
        self.custom(
            &[x],
            out,
            Box::new(move |c| vec![Some(rotate(c.grad, c.output.shape(), &pos, true))]),
        )
    }
}

/// Plain-tensor RoPE, for callers outside a tape.
pub fn rope_apply(x: &Tensor, positions: &[f64]) -> Result<Tensor> {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let y = g.rope(v, positions)?;
    Ok(g.value(y)?.clone())
}

/// Which key slots a query slot may attend to. Always causal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CausalMask {
    window: Option<usize>,
}

impl CausalMask {
    /// Every earlier slot and the slot itself.
    pub fn full() -> Self {
        CausalMask { window: None }
    }

    /// The slot itself and the `width - 1` preceding slots.
    pub fn sliding(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(NnError::Config("attention window must be at least 1".into()));
        }
        Ok(CausalMask { window: Some(width) })
    }

    /// Builds a mask from configuration; a non-causal request is rejected.
    pub fn from_config(causal: bool, window: Option<usize>) -> Result<Self> {
        if !causal {
            return Err(NnError::Config("non-causal attention masks are not supported".into()));
        }
        match window {
            Some(w) => Self::sliding(w),
            None => Ok(Self::full()),
        }
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        key <= query && self.window.is_none_or(|w| query - key < w)
    }

    /// `[S, S]` additive mask: 0 where allowed, −∞ elsewhere.
    pub fn additive(&self, s: usize) -> Tensor {
        let data = (0..s * s)
            .map(|ij| if self.allowed(ij / s, ij % s) { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Tensor::new(&[s, s], data).expect("square mask")
    }
}

impl Graph {
    /// Scaled dot-product attention over the sequence axis of `q, k, v: [.., S, H, d]`.
    /// Returns the output `[.., S, H, d]` and the weights `[.., H, S, S]`.
    pub fn causal_attention_weights(&mut self, q: Var, k: Var, v: Var, mask: &CausalMask) -> Result<(Var, Var)> {
        let qs = self.shape(q)?;
        let (ks, vs) = (self.shape(k)?, self.shape(v)?);
        if qs.len() < 3 || qs != ks || qs != vs {
            return Err(NnError::shape("causal_attention", &qs, &ks));
        }
        let r = qs.len();
        let (s, d) = (qs[r - 3], qs[r - 1]);
        let mut to_heads: Vec<usize> = (0..r).collect();
        to_heads.swap(r - 3, r - 2);
        let qh = self.permute(q, &to_heads)?;
        let kh = self.permute(k, &to_heads)?;
        let vh = self.permute(v, &to_heads)?;
        let kt = self.transpose_last(kh)?;
        let scores = self.matmul(qh, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f32).sqrt())?;
        let scores = self.add_const(scores, &mask.additive(s))?;
        let weights = self.softmax_last(scores)?;
        let out = self.matmul(weights, vh)?;
        let out = self.permute(out, &to_heads)?;
        Ok((out, weights))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, mask: &CausalMask) -> Result<Var> {
        Ok(self.causal_attention_weights(q, k, v, mask)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_semantics() {
        let m = CausalMask::full();
        assert!(m.allowed(3, 0) && m.allowed(3, 3) && !m.allowed(2, 3));
        let w = CausalMask::sliding(2).unwrap();
        assert!(w.allowed(3, 2) && !w.allowed(3, 1));
        assert!(CausalMask::from_config(false, None).is_err());
        assert!(CausalMask::sliding(0).is_err());
        let a = m.additive(3);
        assert_eq!(a.data()[1], f32::NEG_INFINITY);
        assert_eq!(a.data()[3], 0.0);
    }

    #[test]
    fn rope_position_zero_is_identity_and_odd_dim_fails() {
        let x = Tensor::new(&[1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(rope_apply(&x, &[0.0]).unwrap(), x);
        let odd = Tensor::zeros(&[1, 1, 3]);
        assert!(rope_apply(&odd, &[0.0]).is_err());
    }
}
