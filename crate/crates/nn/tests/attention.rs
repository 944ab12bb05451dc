use proptest::prelude::*;
use tcr_nn::{rope_apply, CausalMask, Graph, Tensor};

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

proptest! {
    #[test]
    fn rope_is_an_isometry(data in prop::collection::vec(-2.0f32..2.0, 3 * 2 * 8), p0 in 0u32..50) {
        let x = Tensor::new(&[3, 2, 8], data).unwrap();
        let pos: Vec<f64> = (0..3).map(|i| (p0 + i) as f64).collect();
        let y = rope_apply(&x, &pos).unwrap();
        prop_assert!((norm(&y) - norm(&x)).abs() <= 1e-6 * norm(&x).max(1.0));
    }

    #[test]
    fn rope_logits_depend_on_relative_position(
        q in prop::collection::vec(-1.0f32..1.0, 8),
        k in prop::collection::vec(-1.0f32..1.0, 8),
        m in 0u32..20, n in 0u32..20, s in 1u32..30,
    ) {
        let qt = Tensor::new(&[1, 1, 8], q).unwrap();
        let kt = Tensor::new(&[1, 1, 8], k).unwrap();
        let a = dot(rope_apply(&qt, &[m as f64]).unwrap().data(), rope_apply(&kt, &[n as f64]).unwrap().data());
        let b = dot(
            rope_apply(&qt, &[(m + s) as f64]).unwrap().data(),
            rope_apply(&kt, &[(n + s) as f64]).unwrap().data(),
        );
        prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::inference();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (o, w) = g.causal_attention_weights(q, k, v, &CausalMask::full()).unwrap();
    (g.value(o).unwrap().clone(), g.value(w).unwrap().clone())
}

fn ramp(shape: &[usize], phase: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i as f32) * 0.73 + phase).sin()).collect()).unwrap()
}

#[test]
fn singleton_sequence_returns_value_row() {
    let (q, k, v) = (ramp(&[1, 2, 4], 0.1), ramp(&[1, 2, 4], 0.2), ramp(&[1, 2, 4], 0.3));
    let (o, _) = attention(&q, &k, &v);
    for (a, b) in o.data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn weights_are_causal_and_normalised() {
    let s = 5;
    let (q, k, v) = (ramp(&[s, 2, 4], 0.1), ramp(&[s, 2, 4], 0.2), ramp(&[s, 2, 4], 0.3));
    let (_, w) = attention(&q, &k, &v);
    for h in 0..2 {
        for i in 0..s {
            let row = &w.data()[(h * s + i) * s..(h * s + i + 1) * s];
            let sum: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn perturbing_future_keys_leaves_past_outputs_bitwise_unchanged() {
    let s = 6;
    let (q, k, v) = (ramp(&[s, 2, 4], 0.1), ramp(&[s, 2, 4], 0.2), ramp(&[s, 2, 4], 0.3));
    let (base, _) = attention(&q, &k, &v);
    for j in 1..s {
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for e in j * 8..s * 8 {
            k2.data_mut()[e] += 3.0;
            v2.data_mut()[e] -= 2.0;
        }
        let (o, _) = attention(&q, &k2, &v2);
        assert_eq!(&o.data()[..j * 8], &base.data()[..j * 8], "slot < {j} changed");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_identity_conv() {
    let mut g = Graph::inference();
    let x = g.constant(ramp(&[3, 7], 0.0));
    let s = g.softmax_last(x).unwrap();
    for row in g.value(s).unwrap().data().chunks(7) {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let img = ramp(&[1, 2, 4, 4], 0.5);
    let xi = g.constant(img.clone());
    let mut w = Tensor::zeros(&[2, 2, 1, 1]);
    w.data_mut()[0] = 1.0;
    w.data_mut()[3] = 1.0;
    let wv = g.constant(w);
    let y = g.conv2d(xi, wv, None, 1, 0).unwrap();
    assert_eq!(g.value(y).unwrap(), &img);
}
