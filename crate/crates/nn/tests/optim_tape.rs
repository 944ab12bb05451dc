use tcr_nn::checkpoint::Checkpoint;
use tcr_nn::{AdamConfig, Graph, NnError, OptimizerState, ParamGrads, ParamStore, Tensor};

fn scalar_store(v: f32) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
    s
}

fn grads_of(store: &ParamStore, g: f32) -> ParamGrads {
    let mut graph = Graph::new();
    let w = graph.param(store, "w").unwrap();
    let s = graph.scale(w, g).unwrap();
    let l = graph.sum_all(s).unwrap();
    graph.backward(l).unwrap().params(store)
}

#[test]
fn zero_gradient_without_decay_leaves_params() {
    let mut p = scalar_store(0.7);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::adamw_transformer()
    };
    let mut st = OptimizerState::new(&p, cfg);
    let gr = grads_of(&p, 0.0);
    st.step(&mut p, &gr, 1e-3).unwrap();
    assert_eq!(p.get("w").unwrap().item(), 0.7);
}

#[test]
fn first_step_is_minus_lr() {
    let mut p = scalar_store(0.0);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::adamw_transformer()
    };
    let mut st = OptimizerState::new(&p, cfg);
    let gr = grads_of(&p, 1.0);
    st.step(&mut p, &gr, 1e-2).unwrap();
    assert!((p.get("w").unwrap().item() as f64 + 1e-2).abs() < 1e-8);
}

#[test]
fn decay_only_shrinks_multiplicatively() {
    let mut p = scalar_store(2.0);
    let mut st = OptimizerState::new(&p, AdamConfig::adamw_transformer());
    let lr = 0.1;
    let gr = grads_of(&p, 0.0);
    st.step(&mut p, &gr, lr).unwrap();
    let expected = 2.0 * (1.0 - lr * 1e-2);
    assert!((p.get("w").unwrap().item() as f64 - expected).abs() < 1e-7);
}

#[test]
fn non_finite_gradient_skips_update() {
    let mut p = scalar_store(1.0);
    let mut st = OptimizerState::new(&p, AdamConfig::adamw_transformer());
    let gr = grads_of(&p, f32::NAN);
    let rep = st.step(&mut p, &gr, 0.1).unwrap();
    assert!(rep.skipped);
    assert_eq!(st.step, 0);
    assert_eq!(p.get("w").unwrap().item(), 1.0);
}

#[test]
fn stale_and_foreign_variables_are_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(1.0));
    g.reset();
    assert!(matches!(g.value(x), Err(NnError::StaleTape)));
    assert!(matches!(g.scale(x, 2.0), Err(NnError::StaleTape)));
    let mut other = Graph::new();
    let y = other.input(Tensor::scalar(1.0));
    let l = other.sum_all(y).unwrap();
    assert!(matches!(g.backward(l), Err(NnError::StaleTape)));
    let grads = other.backward(l).unwrap();
    let z = g.input(Tensor::scalar(3.0));
    assert!(matches!(grads.wrt(z), Err(NnError::StaleTape)));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[3, 2]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn checkpoint_round_trip_with_optimizer() {
    let mut p = ParamStore::new();
    p.insert("a", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap()).unwrap();
    p.insert("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
    let mut st = OptimizerState::new(&p, AdamConfig::adamw_transformer());
    let mut graph = Graph::new();
    let a = graph.param(&p, "a").unwrap();
    let l = graph.sum_sq(a).unwrap();
    let grads = graph.backward(l).unwrap().params(&p);
    st.step(&mut p, &grads, 1e-3).unwrap();
    let ck = Checkpoint {
        params: p.clone(),
        optimizer: Some(st.clone()),
        epoch: 4,
        config: serde_json::json!({"d": 8}),
    };
    let dir = tempfile_dir();
    ck.save(&dir).unwrap();
    let back = Checkpoint::load(&dir).unwrap();
    assert_eq!(back.params, p);
    assert_eq!(back.optimizer.unwrap(), st);
    assert_eq!(back.epoch, 4);
    assert_eq!(back.config["d"], 8);
    // truncated blob is a format error
    let blob = dir.join("tensors.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::load(&dir), Err(NnError::Format(_))));
    std::fs::remove_dir_all(&dir).ok();
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("tcr-nn-ck-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
