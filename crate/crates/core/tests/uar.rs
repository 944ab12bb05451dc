use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcr_core::dataset::{generate_dataset, Dataset, GenerateOptions, Split};
use tcr_core::geometry::{OperatorCache, ScanGeometry};
use tcr_core::phantom::{NoiseScale, PhantomConfig};
use tcr_core::uar::*;
use tcr_nn::gradcheck::{check_params_with, Stencil};
use tcr_nn::{Graph, NnError, ParamStore, Tensor, Var};

fn tiny(mode: UarMode) -> UarConfig {
    UarConfig {
        layers: 2,
        gamma_channels: 4,
        reg_channels: [4, 4, 4, 8, 8, 8],
        dense_hidden: 8,
        ..UarConfig::new(mode, 16)
    }
}

fn dataset(count: usize, steps: usize, init_angles: usize) -> Dataset {
    generate_dataset(&GenerateOptions {
        split: Split::Train,
        count,
        seed: 11,
        phantom: PhantomConfig { n_steps: steps, size: 16, ..PhantomConfig::default() },
        geometry: ScanGeometry::rotating(16, steps, init_angles, 3),
        noise_level: 0.0,
        noise_scale: NoiseScale::Peak,
    })
    .unwrap()
}

fn frame_tensor(ds: &Dataset, i: usize, t: usize) -> Tensor {
    Tensor::from_f64(&[1, 1, 1, 16, 16], &ds.ground_truth(i).unwrap().frames[t]).unwrap()
}

fn zero_residuals(p: &mut UarParams) {
    let names: Vec<String> = p.generator.names().iter().filter(|n| n.contains(".2.")).cloned().collect();
    for n in names {
        let t = p.generator.get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
}

#[test]
fn zeroed_updates_return_the_pseudo_inverse() {
    let ds = dataset(1, 3, 3);
    let cache = OperatorCache::new();
    let cfg = tiny(UarMode::Dynamic3D);
    let input = UarInput::new(&ds.samples[0].sinogram, 16, &[0, 1, 2], &cache).unwrap();
    let mut p = UarParams::init(&cfg).unwrap();
    let out = uar_generator(&p, &input).unwrap();
    assert_eq!((out.len(), out.size), (3, 16));
    zero_residuals(&mut p);
    let out = uar_generator(&p, &input).unwrap();
    let fbp = input.fbp().unwrap();
    let flat: Vec<f64> = out.frames.concat();
    for (a, b) in flat.iter().zip(&fbp) {
        assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()));
    }
}

#[test]
fn unroll_depth_changes_the_output() {
    let ds = dataset(1, 2, 3);
    let cache = OperatorCache::new();
    let input = UarInput::new(&ds.samples[0].sinogram, 16, &[1], &cache).unwrap();
    let shallow = UarParams::init(&UarConfig { layers: 1, ..tiny(UarMode::Static2D) }).unwrap();
    let deep = UarParams::init(&UarConfig { layers: 20, ..tiny(UarMode::Static2D) }).unwrap();
    let a = uar_generator(&shallow, &input).unwrap();
    let b = uar_generator(&deep, &input).unwrap();
    let diff: f64 = a.frames[0].iter().zip(&b.frames[0]).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3, "outputs differ by {diff}");
    assert_eq!(deep.generator.names().iter().filter(|n| n.ends_with(".tau")).count(), 20);
    assert_eq!(deep.generator.names().iter().filter(|n| n.ends_with(".sigma")).count(), 19);
    assert!(deep.generator.iter().filter(|(n, _)| n.ends_with("tau") || n.ends_with("sigma")).all(|(_, t)| t.data() == [0.01]));
}

#[test]
fn static_frame_matches_length_one_sequence() {
    let ds = dataset(1, 3, 3);
    let cache = OperatorCache::new();
    let st = UarParams::init(&tiny(UarMode::Static2D)).unwrap();
    let dynamic = UarParams {
        config: UarConfig { temporal_kernel: 1, ..tiny(UarMode::Dynamic3D) },
        ..st.clone()
    };
    let input = UarInput::new(&ds.samples[0].sinogram, 16, &[2], &cache).unwrap();
    let a = uar_generator(&st, &input).unwrap();
    let b = uar_generator(&dynamic, &input).unwrap();
    for (x, y) in a.frames[0].iter().zip(&b.frames[0]) {
        assert!((x - y).abs() <= 1e-6);
    }
    let f = frame_tensor(&ds, 0, 2);
    let ra = reg_loss(&Regularizer::new(&st), &f, &f, 0.5, 10.0).unwrap();
    let rb = reg_loss(&Regularizer::new(&dynamic), &f, &f, 0.5, 10.0).unwrap();
    assert!((ra.loss - rb.loss).abs() <= 1e-6);
}

#[test]
fn zero_critic_pays_the_full_penalty() {
    let ds = dataset(2, 2, 3);
    let mut p = UarParams::init(&tiny(UarMode::Static2D)).unwrap();
    for n in p.regularizer.names().to_vec() {
        let t = p.regularizer.get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let r = reg_loss(&Regularizer::new(&p), &frame_tensor(&ds, 0, 0), &frame_tensor(&ds, 1, 1), 0.3, 10.0).unwrap();
    assert!((r.loss - 10.0).abs() < 1e-4, "{}", r.loss);
}

#[test]
fn identical_samples_leave_only_the_penalty() {
    let ds = dataset(1, 2, 3);
    let p = UarParams::init(&tiny(UarMode::Static2D)).unwrap();
    let f = frame_tensor(&ds, 0, 1);
    let r = reg_loss(&Regularizer::new(&p), &f, &f, 0.7, 10.0).unwrap();
    assert_eq!(r.score_truth, r.score_generated);
    assert!((r.loss - 10.0 * r.penalty).abs() < 1e-5 * r.loss.abs().max(1.0));
}

/// `R(x) = x` on a single value.
struct Identity;

impl Critic for Identity {
    fn score(&self, g: &mut Graph, x: Var) -> tcr_core::Result<Var> {
        Ok(g.sum_all(x)?)
    }

    fn score_with_input_gradient(&self, g: &mut Graph, x: Var) -> tcr_core::Result<(Var, Var)> {
        let s = g.sum_all(x)?;
        let one = g.constant(Tensor::full(&g.shape(x)?, 1.0));
        Ok((s, one))
    }
}

#[test]
fn unit_slope_critic_gives_the_difference() {
    let (a, b) = (Tensor::full(&[1], 0.75), Tensor::full(&[1], -0.5));
    let r = reg_loss(&Identity, &a, &b, 0.4, 0.0).unwrap();
    assert!((r.loss - 1.25).abs() < 1e-7);
    assert!(reg_loss(&Identity, &a, &b, 1.5, 0.0).is_err());
}

#[test]
fn explicit_input_gradient_matches_the_tape() {
    let ds = dataset(1, 3, 3);
    for mode in [UarMode::Static2D, UarMode::Dynamic3D] {
        let p = UarParams::init(&tiny(mode)).unwrap();
        let x = match mode {
            UarMode::Static2D => frame_tensor(&ds, 0, 1),
            UarMode::Dynamic3D => Tensor::from_f64(&[1, 1, 3, 16, 16], &ds.ground_truth(0).unwrap().frames.concat()).unwrap(),
        };
        let mut g = Graph::new();
        let xv = g.input(x);
        let (score, grad) = Regularizer::new(&p).score_with_input_gradient(&mut g, xv).unwrap();
        let tape = g.backward(score).unwrap().wrt(xv).unwrap().unwrap().to_vec();
        let explicit = g.value(grad).unwrap().data().to_vec();
        let scale = tape.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (a, b) in tape.iter().zip(&explicit) {
            assert!((a - b).abs() <= 1e-5 * scale, "{mode:?}: {a} vs {b}");
        }
    }
}

fn as_nn(e: tcr_core::CoreError) -> NnError {
    NnError::Config(e.to_string())
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let ds = dataset(2, 2, 3);
    let p = UarParams::init(&tiny(UarMode::Static2D)).unwrap();
    let (t, u) = (frame_tensor(&ds, 0, 0), frame_tensor(&ds, 1, 1));
    let r = check_params_with(
        &p.regularizer,
        |g, s: &ParamStore| {
            let (tv, uv) = (g.constant(t.clone()), g.constant(u.clone()));
            let critic = Regularizer::from_store(s, &p.config);
            Ok(reg_loss_graph(g, &critic, tv, uv, 0.4, 10.0).map_err(as_nn)?.loss)
        },
        5e-2,
        Stencil::FourthOrder,
        5,
        12,
    )
    .unwrap();
    assert!(r.passes(1e-3), "relative error {:.3e} at {}", r.max_rel_err, r.worst);
}

#[test]
fn generator_loss_gradient_matches_finite_differences() {
    let ds = dataset(1, 2, 3);
    let cache = OperatorCache::new();
    let mut p = UarParams::init(&tiny(UarMode::Static2D)).unwrap();
    // move off the initialisation so every parameter has a sizeable effect
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in p.generator.names().to_vec() {
        for v in p.generator.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.1f32..0.1);
        }
    }
    let input = UarInput::new(&ds.samples[0].sinogram, 16, &[1], &cache).unwrap();
    let r = check_params_with(
        &p.generator,
        |g, s: &ParamStore| Ok(gen_loss_graph(g, s, &p, &input, 0.1).map_err(as_nn)?.loss),
        2e-2,
        Stencil::FourthOrder,
        3,
        12,
    )
    .unwrap();
    assert!(r.passes(1e-3), "relative error {:.3e} at {}", r.max_rel_err, r.worst);
    let plain = gen_loss(&p, &input, 0.0).unwrap();
    assert_eq!(plain.loss, plain.fidelity);
    let weighted = gen_loss(&p, &input, 0.1).unwrap();
    assert!((weighted.loss - (weighted.fidelity + 0.1 * weighted.score)).abs() < 1e-3 * weighted.loss.abs());
}

#[test]
fn smoke_run_covers_all_phases_and_round_trips() {
    let ds = dataset(1, 3, 3);
    let data = UarData::from_dataset(&ds).unwrap();
    let cfg = UarConfig { reg_epochs: 1, gen_epochs: 1, adv_epochs: 1, ..tiny(UarMode::Dynamic3D) };
    let dir = tempfile::tempdir().unwrap();
    let out = train_uar(&data, &cfg, Some(dir.path())).unwrap();
    let phases: Vec<&str> = out.log.iter().map(|r| r.phase.as_str()).collect();
    assert_eq!(phases, ["regularizer", "generator", "adversarial"]);
    for r in &out.log {
        assert!([r.reg_loss, r.penalty, r.gen_loss, r.fidelity].iter().flatten().all(|v| v.is_finite()));
    }
    assert!(out.log[0].gen_loss.is_none() && out.log[1].reg_loss.is_none());
    assert!(out.log[2].reg_loss.is_some() && out.log[2].gen_loss.is_some());
    let csv = std::fs::read_to_string(dir.path().join("uar_log.csv")).unwrap();
    assert!(csv.starts_with(UAR_LOG_HEADER));
    assert_eq!(csv.lines().count(), 4);
    let back = UarParams::load(&dir.path().join("uar")).unwrap();
    assert_eq!(back.config, cfg);
    for (n, t) in out.params.generator.iter().chain(out.params.regularizer.iter()) {
        let s = if n.starts_with("gen.") { &back.generator } else { &back.regularizer };
        assert_eq!(s.get(n).unwrap(), t);
    }
}

#[test]
fn samplers_draw_ground_truth_and_data_independently() {
    let ds = dataset(6, 3, 3);
    let data = UarData::from_dataset(&ds).unwrap();
    let cfg = UarConfig { layers: 1, reg_epochs: 2, gen_epochs: 0, adv_epochs: 0, ..tiny(UarMode::Static2D) };
    let mut steps = Vec::new();
    train_uar_traced(&data, &cfg, None, &mut |s| steps.push(s.clone())).unwrap();
    assert_eq!(steps.len(), 12);
    for epoch in steps.chunks(6) {
        let mut gt: Vec<usize> = epoch.iter().map(|s| s.truth.unwrap().0).collect();
        let mut me: Vec<usize> = epoch.iter().map(|s| s.measurement.0).collect();
        assert_ne!(gt, me, "ground truth and data indices coincide");
        gt.sort();
        me.sort();
        assert_eq!(gt, (0..6).collect::<Vec<_>>());
        assert_eq!(me, (0..6).collect::<Vec<_>>());
    }
    assert!(steps.iter().all(|s| s.truth.unwrap().1.is_some() && s.measurement.1.is_some()));
    let paired = steps.iter().filter(|s| s.truth.unwrap() == s.measurement).count();
    assert!(paired < steps.len() / 2);
}

#[test]
fn warmup_reduces_the_gradient_penalty() {
    let ds = dataset(4, 2, 3);
    let data = UarData::from_dataset(&ds).unwrap();
    let cfg = UarConfig { layers: 1, reg_epochs: 3, gen_epochs: 0, adv_epochs: 0, ..tiny(UarMode::Static2D) };
    let cache = OperatorCache::new();
    let probe: Vec<(Tensor, Tensor)> = (0..4)
        .map(|i| {
            let input = UarInput::new(&ds.samples[(i + 1) % 4].sinogram, 16, &[1], &cache).unwrap();
            (frame_tensor(&ds, i, 0), Tensor::from_f64(&input.image_shape(), &input.fbp().unwrap()).unwrap())
        })
        .collect();
    let mean_penalty = |p: &UarParams| {
        probe.iter().map(|(t, u)| reg_loss(&Regularizer::new(p), t, u, 0.5, 10.0).unwrap().penalty).sum::<f64>() / 4.0
    };
    let before = mean_penalty(&UarParams::init(&cfg).unwrap());
    let after = mean_penalty(&train_uar(&data, &cfg, None).unwrap().params);
    assert!(after < before, "penalty {before} → {after}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let cache = OperatorCache::new();
    let mixed = dataset(1, 3, 20);
    assert!(UarInput::new(&mixed.samples[0].sinogram, 16, &[0, 1, 2], &cache).is_err());
    assert!(UarInput::new(&mixed.samples[0].sinogram, 16, &[5], &cache).is_err());
    let p = UarParams::init(&tiny(UarMode::Static2D)).unwrap();
    let two = UarInput::new(&mixed.samples[0].sinogram, 16, &[0, 1], &cache).unwrap();
    assert!(uar_generator(&p, &two).is_err());
    assert!(UarConfig { layers: 0, ..tiny(UarMode::Static2D) }.validate().is_err());
    assert!(UarConfig { temporal_kernel: 2, ..tiny(UarMode::Dynamic3D) }.validate().is_err());
    let empty = UarData { truths: vec![], measurements: vec![], image_size: 16 };
    assert!(matches!(train_uar(&empty, &tiny(UarMode::Static2D), None), Err(tcr_core::CoreError::Config(_))));
    let big = UarData::from_dataset(&dataset(1, 2, 3)).unwrap();
    assert!(train_uar(&big, &UarConfig::new(UarMode::Static2D, 32), None).is_err());
}
