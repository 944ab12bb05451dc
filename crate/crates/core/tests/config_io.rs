use tcr_core::config::{ExperimentConfig, Preset};
use tcr_core::frames::FrameSequence;
use tcr_core::io::{decode_pgm, encode_pgm, frame_grid, metrics_csv, pooled_rows, psnr_over_time_csv, read_results, write_results, ResultEntry};
use tcr_core::pipeline::{FrameMetrics, ReconConfig, SolverKind};
use tcr_core::CoreError;

fn schema_pointer(r: Result<ExperimentConfig, CoreError>) -> String {
    match r {
        Err(CoreError::Schema { pointer, .. }) => pointer,
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn presets_validate_and_differ_in_scale() {
    let desk = ExperimentConfig::desk();
    let paper = ExperimentConfig::paper();
    desk.validate().unwrap();
    paper.validate().unwrap();
    assert_eq!((desk.geometry.image_size, paper.geometry.image_size), (32, 64));
    assert_eq!(paper.phantom.train_count, 5000);
    assert_eq!(paper.eval.alpha_points_per_decade, 8);
    assert_eq!(ExperimentConfig::from_json(Preset::Paper, "{}").unwrap(), paper);
    assert!(Preset::from_name("desk").is_ok());
    assert!(Preset::from_name("medium").is_err());
}

#[test]
fn overrides_merge_into_the_preset() {
    let cfg = ExperimentConfig::from_json(
        Preset::Desk,
        r#"{"seed": 5, "recon": {"solver": "l1_tv", "beta_rest": 0.01}, "train_refine": {"lr": {"max_lr": 0.002}}}"#,
    )
    .unwrap();
    let desk = ExperimentConfig::desk();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.recon.solver, SolverKind::L1Tv);
    assert_eq!(cfg.recon.beta_rest, 0.01);
    assert_eq!(cfg.recon.alpha_rest, desk.recon.alpha_rest);
    assert_eq!(cfg.train_refine.lr.max_lr, 0.002);
    assert_eq!(cfg.train_refine.lr.warmup, desk.train_refine.lr.warmup);
    assert_eq!(cfg.model, desk.model);
}

#[test]
fn schema_errors_carry_json_pointers() {
    let p = |text: &str| schema_pointer(ExperimentConfig::from_json(Preset::Desk, text));
    assert_eq!(p(r#"{"colour": 1}"#), "/colour");
    assert_eq!(p(r#"{"geometry": {"n_steps": -1}}"#), "/geometry/n_steps");
    assert_eq!(p(r#"{"phantom": {"intensity": [0.2, "x"]}}"#), "/phantom/intensity/1");
    assert_eq!(p(r#"{"train_predict": {"epochs": 0}}"#), "/train_predict");
    assert_eq!(p(r#"{"eval": {"angle_sweep": []}}"#), "/eval");
    assert_eq!(p("[1, 2]"), "");
    assert_eq!(p("{"), "");
}

#[test]
fn protocol_datasets_follow_the_geometry_section() {
    let cfg = ExperimentConfig::from_json(Preset::Desk, r#"{"geometry": {"n_steps": 5, "init_angles": 12}}"#).unwrap();
    let opts = cfg.generate_options(tcr_core::dataset::Split::Validation, 7);
    assert_eq!(opts.count, cfg.phantom.validation_count);
    assert_eq!(opts.geometry.angles_per_step, vec![12, 12, 7, 7, 7]);
    assert_eq!(opts.phantom.n_steps, 5);
}

fn seq(values: &[f64], size: usize) -> FrameSequence {
    FrameSequence::new(size, values.iter().map(|&v| vec![v; size * size]).collect()).unwrap()
}

#[test]
fn results_round_trip_at_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let entries = vec![
        ResultEntry {
            index: 3,
            reconstructions: seq(&[0.1, 0.2, 0.3], 4),
            priors: seq(&[0.15, 0.25, 0.35], 4),
            discrepancy: vec![1.0, 2.0, 3.0],
            prior_discrepancy: vec![1.5, 2.5, 3.5],
        },
        ResultEntry {
            index: 7,
            reconstructions: seq(&[0.5, 0.6, 0.7], 4),
            priors: seq(&[0.0, 1.0, 0.5], 4),
            discrepancy: vec![0.0; 3],
            prior_discrepancy: vec![0.1; 3],
        },
    ];
    let recon = ReconConfig { alpha_init: 0.05, ..ReconConfig::default() };
    write_results(dir.path(), &recon, &entries).unwrap();
    let (back_cfg, back) = read_results(dir.path()).unwrap();
    assert_eq!(back_cfg, recon);
    assert_eq!(back.len(), 2);
    for (a, b) in entries.iter().zip(&back) {
        assert_eq!(a.index, b.index);
        assert_eq!(a.discrepancy, b.discrepancy);
        for (fa, fb) in a.reconstructions.frames.iter().zip(&b.reconstructions.frames) {
            assert!(fa.iter().zip(fb).all(|(x, y)| *x as f32 == *y as f32));
        }
    }
    assert!(dir.path().join("recon_7.f32").exists() && dir.path().join("prior_3.f32").exists());
    std::fs::write(dir.path().join("prior_3.f32"), [0u8; 12]).unwrap();
    assert!(matches!(read_results(dir.path()), Err(CoreError::Format(_))));
    assert!(matches!(read_results(&dir.path().join("absent")), Err(CoreError::Missing(_))));
}

#[test]
fn pgm_encoding_rescales_and_round_trips() {
    let bytes = encode_pgm(3, 2, &[-0.5, 0.0, 0.5, 1.0, 2.0, 0.25]).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    let (w, h, px) = decode_pgm(&bytes).unwrap();
    assert_eq!((w, h), (3, 2));
    assert_eq!(px, vec![0, 0, 128, 255, 255, 64]);
    assert!(encode_pgm(2, 2, &[0.0; 3]).is_err());
    assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn frame_grid_tiles_rows_and_steps() {
    let a = seq(&[0.0, 0.5], 2);
    let b = seq(&[0.25, 0.75], 2);
    let (w, h, img) = frame_grid(&[&a, &b], 1).unwrap();
    assert_eq!((w, h), (5, 5));
    assert_eq!(img[0], 0.0);
    assert_eq!(img[3], 0.5);
    assert_eq!(img[2], 1.0);
    assert_eq!(img[3 * 5], 0.25);
    assert_eq!(img[3 * 5 + 4], 0.75);
    assert!(frame_grid(&[&a, &seq(&[0.0], 2)], 1).is_err());
}

#[test]
fn metric_tables_pool_frames_across_sequences() {
    let m = vec![
        FrameMetrics { psnr: vec![10.0, 20.0], ssim: vec![0.5, 0.7] },
        FrameMetrics { psnr: vec![30.0, 40.0], ssim: vec![0.9, 1.0] },
    ];
    let rows = pooled_rows(&m);
    assert_eq!((rows[0].psnr_mean, rows[0].count), (25.0, 4));
    assert_eq!((rows[1].psnr_mean, rows[1].count), (30.0, 2));
    let csv = metrics_csv(&[("reconstruction", rows[1])]);
    assert_eq!(csv.lines().nth(1).unwrap(), "reconstruction,last_frame,30.000000,10.000000,0.850000,0.150000,2");
    let t = psnr_over_time_csv(&[("x", &m)]).unwrap();
    assert_eq!(t, "step,x_psnr\n0,20.000000\n1,30.000000\n");
}
