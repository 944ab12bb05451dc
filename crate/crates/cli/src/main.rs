//! `tcr`: data generation, training, reconstruction and evaluation from the shell.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or
//! arguments, 3 missing artifact, 4 numerical failure. Failures print one JSON
//! object to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tcr_core::config::{ExperimentConfig, Preset};
use tcr_core::dataset::{generate_dataset, read_dataset, write_dataset, Dataset, Split, DATASET_FORMAT};
use tcr_core::frames::{FrameSequence, Sinogram};
use tcr_core::geometry::OperatorCache;
use tcr_core::io::{
    encode_pgm, frame_grid, metrics_csv, pooled_rows, psnr_over_time_csv, read_results, write_results, ResultEntry,
};
use tcr_core::pipeline::{log_grid, select_alphas, tcr_reconstruct, FrameMetrics, Model, Priors, SolverKind};
use tcr_core::train::{prepare_training_set, refine_initial, train_prediction, train_refinement, TrainingSet};
use tcr_core::uar::{train_uar, UarData};
use tcr_core::{CoreError, Result};
use tcr_nn::par;

#[derive(Parser)]
#[command(name = "tcr", version, about = "Dynamic CT reconstruction with a learned causal prior")]
struct Cli {
    /// Base configuration the config file is layered on.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// JSON file overriding preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level `seed` (dataset generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded numerics.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    L2,
    L1,
    L1Tv,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms and sinograms into dataset directories.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// With `all`, writes `train/`, `validation/` and `test/` under `--out`.
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Angles per step after the first two; defaults to `geometry.angles`.
        #[arg(long)]
        angles: Option<usize>,
    },
    /// Train the refinement model for the first two frames.
    TrainRefine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the next-frame prediction model.
    TrainPredict {
        #[arg(long)]
        data: PathBuf,
        /// Trained refinement checkpoint supplying the first two frames.
        #[arg(long)]
        refine: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unrolled adversarial baseline.
    TrainUar {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct every sequence of a dataset.
    Reconstruct(ReconstructArgs),
    /// Write a metrics table comparing reconstructions with ground truth.
    Evaluate {
        /// Dataset with ground truth.
        #[arg(long)]
        reference: PathBuf,
        /// Results directory, or a dataset directory whose ground truth is scored.
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render frame grids and a PSNR-over-time table.
    Plot {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    refine: PathBuf,
    #[arg(long)]
    predict: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    alpha_rest: Option<f64>,
    /// Validation dataset for a grid search over both prior weights.
    #[arg(long, conflicts_with_all = ["alpha_init", "alpha_rest"])]
    select_alphas: Option<PathBuf>,
    /// Also write one PGM per reconstructed frame.
    #[arg(long)]
    pgm: bool,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = ExperimentConfig::load(preset, cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Accepts a checkpoint directory or the training output directory holding it.
fn load_model(dir: &Path, role: &str) -> Result<Model> {
    let nested = dir.join(role);
    Model::load(if nested.join("meta.json").exists() { &nested } else { dir })
}

fn load_set(dir: &Path, cfg: &ExperimentConfig, cache: &OperatorCache) -> Result<TrainingSet> {
    prepare_training_set(&read_dataset(dir)?, cache, cfg.train_refine.landweber_max_iter)
}

fn pairs(ds: &Dataset) -> Result<Vec<(Sinogram, FrameSequence)>> {
    (0..ds.len()).map(|i| Ok((ds.samples[i].sinogram.clone(), ds.ground_truth(i)?.clone()))).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, split: SplitArg, angles: Option<usize>) -> Result<()> {
    let angles = angles.unwrap_or(cfg.geometry.angles);
    let splits: Vec<(Split, PathBuf)> = match split {
        SplitArg::Train => vec![(Split::Train, out.to_path_buf())],
        SplitArg::Validation => vec![(Split::Validation, out.to_path_buf())],
        SplitArg::Test => vec![(Split::Test, out.to_path_buf())],
        SplitArg::All => vec![
            (Split::Train, out.join("train")),
            (Split::Validation, out.join("validation")),
            (Split::Test, out.join("test")),
        ],
    };
    for (s, dir) in splits {
        let ds = generate_dataset(&cfg.generate_options(s, angles))?;
        write_dataset(&ds, &dir)?;
        eprintln!("wrote {} sequences to {}", ds.len(), dir.display());
    }
    Ok(())
}

fn reconstruct(cfg: &ExperimentConfig, a: &ReconstructArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let refine = load_model(&a.refine, "refinement")?;
    let predict = load_model(&a.predict, "prediction")?;
    let priors = Priors { refine: &refine, predict: &predict };
    let cache = OperatorCache::new();
    let mut recon = cfg.recon.clone();
    if let Some(s) = a.solver {
        recon.solver = match s {
            SolverArg::L2 => SolverKind::L2,
            SolverArg::L1 => SolverKind::L1,
            SolverArg::L1Tv => SolverKind::L1Tv,
        };
    }
    recon.alpha_init = a.alpha_init.unwrap_or(recon.alpha_init);
    recon.alpha_rest = a.alpha_rest.unwrap_or(recon.alpha_rest);
    recon.validate().map_err(|e| CoreError::Schema { pointer: "/recon".into(), msg: e.to_string() })?;
    if let Some(val) = &a.select_alphas {
        let e = &cfg.eval;
        let grid = log_grid(e.alpha_min, e.alpha_max, e.alpha_points_per_decade)?;
        let sel = select_alphas(&pairs(&read_dataset(val)?)?, &priors, &recon, &grid, &grid, &cache)?;
        eprintln!("selected alpha_init {} alpha_rest {} (validation mse {:.3e})", sel.alpha_init, sel.alpha_rest, sel.mse);
        recon.alpha_init = sel.alpha_init;
        recon.alpha_rest = sel.alpha_rest;
    }
    let entries = par::map_indexed(ds.len(), |i| -> Result<ResultEntry> {
        let r = tcr_reconstruct(&ds.samples[i].sinogram, &priors, &recon, &cache)?;
        Ok(ResultEntry::from_result(i, &r))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_results(&a.out, &recon, &entries)?;
    if a.pgm {
        for e in &entries {
            let size = e.reconstructions.size;
            for (t, f) in e.reconstructions.frames.iter().enumerate() {
                fs::write(a.out.join(format!("recon_{}_t{t}.pgm", e.index)), encode_pgm(size, size, f)?)?;
            }
        }
    }
    eprintln!("wrote {} reconstructions to {}", entries.len(), a.out.display());
    Ok(())
}

fn is_results_dir(dir: &Path) -> Result<bool> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Err(CoreError::Missing(path.display().to_string()));
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    Ok(meta.get("format").and_then(|f| f.as_str()) != Some(DATASET_FORMAT))
}

fn truths(ds: &Dataset) -> Result<Vec<&FrameSequence>> {
    (0..ds.len()).map(|i| ds.ground_truth(i)).collect()
}

fn metrics_for(seqs: &[&FrameSequence], refs: &[&FrameSequence], data_range: f64) -> Result<Vec<FrameMetrics>> {
    par::map_indexed(seqs.len(), |i| FrameMetrics::compute(seqs[i], refs[i], data_range)).into_iter().collect()
}

fn matched<'a>(reference: &'a Dataset, entries: &[ResultEntry]) -> Result<Vec<&'a FrameSequence>> {
    entries.iter().map(|e| reference.ground_truth(e.index)).collect()
}

fn evaluate(cfg: &ExperimentConfig, reference: &Path, candidate: &Path, out: &Path) -> Result<()> {
    let refs = read_dataset(reference)?;
    let range = cfg.eval.data_range;
    let mut rows = Vec::new();
    if is_results_dir(candidate)? {
        let (_, entries) = read_results(candidate)?;
        let gt = matched(&refs, &entries)?;
        for (kind, seqs) in [
            ("reconstruction", entries.iter().map(|e| &e.reconstructions).collect::<Vec<_>>()),
            ("prior", entries.iter().map(|e| &e.priors).collect()),
        ] {
            rows.extend(pooled_rows(&metrics_for(&seqs, &gt, range)?).into_iter().map(|r| (kind, r)));
        }
    } else {
        let cand = read_dataset(candidate)?;
        if cand.len() != refs.len() {
            return Err(CoreError::input("evaluate", format!("{} candidate sequences for {} references", cand.len(), refs.len())));
        }
        let m = metrics_for(&truths(&cand)?, &truths(&refs)?, range)?;
        rows.extend(pooled_rows(&m).into_iter().map(|r| ("ground_truth", r)));
    }
    write_text(out, &metrics_csv(&rows))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn plot(cfg: &ExperimentConfig, reference: &Path, results: &Path, out: &Path) -> Result<()> {
    let refs = read_dataset(reference)?;
    let (_, entries) = read_results(results)?;
    let gt = matched(&refs, &entries)?;
    fs::create_dir_all(out)?;
    for (e, g) in entries.iter().zip(&gt) {
        let (w, h, img) = frame_grid(&[g, &e.priors, &e.reconstructions], 2)?;
        fs::write(out.join(format!("grid_{}.pgm", e.index)), encode_pgm(w, h, &img)?)?;
    }
    let range = cfg.eval.data_range;
    let recon = metrics_for(&entries.iter().map(|e| &e.reconstructions).collect::<Vec<_>>(), &gt, range)?;
    let prior = metrics_for(&entries.iter().map(|e| &e.priors).collect::<Vec<_>>(), &gt, range)?;
    write_text(&out.join("psnr_over_time.csv"), &psnr_over_time_csv(&[("reconstruction", &recon), ("prior", &prior)])?)?;
    eprintln!("wrote {} grids and psnr_over_time.csv to {}", entries.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { out, split, angles } => gen_data(&cfg, out, *split, *angles),
        Command::TrainRefine { data, validation, out } => {
            let cache = OperatorCache::new();
            let set = load_set(data, &cfg, &cache)?;
            let val = validation.as_deref().map(|v| load_set(v, &cfg, &cache)).transpose()?;
            let o = train_refinement(&set, val.as_ref(), &cfg.model, &cfg.train_refine, Some(out))?;
            eprintln!("refinement: {} epochs, final training loss {:.6}", cfg.train_refine.epochs, o.log.last().map_or(f64::NAN, |l| l.loss));
            Ok(())
        }
        Command::TrainPredict { data, refine, validation, out } => {
            let cache = OperatorCache::new();
            let re = load_model(refine, "refinement")?;
            let set = load_set(data, &cfg, &cache)?;
            let refined = refine_initial(&re.params, &re.config, &set)?;
            let val = match validation {
                Some(v) => {
                    let vs = load_set(v, &cfg, &cache)?;
                    let vr = refine_initial(&re.params, &re.config, &vs)?;
                    Some((vs, vr))
                }
                None => None,
            };
            let val_ref = val.as_ref().map(|(s, r)| (s, r.as_slice()));
            let o = train_prediction(&set, &refined, val_ref, &cfg.model, &cfg.train_predict, Some(out))?;
            eprintln!("prediction: {} epochs, final training loss {:.6}", cfg.train_predict.epochs, o.log.last().map_or(f64::NAN, |l| l.loss));
            Ok(())
        }
        Command::TrainUar { data, out } => {
            let o = train_uar(&UarData::from_dataset(&read_dataset(data)?)?, &cfg.train_uar, Some(out))?;
            eprintln!("baseline: {} logged epochs", o.log.len());
            Ok(())
        }
        Command::Reconstruct(a) => reconstruct(&cfg, a),
        Command::Evaluate { reference, candidate, out } => evaluate(&cfg, reference, candidate, out),
        Command::Plot { reference, results, out } => plot(&cfg, reference, results, out),
    }
}

fn failure(e: &CoreError) -> (u8, serde_json::Value) {
    match e {
        CoreError::Schema { pointer, msg } => (2, json!({"error": "schema", "pointer": pointer, "message": msg})),
        CoreError::Config(msg) => (2, json!({"error": "schema", "pointer": "", "message": msg})),
        CoreError::Missing(path) => (3, json!({"error": "missing_artifact", "path": path, "message": e.to_string()})),
        CoreError::Numerical { module, step, msg } => {
            (4, json!({"error": "numerical", "module": module, "step": step, "message": msg}))
        }
        other => (1, json!({"error": "failure", "message": other.to_string()})),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        par::force_sequential(true);
    } else if let Some(n) = std::env::var("TCR_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::init_threads(n);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, mut payload) = failure(&e);
            payload["exit_code"] = json!(code);
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}
