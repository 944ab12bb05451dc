//! Experiment configuration: a JSON document layered over a named preset.
//!
//! Every key is optional; missing keys take the preset's value. Unknown keys
//! and type mismatches are reported with the JSON pointer of the offending
//! value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tcr_nn::CosineSchedule;

use crate::dataset::{GenerateOptions, Split};
use crate::error::{CoreError, Result};
use crate::geometry::{RotationScheme, ScanGeometry};
use crate::phantom::{NoiseScale, PhantomConfig};
use crate::pipeline::ReconConfig;
use crate::stt::SttConfig;
use crate::train::TrainConfig;
use crate::uar::{UarConfig, UarMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(CoreError::Schema {
                pointer: String::new(),
                msg: format!("unknown preset {other:?}; expected \"desk\" or \"paper\""),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub image_size: usize,
    pub n_steps: usize,
    /// Angles for the first two steps.
    pub init_angles: usize,
    /// Angles for every later step.
    pub angles: usize,
    pub n_offsets: usize,
    pub offset_min: f64,
    pub offset_max: f64,
}

impl GeometrySection {
    /// Rotating schedule with `angles` per step after the first two.
    pub fn scan(&self, angles: usize) -> ScanGeometry {
        ScanGeometry {
            n_offsets: self.n_offsets,
            offset_min: self.offset_min,
            offset_max: self.offset_max,
            angles_per_step: (0..self.n_steps).map(|t| if t < 2 { self.init_angles } else { angles }).collect(),
            rotation: RotationScheme::default(),
            image_size: self.image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
    pub noise_level: f64,
    pub noise_scale: NoiseScale,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub intensity: [f64; 2],
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_log_scale: f64,
    pub max_shear: f64,
}

impl PhantomSection {
    fn new(train: usize, validation: usize, test: usize) -> Self {
        let d = PhantomConfig::default();
        PhantomSection {
            train_count: train,
            validation_count: validation,
            test_count: test,
            noise_level: 0.0,
            noise_scale: NoiseScale::Peak,
            min_shapes: d.min_shapes,
            max_shapes: d.max_shapes,
            intensity: d.intensity,
            max_translation: d.max_translation,
            max_rotation: d.max_rotation,
            max_log_scale: d.max_log_scale,
            max_shear: d.max_shear,
        }
    }

    pub fn phantom(&self, geometry: &GeometrySection) -> PhantomConfig {
        PhantomConfig {
            n_steps: geometry.n_steps,
            size: geometry.image_size,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            intensity: self.intensity,
            max_translation: self.max_translation,
            max_rotation: self.max_rotation,
            max_log_scale: self.max_log_scale,
            max_shear: self.max_shear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Angle counts compared by the end-to-end protocol.
    pub angle_sweep: Vec<usize>,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_points_per_decade: usize,
    pub data_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub geometry: GeometrySection,
    pub phantom: PhantomSection,
    pub model: SttConfig,
    pub train_refine: TrainConfig,
    pub train_predict: TrainConfig,
    pub train_uar: UarConfig,
    pub recon: ReconConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// 32×32, 8 steps, 200 training sequences, 30 epochs per model.
    pub fn desk() -> Self {
        let epochs = 30;
        // 750 updates instead of 10k: peak rates raised tenfold
        let refine_lr = CosineSchedule { max_lr: 1e-3, ..CosineSchedule::refinement() };
        let predict_lr = CosineSchedule { max_lr: 3e-4, ..CosineSchedule::prediction() };
        ExperimentConfig {
            seed: 2024,
            geometry: GeometrySection {
                image_size: 32,
                n_steps: 8,
                init_angles: 20,
                angles: 3,
                n_offsets: 100,
                offset_min: -1.0,
                offset_max: 1.0,
            },
            phantom: PhantomSection::new(200, 5, 20),
            model: SttConfig::desk(),
            train_refine: TrainConfig { epochs, checkpoint_every: 0, lr: refine_lr, ..TrainConfig::refinement() },
            train_predict: TrainConfig { epochs, checkpoint_every: 0, seed: 1, lr: predict_lr, ..TrainConfig::prediction() },
            train_uar: UarConfig::new(UarMode::Static2D, 32),
            recon: ReconConfig::default(),
            eval: EvalSection {
                angle_sweep: vec![3, 10],
                alpha_min: 1e-3,
                alpha_max: 1.0,
                alpha_points_per_decade: 2,
                data_range: 1.0,
            },
        }
    }

    /// 64×64, 10 steps, 5000 training sequences, 100 epochs per model.
    pub fn paper() -> Self {
        ExperimentConfig {
            seed: 2024,
            geometry: GeometrySection {
                image_size: 64,
                n_steps: 10,
                init_angles: 20,
                angles: 3,
                n_offsets: 100,
                offset_min: -1.0,
                offset_max: 1.0,
            },
            phantom: PhantomSection::new(5000, 10, 50),
            model: SttConfig::paper(),
            train_refine: TrainConfig::refinement(),
            train_predict: TrainConfig { seed: 1, ..TrainConfig::prediction() },
            train_uar: UarConfig::new(UarMode::Dynamic3D, 64),
            recon: ReconConfig::default(),
            eval: EvalSection {
                angle_sweep: vec![3, 10],
                alpha_min: 1e-3,
                alpha_max: 1.0,
                alpha_points_per_decade: 8,
                data_range: 1.0,
            },
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Overlays `text` (a JSON object) on the preset and validates the result.
    pub fn from_json(preset: Preset, text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| CoreError::Schema {
            pointer: String::new(),
            msg: format!("not valid JSON: {e}"),
        })?;
        if !patch.is_object() {
            return Err(CoreError::Schema { pointer: String::new(), msg: "configuration must be a JSON object".into() });
        }
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, patch);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(base).map_err(|e| CoreError::Schema {
            pointer: pointer(e.path()),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` over the preset, or returns the preset alone.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::preset(preset)),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CoreError::Missing(p.display().to_string()),
                    _ => CoreError::Io(e),
                })?;
                Self::from_json(preset, &text)
            }
        }
    }

    /// Generation options for `split` with `angles` per step after the first two.
    pub fn generate_options(&self, split: Split, angles: usize) -> GenerateOptions {
        let count = match split {
            Split::Train => self.phantom.train_count,
            Split::Validation => self.phantom.validation_count,
            Split::Test | Split::External => self.phantom.test_count,
        };
        GenerateOptions {
            split,
            count,
            seed: self.seed,
            phantom: self.phantom.phantom(&self.geometry),
            geometry: self.geometry.scan(angles),
            noise_level: self.phantom.noise_level,
            noise_scale: self.phantom.noise_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, r: Result<()>| {
            r.map_err(|e| CoreError::Schema { pointer: format!("/{section}"), msg: e.to_string() })
        };
        let g = &self.geometry;
        at("geometry", g.scan(g.angles).validate())?;
        if g.init_angles == 0 || g.angles == 0 {
            at("geometry", Err(CoreError::Config("angle counts must be positive".into())))?;
        }
        at("model", self.model.validate())?;
        if self.model.image_size != g.image_size {
            return Err(CoreError::Schema {
                pointer: "/model/image_size".into(),
                msg: format!("{} differs from geometry image size {}", self.model.image_size, g.image_size),
            });
        }
        if self.train_uar.image_size != g.image_size {
            return Err(CoreError::Schema {
                pointer: "/train_uar/image_size".into(),
                msg: format!("{} differs from geometry image size {}", self.train_uar.image_size, g.image_size),
            });
        }
        at("train_refine", self.train_refine.validate())?;
        at("train_predict", self.train_predict.validate())?;
        at("train_uar", self.train_uar.validate())?;
        at("recon", self.recon.validate())?;
        let p = &self.phantom;
        if p.min_shapes == 0 || p.min_shapes > p.max_shapes || !(p.noise_level >= 0.0) {
            at("phantom", Err(CoreError::Config("need 1 <= min_shapes <= max_shapes and a non-negative noise level".into())))?;
        }
        let e = &self.eval;
        if e.angle_sweep.is_empty() || e.angle_sweep.contains(&0) {
            at("eval", Err(CoreError::Config("angle sweep must list positive angle counts".into())))?;
        }
        if !(e.alpha_min > 0.0 && e.alpha_max >= e.alpha_min && e.alpha_points_per_decade > 0 && e.data_range > 0.0) {
            at("eval", Err(CoreError::Config("need 0 < alpha_min <= alpha_max, points per decade and data range positive".into())))?;
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}
