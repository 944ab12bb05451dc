//! Dataset generation and the on-disk layout.
//!
//! A dataset directory holds `meta.json` and one raw little-endian f32 file per
//! tensor: `gt_<i>.f32` with shape `[T, H, W]` and `sino_<i>_t<t>.f32` with
//! shape `[n_angles(t), n_offsets]`, both row-major. Values are rounded to f32
//! at generation time so that a write/read round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tcr_nn::checkpoint::{f32_from_le_bytes, f32_to_le_bytes};
use tcr_nn::par;

use crate::error::{CoreError, Result};
use crate::frames::{quantize, FrameSequence, SinoStep, Sinogram};
use crate::geometry::ScanGeometry;
use crate::phantom::{render_sequence, sample_phantom, simulate_measurements, NoiseScale, PhantomConfig};

pub const DATASET_FORMAT: &str = "tcr-dataset";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: Option<u64>,
    pub ground_truth: Option<FrameSequence>,
    pub sinogram: Sinogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub level: f64,
    pub scale: NoiseScale,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub geometry: ScanGeometry,
    pub noise: NoiseMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground truth of sample `i`, or a dataset error if it has none.
    pub fn ground_truth(&self, i: usize) -> Result<&FrameSequence> {
        self.samples
            .get(i)
            .and_then(|s| s.ground_truth.as_ref())
            .ok_or_else(|| CoreError::Dataset(format!("sample {i} has no ground truth")))
    }
}

/// Seeds for the phantoms of a split; splits never share a seed.
pub fn split_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Validation => 1,
        Split::Test => 2,
        Split::External => 3,
    };
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 48) ^ index as u64
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub split: Split,
    pub count: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub geometry: ScanGeometry,
    pub noise_level: f64,
    pub noise_scale: NoiseScale,
}

pub fn generate_dataset(opts: &GenerateOptions) -> Result<Dataset> {
    opts.geometry.validate()?;
    if opts.phantom.n_steps != opts.geometry.n_steps() || opts.phantom.size != opts.geometry.image_size {
        return Err(CoreError::Config(format!(
            "phantom {}×{}px vs geometry {} steps {}px",
            opts.phantom.n_steps,
            opts.phantom.size,
            opts.geometry.n_steps(),
            opts.geometry.image_size
        )));
    }
    let samples = par::map_indexed(opts.count, |i| -> Result<Sample> {
        let seed = split_seed(opts.seed, opts.split, i);
        let spec = sample_phantom(seed, &opts.phantom)?;
        let mut gt = render_sequence(&spec);
        gt.frames.iter_mut().for_each(|f| quantize(f));
        let mut sino = simulate_measurements(&gt, &opts.geometry, opts.noise_level, opts.noise_scale, seed ^ opts.seed.rotate_left(17))?;
        sino.steps.iter_mut().for_each(|s| quantize(&mut s.data));
        Ok(Sample {
            seed: Some(seed),
            ground_truth: Some(gt),
            sinogram: sino,
        })
    });
    Ok(Dataset {
        split: opts.split,
        geometry: opts.geometry.clone(),
        noise: NoiseMeta {
            level: opts.noise_level,
            scale: opts.noise_scale,
            seed: opts.seed,
        },
        samples: samples.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepEntry {
    file: String,
    shape: Vec<usize>,
    angles: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    index: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    ground_truth: Option<TensorEntry>,
    steps: Vec<StepEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    split: Split,
    count: usize,
    geometry: ScanGeometry,
    offsets: Vec<f64>,
    noise: NoiseMeta,
    samples: Vec<SampleEntry>,
}

pub(crate) fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let v: Vec<f32> = data.iter().map(|&x| x as f32).collect();
    fs::write(path, f32_to_le_bytes(&v))?;
    Ok(())
}

pub(crate) fn read_f32(dir: &Path, file: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CoreError::Format(format!("tensor {file}: file missing")),
        _ => CoreError::Io(e),
    })?;
    let want = shape.iter().product::<usize>() * 4;
    if bytes.len() != want {
        return Err(CoreError::Format(format!("tensor {file}: expected {want} bytes for shape {shape:?}, found {}", bytes.len())));
    }
    Ok(f32_from_le_bytes(&bytes).into_iter().map(|v| v as f64).collect())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let offsets = ds.samples.first().map(|s| s.sinogram.offsets.clone()).unwrap_or_else(|| ds.geometry.offsets());
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        s.sinogram.validate()?;
        if s.sinogram.offsets != offsets {
            return Err(CoreError::input("write_dataset", format!("sample {i} uses a different offset grid")));
        }
        let ground_truth = match &s.ground_truth {
            Some(gt) => {
                let file = format!("gt_{i}.f32");
                let flat: Vec<f64> = gt.frames.iter().flatten().copied().collect();
                write_f32(&dir.join(&file), &flat)?;
                Some(TensorEntry {
                    file,
                    shape: vec![gt.len(), gt.size, gt.size],
                })
            }
            None => None,
        };
        let mut steps = Vec::with_capacity(s.sinogram.n_steps());
        for (t, st) in s.sinogram.steps.iter().enumerate() {
            let file = format!("sino_{i}_t{t}.f32");
            write_f32(&dir.join(&file), &st.data)?;
            steps.push(StepEntry {
                file,
                shape: vec![st.angles.len(), offsets.len()],
                angles: st.angles.clone(),
            });
        }
        entries.push(SampleEntry {
            index: i,
            seed: s.seed,
            ground_truth,
            steps,
        });
    }
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        endianness: "LE".into(),
        split: ds.split,
        count: ds.len(),
        geometry: ds.geometry.clone(),
        offsets,
        noise: ds.noise.clone(),
        samples: entries,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

/// Fails with [`CoreError::Missing`] unless `dir/meta.json` exists.
pub(crate) fn require_meta(dir: &Path) -> Result<()> {
    let path = dir.join("meta.json");
    if path.exists() {
        Ok(())
    } else {
        Err(CoreError::Missing(path.display().to_string()))
    }
}

fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    require_meta(dir)?;
    let path = dir.join("meta.json");
    let meta: DatasetMeta =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    if meta.format != DATASET_FORMAT || meta.version != 1 {
        return Err(CoreError::Format(format!("unsupported dataset format {} v{}", meta.format, meta.version)));
    }
    if meta.dtype != "f32" || meta.endianness != "LE" {
        return Err(CoreError::Format(format!("unsupported payload {} {}", meta.dtype, meta.endianness)));
    }
    if meta.count != meta.samples.len() {
        return Err(CoreError::Format(format!("count {} but {} sample entries", meta.count, meta.samples.len())));
    }
    Ok(meta)
}

fn read_sample(dir: &Path, meta: &DatasetMeta, e: &SampleEntry) -> Result<Sample> {
    let ground_truth = match &e.ground_truth {
        Some(g) => {
            if g.shape.len() != 3 || g.shape[1] != g.shape[2] {
                return Err(CoreError::Format(format!("tensor {}: shape {:?} is not [T, H, H]", g.file, g.shape)));
            }
            let flat = read_f32(dir, &g.file, &g.shape)?;
            let px = g.shape[1] * g.shape[2];
            Some(FrameSequence {
                size: g.shape[1],
                frames: flat.chunks(px).map(<[f64]>::to_vec).collect(),
            })
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(e.steps.len());
    for st in &e.steps {
        if st.shape.len() != 2 || st.shape[0] != st.angles.len() || st.shape[1] != meta.offsets.len() {
            return Err(CoreError::Format(format!(
                "tensor {}: shape {:?} inconsistent with {} angles and {} offsets",
                st.file,
                st.shape,
                st.angles.len(),
                meta.offsets.len()
            )));
        }
        steps.push(SinoStep {
            angles: st.angles.clone(),
            data: read_f32(dir, &st.file, &st.shape)?,
        });
    }
    let sinogram = Sinogram {
        offsets: meta.offsets.clone(),
        steps,
    };
    sinogram.validate().map_err(|err| CoreError::Format(format!("sample {}: {err}", e.index)))?;
    Ok(Sample {
        seed: e.seed,
        ground_truth,
        sinogram,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let samples = meta.samples.iter().map(|e| read_sample(dir, &meta, e)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split: meta.split,
        geometry: meta.geometry.clone(),
        noise: meta.noise.clone(),
        samples,
    })
}

/// Reads sequence `index` of a dataset directory whose angles and offsets may be arbitrary.
/// The returned geometry carries the declared angles explicitly.
pub fn load_external_sinogram(dir: &Path, index: usize) -> Result<(Sinogram, ScanGeometry)> {
    let meta = read_meta(dir)?;
    let e = meta
        .samples
        .get(index)
        .ok_or_else(|| CoreError::Format(format!("sample {index} not in {} entries", meta.samples.len())))?;
    let sample = read_sample(dir, &meta, e)?;
    let sino = sample.sinogram;
    let n = sino.offsets.len();
    if n < 2 {
        return Err(CoreError::Format("fewer than two offsets".into()));
    }
    let (lo, hi) = (sino.offsets[0], sino.offsets[n - 1]);
    let spacing = (hi - lo) / (n - 1) as f64;
    if sino.offsets.iter().enumerate().any(|(k, &o)| (o - (lo + k as f64 * spacing)).abs() > 1e-6) {
        return Err(CoreError::Format("offsets are not equispaced".into()));
    }
    let geom = ScanGeometry {
        n_offsets: n,
        offset_min: lo,
        offset_max: hi,
        angles_per_step: sino.steps.iter().map(|s| s.angles.len()).collect(),
        rotation: crate::geometry::RotationScheme::Explicit {
            angles: sino.steps.iter().map(|s| s.angles.clone()).collect(),
        },
        image_size: meta.geometry.image_size,
    };
    geom.validate().map_err(|err| CoreError::Format(err.to_string()))?;
    Ok((sino, geom))
}
