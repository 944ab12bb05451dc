//! Result directories, metric tables and image dumps.
//!
//! A results directory holds `recon_{i}.f32` and `prior_{i}.f32` (little-endian
//! f32, shape `[T, H, H]`) next to a `meta.json` index. Images are binary PGM
//! with values in `[0, 1]` mapped linearly to `0..=255`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_f32, require_meta, write_f32};
use crate::error::{CoreError, Result};
use crate::frames::FrameSequence;
use crate::metrics::{fmt_metric, mean_std, MetricRow, Scope};
use crate::pipeline::{FrameMetrics, ReconConfig, ReconResult};

const RESULTS_FORMAT: &str = "tcr-results";

/// Reconstruction of one dataset sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultEntry {
    /// Sample index in the source dataset.
    pub index: usize,
    pub reconstructions: FrameSequence,
    pub priors: FrameSequence,
    pub discrepancy: Vec<f64>,
    pub prior_discrepancy: Vec<f64>,
}

impl ResultEntry {
    pub fn from_result(index: usize, r: &ReconResult) -> Self {
        ResultEntry {
            index,
            reconstructions: r.reconstructions.clone(),
            priors: r.priors.clone(),
            discrepancy: r.discrepancy.clone(),
            prior_discrepancy: r.prior_discrepancy.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    index: usize,
    reconstruction: String,
    prior: String,
    shape: [usize; 3],
    discrepancy: Vec<f64>,
    prior_discrepancy: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultsMeta {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    recon: ReconConfig,
    samples: Vec<EntryMeta>,
}

fn flat(seq: &FrameSequence) -> Vec<f64> {
    seq.frames.iter().flatten().copied().collect()
}

pub fn write_results(dir: &Path, recon: &ReconConfig, entries: &[ResultEntry]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let (r, p) = (&e.reconstructions, &e.priors);
        if r.len() != p.len() || r.size != p.size {
            return Err(CoreError::input("write_results", format!("sample {}: priors and reconstructions differ in shape", e.index)));
        }
        let reconstruction = format!("recon_{}.f32", e.index);
        let prior = format!("prior_{}.f32", e.index);
        write_f32(&dir.join(&reconstruction), &flat(r))?;
        write_f32(&dir.join(&prior), &flat(p))?;
        samples.push(EntryMeta {
            index: e.index,
            reconstruction,
            prior,
            shape: [r.len(), r.size, r.size],
            discrepancy: e.discrepancy.clone(),
            prior_discrepancy: e.prior_discrepancy.clone(),
        });
    }
    let meta = ResultsMeta {
        format: RESULTS_FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        endianness: "LE".into(),
        recon: recon.clone(),
        samples,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

fn read_sequence(dir: &Path, file: &str, shape: [usize; 3]) -> Result<FrameSequence> {
    let data = read_f32(dir, file, &shape)?;
    let px = shape[1] * shape[2];
    FrameSequence::new(shape[1], data.chunks(px.max(1)).map(<[f64]>::to_vec).collect())
}

/// Reads a directory written by [`write_results`].
pub fn read_results(dir: &Path) -> Result<(ReconConfig, Vec<ResultEntry>)> {
    require_meta(dir)?;
    let path = dir.join("meta.json");
    let meta: ResultsMeta =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    if meta.format != RESULTS_FORMAT || meta.version != 1 || meta.dtype != "f32" || meta.endianness != "LE" {
        return Err(CoreError::Format(format!("{}: unsupported results format {} v{}", path.display(), meta.format, meta.version)));
    }
    let mut out = Vec::with_capacity(meta.samples.len());
    for e in &meta.samples {
        if e.shape[1] != e.shape[2] || e.discrepancy.len() != e.shape[0] || e.prior_discrepancy.len() != e.shape[0] {
            return Err(CoreError::Format(format!("sample {}: shape {:?} inconsistent with its discrepancies", e.index, e.shape)));
        }
        out.push(ResultEntry {
            index: e.index,
            reconstructions: read_sequence(dir, &e.reconstruction, e.shape)?,
            priors: read_sequence(dir, &e.prior, e.shape)?,
            discrepancy: e.discrepancy.clone(),
            prior_discrepancy: e.prior_discrepancy.clone(),
        });
    }
    Ok((meta.recon, out))
}

pub const METRICS_HEADER: &str = "kind,scope,psnr_mean,psnr_std,ssim_mean,ssim_std,count";

/// Pools per-sample frame metrics into all-frames and last-frame rows.
pub fn pooled_rows(samples: &[FrameMetrics]) -> Vec<MetricRow> {
    let all_psnr: Vec<f64> = samples.iter().flat_map(|m| m.psnr.iter().copied()).collect();
    let all_ssim: Vec<f64> = samples.iter().flat_map(|m| m.ssim.iter().copied()).collect();
    let last_psnr: Vec<f64> = samples.iter().filter_map(|m| m.psnr.last().copied()).collect();
    let last_ssim: Vec<f64> = samples.iter().filter_map(|m| m.ssim.last().copied()).collect();
    vec![
        MetricRow::from_samples(Scope::AllFrames, &all_psnr, &all_ssim),
        MetricRow::from_samples(Scope::LastFrame, &last_psnr, &last_ssim),
    ]
}

pub fn metrics_csv(rows: &[(&str, MetricRow)]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (kind, r) in rows {
        let _ = writeln!(
            s,
            "{kind},{},{},{},{},{},{}",
            r.scope.as_str(),
            fmt_metric(r.psnr_mean),
            fmt_metric(r.psnr_std),
            fmt_metric(r.ssim_mean),
            fmt_metric(r.ssim_std),
            r.count
        );
    }
    s
}

/// Mean PSNR per time step for each named series; rows are steps.
pub fn psnr_over_time_csv(series: &[(&str, &[FrameMetrics])]) -> Result<String> {
    let steps = series
        .iter()
        .flat_map(|(_, ms)| ms.iter().map(|m| m.psnr.len()))
        .max()
        .unwrap_or(0);
    let mut s = String::from("step");
    for (name, _) in series {
        let _ = write!(s, ",{name}_psnr");
    }
    s.push('\n');
    for t in 0..steps {
        let _ = write!(s, "{t}");
        for (name, ms) in series {
            let v: Vec<f64> = ms.iter().map(|m| m.psnr.get(t).copied()).collect::<Option<_>>().ok_or_else(|| {
                CoreError::input("psnr_over_time_csv", format!("series {name} has sequences shorter than {steps} steps"))
            })?;
            let _ = write!(s, ",{}", fmt_metric(mean_std(&v).0));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Binary PGM; values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(CoreError::input("encode_pgm", format!("{} values for a {width}×{height} image", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parses the output of [`encode_pgm`] into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| CoreError::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

/// Tiles sequences into one image: one row per sequence, one column per step,
/// separated by `gap` white pixels.
pub fn frame_grid(rows: &[&FrameSequence], gap: usize) -> Result<(usize, usize, Vec<f64>)> {
    let first = rows.first().ok_or_else(|| CoreError::input("frame_grid", "no rows"))?;
    let (n, size) = (first.len(), first.size);
    if rows.iter().any(|r| r.len() != n || r.size != size) {
        return Err(CoreError::input("frame_grid", "rows differ in length or frame size"));
    }
    let w = n * size + n.saturating_sub(1) * gap;
    let h = rows.len() * size + (rows.len() - 1) * gap;
    let mut img = vec![1.0; w * h];
    for (r, seq) in rows.iter().enumerate() {
        for (t, frame) in seq.frames.iter().enumerate() {
            let (y0, x0) = (r * (size + gap), t * (size + gap));
            for y in 0..size {
                img[(y0 + y) * w + x0..][..size].copy_from_slice(&frame[y * size..][..size]);
            }
        }
    }
    Ok((w, h, img))
}
