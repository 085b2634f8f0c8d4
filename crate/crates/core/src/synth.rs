//! Seeded synthetic face videos carrying a known pulse, their on-disk
//! format, and chunking into fixed-length training windows.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, sha256_hex, unknown_key, KeyValue};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative pulse strength per colour channel (R, G, B).
pub const CHANNEL_WEIGHTS: [f64; 3] = [0.5, 1.0, 0.3];
/// Amplitude of the second harmonic relative to the fundamental.
pub const HARMONIC: f64 = 0.3;
/// Allowed heart-rate range in bpm.
pub const HR_LIMITS: (f64, f64) = (48.0, 144.0);
const MOTION_HZ: f64 = 0.2;
const BACKGROUND_LEVEL: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of clips in a generated dataset; clip `i` uses seed `seed + i`.
    pub clips: usize,
    pub fs: f64,
    pub duration_s: f64,
    pub height: usize,
    pub width: usize,
    pub base_color: [f64; 3],
    /// Pulse modulation as a fraction of the base colour.
    pub pulse_amplitude: f64,
    /// Starting rate is drawn uniformly from `[hr_min_bpm, hr_max_bpm]`.
    pub hr_min_bpm: f64,
    pub hr_max_bpm: f64,
    /// Largest linear change of the rate over the clip.
    pub hr_drift_bpm: f64,
    pub noise_sigma: f64,
    pub motion_amplitude_px: f64,
    /// Ellipse semi-axes as a fraction of the half-extent.
    pub skin_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            clips: 30,
            fs: 30.0,
            duration_s: 10.0,
            height: 32,
            width: 32,
            base_color: [0.75, 0.55, 0.45],
            pulse_amplitude: 0.02,
            hr_min_bpm: 55.0,
            hr_max_bpm: 135.0,
            hr_drift_bpm: 0.0,
            noise_sigma: 0.0,
            motion_amplitude_px: 0.0,
            skin_fraction: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn frames(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!("resolution {}x{} is below 16x16", self.height, self.width));
        }
        if !(self.fs > 0.0) || !(self.duration_s > 0.0) || self.frames() < 2 {
            return bad(format!("fs={} and duration_s={} give too few frames", self.fs, self.duration_s));
        }
        if self.base_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad(format!("base colour {:?} must lie in [0, 1]", self.base_color));
        }
        for (name, v) in [
            ("pulse_amplitude", self.pulse_amplitude),
            ("noise_sigma", self.noise_sigma),
            ("motion_amplitude_px", self.motion_amplitude_px),
            ("hr_drift_bpm", self.hr_drift_bpm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        let (lo, hi) = HR_LIMITS;
        if !(lo <= self.hr_min_bpm && self.hr_min_bpm <= self.hr_max_bpm && self.hr_max_bpm <= hi) {
            return bad(format!(
                "heart-rate range [{}, {}] must be ordered and inside [{lo}, {hi}]",
                self.hr_min_bpm, self.hr_max_bpm
            ));
        }
        if !(self.skin_fraction > 0.0 && self.skin_fraction <= 1.0) {
            return bad(format!("skin_fraction must lie in (0, 1], got {}", self.skin_fraction));
        }
        Ok(())
    }

    /// The same settings with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        SynthConfig { seed, ..self.clone() }
    }
}

impl KeyValue for SynthConfig {
    const SECTION: &'static str = "synth";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "clips" => self.clips = parse_value(key, value)?,
            "fs" => self.fs = parse_value(key, value)?,
            "duration_s" => self.duration_s = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "base_r" => self.base_color[0] = parse_value(key, value)?,
            "base_g" => self.base_color[1] = parse_value(key, value)?,
            "base_b" => self.base_color[2] = parse_value(key, value)?,
            "pulse_amplitude" => self.pulse_amplitude = parse_value(key, value)?,
            "hr_min_bpm" => self.hr_min_bpm = parse_value(key, value)?,
            "hr_max_bpm" => self.hr_max_bpm = parse_value(key, value)?,
            "hr_drift_bpm" => self.hr_drift_bpm = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "motion_amplitude_px" => self.motion_amplitude_px = parse_value(key, value)?,
            "skin_fraction" => self.skin_fraction = parse_value(key, value)?,
            _ => return Err(unknown_key(Self::SECTION, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("clips", self.clips.to_string()),
            ("fs", self.fs.to_string()),
            ("duration_s", self.duration_s.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("base_r", self.base_color[0].to_string()),
            ("base_g", self.base_color[1].to_string()),
            ("base_b", self.base_color[2].to_string()),
            ("pulse_amplitude", self.pulse_amplitude.to_string()),
            ("hr_min_bpm", self.hr_min_bpm.to_string()),
            ("hr_max_bpm", self.hr_max_bpm.to_string()),
            ("hr_drift_bpm", self.hr_drift_bpm.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("motion_amplitude_px", self.motion_amplitude_px.to_string()),
            ("skin_fraction", self.skin_fraction.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub seed: u64,
    pub fs: f64,
    pub config_hash: String,
    /// Time-averaged ground-truth rate.
    pub gt_bpm: f64,
}

/// A video `(3, T, H, W)` in `[0, 1]` with its pulse label of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub frames: Tensor,
    pub label: Vec<f64>,
    pub meta: ClipMeta,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }

    /// Frames and label rounded to 32-bit precision, as stored on disk.
    pub fn rounded(&self) -> ClipRecord {
        let mut out = self.clone();
        out.frames.round_to_f32();
        out.label.iter_mut().for_each(|v| *v = *v as f32 as f64);
        out
    }
}

/// Render one clip. The rate drifts linearly from its start to end value and
/// the pulse phase is the running integral of the rate.
pub fn generate_clip(config: &SynthConfig) -> Result<ClipRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = rng.gen_range(config.hr_min_bpm..=config.hr_max_bpm);
    let drift = if config.hr_drift_bpm > 0.0 {
        rng.gen_range(-config.hr_drift_bpm..=config.hr_drift_bpm)
    } else {
        0.0
    };
    let end = (start + drift).clamp(HR_LIMITS.0, HR_LIMITS.1);
    let motion_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let (t_len, h, w) = (config.frames(), config.height, config.width);
    let dt = 1.0 / config.fs;
    let rate_hz = |i: usize| {
        let frac = if t_len > 1 { i as f64 / (t_len - 1) as f64 } else { 0.0 };
        (start + (end - start) * frac) / 60.0
    };
    let mut phase = 0.0;
    let mut label = Vec::with_capacity(t_len);
    for i in 0..t_len {
        if i > 0 {
            phase += 0.5 * (rate_hz(i - 1) + rate_hz(i)) * dt;
        }
        let p = std::f64::consts::TAU * phase;
        label.push(p.sin() + HARMONIC * (2.0 * p).sin());
    }
    let gt_bpm = 60.0 * (0..t_len).map(rate_hz).sum::<f64>() / t_len as f64;

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let (ry, rx) = (
        config.skin_fraction * h as f64 / 2.0,
        config.skin_fraction * w as f64 / 2.0,
    );
    let plane = h * w;
    let mut data = vec![0.0; 3 * t_len * plane];
    for ti in 0..t_len {
        let t = ti as f64 * dt;
        let cx = w as f64 / 2.0
            + config.motion_amplitude_px * (std::f64::consts::TAU * MOTION_HZ * t + motion_phase).sin();
        let cy = h as f64 / 2.0;
        for c in 0..3 {
            let skin = config.base_color[c] * (1.0 + config.pulse_amplitude * CHANNEL_WEIGHTS[c] * label[ti]);
            let background = BACKGROUND_LEVEL * config.base_color[c];
            let out = &mut data[(c * t_len + ti) * plane..][..plane];
            for y in 0..h {
                let dy = (y as f64 + 0.5 - cy) / ry;
                for x in 0..w {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    out[y * w + x] = if dx * dx + dy * dy <= 1.0 { skin } else { background };
                }
            }
        }
    }
    if config.noise_sigma > 0.0 {
        data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(ClipRecord {
        frames: Tensor::new([3, t_len, h, w], data)?,
        label,
        meta: ClipMeta {
            id: format!("clip_{:05}", config.seed),
            seed: config.seed,
            fs: config.fs,
            config_hash: config.config_hash(),
            gt_bpm,
        },
    })
}

/// `config.clips` clips with seeds `seed, seed + 1, ...`, generated in parallel.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<ClipRecord>> {
    use rayon::prelude::*;
    config.validate()?;
    (0..config.clips as u64)
        .into_par_iter()
        .map(|i| generate_clip(&config.with_seed(config.seed.wrapping_add(i))))
        .collect()
}

// ---------------------------------------------------------------------------
// on-disk format

pub const DATASET_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const FRAMES_FILE: &str = "frames.f32";
const LABEL_FILE: &str = "label.f32";

#[derive(Debug, Serialize, Deserialize)]
struct StoredMeta {
    version: u32,
    dtype: String,
    shape: Vec<usize>,
    label_len: usize,
    frames_sha256: String,
    label_sha256: String,
    #[serde(flatten)]
    clip: ClipMeta,
}

pub(crate) fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub(crate) fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write each clip to `dir/<id>/` as `meta.json`, `frames.f32` and `label.f32`.
pub fn write_dataset(dir: &Path, records: &[ClipRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for rec in records {
        write_clip(&dir.join(&rec.meta.id), rec)?;
    }
    Ok(())
}

pub fn write_clip(dir: &Path, rec: &ClipRecord) -> Result<()> {
    if rec.frames.rank() != 4 || rec.frames.shape()[1] != rec.label.len() {
        return Err(Error::dim(format!(
            "clip `{}` has frames {:?} and {} label samples",
            rec.meta.id,
            rec.frames.shape(),
            rec.label.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = f32_bytes(rec.frames.data());
    let label = f32_bytes(&rec.label);
    let meta = StoredMeta {
        version: DATASET_VERSION,
        dtype: "f32le".into(),
        shape: rec.frames.shape().to_vec(),
        label_len: rec.label.len(),
        frames_sha256: sha256_hex(&frames),
        label_sha256: sha256_hex(&label),
        clip: rec.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write_file(&dir.join(FRAMES_FILE), &frames)?;
    write_file(&dir.join(LABEL_FILE), &label)?;
    write_file(&dir.join(META_FILE), json.as_bytes())
}

fn read_array(path: &Path, expected_len: usize, checksum: &str) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() != 4 * expected_len {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", 4 * expected_len, bytes.len()),
        ));
    }
    if sha256_hex(&bytes) != checksum {
        return Err(Error::format(path, "checksum mismatch"));
    }
    Ok(f32_values(&bytes))
}

pub fn read_clip(dir: &Path) -> Result<ClipRecord> {
    let meta_path = dir.join(META_FILE);
    let text = read_file(&meta_path)?;
    let meta: StoredMeta =
        serde_json::from_slice(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.version != DATASET_VERSION {
        return Err(Error::format(&meta_path, format!("unsupported version {}", meta.version)));
    }
    if meta.dtype != "f32le" {
        return Err(Error::format(&meta_path, format!("unsupported dtype `{}`", meta.dtype)));
    }
    if meta.shape.len() != 4 || meta.shape[0] != 3 || meta.shape[1] != meta.label_len {
        return Err(Error::format(
            &meta_path,
            format!("shape {:?} inconsistent with {} label samples", meta.shape, meta.label_len),
        ));
    }
    let n: usize = meta.shape.iter().product();
    let frames = read_array(&dir.join(FRAMES_FILE), n, &meta.frames_sha256)?;
    let label = read_array(&dir.join(LABEL_FILE), meta.label_len, &meta.label_sha256)?;
    Ok(ClipRecord {
        frames: Tensor::new(meta.shape, frames)?,
        label,
        meta: meta.clip,
    })
}

/// Every clip directory under `dir`, in name order. An empty directory yields
/// an empty list.
pub fn read_dataset(dir: &Path) -> Result<Vec<ClipRecord>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| read_clip(d)).collect()
}

// ---------------------------------------------------------------------------
// chunking

/// How windows are cut from a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// One window at an offset drawn from a generator seeded with `seed`.
    Train { seed: u64 },
    /// Consecutive non-overlapping windows; the tail is dropped.
    Eval,
}

/// Bilinear resize of `(C, T, H, W)` frames with half-pixel sample centres.
pub fn resize_frames(frames: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("cannot resize {s:?} to {out_h}x{out_w}")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(frames.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let x = frames.data();
    let mut out = Vec::with_capacity(c * t * out_h * out_w);
    for p in 0..c * t {
        let src = &x[p * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, t, out_h, out_w], out)
}

/// Frames `[start, start + len)` of a clip together with the matching labels.
pub fn window(record: &ClipRecord, start: usize, len: usize) -> Result<ClipRecord> {
    let s = record.frames.shape();
    if s.len() != 4 || start + len > s[1] || s[1] != record.label.len() {
        return Err(Error::dim(format!(
            "window [{start}, {}) outside clip `{}` of shape {s:?}",
            start + len,
            record.meta.id
        )));
    }
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let x = record.frames.data();
    let mut data = Vec::with_capacity(c * len * plane);
    for ch in 0..c {
        data.extend_from_slice(&x[(ch * t + start) * plane..][..len * plane]);
    }
    Ok(ClipRecord {
        frames: Tensor::new([c, len, s[2], s[3]], data)?,
        label: record.label[start..start + len].to_vec(),
        meta: record.meta.clone(),
    })
}

/// Cut `chunk_len`-frame windows and resize them to `out_hw`. A clip shorter
/// than one window is skipped with a warning.
pub fn chunk_and_resize(
    record: &ClipRecord,
    chunk_len: usize,
    out_hw: (usize, usize),
    mode: ChunkMode,
) -> Result<Vec<ClipRecord>> {
    if chunk_len == 0 {
        return Err(Error::Argument("chunk length must be positive".into()));
    }
    let t = record.len();
    if t < chunk_len {
        log::warn!(
            "clip `{}` has {t} frames, fewer than the chunk length {chunk_len}; skipped",
            record.meta.id
        );
        return Ok(Vec::new());
    }
    let starts: Vec<usize> = match mode {
        ChunkMode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![rng.gen_range(0..=t - chunk_len)]
        }
        ChunkMode::Eval => (0..t / chunk_len).map(|i| i * chunk_len).collect(),
    };
    starts
        .into_iter()
        .map(|s| {
            let mut w = window(record, s, chunk_len)?;
            w.frames = resize_frames(&w.frames, out_hw.0, out_hw.1)?;
            Ok(w)
        })
        .collect()
}
