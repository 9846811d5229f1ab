//! Dataset directories and model checkpoints.
//!
//! A dataset directory holds `manifest.json` and one subdirectory per clip:
//!
//! ```text
//! clip_000/frames/00000.png ...
//! clip_000/landmarks.csv        T rows × 204 decimal columns
//! clip_000/audio_features.bin   "RTAF", u32 T, u32 D, T×D f32 little-endian
//! clip_000/pitch_features.bin   same layout
//! clip_000/blendshapes.csv      T rows × D_b columns
//! clip_000/poses.json           per-frame rotation, translation, intrinsics
//! ```
//!
//! A checkpoint directory holds `index.json` and `tensors.bin`, the tensors'
//! float32 little-endian payloads concatenated in index order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatureSequence;
use crate::camera::FramePose;
use crate::engine::{ParameterStore, Params, Tensor};
use crate::error::{Error, Result};
use crate::face::{EmotionLabel, LANDMARK_DIM};
use crate::frame::RgbImage;
use crate::synth::Clip;

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const RTAF_MAGIC: &[u8; 4] = b"RTAF";

pub const LANDMARKS_FILE: &str = "landmarks.csv";
pub const AUDIO_FILE: &str = "audio_features.bin";
pub const PITCH_FILE: &str = "pitch_features.bin";
pub const BLENDSHAPES_FILE: &str = "blendshapes.csv";
pub const POSES_FILE: &str = "poses.json";
pub const FRAMES_DIR: &str = "frames";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipDescriptor {
    pub path: String,
    pub emotion: EmotionLabel,
    pub frames: usize,
    pub resolution: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub landmark_dim: usize,
    pub audio_dim: usize,
    pub pitch_dim: usize,
    pub blendshape_dim: usize,
    pub clips: Vec<ClipDescriptor>,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<serde_json::Value>,
}

pub fn frame_file_name(i: usize) -> String {
    format!("{i:05}.png")
}

// ---- primitive formats ----

pub fn write_rtaf(path: &Path, m: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + m.len() * 4);
    buf.extend_from_slice(RTAF_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_rtaf(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let what = path.display().to_string();
    if bytes.len() < 12 || &bytes[0..4] != RTAF_MAGIC {
        return Err(Error::Parse { what, detail: "missing RTAF header".into() });
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + t * d * 4;
    if bytes.len() != need {
        return Err(Error::TruncatedPayload(format!("{what}: expected {need} bytes, found {}", bytes.len())));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(t, d, data))
}

/// One row per line, comma separated, shortest round-trip decimal form.
pub fn write_matrix_csv(path: &Path, m: &Tensor<f32>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 10);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row_slice(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a headerless numeric CSV; `expected_cols` enforces the width.
pub fn read_matrix_csv(path: &Path, expected_cols: Option<usize>) -> Result<Tensor<f32>> {
    let text = fs::read_to_string(path)?;
    let what = path.display().to_string();
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f32> = line
            .split(',')
            .map(|s| s.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { what: format!("{what} line {}", ln + 1), detail: e.to_string() })?;
        let want = expected_cols.or(cols).unwrap_or(vals.len());
        if vals.len() != want {
            return Err(Error::ShapeMismatch {
                what: format!("{what} line {}", ln + 1),
                expected: format!("{want} columns"),
                found: format!("{} columns", vals.len()),
            });
        }
        cols = Some(vals.len());
        data.extend(vals);
        rows += 1;
    }
    Ok(Tensor::new(rows, cols.or(expected_cols).unwrap_or(0), data))
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.to_u8())
        .ok_or_else(|| Error::Invalid("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    RgbImage::from_u8(img.width(), img.height(), img.as_raw())
}

// ---- datasets ----

/// Writes one clip into `dir` (created if needed).
pub fn write_clip(dir: &Path, clip: &Clip) -> Result<()> {
    clip.validate()?;
    fs::create_dir_all(dir.join(FRAMES_DIR))?;
    for (i, f) in clip.frames.iter().enumerate() {
        write_png(&dir.join(FRAMES_DIR).join(frame_file_name(i)), f)?;
    }
    write_matrix_csv(&dir.join(LANDMARKS_FILE), &clip.landmarks)?;
    write_rtaf(&dir.join(AUDIO_FILE), &clip.audio.content)?;
    write_rtaf(&dir.join(PITCH_FILE), &clip.audio.pitch)?;
    write_matrix_csv(&dir.join(BLENDSHAPES_FILE), &clip.blendshapes)?;
    fs::write(dir.join(POSES_FILE), serde_json::to_vec_pretty(&clip.poses)?)?;
    Ok(())
}

/// Writes clips as `clip_000`, `clip_001`, … plus the manifest.
pub fn write_dataset(dir: &Path, clips: &[Clip], synth: Option<serde_json::Value>) -> Result<DatasetManifest> {
    let first = clips.first().ok_or_else(|| Error::Invalid("dataset needs at least one clip".into()))?;
    fs::create_dir_all(dir)?;
    let mut descriptors = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let rel = format!("clip_{i:03}");
        write_clip(&dir.join(&rel), clip)?;
        descriptors.push(ClipDescriptor {
            path: rel,
            emotion: clip.emotion,
            frames: clip.len(),
            resolution: clip.resolution,
            seed: Some(clip.seed),
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        landmark_dim: LANDMARK_DIM,
        audio_dim: first.audio.content.cols(),
        pitch_dim: first.audio.pitch.cols(),
        blendshape_dim: first.blendshapes.cols(),
        clips: descriptors,
        synth,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A validated dataset whose clips are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile { clip: "<manifest>".into(), path: manifest_path });
    }
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::UnknownSchema { found: version, supported: SCHEMA_VERSION });
    }
    let manifest: DatasetManifest = serde_json::from_value(raw)
        .map_err(|e| Error::Parse { what: manifest_path.display().to_string(), detail: e.to_string() })?;
    if manifest.landmark_dim != LANDMARK_DIM {
        return Err(Error::ShapeMismatch {
            what: "manifest landmark_dim".into(),
            expected: LANDMARK_DIM.to_string(),
            found: manifest.landmark_dim.to_string(),
        });
    }
    for c in &manifest.clips {
        let root = dir.join(&c.path);
        let mut required: Vec<PathBuf> =
            [LANDMARKS_FILE, AUDIO_FILE, PITCH_FILE, BLENDSHAPES_FILE, POSES_FILE].iter().map(|f| root.join(f)).collect();
        required.extend((0..c.frames).map(|i| root.join(FRAMES_DIR).join(frame_file_name(i))));
        if let Some(missing) = required.into_iter().find(|p| !p.exists()) {
            return Err(Error::MissingFile { clip: c.path.clone(), path: missing });
        }
    }
    Ok(Dataset { root: dir.to_path_buf(), manifest })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.clips.is_empty()
    }

    /// Reads and validates clip `index` (manifest order).
    pub fn clip(&self, index: usize) -> Result<Clip> {
        let desc = self
            .manifest
            .clips
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("clip index {index} out of range ({} clips)", self.len())))?;
        let dir = self.root.join(&desc.path);
        let shape_err = |what: &str, expected: String, found: String| Error::ShapeMismatch {
            what: format!("clip {} {what}", desc.path),
            expected,
            found,
        };
        let landmarks = read_matrix_csv(&dir.join(LANDMARKS_FILE), Some(LANDMARK_DIM)).map_err(|e| match e {
            Error::ShapeMismatch { what, expected, found } => {
                Error::ShapeMismatch { what: format!("clip {} {what}", desc.path), expected, found }
            }
            other => other,
        })?;
        let t = desc.frames;
        if landmarks.rows() != t {
            return Err(shape_err("landmark rows", t.to_string(), landmarks.rows().to_string()));
        }
        let content = read_rtaf(&dir.join(AUDIO_FILE))?;
        let pitch = read_rtaf(&dir.join(PITCH_FILE))?;
        if content.shape() != (t, self.manifest.audio_dim) {
            return Err(shape_err("audio features", format!("{t}x{}", self.manifest.audio_dim), format!("{:?}", content.shape())));
        }
        if pitch.shape() != (t, self.manifest.pitch_dim) {
            return Err(shape_err("pitch features", format!("{t}x{}", self.manifest.pitch_dim), format!("{:?}", pitch.shape())));
        }
        let mut blendshapes = read_matrix_csv(&dir.join(BLENDSHAPES_FILE), Some(self.manifest.blendshape_dim))?;
        if blendshapes.rows() != t {
            return Err(shape_err("blendshape rows", t.to_string(), blendshapes.rows().to_string()));
        }
        for v in blendshapes.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let poses: Vec<FramePose> = serde_json::from_slice(&fs::read(dir.join(POSES_FILE))?)
            .map_err(|e| Error::Parse { what: format!("clip {} poses", desc.path), detail: e.to_string() })?;
        if poses.len() != t {
            return Err(shape_err("poses", t.to_string(), poses.len().to_string()));
        }
        for p in &poses {
            p.pose.validate()?;
        }
        let frames = (0..t)
            .map(|i| {
                let f = read_png(&dir.join(FRAMES_DIR).join(frame_file_name(i)))?;
                if f.width != desc.resolution || f.height != desc.resolution {
                    return Err(shape_err("frame size", desc.resolution.to_string(), format!("{}x{}", f.width, f.height)));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let clip = Clip {
            frames,
            landmarks,
            audio: AudioFeatureSequence::new(content, pitch)?,
            blendshapes,
            poses,
            emotion: desc.emotion,
            resolution: desc.resolution,
            seed: desc.seed.unwrap_or(0),
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn clips(&self) -> Result<Vec<Clip>> {
        (0..self.len()).map(|i| self.clip(i)).collect()
    }
}

// ---- checkpoints ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndexEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorIndexEntry>,
}

/// A named tensor table with its training step and config snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, bool, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, store: &ParameterStore, config: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            step: store.step(),
            config,
            tensors: store.params.iter().map(|(k, e)| (k.clone(), e.trainable, e.value.clone())).collect(),
        }
    }

    pub fn to_params(&self) -> Result<Params<f32>> {
        let mut p = Params::new();
        for (name, trainable, t) in &self.tensors {
            p.insert(name.clone(), t.clone(), *trainable)?;
        }
        Ok(p)
    }

    pub fn to_store(&self) -> Result<ParameterStore> {
        Ok(ParameterStore::with_step(self.to_params()?, self.step))
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, _, _) in &ckpt.tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateTensor(name.clone()));
        }
    }
    fs::create_dir_all(dir)?;
    let index = CheckpointIndex {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: ckpt.kind.clone(),
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(n, tr, t)| TensorIndexEntry { name: n.clone(), shape: [t.rows(), t.cols()], trainable: *tr })
            .collect(),
    };
    let mut blob = fs::File::create(dir.join("tensors.bin"))?;
    let mut buf = Vec::new();
    for (_, _, t) in &ckpt.tensors {
        buf.clear();
        buf.reserve(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        blob.write_all(&buf)?;
    }
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::MissingFile { clip: "<checkpoint>".into(), path: index_path });
    }
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(&index_path)?)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let index: CheckpointIndex = serde_json::from_value(raw)
        .map_err(|e| Error::Parse { what: index_path.display().to_string(), detail: e.to_string() })?;
    let bytes = fs::read(dir.join("tensors.bin"))?;
    let need: usize = index.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 4).sum();
    if bytes.len() < need {
        return Err(Error::TruncatedPayload(format!(
            "{}: expected {need} bytes, found {}",
            dir.display(),
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(Error::Parse {
            what: dir.join("tensors.bin").display().to_string(),
            detail: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(index.tensors.len());
    let mut seen = HashSet::new();
    for e in &index.tensors {
        if !seen.insert(e.name.clone()) {
            return Err(Error::DuplicateTensor(e.name.clone()));
        }
        let n = e.shape[0] * e.shape[1];
        let data = bytes[off..off + n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        off += n * 4;
        tensors.push((e.name.clone(), e.trainable, Tensor::new(e.shape[0], e.shape[1], data)));
    }
    Ok(Checkpoint { kind: index.kind, step: index.step, config: index.config, tensors })
}
