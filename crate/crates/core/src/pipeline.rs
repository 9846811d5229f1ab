//! End-to-end orchestration: dataset synthesis, the three training stages,
//! inference from audio and an emotion label to rendered frames, evaluation
//! and the deformation-magnitude sweep.
//!
//! Every command reads a [`PipelineConfig`]. The top-level `delta` and
//! `lambda_lpips` take precedence over `ldm.delta` and
//! `nerf_train.lambda_perceptual`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::audio::AudioFeatureSequence;
use crate::camera::FramePose;
use crate::data_io::{
    self, load_checkpoint, load_dataset, read_matrix_csv, read_png, read_rtaf, save_checkpoint, write_dataset,
    write_matrix_csv, write_png, Dataset, DatasetManifest,
};
use crate::engine::{LossCurve, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::face::{EmotionLabel, LANDMARK_DIM};
use crate::frame::RgbImage;
use crate::ldm::{self, apply_deformation, synthetic_pairs, train_ldm, Ldm, LdmConfig, LdmTrainConfig, DELTA_SWEEP};
use crate::metrics::MetricReport;
use crate::nerf::{
    train_nerf, FrameCondition, NerfClip, NerfConfig, NerfTrainConfig, PerceptualBackend, RandomConvPerceptual, TriPlaneNerf,
};
use crate::synth::{SynthConfig, Synthesizer};
use crate::vae::{infer_motion, train_vae, A2mVae, VaeConfig, VaeShape, VaeTrainConfig};

/// Environment variable whose value replaces every seed in the config.
pub const SEED_ENV: &str = "REALTALK_SEED";
pub const NEUTRAL_CSV: &str = "neutral_landmarks.csv";
pub const EMOTIONAL_CSV: &str = "emotional_landmarks.csv";
pub const RUN_MANIFEST: &str = "run.json";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Output frame name, `frame_%05d.png` in ffmpeg terms.
pub fn output_frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub vae: PathBuf,
    pub ldm: PathBuf,
    pub nerf: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let r = PathBuf::from("runs");
        Self { dataset: r.join("dataset"), vae: r.join("vae"), ldm: r.join("ldm"), nerf: r.join("nerf"), output: r.join("output") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips_per_emotion: usize,
    pub frames: usize,
    pub resolution: u32,
    /// Clip `k` is generated from seed `seed + k`.
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { clips_per_emotion: 2, frames: 32, resolution: 64, seed: 100, synth: SynthConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub emotion: EmotionLabel,
    /// Dataset clip supplying audio, poses and blendshapes unless the
    /// explicit paths below are set.
    pub clip: usize,
    pub audio: Option<PathBuf>,
    pub pitch: Option<PathBuf>,
    /// Clip directory with `poses.json` and `blendshapes.csv`.
    pub pose_source: Option<PathBuf>,
    pub motion_seed: u64,
    pub render_seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { emotion: EmotionLabel::Happy, clip: 0, audio: None, pitch: None, pose_source: None, motion_seed: 0, render_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub deltas: Vec<f64>,
    /// Adds a perceptual-distance column computed with the random
    /// convolutional backend.
    pub perceptual: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { deltas: DELTA_SWEEP.to_vec(), perceptual: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub delta: f64,
    pub lambda_lpips: f64,
    pub paths: Paths,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub ldm: LdmConfig,
    pub ldm_train: LdmTrainConfig,
    /// Standard deviation of noise added to LDM targets.
    pub ldm_noise: f64,
    pub nerf: NerfConfig,
    pub nerf_train: NerfTrainConfig,
    /// Dataset clip the radiance field is fitted to.
    pub nerf_clip: usize,
    pub infer: InferConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delta: ldm::DEFAULT_DELTA,
            lambda_lpips: crate::nerf::DEFAULT_LAMBDA_PERCEPTUAL,
            paths: Paths::default(),
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            ldm: LdmConfig::default(),
            ldm_train: LdmTrainConfig::default(),
            ldm_noise: 0.0,
            nerf: NerfConfig::default(),
            nerf_train: NerfTrainConfig::default(),
            nerf_clip: 0,
            infer: InferConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Applies one `a.b.c=value` override. The value is parsed as JSON and
/// taken as a string otherwise; the key path must already exist.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| Error::Config(format!("unknown config key {key:?}")))?;
                items.get_mut(i).ok_or_else(|| Error::Config(format!("index {i} out of range in {key:?}")))?
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
    }
    *slot = value;
    Ok(())
}

fn override_seeds(v: &mut Value, seed: u64) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                if k == "seed" || k.ends_with("_seed") {
                    *child = Value::from(seed);
                } else {
                    override_seeds(child, seed);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|c| override_seeds(c, seed)),
        _ => {}
    }
}

fn parse_object(text: &str, what: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse { what: what.to_string(), detail: e.to_string() })?;
    if !v.is_object() {
        return Err(Error::Config(format!("{what} must be a JSON object")));
    }
    Ok(v)
}

impl PipelineConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides,
    /// then a seed override. Unknown keys are rejected.
    pub fn load(file: Option<&Path>, overrides: &[String], seed_override: Option<&str>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            merge(&mut value, parse_object(&text, &path.display().to_string())?);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(s) = seed_override {
            let seed: u64 = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            override_seeds(&mut value, seed);
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults overlaid with a JSON document.
    pub fn load_str(json: &str) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, parse_object(json, "config")?);
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`PipelineConfig::load`] with the seed override read from
    /// [`SEED_ENV`].
    pub fn load_with_env(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::load(file, overrides, env.as_deref())
    }

    fn sync(&mut self) {
        self.ldm.delta = self.delta;
        self.nerf_train.lambda_perceptual = self.lambda_lpips;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be a finite non-negative number, got {}", self.delta)));
        }
        if !(self.lambda_lpips >= 0.0 && self.lambda_lpips.is_finite()) {
            return Err(Error::Config(format!("lambda_lpips must be a finite non-negative number, got {}", self.lambda_lpips)));
        }
        if self.ldm_noise < 0.0 {
            return Err(Error::Config(format!("ldm_noise must be non-negative, got {}", self.ldm_noise)));
        }
        if self.data.clips_per_emotion == 0 || self.data.frames == 0 {
            return Err(Error::Config("data.clips_per_emotion and data.frames must be positive".into()));
        }
        self.vae.validate()?;
        self.ldm.validate()?;
        self.nerf.validate()?;
        if self.ablation.deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Config(format!("ablation deltas {:?} must be finite and non-negative", self.ablation.deltas)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile { clip: what.to_string(), path: path.to_path_buf() })
    }
}

fn synthesizer_of(manifest: &DatasetManifest) -> Result<Synthesizer> {
    let value = manifest.synth.clone().ok_or_else(|| {
        Error::Config("the dataset has no generator settings; LDM training needs synthetic neutral counterparts".into())
    })?;
    let cfg: SynthConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("dataset generator settings: {e}")))?;
    Synthesizer::new(cfg)
}

/// Generates `clips_per_emotion` clips for every label and writes the dataset.
pub fn synth_data(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let synth = Synthesizer::new(cfg.data.synth.clone())?;
    let mut clips = Vec::new();
    let mut k = 0;
    for e in EmotionLabel::ALL {
        for _ in 0..cfg.data.clips_per_emotion {
            clips.push(synth.generate_clip(cfg.data.seed + k, e, cfg.data.frames, cfg.data.resolution)?);
            k += 1;
        }
    }
    write_dataset(&cfg.paths.dataset, &clips, Some(serde_json::to_value(&cfg.data.synth)?))
}

/// What a training stage wrote.
#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub final_psnr: Option<f64>,
}

fn dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    require(&cfg.paths.dataset.join("manifest.json"), "<dataset>")?;
    load_dataset(&cfg.paths.dataset)
}

/// Trains the audio-to-motion VAE on the neutral clips of the dataset.
pub fn train_vae_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    let ds = dataset(cfg)?;
    let clips: Vec<_> = (0..ds.len())
        .filter(|&i| ds.manifest.clips[i].emotion == EmotionLabel::Neutral)
        .map(|i| ds.clip(i))
        .collect::<Result<_>>()?;
    if clips.is_empty() {
        return Err(Error::Invalid("the dataset has no neutral clips to train the motion model on".into()));
    }
    let model = A2mVae::new(VaeShape { config: cfg.vae.clone(), content_dim: ds.manifest.audio_dim, pitch_dim: ds.manifest.pitch_dim })?;
    let mut store = ParameterStore::new(model.init_params(cfg.seed)?);
    let mut curve = LossCurve::default();
    train_vae(&model, &mut store, &clips, &cfg.vae_train, &mut curve)?;
    save_checkpoint(&cfg.paths.vae, &model.to_checkpoint(&store)?)?;
    fs::write(cfg.paths.vae.join("loss.csv"), curve.to_csv())?;
    Ok(StageSummary { checkpoint: cfg.paths.vae.clone(), steps: store.step(), final_loss: curve.last().map(|r| r.total), final_psnr: None })
}

/// Trains the landmark deformation model on every clip paired with its
/// regenerated neutral sequence.
pub fn train_ldm_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    let ds = dataset(cfg)?;
    let synth = synthesizer_of(&ds.manifest)?;
    let seqs = synthetic_pairs(&synth, &ds.clips()?, cfg.ldm_noise, cfg.seed)?;
    let model = Ldm::new(cfg.ldm.clone())?;
    let mut store = ParameterStore::new(model.init_params(cfg.seed)?);
    let mut curve = LossCurve::default();
    train_ldm(&model, &mut store, &seqs, &cfg.ldm_train, &mut curve)?;
    save_checkpoint(&cfg.paths.ldm, &model.to_checkpoint(&store)?)?;
    fs::write(cfg.paths.ldm.join("loss.csv"), curve.to_csv())?;
    Ok(StageSummary { checkpoint: cfg.paths.ldm.clone(), steps: store.step(), final_loss: curve.last().map(|r| r.total), final_psnr: None })
}

/// Fits the radiance field to one dataset clip.
pub fn train_nerf_stage(cfg: &PipelineConfig) -> Result<StageSummary> {
    let ds = dataset(cfg)?;
    let clip = NerfClip::from_clip(&ds.clip(cfg.nerf_clip)?)?;
    let model = TriPlaneNerf::new(cfg.nerf.clone())?;
    let mut store = ParameterStore::new(model.init_params(cfg.seed)?);
    let backend = RandomConvPerceptual::new(cfg.nerf_train.perceptual_seed);
    let mut curve = LossCurve::default();
    let report = train_nerf(&model, &mut store, &clip, &cfg.nerf_train, Some(&backend as &dyn PerceptualBackend), &mut curve)?;
    save_checkpoint(&cfg.paths.nerf, &model.to_checkpoint(&store)?)?;
    fs::write(cfg.paths.nerf.join("loss.csv"), curve.to_csv())?;
    let mut psnr_csv = String::from("step,psnr\n");
    for (s, p) in &report.psnr_curve {
        psnr_csv.push_str(&format!("{s},{p}\n"));
    }
    fs::write(cfg.paths.nerf.join("psnr.csv"), psnr_csv)?;
    Ok(StageSummary {
        checkpoint: cfg.paths.nerf.clone(),
        steps: store.step(),
        final_loss: curve.last().map(|r| r.total),
        final_psnr: Some(report.final_psnr),
    })
}

fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in ["index.json", "tensors.bin"] {
        h.update(fs::read(dir.join(f))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Trained models for inference.
pub struct Models {
    pub vae: A2mVae,
    pub vae_store: ParameterStore,
    pub ldm: Ldm,
    pub ldm_store: ParameterStore,
    pub nerf: TriPlaneNerf,
    pub nerf_store: ParameterStore,
    pub hashes: [String; 3],
}

impl Models {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        for (p, what) in [(&cfg.paths.vae, "<vae checkpoint>"), (&cfg.paths.ldm, "<ldm checkpoint>"), (&cfg.paths.nerf, "<nerf checkpoint>")] {
            require(&p.join("index.json"), what)?;
        }
        let (vae, vae_store) = A2mVae::from_checkpoint(&load_checkpoint(&cfg.paths.vae)?)?;
        let (ldm, ldm_store) = Ldm::from_checkpoint(&load_checkpoint(&cfg.paths.ldm)?)?;
        let (nerf, nerf_store) = TriPlaneNerf::from_checkpoint(&load_checkpoint(&cfg.paths.nerf)?)?;
        let hashes = [checkpoint_hash(&cfg.paths.vae)?, checkpoint_hash(&cfg.paths.ldm)?, checkpoint_hash(&cfg.paths.nerf)?];
        Ok(Self { vae, vae_store, ldm, ldm_store, nerf, nerf_store, hashes })
    }
}

/// Audio, cameras and blendshapes driving one inference run.
pub struct InferInputs {
    pub audio: AudioFeatureSequence,
    pub poses: Vec<FramePose>,
    pub blendshapes: Tensor<f32>,
}

impl InferInputs {
    pub fn resolve(cfg: &PipelineConfig) -> Result<Self> {
        let clip_dir = || -> Result<PathBuf> {
            let ds = dataset(cfg)?;
            let desc = ds.manifest.clips.get(cfg.infer.clip).ok_or_else(|| {
                Error::Config(format!("infer.clip {} out of range ({} clips)", cfg.infer.clip, ds.manifest.clips.len()))
            })?;
            Ok(ds.root.join(&desc.path))
        };
        let audio_path = match &cfg.infer.audio {
            Some(p) => p.clone(),
            None => clip_dir()?.join(data_io::AUDIO_FILE),
        };
        let pitch_path = match &cfg.infer.pitch {
            Some(p) => p.clone(),
            None => audio_path.with_file_name(data_io::PITCH_FILE),
        };
        require(&audio_path, "<audio>")?;
        require(&pitch_path, "<pitch>")?;
        let audio = AudioFeatureSequence::new(read_rtaf(&audio_path)?, read_rtaf(&pitch_path)?)?;
        let pose_dir = match &cfg.infer.pose_source {
            Some(p) => p.clone(),
            None => clip_dir()?,
        };
        let poses_path = pose_dir.join(data_io::POSES_FILE);
        if !poses_path.exists() {
            return Err(Error::MissingFile { clip: "<pose source>".into(), path: poses_path });
        }
        let poses: Vec<FramePose> = serde_json::from_slice(&fs::read(&poses_path)?)
            .map_err(|e| Error::Parse { what: poses_path.display().to_string(), detail: e.to_string() })?;
        let bs_path = pose_dir.join(data_io::BLENDSHAPES_FILE);
        require(&bs_path, "<pose source>")?;
        let blendshapes = read_matrix_csv(&bs_path, None)?;
        if poses.len() < audio.len() || blendshapes.rows() < audio.len() {
            return Err(Error::Invalid(format!(
                "pose source covers {} frames but the audio has {}",
                poses.len().min(blendshapes.rows()),
                audio.len()
            )));
        }
        Ok(Self { audio, poses, blendshapes })
    }
}

/// Landmark traces and frames of one inference run.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub dir: PathBuf,
    pub neutral: Tensor<f32>,
    pub emotional: Tensor<f32>,
    pub frames: Vec<RgbImage>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    emotion: EmotionLabel,
    delta: f64,
    frames: usize,
    motion_seed: u64,
    render_seed: u64,
    checkpoints: [&'a str; 3],
}

/// Audio to neutral landmarks, deformation toward `emotion` scaled by
/// `delta`, then one render per frame. Writes frames, both landmark traces
/// and a run manifest into `out`.
pub fn infer_end_to_end(
    cfg: &PipelineConfig,
    models: &Models,
    inputs: &InferInputs,
    emotion: EmotionLabel,
    delta: f64,
    out: &Path,
) -> Result<InferOutput> {
    if models.vae.shape.content_dim != inputs.audio.content.cols() || models.vae.shape.pitch_dim != inputs.audio.pitch.cols() {
        return Err(Error::Incompatible(format!(
            "motion model expects {}+{} audio features, input has {}+{}",
            models.vae.shape.content_dim,
            models.vae.shape.pitch_dim,
            inputs.audio.content.cols(),
            inputs.audio.pitch.cols()
        )));
    }
    if models.nerf.config.blendshape_dim != inputs.blendshapes.cols() {
        return Err(Error::Incompatible(format!(
            "radiance field expects {} blendshapes, pose source has {}",
            models.nerf.config.blendshape_dim,
            inputs.blendshapes.cols()
        )));
    }
    let neutral = infer_motion(&models.vae, &models.vae_store.params, &inputs.audio, cfg.infer.motion_seed)?;
    if neutral.cols() != LANDMARK_DIM {
        return Err(Error::Incompatible(format!("motion model emits {} landmark values", neutral.cols())));
    }
    let disp = models.ldm.predict(&models.ldm_store.params, &neutral, emotion)?;
    let emotional = apply_deformation(&neutral, &disp, delta)?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let mut frames = Vec::with_capacity(neutral.rows());
    for t in 0..neutral.rows() {
        let cond = FrameCondition {
            landmarks: emotional.row_slice(t).to_vec(),
            blendshapes: inputs.blendshapes.row_slice(t).to_vec(),
        };
        let mut img = models
            .nerf
            .render_frame(&models.nerf_store.params, &inputs.poses[t], &cond, cfg.infer.render_seed.wrapping_add(t as u64))?
            .image;
        img.quantize_u8();
        write_png(&frames_dir.join(output_frame_name(t)), &img)?;
        frames.push(img);
    }
    write_matrix_csv(&out.join(NEUTRAL_CSV), &neutral)?;
    write_matrix_csv(&out.join(EMOTIONAL_CSV), &emotional)?;
    let manifest = RunManifest {
        emotion,
        delta,
        frames: frames.len(),
        motion_seed: cfg.infer.motion_seed,
        render_seed: cfg.infer.render_seed,
        checkpoints: [&models.hashes[0], &models.hashes[1], &models.hashes[2]],
    };
    fs::write(out.join(RUN_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(InferOutput { dir: out.to_path_buf(), neutral, emotional, frames })
}

/// `infer` command: configured emotion and delta into `paths.output`.
pub fn infer(cfg: &PipelineConfig) -> Result<InferOutput> {
    let models = Models::load(cfg)?;
    let inputs = InferInputs::resolve(cfg)?;
    infer_end_to_end(cfg, &models, &inputs, cfg.infer.emotion, cfg.delta, &cfg.paths.output)
}

/// Reads frames and emotional landmarks of a finished run.
pub fn read_run(dir: &Path) -> Result<(Vec<RgbImage>, Tensor<f32>)> {
    let lm_path = dir.join(EMOTIONAL_CSV);
    require(&lm_path, "<inference output>")?;
    let landmarks = read_matrix_csv(&lm_path, Some(LANDMARK_DIM))?;
    let frames = (0..landmarks.rows())
        .map(|t| read_png(&dir.join("frames").join(output_frame_name(t))))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, landmarks))
}

/// Metrics of a run against dataset clip `infer.clip`, written next to it.
pub fn evaluate(cfg: &PipelineConfig, run_dir: &Path, method: &str) -> Result<MetricReport> {
    let ds = dataset(cfg)?;
    let gt = ds.clip(cfg.infer.clip)?;
    let (frames, landmarks) = read_run(run_dir)?;
    let report = MetricReport::compute(&ds.manifest.clips[cfg.infer.clip].path, method, &frames, &gt.frames, &landmarks, &gt.landmarks)?;
    report.write(run_dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub delta: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub perceptual: Option<f64>,
    pub m_lmd: f64,
    pub f_lmd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub emotion: EmotionLabel,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "delta,ssim,psnr,lpips,m_lmd,f_lmd";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let p = r.perceptual.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into());
            s.push_str(&format!("{},{},{},{},{},{}\n", r.delta, r.ssim, r.psnr, p, r.m_lmd, r.f_lmd));
        }
        s
    }
}

fn frame_perceptual(backend: &RandomConvPerceptual, a: &[RgbImage], b: &[RgbImage]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.width != x.height {
            return Err(Error::Invalid("perceptual column needs square frames".into()));
        }
        let mut tape = Tape::<f32>::new();
        let n = (x.width * x.height) as usize;
        let xv = tape.constant(Tensor::new(n, 3, x.data.clone()));
        let yv = tape.constant(Tensor::new(n, 3, y.data.clone()));
        let d = backend.distance(&mut tape, xv, yv, x.width as usize)?;
        total += tape.value(d).item() as f64;
    }
    Ok(total / a.len().max(1) as f64)
}

/// Runs inference and evaluation for every `delta`, one row each, into
/// `paths.output/delta_<value>`, and writes the table.
pub fn ablate_delta(cfg: &PipelineConfig, deltas: &[f64]) -> Result<AblationReport> {
    if deltas.is_empty() {
        return Err(Error::Config("ablate-delta needs at least one delta".into()));
    }
    let models = Models::load(cfg)?;
    let inputs = InferInputs::resolve(cfg)?;
    let ds = dataset(cfg)?;
    let gt = ds.clip(cfg.infer.clip)?;
    let backend = cfg.ablation.perceptual.then(|| RandomConvPerceptual::new(cfg.nerf_train.perceptual_seed));
    let mut rows = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let dir = cfg.paths.output.join(format!("delta_{d}"));
        let out = infer_end_to_end(cfg, &models, &inputs, cfg.infer.emotion, d, &dir)?;
        let report = MetricReport::compute(&format!("delta_{d}"), "realtalk", &out.frames, &gt.frames, &out.emotional, &gt.landmarks)?;
        report.write(&dir)?;
        let perceptual = match &backend {
            Some(b) => Some(frame_perceptual(b, &out.frames, &gt.frames)?),
            None => None,
        };
        rows.push(AblationRow {
            delta: d,
            ssim: report.ssim.mean,
            psnr: report.psnr.mean,
            perceptual,
            m_lmd: report.m_lmd.mean,
            f_lmd: report.f_lmd.mean,
        });
    }
    let report = AblationReport { emotion: cfg.infer.emotion, rows };
    fs::create_dir_all(&cfg.paths.output)?;
    fs::write(cfg.paths.output.join(ABLATION_CSV), report.to_csv())?;
    fs::write(cfg.paths.output.join("ablation.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = PipelineConfig::load(None, &["delta=0.3".into(), "infer.emotion=sad".into()], None).unwrap();
        assert_eq!(cfg.delta, 0.3);
        assert_eq!(cfg.ldm.delta, 0.3);
        assert_eq!(cfg.infer.emotion, EmotionLabel::Sad);
        assert!(matches!(PipelineConfig::load(None, &["delte=0.3".into()], None), Err(Error::Config(_))));
        assert!(PipelineConfig::load(None, &["delta=-1".into()], None).is_err());
        assert!(PipelineConfig::load(None, &["infer.emotion=bored".into()], None).is_err());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let cfg = PipelineConfig::load(None, &[], Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.vae_train.seed, 42);
        assert_eq!(cfg.ldm_train.seed, 42);
        assert_eq!(cfg.nerf_train.seed, 42);
        assert_eq!(cfg.data.seed, 42);
        assert_eq!(cfg.infer.render_seed, 42);
        assert!(PipelineConfig::load(None, &[], Some("x")).is_err());
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"ldm": {"hiden": 3}}"#).unwrap();
        assert!(matches!(PipelineConfig::load(Some(&p), &[], None), Err(Error::Config(_))));
        fs::write(&p, r#"{"ldm": {"hidden": 64}}"#).unwrap();
        assert_eq!(PipelineConfig::load(Some(&p), &[], None).unwrap().ldm.hidden, 64);
    }
}
