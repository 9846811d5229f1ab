//! Procedural talking-face clips with exactly known ground truth.
//!
//! Every landmark frame is `canonical + field(emotion) + mouth_motion(audio)`,
//! with all three terms quantized to multiples of 2⁻¹⁶ so the sum and its
//! inverse are exact in `f32`. Frames are Gaussian splats of the landmarks
//! seen through the stored per-frame cameras.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatureSequence;
use crate::camera::{FramePose, HeadPose, Intrinsics};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::face::{is_mouth_point, EmotionLabel, LANDMARK_DIM, NUM_POINTS};
use crate::frame::RgbImage;

const QUANTUM: f64 = 1.0 / 65536.0;

fn quantize(v: f64) -> f32 {
    ((v / QUANTUM).round() * QUANTUM) as f32
}

pub const SUPPORTED_RESOLUTIONS: [u32; 3] = [32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub topology_seed: u64,
    pub field_seed: u64,
    pub audio_dim: usize,
    pub pitch_dim: usize,
    pub blendshape_dim: usize,
    /// Peak lip displacement in head-frame units.
    pub mouth_amplitude: f64,
    /// Upper bound on the L2 norm of any emotion displacement (204-vector).
    pub max_displacement: f64,
    /// Minimum L2 distance between the fields of two emotions.
    pub separation_floor: f64,
    pub audio_noise: f64,
    pub pose_jitter_deg: f64,
    pub camera_distance: f64,
    /// Splat standard deviation in head-frame units.
    pub splat_sigma: f64,
    pub splat_opacity: f64,
    pub background: [f32; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topology_seed: 7,
            field_seed: 11,
            audio_dim: 16,
            pitch_dim: 4,
            blendshape_dim: 8,
            mouth_amplitude: 0.06,
            max_displacement: 0.3,
            separation_floor: 0.1,
            audio_noise: 0.05,
            pose_jitter_deg: 2.0,
            camera_distance: 3.0,
            splat_sigma: 0.045,
            splat_opacity: 0.9,
            background: [0.05, 0.05, 0.08],
        }
    }
}

/// Neutral face in the head frame (x right, y down, z away from the camera).
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalFace {
    pub points: Vec<[f32; 3]>,
    pub mouth_indices: Vec<usize>,
    pub topology_seed: u64,
}

impl CanonicalFace {
    pub fn new(topology_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(topology_seed ^ 0x7f4a_7c15);
        let jitter = Normal::new(0.0, 0.008).unwrap();
        let mut pts: Vec<[f64; 3]> = Vec::with_capacity(NUM_POINTS);
        // jaw line 0–16
        for i in 0..17 {
            let phi = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
            let s = phi.sin();
            pts.push([0.62 * phi.cos(), -0.1 + 0.72 * s, 0.05 - 0.2 * s]);
        }
        // brows 17–26
        for side in [-1.0, 1.0] {
            for k in 0..5 {
                let u = k as f64 / 4.0;
                let x = if side < 0.0 { -0.5 + 0.38 * u } else { 0.12 + 0.38 * u };
                let arch = 0.05 * (std::f64::consts::PI * u).sin();
                pts.push([x, -0.42 - arch, -0.28]);
            }
        }
        // nose bridge 27–30, nostrils 31–35
        for k in 0..4 {
            let u = k as f64 / 3.0;
            pts.push([0.0, -0.3 + 0.33 * u, -0.36 - 0.12 * u]);
        }
        for k in 0..5 {
            let x = -0.12 + 0.06 * k as f64;
            pts.push([x, 0.1, -0.38 + 0.3 * x.abs()]);
        }
        // eyes 36–47
        for cx in [-0.3, 0.3] {
            for k in 0..6 {
                let a = std::f64::consts::PI * (1.0 + k as f64 / 3.0);
                pts.push([cx + 0.1 * a.cos(), -0.25 + 0.04 * a.sin(), -0.3]);
            }
        }
        // outer lip 48–59, inner lip 60–67
        for k in 0..12 {
            let a = std::f64::consts::PI * (1.0 + k as f64 / 6.0);
            pts.push([0.22 * a.cos(), 0.33 + 0.08 * a.sin(), -0.32]);
        }
        for k in 0..8 {
            let a = std::f64::consts::PI * (1.0 + k as f64 / 4.0);
            pts.push([0.14 * a.cos(), 0.33 + 0.03 * a.sin(), -0.31]);
        }
        debug_assert_eq!(pts.len(), NUM_POINTS);
        let points = pts
            .iter()
            .map(|p| {
                [
                    quantize(p[0] + jitter.sample(&mut rng)),
                    quantize(p[1] + jitter.sample(&mut rng)),
                    quantize(p[2] + jitter.sample(&mut rng)),
                ]
            })
            .collect();
        Self { points, mouth_indices: crate::face::mouth_indices(), topology_seed }
    }

    pub fn flattened(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Per-emotion displacement of all 68 points; zero for `neutral`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionDisplacementField {
    fields: Vec<Vec<f32>>,
    pub max_norm: f64,
}

impl EmotionDisplacementField {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.field_seed);
        for _attempt in 0..64 {
            let fields: Vec<Vec<f32>> = EmotionLabel::ALL
                .iter()
                .map(|&e| {
                    if e == EmotionLabel::Neutral {
                        vec![0.0; LANDMARK_DIM]
                    } else {
                        random_field(&mut rng, config.max_displacement)
                    }
                })
                .collect();
            let separated = (0..fields.len()).all(|i| {
                (i + 1..fields.len()).all(|j| l2_dist(&fields[i], &fields[j]) >= config.separation_floor)
            });
            if separated {
                return Ok(Self { fields, max_norm: config.max_displacement });
            }
        }
        Err(Error::Config(format!(
            "could not draw emotion fields separated by {} under norm {}",
            config.separation_floor, config.max_displacement
        )))
    }

    pub fn get(&self, e: EmotionLabel) -> &[f32] {
        &self.fields[e.code()]
    }

    /// Mean L2 norm over the seven non-neutral fields.
    pub fn mean_non_neutral_norm(&self) -> f64 {
        let norms: Vec<f64> = EmotionLabel::ALL
            .iter()
            .filter(|&&e| e != EmotionLabel::Neutral)
            .map(|&e| l2_norm(self.get(e)))
            .collect();
        norms.iter().sum::<f64>() / norms.len() as f64
    }
}

fn random_field(rng: &mut ChaCha8Rng, max_norm: f64) -> Vec<f32> {
    // region-coherent offsets plus a little per-point texture
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut region = [[0.0f64; 3]; 6];
    for r in region.iter_mut() {
        for v in r.iter_mut() {
            *v = n.sample(rng);
        }
    }
    let region_of = |i: usize| match i {
        0..=16 => 0,
        17..=26 => 1,
        27..=35 => 2,
        36..=47 => 3,
        48..=59 => 4,
        _ => 5,
    };
    let mut raw = vec![0.0f64; LANDMARK_DIM];
    for i in 0..NUM_POINTS {
        let side = if i < 27 { ((i % 17) as f64 / 8.0 - 1.0).signum() } else { 1.0 };
        for k in 0..3 {
            let depth_scale = if k == 2 { 0.3 } else { 1.0 };
            raw[i * 3 + k] = depth_scale * (region[region_of(i)][k] * if k == 0 { side } else { 1.0 }
                + 0.3 * n.sample(rng));
        }
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = max_norm * rng.random_range(0.6..0.95);
    raw.iter().map(|v| quantize(v * target / norm)).collect()
}

fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

fn l2_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Fixed affine readout from audio content features to mouth motion.
#[derive(Clone, Debug, PartialEq)]
pub struct MouthReadout {
    /// Audio mixing matrix (`audio_dim × 2`): features = mix·[open, width] + offset.
    mix: Vec<[f64; 2]>,
    offset: Vec<f64>,
    /// Pseudo-inverse rows recovering (open, width) from features.
    readout: [Vec<f64>; 2],
    open_basis: Vec<f64>,
    width_basis: Vec<f64>,
    amplitude: f64,
}

impl MouthReadout {
    fn new(config: &SynthConfig, face: &CanonicalFace) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.topology_seed.wrapping_mul(31).wrapping_add(5));
        let n = Normal::new(0.0, 1.0).unwrap();
        let d = config.audio_dim.max(2);
        let mix: Vec<[f64; 2]> = (0..d).map(|_| [n.sample(&mut rng), n.sample(&mut rng)]).collect();
        let offset: Vec<f64> = (0..d).map(|_| 0.5 * n.sample(&mut rng)).collect();
        // (MᵀM)⁻¹Mᵀ
        let mut g = [[0.0f64; 2]; 2];
        for row in &mix {
            for a in 0..2 {
                for b in 0..2 {
                    g[a][b] += row[a] * row[b];
                }
            }
        }
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let inv = [[g[1][1] / det, -g[0][1] / det], [-g[1][0] / det, g[0][0] / det]];
        let readout = [
            mix.iter().map(|r| inv[0][0] * r[0] + inv[0][1] * r[1]).collect(),
            mix.iter().map(|r| inv[1][0] * r[0] + inv[1][1] * r[1]).collect(),
        ];

        let mut open_basis = vec![0.0; LANDMARK_DIM];
        let mut width_basis = vec![0.0; LANDMARK_DIM];
        let center_x = 0.0f64;
        for &i in &face.mouth_indices {
            let p = face.points[i];
            let rel_x = p[0] as f64 - center_x;
            let half_width = if i < 60 { 0.22 } else { 0.14 };
            let centrality = (1.0 - (rel_x / half_width).powi(2)).max(0.0);
            let lower = p[1] as f64 > 0.33;
            // lower lip drops further than the upper lip rises
            open_basis[i * 3 + 1] = if lower { centrality } else { -0.4 * centrality };
            width_basis[i * 3] = rel_x / half_width;
        }
        Self { mix, offset, readout, open_basis, width_basis, amplitude: config.mouth_amplitude }
    }

    /// Articulation `(open, width)` recovered from one frame of features.
    pub fn articulation(&self, features: &[f32]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.readout[k]
                .iter()
                .zip(features)
                .zip(&self.offset)
                .map(|((&r, &f), &c)| r * (f as f64 - c))
                .sum();
        }
        out
    }

    /// Mouth displacement (204-vector, zero off the mouth) for one frame.
    pub fn motion(&self, features: &[f32]) -> Vec<f32> {
        let [open, width] = self.articulation(features);
        (0..LANDMARK_DIM)
            .map(|j| {
                if !is_mouth_point(j / 3) {
                    return 0.0;
                }
                quantize(self.amplitude * (open * self.open_basis[j] + 0.5 * width * self.width_basis[j]))
            })
            .collect()
    }

    fn features(&self, open: f64, width: f64, noise: &[f64]) -> Vec<f32> {
        self.mix
            .iter()
            .zip(&self.offset)
            .zip(noise)
            .map(|((m, &c), &e)| (m[0] * open + m[1] * width + c + e) as f32)
            .collect()
    }
}

/// One clip of paired frames, landmarks, audio, blendshapes and cameras.
/// All sequences share the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<RgbImage>,
    /// `T × 204`.
    pub landmarks: Tensor<f32>,
    pub audio: AudioFeatureSequence,
    /// `T × D_b`, each value in `[0, 1]`.
    pub blendshapes: Tensor<f32>,
    pub poses: Vec<FramePose>,
    pub emotion: EmotionLabel,
    pub resolution: u32,
    pub seed: u64,
}

/// Clips produced by [`Synthesizer::generate_clip`].
pub type SyntheticClip = Clip;

impl Clip {
    pub fn len(&self) -> usize {
        self.landmarks.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every sequence has the landmark sequence's length.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let lens = [
            ("frames", self.frames.len()),
            ("audio", self.audio.len()),
            ("blendshapes", self.blendshapes.rows()),
            ("poses", self.poses.len()),
        ];
        for (what, n) in lens {
            if n != t {
                return Err(Error::ShapeMismatch {
                    what: format!("clip {what} length"),
                    expected: t.to_string(),
                    found: n.to_string(),
                });
            }
        }
        if self.landmarks.cols() != LANDMARK_DIM {
            return Err(Error::ShapeMismatch {
                what: "landmark width".into(),
                expected: LANDMARK_DIM.to_string(),
                found: self.landmarks.cols().to_string(),
            });
        }
        Ok(())
    }
}

/// Generator state shared by all clips of a dataset: the face, the emotion
/// fields and the audio-to-mouth readout.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub config: SynthConfig,
    pub face: CanonicalFace,
    pub field: EmotionDisplacementField,
    pub readout: MouthReadout,
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Result<Self> {
        if config.audio_dim < 2 {
            return Err(Error::Config("synth audio_dim must be at least 2".into()));
        }
        let face = CanonicalFace::new(config.topology_seed);
        let field = EmotionDisplacementField::new(&config)?;
        let readout = MouthReadout::new(&config, &face);
        Ok(Self { config, face, field, readout })
    }

    /// Exact displacement applied to every frame of a clip with this emotion.
    pub fn oracle_displacement(&self, emotion: EmotionLabel) -> Vec<f32> {
        self.field.get(emotion).to_vec()
    }

    pub fn mouth_motion(&self, features: &[f32]) -> Vec<f32> {
        self.readout.motion(features)
    }

    /// Landmarks for a feature sequence under `emotion`.
    pub fn landmarks_for(&self, content: &Tensor<f32>, emotion: EmotionLabel) -> Tensor<f32> {
        let canon = self.face.flattened();
        let field = self.field.get(emotion);
        let mut out = Tensor::zeros(content.rows(), LANDMARK_DIM);
        for t in 0..content.rows() {
            let motion = self.mouth_motion(content.row_slice(t));
            for (j, o) in out.row_slice_mut(t).iter_mut().enumerate() {
                *o = canon[j] + field[j] + motion[j];
            }
        }
        out
    }

    pub fn generate_clip(&self, seed: u64, emotion: EmotionLabel, frames: usize, resolution: u32) -> Result<SyntheticClip> {
        if frames == 0 {
            return Err(Error::Invalid("generate_clip needs at least one frame".into()));
        }
        if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
            return Err(Error::Invalid(format!(
                "resolution {resolution} not supported (use one of {SUPPORTED_RESOLUTIONS:?})"
            )));
        }
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).unwrap();

        // articulation: syllable-like openness pulses and a slow width drift
        let rate = rng.random_range(0.9..1.6);
        let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut width = 0.0f64;
        let mut content = Tensor::zeros(frames, cfg.audio_dim);
        for t in 0..frames {
            let syllable = ((t as f64) * rate + phase0).sin();
            let jitter = 0.15 * std_normal.sample(&mut rng);
            let open = (syllable.max(0.0) + jitter).clamp(0.0, 1.2);
            width = (0.7 * width + 0.5 * std_normal.sample(&mut rng)).clamp(-1.0, 1.0);
            let noise: Vec<f64> = (0..cfg.audio_dim).map(|_| cfg.audio_noise * std_normal.sample(&mut rng)).collect();
            content.row_slice_mut(t).copy_from_slice(&self.readout.features(open, width, &noise));
        }
        let mut pitch = Tensor::zeros(frames, cfg.pitch_dim);
        let mut state = vec![0.0f64; cfg.pitch_dim];
        for t in 0..frames {
            for (k, s) in state.iter_mut().enumerate() {
                *s = 0.85 * *s + 0.3 * std_normal.sample(&mut rng);
                pitch.set(t, k, *s as f32);
            }
        }
        let mut blendshapes = Tensor::zeros(frames, cfg.blendshape_dim);
        let mut walk: Vec<f64> = (0..cfg.blendshape_dim).map(|_| rng.random_range(0.2..0.8)).collect();
        for t in 0..frames {
            for (k, w) in walk.iter_mut().enumerate() {
                *w = (*w + 0.05 * std_normal.sample(&mut rng)).clamp(0.0, 1.0);
                blendshapes.set(t, k, *w as f32);
            }
        }
        let jitter = cfg.pose_jitter_deg.to_radians();
        let mut angles = [0.0f64; 3];
        let intrinsics = Intrinsics::for_resolution(resolution);
        let poses: Vec<FramePose> = (0..frames)
            .map(|_| {
                for a in angles.iter_mut() {
                    *a = (0.8 * *a + 0.4 * jitter * std_normal.sample(&mut rng)).clamp(-jitter, jitter);
                }
                FramePose {
                    pose: HeadPose::from_euler(angles[0], angles[1], angles[2], [0.0, 0.0, cfg.camera_distance]),
                    intrinsics,
                }
            })
            .collect();

        let landmarks = self.landmarks_for(&content, emotion);
        let frames_out = (0..frames)
            .map(|t| self.rasterize(landmarks.row_slice(t), &poses[t]))
            .collect();
        Ok(SyntheticClip {
            frames: frames_out,
            landmarks,
            audio: AudioFeatureSequence::new(content, pitch)?,
            blendshapes,
            poses,
            emotion,
            resolution,
            seed,
        })
    }

    /// Back-to-front Gaussian splats of the landmarks, quantized to 8 bits.
    pub fn rasterize(&self, landmarks: &[f32], pose: &FramePose) -> RgbImage {
        let k = &pose.intrinsics;
        let mut img = RgbImage::filled(k.width, k.height, self.config.background);
        let mut projected: Vec<(f64, f64, f64, usize)> = (0..NUM_POINTS)
            .map(|i| {
                let p = [landmarks[i * 3] as f64, landmarks[i * 3 + 1] as f64, landmarks[i * 3 + 2] as f64];
                let (u, v, z) = pose.project(p);
                (u, v, z, i)
            })
            .collect();
        // far first; ties broken by index so the order is total
        projected.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.3.cmp(&b.3)));
        for (u, v, z, i) in projected {
            let sigma_px = self.config.splat_sigma * k.fx / z;
            let reach = (3.0 * sigma_px).ceil() as i64;
            let color = point_color(i);
            let (cx, cy) = (u.floor() as i64, v.floor() as i64);
            for py in (cy - reach).max(0)..=(cy + reach).min(k.height as i64 - 1) {
                for px in (cx - reach).max(0)..=(cx + reach).min(k.width as i64 - 1) {
                    let dx = px as f64 + 0.5 - u;
                    let dy = py as f64 + 0.5 - v;
                    let a = (self.config.splat_opacity * (-(dx * dx + dy * dy) / (2.0 * sigma_px * sigma_px)).exp()) as f32;
                    let old = img.pixel(px as u32, py as u32);
                    img.set_pixel(
                        px as u32,
                        py as u32,
                        [
                            (1.0 - a) * old[0] + a * color[0],
                            (1.0 - a) * old[1] + a * color[1],
                            (1.0 - a) * old[2] + a * color[2],
                        ],
                    );
                }
            }
        }
        img.quantize_u8();
        img
    }
}

fn point_color(i: usize) -> [f32; 3] {
    match i {
        0..=16 => [0.85, 0.65, 0.5],
        17..=26 => [0.35, 0.2, 0.1],
        27..=35 => [0.8, 0.55, 0.45],
        36..=47 => [0.15, 0.15, 0.35],
        48..=59 => [0.8, 0.15, 0.2],
        _ => [0.5, 0.05, 0.1],
    }
}
