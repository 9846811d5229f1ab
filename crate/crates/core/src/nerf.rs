//! Tri-plane attention radiance field.
//!
//! Positions in the head frame's unit cube are encoded by three orthogonal
//! 2D multiresolution hash grids. A small network maps the encoding plus a
//! per-frame condition (attention-weighted landmarks and blendshapes) to a
//! density and a color, and rays are alpha-composited over a solid
//! background.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{intersect_unit_cube, FramePose, Vec3};
use crate::data_io::Checkpoint;
use crate::engine::layers::ensure_finite;
use crate::engine::{
    apply_gradients, AdamConfig, Conv1d, Init, Linear, LossCurve, OptimizerState, ParameterStore, Params, Scalar, Tape,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::face::{is_mouth_point, LANDMARK_DIM, NUM_POINTS};
use crate::frame::RgbImage;
use crate::metrics::psnr;
use crate::synth::Clip;

pub const CHECKPOINT_KIND: &str = "nerf";
pub const LANDMARK_MEAN: &str = "nerf.landmark_mean";
pub const LANDMARK_SCALE: &str = "nerf.landmark_scale";
pub const DEFAULT_LAMBDA_PERCEPTUAL: f64 = 0.1;
const HASH_PRIME: u64 = 2_654_435_761;
const COND: &str = "nerf.cond.w";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features: usize,
    pub log2_table: u32,
    pub base_resolution: usize,
    pub finest_resolution: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self { levels: 14, features: 2, log2_table: 14, base_resolution: 16, finest_resolution: 512 }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("hash grid: {m}")));
        if self.levels == 0 || self.features == 0 {
            return bad("levels and features must be positive".into());
        }
        if !(1..=24).contains(&self.log2_table) {
            return bad(format!("log2_table {} outside 1..=24", self.log2_table));
        }
        if self.base_resolution == 0 || self.finest_resolution < self.base_resolution {
            return bad(format!(
                "resolutions must satisfy 0 < base ({}) <= finest ({})",
                self.base_resolution, self.finest_resolution
            ));
        }
        Ok(())
    }

    /// Per-level resolution growth factor.
    pub fn growth(&self) -> f64 {
        if self.levels == 1 {
            1.0
        } else {
            (self.finest_resolution as f64 / self.base_resolution as f64).powf(1.0 / (self.levels - 1) as f64)
        }
    }

    /// Cells per axis at `level`.
    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth().powi(level as i32) + 1e-9).floor() as usize
    }

    pub fn table_size(&self) -> usize {
        1 << self.log2_table
    }

    /// Levels whose vertex grid fits the table are indexed directly.
    pub fn is_dense(&self, level: usize) -> bool {
        let n = self.resolution(level) + 1;
        n * n <= self.table_size()
    }

    pub fn rows(&self, level: usize) -> usize {
        let n = self.resolution(level) + 1;
        (n * n).min(self.table_size())
    }

    /// Length of one plane's encoding.
    pub fn plane_width(&self) -> usize {
        self.levels * self.features
    }

    /// Corner rows and bilinear weights of `(a, b) ∈ [−1, 1]²` at `level`.
    pub fn corners(&self, level: usize, a: f64, b: f64) -> ([usize; 4], [f64; 4]) {
        let n = self.resolution(level);
        let cell = |c: f64| {
            let u = ((c + 1.0) * 0.5 * n as f64).clamp(0.0, n as f64);
            let i = (u.floor() as usize).min(n - 1);
            (i, u - i as f64)
        };
        let (i, fu) = cell(a);
        let (j, fv) = cell(b);
        let dense = self.is_dense(level);
        let size = self.table_size() as u64;
        let index = |x: usize, y: usize| {
            if dense {
                y * (n + 1) + x
            } else {
                (((x as u64).wrapping_mul(1) ^ (y as u64).wrapping_mul(HASH_PRIME)) % size) as usize
            }
        };
        (
            [index(i, j), index(i + 1, j), index(i, j + 1), index(i + 1, j + 1)],
            [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    XY,
    YZ,
    XZ,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::XY, Plane::YZ, Plane::XZ];

    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::XY => (0, 1),
            Plane::YZ => (1, 2),
            Plane::XZ => (0, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::XY => "xy",
            Plane::YZ => "yz",
            Plane::XZ => "xz",
        }
    }
}

/// Three plane encoders sharing one [`HashGridConfig`]; the tables live in
/// [`Params`] as one `rows × features` tensor per plane and level.
#[derive(Clone, Debug)]
pub struct TriPlaneHashGrid {
    pub config: HashGridConfig,
    pub prefix: String,
}

fn clamp_unit(v: f64, clamped: &mut usize) -> f64 {
    if (-1.0..=1.0).contains(&v) {
        v
    } else {
        *clamped += 1;
        if v.is_nan() {
            0.0
        } else {
            v.clamp(-1.0, 1.0)
        }
    }
}

fn warn_clamped(clamped: usize) {
    if clamped > 0 {
        log::warn!("{clamped} hash grid coordinates outside [-1, 1] were clamped");
    }
}

impl TriPlaneHashGrid {
    pub fn new(prefix: impl Into<String>, config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, prefix: prefix.into() })
    }

    pub fn table_name(&self, plane: Plane, level: usize) -> String {
        format!("{}.{}.l{level:02}", self.prefix, plane.name())
    }

    /// Tables start uniform in `±1e-4`.
    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        for plane in Plane::ALL {
            for l in 0..self.config.levels {
                params.insert(self.table_name(plane, l), init.uniform(self.config.rows(l), self.config.features, 1e-4), true)?;
            }
        }
        Ok(())
    }

    /// Concatenated per-level bilinear features of one plane at `(a, b)`.
    pub fn encode_plane<T: Scalar>(&self, params: &Params<T>, plane: Plane, a: f64, b: f64) -> Result<Vec<T>> {
        let mut clamped = 0;
        let (a, b) = (clamp_unit(a, &mut clamped), clamp_unit(b, &mut clamped));
        warn_clamped(clamped);
        let d = self.config.features;
        let mut out = Vec::with_capacity(self.config.plane_width());
        for l in 0..self.config.levels {
            let table = params.get(&self.table_name(plane, l))?;
            let (idx, w) = self.config.corners(l, a, b);
            for f in 0..d {
                let v: f64 = (0..4).map(|c| w[c] * table.get(idx[c], f).as_f64()).sum();
                out.push(T::from_f64_lossy(v));
            }
        }
        Ok(out)
    }

    /// `XY ⊕ YZ ⊕ XZ` encoding of one position.
    pub fn encode<T: Scalar>(&self, params: &Params<T>, x: Vec3) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(3 * self.config.plane_width());
        for plane in Plane::ALL {
            let (i, j) = plane.axes();
            out.extend(self.encode_plane(params, plane, x[i], x[j])?);
        }
        Ok(out)
    }

    /// Differentiable encoding of many positions (`N × 3·L·D`).
    pub fn encode_batch<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, xs: &[Vec3]) -> Result<Var> {
        let mut clamped = 0;
        let pts: Vec<Vec3> = xs
            .iter()
            .map(|x| [clamp_unit(x[0], &mut clamped), clamp_unit(x[1], &mut clamped), clamp_unit(x[2], &mut clamped)])
            .collect();
        warn_clamped(clamped);
        let mut parts = Vec::with_capacity(3 * self.config.levels);
        for plane in Plane::ALL {
            let (i, j) = plane.axes();
            for l in 0..self.config.levels {
                let table = tape.param(params, &self.table_name(plane, l))?;
                let mut idx = Vec::with_capacity(pts.len());
                let mut w = Vec::with_capacity(pts.len());
                for p in &pts {
                    let (ci, cw) = self.config.corners(l, p[i], p[j]);
                    idx.push(ci);
                    w.push(cw.map(T::from_f64_lossy));
                }
                parts.push(hash_interp(tape, table, idx, w));
            }
        }
        Ok(tape.concat_cols(&parts))
    }
}

/// Rows of `table` blended by per-row corner weights, with a scatter-add
/// backward into the table.
fn hash_interp<T: Scalar>(tape: &mut Tape<T>, table: Var, idx: Vec<[usize; 4]>, w: Vec<[T; 4]>) -> Var {
    let (rows, d) = tape.shape(table);
    let t = tape.value(table);
    let mut out = Tensor::zeros(idx.len(), d);
    for (n, (ci, cw)) in idx.iter().zip(&w).enumerate() {
        let dst = out.row_slice_mut(n);
        for c in 0..4 {
            for (o, &v) in dst.iter_mut().zip(t.row_slice(ci[c])) {
                *o += cw[c] * v;
            }
        }
    }
    tape.custom(
        out,
        &[table],
        Box::new(move |g, _| {
            let mut gt = Tensor::zeros(rows, d);
            for (n, (ci, cw)) in idx.iter().zip(&w).enumerate() {
                let gr = g.row_slice(n);
                for c in 0..4 {
                    for (o, &gv) in gt.row_slice_mut(ci[c]).iter_mut().zip(gr) {
                        *o += cw[c] * gv;
                    }
                }
            }
            vec![Some(gt)]
        }),
    )
}

/// Result of alpha-compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub rgb: [T; 3],
    pub weights: Vec<T>,
    pub t_final: T,
}

/// `α_i = 1 − exp(−σ_i·Δ_i)`, `w_i = α_i·Π_{j<i}(1 − α_j)`,
/// `Ĉ = Σ w_i·c_i + T_final·background`.
pub fn composite<T: Scalar>(sigmas: &[T], colors: &[[T; 3]], deltas: &[T], background: [T; 3]) -> Composite<T> {
    assert!(sigmas.len() == colors.len() && sigmas.len() == deltas.len());
    let mut acc = T::zero();
    let mut rgb = [T::zero(); 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    for i in 0..sigmas.len() {
        let t_i = (-acc).exp();
        acc += sigmas[i] * deltas[i];
        let w = t_i - (-acc).exp();
        for c in 0..3 {
            rgb[c] += w * colors[i][c];
        }
        weights.push(w);
    }
    let t_final = (-acc).exp();
    for c in 0..3 {
        rgb[c] += t_final * background[c];
    }
    Composite { rgb, weights, t_final }
}

/// Tape op compositing `rays` rays of `samples` consecutive rows each.
/// Returns the `rays × 3` colors and the final transmittances.
fn composite_op<T: Scalar>(
    tape: &mut Tape<T>,
    sigma: Var,
    color: Var,
    deltas: Vec<T>,
    samples: usize,
    background: [T; 3],
) -> (Var, Vec<T>) {
    let n = tape.shape(sigma).0;
    let rays = n / samples;
    let (sv, cv) = (tape.value(sigma), tape.value(color));
    let mut out = Tensor::zeros(rays, 3);
    let mut tail = Vec::with_capacity(rays);
    for r in 0..rays {
        let s = r * samples..(r + 1) * samples;
        let cols: Vec<[T; 3]> = s.clone().map(|i| [cv.get(i, 0), cv.get(i, 1), cv.get(i, 2)]).collect();
        let c = composite(&sv.data()[s.clone()], &cols, &deltas[s], background);
        out.row_slice_mut(r).copy_from_slice(&c.rgb);
        tail.push(c.t_final);
    }
    let (si, ci) = (sigma.index(), color.index());
    let var = tape.custom(
        out,
        &[sigma, color],
        Box::new(move |g, vals| {
            let (sv, cv) = (&vals[si], &vals[ci]);
            let mut gs = Tensor::zeros(n, 1);
            let mut gc = Tensor::zeros(n, 3);
            for r in 0..rays {
                let gr = [g.get(r, 0), g.get(r, 1), g.get(r, 2)];
                let base = r * samples;
                // transmittance after each sample
                let mut after = Vec::with_capacity(samples);
                let mut acc = T::zero();
                let mut before = T::one();
                let mut w = Vec::with_capacity(samples);
                for i in 0..samples {
                    acc += sv.get(base + i, 0) * deltas[base + i];
                    let t = (-acc).exp();
                    w.push(before - t);
                    after.push(t);
                    before = t;
                }
                let t_final = before;
                let bg: T = (0..3).map(|c| gr[c] * background[c]).sum();
                // suffix = Σ_{i>k} w_i·(g·c_i)
                let mut suffix = T::zero();
                for k in (0..samples).rev() {
                    let row = base + k;
                    let gdotc: T = (0..3).map(|c| gr[c] * cv.get(row, c)).sum();
                    for c in 0..3 {
                        gc.set(row, c, w[k] * gr[c]);
                    }
                    gs.set(row, 0, deltas[row] * (after[k] * gdotc - suffix - t_final * bg));
                    suffix += w[k] * gdotc;
                }
            }
            vec![Some(gs), Some(gc)]
        }),
    );
    (var, tail)
}

/// Ray in the head frame with its sampling interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl Ray {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Invalid(format!("a ray needs at least 2 samples, got {}", self.samples)));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(Error::Invalid(format!("ray interval [{}, {}] is empty or non-finite", self.near, self.far)));
        }
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 || !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!("ray direction norm {norm} is not 1")));
        }
        Ok(())
    }

    /// Ray clipped to the unit cube, if it hits it.
    pub fn through_cube(origin: Vec3, direction: Vec3, samples: usize) -> Option<Self> {
        intersect_unit_cube(origin, direction).map(|(near, far)| Self { origin, direction, near, far, samples })
    }

    /// Stratified depths and bin widths; bin midpoints without an RNG.
    pub fn sample<R: Rng>(&self, rng: Option<&mut R>) -> (Vec<f64>, Vec<f64>) {
        let bin = (self.far - self.near) / self.samples as f64;
        let mut ts = Vec::with_capacity(self.samples);
        match rng {
            Some(r) => {
                for i in 0..self.samples {
                    ts.push(self.near + (i as f64 + r.random::<f64>()) * bin);
                }
            }
            None => ts.extend((0..self.samples).map(|i| self.near + (i as f64 + 0.5) * bin)),
        }
        (ts, vec![bin; self.samples])
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One point query of the field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub position: Vec3,
    pub direction: Vec3,
}

impl FieldSample {
    pub fn validate(&self) -> Result<()> {
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("view direction norm {norm} is not 1")));
        }
        if !self.position.iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("position {:?} outside the unit cube", self.position)));
        }
        Ok(())
    }
}

/// Per-frame conditioning input.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCondition {
    pub landmarks: Vec<f32>,
    pub blendshapes: Vec<f32>,
}

impl FrameCondition {
    pub fn validate(&self, blendshape_dim: usize) -> Result<()> {
        if self.landmarks.len() != LANDMARK_DIM {
            return Err(Error::ShapeMismatch {
                what: "condition landmarks".into(),
                expected: LANDMARK_DIM.to_string(),
                found: self.landmarks.len().to_string(),
            });
        }
        if self.blendshapes.len() != blendshape_dim {
            return Err(Error::ShapeMismatch {
                what: "condition blendshapes".into(),
                expected: blendshape_dim.to_string(),
                found: self.blendshapes.len().to_string(),
            });
        }
        if !self.landmarks.iter().chain(&self.blendshapes).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("condition landmarks or blendshapes".into()));
        }
        Ok(())
    }
}

/// Frames with their cameras and conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct NerfClip {
    pub frames: Vec<RgbImage>,
    pub poses: Vec<FramePose>,
    pub conditions: Vec<FrameCondition>,
}

impl NerfClip {
    pub fn from_clip(clip: &Clip) -> Result<Self> {
        clip.validate()?;
        Ok(Self {
            frames: clip.frames.clone(),
            poses: clip.poses.clone(),
            conditions: (0..clip.len())
                .map(|t| FrameCondition {
                    landmarks: clip.landmarks.row_slice(t).to_vec(),
                    blendshapes: clip.blendshapes.row_slice(t).to_vec(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn landmark_matrix(&self) -> Tensor<f32> {
        Tensor::from_fn(self.len(), LANDMARK_DIM, |t, j| self.conditions[t].landmarks[j])
    }

    fn validate(&self, blendshape_dim: usize) -> Result<()> {
        if self.is_empty() || self.poses.len() != self.len() || self.conditions.len() != self.len() {
            return Err(Error::Invalid(format!(
                "nerf clip needs matching non-empty frames ({}), poses ({}) and conditions ({})",
                self.len(),
                self.poses.len(),
                self.conditions.len()
            )));
        }
        for (f, p) in self.frames.iter().zip(&self.poses) {
            p.pose.validate()?;
            if (f.width, f.height) != (p.intrinsics.width, p.intrinsics.height) {
                return Err(Error::ShapeMismatch {
                    what: "frame size".into(),
                    expected: format!("{}x{}", p.intrinsics.width, p.intrinsics.height),
                    found: format!("{}x{}", f.width, f.height),
                });
            }
        }
        for c in &self.conditions {
            c.validate(blendshape_dim)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NerfConfig {
    pub grid: HashGridConfig,
    pub width: usize,
    pub geo_features: usize,
    pub view_frequencies: usize,
    pub attention_channels: usize,
    pub blendshape_dim: usize,
    pub samples: usize,
    pub background: [f32; 3],
    /// When false the landmark input is zeroed (ablation).
    pub landmark_conditioning: bool,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            width: 64,
            geo_features: 15,
            view_frequencies: 4,
            attention_channels: 16,
            blendshape_dim: 8,
            samples: 32,
            background: [0.05, 0.05, 0.08],
            landmark_conditioning: true,
        }
    }
}

impl NerfConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.width == 0 || self.geo_features == 0 || self.attention_channels == 0 {
            return Err(Error::Config("nerf: widths must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config(format!("nerf: samples per ray must be at least 2, got {}", self.samples)));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("nerf: background {:?} outside [0, 1]", self.background)));
        }
        Ok(())
    }

    pub fn view_width(&self) -> usize {
        3 * (1 + 2 * self.view_frequencies)
    }
}

/// Softmax attention over the 68 landmark points from a stack of three 1D
/// convolutions along the point axis.
#[derive(Clone, Debug)]
pub struct LandmarkAttention {
    convs: [Conv1d; 3],
}

impl LandmarkAttention {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            convs: [
                Conv1d::new(format!("{prefix}.conv1"), 3, channels, 3, 1),
                Conv1d::new(format!("{prefix}.conv2"), channels, channels, 3, 1),
                Conv1d::new(format!("{prefix}.conv3"), channels, 1, 3, 1),
            ],
        }
    }

    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        for c in &self.convs {
            c.register(params, init)?;
        }
        Ok(())
    }

    /// `points` is `68 × 3`. Returns the flattened `1 × 204` feature
    /// `68·w_p·x_p` and the `1 × 68` weights.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, points: Var) -> Result<(Var, Var)> {
        let h = self.convs[0].forward(tape, params, points)?;
        let h = tape.relu(h);
        let h = self.convs[1].forward(tape, params, h)?;
        let h = tape.relu(h);
        let logits = self.convs[2].forward(tape, params, h)?;
        let row = tape.transpose(logits);
        let weights = tape.softmax_rows(row);
        let scaled = tape.scale(weights, T::from_usize(NUM_POINTS).unwrap());
        let col = tape.transpose(scaled);
        let weighted = tape.mul_col(points, col);
        Ok((tape.reshape(weighted, 1, LANDMARK_DIM), weights))
    }
}

/// Sinusoidal encoding `d ⊕ sin(2^k·π·d) ⊕ cos(2^k·π·d)`.
pub fn encode_direction(d: Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = d.to_vec();
    for k in 0..frequencies {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(d.iter().map(|v| (f * v).sin()));
        out.extend(d.iter().map(|v| (f * v).cos()));
    }
    out
}

/// A batch of rays expanded into samples.
struct SampleBatch {
    positions: Vec<Vec3>,
    views: Vec<f64>,
    frames: Vec<usize>,
    deltas: Vec<f64>,
    rays: usize,
}

pub struct TriPlaneNerf {
    pub config: NerfConfig,
    pub grid: TriPlaneHashGrid,
    pub attention: LandmarkAttention,
    d1: Linear,
    d2: Linear,
    d3: Linear,
    c1: Linear,
    c2: Linear,
    c3: Linear,
}

impl TriPlaneNerf {
    pub fn new(config: NerfConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let enc = 3 * config.grid.plane_width();
        Ok(Self {
            grid: TriPlaneHashGrid::new("nerf.grid", config.grid.clone())?,
            attention: LandmarkAttention::new("nerf.attn", config.attention_channels),
            d1: Linear::new("nerf.density1", enc, w),
            d2: Linear::new("nerf.density2", w, w),
            d3: Linear::new("nerf.density3", w, 1 + config.geo_features),
            c1: Linear::new("nerf.color1", config.geo_features + config.view_width(), w),
            c2: Linear::new("nerf.color2", w, w),
            c3: Linear::new("nerf.color3", w, 3),
            config,
        })
    }

    pub fn condition_width(&self) -> usize {
        LANDMARK_DIM + self.config.blendshape_dim
    }

    pub fn init_params(&self, seed: u64) -> Result<Params<f32>> {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        self.grid.register(&mut p, &mut init)?;
        self.attention.register(&mut p, &mut init)?;
        self.d1.register(&mut p, &mut init)?;
        p.insert(COND, init.linear(self.condition_width(), self.config.width), true)?;
        self.d2.register(&mut p, &mut init)?;
        self.d3.register(&mut p, &mut init)?;
        self.c1.register(&mut p, &mut init)?;
        self.c2.register(&mut p, &mut init)?;
        self.c3.register(&mut p, &mut init)?;
        p.insert(LANDMARK_MEAN, Tensor::zeros(1, LANDMARK_DIM), false)?;
        p.insert(LANDMARK_SCALE, Tensor::filled(1, LANDMARK_DIM, 1.0), false)?;
        Ok(p)
    }

    /// Stores per-coordinate landmark mean and spread (floored at `1e-3`)
    /// used to standardize the landmark input.
    pub fn set_landmark_stats(&self, params: &mut Params<f32>, landmarks: &Tensor<f32>) -> Result<()> {
        let n = landmarks.rows().max(1) as f64;
        let mut mean = Tensor::zeros(1, LANDMARK_DIM);
        let mut scale = Tensor::zeros(1, LANDMARK_DIM);
        for j in 0..LANDMARK_DIM {
            let m = (0..landmarks.rows()).map(|t| landmarks.get(t, j) as f64).sum::<f64>() / n;
            let v = (0..landmarks.rows()).map(|t| (landmarks.get(t, j) as f64 - m).powi(2)).sum::<f64>() / n;
            mean.set(0, j, m as f32);
            scale.set(0, j, v.sqrt().max(1e-3) as f32);
        }
        *params.get_mut(LANDMARK_MEAN)? = mean;
        *params.get_mut(LANDMARK_SCALE)? = scale;
        Ok(())
    }

    fn standardized<T: Scalar>(&self, params: &Params<T>, cond: &FrameCondition) -> Result<Tensor<T>> {
        cond.validate(self.config.blendshape_dim)?;
        if !self.config.landmark_conditioning {
            return Ok(Tensor::zeros(NUM_POINTS, 3));
        }
        let mean = params.get(LANDMARK_MEAN)?;
        let scale = params.get(LANDMARK_SCALE)?;
        Ok(Tensor::from_fn(NUM_POINTS, 3, |p, c| {
            let j = p * 3 + c;
            T::from_f64_lossy((cond.landmarks[j] as f64 - mean.data()[j].as_f64()) / scale.data()[j].as_f64())
        }))
    }

    /// Attention weights over the 68 points for one condition.
    pub fn attention_weights(&self, params: &Params<f32>, cond: &FrameCondition) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let pts = tape.constant(self.standardized(params, cond)?);
        let (_, w) = self.attention.forward(&mut tape, params, pts)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// Projected conditions, one `1 × width` row per frame.
    fn condition_rows<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, conds: &[FrameCondition]) -> Result<Var> {
        let mut rows = Vec::with_capacity(conds.len());
        for c in conds {
            let pts = tape.constant(self.standardized(params, c)?);
            let (feat, _) = self.attention.forward(tape, params, pts)?;
            let b = tape.constant(Tensor::row(c.blendshapes.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()));
            rows.push(tape.concat_cols(&[feat, b]));
        }
        let x = tape.concat_rows(&rows);
        let w = tape.param(params, COND)?;
        Ok(tape.matmul(x, w))
    }

    /// Density (`N × 1`) and color (`N × 3`) for every sample of a batch.
    fn field<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, batch: &SampleBatch, cond_rows: Var) -> Result<(Var, Var)> {
        let enc = self.grid.encode_batch(tape, params, &batch.positions)?;
        let h = self.d1.forward(tape, params, enc)?;
        let c = tape.gather_rows(cond_rows, &batch.frames);
        let h = tape.add(h, c);
        let h = tape.relu(h);
        let h = self.d2.forward(tape, params, h)?;
        let h = tape.relu(h);
        let out = self.d3.forward(tape, params, h)?;
        let raw = tape.slice_cols(out, 0, 1);
        let sigma = tape.softplus(raw);
        let geo = tape.slice_cols(out, 1, 1 + self.config.geo_features);
        let vw = self.config.view_width();
        let views = tape.constant(Tensor::new(
            batch.positions.len(),
            vw,
            batch.views.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        ));
        let x = tape.concat_cols(&[geo, views]);
        let h = self.c1.forward(tape, params, x)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, params, h)?;
        let h = tape.relu(h);
        let raw_c = self.c3.forward(tape, params, h)?;
        let color = tape.sigmoid(raw_c);
        ensure_finite(tape, sigma, "nerf density")?;
        ensure_finite(tape, color, "nerf color")?;
        Ok((sigma, color))
    }

    fn batch_for<R: Rng>(&self, rays: &[(usize, Ray)], mut rng: Option<&mut R>) -> Result<SampleBatch> {
        let s = rays.first().map(|r| r.1.samples).unwrap_or(self.config.samples);
        let mut b = SampleBatch { positions: Vec::new(), views: Vec::new(), frames: Vec::new(), deltas: Vec::new(), rays: rays.len() };
        for (f, ray) in rays {
            ray.validate()?;
            if ray.samples != s {
                return Err(Error::Invalid("all rays of a batch need the same sample count".into()));
            }
            let (ts, ds) = ray.sample(rng.as_deref_mut());
            let view = encode_direction(ray.direction, self.config.view_frequencies);
            for t in ts {
                let p = ray.at(t);
                // rounding at the cube faces
                b.positions.push(p.map(|v| if v.abs() <= 1.0 + 1e-9 { v.clamp(-1.0, 1.0) } else { v }));
                b.views.extend_from_slice(&view);
                b.frames.push(*f);
            }
            b.deltas.extend(ds);
        }
        Ok(b)
    }

    fn background<T: Scalar>(&self) -> [T; 3] {
        self.config.background.map(|v| T::from_f64_lossy(v as f64))
    }

    /// Differentiable render of `(condition index, ray)` pairs: `R × 3`
    /// colors and the final transmittances.
    pub fn render_rays<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        rays: &[(usize, Ray)],
        conds: &[FrameCondition],
        rng: Option<&mut R>,
    ) -> Result<(Var, Vec<T>)> {
        if rays.is_empty() {
            return Err(Error::Invalid("render_rays needs at least one ray".into()));
        }
        if let Some((f, _)) = rays.iter().find(|(f, _)| *f >= conds.len()) {
            return Err(Error::Invalid(format!("ray refers to condition {f} of {}", conds.len())));
        }
        let batch = self.batch_for(rays, rng)?;
        let cond_rows = self.condition_rows(tape, params, conds)?;
        let (sigma, color) = self.field(tape, params, &batch, cond_rows)?;
        let samples = batch.positions.len() / batch.rays;
        let deltas = batch.deltas.iter().map(|&d| T::from_f64_lossy(d)).collect();
        Ok(composite_op(tape, sigma, color, deltas, samples, self.background()))
    }

    /// Color and density at one point.
    pub fn field_eval<T: Scalar>(&self, params: &Params<T>, sample: &FieldSample, cond: &FrameCondition) -> Result<([T; 3], T)> {
        sample.validate()?;
        let mut tape = Tape::new();
        let batch = SampleBatch {
            positions: vec![sample.position],
            views: encode_direction(sample.direction, self.config.view_frequencies),
            frames: vec![0],
            deltas: vec![0.0],
            rays: 1,
        };
        let cond_rows = self.condition_rows(&mut tape, params, std::slice::from_ref(cond))?;
        let (s, c) = self.field(&mut tape, params, &batch, cond_rows)?;
        let cv = tape.value(c);
        Ok(([cv.get(0, 0), cv.get(0, 1), cv.get(0, 2)], tape.value(s).item()))
    }

    /// Color and final transmittance of one ray; bin midpoints when `rng`
    /// is `None`.
    pub fn render_ray<R: Rng>(
        &self,
        params: &Params<f32>,
        ray: &Ray,
        cond: &FrameCondition,
        rng: Option<&mut R>,
    ) -> Result<([f32; 3], f32)> {
        let mut tape = Tape::new();
        let (rgb, tail) = self.render_rays(&mut tape, params, &[(0, ray.clone())], std::slice::from_ref(cond), rng)?;
        let v = tape.value(rgb);
        Ok(([v.get(0, 0), v.get(0, 1), v.get(0, 2)], tail[0]))
    }

    /// One ray per pixel, stratified with an RNG seeded by `seed`; pixels
    /// whose ray misses the unit cube show the background.
    pub fn render_frame(&self, params: &Params<f32>, pose: &FramePose, cond: &FrameCondition, seed: u64) -> Result<RenderedImage> {
        pose.pose.validate()?;
        let k = &pose.intrinsics;
        let mut image = RgbImage::filled(k.width, k.height, self.config.background);
        let mut opacity = vec![0.0f32; (k.width * k.height) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pending: Vec<(u32, u32, Ray)> = Vec::new();
        for py in 0..k.height {
            for px in 0..k.width {
                let (o, d) = pose.pixel_ray(px, py);
                if let Some(r) = Ray::through_cube(o, d, self.config.samples) {
                    pending.push((px, py, r));
                }
            }
        }
        for chunk in pending.chunks(1024) {
            let rays: Vec<(usize, Ray)> = chunk.iter().map(|(_, _, r)| (0, r.clone())).collect();
            let mut tape = Tape::new();
            let (rgb, tail) = self.render_rays(&mut tape, params, &rays, std::slice::from_ref(cond), Some(&mut rng))?;
            let v = tape.value(rgb);
            for (i, (px, py, _)) in chunk.iter().enumerate() {
                image.set_pixel(*px, *py, [v.get(i, 0), v.get(i, 1), v.get(i, 2)].map(|c| c.clamp(0.0, 1.0)));
                opacity[(py * k.width + px) as usize] = 1.0 - tail[i];
            }
        }
        Ok(RenderedImage { image, opacity })
    }

    pub fn check_params(&self, params: &Params<f32>) -> Result<()> {
        let reference = self.init_params(0)?;
        for (name, e) in reference.iter() {
            let got = params.entry(name).ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {name}")))?;
            if got.value.shape() != e.value.shape() {
                return Err(Error::Incompatible(format!("{name}: shape {:?} vs {:?}", got.value.shape(), e.value.shape())));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Incompatible(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, store: &ParameterStore) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(CHECKPOINT_KIND, store, serde_json::to_value(&self.config)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParameterStore)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ckpt.kind)));
        }
        let config: NerfConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Incompatible(format!("nerf checkpoint config: {e}")))?;
        let model = Self::new(config)?;
        let store = ckpt.to_store()?;
        model.check_params(&store.params)?;
        Ok((model, store))
    }
}

/// Rendered frame plus per-pixel accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: RgbImage,
    pub opacity: Vec<f32>,
}

/// Perceptual distance between two square patches stored as `(P·P) × 3`.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    fn distance(&self, tape: &mut Tape<f32>, pred: Var, gt: Var, size: usize) -> Result<Var>;
}

/// Fixed, randomly initialized three-layer 3×3 convolutional feature
/// extractor; the distance is the mean squared feature difference averaged
/// over layers.
#[derive(Clone, Debug)]
pub struct RandomConvPerceptual {
    layers: Vec<Tensor<f32>>,
}

impl RandomConvPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let chans = [3usize, 8, 8, 8];
        let layers = chans
            .windows(2)
            .map(|w| {
                let fan_in = 9 * w[0];
                init.uniform(fan_in, w[1], (6.0 / fan_in as f64).sqrt() as f32)
            })
            .collect();
        Self { layers }
    }

    fn features(&self, tape: &mut Tape<f32>, x: Var, size: usize) -> Vec<Var> {
        let mut out = Vec::new();
        let mut h = x;
        for w in &self.layers {
            let cols = tape.im2col_2d(h, size, size, 3);
            let wv = tape.constant(w.clone());
            let z = tape.matmul(cols, wv);
            h = tape.relu(z);
            out.push(h);
        }
        out
    }
}

impl PerceptualBackend for RandomConvPerceptual {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn distance(&self, tape: &mut Tape<f32>, pred: Var, gt: Var, size: usize) -> Result<Var> {
        for v in [pred, gt] {
            if tape.shape(v) != (size * size, 3) {
                return Err(Error::ShapeMismatch {
                    what: "perceptual patch".into(),
                    expected: format!("{} x 3", size * size),
                    found: format!("{:?}", tape.shape(v)),
                });
            }
        }
        let fp = self.features(tape, pred, size);
        let fg = self.features(tape, gt, size);
        let mut terms = Vec::new();
        for (a, b) in fp.into_iter().zip(fg) {
            let d = tape.sub(a, b);
            let sq = tape.square(d);
            terms.push(tape.mean(sq));
        }
        let all = tape.concat_cols(&terms);
        Ok(tape.mean(all))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

/// Total loss and its additive breakdown.
pub struct NerfLoss {
    pub total: Var,
    pub terms: IndexMap<String, f64>,
}

/// Coarse: mean per-pixel squared color error. Fine: additionally
/// `λ·perceptual(P̂, P)` on the given patch pair of side `size`.
pub fn nerf_loss(
    tape: &mut Tape<f32>,
    pred: Var,
    gt: Var,
    patch: Option<(Var, Var, usize)>,
    stage: Stage,
    lambda: f64,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<NerfLoss> {
    if tape.shape(pred) != tape.shape(gt) || tape.shape(pred).1 != 3 {
        return Err(Error::ShapeMismatch {
            what: "nerf loss pixels".into(),
            expected: format!("{:?}", tape.shape(gt)),
            found: format!("{:?}", tape.shape(pred)),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("perceptual weight {lambda} must be finite and non-negative")));
    }
    let d = tape.sub(pred, gt);
    let sq = tape.square(d);
    let per_pixel = tape.sum_cols(sq);
    let mse = tape.mean(per_pixel);
    let mut terms = IndexMap::new();
    terms.insert("mse".to_string(), tape.value(mse).item() as f64);
    let total = match stage {
        Stage::Coarse => mse,
        Stage::Fine => {
            let backend = backend.ok_or_else(|| {
                Error::Config(
                    "the fine stage needs a perceptual backend; pass RandomConvPerceptual::new(seed) or another PerceptualBackend"
                        .into(),
                )
            })?;
            let (pp, pg, size) = patch.ok_or_else(|| Error::Invalid("the fine stage needs a patch pair".into()))?;
            let perc = backend.distance(tape, pp, pg, size)?;
            let weighted = tape.scale(perc, lambda as f32);
            terms.insert("perceptual".to_string(), tape.value(weighted).item() as f64);
            tape.add(mse, weighted)
        }
    };
    Ok(NerfLoss { total, terms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NerfTrainConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub patch_size: usize,
    /// First step of the patch stage; `steps` or more keeps every step in
    /// the ray stage.
    pub fine_start: usize,
    pub lambda_perceptual: f64,
    pub perceptual_seed: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Training-view PSNR is measured every `eval_every` steps and at the end.
    pub eval_every: usize,
    /// Stop once the training-view PSNR reaches this value.
    pub target_psnr: Option<f64>,
    /// Stratification seed of evaluation renders.
    pub eval_seed: u64,
}

impl Default for NerfTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            rays_per_batch: 256,
            patch_size: 32,
            fine_start: 16_000,
            lambda_perceptual: DEFAULT_LAMBDA_PERCEPTUAL,
            perceptual_seed: 0,
            seed: 0,
            adam: AdamConfig { lr: 5e-3, beta1: 0.9, beta2: 0.99, eps: 1e-15, warmup_steps: 0 },
            eval_every: 1000,
            target_psnr: None,
            eval_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NerfTrainReport {
    pub steps_run: usize,
    /// `(step, training-view PSNR)` pairs.
    pub psnr_curve: Vec<(u64, f64)>,
    pub final_psnr: f64,
}

/// Mean PSNR of renders of every training view.
pub fn training_psnr(model: &TriPlaneNerf, params: &Params<f32>, clip: &NerfClip, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..clip.len() {
        let r = model.render_frame(params, &clip.poses[t], &clip.conditions[t], seed)?;
        total += psnr(&r.image, &clip.frames[t])?;
    }
    Ok(total / clip.len() as f64)
}

/// Ray stage on random pixels, then patch stage with the perceptual term.
/// Landmark statistics are taken from the clip on the first step. On
/// divergence the store keeps the last good parameters and the error is
/// returned.
pub fn train_nerf(
    model: &TriPlaneNerf,
    store: &mut ParameterStore,
    clip: &NerfClip,
    cfg: &NerfTrainConfig,
    backend: Option<&dyn PerceptualBackend>,
    curve: &mut LossCurve,
) -> Result<NerfTrainReport> {
    clip.validate(model.config.blendshape_dim)?;
    if cfg.rays_per_batch == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("nerf rays_per_batch and eval_every must be positive".into()));
    }
    let (w, h) = (clip.frames[0].width as usize, clip.frames[0].height as usize);
    if cfg.fine_start < cfg.steps {
        if backend.is_none() {
            return Err(Error::Config(
                "the fine stage needs a perceptual backend; pass RandomConvPerceptual::new(seed) or set fine_start >= steps".into(),
            ));
        }
        if cfg.patch_size == 0 || cfg.patch_size > w.min(h) {
            return Err(Error::Config(format!("patch size {} does not fit {w}x{h} frames", cfg.patch_size)));
        }
    }
    if store.step() == 0 {
        model.set_landmark_stats(&mut store.params, &clip.landmark_matrix())?;
    }
    let mut opt = OptimizerState::new(cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = NerfTrainReport::default();
    let record = |report: &mut NerfTrainReport, step: u64, params: &Params<f32>| -> Result<f64> {
        let p = training_psnr(model, params, clip, cfg.eval_seed)?;
        report.psnr_curve.push((step, p));
        report.final_psnr = p;
        Ok(p)
    };
    record(&mut report, 0, &store.params)?;
    for it in 0..cfg.steps {
        let stage = if it >= cfg.fine_start { Stage::Fine } else { Stage::Coarse };
        let frame = rng.random_range(0..clip.len());
        let pixels: Vec<(usize, u32, u32)> = match stage {
            Stage::Coarse => (0..cfg.rays_per_batch)
                .map(|_| (rng.random_range(0..clip.len()), rng.random_range(0..w as u32), rng.random_range(0..h as u32)))
                .collect(),
            Stage::Fine => {
                let p = cfg.patch_size as u32;
                let x0 = rng.random_range(0..=w as u32 - p);
                let y0 = rng.random_range(0..=h as u32 - p);
                (0..p).flat_map(|y| (0..p).map(move |x| (frame, x0 + x, y0 + y))).collect()
            }
        };
        let mut rays = Vec::with_capacity(pixels.len());
        let mut target = Vec::with_capacity(pixels.len() * 3);
        let mut missed = Vec::with_capacity(pixels.len());
        for &(f, px, py) in &pixels {
            let (o, d) = clip.poses[f].pixel_ray(px, py);
            match Ray::through_cube(o, d, model.config.samples) {
                Some(r) => {
                    rays.push((f, r));
                    missed.push(false);
                }
                None => missed.push(true),
            }
            target.extend_from_slice(&clip.frames[f].pixel(px, py));
        }
        if rays.is_empty() {
            continue;
        }
        let step = store.step();
        let mut tape = Tape::new();
        let (rendered, _) = model
            .render_rays(&mut tape, &store.params, &rays, &clip.conditions, Some(&mut rng))
            .map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { step, detail: d },
                other => other,
            })?;
        // pixels outside the cube are background, with no gradient
        let pred = if missed.iter().any(|&m| m) {
            let bg = tape.constant(Tensor::row(model.config.background.to_vec()));
            let mut rows = Vec::with_capacity(pixels.len());
            let mut k = 0;
            for &m in &missed {
                if m {
                    rows.push(bg);
                } else {
                    rows.push(tape.slice_rows(rendered, k, k + 1));
                    k += 1;
                }
            }
            tape.concat_rows(&rows)
        } else {
            rendered
        };
        let gt = tape.constant(Tensor::new(pixels.len(), 3, target));
        let patch = (stage == Stage::Fine).then_some((pred, gt, cfg.patch_size));
        let loss = nerf_loss(&mut tape, pred, gt, patch, stage, cfg.lambda_perceptual, backend)?;
        let total = tape.value(loss.total).item() as f64;
        apply_gradients(store, &mut opt, &mut tape, loss.total)?;
        curve.push(step, total, loss.terms);
        report.steps_run = it + 1;
        let done = it + 1 == cfg.steps;
        if (it + 1) % cfg.eval_every == 0 || done {
            let p = record(&mut report, store.step(), &store.params)?;
            if cfg.target_psnr.is_some_and(|t| p >= t) {
                break;
            }
        }
    }
    Ok(report)
}

/// Mean attention weight on mouth points and on the other points.
pub fn mouth_attention(model: &TriPlaneNerf, params: &Params<f32>, conds: &[FrameCondition]) -> Result<(f64, f64)> {
    let (mut mouth, mut other) = (0.0, 0.0);
    for c in conds {
        let w = model.attention_weights(params, c)?;
        for (i, &v) in w.iter().enumerate() {
            if is_mouth_point(i) {
                mouth += v as f64 / 20.0;
            } else {
                other += v as f64 / 48.0;
            }
        }
    }
    let n = conds.len().max(1) as f64;
    Ok((mouth / n, other / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{grad_check, GradCheckConfig};

    pub(crate) fn tiny_config() -> NerfConfig {
        NerfConfig {
            grid: HashGridConfig { levels: 2, features: 2, log2_table: 4, base_resolution: 2, finest_resolution: 6 },
            width: 8,
            geo_features: 3,
            view_frequencies: 2,
            attention_channels: 4,
            blendshape_dim: 2,
            samples: 6,
            ..Default::default()
        }
    }

    fn condition(seed: u64, b: usize) -> FrameCondition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameCondition {
            landmarks: (0..LANDMARK_DIM).map(|_| rng.random_range(-0.5..0.5)).collect(),
            blendshapes: (0..b).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    fn perturbed(model: &TriPlaneNerf, seed: u64) -> Params<f32> {
        let mut p = model.init_params(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (name, e) in p.iter_mut() {
            if name.starts_with("nerf.grid") {
                let (r, c) = e.value.shape();
                e.value = Tensor::from_fn(r, c, |_, _| rng.random_range(-0.5..0.5));
            }
        }
        p
    }

    #[test]
    fn grid_defaults_reach_finest_resolution() {
        let g = HashGridConfig::default();
        assert_eq!(g.resolution(0), 16);
        assert_eq!(g.resolution(g.levels - 1), 512);
        assert!(g.is_dense(0) && !g.is_dense(g.levels - 1));
        assert_eq!(3 * g.plane_width(), 84);
    }

    #[test]
    fn bilinear_corner_and_center() {
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let p = perturbed(&model, 1);
        let g = &model.grid;
        let cfg = &g.config;
        for l in 0..cfg.levels {
            let n = cfg.resolution(l) as f64;
            let table = p.get(&g.table_name(Plane::XY, l)).unwrap();
            // vertex (1, 1) sits at 2/n − 1 on both axes
            let a = 2.0 / n - 1.0;
            let f = g.encode_plane(&p, Plane::XY, a, a).unwrap();
            let (idx, _) = cfg.corners(l, a, a);
            let d = cfg.features;
            assert_eq!(&f[l * d..(l + 1) * d], table.row_slice(idx[0]));
            // center of cell (0, 0)
            let c = 1.0 / n - 1.0;
            let f = g.encode_plane(&p, Plane::XY, c, c).unwrap();
            let (idx, w) = cfg.corners(l, c, c);
            assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-12));
            for k in 0..d {
                let want: f32 = idx.iter().map(|&i| table.get(i, k)).sum::<f32>() / 4.0;
                assert!((f[l * d + k] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tri_plane_projection_independence() {
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let p = perturbed(&model, 2);
        let a = model.grid.encode(&p, [0.1, -0.3, 0.2]).unwrap();
        let b = model.grid.encode(&p, [0.1, -0.3, -0.7]).unwrap();
        let w = model.grid.config.plane_width();
        assert_eq!(a.len(), 3 * w);
        assert_eq!(a[..w], b[..w]);
        assert_ne!(a[w..], b[w..]);
        assert_eq!(a, model.grid.encode(&p, [0.1, -0.3, 0.2]).unwrap());
    }

    #[test]
    fn levels_are_local() {
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let mut p = perturbed(&model, 3);
        let x = [0.3, 0.1, -0.4];
        let before = model.grid.encode_plane(&p, Plane::YZ, x[1], x[2]).unwrap();
        let name = model.grid.table_name(Plane::YZ, 1);
        *p.get_mut(&name).unwrap() = p.get(&name).unwrap().map(|v| v + 1.0);
        let after = model.grid.encode_plane(&p, Plane::YZ, x[1], x[2]).unwrap();
        let d = model.grid.config.features;
        assert_eq!(before[..d], after[..d]);
        assert_ne!(before[d..], after[d..]);
    }

    #[test]
    fn uniform_attention_from_zero_weights() {
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let mut p = model.init_params(0).unwrap();
        for (name, e) in p.iter_mut() {
            if name.starts_with("nerf.attn") {
                let bias = name.ends_with(".b");
                e.value = e.value.map(|_| if bias { 0.3 } else { 0.0 });
            }
        }
        let w = model.attention_weights(&p, &condition(1, 2)).unwrap();
        assert_eq!(w.len(), NUM_POINTS);
        for v in &w {
            assert!((v - 1.0 / 68.0).abs() < 1e-7);
        }
        let p = perturbed(&model, 4);
        let w = model.attention_weights(&p, &condition(2, 2)).unwrap();
        assert!((w.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn field_ranges_and_view_independent_density() {
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let p = perturbed(&model, 5);
        let cond = condition(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let d1 = crate::camera::normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0]);
            let d2 = crate::camera::normalize([rng.random_range(-1.0..1.0), 0.3, -1.0]);
            let (c1, s1) = model.field_eval(&p, &FieldSample { position: x, direction: d1 }, &cond).unwrap();
            let (_, s2) = model.field_eval(&p, &FieldSample { position: x, direction: d2 }, &cond).unwrap();
            assert!(s1 >= 0.0);
            assert!(c1.iter().all(|c| (0.0..=1.0).contains(c)));
            assert_eq!(s1, s2);
        }
        assert!(model.field_eval(&p, &FieldSample { position: [0.0; 3], direction: [1.0, 1.0, 0.0] }, &cond).is_err());
    }

    #[test]
    fn composite_identities() {
        let s = [0.0; 5];
        let c = [[0.3, 0.6, 0.9]; 5];
        let r = composite(&s, &c, &[0.1; 5], [0.2, 0.4, 0.6]);
        assert_eq!(r.t_final, 1.0);
        assert_eq!(r.rgb, [0.2, 0.4, 0.6]);
    }

    #[test]
    fn composite_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = Tensor::from_fn(10, 1, |_, _| rng.random_range(0.0..3.0));
        let color = Tensor::from_fn(10, 3, |_, _| rng.random_range(0.0..1.0));
        let deltas: Vec<f64> = (0..10).map(|_| rng.random_range(0.05..0.4)).collect();
        let wts = Tensor::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let err = crate::engine::gradcheck::check_inputs(
            &[sigma, color],
            &|tape: &mut Tape<f64>, v: &[Var]| {
                let (rgb, _) = composite_op(tape, v[0], v[1], deltas.clone(), 5, [0.2, 0.5, 0.9]);
                let w = tape.constant(wts.clone());
                let m = tape.mul(rgb, w);
                tape.sum(m)
            },
            1e-8,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ray_needs_two_samples() {
        let r = Ray { origin: [0.0, 0.0, -3.0], direction: [0.0, 0.0, 1.0], near: 2.0, far: 4.0, samples: 1 };
        assert!(r.validate().is_err());
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let p = model.init_params(0).unwrap();
        assert!(model.render_ray::<ChaCha8Rng>(&p, &r, &condition(1, 2), None).is_err());
    }

    #[test]
    fn grad_check_render_rays() {
        let model = TriPlaneNerf::new(tiny_config()).unwrap();
        let p = perturbed(&model, 6).cast::<f64>();
        let conds = vec![condition(4, 2), condition(5, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rays: Vec<(usize, Ray)> = (0..4)
            .map(|i| {
                let d = crate::camera::normalize([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0]);
                (i % 2, Ray::through_cube([0.0, 0.0, -3.0], d, 6).unwrap())
            })
            .collect();
        let weights = Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let report = grad_check(
            |tape: &mut Tape<f64>, params: &Params<f64>| {
                let (rgb, _) = model.render_rays::<f64, ChaCha8Rng>(tape, params, &rays, &conds, None)?;
                let w = tape.constant(weights.clone());
                let m = tape.mul(rgb, w);
                Ok(tape.sum(m))
            },
            &p,
            // small step keeps ReLU kinks out of the stencil
            &GradCheckConfig { min_coords: 300, step: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn fine_stage_requires_backend() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(4, 3));
        let b = tape.constant(Tensor::zeros(4, 3));
        let err = nerf_loss(&mut tape, a, b, Some((a, b, 2)), Stage::Fine, 0.1, None).err().unwrap();
        assert!(err.to_string().contains("perceptual backend"));
        let backend = RandomConvPerceptual::new(0);
        let l = nerf_loss(&mut tape, a, b, Some((a, b, 2)), Stage::Fine, 0.1, Some(&backend)).unwrap();
        assert_eq!(tape.value(l.total).item(), 0.0);
    }

    #[test]
    fn loss_breakdown_sums_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(16, 3, |_, _| rng.random_range(0.0..1.0)));
        let b = tape.constant(Tensor::from_fn(16, 3, |_, _| rng.random_range(0.0..1.0)));
        let backend = RandomConvPerceptual::new(1);
        let l = nerf_loss(&mut tape, a, b, Some((a, b, 4)), Stage::Fine, DEFAULT_LAMBDA_PERCEPTUAL, Some(&backend)).unwrap();
        let sum: f64 = l.terms.values().sum();
        assert!((sum - tape.value(l.total).item() as f64).abs() < 1e-6);
        assert!(l.terms["perceptual"] > 0.0);
    }
}
