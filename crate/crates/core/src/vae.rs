//! Audio-to-motion VAE.
//!
//! Dilated convolution stacks encode ground-truth landmarks plus the audio
//! conditioning `h ⊕ p` into a per-frame Gaussian posterior and decode a
//! latent sequence plus conditioning back into landmarks. The latent prior is
//! a Glow-style flow. A window-level sync scorer (cosine similarity of audio
//! and mouth-landmark embeddings) is trained jointly and also scores the
//! generated landmarks.
//!
//! The encoder sees and the decoder predicts landmarks relative to a fixed
//! template (`vae.template`, the mean training landmark frame).

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{concat_encodings, AudioEncoder, AudioEncoderConfig, AudioFeatureSequence};
use crate::data_io::Checkpoint;
use crate::engine::layers::ensure_finite;
use crate::engine::{
    apply_gradients, AdamConfig, Conv1d, Init, Linear, LossCurve, Mode, OptimizerState, ParameterStore, Params, Scalar,
    Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::face::{LANDMARK_DIM, MOUTH_POINTS};
use crate::synth::Clip;

pub const TEMPLATE: &str = "vae.template";
pub const CHECKPOINT_KIND: &str = "vae";
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const MOUTH_COLS: std::ops::Range<usize> = (MOUTH_POINTS.start * 3)..(MOUTH_POINTS.end * 3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub flow_steps: usize,
    pub coupling_hidden: usize,
    pub sync_window: usize,
    pub sync_hidden: usize,
    pub sync_embed: usize,
    /// Multiplier on template-relative mouth landmarks fed to the scorer.
    pub sync_landmark_scale: f64,
    pub audio: AudioEncoderConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            channels: 128,
            kernel: 3,
            dilations: vec![1, 2, 4, 8],
            flow_steps: 4,
            coupling_hidden: 64,
            sync_window: 5,
            sync_hidden: 64,
            sync_embed: 32,
            sync_landmark_scale: 10.0,
            audio: AudioEncoderConfig::default(),
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("vae: {m}")));
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.channels == 0 || self.coupling_hidden == 0 || self.sync_hidden == 0 || self.sync_embed == 0 {
            return bad("layer widths must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be non-empty and positive");
        }
        if self.sync_window == 0 {
            return bad("sync_window must be positive");
        }
        if self.audio.channels == 0 || self.audio.kernel % 2 == 0 {
            return bad("audio encoder needs positive channels and an odd kernel");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub kl_weight: f64,
    pub sync_weight: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, seed: 0, adam: AdamConfig::default(), kl_weight: 1.0, sync_weight: 0.1 }
    }
}

fn bind<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>, name: &str, frozen: bool) -> Result<Var> {
    if frozen {
        tape.frozen(params, name)
    } else {
        tape.param(params, name)
    }
}

fn linear_bound<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>, l: &Linear, x: Var, frozen: bool) -> Result<Var> {
    let w = bind(tape, params, &l.weight_name(), frozen)?;
    let b = bind(tape, params, &l.bias_name(), frozen)?;
    Ok(tape.linear(x, w, b))
}

/// `rows × 1` column holding the scalar `s` in every row.
fn broadcast_col<T: Scalar>(tape: &mut Tape<T>, s: Var, rows: usize) -> Var {
    let ones = tape.constant(Tensor::filled(rows, 1, T::one()));
    tape.matmul(ones, s)
}

// ---- flow prior ----

/// Glow-style flow over `dim`-vectors: each step is actnorm, an LU-factored
/// invertible mixing matrix and an affine coupling whose conditioning half
/// alternates between steps.
#[derive(Clone, Debug)]
pub struct FlowPrior {
    pub prefix: String,
    pub dim: usize,
    pub steps: usize,
    pub hidden: usize,
}

impl FlowPrior {
    pub fn new(prefix: &str, dim: usize, steps: usize, hidden: usize) -> Self {
        Self { prefix: prefix.to_string(), dim, steps, hidden }
    }

    fn name(&self, k: usize, what: &str) -> String {
        format!("{}.{k}.{what}", self.prefix)
    }

    /// `(conditioning columns, transformed columns)` at step `k`.
    fn halves(&self, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let h = self.dim / 2;
        if k % 2 == 0 {
            (0..h, h..self.dim)
        } else {
            (h..self.dim, 0..h)
        }
    }

    fn coupling_layers(&self, k: usize) -> (Linear, Linear) {
        let (a, b) = self.halves(k);
        (
            Linear::new(self.name(k, "coupling.l1"), a.len(), self.hidden),
            Linear::new(self.name(k, "coupling.l2"), self.hidden, 2 * b.len()),
        )
    }

    /// Registers an identity-initialized flow.
    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        let z = self.dim;
        for k in 0..self.steps {
            params.insert(self.name(k, "actnorm.log_scale"), Tensor::zeros(1, z), true)?;
            params.insert(self.name(k, "actnorm.bias"), Tensor::zeros(1, z), true)?;
            params.insert(self.name(k, "mix.lower"), Tensor::zeros(z, z), true)?;
            params.insert(self.name(k, "mix.upper"), Tensor::zeros(z, z), true)?;
            params.insert(self.name(k, "mix.log_s"), Tensor::zeros(1, z), true)?;
            params.insert(self.name(k, "mix.sign"), Tensor::filled(1, z, 1.0), false)?;
            params.insert(self.name(k, "mix.perm"), Tensor::identity(z), false)?;
            let (l1, l2) = self.coupling_layers(k);
            l1.register(params, init)?;
            l2.register_zero(params)?;
        }
        Ok(())
    }

    /// Mixing matrix `W = P·(L + I)·(U + diag(sign·exp(log_s)))`.
    fn mixing<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, k: usize) -> Result<Var> {
        let z = self.dim;
        let lower_mask = tape.constant(Tensor::from_fn(z, z, |i, j| if i > j { T::one() } else { T::zero() }));
        let upper_mask = tape.constant(Tensor::from_fn(z, z, |i, j| if i < j { T::one() } else { T::zero() }));
        let eye = tape.constant(Tensor::identity(z));
        let lower = tape.param(params, &self.name(k, "mix.lower"))?;
        let upper = tape.param(params, &self.name(k, "mix.upper"))?;
        let log_s = tape.param(params, &self.name(k, "mix.log_s"))?;
        let sign = tape.param(params, &self.name(k, "mix.sign"))?;
        let perm = tape.param(params, &self.name(k, "mix.perm"))?;
        let l = tape.mul(lower, lower_mask);
        let l = tape.add(l, eye);
        let s = tape.exp(log_s);
        let s = tape.mul(s, sign);
        let d = tape.diag(s);
        let u = tape.mul(upper, upper_mask);
        let u = tape.add(u, d);
        let lu = tape.matmul(l, u);
        Ok(tape.matmul(perm, lu))
    }

    fn coupling_net<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, k: usize, a: Var) -> Result<(Var, Var)> {
        let (l1, l2) = self.coupling_layers(k);
        let nb = self.halves(k).1.len();
        let h = l1.forward(tape, params, a)?;
        let h = tape.gelu(h);
        let out = l2.forward(tape, params, h)?;
        let s_raw = tape.slice_cols(out, 0, nb);
        let log_s = tape.tanh(s_raw);
        let shift = tape.slice_cols(out, nb, 2 * nb);
        Ok((log_s, shift))
    }

    /// Maps `z` (rows are vectors) to `u`; also returns `log|det ∂u/∂z|` per row.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, z: Var) -> Result<(Var, Var)> {
        let (rows, cols) = tape.shape(z);
        if cols != self.dim {
            return Err(Error::ShapeMismatch { what: "flow input".into(), expected: self.dim.to_string(), found: cols.to_string() });
        }
        ensure_finite(tape, z, "flow input")?;
        let mut x = z;
        let mut log_det = tape.constant(Tensor::zeros(rows, 1));
        for k in 0..self.steps {
            let ls = tape.param(params, &self.name(k, "actnorm.log_scale"))?;
            let bias = tape.param(params, &self.name(k, "actnorm.bias"))?;
            let scale = tape.exp(ls);
            let y = tape.mul_row(x, scale);
            x = tape.add_row(y, bias);
            let s = tape.sum(ls);
            let s = broadcast_col(tape, s, rows);
            log_det = tape.add(log_det, s);

            let w = self.mixing(tape, params, k)?;
            x = tape.matmul(x, w);
            let mls = tape.param(params, &self.name(k, "mix.log_s"))?;
            let s = tape.sum(mls);
            let s = broadcast_col(tape, s, rows);
            log_det = tape.add(log_det, s);

            let (ra, rb) = self.halves(k);
            let a = tape.slice_cols(x, ra.start, ra.end);
            let b = tape.slice_cols(x, rb.start, rb.end);
            let (log_s, shift) = self.coupling_net(tape, params, k, a)?;
            let e = tape.exp(log_s);
            let b = tape.mul(b, e);
            let b = tape.add(b, shift);
            x = if ra.start == 0 { tape.concat_cols(&[a, b]) } else { tape.concat_cols(&[b, a]) };
            let s = tape.sum_cols(log_s);
            log_det = tape.add(log_det, s);
            if !tape.value(x).all_finite() || !tape.value(log_det).all_finite() {
                return Err(Error::NonFinite(format!("flow forward step {k}")));
            }
        }
        Ok((x, log_det))
    }

    /// Exact inverse of [`FlowPrior::forward`], evaluated in double precision.
    pub fn inverse<T: Scalar>(&self, params: &Params<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        if u.cols() != self.dim {
            return Err(Error::ShapeMismatch { what: "flow input".into(), expected: self.dim.to_string(), found: u.cols().to_string() });
        }
        if !u.all_finite() {
            return Err(Error::NonFinite("flow inverse input".into()));
        }
        let params = params.subset(&self.prefix).cast::<f64>();
        let params = &params;
        let mut x = u.cast::<f64>();
        for k in (0..self.steps).rev() {
            let mut tape = Tape::new();
            let (ra, rb) = self.halves(k);
            let a = x.slice_cols(ra.start, ra.end);
            let av = tape.constant(a.clone());
            let (log_s, shift) = self.coupling_net(&mut tape, params, k, av)?;
            let (log_s, shift) = (tape.value(log_s).clone(), tape.value(shift).clone());
            let b = x.slice_cols(rb.start, rb.end);
            let b = Tensor::from_fn(b.rows(), b.cols(), |i, j| (b.get(i, j) - shift.get(i, j)) * (-log_s.get(i, j)).exp());
            x = if ra.start == 0 { Tensor::concat_cols(&[&a, &b]) } else { Tensor::concat_cols(&[&b, &a]) };

            let w = self.mixing(&mut tape, params, k)?;
            let w_inv = invert_matrix(tape.value(w))?;
            x = x.matmul(&w_inv);

            let ls = params.get(&self.name(k, "actnorm.log_scale"))?;
            let bias = params.get(&self.name(k, "actnorm.bias"))?;
            x = Tensor::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - bias.get(0, j)) * (-ls.get(0, j)).exp());
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("flow inverse step {k}")));
            }
        }
        Ok(x.cast())
    }

    /// `log p(z) = log N(u; 0, I) + log_det`, one value per row.
    pub fn log_prob<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, z: Var) -> Result<Var> {
        let (u, log_det) = self.forward(tape, params, z)?;
        let base = log_std_normal_rows(tape, u);
        Ok(tape.add(base, log_det))
    }
}

/// `Σ_j log N(x_ij; 0, 1)` per row.
fn log_std_normal_rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let cols = tape.shape(x).1;
    let sq = tape.square(x);
    let s = tape.sum_cols(sq);
    let s = tape.scale(s, T::from_f64_lossy(-0.5));
    tape.add_scalar(s, T::from_f64_lossy(-HALF_LN_2PI * cols as f64))
}

/// Gauss-Jordan inverse with partial pivoting, computed in double precision.
pub fn invert_matrix<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Invalid("matrix inverse needs a square matrix".into()));
    }
    let mut a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        if a[p * n + c].abs() < 1e-300 {
            return Err(Error::Invalid("singular mixing matrix".into()));
        }
        if p != c {
            for j in 0..n {
                a.swap(p * n + j, c * n + j);
                inv.swap(p * n + j, c * n + j);
            }
        }
        let d = a[c * n + c];
        for j in 0..n {
            a[c * n + j] /= d;
            inv[c * n + j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r * n + c];
                if f != 0.0 {
                    for j in 0..n {
                        a[r * n + j] -= f * a[c * n + j];
                        inv[r * n + j] -= f * inv[c * n + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(n, n, inv.into_iter().map(T::from_f64_lossy).collect()))
}

// ---- sync scorer ----

/// Audio-window and mouth-landmark-window embedders (two-layer MLPs) scored
/// by cosine similarity.
#[derive(Clone, Debug)]
pub struct SyncScorer {
    pub prefix: String,
    pub window: usize,
    pub audio_dim: usize,
    pub landmark_scale: f64,
    audio_l1: Linear,
    audio_l2: Linear,
    lm_l1: Linear,
    lm_l2: Linear,
}

impl SyncScorer {
    pub fn new(prefix: &str, window: usize, audio_dim: usize, hidden: usize, embed: usize, landmark_scale: f64) -> Self {
        let lm_in = window * MOUTH_COLS.len();
        Self {
            prefix: prefix.to_string(),
            window,
            audio_dim,
            landmark_scale,
            audio_l1: Linear::new(format!("{prefix}.audio.l1"), window * audio_dim, hidden),
            audio_l2: Linear::new(format!("{prefix}.audio.l2"), hidden, embed),
            lm_l1: Linear::new(format!("{prefix}.landmark.l1"), lm_in, hidden),
            lm_l2: Linear::new(format!("{prefix}.landmark.l2"), hidden, embed),
        }
    }

    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        for l in [&self.audio_l1, &self.audio_l2, &self.lm_l1, &self.lm_l2] {
            l.register(params, init)?;
        }
        Ok(())
    }

    fn mlp<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, l1: &Linear, l2: &Linear, x: Var, frozen: bool) -> Result<Var> {
        let h = linear_bound(tape, params, l1, x, frozen)?;
        let h = tape.gelu(h);
        linear_bound(tape, params, l2, h, frozen)
    }

    /// Embeds flattened audio windows (`N × W·D_a`).
    pub fn embed_audio<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, windows: Var, frozen: bool) -> Result<Var> {
        self.mlp(tape, params, &self.audio_l1, &self.audio_l2, windows, frozen)
    }

    /// Embeds flattened mouth windows (`N × W·60`), already template-relative.
    pub fn embed_landmarks<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, windows: Var, frozen: bool) -> Result<Var> {
        self.mlp(tape, params, &self.lm_l1, &self.lm_l2, windows, frozen)
    }

    /// Scores `(audio start, landmark start)` window pairs; `audio` is
    /// `T × D_a` raw content features and `landmarks` is `T × 204`.
    pub fn score_pairs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        audio: Var,
        landmarks: Var,
        pairs: &[(usize, usize)],
        frozen: bool,
    ) -> Result<Var> {
        let (ta, da) = tape.shape(audio);
        let (tl, dl) = tape.shape(landmarks);
        if da != self.audio_dim || dl != LANDMARK_DIM {
            return Err(Error::ShapeMismatch {
                what: "sync scorer inputs".into(),
                expected: format!("{} audio and {LANDMARK_DIM} landmark columns", self.audio_dim),
                found: format!("{da} and {dl}"),
            });
        }
        if pairs.iter().any(|&(a, l)| a + self.window > ta || l + self.window > tl) {
            return Err(Error::Invalid(format!("sync window of {} frames exceeds the sequence", self.window)));
        }
        let template = tape.param(params, TEMPLATE)?;
        let rel = tape.sub_row(landmarks, template);
        let mouth = tape.slice_cols(rel, MOUTH_COLS.start, MOUTH_COLS.end);
        let mouth = tape.scale(mouth, T::from_f64_lossy(self.landmark_scale));
        let a_idx: Vec<usize> = pairs.iter().flat_map(|&(a, _)| a..a + self.window).collect();
        let l_idx: Vec<usize> = pairs.iter().flat_map(|&(_, l)| l..l + self.window).collect();
        let aw = tape.gather_rows(audio, &a_idx);
        let aw = tape.reshape(aw, pairs.len(), self.window * da);
        let lw = tape.gather_rows(mouth, &l_idx);
        let lw = tape.reshape(lw, pairs.len(), self.window * MOUTH_COLS.len());
        let ea = self.embed_audio(tape, params, aw, frozen)?;
        let el = self.embed_landmarks(tape, params, lw, frozen)?;
        cosine_rows(tape, ea, el)
    }
}

/// Row-wise cosine similarity (`N × 1`); zero-norm rows are rejected.
pub fn cosine_rows<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let ab = tape.mul(a, b);
    let dot = tape.sum_cols(ab);
    let a2 = tape.square(a);
    let a2 = tape.sum_cols(a2);
    let b2 = tape.square(b);
    let b2 = tape.sum_cols(b2);
    let tiny = T::from_f64_lossy(1e-24);
    if tape.value(a2).data().iter().chain(tape.value(b2).data()).any(|&v| v <= tiny) {
        return Err(Error::Invalid("degenerate sync embedding with zero norm".into()));
    }
    let n2 = tape.mul(a2, b2);
    let n = tape.sqrt(n2);
    let inv = tape.recip(n);
    let s = tape.mul(dot, inv);
    Ok(tape.clamp(s, -T::one(), T::one()))
}

fn check_labels(y: &[f64]) -> Result<()> {
    match y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Invalid(format!("sync label {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub const SYNC_PROB_CLAMP: f64 = 1e-7;

/// Cross-entropy of a single score, `p = (s + 1)/2` clamped away from 0 and 1.
pub fn sync_loss_value(s: f64, y: f64) -> Result<f64> {
    check_labels(&[y])?;
    let p = ((s + 1.0) / 2.0).clamp(SYNC_PROB_CLAMP, 1.0 - SYNC_PROB_CLAMP);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// Mean cross-entropy over an `N × 1` score column.
pub fn sync_loss<T: Scalar>(tape: &mut Tape<T>, s: Var, y: &[f64]) -> Result<Var> {
    check_labels(y)?;
    let (n, c) = tape.shape(s);
    if c != 1 || n != y.len() || n == 0 {
        return Err(Error::ShapeMismatch { what: "sync labels".into(), expected: n.to_string(), found: y.len().to_string() });
    }
    let p = tape.add_scalar(s, T::one());
    let p = tape.scale(p, T::from_f64_lossy(0.5));
    let p = tape.clamp(p, T::from_f64_lossy(SYNC_PROB_CLAMP), T::from_f64_lossy(1.0 - SYNC_PROB_CLAMP));
    let lp = tape.ln(p);
    let q = tape.neg(p);
    let q = tape.add_scalar(q, T::one());
    let lq = tape.ln(q);
    let yv = tape.constant(Tensor::new(n, 1, y.iter().map(|&v| T::from_f64_lossy(v)).collect()));
    let ny = tape.constant(Tensor::new(n, 1, y.iter().map(|&v| T::from_f64_lossy(1.0 - v)).collect()));
    let a = tape.mul(yv, lp);
    let b = tape.mul(ny, lq);
    let ll = tape.add(a, b);
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// Aligned pairs `(i, i)` for every window start.
pub fn aligned_pairs(frames: usize, window: usize) -> Vec<(usize, usize)> {
    if frames < window {
        return Vec::new();
    }
    (0..=frames - window).map(|i| (i, i)).collect()
}

/// Misaligned pairs: audio window start at least `window` frames (circularly)
/// from the landmark window start. Deterministic half-range offset when `rng`
/// is `None`.
pub fn shifted_pairs<R: Rng>(frames: usize, window: usize, rng: Option<&mut R>) -> Vec<(usize, usize)> {
    if frames < window {
        return Vec::new();
    }
    let n = frames - window + 1;
    if n < 2 * window {
        return Vec::new();
    }
    match rng {
        Some(rng) => (0..n).map(|i| ((i + rng.random_range(window..=n - window)) % n, i)).collect(),
        None => (0..n).map(|i| ((i + n / 2) % n, i)).collect(),
    }
}

// ---- model ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeShape {
    pub config: VaeConfig,
    pub content_dim: usize,
    pub pitch_dim: usize,
}

#[derive(Clone, Debug)]
pub struct A2mVae {
    pub shape: VaeShape,
    pub audio: AudioEncoder,
    enc_convs: Vec<Conv1d>,
    enc_mu: Linear,
    enc_log_sigma: Linear,
    dec_convs: Vec<Conv1d>,
    dec_out: Linear,
    pub flow: FlowPrior,
    pub sync: SyncScorer,
}

/// Per-frame posterior on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub log_sigma: Var,
}

fn conv_stack(prefix: &str, inputs: usize, cfg: &VaeConfig) -> Vec<Conv1d> {
    cfg.dilations
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let cin = if i == 0 { inputs } else { cfg.channels };
            Conv1d::new(format!("{prefix}.conv{i}"), cin, cfg.channels, cfg.kernel, d)
        })
        .collect()
}

impl A2mVae {
    pub fn new(shape: VaeShape) -> Result<Self> {
        let cfg = &shape.config;
        cfg.validate()?;
        let cond = 2 * cfg.audio.channels;
        Ok(Self {
            audio: AudioEncoder::new("vae.audio", shape.content_dim, shape.pitch_dim, cfg.audio),
            enc_convs: conv_stack("vae.enc", LANDMARK_DIM + cond, cfg),
            enc_mu: Linear::new("vae.enc.mu", cfg.channels, cfg.latent_dim),
            enc_log_sigma: Linear::new("vae.enc.log_sigma", cfg.channels, cfg.latent_dim),
            dec_convs: conv_stack("vae.dec", cfg.latent_dim + cond, cfg),
            dec_out: Linear::new("vae.dec.out", cfg.channels, LANDMARK_DIM),
            flow: FlowPrior::new("vae.flow", cfg.latent_dim, cfg.flow_steps, cfg.coupling_hidden),
            sync: SyncScorer::new(
                "vae.sync",
                cfg.sync_window,
                shape.content_dim,
                cfg.sync_hidden,
                cfg.sync_embed,
                cfg.sync_landmark_scale,
            ),
            shape,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.shape.config
    }

    /// Fresh parameters; the template starts at zero.
    pub fn init_params(&self, seed: u64) -> Result<Params<f32>> {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        self.audio.register(&mut params, &mut init)?;
        for c in self.enc_convs.iter().chain(&self.dec_convs) {
            c.register(&mut params, &mut init)?;
        }
        self.enc_mu.register(&mut params, &mut init)?;
        self.enc_log_sigma.register_zero(&mut params)?;
        self.dec_out.register(&mut params, &mut init)?;
        self.flow.register(&mut params, &mut init)?;
        self.sync.register(&mut params, &mut init)?;
        params.insert(TEMPLATE, Tensor::zeros(1, LANDMARK_DIM), false)?;
        Ok(params)
    }

    fn stack<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, convs: &[Conv1d], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in convs.iter().enumerate() {
            let y = c.forward(tape, params, h)?;
            let y = tape.gelu(y);
            h = if i == 0 { y } else { tape.add(h, y) };
        }
        Ok(h)
    }

    /// Audio conditioning `h ⊕ p` (`T × 2C`).
    pub fn condition<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        audio: &AudioFeatureSequence,
        mode: Mode,
    ) -> Result<Var> {
        let enc = self.audio.encode(tape, params, audio, mode)?;
        concat_encodings(tape, enc)
    }

    /// Posterior `(μ, log σ)` per frame from landmarks and conditioning.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, landmarks: Var, cond: Var) -> Result<Posterior> {
        let (tl, dl) = tape.shape(landmarks);
        let (tc, _) = tape.shape(cond);
        if dl != LANDMARK_DIM {
            return Err(Error::ShapeMismatch { what: "encoder landmarks".into(), expected: LANDMARK_DIM.to_string(), found: dl.to_string() });
        }
        if tl != tc {
            return Err(Error::ShapeMismatch { what: "encoder sequence lengths".into(), expected: tc.to_string(), found: tl.to_string() });
        }
        let template = tape.param(params, TEMPLATE)?;
        let rel = tape.sub_row(landmarks, template);
        let x = tape.concat_cols(&[rel, cond]);
        let h = self.stack(tape, params, &self.enc_convs, x)?;
        let mu = self.enc_mu.forward(tape, params, h)?;
        let log_sigma = self.enc_log_sigma.forward(tape, params, h)?;
        Ok(Posterior { mu, log_sigma })
    }

    /// Landmarks (`T × 204`) from a latent sequence and conditioning.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, z: Var, cond: Var) -> Result<Var> {
        let (tz, dz) = tape.shape(z);
        let (tc, _) = tape.shape(cond);
        if dz != self.config().latent_dim {
            return Err(Error::ShapeMismatch {
                what: "decoder latent".into(),
                expected: self.config().latent_dim.to_string(),
                found: dz.to_string(),
            });
        }
        if tz != tc {
            return Err(Error::ShapeMismatch { what: "decoder sequence lengths".into(), expected: tc.to_string(), found: tz.to_string() });
        }
        let x = tape.concat_cols(&[z, cond]);
        let h = self.stack(tape, params, &self.dec_convs, x)?;
        let out = self.dec_out.forward(tape, params, h)?;
        let template = tape.param(params, TEMPLATE)?;
        Ok(tape.add_row(out, template))
    }

    /// Verifies that `params` holds exactly this model's tensors with the
    /// expected shapes.
    pub fn check_params(&self, params: &Params<f32>) -> Result<()> {
        let reference = self.init_params(0)?;
        for (name, e) in reference.iter() {
            let got = params
                .entry(name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {name}")))?;
            if got.value.shape() != e.value.shape() {
                return Err(Error::Incompatible(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    got.value.shape(),
                    e.value.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Incompatible(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, store: &ParameterStore) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(CHECKPOINT_KIND, store, serde_json::to_value(&self.shape)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParameterStore)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ckpt.kind)));
        }
        let shape: VaeShape = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Incompatible(format!("vae checkpoint config: {e}")))?;
        let model = Self::new(shape)?;
        let store = ckpt.to_store()?;
        model.check_params(&store.params)?;
        Ok((model, store))
    }
}

// ---- loss ----

/// Loss on a tape plus the per-term values.
#[derive(Clone, Debug)]
pub struct VaeLoss {
    pub total: Var,
    pub terms: IndexMap<String, f64>,
}

/// Sync-term inputs: scores for generated landmarks and their labels, plus
/// optional scorer-training scores on ground-truth windows.
pub struct SyncTerms<'a> {
    pub generated: Option<(Var, &'a [f64])>,
    pub scorer: Option<(Var, &'a [f64])>,
}

/// Per-frame mean of `‖l − l̂‖²`.
pub fn reconstruction<T: Scalar>(tape: &mut Tape<T>, l: Var, l_hat: Var) -> Var {
    let d = tape.sub(l, l_hat);
    let sq = tape.square(d);
    let per_frame = tape.sum_cols(sq);
    tape.mean(per_frame)
}

/// Single-sample Monte-Carlo KL between the posterior and the flow prior,
/// averaged over rows: `log q(ẑ) − log p(ẑ)` with `ẑ = μ + σ·ε`.
pub fn monte_carlo_kl<T: Scalar>(
    tape: &mut Tape<T>,
    flow: &FlowPrior,
    params: &Params<T>,
    post: Posterior,
    eps: Var,
) -> Result<(Var, Var)> {
    let sigma = tape.exp(post.log_sigma);
    let noise = tape.mul(sigma, eps);
    let z = tape.add(post.mu, noise);
    let log_q_base = log_std_normal_rows(tape, eps);
    let ls = tape.sum_cols(post.log_sigma);
    let log_q = tape.sub(log_q_base, ls);
    let log_p = flow.log_prob(tape, params, z)?;
    let kl = tape.sub(log_q, log_p);
    Ok((tape.mean(kl), z))
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn closed_form_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu.iter().zip(sigma).map(|(&m, &s)| m * m + s * s - 1.0 - 2.0 * s.ln()).sum::<f64>()
}

/// Combines already computed pieces into the weighted objective.
pub fn vae_loss<T: Scalar>(
    tape: &mut Tape<T>,
    recon: Var,
    kl: Var,
    sync: SyncTerms<'_>,
    kl_weight: f64,
    sync_weight: f64,
) -> Result<VaeLoss> {
    let mut terms = IndexMap::new();
    let mut parts = Vec::new();
    let mut add_term = |tape: &mut Tape<T>, name: &str, v: Var, w: f64, terms: &mut IndexMap<String, f64>| -> Result<()> {
        let val = tape.value(v).item().as_f64();
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("vae loss term {name}")));
        }
        let wv = tape.scale(v, T::from_f64_lossy(w));
        terms.insert(name.to_string(), w * val);
        parts.push(wv);
        Ok(())
    };
    add_term(tape, "recon", recon, 1.0, &mut terms)?;
    add_term(tape, "kl", kl, kl_weight, &mut terms)?;
    if let Some((s, y)) = sync.generated {
        let l = sync_loss(tape, s, y)?;
        add_term(tape, "sync", l, sync_weight, &mut terms)?;
    }
    if let Some((s, y)) = sync.scorer {
        let l = sync_loss(tape, s, y)?;
        add_term(tape, "sync_scorer", l, sync_weight, &mut terms)?;
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p);
    }
    Ok(VaeLoss { total, terms })
}

/// One stochastic evaluation of the training objective on a clip.
pub fn training_loss<T: Scalar, R: Rng>(
    model: &A2mVae,
    tape: &mut Tape<T>,
    params: &Params<T>,
    audio: &AudioFeatureSequence,
    landmarks: &Tensor<f32>,
    cfg: &VaeTrainConfig,
    rng: &mut R,
    mode: Mode,
) -> Result<VaeLoss> {
    let t = audio.len();
    if landmarks.rows() != t {
        return Err(Error::ShapeMismatch { what: "landmarks vs audio length".into(), expected: t.to_string(), found: landmarks.rows().to_string() });
    }
    let cond = model.condition(tape, params, audio, mode)?;
    let l = tape.constant(landmarks.cast());
    let post = model.encode(tape, params, l, cond)?;
    let zdim = model.config().latent_dim;
    let eps = Tensor::from_fn(t, zdim, |_, _| T::from_f64_lossy(StandardNormal.sample(rng)));
    let eps = tape.constant(eps);
    let (kl, z) = monte_carlo_kl(tape, &model.flow, params, post, eps)?;
    let l_hat = model.decode(tape, params, z, cond)?;
    let recon = reconstruction(tape, l, l_hat);

    let w = model.config().sync_window;
    let mut pairs = aligned_pairs(t, w);
    let positives = pairs.len();
    pairs.extend(shifted_pairs(t, w, Some(rng)));
    let labels: Vec<f64> = (0..pairs.len()).map(|i| if i < positives { 1.0 } else { 0.0 }).collect();
    let (gen, scorer) = if pairs.is_empty() || cfg.sync_weight == 0.0 {
        (None, None)
    } else {
        let content = tape.constant(audio.content.cast());
        let s_gen = model.sync.score_pairs(tape, params, content, l_hat, &pairs, true)?;
        let s_gt = model.sync.score_pairs(tape, params, content, l, &pairs, false)?;
        (Some((s_gen, labels.as_slice())), Some((s_gt, labels.as_slice())))
    };
    let mut loss = vae_loss(tape, recon, kl, SyncTerms { generated: gen, scorer }, cfg.kl_weight, cfg.sync_weight)?;

    // deterministic reconstruction through the posterior mean, reported only
    let l_mean = model.decode(tape, params, post.mu, cond)?;
    let d = tape.sub(l, l_mean);
    let sq = tape.square(d);
    let mse = tape.value(sq).data().iter().map(|v| v.as_f64()).sum::<f64>() / (t * LANDMARK_DIM) as f64;
    loss.terms.insert("recon_mse".into(), mse);
    Ok(loss)
}

/// Mean landmark frame over all clips.
pub fn mean_landmarks(clips: &[Clip]) -> Tensor<f32> {
    let mut acc = vec![0.0f64; LANDMARK_DIM];
    let mut n = 0usize;
    for c in clips {
        for r in 0..c.landmarks.rows() {
            for (a, &v) in acc.iter_mut().zip(c.landmarks.row_slice(r)) {
                *a += v as f64;
            }
            n += 1;
        }
    }
    Tensor::row(acc.into_iter().map(|v| (v / n.max(1) as f64) as f32).collect())
}

/// Trains in place. A fresh store (step 0) gets its template from the data.
/// On divergence the store keeps the last good parameters and the error is
/// returned.
pub fn train_vae(
    model: &A2mVae,
    store: &mut ParameterStore,
    clips: &[Clip],
    cfg: &VaeTrainConfig,
    curve: &mut LossCurve,
) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::Invalid("train_vae needs at least one clip".into()));
    }
    for c in clips {
        c.validate()?;
        if c.audio.content.cols() != model.shape.content_dim || c.audio.pitch.cols() != model.shape.pitch_dim {
            return Err(Error::Incompatible("clip audio dimensions differ from the model".into()));
        }
    }
    if store.step() == 0 {
        *store.params.get_mut(TEMPLATE)? = mean_landmarks(clips);
    }
    let mut opt = OptimizerState::new(cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.steps {
        let clip = &clips[i % clips.len()];
        let mut tape = Tape::new();
        let loss = training_loss(model, &mut tape, &store.params, &clip.audio, &clip.landmarks, cfg, &mut rng, Mode::Train)
            .map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { step: store.step(), detail: d },
                other => other,
            })?;
        let total = tape.value(loss.total).item() as f64;
        let step = store.step();
        apply_gradients(store, &mut opt, &mut tape, loss.total)?;
        curve.push(step, total, loss.terms);
    }
    Ok(())
}

/// Mean aligned score minus mean shifted score on ground-truth windows.
pub fn sync_gap(model: &A2mVae, params: &Params<f32>, clip: &Clip) -> Result<f64> {
    let w = model.config().sync_window;
    let pos = aligned_pairs(clip.len(), w);
    let neg = shifted_pairs::<ChaCha8Rng>(clip.len(), w, None);
    if neg.is_empty() {
        return Err(Error::Invalid(format!("clip of {} frames is too short for shifted sync windows", clip.len())));
    }
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(clip.audio.content.clone());
    let l = tape.constant(clip.landmarks.clone());
    let sp = model.sync.score_pairs(&mut tape, params, a, l, &pos, true)?;
    let sn = model.sync.score_pairs(&mut tape, params, a, l, &neg, true)?;
    let mean = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
    Ok(mean(tape.value(sp)) - mean(tape.value(sn)))
}

/// Neutral landmarks for an audio sequence: `u ~ N(0, I)` from `seed`,
/// `z = flow⁻¹(u)`, then the decoder with eval-mode audio encoders.
pub fn infer_motion(model: &A2mVae, params: &Params<f32>, audio: &AudioFeatureSequence, seed: u64) -> Result<Tensor<f32>> {
    audio.validate()?;
    let t = audio.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Tensor::from_fn(t, model.config().latent_dim, |_, _| StandardNormal.sample(&mut rng));
    let z = model.flow.inverse(params, &u)?;
    let mut tape = Tape::new();
    let cond = model.condition(&mut tape, params, audio, Mode::Eval)?;
    let zv = tape.constant(z);
    let out = model.decode(&mut tape, params, zv, cond)?;
    ensure_finite(&tape, out, "decoded landmarks")?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::engine::{grad_check, GradCheckConfig};
    use crate::face::EmotionLabel;
    use crate::synth::{SynthConfig, Synthesizer};

    pub(crate) fn small_config() -> VaeConfig {
        VaeConfig {
            latent_dim: 4,
            channels: 8,
            dilations: vec![1, 2],
            flow_steps: 2,
            coupling_hidden: 6,
            sync_window: 3,
            sync_hidden: 6,
            sync_embed: 4,
            audio: AudioEncoderConfig { channels: 4, kernel: 3 },
            ..Default::default()
        }
    }

    pub(crate) fn small_model() -> (A2mVae, Params<f32>) {
        let m = A2mVae::new(VaeShape { config: small_config(), content_dim: 6, pitch_dim: 2 }).unwrap();
        let mut p = m.init_params(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        perturb_flow(&m.flow, &mut p, &mut rng, 0.3);
        *p.get_mut(TEMPLATE).unwrap() = Tensor::from_fn(1, LANDMARK_DIM, |_, j| (j as f32 * 0.37).sin());
        (m, p)
    }

    /// Random non-identity flow parameters.
    pub(crate) fn perturb_flow(flow: &FlowPrior, p: &mut Params<f32>, rng: &mut ChaCha8Rng, scale: f32) {
        let names: Vec<String> = p.names().filter(|n| n.starts_with(&flow.prefix)).cloned().collect();
        for n in names {
            if n.ends_with("mix.sign") || n.ends_with("mix.perm") {
                continue;
            }
            for v in p.get_mut(&n).unwrap().data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn audio(rng: &mut ChaCha8Rng, t: usize) -> AudioFeatureSequence {
        AudioFeatureSequence::new(rand_tensor(rng, t, 6), rand_tensor(rng, t, 2)).unwrap()
    }

    #[test]
    fn identity_flow_is_identity() {
        let flow = FlowPrior::new("f", 6, 3, 5);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        let z = rand_tensor(&mut rng, 7, 6);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (u, ld) = flow.forward(&mut tape, &p, zv).unwrap();
        assert_eq!(tape.value(u), &z);
        assert!(tape.value(ld).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_round_trip() {
        let flow = FlowPrior::new("f", 16, 4, 32);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        perturb_flow(&flow, &mut p, &mut rng, 0.2);
        let z = Tensor::from_fn(200, 16, |_, _| StandardNormal.sample(&mut rng));
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (u, _) = flow.forward(&mut tape, &p, zv).unwrap();
        let back = flow.inverse(&p, tape.value(u)).unwrap();
        let err = back.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "round trip error {err}");
    }

    #[test]
    fn flow_log_det_matches_dense_jacobian() {
        let flow = FlowPrior::new("f", 4, 3, 8);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        perturb_flow(&flow, &mut p, &mut rng, 0.4);
        let p = p.cast::<f64>();
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |x: &[f64]| -> (Vec<f64>, f64) {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::row(x.to_vec()));
            let (u, ld) = flow.forward(&mut tape, &p, v).unwrap();
            (tape.value(u).data().to_vec(), tape.value(ld).item())
        };
        let (_, ld) = run(&z);
        let h = 1e-6;
        let mut jac = Tensor::<f64>::zeros(4, 4);
        for j in 0..4 {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let (up, _) = run(&zp);
            let (um, _) = run(&zm);
            for i in 0..4 {
                jac.set(i, j, (up[i] - um[i]) / (2.0 * h));
            }
        }
        let det = lu_det(&jac);
        assert!((det.abs().ln() - ld).abs() < 1e-4, "{} vs {ld}", det.abs().ln());
    }

    pub(crate) fn lu_det(m: &Tensor<f64>) -> f64 {
        let n = m.rows();
        let mut a = m.data().to_vec();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
            if p != c {
                for j in 0..n {
                    a.swap(p * n + j, c * n + j);
                }
                det = -det;
            }
            det *= a[c * n + c];
            for r in c + 1..n {
                let f = a[r * n + c] / a[c * n + c];
                for j in c..n {
                    a[r * n + j] -= f * a[c * n + j];
                }
            }
        }
        det
    }

    #[test]
    fn flow_gradients() {
        let flow = FlowPrior::new("f", 4, 2, 5);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        perturb_flow(&flow, &mut p, &mut rng, 0.3);
        let z = rand_tensor(&mut rng, 3, 4).cast::<f64>();
        let report = grad_check(
            |tape, p| {
                let zv = tape.constant(z.clone());
                let lp = flow.log_prob(tape, p, zv)?;
                Ok(tape.sum(lp))
            },
            &p.cast::<f64>(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn non_finite_flow_input_is_rejected() {
        let flow = FlowPrior::new("f", 4, 1, 3);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        *p.get_mut("f.0.actnorm.log_scale").unwrap() = Tensor::filled(1, 4, 200.0);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::filled(1, 4, 1.0f32));
        let err = flow.forward(&mut tape, &p, z).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref s) if s.contains("step 0")), "{err}");
    }

    #[test]
    fn encoder_emits_positive_scale_and_is_shift_equivariant() {
        let (m, p) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 30;
        let l = rand_tensor(&mut rng, t + 2, LANDMARK_DIM);
        let c = rand_tensor(&mut rng, t + 2, 8);
        let run = |l: Tensor<f32>, c: Tensor<f32>| {
            let mut tape = Tape::new();
            let lv = tape.constant(l);
            let cv = tape.constant(c);
            let post = m.encode(&mut tape, &p, lv, cv).unwrap();
            let s = tape.exp(post.log_sigma);
            (tape.value(post.mu).clone(), tape.value(s).clone())
        };
        let (mu_a, s_a) = run(l.slice_rows(0, t), c.slice_rows(0, t));
        let (mu_b, s_b) = run(l.slice_rows(2, t + 2), c.slice_rows(2, t + 2));
        assert!(s_a.data().iter().all(|&v| v > 0.0));
        // receptive radius is 1 + 2 = 3 frames
        for r in 5..t - 5 {
            for j in 0..4 {
                assert!((mu_a.get(r + 2, j) - mu_b.get(r, j)).abs() < 1e-5);
                assert!((s_a.get(r + 2, j) - s_b.get(r, j)).abs() < 1e-5);
            }
        }
        let (mu1, _) = run(l.slice_rows(0, 1), c.slice_rows(0, 1));
        assert_eq!(mu1.shape(), (1, 4));
    }

    #[test]
    fn encoder_rejects_length_mismatch() {
        let (m, p) = small_model();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(5, LANDMARK_DIM));
        let c = tape.constant(Tensor::zeros(4, 8));
        assert!(matches!(m.encode(&mut tape, &p, l, c), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(m.decode(&mut tape, &p, c, l), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn decoder_depends_on_latent_and_is_deterministic() {
        let (m, p) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = rand_tensor(&mut rng, 5, 8);
        let z1 = rand_tensor(&mut rng, 5, 4);
        let z2 = rand_tensor(&mut rng, 5, 4);
        let dec = |z: &Tensor<f32>| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let cv = tape.constant(c.clone());
            let o = m.decode(&mut tape, &p, zv, cv).unwrap();
            tape.value(o).clone()
        };
        let a = dec(&z1);
        assert_eq!(a.shape(), (5, LANDMARK_DIM));
        assert_eq!(a, dec(&z1));
        assert_ne!(a, dec(&z2));
    }

    #[test]
    fn cosine_properties() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(3, 2, vec![1.0, 2.0, 1.0, 0.0, 3.0, -1.0]));
        let b = tape.constant(Tensor::new(3, 2, vec![1.0, 2.0, 0.0, 5.0, 30.0, -10.0]));
        let s = cosine_rows(&mut tape, a, b).unwrap();
        let s = tape.value(s);
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(s.get(1, 0), 0.0);
        assert!((s.get(2, 0) - 1.0).abs() < 1e-12);
        let z = tape.constant(Tensor::new(1, 2, vec![0.0, 0.0]));
        let o = tape.constant(Tensor::new(1, 2, vec![1.0, 0.0]));
        assert!(cosine_rows(&mut tape, z, o).is_err());
    }

    #[test]
    fn sync_loss_values() {
        assert!((sync_loss_value(0.0, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(sync_loss_value(1.0, 1.0).unwrap() < 1e-6);
        let big = sync_loss_value(1.0, 0.0).unwrap();
        assert!(big.is_finite() && big > 15.0);
        assert!(sync_loss_value(0.3, 0.5).is_err());
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(2, 1, vec![0.0, 1.0]));
        let l = sync_loss(&mut tape, s, &[1.0, 0.0]).unwrap();
        let want = (std::f64::consts::LN_2 + big) / 2.0;
        assert!((tape.value(l).item() - want).abs() < 1e-9);
        assert!(sync_loss(&mut tape, s, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matched_distributions_give_zero_terms() {
        let flow = FlowPrior::new("f", 4, 2, 5);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        let p = p.cast::<f64>();
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_fn(3, 5, |i, j| (i + j) as f64));
        let recon = reconstruction(&mut tape, l, l);
        let mu = tape.constant(Tensor::zeros(6, 4));
        let ls = tape.constant(Tensor::zeros(6, 4));
        let eps = tape.constant(Tensor::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.3));
        let (kl, _) = monte_carlo_kl(&mut tape, &flow, &p, Posterior { mu, log_sigma: ls }, eps).unwrap();
        let loss = vae_loss(&mut tape, recon, kl, SyncTerms { generated: None, scorer: None }, 1.0, 1.0).unwrap();
        assert_eq!(loss.terms["recon"], 0.0);
        assert!(loss.terms["kl"].abs() < 1e-12);
        assert_eq!(closed_form_kl(&[0.0; 4], &[1.0; 4]), 0.0);
    }

    #[test]
    fn term_breakdown_sums_to_total() {
        let (m, p) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = audio(&mut rng, 14);
        let l = rand_tensor(&mut rng, 14, LANDMARK_DIM);
        let mut tape = Tape::new();
        let loss = training_loss(&m, &mut tape, &p.cast::<f64>(), &a, &l, &VaeTrainConfig::default(), &mut rng, Mode::Train).unwrap();
        let sum: f64 = loss.terms.iter().filter(|(k, _)| *k != "recon_mse").map(|(_, v)| v).sum();
        assert!((sum - tape.value(loss.total).item()).abs() < 1e-6);
        for k in ["recon", "kl", "sync", "sync_scorer"] {
            assert!(loss.terms.contains_key(k), "{k}");
        }
    }

    #[test]
    fn monte_carlo_kl_matches_closed_form() {
        let flow = FlowPrior::new("f", 4, 1, 2);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        flow.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        let p = p.cast::<f64>();
        let n = 100_000;
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut tape = Tape::<f64>::new();
        let muv = tape.constant(Tensor::from_fn(n, 4, |_, j| mu[j]));
        let lsv = tape.constant(Tensor::from_fn(n, 4, |_, j| sigma[j].ln()));
        let eps = tape.constant(Tensor::from_fn(n, 4, |_, _| StandardNormal.sample(&mut rng)));
        let (kl, _) = monte_carlo_kl(&mut tape, &flow, &p, Posterior { mu: muv, log_sigma: lsv }, eps).unwrap();
        let exact = closed_form_kl(&mu, &sigma);
        let est = tape.value(kl).item();
        assert!((est - exact).abs() / exact < 0.02, "{est} vs {exact}");
    }

    fn check_module(loss: impl Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>, p: &Params<f32>, prefix: &str) {
        // only the named module's parameters are perturbed
        let mut p64 = p.cast::<f64>();
        for (name, e) in p64.iter_mut() {
            if !name.starts_with(prefix) {
                e.trainable = false;
            }
        }
        let report = grad_check(loss, &p64, &GradCheckConfig::default()).unwrap();
        assert!(report.coords_checked >= 100);
        assert!(report.passes(1e-4), "{prefix}: {report:?}");
    }

    #[test]
    fn encoder_decoder_and_scorer_gradients() {
        let (m, p) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = audio(&mut rng, 9);
        let l = rand_tensor(&mut rng, 9, LANDMARK_DIM).cast::<f64>();
        let eps = rand_tensor(&mut rng, 9, 4).cast::<f64>();
        let loss = |tape: &mut Tape<f64>, p: &Params<f64>| -> Result<Var> {
            let cond = m.condition(tape, p, &a, Mode::Eval)?;
            let lv = tape.constant(l.clone());
            let post = m.encode(tape, p, lv, cond)?;
            let e = tape.constant(eps.clone());
            let (kl, z) = monte_carlo_kl(tape, &m.flow, p, post, e)?;
            let out = m.decode(tape, p, z, cond)?;
            let r = reconstruction(tape, lv, out);
            let content = tape.constant(a.content.cast());
            let pairs = [(0, 0), (3, 1), (6, 6), (2, 5)];
            let s = m.sync.score_pairs(tape, p, content, out, &pairs, false)?;
            let sl = sync_loss(tape, s, &[1.0, 0.0, 1.0, 0.0])?;
            let t = tape.add(r, kl);
            Ok(tape.add(t, sl))
        };
        for prefix in ["vae.enc", "vae.dec", "vae.sync", "vae.flow"] {
            check_module(loss, &p, prefix);
        }
    }

    #[test]
    fn window_pairs() {
        assert_eq!(aligned_pairs(6, 5), vec![(0, 0), (1, 1)]);
        assert!(aligned_pairs(3, 5).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let neg = shifted_pairs(40, 5, Some(&mut rng));
        let n = 36;
        for (a, l) in neg {
            let d = (a as i64 - l as i64).rem_euclid(n);
            assert!(d >= 5 && d <= n - 5);
        }
    }

    fn toy_clip(frames: usize, seed: u64) -> Clip {
        let s = Synthesizer::new(SynthConfig { audio_dim: 6, pitch_dim: 2, ..Default::default() }).unwrap();
        s.generate_clip(seed, EmotionLabel::Happy, frames, 32).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (m, p) = small_model();
        let clip = toy_clip(16, 1);
        let mut store = ParameterStore::new(p);
        *store.params.get_mut(TEMPLATE).unwrap() = mean_landmarks(std::slice::from_ref(&clip));
        store = ParameterStore::with_step(store.params, 1);
        let before = store.params.clone();
        let cfg = VaeTrainConfig { steps: 5, adam: AdamConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
        let mut curve = LossCurve::default();
        train_vae(&m, &mut store, &[clip], &cfg, &mut curve).unwrap();
        for (n, e) in before.iter() {
            if e.trainable {
                assert_eq!(store.params.get(n).unwrap(), &e.value, "{n}");
            }
        }
        let first = curve.records[0].terms["recon_mse"];
        assert!(curve.records.iter().all(|r| r.terms["recon_mse"] == first));
    }

    #[test]
    fn inference_is_deterministic_and_length_preserving() {
        let (m, p) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = audio(&mut rng, 11);
        let x = infer_motion(&m, &p, &a, 5).unwrap();
        assert_eq!(x.shape(), (11, LANDMARK_DIM));
        assert_eq!(x, infer_motion(&m, &p, &a, 5).unwrap());
        assert_ne!(x, infer_motion(&m, &p, &a, 6).unwrap());
    }

    #[test]
    fn checkpoint_mismatch_is_rejected() {
        let (m, p) = small_model();
        let store = ParameterStore::new(p);
        let mut ck = m.to_checkpoint(&store).unwrap();
        assert!(A2mVae::from_checkpoint(&ck).is_ok());
        ck.tensors.retain(|(n, _, _)| n != "vae.dec.out.b");
        assert!(matches!(A2mVae::from_checkpoint(&ck), Err(Error::Incompatible(_))));
    }
}
