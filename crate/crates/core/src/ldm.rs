//! Landmark deformation model: neutral landmarks plus an emotion label to a
//! per-frame displacement, then `l̂_E = l̂ + δ·Δl̂`.
//!
//! Rows are frames. Consecutive groups of `window` frames form the token
//! sequence seen by self-attention, so a batch is `windows × window` rows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_io::Checkpoint;
use crate::engine::layers::ensure_finite;
use crate::engine::tape::attention_probs;
use crate::engine::{
    apply_gradients, AdamConfig, BatchNorm, Init, LayerNorm, Linear, LossCurve, Mode, OptimizerState, ParameterStore,
    Params, Scalar, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::face::{EmotionLabel, LANDMARK_DIM};
use crate::synth::{Clip, Synthesizer};

pub const CHECKPOINT_KIND: &str = "ldm";
pub const EMBEDDING: &str = "ldm.emotion";
pub const DEFAULT_DELTA: f64 = 0.15;
/// Deformation magnitudes of the ablation sweep, default setting first.
pub const DELTA_SWEEP: [f64; 7] = [0.15, 0.0, 0.2, 0.3, 0.4, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    /// Inference-time deformation magnitude.
    pub delta: f64,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self { hidden: 256, embed_dim: 16, heads: 4, window: 8, ff_hidden: 256, dropout: 0.1, delta: DEFAULT_DELTA }
    }
}

impl LdmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("ldm: {m}")));
        if self.hidden == 0 || self.embed_dim == 0 || self.ff_hidden == 0 || self.window == 0 {
            return bad("sizes must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta {} must be a finite non-negative number", self.delta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmTrainConfig {
    pub steps: usize,
    pub batch_windows: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of `adam.lr`, reached by
    /// cosine decay.
    pub final_lr_fraction: f64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_windows: 16, seed: 0, adam: AdamConfig::default(), final_lr_fraction: 0.02 }
    }
}

struct ResBlock {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
}

pub struct Ldm {
    pub config: LdmConfig,
    fc_in: Linear,
    bn_in: BatchNorm,
    blocks: Vec<ResBlock>,
    attn: [String; 4],
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    out: Linear,
}

impl Ldm {
    pub fn new(config: LdmConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let blocks = (0..2)
            .map(|i| ResBlock {
                fc1: Linear::new(format!("ldm.res{i}.fc1"), h, h),
                bn1: BatchNorm::new(format!("ldm.res{i}.bn1"), h),
                fc2: Linear::new(format!("ldm.res{i}.fc2"), h, h),
                bn2: BatchNorm::new(format!("ldm.res{i}.bn2"), h),
            })
            .collect();
        Ok(Self {
            fc_in: Linear::new("ldm.fc_in", LANDMARK_DIM + config.embed_dim, h),
            bn_in: BatchNorm::new("ldm.bn_in", h),
            blocks,
            attn: ["ldm.attn.wq", "ldm.attn.wk", "ldm.attn.wv", "ldm.attn.wo"].map(String::from),
            ln1: LayerNorm::new("ldm.ln1", h),
            ff1: Linear::new("ldm.ff1", h, config.ff_hidden),
            ff2: Linear::new("ldm.ff2", config.ff_hidden, h),
            ln2: LayerNorm::new("ldm.ln2", h),
            out: Linear::new("ldm.out", h, LANDMARK_DIM),
            config,
        })
    }

    /// Fresh parameters; the output layer starts at zero so the initial
    /// displacement is zero.
    pub fn init_params(&self, seed: u64) -> Result<Params<f32>> {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let h = self.config.hidden;
        p.insert(EMBEDDING, init.normal(EmotionLabel::COUNT, self.config.embed_dim, 1.0), true)?;
        self.fc_in.register(&mut p, &mut init)?;
        self.bn_in.register(&mut p)?;
        for b in &self.blocks {
            b.fc1.register(&mut p, &mut init)?;
            b.bn1.register(&mut p)?;
            b.fc2.register(&mut p, &mut init)?;
            b.bn2.register(&mut p)?;
        }
        for name in &self.attn {
            p.insert(name.clone(), init.linear(h, h), true)?;
        }
        self.ln1.register(&mut p)?;
        self.ff1.register(&mut p, &mut init)?;
        self.ff2.register(&mut p, &mut init)?;
        self.ln2.register(&mut p)?;
        self.out.register_zero(&mut p)?;
        Ok(p)
    }

    /// Embedding rows for the given labels (`N × embed_dim`).
    pub fn embed_emotion<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, labels: &[EmotionLabel]) -> Result<Var> {
        let table = tape.param(params, EMBEDDING)?;
        let idx: Vec<usize> = labels.iter().map(|e| e.code() as usize).collect();
        Ok(tape.gather_rows(table, &idx))
    }

    /// Query and key projections of the attention block for inspection.
    fn attention_inputs<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, h: Var) -> Result<(Var, Var, Var)> {
        let wq = tape.param(params, &self.attn[0])?;
        let wk = tape.param(params, &self.attn[1])?;
        let wv = tape.param(params, &self.attn[2])?;
        Ok((tape.matmul(h, wq), tape.matmul(h, wk), tape.matmul(h, wv)))
    }

    fn hidden<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        neutral: Var,
        labels: &[EmotionLabel],
        mode: Mode,
        rng: &mut Option<&mut R>,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        let (n, d) = tape.shape(neutral);
        if d != LANDMARK_DIM {
            return Err(Error::ShapeMismatch { what: "ldm input".into(), expected: LANDMARK_DIM.to_string(), found: d.to_string() });
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch { what: "ldm labels".into(), expected: n.to_string(), found: labels.len().to_string() });
        }
        if n == 0 || n % self.config.window != 0 {
            return Err(Error::Invalid(format!("ldm batch of {n} rows is not a positive multiple of window {}", self.config.window)));
        }
        let emb = self.embed_emotion(tape, params, labels)?;
        let x = tape.concat_cols(&[neutral, emb]);
        let h = self.fc_in.forward(tape, params, x)?;
        let h = self.bn_in.forward(tape, params, h, mode)?;
        let mut h = tape.relu(h);
        ensure_finite(tape, h, "ldm backbone")?;
        for (i, b) in self.blocks.iter().enumerate() {
            let f = b.fc1.forward(tape, params, h)?;
            let f = b.bn1.forward(tape, params, f, mode)?;
            let f = tape.relu(f);
            let f = b.fc2.forward(tape, params, f)?;
            let f = b.bn2.forward(tape, params, f, mode)?;
            let s = tape.add(f, h);
            h = tape.relu(s);
            ensure_finite(tape, h, &format!("ldm residual block {i}"))?;
        }
        let p = if mode == Mode::Train { self.config.dropout } else { 0.0 };
        let mut drop = |tape: &mut Tape<T>, v: Var| match rng.as_deref_mut() {
            Some(r) if p > 0.0 => tape.dropout(v, p, r),
            _ => v,
        };
        let (q, k, v) = self.attention_inputs(tape, params, h)?;
        let heads = tape.block_attention(q, k, v, self.config.window, self.config.heads);
        let wo = tape.param(params, &self.attn[3])?;
        let z_att = tape.matmul(heads, wo);
        let z_att = drop(tape, z_att);
        let z = tape.add(z_att, h);
        let z = self.ln1.forward(tape, params, z)?;
        ensure_finite(tape, z, "ldm attention")?;
        let f = self.ff1.forward(tape, params, z)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, params, f)?;
        let f = drop(tape, f);
        let s = tape.add(f, h);
        let h_final = self.ln2.forward(tape, params, s)?;
        ensure_finite(tape, h_final, "ldm feed-forward")?;
        Ok((h_final, Some((q, k))))
    }

    /// Displacement `Δl̂` (`N × 204`). Dropout is active only in train mode
    /// with an RNG supplied.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        neutral: Var,
        labels: &[EmotionLabel],
        mode: Mode,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let (h, _) = self.hidden(tape, params, neutral, labels, mode, &mut rng)?;
        let out = self.out.forward(tape, params, h)?;
        ensure_finite(tape, out, "ldm output")?;
        Ok(out)
    }

    /// Per-window, per-head attention weights of an eval-mode pass.
    pub fn attention_weights(&self, params: &Params<f32>, neutral: &Tensor<f32>, labels: &[EmotionLabel]) -> Result<Vec<Vec<Tensor<f32>>>> {
        let mut tape = Tape::new();
        let x = tape.constant(neutral.clone());
        let (_, qk) = self.hidden::<f32, ChaCha8Rng>(&mut tape, params, x, labels, Mode::Eval, &mut None)?;
        let (q, k) = qk.expect("attention inputs");
        Ok(attention_probs(tape.value(q), tape.value(k), self.config.window, self.config.heads))
    }

    /// Eval-mode displacement for a whole sequence of any length; the tail is
    /// padded by repeating the last frame up to a whole window.
    pub fn predict(&self, params: &Params<f32>, neutral: &Tensor<f32>, emotion: EmotionLabel) -> Result<Tensor<f32>> {
        let t = neutral.rows();
        if t == 0 {
            return Err(Error::Invalid("ldm input has no frames".into()));
        }
        let w = self.config.window;
        let padded = t.div_ceil(w) * w;
        let x = Tensor::from_fn(padded, LANDMARK_DIM, |i, j| neutral.get(i.min(t - 1), j));
        let labels = vec![emotion; padded];
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward::<f32, ChaCha8Rng>(&mut tape, params, xv, &labels, Mode::Eval, None)?;
        Ok(tape.value(out).slice_rows(0, t))
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
            return Err(Error::Incompatible(format!("expected an {CHECKPOINT_KIND} checkpoint, found {}", ckpt.kind)));
        }
        let config: LdmConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Incompatible(format!("ldm checkpoint config: {e}")))?;
        let model = Self::new(config)?;
        let store = ckpt.to_store()?;
        model.check_params(&store.params)?;
        Ok((model, store))
    }
}

/// `l̂_E = l̂ + δ·Δl̂`.
pub fn apply_deformation(neutral: &Tensor<f32>, displacement: &Tensor<f32>, delta: f64) -> Result<Tensor<f32>> {
    if neutral.shape() != displacement.shape() {
        return Err(Error::ShapeMismatch {
            what: "deformation".into(),
            expected: format!("{:?}", neutral.shape()),
            found: format!("{:?}", displacement.shape()),
        });
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Invalid(format!("deformation magnitude {delta} must be finite and non-negative")));
    }
    let d = delta as f32;
    Ok(neutral.zip_map(displacement, |a, b| a + d * b))
}

/// Mean squared error over all rows and coordinates.
pub fn ldm_loss<T: Scalar>(tape: &mut Tape<T>, predicted: Var, target: Var) -> Result<Var> {
    if tape.shape(predicted) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            what: "ldm loss".into(),
            expected: format!("{:?}", tape.shape(target)),
            found: format!("{:?}", tape.shape(predicted)),
        });
    }
    let d = tape.sub(predicted, target);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Paired neutral and emotional landmark sequences for one label.
#[derive(Clone, Debug, PartialEq)]
pub struct LdmSequence {
    pub neutral: Tensor<f32>,
    pub emotional: Tensor<f32>,
    pub emotion: EmotionLabel,
}

/// Builds pairs from synthetic clips: the neutral sequence is regenerated
/// from the clip's audio and `noise` (standard deviation) perturbs the
/// emotional target.
pub fn synthetic_pairs(synth: &Synthesizer, clips: &[Clip], noise: f64, seed: u64) -> Result<Vec<LdmSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    clips
        .iter()
        .map(|c| {
            c.validate()?;
            let neutral = synth.landmarks_for(&c.audio.content, EmotionLabel::Neutral);
            let mut emotional = c.landmarks.clone();
            if noise > 0.0 {
                for v in emotional.data_mut() {
                    *v += normal.sample(&mut rng) as f32;
                }
            }
            Ok(LdmSequence { neutral, emotional, emotion: c.emotion })
        })
        .collect()
}

/// Reassigns labels across sequences by a random permutation (negative control).
pub fn permute_labels(seqs: &[LdmSequence], seed: u64) -> Vec<LdmSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<EmotionLabel> = seqs.iter().map(|s| s.emotion).collect();
    labels.shuffle(&mut rng);
    seqs.iter().zip(labels).map(|(s, e)| LdmSequence { emotion: e, ..s.clone() }).collect()
}

/// Trains with `δ = 1` on random windows. On divergence the store keeps the
/// last good parameters and the error is returned.
pub fn train_ldm(
    model: &Ldm,
    store: &mut ParameterStore,
    seqs: &[LdmSequence],
    cfg: &LdmTrainConfig,
    curve: &mut LossCurve,
) -> Result<()> {
    let w = model.config.window;
    if seqs.is_empty() {
        return Err(Error::Invalid("train_ldm needs at least one sequence".into()));
    }
    for s in seqs {
        if s.neutral.shape() != s.emotional.shape() || s.neutral.cols() != LANDMARK_DIM {
            return Err(Error::ShapeMismatch {
                what: "ldm pair".into(),
                expected: format!("{:?}", s.neutral.shape()),
                found: format!("{:?}", s.emotional.shape()),
            });
        }
        if s.neutral.rows() < w {
            return Err(Error::Invalid(format!("sequence of {} frames is shorter than the window {w}", s.neutral.rows())));
        }
    }
    if cfg.batch_windows == 0 {
        return Err(Error::Config("ldm batch_windows must be positive".into()));
    }
    let mut opt = OptimizerState::new(cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // sequences are visited in shuffled epochs so every batch mixes labels
    // evenly and batch statistics stay close to the running statistics
    let mut order: Vec<usize> = Vec::new();
    if !(0.0..=1.0).contains(&cfg.final_lr_fraction) {
        return Err(Error::Config(format!("ldm final_lr_fraction {} outside [0, 1]", cfg.final_lr_fraction)));
    }
    for it in 0..cfg.steps {
        let progress = it as f64 / cfg.steps.saturating_sub(1).max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.config.lr = cfg.adam.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        let n = cfg.batch_windows * w;
        let mut x = Tensor::zeros(n, LANDMARK_DIM);
        let mut y = Tensor::zeros(n, LANDMARK_DIM);
        let mut labels = Vec::with_capacity(n);
        for b in 0..cfg.batch_windows {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = &seqs[order.pop().unwrap()];
            let start = rng.random_range(0..=s.neutral.rows() - w);
            for i in 0..w {
                x.row_slice_mut(b * w + i).copy_from_slice(s.neutral.row_slice(start + i));
                y.row_slice_mut(b * w + i).copy_from_slice(s.emotional.row_slice(start + i));
                labels.push(s.emotion);
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let step = store.step();
        let disp = model
            .forward(&mut tape, &store.params, xv, &labels, Mode::Train, Some(&mut rng))
            .map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { step, detail: d },
                other => other,
            })?;
        let pred = tape.add(xv, disp);
        let loss = ldm_loss(&mut tape, pred, yv)?;
        let total = tape.value(loss).item() as f64;
        apply_gradients(store, &mut opt, &mut tape, loss)?;
        curve.push(step, total, Default::default());
    }
    Ok(())
}

/// Mean per-frame `‖Δl̂ − (l_E − l̂)‖` over sequences, with `Δl̂` predicted in
/// eval mode.
pub fn displacement_error(model: &Ldm, params: &Params<f32>, seqs: &[LdmSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for s in seqs {
        let pred = model.predict(params, &s.neutral, s.emotion)?;
        for r in 0..pred.rows() {
            let e: f64 = (0..LANDMARK_DIM)
                .map(|j| {
                    let truth = s.emotional.get(r, j) as f64 - s.neutral.get(r, j) as f64;
                    (pred.get(r, j) as f64 - truth).powi(2)
                })
                .sum();
            total += e.sqrt();
            frames += 1;
        }
    }
    Ok(total / frames.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{grad_check, GradCheckConfig};

    fn small() -> (Ldm, Params<f32>) {
        let m = Ldm::new(LdmConfig { hidden: 8, embed_dim: 3, heads: 2, window: 4, ff_hidden: 6, ..Default::default() }).unwrap();
        let mut p = m.init_params(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        *p.get_mut("ldm.out.w").unwrap() = Tensor::from_fn(8, LANDMARK_DIM, |_, _| rng.random_range(-0.5..0.5));
        (m, p)
    }

    fn inputs(n: usize, seed: u64) -> (Tensor<f32>, Vec<EmotionLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(n, LANDMARK_DIM, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|i| EmotionLabel::ALL[(i / 4 + seed as usize) % 8]).collect();
        (x, labels)
    }

    #[test]
    fn embedding_width_and_concatenation() {
        let m = Ldm::new(LdmConfig::default()).unwrap();
        let p = m.init_params(0).unwrap();
        let mut tape = Tape::new();
        let e = m.embed_emotion(&mut tape, &p, &[EmotionLabel::Sad]).unwrap();
        assert_eq!(tape.shape(e), (1, 16));
        assert_eq!(m.fc_in.inputs, 220);
    }

    #[test]
    fn eval_forward_is_deterministic_and_attention_rows_sum_to_one() {
        let (m, p) = small();
        let (x, labels) = inputs(8, 1);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let o = m.forward::<f32, ChaCha8Rng>(&mut tape, &p, xv, &labels, Mode::Eval, None).unwrap();
            tape.value(o).clone()
        };
        assert_eq!(run(), run());
        for window in m.attention_weights(&p, &x, &labels).unwrap() {
            assert_eq!(window.len(), 2);
            for a in window {
                for i in 0..4 {
                    let s: f32 = a.row_slice(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(a.row_slice(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_displacement() {
        let m = Ldm::new(LdmConfig { hidden: 8, embed_dim: 3, heads: 2, window: 4, ff_hidden: 6, ..Default::default() }).unwrap();
        let p = m.init_params(0).unwrap();
        let (x, _) = inputs(4, 2);
        let d = m.predict(&p, &x, EmotionLabel::Angry).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_dropout_is_seed_reproducible() {
        let (m, p) = small();
        let (x, labels) = inputs(8, 3);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let o = m.forward(&mut tape, &p, xv, &labels, Mode::Train, Some(&mut rng)).unwrap();
            tape.value(o).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn deformation_is_linear_in_delta() {
        let (x, _) = inputs(3, 4);
        let (d, _) = inputs(3, 5);
        assert_eq!(apply_deformation(&x, &d, 0.0).unwrap(), x);
        let norm = |a: &Tensor<f32>| a.zip_map(&x, |u, v| u - v).data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let one = norm(&apply_deformation(&x, &d, 0.25).unwrap());
        let two = norm(&apply_deformation(&x, &d, 0.5).unwrap());
        assert!((two - 2.0 * one).abs() < 1e-5 * one);
        assert!(apply_deformation(&x, &d.slice_rows(0, 2), 0.1).is_err());
        assert!(apply_deformation(&x, &d, -0.1).is_err());
        assert_eq!(LdmConfig::default().delta, 0.15);
        assert_eq!(DELTA_SWEEP[0], 0.15);
    }

    #[test]
    fn loss_values() {
        let (x, _) = inputs(2, 6);
        let (y, _) = inputs(2, 7);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x.cast());
        let l = ldm_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let b = tape.add_scalar(a, 1.0);
        let l = ldm_loss(&mut tape, b, a).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        let c = tape.constant(y.cast());
        let l = ldm_loss(&mut tape, a, c).unwrap();
        let mut acc = 0.0f64;
        for (u, v) in x.data().iter().zip(y.data()) {
            acc += (*u as f64 - *v as f64).powi(2);
        }
        assert!((tape.value(l).item() - acc / x.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn forward_gradients() {
        let (m, p) = small();
        let (x, labels) = inputs(8, 8);
        let (y, _) = inputs(8, 9);
        let report = grad_check(
            |tape, p| {
                let xv = tape.constant(x.cast());
                let yv = tape.constant(y.cast());
                let d = m.forward::<f64, ChaCha8Rng>(tape, p, xv, &labels, Mode::Train, None)?;
                let pred = tape.add(xv, d);
                ldm_loss(tape, pred, yv)
            },
            &p.cast::<f64>(),
            &GradCheckConfig { min_coords: 200, ..Default::default() },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn bad_batches_are_rejected() {
        let (m, p) = small();
        let (x, labels) = inputs(6, 1);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x);
        assert!(m.forward::<f32, ChaCha8Rng>(&mut tape, &p, xv, &labels, Mode::Eval, None).is_err());
        assert!(m.forward::<f32, ChaCha8Rng>(&mut tape, &p, xv, &labels[..5], Mode::Eval, None).is_err());
    }
}
