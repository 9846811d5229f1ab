//! Audio front end: per-frame content and pitch features and the two
//! convolutional encoders that turn them into the conditioning streams `h`
//! and `p`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BatchNorm, Conv1d, Init, Mode, Params, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-video-frame audio features: a content stream and a pitch stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    /// `T × D_a`.
    pub content: Tensor<f32>,
    /// `T × D_p`.
    pub pitch: Tensor<f32>,
}

impl AudioFeatureSequence {
    pub fn new(content: Tensor<f32>, pitch: Tensor<f32>) -> Result<Self> {
        if content.rows() != pitch.rows() {
            return Err(Error::ShapeMismatch {
                what: "audio streams".into(),
                expected: format!("{} pitch frames", content.rows()),
                found: format!("{}", pitch.rows()),
            });
        }
        let s = Self { content, pitch };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.content.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.content.rows() == 0 {
            return Err(Error::Invalid("audio feature sequence is empty".into()));
        }
        if !self.content.all_finite() {
            return Err(Error::NonFinite("audio content features".into()));
        }
        if !self.pitch.all_finite() {
            return Err(Error::NonFinite("audio pitch features".into()));
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self { content: self.content.slice_rows(start, end), pitch: self.pitch.slice_rows(start, end) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioEncoderConfig {
    pub channels: usize,
    pub kernel: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self { channels: 64, kernel: 3 }
    }
}

/// conv → batch-norm → GeLU → conv, length preserving.
#[derive(Clone, Debug)]
pub struct StreamEncoder {
    conv1: Conv1d,
    bn: BatchNorm,
    conv2: Conv1d,
}

impl StreamEncoder {
    pub fn new(prefix: &str, inputs: usize, cfg: AudioEncoderConfig) -> Self {
        Self {
            conv1: Conv1d::new(format!("{prefix}.conv1"), inputs, cfg.channels, cfg.kernel, 1),
            bn: BatchNorm::new(format!("{prefix}.bn"), cfg.channels),
            conv2: Conv1d::new(format!("{prefix}.conv2"), cfg.channels, cfg.channels, cfg.kernel, 1),
        }
    }

    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        self.conv1.register(params, init)?;
        self.bn.register(params)?;
        self.conv2.register(params, init)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var, mode: Mode) -> Result<Var> {
        let a = self.conv1.forward(tape, params, x)?;
        let b = self.bn.forward(tape, params, a, mode)?;
        let c = tape.gelu(b);
        self.conv2.forward(tape, params, c)
    }
}

/// Dedicated encoders for the content and pitch streams.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub config: AudioEncoderConfig,
    pub content: StreamEncoder,
    pub pitch: StreamEncoder,
    pub content_dim: usize,
    pub pitch_dim: usize,
}

/// Encoded streams on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AudioEncoding {
    pub h: Var,
    pub p: Var,
}

impl AudioEncoder {
    pub fn new(prefix: &str, content_dim: usize, pitch_dim: usize, config: AudioEncoderConfig) -> Self {
        Self {
            config,
            content: StreamEncoder::new(&format!("{prefix}.content"), content_dim, config),
            pitch: StreamEncoder::new(&format!("{prefix}.pitch"), pitch_dim, config),
            content_dim,
            pitch_dim,
        }
    }

    pub fn register<R: Rng>(&self, params: &mut Params<f32>, init: &mut Init<R>) -> Result<()> {
        self.content.register(params, init)?;
        self.pitch.register(params, init)
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        audio: &AudioFeatureSequence,
        mode: Mode,
    ) -> Result<AudioEncoding> {
        audio.validate()?;
        if audio.content.cols() != self.content_dim || audio.pitch.cols() != self.pitch_dim {
            return Err(Error::ShapeMismatch {
                what: "audio feature dimensions".into(),
                expected: format!("{}+{}", self.content_dim, self.pitch_dim),
                found: format!("{}+{}", audio.content.cols(), audio.pitch.cols()),
            });
        }
        let c = tape.constant(audio.content.cast());
        let p = tape.constant(audio.pitch.cast());
        let h = self.content.forward(tape, params, c, mode)?;
        let p = self.pitch.forward(tape, params, p, mode)?;
        Ok(AudioEncoding { h, p })
    }
}

/// Channel-wise `h ⊕ p` (content first).
pub fn concat_encodings<T: Scalar>(tape: &mut Tape<T>, enc: AudioEncoding) -> Result<Var> {
    let (th, _) = tape.shape(enc.h);
    let (tp, _) = tape.shape(enc.p);
    if th != tp {
        return Err(Error::ShapeMismatch {
            what: "encoding lengths".into(),
            expected: th.to_string(),
            found: tp.to_string(),
        });
    }
    Ok(tape.concat_cols(&[enc.h, enc.p]))
}

/// Splits a `T × 2C` conditioning matrix back into `(h, p)`.
pub fn split_encodings<T: Scalar>(cond: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = cond.cols() / 2;
    (cond.slice_cols(0, c), cond.slice_cols(c, cond.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(d_a: usize) -> (AudioEncoder, Params<f32>) {
        let cfg = AudioEncoderConfig { channels: 4, kernel: 3 };
        let enc = AudioEncoder::new("audio", d_a, 2, cfg);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        enc.register(&mut p, &mut Init::new(&mut rng)).unwrap();
        (enc, p)
    }

    fn seq(t: usize, d_a: usize, seed: u64) -> AudioFeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioFeatureSequence::new(
            Tensor::from_fn(t, d_a, |_, _| rng.random_range(-1.0..1.0)),
            Tensor::from_fn(t, 2, |i, j| (i as f32 * 0.3 + j as f32).sin()),
        )
        .unwrap()
    }

    fn encode_eval(enc: &AudioEncoder, p: &Params<f32>, a: &AudioFeatureSequence) -> Tensor<f32> {
        let mut tape = Tape::new();
        let e = enc.encode(&mut tape, p, a, Mode::Eval).unwrap();
        let c = concat_encodings(&mut tape, e).unwrap();
        tape.value(c).clone()
    }

    #[test]
    fn zero_input_reduces_to_bias_path() {
        let (enc, mut p) = encoder(3);
        // non-zero biases make the closed form non-trivial
        *p.get_mut("audio.content.conv1.b").unwrap() = Tensor::row(vec![0.5, -0.25, 1.0, -1.5]);
        *p.get_mut("audio.content.conv2.b").unwrap() = Tensor::row(vec![0.1, 0.2, 0.3, 0.4]);
        let zero = AudioFeatureSequence::new(Tensor::zeros(1, 3), Tensor::zeros(1, 2)).unwrap();
        let out = encode_eval(&enc, &p, &zero);
        // T = 1: only the centre tap of the second conv sees data
        let b1 = p.get("audio.content.conv1.b").unwrap().data().to_vec();
        let bn_scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        let g: Vec<f64> = b1
            .iter()
            .map(|&b| {
                let x = b as f64 * bn_scale;
                0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
            })
            .collect();
        let w2 = p.get("audio.content.conv2.w").unwrap();
        let b2 = p.get("audio.content.conv2.b").unwrap();
        for o in 0..4 {
            let want: f64 = b2.data()[o] as f64 + (0..4).map(|c| g[c] * w2.get(4 + c, o) as f64).sum::<f64>();
            assert!((out.get(0, o) as f64 - want).abs() < 1e-5, "channel {o}");
        }
    }

    #[test]
    fn length_is_preserved() {
        let (enc, p) = encoder(3);
        for t in [1, 2, 7] {
            let out = encode_eval(&enc, &p, &seq(t, 3, 1));
            assert_eq!(out.shape(), (t, 8));
        }
    }

    #[test]
    fn zero_padded_extra_features_do_not_change_output() {
        let (enc, p) = encoder(3);
        let a = seq(6, 3, 2);
        let base = encode_eval(&enc, &p, &a);

        let (wide, mut pw) = encoder(5);
        for (name, e) in p.iter() {
            if name != "audio.content.conv1.w" {
                *pw.get_mut(name).unwrap() = e.value.clone();
            }
        }
        // conv1 weight rows are laid out tap-major: [tap0 feats.., tap1 feats.., tap2 feats..]
        let w = p.get("audio.content.conv1.w").unwrap();
        let mut ww = Tensor::zeros(15, 4);
        for tap in 0..3 {
            for f in 0..3 {
                for o in 0..4 {
                    ww.set(tap * 5 + f, o, w.get(tap * 3 + f, o));
                }
            }
        }
        *pw.get_mut("audio.content.conv1.w").unwrap() = ww;
        let padded = AudioFeatureSequence::new(
            Tensor::from_fn(6, 5, |i, j| if j < 3 { a.content.get(i, j) } else { 0.0 }),
            a.pitch.clone(),
        )
        .unwrap();
        assert_eq!(encode_eval(&wide, &pw, &padded), base);
    }

    #[test]
    fn temporal_shift_is_equivariant_away_from_borders() {
        let (enc, p) = encoder(3);
        let a = seq(20, 3, 3);
        let s = 3;
        let shifted = AudioFeatureSequence::new(
            Tensor::from_fn(20, 3, |i, j| if i >= s { a.content.get(i - s, j) } else { 0.0 }),
            Tensor::from_fn(20, 2, |i, j| if i >= s { a.pitch.get(i - s, j) } else { 0.0 }),
        )
        .unwrap();
        let x = encode_eval(&enc, &p, &a);
        let y = encode_eval(&enc, &p, &shifted);
        // receptive field is 2 frames either side
        for t in (s + 2)..(20 - 2) {
            for c in 0..8 {
                assert!((x.get(t - s, c) - y.get(t, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nan_input_is_rejected() {
        let (enc, p) = encoder(3);
        let mut bad = seq(4, 3, 1);
        bad.content.set(2, 1, f32::NAN);
        let mut tape = Tape::<f32>::new();
        assert!(matches!(enc.encode(&mut tape, &p, &bad, Mode::Eval), Err(Error::NonFinite(_))));
        assert!(AudioFeatureSequence::new(bad.content.clone(), bad.pitch.clone()).is_err());
    }

    #[test]
    fn concat_layout_and_split() {
        let mut tape = Tape::<f32>::new();
        let h = tape.constant(Tensor::zeros(2, 4));
        let p = tape.constant(Tensor::filled(2, 4, 1.0));
        let c = concat_encodings(&mut tape, AudioEncoding { h, p }).unwrap();
        let v = tape.value(c).clone();
        assert_eq!(v.shape(), (2, 8));
        assert!(v.slice_cols(0, 4).data().iter().all(|&x| x == 0.0));
        assert!(v.slice_cols(4, 8).data().iter().all(|&x| x == 1.0));
        let (hh, pp) = split_encodings(&v);
        assert_eq!(&hh, tape.value(h));
        assert_eq!(&pp, tape.value(p));

        let short = tape.constant(Tensor::zeros(3, 4));
        assert!(concat_encodings(&mut tape, AudioEncoding { h, p: short }).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (enc, p) = encoder(3);
        let a = seq(5, 3, 4);
        let p64 = p.cast::<f64>();
        let report = grad_check(
            |tape: &mut Tape<f64>, prm: &Params<f64>| {
                let e = enc.encode(tape, prm, &a, Mode::Train)?;
                let c = concat_encodings(tape, e)?;
                let w = tape.constant(Tensor::from_fn(5, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin()));
                let y = tape.mul(c, w);
                Ok(tape.sum(y))
            },
            &p64,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
