use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use realtalk::audio::AudioEncoderConfig;
use realtalk::engine::{LossCurve, ParameterStore, Tensor};
use realtalk::face::EmotionLabel;
use realtalk::metrics::{lmd, Region};
use realtalk::synth::{Clip, SynthConfig, Synthesizer};
use realtalk::vae::{infer_motion, sync_gap, train_vae, A2mVae, VaeConfig, VaeShape, VaeTrainConfig};

const STEPS: usize = 400;

fn model(clip: &Clip) -> A2mVae {
    let config = VaeConfig {
        channels: 32,
        coupling_hidden: 32,
        sync_hidden: 32,
        sync_embed: 16,
        audio: AudioEncoderConfig { channels: 16, kernel: 3 },
        ..Default::default()
    };
    A2mVae::new(VaeShape { config, content_dim: clip.audio.content.cols(), pitch_dim: clip.audio.pitch.cols() }).unwrap()
}

fn clips() -> (Clip, Clip) {
    let s = Synthesizer::new(SynthConfig::default()).unwrap();
    (s.generate_clip(1, EmotionLabel::Neutral, 64, 32).unwrap(), s.generate_clip(2, EmotionLabel::Neutral, 48, 32).unwrap())
}

fn train(m: &A2mVae, clip: &Clip) -> (ParameterStore, LossCurve) {
    let mut store = ParameterStore::new(m.init_params(0).unwrap());
    let mut curve = LossCurve::default();
    let cfg = VaeTrainConfig { steps: STEPS, ..Default::default() };
    train_vae(m, &mut store, std::slice::from_ref(clip), &cfg, &mut curve).unwrap();
    (store, curve)
}

#[test]
fn scorer_learns_alignment_only_from_aligned_pairs() {
    let (clip, held) = clips();
    let m = model(&clip);
    let (aligned, _) = train(&m, &clip);

    let mut shuffled = clip.clone();
    let mut order: Vec<usize> = (0..clip.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    shuffled.landmarks = Tensor::from_fn(clip.len(), clip.landmarks.cols(), |r, c| clip.landmarks.get(order[r], c));
    let (broken, _) = train(&m, &shuffled);

    let good = sync_gap(&m, &aligned.params, &held).unwrap();
    let bad = sync_gap(&m, &broken.params, &held).unwrap();
    assert!(good > 0.2, "aligned gap {good}");
    assert!(good > bad + 0.2, "aligned gap {good}, shuffled gap {bad}");
}

#[test]
fn reconstruction_improves_and_sampling_is_seeded() {
    let (clip, _) = clips();
    let m = model(&clip);
    let untrained = {
        let mut p = m.init_params(0).unwrap();
        *p.get_mut(realtalk::vae::TEMPLATE).unwrap() = realtalk::vae::mean_landmarks(std::slice::from_ref(&clip));
        p
    };
    let (store, curve) = train(&m, &clip);
    let first = curve.at(10, "recon_mse").unwrap();
    let last = curve.at(STEPS as u64 - 1, "recon_mse").unwrap();
    assert!(last < 0.5 * first, "recon_mse {first} -> {last}");

    let a = infer_motion(&m, &store.params, &clip.audio, 4).unwrap();
    let b = infer_motion(&m, &store.params, &clip.audio, 4).unwrap();
    let c = infer_motion(&m, &store.params, &clip.audio, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), clip.landmarks.shape());
    assert!(a.data().iter().all(|v| v.is_finite()));

    let before = lmd(&infer_motion(&m, &untrained, &clip.audio, 4).unwrap(), &clip.landmarks, Region::Mouth).unwrap();
    let after = lmd(&a, &clip.landmarks, Region::Mouth).unwrap();
    assert!(after < before, "mouth error {before} -> {after}");
}
