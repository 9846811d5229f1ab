use realtalk::engine::{LossCurve, ParameterStore, Tape};
use realtalk::face::{EmotionLabel, LANDMARK_DIM};
use realtalk::ldm::{displacement_error, synthetic_pairs, train_ldm, Ldm, LdmConfig, LdmSequence, LdmTrainConfig};
use realtalk::synth::{SynthConfig, Synthesizer};

fn pairs(synth: &Synthesizer, seed0: u64) -> Vec<LdmSequence> {
    let clips: Vec<_> = EmotionLabel::ALL
        .iter()
        .enumerate()
        .map(|(i, &e)| synth.generate_clip(seed0 + i as u64, e, 24, 32).unwrap())
        .collect();
    synthetic_pairs(synth, &clips, 0.0, seed0).unwrap()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn learns_label_specific_displacements() {
    let synth = Synthesizer::new(SynthConfig::default()).unwrap();
    let train = pairs(&synth, 10);
    let held = pairs(&synth, 50);
    let model = Ldm::new(LdmConfig { hidden: 64, ff_hidden: 64, window: 4, dropout: 0.0, ..Default::default() }).unwrap();
    let mut store = ParameterStore::new(model.init_params(0).unwrap());
    let zero_error = displacement_error(&model, &store.params, &held).unwrap();
    let cfg = LdmTrainConfig { steps: 300, batch_windows: 8, ..Default::default() };
    train_ldm(&model, &mut store, &train, &cfg, &mut LossCurve::default()).unwrap();
    let error = displacement_error(&model, &store.params, &held).unwrap();
    assert!(error < 0.5 * zero_error, "held-out error {error} vs zero predictor {zero_error}");

    let mut tape = Tape::<f32>::new();
    let e = model.embed_emotion(&mut tape, &store.params, &EmotionLabel::ALL).unwrap();
    let table = tape.value(e).clone();
    for a in 0..EmotionLabel::ALL.len() {
        for b in a + 1..EmotionLabel::ALL.len() {
            let d: Vec<f32> = table.row_slice(a).iter().zip(table.row_slice(b)).map(|(x, y)| x - y).collect();
            assert!(norm(&d) > 1e-3, "labels {a} and {b} share an embedding");
        }
    }

    let neutral = &held[0].neutral;
    let mean_norm = |e: EmotionLabel| {
        let d = model.predict(&store.params, neutral, e).unwrap();
        assert_eq!(d.cols(), LANDMARK_DIM);
        (0..d.rows()).map(|r| norm(d.row_slice(r))).sum::<f64>() / d.rows() as f64
    };
    let still = mean_norm(EmotionLabel::Neutral);
    let happy_oracle = norm(&synth.oracle_displacement(EmotionLabel::Happy));
    assert!(still < 0.25 * happy_oracle, "neutral displacement {still}, happy oracle {happy_oracle}");
    assert!(mean_norm(EmotionLabel::Happy) > 2.0 * still);
}
