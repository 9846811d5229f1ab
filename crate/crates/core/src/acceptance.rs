//! Acceptance suite: ten criteria, each reported as a pass/fail entry with
//! a measured value and its wall time. A failure inside a criterion is an
//! entry, never an error.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::audio::AudioFeatureSequence;
use crate::engine::{grad_check, GradCheckConfig, Init, LossCurve, Mode, ParameterStore, Params, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::face::{EmotionLabel, LANDMARK_DIM};
use crate::frame::RgbImage;
use crate::ldm::{self, apply_deformation, displacement_error, ldm_loss, permute_labels, synthetic_pairs, train_ldm, Ldm, LdmConfig};
use crate::metrics::{lmd, psnr, ssim, sync_eval, Region, PSNR_CAP};
use crate::nerf::{self, composite, FrameCondition, NerfClip, NerfConfig, Ray, RandomConvPerceptual, TriPlaneNerf};
use crate::pipeline::{self, PipelineConfig};
use crate::synth::{SynthConfig, Synthesizer};
use crate::vae::{self, closed_form_kl, monte_carlo_kl, reconstruction, sync_loss, A2mVae, FlowPrior, Posterior, VaeConfig, VaeShape};

/// Configuration shipped with the repository.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../configs/default.json");

/// Training steps for both runs of the radiance-field comparison.
pub const NERF_STEPS: usize = 3000;

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

const NAMES: [&str; 10] = [
    "flow round trip",
    "KL sanity",
    "gradient checks",
    "volume rendering",
    "deformation semantics",
    "LDM oracle recovery",
    "VAE overfit",
    "NeRF overfit",
    "metrics",
    "end-to-end determinism",
];

const BUDGETS: [u64; 10] = [10, 30, 300, 60, 1, 900, 1200, 6 * 3600, 60, 600];

/// `all`/`full`, `invariants`, `training`, `e2e`, or a single criterion as
/// `3` or `c3`.
pub fn parse_selector(selector: &str) -> Result<Vec<u8>> {
    let s = selector.trim().to_ascii_lowercase();
    let ids = match s.as_str() {
        "all" | "full" => (1..=10).collect(),
        "invariants" => vec![1, 2, 3, 4, 5, 9],
        "training" => vec![6, 7, 8],
        "e2e" => vec![10],
        other => {
            let n: u8 = other
                .strip_prefix('c')
                .unwrap_or(other)
                .parse()
                .map_err(|_| Error::Config(format!("unknown acceptance selector {selector:?}; use all, invariants, training, e2e or 1-10")))?;
            if !(1..=10).contains(&n) {
                return Err(Error::Config(format!("acceptance criterion {n} does not exist; use 1-10")));
            }
            vec![n]
        }
    };
    Ok(ids)
}

pub fn run_acceptance(selector: &str) -> Result<Vec<CriterionResult>> {
    Ok(parse_selector(selector)?.into_iter().map(run_criterion).collect())
}

pub fn run_criterion(id: u8) -> CriterionResult {
    let start = Instant::now();
    let outcome = match id {
        1 => flow_round_trip(),
        2 => kl_sanity(),
        3 => gradient_checks(),
        4 => volume_rendering(),
        5 => deformation_semantics(),
        6 => ldm_oracle_recovery(),
        7 => vae_overfit(),
        8 => nerf_overfit(),
        9 => metric_identities(),
        10 => end_to_end(),
        _ => Err(Error::Config(format!("criterion {id} does not exist"))),
    };
    let elapsed = start.elapsed();
    let idx = (id as usize).clamp(1, 10) - 1;
    let budget = Duration::from_secs(BUDGETS[idx]);
    let (mut passed, mut detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if elapsed > budget {
        passed = false;
        detail.push_str(&format!("; over the {} s budget", budget.as_secs()));
    }
    CriterionResult { id, name: NAMES[idx], passed, detail, seconds: elapsed.as_secs_f64() }
}

type Outcome = Result<(bool, String)>;

fn perturb(p: &mut Params<f32>, prefix: &str, rng: &mut ChaCha8Rng, scale: f32) {
    for (name, e) in p.iter_mut() {
        if name.starts_with(prefix) && e.trainable && !name.ends_with("mix.sign") && !name.ends_with("mix.perm") {
            for v in e.value.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }
}

fn random_flow(dim: usize, steps: usize, hidden: usize, seed: u64, scale: f32) -> Result<(FlowPrior, Params<f32>)> {
    let flow = FlowPrior::new("flow", dim, steps, hidden);
    let mut p = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flow.register(&mut p, &mut Init::new(&mut rng))?;
    perturb(&mut p, "flow", &mut rng, scale);
    Ok((flow, p))
}

fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap_or(c);
        if p != c {
            for j in 0..n {
                a.swap(p * n + j, c * n + j);
            }
            det = -det;
        }
        det *= a[c * n + c];
        if a[c * n + c] == 0.0 {
            return 0.0;
        }
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for j in c..n {
                a[r * n + j] -= f * a[c * n + j];
            }
        }
    }
    det
}

fn flow_round_trip() -> Outcome {
    let (flow, p) = random_flow(16, 4, 32, 11, 0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = Tensor::<f32>::from_fn(1000, 16, |_, _| StandardNormal.sample(&mut rng));
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (u, _) = flow.forward(&mut tape, &p, zv)?;
    let back = flow.inverse(&p, tape.value(u))?;
    let trip = back.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max) as f64;

    let (flow4, p4) = random_flow(4, 3, 8, 13, 0.4)?;
    let p4 = p4.cast::<f64>();
    let run = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(x.to_vec()));
        let (u, ld) = flow4.forward(&mut tape, &p4, v)?;
        Ok((tape.value(u).data().to_vec(), tape.value(ld).item()))
    };
    let z4: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, ld) = run(&z4)?;
    let h = 1e-6;
    let mut jac = vec![0.0; 16];
    for j in 0..4 {
        let (mut zp, mut zm) = (z4.clone(), z4.clone());
        zp[j] += h;
        zm[j] -= h;
        let (up, um) = (run(&zp)?.0, run(&zm)?.0);
        for i in 0..4 {
            jac[i * 4 + j] = (up[i] - um[i]) / (2.0 * h);
        }
    }
    let ld_err = (determinant(&jac, 4).abs().ln() - ld).abs();
    Ok((trip < 1e-5 && ld_err < 1e-4, format!("round-trip max error {trip:.2e}, log-det error {ld_err:.2e}")))
}

fn kl_sanity() -> Outcome {
    let zero = closed_form_kl(&[0.0; 16], &[1.0; 16]);
    // an identity flow makes the prior a standard normal
    let flow = FlowPrior::new("flow", 4, 1, 2);
    let mut p = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    flow.register(&mut p, &mut Init::new(&mut rng))?;
    let p = p.cast::<f64>();
    let n = 100_000;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut tape = Tape::<f64>::new();
        let muv = tape.constant(Tensor::from_fn(n, 4, |_, j| mu[j]));
        let lsv = tape.constant(Tensor::from_fn(n, 4, |_, j| sigma[j].ln()));
        let eps = tape.constant(Tensor::from_fn(n, 4, |_, _| StandardNormal.sample(&mut rng)));
        let (kl, _) = monte_carlo_kl(&mut tape, &flow, &p, Posterior { mu: muv, log_sigma: lsv }, eps)?;
        let exact = closed_form_kl(&mu, &sigma);
        worst = worst.max((tape.value(kl).item() - exact).abs() / exact);
    }
    Ok((zero.abs() < 1e-7 && worst < 0.02, format!("KL(N(0,1)||N(0,1)) = {zero:e}, worst Monte-Carlo deviation {:.2}%", worst * 100.0)))
}

fn check_prefixes<F>(label: &str, loss: F, p: &Params<f32>, prefixes: &[&str], cfg: &GradCheckConfig, out: &mut Vec<(String, f64)>) -> Result<()>
where
    F: Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>,
{
    let mut p64 = p.cast::<f64>();
    for (name, e) in p64.iter_mut() {
        if !prefixes.iter().any(|pre| name.starts_with(pre)) {
            e.trainable = false;
        }
    }
    let report = grad_check(&loss, &p64, cfg)?;
    out.push((label.to_string(), report.max_rel_error));
    Ok(())
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut results = Vec::new();
    let gc = GradCheckConfig::default();

    let vcfg = VaeConfig {
        latent_dim: 4,
        channels: 8,
        dilations: vec![1, 2],
        flow_steps: 2,
        coupling_hidden: 6,
        sync_window: 3,
        sync_hidden: 6,
        sync_embed: 4,
        audio: crate::audio::AudioEncoderConfig { channels: 4, kernel: 3 },
        ..Default::default()
    };
    let vae = A2mVae::new(VaeShape { config: vcfg, content_dim: 6, pitch_dim: 2 })?;
    let mut vp = vae.init_params(1)?;
    perturb(&mut vp, "vae.flow", &mut rng, 0.3);
    *vp.get_mut(vae::TEMPLATE)? = Tensor::from_fn(1, LANDMARK_DIM, |_, j| (j as f32 * 0.37).sin());
    let t = 9;
    let audio = AudioFeatureSequence::new(
        Tensor::from_fn(t, 6, |_, _| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(t, 2, |_, _| rng.random_range(-1.0..1.0)),
    )?;
    let l = Tensor::<f64>::from_fn(t, LANDMARK_DIM, |_, _| rng.random_range(-1.0..1.0));
    let eps = Tensor::<f64>::from_fn(t, 4, |_, _| rng.random_range(-1.0..1.0));
    let vae_loss = |tape: &mut Tape<f64>, p: &Params<f64>| -> Result<Var> {
        let cond = vae.condition(tape, p, &audio, Mode::Eval)?;
        let lv = tape.constant(l.clone());
        let post = vae.encode(tape, p, lv, cond)?;
        let e = tape.constant(eps.clone());
        let (kl, z) = monte_carlo_kl(tape, &vae.flow, p, post, e)?;
        let out = vae.decode(tape, p, z, cond)?;
        let r = reconstruction(tape, lv, out);
        let content = tape.constant(audio.content.cast());
        let s = vae.sync.score_pairs(tape, p, content, out, &[(0, 0), (3, 1), (6, 6), (2, 5)], false)?;
        let sl = sync_loss(tape, s, &[1.0, 0.0, 1.0, 0.0])?;
        let sum = tape.add(r, kl);
        Ok(tape.add(sum, sl))
    };
    for (label, prefix) in [
        ("audio encoders", "vae.audio"),
        ("VAE encoder", "vae.enc"),
        ("VAE decoder", "vae.dec"),
        ("flow prior", "vae.flow"),
        ("sync scorer", "vae.sync"),
    ] {
        check_prefixes(label, vae_loss, &vp, &[prefix], &gc, &mut results)?;
    }

    let lm = Ldm::new(LdmConfig { hidden: 8, embed_dim: 3, heads: 2, window: 4, ff_hidden: 6, dropout: 0.0, ..Default::default() })?;
    let mut lp = lm.init_params(3)?;
    *lp.get_mut("ldm.out.w")? = Tensor::from_fn(8, LANDMARK_DIM, |_, _| rng.random_range(-0.5..0.5));
    let x = Tensor::<f64>::from_fn(8, LANDMARK_DIM, |_, _| rng.random_range(-1.0..1.0));
    let y = Tensor::<f64>::from_fn(8, LANDMARK_DIM, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<EmotionLabel> = (0..8).map(|i| EmotionLabel::ALL[(i / 4 + 3) % 8]).collect();
    let ldm_fn = |tape: &mut Tape<f64>, p: &Params<f64>| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let d = lm.forward::<f64, ChaCha8Rng>(tape, p, xv, &labels, Mode::Train, None)?;
        let pred = tape.add(xv, d);
        ldm_loss(tape, pred, yv)
    };
    check_prefixes("LDM", ldm_fn, &lp, &["ldm"], &GradCheckConfig { min_coords: 200, ..gc.clone() }, &mut results)?;

    let ncfg = NerfConfig {
        grid: nerf::HashGridConfig { levels: 2, features: 2, log2_table: 4, base_resolution: 2, finest_resolution: 6 },
        width: 8,
        geo_features: 3,
        view_frequencies: 2,
        attention_channels: 4,
        blendshape_dim: 2,
        samples: 6,
        ..Default::default()
    };
    let nm = TriPlaneNerf::new(ncfg)?;
    let mut np = nm.init_params(6)?;
    perturb(&mut np, "nerf.grid", &mut rng, 0.5);
    perturb(&mut np, "nerf.attn", &mut rng, 0.5);
    let conds: Vec<FrameCondition> = (0..2)
        .map(|_| FrameCondition {
            landmarks: (0..LANDMARK_DIM).map(|_| rng.random_range(-0.5..0.5)).collect(),
            blendshapes: (0..2).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let rays: Vec<(usize, Ray)> = (0..4)
        .map(|i| {
            let d = crate::camera::normalize([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0]);
            Ray::through_cube([0.0, 0.0, -3.0], d, 6).map(|r| (i % 2, r))
        })
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Invalid("test ray misses the unit cube".into()))?;
    let weights = Tensor::<f64>::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
    let render_fn = |tape: &mut Tape<f64>, p: &Params<f64>| -> Result<Var> {
        let (rgb, _) = nm.render_rays::<f64, ChaCha8Rng>(tape, p, &rays, &conds, None)?;
        let w = tape.constant(weights.clone());
        let m = tape.mul(rgb, w);
        Ok(tape.sum(m))
    };
    // small step keeps ReLU kinks out of the stencil
    let ngc = GradCheckConfig { min_coords: 150, step: 1e-5, ..gc.clone() };
    check_prefixes("landmark attention", render_fn, &np, &["nerf.attn"], &ngc, &mut results)?;
    check_prefixes("field network", render_fn, &np, &["nerf.density", "nerf.color", "nerf.cond"], &ngc, &mut results)?;
    check_prefixes("hash features via render_ray", render_fn, &np, &["nerf.grid"], &ngc, &mut results)?;

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(l, e)| format!("{l} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst < 1e-4, format!("double precision, max relative error {worst:.2e} ({detail})")))
}

fn volume_rendering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let bg = [0.1, 0.2, 0.3];
    let c = [0.9, 0.4, 0.6];
    let (sigma, length) = (1.7f64, 2.0f64);
    let homogeneous = |n: usize| composite(&vec![sigma; n], &vec![c; n], &vec![length / n as f64; n], bg).rgb;
    let tr = (-sigma * length).exp();
    let exact: Vec<f64> = (0..3).map(|k| c[k] * (1.0 - tr) + bg[k] * tr).collect();
    let (r256, r2560) = (homogeneous(256), homogeneous(2560));
    let closed = (0..3).map(|k| (r256[k] - exact[k]).abs()).fold(0.0, f64::max);
    let refine = (0..3).map(|k| (r256[k] - r2560[k]).abs()).fold(0.0, f64::max);

    let mut identity = 0.0f64;
    let mut insertion = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(2..48);
        let sig: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..20.0) }).collect();
        let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.2)).collect();
        let out = composite(&sig, &col, &del, bg);
        identity = identity.max((out.weights.iter().sum::<f64>() + out.t_final - 1.0).abs());
        let at = rng.random_range(0..=n);
        let (mut s2, mut c2, mut d2) = (sig.clone(), col.clone(), del.clone());
        s2.insert(at, 0.0);
        c2.insert(at, [rng.random(), rng.random(), rng.random()]);
        d2.insert(at, rng.random_range(0.001..0.2));
        let ins = composite(&s2, &c2, &d2, bg);
        insertion = insertion.max((0..3).map(|k| (ins.rgb[k] - out.rgb[k]).abs()).fold(0.0, f64::max));
    }
    Ok((
        closed < 1e-3 && refine < 1e-3 && identity < 1e-6 && insertion < 1e-6,
        format!(
            "closed form error {closed:.1e}, 256 vs 2560 samples {refine:.1e}, weight identity {identity:.1e}, zero-density insertion {insertion:.1e}"
        ),
    ))
}

fn distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

fn deformation_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let n = Tensor::<f32>::from_fn(6, LANDMARK_DIM, |_, _| rng.random_range(0.0..1.0));
    let d = Tensor::<f32>::from_fn(6, LANDMARK_DIM, |_, _| rng.random_range(-0.1..0.1));
    let identity = apply_deformation(&n, &d, 0.0)? == n;
    let unit = distance(&d, &Tensor::zeros(6, LANDMARK_DIM));
    let mut lin = 0.0f64;
    for delta in [0.1, 0.15, 0.5, 1.0, 2.0] {
        let e = apply_deformation(&n, &d, delta)?;
        lin = lin.max((distance(&e, &n) / (delta * unit) - 1.0).abs());
    }
    let shipped = PipelineConfig::load_str(DEFAULT_CONFIG_JSON)?;
    let ok = identity && lin < 1e-5 && shipped.delta == 0.15 && ldm::DELTA_SWEEP.contains(&shipped.delta);
    Ok((ok, format!("delta=0 identity {identity}, worst relative non-linearity {lin:.1e}, shipped delta {}", shipped.delta)))
}

fn ldm_oracle_recovery() -> Outcome {
    let s = Synthesizer::new(SynthConfig::default())?;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, e) in EmotionLabel::ALL.iter().enumerate() {
        for k in 0..2 {
            train.push(s.generate_clip(100 + i as u64 * 10 + k, *e, 32, 32)?);
        }
        held.push(s.generate_clip(900 + i as u64, *e, 32, 32)?);
    }
    let tp = synthetic_pairs(&s, &train, 0.002, 1)?;
    let hp = synthetic_pairs(&s, &held, 0.0, 2)?;
    let mean_norm = EmotionLabel::ALL
        .iter()
        .filter(|e| **e != EmotionLabel::Neutral)
        .map(|e| s.oracle_displacement(*e).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / 7.0;
    let fit = |pairs: &[ldm::LdmSequence]| -> Result<(Ldm, Params<f32>)> {
        let m = Ldm::new(LdmConfig::default())?;
        let mut store = ParameterStore::new(m.init_params(0)?);
        train_ldm(&m, &mut store, pairs, &ldm::LdmTrainConfig::default(), &mut LossCurve::default())?;
        Ok((m, store.params))
    };
    let (m, p) = fit(&tp)?;
    let err = displacement_error(&m, &p, &hp)? / mean_norm;
    let (mp, pp) = fit(&permute_labels(&tp, 5))?;
    let perm = displacement_error(&mp, &pp, &hp)? / mean_norm;
    let neutral = hp.iter().find(|q| q.emotion == EmotionLabel::Neutral).ok_or_else(|| Error::Invalid("no neutral clip".into()))?;
    let d = m.predict(&p, &neutral.neutral, EmotionLabel::Neutral)?;
    let nn = (0..d.rows()).map(|r| d.row_slice(r).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()).sum::<f64>()
        / d.rows() as f64
        / mean_norm;
    Ok((
        err < 0.05 && perm >= 3.0 * err && nn < 0.10,
        format!(
            "held-out error {:.2}% of oracle norm, permuted labels {:.2}% ({:.1}x), neutral displacement {:.2}%",
            err * 100.0,
            perm * 100.0,
            perm / err,
            nn * 100.0
        ),
    ))
}

fn vae_overfit() -> Outcome {
    let s = Synthesizer::new(SynthConfig::default())?;
    let clip = s.generate_clip(1, EmotionLabel::Happy, 96, 32)?;
    let held = s.generate_clip(2, EmotionLabel::Happy, 64, 32)?;
    let m = A2mVae::new(VaeShape { config: VaeConfig::default(), content_dim: clip.audio.content.cols(), pitch_dim: clip.audio.pitch.cols() })?;
    let mut store = ParameterStore::new(m.init_params(0)?);
    // the template is the only data-dependent initial value
    *store.params.get_mut(vae::TEMPLATE)? = vae::mean_landmarks(std::slice::from_ref(&clip));
    let untrained = sync_eval(&m.sync, &store.params, &held.audio.content, &held.landmarks)?;
    let cfg = vae::VaeTrainConfig { steps: 2000, ..Default::default() };
    let mut curve = LossCurve::default();
    vae::train_vae(&m, &mut store, std::slice::from_ref(&clip), &cfg, &mut curve)?;
    let at = |s: u64| curve.at(s, "recon_mse").ok_or_else(|| Error::Invalid(format!("no reconstruction record at step {s}")));
    let ratio = at(1999)? / at(50)?;
    let trained = sync_eval(&m.sync, &store.params, &held.audio.content, &held.landmarks)?;
    Ok((
        ratio <= 0.10 && trained > 0.3 && untrained.abs() < 0.1,
        format!("reconstruction MSE ratio {:.2}%, trained sync gap {trained:.3}, untrained gap {untrained:.3}", ratio * 100.0),
    ))
}

fn nerf_overfit() -> Outcome {
    let s = Synthesizer::new(SynthConfig::default())?;
    let clip = NerfClip::from_clip(&s.generate_clip(5, EmotionLabel::Happy, 16, 64)?)?;
    let backend = RandomConvPerceptual::new(0);
    let run = |conditioned: bool, eval_every: usize| -> Result<nerf::NerfTrainReport> {
        let model = TriPlaneNerf::new(NerfConfig { landmark_conditioning: conditioned, ..Default::default() })?;
        let mut store = ParameterStore::new(model.init_params(0)?);
        let cfg = nerf::NerfTrainConfig { steps: NERF_STEPS, fine_start: NERF_STEPS, eval_every, target_psnr: None, ..Default::default() };
        nerf::train_nerf(&model, &mut store, &clip, &cfg, Some(&backend), &mut LossCurve::default())
    };
    let full = run(true, 500)?;
    let reached = full.psnr_curve.iter().find(|(_, p)| *p >= 30.0).map(|(s, _)| *s);
    let ablated = run(false, NERF_STEPS)?;
    Ok((
        reached.is_some() && ablated.final_psnr < full.final_psnr,
        format!(
            "30 dB reached at step {}, final {:.2} dB with landmarks vs {:.2} dB with zeroed landmarks after {NERF_STEPS} steps",
            reached.map(|s| s.to_string()).unwrap_or_else(|| "never".into()),
            full.final_psnr,
            ablated.final_psnr
        ),
    ))
}

/// Direct windowed SSIM with a 2-D Gaussian, used as a reference.
pub fn reference_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let (w, h) = (a.width as usize, a.height as usize);
    let ga = a.luminance();
    let gb = b.luminance();
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let q = kv / total;
                    let (pa, pb) = (ga[(y0 + i) * w + x0 + j], gb[(y0 + i) * w + x0 + j]);
                    ma += q * pa;
                    mb += q * pb;
                    saa += q * pa * pa;
                    sbb += q * pb * pb;
                    sab += q * pa * pb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut image = |w: u32, h: u32| RgbImage::from_data(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect());
    let a = image(32, 24)?;
    let p = psnr(&a, &a)?;
    let s = ssim(&a, &a)?;
    let lm = Tensor::<f32>::from_fn(5, LANDMARK_DIM, |i, j| ((i * 7 + j) as f32 * 0.13).sin());
    let (m0, f0) = (lmd(&lm, &lm, Region::Mouth)?, lmd(&lm, &lm, Region::Face)?);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (w, h) = (16 + i as u32, 20 + (i as u32 * 3) % 11);
        let x = image(w, h)?;
        let mut y = image(w, h)?;
        // correlated pairs exercise the structure term
        for (yv, xv) in y.data.iter_mut().zip(&x.data) {
            *yv = 0.7 * xv + 0.3 * *yv;
        }
        worst = worst.max((ssim(&x, &y)? - reference_ssim(&x, &y)).abs());
    }
    let ok = p == PSNR_CAP && (s - 1.0).abs() < 1e-9 && m0 == 0.0 && f0 == 0.0 && worst < 1e-6;
    Ok((ok, format!("identical: {p} dB, SSIM {s:.9}, LMD {m0}/{f0}; SSIM vs reference max deviation {worst:.1e}")))
}

fn toy_config(root: &Path) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    cfg.paths = pipeline::Paths {
        dataset: root.join("dataset"),
        vae: root.join("vae"),
        ldm: root.join("ldm"),
        nerf: root.join("nerf"),
        output: root.join("out"),
    };
    cfg.data.clips_per_emotion = 1;
    cfg.data.frames = 12;
    cfg.data.resolution = 32;
    cfg.vae = VaeConfig { latent_dim: 4, channels: 16, dilations: vec![1, 2], coupling_hidden: 16, ..Default::default() };
    cfg.vae_train.steps = 30;
    cfg.ldm = LdmConfig { hidden: 32, ff_hidden: 32, window: 4, ..Default::default() };
    cfg.ldm_train.steps = 30;
    cfg.ldm_train.batch_windows = 4;
    cfg.nerf = NerfConfig {
        grid: nerf::HashGridConfig { levels: 4, features: 2, log2_table: 10, base_resolution: 4, finest_resolution: 32 },
        width: 16,
        samples: 12,
        ..Default::default()
    };
    cfg.nerf_train = nerf::NerfTrainConfig { steps: 40, fine_start: 40, rays_per_batch: 128, eval_every: 40, ..Default::default() };
    cfg.validate()?;
    Ok(cfg)
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let mut cfg = toy_config(tmp.path())?;
    pipeline::synth_data(&cfg)?;
    pipeline::train_vae_stage(&cfg)?;
    pipeline::train_ldm_stage(&cfg)?;
    pipeline::train_nerf_stage(&cfg)?;
    let first = pipeline::infer(&cfg)?;
    cfg.paths.output = tmp.path().join("out2");
    let second = pipeline::infer(&cfg)?;
    let mut identical = true;
    for t in 0..first.frames.len() {
        let name = pipeline::output_frame_name(t);
        identical &= same_bytes(&first.dir.join("frames").join(&name), &second.dir.join("frames").join(&name))?;
    }
    for f in [pipeline::NEUTRAL_CSV, pipeline::EMOTIONAL_CSV] {
        identical &= same_bytes(&first.dir.join(f), &second.dir.join(f))?;
    }
    let report = pipeline::ablate_delta(&cfg, &cfg.ablation.deltas)?;
    let sweep: Vec<f64> = report.rows.iter().map(|r| r.delta).collect();
    let zero_dir = cfg.paths.output.join("delta_0");
    let zero_identity = same_bytes(&zero_dir.join(pipeline::NEUTRAL_CSV), &zero_dir.join(pipeline::EMOTIONAL_CSV))?;
    Ok((
        identical && sweep == ldm::DELTA_SWEEP && zero_identity,
        format!(
            "{} frames byte-identical across runs: {identical}; sweep rows {sweep:?}; delta=0 landmarks equal neutral: {zero_identity}",
            first.frames.len()
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors() {
        assert_eq!(parse_selector("full").unwrap().len(), 10);
        assert_eq!(parse_selector("c4").unwrap(), vec![4]);
        assert_eq!(parse_selector("e2e").unwrap(), vec![10]);
        assert!(matches!(parse_selector("bogus"), Err(Error::Config(_))));
        assert!(parse_selector("11").is_err());
    }

    #[test]
    fn failures_are_entries() {
        let r = run_criterion(5);
        assert!(r.line().starts_with("[PASS]"), "{}", r.line());
    }

    #[test]
    fn reference_determinant() {
        assert!((determinant(&[2.0, 1.0, 1.0, 3.0], 2) - 5.0).abs() < 1e-12);
        assert!((determinant(&[0.0, 1.0, 1.0, 0.0], 2) + 1.0).abs() < 1e-12);
    }
}
