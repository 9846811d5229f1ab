//! Image and landmark evaluation metrics.
//!
//! Landmark distances are in head-frame units. Mouth distances use points
//! 48–67 of the 68-point layout.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::engine::{Params, Tape, Tensor};
use crate::error::{Error, Result};
use crate::face::{LANDMARK_DIM, MOUTH_POINTS, NUM_POINTS};
use crate::frame::RgbImage;
use crate::vae::{aligned_pairs, shifted_pairs, SyncScorer};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Fewest windows `sync_eval` accepts.
pub const MIN_SYNC_WINDOWS: usize = 10;

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) || a.data.len() != b.data.len() {
        return Err(Error::ShapeMismatch {
            what: "image pair".into(),
            expected: format!("{}x{}", b.width, b.height),
            found: format!("{}x{}", a.width, a.height),
        });
    }
    Ok(())
}

pub fn mse(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    same_size(pred, gt)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred.data.iter().zip(&gt.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)`, or [`PSNR_CAP`] when the MSE is below `1e-10`.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of a `w × h` plane.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows of the
/// luminance images, dynamic range 1.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    same_size(pred, gt)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!("image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let x = pred.luminance();
    let y = gt.luminance();
    let k = gaussian_kernel();
    let f = |v: &[f64]| filter_valid(v, w, h, &k);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, my) = (f(&x), f(&y));
    let (sxx, syy, sxy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Mouth,
    Face,
}

impl Region {
    pub fn points(self) -> std::ops::Range<usize> {
        match self {
            Region::Mouth => MOUTH_POINTS,
            Region::Face => 0..NUM_POINTS,
        }
    }
}

/// Per-frame mean point distance over the region.
pub fn lmd_per_frame(pred: &Tensor<f32>, gt: &Tensor<f32>, region: Region) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() || pred.cols() != LANDMARK_DIM {
        return Err(Error::ShapeMismatch {
            what: "landmark sequences".into(),
            expected: format!("{} x {LANDMARK_DIM}", gt.rows()),
            found: format!("{} x {}", pred.rows(), pred.cols()),
        });
    }
    let pts = region.points();
    let count = pts.len() as f64;
    Ok((0..pred.rows())
        .map(|t| {
            let (a, b) = (pred.row_slice(t), gt.row_slice(t));
            pts.clone()
                .map(|p| (0..3).map(|c| (a[p * 3 + c] as f64 - b[p * 3 + c] as f64).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / count
        })
        .collect())
}

/// Mean over frames of [`lmd_per_frame`].
pub fn lmd(pred: &Tensor<f32>, gt: &Tensor<f32>, region: Region) -> Result<f64> {
    let v = lmd_per_frame(pred, gt, region)?;
    Ok(mean(&v))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean aligned score minus mean shifted score of a sync scorer over one
/// sequence. Shifted windows are offset by half the sequence length.
pub fn sync_eval(scorer: &SyncScorer, params: &Params<f32>, audio: &Tensor<f32>, landmarks: &Tensor<f32>) -> Result<f64> {
    if audio.rows() != landmarks.rows() {
        return Err(Error::ShapeMismatch {
            what: "sync_eval frames".into(),
            expected: audio.rows().to_string(),
            found: landmarks.rows().to_string(),
        });
    }
    let pos = aligned_pairs(audio.rows(), scorer.window);
    let neg = shifted_pairs::<rand_chacha::ChaCha8Rng>(audio.rows(), scorer.window, None);
    if pos.len() < MIN_SYNC_WINDOWS || neg.len() < MIN_SYNC_WINDOWS {
        return Err(Error::Invalid(format!(
            "sync_eval needs at least {MIN_SYNC_WINDOWS} aligned and shifted windows, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(audio.clone());
    let l = tape.constant(landmarks.clone());
    let sp = scorer.score_pairs(&mut tape, params, a, l, &pos, true)?;
    let sn = scorer.score_pairs(&mut tape, params, a, l, &neg, true)?;
    let m = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
    Ok(m(tape.value(sp)) - m(tape.value(sn)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

impl MetricSeries {
    pub fn new(per_frame: Vec<f64>) -> Self {
        let mean = mean(&per_frame);
        Self { per_frame, mean }
    }
}

/// Per-frame and aggregate metrics for one rendered clip.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip: String,
    pub method: String,
    pub psnr: MetricSeries,
    pub ssim: MetricSeries,
    pub m_lmd: MetricSeries,
    pub f_lmd: MetricSeries,
    /// Scores merged in from external scorers, keyed by name.
    #[serde(default)]
    pub external: IndexMap<String, MetricSeries>,
}

impl MetricReport {
    pub fn compute(
        clip: &str,
        method: &str,
        frames: &[RgbImage],
        gt_frames: &[RgbImage],
        landmarks: &Tensor<f32>,
        gt_landmarks: &Tensor<f32>,
    ) -> Result<Self> {
        if frames.len() != gt_frames.len() {
            return Err(Error::ShapeMismatch {
                what: "frame count".into(),
                expected: gt_frames.len().to_string(),
                found: frames.len().to_string(),
            });
        }
        let psnr_v = frames.iter().zip(gt_frames).map(|(a, b)| psnr(a, b)).collect::<Result<Vec<_>>>()?;
        let ssim_v = frames.iter().zip(gt_frames).map(|(a, b)| ssim(a, b)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clip: clip.into(),
            method: method.into(),
            psnr: MetricSeries::new(psnr_v),
            ssim: MetricSeries::new(ssim_v),
            m_lmd: MetricSeries::new(lmd_per_frame(landmarks, gt_landmarks, Region::Mouth)?),
            f_lmd: MetricSeries::new(lmd_per_frame(landmarks, gt_landmarks, Region::Face)?),
            external: IndexMap::new(),
        })
    }

    /// Adds per-frame values from an external scorer (for example an emotion
    /// classifier).
    pub fn merge_external(&mut self, name: &str, per_frame: Vec<f64>) -> Result<()> {
        if per_frame.len() != self.psnr.per_frame.len() {
            return Err(Error::ShapeMismatch {
                what: format!("external metric {name}"),
                expected: self.psnr.per_frame.len().to_string(),
                found: per_frame.len().to_string(),
            });
        }
        self.external.insert(name.into(), MetricSeries::new(per_frame));
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "clip,method,psnr,ssim,m_lmd,f_lmd";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.clip, self.method, self.psnr.mean, self.ssim.mean, self.m_lmd.mean, self.f_lmd.mean)
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("metrics.csv"), format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_identities() {
        let a = noise(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = RgbImage::filled(8, 8, [0.0; 3]);
        let o = RgbImage::filled(8, 8, [1.0; 3]);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        let b = noise(2, 16, 16);
        let m: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
        assert!(psnr(&a, &noise(1, 8, 8)).is_err());
    }

    #[test]
    fn ssim_identities_and_sign() {
        let a = noise(3, 24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        // checkerboard of 0.1 / 0.9 against its negative
        let mut c = RgbImage::filled(24, 24, [0.0; 3]);
        for y in 0..24 {
            for x in 0..24 {
                let v = if (x + y) % 2 == 0 { 0.1 } else { 0.9 };
                c.set_pixel(x, y, [v; 3]);
            }
        }
        let mut n = c.clone();
        n.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&c, &n).unwrap() < 0.0);
        assert!(ssim(&noise(1, 10, 10), &noise(2, 10, 10)).is_err());
    }

    #[test]
    fn lmd_shift_and_region_ratio() {
        let gt = Tensor::from_fn(3, LANDMARK_DIM, |t, j| (t * 7 + j) as f32 * 0.01);
        assert_eq!(lmd(&gt, &gt, Region::Mouth).unwrap(), 0.0);
        let shifted = gt.map(|v| v + 1.0);
        for r in [Region::Mouth, Region::Face] {
            assert!((lmd(&shifted, &gt, r).unwrap() - 3f64.sqrt()).abs() < 1e-5);
        }
        let mut mouth = gt.clone();
        for t in 0..3 {
            for p in MOUTH_POINTS {
                mouth.set(t, p * 3, gt.get(t, p * 3) + 0.5);
            }
        }
        let m = lmd(&mouth, &gt, Region::Mouth).unwrap();
        let f = lmd(&mouth, &gt, Region::Face).unwrap();
        assert!((f - m * 20.0 / 68.0).abs() < 1e-6);
        assert_eq!(lmd(&mouth, &gt, Region::Face).unwrap(), lmd(&gt, &mouth, Region::Face).unwrap());
    }

    #[test]
    fn report_aggregates_are_means() {
        let frames = vec![noise(1, 16, 16), noise(2, 16, 16)];
        let gt = vec![noise(1, 16, 16), noise(3, 16, 16)];
        let lm = Tensor::zeros(2, LANDMARK_DIM);
        let r = MetricReport::compute("c", "m", &frames, &gt, &lm, &lm).unwrap();
        assert_eq!(r.psnr.per_frame[0], PSNR_CAP);
        assert!((r.psnr.mean - (r.psnr.per_frame[0] + r.psnr.per_frame[1]) / 2.0).abs() < 1e-12);
        assert_eq!(r.csv_row().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
    }
}
