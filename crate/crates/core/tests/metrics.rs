use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realtalk::engine::Tensor;
use realtalk::face::LANDMARK_DIM;
use realtalk::frame::RgbImage;
use realtalk::metrics::{lmd, lmd_per_frame, psnr, ssim, Region, PSNR_CAP};

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_data(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Brute-force SSIM: per window, direct weighted moments with a 2D Gaussian.
fn naive_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let gray = |im: &RgbImage| -> Vec<f64> {
        im.data.chunks(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    };
    let (x, y) = (gray(a), gray(b));
    let (w, h) = (a.width as usize, a.height as usize);
    let mut weights = Vec::with_capacity(121);
    for i in 0..11 {
        for j in 0..11 {
            let r2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / 4.5;
            weights.push((-r2).exp());
        }
    }
    let z: f64 = weights.iter().sum();
    let mut acc = Vec::new();
    for oy in 0..h - 10 {
        for ox in 0..w - 10 {
            let idx = |i: usize, j: usize| (oy + i) * w + ox + j;
            let wsum = |f: &dyn Fn(usize) -> f64| -> f64 {
                (0..121).map(|k| weights[k] / z * f(idx(k / 11, k % 11))).sum()
            };
            let mx = wsum(&|p| x[p]);
            let my = wsum(&|p| y[p]);
            let vx = wsum(&|p| (x[p] - mx).powi(2));
            let vy = wsum(&|p| (y[p] - my).powi(2));
            let cov = wsum(&|p| (x[p] - mx) * (y[p] - my));
            let (c1, c2) = (1e-4, 9e-4);
            acc.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    acc.iter().sum::<f64>() / acc.len() as f64
}

#[test]
fn ssim_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..20u32 {
        let (w, h) = (11 + i * 2, 13 + (i * 5) % 17);
        let a = random_image(&mut rng, w, h);
        let t: f32 = rng.random_range(0.0..1.0);
        let mut b = random_image(&mut rng, w, h);
        for (bv, av) in b.data.iter_mut().zip(&a.data) {
            *bv = t * *av + (1.0 - t) * *bv;
        }
        let got = ssim(&a, &b).unwrap();
        let want = naive_ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "{w}x{h}: {got} vs {want}");
    }
}

#[test]
fn ssim_identity_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_image(&mut rng, 24, 24);
    let b = random_image(&mut rng, 24, 24);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let s = ssim(&a, &b).unwrap();
    assert!(s < 0.5 && s > -1.0);
    assert!(ssim(&random_image(&mut rng, 10, 30), &random_image(&mut rng, 10, 30)).is_err());
}

#[test]
fn psnr_of_uniform_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = RgbImage::filled(64, 64, [0.5, 0.5, 0.5]);
    let amp = 0.1f32;
    let mut b = a.clone();
    for v in &mut b.data {
        *v += rng.random_range(-amp..amp);
    }
    // uniform on [-a, a] has variance a²/3
    let want = 10.0 * (3.0 / (amp as f64).powi(2)).log10();
    let got = psnr(&b, &a).unwrap();
    assert!((got - want).abs() < 0.1, "{got} vs {want}");
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let black = RgbImage::filled(8, 8, [0.0; 3]);
    let white = RgbImage::filled(8, 8, [1.0; 3]);
    assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
    assert!(psnr(&black, &RgbImage::filled(8, 9, [0.0; 3])).is_err());
}

fn random_landmarks(rng: &mut ChaCha8Rng, frames: usize) -> Tensor<f32> {
    Tensor::new(frames, LANDMARK_DIM, (0..frames * LANDMARK_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn lmd_symmetric_and_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_landmarks(&mut rng, 6);
    let b = random_landmarks(&mut rng, 6);
    for region in [Region::Mouth, Region::Face] {
        let ab = lmd(&a, &b, region).unwrap();
        assert!((ab - lmd(&b, &a, region).unwrap()).abs() < 1e-12);
        assert_eq!(lmd(&a, &a, region).unwrap(), 0.0);
        let shift = [0.25f32, -0.5, 0.125];
        let move_all = |t: &Tensor<f32>| {
            let mut t = t.clone();
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v += shift[k % 3];
            }
            t
        };
        assert!((lmd(&move_all(&a), &move_all(&b), region).unwrap() - ab).abs() < 1e-5);
    }
}

#[test]
fn lmd_counts_only_the_region() {
    let a = Tensor::<f32>::zeros(2, LANDMARK_DIM);
    let mut b = a.clone();
    // frame 0 only: point 10 (outside the mouth) moves by 3-4-0, mouth point 50 by 0-0-2
    b.data_mut()[10 * 3] = 3.0;
    b.data_mut()[10 * 3 + 1] = 4.0;
    b.data_mut()[50 * 3 + 2] = 2.0;
    let mouth = lmd_per_frame(&b, &a, Region::Mouth).unwrap();
    assert!((mouth[0] - 2.0 / 20.0).abs() < 1e-12);
    assert_eq!(mouth[1], 0.0);
    let face = lmd(&b, &a, Region::Face).unwrap();
    assert!((face - 7.0 / 68.0 / 2.0).abs() < 1e-12);
    assert!(lmd(&a, &Tensor::zeros(3, LANDMARK_DIM), Region::Face).is_err());
}
