//! SSIM values frozen from an independent implementation (scikit-image
//! `structural_similarity`, Gaussian σ = 1.5, population covariance,
//! data range 1). Gray fixtures are replicated over the three channels.

use sgic::image::RasterImage;
use sgic::metrics::{ms_ssim, psnr, ssim};

fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> RasterImage {
    RasterImage::from_fn(w, h, |x, y| {
        let v = f(x, y);
        [v, v, v]
    })
}

const TOL: f64 = 1e-9;

#[test]
fn checkerboard_against_its_inverse() {
    let x = gray(24, 24, |x, y| ((x + y) % 2) as f64);
    let inv = gray(24, 24, |x, y| 1.0 - ((x + y) % 2) as f64);
    let v = ssim(&x, &inv).unwrap();
    assert!((v - -0.996_406_468_356_956_9).abs() < TOL, "{v}");
}

#[test]
fn ramp_against_its_square() {
    let g = |x: usize, y: usize| (x + 2 * y) as f64 / 93.0;
    let a = gray(32, 32, g);
    let b = gray(32, 32, |x, y| g(x, y).powi(2));
    let v = ssim(&a, &b).unwrap();
    assert!((v - 0.747_211_964_492_868_4).abs() < TOL, "{v}");
}

#[test]
fn shifted_block_pattern() {
    let c = |x: usize, y: usize| (((x / 4) + (y / 4)) % 2) as f64 * 0.8 + 0.1;
    let a = gray(32, 32, c);
    let b = gray(32, 32, |x, y| c((x + 30) % 32, y));
    let v = ssim(&a, &b).unwrap();
    assert!((v - 0.003_151_999_720_868_484).abs() < TOL, "{v}");
}

#[test]
fn identities() {
    let a = gray(64, 48, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert_eq!(ms_ssim(&a, &a).unwrap().value, 1.0);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}
