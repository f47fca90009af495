//! Finite-difference validation of the warping-loss gradient and warp
//! recovery on synthetic pairs.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use deblur_forge_core::image::Image;
use deblur_forge_core::optim::{check_gradient, OptimProblem};
use deblur_forge_core::warp::{
    feature_count, fit_warp, grid_mapping_error, poly_features, warp_image, warping_loss,
    WarpMatrix,
};

fn smooth_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    // sum of a few random low-frequency waves, values around [0, 1]
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.25),
            )
        })
        .collect();
    Image::from_fn(w, h, |i, j| {
        0.5 + waves
            .iter()
            .map(|&(fy, fx, ph, amp)| amp * (fy * i as f64 + fx * j as f64 + ph).sin())
            .sum::<f64>()
            / 2.0
    })
}

fn random_perturbed_warp(rng: &mut Xoshiro256PlusPlus, degree: usize, scale: f64) -> WarpMatrix {
    let k = feature_count(degree);
    let mut coeffs = WarpMatrix::identity(degree).coeffs().to_vec();
    for c in coeffs.iter_mut().take(2 * k) {
        *c += rng.random_range(-scale..scale);
    }
    WarpMatrix::from_coeffs(degree, coeffs).unwrap()
}

#[test]
fn warping_loss_gradient_passes_finite_differences() {
    let sharp = smooth_image(24, 20, 11);
    let blurry = smooth_image(24, 20, 12);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let degree = 3;
    let k = feature_count(degree);
    let problem = OptimProblem::new(2 * k, |params: &[f64]| {
        let w = WarpMatrix::from_coeffs(degree, params.to_vec()).unwrap();
        warping_loss(&w, &blurry, &sharp).unwrap()
    });
    for trial in 0..10 {
        let w = random_perturbed_warp(&mut rng, degree, 0.05);
        let err = check_gradient(&problem, w.coeffs(), 1e-5);
        assert!(err < 1e-4, "trial {trial}: rel error {err}");
    }
}

/// Invert the polynomial map pointwise with Newton iterations so a pair
/// can be synthesized whose true aligning warp is exactly `w`.
fn warp_inverse_resample(img: &Image, w: &WarpMatrix) -> Image {
    let (m, n) = img.dims();
    Image::from_fn(n, m, |i, j| {
        let (mut y, mut x) = (i as f64, j as f64);
        for _ in 0..8 {
            let (fy, fx) = w.map_point(y, x, (m, n));
            let h = 1e-4;
            let (fy_y, fx_y) = w.map_point(y + h, x, (m, n));
            let (fy_x, fx_x) = w.map_point(y, x + h, (m, n));
            let j00 = (fy_y - fy) / h;
            let j01 = (fy_x - fy) / h;
            let j10 = (fx_y - fx) / h;
            let j11 = (fx_x - fx) / h;
            let det = j00 * j11 - j01 * j10;
            let ry = fy - i as f64;
            let rx = fx - j as f64;
            y -= (j11 * ry - j01 * rx) / det;
            x -= (-j10 * ry + j00 * rx) / det;
        }
        img.sample_bicubic(y, x)
    })
}

#[test]
fn fit_warp_recovers_synthetic_warp() {
    let size = 96;
    let sharp = smooth_image(size, size, 21);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(22);
    let w_true = random_perturbed_warp(&mut rng, 3, 0.03);
    // construct the blurry side so that warping it by w_true reproduces
    // the sharp image: blurry = sharp composed with the inverse map
    let blurry = warp_inverse_resample(&sharp, &w_true);

    let (w_fit, report) = fit_warp(&blurry, &sharp, 3, None).unwrap();
    assert!(report.final_loss <= report.loss_history[0]);
    let err = grid_mapping_error(&w_fit, &w_true, (size, size), 10);
    assert!(err < 0.1, "mean grid mapping error {err} px");
}

#[test]
fn fit_warp_on_identical_images_stays_at_identity() {
    let img = smooth_image(64, 64, 31);
    let (w_fit, _) = fit_warp(&img, &img, 3, None).unwrap();
    let err = grid_mapping_error(&w_fit, &WarpMatrix::identity(3), (64, 64), 10);
    assert!(err < 0.05, "displacement {err} px");
}

#[test]
fn poly_features_at_normalized_corners() {
    // sanity anchor for the feature ordering used by the file format
    let f = poly_features(-1.0, 1.0, 3);
    assert_eq!(f, vec![1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
}

#[test]
fn warped_pair_loss_drops_after_fitting() {
    let size = 64;
    let sharp = smooth_image(size, size, 41);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(42);
    let w_true = random_perturbed_warp(&mut rng, 3, 0.02);
    let blurry = warp_inverse_resample(&sharp, &w_true);
    let (initial, _) = warping_loss(&WarpMatrix::identity(3), &blurry, &sharp).unwrap();
    let (w_fit, report) = fit_warp(&blurry, &sharp, 3, None).unwrap();
    assert!(report.final_loss < initial);
    // fitted warp actually aligns the images
    let aligned = warp_image(&blurry, &w_fit);
    let (post, _) = warping_loss(&WarpMatrix::identity(3), &aligned, &sharp).unwrap();
    assert!(post < 0.05 * initial, "post {post} vs initial {initial}");
}
