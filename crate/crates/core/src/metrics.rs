//! PSNR, SSIM and ROI statistics used to score reconstructions.

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;

/// PSNR result; `Identical` marks a zero-MSE comparison, which has no
/// finite decibel value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsnrValue {
    Identical,
    Db(f64),
}

impl PsnrValue {
    /// Finite value for ranking; identical images rank above everything.
    pub fn db_or_infinity(self) -> f64 {
        match self {
            PsnrValue::Identical => f64::INFINITY,
            PsnrValue::Db(v) => v,
        }
    }
}

impl std::fmt::Display for PsnrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PsnrValue::Identical => write!(f, "identical"),
            PsnrValue::Db(v) => write!(f, "{v}"),
        }
    }
}

/// Peak signal-to-noise ratio in dB. `peak` of `None` uses the reference
/// image's dynamic range (max - min), the convention used throughout the
/// evaluation pipeline; pass a fixed value to pin the scale instead.
pub fn psnr(pred: &ImageGrid, reference: &ImageGrid, peak: Option<f64>) -> Result<PsnrValue> {
    if pred.values.dim() != reference.values.dim() {
        return Err(Error::input(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            pred.values.dim(),
            reference.values.dim()
        )));
    }
    let n = pred.values.len() as f64;
    let mse = pred
        .values
        .iter()
        .zip(reference.values.iter())
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PsnrValue::Identical);
    }
    let peak = match peak {
        Some(p) => p,
        None => {
            let max = reference.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = reference.values.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        }
    };
    if !(peak > 0.0) {
        return Err(Error::input(format!("psnr peak must be > 0, got {peak}")));
    }
    Ok(PsnrValue::Db(10.0 * (peak * peak / mse).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over all fully interior 11x11 Gaussian windows.
/// `dynamic_range` of `None` uses the reference's max - min.
pub fn ssim(pred: &ImageGrid, reference: &ImageGrid, dynamic_range: Option<f64>) -> Result<f64> {
    if pred.values.dim() != reference.values.dim() {
        return Err(Error::input(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            pred.values.dim(),
            reference.values.dim()
        )));
    }
    let (m, n) = pred.values.dim();
    if m < SSIM_WINDOW || n < SSIM_WINDOW {
        return Err(Error::input(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {m}x{n}"
        )));
    }
    let range = match dynamic_range {
        Some(r) => r,
        None => {
            let max = reference.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = reference.values.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        }
    };
    if !(range > 0.0) {
        return Err(Error::input(format!(
            "ssim dynamic range must be > 0, got {range}"
        )));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    // Normalized Gaussian window.
    let mut w = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            *v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            total += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(m - SSIM_WINDOW) {
        for c0 in 0..=(n - SSIM_WINDOW) {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    mx += w[i][j] * pred.values[[r0 + i, c0 + j]];
                    my += w[i][j] * reference.values[[r0 + i, c0 + j]];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let dx = pred.values[[r0 + i, c0 + j]] - mx;
                    let dy = reference.values[[r0 + i, c0 + j]] - my;
                    vx += w[i][j] * dx * dx;
                    vy += w[i][j] * dy * dy;
                    cov += w[i][j] * dx * dy;
                }
            }
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Rectangular region of interest, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Sample mean and sample (n-1) standard deviation over a rectangle.
/// A single-pixel region has standard deviation zero by convention.
pub fn roi_stats(img: &ImageGrid, roi: Roi) -> Result<(f64, f64)> {
    if roi.rows == 0 || roi.cols == 0 {
        return Err(Error::input("roi must be non-empty"));
    }
    if roi.row + roi.rows > img.rows() || roi.col + roi.cols > img.cols() {
        return Err(Error::input(format!(
            "roi {roi:?} exceeds image {}x{}",
            img.rows(),
            img.cols()
        )));
    }
    // Welford's one-pass update keeps the variance stable for large means.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut count = 0.0f64;
    for r in roi.row..roi.row + roi.rows {
        for c in roi.col..roi.col + roi.cols {
            let v = img.values[[r, c]];
            count += 1.0;
            let d = v - mean;
            mean += d / count;
            m2 += d * (v - mean);
        }
    }
    let sd = if count > 1.0 {
        (m2 / (count - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(values: Array2<f64>) -> ImageGrid {
        ImageGrid { values }
    }

    fn noise_field(m: usize, n: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        grid(Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn psnr_identical_sentinel() {
        let a = noise_field(8, 8, 1);
        assert_eq!(psnr(&a, &a, None).unwrap(), PsnrValue::Identical);
    }

    #[test]
    fn psnr_zero_db_when_mse_equals_peak_squared() {
        let peak = 3.0;
        let reference = grid(Array2::zeros((4, 4)));
        let pred = grid(Array2::from_elem((4, 4), peak));
        match psnr(&pred, &reference, Some(peak)).unwrap() {
            PsnrValue::Db(v) => assert!(v.abs() < 1e-12),
            other => panic!("expected 0 dB, got {other:?}"),
        }
    }

    #[test]
    fn psnr_uniform_tenth_peak_is_twenty_db() {
        let peak = 5.0;
        let reference = grid(Array2::zeros((4, 4)));
        let pred = grid(Array2::from_elem((4, 4), peak / 10.0));
        match psnr(&pred, &reference, Some(peak)).unwrap() {
            PsnrValue::Db(v) => assert!((v - 20.0).abs() < 1e-12),
            other => panic!("expected 20 dB, got {other:?}"),
        }
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let reference = noise_field(16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Array2<f64> =
            Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.2, 0.8] {
            let pred = grid(&reference.values + &(&noise * amp));
            let db = psnr(&pred, &reference, Some(1.0)).unwrap().db_or_infinity();
            assert!(db < last, "amp {amp}: {db} not below {last}");
            last = db;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch_and_bad_peak() {
        let a = noise_field(4, 4, 1);
        let b = noise_field(4, 5, 1);
        assert!(psnr(&a, &b, None).is_err());
        let c = grid(Array2::zeros((4, 4)));
        let d = grid(Array2::ones((4, 4)));
        // Constant reference has zero dynamic range.
        assert!(psnr(&d, &c, None).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = noise_field(16, 16, 4);
        let s = ssim(&a, &a, Some(1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_for_inverted_checkerboard() {
        let reference = grid(Array2::from_shape_fn((16, 16), |(r, c)| {
            if (r + c) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }));
        let pred = grid(&reference.values * -1.0);
        let s = ssim(&pred, &reference, Some(2.0)).unwrap();
        assert!(s < 0.0, "inverted structure should give negative SSIM, got {s}");
    }

    #[test]
    fn ssim_monotone_in_constant_shift() {
        let reference = noise_field(16, 16, 5);
        let mut last = 1.0;
        for shift in [0.05, 0.15, 0.4] {
            let pred = grid(&reference.values + shift);
            let s = ssim(&pred, &reference, Some(1.0)).unwrap();
            assert!(s < last, "shift {shift}: {s} not below {last}");
            last = s;
        }
    }

    #[test]
    fn ssim_symmetric() {
        let a = noise_field(16, 16, 6);
        let b = noise_field(16, 16, 7);
        let ab = ssim(&a, &b, Some(1.0)).unwrap();
        let ba = ssim(&b, &a, Some(1.0)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = noise_field(8, 8, 8);
        assert!(ssim(&a, &a, Some(1.0)).is_err());
    }

    #[test]
    fn roi_constant_region() {
        let img = grid(Array2::from_elem((8, 8), 0.7));
        let (mean, sd) = roi_stats(
            &img,
            Roi {
                row: 2,
                col: 3,
                rows: 4,
                cols: 2,
            },
        )
        .unwrap();
        assert!((mean - 0.7).abs() < 1e-15);
        assert_eq!(sd, 0.0);
    }

    #[test]
    fn roi_two_pixel_hand_case() {
        let mut v = Array2::zeros((1, 2));
        v[[0, 1]] = 2.0;
        let (mean, sd) = roi_stats(
            &grid(v),
            Roi {
                row: 0,
                col: 0,
                rows: 1,
                cols: 2,
            },
        )
        .unwrap();
        assert!((mean - 1.0).abs() < 1e-15);
        assert!((sd - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn roi_matches_two_pass_oracle() {
        let img = noise_field(32, 32, 9);
        let roi = Roi {
            row: 0,
            col: 0,
            rows: 32,
            cols: 32,
        };
        let (mean, sd) = roi_stats(&img, roi).unwrap();
        let n = 32.0 * 32.0;
        let oracle_mean = img.values.iter().sum::<f64>() / n;
        let oracle_var = img
            .values
            .iter()
            .map(|v| (v - oracle_mean) * (v - oracle_mean))
            .sum::<f64>()
            / (n - 1.0);
        assert!((mean - oracle_mean).abs() < 1e-12);
        assert!((sd - oracle_var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn roi_translation_invariant_on_constant_image() {
        let img = grid(Array2::from_elem((16, 16), 0.25));
        let a = roi_stats(&img, Roi { row: 0, col: 0, rows: 4, cols: 4 }).unwrap();
        let b = roi_stats(&img, Roi { row: 9, col: 11, rows: 4, cols: 4 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roi_rejects_empty_and_out_of_bounds() {
        let img = grid(Array2::zeros((8, 8)));
        assert!(roi_stats(&img, Roi { row: 0, col: 0, rows: 0, cols: 2 }).is_err());
        assert!(roi_stats(&img, Roi { row: 6, col: 6, rows: 4, cols: 4 }).is_err());
    }
}
