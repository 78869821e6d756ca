//! Evaluation: corner error, PSNR, SSIM, aligned pose errors, success rates.

use std::path::Path;

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_homography, rotation_error_deg, Pose};
use crate::raster::Image;
use crate::registration::{align_pose_sets, RegistrationError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {2}-tap window")]
    TooSmall(usize, usize, usize),
    #[error("pose lists differ in length ({0} vs {1})")]
    PoseCount(usize, usize),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

/// Mean distance between corners mapped by the two homographies, scaled by
/// `pixels_per_unit`. A corner that maps to infinity yields `+∞`.
pub fn corner_error(h_est: &Matrix3<f64>, h_gt: &Matrix3<f64>, corners: &[Vector2<f64>], pixels_per_unit: f64) -> f64 {
    let mut acc = 0.0;
    for c in corners {
        match (apply_homography(h_est, c), apply_homography(h_gt, c)) {
            (Some(a), Some(b)) => acc += (a - b).norm() * pixels_per_unit,
            _ => return f64::INFINITY,
        }
    }
    acc / corners.len() as f64
}

pub const PSNR_CAP_DB: f64 = 99.0;

fn check_shape(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::Shape(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub fn mse(img: &Image, reference: &Image) -> Result<f64, MetricsError> {
    check_shape(img, reference)?;
    let n = (img.pixels.len() * 3) as f64;
    Ok(img
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `10 log₁₀(1 / MSE)`, capped at 99 dB.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64, MetricsError> {
    Ok(psnr_from_mse(mse(img, reference)?))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn gray(img: &Image) -> Vec<f64> {
    img.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity of the channel-averaged images, 11-tap
/// Gaussian window (σ = 1.5), no padding.
pub fn ssim(img: &Image, reference: &Image) -> Result<f64, MetricsError> {
    check_shape(img, reference)?;
    let (w, h) = (img.width, img.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(w, h, SSIM_WINDOW));
    }
    let (a, b) = (gray(img), gray(reference));
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let (mu_a, ..) = filter_valid(&a, w, h, &taps);
    let (mu_b, ..) = filter_valid(&b, w, h, &taps);
    let (aa, ..) = filter_valid(&prod(&a, &a), w, h, &taps);
    let (bb, ..) = filter_valid(&prod(&b, &b), w, h, &taps);
    let (ab, ..) = filter_valid(&prod(&a, &b), w, h, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let (va, vb, cov) = (aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean rotation error (degrees) and mean camera-center distance (×100)
/// between already aligned pose lists.
pub fn pose_errors(est: &[Pose], gt: &[Pose]) -> Result<(f64, f64), MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::PoseCount(est.len(), gt.len()));
    }
    let n = est.len().max(1) as f64;
    let rot = est.iter().zip(gt).map(|(a, b)| rotation_error_deg(&a.rotation, &b.rotation)).sum::<f64>() / n;
    let trans = est.iter().zip(gt).map(|(a, b)| (a.center() - b.center()).norm()).sum::<f64>() / n;
    Ok((rot, trans * 100.0))
}

/// [`pose_errors`] after similarity alignment of `est` onto `gt`.
pub fn aligned_pose_errors(est: &[Pose], gt: &[Pose]) -> Result<(f64, f64), MetricsError> {
    let aligned = align_pose_sets(est, gt)?;
    pose_errors(&aligned.poses, gt)
}

/// One training/evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    /// Mean over patches.
    pub corner_error_px: f64,
    /// Std-dev over patches.
    pub corner_error_std: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub rot_err_deg: f64,
    pub trans_err_x100: f64,
    pub success: bool,
    pub wall_seconds: f64,
    /// Set when the run stopped on a non-finite loss or another error.
    pub failure: String,
}

impl MetricsRecord {
    pub fn new(run_id: &str, variant: &str, seed: u64) -> Self {
        Self {
            run_id: run_id.to_string(),
            variant: variant.to_string(),
            seed,
            corner_error_px: f64::NAN,
            corner_error_std: f64::NAN,
            psnr_db: f64::NAN,
            ssim: f64::NAN,
            rot_err_deg: f64::NAN,
            trans_err_x100: f64::NAN,
            success: false,
            wall_seconds: 0.0,
            failure: String::new(),
        }
    }

    pub fn failed(&self) -> bool {
        !self.failure.is_empty()
    }
}

/// Fraction of runs with corner error strictly below `threshold_px`; failed
/// runs never count as successes.
pub fn success_rate(records: &[MetricsRecord], threshold_px: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let ok = records
        .iter()
        .filter(|r| !r.failed() && r.corner_error_px < threshold_px)
        .count();
    ok as f64 / records.len() as f64
}

pub fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let err = |source| MetricsError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in records {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let err = |source| MetricsError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(err)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, random_rotation_of_angle};
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corners() -> Vec<Vector2<f64>> {
        vec![Vector2::new(-0.5, -0.5), Vector2::new(0.5, -0.5), Vector2::new(0.5, 0.5), Vector2::new(-0.5, 0.5)]
    }

    fn random_h(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.1..0.1))
    }

    #[test]
    fn corner_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random_h(&mut rng);
        assert_eq!(corner_error(&h, &h, &corners(), 64.0), 0.0);
        let shift = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, 4.0, 0.0, 0.0, 1.0);
        let e = corner_error(&(shift * h), &h, &corners(), 1.0);
        assert!((e - 5.0).abs() < 1e-12);
        let e = corner_error(&(h * 7.5), &h, &corners(), 1.0);
        assert!(e < 1e-14, "scale invariance {e}");
    }

    #[test]
    fn corner_error_matches_per_corner_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = (random_h(&mut rng), random_h(&mut rng));
            let mut total = 0.0;
            for c in corners() {
                let pa = a * Vector3::new(c[0], c[1], 1.0);
                let pb = b * Vector3::new(c[0], c[1], 1.0);
                let dx = pa[0] / pa[2] - pb[0] / pb[2];
                let dy = pa[1] / pa[2] - pb[1] / pb[2];
                total += (dx * dx + dy * dy).sqrt() * 32.0;
            }
            assert!((corner_error(&a, &b, &corners(), 32.0) - total / 4.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_corner_is_infinite() {
        let h = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0);
        assert_eq!(corner_error(&h, &Matrix3::identity(), &corners(), 1.0), f64::INFINITY);
    }

    fn noise_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn psnr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = noise_image(&mut rng, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let r = Image::new(4, 4, [0.3, 0.5, 0.7]);
        let b = Image::new(4, 4, [0.4, 0.6, 0.8]);
        assert!((psnr(&b, &r).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &r), Err(MetricsError::Shape(..))));
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Image::new(16, 16, [0.5; 3]);
        let pattern: Vec<[f64; 3]> = (0..256).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let img = Image {
                width: 16,
                height: 16,
                pixels: pattern.iter().map(|p| p.map(|v| 0.5 + amp * v)).collect(),
            };
            let p = psnr(&img, &r).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = noise_image(&mut rng, 20, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let g = Image::new(12, 12, [0.5; 3]);
        assert!((ssim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&Image::new(10, 30, [0.0; 3]), &Image::new(10, 30, [0.0; 3])), Err(MetricsError::TooSmall(..))));
    }

    /// Direct per-window evaluation with 2D weights.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (ga, gb) = (gray(a), gray(b));
        let g1 = gaussian_taps();
        let (w, h) = (a.width, a.height);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g1[i] * g1[j];
                        let (p, q) = (ga[(y0 + j) * w + x0 + i], gb[(y0 + j) * w + x0 + i]);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn inverted_binary_image_has_negative_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Image::from_fn(16, 14, |_, _| if rng.gen::<bool>() { [1.0; 3] } else { [0.0; 3] });
        let inv = Image {
            width: r.width,
            height: r.height,
            pixels: r.pixels.iter().map(|p| p.map(|v| 1.0 - v)).collect(),
        };
        let s = ssim(&inv, &r).unwrap();
        assert!(s < 0.0);
        assert!((s - ssim_oracle(&inv, &r)).abs() <= 1e-10);
    }

    fn poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
        (0..n)
            .map(|_| Pose::new(random_rotation(rng), Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))))
            .collect()
    }

    #[test]
    fn pose_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = poses(&mut rng, 6);
        assert_eq!(pose_errors(&gt, &gt).unwrap(), (0.0, 0.0));
        let mut est = gt.clone();
        let r5 = random_rotation_of_angle(&mut rng, 5f64.to_radians());
        est[2].rotation = r5 * est[2].rotation;
        let (rot, trans) = pose_errors(&est, &gt).unwrap();
        let q = UnitQuaternion::from_matrix(&(est[2].rotation.transpose() * gt[2].rotation));
        assert!((rot - q.angle().to_degrees() / 6.0).abs() < 1e-9);
        assert!((rot - 5.0 / 6.0).abs() < 1e-9);
        assert_eq!(trans, 0.0);
    }

    #[test]
    fn aligned_errors_ignore_global_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = poses(&mut rng, 5);
        let g = random_rotation(&mut rng);
        let est: Vec<Pose> = gt.iter().map(|p| Pose::new(g * p.rotation, g * p.translation * 0.7 + Vector3::new(1.0, 0.0, -2.0))).collect();
        let (rot, trans) = aligned_pose_errors(&est, &gt).unwrap();
        assert!(rot < 1e-6 && trans < 1e-7, "{rot} {trans}");
    }

    fn rec(err: f64) -> MetricsRecord {
        MetricsRecord {
            corner_error_px: err,
            ..MetricsRecord::new("r", "inn", 0)
        }
    }

    #[test]
    fn success_rate_uses_strict_threshold() {
        assert_eq!(success_rate(&[rec(0.0), rec(0.0)], 5.0), 1.0);
        assert_eq!(success_rate(&[rec(4.9), rec(5.1)], 5.0), 0.5);
        assert_eq!(success_rate(&[rec(5.0)], 5.0), 0.0);
        let mut failed = rec(0.0);
        failed.failure = "loss diverged".into();
        assert_eq!(success_rate(&[failed, rec(1.0)], 5.0), 0.5);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut a = rec(1.25);
        a.psnr_db = 30.5;
        a.success = true;
        write_records(&p, &[a.clone(), rec(7.0)]).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back[0].corner_error_px, 1.25);
        assert_eq!(back[0].psnr_db, 30.5);
        assert!(back[1].rot_err_deg.is_nan());
    }
}
