//! Closed-form alignment: DLT homographies, Umeyama rigid/similarity fits,
//! the rigidity residual used as a warp prior, and global pose alignment.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::autodiff::{CustomOp, Mat, Tape, Var};
use crate::geometry::{apply_homography, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("source and destination lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("degenerate point configuration (smallest singular values {smallest:e}, {second:e})")]
    Degenerate { smallest: f64, second: f64 },
}

/// Paired point sets; `src[i]` corresponds to `dst[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences<P> {
    pub src: Vec<P>,
    pub dst: Vec<P>,
}

impl<P> Correspondences<P> {
    pub fn new(src: Vec<P>, dst: Vec<P>) -> Self {
        Self { src, dst }
    }

    fn check(&self, needed: usize) -> Result<(), RegistrationError> {
        if self.src.len() != self.dst.len() {
            return Err(RegistrationError::LengthMismatch(self.src.len(), self.dst.len()));
        }
        if self.src.len() < needed {
            return Err(RegistrationError::TooFew {
                needed,
                got: self.src.len(),
            });
        }
        Ok(())
    }
}

/// Similarity `x ↦ scale · rotation · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Homography(Matrix3<f64>),
    Similarity(Similarity),
}

/// Result of a closed-form fit, with its mean squared transfer residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FittedTransform {
    pub transform: Transform,
    pub residual: f64,
}

impl FittedTransform {
    pub fn homography(&self) -> Option<Matrix3<f64>> {
        match self.transform {
            Transform::Homography(h) => Some(h),
            _ => None,
        }
    }

    pub fn similarity(&self) -> Option<Similarity> {
        match self.transform {
            Transform::Similarity(s) => Some(s),
            _ => None,
        }
    }
}

// ── DLT ────────────────────────────────────────────────────────────────

/// Translate to the centroid and scale to mean distance √2.
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-300 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c[0], 0.0, s, -s * c[1], 0.0, 0.0, 1.0)
}

/// Scale to Frobenius norm √3 and flip sign so the trace is non-negative.
pub fn normalize_homography(h: &Matrix3<f64>) -> Matrix3<f64> {
    let mut out = h * (3f64.sqrt() / h.norm());
    if out.trace() < 0.0 {
        out = -out;
    }
    out
}

/// Relative singular-value floor below which the DLT system is rank deficient.
const DLT_RANK_TOL: f64 = 1e-9;

/// Homography `H` with `dst ≅ H · src`, by normalized DLT.
pub fn dlt_homography(c: &Correspondences<Vector2<f64>>) -> Result<FittedTransform, RegistrationError> {
    c.check(4)?;
    let ts = hartley(&c.src);
    let td = hartley(&c.dst);
    let n = c.src.len();
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in c.src.iter().zip(&c.dst).enumerate() {
        let s = ts * Vector3::new(s[0], s[1], 1.0);
        let d = td * Vector3::new(d[0], d[1], 1.0);
        let (x, y) = (s[0] / s[2], s[1] / s[2]);
        let (u, v) = (d[0] / d[2], d[1] / d[2]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = svd.singular_values[order[0]];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if second <= DLT_RANK_TOL * largest {
        return Err(RegistrationError::Degenerate { smallest, second });
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("similarity is invertible");
    let hm = normalize_homography(&(td_inv * hn * ts));
    let mut residual = 0.0;
    for (s, d) in c.src.iter().zip(&c.dst) {
        residual += match apply_homography(&hm, s) {
            Some(p) => (p - d).norm_squared(),
            None => f64::INFINITY,
        };
    }
    Ok(FittedTransform {
        transform: Transform::Homography(hm),
        residual: residual / n as f64,
    })
}

// ── Umeyama ────────────────────────────────────────────────────────────

const UMEYAMA_RANK_TOL: f64 = 1e-10;

/// Least-squares `dst ≈ s·R·src + t` with `det R = +1`.
pub fn umeyama(
    c: &Correspondences<Vector3<f64>>,
    with_scale: bool,
) -> Result<FittedTransform, RegistrationError> {
    c.check(3)?;
    let n = c.src.len() as f64;
    let mu_s = c.src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mu_d = c.dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in c.src.iter().zip(&c.dst) {
        let (sc, dc) = (s - mu_s, d - mu_d);
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;

    // The source spread decides identifiability; the cross-covariance can be
    // low rank for legitimate reasons (e.g. a collapsed destination).
    let mut src_cov = Matrix3::zeros();
    for s in &c.src {
        let sc = s - mu_s;
        src_cov += sc * sc.transpose();
    }
    let mut sv: Vec<f64> = src_cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= UMEYAMA_RANK_TOL * sv[0] {
        return Err(RegistrationError::Degenerate {
            smallest: sv[2].sqrt(),
            second: sv[1].sqrt(),
        });
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let k = (0..3).min_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
        sign[(k, k)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = if with_scale {
        (0..3).map(|i| d[i] * sign[(i, i)]).sum::<f64>() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    let sim = Similarity {
        rotation,
        translation,
        scale,
    };
    let residual = c
        .src
        .iter()
        .zip(&c.dst)
        .map(|(s, d)| (d - sim.apply(s)).norm_squared())
        .sum::<f64>()
        / n;
    Ok(FittedTransform {
        transform: Transform::Similarity(sim),
        residual,
    })
}

// ── Rigidity prior ─────────────────────────────────────────────────────

fn rows2(m: &Mat) -> Vec<Vector2<f64>> {
    m.rows().into_iter().map(|r| Vector2::new(r[0], r[1])).collect()
}

fn rows3(m: &Mat) -> Vec<Vector3<f64>> {
    m.rows().into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()
}

/// Fit `T*` mapping world points onto camera points: homography for 2D
/// inputs, rigid motion for 3D inputs.
pub fn fit_world_to_camera(cam: &Mat, world: &Mat) -> Result<FittedTransform, RegistrationError> {
    match cam.ncols() {
        2 => dlt_homography(&Correspondences::new(rows2(world), rows2(cam))),
        _ => umeyama(&Correspondences::new(rows3(world), rows3(cam)), false),
    }
}

/// Rigidity loss on plain values: `mean ‖x_cam − T*(x_world)‖²` with `T*`
/// the closed-form fit.
pub fn rigidity_loss(cam: &Mat, world: &Mat) -> Result<(f64, FittedTransform), RegistrationError> {
    let fit = fit_world_to_camera(cam, world)?;
    let op = FixedTransformResidual {
        transform: fit.transform,
        cam: cam.clone(),
    };
    Ok((op.forward(&[world])[[0, 0]], fit))
}

/// `mean_i ‖cam_i − T(world_i)‖²` for a transform held constant, so the
/// gradient flows into `world` only through the residual.
struct FixedTransformResidual {
    transform: Transform,
    cam: Mat,
}

impl FixedTransformResidual {
    /// Transformed point and the 2x2 / 3x3 Jacobian (row-major) w.r.t. the input.
    fn map(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match &self.transform {
            Transform::Homography(h) => {
                let a = h[(0, 0)] * x[0] + h[(0, 1)] * x[1] + h[(0, 2)];
                let b = h[(1, 0)] * x[0] + h[(1, 1)] * x[1] + h[(1, 2)];
                let w = h[(2, 0)] * x[0] + h[(2, 1)] * x[1] + h[(2, 2)];
                let (q0, q1) = (a / w, b / w);
                let jac = vec![
                    (h[(0, 0)] - q0 * h[(2, 0)]) / w,
                    (h[(0, 1)] - q0 * h[(2, 1)]) / w,
                    (h[(1, 0)] - q1 * h[(2, 0)]) / w,
                    (h[(1, 1)] - q1 * h[(2, 1)]) / w,
                ];
                (vec![q0, q1], jac)
            }
            Transform::Similarity(s) => {
                let p = s.apply(&Vector3::new(x[0], x[1], x[2]));
                let j = s.rotation * s.scale;
                (p.iter().copied().collect(), j.transpose().iter().copied().collect())
            }
        }
    }
}

impl CustomOp for FixedTransformResidual {
    fn name(&self) -> &'static str {
        "fixed_transform_residual"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let world = inputs[0];
        let n = world.nrows().max(1) as f64;
        let mut acc = 0.0;
        for (w, c) in world.rows().into_iter().zip(self.cam.rows()) {
            let (q, _) = self.map(w.as_slice().unwrap_or(&w.to_vec()));
            acc += q.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Mat::from_elem((1, 1), acc / n)
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let world = inputs[0];
        let d = world.ncols();
        let n = world.nrows().max(1) as f64;
        let g = grad[[0, 0]] * 2.0 / n;
        let mut gx = Mat::zeros(world.dim());
        for (i, (w, c)) in world.rows().into_iter().zip(self.cam.rows()).enumerate() {
            let (q, jac) = self.map(&w.to_vec());
            for k in 0..d {
                let r = q[k] - c[k];
                for j in 0..d {
                    gx[[i, j]] += g * r * jac[k * d + j];
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Record the rigidity residual of `world` (a tape node) against constant
/// `cam` points. `T*` is fitted on current values and then frozen. Returns
/// `Ok(None)` when the fit is degenerate so the caller can skip the term.
pub fn rigidity_residual(
    tape: &mut Tape,
    cam: &Mat,
    world: Var,
) -> Result<Option<(Var, FittedTransform)>, crate::autodiff::TapeError> {
    let values = tape.value(world).clone();
    if values.dim() != cam.dim() {
        return Err(crate::autodiff::TapeError::Shape {
            op: "rigidity_residual",
            detail: format!("{:?} vs {:?}", values.dim(), cam.dim()),
        });
    }
    let Ok(fit) = fit_world_to_camera(cam, &values) else {
        return Ok(None);
    };
    if !fit.residual.is_finite() {
        return Ok(None);
    }
    let op = FixedTransformResidual {
        transform: fit.transform,
        cam: cam.clone(),
    };
    Ok(Some((tape.custom(Box::new(op), &[world]), fit)))
}

// ── Pose-set alignment ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AlignedPoses {
    pub poses: Vec<Pose>,
    /// The similarity applied, or `None` when alignment was skipped.
    pub alignment: Option<Similarity>,
}

/// Map estimated camera-to-world poses into the ground-truth frame with the
/// similarity that best aligns camera centers.
pub fn align_pose_sets(est: &[Pose], gt: &[Pose]) -> Result<AlignedPoses, RegistrationError> {
    if est.len() != gt.len() {
        return Err(RegistrationError::LengthMismatch(est.len(), gt.len()));
    }
    let c = Correspondences::new(
        est.iter().map(Pose::center).collect(),
        gt.iter().map(Pose::center).collect(),
    );
    match umeyama(&c, true) {
        Ok(fit) => {
            let sim = fit.similarity().expect("umeyama returns a similarity");
            let poses = est
                .iter()
                .map(|p| Pose::new(sim.rotation * p.rotation, sim.apply(&p.center())))
                .collect();
            Ok(AlignedPoses {
                poses,
                alignment: Some(sim),
            })
        }
        Err(RegistrationError::Degenerate { .. }) => Ok(AlignedPoses {
            poses: est.to_vec(),
            alignment: None,
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd, ParamStore};
    use crate::geometry::{random_rotation, random_rotation_of_angle};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points3(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn random_points2(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector2<f64>> {
        (0..n)
            .map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn dlt_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_points2(&mut rng, 6);
        let fit = dlt_homography(&Correspondences::new(p.clone(), p)).unwrap();
        let h = fit.homography().unwrap();
        assert!((h - Matrix3::identity()).abs().max() < 1e-10);
    }

    #[test]
    fn dlt_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points2(&mut rng, 5);
        let q: Vec<_> = p.iter().map(|v| v + Vector2::new(0.3, -0.1)).collect();
        let fit = dlt_homography(&Correspondences::new(p, q)).unwrap();
        let expect = normalize_homography(&Matrix3::new(1.0, 0.0, 0.3, 0.0, 1.0, -0.1, 0.0, 0.0, 1.0));
        assert!((fit.homography().unwrap() - expect).abs().max() < 1e-8);
    }

    #[test]
    fn dlt_rejects_collinear_points() {
        let src: Vec<_> = (0..6).map(|i| Vector2::new(i as f64 * 0.1, i as f64 * 0.2)).collect();
        let dst = src.clone();
        assert!(matches!(
            dlt_homography(&Correspondences::new(src, dst)),
            Err(RegistrationError::Degenerate { .. })
        ));
    }

    #[test]
    fn dlt_needs_four_points() {
        let p = vec![Vector2::zeros(); 3];
        assert_eq!(
            dlt_homography(&Correspondences::new(p.clone(), p)),
            Err(RegistrationError::TooFew { needed: 4, got: 3 })
        );
    }

    #[test]
    fn dlt_reverse_fit_is_inverse_up_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let h0 = Matrix3::from_fn(|i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2));
            let src = random_points2(&mut rng, 8);
            let dst: Vec<_> = src.iter().map(|p| apply_homography(&h0, p).unwrap()).collect();
            let h1 = dlt_homography(&Correspondences::new(src.clone(), dst.clone())).unwrap();
            let h2 = dlt_homography(&Correspondences::new(dst, src)).unwrap();
            let inv = normalize_homography(&h1.homography().unwrap().try_inverse().unwrap());
            let dev = (inv - h2.homography().unwrap()).abs().max() / 3f64.sqrt();
            assert!(dev <= 1e-6, "{dev}");
        }
    }

    #[test]
    fn umeyama_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_points3(&mut rng, 5);
        let fit = umeyama(&Correspondences::new(p.clone(), p), true).unwrap();
        let s = fit.similarity().unwrap();
        assert!((s.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(fit.residual < 1e-24);
    }

    #[test]
    fn umeyama_recovers_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r0 = random_rotation(&mut rng);
        let t0 = Vector3::new(0.5, -2.0, 1.25);
        let src = random_points3(&mut rng, 10);
        let dst: Vec<_> = src.iter().map(|p| r0 * p + t0).collect();
        let fit = umeyama(&Correspondences::new(src, dst), false).unwrap();
        let s = fit.similarity().unwrap();
        assert!((s.rotation - r0).abs().max() < 1e-10);
        assert!((s.translation - t0).abs().max() < 1e-10);
        assert!(fit.residual <= 1e-20);
    }

    #[test]
    fn umeyama_never_returns_a_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_points3(&mut rng, 12);
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let dst: Vec<_> = src.iter().map(|p| flip * p).collect();
        let fit = umeyama(&Correspondences::new(src.clone(), dst.clone()), false).unwrap();
        let r = fit.similarity().unwrap().rotation;
        assert!((r.determinant() - 1.0).abs() < 1e-10);
        assert!(fit.residual > 0.0);
        // An unconstrained orthogonal Procrustes solution is the reflection itself.
        let mut cov = Matrix3::zeros();
        for (s, d) in src.iter().zip(&dst) {
            cov += d * s.transpose();
        }
        let svd = cov.svd(true, true);
        let naive = svd.u.unwrap() * svd.v_t.unwrap();
        assert!((naive.determinant() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn umeyama_rejects_collinear_points() {
        let src: Vec<_> = (0..5).map(|i| Vector3::new(1.0, 2.0, 3.0) * i as f64).collect();
        assert!(matches!(
            umeyama(&Correspondences::new(src.clone(), src), false),
            Err(RegistrationError::Degenerate { .. })
        ));
    }

    #[test]
    fn umeyama_beats_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let src = random_points3(&mut rng, 5);
            let dst = random_points3(&mut rng, 5);
            let fit = umeyama(&Correspondences::new(src.clone(), dst.clone()), false).unwrap();
            for _ in 0..100_000 {
                let r = random_rotation(&mut rng);
                let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let res: f64 = src.iter().zip(&dst).map(|(s, d)| (d - (r * s + t)).norm_squared()).sum::<f64>() / 5.0;
                assert!(fit.residual <= res + 1e-12);
            }
        }
    }

    fn mat3(points: &[Vector3<f64>]) -> Mat {
        Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i][j])
    }

    #[test]
    fn rigid_warp_has_zero_rigidity_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = random_points3(&mut rng, 16);
        let r = random_rotation(&mut rng);
        let world: Vec<_> = cam.iter().map(|p| r * p + Vector3::new(1.0, 2.0, 3.0)).collect();
        let (loss, _) = rigidity_loss(&mat3(&cam), &mat3(&world)).unwrap();
        assert!(loss < 1e-24);
    }

    #[test]
    fn rigidity_loss_equals_independent_refit_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = random_points3(&mut rng, 16);
        let r = random_rotation(&mut rng);
        let world: Vec<_> = cam
            .iter()
            .map(|p| r * p + Vector3::new(0.2, 0.0, -1.0) + Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.01))
            .collect();
        let (loss, _) = rigidity_loss(&mat3(&cam), &mat3(&world)).unwrap();
        let refit = umeyama(&Correspondences::new(world.clone(), cam.clone()), false).unwrap();
        assert!(loss > 0.0);
        assert!((loss - refit.residual).abs() <= 1e-12);
    }

    #[test]
    fn rigidity_gradient_with_fixed_fit_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for dim in [2usize, 3] {
            let cam = Array2::from_shape_fn((16, dim), |_| rng.gen_range(-1.0..1.0));
            let world = &cam * 1.1 + Array2::from_shape_fn((16, dim), |_| rng.gen_range(-0.1..0.1));
            let mut store = ParamStore::new();
            let mut tape = Tape::new();
            let w = tape.input(world);
            let (loss, _) = rigidity_residual(&mut tape, &cam, w).unwrap().unwrap();
            tape.backward(loss, &Array2::from_elem((1, 1), 1.0), &mut store).unwrap();
            let a = tape.grad(w).unwrap().clone();
            let n = fd::input_gradient(&mut tape, &store, loss, w, 1e-6).unwrap();
            let err = fd::relative_error_mat(&a, &n);
            assert!(err <= 1e-4, "dim {dim}: {err}");
        }
    }

    #[test]
    fn rigidity_loss_is_gauge_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for dim in [2usize, 3] {
            let cam = Array2::from_shape_fn((16, dim), |_| rng.gen_range(-1.0..1.0));
            let world = &cam + Array2::from_shape_fn((16, dim), |_| rng.gen_range(-0.1..0.1));
            let (l0, _) = rigidity_loss(&cam, &world).unwrap();
            let moved = if dim == 3 {
                let r = random_rotation(&mut rng);
                let t = Vector3::new(0.4, -0.3, 2.0);
                Array2::from_shape_fn((16, 3), |(i, j)| {
                    (r * Vector3::new(world[[i, 0]], world[[i, 1]], world[[i, 2]]) + t)[j]
                })
            } else {
                let th: f64 = rng.gen_range(-1.0..1.0);
                Array2::from_shape_fn((16, 2), |(i, j)| {
                    let (x, y) = (world[[i, 0]], world[[i, 1]]);
                    if j == 0 {
                        th.cos() * x - th.sin() * y + 0.3
                    } else {
                        th.sin() * x + th.cos() * y - 0.2
                    }
                })
            };
            let (l1, _) = rigidity_loss(&cam, &moved).unwrap();
            assert!((l0 - l1).abs() <= 1e-10, "dim {dim}: {l0} vs {l1}");
        }
    }

    fn random_poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
        (0..n)
            .map(|_| {
                Pose::new(
                    random_rotation(rng),
                    Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                )
            })
            .collect()
    }

    #[test]
    fn aligning_identical_sets_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = random_poses(&mut rng, 5);
        let out = align_pose_sets(&gt, &gt).unwrap();
        for (a, b) in out.poses.iter().zip(&gt) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn alignment_removes_a_global_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gt = random_poses(&mut rng, 6);
        let g = Pose::new(random_rotation(&mut rng), Vector3::new(3.0, -1.0, 0.5));
        let s = 2.5;
        let est: Vec<_> = gt
            .iter()
            .map(|p| Pose::new(g.rotation * p.rotation, g.rotation * p.translation * s + g.translation))
            .collect();
        let out = align_pose_sets(&est, &gt).unwrap();
        for (a, b) in out.poses.iter().zip(&gt) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn single_perturbed_camera_keeps_most_of_its_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gt = random_poses(&mut rng, 8);
        let mut est = gt.clone();
        est[3].translation += Vector3::new(0.3, 0.0, 0.0);
        est[3].rotation = random_rotation_of_angle(&mut rng, 0.1) * est[3].rotation;
        let out = align_pose_sets(&est, &gt).unwrap();
        let sim = out.alignment.unwrap();
        // Brute-force oracle: no nearby similarity aligns the centers better.
        let cost = |s: &Similarity| -> f64 {
            est.iter().zip(&gt).map(|(e, g)| (s.apply(&e.center()) - g.center()).norm_squared()).sum()
        };
        let best = cost(&sim);
        for _ in 0..20_000 {
            let ang = rng.gen_range(0.0..0.05);
            let cand = Similarity {
                rotation: random_rotation_of_angle(&mut rng, ang) * sim.rotation,
                translation: sim.translation
                    + Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
                scale: sim.scale * rng.gen_range(0.97..1.03),
            };
            assert!(cost(&cand) >= best - 1e-12);
        }
        let errs: Vec<f64> = out.poses.iter().zip(&gt).map(|(a, b)| (a.center() - b.center()).norm()).collect();
        let max_other = errs.iter().enumerate().filter(|(i, _)| *i != 3).map(|(_, e)| *e).fold(0.0, f64::max);
        assert!(errs[3] > max_other);
    }

    #[test]
    fn degenerate_centers_skip_alignment() {
        let p = Pose::identity();
        let est = vec![p; 4];
        let out = align_pose_sets(&est, &est).unwrap();
        assert!(out.alignment.is_none());
        assert_eq!(out.poses, est);
    }
}
