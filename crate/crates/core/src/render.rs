//! Ray sampling, volume compositing and warped rendering.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{CustomOp, Mat, ParamStore, Tape, TapeError, Var};
use crate::encoding::Anneal;
use crate::field::{normalize_rows, Field2D, Field3D};
use crate::warp::{WarpError, WarpModel, WarpOutput};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("invalid depth range [{near}, {far}]")]
    DepthRange { near: f64, far: f64 },
}

/// Pinhole camera; pixel `(px, py)` has its center at `(px + 0.5, py + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub k: Matrix3<f64>,
}

impl Camera {
    /// Square pixels, principal point at the image center.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let f = width as f64 / 2.0 / (fov_x_deg.to_radians() / 2.0).tan();
        Self {
            width,
            height,
            k: Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        self.k.try_inverse().expect("intrinsics are invertible")
    }

    pub fn ray(&self, px: usize, py: usize, near: f64, far: f64) -> Ray {
        Ray {
            origin: Vector3::zeros(),
            pixel: [px as f64 + 0.5, py as f64 + 0.5],
            near,
            far,
            k_inv: self.k_inv(),
        }
    }
}

/// Camera-frame ray through a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub pixel: [f64; 2],
    pub near: f64,
    pub far: f64,
    pub k_inv: Matrix3<f64>,
}

impl Ray {
    /// `o + z · K⁻¹ ū`.
    pub fn point(&self, z: f64) -> Vector3<f64> {
        self.origin + self.k_inv * Vector3::new(self.pixel[0], self.pixel[1], 1.0) * z
    }

    fn check(&self) -> Result<(), RenderError> {
        if self.near > 0.0 && self.near < self.far {
            Ok(())
        } else {
            Err(RenderError::DepthRange {
                near: self.near,
                far: self.far,
            })
        }
    }
}

/// `m` depths in `[near, far]`: bin midpoints, or one uniform draw per bin
/// when `rng` is given.
pub fn sample_depths<R: Rng>(near: f64, far: f64, m: usize, rng: Option<&mut R>) -> Vec<f64> {
    let w = (far - near) / m as f64;
    match rng {
        None => (0..m).map(|i| near + (i as f64 + 0.5) * w).collect(),
        Some(rng) => (0..m).map(|i| near + (i as f64 + rng.gen::<f64>()) * w).collect(),
    }
}

/// Interval lengths: `z_{i+1} − z_i`, and `far − z_M` for the last sample.
pub fn deltas(depths: &[f64], far: f64) -> Vec<f64> {
    let m = depths.len();
    (0..m)
        .map(|i| if i + 1 < m { depths[i + 1] - depths[i] } else { far - depths[i] })
        .collect()
}

/// Per-sample weights `T_i α_i` and the transmittance left after the last sample.
pub fn composite_weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(sigmas.len());
    for (s, d) in sigmas.iter().zip(deltas) {
        let keep = (-s * d).exp();
        w.push(t * (1.0 - keep));
        t *= keep;
    }
    (w, t)
}

/// Plain-value compositing of one ray.
pub fn composite(colors: &[[f64; 3]], sigmas: &[f64], deltas: &[f64], background: Option<[f64; 3]>) -> [f64; 3] {
    let (w, t_end) = composite_weights(sigmas, deltas);
    let mut out = [0.0; 3];
    for (wi, c) in w.iter().zip(colors) {
        for k in 0..3 {
            out[k] += wi * c[k];
        }
    }
    if let Some(bg) = background {
        for k in 0..3 {
            out[k] += t_end * bg[k];
        }
    }
    out
}

/// Rows grouped per ray (`R·M` samples) → `R x 3` colors.
struct CompositeOp {
    deltas: Vec<f64>,
    m: usize,
    background: Option<[f64; 3]>,
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (c, s) = (inputs[0], inputs[1]);
        let rays = c.nrows() / self.m;
        let mut out = Mat::zeros((rays, 3));
        for r in 0..rays {
            let base = r * self.m;
            let colors: Vec<[f64; 3]> = (0..self.m).map(|i| [c[[base + i, 0]], c[[base + i, 1]], c[[base + i, 2]]]).collect();
            let sig: Vec<f64> = (0..self.m).map(|i| s[[base + i, 0]]).collect();
            let rgb = composite(&colors, &sig, &self.deltas[base..base + self.m], self.background);
            for k in 0..3 {
                out[[r, k]] = rgb[k];
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let (c, s) = (inputs[0], inputs[1]);
        let m = self.m;
        let mut gc = Mat::zeros(c.dim());
        let mut gs = Mat::zeros(s.dim());
        for r in 0..c.nrows() / m {
            let base = r * m;
            let g = [grad[[r, 0]], grad[[r, 1]], grad[[r, 2]]];
            let sig: Vec<f64> = (0..m).map(|i| s[[base + i, 0]]).collect();
            let d = &self.deltas[base..base + m];
            let (w, t_end) = composite_weights(&sig, d);
            let gdot: Vec<f64> = (0..m).map(|i| (0..3).map(|k| g[k] * c[[base + i, k]]).sum()).collect();
            let bg_term = self.background.map_or(0.0, |bg| t_end * (0..3).map(|k| g[k] * bg[k]).sum::<f64>());
            // T_{k+1}: transmittance just past sample k.
            let mut t_after = Vec::with_capacity(m);
            let mut t = 1.0;
            for k in 0..m {
                t *= (-sig[k] * d[k]).exp();
                t_after.push(t);
            }
            // `tail` accumulates w_i (g·c_i) over i > k.
            let mut tail = 0.0;
            for k in (0..m).rev() {
                for j in 0..3 {
                    gc[[base + k, j]] = w[k] * g[j];
                }
                gs[[base + k, 0]] = d[k] * (t_after[k] * gdot[k] - tail - bg_term);
                tail += w[k] * gdot[k];
            }
        }
        vec![Some(gc), Some(gs)]
    }
}

/// Record compositing of `R·M` sample rows grouped by ray.
pub fn composite_rows(
    tape: &mut Tape,
    colors: Var,
    sigmas: Var,
    deltas: Vec<f64>,
    m: usize,
    background: Option<[f64; 3]>,
) -> Result<Var, TapeError> {
    let (cd, sd) = (tape.value(colors).dim(), tape.value(sigmas).dim());
    if m == 0 || cd.1 != 3 || sd.1 != 1 || cd.0 != sd.0 || cd.0 % m != 0 || deltas.len() != cd.0 {
        return Err(TapeError::Shape {
            op: "composite",
            detail: format!("colors {cd:?}, sigmas {sd:?}, {} deltas, M={m}", deltas.len()),
        });
    }
    Ok(tape.custom(Box::new(CompositeOp { deltas, m, background }), &[colors, sigmas]))
}

/// Render a batch of rays through the per-frame warps. `depths[r]` holds the
/// `M` sample depths of ray `r`; `frames[r]` its frame.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field3D,
    warp: &WarpModel,
    rays: &[Ray],
    frames: &[usize],
    depths: &[Vec<f64>],
    alpha: impl Into<Anneal>,
    background: Option<[f64; 3]>,
) -> Result<(Var, WarpOutput), RenderError> {
    let alpha = alpha.into();
    let m = depths.first().map_or(0, Vec::len);
    let n = rays.len();
    let mut pts = Mat::zeros((n * m + n, 3));
    let mut row_frames = Vec::with_capacity(n * m + n);
    let mut dl = Vec::with_capacity(n * m);
    for (r, ray) in rays.iter().enumerate() {
        ray.check()?;
        for (i, &z) in depths[r].iter().enumerate() {
            let p = ray.point(z);
            for k in 0..3 {
                pts[[r * m + i, k]] = p[k];
            }
            row_frames.push(frames[r]);
        }
        dl.extend(deltas(&depths[r], ray.far));
    }
    for (r, ray) in rays.iter().enumerate() {
        for k in 0..3 {
            pts[[n * m + r, k]] = ray.origin[k];
        }
        row_frames.push(frames[r]);
    }
    let x = tape.input(pts);
    let out = warp.warp_rows(tape, store, x, &row_frames, alpha.warp)?;
    let xw = tape.slice_rows(out.world, 0, n * m)?;
    let ow = tape.slice_rows(out.world, n * m, n)?;
    let o_rep = tape.gather(ow, (0..n).flat_map(|r| std::iter::repeat(r).take(m)).collect())?;
    let diff = tape.sub(xw, o_rep)?;
    let dir = normalize_rows(tape, diff);
    let (rgb, sigma) = field.eval(tape, store, xw, dir, alpha.field)?;
    let c = composite_rows(tape, rgb, sigma, dl, m, background)?;
    Ok((c, out))
}

/// Render a single ray; see [`render_rays`].
#[allow(clippy::too_many_arguments)]
pub fn render_ray(
    store: &ParamStore,
    field: &Field3D,
    warp: &WarpModel,
    ray: &Ray,
    frame: usize,
    depths: &[f64],
    alpha: impl Into<Anneal>,
    background: Option<[f64; 3]>,
) -> Result<[f64; 3], RenderError> {
    let mut tape = Tape::new();
    let (c, _) = render_rays(&mut tape, store, field, warp, &[*ray], &[frame], &[depths.to_vec()], alpha, background)?;
    let v = tape.value(c);
    Ok([v[[0, 0]], v[[0, 1]], v[[0, 2]]])
}

/// Planar rendering: colors of the field at the warped pixel coordinates.
pub fn render_pixels_2d(
    tape: &mut Tape,
    store: &ParamStore,
    field: &Field2D,
    warp: &WarpModel,
    u: Var,
    frames: &[usize],
    alpha: impl Into<Anneal>,
) -> Result<(Var, WarpOutput), RenderError> {
    let alpha = alpha.into();
    let out = warp.warp_rows(tape, store, u, frames, alpha.warp)?;
    let c = field.eval(tape, store, out.world, alpha.field)?;
    Ok((c, out))
}

/// Plain-value render of a whole view, in chunks of `chunk` rays.
#[allow(clippy::too_many_arguments)]
pub fn render_view(
    store: &ParamStore,
    field: &Field3D,
    warp: &WarpModel,
    camera: &Camera,
    frame: usize,
    near: f64,
    far: f64,
    m: usize,
    alpha: impl Into<Anneal>,
    background: Option<[f64; 3]>,
    chunk: usize,
) -> Result<Vec<[f64; 3]>, RenderError> {
    let alpha = alpha.into();
    let depths = sample_depths::<rand_chacha::ChaCha8Rng>(near, far, m, None);
    let rays: Vec<Ray> = (0..camera.height)
        .flat_map(|py| (0..camera.width).map(move |px| (px, py)))
        .map(|(px, py)| camera.ray(px, py, near, far))
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for part in rays.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let (c, _) = render_rays(
            &mut tape,
            store,
            field,
            warp,
            part,
            &vec![frame; part.len()],
            &vec![depths.clone(); part.len()],
            alpha,
            background,
        )?;
        out.extend(tape.value(c).rows().into_iter().map(|r| [r[0], r[1], r[2]]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd;
    use crate::field::Field3DConfig;
    use crate::geometry::{random_rotation, Pose};
    use crate::warp::{BaseTransform, WarpConfig, WarpVariant};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_depths_are_bin_midpoints() {
        assert_eq!(sample_depths::<ChaCha8Rng>(0.0, 1.0, 1, None), vec![0.5]);
        assert_eq!(sample_depths::<ChaCha8Rng>(2.0, 6.0, 4, None), vec![2.5, 3.5, 4.5, 5.5]);
    }

    #[test]
    fn stratified_depths_stay_in_their_bins_and_reproduce() {
        let draw = || sample_depths(2.0, 6.0, 16, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        let a = draw();
        assert_eq!(a, draw());
        for (i, z) in a.iter().enumerate() {
            let lo = 2.0 + i as f64 * 0.25;
            assert!(*z >= lo && *z < lo + 0.25);
        }
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn transparent_ray_is_black() {
        let rgb = composite(&[[1.0, 1.0, 1.0]; 4], &[0.0; 4], &[0.5; 4], None);
        assert_eq!(rgb, [0.0; 3]);
        assert_eq!(composite_weights(&[0.0; 4], &[0.5; 4]).1, 1.0);
    }

    #[test]
    fn opaque_sample_returns_its_color() {
        let rgb = composite(&[[0.2, 0.4, 0.6]], &[1e6], &[1.0], None);
        assert_eq!(rgb, [0.2, 0.4, 0.6]);
    }

    #[test]
    fn half_transparent_front_over_opaque_back() {
        let rgb = composite(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[2f64.ln(), 1e6], &[1.0, 1.0], None);
        assert!((rgb[0] - 0.5).abs() < 1e-15 && (rgb[1] - 0.5).abs() < 1e-15 && rgb[2] == 0.0);
    }

    #[test]
    fn white_background_fills_remaining_transmittance() {
        let rgb = composite(&[[0.0; 3]], &[2f64.ln()], &[1.0], Some([1.0; 3]));
        assert!(rgb.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn weights_and_residual_transmittance_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let m = rng.gen_range(1..64);
            let s: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..10.0)).collect();
            let d: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..0.5)).collect();
            let (w, t) = composite_weights(&s, &d);
            assert!((w.iter().sum::<f64>() + t - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn denser_front_never_raises_rear_weights() {
        let d = [0.3; 5];
        let base = [0.5, 1.0, 0.2, 2.0, 0.7];
        let (w0, _) = composite_weights(&base, &d);
        let mut denser = base;
        denser[1] += 1.5;
        let (w1, _) = composite_weights(&denser, &d);
        for i in 2..5 {
            assert!(w1[i] <= w0[i]);
        }
    }

    #[test]
    fn composite_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for bg in [None, Some([1.0, 1.0, 1.0])] {
            let mut store = crate::autodiff::ParamStore::new();
            let g = store.group("g");
            let c = store.insert("c", Array2::from_shape_fn((12, 3), |_| rng.gen_range(0.0..1.0)), g);
            let s = store.insert("s", Array2::from_shape_fn((12, 1), |_| rng.gen_range(0.0..3.0)), g);
            let deltas: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.5)).collect();
            let mut tape = Tape::new();
            let (cv, sv) = (tape.param(&store, c), tape.param(&store, s));
            let out = composite_rows(&mut tape, cv, sv, deltas, 4, bg).unwrap();
            let p = tape.constant(Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)));
            let prod = tape.mul(out, p).unwrap();
            let root = tape.sum(prod);
            let err = fd::check_params(&mut tape, &mut store, root, &[c, s], 1e-6).unwrap();
            assert!(err < 1e-8, "{err}");
        }
    }

    fn small_field(store: &mut crate::autodiff::ParamStore, rng: &mut ChaCha8Rng) -> Field3D {
        let cfg = Field3DConfig {
            hidden: vec![16, 16],
            color_hidden: vec![8],
            frequencies: 2,
            dir_frequencies: 1,
        };
        let f = Field3D::new(store, &cfg, rng);
        store.perturb_prefix("field.", 0.4, rng);
        f
    }

    fn small_warp(variant: WarpVariant) -> WarpConfig {
        WarpConfig {
            variant,
            code_dim: 4,
            hidden: vec![8],
            frequencies: 1,
            inn_blocks: 3,
            inn_hidden: vec![8],
            coord_scale: 4.0,
            ..WarpConfig::default()
        }
    }

    #[test]
    fn identity_warp_with_pose_base_matches_the_rigid_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = crate::autodiff::ParamStore::new();
        let field = small_field(&mut store, &mut rng);
        let pose = Pose::new(random_rotation(&mut rng), Vector3::new(0.5, -1.0, 2.0));
        let warp = WarpModel::new(&mut store, &small_warp(WarpVariant::Inn), 3, vec![BaseTransform::Rigid(pose)], &mut rng).unwrap();
        let cam = Camera::from_fov(8, 6, 60.0);
        let ray = cam.ray(2, 5, 2.0, 6.0);
        let depths = sample_depths::<ChaCha8Rng>(2.0, 6.0, 8, None);
        let got = render_ray(&store, &field, &warp, &ray, 0, &depths, 2.0, None).unwrap();

        // Classical path: rigid transform of samples and direction.
        let dir = pose.rotation * (ray.point(1.0) - ray.origin).normalize();
        let x = Array2::from_shape_fn((8, 3), |(i, k)| pose.apply(&ray.point(depths[i]))[k]);
        let d = Array2::from_shape_fn((8, 3), |(_, k)| dir[k]);
        let (c, s) = field.eval_values(&store, &x, &d, 2.0);
        let colors: Vec<[f64; 3]> = c.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let sig: Vec<f64> = s.iter().copied().collect();
        let want = composite(&colors, &sig, &deltas(&depths, 6.0), None);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn transparent_field_renders_black() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = crate::autodiff::ParamStore::new();
        let field = small_field(&mut store, &mut rng);
        let id = store.id("field.density.l0.b").unwrap();
        store.value_mut(id).fill(-1e4);
        let wid = store.id("field.density.l0.w").unwrap();
        store.value_mut(wid).fill(0.0);
        let warp = WarpModel::new(&mut store, &small_warp(WarpVariant::Naive), 3, vec![BaseTransform::identity(3)], &mut rng).unwrap();
        let ray = Camera::from_fov(4, 4, 50.0).ray(1, 1, 1.0, 3.0);
        let rgb = render_ray(&store, &field, &warp, &ray, 0, &[1.5, 2.0, 2.5], 2.0, None).unwrap();
        assert!(rgb.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn latent_code_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = crate::autodiff::ParamStore::new();
        let field = small_field(&mut store, &mut rng);
        let warp = WarpModel::new(&mut store, &small_warp(WarpVariant::Inn), 3, vec![BaseTransform::identity(3); 2], &mut rng).unwrap();
        store.perturb_prefix("warp.", 0.2, &mut rng);
        let cam = Camera::from_fov(6, 6, 50.0);
        let rays: Vec<Ray> = (0..4).map(|i| cam.ray(i, 5 - i, 2.0, 5.0)).collect();
        let depths: Vec<Vec<f64>> = (0..4).map(|_| sample_depths::<ChaCha8Rng>(2.0, 5.0, 6, None)).collect();
        let mut tape = Tape::new();
        let (c, _) = render_rays(&mut tape, &store, &field, &warp, &rays, &[0, 1, 1, 0], &depths, 2.0, None).unwrap();
        let target = tape.constant(array![[0.1, 0.2, 0.3], [0.9, 0.5, 0.1], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]]);
        let loss = tape.mse(c, target).unwrap();
        let err = fd::check_params(&mut tape, &mut store, loss, warp.code_ids(), 1e-6).unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn planar_render_samples_the_field_at_warped_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = crate::autodiff::ParamStore::new();
        let fcfg = crate::field::Field2DConfig {
            hidden: vec![8],
            frequencies: 2,
        };
        let field = Field2D::new(&mut store, &fcfg, &mut rng);
        store.perturb_prefix("field.", 0.5, &mut rng);
        let warp = WarpModel::new(&mut store, &small_warp(WarpVariant::Explicit), 2, vec![BaseTransform::identity(2)], &mut rng).unwrap();
        *store.value_mut(warp.pose_ids()[0]) = array![[0.1, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let u = array![[0.0, 0.0], [0.3, -0.4]];
        let mut tape = Tape::new();
        let uv = tape.input(u.clone());
        let (c, _) = render_pixels_2d(&mut tape, &store, &field, &warp, uv, &[0, 0], 2.0).unwrap();
        let shifted = &u + &array![[0.1, -0.2]];
        assert_eq!(tape.value(c), &field.eval_values(&store, &shifted, 2.0));
    }

    #[test]
    fn bad_depth_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = crate::autodiff::ParamStore::new();
        let field = small_field(&mut store, &mut rng);
        let warp = WarpModel::new(&mut store, &small_warp(WarpVariant::Explicit), 3, vec![BaseTransform::identity(3)], &mut rng).unwrap();
        let ray = Camera::from_fov(4, 4, 50.0).ray(0, 0, 3.0, 2.0);
        assert!(matches!(
            render_ray(&store, &field, &warp, &ray, 0, &[2.5], 0.0, None),
            Err(RenderError::DepthRange { .. })
        ));
    }
}
