//! Coordinate networks: a 2D image field and a small 3D radiance field.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, GroupId, Mat, Mlp, MlpShape, ParamId, ParamStore, Tape, TapeError, Var, LEAKY_SLOPE};
use crate::encoding::{encode, EncodingConfig};

pub const FIELD_GROUP: &str = "field";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Field2DConfig {
    pub hidden: Vec<usize>,
    /// Positional encoding bands.
    pub frequencies: usize,
}

impl Default for Field2DConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 5],
            frequencies: 8,
        }
    }
}

/// RGB image field on normalized coordinates.
#[derive(Clone, Debug)]
pub struct Field2D {
    cfg: Field2DConfig,
    mlp: Mlp,
}

impl Field2D {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &Field2DConfig, rng: &mut R) -> Self {
        let group = store.group(FIELD_GROUP);
        let shape = MlpShape::new(EncodingConfig::full(cfg.frequencies).output_dim(2), &cfg.hidden, 3);
        Self {
            cfg: cfg.clone(),
            mlp: Mlp::new(store, group, "field.mlp", shape, true, rng),
        }
    }

    pub fn config(&self) -> &Field2DConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids().collect()
    }

    /// `B x 2` coordinates → `B x 3` colors in `[0, 1]`.
    pub fn eval(&self, tape: &mut Tape, store: &ParamStore, u: Var, alpha: f64) -> Result<Var, TapeError> {
        let e = encode(tape, u, &EncodingConfig::full(self.cfg.frequencies), alpha)?;
        let raw = self.mlp.forward(tape, store, e)?;
        Ok(tape.sigmoid(raw))
    }

    pub fn eval_values(&self, store: &ParamStore, u: &Mat, alpha: f64) -> Mat {
        let mut tape = Tape::new();
        let x = tape.input(u.clone());
        let y = self.eval(&mut tape, store, x, alpha).expect("2-column input");
        tape.value(y).clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Field3DConfig {
    /// Trunk widths; the last entry is the feature width shared by both heads.
    pub hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    /// Positional encoding bands.
    pub frequencies: usize,
    /// Bands for the view direction (never annealed).
    pub dir_frequencies: usize,
}

impl Default for Field3DConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128; 4],
            color_hidden: vec![64],
            frequencies: 6,
            dir_frequencies: 2,
        }
    }
}

/// Radiance field: density from position only, color from trunk features and
/// the view direction.
#[derive(Debug)]
pub struct Field3D {
    cfg: Field3DConfig,
    trunk: Mlp,
    density: Mlp,
    color: Mlp,
    non_unit_dirs: AtomicUsize,
}

impl Clone for Field3D {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            trunk: self.trunk.clone(),
            density: self.density.clone(),
            color: self.color.clone(),
            non_unit_dirs: AtomicUsize::new(self.non_unit_dirs()),
        }
    }
}

/// Tolerance on `‖d‖ − 1` before a direction is renormalized.
pub const UNIT_DIR_TOL: f64 = 1e-6;

impl Field3D {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &Field3DConfig, rng: &mut R) -> Self {
        let group: GroupId = store.group(FIELD_GROUP);
        let (feat, trunk_hidden) = cfg.hidden.split_last().expect("at least one trunk layer");
        let trunk = Mlp::new(
            store,
            group,
            "field.trunk",
            MlpShape::new(EncodingConfig::full(cfg.frequencies).output_dim(3), trunk_hidden, *feat),
            false,
            rng,
        );
        let density = Mlp::new(store, group, "field.density", MlpShape::new(*feat, &[], 1), true, rng);
        let dir_dim = EncodingConfig::full(cfg.dir_frequencies).output_dim(3);
        let color = Mlp::new(
            store,
            group,
            "field.color",
            MlpShape::new(feat + dir_dim, &cfg.color_hidden, 3),
            true,
            rng,
        );
        Self {
            cfg: cfg.clone(),
            trunk,
            density,
            color,
            non_unit_dirs: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &Field3DConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.trunk
            .param_ids()
            .chain(self.density.param_ids())
            .chain(self.color.param_ids())
            .collect()
    }

    /// How many evaluations received a direction that was not unit length.
    pub fn non_unit_dirs(&self) -> usize {
        self.non_unit_dirs.load(Ordering::Relaxed)
    }

    /// Positions `B x 3`, directions `B x 3` → (`B x 3` RGB, `B x 1` σ).
    pub fn eval(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        d: Var,
        alpha: f64,
    ) -> Result<(Var, Var), TapeError> {
        let bad = tape
            .value(d)
            .rows()
            .into_iter()
            .any(|r| (r.dot(&r).sqrt() - 1.0).abs() > UNIT_DIR_TOL);
        let d = if bad {
            self.non_unit_dirs.fetch_add(1, Ordering::Relaxed);
            normalize_rows(tape, d)
        } else {
            d
        };
        let e = encode(tape, x, &EncodingConfig::full(self.cfg.frequencies), alpha)?;
        let h = self.trunk.forward(tape, store, e)?;
        let feat = tape.leaky_relu(h, LEAKY_SLOPE);
        let raw_sigma = self.density.forward(tape, store, feat)?;
        let sigma = tape.softplus(raw_sigma);
        let de = encode(tape, d, &EncodingConfig::full(self.cfg.dir_frequencies), self.cfg.dir_frequencies as f64)?;
        let cin = tape.concat_cols(&[feat, de])?;
        let raw_rgb = self.color.forward(tape, store, cin)?;
        Ok((tape.sigmoid(raw_rgb), sigma))
    }

    pub fn eval_values(&self, store: &ParamStore, x: &Mat, d: &Mat, alpha: f64) -> (Mat, Mat) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let dv = tape.input(d.clone());
        let (c, s) = self.eval(&mut tape, store, xv, dv, alpha).expect("3-column inputs");
        (tape.value(c).clone(), tape.value(s).clone())
    }
}

/// Scale each row to unit Euclidean norm.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Var {
    tape.custom(Box::new(NormalizeRows), &[x])
}

struct NormalizeRows;

impl CustomOp for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let mut out = inputs[0].clone();
        for mut r in out.rows_mut() {
            let n = r.dot(&r).sqrt().max(1e-300);
            r /= n;
        }
        out
    }

    fn backward(&self, inputs: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let x = inputs[0];
        let mut gx = Mat::zeros(x.dim());
        for i in 0..x.nrows() {
            let n = x.row(i).dot(&x.row(i)).sqrt().max(1e-300);
            let y = output.row(i);
            let g = grad.row(i);
            let gy = g.dot(&y);
            for j in 0..x.ncols() {
                gx[[i, j]] = (g[j] - y[j] * gy) / n;
            }
        }
        vec![Some(gx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adam_step, fd, AdamConfig};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small2() -> Field2DConfig {
        Field2DConfig {
            hidden: vec![16, 16],
            frequencies: 3,
        }
    }

    fn small3() -> Field3DConfig {
        Field3DConfig {
            hidden: vec![16, 16],
            color_hidden: vec![8],
            frequencies: 3,
            dir_frequencies: 2,
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-s..s))
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        let mut d = rand_mat(rng, n, 3, 1.0);
        for mut r in d.rows_mut() {
            let k = r.dot(&r).sqrt();
            r /= k;
        }
        d
    }

    #[test]
    fn zero_init_field2d_is_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let f = Field2D::new(&mut store, &small2(), &mut rng);
        let c = f.eval_values(&store, &rand_mat(&mut rng, 10, 2, 1.0), 3.0);
        assert!(c.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn field2d_fits_a_constant_gray_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let f = Field2D::new(&mut store, &small2(), &mut rng);
        store.perturb_prefix("field.", 0.5, &mut rng);
        let g = store.group_id(FIELD_GROUP).unwrap();
        let cfg = AdamConfig::with_lr(1e-2);
        for _ in 0..400 {
            let mut tape = Tape::new();
            let u = tape.input(rand_mat(&mut rng, 64, 2, 1.0));
            let c = f.eval(&mut tape, &store, u, 3.0).unwrap();
            let t = tape.constant(Array2::from_elem((64, 3), 0.5));
            let l = tape.mse(c, t).unwrap();
            store.zero_grad();
            tape.backward(l, &array![[1.0]], &mut store).unwrap();
            adam_step(&mut store, g, &cfg).unwrap();
        }
        let c = f.eval_values(&store, &rand_mat(&mut rng, 200, 2, 1.0), 3.0);
        assert!(c.iter().all(|v| (v - 0.5).abs() < 1e-2));
    }

    #[test]
    fn field2d_coordinate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let f = Field2D::new(&mut store, &small2(), &mut rng);
        store.perturb_prefix("field.", 0.3, &mut rng);
        let mut tape = Tape::new();
        let u = tape.input(rand_mat(&mut rng, 5, 2, 1.0));
        let c = f.eval(&mut tape, &store, u, 2.2).unwrap();
        let p = tape.constant(rand_mat(&mut rng, 5, 3, 1.0));
        let m = tape.mul(c, p).unwrap();
        let root = tape.sum(m);
        assert!(tape.kink_margin() > 1e-4);
        tape.backward(root, &array![[1.0]], &mut store).unwrap();
        let a = tape.grad(u).unwrap().clone();
        let n = fd::input_gradient(&mut tape, &store, root, u, 1e-6).unwrap();
        assert!(fd::relative_error_mat(&a, &n) <= 1e-4);
    }

    #[test]
    fn zero_init_heads_give_ln2_density_and_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let f = Field3D::new(&mut store, &small3(), &mut rng);
        let (c, s) = f.eval_values(&store, &rand_mat(&mut rng, 7, 3, 2.0), &unit_rows(&mut rng, 7), 3.0);
        assert!(c.iter().all(|&v| v == 0.5));
        assert!(s.iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn density_ignores_view_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let f = Field3D::new(&mut store, &small3(), &mut rng);
        store.perturb_prefix("field.", 0.5, &mut rng);
        let x = rand_mat(&mut rng, 20, 3, 2.0);
        let (c1, s1) = f.eval_values(&store, &x, &unit_rows(&mut rng, 20), 3.0);
        let (c2, s2) = f.eval_values(&store, &x, &unit_rows(&mut rng, 20), 3.0);
        assert_eq!(s1, s2);
        assert_ne!(c1, c2);
    }

    #[test]
    fn outputs_stay_in_range_for_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let f = Field3D::new(&mut store, &small3(), &mut rng);
        store.perturb_prefix("field.", 3.0, &mut rng);
        let (c, s) = f.eval_values(&store, &rand_mat(&mut rng, 10_000, 3, 5.0), &unit_rows(&mut rng, 10_000), 3.0);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_unit_direction_is_normalized_and_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let f = Field3D::new(&mut store, &small3(), &mut rng);
        store.perturb_prefix("field.", 0.5, &mut rng);
        let x = rand_mat(&mut rng, 3, 3, 1.0);
        let d = unit_rows(&mut rng, 3);
        let (a, _) = f.eval_values(&store, &x, &d, 3.0);
        assert_eq!(f.non_unit_dirs(), 0);
        let (b, _) = f.eval_values(&store, &x, &(&d * 3.0), 3.0);
        assert_eq!(f.non_unit_dirs(), 1);
        assert!((a - b).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn field3d_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let mut store = ParamStore::new();
            let f = Field3D::new(&mut store, &small3(), &mut rng);
            store.perturb_prefix("field.", 0.3, &mut rng);
            let mut tape = Tape::new();
            let x = tape.input(rand_mat(&mut rng, 4, 3, 1.0));
            let d = tape.input(rand_mat(&mut rng, 4, 3, 1.0));
            let dn = normalize_rows(&mut tape, d);
            let (c, s) = f.eval(&mut tape, &store, x, dn, 2.5).unwrap();
            let cs = tape.concat_cols(&[c, s]).unwrap();
            let p = tape.constant(rand_mat(&mut rng, 4, 4, 1.0));
            let m = tape.mul(cs, p).unwrap();
            let root = tape.sum(m);
            if tape.kink_margin() < 1e-3 {
                continue;
            }
            let ids = f.param_ids();
            let err = fd::check_params_joint(&mut tape, &mut store, root, &ids, 1e-6).unwrap();
            assert!(err <= 1e-4, "params {err}");
            tape.backward(root, &array![[1.0]], &mut store).unwrap();
            for v in [x, d] {
                let a = tape.grad(v).unwrap().clone();
                let n = fd::input_gradient(&mut tape, &store, root, v, 1e-6).unwrap();
                assert!(fd::relative_error_mat(&a, &n) <= 1e-4);
            }
        }
    }

    #[test]
    fn frequency_channels_are_inert_at_zero_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let f = Field2D::new(&mut store, &small2(), &mut rng);
        store.perturb_prefix("field.", 0.5, &mut rng);
        let u = rand_mat(&mut rng, 10, 2, 1.0);
        let before = f.eval_values(&store, &u, 0.0);
        // Rows 2.. of the first weight matrix only see frequency channels.
        let id = store.id("field.mlp.l0.w").unwrap();
        store.value_mut(id).slice_mut(ndarray::s![2.., ..]).mapv_inplace(|v| v * 7.0 + 1.0);
        assert_eq!(f.eval_values(&store, &u, 0.0), before);
        assert_ne!(f.eval_values(&store, &u, 1.5), before);
    }
}
