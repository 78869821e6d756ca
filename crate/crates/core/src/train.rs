//! Joint optimization of a field and per-frame warps: planar alignment, toy
//! 3D reconstruction, and single-view pose refinement against a frozen field.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, exp_decay_lr, AdamConfig, Mat, OptimError, ParamStore, Tape, TapeError, Var};
use crate::data::{PatchSet, ToyScene};
use crate::encoding::{Anneal, EncodingConfig};
use crate::field::{Field2D, Field2DConfig, Field3D, Field3DConfig, FIELD_GROUP};
use crate::geometry::{random_rotation_of_angle, random_unit_vector, rotation_error_deg, Pose};
use crate::metrics::{self, mean_std, MetricsError, MetricsRecord};
use crate::raster::Image;
use crate::registration::{normalize_homography, rigidity_loss, rigidity_residual};
use crate::render::{render_pixels_2d, render_rays, render_view, sample_depths, Camera, Ray, RenderError};
use crate::warp::lie::sl3_exp;
use crate::warp::{BaseTransform, WarpConfig, WarpError, WarpModel, WarpVariant, WARP_GROUP};

/// Corner error (px) below which a planar run counts as a success.
pub const SUCCESS_THRESHOLD_PX: f64 = 5.0;
/// Final rotation error (degrees) below which a pose refinement has converged.
pub const CONVERGED_DEG: f64 = 2.0;
/// Window of the loss-history means.
pub const HISTORY_WINDOW: usize = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: String, step: u64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("frame 0 warp is singular")]
    SingularAnchor,
}

impl TrainError {
    /// Errors that end a run as a failure instead of aborting the caller.
    fn is_divergence(&self) -> bool {
        matches!(self, Self::NonFinite { .. } | Self::Optim(_) | Self::SingularAnchor | Self::Warp(WarpError::Degenerate { .. }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: WarpVariant,
    pub iters: u64,
    /// Pixels (planar) or rays (3D) per step.
    pub batch: usize,
    /// Exponentially decayed from `[0]` to `[1]`.
    pub lr_field: [f64; 2],
    pub lr_warp: [f64; 2],
    pub lambda_rigid: f64,
    pub lambda_implicit: f64,
    pub lambda_anchor: f64,
    /// Coarse-to-fine window as fractions of `iters`.
    pub c2f_start: f64,
    pub c2f_end: f64,
    pub seed: u64,
    /// Samples per ray.
    pub samples: usize,
    /// Depth bounds; the dataset's own bounds when absent.
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub rigid_points_per_frame: usize,
    /// Jittered depth samples during training.
    pub stratified: bool,
    /// Planar: start every warp at its ground truth instead of the identity.
    pub gt_init: bool,
    /// Planar: std-dev of the translation-generator noise added to a
    /// ground-truth initialization.
    pub init_noise: f64,
    /// 3D: rotation of every non-anchor initial camera about its own center;
    /// the translation moves by the same amount in radians.
    pub pose_noise_deg: f64,
    /// 3D: views excluded from training and used for held-out PSNR.
    pub holdout: Vec<usize>,
    /// 3D: keep the warps at their initialization.
    pub freeze_warp: bool,
    /// Reserved: differentiate through the registration solve. Must be false.
    pub rigid_grad_through_fit: bool,
    /// Record zero wall time so repeated runs give identical records.
    pub deterministic: bool,
    pub field2d: Field2DConfig,
    pub field3d: Field3DConfig,
    pub warp: WarpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::planar()
    }
}

impl TrainConfig {
    /// Desk-scale planar defaults.
    pub fn planar() -> Self {
        Self {
            variant: WarpVariant::Inn,
            iters: 5000,
            batch: 256,
            lr_field: [1e-3, 1e-4],
            lr_warp: [3e-4, 1e-5],
            lambda_rigid: 1e2,
            lambda_implicit: 1e1,
            lambda_anchor: 1e2,
            c2f_start: 0.0,
            c2f_end: 0.4,
            seed: 0,
            samples: 32,
            near: None,
            far: None,
            rigid_points_per_frame: 16,
            stratified: true,
            gt_init: false,
            init_noise: 0.0,
            pose_noise_deg: 0.0,
            holdout: vec![],
            freeze_warp: false,
            rigid_grad_through_fit: false,
            deterministic: false,
            field2d: Field2DConfig {
                hidden: vec![64; 3],
                frequencies: 8,
            },
            field3d: Field3DConfig::default(),
            warp: WarpConfig {
                code_dim: 8,
                hidden: vec![64; 3],
                frequencies: 8,
                inn_blocks: 6,
                inn_hidden: vec![32, 32],
                ..WarpConfig::default()
            },
        }
    }

    /// Planar setting with the full-size networks.
    pub fn planar_full() -> Self {
        Self {
            field2d: Field2DConfig::default(),
            warp: WarpConfig::default(),
            ..Self::planar()
        }
    }

    /// Desk-scale toy 3D defaults.
    pub fn toy3d() -> Self {
        Self {
            iters: 2000,
            batch: 128,
            lr_field: [5e-3, 5e-4],
            lr_warp: [1e-3, 1e-5],
            c2f_start: 0.1,
            c2f_end: 0.5,
            samples: 24,
            pose_noise_deg: 15.0,
            field3d: Field3DConfig {
                hidden: vec![64; 3],
                color_hidden: vec![32],
                frequencies: 6,
                dir_frequencies: 2,
            },
            warp: WarpConfig {
                code_dim: 8,
                hidden: vec![64; 3],
                frequencies: 6,
                inn_blocks: 6,
                inn_hidden: vec![32, 32],
                coord_scale: 2.0,
                ..WarpConfig::default()
            },
            ..Self::planar()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        for (name, v) in [
            ("lambda_rigid", self.lambda_rigid),
            ("lambda_implicit", self.lambda_implicit),
            ("lambda_anchor", self.lambda_anchor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        for (name, [a, b]) in [("lr_field", self.lr_field), ("lr_warp", self.lr_warp)] {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return bad(format!("{name} = [{a}, {b}] must be positive"));
            }
        }
        if !EncodingConfig::new(0, self.c2f_start, self.c2f_end).is_valid() {
            return bad(format!("coarse-to-fine window [{}, {}]", self.c2f_start, self.c2f_end));
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if self.lambda_rigid > 0.0 && self.variant.is_neural() && self.rigid_points_per_frame < 4 {
            return bad(format!("rigid_points_per_frame = {} (need at least 4)", self.rigid_points_per_frame));
        }
        if self.rigid_grad_through_fit {
            return bad("rigid_grad_through_fit is reserved and must be false".into());
        }
        if !(self.init_noise >= 0.0 && self.pose_noise_deg >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        if self.warp.code_dim == 0 && self.variant.is_neural() {
            return bad("code_dim must be positive".into());
        }
        if !(self.warp.coord_scale > 0.0) {
            return bad("coord_scale must be positive".into());
        }
        Ok(())
    }

    fn warp_config(&self) -> WarpConfig {
        WarpConfig {
            variant: self.variant,
            ..self.warp.clone()
        }
    }

    pub fn anneal(&self, field_bands: usize, step: u64) -> Anneal {
        let f = EncodingConfig::new(field_bands, self.c2f_start, self.c2f_end).alpha(step, self.iters);
        let w = EncodingConfig::new(self.warp.frequencies, self.c2f_start, self.c2f_end).alpha(step, self.iters);
        Anneal { field: f, warp: w }
    }
}

/// Separate random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_PERTURB: u64 = 3;

/// First and last `window` losses of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    window: usize,
    head: Vec<f64>,
    tail: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            head: vec![],
            tail: VecDeque::new(),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.head.len() < self.window {
            self.head.push(v);
        }
        if self.tail.len() == self.window {
            self.tail.pop_front();
        }
        self.tail.push_back(v);
    }

    pub fn head_mean(&self) -> f64 {
        self.head.iter().sum::<f64>() / self.head.len() as f64
    }

    pub fn tail_mean(&self) -> f64 {
        self.tail.iter().sum::<f64>() / self.tail.len() as f64
    }

    pub fn last(&self) -> Option<f64> {
        self.tail.back().copied()
    }

    pub fn len(&self) -> usize {
        self.tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tail.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub store: ParamStore,
    pub history: LossHistory,
    pub rng: ChaCha8Rng,
    /// Rigidity terms skipped because the registration was degenerate.
    pub skipped_fits: u64,
    pub components: BTreeMap<String, f64>,
}

impl TrainState {
    fn new(store: ParamStore, seed: u64) -> Self {
        Self {
            step: 0,
            store,
            history: LossHistory::new(HISTORY_WINDOW),
            rng: stream(seed, STREAM_BATCH),
            skipped_fits: 0,
            components: BTreeMap::new(),
        }
    }
}

/// Loss terms recorded on a tape, before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub photometric: Var,
    pub rigid: Option<Var>,
    pub implicit: Option<Var>,
    pub anchor: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: Var,
    pub value: f64,
    /// Weighted contribution of each present term.
    pub components: BTreeMap<String, f64>,
}

/// Weighted sum of the present terms. A non-finite term aborts with its name.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &TrainConfig, step: u64) -> Result<LossValue, TrainError> {
    let mut parts = vec![("photometric", terms.photometric, 1.0)];
    for (name, v, w) in [
        ("rigid", terms.rigid, cfg.lambda_rigid),
        ("implicit", terms.implicit, cfg.lambda_implicit),
        ("anchor", terms.anchor, cfg.lambda_anchor),
    ] {
        if let Some(v) = v {
            parts.push((name, v, w));
        }
    }
    let mut components = BTreeMap::new();
    let mut total = None;
    for (name, v, w) in parts {
        let weighted = tape.scale(v, w);
        let value = tape.scalar(weighted);
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                component: name.to_string(),
                step,
            });
        }
        components.insert(name.to_string(), value);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = total.expect("photometric term always present");
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(TrainError::NonFinite {
            component: "total".into(),
            step,
        });
    }
    Ok(LossValue { total, value, components })
}

/// Mean rigidity residual over the frames of `y` (rows grouped by frame,
/// `k` per frame). Degenerate fits are skipped and counted.
fn rigidity_term(tape: &mut Tape, cam: &Mat, y: Var, k: usize, skipped: &mut u64) -> Result<Option<Var>, TrainError> {
    let frames = cam.nrows() / k;
    let mut terms = vec![];
    for t in 0..frames {
        let yt = tape.slice_rows(y, t * k, k)?;
        let ct = cam.slice(ndarray::s![t * k..(t + 1) * k, ..]).to_owned();
        match rigidity_residual(tape, &ct, yt)? {
            Some((r, _)) => terms.push(r),
            None => *skipped += 1,
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &r in &terms[1..] {
        acc = tape.add(acc, r)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / n)))
}

/// Rigidity and anchor terms from the learned warp of `cam` (rows grouped by
/// frame, frame 0 first when `anchor_frame0`).
#[allow(clippy::too_many_arguments)]
fn prior_terms(
    tape: &mut Tape,
    store: &ParamStore,
    warp: &WarpModel,
    cam: Mat,
    frames: &[usize],
    k: usize,
    cfg: &TrainConfig,
    alpha: f64,
    anchor_frame0: bool,
    skipped: &mut u64,
) -> Result<(Option<Var>, Option<Var>), TrainError> {
    if !warp.variant().is_neural() || (cfg.lambda_rigid == 0.0 && (cfg.lambda_anchor == 0.0 || !anchor_frame0)) {
        return Ok((None, None));
    }
    let x = tape.input(cam.clone());
    let (y, _) = warp.learned(tape, store, x, frames, alpha)?;
    let rigid = if cfg.lambda_rigid > 0.0 {
        rigidity_term(tape, &cam, y, k, skipped)?
    } else {
        None
    };
    let anchor = if anchor_frame0 && cfg.lambda_anchor > 0.0 {
        let y0 = tape.slice_rows(y, 0, k)?;
        let x0 = tape.slice_rows(x, 0, k)?;
        Some(tape.mse(y0, x0)?)
    } else {
        None
    };
    Ok((rigid, anchor))
}

/// Backward pass and one Adam update per group at the scheduled rates.
fn apply_update(state: &mut TrainState, loss: &LossValue, tape: &mut Tape, cfg: &TrainConfig, train_field: bool, train_warp: bool) -> Result<(), TrainError> {
    state.store.zero_grad();
    tape.backward(loss.total, &ndarray::array![[1.0]], &mut state.store)?;
    let (step, total) = (state.step, cfg.iters);
    if train_field {
        if let Some(g) = state.store.group_id(FIELD_GROUP) {
            let lr = exp_decay_lr(step, total, cfg.lr_field[0], cfg.lr_field[1]);
            adam_step(&mut state.store, g, &AdamConfig::with_lr(lr))?;
        }
    }
    if train_warp {
        if let Some(g) = state.store.group_id(WARP_GROUP) {
            let lr = exp_decay_lr(step, total, cfg.lr_warp[0], cfg.lr_warp[1]);
            adam_step(&mut state.store, g, &AdamConfig::with_lr(lr))?;
        }
    }
    state.history.push(loss.value);
    state.components = loss.components.clone();
    state.step += 1;
    Ok(())
}

fn finish_record(record: &mut MetricsRecord, started: Instant, cfg: &TrainConfig) {
    record.wall_seconds = if cfg.deterministic {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };
}

// ── Planar ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PlanarModel {
    pub field: Field2D,
    pub warp: WarpModel,
}

/// Initial per-frame bases: identity, or the ground truth followed by
/// translation noise of std-dev `init_noise` (frame 0 stays the identity).
pub fn planar_bases(cfg: &TrainConfig, data: &PatchSet) -> Vec<BaseTransform> {
    if !cfg.gt_init {
        return vec![BaseTransform::identity(2); data.len()];
    }
    let mut rng = stream(cfg.seed, STREAM_PERTURB);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    data.homographies
        .iter()
        .enumerate()
        .map(|(t, h)| {
            if t == 0 {
                return BaseTransform::identity(2);
            }
            let mut g = [0.0; 8];
            g[0] = normal.sample(&mut rng) * cfg.init_noise;
            g[1] = normal.sample(&mut rng) * cfg.init_noise;
            BaseTransform::Homography(h * sl3_exp(&g))
        })
        .collect()
}

/// Register the planar model's parameters; frame 0 of the explicit variant is frozen.
pub fn build_planar(cfg: &TrainConfig, data: &PatchSet) -> Result<(ParamStore, PlanarModel), TrainError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let mut store = ParamStore::new();
    let field = Field2D::new(&mut store, &cfg.field2d, &mut rng);
    let warp = WarpModel::new(&mut store, &cfg.warp_config(), 2, planar_bases(cfg, data), &mut rng)?;
    if cfg.variant == WarpVariant::Explicit {
        store.set_trainable(warp.pose_ids()[0], false);
    }
    Ok((store, PlanarModel { field, warp }))
}

fn planar_step(state: &mut TrainState, model: &PlanarModel, data: &PatchSet, cfg: &TrainConfig) -> Result<(), TrainError> {
    let n = data.len();
    let p = data.patch_size;
    let b = cfg.batch;
    let mut u = Mat::zeros((b, 2));
    let mut target = Mat::zeros((b, 3));
    let mut frames = Vec::with_capacity(b);
    for i in 0..b {
        let t = state.rng.gen_range(0..n);
        let (px, py) = (state.rng.gen_range(0..p), state.rng.gen_range(0..p));
        let c = data.pixel_coord(px, py);
        u[[i, 0]] = c.x;
        u[[i, 1]] = c.y;
        let rgb = data.patches[t].get(px, py);
        for k in 0..3 {
            target[[i, k]] = rgb[k];
        }
        frames.push(t);
    }
    let k = cfg.rigid_points_per_frame;
    let mut cam = Mat::zeros((n * k, 2));
    let size = p as f64;
    for r in 0..n * k {
        let c = data.patch_coord(state.rng.gen_range(0.0..size), state.rng.gen_range(0.0..size));
        cam[[r, 0]] = c.x;
        cam[[r, 1]] = c.y;
    }
    let cam_frames: Vec<usize> = (0..n).flat_map(|t| std::iter::repeat(t).take(k)).collect();

    let alpha = cfg.anneal(cfg.field2d.frequencies, state.step);
    let store = &state.store;
    let mut tape = Tape::new();
    let uv = tape.input(u);
    let (rgb, out) = render_pixels_2d(&mut tape, store, &model.field, &model.warp, uv, &frames, alpha)?;
    let tv = tape.constant(target);
    let photometric = tape.mse(rgb, tv)?;
    let implicit = match out.cycle {
        Some(c) if cfg.lambda_implicit > 0.0 => Some(tape.mse(out.input, c)?),
        _ => None,
    };
    let mut skipped = 0;
    let (rigid, anchor) = if k > 0 {
        prior_terms(&mut tape, store, &model.warp, cam, &cam_frames, k, cfg, alpha.warp, true, &mut skipped)?
    } else {
        (None, None)
    };
    state.skipped_fits += skipped;
    let terms = LossTerms {
        photometric,
        rigid,
        implicit,
        anchor,
    };
    let loss = total_loss(&mut tape, &terms, cfg, state.step)?;
    apply_update(state, &loss, &mut tape, cfg, true, true)
}

/// Render patch `t` through its warp and the field.
pub fn render_patch(store: &ParamStore, model: &PlanarModel, data: &PatchSet, t: usize, alpha: Anneal) -> Result<Image, TrainError> {
    let p = data.patch_size;
    let u = Array2::from_shape_fn((p * p, 2), |(i, j)| {
        let c = data.pixel_coord(i % p, i / p);
        c[j]
    });
    let mut tape = Tape::new();
    let uv = tape.input(u);
    let (rgb, _) = render_pixels_2d(&mut tape, store, &model.field, &model.warp, uv, &vec![t; p * p], alpha)?;
    let v = tape.value(rgb);
    Ok(Image::from_fn(p, p, |x, y| {
        let i = y * p + x;
        [v[[i, 0]], v[[i, 1]], v[[i, 2]]]
    }))
}

/// Per-frame homographies: direct for the explicit variant, otherwise a DLT
/// fit on an 8 x 8 grid. All frames are realigned by the inverse of frame 0,
/// which removes what the soft anchor leaves of the gauge.
pub fn planar_homographies(store: &ParamStore, model: &PlanarModel, data: &PatchSet, alpha: f64) -> Result<Vec<Matrix3<f64>>, TrainError> {
    let grid = data.grid(8);
    let hs: Vec<Matrix3<f64>> = (0..data.len())
        .map(|t| model.warp.extract_homography(store, t, &grid, alpha))
        .collect::<Result<_, _>>()?;
    let Some(inv0) = hs[0].try_inverse() else {
        return Err(TrainError::SingularAnchor);
    };
    Ok(hs.iter().map(|h| normalize_homography(&(inv0 * h))).collect())
}

/// Corner error, patch PSNR and SSIM of the current parameters.
pub fn evaluate_planar(
    store: &ParamStore,
    model: &PlanarModel,
    data: &PatchSet,
    cfg: &TrainConfig,
    record: &mut MetricsRecord,
) -> Result<Vec<Matrix3<f64>>, TrainError> {
    let alpha = cfg.anneal(cfg.field2d.frequencies, cfg.iters);
    let hs = planar_homographies(store, model, data, alpha.warp)?;
    let corners = data.corners();
    let errs: Vec<f64> = hs
        .iter()
        .zip(&data.homographies)
        .map(|(e, g)| metrics::corner_error(e, g, &corners, data.scale))
        .collect();
    let (m, s) = mean_std(&errs);
    record.corner_error_px = m;
    record.corner_error_std = s;
    let mut mse = 0.0;
    let mut ssim = 0.0;
    for t in 0..data.len() {
        let img = render_patch(store, model, data, t, alpha)?;
        mse += metrics::mse(&img, &data.patches[t])?;
        ssim += metrics::ssim(&img, &data.patches[t])?;
    }
    record.psnr_db = metrics::psnr_from_mse(mse / data.len() as f64);
    record.ssim = ssim / data.len() as f64;
    record.success = !record.failed() && record.corner_error_px < SUCCESS_THRESHOLD_PX;
    Ok(hs)
}

#[derive(Clone, Debug)]
pub struct PlanarOutcome {
    pub state: TrainState,
    pub model: PlanarModel,
    pub record: MetricsRecord,
    pub homographies: Vec<Matrix3<f64>>,
}

/// Joint planar optimization of the image field and the patch warps.
pub fn train_planar(cfg: &TrainConfig, data: &PatchSet) -> Result<PlanarOutcome, TrainError> {
    train_planar_observed(cfg, data, |_, _| {})
}

/// [`train_planar`] calling `observe` after every step.
pub fn train_planar_observed<F>(cfg: &TrainConfig, data: &PatchSet, mut observe: F) -> Result<PlanarOutcome, TrainError>
where
    F: FnMut(&TrainState, &PlanarModel),
{
    let started = Instant::now();
    let (store, model) = build_planar(cfg, data)?;
    let mut state = TrainState::new(store, cfg.seed);
    let mut record = MetricsRecord::new(&format!("planar-{}-s{}", cfg.variant, cfg.seed), cfg.variant.as_str(), cfg.seed);
    while state.step < cfg.iters {
        if let Err(e) = planar_step(&mut state, &model, data, cfg) {
            if !e.is_divergence() {
                return Err(e);
            }
            record.failure = e.to_string();
            break;
        }
        observe(&state, &model);
    }
    let homographies = if record.failed() {
        record.corner_error_px = f64::INFINITY;
        vec![]
    } else {
        match evaluate_planar(&state.store, &model, data, cfg, &mut record) {
            Ok(h) => h,
            Err(e) if e.is_divergence() => {
                record.failure = e.to_string();
                record.corner_error_px = f64::INFINITY;
                record.success = false;
                vec![]
            }
            Err(e) => return Err(e),
        }
    };
    finish_record(&mut record, started, cfg);
    Ok(PlanarOutcome {
        state,
        model,
        record,
        homographies,
    })
}

// ── Toy 3D ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub field: Field3D,
    pub warp: WarpModel,
    /// Scene view index of each warp frame.
    pub views: Vec<usize>,
}

/// Rotate a camera by `angle_rad` about a random axis through its own center
/// and move the center `shift` scene units in a random direction.
pub fn perturb_pose<R: Rng>(pose: &Pose, angle_rad: f64, shift: f64, rng: &mut R) -> Pose {
    let rotation = pose.rotation * random_rotation_of_angle(rng, angle_rad);
    Pose::new(rotation, pose.translation + random_unit_vector(rng) * shift)
}

/// Initial camera poses for the training views: frame 0 exact, every other
/// frame rotated by `pose_noise_deg` and shifted by the same angle in radians.
pub fn toy_initial_poses(cfg: &TrainConfig, gt: &[Pose]) -> Vec<Pose> {
    let mut rng = stream(cfg.seed, STREAM_PERTURB);
    gt.iter()
        .enumerate()
        .map(|(t, p)| {
            if t == 0 || cfg.pose_noise_deg == 0.0 {
                *p
            } else {
                perturb_pose(p, cfg.pose_noise_deg.to_radians(), cfg.pose_noise_deg.to_radians(), &mut rng)
            }
        })
        .collect()
}

fn depth_bounds(cfg: &TrainConfig, scene: &ToyScene) -> (f64, f64) {
    (cfg.near.unwrap_or(scene.near), cfg.far.unwrap_or(scene.far))
}

pub fn build_toy3d(cfg: &TrainConfig, scene: &ToyScene) -> Result<(ParamStore, ToyModel), TrainError> {
    cfg.validate()?;
    let views: Vec<usize> = (0..scene.len()).filter(|v| !cfg.holdout.contains(v)).collect();
    if views.len() < 3 || cfg.holdout.iter().any(|&v| v >= scene.len()) {
        return Err(TrainError::Config(format!(
            "{} views with holdout {:?} leaves fewer than 3 training views",
            scene.len(),
            cfg.holdout
        )));
    }
    let gt: Vec<Pose> = views.iter().map(|&v| scene.poses[v]).collect();
    let bases = toy_initial_poses(cfg, &gt).into_iter().map(BaseTransform::Rigid).collect();
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let mut store = ParamStore::new();
    let field = Field3D::new(&mut store, &cfg.field3d, &mut rng);
    let warp = WarpModel::new(&mut store, &cfg.warp_config(), 3, bases, &mut rng)?;
    if cfg.variant == WarpVariant::Explicit {
        store.set_trainable(warp.pose_ids()[0], false);
    }
    Ok((store, ToyModel { field, warp, views }))
}

/// `k` random camera-space points per listed frame, on random pixel rays at
/// uniform depths in `[near, far]`.
fn ray_points(rng: &mut ChaCha8Rng, camera: &Camera, frames: usize, k: usize, near: f64, far: f64) -> Mat {
    let k_inv = camera.k_inv();
    let mut cam = Mat::zeros((frames * k, 3));
    for r in 0..frames * k {
        let px = rng.gen_range(0.0..camera.width as f64);
        let py = rng.gen_range(0.0..camera.height as f64);
        let z = rng.gen_range(near..far);
        let p = k_inv * Vector3::new(px, py, 1.0) * z;
        for j in 0..3 {
            cam[[r, j]] = p[j];
        }
    }
    cam
}

struct RayBatch {
    rays: Vec<Ray>,
    frames: Vec<usize>,
    depths: Vec<Vec<f64>>,
    target: Mat,
}

fn ray_batch(rng: &mut ChaCha8Rng, scene: &ToyScene, views: &[usize], cfg: &TrainConfig) -> RayBatch {
    let (near, far) = depth_bounds(cfg, scene);
    let cam = &scene.camera;
    let b = cfg.batch;
    let mut batch = RayBatch {
        rays: Vec::with_capacity(b),
        frames: Vec::with_capacity(b),
        depths: Vec::with_capacity(b),
        target: Mat::zeros((b, 3)),
    };
    for i in 0..b {
        let f = rng.gen_range(0..views.len());
        let (px, py) = (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height));
        batch.rays.push(cam.ray(px, py, near, far));
        batch.frames.push(f);
        let d = if cfg.stratified {
            sample_depths(near, far, cfg.samples, Some(&mut *rng))
        } else {
            sample_depths::<ChaCha8Rng>(near, far, cfg.samples, None)
        };
        batch.depths.push(d);
        let c = scene.images[views[f]].get(px, py);
        for k in 0..3 {
            batch.target[[i, k]] = c[k];
        }
    }
    batch
}

fn toy_step(state: &mut TrainState, model: &ToyModel, scene: &ToyScene, cfg: &TrainConfig) -> Result<(), TrainError> {
    let batch = ray_batch(&mut state.rng, scene, &model.views, cfg);
    let (near, far) = depth_bounds(cfg, scene);
    let frames = model.views.len();
    let k = cfg.rigid_points_per_frame;
    let cam = ray_points(&mut state.rng, &scene.camera, frames, k, near, far);
    let cam_frames: Vec<usize> = (0..frames).flat_map(|t| std::iter::repeat(t).take(k)).collect();

    let alpha = cfg.anneal(cfg.field3d.frequencies, state.step);
    let store = &state.store;
    let mut tape = Tape::new();
    let (rgb, out) = render_rays(
        &mut tape,
        store,
        &model.field,
        &model.warp,
        &batch.rays,
        &batch.frames,
        &batch.depths,
        alpha,
        None,
    )?;
    let tv = tape.constant(batch.target);
    let photometric = tape.mse(rgb, tv)?;
    let train_warp = !cfg.freeze_warp;
    let implicit = match out.cycle {
        Some(c) if cfg.lambda_implicit > 0.0 && train_warp => Some(tape.mse(out.input, c)?),
        _ => None,
    };
    let mut skipped = 0;
    let (rigid, anchor) = if k > 0 && train_warp {
        prior_terms(&mut tape, store, &model.warp, cam, &cam_frames, k, cfg, alpha.warp, true, &mut skipped)?
    } else {
        (None, None)
    };
    state.skipped_fits += skipped;
    let terms = LossTerms {
        photometric,
        rigid,
        implicit,
        anchor,
    };
    let loss = total_loss(&mut tape, &terms, cfg, state.step)?;
    apply_update(state, &loss, &mut tape, cfg, true, train_warp)
}

/// Camera-space sample points for rigid pose extraction: a 4 x 4 pixel grid
/// at three depths.
pub fn pose_samples(camera: &Camera, near: f64, far: f64) -> Vec<Vector3<f64>> {
    let k_inv = camera.k_inv();
    let mut out = vec![];
    for z in [near + 0.25 * (far - near), 0.5 * (near + far), near + 0.75 * (far - near)] {
        for j in 0..4 {
            for i in 0..4 {
                let px = (i as f64 + 0.5) / 4.0 * camera.width as f64;
                let py = (j as f64 + 0.5) / 4.0 * camera.height as f64;
                out.push(k_inv * Vector3::new(px, py, 1.0) * z);
            }
        }
    }
    out
}

fn to_image(camera: &Camera, pixels: Vec<[f64; 3]>) -> Image {
    Image {
        width: camera.width,
        height: camera.height,
        pixels,
    }
}

const RENDER_CHUNK: usize = 256;

/// Render `pose` through the field with an explicit identity warp.
pub fn render_with_pose(
    store: &ParamStore,
    field: &Field3D,
    cfg: &TrainConfig,
    scene: &ToyScene,
    pose: &Pose,
) -> Result<Image, TrainError> {
    // Registering into a scratch copy leaves the trained warp untouched.
    let mut scratch = store.clone();
    let wcfg = WarpConfig {
        variant: WarpVariant::Explicit,
        ..cfg.warp.clone()
    };
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let probe = WarpModel::new(&mut scratch, &wcfg, 3, vec![BaseTransform::Rigid(*pose)], &mut rng)?;
    let (near, far) = depth_bounds(cfg, scene);
    let alpha = cfg.anneal(cfg.field3d.frequencies, cfg.iters);
    let px = render_view(&scratch, field, &probe, &scene.camera, 0, near, far, cfg.samples, alpha, None, RENDER_CHUNK)?;
    Ok(to_image(&scene.camera, px))
}

#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub state: TrainState,
    pub model: ToyModel,
    pub record: MetricsRecord,
    /// Extracted camera-to-world pose of each training view.
    pub poses: Vec<Pose>,
    /// Held-out PSNR before and after training, when views were held out.
    pub holdout_psnr: Option<(f64, f64)>,
}

fn holdout_psnr(store: &ParamStore, model: &ToyModel, cfg: &TrainConfig, scene: &ToyScene) -> Result<Option<f64>, TrainError> {
    if cfg.holdout.is_empty() {
        return Ok(None);
    }
    let mut mse = 0.0;
    for &v in &cfg.holdout {
        let img = render_with_pose(store, &model.field, cfg, scene, &scene.poses[v])?;
        mse += metrics::mse(&img, &scene.images[v])?;
    }
    Ok(Some(metrics::psnr_from_mse(mse / cfg.holdout.len() as f64)))
}

/// Aligned pose errors and training-view PSNR of the current parameters.
pub fn evaluate_toy3d(
    store: &ParamStore,
    model: &ToyModel,
    scene: &ToyScene,
    cfg: &TrainConfig,
    record: &mut MetricsRecord,
) -> Result<Vec<Pose>, TrainError> {
    let (near, far) = depth_bounds(cfg, scene);
    let alpha = cfg.anneal(cfg.field3d.frequencies, cfg.iters);
    let samples = pose_samples(&scene.camera, near, far);
    let poses = (0..model.views.len())
        .map(|t| Ok(model.warp.extract_pose(store, t, &samples, alpha.warp)?))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let gt: Vec<Pose> = model.views.iter().map(|&v| scene.poses[v]).collect();
    let (rot, trans) = metrics::aligned_pose_errors(&poses, &gt)?;
    record.rot_err_deg = rot;
    record.trans_err_x100 = trans;
    let mut mse = 0.0;
    let mut ssim = 0.0;
    for (t, &v) in model.views.iter().enumerate() {
        let px = render_view(store, &model.field, &model.warp, &scene.camera, t, near, far, cfg.samples, alpha, None, RENDER_CHUNK)?;
        let img = to_image(&scene.camera, px);
        mse += metrics::mse(&img, &scene.images[v])?;
        ssim += metrics::ssim(&img, &scene.images[v]).unwrap_or(f64::NAN);
    }
    record.psnr_db = metrics::psnr_from_mse(mse / model.views.len() as f64);
    record.ssim = ssim / model.views.len() as f64;
    record.success = !record.failed();
    Ok(poses)
}

/// Joint optimization of a radiance field and the camera warps of a toy scene.
pub fn train_toy3d(cfg: &TrainConfig, scene: &ToyScene) -> Result<ToyOutcome, TrainError> {
    train_toy3d_observed(cfg, scene, |_, _| {})
}

/// [`train_toy3d`] calling `observe` after every step.
pub fn train_toy3d_observed<F>(cfg: &TrainConfig, scene: &ToyScene, mut observe: F) -> Result<ToyOutcome, TrainError>
where
    F: FnMut(&TrainState, &ToyModel),
{
    let started = Instant::now();
    let (store, model) = build_toy3d(cfg, scene)?;
    let before = holdout_psnr(&store, &model, cfg, scene)?;
    let mut state = TrainState::new(store, cfg.seed);
    let mut record = MetricsRecord::new(&format!("toy3d-{}-s{}", cfg.variant, cfg.seed), cfg.variant.as_str(), cfg.seed);
    while state.step < cfg.iters {
        if let Err(e) = toy_step(&mut state, &model, scene, cfg) {
            if !e.is_divergence() {
                return Err(e);
            }
            record.failure = e.to_string();
            break;
        }
        observe(&state, &model);
    }
    let mut poses = vec![];
    let mut holdout = None;
    if !record.failed() {
        match evaluate_toy3d(&state.store, &model, scene, cfg, &mut record) {
            Ok(p) => poses = p,
            Err(e) if e.is_divergence() => record.failure = e.to_string(),
            Err(e) => return Err(e),
        }
        let after = holdout_psnr(&state.store, &model, cfg, scene)?;
        holdout = before.zip(after);
    }
    if record.failed() {
        record.success = false;
        record.rot_err_deg = f64::INFINITY;
    }
    finish_record(&mut record, started, cfg);
    Ok(ToyOutcome {
        state,
        model,
        record,
        poses,
        holdout_psnr: holdout,
    })
}

// ── Single-view refinement ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub step: u64,
    pub rot_err_deg: f64,
    pub trans_err_x100: f64,
    /// Residual of the best rigid fit to the warp on fixed sample points.
    pub rigidity_residual: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub trajectory: Vec<RefineStep>,
    pub initial_pose: Pose,
    pub final_pose: Pose,
    pub converged: bool,
    /// Field parameters bit-identical before and after.
    pub field_unchanged: bool,
    pub failure: Option<String>,
}

/// Recover the pose of `scene` view `view` against a frozen field, starting
/// from the ground truth rotated by `offset_deg` about its center, axis drawn
/// from `cfg.seed`. Only warp parameters are optimized; every
/// `record_every` steps the rigid fit of the warp is logged.
pub fn pose_refine_single_view(
    field_store: &ParamStore,
    field: &Field3D,
    scene: &ToyScene,
    view: usize,
    offset_deg: f64,
    cfg: &TrainConfig,
    record_every: u64,
) -> Result<RefineOutcome, TrainError> {
    cfg.validate()?;
    if view >= scene.len() {
        return Err(TrainError::Config(format!("view {view} of {}", scene.len())));
    }
    let gt = scene.poses[view];
    let mut prng = stream(cfg.seed, STREAM_PERTURB);
    let init = if offset_deg == 0.0 {
        gt
    } else {
        perturb_pose(&gt, offset_deg.to_radians(), 0.0, &mut prng)
    };
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let mut store = ParamStore::new();
    let field = Field3D::new(&mut store, field.config(), &mut rng);
    let missing = store.copy_values_from(field_store, "field.");
    if !missing.is_empty() {
        return Err(TrainError::Config(format!("field parameters do not match: {missing:?}")));
    }
    store.set_trainable_prefix("field.", false);
    let warp = WarpModel::new(&mut store, &cfg.warp_config(), 3, vec![BaseTransform::Rigid(init)], &mut rng)?;
    let frozen: Vec<Mat> = field.param_ids().iter().map(|&id| store.value(id).clone()).collect();

    let model = ToyModel {
        field,
        warp,
        views: vec![view],
    };
    let (near, far) = depth_bounds(cfg, scene);
    let samples = pose_samples(&scene.camera, near, far);
    let sample_mat = Array2::from_shape_fn((samples.len(), 3), |(i, j)| samples[i][j]);
    let mut state = TrainState::new(store, cfg.seed);
    let mut trajectory = vec![];
    let mut failure = None;
    let record = |state: &TrainState, model: &ToyModel| -> Result<RefineStep, TrainError> {
        let alpha = cfg.anneal(cfg.field3d.frequencies, state.step);
        let world = model.warp.warp_values(&state.store, 0, &sample_mat, alpha.warp)?;
        let (residual, _) = rigidity_loss(&sample_mat, &world).map_err(WarpError::from)?;
        let pose = model.warp.extract_pose(&state.store, 0, &samples, alpha.warp)?;
        Ok(RefineStep {
            step: state.step,
            rot_err_deg: rotation_error_deg(&pose.rotation, &gt.rotation),
            trans_err_x100: (pose.center() - gt.center()).norm() * 100.0,
            rigidity_residual: residual,
            loss: state.history.last().unwrap_or(f64::NAN),
        })
    };
    trajectory.push(record(&state, &model)?);
    let every = record_every.max(1);
    while state.step < cfg.iters {
        let step = refine_step(&mut state, &model, scene, view, cfg);
        if let Err(e) = step {
            if !e.is_divergence() {
                return Err(e);
            }
            failure = Some(e.to_string());
            break;
        }
        if state.step % every == 0 || state.step == cfg.iters {
            trajectory.push(record(&state, &model)?);
        }
    }
    let alpha = cfg.anneal(cfg.field3d.frequencies, state.step);
    let final_pose = model.warp.extract_pose(&state.store, 0, &samples, alpha.warp)?;
    let field_unchanged = model
        .field
        .param_ids()
        .iter()
        .zip(&frozen)
        .all(|(&id, v)| state.store.value(id) == v);
    let last = trajectory.last().map_or(f64::INFINITY, |s| s.rot_err_deg);
    Ok(RefineOutcome {
        trajectory,
        initial_pose: init,
        final_pose,
        converged: failure.is_none() && last < CONVERGED_DEG,
        field_unchanged,
        failure,
    })
}

fn refine_step(state: &mut TrainState, model: &ToyModel, scene: &ToyScene, view: usize, cfg: &TrainConfig) -> Result<(), TrainError> {
    let batch = ray_batch(&mut state.rng, scene, &[view], cfg);
    let (near, far) = depth_bounds(cfg, scene);
    let k = cfg.rigid_points_per_frame;
    let cam = ray_points(&mut state.rng, &scene.camera, 1, k, near, far);
    let alpha = cfg.anneal(cfg.field3d.frequencies, state.step);
    let store = &state.store;
    let mut tape = Tape::new();
    let (rgb, out) = render_rays(
        &mut tape,
        store,
        &model.field,
        &model.warp,
        &batch.rays,
        &batch.frames,
        &batch.depths,
        alpha,
        None,
    )?;
    let tv = tape.constant(batch.target);
    let photometric = tape.mse(rgb, tv)?;
    let implicit = match out.cycle {
        Some(c) if cfg.lambda_implicit > 0.0 => Some(tape.mse(out.input, c)?),
        _ => None,
    };
    let mut skipped = 0;
    let (rigid, _) = if k > 0 {
        prior_terms(&mut tape, store, &model.warp, cam, &vec![0; k], k, cfg, alpha.warp, false, &mut skipped)?
    } else {
        (None, None)
    };
    state.skipped_fits += skipped;
    let terms = LossTerms {
        photometric,
        rigid,
        implicit,
        anchor: None,
    };
    let loss = total_loss(&mut tape, &terms, cfg, state.step)?;
    apply_update(state, &loss, &mut tape, cfg, false, true)
}

#[cfg(test)]
mod tests;
