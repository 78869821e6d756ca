//! Per-frame warps from camera space to world space.
//!
//! Every warp is `base_t ∘ learned_t`: a fixed per-frame transform (identity,
//! a ground-truth initialization, or a perturbed pose) applied after the
//! trainable part. The trainable part is one of four parameterizations:
//! explicit Lie-algebra poses, a naive residual MLP, a forward/backward MLP
//! pair, or a conditional coupling-block network.

mod inn;
pub mod lie;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GroupId, Mat, Mlp, MlpShape, ParamId, ParamStore, Tape, TapeError, Var};
use crate::encoding::{encode, EncodingConfig};
use crate::geometry::Pose;
use crate::registration::{dlt_homography, umeyama, Correspondences, RegistrationError};

pub use inn::CouplingBlock;
use lie::{apply_homography_rows, apply_rigid_rows, homography_row, pose_row, MatExp};

#[derive(Debug, Error, PartialEq)]
pub enum WarpError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("frame {frame} out of range ({frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("warped point in row {row} maps to infinity")]
    Degenerate { row: usize },
    #[error("base transform {frame} does not match a {dim}D warp")]
    BaseMismatch { frame: usize, dim: usize },
    #[error("the {0} warp has no analytic inverse")]
    NotInvertible(WarpVariant),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpVariant {
    Explicit,
    Naive,
    Implicit,
    Inn,
}

impl Default for WarpVariant {
    fn default() -> Self {
        Self::Inn
    }
}

impl WarpVariant {
    pub const ALL: [WarpVariant; 4] = [Self::Explicit, Self::Naive, Self::Implicit, Self::Inn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Explicit => "explicit",
            Self::Naive => "naive",
            Self::Implicit => "implicit",
            Self::Inn => "inn",
        }
    }

    pub fn is_neural(self) -> bool {
        self != Self::Explicit
    }
}

impl fmt::Display for WarpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WarpVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown warp variant `{s}` (expected explicit|naive|implicit|inn)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpConfig {
    /// Chosen by the run configuration, not serialized here.
    #[serde(skip)]
    pub variant: WarpVariant,
    /// Latent code dimension.
    pub code_dim: usize,
    /// Std-dev of the normal draw used to initialize latent codes.
    pub code_init_std: f64,
    /// Hidden widths of the naive / implicit MLPs.
    pub hidden: Vec<usize>,
    /// Encoding bands of the naive / implicit MLP inputs.
    pub frequencies: usize,
    pub inn_blocks: usize,
    /// Hidden widths of each coupling conditioning net.
    pub inn_hidden: Vec<usize>,
    /// Bound on the per-block log-scale.
    pub inn_clamp: f64,
    /// Learned warps act on `x / coord_scale` and rescale their output.
    pub coord_scale: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            variant: WarpVariant::Inn,
            code_dim: 16,
            code_init_std: 0.1,
            hidden: vec![256; 5],
            frequencies: 8,
            inn_blocks: 6,
            inn_hidden: vec![128, 128],
            inn_clamp: 2.0,
            coord_scale: 1.0,
        }
    }
}

/// Fixed per-frame transform applied after the learned warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaseTransform {
    Homography(Matrix3<f64>),
    Rigid(Pose),
}

impl BaseTransform {
    fn dim(&self) -> usize {
        match self {
            Self::Homography(_) => 2,
            Self::Rigid(_) => 3,
        }
    }

    fn row(&self) -> Vec<f64> {
        match self {
            Self::Homography(h) => homography_row(h),
            Self::Rigid(p) => pose_row(p),
        }
    }

    pub fn identity(dim: usize) -> Self {
        if dim == 2 {
            Self::Homography(Matrix3::identity())
        } else {
            Self::Rigid(Pose::identity())
        }
    }
}

/// Tape nodes produced by one warp evaluation.
#[derive(Clone, Copy, Debug)]
pub struct WarpOutput {
    /// Camera-space rows that were warped.
    pub input: Var,
    /// `base ∘ learned`, in world units.
    pub world: Var,
    /// Learned part only, in camera units.
    pub learned: Var,
    /// Implicit variant: backward net applied to `learned`.
    pub cycle: Option<Var>,
}

pub const WARP_GROUP: &str = "warp";

#[derive(Clone, Debug)]
pub struct WarpModel {
    cfg: WarpConfig,
    dim: usize,
    bases: Vec<BaseTransform>,
    poses: Vec<ParamId>,
    codes: Vec<ParamId>,
    fwd: Option<Mlp>,
    bwd: Option<Mlp>,
    blocks: Vec<CouplingBlock>,
    group: GroupId,
}

impl WarpModel {
    /// Register the warp parameters in `store` (group `"warp"`). One frame per
    /// base transform; every learned warp starts at the identity.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &WarpConfig,
        dim: usize,
        bases: Vec<BaseTransform>,
        rng: &mut R,
    ) -> Result<Self, WarpError> {
        for (frame, b) in bases.iter().enumerate() {
            if b.dim() != dim {
                return Err(WarpError::BaseMismatch { frame, dim });
            }
        }
        let group = store.group(WARP_GROUP);
        let frames = bases.len();
        let mut model = Self {
            cfg: cfg.clone(),
            dim,
            bases,
            poses: vec![],
            codes: vec![],
            fwd: None,
            bwd: None,
            blocks: vec![],
            group,
        };
        let pose_dim = if dim == 2 { 8 } else { 6 };
        match cfg.variant {
            WarpVariant::Explicit => {
                model.poses = (0..frames)
                    .map(|t| store.insert(&format!("warp.pose.{t:03}"), Mat::zeros((1, pose_dim)), group))
                    .collect();
            }
            variant => {
                let normal = Normal::new(0.0, cfg.code_init_std.max(0.0)).expect("finite std");
                model.codes = (0..frames)
                    .map(|t| {
                        let v = Array2::from_shape_fn((1, cfg.code_dim), |_| normal.sample(rng));
                        store.insert(&format!("warp.code.{t:03}"), v, group)
                    })
                    .collect();
                let input = EncodingConfig::full(cfg.frequencies).output_dim(dim) + cfg.code_dim;
                let shape = MlpShape::new(input, &cfg.hidden, dim);
                match variant {
                    WarpVariant::Naive | WarpVariant::Implicit => {
                        model.fwd = Some(Mlp::new(store, group, "warp.fwd", shape.clone(), true, rng));
                        if variant == WarpVariant::Implicit {
                            model.bwd = Some(Mlp::new(store, group, "warp.bwd", shape, true, rng));
                        }
                    }
                    _ => {
                        model.blocks = (0..cfg.inn_blocks)
                            .map(|b| CouplingBlock::new(store, group, b, dim, cfg, rng))
                            .collect();
                    }
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &WarpConfig {
        &self.cfg
    }

    pub fn variant(&self) -> WarpVariant {
        self.cfg.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.bases.len()
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn base(&self, t: usize) -> &BaseTransform {
        &self.bases[t]
    }

    pub fn set_base(&mut self, t: usize, base: BaseTransform) -> Result<(), WarpError> {
        if base.dim() != self.dim {
            return Err(WarpError::BaseMismatch { frame: t, dim: self.dim });
        }
        self.bases[t] = base;
        Ok(())
    }

    /// Explicit variant: per-frame generator entries.
    pub fn pose_ids(&self) -> &[ParamId] {
        &self.poses
    }

    /// Neural variants: per-frame latent codes.
    pub fn code_ids(&self) -> &[ParamId] {
        &self.codes
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    /// Shared network weights (everything except codes and explicit poses).
    pub fn net_param_ids(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.fwd.iter().chain(self.bwd.iter()).flat_map(|m| m.param_ids()).collect();
        for b in &self.blocks {
            out.extend(b.param_ids());
        }
        out
    }

    fn check_frames(&self, frames: &[usize]) -> Result<(), WarpError> {
        match frames.iter().find(|&&t| t >= self.frames()) {
            Some(&frame) => Err(WarpError::FrameOutOfRange {
                frame,
                frames: self.frames(),
            }),
            None => Ok(()),
        }
    }

    /// Codes for each row, `B x D`.
    fn code_rows(&self, tape: &mut Tape, store: &ParamStore, frames: &[usize]) -> Result<Var, TapeError> {
        let all: Vec<Var> = self.codes.iter().map(|&id| tape.param(store, id)).collect();
        let stacked = tape.concat_rows(&all)?;
        tape.gather(stacked, frames.to_vec())
    }

    /// The trainable part of the warp for rows `x` belonging to `frames`.
    pub fn learned(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        frames: &[usize],
        alpha: f64,
    ) -> Result<(Var, Option<Var>), WarpError> {
        self.check_frames(frames)?;
        check_points(tape, x, frames.len(), self.dim)?;
        if self.cfg.variant == WarpVariant::Explicit {
            let exps: Vec<Var> = self
                .poses
                .iter()
                .map(|&id| {
                    let p = tape.param(store, id);
                    let op: MatExp = if self.dim == 2 { MatExp::sl3() } else { MatExp::se3() };
                    tape.custom(Box::new(op), &[p])
                })
                .collect();
            let stacked = tape.concat_rows(&exps)?;
            let rows = tape.gather(stacked, frames.to_vec())?;
            let y = if self.dim == 2 {
                apply_homography_rows(tape, x, rows)?.map_err(|row| WarpError::Degenerate { row })?
            } else {
                apply_rigid_rows(tape, x, rows)?
            };
            return Ok((y, None));
        }
        let s = self.cfg.coord_scale;
        let u = tape.scale(x, 1.0 / s);
        let codes = self.code_rows(tape, store, frames)?;
        let enc = EncodingConfig::full(self.cfg.frequencies);
        let (y, cycle) = match self.cfg.variant {
            WarpVariant::Inn => {
                let mut h = u;
                for b in &self.blocks {
                    h = b.forward(tape, store, h, codes)?;
                }
                (h, None)
            }
            _ => {
                let fwd = self.fwd.as_ref().expect("mlp variants own a forward net");
                let y = residual(tape, store, fwd, u, codes, &enc, alpha)?;
                let cycle = match &self.bwd {
                    Some(bwd) => Some(residual(tape, store, bwd, y, codes, &enc, alpha)?),
                    None => None,
                };
                (y, cycle)
            }
        };
        let y = tape.scale(y, s);
        let cycle = cycle.map(|c| tape.scale(c, s));
        Ok((y, cycle))
    }

    /// Apply the fixed per-frame base transforms to rows `y`.
    pub fn apply_base(&self, tape: &mut Tape, y: Var, frames: &[usize]) -> Result<Var, WarpError> {
        self.check_frames(frames)?;
        let k = if self.dim == 2 { 9 } else { 12 };
        let mut m = Mat::zeros((frames.len(), k));
        for (i, &t) in frames.iter().enumerate() {
            for (j, v) in self.bases[t].row().into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        let mv = tape.constant(m);
        if self.dim == 2 {
            apply_homography_rows(tape, y, mv)?.map_err(|row| WarpError::Degenerate { row })
        } else {
            Ok(apply_rigid_rows(tape, y, mv)?)
        }
    }

    /// Full warp `base ∘ learned` of rows `x`; row `i` belongs to `frames[i]`.
    pub fn warp_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        frames: &[usize],
        alpha: f64,
    ) -> Result<WarpOutput, WarpError> {
        let (learned, cycle) = self.learned(tape, store, x, frames, alpha)?;
        let world = self.apply_base(tape, learned, frames)?;
        Ok(WarpOutput {
            input: x,
            world,
            learned,
            cycle,
        })
    }

    /// Warp a batch of points that all belong to frame `t`.
    pub fn warp_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: usize,
        x: Var,
        alpha: f64,
    ) -> Result<WarpOutput, WarpError> {
        let n = tape.value(x).nrows();
        self.warp_rows(tape, store, x, &vec![t; n], alpha)
    }

    /// Analytic inverse of the learned part (coupling variant only).
    pub fn inverse_learned(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        frames: &[usize],
    ) -> Result<Var, WarpError> {
        if self.cfg.variant != WarpVariant::Inn {
            return Err(WarpError::NotInvertible(self.cfg.variant));
        }
        self.check_frames(frames)?;
        check_points(tape, y, frames.len(), self.dim)?;
        let s = self.cfg.coord_scale;
        let codes = self.code_rows(tape, store, frames)?;
        let mut h = tape.scale(y, 1.0 / s);
        for b in self.blocks.iter().rev() {
            h = b.inverse(tape, store, h, codes)?;
        }
        Ok(tape.scale(h, s))
    }

    /// Plain-value full warp of `points` (rows) for frame `t`.
    pub fn warp_values(&self, store: &ParamStore, t: usize, points: &Mat, alpha: f64) -> Result<Mat, WarpError> {
        let mut tape = Tape::new();
        let x = tape.input(points.clone());
        let out = self.warp_frame(&mut tape, store, t, x, alpha)?;
        Ok(tape.value(out.world).clone())
    }

    /// Homography of frame `t`: the composed matrix for the explicit variant,
    /// otherwise a DLT fit of the warp on `domain`.
    pub fn extract_homography(
        &self,
        store: &ParamStore,
        t: usize,
        domain: &[Vector2<f64>],
        alpha: f64,
    ) -> Result<Matrix3<f64>, WarpError> {
        self.check_frames(&[t])?;
        let BaseTransform::Homography(base) = self.bases[t] else {
            return Err(WarpError::BaseMismatch { frame: t, dim: 2 });
        };
        if self.cfg.variant == WarpVariant::Explicit {
            let h: Vec<f64> = store.value(self.poses[t]).iter().copied().collect();
            let hm = lie::sl3_exp(&h.try_into().expect("8 generators"));
            return Ok(base * hm);
        }
        let pts = Array2::from_shape_fn((domain.len(), 2), |(i, j)| domain[i][j]);
        let w = self.warp_values(store, t, &pts, alpha)?;
        let dst = w.rows().into_iter().map(|r| Vector2::new(r[0], r[1])).collect();
        let fit = dlt_homography(&Correspondences::new(domain.to_vec(), dst))?;
        Ok(fit.homography().expect("dlt returns a homography"))
    }

    /// Camera-to-world pose of frame `t`: composed directly for the explicit
    /// variant, otherwise a rigid fit of the warp on the camera-space `samples`.
    pub fn extract_pose(
        &self,
        store: &ParamStore,
        t: usize,
        samples: &[Vector3<f64>],
        alpha: f64,
    ) -> Result<Pose, WarpError> {
        self.check_frames(&[t])?;
        let BaseTransform::Rigid(base) = self.bases[t] else {
            return Err(WarpError::BaseMismatch { frame: t, dim: 3 });
        };
        if self.cfg.variant == WarpVariant::Explicit {
            let xi: Vec<f64> = store.value(self.poses[t]).iter().copied().collect();
            return Ok(base.compose(&lie::se3_exp(&xi.try_into().expect("6 generators"))));
        }
        let pts = Array2::from_shape_fn((samples.len(), 3), |(i, j)| samples[i][j]);
        let w = self.warp_values(store, t, &pts, alpha)?;
        let dst = w.rows().into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect();
        let fit = umeyama(&Correspondences::new(samples.to_vec(), dst), false)?;
        Ok(fit.similarity().expect("umeyama returns a similarity").pose())
    }
}

fn check_points(tape: &Tape, x: Var, rows: usize, dim: usize) -> Result<(), TapeError> {
    let d = tape.value(x).dim();
    if d != (rows, dim) {
        return Err(TapeError::Shape {
            op: "warp",
            detail: format!("points {d:?}, expected ({rows}, {dim})"),
        });
    }
    Ok(())
}

/// `x + net(encode(x) ⊕ φ)`.
fn residual(
    tape: &mut Tape,
    store: &ParamStore,
    net: &Mlp,
    x: Var,
    codes: Var,
    enc: &EncodingConfig,
    alpha: f64,
) -> Result<Var, TapeError> {
    let e = encode(tape, x, enc, alpha)?;
    let input = tape.concat_cols(&[e, codes])?;
    let d = net.forward(tape, store, input)?;
    tape.add(x, d)
}
