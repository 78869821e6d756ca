//! Executable oracle batteries with fixed seeds and tolerances.
//!
//! Every check yields an [`OracleResult`]; failures are results, not panics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{exp_decay_lr, fd, Mat, ParamId, ParamStore, Tape, Var};
use crate::data::{gen_patchset, gen_toyscene, PatchSetConfig, ToySceneConfig};
use crate::field::{normalize_rows, Field2D, Field2DConfig, Field3D, Field3DConfig};
use crate::geometry::{apply_homography, random_rotation, random_rotation_of_angle, rotation_error_deg, Pose};
use crate::metrics;
use crate::raster::{bundled_cat, Image};
use crate::registration::{dlt_homography, rigidity_loss, rigidity_residual, umeyama, Correspondences};
use crate::render::{composite, composite_weights, render_rays, sample_depths, Camera, Ray};
use crate::train::{train_planar, train_toy3d, TrainConfig};
use crate::warp::lie::sl3_exp;
use crate::warp::{BaseTransform, WarpConfig, WarpModel, WarpVariant};

pub const MASTER_SEED: u64 = 20240117;
/// Seeds per gradient class.
pub const GRADIENT_SEEDS: u64 = 100;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const ROUND_TRIP_POINTS: usize = 1000;
pub const ROUND_TRIP_TOL: f64 = 1e-9;
pub const REGISTRATION_TRIALS: u64 = 100;
pub const UMEYAMA_TOL: f64 = 1e-10;
pub const DLT_TOL: f64 = 1e-6;
pub const GAUGE_TOL: f64 = 1e-10;
pub const COMPOSITE_SETS: u64 = 1000;
pub const CONSERVATION_TOL: f64 = 1e-12;

/// One check: passes when `|actual − expected| ≤ tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    pub fn new(name: impl Into<String>, expected: f64, actual: f64, tolerance: f64) -> Self {
        let pass = (actual - expected).abs() <= tolerance;
        Self {
            name: name.into(),
            expected,
            actual,
            tolerance,
            pass,
        }
    }

    /// An error measure that must not exceed `tolerance`.
    pub fn bound(name: impl Into<String>, actual: f64, tolerance: f64) -> Self {
        Self::new(name, 0.0, actual, tolerance)
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::new(name, 1.0, if ok { 1.0 } else { 0.0 }, 0.0)
    }
}

fn rng(battery: u64, i: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    r.set_stream(battery * 1_000_003 + i);
    r
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-s..s))
}

struct Battery {
    name: &'static str,
    run: fn() -> Vec<OracleResult>,
}

const BATTERIES: [Battery; 7] = [
    Battery { name: "identity", run: identity_battery },
    Battery { name: "grad", run: gradient_battery },
    Battery { name: "inn", run: round_trip_battery },
    Battery { name: "registration", run: registration_battery },
    Battery { name: "composite", run: composite_battery },
    Battery { name: "metric", run: metric_battery },
    Battery { name: "determinism", run: determinism_battery },
];

/// Run every battery that can produce a check whose name contains `filter`
/// (all of them when empty) and keep the matching results.
pub fn run_property_suite(filter: &str) -> Vec<OracleResult> {
    let selected: Vec<&Battery> = BATTERIES
        .iter()
        .filter(|b| filter.is_empty() || b.name.contains(filter) || filter.starts_with(b.name))
        .collect();
    selected
        .par_iter()
        .map(|b| (b.run)())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .filter(|r| filter.is_empty() || r.name.contains(filter))
        .collect()
}

pub fn report(results: &[OracleResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4);
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{}  {:<width$}  actual {:>12.4e}  expected {:>12.4e}  tol {:.1e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.actual,
            r.expected,
            r.tolerance
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    let _ = writeln!(s, "{} checks, {} failed", results.len(), failed);
    s
}

pub fn write_results(path: &Path, results: &[OracleResult]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ── Identity ───────────────────────────────────────────────────────────

fn small_warp(variant: WarpVariant) -> WarpConfig {
    WarpConfig {
        variant,
        code_dim: 3,
        hidden: vec![6],
        frequencies: 1,
        inn_blocks: 3,
        inn_hidden: vec![5],
        ..WarpConfig::default()
    }
}

fn identity_battery() -> Vec<OracleResult> {
    let mut out = vec![];
    for v in WarpVariant::ALL {
        for dim in [2, 3] {
            let mut r = rng(1, dim as u64);
            let mut store = ParamStore::new();
            let m = WarpModel::new(&mut store, &small_warp(v), dim, vec![BaseTransform::identity(dim); 3], &mut r).unwrap();
            let x = rand_mat(&mut r, 200, dim, 2.0);
            let worst = (0..3)
                .map(|t| {
                    let y = m.warp_values(&store, t, &x, 1.0).unwrap();
                    (&y - &x).iter().fold(0.0f64, |a, d| a.max(d.abs()))
                })
                .fold(0.0, f64::max);
            out.push(OracleResult::bound(format!("identity/warp-init/{v}/{dim}d"), worst, 1e-15));
        }
    }
    let cfg = PatchSetConfig {
        noise_h: 0.0,
        noise_t: 0.0,
        patches: 3,
        patch_size: 16,
        long_side: 64,
    };
    let ps = gen_patchset(&bundled_cat(), &cfg, MASTER_SEED).unwrap();
    let worst = ps
        .homographies
        .iter()
        .map(|h| (h - Matrix3::identity()).abs().max())
        .fold(0.0, f64::max);
    out.push(OracleResult::bound("identity/patchset-zero-noise", worst, 0.0));
    out
}

// ── Gradients ──────────────────────────────────────────────────────────

/// A scalar loss over some parameters. Draws whose activations sit too
/// close to a kink are redrawn by the caller.
type Case = fn(&mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>);

fn gradient_class(name: &str, battery: u64, case: Case) -> OracleResult {
    let mut worst = 0.0f64;
    for seed in 0..GRADIENT_SEEDS {
        let mut r = rng(battery, seed);
        let err = loop {
            let (mut tape, mut store, root, ids) = case(&mut r);
            if tape.kink_margin() < 1e-3 {
                continue;
            }
            break fd::check_params_joint(&mut tape, &mut store, root, &ids, 1e-6).unwrap_or(f64::INFINITY);
        };
        worst = worst.max(err);
    }
    OracleResult::bound(format!("grad/{name}"), worst, GRADIENT_TOL)
}

fn weighted_sum(tape: &mut Tape, r: &mut ChaCha8Rng, v: Var) -> Var {
    let (a, b) = tape.value(v).dim();
    let p = tape.constant(rand_mat(r, a, b, 1.0));
    let m = tape.mul(v, p).unwrap();
    tape.sum(m)
}

fn case_field2d(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let cfg = Field2DConfig {
        hidden: vec![8, 8],
        frequencies: 2,
    };
    let f = Field2D::new(&mut store, &cfg, r);
    store.perturb_prefix("field.", 0.3, r);
    let mut tape = Tape::new();
    let u = tape.input(rand_mat(r, 5, 2, 1.0));
    let alpha = r.gen_range(0.0..2.0);
    let c = f.eval(&mut tape, &store, u, alpha).unwrap();
    let root = weighted_sum(&mut tape, r, c);
    let ids = f.param_ids();
    (tape, store, root, ids)
}

fn small_field3d(store: &mut ParamStore, r: &mut ChaCha8Rng) -> Field3D {
    let cfg = Field3DConfig {
        hidden: vec![8, 8],
        color_hidden: vec![6],
        frequencies: 2,
        dir_frequencies: 1,
    };
    let f = Field3D::new(store, &cfg, r);
    store.perturb_prefix("field.", 0.3, r);
    f
}

fn case_field3d(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let f = small_field3d(&mut store, r);
    let mut tape = Tape::new();
    let x = tape.input(rand_mat(r, 4, 3, 1.0));
    let d = tape.input(rand_mat(r, 4, 3, 1.0));
    let dn = normalize_rows(&mut tape, d);
    let (c, s) = f.eval(&mut tape, &store, x, dn, r.gen_range(0.0..2.0)).unwrap();
    let cs = tape.concat_cols(&[c, s]).unwrap();
    let root = weighted_sum(&mut tape, r, cs);
    let ids = f.param_ids();
    (tape, store, root, ids)
}

/// Planar warp rows against a random target, plus the cycle term if any.
fn warp_loss(r: &mut ChaCha8Rng, variant: WarpVariant, dim: usize) -> (Tape, ParamStore, Var, WarpModel) {
    let mut store = ParamStore::new();
    let m = WarpModel::new(&mut store, &small_warp(variant), dim, vec![BaseTransform::identity(dim); 3], r).unwrap();
    store.perturb_prefix("warp.", 0.2, r);
    let mut tape = Tape::new();
    let x = tape.input(rand_mat(r, 6, dim, 1.0));
    let frames: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let out = m.warp_rows(&mut tape, &store, x, &frames, 1.0).unwrap();
    let target = tape.constant(rand_mat(r, 6, dim, 1.0));
    let mut loss = tape.mse(out.world, target).unwrap();
    if let Some(c) = out.cycle {
        let l2 = tape.mse(c, x).unwrap();
        loss = tape.add(loss, l2).unwrap();
    }
    (tape, store, loss, m)
}

fn case_pose2d(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let (tape, store, loss, m) = warp_loss(r, WarpVariant::Explicit, 2);
    (tape, store, loss, m.pose_ids().to_vec())
}

/// Rendered colors of a few rays through a 3D warp, so the compositing and
/// field paths sit between the loss and the warp parameters.
fn render_loss(r: &mut ChaCha8Rng, variant: WarpVariant) -> (Tape, ParamStore, Var, WarpModel) {
    let mut store = ParamStore::new();
    let field = small_field3d(&mut store, r);
    let cfg = WarpConfig {
        coord_scale: 4.0,
        ..small_warp(variant)
    };
    let base = BaseTransform::Rigid(Pose::new(random_rotation_of_angle(r, 0.2), Vector3::new(0.1, -0.2, 0.05)));
    let m = WarpModel::new(&mut store, &cfg, 3, vec![base; 2], r).unwrap();
    store.perturb_prefix("warp.", 0.2, r);
    let cam = Camera::from_fov(6, 6, 50.0);
    let rays: Vec<Ray> = (0..3).map(|_| cam.ray(r.gen_range(0..6), r.gen_range(0..6), 2.0, 5.0)).collect();
    let depths: Vec<Vec<f64>> = (0..3).map(|_| sample_depths(2.0, 5.0, 5, Some(&mut *r))).collect();
    let mut tape = Tape::new();
    let (c, _) = render_rays(&mut tape, &store, &field, &m, &rays, &[0, 1, 1], &depths, 1.5, None).unwrap();
    let target = tape.constant(Array2::from_shape_fn((3, 3), |_| r.gen_range(0.0..1.0)));
    let loss = tape.mse(c, target).unwrap();
    (tape, store, loss, m)
}

fn case_pose3d(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let (tape, store, loss, m) = render_loss(r, WarpVariant::Explicit);
    (tape, store, loss, m.pose_ids().to_vec())
}

fn case_warp_mlp(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let variant = if r.gen_bool(0.5) { WarpVariant::Naive } else { WarpVariant::Implicit };
    let dim = if r.gen_bool(0.5) { 2 } else { 3 };
    let (tape, store, loss, m) = warp_loss(r, variant, dim);
    (tape, store, loss, m.net_param_ids())
}

fn case_coupling(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let dim = if r.gen_bool(0.5) { 2 } else { 3 };
    let (tape, store, loss, m) = warp_loss(r, WarpVariant::Inn, dim);
    (tape, store, loss, m.net_param_ids())
}

fn case_codes(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let variant = [WarpVariant::Naive, WarpVariant::Implicit, WarpVariant::Inn][r.gen_range(0..3)];
    let (tape, store, loss, m) = if r.gen_bool(0.5) {
        warp_loss(r, variant, 2)
    } else {
        render_loss(r, variant)
    };
    (tape, store, loss, m.code_ids().to_vec())
}

/// Rigidity prior of a coupling warp, differentiated into the coupling
/// nets through the frozen-fit residual.
fn case_rigidity(r: &mut ChaCha8Rng) -> (Tape, ParamStore, Var, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let m = WarpModel::new(&mut store, &small_warp(WarpVariant::Inn), 3, vec![BaseTransform::identity(3); 2], r).unwrap();
    store.perturb_prefix("warp.", 0.3, r);
    let cam = rand_mat(r, 8, 3, 1.0);
    let mut tape = Tape::new();
    let x = tape.input(cam.clone());
    let out = m.warp_rows(&mut tape, &store, x, &[1; 8], 1.0).unwrap();
    let (res, _) = rigidity_residual(&mut tape, &cam, out.learned).unwrap().expect("non-degenerate fit");
    (tape, store, res, m.net_param_ids())
}

fn gradient_battery() -> Vec<OracleResult> {
    let classes: [(&str, Case); 8] = [
        ("field2d", case_field2d),
        ("field3d", case_field3d),
        ("explicit-pose-2d", case_pose2d),
        ("explicit-pose-3d", case_pose3d),
        ("warp-mlp", case_warp_mlp),
        ("coupling-nets", case_coupling),
        ("latent-codes", case_codes),
        ("rigidity-prior", case_rigidity),
    ];
    classes
        .par_iter()
        .enumerate()
        .map(|(i, (name, case))| gradient_class(name, 10 + i as u64, *case))
        .collect()
}

// ── INN round trip ─────────────────────────────────────────────────────

/// Coupling stack forward then inverse (and the reverse order) on random
/// points with an independent random code per point.
fn round_trip_battery() -> Vec<OracleResult> {
    let mut out = vec![];
    for dim in [2, 3] {
        let mut r = rng(2, dim as u64);
        let mut store = ParamStore::new();
        let cfg = WarpConfig {
            inn_blocks: 6,
            inn_hidden: vec![16, 16],
            code_dim: 4,
            ..small_warp(WarpVariant::Inn)
        };
        let m = WarpModel::new(&mut store, &cfg, dim, vec![BaseTransform::identity(dim)], &mut r).unwrap();
        store.perturb_prefix("warp.", 0.5, &mut r);
        let x = rand_mat(&mut r, ROUND_TRIP_POINTS, dim, 3.0);
        let codes = rand_mat(&mut r, ROUND_TRIP_POINTS, 4, 1.0);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let cv = tape.input(codes);
        let mut h = xv;
        for b in m.blocks() {
            h = b.forward(&mut tape, &store, h, cv).unwrap();
        }
        let moved = (tape.value(h) - &x).iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let mut back = h;
        for b in m.blocks().iter().rev() {
            back = b.inverse(&mut tape, &store, back, cv).unwrap();
        }
        let err = (tape.value(back) - &x).iter().fold(0.0f64, |a, d| a.max(d.abs()));
        out.push(OracleResult::bound(format!("inn/inverse-after-forward/{dim}d"), err, ROUND_TRIP_TOL));
        let mut h = xv;
        for b in m.blocks().iter().rev() {
            h = b.inverse(&mut tape, &store, h, cv).unwrap();
        }
        for b in m.blocks() {
            h = b.forward(&mut tape, &store, h, cv).unwrap();
        }
        let err = (tape.value(h) - &x).iter().fold(0.0f64, |a, d| a.max(d.abs()));
        out.push(OracleResult::bound(format!("inn/forward-after-inverse/{dim}d"), err, ROUND_TRIP_TOL));
        // Guards against a vacuous pass through an identity network.
        out.push(OracleResult::flag(format!("inn/weights-move-points/{dim}d"), moved > 1e-3));
    }
    out
}

// ── Registration ───────────────────────────────────────────────────────

fn points3(r: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
        .collect()
}

fn registration_battery() -> Vec<OracleResult> {
    let mut umeyama_worst = 0.0f64;
    let mut dlt_worst = 0.0f64;
    let mut gauge_worst = 0.0f64;
    let corners = [
        Vector2::new(-1.0, -1.0),
        Vector2::new(1.0, -1.0),
        Vector2::new(1.0, 1.0),
        Vector2::new(-1.0, 1.0),
    ];
    for i in 0..REGISTRATION_TRIALS {
        let mut r = rng(3, i);
        let rot = random_rotation(&mut r);
        let t = Vector3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
        let src = points3(&mut r, 12);
        let dst: Vec<_> = src.iter().map(|p| rot * p + t).collect();
        let err = match umeyama(&Correspondences::new(src, dst), false) {
            Ok(fit) => {
                let s = fit.similarity().expect("similarity");
                (s.rotation - rot)
                    .abs()
                    .max()
                    .max((s.translation - t).abs().max())
                    .max(fit.residual.sqrt())
            }
            Err(_) => f64::INFINITY,
        };
        umeyama_worst = umeyama_worst.max(err);

        let mut coeffs = [0.0; 8];
        for c in &mut coeffs {
            *c = r.gen_range(-0.2..0.2);
        }
        let h = sl3_exp(&coeffs);
        let src: Vec<Vector2<f64>> = (0..12).map(|_| Vector2::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect();
        let dst: Vec<Vector2<f64>> = src.iter().map(|p| apply_homography(&h, p).expect("finite")).collect();
        let err = match dlt_homography(&Correspondences::new(src, dst)) {
            Ok(fit) => {
                let he = fit.homography().expect("homography");
                corners
                    .iter()
                    .map(|c| match (apply_homography(&he, c), apply_homography(&h, c)) {
                        (Some(a), Some(b)) => (a - b).norm(),
                        _ => f64::INFINITY,
                    })
                    .fold(0.0, f64::max)
            }
            Err(_) => f64::INFINITY,
        };
        dlt_worst = dlt_worst.max(err);

        // A non-rigid world so the residual is not trivially zero.
        let cam = rand_mat(&mut r, 10, 3, 1.0);
        let world = cam.mapv(|v| v + 0.3 * (2.0 * v).sin());
        let g = random_rotation(&mut r);
        let gt = Vector3::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
        let moved = Array2::from_shape_fn(world.dim(), |(i, j)| {
            let p = Vector3::new(world[[i, 0]], world[[i, 1]], world[[i, 2]]);
            (g * p + gt)[j]
        });
        let err = match (rigidity_loss(&cam, &world), rigidity_loss(&cam, &moved)) {
            (Ok((a, _)), Ok((b, _))) if a > 1e-6 => (a - b).abs(),
            _ => f64::INFINITY,
        };
        gauge_worst = gauge_worst.max(err);
    }
    vec![
        OracleResult::bound("registration/umeyama-recovery", umeyama_worst, UMEYAMA_TOL),
        OracleResult::bound("registration/dlt-corner-transfer", dlt_worst, DLT_TOL),
        OracleResult::bound("registration/rigidity-gauge-invariance", gauge_worst, GAUGE_TOL),
    ]
}

// ── Compositing ────────────────────────────────────────────────────────

fn composite_battery() -> Vec<OracleResult> {
    let mut worst = 0.0f64;
    for i in 0..COMPOSITE_SETS {
        let mut r = rng(4, i);
        let m = r.gen_range(1..=64);
        let s: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..20.0)).collect();
        let d: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..0.5)).collect();
        let (w, t) = composite_weights(&s, &d);
        worst = worst.max((w.iter().sum::<f64>() + t - 1.0).abs());
    }
    let opaque = composite(&[[0.2, 0.4, 0.6]], &[1e6], &[1.0], None);
    let opaque_err = (0..3).map(|k| (opaque[k] - [0.2, 0.4, 0.6][k]).abs()).fold(0.0, f64::max);
    let half = composite(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[2f64.ln(), 1e6], &[1.0, 1.0], None);
    let half_err = (0..3).map(|k| (half[k] - [0.5, 0.5, 0.0][k]).abs()).fold(0.0, f64::max);
    let clear = composite(&[[1.0; 3]; 4], &[0.0; 4], &[0.5; 4], None);
    vec![
        OracleResult::bound("composite/conservation", worst, CONSERVATION_TOL),
        OracleResult::bound("composite/transparent-ray", clear.iter().map(|v| v.abs()).fold(0.0, f64::max), 0.0),
        OracleResult::bound("composite/opaque-sample", opaque_err, 0.0),
        // 1 − exp(−ln 2) is 0.5 up to one rounding of ln 2.
        OracleResult::bound("composite/half-over-opaque", half_err, f64::EPSILON),
    ]
}

// ── Metrics ────────────────────────────────────────────────────────────

fn metric_battery() -> Vec<OracleResult> {
    let mut r = rng(5, 0);
    let img = Image::from_fn(24, 20, |_, _| [r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)]);
    let shifted = Image::from_fn(24, 20, |x, y| {
        let p = img.get(x, y);
        [p[0] + 0.1, p[1] - 0.1, p[2] + 0.1]
    });
    let h = sl3_exp(&[0.01, -0.02, 0.05, 0.0, 0.01, 0.0, 0.0, 0.0]);
    let corners = [Vector2::new(-0.5, -0.5), Vector2::new(0.5, -0.5), Vector2::new(0.5, 0.5), Vector2::new(-0.5, 0.5)];
    let mut shift = Matrix3::identity();
    shift[(0, 2)] = 0.01;
    let gt: Vec<Pose> = (0..5)
        .map(|_| Pose::new(random_rotation(&mut r), Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))))
        .collect();
    let (gr, gs, gtr) = (random_rotation(&mut r), 2.5, Vector3::new(1.0, -3.0, 0.5));
    // Camera-to-world poses expressed in a similarity-transformed world.
    let est: Vec<Pose> = gt
        .iter()
        .map(|p| Pose::new(gr * p.rotation, gs * (gr * p.translation) + gtr))
        .collect();
    let aligned = metrics::aligned_pose_errors(&est, &gt).map_or(f64::INFINITY, |(a, b)| a.max(b));
    let rot15 = random_rotation_of_angle(&mut r, 15f64.to_radians());
    vec![
        OracleResult::new("metric/psnr-of-mse-0.01", 20.0, metrics::psnr_from_mse(0.01), 1e-12),
        OracleResult::new("metric/psnr-uniform-offset", 20.0, metrics::psnr(&shifted, &img).unwrap_or(f64::NAN), 1e-9),
        OracleResult::new("metric/ssim-self", 1.0, metrics::ssim(&img, &img).unwrap_or(f64::NAN), 1e-12),
        OracleResult::bound("metric/corner-error-self", metrics::corner_error(&h, &h, &corners, 96.0), 1e-12),
        OracleResult::new("metric/corner-error-1px-shift", 1.0, metrics::corner_error(&shift, &Matrix3::identity(), &corners, 100.0), 1e-12),
        OracleResult::new("metric/lr-geometric-midpoint", 1e-3 * 0.1f64.sqrt(), exp_decay_lr(100_000, 200_000, 1e-3, 1e-4), 1e-15),
        OracleResult::new("metric/rotation-error-15deg", 15.0, rotation_error_deg(&rot15, &Matrix3::identity()), 1e-9),
        OracleResult::bound("metric/aligned-pose-error-under-similarity", aligned, 1e-9),
    ]
}

// ── Determinism ────────────────────────────────────────────────────────

fn determinism_battery() -> Vec<OracleResult> {
    let ps = gen_patchset(
        &bundled_cat(),
        &PatchSetConfig {
            patches: 3,
            patch_size: 16,
            long_side: 64,
            ..PatchSetConfig::default()
        },
        MASTER_SEED,
    )
    .unwrap();
    let mut out = vec![];
    for v in WarpVariant::ALL {
        let cfg = TrainConfig {
            variant: v,
            iters: 15,
            batch: 32,
            seed: MASTER_SEED,
            deterministic: true,
            rigid_points_per_frame: 6,
            field2d: Field2DConfig {
                hidden: vec![12, 12],
                frequencies: 3,
            },
            warp: WarpConfig {
                hidden: vec![8],
                ..small_warp(v)
            },
            ..TrainConfig::planar()
        };
        let same = match (train_planar(&cfg, &ps), train_planar(&cfg, &ps)) {
            (Ok(a), Ok(b)) => {
                format!("{:?}", a.record) == format!("{:?}", b.record)
                    && a.state
                        .store
                        .entries()
                        .iter()
                        .zip(b.state.store.entries())
                        .all(|(x, y)| x.value.iter().zip(y.value.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
            }
            _ => false,
        };
        out.push(OracleResult::flag(format!("determinism/planar/{v}"), same));
    }
    let scene = gen_toyscene(
        &ToySceneConfig {
            views: 3,
            size: 8,
            ..ToySceneConfig::default()
        },
        MASTER_SEED,
    )
    .unwrap();
    let cfg = TrainConfig {
        iters: 3,
        batch: 8,
        samples: 4,
        rigid_points_per_frame: 4,
        seed: MASTER_SEED,
        deterministic: true,
        field3d: Field3DConfig {
            hidden: vec![8],
            color_hidden: vec![4],
            frequencies: 2,
            dir_frequencies: 1,
        },
        warp: WarpConfig {
            coord_scale: 2.0,
            ..small_warp(WarpVariant::Inn)
        },
        ..TrainConfig::toy3d()
    };
    let same = match (train_toy3d(&cfg, &scene), train_toy3d(&cfg, &scene)) {
        (Ok(a), Ok(b)) => format!("{:?}", a.record) == format!("{:?}", b.record),
        _ => false,
    };
    out.push(OracleResult::flag("determinism/toy3d/inn", same));
    out
}
