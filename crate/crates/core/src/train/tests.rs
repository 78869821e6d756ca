use super::*;
use crate::data::{gen_patchset, gen_toyscene, PatchSetConfig, ToySceneConfig};
use crate::raster::bundled_cat;

fn tiny_planar(variant: WarpVariant) -> TrainConfig {
    TrainConfig {
        variant,
        iters: 20,
        batch: 32,
        rigid_points_per_frame: 8,
        field2d: Field2DConfig {
            hidden: vec![16, 16],
            frequencies: 3,
        },
        warp: WarpConfig {
            code_dim: 4,
            hidden: vec![12],
            frequencies: 2,
            inn_blocks: 2,
            inn_hidden: vec![8],
            ..WarpConfig::default()
        },
        ..TrainConfig::planar()
    }
}

fn tiny_patches(noise: f64) -> PatchSet {
    let cfg = PatchSetConfig {
        patches: 3,
        patch_size: 16,
        long_side: 64,
        noise_h: noise / 2.0,
        noise_t: noise,
    };
    gen_patchset(&bundled_cat(), &cfg, 7).unwrap()
}

fn tiny_toy(variant: WarpVariant) -> TrainConfig {
    TrainConfig {
        variant,
        iters: 5,
        batch: 16,
        samples: 6,
        rigid_points_per_frame: 6,
        field3d: Field3DConfig {
            hidden: vec![12, 12],
            color_hidden: vec![8],
            frequencies: 2,
            dir_frequencies: 1,
        },
        warp: WarpConfig {
            code_dim: 4,
            hidden: vec![8],
            frequencies: 2,
            inn_blocks: 3,
            inn_hidden: vec![8],
            coord_scale: 2.0,
            ..WarpConfig::default()
        },
        ..TrainConfig::toy3d()
    }
}

fn tiny_scene() -> ToyScene {
    let cfg = ToySceneConfig {
        views: 4,
        size: 12,
        ..ToySceneConfig::default()
    };
    gen_toyscene(&cfg, 0).unwrap()
}

#[test]
fn loss_components_sum_to_total() {
    let mut tape = Tape::new();
    let terms = LossTerms {
        photometric: tape.input(ndarray::array![[0.25]]),
        rigid: Some(tape.input(ndarray::array![[1e-3]])),
        implicit: Some(tape.input(ndarray::array![[2e-2]])),
        anchor: Some(tape.input(ndarray::array![[3e-4]])),
    };
    let cfg = TrainConfig::planar();
    let loss = total_loss(&mut tape, &terms, &cfg, 0).unwrap();
    let sum: f64 = loss.components.values().sum();
    assert!((sum - loss.value).abs() <= 1e-12);
    assert!((loss.components["rigid"] - 1e-3 * cfg.lambda_rigid).abs() < 1e-15);
}

#[test]
fn loss_is_zero_for_exact_rigid_anchored_fit() {
    let mut tape = Tape::new();
    let zero = tape.input(ndarray::array![[0.0]]);
    let terms = LossTerms {
        photometric: zero,
        rigid: Some(zero),
        implicit: None,
        anchor: Some(zero),
    };
    let loss = total_loss(&mut tape, &terms, &TrainConfig::planar(), 0).unwrap();
    assert_eq!(loss.value, 0.0);
}

#[test]
fn non_finite_component_is_named() {
    let mut tape = Tape::new();
    let terms = LossTerms {
        photometric: tape.input(ndarray::array![[0.1]]),
        rigid: None,
        implicit: Some(tape.input(ndarray::array![[f64::NAN]])),
        anchor: None,
    };
    match total_loss(&mut tape, &terms, &TrainConfig::planar(), 42) {
        Err(TrainError::NonFinite { component, step }) => {
            assert_eq!(component, "implicit");
            assert_eq!(step, 42);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn explicit_planar_step_has_no_prior_terms() {
    let data = tiny_patches(0.1);
    let cfg = TrainConfig {
        iters: 1,
        ..tiny_planar(WarpVariant::Explicit)
    };
    let out = train_planar(&cfg, &data).unwrap();
    let keys: Vec<&str> = out.state.components.keys().map(String::as_str).collect();
    assert_eq!(keys, ["photometric"]);
    let cfg = TrainConfig {
        iters: 1,
        ..tiny_planar(WarpVariant::Implicit)
    };
    let out = train_planar(&cfg, &data).unwrap();
    let keys: Vec<&str> = out.state.components.keys().map(String::as_str).collect();
    assert_eq!(keys, ["anchor", "implicit", "photometric", "rigid"]);
}

#[test]
fn config_validation_rejects_bad_values() {
    let ok = TrainConfig::planar();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig {
            lambda_rigid: -1.0,
            ..ok.clone()
        },
        TrainConfig { batch: 0, ..ok.clone() },
        TrainConfig {
            rigid_grad_through_fit: true,
            ..ok.clone()
        },
        TrainConfig {
            c2f_start: 0.5,
            c2f_end: 0.1,
            ..ok.clone()
        },
        TrainConfig {
            lr_warp: [0.0, 1e-5],
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn loss_history_keeps_head_and_tail_windows() {
    let mut h = LossHistory::new(3);
    for v in 1..=10 {
        h.push(v as f64);
    }
    assert_eq!(h.head_mean(), 2.0);
    assert_eq!(h.tail_mean(), 9.0);
    assert_eq!(h.last(), Some(10.0));
}

#[test]
fn zero_noise_zero_iterations_gives_zero_corner_error() {
    let data = tiny_patches(0.0);
    for v in WarpVariant::ALL {
        let cfg = TrainConfig {
            iters: 0,
            ..tiny_planar(v)
        };
        let out = train_planar(&cfg, &data).unwrap();
        assert!(out.record.corner_error_px < 1e-9, "{v}: {}", out.record.corner_error_px);
        assert!(out.record.success);
    }
}

#[test]
fn gt_init_without_noise_starts_at_the_truth() {
    let data = tiny_patches(0.15);
    let cfg = TrainConfig {
        iters: 0,
        gt_init: true,
        ..tiny_planar(WarpVariant::Inn)
    };
    let out = train_planar(&cfg, &data).unwrap();
    assert!(out.record.corner_error_px < 1e-6);
    let noisy = TrainConfig {
        init_noise: 0.1,
        ..cfg
    };
    assert!(train_planar(&noisy, &data).unwrap().record.corner_error_px > 1.0);
}

#[test]
fn planar_runs_are_reproducible() {
    let data = tiny_patches(0.1);
    for v in WarpVariant::ALL {
        let cfg = TrainConfig {
            deterministic: true,
            ..tiny_planar(v)
        };
        let a = train_planar(&cfg, &data).unwrap().record;
        let b = train_planar(&cfg, &data).unwrap().record;
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.wall_seconds, 0.0);
    }
}

#[test]
fn explicit_frame0_stays_frozen() {
    let data = tiny_patches(0.1);
    let out = train_planar(&tiny_planar(WarpVariant::Explicit), &data).unwrap();
    let id = out.model.warp.pose_ids()[0];
    assert!(out.state.store.value(id).iter().all(|&v| v == 0.0));
    assert!(out.state.store.value(out.model.warp.pose_ids()[1]).iter().any(|&v| v != 0.0));
}

#[test]
fn divergence_marks_the_record_failed() {
    let data = tiny_patches(0.1);
    let cfg = TrainConfig {
        lr_warp: [1e200, 1e200],
        lr_field: [1e200, 1e200],
        iters: 10,
        ..tiny_planar(WarpVariant::Naive)
    };
    let out = train_planar(&cfg, &data).unwrap();
    assert!(out.record.failed(), "{:?}", out.record);
    assert!(!out.record.success);
}

#[test]
fn toy_initial_poses_are_perturbed_by_the_requested_angle() {
    let scene = tiny_scene();
    let cfg = tiny_toy(WarpVariant::Explicit);
    let init = toy_initial_poses(&cfg, &scene.poses);
    assert_eq!(init[0], scene.poses[0]);
    for (p, g) in init.iter().zip(&scene.poses).skip(1) {
        let e = rotation_error_deg(&p.rotation, &g.rotation);
        assert!((e - 15.0).abs() < 1e-9);
        assert!(((p.translation - g.translation).norm() - 15f64.to_radians()).abs() < 1e-9);
    }
}

#[test]
fn toy_zero_iterations_recovers_the_initial_poses() {
    let scene = tiny_scene();
    for v in [WarpVariant::Explicit, WarpVariant::Inn, WarpVariant::Naive] {
        let cfg = TrainConfig {
            iters: 0,
            pose_noise_deg: 0.0,
            ..tiny_toy(v)
        };
        let out = train_toy3d(&cfg, &scene).unwrap();
        assert!(out.record.rot_err_deg < 1e-6, "{v}: {}", out.record.rot_err_deg);
        for (p, g) in out.poses.iter().zip(&scene.poses) {
            assert!(rotation_error_deg(&p.rotation, &g.rotation) < 1e-6);
        }
    }
}

#[test]
fn toy_training_runs_and_is_reproducible() {
    let scene = tiny_scene();
    for v in [WarpVariant::Explicit, WarpVariant::Implicit, WarpVariant::Inn] {
        let cfg = TrainConfig {
            deterministic: true,
            ..tiny_toy(v)
        };
        let a = train_toy3d(&cfg, &scene).unwrap();
        let b = train_toy3d(&cfg, &scene).unwrap();
        assert!(!a.record.failed(), "{:?}", a.record);
        assert_eq!(format!("{:?}", a.record), format!("{:?}", b.record));
        assert_eq!(a.state.step, 5);
    }
}

#[test]
fn frozen_warp_keeps_poses_and_reports_holdout() {
    let scene = tiny_scene();
    let cfg = TrainConfig {
        freeze_warp: true,
        pose_noise_deg: 0.0,
        holdout: vec![2],
        ..tiny_toy(WarpVariant::Explicit)
    };
    let out = train_toy3d(&cfg, &scene).unwrap();
    assert_eq!(out.model.views, vec![0, 1, 3]);
    assert!(out.record.rot_err_deg < 1e-9);
    assert!(out.holdout_psnr.is_some());
}

#[test]
fn single_view_refinement_leaves_the_field_untouched() {
    let scene = tiny_scene();
    let cfg = tiny_toy(WarpVariant::Inn);
    let (store, model) = build_toy3d(&cfg, &scene).unwrap();
    let mut store = store;
    let mut rng = stream(9, 9);
    store.perturb_prefix("field.", 0.3, &mut rng);
    let out = pose_refine_single_view(&store, &model.field, &scene, 1, 20.0, &cfg, 2).unwrap();
    assert!(out.field_unchanged);
    assert_eq!(out.trajectory.len(), 1 + 3);
    let e0 = out.trajectory[0].rot_err_deg;
    assert!((e0 - 20.0).abs() < 1e-6, "{e0}");
    assert!(out.trajectory[0].rigidity_residual < 1e-20);
}

#[test]
fn holdout_view_must_leave_three_training_views() {
    let scene = tiny_scene();
    let cfg = TrainConfig {
        holdout: vec![0, 1],
        ..tiny_toy(WarpVariant::Inn)
    };
    assert!(matches!(train_toy3d(&cfg, &scene), Err(TrainError::Config(_))));
}
