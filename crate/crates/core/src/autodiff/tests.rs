use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd;
use super::*;

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn identity_affine_passes_input_through() {
    let mut store = ParamStore::new();
    let g = store.group("g");
    let w = store.insert("w", Array2::eye(3), g);
    let b = store.insert("b", Array2::zeros((1, 3)), g);
    let mut tape = Tape::new();
    let x = tape.input(array![[0.1, -2.0, 3.5], [1.0, 2.0, 3.0]]);
    let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
    let y = tape.affine(x, wv, Some(bv)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn leaky_relu_negative_branch() {
    let mut tape = Tape::new();
    let x = tape.input(array![[-2.0, 3.0]]);
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y), &array![[-0.02, 3.0]]);
}

#[test]
fn zero_final_layer_outputs_its_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let g = store.group("g");
    let mlp = Mlp::new(&mut store, g, "net", MlpShape::new(4, &[8], 2), true, &mut rng);
    let last_b = store.id("net.l1.b").unwrap();
    *store.value_mut(last_b) = array![[0.25, -0.75]];
    let mut tape = Tape::new();
    let x = tape.input(random_mat(&mut rng, 5, 4));
    let y = mlp.forward(&mut tape, &store, x).unwrap();
    for row in tape.value(y).rows() {
        assert_eq!(row.to_vec(), vec![0.25, -0.75]);
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(array![[3.0]]);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y, &array![[1.0]], &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap()[[0, 0]], 6.0);
}

#[test]
fn mse_at_minimum_has_zero_gradient() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let a = tape.input(array![[0.3, 0.1], [2.0, -1.0]]);
    let b = tape.input(array![[0.3, 0.1], [2.0, -1.0]]);
    let l = tape.mse(a, b).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
    tape.backward(l, &array![[1.0]], &mut store).unwrap();
    assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_on_stale_tape_is_a_state_error() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(array![[1.0]]);
    let y = tape.exp(x);
    tape.set_input(x, array![[2.0]]).unwrap();
    assert_eq!(
        tape.backward(y, &array![[1.0]], &mut store),
        Err(TapeError::NotEvaluated)
    );
    tape.forward(&store).unwrap();
    assert!((tape.scalar(y) - 2f64.exp()).abs() < 1e-15);
    tape.backward(y, &array![[1.0]], &mut store).unwrap();
}

#[test]
fn shape_mismatch_is_structural_error() {
    let mut tape = Tape::new();
    let a = tape.input(Array2::zeros((2, 3)));
    let b = tape.input(Array2::zeros((3, 2)));
    assert!(matches!(tape.add(a, b), Err(TapeError::Shape { .. })));
    assert!(matches!(tape.affine(a, a, None), Err(TapeError::Shape { .. })));
}

#[test]
fn adjoints_reset_between_backward_passes() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(array![[2.0]]);
    let y = tape.scale(x, 3.0);
    tape.backward(y, &array![[1.0]], &mut store).unwrap();
    tape.backward(y, &array![[1.0]], &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap()[[0, 0]], 3.0);
}

#[test]
fn param_gradients_accumulate_until_cleared() {
    let mut store = ParamStore::new();
    let g = store.group("g");
    let p = store.insert("p", array![[1.5]], g);
    let mut tape = Tape::new();
    let pv = tape.param(&store, p);
    let y = tape.mul(pv, pv).unwrap();
    tape.backward(y, &array![[1.0]], &mut store).unwrap();
    tape.backward(y, &array![[1.0]], &mut store).unwrap();
    assert_eq!(store.grad(p)[[0, 0]], 6.0);
    store.zero_grad();
    assert_eq!(store.grad(p)[[0, 0]], 0.0);
}

/// Every primitive, chained into a scalar, against central differences.
#[test]
fn each_primitive_matches_finite_differences() {
    type Build = fn(&mut Tape, Var, Var) -> Var;
    let cases: Vec<(&str, Build)> = vec![
        ("sin", |t, x, _| t.sin(x)),
        ("cos", |t, x, _| t.cos(x)),
        ("tanh", |t, x, _| t.tanh(x)),
        ("exp", |t, x, _| t.exp(x)),
        ("sigmoid", |t, x, _| t.sigmoid(x)),
        ("softplus", |t, x, _| t.softplus(x)),
        ("leaky", |t, x, _| t.leaky_relu(x, 0.01)),
        ("add", |t, x, y| t.add(x, y).unwrap()),
        ("sub", |t, x, y| t.sub(x, y).unwrap()),
        ("mul", |t, x, y| t.mul(x, y).unwrap()),
        ("div", |t, x, y| {
            let e = t.exp(y);
            t.div(x, e).unwrap()
        }),
        ("scale", |t, x, _| t.scale(x, -1.7)),
        ("mul_columns", |t, x, _| t.mul_columns(x, vec![0.5, -2.0, 3.0]).unwrap()),
        ("concat_cols", |t, x, y| t.concat_cols(&[x, y]).unwrap()),
        ("concat_rows", |t, x, y| t.concat_rows(&[y, x]).unwrap()),
        ("slice_cols", |t, x, _| t.slice_cols(x, 1, 2).unwrap()),
        ("slice_rows", |t, x, _| t.slice_rows(x, 2, 2).unwrap()),
        ("gather", |t, x, _| t.gather(x, vec![3, 0, 0, 2]).unwrap()),
        ("broadcast", |t, x, _| {
            let r = t.slice_rows(x, 1, 1).unwrap();
            t.broadcast_rows(r, 6).unwrap()
        }),
        ("mean", |t, x, _| t.mean(x)),
        ("mse", |t, x, y| t.mse(x, y).unwrap()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, build) in cases {
        let mut store = ParamStore::new();
        let g = store.group("g");
        let px = store.insert("x", random_mat(&mut rng, 4, 3), g);
        let py = store.insert("y", random_mat(&mut rng, 4, 3), g);
        let weights = random_mat(&mut rng, 1, 64);
        let mut tape = Tape::new();
        let (x, y) = (tape.param(&store, px), tape.param(&store, py));
        let out = build(&mut tape, x, y);
        // Fold to a scalar through a fixed random projection so every output
        // entry carries a distinct weight.
        let (r, c) = tape.value(out).dim();
        let w = tape.constant(Array2::from_shape_fn((r, c), |(i, j)| weights[[0, (i * c + j) % 64]]));
        let prod = tape.mul(out, w).unwrap();
        let root = tape.sum(prod);
        let err = fd::check_params(&mut tape, &mut store, root, &[px, py], 1e-5).unwrap();
        assert!(err <= 1e-6, "{name}: relative error {err}");
    }
}

/// Central differences are only a valid oracle when no stencil crosses a
/// rectifier kink, so inputs are redrawn until every pre-activation sits at
/// least `KINK_MARGIN` away from zero.
const KINK_MARGIN: f64 = 5e-3;

fn three_layer_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = store.group("g");
    let mlp = Mlp::new(&mut store, g, "net", MlpShape::new(3, &[8, 8], 2), false, &mut rng);
    let (mut tape, loss) = loop {
        let mut tape = Tape::new();
        let x = tape.input(random_mat(&mut rng, 6, 3));
        let target = tape.input(random_mat(&mut rng, 6, 2));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        let loss = tape.mse(y, target).unwrap();
        if tape.kink_margin() >= KINK_MARGIN {
            break (tape, loss);
        }
    };
    let ids: Vec<ParamId> = mlp.param_ids().collect();
    fd::check_params_joint(&mut tape, &mut store, loss, &ids, 1e-4).unwrap()
}

#[test]
fn three_layer_leaky_net_matches_finite_differences_over_seeds() {
    for seed in 0..100 {
        let err = three_layer_check(seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn input_gradient_is_retrievable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let g = store.group("g");
    let mlp = Mlp::new(&mut store, g, "net", MlpShape::new(2, &[6], 1), false, &mut rng);
    let mut tape = Tape::new();
    let x = tape.input(random_mat(&mut rng, 3, 2));
    let y = mlp.forward(&mut tape, &store, x).unwrap();
    let root = tape.sum(y);
    tape.backward(root, &array![[1.0]], &mut store).unwrap();
    let analytic = tape.grad(x).unwrap().clone();
    let numeric = fd::input_gradient(&mut tape, &store, root, x, 1e-5).unwrap();
    let err = fd::relative_error_mat(&analytic, &numeric);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let g = store.group("g");
        let mlp = Mlp::new(&mut store, g, "net", MlpShape::new(2, &[16, 16], 1), false, &mut rng);
        let xs = random_mat(&mut rng, 32, 2);
        let ys = xs.map_axis(ndarray::Axis(1), |r| (r[0] * 3.0).sin() * r[1]).insert_axis(ndarray::Axis(1));
        for _ in 0..50 {
            let mut tape = Tape::new();
            let x = tape.input(xs.clone());
            let t = tape.input(ys.clone());
            let y = mlp.forward(&mut tape, &store, x).unwrap();
            let l = tape.mse(y, t).unwrap();
            store.zero_grad();
            tape.backward(l, &array![[1.0]], &mut store).unwrap();
            adam_step(&mut store, g, &AdamConfig::default()).unwrap();
        }
        store.entries().iter().flat_map(|e| e.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

