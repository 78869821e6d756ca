use ndarray::Array2;
use rand::Rng;

use super::params::{GroupId, ParamId, ParamStore};
use super::tape::{Tape, TapeError, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Layer sizes of a leaky-rectified dense network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpShape {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input];
        d.extend(&self.hidden);
        d.push(self.output);
        d
    }

    /// Multiply-accumulates per input row.
    pub fn macs(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1]).sum()
    }
}

/// Dense network whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    shape: MlpShape,
}

impl Mlp {
    /// Registers `{prefix}.l{i}.w` / `.b` with the uniform fan-in init used by
    /// common deep learning frameworks. `zero_last` zeroes the output layer.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: GroupId,
        prefix: &str,
        shape: MlpShape,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let dims = shape.dims();
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let zero = zero_last && i == n - 1;
                let mut draw = |r, c| {
                    Array2::from_shape_fn((r, c), |_| {
                        if zero {
                            0.0
                        } else {
                            rng.gen_range(-bound..bound)
                        }
                    })
                };
                let wv = draw(fan_in, fan_out);
                let bv = draw(1, fan_out);
                (
                    store.insert(&format!("{prefix}.l{i}.w"), wv, group),
                    store.insert(&format!("{prefix}.l{i}.b"), bv, group),
                )
            })
            .collect();
        Self { layers, shape }
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TapeError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, *w);
            let bv = tape.param(store, *b);
            h = tape.affine(h, wv, Some(bv))?;
            if i != last {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}
