use rand::Rng;

use crate::autodiff::{GroupId, Mlp, MlpShape, ParamId, ParamStore, Tape, TapeError, Var};

use super::WarpConfig;

/// Conditional affine coupling: the passive coordinates and the frame code
/// drive a bounded log-scale and a shift applied to the active coordinates.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub(crate) active: Vec<usize>,
    pub(crate) passive: Vec<usize>,
    pub(crate) scale_net: Mlp,
    pub(crate) shift_net: Mlp,
    clamp: f64,
    dim: usize,
}

/// Block `b` of a `dim`-D network. 2D alternates `{0}`/`{1}`; 3D cycles the
/// active axis through 2, 0, 1.
fn partition(b: usize, dim: usize) -> (Vec<usize>, Vec<usize>) {
    let active = if dim == 2 { b % 2 } else { (b + 2) % 3 };
    let passive = (0..dim).filter(|&i| i != active).collect();
    (vec![active], passive)
}

impl CouplingBlock {
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        group: GroupId,
        index: usize,
        dim: usize,
        cfg: &WarpConfig,
        rng: &mut R,
    ) -> Self {
        let (active, passive) = partition(index, dim);
        let shape = MlpShape::new(passive.len() + cfg.code_dim, &cfg.inn_hidden, active.len());
        let scale_net = Mlp::new(store, group, &format!("warp.inn{index}.scale"), shape.clone(), true, rng);
        let shift_net = Mlp::new(store, group, &format!("warp.inn{index}.shift"), shape, true, rng);
        Self {
            active,
            passive,
            scale_net,
            shift_net,
            clamp: cfg.inn_clamp,
            dim,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn passive(&self) -> &[usize] {
        &self.passive
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.scale_net.param_ids().chain(self.shift_net.param_ids())
    }

    fn columns(&self, tape: &mut Tape, x: Var, idx: &[usize]) -> Result<Var, TapeError> {
        let parts = idx.iter().map(|&i| tape.slice_cols(x, i, 1)).collect::<Result<Vec<_>, _>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    /// Log-scale `clamp · tanh(raw / clamp)` and shift.
    fn conditioning(&self, tape: &mut Tape, store: &ParamStore, x: Var, codes: Var) -> Result<(Var, Var), TapeError> {
        let p = self.columns(tape, x, &self.passive)?;
        let cond = tape.concat_cols(&[p, codes])?;
        let raw = self.scale_net.forward(tape, store, cond)?;
        let squashed = tape.scale(raw, 1.0 / self.clamp);
        let th = tape.tanh(squashed);
        let s = tape.scale(th, self.clamp);
        let t = self.shift_net.forward(tape, store, cond)?;
        Ok((s, t))
    }

    /// Put the transformed active columns back in place.
    fn reassemble(&self, tape: &mut Tape, x: Var, new_active: Var) -> Result<Var, TapeError> {
        let mut cols = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            match self.active.iter().position(|&a| a == i) {
                Some(k) => cols.push(tape.slice_cols(new_active, k, 1)?),
                None => cols.push(tape.slice_cols(x, i, 1)?),
            }
        }
        tape.concat_cols(&cols)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, codes: Var) -> Result<Var, TapeError> {
        let (s, t) = self.conditioning(tape, store, x, codes)?;
        let a = self.columns(tape, x, &self.active)?;
        let es = tape.exp(s);
        let scaled = tape.mul(a, es)?;
        let out = tape.add(scaled, t)?;
        self.reassemble(tape, x, out)
    }

    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, y: Var, codes: Var) -> Result<Var, TapeError> {
        let (s, t) = self.conditioning(tape, store, y, codes)?;
        let a = self.columns(tape, y, &self.active)?;
        let shifted = tape.sub(a, t)?;
        let neg = tape.scale(s, -1.0);
        let es = tape.exp(neg);
        let out = tape.mul(shifted, es)?;
        self.reassemble(tape, y, out)
    }

    /// Log-scale values for rows `x`, for inspecting the clamp bound.
    pub fn log_scale(&self, store: &ParamStore, x: &crate::autodiff::Mat, codes: &crate::autodiff::Mat) -> crate::autodiff::Mat {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let cv = tape.input(codes.clone());
        let (s, _) = self.conditioning(&mut tape, store, xv, cv).expect("shapes checked by caller");
        tape.value(s).clone()
    }
}
