//! Matrix exponentials of sl(3) / se(3) generators and per-row point
//! transforms, as differentiable tape ops.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::autodiff::{CustomOp, Mat, Tape, TapeError, Var};
use crate::geometry::Pose;

/// Generator index layout for sl(3):
/// `[[h4, h2, h0], [h3, -h4-h5, h1], [h6, h7, h5]]`, so `h0, h1` translate.
pub fn sl3_basis() -> Vec<DMatrix<f64>> {
    let e = |entries: &[(usize, usize, f64)]| {
        let mut m = DMatrix::zeros(3, 3);
        for &(i, j, v) in entries {
            m[(i, j)] = v;
        }
        m
    };
    vec![
        e(&[(0, 2, 1.0)]),
        e(&[(1, 2, 1.0)]),
        e(&[(0, 1, 1.0)]),
        e(&[(1, 0, 1.0)]),
        e(&[(0, 0, 1.0), (1, 1, -1.0)]),
        e(&[(2, 2, 1.0), (1, 1, -1.0)]),
        e(&[(2, 0, 1.0)]),
        e(&[(2, 1, 1.0)]),
    ]
}

/// Twist `(ω, v)` generators of se(3) as 4x4 matrices.
pub fn se3_basis() -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(6);
    for k in 0..3 {
        let mut w = Vector3::zeros();
        w[k] = 1.0;
        let s = crate::geometry::skew(&w);
        let mut m = DMatrix::zeros(4, 4);
        m.view_mut((0, 0), (3, 3)).copy_from(&s);
        out.push(m);
    }
    for k in 0..3 {
        let mut m = DMatrix::zeros(4, 4);
        m[(k, 3)] = 1.0;
        out.push(m);
    }
    out
}

fn generator(basis: &[DMatrix<f64>], coeffs: &[f64]) -> DMatrix<f64> {
    let n = basis[0].nrows();
    let mut a = DMatrix::zeros(n, n);
    for (b, c) in basis.iter().zip(coeffs) {
        a += b * *c;
    }
    a
}

/// `exp(Σ cᵢ Bᵢ)`.
pub fn exp_generators(basis: &[DMatrix<f64>], coeffs: &[f64]) -> DMatrix<f64> {
    generator(basis, coeffs).exp()
}

/// Fréchet derivative of the matrix exponential at `a` in direction `e`,
/// read off the upper-right block of `exp([[a, e], [0, a]])`.
pub fn expm_frechet(a: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    big.view_mut((n, n), (n, n)).copy_from(a);
    big.view_mut((0, n), (n, n)).copy_from(e);
    big.exp().view((0, n), (n, n)).into_owned()
}

pub fn sl3_exp(h: &[f64; 8]) -> Matrix3<f64> {
    let m = exp_generators(&sl3_basis(), h);
    Matrix3::from_fn(|i, j| m[(i, j)])
}

pub fn se3_exp(xi: &[f64; 6]) -> Pose {
    let m = exp_generators(&se3_basis(), xi);
    Pose::new(
        Matrix3::from_fn(|i, j| m[(i, j)]),
        Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
    )
}

/// `1 x k` coefficients → the first `out_rows` rows of `exp(Σ cᵢ Bᵢ)`,
/// flattened row-major into a single row.
pub struct MatExp {
    basis: Vec<DMatrix<f64>>,
    out_rows: usize,
}

impl MatExp {
    pub fn sl3() -> Self {
        Self {
            basis: sl3_basis(),
            out_rows: 3,
        }
    }

    pub fn se3() -> Self {
        Self {
            basis: se3_basis(),
            out_rows: 3,
        }
    }
}

impl CustomOp for MatExp {
    fn name(&self) -> &'static str {
        "mat_exp"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let c: Vec<f64> = inputs[0].iter().copied().collect();
        let m = exp_generators(&self.basis, &c);
        let n = m.ncols();
        Mat::from_shape_fn((1, self.out_rows * n), |(_, k)| m[(k / n, k % n)])
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let c: Vec<f64> = inputs[0].iter().copied().collect();
        let a = generator(&self.basis, &c);
        let n = a.nrows();
        let mut g = DMatrix::zeros(n, n);
        for (k, v) in grad.iter().enumerate() {
            g[(k / n, k % n)] = *v;
        }
        // ⟨G, L(A, E)⟩ = ⟨L(Aᵀ, G), E⟩, so one block exponential covers all generators.
        let ga = expm_frechet(&a.transpose(), &g);
        let out = Mat::from_shape_fn(inputs[0].dim(), |(_, i)| ga.component_mul(&self.basis[i]).sum());
        vec![Some(out)]
    }
}

/// Per-row homography: points `B x 2`, matrices `B x 9` (row-major) → `B x 2`.
struct RowHomography;

fn project(h: &[f64], x: f64, y: f64) -> (f64, f64, f64) {
    let a = h[0] * x + h[1] * y + h[2];
    let b = h[3] * x + h[4] * y + h[5];
    let w = h[6] * x + h[7] * y + h[8];
    (a / w, b / w, w)
}

impl CustomOp for RowHomography {
    fn name(&self) -> &'static str {
        "row_homography"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (p, h) = (inputs[0], inputs[1]);
        let mut out = Mat::zeros((p.nrows(), 2));
        for i in 0..p.nrows() {
            let hr: Vec<f64> = h.row(i).to_vec();
            let (q0, q1, _) = project(&hr, p[[i, 0]], p[[i, 1]]);
            out[[i, 0]] = q0;
            out[[i, 1]] = q1;
        }
        out
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let (p, h) = (inputs[0], inputs[1]);
        let mut gp = Mat::zeros(p.dim());
        let mut gh = Mat::zeros(h.dim());
        for i in 0..p.nrows() {
            let hr: Vec<f64> = h.row(i).to_vec();
            let (x, y) = (p[[i, 0]], p[[i, 1]]);
            let (q0, q1, w) = project(&hr, x, y);
            let (g0, g1) = (grad[[i, 0]] / w, grad[[i, 1]] / w);
            gp[[i, 0]] = g0 * (hr[0] - q0 * hr[6]) + g1 * (hr[3] - q1 * hr[6]);
            gp[[i, 1]] = g0 * (hr[1] - q0 * hr[7]) + g1 * (hr[4] - q1 * hr[7]);
            let xb = [x, y, 1.0];
            for j in 0..3 {
                gh[[i, j]] = g0 * xb[j];
                gh[[i, 3 + j]] = g1 * xb[j];
                gh[[i, 6 + j]] = -(g0 * q0 + g1 * q1) * xb[j];
            }
        }
        vec![Some(gp), Some(gh)]
    }
}

/// Per-row rigid motion: points `B x 3`, `[R | t]` rows `B x 12` → `B x 3`.
struct RowRigid;

impl CustomOp for RowRigid {
    fn name(&self) -> &'static str {
        "row_rigid"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (p, m) = (inputs[0], inputs[1]);
        Mat::from_shape_fn((p.nrows(), 3), |(i, r)| {
            m[[i, 4 * r]] * p[[i, 0]] + m[[i, 4 * r + 1]] * p[[i, 1]] + m[[i, 4 * r + 2]] * p[[i, 2]] + m[[i, 4 * r + 3]]
        })
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let (p, m) = (inputs[0], inputs[1]);
        let mut gp = Mat::zeros(p.dim());
        let mut gm = Mat::zeros(m.dim());
        for i in 0..p.nrows() {
            for r in 0..3 {
                let g = grad[[i, r]];
                for c in 0..3 {
                    gp[[i, c]] += g * m[[i, 4 * r + c]];
                    gm[[i, 4 * r + c]] = g * p[[i, c]];
                }
                gm[[i, 4 * r + 3]] = g;
            }
        }
        vec![Some(gp), Some(gm)]
    }
}

/// Smallest |w| below which a homogeneous point is treated as at infinity.
pub const DEHOMOGENIZE_EPS: f64 = 1e-12;

/// Apply per-row homographies. Returns the offending row index when a point
/// maps to infinity.
pub fn apply_homography_rows(tape: &mut Tape, points: Var, h: Var) -> Result<Result<Var, usize>, TapeError> {
    check_rows(tape, points, h, 2, 9, "row_homography")?;
    let (p, hv) = (tape.value(points), tape.value(h));
    for i in 0..p.nrows() {
        let w = hv[[i, 6]] * p[[i, 0]] + hv[[i, 7]] * p[[i, 1]] + hv[[i, 8]];
        if w.abs() < DEHOMOGENIZE_EPS || !w.is_finite() {
            return Ok(Err(i));
        }
    }
    Ok(Ok(tape.custom(Box::new(RowHomography), &[points, h])))
}

pub fn apply_rigid_rows(tape: &mut Tape, points: Var, m: Var) -> Result<Var, TapeError> {
    check_rows(tape, points, m, 3, 12, "row_rigid")?;
    Ok(tape.custom(Box::new(RowRigid), &[points, m]))
}

fn check_rows(tape: &Tape, points: Var, m: Var, d: usize, k: usize, op: &'static str) -> Result<(), TapeError> {
    let (p, mv) = (tape.value(points).dim(), tape.value(m).dim());
    if p.1 != d || mv.1 != k || p.0 != mv.0 {
        return Err(TapeError::Shape {
            op,
            detail: format!("points {p:?}, transforms {mv:?}"),
        });
    }
    Ok(())
}

pub fn homography_row(h: &Matrix3<f64>) -> Vec<f64> {
    (0..9).map(|k| h[(k / 3, k % 3)]).collect()
}

pub fn homography_from_row(r: &[f64]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[3 * i + j])
}

pub fn pose_row(p: &Pose) -> Vec<f64> {
    p.to_row_major().to_vec()
}

pub fn pose_from_row(r: &[f64]) -> Pose {
    Pose::new(Matrix3::from_fn(|i, j| r[4 * i + j]), Vector3::new(r[3], r[7], r[11]))
}
