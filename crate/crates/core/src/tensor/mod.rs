//! Dense row-major f64 tensors and the eager kernels shared by the tape ops.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_default, relative_error};
pub use optim::{adam_step, AdamState};
pub use tape::{BnState, Gradients, Tape, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Immutable n-d value. `grad` is filled by [`Gradients::accumulate_into`]
/// and consumed by [`adam_step`].
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::contract("from_rows: ragged row lengths"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a 2-d tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let c = self.shape[1];
        self.data[i * c + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = matmul_kernel(&self.data, &rhs.data, m, k, n);
        Tensor::new(vec![m, n], data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }
}

/// Uniform init over ±sqrt(6 / (fan_in + fan_out)), deterministic per seed.
pub fn init_param(shape: &[usize], seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n == 0 || shape.is_empty() {
        return Err(Error::contract(format!(
            "init_param: zero-extent shape {shape:?}"
        )));
    }
    let fan_in = shape[0] as f64;
    let fan_out = *shape.last().expect("non-empty shape") as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
        requires_grad: true,
        grad: None,
    })
}

// ── shared kernels ───────────────────────────────────────────────────────

/// `a` is m×k, `b` is k×n. Zero entries of `a` are skipped, which makes
/// multiplication by sparsified affinity matrices cheap.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g` is m×n, `b` is k×n: returns g·bᵀ (m×k) without materializing bᵀ.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a` is k×m, `g` is k×n: returns aᵀ·g (m×n) without materializing aᵀ.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let grow = &g[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Pairwise Jensen–Shannon divergence between rows of `p` (r×d, each row a
/// probability vector with strictly positive entries). Natural log; the
/// output is symmetric, zero-diagonal, bounded by ln 2.
pub fn pairwise_js_rows(p: &[f64], r: usize, d: usize) -> Vec<f64> {
    pairwise_js_kernel(p, r, d)
}

pub(crate) fn pairwise_js_kernel(p: &[f64], r: usize, d: usize) -> Vec<f64> {
    // JS(p,q) = ½[Σp ln p + Σq ln q − Σ(p+q) ln((p+q)/2)] when Σp = Σq = 1.
    let ent: Vec<f64> = (0..r)
        .map(|i| {
            p[i * d..(i + 1) * d]
                .iter()
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .collect();
    let mut out = vec![0.0; r * r];
    for i in 0..r {
        let pi = &p[i * d..(i + 1) * d];
        for j in (i + 1)..r {
            let pj = &p[j * d..(j + 1) * d];
            let cross: f64 = pi
                .iter()
                .zip(pj)
                .map(|(&a, &b)| {
                    let s = a + b;
                    s * (0.5 * s).ln()
                })
                .sum();
            let js = 0.5 * (ent[i] + ent[j] - cross);
            let js = js.max(0.0);
            out[i * r + j] = js;
            out[j * r + i] = js;
        }
    }
    out
}

pub(crate) fn col_sums(g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(&g[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Tensor::identity(2);
        let out = a.matmul(&i).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn init_param_is_deterministic_and_bounded() {
        let a = init_param(&[7, 5], 42).unwrap();
        let b = init_param(&[7, 5], 42).unwrap();
        assert_eq!(a.data(), b.data());
        let c = init_param(&[7, 5], 43).unwrap();
        assert_ne!(a.data(), c.data());
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        // Not all values collapsed near zero.
        assert!(a.data().iter().any(|v| v.abs() > bound / 10.0));
    }

    #[test]
    fn init_param_rejects_zero_extent() {
        assert!(init_param(&[0, 4], 1).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = init_param(&[3, 5], 9).unwrap();
        let back = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a.data(), back.data());
    }

    #[test]
    fn matmul_nt_tn_match_composed_transpose() {
        let a = init_param(&[4, 3], 1).unwrap();
        let b = init_param(&[5, 3], 2).unwrap();
        let direct = matmul_nt(a.data(), b.data(), 4, 3, 5);
        let composed = a.matmul(&b.transpose().unwrap()).unwrap();
        for (x, y) in direct.iter().zip(composed.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = init_param(&[4, 6], 3).unwrap();
        let direct = matmul_tn(a.data(), c.data(), 4, 3, 6);
        let composed = a.transpose().unwrap().matmul(&c).unwrap();
        for (x, y) in direct.iter().zip(composed.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
