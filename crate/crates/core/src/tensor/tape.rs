//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation appends one node, so the tape is always in topological
//! order and `backward` visits each node exactly once in a single reverse
//! sweep. A tape is confined to one logical thread; the tensors it holds are
//! immutable once produced.

use crate::error::{Error, Result};

use super::{col_sums, matmul_kernel, matmul_nt, matmul_tn, pairwise_js_kernel, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Tape, &Tensor) -> Vec<(Var, Tensor)>>;

struct Node {
    value: Tensor,
    tracked: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds this variable's gradient into `target.grad`, initializing the
    /// accumulator with zeros first. An unreached variable contributes zero.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let n = target.elem_count();
        let acc = target.grad.get_or_insert_with(|| vec![0.0; n]);
        if acc.len() != n {
            return Err(Error::contract("gradient accumulator shape drifted"));
        }
        if let Some(g) = self.get(v) {
            if g.elem_count() != n {
                return Err(Error::Dimension {
                    op: "accumulate_into",
                    lhs: g.shape().to_vec(),
                    rhs: target.shape().to_vec(),
                });
            }
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }
}

/// Running statistics for one batch-norm unit. Updated only in training mode.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Running stats that make eval-mode normalization the exact identity.
    pub fn identity(dim: usize) -> Self {
        let mut s = BnState::new(dim);
        s.running_var = vec![1.0 - s.eps; dim];
        s
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        self.push(t, tracked, None)
    }

    /// Inserts a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, tracked: bool, grad_fn: Option<GradFn>) -> Var {
        self.nodes.push(Node {
            value,
            tracked,
            grad_fn,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn emit(&mut self, value: Tensor, parents_tracked: bool, grad_fn: GradFn) -> Var {
        if parents_tracked {
            self.push(value, true, Some(grad_fn))
        } else {
            self.push(value, false, None)
        }
    }

    // ── arithmetic ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(
            out,
            tracked,
            Box::new(move |tape, g| {
                let av = tape.value(a);
                let bv = tape.value(b);
                let (m, k) = av.dims2("matmul").expect("checked");
                let n = bv.shape()[1];
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(a) {
                    let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                    grads.push((a, Tensor::new(vec![m, k], ga).expect("shape")));
                }
                if tape.tracked(b) {
                    let gb = matmul_tn(av.data(), g.data(), m, k, n);
                    grads.push((b, Tensor::new(vec![k, n], gb).expect("shape")));
                }
                grads
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(
            out,
            tracked,
            Box::new(move |tape, g| {
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(a) {
                    grads.push((a, g.clone()));
                }
                if tape.tracked(b) {
                    grads.push((b, g.clone()));
                }
                grads
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(
            out,
            tracked,
            Box::new(move |tape, g| {
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(a) {
                    grads.push((a, g.clone()));
                }
                if tape.tracked(b) {
                    grads.push((b, g.scale(-1.0)));
                }
                grads
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(
            out,
            tracked,
            Box::new(move |tape, g| {
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(a) {
                    grads.push((a, g.mul(tape.value(b)).expect("shape")));
                }
                if tape.tracked(b) {
                    grads.push((b, g.mul(tape.value(a)).expect("shape")));
                }
                grads
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.emit(
            out,
            self.tracked(a),
            Box::new(move |_, g| vec![(a, g.scale(c))]),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Broadcast-add a row vector `v` (len c) to every row of `m` (r×c).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(m).dims2("add_row")?;
        if self.value(v).shape() != [c] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.value(m).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let mut data = self.value(m).data().to_vec();
        let vv = self.value(v).data();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(vv) {
                *o += b;
            }
        }
        let tracked = self.tracked(m) || self.tracked(v);
        Ok(self.emit(
            Tensor::new(vec![r, c], data)?,
            tracked,
            Box::new(move |tape, g| {
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(m) {
                    grads.push((m, g.clone()));
                }
                if tape.tracked(v) {
                    let gv = col_sums(g.data(), r, c);
                    grads.push((v, Tensor::vector(gv)));
                }
                grads
            }),
        ))
    }

    /// Repeats a row vector (len c) into an r×c matrix.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.shape().len() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_row",
                lhs: vv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c = vv.shape()[0];
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(vv.data());
        }
        Ok(self.emit(
            Tensor::new(vec![rows, c], data)?,
            self.tracked(v),
            Box::new(move |_, g| {
                let gv = col_sums(g.data(), rows, c);
                vec![(v, Tensor::vector(gv))]
            }),
        ))
    }

    // ── activations ──────────────────────────────────────────────────────

    /// Leaky rectifier; `slope` must lie in (0, 1).
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        Ok(self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| {
                let x = tape.value(a);
                let gd = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv >= 0.0 { gv } else { slope * gv })
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), gd).expect("shape"))]
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| {
                let x = tape.value(a);
                let gd = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), gd).expect("shape"))]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let id = Var(self.nodes.len());
        self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| vec![(a, g.mul(tape.value(id)).expect("shape"))]),
        )
    }

    /// Elementwise power; inputs must be positive when `p` is fractional.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| {
                let x = tape.value(a);
                let gd = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * p * xv.powf(p - 1.0))
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), gd).expect("shape"))]
            }),
        )
    }

    // ── reductions and reshapes ──────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| {
                let x = tape.value(a);
                vec![(a, Tensor::full(x.shape(), g.data()[0]))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).elem_count() as f64;
        let out = Tensor::scalar(self.value(a).sum() / n);
        self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| {
                let x = tape.value(a);
                vec![(a, Tensor::full(x.shape(), g.data()[0] / n))]
            }),
        )
    }

    /// Sums each row of an r×c matrix into a length-r vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("row_sum")?;
        let data: Vec<f64> = (0..r)
            .map(|i| self.value(a).data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        Ok(self.emit(
            Tensor::vector(data),
            self.tracked(a),
            Box::new(move |_, g| {
                let mut gd = Vec::with_capacity(r * c);
                for i in 0..r {
                    gd.extend(std::iter::repeat(g.data()[i]).take(c));
                }
                vec![(a, Tensor::new(vec![r, c], gd).expect("shape"))]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.elem_count() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let old = v.shape().to_vec();
        Ok(self.emit(
            out,
            self.tracked(a),
            Box::new(move |_, g| {
                vec![(
                    a,
                    Tensor::new(old.clone(), g.data().to_vec()).expect("shape"),
                )]
            }),
        ))
    }

    /// out[i][j] = m[i][j] * v[i] for v of length r.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(m).dims2("scale_rows")?;
        if self.value(v).shape() != [r] {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: self.value(m).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(mv[i * c..(i + 1) * c].iter().map(|&x| x * vv[i]));
        }
        let tracked = self.tracked(m) || self.tracked(v);
        Ok(self.emit(
            Tensor::new(vec![r, c], data)?,
            tracked,
            Box::new(move |tape, g| {
                let mv = tape.value(m).data();
                let vv = tape.value(v).data();
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(m) {
                    let mut gm = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gm.extend(g.data()[i * c..(i + 1) * c].iter().map(|&x| x * vv[i]));
                    }
                    grads.push((m, Tensor::new(vec![r, c], gm).expect("shape")));
                }
                if tape.tracked(v) {
                    let gv: Vec<f64> = (0..r)
                        .map(|i| {
                            g.data()[i * c..(i + 1) * c]
                                .iter()
                                .zip(&mv[i * c..(i + 1) * c])
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    grads.push((v, Tensor::vector(gv)));
                }
                grads
            }),
        ))
    }

    /// out[i][j] = m[i][j] * v[j] for v of length c.
    pub fn scale_cols(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(m).dims2("scale_cols")?;
        if self.value(v).shape() != [c] {
            return Err(Error::Dimension {
                op: "scale_cols",
                lhs: self.value(m).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(
                mv[i * c..(i + 1) * c]
                    .iter()
                    .zip(vv)
                    .map(|(&x, &w)| x * w),
            );
        }
        let tracked = self.tracked(m) || self.tracked(v);
        Ok(self.emit(
            Tensor::new(vec![r, c], data)?,
            tracked,
            Box::new(move |tape, g| {
                let mv = tape.value(m).data();
                let vv = tape.value(v).data();
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(m) {
                    let mut gm = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gm.extend(
                            g.data()[i * c..(i + 1) * c]
                                .iter()
                                .zip(vv)
                                .map(|(&x, &w)| x * w),
                        );
                    }
                    grads.push((m, Tensor::new(vec![r, c], gm).expect("shape")));
                }
                if tape.tracked(v) {
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for (o, (&gval, &mval)) in gv
                            .iter_mut()
                            .zip(g.data()[i * c..(i + 1) * c].iter().zip(&mv[i * c..(i + 1) * c]))
                        {
                            *o += gval * mval;
                        }
                    }
                    grads.push((v, Tensor::vector(gv)));
                }
                grads
            }),
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no inputs"));
        }
        let r = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let parts = parts.to_vec();
        Ok(self.emit(
            Tensor::new(vec![r, total], data)?,
            tracked,
            Box::new(move |tape, g| {
                let mut grads = Vec::new();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if tape.tracked(p) {
                        let mut gd = Vec::with_capacity(r * w);
                        for i in 0..r {
                            let row = &g.data()[i * total + offset..i * total + offset + w];
                            gd.extend_from_slice(row);
                        }
                        grads.push((p, Tensor::new(vec![r, w], gd).expect("shape")));
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("vstack: no inputs"));
        }
        let c = self.value(parts[0]).dims2("vstack")?.1;
        let mut heights = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("vstack")?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "vstack",
                    lhs: vec![c],
                    rhs: vec![pc],
                });
            }
            heights.push(pr);
            data.extend_from_slice(self.value(p).data());
        }
        let total: usize = heights.iter().sum();
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let parts = parts.to_vec();
        Ok(self.emit(
            Tensor::new(vec![total, c], data)?,
            tracked,
            Box::new(move |tape, g| {
                let mut grads = Vec::new();
                let mut offset = 0;
                for (&p, &h) in parts.iter().zip(&heights) {
                    if tape.tracked(p) {
                        let gd = g.data()[offset * c..(offset + h) * c].to_vec();
                        grads.push((p, Tensor::new(vec![h, c], gd).expect("shape")));
                    }
                    offset += h;
                }
                grads
            }),
        ))
    }

    // ── distribution ops ─────────────────────────────────────────────────

    /// Softmax over a 1-d vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|&x| (x - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        let out = Tensor::vector(exps.iter().map(|&e| e / s).collect());
        let id = Var(self.nodes.len());
        Ok(self.emit(
            out,
            self.tracked(a),
            Box::new(move |tape, g| {
                let y = tape.value(id).data();
                let dot: f64 = g.data().iter().zip(y).map(|(&a, &b)| a * b).sum();
                let gd = g.data().iter().zip(y).map(|(&gv, &yv)| yv * (gv - dot)).collect();
                vec![(a, Tensor::vector(gd))]
            }),
        ))
    }

    /// Normalizes each row to a probability vector after adding `smoothing`
    /// to every entry. A row whose raw sum is zero is a numeric error.
    pub fn row_normalize(&mut self, a: Var, smoothing: f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2("row_normalize")?;
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(r * c);
        let mut sums = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            if row.iter().sum::<f64>() == 0.0 {
                return Err(Error::numeric(format!(
                    "row_normalize: all-zero distribution at row {i}"
                )));
            }
            let s: f64 = row.iter().map(|&v| v + smoothing).sum();
            sums.push(s);
            data.extend(row.iter().map(|&v| (v + smoothing) / s));
        }
        let id = Var(self.nodes.len());
        Ok(self.emit(
            Tensor::new(vec![r, c], data)?,
            self.tracked(a),
            Box::new(move |tape, g| {
                let y = tape.value(id).data();
                let mut gd = Vec::with_capacity(r * c);
                for i in 0..r {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let yrow = &y[i * c..(i + 1) * c];
                    let dot: f64 = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gd.extend(grow.iter().map(|&gv| (gv - dot) / sums[i]));
                }
                vec![(a, Tensor::new(vec![r, c], gd).expect("shape"))]
            }),
        ))
    }

    /// Pairwise Jensen–Shannon divergence between the rows of `p`; rows must
    /// be strictly positive probability vectors (see `row_normalize`).
    pub fn pairwise_js(&mut self, p: Var) -> Result<Var> {
        let (r, d) = self.value(p).dims2("pairwise_js")?;
        if self.value(p).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract(
                "pairwise_js: rows must be strictly positive probability vectors",
            ));
        }
        let out = pairwise_js_kernel(self.value(p).data(), r, d);
        Ok(self.emit(
            Tensor::new(vec![r, r], out)?,
            self.tracked(p),
            Box::new(move |tape, g| {
                // dJS(p_a, p_j)/dp_ak = ½ ln(2 p_ak / (p_ak + p_jk)).
                let pv = tape.value(p).data();
                let mut gp = vec![0.0; r * d];
                for a in 0..r {
                    let pa = &pv[a * d..(a + 1) * d];
                    for j in 0..r {
                        let w = g.data()[a * r + j] + g.data()[j * r + a];
                        if w == 0.0 || j == a {
                            continue;
                        }
                        let pj = &pv[j * d..(j + 1) * d];
                        for k in 0..d {
                            gp[a * d + k] +=
                                0.5 * w * (2.0 * pa[k] / (pa[k] + pj[k])).ln();
                        }
                    }
                }
                vec![(p, Tensor::new(vec![r, d], gp).expect("shape"))]
            }),
        ))
    }

    // ── structured ops ───────────────────────────────────────────────────

    /// Picks row `idx` of an embedding table (v×d) as a length-d vector.
    pub fn embed(&mut self, table: Var, idx: usize) -> Result<Var> {
        let (v, d) = self.value(table).dims2("embed")?;
        if idx >= v {
            return Err(Error::contract(format!(
                "embed: index {idx} out of range for table with {v} rows"
            )));
        }
        let row = self.value(table).data()[idx * d..(idx + 1) * d].to_vec();
        Ok(self.emit(
            Tensor::vector(row),
            self.tracked(table),
            Box::new(move |_, g| {
                let mut gt = vec![0.0; v * d];
                gt[idx * d..(idx + 1) * d].copy_from_slice(g.data());
                vec![(table, Tensor::new(vec![v, d], gt).expect("shape"))]
            }),
        ))
    }

    /// All pairwise Hadamard products between rows of `a` (p×d) and rows of
    /// `b` (q×d); row i·q+j of the output is a_i ∘ b_j.
    pub fn pair_hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, d) = self.value(a).dims2("pair_hadamard")?;
        let (q, d2) = self.value(b).dims2("pair_hadamard")?;
        if d != d2 {
            return Err(Error::Dimension {
                op: "pair_hadamard",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(p * q * d);
        for i in 0..p {
            for j in 0..q {
                data.extend(
                    av[i * d..(i + 1) * d]
                        .iter()
                        .zip(&bv[j * d..(j + 1) * d])
                        .map(|(&x, &y)| x * y),
                );
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(
            Tensor::new(vec![p * q, d], data)?,
            tracked,
            Box::new(move |tape, g| {
                let av = tape.value(a).data();
                let bv = tape.value(b).data();
                let mut grads = Vec::with_capacity(2);
                if tape.tracked(a) {
                    let mut ga = vec![0.0; p * d];
                    for i in 0..p {
                        for j in 0..q {
                            let grow = &g.data()[(i * q + j) * d..(i * q + j + 1) * d];
                            for k in 0..d {
                                ga[i * d + k] += grow[k] * bv[j * d + k];
                            }
                        }
                    }
                    grads.push((a, Tensor::new(vec![p, d], ga).expect("shape")));
                }
                if tape.tracked(b) {
                    let mut gb = vec![0.0; q * d];
                    for i in 0..p {
                        for j in 0..q {
                            let grow = &g.data()[(i * q + j) * d..(i * q + j + 1) * d];
                            for k in 0..d {
                                gb[j * d + k] += grow[k] * av[i * d + k];
                            }
                        }
                    }
                    grads.push((b, Tensor::new(vec![q, d], gb).expect("shape")));
                }
                grads
            }),
        ))
    }

    /// Batch normalization over the row (batch) axis of `x` (n×c).
    /// Training mode uses batch statistics and folds them into `state`;
    /// eval mode uses the running statistics unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        training: bool,
    ) -> Result<Var> {
        let (n, c) = self.value(x).dims2("batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: vec![c],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        if state.running_mean.len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: vec![c],
                rhs: vec![state.running_mean.len()],
            });
        }
        if training && n < 2 {
            return Err(Error::numeric(format!(
                "batch_norm: degenerate batch of {n} row(s) in training mode"
            )));
        }
        let xd = self.value(x).data();
        let eps = state.eps;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for (m, &v) in mean.iter_mut().zip(&xd[i * c..(i + 1) * c]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            for i in 0..n {
                for j in 0..c {
                    let d = xd[i * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            for j in 0..c {
                state.running_mean[j] =
                    (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
                state.running_var[j] =
                    (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                xhat.push((xd[i * c + j] - mean[j]) * inv_std[j]);
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                out.push(gv[j] * xhat[i * c + j] + bv[j]);
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let xhat_saved = xhat;
        let inv_std_saved = inv_std;
        Ok(self.emit(
            Tensor::new(vec![n, c], out)?,
            tracked,
            Box::new(move |tape, g| {
                let gamma_v = tape.value(gamma).data();
                let gd = g.data();
                let mut grads = Vec::with_capacity(3);
                if tape.tracked(x) {
                    let mut gx = vec![0.0; n * c];
                    if training {
                        // Full batch-norm backward through batch mean/var.
                        let mut sum_g = vec![0.0; c];
                        let mut sum_gx = vec![0.0; c];
                        for i in 0..n {
                            for j in 0..c {
                                sum_g[j] += gd[i * c + j];
                                sum_gx[j] += gd[i * c + j] * xhat_saved[i * c + j];
                            }
                        }
                        for i in 0..n {
                            for j in 0..c {
                                let term = gd[i * c + j]
                                    - sum_g[j] / n as f64
                                    - xhat_saved[i * c + j] * sum_gx[j] / n as f64;
                                gx[i * c + j] = gamma_v[j] * inv_std_saved[j] * term;
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..c {
                                gx[i * c + j] = gd[i * c + j] * gamma_v[j] * inv_std_saved[j];
                            }
                        }
                    }
                    grads.push((x, Tensor::new(vec![n, c], gx).expect("shape")));
                }
                if tape.tracked(gamma) {
                    let mut gg = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            gg[j] += gd[i * c + j] * xhat_saved[i * c + j];
                        }
                    }
                    grads.push((gamma, Tensor::vector(gg)));
                }
                if tape.tracked(beta) {
                    let gb = col_sums(gd, n, c);
                    grads.push((beta, Tensor::vector(gb)));
                }
                grads
            }),
        ))
    }

    // ── composites ───────────────────────────────────────────────────────

    /// Mean squared error between two same-shape variables.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Sum of squared entries, the L2 penalty contribution of one tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Full matmul kernel reused for eager (non-tracked) work on tape values.
    pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul")?;
        let (_, n) = b.dims2("matmul")?;
        Ok(Tensor::new(
            vec![m, n],
            matmul_kernel(a.data(), b.data(), m, k, n),
        )?)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a single-element output. Returns gradients for all
    /// tracked variables reachable from `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.elem_count() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                ov.shape()
            )));
        }
        if !ov.is_finite() {
            return Err(Error::numeric("backward: non-finite loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(out) {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(Tensor::full(ov.shape(), 1.0));
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (parent, contrib) in grad_fn(self, &g) {
                debug_assert!(parent.0 < id, "tape must stay topologically ordered");
                if !self.tracked(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        // Leaves keep their gradients; interior nodes are reported too, which
        // the gradient checker uses.
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_param;

    #[test]
    fn backward_of_shared_subexpression_accumulates() {
        // y = sum(x ∘ x + x ∘ x): dy/dx = 4x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let y = tape.sum(s);
        let grads = tape.backward(y).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[4.0, -8.0, 12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let y = tape.sum(p);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn leaky_relu_values_and_slope_check() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -0.4]);
        assert!(tape.leaky_relu(x, 0.0).is_err());
        assert!(tape.leaky_relu(x, 1.0).is_err());
        assert!(tape.leaky_relu(x, -0.5).is_err());
    }

    #[test]
    fn batch_norm_training_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(init_param(&[8, 3], 5).unwrap().scale(10.0));
        let gamma = tape.leaf(Tensor::vector(vec![1.0; 3]));
        let beta = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let mut state = BnState::new(3);
        let y = tape
            .batch_norm(x, gamma, beta, &mut state, true)
            .unwrap();
        let out = tape.value(y);
        for j in 0..3 {
            let col: Vec<f64> = (0..8).map(|i| out.at2(i, j)).collect();
            let mean: f64 = col.iter().sum::<f64>() / 8.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "column mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "column var {var}");
        }
        // Running stats moved away from their init.
        assert!(state.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batch_norm_eval_constant_column_is_centered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![5.0], vec![5.0]]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![2.0]));
        let beta = tape.leaf(Tensor::vector(vec![7.0]));
        let mut state = BnState::new(1);
        state.running_mean = vec![5.0];
        let y = tape
            .batch_norm(x, gamma, beta, &mut state, false)
            .unwrap();
        // (5 − 5)/σ = 0 before the shift, so the output is exactly β.
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn batch_norm_rejects_degenerate_training_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let beta = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let mut state = BnState::new(2);
        let err = tape
            .batch_norm(x, gamma, beta, &mut state, true)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn batch_norm_eval_mode_leaves_running_stats_alone() {
        let mut tape = Tape::new();
        let x = tape.leaf(init_param(&[4, 2], 3).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let beta = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let mut state = BnState::new(2);
        let before = state.running_mean.clone();
        tape.batch_norm(x, gamma, beta, &mut state, false).unwrap();
        assert_eq!(state.running_mean, before);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0, -2.0, 0.5]));
        let y = tape.softmax(x).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn row_normalize_rejects_all_zero_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let err = tape.row_normalize(x, 1e-9).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn pairwise_js_matches_direct_two_row_formula() {
        let mut tape = Tape::new();
        let p = tape.leaf(
            Tensor::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap(),
        );
        let j = tape.pairwise_js(p).unwrap();
        let out = tape.value(j);
        assert_eq!(out.at2(0, 0), 0.0);
        assert!((out.at2(0, 1) - 0.033822).abs() < 1e-5);
        assert_eq!(out.at2(0, 1), out.at2(1, 0));
    }

    #[test]
    fn embed_picks_row_and_scatters_gradient() {
        let mut tape = Tape::new();
        let t = tape.leaf(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
                .unwrap()
                .with_grad(),
        );
        let e = tape.embed(t, 1).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 4.0]);
        let s = tape.sum(e);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(t).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(tape.embed(t, 3).is_err());
    }

    #[test]
    fn pair_hadamard_layout() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![10.0, 100.0]]).unwrap());
        let h = tape.pair_hadamard(a, b).unwrap();
        assert_eq!(tape.value(h).shape(), &[2, 2]);
        assert_eq!(tape.value(h).data(), &[10.0, 200.0, 30.0, 400.0]);
    }
}
