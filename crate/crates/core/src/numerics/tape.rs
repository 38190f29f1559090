//! Operation-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with whatever the adjoint needs. Parameters are referenced in place from a
//! borrowed [`ParamSet`], so building a tape never copies weights.

use super::ops::{self, gemm, LAYER_NORM_EPS};
use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{OreoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterAddCols {
        src: Var,
        idx: Vec<usize>,
    },
    L1NormRows {
        x: Var,
        fallback: Var,
        totals: Vec<f64>,
    },
    SetRows {
        base: Var,
        rows: Var,
        pos: Vec<usize>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SoftmaxXent {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(OreoError::Numerical(format!("{what} produced a non-finite value")))
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(OreoError::shape(format!(
                "matmul needs matrices, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ra, ca) = (av.shape()[0], av.shape()[1]);
        let (rb, cb) = (bv.shape()[0], bv.shape()[1]);
        let (m, k, rsa, csa) = if ta {
            (ca, ra, 1, ca as isize)
        } else {
            (ra, ca, ca as isize, 1)
        };
        let (k2, n, rsb, csb) = if tb {
            (cb, rb, 1, cb as isize)
        } else {
            (rb, cb, cb as isize, 1)
        };
        if k != k2 {
            return Err(OreoError::shape(format!(
                "matmul inner extents {k} vs {k2} ({:?} x {:?})",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), rsa, csa, bv.data(), rsb, csb, &mut out, false);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, t))
    }

    /// `a · b` for `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `[m,k] x [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(OreoError::shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(OreoError::shape(format!("add_row: width {c} vs {}", rv.len())));
        }
        let mut t = av.clone();
        for r in 0..t.rows() {
            for (x, y) in t.row_mut(r).iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a, row), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(OreoError::shape(format!("mul {:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(OreoError::shape(format!("mul_row: width {c} vs {}", rv.len())));
        }
        let mut t = av.clone();
        for r in 0..t.rows() {
            for (x, y) in t.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= y;
            }
        }
        Ok(self.push(Op::MulRow(a, row), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(ops::gelu);
        self.push(Op::Gelu(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        check_finite(&t, "exp")?;
        Ok(self.push(Op::Exp(a), t))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        if t.cols() == 0 {
            return Err(OreoError::shape("softmax over an empty axis"));
        }
        for r in 0..t.rows() {
            ops::softmax_in_place(t.row_mut(r));
        }
        Ok(self.push(Op::SoftmaxRows(a), t))
    }

    /// Layer normalization over the last axis with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, stats) = ops::layer_norm_rows(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            LAYER_NORM_EPS,
        )?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
            t,
        ))
    }

    /// Selects rows `idx` of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (r, c) = dims2(sv);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(OreoError::Index { index: i, extent: r });
            }
            out.extend_from_slice(sv.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(Op::GatherRows { src, idx: idx.to_vec() }, t))
    }

    /// Selects columns `idx` of every row.
    pub fn gather_cols(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (r, c) = dims2(sv);
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(OreoError::Index { index: bad, extent: c });
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = sv.row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let t = Tensor::matrix(r, idx.len(), out)?;
        Ok(self.push(Op::GatherCols { src, idx: idx.to_vec() }, t))
    }

    /// Column-wise scatter-add into `out_extent` columns.
    pub fn scatter_add_cols(&mut self, src: Var, idx: &[usize], out_extent: usize) -> Result<Var> {
        let sv = self.value(src);
        let t = if sv.rank() == 2 {
            ops::scatter_add(sv, idx, out_extent, 1)?
        } else {
            let m = sv.clone().reshape(vec![1, sv.len()])?;
            ops::scatter_add(&m, idx, out_extent, 1)?
        };
        Ok(self.push(Op::ScatterAddCols { src, idx: idx.to_vec() }, t))
    }

    /// Row-wise L1 normalization; all-zero rows take the matching `fallback` row.
    pub fn l1_normalize_rows(&mut self, x: Var, fallback: Var) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(fallback));
        let t = ops::l1_normalize(xv, xv.rank().saturating_sub(1), fv)?;
        let totals = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        Ok(self.push(Op::L1NormRows { x, fallback, totals }, t))
    }

    /// Copy of `base` with rows `pos` overwritten by the rows of `rows`.
    pub fn set_rows(&mut self, base: Var, pos: &[usize], rows: Var) -> Result<Var> {
        let (bv, rv) = (self.value(base), self.value(rows));
        if rv.rows() != pos.len() || rv.cols() != bv.cols() {
            return Err(OreoError::shape("set_rows: replacement block mismatch"));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in pos {
            if p >= bv.rows() {
                return Err(OreoError::Index {
                    index: p,
                    extent: bv.rows(),
                });
            }
            if !seen.insert(p) {
                return Err(OreoError::Input(format!("set_rows: duplicate row {p}")));
            }
        }
        let mut t = bv.clone();
        for (k, &p) in pos.iter().enumerate() {
            t.row_mut(p).copy_from_slice(rv.row(k));
        }
        Ok(self.push(
            Op::SetRows {
                base,
                rows,
                pos: pos.to_vec(),
            },
            t,
        ))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        let (r, c) = dims2(sv);
        if start + len > c {
            return Err(OreoError::shape("slice_cols out of range"));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&sv.row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, out)?;
        Ok(self.push(Op::SliceCols { src, start }, t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(OreoError::shape("concat_cols: row mismatch"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    /// Per-row cross-entropy `-Σ_j target_j · log softmax(logits)_j`, shape `[rows]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = dims2(lv);
        if targets.len() != r * c {
            return Err(OreoError::shape(format!(
                "cross-entropy targets {:?} vs logits {:?}",
                targets.shape(),
                lv.shape()
            )));
        }
        if c == 0 {
            return Err(OreoError::shape("cross-entropy over zero classes"));
        }
        let mut probs = lv.clone();
        let mut loss = vec![0.0; r];
        for i in 0..r {
            let row = lv.row(i);
            let lse = ops::log_sum_exp(row);
            let t = &targets.data()[i * c..(i + 1) * c];
            loss[i] = t
                .iter()
                .zip(row)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, z)| w * (lse - z))
                .sum();
            ops::softmax_in_place(probs.row_mut(i));
        }
        let out = Tensor::vector(loss);
        check_finite(&out, "cross-entropy")?;
        let targets = Tensor::new(vec![r, c], targets.into_data())?;
        Ok(self.push(Op::SoftmaxXent { logits, targets, probs }, out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), t)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Sums a list of scalar nodes (empty list gives a zero constant).
    pub fn add_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `loss` with respect to every parameter touched.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.backward_wrt(loss, &[]).map(|(g, _)| g)
    }

    /// Like [`Tape::backward`], additionally returning the gradients of `inputs`.
    pub fn backward_wrt(self, loss: Var, inputs: &[Var]) -> Result<(Gradients, Vec<Tensor>)> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(OreoError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads[i].take()) {
                out.push(*id, g);
            }
        }
        let wrt = inputs
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect();
        Ok((out, wrt))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(e) => e.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ra, ca) = (av.shape()[0], av.shape()[1]);
                let (rb, cb) = (bv.shape()[0], bv.shape()[1]);
                let (m, k, rsa, csa) = if *ta {
                    (ca, ra, 1isize, ca as isize)
                } else {
                    (ra, ca, ca as isize, 1isize)
                };
                let (n, rsb, csb) = if *tb {
                    (rb, 1isize, cb as isize)
                } else {
                    (cb, cb as isize, 1isize)
                };
                // dA' = dC · B'ᵀ  [m,k]
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, n as isize, 1, bv.data(), csb, rsb, &mut da, false);
                let da = Tensor::matrix(m, k, da)?;
                acc(grads, *a, if *ta { da.transpose()? } else { da });
                // dB' = A'ᵀ · dC  [k,n]
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), csa, rsa, gd, n as isize, 1, &mut db, false);
                let db = Tensor::matrix(k, n, db)?;
                acc(grads, *b, if *tb { db.transpose()? } else { db });
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let c = g.cols();
                let mut dr = vec![0.0; c];
                for r in 0..g.rows() {
                    for (d, x) in dr.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                let shape = self.value(*row).shape().to_vec();
                acc(grads, *row, Tensor::new(shape, dr)?);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let c = av.cols();
                let mut da = g.clone();
                let mut dr = vec![0.0; c];
                for r in 0..av.rows() {
                    let arow = av.row(r);
                    let grow = g.row(r);
                    for j in 0..c {
                        dr[j] += grow[j] * arow[j];
                    }
                    for (x, y) in da.row_mut(r).iter_mut().zip(rv.data()) {
                        *x *= y;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *row, Tensor::new(rv.shape().to_vec(), dr)?);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * c)),
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = gd
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = gd.iter().zip(av.data()).map(|(g, x)| g * ops::gelu_grad(*x)).collect();
                acc(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.as_ref().expect("exp value");
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let mut d = y.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                let rows = g.rows();
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let s = rstd[r];
                    for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                        *v = s * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, Tensor::new(gv.shape().to_vec(), dg)?);
                let bshape = self.value(*bias).shape().to_vec();
                acc(grads, *bias, Tensor::new(bshape, db)?);
            }
            Op::GatherRows { src, idx } => {
                let mut d = Tensor::zeros(self.value(*src).shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                acc(grads, *src, d);
            }
            Op::GatherCols { src, idx } => {
                let mut d = Tensor::zeros(self.value(*src).shape());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let dr = d.row_mut(r);
                    for (k, &j) in idx.iter().enumerate() {
                        dr[j] += gr[k];
                    }
                }
                acc(grads, *src, d);
            }
            Op::ScatterAddCols { src, idx } => {
                let sv = self.value(*src);
                let mut out = Vec::with_capacity(sv.len());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    out.extend(idx.iter().map(|&j| gr[j]));
                }
                acc(grads, *src, Tensor::new(sv.shape().to_vec(), out)?);
            }
            Op::L1NormRows { x, fallback, totals } => {
                let y = self.nodes[i].value.as_ref().expect("l1 value");
                let mut dx = Tensor::zeros(y.shape());
                let mut df = Tensor::zeros(y.shape());
                for (r, &s) in totals.iter().enumerate() {
                    let gr = g.row(r);
                    if s > 0.0 {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                            *v = (gr[j] - dot) / s;
                        }
                    } else {
                        df.row_mut(r).copy_from_slice(gr);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *fallback, df);
            }
            Op::SetRows { base, rows, pos } => {
                let mut db = g.clone();
                let rv = self.value(*rows);
                let mut dr = Tensor::zeros(rv.shape());
                for (k, &p) in pos.iter().enumerate() {
                    dr.row_mut(k).copy_from_slice(g.row(p));
                    db.row_mut(p).iter_mut().for_each(|v| *v = 0.0);
                }
                acc(grads, *base, db);
                acc(grads, *rows, dr);
            }
            Op::SliceCols { src, start } => {
                let mut d = Tensor::zeros(self.value(*src).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut d = Tensor::zeros(pv.shape());
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    acc(grads, p, d);
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let mut d = probs.clone();
                for r in 0..probs.rows() {
                    let t = targets.row(r);
                    let mass: f64 = t.iter().sum();
                    let gr = gd[r];
                    for (j, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = gr * (*v * mass - t[j]);
                    }
                }
                let shape = self.value(*logits).shape().to_vec();
                acc(grads, *logits, d.reshape(shape)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, Tensor::filled(&shape, gd[0]));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, g.clone().reshape(shape)?);
            }
        }
        Ok(())
    }
}
