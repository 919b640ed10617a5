//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the reverse sweep is a plain
//! backwards walk. Parameter leaves borrow their storage.

use std::borrow::Cow;

use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

const RMS_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ColSlice { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    AddScaledConst { a: Var, s: Var, idx: usize, c: Matrix<T> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    GatherRows { a: Var, rows: Vec<usize> },
    ScatterAddRows { a: Var, src: Var, rows: Vec<usize> },
    WeightedRowSum { a: Var, w: Vec<T> },
    Pick { a: Var, picks: Vec<(usize, usize, T)> },
    Kl { a: Var, reference: Matrix<T>, w: Vec<T> },
    Huber { a: Var, target: Vec<T>, delta: T },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Matrix<T>>,
    op: Op<T>,
    param: Option<usize>,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu_f<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = k * (T::one() + T::c(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

fn add_into<T: Scalar>(slot: &mut Option<Matrix<T>>, rows: usize, cols: usize) -> &mut Matrix<T> {
    slot.get_or_insert_with(|| Matrix::zeros(rows, cols))
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing `m`; `id` names it in [`Tape::param_grads`].
    pub fn param(&mut self, id: usize, m: &'p Matrix<T>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(m), op: Op::Leaf, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "not a scalar node");
        m.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows, bv.cols);
        matmul_acc(av, bv, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows, bv.rows);
        matmul_bt_acc(av, bv, &mut out);
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast-adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert!(bv.rows == 1 && bv.cols == out.cols, "add_row shape");
        for r in 0..out.rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert!(out.same_shape(bv), "mul shape");
        for (o, &x) in out.data.iter_mut().zip(&bv.data) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = silu_f(*x));
        self.push(out, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu_parts(*x).0);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise `x / rms(x) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        assert!(gv.rows == 1 && gv.cols == xv.cols, "rms_norm gain shape");
        let n = T::from_usize_lossy(xv.cols);
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let ms = xv.row(r).iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (ms + T::c(RMS_EPS)).sqrt();
            inv_rms.push(inv);
            for (o, &g) in out.row_mut(r).iter_mut().zip(&gv.data) {
                *o = *o * inv * g;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(rows.len(), av.cols);
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows { a, rows: rows.to_vec() })
    }

    /// `a` with `src[k]` added to row `rows[k]`.
    pub fn scatter_add_rows(&mut self, a: Var, src: Var, rows: &[usize]) -> Var {
        let mut out = self.value(a).clone();
        let sv = self.value(src);
        assert!(sv.rows == rows.len() && sv.cols == out.cols, "scatter_add_rows shape");
        for (k, &r) in rows.iter().enumerate() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(sv.row(k)) {
                *o += x;
            }
        }
        self.push(out, Op::ScatterAddRows { a, src, rows: rows.to_vec() })
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::ColSlice { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// `a + s[idx] · c` for a constant matrix `c` and a scalar taken from `s`.
    pub fn add_scaled_const(&mut self, a: Var, s: Var, idx: usize, c: Matrix<T>) -> Var {
        let mut out = self.value(a).clone();
        let sv = self.value(s).data[idx];
        assert!(out.same_shape(&c), "add_scaled_const shape");
        for (o, &x) in out.data.iter_mut().zip(&c.data) {
            *o += sv * x;
        }
        self.push(out, Op::AddScaledConst { a, s, idx, c })
    }

    /// Causal row softmax of a square score matrix (row `i` sees columns `0..=i`).
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = &av.row(r)[..=r];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            let orow = out.row_mut(r);
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            orow[..=r].iter_mut().for_each(|o| *o /= total);
        }
        self.push(out, Op::Softmax { a })
    }

    /// Full row softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let orow = out.row_mut(r);
            let mut total = T::zero();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        self.push(out, Op::Softmax { a })
    }

    /// Row-wise log-softmax restricted to `mask` (row-major, same shape); masked
    /// entries are `-inf`. Rows must allow at least one entry.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::filled(av.rows, av.cols, T::neg_infinity());
        for r in 0..av.rows {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[r * av.cols + c]);
            let row = av.row(r);
            let max = (0..av.cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..av.cols).filter(|&c| allowed(c)).map(|c| (row[c] - max).exp()).sum::<T>().ln();
            let orow = out.row_mut(r);
            for c in (0..av.cols).filter(|&c| allowed(c)) {
                orow[c] = row[c] - lse;
            }
        }
        self.push(out, Op::LogSoftmax { a })
    }

    /// `Σ w · a[row, col]` over `picks`, as a `1×1` node.
    pub fn pick(&mut self, a: Var, picks: Vec<(usize, usize, T)>) -> Var {
        let av = self.value(a);
        let s = picks.iter().map(|&(r, c, w)| w * av.at(r, c)).sum();
        self.push(Matrix::scalar(s), Op::Pick { a, picks })
    }

    /// `Σ_r w_r Σ_j p_rj (a_rj − ref_rj)` with `p = exp(a)`, for log-probability rows `a`.
    pub fn kl_rows(&mut self, a: Var, reference: Matrix<T>, w: Vec<T>) -> Var {
        let av = self.value(a);
        assert!(av.same_shape(&reference) && w.len() == av.rows, "kl_rows shape");
        let mut s = T::zero();
        for r in 0..av.rows {
            let mut row_kl = T::zero();
            for (&l, &q) in av.row(r).iter().zip(reference.row(r)) {
                if l.is_finite() {
                    row_kl += l.exp() * (l - q);
                }
            }
            s += w[r] * row_kl;
        }
        self.push(Matrix::scalar(s), Op::Kl { a, reference, w })
    }

    /// `1×d` row `Σ_i w_i a_i`.
    pub fn weighted_row_sum(&mut self, a: Var, w: Vec<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, w.len());
        let mut out = Matrix::zeros(1, av.cols);
        for (r, &wr) in w.iter().enumerate() {
            for (o, &x) in out.data.iter_mut().zip(av.row(r)) {
                *o += wr * x;
            }
        }
        self.push(out, Op::WeightedRowSum { a, w })
    }

    /// Mean Huber loss of the entries of `a` against `target`.
    pub fn huber(&mut self, a: Var, target: Vec<T>, delta: T) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), target.len());
        let n = T::from_usize_lossy(target.len());
        let s = av.data.iter().zip(&target).map(|(&p, &y)| huber_value(p - y, delta)).sum::<T>() / n;
        self.push(Matrix::scalar(s), Op::Huber { a, target, delta })
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Matrix<T>>> {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut g: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_bt_acc(&dy, bv, add_into(&mut g[a.0], av.rows, av.cols));
                    matmul_at_acc(av, &dy, add_into(&mut g[b.0], bv.rows, bv.cols));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_acc(&dy, bv, add_into(&mut g[a.0], av.rows, av.cols));
                    matmul_at_acc(&dy, av, add_into(&mut g[b.0], bv.rows, bv.cols));
                }
                Op::Add(a, b) => {
                    add_into(&mut g[a.0], dy.rows, dy.cols).add_assign(&dy);
                    add_into(&mut g[b.0], dy.rows, dy.cols).add_assign(&dy);
                }
                Op::AddRow(a, b) => {
                    add_into(&mut g[a.0], dy.rows, dy.cols).add_assign(&dy);
                    let gb = add_into(&mut g[b.0], 1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, &x) in gb.data.iter_mut().zip(dy.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = add_into(&mut g[a.0], dy.rows, dy.cols);
                    for ((o, &d), &x) in ga.data.iter_mut().zip(&dy.data).zip(&bv.data) {
                        *o += d * x;
                    }
                    let gb = add_into(&mut g[b.0], dy.rows, dy.cols);
                    for ((o, &d), &x) in gb.data.iter_mut().zip(&dy.data).zip(&av.data) {
                        *o += d * x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = add_into(&mut g[a.0], dy.rows, dy.cols);
                    for (o, &d) in ga.data.iter_mut().zip(&dy.data) {
                        *o += d * *s;
                    }
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let ga = add_into(&mut g[a.0], dy.rows, dy.cols);
                    for ((o, &d), &x) in ga.data.iter_mut().zip(&dy.data).zip(&av.data) {
                        let sig = T::one() / (T::one() + (-x).exp());
                        *o += d * sig * (T::one() + x * (T::one() - sig));
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga = add_into(&mut g[a.0], dy.rows, dy.cols);
                    for ((o, &d), &x) in ga.data.iter_mut().zip(&dy.data).zip(&av.data) {
                        *o += d * gelu_parts(x).1;
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let n = T::from_usize_lossy(xv.cols);
                    let mut gg = vec![T::zero(); xv.cols];
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let inv = inv_rms[r];
                        let (xr, dr) = (xv.row(r), dy.row(r));
                        let mut dot = T::zero();
                        for c in 0..xv.cols {
                            let xhat = xr[c] * inv;
                            gg[c] += dr[c] * xhat;
                            dot += dr[c] * gv.data[c] * xhat;
                        }
                        let mean = dot / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            let xhat = xr[c] * inv;
                            *o = inv * (dr[c] * gv.data[c] - xhat * mean);
                        }
                    }
                    add_into(&mut g[x.0], xv.rows, xv.cols).add_assign(&gx);
                    let ggain = add_into(&mut g[gain.0], 1, xv.cols);
                    for (o, v) in ggain.data.iter_mut().zip(gg) {
                        *o += v;
                    }
                }
                Op::Gather { table, ids } | Op::GatherRows { a: table, rows: ids } => {
                    let tv = self.value(*table);
                    let gt = add_into(&mut g[table.0], tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &d) in gt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::ScatterAddRows { a, src, rows } => {
                    add_into(&mut g[a.0], dy.rows, dy.cols).add_assign(&dy);
                    let gs = add_into(&mut g[src.0], rows.len(), dy.cols);
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &d) in gs.row_mut(k).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::ColSlice { a, start } => {
                    let av = self.value(*a);
                    let ga = add_into(&mut g[a.0], av.rows, av.cols);
                    for r in 0..dy.rows {
                        for (o, &d) in ga.row_mut(r)[*start..*start + dy.cols].iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let gp = add_into(&mut g[p.0], pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            for (o, &d) in gp.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + pv.cols]) {
                                *o += d;
                            }
                        }
                        off += pv.cols;
                    }
                }
                Op::AddScaledConst { a, s, idx, c } => {
                    add_into(&mut g[a.0], dy.rows, dy.cols).add_assign(&dy);
                    let sv = self.value(*s);
                    let ds: T = dy.data.iter().zip(&c.data).map(|(&d, &x)| d * x).sum();
                    add_into(&mut g[s.0], sv.rows, sv.cols).data[*idx] += ds;
                }
                Op::Softmax { a } => {
                    let ga = add_into(&mut g[a.0], dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((o, &p), &d) in ga.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o += p * (d - dot);
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    let ga = add_into(&mut g[a.0], dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let total: T = yr.iter().zip(dr).filter(|(l, _)| l.is_finite()).map(|(_, &d)| d).sum();
                        for ((o, &l), &d) in ga.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            if l.is_finite() {
                                *o += d - l.exp() * total;
                            }
                        }
                    }
                }
                Op::Pick { a, picks } => {
                    let av = self.value(*a);
                    let ga = add_into(&mut g[a.0], av.rows, av.cols);
                    let d = dy.data[0];
                    for &(r, c, w) in picks {
                        ga.data[r * av.cols + c] += d * w;
                    }
                }
                Op::Kl { a, reference, w } => {
                    let av = self.value(*a);
                    let ga = add_into(&mut g[a.0], av.rows, av.cols);
                    let d = dy.data[0];
                    for r in 0..av.rows {
                        for ((o, &l), &q) in ga.row_mut(r).iter_mut().zip(av.row(r)).zip(reference.row(r)) {
                            if l.is_finite() {
                                *o += d * w[r] * l.exp() * (l - q + T::one());
                            }
                        }
                    }
                }
                Op::WeightedRowSum { a, w } => {
                    let av = self.value(*a);
                    let ga = add_into(&mut g[a.0], av.rows, av.cols);
                    for (r, &wr) in w.iter().enumerate() {
                        for (o, &d) in ga.row_mut(r).iter_mut().zip(&dy.data) {
                            *o += wr * d;
                        }
                    }
                }
                Op::Huber { a, target, delta } => {
                    let av = self.value(*a);
                    let n = T::from_usize_lossy(target.len());
                    let ga = add_into(&mut g[a.0], av.rows, av.cols);
                    let d = dy.data[0];
                    for ((o, &p), &t) in ga.data.iter_mut().zip(&av.data).zip(target) {
                        let e = p - t;
                        *o += d * e.max(-*delta).min(*delta) / n;
                    }
                }
            }
            g[i] = Some(dy);
        }
        g
    }

    /// `(param id, gradient)` for parameter leaves that received a gradient.
    /// A parameter used by several leaves has its gradients summed.
    pub fn param_grads(&self, grads: Vec<Option<Matrix<T>>>) -> Vec<(usize, Matrix<T>)> {
        let mut out: Vec<(usize, Matrix<T>)> = Vec::new();
        for (node, gr) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(gr)) = (node.param, gr) {
                match out.iter_mut().find(|(k, _)| *k == id) {
                    Some((_, acc)) => acc.add_assign(&gr),
                    None => out.push((id, gr)),
                }
            }
        }
        out
    }
}

/// `e²/2` inside `|e| ≤ δ`, `δ(|e| − δ/2)` outside.
pub fn huber_value<T: Scalar>(e: T, delta: T) -> T {
    let a = e.abs();
    if a <= delta {
        T::c(0.5) * e * e
    } else {
        delta * (a - T::c(0.5) * delta)
    }
}
