//! Tape-based reverse-mode differentiation over [`Tensor2`].
//!
//! Every operation appends a node holding its forward value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse, accumulating vector-Jacobian
//! products. Batched feature matrices are stacked along rows: a batch of `B` samples on
//! an `N`-point mesh is a `(B*N) x d` matrix, sample `b` owning rows `b*N..(b+1)*N`.

use std::sync::Arc;

use crate::error::{shape_err, PitError, Result};
use crate::geometry::Neighborhoods;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor2};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Norm used by [`Tape::relative_error`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScalarMul {
        s: Var,
        m: Var,
    },
    Gelu(Var),
    Square(Var),
    Tan(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    AttendShared {
        w: Var,
        v: Var,
        batch: usize,
    },
    AttendBatched {
        w: Var,
        v: Var,
        batch: usize,
    },
    PositionAttend {
        lambda: Var,
        v: Var,
        nb: Arc<Neighborhoods>,
        weights: Vec<f64>,
        batch: usize,
    },
    Scores {
        q: Var,
        k: Var,
        batch: usize,
        scale: f64,
    },
    AddTiled {
        stacked: Var,
        shared: Var,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    RelError {
        pred: Var,
        target: Tensor2,
        batch: usize,
        norm: Norm,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }
}

#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

/// Row-wise stabilized softmax. Entries whose mask bit is `false` are treated as
/// `-inf` logits and get weight exactly zero.
pub fn softmax_rows_masked(x: &Tensor2, mask: Option<&[bool]>) -> Result<Tensor2> {
    let (rows, cols) = x.shape();
    if let Some(m) = mask {
        if m.len() != rows * cols {
            return Err(shape_err("softmax", "mask does not match logits"));
        }
    }
    let mut out = Tensor2::zeros(rows, cols);
    for i in 0..rows {
        let xr = x.row(i);
        let keep = |j: usize| mask.is_none_or(|m| m[i * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(PitError::EmptyReceptiveField(i));
        }
        let orow = out.row_mut(i);
        let mut total = 0.0;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out.check_finite("softmax")
}

pub fn softmax_rows(x: &Tensor2) -> Result<Tensor2> {
    softmax_rows_masked(x, None)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor2, op: Op, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        Ok(self.push(value, op))
    }

    /// A constant: receives gradients but is not tied to any parameter.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter to the tape. Binding the same parameter twice returns the same
    /// node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push_checked(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push_checked(out, Op::Sub(a, b), "sub")
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} for input {:?}", bv.shape(), av.shape()),
            ));
        }
        let mut out = av.clone();
        let b = bv.row(0);
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(b) {
                *o += x;
            }
        }
        self.push_checked(out, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push_checked(out, Op::Scale(a, s), "scale")
    }

    /// `s * m` for a `1 x 1` node `s`.
    pub fn scalar_mul(&mut self, s: Var, m: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(m).scale(sv);
        self.push_checked(out, Op::ScalarMul { s, m }, "scalar_mul")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        self.push_checked(out, Op::Gelu(a), "gelu")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push_checked(out, Op::Square(a), "square")
    }

    pub fn tan(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tan);
        self.push_checked(out, Op::Tan(a), "tan")
    }

    /// Elementwise clamp; the gradient is passed through only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_checked(out, Op::Clamp { x: a, lo, hi }, "clamp")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn softmax_rows_masked(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let out = softmax_rows_masked(self.value(a), Some(&mask))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor2::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Applies one `nq x ns` weight matrix to every sample block of `v`
    /// (`(batch*ns) x d`), giving `(batch*nq) x d`.
    pub fn attend_shared(&mut self, w: Var, v: Var, batch: usize) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let (nq, ns) = wv.shape();
        if batch == 0 || vv.rows() != batch * ns {
            return Err(shape_err(
                "attend_shared",
                format!("weights {nq}x{ns}, values {:?}, batch {batch}", vv.shape()),
            ));
        }
        let d = vv.cols();
        let mut out = Tensor2::zeros(batch * nq, d);
        for b in 0..batch {
            gemm_nn(
                wv.data(),
                &vv.data()[b * ns * d..(b + 1) * ns * d],
                &mut out.data_mut()[b * nq * d..(b + 1) * nq * d],
                nq,
                ns,
                d,
            );
        }
        self.push_checked(out, Op::AttendShared { w, v, batch }, "attend_shared")
    }

    /// Per-sample weights: `w` is `(batch*nq) x ns`, block `b` multiplies block `b` of `v`.
    pub fn attend_batched(&mut self, w: Var, v: Var, batch: usize) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let ns = wv.cols();
        if batch == 0 || wv.rows() % batch != 0 || vv.rows() != batch * ns {
            return Err(shape_err(
                "attend_batched",
                format!("weights {:?}, values {:?}, batch {batch}", wv.shape(), vv.shape()),
            ));
        }
        let nq = wv.rows() / batch;
        let d = vv.cols();
        let mut out = Tensor2::zeros(batch * nq, d);
        for b in 0..batch {
            gemm_nn(
                &wv.data()[b * nq * ns..(b + 1) * nq * ns],
                &vv.data()[b * ns * d..(b + 1) * ns * d],
                &mut out.data_mut()[b * nq * d..(b + 1) * nq * d],
                nq,
                ns,
                d,
            );
        }
        self.push_checked(out, Op::AttendBatched { w, v, batch }, "attend_batched")
    }

    /// Fused `Softmax(-λ D) V` over a sparse pattern, shared by every sample block of
    /// `v` (`(batch*ns) x d`). Only the stored entries of `nb` are touched, so a local
    /// layer costs time proportional to its receptive fields.
    pub fn position_attend(&mut self, lambda: Var, nb: Arc<Neighborhoods>, v: Var, batch: usize) -> Result<Var> {
        let (lv, vv) = (self.value(lambda), self.value(v));
        let (nq, ns) = (nb.rows(), nb.source_len());
        if lv.len() != 1 || batch == 0 || vv.rows() != batch * ns {
            return Err(shape_err(
                "position_attend",
                format!(
                    "lambda {:?}, values {:?}, pattern {nq}x{ns}, batch {batch}",
                    lv.shape(),
                    vv.shape()
                ),
            ));
        }
        let lam = lv.data()[0];
        let (cols, dist) = (nb.cols(), nb.dist());
        let mut weights = vec![0.0; nb.nnz()];
        for i in 0..nq {
            let r = nb.range(i);
            if r.is_empty() {
                return Err(PitError::EmptyReceptiveField(i));
            }
            // λ ≥ 0, so the nearest entry carries the largest logit.
            let dmin = dist[r.clone()].iter().copied().fold(f64::INFINITY, f64::min);
            let mut total = 0.0;
            for k in r.clone() {
                let e = (-lam * (dist[k] - dmin)).exp();
                weights[k] = e;
                total += e;
            }
            for w in &mut weights[r] {
                *w /= total;
            }
        }
        let d = vv.cols();
        let mut out = Tensor2::zeros(batch * nq, d);
        for b in 0..batch {
            let vb = &vv.data()[b * ns * d..(b + 1) * ns * d];
            let ob = &mut out.data_mut()[b * nq * d..(b + 1) * nq * d];
            for i in 0..nq {
                let orow = &mut ob[i * d..(i + 1) * d];
                for k in nb.range(i) {
                    let w = weights[k];
                    for (o, &x) in orow.iter_mut().zip(&vb[cols[k] * d..(cols[k] + 1) * d]) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push_checked(
            out,
            Op::PositionAttend {
                lambda,
                v,
                nb,
                weights,
                batch,
            },
            "position_attend",
        )
    }

    /// Per-sample `scale * q_b k_b^T`, stacked into `(batch*nq) x ns`.
    pub fn scores(&mut self, q: Var, k: Var, batch: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if batch == 0 || qv.rows() % batch != 0 || kv.rows() % batch != 0 || qv.cols() != kv.cols() {
            return Err(shape_err(
                "scores",
                format!("q {:?}, k {:?}, batch {batch}", qv.shape(), kv.shape()),
            ));
        }
        let (nq, ns, d) = (qv.rows() / batch, kv.rows() / batch, qv.cols());
        let mut out = Tensor2::zeros(batch * nq, ns);
        for b in 0..batch {
            gemm_nt(
                &qv.data()[b * nq * d..(b + 1) * nq * d],
                &kv.data()[b * ns * d..(b + 1) * ns * d],
                &mut out.data_mut()[b * nq * ns..(b + 1) * nq * ns],
                nq,
                d,
                ns,
            );
        }
        for x in out.data_mut() {
            *x *= scale;
        }
        self.push_checked(out, Op::Scores { q, k, batch, scale }, "scores")
    }

    /// Adds an `nq x ns` matrix to every `nq`-row block of `stacked`.
    pub fn add_tiled(&mut self, stacked: Var, shared: Var) -> Result<Var> {
        let (sv, hv) = (self.value(stacked), self.value(shared));
        if hv.rows() == 0 || sv.cols() != hv.cols() || sv.rows() % hv.rows() != 0 {
            return Err(shape_err(
                "add_tiled",
                format!("stacked {:?}, shared {:?}", sv.shape(), hv.shape()),
            ));
        }
        let block = hv.len();
        let mut out = sv.clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, &h) in chunk.iter_mut().zip(hv.data()) {
                *o += h;
            }
        }
        self.push_checked(out, Op::AddTiled { stacked, shared }, "add_tiled")
    }

    /// Output row `r` is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} out of range for {} rows", xv.rows()),
            ));
        }
        let out = xv.select_rows(&idx);
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor2::scalar(self.value(a).sum());
        self.push_checked(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let out = Tensor2::scalar(v.sum() / v.len() as f64);
        self.push_checked(out, Op::Mean(a), "mean")
    }

    /// Per-sample relative error `||pred_b - target_b|| / ||target_b||` as a `batch x 1`
    /// column. Sample `b` owns rows `b*n..(b+1)*n` of both matrices.
    pub fn relative_error(&mut self, pred: Var, target: &Tensor2, batch: usize, norm: Norm) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || batch == 0 || !pv.rows().is_multiple_of(batch) {
            return Err(shape_err(
                "relative_error",
                format!("pred {:?}, target {:?}, batch {batch}", pv.shape(), target.shape()),
            ));
        }
        let per = pv.len() / batch;
        let mut out = Tensor2::zeros(batch, 1);
        for b in 0..batch {
            let p = &pv.data()[b * per..(b + 1) * per];
            let t = &target.data()[b * per..(b + 1) * per];
            let (num, den) = norm_pair(p, t, norm);
            if den == 0.0 {
                return Err(PitError::ZeroNormTarget(b));
            }
            out.set(b, 0, num / den);
        }
        self.push_checked(
            out,
            Op::RelError {
                pred,
                target: target.clone(),
                batch,
                norm,
            },
            "relative_error",
        )
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {}x{}", shape.0, shape.1),
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the gradient of every bound parameter into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for &(id, v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                let p = store.get_mut(id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor2::zeros(m, k);
                gemm_nt(g.data(), bv.data(), ga.data_mut(), m, n, k);
                acc(grads, *a, ga);
                let mut gb = Tensor2::zeros(k, n);
                gemm_tn(av.data(), g.data(), gb.data_mut(), m, k, n);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                let mut gb = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *bias, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::ScalarMul { s, m } => {
                let sv = self.value(*s).data()[0];
                let mv = self.value(*m);
                let gs: f64 = g.data().iter().zip(mv.data()).map(|(x, y)| x * y).sum();
                acc(grads, *s, Tensor2::scalar(gs));
                acc(grads, *m, g.scale(sv));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = g.zip_with(x, "gelu", |gi, xi| gi * gelu_grad(xi)).unwrap();
                acc(grads, *a, ga);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(grads, *a, g.zip_with(x, "square", |gi, xi| 2.0 * gi * xi).unwrap());
            }
            Op::Tan(a) => {
                let ga = g.zip_with(out, "tan", |gi, t| gi * (1.0 + t * t)).unwrap();
                acc(grads, *a, ga);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let ga = g
                    .zip_with(xv, "clamp", |gi, xi| if xi > *lo && xi < *hi { gi } else { 0.0 })
                    .unwrap();
                acc(grads, *x, ga);
            }
            Op::Softmax(x) => {
                // dx = y * (g - <g, y>_row); masked entries have y = 0.
                let mut gx = Tensor2::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let gp = Tensor2::from_fn(g.rows(), c, |r, j| g.get(r, off + j));
                    acc(grads, p, gp);
                    off += c;
                }
            }
            Op::AttendShared { w, v, batch } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let (nq, ns) = wv.shape();
                let d = vv.cols();
                let mut gw = Tensor2::zeros(nq, ns);
                let mut gv = Tensor2::zeros(vv.rows(), d);
                for b in 0..*batch {
                    let gb = &g.data()[b * nq * d..(b + 1) * nq * d];
                    let vb = &vv.data()[b * ns * d..(b + 1) * ns * d];
                    gemm_nt(gb, vb, gw.data_mut(), nq, d, ns);
                    gemm_tn(
                        wv.data(),
                        gb,
                        &mut gv.data_mut()[b * ns * d..(b + 1) * ns * d],
                        nq,
                        ns,
                        d,
                    );
                }
                acc(grads, *w, gw);
                acc(grads, *v, gv);
            }
            Op::AttendBatched { w, v, batch } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let ns = wv.cols();
                let nq = wv.rows() / batch;
                let d = vv.cols();
                let mut gw = Tensor2::zeros(wv.rows(), ns);
                let mut gv = Tensor2::zeros(vv.rows(), d);
                for b in 0..*batch {
                    let gb = &g.data()[b * nq * d..(b + 1) * nq * d];
                    let vb = &vv.data()[b * ns * d..(b + 1) * ns * d];
                    let wb = &wv.data()[b * nq * ns..(b + 1) * nq * ns];
                    gemm_nt(gb, vb, &mut gw.data_mut()[b * nq * ns..(b + 1) * nq * ns], nq, d, ns);
                    gemm_tn(wb, gb, &mut gv.data_mut()[b * ns * d..(b + 1) * ns * d], nq, ns, d);
                }
                acc(grads, *w, gw);
                acc(grads, *v, gv);
            }
            Op::PositionAttend {
                lambda,
                v,
                nb,
                weights,
                batch,
            } => {
                let vv = self.value(*v);
                let (nq, ns, d) = (nb.rows(), nb.source_len(), vv.cols());
                let (cols, dist) = (nb.cols(), nb.dist());
                let mut gv = Tensor2::zeros(vv.rows(), d);
                let mut glam = 0.0;
                let mut s = Vec::new();
                for i in 0..nq {
                    let r = nb.range(i);
                    // s_k = dL/dW_ik summed over samples.
                    s.clear();
                    s.resize(r.len(), 0.0);
                    for b in 0..*batch {
                        let grow = g.row(b * nq + i);
                        for (sk, k) in s.iter_mut().zip(r.clone()) {
                            let row = (b * ns + cols[k]) * d;
                            let vrow = &vv.data()[row..row + d];
                            *sk += grow.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>();
                            let w = weights[k];
                            for (o, &x) in gv.data_mut()[row..row + d].iter_mut().zip(grow) {
                                *o += w * x;
                            }
                        }
                    }
                    // Softmax backward onto the logits -λ d_k, then onto λ.
                    let mean: f64 = s.iter().zip(r.clone()).map(|(sk, k)| weights[k] * sk).sum();
                    glam -= s
                        .iter()
                        .zip(r)
                        .map(|(sk, k)| weights[k] * (sk - mean) * dist[k])
                        .sum::<f64>();
                }
                acc(grads, *lambda, Tensor2::scalar(glam));
                acc(grads, *v, gv);
            }
            Op::Scores { q, k, batch, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (nq, ns, d) = (qv.rows() / batch, kv.rows() / batch, qv.cols());
                let gs = g.scale(*scale);
                let mut gq = Tensor2::zeros(qv.rows(), d);
                let mut gk = Tensor2::zeros(kv.rows(), d);
                for b in 0..*batch {
                    let gb = &gs.data()[b * nq * ns..(b + 1) * nq * ns];
                    gemm_nn(
                        gb,
                        &kv.data()[b * ns * d..(b + 1) * ns * d],
                        &mut gq.data_mut()[b * nq * d..(b + 1) * nq * d],
                        nq,
                        ns,
                        d,
                    );
                    gemm_tn(
                        gb,
                        &qv.data()[b * nq * d..(b + 1) * nq * d],
                        &mut gk.data_mut()[b * ns * d..(b + 1) * ns * d],
                        nq,
                        ns,
                        d,
                    );
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
            }
            Op::AddTiled { stacked, shared } => {
                let hv = self.value(*shared);
                let mut gh = Tensor2::zeros(hv.rows(), hv.cols());
                for chunk in g.data().chunks(hv.len()) {
                    for (o, &x) in gh.data_mut().iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                acc(grads, *stacked, g.clone());
                acc(grads, *shared, gh);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Tensor2::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Tensor2::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::RelError {
                pred,
                target,
                batch,
                norm,
            } => {
                let pv = self.value(*pred);
                let per = pv.len() / batch;
                let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                for b in 0..*batch {
                    let p = &pv.data()[b * per..(b + 1) * per];
                    let t = &target.data()[b * per..(b + 1) * per];
                    let (num, den) = norm_pair(p, t, *norm);
                    let gb = g.data()[b];
                    let dst = &mut gp.data_mut()[b * per..(b + 1) * per];
                    for ((o, &pi), &ti) in dst.iter_mut().zip(p).zip(t) {
                        let diff = pi - ti;
                        *o = match norm {
                            Norm::L1 => gb * diff.signum() * f64::from(diff != 0.0) / den,
                            Norm::L2 if num > 0.0 => gb * diff / (num * den),
                            Norm::L2 => 0.0,
                        };
                    }
                }
                acc(grads, *pred, gp);
            }
        }
    }
}

fn norm_pair(p: &[f64], t: &[f64], norm: Norm) -> (f64, f64) {
    match norm {
        Norm::L1 => (
            p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum(),
            t.iter().map(|x| x.abs()).sum(),
        ),
        Norm::L2 => (
            p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            t.iter().map(|x| x * x).sum::<f64>().sqrt(),
        ),
    }
}

fn acc(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
