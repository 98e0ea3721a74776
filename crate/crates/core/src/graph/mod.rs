//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Every node is a 2-D matrix. Sequences are packed along rows and the
//! structured ops (convolution windows, attention, kinematics) take explicit
//! segment plans so that one tape can carry a whole batch.

mod plan;

use std::collections::HashMap;
use std::rc::Rc;

pub use plan::{AttnPlan, AttnSegment, GatherPlan, KinematicsPlan, Padding, Segment, ZERO_ROW};

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Silu(Var),
    Exp(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { x: Var, plan: Rc<GatherPlan> },
    Attention { q: Var, k: Var, v: Var, plan: Rc<AttnPlan>, probs: Vec<Vec<T>> },
    Kinematics { x: Var, plan: Rc<KinematicsPlan>, yaw: Vec<T> },
    RowCosine { a: Var, b: Var, eps: T },
    NormalizeRows { x: Var, eps: T },
    SegmentMean { x: Var, segments: Rc<Vec<Segment>> },
    Mean(Var),
    Sum(Var),
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. Build a forward pass with the op methods, then call
/// [`Graph::backward`] on a `1 x 1` loss node.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Matrix<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Matrix::zeros(0, 0))
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.needs(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Broadcast-multiply every row of `a` by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).rows(), 1, "mul_row expects a single row");
        assert_eq!(self.value(row).cols(), self.value(a).cols(), "mul_row width");
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *x *= b;
            }
        }
        let ng = self.needs(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Multiply by a `1 x 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let ng = self.needs(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let ng = self.needs(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::lit(cols as f64);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let ng = self.needs(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat_cols rows");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather(&mut self, x: Var, plan: Rc<GatherPlan>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), plan.in_rows, "gather plan built for another row count");
        let cols = xv.cols();
        let mut out = Matrix::zeros(plan.out_rows, plan.taps * cols);
        for r in 0..plan.out_rows {
            let dst = out.row_mut(r);
            for t in 0..plan.taps {
                let idx = plan.index[r * plan.taps + t];
                if idx != ZERO_ROW {
                    dst[t * cols..(t + 1) * cols].copy_from_slice(xv.row(idx as usize));
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Gather { x, plan }, ng)
    }

    /// Scaled dot-product attention, block-diagonal over the plan's segments,
    /// with heads split along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Rc<AttnPlan>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert_eq!(kv.cols(), width, "attention key width");
        assert_eq!(vv.cols(), width, "attention value width");
        assert_eq!(width % plan.heads, 0, "width not divisible by heads");
        let hd = width / plan.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), width);
        let mut probs = Vec::with_capacity(plan.segments.len() * plan.heads);
        for seg in &plan.segments {
            let nk = seg.keys.len();
            for h in 0..plan.heads {
                let cols = h * hd..(h + 1) * hd;
                let mut p = vec![T::zero(); seg.queries.len() * nk];
                for (qi, qr) in seg.queries.clone().enumerate() {
                    let qrow = &qv.row(qr)[cols.clone()];
                    let prow = &mut p[qi * nk..(qi + 1) * nk];
                    let mut max = T::neg_infinity();
                    for (ki, kr) in seg.keys.clone().enumerate() {
                        if seg.key_mask.as_ref().is_some_and(|m| !m[ki]) {
                            continue;
                        }
                        let krow = &kv.row(kr)[cols.clone()];
                        let s = dot(qrow, krow) * scale;
                        prow[ki] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for (ki, pv) in prow.iter_mut().enumerate() {
                        if seg.key_mask.as_ref().is_some_and(|m| !m[ki]) {
                            *pv = T::zero();
                        } else {
                            *pv = (*pv - max).exp();
                            total += *pv;
                        }
                    }
                    for pv in prow.iter_mut() {
                        *pv /= total;
                    }
                    let orow = &mut out.row_mut(qr)[cols.clone()];
                    for (ki, kr) in seg.keys.clone().enumerate() {
                        let w = prow[ki];
                        if w == T::zero() {
                            continue;
                        }
                        for (o, &x) in orow.iter_mut().zip(&vv.row(kr)[cols.clone()]) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.needs(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, plan, probs }, ng)
    }

    /// Root-velocity representation rows to joint positions (`3 * joints` columns).
    pub fn kinematics(&mut self, x: Var, plan: Rc<KinematicsPlan>) -> Var {
        let xv = self.value(x);
        let joints = plan.joints;
        assert_eq!(xv.cols(), 4 + 3 * (joints - 1), "representation width");
        let inv_fps = T::lit(1.0 / plan.fps);
        let mut out = Matrix::zeros(xv.rows(), 3 * joints);
        let mut yaw = vec![T::zero(); xv.rows()];
        for seg in &plan.segments {
            let (mut theta, mut rx, mut rz) = (T::zero(), T::zero(), T::zero());
            for n in seg.range() {
                let row = xv.row(n);
                yaw[n] = theta;
                let (s, c) = theta.sin_cos();
                let h = row[3];
                let o = out.row_mut(n);
                o[0] = rx;
                o[1] = h;
                o[2] = rz;
                for j in 1..joints {
                    let l = &row[4 + 3 * (j - 1)..4 + 3 * j];
                    o[3 * j] = l[0] * c + l[2] * s + rx;
                    o[3 * j + 1] = l[1] + h;
                    o[3 * j + 2] = -l[0] * s + l[2] * c + rz;
                }
                rx += (row[1] * c + row[2] * s) * inv_fps;
                rz += (-row[1] * s + row[2] * c) * inv_fps;
                theta += row[0] * inv_fps;
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Kinematics { x, plan, yaw }, ng)
    }

    /// Per-row cosine similarity (`rows x 1`), norms clamped below by `eps`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: T) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_cosine shapes");
        let out = Matrix::from_fn(av.rows(), 1, |r, _| {
            let (ra, rb) = (av.row(r), bv.row(r));
            dot(ra, rb) / (norm(ra).max(eps) * norm(rb).max(eps))
        });
        let ng = self.needs(&[a, b]);
        self.push(out, Op::RowCosine { a, b, eps }, ng)
    }

    /// Scale every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let n = norm(xv.row(r)).max(eps);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::NormalizeRows { x, eps }, ng)
    }

    /// Mean over the rows of each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: Rc<Vec<Segment>>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(segments.len(), xv.cols());
        for (i, seg) in segments.iter().enumerate() {
            let inv = T::one() / T::lit(seg.len.max(1) as f64);
            let dst = out.row_mut(i);
            for r in seg.range() {
                for (o, &v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::SegmentMean { x, segments }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).mean());
        let ng = self.needs(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = T::zero();
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            loss += log_z - row[targets[r]];
        }
        let out = Matrix::scalar(loss / T::lit(lv.rows() as f64));
        let ng = self.needs(&[logits]);
        self.push(out, Op::SoftmaxXent { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Matrix<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.nodes[a.0].needs_grad {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, &m) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= m;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[row.0].needs_grad {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.map(|x| x * sv));
                }
                if self.nodes[s.0].needs_grad {
                    let d = g.zip_map(self.value(*a), |x, y| x * y).sum();
                    self.accumulate(grads, *s, Matrix::scalar(d));
                }
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gy, x| {
                    let sg = sigmoid(x);
                    gy * sg * (T::one() + x * (T::one() - sg))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gy, y| gy * y)),
            Op::LayerNorm { x, rstd } => {
                let (rows, cols) = out.shape();
                let n = T::lit(cols as f64);
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (gy, y) = (g.row(r), out.row(r));
                    let mean_g = gy.iter().copied().sum::<T>() / n;
                    let mean_gy = dot(gy, y) / n;
                    for ((d, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *d = rstd[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::Gather { x, plan } => {
                let cols = self.value(*x).cols();
                let mut gx = Matrix::zeros(plan.in_rows, cols);
                for r in 0..plan.out_rows {
                    let src = g.row(r);
                    for t in 0..plan.taps {
                        let idx = plan.index[r * plan.taps + t];
                        if idx != ZERO_ROW {
                            for (d, &s) in gx.row_mut(idx as usize).iter_mut().zip(&src[t * cols..(t + 1) * cols]) {
                                *d += s;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, plan, probs } => {
                self.attention_backward(*q, *k, *v, plan, probs, g, grads);
            }
            Op::Kinematics { x, plan, yaw } => {
                let gx = kinematics_backward(self.value(*x), plan, yaw, g);
                self.accumulate(grads, *x, gx);
            }
            Op::RowCosine { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for r in 0..av.rows() {
                    let (ra, rb) = (av.row(r), bv.row(r));
                    let (na, nb) = (norm(ra), norm(rb));
                    let (ca, cb) = (na.max(*eps), nb.max(*eps));
                    let cos = out.get(r, 0);
                    let gy = g.get(r, 0);
                    let denom = ca * cb;
                    for i in 0..ra.len() {
                        let mut da = rb[i] / denom;
                        if na > *eps {
                            da -= cos * ra[i] / (ca * ca);
                        }
                        let mut db = ra[i] / denom;
                        if nb > *eps {
                            db -= cos * rb[i] / (cb * cb);
                        }
                        ga.row_mut(r)[i] = gy * da;
                        gb.row_mut(r)[i] = gy * db;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::NormalizeRows { x, eps } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = norm(xv.row(r));
                    let (gy, y) = (g.row(r), out.row(r));
                    if n > *eps {
                        let proj = dot(gy, y);
                        for ((d, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gy).zip(y) {
                            *d = (gv - yv * proj) / n;
                        }
                    } else {
                        for (d, &gv) in gx.row_mut(r).iter_mut().zip(gy) {
                            *d = gv / *eps;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentMean { x, segments } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, seg) in segments.iter().enumerate() {
                    let inv = T::one() / T::lit(seg.len.max(1) as f64);
                    for r in seg.range() {
                        for (d, &s) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.item() / T::lit(xv.len() as f64);
                self.accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), s));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let s = g.item() / T::lit(targets.len() as f64);
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= T::one();
                    for x in row.iter_mut() {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        plan: &AttnPlan,
        probs: &[Vec<T>],
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        let hd = width / plan.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut gq = Matrix::zeros(qv.rows(), width);
        let mut gk = Matrix::zeros(kv.rows(), width);
        let mut gv = Matrix::zeros(vv.rows(), width);
        let mut idx = 0;
        for seg in &plan.segments {
            let nk = seg.keys.len();
            for h in 0..plan.heads {
                let cols = h * hd..(h + 1) * hd;
                let p = &probs[idx];
                idx += 1;
                let mut dp = vec![T::zero(); nk];
                for (qi, qr) in seg.queries.clone().enumerate() {
                    let prow = &p[qi * nk..(qi + 1) * nk];
                    let grow = &g.row(qr)[cols.clone()];
                    for (ki, kr) in seg.keys.clone().enumerate() {
                        dp[ki] = dot(grow, &vv.row(kr)[cols.clone()]);
                        let w = prow[ki];
                        if w != T::zero() {
                            for (d, &x) in gv.row_mut(kr)[cols.clone()].iter_mut().zip(grow) {
                                *d += w * x;
                            }
                        }
                    }
                    let inner = dot(&dp, prow);
                    let qrow = &qv.row(qr)[cols.clone()];
                    for (ki, kr) in seg.keys.clone().enumerate() {
                        let ds = prow[ki] * (dp[ki] - inner) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = &kv.row(kr)[cols.clone()];
                        for (d, &x) in gq.row_mut(qr)[cols.clone()].iter_mut().zip(krow) {
                            *d += ds * x;
                        }
                        for (d, &x) in gk.row_mut(kr)[cols.clone()].iter_mut().zip(qrow) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

fn kinematics_backward<T: Scalar>(
    x: &Matrix<T>,
    plan: &KinematicsPlan,
    yaw: &[T],
    g: &Matrix<T>,
) -> Matrix<T> {
    let joints = plan.joints;
    let inv_fps = T::lit(1.0 / plan.fps);
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    for seg in &plan.segments {
        let len = seg.len;
        if len == 0 {
            continue;
        }
        // Per-frame gradient on root planar position and on yaw.
        let mut g_root = vec![(T::zero(), T::zero()); len];
        let mut g_yaw = vec![T::zero(); len];
        for i in 0..len {
            let n = seg.start + i;
            let (s, c) = yaw[n].sin_cos();
            let gr = g.row(n);
            let row = x.row(n);
            let (mut sx, mut sz, mut sh) = (gr[0], gr[2], gr[1]);
            let grow = gx.row_mut(n);
            for j in 1..joints {
                let (gxj, gyj, gzj) = (gr[3 * j], gr[3 * j + 1], gr[3 * j + 2]);
                sx += gxj;
                sz += gzj;
                sh += gyj;
                let base = 4 + 3 * (j - 1);
                let (lx, lz) = (row[base], row[base + 2]);
                grow[base] = c * gxj - s * gzj;
                grow[base + 1] = gyj;
                grow[base + 2] = s * gxj + c * gzj;
                g_yaw[i] += gxj * (-lx * s + lz * c) + gzj * (-lx * c - lz * s);
            }
            grow[3] = sh;
            g_root[i] = (sx, sz);
        }
        // suffix[k] = sum of root gradients over frames strictly after k.
        let (mut ax, mut az) = (T::zero(), T::zero());
        let mut yaw_suffix = T::zero();
        for i in (0..len).rev() {
            let n = seg.start + i;
            let (s, c) = yaw[n].sin_cos();
            let row = x.row(n);
            let (vx, vz) = (row[1], row[2]);
            // Step i moves root frames i+1.. ; (ax, az) holds their summed gradient.
            let grow = gx.row_mut(n);
            grow[1] = (c * ax - s * az) * inv_fps;
            grow[2] = (s * ax + c * az) * inv_fps;
            let d_yaw_step = (ax * (-vx * s + vz * c) + az * (-vx * c - vz * s)) * inv_fps;
            let total_yaw = g_yaw[i] + d_yaw_step;
            // omega_i moves yaw of frames i+1..
            grow[0] = yaw_suffix * inv_fps;
            yaw_suffix += total_yaw;
            ax += g_root[i].0;
            az += g_root[i].1;
        }
    }
    gx
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}
