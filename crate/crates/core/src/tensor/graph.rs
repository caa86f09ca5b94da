//! Tape-based reverse-mode autodiff over rank-4 tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass: ops append nodes to an
//! arena, every op only references earlier nodes, so creation order is a
//! topological order and `backward` is a single reverse sweep. Tensors are
//! immutable once written; gradients live in a parallel array and are
//! scattered into the [`ParamStore`] at the end of the sweep, where they
//! accumulate until the next optimizer step clears them.

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{conv_out_dim, Shape4, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in the graph.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub usize);

/// Address of one anchor's vector inside a head output `(n, ratios*cols, h, w)`:
/// the channel block `ratio*cols..(ratio+1)*cols` at spatial cell `(row, col)`
/// of image `image`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowRef {
    pub image: usize,
    pub ratio: usize,
    pub row: usize,
    pub col: usize,
}

enum Op<F: Scalar> {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    DeconvS2 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    L2NormScale {
        x: NodeId,
        scale: NodeId,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<RowRef>,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        mask: Vec<bool>,
    },
    SmoothL1 {
        pred: NodeId,
        target: Vec<F>,
        mask: Vec<bool>,
    },
    MulConst {
        x: NodeId,
        k: F,
    },
    SumAll {
        x: NodeId,
    },
}

impl<F: Scalar> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::DeconvS2 { .. } => "transposed_conv2d_s2",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::L2NormScale { .. } => "l2_normalize_scale",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::MulConst { .. } => "mul_const",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    label: Option<String>,
}

/// Epsilon guarding the zero vector in `l2_normalize_scale`.
pub const L2_NORM_EPS: f64 = 1e-10;

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            label: None,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape4 {
        self.nodes[id.0].value.shape
    }

    /// Gradient of a node after `backward`; `None` if nothing flowed here.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    /// Attaches a diagnostic name used by non-finite reporting.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// Name of the first node (in creation order) holding a non-finite
    /// value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                Some(match &n.label {
                    Some(l) => l.clone(),
                    None => format!("{}#{}", n.op.name(), i),
                })
            }
        })
    }

    // ---- leaf nodes ----

    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Leases a parameter's current values into the graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        let p = store.get(id);
        let value = Tensor {
            shape: p.shape4(),
            values: p.values.clone(),
        };
        self.push(Op::Param(id), value)
    }

    // ---- differentiable ops ----

    /// 2-D convolution with square padding. Weight node must hold a
    /// `(co, ci, kh, kw)` kernel; bias a `(co)` vector.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.c != ws.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: format!("input {xs}"),
                rhs: format!("kernel {ws}"),
            });
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: format!("input {xs} (pad {pad})"),
                rhs: format!("kernel {ws}"),
            });
        }
        let geom = ConvGeom::new(xs.c, ws.n, ws.h, ws.w, xs.h, xs.w, stride, pad);
        let out_shape = Shape4::new(
            xs.n,
            ws.n,
            conv_out_dim(xs.h, ws.h, stride, pad),
            conv_out_dim(xs.w, ws.w, stride, pad),
        );
        let mut out = Tensor::zeros(out_shape);
        conv::conv_forward(
            &geom,
            xs,
            &self.nodes[x.0].value.values,
            &self.nodes[w.0].value.values,
            &self.nodes[b.0].value.values,
            &mut out.values,
        );
        Ok(self.push(Op::Conv2d { x, w, b, geom }, out))
    }

    /// Transposed convolution, fixed 4x4 kernel / stride 2 / padding 1:
    /// doubles the spatial extent. Weight node holds `(ci, co, 4, 4)`.
    pub fn transposed_conv2d_s2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.c != ws.n {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv2d_s2",
                lhs: format!("input {xs}"),
                rhs: format!("kernel {ws}"),
            });
        }
        if ws.h != 4 || ws.w != 4 {
            return Err(Error::invalid(format!(
                "transposed_conv2d_s2: kernel must be 4x4, got {ws}"
            )));
        }
        let geom = conv::deconv_geom(xs.c, ws.c, xs.h, xs.w);
        let out_shape = Shape4::new(xs.n, ws.c, 2 * xs.h, 2 * xs.w);
        let mut out = Tensor::zeros(out_shape);
        conv::deconv_forward(
            &geom,
            xs.n,
            &self.nodes[x.0].value.values,
            &self.nodes[w.0].value.values,
            &self.nodes[b.0].value.values,
            &mut out.values,
        );
        Ok(self.push(Op::DeconvS2 { x, w, b, geom }, out))
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "elementwise_add",
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        let mut out = Tensor::zeros(sa);
        for (o, (x, y)) in out.values.iter_mut().zip(
            self.nodes[a.0]
                .value
                .values
                .iter()
                .zip(&self.nodes[b.0].value.values),
        ) {
            *o = *x + *y;
        }
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// Element-wise product (test and diagnostics helper).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "elementwise_mul",
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        let mut out = Tensor::zeros(sa);
        for (o, (x, y)) in out.values.iter_mut().zip(
            self.nodes[a.0]
                .value
                .values
                .iter()
                .zip(&self.nodes[b.0].value.values),
        ) {
            *o = *x * *y;
        }
        Ok(self.push(Op::Mul { a, b }, out))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in &mut out.values {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        self.push(Op::Relu { x }, out)
    }

    /// Rescales each channel vector to a learned norm: at every spatial
    /// location, `y = scale ⊙ x / (||x||₂ + 1e-10)` across the channel axis.
    /// `scale` is a per-channel parameter node shaped `(1, c, 1, 1)`.
    pub fn l2_normalize_scale(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let ss = self.shape(scale);
        if ss.c != xs.c || ss.n != 1 || ss.h != 1 || ss.w != 1 {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize_scale",
                lhs: format!("input {xs}"),
                rhs: format!("scale {ss}"),
            });
        }
        let eps = F::from_f64(L2_NORM_EPS);
        let mut out = Tensor::zeros(xs);
        let plane = xs.h * xs.w;
        let xv = &self.nodes[x.0].value.values;
        let sv = &self.nodes[scale.0].value.values;
        for n in 0..xs.n {
            for cell in 0..plane {
                let mut sq = F::zero();
                for c in 0..xs.c {
                    let v = xv[(n * xs.c + c) * plane + cell];
                    sq += v * v;
                }
                let r = sq.sqrt() + eps;
                for c in 0..xs.c {
                    let i = (n * xs.c + c) * plane + cell;
                    out.values[i] = sv[c] * xv[i] / r;
                }
            }
        }
        Ok(self.push(Op::L2NormScale { x, scale }, out))
    }

    /// Extracts per-anchor row vectors from a head output: row `r` of the
    /// result is the `cols`-long channel block of anchor `rows[r]`. Output
    /// shape `(rows, cols, 1, 1)`.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<RowRef>, cols: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.c % cols != 0 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: format!("input {xs}"),
                rhs: format!("{cols} columns"),
            });
        }
        let ratios = xs.c / cols;
        let mut out = Tensor::zeros(Shape4::rows(rows.len(), cols));
        for (r, rf) in rows.iter().enumerate() {
            if rf.image >= xs.n || rf.ratio >= ratios || rf.row >= xs.h || rf.col >= xs.w {
                return Err(Error::invalid(format!(
                    "gather_rows: row {rf:?} outside {xs} with {ratios} ratios"
                )));
            }
            for c in 0..cols {
                out.values[r * cols + c] =
                    self.nodes[x.0]
                        .value
                        .at(rf.image, rf.ratio * cols + c, rf.row, rf.col);
            }
        }
        Ok(self.push(Op::GatherRows { x, rows, cols }, out))
    }

    /// Stacks row matrices `(r_i, c, 1, 1)` along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let cols = self.shape(parts[0]).c;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.c != cols || s.h != 1 || s.w != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: Shape4::rows(0, cols).to_string(),
                    rhs: s.to_string(),
                });
            }
            total += s.n;
        }
        let mut out = Tensor::zeros(Shape4::rows(total, cols));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value.values;
            out.values[at..at + v.len()].copy_from_slice(v);
            at += v.len();
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Summed softmax cross-entropy over the unmasked rows of a
    /// `(rows, classes, 1, 1)` logit matrix. Masked-out rows contribute
    /// zero loss and zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let s = self.shape(logits);
        let (rows, classes) = (s.n, s.c);
        if s.h != 1 || s.w != 1 || labels.len() != rows || mask.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s.to_string(),
                rhs: format!("{} labels / {} mask", labels.len(), mask.len()),
            });
        }
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes,
                });
            }
        }
        let v = &self.nodes[logits.0].value.values;
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &v[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row {
                sum += (*x - max).exp();
            }
            total += sum.ln() + max - row[labels[r]];
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(total),
        ))
    }

    /// Summed smooth-L1 (Huber) loss over the unmasked rows of a
    /// `(rows, cols, 1, 1)` prediction matrix against constant targets:
    /// per element `0.5 d²` if `|d| < 1` else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, pred: NodeId, target: &[F], mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(pred);
        if s.h != 1 || s.w != 1 || target.len() != s.n * s.c || mask.len() != s.n {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1",
                lhs: s.to_string(),
                rhs: format!("{} targets / {} mask", target.len(), mask.len()),
            });
        }
        let v = &self.nodes[pred.0].value.values;
        let half = F::from_f64(0.5);
        let mut total = F::zero();
        for r in 0..s.n {
            if !mask[r] {
                continue;
            }
            for c in 0..s.c {
                let d = v[r * s.c + c] - target[r * s.c + c];
                let a = d.abs();
                total += if a < F::one() { half * d * d } else { a - half };
            }
        }
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(total),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn mul_const(&mut self, x: NodeId, k: F) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in &mut out.values {
            *v *= k;
        }
        self.push(Op::MulConst { x, k }, out)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = F::zero();
        for v in &self.nodes[x.0].value.values {
            s += *v;
        }
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Populates node gradients and
    /// accumulates parameter gradients into `store`. A graph can run
    /// backward once; build a fresh graph per forward pass.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore<F>) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.shape(loss).count() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got {}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            // Take the grad out to appease the borrow checker; node values
            // stay immutable throughout.
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g, store);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut Vec<F> {
        grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn propagate(&mut self, i: usize, g: &[F], store: &mut ParamStore<F>) {
        // Split borrows: values read-only, grads mutable.
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        match &nodes[i].op {
            Op::Input => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                for (pg, ng) in p.grad.iter_mut().zip(g) {
                    *pg += *ng;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = nodes[x.0].value.shape;
                {
                    let dx = Self::ensure_grad(grads, *x, nodes[x.0].value.values.len());
                    conv::conv_backward_data(geom, xs.n, g, &nodes[w.0].value.values, dx);
                }
                let mut dw = std::mem::take(Self::ensure_grad(
                    grads,
                    *w,
                    nodes[w.0].value.values.len(),
                ));
                let mut db = std::mem::take(Self::ensure_grad(
                    grads,
                    *b,
                    nodes[b.0].value.values.len(),
                ));
                conv::conv_backward_filter(geom, xs.n, &nodes[x.0].value.values, g, &mut dw, &mut db);
                grads[w.0] = Some(dw);
                grads[b.0] = Some(db);
            }
            Op::DeconvS2 { x, w, b, geom } => {
                let n = nodes[x.0].value.shape.n;
                {
                    let dx = Self::ensure_grad(grads, *x, nodes[x.0].value.values.len());
                    conv::deconv_backward_data(geom, n, g, &nodes[w.0].value.values, dx);
                }
                let mut dw = std::mem::take(Self::ensure_grad(
                    grads,
                    *w,
                    nodes[w.0].value.values.len(),
                ));
                let mut db = std::mem::take(Self::ensure_grad(
                    grads,
                    *b,
                    nodes[b.0].value.values.len(),
                ));
                conv::deconv_backward_filter(
                    geom,
                    n,
                    &nodes[x.0].value.values,
                    g,
                    &mut dw,
                    &mut db,
                );
                grads[w.0] = Some(dw);
                grads[b.0] = Some(db);
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    let d = Self::ensure_grad(grads, *id, g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += *gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                {
                    let da = Self::ensure_grad(grads, a, g.len());
                    for ((dv, gv), bv) in da.iter_mut().zip(g).zip(&nodes[b.0].value.values) {
                        *dv += *gv * *bv;
                    }
                }
                let db = Self::ensure_grad(grads, b, g.len());
                for ((dv, gv), av) in db.iter_mut().zip(g).zip(&nodes[a.0].value.values) {
                    *dv += *gv * *av;
                }
            }
            Op::Relu { x } => {
                let dx = Self::ensure_grad(grads, *x, g.len());
                for ((dv, gv), xv) in dx.iter_mut().zip(g).zip(&nodes[x.0].value.values) {
                    if *xv > F::zero() {
                        *dv += *gv;
                    }
                }
            }
            Op::L2NormScale { x, scale } => {
                let xs = nodes[x.0].value.shape;
                let plane = xs.h * xs.w;
                let eps = F::from_f64(L2_NORM_EPS);
                let xv = &nodes[x.0].value.values;
                let sv = &nodes[scale.0].value.values;
                let (x, scale) = (*x, *scale);
                let mut dx = std::mem::take(Self::ensure_grad(grads, x, xv.len()));
                let mut ds = std::mem::take(Self::ensure_grad(grads, scale, sv.len()));
                for n in 0..xs.n {
                    for cell in 0..plane {
                        let mut sq = F::zero();
                        for c in 0..xs.c {
                            let v = xv[(n * xs.c + c) * plane + cell];
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        let r = norm + eps;
                        // dot = sum_c g_c * s_c * x_c
                        let mut dot = F::zero();
                        for c in 0..xs.c {
                            let i = (n * xs.c + c) * plane + cell;
                            dot += g[i] * sv[c] * xv[i];
                        }
                        for c in 0..xs.c {
                            let i = (n * xs.c + c) * plane + cell;
                            ds[c] += g[i] * xv[i] / r;
                            let mut d = g[i] * sv[c] / r;
                            if norm > F::zero() {
                                d -= dot * xv[i] / (r * r * norm);
                            }
                            dx[i] += d;
                        }
                    }
                }
                grads[x.0] = Some(dx);
                grads[scale.0] = Some(ds);
            }
            Op::GatherRows { x, rows, cols } => {
                let xs = nodes[x.0].value.shape;
                let dx = Self::ensure_grad(grads, *x, nodes[x.0].value.values.len());
                for (r, rf) in rows.iter().enumerate() {
                    for c in 0..*cols {
                        dx[xs.at(rf.image, rf.ratio * cols + c, rf.row, rf.col)] +=
                            g[r * cols + c];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let len = nodes[p.0].value.values.len();
                    let d = Self::ensure_grad(grads, p, len);
                    for (dv, gv) in d.iter_mut().zip(&g[at..at + len]) {
                        *dv += *gv;
                    }
                    at += len;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                mask,
            } => {
                let s = nodes[logits.0].value.shape;
                let classes = s.c;
                let v = &nodes[logits.0].value.values;
                let up = g[0];
                let dl = Self::ensure_grad(grads, *logits, v.len());
                for r in 0..s.n {
                    if !mask[r] {
                        continue;
                    }
                    let row = &v[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for x in row {
                        sum += (*x - max).exp();
                    }
                    for c in 0..classes {
                        let p = (row[c] - max).exp() / sum;
                        let onehot = if c == labels[r] { F::one() } else { F::zero() };
                        dl[r * classes + c] += up * (p - onehot);
                    }
                }
            }
            Op::SmoothL1 { pred, target, mask } => {
                let s = nodes[pred.0].value.shape;
                let v = &nodes[pred.0].value.values;
                let up = g[0];
                let dp = Self::ensure_grad(grads, *pred, v.len());
                for r in 0..s.n {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..s.c {
                        let i = r * s.c + c;
                        let d = v[i] - target[i];
                        let slope = if d.abs() < F::one() {
                            d
                        } else if d > F::zero() {
                            F::one()
                        } else {
                            -F::one()
                        };
                        dp[i] += up * slope;
                    }
                }
            }
            Op::MulConst { x, k } => {
                let k = *k;
                let dx = Self::ensure_grad(grads, *x, g.len());
                for (dv, gv) in dx.iter_mut().zip(g) {
                    *dv += *gv * k;
                }
            }
            Op::SumAll { x } => {
                let up = g[0];
                let dx = Self::ensure_grad(grads, *x, nodes[x.0].value.values.len());
                for dv in dx.iter_mut() {
                    *dv += up;
                }
            }
        }
    }
}
