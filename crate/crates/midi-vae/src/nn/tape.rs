//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! The tape records exactly the operations this model family needs:
//! batched matrix products, bias adds, pointwise nonlinearities, column
//! concat/slice, fused softmax cross-entropy, squared error, the
//! closed-form diagonal-Gaussian KL term and scalar reductions. Values
//! are row-major `[batch, dim]` matrices; a fixed evaluation order makes
//! every forward and backward pass bitwise reproducible.

use super::scalar::Scalar;
use super::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

enum Op<S: Scalar> {
    Param { store_index: usize },
    Constant,
    MatMul { x: NodeId, w: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    AddN { terms: Vec<NodeId> },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Exp { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, lo: usize },
    MulConst { x: NodeId, factor: Tensor<S> },
    SoftmaxXent { logits: NodeId, targets: Vec<usize>, probs: Tensor<S> },
    SquaredDiffConst { x: NodeId, target: Tensor<S> },
    GaussianKl { mu: NodeId, logvar: NodeId },
    MeanAll { x: NodeId },
    WeightedSum { terms: Vec<(NodeId, S)> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

/// Gradients of a scalar tape output with respect to bound parameters,
/// indexed by parameter-store position.
pub struct Grads<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, store_index: usize) -> Option<&Tensor<S>> {
        self.slots.get(store_index).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Leaf holding a snapshot of a parameter; gradients accumulate back
    /// to `store_index`.
    pub fn param(&mut self, store_index: usize, value: Tensor<S>) -> NodeId {
        self.push(value, true, Op::Param { store_index })
    }

    /// Leaf input; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, false, Op::Constant)
    }

    /// `[B,I] x [I,O] -> [B,O]`
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        let (b, i) = (xv.rows(), xv.cols());
        let (wi, o) = (wv.rows(), wv.cols());
        assert_eq!(i, wi, "matmul inner dimension mismatch: {} vs {}", i, wi);
        let mut out = Tensor::zeros(vec![b, o]);
        for r in 0..b {
            let xrow = xv.row(r);
            let orow = out.row_mut(r);
            for (k, &xk) in xrow.iter().enumerate() {
                let wrow = wv.row(k);
                for (oc, &wv_) in orow.iter_mut().zip(wrow.iter()) {
                    *oc += xk * wv_;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(out, needs, Op::MatMul { x, w })
    }

    /// `[B,O] + [O]` with the bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[b].value);
        assert_eq!(xv.cols(), bv.len(), "bias length mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data().iter()) {
                *o += bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(out, needs, Op::AddBias { x, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = zip_map(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let out = map(&self.nodes[x].value, |v| v * c);
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale { x, c })
    }

    /// Elementwise sum of same-shape nodes.
    pub fn add_n(&mut self, terms: Vec<NodeId>) -> NodeId {
        assert!(!terms.is_empty());
        let mut out = self.nodes[terms[0]].value.clone();
        for &t in &terms[1..] {
            for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[t].value.data()) {
                *o += v;
            }
        }
        let needs = terms.iter().any(|&t| self.needs(t));
        self.push(out, needs, Op::AddN { terms })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = map(&self.nodes[x].value, |v| v.tanh());
        let needs = self.needs(x);
        self.push(out, needs, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = map(&self.nodes[x].value, |v| v.sigmoid());
        let needs = self.needs(x);
        self.push(out, needs, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = map(&self.nodes[x].value, |v| v.exp());
        let needs = self.needs(x);
        self.push(out, needs, Op::Exp { x })
    }

    pub fn activate(&mut self, x: NodeId, act: Activation) -> NodeId {
        match act {
            Activation::Linear => x,
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    /// Concatenate along columns; all parts share a row count.
    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        for r in 0..rows {
            let mut at = 0;
            for &p in &parts {
                let pv = &self.nodes[p].value;
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                let w = pv.cols();
                out.row_mut(r)[at..at + w].copy_from_slice(pv.row(r));
                at += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, needs, Op::ConcatCols { parts })
    }

    /// Columns `lo..hi` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(lo < hi && hi <= xv.cols(), "slice out of range");
        let rows = xv.rows();
        let mut out = Tensor::zeros(vec![rows, hi - lo]);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[lo..hi]);
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::SliceCols { x, lo })
    }

    /// Elementwise product with a fixed tensor (e.g. frozen noise draws).
    pub fn mul_const(&mut self, x: NodeId, factor: Tensor<S>) -> NodeId {
        let out = zip_map(&self.nodes[x].value, &factor, |a, b| a * b);
        let needs = self.needs(x);
        self.push(out, needs, Op::MulConst { x, factor })
    }

    /// Fused per-row softmax + cross entropy against integer class
    /// targets. Output is `[B,1]` of `-ln p[target]` with the probability
    /// clamped at 1e-12.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits].value;
        let (b, c) = (lv.rows(), lv.cols());
        assert_eq!(b, targets.len(), "one target per row required");
        let mut probs = Tensor::zeros(vec![b, c]);
        let mut losses = Tensor::zeros(vec![b, 1]);
        let floor = S::from_f64(1e-12);
        for r in 0..b {
            assert!(targets[r] < c, "target class out of range");
            let row = lv.row(r);
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut denom = S::ZERO;
            let prow = probs.row_mut(r);
            for (p, &v) in prow.iter_mut().zip(row.iter()) {
                let e = (v - mx).exp();
                *p = e;
                denom += e;
            }
            for p in prow.iter_mut() {
                *p = *p / denom;
            }
            let pt = prow[targets[r]].maximum(floor);
            losses.row_mut(r)[0] = -pt.ln();
        }
        let needs = self.needs(logits);
        self.push(
            losses,
            needs,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
        )
    }

    /// `(x - target)^2` elementwise against a fixed target.
    pub fn squared_diff_const(&mut self, x: NodeId, target: Tensor<S>) -> NodeId {
        let out = zip_map(&self.nodes[x].value, &target, |a, b| (a - b) * (a - b));
        let needs = self.needs(x);
        self.push(out, needs, Op::SquaredDiffConst { x, target })
    }

    /// Per-row `KL(N(mu, diag(exp(logvar))) || N(0, I))`, output `[B,1]`:
    /// `0.5 * sum_d (mu^2 + exp(lv) - lv - 1)`.
    pub fn gaussian_kl(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let (mv, lv) = (&self.nodes[mu].value, &self.nodes[logvar].value);
        assert_eq!(mv.shape(), lv.shape(), "kl shape mismatch");
        let b = mv.rows();
        let half = S::from_f64(0.5);
        let mut out = Tensor::zeros(vec![b, 1]);
        for r in 0..b {
            let mut acc = S::ZERO;
            for (&m, &l) in mv.row(r).iter().zip(lv.row(r).iter()) {
                acc += m * m + l.exp() - l - S::ONE;
            }
            out.row_mut(r)[0] = half * acc;
        }
        let needs = self.needs(mu) || self.needs(logvar);
        self.push(out, needs, Op::GaussianKl { mu, logvar })
    }

    /// Mean over every entry, producing a `[1,1]` scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let n = S::from_f64(xv.len() as f64);
        let mut acc = S::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc / n), needs, Op::MeanAll { x })
    }

    /// Weighted sum of scalar nodes, producing the total-loss scalar.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, S)>) -> NodeId {
        let mut acc = S::ZERO;
        for &(id, c) in &terms {
            acc += self.scalar_value(id) * c;
        }
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        self.push(Tensor::scalar(acc), needs, Op::WeightedSum { terms })
    }

    /// Convenience: `activation(x . w + b)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Activation) -> NodeId {
        let y = self.matmul(x, w);
        let y = self.add_bias(y, b);
        self.activate(y, act)
    }

    /// Reverse sweep from a scalar node; returns per-parameter gradients.
    pub fn backward(&self, root: NodeId, store_len: usize) -> Grads<S> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(S::ONE));
        let mut out = Grads {
            slots: vec![None; store_len],
        };

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Param { store_index } => {
                    accumulate_opt(&mut out.slots[*store_index], &g);
                }
                Op::Constant => {}
                Op::MatMul { x, w } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    if self.needs(*x) {
                        let mut gx = Tensor::zeros(vec![xv.rows(), xv.cols()]);
                        for r in 0..xv.rows() {
                            let grow = g.row(r);
                            for i in 0..xv.cols() {
                                let wrow = wv.row(i);
                                let mut acc = S::ZERO;
                                for (&gv, &wv_) in grow.iter().zip(wrow.iter()) {
                                    acc += gv * wv_;
                                }
                                gx.row_mut(r)[i] = acc;
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let mut gw = Tensor::zeros(vec![wv.rows(), wv.cols()]);
                        for r in 0..xv.rows() {
                            let xrow = xv.row(r);
                            let grow = g.row(r);
                            for (i, &xk) in xrow.iter().enumerate() {
                                let out_row = gw.row_mut(i);
                                for (o, &gv) in out_row.iter_mut().zip(grow.iter()) {
                                    *o += xk * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, gw);
                    }
                }
                Op::AddBias { x, b } => {
                    if self.needs(*b) {
                        let cols = g.cols();
                        let mut gb = Tensor::zeros(vec![cols]);
                        for r in 0..g.rows() {
                            for (o, &gv) in gb.data_mut().iter_mut().zip(g.row(r).iter()) {
                                *o += gv;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, map(&g, |v| -v));
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let ga = zip_map(&g, &self.nodes[*b].value, |gv, bv| gv * bv);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = zip_map(&g, &self.nodes[*a].value, |gv, av| gv * av);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, map(&g, |v| v * *c));
                    }
                }
                Op::AddN { terms } => {
                    for &t in terms {
                        if self.needs(t) {
                            accumulate(&mut grads, t, g.clone());
                        }
                    }
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[id].value;
                    let gx = zip_map(&g, y, |gv, yv| gv * (S::ONE - yv * yv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    let gx = zip_map(&g, y, |gv, yv| gv * yv * (S::ONE - yv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp { x } => {
                    let y = &self.nodes[id].value;
                    let gx = zip_map(&g, y, |gv, yv| gv * yv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        if self.needs(p) {
                            let rows = g.rows();
                            let mut gp = Tensor::zeros(vec![rows, w]);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        at += w;
                    }
                }
                Op::SliceCols { x, lo } => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor::zeros(vec![xv.rows(), xv.cols()]);
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*lo..*lo + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MulConst { x, factor } => {
                    let gx = zip_map(&g, factor, |gv, f| gv * f);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    if self.needs(*logits) {
                        let mut gl = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            let gr = g.row(r)[0];
                            let row = gl.row_mut(r);
                            row[t] -= S::ONE;
                            for v in row.iter_mut() {
                                *v *= gr;
                            }
                        }
                        accumulate(&mut grads, *logits, gl);
                    }
                }
                Op::SquaredDiffConst { x, target } => {
                    let two = S::from_f64(2.0);
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor::zeros(vec![xv.rows(), xv.cols()]);
                    for ((o, (&xi, &ti)), &gv) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(xv.data().iter().zip(target.data().iter()))
                        .zip(g.data().iter())
                    {
                        *o = two * (xi - ti) * gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GaussianKl { mu, logvar } => {
                    let half = S::from_f64(0.5);
                    let (mv, lv) = (&self.nodes[*mu].value, &self.nodes[*logvar].value);
                    if self.needs(*mu) {
                        let mut gm = Tensor::zeros(vec![mv.rows(), mv.cols()]);
                        for r in 0..mv.rows() {
                            let gr = g.row(r)[0];
                            for (o, &m) in gm.row_mut(r).iter_mut().zip(mv.row(r).iter()) {
                                *o = m * gr;
                            }
                        }
                        accumulate(&mut grads, *mu, gm);
                    }
                    if self.needs(*logvar) {
                        let mut glv = Tensor::zeros(vec![lv.rows(), lv.cols()]);
                        for r in 0..lv.rows() {
                            let gr = g.row(r)[0];
                            for (o, &l) in glv.row_mut(r).iter_mut().zip(lv.row(r).iter()) {
                                *o = half * (l.exp() - S::ONE) * gr;
                            }
                        }
                        accumulate(&mut grads, *logvar, glv);
                    }
                }
                Op::MeanAll { x } => {
                    let xv = &self.nodes[*x].value;
                    let c = g.data()[0] / S::from_f64(xv.len() as f64);
                    let gx = Tensor::new(xv.shape().to_vec(), vec![c; xv.len()]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedSum { terms } => {
                    let gr = g.data()[0];
                    for &(t, c) in terms {
                        if self.needs(t) {
                            accumulate(&mut grads, t, Tensor::scalar(gr * c));
                        }
                    }
                }
            }
        }
        out
    }
}

fn map<S: Scalar>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
    match &mut grads[id] {
        Some(existing) => {
            for (o, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *o += v;
            }
        }
        slot => *slot = Some(g),
    }
}

fn accumulate_opt<S: Scalar>(slot: &mut Option<Tensor<S>>, g: &Tensor<S>) {
    match slot {
        Some(existing) => {
            for (o, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *o += v;
            }
        }
        none => *none = Some(g.clone()),
    }
}
