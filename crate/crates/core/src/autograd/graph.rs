//! Tape of tensor operations with reverse-mode differentiation.

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom, cols: Vec<T> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleChannels { x: NodeId, gate: NodeId },
    BatchProduct(NodeId),
    GlobalAvgPool(NodeId),
    WeightedPool { x: NodeId, weights: Vec<T> },
    Broadcast(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Select { x: NodeId, index: usize },
    Bilinear(NodeId),
    SoftmaxChannels(NodeId),
    CrossEntropy { logits: NodeId, target: Vec<usize> },
    WeightedSum(Vec<(NodeId, T)>),
    DotConst { x: NodeId, weights: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph recorded during one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err<V>(msg: impl Into<String>) -> Result<V> {
    Err(Error::Shape(msg.into()))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copy of a node's value as a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.input(v)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).nchw()?;
        let wt = self.value(w);
        let &[co, ci, kh, kw] = wt.shape() else {
            return shape_err(format!("conv weight must be rank 4, got {:?}", wt.shape()));
        };
        if ci != c || kh != geom.kh || kw != geom.kw {
            return shape_err(format!(
                "conv weight {:?} incompatible with input channels {c} and kernel {}x{}",
                wt.shape(),
                geom.kh,
                geom.kw
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return shape_err("conv bias length must equal output channels");
            }
        }
        let Some((oh, ow)) = geom.out_size(h, wd) else {
            return shape_err(format!("input {h}x{wd} too small for conv {geom:?}"));
        };
        let kdim = c * kh * kw;
        let plane = oh * ow;
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); n * kdim * plane] };
        let mut out = vec![T::zero(); n * co * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let col: &[T] = if pointwise {
                    xi
                } else {
                    let dst = &mut cols[i * kdim * plane..(i + 1) * kdim * plane];
                    kernels::im2col(xi, c, h, wd, &geom, dst);
                    dst
                };
                let oi = &mut out[i * co * plane..(i + 1) * co * plane];
                T::gemm(
                    co, kdim, plane, T::one(), wv, kdim as isize, 1, col, plane as isize, 1,
                    T::zero(), oi, plane as isize, 1,
                );
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (row, &bias) in oi.chunks_exact_mut(plane).zip(bv) {
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let value = Tensor::from_vec(&[n, co, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// `x` is `[n, in]`, `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[n, fin], &[fout, win]) = (&xs[..], &ws[..]) else {
            return shape_err(format!("linear expects [n,in] x [out,in], got {xs:?} {ws:?}"));
        };
        if fin != win {
            return shape_err(format!("linear input width {fin} vs weight {win}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return shape_err("linear bias length must equal output width");
            }
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n, fin, fout, T::one(), self.value(x).data(), fin as isize, 1, self.value(w).data(),
            1, fin as isize, T::zero(), &mut out, fout as isize, 1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_vec(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, k), rg)
    }

    /// `out[n,c,h,w] = gate[n,c] * x[n,c,h,w]`.
    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.value(gate).shape() != [n, c] {
            return shape_err(format!(
                "gate {:?} does not match features [{n}, {c}, ..]",
                self.value(gate).shape()
            ));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let s = g[i];
            chunk.iter_mut().for_each(|v| *v = *v * s);
        }
        let rg = self.rg(&[x, gate]);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::ScaleChannels { x, gate }, rg))
    }

    /// Product over the batch axis, broadcast back to every batch row.
    pub fn batch_product(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let &[n, c] = &xs[..] else {
            return shape_err("batch_product expects [n, c]");
        };
        let xv = self.value(x).data();
        let mut prod = vec![T::one(); c];
        for row in xv.chunks_exact(c) {
            prod.iter_mut().zip(row).for_each(|(p, &v)| *p = *p * v);
        }
        let out: Vec<T> = (0..n).flat_map(|_| prod.iter().copied()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c], out)?, Op::BatchProduct(x), rg))
    }

    /// Mean over spatial positions: `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let inv = T::one() / T::of((h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// `out[n,c] = sum_p weights[n,p] * x[n,c,p]` with constant weights of
    /// shape `[n, h*w]`.
    pub fn weighted_pool(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let plane = h * w;
        if weights.len() != n * plane {
            return shape_err("pool weights must be [n, h*w]");
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let wi = &weights[i * plane..(i + 1) * plane];
            for ch in 0..c {
                let p = &xv[(i * c + ch) * plane..][..plane];
                out[i * c + ch] = p.iter().zip(wi).fold(T::zero(), |a, (&v, &k)| a + v * k);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c], out)?, Op::WeightedPool { x, weights }, rg))
    }

    /// Tile a `[n,c]` vector over an `h x w` grid.
    pub fn broadcast(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let &[n, c] = &xs[..] else {
            return shape_err("broadcast expects [n, c]");
        };
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, h * w))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::Broadcast(x), rg))
    }

    /// Concatenate along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return shape_err("concat axis out of range");
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!("concat {s:?} with {first:?} on axis {axis}"));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let inner = v.len() / outer;
                out.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Batch item `index`, keeping a unit leading axis.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.value(x).dim(0) {
            return shape_err("select index out of range");
        }
        let v = self.value(x).select(index);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Select { x, index }, rg))
    }

    /// Bilinear resize with half-pixel centers.
    pub fn bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if oh == 0 || ow == 0 {
            return shape_err("bilinear target must be non-empty");
        }
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let mut out = vec![T::zero(); n * c * oh * ow];
        kernels::bilinear_forward(self.value(x).data(), n * c, (h, w), (oh, ow), &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c, oh, ow], out)?, Op::Bilinear(x), rg))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let out = softmax_channels(self.value(x).data(), n, c, h * w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out)?, Op::SoftmaxChannels(x), rg))
    }

    /// Mean per-pixel cross-entropy of `[n,c,h,w]` logits against class
    /// indices laid out as `[n, h*w]`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: Vec<usize>) -> Result<NodeId> {
        let (n, c, h, w) = self.value(logits).nchw()?;
        let plane = h * w;
        if target.len() != n * plane {
            return shape_err("cross_entropy target must be [n, h*w]");
        }
        if target.iter().any(|&t| t >= c) {
            return Err(Error::InvalidInput("cross_entropy target class out of range".into()));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        for i in 0..n {
            for p in 0..plane {
                let at = |ch: usize| lv[(i * c + ch) * plane + p];
                let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
                let lse = m + (0..c).map(|ch| (at(ch) - m).exp()).fold(T::zero(), |a, v| a + v).ln();
                total += (lse - at(target[i * plane + p])).as_f64();
            }
        }
        let mean = T::of(total / (n * plane) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::from_vec(&[1], vec![mean])?, Op::CrossEntropy { logits, target }, rg))
    }

    /// `sum_i k_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut acc = T::zero();
        for &(id, k) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return shape_err("weighted_sum takes scalar nodes");
            }
            acc += k * v.data()[0];
        }
        let rg = self.rg(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
        Ok(self.push(Tensor::from_vec(&[1], vec![acc])?, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Scalar `sum(x * weights)` for a constant weight tensor.
    pub fn dot_const(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        if self.value(x).shape() != weights.shape() {
            return shape_err("dot_const shape mismatch");
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&v, &k)| a + v * k);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[1], vec![s])?, Op::DotConst { x, weights }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        f(t.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (n, c, h, wd) = self.value(*x).nchw().unwrap();
                let (_, co, oh, ow) = node.value.nchw().unwrap();
                let plane = oh * ow;
                let kdim = c * geom.kh * geom.kw;
                let pointwise = geom.is_pointwise();
                let xv = self.value(*x).data();
                let col_of = |i: usize| -> &[T] {
                    if pointwise {
                        &xv[i * c * h * wd..(i + 1) * c * h * wd]
                    } else {
                        &cols[i * kdim * plane..(i + 1) * kdim * plane]
                    }
                };
                self.accumulate(grads, *w, |dw| {
                    for i in 0..n {
                        let gi = &gd[i * co * plane..(i + 1) * co * plane];
                        T::gemm(
                            co, plane, kdim, T::one(), gi, plane as isize, 1, col_of(i), 1,
                            plane as isize, T::one(), dw, kdim as isize, 1,
                        );
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for (r, row) in gd.chunks_exact(plane).enumerate() {
                            db[r % co] += row.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    });
                }
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |dx| {
                    let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * plane] };
                    for i in 0..n {
                        let gi = &gd[i * co * plane..(i + 1) * co * plane];
                        let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                        if pointwise {
                            T::gemm(
                                kdim, co, plane, T::one(), wv, 1, kdim as isize, gi,
                                plane as isize, 1, T::one(), dxi, plane as isize, 1,
                            );
                        } else {
                            T::gemm(
                                kdim, co, plane, T::one(), wv, 1, kdim as isize, gi,
                                plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1,
                            );
                            kernels::col2im(&dcols, c, h, wd, geom, dxi);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = node.value.dim(1);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *w, |dw| {
                    T::gemm(
                        fout, n, fin, T::one(), gd, 1, fout as isize, xv, fin as isize, 1,
                        T::one(), dw, fin as isize, 1,
                    );
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for row in gd.chunks_exact(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
                self.accumulate(grads, *x, |dx| {
                    T::gemm(
                        n, fout, fin, T::one(), gd, fout as isize, 1, wv, fin as isize, 1,
                        T::one(), dx, fin as isize, 1,
                    );
                });
            }
            Op::Relu(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &o), &gv) in dx.iter_mut().zip(out).zip(gd) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &s), &gv) in dx.iter_mut().zip(out).zip(gd) {
                        *d += gv * s * (T::one() - s);
                    }
                });
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    self.accumulate(grads, *id, |d| {
                        d.iter_mut().zip(gd).for_each(|(d, &v)| *d += v);
                    });
                }
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(gd).for_each(|(d, &v)| *d += v * *k);
                });
            }
            Op::ScaleChannels { x, gate } => {
                let (_, _, h, w) = node.value.nchw().unwrap();
                let plane = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                self.accumulate(grads, *x, |dx| {
                    for (i, (d, gg)) in dx.chunks_exact_mut(plane).zip(gd.chunks_exact(plane)).enumerate() {
                        d.iter_mut().zip(gg).for_each(|(d, &v)| *d += v * gv[i]);
                    }
                });
                self.accumulate(grads, *gate, |dg| {
                    for (i, (xx, gg)) in xv.chunks_exact(plane).zip(gd.chunks_exact(plane)).enumerate() {
                        dg[i] += xx.iter().zip(gg).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    }
                });
            }
            Op::BatchProduct(x) => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for ch in 0..c {
                        let gsum = (0..n).fold(T::zero(), |a, i| a + gd[i * c + ch]);
                        for m in 0..n {
                            let others = (0..n)
                                .filter(|&j| j != m)
                                .fold(T::one(), |a, j| a * xv[j * c + ch]);
                            dx[m * c + ch] += gsum * others;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                let inv = T::one() / T::of((h * w) as f64);
                self.accumulate(grads, *x, |dx| {
                    for (d, &v) in dx.chunks_exact_mut(h * w).zip(gd) {
                        d.iter_mut().for_each(|d| *d += v * inv);
                    }
                });
            }
            Op::WeightedPool { x, weights } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let plane = h * w;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        let wi = &weights[i * plane..(i + 1) * plane];
                        for ch in 0..c {
                            let gv = gd[i * c + ch];
                            let d = &mut dx[(i * c + ch) * plane..][..plane];
                            d.iter_mut().zip(wi).for_each(|(d, &k)| *d += gv * k);
                        }
                    }
                });
            }
            Op::Broadcast(x) => {
                let (_, _, h, w) = node.value.nchw().unwrap();
                self.accumulate(grads, *x, |dx| {
                    for (d, gg) in dx.iter_mut().zip(gd.chunks_exact(h * w)) {
                        *d += gg.iter().fold(T::zero(), |a, &v| a + v);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let total_inner = node.value.len() / outer;
                for &p in parts {
                    let inner = self.value(p).len() / outer;
                    let start = offset;
                    self.accumulate(grads, p, |dp| {
                        for o in 0..outer {
                            let src = &gd[o * total_inner + start..][..inner];
                            dp[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    });
                    offset += inner;
                }
            }
            Op::Select { x, index } => {
                let len = gd.len();
                self.accumulate(grads, *x, |dx| {
                    dx[index * len..(index + 1) * len]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, &v)| *d += v);
                });
            }
            Op::Bilinear(x) => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let (_, _, oh, ow) = node.value.nchw().unwrap();
                self.accumulate(grads, *x, |dx| {
                    kernels::bilinear_backward(gd, n * c, (h, w), (oh, ow), dx);
                });
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = node.value.nchw().unwrap();
                let plane = h * w;
                let s = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        for p in 0..plane {
                            let at = |ch: usize| (i * c + ch) * plane + p;
                            let dot = (0..c).fold(T::zero(), |a, ch| a + gd[at(ch)] * s[at(ch)]);
                            for ch in 0..c {
                                dx[at(ch)] += s[at(ch)] * (gd[at(ch)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let (n, c, h, w) = self.value(*logits).nchw().unwrap();
                let plane = h * w;
                let probs = softmax_channels(self.value(*logits).data(), n, c, plane);
                let k = gd[0] / T::of((n * plane) as f64);
                self.accumulate(grads, *logits, |dx| {
                    for i in 0..n {
                        for p in 0..plane {
                            let t = target[i * plane + p];
                            for ch in 0..c {
                                let at = (i * c + ch) * plane + p;
                                let onehot = if ch == t { T::one() } else { T::zero() };
                                dx[at] += k * (probs[at] - onehot);
                            }
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(id, k) in terms {
                    self.accumulate(grads, id, |d| d[0] += gd[0] * k);
                }
            }
            Op::DotConst { x, weights } => {
                self.accumulate(grads, *x, |dx| {
                    dx.iter_mut().zip(weights.data()).for_each(|(d, &k)| *d += gd[0] * k);
                });
            }
        }
    }
}

/// Numerically stable channel softmax over `[n, c, plane]` data.
pub fn softmax_channels<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (i * c + ch) * plane + p;
            let m = (0..c).map(|ch| x[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[at(ch)] - m).exp();
                out[at(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[at(ch)] = out[at(ch)] / z;
            }
        }
    }
    out
}
