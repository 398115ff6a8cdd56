//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are computed eagerly; each operation records a backward closure
//! that scatters its output gradient into its parents. A tape lives for one
//! forward/backward cycle (one training step builds a fresh tape).

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn FnOnce(&mut [Node<S>], &Tensor<S>, &Tensor<S>)>;

pub(crate) struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Tensor<S>,
    needs_grad: bool,
    back: Option<BackFn<S>>,
}

/// Borrow one node's value and another's gradient simultaneously.
/// When both handles point at the same node the two fields split cleanly.
fn value_grad_mut<S: Scalar>(
    nodes: &mut [Node<S>],
    value_of: usize,
    grad_of: usize,
) -> (&[S], &mut [S]) {
    if value_of == grad_of {
        let n = &mut nodes[grad_of];
        (n.value.data(), n.grad.data_mut())
    } else if value_of < grad_of {
        let (a, b) = nodes.split_at_mut(grad_of);
        (a[value_of].value.data(), b[0].grad.data_mut())
    } else {
        let (a, b) = nodes.split_at_mut(value_of);
        (b[0].value.data(), a[grad_of].grad.data_mut())
    }
}

fn grad_mut<S: Scalar>(nodes: &mut [Node<S>], v: usize) -> &mut [S] {
    nodes[v].grad.data_mut()
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameters bind through this).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, true, None)
    }

    /// Non-differentiable input (data, targets, frozen parameters).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_node(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> &Tensor<S> {
        assert!(self.ran_backward, "grad() before backward()");
        &self.nodes[v.0].grad
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_node(&mut self, value: Tensor<S>, needs_grad: bool, back: Option<BackFn<S>>) -> Var {
        let grad = Tensor::zeros(value.dims());
        self.nodes.push(Node {
            value,
            grad,
            needs_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Push an op result. `back` only runs when some parent needs gradient.
    fn push_op(&mut self, value: Tensor<S>, needs_grad: bool, back: BackFn<S>) -> Var {
        if needs_grad {
            self.push_node(value, true, Some(back))
        } else {
            self.push_node(value, false, None)
        }
    }

    /// Reverse sweep from a scalar loss node. Consumes the backward
    /// closures, so it can only run once per tape.
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.ran_backward, "backward() ran twice on one tape");
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward target must be a single value, got shape {:?}",
            self.nodes[loss.0].value.dims()
        );
        self.ran_backward = true;
        self.nodes[loss.0].grad.data_mut()[0] = S::one();
        for i in (0..=loss.0).rev() {
            if self.nodes[i].back.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let back = node.back.take().expect("checked above");
            back(head, &node.value, &node.grad);
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims(), vb.dims(), "add: shape mismatch {:?} vs {:?}", va.dims(), vb.dims());
        let out = Tensor::from_vec(
            va.dims(),
            va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect(),
        );
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            na || nb,
            Box::new(move |nodes, _v, g| {
                if na {
                    for (dst, gi) in grad_mut(nodes, a.0).iter_mut().zip(g.data()) {
                        *dst += *gi;
                    }
                }
                if nb {
                    for (dst, gi) in grad_mut(nodes, b.0).iter_mut().zip(g.data()) {
                        *dst += *gi;
                    }
                }
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims(), vb.dims(), "sub: shape mismatch {:?} vs {:?}", va.dims(), vb.dims());
        let out = Tensor::from_vec(
            va.dims(),
            va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect(),
        );
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            na || nb,
            Box::new(move |nodes, _v, g| {
                if na {
                    for (dst, gi) in grad_mut(nodes, a.0).iter_mut().zip(g.data()) {
                        *dst += *gi;
                    }
                }
                if nb {
                    for (dst, gi) in grad_mut(nodes, b.0).iter_mut().zip(g.data()) {
                        *dst -= *gi;
                    }
                }
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims(), vb.dims(), "mul: shape mismatch {:?} vs {:?}", va.dims(), vb.dims());
        let out = Tensor::from_vec(
            va.dims(),
            va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect(),
        );
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            na || nb,
            Box::new(move |nodes, _v, g| {
                if na {
                    let (vb, ga) = value_grad_mut(nodes, b.0, a.0);
                    for ((dst, gi), y) in ga.iter_mut().zip(g.data()).zip(vb) {
                        *dst += *gi * *y;
                    }
                }
                if nb {
                    let (va, gb) = value_grad_mut(nodes, a.0, b.0);
                    for ((dst, gi), x) in gb.iter_mut().zip(g.data()).zip(va) {
                        *dst += *gi * *x;
                    }
                }
            }),
        )
    }

    /// y = mul·x + add, elementwise with scalar coefficients.
    pub fn affine_scalar(&mut self, a: Var, mul: S, add: S) -> Var {
        let out = self.value(a).map(|x| mul * x + add);
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, _v, g| {
                for (dst, gi) in grad_mut(nodes, a.0).iter_mut().zip(g.data()) {
                    *dst += mul * *gi;
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.affine_scalar(a, c, S::zero())
    }

    /// Elementwise sum of same-shaped vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n: empty input");
        let dims = self.value(vars[0]).dims().to_vec();
        let mut data = vec![S::zero(); self.value(vars[0]).len()];
        for &v in vars {
            assert_eq!(self.value(v).dims(), &dims[..], "add_n: shape mismatch");
            for (dst, x) in data.iter_mut().zip(self.value(v).data()) {
                *dst += *x;
            }
        }
        let needs: Vec<bool> = vars.iter().map(|&v| self.needs_grad(v)).collect();
        let idxs: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let any = needs.iter().any(|&b| b);
        self.push_op(
            Tensor::from_vec(&dims, data),
            any,
            Box::new(move |nodes, _v, g| {
                for (&pi, &n) in idxs.iter().zip(&needs) {
                    if n {
                        for (dst, gi) in grad_mut(nodes, pi).iter_mut().zip(g.data()) {
                            *dst += *gi;
                        }
                    }
                }
            }),
        )
    }

    // ---- linear algebra ----

    /// y = W·x for W: (m,n), x: (n).
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (vw, vx) = (self.value(w), self.value(x));
        assert_eq!(vw.rank(), 2, "matvec: W must be rank 2");
        assert_eq!(
            vw.dims()[1],
            vx.len(),
            "matvec: W cols {} vs x len {}",
            vw.dims()[1],
            vx.len()
        );
        let (m, n) = (vw.dims()[0], vw.dims()[1]);
        let mut out = vec![S::zero(); m];
        for i in 0..m {
            let row = vw.row(i);
            let mut acc = S::zero();
            for (wij, xj) in row.iter().zip(vx.data()) {
                acc += *wij * *xj;
            }
            out[i] = acc;
        }
        let (nw, nx) = (self.needs_grad(w), self.needs_grad(x));
        self.push_op(
            Tensor::from_vec(&[m], out),
            nw || nx,
            Box::new(move |nodes, _v, g| {
                if nw {
                    let (vx, gw) = value_grad_mut(nodes, x.0, w.0);
                    for i in 0..m {
                        let gi = g.data()[i];
                        let grow = &mut gw[i * n..(i + 1) * n];
                        for (dst, xj) in grow.iter_mut().zip(vx) {
                            *dst += gi * *xj;
                        }
                    }
                }
                if nx {
                    let (vw, gx) = value_grad_mut(nodes, w.0, x.0);
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &vw[i * n..(i + 1) * n];
                        for (dst, wij) in gx.iter_mut().zip(row) {
                            *dst += gi * *wij;
                        }
                    }
                }
            }),
        )
    }

    /// y = Wᵀ·x for W: (n,m), x: (n).
    pub fn matvec_t(&mut self, w: Var, x: Var) -> Var {
        let (vw, vx) = (self.value(w), self.value(x));
        assert_eq!(vw.rank(), 2, "matvec_t: W must be rank 2");
        assert_eq!(
            vw.dims()[0],
            vx.len(),
            "matvec_t: W rows {} vs x len {}",
            vw.dims()[0],
            vx.len()
        );
        let (n, m) = (vw.dims()[0], vw.dims()[1]);
        let mut out = vec![S::zero(); m];
        for i in 0..n {
            let xi = vx.data()[i];
            let row = vw.row(i);
            for (dst, wij) in out.iter_mut().zip(row) {
                *dst += xi * *wij;
            }
        }
        let (nw, nx) = (self.needs_grad(w), self.needs_grad(x));
        self.push_op(
            Tensor::from_vec(&[m], out),
            nw || nx,
            Box::new(move |nodes, _v, g| {
                if nw {
                    let (vx, gw) = value_grad_mut(nodes, x.0, w.0);
                    for i in 0..n {
                        let xi = vx[i];
                        let grow = &mut gw[i * m..(i + 1) * m];
                        for (dst, gj) in grow.iter_mut().zip(g.data()) {
                            *dst += xi * *gj;
                        }
                    }
                }
                if nx {
                    let (vw, gx) = value_grad_mut(nodes, w.0, x.0);
                    for i in 0..n {
                        let row = &vw[i * m..(i + 1) * m];
                        let mut acc = S::zero();
                        for (wij, gj) in row.iter().zip(g.data()) {
                            acc += *wij * *gj;
                        }
                        gx[i] += acc;
                    }
                }
            }),
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, _v, g| {
                let (va, ga) = value_grad_mut(nodes, a.0, a.0);
                for ((dst, gi), x) in ga.iter_mut().zip(g.data()).zip(va) {
                    if *x > S::zero() {
                        *dst += *gi;
                    }
                }
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, v, g| {
                let ga = grad_mut(nodes, a.0);
                for ((dst, gi), y) in ga.iter_mut().zip(g.data()).zip(v.data()) {
                    *dst += *gi * (S::one() - *y * *y);
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| S::one() / (S::one() + (-x).exp()));
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, v, g| {
                let ga = grad_mut(nodes, a.0);
                for ((dst, gi), y) in ga.iter_mut().zip(g.data()).zip(v.data()) {
                    *dst += *gi * *y * (S::one() - *y);
                }
            }),
        )
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rank(), 1, "softmax: expected rank-1 input");
        let out = Tensor::from_vec(va.dims(), softmax_slice(va.data()));
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, v, g| {
                let mut dot = S::zero();
                for (gi, yi) in g.data().iter().zip(v.data()) {
                    dot += *gi * *yi;
                }
                let ga = grad_mut(nodes, a.0);
                for ((dst, gi), yi) in ga.iter_mut().zip(g.data()).zip(v.data()) {
                    *dst += *yi * (*gi - dot);
                }
            }),
        )
    }

    /// Cross-entropy of a target class against raw logits:
    /// `logsumexp(logits) - logits[target]`. Scalar output.
    pub fn ce_logits(&mut self, logits: Var, target: usize) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rank(), 1, "ce_logits: expected rank-1 logits");
        assert!(target < vl.len(), "ce_logits: target {} out of {}", target, vl.len());
        let lse = log_sum_exp(vl.data());
        let loss = lse - vl.data()[target];
        let nl = self.needs_grad(logits);
        self.push_op(
            Tensor::scalar(loss),
            nl,
            Box::new(move |nodes, _v, g| {
                let gs = g.data()[0];
                let (vl, gl) = value_grad_mut(nodes, logits.0, logits.0);
                let p = softmax_slice(vl);
                for (i, (dst, pi)) in gl.iter_mut().zip(&p).enumerate() {
                    let ind = if i == target { S::one() } else { S::zero() };
                    *dst += gs * (*pi - ind);
                }
            }),
        )
    }

    /// Mean absolute difference between two same-shaped tensors. Scalar
    /// output; the subgradient at exact zeros is taken as 0.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims(), vb.dims(), "mean_abs_diff: shape mismatch");
        let n = va.len();
        let inv_n = S::of(1.0 / n as f64);
        let mut acc = S::zero();
        for (x, y) in va.data().iter().zip(vb.data()) {
            acc += (*x - *y).abs();
        }
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            Tensor::scalar(acc * inv_n),
            na || nb,
            Box::new(move |nodes, _v, g| {
                let gs = g.data()[0] * inv_n;
                let signs: Vec<S> = {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    va.iter().zip(vb).map(|(x, y)| sign(*x - *y)).collect()
                };
                if na {
                    for (dst, s) in grad_mut(nodes, a.0).iter_mut().zip(&signs) {
                        *dst += gs * *s;
                    }
                }
                if nb {
                    for (dst, s) in grad_mut(nodes, b.0).iter_mut().zip(&signs) {
                        *dst -= gs * *s;
                    }
                }
            }),
        )
    }

    /// Fixed linear functional Σ wᵢ·aᵢ with constant weights. Scalar output.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<S>) -> Var {
        let va = self.value(a);
        assert_eq!(va.dims(), weights.dims(), "weighted_sum: shape mismatch");
        let mut acc = S::zero();
        for (x, w) in va.data().iter().zip(weights.data()) {
            acc += *x * *w;
        }
        let na = self.needs_grad(a);
        let w = weights.clone();
        self.push_op(
            Tensor::scalar(acc),
            na,
            Box::new(move |nodes, _v, g| {
                let gs = g.data()[0];
                let ga = grad_mut(nodes, a.0);
                for (dst, wi) in ga.iter_mut().zip(w.data()) {
                    *dst += gs * *wi;
                }
            }),
        )
    }

    // ---- shape plumbing ----

    /// Concatenate rank-1 vars end to end.
    pub fn concat(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat: empty input");
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(vars.len());
        for &v in vars {
            let val = self.value(v);
            assert_eq!(val.rank(), 1, "concat: expected rank-1 inputs");
            spans.push((v.0, data.len(), val.len(), self.needs_grad(v)));
            data.extend_from_slice(val.data());
        }
        let total = data.len();
        let any = spans.iter().any(|&(_, _, _, n)| n);
        self.push_op(
            Tensor::from_vec(&[total], data),
            any,
            Box::new(move |nodes, _v, g| {
                for &(pi, off, len, n) in &spans {
                    if n {
                        let gp = grad_mut(nodes, pi);
                        for (dst, gi) in gp.iter_mut().zip(&g.data()[off..off + len]) {
                            *dst += *gi;
                        }
                    }
                }
            }),
        )
    }

    /// Contiguous sub-vector of a rank-1 var.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rank(), 1, "slice: expected rank-1 input");
        assert!(start + len <= va.len(), "slice: out of range");
        let out = Tensor::from_vec(&[len], va.data()[start..start + len].to_vec());
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, _v, g| {
                let ga = grad_mut(nodes, a.0);
                for (dst, gi) in ga[start..start + len].iter_mut().zip(g.data()) {
                    *dst += *gi;
                }
            }),
        )
    }

    /// Column block `[c0, c0+width)` of a rank-2 var.
    pub fn slice_cols(&mut self, a: Var, c0: usize, width: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rank(), 2, "slice_cols: expected rank-2 input");
        let (r, c) = (va.dims()[0], va.dims()[1]);
        assert!(c0 + width <= c, "slice_cols: out of range");
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&va.row(i)[c0..c0 + width]);
        }
        let na = self.needs_grad(a);
        self.push_op(
            Tensor::from_vec(&[r, width], data),
            na,
            Box::new(move |nodes, _v, g| {
                let ga = grad_mut(nodes, a.0);
                for i in 0..r {
                    let grow = &mut ga[i * c + c0..i * c + c0 + width];
                    for (dst, gi) in grow.iter_mut().zip(&g.data()[i * width..(i + 1) * width]) {
                        *dst += *gi;
                    }
                }
            }),
        )
    }

    /// Row `i` of a rank-2 var (embedding-table lookup).
    pub fn take_row(&mut self, a: Var, i: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rank(), 2, "take_row: expected rank-2 input");
        assert!(i < va.dims()[0], "take_row: row {} out of {}", i, va.dims()[0]);
        let c = va.dims()[1];
        let out = Tensor::from_vec(&[c], va.row(i).to_vec());
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, _v, g| {
                let ga = grad_mut(nodes, a.0);
                for (dst, gi) in ga[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                    *dst += *gi;
                }
            }),
        )
    }

    /// Same data, new shape (copies).
    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(
            dims.iter().product::<usize>(),
            va.len(),
            "reshape: {:?} -> {:?} changes element count",
            va.dims(),
            dims
        );
        let out = Tensor::from_vec(dims, va.data().to_vec());
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, _v, g| {
                let ga = grad_mut(nodes, a.0);
                for (dst, gi) in ga.iter_mut().zip(g.data()) {
                    *dst += *gi;
                }
            }),
        )
    }

    // ---- adversarial plumbing ----

    /// Identity in the forward pass; multiplies the gradient flowing
    /// upstream by `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, a: Var, lambda: S) -> Var {
        let out = self.value(a).clone();
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |nodes, _v, g| {
                let ga = grad_mut(nodes, a.0);
                for (dst, gi) in ga.iter_mut().zip(g.data()) {
                    *dst -= lambda * *gi;
                }
            }),
        )
    }

    // ---- convolutions and pooling ----

    /// 2-D convolution. x: (ci,h,w), k: (co,ci,kh,kw), bias: (co);
    /// zero padding `pad` on all sides, square stride.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (vx, vk, vb) = (self.value(x), self.value(k), self.value(bias));
        assert_eq!(vx.rank(), 3, "conv2d: x must be (ci,h,w)");
        assert_eq!(vk.rank(), 4, "conv2d: k must be (co,ci,kh,kw)");
        let (ci, hi, wi) = (vx.dims()[0], vx.dims()[1], vx.dims()[2]);
        let (co, kci, kh, kw) = (vk.dims()[0], vk.dims()[1], vk.dims()[2], vk.dims()[3]);
        assert_eq!(ci, kci, "conv2d: channel mismatch");
        assert_eq!(vb.len(), co, "conv2d: bias length mismatch");
        assert!(hi + 2 * pad >= kh && wi + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (hi + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        let mut out = vec![S::zero(); co * ho * wo];
        {
            let xd = vx.data();
            let kd = vk.data();
            let bd = vb.data();
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bd[o];
                        for c in 0..ci {
                            for u in 0..kh {
                                let ih = (oh * stride + u) as isize - pad as isize;
                                if ih < 0 || ih >= hi as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let iw = (ow * stride + v) as isize - pad as isize;
                                    if iw < 0 || iw >= wi as isize {
                                        continue;
                                    }
                                    acc += xd[(c * hi + ih as usize) * wi + iw as usize]
                                        * kd[((o * ci + c) * kh + u) * kw + v];
                                }
                            }
                        }
                        out[(o * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        let (nx, nk, nb) = (self.needs_grad(x), self.needs_grad(k), self.needs_grad(bias));
        self.push_op(
            Tensor::from_vec(&[co, ho, wo], out),
            nx || nk || nb,
            Box::new(move |nodes, _v, g| {
                let gd = g.data();
                if nb {
                    let gb = grad_mut(nodes, bias.0);
                    for o in 0..co {
                        let mut acc = S::zero();
                        for i in &gd[o * ho * wo..(o + 1) * ho * wo] {
                            acc += *i;
                        }
                        gb[o] += acc;
                    }
                }
                if nk {
                    let (xd, gk) = value_grad_mut(nodes, x.0, k.0);
                    for o in 0..co {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let go = gd[(o * ho + oh) * wo + ow];
                                for c in 0..ci {
                                    for u in 0..kh {
                                        let ih = (oh * stride + u) as isize - pad as isize;
                                        if ih < 0 || ih >= hi as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let iw = (ow * stride + v) as isize - pad as isize;
                                            if iw < 0 || iw >= wi as isize {
                                                continue;
                                            }
                                            gk[((o * ci + c) * kh + u) * kw + v] +=
                                                go * xd[(c * hi + ih as usize) * wi + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nx {
                    let (kd, gx) = value_grad_mut(nodes, k.0, x.0);
                    for o in 0..co {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let go = gd[(o * ho + oh) * wo + ow];
                                for c in 0..ci {
                                    for u in 0..kh {
                                        let ih = (oh * stride + u) as isize - pad as isize;
                                        if ih < 0 || ih >= hi as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let iw = (ow * stride + v) as isize - pad as isize;
                                            if iw < 0 || iw >= wi as isize {
                                                continue;
                                            }
                                            gx[(c * hi + ih as usize) * wi + iw as usize] +=
                                                go * kd[((o * ci + c) * kh + u) * kw + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Transposed 2-D convolution (fractionally strided). x: (ci,h,w),
    /// k: (ci,co,kh,kw), bias: (co). Output spatial size:
    /// `(h-1)*stride + kh - 2*pad`.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (vx, vk, vb) = (self.value(x), self.value(k), self.value(bias));
        assert_eq!(vx.rank(), 3, "conv2d_transpose: x must be (ci,h,w)");
        assert_eq!(vk.rank(), 4, "conv2d_transpose: k must be (ci,co,kh,kw)");
        let (ci, hi, wi) = (vx.dims()[0], vx.dims()[1], vx.dims()[2]);
        let (kci, co, kh, kw) = (vk.dims()[0], vk.dims()[1], vk.dims()[2], vk.dims()[3]);
        assert_eq!(ci, kci, "conv2d_transpose: channel mismatch");
        assert_eq!(vb.len(), co, "conv2d_transpose: bias length mismatch");
        let ho = (hi - 1) * stride + kh - 2 * pad;
        let wo = (wi - 1) * stride + kw - 2 * pad;
        assert!(ho > 0 && wo > 0, "conv2d_transpose: empty output");
        let mut out = vec![S::zero(); co * ho * wo];
        {
            let bd = vb.data();
            for o in 0..co {
                for i in out[o * ho * wo..(o + 1) * ho * wo].iter_mut() {
                    *i = bd[o];
                }
            }
            let xd = vx.data();
            let kd = vk.data();
            for c in 0..ci {
                for ih in 0..hi {
                    for iw in 0..wi {
                        let xv = xd[(c * hi + ih) * wi + iw];
                        for o in 0..co {
                            for u in 0..kh {
                                let oh = (ih * stride + u) as isize - pad as isize;
                                if oh < 0 || oh >= ho as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let ow = (iw * stride + v) as isize - pad as isize;
                                    if ow < 0 || ow >= wo as isize {
                                        continue;
                                    }
                                    out[(o * ho + oh as usize) * wo + ow as usize] +=
                                        xv * kd[((c * co + o) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        let (nx, nk, nb) = (self.needs_grad(x), self.needs_grad(k), self.needs_grad(bias));
        self.push_op(
            Tensor::from_vec(&[co, ho, wo], out),
            nx || nk || nb,
            Box::new(move |nodes, _v, g| {
                let gd = g.data();
                if nb {
                    let gb = grad_mut(nodes, bias.0);
                    for o in 0..co {
                        let mut acc = S::zero();
                        for i in &gd[o * ho * wo..(o + 1) * ho * wo] {
                            acc += *i;
                        }
                        gb[o] += acc;
                    }
                }
                if nk {
                    let (xd, gk) = value_grad_mut(nodes, x.0, k.0);
                    for c in 0..ci {
                        for ih in 0..hi {
                            for iw in 0..wi {
                                let xv = xd[(c * hi + ih) * wi + iw];
                                for o in 0..co {
                                    for u in 0..kh {
                                        let oh = (ih * stride + u) as isize - pad as isize;
                                        if oh < 0 || oh >= ho as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let ow = (iw * stride + v) as isize - pad as isize;
                                            if ow < 0 || ow >= wo as isize {
                                                continue;
                                            }
                                            gk[((c * co + o) * kh + u) * kw + v] += xv
                                                * gd[(o * ho + oh as usize) * wo + ow as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nx {
                    let (kd, gx) = value_grad_mut(nodes, k.0, x.0);
                    for c in 0..ci {
                        for ih in 0..hi {
                            for iw in 0..wi {
                                let mut acc = S::zero();
                                for o in 0..co {
                                    for u in 0..kh {
                                        let oh = (ih * stride + u) as isize - pad as isize;
                                        if oh < 0 || oh >= ho as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let ow = (iw * stride + v) as isize - pad as isize;
                                            if ow < 0 || ow >= wo as isize {
                                                continue;
                                            }
                                            acc += kd[((c * co + o) * kh + u) * kw + v]
                                                * gd[(o * ho + oh as usize) * wo + ow as usize];
                                        }
                                    }
                                }
                                gx[(c * hi + ih) * wi + iw] += acc;
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Per-channel max over the spatial grid; ties go to the lowest flat
    /// index so the backward routing is deterministic.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 3, "global_max_pool: x must be (c,h,w)");
        let (c, h, w) = (vx.dims()[0], vx.dims()[1], vx.dims()[2]);
        let hw = h * w;
        let mut out = vec![S::zero(); c];
        let mut arg = vec![0usize; c];
        for ch in 0..c {
            let plane = &vx.data()[ch * hw..(ch + 1) * hw];
            let (mut best_i, mut best) = (0usize, plane[0]);
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[ch] = best;
            arg[ch] = best_i;
        }
        let nx = self.needs_grad(x);
        self.push_op(
            Tensor::from_vec(&[c], out),
            nx,
            Box::new(move |nodes, _v, g| {
                let gx = grad_mut(nodes, x.0);
                for ch in 0..c {
                    gx[ch * hw + arg[ch]] += g.data()[ch];
                }
            }),
        )
    }
}

pub(crate) fn softmax_slice<S: Scalar>(xs: &[S]) -> Vec<S> {
    let mut max = xs[0];
    for &x in &xs[1..] {
        if x > max {
            max = x;
        }
    }
    let exps: Vec<S> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let mut max = xs[0];
    for &x in &xs[1..] {
        if x > max {
            max = x;
        }
    }
    let sum: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of one scalar-valued graph against the
    /// tape's analytic gradients, for every element of every input.
    fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eps = 1e-6;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss);
        for (ti, t) in inputs.iter().enumerate() {
            for ei in 0..t.len() {
                let eval = |delta: f64| {
                    let mut bumped: Vec<Tensor<f64>> = inputs.to_vec();
                    bumped[ti].data_mut()[ei] += delta;
                    let mut tp = Tape::new();
                    let vs: Vec<Var> = bumped.into_iter().map(|t| tp.leaf(t)).collect();
                    let l = build(&mut tp, &vs);
                    tp.value(l).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = tape.grad(vars[ti]).data()[ei];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-6,
                    "input {} elem {}: analytic {} vs numeric {}",
                    ti,
                    ei,
                    analytic,
                    numeric
                );
            }
        }
    }

    fn randt(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::rand_uniform(dims, -1.0, 1.0, rng)
    }

    /// Inputs shifted away from zero so relu/abs kinks don't sit under the
    /// finite-difference probe.
    fn randt_off_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let t = randt(dims, rng);
        Tensor::from_vec(
            dims,
            t.data()
                .iter()
                .map(|&x| if x.abs() < 0.2 { x + 0.3 } else { x })
                .collect(),
        )
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe = randt(&[6], &mut rng);
        let w = probe.clone();
        fd_check(&[randt(&[6], &mut rng), randt(&[6], &mut rng)], |t, v| {
            let s = t.add(v[0], v[1]);
            t.weighted_sum(s, &w)
        });
        fd_check(&[randt(&[6], &mut rng), randt(&[6], &mut rng)], |t, v| {
            let s = t.sub(v[0], v[1]);
            t.weighted_sum(s, &w)
        });
        fd_check(&[randt(&[6], &mut rng), randt(&[6], &mut rng)], |t, v| {
            let s = t.mul(v[0], v[1]);
            t.weighted_sum(s, &w)
        });
        fd_check(&[randt(&[6], &mut rng)], |t, v| {
            let s = t.affine_scalar(v[0], 0.5, -0.25);
            t.weighted_sum(s, &w)
        });
        fd_check(
            &[randt(&[6], &mut rng), randt(&[6], &mut rng), randt(&[6], &mut rng)],
            |t, v| {
                let s = t.add_n(v);
                t.weighted_sum(s, &w)
            },
        );
    }

    #[test]
    fn fd_matvec_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w4 = randt(&[4], &mut rng);
        fd_check(&[randt(&[4, 3], &mut rng), randt(&[3], &mut rng)], |t, v| {
            let y = t.matvec(v[0], v[1]);
            t.weighted_sum(y, &w4)
        });
        fd_check(&[randt(&[3, 4], &mut rng), randt(&[3], &mut rng)], |t, v| {
            let y = t.matvec_t(v[0], v[1]);
            t.weighted_sum(y, &w4)
        });
    }

    #[test]
    fn fd_nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = randt(&[5], &mut rng);
        fd_check(&[randt_off_zero(&[5], &mut rng)], |t, v| {
            let y = t.relu(v[0]);
            t.weighted_sum(y, &w)
        });
        fd_check(&[randt(&[5], &mut rng)], |t, v| {
            let y = t.tanh(v[0]);
            t.weighted_sum(y, &w)
        });
        fd_check(&[randt(&[5], &mut rng)], |t, v| {
            let y = t.sigmoid(v[0]);
            t.weighted_sum(y, &w)
        });
        fd_check(&[randt(&[5], &mut rng)], |t, v| {
            let y = t.softmax(v[0]);
            t.weighted_sum(y, &w)
        });
        fd_check(&[randt(&[5], &mut rng)], |t, v| t.ce_logits(v[0], 2));
    }

    #[test]
    fn fd_losses_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Targets well separated so |a-b| has no kink under the probe.
        let a = randt(&[2, 3], &mut rng);
        let b = a.map(|x| x + 0.7);
        fd_check(&[a, b], |t, v| t.mean_abs_diff(v[0], v[1]));

        let w8 = randt(&[8], &mut rng);
        fd_check(
            &[randt(&[3], &mut rng), randt(&[5], &mut rng)],
            |t, v| {
                let y = t.concat(v);
                t.weighted_sum(y, &w8)
            },
        );
        let w2 = randt(&[2], &mut rng);
        fd_check(&[randt(&[6], &mut rng)], |t, v| {
            let y = t.slice(v[0], 2, 2);
            t.weighted_sum(y, &w2)
        });
        let w32 = randt(&[3, 2], &mut rng);
        fd_check(&[randt(&[3, 4], &mut rng)], |t, v| {
            let y = t.slice_cols(v[0], 1, 2);
            t.weighted_sum(y, &w32)
        });
        let w4 = randt(&[4], &mut rng);
        fd_check(&[randt(&[3, 4], &mut rng)], |t, v| {
            let y = t.take_row(v[0], 1);
            t.weighted_sum(y, &w4)
        });
        let w6 = randt(&[6], &mut rng);
        fd_check(&[randt(&[2, 3], &mut rng)], |t, v| {
            let y = t.reshape(v[0], &[6]);
            t.weighted_sum(y, &w6)
        });
    }

    #[test]
    fn fd_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wout = randt(&[3, 3, 3], &mut rng);
        fd_check(
            &[
                randt(&[2, 5, 5], &mut rng),
                randt(&[3, 2, 3, 3], &mut rng),
                randt(&[3], &mut rng),
            ],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1);
                let f = t.reshape(y, &[27]);
                t.weighted_sum(f, &wout.clone().reshaped(&[27]))
            },
        );
        let wdec = randt(&[3, 4, 4], &mut rng);
        fd_check(
            &[
                randt(&[2, 2, 2], &mut rng),
                randt(&[2, 3, 4, 4], &mut rng),
                randt(&[3], &mut rng),
            ],
            |t, v| {
                let y = t.conv2d_transpose(v[0], v[1], v[2], 2, 1);
                let f = t.reshape(y, &[48]);
                t.weighted_sum(f, &wdec.clone().reshaped(&[48]))
            },
        );
    }

    #[test]
    fn fd_global_max_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Spread values so the argmax is stable under the probe.
        let mut x = randt(&[2, 3, 3], &mut rng);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += i as f64 * 0.05;
        }
        let w = randt(&[2], &mut rng);
        fd_check(&[x], |t, v| {
            let y = t.global_max_pool(v[0]);
            t.weighted_sum(y, &w)
        });
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1 channel, 3x3 input, 2x2 kernel, stride 1, no padding.
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec(&[1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1., 0., 0., -1.]));
        let b = t.constant(Tensor::from_vec(&[1], vec![0.5]));
        let y = t.conv2d(x, k, b, 1, 0);
        assert_eq!(t.value(y).dims(), &[1, 2, 2]);
        // Each output = x[ih,iw] - x[ih+1,iw+1] + 0.5 = -4 + 0.5.
        assert_eq!(t.value(y).data(), &[-3.5, -3.5, -3.5, -3.5]);
    }

    #[test]
    fn conv2d_transpose_shape_doubles_with_stride_2_k4_p1() {
        let mut t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t.constant(Tensor::rand_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng));
        let k = t.constant(Tensor::rand_uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut rng));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.conv2d_transpose(x, k, b, 2, 1);
        assert_eq!(t.value(y).dims(), &[2, 8, 8]);
    }

    #[test]
    fn grad_reverse_forward_is_bitwise_identity() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[3], vec![0.1, -2.5, 3.75]));
        let y = t.grad_reverse(x, 1.0);
        assert!(t.value(y).bit_eq(t.value(x)));
    }

    #[test]
    fn grad_reverse_negates_and_scales_gradient() {
        for lambda in [1.0, 0.5] {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]));
            let r = t.grad_reverse(x, lambda);
            let ones = Tensor::full(&[3], 1.0);
            let s = t.weighted_sum(r, &ones);
            t.backward(s);
            for &g in t.grad(x).data() {
                assert_eq!(g, -lambda);
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[4], 3.0));
        let y = t.softmax(x);
        for &p in t.value(y).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_logits_equals_negative_log_softmax() {
        let mut t = Tape::<f64>::new();
        let logits = Tensor::from_vec(&[3], vec![0.2, -1.0, 0.7]);
        let x = t.constant(logits.clone());
        let l = t.ce_logits(x, 2);
        let p = softmax_slice(logits.data());
        assert!((t.value(l).item() - (-p[2].ln())).abs() < 1e-12);
    }

    #[test]
    fn global_max_pool_breaks_ties_to_lowest_index() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]));
        let y = t.global_max_pool(x);
        let w = Tensor::full(&[1], 1.0);
        let s = t.weighted_sum(y, &w);
        t.backward(s);
        assert_eq!(t.grad(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient_and_prune_backward() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let x = t.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y = t.mul(c, x);
        let s = t.weighted_sum(y, &Tensor::full(&[2], 1.0));
        t.backward(s);
        assert_eq!(t.grad(c).data(), &[0.0, 0.0]);
        assert_eq!(t.grad(x).data(), &[1.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "backward() ran twice")]
    fn backward_twice_panics() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(1.0));
        t.backward(x);
        t.backward(x);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_rejects_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2]));
        let b = t.leaf(Tensor::zeros(&[3]));
        let _ = t.add(a, b);
    }

    #[test]
    fn fanned_out_var_accumulates_gradient_from_both_uses() {
        // s = sum(x) + sum(x) => ds/dx = 2 everywhere.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let w = Tensor::full(&[2], 1.0);
        let s1 = t.weighted_sum(x, &w);
        let s2 = t.weighted_sum(x, &w);
        let s = t.add(s1, s2);
        t.backward(s);
        assert_eq!(t.grad(x).data(), &[2.0, 2.0]);
    }
}
