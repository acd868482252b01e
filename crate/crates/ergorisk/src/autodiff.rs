//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a per-sample tape: ops append nodes holding the forward
//! value plus a closure that maps the output gradient to parent gradients.
//! [`Graph::backward`] walks the tape once in reverse. Nodes reached only
//! from constants record no closure, so gradient work is skipped wherever it
//! cannot matter (e.g. the image input of a convolution).
//!
//! Graphs are built fresh per sample and never shared across threads;
//! parallel training gives each worker its own tape and merges leaf
//! gradients afterwards in a fixed order.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{ErgRng, ParamMap, Scalar, Tensor};

type BackFn<S> = Box<dyn Fn(&Tensor<S>, &Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<usize>,
    backward: Option<BackFn<S>>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Computation tape. Create one per forward/backward pass.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node in a [`Graph`]; cheap to copy.
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    fn push(
        &self,
        value: Tensor<S>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackFn<S>>,
        op: &str,
    ) -> Var<'_, S> {
        #[cfg(debug_assertions)]
        value.check_finite(op);
        #[cfg(not(debug_assertions))]
        let _ = op;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            grad: None,
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Tracked input: gradients will be available after `backward`.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, vec![], true, None, "leaf")
    }

    /// Untracked input: no gradients flow into or through it alone.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, vec![], false, None, "constant")
    }

    /// Record an op node; gradient tracking is inherited from parents.
    fn push_op(
        &self,
        value: Tensor<S>,
        parents: Vec<usize>,
        backward: BackFn<S>,
        op: &str,
    ) -> Var<'_, S> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, parents, requires, Some(backward), op)
    }

    /// Current forward value of a node (cloned out).
    pub fn value(&self, v: Var<'_, S>) -> Tensor<S> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Gradient of a node after `backward`, if it was tracked and reached.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar loss; fills gradients of every tracked
    /// node that the loss depends on.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        let mut stored: Vec<(usize, Tensor<S>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let ln = &nodes[loss.id];
            if ln.value.len() != 1 {
                return Err(Error::Value(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    ln.value.shape()
                )));
            }
            let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.id + 1);
            grads.resize_with(loss.id + 1, || None);
            grads[loss.id] = Some(Tensor::full(ln.value.shape().to_vec(), S::ONE));

            for id in (0..=loss.id).rev() {
                let Some(gout) = grads[id].take() else { continue };
                let node = &nodes[id];
                if let Some(back) = &node.backward {
                    let parent_vals: Vec<&Tensor<S>> =
                        node.parents.iter().map(|&p| &nodes[p].value).collect();
                    let pgrads = back(&gout, &node.value, &parent_vals);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                if node.requires_grad {
                    #[cfg(debug_assertions)]
                    gout.check_finite("backward");
                    stored.push((id, gout));
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in stored {
            nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn shape(self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(self) -> Tensor<S> {
        self.graph.value(self)
    }

    fn requires(self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Apply `f` to this node's tensor without cloning it.
    fn with_value<R>(self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    fn with_values<R>(self, other: Self, f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> R) -> R {
        let nodes = self.graph.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    // ---- elementwise ----

    pub fn add(self, other: Self) -> Self {
        let value = self.with_values(other, |a, b| a.zip(b, |x, y| x + y));
        self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
            "add",
        )
    }

    pub fn sub(self, other: Self) -> Self {
        let value = self.with_values(other, |a, b| a.zip(b, |x, y| x - y));
        self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)]),
            "sub",
        )
    }

    /// Elementwise product.
    pub fn hadamard(self, other: Self) -> Self {
        let value = self.with_values(other, |a, b| a.zip(b, |x, y| x * y));
        self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(|g, _, ps| vec![g.zip(ps[1], |gv, b| gv * b), g.zip(ps[0], |gv, a| gv * a)]),
            "hadamard",
        )
    }

    /// Multiply by a fixed scalar.
    pub fn scale(self, c: f64) -> Self {
        let cs = S::from_f64(c);
        let value = self.with_value(|a| a.scale(cs));
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| vec![g.scale(cs)]),
            "scale",
        )
    }

    pub fn relu(self) -> Self {
        let value = self.with_value(|a| a.map(|v| v.maximum(S::ZERO)));
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(|g, _, ps| {
                vec![g.zip(ps[0], |gv, x| if x > S::ZERO { gv } else { S::ZERO })]
            }),
            "relu",
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(self) -> Self {
        fn act<S: Scalar>(x: S) -> S {
            let half = S::from_f64(0.5);
            half * x * (S::ONE + gelu_inner(x).tanh())
        }
        fn gelu_inner<S: Scalar>(x: S) -> S {
            let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
            let a = S::from_f64(0.044_715);
            c * (x + a * x * x * x)
        }
        let value = self.with_value(|t| t.map(act));
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(|g, _, ps| {
                vec![g.zip(ps[0], |gv, x| {
                    let half = S::from_f64(0.5);
                    let c = S::from_f64(0.797_884_560_802_865_4);
                    let a = S::from_f64(0.044_715);
                    let t = gelu_inner(x).tanh();
                    let sech2 = S::ONE - t * t;
                    let du = c * (S::ONE + S::from_f64(3.0) * a * x * x);
                    gv * (half * (S::ONE + t) + half * x * sech2 * du)
                })]
            }),
            "gelu",
        )
    }

    // ---- shape ops ----

    pub fn reshape(self, shape: &[usize]) -> Self {
        let old_shape = self.shape();
        let value = self.with_value(|a| {
            Tensor::new(shape.to_vec(), a.data().to_vec())
        });
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| {
                vec![Tensor::new(old_shape.clone(), g.data().to_vec())]
            }),
            "reshape",
        )
    }

    pub fn transpose(self) -> Self {
        let value = self.with_value(|a| a.transpose2());
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(|g, _, _| vec![g.transpose2()]),
            "transpose",
        )
    }

    /// Columns `lo..hi` of a rank-2 tensor.
    pub fn slice_cols(self, lo: usize, hi: usize) -> Self {
        let value = self.with_value(|a| {
            let (n, d) = a.dims2();
            assert!(lo < hi && hi <= d, "shape error: slice_cols {lo}..{hi} of {d}");
            let mut data = Vec::with_capacity(n * (hi - lo));
            for i in 0..n {
                data.extend_from_slice(&a.row(i)[lo..hi]);
            }
            Tensor::new(vec![n, hi - lo], data)
        });
        let full_d = self.shape()[1];
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| {
                let (n, w) = g.dims2();
                let mut out = Tensor::zeros(vec![n, full_d]);
                for i in 0..n {
                    out.data_mut()[i * full_d + lo..i * full_d + lo + w]
                        .copy_from_slice(g.row(i));
                }
                vec![out]
            }),
            "slice_cols",
        )
    }

    /// Concatenate two rank-2 tensors along columns.
    pub fn concat_cols(self, other: Self) -> Self {
        let value = self.with_values(other, |a, b| {
            let (na, da) = a.dims2();
            let (nb, db) = b.dims2();
            assert_eq!(na, nb, "shape error: concat_cols rows {na} vs {nb}");
            let mut data = Vec::with_capacity(na * (da + db));
            for i in 0..na {
                data.extend_from_slice(a.row(i));
                data.extend_from_slice(b.row(i));
            }
            Tensor::new(vec![na, da + db], data)
        });
        let da = self.shape()[1];
        self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(move |g, _, _| {
                let (n, d) = g.dims2();
                let db = d - da;
                let mut ga = Tensor::zeros(vec![n, da]);
                let mut gb = Tensor::zeros(vec![n, db]);
                for i in 0..n {
                    ga.data_mut()[i * da..(i + 1) * da].copy_from_slice(&g.row(i)[..da]);
                    gb.data_mut()[i * db..(i + 1) * db].copy_from_slice(&g.row(i)[da..]);
                }
                vec![ga, gb]
            }),
            "concat_cols",
        )
    }

    // ---- reductions ----

    /// Mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(self) -> Self {
        let value = self.with_value(|a| {
            let (n, d) = a.dims2();
            let inv = S::from_f64(1.0 / n as f64);
            let mut out = vec![S::ZERO; d];
            for i in 0..n {
                for (o, &v) in out.iter_mut().zip(a.row(i)) {
                    *o = *o + v;
                }
            }
            Tensor::new(vec![1, d], out.into_iter().map(|v| v * inv).collect())
        });
        let n = self.shape()[0];
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| {
                let d = g.len();
                let inv = S::from_f64(1.0 / n as f64);
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    for (o, &gv) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                vec![out]
            }),
            "mean_rows",
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Self {
        let value = self.with_value(|a| Tensor::scalar(a.sum_value()));
        let shape = self.shape();
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| vec![Tensor::full(shape.clone(), g.item())]),
            "sum",
        )
    }

    // ---- linear algebra ----

    pub fn matmul(self, other: Self) -> Self {
        let value = self.with_values(other, |a, b| a.matmul(b));
        let (needs_a, needs_b) = (self.requires(), other.requires());
        self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(move |g, _, ps| {
                let da = if needs_a {
                    g.matmul(&ps[1].transpose2())
                } else {
                    Tensor::scalar(S::ZERO)
                };
                let db = if needs_b {
                    ps[0].transpose2().matmul(g)
                } else {
                    Tensor::scalar(S::ZERO)
                };
                vec![da, db]
            }),
            "matmul",
        )
    }

    /// Add a `[d]` bias to every row of a `[n,d]` tensor.
    pub fn add_bias_row(self, bias: Self) -> Self {
        let value = self.with_values(bias, |a, b| {
            let (n, d) = a.dims2();
            assert_eq!(b.shape(), [d], "shape error: row bias {:?} on [n,{d}]", b.shape());
            let mut out = a.clone();
            for i in 0..n {
                for (o, &bv) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(b.data()) {
                    *o = *o + bv;
                }
            }
            out
        });
        self.graph.push_op(
            value,
            vec![self.id, bias.id],
            Box::new(|g, _, _| {
                let (n, d) = g.dims2();
                let mut gb = vec![S::ZERO; d];
                for i in 0..n {
                    for (o, &gv) in gb.iter_mut().zip(g.row(i)) {
                        *o = *o + gv;
                    }
                }
                vec![g.clone(), Tensor::new(vec![d], gb)]
            }),
            "add_bias_row",
        )
    }

    /// Add a `[c]` bias to every spatial position of a `[c,h,w]` tensor.
    pub fn add_chan_bias(self, bias: Self) -> Self {
        let value = self.with_values(bias, |a, b| {
            let s = a.shape().to_vec();
            assert_eq!(s.len(), 3, "shape error: channel bias on rank {}", s.len());
            assert_eq!(b.shape(), [s[0]], "shape error: channel bias {:?} on {s:?}", b.shape());
            let hw = s[1] * s[2];
            let mut out = a.clone();
            for c in 0..s[0] {
                let bv = b.data()[c];
                for o in &mut out.data_mut()[c * hw..(c + 1) * hw] {
                    *o = *o + bv;
                }
            }
            out
        });
        self.graph.push_op(
            value,
            vec![self.id, bias.id],
            Box::new(|g, _, _| {
                let s = g.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let gb: Vec<S> = (0..c)
                    .map(|ci| g.data()[ci * hw..(ci + 1) * hw].iter().fold(S::ZERO, |a, &v| a + v))
                    .collect();
                vec![g.clone(), Tensor::new(vec![c], gb)]
            }),
            "add_chan_bias",
        )
    }

    // ---- normalization and softmax ----

    /// Row-wise softmax of a rank-2 tensor (numerically stabilized).
    pub fn softmax_rows(self) -> Self {
        let value = self.with_value(softmax_data);
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(|g, y, _| {
                let (n, d) = y.dims2();
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    let dot = g.row(i)
                        .iter()
                        .zip(y.row(i))
                        .fold(S::ZERO, |acc, (&gv, &yv)| acc + gv * yv);
                    for j in 0..d {
                        out.data_mut()[i * d + j] = y.row(i)[j] * (g.row(i)[j] - dot);
                    }
                }
                vec![out]
            }),
            "softmax_rows",
        )
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax_rows(self) -> Self {
        let value = self.with_value(|a| {
            let (n, d) = a.dims2();
            let mut out = a.clone();
            for i in 0..n {
                let row = &mut out.data_mut()[i * d..(i + 1) * d];
                let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
                let lse = row.iter().fold(S::ZERO, |acc, &v| acc + (v - max).exp()).ln() + max;
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            out
        });
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(|g, y, _| {
                let (n, d) = y.dims2();
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    let gsum = g.row(i).iter().fold(S::ZERO, |a, &v| a + v);
                    for j in 0..d {
                        out.data_mut()[i * d + j] = g.row(i)[j] - y.row(i)[j].exp() * gsum;
                    }
                }
                vec![out]
            }),
            "log_softmax_rows",
        )
    }

    /// Row-wise layer normalization with affine parameters.
    ///
    /// Per row: subtract the mean, divide by sqrt(biased variance + eps),
    /// then scale by `gamma` and shift by `beta` (both `[d]`).
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Self {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let ga = &nodes[gamma.id].value;
            let be = &nodes[beta.id].value;
            let (n, d) = x.dims2();
            assert_eq!(ga.shape(), [d], "shape error: layer_norm gamma {:?}", ga.shape());
            assert_eq!(be.shape(), [d], "shape error: layer_norm beta {:?}", be.shape());
            let mut out = Tensor::zeros(vec![n, d]);
            for i in 0..n {
                let (xhat, _) = normalize_row(x.row(i), eps);
                for j in 0..d {
                    out.data_mut()[i * d + j] = xhat[j] * ga.data()[j] + be.data()[j];
                }
            }
            out
        };
        self.graph.push_op(
            value,
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g, _, ps| {
                let (x, ga) = (ps[0], ps[1]);
                let (n, d) = x.dims2();
                let inv_d = S::from_f64(1.0 / d as f64);
                let mut dx = Tensor::zeros(vec![n, d]);
                let mut dgamma = vec![S::ZERO; d];
                let mut dbeta = vec![S::ZERO; d];
                for i in 0..n {
                    let (xhat, inv_std) = normalize_row(x.row(i), eps);
                    let grow = g.row(i);
                    // dxhat = g * gamma; two row means feed the x gradient.
                    let mut m1 = S::ZERO; // mean(dxhat)
                    let mut m2 = S::ZERO; // mean(dxhat * xhat)
                    for j in 0..d {
                        let dxh = grow[j] * ga.data()[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[j];
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let dxh = grow[j] * ga.data()[j];
                        dx.data_mut()[i * d + j] = inv_std * (dxh - m1 - xhat[j] * m2);
                    }
                }
                vec![dx, Tensor::new(vec![d], dgamma), Tensor::new(vec![d], dbeta)]
            }),
            "layer_norm",
        )
    }

    /// Layer normalization of a `[c,h,w]` map across channels at each
    /// spatial position, with per-channel affine parameters.
    pub fn layer_norm_channels(self, gamma: Self, beta: Self, eps: f64) -> Self {
        let s = self.shape();
        assert_eq!(s.len(), 3, "shape error: layer_norm_channels on rank {}", s.len());
        let (c, h, w) = (s[0], s[1], s[2]);
        self.reshape(&[c, h * w])
            .transpose()
            .layer_norm(gamma, beta, eps)
            .transpose()
            .reshape(&[c, h, w])
    }

    // ---- convolution support ----

    /// Unfold a `[c,h,w]` tensor into convolution columns
    /// `[c*kh*kw, oh*ow]` (zero padding, fixed stride).
    pub fn im2col(self, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let s = self.shape();
        assert_eq!(s.len(), 3, "shape error: im2col on rank {}", s.len());
        let (c, h, w) = (s[0], s[1], s[2]);
        let value = self.with_value(|x| im2col_data(x, kh, kw, stride, pad));
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| vec![col2im_data(g, c, h, w, kh, kw, stride, pad)]),
            "im2col",
        )
    }

    /// 2D convolution of `[c_in,h,w]` by `[c_out,c_in,kh,kw]`.
    pub fn conv2d(self, kernel: Self, stride: usize, pad: usize) -> Self {
        let xs = self.shape();
        let ks = kernel.shape();
        assert_eq!(xs.len(), 3, "shape error: conv2d input rank {}", xs.len());
        assert_eq!(ks.len(), 4, "shape error: conv2d kernel rank {}", ks.len());
        assert_eq!(ks[1], xs[0], "shape error: conv2d channels {} vs kernel {}", xs[0], ks[1]);
        let (oh, ow) = conv_out_size(xs[1], xs[2], ks[2], ks[3], stride, pad);
        let cols = self.im2col(ks[2], ks[3], stride, pad);
        let kmat = kernel.reshape(&[ks[0], ks[1] * ks[2] * ks[3]]);
        kmat.matmul(cols).reshape(&[ks[0], oh, ow])
    }

    /// Average-pool a `[c,h,w]` map to a fixed `[c,oh,ow]` grid.
    ///
    /// Output cell `(i,j)` averages input rows `floor(i*h/oh) ..
    /// ceil((i+1)*h/oh)` (same rule per column), so any input size maps
    /// deterministically onto the requested grid; when the sizes already
    /// match, this is the identity.
    pub fn adaptive_avg_pool(self, oh: usize, ow: usize) -> Self {
        let s = self.shape();
        assert_eq!(s.len(), 3, "shape error: adaptive_avg_pool on rank {}", s.len());
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "shape error: pool {h}x{w} -> {oh}x{ow}");
        if oh == h && ow == w {
            return self;
        }
        let value = self.with_value(|x| {
            let mut out = Tensor::zeros(vec![c, oh, ow]);
            for ci in 0..c {
                for i in 0..oh {
                    let (h0, h1) = pool_bin(i, h, oh);
                    for j in 0..ow {
                        let (w0, w1) = pool_bin(j, w, ow);
                        let mut acc = S::ZERO;
                        for hh in h0..h1 {
                            for ww in w0..w1 {
                                acc = acc + x.data()[(ci * h + hh) * w + ww];
                            }
                        }
                        let inv = S::from_f64(1.0 / ((h1 - h0) * (w1 - w0)) as f64);
                        out.data_mut()[(ci * oh + i) * ow + j] = acc * inv;
                    }
                }
            }
            out
        });
        self.graph.push_op(
            value,
            vec![self.id],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(vec![c, h, w]);
                for ci in 0..c {
                    for i in 0..oh {
                        let (h0, h1) = pool_bin(i, h, oh);
                        for j in 0..ow {
                            let (w0, w1) = pool_bin(j, w, ow);
                            let gv = g.data()[(ci * oh + i) * ow + j]
                                * S::from_f64(1.0 / ((h1 - h0) * (w1 - w0)) as f64);
                            for hh in h0..h1 {
                                for ww in w0..w1 {
                                    let idx = (ci * h + hh) * w + ww;
                                    dx.data_mut()[idx] = dx.data_mut()[idx] + gv;
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
            "adaptive_avg_pool",
        )
    }

    // ---- stochastic ----

    /// Inverted dropout: in train mode, zero elements with probability `p`
    /// and scale survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout(self, p: f64, train: bool, rng: &mut ErgRng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0,1)");
        if !train || p == 0.0 {
            return self;
        }
        let keep = 1.0 - p;
        let inv = S::from_f64(1.0 / keep);
        let shape = self.shape();
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| if rng.gen_range(0.0..1.0) < keep { inv } else { S::ZERO })
            .collect();
        let mask = self.graph.constant(Tensor::new(shape, data));
        self.hadamard(mask)
    }
}

fn softmax_data<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (n, d) = a.dims2();
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Normalize one row: returns (x-hat values, 1/sqrt(var+eps)).
fn normalize_row<S: Scalar>(row: &[S], eps: f64) -> (Vec<S>, S) {
    let inv_d = S::from_f64(1.0 / row.len() as f64);
    let mean = row.iter().fold(S::ZERO, |a, &v| a + v) * inv_d;
    let var = row.iter().fold(S::ZERO, |a, &v| a + (v - mean) * (v - mean)) * inv_d;
    let inv_std = S::ONE / (var + S::from_f64(eps)).sqrt();
    (row.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

pub(crate) fn conv_out_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(stride >= 1, "shape error: conv stride 0");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "shape error: kernel {kh}x{kw} exceeds padded {h}x{w}");
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    (i * input / output, ((i + 1) * input).div_ceil(output))
}

fn im2col_data<S: Scalar>(x: &Tensor<S>, kh: usize, kw: usize, stride: usize, pad: usize) -> Tensor<S> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = conv_out_size(h, w, kh, kw, stride, pad);
    let mut out = Tensor::zeros(vec![c * kh * kw, oh * ow]);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let hh = (oi * stride + ki) as isize - pad as isize;
                    if hh < 0 || hh >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let ww = (oj * stride + kj) as isize - pad as isize;
                        if ww < 0 || ww >= w as isize {
                            continue;
                        }
                        out.data_mut()[r * oh * ow + oi * ow + oj] =
                            x.data()[(ci * h + hh as usize) * w + ww as usize];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col_data`]: scatter-add columns back onto the image.
fn col2im_data<S: Scalar>(
    cols: &Tensor<S>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let (oh, ow) = conv_out_size(h, w, kh, kw, stride, pad);
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let hh = (oi * stride + ki) as isize - pad as isize;
                    if hh < 0 || hh >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let ww = (oj * stride + kj) as isize - pad as isize;
                        if ww < 0 || ww >= w as isize {
                            continue;
                        }
                        let idx = (ci * h + hh as usize) * w + ww as usize;
                        out.data_mut()[idx] =
                            out.data_mut()[idx] + cols.data()[r * oh * ow + oi * ow + oj];
                    }
                }
            }
        }
    }
    out
}

/// Projection parameters for one multi-head attention layer.
pub struct AttnParams<'g, S: Scalar> {
    pub wq: Var<'g, S>,
    pub bq: Var<'g, S>,
    pub wk: Var<'g, S>,
    pub bk: Var<'g, S>,
    pub wv: Var<'g, S>,
    pub bv: Var<'g, S>,
    pub wo: Var<'g, S>,
    pub bo: Var<'g, S>,
}

/// Per-head attention probability matrices, exposed for invariant tests.
pub struct AttnTrace<'g, S: Scalar> {
    /// One `[n_q, n_k]` row-stochastic matrix per head.
    pub probs: Vec<Var<'g, S>>,
}

/// Standard multi-head scaled dot-product attention with output projection.
///
/// `q` is `[n_q, d]`; `k` and `v` are `[n_k, d]`. Each head attends over
/// `d/heads`-wide slices with scale `1/sqrt(d/heads)`; head outputs are
/// concatenated and projected by `wo`.
pub fn mha<'g, S: Scalar>(
    q: Var<'g, S>,
    k: Var<'g, S>,
    v: Var<'g, S>,
    heads: usize,
    p: &AttnParams<'g, S>,
) -> Result<(Var<'g, S>, AttnTrace<'g, S>)> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 2 || ks.len() != 2 || vs != ks || qs[1] != ks[1] {
        return Err(Error::Config(format!(
            "attention shapes incompatible: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = q.matmul(p.wq).add_bias_row(p.bq);
    let kp = k.matmul(p.wk).add_bias_row(p.bk);
    let vp = v.matmul(p.wv).add_bias_row(p.bv);

    let mut probs = Vec::with_capacity(heads);
    let mut merged: Option<Var<'g, S>> = None;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = qp.slice_cols(lo, hi);
        let kh = kp.slice_cols(lo, hi);
        let vh = vp.slice_cols(lo, hi);
        let prob = qh.matmul(kh.transpose()).scale(scale).softmax_rows();
        probs.push(prob);
        let oh = prob.matmul(vh);
        merged = Some(match merged {
            None => oh,
            Some(acc) => acc.concat_cols(oh),
        });
    }
    let out = merged.expect("heads >= 1").matmul(p.wo).add_bias_row(p.bo);
    Ok((out, AttnTrace { probs }))
}

/// Activation for the position-wise feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

/// Parameters for a two-layer position-wise feed-forward network.
pub struct FfnParams<'g, S: Scalar> {
    pub w1: Var<'g, S>,
    pub b1: Var<'g, S>,
    pub w2: Var<'g, S>,
    pub b2: Var<'g, S>,
}

/// Position-wise feed-forward network: expand, activate, contract.
pub fn ffn<'g, S: Scalar>(x: Var<'g, S>, p: &FfnParams<'g, S>, act: Activation) -> Var<'g, S> {
    let h = x.matmul(p.w1).add_bias_row(p.b1);
    let h = match act {
        Activation::Relu => h.relu(),
        Activation::Gelu => h.gelu(),
        Activation::Identity => h,
    };
    h.matmul(p.w2).add_bias_row(p.b2)
}

/// Scale all gradients by `max_norm / global_l2` when the global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut ParamMap<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for t in grads.values() {
        for &v in t.data() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::from_f64(max_norm / norm);
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Identity helper that pins a closure to the higher-ranked signature
/// [`eval_with_grads`] expects; inference needs the nudge when the closure
/// is stored in a binding first.
pub fn loss_builder<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph<f64>, &BTreeMap<String, Var<'g, f64>>) -> Var<'g, f64>,
{
    f
}

/// Evaluate a loss builder once: returns the loss value and the gradient of
/// every named leaf. The builder receives a fresh graph plus one tracked
/// leaf per parameter.
pub fn eval_with_grads<F>(params: &ParamMap<f64>, build: F) -> Result<(f64, ParamMap<f64>)>
where
    F: for<'g> Fn(&'g Graph<f64>, &BTreeMap<String, Var<'g, f64>>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: BTreeMap<String, Var<'_, f64>> =
        params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone()))).collect();
    let loss = build(&g, &vars);
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|(k, v)| {
            let grad = g
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(params[k].shape().to_vec()));
            (k.clone(), grad)
        })
        .collect();
    Ok((value, grads))
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the loss is locally non-smooth there
    /// (an FD step straddles a ReLU-style kink).
    pub skipped_nonsmooth: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

/// Compare analytic gradients against central finite differences.
///
/// Perturbs up to `max_coords` randomly chosen coordinates per tensor
/// (all of them when the tensor is small enough) with step `h` and reports
/// the worst relative error `|a-n| / max(|a|+|n|, 1e-6)`.
///
/// A central difference is only a valid probe where the loss is smooth
/// over the whole `[x-h, x+h]` interval; a piecewise-linear activation
/// whose breakpoint falls inside the interval produces an estimate that
/// no correct gradient could match. Each coordinate is therefore probed
/// at both `h` and `h/2`: for a smooth loss the two estimates agree to
/// `O(h^2)`, while a straddled kink leaves an order-one discrepancy, and
/// such coordinates are skipped. The gate compares the two numeric
/// estimates only — never the analytic value — so a genuinely wrong
/// gradient still fails on every smooth coordinate.
pub fn finite_diff_check(
    params: &ParamMap<f64>,
    grads: &ParamMap<f64>,
    loss_fn: &mut dyn FnMut(&ParamMap<f64>) -> f64,
    h: f64,
    max_coords: usize,
    rng: &mut ErgRng,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut work = params.clone();
    for (name, base) in params {
        let analytic = &grads[name];
        let n = base.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, max_coords).into_vec()
        };
        for i in coords {
            let orig = base.data()[i];
            let mut central = |step: f64| {
                work.get_mut(name).unwrap().data_mut()[i] = orig + step;
                let up = loss_fn(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig - step;
                let down = loss_fn(&work);
                (up - down) / (2.0 * step)
            };
            let numeric = central(h);
            let numeric_half = central(h / 2.0);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let consistency =
                (numeric - numeric_half).abs() / (numeric.abs() + numeric_half.abs()).max(1e-6);
            if consistency > 1e-3 {
                report.skipped_nonsmooth += 1;
                continue;
            }
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    report
}

/// One entry of the primitive gradient-check suite.
pub struct SuiteCase {
    pub name: &'static str,
    make: fn(&mut ErgRng) -> ParamMap<f64>,
    build: for<'g> fn(&'g Graph<f64>, &BTreeMap<String, Var<'g, f64>>, u64) -> Var<'g, f64>,
}

fn uni(rng: &mut ErgRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(&mut t, lo, hi);
    t
}

/// Weighted-sum readout so every output element influences the scalar loss.
fn readout<'g>(out: Var<'g, f64>, r: Var<'g, f64>) -> Var<'g, f64> {
    out.hadamard(r).sum()
}

/// The finite-difference suite: every differentiable primitive plus the
/// composite attention/FFN/convolution builders, each wired into a scalar
/// loss through a random readout tensor that is itself checked.
pub fn grad_suite_cases() -> Vec<SuiteCase> {
    vec![
        SuiteCase {
            name: "add",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].add(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "sub",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![2, 5], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![2, 5], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![2, 5], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].sub(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "hadamard",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![4, 3], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![4, 3], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![4, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].hadamard(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "scale",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![6], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![6], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].scale(-2.5), v["r"]),
        },
        SuiteCase {
            name: "relu",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![9], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![9], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].relu(), v["r"]),
        },
        SuiteCase {
            name: "gelu",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![9], -2.0, 2.0)),
                    ("r".into(), uni(rng, vec![9], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].gelu(), v["r"]),
        },
        SuiteCase {
            name: "matmul",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![4, 2], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![3, 2], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].matmul(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "transpose",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 5], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![5, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].transpose(), v["r"]),
        },
        SuiteCase {
            name: "reshape",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![2, 6], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].reshape(&[2, 6]), v["r"]),
        },
        SuiteCase {
            name: "slice_cols",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![4, 6], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![4, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].slice_cols(1, 4), v["r"]),
        },
        SuiteCase {
            name: "concat_cols",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 2], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![3, 6], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].concat_cols(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "mean_rows",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![5, 3], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![1, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].mean_rows(), v["r"]),
        },
        SuiteCase {
            name: "sum",
            make: |rng| [("a".into(), uni(rng, vec![4, 4], -1.0, 1.0))].into(),
            build: |_, v, _| v["a"].sum(),
        },
        SuiteCase {
            name: "add_bias_row",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![4], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].add_bias_row(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "add_chan_bias",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![2, 3, 3], -1.0, 1.0)),
                    ("b".into(), uni(rng, vec![2], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![2, 3, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].add_chan_bias(v["b"]), v["r"]),
        },
        SuiteCase {
            name: "softmax_rows",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 5], -2.0, 2.0)),
                    ("r".into(), uni(rng, vec![3, 5], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].softmax_rows(), v["r"]),
        },
        SuiteCase {
            name: "log_softmax_rows",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 5], -2.0, 2.0)),
                    ("r".into(), uni(rng, vec![3, 5], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].log_softmax_rows(), v["r"]),
        },
        SuiteCase {
            name: "layer_norm",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![4, 6], -2.0, 2.0)),
                    ("gamma".into(), uni(rng, vec![6], 0.5, 1.5)),
                    ("beta".into(), uni(rng, vec![6], -0.5, 0.5)),
                    ("r".into(), uni(rng, vec![4, 6], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].layer_norm(v["gamma"], v["beta"], 1e-6), v["r"]),
        },
        SuiteCase {
            name: "layer_norm_channels",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![3, 4, 4], -2.0, 2.0)),
                    ("gamma".into(), uni(rng, vec![3], 0.5, 1.5)),
                    ("beta".into(), uni(rng, vec![3], -0.5, 0.5)),
                    ("r".into(), uni(rng, vec![3, 4, 4], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| {
                readout(v["a"].layer_norm_channels(v["gamma"], v["beta"], 1e-6), v["r"])
            },
        },
        SuiteCase {
            name: "im2col",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![2, 5, 5], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![2 * 2 * 2, 3 * 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].im2col(2, 2, 2, 1), v["r"]),
        },
        SuiteCase {
            name: "conv2d",
            make: |rng| {
                [
                    ("x".into(), uni(rng, vec![2, 5, 5], -1.0, 1.0)),
                    ("k".into(), uni(rng, vec![3, 2, 3, 3], -0.5, 0.5)),
                    ("r".into(), uni(rng, vec![3, 3, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["x"].conv2d(v["k"], 2, 1), v["r"]),
        },
        SuiteCase {
            name: "adaptive_avg_pool",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![2, 5, 7], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![2, 3, 3], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| readout(v["a"].adaptive_avg_pool(3, 3), v["r"]),
        },
        SuiteCase {
            name: "dropout",
            make: |rng| {
                [
                    ("a".into(), uni(rng, vec![6, 6], -1.0, 1.0)),
                    ("r".into(), uni(rng, vec![6, 6], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, seed| {
                // Same derived stream every rebuild, so the mask is fixed
                // while finite differences wiggle the inputs.
                let mut rng = ErgRng::seed(seed).stream(77);
                readout(v["a"].dropout(0.3, true, &mut rng), v["r"])
            },
        },
        SuiteCase {
            name: "mha",
            make: |rng| {
                let d = 6;
                [
                    ("q".into(), uni(rng, vec![2, d], -1.0, 1.0)),
                    ("k".into(), uni(rng, vec![3, d], -1.0, 1.0)),
                    ("v".into(), uni(rng, vec![3, d], -1.0, 1.0)),
                    ("wq".into(), uni(rng, vec![d, d], -0.5, 0.5)),
                    ("bq".into(), uni(rng, vec![d], -0.1, 0.1)),
                    ("wk".into(), uni(rng, vec![d, d], -0.5, 0.5)),
                    ("bk".into(), uni(rng, vec![d], -0.1, 0.1)),
                    ("wv".into(), uni(rng, vec![d, d], -0.5, 0.5)),
                    ("bv".into(), uni(rng, vec![d], -0.1, 0.1)),
                    ("wo".into(), uni(rng, vec![d, d], -0.5, 0.5)),
                    ("bo".into(), uni(rng, vec![d], -0.1, 0.1)),
                    ("r".into(), uni(rng, vec![2, d], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| {
                let p = AttnParams {
                    wq: v["wq"], bq: v["bq"],
                    wk: v["wk"], bk: v["bk"],
                    wv: v["wv"], bv: v["bv"],
                    wo: v["wo"], bo: v["bo"],
                };
                let (out, _) = mha(v["q"], v["k"], v["v"], 2, &p).unwrap();
                readout(out, v["r"])
            },
        },
        SuiteCase {
            name: "ffn",
            make: |rng| {
                [
                    ("x".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                    ("w1".into(), uni(rng, vec![4, 8], -0.5, 0.5)),
                    ("b1".into(), uni(rng, vec![8], -0.1, 0.1)),
                    ("w2".into(), uni(rng, vec![8, 4], -0.5, 0.5)),
                    ("b2".into(), uni(rng, vec![4], -0.1, 0.1)),
                    ("r".into(), uni(rng, vec![3, 4], -1.0, 1.0)),
                ]
                .into()
            },
            build: |_, v, _| {
                let p = FfnParams { w1: v["w1"], b1: v["b1"], w2: v["w2"], b2: v["b2"] };
                readout(ffn(v["x"], &p, Activation::Gelu), v["r"])
            },
        },
    ]
}

/// Run the whole primitive suite: for each case, `n_seeds` random draws,
/// full-coordinate central differences. Returns (name, worst relative
/// error) pairs.
pub fn primitive_grad_suite(n_seeds: u64, h: f64) -> Vec<(&'static str, f64)> {
    grad_suite_cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for seed in 0..n_seeds {
                let mut rng = ErgRng::seed(0xE5C4_0000 + seed);
                let params = (case.make)(&mut rng);
                let (_, grads) = eval_with_grads(&params, |g, v| (case.build)(g, v, seed))
                    .expect("suite losses are scalar");
                let report = finite_diff_check(
                    &params,
                    &grads,
                    &mut |p| {
                        eval_with_grads(p, |g, v| (case.build)(g, v, seed))
                            .expect("suite losses are scalar")
                            .0
                    },
                    h,
                    usize::MAX,
                    &mut rng,
                );
                worst = worst.max(report.max_rel_err);
            }
            (case.name, worst)
        })
        .collect()
}
