//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every operation applied to [`Node`]s in execution
//! order. [`Tape::backward`] replays the records in reverse, accumulating
//! `dL/dnode` for every node on the path from the loss to the leaves. Leaves
//! are either owned constants or shared views of model parameters (see
//! [`crate::nn::Params::bind`]), so stepping an optimizer never copies
//! parameter tensors onto the tape.
//!
//! All values are `f64` tensors with dynamic shape ([`Arr`]). Operations
//! panic on shape disagreement — model code constructs shapes
//! deterministically, and public entry points validate their inputs before
//! touching the tape.

use crate::kernels as k;
use crate::kernels::Conv2dSpec;
use ndarray::{Axis, IxDyn, Zip};
use std::sync::Arc;

/// Dynamic-shape `f64` tensor used throughout the crate.
pub type Arr = ndarray::ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

enum Value {
    Owned(Arr),
    Shared(Arc<Arr>),
}

type BackFn = Box<dyn FnOnce(&Tape, &Arr, &mut Grads)>;

struct TapeNode {
    value: Value,
    back: Option<BackFn>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Arr>>,
}

impl Grads {
    /// Gradient of the loss with respect to `n`, if `n` influenced it.
    pub fn get(&self, n: Node) -> Option<&Arr> {
        self.slots[n.0].as_ref()
    }

    /// Removes and returns the gradient for `n`.
    pub fn take(&mut self, n: Node) -> Option<Arr> {
        self.slots[n.0].take()
    }

    fn accum(&mut self, n: Node, delta: Arr) {
        match &mut self.slots[n.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape());
                *acc += &delta;
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Operation recorder; see the module docs.
pub struct Tape {
    nodes: Vec<TapeNode>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values but no backward closures; used for
    /// inference where only the forward value is wanted.
    pub fn new_no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of `n`.
    pub fn value(&self, n: Node) -> &Arr {
        match &self.nodes[n.0].value {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }

    pub fn shape(&self, n: Node) -> &[usize] {
        self.value(n).shape()
    }

    /// The value of a zero-dimensional (scalar) node.
    pub fn scalar(&self, n: Node) -> f64 {
        let v = self.value(n);
        debug_assert_eq!(v.len(), 1, "scalar() called on a non-scalar node");
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Value, back: Option<BackFn>) -> Node {
        self.nodes.push(TapeNode { value, back });
        Node(self.nodes.len() - 1)
    }

    /// Records a leaf with no gradient flowing out of it.
    pub fn constant(&mut self, value: Arr) -> Node {
        self.push(Value::Owned(value), None)
    }

    /// Records a leaf that aliases externally owned storage (a parameter).
    /// Gradients accumulate on the node like any other; the caller extracts
    /// them by node handle after [`Tape::backward`].
    pub fn leaf_shared(&mut self, value: Arc<Arr>) -> Node {
        self.push(Value::Shared(value), None)
    }

    fn push_op(&mut self, value: Arr, back: BackFn) -> Node {
        let back = self.grad_enabled.then_some(back);
        self.push(Value::Owned(value), back)
    }

    /// Reverse sweep from `root` (normally a scalar loss; the seed gradient
    /// is all-ones of the root's shape).
    pub fn backward(&mut self, root: Node) -> Grads {
        let mut backs: Vec<Option<BackFn>> =
            self.nodes.iter_mut().map(|n| n.back.take()).collect();
        let mut grads = Grads { slots: (0..self.nodes.len()).map(|_| None).collect() };
        grads.accum(root, Arr::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(back) = backs[i].take() else { continue };
            // Nodes off the path to the root never receive a gradient.
            let Some(g) = grads.slots[i].take() else { continue };
            back(self, &g, &mut grads);
        }
        grads
    }

    // ---- elementwise & structural ----------------------------------------

    /// A constant copy of `n`'s value: gradients stop here.
    pub fn detach(&mut self, n: Node) -> Node {
        let v = self.value(n).clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(a, g.clone());
                sink.accum(b, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(a, g.clone());
                sink.accum(b, g.mapv(|x| -x));
            }),
        )
    }

    pub fn scale(&mut self, a: Node, s: f64) -> Node {
        let v = self.value(a).mapv(|x| x * s);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(a, g.mapv(|x| x * s));
            }),
        )
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * n_i`.
    pub fn weighted_sum(&mut self, terms: &[(Node, f64)]) -> Node {
        let mut acc = 0.0;
        for (n, w) in terms {
            acc += self.scalar(*n) * w;
        }
        let terms: Vec<(Node, f64)> = terms.to_vec();
        self.push_op(
            Arr::from_elem(IxDyn(&[]), acc),
            Box::new(move |_t, g, sink| {
                let gs = g.iter().next().copied().unwrap();
                for (n, w) in &terms {
                    sink.accum(*n, Arr::from_elem(IxDyn(&[]), gs * w));
                }
            }),
        )
    }

    /// Mean over every element, yielding a scalar node.
    pub fn mean_all(&mut self, a: Node) -> Node {
        let va = self.value(a);
        let n = va.len() as f64;
        let v = Arr::from_elem(IxDyn(&[]), va.sum() / n);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let gs = g.iter().next().copied().unwrap() / n;
                sink.accum(a, Arr::from_elem(t.value(a).raw_dim(), gs));
            }),
        )
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_c(&mut self, a: Node, b: Node) -> Node {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 4, "concat_c expects NCHW");
        assert_eq!(
            (&sa[0], &sa[2..]),
            (&sb[0], &sb[2..]),
            "concat_c: batch/spatial mismatch"
        );
        let mut v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shapes agree");
        if !v.is_standard_layout() {
            v = v.as_standard_layout().into_owned();
        }
        let ca = sa[1];
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                sink.accum(a, ga.into_dyn());
                sink.accum(b, gb.into_dyn());
            }),
        )
    }

    /// Reshape to `shape` (element count preserved; value is copied).
    pub fn reshape(&mut self, a: Node, shape: &[usize]) -> Node {
        let old: Vec<usize> = self.shape(a).to_vec();
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                let gr = g.clone().into_shape_with_order(IxDyn(&old)).unwrap();
                sink.accum(a, gr);
            }),
        )
    }

    /// Takes `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, a: Node, start: usize, len: usize) -> Node {
        let rank = self.shape(a).len();
        let v = self
            .value(a)
            .slice_axis(Axis(rank - 1), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let mut gx = Arr::zeros(t.value(a).raw_dim());
                gx.slice_axis_mut(Axis(rank - 1), ndarray::Slice::from(start..start + len))
                    .assign(g);
                sink.accum(a, gx);
            }),
        )
    }

    // ---- activations ------------------------------------------------------

    pub fn relu(&mut self, a: Node) -> Node {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(t.value(a)).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
                sink.accum(a, gx);
            }),
        )
    }

    /// GELU with the tanh parameterization (the gradient is the exact
    /// derivative of the implemented forward).
    pub fn gelu(&mut self, a: Node) -> Node {
        let v = self.value(a).mapv(k::gelu_scalar);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(t.value(a)).for_each(|g, &x| {
                    *g *= k::gelu_grad_scalar(x);
                });
                sink.accum(a, gx);
            }),
        )
    }

    // ---- convolution & friends ---------------------------------------------

    /// Grouped 2D convolution over NCHW input with optional bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Node,
        w: Node,
        b: Option<Node>,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Node {
        let spec = Conv2dSpec { kh, kw, stride, pad, groups };
        let v = k::conv2d_fwd(self.value(x), self.value(w), b.map(|n| self.value(n)), &spec);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let in_shape = t.value(x).shape().to_vec();
                let w_shape = t.value(w).shape().to_vec();
                let gx = k::conv2d_bwd_input(t.value(w), g, &in_shape, &spec);
                let (gw, gb) = k::conv2d_bwd_params(t.value(x), g, &w_shape, b.is_some(), &spec);
                sink.accum(x, gx);
                sink.accum(w, gw);
                if let (Some(bn), Some(gb)) = (b, gb) {
                    sink.accum(bn, gb);
                }
            }),
        )
    }

    /// Affine map over the last axis: `y = x W^T + b` with `W: (Cout, Cin)`.
    pub fn linear(&mut self, x: Node, w: Node, b: Option<Node>) -> Node {
        let xs = self.shape(x).to_vec();
        let cin = *xs.last().unwrap();
        let (cout, wcin) = {
            let ws = self.shape(w);
            (ws[0], ws[1])
        };
        assert_eq!(cin, wcin, "linear: input/weight width mismatch");
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((rows, cin))
            .expect("linear input is contiguous");
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin))
            .unwrap();
        let mut out2 = ndarray::Array2::<f64>::zeros((rows, cout));
        ndarray::linalg::general_mat_mul(1.0, &x2, &w2.t(), 0.0, &mut out2);
        if let Some(bn) = b {
            let bv = self.value(bn).view().into_shape_with_order(cout).unwrap();
            out2 += &bv.insert_axis(Axis(0));
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = cout;
        let v = out2.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let g2 = g.view().into_shape_with_order((rows, cout)).unwrap();
                let x2 = t
                    .value(x)
                    .view()
                    .into_shape_with_order((rows, cin))
                    .unwrap();
                let w2 = t
                    .value(w)
                    .view()
                    .into_shape_with_order((cout, cin))
                    .unwrap();
                let mut gx2 = ndarray::Array2::<f64>::zeros((rows, cin));
                ndarray::linalg::general_mat_mul(1.0, &g2, &w2, 0.0, &mut gx2);
                let mut gw2 = ndarray::Array2::<f64>::zeros((cout, cin));
                ndarray::linalg::general_mat_mul(1.0, &g2.t(), &x2, 0.0, &mut gw2);
                sink.accum(
                    x,
                    gx2.into_dyn()
                        .into_shape_with_order(t.value(x).raw_dim())
                        .unwrap(),
                );
                sink.accum(w, gw2.into_dyn());
                if let Some(bn) = b {
                    sink.accum(bn, g2.sum_axis(Axis(0)).into_dyn());
                }
            }),
        )
    }

    /// Layer norm across the channel axis of an NCHW tensor.
    pub fn ln_channel(&mut self, x: Node, gamma: Node, beta: Node, eps: f64) -> Node {
        let v = k::ln_channel_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let (gx, gg, gb) = k::ln_channel_bwd(t.value(x), t.value(gamma), g, eps);
                sink.accum(x, gx);
                sink.accum(gamma, gg);
                sink.accum(beta, gb);
            }),
        )
    }

    /// Layer norm across the last axis of a token tensor.
    pub fn ln_last(&mut self, x: Node, gamma: Node, beta: Node, eps: f64) -> Node {
        let v = k::ln_last_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let (gx, gg, gb) = k::ln_last_bwd(t.value(x), t.value(gamma), g, eps);
                sink.accum(x, gx);
                sink.accum(gamma, gg);
                sink.accum(beta, gb);
            }),
        )
    }

    /// 2x2 stride-2 max pooling.
    pub fn maxpool2(&mut self, x: Node) -> Node {
        let (v, arg) = k::maxpool2_fwd(self.value(x));
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let in_shape = t.value(x).shape().to_vec();
                sink.accum(x, k::maxpool2_bwd(&arg, g, &in_shape));
            }),
        )
    }

    /// Mean over the spatial axes: NCHW -> (N, C).
    pub fn global_avgpool(&mut self, x: Node) -> Node {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let v = self
            .value(x)
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|s| s / (h * w) as f64);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Arr::zeros(IxDyn(&xs));
                for bi in 0..xs[0] {
                    for ci in 0..xs[1] {
                        let gv = g[[bi, ci]] * scale;
                        gx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(gv);
                    }
                }
                sink.accum(x, gx);
            }),
        )
    }

    /// Nearest-neighbour x2 upsampling of NCHW maps.
    pub fn upsample2(&mut self, x: Node) -> Node {
        let v = k::upsample2_fwd(self.value(x));
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(x, k::upsample2_bwd(g));
            }),
        )
    }

    /// Zero-pads the bottom/right of the spatial axes.
    pub fn pad_zero_br(&mut self, x: Node, add_h: usize, add_w: usize) -> Node {
        let xs = self.shape(x).to_vec();
        let mut v = Arr::zeros(IxDyn(&[xs[0], xs[1], xs[2] + add_h, xs[3] + add_w]));
        v.slice_mut(ndarray::s![.., .., 0..xs[2], 0..xs[3]])
            .assign(self.value(x));
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                let gx = g
                    .slice(ndarray::s![.., .., 0..xs[2], 0..xs[3]])
                    .to_owned()
                    .into_dyn();
                sink.accum(x, gx);
            }),
        )
    }

    /// Crops a spatial window starting at (top, left).
    pub fn crop2d(&mut self, x: Node, top: usize, left: usize, h: usize, w: usize) -> Node {
        let v = k::crop2d_fwd(self.value(x), top, left, h, w);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let in_shape = t.value(x).shape().to_vec();
                sink.accum(x, k::crop2d_bwd(g, &in_shape, top, left));
            }),
        )
    }

    /// Cyclic spatial shift (`torch.roll` semantics on H and W).
    pub fn roll2d(&mut self, x: Node, sy: isize, sx: isize) -> Node {
        let v = k::roll2d(self.value(x), sy, sx);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(x, k::roll2d(g, -sy, -sx));
            }),
        )
    }

    // ---- attention ---------------------------------------------------------

    /// `(B, C, H, W) -> (B * windows, win^2, C)`; H, W must divide by `win`.
    pub fn window_partition(&mut self, x: Node, win: usize) -> Node {
        let xs = self.shape(x).to_vec();
        assert!(
            xs[2] % win == 0 && xs[3] % win == 0,
            "window_partition: spatial dims must divide by the window"
        );
        let v = k::window_partition_fwd(self.value(x), win);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(x, k::window_partition_bwd(g, xs[0], xs[1], xs[2], xs[3], win));
            }),
        )
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, tokens: Node, b: usize, c: usize, h: usize, w: usize, win: usize) -> Node {
        let v = k::window_partition_bwd(self.value(tokens), b, c, h, w, win);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(tokens, k::window_partition_fwd(g, win));
            }),
        )
    }

    /// `(G, T, C) -> (G, heads, T, C / heads)`.
    pub fn split_heads(&mut self, x: Node, heads: usize) -> Node {
        let v = k::split_heads_fwd(self.value(x), heads);
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(x, k::merge_heads_fwd(g));
            }),
        )
    }

    /// `(G, heads, T, d) -> (G, T, heads * d)`.
    pub fn merge_heads(&mut self, x: Node) -> Node {
        let heads = self.shape(x)[1];
        let v = k::merge_heads_fwd(self.value(x));
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(x, k::split_heads_fwd(g, heads));
            }),
        )
    }

    /// Batched `a @ b` over a shared leading axis.
    pub fn bmm_nn(&mut self, a: Node, b: Node) -> Node {
        let v = k::bmm(self.value(a), self.value(b), false, false);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                sink.accum(a, k::bmm(g, t.value(b), false, true));
                sink.accum(b, k::bmm(t.value(a), g, true, false));
            }),
        )
    }

    /// Batched `a @ b^T` over a shared leading axis.
    pub fn bmm_nt(&mut self, a: Node, b: Node) -> Node {
        let v = k::bmm(self.value(a), self.value(b), false, true);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                sink.accum(a, k::bmm(g, t.value(b), false, false));
                sink.accum(b, k::bmm(g, t.value(a), true, false));
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Node) -> Node {
        let v = k::softmax_last_fwd(self.value(x));
        let out = self.push_op(
            v,
            Box::new(move |_t, _g, _sink| unreachable!("replaced below")),
        );
        // The backward needs the op's own output; rebuild the closure now
        // that the output node exists.
        if self.grad_enabled {
            self.nodes[out.0].back = Some(Box::new(move |t, g, sink| {
                sink.accum(x, k::softmax_last_bwd(t.value(out), g));
            }));
        }
        out
    }

    /// Expands a relative-position-bias table `(R, heads)` to `(heads, T, T)`
    /// logits through a fixed pair-index map of length `T * T`.
    pub fn rpb_expand(&mut self, table: Node, index: Arc<Vec<usize>>, t_tokens: usize) -> Node {
        let v = k::rpb_expand_fwd(self.value(table), &index, t_tokens);
        self.push_op(
            v,
            Box::new(move |t, g, sink| {
                let shape = t.value(table).shape().to_vec();
                sink.accum(table, k::rpb_expand_bwd(g, &index, &shape));
            }),
        )
    }

    /// Adds `(heads, T, T)` bias logits to `(G, heads, T, T)` scores,
    /// broadcasting over the window axis.
    pub fn add_rpb(&mut self, scores: Node, bias: Node) -> Node {
        let sb = self.shape(bias).to_vec();
        let v = {
            let bview = self
                .value(bias)
                .view()
                .into_shape_with_order(IxDyn(&[1, sb[0], sb[1], sb[2]]))
                .unwrap();
            self.value(scores) + &bview
        };
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(scores, g.clone());
                sink.accum(bias, g.sum_axis(Axis(0)));
            }),
        )
    }

    /// Adds a constant attention mask `(nw, T, T)` to `(G, heads, T, T)`
    /// scores where window `g` uses mask row `g % nw`.
    pub fn add_mask(&mut self, scores: Node, mask: &Arr) -> Node {
        let ss = self.shape(scores).to_vec();
        let (gn, heads) = (ss[0], ss[1]);
        let nw = mask.shape()[0];
        let mut v = self.value(scores).clone();
        for g in 0..gn {
            let m = mask.index_axis(Axis(0), g % nw);
            for h in 0..heads {
                let mut s = v.index_axis_mut(Axis(0), g);
                let mut s = s.index_axis_mut(Axis(0), h);
                s += &m;
            }
        }
        self.push_op(
            v,
            Box::new(move |_t, g, sink| {
                sink.accum(scores, g.clone());
            }),
        )
    }

    // ---- losses -------------------------------------------------------------

    /// Mean squared difference, as a scalar node.
    pub fn mse_mean(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "mse_mean: shape mismatch");
        let n = self.value(a).len() as f64;
        let mut acc = 0.0;
        Zip::from(self.value(a)).and(self.value(b)).for_each(|&x, &y| {
            acc += (x - y) * (x - y);
        });
        self.push_op(
            Arr::from_elem(IxDyn(&[]), acc / n),
            Box::new(move |t, g, sink| {
                let gs = g.iter().next().copied().unwrap() * 2.0 / n;
                let diff = t.value(a) - t.value(b);
                sink.accum(a, diff.mapv(|d| d * gs));
                sink.accum(b, diff.mapv(|d| -d * gs));
            }),
        )
    }

    /// Smooth L1 (Huber at delta 1) averaged over all elements:
    /// `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1_mean(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "smooth_l1_mean: shape mismatch");
        let n = self.value(a).len() as f64;
        let mut acc = 0.0;
        Zip::from(self.value(a)).and(self.value(b)).for_each(|&x, &y| {
            let d = x - y;
            acc += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        });
        self.push_op(
            Arr::from_elem(IxDyn(&[]), acc / n),
            Box::new(move |t, g, sink| {
                let gs = g.iter().next().copied().unwrap() / n;
                let diff = t.value(a) - t.value(b);
                let ga = diff.mapv(|d| gs * if d.abs() < 1.0 { d } else { d.signum() });
                sink.accum(b, ga.mapv(|v| -v));
                sink.accum(a, ga);
            }),
        )
    }

    /// Binary cross-entropy on logits against constant targets, averaged:
    /// `mean(softplus(x) - t * x)`.
    pub fn bce_logits_mean(&mut self, logits: Node, targets: &Arr) -> Node {
        assert_eq!(self.shape(logits), targets.shape(), "bce: shape mismatch");
        let n = targets.len() as f64;
        let softplus = |x: f64| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        };
        let mut acc = 0.0;
        Zip::from(self.value(logits)).and(targets).for_each(|&x, &t| {
            acc += softplus(x) - t * x;
        });
        let targets = targets.clone();
        self.push_op(
            Arr::from_elem(IxDyn(&[]), acc / n),
            Box::new(move |t, g, sink| {
                let gs = g.iter().next().copied().unwrap() / n;
                let mut gx = t.value(logits).mapv(k::sigmoid_scalar);
                Zip::from(&mut gx).and(&targets).for_each(|p, &tv| {
                    *p = (*p - tv) * gs;
                });
                sink.accum(logits, gx);
            }),
        )
    }

    /// Multi-class cross entropy on `(N, K)` logits with integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Node, labels: &[usize]) -> Node {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy: logits must be (N, K)");
        let (n, kcls) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n, "cross_entropy: one label per row");
        assert!(labels.iter().all(|l| *l < kcls), "cross_entropy: label out of range");
        let v = self.value(logits);
        let mut acc = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..kcls).map(|c| v[[i, c]]).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            acc += lse - row[label];
        }
        let labels = labels.to_vec();
        self.push_op(
            Arr::from_elem(IxDyn(&[]), acc / n as f64),
            Box::new(move |t, g, sink| {
                let gs = g.iter().next().copied().unwrap() / n as f64;
                let v = t.value(logits);
                let mut gx = Arr::zeros(IxDyn(&[n, kcls]));
                for (i, &label) in labels.iter().enumerate() {
                    let row: Vec<f64> = (0..kcls).map(|c| v[[i, c]]).collect();
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..kcls {
                        let soft = exps[c] / sum;
                        gx[[i, c]] = gs * (soft - if c == label { 1.0 } else { 0.0 });
                    }
                }
                sink.accum(logits, gx);
            }),
        )
    }
}
