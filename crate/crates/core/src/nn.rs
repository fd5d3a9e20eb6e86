//! Named parameter storage and the small layer vocabulary shared by the
//! generator, discriminator and feature extractor.
//!
//! A model owns a [`Params`] store; layers hold [`Slot`] handles into it.
//! Binding a store to a [`Tape`] yields a [`Bind`] — one leaf node per
//! parameter, created once per tape so gradients from every use of a
//! parameter accumulate on a single node. Parameters live behind [`Arc`],
//! so binding never copies tensors; optimizers mutate them in place between
//! tapes via [`Params::value_mut`].

use crate::error::{CoreError, Result};
use crate::kernels as k;
use crate::tape::{Arr, Node, Tape};
use ndarray::IxDyn;
use rand::Rng;
use std::sync::Arc;

/// Handle to one named tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Arc<Arr>,
}

/// Ordered, name-addressed collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<Entry>,
}

/// Tape leaves for every parameter of a store, in store order.
pub struct Bind {
    nodes: Vec<Node>,
}

impl Bind {
    pub fn node(&self, slot: Slot) -> Node {
        self.nodes[slot.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> Slot {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, value: Arc::new(value) });
        Slot(self.entries.len() - 1)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn value(&self, slot: Slot) -> &Arr {
        &self.entries[slot.0].value
    }

    pub fn value_at(&self, index: usize) -> &Arr {
        &self.entries[index].value
    }

    /// Mutable access for optimizers. Copy-on-write: if a tape still aliases
    /// the tensor the data is cloned once.
    pub fn value_mut(&mut self, index: usize) -> &mut Arr {
        Arc::make_mut(&mut self.entries[index].value)
    }

    /// Replaces a tensor; shapes must match (used when loading checkpoints).
    pub fn set_value(&mut self, index: usize, value: Arr) -> Result<()> {
        if self.entries[index].value.shape() != value.shape() {
            return Err(CoreError::Shape(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.entries[index].name,
                self.entries[index].value.shape(),
                value.shape()
            )));
        }
        self.entries[index].value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.value.as_ref()))
    }

    /// Adds `delta` to one scalar element (used by finite-difference checks).
    pub fn nudge(&mut self, index: usize, elem: usize, delta: f64) {
        let v = self.value_mut(index);
        v.as_slice_mut().expect("parameters are standard layout")[elem] += delta;
    }

    /// Creates one tape leaf per parameter.
    pub fn bind(&self, tape: &mut Tape) -> Bind {
        Bind {
            nodes: self
                .entries
                .iter()
                .map(|e| tape.leaf_shared(Arc::clone(&e.value)))
                .collect(),
        }
    }
}

/// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the convention used
/// for every weight and bias in this crate.
pub fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Arr {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Grouped 2D convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: Slot,
    pub b: Option<Slot>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(cin % groups == 0 && cout % groups == 0, "{prefix}: groups must divide channels");
        let fan_in = (cin / groups) * kernel * kernel;
        let w = params.add(
            format!("{prefix}.w"),
            uniform_fan_in(&[cout, cin / groups, kernel, kernel], fan_in, rng),
        );
        let b = params.add(format!("{prefix}.b"), uniform_fan_in(&[cout], fan_in, rng));
        Conv2d { w, b: Some(b), kh: kernel, kw: kernel, stride, pad, groups }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        tape.conv2d(
            x,
            bind.node(self.w),
            self.b.map(|s| bind.node(s)),
            self.kh,
            self.kw,
            self.stride,
            self.pad,
            self.groups,
        )
    }

    /// Forward pass outside any tape, for inference.
    pub fn forward_eval(&self, params: &Params, x: &Arr) -> Arr {
        let spec = k::Conv2dSpec {
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            groups: self.groups,
        };
        k::conv2d_fwd(x, params.value(self.w), self.b.map(|s| params.value(s)), &spec)
    }
}

/// Layer norm over the channel axis of NCHW tensors.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormChannel {
    pub gamma: Slot,
    pub beta: Slot,
    eps: f64,
}

impl LayerNormChannel {
    pub fn new(params: &mut Params, prefix: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{prefix}.gamma"), Arr::ones(IxDyn(&[channels])));
        let beta = params.add(format!("{prefix}.beta"), Arr::zeros(IxDyn(&[channels])));
        LayerNormChannel { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        tape.ln_channel(x, bind.node(self.gamma), bind.node(self.beta), self.eps)
    }

    pub fn forward_eval(&self, params: &Params, x: &Arr) -> Arr {
        k::ln_channel_fwd(x, params.value(self.gamma), params.value(self.beta), self.eps)
    }
}

/// Layer norm over the last axis of token tensors.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormLast {
    pub gamma: Slot,
    pub beta: Slot,
    eps: f64,
}

impl LayerNormLast {
    pub fn new(params: &mut Params, prefix: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{prefix}.gamma"), Arr::ones(IxDyn(&[channels])));
        let beta = params.add(format!("{prefix}.beta"), Arr::zeros(IxDyn(&[channels])));
        LayerNormLast { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        tape.ln_last(x, bind.node(self.gamma), bind.node(self.beta), self.eps)
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{prefix}.w"), uniform_fan_in(&[cout, cin], cin, rng));
        let b = params.add(format!("{prefix}.b"), uniform_fan_in(&[cout], cin, rng));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        tape.linear(x, bind.node(self.w), Some(bind.node(self.b)))
    }
}
