//! Quality-classification backbone and the feature/style distances built
//! on it.
//!
//! A small VGG-style convolutional classifier is trained on quality-labeled
//! fundus images (cross-entropy over {good, usable, reject}), then frozen.
//! Feature maps are tapped at the pool outputs of every block past the stem
//! (strides 4, 8, 16, 32 for the default five-block net) and drive two
//! distances: the mean squared feature difference and the mean squared
//! difference of channel Gram matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{stack, Axis, Ix2, Ix4, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::kernels as k;
use crate::nn::{Bind, Conv2d, Linear, Params};
use crate::optim::Adam;
use crate::tape::{Arr, Node, Tape};

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel width of each block; every block ends in a 2x2 max pool.
    pub widths: Vec<usize>,
    /// 3x3 conv + ReLU repetitions per block.
    pub convs_per_block: usize,
    /// Number of quality classes.
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: vec![16, 32, 64, 128, 256], convs_per_block: 2, classes: 3 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(CoreError::Config(
                "backbone needs at least two blocks (one stem, one tap)".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::Config("backbone widths must be positive".into()));
        }
        if self.convs_per_block < 1 {
            return Err(CoreError::Config("convs_per_block must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::Config("need at least two quality classes".into()));
        }
        Ok(())
    }

    /// Minimum input side so every pool output stays non-empty.
    pub fn min_side(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Debug, Clone)]
struct BbBlock {
    convs: Vec<Conv2d>,
}

/// The backbone plus its classifier head. `frozen` flips after [`Self::fit`];
/// the GAN trainers never step a frozen extractor's parameters.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: BackboneConfig,
    params: Params,
    blocks: Vec<BbBlock>,
    head: Linear,
    frozen: bool,
}

impl FeatureExtractor {
    pub fn build<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<FeatureExtractor> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut blocks = Vec::with_capacity(cfg.widths.len());
        let mut cin = 3;
        for (b, &cout) in cfg.widths.iter().enumerate() {
            let convs = (0..cfg.convs_per_block)
                .map(|i| {
                    let conv = Conv2d::new(
                        &mut params,
                        &format!("block{b}.conv{i}"),
                        cin,
                        cout,
                        3,
                        1,
                        1,
                        1,
                        rng,
                    );
                    cin = cout;
                    conv
                })
                .collect();
            blocks.push(BbBlock { convs });
        }
        let head = Linear::new(&mut params, "head", *cfg.widths.last().unwrap(), cfg.classes, rng);
        Ok(FeatureExtractor { cfg, params, blocks, head, frozen: false })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the extractor frozen without training (e.g. after loading a
    /// trained checkpoint).
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn bind(&self, tape: &mut Tape) -> Bind {
        self.params.bind(tape)
    }

    pub fn tap_count(&self) -> usize {
        self.cfg.widths.len() - 1
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(CoreError::Shape(format!(
                "feature extractor expects (B, 3, H, W) input, got {shape:?}"
            )));
        }
        let min = self.cfg.min_side();
        if shape[2] < min || shape[3] < min {
            return Err(CoreError::Shape(format!(
                "input {}x{} too small for {} pooling stages (need >= {min})",
                shape[2],
                shape[3],
                self.cfg.widths.len()
            )));
        }
        Ok(())
    }

    /// Tap feature nodes for a batch already on the tape. Taps are the pool
    /// outputs of every block after the stem.
    pub fn features_t(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Vec<Node> {
        let mut taps = Vec::with_capacity(self.tap_count());
        let mut h = x;
        for (b, block) in self.blocks.iter().enumerate() {
            for conv in &block.convs {
                h = conv.forward(tape, bind, h);
                h = tape.relu(h);
            }
            h = tape.maxpool2(h);
            if b > 0 {
                taps.push(h);
            }
        }
        taps
    }

    /// Class logits for a batch already on the tape.
    pub fn logits_t(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        let mut h = x;
        for block in &self.blocks {
            for conv in &block.convs {
                h = conv.forward(tape, bind, h);
                h = tape.relu(h);
            }
            h = tape.maxpool2(h);
        }
        let pooled = tape.global_avgpool(h);
        self.head.forward(tape, bind, pooled)
    }

    /// Eager tap features for inference-time loss evaluation.
    pub fn features_eval(&self, batch: &Arr) -> Result<Vec<Arr>> {
        self.check_input(batch.shape())?;
        let mut taps = Vec::with_capacity(self.tap_count());
        let mut h = batch.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            for conv in &block.convs {
                h = conv.forward_eval(&self.params, &h);
                h.mapv_inplace(|v| v.max(0.0));
            }
            h = k::maxpool2_fwd(&h).0;
            if b > 0 {
                taps.push(h.clone());
            }
        }
        Ok(taps)
    }

    /// Predicted class index per image.
    pub fn classify(&self, batch: &Arr) -> Result<Vec<usize>> {
        let taps = self.features_eval(batch)?;
        let last = taps.last().expect("at least one tap");
        let l4 = last.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, _, _) = l4.dim();
        let mut pooled = Arr::zeros(IxDyn(&[n, c]));
        for bi in 0..n {
            for ci in 0..c {
                pooled[[bi, ci]] = l4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).mean().unwrap();
            }
        }
        let w = self.params.value(self.head.w).view().into_dimensionality::<Ix2>().unwrap();
        let b = self.params.value(self.head.b);
        let p2 = pooled.view().into_dimensionality::<Ix2>().unwrap();
        let logits = p2.dot(&w.t());
        Ok((0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for kk in 0..self.cfg.classes {
                    let v = logits[[i, kk]] + b[[kk]];
                    if v > best_v {
                        best_v = v;
                        best = kk;
                    }
                }
                best
            })
            .collect())
    }

    /// Trains the classifier with cross-entropy and freezes the extractor.
    ///
    /// `images` is (N, 3, H, W) with one label per image. Labels must cover
    /// at least two classes, otherwise the features cannot encode quality.
    pub fn fit<R: Rng>(
        &mut self,
        images: &Arr,
        labels: &[usize],
        epochs: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<()> {
        if self.frozen {
            return Err(CoreError::Config("feature extractor is already frozen".into()));
        }
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        if n == 0 || labels.len() != n {
            return Err(CoreError::DegenerateLabels(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        let distinct: BTreeSet<usize> = labels.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(CoreError::DegenerateLabels(format!(
                "need at least two quality classes, got {}",
                distinct.len()
            )));
        }
        if let Some(&max) = distinct.iter().next_back() {
            if max >= self.cfg.classes {
                return Err(CoreError::Range(format!(
                    "label {max} exceeds class count {}",
                    self.cfg.classes
                )));
            }
        }
        if batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }

        let mut adam = Adam::new(&self.params, 0.9, 0.999);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size) {
                let views: Vec<_> = chunk.iter().map(|&i| images.index_axis(Axis(0), i)).collect();
                let xb = stack(Axis(0), &views)
                    .map_err(|e| CoreError::Shape(format!("batch gather failed: {e}")))?;
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

                let mut tape = Tape::new();
                let bind = self.params.bind(&mut tape);
                let xn = tape.constant(xb.into_dyn());
                let logits = self.logits_t(&mut tape, &bind, xn);
                let loss = tape.cross_entropy_logits(logits, &yb);
                let mut grads = tape.backward(loss);
                let per_param: Vec<Option<Arr>> =
                    bind.nodes().iter().map(|&nd| grads.take(nd)).collect();
                adam.step(&mut self.params, &per_param, lr)?;
            }
        }
        self.frozen = true;
        Ok(())
    }

    /// Feature and style distances between two image batches of equal shape:
    /// per tap the mean squared feature difference and the mean squared
    /// channel-Gram difference, each averaged over taps.
    pub fn fp_loss_batch(&self, out: &Arr, reference: &Arr) -> Result<(f64, f64)> {
        if out.shape() != reference.shape() {
            return Err(CoreError::Shape(format!(
                "fp_loss shapes differ: {:?} vs {:?}",
                out.shape(),
                reference.shape()
            )));
        }
        let taps_a = self.features_eval(out)?;
        let taps_b = self.features_eval(reference)?;
        let mut fp = 0.0;
        let mut style = 0.0;
        for (a, b) in taps_a.iter().zip(&taps_b) {
            let n = a.len() as f64;
            let mut acc = 0.0;
            ndarray::Zip::from(a).and(b).for_each(|&x, &y| acc += (x - y) * (x - y));
            fp += acc / n;

            let (ga, gb) = (gram(a), gram(b));
            let gn = ga.len() as f64;
            let mut gacc = 0.0;
            ndarray::Zip::from(&ga).and(&gb).for_each(|&x, &y| gacc += (x - y) * (x - y));
            style += gacc / gn;
        }
        let t = taps_a.len() as f64;
        Ok((fp / t, style / t))
    }

    /// Single-image convenience wrapper around [`Self::fp_loss_batch`].
    pub fn fp_loss(&self, out: &Image, reference: &Image) -> Result<(f64, f64)> {
        let a = out.to_chw().insert_axis(Axis(0));
        let b = reference.to_chw().insert_axis(Axis(0));
        self.fp_loss_batch(&a, &b)
    }

    /// Tape-side feature and style terms against fixed reference taps
    /// (computed once with [`Self::features_eval`]); gradients flow through
    /// `out` only. Returns (feature term, style term), each averaged over
    /// taps.
    pub fn fp_terms_t(
        &self,
        tape: &mut Tape,
        bind: &Bind,
        out: Node,
        ref_taps: &[Arr],
    ) -> (Node, Node) {
        let taps = self.features_t(tape, bind, out);
        assert_eq!(taps.len(), ref_taps.len(), "tap count mismatch");
        let wt = 1.0 / taps.len() as f64;
        let mut fp_terms = Vec::with_capacity(taps.len());
        let mut style_terms = Vec::with_capacity(taps.len());
        for (&tap, rf) in taps.iter().zip(ref_taps) {
            let rn = tape.constant(rf.clone());
            fp_terms.push((tape.mse_mean(tap, rn), wt));

            let s = tape.shape(tap).to_vec();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let f3 = tape.reshape(tap, &[b, c, h * w]);
            let g = tape.bmm_nt(f3, f3);
            let g = tape.scale(g, 1.0 / (h * w) as f64);
            let rg = tape.constant(gram(rf));
            style_terms.push((tape.mse_mean(g, rg), wt));
        }
        (tape.weighted_sum(&fp_terms), tape.weighted_sum(&style_terms))
    }
}

/// Channel Gram matrices of a feature batch: for each image,
/// `G[a, b] = (1 / (H * W)) * sum_ij f[a, i, j] * f[b, i, j]`.
pub fn gram(features: &Arr) -> Arr {
    let f4 = features.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = f4.dim();
    let hw = (h * w) as f64;
    let mut out = Arr::zeros(IxDyn(&[n, c, c]));
    for bi in 0..n {
        let img = f4.index_axis(Axis(0), bi);
        let m = img.into_shape_with_order((c, h * w)).expect("contiguous feature map");
        let mut o = out.index_axis_mut(Axis(0), bi);
        let mut o2 = o.view_mut().into_dimensionality::<Ix2>().unwrap();
        general_mat_mul(1.0 / hw, &m, &m.t(), 0.0, &mut o2);
    }
    out
}
