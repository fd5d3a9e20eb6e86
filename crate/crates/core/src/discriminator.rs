//! Windowed self-attention realness classifier.
//!
//! A patch-embedding conv turns the image into a token grid; a stack of
//! stages applies window-based self-attention blocks (pre-norm, relative
//! position bias, shifted windows on every second block) separated by
//! stride-2 downsampling convs that double channels; a channel layer norm,
//! global average pooling and a linear head produce one realness logit per
//! image.
//!
//! Token grids whose sides are not window multiples are zero-padded on the
//! bottom/right for the attention blocks; padded positions are excluded via
//! the additive attention mask and cropped away before the next stage, so
//! they never leak into real tokens or the pooled logit.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::kernels as k;
use crate::nn::{Bind, Conv2d, LayerNormChannel, Linear, Params, Slot};
use crate::tape::{Arr, Node, Tape};

const MASK_OFF: f64 = -1e9;

/// Hyperparameters of the discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Number of attention stages; stage s runs at spatial stride
    /// `patch_embed * 2^s` with `embed_dim * 2^s` channels.
    pub stages: usize,
    /// Channel count after the patch embedding.
    pub embed_dim: usize,
    /// Window side length, in tokens.
    pub window: usize,
    /// Patch embedding stride, in pixels.
    pub patch_embed: usize,
    /// Attention head count per stage; must divide that stage's channels.
    pub heads_per_stage: Vec<usize>,
    /// Attention blocks per stage; even indices use plain windows, odd
    /// indices use windows shifted by half the window side.
    pub blocks_per_stage: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            stages: 4,
            embed_dim: 32,
            window: 8,
            patch_embed: 4,
            heads_per_stage: vec![1, 2, 4, 8],
            blocks_per_stage: 2,
        }
    }
}

impl DiscriminatorConfig {
    /// Preset paired with the restoration generator.
    pub fn res() -> Self {
        DiscriminatorConfig::default()
    }

    /// Preset paired with the synthesis generator: same shape, half width.
    pub fn syn() -> Self {
        DiscriminatorConfig { embed_dim: 16, ..DiscriminatorConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(CoreError::Config("discriminator needs at least one stage".into()));
        }
        if self.embed_dim < 1 || self.window < 1 || self.patch_embed < 1 {
            return Err(CoreError::Config(
                "embed_dim, window and patch_embed must be positive".into(),
            ));
        }
        if self.blocks_per_stage < 1 {
            return Err(CoreError::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.heads_per_stage.len() != self.stages {
            return Err(CoreError::Config(format!(
                "heads_per_stage has {} entries for {} stages",
                self.heads_per_stage.len(),
                self.stages
            )));
        }
        for (s, &h) in self.heads_per_stage.iter().enumerate() {
            let c = self.embed_dim << s;
            if h == 0 || c % h != 0 {
                return Err(CoreError::Config(format!(
                    "stage {s}: {h} heads must divide {c} channels"
                )));
            }
        }
        Ok(())
    }
}

/// One pre-norm window attention block followed by a pre-norm pointwise MLP,
/// both with residual connections.
#[derive(Debug, Clone)]
struct Wsb {
    norm1: LayerNormChannel,
    qkv: Linear,
    proj: Linear,
    rpb: Slot,
    norm2: LayerNormChannel,
    fc1: Conv2d,
    fc2: Conv2d,
    heads: usize,
    shifted: bool,
}

struct BlockCtx<'a> {
    batch: usize,
    channels: usize,
    hp: usize,
    wp: usize,
    win: usize,
    shift_y: usize,
    shift_x: usize,
    mask: Option<&'a Arr>,
    rpb_index: Arc<Vec<usize>>,
}

impl Wsb {
    fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        channels: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        let norm1 = LayerNormChannel::new(params, &format!("{prefix}.norm1"), channels);
        let qkv = Linear::new(params, &format!("{prefix}.qkv"), channels, 3 * channels, rng);
        let proj = Linear::new(params, &format!("{prefix}.proj"), channels, channels, rng);
        let r = 2 * window - 1;
        let rpb = params.add(
            format!("{prefix}.rpb"),
            Arr::zeros(ndarray::IxDyn(&[r * r, heads])),
        );
        let norm2 = LayerNormChannel::new(params, &format!("{prefix}.norm2"), channels);
        let fc1 =
            Conv2d::new(params, &format!("{prefix}.fc1"), channels, 4 * channels, 1, 1, 0, 1, rng);
        let fc2 =
            Conv2d::new(params, &format!("{prefix}.fc2"), 4 * channels, channels, 1, 1, 0, 1, rng);
        Wsb { norm1, qkv, proj, rpb, norm2, fc1, fc2, heads, shifted }
    }

    fn forward(&self, tape: &mut Tape, bind: &Bind, x: Node, ctx: &BlockCtx<'_>) -> Node {
        let (sy, sx) = if self.shifted {
            (ctx.shift_y as isize, ctx.shift_x as isize)
        } else {
            (0, 0)
        };
        let c = ctx.channels;
        let t_tokens = ctx.win * ctx.win;
        let d = c / self.heads;

        let mut n = self.norm1.forward(tape, bind, x);
        if sy != 0 || sx != 0 {
            n = tape.roll2d(n, -sy, -sx);
        }
        let tokens = tape.window_partition(n, ctx.win);
        let groups = tape.shape(tokens)[0];

        let qkv = self.qkv.forward(tape, bind, tokens);
        let q = tape.narrow_last(qkv, 0, c);
        let key = tape.narrow_last(qkv, c, c);
        let v = tape.narrow_last(qkv, 2 * c, c);
        let q = tape.split_heads(q, self.heads);
        let key = tape.split_heads(key, self.heads);
        let v = tape.split_heads(v, self.heads);
        let q = tape.reshape(q, &[groups * self.heads, t_tokens, d]);
        let key = tape.reshape(key, &[groups * self.heads, t_tokens, d]);
        let v = tape.reshape(v, &[groups * self.heads, t_tokens, d]);
        let q = tape.scale(q, 1.0 / (d as f64).sqrt());

        let scores = tape.bmm_nt(q, key);
        let scores = tape.reshape(scores, &[groups, self.heads, t_tokens, t_tokens]);
        let bias = tape.rpb_expand(bind.node(self.rpb), ctx.rpb_index.clone(), t_tokens);
        let mut scores = tape.add_rpb(scores, bias);
        if let Some(mask) = ctx.mask {
            scores = tape.add_mask(scores, mask);
        }
        let attn = tape.softmax_last(scores);
        let attn = tape.reshape(attn, &[groups * self.heads, t_tokens, t_tokens]);

        let out = tape.bmm_nn(attn, v);
        let out = tape.reshape(out, &[groups, self.heads, t_tokens, d]);
        let out = tape.merge_heads(out);
        let out = self.proj.forward(tape, bind, out);
        let mut out = tape.window_merge(out, ctx.batch, c, ctx.hp, ctx.wp, ctx.win);
        if sy != 0 || sx != 0 {
            out = tape.roll2d(out, sy, sx);
        }
        let x = tape.add(x, out);

        let n2 = self.norm2.forward(tape, bind, x);
        let f = self.fc1.forward(tape, bind, n2);
        let f = tape.gelu(f);
        let f = self.fc2.forward(tape, bind, f);
        tape.add(x, f)
    }
}

#[derive(Debug, Clone)]
struct DiscStage {
    /// Stride-2 conv entering the stage; absent for stage 0.
    down: Option<Conv2d>,
    blocks: Vec<Wsb>,
}

/// A built discriminator: config plus named parameter arrays.
#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    cfg: DiscriminatorConfig,
    params: Params,
    patch: Conv2d,
    stages: Vec<DiscStage>,
    final_norm: LayerNormChannel,
    head: Linear,
}

impl DiscriminatorModel {
    pub fn build<R: Rng>(cfg: DiscriminatorConfig, rng: &mut R) -> Result<DiscriminatorModel> {
        cfg.validate()?;
        let mut params = Params::new();
        let pe = cfg.patch_embed;
        let patch = Conv2d::new(&mut params, "patch", 3, cfg.embed_dim, pe, pe, 0, 1, rng);

        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let c = cfg.embed_dim << s;
            let down = if s == 0 {
                None
            } else {
                Some(Conv2d::new(&mut params, &format!("stage{s}.down"), c / 2, c, 2, 2, 0, 1, rng))
            };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    Wsb::new(
                        &mut params,
                        &format!("stage{s}.blk{b}"),
                        c,
                        cfg.heads_per_stage[s],
                        cfg.window,
                        b % 2 == 1,
                        rng,
                    )
                })
                .collect();
            stages.push(DiscStage { down, blocks });
        }

        let c_last = cfg.embed_dim << (cfg.stages - 1);
        let final_norm = LayerNormChannel::new(&mut params, "final_norm", c_last);
        let head = Linear::new(&mut params, "head", c_last, 1, rng);
        Ok(DiscriminatorModel { cfg, params, patch, stages, final_norm, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn bind(&self, tape: &mut Tape) -> Bind {
        self.params.bind(tape)
    }

    /// Token grid side lengths per stage for an H x W input, after the
    /// internal padding that keeps every stride whole.
    pub fn grid_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let ceil_div = |a: usize, b: usize| a.div_ceil(b);
        let mut out = Vec::with_capacity(self.cfg.stages);
        let mut gh = ceil_div(h, self.cfg.patch_embed);
        let mut gw = ceil_div(w, self.cfg.patch_embed);
        for s in 0..self.cfg.stages {
            if s > 0 {
                gh = ceil_div(gh, 2);
                gw = ceil_div(gw, 2);
            }
            out.push((gh, gw));
        }
        out
    }

    /// Training forward on a tape; returns one realness logit per image,
    /// shape (B,).
    pub fn forward_t(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        let s = tape.shape(x).to_vec();
        assert_eq!(s.len(), 4, "discriminator expects NCHW input");
        assert_eq!(s[1], 3, "discriminator expects RGB input");
        let (b, h, w) = (s[0], s[2], s[3]);
        assert!(b >= 1 && h >= 1 && w >= 1, "discriminator input has an empty axis");

        let pe = self.cfg.patch_embed;
        let (ph, pw) = ((pe - h % pe) % pe, (pe - w % pe) % pe);
        let x = if ph + pw > 0 { tape.pad_zero_br(x, ph, pw) } else { x };
        let mut feat = self.patch.forward(tape, bind, x);

        let win = self.cfg.window;
        let rpb_index = build_rpb_index(win);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                let fs = tape.shape(feat).to_vec();
                let (eh, ew) = (fs[2] % 2, fs[3] % 2);
                if eh + ew > 0 {
                    feat = tape.pad_zero_br(feat, eh, ew);
                }
                feat = down.forward(tape, bind, feat);
            }
            let fs = tape.shape(feat).to_vec();
            let (c, gh, gw) = (fs[1], fs[2], fs[3]);
            let (wh, ww) = ((win - gh % win) % win, (win - gw % win) % win);
            let (hp, wp) = (gh + wh, gw + ww);
            if wh + ww > 0 {
                feat = tape.pad_zero_br(feat, wh, ww);
            }
            let shift_y = if hp > win { win / 2 } else { 0 };
            let shift_x = if wp > win { win / 2 } else { 0 };
            let mask_plain = build_mask(hp, wp, gh, gw, win, 0, 0);
            let mask_shift = build_mask(hp, wp, gh, gw, win, shift_y, shift_x);
            for blk in &stage.blocks {
                let mask = if blk.shifted { mask_shift.as_ref() } else { mask_plain.as_ref() };
                let ctx = BlockCtx {
                    batch: b,
                    channels: c,
                    hp,
                    wp,
                    win,
                    shift_y,
                    shift_x,
                    mask,
                    rpb_index: rpb_index.clone(),
                };
                feat = blk.forward(tape, bind, feat, &ctx);
            }
            if wh + ww > 0 {
                feat = tape.crop2d(feat, 0, 0, gh, gw);
            }
        }

        let feat = self.final_norm.forward(tape, bind, feat);
        let pooled = tape.global_avgpool(feat);
        let logits = self.head.forward(tape, bind, pooled);
        tape.reshape(logits, &[b])
    }

    /// Realness probability per image, strictly inside (0, 1).
    pub fn predict(&self, batch: &Arr) -> Result<Vec<f64>> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(CoreError::Shape(format!(
                "discriminator expects (B, 3, H, W) input, got {s:?}"
            )));
        }
        if s.iter().any(|&d| d == 0) {
            return Err(CoreError::Shape("discriminator input has an empty axis".into()));
        }
        let mut tape = Tape::new_no_grad();
        let bind = self.bind(&mut tape);
        let xn = tape.constant(batch.clone());
        let logits = self.forward_t(&mut tape, &bind, xn);
        let v = tape.value(logits);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numerical("discriminator produced a non-finite logit".into()));
        }
        Ok(v.iter().map(|&x| k::sigmoid_scalar(x)).collect())
    }
}

/// Pair-index map into a relative-position-bias table for a square window:
/// entry (i, j) is the row index for the offset between tokens i and j.
fn build_rpb_index(win: usize) -> Arc<Vec<usize>> {
    let t = win * win;
    let r = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (iy, ix) = (i / win, i % win);
        for j in 0..t {
            let (jy, jx) = (j / win, j % win);
            let dy = (iy as isize - jy as isize + win as isize - 1) as usize;
            let dx = (ix as isize - jx as isize + win as isize - 1) as usize;
            idx.push(dy * r + dx);
        }
    }
    Arc::new(idx)
}

/// Additive attention mask for a padded (and possibly shifted) token grid.
///
/// Each position gets a region id: -1 for bottom/right alignment padding,
/// otherwise a per-axis band id that encodes which side of the cyclic shift
/// boundary the position came from. After applying the same roll the
/// features receive, tokens in the same window may only attend to tokens
/// with an equal id; all other pairs get a large negative logit. Returns
/// `None` when every pair is allowed, one `(windows, T, T)` mask otherwise.
fn build_mask(
    hp: usize,
    wp: usize,
    h_valid: usize,
    w_valid: usize,
    win: usize,
    shift_y: usize,
    shift_x: usize,
) -> Option<Arr> {
    let band = |p: usize, n: usize, s: usize| -> i64 {
        if s == 0 {
            0
        } else if p < n - win {
            0
        } else if p < n - s {
            1
        } else {
            2
        }
    };
    let mut rolled = vec![0i64; hp * wp];
    for y in 0..hp {
        for x in 0..wp {
            let sy = (y + shift_y) % hp;
            let sx = (x + shift_x) % wp;
            rolled[y * wp + x] = if sy >= h_valid || sx >= w_valid {
                -1
            } else {
                band(sy, hp, shift_y) * 3 + band(sx, wp, shift_x)
            };
        }
    }
    if rolled.iter().all(|&v| v == rolled[0]) {
        return None;
    }
    let (nh, nw) = (hp / win, wp / win);
    let t = win * win;
    let mut mask = Arr::zeros(ndarray::IxDyn(&[nh * nw, t, t]));
    for wy in 0..nh {
        for wx in 0..nw {
            let g = wy * nw + wx;
            for i in 0..t {
                let pi = (wy * win + i / win) * wp + wx * win + i % win;
                for j in 0..t {
                    let pj = (wy * win + j / win) * wp + wx * win + j % win;
                    if rolled[pi] != rolled[pj] {
                        mask[[g, i, j]] = MASK_OFF;
                    }
                }
            }
        }
    }
    Some(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::IxDyn;
    use rand::Rng;

    fn random_batch<R: Rng>(b: usize, h: usize, w: usize, rng: &mut R) -> Arr {
        Arr::from_shape_fn(IxDyn(&[b, 3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    fn small_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            stages: 2,
            embed_dim: 8,
            window: 4,
            patch_embed: 4,
            heads_per_stage: vec![1, 2],
            blocks_per_stage: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(DiscriminatorConfig::default().validate().is_ok());
        assert!(DiscriminatorConfig::syn().validate().is_ok());
        let bad = DiscriminatorConfig { heads_per_stage: vec![1, 2], ..Default::default() };
        assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
        let bad = DiscriminatorConfig { heads_per_stage: vec![5, 2, 4, 8], ..Default::default() };
        assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
        let bad = DiscriminatorConfig { stages: 0, heads_per_stage: vec![], ..Default::default() };
        assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut model = DiscriminatorModel::build(small_cfg(), &mut rng::seeded(1)).unwrap();
        for i in 0..model.params.len() {
            if model.params.name(i).starts_with("head.") {
                let zero = Arr::zeros(model.params.value_at(i).raw_dim());
                model.params_mut().set_value(i, zero).unwrap();
            }
        }
        let x = random_batch(3, 32, 24, &mut rng::seeded(2));
        let probs = model.predict(&x).unwrap();
        assert_eq!(probs, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn grid_sizes_follow_stride_arithmetic() {
        let model =
            DiscriminatorModel::build(DiscriminatorConfig::default(), &mut rng::seeded(3)).unwrap();
        let grids = model.grid_sizes(256, 256);
        assert_eq!(grids, vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        // 64x64 grid with window 8: 64 windows of 64 tokens.
        let (gh, gw) = grids[0];
        assert_eq!((gh / 8) * (gw / 8), 64);
        assert_eq!(8 * 8, 64);
    }

    #[test]
    fn probabilities_are_finite_and_open_interval() {
        let model = DiscriminatorModel::build(small_cfg(), &mut rng::seeded(5)).unwrap();
        let x = random_batch(3, 20, 28, &mut rng::seeded(6));
        let probs = model.predict(&x).unwrap();
        assert_eq!(probs.len(), 3);
        for p in probs {
            assert!(p > 0.0 && p < 1.0, "probability {p} outside (0,1)");
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let model = DiscriminatorModel::build(small_cfg(), &mut rng::seeded(7)).unwrap();
        let mut r = rng::seeded(8);
        let a = random_batch(1, 16, 16, &mut r);
        let b = random_batch(1, 16, 16, &mut r);
        let c = random_batch(1, 16, 16, &mut r);
        let stack = |xs: &[&Arr]| -> Arr {
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
        };
        let p_abc = model.predict(&stack(&[&a, &b, &c])).unwrap();
        let p_cab = model.predict(&stack(&[&c, &a, &b])).unwrap();
        for (x, y) in [(p_abc[0], p_cab[1]), (p_abc[1], p_cab[2]), (p_abc[2], p_cab[0])] {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        // Duplicated inputs give identical outputs.
        let p_aa = model.predict(&stack(&[&a, &a])).unwrap();
        assert!((p_aa[0] - p_aa[1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_rgb_input() {
        let model = DiscriminatorModel::build(small_cfg(), &mut rng::seeded(9)).unwrap();
        let x = Arr::zeros(IxDyn(&[1, 4, 16, 16]));
        assert!(matches!(model.predict(&x), Err(CoreError::Shape(_))));
    }

    #[test]
    fn preset_parameter_counts() {
        let res = DiscriminatorModel::build(DiscriminatorConfig::res(), &mut rng::seeded(0))
            .unwrap()
            .param_count();
        let syn = DiscriminatorModel::build(DiscriminatorConfig::syn(), &mut rng::seeded(0))
            .unwrap()
            .param_count();
        assert!(syn < res);
        // "Lightweight": well under the generators it trains against.
        assert!(res < 4_000_000, "default discriminator has {res} parameters");
    }

    /// With zero-initialized relative position bias, a window covering the
    /// whole (padded) grid and a window equal to the grid are the same
    /// attention pattern, so the padding mask must reproduce the unpadded
    /// result exactly.
    #[test]
    fn padding_mask_matches_unpadded_equivalent() {
        let base = DiscriminatorConfig {
            stages: 1,
            embed_dim: 4,
            window: 4,
            patch_embed: 4,
            heads_per_stage: vec![1],
            blocks_per_stage: 2,
        };
        let wide = DiscriminatorConfig { window: 8, ..base.clone() };
        // Same rng stream: the bias tables differ in size but both start at
        // zero and are not drawn from the stream.
        let m_base = DiscriminatorModel::build(base, &mut rng::seeded(11)).unwrap();
        let m_wide = DiscriminatorModel::build(wide, &mut rng::seeded(11)).unwrap();
        let x = random_batch(2, 16, 16, &mut rng::seeded(12)); // 4x4 token grid
        let p_base = m_base.predict(&x).unwrap();
        let p_wide = m_wide.predict(&x).unwrap();
        for (a, b) in p_base.iter().zip(&p_wide) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Hand-checked shifted-window mask on a 6x6 grid with window 2 and
    /// shift 1: the top-left window is fully interior (no masking) while
    /// the window straddling the wrap boundary splits into two bands.
    #[test]
    fn shifted_mask_hand_case() {
        let mask = build_mask(6, 6, 6, 6, 2, 1, 1).expect("shift needs a mask");
        assert_eq!(mask.shape(), &[9, 4, 4]);
        // Window (0,0): all four tokens share band (0,0).
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(mask[[0, i, j]], 0.0, "interior window must be unmasked");
            }
        }
        // Window (2,0) = group 6: rows come from bands 2 and 0, columns from
        // band 0 -> block-diagonal 2x2 structure.
        assert_eq!(mask[[6, 0, 1]], 0.0);
        assert_eq!(mask[[6, 2, 3]], 0.0);
        assert_eq!(mask[[6, 0, 2]], MASK_OFF);
        assert_eq!(mask[[6, 1, 3]], MASK_OFF);
        // Diagonal is always open; mask is symmetric.
        for g in 0..9 {
            for i in 0..4 {
                assert_eq!(mask[[g, i, i]], 0.0);
                for j in 0..4 {
                    assert_eq!(mask[[g, i, j]], mask[[g, j, i]]);
                }
            }
        }
        // No shift, no padding: no mask at all.
        assert!(build_mask(8, 8, 8, 8, 4, 0, 0).is_none());
    }

    #[test]
    fn same_seed_same_model() {
        let a = DiscriminatorModel::build(small_cfg(), &mut rng::seeded(21)).unwrap();
        let b = DiscriminatorModel::build(small_cfg(), &mut rng::seeded(21)).unwrap();
        let x = random_batch(2, 16, 16, &mut rng::seeded(22));
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    /// Analytic gradients of a BCE loss through the whole discriminator
    /// match central finite differences on a tiny config.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DiscriminatorConfig {
            stages: 1,
            embed_dim: 4,
            window: 2,
            patch_embed: 4,
            heads_per_stage: vec![1],
            blocks_per_stage: 2,
        };
        let model = DiscriminatorModel::build(cfg, &mut rng::seeded(31)).unwrap();
        let mut r = rng::seeded(32);
        let x = random_batch(2, 8, 8, &mut r);
        let targets = Arr::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap();

        let mut params = model.params.clone();
        let coords = crate::gradcheck::sample_coords(&params, 150, &mut r);

        let run = |p: &Params, want_grads: bool| -> (f64, Option<Vec<Option<Arr>>>) {
            let mut tape = if want_grads { Tape::new() } else { Tape::new_no_grad() };
            let bind = p.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let logits = model.forward_t(&mut tape, &bind, xn);
            let loss = tape.bce_logits_mean(logits, &targets);
            let value = tape.scalar(loss);
            if !want_grads {
                return (value, None);
            }
            let mut grads = tape.backward(loss);
            let per_param = bind.nodes().iter().map(|&n| grads.take(n)).collect();
            (value, Some(per_param))
        };

        let stats = crate::gradcheck::check_coords(
            &mut params,
            &coords,
            1e-3,
            1e-3,
            1e-6,
            &mut |p| run(p, false).0,
            &mut |p| run(p, true).1.unwrap(),
        );
        assert!(
            stats.pass_fraction() >= 0.95,
            "only {}/{} coords within tolerance (worst {:.3e})",
            stats.within,
            stats.checked,
            stats.worst
        );
    }
}
