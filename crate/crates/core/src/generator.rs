//! U-shaped dense-convolution generator.
//!
//! The generator maps an RGB image batch to an RGB image batch of the same
//! spatial size. It consists of an input projection, a stack of encoder
//! stages (dense conv blocks with an outer residual, then a stride-2
//! downsampling conv that doubles channels), a bottleneck, and a mirrored
//! decoder (nearest-neighbor upsampling, skip merge with the matching
//! encoder feature, dense conv blocks), finished by an output projection.
//!
//! Two forward paths are provided: a tape-based path for training and an
//! eager path for inference that frees intermediates as soon as possible so
//! full-resolution images fit in memory.

use ndarray::{concatenate, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::kernels as k;
use crate::nn::{Bind, Conv2d, LayerNormChannel, Params};
use crate::tape::{Arr, Node, Tape};

/// Hyperparameters of the generator. Parameter shapes are a pure function
/// of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of encoder/decoder stages; each stage halves the spatial size.
    pub stages: usize,
    /// Channel count of the initial feature produced by the input projection.
    pub width: usize,
    /// Dense conv blocks per encoder stage.
    pub blocks_per_encoder_stage: usize,
    /// Dense conv blocks per decoder stage.
    pub blocks_per_decoder_stage: usize,
    /// Dense conv blocks in the bottleneck.
    pub bottleneck_blocks: usize,
    /// Kernel side of the large (spatial) convolutions; must be odd.
    pub kernel_large: usize,
    /// Group count of the large convolutions inside dense conv blocks.
    pub conv_groups: usize,
    /// Image channel count; the pipeline is RGB-only.
    pub io_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            stages: 4,
            width: 32,
            blocks_per_encoder_stage: 3,
            blocks_per_decoder_stage: 1,
            bottleneck_blocks: 3,
            kernel_large: 5,
            conv_groups: 1,
            io_channels: 3,
        }
    }
}

impl GeneratorConfig {
    /// Restoration-scale preset: 4 stages, width 32, grouped large convs.
    pub fn res() -> Self {
        GeneratorConfig { conv_groups: 32, ..GeneratorConfig::default() }
    }

    /// Synthesis-scale preset: 3 stages, width 16, grouped large convs.
    pub fn syn() -> Self {
        GeneratorConfig { stages: 3, width: 16, conv_groups: 16, ..GeneratorConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(CoreError::Config("generator needs at least one stage".into()));
        }
        if self.width < 1 {
            return Err(CoreError::Config("generator width must be at least 1".into()));
        }
        if self.kernel_large % 2 == 0 || self.kernel_large == 0 {
            return Err(CoreError::Config(format!(
                "kernel_large must be odd and positive, got {}",
                self.kernel_large
            )));
        }
        if self.conv_groups == 0 || self.width % self.conv_groups != 0 {
            return Err(CoreError::Config(format!(
                "width {} must be divisible by conv_groups {}",
                self.width, self.conv_groups
            )));
        }
        if self.blocks_per_encoder_stage < 1
            || self.blocks_per_decoder_stage < 1
            || self.bottleneck_blocks < 1
        {
            return Err(CoreError::Config("block counts must be at least 1".into()));
        }
        if self.io_channels != 3 {
            return Err(CoreError::Config(format!(
                "io_channels must be 3 (RGB), got {}",
                self.io_channels
            )));
        }
        Ok(())
    }

    /// Spatial divisor the input must satisfy without padding.
    pub fn divisor(&self) -> usize {
        1usize << self.stages
    }
}

/// Dense conv block: a large grouped conv, channel layer norm, a 1x1
/// expansion (x4) with GELU, a 1x1 contraction, and a second large grouped
/// conv that consumes the channel-concatenation of the block input and the
/// contraction output. Spatial size is unchanged; channel count is
/// preserved end to end.
#[derive(Debug, Clone, Copy)]
struct Dcb {
    conv_a: Conv2d,
    norm: LayerNormChannel,
    expand: Conv2d,
    contract: Conv2d,
    conv_b: Conv2d,
}

impl Dcb {
    fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        channels: usize,
        cfg: &GeneratorConfig,
        rng: &mut R,
    ) -> Self {
        let ks = cfg.kernel_large;
        let pad = ks / 2;
        let g = cfg.conv_groups;
        let conv_a =
            Conv2d::new(params, &format!("{prefix}.conv_a"), channels, channels, ks, 1, pad, g, rng);
        let norm = LayerNormChannel::new(params, &format!("{prefix}.norm"), channels);
        let expand =
            Conv2d::new(params, &format!("{prefix}.expand"), channels, 4 * channels, 1, 1, 0, 1, rng);
        let contract =
            Conv2d::new(params, &format!("{prefix}.contract"), 4 * channels, channels, 1, 1, 0, 1, rng);
        let conv_b = Conv2d::new(
            params,
            &format!("{prefix}.conv_b"),
            2 * channels,
            channels,
            ks,
            1,
            pad,
            g,
            rng,
        );
        Dcb { conv_a, norm, expand, contract, conv_b }
    }

    fn forward(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        let a = self.conv_a.forward(tape, bind, x);
        let n = self.norm.forward(tape, bind, a);
        let e = self.expand.forward(tape, bind, n);
        let g = tape.gelu(e);
        let c = self.contract.forward(tape, bind, g);
        let cat = tape.concat_c(x, c);
        self.conv_b.forward(tape, bind, cat)
    }

    fn forward_eval(&self, params: &Params, x: &Arr) -> Arr {
        let a = self.conv_a.forward_eval(params, x);
        let n = self.norm.forward_eval(params, &a);
        drop(a);
        let e = self.expand.forward_eval(params, &n);
        drop(n);
        let g = e.mapv_into(k::gelu_scalar);
        let c = self.contract.forward_eval(params, &g);
        drop(g);
        let cat = concatenate(Axis(1), &[x.view(), c.view()]).expect("channel concat");
        drop(c);
        self.conv_b.forward_eval(params, &cat)
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    blocks: Vec<Dcb>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Conv2d,
    merge: Conv2d,
    blocks: Vec<Dcb>,
}

/// A built generator: config plus named parameter arrays.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    cfg: GeneratorConfig,
    params: Params,
    in_proj: Conv2d,
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<Dcb>,
    /// Stored deepest-first: `decoder[0]` consumes the bottleneck output.
    decoder: Vec<DecoderStage>,
    out_proj: Conv2d,
}

impl GeneratorModel {
    pub fn build<R: Rng>(cfg: GeneratorConfig, rng: &mut R) -> Result<GeneratorModel> {
        cfg.validate()?;
        let mut params = Params::new();
        let ks = cfg.kernel_large;
        let c0 = cfg.width;
        let in_proj =
            Conv2d::new(&mut params, "in_proj", cfg.io_channels, c0, ks, 1, ks / 2, 1, rng);

        let mut encoder = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let c = c0 << i;
            let blocks = (0..cfg.blocks_per_encoder_stage)
                .map(|b| Dcb::new(&mut params, &format!("enc{i}.dcb{b}"), c, &cfg, rng))
                .collect();
            let down = Conv2d::new(&mut params, &format!("enc{i}.down"), c, 2 * c, 2, 2, 0, 1, rng);
            encoder.push(EncoderStage { blocks, down });
        }

        let c_mid = c0 << cfg.stages;
        let bottleneck = (0..cfg.bottleneck_blocks)
            .map(|b| Dcb::new(&mut params, &format!("mid.dcb{b}"), c_mid, &cfg, rng))
            .collect();

        let mut decoder = Vec::with_capacity(cfg.stages);
        for i in (0..cfg.stages).rev() {
            let c = c0 << i;
            let up = Conv2d::new(&mut params, &format!("dec{i}.up"), 2 * c, c, 3, 1, 1, 1, rng);
            let merge = Conv2d::new(&mut params, &format!("dec{i}.merge"), 2 * c, c, 1, 1, 0, 1, rng);
            let blocks = (0..cfg.blocks_per_decoder_stage)
                .map(|b| Dcb::new(&mut params, &format!("dec{i}.dcb{b}"), c, &cfg, rng))
                .collect();
            decoder.push(DecoderStage { up, merge, blocks });
        }

        let out_proj =
            Conv2d::new(&mut params, "out_proj", c0, cfg.io_channels, ks, 1, ks / 2, 1, rng);

        Ok(GeneratorModel { cfg, params, in_proj, encoder, bottleneck, decoder, out_proj })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    /// Training forward on a tape; returns the unclamped output node.
    ///
    /// Requires spatial dims already divisible by 2^stages (training patches
    /// are sized accordingly); inference-time padding lives in [`Self::forward`].
    pub fn forward_t(&self, tape: &mut Tape, bind: &Bind, x: Node) -> Node {
        let shape = tape.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "generator expects NCHW input");
        assert_eq!(shape[1], self.cfg.io_channels, "generator expects RGB input");
        let div = self.cfg.divisor();
        assert!(
            shape[2] % div == 0 && shape[3] % div == 0,
            "training forward needs spatial dims divisible by {div}, got {}x{}",
            shape[2],
            shape[3]
        );

        let mut skips = Vec::with_capacity(self.cfg.stages + 1);
        skips.push(self.in_proj.forward(tape, bind, x));
        for stage in &self.encoder {
            let input = *skips.last().expect("at least the stem feature");
            let mut y = input;
            for blk in &stage.blocks {
                y = blk.forward(tape, bind, y);
            }
            let res = tape.add(y, input);
            skips.push(stage.down.forward(tape, bind, res));
        }

        let mut h = skips.pop().expect("deepest encoder feature");
        for blk in &self.bottleneck {
            h = blk.forward(tape, bind, h);
        }

        for dec in &self.decoder {
            let up = tape.upsample2(h);
            let up = dec.up.forward(tape, bind, up);
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = tape.concat_c(up, skip);
            h = dec.merge.forward(tape, bind, cat);
            for blk in &dec.blocks {
                h = blk.forward(tape, bind, h);
            }
        }
        self.out_proj.forward(tape, bind, h)
    }

    /// Inference forward: reflect-pads to a multiple of 2^stages, runs the
    /// network eagerly, crops back, and clamps to [0, 1].
    pub fn forward(&self, batch: &Arr) -> Result<Arr> {
        let mut out = self.forward_eval_unclamped(batch)?;
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }

    /// Inference forward without the final clamp; used wherever outputs must
    /// match the training-time (tape) forward bit for bit.
    pub fn forward_eval_unclamped(&self, batch: &Arr) -> Result<Arr> {
        let (h, w, ph, pw) = self.check_input(batch)?;
        if ph == 0 && pw == 0 {
            return Ok(self.eval_padded(batch));
        }
        let padded = k::pad_reflect_fwd(batch, (0, ph, 0, pw));
        let out = self.eval_padded(&padded);
        drop(padded);
        Ok(k::crop2d_fwd(&out, 0, 0, h, w))
    }

    /// Post-downsample encoder features X_i for shape auditing: stage i has
    /// shape (B, 2^(i+1)*width, H/2^(i+1), W/2^(i+1)) on the padded input.
    pub fn encoder_trace(&self, batch: &Arr) -> Result<Vec<Arr>> {
        let (_, _, ph, pw) = self.check_input(batch)?;
        let padded = if ph == 0 && pw == 0 {
            None
        } else {
            Some(k::pad_reflect_fwd(batch, (0, ph, 0, pw)))
        };
        let x = padded.as_ref().unwrap_or(batch);
        let p = &self.params;
        let stem = self.in_proj.forward_eval(p, x);
        let mut trace: Vec<Arr> = Vec::with_capacity(self.cfg.stages);
        for (i, stage) in self.encoder.iter().enumerate() {
            let input = if i == 0 { &stem } else { &trace[i - 1] };
            let y = conv_encoder_eval(p, &stage.blocks, input);
            trace.push(stage.down.forward_eval(p, &y));
        }
        Ok(trace)
    }

    fn check_input(&self, batch: &Arr) -> Result<(usize, usize, usize, usize)> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.cfg.io_channels {
            return Err(CoreError::Shape(format!(
                "generator expects (B, {}, H, W) input, got {s:?}",
                self.cfg.io_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if s[0] == 0 || h == 0 || w == 0 {
            return Err(CoreError::Shape("generator input has an empty axis".into()));
        }
        let div = self.cfg.divisor();
        let ph = (div - h % div) % div;
        let pw = (div - w % div) % div;
        Ok((h, w, ph, pw))
    }

    /// Eager forward on an input whose dims are divisible by 2^stages.
    /// Keeps only the skip features alive; everything else is dropped as
    /// soon as its consumer has run.
    fn eval_padded(&self, x: &Arr) -> Arr {
        let p = &self.params;
        let mut skips: Vec<Arr> = Vec::with_capacity(self.cfg.stages + 1);
        skips.push(self.in_proj.forward_eval(p, x));
        for stage in &self.encoder {
            let down = {
                let input = skips.last().expect("at least the stem feature");
                let y = conv_encoder_eval(p, &stage.blocks, input);
                stage.down.forward_eval(p, &y)
            };
            skips.push(down);
        }

        let mut h = skips.pop().expect("deepest encoder feature");
        for blk in &self.bottleneck {
            h = blk.forward_eval(p, &h);
        }

        for dec in &self.decoder {
            let up = k::upsample2_fwd(&h);
            drop(h);
            let up = dec.up.forward_eval(p, &up);
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = concatenate(Axis(1), &[up.view(), skip.view()]).expect("skip concat");
            drop(up);
            drop(skip);
            h = dec.merge.forward_eval(p, &cat);
            drop(cat);
            for blk in &dec.blocks {
                h = blk.forward_eval(p, &h);
            }
        }
        self.out_proj.forward_eval(p, &h)
    }
}

impl crate::losses::ImageMapper for GeneratorModel {
    fn map_batch(&self, batch: &Arr) -> Result<Arr> {
        self.forward_eval_unclamped(batch)
    }
}

/// Dense conv block chain with the outer residual connection.
fn conv_encoder_eval(params: &Params, blocks: &[Dcb], input: &Arr) -> Arr {
    let mut y = blocks[0].forward_eval(params, input);
    for blk in &blocks[1..] {
        y = blk.forward_eval(params, &y);
    }
    y + input
}
