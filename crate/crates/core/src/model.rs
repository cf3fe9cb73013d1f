//! The three subnetworks and two discriminators.
//!
//! * context encoder: a basic-block residual trunk (7×7 stem, four
//!   two-block stages, final stage at stride 1, then a 3×3 adaptation
//!   block) producing a `512 × H/16 × W/16` shared context;
//! * static / dynamic layout decoders: two stride-2 conv blocks
//!   (512→128, 128→128) followed by four ×2 transposed-conv blocks with
//!   widths 64, 32, 16, O and a sigmoid, with spatial dropout (0.4) on the
//!   penultimate layer during training;
//! * patch discriminators: four 3×3 stride-2 convolutions (widths
//!   64→128→256→512), a 1×1 projection and tanh, scoring H/16 × W/16
//!   patches in (−1, 1).
//!
//! All layer widths divide by `width_div` for desk-scale narrow variants;
//! the default configuration is the full-size network.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{GridSpec, LayoutGrid};
use crate::nn::conv::{Conv2d, ConvTranspose2d, MaxPool2d, PoolCache};
use crate::nn::ops;
use crate::nn::{Param, ParamSet};
use crate::{Error, Result};

const DISC_SLOPE: f64 = 0.2;
/// Damping applied to the last convolution of each residual branch so the
/// unnormalized trunk starts close to the identity.
const RESIDUAL_INIT_SCALE: f64 = 0.2;

/// Per-channel input normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormConstants {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants { mean: [0.5; 3], std: [0.5; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Divides every channel width; 1 is the full-size network.
    pub width_div: usize,
    /// Channels of the static decoder (road, or road+sidewalk).
    pub static_channels: usize,
    pub grid: GridSpec,
    pub normalization: NormConstants,
    pub dropout_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 512,
            input_width: 512,
            width_div: 1,
            static_channels: 2,
            grid: GridSpec::default(),
            normalization: NormConstants::default(),
            dropout_ratio: 0.4,
        }
    }
}

impl ModelConfig {
    /// Narrow desk-scale variant: `div`× narrower channels on a smaller
    /// input, with the grid footprint resolution matched to the decoder
    /// output (input/4).
    pub fn narrow(div: usize, input: usize, camera_height: f64) -> Self {
        ModelConfig {
            input_height: input,
            input_width: input,
            width_div: div,
            static_channels: 2,
            grid: GridSpec::square(40.0, input / 4, camera_height),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height % 16 != 0 || self.input_width % 16 != 0 {
            return Err(Error::Config("input size must be divisible by 16".into()));
        }
        if self.input_height < 64 || self.input_width < 64 {
            return Err(Error::Config("input must be at least 64×64".into()));
        }
        if !(self.static_channels == 1 || self.static_channels == 2) {
            return Err(Error::Config(format!(
                "static decoder channels must be 1 or 2, got {}",
                self.static_channels
            )));
        }
        if self.grid.rows != self.input_height / 4 || self.grid.cols != self.input_width / 4 {
            return Err(Error::Config(format!(
                "grid {}x{} does not match decoder output {}x{}",
                self.grid.rows,
                self.grid.cols,
                self.input_height / 4,
                self.input_width / 4
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::Config("dropout ratio must be in [0,1)".into()));
        }
        Ok(())
    }

    fn w(&self, base: usize) -> usize {
        (base / self.width_div).max(2)
    }

    pub fn context_channels(&self) -> usize {
        self.w(512)
    }

    pub fn context_hw(&self) -> (usize, usize) {
        (self.input_height / 16, self.input_width / 16)
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.input_height / 4, self.input_width / 4)
    }
}

/// The shared feature map conditioning both decoders, `[N, C, H/16, W/16]`.
#[derive(Debug, Clone)]
pub struct SharedContext {
    pub values: Array4<f64>,
}

/// Patch score map in (−1, 1), `[N, 1, H/16, W/16]` of the layout size.
#[derive(Debug, Clone)]
pub struct PatchScores {
    pub values: Array4<f64>,
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    downsample: Option<Conv2d>,
}

struct BlockCache {
    x: Array4<f64>,
    a1: Array4<f64>,
    y: Array4<f64>,
}

impl BasicBlock {
    fn new(name: &str, ci: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), ci, co, 3, stride, 1, 1.0, rng);
        let conv2 =
            Conv2d::new(&format!("{name}.conv2"), co, co, 3, 1, 1, RESIDUAL_INIT_SCALE, rng);
        let downsample = if stride != 1 || ci != co {
            Some(Conv2d::new(&format!("{name}.down"), ci, co, 1, stride, 0, 1.0, rng))
        } else {
            None
        };
        BasicBlock { conv1, conv2, downsample }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let a1 = ops::relu(&self.conv1.forward(x));
        let main = self.conv2.forward(&a1);
        let skip = match &self.downsample {
            Some(d) => d.forward(x),
            None => x.clone(),
        };
        ops::relu(&(main + skip))
    }

    fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
        let a1 = ops::relu(&self.conv1.forward(x));
        let main = self.conv2.forward(&a1);
        let skip = match &self.downsample {
            Some(d) => d.forward(x),
            None => x.clone(),
        };
        let y = ops::relu(&(main + skip));
        (y.clone(), BlockCache { x: x.clone(), a1, y })
    }

    fn backward(&mut self, cache: &BlockCache, gout: &Array4<f64>) -> Array4<f64> {
        let g = ops::relu_backward(&cache.y, gout);
        let g1 = self.conv2.backward(&cache.a1, &g);
        let g1 = ops::relu_backward(&cache.a1, &g1);
        let mut gx = self.conv1.backward(&cache.x, &g1);
        match &mut self.downsample {
            Some(d) => gx = gx + d.backward(&cache.x, &g),
            None => gx = gx + &g,
        }
        gx
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.conv1.w);
        out.push(&self.conv1.b);
        out.push(&self.conv2.w);
        out.push(&self.conv2.b);
        if let Some(d) = &self.downsample {
            out.push(&d.w);
            out.push(&d.b);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.conv1.w);
        out.push(&mut self.conv1.b);
        out.push(&mut self.conv2.w);
        out.push(&mut self.conv2.b);
        if let Some(d) = &mut self.downsample {
            out.push(&mut d.w);
            out.push(&mut d.b);
        }
    }
}

/// The context encoder. Consumes `[N, 3, H, W]` images with values in
/// [0, 1]; normalization happens inside.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock>, // 8 blocks, stages of 2
    adapt: Conv2d,
    normalization: NormConstants,
    input_hw: (usize, usize),
}

pub struct EncoderCache {
    x_norm: Array4<f64>,
    stem_out: Array4<f64>,
    pool_out: Array4<f64>,
    pool_cache: PoolCache,
    block_caches: Vec<BlockCache>,
    adapt_in: Array4<f64>,
    adapt_out: Array4<f64>,
}

impl Encoder {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w64 = config.w(64);
        let w128 = config.w(128);
        let w256 = config.w(256);
        let w512 = config.w(512);
        let stem = Conv2d::new("encoder.stem", 3, w64, 7, 2, 3, 1.0, rng);
        let pool = MaxPool2d { k: 3, stride: 2, pad: 1 };
        let stages = [
            (w64, w64, 1usize),
            (w64, w128, 2),
            (w128, w256, 2),
            (w256, w512, 1), // stride 1 keeps the context at 1/16 resolution
        ];
        let mut blocks = Vec::new();
        for (si, &(ci, co, stride)) in stages.iter().enumerate() {
            blocks.push(BasicBlock::new(
                &format!("encoder.stage{}.block0", si + 1),
                ci,
                co,
                stride,
                rng,
            ));
            blocks.push(BasicBlock::new(
                &format!("encoder.stage{}.block1", si + 1),
                co,
                co,
                1,
                rng,
            ));
        }
        let adapt = Conv2d::new("encoder.adapt", w512, w512, 3, 1, 1, 1.0, rng);
        Encoder {
            stem,
            pool,
            blocks,
            adapt,
            normalization: config.normalization,
            input_hw: (config.input_height, config.input_width),
        }
    }

    fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 || (h, w) != self.input_hw {
            return Err(Error::Shape(format!(
                "encoder expects [N, 3, {}, {}], got [N, {c}, {h}, {w}]",
                self.input_hw.0, self.input_hw.1
            )));
        }
        Ok(())
    }

    fn normalize(&self, images: &Array4<f64>) -> Array4<f64> {
        let mut x = images.clone();
        for c in 0..3 {
            let mean = self.normalization.mean[c];
            let std = self.normalization.std[c];
            x.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - mean) / std);
        }
        x
    }

    /// Forward pass without caches (inference).
    pub fn forward(&self, images: &Array4<f64>) -> Result<SharedContext> {
        self.check_input(images)?;
        let x = self.normalize(images);
        let mut y = ops::relu(&self.stem.forward(&x));
        y = self.pool.forward(&y).0;
        for b in &self.blocks {
            y = b.forward(&y);
        }
        let ctx = ops::relu(&self.adapt.forward(&y));
        Ok(SharedContext { values: ctx })
    }

    pub fn forward_cached(&self, images: &Array4<f64>) -> Result<(SharedContext, EncoderCache)> {
        self.check_input(images)?;
        let x_norm = self.normalize(images);
        let stem_out = ops::relu(&self.stem.forward(&x_norm));
        let (pool_out, pool_cache) = self.pool.forward(&stem_out);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut y = pool_out.clone();
        for b in &self.blocks {
            let (out, cache) = b.forward_cached(&y);
            block_caches.push(cache);
            y = out;
        }
        let adapt_in = y;
        let adapt_out = ops::relu(&self.adapt.forward(&adapt_in));
        let ctx = SharedContext { values: adapt_out.clone() };
        Ok((
            ctx,
            EncoderCache {
                x_norm,
                stem_out,
                pool_out,
                pool_cache,
                block_caches,
                adapt_in,
                adapt_out,
            },
        ))
    }

    /// Backward from a gradient on the shared context; accumulates
    /// parameter gradients. The image gradient is discarded.
    pub fn backward(&mut self, cache: &EncoderCache, g_ctx: &Array4<f64>) {
        let g = ops::relu_backward(&cache.adapt_out, g_ctx);
        let mut g = self.adapt.backward(&cache.adapt_in, &g);
        for (b, c) in self.blocks.iter_mut().rev().zip(cache.block_caches.iter().rev()) {
            g = b.backward(c, &g);
        }
        let _ = cache.pool_out;
        let g = self.pool.backward(&cache.pool_cache, &g);
        let g = ops::relu_backward(&cache.stem_out, &g);
        let _ = self.stem.backward(&cache.x_norm, &g);
    }
}

impl ParamSet for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.stem.w, &self.stem.b];
        for b in &self.blocks {
            b.collect(&mut v);
        }
        v.push(&self.adapt.w);
        v.push(&self.adapt.b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.stem.w, &mut self.stem.b];
        for b in &mut self.blocks {
            b.collect_mut(&mut v);
        }
        v.push(&mut self.adapt.w);
        v.push(&mut self.adapt.b);
        v
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Layout decoder: context → `[N, O, H/4, W/4]` occupancies in (0, 1).
#[derive(Debug, Clone)]
pub struct Decoder {
    conv1: Conv2d,
    conv2: Conv2d,
    up: Vec<ConvTranspose2d>, // 4 blocks
    pub out_channels: usize,
    dropout_ratio: f64,
    ctx_shape: (usize, usize, usize),
}

pub struct DecoderCache {
    ctx: Array4<f64>,
    a1: Array4<f64>,
    a2: Array4<f64>,
    ups: Vec<Array4<f64>>, // post-relu outputs of up1..up3
    dropout_mask: Option<ndarray::Array2<f64>>,
    dropped: Array4<f64>,
    y: Array4<f64>,
}

impl Decoder {
    fn new(name: &str, config: &ModelConfig, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(out_channels == 1 || out_channels == 2);
        let w512 = config.w(512);
        let w128 = config.w(128);
        let conv1 = Conv2d::new(&format!("{name}.conv1"), w512, w128, 3, 2, 1, 1.0, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), w128, w128, 3, 2, 1, 1.0, rng);
        let widths = [config.w(64), config.w(32), config.w(16), out_channels];
        let mut up = Vec::new();
        let mut ci = w128;
        for (i, &co) in widths.iter().enumerate() {
            up.push(ConvTranspose2d::new(&format!("{name}.up{}", i + 1), ci, co, 4, 2, 1, 1.0, rng));
            ci = co;
        }
        let (ch, cw) = config.context_hw();
        Decoder {
            conv1,
            conv2,
            up,
            out_channels,
            dropout_ratio: config.dropout_ratio,
            ctx_shape: (w512, ch, cw),
        }
    }

    fn check_ctx(&self, ctx: &SharedContext) -> Result<()> {
        let (_, c, h, w) = ctx.values.dim();
        if (c, h, w) != self.ctx_shape {
            return Err(Error::Shape(format!(
                "decoder expects context [N, {}, {}, {}], got [N, {c}, {h}, {w}]",
                self.ctx_shape.0, self.ctx_shape.1, self.ctx_shape.2
            )));
        }
        Ok(())
    }

    /// Inference pass: dropout inactive, deterministic.
    pub fn forward(&self, ctx: &SharedContext) -> Result<Array4<f64>> {
        self.check_ctx(ctx)?;
        let mut y = ops::relu(&self.conv1.forward(&ctx.values));
        y = ops::relu(&self.conv2.forward(&y));
        for u in &self.up[..3] {
            y = ops::relu(&u.forward(&y));
        }
        Ok(ops::sigmoid(&self.up[3].forward(&y)))
    }

    /// Training pass with spatial dropout on the penultimate layer.
    pub fn forward_cached(
        &self,
        ctx: &SharedContext,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array4<f64>, DecoderCache)> {
        self.check_ctx(ctx)?;
        let a1 = ops::relu(&self.conv1.forward(&ctx.values));
        let a2 = ops::relu(&self.conv2.forward(&a1));
        let mut ups = Vec::with_capacity(3);
        let mut y = a2.clone();
        for u in &self.up[..3] {
            y = ops::relu(&u.forward(&y));
            ups.push(y.clone());
        }
        let (dropped, dropout_mask) = if training && self.dropout_ratio > 0.0 {
            let (d, m) = ops::spatial_dropout(&y, self.dropout_ratio, rng);
            (d, Some(m))
        } else {
            (y, None)
        };
        let out = ops::sigmoid(&self.up[3].forward(&dropped));
        let cache = DecoderCache {
            ctx: ctx.values.clone(),
            a1,
            a2,
            ups,
            dropout_mask,
            dropped: dropped.clone(),
            y: out.clone(),
        };
        Ok((out, cache))
    }

    /// Backward from a gradient on the decoded grid; returns the context
    /// gradient.
    pub fn backward(&mut self, cache: &DecoderCache, gout: &Array4<f64>) -> Array4<f64> {
        let g = ops::sigmoid_backward(&cache.y, gout);
        let mut g = self.up[3].backward(&cache.dropped, &g);
        if let Some(mask) = &cache.dropout_mask {
            g = ops::spatial_dropout_backward(mask, &g);
        }
        for i in (0..3).rev() {
            g = ops::relu_backward(&cache.ups[i], &g);
            let input = if i == 0 { &cache.a2 } else { &cache.ups[i - 1] };
            g = self.up[i].backward(input, &g);
        }
        g = ops::relu_backward(&cache.a2, &g);
        g = self.conv2.backward(&cache.a1, &g);
        g = ops::relu_backward(&cache.a1, &g);
        self.conv1.backward(&cache.ctx, &g)
    }
}

impl ParamSet for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.conv1.w, &self.conv1.b, &self.conv2.w, &self.conv2.b];
        for u in &self.up {
            v.push(&u.w);
            v.push(&u.b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
        ];
        for u in &mut self.up {
            v.push(&mut u.w);
            v.push(&mut u.b);
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Patch discriminator over single-channel layouts.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>, // four stride-2 convs
    proj: Conv2d,       // 1×1 projection to one channel
    layout_hw: (usize, usize),
}

pub struct DiscCache {
    x: Array4<f64>,
    pre: Vec<Array4<f64>>,  // conv outputs, pre-activation
    post: Vec<Array4<f64>>, // leaky-relu outputs
    scores: Array4<f64>,
}

impl Discriminator {
    fn new(name: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = [config.w(64), config.w(128), config.w(256), config.w(512)];
        let mut convs = Vec::new();
        let mut ci = 1;
        for (i, &co) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{name}.conv{}", i + 1), ci, co, 3, 2, 1, 1.0, rng));
            ci = co;
        }
        let proj = Conv2d::new(&format!("{name}.proj"), ci, 1, 1, 1, 0, 1.0, rng);
        Discriminator { convs, proj, layout_hw: config.output_hw() }
    }

    fn check_input(&self, layout: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = layout.dim();
        if c != 1 || (h, w) != self.layout_hw {
            return Err(Error::Shape(format!(
                "discriminator expects [N, 1, {}, {}], got [N, {c}, {h}, {w}]",
                self.layout_hw.0, self.layout_hw.1
            )));
        }
        Ok(())
    }

    pub fn forward(&self, layout: &Array4<f64>) -> Result<PatchScores> {
        self.check_input(layout)?;
        let mut y = layout.clone();
        for c in &self.convs {
            y = ops::leaky_relu(&c.forward(&y), DISC_SLOPE);
        }
        Ok(PatchScores { values: ops::tanh(&self.proj.forward(&y)) })
    }

    pub fn forward_cached(&self, layout: &Array4<f64>) -> Result<(PatchScores, DiscCache)> {
        self.check_input(layout)?;
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut y = layout.clone();
        for c in &self.convs {
            let z = c.forward(&y);
            y = ops::leaky_relu(&z, DISC_SLOPE);
            pre.push(z);
            post.push(y.clone());
        }
        let scores = ops::tanh(&self.proj.forward(&y));
        Ok((
            PatchScores { values: scores.clone() },
            DiscCache { x: layout.clone(), pre, post, scores },
        ))
    }

    /// Backward from a gradient on the scores; accumulates parameter
    /// gradients and returns the layout-input gradient (used by the
    /// generator's adversarial term).
    pub fn backward(&mut self, cache: &DiscCache, g_scores: &Array4<f64>) -> Array4<f64> {
        let g = ops::tanh_backward(&cache.scores, g_scores);
        let mut g = self.proj.backward(&cache.post[3], &g);
        for i in (0..4).rev() {
            g = ops::leaky_relu_backward(&cache.pre[i], &g, DISC_SLOPE);
            let input = if i == 0 { &cache.x } else { &cache.post[i - 1] };
            g = self.convs[i].backward(input, &g);
        }
        g
    }
}

impl ParamSet for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(&c.w);
            v.push(&c.b);
        }
        v.push(&self.proj.w);
        v.push(&self.proj.b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.w);
            v.push(&mut c.b);
        }
        v.push(&mut self.proj.w);
        v.push(&mut self.proj.b);
        v
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub static_decoder: Decoder,
    pub dynamic_decoder: Decoder,
    pub disc_static: Discriminator,
    pub disc_dynamic: Discriminator,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            encoder: Encoder::new(&config, &mut rng),
            static_decoder: Decoder::new("static_decoder", &config, config.static_channels, &mut rng),
            dynamic_decoder: Decoder::new("dynamic_decoder", &config, 1, &mut rng),
            disc_static: Discriminator::new("disc_static", &config, &mut rng),
            disc_dynamic: Discriminator::new("disc_dynamic", &config, &mut rng),
            config,
        })
    }

    /// Inference: encode once, decode both heads from the same context.
    pub fn predict(&self, images: &Array4<f64>) -> Result<(SharedContext, Array4<f64>, Array4<f64>)> {
        let ctx = self.encoder.forward(images)?;
        let s = self.static_decoder.forward(&ctx)?;
        let d = self.dynamic_decoder.forward(&ctx)?;
        Ok((ctx, s, d))
    }

    /// Decode one sample's predictions into layout grids.
    pub fn predict_grids(&self, image: &Array4<f64>) -> Result<(LayoutGrid, LayoutGrid)> {
        let (_, s, d) = self.predict(image)?;
        Ok((
            grid_from_channels(&self.config.grid, &s, 0)?,
            grid_from_channels(&self.config.grid, &d, 0)?,
        ))
    }

    /// Parameters of the generator (encoder + both decoders).
    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.static_decoder.params_mut());
        v.extend(self.dynamic_decoder.params_mut());
        v
    }

    pub fn generator_param_count(&self) -> usize {
        self.encoder.param_count()
            + self.static_decoder.param_count()
            + self.dynamic_decoder.param_count()
    }
}

impl ParamSet for Model {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.static_decoder.params());
        v.extend(self.dynamic_decoder.params());
        v.extend(self.disc_static.params());
        v.extend(self.disc_dynamic.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.static_decoder.params_mut());
        v.extend(self.dynamic_decoder.params_mut());
        v.extend(self.disc_static.params_mut());
        v.extend(self.disc_dynamic.params_mut());
        v
    }
}

/// Total parameter count of encoder + decoders; discriminators only when
/// `include_discriminators` (they are not used at inference).
pub fn count_parameters(model: &Model, include_discriminators: bool) -> usize {
    let mut n = model.generator_param_count();
    if include_discriminators {
        n += model.disc_static.param_count() + model.disc_dynamic.param_count();
    }
    n
}

/// Convert one sample of a `[N, O, R, C]` prediction into a layout grid.
pub fn grid_from_channels(spec: &GridSpec, batch: &Array4<f64>, n: usize) -> Result<LayoutGrid> {
    let sample = batch.index_axis(Axis(0), n);
    // sigmoid keeps values in (0,1); clamp defensively for exact bounds
    let values = sample.mapv(|v| v.clamp(0.0, 1.0));
    LayoutGrid::from_values(*spec, values.into_dimensionality().unwrap())
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + named little-endian f64 arrays. Round-trips
// bit-exactly.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"BLCK";
const CKPT_VERSION: u8 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: ModelConfig,
    static_semantics: Vec<String>,
    dynamic_semantics: Vec<String>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        version: 1,
        config: model.config.clone(),
        static_semantics: if model.config.static_channels == 2 {
            vec!["road".into(), "sidewalk".into()]
        } else {
            vec!["road".into()]
        },
        dynamic_semantics: vec!["vehicle".into()],
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(CKPT_VERSION);
    buf.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&mjson);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.ndim() as u8);
        for d in p.value.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 || &bytes[0..4] != CKPT_MAGIC || bytes[4] != CKPT_VERSION {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let mlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[9..9 + mlen])
        .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    let mut model = Model::new(manifest.config, 0)?;
    let mut off = 9 + mlen;
    let n_arrays = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..n_arrays {
        let nlen = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        let name = String::from_utf8(bytes[off..off + nlen].to_vec())
            .map_err(|_| Error::format(path, "bad array name"))?;
        off += nlen;
        let ndim = bytes[off] as usize;
        off += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let len: usize = shape.iter().product();
        if off + len * 8 > bytes.len() {
            return Err(Error::format(path, "truncated array data"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(path, format!("non-finite parameter in {name}")));
            }
            data.push(v);
            off += 8;
        }
        loaded.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }
    for p in model.params_mut() {
        let arr = loaded
            .remove(&p.name)
            .ok_or_else(|| Error::format(path, format!("missing parameter {}", p.name)))?;
        if arr.shape() != p.value.shape() {
            return Err(Error::format(path, format!("shape mismatch for {}", p.name)));
        }
        p.value = arr;
    }
    if !loaded.is_empty() {
        let extra: Vec<_> = loaded.keys().cloned().collect();
        return Err(Error::format(path, format!("unknown parameters: {extra:?}")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig::narrow(8, 64, 1.5)
    }

    fn rand_images(n: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Array4::from_shape_fn((n, 3, h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn shape_chain_tiny() {
        let model = Model::new(tiny_config(), 0).unwrap();
        let x = rand_images(2, 64, 64, 1);
        let (ctx, s, d) = model.predict(&x).unwrap();
        assert_eq!(ctx.values.dim(), (2, 64, 4, 4)); // 512/8 = 64 channels
        assert_eq!(s.dim(), (2, 2, 16, 16));
        assert_eq!(d.dim(), (2, 1, 16, 16));
        let ps = model.disc_static.forward(&s.slice(s![.., 0..1, .., ..]).to_owned()).unwrap();
        assert_eq!(ps.values.dim(), (2, 1, 1, 1));
        assert!(ps.values.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    use ndarray::s;

    #[test]
    fn wrong_input_shape_is_error() {
        let model = Model::new(tiny_config(), 0).unwrap();
        let x = rand_images(1, 32, 32, 2);
        assert!(model.encoder.forward(&x).is_err());
        let bad_ctx = SharedContext { values: Array4::zeros((1, 64, 2, 2)) };
        assert!(model.static_decoder.forward(&bad_ctx).is_err());
        let bad_layout = Array4::zeros((1, 1, 8, 8));
        assert!(model.disc_static.forward(&bad_layout).is_err());
    }

    #[test]
    fn decoder_outputs_strictly_inside_unit_interval() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let x = rand_images(1, 64, 64, 4);
        let (_, s, d) = model.predict(&x).unwrap();
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_is_deterministic_without_training_flag() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let x = rand_images(2, 64, 64, 6);
        let (_, s1, d1) = model.predict(&x).unwrap();
        let (_, s2, d2) = model.predict(&x).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn both_decoders_consume_the_same_context() {
        // predict() encodes once; decoding the returned context again must
        // reproduce the outputs bit-for-bit
        let model = Model::new(tiny_config(), 7).unwrap();
        let x = rand_images(1, 64, 64, 8);
        let (ctx, s, d) = model.predict(&x).unwrap();
        assert_eq!(model.static_decoder.forward(&ctx).unwrap(), s);
        assert_eq!(model.dynamic_decoder.forward(&ctx).unwrap(), d);
    }

    #[test]
    fn zero_context_gives_sigmoid_of_final_bias() {
        // biases are zero-initialized; give the final deconv a known bias
        let config = tiny_config();
        let mut model = Model::new(config.clone(), 9).unwrap();
        {
            let params = model.static_decoder.params_mut();
            for p in params {
                if p.name == "static_decoder.up4.b" {
                    p.value[[0]] = 0.3;
                    p.value[[1]] = -1.1;
                }
            }
        }
        let ctx = SharedContext {
            values: Array4::zeros((1, config.context_channels(), 4, 4)),
        };
        let out = model.static_decoder.forward(&ctx).unwrap();
        let expect0 = 1.0 / (1.0 + (-0.3f64).exp());
        let expect1 = 1.0 / (1.0 + (1.1f64).exp());
        assert!(out.slice(s![0, 0, .., ..]).iter().all(|&v| (v - expect0).abs() < 1e-12));
        assert!(out.slice(s![0, 1, .., ..]).iter().all(|&v| (v - expect1).abs() < 1e-12));
    }

    #[test]
    fn dropout_active_only_in_training() {
        let model = Model::new(tiny_config(), 11).unwrap();
        let x = rand_images(1, 64, 64, 12);
        let ctx = model.encoder.forward(&x).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(100);
        let mut rng2 = ChaCha8Rng::seed_from_u64(101);
        let (a, _) = model.static_decoder.forward_cached(&ctx, true, &mut rng1).unwrap();
        let (b, _) = model.static_decoder.forward_cached(&ctx, true, &mut rng2).unwrap();
        assert_ne!(a, b, "different dropout draws must differ");
        let (c, _) = model.static_decoder.forward_cached(&ctx, false, &mut rng1).unwrap();
        assert_eq!(c, model.static_decoder.forward(&ctx).unwrap());
    }

    #[test]
    fn param_count_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = crate::nn::conv::Conv2d::new("c", 16, 32, 3, 1, 1, 1.0, &mut rng);
        assert_eq!(conv.w.len() + conv.b.len(), 3 * 3 * 16 * 32 + 32); // = 4640
        assert_eq!(conv.w.len() + conv.b.len(), 4640);

        let empty: Vec<&Param> = Vec::new();
        assert_eq!(empty.iter().map(|p| p.len()).sum::<usize>(), 0);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config(), 21).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "{} not bit-exact", a.name);
        }
        // and the restored model predicts identically
        let x = rand_images(1, 64, 64, 22);
        let (_, s1, d1) = model.predict(&x).unwrap();
        let (_, s2, d2) = back.predict(&x).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
    }
}
