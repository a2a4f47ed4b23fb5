//! Generator, discriminator and frozen feature encoder over N-channel
//! slice stacks.
//!
//! Public entry points take `(B, N, H, W)` batches; internally everything
//! runs channel-major.

use ndarray::{Array1, Array4};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mar3d_core::seeds::substream;

use crate::layers::{
    avg_pool2, avg_pool2_backward, concat_channels, global_mean, global_mean_backward, leaky_relu, leaky_relu_backward,
    split_channels, swap_batch_channels, upsample2, upsample2_backward, Conv2d, ConvCache, Linear, LEAKY_SLOPE,
};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("network expects {expected} channels, input has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("input {h}x{w} is not divisible by {factor}")]
    BadSpatialSize { h: usize, w: usize, factor: usize },
    #[error("invalid network config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of resolution levels, including the bottleneck.
    pub depth: usize,
    pub base_width: usize,
    /// Start from the exact identity mapping.
    pub zero_head: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_width: 16,
            zero_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub n_blocks: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            base_width: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    /// 1-based block whose output is the feature map.
    pub feature_block: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            feature_block: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Window size N: channels in and out of every network.
    pub n_slices: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_slices: 3,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        mar3d_core::volumes::check_window_size(self.n_slices).map_err(|e| NetError::Config(e.to_string()))?;
        if self.generator.depth == 0 || self.generator.base_width == 0 {
            return Err(NetError::Config("generator depth and width must be positive".into()));
        }
        if self.discriminator.n_blocks == 0 || self.discriminator.base_width == 0 {
            return Err(NetError::Config(
                "discriminator blocks and width must be positive".into(),
            ));
        }
        let e = &self.encoder;
        if e.widths.is_empty() || e.widths.contains(&0) {
            return Err(NetError::Config("encoder widths must be non-empty and positive".into()));
        }
        if e.feature_block == 0 || e.feature_block > e.widths.len() {
            return Err(NetError::Config(format!(
                "feature block {} outside 1..={}",
                e.feature_block,
                e.widths.len()
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        let g = 1 << (self.generator.depth - 1);
        let d = 1 << self.discriminator.n_blocks;
        g.max(d)
    }
}

/// Named access to every trainable tensor, in a fixed order.
pub trait Parameters<F: Real> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;
    fn zeros_like(&self) -> Self;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Sum of squares of all entries.
    fn sq_norm(&self) -> F {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
    }
}

fn conv_tensors<'a, F: Real>(prefix: &str, conv: &'a Conv2d<F>, out: &mut Vec<(String, Vec<usize>, &'a [F])>) {
    out.push((
        format!("{prefix}.weight"),
        conv.weight.shape().to_vec(),
        conv.weight.as_slice().expect("contiguous"),
    ));
    if let Some(b) = &conv.bias {
        out.push((
            format!("{prefix}.bias"),
            vec![b.len()],
            b.as_slice().expect("contiguous"),
        ));
    }
}

fn conv_tensors_mut<'a, F: Real>(conv: &'a mut Conv2d<F>, out: &mut Vec<&'a mut [F]>) {
    out.push(conv.weight.as_slice_mut().expect("contiguous"));
    if let Some(b) = conv.bias.as_mut() {
        out.push(b.as_slice_mut().expect("contiguous"));
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt() / (fan_in as f64).sqrt()
}

fn fill_normal<F: Real>(data: &mut [F], std: f64, seed: u64, label: &str) {
    let mut rng = substream(seed, label);
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in data {
        *v = F::lit(dist.sample(&mut rng));
    }
}

fn init_conv<F: Real>(conv: &mut Conv2d<F>, seed: u64, label: &str) {
    let (_, c, k, _) = conv.weight.dim();
    fill_normal(
        conv.weight.as_slice_mut().expect("contiguous"),
        he_std(c * k * k),
        seed,
        label,
    );
}

fn to_channel_major<F: Real>(x: &Array4<F>, expected: usize) -> Result<Array4<F>, NetError> {
    let actual = x.dim().1;
    if actual != expected {
        return Err(NetError::ChannelMismatch { expected, actual });
    }
    Ok(swap_batch_channels(x))
}

fn check_spatial(h: usize, w: usize, factor: usize) -> Result<(), NetError> {
    if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) || h == 0 || w == 0 {
        return Err(NetError::BadSpatialSize { h, w, factor });
    }
    Ok(())
}

/// Two 3x3 convolutions with leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
struct DoubleConv<F> {
    a: Conv2d<F>,
    b: Conv2d<F>,
}

struct DoubleConvCache<F> {
    ca: ConvCache<F>,
    ya: Array4<F>,
    cb: ConvCache<F>,
    yb: Array4<F>,
}

impl<F: Real> DoubleConv<F> {
    fn new(cin: usize, cout: usize) -> Self {
        Self {
            a: Conv2d::zeros(cout, cin, 3, 1, 1, true),
            b: Conv2d::zeros(cout, cout, 3, 1, 1, true),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            a: self.a.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    fn forward(&self, x: &Array4<F>) -> (Array4<F>, DoubleConvCache<F>) {
        let (za, ca) = self.a.forward(x);
        let ya = leaky_relu(za);
        let (zb, cb) = self.b.forward(&ya);
        let yb = leaky_relu(zb);
        (yb.clone(), DoubleConvCache { ca, ya, cb, yb })
    }

    fn backward(&self, cache: &DoubleConvCache<F>, dy: &Array4<F>, grad: Option<&mut DoubleConv<F>>) -> Array4<F> {
        let dzb = leaky_relu_backward(&cache.yb, dy);
        let (ga, gb) = match grad {
            Some(g) => (Some(&mut g.a), Some(&mut g.b)),
            None => (None, None),
        };
        let dya = self.b.backward(&cache.cb, &dzb, gb);
        let dza = leaky_relu_backward(&cache.ya, &dya);
        self.a.backward(&cache.ca, &dza, ga)
    }
}

/// Residual U-Net: `out = clamp(x + r(x), -1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<F> {
    n_channels: usize,
    config: GeneratorConfig,
    enc: Vec<DoubleConv<F>>,
    /// `dec[l]` produces level `l` from level `l + 1`.
    dec: Vec<DoubleConv<F>>,
    head: Conv2d<F>,
}

pub struct GeneratorCache<F> {
    pre_clamp: Array4<F>,
    enc: Vec<DoubleConvCache<F>>,
    pooled_dims: Vec<(usize, usize, usize, usize)>,
    dec: Vec<DoubleConvCache<F>>,
    head: ConvCache<F>,
}

impl<F: Real> Generator<F> {
    pub fn new(n_channels: usize, config: &GeneratorConfig, seed: u64, label: &str) -> Self {
        let w = |l: usize| config.base_width << l;
        let enc = (0..config.depth)
            .map(|l| DoubleConv::new(if l == 0 { n_channels } else { w(l - 1) }, w(l)))
            .collect();
        let dec = (0..config.depth.saturating_sub(1))
            .map(|l| DoubleConv::new(w(l + 1) + w(l), w(l)))
            .collect();
        let mut g = Self {
            n_channels,
            config: config.clone(),
            enc,
            dec,
            head: Conv2d::zeros(n_channels, w(0), 1, 1, 0, true),
        };
        g.initialize(seed, label);
        g
    }

    fn initialize(&mut self, seed: u64, label: &str) {
        let zero_head = self.config.zero_head;
        let mut k = 0;
        for d in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            for conv in [&mut d.a, &mut d.b] {
                init_conv(conv, seed, &format!("{label}/conv{k}"));
                k += 1;
            }
        }
        if zero_head {
            self.head.weight.fill(F::zero());
        } else {
            init_conv(&mut self.head, seed, &format!("{label}/head"));
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `x` is channel-major `(N, B, H, W)`.
    pub fn forward_cm(&self, x: &Array4<F>) -> (Array4<F>, GeneratorCache<F>) {
        let depth = self.config.depth;
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pooled_dims = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (l, block) in self.enc.iter().enumerate() {
            if l > 0 {
                pooled_dims.push(h.dim());
                h = avg_pool2(&h);
            }
            let (y, c) = block.forward(&h);
            enc_caches.push(c);
            skips.push(y.clone());
            h = y;
        }
        let mut dec_caches: Vec<Option<DoubleConvCache<F>>> = (0..self.dec.len()).map(|_| None).collect();
        for l in (0..self.dec.len()).rev() {
            let cat = concat_channels(&upsample2(&h), &skips[l]);
            let (y, c) = self.dec[l].forward(&cat);
            dec_caches[l] = Some(c);
            h = y;
        }
        let (r, head) = self.head.forward(&h);
        let pre_clamp = x + &r;
        let out = pre_clamp.mapv(|v| v.max(-F::one()).min(F::one()));
        let cache = GeneratorCache {
            pre_clamp,
            enc: enc_caches,
            pooled_dims,
            dec: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
            head,
        };
        (out, cache)
    }

    /// Input gradient; parameter gradients accumulate into `grad`.
    pub fn backward_cm(
        &self,
        cache: &GeneratorCache<F>,
        dout: &Array4<F>,
        mut grad: Option<&mut Generator<F>>,
    ) -> Array4<F> {
        let one = F::one();
        let dpre = ndarray::Zip::from(&cache.pre_clamp).and(dout).map_collect(|&p, &g| {
            if p >= -one && p <= one {
                g
            } else {
                F::zero()
            }
        });
        let mut dh = self
            .head
            .backward(&cache.head, &dpre, grad.as_deref_mut().map(|g| &mut g.head));
        let depth = self.config.depth;
        let mut dskips: Vec<Option<Array4<F>>> = (0..depth).map(|_| None).collect();
        for l in 0..self.dec.len() {
            let dcat = self.dec[l].backward(&cache.dec[l], &dh, grad.as_deref_mut().map(|g| &mut g.dec[l]));
            let up_channels = self.config.base_width << (l + 1);
            let (dup, dskip) = split_channels(&dcat, up_channels);
            dskips[l] = Some(dskip);
            dh = upsample2_backward(&dup);
        }
        for l in (0..depth).rev() {
            if let Some(ds) = dskips[l].take() {
                if l < depth - 1 {
                    dh += &ds;
                }
            }
            let din = self.enc[l].backward(&cache.enc[l], &dh, grad.as_deref_mut().map(|g| &mut g.enc[l]));
            dh = if l > 0 {
                avg_pool2_backward(&din, cache.pooled_dims[l - 1])
            } else {
                din
            };
        }
        dh + dpre
    }

    pub fn check_input(&self, x: &Array4<F>) -> Result<(), NetError> {
        let (_, c, h, w) = x.dim();
        if c != self.n_channels {
            return Err(NetError::ChannelMismatch {
                expected: self.n_channels,
                actual: c,
            });
        }
        check_spatial(h, w, 1 << (self.config.depth - 1))
    }

    /// `(B, N, H, W)` in, same shape out, values in `[-1, 1]`.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>, NetError> {
        self.check_input(x)?;
        let xc = to_channel_major(x, self.n_channels)?;
        Ok(swap_batch_channels(&self.forward_cm(&xc).0))
    }
}

impl<F: Real> Parameters<F> for Generator<F> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (l, d) in self.enc.iter().enumerate() {
            conv_tensors(&format!("enc{l}.a"), &d.a, &mut out);
            conv_tensors(&format!("enc{l}.b"), &d.b, &mut out);
        }
        for (l, d) in self.dec.iter().enumerate() {
            conv_tensors(&format!("dec{l}.a"), &d.a, &mut out);
            conv_tensors(&format!("dec{l}.b"), &d.b, &mut out);
        }
        conv_tensors("head", &self.head, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for d in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            conv_tensors_mut(&mut d.a, &mut out);
            conv_tensors_mut(&mut d.b, &mut out);
        }
        conv_tensors_mut(&mut self.head, &mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            n_channels: self.n_channels,
            config: self.config.clone(),
            enc: self.enc.iter().map(DoubleConv::zeros_like).collect(),
            dec: self.dec.iter().map(DoubleConv::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }
}

/// Strided convolution classifier ending in a single logit per window.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<F> {
    n_channels: usize,
    config: DiscriminatorConfig,
    blocks: Vec<Conv2d<F>>,
    linear: Linear<F>,
}

pub struct DiscriminatorCache<F> {
    convs: Vec<ConvCache<F>>,
    acts: Vec<Array4<F>>,
    pooled: ndarray::Array2<F>,
}

impl<F: Real> Discriminator<F> {
    pub fn new(n_channels: usize, config: &DiscriminatorConfig, seed: u64, label: &str) -> Self {
        let w = |l: usize| config.base_width << l;
        let mut blocks: Vec<Conv2d<F>> = (0..config.n_blocks)
            .map(|l| Conv2d::zeros(w(l), if l == 0 { n_channels } else { w(l - 1) }, 4, 2, 1, true))
            .collect();
        for (k, conv) in blocks.iter_mut().enumerate() {
            init_conv(conv, seed, &format!("{label}/conv{k}"));
        }
        let last = w(config.n_blocks - 1);
        let mut linear = Linear::zeros(1, last);
        fill_normal(
            linear.weight.as_slice_mut().expect("contiguous"),
            1.0 / (last as f64).sqrt(),
            seed,
            &format!("{label}/linear"),
        );
        Self {
            n_channels,
            config: config.clone(),
            blocks,
            linear,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    /// Logits, one per window; `x` channel-major.
    pub fn forward_cm(&self, x: &Array4<F>) -> (Array1<F>, DiscriminatorCache<F>) {
        let mut h = x.clone();
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for conv in &self.blocks {
            let (z, c) = conv.forward(&h);
            h = leaky_relu(z);
            convs.push(c);
            acts.push(h.clone());
        }
        let pooled = global_mean(&h);
        let logits = self.linear.forward(&pooled).row(0).to_owned();
        (logits, DiscriminatorCache { convs, acts, pooled })
    }

    pub fn backward_cm(
        &self,
        cache: &DiscriminatorCache<F>,
        dlogits: &Array1<F>,
        mut grad: Option<&mut Discriminator<F>>,
    ) -> Array4<F> {
        let dy = dlogits.clone().insert_axis(ndarray::Axis(0));
        let dpooled = self
            .linear
            .backward(&cache.pooled, &dy, grad.as_deref_mut().map(|g| &mut g.linear));
        let last = cache.acts.last().expect("at least one block");
        let mut dh = global_mean_backward(&dpooled, last.dim());
        for k in (0..self.blocks.len()).rev() {
            let dz = leaky_relu_backward(&cache.acts[k], &dh);
            dh = self.blocks[k].backward(&cache.convs[k], &dz, grad.as_deref_mut().map(|g| &mut g.blocks[k]));
        }
        dh
    }

    /// Probabilities in `(0, 1)` for `(B, N, H, W)` input.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array1<F>, NetError> {
        let (_, _, h, w) = x.dim();
        check_spatial(h, w, 1 << self.config.n_blocks)?;
        let xc = to_channel_major(x, self.n_channels)?;
        Ok(self.forward_cm(&xc).0.mapv(|z| crate::losses::sigmoid(z)))
    }
}

impl<F: Real> Parameters<F> for Discriminator<F> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (k, c) in self.blocks.iter().enumerate() {
            conv_tensors(&format!("block{k}"), c, &mut out);
        }
        out.push((
            "linear.weight".into(),
            self.linear.weight.shape().to_vec(),
            self.linear.weight.as_slice().expect("contiguous"),
        ));
        out.push((
            "linear.bias".into(),
            vec![self.linear.bias.len()],
            self.linear.bias.as_slice().expect("contiguous"),
        ));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for c in self.blocks.iter_mut() {
            conv_tensors_mut(c, &mut out);
        }
        out.push(self.linear.weight.as_slice_mut().expect("contiguous"));
        out.push(self.linear.bias.as_slice_mut().expect("contiguous"));
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            n_channels: self.n_channels,
            config: self.config.clone(),
            blocks: self.blocks.iter().map(Conv2d::zeros_like).collect(),
            linear: self.linear.zeros_like(),
        }
    }
}

/// Frozen bias-free convolution stack; deterministic given its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder<F> {
    n_channels: usize,
    config: EncoderConfig,
    blocks: Vec<Conv2d<F>>,
}

pub struct EncoderCache<F> {
    convs: Vec<ConvCache<F>>,
    acts: Vec<Array4<F>>,
    pool_in_dims: Vec<(usize, usize, usize, usize)>,
}

impl<F: Real> FeatureEncoder<F> {
    pub fn new(n_channels: usize, config: &EncoderConfig) -> Self {
        let blocks = config.widths[..config.feature_block]
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let cin = if k == 0 { n_channels } else { config.widths[k - 1] };
                let mut conv = Conv2d::zeros(w, cin, 3, 1, 1, false);
                init_conv(&mut conv, config.seed, &format!("encoder/conv{k}"));
                conv
            })
            .collect();
        Self {
            n_channels,
            config: config.clone(),
            blocks,
        }
    }

    /// Replaces the weights of block `k`, for hand-checked instances.
    pub fn set_block_weight(&mut self, k: usize, weight: Array4<F>) {
        assert_eq!(weight.dim(), self.blocks[k].weight.dim(), "weight shape");
        self.blocks[k].weight = weight;
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward_cm(&self, x: &Array4<F>) -> (Array4<F>, EncoderCache<F>) {
        let mut h = x.clone();
        let mut cache = EncoderCache {
            convs: Vec::new(),
            acts: Vec::new(),
            pool_in_dims: Vec::new(),
        };
        for (k, conv) in self.blocks.iter().enumerate() {
            if k > 0 {
                cache.pool_in_dims.push(h.dim());
                h = avg_pool2(&h);
            }
            let (z, c) = conv.forward(&h);
            h = leaky_relu(z);
            cache.convs.push(c);
            cache.acts.push(h.clone());
        }
        (h, cache)
    }

    pub fn backward_cm(&self, cache: &EncoderCache<F>, dfeat: &Array4<F>) -> Array4<F> {
        let mut dh = dfeat.clone();
        for k in (0..self.blocks.len()).rev() {
            let dz = leaky_relu_backward(&cache.acts[k], &dh);
            dh = self.blocks[k].backward(&cache.convs[k], &dz, None);
            if k > 0 {
                dh = avg_pool2_backward(&dh, cache.pool_in_dims[k - 1]);
            }
        }
        dh
    }

    /// Feature maps `(B, C_f, H_f, W_f)` for `(B, N, H, W)` input.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>, NetError> {
        let xc = to_channel_major(x, self.n_channels)?;
        Ok(swap_batch_channels(&self.forward_cm(&xc).0))
    }
}

impl<F: Real> Parameters<F> for FeatureEncoder<F> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (k, c) in self.blocks.iter().enumerate() {
            conv_tensors(&format!("block{k}"), c, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for c in self.blocks.iter_mut() {
            conv_tensors_mut(c, &mut out);
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            n_channels: self.n_channels,
            config: self.config.clone(),
            blocks: self.blocks.iter().map(Conv2d::zeros_like).collect(),
        }
    }
}

/// The two generators, two discriminators and the frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<F> {
    /// X -> Y (artifact removal).
    pub g_y: Generator<F>,
    /// Y -> X (artifact synthesis).
    pub g_x: Generator<F>,
    pub d_x: Discriminator<F>,
    pub d_y: Discriminator<F>,
    pub encoder: FeatureEncoder<F>,
}

impl<F: Real> Networks<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let n = config.n_slices;
        Ok(Self {
            g_y: Generator::new(n, &config.generator, seed, "g_y"),
            g_x: Generator::new(n, &config.generator, seed, "g_x"),
            d_x: Discriminator::new(n, &config.discriminator, seed, "d_x"),
            d_y: Discriminator::new(n, &config.discriminator, seed, "d_y"),
            encoder: FeatureEncoder::new(n, &config.encoder),
        })
    }
}
