//! Shared encoder with up to three structurally identical decoders.
//!
//! The encoder is a small U-Net style stack: one 3x3 convolution per level,
//! 2x2 max-pooling between levels and an extra 3x3 convolution at the
//! bottleneck. Each decoder upsamples (nearest) back through the levels,
//! concatenating the encoder skip features, and ends in a 1x1 convolution to
//! per-class logits. All 3x3 convolutions use replicate padding, so a constant
//! input map stays constant.
//!
//! Parameters live in one flat `Vec<f32>`; gradients use the same layout,
//! which keeps the optimizer and checkpoint format trivial.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Map, MapPair};
use crate::seed;

/// Negative slope of the leaky ReLU activations.
const LEAK: f32 = 0.01;

/// Pixels in `[0, 1]` are mapped to `INPUT_SCALE * (v - INPUT_CENTER)`.
const INPUT_CENTER: f32 = 0.5;
const INPUT_SCALE: f32 = 2.0;

/// Lower/upper bound applied to sigmoid outputs so probabilities stay in (0, 1).
/// Small enough that saturated regions keep their ordering for peak picking.
pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Main,
    Dynamic,
    Prior,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Main, Head::Dynamic, Head::Prior];

    pub fn out_channels(self) -> usize {
        match self {
            Head::Main | Head::Dynamic => 2,
            Head::Prior => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Main => "main",
            Head::Dynamic => "dynamic",
            Head::Prior => "prior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(rows, cols)` of input images.
    pub input_dims: (usize, usize),
    /// Width of the full-resolution level; doubles at each level below.
    pub base_channels: usize,
    /// Width of the bottleneck.
    pub feature_channels: usize,
    /// Number of 2x down/upsampling stages.
    pub depth: usize,
    pub heads: Vec<Head>,
}

impl NetworkConfig {
    pub fn new(input_dims: (usize, usize), base_channels: usize, feature_channels: usize, depth: usize, heads: &[Head]) -> Self {
        let mut heads = heads.to_vec();
        heads.sort();
        heads.dedup();
        Self {
            input_dims,
            base_channels,
            feature_channels,
            depth,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.input_dims;
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("network depth {} outside 1..=8", self.depth)));
        }
        let step = 1usize << self.depth;
        if m == 0 || n == 0 || m % step != 0 || n % step != 0 {
            return Err(Error::Dimension(format!(
                "input {m}x{n} is not divisible by 2^depth = {step}"
            )));
        }
        if self.base_channels == 0 || self.feature_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !self.heads.contains(&Head::Main) {
            return Err(Error::Config("the main head is always required".into()));
        }
        Ok(())
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.heads.contains(&head)
    }

    /// Channel width of encoder level `level` (`depth` is the bottleneck).
    pub fn level_width(&self, level: usize) -> usize {
        if level >= self.depth {
            self.feature_channels
        } else {
            self.base_channels << level
        }
    }

    pub fn with_heads(&self, heads: &[Head]) -> Self {
        Self::new(self.input_dims, self.base_channels, self.feature_channels, self.depth, heads)
    }
}

/// A dense `channels x rows x cols` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_array(a: &Array3<f32>) -> Self {
        let (c, h, w) = a.dim();
        Self {
            c,
            h,
            w,
            data: a.iter().copied().collect(),
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    offset: usize,
}

impl Conv {
    fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn weight_len(&self) -> usize {
        self.out_c * self.fan_in()
    }

    fn len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    fn weights<'a>(&self, params: &'a [f32]) -> &'a [f32] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, params: &'a [f32]) -> &'a [f32] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }

    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Group normalization with a per-channel scale and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    channels: usize,
    groups: usize,
    offset: usize,
}

impl Norm {
    fn len(&self) -> usize {
        2 * self.channels
    }

    fn gamma<'a>(&self, params: &'a [f32]) -> &'a [f32] {
        &params[self.offset..self.offset + self.channels]
    }

    fn beta<'a>(&self, params: &'a [f32]) -> &'a [f32] {
        &params[self.offset + self.channels..self.offset + self.len()]
    }

    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// 3x3 convolution, group normalization, leaky ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    conv: Conv,
    norm: Norm,
}

impl Block {
    fn range(&self) -> Range<usize> {
        self.conv.offset..self.norm.range().end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Decoder {
    /// `levels[l]` produces level-`l` features.
    levels: Vec<Block>,
    out: Conv,
}

impl Decoder {
    fn range(&self) -> Range<usize> {
        let ranges = self.levels.iter().map(Block::range).chain([self.out.range()]);
        let (start, end) = ranges.fold((usize::MAX, 0), |(s, e), r| (s.min(r.start), e.max(r.end)));
        start..end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMapPair {
    pub maps: MapPair,
}

impl ProbabilityMapPair {
    pub fn dim(&self) -> (usize, usize) {
        self.maps[0].dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub main: ProbabilityMapPair,
    pub dynamic: Option<ProbabilityMapPair>,
    pub prior: Option<Map>,
}

/// Loss gradients with respect to branch probabilities, plus an optional
/// gradient with respect to the main-branch logits.
#[derive(Debug, Clone, Default)]
pub struct BranchGrads {
    pub main: Option<MapPair>,
    /// Added after the sigmoid; lets cross-entropy bypass its `p(1-p)` factor.
    pub main_logits: Option<MapPair>,
    pub dynamic: Option<MapPair>,
    pub prior: Option<Map>,
}

struct ConvCache {
    input: Tensor,
}

struct NormCache {
    xhat: Vec<f32>,
    /// One entry per group.
    inv_std: Vec<f32>,
}

struct EncoderTrace {
    convs: Vec<ConvCache>,
    norms: Vec<NormCache>,
    /// Post-ReLU outputs of each encoder conv, in layer order.
    acts: Vec<Tensor>,
    /// Argmax indices of each max-pool.
    pools: Vec<Vec<u32>>,
}

struct DecoderTrace {
    convs: Vec<ConvCache>,
    norms: Vec<NormCache>,
    acts: Vec<Tensor>,
    out_cache: ConvCache,
    logits: Vec<Vec<f32>>,
    probs: Vec<Vec<f64>>,
}

/// Everything `backward` needs from one training forward pass.
pub struct Trace {
    encoder: EncoderTrace,
    decoders: BTreeMap<Head, DecoderTrace>,
}

pub struct Model {
    config: NetworkConfig,
    params: Vec<f32>,
    encoder: Vec<Block>,
    decoders: BTreeMap<Head, Decoder>,
    encoder_evaluations: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            encoder_evaluations: AtomicU64::new(0),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .finish()
    }
}

struct LayoutBuilder {
    offset: usize,
}

impl LayoutBuilder {
    fn conv(&mut self, in_c: usize, out_c: usize, k: usize) -> Conv {
        let conv = Conv {
            in_c,
            out_c,
            k,
            offset: self.offset,
        };
        self.offset += conv.len();
        conv
    }

    fn block(&mut self, in_c: usize, out_c: usize) -> Block {
        let conv = self.conv(in_c, out_c, 3);
        let norm = Norm {
            channels: out_c,
            groups: norm_groups(out_c),
            offset: self.offset,
        };
        self.offset += norm.len();
        Block { conv, norm }
    }
}

/// Largest divisor of `channels` not above `channels / 4` (at least one), so
/// groups hold about four channels.
fn norm_groups(channels: usize) -> usize {
    (1..=(channels / 4).max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl Model {
    /// Builds a model with He-normal weights and zero biases drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layout = LayoutBuilder { offset: 0 };
        let depth = config.depth;
        let mut encoder = vec![layout.block(3, config.level_width(0))];
        for level in 1..=depth {
            encoder.push(layout.block(config.level_width(level - 1), config.level_width(level)));
        }
        encoder.push(layout.block(config.level_width(depth), config.level_width(depth)));

        let mut decoders = BTreeMap::new();
        for &head in &config.heads {
            let levels = (0..depth)
                .map(|l| layout.block(config.level_width(l + 1) + config.level_width(l), config.level_width(l)))
                .collect();
            let out = layout.conv(config.level_width(0), head.out_channels(), 1);
            decoders.insert(head, Decoder { levels, out });
        }

        let mut params = vec![0.0f32; layout.offset];
        let blocks = encoder.iter().chain(decoders.values().flat_map(|d| d.levels.iter()));
        for block in blocks.clone() {
            params[block.norm.offset..block.norm.offset + block.norm.channels].fill(1.0);
        }
        let all_convs = encoder
            .iter()
            .map(|b| &b.conv)
            .chain(decoders.values().flat_map(|d| d.levels.iter().map(|b| &b.conv).chain([&d.out])));
        for (index, conv) in all_convs.enumerate() {
            let gain = if conv.k == 1 { 1.0 } else { 2.0 };
            let std = (gain / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = seed::rng(&[seed, 0x1A7E, index as u64]);
            for w in &mut params[conv.offset..conv.offset + conv.weight_len()] {
                *w = normal.sample(&mut rng) as f32;
            }
        }

        Ok(Self {
            config,
            params,
            encoder,
            decoders,
            encoder_evaluations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn head_parameter_count(&self, head: Head) -> Option<usize> {
        self.decoders.get(&head).map(|d| d.range().len())
    }

    pub fn encoder_range(&self) -> Range<usize> {
        0..self.encoder.last().map(|b| b.range().end).unwrap_or(0)
    }

    pub fn head_range(&self, head: Head) -> Option<Range<usize>> {
        self.decoders.get(&head).map(Decoder::range)
    }

    /// Number of encoder passes run so far on this instance.
    pub fn encoder_evaluations(&self) -> u64 {
        self.encoder_evaluations.load(Ordering::Relaxed)
    }

    /// Copies encoder and shared-head parameters from `other` (same widths required).
    pub fn copy_shared_from(&mut self, other: &Model) -> Result<()> {
        let same_shape = self.config.input_dims == other.config.input_dims
            && self.config.base_channels == other.config.base_channels
            && self.config.feature_channels == other.config.feature_channels
            && self.config.depth == other.config.depth;
        if !same_shape {
            return Err(Error::Config("cannot warm-start from a model with different widths".into()));
        }
        let enc = self.encoder_range();
        self.params[enc.clone()].copy_from_slice(&other.params[enc]);
        for (head, dec) in &self.decoders {
            if let Some(src) = other.decoders.get(head) {
                let (dst, src) = (dec.range(), src.range());
                self.params[dst].copy_from_slice(&other.params[src]);
            }
        }
        Ok(())
    }

    fn check_image(&self, image: &Array3<f32>) -> Result<Tensor> {
        let (c, m, n) = image.dim();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, found {c}")));
        }
        if (m, n) != self.config.input_dims {
            return Err(Error::Dimension(format!(
                "image is {m}x{n} but the network expects {}x{}",
                self.config.input_dims.0, self.config.input_dims.1
            )));
        }
        let mut x = Tensor::from_array(image);
        for v in &mut x.data {
            *v = INPUT_SCALE * (*v - INPUT_CENTER);
        }
        Ok(x)
    }

    /// Inference through the encoder and the main decoder.
    pub fn forward_main(&self, image: &Array3<f32>) -> Result<ProbabilityMapPair> {
        let x = self.check_image(image)?;
        let enc = self.encode(x, false);
        let trace = self.decode(Head::Main, &enc, false);
        Ok(pair_from(&trace.probs, self.config.input_dims))
    }

    /// Pre-sigmoid main-head outputs. Monotone in the probabilities but free of
    /// the rounding that flattens saturated regions.
    pub fn forward_main_logits(&self, image: &Array3<f32>) -> Result<MapPair> {
        let x = self.check_image(image)?;
        let enc = self.encode(x, false);
        let trace = self.decode(Head::Main, &enc, false);
        let dims = self.config.input_dims;
        Ok(std::array::from_fn(|c| {
            Array2::from_shape_vec(dims, trace.logits[c].iter().map(|&z| f64::from(z)).collect())
                .expect("logit map shape")
        }))
    }

    /// All three branches from a single encoder pass. Requires every head.
    pub fn forward_all(&self, image: &Array3<f32>) -> Result<BranchOutputs> {
        for head in Head::ALL {
            if !self.config.has_head(head) {
                return Err(Error::MissingHead(head.name()));
            }
        }
        self.forward_train(image).map(|(out, _)| out)
    }

    /// Runs every instantiated head and keeps what `backward` needs.
    pub fn forward_train(&self, image: &Array3<f32>) -> Result<(BranchOutputs, Trace)> {
        let x = self.check_image(image)?;
        let encoder = self.encode(x, true);
        let decoders: BTreeMap<Head, DecoderTrace> = self
            .decoders
            .keys()
            .map(|&h| (h, self.decode(h, &encoder, true)))
            .collect();
        let dims = self.config.input_dims;
        let outputs = BranchOutputs {
            main: pair_from(&decoders[&Head::Main].probs, dims),
            dynamic: decoders.get(&Head::Dynamic).map(|t| pair_from(&t.probs, dims)),
            prior: decoders.get(&Head::Prior).map(|t| map_from(&t.probs[0], dims)),
        };
        Ok((outputs, Trace { encoder, decoders }))
    }

    fn encode(&self, x: Tensor, keep: bool) -> EncoderTrace {
        self.encoder_evaluations.fetch_add(1, Ordering::Relaxed);
        let mut trace = EncoderTrace {
            convs: Vec::new(),
            norms: Vec::new(),
            acts: Vec::new(),
            pools: Vec::new(),
        };
        let mut current = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if (1..=self.config.depth).contains(&i) {
                let (pooled, idx) = maxpool2(&current);
                if keep {
                    trace.pools.push(idx);
                }
                current = pooled;
            }
            let (y, cache, norm) = block_forward(block, &self.params, &current);
            if keep {
                trace.convs.push(cache);
                trace.norms.push(norm);
            }
            trace.acts.push(y.clone());
            current = y;
        }
        trace
    }

    /// Skip features for level `l` are `acts[l]`; the bottleneck is the last activation.
    fn decode(&self, head: Head, enc: &EncoderTrace, keep: bool) -> DecoderTrace {
        let dec = &self.decoders[&head];
        let mut trace = DecoderTrace {
            convs: Vec::new(),
            norms: Vec::new(),
            acts: Vec::new(),
            out_cache: ConvCache {
                input: Tensor::zeros(0, 0, 0),
            },
            logits: Vec::new(),
            probs: Vec::new(),
        };
        let mut current = enc.acts.last().expect("encoder output").clone();
        for level in (0..self.config.depth).rev() {
            let up = upsample2(&current);
            let cat = concat(&up, &enc.acts[level]);
            let (y, cache, norm) = block_forward(&dec.levels[level], &self.params, &cat);
            if keep {
                trace.convs.push(cache);
                trace.norms.push(norm);
                trace.acts.push(y.clone());
            }
            current = y;
        }
        let (logits, cache) = conv_forward(&dec.out, &self.params, &current);
        if keep {
            trace.out_cache = cache;
        }
        trace.logits = (0..logits.c).map(|c| logits.channel(c).to_vec()).collect();
        trace.probs = trace
            .logits
            .iter()
            .map(|ch| ch.iter().map(|&z| sigmoid(z)).collect())
            .collect();
        trace
    }

    /// Accumulates parameter gradients into `grad` given loss gradients with
    /// respect to each branch's probabilities. Heads without a gradient are skipped.
    pub fn backward(&self, trace: &Trace, grads: &BranchGrads, grad: &mut [f32]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let depth = self.config.depth;
        let enc = &trace.encoder;
        // Gradients w.r.t. every encoder activation.
        let mut d_acts: Vec<Tensor> = enc.acts.iter().map(|a| Tensor::zeros(a.c, a.h, a.w)).collect();

        for (&head, dtrace) in &trace.decoders {
            let dprobs: Vec<&Array2<f64>> = match head {
                Head::Main => grads.main.iter().flat_map(|p| p.iter()).collect(),
                Head::Dynamic => grads.dynamic.iter().flat_map(|p| p.iter()).collect(),
                Head::Prior => grads.prior.iter().collect(),
            };
            let direct: Vec<&Array2<f64>> = match head {
                Head::Main => grads.main_logits.iter().flat_map(|p| p.iter()).collect(),
                _ => Vec::new(),
            };
            if dprobs.is_empty() && direct.is_empty() {
                continue;
            }
            let dec = &self.decoders[&head];
            let (h, w) = self.config.input_dims;
            let mut dlogits = Tensor::zeros(dec.out.out_c, h, w);
            for (c, dp) in dprobs.iter().enumerate() {
                let probs = &dtrace.probs[c];
                let dst = &mut dlogits.data[c * h * w..(c + 1) * h * w];
                for ((d, &g), &p) in dst.iter_mut().zip(dp.iter()).zip(probs) {
                    *d = (g * p * (1.0 - p)) as f32;
                }
            }
            for (c, dz) in direct.iter().enumerate() {
                let dst = &mut dlogits.data[c * h * w..(c + 1) * h * w];
                for (d, &g) in dst.iter_mut().zip(dz.iter()) {
                    *d += g as f32;
                }
            }
            let mut dy = conv_backward(&dec.out, &self.params, &dtrace.out_cache, &dlogits, grad);
            // Decoder traces are stored from the deepest level upwards.
            for level in 0..depth {
                let step = depth - 1 - level;
                let block = &dec.levels[level];
                relu_backward(&mut dy, &dtrace.acts[step]);
                let dz = group_norm_backward(&block.norm, &self.params, &dtrace.norms[step], &dy, grad);
                let dcat = conv_backward(&block.conv, &self.params, &dtrace.convs[step], &dz, grad);
                let up_c = self.config.level_width(level + 1);
                let (dup, dskip) = split_channels(&dcat, up_c);
                add_into(&mut d_acts[level], &dskip);
                let dprev = upsample2_backward(&dup);
                if level + 1 == depth {
                    add_into(d_acts.last_mut().expect("bottleneck"), &dprev);
                    dy = Tensor::zeros(0, 0, 0);
                } else {
                    dy = dprev;
                }
            }
        }

        // Encoder, last layer first.
        let n_layers = self.encoder.len();
        let mut carry: Option<Tensor> = None;
        for i in (0..n_layers).rev() {
            let mut dy = d_acts[i].clone();
            if let Some(c) = carry.take() {
                add_into(&mut dy, &c);
            }
            let block = &self.encoder[i];
            relu_backward(&mut dy, &enc.acts[i]);
            let dz = group_norm_backward(&block.norm, &self.params, &enc.norms[i], &dy, grad);
            let dx = conv_backward(&block.conv, &self.params, &enc.convs[i], &dz, grad);
            if i == 0 {
                break;
            }
            carry = Some(if (1..=depth).contains(&i) {
                let prev = &enc.acts[i - 1];
                maxpool2_backward(&dx, &enc.pools[i - 1], prev.c, prev.h, prev.w)
            } else {
                dx
            });
        }
    }
}

pub(crate) fn sigmoid(z: f32) -> f64 {
    let s = 1.0 / (1.0 + (-(z as f64)).exp());
    s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn map_from(values: &[f64], (m, n): (usize, usize)) -> Map {
    Array2::from_shape_vec((m, n), values.to_vec()).expect("probability map shape")
}

fn pair_from(probs: &[Vec<f64>], dims: (usize, usize)) -> ProbabilityMapPair {
    ProbabilityMapPair {
        maps: [map_from(&probs[0], dims), map_from(&probs[1], dims)],
    }
}

/// `c = a * b + beta * c` with optional transposes; row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    let sa = if a_t { (1, m) } else { (k, 1) };
    let sb = if b_t { (1, k) } else { (n, 1) };
    gemm_strided((m, k, n), a, sa, b, sb, c, n, beta);
}

/// `c = a * b + beta * c` for strided views; `c` has row stride `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    ldc: usize,
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(k == 0 || (last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len()));
    assert!(last(m, n, ldc, 1) < c.len());
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Rows per im2col band, keeping each band near 4 MB.
fn band_rows(fan_in: usize, h: usize, w: usize) -> usize {
    ((1 << 20) / (fan_in * w).max(1)).clamp(1, h)
}

/// im2col of output rows `y0..y1` into `cols`, laid out `(c*9 + tap) x band`.
fn im2col3_rows(x: &Tensor, y0: usize, y1: usize, cols: &mut [f32]) {
    let (h, w) = (x.h, x.w);
    let bn = (y1 - y0) * w;
    for c in 0..x.c {
        let src = x.channel(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * bn..][..bn];
                for y in y0..y1 {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    let s = &src[sy * w..sy * w + w];
                    let d = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    match kx {
                        0 => {
                            d[0] = s[0];
                            d[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => d.copy_from_slice(s),
                        _ => {
                            d[..w - 1].copy_from_slice(&s[1..]);
                            d[w - 1] = s[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3_rows`]: scatters a band of columns into `out`.
fn col2im3_rows(cols: &[f32], y0: usize, y1: usize, out: &mut Tensor) {
    let (h, w) = (out.h, out.w);
    let hw = h * w;
    let bn = (y1 - y0) * w;
    for ci in 0..out.c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * bn..][..bn];
                for y in y0..y1 {
                    let sy = (y + ky).saturating_sub(1).min(h - 1);
                    let s = &row[(y - y0) * w..(y - y0 + 1) * w];
                    let d = &mut dst[sy * w..sy * w + w];
                    match kx {
                        0 => {
                            d[0] += s[0];
                            for (dv, sv) in d[..w - 1].iter_mut().zip(&s[1..]) {
                                *dv += sv;
                            }
                        }
                        1 => {
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += sv;
                            }
                        }
                        _ => {
                            for (dv, sv) in d[1..].iter_mut().zip(&s[..w - 1]) {
                                *dv += sv;
                            }
                            d[w - 1] += s[w - 1];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
fn im2col3(x: &Tensor) -> Vec<f32> {
    let mut cols = vec![0.0f32; x.c * 9 * x.plane()];
    im2col3_rows(x, 0, x.h, &mut cols);
    cols
}

#[cfg(test)]
fn col2im3(cols: &[f32], c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(c, h, w);
    col2im3_rows(cols, 0, h, &mut out);
    out
}

fn conv_forward(conv: &Conv, params: &[f32], x: &Tensor) -> (Tensor, ConvCache) {
    debug_assert_eq!(x.c, conv.in_c);
    let (h, w) = (x.h, x.w);
    let hw = x.plane();
    let k = conv.fan_in();
    let weights = conv.weights(params);
    let mut y = Tensor::zeros(conv.out_c, h, w);
    if conv.k == 3 {
        let band = band_rows(k, h, w);
        let mut cols = vec![0.0f32; k * band * w];
        for y0 in (0..h).step_by(band) {
            let y1 = (y0 + band).min(h);
            let bn = (y1 - y0) * w;
            im2col3_rows(x, y0, y1, &mut cols[..k * bn]);
            gemm_strided((conv.out_c, k, bn), weights, (k, 1), &cols, (bn, 1), &mut y.data[y0 * w..], hw, 0.0);
        }
    } else {
        gemm(conv.out_c, k, hw, weights, false, &x.data, false, &mut y.data, 0.0);
    }
    for (o, &b) in conv.bias(params).iter().enumerate() {
        for v in &mut y.data[o * hw..(o + 1) * hw] {
            *v += b;
        }
    }
    (y, ConvCache { input: x.clone() })
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn conv_backward(conv: &Conv, params: &[f32], cache: &ConvCache, dy: &Tensor, grad: &mut [f32]) -> Tensor {
    let x = &cache.input;
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let k = conv.fan_in();
    let out_c = conv.out_c;
    let weights = conv.weights(params);
    {
        let gb = &mut grad[conv.offset + conv.weight_len()..conv.offset + conv.len()];
        for (o, g) in gb.iter_mut().enumerate() {
            *g += dy.data[o * hw..(o + 1) * hw].iter().sum::<f32>();
        }
    }
    if conv.k != 3 {
        let gw = &mut grad[conv.offset..conv.offset + conv.weight_len()];
        gemm(out_c, hw, k, &dy.data, false, &x.data, true, gw, 1.0);
        let mut dx = Tensor::zeros(c, h, w);
        gemm(k, out_c, hw, weights, true, &dy.data, false, &mut dx.data, 0.0);
        return dx;
    }
    let band = band_rows(k, h, w);
    let mut cols = vec![0.0f32; k * band * w];
    let mut dcols = vec![0.0f32; k * band * w];
    let mut dx = Tensor::zeros(c, h, w);
    for y0 in (0..h).step_by(band) {
        let y1 = (y0 + band).min(h);
        let bn = (y1 - y0) * w;
        let dy_band = &dy.data[y0 * w..];
        im2col3_rows(x, y0, y1, &mut cols[..k * bn]);
        let gw = &mut grad[conv.offset..conv.offset + conv.weight_len()];
        gemm_strided((out_c, bn, k), dy_band, (hw, 1), &cols, (1, bn), gw, k, 1.0);
        gemm_strided((k, out_c, bn), weights, (1, k), dy_band, (hw, 1), &mut dcols, bn, 0.0);
        col2im3_rows(&dcols[..k * bn], y0, y1, &mut dx);
    }
    dx
}

fn block_forward(block: &Block, params: &[f32], x: &Tensor) -> (Tensor, ConvCache, NormCache) {
    let (z, cache) = conv_forward(&block.conv, params, x);
    let (mut y, norm) = group_norm_forward(&block.norm, params, &z);
    relu_inplace(&mut y);
    (y, cache, norm)
}

const NORM_EPS: f64 = 1e-5;

fn group_norm_forward(norm: &Norm, params: &[f32], x: &Tensor) -> (Tensor, NormCache) {
    let hw = x.plane();
    let span = x.c / norm.groups * hw;
    let (gamma, beta) = (norm.gamma(params), norm.beta(params));
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut inv_std = Vec::with_capacity(norm.groups);
    for (src, dst) in x.data.chunks(span).zip(xhat.chunks_mut(span)) {
        let n = src.len() as f64;
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = ((v as f64 - mean) * inv) as f32;
        }
        inv_std.push(inv as f32);
    }
    let mut y = Tensor::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        let range = c * hw..(c + 1) * hw;
        for (o, &v) in y.data[range.clone()].iter_mut().zip(&xhat[range]) {
            *o = gamma[c] * v + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn group_norm_backward(norm: &Norm, params: &[f32], cache: &NormCache, dy: &Tensor, grad: &mut [f32]) -> Tensor {
    let hw = dy.plane();
    let gamma = norm.gamma(params);
    let mut dxhat = vec![0.0f32; dy.data.len()];
    for c in 0..dy.c {
        let range = c * hw..(c + 1) * hw;
        let (mut dg, mut db) = (0.0f64, 0.0f64);
        for ((d, &g), &xh) in dxhat[range.clone()].iter_mut().zip(&dy.data[range.clone()]).zip(&cache.xhat[range]) {
            dg += g as f64 * xh as f64;
            db += g as f64;
            *d = g * gamma[c];
        }
        grad[norm.offset + c] += dg as f32;
        grad[norm.offset + norm.channels + c] += db as f32;
    }
    let span = dy.c / norm.groups * hw;
    let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
    for (g, ((dst, dxh), xh)) in dx.data.chunks_mut(span).zip(dxhat.chunks(span)).zip(cache.xhat.chunks(span)).enumerate() {
        let n = dst.len() as f64;
        let mean_d = dxh.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / n;
        let inv = cache.inv_std[g] as f64;
        for ((d, &a), &b) in dst.iter_mut().zip(dxh).zip(xh) {
            *d = (inv * (a as f64 - mean_d - b as f64 * mean_dx)) as f32;
        }
    }
    dx
}

fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAK;
        }
    }
}

/// The sign of the activation equals the sign of its input, so the output alone
/// determines the slope.
fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v < 0.0 {
            *d *= LEAK;
        }
    }
}

fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut idx = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        let base = c * x.plane();
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = c * h2 * w2 + y * w2 + xx;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward(dy: &Tensor, idx: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(c, h, w);
    for (&g, &i) in dy.data.iter().zip(idx) {
        dx.data[i as usize] += g;
    }
    dx
}

fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut out.data[c * h2 * w2..(c + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * x.w..(y / 2) * x.w + x.w];
            for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    dx
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * x.plane();
    (
        Tensor {
            c: first,
            h: x.h,
            w: x.w,
            data: x.data[..cut].to_vec(),
        },
        Tensor {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: x.data[cut..].to_vec(),
        },
    )
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CYTOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    global_step: u64,
    parameter_count: usize,
    /// Free-form metadata such as the training configuration.
    metadata: serde_json::Value,
}

/// What a checkpoint carries besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub global_step: u64,
    pub metadata: serde_json::Value,
}

/// Writes `model` atomically: the file is written beside `path` and renamed.
///
/// Layout: magic `CYTOCKPT`, `u32` version, `u32` header length, JSON header,
/// then the parameters as little-endian `f32`.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let header = CheckpointHeader {
        network: model.config.clone(),
        global_step: meta.global_step,
        parameter_count: model.params.len(),
        metadata: meta.metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header.len() + 4 * model.params.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in &model.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; if `expected` is given, the stored network config must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])?;
    if let Some(expected) = expected {
        if *expected != header.network {
            return Err(bad("network config does not match the checkpoint"));
        }
    }
    let mut model = Model::new(header.network, 0)?;
    let blob = &bytes[header_end..];
    if header.parameter_count != model.params.len() || blob.len() != 4 * model.params.len() {
        return Err(bad("parameter blob size does not match the network config"));
    }
    for (p, chunk) in model.params.iter_mut().zip(blob.chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok((
        model,
        CheckpointMeta {
            global_step: header.global_step,
            metadata: header.metadata,
        },
    ))
}
