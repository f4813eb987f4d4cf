//! Forward-only replica of the shared encoder and its two decoders.
//!
//! Tensors are dense `h x w x c` grids stored row-major with the channel
//! index fastest. Convolution weights use the layout `k, k, in, out`
//! (row-major, output channel fastest): the weight of tap `(ky, kx)` from
//! input channel `ci` to output channel `co` sits at
//! `((ky * k + kx) * in_c + ci) * out_c + co`. Padding follows the usual
//! "same" rule with zero fill, so the output side is `ceil(side / stride)`.
//!
//! A weights sidecar is the 8-byte magic `AERONET1`, the base width and the
//! regression input side as little-endian `u64`, then every layer in
//! schedule order (encoder, segmentation decoder, regression decoder) as
//! little-endian `f64` weights followed by biases.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::raster::ProbMap;
use crate::rng::{derive_seed, XorShift64Star};

/// Dilation rates of the context chain at the lowest resolution.
pub const DILATIONS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_BASE_WIDTH: usize = 64;
pub const DEFAULT_INPUT_SIZE: usize = 512;
pub const FC_UNITS: usize = 512;
/// Half-width of the uniform weight initializer.
pub const INIT_RANGE: f64 = 0.05;
pub const WEIGHTS_MAGIC: &[u8; 8] = b"AERONET1";

#[derive(Error, Debug)]
pub enum NetError {
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("max pooling needs even dimensions, got {0}x{1}")]
    OddDimension(usize, usize),
    #[error("bad input shape: {0}")]
    BadInputShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("weights file: {0}")]
    WeightsFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(NetError::BadInputShape(format!("{h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(NetError::BadInputShape(format!(
                "{} values for {h}x{w}x{c}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::BadInputShape("non-finite value".into()));
        }
        Ok(Self { h, w, c, data })
    }

    /// Grayscale map replicated into `channels` identical planes.
    pub fn from_gray(map: &ProbMap, channels: usize) -> Self {
        let mut data = Vec::with_capacity(map.values.len() * channels);
        for &v in &map.values {
            data.extend(std::iter::repeat_n(v, channels));
        }
        Self {
            h: map.height,
            w: map.width,
            c: channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Channel-wise concatenation of equally sized tensors.
    pub fn concat(parts: &[&Tensor3]) -> Result<Tensor3, NetError> {
        let first = parts
            .first()
            .ok_or_else(|| NetError::ShapeMismatch("nothing to concatenate".into()))?;
        let (h, w) = (first.h, first.w);
        if let Some(p) = parts.iter().find(|p| p.h != h || p.w != w) {
            return Err(NetError::ShapeMismatch(format!(
                "cannot concatenate {}x{} with {h}x{w}",
                p.h, p.w
            )));
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.c..(i + 1) * p.c]);
            }
        }
        Ok(Tensor3 { h, w, c, data })
    }

    /// Per-channel mean over all spatial positions.
    pub fn global_average_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for px in self.data.chunks_exact(self.c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (self.h * self.w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub dilation: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, in_c: usize, out_c: usize, dilation: usize, stride: usize) -> Self {
        Self {
            kernel,
            in_c,
            out_c,
            dilation,
            stride,
            weights: vec![0.0; kernel * kernel * in_c * out_c],
            bias: vec![0.0; out_c],
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.kernel == 0 || self.in_c == 0 || self.out_c == 0 {
            return Err(NetError::InvalidLayer("zero kernel or channel count".into()));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(NetError::InvalidLayer("dilation and stride must be positive".into()));
        }
        if self.weights.len() != self.kernel * self.kernel * self.in_c * self.out_c {
            return Err(NetError::InvalidLayer(format!(
                "{} weights for a {k}x{k}x{}x{} kernel",
                self.weights.len(),
                self.in_c,
                self.out_c,
                k = self.kernel
            )));
        }
        if self.bias.len() != self.out_c {
            return Err(NetError::InvalidLayer(format!(
                "{} biases for {} outputs",
                self.bias.len(),
                self.out_c
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Fully connected layer; weight `(i, o)` at `i * out_n + o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_n: usize,
    pub out_n: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_n: usize, out_n: usize) -> Self {
        Self {
            in_n,
            out_n,
            weights: vec![0.0; in_n * out_n],
            bias: vec![0.0; out_n],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64], relu: bool) -> Result<Vec<f64>, NetError> {
        if x.len() != self.in_n {
            return Err(NetError::BadInputShape(format!(
                "dense layer expects {} inputs, got {}",
                self.in_n,
                x.len()
            )));
        }
        let mut out = self.bias.clone();
        for (i, &v) in x.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.out_n..(i + 1) * self.out_n];
            for (o, w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
        if relu {
            out.iter_mut().for_each(|o| *o = o.max(0.0));
        }
        Ok(out)
    }
}

/// Leading padding of a "same" convolution along one axis.
fn same_pad_before(side: usize, kernel: usize, dilation: usize, stride: usize) -> usize {
    let out = side.div_ceil(stride);
    let span = dilation * (kernel - 1) + 1;
    ((out - 1) * stride + span).saturating_sub(side) / 2
}

fn convolve(x: &Tensor3, layer: &ConvLayer, relu: bool) -> Result<Tensor3, NetError> {
    layer.validate()?;
    if x.c != layer.in_c {
        return Err(NetError::ChannelMismatch {
            expected: layer.in_c,
            got: x.c,
        });
    }
    let (k, d, s) = (layer.kernel, layer.dilation, layer.stride);
    let (oh, ow) = (x.h.div_ceil(s), x.w.div_ceil(s));
    let pt = same_pad_before(x.h, k, d, s) as isize;
    let pl = same_pad_before(x.w, k, d, s) as isize;
    let (in_c, out_c) = (layer.in_c, layer.out_c);
    let mut out = Tensor3::zeros(oh, ow, out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out.data[(oy * ow + ox) * out_c..(oy * ow + ox + 1) * out_c];
            acc.copy_from_slice(&layer.bias);
            for ky in 0..k {
                let iy = (oy * s + ky * d) as isize - pt;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx * d) as isize - pl;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let base = (iy as usize * x.w + ix as usize) * in_c;
                    let px = &x.data[base..base + in_c];
                    let wbase = (ky * k + kx) * in_c * out_c;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &layer.weights[wbase + ci * out_c..wbase + (ci + 1) * out_c];
                        for (a, w) in acc.iter_mut().zip(wrow) {
                            *a += v * w;
                        }
                    }
                }
            }
            if relu {
                acc.iter_mut().for_each(|a| *a = a.max(0.0));
            }
        }
    }
    Ok(out)
}

/// Same-padded dilated convolution followed by ReLU.
pub fn conv2d(x: &Tensor3, layer: &ConvLayer) -> Result<Tensor3, NetError> {
    convolve(x, layer, true)
}

/// Per-channel 2x2 max with stride 2.
pub fn maxpool2(x: &Tensor3) -> Result<Tensor3, NetError> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(NetError::OddDimension(x.h, x.w));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor3::zeros(oh, ow, x.c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..x.c {
                let m = x
                    .at(2 * oy, 2 * ox, ch)
                    .max(x.at(2 * oy, 2 * ox + 1, ch))
                    .max(x.at(2 * oy + 1, 2 * ox, ch))
                    .max(x.at(2 * oy + 1, 2 * ox + 1, ch));
                out.set(oy, ox, ch, m);
            }
        }
    }
    Ok(out)
}

/// Stride-2 transposed 2x2 convolution followed by ReLU.
pub fn upconv2(x: &Tensor3, layer: &ConvLayer) -> Result<Tensor3, NetError> {
    layer.validate()?;
    if layer.kernel != 2 || layer.stride != 2 {
        return Err(NetError::InvalidLayer(
            "up-convolution needs a 2x2 kernel with stride 2".into(),
        ));
    }
    if x.c != layer.in_c {
        return Err(NetError::ChannelMismatch {
            expected: layer.in_c,
            got: x.c,
        });
    }
    let (in_c, out_c) = (layer.in_c, layer.out_c);
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor3::zeros(oh, ow, out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, ky, xx, kx) = (oy / 2, oy % 2, ox / 2, ox % 2);
            let acc = &mut out.data[(oy * ow + ox) * out_c..(oy * ow + ox + 1) * out_c];
            acc.copy_from_slice(&layer.bias);
            let base = (y * x.w + xx) * in_c;
            let wbase = (ky * 2 + kx) * in_c * out_c;
            for (ci, &v) in x.data[base..base + in_c].iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let wrow = &layer.weights[wbase + ci * out_c..wbase + (ci + 1) * out_c];
                for (a, w) in acc.iter_mut().zip(wrow) {
                    *a += v * w;
                }
            }
            acc.iter_mut().for_each(|a| *a = a.max(0.0));
        }
    }
    Ok(out)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Channel width of the first encoder block; later blocks double it.
    pub base_width: usize,
    /// Input side the regression head is built for.
    pub input_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: DEFAULT_BASE_WIDTH,
            input_size: DEFAULT_INPUT_SIZE,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_width == 0 {
            return Err(NetError::InvalidLayer("base width must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 64 != 0 {
            return Err(NetError::BadInputShape(format!(
                "regression input side {} is not a positive multiple of 64",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Channel count of the context chain.
    pub fn context_width(&self) -> usize {
        8 * self.base_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `(-INIT_RANGE, INIT_RANGE)`, one derived stream per layer.
    Uniform { seed: u64 },
}

struct LayerFactory {
    init: Init,
    next: u64,
}

impl LayerFactory {
    fn fill(&mut self, n: usize) -> Vec<f64> {
        let stream = self.next;
        self.next += 1;
        match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform { seed } => {
                let mut rng = XorShift64Star::new(derive_seed(seed, stream));
                (0..n).map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE)).collect()
            }
        }
    }

    fn conv(&mut self, k: usize, in_c: usize, out_c: usize, d: usize, s: usize) -> ConvLayer {
        let weights = self.fill(k * k * in_c * out_c);
        let bias = self.fill(out_c);
        ConvLayer {
            kernel: k,
            in_c,
            out_c,
            dilation: d,
            stride: s,
            weights,
            bias,
        }
    }

    fn dense(&mut self, in_n: usize, out_n: usize) -> Dense {
        let weights = self.fill(in_n * out_n);
        let bias = self.fill(out_n);
        Dense {
            in_n,
            out_n,
            weights,
            bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniEncoder {
    /// Two convolutions per resolution, three resolutions.
    pub convs: Vec<ConvLayer>,
    pub dilated: Vec<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    pub up: ConvLayer,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    pub blocks: Vec<UpBlock>,
    pub head: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegDecoder {
    pub input_size: usize,
    pub blocks: Vec<[ConvLayer; 3]>,
    pub fc: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub encoder: UniEncoder,
    pub seg: SegDecoder,
    pub reg: RegDecoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Pre-pool feature maps at full, half and quarter resolution.
    pub skips: Vec<Tensor3>,
    pub dilated: Vec<Tensor3>,
    pub final_map: Tensor3,
    /// Output shape after every encoder row, input first.
    pub trace: Vec<(String, (usize, usize, usize))>,
}

impl Network {
    pub fn new(config: NetConfig, init: Init) -> Result<Self, NetError> {
        config.validate()?;
        let b = config.base_width;
        let mut f = LayerFactory { init, next: 0 };
        let mut convs = Vec::new();
        let mut in_c = 3;
        for width in [b, 2 * b, 4 * b] {
            convs.push(f.conv(3, in_c, width, 1, 1));
            convs.push(f.conv(3, width, width, 1, 1));
            in_c = width;
        }
        let ctx = config.context_width();
        let dilated = DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| f.conv(3, if i == 0 { 4 * b } else { ctx }, ctx, d, 1))
            .collect();
        let encoder = UniEncoder { convs, dilated };

        let mut blocks = Vec::new();
        let mut cur = ctx;
        for width in [4 * b, 2 * b, b] {
            blocks.push(UpBlock {
                up: f.conv(2, cur, width, 1, 2),
                conv1: f.conv(3, 2 * width, width, 1, 1),
                conv2: f.conv(3, width, width, 1, 1),
            });
            cur = width;
        }
        let head = f.conv(1, b, 1, 1, 1);
        let seg = SegDecoder { blocks, head };

        let mut rblocks = Vec::new();
        let mut cur = DILATIONS.len() * ctx;
        for _ in 0..3 {
            rblocks.push([
                f.conv(3, cur, ctx, 1, 2),
                f.conv(3, ctx, ctx, 1, 1),
                f.conv(3, ctx, ctx, 1, 1),
            ]);
            cur = ctx;
        }
        let side = config.input_size / 64;
        let fc = vec![
            f.dense(side * side * ctx, FC_UNITS),
            f.dense(FC_UNITS, FC_UNITS),
            f.dense(FC_UNITS, 2),
        ];
        let reg = RegDecoder {
            input_size: config.input_size,
            blocks: rblocks,
            fc,
        };
        Ok(Self {
            config,
            encoder,
            seg,
            reg,
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        let enc = self
            .encoder
            .convs
            .iter()
            .chain(&self.encoder.dilated)
            .map(ConvLayer::param_count)
            .sum();
        let seg = self
            .seg
            .blocks
            .iter()
            .flat_map(|b| [&b.up, &b.conv1, &b.conv2])
            .chain([&self.seg.head])
            .map(|l| l.param_count())
            .sum();
        let reg = self
            .reg
            .blocks
            .iter()
            .flatten()
            .map(ConvLayer::param_count)
            .sum::<usize>()
            + self.reg.fc.iter().map(Dense::param_count).sum::<usize>();
        ParamCounts {
            encoder: enc,
            seg_decoder: seg,
            reg_decoder: reg,
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for l in self
            .encoder
            .convs
            .iter_mut()
            .chain(self.encoder.dilated.iter_mut())
        {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        for b in self.seg.blocks.iter_mut() {
            for l in [&mut b.up, &mut b.conv1, &mut b.conv2] {
                out.push(&mut l.weights);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.seg.head.weights);
        out.push(&mut self.seg.head.bias);
        for l in self.reg.blocks.iter_mut().flatten() {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        for d in self.reg.fc.iter_mut() {
            out.push(&mut d.weights);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut me = self.clone();
        let total = self.param_counts().total();
        let mut out = Vec::with_capacity(24 + 8 * total);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.config.base_width as u64).to_le_bytes());
        out.extend_from_slice(&(self.config.input_size as u64).to_le_bytes());
        for t in me.tensors_mut() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, NetError> {
        if data.len() < 24 || &data[..8] != WEIGHTS_MAGIC {
            return Err(NetError::WeightsFormat("missing magic header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(data[i..i + 8].try_into().expect("8 bytes"));
        let config = NetConfig {
            base_width: word(8) as usize,
            input_size: word(16) as usize,
        };
        config.validate()?;
        let mut net = Network::new(config, Init::Zeros)?;
        let expected = 24 + 8 * net.param_counts().total();
        if data.len() != expected {
            return Err(NetError::WeightsFormat(format!(
                "expected {expected} bytes, found {}",
                data.len()
            )));
        }
        let mut pos = 24;
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(data[pos..pos + 8].try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(NetError::WeightsFormat("non-finite weight".into()));
                }
                pos += 8;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn forward_seg(&self, x: &Tensor3) -> Result<ProbMap, NetError> {
        segdecoder_forward(&uniencoder_forward(x, &self.encoder)?, &self.seg)
    }

    /// Global average of the final encoder map.
    pub fn descriptor(&self, x: &Tensor3) -> Result<Vec<f64>, NetError> {
        Ok(uniencoder_forward(x, &self.encoder)?
            .final_map
            .global_average_pool())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub seg_decoder: usize,
    pub reg_decoder: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.seg_decoder + self.reg_decoder
    }
}

pub fn uniencoder_forward(x: &Tensor3, enc: &UniEncoder) -> Result<EncoderOutput, NetError> {
    if x.c != 3 || x.h % 8 != 0 || x.w % 8 != 0 || x.h == 0 || x.w == 0 {
        return Err(NetError::BadInputShape(format!(
            "encoder needs HxWx3 with sides divisible by 8, got {}x{}x{}",
            x.h, x.w, x.c
        )));
    }
    if enc.convs.len() != 6 || enc.dilated.len() != DILATIONS.len() {
        return Err(NetError::InvalidLayer("incomplete encoder".into()));
    }
    let mut trace = vec![("input".to_string(), x.shape())];
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for (block, pair) in enc.convs.chunks(2).enumerate() {
        for (j, layer) in pair.iter().enumerate() {
            cur = conv2d(&cur, layer)?;
            trace.push((format!("conv{}_{}", block + 1, j + 1), cur.shape()));
        }
        let pooled = maxpool2(&cur)?;
        skips.push(std::mem::replace(&mut cur, pooled));
        trace.push((format!("pool{}", block + 1), cur.shape()));
    }
    let mut dilated = Vec::new();
    for layer in &enc.dilated {
        cur = conv2d(&cur, layer)?;
        trace.push((format!("dilated_d{}", layer.dilation), cur.shape()));
        dilated.push(cur.clone());
    }
    Ok(EncoderOutput {
        skips,
        dilated,
        final_map: cur,
        trace,
    })
}

fn check_encoder_output(enc: &EncoderOutput) -> Result<(), NetError> {
    if enc.dilated.len() != DILATIONS.len() || enc.skips.len() != 3 {
        return Err(NetError::ShapeMismatch(format!(
            "{} dilated maps and {} skips",
            enc.dilated.len(),
            enc.skips.len()
        )));
    }
    let s = enc.dilated[0].shape();
    if enc.dilated.iter().any(|t| t.shape() != s) {
        return Err(NetError::ShapeMismatch("dilated maps differ in shape".into()));
    }
    Ok(())
}

pub fn segdecoder_forward(enc: &EncoderOutput, dec: &SegDecoder) -> Result<ProbMap, NetError> {
    check_encoder_output(enc)?;
    if dec.blocks.len() != enc.skips.len() {
        return Err(NetError::ShapeMismatch("decoder block count".into()));
    }
    let mut cur = enc.dilated[0].clone();
    for t in &enc.dilated[1..] {
        for (a, b) in cur.data.iter_mut().zip(&t.data) {
            *a += b;
        }
    }
    for (block, skip) in dec.blocks.iter().zip(enc.skips.iter().rev()) {
        let up = upconv2(&cur, &block.up)?;
        if (up.h, up.w) != (skip.h, skip.w) {
            return Err(NetError::ShapeMismatch(format!(
                "upsampled {}x{} against skip {}x{}",
                up.h, up.w, skip.h, skip.w
            )));
        }
        let joined = Tensor3::concat(&[&up, skip])?;
        cur = conv2d(&conv2d(&joined, &block.conv1)?, &block.conv2)?;
    }
    let logits = convolve(&cur, &dec.head, false)?;
    if logits.c != 1 {
        return Err(NetError::ShapeMismatch("head must have one output".into()));
    }
    let values = logits.data.iter().map(|&v| sigmoid(v)).collect();
    ProbMap::from_values(logits.w, logits.h, values)
        .map_err(|e| NetError::ShapeMismatch(e.to_string()))
}

/// Regression head output and the spatial side entering the dense layers.
pub fn regdecoder_forward(
    enc: &EncoderOutput,
    dec: &RegDecoder,
) -> Result<((f64, f64), usize), NetError> {
    check_encoder_output(enc)?;
    let side = dec.input_size / 8;
    let d0 = &enc.dilated[0];
    if d0.h != side || d0.w != side {
        return Err(NetError::BadInputShape(format!(
            "regression head built for {0}x{0} input, encoder map is {1}x{2}",
            dec.input_size, d0.h, d0.w
        )));
    }
    let parts: Vec<&Tensor3> = enc.dilated.iter().collect();
    let mut cur = Tensor3::concat(&parts)?;
    for block in &dec.blocks {
        for layer in block {
            cur = conv2d(&cur, layer)?;
        }
    }
    let fc_side = cur.h;
    let mut v = cur.data;
    let last = dec.fc.len().saturating_sub(1);
    for (i, layer) in dec.fc.iter().enumerate() {
        v = layer.forward(&v, i != last)?;
    }
    if v.len() != 2 {
        return Err(NetError::ShapeMismatch("regression head must have 2 outputs".into()));
    }
    Ok(((v[0], v[1]), fc_side))
}

/// All-ones single-channel 3x3 convolutions at the given dilations applied
/// to a delta impulse; returns the side of the nonzero support.
pub fn receptive_field(dilations: &[usize]) -> usize {
    let reach: usize = dilations.iter().sum();
    let side = 2 * reach + 3;
    let mut x = Tensor3::zeros(side, side, 1);
    x.set(side / 2, side / 2, 0, 1.0);
    for &d in dilations {
        let layer = ConvLayer {
            weights: vec![1.0; 9],
            ..ConvLayer::zeros(3, 1, 1, d, 1)
        };
        x = conv2d(&x, &layer).expect("single-channel layer");
    }
    let rows: Vec<usize> = (0..side)
        .filter(|&r| (0..side).any(|c| x.at(r, c, 0) != 0.0))
        .collect();
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    }
}

pub fn receptive_field_of_dilated_chain() -> usize {
    receptive_field(&DILATIONS)
}

/// One row of the static layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub stage: &'static str,
    pub layer: String,
    pub kernel: usize,
    pub filters: usize,
    pub dilation: usize,
    pub stride: usize,
    pub output: (usize, usize, usize),
    pub params: usize,
}

/// Layer-by-layer output shapes for an `n x n x 3` input, derived by shape
/// arithmetic alone.
pub fn shape_table(config: &NetConfig, n: usize) -> Result<Vec<ShapeRow>, NetError> {
    config.validate()?;
    if n == 0 || n % 8 != 0 {
        return Err(NetError::BadInputShape(format!(
            "input side {n} is not a positive multiple of 8"
        )));
    }
    let b = config.base_width;
    let ctx = config.context_width();
    let mut rows = Vec::new();
    let conv_params = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let mut row = |stage, layer: String, k, f, d, s, out, p| {
        rows.push(ShapeRow {
            stage,
            layer,
            kernel: k,
            filters: f,
            dilation: d,
            stride: s,
            output: out,
            params: p,
        })
    };
    row("encoder", "input".into(), 0, 0, 0, 0, (n, n, 3), 0);
    let (mut side, mut c) = (n, 3);
    for (i, width) in [b, 2 * b, 4 * b].into_iter().enumerate() {
        row("encoder", format!("conv{}_1", i + 1), 3, width, 1, 1, (side, side, width), conv_params(3, c, width));
        row("encoder", format!("conv{}_2", i + 1), 3, width, 1, 1, (side, side, width), conv_params(3, width, width));
        side /= 2;
        c = width;
        row("encoder", format!("pool{}", i + 1), 2, 0, 0, 2, (side, side, c), 0);
    }
    for d in DILATIONS {
        row("encoder", format!("dilated_d{d}"), 3, ctx, d, 1, (side, side, ctx), conv_params(3, c, ctx));
        c = ctx;
    }
    let low = side;
    for (i, width) in [4 * b, 2 * b, b].into_iter().enumerate() {
        side *= 2;
        row("seg_decoder", format!("upconv{}", i + 1), 2, width, 1, 2, (side, side, width), conv_params(2, c, width));
        row("seg_decoder", format!("concat{}", i + 1), 0, 0, 0, 0, (side, side, 2 * width), 0);
        row("seg_decoder", format!("up{}_conv1", i + 1), 3, width, 1, 1, (side, side, width), conv_params(3, 2 * width, width));
        row("seg_decoder", format!("up{}_conv2", i + 1), 3, width, 1, 1, (side, side, width), conv_params(3, width, width));
        c = width;
    }
    row("seg_decoder", "head_1x1".into(), 1, 1, 1, 1, (side, side, 1), conv_params(1, c, 1));
    if n == config.input_size {
        let mut side = low;
        let mut c = DILATIONS.len() * ctx;
        row("reg_decoder", "concat_dilated".into(), 0, 0, 0, 0, (side, side, c), 0);
        for i in 0..3 {
            side = side.div_ceil(2);
            row("reg_decoder", format!("down{}_stride2", i + 1), 3, ctx, 1, 2, (side, side, ctx), conv_params(3, c, ctx));
            row("reg_decoder", format!("down{}_conv1", i + 1), 3, ctx, 1, 1, (side, side, ctx), conv_params(3, ctx, ctx));
            row("reg_decoder", format!("down{}_conv2", i + 1), 3, ctx, 1, 1, (side, side, ctx), conv_params(3, ctx, ctx));
            c = ctx;
        }
        let flat = side * side * c;
        row("reg_decoder", "fc1".into(), 0, FC_UNITS, 0, 0, (1, 1, FC_UNITS), flat * FC_UNITS + FC_UNITS);
        row("reg_decoder", "fc2".into(), 0, FC_UNITS, 0, 0, (1, 1, FC_UNITS), FC_UNITS * FC_UNITS + FC_UNITS);
        row("reg_decoder", "output".into(), 0, 2, 0, 0, (1, 1, 2), FC_UNITS * 2 + 2);
    }
    Ok(rows)
}

/// Printable rendering of [`shape_table`] with per-stage parameter totals.
pub fn format_shape_table(rows: &[ShapeRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<16} {:>6} {:>7} {:>8} {:>6} {:>16} {:>12}",
        "stage", "layer", "kernel", "filters", "dilation", "stride", "output", "params"
    );
    let dash = |v: usize| if v == 0 { "-".to_string() } else { v.to_string() };
    for r in rows {
        let (h, w, c) = r.output;
        let kernel = if r.kernel == 0 {
            "-".to_string()
        } else {
            format!("{0}x{0}", r.kernel)
        };
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:>6} {:>7} {:>8} {:>6} {:>16} {:>12}",
            r.stage,
            r.layer,
            kernel,
            dash(r.filters),
            dash(r.dilation),
            dash(r.stride),
            format!("{h}x{w}x{c}"),
            r.params
        );
    }
    let mut stages: Vec<&str> = Vec::new();
    for r in rows {
        if !stages.contains(&r.stage) {
            stages.push(r.stage);
        }
    }
    for st in &stages {
        let p: usize = rows.iter().filter(|r| r.stage == *st).map(|r| r.params).sum();
        let _ = writeln!(s, "params[{st}] = {p}");
    }
    let _ = writeln!(s, "params[total] = {}", rows.iter().map(|r| r.params).sum::<usize>());
    s
}
