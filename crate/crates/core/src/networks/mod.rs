//! The generator, the two discriminators, and the face parser.

mod spec;

pub use spec::{
    DiscriminatorSpec, EncoderDecoderSpec, GeneratorSpec, LayerKind, LayerTrace, ParserSpec, Scope, NUM_LABELS,
    VGG_BLOCKS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::imaging::ImageTensor;
use crate::masking::{MaskSpec, Rect};
use crate::nn::{init, BatchNorm2d, BnMode, Conv2d, Linear, Op, Param, Sequential, Tensor};

const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

fn build_encoder_decoder(spec: &EncoderDecoderSpec, rng: &mut ChaCha8Rng) -> Result<Sequential> {
    spec.validate()?;
    let mut ops = Vec::new();
    let conv = |name: String, cin: usize, cout: usize, gain: f32, rng: &mut ChaCha8Rng| {
        let mut c = Conv2d::new(&name, cin, cout, 3, 1, 1, true);
        c.weight.value = init::orthogonal(cout, cin * 9, gain, rng);
        Op::Conv(c)
    };
    let mut ch = spec.in_channels;
    for (b, block) in spec.blocks.iter().enumerate() {
        for (i, &c) in block.iter().enumerate() {
            ops.push(conv(format!("enc.conv{}_{}", b + 1, i + 1), ch, c, RELU_GAIN, rng));
            ops.push(Op::Relu);
            ch = c;
        }
        ops.push(Op::MaxPool { slot: b });
    }
    let [bc, bh, bw] = spec.bottom_shape();
    if let Some(dim) = spec.bottleneck {
        let flat = bc * bh * bw;
        let mut enc = Linear::new("enc.fc", flat, dim);
        enc.weight.value = init::orthogonal(dim, flat, RELU_GAIN, rng);
        let mut dec = Linear::new("dec.fc", dim, flat);
        dec.weight.value = init::orthogonal(flat, dim, RELU_GAIN, rng);
        ops.extend([
            Op::Flatten,
            Op::Linear(enc),
            Op::Relu,
            Op::Linear(dec),
            Op::Relu,
            Op::Reshape {
                channels: bc,
                height: bh,
                width: bw,
            },
        ]);
    }
    let convs = spec.encoder_convs();
    let mut idx = convs.len();
    for (b, block) in spec.blocks.iter().enumerate().rev() {
        ops.push(Op::Unpool { slot: b });
        for i in (0..block.len()).rev() {
            idx -= 1;
            let (enc_in, _) = convs[idx];
            let last = idx == 0;
            let out = if last { spec.out_channels } else { enc_in };
            // unpooled maps are three-quarters zeros; compensate in the first conv after each
            let gain = if i + 1 == block.len() { 2.0 * RELU_GAIN } else { RELU_GAIN };
            ops.push(conv(format!("dec.conv{}_{}", b + 1, i + 1), ch, out, if last { 1.0 } else { gain }, rng));
            if !last {
                ops.push(Op::Relu);
            } else if spec.sigmoid_output {
                ops.push(Op::Sigmoid);
            }
            ch = out;
        }
    }
    Ok(Sequential::new(ops))
}

/// Shape trace of a built network, walking its ops and checking that each
/// one accepts what the previous one produced.
fn observed_trace(net: &Sequential, input: [usize; 3]) -> Result<Vec<LayerTrace>> {
    let [mut c, mut h, mut w] = input;
    let mut trace = Vec::new();
    for op in net.ops() {
        let (name, kind, params) = match op {
            Op::Conv(conv) => {
                ensure_shape!(conv.in_channels == c, "{} expects {} channels, gets {c}", op.name(), conv.in_channels);
                (h, w) = conv.output_size(h, w);
                c = conv.out_channels;
                (op.name().to_string(), LayerKind::Conv, conv.num_params())
            }
            Op::Linear(l) => {
                ensure_shape!(
                    l.in_features == c * h * w,
                    "{} expects {} features, gets {}",
                    op.name(),
                    l.in_features,
                    c * h * w
                );
                (c, h, w) = (l.out_features, 1, 1);
                (op.name().to_string(), LayerKind::Linear, l.weight.len() + l.bias.len())
            }
            Op::Relu => ("relu".to_string(), LayerKind::Relu, 0),
            Op::Sigmoid => ("sigmoid".to_string(), LayerKind::Sigmoid, 0),
            Op::MaxPool { slot } => {
                (h, w) = (h / 2, w / 2);
                (format!("pool{}", slot + 1), LayerKind::MaxPool, 0)
            }
            Op::Unpool { slot } => {
                (h, w) = (h * 2, w * 2);
                (format!("unpool{}", slot + 1), LayerKind::Unpool, 0)
            }
            Op::Flatten => {
                (c, h, w) = (c * h * w, 1, 1);
                ("flatten".to_string(), LayerKind::Reshape, 0)
            }
            Op::Reshape {
                channels,
                height,
                width,
            } => {
                ensure_shape!(channels * height * width == c * h * w, "reshape size mismatch");
                (c, h, w) = (*channels, *height, *width);
                ("reshape".to_string(), LayerKind::Reshape, 0)
            }
            Op::BatchNorm(_) | Op::LeakyRelu(_) => {
                return Err(Error::Shape(format!("unexpected {} in encoder/decoder", op.name())))
            }
        };
        trace.push(LayerTrace {
            name,
            kind,
            output: [c, h, w],
            params,
        });
    }
    Ok(trace)
}

fn check_input(expected: usize, t: &Tensor, what: &str) -> Result<()> {
    ensure_shape!(
        t.channels() == 3 && t.height() == expected && t.width() == expected,
        "{what} expects Nx3x{expected}x{expected}, got {:?}",
        t.shape()
    );
    Ok(())
}

/// Encoder/decoder generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    net: Sequential,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build_encoder_decoder(&spec.backbone(), &mut rng)?;
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    /// Inference on a single noise-filled image.
    pub fn generate(&self, input: &ImageTensor) -> Result<ImageTensor> {
        let x = Tensor::from_image(input);
        check_input(self.spec.input_size, &x, "generator")?;
        self.net.infer(&x).to_image(0)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input(self.spec.input_size, x, "generator")?;
        Ok(self.net.infer(x))
    }

    /// Recorded forward pass for training.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        check_input(self.spec.input_size, x, "generator")?;
        Ok(self.net.forward(x, BnMode::Batch))
    }

    pub fn backward(&mut self, grad: Tensor) {
        self.net.backward(grad, true, false);
    }

    pub fn param_count(&self) -> usize {
        self.net.num_trainable()
    }

    /// Compares the built network against the trace derived from its spec.
    pub fn audit(&self) -> Result<()> {
        let expected = self.spec.layer_trace()?;
        let n = self.spec.input_size;
        let observed = observed_trace(&self.net, [3, n, n])?;
        if expected != observed {
            let first = expected
                .iter()
                .zip(&observed)
                .position(|(a, b)| a != b)
                .unwrap_or(expected.len().min(observed.len()));
            return Err(Error::Shape(format!(
                "generator diverges from its spec at layer {first}: expected {:?}, found {:?}",
                expected.get(first),
                observed.get(first)
            )));
        }
        Ok(())
    }

    /// Feature map shapes after each encoder pooling layer.
    pub fn encoder_pool_shapes(&self, input: &ImageTensor) -> Result<Vec<[usize; 3]>> {
        let mut x = Tensor::from_image(input);
        check_input(self.spec.input_size, &x, "generator")?;
        let mut shapes = Vec::new();
        let pools = self.spec.blocks.len();
        for op in self.net.ops() {
            x = match op {
                Op::MaxPool { .. } => crate::nn::ops::max_pool2(&x).0,
                Op::Conv(c) => c.forward(&x),
                Op::Relu => x.map(|v| v.max(0.0)),
                _ => break,
            };
            if matches!(op, Op::MaxPool { .. }) {
                shapes.push([x.channels(), x.height(), x.width()]);
                if shapes.len() == pools {
                    break;
                }
            }
        }
        Ok(shapes)
    }

    /// Overwrites encoder parameters with same-named tensors, e.g. converted
    /// VGG-19 weights. Returns how many tensors were loaded.
    pub fn load_encoder(&mut self, tensors: &[Param]) -> Result<usize> {
        let mut loaded = 0;
        for p in self.net.state_mut() {
            if !p.name.starts_with("enc.conv") {
                continue;
            }
            if let Some(src) = tensors.iter().find(|t| t.name == p.name) {
                ensure_shape!(src.shape == p.shape, "{}: {:?} vs {:?}", p.name, src.shape, p.shape);
                p.value.clone_from(&src.value);
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    net: Sequential,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths()?;
        let prefix = match spec.scope {
            Scope::Local => "local",
            Scope::Global => "global",
        };
        let mut ops = Vec::new();
        let mut ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let mut c = Conv2d::new(&format!("{prefix}.conv{}", i + 1), ch, w, 4, 2, 1, i == 0);
            c.weight.value = init::normal(c.weight.len(), 0.0, 0.02, &mut rng);
            ops.push(Op::Conv(c));
            if i > 0 {
                let mut bn = BatchNorm2d::new(&format!("{prefix}.bn{}", i + 1), w);
                bn.gamma.value = init::normal(w, 1.0, 0.02, &mut rng);
                ops.push(Op::BatchNorm(bn));
            }
            ops.push(Op::LeakyRelu(spec.leaky_slope));
            ch = w;
        }
        let mut head = Conv2d::new(&format!("{prefix}.head"), ch, 1, 4, 1, 0, true);
        head.weight.value = init::normal(head.weight.len(), 0.0, 0.02, &mut rng);
        ops.push(Op::Conv(head));
        Ok(Self {
            spec,
            net: Sequential::new(ops),
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn scope(&self) -> Scope {
        self.spec.scope
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        check_input(self.spec.input_size, x, &format!("{:?} discriminator", self.spec.scope))
    }

    /// Recorded forward pass returning one logit per batch item.
    pub fn forward_logits(&mut self, x: &Tensor, bn: BnMode) -> Result<Vec<f32>> {
        self.check(x)?;
        Ok(self.net.forward(x, bn).into_data())
    }

    /// Backpropagates per-item logit gradients; returns the input gradient.
    pub fn backward_logits(&mut self, grad: &[f32], accumulate: bool) -> Tensor {
        let g = Tensor::from_vec([grad.len(), 1, 1, 1], grad.to_vec());
        self.net.backward(g, accumulate, true).expect("input gradient requested")
    }

    /// Backpropagates per-item logit gradients into the parameters only.
    pub fn accumulate_logit_grads(&mut self, grad: &[f32]) {
        let g = Tensor::from_vec([grad.len(), 1, 1, 1], grad.to_vec());
        self.net.backward(g, true, false);
    }

    pub fn infer_logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.check(x)?;
        Ok(self.net.infer(x).into_data())
    }

    /// Probability that `img` is real, strictly inside `(0, 1)` for finite logits.
    pub fn probability(&self, img: &ImageTensor) -> Result<f64> {
        let logit = self.infer_logits(&Tensor::from_image(img))?[0] as f64;
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    pub fn param_count(&self) -> usize {
        self.net.num_trainable()
    }
}

/// Per-pixel face labels: background, skin, left/right eyebrow, left/right
/// eye, nose, upper lip, inner mouth, lower lip, hair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

pub const LABEL_NAMES: [&str; NUM_LABELS] = [
    "background",
    "skin",
    "left_eyebrow",
    "right_eyebrow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
    "hair",
];

/// Display colours for [`LabelMap::colorize`].
pub const LABEL_COLORS: [[u8; 3]; NUM_LABELS] = [
    [0, 0, 0],
    [255, 204, 153],
    [102, 51, 0],
    [153, 76, 0],
    [0, 0, 255],
    [0, 128, 255],
    [255, 255, 0],
    [255, 0, 0],
    [128, 0, 128],
    [255, 0, 127],
    [0, 153, 0],
];

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        ensure_shape!(labels.len() == height * width, "label map size mismatch");
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(Error::Domain(format!("label {bad} outside 0..{NUM_LABELS}")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Per-pixel argmax of `[1, L, H, W]` logits; ties go to the smaller label.
    pub fn from_logits(logits: &Tensor, index: usize) -> Result<Self> {
        let [_, l, h, w] = logits.shape();
        let plane = h * w;
        let base = index * l * plane;
        let d = logits.data();
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..l {
                    if d[base + k * plane + p] > d[base + best * plane + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(h, w, labels)
    }

    pub fn warped(&self, params: &crate::imaging::AffineParams) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            labels: crate::imaging::warp_nearest(&self.labels, self.height, self.width, params),
        }
    }

    pub fn colorize(&self) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, |r, c, ch| {
            LABEL_COLORS[self.get(r, c) as usize][ch] as f32 / 255.0
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Reads a single-channel PNG of raw label values.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let luma = image::load_from_memory(&bytes)
            .map_err(|e| Error::Format(e.to_string()))?
            .to_luma8();
        let (w, h) = luma.dimensions();
        Self::new(h as usize, w as usize, luma.into_raw())
    }
}

/// Row-wise softmax over the label axis of `[N, L, H, W]` logits, in `f64`.
pub fn softmax_labels(logits: &Tensor) -> Vec<f64> {
    let [n, l, h, w] = logits.shape();
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        let base = b * l * plane;
        for p in 0..plane {
            let max = (0..l).map(|k| d[base + k * plane + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut z = 0.0;
            for k in 0..l {
                let e = (d[base + k * plane + p] as f64 - max).exp();
                out[base + k * plane + p] = e;
                z += e;
            }
            for k in 0..l {
                out[base + k * plane + p] /= z;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parser {
    spec: ParserSpec,
    net: Sequential,
}

impl Parser {
    pub fn new(spec: ParserSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build_encoder_decoder(&spec.backbone(), &mut rng)?;
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &ParserSpec {
        &self.spec
    }

    pub fn is_frozen(&self) -> bool {
        self.spec.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.spec.frozen = frozen;
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn logits(&self, img: &ImageTensor) -> Result<Tensor> {
        self.infer(&Tensor::from_image(img))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_input(self.spec.input_size, x, "parser")?;
        Ok(self.net.infer(x))
    }

    pub fn parse(&self, img: &ImageTensor) -> Result<LabelMap> {
        LabelMap::from_logits(&self.logits(img)?, 0)
    }

    /// Recorded forward pass. A frozen parser never touches its batch-norm
    /// statistics or parameter gradients.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        check_input(self.spec.input_size, x, "parser")?;
        let bn = if self.spec.frozen { BnMode::Running } else { BnMode::Batch };
        Ok(self.net.forward(x, bn))
    }

    /// Gradient with respect to the input; parameter gradients accumulate only
    /// when the parser is not frozen.
    pub fn backward(&mut self, grad: Tensor, need_input_grad: bool) -> Option<Tensor> {
        let accumulate = !self.spec.frozen;
        self.net.backward(grad, accumulate, need_input_grad)
    }

    pub fn digest(&self) -> String {
        self.net.digest()
    }
}

/// The square window the local discriminator sees: `size` pixels on a side,
/// centred on the mask's bounding box and clamped inside the image.
pub fn local_window(mask: &MaskSpec, size: usize) -> Result<Rect> {
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Argument("cannot crop around an empty mask".into()))?;
    let (h, w) = mask.dims();
    if size > h || size > w {
        return Err(Error::Argument(format!("local window {size} exceeds {h}x{w} image")));
    }
    let place = |start: usize, extent: usize, limit: usize| {
        let centre = start + extent / 2;
        centre.saturating_sub(size / 2).min(limit - size)
    };
    Ok(Rect::new(
        place(bbox.top, bbox.height, h),
        place(bbox.left, bbox.width, w),
        size,
        size,
    ))
}

pub fn crop_local(img: &ImageTensor, mask: &MaskSpec, size: usize) -> Result<ImageTensor> {
    mask.check_compatible(img)?;
    let r = local_window(mask, size)?;
    img.crop(r.top, r.left, r.height, r.width)
}

/// Crops window `windows[i]` out of batch item `i`.
pub fn crop_batch(x: &Tensor, windows: &[Rect]) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert_eq!(n, windows.len());
    let size = windows.first().map_or(0, |r| r.height);
    let mut out = Tensor::zeros([n, c, size, size]);
    let src = x.data();
    let dst = out.data_mut();
    for (b, r) in windows.iter().enumerate() {
        for ch in 0..c {
            for y in 0..size {
                let s = ((b * c + ch) * h + r.top + y) * w + r.left;
                let d = ((b * c + ch) * size + y) * size;
                dst[d..d + size].copy_from_slice(&src[s..s + size]);
            }
        }
    }
    out
}

/// Adjoint of [`crop_batch`]: scatters window gradients into a zero tensor of `shape`.
pub fn uncrop_batch(grad: &Tensor, windows: &[Rect], shape: [usize; 4]) -> Tensor {
    let [_, c, h, w] = shape;
    let size = grad.height();
    let mut out = Tensor::zeros(shape);
    let src = grad.data();
    let dst = out.data_mut();
    for (b, r) in windows.iter().enumerate() {
        for ch in 0..c {
            for y in 0..size {
                let d = ((b * c + ch) * h + r.top + y) * w + r.left;
                let s = ((b * c + ch) * size + y) * size;
                dst[d..d + size].copy_from_slice(&src[s..s + size]);
            }
        }
    }
    out
}
