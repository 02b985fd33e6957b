//! Declarative network descriptions and their layer-by-layer shape traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// VGG-19 `conv1_1` .. `pool3`, then two 512-channel convolutions and a fourth pooling.
pub const VGG_BLOCKS: [&[usize]; 4] = [&[64, 64], &[128, 128], &[256, 256, 256, 256], &[512, 512]];

pub const NUM_LABELS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    Unpool,
    Linear,
    Reshape,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub name: String,
    pub kind: LayerKind,
    /// Output `(channels, height, width)`; linear outputs use `(features, 1, 1)`.
    pub output: [usize; 3],
    pub params: usize,
}

/// The encoder/decoder skeleton shared by the generator and the parser.
///
/// Each block is a run of 3x3 same-padding convolutions followed by a 2x2 max
/// pooling. The optional bottleneck flattens the last pooled map into a
/// fully-connected layer. The decoder mirrors every layer in reverse, with
/// unpooling driven by the switches of the matching pooling layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDecoderSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub blocks: Vec<Vec<usize>>,
    pub bottleneck: Option<usize>,
    pub out_channels: usize,
    /// Squash the output into `[0, 1]`; otherwise emit raw logits.
    pub sigmoid_output: bool,
}

impl EncoderDecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::Config("every encoder block needs at least one non-empty convolution".into()));
        }
        let reduce = 1usize << self.blocks.len();
        if self.input_size == 0 || self.input_size % reduce != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by {reduce} ({} pooling layers)",
                self.input_size,
                self.blocks.len()
            )));
        }
        if self.bottleneck == Some(0) {
            return Err(Error::Config("bottleneck dimension must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` channel pairs of every encoder convolution, in order.
    pub fn encoder_convs(&self) -> Vec<(usize, usize)> {
        let mut prev = self.in_channels;
        let mut out = Vec::new();
        for block in &self.blocks {
            for &c in block {
                out.push((prev, c));
                prev = c;
            }
        }
        out
    }

    pub fn bottom_shape(&self) -> [usize; 3] {
        let side = self.input_size >> self.blocks.len();
        [*self.blocks.last().and_then(|b| b.last()).unwrap_or(&0), side, side]
    }

    /// Shape trace computed from the description alone.
    pub fn layer_trace(&self) -> Result<Vec<LayerTrace>> {
        self.validate()?;
        let conv_params = |cin: usize, cout: usize| cin * cout * 9 + cout;
        let mut trace = Vec::new();
        let mut push = |name: String, kind, output, params| {
            trace.push(LayerTrace {
                name,
                kind,
                output,
                params,
            })
        };
        let mut side = self.input_size;
        let mut ch = self.in_channels;
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, &c) in block.iter().enumerate() {
                push(format!("enc.conv{}_{}", b + 1, i + 1), LayerKind::Conv, [c, side, side], conv_params(ch, c));
                push("relu".into(), LayerKind::Relu, [c, side, side], 0);
                ch = c;
            }
            side /= 2;
            push(format!("pool{}", b + 1), LayerKind::MaxPool, [ch, side, side], 0);
        }
        let flat = ch * side * side;
        if let Some(dim) = self.bottleneck {
            push("flatten".into(), LayerKind::Reshape, [flat, 1, 1], 0);
            push("enc.fc".into(), LayerKind::Linear, [dim, 1, 1], flat * dim + dim);
            push("relu".into(), LayerKind::Relu, [dim, 1, 1], 0);
            push("dec.fc".into(), LayerKind::Linear, [flat, 1, 1], dim * flat + flat);
            push("relu".into(), LayerKind::Relu, [flat, 1, 1], 0);
            push("reshape".into(), LayerKind::Reshape, [ch, side, side], 0);
        }
        let convs = self.encoder_convs();
        let mut idx = convs.len();
        for (b, block) in self.blocks.iter().enumerate().rev() {
            side *= 2;
            push(format!("unpool{}", b + 1), LayerKind::Unpool, [ch, side, side], 0);
            for i in (0..block.len()).rev() {
                idx -= 1;
                let (enc_in, enc_out) = convs[idx];
                let last = idx == 0;
                let out = if last { self.out_channels } else { enc_in };
                debug_assert_eq!(enc_out, ch);
                push(format!("dec.conv{}_{}", b + 1, i + 1), LayerKind::Conv, [out, side, side], conv_params(ch, out));
                if !last {
                    push("relu".into(), LayerKind::Relu, [out, side, side], 0);
                } else if self.sigmoid_output {
                    push("sigmoid".into(), LayerKind::Sigmoid, [out, side, side], 0);
                }
                ch = out;
            }
        }
        Ok(trace)
    }
}

/// The completion generator: noise-filled RGB image in, RGB image in `[0, 1]` out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub input_size: usize,
    pub blocks: Vec<Vec<usize>>,
    pub bottleneck_dim: usize,
}

impl GeneratorSpec {
    /// 128x128 input, full VGG widths, 2048-wide bottleneck.
    pub fn canonical() -> Self {
        Self {
            input_size: 128,
            blocks: VGG_BLOCKS.iter().map(|b| b.to_vec()).collect(),
            bottleneck_dim: 2048,
        }
    }

    /// Same topology with every width divided by `width_divisor`.
    pub fn scaled(input_size: usize, width_divisor: usize, bottleneck_dim: usize) -> Self {
        let d = width_divisor.max(1);
        Self {
            input_size,
            blocks: VGG_BLOCKS
                .iter()
                .map(|b| b.iter().map(|c| (c / d).max(1)).collect())
                .collect(),
            bottleneck_dim,
        }
    }

    pub fn backbone(&self) -> EncoderDecoderSpec {
        EncoderDecoderSpec {
            input_size: self.input_size,
            in_channels: 3,
            blocks: self.blocks.clone(),
            bottleneck: Some(self.bottleneck_dim),
            out_channels: 3,
            sigmoid_output: true,
        }
    }

    pub fn layer_trace(&self) -> Result<Vec<LayerTrace>> {
        self.backbone().layer_trace()
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_trace()?.iter().map(|l| l.params).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

/// Strided-convolution real/fake classifier.
///
/// `layers` convolutions with kernel 4, stride 2 and padding 1 halve the input
/// down to 4x4 while the width doubles from `base_width`; batch normalization
/// follows every one but the first, with leaky rectifiers throughout. A final
/// 4x4 valid convolution produces the logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub scope: Scope,
    pub input_size: usize,
    pub base_width: usize,
    pub leaky_slope: f32,
}

impl DiscriminatorSpec {
    pub fn canonical(scope: Scope) -> Self {
        Self {
            scope,
            input_size: match scope {
                Scope::Local => 64,
                Scope::Global => 128,
            },
            base_width: 64,
            leaky_slope: 0.2,
        }
    }

    pub fn new(scope: Scope, input_size: usize, base_width: usize) -> Self {
        Self {
            scope,
            input_size,
            base_width,
            leaky_slope: 0.2,
        }
    }

    pub fn num_layers(&self) -> Result<usize> {
        let s = self.input_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator input size {s} must be a power of two >= 8"
            )));
        }
        Ok((s / 4).trailing_zeros() as usize)
    }

    pub fn widths(&self) -> Result<Vec<usize>> {
        Ok((0..self.num_layers()?).map(|i| self.base_width << i).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserSpec {
    pub input_size: usize,
    pub blocks: Vec<Vec<usize>>,
    pub bottleneck_dim: Option<usize>,
    pub num_labels: usize,
    pub frozen: bool,
}

impl ParserSpec {
    /// The generator skeleton with an 11-way logit head.
    pub fn canonical() -> Self {
        let g = GeneratorSpec::canonical();
        Self {
            input_size: g.input_size,
            blocks: g.blocks,
            bottleneck_dim: Some(g.bottleneck_dim),
            num_labels: NUM_LABELS,
            frozen: true,
        }
    }

    /// Shallow variant for desk-scale runs: one convolution per block, no
    /// fully-connected bottleneck.
    pub fn lightweight(input_size: usize, base_width: usize, depth: usize) -> Self {
        Self {
            input_size,
            blocks: (0..depth).map(|i| vec![base_width << i]).collect(),
            bottleneck_dim: None,
            num_labels: NUM_LABELS,
            frozen: true,
        }
    }

    pub fn backbone(&self) -> EncoderDecoderSpec {
        EncoderDecoderSpec {
            input_size: self.input_size,
            in_channels: 3,
            blocks: self.blocks.clone(),
            bottleneck: self.bottleneck_dim,
            out_channels: self.num_labels,
            sigmoid_output: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_generator_trace() {
        let spec = GeneratorSpec::canonical();
        let trace = spec.layer_trace().unwrap();
        let pools: Vec<_> = trace.iter().filter(|l| l.kind == LayerKind::MaxPool).map(|l| l.output).collect();
        assert_eq!(pools, vec![[64, 64, 64], [128, 32, 32], [256, 16, 16], [512, 8, 8]]);
        let unpools: Vec<_> = trace.iter().filter(|l| l.kind == LayerKind::Unpool).map(|l| l.output[1]).collect();
        assert_eq!(unpools, vec![16, 32, 64, 128]);
        assert_eq!(trace.last().unwrap().output, [3, 128, 128]);
        assert_eq!(trace.last().unwrap().kind, LayerKind::Sigmoid);
        let count = |k| trace.iter().filter(|l| l.kind == k).count();
        let enc_convs = trace.iter().filter(|l| l.name.starts_with("enc.conv")).count();
        let dec_convs = trace.iter().filter(|l| l.name.starts_with("dec.conv")).count();
        assert_eq!(enc_convs, 10);
        assert_eq!(enc_convs, dec_convs);
        assert_eq!(count(LayerKind::MaxPool), count(LayerKind::Unpool));
        let fc = trace.iter().find(|l| l.name == "enc.fc").unwrap();
        assert_eq!(fc.output[0], 2048);
        assert_eq!(fc.params, 8 * 8 * 512 * 2048 + 2048);
    }

    #[test]
    fn canonical_generator_param_count_by_hand() {
        // encoder convs: (cin, cout) pairs of VGG-19 conv1_1..conv3_4 plus two 512s
        let enc = [
            (3, 64),
            (64, 64),
            (64, 128),
            (128, 128),
            (128, 256),
            (256, 256),
            (256, 256),
            (256, 256),
            (256, 512),
            (512, 512),
        ];
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let enc_total: usize = enc.iter().map(|&(i, o)| conv(i, o)).sum();
        // decoder mirrors each (cin, cout) as (cout, cin), last maps 64 -> 3
        let dec_total: usize = enc.iter().map(|&(i, o)| conv(o, i)).sum();
        let flat = 512 * 8 * 8;
        let fc = flat * 2048 + 2048 + 2048 * flat + flat;
        assert_eq!(GeneratorSpec::canonical().param_count().unwrap(), enc_total + dec_total + fc);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut spec = GeneratorSpec::canonical();
        spec.input_size = 100;
        assert!(spec.layer_trace().is_err());
    }

    #[test]
    fn discriminator_depths() {
        assert_eq!(DiscriminatorSpec::canonical(Scope::Local).num_layers().unwrap(), 4);
        assert_eq!(DiscriminatorSpec::canonical(Scope::Global).num_layers().unwrap(), 5);
        assert_eq!(
            DiscriminatorSpec::canonical(Scope::Global).widths().unwrap(),
            vec![64, 128, 256, 512, 1024]
        );
        assert!(DiscriminatorSpec::new(Scope::Local, 48, 8).num_layers().is_err());
    }

    #[test]
    fn parser_head_has_eleven_logits() {
        let trace = ParserSpec::canonical().backbone().layer_trace().unwrap();
        assert_eq!(trace.last().unwrap().output, [11, 128, 128]);
        assert_eq!(trace.last().unwrap().kind, LayerKind::Conv);
    }
}
