//! Decoders mapping encoder features back to per-pixel class logits: the
//! multi-scale feature-fusion decoder and a patch-expanding Transformer
//! decoder used as its ablation baseline.

use crate::attention::MwaBlockPair;
use crate::encoder::{EncoderOutput, FeatureMap, ModelConfig, STAGES};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNorm2d, Conv2d, DeformConv2d, LayerNorm, Linear};
use crate::nn::{ConvGeometry, LEAKY_SLOPE};
use crate::params::{join, Module, ParamSpec, Session};
use crate::scalar::Scalar;

/// Convolution, batch norm and leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnAct {
    pub fn new(conv: Conv2d, bn_name: String) -> Self {
        let bn = BatchNorm2d::new(bn_name, conv.out_ch);
        Self { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let x = self.conv.forward(s, x)?;
        let x = self.bn.forward(s, x)?;
        Ok(s.graph.leaky_relu(x, LEAKY_SLOPE))
    }
}

impl Module for ConvBnAct {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.param_specs(out);
        self.bn.param_specs(out);
    }
}

/// One pyramid branch: deformable 3x3, then dilated 3x3, batch norm, leaky ReLU.
#[derive(Clone, Debug)]
pub struct DsppBranch {
    pub rate: usize,
    pub deform: DeformConv2d,
    pub dilated: ConvBnAct,
}

impl DsppBranch {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.deform.forward(s, x)?;
        self.dilated.forward(s, y)
    }
}

/// Deformable spatial pyramid: parallel branches at several dilation rates,
/// concatenated, fused by a 1x1 convolution and added back to the input.
#[derive(Clone, Debug)]
pub struct MedDspp {
    pub branches: Vec<DsppBranch>,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl MedDspp {
    pub fn new(name: &str, channels: usize, rates: &[usize]) -> Result<Self> {
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                let b = join(name, &format!("branches.{i}"));
                let geo = ConvGeometry::same(3, rate);
                let conv = Conv2d::new(join(&b, "dilated"), channels, channels, 3, geo, false)?;
                Ok(DsppBranch {
                    rate,
                    deform: DeformConv2d::new(join(&b, "deform"), channels, channels, false),
                    dilated: ConvBnAct::new(conv, join(&b, "bn")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::pointwise(join(name, "fuse"), rates.len() * channels, channels, true);
        Ok(Self {
            branches,
            fuse,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.graph.concat(&outs, 1)?;
        let fused = self.fuse.forward(s, cat)?;
        s.graph.add(x, fused)
    }
}

impl Module for MedDspp {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for b in &self.branches {
            b.deform.param_specs(out);
            b.dilated.param_specs(out);
        }
        self.fuse.param_specs(out);
    }
}

/// Squeeze-and-excitation gate: pooled channel descriptor through a
/// bottleneck MLP and a sigmoid, multiplied back onto every channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: Linear,
    pub expand: Linear,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 4;

    pub fn new(name: &str, channels: usize) -> Self {
        let hidden = (channels / Self::REDUCTION).max(1);
        Self {
            reduce: Linear::new(join(name, "reduce"), channels, hidden, true),
            expand: Linear::new(join(name, "expand"), hidden, channels, true),
        }
    }

    /// Gate values `[B, C]` in `(0, 1)`.
    pub fn gate<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let pooled = s.graph.mean_spatial(x)?;
        let h = self.reduce.forward(s, pooled)?;
        let h = s.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.expand.forward(s, h)?;
        Ok(s.graph.sigmoid(h))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gate = self.gate(s, x)?;
        s.graph.scale_channels(x, gate)
    }
}

impl Module for ChannelAttention {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.reduce.param_specs(out);
        self.expand.param_specs(out);
    }
}

/// Single-map spatial gate from a dilated depth-wise 3x3 and a 1x1 projection.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub dw: Conv2d,
    pub proj: Conv2d,
}

impl SpatialAttention {
    pub const DILATION: usize = 2;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            dw: Conv2d::depthwise(join(name, "dw"), channels, 3, Self::DILATION, true),
            proj: Conv2d::pointwise(join(name, "proj"), channels, 1, true),
        }
    }

    /// Gate map `[B, 1, H, W]` in `(0, 1)`.
    pub fn gate<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.dw.forward(s, x)?;
        let y = self.proj.forward(s, y)?;
        Ok(s.graph.sigmoid(y))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let map = self.gate(s, x)?;
        s.graph.scale_spatial(x, map)
    }
}

impl Module for SpatialAttention {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.dw.param_specs(out);
        self.proj.param_specs(out);
    }
}

/// One fusion stage: upsample the deeper map, concatenate the skip, reduce,
/// refine with depth-wise convolutions, pyramid pooling and attention gates.
#[derive(Clone, Debug)]
pub struct MffStage {
    pub reduce: Conv2d,
    pub dw1: ConvBnAct,
    pub dw2: ConvBnAct,
    pub dspp: MedDspp,
    pub channel_attn: ChannelAttention,
    pub spatial_attn: SpatialAttention,
}

impl MffStage {
    pub fn new(name: &str, below_ch: usize, skip_ch: usize, rates: &[usize]) -> Result<Self> {
        let c = skip_ch;
        Ok(Self {
            reduce: Conv2d::pointwise(join(name, "reduce"), below_ch + skip_ch, c, true),
            dw1: ConvBnAct::new(Conv2d::depthwise(join(name, "dw1"), c, 3, 1, false), join(name, "bn1")),
            dw2: ConvBnAct::new(Conv2d::depthwise(join(name, "dw2"), c, 3, 1, false), join(name, "bn2")),
            dspp: MedDspp::new(&join(name, "dspp"), c, rates)?,
            channel_attn: ChannelAttention::new(&join(name, "channel_attn"), c),
            spatial_attn: SpatialAttention::new(&join(name, "spatial_attn"), c),
        })
    }

    /// `below [B, C_below, h, w]` and `skip [B, C_skip, 2h, 2w]` to `[B, C_skip, 2h, 2w]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, below: Var, skip: Var) -> Result<Var> {
        let skip_shape = s.graph.shape(skip).to_vec();
        if skip_shape.len() != 4 {
            return Err(Error::invalid(
                "mff_stage",
                format!("skip must be NCHW, got {skip_shape:?}"),
            ));
        }
        let up = s.graph.bilinear_resize(below, skip_shape[2], skip_shape[3])?;
        let x = s.graph.concat(&[up, skip], 1)?;
        let x = self.reduce.forward(s, x)?;
        let x = self.dw1.forward(s, x)?;
        let x = self.dw2.forward(s, x)?;
        let x = self.dspp.forward(s, x)?;
        let x = self.channel_attn.forward(s, x)?;
        self.spatial_attn.forward(s, x)
    }
}

impl Module for MffStage {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.reduce.param_specs(out);
        self.dw1.param_specs(out);
        self.dw2.param_specs(out);
        self.dspp.param_specs(out);
        self.channel_attn.param_specs(out);
        self.spatial_attn.param_specs(out);
    }
}

/// Bilinear upsampling to the input resolution, then 1x1 class projection.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub classifier: Conv2d,
    pub out_size: usize,
}

impl SegHead {
    pub fn new(name: &str, channels: usize, num_classes: usize, out_size: usize) -> Self {
        Self {
            classifier: Conv2d::pointwise(join(name, "classifier"), channels, num_classes, true),
            out_size,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let x = s.graph.bilinear_resize(x, self.out_size, self.out_size)?;
        self.classifier.forward(s, x)
    }
}

impl Module for SegHead {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.classifier.param_specs(out);
    }
}

#[derive(Clone, Debug)]
pub struct MffDecoder {
    /// Deepest stage first.
    pub stages: Vec<MffStage>,
    pub head: SegHead,
}

impl MffDecoder {
    pub fn new(name: &str, cfg: &ModelConfig) -> Result<Self> {
        let stages = (0..STAGES - 1)
            .rev()
            .map(|i| {
                MffStage::new(
                    &join(name, &format!("stages.{i}")),
                    cfg.stage_widths[i + 1],
                    cfg.stage_widths[i],
                    &cfg.dspp_rates,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = SegHead::new(&join(name, "head"), cfg.stage_widths[0], cfg.num_classes, cfg.img_size);
        Ok(Self { stages, head })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        if enc.skips.len() != self.stages.len() + 1 {
            return Err(Error::invalid(
                "decode",
                format!("expected {} skips, got {}", self.stages.len() + 1, enc.skips.len()),
            ));
        }
        let mut x = enc.bottleneck().to_nchw(s)?;
        for (stage, skip) in self.stages.iter().zip(enc.skips.iter().rev().skip(1)) {
            let skip = skip.to_nchw(s)?;
            x = stage.forward(s, x, skip)?;
        }
        self.head.forward(s, x)
    }
}

impl Module for MffDecoder {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for st in &self.stages {
            st.param_specs(out);
        }
        self.head.param_specs(out);
    }
}

/// Linear expansion of every token into a `factor x factor` block of
/// finer tokens, followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
    pub out_dim: usize,
}

impl PatchExpand {
    /// `dim -> factor^2 * out_dim` projection, rearranged to a grid `factor`
    /// times finer with `out_dim` channels.
    pub fn new(name: &str, dim: usize, factor: usize, out_dim: usize) -> Self {
        Self {
            expand: Linear::new(join(name, "expand"), dim, factor * factor * out_dim, false),
            norm: LayerNorm::new(join(name, "norm"), out_dim),
            factor,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: FeatureMap) -> Result<FeatureMap> {
        let b = s.graph.shape(x.var)[0];
        let (h, f, c) = (x.side, self.factor, self.out_dim);
        let y = self.expand.forward(s, x.var)?;
        let y = s.graph.reshape(y, &[b, h, h, f, f, c])?;
        let y = s.graph.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = s.graph.reshape(y, &[b, h * f * h * f, c])?;
        let y = self.norm.forward(s, y)?;
        Ok(FeatureMap {
            var: y,
            side: h * f,
            channels: c,
        })
    }
}

impl Module for PatchExpand {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.expand.param_specs(out);
        self.norm.param_specs(out);
    }
}

/// Patch-expanding decoder stage: 2x expansion, skip concatenation, linear
/// fusion and one plain-FFN attention block pair.
#[derive(Clone, Debug)]
pub struct PlainStage {
    pub up: PatchExpand,
    pub fuse: Linear,
    pub pair: MwaBlockPair,
}

#[derive(Clone, Debug)]
pub struct PlainDecoder {
    /// Deepest stage first.
    pub stages: Vec<PlainStage>,
    pub final_up: PatchExpand,
    pub classifier: Conv2d,
}

impl PlainDecoder {
    pub fn new(name: &str, cfg: &ModelConfig) -> Result<Self> {
        let stages = (0..STAGES - 1)
            .rev()
            .map(|i| {
                let st = join(name, &format!("stages.{i}"));
                let c = cfg.stage_widths[i];
                Ok(PlainStage {
                    up: PatchExpand::new(&join(&st, "up"), cfg.stage_widths[i + 1], 2, c),
                    fuse: Linear::new(join(&st, "fuse"), 2 * c, c, true),
                    pair: MwaBlockPair::new(&join(&st, "pair"), cfg.block_config(i, false))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let c0 = cfg.stage_widths[0];
        Ok(Self {
            stages,
            final_up: PatchExpand::new(&join(name, "final_up"), c0, cfg.patch_size, c0),
            classifier: Conv2d::pointwise(join(name, "classifier"), c0, cfg.num_classes, true),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        if enc.skips.len() != self.stages.len() + 1 {
            return Err(Error::invalid(
                "plain_decoder",
                format!("expected {} skips, got {}", self.stages.len() + 1, enc.skips.len()),
            ));
        }
        let mut x = enc.bottleneck();
        for (stage, skip) in self.stages.iter().zip(enc.skips.iter().rev().skip(1)) {
            let up = stage.up.forward(s, x)?;
            if up.side != skip.side {
                return Err(Error::invalid(
                    "plain_decoder",
                    format!("upsampled side {} does not match skip side {}", up.side, skip.side),
                ));
            }
            let cat = s.graph.concat(&[up.var, skip.var], 2)?;
            let fused = stage.fuse.forward(s, cat)?;
            let var = stage.pair.forward(s, fused)?;
            x = FeatureMap {
                var,
                side: skip.side,
                channels: skip.channels,
            };
        }
        let full = self.final_up.forward(s, x)?;
        let map = full.to_nchw(s)?;
        self.classifier.forward(s, map)
    }
}

impl Module for PlainDecoder {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for st in &self.stages {
            st.up.param_specs(out);
            st.fuse.param_specs(out);
            st.pair.param_specs(out);
        }
        self.final_up.param_specs(out);
        self.classifier.param_specs(out);
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Mff(MffDecoder),
    Plain(PlainDecoder),
}

impl Decoder {
    pub fn new(name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(if cfg.use_mff_decoder {
            Self::Mff(MffDecoder::new(name, cfg)?)
        } else {
            Self::Plain(PlainDecoder::new(name, cfg)?)
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        match self {
            Self::Mff(d) => d.forward(s, enc),
            Self::Plain(d) => d.forward(s, enc),
        }
    }
}

impl Module for Decoder {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Self::Mff(d) => d.param_specs(out),
            Self::Plain(d) => d.param_specs(out),
        }
    }
}
