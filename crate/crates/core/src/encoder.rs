//! Hierarchical windowed-attention encoder producing one skip feature per stage.

use std::sync::Arc;

use crate::attention::{BlockConfig, MwaBlockPair};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::nn::ConvGeometry;
use crate::params::{join, Module, ParamSpec, Session};
use crate::scalar::Scalar;

/// Number of encoder stages; the resolution halves between consecutive ones.
pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub stage_widths: [usize; STAGES],
    pub stage_depths: [usize; STAGES],
    pub heads_per_stage: [usize; STAGES],
    pub window_size: usize,
    pub effn_ratio: usize,
    pub num_classes: usize,
    pub use_effn: bool,
    pub use_mff_decoder: bool,
    pub dspp_rates: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_size: 64,
            patch_size: 4,
            in_channels: 3,
            stage_widths: [96, 192, 384, 768],
            stage_depths: [2, 2, 6, 2],
            heads_per_stage: [3, 6, 12, 24],
            window_size: 4,
            effn_ratio: 4,
            num_classes: 2,
            use_effn: true,
            use_mff_decoder: true,
            dspp_rates: vec![1, 6, 12, 18],
        }
    }
}

impl ModelConfig {
    /// Narrow 64x64 configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            stage_widths: [16, 32, 64, 128],
            stage_depths: [2, 2, 2, 2],
            heads_per_stage: [1, 2, 4, 8],
            num_classes: 3,
            ..Self::default()
        }
    }

    /// Tiny 32x32 configuration with window 2, small enough for
    /// finite-difference checks of the whole network.
    pub fn micro() -> Self {
        Self {
            img_size: 32,
            stage_widths: [4, 8, 16, 32],
            stage_depths: [2, 2, 2, 2],
            heads_per_stage: [1, 2, 2, 4],
            window_size: 2,
            effn_ratio: 2,
            num_classes: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.img_size == 0 || !self.img_size.is_multiple_of(self.patch_size << (STAGES - 1))
        {
            return bad(format!(
                "img_size {} must be a positive multiple of patch_size * 8 = {}",
                self.img_size,
                self.patch_size * 8
            ));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.stage_widths[0] == 0 || self.stage_widths.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!(
                "stage widths {:?} must double at every stage",
                self.stage_widths
            ));
        }
        for i in 0..STAGES {
            let (c, d, h) = (self.stage_widths[i], self.stage_depths[i], self.heads_per_stage[i]);
            if d == 0 || d % 2 != 0 {
                return bad(format!("stage {i} depth {d} must be a positive even number"));
            }
            if h == 0 || c % h != 0 {
                return bad(format!("stage {i} width {c} not divisible by {h} heads"));
            }
        }
        if !self.stage_widths[0].is_multiple_of(2) {
            return bad("stage widths must be even for patch expansion".into());
        }
        if self.window_size == 0 || self.effn_ratio == 0 {
            return bad("window_size and effn_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if self.dspp_rates.len() != 4 || self.dspp_rates.contains(&0) {
            return bad(format!(
                "dspp_rates {:?} must list four positive dilations",
                self.dspp_rates
            ));
        }
        Ok(())
    }

    /// Token-grid side of the first stage.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    /// Token-grid side of stage `i`.
    pub fn stage_grid(&self, i: usize) -> usize {
        self.grid() >> i
    }

    pub fn block_config(&self, stage: usize, enhanced_ffn: bool) -> BlockConfig {
        let side = self.stage_grid(stage);
        BlockConfig {
            dim: self.stage_widths[stage],
            heads: self.heads_per_stage[stage],
            window: self.window_size,
            grid: (side, side),
            ffn_ratio: self.effn_ratio,
            enhanced_ffn,
        }
    }
}

/// Token features `[B, side * side, channels]` on a square grid.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub side: usize,
    pub channels: usize,
}

impl FeatureMap {
    /// `[B, L, C] -> [B, C, H, W]`.
    pub fn to_nchw<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<Var> {
        let b = s.graph.shape(self.var)[0];
        let x = s.graph.reshape(self.var, &[b, self.side, self.side, self.channels])?;
        s.graph.permute(x, &[0, 3, 1, 2])
    }
}

/// Per-stage features, shallowest first; the last one is the bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub skips: Vec<FeatureMap>,
}

impl EncoderOutput {
    pub fn bottleneck(&self) -> FeatureMap {
        *self.skips.last().expect("encoder emits one skip per stage")
    }
}

/// Non-overlapping `p x p` patch projection followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(name: &str, in_ch: usize, dim: usize, patch: usize) -> Result<Self> {
        let geo = ConvGeometry {
            stride: patch,
            ..ConvGeometry::default()
        };
        Ok(Self {
            proj: Conv2d::new(join(name, "proj"), in_ch, dim, patch, geo, true)?,
            norm: LayerNorm::new(join(name, "norm"), dim),
            patch,
        })
    }

    /// `image [B, C_in, H, W] -> tokens [B, (H/p)(W/p), C]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let shape = s.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.proj.in_ch {
            return Err(Error::invalid(
                "patch_embed",
                format!("expected [B, {}, H, W], got {shape:?}", self.proj.in_ch),
            ));
        }
        if !shape[2].is_multiple_of(self.patch) || !shape[3].is_multiple_of(self.patch) {
            return Err(Error::invalid(
                "patch_embed",
                format!(
                    "{}x{} input not divisible by patch size {}",
                    shape[2], shape[3], self.patch
                ),
            ));
        }
        let x = self.proj.forward(s, image)?;
        let (b, c) = (shape[0], self.proj.out_ch);
        let l = (shape[2] / self.patch) * (shape[3] / self.patch);
        let x = s.graph.permute(x, &[0, 2, 3, 1])?;
        let x = s.graph.reshape(x, &[b, l, c])?;
        self.norm.forward(s, x)
    }
}

impl Module for PatchEmbed {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj.param_specs(out);
        self.norm.param_specs(out);
    }
}

/// Offsets `(dy, dx)` of the four neighbours concatenated by patch merging.
pub const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Row map gathering each 2x2 neighbourhood of an `h x w` grid into one
/// token of four concatenated rows, in [`MERGE_ORDER`].
pub fn merge_index(batch: usize, h: usize, w: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (dy, dx) in MERGE_ORDER {
                    index.push((b * h * w + (2 * i + dy) * w + 2 * j + dx) as u32);
                }
            }
        }
    }
    index
}

/// 2x downsampling: concatenate 2x2 neighbourhoods, normalise, project to 2C.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(join(name, "norm"), 4 * dim),
            reduction: Linear::new(join(name, "reduction"), 4 * dim, 2 * dim, false),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, grid: (usize, usize)) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (h, w) = grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("patch_merging", format!("odd token grid {h}x{w}")));
        }
        if shape.len() != 3 || shape[1] != h * w || shape[2] != self.dim {
            return Err(Error::invalid(
                "patch_merging",
                format!("expected [B, {}, {}], got {shape:?}", h * w, self.dim),
            ));
        }
        let b = shape[0];
        let index = Arc::new(merge_index(b, h, w));
        let x = s.graph.gather_rows(x, self.dim, index, &[b, h * w / 4, 4 * self.dim])?;
        let x = self.norm.forward(s, x)?;
        self.reduction.forward(s, x)
    }
}

impl Module for PatchMerging {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm.param_specs(out);
        self.reduction.param_specs(out);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub pairs: Vec<MwaBlockPair>,
    pub merge: Option<PatchMerging>,
    pub side: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(name: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(
            &join(name, "embed"),
            cfg.in_channels,
            cfg.stage_widths[0],
            cfg.patch_size,
        )?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let stage = join(name, &format!("stages.{i}"));
            let block = cfg.block_config(i, cfg.use_effn);
            let pairs = (0..cfg.stage_depths[i] / 2)
                .map(|p| MwaBlockPair::new(&join(&stage, &format!("pairs.{p}")), block))
                .collect::<Result<Vec<_>>>()?;
            let merge = (i + 1 < STAGES).then(|| PatchMerging::new(&join(&stage, "merge"), cfg.stage_widths[i]));
            stages.push(EncoderStage {
                pairs,
                merge,
                side: cfg.stage_grid(i),
                dim: cfg.stage_widths[i],
            });
        }
        Ok(Self { embed, stages })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<EncoderOutput> {
        let mut x = self.embed.forward(s, image)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for pair in &stage.pairs {
                x = pair.forward(s, x)?;
            }
            skips.push(FeatureMap {
                var: x,
                side: stage.side,
                channels: stage.dim,
            });
            if let Some(merge) = &stage.merge {
                x = merge.forward(s, x, (stage.side, stage.side))?;
            }
        }
        Ok(EncoderOutput { skips })
    }
}

impl Module for Encoder {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.embed.param_specs(out);
        for stage in &self.stages {
            for pair in &stage.pairs {
                pair.param_specs(out);
            }
            if let Some(m) = &stage.merge {
                m.param_specs(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_widths_double() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_widths, [96, 192, 384, 768]);
        assert_eq!(cfg.dspp_rates, [1, 6, 12, 18]);
        ModelConfig::desk().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig {
            img_size: 60,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.img_size = 64;
        cfg.stage_widths = [96, 190, 384, 768];
        assert!(cfg.validate().is_err());
        cfg.stage_widths = [96, 192, 384, 768];
        cfg.stage_depths = [2, 3, 6, 2];
        assert!(cfg.validate().is_err());
        cfg.stage_depths = [2, 2, 6, 2];
        cfg.heads_per_stage = [5, 6, 12, 24];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn merge_index_follows_coordinate_order() {
        let idx = merge_index(1, 4, 4);
        assert_eq!(idx.len(), 16);
        assert_eq!(idx[..4], [0, 4, 1, 5]);
        assert_eq!(idx[4..8], [2, 6, 3, 7]);
        assert_eq!(idx[12..], [10, 14, 11, 15]);
    }
}
