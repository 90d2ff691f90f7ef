use std::sync::Arc;

use crate::attention::bias::RelativePositionBias;
use crate::attention::window::WindowLayout;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::{join, Module, ParamSpec, Session};
use crate::scalar::Scalar;

/// Multi-head self-attention inside windows, with relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub bias: RelativePositionBias,
}

/// Attention output together with the post-softmax weights `[G, heads, N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
}

impl WindowAttention {
    pub fn new(name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            qkv: Linear::new(join(name, "qkv"), dim, 3 * dim, true),
            proj: Linear::new(join(name, "proj"), dim, dim, true),
            bias: RelativePositionBias::new(join(name, "rel_bias"), window, heads),
        })
    }

    /// `tokens [G, N, C]` with `N == window^2`; `mask` is `[nW, N, N]` and
    /// applies to group `g` as window `g % nW`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        tokens: Var,
        mask: Option<Arc<Vec<T>>>,
    ) -> Result<AttentionOutput> {
        let shape = s.graph.shape(tokens).to_vec();
        let n = self.bias.window * self.bias.window;
        if shape.len() != 3 || shape[1] != n || shape[2] != self.dim {
            return Err(Error::invalid(
                "window_attention",
                format!("expected [G, {n}, {}], got {shape:?}", self.dim),
            ));
        }
        let (groups, h, d) = (shape[0], self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(s, tokens)?;
        let qkv = s.graph.reshape(qkv, &[groups, n, 3, h, d])?;
        let qkv = s.graph.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |i: usize, s: &mut Session<'_, T>| -> Result<Var> {
            let p = s.graph.slice(qkv, 0, i, 1)?;
            s.graph.reshape(p, &[groups, h, n, d])
        };
        let (q, k, v) = (part(0, s)?, part(1, s)?, part(2, s)?);
        let q = s.graph.scale(q, 1.0 / (d as f64).sqrt());
        let scores = s.graph.matmul_nt(q, k)?;
        let bias = self.bias.forward(s)?;
        let scores = s.graph.attention_bias(scores, bias, mask)?;
        let probs = s.graph.softmax(scores, 3)?;
        let mixed = s.graph.matmul(probs, v)?;
        let mixed = s.graph.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = s.graph.reshape(mixed, &[groups, n, self.dim])?;
        let out = self.proj.forward(s, mixed)?;
        Ok(AttentionOutput { out, probs })
    }
}

impl Module for WindowAttention {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.qkv.param_specs(out);
        self.bias.param_specs(out);
        self.proj.param_specs(out);
    }
}

/// Feed-forward sublayer with a depth-wise and a point-wise convolution on
/// the token map between the expanding and contracting projections.
#[derive(Clone, Debug)]
pub struct Effn {
    pub fc1: Linear,
    pub dw: Conv2d,
    pub pw: Conv2d,
    pub fc2: Linear,
}

impl Effn {
    pub fn new(name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            fc1: Linear::new(join(name, "fc1"), dim, hidden, true),
            dw: Conv2d::depthwise(join(name, "dw"), hidden, 3, 1, true),
            pw: Conv2d::pointwise(join(name, "pw"), hidden, hidden, true),
            fc2: Linear::new(join(name, "fc2"), hidden, dim, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim
    }

    /// `tokens [B, L, C]` laid out row-major on an `h x w` grid.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let shape = s.graph.shape(tokens).to_vec();
        let (h, w) = grid;
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::invalid(
                "effn",
                format!("{shape:?} does not hold a {h}x{w} token grid"),
            ));
        }
        let (b, c) = (shape[0], self.hidden());
        let x = self.fc1.forward(s, tokens)?;
        let x = s.graph.reshape(x, &[b, h, w, c])?;
        let x = s.graph.permute(x, &[0, 3, 1, 2])?;
        let x = self.dw.forward(s, x)?;
        let x = s.graph.gelu(x);
        let x = self.pw.forward(s, x)?;
        let x = s.graph.permute(x, &[0, 2, 3, 1])?;
        let x = s.graph.reshape(x, &[b, h * w, c])?;
        self.fc2.forward(s, x)
    }
}

impl Module for Effn {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.param_specs(out);
        self.dw.param_specs(out);
        self.pw.param_specs(out);
        self.fc2.param_specs(out);
    }
}

/// Plain two-layer MLP: `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(name: &str, dim: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(join(name, "fc1"), dim, dim * ratio, true),
            fc2: Linear::new(join(name, "fc2"), dim * ratio, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var) -> Result<Var> {
        let x = self.fc1.forward(s, tokens)?;
        let x = s.graph.gelu(x);
        self.fc2.forward(s, x)
    }
}

impl Module for Ffn {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.param_specs(out);
        self.fc2.param_specs(out);
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Enhanced(Effn),
    Plain(Ffn),
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, ratio: usize, enhanced: bool) -> Self {
        if enhanced {
            Self::Enhanced(Effn::new(name, dim, ratio))
        } else {
            Self::Plain(Ffn::new(name, dim, ratio))
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        match self {
            Self::Enhanced(f) => f.forward(s, tokens, grid),
            Self::Plain(f) => f.forward(s, tokens),
        }
    }

    /// Name of the contracting projection, the last layer of the sublayer.
    pub fn output_layer(&self) -> &Linear {
        match self {
            Self::Enhanced(f) => &f.fc2,
            Self::Plain(f) => &f.fc2,
        }
    }
}

impl Module for FeedForward {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Self::Enhanced(f) => f.param_specs(out),
            Self::Plain(f) => f.param_specs(out),
        }
    }
}

/// Hyperparameters shared by every block of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    /// Requested window side; clamped to the grid by [`WindowLayout::for_stage`].
    pub window: usize,
    pub grid: (usize, usize),
    pub ffn_ratio: usize,
    pub enhanced_ffn: bool,
}

/// One pre-norm Transformer block: windowed attention sublayer then
/// feed-forward sublayer, each wrapped in a residual.
#[derive(Clone, Debug)]
pub struct MwaBlock {
    pub layout: WindowLayout,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

/// Block output plus the attention weights of its attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub out: Var,
    pub probs: Var,
}

impl MwaBlock {
    pub fn new(name: &str, cfg: BlockConfig, shifted: bool) -> Result<Self> {
        let layout = WindowLayout::for_stage(cfg.grid.0, cfg.grid.1, cfg.window, shifted)?;
        Ok(Self {
            layout,
            norm1: LayerNorm::new(join(name, "norm1"), cfg.dim),
            attn: WindowAttention::new(&join(name, "attn"), cfg.dim, cfg.heads, layout.window)?,
            norm2: LayerNorm::new(join(name, "norm2"), cfg.dim),
            ffn: FeedForward::new(&join(name, "ffn"), cfg.dim, cfg.ffn_ratio, cfg.enhanced_ffn),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x)?.out)
    }

    pub fn forward_traced<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<BlockTrace> {
        let shape = s.graph.shape(x).to_vec();
        let l = &self.layout;
        if shape.len() != 3 || shape[1] != l.tokens() || shape[2] != self.attn.dim {
            return Err(Error::invalid(
                "mwa_block",
                format!("expected [B, {}, {}], got {shape:?}", l.tokens(), self.attn.dim),
            ));
        }
        let (b, c) = (shape[0], shape[2]);
        let y = self.norm1.forward(s, x)?;
        let windows = s.graph.gather_rows(
            y,
            c,
            Arc::new(l.partition_index(b)),
            &[b * l.windows_per_image(), l.tokens_per_window(), c],
        )?;
        let mask = (l.shift > 0).then(|| Arc::new(l.attention_mask::<T>()));
        let attn = self.attn.forward(s, windows, mask)?;
        let merged = s.graph.gather_rows(attn.out, c, Arc::new(l.reverse_index(b)), &shape)?;
        let x = s.graph.add(x, merged)?;
        let y = self.norm2.forward(s, x)?;
        let y = self.ffn.forward(s, y, (l.feature_h, l.feature_w))?;
        let out = s.graph.add(x, y)?;
        Ok(BlockTrace { out, probs: attn.probs })
    }
}

impl Module for MwaBlock {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.param_specs(out);
        self.attn.param_specs(out);
        self.norm2.param_specs(out);
        self.ffn.param_specs(out);
    }
}

/// Regular-window block followed by its shifted-window twin.
#[derive(Clone, Debug)]
pub struct MwaBlockPair {
    pub regular: MwaBlock,
    pub shifted: MwaBlock,
}

impl MwaBlockPair {
    pub fn new(name: &str, cfg: BlockConfig) -> Result<Self> {
        Ok(Self {
            regular: MwaBlock::new(&join(name, "w"), cfg, false)?,
            shifted: MwaBlock::new(&join(name, "sw"), cfg, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let x = self.regular.forward(s, x)?;
        self.shifted.forward(s, x)
    }

    /// Names of the two output projections of each block, whose zeroing
    /// turns the pair into the identity.
    pub fn output_projection_names(&self) -> Vec<String> {
        [&self.regular, &self.shifted]
            .iter()
            .flat_map(|b| {
                let ffn = b.ffn.output_layer();
                [
                    b.attn.proj.weight_name(),
                    b.attn.proj.bias_name(),
                    ffn.weight_name(),
                    ffn.bias_name(),
                ]
            })
            .collect()
    }
}

impl Module for MwaBlockPair {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.regular.param_specs(out);
        self.shifted.param_specs(out);
    }
}
