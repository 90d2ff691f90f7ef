//! Parameterised layers over [`Session`]: each layer knows its parameter
//! names and shapes and records its forward computation on the session graph.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{ema_update, BatchNormState, BnMode, ConvGeometry};
use crate::params::{join, Init, Module, ParamSpec, Session};
use crate::scalar::Scalar;

/// Standard deviation of truncated-normal init for projections and bias tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = if self.bias {
            Some(s.param(&self.bias_name())?)
        } else {
            None
        };
        s.graph.linear(x, w, b)
    }
}

impl Module for Linear {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: vec![self.out_dim, self.in_dim],
            init: Init::TruncNormal { std: INIT_STD },
            trainable: true,
        });
        if self.bias {
            out.push(ParamSpec {
                name: self.bias_name(),
                shape: vec![self.out_dim],
                init: Init::Zeros,
                trainable: true,
            });
        }
    }
}

/// Convolution layer (grouped or dense); depth-wise when `groups == in == out`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geo: ConvGeometry,
    pub bias: bool,
    /// Zero weights and bias at init instead of the fan-in uniform default.
    pub zero_init: bool,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geo: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        if geo.groups == 0 || !in_ch.is_multiple_of(geo.groups) || !out_ch.is_multiple_of(geo.groups) {
            return Err(Error::Config(format!(
                "{name}: channels {in_ch}->{out_ch} not divisible by groups {}",
                geo.groups
            )));
        }
        if geo.dilation == 0 || geo.stride == 0 || kernel == 0 {
            return Err(Error::Config(format!(
                "{name}: kernel, stride and dilation must be >= 1"
            )));
        }
        Ok(Self {
            name,
            in_ch,
            out_ch,
            kernel,
            geo,
            bias,
            zero_init: false,
        })
    }

    /// `kernel x kernel` depth-wise convolution with "same" padding.
    pub fn depthwise(name: impl Into<String>, ch: usize, kernel: usize, dilation: usize, bias: bool) -> Self {
        Self::new(
            name,
            ch,
            ch,
            kernel,
            ConvGeometry::same(kernel, dilation).with_groups(ch),
            bias,
        )
        .expect("depth-wise geometry is always valid")
    }

    pub fn pointwise(name: impl Into<String>, in_ch: usize, out_ch: usize, bias: bool) -> Self {
        Self::new(name, in_ch, out_ch, 1, ConvGeometry::default(), bias).expect("1x1 geometry is always valid")
    }

    pub fn zero_initialised(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.geo.groups == self.in_ch && self.in_ch == self.out_ch && self.in_ch > 1
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = if self.bias {
            Some(s.param(&self.bias_name())?)
        } else {
            None
        };
        if self.is_depthwise() {
            s.graph.depthwise_conv2d(x, w, b, self.geo)
        } else {
            s.graph.conv2d(x, w, b, self.geo)
        }
    }
}

impl Module for Conv2d {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.in_ch / self.geo.groups * self.kernel * self.kernel;
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::Uniform {
                bound: 1.0 / (fan_in as f64).sqrt(),
            }
        };
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: vec![self.out_ch, self.in_ch / self.geo.groups, self.kernel, self.kernel],
            init,
            trainable: true,
        });
        if self.bias {
            out.push(ParamSpec {
                name: self.bias_name(),
                shape: vec![self.out_ch],
                init,
                trainable: true,
            });
        }
    }
}

/// 3x3 deformable convolution whose offsets come from a zero-initialised
/// 3x3 convolution, so it starts out as a plain convolution.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    pub name: String,
    pub offset: Conv2d,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub bias: bool,
}

impl DeformConv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, bias: bool) -> Self {
        let name = name.into();
        let kernel = 3;
        let offset = Conv2d::new(
            join(&name, "offset"),
            in_ch,
            2 * kernel * kernel,
            3,
            ConvGeometry::same(3, 1),
            true,
        )
        .expect("offset conv geometry is valid")
        .zero_initialised();
        Self {
            name,
            offset,
            in_ch,
            out_ch,
            kernel,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let offsets = self.offset.forward(s, x)?;
        let w = s.param(&self.weight_name())?;
        let b = if self.bias {
            Some(s.param(&join(&self.name, "bias"))?)
        } else {
            None
        };
        s.graph
            .deform_conv2d(x, offsets, w, b, ConvGeometry::same(self.kernel, 1))
    }
}

impl Module for DeformConv2d {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.offset.param_specs(out);
        let bound = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            init: Init::Uniform { bound },
            trainable: true,
        });
        if self.bias {
            out.push(ParamSpec {
                name: join(&self.name, "bias"),
                shape: vec![self.out_ch],
                init: Init::Uniform { bound },
                trainable: true,
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(&join(&self.name, "weight"))?;
        let b = s.param(&join(&self.name, "bias"))?;
        s.graph.layer_norm(x, g, b, Self::EPS)
    }
}

impl Module for LayerNorm {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: join(&self.name, "weight"),
            shape: vec![self.dim],
            init: Init::Ones,
            trainable: true,
        });
        out.push(ParamSpec {
            name: join(&self.name, "bias"),
            shape: vec![self.dim],
            init: Init::Zeros,
            trainable: true,
        });
    }
}

/// Batch normalisation whose running statistics live in the parameter store.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(&join(&self.name, "weight"))?;
        let beta = s.param(&join(&self.name, "bias"))?;
        let mean_name = join(&self.name, "running_mean");
        let var_name = join(&self.name, "running_var");
        let eps = BatchNormState::<T>::DEFAULT_EPS;
        if !s.training() {
            let mean = s.buffer(&mean_name)?;
            let var = s.buffer(&var_name)?;
            return Ok(s.graph.batch_norm(x, gamma, beta, BnMode::Eval { mean, var }, eps)?.0);
        }
        let (y, moments) = s.graph.batch_norm(x, gamma, beta, BnMode::Train, eps)?;
        let moments = moments.expect("training mode yields batch moments");
        let momentum = BatchNormState::<T>::DEFAULT_MOMENTUM;
        let mut mean = s.buffer(&mean_name)?.to_vec();
        let mut var = s.buffer(&var_name)?.to_vec();
        ema_update(&mut mean, &moments.mean, momentum);
        ema_update(&mut var, &moments.var_unbiased, momentum);
        s.record_update(mean_name, mean);
        s.record_update(var_name, var);
        Ok(y)
    }
}

impl Module for BatchNorm2d {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for (local, init, trainable) in [
            ("weight", Init::Ones, true),
            ("bias", Init::Zeros, true),
            ("running_mean", Init::Zeros, false),
            ("running_var", Init::Ones, false),
        ] {
            out.push(ParamSpec {
                name: join(&self.name, local),
                shape: vec![self.channels],
                init,
                trainable,
            });
        }
    }
}
