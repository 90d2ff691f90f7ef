//! Central finite-difference verification of every backward rule, run in
//! `f64`: one dedicated check per differentiable operation, plus composite
//! checks of the network's building blocks and of a whole micro model.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{BlockConfig, Effn, Ffn, MwaBlockPair};
use crate::decoder::{ChannelAttention, MedDspp, MffStage, SpatialAttention};
use crate::encoder::{ModelConfig, PatchMerging};
use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::model::HbFormer;
use crate::nn::{BnMode, ConvGeometry, LEAKY_SLOPE};
use crate::ops::PAD_ROW;
use crate::params::{Module, ParamSpec, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error bound of single-operation and building-block checks.
    pub op_tolerance: f64,
    /// Relative-error bound of the whole-model check.
    pub model_tolerance: f64,
    /// Entries probed per tensor; smaller tensors are probed exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Deliberately corrupt this operation's backward rule.
    pub fault: Option<OpKind>,
    pub include_model: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            op_tolerance: 1e-4,
            model_tolerance: 1e-3,
            samples_per_tensor: 6,
            seed: 17,
            fault: None,
            include_model: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    /// Dedicated check of one operation.
    Op(OpKind),
    /// Composite check of a network component.
    Block(&'static str),
}

impl CheckTarget {
    pub fn name(&self) -> &'static str {
        match self {
            CheckTarget::Op(op) => op.name(),
            CheckTarget::Block(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub target: CheckTarget,
    /// `|a - n| / max(|a|, |n|)` over every probed entry, where `a` is the
    /// analytic and `n` the numeric gradient.
    pub rel_err: f64,
    /// Tensor contributing the largest absolute discrepancy.
    pub worst_tensor: String,
    pub tolerance: f64,
    pub probes: usize,
    /// Operations recorded by the checked computation.
    pub ops: BTreeSet<OpKind>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed())
    }

    /// Operations with a dedicated check.
    pub fn covered_ops(&self) -> BTreeSet<OpKind> {
        self.outcomes
            .iter()
            .filter_map(|o| match o.target {
                CheckTarget::Op(op) => Some(op),
                CheckTarget::Block(_) => None,
            })
            .collect()
    }

    pub fn missing_ops(&self) -> Vec<OpKind> {
        let covered = self.covered_ops();
        OpKind::DIFFERENTIABLE
            .into_iter()
            .filter(|op| !covered.contains(op))
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.outcomes.iter().map(|o| o.rel_err).fold(0.0, f64::max)
    }
}

type Build<'f> = dyn Fn(&mut Session<'_, f64>) -> Result<Var> + 'f;

/// Compares analytic gradients of the scalar built by `build` with central
/// differences, for every tensor in `store` that requires a gradient.
pub fn check(
    target: CheckTarget,
    store: &mut ParamStore<f64>,
    build: &Build<'_>,
    opts: &GradcheckOptions,
    tolerance: f64,
) -> Result<CheckOutcome> {
    let graph = opts.fault.map_or_else(Graph::new, Graph::with_fault);
    let mut s = Session::with_graph(graph, store, true);
    let loss = build(&mut s)?;
    let out = s.finish();
    let grads = out.graph.backward(loss)?;
    let ops: BTreeSet<OpKind> = (0..out.graph.len())
        .map(|i| out.graph.op(Var(i)))
        .filter(|&op| op != OpKind::Leaf)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store, true);
        let l = build(&mut s)?;
        Ok(s.graph.value(l)[0])
    };
    let (mut diff, mut norm_a, mut norm_n, mut probes) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let (mut worst_diff, mut worst_tensor) = (-1.0f64, String::new());
    for name in names {
        let n = store.get(&name)?.len();
        let analytic_all: Vec<f64> = match out.bound.get(&name).and_then(|&v| grads.get(v)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        let picks: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.samples_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let mut tensor_diff = 0.0;
        for i in picks {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let up = eval(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let down = eval(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic_all[i];
            tensor_diff += (a - numeric) * (a - numeric);
            norm_a += a * a;
            norm_n += numeric * numeric;
            probes += 1;
        }
        diff += tensor_diff;
        if tensor_diff > worst_diff {
            worst_diff = tensor_diff;
            worst_tensor = name;
        }
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    let rel_err = if scale > 0.0 { diff.sqrt() / scale } else { 0.0 };
    Ok(CheckOutcome {
        target,
        rel_err,
        worst_tensor,
        tolerance,
        probes,
        ops,
    })
}

/// `sum(x * r)` for a fixed pseudo-random `r`, turning any output into a
/// scalar whose gradient reaches every element.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r: Vec<f64> = (0..g.value(x).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = g.constant(shape, r)?;
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

/// Store of independent uniform tensors, all requiring gradients.
fn inputs(seed: u64, specs: &[(&str, &[usize], f64)]) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for &(name, shape, scale) in specs {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        store.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("fixed shapes").with_grad(true),
        );
    }
    store
}

/// Values bounded away from zero, for kinked functions.
fn away_from_zero(store: &mut ParamStore<f64>, name: &str) {
    if let Ok(t) = store.get_mut(name) {
        for v in t.data_mut() {
            *v += 0.1f64.copysign(*v);
        }
    }
}

fn op_check(
    op: OpKind,
    mut store: ParamStore<f64>,
    build: &Build<'_>,
    opts: &GradcheckOptions,
) -> Result<CheckOutcome> {
    check(CheckTarget::Op(op), &mut store, build, opts, opts.op_tolerance)
}

fn labels(seed: u64, n: usize, classes: u8) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Dedicated checks, one per differentiable operation.
pub fn op_checks(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    let seed = opts.seed;
    let mut out = Vec::new();
    let p = |s: &mut Session<'_, f64>, v: Var| project(&mut s.graph, v, seed);

    out.push(op_check(
        OpKind::Add,
        inputs(seed, &[("a", &[3, 4], 1.0), ("b", &[3, 4], 1.0)]),
        &|s| {
            let (a, b) = (s.param("a")?, s.param("b")?);
            let y = s.graph.add(a, b)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Mul,
        inputs(seed, &[("a", &[3, 4], 1.0), ("b", &[3, 4], 1.0)]),
        &|s| {
            let (a, b) = (s.param("a")?, s.param("b")?);
            let y = s.graph.mul(a, b)?;
            let y = s.graph.mul(y, a)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Scale,
        inputs(seed, &[("a", &[2, 5], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.scale(a, -0.7);
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Concat,
        inputs(seed, &[("a", &[2, 3, 2], 1.0), ("b", &[2, 1, 2], 1.0)]),
        &|s| {
            let (a, b) = (s.param("a")?, s.param("b")?);
            let y = s.graph.concat(&[a, b, a], 1)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Reshape,
        inputs(seed, &[("a", &[2, 6], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.reshape(a, &[3, 4])?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Permute,
        inputs(seed, &[("a", &[2, 3, 4], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.permute(a, &[2, 0, 1])?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Slice,
        inputs(seed, &[("a", &[3, 5, 2], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.slice(a, 1, 1, 3)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Sum,
        inputs(seed, &[("a", &[3, 4], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let sq = s.graph.mul(a, a)?;
            Ok(s.graph.sum(sq))
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Mean,
        inputs(seed, &[("a", &[3, 4], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let sq = s.graph.mul(a, a)?;
            Ok(s.graph.mean(sq))
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Matmul,
        inputs(
            seed,
            &[("a", &[2, 3, 4], 1.0), ("b", &[2, 4, 5], 1.0), ("c", &[2, 6, 5], 1.0)],
        ),
        &|s| {
            let (a, b, c) = (s.param("a")?, s.param("b")?, s.param("c")?);
            let ab = s.graph.matmul(a, b)?;
            let y = s.graph.matmul_nt(ab, c)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Linear,
        inputs(seed, &[("x", &[2, 3, 4], 1.0), ("w", &[5, 4], 1.0), ("b", &[5], 1.0)]),
        &|s| {
            let (x, w, b) = (s.param("x")?, s.param("w")?, s.param("b")?);
            let y = s.graph.linear(x, w, Some(b))?;
            let z = s.graph.linear(x, w, None)?;
            let y = s.graph.add(y, z)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Softmax,
        inputs(seed, &[("a", &[2, 3, 5], 2.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.softmax(a, 2)?;
            let z = s.graph.softmax(a, 1)?;
            let y = s.graph.add(y, z)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::LayerNorm,
        inputs(seed, &[("x", &[3, 6], 2.0), ("g", &[6], 1.0), ("b", &[6], 1.0)]),
        &|s| {
            let (x, g, b) = (s.param("x")?, s.param("g")?, s.param("b")?);
            let y = s.graph.layer_norm(x, g, b, 1e-5)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::GatherRows,
        inputs(seed, &[("a", &[5, 3], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let index = Arc::new(vec![4, 0, PAD_ROW, 4, 2, 1]);
            let y = s.graph.gather_rows(a, 3, index, &[2, 3, 3])?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::AttentionBias,
        inputs(seed, &[("scores", &[4, 2, 3, 3], 1.0), ("bias", &[2, 3, 3], 1.0)]),
        &|s| {
            let (sc, b) = (s.param("scores")?, s.param("bias")?);
            let mask: Vec<f64> = (0..18).map(|i| if i % 4 == 1 { -3.0 } else { 0.0 }).collect();
            let y = s.graph.attention_bias(sc, b, Some(Arc::new(mask)))?;
            let y = s.graph.softmax(y, 3)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Conv2d,
        inputs(
            seed,
            &[
                ("x", &[2, 4, 7, 7], 1.0),
                ("w", &[6, 2, 3, 3], 1.0),
                ("b", &[6], 1.0),
                ("w1", &[3, 4, 1, 1], 1.0),
            ],
        ),
        &|s| {
            let (x, w, b, w1) = (s.param("x")?, s.param("w")?, s.param("b")?, s.param("w1")?);
            let geo = ConvGeometry {
                stride: 2,
                padding: 2,
                dilation: 2,
                groups: 2,
            };
            let y = s.graph.conv2d(x, w, Some(b), geo)?;
            let z = s.graph.conv2d(x, w1, None, ConvGeometry::default())?;
            let (py, pz) = (p(s, y)?, p(s, z)?);
            s.graph.add(py, pz)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::DepthwiseConv2d,
        inputs(
            seed,
            &[("x", &[2, 3, 5, 5], 1.0), ("w", &[3, 1, 3, 3], 1.0), ("b", &[3], 1.0)],
        ),
        &|s| {
            let (x, w, b) = (s.param("x")?, s.param("w")?, s.param("b")?);
            let y = s
                .graph
                .depthwise_conv2d(x, w, Some(b), ConvGeometry::same(3, 2).with_groups(3))?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::DeformConv2d,
        inputs(
            seed,
            &[
                ("x", &[1, 2, 5, 5], 1.0),
                ("off", &[1, 18, 5, 5], 1.5),
                ("w", &[3, 2, 3, 3], 1.0),
                ("b", &[3], 1.0),
            ],
        ),
        &|s| {
            let (x, o, w, b) = (s.param("x")?, s.param("off")?, s.param("w")?, s.param("b")?);
            let y = s.graph.deform_conv2d(x, o, w, Some(b), ConvGeometry::same(3, 1))?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::BatchNorm,
        inputs(seed, &[("x", &[3, 2, 2, 3], 2.0), ("g", &[2], 1.0), ("b", &[2], 1.0)]),
        &|s| {
            let (x, g, b) = (s.param("x")?, s.param("g")?, s.param("b")?);
            let (y, _) = s.graph.batch_norm(x, g, b, BnMode::Train, 1e-5)?;
            let (mean, var) = ([0.1, -0.2], [0.7, 1.3]);
            let eval = BnMode::Eval {
                mean: &mean[..],
                var: &var[..],
            };
            let (z, _) = s.graph.batch_norm(x, g, b, eval, 1e-5)?;
            let (py, pz) = (p(s, y)?, p(s, z)?);
            s.graph.add(py, pz)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Gelu,
        inputs(seed, &[("a", &[4, 5], 3.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.gelu(a);
            p(s, y)
        },
        opts,
    )?);
    let mut leaky = inputs(seed, &[("a", &[4, 5], 2.0)]);
    away_from_zero(&mut leaky, "a");
    out.push(op_check(
        OpKind::LeakyRelu,
        leaky,
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.leaky_relu(a, LEAKY_SLOPE);
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::Sigmoid,
        inputs(seed, &[("a", &[4, 5], 4.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.sigmoid(a);
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::UpsampleNearest,
        inputs(seed, &[("a", &[1, 2, 3, 3], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.upsample_nearest2x(a)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::BilinearResize,
        inputs(seed, &[("a", &[1, 2, 3, 4], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let up = s.graph.bilinear_resize(a, 7, 9)?;
            let down = s.graph.bilinear_resize(a, 2, 3)?;
            let (pu, pd) = (p(s, up)?, p(s, down)?);
            s.graph.add(pu, pd)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::MeanSpatial,
        inputs(seed, &[("a", &[2, 3, 4, 4], 1.0)]),
        &|s| {
            let a = s.param("a")?;
            let y = s.graph.mean_spatial(a)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::ScaleChannels,
        inputs(seed, &[("x", &[2, 3, 4, 4], 1.0), ("gate", &[2, 3], 1.0)]),
        &|s| {
            let (x, gt) = (s.param("x")?, s.param("gate")?);
            let y = s.graph.scale_channels(x, gt)?;
            p(s, y)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::ScaleSpatial,
        inputs(seed, &[("x", &[2, 3, 4, 4], 1.0), ("map", &[2, 1, 4, 4], 1.0)]),
        &|s| {
            let (x, m) = (s.param("x")?, s.param("map")?);
            let y = s.graph.scale_spatial(x, m)?;
            p(s, y)
        },
        opts,
    )?);
    let targets = labels(seed, 2 * 16, 3);
    out.push(op_check(
        OpKind::BceLoss,
        inputs(seed, &[("z", &[2, 3, 4, 4], 3.0)]),
        &|s| {
            let z = s.param("z")?;
            s.graph.bce_loss(z, &targets)
        },
        opts,
    )?);
    out.push(op_check(
        OpKind::DiceLoss,
        inputs(seed, &[("z", &[2, 3, 4, 4], 3.0)]),
        &|s| {
            let z = s.param("z")?;
            s.graph.dice_loss(z, &targets, 1.0)
        },
        opts,
    )?);
    Ok(out)
}

/// Initial parameters for `specs` in `f64`, with every tensor randomised
/// (including zero-initialised offsets, norms and biases) so no path is
/// trivially inert and deformable sampling avoids integer positions.
pub fn randomized_params(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::init(specs, seed).cast::<f64>();
    store.apply_trainable(specs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for spec in specs.iter().filter(|s| s.trainable) {
        let t = store.get_mut(&spec.name).expect("initialised from specs");
        let perturb = if spec.name.contains(".offset.") { 0.05 } else { 0.1 };
        for v in t.data_mut() {
            *v += perturb * rng.random_range(-1.0..1.0);
        }
    }
    store
}

fn block_store(specs: &[ParamSpec], seed: u64, extra: &[(&str, &[usize], f64)]) -> ParamStore<f64> {
    let mut store = randomized_params(specs, seed);
    for (name, t) in inputs(seed ^ 0x55, extra).iter() {
        store.insert(name, t.clone());
    }
    store
}

/// Composite checks of the network's building blocks.
pub fn block_checks(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    let seed = opts.seed;
    let tol = opts.op_tolerance;
    let mut out = Vec::new();

    let cfg = BlockConfig {
        dim: 8,
        heads: 2,
        window: 2,
        grid: (4, 4),
        ffn_ratio: 2,
        enhanced_ffn: true,
    };
    let pair = MwaBlockPair::new("pair", cfg)?;
    let mut store = block_store(&pair.specs(), seed, &[("tokens", &[1, 16, 8], 1.0)]);
    out.push(check(
        CheckTarget::Block("mwa_block_pair"),
        &mut store,
        &|s| {
            let x = s.param("tokens")?;
            let y = pair.forward(s, x)?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let effn = Effn::new("effn", 4, 2);
    let mut store = block_store(&effn.specs(), seed, &[("tokens", &[2, 6, 4], 1.0)]);
    out.push(check(
        CheckTarget::Block("effn"),
        &mut store,
        &|s| {
            let x = s.param("tokens")?;
            let y = effn.forward(s, x, (2, 3))?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let ffn = Ffn::new("ffn", 4, 2);
    let mut store = block_store(&ffn.specs(), seed, &[("tokens", &[2, 3, 4], 1.0)]);
    out.push(check(
        CheckTarget::Block("ffn"),
        &mut store,
        &|s| {
            let x = s.param("tokens")?;
            let y = ffn.forward(s, x)?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let merge = PatchMerging::new("merge", 4);
    let mut store = block_store(&merge.specs(), seed, &[("tokens", &[1, 16, 4], 1.0)]);
    out.push(check(
        CheckTarget::Block("patch_merging"),
        &mut store,
        &|s| {
            let x = s.param("tokens")?;
            let y = merge.forward(s, x, (4, 4))?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let dspp = MedDspp::new("dspp", 3, &[1, 6, 12, 18])?;
    let mut store = block_store(&dspp.specs(), seed, &[("x", &[2, 3, 8, 8], 1.0)]);
    out.push(check(
        CheckTarget::Block("med_dspp"),
        &mut store,
        &|s| {
            let x = s.param("x")?;
            let y = dspp.forward(s, x)?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let ca = ChannelAttention::new("ca", 8);
    let mut store = block_store(&ca.specs(), seed, &[("x", &[2, 8, 3, 3], 1.0)]);
    out.push(check(
        CheckTarget::Block("channel_attention"),
        &mut store,
        &|s| {
            let x = s.param("x")?;
            let y = ca.forward(s, x)?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let sa = SpatialAttention::new("sa", 3);
    let mut store = block_store(&sa.specs(), seed, &[("x", &[2, 3, 5, 5], 1.0)]);
    out.push(check(
        CheckTarget::Block("spatial_attention"),
        &mut store,
        &|s| {
            let x = s.param("x")?;
            let y = sa.forward(s, x)?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let stage = MffStage::new("stage", 6, 3, &[1, 6, 12, 18])?;
    let mut store = block_store(
        &stage.specs(),
        seed,
        &[("below", &[2, 6, 4, 4], 1.0), ("skip", &[2, 3, 8, 8], 1.0)],
    );
    out.push(check(
        CheckTarget::Block("mff_stage"),
        &mut store,
        &|s| {
            let (b, k) = (s.param("below")?, s.param("skip")?);
            let y = stage.forward(s, b, k)?;
            project(&mut s.graph, y, seed)
        },
        opts,
        tol,
    )?);

    let targets = labels(seed, 2 * 25, 3);
    let mut store = inputs(seed, &[("z", &[2, 3, 5, 5], 3.0)]);
    out.push(check(
        CheckTarget::Block("bce_dice_loss"),
        &mut store,
        &|s| {
            let z = s.param("z")?;
            s.graph.bce_dice_loss(z, &targets)
        },
        opts,
        tol,
    )?);
    Ok(out)
}

/// Whole-network check: the micro configuration (32x32 input, window 2)
/// trained on the segmentation loss, probing the image and every parameter.
pub fn model_check(opts: &GradcheckOptions) -> Result<CheckOutcome> {
    let model = HbFormer::new(ModelConfig::micro())?;
    let cfg = &model.config;
    let shape = [2, cfg.in_channels, cfg.img_size, cfg.img_size];
    let mut store = block_store(&model.specs(), opts.seed, &[("image", &shape, 1.0)]);
    let targets = labels(opts.seed, 2 * cfg.img_size * cfg.img_size, cfg.num_classes as u8);
    check(
        CheckTarget::Block("micro_model"),
        &mut store,
        &|s| {
            let x = s.param("image")?;
            let y = model.forward(s, x)?;
            s.graph.bce_dice_loss(y, &targets)
        },
        &GradcheckOptions {
            samples_per_tensor: opts.samples_per_tensor.min(2),
            ..opts.clone()
        },
        opts.model_tolerance,
    )
}

/// Every operation check, every building-block check and, if enabled, the
/// whole-model check.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut outcomes = op_checks(opts)?;
    outcomes.extend(block_checks(opts)?);
    if opts.include_model {
        outcomes.push(model_check(opts)?);
    }
    Ok(GradcheckReport { outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_differentiable_op_has_a_passing_check() {
        let opts = GradcheckOptions::default();
        let report = GradcheckReport {
            outcomes: op_checks(&opts).unwrap(),
        };
        assert!(report.missing_ops().is_empty(), "{:?}", report.missing_ops());
        for o in &report.outcomes {
            assert!(o.passed(), "{} rel err {:e}", o.target.name(), o.rel_err);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = GradcheckOptions {
            fault: Some(OpKind::Softmax),
            ..GradcheckOptions::default()
        };
        let outcomes = op_checks(&opts).unwrap();
        let failing: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.target).collect();
        assert!(failing.contains(&CheckTarget::Op(OpKind::Softmax)));
        assert!(!failing.contains(&CheckTarget::Op(OpKind::Linear)));
    }

    #[test]
    fn building_blocks_pass() {
        for o in block_checks(&GradcheckOptions::default()).unwrap() {
            assert!(o.passed(), "{} rel err {:e}", o.target.name(), o.rel_err);
        }
    }

    #[test]
    fn micro_model_passes_and_catches_a_fault() {
        let clean = model_check(&GradcheckOptions::default()).unwrap();
        assert!(clean.passed(), "{:e}", clean.rel_err);
        assert!(clean.ops.contains(&OpKind::DeformConv2d));
        let faulty = model_check(&GradcheckOptions {
            fault: Some(OpKind::LayerNorm),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!faulty.passed());
    }
}
