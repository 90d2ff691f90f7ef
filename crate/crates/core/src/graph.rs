//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every operation appends a node holding its output value and a backward
//! rule. Nodes are only ever appended, so the tape is topologically ordered
//! by construction and [`Graph::backward`] walks it in exact reverse.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Concat,
    Reshape,
    Permute,
    Slice,
    Sum,
    Mean,
    Matmul,
    Linear,
    Softmax,
    LayerNorm,
    GatherRows,
    AttentionBias,
    Conv2d,
    DepthwiseConv2d,
    DeformConv2d,
    BatchNorm,
    Gelu,
    LeakyRelu,
    Sigmoid,
    UpsampleNearest,
    BilinearResize,
    MeanSpatial,
    ScaleChannels,
    ScaleSpatial,
    BceLoss,
    DiceLoss,
}

impl OpKind {
    /// Every operation with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 29] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Slice,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::GatherRows,
        OpKind::AttentionBias,
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::DeformConv2d,
        OpKind::BatchNorm,
        OpKind::Gelu,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::UpsampleNearest,
        OpKind::BilinearResize,
        OpKind::MeanSpatial,
        OpKind::ScaleChannels,
        OpKind::ScaleSpatial,
        OpKind::BceLoss,
        OpKind::DiceLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Slice => "slice",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::GatherRows => "gather_rows",
            OpKind::AttentionBias => "attention_bias",
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::DeformConv2d => "deformable_conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Gelu => "gelu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::UpsampleNearest => "upsample_nearest2x",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::MeanSpatial => "mean_spatial",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::ScaleSpatial => "scale_spatial",
            OpKind::BceLoss => "bce_loss",
            OpKind::DiceLoss => "dice_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

/// View of one node handed to its backward rule.
pub struct BackwardCtx<'a, T> {
    /// Upstream gradient, same length as the output.
    pub grad: &'a [T],
    pub output: &'a [T],
    inputs: Vec<&'a [T]>,
    needs: Vec<bool>,
}

impl<'a, T> BackwardCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a [T] {
        self.inputs[i]
    }

    /// Whether parent `i` wants a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: OpKind,
    shape: Vec<usize>,
    value: Vec<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A recorded forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Graph whose backward rule for `op` is deliberately wrong (gradients
    /// scaled by 1.5). Used to prove that gradient checks catch faults.
    pub fn with_fault(op: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(op),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        check_shape("constant", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::ElementCount {
                op: "constant",
                from: data.len(),
                to: numel(&shape),
            });
        }
        Ok(self.push_leaf(shape, data, false))
    }

    /// Records a leaf that receives a gradient.
    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: OpKind::Leaf,
            shape,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn op(&self, v: Var) -> OpKind {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shapes are valid")
    }

    /// Appends an operation node. The backward rule is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        op: OpKind,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{op:?} output length");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// The tape is left intact, so calling this twice returns the same
    /// gradients; accumulating both into a [`Tensor`] doubles its gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = &self.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value[..]).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let mut parent_grads = rule(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{:?} arity", node.op);
            if self.fault == Some(node.op) {
                let k = T::of(1.5);
                for g in parent_grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p].value.len(), "{:?} grad len", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Only leaves keep their gradients; intermediates were consumed above.
        Ok(Gradients { grads })
    }
}
