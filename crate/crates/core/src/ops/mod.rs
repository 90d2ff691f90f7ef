//! Differentiable tensor primitives recorded on a [`Graph`](crate::graph::Graph).

mod elementwise;
mod index;
mod linalg;
mod norm;

pub(crate) use elementwise::sigmoid;
pub use index::PAD_ROW;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
