use std::sync::Arc;

use super::{split_axis, strides};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, numel};

/// Row index meaning "produce zeros" in [`Graph::gather_rows`].
pub const PAD_ROW: u32 = u32::MAX;

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        let n = self.value(a).len();
        if numel(shape) != n {
            return Err(Error::ElementCount {
                op: "reshape",
                from: n,
                to: numel(shape),
            });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(
            OpKind::Reshape,
            shape.to_vec(),
            value,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = Arc::new(permute_map(&shape, perm));
        let src = self.value(a);
        let value = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            OpKind::Permute,
            out_shape,
            value,
            &[a],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); ctx.grad.len()];
                for (o, &i) in map.iter().enumerate() {
                    g[i] = ctx.grad[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = widths.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p);
                value.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        Ok(self.push(
            OpKind::Concat,
            out_shape,
            value,
            parts,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&ctx.grad[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            OpKind::Slice,
            out_shape,
            value,
            &[a],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Row gather: views `a` as `[rows, row_len]` and emits `out_shape` whose
    /// row `i` is input row `index[i]`, or zeros when `index[i] == PAD_ROW`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, a: Var, row_len: usize, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var> {
        check_shape("gather_rows", out_shape)?;
        let n_in = self.value(a).len();
        if row_len == 0 || !n_in.is_multiple_of(row_len) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row length {row_len} does not divide {n_in}"),
            ));
        }
        if numel(out_shape) != index.len() * row_len {
            return Err(Error::ElementCount {
                op: "gather_rows",
                from: index.len() * row_len,
                to: numel(out_shape),
            });
        }
        let rows_in = n_in / row_len;
        if let Some(&bad) = index.iter().find(|&&i| i != PAD_ROW && i as usize >= rows_in) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range {rows_in}"),
            ));
        }
        let src = self.value(a);
        let mut value = vec![T::zero(); index.len() * row_len];
        for (dst, &i) in value.chunks_exact_mut(row_len).zip(index.iter()) {
            if i != PAD_ROW {
                let i = i as usize;
                dst.copy_from_slice(&src[i * row_len..(i + 1) * row_len]);
            }
        }
        Ok(self.push(
            OpKind::GatherRows,
            out_shape.to_vec(),
            value,
            &[a],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n_in];
                for (src, &i) in ctx.grad.chunks_exact(row_len).zip(index.iter()) {
                    if i != PAD_ROW {
                        let i = i as usize;
                        for (d, &s) in g[i * row_len..(i + 1) * row_len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// For each output position of `permute(shape, perm)`, the flat input index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_shape_arithmetic() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = g.constant(vec![2, 5], vec![2.0; 10]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
        assert_eq!(&g.value(c)[..8], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let bad = g.constant(vec![3, 5], vec![0.0; 15]).unwrap();
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn reshape_round_trip() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let a = g.constant(vec![2, 3, 4], data.clone()).unwrap();
        let b = g.reshape(a, &[6, 4]).unwrap();
        let c = g.reshape(b, &[2, 3, 4]).unwrap();
        assert_eq!(g.value(c), &data[..]);
        assert!(matches!(g.reshape(a, &[5, 5]), Err(Error::ElementCount { .. })));
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(g.value(p)[(k * 2 + i) * 3 + j], (i * 12 + j * 4 + k) as f32);
                }
            }
        }
        assert!(g.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn slice_picks_range() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2, 4], (0..8).map(|v| v as f32).collect()).unwrap();
        let s = g.slice(a, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), &[1.0, 2.0, 5.0, 6.0]);
        assert!(g.slice(a, 1, 3, 2).is_err());
    }
}
