use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::{gemm, MatRef, Scalar};

impl<T: Scalar> Graph<T> {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false)
    }

    /// Batched product with the second operand transposed:
    /// `[.., m, k] x [.., n, k]^T -> [.., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, true)
    }

    fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if trans_b {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out_shape = sa[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let am = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
            let bs = &bv[i * k * n..(i + 1) * k * n];
            let bm = if trans_b {
                MatRef::transposed(bs, k, n)
            } else {
                MatRef::new(bs, k, n)
            };
            gemm(am, bm, &mut value[i * m * n..(i + 1) * m * n], false);
        }
        Ok(self.push(
            OpKind::Matmul,
            out_shape,
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (av, bv, gv) = (ctx.input(0), ctx.input(1), ctx.grad);
                let ga = ctx.needs(0).then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let g = MatRef::new(&gv[i * m * n..(i + 1) * m * n], m, n);
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC * B^T (or dC * B when B was used transposed)
                        let bt = if trans_b {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::transposed(bs, n, k)
                        };
                        gemm(g, bt, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                    ga
                });
                let gb = ctx.needs(1).then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let am = &av[i * m * k..(i + 1) * m * k];
                        let g = &gv[i * m * n..(i + 1) * m * n];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB (n x k) = dC^T * A
                            gemm(MatRef::transposed(g, n, m), MatRef::new(am, m, k), dst, false);
                        } else {
                            // dB (k x n) = A^T * dC
                            gemm(MatRef::transposed(am, k, m), MatRef::new(g, m, n), dst, false);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the last axis: `x [.., in] -> x W^T + b`, with
    /// `W [out, in]` and optional `b [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let in_dim = *sx.last().expect("shapes are non-empty");
        if sw.len() != 2 || sw[1] != in_dim {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let out_dim = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_dim;
        let mut value = vec![T::zero(); rows * out_dim];
        gemm(
            MatRef::new(self.value(x), rows, in_dim),
            MatRef::transposed(self.value(weight), in_dim, out_dim),
            &mut value,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in value.chunks_exact_mut(out_dim) {
                row.iter_mut().zip(bv).for_each(|(v, &c)| *v += c);
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().expect("non-empty") = out_dim;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            OpKind::Linear,
            out_shape,
            value,
            &parents,
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.input(0), ctx.input(1), ctx.grad);
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![T::zero(); rows * in_dim];
                    gemm(
                        MatRef::new(g, rows, out_dim),
                        MatRef::new(wv, out_dim, in_dim),
                        &mut gx,
                        false,
                    );
                    gx
                });
                let gw = ctx.needs(1).then(|| {
                    let mut gw = vec![T::zero(); out_dim * in_dim];
                    gemm(
                        MatRef::transposed(g, out_dim, rows),
                        MatRef::new(xv, rows, in_dim),
                        &mut gw,
                        false,
                    );
                    gw
                });
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(ctx.needs(2).then(|| {
                        let mut gb = vec![T::zero(); out_dim];
                        for row in g.chunks_exact(out_dim) {
                            gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                        }
                        gb
                    }));
                }
                out
            }),
        ))
    }

    /// Adds a learned bias `[heads, n, n]` to attention scores
    /// `[groups, heads, n, n]`, plus an optional constant mask `[windows, n, n]`
    /// applied to group `g` as `mask[g % windows]`.
    pub fn attention_bias(&mut self, scores: Var, bias: Var, mask: Option<Arc<Vec<T>>>) -> Result<Var> {
        let ss = self.shape(scores).to_vec();
        let sb = self.shape(bias).to_vec();
        if ss.len() != 4 || sb.len() != 3 || ss[1..] != sb[..] || ss[2] != ss[3] {
            return Err(Error::shape("attention_bias", &ss, &sb));
        }
        let (groups, heads, n) = (ss[0], ss[1], ss[2]);
        let nn = n * n;
        let windows = match &mask {
            Some(m) => {
                if m.len() % nn != 0 || m.is_empty() || groups % (m.len() / nn) != 0 {
                    return Err(Error::invalid(
                        "attention_bias",
                        format!("mask of {} values does not tile {groups} groups of {n}x{n}", m.len()),
                    ));
                }
                m.len() / nn
            }
            None => 1,
        };
        let sv = self.value(scores);
        let bv = self.value(bias);
        let mut value = sv.to_vec();
        for g in 0..groups {
            for h in 0..heads {
                let dst = &mut value[(g * heads + h) * nn..(g * heads + h + 1) * nn];
                dst.iter_mut()
                    .zip(&bv[h * nn..(h + 1) * nn])
                    .for_each(|(v, &b)| *v += b);
                if let Some(m) = &mask {
                    let w = g % windows;
                    dst.iter_mut().zip(&m[w * nn..(w + 1) * nn]).for_each(|(v, &b)| *v += b);
                }
            }
        }
        Ok(self.push(
            OpKind::AttentionBias,
            ss,
            value,
            &[scores, bias],
            Box::new(move |ctx| {
                let gs = ctx.needs(0).then(|| ctx.grad.to_vec());
                let gb = ctx.needs(1).then(|| {
                    let mut gb = vec![T::zero(); heads * nn];
                    for chunk in ctx.grad.chunks_exact(heads * nn) {
                        gb.iter_mut().zip(chunk).for_each(|(b, &v)| *b += v);
                    }
                    gb
                });
                vec![gs, gb]
            }),
        ))
    }
}
