use super::split_axis;
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    value[at(j)] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for j in 0..n {
                    value[at(j)] *= inv;
                }
            }
        }
        Ok(self.push(
            OpKind::Softmax,
            shape,
            value,
            &[a],
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    /// `eps` is added to the variance inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut value = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                value[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            OpKind::LayerNorm,
            shape,
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (gamma, g) = (ctx.input(1), ctx.grad);
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gh: Vec<T> = (0..d).map(|j| g[r * d + j] * gamma[j]).collect();
                        let sum_gh: T = gh.iter().copied().sum();
                        let sum_ghx: T = (0..d).map(|j| gh[j] * xhat[r * d + j]).sum();
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gh[j] - inv_d * sum_gh - xhat[r * d + j] * inv_d * sum_ghx);
                        }
                    }
                    gx
                });
                let gg = ctx.needs(1).then(|| {
                    let mut gg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gg
                });
                let gb = ctx.needs(2).then(|| {
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                    }
                    gb
                });
                vec![gx, gg, gb]
            }),
        ))
    }
}
