use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which statistics batch normalisation uses.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, the quantity tracked by running statistics.
    pub var_unbiased: Vec<T>,
}

/// Exponential moving average: `running = (1 - m) * running + m * batch`.
pub fn ema_update<T: Scalar>(running: &mut [T], batch: &[T], momentum: f64) {
    let m = T::of(momentum);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}

impl<T: Scalar> Graph<T> {
    /// Batch normalisation over channel axis 1 of `[B, C, ...]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected [B, C, ...], got {shape:?}"),
            ));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let n = batch * plane;
        let xv = self.value(x);
        let at = move |b: usize, c: usize| (b * ch + c) * plane;
        let eps_t = T::of(eps);
        let (mean, var, moments) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += xv[at(b, c)..at(b, c) + plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::of(n as f64);
                    let mut q = T::zero();
                    for b in 0..batch {
                        q += xv[at(b, c)..at(b, c) + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                    mean[c] = m;
                    var[c] = q / T::of(n as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| if n > 1 { v * T::of(n as f64 / (n - 1) as f64) } else { v })
                    .collect();
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(moments))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape("batch_norm", &[ch], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let training = moments.is_some();
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut value = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                for k in at(b, c)..at(b, c) + plane {
                    let h = (xv[k] - mean[c]) * rstd[c];
                    xhat[k] = h;
                    value[k] = h * gv[c] + bv[c];
                }
            }
        }
        let var_out = self.push(
            OpKind::BatchNorm,
            shape,
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (gamma, g) = (ctx.input(1), ctx.grad);
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        for k in at(b, c)..at(b, c) + plane {
                            sum_g[c] += g[k];
                            sum_gx[c] += g[k] * xhat[k];
                        }
                    }
                }
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    let inv_n = T::one() / T::of(n as f64);
                    for b in 0..batch {
                        for c in 0..ch {
                            let k0 = gamma[c] * rstd[c];
                            for k in at(b, c)..at(b, c) + plane {
                                gx[k] = if training {
                                    k0 * (g[k] - inv_n * sum_g[c] - xhat[k] * inv_n * sum_gx[c])
                                } else {
                                    k0 * g[k]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![gx, ctx.needs(1).then_some(sum_gx), ctx.needs(2).then_some(sum_g)]
            }),
        );
        Ok((var_out, moments))
    }
}

/// Self-contained batch-norm layer state: affine parameters plus running
/// statistics, which only move in training mode.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub training: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], T::one()).with_grad(true),
            beta: Tensor::zeros(vec![channels]).with_grad(true),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            training: true,
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.leaf(&self.gamma);
        let beta = g.leaf(&self.beta);
        let mode = if self.training {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: &self.running_mean,
                var: &self.running_var,
            }
        };
        let (y, moments) = g.batch_norm(x, gamma, beta, mode, self.eps)?;
        if let Some(m) = moments {
            ema_update(&mut self.running_mean, &m.mean, self.momentum);
            ema_update(&mut self.running_var, &m.var_unbiased, self.momentum);
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_centred() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..32).map(|v| ((v * 37) % 11) as f64 * 0.3).collect();
        let x = g.constant(vec![2, 2, 2, 4], data).unwrap();
        let mut bn = BatchNormState::<f64>::new(2);
        let y = bn.forward(&mut g, x).unwrap();
        let v = g.value(y);
        for c in 0..2 {
            let s: f64 = (0..2)
                .flat_map(|b| v[(b * 2 + c) * 8..(b * 2 + c + 1) * 8].iter())
                .sum();
            assert!((s / 16.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_with_unit_stats_is_affine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut bn = BatchNormState::<f32>::new(1);
        bn.training = false;
        bn.gamma = Tensor::new(vec![1], vec![2.0]).unwrap();
        bn.beta = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = bn.forward(&mut g, x).unwrap();
        let s = 1.0 / (1.0f32 + 1e-5).sqrt();
        for (o, i) in g.value(y).iter().zip([1.0f32, -2.0, 0.5]) {
            assert!((o - (2.0 * i * s + 0.5)).abs() < 1e-6);
        }
        assert_eq!(bn.running_mean, vec![0.0]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 3, 2, 2], vec![0.0; 12]).unwrap();
        let mut bn = BatchNormState::<f32>::new(2);
        assert!(bn.forward(&mut g, x).is_err());
    }
}
