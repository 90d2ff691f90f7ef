use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::ops::sigmoid;
use crate::scalar::Scalar;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Validated logits/labels pairing: `logits [B, K, H, W]`, `labels [B, H, W]`.
struct Targets {
    batch: usize,
    classes: usize,
    plane: usize,
    labels: Arc<Vec<u8>>,
}

impl Targets {
    fn new(op: &'static str, shape: &[usize], labels: &[u8]) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::invalid(
                op,
                format!("logits must be [B, K, H, W], got {shape:?}"),
            ));
        }
        let (batch, classes, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if labels.len() != batch * plane {
            return Err(Error::invalid(
                op,
                format!("{} labels for logits {shape:?}", labels.len()),
            ));
        }
        // A single channel is a binary problem with labels {0, 1}.
        let limit = classes.max(2);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= limit) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes: limit,
            });
        }
        Ok(Self {
            batch,
            classes,
            plane,
            labels: Arc::new(labels.to_vec()),
        })
    }

    /// Target of channel `k` at pixel `p` of sample `b`.
    fn target<T: Scalar>(&self, b: usize, k: usize, p: usize) -> T {
        let l = self.labels[b * self.plane + p] as usize;
        let hit = if self.classes == 1 { l == 1 } else { l == k };
        if hit {
            T::one()
        } else {
            T::zero()
        }
    }

    /// Channels scored by the Dice term: every foreground class.
    fn dice_channels(&self) -> std::ops::Range<usize> {
        if self.classes == 1 {
            0..1
        } else {
            1..self.classes
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Mean binary cross-entropy of every channel against its one-vs-all
    /// target, in the overflow-free form `max(z, 0) - z t + ln(1 + e^-|z|)`.
    pub fn bce_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let tg = Targets::new("bce_loss", self.shape(logits), labels)?;
        let (k, plane) = (tg.classes, tg.plane);
        let n = T::of((tg.batch * k * plane) as f64);
        let z = self.value(logits);
        let mut total = T::zero();
        for b in 0..tg.batch {
            for c in 0..k {
                let row = &z[(b * k + c) * plane..(b * k + c + 1) * plane];
                for (p, &v) in row.iter().enumerate() {
                    let t: T = tg.target(b, c, p);
                    total += v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p();
                }
            }
        }
        Ok(self.push(
            OpKind::BceLoss,
            vec![1],
            vec![total / n],
            &[logits],
            Box::new(move |ctx| {
                let z = ctx.input(0);
                let scale = ctx.grad[0] / n;
                let mut g = vec![T::zero(); z.len()];
                for b in 0..tg.batch {
                    for c in 0..k {
                        let base = (b * k + c) * plane;
                        for p in 0..plane {
                            let t: T = tg.target(b, c, p);
                            g[base + p] = (sigmoid(z[base + p]) - t) * scale;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` with
    /// `p = sigmoid(z)`, sums over the whole batch, averaged over foreground classes.
    pub fn dice_loss(&mut self, logits: Var, labels: &[u8], eps: f64) -> Result<Var> {
        let tg = Targets::new("dice_loss", self.shape(logits), labels)?;
        let (k, plane) = (tg.classes, tg.plane);
        let channels = tg.dice_channels();
        let nc = T::of(channels.len() as f64);
        let eps = T::of(eps);
        let z = self.value(logits);
        // Per scored channel: (intersection, prediction mass, target mass).
        let mut sums = Vec::with_capacity(channels.len());
        for c in channels.clone() {
            let (mut i, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
            for b in 0..tg.batch {
                let base = (b * k + c) * plane;
                for p in 0..plane {
                    let prob = sigmoid(z[base + p]);
                    let t: T = tg.target(b, c, p);
                    i += prob * t;
                    ps += prob;
                    ts += t;
                }
            }
            sums.push((i, ps, ts));
        }
        let two = T::of(2.0);
        let loss = sums
            .iter()
            .map(|&(i, ps, ts)| T::one() - (two * i + eps) / (ps + ts + eps))
            .sum::<T>()
            / nc;
        Ok(self.push(
            OpKind::DiceLoss,
            vec![1],
            vec![loss],
            &[logits],
            Box::new(move |ctx| {
                let z = ctx.input(0);
                let mut g = vec![T::zero(); z.len()];
                for (c, &(i, ps, ts)) in channels.clone().zip(&sums) {
                    let den = ps + ts + eps;
                    let num = two * i + eps;
                    for b in 0..tg.batch {
                        let base = (b * k + c) * plane;
                        for p in 0..plane {
                            let t: T = tg.target(b, c, p);
                            let prob = sigmoid(z[base + p]);
                            let d_prob = -(two * t * den - num) / (den * den);
                            g[base + p] = ctx.grad[0] * d_prob * prob * (T::one() - prob) / nc;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Unweighted sum of [`bce_loss`](Self::bce_loss) and [`dice_loss`](Self::dice_loss).
    pub fn bce_dice_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let bce = self.bce_loss(logits, labels)?;
        let dice = self.dice_loss(logits, labels, DICE_EPS)?;
        self.add(bce, dice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(g: &mut Graph<f64>, k: usize, h: usize, w: usize, data: Vec<f64>) -> Var {
        g.variable(vec![1, k, h, w], data).unwrap()
    }

    #[test]
    fn zero_logits_give_ln2() {
        let mut g = Graph::new();
        let z = logits(&mut g, 3, 4, 4, vec![0.0; 48]);
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let l = g.bce_loss(z, &labels).unwrap();
        assert!((g.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_per_pixel_oracle() {
        let data: Vec<f64> = (0..32).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.7).collect();
        let labels: Vec<u8> = (0..16).map(|i| ((i * 5) % 2) as u8).collect();
        let mut g = Graph::new();
        let z = logits(&mut g, 2, 4, 4, data.clone());
        let l = g.bce_loss(z, &labels).unwrap();
        let mut want = 0.0;
        for c in 0..2 {
            for p in 0..16 {
                let t = if labels[p] as usize == c { 1.0 } else { 0.0 };
                let s = 1.0 / (1.0 + (-data[c * 16 + p]).exp());
                want -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
            }
        }
        assert!((g.value(l)[0] - want / 32.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_prediction_has_tiny_loss() {
        let labels: Vec<u8> = vec![0, 1, 1, 0, 2, 2, 0, 1, 0];
        let data: Vec<f64> = (0..3)
            .flat_map(|c| labels.iter().map(move |&l| if l as usize == c { 20.0 } else { -20.0 }))
            .collect();
        let mut g = Graph::new();
        let z = logits(&mut g, 3, 3, 3, data);
        let l = g.bce_dice_loss(z, &labels).unwrap();
        assert!(g.value(l)[0] < 1e-6);
    }

    #[test]
    fn empty_target_with_low_prediction_is_rescued_by_eps() {
        let mut g = Graph::new();
        let z = logits(&mut g, 1, 3, 3, vec![-20.0; 9]);
        let l = g.dice_loss(z, &[0; 9], DICE_EPS).unwrap();
        assert!(g.value(l)[0] < 1e-6);
    }

    #[test]
    fn dice_matches_hand_arithmetic() {
        // p = t = 1 on 4 of 9 pixels, p = 0.5 elsewhere via zero logits.
        let labels: Vec<u8> = vec![1, 1, 0, 1, 1, 0, 0, 0, 0];
        let data: Vec<f64> = labels.iter().map(|&l| if l == 1 { 40.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let z = logits(&mut g, 1, 3, 3, data);
        let l = g.dice_loss(z, &labels, 1.0).unwrap();
        let want = 1.0 - (2.0 * 4.0 + 1.0) / ((4.0 + 5.0 * 0.5) + 4.0 + 1.0);
        assert!((g.value(l)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = Graph::new();
        let z = logits(&mut g, 2, 2, 2, vec![0.0; 8]);
        let err = g.bce_loss(z, &[0, 1, 2, 0]).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 2,
                num_classes: 2
            }
        ));
    }
}
