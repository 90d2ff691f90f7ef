use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;

/// Source taps for one output coordinate under align-corners-false
/// bilinear resampling: `(lo, hi, weight of hi)`.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected [B, C, H, W], got {shape:?}")));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

impl<T: Scalar> Graph<T> {
    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = nchw("upsample_nearest2x", &shape)?;
        let src = self.value(x);
        let mut value = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for oy in 0..2 * h {
                let row = &src[(p * h + oy / 2) * w..][..w];
                for ox in 0..2 * w {
                    value.push(row[ox / 2]);
                }
            }
        }
        Ok(self.push(
            OpKind::UpsampleNearest,
            vec![shape[0], shape[1], 2 * h, 2 * w],
            value,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            g[(p * h + oy / 2) * w + ox / 2] += ctx.grad[(p * 2 * h + oy) * 2 * w + ox];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Bilinear resize of `[B, C, H, W]` to `out_h x out_w`, align-corners false.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "target size must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = nchw("bilinear_resize", &shape)?;
        let ty = axis_taps(h, out_h);
        let tx = axis_taps(w, out_w);
        let src = self.value(x);
        let mut value = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::of(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::of(lx);
                    let top = sp[y0 * w + x0] * (T::one() - lx) + sp[y0 * w + x1] * lx;
                    let bot = sp[y1 * w + x0] * (T::one() - lx) + sp[y1 * w + x1] * lx;
                    value[(p * out_h + oy) * out_w + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        Ok(self.push(
            OpKind::BilinearResize,
            vec![shape[0], shape[1], out_h, out_w],
            value,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let gp = &mut g[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::of(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::of(lx);
                            let go = ctx.grad[(p * out_h + oy) * out_w + ox];
                            let top = go * (T::one() - ly);
                            let bot = go * ly;
                            gp[y0 * w + x0] += top * (T::one() - lx);
                            gp[y0 * w + x1] += top * lx;
                            gp[y1 * w + x0] += bot * (T::one() - lx);
                            gp[y1 * w + x1] += bot * lx;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_doubles_pixels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.upsample_nearest2x(x).unwrap();
        #[rustfmt::skip]
        let expect = [1.0, 1.0, 2.0, 2.0,
                      1.0, 1.0, 2.0, 2.0,
                      3.0, 3.0, 4.0, 4.0,
                      3.0, 3.0, 4.0, 4.0];
        assert_eq!(g.value(y), &expect);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.7).collect();
        let x = g.constant(vec![1, 1, 3, 4], data.clone()).unwrap();
        let y = g.bilinear_resize(x, 3, 4).unwrap();
        assert_eq!(g.value(y), &data[..]);
        assert!(g.bilinear_resize(x, 0, 4).is_err());
    }

    #[test]
    fn ramp_stays_ramp() {
        let mut g = Graph::<f64>::new();
        let (h, w) = (4, 6);
        let data: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 * 2.0 + (i / w) as f64).collect();
        let x = g.constant(vec![1, 1, h, w], data).unwrap();
        let y = g.bilinear_resize(x, 2 * h, 2 * w).unwrap();
        let v = g.value(y);
        // Interior outputs map back to x_src = (o + 0.5) / 2 - 0.5.
        for oy in 1..2 * h - 1 {
            for ox in 1..2 * w - 1 {
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let expect = 2.0 * sx + sy;
                assert!((v[oy * 2 * w + ox] - expect).abs() < 1e-6);
            }
        }
    }
}
