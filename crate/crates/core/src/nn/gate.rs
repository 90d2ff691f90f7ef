use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected [B, C, H, W], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

impl<T: Scalar> Graph<T> {
    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, plane) = nchw("mean_spatial", self.shape(x))?;
        let inv = T::one() / T::of(plane as f64);
        let value = self
            .value(x)
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(
            OpKind::MeanSpatial,
            vec![b, c],
            value,
            &[x],
            Box::new(move |ctx| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                        .collect(),
                )]
            }),
        ))
    }

    /// `x [B, C, H, W] * gate [B, C]`, the gate broadcast over space.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (b, c, plane) = nchw("scale_channels", self.shape(x))?;
        if self.shape(gate) != [b, c] {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(gate)));
        }
        let gv = self.value(gate);
        let value = self
            .value(x)
            .chunks_exact(plane)
            .zip(gv)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            OpKind::ScaleChannels,
            shape,
            value,
            &[x, gate],
            Box::new(move |ctx| {
                let (xv, gv, g) = (ctx.input(0), ctx.input(1), ctx.grad);
                let gx = ctx.needs(0).then(|| {
                    g.chunks_exact(plane)
                        .zip(gv)
                        .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
                        .collect()
                });
                let gg = ctx.needs(1).then(|| {
                    g.chunks_exact(plane)
                        .zip(xv.chunks_exact(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect()
                });
                vec![gx, gg]
            }),
        ))
    }

    /// `x [B, C, H, W] * map [B, 1, H, W]`, the map broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, map: Var) -> Result<Var> {
        let (b, c, plane) = nchw("scale_spatial", self.shape(x))?;
        let sx = self.shape(x);
        if self.shape(map) != [b, 1, sx[2], sx[3]] {
            return Err(Error::shape("scale_spatial", sx, self.shape(map)));
        }
        let (xv, mv) = (self.value(x), self.value(map));
        let mut value = vec![T::zero(); xv.len()];
        for bi in 0..b {
            let m = &mv[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for k in 0..plane {
                    value[off + k] = xv[off + k] * m[k];
                }
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(
            OpKind::ScaleSpatial,
            shape,
            value,
            &[x, map],
            Box::new(move |ctx| {
                let (xv, mv, g) = (ctx.input(0), ctx.input(1), ctx.grad);
                let mut gx = ctx.needs(0).then(|| vec![T::zero(); xv.len()]);
                let mut gm = ctx.needs(1).then(|| vec![T::zero(); mv.len()]);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for k in 0..plane {
                            if let Some(gx) = gx.as_mut() {
                                gx[off + k] = g[off + k] * mv[bi * plane + k];
                            }
                            if let Some(gm) = gm.as_mut() {
                                gm[bi * plane + k] += g[off + k] * xv[off + k];
                            }
                        }
                    }
                }
                vec![gx, gm]
            }),
        ))
    }
}
