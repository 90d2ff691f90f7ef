//! Deformable convolution: every kernel tap samples the input at its regular
//! grid position plus a learned per-location `(dy, dx)` displacement, using
//! bilinear interpolation with zero padding outside the map.

use super::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::{gemm, MatRef, Scalar};

/// The four bilinear corners of a fractional position: `(flat index, weight,
/// d weight / dy, d weight / dx)`, only for corners inside the map.
pub(crate) fn bilinear_taps<T: Scalar>(y: T, x: T, h: usize, w: usize) -> impl Iterator<Item = (usize, T, T, T)> {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let one = T::one();
    let y0 = y0f.to_i64().unwrap_or(i64::MIN / 2);
    let x0 = x0f.to_i64().unwrap_or(i64::MIN / 2);
    let corners = [
        (y0, x0, (one - ly) * (one - lx), -(one - lx), -(one - ly)),
        (y0, x0 + 1, (one - ly) * lx, -lx, one - ly),
        (y0 + 1, x0, ly * (one - lx), one - lx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    corners
        .into_iter()
        .filter(move |&(cy, cx, ..)| cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w)
        .map(move |(cy, cx, wt, dwy, dwx)| (cy as usize * w + cx as usize, wt, dwy, dwx))
}

/// Bilinear sample of one plane at `(y, x)`; zero outside.
pub fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    bilinear_taps(y, x, h, w).map(|(i, wt, _, _)| plane[i] * wt).sum()
}

#[derive(Clone, Copy)]
struct DeformDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geo: ConvGeometry,
}

impl DeformDims {
    /// Sampling position of tap `(i, j)` for output `(oy, ox)` given its offset.
    fn position<T: Scalar>(&self, off: &[T], oy: usize, ox: usize, i: usize, j: usize) -> (T, T) {
        let plane = self.oh * self.ow;
        let tap = i * self.kw + j;
        let p = oy * self.ow + ox;
        let dy = off[(2 * tap) * plane + p];
        let dx = off[(2 * tap + 1) * plane + p];
        let base_y = (oy * self.geo.stride) as f64 - self.geo.padding as f64 + (i * self.geo.dilation) as f64;
        let base_x = (ox * self.geo.stride) as f64 - self.geo.padding as f64 + (j * self.geo.dilation) as f64;
        (T::of(base_y) + dy, T::of(base_x) + dx)
    }

    fn sample_cols<T: Scalar>(&self, x: &[T], off: &[T], cols: &mut [T]) {
        let plane = self.oh * self.ow;
        for c in 0..self.cin {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * plane..][..plane];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            let (y, xx) = self.position(off, oy, ox, i, j);
                            row[oy * self.ow + ox] = bilinear_sample(xc, self.h, self.w, y, xx);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Deformable convolution of `x [B, Cin, H, W]` with `weight [Cout, Cin, kh, kw]`.
    ///
    /// `offsets [B, 2*kh*kw, OH, OW]` hold `(dy, dx)` pairs per tap, tap-major.
    /// Gradients flow to the input, the weight, the bias and the offsets.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    ) -> Result<Var> {
        let (sx, sw, so) = (
            self.shape(x).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(offsets).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || so.len() != 4 || sw[1] != sx[1] || geo.groups != 1 {
            return Err(Error::shape("deformable_conv2d", &sx, &sw));
        }
        let (kh, kw) = (sw[2], sw[3]);
        let d = DeformDims {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh,
            kw,
            oh: geo.output_size(sx[2], kh)?,
            ow: geo.output_size(sx[3], kw)?,
            geo,
        };
        if so[1] != 2 * kh * kw {
            return Err(Error::invalid(
                "deformable_conv2d",
                format!(
                    "offset field has {} channels, expected {} for a {kh}x{kw} kernel",
                    so[1],
                    2 * kh * kw
                ),
            ));
        }
        if so[0] != d.batch || so[2] != d.oh || so[3] != d.ow {
            return Err(Error::shape(
                "deformable_conv2d",
                &[d.batch, 2 * kh * kw, d.oh, d.ow],
                &so,
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape("deformable_conv2d", &sw, self.shape(b)));
            }
        }
        let plane = d.oh * d.ow;
        let krows = d.cin * kh * kw;
        let (xv, ov, wv) = (self.value(x), self.value(offsets), self.value(weight));
        let mut value = vec![T::zero(); d.batch * d.cout * plane];
        let mut cols = vec![T::zero(); krows * plane];
        let off_len = 2 * kh * kw * plane;
        for b in 0..d.batch {
            d.sample_cols(
                &xv[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w],
                &ov[b * off_len..(b + 1) * off_len],
                &mut cols,
            );
            gemm(
                MatRef::new(wv, d.cout, krows),
                MatRef::new(&cols, krows, plane),
                &mut value[b * d.cout * plane..(b + 1) * d.cout * plane],
                false,
            );
        }
        if let Some(bv) = bias.map(|b| self.value(b)) {
            for (c, chunk) in value.chunks_exact_mut(plane).enumerate() {
                let bc = bv[c % d.cout];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let mut parents = vec![x, offsets, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            OpKind::DeformConv2d,
            vec![d.batch, d.cout, d.oh, d.ow],
            value,
            &parents,
            Box::new(move |ctx| {
                let (xv, ov, wv, gv) = (ctx.input(0), ctx.input(1), ctx.input(2), ctx.grad);
                let mut gx = ctx.needs(0).then(|| vec![T::zero(); xv.len()]);
                let mut goff = ctx.needs(1).then(|| vec![T::zero(); ov.len()]);
                let mut gw = ctx.needs(2).then(|| vec![T::zero(); wv.len()]);
                let mut cols = vec![T::zero(); krows * plane];
                let mut gcols = vec![T::zero(); krows * plane];
                for b in 0..d.batch {
                    let xb = &xv[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
                    let ob = &ov[b * off_len..(b + 1) * off_len];
                    let go = &gv[b * d.cout * plane..(b + 1) * d.cout * plane];
                    if let Some(gw) = gw.as_mut() {
                        d.sample_cols(xb, ob, &mut cols);
                        gemm(
                            MatRef::new(go, d.cout, plane),
                            MatRef::transposed(&cols, plane, krows),
                            gw,
                            true,
                        );
                    }
                    if gx.is_none() && goff.is_none() {
                        continue;
                    }
                    gemm(
                        MatRef::transposed(wv, krows, d.cout),
                        MatRef::new(go, d.cout, plane),
                        &mut gcols,
                        false,
                    );
                    for c in 0..d.cin {
                        let xc = &xb[c * d.h * d.w..(c + 1) * d.h * d.w];
                        for i in 0..kh {
                            for j in 0..kw {
                                let tap = i * kw + j;
                                let row = &gcols[((c * kh + i) * kw + j) * plane..][..plane];
                                for oy in 0..d.oh {
                                    for ox in 0..d.ow {
                                        let p = oy * d.ow + ox;
                                        let gcol = row[p];
                                        let (y, xx) = d.position(ob, oy, ox, i, j);
                                        let mut dy = T::zero();
                                        let mut dx = T::zero();
                                        for (idx, wt, dwy, dwx) in bilinear_taps(y, xx, d.h, d.w) {
                                            if let Some(gx) = gx.as_mut() {
                                                gx[(b * d.cin + c) * d.h * d.w + idx] += gcol * wt;
                                            }
                                            dy += dwy * xc[idx];
                                            dx += dwx * xc[idx];
                                        }
                                        if let Some(goff) = goff.as_mut() {
                                            goff[b * off_len + (2 * tap) * plane + p] += gcol * dy;
                                            goff[b * off_len + (2 * tap + 1) * plane + p] += gcol * dx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut out = vec![gx, goff, gw];
                if has_bias {
                    out.push(ctx.needs(3).then(|| {
                        let mut gb = vec![T::zero(); d.cout];
                        for (c, chunk) in gv.chunks_exact(plane).enumerate() {
                            gb[c % d.cout] += chunk.iter().copied().sum::<T>();
                        }
                        gb
                    }));
                }
                out
            }),
        ))
    }
}
