use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::{gemm, MatRef, Scalar};

/// Geometry of a 2-D convolution: stride, zero padding, dilation and groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride-1 geometry that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// `(k - 1) * dilation + 1`
    pub fn extent(&self, kernel: usize) -> usize {
        (kernel - 1) * self.dilation + 1
    }

    /// Output size along one axis; the window must tile the padded input exactly.
    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        let span = input + 2 * self.padding;
        let ext = self.extent(kernel);
        if span < ext || !(span - ext).is_multiple_of(self.stride) {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "input {input} with padding {} does not give an integer output size for extent {ext} stride {}",
                    self.padding, self.stride
                ),
            ));
        }
        Ok((span - ext) / self.stride + 1)
    }
}

/// Spatial bookkeeping shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    fn resolve(op: &'static str, x: &[usize], weight: &[usize], geo: ConvGeometry) -> Result<Self> {
        if x.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(op, x, weight));
        }
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cpg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if geo.groups == 0 || cin % geo.groups != 0 || cout % geo.groups != 0 || cpg * geo.groups != cin {
            return Err(Error::shape(op, x, weight));
        }
        let oh = geo.output_size(h, kh)?;
        let ow = geo.output_size(w, kw)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            geo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geo.stride == 1 && self.geo.padding == 0
    }

    fn src(&self, o: usize, k: usize) -> isize {
        (o * self.geo.stride) as isize - self.geo.padding as isize + (k * self.geo.dilation) as isize
    }
}

/// Unfolds `channels` planes of `x` into `[channels * kh * kw, oh * ow]`.
fn im2col<T: Scalar>(x: &[T], channels: usize, d: &ConvDims, cols: &mut [T]) {
    let plane = d.oh * d.ow;
    for c in 0..channels {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut cols[((c * d.kh + i) * d.kw + j) * plane..][..plane];
                for oy in 0..d.oh {
                    let iy = d.src(oy, i);
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = d.src(ox, j);
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
fn col2im<T: Scalar>(cols: &[T], channels: usize, d: &ConvDims, dx: &mut [T]) {
    let plane = d.oh * d.ow;
    for c in 0..channels {
        let xc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &cols[((c * d.kh + i) * d.kw + j) * plane..][..plane];
                for oy in 0..d.oh {
                    let iy = d.src(oy, i);
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = d.src(ox, j);
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let b = bias[c % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad<T: Scalar>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (c, chunk) in g.chunks_exact(plane).enumerate() {
        gb[c % channels] += chunk.iter().copied().sum::<T>();
    }
    gb
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation `x [B, Cin, H, W]` with `weight [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let d = ConvDims::resolve("conv2d", self.shape(x), self.shape(weight), geo)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape("conv2d", self.shape(weight), self.shape(b)));
            }
        }
        let groups = geo.groups;
        let (cg, og) = (d.cin / groups, d.cout / groups);
        let krows = cg * d.kh * d.kw;
        let plane = d.oh * d.ow;
        let (xv, wv) = (self.value(x), self.value(weight));
        let mut value = vec![T::zero(); d.batch * d.cout * plane];
        let mut cols = if d.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); krows * plane]
        };
        for b in 0..d.batch {
            for g in 0..groups {
                let xg = &xv[(b * d.cin + g * cg) * d.h * d.w..][..cg * d.h * d.w];
                let colref = if d.is_pointwise() {
                    xg
                } else {
                    im2col(xg, cg, &d, &mut cols);
                    &cols[..]
                };
                gemm(
                    MatRef::new(&wv[g * og * krows..(g + 1) * og * krows], og, krows),
                    MatRef::new(colref, krows, plane),
                    &mut value[(b * d.cout + g * og) * plane..][..og * plane],
                    false,
                );
            }
        }
        if let Some(bv) = bias.map(|b| self.value(b)) {
            add_channel_bias(&mut value, bv, plane);
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            OpKind::Conv2d,
            vec![d.batch, d.cout, d.oh, d.ow],
            value,
            &parents,
            Box::new(move |ctx| {
                let (xv, wv, gv) = (ctx.input(0), ctx.input(1), ctx.grad);
                let mut gx = ctx.needs(0).then(|| vec![T::zero(); xv.len()]);
                let mut gw = ctx.needs(1).then(|| vec![T::zero(); wv.len()]);
                let mut cols = vec![T::zero(); krows * plane];
                for b in 0..d.batch {
                    for g in 0..groups {
                        let go = &gv[(b * d.cout + g * og) * plane..][..og * plane];
                        let xg = &xv[(b * d.cin + g * cg) * d.h * d.w..][..cg * d.h * d.w];
                        if let Some(gw) = gw.as_mut() {
                            let colref = if d.is_pointwise() {
                                xg
                            } else {
                                im2col(xg, cg, &d, &mut cols);
                                &cols[..]
                            };
                            gemm(
                                MatRef::new(go, og, plane),
                                MatRef::transposed(colref, plane, krows),
                                &mut gw[g * og * krows..(g + 1) * og * krows],
                                true,
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wg = &wv[g * og * krows..(g + 1) * og * krows];
                            let dst = &mut gx[(b * d.cin + g * cg) * d.h * d.w..][..cg * d.h * d.w];
                            if d.is_pointwise() {
                                gemm(MatRef::transposed(wg, krows, og), MatRef::new(go, og, plane), dst, true);
                            } else {
                                gemm(
                                    MatRef::transposed(wg, krows, og),
                                    MatRef::new(go, og, plane),
                                    &mut cols,
                                    false,
                                );
                                col2im(&cols, cg, &d, dst);
                            }
                        }
                    }
                }
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(ctx.needs(2).then(|| channel_bias_grad(gv, d.cout, plane)));
                }
                out
            }),
        ))
    }

    /// Depth-wise convolution: `groups == Cin == Cout`, one `kh x kw` filter per channel.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let d = ConvDims::resolve("depthwise_conv2d", self.shape(x), self.shape(weight), geo)?;
        if geo.groups != d.cin || d.cout != d.cin {
            return Err(Error::invalid(
                "depthwise_conv2d",
                format!("groups {} must equal channels {} (out {})", geo.groups, d.cin, d.cout),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape("depthwise_conv2d", self.shape(weight), self.shape(b)));
            }
        }
        let plane = d.oh * d.ow;
        let (xv, wv) = (self.value(x), self.value(weight));
        let mut value = vec![T::zero(); d.batch * d.cout * plane];
        for b in 0..d.batch {
            for c in 0..d.cin {
                let xc = &xv[(b * d.cin + c) * d.h * d.w..][..d.h * d.w];
                let wc = &wv[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
                let out = &mut value[(b * d.cout + c) * plane..][..plane];
                depthwise_plane(xc, wc, &d, out);
            }
        }
        if let Some(bv) = bias.map(|b| self.value(b)) {
            add_channel_bias(&mut value, bv, plane);
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            OpKind::DepthwiseConv2d,
            vec![d.batch, d.cout, d.oh, d.ow],
            value,
            &parents,
            Box::new(move |ctx| {
                let (xv, wv, gv) = (ctx.input(0), ctx.input(1), ctx.grad);
                let mut gx = ctx.needs(0).then(|| vec![T::zero(); xv.len()]);
                let mut gw = ctx.needs(1).then(|| vec![T::zero(); wv.len()]);
                let kk = d.kh * d.kw;
                for b in 0..d.batch {
                    for c in 0..d.cin {
                        let xoff = (b * d.cin + c) * d.h * d.w;
                        let go = &gv[(b * d.cout + c) * plane..][..plane];
                        for i in 0..d.kh {
                            for j in 0..d.kw {
                                let wij = wv[c * kk + i * d.kw + j];
                                let mut acc = T::zero();
                                for oy in 0..d.oh {
                                    let iy = d.src(oy, i);
                                    if iy < 0 || iy >= d.h as isize {
                                        continue;
                                    }
                                    let row = xoff + iy as usize * d.w;
                                    for ox in 0..d.ow {
                                        let ix = d.src(ox, j);
                                        if ix < 0 || ix >= d.w as isize {
                                            continue;
                                        }
                                        let g = go[oy * d.ow + ox];
                                        acc += g * xv[row + ix as usize];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[row + ix as usize] += g * wij;
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[c * kk + i * d.kw + j] += acc;
                                }
                            }
                        }
                    }
                }
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(ctx.needs(2).then(|| channel_bias_grad(gv, d.cout, plane)));
                }
                out
            }),
        ))
    }
}

fn depthwise_plane<T: Scalar>(xc: &[T], wc: &[T], d: &ConvDims, out: &mut [T]) {
    for i in 0..d.kh {
        for j in 0..d.kw {
            let wij = wc[i * d.kw + j];
            for oy in 0..d.oh {
                let iy = d.src(oy, i);
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let src_row = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                let dst = &mut out[oy * d.ow..(oy + 1) * d.ow];
                for (ox, v) in dst.iter_mut().enumerate() {
                    let ix = d.src(ox, j);
                    if ix >= 0 && ix < d.w as isize {
                        *v += wij * src_row[ix as usize];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: (Vec<usize>, Vec<f64>), w: (Vec<usize>, Vec<f64>), geo: ConvGeometry) -> (Vec<usize>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.0, x.1).unwrap();
        let wv = g.constant(w.0, w.1).unwrap();
        let y = g.conv2d(xv, wv, None, geo).unwrap();
        (g.shape(y).to_vec(), g.value(y).to_vec())
    }

    #[test]
    fn pointwise_identity() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (s, y) = run(
            (vec![1, 1, 4, 4], data.clone()),
            (vec![1, 1, 1, 1], vec![1.0]),
            ConvGeometry::default(),
        );
        assert_eq!(s, vec![1, 1, 4, 4]);
        assert_eq!(y, data);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let (_, y) = run(
            (vec![1, 1, 4, 4], vec![1.0; 16]),
            (vec![1, 1, 3, 3], vec![1.0; 9]),
            ConvGeometry::same(3, 1),
        );
        #[rustfmt::skip]
        let expect = [4.0, 6.0, 6.0, 4.0,
                      6.0, 9.0, 9.0, 6.0,
                      6.0, 9.0, 9.0, 6.0,
                      4.0, 6.0, 6.0, 4.0];
        assert_eq!(y, expect);
    }

    #[test]
    fn non_integer_output_rejected() {
        let geo = ConvGeometry {
            stride: 2,
            ..ConvGeometry::default()
        };
        assert!(geo.output_size(5, 2).is_err());
        assert_eq!(geo.output_size(6, 2).unwrap(), 3);
    }

    #[test]
    fn depthwise_requires_groups_equal_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap();
        let w = g.constant(vec![2, 1, 3, 3], vec![0.0; 18]).unwrap();
        assert!(g.depthwise_conv2d(x, w, None, ConvGeometry::same(3, 1)).is_err());
        assert!(g
            .depthwise_conv2d(x, w, None, ConvGeometry::same(3, 1).with_groups(2))
            .is_ok());
    }

    #[test]
    fn depthwise_identity_kernels_pass_through() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..18).map(|v| v as f32).collect();
        let x = g.constant(vec![1, 2, 3, 3], data.clone()).unwrap();
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[13] = 1.0;
        let w = g.constant(vec![2, 1, 3, 3], k).unwrap();
        let y = g
            .depthwise_conv2d(x, w, None, ConvGeometry::same(3, 1).with_groups(2))
            .unwrap();
        assert_eq!(g.value(y), &data[..]);
    }
}
