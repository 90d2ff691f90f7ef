use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::PAD_ROW;
use crate::scalar::Scalar;

/// Geometry of one windowed-attention layer on an `h x w` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub feature_h: usize,
    pub feature_w: usize,
    pub window: usize,
    pub shift: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl WindowLayout {
    /// Layout with window `window`; `shifted` selects a shift of `window / 2`.
    pub fn new(feature_h: usize, feature_w: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 || feature_h == 0 || feature_w == 0 {
            return Err(Error::invalid(
                "window_layout",
                format!("grid {feature_h}x{feature_w} with window {window}"),
            ));
        }
        let pad = |n: usize| (window - n % window) % window;
        Ok(Self {
            feature_h,
            feature_w,
            window,
            shift: if shifted { window / 2 } else { 0 },
            pad_h: pad(feature_h),
            pad_w: pad(feature_w),
        })
    }

    /// Layout used inside an encoder stage: when the grid is no larger than
    /// the window, the window shrinks to the grid and shifting is disabled.
    pub fn for_stage(feature_h: usize, feature_w: usize, window: usize, shifted: bool) -> Result<Self> {
        let side = feature_h.min(feature_w);
        if side <= window {
            Self::new(feature_h, feature_w, side, false)
        } else {
            Self::new(feature_h, feature_w, window, shifted)
        }
    }

    pub fn padded_h(&self) -> usize {
        self.feature_h + self.pad_h
    }

    pub fn padded_w(&self) -> usize {
        self.feature_w + self.pad_w
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_h() / self.window) * (self.padded_w() / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn tokens(&self) -> usize {
        self.feature_h * self.feature_w
    }

    /// Padded-grid coordinate of token `t` of window `win`, in window-major order.
    fn window_cell(&self, win: usize, t: usize) -> (usize, usize) {
        let per_row = self.padded_w() / self.window;
        let (wy, wx) = (win / per_row, win % per_row);
        (wy * self.window + t / self.window, wx * self.window + t % self.window)
    }

    /// Source token of the padded, rolled grid at `(y, x)`, if not padding.
    fn source_of(&self, y: usize, x: usize) -> Option<usize> {
        let sy = (y + self.shift) % self.padded_h();
        let sx = (x + self.shift) % self.padded_w();
        (sy < self.feature_h && sx < self.feature_w).then(|| sy * self.feature_w + sx)
    }

    /// Row map for `[B * h * w, C] -> [B * nW * M^2, C]`: zero padding, then
    /// the cyclic roll by `-shift` on the padded grid, then partitioning.
    pub fn partition_index(&self, batch: usize) -> Vec<u32> {
        let (nw, n, l) = (self.windows_per_image(), self.tokens_per_window(), self.tokens());
        let mut index = Vec::with_capacity(batch * nw * n);
        for b in 0..batch {
            for win in 0..nw {
                for t in 0..n {
                    let (y, x) = self.window_cell(win, t);
                    index.push(self.source_of(y, x).map_or(PAD_ROW, |s| (b * l + s) as u32));
                }
            }
        }
        index
    }

    /// Inverse of [`partition_index`](Self::partition_index): for every
    /// original token, its row in the windowed tensor. Padding is dropped.
    pub fn reverse_index(&self, batch: usize) -> Vec<u32> {
        let (nw, n, l) = (self.windows_per_image(), self.tokens_per_window(), self.tokens());
        let (ph, pw) = (self.padded_h(), self.padded_w());
        let per_row = pw / self.window;
        let mut index = Vec::with_capacity(batch * l);
        for b in 0..batch {
            for y in 0..self.feature_h {
                for x in 0..self.feature_w {
                    let ry = (y + ph - self.shift) % ph;
                    let rx = (x + pw - self.shift) % pw;
                    let win = (ry / self.window) * per_row + rx / self.window;
                    let t = (ry % self.window) * self.window + rx % self.window;
                    index.push((b * nw * n + win * n + t) as u32);
                }
            }
        }
        index
    }

    /// Region label of every padded-grid cell after the roll; tokens from
    /// different regions must not attend to each other.
    fn region_labels(&self) -> Vec<usize> {
        let (ph, pw) = (self.padded_h(), self.padded_w());
        let band = |v: usize, n: usize| {
            if v < n - self.window {
                0
            } else if v < n - self.shift {
                1
            } else {
                2
            }
        };
        let mut labels = Vec::with_capacity(ph * pw);
        for y in 0..ph {
            for x in 0..pw {
                labels.push(band(y, ph) * 3 + band(x, pw));
            }
        }
        labels
    }

    /// Additive mask `[nW, M^2, M^2]`: 0 for permitted pairs, [`MASK_VALUE`]
    /// for pairs from different regions. All zeros when unshifted.
    pub fn attention_mask<T: Scalar>(&self) -> Vec<T> {
        let (nw, n) = (self.windows_per_image(), self.tokens_per_window());
        let mut mask = vec![T::zero(); nw * n * n];
        if self.shift == 0 {
            return mask;
        }
        let labels = self.region_labels();
        let pw = self.padded_w();
        let neg = T::of(MASK_VALUE);
        for win in 0..nw {
            let lab: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = self.window_cell(win, t);
                    labels[y * pw + x]
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    if lab[i] != lab[j] {
                        mask[(win * n + i) * n + j] = neg;
                    }
                }
            }
        }
        mask
    }

    fn check_grid(&self, op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[1] != self.feature_h || shape[2] != self.feature_w {
            return Err(Error::invalid(
                op,
                format!("expected [B, {}, {}, C], got {shape:?}", self.feature_h, self.feature_w),
            ));
        }
        Ok((shape[0], shape[3]))
    }
}

/// Additive score for forbidden attention pairs.
pub const MASK_VALUE: f64 = -1e9;

/// `[B, H, W, C] -> [B * nW, M^2, C]`, zero padding bottom/right. The layout's
/// shift is not applied here; see [`cyclic_shift`].
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, layout: &WindowLayout) -> Result<Var> {
    let (batch, c) = layout.check_grid("window_partition", g.shape(x))?;
    let plain = WindowLayout { shift: 0, ..*layout };
    let shape = [batch * plain.windows_per_image(), plain.tokens_per_window(), c];
    g.gather_rows(x, c, Arc::new(plain.partition_index(batch)), &shape)
}

/// Inverse of [`window_partition`], cropping the padding.
pub fn window_reverse<T: Scalar>(g: &mut Graph<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let shape = g.shape(windows).to_vec();
    let plain = WindowLayout { shift: 0, ..*layout };
    let (nw, n) = (plain.windows_per_image(), plain.tokens_per_window());
    if shape.len() != 3 || shape[1] != n || !shape[0].is_multiple_of(nw) || shape[0] == 0 {
        return Err(Error::invalid(
            "window_reverse",
            format!("{shape:?} is not a whole number of {nw} windows of {n} tokens"),
        ));
    }
    let (batch, c) = (shape[0] / nw, shape[2]);
    let out = [batch, layout.feature_h, layout.feature_w, c];
    g.gather_rows(windows, c, Arc::new(plain.reverse_index(batch)), &out)
}

/// Rolls a `[B, H, W, C]` map by `(-s, -s)` with wraparound, or by `(+s, +s)`
/// when `inverse` is set.
pub fn cyclic_shift<T: Scalar>(g: &mut Graph<T>, x: Var, shift: usize, inverse: bool) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "cyclic_shift",
            format!("expected [B, H, W, C], got {shape:?}"),
        ));
    }
    let (batch, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (sy, sx) = if inverse {
        ((h - shift % h) % h, (w - shift % w) % w)
    } else {
        (shift % h, shift % w)
    };
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                index.push((b * h * w + ((y + sy) % h) * w + (x + sx) % w) as u32);
            }
        }
    }
    g.gather_rows(x, c, Arc::new(index), &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(batch: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
        (0..batch * h * w * c).map(|v| v as f64 + 1.0).collect()
    }

    #[test]
    fn single_window_is_unchanged() {
        let mut g = Graph::<f64>::new();
        let data = grid(1, 3, 3, 2);
        let x = g.constant(vec![1, 3, 3, 2], data.clone()).unwrap();
        let layout = WindowLayout::new(3, 3, 3, false).unwrap();
        let w = window_partition(&mut g, x, &layout).unwrap();
        assert_eq!(g.shape(w), [1, 9, 2]);
        assert_eq!(g.value(w), &data[..]);
    }

    #[test]
    fn four_windows_tile_a_4x4_grid() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 4, 4, 1], grid(1, 4, 4, 1)).unwrap();
        let layout = WindowLayout::new(4, 4, 2, false).unwrap();
        let w = window_partition(&mut g, x, &layout).unwrap();
        let v = g.value(w);
        assert_eq!(v[..4], [1.0, 2.0, 5.0, 6.0]);
        assert_eq!(v[4..8], [3.0, 4.0, 7.0, 8.0]);
        assert_eq!(v[12..], [11.0, 12.0, 15.0, 16.0]);
        let mut all: Vec<f64> = v.to_vec();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, grid(1, 4, 4, 1));
    }

    #[test]
    fn padding_fills_zeros_and_reverse_crops() {
        let mut g = Graph::<f64>::new();
        let data = grid(2, 3, 5, 2);
        let x = g.constant(vec![2, 3, 5, 2], data.clone()).unwrap();
        let layout = WindowLayout::new(3, 5, 2, false).unwrap();
        assert_eq!((layout.pad_h, layout.pad_w), (1, 1));
        let w = window_partition(&mut g, x, &layout).unwrap();
        assert_eq!(g.shape(w), [2 * 6, 4, 2]);
        let zeros = g.value(w).iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 2 * (24 - 15) * 2);
        let back = window_reverse(&mut g, w, &layout).unwrap();
        assert_eq!(g.value(back), &data[..]);
    }

    #[test]
    fn reverse_rejects_inconsistent_window_count() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(vec![3, 4, 1], vec![0.0; 12]).unwrap();
        let layout = WindowLayout::new(4, 4, 2, false).unwrap();
        assert!(window_reverse(&mut g, w, &layout).is_err());
    }

    #[test]
    fn reverse_relocates_permuted_windows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 4, 4, 1], grid(1, 4, 4, 1)).unwrap();
        let layout = WindowLayout::new(4, 4, 2, false).unwrap();
        let w = window_partition(&mut g, x, &layout).unwrap();
        let swapped: Vec<u32> = [1u32, 0, 2, 3]
            .iter()
            .flat_map(|&k| (0..4).map(move |t| k * 4 + t))
            .collect();
        let w = g.gather_rows(w, 1, Arc::new(swapped), &[4, 4, 1]).unwrap();
        let back = window_reverse(&mut g, w, &layout).unwrap();
        let v = g.value(back);
        for y in 0..4 {
            for x in 0..4 {
                let (sy, sx) = if y < 2 { (y, (x + 2) % 4) } else { (y, x) };
                assert_eq!(v[y * 4 + x], (sy * 4 + sx + 1) as f64, "({y}, {x})");
            }
        }
    }

    #[test]
    fn shift_moves_top_left_to_bottom_right() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 4, 4, 1], grid(1, 4, 4, 1)).unwrap();
        let s = cyclic_shift(&mut g, x, 1, false).unwrap();
        let v = g.value(s);
        assert_eq!(v[15], 1.0);
        assert_eq!(v[0], 6.0);
        let back = cyclic_shift(&mut g, s, 1, true).unwrap();
        assert_eq!(g.value(back), &grid(1, 4, 4, 1)[..]);
    }

    #[test]
    fn shift_keeps_constant_map() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 5, 3, 2], vec![0.5; 60]).unwrap();
        let s = cyclic_shift(&mut g, x, 2, false).unwrap();
        assert!(g.value(s).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fused_index_equals_pad_shift_partition() {
        let layout = WindowLayout::new(8, 8, 4, true).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 8, 8, 1], grid(1, 8, 8, 1)).unwrap();
        let rolled = cyclic_shift(&mut g, x, layout.shift, false).unwrap();
        let a = window_partition(&mut g, rolled, &layout).unwrap();
        let b = g
            .gather_rows(x, 1, Arc::new(layout.partition_index(1)), &[4, 16, 1])
            .unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn stage_layout_clamps_small_grids() {
        let l = WindowLayout::for_stage(2, 2, 4, true).unwrap();
        assert_eq!((l.window, l.shift, l.pad_h), (2, 0, 0));
        let l = WindowLayout::for_stage(4, 4, 4, true).unwrap();
        assert_eq!((l.window, l.shift), (4, 0));
        let l = WindowLayout::for_stage(8, 8, 4, true).unwrap();
        assert_eq!((l.window, l.shift), (4, 2));
    }

    #[test]
    fn unshifted_mask_is_zero_and_shifted_mask_is_symmetric() {
        let plain = WindowLayout::new(8, 8, 4, false).unwrap();
        assert!(plain.attention_mask::<f64>().iter().all(|&v| v == 0.0));
        let shifted = WindowLayout::new(8, 8, 4, true).unwrap();
        let m = shifted.attention_mask::<f64>();
        let n = 16;
        for w in 0..4 {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m[(w * n + i) * n + j], m[(w * n + j) * n + i]);
                }
            }
        }
        assert!(m[..n * n].iter().all(|&v| v == 0.0));
        assert!(m[3 * n * n..].iter().any(|&v| v < 0.0));
    }
}
