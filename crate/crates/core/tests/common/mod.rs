//! Naive reference implementations used as independent oracles.
#![allow(dead_code)]

use hbformer::decoder::MedDspp;
use hbformer::nn::LEAKY_SLOPE;
use hbformer::{Module, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

/// `[m, k] x [k, n]` by the triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn out_hw(&self) -> (usize, usize) {
        let ext = self.dilation * (self.kernel - 1) + 1;
        (
            (self.h + 2 * self.padding - ext) / self.stride + 1,
            (self.w + 2 * self.padding - ext) / self.stride + 1,
        )
    }
}

/// Zero-padded grouped convolution, one loop per index.
pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, c: ConvSpec) -> Vec<f64> {
    let (oh, ow) = c.out_hw();
    let (cin_g, cout_g) = (c.in_ch / c.groups, c.out_ch / c.groups);
    let k = c.kernel;
    let mut out = vec![0.0; c.batch * c.out_ch * oh * ow];
    for b in 0..c.batch {
        for o in 0..c.out_ch {
            let g = o / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for ci in 0..cin_g {
                        let ic = g * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * c.stride + ky * c.dilation) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx * c.dilation) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xv = x[((b * c.in_ch + ic) * c.h + iy as usize) * c.w + ix as usize];
                                acc += xv * w[((o * cin_g + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * c.out_ch + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Training-mode batch norm on `[B, C, H, W]` with biased batch variance.
pub fn batch_norm_train(
    x: &[f64],
    b: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|bi| (0..plane).map(move |p| (bi, p)))
            .map(|(bi, p)| x[(bi * c + ch) * plane + p])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for bi in 0..b {
            for p in 0..plane {
                let i = (bi * c + ch) * plane + p;
                out[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const RATES: [usize; 4] = [1, 6, 12, 18];

pub fn conv_spec(batch: usize, ch_in: usize, ch_out: usize, side: usize, kernel: usize, dilation: usize) -> ConvSpec {
    ConvSpec {
        batch,
        in_ch: ch_in,
        out_ch: ch_out,
        h: side,
        w: side,
        kernel,
        stride: 1,
        padding: dilation * (kernel / 2),
        dilation,
        groups: 1,
    }
}

/// Parallel dilated-convolution pyramid computed from the raw weights: each
/// branch is a plain 3x3 convolution, a dilated 3x3 convolution, batch norm
/// and leaky ReLU; branches are concatenated, fused and added to the input.
pub fn pyramid_oracle(
    store: &ParamStore<f64>,
    x: &[f64],
    batch: usize,
    ch: usize,
    side: usize,
    training: bool,
) -> Vec<f64> {
    let plane = side * side;
    let p = |n: String| store.get(&n).unwrap().data().to_vec();
    let mut cat = vec![0.0; batch * 4 * ch * plane];
    for (i, &rate) in RATES.iter().enumerate() {
        let b = format!("dspp.branches.{i}");
        let y = conv2d(
            x,
            &p(format!("{b}.deform.weight")),
            None,
            conv_spec(batch, ch, ch, side, 3, 1),
        );
        let y = conv2d(
            &y,
            &p(format!("{b}.dilated.weight")),
            None,
            conv_spec(batch, ch, ch, side, 3, rate),
        );
        let (gamma, beta) = (p(format!("{b}.bn.weight")), p(format!("{b}.bn.bias")));
        let y = if training {
            batch_norm_train(&y, batch, ch, plane, &gamma, &beta, 1e-5)
        } else {
            let (mean, var) = (p(format!("{b}.bn.running_mean")), p(format!("{b}.bn.running_var")));
            y.iter()
                .enumerate()
                .map(|(k, v)| {
                    let c = (k / plane) % ch;
                    gamma[c] * (v - mean[c]) / (var[c] + 1e-5).sqrt() + beta[c]
                })
                .collect()
        };
        for bi in 0..batch {
            for c in 0..ch {
                for q in 0..plane {
                    cat[((bi * 4 + i) * ch + c) * plane + q] = leaky(y[(bi * ch + c) * plane + q], LEAKY_SLOPE);
                }
            }
        }
    }
    let fused = conv2d(
        &cat,
        &p("dspp.fuse.weight".into()),
        Some(&p("dspp.fuse.bias".into())),
        conv_spec(batch, 4 * ch, ch, side, 1, 1),
    );
    fused.iter().zip(x).map(|(f, v)| f + v).collect()
}

pub fn dspp_store(dspp: &MedDspp, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::init(&dspp.specs(), seed).cast::<f64>();
    // Non-trivial norm affine terms and running statistics.
    for (name, t) in store.iter_mut() {
        if name.contains(".bn.") {
            let v = random_vec(name.len() as u64, t.len(), 0.5);
            for (d, r) in t.data_mut().iter_mut().zip(v) {
                *d += if name.ends_with("running_var") { r.abs() } else { r };
            }
        }
    }
    store
}

pub struct Counts {
    pub inter: u64,
    pub pred: u64,
    pub target: u64,
}

/// Per-class pixel tallies by direct comparison.
pub fn brute_counts(p: &[u8], t: &[u8], c: u8) -> Counts {
    let mut k = Counts {
        inter: 0,
        pred: 0,
        target: 0,
    };
    for i in 0..p.len() {
        if p[i] == c && t[i] == c {
            k.inter += 1;
        }
        if p[i] == c {
            k.pred += 1;
        }
        if t[i] == c {
            k.target += 1;
        }
    }
    k
}
