mod common;

use common::{conv2d as naive_conv, matmul as naive_matmul, max_abs_diff, random_vec, ConvSpec};
use hbformer::nn::ConvGeometry;
use hbformer::Graph;
use proptest::prelude::*;

fn geometry(c: &ConvSpec) -> ConvGeometry {
    ConvGeometry {
        stride: c.stride,
        padding: c.padding,
        dilation: c.dilation,
        groups: c.groups,
    }
}

fn graph_conv(c: ConvSpec, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(vec![c.batch, c.in_ch, c.h, c.w], x.to_vec()).unwrap();
    let wv = g
        .constant(vec![c.out_ch, c.in_ch / c.groups, c.kernel, c.kernel], w.to_vec())
        .unwrap();
    let bv = g.constant(vec![c.out_ch], b.to_vec()).unwrap();
    let y = g.conv2d(xv, wv, Some(bv), geometry(&c)).unwrap();
    g.value(y).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batched_matmul_matches_triple_loop(batch in 1usize..4, m in 1usize..7, k in 1usize..9, n in 1usize..7, seed in 0u64..1000) {
        let a = random_vec(seed, batch * m * k, 1.0);
        let b = random_vec(seed + 1, batch * k * n, 1.0);
        let mut g = Graph::<f64>::new();
        let av = g.constant(vec![batch, m, k], a.clone()).unwrap();
        let bv = g.constant(vec![batch, k, n], b.clone()).unwrap();
        let y = g.matmul(av, bv).unwrap();
        for i in 0..batch {
            let want = naive_matmul(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], m, k, n);
            prop_assert!(max_abs_diff(&g.value(y)[i * m * n..(i + 1) * m * n], &want) < 1e-12);
        }
    }

    #[test]
    fn conv_matches_six_loop_oracle(
        batch in 1usize..3,
        groups in 1usize..3,
        cin_g in 1usize..3,
        cout_g in 1usize..3,
        h in 3usize..9,
        w in 3usize..9,
        kernel in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        dilation in 1usize..3,
        padding in 0usize..3,
        seed in 0u64..1000,
    ) {
        let c = ConvSpec { batch, in_ch: cin_g * groups, out_ch: cout_g * groups, h, w, kernel, stride, padding, dilation, groups };
        let ext = dilation * (kernel - 1) + 1;
        prop_assume!(h + 2 * padding >= ext && w + 2 * padding >= ext);
        prop_assume!((h + 2 * padding - ext) % stride == 0 && (w + 2 * padding - ext) % stride == 0);
        let x = random_vec(seed, batch * c.in_ch * h * w, 1.0);
        let wt = random_vec(seed + 7, c.out_ch * cin_g * kernel * kernel, 1.0);
        let b = random_vec(seed + 9, c.out_ch, 1.0);
        let got = graph_conv(c, &x, &wt, &b);
        prop_assert!(max_abs_diff(&got, &naive_conv(&x, &wt, Some(&b), c)) < 1e-12);
    }
}

#[test]
fn depthwise_matches_grouped_oracle() {
    let c = ConvSpec {
        batch: 2,
        in_ch: 3,
        out_ch: 3,
        h: 7,
        w: 6,
        kernel: 3,
        stride: 1,
        padding: 2,
        dilation: 2,
        groups: 3,
    };
    let x = random_vec(1, 2 * 3 * 42, 1.0);
    let w = random_vec(2, 27, 1.0);
    let b = random_vec(3, 3, 1.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(vec![2, 3, 7, 6], x.clone()).unwrap();
    let wv = g.constant(vec![3, 1, 3, 3], w.clone()).unwrap();
    let bv = g.constant(vec![3], b.clone()).unwrap();
    let y = g.depthwise_conv2d(xv, wv, Some(bv), geometry(&c)).unwrap();
    assert!(max_abs_diff(g.value(y), &naive_conv(&x, &w, Some(&b), c)) < 1e-12);
}

#[test]
fn deformable_with_zero_offsets_is_dilated_conv() {
    for dilation in [1usize, 2, 3] {
        let c = ConvSpec {
            batch: 2,
            in_ch: 3,
            out_ch: 4,
            h: 9,
            w: 8,
            kernel: 3,
            stride: 1,
            padding: dilation,
            dilation,
            groups: 1,
        };
        let (oh, ow) = c.out_hw();
        let x = random_vec(dilation as u64, 2 * 3 * 72, 1.0);
        let w = random_vec(10, 4 * 3 * 9, 1.0);
        let b = random_vec(11, 4, 1.0);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(vec![2, 3, 9, 8], x.clone()).unwrap();
        let off = g.constant(vec![2, 18, oh, ow], vec![0.0; 2 * 18 * oh * ow]).unwrap();
        let wv = g.constant(vec![4, 3, 3, 3], w.clone()).unwrap();
        let bv = g.constant(vec![4], b.clone()).unwrap();
        let y = g.deform_conv2d(xv, off, wv, Some(bv), geometry(&c)).unwrap();
        let diff = max_abs_diff(g.value(y), &naive_conv(&x, &w, Some(&b), c));
        assert!(diff < 1e-6, "dilation {dilation}: {diff:e}");
    }
}

#[test]
fn integer_offsets_shift_the_sampling_grid() {
    // A 1x1-equivalent kernel (only the centre tap is non-zero) with every
    // offset (+1, -1) reads the input one row down and one column left.
    let (h, w) = (5, 6);
    let x = random_vec(4, h * w, 1.0);
    let mut weight = vec![0.0; 9];
    weight[4] = 1.0;
    let offsets: Vec<f64> = (0..9)
        .flat_map(|_| [vec![1.0; h * w], vec![-1.0; h * w]])
        .flatten()
        .collect();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(vec![1, 1, h, w], x.clone()).unwrap();
    let ov = g.constant(vec![1, 18, h, w], offsets).unwrap();
    let wv = g.constant(vec![1, 1, 3, 3], weight).unwrap();
    let y = g.deform_conv2d(xv, ov, wv, None, ConvGeometry::same(3, 1)).unwrap();
    for oy in 0..h {
        for ox in 0..w {
            let want = if oy + 1 < h && ox >= 1 {
                x[(oy + 1) * w + ox - 1]
            } else {
                0.0
            };
            assert!((g.value(y)[oy * w + ox] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_resize_preserves_constants_and_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 2, 3, 5], vec![0.25; 30]).unwrap();
    let up = g.bilinear_resize(x, 8, 11).unwrap();
    assert!(g.value(up).iter().all(|v| (v - 0.25).abs() < 1e-12));
    let data = random_vec(5, 30, 1.0);
    let x = g.constant(vec![1, 2, 3, 5], data.clone()).unwrap();
    let same = g.bilinear_resize(x, 3, 5).unwrap();
    assert!(max_abs_diff(g.value(same), &data) < 1e-12);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![3, 4, 5], random_vec(6, 60, 20.0)).unwrap();
    let p = g.softmax(x, 2).unwrap();
    for row in g.value(p).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
