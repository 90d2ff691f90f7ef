mod common;

use common::{dspp_store, max_abs_diff, pyramid_oracle, random_vec, RATES};
use hbformer::decoder::{ChannelAttention, MedDspp, MffStage, SpatialAttention};
use hbformer::encoder::ModelConfig;
use hbformer::model::HbFormer;
use hbformer::{Module, ParamStore, Session};

#[test]
fn pyramid_at_init_matches_dilated_conv_oracle() {
    let (batch, ch, side) = (2, 3, 20);
    let dspp = MedDspp::new("dspp", ch, &RATES).unwrap();
    let store = dspp_store(&dspp, 4);
    let x = random_vec(5, batch * ch * side * side, 1.0);
    for training in [true, false] {
        let mut s = Session::new(&store, training);
        let xv = s.graph.constant(vec![batch, ch, side, side], x.clone()).unwrap();
        let y = dspp.forward(&mut s, xv).unwrap();
        let diff = max_abs_diff(s.graph.value(y), &pyramid_oracle(&store, &x, batch, ch, side, training));
        assert!(diff < 1e-6, "training {training}: {diff:e}");
    }
}

#[test]
fn zero_fusion_makes_the_pyramid_an_identity() {
    let dspp = MedDspp::new("dspp", 2, &RATES).unwrap();
    let mut store = ParamStore::init(&dspp.specs(), 1);
    for name in ["dspp.fuse.weight", "dspp.fuse.bias"] {
        store
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let x: Vec<f32> = random_vec(2, 2 * 2 * 9 * 9, 1.0)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let mut s = Session::new(&store, true);
    let xv = s.graph.constant(vec![2, 2, 9, 9], x.clone()).unwrap();
    let y = dspp.forward(&mut s, xv).unwrap();
    assert_eq!(s.graph.value(y), &x[..]);
}

#[test]
fn impulse_response_spans_the_largest_dilation() {
    let (ch, side) = (1, 49);
    let dspp = MedDspp::new("dspp", ch, &RATES).unwrap();
    let store = ParamStore::init(&dspp.specs(), 3).cast::<f64>();
    let run = |x: Vec<f64>| {
        let mut s = Session::new(&store, false);
        let xv = s.graph.constant(vec![1, ch, side, side], x).unwrap();
        let y = dspp.forward(&mut s, xv).unwrap();
        s.graph.value(y).to_vec()
    };
    let base = run(vec![0.0; side * side]);
    let mut impulse = vec![0.0; side * side];
    let centre = side / 2;
    impulse[centre * side + centre] = 1.0;
    let hit = run(impulse);
    let (mut lo, mut hi) = ((side, side), (0, 0));
    for y in 0..side {
        for x in 0..side {
            if (hit[y * side + x] - base[y * side + x]).abs() > 0.0 {
                lo = (lo.0.min(y), lo.1.min(x));
                hi = (hi.0.max(y), hi.1.max(x));
            }
        }
    }
    // 3x3 deformable tap (extent 3) followed by a rate-18 3x3 (extent 37).
    let extent = 3 + 37 - 1;
    assert_eq!((hi.0 - lo.0 + 1, hi.1 - lo.1 + 1), (extent, extent));
    assert_eq!((lo.0, lo.1), (centre - extent / 2, centre - extent / 2));
}

#[test]
fn gates_lie_strictly_between_zero_and_one() {
    let ca = ChannelAttention::new("ca", 8);
    let sa = SpatialAttention::new("sa", 8);
    let mut specs = ca.specs();
    specs.extend(sa.specs());
    let mut store = ParamStore::init(&specs, 2).cast::<f64>();
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
    }
    let mut s = Session::new(&store, false);
    let x = s.graph.constant(vec![2, 8, 5, 5], random_vec(3, 400, 3.0)).unwrap();
    let cg = ca.gate(&mut s, x).unwrap();
    let sg = sa.gate(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(cg), &[2, 8]);
    assert_eq!(s.graph.shape(sg), &[2, 1, 5, 5]);
    for g in [cg, sg] {
        assert!(s.graph.value(g).iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let y = ca.forward(&mut s, x).unwrap();
    let xv = s.graph.value(x).to_vec();
    let gv = s.graph.value(cg).to_vec();
    for (k, v) in s.graph.value(y).iter().enumerate() {
        assert!((v - xv[k] * gv[k / 25]).abs() < 1e-12);
    }
}

#[test]
fn fusion_stage_restores_skip_resolution() {
    let stage = MffStage::new("st", 8, 4, &RATES).unwrap();
    let store = ParamStore::init(&stage.specs(), 0).cast::<f64>();
    let mut s = Session::new(&store, true);
    let below = s.graph.constant(vec![2, 8, 4, 4], random_vec(1, 256, 1.0)).unwrap();
    let skip = s.graph.constant(vec![2, 4, 8, 8], random_vec(2, 512, 1.0)).unwrap();
    let y = stage.forward(&mut s, below, skip).unwrap();
    assert_eq!(s.graph.shape(y), &[2, 4, 8, 8]);
}

#[test]
fn both_decoders_emit_full_resolution_logits() {
    for use_mff_decoder in [true, false] {
        let cfg = ModelConfig {
            use_mff_decoder,
            ..ModelConfig::micro()
        };
        let model = HbFormer::new(cfg.clone()).unwrap();
        let store = model.init_params(1);
        let img = hbformer::Tensor::new(
            vec![2, 3, 32, 32],
            random_vec(3, 2 * 3 * 1024, 1.0).into_iter().map(|v| v as f32).collect(),
        )
        .unwrap();
        let y = model.predict(&store, &img).unwrap();
        assert_eq!(y.shape(), &[2, cfg.num_classes, 32, 32]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn plain_decoder_is_smaller_than_fusion_decoder() {
    for base in [ModelConfig::micro(), ModelConfig::desk()] {
        let mff = HbFormer::new(base.clone()).unwrap();
        let plain = HbFormer::new(ModelConfig {
            use_mff_decoder: false,
            ..base
        })
        .unwrap();
        assert!(plain.decoder.num_params() < mff.decoder.num_params());
    }
}
