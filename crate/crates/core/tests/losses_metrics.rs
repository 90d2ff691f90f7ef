mod common;

use common::{brute_counts, random_vec};
use hbformer::train::{dsc, iou, miou, LabelMap, MetricsReport, DICE_EPS};
use hbformer::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn target(labels: &[u8], k: usize, classes: usize, idx: usize) -> f64 {
    let l = labels[idx] as usize;
    if classes == 1 {
        (l == 1) as u8 as f64
    } else {
        (l == k) as u8 as f64
    }
}

/// Direct `-t ln s - (1 - t) ln(1 - s)` averaged over every logit.
fn bce_oracle(z: &[f64], labels: &[u8], b: usize, k: usize, plane: usize) -> f64 {
    let mut total = 0.0;
    for bi in 0..b {
        for c in 0..k {
            for p in 0..plane {
                let s = sigmoid(z[(bi * k + c) * plane + p]);
                let t = target(labels, c, k, bi * plane + p);
                total += -t * s.ln() - (1.0 - t) * (1.0 - s).ln();
            }
        }
    }
    total / (b * k * plane) as f64
}

/// `1 - (2 sum s t + eps) / (sum s + sum t + eps)` per foreground channel, averaged.
fn dice_oracle(z: &[f64], labels: &[u8], b: usize, k: usize, plane: usize) -> f64 {
    let chans: Vec<usize> = if k == 1 { vec![0] } else { (1..k).collect() };
    let mut total = 0.0;
    for &c in &chans {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for bi in 0..b {
            for p in 0..plane {
                let s = sigmoid(z[(bi * k + c) * plane + p]);
                let t = target(labels, c, k, bi * plane + p);
                inter += s * t;
                ps += s;
                ts += t;
            }
        }
        total += 1.0 - (2.0 * inter + DICE_EPS) / (ps + ts + DICE_EPS);
    }
    total / chans.len() as f64
}

fn random_labels(seed: u64, n: usize, classes: u8) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn losses(z: &[f64], shape: [usize; 4], labels: &[u8]) -> (f64, f64, f64) {
    let mut g = Graph::<f64>::new();
    let zv = g.constant(shape.to_vec(), z.to_vec()).unwrap();
    let bce = g.bce_loss(zv, labels).unwrap();
    let dice = g.dice_loss(zv, labels, DICE_EPS).unwrap();
    let both = g.bce_dice_loss(zv, labels).unwrap();
    (g.value(bce)[0], g.value(dice)[0], g.value(both)[0])
}

#[test]
fn bce_at_zero_logits_is_ln2() {
    for k in [1usize, 2, 3] {
        let labels = random_labels(k as u64, 2 * 36, k.max(2) as u8);
        let (bce, _, _) = losses(&vec![0.0; 2 * k * 36], [2, k, 6, 6], &labels);
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-6, "k {k}: {bce}");
    }
}

#[test]
fn combined_loss_is_the_sum_of_its_terms() {
    let labels = random_labels(1, 2 * 25, 3);
    let z = random_vec(2, 2 * 3 * 25, 4.0);
    let (bce, dice, both) = losses(&z, [2, 3, 5, 5], &labels);
    assert!((both - (bce + dice)).abs() <= 4.0 * f64::EPSILON * both.abs());
    assert!((bce - bce_oracle(&z, &labels, 2, 3, 25)).abs() < 1e-12);
    assert!((dice - dice_oracle(&z, &labels, 2, 3, 25)).abs() < 1e-12);
}

#[test]
fn saturated_perfect_prediction_has_near_zero_loss() {
    for k in [1usize, 3] {
        let labels = random_labels(7, 64, k.max(2) as u8);
        let z: Vec<f64> = (0..k)
            .flat_map(|c| (0..64).map(move |p| (c, p)))
            .map(|(c, p)| if target(&labels, c, k, p) == 1.0 { 30.0 } else { -30.0 })
            .collect();
        let (_, _, both) = losses(&z, [1, k, 8, 8], &labels);
        assert!(both < 1e-3, "k {k}: {both:e}");
    }
}

#[test]
fn extreme_logits_stay_finite() {
    let labels = random_labels(2, 16, 2);
    let z: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 800.0 } else { -800.0 }).collect();
    let (bce, dice, _) = losses(&z, [1, 2, 4, 4], &labels);
    assert!(bce.is_finite() && dice.is_finite());
}

#[test]
fn out_of_range_labels_are_rejected() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap();
    assert!(g.bce_loss(z, &[0, 1, 2, 0]).is_err());
    assert!(g.dice_loss(z, &[0, 1, 0], 1.0).is_err());
}

#[test]
fn metrics_match_pixel_counting_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let classes = 3u8;
    for _ in 0..50 {
        let p: Vec<u8> = (0..256).map(|_| rng.random_range(0..classes)).collect();
        let t: Vec<u8> = (0..256).map(|_| rng.random_range(0..classes)).collect();
        let (pm, tm) = (
            LabelMap::new(16, 16, p.clone()).unwrap(),
            LabelMap::new(16, 16, t.clone()).unwrap(),
        );
        let (mut iou_sum, mut present) = (0.0, 0);
        for c in 0..classes {
            let k = brute_counts(&p, &t, c);
            let want_dsc = if k.pred + k.target == 0 {
                1.0
            } else {
                (2 * k.inter) as f64 / (k.pred + k.target) as f64
            };
            let union = k.pred + k.target - k.inter;
            let want_iou = if union == 0 { 1.0 } else { k.inter as f64 / union as f64 };
            let (d, j) = (dsc(&pm, &tm, c, 3).unwrap(), iou(&pm, &tm, c, 3).unwrap());
            assert_eq!(d, want_dsc);
            assert_eq!(j, want_iou);
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            if union > 0 {
                iou_sum += want_iou;
                present += 1;
            }
        }
        assert_eq!(miou(&pm, &tm, 3).unwrap(), iou_sum / present as f64);
    }
}

#[test]
fn report_averages_per_sample_scores() {
    let a = LabelMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
    let b = LabelMap::new(2, 2, vec![0, 1, 2, 2]).unwrap();
    let empty = LabelMap::new(2, 2, vec![0, 0, 0, 1]).unwrap();
    let r = MetricsReport::evaluate(&[(a.clone(), b.clone()), (empty.clone(), empty)], 3, 9).unwrap();
    assert_eq!(r.classes, vec![1, 2]);
    // Class 1: 2/3 then 1; class 2: 2/3 then absent from both (1).
    assert!((r.per_class_dsc[0] - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    assert!((r.per_class_dsc[1] - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    // IoU skips the sample where class 2 is absent.
    assert!((r.per_class_iou[1] - 0.5).abs() < 1e-15);
    assert_eq!(r.seed, 9);
}

proptest! {
    #[test]
    fn dice_iou_identity_holds(p in prop::collection::vec(0u8..3, 64), t in prop::collection::vec(0u8..3, 64)) {
        let (pm, tm) = (LabelMap::new(8, 8, p).unwrap(), LabelMap::new(8, 8, t).unwrap());
        for c in 0..3u8 {
            let (d, j) = (dsc(&pm, &tm, c, 3).unwrap(), iou(&pm, &tm, c, 3).unwrap());
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d) && j <= d + 1e-15);
        }
    }

    #[test]
    fn loss_is_non_negative(z in prop::collection::vec(-10.0f64..10.0, 2 * 16), seed in 0u64..100) {
        let labels = random_labels(seed, 16, 2);
        let (bce, dice, _) = losses(&z, [1, 2, 4, 4], &labels);
        prop_assert!(bce >= 0.0 && (0.0..=1.0).contains(&dice));
    }
}
