use crate::error::{Error, Result};
use crate::train::data::LabelMap;

/// Pixel counts of one class in a prediction/target pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub target: u64,
}

impl Overlap {
    pub fn count(pred: &LabelMap, target: &LabelMap, class_id: u8, num_classes: usize) -> Result<Self> {
        if class_id as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: class_id as usize,
                num_classes,
            });
        }
        if (pred.height, pred.width) != (target.height, target.width) {
            return Err(Error::shape(
                "overlap",
                &[pred.height, pred.width],
                &[target.height, target.width],
            ));
        }
        let mut o = Self::default();
        for (&p, &t) in pred.labels.iter().zip(&target.labels) {
            let (p, t) = (p == class_id, t == class_id);
            o.intersection += (p && t) as u64;
            o.predicted += p as u64;
            o.target += t as u64;
        }
        Ok(o)
    }

    pub fn union(&self) -> u64 {
        self.predicted + self.target - self.intersection
    }

    /// Dice coefficient; 1.0 when the class is absent from both masks.
    pub fn dsc(&self) -> f64 {
        let den = self.predicted + self.target;
        if den == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / den as f64
        }
    }

    /// Intersection over union, `None` when the class is absent from both masks.
    pub fn iou(&self) -> Option<f64> {
        let u = self.union();
        (u > 0).then(|| self.intersection as f64 / u as f64)
    }
}

/// `2|P ∩ G| / (|P| + |G|)` for one class, 1.0 when both are empty.
pub fn dsc(pred: &LabelMap, target: &LabelMap, class_id: u8, num_classes: usize) -> Result<f64> {
    Ok(Overlap::count(pred, target, class_id, num_classes)?.dsc())
}

/// `|P ∩ G| / |P ∪ G|` for one class, 1.0 when both are empty.
pub fn iou(pred: &LabelMap, target: &LabelMap, class_id: u8, num_classes: usize) -> Result<f64> {
    Ok(Overlap::count(pred, target, class_id, num_classes)?
        .iou()
        .unwrap_or(1.0))
}

/// Mean IoU over all classes, skipping classes absent from both masks.
pub fn miou(pred: &LabelMap, target: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        if let Some(v) = Overlap::count(pred, target, c as u8, num_classes)?.iou() {
            total += v;
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { total / n as f64 })
}

/// Foreground-class metrics averaged over samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Class ids of the entries below (every class except background 0).
    pub classes: Vec<u8>,
    pub per_class_dsc: Vec<f64>,
    pub mean_dsc: f64,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// Per-sample DSC and IoU of each foreground class, averaged over
    /// samples. A sample where a class is absent from both masks scores
    /// DSC 1 and is left out of that class's IoU average.
    pub fn evaluate(pairs: &[(LabelMap, LabelMap)], num_classes: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes: Vec<u8> = (1..num_classes.max(2) as u8).collect();
        let mut per_class_dsc = Vec::with_capacity(classes.len());
        let mut per_class_iou = Vec::with_capacity(classes.len());
        for &c in &classes {
            let (mut d, mut i, mut ni) = (0.0, 0.0, 0usize);
            for (pred, target) in pairs {
                let o = Overlap::count(pred, target, c, num_classes.max(2))?;
                d += o.dsc();
                if let Some(v) = o.iou() {
                    i += v;
                    ni += 1;
                }
            }
            per_class_dsc.push(d / pairs.len() as f64);
            per_class_iou.push(if ni == 0 { 1.0 } else { i / ni as f64 });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            mean_dsc: mean(&per_class_dsc),
            miou: mean(&per_class_iou),
            classes,
            per_class_dsc,
            per_class_iou,
            samples: pairs.len(),
            seed,
        })
    }
}

/// Mean and standard deviation of each report entry across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub classes: Vec<u8>,
    pub per_class_dsc: Vec<(f64, f64)>,
    pub mean_dsc: (f64, f64),
    pub per_class_iou: Vec<(f64, f64)>,
    pub miou: (f64, f64),
    pub seeds: Vec<u64>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::EmptyDataset)?;
        if reports.iter().any(|r| r.classes != first.classes) {
            return Err(Error::invalid("aggregate", "reports cover different classes"));
        }
        let column = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        let n = first.classes.len();
        Ok(Self {
            classes: first.classes.clone(),
            per_class_dsc: (0..n).map(|i| column(&|r| r.per_class_dsc[i])).collect(),
            mean_dsc: column(&|r| r.mean_dsc),
            per_class_iou: (0..n).map(|i| column(&|r| r.per_class_iou[i])).collect(),
            miou: column(&|r| r.miou),
            seeds: reports.iter().map(|r| r.seed).collect(),
        })
    }
}

/// Mean and sample standard deviation (n - 1) of `values`; the deviation is
/// 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, labels: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, labels).unwrap()
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let a = map(2, 2, vec![1, 1, 0, 0]);
        let b = map(2, 2, vec![0, 0, 1, 1]);
        assert_eq!(dsc(&a, &a, 1, 2).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b, 1, 2).unwrap(), 0.0);
        assert_eq!(miou(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(miou(&a, &b, 2).unwrap(), 0.0);
    }

    #[test]
    fn dsc_counts_pixels() {
        let mut p = vec![0u8; 16];
        let mut t = vec![0u8; 16];
        p[..6].fill(1);
        t[3..7].fill(1);
        assert!((dsc(&map(4, 4, p), &map(4, 4, t), 1, 2).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn half_overlapping_squares_have_iou_one_third() {
        let mut p = vec![0u8; 8];
        let mut t = vec![0u8; 8];
        for y in 0..2 {
            p[y * 4] = 1;
            p[y * 4 + 1] = 1;
            t[y * 4 + 1] = 1;
            t[y * 4 + 2] = 1;
        }
        assert!((iou(&map(2, 4, p), &map(2, 4, t), 1, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_classes_follow_conventions() {
        let a = map(1, 2, vec![0, 0]);
        assert_eq!(dsc(&a, &a, 2, 3).unwrap(), 1.0);
        assert_eq!(miou(&a, &a, 3).unwrap(), 1.0);
        assert!(dsc(&a, &a, 3, 3).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
