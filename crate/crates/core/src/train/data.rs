use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map `[height, width]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ElementCount {
                op: "label_map",
                from: labels.len(),
                to: height * width,
            });
        }
        Ok(Self { height, width, labels })
    }

    /// Pixel count of each class id below `num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// A flip followed by a counter-clockwise rotation by `quarter_turns * 90°`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Output size for an `h x w` input.
    fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel of output `(y, x)` in an `h x w` input.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        // Undo the rotation first, then the flip.
        let (mut sy, mut sx) = (y, x);
        let (mut ch, mut cw) = self.output_dims(h, w);
        for _ in 0..self.quarter_turns % 4 {
            // Output of one CCW turn at (a, b) reads input (b, cw_in - 1 - a).
            let (in_h, in_w) = (cw, ch);
            let (a, b) = (sy, sx);
            sy = b;
            sx = in_w - 1 - a;
            ch = in_h;
            cw = in_w;
        }
        if self.flip {
            sx = w - 1 - sx;
        }
        (sy, sx)
    }

    /// Applies the transform to every `h x w` plane of `data`.
    pub fn apply_planes<V: Copy>(&self, data: &[V], h: usize, w: usize) -> Vec<V> {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks_exact(h * w) {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = self.source(y, x, h, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleMeta {
    pub source: String,
    pub augmentation: Option<Augmentation>,
}

/// Image `[C, H, W]` in `[0, 1]` with its aligned label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub meta: SampleMeta,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f32>, mask: LabelMap, source: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
            return Err(Error::shape("segmentation_sample", s, &[mask.height, mask.width]));
        }
        Ok(Self {
            image,
            mask,
            meta: SampleMeta {
                source: source.into(),
                augmentation: None,
            },
        })
    }

    pub fn transformed(&self, aug: Augmentation) -> Self {
        let s = self.image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = aug.output_dims(h, w);
        let image = Tensor::new(vec![c, oh, ow], aug.apply_planes(self.image.data(), h, w))
            .expect("transform preserves element count");
        let mask = LabelMap {
            height: oh,
            width: ow,
            labels: aug.apply_planes(&self.mask.labels, h, w),
        };
        Self {
            image,
            mask,
            meta: SampleMeta {
                source: self.meta.source.clone(),
                augmentation: Some(aug),
            },
        }
    }
}

/// Random horizontal flip (p = 0.5) and a uniformly chosen multiple of 90°.
pub fn augment<R: Rng + ?Sized>(sample: &SegmentationSample, rng: &mut R) -> SegmentationSample {
    sample.transformed(Augmentation::sample(rng))
}

/// Stacks samples into `images [B, C, H, W]` and concatenated labels `[B, H, W]`.
pub fn collate(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.labels.len());
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::shape("collate", &shape, s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.labels);
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Ok((Tensor::new(full, data)?, labels))
}

/// Parameters of the synthetic organ-and-tumour generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub min_tumors: usize,
    pub max_tumors: usize,
    /// Organ semi-axes are drawn uniformly from this range, as fractions of `size`.
    pub organ_axes: (f64, f64),
    /// Tumour semi-axes in pixels.
    pub tumor_radius: (f64, f64),
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 3,
            channels: 3,
            min_tumors: 0,
            max_tumors: 3,
            organ_axes: (0.22, 0.35),
            tumor_radius: (2.0, 5.0),
            noise_std: 0.05,
        }
    }
}

pub const BACKGROUND_LEVEL: f32 = 0.1;
pub const ORGAN_LEVEL: f32 = 0.5;
pub const TUMOR_LEVEL: f32 = 0.9;

/// Maximum placement attempts per tumour before it is skipped.
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalised radius at a pixel centre: < 1 inside, 1 on the boundary.
    fn radius(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        self.radius(y, x) <= 1.0
    }

    /// Soft membership in `[0, 1]`, falling off over about one pixel at the edge.
    fn soft(&self, y: usize, x: usize) -> f64 {
        let edge = (1.0 - self.radius(y, x)) * self.a.min(self.b);
        1.0 / (1.0 + (-2.0 * edge).exp())
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!(
                "synthetic size {} is below the minimum 16",
                self.size
            )));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic data has 2 or 3 classes, not {}",
                self.num_classes
            )));
        }
        if self.min_tumors > self.max_tumors || self.channels == 0 {
            return Err(Error::Config("inconsistent tumour count range or channels".into()));
        }
        Ok(())
    }

    /// Expected pixel fractions `(organ, tumour)` of the label map, ignoring
    /// placement failures and discretisation: the organ fraction excludes
    /// tumour pixels when tumours carry their own class.
    pub fn expected_fractions(&self) -> (f64, f64) {
        let s2 = (self.size * self.size) as f64;
        let mid = |r: (f64, f64)| 0.5 * (r.0 + r.1);
        let organ = std::f64::consts::PI * (mid(self.organ_axes) * self.size as f64).powi(2) / s2;
        let tumors = 0.5 * (self.min_tumors + self.max_tumors) as f64;
        let tumor = tumors * std::f64::consts::PI * mid(self.tumor_radius).powi(2) / s2;
        if self.num_classes == 3 {
            (organ - tumor, tumor)
        } else {
            (organ, 0.0)
        }
    }

    /// Sample `index` of the dataset drawn from `seed`; every sample has its
    /// own random stream, so it does not depend on the dataset size.
    pub fn sample(&self, seed: u64, index: usize) -> Result<SegmentationSample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let s = self.size;
        let sf = s as f64;
        let organ = Ellipse {
            cy: sf * rng.random_range(0.42..0.58),
            cx: sf * rng.random_range(0.42..0.58),
            a: sf * rng.random_range(self.organ_axes.0..=self.organ_axes.1),
            b: sf * rng.random_range(self.organ_axes.0..=self.organ_axes.1),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        let count = rng.random_range(self.min_tumors..=self.max_tumors);
        let mut tumors: Vec<Ellipse> = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..PLACEMENT_TRIES {
                let t = Ellipse {
                    cy: rng.random_range(0.0..sf),
                    cx: rng.random_range(0.0..sf),
                    a: rng.random_range(self.tumor_radius.0..=self.tumor_radius.1),
                    b: rng.random_range(self.tumor_radius.0..=self.tumor_radius.1),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                };
                if self.fits(&t, &organ, &tumors) {
                    tumors.push(t);
                    break;
                }
            }
        }
        let tumor_label = if self.num_classes == 3 { 2 } else { 1 };
        let mut labels = vec![0u8; s * s];
        let mut base = vec![0f64; s * s];
        for y in 0..s {
            for x in 0..s {
                let mut v = BACKGROUND_LEVEL as f64 + (ORGAN_LEVEL - BACKGROUND_LEVEL) as f64 * organ.soft(y, x);
                if organ.contains(y, x) {
                    labels[y * s + x] = 1;
                }
                for t in &tumors {
                    v += (TUMOR_LEVEL - ORGAN_LEVEL) as f64 * t.soft(y, x);
                    if t.contains(y, x) {
                        labels[y * s + x] = tumor_label;
                    }
                }
                base[y * s + x] = v;
            }
        }
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(self.channels * s * s);
        for c in 0..self.channels {
            let gain = 1.0 - 0.05 * c as f64;
            for &v in &base {
                data.push((v * gain + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            }
        }
        SegmentationSample::new(
            Tensor::new(vec![self.channels, s, s], data)?,
            LabelMap::new(s, s, labels)?,
            format!("synth-{seed}-{index}"),
        )
    }

    /// A tumour fits when all its pixels lie inside the organ, it covers at
    /// least one pixel, and it does not touch an earlier tumour.
    fn fits(&self, t: &Ellipse, organ: &Ellipse, placed: &[Ellipse]) -> bool {
        let r = t.a.max(t.b).ceil() as isize + 1;
        let (cy, cx) = (t.cy as isize, t.cx as isize);
        let mut any = false;
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if y < 0 || x < 0 || y >= self.size as isize || x >= self.size as isize {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if t.contains(y, x) {
                    any = true;
                    if !organ.contains(y, x) || placed.iter().any(|p| p.radius(y, x) <= 1.5) {
                        return false;
                    }
                }
            }
        }
        any
    }
}

/// `n` samples of the synthetic task, fully determined by `seed`.
pub fn synth_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SegmentationSample>> {
    cfg.validate()?;
    (0..n).map(|i| cfg.sample(seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(h: usize, w: usize) -> SegmentationSample {
        let data: Vec<f32> = (0..2 * h * w).map(|v| v as f32).collect();
        let labels: Vec<u8> = (0..h * w).map(|v| (v % 3) as u8).collect();
        SegmentationSample::new(
            Tensor::new(vec![2, h, w], data).unwrap(),
            LabelMap::new(h, w, labels).unwrap(),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn double_flip_and_four_turns_are_identity() {
        let s = labelled(3, 5);
        let f = Augmentation {
            flip: true,
            quarter_turns: 0,
        };
        assert_eq!(s.transformed(f).transformed(f).image, s.image);
        let r = Augmentation {
            flip: false,
            quarter_turns: 1,
        };
        let mut t = s.clone();
        for _ in 0..4 {
            t = t.transformed(r);
        }
        assert_eq!(t.image, s.image);
        assert_eq!(t.mask, s.mask);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let m = [1u8, 2, 3, 4, 5, 6];
        let r = Augmentation {
            flip: false,
            quarter_turns: 1,
        };
        assert_eq!(r.apply_planes(&m, 2, 3), [3, 6, 2, 5, 1, 4]);
        let two = Augmentation {
            flip: false,
            quarter_turns: 2,
        };
        assert_eq!(two.apply_planes(&m, 2, 3), [6, 5, 4, 3, 2, 1]);
        let f = Augmentation {
            flip: true,
            quarter_turns: 0,
        };
        assert_eq!(f.apply_planes(&m, 2, 3), [3, 2, 1, 6, 5, 4]);
    }

    #[test]
    fn synth_rejects_tiny_images() {
        let cfg = SynthConfig {
            size: 8,
            ..SynthConfig::default()
        };
        assert!(synth_dataset(1, &cfg, 0).is_err());
    }

    #[test]
    fn synth_is_seeded() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(3, &cfg, 7).unwrap();
        let b = synth_dataset(3, &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].image, synth_dataset(1, &cfg, 8).unwrap()[0].image);
    }
}
