//! Synthetic small-object scenes and a resolution-aware noisy detector.
//!
//! The detector's miss rate and localisation noise shrink as the view
//! resolution grows, so any accuracy gain from larger or more views comes out
//! of the pipeline rather than being written into the generator.
//!
//! Randomness is keyed, never sequential across images: every stream is a
//! ChaCha8 generator seeded with [`mix_seed`] of the run seed and a small tuple
//! identifying the stream (scene, object, or view). Results are therefore
//! independent of thread count and processing order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::fusion::Detection;
use crate::geometry::{BBox, ImageDims};
use crate::tta::{original_to_view, DetectorAdapter, ImageRecord, ViewSpec};

const STREAM_SCENE: u64 = 1;
const STREAM_OBJECT: u64 = 2;
const STREAM_VIEW: u64 = 3;

const PLACEMENT_TRIES: usize = 200;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed: `h = splitmix64(seed)`, then `h = splitmix64(h ^ w)`
/// for each word `w` in order.
pub fn mix_seed(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(seed), |h, &w| splitmix64(h ^ w))
}

fn stream(seed: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, words))
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Resolution at which the `*_base` / `*_at_ref` figures apply.
    pub reference_size: u32,
    /// Probability a ground truth is missed at the reference resolution.
    pub miss_rate_base: f64,
    /// `miss = base * (reference / target)^exponent`, clamped to [0, 1].
    pub miss_rate_resolution_exponent: f64,
    /// Std-dev of each corner coordinate (original-image pixels) at the
    /// reference resolution; scales with `reference / target`.
    pub jitter_px_at_ref: f64,
    /// Expected number of spurious boxes per image and view (Poisson).
    pub fp_rate: f64,
    /// Side-length range of spurious boxes, original-image pixels.
    pub fp_size_px: [f64; 2],
    /// Beta(alpha, beta) parameters of true-positive scores.
    pub tp_score: [f64; 2],
    /// Beta(alpha, beta) parameters of false-positive scores.
    pub fp_score: [f64; 2],
    /// Share of per-object noise variance common to all views of an image.
    pub view_noise_correlation: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            reference_size: 3200,
            miss_rate_base: 0.2,
            miss_rate_resolution_exponent: 1.0,
            jitter_px_at_ref: 1.5,
            fp_rate: 1.0,
            fp_size_px: [8.0, 40.0],
            tp_score: [6.0, 2.0],
            fp_score: [2.0, 6.0],
            view_noise_correlation: 0.5,
        }
    }
}

impl NoiseModel {
    /// Detector that sees every object exactly and nothing else.
    pub fn noiseless() -> Self {
        Self {
            miss_rate_base: 0.0,
            jitter_px_at_ref: 0.0,
            fp_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {p}"
                )))
            }
        };
        prob("miss_rate_base", self.miss_rate_base)?;
        prob("view_noise_correlation", self.view_noise_correlation)?;
        if self.reference_size == 0 {
            return Err(Error::invalid("reference_size must be positive"));
        }
        let non_neg = [
            (
                "miss_rate_resolution_exponent",
                self.miss_rate_resolution_exponent,
            ),
            ("jitter_px_at_ref", self.jitter_px_at_ref),
            ("fp_rate", self.fp_rate),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, [a, b]) in [("tp_score", self.tp_score), ("fp_score", self.fp_score)] {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} Beta parameters must be positive"
                )));
            }
        }
        let [lo, hi] = self.fp_size_px;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!(
                "fp_size_px range [{lo}, {hi}] is invalid"
            )));
        }
        Ok(())
    }

    fn ratio(&self, view: &ViewSpec) -> f64 {
        f64::from(self.reference_size) / f64::from(view.target_size())
    }

    pub fn miss_rate(&self, view: &ViewSpec) -> f64 {
        (self.miss_rate_base * self.ratio(view).powf(self.miss_rate_resolution_exponent))
            .clamp(0.0, 1.0)
    }

    pub fn jitter_px(&self, view: &ViewSpec) -> f64 {
        self.jitter_px_at_ref * self.ratio(view)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Inclusive range of objects per image.
    pub objects_per_image: [u32; 2],
    /// Range of object side lengths in pixels.
    pub object_size_px: [f64; 2],
    /// Sides are drawn as `lo + (hi - lo) * u^bias`; values above 1 favour small objects.
    pub size_bias: f64,
    pub categories: Vec<u32>,
    pub rng_seed: u64,
    pub detector_noise: NoiseModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            image_width: 3840,
            image_height: 2160,
            objects_per_image: [2, 10],
            object_size_px: [8.0, 40.0],
            size_bias: 2.0,
            categories: vec![1],
            rng_seed: 42,
            detector_noise: NoiseModel::default(),
        }
    }
}

impl SynthConfig {
    pub fn dims(&self) -> Result<ImageDims> {
        ImageDims::new(self.image_width, self.image_height)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if self.n_images == 0 {
            return Err(Error::invalid("n_images must be positive"));
        }
        let [olo, ohi] = self.objects_per_image;
        if olo > ohi {
            return Err(Error::invalid(format!(
                "objects_per_image range [{olo}, {ohi}] is empty"
            )));
        }
        let [slo, shi] = self.object_size_px;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::invalid(format!(
                "object_size_px range [{slo}, {shi}] is invalid"
            )));
        }
        if shi > f64::from(self.image_width.min(self.image_height)) {
            return Err(Error::invalid("objects larger than the image"));
        }
        if !(self.size_bias > 0.0) {
            return Err(Error::invalid("size_bias must be positive"));
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("at least one category is required"));
        }
        self.detector_noise.validate()
    }
}

fn draw_side(rng: &mut impl Rng, [lo, hi]: [f64; 2], bias: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u.powf(bias)
}

/// Coordinates are snapped to 1/64 px so that the `[x, y, w, h]` file form
/// converts to corners and back without rounding.
fn snap(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

fn random_box(rng: &mut impl Rng, dims: ImageDims, size: [f64; 2], bias: f64) -> BBox {
    let w = snap(draw_side(rng, size, bias));
    let h = snap(draw_side(rng, size, bias));
    let x = snap(rng.random::<f64>() * (f64::from(dims.width()) - w));
    let y = snap(rng.random::<f64>() * (f64::from(dims.height()) - h));
    BBox::new(x, y, x + w, y + h).expect("positive extents")
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1() < b.x2() && b.x1() < a.x2() && a.y1() < b.y2() && b.y1() < a.y2()
}

/// Images `1..=n_images` with non-overlapping objects fully inside each image.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Vec<ImageRecord>, Vec<GroundTruth>)> {
    cfg.validate()?;
    let dims = cfg.dims()?;
    let scenes: Vec<(ImageRecord, Vec<GroundTruth>)> = (1..=cfg.n_images as u64)
        .into_par_iter()
        .map(|image_id| {
            let mut rng = stream(cfg.rng_seed, &[STREAM_SCENE, image_id]);
            let [lo, hi] = cfg.objects_per_image;
            let count = rng.random_range(lo..=hi);
            let mut placed: Vec<GroundTruth> = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let category_id = cfg.categories[rng.random_range(0..cfg.categories.len())];
                let bbox = (0..PLACEMENT_TRIES)
                    .map(|_| random_box(&mut rng, dims, cfg.object_size_px, cfg.size_bias))
                    .find(|b| placed.iter().all(|g| !overlaps(b, &g.bbox)))
                    .ok_or_else(|| {
                        Error::Generation(format!(
                            "image {image_id}: no free spot for object {} after {PLACEMENT_TRIES} tries",
                            placed.len() + 1
                        ))
                    })?;
                placed.push(GroundTruth {
                    image_id,
                    bbox,
                    category_id,
                    ignore: false,
                });
            }
            let record = ImageRecord {
                image_id,
                dims,
                file_name: format!("synth_{image_id:06}.png"),
            };
            Ok((record, placed))
        })
        .collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(scenes.len());
    let mut gts = Vec::new();
    for (img, objs) in scenes {
        images.push(img);
        gts.extend(objs);
    }
    Ok((images, gts))
}

fn view_key(view: &ViewSpec) -> u64 {
    (u64::from(view.target_size()) << 2) | (u64::from(view.hflip()) << 1) | u64::from(view.vflip())
}

/// Noisy detections of `gts` (the objects of `image`, in dataset order) in
/// the frame of `view`. Deterministic in `(seed, image_id, view)`.
pub fn synthetic_detections(
    image: &ImageRecord,
    gts: &[GroundTruth],
    view: &ViewSpec,
    noise: &NoiseModel,
    categories: &[u32],
    seed: u64,
) -> Vec<Detection> {
    let rho = noise.view_noise_correlation;
    let (shared, own) = (rho.sqrt(), (1.0 - rho).sqrt());
    let miss_rate = noise.miss_rate(view);
    let sigma = noise.jitter_px(view);
    let tp_score = Beta::new(noise.tp_score[0], noise.tp_score[1]).expect("validated");
    let fp_score = Beta::new(noise.fp_score[0], noise.fp_score[1]).expect("validated");

    let mut view_rng = stream(seed, &[STREAM_VIEW, image.image_id, view_key(view)]);
    let mut out = Vec::with_capacity(gts.len() + 2);
    for (k, gt) in gts.iter().enumerate() {
        let mut obj_rng = stream(seed, &[STREAM_OBJECT, image.image_id, k as u64]);
        let z_miss = shared * std_normal(&mut obj_rng) + own * std_normal(&mut view_rng);
        let mut coords = gt.bbox.to_array();
        for c in coords.iter_mut() {
            *c += sigma * (shared * std_normal(&mut obj_rng) + own * std_normal(&mut view_rng));
        }
        let score: f64 = tp_score.sample(&mut view_rng);
        if normal_cdf(z_miss) < miss_rate {
            continue;
        }
        let bbox = BBox::new(
            coords[0].min(coords[2]),
            coords[1].min(coords[3]),
            coords[0].max(coords[2]),
            coords[1].max(coords[3]),
        )
        .expect("finite jittered coordinates");
        let det = Detection::new(
            original_to_view(&bbox, view, image.dims),
            score,
            gt.category_id,
        )
        .expect("beta sample lies in [0, 1]");
        out.push(det);
    }

    if noise.fp_rate > 0.0 && !categories.is_empty() {
        let n_fp = Poisson::new(noise.fp_rate)
            .expect("validated")
            .sample(&mut view_rng) as usize;
        for _ in 0..n_fp {
            let bbox = random_box(&mut view_rng, image.dims, noise.fp_size_px, 1.0);
            let category_id = categories[view_rng.random_range(0..categories.len())];
            let score: f64 = fp_score.sample(&mut view_rng);
            let det = Detection::new(
                original_to_view(&bbox, view, image.dims),
                score,
                category_id,
            )
            .expect("beta sample lies in [0, 1]");
            out.push(det);
        }
    }
    out
}

/// [`DetectorAdapter`] over a synthetic dataset.
pub struct SyntheticDetector {
    gts: HashMap<u64, Vec<GroundTruth>>,
    noise: NoiseModel,
    categories: Vec<u32>,
    seed: u64,
}

impl SyntheticDetector {
    pub fn new(
        gts: &[GroundTruth],
        noise: NoiseModel,
        categories: Vec<u32>,
        seed: u64,
    ) -> Result<Self> {
        noise.validate()?;
        let mut by_image: HashMap<u64, Vec<GroundTruth>> = HashMap::new();
        for g in gts {
            by_image.entry(g.image_id).or_default().push(*g);
        }
        Ok(Self {
            gts: by_image,
            noise,
            categories,
            seed,
        })
    }

    pub fn from_config(cfg: &SynthConfig, gts: &[GroundTruth]) -> Result<Self> {
        Self::new(
            gts,
            cfg.detector_noise.clone(),
            cfg.categories.clone(),
            cfg.rng_seed,
        )
    }
}

impl DetectorAdapter for SyntheticDetector {
    fn detect(&self, image: &ImageRecord, view: &ViewSpec) -> Result<Vec<Detection>> {
        let gts = self
            .gts
            .get(&image.image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        Ok(synthetic_detections(
            image,
            gts,
            view,
            &self.noise,
            &self.categories,
            self.seed,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tta::box_to_original;

    fn small_cfg(n: usize, objs: [u32; 2]) -> SynthConfig {
        SynthConfig {
            n_images: n,
            objects_per_image: objs,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_scene() {
        let (imgs, gts) = generate_dataset(&small_cfg(1, [0, 0])).unwrap();
        assert_eq!(imgs.len(), 1);
        assert!(gts.is_empty());
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = small_cfg(20, [1, 5]);
        assert_eq!(
            generate_dataset(&cfg).unwrap(),
            generate_dataset(&cfg).unwrap()
        );
        let other = SynthConfig {
            rng_seed: 7,
            ..cfg.clone()
        };
        assert_ne!(
            generate_dataset(&cfg).unwrap().1,
            generate_dataset(&other).unwrap().1
        );
    }

    #[test]
    fn object_count_and_bounds() {
        let cfg = small_cfg(100, [1, 5]);
        let (imgs, gts) = generate_dataset(&cfg).unwrap();
        assert_eq!(imgs.len(), 100);
        assert!((100..=500).contains(&gts.len()), "{}", gts.len());
        for g in &gts {
            assert!(g.bbox.x1() >= 0.0 && g.bbox.y1() >= 0.0);
            assert!(g.bbox.x2() <= 3840.0 && g.bbox.y2() <= 2160.0);
            assert!(g.bbox.width() >= 8.0 && g.bbox.width() <= 40.0);
        }
    }

    #[test]
    fn infeasible_placement_errors() {
        let cfg = SynthConfig {
            n_images: 1,
            image_width: 100,
            image_height: 100,
            objects_per_image: [50, 50],
            object_size_px: [30.0, 40.0],
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Generation(_))));
    }

    fn scene() -> (ImageRecord, Vec<GroundTruth>) {
        let (imgs, gts) = generate_dataset(&small_cfg(1, [6, 6])).unwrap();
        (imgs[0].clone(), gts)
    }

    #[test]
    fn noiseless_detector_is_exact() {
        let (img, gts) = scene();
        for view in crate::tta::default_view_plan().views() {
            let dets = synthetic_detections(&img, &gts, view, &NoiseModel::noiseless(), &[1], 3);
            assert_eq!(dets.len(), gts.len());
            for (d, g) in dets.iter().zip(&gts) {
                assert_eq!(*d.bbox(), original_to_view(&g.bbox, view, img.dims));
                let back = box_to_original(d.bbox(), view, img.dims).unwrap();
                for (a, b) in back.to_array().iter().zip(g.bbox.to_array()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn certain_miss_gives_nothing() {
        let (img, gts) = scene();
        let noise = NoiseModel {
            miss_rate_base: 1.0,
            fp_rate: 0.0,
            ..NoiseModel::default()
        };
        let view = ViewSpec::new(3200, false).unwrap();
        assert!(synthetic_detections(&img, &gts, &view, &noise, &[1], 3).is_empty());
    }

    #[test]
    fn detector_is_deterministic_per_view() {
        let (img, gts) = scene();
        let noise = NoiseModel::default();
        let a = ViewSpec::new(3200, false).unwrap();
        let b = ViewSpec::new(3200, true).unwrap();
        let run = |v| synthetic_detections(&img, &gts, v, &noise, &[1], 11);
        assert_eq!(run(&a), run(&a));
        assert_ne!(run(&a), run(&b));
    }

    #[test]
    fn rates_follow_resolution() {
        let noise = NoiseModel::default();
        let v = |s| ViewSpec::new(s, false).unwrap();
        assert!((noise.miss_rate(&v(1280)) - 0.5).abs() < 1e-12);
        assert!((noise.miss_rate(&v(3200)) - 0.2).abs() < 1e-12);
        assert!(noise.miss_rate(&v(3520)) < 0.2);
        assert!((noise.jitter_px(&v(1280)) - 3.75).abs() < 1e-12);
        let harsh = NoiseModel {
            miss_rate_base: 0.9,
            miss_rate_resolution_exponent: 2.0,
            ..noise
        };
        assert_eq!(harsh.miss_rate(&v(640)), 1.0);
    }

    #[test]
    fn seed_mixing_is_order_sensitive() {
        assert_ne!(mix_seed(1, &[2, 3]), mix_seed(1, &[3, 2]));
        assert_eq!(mix_seed(1, &[2, 3]), mix_seed(1, &[2, 3]));
    }
}
