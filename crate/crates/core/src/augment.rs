//! Appearance augmentation and construction of decoupled training pairs:
//! features come from the original clip, target latents from the augmented one.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use candle_core::Device;
use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::LatentVideo;
use crate::features::{encode_frames, FeatureGrid, FrameEncoder};
use crate::video::{VaeStub, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Real,
    Photometric,
    NeuralStyle,
    Blur,
}

impl GroupKind {
    pub const ALL: [GroupKind; 4] = [Self::Real, Self::Photometric, Self::NeuralStyle, Self::Blur];
}

/// Mixture weights over the four groups; uniform by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub real: f64,
    pub photometric: f64,
    pub neural_style: f64,
    pub blur: f64,
}

impl Default for GroupWeights {
    fn default() -> Self {
        Self {
            real: 1.0,
            photometric: 1.0,
            neural_style: 1.0,
            blur: 1.0,
        }
    }
}

impl GroupWeights {
    pub fn only(kind: GroupKind) -> Self {
        let mut w = Self {
            real: 0.0,
            photometric: 0.0,
            neural_style: 0.0,
            blur: 0.0,
        };
        *w.get_mut(kind) = 1.0;
        w
    }

    fn get_mut(&mut self, kind: GroupKind) -> &mut f64 {
        match kind {
            GroupKind::Real => &mut self.real,
            GroupKind::Photometric => &mut self.photometric,
            GroupKind::NeuralStyle => &mut self.neural_style,
            GroupKind::Blur => &mut self.blur,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.real, self.photometric, self.neural_style, self.blur]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        crate::ensure!(
            w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().sum::<f64>() > 0.0,
            "group weights must be non-negative with a positive sum, got {w:?}"
        );
        Ok(())
    }
}

pub fn sample_group<R: Rng + ?Sized>(weights: &GroupWeights, rng: &mut R) -> GroupKind {
    let w = weights.as_array();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (kind, wi) in GroupKind::ALL.iter().zip(w) {
        if u < wi {
            return *kind;
        }
        u -= wi;
    }
    *GroupKind::ALL
        .iter()
        .zip(w)
        .rev()
        .find(|(_, wi)| *wi > 0.0)
        .expect("validated weights")
        .0
}

/// Closed-form per-pixel colour transforms. Every field at its identity value
/// leaves a pixel untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    /// Rotation of the chroma plane, in turns.
    pub hue: f64,
    pub saturation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub grayscale: bool,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            hue: 0.0,
            saturation: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            gamma: 1.0,
            grayscale: false,
        }
    }
}

/// Sampling ranges for the augmentation groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub hue: (f64, f64),
    pub saturation: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
    pub grayscale_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            hue: (-0.1, 0.1),
            saturation: (0.6, 1.4),
            brightness: (-0.2, 0.2),
            contrast: (0.7, 1.3),
            gamma: (0.7, 1.4),
            grayscale_prob: 0.2,
            blur_sigma: (0.5, 2.0),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl AugmentRanges {
    pub fn sample_photometric<R: Rng + ?Sized>(&self, rng: &mut R) -> PhotometricParams {
        PhotometricParams {
            hue: uniform(rng, self.hue),
            saturation: uniform(rng, self.saturation),
            brightness: uniform(rng, self.brightness),
            contrast: uniform(rng, self.contrast),
            gamma: uniform(rng, self.gamma),
            grayscale: rng.random::<f64>() < self.grayscale_prob,
        }
    }

    pub fn sample_blur<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        uniform(rng, self.blur_sigma)
    }
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn photometric_pixel(mut rgb: [f64; 3], p: &PhotometricParams) -> [f64; 3] {
    if p.grayscale {
        let y = luma(rgb);
        rgb = [y; 3];
    }
    if p.saturation != 1.0 {
        let y = luma(rgb);
        rgb = rgb.map(|c| y + p.saturation * (c - y));
    }
    if p.hue != 0.0 {
        // Rotate (I, Q) in YIQ space.
        let y = luma(rgb);
        let i = 0.596 * rgb[0] - 0.274 * rgb[1] - 0.322 * rgb[2];
        let q = 0.211 * rgb[0] - 0.523 * rgb[1] + 0.312 * rgb[2];
        let (s, c) = (2.0 * std::f64::consts::PI * p.hue).sin_cos();
        let (i, q) = (c * i - s * q, s * i + c * q);
        rgb = [
            y + 0.956 * i + 0.621 * q,
            y - 0.272 * i - 0.647 * q,
            y - 1.106 * i + 1.703 * q,
        ];
    }
    if p.brightness != 0.0 {
        rgb = rgb.map(|c| c + p.brightness);
    }
    if p.contrast != 1.0 {
        rgb = rgb.map(|c| 0.5 + p.contrast * (c - 0.5));
    }
    rgb = rgb.map(|c| c.clamp(0.0, 1.0));
    if p.gamma != 1.0 {
        rgb = rgb.map(|c| c.powf(p.gamma));
    }
    rgb
}

pub fn photometric_frame(frame: ArrayView3<f32>, p: &PhotometricParams) -> Array3<f32> {
    let (_, h, w) = frame.dim();
    let mut out = frame.to_owned();
    for y in 0..h {
        for x in 0..w {
            let rgb = [0, 1, 2].map(|c| frame[(c, y, x)] as f64);
            let o = photometric_pixel(rgb, p);
            for c in 0..3 {
                out[(c, y, x)] = o[c] as f32;
            }
        }
    }
    out
}

/// Applies the same photometric parameters to every frame.
pub fn apply_photometric(video: &VideoTensor, p: &PhotometricParams) -> Result<VideoTensor> {
    crate::ensure!(p.gamma > 0.0, "gamma must be positive, got {}", p.gamma);
    video.map_frames(|f| photometric_frame(f, p))
}

/// Normalized 1-D Gaussian taps with radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

pub fn blur_frame(frame: ArrayView3<f32>, sigma: f64) -> Array3<f32> {
    if sigma == 0.0 {
        return frame.to_owned();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = frame.dim();
    let tap = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut rows = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                rows[(ch, y, x)] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * frame[(ch, y, tap(x as isize + j as isize - r, w))] as f64)
                    .sum();
            }
        }
    }
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * rows[(ch, tap(y as isize + j as isize - r, h), x)])
            .sum::<f64>()
            .clamp(0.0, 1.0) as f32
    })
}

/// Gaussian blur with replicated borders; `sigma = 0` is the identity.
pub fn apply_blur(video: &VideoTensor, sigma: f64) -> Result<VideoTensor> {
    crate::ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        "blur sigma must be ≥ 0, got {sigma}"
    );
    video.map_frames(|f| blur_frame(f, sigma))
}

pub type StyleFn = Arc<dyn Fn(ArrayView3<f32>) -> Array3<f32> + Send + Sync>;

/// Named per-frame style transforms supplied by the caller.
#[derive(Clone, Default)]
pub struct StyleRegistry {
    hooks: BTreeMap<String, StyleFn>,
}

impl fmt::Debug for StyleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.hooks.keys()).finish()
    }
}

impl StyleRegistry {
    pub fn register(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(ArrayView3<f32>) -> Array3<f32> + Send + Sync + 'static,
    ) {
        self.hooks.insert(name.into(), Arc::new(f));
    }

    pub fn names(&self) -> Vec<&str> {
        self.hooks.keys().map(String::as_str).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn apply(&self, video: &VideoTensor, name: &str) -> Result<VideoTensor> {
        let hook = self.hooks.get(name).ok_or_else(|| Error::Lookup {
            kind: "style",
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        video.map_frames(|f| hook(f))
    }
}

/// The clip-level transform that produced a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    Real,
    Photometric(PhotometricParams),
    NeuralStyle { name: String },
    Blur { sigma: f64 },
}

impl Augmentation {
    pub fn group(&self) -> GroupKind {
        match self {
            Self::Real => GroupKind::Real,
            Self::Photometric(_) => GroupKind::Photometric,
            Self::NeuralStyle { .. } => GroupKind::NeuralStyle,
            Self::Blur { .. } => GroupKind::Blur,
        }
    }

    /// Prompt keyword for the target appearance; empty only for real clips.
    pub fn style_keyword(&self) -> String {
        match self {
            Self::Real => String::new(),
            Self::Photometric(p) if p.grayscale => "black and white".into(),
            Self::Photometric(_) => "color graded".into(),
            Self::NeuralStyle { name } => name.clone(),
            Self::Blur { .. } => "blurry".into(),
        }
    }

    pub fn apply(&self, video: &VideoTensor, styles: &StyleRegistry) -> Result<VideoTensor> {
        match self {
            Self::Real => Ok(video.clone()),
            Self::Photometric(p) => apply_photometric(video, p),
            Self::NeuralStyle { name } => styles.apply(video, name),
            Self::Blur { sigma } => apply_blur(video, *sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub features_from_original: bool,
    pub latents_from_augmented: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub features: FeatureGrid,
    pub target_latents: LatentVideo,
    pub augmentation: Augmentation,
    pub style_keyword: String,
    pub provenance: Provenance,
    /// sha256 of the feature payload, for purity checks.
    pub feature_hash: String,
}

impl TrainingPair {
    pub fn group(&self) -> GroupKind {
        self.augmentation.group()
    }

    pub fn validate(&self) -> Result<()> {
        crate::ensure!(
            self.provenance.features_from_original && self.provenance.latents_from_augmented,
            "pair provenance {:?} violates the decoupling contract",
            self.provenance
        );
        crate::ensure!(
            self.style_keyword.is_empty() == (self.group() == GroupKind::Real),
            "style keyword `{}` inconsistent with group {:?}",
            self.style_keyword,
            self.group()
        );
        let (_, _, h, w) = self.target_latents.dims();
        self.features.check_latent_alignment((h, w))
    }
}

pub fn feature_hash(grid: &FeatureGrid) -> String {
    let mut h = Sha256::new();
    for v in grid.data().iter() {
        h.update(v.to_le_bytes());
    }
    crate::hex(&h.finalize())
}

/// Builds training pairs from clips.
pub struct PairBuilder<'a> {
    pub encoder: &'a dyn FrameEncoder,
    pub vae: &'a VaeStub,
    pub styles: &'a StyleRegistry,
    pub ranges: AugmentRanges,
    pub device: Device,
}

impl PairBuilder<'_> {
    /// Draws the clip-level transform for `group`.
    pub fn sample_augmentation<R: Rng + ?Sized>(
        &self,
        group: GroupKind,
        rng: &mut R,
    ) -> Result<Augmentation> {
        Ok(match group {
            GroupKind::Real => Augmentation::Real,
            GroupKind::Photometric => {
                Augmentation::Photometric(self.ranges.sample_photometric(rng))
            }
            GroupKind::Blur => Augmentation::Blur {
                sigma: self.ranges.sample_blur(rng),
            },
            GroupKind::NeuralStyle => {
                let names = self.styles.names();
                if names.is_empty() {
                    return Err(Error::Lookup {
                        kind: "style",
                        name: "<any>".into(),
                        available: String::new(),
                    });
                }
                Augmentation::NeuralStyle {
                    name: names[rng.random_range(0..names.len())].to_string(),
                }
            }
        })
    }

    pub fn build_with(
        &self,
        video: &VideoTensor,
        augmentation: Augmentation,
    ) -> Result<TrainingPair> {
        let features = encode_frames(video, self.encoder)?;
        let target = augmentation.apply(video, self.styles)?;
        let target_latents = self.vae.encode(&target, &self.device)?;
        let pair = TrainingPair {
            feature_hash: feature_hash(&features),
            features,
            target_latents,
            style_keyword: augmentation.style_keyword(),
            augmentation,
            provenance: Provenance {
                features_from_original: true,
                latents_from_augmented: true,
            },
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn build_pair<R: Rng + ?Sized>(
        &self,
        video: &VideoTensor,
        group: GroupKind,
        rng: &mut R,
    ) -> Result<TrainingPair> {
        let aug = self.sample_augmentation(group, rng)?;
        self.build_with(video, aug)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{EncoderSpec, ToyEncoder};
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip() -> VideoTensor {
        VideoTensor::synthetic(5, 32, 48, 11).unwrap()
    }

    #[test]
    fn group_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = BTreeMap::new();
        for _ in 0..10_000 {
            *counts
                .entry(sample_group(&GroupWeights::default(), &mut rng))
                .or_insert(0usize) += 1;
        }
        for k in GroupKind::ALL {
            let f = counts[&k] as f64 / 10_000.0;
            assert!((0.235..=0.265).contains(&f), "{k:?}: {f}");
        }
    }

    #[test]
    fn sampling_is_seeded_and_overridable() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_group(&GroupWeights::default(), &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = GroupWeights::only(GroupKind::Real);
        assert!((0..1000).all(|_| sample_group(&w, &mut rng) == GroupKind::Real));
    }

    #[test]
    fn photometric_examples() {
        let v = clip();
        assert_eq!(
            apply_photometric(&v, &PhotometricParams::default()).unwrap(),
            v
        );

        let g = apply_photometric(
            &v,
            &PhotometricParams {
                grayscale: true,
                ..Default::default()
            },
        )
        .unwrap();
        for f in g.data().outer_iter() {
            assert_eq!(
                f.index_axis(ndarray::Axis(0), 0),
                f.index_axis(ndarray::Axis(0), 1)
            );
            assert_eq!(
                f.index_axis(ndarray::Axis(0), 1),
                f.index_axis(ndarray::Axis(0), 2)
            );
        }
        let gray = PhotometricParams {
            grayscale: true,
            ..Default::default()
        };
        let twice = apply_photometric(&g, &gray).unwrap();
        for (a, b) in twice.data().iter().zip(g.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        let half = VideoTensor::new(Array4::from_elem((2, 3, 4, 4), 0.5)).unwrap();
        let sq = apply_photometric(
            &half,
            &PhotometricParams {
                gamma: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sq.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn blur_examples() {
        let v = clip();
        assert_eq!(apply_blur(&v, 0.0).unwrap(), v);
        let c = VideoTensor::new(Array4::from_elem((1, 3, 9, 9), 0.4)).unwrap();
        assert!(apply_blur(&c, 1.3)
            .unwrap()
            .data()
            .iter()
            .all(|x| (x - 0.4).abs() < 1e-6));

        let sigma = 1.0;
        let k = gaussian_kernel(sigma);
        let mut imp = Array4::<f32>::zeros((1, 3, 15, 15));
        imp[(0, 0, 7, 7)] = 1.0;
        let out = apply_blur(&VideoTensor::new(imp).unwrap(), sigma).unwrap();
        let r = k.len() / 2;
        let mut total = 0.0;
        for y in 0..15usize {
            for x in 0..15usize {
                let want = if y.abs_diff(7) <= r && x.abs_diff(7) <= r {
                    k[y + r - 7] * k[x + r - 7]
                } else {
                    0.0
                };
                let got = out.data()[(0, 0, y, x)] as f64;
                assert!((got - want).abs() < 1e-6);
                total += got;
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
        assert!(apply_blur(&v, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn transforms_are_temporally_uniform(seed in 0u64..200) {
            let v = clip();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentRanges::default().sample_photometric(&mut rng);
            let clipwise = apply_photometric(&v, &p).unwrap();
            for i in 0..v.frames() {
                let want = photometric_frame(v.frame(i), &p);
                prop_assert_eq!(clipwise.frame(i), want.view());
            }
        }
    }

    #[test]
    fn style_hooks() {
        let mut reg = StyleRegistry::default();
        reg.register("identity", |f: ArrayView3<f32>| f.to_owned());
        let v = clip();
        assert_eq!(reg.apply(&v, "identity").unwrap(), v);
        let err = reg.apply(&v, "paprika").unwrap_err();
        assert!(matches!(&err, Error::Lookup { available, .. } if available == "identity"));
        let aug = Augmentation::NeuralStyle {
            name: "paprika".into(),
        };
        assert_eq!(
            crate::text::build_prompt("a room", &aug.style_keyword()).unwrap(),
            "a room, paprika"
        );
    }

    #[test]
    fn pairs_keep_features_pure() {
        let enc = ToyEncoder::new(EncoderSpec::toy(), 1).unwrap();
        let vae = VaeStub::new(4, 2).unwrap();
        let mut styles = StyleRegistry::default();
        styles.register("invert", |f: ArrayView3<f32>| f.mapv(|x| 1.0 - x));
        let b = PairBuilder {
            encoder: &enc,
            vae: &vae,
            styles: &styles,
            ranges: AugmentRanges::default(),
            device: Device::Cpu,
        };
        let v = clip();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = GroupKind::ALL
            .iter()
            .map(|g| b.build_pair(&v, *g, &mut rng).unwrap())
            .collect();
        let real_latents = vae.encode(&v, &Device::Cpu).unwrap();
        let diff = |a: &LatentVideo, b: &LatentVideo| {
            (a.tensor() - b.tensor())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };
        assert_eq!(diff(&pairs[0].target_latents, &real_latents), 0.0);
        for p in &pairs[1..] {
            assert_eq!(p.feature_hash, pairs[0].feature_hash);
            assert_eq!(p.features, pairs[0].features);
            assert!(diff(&p.target_latents, &pairs[0].target_latents) > 0.0);
            assert!(!p.style_keyword.is_empty());
        }
        assert!(pairs[0].style_keyword.is_empty());
    }
}
