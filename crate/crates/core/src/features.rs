//! Dense per-frame feature maps aligned with the latent grid.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor_io::{self, RawTensor};
use crate::video::{orthonormal_columns, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Toy,
    File,
    External,
}

/// Features `(T, D, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Array4<f32>,
    pub patch: usize,
    pub source: FeatureSource,
}

impl FeatureGrid {
    pub fn new(data: Array4<f32>, patch: usize, source: FeatureSource) -> Result<Self> {
        let (t, d, h, w) = data.dim();
        crate::ensure!(
            t >= 1 && d >= 1 && h >= 1 && w >= 1,
            "feature grid {:?} has an empty axis",
            data.dim()
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite feature at flat index {i}"
            )));
        }
        Ok(Self {
            data,
            patch,
            source,
        })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn feature_dim(&self) -> usize {
        self.data.dim().1
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    /// Checks that the grid matches a latent of spatial size `(h, w)`.
    pub fn check_latent_alignment(&self, latent_hw: (usize, usize)) -> Result<()> {
        crate::ensure!(
            self.spatial() == latent_hw,
            "feature grid {:?} does not match latent grid {:?}",
            self.spatial(),
            latent_hw
        );
        Ok(())
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        RawTensor::from_array(&self.data.clone().into_dyn()).to_tensor(dtype, device)
    }

    /// Keeps frames `range` (used to cut rollout blocks from a long feature file).
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<Self> {
        crate::ensure!(
            range.end <= self.frames() && range.start < range.end,
            "frame range {range:?} outside 0..{}",
            self.frames()
        );
        Self::new(
            self.data.slice(s![range, .., .., ..]).to_owned(),
            self.patch,
            self.source,
        )
    }
}

pub fn save_features(grid: &FeatureGrid, path: &Path) -> Result<()> {
    tensor_io::save(path, &RawTensor::from_array(&grid.data.clone().into_dyn()))
}

pub fn load_features(path: &Path, patch: usize) -> Result<FeatureGrid> {
    let raw = tensor_io::load(path)?;
    if raw.shape.len() != 4 {
        return Err(Error::parse(
            0,
            format!(
                "feature file has rank {}, expected 4 (T, D, h, w)",
                raw.shape.len()
            ),
        ));
    }
    let a = raw
        .into_array()
        .into_dimensionality()
        .expect("rank checked");
    FeatureGrid::new(a, patch, FeatureSource::File)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub patch: usize,
    pub feature_dim: usize,
    pub upscale: f64,
}

impl EncoderSpec {
    /// Patch 16, 384 channels, 2× upscale.
    pub fn reference() -> Self {
        Self {
            patch: 16,
            feature_dim: 384,
            upscale: 2.0,
        }
    }

    pub fn toy() -> Self {
        Self {
            feature_dim: 32,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::ensure!(self.patch >= 1, "patch must be ≥ 1");
        crate::ensure!(
            self.upscale > 0.0,
            "upscale must be positive, got {}",
            self.upscale
        );
        crate::ensure!(self.feature_dim >= 1, "feature_dim must be ≥ 1");
        Ok(())
    }

    /// Token grid for an `H × W` frame.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |name: &str, n: usize| -> Result<usize> {
            let scaled = scaled_len(n, self.upscale);
            if !scaled.is_multiple_of(self.patch) {
                let pad = self.patch - scaled % self.patch;
                return Err(Error::contract(format!(
                    "{name} {n} upscaled to {scaled} is not a multiple of patch {}; pad by {pad} upscaled pixels",
                    self.patch
                )));
            }
            Ok(scaled / self.patch)
        };
        Ok((axis("height", height)?, axis("width", width)?))
    }
}

fn scaled_len(n: usize, factor: f64) -> usize {
    (n as f64 * factor).ceil() as usize
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps and weights for resampling `n_in` samples to `n_out` (half-pixel centers,
/// clamped borders).
fn bicubic_taps(n_in: usize, n_out: usize, factor: f64) -> Vec<[(usize, f64); 4]> {
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = (base as isize + k as isize - 1).clamp(0, n_in as isize - 1) as usize;
                *tap = (idx, cubic(frac - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Bicubic resize of a `(C, H, W)` frame by `factor` (kernel a = −0.5).
pub fn bicubic_upscale(frame: ArrayView3<f32>, factor: f64) -> Result<Array3<f32>> {
    crate::ensure!(
        factor > 0.0,
        "upscale factor must be positive, got {factor}"
    );
    let (c, h, w) = frame.dim();
    let (oh, ow) = (scaled_len(h, factor), scaled_len(w, factor));
    let tx = bicubic_taps(w, ow, factor);
    let ty = bicubic_taps(h, oh, factor);
    let mut rows = Array3::<f64>::zeros((c, h, ow));
    for ch in 0..c {
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                rows[(ch, y, x)] = taps
                    .iter()
                    .map(|&(i, wt)| wt * frame[(ch, y, i)] as f64)
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                out[(ch, y, x)] = taps
                    .iter()
                    .map(|&(i, wt)| wt * rows[(ch, i, x)])
                    .sum::<f64>() as f32;
            }
        }
    }
    Ok(out)
}

/// Maps one RGB frame to a `(D, h, w)` feature map.
pub trait FrameEncoder: Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode_frame(&self, frame: ArrayView3<f32>) -> Result<Array3<f32>>;
    fn source(&self) -> FeatureSource {
        FeatureSource::External
    }
}

/// Encodes every frame of `video` in parallel.
pub fn encode_frames<E: FrameEncoder + ?Sized>(
    video: &VideoTensor,
    encoder: &E,
) -> Result<FeatureGrid> {
    let spec = *encoder.spec();
    let (h, w) = spec.grid_for(video.height(), video.width())?;
    let frames: Vec<Array3<f32>> = (0..video.frames())
        .into_par_iter()
        .map(|i| encoder.encode_frame(video.frame(i)))
        .collect::<Result<_>>()?;
    let mut out = Array4::<f32>::zeros((video.frames(), spec.feature_dim, h, w));
    for (i, f) in frames.iter().enumerate() {
        crate::ensure!(
            f.dim() == (spec.feature_dim, h, w),
            "encoder returned {:?} for frame {i}, expected {:?}",
            f.dim(),
            (spec.feature_dim, h, w)
        );
        out.index_axis_mut(Axis(0), i).assign(f);
    }
    FeatureGrid::new(out, spec.patch, encoder.source())
}

/// Fixed orthonormal projection of upscaled pixel patches, L2-normalized per token.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    spec: EncoderSpec,
    /// `(D, 3·p²)`, orthonormal rows.
    projection: Array2<f32>,
}

impl ToyEncoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let patch_len = 3 * spec.patch * spec.patch;
        crate::ensure!(
            spec.feature_dim <= patch_len,
            "toy encoder needs feature_dim ≤ 3·patch² = {patch_len}, got {}",
            spec.feature_dim
        );
        let q: DMatrix<f64> = orthonormal_columns(patch_len, spec.feature_dim, seed);
        let projection =
            Array2::from_shape_fn((spec.feature_dim, patch_len), |(d, k)| q[(k, d)] as f32);
        Ok(Self { spec, projection })
    }
}

impl FrameEncoder for ToyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn source(&self) -> FeatureSource {
        FeatureSource::Toy
    }

    fn encode_frame(&self, frame: ArrayView3<f32>) -> Result<Array3<f32>> {
        let (_, fh, fw) = frame.dim();
        let (h, w) = self.spec.grid_for(fh, fw)?;
        let up = bicubic_upscale(frame, self.spec.upscale)?;
        let p = self.spec.patch;
        let d = self.spec.feature_dim;
        let mut out = Array3::<f32>::zeros((d, h, w));
        for i in 0..h {
            for j in 0..w {
                let patch = up.slice(s![.., i * p..(i + 1) * p, j * p..(j + 1) * p]);
                let flat: Vec<f32> = patch.iter().copied().collect();
                let v = self.projection.dot(&ndarray::Array1::from(flat));
                let norm = v.dot(&v).sqrt();
                let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                for k in 0..d {
                    out[(k, i, j)] = v[k] * scale;
                }
            }
        }
        Ok(out)
    }
}

/// Area-average pooling of `factor × factor` cells.
pub fn downscale_features(grid: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    let (t, d, h, w) = grid.data.dim();
    crate::ensure!(factor >= 1, "downscale factor must be ≥ 1");
    crate::ensure!(
        h % factor == 0 && w % factor == 0,
        "feature grid {h}×{w} is not divisible by {factor}"
    );
    if factor == 1 {
        return Ok(grid.clone());
    }
    let n = (factor * factor) as f64;
    let out = Array4::from_shape_fn((t, d, h / factor, w / factor), |(ti, di, i, j)| {
        let cell = grid.data.slice(s![
            ti,
            di,
            i * factor..(i + 1) * factor,
            j * factor..(j + 1) * factor
        ]);
        (cell.iter().map(|&v| v as f64).sum::<f64>() / n) as f32
    });
    FeatureGrid::new(out, grid.patch * factor, grid.source)
}

/// Nearest-neighbour upsampling back to the conditioning resolution.
pub fn upsample_nearest(grid: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    crate::ensure!(factor >= 1, "upsample factor must be ≥ 1");
    let (t, d, h, w) = grid.data.dim();
    let out = Array4::from_shape_fn((t, d, h * factor, w * factor), |(ti, di, i, j)| {
        grid.data[(ti, di, i / factor, j / factor)]
    });
    FeatureGrid::new(out, (grid.patch / factor).max(1), grid.source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct 2-D convolution with the bicubic kernel, written without the
    /// separable tap tables.
    fn bicubic_oracle(img: &Array3<f32>, factor: f64) -> Array3<f32> {
        let (c, h, w) = img.dim();
        let (oh, ow) = (scaled_len(h, factor), scaled_len(w, factor));
        Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
            let sy = (y as f64 + 0.5) / factor - 0.5;
            let sx = (x as f64 + 0.5) / factor - 0.5;
            let mut acc = 0.0;
            for iy in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                for ix in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                    let wy = cubic(sy - iy as f64);
                    let wx = cubic(sx - ix as f64);
                    let cy = iy.clamp(0, h as i64 - 1) as usize;
                    let cx = ix.clamp(0, w as i64 - 1) as usize;
                    acc += wy * wx * img[(ch, cy, cx)] as f64;
                }
            }
            acc as f32
        })
    }

    #[test]
    fn reference_grid_is_60_by_90() {
        assert_eq!(
            EncoderSpec::reference().grid_for(480, 720).unwrap(),
            (60, 90)
        );
        assert_eq!(EncoderSpec::toy().grid_for(32, 48).unwrap(), (4, 6));
        let err = EncoderSpec::toy().grid_for(33, 48).unwrap_err().to_string();
        assert!(err.contains("pad by 14"), "{err}");
    }

    #[test]
    fn factor_one_is_bitwise_identity() {
        let img = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x) % 11) as f32 / 10.0
        });
        assert_eq!(bicubic_upscale(img.view(), 1.0).unwrap(), img);
    }

    #[test]
    fn ramp_matches_direct_convolution_oracle() {
        let ramp = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.25, 0.5, 0.75]).unwrap();
        let got = bicubic_upscale(ramp.view(), 2.0).unwrap();
        let want = bicubic_oracle(&ramp, 2.0);
        assert_eq!(got.dim(), (1, 4, 4));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn constants_survive_any_factor(v in 0f32..1.0, factor in 0.5f64..3.0) {
            let img = Array3::from_elem((2, 4, 6), v);
            let up = bicubic_upscale(img.view(), factor).unwrap();
            prop_assert!(up.iter().all(|x| (x - v).abs() < 1e-6));
        }

        #[test]
        fn random_images_match_oracle(seed in 0u64..1000) {
            let img = VideoTensor::synthetic(1, 6, 5, seed).unwrap().frame(0).to_owned();
            let got = bicubic_upscale(img.view(), 2.0).unwrap();
            let want = bicubic_oracle(&img, 2.0);
            for (a, b) in got.iter().zip(want.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn toy_encoder_is_deterministic_and_constant_on_constant_frames() {
        let enc = ToyEncoder::new(EncoderSpec::toy(), 5).unwrap();
        let v = VideoTensor::new(Array4::from_elem((2, 3, 32, 48), 0.3)).unwrap();
        let f = encode_frames(&v, &enc).unwrap();
        assert_eq!(f.data().dim(), (2, 32, 4, 6));
        let first = f.data().slice(s![0, .., 0, 0]).to_owned();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(f.data().slice(s![1, .., i, j]), first);
            }
        }
        let clip = VideoTensor::synthetic(3, 32, 48, 1).unwrap();
        assert_eq!(
            encode_frames(&clip, &enc).unwrap(),
            encode_frames(&clip, &enc).unwrap()
        );
    }

    #[test]
    fn toy_features_are_unit_norm() {
        let enc = ToyEncoder::new(EncoderSpec::toy(), 5).unwrap();
        let clip = VideoTensor::synthetic(1, 32, 48, 4).unwrap();
        let f = encode_frames(&clip, &enc).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let col = f.data().slice(s![0, .., i, j]);
                assert!((col.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cdkt");
        let enc = ToyEncoder::new(EncoderSpec::toy(), 5).unwrap();
        let grid = encode_frames(&VideoTensor::synthetic(5, 32, 48, 2).unwrap(), &enc).unwrap();
        save_features(&grid, &path).unwrap();
        let back = load_features(&path, 16).unwrap();
        assert_eq!(back.data(), grid.data());
        assert_eq!(back.source, FeatureSource::File);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_features(&path, 16), Err(Error::Parse { .. })));
    }

    #[test]
    fn reference_shape_header_is_accepted() {
        let header =
            serde_json::json!({"dtype": "f32", "shape": [49, 384, 60, 90], "order": "row_major"});
        let h = serde_json::to_vec(&header).unwrap();
        let mut bytes = tensor_io::MAGIC.to_vec();
        bytes.extend_from_slice(&(h.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&h);
        bytes.resize(bytes.len() + 49 * 384 * 60 * 90 * 4, 0);
        let raw = tensor_io::decode(&bytes).unwrap();
        assert_eq!(raw.shape, vec![49, 384, 60, 90]);
    }

    #[test]
    fn downscale_rules() {
        let data = Array4::from_shape_fn((2, 3, 60, 90), |(t, d, i, j)| (t + d + i * j) as f32);
        let g = FeatureGrid::new(data, 16, FeatureSource::Toy).unwrap();
        assert_eq!(downscale_features(&g, 1).unwrap(), g);
        assert_eq!(downscale_features(&g, 2).unwrap().spatial(), (30, 45));
        assert!(downscale_features(&g, 7).is_err());
        let c =
            FeatureGrid::new(Array4::from_elem((1, 2, 4, 6), 0.7), 16, FeatureSource::Toy).unwrap();
        assert_eq!(
            downscale_features(&c, 2).unwrap().data(),
            &Array4::from_elem((1, 2, 2, 3), 0.7f32)
        );
        assert_eq!(
            upsample_nearest(&downscale_features(&c, 2).unwrap(), 2)
                .unwrap()
                .data(),
            c.data()
        );
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let mut a = Array4::<f32>::zeros((1, 1, 1, 1));
        a[(0, 0, 0, 0)] = f32::NAN;
        assert!(FeatureGrid::new(a, 16, FeatureSource::External).is_err());
    }
}
