//! Pixel videos, PNG frame IO and the linear latent stub standing in for a VAE.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::LatentVideo;
use crate::{Error, Result};

/// RGB frames `(T, 3, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f32>,
}

impl VideoTensor {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (t, c, _, _) = data.dim();
        crate::ensure!(t >= 1, "video must have at least one frame");
        crate::ensure!(c == 3, "video must have 3 channels, got {c}");
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    /// Applies `f` to every frame and restacks; `f` must preserve the frame shape.
    pub fn map_frames(&self, mut f: impl FnMut(ArrayView3<f32>) -> Array3<f32>) -> Result<Self> {
        let mut out = self.data.clone();
        for (i, mut dst) in out.outer_iter_mut().enumerate() {
            let frame = f(self.data.index_axis(Axis(0), i));
            crate::ensure!(
                frame.dim() == dst.dim(),
                "frame transform changed shape {:?} -> {:?}",
                dst.dim(),
                frame.dim()
            );
            dst.assign(&frame);
        }
        Self::new(out)
    }

    /// A deterministic toy clip: a smooth background with two drifting blocks.
    pub fn synthetic(frames: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || -> f32 {
            let z: f64 = StandardNormal.sample(&mut rng);
            (0.5 + 0.15 * z).clamp(0.05, 0.95) as f32
        };
        let bg = [u(), u(), u()];
        let blocks = [[u(), u(), u()], [u(), u(), u()]];
        let starts = [
            (u() * height as f32, u() * width as f32),
            (u() * height as f32, u() * width as f32),
        ];
        let (bh, bw) = ((height / 3).max(1), (width / 4).max(1));
        let data = Array4::from_shape_fn((frames, 3, height, width), |(t, c, y, x)| {
            let mut v = bg[c] * (0.6 + 0.4 * y as f32 / height.max(1) as f32);
            for (k, (sy, sx)) in starts.iter().enumerate() {
                let dir = if k == 0 { 1.0 } else { -1.0 };
                let oy = (*sy as isize + (t as isize / 3) * dir as isize)
                    .rem_euclid(height as isize) as usize;
                let ox =
                    (*sx as isize + t as isize * dir as isize).rem_euclid(width as isize) as usize;
                let dy = (y + height - oy) % height;
                let dx = (x + width - ox) % width;
                if dy < bh && dx < bw {
                    v = blocks[k][c];
                }
            }
            v.clamp(0.0, 1.0)
        });
        Self::new(data)
    }

    /// Writes `frames/%06d.png` under `dir`.
    pub fn save_pngs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        (0..self.frames())
            .map(|i| {
                let path = frame_path(dir, i);
                save_png(self.frame(i), &path)?;
                Ok(path)
            })
            .collect()
    }

    /// Reads consecutive `%06d.png` frames from `dir`, starting at 0.
    pub fn load_pngs(dir: &Path, frames: usize) -> Result<Self> {
        crate::ensure!(frames >= 1, "need at least one frame");
        let mut out: Option<Array4<f32>> = None;
        for i in 0..frames {
            let f = load_png(&frame_path(dir, i))?;
            let dst = out.get_or_insert_with(|| {
                let (c, h, w) = f.dim();
                Array4::zeros((frames, c, h, w))
            });
            crate::ensure!(
                dst.slice(s![i, .., .., ..]).dim() == f.dim(),
                "frame {i} has shape {:?}, expected {:?}",
                f.dim(),
                dst.slice(s![i, .., .., ..]).dim()
            );
            dst.slice_mut(s![i, .., .., ..]).assign(&f);
        }
        Self::new(out.expect("frames >= 1"))
    }

    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.mapv(|v| quantize(v) as f32 / 255.0),
        }
    }
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(frame: ArrayView3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dim();
    crate::ensure!(c == 3, "PNG frames need 3 channels, got {c}");
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            quantize(frame[(0, y, x)]),
            quantize(frame[(1, y, x)]),
            quantize(frame[(2, y, x)]),
        ])
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Linear latent stub: frame 0 alone, then groups of `temporal` frames are
/// averaged; `spatial × spatial` pixel blocks are averaged; RGB mapped to
/// `[-1, 1]` is projected by a fixed matrix with orthonormal columns.
///
/// `decode` is the exact pseudo-inverse: `encode(decode(z)) = z` whenever
/// each latent pixel lies in the span of the projection.
#[derive(Debug, Clone)]
pub struct VaeStub {
    pub spatial: usize,
    pub temporal: usize,
    /// `(latent_channels, 3)`, orthonormal columns.
    projection: DMatrix<f64>,
}

impl VaeStub {
    pub fn new(latent_channels: usize, seed: u64) -> Result<Self> {
        crate::ensure!(
            latent_channels >= 3,
            "latent stub needs at least 3 channels, got {latent_channels}"
        );
        Ok(Self {
            spatial: 8,
            temporal: 4,
            projection: orthonormal_columns(latent_channels, 3, seed),
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.projection.nrows()
    }

    pub fn latent_dims(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        crate::ensure!(
            frames >= 1 && (frames - 1).is_multiple_of(self.temporal),
            "T = {frames} frames must satisfy T ≡ 1 (mod {})",
            self.temporal
        );
        crate::ensure!(
            height.is_multiple_of(self.spatial) && width.is_multiple_of(self.spatial),
            "frame size {height}×{width} is not a multiple of {}",
            self.spatial
        );
        Ok((
            1 + (frames - 1) / self.temporal,
            self.latent_channels(),
            height / self.spatial,
            width / self.spatial,
        ))
    }

    fn temporal_groups(&self, frames: usize) -> Vec<std::ops::Range<usize>> {
        std::iter::once(0..1)
            .chain(
                (1..frames)
                    .step_by(self.temporal)
                    .map(|s| s..s + self.temporal),
            )
            .collect()
    }

    pub fn encode(&self, video: &VideoTensor, device: &Device) -> Result<LatentVideo> {
        let (tl, cl, hl, wl) = self.latent_dims(video.frames(), video.height(), video.width())?;
        let x = video.data();
        let sp = self.spatial;
        let mut out = Array4::<f32>::zeros((tl, cl, hl, wl));
        for (li, range) in self.temporal_groups(video.frames()).into_iter().enumerate() {
            let n = (range.len() * sp * sp) as f64;
            for i in 0..hl {
                for j in 0..wl {
                    let mut rgb = [0f64; 3];
                    for (c, acc) in rgb.iter_mut().enumerate() {
                        let block = x.slice(s![
                            range.clone(),
                            c,
                            i * sp..(i + 1) * sp,
                            j * sp..(j + 1) * sp
                        ]);
                        *acc = block.iter().map(|&v| (v as f64 - 0.5) * 2.0).sum::<f64>() / n;
                    }
                    for k in 0..cl {
                        let z: f64 = (0..3).map(|c| self.projection[(k, c)] * rgb[c]).sum();
                        out[(li, k, i, j)] = z as f32;
                    }
                }
            }
        }
        let t = Tensor::from_vec(out.into_raw_vec_and_offset().0, (tl, cl, hl, wl), device)?;
        LatentVideo::new(t)
    }

    /// Latent `(T', C, h, w)` to pixel frames `1 + temporal·(T' − 1)`, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<VideoTensor> {
        let (tl, cl, hl, wl) = latent.dims4()?;
        crate::ensure!(
            cl == self.latent_channels(),
            "latent has {cl} channels, stub expects {}",
            self.latent_channels()
        );
        let z = latent
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let plane = hl * wl;
        let frames = 1 + self.temporal * (tl - 1);
        let sp = self.spatial;
        let mut rgb_small = Array4::<f32>::zeros((tl, 3, hl, wl));
        for li in 0..tl {
            for p in 0..plane {
                for c in 0..3 {
                    let v: f64 = (0..cl)
                        .map(|k| self.projection[(k, c)] * z[(li * cl + k) * plane + p])
                        .sum();
                    rgb_small[(li, c, p / wl, p % wl)] = ((v / 2.0 + 0.5).clamp(0.0, 1.0)) as f32;
                }
            }
        }
        let data = Array4::from_shape_fn((frames, 3, hl * sp, wl * sp), |(t, c, y, x)| {
            let li = if t == 0 {
                0
            } else {
                1 + (t - 1) / self.temporal
            };
            rgb_small[(li, c, y / sp, x / sp)]
        });
        VideoTensor::new(data)
    }
}

/// Orthonormal `rows × cols` frame from the QR factorization of a seeded Gaussian matrix.
pub(crate) fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q.columns(0, cols).into_owned();
    // Fix the sign ambiguity so the frame is a deterministic function of the seed.
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
