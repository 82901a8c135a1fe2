//! 3-D conditioning: lift features to points, voxelize them and render the
//! result into target views with hole masks.

mod camera;
mod grid;
mod render;

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array4};

pub use camera::{cameras_from_json, cameras_to_json, Camera, CameraRecord};
pub use grid::{
    lift, voxelize, CellIndex, FeaturePointCloud, FeatureVoxelGrid, VoxelCell, DEFAULT_VOXEL_SIZE,
};
pub use render::{
    mask_to_latent, ray_aabb, render_points, render_voxel_views, render_voxels, RenderedView,
};

use crate::control::ControlMask;
use crate::features::{FeatureGrid, FeatureSource};
use crate::tensor_io::{self, RawTensor};
use crate::{Error, Result};

/// Stacks rendered views into a `(T, D, h, w)` feature grid and `(T, h, w)` masks.
pub fn stack_views(views: &[RenderedView]) -> Result<(FeatureGrid, Array2<f32>, Vec<Array2<f32>>)> {
    crate::ensure!(!views.is_empty(), "no views to stack");
    let (d, h, w) = views[0].features.dim();
    let mut data = Array4::<f32>::zeros((views.len(), d, h, w));
    for (t, v) in views.iter().enumerate() {
        crate::ensure!(
            v.features.dim() == (d, h, w),
            "view {t} has shape {:?}",
            v.features.dim()
        );
        data.index_axis_mut(ndarray::Axis(0), t).assign(&v.features);
    }
    let union = views
        .iter()
        .fold(Array2::<f32>::zeros((h, w)), |acc, v| acc + &v.mask)
        .mapv(|m| m.min(1.0));
    Ok((
        FeatureGrid::new(data, 1, FeatureSource::External)?,
        union,
        views.iter().map(|v| v.mask.clone()).collect(),
    ))
}

/// Per-frame masks `(h, w)` at feature resolution to a token-grid control mask.
///
/// Latent frame 0 covers pixel frame 0 and latent frame `k` covers frames
/// `4k − 3 ..= 4k`; coverage is averaged over frames and cells, then `≥ 0.5 → 1`.
pub fn masks_to_control(
    masks: &[Array2<f32>],
    temporal: usize,
    patch: usize,
    device: &Device,
) -> Result<ControlMask> {
    crate::ensure!(
        !masks.is_empty() && (masks.len() - 1).is_multiple_of(temporal),
        "{} mask frames do not satisfy T ≡ 1 (mod {temporal})",
        masks.len()
    );
    let (h, w) = masks[0].dim();
    crate::ensure!(
        h % patch == 0 && w % patch == 0,
        "mask {h}×{w} not divisible by patch {patch}"
    );
    let groups: Vec<std::ops::Range<usize>> = std::iter::once(0..1)
        .chain((1..masks.len()).step_by(temporal).map(|s| s..s + temporal))
        .collect();
    let mut out = Vec::with_capacity(groups.len() * (h / patch) * (w / patch));
    for g in &groups {
        let n = g.len() as f32;
        let mean = g
            .clone()
            .fold(Array2::<f32>::zeros((h, w)), |acc, t| acc + &masks[t])
            / n;
        out.extend(
            mask_to_latent(&mean, (h / patch, w / patch))?
                .iter()
                .copied(),
        );
    }
    let t = Tensor::from_vec(out, (groups.len(), 1, h / patch, w / patch), device)?
        .to_dtype(DType::F32)?;
    ControlMask::new(t)
}

/// Writes binary little-endian PLY with float32 `x y z`.
pub fn write_ply(path: &Path, positions: &Array2<f64>) -> Result<()> {
    crate::ensure!(positions.ncols() == 3, "positions must be N × 3");
    let mut f = fs::File::create(path)?;
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        positions.nrows()
    )?;
    let mut buf = Vec::with_capacity(positions.len() * 4);
    for v in positions.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::parse(0, "PLY header has no end_header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::parse(0, "PLY header is not ASCII"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::parse(0, "missing `ply` magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut offset = 4u64;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] | ["end_header"] => {}
            ["format", other, ..] => {
                return Err(Error::parse(
                    offset,
                    format!("unsupported PLY format `{other}`"),
                ))
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::parse(offset, format!("bad vertex count `{n}`")))?,
                )
            }
            ["property", "float", name] => props.push(name.to_string()),
            _ => {
                return Err(Error::parse(
                    offset,
                    format!("unsupported PLY header line `{line}`"),
                ))
            }
        }
        offset += line.len() as u64 + 1;
    }
    if props != ["x", "y", "z"] {
        return Err(Error::parse(
            0,
            format!("expected float x y z properties, found {props:?}"),
        ));
    }
    let n = count.ok_or_else(|| Error::parse(0, "PLY header has no vertex element"))?;
    let body = &bytes[end..];
    if body.len() != n * 12 {
        return Err(Error::parse(
            (end + body.len().min(n * 12)) as u64,
            format!(
                "expected {} bytes of vertex data, found {}",
                n * 12,
                body.len()
            ),
        ));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n, 3), vals).expect("length checked"))
}

/// Loads a PLY cloud and its row-paired `N × D` feature tensor.
pub fn load_cloud(ply: &Path, features: &Path) -> Result<FeaturePointCloud> {
    let positions = read_ply(ply)?;
    let raw = tensor_io::load(features)?;
    crate::ensure!(
        raw.shape.len() == 2,
        "point features must be N × D, got {:?}",
        raw.shape
    );
    let f = raw
        .into_array()
        .into_dimensionality()
        .expect("rank checked");
    FeaturePointCloud::new(positions, f)
}

pub fn save_cloud(cloud: &FeaturePointCloud, ply: &Path, features: &Path) -> Result<()> {
    write_ply(ply, &cloud.positions)?;
    tensor_io::save(
        features,
        &RawTensor::from_array(&cloud.features.clone().into_dyn()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let pos = ndarray::array![[0.5, -1.25, 2.0], [0.0, 0.0, 1.0]];
        write_ply(&p, &pos).unwrap();
        assert_eq!(read_ply(&p).unwrap(), pos);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_ply(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn control_mask_from_frames() {
        let full = Array2::<f32>::ones((4, 6));
        let empty = Array2::<f32>::zeros((4, 6));
        let masks = vec![
            full.clone(),
            full.clone(),
            full.clone(),
            empty.clone(),
            empty,
        ];
        let m = masks_to_control(&masks, 4, 2, &Device::Cpu).unwrap();
        assert_eq!(m.grid(), (2, 2, 3));
        let v = m.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
        assert!(masks_to_control(&masks[..4], 4, 2, &Device::Cpu).is_err());
    }
}
