//! Z-buffered rendering of voxel grids and point clouds at conditioning resolution.

use nalgebra::Vector3;
use ndarray::{s, Array2, Array3};
use rayon::prelude::*;

use super::{Camera, CellIndex, FeaturePointCloud, FeatureVoxelGrid};
use crate::Result;

/// One rendered view: features `(D, h, w)` and mask `(h, w)` (1 valid, 0 hole).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub features: Array3<f32>,
    pub mask: Array2<f32>,
}

impl RenderedView {
    fn holes(d: usize, grid: (usize, usize)) -> Self {
        Self {
            features: Array3::zeros((d, grid.0, grid.1)),
            mask: Array2::zeros(grid),
        }
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

/// Ray–box slab test. Returns the entry distance clamped at 0 when the ray
/// `o + t·d, t ≥ 0` touches the closed box.
pub fn ray_aabb(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo[a] - o[a]) / d[a];
        let t2 = (hi[a] - o[a]) / d[a];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    if t_near > t_far || t_far < 0.0 {
        return None;
    }
    Some(t_near.max(0.0))
}

/// Output cells `(i0..i1, j0..j1)` that may see a cell, from its projected
/// corners widened by one cell. `None` when a corner is behind the camera.
fn screen_bounds(
    grid: &FeatureVoxelGrid,
    idx: CellIndex,
    cam: &Camera,
    out: (usize, usize),
) -> Option<(usize, usize, usize, usize)> {
    let (lo, hi) = grid.cell_bounds(idx);
    let (mut umin, mut umax, mut vmin, mut vmax) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for c in 0..8 {
        let p = Vector3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        );
        let (u, v, _) = cam.project_point(&p)?;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let (cw, ch) = (
        cam.width as f64 / out.1 as f64,
        cam.height as f64 / out.0 as f64,
    );
    let j0 = ((umin / cw).floor() - 1.0).max(0.0) as usize;
    let i0 = ((vmin / ch).floor() - 1.0).max(0.0) as usize;
    let j1 = ((umax / cw).ceil() + 1.0).clamp(0.0, out.1 as f64) as usize;
    let i1 = ((vmax / ch).ceil() + 1.0).clamp(0.0, out.0 as f64) as usize;
    Some((i0, i1, j0, j1))
}

/// Each output cell takes the feature of the nearest voxel cube hit by the ray
/// through its center; equal depths go to the smallest `(i, j, k)`.
pub fn render_voxels(
    grid: &FeatureVoxelGrid,
    cam: &Camera,
    out: (usize, usize),
) -> Result<RenderedView> {
    crate::ensure!(out.0 >= 1 && out.1 >= 1, "output grid must be non-empty");
    let mut view = RenderedView::holes(grid.feature_dim, out);
    if grid.is_empty() {
        return Ok(view);
    }
    let origin = cam.center();
    let rays: Vec<Vector3<f64>> = (0..out.0 * out.1)
        .map(|c| {
            let (u, v) = cam.cell_center(c / out.1, c % out.1, out);
            cam.ray_direction(u, v)
        })
        .collect();
    let mut best: Vec<Option<(f64, CellIndex)>> = vec![None; out.0 * out.1];
    // BTreeMap iteration is in index order, so strict `<` keeps the smallest index on ties.
    for &idx in grid.cells.keys() {
        let (lo, hi) = grid.cell_bounds(idx);
        let (i0, i1, j0, j1) = screen_bounds(grid, idx, cam, out).unwrap_or((0, out.0, 0, out.1));
        for i in i0..i1 {
            for j in j0..j1 {
                let c = i * out.1 + j;
                if let Some(t) = ray_aabb(&origin, &rays[c], &lo, &hi) {
                    if best[c].is_none_or(|(bt, _)| t < bt) {
                        best[c] = Some((t, idx));
                    }
                }
            }
        }
    }
    for (c, hit) in best.iter().enumerate() {
        if let Some((_, idx)) = hit {
            let (i, j) = (c / out.1, c % out.1);
            view.mask[(i, j)] = 1.0;
            for (k, v) in grid.cells[idx].feature.iter().enumerate() {
                view.features[(k, i, j)] = *v;
            }
        }
    }
    Ok(view)
}

/// Renders one view per camera in parallel.
pub fn render_voxel_views(
    grid: &FeatureVoxelGrid,
    cameras: &[Camera],
    out: (usize, usize),
) -> Result<Vec<RenderedView>> {
    cameras
        .par_iter()
        .map(|c| render_voxels(grid, c, out))
        .collect()
}

/// Splats each point over output cells within `radius` cells of the one its
/// projection lands in; the nearest depth wins, then the lower point index.
pub fn render_points(
    cloud: &FeaturePointCloud,
    cam: &Camera,
    out: (usize, usize),
    radius: usize,
) -> Result<RenderedView> {
    crate::ensure!(out.0 >= 1 && out.1 >= 1, "output grid must be non-empty");
    let mut view = RenderedView::holes(cloud.feature_dim(), out);
    let mut depth = Array2::from_elem(out, f64::INFINITY);
    let mut owner = Array2::from_elem(out, usize::MAX);
    let (cw, ch) = (
        cam.width as f64 / out.1 as f64,
        cam.height as f64 / out.0 as f64,
    );
    let r = radius as i64;
    for p in 0..cloud.len() {
        let Some((u, v, z)) = cam.project_point(&cloud.position(p)) else {
            continue;
        };
        let (ci, cj) = ((v / ch).floor() as i64, (u / cw).floor() as i64);
        for di in -r..=r {
            for dj in -r..=r {
                if di * di + dj * dj > r * r {
                    continue;
                }
                let (i, j) = (ci + di, cj + dj);
                if i < 0 || j < 0 || i >= out.0 as i64 || j >= out.1 as i64 {
                    continue;
                }
                let (i, j) = (i as usize, j as usize);
                if z < depth[(i, j)] {
                    depth[(i, j)] = z;
                    owner[(i, j)] = p;
                }
            }
        }
    }
    for ((i, j), &p) in owner.indexed_iter() {
        if p != usize::MAX {
            view.mask[(i, j)] = 1.0;
            view.features
                .slice_mut(s![.., i, j])
                .assign(&cloud.features.row(p));
        }
    }
    Ok(view)
}

/// Area-average of a high-resolution mask onto `grid`, then `≥ 0.5 → 1`.
pub fn mask_to_latent(mask: &Array2<f32>, grid: (usize, usize)) -> Result<Array2<f32>> {
    let (h, w) = mask.dim();
    crate::ensure!(
        grid.0 >= 1 && grid.1 >= 1 && h % grid.0 == 0 && w % grid.1 == 0,
        "mask {h}×{w} is not a multiple of {}×{}",
        grid.0,
        grid.1
    );
    let (fh, fw) = (h / grid.0, w / grid.1);
    Ok(Array2::from_shape_fn(grid, |(i, j)| {
        let block = mask.slice(s![i * fh..(i + 1) * fh, j * fw..(j + 1) * fw]);
        let mean = block.iter().map(|&v| v as f64).sum::<f64>() / (fh * fw) as f64;
        if mean >= 0.5 {
            1.0
        } else {
            0.0
        }
    }))
}
