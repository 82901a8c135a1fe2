//! Feature point clouds and sparse feature voxel grids.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use super::Camera;
use crate::features::FeatureGrid;
use crate::{Error, Result};

/// Points in world space carrying one feature row each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePointCloud {
    /// `N × 3`.
    pub positions: Array2<f64>,
    /// `N × D`.
    pub features: Array2<f32>,
    pub weights: Vec<f64>,
}

impl FeaturePointCloud {
    pub fn new(positions: Array2<f64>, features: Array2<f32>) -> Result<Self> {
        crate::ensure!(
            positions.ncols() == 3,
            "positions must be N × 3, got {:?}",
            positions.dim()
        );
        crate::ensure!(
            positions.nrows() == features.nrows(),
            "{} positions but {} feature rows",
            positions.nrows(),
            features.nrows()
        );
        if positions.iter().any(|v| !v.is_finite()) || features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("point cloud has non-finite entries"));
        }
        let n = positions.nrows();
        Ok(Self {
            positions,
            features,
            weights: vec![1.0; n],
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            positions: Array2::zeros((0, 3)),
            features: Array2::zeros((0, feature_dim)),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.positions[(i, 0)],
            self.positions[(i, 1)],
            self.positions[(i, 2)],
        )
    }
}

/// Unprojects every cell with finite positive depth through its frame's camera.
///
/// `depth` is `(T, h, w)` camera-space z at the feature grid resolution.
pub fn lift(
    features: &FeatureGrid,
    depth: &Array3<f64>,
    cameras: &[Camera],
) -> Result<FeaturePointCloud> {
    let (t, d, h, w) = features.data().dim();
    crate::ensure!(
        depth.dim() == (t, h, w),
        "depth {:?} does not match features {:?}",
        depth.dim(),
        (t, h, w)
    );
    crate::ensure!(
        cameras.len() == t,
        "{} cameras for {t} frames",
        cameras.len()
    );
    let mut pos = Vec::new();
    let mut feats = Vec::new();
    for (ti, cam) in cameras.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let z = depth[(ti, i, j)];
                if !(z.is_finite() && z > 0.0) {
                    continue;
                }
                let (u, v) = cam.cell_center(i, j, (h, w));
                let p = cam.center() + cam.ray_direction(u, v) * z;
                pos.extend_from_slice(&[p.x, p.y, p.z]);
                feats.extend((0..d).map(|k| features.data()[(ti, k, i, j)]));
            }
        }
    }
    let n = pos.len() / 3;
    FeaturePointCloud::new(
        Array2::from_shape_vec((n, 3), pos).expect("3 per point"),
        Array2::from_shape_vec((n, d), feats).expect("d per point"),
    )
}

pub type CellIndex = (i64, i64, i64);

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    pub feature: Vec<f32>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVoxelGrid {
    pub voxel_size: f64,
    pub origin: Vector3<f64>,
    pub feature_dim: usize,
    pub cells: BTreeMap<CellIndex, VoxelCell>,
}

pub const DEFAULT_VOXEL_SIZE: f64 = 0.02;

impl FeatureVoxelGrid {
    pub fn empty(voxel_size: f64, origin: Vector3<f64>, feature_dim: usize) -> Self {
        Self {
            voxel_size,
            origin,
            feature_dim,
            cells: BTreeMap::new(),
        }
    }

    pub fn cell_of(&self, p: &Vector3<f64>) -> CellIndex {
        let q = (p - self.origin) / self.voxel_size;
        (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
    }

    /// Axis-aligned bounds `(min, max)` of a cell.
    pub fn cell_bounds(&self, idx: CellIndex) -> (Vector3<f64>, Vector3<f64>) {
        let lo =
            self.origin + Vector3::new(idx.0 as f64, idx.1 as f64, idx.2 as f64) * self.voxel_size;
        (lo, lo + Vector3::repeat(self.voxel_size))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// sha256 over size, origin and cells in index order.
    pub fn canonical_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.voxel_size.to_le_bytes());
        for v in self.origin.iter() {
            h.update(v.to_le_bytes());
        }
        for (idx, cell) in &self.cells {
            for v in [idx.0, idx.1, idx.2] {
                h.update(v.to_le_bytes());
            }
            h.update((cell.count as u64).to_le_bytes());
            for f in &cell.feature {
                h.update(f.to_le_bytes());
            }
        }
        crate::hex(&h.finalize())
    }
}

/// Mean feature per occupied cell. Contributions are summed in a canonical
/// order so the result does not depend on point order.
pub fn voxelize(
    cloud: &FeaturePointCloud,
    voxel_size: f64,
    origin: Vector3<f64>,
) -> Result<FeatureVoxelGrid> {
    crate::ensure!(
        voxel_size > 0.0 && voxel_size.is_finite(),
        "voxel size must be positive, got {voxel_size}"
    );
    let mut grid = FeatureVoxelGrid::empty(voxel_size, origin, cloud.feature_dim());
    let mut members: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
    for i in 0..cloud.len() {
        members
            .entry(grid.cell_of(&cloud.position(i)))
            .or_default()
            .push(i);
    }
    for (idx, mut pts) in members {
        pts.sort_by(|&a, &b| {
            let (ra, rb) = (cloud.features.row(a), cloud.features.row(b));
            ra.iter()
                .zip(rb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut sum = vec![0f64; cloud.feature_dim()];
        for &p in &pts {
            for (s, v) in sum.iter_mut().zip(cloud.features.row(p)) {
                *s += *v as f64;
            }
        }
        let n = pts.len();
        grid.cells.insert(
            idx,
            VoxelCell {
                feature: sum.into_iter().map(|s| (s / n as f64) as f32).collect(),
                count: n,
            },
        );
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSource;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn cloud(points: &[[f64; 3]], feats: &[f32]) -> FeaturePointCloud {
        let d = feats.len() / points.len();
        FeaturePointCloud::new(
            Array2::from_shape_vec((points.len(), 3), points.concat()).unwrap(),
            Array2::from_shape_vec((points.len(), d), feats.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_cell_lifts_to_depth() {
        let cam = Camera::centered(3.0, 3, 3).unwrap();
        let f =
            FeatureGrid::new(Array4::from_elem((1, 2, 3, 3), 1.0), 16, FeatureSource::Toy).unwrap();
        let mut depth = Array3::from_elem((1, 3, 3), f64::NAN);
        depth[(0, 1, 1)] = 2.0;
        let c = lift(&f, &depth, std::slice::from_ref(&cam)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.position(0), Vector3::new(0.0, 0.0, 2.0));
        let none = lift(&f, &Array3::from_elem((1, 3, 3), f64::NAN), &[cam]).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn lift_then_project_returns_cell_centers() {
        let cam = Camera::centered(10.0, 18, 12).unwrap();
        let f = FeatureGrid::new(Array4::zeros((1, 1, 6, 9)), 16, FeatureSource::Toy).unwrap();
        let depth = Array3::from_shape_fn((1, 6, 9), |(_, i, j)| 1.0 + 0.1 * (i + j) as f64);
        let c = lift(&f, &depth, std::slice::from_ref(&cam)).unwrap();
        let mut n = 0;
        for i in 0..6 {
            for j in 0..9 {
                let (u, v, _) = cam.project_point(&c.position(n)).unwrap();
                let (eu, ev) = cam.cell_center(i, j, (6, 9));
                assert!((u - eu).abs() < 1e-9 && (v - ev).abs() < 1e-9);
                n += 1;
            }
        }
    }

    #[test]
    fn mean_and_floor_rules() {
        let c = cloud(
            &[
                [0.001, 0.001, 0.001],
                [0.015, 0.01, 0.005],
                [0.02, 0.0, 0.0],
            ],
            &[1.0, 3.0, 5.0],
        );
        let g = voxelize(&c, 0.02, Vector3::zeros()).unwrap();
        assert_eq!(
            g.cells[&(0, 0, 0)],
            VoxelCell {
                feature: vec![2.0],
                count: 2
            }
        );
        assert_eq!(g.cells[&(1, 0, 0)].count, 1);
        assert!(voxelize(&c, 0.0, Vector3::zeros()).is_err());
    }

    proptest! {
        #[test]
        fn voxelize_ignores_point_order(seed in 0u64..500) {
            use rand::{SeedableRng, seq::SliceRandom, Rng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1]).collect();
            let feats: Vec<f32> = (0..n * 3).map(|_| rng.random::<f32>()).collect();
            let a = voxelize(&cloud(&pts, &feats), 0.03, Vector3::zeros()).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let p2: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
            let f2: Vec<f32> = order.iter().flat_map(|&i| feats[i * 3..i * 3 + 3].to_vec()).collect();
            let b = voxelize(&cloud(&p2, &f2), 0.03, Vector3::zeros()).unwrap();
            prop_assert_eq!(a.canonical_hash(), b.canonical_hash());

            let finer = voxelize(&cloud(&pts, &feats), 0.015, Vector3::zeros()).unwrap();
            prop_assert!(finer.len() >= a.len());
        }
    }
}
