//! Pinhole cameras: x right, y down, z forward; pixel centers at half-integers.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        world_to_cam: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        crate::ensure!(width >= 1 && height >= 1, "camera image must be non-empty");
        crate::ensure!(
            k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0,
            "intrinsics must be upper-triangular with K[2][2] = 1"
        );
        crate::ensure!(
            k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0,
            "focal lengths must be positive"
        );
        let bottom = world_to_cam.fixed_view::<1, 4>(3, 0).into_owned();
        crate::ensure!(
            bottom == nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0),
            "world_to_cam bottom row must be [0, 0, 0, 1]"
        );
        let rotation: Matrix3<f64> = world_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if ortho > 1e-8 || (rotation.determinant() - 1.0).abs() > 1e-8 {
            return Err(Error::contract(format!(
                "pose rotation is not orthonormal with det +1 (RᵀR error {ortho:.2e}, det {:.6})",
                rotation.determinant()
            )));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::contract("intrinsics are singular"))?;
        Ok(Self {
            k,
            k_inv,
            rotation,
            translation: world_to_cam.fixed_view::<3, 1>(0, 3).into_owned(),
            width,
            height,
        })
    }

    /// Identity pose with focal `f` and the principal point at the image center.
    pub fn centered(f: f64, width: usize, height: usize) -> Result<Self> {
        let k = Matrix3::new(
            f,
            0.0,
            width as f64 / 2.0,
            0.0,
            f,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, Matrix4::identity(), width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn world_to_cam(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// World-space ray direction through pixel `(u, v)`, scaled so its camera-space z is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        self.rotation.transpose() * (self.k_inv * Vector3::new(u, v, 1.0))
    }

    /// Pixel coordinates of the center of output cell `(i, j)` on an `h × w` grid.
    pub fn cell_center(&self, i: usize, j: usize, grid: (usize, usize)) -> (f64, f64) {
        let u = (j as f64 + 0.5) * self.width as f64 / grid.1 as f64;
        let v = (i as f64 + 0.5) * self.height as f64 / grid.0 as f64;
        (u, v)
    }

    /// `(u, v, depth)` for points in front of the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let q = self.k * (c / c.z);
        Some((q.x, q.y, c.z))
    }
}

/// JSON form: `{K: 9 floats row-major, world_to_cam: 16 floats row-major, width, height}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    pub world_to_cam: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut k = [0.0; 9];
        let mut m = [0.0; 16];
        let w2c = c.world_to_cam();
        for r in 0..3 {
            for col in 0..3 {
                k[r * 3 + col] = c.k[(r, col)];
            }
        }
        for r in 0..4 {
            for col in 0..4 {
                m[r * 4 + col] = w2c[(r, col)];
            }
        }
        Self {
            k,
            world_to_cam: m,
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        Camera::new(
            Matrix3::from_row_slice(&r.k),
            Matrix4::from_row_slice(&r.world_to_cam),
            r.width,
            r.height,
        )
    }
}

pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| Camera::try_from(r).map_err(|e| Error::contract(format!("camera {i}: {e}"))))
        .collect()
}

pub fn cameras_to_json(cameras: &[Camera]) -> Result<String> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn rejects_bad_poses_and_intrinsics() {
        let k = Matrix3::new(10.0, 0.0, 5.0, 0.0, 10.0, 5.0, 0.0, 0.0, 1.0);
        let mut skewed = Matrix4::identity();
        skewed[(0, 0)] = 1.1;
        assert!(Camera::new(k, skewed, 10, 10).is_err());
        let mut flip = Matrix4::identity();
        flip[(2, 2)] = -1.0;
        assert!(Camera::new(k, flip, 10, 10).is_err());
        assert!(Camera::new(-k, Matrix4::identity(), 10, 10).is_err());
    }

    #[test]
    fn projection_round_trips_through_rays() {
        let rot = Rotation3::from_euler_angles(0.1, -0.2, 0.3).to_homogeneous();
        let mut pose = rot;
        pose[(0, 3)] = 0.5;
        pose[(2, 3)] = 2.0;
        let k = Matrix3::new(20.0, 0.0, 9.0, 0.0, 22.0, 6.0, 0.0, 0.0, 1.0);
        let cam = Camera::new(k, pose, 18, 12).unwrap();
        let p = Vector3::new(0.3, -0.2, 1.0);
        let (u, v, d) = cam.project_point(&p).unwrap();
        let back = cam.center() + cam.ray_direction(u, v) * d;
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let cam = Camera::centered(12.0, 18, 12).unwrap();
        let text = cameras_to_json(std::slice::from_ref(&cam)).unwrap();
        assert_eq!(cameras_from_json(&text).unwrap(), vec![cam]);
    }
}
