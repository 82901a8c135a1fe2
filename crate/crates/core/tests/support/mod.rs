//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cdk_core::voxel::{Camera, FeatureVoxelGrid};
use nalgebra::{DMatrix, Vector3, Vector4};

/// Characteristic polynomial coefficients of `a` by Faddeev–LeVerrier,
/// lowest degree first: `det(λI − A) = Σ c_k λ^k`, `c_n = 1`.
pub fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        m = a * &m + DMatrix::identity(n, n) * c[n - k + 1];
        c[n - k] = -(a * &m).trace() / k as f64;
    }
    c
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Real roots of a polynomial with only simple real roots inside `[-bound, bound]`,
/// by dense sign-change bracketing and bisection. Ascending.
pub fn real_roots(c: &[f64], bound: f64) -> Vec<f64> {
    let n = 200_000;
    let xs: Vec<f64> = (0..=n)
        .map(|i| -bound + 2.0 * bound * i as f64 / n as f64)
        .collect();
    let mut roots = Vec::new();
    for w in xs.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (flo, fhi) = (horner(c, lo), horner(c, hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo.signum() == fhi.signum() {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if horner(c, mid).signum() == horner(c, lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    roots
}

/// Eigenvalues of a symmetric matrix from its characteristic polynomial, ascending.
pub fn oracle_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let bound = (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    real_roots(&char_poly(a), bound)
}

/// Entry distance of the ray `o + t d, t ≥ 0` into the closed box, testing each
/// face plane and clipping the hit point to the face.
pub fn ray_box_faces(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<f64> {
    if (0..3).all(|a| o[a] >= lo[a] && o[a] <= hi[a]) {
        return Some(0.0);
    }
    let mut best: Option<f64> = None;
    for a in 0..3 {
        if d[a] == 0.0 {
            continue;
        }
        for plane in [lo[a], hi[a]] {
            let t = (plane - o[a]) / d[a];
            if t < 0.0 {
                continue;
            }
            let inside = (0..3).filter(|&b| b != a).all(|b| {
                let p = o[b] + t * d[b];
                p >= lo[b] && p <= hi[b]
            });
            if inside && best.is_none_or(|bt| t < bt) {
                best = Some(t);
            }
        }
    }
    best
}

/// Every cell tests every voxel; the nearest entry wins, ties to the smallest index.
pub fn brute_render(
    grid: &FeatureVoxelGrid,
    cam: &Camera,
    out: (usize, usize),
) -> (Vec<f32>, Vec<f32>) {
    let w2c = cam.world_to_cam();
    let c2w = w2c.try_inverse().expect("rigid pose");
    let origin = (c2w * Vector4::new(0.0, 0.0, 0.0, 1.0)).xyz();
    let k_inv = cam.intrinsics().try_inverse().expect("intrinsics");
    let d = grid.feature_dim;
    let mut features = vec![0f32; d * out.0 * out.1];
    let mut mask = vec![0f32; out.0 * out.1];
    for i in 0..out.0 {
        for j in 0..out.1 {
            let u = (j as f64 + 0.5) * cam.width as f64 / out.1 as f64;
            let v = (i as f64 + 0.5) * cam.height as f64 / out.0 as f64;
            let pc = k_inv * Vector3::new(u, v, 1.0);
            let pw = (c2w * Vector4::new(pc.x, pc.y, pc.z, 1.0)).xyz();
            let dir = pw - origin;
            let mut best: Option<(f64, (i64, i64, i64))> = None;
            for &idx in grid.cells.keys() {
                let lo = grid.origin
                    + Vector3::new(idx.0 as f64, idx.1 as f64, idx.2 as f64) * grid.voxel_size;
                let hi = lo + Vector3::repeat(grid.voxel_size);
                if let Some(t) = ray_box_faces(&origin, &dir, &lo, &hi) {
                    let better = match best {
                        None => true,
                        Some((bt, bi)) => t < bt || (t == bt && idx < bi),
                    };
                    if better {
                        best = Some((t, idx));
                    }
                }
            }
            if let Some((_, idx)) = best {
                mask[i * out.1 + j] = 1.0;
                for (k, f) in grid.cells[&idx].feature.iter().enumerate() {
                    features[(k * out.0 + i) * out.1 + j] = *f;
                }
            }
        }
    }
    (features, mask)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
