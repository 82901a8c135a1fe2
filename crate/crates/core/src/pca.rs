//! Projection bases for feature analysis: standard PCA, style-invariant PCA,
//! tail-dropped, bottom-eigenvector and random orthogonal bases.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::FeatureGrid;
use crate::{Error, Result};

/// Row-per-sample feature matrix `M × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
    centered: bool,
}

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        crate::ensure!(
            rows.nrows() >= 2,
            "need at least 2 rows, got {}",
            rows.nrows()
        );
        crate::ensure!(rows.ncols() >= 1, "need at least 1 column");
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("feature matrix has non-finite entries"));
        }
        Ok(Self {
            rows,
            centered: false,
        })
    }

    /// One row per `(frame, cell)` of a feature grid.
    pub fn from_grid(grid: &FeatureGrid) -> Result<Self> {
        let (t, d, h, w) = grid.data().dim();
        let a = grid.data();
        Self::new(DMatrix::from_fn(t * h * w, d, |r, c| {
            let (ti, rem) = (r / (h * w), r % (h * w));
            a[(ti, c, rem / w, rem % w)] as f64
        }))
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn centered(&self) -> Self {
        let mean = self.rows.row_mean();
        let mut rows = self.rows.clone();
        for mut r in rows.row_iter_mut() {
            r -= &mean;
        }
        Self {
            rows,
            centered: true,
        }
    }

    /// `(1/M) XcᵀXc` of the centered rows.
    pub fn covariance(&self) -> DMatrix<f64> {
        let c = self.centered();
        c.rows.transpose() * &c.rows / self.samples() as f64
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending. Each vector's
/// largest-magnitude entry is positive.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m.nrows(), m.ncols());
    for (j, &i) in order.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    fix_signs(&mut vectors);
    (values, vectors)
}

fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let pivot = col.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    StandardPca,
    StyleInvariant,
    BottomEigen,
    RandomOrthogonal,
}

/// Orthonormal columns `D × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub vectors: DMatrix<f64>,
    pub kind: BasisKind,
    pub explained_variance_pct: f64,
}

impl ProjectionBasis {
    pub fn k(&self) -> usize {
        self.vectors.ncols()
    }

    /// Largest deviation of `VᵀV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.vectors.transpose() * &self.vectors - DMatrix::identity(self.k(), self.k()))
            .abs()
            .max()
    }

    /// Maps rows into basis coordinates, `M × K`.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.vectors
    }

    /// Projects onto the span and back, `M × D`.
    pub fn reconstruct(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.project(x) * self.vectors.transpose()
    }
}

/// Share of the variance of `x` captured by the span of `v`, in percent.
pub fn explained_variance(v: &DMatrix<f64>, x: &FeatureMatrix) -> f64 {
    let c = x.covariance();
    let total = c.trace();
    if total <= 0.0 {
        return 0.0;
    }
    ((v.transpose() * &c * v).trace() / total * 100.0).clamp(0.0, 100.0)
}

fn check_k(x: &FeatureMatrix, k: usize) -> Result<()> {
    let max = (x.samples() - 1).min(x.dim());
    crate::ensure!(k >= 1 && k <= max, "K = {k} outside 1..={max}");
    Ok(())
}

fn eigen_share(values: &[f64], range: std::ops::Range<usize>) -> f64 {
    let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    (clipped[range].iter().sum::<f64>() / total * 100.0).clamp(0.0, 100.0)
}

pub fn standard_pca(x: &FeatureMatrix, k: usize) -> Result<ProjectionBasis> {
    check_k(x, k)?;
    let (values, vectors) = sorted_eigen(&x.covariance());
    Ok(ProjectionBasis {
        vectors: vectors.columns(0, k).into_owned(),
        kind: BasisKind::StandardPca,
        explained_variance_pct: eigen_share(&values, 0..k),
    })
}

pub fn bottom_eigen_basis(x: &FeatureMatrix, k: usize) -> Result<ProjectionBasis> {
    check_k(x, k)?;
    let d = x.dim();
    let (values, vectors) = sorted_eigen(&x.covariance());
    Ok(ProjectionBasis {
        vectors: vectors.columns(d - k, k).into_owned(),
        kind: BasisKind::BottomEigen,
        explained_variance_pct: eigen_share(&values, d - k..d),
    })
}

/// Random orthonormal `K`-frame in the feature space of `x` (QR of a Gaussian matrix).
pub fn random_orthogonal_basis<R: Rng + ?Sized>(
    x: &FeatureMatrix,
    k: usize,
    rng: &mut R,
) -> Result<ProjectionBasis> {
    let d = x.dim();
    crate::ensure!(k >= 1 && k <= d, "K = {k} outside 1..={d}");
    let g = DMatrix::<f64>::from_fn(d, k, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut v = q.columns(0, k).into_owned();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    Ok(ProjectionBasis {
        explained_variance_pct: explained_variance(&v, x),
        vectors: v,
        kind: BasisKind::RandomOrthogonal,
    })
}

pub const TAIL_DROP_BASE: usize = 64;
pub const TAIL_DROP_CHOICES: [usize; 4] = [8, 16, 32, 64];

/// Draws the retained prefix length used at a training step.
pub fn sample_tail_k<R: Rng + ?Sized>(rng: &mut R) -> usize {
    TAIL_DROP_CHOICES[rng.random_range(0..TAIL_DROP_CHOICES.len())]
}

/// First `k` columns of the 64-component PCA basis.
pub fn tail_drop_basis(x: &FeatureMatrix, k: usize) -> Result<ProjectionBasis> {
    crate::ensure!(
        TAIL_DROP_CHOICES.contains(&k),
        "tail-drop k = {k} not in {TAIL_DROP_CHOICES:?}"
    );
    check_k(x, TAIL_DROP_BASE)?;
    let (values, vectors) = sorted_eigen(&x.covariance());
    let full = vectors.columns(0, TAIL_DROP_BASE);
    Ok(ProjectionBasis {
        vectors: full.columns(0, k).into_owned(),
        kind: BasisKind::StandardPca,
        explained_variance_pct: eigen_share(&values, 0..k),
    })
}

/// Top style directions `V_k` of the uncentered difference covariance `S = (1/M) DᵀD`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleDirections {
    /// `D × K_style`.
    pub top: DMatrix<f64>,
    /// Orthonormal complement, `D × (D − K_style)`; spans `range(P)`.
    pub complement: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl StyleDirections {
    pub fn fit(real: &FeatureMatrix, styled: &FeatureMatrix, k_style: usize) -> Result<Self> {
        crate::ensure!(
            real.rows.shape() == styled.rows.shape(),
            "real {:?} and styled {:?} features are not row-paired",
            real.rows.shape(),
            styled.rows.shape()
        );
        let d = real.dim();
        crate::ensure!(k_style <= d, "K_style = {k_style} exceeds D = {d}");
        let diff = &real.rows - &styled.rows;
        let s = diff.transpose() * &diff / real.samples() as f64;
        if s.abs().max() <= f64::EPSILON * d as f64 {
            return Err(Error::numeric("zero style covariance"));
        }
        let (eigenvalues, vectors) = sorted_eigen(&s);
        Ok(Self {
            top: vectors.columns(0, k_style).into_owned(),
            complement: vectors.columns(k_style, d - k_style).into_owned(),
            eigenvalues,
        })
    }

    /// `P = I − V_k V_kᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        let d = self.top.nrows();
        DMatrix::identity(d, d) - &self.top * self.top.transpose()
    }
}

/// PCA of the style-cleaned features, computed inside `range(P)` so the result
/// is orthogonal to the removed directions. Explained variance is measured
/// against the raw real features.
pub fn style_invariant_basis(
    real: &FeatureMatrix,
    styled: &FeatureMatrix,
    k_style: usize,
    d_out: usize,
) -> Result<(ProjectionBasis, StyleDirections)> {
    let d = real.dim();
    crate::ensure!(
        d_out >= 1 && k_style + d_out <= d,
        "K_style + D_out = {} exceeds D = {d}",
        k_style + d_out
    );
    let dirs = StyleDirections::fit(real, styled, k_style)?;
    let q = &dirs.complement;
    let reduced = q.transpose() * real.covariance() * q;
    let (_, w) = sorted_eigen(&reduced);
    let mut v = q * w.columns(0, d_out);
    fix_signs(&mut v);
    let basis = ProjectionBasis {
        explained_variance_pct: explained_variance(&v, real),
        vectors: v,
        kind: BasisKind::StyleInvariant,
    };
    Ok((basis, dirs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub cosine_similarity: f64,
    pub explained_variance_pct: f64,
    /// Rows skipped because a projection had zero norm.
    pub excluded_rows: usize,
}

/// Mean cosine between projected real and styled rows.
pub fn disentanglement_report(
    real: &FeatureMatrix,
    styled: &FeatureMatrix,
    basis: &ProjectionBasis,
) -> Result<DisentanglementReport> {
    crate::ensure!(
        real.rows.shape() == styled.rows.shape(),
        "real {:?} and styled {:?} features are not row-paired",
        real.rows.shape(),
        styled.rows.shape()
    );
    let a = basis.project(&real.rows);
    let b = basis.project(&styled.rows);
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        let (na, nb) = (ra.norm(), rb.norm());
        if na == 0.0 || nb == 0.0 {
            excluded += 1;
            continue;
        }
        sum += ra.dot(&rb) / (na * nb);
        n += 1;
    }
    if n == 0 {
        return Err(Error::numeric("every projected row has zero norm"));
    }
    Ok(DisentanglementReport {
        cosine_similarity: sum / n as f64,
        explained_variance_pct: basis.explained_variance_pct,
        excluded_rows: excluded,
    })
}
