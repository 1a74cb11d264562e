//! Class density and separation statistics in PCA space.
//!
//! After projecting onto the top principal components, each class is
//! summarised by its centroid and by the mean distance of its points to it,
//! once the farthest `tail_cut` fraction of the class has been trimmed.
//!
//! * `rho` is the mean over classes of `1 / mean distance to centroid`.
//! * `delta` is the mean over classes of the squared distance from a class
//!   centroid to the nearest other centroid.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::gemm;

pub const STATS_SCHEMA_VERSION: u32 = 1;

/// Stand-in for `1 / 0` when a class has collapsed onto its centroid.
pub const RHO_CAP: f64 = 1e12;

const COV_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub pca_components: usize,
    pub tail_cut: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            pca_components: 50,
            tail_cut: 0.01,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.pca_components == 0 || self.pca_components > dim {
            return Err(Error::config(format!(
                "pca_components {} outside 1..={dim}",
                self.pca_components
            )));
        }
        if !(0.0..0.5).contains(&self.tail_cut) {
            return Err(Error::config(format!("tail_cut {} outside [0, 0.5)", self.tail_cut)));
        }
        Ok(())
    }
}

/// Principal axes of a data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `k x dim`, row `i` is the `i`-th axis.
    pub components: Vec<f64>,
    /// Variance along each axis, non-increasing.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    /// Fits the top `k` axes of the `n x dim` row-major matrix `x` by
    /// eigendecomposition of its covariance.
    ///
    /// Each axis is signed so that its largest-magnitude coordinate is
    /// positive (first such coordinate on ties).
    pub fn fit(x: &[f32], n: usize, dim: usize, k: usize) -> Result<Self> {
        if x.len() != n * dim {
            return Err(Error::ShapeMismatch {
                expected: vec![n, dim],
                found: vec![x.len()],
            });
        }
        if k == 0 || k > dim {
            return Err(Error::config(format!("pca_components {k} outside 1..={dim}")));
        }
        if n <= k {
            return Err(Error::Degenerate(format!("PCA with {k} components needs more than {k} rows, got {n}")));
        }

        let mut mean = vec![0.0f64; dim];
        for row in x.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut cov = vec![0.0f64; dim * dim];
        let mut buf = Vec::with_capacity(COV_CHUNK * dim);
        for chunk in x.chunks(COV_CHUNK * dim) {
            let rows = chunk.len() / dim;
            buf.clear();
            for row in chunk.chunks_exact(dim) {
                buf.extend(row.iter().zip(&mean).map(|(&v, m)| f64::from(v) - m));
            }
            gemm(true, false, dim, dim, rows, 1.0, &buf, &buf, 1.0, &mut cov);
        }
        let scale = 1.0 / (n as f64 - 1.0);
        cov.iter_mut().for_each(|c| *c *= scale);
        // symmetrise away rounding so the solver sees an exactly symmetric matrix
        for i in 0..dim {
            for j in 0..i {
                let v = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        let total_variance = (0..dim).map(|i| cov[i * dim + i]).sum();

        let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov));
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let mut components = Vec::with_capacity(k * dim);
        let mut variances = Vec::with_capacity(k);
        for &j in &order[..k] {
            let col = eig.eigenvectors.column(j);
            let lead = (0..dim)
                .reduce(|best, i| if col[i].abs() > col[best].abs() { i } else { best })
                .unwrap_or(0);
            let s = if col[lead] < 0.0 { -1.0 } else { 1.0 };
            components.extend(col.iter().map(|v| s * v));
            variances.push(eig.eigenvalues[j].max(0.0));
        }
        Ok(Self {
            dim,
            mean,
            components,
            variances,
            total_variance,
        })
    }

    pub fn k(&self) -> usize {
        self.variances.len()
    }

    /// Fraction of total variance along each axis.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// `n x k` coordinates of the rows of `x`.
    pub fn project(&self, x: &[f32]) -> Vec<f64> {
        let n = x.len() / self.dim;
        let k = self.k();
        let mut out = vec![0.0; n * k];
        let mut buf = Vec::with_capacity(COV_CHUNK * self.dim);
        for (c, chunk) in x.chunks(COV_CHUNK * self.dim).enumerate() {
            let rows = chunk.len() / self.dim;
            buf.clear();
            for row in chunk.chunks_exact(self.dim) {
                buf.extend(row.iter().zip(&self.mean).map(|(&v, m)| f64::from(v) - m));
            }
            let start = c * COV_CHUNK * k;
            gemm(
                false,
                true,
                rows,
                k,
                self.dim,
                1.0,
                &buf,
                &self.components,
                0.0,
                &mut out[start..start + rows * k],
            );
        }
        out
    }

    /// Maps `n x k` coordinates back to the input space.
    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let k = self.k();
        let n = projected.len() / k;
        let mut out = vec![0.0; n * self.dim];
        gemm(false, false, n, self.dim, k, 1.0, projected, &self.components, 0.0, &mut out);
        for row in out.chunks_exact_mut(self.dim) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        out
    }
}

/// Fits PCA on `dataset` and returns the fit with the `n x k` projection.
pub fn pca_fit_project(dataset: &Dataset, k: usize) -> Result<(Pca, Vec<f64>)> {
    let pca = Pca::fit(dataset.features(), dataset.len(), dataset.example_len(), k)?;
    let projected = pca.project(dataset.features());
    Ok((pca, projected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Trimmed centroids, one row per class.
    pub centroids: Vec<Vec<f64>>,
    /// Mean distance of the trimmed class to its centroid.
    pub mean_distance: Vec<f64>,
    pub counts: Vec<usize>,
    pub trimmed: Vec<usize>,
    /// Index of each class's nearest other centroid.
    pub nearest: Vec<usize>,
    pub rho: f64,
    pub delta: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid(points: &[f64], rows: &[usize], dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    for &r in rows {
        for (c, v) in c.iter_mut().zip(&points[r * dim..(r + 1) * dim]) {
            *c += v;
        }
    }
    c.iter_mut().for_each(|c| *c /= rows.len() as f64);
    c
}

/// Per-class statistics of `n x dim` points.
///
/// Within each class the `floor(tail_cut * count)` points farthest from the
/// untrimmed centroid are dropped (ties by position) and the centroid is
/// recomputed.
pub fn class_statistics(
    points: &[f64],
    dim: usize,
    labels: &[usize],
    classes: usize,
    tail_cut: f64,
    exec: Exec,
) -> Result<ClassStats> {
    if points.len() != labels.len() * dim {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len(), dim],
            found: vec![points.len()],
        });
    }
    if !(0.0..0.5).contains(&tail_cut) {
        return Err(Error::config(format!("tail_cut {tail_cut} outside [0, 0.5)")));
    }
    if classes < 2 {
        return Err(Error::Degenerate("separation needs at least two classes".into()));
    }
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: y,
                classes,
            });
        }
        members[y].push(i);
    }

    let per_class = exec.map(classes, |m| -> Result<(Vec<f64>, f64, usize)> {
        let rows = &members[m];
        let cut = (tail_cut * rows.len() as f64).floor() as usize;
        if rows.len() <= cut || rows.is_empty() {
            return Err(Error::EmptyClass(m));
        }
        let c0 = centroid(points, rows, dim);
        let mut by_dist: Vec<(f64, usize)> = rows
            .iter()
            .map(|&r| (dist(&points[r * dim..(r + 1) * dim], &c0), r))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let kept: Vec<usize> = by_dist[..rows.len() - cut].iter().map(|p| p.1).collect();
        let c = centroid(points, &kept, dim);
        let mean = kept
            .iter()
            .map(|&r| dist(&points[r * dim..(r + 1) * dim], &c))
            .sum::<f64>()
            / kept.len() as f64;
        Ok((c, mean, cut))
    });
    let per_class = per_class.into_iter().collect::<Result<Vec<_>>>()?;

    let centroids: Vec<Vec<f64>> = per_class.iter().map(|p| p.0.clone()).collect();
    let mean_distance: Vec<f64> = per_class.iter().map(|p| p.1).collect();
    let rho = mean_distance
        .iter()
        .map(|&d| if d > 0.0 { (1.0 / d).min(RHO_CAP) } else { RHO_CAP })
        .sum::<f64>()
        / classes as f64;

    let mut nearest = Vec::with_capacity(classes);
    let mut delta = 0.0;
    for m in 0..classes {
        let (j, d2) = (0..classes)
            .filter(|&j| j != m)
            .map(|j| (j, dist(&centroids[m], &centroids[j]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("at least two classes");
        nearest.push(j);
        delta += d2;
    }
    delta /= classes as f64;

    Ok(ClassStats {
        centroids,
        mean_distance,
        counts: members.iter().map(Vec::len).collect(),
        trimmed: per_class.iter().map(|p| p.2).collect(),
        nearest,
        rho,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub config: StatsConfig,
    pub n: usize,
    pub classes: usize,
    pub explained_variance_ratio: Vec<f64>,
    #[serde(flatten)]
    pub stats: ClassStats,
    /// Free-form context supplied by the caller (dataset, id file, ...).
    #[serde(default)]
    pub experiment: Option<serde_json::Value>,
}

impl StatsReport {
    pub fn rho(&self) -> f64 {
        self.stats.rho
    }

    pub fn delta(&self) -> f64 {
        self.stats.delta
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::train::write_json_atomic(path, self)
    }
}

/// PCA followed by [`class_statistics`]. Also returns the projection.
pub fn dataset_statistics(dataset: &Dataset, cfg: &StatsConfig, exec: Exec) -> Result<(StatsReport, Vec<f64>)> {
    cfg.validate(dataset.example_len())?;
    let (pca, projected) = pca_fit_project(dataset, cfg.pca_components)?;
    let stats = class_statistics(
        &projected,
        cfg.pca_components,
        dataset.labels(),
        dataset.classes(),
        cfg.tail_cut,
        exec,
    )?;
    let report = StatsReport {
        schema_version: STATS_SCHEMA_VERSION,
        config: *cfg,
        n: dataset.len(),
        classes: dataset.classes(),
        explained_variance_ratio: pca.explained_variance_ratio(),
        stats,
        experiment: None,
    };
    Ok((report, projected))
}

/// Writes `id,label,pc1,pc2` rows from an `n x k` projection (`k >= 2`).
pub fn write_projection_csv(path: &Path, dataset: &Dataset, projected: &[f64], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::config("projection CSV needs at least two components"));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label", "pc1", "pc2"])?;
    for (i, row) in projected.chunks_exact(k).enumerate() {
        w.write_record([
            dataset.ids()[i].to_string(),
            dataset.labels()[i].to_string(),
            row[0].to_string(),
            row[1].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
