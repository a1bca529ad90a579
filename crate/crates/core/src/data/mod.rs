//! Point clouds, synthetic shape families, normalization and file formats.

mod io;
mod shapes;

pub use io::{load_cloud, load_ply, load_xyz, load_xyz_dir, save_ply, save_xyz};
pub use shapes::{gen_shape, sample_shape_params, Dataset, DataConfig, ShapeFamily, ShapeParams};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nonempty set of finite points in 2 or 3 dimensions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::contract("a point cloud needs at least one point"));
        }
        if !(2..=3).contains(&points.ncols()) {
            return Err(Error::contract(format!("point dimension must be 2 or 3, got {}", points.ncols())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// A nonempty collection of clouds sharing point count and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudSet {
    clouds: Vec<PointCloud>,
}

impl CloudSet {
    pub fn new(clouds: Vec<PointCloud>) -> Result<Self> {
        let first = clouds.first().ok_or_else(|| Error::contract("a cloud set cannot be empty"))?;
        let (n, d) = (first.len(), first.dim());
        if let Some(i) = clouds.iter().position(|c| c.len() != n || c.dim() != d) {
            return Err(Error::contract(format!(
                "cloud {i} has shape {}x{}, expected {n}x{d}",
                clouds[i].len(),
                clouds[i].dim()
            )));
        }
        Ok(CloudSet { clouds })
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn into_clouds(self) -> Vec<PointCloud> {
        self.clouds
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points_per_cloud(&self) -> usize {
        self.clouds[0].len()
    }

    pub fn dim(&self) -> usize {
        self.clouds[0].dim()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PointCloud> {
        self.clouds.iter()
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.clouds.iter().map(|c| c.view()).collect()
    }
}

impl std::ops::Index<usize> for CloudSet {
    type Output = PointCloud;
    fn index(&self, i: usize) -> &PointCloud {
        &self.clouds[i]
    }
}

/// Per-axis mean and single global standard deviation of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_axis_mean: Vec<f64>,
    pub global_std: f64,
}

impl NormalizationStats {
    /// Statistics pooled over every point of every cloud.
    pub fn of(set: &CloudSet) -> Result<Self> {
        let d = set.dim();
        let total = (set.len() * set.points_per_cloud()) as f64;
        let mut mean = Array1::<f64>::zeros(d);
        for c in set.iter() {
            mean += &c.points.sum_axis(Axis(0));
        }
        mean /= total;
        let mut ss = 0.0;
        for c in set.iter() {
            for row in c.points.rows() {
                ss += row.iter().zip(mean.iter()).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
            }
        }
        let global_std = (ss / (total * d as f64)).sqrt();
        if !(global_std > 0.0) || !global_std.is_finite() {
            return Err(Error::DegenerateDataset("all coordinates are identical".into()));
        }
        Ok(NormalizationStats {
            per_axis_mean: mean.to_vec(),
            global_std,
        })
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.check(cloud)?;
        let mean = Array1::from(self.per_axis_mean.clone());
        PointCloud::new((&cloud.points - &mean) / self.global_std)
    }

    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.check(cloud)?;
        let mean = Array1::from(self.per_axis_mean.clone());
        PointCloud::new(&cloud.points * self.global_std + &mean)
    }

    pub fn apply_set(&self, set: &CloudSet) -> Result<CloudSet> {
        CloudSet::new(set.iter().map(|c| self.apply(c)).collect::<Result<_>>()?)
    }

    pub fn invert_set(&self, set: &CloudSet) -> Result<CloudSet> {
        CloudSet::new(set.iter().map(|c| self.invert(c)).collect::<Result<_>>()?)
    }

    fn check(&self, cloud: &PointCloud) -> Result<()> {
        if cloud.dim() != self.per_axis_mean.len() {
            return Err(Error::contract("cloud dimension does not match the normalization"));
        }
        Ok(())
    }
}

/// Zero mean per axis, unit variance globally; returns the statistics for
/// inversion.
pub fn normalize_dataset(set: &CloudSet) -> Result<(CloudSet, NormalizationStats)> {
    let stats = NormalizationStats::of(set)?;
    Ok((stats.apply_set(set)?, stats))
}

pub fn denormalize_dataset(set: &CloudSet, stats: &NormalizationStats) -> Result<CloudSet> {
    stats.invert_set(set)
}

/// Seeded shuffled split into two nonempty, disjoint, exhaustive parts.
/// The first part receives `round(train_frac * n)` clouds.
pub fn split(set: &CloudSet, train_frac: f64, seed: u64) -> Result<(CloudSet, CloudSet)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::contract("train fraction must lie in [0, 1]"));
    }
    let n = set.len();
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract(format!(
            "split of {n} clouds at fraction {train_frac} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::seeded(seed));
    let pick = |idx: &[usize]| CloudSet::new(idx.iter().map(|&i| set[i].clone()).collect());
    Ok((pick(&order[..n_train])?, pick(&order[n_train..])?))
}
