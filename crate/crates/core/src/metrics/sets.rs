use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{chamfer, emd_approx, emd_exact};
use super::JSD_RESOLUTION;
use crate::data::{CloudSet, PointCloud};
use crate::error::{Error, Result};

/// Cloud-to-cloud distance used by the set metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    Chamfer,
    Emd,
    /// Auction EMD with the given epsilon.
    EmdApprox(f64),
}

impl Distance {
    pub fn eval(&self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        match *self {
            Distance::Chamfer => chamfer(a.view(), b.view()),
            Distance::Emd => emd_exact(a.view(), b.view()),
            Distance::EmdApprox(eps) => emd_approx(a.view(), b.view(), eps),
        }
    }
}

/// Distance between every cloud of `a` and every cloud of `b`. Cells are
/// independent, so the matrix does not depend on the thread count.
pub fn pairwise(a: &[PointCloud], b: &[PointCloud], dist: Distance) -> Result<Array2<f64>> {
    let cells: Vec<f64> = (0..a.len() * b.len())
        .into_par_iter()
        .map(|k| dist.eval(&a[k / b.len()], &b[k % b.len()]))
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_vec((a.len(), b.len()), cells).expect("cell count matches shape"))
}

/// Index of the smallest entry; the lowest index wins ties.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_sets(sg: &CloudSet, sr: &CloudSet) -> Result<()> {
    if sg.dim() != sr.dim() {
        return Err(Error::contract("generated and reference sets differ in dimension"));
    }
    Ok(())
}

/// Fraction of reference clouds that are the nearest reference of some
/// generated cloud, from a generated-by-reference distance matrix.
pub fn coverage_from_matrix(d_gr: &Array2<f64>) -> f64 {
    let mut hit = vec![false; d_gr.ncols()];
    for row in d_gr.rows() {
        hit[argmin(row.iter().cloned())] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / d_gr.ncols() as f64
}

/// Mean over reference clouds of the distance to the nearest generated one.
pub fn mmd_from_matrix(d_gr: &Array2<f64>) -> f64 {
    let total: f64 = d_gr
        .columns()
        .into_iter()
        .map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum();
    total / d_gr.ncols() as f64
}

/// Leave-one-out 1-NN accuracy over the union, generated clouds first.
/// The nearest other sample is chosen with ties going to the lowest global
/// index; a set compared against an identical copy of itself therefore
/// scores 0 when its clouds are distinct, since every reference cloud's
/// nearest neighbour is its generated twin.
pub fn one_nna_from_matrices(d_gg: &Array2<f64>, d_gr: &Array2<f64>, d_rr: &Array2<f64>) -> f64 {
    let (ng, nr) = d_gr.dim();
    let n = ng + nr;
    let dist = |i: usize, j: usize| match (i < ng, j < ng) {
        (true, true) => d_gg[[i, j]],
        (true, false) => d_gr[[i, j - ng]],
        (false, true) => d_gr[[j, i - ng]],
        (false, false) => d_rr[[i - ng, j - ng]],
    };
    let correct = (0..n)
        .filter(|&i| {
            let mut best = (usize::MAX, f64::INFINITY);
            for j in (0..n).filter(|&j| j != i) {
                let v = dist(i, j);
                if v < best.1 {
                    best = (j, v);
                }
            }
            (best.0 < ng) == (i < ng)
        })
        .count();
    correct as f64 / n as f64
}

pub fn coverage(sg: &CloudSet, sr: &CloudSet, dist: Distance) -> Result<f64> {
    check_sets(sg, sr)?;
    Ok(coverage_from_matrix(&pairwise(sg.clouds(), sr.clouds(), dist)?))
}

pub fn mmd(sg: &CloudSet, sr: &CloudSet, dist: Distance) -> Result<f64> {
    check_sets(sg, sr)?;
    Ok(mmd_from_matrix(&pairwise(sg.clouds(), sr.clouds(), dist)?))
}

pub fn one_nna(sg: &CloudSet, sr: &CloudSet, dist: Distance) -> Result<f64> {
    check_sets(sg, sr)?;
    if sg.len() != sr.len() {
        log::warn!("1-NNA on unequal set sizes ({} vs {}); 0.5 is no longer the ideal", sg.len(), sr.len());
    }
    let d_gg = pairwise(sg.clouds(), sg.clouds(), dist)?;
    let d_gr = pairwise(sg.clouds(), sr.clouds(), dist)?;
    let d_rr = pairwise(sr.clouds(), sr.clouds(), dist)?;
    Ok(one_nna_from_matrices(&d_gg, &d_gr, &d_rr))
}

/// Jensen-Shannon divergence (natural log) between the voxelized marginal
/// point distributions of two sets. The grid is `resolution` cells per
/// axis over the cube that tightly covers both sets, enlarged by 1%.
pub fn jsd(sg: &CloudSet, sr: &CloudSet, resolution: usize) -> Result<f64> {
    check_sets(sg, sr)?;
    if resolution < 2 {
        return Err(Error::contract("JSD resolution must be at least 2"));
    }
    let d = sg.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for c in sg.iter().chain(sr.iter()) {
        for row in c.points().rows() {
            for j in 0..d {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
    }
    let mut side = (0..d).map(|j| hi[j] - lo[j]).fold(0.0, f64::max) * 1.01;
    if side == 0.0 {
        side = 1.0;
    }
    let origin: Vec<f64> = (0..d).map(|j| 0.5 * (lo[j] + hi[j]) - 0.5 * side).collect();
    let cells = resolution.pow(d as u32);
    let histogram = |set: &CloudSet| {
        let mut h = vec![0.0f64; cells];
        let mut total = 0.0;
        for c in set.iter() {
            for row in c.points().rows() {
                let mut idx = 0;
                for j in 0..d {
                    let k = ((row[j] - origin[j]) / side * resolution as f64).floor() as usize;
                    idx = idx * resolution + k.min(resolution - 1);
                }
                h[idx] += 1.0;
                total += 1.0;
            }
        }
        h.iter_mut().for_each(|v| *v /= total);
        h
    };
    let (pg, pr) = (histogram(sg), histogram(sr));
    let kl_to_mid = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a / (0.5 * (a + b))).ln())
            .sum()
    };
    Ok((0.5 * kl_to_mid(&pr, &pg) + 0.5 * kl_to_mid(&pg, &pr)).max(0.0))
}

/// Options for [`MetricsReport::compute`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// `None` for exact EMD, `Some(eps)` for the auction approximation.
    pub emd_epsilon: Option<f64>,
    pub jsd_resolution: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            emd_epsilon: None,
            jsd_resolution: JSD_RESOLUTION,
        }
    }
}

/// All generation metrics for one generated/reference pair, unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jsd: f64,
    pub mmd_cd: f64,
    pub mmd_emd: f64,
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub nna_cd: f64,
    pub nna_emd: f64,
    pub emd_approximate: bool,
    pub points_per_cloud: usize,
}

/// Presentation view: MMD-CD x10^3, MMD-EMD x10^2, JSD x10^2, COV and
/// 1-NNA in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaledReport {
    pub jsd_e2: f64,
    pub mmd_cd_e3: f64,
    pub mmd_emd_e2: f64,
    pub cov_cd_pct: f64,
    pub cov_emd_pct: f64,
    pub nna_cd_pct: f64,
    pub nna_emd_pct: f64,
}

impl MetricsReport {
    pub fn compute(sg: &CloudSet, sr: &CloudSet, opts: &EvalOptions) -> Result<Self> {
        check_sets(sg, sr)?;
        if sg.points_per_cloud() != sr.points_per_cloud() {
            return Err(Error::contract(format!(
                "EMD needs equal point counts, got {} and {}",
                sg.points_per_cloud(),
                sr.points_per_cloud()
            )));
        }
        if sg.len() != sr.len() {
            log::warn!("1-NNA on unequal set sizes ({} vs {})", sg.len(), sr.len());
        }
        let emd = match opts.emd_epsilon {
            Some(eps) => Distance::EmdApprox(eps),
            None => Distance::Emd,
        };
        let (g, r) = (sg.clouds(), sr.clouds());
        let row = |dist: Distance| -> Result<(f64, f64, f64)> {
            let d_gr = pairwise(g, r, dist)?;
            let d_gg = pairwise(g, g, dist)?;
            let d_rr = pairwise(r, r, dist)?;
            Ok((
                mmd_from_matrix(&d_gr),
                coverage_from_matrix(&d_gr),
                one_nna_from_matrices(&d_gg, &d_gr, &d_rr),
            ))
        };
        let (mmd_cd, cov_cd, nna_cd) = row(Distance::Chamfer)?;
        let (mmd_emd, cov_emd, nna_emd) = row(emd)?;
        Ok(MetricsReport {
            jsd: jsd(sg, sr, opts.jsd_resolution)?,
            mmd_cd,
            mmd_emd,
            cov_cd,
            cov_emd,
            nna_cd,
            nna_emd,
            emd_approximate: opts.emd_epsilon.is_some(),
            points_per_cloud: sg.points_per_cloud(),
        })
    }

    pub fn scaled(&self) -> ScaledReport {
        ScaledReport {
            jsd_e2: self.jsd * 1e2,
            mmd_cd_e3: self.mmd_cd * 1e3,
            mmd_emd_e2: self.mmd_emd * 1e2,
            cov_cd_pct: self.cov_cd * 100.0,
            cov_emd_pct: self.cov_emd * 100.0,
            nna_cd_pct: self.nna_cd * 100.0,
            nna_emd_pct: self.nna_emd * 100.0,
        }
    }

    /// The same report with MMD values divided by the point count, for
    /// comparison against per-point conventions.
    pub fn per_point(&self) -> Self {
        let m = self.points_per_cloud as f64;
        MetricsReport {
            mmd_cd: self.mmd_cd / m,
            mmd_emd: self.mmd_emd / m,
            ..self.clone()
        }
    }
}
