use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize_dataset, CloudSet, NormalizationStats, PointCloud};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A parametric surface family. Ranges are `[min, max]` and per-shape
/// parameters are drawn uniformly from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeFamily {
    /// Sphere surface in 3-D.
    Sphere { radius: [f64; 2] },
    /// Torus in 3-D: tube radius is `tube_ratio * major_radius`.
    Torus { major_radius: [f64; 2], tube_ratio: [f64; 2] },
    /// Surface of an axis-aligned box with independent half-extents.
    Box { half_extent: [f64; 2] },
    /// Circle in 2-D.
    Circle2d { radius: [f64; 2] },
    /// Two concentric circles in 2-D; the inner radius is
    /// `inner_ratio * radius`.
    Ring2d { radius: [f64; 2], inner_ratio: [f64; 2] },
}

/// Parameters of one drawn shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeParams {
    Sphere { radius: f64 },
    Torus { major_radius: f64, tube_radius: f64 },
    Box { half_extents: [f64; 3] },
    Circle2d { radius: f64 },
    Ring2d { outer: f64, inner: f64 },
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(Error::contract(format!("{name} range {r:?} must satisfy 0 < min <= max")));
    }
    Ok(())
}

fn draw(r: [f64; 2], rng: &mut Rng) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

impl ShapeFamily {
    pub fn dim(&self) -> usize {
        match self {
            ShapeFamily::Circle2d { .. } | ShapeFamily::Ring2d { .. } => 2,
            _ => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ShapeFamily::Sphere { radius } | ShapeFamily::Circle2d { radius } => check_range("radius", radius),
            ShapeFamily::Torus { major_radius, tube_ratio } => {
                check_range("major_radius", major_radius)?;
                check_range("tube_ratio", tube_ratio)?;
                if tube_ratio[1] >= 1.0 {
                    return Err(Error::contract("tube_ratio must stay below 1"));
                }
                Ok(())
            }
            ShapeFamily::Box { half_extent } => check_range("half_extent", half_extent),
            ShapeFamily::Ring2d { radius, inner_ratio } => {
                check_range("radius", radius)?;
                check_range("inner_ratio", inner_ratio)?;
                if inner_ratio[1] >= 1.0 {
                    return Err(Error::contract("inner_ratio must stay below 1"));
                }
                Ok(())
            }
        }
    }
}

pub fn sample_shape_params(family: &ShapeFamily, rng: &mut Rng) -> Result<ShapeParams> {
    family.validate()?;
    Ok(match *family {
        ShapeFamily::Sphere { radius } => ShapeParams::Sphere { radius: draw(radius, rng) },
        ShapeFamily::Torus { major_radius, tube_ratio } => {
            let big = draw(major_radius, rng);
            ShapeParams::Torus {
                major_radius: big,
                tube_radius: big * draw(tube_ratio, rng),
            }
        }
        ShapeFamily::Box { half_extent } => ShapeParams::Box {
            half_extents: [draw(half_extent, rng), draw(half_extent, rng), draw(half_extent, rng)],
        },
        ShapeFamily::Circle2d { radius } => ShapeParams::Circle2d { radius: draw(radius, rng) },
        ShapeFamily::Ring2d { radius, inner_ratio } => {
            let outer = draw(radius, rng);
            ShapeParams::Ring2d {
                outer,
                inner: outer * draw(inner_ratio, rng),
            }
        }
    })
}

impl ShapeParams {
    pub fn dim(&self) -> usize {
        match self {
            ShapeParams::Circle2d { .. } | ShapeParams::Ring2d { .. } => 2,
            _ => 3,
        }
    }

    /// `m` points distributed uniformly by area (arc length in 2-D).
    pub fn sample(&self, m: usize, rng: &mut Rng) -> Result<PointCloud> {
        if m == 0 {
            return Err(Error::contract("point count must be at least 1"));
        }
        let tau = std::f64::consts::TAU;
        let mut pts = Array2::zeros((m, self.dim()));
        for mut row in pts.rows_mut() {
            match *self {
                ShapeParams::Sphere { radius } => loop {
                    let g: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
                    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                    if n > 1e-12 {
                        for j in 0..3 {
                            row[j] = radius * g[j] / n;
                        }
                        break;
                    }
                },
                ShapeParams::Torus { major_radius: big, tube_radius: r } => {
                    // The area element is proportional to R + r cos(theta).
                    let theta = loop {
                        let th = rng.random_range(0.0..tau);
                        if rng.random_range(0.0..1.0) * (big + r) <= big + r * th.cos() {
                            break th;
                        }
                    };
                    let phi = rng.random_range(0.0..tau);
                    let w = big + r * theta.cos();
                    row[0] = w * phi.cos();
                    row[1] = w * phi.sin();
                    row[2] = r * theta.sin();
                }
                ShapeParams::Box { half_extents: [a, b, c] } => {
                    // Face pair normal to axis k has area 4 * product of the other two.
                    let areas = [b * c, a * c, a * b];
                    let total: f64 = areas.iter().sum();
                    let mut u = rng.random_range(0.0..total);
                    let mut axis = 2;
                    for (k, &ar) in areas.iter().enumerate() {
                        if u < ar {
                            axis = k;
                            break;
                        }
                        u -= ar;
                    }
                    let h = [a, b, c];
                    for j in 0..3 {
                        row[j] = if j == axis {
                            if rng.random::<bool>() {
                                h[j]
                            } else {
                                -h[j]
                            }
                        } else {
                            rng.random_range(-h[j]..=h[j])
                        };
                    }
                }
                ShapeParams::Circle2d { radius } => {
                    let t = rng.random_range(0.0..tau);
                    row[0] = radius * t.cos();
                    row[1] = radius * t.sin();
                }
                ShapeParams::Ring2d { outer, inner } => {
                    let r = if rng.random_range(0.0..outer + inner) < outer { outer } else { inner };
                    let t = rng.random_range(0.0..tau);
                    row[0] = r * t.cos();
                    row[1] = r * t.sin();
                }
            }
        }
        PointCloud::new(pts)
    }

    /// Implicit-surface residual of a point: zero on the surface.
    pub fn residual(&self, p: &[f64]) -> f64 {
        let norm = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>().sqrt();
        match *self {
            ShapeParams::Sphere { radius } | ShapeParams::Circle2d { radius } => norm(p) - radius,
            ShapeParams::Torus { major_radius, tube_radius } => {
                let q = (p[0] * p[0] + p[1] * p[1]).sqrt() - major_radius;
                q * q + p[2] * p[2] - tube_radius * tube_radius
            }
            ShapeParams::Box { half_extents } => {
                // Distance outside plus signed distance inside, zero on faces.
                let mut outside = 0.0f64;
                let mut inside = f64::NEG_INFINITY;
                for j in 0..3 {
                    let d = p[j].abs() - half_extents[j];
                    outside += d.max(0.0).powi(2);
                    inside = inside.max(d);
                }
                outside.sqrt() + inside.min(0.0)
            }
            ShapeParams::Ring2d { outer, inner } => {
                let n = norm(p);
                let (a, b) = (n - outer, n - inner);
                if a.abs() < b.abs() {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Draw shape parameters, then `m` surface points.
pub fn gen_shape(family: &ShapeFamily, m: usize, rng: &mut Rng) -> Result<PointCloud> {
    sample_shape_params(family, rng)?.sample(m, rng)
}

/// Dataset recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub family: ShapeFamily,
    #[serde(default = "default_train")]
    pub train_shapes: usize,
    #[serde(default = "default_test")]
    pub test_shapes: usize,
    /// Points per shape.
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train() -> usize {
    200
}
fn default_test() -> usize {
    50
}
fn default_points() -> usize {
    256
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.train_shapes == 0 || self.test_shapes == 0 || self.points == 0 {
            return Err(Error::Config("shape and point counts must be positive".into()));
        }
        Ok(())
    }
}

/// A built dataset: normalized train/test clouds, their source parameters,
/// and the normalization computed on the training clouds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: CloudSet,
    pub test: CloudSet,
    pub train_params: Vec<ShapeParams>,
    pub test_params: Vec<ShapeParams>,
    pub stats: NormalizationStats,
}

impl Dataset {
    /// Shape `i` (train first, then test) is drawn from its own derived
    /// stream, so the build depends only on the config.
    pub fn build(cfg: &DataConfig) -> Result<Dataset> {
        cfg.validate()?;
        let total = cfg.train_shapes + cfg.test_shapes;
        let mut params = Vec::with_capacity(total);
        let mut clouds = Vec::with_capacity(total);
        for i in 0..total {
            let mut rng = crate::rng::derived(cfg.seed, i as u64);
            let p = sample_shape_params(&cfg.family, &mut rng)?;
            clouds.push(p.sample(cfg.points, &mut rng)?);
            params.push(p);
        }
        let test_clouds = clouds.split_off(cfg.train_shapes);
        let test_params = params.split_off(cfg.train_shapes);
        let (train, stats) = normalize_dataset(&CloudSet::new(clouds)?)?;
        let test = stats.apply_set(&CloudSet::new(test_clouds)?)?;
        Ok(Dataset {
            train,
            test,
            train_params: params,
            test_params,
            stats,
        })
    }

    /// A fresh, independent sampling of the same shape in normalized
    /// coordinates, drawn from `rng`.
    pub fn resample(&self, params: &ShapeParams, m: usize, rng: &mut Rng) -> Result<PointCloud> {
        self.stats.apply(&params.sample(m, rng)?)
    }
}
