//! Command-line front end: train, sample, reconstruct, evaluate,
//! trajectory and interpolate.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure. Diagnostics go to stderr; `evaluate` prints its report as JSON
//! on stdout.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_cloud, load_xyz_dir, save_xyz, CloudSet, DataConfig, Dataset, NormalizationStats, PointCloud};
use crate::error::{Error, Result};
use crate::metrics::{chamfer, emd_approx, emd_exact, EvalOptions, MetricsReport, JSD_RESOLUTION};
use crate::model::{ModelConfig, PointFlowModel};
use crate::train::{Checkpoint, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Stream index of the model-initialization generator within a run seed.
const MODEL_INIT_STREAM: u64 = 0x6d6f_6465_6c00;

#[derive(Debug, Parser)]
#[command(name = "pointflow", version, about = "Point-cloud generation with continuous normalizing flows")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the dataset, train, and write logs and checkpoints.
    Train(TrainArgs),
    /// Write sampled shapes as XYZ files.
    Sample(SampleArgs),
    /// Reconstruct every XYZ file of a directory.
    Reconstruct(ReconstructArgs),
    /// Compare a generated and a reference directory of XYZ files.
    Evaluate(EvaluateArgs),
    /// Write snapshots of one sample's path from the base distribution.
    Trajectory(TrajectoryArgs),
    /// Decode shapes along the latent path between two clouds.
    Interpolate(InterpolateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub shapes: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of input XYZ files.
    #[arg(long)]
    pub input: PathBuf,
    /// Points per reconstruction. Inputs holding exactly twice this many
    /// points are split into an input half and a held-out reference half.
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the auction EMD with this epsilon instead of the exact one.
    #[arg(long)]
    pub emd_epsilon: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Use the auction EMD with this epsilon instead of the exact one.
    #[arg(long)]
    pub emd_epsilon: Option<f64>,
    #[arg(long, default_value_t = JSD_RESOLUTION)]
    pub jsd_resolution: usize,
    /// Also write the report here.
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub output_dir: PathBuf,
}

/// A complete training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.family.dim() != self.model.d {
            return Err(Error::Config(format!(
                "data family is {}-D but model.d is {}",
                self.data.family.dim(),
                self.model.d
            )));
        }
        Ok(())
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Trajectory(a) => cmd_trajectory(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(PointFlowModel, Option<NormalizationStats>)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.model, ck.normalization))
}

fn to_data_space(points: Array2<f64>, stats: &Option<NormalizationStats>) -> Result<PointCloud> {
    let cloud = PointCloud::new(points)?;
    match stats {
        Some(s) => s.invert(&cloud),
        None => Ok(cloud),
    }
}

fn to_model_space(cloud: &PointCloud, stats: &Option<NormalizationStats>) -> Result<PointCloud> {
    match stats {
        Some(s) => s.apply(cloud),
        None => Ok(cloud.clone()),
    }
}

fn check_points(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("--points must be at least 1".into()));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let out = &cfg.io.output_dir;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let data = Dataset::build(&cfg.data)?;
    let reference = out.join("reference");
    fs::create_dir_all(&reference)?;
    for (i, c) in data.test.iter().enumerate() {
        save_xyz(&data.stats.invert(c)?, reference.join(format!("shape_{i:04}.xyz")))?;
    }
    let model = PointFlowModel::new(cfg.model.clone(), &mut crate::rng::derived(cfg.train.seed, MODEL_INIT_STREAM))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.normalization = Some(data.stats.clone());
    let logs = trainer.fit(&data.train, Some(out))?;
    if let Some(last) = logs.last() {
        log::info!("finished {} epochs; final mean ELBO {:.4}", last.epoch, last.elbo);
    }
    Ok(())
}

/// Shape `i` uses stream `i` of `seed`, so outputs do not depend on the
/// number of shapes requested or on scheduling.
pub fn sample_shapes(model: &PointFlowModel, shapes: usize, points: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    (0..shapes)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::derived(seed, i as u64);
            let z = model.sample_shape(&mut rng)?;
            model.sample_points(z.view(), points, &mut rng)
        })
        .collect()
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    check_points(a.points)?;
    if a.shapes == 0 {
        return Err(Error::Config("--shapes must be at least 1".into()));
    }
    let (model, stats) = load_model(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    for (i, pts) in sample_shapes(&model, a.shapes, a.points, a.seed)?.into_iter().enumerate() {
        save_xyz(&to_data_space(pts, &stats)?, a.out.join(format!("sample_{i:04}.xyz")))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReconstructionEntry {
    file: String,
    input_points: usize,
    cd: Option<f64>,
    emd: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ReconstructionSummary {
    emd_approximate: bool,
    shapes: Vec<ReconstructionEntry>,
    mean_cd: Option<f64>,
    mean_emd: Option<f64>,
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    check_points(a.points)?;
    let inputs = load_xyz_dir(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Config(format!("no .xyz files in {}", a.input.display())));
    }
    let (model, stats) = load_model(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    let m = a.points;
    let entries = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (path, cloud))| -> Result<ReconstructionEntry> {
            let mut rng = crate::rng::derived(a.seed, i as u64);
            // Inputs with 2M points: random M-point input half, the rest is the reference.
            let (input, reference) = if cloud.len() == 2 * m {
                let mut idx: Vec<usize> = (0..cloud.len()).collect();
                idx.shuffle(&mut rng);
                let pick = |s: &[usize]| PointCloud::new(cloud.points().select(Axis(0), s));
                (pick(&idx[..m])?, Some(pick(&idx[m..])?))
            } else {
                (cloud.clone(), None)
            };
            let x = to_model_space(&input, &stats)?;
            let recon = to_data_space(model.reconstruct(x.view(), m, &mut rng)?, &stats)?;
            let name = path.file_name().expect("listed files have names").to_string_lossy().to_string();
            save_xyz(&recon, a.out.join(&name))?;
            let (cd, emd) = match &reference {
                Some(r) => {
                    let e = match a.emd_epsilon {
                        Some(eps) => emd_approx(recon.view(), r.view(), eps)?,
                        None => emd_exact(recon.view(), r.view())?,
                    };
                    (Some(chamfer(recon.view(), r.view())?), Some(e))
                }
                None => (None, None),
            };
            Ok(ReconstructionEntry {
                file: name,
                input_points: input.len(),
                cd,
                emd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&ReconstructionEntry) -> Option<f64>| {
        let vals: Vec<f64> = entries.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let summary = ReconstructionSummary {
        emd_approximate: a.emd_epsilon.is_some(),
        mean_cd: mean(&|e| e.cd),
        mean_emd: mean(&|e| e.emd),
        shapes: entries,
    };
    write_json(&a.out.join("summary.json"), &summary)
}

fn load_set(dir: &Path) -> Result<CloudSet> {
    let clouds: Vec<PointCloud> = load_xyz_dir(dir)?.into_iter().map(|(_, c)| c).collect();
    if clouds.is_empty() {
        return Err(Error::Config(format!("no .xyz files in {}", dir.display())));
    }
    CloudSet::new(clouds).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let sg = load_set(&a.generated)?;
    let sr = load_set(&a.reference)?;
    if sg.points_per_cloud() != sr.points_per_cloud() || sg.dim() != sr.dim() {
        return Err(Error::Config(format!(
            "generated clouds are {}x{}, reference clouds are {}x{}",
            sg.points_per_cloud(),
            sg.dim(),
            sr.points_per_cloud(),
            sr.dim()
        )));
    }
    let opts = EvalOptions {
        emd_epsilon: a.emd_epsilon,
        jsd_resolution: a.jsd_resolution,
    };
    let report = MetricsReport::compute(&sg, &sr, &opts)?;
    println!("{}", serde_json::to_string(&report)?);
    write_json(&a.out, &report)
}

pub fn cmd_trajectory(a: &TrajectoryArgs) -> Result<()> {
    check_points(a.points)?;
    if a.frames < 2 {
        return Err(Error::Config("--frames must be at least 2".into()));
    }
    let (model, stats) = load_model(&a.checkpoint)?;
    // Same stream as shape 0 of `sample` with this seed.
    let mut rng = crate::rng::derived(a.seed, 0);
    let z = model.sample_shape(&mut rng)?;
    let frames = model.sample_trajectory(z.view(), a.points, a.frames, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    for (k, f) in frames.into_iter().enumerate() {
        // The first frame lives in the base space and is written as is.
        let cloud = if k == 0 { PointCloud::new(f)? } else { to_data_space(f, &stats)? };
        save_xyz(&cloud, a.out.join(format!("frame_{k:04}.xyz")))?;
    }
    Ok(())
}

pub fn cmd_interpolate(a: &InterpolateArgs) -> Result<()> {
    check_points(a.points)?;
    if a.steps < 2 {
        return Err(Error::Config("--steps must be at least 2".into()));
    }
    let (model, stats) = load_model(&a.checkpoint)?;
    let x1 = to_model_space(&load_cloud(&a.a)?, &stats)?;
    let x2 = to_model_space(&load_cloud(&a.b)?, &stats)?;
    let path = model.interpolate(x1.view(), x2.view(), a.steps, a.points, a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (k, f) in path.frames.into_iter().enumerate() {
        save_xyz(&to_data_space(f, &stats)?, a.out.join(format!("step_{k:04}.xyz")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"d": 2, "dz": 4},
        "data": {"family": {"kind": "circle2d", "radius": [0.5, 1.5]}},
        "train": {"epochs": 2},
        "io": {"output_dir": "out"}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.data.points, 256);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn unknown_keys_and_mismatches_are_config_errors() {
        let extra = MINIMAL.replace(r#""epochs": 2"#, r#""epochs": 2, "momentum": 0.5"#);
        assert!(matches!(RunConfig::from_json(&extra), Err(Error::Config(_))));
        let wrong_dim = MINIMAL.replace(r#""d": 2"#, r#""d": 3"#);
        assert!(matches!(RunConfig::from_json(&wrong_dim), Err(Error::Config(_))));
        let bad_range = MINIMAL.replace("[0.5, 1.5]", "[1.5, 0.5]");
        assert!(matches!(RunConfig::from_json(&bad_range), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERICAL);
        assert_eq!(main_with_args(["pointflow", "train", "--config", "/nonexistent/run.json"]), EXIT_USAGE);
        assert_eq!(main_with_args(["pointflow", "bogus"]), EXIT_USAGE);
    }
}
