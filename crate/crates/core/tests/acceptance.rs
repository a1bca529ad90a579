//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (written past the test harness's output capture) and then asserts.

use std::io::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use pointflow::cnf::{FlowTransform, SolverConfig, TraceConfig, T0};
use pointflow::data::{load_xyz, save_xyz, CloudSet, DataConfig, Dataset, PointCloud, ShapeFamily};
use pointflow::flowcore::{ConcatSquashLayer, DynamicsNet, MovingBatchNorm, ParamTensor, Parameterized, SquashLayer};
use pointflow::metrics::{emd_approx, emd_exact, jsd, one_nna, Distance};
use pointflow::model::{posterior_entropy, EncoderConfig, ModelConfig, Objective, PointFlowModel, PosteriorGaussian, PriorMode};
use pointflow::rng::{derived, seeded, Rng};
use pointflow::train::{Checkpoint, TrainConfig, Trainer};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion:>2} [{verdict}] {name}: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn uniform_cloud(n: usize, d: usize, lo: f64, hi: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(lo..hi))
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn tiny_model_config(d: usize, dz: usize) -> ModelConfig {
    let mut c = ModelConfig::new(d, dz);
    c.encoder = EncoderConfig {
        pointwise: vec![6],
        head: vec![6],
    };
    c.prior_hidden = vec![5];
    c.decoder_hidden = vec![5, 5];
    c.solver.train = SolverConfig::rk4(20);
    c.trace.exact_max_dim = 64;
    c
}

/// Random running statistics and affine parameters for every batch norm,
/// so the check exercises them away from the identity.
fn randomize_norms(model: &mut PointFlowModel, rng: &mut Rng) {
    for (_, bn) in model.norms_mut() {
        randomize_norm(bn, rng);
    }
}

fn randomize_norm(bn: &mut MovingBatchNorm, rng: &mut Rng) {
    for v in bn.running_mean.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in bn.running_std.iter_mut() {
        *v = rng.random_range(0.6..1.6);
    }
    for v in bn.gamma.values_mut() {
        *v = rng.random_range(0.7..1.3) * if rng.random_bool(0.2) { -1.0 } else { 1.0 };
    }
    for v in bn.beta.values_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
}

fn layer_kind(name: &str) -> &'static str {
    if name.ends_with(".t1") {
        "t1"
    } else if name.contains("_norm.") {
        "moving batch norm"
    } else if name.starts_with("encoder.") {
        "dense"
    } else if name.starts_with("decoder.") {
        "conditional concatsquash"
    } else {
        "concatsquash"
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut worst_overall = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = seeded(1000 + seed);
        let d = if seed % 2 == 0 { 2 } else { 3 };
        let mut model = PointFlowModel::new(tiny_model_config(d, 3), &mut rng).unwrap();
        randomize_norms(&mut model, &mut rng);
        model.prior.set_t1(rng.random_range(0.5..1.5)).unwrap();
        model.decoder.set_t1(rng.random_range(0.5..1.5)).unwrap();

        let shapes: Vec<Array2<f64>> = (0..2).map(|i| uniform_cloud(4 + i, d, -1.5, 1.5, &mut rng)).collect();
        let views: Vec<ArrayView2<f64>> = shapes.iter().map(|s| s.view()).collect();
        let noise = model.draw_noise(&[4, 5], 1, &mut rng);
        let scale = 0.5;
        let analytic = model.elbo_grad(&views, &noise, Objective::Elbo, scale).unwrap().grad.flatten();

        let solver = SolverConfig::rk4(20);
        let loss = |m: &PointFlowModel| -> f64 {
            views
                .iter()
                .zip(&noise.shapes)
                .map(|(x, nz)| m.elbo_with(*x, &nz.eps, &solver, &mut seeded(0)).unwrap().elbo)
                .sum::<f64>()
                * scale
        };
        let names: Vec<String> = model
            .manifest()
            .iter()
            .flat_map(|e| std::iter::repeat_n(e.name.clone(), e.shape.iter().product()))
            .collect();
        let flat = model.flatten();
        let mut probe = model.clone();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] = flat[i] + h;
            probe.unflatten(&p).unwrap();
            let up = loss(&probe);
            p[i] = flat[i] - h;
            probe.unflatten(&p).unwrap();
            let down = loss(&probe);
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-4);
            let kind = layer_kind(&names[i]);
            match worst.iter_mut().find(|(k, _)| *k == kind) {
                Some((_, w)) => *w = w.max(err),
                None => worst.push((kind, err)),
            }
            worst_overall = worst_overall.max(err);
        }
    }
    worst.sort_by(|a, b| a.0.cmp(b.0));
    let secs = start.elapsed().as_secs_f64();
    let kinds: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    report(
        1,
        "gradient correctness",
        worst_overall < 1e-4 && worst.len() == 5 && secs < 120.0,
        &format!("max rel err {worst_overall:.2e} over 20 seeds [{}], {secs:.1}s", kinds.join(", ")),
    );
}

#[test]
fn criterion_02_flows_invert() {
    let start = Instant::now();
    let (mut worst_x, mut worst_lp) = (0.0f64, 0.0f64);
    for k in 0..100u64 {
        let mut rng = seeded(2000 + k);
        let d = if k % 2 == 0 { 2 } else { 3 };
        let cond = if k % 3 == 0 { None } else { Some(rng.random_range(1..5)) };
        let width = rng.random_range(4..16);
        let mut f = FlowTransform::new(DynamicsNet::new(d, &[width, width], cond, &mut rng), true);
        f.solver = SolverConfig::dopri5(1e-5, 1e-5);
        f.trace = TraceConfig::exact();
        f.set_t1(rng.random_range(0.3..1.5)).unwrap();
        randomize_norm(f.pre_norm.as_mut().unwrap(), &mut rng);
        randomize_norm(f.post_norm.as_mut().unwrap(), &mut rng);
        let z: Option<Vec<f64>> = cond.map(|c| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y0 = Array2::from_shape_fn((32, d), |_| StandardNormal.sample(&mut rng));
        let fwd = f.forward(y0.view(), z.as_deref(), &mut rng).unwrap();
        let back = f.inverse(fwd.output.view(), z.as_deref(), &mut rng).unwrap();
        worst_x = worst_x.max(max_abs(&back.output, &y0));
        for (a, b) in fwd.delta_logp.iter().zip(&back.delta_logp) {
            worst_lp = worst_lp.max((a + b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "flow invertibility",
        worst_x < 1e-4 && worst_lp < 1e-4 && secs < 60.0,
        &format!("100 flows: max coord err {worst_x:.2e}, max delta_logp sum {worst_lp:.2e}, {secs:.1}s"),
    );
}

/// Midpoint-rule mass of `exp(log_prob)` over the square `[-r, r]^2`.
fn grid_mass(f: &FlowTransform, z: Option<&[f64]>, r: f64, m: usize) -> f64 {
    let step = 2.0 * r / m as f64;
    let grid = Array2::from_shape_fn((m * m, 2), |(row, c)| {
        let i = if c == 0 { row / m } else { row % m };
        -r + (i as f64 + 0.5) * step
    });
    let lp = f.log_prob(grid.view(), z, &mut seeded(0)).unwrap();
    lp.iter().map(|v| v.exp()).sum::<f64>() * step * step
}

#[test]
fn criterion_03_densities_normalize() {
    let start = Instant::now();
    let mut masses = Vec::new();

    // Two random flows, one of them conditional.
    for (k, cond) in [(0u64, None), (1, Some(3))] {
        let mut rng = seeded(3000 + k);
        let mut f = FlowTransform::new(DynamicsNet::new(2, &[8, 8], cond, &mut rng), true);
        f.solver = SolverConfig::dopri5(1e-7, 1e-7);
        f.set_t1(1.2).unwrap();
        randomize_norm(f.pre_norm.as_mut().unwrap(), &mut rng);
        randomize_norm(f.post_norm.as_mut().unwrap(), &mut rng);
        let z: Option<Vec<f64>> = cond.map(|c| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect());
        masses.push(grid_mass(&f, z.as_deref(), 8.0, 140));
    }

    // A decoder fitted briefly to circles.
    let data = Dataset::build(&DataConfig {
        family: ShapeFamily::Circle2d { radius: [0.5, 1.5] },
        train_shapes: 8,
        test_shapes: 1,
        points: 64,
        seed: 3,
    })
    .unwrap();
    let mut cfg = ModelConfig::new(2, 3);
    cfg.encoder = EncoderConfig {
        pointwise: vec![16],
        head: vec![16],
    };
    cfg.prior_hidden = vec![8];
    cfg.decoder_hidden = vec![12, 12];
    cfg.solver.train = SolverConfig::rk4(6);
    let mut tc = TrainConfig::new(30);
    tc.batch_size = 4;
    tc.lr0 = 5e-3;
    let mut trainer = Trainer::new(PointFlowModel::new(cfg, &mut seeded(4)).unwrap(), tc).unwrap();
    let logs = trainer.fit(&data.train, None).unwrap();
    let model = trainer.model;
    let z = model.encode(data.test[0].view()).unwrap().mu.to_vec();
    let mut dec = model.decoder.clone();
    dec.solver = SolverConfig::dopri5(1e-7, 1e-7);
    masses.push(grid_mass(&dec, Some(&z), 8.0, 160));

    let secs = start.elapsed().as_secs_f64();
    let worst = masses.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    report(
        3,
        "density normalization",
        worst < 0.01 && secs < 120.0,
        &format!(
            "grid masses {:?} (trained decoder ELBO {:.1} -> {:.1}), {secs:.1}s",
            masses.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>(),
            logs[0].elbo,
            logs.last().unwrap().elbo
        ),
    );
}

#[test]
fn criterion_04_closed_forms() {
    // One layer with zero gate logits halves its linear part, so W_x = 2a I
    // gives the dynamics f(y) = a y.
    let mut worst_flow = 0.0f64;
    for (k, (a, t1, d)) in [(-0.4, 1.7, 2usize), (0.3, 0.9, 3), (0.8, 0.5, 2)].into_iter().enumerate() {
        let mut l = ConcatSquashLayer::zeros(d, d);
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 2.0 * a;
        }
        l.w_x = ParamTensor::from_vec(&[d, d], w).unwrap();
        let mut f = FlowTransform::new(DynamicsNet::from_layers(vec![SquashLayer::Plain(l)]).unwrap(), false);
        f.set_t1(t1).unwrap();
        f.solver = SolverConfig::dopri5(1e-9, 1e-9);
        let mut rng = seeded(4000 + k as u64);
        let x = uniform_cloud(50, d, -2.5, 2.5, &mut rng);
        let lp = f.log_prob(x.view(), None, &mut rng).unwrap();
        // x = e^{a (t1 - t0)} y with y ~ N(0, I).
        let s2 = (2.0 * a * (t1 - T0)).exp();
        for (row, v) in x.rows().into_iter().zip(lp.iter()) {
            let want = -0.5 * row.dot(&row) / s2 - 0.5 * d as f64 * (LN_2PI + s2.ln());
            worst_flow = worst_flow.max((v - want).abs());
        }
    }

    let mut worst_ent = 0.0f64;
    let mut rng = seeded(41);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let post = PosteriorGaussian {
            mu: Array1::from_shape_fn(n, |_| rng.random_range(-3.0..3.0)),
            sigma: Array1::from_shape_fn(n, |_| (rng.random_range(-4.0..2.0f64)).exp()),
        };
        let want: f64 = post.sigma.iter().map(|s| 0.5 * (1.0 + LN_2PI) + s.ln()).sum();
        worst_ent = worst_ent.max((posterior_entropy(&post) - want).abs());
    }

    let mut worst_bn = 0.0f64;
    for k in 0..100 {
        let d = 1 + k % 4;
        let mut bn = MovingBatchNorm::new(d);
        randomize_norm(&mut bn, &mut rng);
        let want: f64 = (0..d).map(|i| bn.gamma.values()[i].abs().ln() - bn.running_std[i].ln()).sum();
        let x = uniform_cloud(3, d, -1.0, 1.0, &mut rng);
        let (_, got) = bn.forward_eval(x.view()).unwrap();
        let (_, inv) = bn.inverse(x.view()).unwrap();
        worst_bn = worst_bn.max((got - want).abs()).max((inv + want).abs());
    }

    report(
        4,
        "closed-form oracles",
        worst_flow < 1e-5 && worst_ent < 1e-12 && worst_bn < 1e-12,
        &format!("linear flow density {worst_flow:.1e}, posterior entropy {worst_ent:.1e}, batch-norm logdet {worst_bn:.1e}"),
    );
}

/// Minimum over all permutations of the summed Euclidean matching cost.
fn brute_force_emd(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    fn go(x: &Array2<f64>, y: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == x.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..y.nrows() {
            if !used[j] {
                used[j] = true;
                let c = (&x.row(row) - &y.row(j)).mapv(|v| v * v).sum().sqrt();
                go(x, y, row + 1, used, acc + c, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(x, y, 0, &mut vec![false; y.nrows()], 0.0, &mut best);
    best
}

#[test]
fn criterion_05_emd_exactness() {
    let start = Instant::now();
    let mut rng = seeded(5);
    let mut worst_exact = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=7);
        let d = rng.random_range(2..=3);
        let x = uniform_cloud(n, d, -1.0, 1.0, &mut rng);
        let y = uniform_cloud(n, d, -1.0, 1.0, &mut rng);
        worst_exact = worst_exact.max((emd_exact(x.view(), y.view()).unwrap() - brute_force_emd(&x, &y)).abs());
    }
    let eps = 1e-3;
    let n = 64;
    let mut worst_gap = 0.0f64;
    let mut below = 0;
    for _ in 0..100 {
        let x = uniform_cloud(n, 3, -1.0, 1.0, &mut rng);
        let y = uniform_cloud(n, 3, -1.0, 1.0, &mut rng);
        let exact = emd_exact(x.view(), y.view()).unwrap();
        let approx = emd_approx(x.view(), y.view(), eps).unwrap();
        if approx < exact - 1e-9 {
            below += 1;
        }
        worst_gap = worst_gap.max(approx - exact);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        "EMD exactness",
        worst_exact < 1e-12 && below == 0 && worst_gap <= n as f64 * eps && secs < 60.0,
        &format!(
            "hungarian vs brute force {worst_exact:.1e} (200 cases); auction gap {worst_gap:.2e} <= {:.2e} (100 cases, n=64); {secs:.1}s",
            n as f64 * eps
        ),
    );
}

#[test]
fn criterion_06_metric_statistics() {
    let family = ShapeFamily::Circle2d { radius: [0.5, 1.5] };
    let set = |seed: u64, trial: u64| {
        CloudSet::new(
            (0..100)
                .map(|i| pointflow::data::gen_shape(&family, 64, &mut derived(seed, trial * 1000 + i)).unwrap())
                .collect(),
        )
        .unwrap()
    };
    let nnas: Vec<f64> = (0..20).map(|t| one_nna(&set(61, t), &set(62, t), Distance::Chamfer).unwrap()).collect();
    let mean = nnas.iter().sum::<f64>() / nnas.len() as f64;

    let a = set(63, 0);
    let jsd_same = jsd(&a, &a, 28).unwrap();
    // Two blobs in opposite corners never share a voxel.
    let mut rng = seeded(64);
    let blob = |c: f64, rng: &mut Rng| {
        CloudSet::new((0..10).map(|_| PointCloud::new(uniform_cloud(50, 3, c - 0.2, c + 0.2, rng)).unwrap()).collect()).unwrap()
    };
    let (p, q) = (blob(-1.0, &mut rng), blob(1.0, &mut rng));
    let jsd_disjoint = jsd(&p, &q, 28).unwrap();
    let ln2 = std::f64::consts::LN_2;

    report(
        6,
        "metric statistics",
        (0.40..=0.60).contains(&mean) && jsd_same == 0.0 && (jsd_disjoint - ln2).abs() < 1e-12,
        &format!(
            "mean 1-NNA {mean:.4} over 20 trials (min {:.3}, max {:.3}); JSD identical {jsd_same:e}; JSD disjoint - ln 2 = {:.1e}",
            nnas.iter().cloned().fold(f64::INFINITY, f64::min),
            nnas.iter().cloned().fold(0.0, f64::max),
            jsd_disjoint - ln2
        ),
    );
}

/// The configuration of the end-to-end run: circles of radius 0.5 to 1.5,
/// 200 training shapes of 256 points, 16 latent dimensions, 400 epochs.
fn reference_config() -> (Dataset, ModelConfig, TrainConfig) {
    let data = Dataset::build(&DataConfig {
        family: ShapeFamily::Circle2d { radius: [0.5, 1.5] },
        train_shapes: 200,
        test_shapes: 50,
        points: 256,
        seed: 1,
    })
    .unwrap();
    let mut cfg = ModelConfig::new(2, 16);
    cfg.encoder = EncoderConfig {
        pointwise: vec![64, 64, 128],
        head: vec![64],
    };
    cfg.prior_hidden = vec![32, 32];
    cfg.decoder_hidden = vec![32, 32, 32];
    cfg.solver.train = SolverConfig::rk4(5);
    // slow running statistics: batch-to-batch spread of the pooled std is ~7%
    cfg.batch_norm_momentum = 0.001;
    let mut tc = TrainConfig::new(400);
    tc.batch_size = 16;
    tc.seed = 3;
    tc.grad_clip = Some(10.0);
    (data, cfg, tc)
}

fn small_run(prior_mode: PriorMode, epochs: usize) -> (Dataset, ModelConfig, TrainConfig) {
    let data = Dataset::build(&DataConfig {
        family: ShapeFamily::Circle2d { radius: [0.5, 1.5] },
        train_shapes: 10,
        test_shapes: 2,
        points: 32,
        seed: 9,
    })
    .unwrap();
    let mut cfg = ModelConfig::new(2, 4);
    cfg.prior_mode = prior_mode;
    cfg.encoder = EncoderConfig {
        pointwise: vec![16, 16],
        head: vec![16],
    };
    cfg.prior_hidden = vec![8];
    cfg.decoder_hidden = vec![8, 8];
    cfg.solver.train = SolverConfig::rk4(4);
    let mut tc = TrainConfig::new(epochs);
    tc.batch_size = 4;
    tc.seed = 17;
    tc.grad_clip = Some(10.0);
    (data, cfg, tc)
}

#[test]
fn criterion_08_gaussian_prior_switch() {
    let (data, cfg, tc) = reference_config();
    let mut gauss_cfg = cfg.clone();
    gauss_cfg.prior_mode = PriorMode::Gaussian;
    let mut short = tc.clone();
    short.epochs = 2;
    let mut trainer = Trainer::new(PointFlowModel::new(gauss_cfg, &mut seeded(8)).unwrap(), short).unwrap();
    let trained = trainer.fit(&data.train, None);
    let trains = trained.as_ref().is_ok_and(|logs| logs.iter().all(|l| l.elbo.is_finite()));

    // Same parameters, same noise: only the prior term may change.
    let cnf = PointFlowModel::new(cfg, &mut seeded(80)).unwrap();
    let mut gauss = cnf.clone();
    gauss.config.prior_mode = PriorMode::Gaussian;
    let mut exact = true;
    let mut worst = 0.0f64;
    for i in 0..10 {
        let mut rng = derived(81, i);
        let eps = vec![pointflow::model::standard_normal_vec(cnf.dz(), &mut rng)];
        let solver = cnf.config.solver.train.clone();
        let a = cnf.elbo_with(data.test[i as usize].view(), &eps, &solver, &mut seeded(0)).unwrap();
        let b = gauss.elbo_with(data.test[i as usize].view(), &eps, &solver, &mut seeded(0)).unwrap();
        exact &= a.l_recon.to_bits() == b.l_recon.to_bits() && a.l_ent.to_bits() == b.l_ent.to_bits();
        // The only remaining difference is the rounding of the three-term sums.
        let gap = ((a.elbo - b.elbo) - (a.l_prior - b.l_prior)).abs();
        worst = worst.max(gap / (f64::EPSILON * a.elbo.abs().max(b.elbo.abs())));
    }
    report(
        8,
        "gaussian prior switch",
        trains && exact && worst <= 4.0,
        &format!(
            "gaussian-prior training {}; recon and entropy terms bit-identical: {exact}; ELBO gap minus prior gap <= {worst:.1} ulp of the ELBO",
            match &trained {
                Ok(logs) => format!("ok (ELBO {:.1} -> {:.1})", logs[0].elbo, logs.last().unwrap().elbo),
                Err(e) => format!("failed: {e}"),
            }
        ),
    );
}

#[test]
fn criterion_09_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, tc) = small_run(PriorMode::Cnf, 5);
    let run = |out: &std::path::Path| {
        let mut t = Trainer::new(PointFlowModel::new(cfg.clone(), &mut seeded(90)).unwrap(), tc.clone()).unwrap();
        t.fit(&data.train, Some(out)).unwrap();
        std::fs::read(out.join("train_log.jsonl")).unwrap()
    };
    let identical_logs = run(&dir.path().join("a")) == run(&dir.path().join("b"));

    // Two epochs, a trip through checkpoint bytes, three more; against five straight.
    let mut straight = Trainer::new(PointFlowModel::new(cfg.clone(), &mut seeded(90)).unwrap(), tc.clone()).unwrap();
    let full: Vec<_> = (0..5).map(|_| straight.run_epoch(&data.train).unwrap()).collect();
    let mut first = Trainer::new(PointFlowModel::new(cfg.clone(), &mut seeded(90)).unwrap(), tc.clone()).unwrap();
    for _ in 0..2 {
        first.run_epoch(&data.train).unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let mut resume_err = 0.0f64;
    for want in &full[2..] {
        let got = resumed.run_epoch(&data.train).unwrap();
        for (a, b) in [(got.elbo, want.elbo), (got.l_prior, want.l_prior), (got.l_recon, want.l_recon), (got.l_ent, want.l_ent)] {
            resume_err = resume_err.max((a - b).abs());
        }
    }

    let path = dir.path().join("c.ckpt");
    straight.checkpoint().save(&path).unwrap();
    let ckpt_exact = Checkpoint::load(&path).unwrap().to_bytes().unwrap() == std::fs::read(&path).unwrap();

    let mut rng = seeded(91);
    let mut pts = uniform_cloud(200, 3, -1e3, 1e3, &mut rng);
    pts[[0, 0]] = 1e-300;
    pts[[1, 1]] = -0.0;
    pts[[2, 2]] = f64::MAX;
    pts[[3, 0]] = 0.1 + 0.2;
    let cloud = PointCloud::new(pts).unwrap();
    save_xyz(&cloud, dir.path().join("c.xyz")).unwrap();
    let back = load_xyz(dir.path().join("c.xyz")).unwrap();
    let xyz_exact = back.points().iter().zip(cloud.points().iter()).all(|(a, b)| a.to_bits() == b.to_bits());

    report(
        9,
        "determinism and persistence",
        identical_logs && resume_err <= 1e-12 && ckpt_exact && xyz_exact,
        &format!(
            "identical logs: {identical_logs}; resume max diff over 3 epochs {resume_err:.1e}; checkpoint bytes round trip: {ckpt_exact}; xyz bits round trip: {xyz_exact}"
        ),
    );
}

fn sampled_set(model: &PointFlowModel, n: usize, m: usize, seed: u64) -> CloudSet {
    let clouds = pointflow::cli::sample_shapes(model, n, m, seed).unwrap();
    CloudSet::new(clouds.into_iter().map(|c| PointCloud::new(c).unwrap()).collect()).unwrap()
}

#[test]
fn criterion_07_end_to_end_learning() {
    let start = Instant::now();
    let (data, cfg, tc) = reference_config();
    let n_eval = 50;
    let held_out = CloudSet::new(data.test.clouds()[..n_eval].to_vec()).unwrap();

    // Noise floor first: chamfer between two independent samplings of the
    // same held-out shapes.
    let fresh: Vec<PointCloud> = (0..n_eval)
        .map(|i| data.resample(&data.test_params[i], 256, &mut derived(700, i as u64)).unwrap())
        .collect();
    let floor = (0..n_eval)
        .map(|i| pointflow::metrics::chamfer(held_out[i].view(), fresh[i].view()).unwrap())
        .sum::<f64>()
        / n_eval as f64;

    let model = PointFlowModel::new(cfg, &mut derived(tc.seed, 0x6d6f_6465_6c00)).unwrap();
    let nna_untrained = one_nna(&sampled_set(&model, n_eval, 256, 71), &held_out, Distance::Chamfer).unwrap();

    let mut trainer = Trainer::new(model, tc).unwrap();
    let mut elbo_first = None;
    let mut elbo_last = None;
    let epochs = trainer.config.epochs;
    trainer
        .fit_with(&data.train, None, &mut |t, log| {
            if log.epoch == 1 || log.epoch == epochs {
                let e = pointflow::train::evaluate_elbo(&t.model, &data.test, 4, 72)?.elbo;
                if log.epoch == 1 {
                    elbo_first = Some(e);
                } else {
                    elbo_last = Some(e);
                }
            }
            Ok(())
        })
        .unwrap();
    let (first, last) = (elbo_first.unwrap(), elbo_last.unwrap());
    let model = trainer.model;

    let nna = one_nna(&sampled_set(&model, n_eval, 256, 73), &held_out, Distance::Chamfer).unwrap();
    let recon_cd = (0..n_eval)
        .map(|i| {
            let r = model.reconstruct(held_out[i].view(), 256, &mut derived(74, i as u64)).unwrap();
            pointflow::metrics::chamfer(r.view(), fresh[i].view()).unwrap()
        })
        .sum::<f64>()
        / n_eval as f64;

    let pass_a = last - first >= 20.0;
    let pass_b = nna <= 0.80 && nna < nna_untrained && nna_untrained > 0.95;
    let pass_c = recon_cd < 3.0 * floor;
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        "end-to-end learning",
        pass_a && pass_b && pass_c,
        &format!(
            "(a) test ELBO {first:.2} -> {last:.2} (+{:.2}) {}; (b) 1-NNA-CD {nna:.3} vs untrained {nna_untrained:.3} {}; \
             (c) recon CD {recon_cd:.4} vs 3 x floor {:.4} {}; {:.1} min",
            last - first,
            ok(pass_a),
            ok(pass_b),
            3.0 * floor,
            ok(pass_c),
            secs / 60.0
        ),
    );
}

fn ok(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "missed"
    }
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[((v.len() - 1) as f64 * q).round() as usize]
}

/// 90th percentiles of two sphere residuals over sampled shapes, in data
/// coordinates: distance to the nearest sphere of the family, and relative
/// distance to the sphere fitted to each cloud (median radius).
fn sphere_residuals(model: &PointFlowModel, data: &Dataset, m: usize, radius: [f64; 2]) -> (f64, Option<f64>, bool) {
    let clouds = pointflow::cli::sample_shapes(model, 20, m, 100 + m as u64).unwrap();
    let mut finite = true;
    let (mut family, mut fitted) = (Vec::new(), Vec::new());
    for c in clouds {
        finite &= c.nrows() == m && c.ncols() == 3 && c.iter().all(|v| v.is_finite());
        let c = data.stats.invert(&PointCloud::new(c).unwrap()).unwrap();
        let norms: Vec<f64> = c.points().rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        family.extend(norms.iter().map(|n| (radius[0] - n).max(n - radius[1]).max(0.0)));
        if m > 1 {
            let r = percentile(norms.clone(), 0.5);
            fitted.extend(norms.iter().map(|n| (n - r).abs() / r));
        }
    }
    let fitted = (!fitted.is_empty()).then(|| percentile(fitted, 0.9));
    (percentile(family, 0.9), fitted, finite)
}

#[test]
fn criterion_10_arbitrary_sample_size() {
    let radius = [0.8, 1.2];
    let data = Dataset::build(&DataConfig {
        family: ShapeFamily::Sphere { radius },
        train_shapes: 40,
        test_shapes: 1,
        points: 256,
        seed: 10,
    })
    .unwrap();
    let mut cfg = ModelConfig::new(3, 8);
    cfg.encoder = EncoderConfig {
        pointwise: vec![32, 64],
        head: vec![32],
    };
    cfg.prior_hidden = vec![16];
    cfg.decoder_hidden = vec![32, 32];
    cfg.solver.train = SolverConfig::rk4(5);
    let untrained = PointFlowModel::new(cfg, &mut seeded(10)).unwrap();
    let mut tc = TrainConfig::new(120);
    tc.batch_size = 8;
    tc.grad_clip = Some(10.0);
    let mut trainer = Trainer::new(untrained.clone(), tc).unwrap();
    trainer.fit(&data.train, None).unwrap();

    let (family_tol, fitted_tol) = (0.02, 0.10);
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [1, 100, 4096] {
        let (family, fitted, finite) = sphere_residuals(&trainer.model, &data, m, radius);
        let (base_family, base_fitted, _) = sphere_residuals(&untrained, &data, m, radius);
        pass &= finite && family < family_tol && fitted.is_none_or(|f| f < fitted_tol);
        // The check must be able to tell a sphere from an untrained blob.
        pass &= base_family >= family_tol && base_fitted.is_none_or(|f| f >= fitted_tol);
        let fit = |f: Option<f64>| f.map_or("-".to_string(), |v| format!("{v:.3}"));
        parts.push(format!(
            "M={m}: finite {finite}, family {family:.3} (untrained {base_family:.3}), fitted {} (untrained {})",
            fit(fitted),
            fit(base_fitted)
        ));
    }
    report(
        10,
        "arbitrary sample size",
        pass,
        &format!("90th-percentile residuals, thresholds {family_tol}/{fitted_tol}; {}", parts.join("; ")),
    );
}
