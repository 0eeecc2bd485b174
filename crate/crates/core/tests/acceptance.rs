//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! The learning criteria (4 to 7) train on a synthetic five-scene suite of eight
//! 60 s sequences per scene. Criterion 4 trains for the full 200 epochs; the
//! perturbation, ablation and self-training sweeps use the reduced 50-epoch mode.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use phoneloc::baselines::{gps_baseline, particle_filter, FtmObservation, GpsObservation, ParticleFilterConfig};
use phoneloc::calib::{calibrate_scene, ReferencePoint};
use phoneloc::dataset::{split_dataset, Correspondence, FeatureMask};
use phoneloc::eval::{
    ablation, calibrate, compare_methods, evaluate_methods, perturbation_sweep, standard_suite, window_scenes,
    ExperimentConfig, Method, ACCEPTANCE_LEVELS,
};
use phoneloc::gan::{
    self, embedding_loss, lsgan_d_loss, lsgan_g_loss, regularizer, Batch, GanModel, Normalizer, EMBED_DIM,
};
use phoneloc::geodesy::{
    camera_to_world, ecef_to_enu, enu_to_ecef, geodetic_to_enu, project, wgs84_to_ecef, CameraIntrinsics,
    GeodeticCoord, WorldCameraTransform,
};
use phoneloc::nn::{grad_check, leaky_relu, leaky_relu_backward, BatchNorm, BiLstm, Linear, Mode, Params, TrainConfig};
use phoneloc::rng::{self, Rng};
use phoneloc::selftrain::{selftrain_iteration, unlabeled_groups, SelfTrainConfig};
use phoneloc::sim::{generate_scenes, write_scene, Scene, SceneConfig};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_rel(results: impl IntoIterator<Item = f64>) -> f64 {
    results.into_iter().fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn rand_matrix(r: usize, c: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

/// Linear, eval-mode batch norm and leaky ReLU chained into a weighted sum.
fn dense_stack_error(rng: &mut Rng) -> f64 {
    let l1 = Linear::new(4, 5, rng);
    let mut bn = BatchNorm::new(5);
    bn.gamma = rand_matrix(1, 5, rng) + 1.5;
    bn.beta = rand_matrix(1, 5, rng);
    bn.running_mean = rand_matrix(1, 5, rng).row(0).to_owned();
    bn.running_var = rand_matrix(1, 5, rng).row(0).mapv(|v| v.abs() + 0.5);
    let l2 = Linear::new(5, 3, rng);
    let x = rand_matrix(6, 4, rng);
    let wts = rand_matrix(6, 3, rng);
    let loss = |a1: &Linear, ab: &BatchNorm, a2: &Linear, x: &Array2<f64>| {
        let (n, _) = ab.forward(&a1.forward(x), Mode::Eval).unwrap();
        (a2.forward(&leaky_relu(&n, 0.2)) * &wts).sum()
    };

    let h = l1.forward(&x);
    let (n, cache) = bn.forward(&h, Mode::Eval).unwrap();
    let a = leaky_relu(&n, 0.2);
    let (mut g1, mut gb, mut g2) = (l1.zeros_like(), bn.zeros_like(), l2.zeros_like());
    let da = l2.backward(&a, &wts, &mut g2);
    let dn = leaky_relu_backward(&n, &da, 0.2);
    let dh = bn.backward(&cache, &dn, &mut gb);
    let dx = l1.backward(&x, &dh, &mut g1);

    let mut analytic = g1.flatten();
    analytic.extend(gb.flatten());
    analytic.extend(g2.flatten());
    analytic.extend(dx.iter().copied());
    let mut theta = l1.flatten();
    theta.extend(bn.flatten());
    theta.extend(l2.flatten());
    theta.extend(x.iter().copied());
    let (n1, nb, n2) = (l1.param_count(), bn.param_count(), l2.param_count());
    grad_check(
        |t| {
            let (mut a1, mut ab, mut a2) = (l1.clone(), bn.clone(), l2.clone());
            a1.unflatten(&t[..n1]);
            ab.unflatten(&t[n1..n1 + nb]);
            a2.unflatten(&t[n1 + nb..n1 + nb + n2]);
            let xx = Array2::from_shape_vec(x.raw_dim(), t[n1 + nb + n2..].to_vec()).unwrap();
            loss(&a1, &ab, &a2, &xx)
        },
        &theta,
        &analytic,
        1e-5,
    )
    .max_rel_err
}

fn lstm_error(rng: &mut Rng) -> f64 {
    let m = BiLstm::new(3, 6, rng);
    let seq = Array3::from_shape_simple_fn((2, 10, 3), || rng.random_range(-1.0..1.0));
    let wts = rand_matrix(2, 6, rng);
    let (_, cache) = m.forward(&seq);
    let mut g = m.zeros_like();
    let dseq = m.backward(&cache, &wts, &mut g);
    let mut analytic = g.flatten();
    analytic.extend(dseq.iter().copied());
    let mut theta = m.flatten();
    theta.extend(seq.iter().copied());
    let np = m.param_count();
    grad_check(
        |t| {
            let mut mm = m.clone();
            mm.unflatten(&t[..np]);
            let s = Array3::from_shape_vec(seq.raw_dim(), t[np..].to_vec()).unwrap();
            (mm.forward(&s).0 * &wts).sum()
        },
        &theta,
        &analytic,
        1e-5,
    )
    .max_rel_err
}

fn random_record(rng: &mut Rng, ped: usize) -> Correspondence {
    let mut f = || rng.random_range(-2.0..2.0);
    Correspondence {
        scene: "s".into(),
        seq: 0,
        ped,
        t0: 0.0,
        v: std::array::from_fn(|_| std::array::from_fn(|_| f())),
        p: std::array::from_fn(|_| std::array::from_fn(|_| f())),
        rssi: std::array::from_fn(|_| f()),
        c_gnd: std::array::from_fn(|_| f() * 3.0),
        minted: false,
    }
}

/// Model with randomized normalization statistics and dropout off.
fn random_model(rng: &mut Rng, seed: u64) -> GanModel {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let records: Vec<_> = (0..8).map(|i| random_record(rng, i)).collect();
    let norm = Normalizer::fit(&records, &FeatureMask::FULL).unwrap();
    let mut m = GanModel::new(FeatureMask::FULL, norm, &cfg).unwrap();
    for bn in m.gen.bn.iter_mut().chain(m.disc.bn.iter_mut()) {
        bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
        bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    m.dropout_rate = 0.0;
    m
}

fn g_objective(m: &GanModel, b: &Batch) -> f64 {
    let mut rng = rng::derive(0, "unused");
    let fwd = m.g_forward(b, Mode::Eval, &mut rng).unwrap();
    let s = m.g_step(b, &fwd, Mode::Eval).unwrap();
    s.l_emb + s.l_g_adv + s.l_reg
}

/// Full adversarial objective: every discriminator parameter and a sample of
/// every encoder and generator tensor.
fn gan_loss_errors(rng: &mut Rng, seed: u64) -> (f64, f64) {
    let m = random_model(rng, seed);
    let recs: Vec<_> = (0..3).map(|i| random_record(rng, i)).collect();
    let b = m.batch(&recs.iter().collect::<Vec<_>>());

    let fake = rand_matrix(3, 3, rng);
    let analytic = m.d_step(&b, &fake, Mode::Eval).unwrap().grads.flatten();
    let d = grad_check(
        |t| {
            let mut mm = m.clone();
            mm.disc.unflatten(t);
            mm.d_step(&b, &fake, Mode::Eval).unwrap().l_d
        },
        &m.disc.flatten(),
        &analytic,
        1e-5,
    );

    let flat = |m: &GanModel| {
        let mut v = m.enc_v.flatten();
        v.extend(m.enc_p.flatten());
        v.extend(m.gen.flatten());
        v
    };
    let (nv, np) = (m.enc_v.param_count(), m.enc_p.param_count());
    let mut fwd_rng = rng::derive(0, "unused");
    let fwd = m.g_forward(&b, Mode::Eval, &mut fwd_rng).unwrap();
    let analytic = m.g_step(&b, &fwd, Mode::Eval).unwrap().grads.flatten();
    let theta = flat(&m);
    // Up to eight evenly spaced entries of every tensor, offset per instance.
    let mut sizes: Vec<usize> = m.enc_v.params().iter().map(|p| p.len()).collect();
    sizes.extend(m.enc_p.params().iter().map(|p| p.len()));
    sizes.extend(m.gen.params().iter().map(|p| p.len()));
    let mut idx = Vec::new();
    let mut offset = 0;
    for len in sizes {
        let step = len.div_ceil(8);
        idx.extend((seed as usize % step..len).step_by(step).map(|i| offset + i));
        offset += len;
    }
    let g = grad_check(
        |t| {
            let mut full = theta.clone();
            for (k, &i) in idx.iter().enumerate() {
                full[i] = t[k];
            }
            let mut mm = m.clone();
            mm.enc_v.unflatten(&full[..nv]);
            mm.enc_p.unflatten(&full[nv..nv + np]);
            mm.gen.unflatten(&full[nv + np..]);
            g_objective(&mm, &b)
        },
        &idx.iter().map(|&i| theta[i]).collect::<Vec<_>>(),
        &idx.iter().map(|&i| analytic[i]).collect::<Vec<_>>(),
        1e-4,
    );
    (d.max_rel_err, g.max_rel_err)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let (mut dense, mut lstm, mut disc, mut gen) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let instances = 20;
    for seed in 0..instances {
        let mut rng = rng::derive(seed, "acceptance/grad");
        dense = dense.max(dense_stack_error(&mut rng));
        lstm = lstm.max(lstm_error(&mut rng));
        let (d, g) = gan_loss_errors(&mut rng, seed);
        disc = disc.max(d);
        gen = gen.max(g);
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = max_rel([dense, lstm, disc, gen]);
    check(
        worst < 1e-4 && secs < 60.0,
        format!(
            "{instances} instances, max rel err dense {dense:.1e} lstm {lstm:.1e} D loss {disc:.1e} G loss {gen:.1e}, {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Calibration oracle

fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

fn criterion_calibration() -> Outcome {
    let start = Instant::now();
    let k = CameraIntrinsics::default();
    let (mut rot, mut trans, mut reproj) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = rng::derive(seed, "acceptance/pose");
        let center = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(2.0..3.0),
        );
        let t = WorldCameraTransform::looking_from(center, rng.random_range(-180.0..180.0), rng.random_range(5.0..30.0));
        let mut refs = Vec::new();
        while refs.len() < 6 {
            let pc = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..20.0));
            let world = camera_to_world(&t, &pc);
            let pixel = project(&k, &t, &world).unwrap();
            if k.contains(&pixel) {
                refs.push(ReferencePoint { world, pixel });
            }
        }
        let r = calibrate_scene(&refs, &k, None).map_err(|e| format!("pose {seed}: {e}"))?;
        rot = rot.max(rotation_angle(&r.transform.rotation, &t.rotation));
        trans = trans.max((r.transform.translation - t.translation).norm());
        reproj = reproj.max(r.reprojection_avg);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        rot < 1e-6 && trans < 1e-6 && reproj < 1e-6 && secs < 60.0,
        format!("100 poses, max rotation {rot:.1e} rad, translation {trans:.1e} m, reprojection {reproj:.1e} px"),
    )
}

// ---------------------------------------------------------------------------
// 3. Geodesy round trips

fn criterion_geodesy() -> Outcome {
    let mut rng = rng::derive(0, "acceptance/geodesy");
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 1000 {
        let origin = GeodeticCoord::new(
            rng.random_range(-80.0..80.0),
            rng.random_range(-180.0..180.0),
            rng.random_range(-100.0..2000.0),
        )
        .unwrap();
        // About 0.1 degree of latitude is 11 km; points beyond 10 km are rejected.
        let g = GeodeticCoord::new(
            origin.lat + rng.random_range(-0.1..0.1),
            (origin.lon + rng.random_range(-0.1..0.1)).clamp(-180.0, 180.0),
            origin.alt + rng.random_range(-500.0..500.0),
        )
        .unwrap();
        let ecef = wgs84_to_ecef(&g);
        if (ecef - wgs84_to_ecef(&origin)).norm() > 10_000.0 {
            continue;
        }
        let enu = ecef_to_enu(&ecef, &origin);
        let back = enu_to_ecef(&enu, &origin);
        let via_geodetic = enu_to_ecef(&geodetic_to_enu(&g, &origin), &origin);
        worst = worst.max((back - ecef).norm()).max((via_geodetic - ecef).norm());
        n += 1;
    }
    check(worst < 1e-6, format!("1000 points, max round-trip error {worst:.1e} m"))
}

// ---------------------------------------------------------------------------
// 4 to 7. Learning criteria

const SUITE_SEED: u64 = 7;
const SEQUENCES: u32 = 8;
const DURATION: f64 = 60.0;
const HOP: f64 = 1.5;

fn reduced(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        lr_drop_epoch: 25,
        seed,
        ..TrainConfig::default()
    }
}

fn experiment(train: TrainConfig) -> ExperimentConfig {
    ExperimentConfig {
        hop: HOP,
        split_seed: 0,
        train,
        ..ExperimentConfig::default()
    }
}

struct Suite {
    scenes: Vec<Scene>,
    calibrated: Vec<WorldCameraTransform>,
}

fn suite(cfgs: &[SceneConfig]) -> Suite {
    let scenes = generate_scenes(cfgs).expect("suite simulates");
    let calibrated = scenes.iter().map(|s| calibrate(s).expect("calibrates").transform).collect();
    Suite { scenes, calibrated }
}

fn criterion_ordering(s: &Suite) -> Outcome {
    let peds: usize = s.scenes.iter().filter(|x| x.config.sequence == 0).map(|x| x.pedestrians.len()).sum();
    let cfg = experiment(TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    });
    let c = compare_methods(&s.scenes, &s.calibrated, &cfg).map_err(|e| e.to_string())?;
    let avg = |m| c.table.overall(m).expect("overall row").avg;
    let (gan, pf, gps) = (avg(Method::Gan), avg(Method::ParticleFilter), avg(Method::PhoneGps));
    check(
        peds >= 10 && gan < pf && pf < gps && gan <= 0.5 * gps,
        format!("{peds} pedestrians, {} epochs: GAN {gan:.3} m < PF {pf:.3} m < GPS {gps:.3} m", cfg.train.epochs),
    )
}

fn criterion_perturbation(s: &Suite) -> Outcome {
    let rows = perturbation_sweep(&s.scenes, &s.calibrated, &ACCEPTANCE_LEVELS, &experiment(reduced(1)), 5)
        .map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &rows {
        let gan = r.table.overall(Method::Gan).expect("overall").avg;
        let gps = r.table.overall(Method::PhoneGps).expect("overall").avg;
        ok &= gan < gps;
        parts.push(format!("({}°,{} m) GAN {gan:.3} vs GPS {gps:.3}", r.level.sigma_theta, r.level.sigma_t));
    }
    check(ok && rows.len() == 4, parts.join("; "))
}

fn criterion_ablation(s: &Suite) -> Outcome {
    let records = window_scenes(&s.scenes, &s.calibrated, HOP).map_err(|e| e.to_string())?;
    let masks = FeatureMask::ablation_set();
    let rows = ablation(&records, &masks, &experiment(reduced(1))).map_err(|e| e.to_string())?;
    let avg = |m: FeatureMask| rows.iter().find(|r| r.mask == m).expect("mask row").stats.avg;
    let full = avg(FeatureMask::FULL);
    let mut ok = true;
    let mut parts = vec![format!("full {full:.3}")];
    for single in ["ftm", "imu", "gps"] {
        let a = avg(single.parse().unwrap());
        ok &= full <= 1.05 * a;
        parts.push(format!("{single} {a:.3}"));
    }
    let pairs = masks.iter().filter_map(|m| m.rssi_swapped().filter(|s| masks.contains(s)).map(|s| (*m, s)));
    for (m, swapped) in pairs {
        let (a, b) = (avg(m), avg(swapped));
        ok &= a <= 1.05 * b;
        parts.push(format!("{m} {a:.3} vs {swapped} {b:.3}"));
    }
    check(ok, parts.join(", "))
}

fn criterion_selftrain() -> Outcome {
    let mut parts = Vec::new();
    let (mut ok, mut gains) = (true, 0);
    for seed in 0..3u64 {
        let mut cfgs = standard_suite(100 + seed, SEQUENCES, DURATION);
        for c in cfgs.iter_mut() {
            c.min_separation = 2.0;
            c.gps_difficulty = 0.0;
        }
        let s = suite(&cfgs);
        let records = window_scenes(&s.scenes, &s.calibrated, 1.0).map_err(|e| e.to_string())?;
        let (train, test) = split_dataset(&records, seed);
        let labeled: Vec<_> = train.iter().filter(|r| r.ped == 0).cloned().collect();
        let groups = unlabeled_groups(&train, &[0]);
        let tc = reduced(seed);
        let norm = Normalizer::fit(&labeled, &FeatureMask::FULL).map_err(|e| e.to_string())?;
        let mut model = GanModel::new(FeatureMask::FULL, norm, &tc).map_err(|e| e.to_string())?;
        gan::train(&mut model, &labeled, &tc).map_err(|e| e.to_string())?;
        let st = SelfTrainConfig {
            seed,
            ..SelfTrainConfig::default()
        };
        let r = selftrain_iteration(&mut model, &labeled, &groups, &test, &st, 1).map_err(|e| e.to_string())?;
        let precision = r.precision.unwrap_or(0.0);
        ok &= precision >= 0.7 && r.post_error <= r.pre_error;
        gains += usize::from(r.post_error < r.pre_error);
        parts.push(format!("seed {seed}: precision {precision:.3}, {:.3} -> {:.3} m", r.pre_error, r.post_error));
    }
    check(ok && gains >= 2, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 8. Loss identities

fn criterion_losses() -> Outcome {
    let c = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
    let reg = regularizer(&c, &c);
    let d = lsgan_d_loss(&[0.5; 4], &[0.5; 4]);
    let g = lsgan_g_loss(&[0.5; 4]);
    let mut ev = Array2::zeros((1, EMBED_DIM));
    ev[[0, 0]] = 3.0;
    ev[[0, 1]] = 4.0;
    let emb = embedding_loss(&ev, &Array2::zeros((1, EMBED_DIM)));
    let ok = reg.abs() < 1e-12 && (d - 0.5).abs() < 1e-12 && (g - 0.25).abs() < 1e-12 && (emb - 5.0).abs() < 1e-12;
    check(ok, format!("reg(c,c) {reg}, d_loss {d}, g_adv {g}, embedding 3-4-5 {emb}"))
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Simulates, trains and evaluates once, returning every output as bytes.
fn pipeline_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfgs = standard_suite(21, 2, 20.0);
    let s = suite(&cfgs);
    for scene in &s.scenes {
        write_scene(&dir.join(format!("{}_{}", scene.config.scene_id, scene.config.sequence)), scene).unwrap();
    }
    let records = window_scenes(&s.scenes, &s.calibrated, 1.0).unwrap();
    let (train, test) = split_dataset(&records, 0);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut model = GanModel::new(FeatureMask::FULL, Normalizer::fit(&train, &FeatureMask::FULL).unwrap(), &tc).unwrap();
    let history = gan::train(&mut model, &train, &tc).unwrap();
    model.save(&dir.join("model.json")).unwrap();
    gan::write_loss_csv(&dir.join("loss.csv"), &history).unwrap();
    let gps: Vec<_> = test.iter().map(|r| gps_baseline(&r.p)).collect();
    let table = evaluate_methods(&test, &[(Method::PhoneGps, gps), (Method::Gan, model.infer_records(&test).unwrap())])
        .unwrap();
    table.to_table().write_csv(&dir.join("eval.csv")).unwrap();
    read_tree(dir)
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline_bytes(&tmp.path().join("a"));
    let b = pipeline_bytes(&tmp.path().join("b"));
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();
    check(a == b, format!("{} files, {bytes} bytes compared", a.len()))
}

// ---------------------------------------------------------------------------
// 10. Particle filter with radially biased GPS

fn criterion_particle_filter() -> Outcome {
    let bias = 5.0;
    let mut means = Vec::new();
    for seed in 0..10u64 {
        let mut rng = rng::derive(seed, "acceptance/pf");
        let start = Vector3::new(rng.random_range(-4.0..4.0), 1.5, rng.random_range(6.0..14.0));
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let step = Vector3::new(heading.cos(), 0.0, heading.sin()) * 0.4;
        let truth: Vec<Vector3<f64>> = (0..40).map(|k| start + step * k as f64).collect();
        let gps: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(k, x)| GpsObservation {
                t: k as f64,
                pos: x + bias * x.normalize(),
            })
            .collect();
        let ftm: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(k, x)| FtmObservation {
                t: k as f64,
                range: x.norm(),
                std: 0.0,
            })
            .collect();
        let cfg = ParticleFilterConfig {
            seed,
            ..ParticleFilterConfig::default()
        };
        let est = particle_filter(&gps, &ftm, &Vector3::zeros(), &-Vector3::y(), &cfg).map_err(|e| e.to_string())?;
        let tail: Vec<f64> = est.iter().skip(20).map(|e| (Vector3::from(e.pos) - truth[e.t as usize]).norm()).collect();
        means.push(tail.iter().sum::<f64>() / tail.len() as f64);
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let worst = max_rel(means.iter().copied());
    check(
        mean <= 0.8 * bias && worst < bias,
        format!("bias {bias} m, steady-state error mean {mean:.3} m, worst run {worst:.3} m over 10 runs"),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let r = f();
        let tag = if r.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &r {
            Ok(d) | Err(d) => d,
        };
        // Written past the harness capture so the summary shows in plain `cargo test` output.
        let line = format!("[{tag}] {name}: {detail} ({:.0}s)\n", start.elapsed().as_secs_f64());
        let _ = std::io::stdout().lock().write_all(line.as_bytes());
        results.push((name, r));
    };
    run("1 gradient correctness", &criterion_gradients);
    run("2 calibration oracle", &criterion_calibration);
    run("3 geodesy round trips", &criterion_geodesy);
    let s = suite(&standard_suite(SUITE_SEED, SEQUENCES, DURATION));
    run("4 end-to-end ordering", &|| criterion_ordering(&s));
    run("5 perturbation robustness", &|| criterion_perturbation(&s));
    run("6 ablation ordering", &|| criterion_ablation(&s));
    run("7 self-training", &criterion_selftrain);
    run("8 loss identities", &criterion_losses);
    run("9 determinism", &criterion_determinism);
    run("10 particle filter", &criterion_particle_filter);
    let failed: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
