use std::path::{Path, PathBuf};

use phoneloc::baselines::ParticleFilterConfig;
use phoneloc::calib::CalibrationResult;
use phoneloc::dataset::{self, Correspondence, FeatureMask};
use phoneloc::eval::{self, ExperimentConfig, Method, PerturbationLevel};
use phoneloc::gan::{self, GanModel, Normalizer};
use phoneloc::geodesy::WorldCameraTransform;
use phoneloc::nn::TrainConfig;
use phoneloc::selftrain::{self, SelfTrainConfig};
use phoneloc::sim::{self, NoiseConfig, Scene, SceneConfig};

use crate::settings::{key, required, Key, Settings};
use crate::CliError;

pub struct Command {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: Vec<Key>,
    pub run: fn(&Settings) -> Result<(), CliError>,
}

fn train_keys() -> Vec<Key> {
    vec![
        key("mask", "ftm+imu+gps", "Phone channels, e.g. ftm+imu+gps"),
        key("epochs", "200", "Training epochs"),
        key("batch_size", "32", "Minibatch size"),
        key("lr", "0.001", "Learning rate up to lr_drop_epoch"),
        key("lr_late", "0.0001", "Learning rate after lr_drop_epoch"),
        key("lr_drop_epoch", "100", "Last epoch at the initial learning rate"),
        key("dropout", "0.2", "Generator dropout rate"),
        key("leaky_slope", "0.2", "Leaky ReLU negative slope"),
    ]
}

fn pf_keys() -> Vec<Key> {
    vec![
        key("pf_particles", "1000", "Particle count"),
        key("pf_process_std", "1.0", "Random-walk noise, m per sqrt(s)"),
        key("pf_gps_std", "5.0", "GPS measurement std, m"),
        key("pf_resample", "0.5", "Resample below this effective-sample-size fraction"),
        key("pf_ftm_floor", "0.1", "Lower bound on FTM std, m"),
    ]
}

fn scene_keys() -> Vec<Key> {
    vec![
        required("scenes", "Scene directory, or a directory of scene directories"),
        required("calib", "Directory written by `calibrate`"),
    ]
}

fn data_keys() -> Vec<Key> {
    with(
        scene_keys(),
        vec![vec![
            key("hop", "0.333", "Window hop, s"),
            key("split_seed", "0", "Seed for the held-out sequence split"),
        ]],
    )
}

fn with(mut a: Vec<Key>, rest: Vec<Vec<Key>>) -> Vec<Key> {
    a.extend(rest.into_iter().flatten());
    a
}

pub fn commands() -> Vec<Command> {
    let seed = || key("seed", "0", "Global seed (default from VILOC_SEED)");
    let out = || required("out", "Output directory");
    vec![
        Command {
            name: "simulate",
            about: "Generate synthetic scenes with camera and phone streams",
            keys: vec![
                out(),
                seed(),
                key("suite", "false", "Generate the five-scene suite instead of one scene"),
                key("sequences", "3", "Recordings per suite scene"),
                key("scene_id", "scene1", "Scene identifier"),
                key("sequence", "0", "Sequence number"),
                key("duration", "180", "Recording length, s"),
                key("n_pedestrians", "2", "Pedestrians in the scene"),
                key("camera_height", "2.6", "Camera height, m"),
                key("camera_yaw", "0", "Camera heading, degrees clockwise from north"),
                key("camera_pitch", "15", "Camera downward tilt, degrees"),
                key("gps_difficulty", "0", "GPS bias multiplier minus one"),
                key("min_separation", "0", "Minimum pedestrian spacing, m"),
                key("gps_bias_std", "5", "Shared GPS bias std per axis, m"),
                key("zero_noise", "false", "Disable every noise source"),
            ],
            run: simulate,
        },
        Command {
            name: "calibrate",
            about: "Estimate each scene's camera pose from its reference points",
            keys: vec![required("scenes", "Scene directory, or a directory of scene directories"), out()],
            run: calibrate,
        },
        Command {
            name: "makedata",
            about: "Window streams into train and test correspondence files",
            keys: with(vec![out(), seed()], vec![data_keys()]),
            run: makedata,
        },
        Command {
            name: "train",
            about: "Train a model on a correspondence file",
            keys: with(vec![required("train", "Training JSONL"), out(), seed()], vec![train_keys()]),
            run: train,
        },
        Command {
            name: "eval",
            about: "Compare phone GPS, the particle filter and a trained model",
            keys: with(
                vec![required("model", "Model checkpoint"), required("test", "Test JSONL"), out(), seed()],
                vec![scene_keys(), pf_keys()],
            ),
            run: evaluate,
        },
        Command {
            name: "perturb",
            about: "Retrain and evaluate under perturbed camera extrinsics",
            keys: with(
                vec![out(), seed(), key("levels", "0:0,5:0.5,15:1.5,30:3", "degrees:meters pairs")],
                vec![data_keys(), train_keys(), pf_keys()],
            ),
            run: perturb,
        },
        Command {
            name: "ablate",
            about: "Retrain with each phone feature subset",
            keys: with(
                vec![out(), seed(), key("masks", "all", "Comma-separated masks, or `all`")],
                vec![data_keys(), train_keys()],
            ),
            run: ablate,
        },
        Command {
            name: "selftrain",
            about: "Train on labeled pedestrians, then associate, expand and fine-tune",
            keys: with(
                vec![
                    out(),
                    seed(),
                    key("labeled_peds", "0", "Comma-separated pedestrians with labels"),
                    key("iterations", "1", "Self-training rounds"),
                    key("finetune_epochs", "50", "Epochs per fine-tune"),
                    key("finetune_lr", "0.0001", "Fine-tune learning rate"),
                    key("max_distance", "inf", "Drop associations farther than this, m"),
                ],
                vec![data_keys(), train_keys()],
            ),
            run: selftrain_cmd,
        },
    ]
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_out(s: &Settings) -> Result<PathBuf, CliError> {
    let out = s.path("out");
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let snap = out.join("config.resolved");
    std::fs::write(&snap, s.snapshot()).map_err(|e| io_err(&snap, e))?;
    Ok(out)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        lr: s.get("lr")?,
        lr_late: s.get("lr_late")?,
        lr_drop_epoch: s.get("lr_drop_epoch")?,
        dropout_rate: s.get("dropout")?,
        leaky_slope: s.get("leaky_slope")?,
        seed: s.get("seed")?,
    })
}

fn pf_config(s: &Settings) -> Result<ParticleFilterConfig, CliError> {
    Ok(ParticleFilterConfig {
        n_particles: s.get("pf_particles")?,
        process_noise_std: s.get("pf_process_std")?,
        gps_meas_std: s.get("pf_gps_std")?,
        resample_threshold: s.get("pf_resample")?,
        ftm_std_floor: s.get("pf_ftm_floor")?,
        seed: s.get("seed")?,
        ..ParticleFilterConfig::default()
    })
}

fn experiment_config(s: &Settings) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig {
        hop: s.get("hop")?,
        split_seed: s.get("split_seed")?,
        mask: s.get("mask")?,
        train: train_config(s)?,
        pf: ParticleFilterConfig {
            seed: s.get("seed")?,
            ..ParticleFilterConfig::default()
        },
    })
}

/// Scene directories under `path`, sorted by name; `path` itself if it is one.
fn scene_dirs(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.join("scene.json").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no scenes under {}", path.display())));
    }
    Ok(dirs)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

/// Scenes with their calibrated world-to-camera transforms.
fn load_scenes(s: &Settings) -> Result<(Vec<Scene>, Vec<WorldCameraTransform>), CliError> {
    let calib_dir = s.path("calib");
    let mut scenes = Vec::new();
    let mut transforms = Vec::new();
    for dir in scene_dirs(&s.path("scenes"))? {
        scenes.push(sim::read_scene(&dir)?);
        let path = calib_dir.join(format!("{}.json", dir_name(&dir)));
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let c: CalibrationResult =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Data(phoneloc::Error::Json(e)))?;
        transforms.push(c.transform);
    }
    Ok((scenes, transforms))
}

fn simulate(s: &Settings) -> Result<(), CliError> {
    let out = create_out(s)?;
    let seed: u64 = s.get("seed")?;
    let zero: bool = s.get("zero_noise")?;
    let noise = if zero {
        NoiseConfig::zero()
    } else {
        NoiseConfig {
            gps_bias_std: s.get("gps_bias_std")?,
            ..NoiseConfig::default()
        }
    };
    let min_separation: f64 = s.get("min_separation")?;
    let cfgs: Vec<SceneConfig> = if s.get("suite")? {
        eval::standard_suite(seed, s.get("sequences")?, s.get("duration")?)
            .into_iter()
            .map(|c| SceneConfig {
                noise: noise.clone(),
                min_separation,
                ..c
            })
            .collect()
    } else {
        vec![SceneConfig {
            scene_id: s.str("scene_id").to_string(),
            sequence: s.get("sequence")?,
            duration: s.get("duration")?,
            n_pedestrians: s.get("n_pedestrians")?,
            camera_height: s.get("camera_height")?,
            camera_yaw: s.get("camera_yaw")?,
            camera_pitch: s.get("camera_pitch")?,
            gps_difficulty: s.get("gps_difficulty")?,
            min_separation,
            noise,
            seed,
            ..SceneConfig::default()
        }]
    };
    let cfgs: Vec<SceneConfig> = cfgs
        .into_iter()
        .map(|c| SceneConfig {
            ref_survey_std: if zero { 0.0 } else { c.ref_survey_std },
            ref_pixel_std: if zero { 0.0 } else { c.ref_pixel_std },
            ..c
        })
        .collect();
    for scene in sim::generate_scenes(&cfgs)? {
        let dir = out.join(format!("{}_{}", scene.config.scene_id, scene.config.sequence));
        sim::write_scene(&dir, &scene)?;
    }
    Ok(())
}

fn calibrate(s: &Settings) -> Result<(), CliError> {
    let dirs = scene_dirs(&s.path("scenes"))?;
    let out = create_out(s)?;
    for dir in dirs {
        let scene = sim::read_scene(&dir)?;
        let result = eval::calibrate(&scene)?;
        let json = serde_json::to_vec_pretty(&result).map_err(|e| CliError::Data(phoneloc::Error::Json(e)))?;
        write_file(&out.join(format!("{}.json", dir_name(&dir))), json)?;
    }
    Ok(())
}

fn makedata(s: &Settings) -> Result<(), CliError> {
    let (scenes, transforms) = load_scenes(s)?;
    let out = create_out(s)?;
    let records = eval::window_scenes(&scenes, &transforms, s.get("hop")?)?;
    let (train, test) = dataset::split_dataset(&records, s.get("split_seed")?);
    dataset::write_jsonl(&out.join("train.jsonl"), &train)?;
    dataset::write_jsonl(&out.join("test.jsonl"), &test)?;
    Ok(())
}

fn train(s: &Settings) -> Result<(), CliError> {
    let records = dataset::read_jsonl(&s.path("train"))?;
    let mask: FeatureMask = s.get("mask")?;
    let cfg = train_config(s)?;
    let out = create_out(s)?;
    let mut model = GanModel::new(mask, Normalizer::fit(&records, &mask)?, &cfg)?;
    let history = gan::train(&mut model, &records, &cfg)?;
    model.save(&out.join("model.json"))?;
    gan::write_loss_csv(&out.join("loss.csv"), &history)?;
    Ok(())
}

fn evaluate(s: &Settings) -> Result<(), CliError> {
    let model = GanModel::load(&s.path("model"))?;
    let test: Vec<Correspondence> = dataset::read_jsonl(&s.path("test"))?;
    let (scenes, transforms) = load_scenes(s)?;
    let pf = pf_config(s)?;
    let out = create_out(s)?;
    let table = eval::evaluate_methods(
        &test,
        &[
            (Method::PhoneGps, eval::gps_estimates(&test)),
            (Method::ParticleFilter, eval::pf_estimates(&scenes, &transforms, &test, &pf)?),
            (Method::Gan, model.infer_records(&test)?),
        ],
    )?
    .to_table();
    table.write_csv(&out.join("eval.csv"))?;
    table.write_markdown(&out.join("eval.md"))?;
    Ok(())
}

fn parse_levels(raw: &str) -> Result<Vec<PerturbationLevel>, CliError> {
    raw.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("level `{pair}` is not degrees:meters")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::Usage(format!("level `{pair}`: {e}")))
            };
            Ok(PerturbationLevel::new(parse(a)?, parse(b)?))
        })
        .collect()
}

fn perturb(s: &Settings) -> Result<(), CliError> {
    let levels = parse_levels(s.str("levels"))?;
    let (scenes, transforms) = load_scenes(s)?;
    let cfg = ExperimentConfig {
        pf: pf_config(s)?,
        ..experiment_config(s)?
    };
    let out = create_out(s)?;
    let rows = eval::perturbation_sweep(&scenes, &transforms, &levels, &cfg, s.get("seed")?)?;
    let table = eval::perturbation_table(&rows);
    table.write_csv(&out.join("perturb.csv"))?;
    table.write_markdown(&out.join("perturb.md"))?;
    Ok(())
}

fn ablate(s: &Settings) -> Result<(), CliError> {
    let masks = match s.str("masks") {
        "all" => FeatureMask::ablation_set(),
        list => list
            .split(',')
            .map(|m| m.trim().parse::<FeatureMask>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?,
    };
    let (scenes, transforms) = load_scenes(s)?;
    let cfg = experiment_config(s)?;
    let out = create_out(s)?;
    let records = eval::window_scenes(&scenes, &transforms, cfg.hop)?;
    let table = eval::ablation_table(&eval::ablation(&records, &masks, &cfg)?);
    table.write_csv(&out.join("ablation.csv"))?;
    table.write_markdown(&out.join("ablation.md"))?;
    Ok(())
}

fn selftrain_cmd(s: &Settings) -> Result<(), CliError> {
    let labeled_peds: Vec<usize> = s
        .str("labeled_peds")
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| CliError::Usage(format!("labeled_peds: {e}"))))
        .collect::<Result<_, _>>()?;
    let (scenes, transforms) = load_scenes(s)?;
    let cfg = experiment_config(s)?;
    let st = SelfTrainConfig {
        finetune_epochs: s.get("finetune_epochs")?,
        finetune_lr: s.get("finetune_lr")?,
        batch_size: cfg.train.batch_size,
        max_distance: s.get("max_distance")?,
        seed: s.get("seed")?,
    };
    let iterations: usize = s.get("iterations")?;
    let out = create_out(s)?;

    let records = eval::window_scenes(&scenes, &transforms, cfg.hop)?;
    let (train_recs, test) = dataset::split_dataset(&records, cfg.split_seed);
    let labeled: Vec<Correspondence> = train_recs.iter().filter(|r| labeled_peds.contains(&r.ped)).cloned().collect();
    if labeled.is_empty() {
        return Err(CliError::Data(phoneloc::Error::EmptyInput));
    }
    let groups = selftrain::unlabeled_groups(&train_recs, &labeled_peds);
    let mut model = GanModel::new(cfg.mask, Normalizer::fit(&labeled, &cfg.mask)?, &cfg.train)?;
    gan::train(&mut model, &labeled, &cfg.train)?;
    let mut reports = Vec::new();
    for it in 1..=iterations {
        reports.push(selftrain::selftrain_iteration(&mut model, &labeled, &groups, &test, &st, it)?);
    }
    selftrain::write_report_csv(&out.join("selftrain.csv"), &reports)?;
    model.save(&out.join("model.json"))?;
    Ok(())
}
