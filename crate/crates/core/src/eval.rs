//! Error statistics, result tables and the experiment harnesses: method
//! comparison, calibration-perturbation sweep and feature ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{estimate_at, filter_pedestrian, gps_baseline, ParticleFilterConfig};
use crate::calib::{calibrate_scene, perturb_transform, CalibrationResult, PerturbationSpec};
use crate::dataset::{self, sort_canonical, split_dataset, Correspondence, FeatureMask, WINDOW_SECONDS};
use crate::error::{Error, Result};
use crate::exec;
use crate::gan::{self, EpochLoss, GanModel, Normalizer};
use crate::geodesy::WorldCameraTransform;
use crate::nn::TrainConfig;
use crate::rng;
use crate::sim::{Scene, SceneConfig, WalkRegion};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub avg: f64,
    pub std: f64,
    pub med: f64,
    pub p95: f64,
    pub n: usize,
}

/// Percentile by linear interpolation between order statistics of sorted `xs`.
fn percentile(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
}

/// Mean, population standard deviation, median and 95th percentile.
pub fn localization_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidInput("errors must be finite".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let avg = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|e| (e - avg).powi(2)).sum::<f64>() / n;
    Ok(ErrorStats {
        avg,
        std: var.sqrt(),
        med: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
        n: errors.len(),
    })
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-record Euclidean errors against `c_gnd`.
pub fn errors(records: &[Correspondence], estimates: &[[f64; 3]]) -> Vec<f64> {
    records.iter().zip(estimates).map(|(r, e)| distance(&r.c_gnd, e)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    PhoneGps,
    ParticleFilter,
    Gan,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PhoneGps, Method::ParticleFilter, Method::Gan];

    pub fn label(&self) -> &'static str {
        match self {
            Method::PhoneGps => "Phone GPS",
            Method::ParticleFilter => "GPS+FTM PF",
            Method::Gan => "GAN",
        }
    }
}

pub const OVERALL: &str = "Overall";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: String,
    pub method: Method,
    pub stats: ErrorStats,
}

/// Per-scene and pooled statistics for each method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn get(&self, scene: &str, method: Method) -> Option<&ErrorStats> {
        self.rows.iter().find(|r| r.scene == scene && r.method == method).map(|r| &r.stats)
    }

    pub fn overall(&self, method: Method) -> Option<&ErrorStats> {
        self.get(OVERALL, method)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["scene", "method", "avg", "std", "med", "p95", "n"]);
        for r in &self.rows {
            t.push_stats(vec![r.scene.clone(), r.method.label().into()], &r.stats);
        }
        t
    }
}

/// Groups errors by scene and adds a pooled `Overall` row per method. Scenes keep
/// first-appearance order.
pub fn evaluate_methods(records: &[Correspondence], estimates: &[(Method, Vec<[f64; 3]>)]) -> Result<EvalTable> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scenes: Vec<&str> = Vec::new();
    for r in records {
        if !scenes.contains(&r.scene.as_str()) {
            scenes.push(&r.scene);
        }
    }
    let mut rows = Vec::new();
    for (method, est) in estimates {
        if est.len() != records.len() {
            return Err(Error::ShapeMismatch("one estimate per record".into()));
        }
        let errs = errors(records, est);
        for s in &scenes {
            let scene_errs: Vec<f64> = records.iter().zip(&errs).filter(|(r, _)| r.scene == *s).map(|(_, e)| *e).collect();
            rows.push(EvalRow {
                scene: s.to_string(),
                method: *method,
                stats: localization_stats(&scene_errs)?,
            });
        }
        rows.push(EvalRow {
            scene: OVERALL.into(),
            method: *method,
            stats: localization_stats(&errs)?,
        });
    }
    Ok(EvalTable { rows })
}

/// A text table with CSV and aligned-markdown renderings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_stats(&mut self, mut keys: Vec<String>, s: &ErrorStats) {
        keys.extend([s.avg, s.std, s.med, s.p95].iter().map(|x| format!("{x:.4}")));
        keys.push(s.n.to_string());
        self.rows.push(keys);
    }

    pub fn to_csv(&self) -> String {
        let quote = |f: &String| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        };
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            out.push_str(&line.iter().map(quote).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let cols = self.header.len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                    .max()
                    .unwrap_or(0)
                    .max(3)
            })
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::from("|");
            for (c, w) in widths.iter().enumerate() {
                let cell = cells.get(c).map_or("", |x| x.as_str());
                let _ = write!(s, " {cell:<w$} |");
            }
            s.push('\n');
            s
        };
        let mut out = line(&self.header);
        out.push('|');
        for w in &widths {
            out.push_str(&format!("{}|", "-".repeat(w + 2)));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_markdown(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_markdown()).map_err(|e| Error::io(path, e))
    }
}

/// Calibrates a scene from its reference points; the RSU survey is used only for reporting.
pub fn calibrate(scene: &Scene) -> Result<CalibrationResult> {
    let refs = scene
        .references
        .iter()
        .map(|r| r.to_reference(&scene.config.rsu_geodetic))
        .collect::<Result<Vec<_>>>()?;
    calibrate_scene(&refs, &scene.config.intrinsics, Some(&scene.rsu_world))
}

/// Windows every scene with its world-to-camera transform; output is in canonical order.
pub fn window_scenes(scenes: &[Scene], transforms: &[WorldCameraTransform], hop: f64) -> Result<Vec<Correspondence>> {
    if scenes.len() != transforms.len() {
        return Err(Error::ShapeMismatch("one transform per scene".into()));
    }
    let pairs: Vec<(&Scene, &WorldCameraTransform)> = scenes.iter().zip(transforms).collect();
    let parts = exec::try_map(&pairs, |(s, t)| dataset::window_streams(s, t, hop))?;
    let mut out: Vec<Correspondence> = parts.into_iter().flat_map(|w| w.labeled).collect();
    sort_canonical(&mut out);
    Ok(out)
}

/// Particle-filter estimates at each record's final window step. One filter
/// runs per pedestrian stream, seeded from `(cfg.seed, scene, sequence, pedestrian)`.
pub fn pf_estimates(
    scenes: &[Scene],
    transforms: &[WorldCameraTransform],
    records: &[Correspondence],
    cfg: &ParticleFilterConfig,
) -> Result<Vec<[f64; 3]>> {
    if scenes.len() != transforms.len() {
        return Err(Error::ShapeMismatch("one transform per scene".into()));
    }
    let mut wanted: Vec<(usize, usize)> = Vec::new();
    for r in records {
        let si = scenes
            .iter()
            .position(|s| s.key() == (r.scene.as_str(), r.seq))
            .ok_or_else(|| Error::InvalidInput(format!("no scene {} sequence {}", r.scene, r.seq)))?;
        if !wanted.contains(&(si, r.ped)) {
            wanted.push((si, r.ped));
        }
    }
    let runs = exec::try_map(&wanted, |&(si, ped)| {
        let s = &scenes[si];
        let streams = s
            .pedestrians
            .iter()
            .find(|p| p.id == ped)
            .ok_or_else(|| Error::InvalidInput(format!("no pedestrian {ped} in {}", s.config.scene_id)))?;
        let c = ParticleFilterConfig {
            seed: rng::derive_seed(cfg.seed, &format!("pf/{}/{}/{ped}", s.config.scene_id, s.config.sequence)),
            ..*cfg
        };
        filter_pedestrian(streams, &s.config.rsu_geodetic, &transforms[si], &s.rsu_world, &c)
    })?;
    let by_key: BTreeMap<(usize, usize), &Vec<_>> = wanted.iter().copied().zip(&runs).collect();
    records
        .iter()
        .map(|r| {
            let si = scenes.iter().position(|s| s.key() == (r.scene.as_str(), r.seq)).expect("checked");
            estimate_at(by_key[&(si, r.ped)], r.t0 + WINDOW_SECONDS)
                .ok_or_else(|| Error::InvalidInput("no filter estimate before window end".into()))
        })
        .collect()
}

pub fn gps_estimates(records: &[Correspondence]) -> Vec<[f64; 3]> {
    records.iter().map(|r| gps_baseline(&r.p)).collect()
}

/// Shared settings of the train-and-evaluate harnesses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub hop: f64,
    pub split_seed: u64,
    pub mask: FeatureMask,
    pub train: TrainConfig,
    pub pf: ParticleFilterConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hop: dataset::DEFAULT_HOP,
            split_seed: 0,
            mask: FeatureMask::FULL,
            train: TrainConfig::default(),
            pf: ParticleFilterConfig::default(),
        }
    }
}

pub struct TrainedRun {
    pub model: GanModel,
    pub history: Vec<EpochLoss>,
    pub train: Vec<Correspondence>,
    pub test: Vec<Correspondence>,
}

/// Splits held-out sequences, fits the normalizer and trains a fresh model.
pub fn train_split(records: &[Correspondence], cfg: &ExperimentConfig) -> Result<TrainedRun> {
    let (train, test) = split_dataset(records, cfg.split_seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = GanModel::new(cfg.mask, Normalizer::fit(&train, &cfg.mask)?, &cfg.train)?;
    let history = gan::train(&mut model, &train, &cfg.train)?;
    Ok(TrainedRun {
        model,
        history,
        train,
        test,
    })
}

pub struct MethodComparison {
    pub table: EvalTable,
    pub run: TrainedRun,
}

/// Windows, trains and evaluates all three methods on the held-out sequences.
pub fn compare_methods(
    scenes: &[Scene],
    transforms: &[WorldCameraTransform],
    cfg: &ExperimentConfig,
) -> Result<MethodComparison> {
    let records = window_scenes(scenes, transforms, cfg.hop)?;
    let run = train_split(&records, cfg)?;
    let table = evaluate_run(scenes, transforms, &run, cfg)?;
    Ok(MethodComparison { table, run })
}

pub fn evaluate_run(
    scenes: &[Scene],
    transforms: &[WorldCameraTransform],
    run: &TrainedRun,
    cfg: &ExperimentConfig,
) -> Result<EvalTable> {
    let test = &run.test;
    evaluate_methods(
        test,
        &[
            (Method::PhoneGps, gps_estimates(test)),
            (Method::ParticleFilter, pf_estimates(scenes, transforms, test, &cfg.pf)?),
            (Method::Gan, run.model.infer_records(test)?),
        ],
    )
}

/// Rotation (degrees) and translation (meters) noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationLevel {
    pub sigma_theta: f64,
    pub sigma_t: f64,
}

impl PerturbationLevel {
    pub const fn new(sigma_theta: f64, sigma_t: f64) -> Self {
        Self { sigma_theta, sigma_t }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_theta == 0.0 && self.sigma_t == 0.0
    }
}

pub const ACCEPTANCE_LEVELS: [PerturbationLevel; 4] = [
    PerturbationLevel::new(0.0, 0.0),
    PerturbationLevel::new(5.0, 0.5),
    PerturbationLevel::new(15.0, 1.5),
    PerturbationLevel::new(30.0, 3.0),
];

/// Perturbs each world-to-camera transform; the draw for a scene depends only on
/// `(seed, scene, sequence)`, not on the level.
pub fn perturbed_transforms(
    scenes: &[Scene],
    calibrated: &[WorldCameraTransform],
    level: &PerturbationLevel,
    seed: u64,
) -> Result<Vec<WorldCameraTransform>> {
    if level.is_zero() {
        return Ok(calibrated.to_vec());
    }
    scenes
        .iter()
        .zip(calibrated)
        .map(|(s, t)| {
            let spec = PerturbationSpec {
                sigma_theta: level.sigma_theta,
                sigma_t: level.sigma_t,
                seed: rng::derive_seed(seed, &format!("perturb/{}/{}", s.config.scene_id, s.config.sequence)),
            };
            Ok(perturb_transform(&t.inverse(), &spec)?.inverse())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub level: PerturbationLevel,
    pub table: EvalTable,
}

/// Retrains from scratch at every level with GPS re-expressed through the
/// perturbed transform. Labels come from the camera and are unaffected.
pub fn perturbation_sweep(
    scenes: &[Scene],
    calibrated: &[WorldCameraTransform],
    levels: &[PerturbationLevel],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<PerturbationRow>> {
    exec::try_map(levels, |level| {
        let transforms = perturbed_transforms(scenes, calibrated, level, seed)?;
        let table = compare_methods(scenes, &transforms, cfg)?.table;
        Ok(PerturbationRow { level: *level, table })
    })
}

pub fn perturbation_table(rows: &[PerturbationRow]) -> Table {
    let mut t = Table::new(&["sigma_theta", "sigma_t", "method", "avg", "std", "med", "p95", "n"]);
    for r in rows {
        for m in Method::ALL {
            if let Some(s) = r.table.overall(m) {
                t.push_stats(
                    vec![r.level.sigma_theta.to_string(), r.level.sigma_t.to_string(), m.label().into()],
                    s,
                );
            }
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: FeatureMask,
    pub stats: ErrorStats,
}

/// Retrains one model per mask on the same split and reports GAN error.
pub fn ablation(records: &[Correspondence], masks: &[FeatureMask], cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    exec::try_map(masks, |mask| {
        let run = train_split(records, &ExperimentConfig { mask: *mask, ..cfg.clone() })?;
        let est = run.model.infer_records(&run.test)?;
        Ok(AblationRow {
            mask: *mask,
            stats: localization_stats(&errors(&run.test, &est))?,
        })
    })
}

pub fn ablation_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new(&["features", "avg", "std", "med", "p95", "n"]);
    for r in rows {
        t.push_stats(vec![r.mask.to_string()], &r.stats);
    }
    t
}

/// Five synthetic scenes with varied camera placement and walking areas. The
/// fifth has tripled GPS bias. Each scene has `sequences` recordings.
pub fn standard_suite(seed: u64, sequences: u32, duration: f64) -> Vec<SceneConfig> {
    struct Layout {
        yaw: f64,
        pitch: f64,
        height: f64,
        peds: usize,
        region: WalkRegion,
        difficulty: f64,
    }
    let layouts = [
        Layout { yaw: 0.0, pitch: 15.0, height: 2.6, peds: 2, region: WalkRegion::default(), difficulty: 0.0 },
        Layout {
            yaw: 75.0,
            pitch: 12.0,
            height: 2.5,
            peds: 2,
            region: WalkRegion { range_min: 4.0, range_max: 16.0, half_angle: 30.0 },
            difficulty: 0.0,
        },
        Layout { yaw: 160.0, pitch: 18.0, height: 2.7, peds: 3, region: WalkRegion::default(), difficulty: 0.0 },
        Layout {
            yaw: -110.0,
            pitch: 14.0,
            height: 2.4,
            peds: 2,
            region: WalkRegion { range_min: 3.0, range_max: 14.0, half_angle: 35.0 },
            difficulty: 0.0,
        },
        Layout { yaw: -30.0, pitch: 16.0, height: 2.8, peds: 3, region: WalkRegion::default(), difficulty: 2.0 },
    ];
    let mut out = Vec::new();
    for (i, l) in layouts.iter().enumerate() {
        for q in 0..sequences {
            let id = format!("scene{}", i + 1);
            out.push(SceneConfig {
                seed: rng::derive_seed(seed, &format!("suite/{id}/{q}")),
                scene_id: id,
                sequence: q,
                duration,
                n_pedestrians: l.peds,
                camera_yaw: l.yaw,
                camera_pitch: l.pitch,
                camera_height: l.height,
                region: l.region,
                gps_difficulty: l.difficulty,
                ..SceneConfig::default()
            });
        }
    }
    out
}
