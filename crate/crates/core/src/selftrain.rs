//! Self-training: associate generated phone coordinates with camera detections,
//! mint correspondences from the matches, and fine-tune on the expanded set.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Correspondence, PhoneWindow, VisionWindow, WINDOW_STEPS};
use crate::error::{Error, Result};
use crate::eval::{distance, errors};
use crate::exec;
use crate::gan::{self, GanModel};
use crate::nn::TrainConfig;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub phone_id: usize,
    pub matched_camera_id: usize,
    pub distance: f64,
    /// Known only when true identities are available.
    pub is_correct: Option<bool>,
}

/// Matches each phone coordinate to its nearest camera coordinate. Matches are
/// independent per phone; ties go to the lowest camera index. Returns no
/// results when there are no camera coordinates.
pub fn associate(phone: &[[f64; 3]], camera: &[[f64; 3]]) -> Vec<AssociationResult> {
    if camera.is_empty() {
        return Vec::new();
    }
    phone
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (j, d) = camera
                .iter()
                .map(|c| distance(p, c))
                .enumerate()
                .fold((0, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best });
            AssociationResult {
                phone_id: i,
                matched_camera_id: j,
                distance: d,
                is_correct: None,
            }
        })
        .collect()
}

/// Fraction of correct matches among those with known correctness.
pub fn association_precision(results: &[AssociationResult]) -> Option<f64> {
    let known: Vec<bool> = results.iter().filter_map(|r| r.is_correct).collect();
    if known.is_empty() {
        return None;
    }
    Some(known.iter().filter(|&&c| c).count() as f64 / known.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhoneCandidate {
    pub ped: usize,
    pub p: PhoneWindow,
    pub rssi: [f64; WINDOW_STEPS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraCandidate {
    /// True identity of the detection, used only to score associations.
    pub ped: usize,
    pub v: VisionWindow,
    pub c: [f64; 3],
}

/// Phone windows and camera detections sharing one window start.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledGroup {
    pub scene: String,
    pub seq: u32,
    pub t0: f64,
    pub phones: Vec<PhoneCandidate>,
    pub cameras: Vec<CameraCandidate>,
}

/// Groups simulated correspondences by window. Every detection becomes a
/// camera candidate; phones of `labeled_peds` are left out.
pub fn unlabeled_groups(records: &[Correspondence], labeled_peds: &[usize]) -> Vec<UnlabeledGroup> {
    let mut groups: BTreeMap<(String, u32, u64), UnlabeledGroup> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((r.scene.clone(), r.seq, r.t0.to_bits()))
            .or_insert_with(|| UnlabeledGroup {
                scene: r.scene.clone(),
                seq: r.seq,
                t0: r.t0,
                phones: Vec::new(),
                cameras: Vec::new(),
            });
        g.cameras.push(CameraCandidate {
            ped: r.ped,
            v: r.v,
            c: r.c_gnd,
        });
        if !labeled_peds.contains(&r.ped) {
            g.phones.push(PhoneCandidate {
                ped: r.ped,
                p: r.p,
                rssi: r.rssi,
            });
        }
    }
    let mut out: Vec<UnlabeledGroup> = groups.into_values().filter(|g| !g.phones.is_empty()).collect();
    out.sort_by(|a, b| (&a.scene, a.seq, a.t0).partial_cmp(&(&b.scene, b.seq, b.t0)).expect("finite t0"));
    out
}

/// An association tagged with the group it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAssociation {
    pub group: usize,
    pub result: AssociationResult,
}

/// Infers every phone in every group and associates it within its group.
/// Matches farther than `max_distance` are dropped.
pub fn associate_groups(model: &GanModel, groups: &[UnlabeledGroup], max_distance: f64) -> Result<Vec<GroupAssociation>> {
    let per_group = exec::try_map(groups, |g| -> Result<Vec<AssociationResult>> {
        let phones: Vec<_> = g.phones.iter().map(|p| (&p.p, &p.rssi)).collect();
        let coords = model.infer(&phones)?;
        let cams: Vec<[f64; 3]> = g.cameras.iter().map(|c| c.c).collect();
        Ok(associate(&coords, &cams)
            .into_iter()
            .filter(|a| a.distance <= max_distance)
            .map(|mut a| {
                a.is_correct = Some(g.phones[a.phone_id].ped == g.cameras[a.matched_camera_id].ped);
                a
            })
            .collect::<Vec<_>>())
    })?;
    Ok(per_group
        .into_iter()
        .enumerate()
        .flat_map(|(group, rs)| rs.into_iter().map(move |result| GroupAssociation { group, result }))
        .collect())
}

/// Labeled records followed by one minted record per association: the matched
/// camera window and coordinate paired with the phone window.
pub fn expand_dataset(
    labeled: &[Correspondence],
    associations: &[GroupAssociation],
    groups: &[UnlabeledGroup],
) -> Vec<Correspondence> {
    let mut out = labeled.to_vec();
    for a in associations {
        let g = &groups[a.group];
        let phone = &g.phones[a.result.phone_id];
        let cam = &g.cameras[a.result.matched_camera_id];
        out.push(Correspondence {
            scene: g.scene.clone(),
            seq: g.seq,
            ped: phone.ped,
            t0: g.t0,
            v: cam.v,
            p: phone.p,
            rssi: phone.rssi,
            c_gnd: cam.c,
            minted: true,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub max_distance: f64,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            finetune_epochs: 50,
            finetune_lr: 1e-4,
            batch_size: 32,
            max_distance: f64::INFINITY,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainReport {
    pub iteration: usize,
    pub precision: Option<f64>,
    pub minted_count: usize,
    pub pre_error: f64,
    pub post_error: f64,
}

fn mean_error(model: &GanModel, held_out: &[Correspondence]) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::EmptyInput);
    }
    let est = model.infer_records(held_out)?;
    Ok(errors(held_out, &est).iter().sum::<f64>() / held_out.len() as f64)
}

/// One associate, expand and fine-tune round. Fine-tuning continues from the
/// current weights and normalizer at the constant rate `finetune_lr`.
pub fn selftrain_iteration(
    model: &mut GanModel,
    labeled: &[Correspondence],
    groups: &[UnlabeledGroup],
    held_out: &[Correspondence],
    cfg: &SelfTrainConfig,
    iteration: usize,
) -> Result<SelfTrainReport> {
    let pre_error = mean_error(model, held_out)?;
    if groups.iter().all(|g| g.phones.is_empty()) {
        return Ok(SelfTrainReport {
            iteration,
            precision: None,
            minted_count: 0,
            pre_error,
            post_error: pre_error,
        });
    }
    let assoc = associate_groups(model, groups, cfg.max_distance)?;
    if assoc.is_empty() {
        return Err(Error::NoCameraDetections);
    }
    let results: Vec<AssociationResult> = assoc.iter().map(|a| a.result).collect();
    let expanded = expand_dataset(labeled, &assoc, groups);
    let train_cfg = TrainConfig {
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.finetune_lr,
        lr_late: cfg.finetune_lr,
        lr_drop_epoch: cfg.finetune_epochs,
        dropout_rate: model.dropout_rate,
        leaky_slope: model.leaky_slope,
        seed: rng::derive_seed(cfg.seed, &format!("selftrain/{iteration}")),
    };
    gan::train(model, &expanded, &train_cfg)?;
    Ok(SelfTrainReport {
        iteration,
        precision: association_precision(&results),
        minted_count: assoc.len(),
        pre_error,
        post_error: mean_error(model, held_out)?,
    })
}

pub fn write_report_csv(path: &Path, reports: &[SelfTrainReport]) -> Result<()> {
    let mut out = String::from("iteration,precision,minted_count,pre_error,post_error\n");
    for r in reports {
        let precision = r.precision.map_or(String::new(), |p| format!("{p:.4}"));
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            r.iteration, precision, r.minted_count, r.pre_error, r.post_error
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
