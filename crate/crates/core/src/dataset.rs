//! Fixed-shape 3-second windows over the raw streams, dataset splits and JSONL
//! persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geodesy::{geodetic_to_enu, GeodeticCoord, WorldCameraTransform};
use crate::rng;
use crate::sim::{read_jsonl_file, write_jsonl_file, PedestrianStreams, Scene};

pub const WINDOW_SECONDS: f64 = 3.0;
pub const WINDOW_STEPS: usize = 10;
pub const STEP_SECONDS: f64 = WINDOW_SECONDS / WINDOW_STEPS as f64;
pub const VISION_DIM: usize = 6;
pub const PHONE_DIM: usize = 14;
/// Largest distance to the nearest sample for camera, FTM and RSSI channels.
pub const MAX_GAP: f64 = 0.5;
pub const DEFAULT_HOP: f64 = 0.333;

/// Per step: depth, pixel u, pixel v, camera X, Y, Z.
pub type VisionWindow = [[f64; VISION_DIM]; WINDOW_STEPS];
/// Per step: FTM range, FTM std, accel(3), gyro(3), mag(3), GPS camera-frame(3).
pub type PhoneWindow = [[f64; PHONE_DIM]; WINDOW_STEPS];

fn is_false(b: &bool) -> bool {
    !*b
}

/// A synchronized vision/phone window pair with its camera-frame label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub scene: String,
    pub seq: u32,
    pub ped: usize,
    pub t0: f64,
    pub v: VisionWindow,
    pub p: PhoneWindow,
    pub rssi: [f64; WINDOW_STEPS],
    pub c_gnd: [f64; 3],
    /// Set on records created by self-training association.
    #[serde(default, skip_serializing_if = "is_false")]
    pub minted: bool,
}

impl Correspondence {
    /// GPS channel at the final step.
    pub fn final_gps(&self) -> [f64; 3] {
        let last = &self.p[WINDOW_STEPS - 1];
        [last[11], last[12], last[13]]
    }

    pub fn final_ftm(&self) -> (f64, f64) {
        let last = &self.p[WINDOW_STEPS - 1];
        (last[0], last[1])
    }
}

/// A phone window whose camera coverage is incomplete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneRecord {
    pub scene: String,
    pub seq: u32,
    pub ped: usize,
    pub t0: f64,
    pub p: PhoneWindow,
    pub rssi: [f64; WINDOW_STEPS],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowedData {
    pub labeled: Vec<Correspondence>,
    pub phone_only: Vec<PhoneRecord>,
    /// Windows dropped because a phone channel had no usable sample.
    pub skipped: usize,
}

/// Which phone channels feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureMask {
    pub ftm: bool,
    pub imu: bool,
    pub gps: bool,
    pub rssi: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl FeatureMask {
    pub const FULL: FeatureMask = FeatureMask {
        ftm: true,
        imu: true,
        gps: true,
        rssi: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.ftm || self.imu || self.gps || self.rssi {
            Ok(())
        } else {
            Err(Error::InvalidInput("feature mask enables no channel".into()))
        }
    }

    pub fn width(&self) -> usize {
        2 * self.ftm as usize + self.rssi as usize + 9 * self.imu as usize + 3 * self.gps as usize
    }

    /// The same mask with FTM replaced by RSSI.
    pub fn rssi_swapped(&self) -> Option<FeatureMask> {
        self.ftm.then_some(FeatureMask {
            ftm: false,
            rssi: true,
            ..*self
        })
    }

    /// The ablation rows, full mask first.
    pub fn ablation_set() -> Vec<FeatureMask> {
        ["ftm+imu+gps", "rssi+imu+gps", "imu+gps", "gps", "ftm+imu", "ftm+gps", "rssi+imu", "rssi+gps", "ftm", "imu"]
            .iter()
            .map(|s| s.parse().expect("static mask names"))
            .collect()
    }
}

impl fmt::Display for FeatureMask {
    /// `FTM + IMU + GPS` style label.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.ftm {
            parts.push("FTM");
        }
        if self.rssi {
            parts.push("RSSI");
        }
        if self.imu {
            parts.push("IMU");
        }
        if self.gps {
            parts.push("GPS");
        }
        write!(f, "{}", parts.join(" + "))
    }
}

impl FromStr for FeatureMask {
    type Err = Error;

    /// Parses `ftm+imu+gps`, case-insensitive, `+` or `,` separated.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = FeatureMask {
            ftm: false,
            imu: false,
            gps: false,
            rssi: false,
        };
        for part in s.split(['+', ',']).map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "ftm" => m.ftm = true,
                "imu" => m.imu = true,
                "gps" => m.gps = true,
                "rssi" => m.rssi = true,
                other => return Err(Error::InvalidInput(format!("unknown feature '{other}'"))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// Channel slice of one phone window under `mask`: FTM(2), RSSI(1), IMU(9), GPS(3).
pub fn apply_mask(p: &PhoneWindow, rssi: &[f64; WINDOW_STEPS], mask: &FeatureMask) -> Array2<f64> {
    let mut out = Array2::zeros((WINDOW_STEPS, mask.width()));
    for (k, step) in p.iter().enumerate() {
        let mut row = Vec::with_capacity(mask.width());
        if mask.ftm {
            row.extend_from_slice(&step[0..2]);
        }
        if mask.rssi {
            row.push(rssi[k]);
        }
        if mask.imu {
            row.extend_from_slice(&step[2..11]);
        }
        if mask.gps {
            row.extend_from_slice(&step[11..14]);
        }
        out.row_mut(k).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    out
}

/// Number of windows of the given hop that fit in `duration`.
pub fn window_count(duration: f64, hop: f64) -> usize {
    if duration < WINDOW_SECONDS {
        0
    } else {
        ((duration - WINDOW_SECONDS) / hop + 1e-9).floor() as usize + 1
    }
}

/// Step timestamps of the window starting at `t0`.
pub fn step_times(t0: f64) -> [f64; WINDOW_STEPS] {
    std::array::from_fn(|k| t0 + STEP_SECONDS * (k + 1) as f64)
}

fn nearest<T>(items: &[T], t: f64, time: impl Fn(&T) -> f64) -> Option<&T> {
    let i = items.partition_point(|x| time(x) < t);
    let before = i.checked_sub(1).map(|j| &items[j]);
    let after = items.get(i);
    let best = match (before, after) {
        (Some(a), Some(b)) => {
            if t - time(a) <= time(b) - t {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return None,
    };
    ((time(best) - t).abs() <= MAX_GAP).then_some(best)
}

/// GPS fixes as `(stamp, camera-frame position)` using the world-to-camera transform `calib`.
pub fn gps_in_camera(
    ped: &PedestrianStreams,
    origin: &GeodeticCoord,
    calib: &WorldCameraTransform,
) -> Vec<(f64, Vector3<f64>)> {
    ped.gps
        .iter()
        .map(|g| (g.t, calib.apply(&geodetic_to_enu(&g.geodetic(), origin).vector())))
        .collect()
}

struct PedWindows {
    labeled: Vec<Correspondence>,
    phone_only: Vec<PhoneRecord>,
    skipped: usize,
}

fn window_pedestrian(
    scene_id: &str,
    seq: u32,
    duration: f64,
    ped: &PedestrianStreams,
    origin: &GeodeticCoord,
    calib: &WorldCameraTransform,
    hop: f64,
) -> PedWindows {
    let gps_cam = gps_in_camera(ped, origin, calib);
    let mut out = PedWindows {
        labeled: Vec::new(),
        phone_only: Vec::new(),
        skipped: 0,
    };
    'windows: for i in 0..window_count(duration, hop) {
        let t0 = i as f64 * hop;
        let mut p = [[0.0; PHONE_DIM]; WINDOW_STEPS];
        let mut rssi = [0.0; WINDOW_STEPS];
        let mut v = [[0.0; VISION_DIM]; WINDOW_STEPS];
        let mut camera_complete = true;
        let mut c_gnd = [0.0; 3];
        for (k, &t) in step_times(t0).iter().enumerate() {
            let Some(f) = nearest(&ped.ftm, t, |s| s.t) else { out.skipped += 1; continue 'windows };
            let Some(r) = nearest(&ped.rssi, t, |s| s.t) else { out.skipped += 1; continue 'windows };
            let lo = ped.imu.partition_point(|s| s.t <= t - STEP_SECONDS);
            let hi = ped.imu.partition_point(|s| s.t <= t);
            if hi <= lo {
                out.skipped += 1;
                continue 'windows;
            }
            let g_idx = gps_cam.partition_point(|(gt, _)| *gt <= t);
            let Some((_, g)) = g_idx.checked_sub(1).map(|j| gps_cam[j]) else {
                out.skipped += 1;
                continue 'windows;
            };
            let mut imu = [0.0; 9];
            for s in &ped.imu[lo..hi] {
                for a in 0..3 {
                    imu[a] += s.acc[a];
                    imu[3 + a] += s.gyr[a];
                    imu[6 + a] += s.mag[a];
                }
            }
            let n = (hi - lo) as f64;
            let step = &mut p[k];
            step[0] = f.range;
            step[1] = f.std;
            for (dst, src) in step[2..11].iter_mut().zip(imu) {
                *dst = src / n;
            }
            step[11..14].copy_from_slice(g.as_slice());
            rssi[k] = r.rssi;
            match nearest(&ped.camera, t, |s| s.t) {
                Some(c) if camera_complete => {
                    v[k] = [c.depth, c.u, c.v, c.x, c.y, c.z];
                    c_gnd = c.xyz();
                }
                _ => camera_complete = false,
            }
        }
        if camera_complete {
            out.labeled.push(Correspondence {
                scene: scene_id.to_string(),
                seq,
                ped: ped.id,
                t0,
                v,
                p,
                rssi,
                c_gnd,
                minted: false,
            });
        } else {
            out.phone_only.push(PhoneRecord {
                scene: scene_id.to_string(),
                seq,
                ped: ped.id,
                t0,
                p,
                rssi,
            });
        }
    }
    out
}

/// Slides 3 s windows over every pedestrian of `scene`, converting GPS into the
/// camera frame with the world-to-camera transform `calib`.
pub fn window_streams(scene: &Scene, calib: &WorldCameraTransform, hop: f64) -> Result<WindowedData> {
    if !(hop > 0.0 && hop.is_finite()) {
        return Err(Error::InvalidInput("hop must be positive".into()));
    }
    let cfg = &scene.config;
    let parts = exec::map(&scene.pedestrians, |ped| {
        window_pedestrian(&cfg.scene_id, cfg.sequence, cfg.duration, ped, &cfg.rsu_geodetic, calib, hop)
    });
    let mut out = WindowedData::default();
    for p in parts {
        out.labeled.extend(p.labeled);
        out.phone_only.extend(p.phone_only);
        out.skipped += p.skipped;
    }
    Ok(out)
}

pub type SequenceKey = (String, u32);

/// Holds out one randomly chosen sequence per scene.
pub fn split_sequences(keys: &[SequenceKey], seed: u64) -> (BTreeSet<SequenceKey>, BTreeSet<SequenceKey>) {
    let mut by_scene: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for (s, q) in keys {
        by_scene.entry(s).or_default().insert(*q);
    }
    let mut rng = rng::derive(seed, "split");
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (scene, seqs) in by_scene {
        let seqs: Vec<u32> = seqs.into_iter().collect();
        let held = *seqs.choose(&mut rng).expect("non-empty group");
        for q in seqs {
            let key = (scene.to_string(), q);
            if q == held {
                test.insert(key);
            } else {
                train.insert(key);
            }
        }
    }
    (train, test)
}

/// Splits records by held-out sequence. Input order is preserved within each side.
pub fn split_dataset(records: &[Correspondence], seed: u64) -> (Vec<Correspondence>, Vec<Correspondence>) {
    let keys: Vec<SequenceKey> = records.iter().map(|r| (r.scene.clone(), r.seq)).collect();
    let (_, test) = split_sequences(&keys, seed);
    records
        .iter()
        .cloned()
        .partition(|r| !test.contains(&(r.scene.clone(), r.seq)))
}

/// Canonical order: scene, sequence, pedestrian, window start.
pub fn sort_canonical(records: &mut [Correspondence]) {
    records.sort_by(|a, b| {
        (&a.scene, a.seq, a.ped)
            .cmp(&(&b.scene, b.seq, b.ped))
            .then(a.t0.total_cmp(&b.t0))
    });
}

pub fn write_jsonl(path: &Path, records: &[Correspondence]) -> Result<()> {
    write_jsonl_file(path, records)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Correspondence>> {
    read_jsonl_file(path)
}
