//! Reference localizers: the raw phone GPS fix and a particle filter that
//! corrects GPS with FTM ranging to the roadside unit.

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{gps_in_camera, PhoneWindow};
use crate::error::{Error, Result};
use crate::geodesy::{GeodeticCoord, WorldCameraTransform, WorldPoint};
use crate::rng;
use crate::sim::PedestrianStreams;

/// The GPS channel at the window's last step, already in the camera frame.
pub fn gps_baseline(p: &PhoneWindow) -> [f64; 3] {
    let last = &p[p.len() - 1];
    [last[11], last[12], last[13]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleFilterConfig {
    pub n_particles: usize,
    /// Random-walk noise, meters per square-root second on each horizontal axis.
    pub process_noise_std: f64,
    pub gps_meas_std: f64,
    /// Resample when the effective sample size falls below this fraction of `n_particles`.
    pub resample_threshold: f64,
    /// Lower bound on the reported FTM standard deviation.
    pub ftm_std_floor: f64,
    /// Scale of the process noise along the vertical axis.
    pub vertical_factor: f64,
    pub seed: u64,
}

impl Default for ParticleFilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            process_noise_std: 1.0,
            gps_meas_std: 5.0,
            resample_threshold: 0.5,
            ftm_std_floor: 0.1,
            vertical_factor: 0.1,
            seed: 0,
        }
    }
}

impl ParticleFilterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.process_noise_std, self.gps_meas_std, self.ftm_std_floor, self.vertical_factor];
        if self.n_particles < 10 {
            return Err(Error::InvalidInput("n_particles must be at least 10".into()));
        }
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput("particle filter standard deviations must be positive".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::InvalidInput("resample_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsObservation {
    pub t: f64,
    pub pos: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FtmObservation {
    pub t: f64,
    pub range: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfEstimate {
    pub t: f64,
    pub pos: [f64; 3],
    pub ess: f64,
    /// Every weight underflowed at this step and the particles were redrawn around the latest GPS fix.
    pub weight_collapse: bool,
}

struct Particles {
    x: Vec<Vector3<f64>>,
    log_w: Vec<f64>,
}

impl Particles {
    fn around(center: &Vector3<f64>, std: f64, n: usize, rng: &mut rng::Rng) -> Self {
        let x = (0..n)
            .map(|_| {
                let d = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                center + std * d
            })
            .collect();
        Self {
            x,
            log_w: vec![-(n as f64).ln(); n],
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|l| l.exp()).collect()
    }

    fn ess(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }

    fn mean(&self) -> Vector3<f64> {
        self.x
            .iter()
            .zip(self.weights())
            .fold(Vector3::zeros(), |acc, (x, w)| acc + w * x)
    }

    /// Adds per-particle log-likelihoods. Returns false, leaving weights
    /// untouched, when every updated weight underflows.
    fn update(&mut self, ll: impl Fn(&Vector3<f64>) -> f64) -> bool {
        let updated: Vec<f64> = self.x.iter().zip(&self.log_w).map(|(x, lw)| lw + ll(x)).collect();
        let max = updated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || updated.iter().map(|l| l.exp()).sum::<f64>() == 0.0 {
            return false;
        }
        let lse = max + updated.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.log_w = updated.into_iter().map(|l| l - lse).collect();
        true
    }

    fn resample(&mut self, rng: &mut rng::Rng) {
        let n = self.x.len();
        let w = self.weights();
        let step = 1.0 / n as f64;
        let mut u = rng.random_range(0.0..step);
        let mut cum = w[0];
        let mut i = 0;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            while u > cum && i + 1 < n {
                i += 1;
                cum += w[i];
            }
            out.push(self.x[i]);
            u += step;
        }
        self.x = out;
        self.log_w = vec![-(n as f64).ln(); n];
    }
}

enum Event {
    Gps(Vector3<f64>),
    Ftm(f64, f64),
}

fn check_sorted(ts: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for t in ts {
        if !(t >= prev) {
            return Err(Error::InvalidInput("observations must be time-ordered".into()));
        }
        prev = t;
    }
    Ok(())
}

/// Runs a GPS + FTM particle filter in the camera frame.
///
/// `up` is the world vertical in the camera frame; process noise along it is
/// scaled by `vertical_factor`. Particles start at the first GPS fix. One
/// estimate is emitted per distinct observation time after that; FTM ranges
/// between GPS fixes update the weights on their own.
pub fn particle_filter(
    gps: &[GpsObservation],
    ftm: &[FtmObservation],
    rsu_cam: &Vector3<f64>,
    up: &Vector3<f64>,
    cfg: &ParticleFilterConfig,
) -> Result<Vec<PfEstimate>> {
    cfg.validate()?;
    check_sorted(gps.iter().map(|g| g.t))?;
    check_sorted(ftm.iter().map(|f| f.t))?;
    let first = gps.first().ok_or(Error::EmptyInput)?;
    let up = up.try_normalize(1e-12).ok_or(Error::InvalidInput("up vector is zero".into()))?;

    let mut events: Vec<(f64, Event)> = gps.iter().skip(1).map(|g| (g.t, Event::Gps(g.pos))).collect();
    events.extend(ftm.iter().filter(|f| f.t >= first.t).map(|f| (f.t, Event::Ftm(f.range, f.std))));
    // Stable sort keeps GPS ahead of FTM at equal times.
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rng = rng::derive(cfg.seed, "particle_filter");
    let mut pf = Particles::around(&first.pos, cfg.gps_meas_std, cfg.n_particles, &mut rng);
    let mut last_gps = first.pos;
    let mut t_prev = first.t;
    let mut out = Vec::new();
    let mut pending_collapse = false;
    let mut i = 0;
    let emit = |pf: &Particles, t: f64, collapse: bool, out: &mut Vec<PfEstimate>| {
        let m = pf.mean();
        out.push(PfEstimate {
            t,
            pos: [m.x, m.y, m.z],
            ess: pf.ess(),
            weight_collapse: collapse,
        });
    };
    if events.first().is_none_or(|(t, _)| *t > first.t) {
        emit(&pf, first.t, false, &mut out);
    }
    let gps_var2 = 2.0 * cfg.gps_meas_std * cfg.gps_meas_std;
    while i < events.len() {
        let t = events[i].0;
        let dt = t - t_prev;
        if dt > 0.0 {
            let s = cfg.process_noise_std * dt.sqrt();
            for x in pf.x.iter_mut() {
                let n: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let vertical = n.dot(&up);
                *x += s * (n - (1.0 - cfg.vertical_factor) * vertical * up);
            }
        }
        t_prev = t;
        while i < events.len() && events[i].0 == t {
            let ok = match events[i].1 {
                Event::Gps(g) => {
                    last_gps = g;
                    pf.update(|x| -(x - g).norm_squared() / gps_var2)
                }
                Event::Ftm(range, std) => {
                    let s2 = 2.0 * std.max(cfg.ftm_std_floor).powi(2);
                    pf.update(|x| -((x - rsu_cam).norm() - range).powi(2) / s2)
                }
            };
            if !ok {
                pf = Particles::around(&last_gps, cfg.gps_meas_std, cfg.n_particles, &mut rng);
                pending_collapse = true;
            }
            i += 1;
        }
        emit(&pf, t, pending_collapse, &mut out);
        pending_collapse = false;
        if pf.ess() < cfg.resample_threshold * cfg.n_particles as f64 {
            pf.resample(&mut rng);
        }
    }
    Ok(out)
}

/// Runs the filter on one pedestrian's phone streams, converting GPS with the
/// world-to-camera transform `calib`.
pub fn filter_pedestrian(
    ped: &PedestrianStreams,
    origin: &GeodeticCoord,
    calib: &WorldCameraTransform,
    rsu_world: &WorldPoint,
    cfg: &ParticleFilterConfig,
) -> Result<Vec<PfEstimate>> {
    let gps: Vec<GpsObservation> = gps_in_camera(ped, origin, calib)
        .into_iter()
        .map(|(t, pos)| GpsObservation { t, pos })
        .collect();
    let ftm: Vec<FtmObservation> = ped
        .ftm
        .iter()
        .map(|f| FtmObservation {
            t: f.t,
            range: f.range,
            std: f.std,
        })
        .collect();
    let up = calib.rotation * Vector3::z();
    particle_filter(&gps, &ftm, &calib.apply(&rsu_world.vector()), &up, cfg)
}

/// The latest estimate at or before `t`.
pub fn estimate_at(estimates: &[PfEstimate], t: f64) -> Option<[f64; 3]> {
    let i = estimates.partition_point(|e| e.t <= t + 1e-9);
    i.checked_sub(1).map(|j| estimates[j].pos)
}
