//! Extrinsic calibration of the roadside camera from surveyed reference points.
//!
//! Every 4-point subset is solved with a minimal three-point resection, the fourth
//! point ranks the candidate poses, and the pose with the lowest full-set
//! reprojection error wins.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geodesy::{
    geodetic_to_enu, CameraIntrinsics, GeodeticCoord, PixelCoord, WorldCameraTransform, WorldPoint,
};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub world: WorldPoint,
    pub pixel: PixelCoord,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// World to camera.
    pub transform: WorldCameraTransform,
    pub reprojection_avg: f64,
    pub reprojection_std: f64,
    /// Distance between the estimated and surveyed RSU positions, when surveyed.
    pub rsu_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Standard deviation of each rotation angle, degrees.
    pub sigma_theta: f64,
    /// Standard deviation of each translation component, meters.
    pub sigma_t: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_theta >= 0.0 && self.sigma_t >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput("perturbation sigmas must be non-negative".into()))
        }
    }
}

/// One line of the reference-point file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub u: f64,
    pub v: f64,
}

impl ReferenceRecord {
    pub fn to_reference(&self, origin: &GeodeticCoord) -> Result<ReferencePoint> {
        let g = GeodeticCoord::new(self.lat, self.lon, self.alt)?;
        Ok(ReferencePoint {
            world: geodetic_to_enu(&g, origin),
            pixel: PixelCoord::new(self.u, self.v),
        })
    }
}

pub fn write_reference_jsonl(path: &Path, records: &[ReferenceRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_reference_jsonl(path: &Path) -> Result<Vec<ReferenceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Mean and population standard deviation of the per-point reprojection distances.
pub fn reprojection_error(
    t: &WorldCameraTransform,
    k: &CameraIntrinsics,
    refs: &[ReferencePoint],
) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let errs = refs
        .iter()
        .map(|r| crate::geodesy::project(k, t, &r.world).map(|p| p.distance(&r.pixel)))
        .collect::<Result<Vec<_>>>()?;
    let n = errs.len() as f64;
    let avg = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - avg).powi(2)).sum::<f64>() / n;
    Ok((avg, var.sqrt()))
}

/// Solves the perspective-three-point problem on `points` and ranks the real
/// solutions by reprojection error of `validation`, best first.
pub fn solve_p3p(
    points: &[ReferencePoint; 3],
    validation: &ReferencePoint,
    k: &CameraIntrinsics,
) -> Result<Vec<WorldCameraTransform>> {
    let world: [Vector3<f64>; 3] = [points[0].world.vector(), points[1].world.vector(), points[2].world.vector()];
    let bearings: [Vector3<f64>; 3] = [
        k.ray(&points[0].pixel).normalize(),
        k.ray(&points[1].pixel).normalize(),
        k.ray(&points[2].pixel).normalize(),
    ];

    let e1 = world[1] - world[0];
    let e2 = world[2] - world[0];
    let scale = e1.norm() * e2.norm();
    if scale == 0.0 || e1.cross(&e2).norm() <= 1e-9 * scale {
        return Err(Error::DegenerateConfiguration("collinear world points".into()));
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if bearings[i].dot(&bearings[j]) > 1.0 - 1e-12 {
            return Err(Error::DegenerateConfiguration("coincident bearing rays".into()));
        }
    }

    let distances = p3p_distances(&world, &bearings);
    let mut candidates: Vec<(f64, WorldCameraTransform)> = distances
        .into_iter()
        .filter_map(|s| {
            let cam = [bearings[0] * s[0], bearings[1] * s[1], bearings[2] * s[2]];
            let t = absolute_orientation(&world, &cam)?;
            // Reject spurious roots that do not reproduce the solving rays.
            let consistent = (0..3).all(|i| {
                let pc = t.apply(&world[i]);
                pc.z > 0.0 && pc.normalize().dot(&bearings[i]) > 1.0 - 1e-9
            });
            if !consistent {
                return None;
            }
            let score = crate::geodesy::project(k, &t, &validation.world)
                .map(|p| p.distance(&validation.pixel))
                .unwrap_or(f64::INFINITY);
            Some((score, t))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoRealSolution);
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(candidates.into_iter().map(|(_, t)| t).collect())
}

/// Distances along the three bearing rays, from the classical quartic in the ratio
/// `v = s3 / s1` (with `u = s2 / s1`).
fn p3p_distances(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<[f64; 3]> {
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let cos_alpha = bearings[1].dot(&bearings[2]);
    let cos_beta = bearings[0].dot(&bearings[2]);
    let cos_gamma = bearings[0].dot(&bearings[1]);

    // u = N(v) / D(v)
    let k = (a2 - c2) / b2;
    let num = [-(k + 1.0), 2.0 * k * cos_beta, 1.0 - k];
    let den = [-2.0 * cos_gamma, 2.0 * cos_alpha];
    // b2 (D^2 + N^2 - 2 cos_gamma N D) - c2 (1 + v^2 - 2 v cos_beta) D^2 = 0
    let dd = poly_mul(&den, &den);
    let nn = poly_mul(&num, &num);
    let nd = poly_mul(&num, &den);
    let q = [1.0, -2.0 * cos_beta, 1.0];
    let qdd = poly_mul(&q, &dd);
    let mut quartic = vec![0.0; 5];
    for (i, c) in quartic.iter_mut().enumerate() {
        let at = |p: &[f64]| p.get(i).copied().unwrap_or(0.0);
        *c = b2 * (at(&dd) + at(&nn) - 2.0 * cos_gamma * at(&nd)) - c2 * at(&qdd);
    }

    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let d = den[0] + den[1] * v;
        if d.abs() < 1e-14 {
            continue;
        }
        let u = (num[0] + num[1] * v + num[2] * v * v) / d;
        let denom = 1.0 + v * v - 2.0 * v * cos_beta;
        if u <= 0.0 || denom <= 0.0 {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        let s = refine_distances([s1, u * s1, v * s1], [a2, b2, c2], [cos_alpha, cos_beta, cos_gamma]);
        if s.iter().all(|x| x.is_finite() && *x > 0.0) {
            out.push(s);
        }
    }
    out
}

/// Newton iterations on the three law-of-cosines residuals.
fn refine_distances(mut s: [f64; 3], sq: [f64; 3], cos: [f64; 3]) -> [f64; 3] {
    let [a2, b2, c2] = sq;
    let [ca, cb, cg] = cos;
    for _ in 0..8 {
        let [s1, s2, s3] = s;
        let r = Vector3::new(
            s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2,
        );
        let j = Matrix3::new(
            0.0,
            2.0 * s2 - 2.0 * s3 * ca,
            2.0 * s3 - 2.0 * s2 * ca,
            2.0 * s1 - 2.0 * s3 * cb,
            0.0,
            2.0 * s3 - 2.0 * s1 * cb,
            2.0 * s1 - 2.0 * s2 * cg,
            2.0 * s2 - 2.0 * s1 * cg,
            0.0,
        );
        let Some(step) = j.lu().solve(&r) else {
            break;
        };
        let next = [s1 - step.x, s2 - step.y, s3 - step.z];
        if next.iter().any(|x| !x.is_finite()) {
            break;
        }
        s = next;
        if step.amax() <= 1e-15 * s1.max(1.0) {
            break;
        }
    }
    s
}

/// Least-squares rigid alignment `cam = R * world + t` (Kabsch).
fn absolute_orientation(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<WorldCameraTransform> {
    let wc = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (world[i] - wc) * (cam[i] - cc).transpose();
    }
    let rotation = nearest_rotation(&h.transpose())?;
    Some(WorldCameraTransform::new(rotation, cc - rotation * wc))
}

/// Nearest proper rotation (polar decomposition via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let d = (u * v_t).determinant().signum();
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Real roots of a polynomial with ascending coefficients, polished with Newton.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let max = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() <= 1e-14 * max {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let mut companion = nalgebra::DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        companion[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let eval = |x: f64| -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in coeffs[..=deg].iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };
    let mut roots: Vec<f64> = companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..20 {
                let (p, dp) = eval(x);
                if dp == 0.0 {
                    break;
                }
                let step = p / dp;
                x -= step;
                if step.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            x
        })
        .collect();
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
    roots
}

/// Canonical ordering key so results do not depend on input order.
fn canonical_order(refs: &[ReferencePoint]) -> Vec<ReferencePoint> {
    let mut sorted = refs.to_vec();
    let key = |r: &ReferencePoint| [r.world.x, r.world.y, r.world.z, r.pixel.u, r.pixel.v];
    sorted.sort_by(|a, b| {
        key(a)
            .iter()
            .zip(key(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    sorted
}

fn four_subsets(n: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    out.push([i, j, k, l]);
                }
            }
        }
    }
    out
}

/// Every candidate pose examined by [`calibrate_scene`] with its full-set mean
/// reprojection error, in enumeration order.
pub fn calibration_candidates(
    refs: &[ReferencePoint],
    k: &CameraIntrinsics,
) -> Result<Vec<(WorldCameraTransform, f64)>> {
    if refs.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "calibration needs at least 4 reference points, got {}",
            refs.len()
        )));
    }
    let refs = canonical_order(refs);
    let subsets = four_subsets(refs.len());
    let per_subset = exec::map(&subsets, |s| {
        let solving = [refs[s[0]], refs[s[1]], refs[s[2]]];
        match solve_p3p(&solving, &refs[s[3]], k) {
            Ok(ts) => ts
                .into_iter()
                .filter_map(|t| reprojection_error(&t, k, &refs).ok().map(|(avg, _)| (t, avg)))
                .collect(),
            Err(_) => Vec::new(),
        }
    });
    Ok(per_subset.into_iter().flatten().collect())
}

/// Estimates the world-to-camera transform from at least four reference points.
pub fn calibrate_scene(
    refs: &[ReferencePoint],
    k: &CameraIntrinsics,
    surveyed_rsu: Option<&WorldPoint>,
) -> Result<CalibrationResult> {
    let candidates = calibration_candidates(refs, k)?;
    let mut best: Option<(WorldCameraTransform, f64)> = None;
    for (t, err) in candidates {
        // Strict comparison keeps the earliest subset on ties.
        if err.is_finite() && best.is_none_or(|(_, b)| err < b) {
            best = Some((t, err));
        }
    }
    let (transform, _) = best.ok_or(Error::AllSubsetsDegenerate)?;
    let (reprojection_avg, reprojection_std) = reprojection_error(&transform, k, refs)?;
    let rsu_error = surveyed_rsu.map(|p| (transform.camera_origin_world().vector() - p.vector()).norm());
    Ok(CalibrationResult {
        transform,
        reprojection_avg,
        reprojection_std,
        rsu_error,
    })
}

/// Perturbs a camera-to-world transform with a random small rotation about the
/// world axes (applied Z*Y*X) and a random translation.
pub fn perturb_transform(t_wc: &WorldCameraTransform, spec: &PerturbationSpec) -> Result<WorldCameraTransform> {
    spec.validate()?;
    let mut rng = rng::derive(spec.seed, "perturb_transform");
    let angle = Normal::new(0.0, spec.sigma_theta.to_radians()).expect("sigma validated");
    let shift = Normal::new(0.0, spec.sigma_t).expect("sigma validated");
    let (tx, ty, tz) = (angle.sample(&mut rng), angle.sample(&mut rng), angle.sample(&mut rng));
    let t_p = Vector3::new(shift.sample(&mut rng), shift.sample(&mut rng), shift.sample(&mut rng));

    let rotation = if spec.sigma_theta == 0.0 {
        t_wc.rotation
    } else {
        let r_p = Rotation3::from_axis_angle(&Vector3::z_axis(), tz)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ty)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), tx);
        nearest_rotation(&(r_p.matrix() * t_wc.rotation))
            .ok_or_else(|| Error::InvalidInput("rotation SVD failed".into()))?
    };
    let translation = if spec.sigma_t == 0.0 {
        t_wc.translation
    } else {
        t_wc.translation + t_p
    };
    Ok(WorldCameraTransform::new(rotation, translation))
}

/// Perturbation angles and translation that [`perturb_transform`] draws for `spec`.
pub fn perturbation_draw(spec: &PerturbationSpec) -> ([f64; 3], [f64; 3]) {
    let mut rng = rng::derive(spec.seed, "perturb_transform");
    let angle = Normal::new(0.0, spec.sigma_theta.to_radians()).unwrap_or(Normal::new(0.0, 0.0).unwrap());
    let shift = Normal::new(0.0, spec.sigma_t).unwrap_or(Normal::new(0.0, 0.0).unwrap());
    let a = [angle.sample(&mut rng), angle.sample(&mut rng), angle.sample(&mut rng)];
    let t = [shift.sample(&mut rng), shift.sample(&mut rng), shift.sample(&mut rng)];
    (a, t)
}
